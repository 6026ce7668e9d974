#pragma once

#include "ssts/dag.hpp"
#include "ssts/mechanisms.hpp"
#include "ssts/types.hpp"

#include <algorithm>
#include <cstddef>
#include <memory>
#include <string>

namespace ssts {

struct ProviderCaps {
  bool per_sample = false;
  bool streaming_mean = true;
  bool offdiag_samples = false;
};

struct StreamOptions {
  // Samples processed per vectorized chunk (neural provider).
  Index micro_batch = 64;
  // Use the OpenMP reduction; false selects the serial reference kernel.
  bool parallel = true;
};

/// Analytic account of the matrices resident while a mean Hessian is built.
/// Streaming holds the accumulators and scratch; finishing holds the output
/// and whatever is needed to form it. The peak is the larger phase.
struct MemoryEstimate {
  std::size_t accumulator_bytes = 0;  // running sums (with Kahan compensation)
  std::size_t scratch_bytes = 0;      // per-thread per-sample / micro-batch buffers
  std::size_t output_bytes = 0;       // the d x d result
  std::size_t finalize_bytes = 0;     // buffers alive next to the output while it is formed
  std::size_t total() const {
    return std::max(accumulator_bytes + scratch_bytes, output_bytes + finalize_bytes);
  }
};

/// Source of H(x) = -grad^2 log p(x), per sample and/or as a streamed mean.
class HessianProvider {
 public:
  virtual ~HessianProvider() = default;

  virtual int dim() const = 0;
  virtual ProviderCaps caps() const = 0;
  virtual std::string name() const = 0;

  // Writes H(x) into `out` (resized to d x d). Learned providers may return a
  // non-symmetric matrix; callers symmetrize. Throws UnsupportedError when the
  // provider has no per-sample capability.
  virtual void sample_hessian(const Eigen::Ref<const Vector>& x, Matrix& out) const;

  // Streaming mean of H over the rows of `data`. Throws BuildError naming the
  // first sample whose Hessian is non-finite.
  virtual Matrix mean_hessian(const SampleMatrix& data, const StreamOptions& opt = {}) const;

  virtual MemoryEstimate build_memory(const StreamOptions& opt = {}) const;
};

// Exact sample-wise Hessian of -log p for an additive-noise model:
//   H(x) = sum_k psi''(eps_k) v_k v_k^T - psi'(eps_k) grad^2 f_k,  v_k = e_k - grad f_k.
// Supports linear and tanh mechanisms with gaussian or gumbel noise.
Matrix oracle_hessian(const WeightedDag& g, const MechanismSpec& spec, const Eigen::Ref<const Vector>& x);

// (I - B)^T diag(sigma^2)^{-1} (I - B).
Matrix linear_population_precision(const WeightedDag& g);

// (centered sample covariance + ridge I)^{-1}. Throws InversionError when the
// covariance is numerically singular.
Matrix linear_empirical_precision(const SampleMatrix& data, double ridge = 0.0);

class OracleProvider final : public HessianProvider {
 public:
  OracleProvider(WeightedDag g, MechanismSpec spec);
  int dim() const override { return g_.d(); }
  ProviderCaps caps() const override { return {true, true, true}; }
  std::string name() const override { return "oracle"; }
  void sample_hessian(const Eigen::Ref<const Vector>& x, Matrix& out) const override;

  const WeightedDag& graph() const { return g_; }
  const MechanismSpec& spec() const { return spec_; }

 private:
  WeightedDag g_;
  MechanismSpec spec_;
};

/// Constant Hessian provider: the same precision matrix at every sample.
class ConstantHessianProvider : public HessianProvider {
 public:
  ConstantHessianProvider(Matrix precision, std::string name);
  int dim() const override { return static_cast<int>(precision_.rows()); }
  ProviderCaps caps() const override { return {true, true, true}; }
  std::string name() const override { return name_; }
  void sample_hessian(const Eigen::Ref<const Vector>& x, Matrix& out) const override;
  Matrix mean_hessian(const SampleMatrix& data, const StreamOptions& opt = {}) const override;
  MemoryEstimate build_memory(const StreamOptions& opt = {}) const override;
  const Matrix& precision() const { return precision_; }

 private:
  Matrix precision_;
  std::string name_;
};

class LinearPopulationProvider final : public ConstantHessianProvider {
 public:
  explicit LinearPopulationProvider(const WeightedDag& g);
};

class LinearEmpiricalProvider final : public ConstantHessianProvider {
 public:
  LinearEmpiricalProvider(const SampleMatrix& data, double ridge = 0.0);
};

/// Streamed statistics of the off-diagonal block H_{S,B}(x), S = all \ B.
struct OffdiagBlockStats {
  NodeSet remaining;
  NodeSet leaves;
  Index n = 0;
  Matrix mean;     // E[H_SB]            (|S| x |B|)
  Matrix mean_sq;  // E[H_SB .* H_SB]    (|S| x |B|)
  Matrix weighted; // E[H_SB W H_BS]     (|S| x |S|), empty when no weight was given

  Matrix variance() const;  // entrywise sample variance (1/N normalization)
};

// Streams symmetrized per-sample Hessians and accumulates the statistics of
// H_{S,B}. `remaining` defaults to every node outside `leaf_set`. `weight`
// (|B| x |B|) enables the weighted second moment used by covariance patching.
OffdiagBlockStats offdiag_block_samples(const HessianProvider& provider, const SampleMatrix& data,
                                        const NodeSet& leaf_set, const Matrix* weight = nullptr,
                                        const NodeSet* remaining = nullptr, const StreamOptions& opt = {});

void require_per_sample(const HessianProvider& provider, const char* what);

}  // namespace ssts
