#pragma once

#include "ssts/dag.hpp"
#include "ssts/hessian.hpp"
#include "ssts/sjim.hpp"
#include "ssts/types.hpp"

#include <cstddef>
#include <string>
#include <vector>

namespace ssts {

enum class SortMode { Expected, ExactSamplewise, Patched };
enum class LeafCriterion { DiagEnergy, Cv2 };

std::string to_string(SortMode m);
std::string to_string(LeafCriterion c);
SortMode parse_sort_mode(const std::string& s);
LeafCriterion parse_leaf_criterion(const std::string& s);

struct SortConfig {
  double gamma = 0.05;
  double ridge = 1e-4;
  LeafCriterion criterion = LeafCriterion::DiagEnergy;
  SortMode mode = SortMode::Expected;
  StreamOptions stream;
  // Exact mode caches all per-sample Hessians when they fit in this budget,
  // and otherwise recomputes them at every step.
  std::size_t exact_cache_bytes = std::size_t{256} << 20;
  // Exact mode logs a warning when N * d^3 exceeds this.
  double exact_cost_budget = 1e11;
  // When non-empty, the working SJIM is written as CSV after every step.
  std::string snapshot_dir;

  // Throws ParameterError on gamma outside [0, 1), negative ridge, or
  // the cv2 criterion outside exact mode.
  void validate() const;
};

struct SortStep {
  NodeSet block;           // nodes in extraction order (ascending criterion value)
  double min_value = 0.0;  // minimum criterion value over the active set
  double condition = 1.0;  // pivot condition estimate
};

struct SortTrace {
  TopoOrder order;
  int block_iters = 0;
  std::vector<SortStep> steps;
  double t_rep = 0.0;   // seconds spent producing Hessian information
  double t_disc = 0.0;  // seconds in the elimination loop
  // Peak bytes of matrices resident during extraction (working SJIM plus the
  // largest pivot/update workspace).
  std::size_t workspace_bytes = 0;
  std::string mode;
  std::string criterion;
};

// Block of nodes within gamma of the minimum: {k : v_k <= m + gamma |m|},
// sorted ascending by (value, node).
NodeSet select_block(const std::vector<DiagEntry>& values, double gamma);

// Algorithm 1 on a prebuilt SJIM (expected mode). The state is consumed.
SortTrace block_ssts(SjimState state, const SortConfig& cfg);

// Schur complement taken per sample, then averaged; the working matrix is
// E[Schur(H(x))] at every step.
SortTrace exact_samplewise_ssts(const HessianProvider& provider, const SampleMatrix& data, const SortConfig& cfg);

// E over samples of the per-sample marginal after eliminating `blocks` in
// sequence. Returns the matrix over the remaining nodes (ascending ids).
Matrix exact_marginal(const HessianProvider& provider, const SampleMatrix& data, const std::vector<NodeSet>& blocks,
                      double ridge, const StreamOptions& opt = {});

// Schur elimination of `leaf_block` followed by the covariance correction
//   Delta = -(E[H_SB K H_BS] - E[H_SB] K E[H_BS]),  K = (M_BB + ridge I)^{-1},
// using raw per-sample off-diagonal blocks. Exact at the first step; later
// steps use joint rather than marginal blocks.
SjimState covariance_patch(SjimState state, const HessianProvider& provider, const SampleMatrix& data,
                           const NodeSet& leaf_block, const StreamOptions& opt = {}, double* condition = nullptr);

// Var_x(H_ii(x)) / E_x[H_ii(x)]^2 for each active node, on raw Hessians.
// Throws CriterionError when a mean diagonal is numerically zero.
std::vector<DiagEntry> leaf_criterion_cv2(const HessianProvider& provider, const SampleMatrix& data,
                                          const NodeSet& active, const StreamOptions& opt = {});

// Dispatches on cfg.mode; `state` is only used by expected and patched modes
// and may be built on demand from the provider.
SortTrace run_sort(const HessianProvider& provider, const SampleMatrix& data, const SortConfig& cfg);

}  // namespace ssts
