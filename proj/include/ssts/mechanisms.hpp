#pragma once

#include "ssts/dag.hpp"
#include "ssts/rng.hpp"
#include "ssts/types.hpp"

#include <cstdint>
#include <string>
#include <vector>

namespace ssts {

enum class MechanismKind { Linear, TanhAnm, Mnm, Pnl };
// Elementwise: f_i = sum_j w_ji tanh(x_j). Dense: f_i = a_i tanh(sum_j w_ji x_j).
enum class TanhForm { Elementwise, Dense };
enum class NoiseFamily { Gaussian, Exponential, Gumbel };

std::string to_string(MechanismKind k);
std::string to_string(TanhForm f);
std::string to_string(NoiseFamily f);
MechanismKind parse_mechanism_kind(const std::string& s);
TanhForm parse_tanh_form(const std::string& s);
NoiseFamily parse_noise_family(const std::string& s);

/// Structural-equation family. Edge weights and noise scales live in the
/// WeightedDag; this carries the functional form around them. MNM and PNL use
/// the tanh mechanism (in `tanh_form`) as their inner f_i.
struct MechanismSpec {
  MechanismKind kind = MechanismKind::TanhAnm;
  TanhForm tanh_form = TanhForm::Elementwise;
  NoiseFamily noise = NoiseFamily::Gaussian;
  // Dense-form output scale a_i per node; empty means a_i = 1.
  std::vector<double> output_scale;
  // MNM scale g_i = 1 + mnm_slope * |tanh(w^T x_pa)|.
  double mnm_slope = 0.5;
  // PNL: standardize (f_i + eps_i) over the sample before cubing.
  bool pnl_standardize = true;

  void validate(const WeightedDag& g) const;
};

/// N x d observational dataset.
struct SampleMatrix {
  Matrix data;
  std::vector<std::string> names;
  std::string provenance;

  SampleMatrix() = default;
  explicit SampleMatrix(Matrix m, std::string provenance = {});

  Index n() const { return data.rows(); }
  Index d() const { return data.cols(); }
  // Throws InputError on empty data or non-finite entries.
  void validate() const;
};

// Value of f_i at a full d-vector x (only parent coordinates are read).
double mech_value(const MechanismSpec& spec, const WeightedDag& g, int i, const Eigen::Ref<const Vector>& x);

// Gradient of f_i over all d coordinates; zero outside pa(i).
Vector mech_grad(const MechanismSpec& spec, const WeightedDag& g, int i, const Eigen::Ref<const Vector>& x);

// Second partials d^2 f_i / dx_k^2 for every k; zero outside pa(i).
Vector mech_hess_diag(const MechanismSpec& spec, const WeightedDag& g, int i, const Eigen::Ref<const Vector>& x);

// Full d x d Hessian of f_i, including mixed partials of the dense tanh form.
Matrix mech_hessian(const MechanismSpec& spec, const WeightedDag& g, int i, const Eigen::Ref<const Vector>& x);

// Centered unit-scale noise draw for the family (multiply by sigma_i).
double draw_unit_noise(NoiseFamily family, Engine& rng);

// Draws n i.i.d. rows. Row r uses its own RNG stream, so the output depends
// only on (g, spec, n, seed). PNL overflow raises GenerationError(node).
SampleMatrix sample(const WeightedDag& g, const MechanismSpec& spec, Index n, std::uint64_t seed);

/// Derivatives of the negative log-density psi(e) = -log p_eps(e) of a
/// centered noise variable with scale sigma. Exponential noise has no smooth
/// density and is rejected.
struct NoiseDerivs {
  double d1;  // psi'(e)
  double d2;  // psi''(e)
};
NoiseDerivs noise_neg_logpdf_derivs(NoiseFamily family, double e, double sigma);
double noise_logpdf(NoiseFamily family, double e, double sigma);

// log p(x) for an additive-noise model (linear or tanh-anm).
double anm_log_density(const MechanismSpec& spec, const WeightedDag& g, const Eigen::Ref<const Vector>& x);

}  // namespace ssts
