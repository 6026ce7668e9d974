#include "ssts/mechanisms.hpp"

#include "ssts/rng.hpp"

#include <cmath>
#include <numbers>
#include <string>

namespace ssts {

std::string to_string(MechanismKind k) {
  switch (k) {
    case MechanismKind::Linear: return "linear";
    case MechanismKind::TanhAnm: return "tanh";
    case MechanismKind::Mnm: return "mnm";
    case MechanismKind::Pnl: return "pnl";
  }
  return "?";
}

std::string to_string(TanhForm f) { return f == TanhForm::Elementwise ? "elementwise" : "dense"; }

std::string to_string(NoiseFamily f) {
  switch (f) {
    case NoiseFamily::Gaussian: return "gaussian";
    case NoiseFamily::Exponential: return "exponential";
    case NoiseFamily::Gumbel: return "gumbel";
  }
  return "?";
}

MechanismKind parse_mechanism_kind(const std::string& s) {
  if (s == "linear") return MechanismKind::Linear;
  if (s == "tanh" || s == "tanh-anm" || s == "anm") return MechanismKind::TanhAnm;
  if (s == "mnm") return MechanismKind::Mnm;
  if (s == "pnl") return MechanismKind::Pnl;
  throw ParameterError("unknown mechanism kind '" + s + "' (linear|tanh|mnm|pnl)");
}

TanhForm parse_tanh_form(const std::string& s) {
  if (s == "elementwise") return TanhForm::Elementwise;
  if (s == "dense") return TanhForm::Dense;
  throw ParameterError("unknown tanh form '" + s + "' (elementwise|dense)");
}

NoiseFamily parse_noise_family(const std::string& s) {
  if (s == "gaussian") return NoiseFamily::Gaussian;
  if (s == "exponential") return NoiseFamily::Exponential;
  if (s == "gumbel") return NoiseFamily::Gumbel;
  throw ParameterError("unknown noise family '" + s + "' (gaussian|exponential|gumbel)");
}

void MechanismSpec::validate(const WeightedDag& g) const {
  if (!output_scale.empty() && output_scale.size() != static_cast<std::size_t>(g.d()))
    throw ParameterError("MechanismSpec: output_scale has length " + std::to_string(output_scale.size()) +
                         " for a graph with d=" + std::to_string(g.d()));
  for (double a : output_scale)
    if (!std::isfinite(a) || a == 0.0) throw ParameterError("MechanismSpec: output_scale entries must be finite and nonzero");
  if (!(mnm_slope >= 0.0)) throw ParameterError("MechanismSpec: mnm_slope must be >= 0");
  for (const Edge& e : g.edges())
    if (e.weight == 0.0)
      throw ParameterError("MechanismSpec: zero weight on edge " + std::to_string(e.parent) + "->" +
                           std::to_string(e.child) + " makes the mechanism degenerate");
}

SampleMatrix::SampleMatrix(Matrix m, std::string prov) : data(std::move(m)), provenance(std::move(prov)) {
  names.reserve(static_cast<std::size_t>(data.cols()));
  for (Index j = 0; j < data.cols(); ++j) names.push_back("X" + std::to_string(j));
}

void SampleMatrix::validate() const {
  if (data.rows() < 1 || data.cols() < 1) throw InputError("SampleMatrix: needs n >= 1 and d >= 1");
  if (!data.allFinite()) throw InputError("SampleMatrix: contains non-finite entries");
}

namespace {

double output_scale_of(const MechanismSpec& spec, int i) {
  return spec.output_scale.empty() ? 1.0 : spec.output_scale[static_cast<std::size_t>(i)];
}

bool uses_linear_f(const MechanismSpec& spec) { return spec.kind == MechanismKind::Linear; }

// f_i evaluated through an accessor so the sampler can read rows in place.
template <class Get>
double f_value(const MechanismSpec& spec, const WeightedDag& g, int i, Get&& x) {
  const auto& pa = g.parents(i);
  const auto& w = g.parent_weights(i);
  double acc = 0.0;
  if (uses_linear_f(spec)) {
    for (std::size_t k = 0; k < pa.size(); ++k) acc += w[k] * x(pa[k]);
    return acc;
  }
  if (spec.tanh_form == TanhForm::Elementwise) {
    for (std::size_t k = 0; k < pa.size(); ++k) acc += w[k] * std::tanh(x(pa[k]));
    return acc;
  }
  if (pa.empty()) return 0.0;
  for (std::size_t k = 0; k < pa.size(); ++k) acc += w[k] * x(pa[k]);
  return output_scale_of(spec, i) * std::tanh(acc);
}

template <class Get>
double mnm_scale(const MechanismSpec& spec, const WeightedDag& g, int i, Get&& x) {
  const auto& pa = g.parents(i);
  const auto& w = g.parent_weights(i);
  double u = 0.0;
  for (std::size_t k = 0; k < pa.size(); ++k) u += w[k] * x(pa[k]);
  return 1.0 + spec.mnm_slope * std::abs(std::tanh(u));
}

void require_differentiable(const MechanismSpec& spec) {
  if (spec.kind == MechanismKind::Pnl)
    throw UnsupportedError("analytic mechanism derivatives are not provided for post-nonlinear models");
}

}  // namespace

double mech_value(const MechanismSpec& spec, const WeightedDag& g, int i, const Eigen::Ref<const Vector>& x) {
  return f_value(spec, g, i, [&](int j) { return x[j]; });
}

Vector mech_grad(const MechanismSpec& spec, const WeightedDag& g, int i, const Eigen::Ref<const Vector>& x) {
  require_differentiable(spec);
  Vector grad = Vector::Zero(g.d());
  const auto& pa = g.parents(i);
  const auto& w = g.parent_weights(i);
  if (uses_linear_f(spec)) {
    for (std::size_t k = 0; k < pa.size(); ++k) grad[pa[k]] = w[k];
  } else if (spec.tanh_form == TanhForm::Elementwise) {
    for (std::size_t k = 0; k < pa.size(); ++k) {
      const double t = std::tanh(x[pa[k]]);
      grad[pa[k]] = w[k] * (1.0 - t * t);
    }
  } else if (!pa.empty()) {
    double u = 0.0;
    for (std::size_t k = 0; k < pa.size(); ++k) u += w[k] * x[pa[k]];
    const double t = std::tanh(u);
    const double a = output_scale_of(spec, i);
    for (std::size_t k = 0; k < pa.size(); ++k) grad[pa[k]] = a * w[k] * (1.0 - t * t);
  }
  return grad;
}

Vector mech_hess_diag(const MechanismSpec& spec, const WeightedDag& g, int i, const Eigen::Ref<const Vector>& x) {
  require_differentiable(spec);
  Vector h = Vector::Zero(g.d());
  if (uses_linear_f(spec)) return h;
  const auto& pa = g.parents(i);
  const auto& w = g.parent_weights(i);
  if (spec.tanh_form == TanhForm::Elementwise) {
    for (std::size_t k = 0; k < pa.size(); ++k) {
      const double t = std::tanh(x[pa[k]]);
      h[pa[k]] = -2.0 * w[k] * t * (1.0 - t * t);
    }
  } else if (!pa.empty()) {
    double u = 0.0;
    for (std::size_t k = 0; k < pa.size(); ++k) u += w[k] * x[pa[k]];
    const double t = std::tanh(u);
    const double a = output_scale_of(spec, i);
    for (std::size_t k = 0; k < pa.size(); ++k) h[pa[k]] = -2.0 * a * w[k] * w[k] * t * (1.0 - t * t);
  }
  return h;
}

Matrix mech_hessian(const MechanismSpec& spec, const WeightedDag& g, int i, const Eigen::Ref<const Vector>& x) {
  require_differentiable(spec);
  Matrix h = Matrix::Zero(g.d(), g.d());
  if (uses_linear_f(spec)) return h;
  const auto& pa = g.parents(i);
  const auto& w = g.parent_weights(i);
  if (spec.tanh_form == TanhForm::Elementwise) {
    for (std::size_t k = 0; k < pa.size(); ++k) {
      const double t = std::tanh(x[pa[k]]);
      h(pa[k], pa[k]) = -2.0 * w[k] * t * (1.0 - t * t);
    }
  } else if (!pa.empty()) {
    double u = 0.0;
    for (std::size_t k = 0; k < pa.size(); ++k) u += w[k] * x[pa[k]];
    const double t = std::tanh(u);
    const double c = -2.0 * output_scale_of(spec, i) * t * (1.0 - t * t);
    for (std::size_t a = 0; a < pa.size(); ++a)
      for (std::size_t b = 0; b < pa.size(); ++b) h(pa[a], pa[b]) = c * w[a] * w[b];
  }
  return h;
}

double draw_unit_noise(NoiseFamily family, Engine& rng) {
  switch (family) {
    case NoiseFamily::Gaussian: {
      std::normal_distribution<double> n(0.0, 1.0);
      return n(rng);
    }
    case NoiseFamily::Exponential: {
      std::exponential_distribution<double> e(1.0);
      return e(rng) - 1.0;
    }
    case NoiseFamily::Gumbel: {
      std::extreme_value_distribution<double> gmb(0.0, 1.0);
      return gmb(rng) - std::numbers::egamma;
    }
  }
  return 0.0;
}

SampleMatrix sample(const WeightedDag& g, const MechanismSpec& spec, Index n, std::uint64_t seed) {
  if (n < 1) throw ParameterError("sample: n must be >= 1");
  spec.validate(g);
  const int d = g.d();
  Matrix noise(n, d);
#pragma omp parallel for schedule(static)
  for (Index r = 0; r < n; ++r) {
    Engine rng = make_engine(seed, kTagNoise, static_cast<std::uint64_t>(r));
    for (int i = 0; i < d; ++i) noise(r, i) = g.sigma(i) * draw_unit_noise(spec.noise, rng);
  }

  Matrix x = Matrix::Zero(n, d);
  for (int i : g.topological_order()) {
#pragma omp parallel for schedule(static)
    for (Index r = 0; r < n; ++r) {
      auto row = [&](int j) { return x(r, j); };
      const double f = f_value(spec, g, i, row);
      switch (spec.kind) {
        case MechanismKind::Linear:
        case MechanismKind::TanhAnm: x(r, i) = f + noise(r, i); break;
        case MechanismKind::Mnm: x(r, i) = f + mnm_scale(spec, g, i, row) * noise(r, i); break;
        case MechanismKind::Pnl: x(r, i) = f + noise(r, i); break;
      }
    }
    auto col = x.col(i);
    if (spec.kind == MechanismKind::Pnl) {
      if (!col.allFinite()) throw GenerationError("PNL inner value overflow at node " + std::to_string(i), i);
      if (spec.pnl_standardize) {
        const double mean = col.mean();
        const double var = (col.array() - mean).square().mean();
        const double sd = std::sqrt(var);
        if (!std::isfinite(sd) || !(sd > 0.0))
          throw GenerationError("PNL standardization failed (scale " + std::to_string(sd) + ") at node " +
                                    std::to_string(i),
                                i);
        col = ((col.array() - mean) / sd).matrix();
      }
      col = col.array().cube().matrix();
    }
    if (!col.allFinite()) throw GenerationError("non-finite sample value at node " + std::to_string(i), i);
  }
  return SampleMatrix(std::move(x));
}

NoiseDerivs noise_neg_logpdf_derivs(NoiseFamily family, double e, double sigma) {
  switch (family) {
    case NoiseFamily::Gaussian: {
      const double s2 = sigma * sigma;
      return {e / s2, 1.0 / s2};
    }
    case NoiseFamily::Gumbel: {
      // Raw Gumbel variable g = e + gamma*sigma; -log p = g/sigma + exp(-g/sigma) + log sigma.
      const double ex = std::exp(-(e / sigma + std::numbers::egamma));
      return {(1.0 - ex) / sigma, ex / (sigma * sigma)};
    }
    case NoiseFamily::Exponential: break;
  }
  throw UnsupportedError("exponential noise has no smooth log-density; oracle Hessians need gaussian or gumbel noise");
}

double noise_logpdf(NoiseFamily family, double e, double sigma) {
  switch (family) {
    case NoiseFamily::Gaussian:
      return -0.5 * e * e / (sigma * sigma) - 0.5 * std::log(2.0 * std::numbers::pi * sigma * sigma);
    case NoiseFamily::Gumbel: {
      const double z = e / sigma + std::numbers::egamma;
      return -z - std::exp(-z) - std::log(sigma);
    }
    case NoiseFamily::Exponential: {
      const double z = e / sigma + 1.0;
      return z < 0.0 ? -std::numeric_limits<double>::infinity() : -z - std::log(sigma);
    }
  }
  return 0.0;
}

double anm_log_density(const MechanismSpec& spec, const WeightedDag& g, const Eigen::Ref<const Vector>& x) {
  if (spec.kind != MechanismKind::Linear && spec.kind != MechanismKind::TanhAnm)
    throw UnsupportedError("anm_log_density: only additive-noise mechanisms have this factorization");
  double lp = 0.0;
  for (int k = 0; k < g.d(); ++k) lp += noise_logpdf(spec.noise, x[k] - mech_value(spec, g, k, x), g.sigma(k));
  return lp;
}

}  // namespace ssts
