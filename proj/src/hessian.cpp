#include "ssts/hessian.hpp"

#include "ssts/kernels.hpp"

#include <cmath>
#include <string>

namespace ssts {

void require_per_sample(const HessianProvider& provider, const char* what) {
  if (!provider.caps().per_sample)
    throw UnsupportedError(std::string(what) + " needs per-sample Hessians; provider '" + provider.name() +
                           "' does not supply them");
}

void HessianProvider::sample_hessian(const Eigen::Ref<const Vector>&, Matrix&) const {
  throw UnsupportedError("provider '" + name() + "' has no per-sample Hessians");
}

Matrix HessianProvider::mean_hessian(const SampleMatrix& data, const StreamOptions& opt) const {
  if (data.d() != dim())
    throw InputError("provider dimension " + std::to_string(dim()) + " does not match data with " +
                     std::to_string(data.d()) + " columns");
  require_per_sample(*this, "mean_hessian");
  const Index d = dim();
  auto per_sample = [&](Index r, Matrix& out) { sample_hessian(data.data.row(r).transpose(), out); };
  StreamSum s = opt.parallel ? stream_sum_omp(data.n(), d, d, per_sample) : stream_sum_serial(data.n(), d, d, per_sample);
  if (s.first_bad >= 0)
    throw BuildError("non-finite Hessian at sample " + std::to_string(s.first_bad), s.first_bad);
  s.sum /= static_cast<double>(data.n());
  return std::move(s.sum);
}

MemoryEstimate HessianProvider::build_memory(const StreamOptions& opt) const {
  const std::size_t d2 = static_cast<std::size_t>(dim()) * static_cast<std::size_t>(dim()) * sizeof(double);
  const std::size_t threads = opt.parallel ? static_cast<std::size_t>(max_threads()) : 1;
  MemoryEstimate m;
  m.accumulator_bytes = threads * 2 * d2;
  m.scratch_bytes = threads * d2;
  m.output_bytes = d2;
  return m;
}

Matrix oracle_hessian(const WeightedDag& g, const MechanismSpec& spec, const Eigen::Ref<const Vector>& x) {
  if (spec.kind != MechanismKind::Linear && spec.kind != MechanismKind::TanhAnm)
    throw UnsupportedError("oracle Hessians cover additive-noise mechanisms (linear, tanh) only; got " +
                           to_string(spec.kind));
  const int d = g.d();
  if (x.size() != d) throw InputError("oracle_hessian: x has wrong length");
  Matrix h = Matrix::Zero(d, d);
  std::vector<double> grad;
  std::vector<double> curv;
  for (int k = 0; k < d; ++k) {
    const auto& pa = g.parents(k);
    const auto& w = g.parent_weights(k);
    const std::size_t p = pa.size();
    grad.assign(p, 0.0);
    curv.assign(p, 0.0);
    double f = 0.0;
    double dense_c = 0.0;
    if (spec.kind == MechanismKind::Linear) {
      for (std::size_t a = 0; a < p; ++a) {
        f += w[a] * x[pa[a]];
        grad[a] = w[a];
      }
    } else if (spec.tanh_form == TanhForm::Elementwise) {
      for (std::size_t a = 0; a < p; ++a) {
        const double t = std::tanh(x[pa[a]]);
        f += w[a] * t;
        grad[a] = w[a] * (1.0 - t * t);
        curv[a] = -2.0 * w[a] * t * (1.0 - t * t);
      }
    } else if (p > 0) {
      double u = 0.0;
      for (std::size_t a = 0; a < p; ++a) u += w[a] * x[pa[a]];
      const double t = std::tanh(u);
      const double scale = spec.output_scale.empty() ? 1.0 : spec.output_scale[static_cast<std::size_t>(k)];
      f = scale * t;
      for (std::size_t a = 0; a < p; ++a) grad[a] = scale * w[a] * (1.0 - t * t);
      dense_c = -2.0 * scale * t * (1.0 - t * t);
    }
    const NoiseDerivs nd = noise_neg_logpdf_derivs(spec.noise, x[k] - f, g.sigma(k));

    // psi'' * v v^T with v = e_k - grad f_k.
    h(k, k) += nd.d2;
    for (std::size_t a = 0; a < p; ++a) {
      const double c = -nd.d2 * grad[a];
      h(k, pa[a]) += c;
      h(pa[a], k) += c;
      for (std::size_t b = 0; b < p; ++b) h(pa[a], pa[b]) += nd.d2 * grad[a] * grad[b];
    }
    // -psi' * grad^2 f_k.
    if (spec.kind == MechanismKind::TanhAnm) {
      if (spec.tanh_form == TanhForm::Elementwise) {
        for (std::size_t a = 0; a < p; ++a) h(pa[a], pa[a]) -= nd.d1 * curv[a];
      } else {
        for (std::size_t a = 0; a < p; ++a)
          for (std::size_t b = 0; b < p; ++b) h(pa[a], pa[b]) -= nd.d1 * dense_c * w[a] * w[b];
      }
    }
  }
  return h;
}

Matrix linear_population_precision(const WeightedDag& g) {
  const int d = g.d();
  const Matrix a = Matrix::Identity(d, d) - g.weight_matrix();
  Vector inv_var(d);
  for (int i = 0; i < d; ++i) inv_var[i] = 1.0 / (g.sigma(i) * g.sigma(i));
  Matrix p = a.transpose() * inv_var.asDiagonal() * a;
  return 0.5 * (p + p.transpose());
}

Matrix linear_empirical_precision(const SampleMatrix& data, double ridge) {
  data.validate();
  if (!(ridge >= 0.0)) throw ParameterError("linear_empirical_precision: ridge must be >= 0");
  const Matrix centered = data.data.rowwise() - data.data.colwise().mean();
  Matrix cov = (centered.transpose() * centered) / static_cast<double>(data.n());
  cov.diagonal().array() += ridge;
  Eigen::LLT<Matrix> llt(cov);
  bool ok = llt.info() == Eigen::Success;
  if (ok) {
    const Vector piv = llt.matrixLLT().diagonal().array().square();
    ok = piv.minCoeff() > 1e-12 * piv.maxCoeff();
  }
  if (!ok)
    throw InversionError("sample covariance is numerically singular" +
                         std::string(ridge == 0.0 ? "; pass a positive ridge" : "; increase the ridge"));
  Matrix prec = llt.solve(Matrix::Identity(data.d(), data.d()));
  return 0.5 * (prec + prec.transpose());
}

OracleProvider::OracleProvider(WeightedDag g, MechanismSpec spec) : g_(std::move(g)), spec_(std::move(spec)) {
  spec_.validate(g_);
  if (spec_.kind != MechanismKind::Linear && spec_.kind != MechanismKind::TanhAnm)
    throw UnsupportedError("oracle provider supports linear and tanh additive-noise mechanisms only; got " +
                           to_string(spec_.kind));
  if (spec_.noise == NoiseFamily::Exponential)
    throw UnsupportedError("oracle provider needs a smooth noise density (gaussian or gumbel)");
}

void OracleProvider::sample_hessian(const Eigen::Ref<const Vector>& x, Matrix& out) const {
  out = oracle_hessian(g_, spec_, x);
}

ConstantHessianProvider::ConstantHessianProvider(Matrix precision, std::string name)
    : precision_(std::move(precision)), name_(std::move(name)) {}

void ConstantHessianProvider::sample_hessian(const Eigen::Ref<const Vector>&, Matrix& out) const { out = precision_; }

Matrix ConstantHessianProvider::mean_hessian(const SampleMatrix& data, const StreamOptions&) const {
  if (data.d() != dim())
    throw InputError("provider dimension " + std::to_string(dim()) + " does not match data with " +
                     std::to_string(data.d()) + " columns");
  return precision_;
}

MemoryEstimate ConstantHessianProvider::build_memory(const StreamOptions&) const {
  MemoryEstimate m;
  m.output_bytes = static_cast<std::size_t>(precision_.size()) * sizeof(double);
  return m;
}

LinearPopulationProvider::LinearPopulationProvider(const WeightedDag& g)
    : ConstantHessianProvider(linear_population_precision(g), "linear-pop") {}

LinearEmpiricalProvider::LinearEmpiricalProvider(const SampleMatrix& data, double ridge)
    : ConstantHessianProvider(linear_empirical_precision(data, ridge), "linear-emp") {}

Matrix OffdiagBlockStats::variance() const { return (mean_sq.array() - mean.array().square()).matrix(); }

OffdiagBlockStats offdiag_block_samples(const HessianProvider& provider, const SampleMatrix& data,
                                        const NodeSet& leaf_set, const Matrix* weight, const NodeSet* remaining,
                                        const StreamOptions& opt) {
  require_per_sample(provider, "offdiag_block_samples");
  if (!provider.caps().offdiag_samples)
    throw UnsupportedError("provider '" + provider.name() + "' cannot stream off-diagonal blocks");
  const int d = provider.dim();
  if (data.d() != d) throw InputError("offdiag_block_samples: data dimension mismatch");
  std::vector<bool> in_leaf(static_cast<std::size_t>(d), false);
  for (int l : leaf_set) {
    if (l < 0 || l >= d) throw InputError("offdiag_block_samples: leaf index out of range");
    in_leaf[static_cast<std::size_t>(l)] = true;
  }
  OffdiagBlockStats st;
  st.leaves = leaf_set;
  if (remaining) {
    st.remaining = *remaining;
  } else {
    for (int i = 0; i < d; ++i)
      if (!in_leaf[static_cast<std::size_t>(i)]) st.remaining.push_back(i);
  }
  st.n = data.n();
  const Index s = static_cast<Index>(st.remaining.size());
  const Index k = static_cast<Index>(leaf_set.size());
  if (weight && (weight->rows() != k || weight->cols() != k))
    throw InputError("offdiag_block_samples: weight must be |B| x |B|");
  const Index wcols = weight ? s : 0;

  auto per_sample = [&](Index r, Matrix& out) {
    Matrix h;
    provider.sample_hessian(data.data.row(r).transpose(), h);
    const Matrix sym = 0.5 * (h + h.transpose());
    const Matrix block = sym(st.remaining, st.leaves);
    out.leftCols(k) = block;
    out.middleCols(k, k) = block.array().square().matrix();
    if (weight) out.rightCols(wcols) = block * (*weight) * block.transpose();
  };
  const Index cols = 2 * k + wcols;
  StreamSum sum = opt.parallel ? stream_sum_omp(data.n(), s, cols, per_sample)
                               : stream_sum_serial(data.n(), s, cols, per_sample);
  if (sum.first_bad >= 0)
    throw BuildError("non-finite Hessian block at sample " + std::to_string(sum.first_bad), sum.first_bad);
  const Matrix mean = sum.sum / static_cast<double>(data.n());
  st.mean = mean.leftCols(k);
  st.mean_sq = mean.middleCols(k, k);
  if (weight) st.weighted = mean.rightCols(wcols);
  return st;
}

}  // namespace ssts
