#include "ssts/prune.hpp"

#include <algorithm>
#include <cmath>
#include <exception>
#include <string>

namespace ssts {

std::string to_string(FeatureMap f) { return f == FeatureMap::Raw ? "raw" : "raw+tanh"; }

FeatureMap parse_feature_map(const std::string& s) {
  if (s == "raw") return FeatureMap::Raw;
  if (s == "raw+tanh" || s == "raw_tanh" || s == "tanh") return FeatureMap::RawTanh;
  throw ParameterError("unknown feature map '" + s + "' (raw|raw+tanh)");
}

void PruneConfig::validate() const {
  if (std::isnan(penalty_weight) || std::isinf(penalty_weight))
    throw ParameterError("PruneConfig.penalty_weight must be finite");
  if (!(coef_threshold >= 0.0)) throw ParameterError("PruneConfig.coef_threshold must be >= 0");
  if (max_iter < 1) throw ParameterError("PruneConfig.max_iter must be >= 1");
  if (!(tol > 0.0)) throw ParameterError("PruneConfig.tol must be > 0");
}

LassoResult lasso_cd(const Matrix& x, const Vector& y, double lambda, int max_iter, double tol) {
  const Index n = x.rows();
  const Index p = x.cols();
  LassoResult res;
  res.coef = Vector::Zero(p);
  const double ymean = y.mean();
  res.intercept = ymean;
  if (p == 0) {
    res.converged = true;
    return res;
  }
  const Vector mu = x.colwise().mean().transpose();
  const Matrix xc = x.rowwise() - mu.transpose();
  Vector sd = (xc.colwise().squaredNorm() / static_cast<double>(n)).cwiseSqrt().transpose();
  std::vector<char> live(static_cast<std::size_t>(p));
  for (Index j = 0; j < p; ++j) live[static_cast<std::size_t>(j)] = sd[j] > 1e-12 * (1.0 + std::abs(mu[j]));
  for (Index j = 0; j < p; ++j)
    if (!live[static_cast<std::size_t>(j)]) sd[j] = 1.0;
  const Matrix xs = xc * sd.cwiseInverse().asDiagonal();
  const Matrix gram = xs.transpose() * xs / static_cast<double>(n);
  const Vector cov = xs.transpose() * (y.array() - ymean).matrix() / static_cast<double>(n);

  Vector b = Vector::Zero(p);
  // grad_j = cov_j - sum_k gram_jk b_k, maintained incrementally.
  Vector grad = cov;
  for (int it = 1; it <= max_iter; ++it) {
    double max_step = 0.0;
    for (Index j = 0; j < p; ++j) {
      if (!live[static_cast<std::size_t>(j)]) continue;
      const double gjj = gram(j, j);
      const double rho = grad[j] + gjj * b[j];
      const double nb = rho > lambda ? (rho - lambda) / gjj : (rho < -lambda ? (rho + lambda) / gjj : 0.0);
      const double step = nb - b[j];
      if (step != 0.0) {
        grad.noalias() -= gram.col(j) * step;
        b[j] = nb;
        max_step = std::max(max_step, std::abs(step));
      }
    }
    res.iterations = it;
    if (!std::isfinite(max_step)) break;
    if (max_step < tol) {
      res.converged = true;
      break;
    }
  }
  res.coef = b.cwiseQuotient(sd);
  res.intercept = ymean - mu.dot(res.coef);
  return res;
}

WeightedDag prune(const TopoOrder& order, const SampleMatrix& data, const PruneConfig& cfg) {
  cfg.validate();
  data.validate();
  const int d = static_cast<int>(data.d());
  order.validate(d);
  const Index n = data.n();
  const auto block_of = order.block_index(d);

  std::vector<std::vector<Edge>> found(static_cast<std::size_t>(d));
  std::vector<double> sigma(static_cast<std::size_t>(d), 1.0);
  std::exception_ptr err;
  int err_node = d;

#pragma omp parallel for schedule(dynamic) if (cfg.parallel)
  for (int i = 0; i < d; ++i) {
    try {
      NodeSet pred;
      for (int j = 0; j < d; ++j)
        if (block_of[static_cast<std::size_t>(j)] < block_of[static_cast<std::size_t>(i)]) pred.push_back(j);
      const Vector y = data.data.col(i);
      const double ymean = y.mean();
      const double ystd = std::sqrt((y.array() - ymean).square().mean());
      if (pred.empty()) {
        sigma[static_cast<std::size_t>(i)] = std::max(ystd, 1e-12);
        continue;
      }
      const Index p = static_cast<Index>(pred.size());
      const Index nf = cfg.feature_map == FeatureMap::Raw ? p : 2 * p;
      Matrix x(n, nf);
      for (Index a = 0; a < p; ++a) {
        x.col(a) = data.data.col(pred[static_cast<std::size_t>(a)]);
        if (nf > p) x.col(p + a) = x.col(a).array().tanh().matrix();
      }
      double lambda = cfg.penalty_weight;
      if (lambda < 0.0)
        lambda = 0.01 * std::sqrt(std::log(static_cast<double>(d)) / static_cast<double>(n)) * ystd;
      const LassoResult fit = lasso_cd(x, y, lambda, cfg.max_iter, cfg.tol);
      if (!fit.converged) throw SolverError("lasso did not converge for node " + std::to_string(i), i);
      const Vector resid = y - x * fit.coef - Vector::Constant(n, fit.intercept);
      sigma[static_cast<std::size_t>(i)] = std::max(std::sqrt(resid.squaredNorm() / static_cast<double>(n)), 1e-12);
      for (Index a = 0; a < p; ++a) {
        double best = fit.coef[a];
        bool keep = std::abs(fit.coef[a]) > cfg.coef_threshold;
        if (nf > p) {
          const double c2 = fit.coef[p + a];
          if (std::abs(c2) > cfg.coef_threshold) {
            if (!keep) best = c2;
            keep = true;
          }
        }
        if (keep) found[static_cast<std::size_t>(i)].push_back({pred[static_cast<std::size_t>(a)], i, best});
      }
    } catch (...) {
#pragma omp critical(ssts_prune_err)
      if (i < err_node) {
        err_node = i;
        err = std::current_exception();
      }
    }
  }
  if (err) std::rethrow_exception(err);
  std::vector<Edge> edges;
  for (const auto& f : found) edges.insert(edges.end(), f.begin(), f.end());
  return WeightedDag(d, std::move(edges), std::move(sigma));
}

}  // namespace ssts
