#include "ssts/kernels.hpp"

#include <cmath>
#include <string>

namespace ssts {

namespace {

std::vector<int> to_vec(std::span<const int> s) { return {s.begin(), s.end()}; }

constexpr double kSingularRatio = 1e-14;

}  // namespace

PivotSolver::PivotSolver(const Matrix& block) {
  if (block.rows() == 0) return;
  if (!block.allFinite()) throw EliminationError("pivot block contains non-finite entries");
  llt_.compute(block);
  if (llt_.info() == Eigen::Success) {
    const Vector piv = llt_.matrixLLT().diagonal().array().square();
    const double lo = piv.minCoeff();
    const double hi = piv.maxCoeff();
    if (lo > kSingularRatio * hi) {
      pd_ = true;
      cond_ = hi / lo;
      return;
    }
  }
  ldlt_.compute(block);
  const Vector dv = ldlt_.vectorD().cwiseAbs();
  const double hi = dv.maxCoeff();
  const double lo = dv.minCoeff();
  if (ldlt_.info() != Eigen::Success || !(lo > kSingularRatio * hi) || !(hi > 0.0))
    throw EliminationError("pivot block (" + std::to_string(block.rows()) +
                           " nodes) is numerically singular; increase the ridge penalty");
  cond_ = hi / lo;
}

Matrix PivotSolver::solve(const Matrix& rhs) const {
  if (rhs.rows() == 0) return rhs;
  return pd_ ? Matrix(llt_.solve(rhs)) : Matrix(ldlt_.solve(rhs));
}

double schur_update_serial(Matrix& a, std::span<const int> keep, std::span<const int> block, double ridge) {
  const auto k = to_vec(keep);
  const auto b = to_vec(block);
  Matrix pivot = a(b, b);
  pivot.diagonal().array() += ridge;
  PivotSolver solver(pivot);
  if (k.empty()) return solver.condition_estimate();
  const Matrix x = solver.solve(a(b, k));
  const Matrix update = a(k, b) * x;
  a(k, k) -= update;
  return solver.condition_estimate();
}

double schur_update_omp(Matrix& a, std::span<const int> keep, std::span<const int> block, double ridge) {
  const auto k = to_vec(keep);
  const auto b = to_vec(block);
  Matrix pivot = a(b, b);
  pivot.diagonal().array() += ridge;
  PivotSolver solver(pivot);
  const Index s = static_cast<Index>(k.size());
  if (s == 0) return solver.condition_estimate();
  const Matrix g = a(k, b);
  const Matrix x = solver.solve(a(b, k));
#pragma omp parallel
  {
    Vector col(s);
#pragma omp for schedule(dynamic, 8)
    for (Index c = 0; c < s; ++c) {
      col.noalias() = g * x.col(c);
      const Index cc = k[static_cast<std::size_t>(c)];
      for (Index r = 0; r < s; ++r) a(k[static_cast<std::size_t>(r)], cc) -= col[r];
    }
  }
  return solver.condition_estimate();
}

void schur_update_batch_serial(Matrix& stack, Index d, std::span<const int> keep, std::span<const int> block,
                               double ridge) {
  const Index n = stack.cols() / d;
  for (Index smp = 0; smp < n; ++smp) {
    Matrix m = stack.middleCols(smp * d, d);
    try {
      schur_update_serial(m, keep, block, ridge);
    } catch (const EliminationError& e) {
      throw EliminationError(std::string(e.what()) + " (sample " + std::to_string(smp) + ")");
    }
    stack.middleCols(smp * d, d) = m;
  }
}

void schur_update_batch_omp(Matrix& stack, Index d, std::span<const int> keep, std::span<const int> block,
                            double ridge) {
  const Index n = stack.cols() / d;
  const auto k = to_vec(keep);
  const auto b = to_vec(block);
  long bad = -1;
#pragma omp parallel
  {
#pragma omp for schedule(static)
    for (Index smp = 0; smp < n; ++smp) {
      auto view = stack.middleCols(smp * d, d);
      Matrix pivot = view(b, b);
      pivot.diagonal().array() += ridge;
      try {
        PivotSolver solver(pivot);
        if (!k.empty()) {
          const Matrix x = solver.solve(view(b, k));
          const Matrix upd = view(k, b) * x;
          view(k, k) -= upd;
        }
      } catch (const EliminationError&) {
#pragma omp critical(ssts_batch_bad)
        if (bad < 0 || smp < bad) bad = static_cast<long>(smp);
      }
    }
  }
  if (bad >= 0)
    throw EliminationError("per-sample pivot block is numerically singular (sample " + std::to_string(bad) +
                           "); increase the ridge penalty");
}

}  // namespace ssts
