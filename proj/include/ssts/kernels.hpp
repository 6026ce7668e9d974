#pragma once

// Data-parallel kernels. Each has a plain serial reference (`*_serial`) kept
// for testing and benchmarking, and an OpenMP variant (`*_omp`) used by the
// library. The OpenMP reductions partition work into contiguous per-thread
// ranges and combine partials in thread order, so results are run-to-run
// identical at a fixed thread count.

#include "ssts/types.hpp"

#include <algorithm>
#include <atomic>
#include <exception>
#include <limits>
#include <span>
#include <vector>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace ssts {

inline int max_threads() {
#ifdef _OPENMP
  return omp_get_max_threads();
#else
  return 1;
#endif
}

inline int thread_id() {
#ifdef _OPENMP
  return omp_get_thread_num();
#else
  return 0;
#endif
}

/// Kahan-compensated running sum of equally shaped matrices.
class KahanMatrix {
 public:
  KahanMatrix() = default;
  KahanMatrix(Index rows, Index cols) : sum_(Matrix::Zero(rows, cols)), comp_(Matrix::Zero(rows, cols)) {}

  void add(const Eigen::Ref<const Matrix>& x) {
    for (Index j = 0; j < sum_.cols(); ++j) {
      double* s = sum_.col(j).data();
      double* c = comp_.col(j).data();
      const double* v = x.col(j).data();
      for (Index i = 0; i < sum_.rows(); ++i) {
        const double y = v[i] - c[i];
        const double t = s[i] + y;
        c[i] = (t - s[i]) - y;
        s[i] = t;
      }
    }
  }

  void add(const KahanMatrix& other) { add(Matrix(other.sum_ - other.comp_)); }

  const Matrix& sum() const { return sum_; }
  Matrix release() && { return std::move(sum_); }
  Index rows() const { return sum_.rows(); }
  Index cols() const { return sum_.cols(); }

 private:
  Matrix sum_;
  Matrix comp_;
};

/// Kahan-compensated scalar sum.
struct KahanSum {
  double sum = 0.0;
  double comp = 0.0;
  void add(double x) {
    const double y = x - comp;
    const double t = sum + y;
    comp = (t - sum) - y;
    sum = t;
  }
};

// Result of a streaming per-sample reduction. `first_bad` is the smallest
// sample index whose contribution was non-finite, or -1.
struct StreamSum {
  Matrix sum;
  long first_bad = -1;
};

/// Serial reference: sum over samples r in [0, n) of fn(r, scratch), where fn
/// fills a rows x cols scratch matrix.
template <class Fn>
StreamSum stream_sum_serial(Index n, Index rows, Index cols, Fn&& fn) {
  KahanMatrix acc(rows, cols);
  Matrix scratch(rows, cols);
  StreamSum out;
  for (Index r = 0; r < n; ++r) {
    fn(r, scratch);
    if (!scratch.allFinite()) {
      out.first_bad = static_cast<long>(r);
      break;
    }
    acc.add(scratch);
  }
  out.sum = std::move(acc).release();
  return out;
}

/// OpenMP variant: one Kahan accumulator per thread over a contiguous range.
/// An exception thrown by `fn` is rethrown after the parallel region (the one
/// from the smallest sample index wins).
template <class Fn>
StreamSum stream_sum_omp(Index n, Index rows, Index cols, Fn&& fn) {
  const int threads = static_cast<int>(std::max<Index>(1, std::min<Index>(max_threads(), n)));
  std::vector<KahanMatrix> partial(static_cast<std::size_t>(threads));
  std::vector<std::exception_ptr> errors(static_cast<std::size_t>(threads));
  std::vector<Index> error_at(static_cast<std::size_t>(threads), -1);
  std::atomic<long> first_bad{std::numeric_limits<long>::max()};
#pragma omp parallel num_threads(threads)
  {
    const int t = thread_id();
    const Index begin = n * t / threads;
    const Index end = n * (t + 1) / threads;
    KahanMatrix acc(rows, cols);
    Matrix scratch(rows, cols);
    for (Index r = begin; r < end; ++r) {
      if (static_cast<long>(r) > first_bad.load(std::memory_order_relaxed)) break;
      try {
        fn(r, scratch);
      } catch (...) {
        errors[static_cast<std::size_t>(t)] = std::current_exception();
        error_at[static_cast<std::size_t>(t)] = r;
        break;
      }
      if (!scratch.allFinite()) {
        long cur = first_bad.load();
        while (static_cast<long>(r) < cur && !first_bad.compare_exchange_weak(cur, static_cast<long>(r))) {
        }
        break;
      }
      acc.add(scratch);
    }
    partial[static_cast<std::size_t>(t)] = std::move(acc);
  }
  for (std::size_t t = 0; t < errors.size(); ++t)
    if (errors[t]) std::rethrow_exception(errors[t]);
  StreamSum out;
  KahanMatrix total(rows, cols);
  for (const auto& p : partial) total.add(p);
  out.sum = std::move(total).release();
  const long bad = first_bad.load();
  out.first_bad = bad == std::numeric_limits<long>::max() ? -1 : bad;
  return out;
}

/// Factorization of the pivot block (A_BB + ridge I) used by Schur updates.
/// Cholesky first; pivoted LDL^T when the block is not positive definite.
/// Throws EliminationError if the block is numerically singular.
class PivotSolver {
 public:
  explicit PivotSolver(const Matrix& block);
  Matrix solve(const Matrix& rhs) const;
  bool positive_definite() const { return pd_; }
  // Ratio of the largest to smallest pivot magnitude; cheap condition proxy.
  double condition_estimate() const { return cond_; }

 private:
  Eigen::LLT<Matrix> llt_;
  Eigen::LDLT<Matrix> ldlt_;
  bool pd_ = false;
  double cond_ = 1.0;
};

/// In-place Schur complement on a full d x d matrix over an index map:
///   A(keep, keep) -= A(keep, block) (A(block, block) + ridge I)^{-1} A(block, keep)
/// Rows/columns outside `keep` are left untouched. Returns the pivot
/// condition estimate.
double schur_update_serial(Matrix& a, std::span<const int> keep, std::span<const int> block, double ridge);
double schur_update_omp(Matrix& a, std::span<const int> keep, std::span<const int> block, double ridge);

/// Same update applied to a batch of per-sample matrices stored back to back
/// (sample s occupies columns [s*d, (s+1)*d) of `stack`).
void schur_update_batch_serial(Matrix& stack, Index d, std::span<const int> keep, std::span<const int> block,
                               double ridge);
void schur_update_batch_omp(Matrix& stack, Index d, std::span<const int> keep, std::span<const int> block,
                            double ridge);

}  // namespace ssts
