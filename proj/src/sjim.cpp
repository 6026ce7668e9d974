#include "ssts/sjim.hpp"

#include "ssts/kernels.hpp"

#include <algorithm>
#include <cmath>
#include <string>
#include <utility>

namespace ssts {

void SjimState::check() const {
  const int n = d();
  if (matrix.cols() != n) throw InputError("SjimState: matrix is not square");
  std::vector<int> seen(static_cast<std::size_t>(n), 0);
  auto mark = [&](int i) {
    if (i < 0 || i >= n) throw InputError("SjimState: node id out of range");
    if (seen[static_cast<std::size_t>(i)]++) throw InputError("SjimState: node " + std::to_string(i) + " listed twice");
  };
  for (int i : active) mark(i);
  for (const auto& b : eliminated_blocks)
    for (int i : b) mark(i);
  if (std::count(seen.begin(), seen.end(), 1) != n)
    throw InputError("SjimState: active and eliminated sets do not cover every node");
  const Matrix a = active_matrix();
  if (a.size() == 0) return;
  const double scale = std::max(1.0, a.cwiseAbs().maxCoeff());
  if ((a - a.transpose()).cwiseAbs().maxCoeff() > 1e-12 * scale)
    throw InputError("SjimState: working matrix is not symmetric");
}

SjimState make_sjim(Matrix m, double ridge) {
  if (m.rows() != m.cols() || m.rows() < 1) throw InputError("make_sjim: need a non-empty square matrix");
  if (!m.allFinite()) throw InputError("make_sjim: matrix has non-finite entries");
  if (!(ridge >= 0.0)) throw ParameterError("ridge must be >= 0");
  // Symmetrize in place so a moved-in matrix is never duplicated.
  const Index n = m.rows();
  for (Index c = 0; c < n; ++c)
    for (Index r = c + 1; r < n; ++r) m(r, c) = m(c, r) = 0.5 * (m(r, c) + m(c, r));
  SjimState s;
  s.matrix = std::move(m);
  s.active.resize(static_cast<std::size_t>(n));
  for (int i = 0; i < static_cast<int>(n); ++i) s.active[static_cast<std::size_t>(i)] = i;
  s.ridge = ridge;
  return s;
}

SjimState build_sjim(const HessianProvider& provider, const SampleMatrix& data, double ridge, const StreamOptions& opt,
                     bool single_precision) {
  if (data.d() != provider.dim())
    throw InputError("build_sjim: provider has d=" + std::to_string(provider.dim()) + " but data has " +
                     std::to_string(data.d()) + " columns");
  data.validate();
  Matrix j = provider.mean_hessian(data, opt);
  if (!j.allFinite()) throw BuildError("non-finite SJIM accumulation", -1);
  if (single_precision) j = j.unaryExpr([](double v) { return static_cast<double>(static_cast<float>(v)); });
  return make_sjim(std::move(j), ridge);
}

double schur_eliminate_inplace(SjimState& state, const NodeSet& block, bool parallel) {
  if (block.empty()) throw InputError("schur_eliminate: block is empty");
  std::vector<char> in_block(static_cast<std::size_t>(state.d()), 0);
  for (int b : block) {
    if (b < 0 || b >= state.d() || !std::binary_search(state.active.begin(), state.active.end(), b))
      throw InputError("schur_eliminate: node " + std::to_string(b) + " is not active");
    if (in_block[static_cast<std::size_t>(b)]++) throw InputError("schur_eliminate: duplicate node in block");
  }
  NodeSet keep;
  keep.reserve(state.active.size() - block.size());
  for (int i : state.active)
    if (!in_block[static_cast<std::size_t>(i)]) keep.push_back(i);
  const double cond = parallel ? schur_update_omp(state.matrix, keep, block, state.ridge)
                               : schur_update_serial(state.matrix, keep, block, state.ridge);
  // Re-enforce exact symmetry on the retained block.
  for (std::size_t c = 0; c < keep.size(); ++c)
    for (std::size_t r = c + 1; r < keep.size(); ++r) {
      double& lo = state.matrix(keep[r], keep[c]);
      double& up = state.matrix(keep[c], keep[r]);
      const double v = 0.5 * (lo + up);
      lo = v;
      up = v;
    }
  state.active = std::move(keep);
  state.eliminated_blocks.push_back(block);
  return cond;
}

SjimState schur_eliminate(SjimState state, const NodeSet& block) {
  schur_eliminate_inplace(state, block);
  return state;
}

std::vector<DiagEntry> diag_energy(const SjimState& state) {
  std::vector<DiagEntry> out;
  out.reserve(state.active.size());
  for (int i : state.active) out.push_back({i, state.matrix(i, i)});
  return out;
}

}  // namespace ssts
