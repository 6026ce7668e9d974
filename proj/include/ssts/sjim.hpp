#pragma once

#include "ssts/hessian.hpp"
#include "ssts/types.hpp"

#include <vector>

namespace ssts {

/// Working SJIM during elimination. `matrix` keeps its full d x d shape; only
/// the active x active part is meaningful once nodes have been eliminated.
struct SjimState {
  Matrix matrix;
  NodeSet active;  // ascending node ids
  std::vector<NodeSet> eliminated_blocks;
  double ridge = 1e-4;

  int d() const { return static_cast<int>(matrix.rows()); }
  Matrix active_matrix() const { return matrix(active, active); }
  // Throws InputError if the partition or symmetry invariants are broken.
  void check() const;
};

// Wraps an existing matrix: symmetrizes it and marks every node active.
SjimState make_sjim(Matrix m, double ridge = 1e-4);

// Streaming mean of the provider's Hessians over `data`, symmetrized.
// `single_precision` rounds the result to 32-bit floats.
SjimState build_sjim(const HessianProvider& provider, const SampleMatrix& data, double ridge = 1e-4,
                     const StreamOptions& opt = {}, bool single_precision = false);

// In-place block Schur complement over the active set:
//   M_SS <- M_SS - M_SB (M_BB + ridge I)^{-1} M_BS,  S = active \ B.
// Returns the pivot condition estimate. Throws InputError if `block` is empty
// or not inside the active set, EliminationError if the pivot is singular.
double schur_eliminate_inplace(SjimState& state, const NodeSet& block, bool parallel = true);

// Value form of the same update.
SjimState schur_eliminate(SjimState state, const NodeSet& block);

struct DiagEntry {
  int node;
  double value;
};

// Current diagonal restricted to the active set, in active order.
std::vector<DiagEntry> diag_energy(const SjimState& state);

}  // namespace ssts
