#pragma once

#include "ssts/dag.hpp"
#include "ssts/types.hpp"

#include <cstdint>
#include <map>
#include <string>
#include <utility>
#include <vector>

namespace ssts {

using EdgeList = std::vector<std::pair<int, int>>;  // (parent, child)

EdgeList edge_list(const WeightedDag& g);

// Number of true edges whose parent comes after its child in the flattened
// order. Throws InputError unless the order covers every node exactly once.
int edge_violations(const WeightedDag& truth, const TopoOrder& order);

// Missing + extra edges, with a reversed edge counted once.
int shd(const WeightedDag& truth, const EdgeList& estimate);
int shd(const WeightedDag& truth, const WeightedDag& estimate);

// Correctly oriented recovered edges / true edges. Throws InputError when the
// truth has no edges.
double tpr(const WeightedDag& truth, const EdgeList& estimate);
double tpr(const WeightedDag& truth, const WeightedDag& estimate);

// Estimated edges absent from the truth (as oriented) / estimated edges; 0
// for an empty estimate.
double fdr(const WeightedDag& truth, const EdgeList& estimate);

// 1 - w(w-1) / (d(d-1)) for an ancestor chain plus w parallel leaves.
double expected_kendall(int d, int w);

// Kendall tau between two permutations of the same items.
double kendall_tau(const std::vector<int>& a, const std::vector<int>& b);

// Mean Kendall tau between pairs of uniformly drawn valid topological sorts
// of the chain-plus-w-leaves graph. Trial t uses its own RNG stream.
double kendall_mc(int d, int w, long trials, std::uint64_t seed);

struct MetricsReport {
  int ev = 0;
  int shd = 0;
  double tpr = 0.0;
  std::map<std::string, double> extras;
};

// EV on the order, SHD/TPR/FDR on the estimated graph (when given).
MetricsReport evaluate(const WeightedDag& truth, const TopoOrder& order, const WeightedDag* estimate, int block_iters);

std::string metrics_to_json(const MetricsReport& m);

}  // namespace ssts
