#pragma once

#include "ssts/types.hpp"

#include <cstdint>
#include <utility>
#include <vector>

namespace ssts {

struct Edge {
  int parent;
  int child;
  double weight;
};

/// Ground-truth causal DAG: edges j -> i with weights, plus per-node noise scales.
///
/// Construction validates every invariant (node range, no duplicates, no
/// self loops, acyclicity, sigma > 0) and throws ParameterError otherwise, so a
/// WeightedDag that exists is always a valid DAG.
class WeightedDag {
 public:
  WeightedDag() = default;
  WeightedDag(int d, std::vector<Edge> edges, std::vector<double> sigma);
  // Homoscedastic convenience: sigma_i = 1 for every node.
  WeightedDag(int d, std::vector<Edge> edges);

  int d() const { return d_; }
  const std::vector<Edge>& edges() const { return edges_; }
  std::size_t edge_count() const { return edges_.size(); }
  const std::vector<double>& sigma() const { return sigma_; }
  double sigma(int i) const { return sigma_[static_cast<std::size_t>(i)]; }

  const NodeSet& parents(int i) const;
  const NodeSet& children(int i) const;
  bool has_edge(int parent, int child) const;
  // Weight of parent -> child; throws InputError if the edge is absent.
  double weight(int parent, int child) const;
  // Weights of the parents of i, aligned with parents(i).
  const std::vector<double>& parent_weights(int i) const { return parent_weights_[static_cast<std::size_t>(i)]; }

  bool is_leaf(int i) const { return children(i).empty(); }

  // Kahn peeling, smallest available index first.
  std::vector<int> topological_order() const;

  // B with B(i, j) = weight of j -> i, so that x = B x + eps.
  Matrix weight_matrix() const;

  // Graph over the remaining nodes (reindexed in ascending order) after
  // deleting `removed`. The mapping new -> old is written to `kept` if given.
  WeightedDag remove_nodes(const NodeSet& removed, std::vector<int>* kept = nullptr) const;

  WeightedDag with_sigma(std::vector<double> sigma) const;

 private:
  int d_ = 0;
  std::vector<Edge> edges_;
  std::vector<double> sigma_;
  std::vector<NodeSet> parents_;
  std::vector<NodeSet> children_;
  std::vector<std::vector<double>> parent_weights_;
};

/// Extracted ordering as blocks of tied nodes, earliest block = most ancestral.
/// The vector order inside a block is the within-block order used when the
/// order is flattened.
struct TopoOrder {
  std::vector<NodeSet> blocks;

  static TopoOrder from_permutation(const std::vector<int>& perm);

  std::vector<int> flatten() const;
  // position[node] in the flattened order.
  std::vector<int> positions(int d) const;
  // block_of[node] = index of the block that holds it.
  std::vector<int> block_index(int d) const;
  std::size_t size() const;

  // Throws InputError unless blocks partition {0..d-1}.
  void validate(int d) const;
};

struct WeightLaw {
  double low = 0.5;
  double high = 2.0;
};

struct GeneratedDag {
  WeightedDag dag;
  // Node permutation used to orient edges; always a valid topological order.
  std::vector<int> order;
};

// Erdos-Renyi DAG: each of the d(d-1)/2 pairs is kept with probability
// expected_edges / (d(d-1)/2), oriented along a hidden uniform permutation.
GeneratedDag generate_er(int d, double expected_edges, std::uint64_t seed, WeightLaw law = {});

// Preferential attachment: node t picks min(attach_m, t) distinct parents
// among 0..t-1 with probability proportional to (degree + 1).
GeneratedDag generate_sf(int d, int attach_m, std::uint64_t seed, WeightLaw law = {});

const NodeSet& parents(const WeightedDag& g, int i);

// True iff no edge points backwards in the flattened order.
bool is_valid_topo(const WeightedDag& g, const TopoOrder& order);

}  // namespace ssts
