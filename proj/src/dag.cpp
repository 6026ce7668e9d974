#include "ssts/dag.hpp"

#include "ssts/rng.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <queue>
#include <string>

namespace ssts {

namespace {

double draw_weight(Engine& rng, const WeightLaw& law) {
  std::uniform_real_distribution<double> mag(law.low, law.high);
  std::bernoulli_distribution sign(0.5);
  const double w = mag(rng);
  return sign(rng) ? w : -w;
}

}  // namespace

WeightedDag::WeightedDag(int d, std::vector<Edge> edges)
    : WeightedDag(d, std::move(edges), std::vector<double>(static_cast<std::size_t>(std::max(d, 0)), 1.0)) {}

WeightedDag::WeightedDag(int d, std::vector<Edge> edges, std::vector<double> sigma)
    : d_(d), edges_(std::move(edges)), sigma_(std::move(sigma)) {
  if (d < 1) throw ParameterError("WeightedDag: d must be >= 1, got " + std::to_string(d));
  if (sigma_.size() != static_cast<std::size_t>(d))
    throw ParameterError("WeightedDag: sigma has length " + std::to_string(sigma_.size()) + ", expected " +
                         std::to_string(d));
  for (int i = 0; i < d; ++i) {
    const double s = sigma_[static_cast<std::size_t>(i)];
    if (!(s > 0.0) || !std::isfinite(s))
      throw ParameterError("WeightedDag: sigma[" + std::to_string(i) + "] must be finite and > 0");
  }

  std::sort(edges_.begin(), edges_.end(), [](const Edge& a, const Edge& b) {
    return a.child != b.child ? a.child < b.child : a.parent < b.parent;
  });
  parents_.assign(static_cast<std::size_t>(d), {});
  children_.assign(static_cast<std::size_t>(d), {});
  parent_weights_.assign(static_cast<std::size_t>(d), {});
  for (std::size_t k = 0; k < edges_.size(); ++k) {
    const Edge& e = edges_[k];
    if (e.parent < 0 || e.parent >= d || e.child < 0 || e.child >= d)
      throw ParameterError("WeightedDag: edge endpoint out of range");
    if (e.parent == e.child) throw ParameterError("WeightedDag: self loop on node " + std::to_string(e.child));
    if (!std::isfinite(e.weight)) throw ParameterError("WeightedDag: non-finite edge weight");
    if (k > 0 && edges_[k - 1].parent == e.parent && edges_[k - 1].child == e.child)
      throw ParameterError("WeightedDag: duplicate edge " + std::to_string(e.parent) + "->" + std::to_string(e.child));
    parents_[static_cast<std::size_t>(e.child)].push_back(e.parent);
    parent_weights_[static_cast<std::size_t>(e.child)].push_back(e.weight);
    children_[static_cast<std::size_t>(e.parent)].push_back(e.child);
  }
  for (auto& c : children_) std::sort(c.begin(), c.end());

  if (topological_order().size() != static_cast<std::size_t>(d)) throw ParameterError("WeightedDag: graph has a cycle");
}

const NodeSet& WeightedDag::parents(int i) const {
  if (i < 0 || i >= d_) throw InputError("node index out of range: " + std::to_string(i));
  return parents_[static_cast<std::size_t>(i)];
}

const NodeSet& WeightedDag::children(int i) const {
  if (i < 0 || i >= d_) throw InputError("node index out of range: " + std::to_string(i));
  return children_[static_cast<std::size_t>(i)];
}

bool WeightedDag::has_edge(int parent, int child) const {
  const auto& pa = parents(child);
  return std::binary_search(pa.begin(), pa.end(), parent);
}

double WeightedDag::weight(int parent, int child) const {
  const auto& pa = parents(child);
  auto it = std::lower_bound(pa.begin(), pa.end(), parent);
  if (it == pa.end() || *it != parent)
    throw InputError("no edge " + std::to_string(parent) + "->" + std::to_string(child));
  return parent_weights_[static_cast<std::size_t>(child)][static_cast<std::size_t>(it - pa.begin())];
}

std::vector<int> WeightedDag::topological_order() const {
  std::vector<int> indeg(static_cast<std::size_t>(d_), 0);
  for (const Edge& e : edges_) ++indeg[static_cast<std::size_t>(e.child)];
  std::priority_queue<int, std::vector<int>, std::greater<>> ready;
  for (int i = 0; i < d_; ++i)
    if (indeg[static_cast<std::size_t>(i)] == 0) ready.push(i);
  std::vector<int> order;
  order.reserve(static_cast<std::size_t>(d_));
  while (!ready.empty()) {
    const int v = ready.top();
    ready.pop();
    order.push_back(v);
    for (int c : children_[static_cast<std::size_t>(v)])
      if (--indeg[static_cast<std::size_t>(c)] == 0) ready.push(c);
  }
  return order;
}

Matrix WeightedDag::weight_matrix() const {
  Matrix b = Matrix::Zero(d_, d_);
  for (const Edge& e : edges_) b(e.child, e.parent) = e.weight;
  return b;
}

WeightedDag WeightedDag::remove_nodes(const NodeSet& removed, std::vector<int>* kept) const {
  std::vector<int> new_index(static_cast<std::size_t>(d_), -1);
  std::vector<bool> drop(static_cast<std::size_t>(d_), false);
  for (int r : removed) {
    if (r < 0 || r >= d_) throw InputError("remove_nodes: index out of range");
    drop[static_cast<std::size_t>(r)] = true;
  }
  std::vector<int> old_of;
  std::vector<double> sigma;
  for (int i = 0; i < d_; ++i) {
    if (drop[static_cast<std::size_t>(i)]) continue;
    new_index[static_cast<std::size_t>(i)] = static_cast<int>(old_of.size());
    old_of.push_back(i);
    sigma.push_back(sigma_[static_cast<std::size_t>(i)]);
  }
  if (old_of.empty()) throw InputError("remove_nodes: cannot remove every node");
  std::vector<Edge> edges;
  for (const Edge& e : edges_) {
    const int p = new_index[static_cast<std::size_t>(e.parent)];
    const int c = new_index[static_cast<std::size_t>(e.child)];
    if (p >= 0 && c >= 0) edges.push_back({p, c, e.weight});
  }
  if (kept) *kept = old_of;
  return WeightedDag(static_cast<int>(old_of.size()), std::move(edges), std::move(sigma));
}

WeightedDag WeightedDag::with_sigma(std::vector<double> sigma) const { return WeightedDag(d_, edges_, std::move(sigma)); }

TopoOrder TopoOrder::from_permutation(const std::vector<int>& perm) {
  TopoOrder o;
  o.blocks.reserve(perm.size());
  for (int v : perm) o.blocks.push_back({v});
  return o;
}

std::vector<int> TopoOrder::flatten() const {
  std::vector<int> out;
  out.reserve(size());
  for (const auto& b : blocks) out.insert(out.end(), b.begin(), b.end());
  return out;
}

std::size_t TopoOrder::size() const {
  std::size_t n = 0;
  for (const auto& b : blocks) n += b.size();
  return n;
}

std::vector<int> TopoOrder::positions(int d) const {
  validate(d);
  std::vector<int> pos(static_cast<std::size_t>(d), -1);
  int k = 0;
  for (const auto& b : blocks)
    for (int v : b) pos[static_cast<std::size_t>(v)] = k++;
  return pos;
}

std::vector<int> TopoOrder::block_index(int d) const {
  validate(d);
  std::vector<int> idx(static_cast<std::size_t>(d), -1);
  for (std::size_t b = 0; b < blocks.size(); ++b)
    for (int v : blocks[b]) idx[static_cast<std::size_t>(v)] = static_cast<int>(b);
  return idx;
}

void TopoOrder::validate(int d) const {
  std::vector<bool> seen(static_cast<std::size_t>(std::max(d, 0)), false);
  std::size_t count = 0;
  for (const auto& b : blocks) {
    if (b.empty()) throw InputError("TopoOrder: empty block");
    for (int v : b) {
      if (v < 0 || v >= d) throw InputError("TopoOrder: node " + std::to_string(v) + " out of range");
      if (seen[static_cast<std::size_t>(v)]) throw InputError("TopoOrder: node " + std::to_string(v) + " repeated");
      seen[static_cast<std::size_t>(v)] = true;
      ++count;
    }
  }
  if (count != static_cast<std::size_t>(d))
    throw InputError("TopoOrder: covers " + std::to_string(count) + " of " + std::to_string(d) + " nodes");
}

GeneratedDag generate_er(int d, double expected_edges, std::uint64_t seed, WeightLaw law) {
  if (d < 1) throw ParameterError("generate_er: d must be >= 1");
  const double pairs = 0.5 * static_cast<double>(d) * static_cast<double>(d - 1);
  if (!(expected_edges >= 0.0) || expected_edges > pairs)
    throw ParameterError("generate_er: expected_edges must lie in [0, d(d-1)/2]");
  Engine rng = make_engine(seed, kTagGraph);
  std::vector<int> perm(static_cast<std::size_t>(d));
  std::iota(perm.begin(), perm.end(), 0);
  std::shuffle(perm.begin(), perm.end(), rng);

  const double p = pairs > 0 ? expected_edges / pairs : 0.0;
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  Engine wrng = make_engine(seed, kTagWeights);
  std::vector<Edge> edges;
  for (int a = 0; a < d; ++a) {
    for (int b = a + 1; b < d; ++b) {
      if (unif(rng) < p) {
        edges.push_back({perm[static_cast<std::size_t>(a)], perm[static_cast<std::size_t>(b)], draw_weight(wrng, law)});
      }
    }
  }
  return {WeightedDag(d, std::move(edges)), perm};
}

GeneratedDag generate_sf(int d, int attach_m, std::uint64_t seed, WeightLaw law) {
  if (d < 1) throw ParameterError("generate_sf: d must be >= 1");
  if (attach_m < 1 || attach_m >= d) throw ParameterError("generate_sf: need 1 <= attach_m < d");
  Engine rng = make_engine(seed, kTagGraph);
  Engine wrng = make_engine(seed, kTagWeights);
  std::vector<double> degree(static_cast<std::size_t>(d), 0.0);
  std::vector<Edge> edges;
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  for (int t = 1; t < d; ++t) {
    const int m = std::min(attach_m, t);
    std::vector<bool> taken(static_cast<std::size_t>(t), false);
    NodeSet chosen;
    for (int k = 0; k < m; ++k) {
      double total = 0.0;
      for (int v = 0; v < t; ++v)
        if (!taken[static_cast<std::size_t>(v)]) total += degree[static_cast<std::size_t>(v)] + 1.0;
      // Walk candidates in ascending index order until the cumulative mass passes u.
      const double u = unif(rng) * total;
      double acc = 0.0;
      int pick = -1;
      for (int v = 0; v < t; ++v) {
        if (taken[static_cast<std::size_t>(v)]) continue;
        pick = v;
        acc += degree[static_cast<std::size_t>(v)] + 1.0;
        if (u < acc) break;
      }
      taken[static_cast<std::size_t>(pick)] = true;
      chosen.push_back(pick);
    }
    std::sort(chosen.begin(), chosen.end());
    for (int v : chosen) {
      edges.push_back({v, t, draw_weight(wrng, law)});
      degree[static_cast<std::size_t>(v)] += 1.0;
      degree[static_cast<std::size_t>(t)] += 1.0;
    }
  }
  std::vector<int> order(static_cast<std::size_t>(d));
  std::iota(order.begin(), order.end(), 0);
  return {WeightedDag(d, std::move(edges)), order};
}

const NodeSet& parents(const WeightedDag& g, int i) { return g.parents(i); }

bool is_valid_topo(const WeightedDag& g, const TopoOrder& order) {
  const auto pos = order.positions(g.d());
  for (const Edge& e : g.edges())
    if (pos[static_cast<std::size_t>(e.parent)] > pos[static_cast<std::size_t>(e.child)]) return false;
  return true;
}

}  // namespace ssts
