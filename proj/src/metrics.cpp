#include "ssts/metrics.hpp"

#include "ssts/kernels.hpp"
#include "ssts/rng.hpp"

#include <json.hpp>

#include <algorithm>
#include <numeric>
#include <set>

namespace ssts {

EdgeList edge_list(const WeightedDag& g) {
  EdgeList out;
  out.reserve(g.edge_count());
  for (const Edge& e : g.edges()) out.emplace_back(e.parent, e.child);
  return out;
}

int edge_violations(const WeightedDag& truth, const TopoOrder& order) {
  order.validate(truth.d());
  const auto pos = order.positions(truth.d());
  int ev = 0;
  for (const Edge& e : truth.edges())
    if (pos[static_cast<std::size_t>(e.parent)] > pos[static_cast<std::size_t>(e.child)]) ++ev;
  return ev;
}

namespace {

void check_nodes(const WeightedDag& truth, const EdgeList& est) {
  for (const auto& [a, b] : est)
    if (a < 0 || b < 0 || a >= truth.d() || b >= truth.d() || a == b)
      throw InputError("estimated edge (" + std::to_string(a) + "," + std::to_string(b) + ") is not a valid edge");
}

}  // namespace

int shd(const WeightedDag& truth, const EdgeList& estimate) {
  check_nodes(truth, estimate);
  // Pair {a, b} with a < b maps to its orientation: +1 for a -> b, -1 for b -> a.
  std::map<std::pair<int, int>, int> t, e;
  for (const Edge& x : truth.edges())
    t[{std::min(x.parent, x.child), std::max(x.parent, x.child)}] = x.parent < x.child ? 1 : -1;
  for (const auto& [a, b] : estimate) {
    const auto key = std::make_pair(std::min(a, b), std::max(a, b));
    const int dir = a < b ? 1 : -1;
    auto it = e.find(key);
    // Both orientations present: treat as an undirected mismatch (0).
    if (it != e.end() && it->second != dir)
      it->second = 0;
    else
      e[key] = dir;
  }
  int dist = 0;
  for (const auto& [k, v] : t) {
    auto it = e.find(k);
    if (it == e.end() || it->second != v) ++dist;
  }
  for (const auto& [k, v] : e)
    if (!t.count(k)) ++dist;
  return dist;
}

int shd(const WeightedDag& truth, const WeightedDag& estimate) { return shd(truth, edge_list(estimate)); }

double tpr(const WeightedDag& truth, const EdgeList& estimate) {
  if (truth.edge_count() == 0) throw InputError("tpr is undefined for a graph without edges");
  check_nodes(truth, estimate);
  const std::set<std::pair<int, int>> est(estimate.begin(), estimate.end());
  std::size_t hit = 0;
  for (const Edge& e : truth.edges())
    if (est.count({e.parent, e.child})) ++hit;
  return static_cast<double>(hit) / static_cast<double>(truth.edge_count());
}

double tpr(const WeightedDag& truth, const WeightedDag& estimate) { return tpr(truth, edge_list(estimate)); }

double fdr(const WeightedDag& truth, const EdgeList& estimate) {
  check_nodes(truth, estimate);
  const std::set<std::pair<int, int>> est(estimate.begin(), estimate.end());
  if (est.empty()) return 0.0;
  std::size_t bad = 0;
  for (const auto& [a, b] : est)
    if (!truth.has_edge(a, b)) ++bad;
  return static_cast<double>(bad) / static_cast<double>(est.size());
}

double expected_kendall(int d, int w) {
  if (d < 2) throw ParameterError("expected_kendall: d must be >= 2");
  if (w < 1 || w > d) throw ParameterError("expected_kendall: width must lie in [1, d]");
  return 1.0 - static_cast<double>(w) * (w - 1) / (static_cast<double>(d) * (d - 1));
}

double kendall_tau(const std::vector<int>& a, const std::vector<int>& b) {
  const std::size_t n = a.size();
  if (b.size() != n || n < 2) throw InputError("kendall_tau: need two permutations of equal length >= 2");
  std::vector<int> pa(n), pb(n);
  for (std::size_t i = 0; i < n; ++i) {
    if (a[i] < 0 || b[i] < 0 || static_cast<std::size_t>(a[i]) >= n || static_cast<std::size_t>(b[i]) >= n)
      throw InputError("kendall_tau: entries must be 0..n-1");
    pa[static_cast<std::size_t>(a[i])] = static_cast<int>(i);
    pb[static_cast<std::size_t>(b[i])] = static_cast<int>(i);
  }
  long s = 0;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j) {
      const long x = (pa[i] < pa[j]) ? 1 : -1;
      const long y = (pb[i] < pb[j]) ? 1 : -1;
      s += x * y;
    }
  return static_cast<double>(s) / (static_cast<double>(n) * (n - 1) / 2.0);
}

double kendall_mc(int d, int w, long trials, std::uint64_t seed) {
  expected_kendall(d, w);  // range checks
  if (trials < 1) throw ParameterError("kendall_mc: trials must be >= 1");
  // Nodes 0..d-w-1 form a chain; the last w nodes are parallel leaves hanging
  // off its tail. A uniform valid sort is the chain followed by a uniform
  // shuffle of the leaves.
  const int chain = d - w;
  auto draw = [&](Engine& rng) {
    std::vector<int> p(static_cast<std::size_t>(d));
    std::iota(p.begin(), p.end(), 0);
    std::shuffle(p.begin() + chain, p.end(), rng);
    return p;
  };
  const int threads = std::max(1, max_threads());
  std::vector<KahanSum> part(static_cast<std::size_t>(threads));
#pragma omp parallel num_threads(threads)
  {
    const int t = thread_id();
    const long lo = trials * t / threads;
    const long hi = trials * (t + 1) / threads;
    KahanSum acc;
    for (long k = lo; k < hi; ++k) {
      Engine rng = make_engine(seed, kTagKendall, static_cast<std::uint64_t>(k));
      const auto a = draw(rng);
      const auto b = draw(rng);
      acc.add(kendall_tau(a, b));
    }
    part[static_cast<std::size_t>(t)] = acc;
  }
  KahanSum total;
  for (const auto& p : part) total.add(p.sum - p.comp);
  return total.sum / static_cast<double>(trials);
}

MetricsReport evaluate(const WeightedDag& truth, const TopoOrder& order, const WeightedDag* estimate, int block_iters) {
  MetricsReport r;
  r.ev = edge_violations(truth, order);
  r.extras["true_edges"] = static_cast<double>(truth.edge_count());
  r.extras["block_iters"] = block_iters;
  if (estimate) {
    const EdgeList est = edge_list(*estimate);
    r.shd = shd(truth, est);
    r.tpr = truth.edge_count() ? tpr(truth, est) : 1.0;
    r.extras["fdr"] = fdr(truth, est);
    r.extras["kept_edges"] = static_cast<double>(est.size());
  }
  return r;
}

std::string metrics_to_json(const MetricsReport& m) {
  nlohmann::json j;
  j["ev"] = m.ev;
  j["shd"] = m.shd;
  j["tpr"] = m.tpr;
  for (const auto& [k, v] : m.extras) j[k] = v;
  return j.dump();
}

}  // namespace ssts
