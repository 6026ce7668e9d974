#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "ssts/dag.hpp"
#include "test_util.hpp"

#include <algorithm>
#include <cmath>

using namespace ssts;
using testutil::chain;

TEST_CASE("parents of chain and collider") {
  const WeightedDag c = chain(3);
  CHECK(parents(c, 2) == NodeSet{1});
  CHECK(parents(c, 0).empty());
  const WeightedDag col(3, {{0, 2, 1.0}, {1, 2, 1.0}});
  CHECK(parents(col, 2) == NodeSet{0, 1});
  CHECK(col.children(0) == NodeSet{2});
  CHECK(col.is_leaf(2));
  CHECK_FALSE(col.is_leaf(0));
}

TEST_CASE("is_valid_topo") {
  const WeightedDag c = chain(3);
  CHECK(is_valid_topo(c, TopoOrder{{{0}, {1}, {2}}}));
  CHECK_FALSE(is_valid_topo(c, TopoOrder{{{2}, {1}, {0}}}));
  const WeightedDag par(3, {{0, 1, 1.0}, {0, 2, 1.0}});
  CHECK(is_valid_topo(par, TopoOrder{{{0}, {1, 2}}}));
  CHECK(is_valid_topo(par, TopoOrder{{{0}, {2, 1}}}));
  CHECK_THROWS_AS(is_valid_topo(c, TopoOrder{{{0}, {1}}}), InputError);
  CHECK_THROWS_AS(is_valid_topo(c, TopoOrder{{{0}, {1}, {1}}}), InputError);
}

TEST_CASE("construction rejects invalid graphs") {
  CHECK_THROWS_AS(WeightedDag(2, {{0, 1, 1.0}, {1, 0, 1.0}}), ParameterError);
  CHECK_THROWS_AS(WeightedDag(2, {{0, 0, 1.0}}), ParameterError);
  CHECK_THROWS_AS(WeightedDag(2, {{0, 1, 1.0}, {0, 1, 2.0}}), ParameterError);
  CHECK_THROWS_AS(WeightedDag(2, {{0, 2, 1.0}}), ParameterError);
  CHECK_THROWS_AS(WeightedDag(2, {}, {1.0, 0.0}), ParameterError);
  CHECK_THROWS_AS(WeightedDag(2, {}, {1.0}), ParameterError);
}

TEST_CASE("weight matrix and node removal") {
  const WeightedDag g(3, {{0, 1, 2.0}, {1, 2, -0.5}}, {1.0, 2.0, 3.0});
  const Matrix b = g.weight_matrix();
  CHECK(b(1, 0) == 2.0);
  CHECK(b(2, 1) == -0.5);
  CHECK(b(0, 1) == 0.0);
  std::vector<int> kept;
  const WeightedDag r = g.remove_nodes({1}, &kept);
  CHECK(r.d() == 2);
  CHECK(kept == std::vector<int>{0, 2});
  CHECK(r.edge_count() == 0);
  CHECK(r.sigma(1) == 3.0);
}

TEST_CASE("generate_er small cases") {
  for (std::uint64_t s = 0; s < 5; ++s) CHECK(generate_er(1, 0.0, s).dag.edge_count() == 0);
  for (std::uint64_t s = 0; s < 20; ++s) {
    const GeneratedDag gd = generate_er(2, 1.0, s);
    REQUIRE(gd.dag.edge_count() == 1);
    CHECK(gd.dag.edges()[0].parent == gd.order[0]);
    CHECK(gd.dag.edges()[0].child == gd.order[1]);
  }
  CHECK_THROWS_AS(generate_er(3, 4.0, 0), ParameterError);
  CHECK_THROWS_AS(generate_er(0, 0.0, 0), ParameterError);
}

TEST_CASE("generate_er edge count is binomial") {
  const int seeds = 1000;
  double sum = 0.0;
  for (int s = 0; s < seeds; ++s) sum += static_cast<double>(generate_er(50, 100.0, static_cast<std::uint64_t>(s)).dag.edge_count());
  const double p = 100.0 / 1225.0;
  const double se = std::sqrt(1225.0 * p * (1.0 - p) / seeds);
  CHECK(std::abs(sum / seeds - 100.0) < 3.0 * se);
}

TEST_CASE("generate_sf structure") {
  const WeightedDag two = generate_sf(2, 1, 7).dag;
  REQUIRE(two.edge_count() == 1);
  CHECK(two.has_edge(0, 1));
  for (std::uint64_t s = 0; s < 10; ++s) {
    const WeightedDag t = generate_sf(5, 1, s).dag;
    CHECK(t.edge_count() == 4);
    for (int i = 1; i < 5; ++i) CHECK(t.parents(i).size() == 1);
  }
  CHECK_THROWS_AS(generate_sf(3, 3, 0), ParameterError);
  CHECK_THROWS_AS(generate_sf(3, 0, 0), ParameterError);
}

TEST_CASE("scale-free graphs form hubs") {
  auto max_out = [](const WeightedDag& g) {
    std::size_t m = 0;
    for (int i = 0; i < g.d(); ++i) m = std::max(m, g.children(i).size());
    return m;
  };
  std::size_t sf_max = 0, er_max = 0;
  for (std::uint64_t s = 0; s < 100; ++s) {
    const WeightedDag sf = generate_sf(100, 2, s).dag;
    const WeightedDag er = generate_er(100, static_cast<double>(sf.edge_count()), s).dag;
    sf_max = std::max(sf_max, max_out(sf));
    er_max = std::max(er_max, max_out(er));
  }
  CHECK(sf_max > er_max);
}

TEST_CASE("generated graphs: acyclic, reproducible, weight law, permutation order") {
  for (std::uint64_t s = 0; s < 30; ++s) {
    for (const GeneratedDag& gd : {generate_er(30, 45.0, s), generate_sf(30, 2, s)}) {
      CHECK(gd.dag.topological_order().size() == 30);
      CHECK(is_valid_topo(gd.dag, TopoOrder::from_permutation(gd.order)));
      for (const Edge& e : gd.dag.edges()) {
        CHECK(std::abs(e.weight) >= 0.5);
        CHECK(std::abs(e.weight) <= 2.0);
      }
      for (double sg : gd.dag.sigma()) CHECK(sg == 1.0);
    }
    const GeneratedDag a = generate_er(30, 45.0, s), b = generate_er(30, 45.0, s);
    REQUIRE(a.dag.edge_count() == b.dag.edge_count());
    for (std::size_t k = 0; k < a.dag.edge_count(); ++k) {
      CHECK(a.dag.edges()[k].parent == b.dag.edges()[k].parent);
      CHECK(a.dag.edges()[k].child == b.dag.edges()[k].child);
      CHECK(a.dag.edges()[k].weight == b.dag.edges()[k].weight);
    }
  }
}

TEST_CASE("TopoOrder helpers") {
  const TopoOrder o{{{2}, {0, 3}, {1}}};
  CHECK(o.flatten() == std::vector<int>{2, 0, 3, 1});
  CHECK(o.positions(4) == std::vector<int>{1, 3, 0, 2});
  CHECK(o.block_index(4) == std::vector<int>{1, 2, 0, 1});
  CHECK(o.size() == 4);
  CHECK(TopoOrder::from_permutation({1, 0}).blocks.size() == 2);
}
