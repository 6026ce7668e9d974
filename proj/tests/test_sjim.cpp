#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "ssts/sjim.hpp"
#include "test_util.hpp"

#include <Eigen/Eigenvalues>
#include <cmath>

using namespace ssts;
using testutil::chain;
using testutil::linear;

namespace {

// (I - A)^T D^{-1} (I - A) built directly from the edge list, A(child, parent) = w.
Matrix precision_from_edges(int d, const std::vector<Edge>& edges, const std::vector<double>& sigma) {
  Matrix a = Matrix::Zero(d, d);
  for (const Edge& e : edges) a(e.child, e.parent) = e.weight;
  const Matrix ia = Matrix::Identity(d, d) - a;
  Vector dinv(d);
  for (int i = 0; i < d; ++i) dinv[i] = 1.0 / (sigma[static_cast<std::size_t>(i)] * sigma[static_cast<std::size_t>(i)]);
  return ia.transpose() * dinv.asDiagonal() * ia;
}

// Same, with `drop` deleted and the rest reindexed.
Matrix precision_without(const WeightedDag& g, int drop) {
  auto idx = [&](int i) { return i < drop ? i : i - 1; };
  std::vector<Edge> e;
  for (const Edge& x : g.edges())
    if (x.parent != drop && x.child != drop) e.push_back({idx(x.parent), idx(x.child), x.weight});
  std::vector<double> s;
  for (int i = 0; i < g.d(); ++i)
    if (i != drop) s.push_back(g.sigma(i));
  return precision_from_edges(g.d() - 1, e, s);
}

Matrix random_spd(Index d, std::uint64_t seed) {
  Engine rng(seed);
  std::normal_distribution<double> n;
  const Matrix a = Matrix::NullaryExpr(d, d, [&] { return n(rng); });
  return a * a.transpose() + 0.1 * Matrix::Identity(d, d);
}

class NanProvider : public HessianProvider {
 public:
  int dim() const override { return 2; }
  ProviderCaps caps() const override { return {true, true, true}; }
  std::string name() const override { return "nan"; }
  void sample_hessian(const Eigen::Ref<const Vector>& x, Matrix& out) const override {
    out = Matrix::Identity(2, 2);
    if (x[1] > 2.5) out(1, 1) = std::nan("");
  }
};

}  // namespace

TEST_CASE("population provider builds the textbook precision") {
  for (std::uint64_t s = 0; s < 5; ++s) {
    const WeightedDag g0 = generate_er(15, 25.0, s).dag;
    std::vector<double> sig;
    for (int i = 0; i < 15; ++i) sig.push_back(0.5 + 0.1 * i);
    const WeightedDag g = g0.with_sigma(sig);
    const SampleMatrix x = sample(g, linear(), 10, s);
    const SjimState st = build_sjim(LinearPopulationProvider(g), x, 0.0);
    CHECK(testutil::max_rel(st.matrix, precision_from_edges(15, g.edges(), sig)) < 1e-14);
    CHECK((st.matrix - st.matrix.transpose()).cwiseAbs().maxCoeff() == 0.0);
    CHECK(st.active.size() == 15);
    CHECK_NOTHROW(st.check());
  }
}

TEST_CASE("single node under the oracle") {
  const WeightedDag g(1, {}, {0.5});
  const SjimState st = build_sjim(OracleProvider(g, linear()), sample(g, linear(), 50, 1));
  REQUIRE(st.matrix.rows() == 1);
  CHECK(st.matrix(0, 0) == doctest::Approx(4.0));
  CHECK(diag_energy(st).size() == 1);
}

TEST_CASE("build is symmetric for non-symmetric Jacobians") {
  Matrix j(3, 3);
  j << 1, 2, 3, 0, 4, 5, 1, 1, 6;
  const SjimState st = make_sjim(j);
  CHECK((st.matrix - st.matrix.transpose()).cwiseAbs().maxCoeff() == 0.0);
  CHECK(st.matrix(0, 1) == 1.0);
  CHECK(st.ridge == 1e-4);
}

TEST_CASE("build errors") {
  const NanProvider p;
  Matrix x = Matrix::Zero(300, 2);
  x(123, 1) = 3.0;
  try {
    build_sjim(p, SampleMatrix(x));
    FAIL("expected a build error");
  } catch (const BuildError& e) {
    CHECK(e.sample() == 123);
  }
  CHECK_THROWS_AS(build_sjim(p, sample(WeightedDag(3, {}), linear(), 10, 1)), InputError);
  CHECK_THROWS_AS(make_sjim(Matrix::Zero(2, 3)), InputError);
  CHECK_THROWS_AS(make_sjim(Matrix::Identity(2, 2), -1.0), ParameterError);
}

TEST_CASE("two-node leaf elimination cancels the cross term") {
  const double b = 1.7;
  Matrix m(2, 2);
  m << 1 + b * b, -b, -b, 1;
  SjimState st = make_sjim(m, 0.0);
  schur_eliminate_inplace(st, {1});
  CHECK(st.active == NodeSet{0});
  CHECK(st.matrix(0, 0) == doctest::Approx(1.0).epsilon(1e-14));
  CHECK(st.eliminated_blocks == std::vector<NodeSet>{{1}});
}

TEST_CASE("ridge enters the pivot only") {
  const double b = 1.7, r = 0.25;
  Matrix m(2, 2);
  m << 1 + b * b, -b, -b, 1;
  const SjimState st = schur_eliminate(make_sjim(m, r), {1});
  CHECK(st.matrix(0, 0) == doctest::Approx(1 + b * b - b * b / (1 + r)).epsilon(1e-14));

  const Vector dv = Vector::LinSpaced(5, 1.0, 5.0);
  const Matrix diag = dv.asDiagonal();
  const SjimState sd = schur_eliminate(make_sjim(diag, 0.3), {1, 3});
  const Vector kept = dv(NodeSet{0, 2, 4});
  CHECK(sd.active_matrix() == Matrix(kept.asDiagonal()));
}

TEST_CASE("eliminating every node leaves an empty state") {
  const SjimState st = schur_eliminate(make_sjim(random_spd(3, 1)), {0, 1, 2});
  CHECK(st.active.empty());
  CHECK(st.active_matrix().size() == 0);
  CHECK_NOTHROW(st.check());
}

TEST_CASE("chain diagonal energy") {
  const WeightedDag g = chain(3);
  SjimState st = build_sjim(LinearPopulationProvider(g), sample(g, linear(), 5, 1), 0.0);
  auto e = diag_energy(st);
  REQUIRE(e.size() == 3);
  CHECK(e[0].value == 2.0);
  CHECK(e[1].value == 2.0);
  CHECK(e[2].value == 1.0);
  schur_eliminate_inplace(st, {2});
  e = diag_energy(st);
  REQUIRE(e.size() == 2);
  CHECK(e[0].node == 0);
  CHECK(e[0].value == doctest::Approx(2.0));
  CHECK(e[1].node == 1);
  CHECK(e[1].value == doctest::Approx(1.0));
}

TEST_CASE("eliminating a true leaf of a linear DAG is exact") {
  for (int d : {5, 20, 60, 200}) {
    for (std::uint64_t s = 0; s < 3; ++s) {
      const WeightedDag g0 = generate_er(d, 2.0 * d, s).dag;
      std::vector<double> sig;
      Engine rng(s + 100);
      std::uniform_real_distribution<double> u(0.5, 1.5);
      for (int i = 0; i < d; ++i) sig.push_back(u(rng));
      const WeightedDag g = g0.with_sigma(sig);
      int leaf = -1;
      for (int i = 0; i < d; ++i)
        if (g.is_leaf(i)) {
          leaf = i;
          break;
        }
      REQUIRE(leaf >= 0);
      SjimState st = make_sjim(precision_from_edges(d, g.edges(), sig), 0.0);
      schur_eliminate_inplace(st, {leaf});
      const Matrix expect = precision_without(g, leaf);
      const Matrix got = st.active_matrix();
      CHECK(((got - expect).array().abs() / expect.array().abs().max(1.0)).maxCoeff() < 1e-10);
    }
  }
}

TEST_CASE("parallel leaves: sequential and joint elimination agree") {
  // 0 -> {1, 2, 3}, 4 -> {2, 3}; nodes 2 and 3 are both leaves with no cross term.
  const WeightedDag g(5, {{0, 1, 0.8}, {0, 2, -1.1}, {0, 3, 0.6}, {4, 2, 1.3}, {4, 3, -0.7}});
  const SjimState base = make_sjim(precision_from_edges(5, g.edges(), g.sigma()), 0.0);
  SjimState seq = base;
  schur_eliminate_inplace(seq, {2});
  CHECK(std::abs(seq.matrix(2, 3)) < 1e-15);
  schur_eliminate_inplace(seq, {3});
  const SjimState joint = schur_eliminate(base, {2, 3});
  CHECK(seq.active == joint.active);
  CHECK((seq.active_matrix() - joint.active_matrix()).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("Schur complements of SPD matrices stay SPD") {
  for (std::uint64_t s = 0; s < 20; ++s) {
    const int d = 5 + static_cast<int>(s) * 2;
    SjimState st = make_sjim(random_spd(d, s), 0.0);
    Engine rng(s);
    while (st.active.size() > 1) {
      std::uniform_int_distribution<std::size_t> pick(0, st.active.size() - 1);
      const int node = st.active[pick(rng)];
      schur_eliminate_inplace(st, {node});
      const Matrix a = st.active_matrix();
      CHECK(Eigen::SelfAdjointEigenSolver<Matrix>(a).eigenvalues().minCoeff() > 0.0);
      CHECK_NOTHROW(st.check());
    }
  }
}

TEST_CASE("serial and parallel elimination agree") {
  const Matrix m = random_spd(60, 7);
  SjimState a = make_sjim(m), b = make_sjim(m);
  for (const NodeSet& blk : {NodeSet{5, 9, 40}, NodeSet{0}, NodeSet{11, 12}}) {
    schur_eliminate_inplace(a, blk, false);
    schur_eliminate_inplace(b, blk, true);
  }
  CHECK((a.active_matrix() - b.active_matrix()).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("elimination errors") {
  SjimState st = make_sjim(random_spd(4, 3));
  CHECK_THROWS_AS(schur_eliminate_inplace(st, {}), InputError);
  CHECK_THROWS_AS(schur_eliminate_inplace(st, {7}), InputError);
  CHECK_THROWS_AS(schur_eliminate_inplace(st, {1, 1}), InputError);
  schur_eliminate_inplace(st, {1});
  CHECK_THROWS_AS(schur_eliminate_inplace(st, {1}), InputError);

  Matrix sing(3, 3);
  sing << 1, 1, 0, 1, 1, 0, 0, 0, 1;
  SjimState s0 = make_sjim(sing, 0.0);
  CHECK_THROWS_AS(schur_eliminate_inplace(s0, {0, 1}), EliminationError);
  SjimState s1 = make_sjim(sing, 1e-3);
  CHECK_NOTHROW(schur_eliminate_inplace(s1, {0, 1}));

  SjimState broken = make_sjim(random_spd(3, 4));
  broken.active = {0, 1};
  CHECK_THROWS_AS(broken.check(), InputError);
}

TEST_CASE("single precision build rounds to float") {
  const WeightedDag g = generate_er(6, 8.0, 2).dag;
  const SampleMatrix x = sample(g, testutil::tanh_anm(), 500, 2);
  const OracleProvider p(g, testutil::tanh_anm());
  const SjimState d64 = build_sjim(p, x);
  const SjimState d32 = build_sjim(p, x, 1e-4, {}, true);
  CHECK(d32.matrix == Matrix(d32.matrix.cast<float>().cast<double>()));
  CHECK(testutil::max_rel(d32.matrix, d64.matrix) < 1e-6);
}
