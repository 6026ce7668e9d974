#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "ssts/hessian.hpp"
#include "ssts/sort.hpp"
#include "test_util.hpp"

#include <cmath>

using namespace ssts;
using testutil::linear;
using testutil::random_point;
using testutil::tanh_anm;

namespace {

// -d^2 log p by central differences of the analytic log-density.
Matrix fd_neg_hessian(const MechanismSpec& s, const WeightedDag& g, const Vector& x, double h) {
  const Index d = x.size();
  Matrix out(d, d);
  auto lp = [&](const Vector& y) { return anm_log_density(s, g, y); };
  for (Index i = 0; i < d; ++i)
    for (Index j = i; j < d; ++j) {
      Vector pp = x, pm = x, mp = x, mm = x;
      pp[i] += h;
      pp[j] += h;
      pm[i] += h;
      pm[j] -= h;
      mp[i] -= h;
      mp[j] += h;
      mm[i] -= h;
      mm[j] -= h;
      out(i, j) = out(j, i) = -(lp(pp) - lp(pm) - lp(mp) + lp(mm)) / (4 * h * h);
    }
  return out;
}

// Returns NaN Hessians for rows whose first coordinate is exactly 999.
class PoisonProvider : public HessianProvider {
 public:
  int dim() const override { return 2; }
  ProviderCaps caps() const override { return {true, true, true}; }
  std::string name() const override { return "poison"; }
  void sample_hessian(const Eigen::Ref<const Vector>& x, Matrix& out) const override {
    out = Matrix::Identity(2, 2);
    if (x[0] == 999.0) out(0, 1) = std::nan("");
  }
};

}  // namespace

TEST_CASE("oracle Hessian of a two-node linear model") {
  const WeightedDag g(2, {{0, 1, 2.0}});
  Engine rng(1);
  Matrix expect(2, 2);
  expect << 5, -2, -2, 1;
  for (int t = 0; t < 5; ++t) CHECK((oracle_hessian(g, linear(), random_point(2, rng)) - expect).cwiseAbs().maxCoeff() < 1e-14);
}

TEST_CASE("oracle Hessian of a single node") {
  const WeightedDag g(1, {}, {2.0});
  const Matrix h = oracle_hessian(g, tanh_anm(), Vector::Constant(1, 0.3));
  CHECK(h(0, 0) == doctest::Approx(0.25));
}

TEST_CASE("leaf diagonal is exactly 1/sigma^2 at every sample") {
  const WeightedDag g0 = generate_er(8, 12.0, 5).dag;
  std::vector<double> sig{0.5, 1.0, 1.5, 0.8, 1.2, 0.9, 1.1, 0.7};
  const WeightedDag g = g0.with_sigma(sig);
  const SampleMatrix x = sample(g, tanh_anm(), 200, 6);
  for (Index r = 0; r < x.n(); ++r) {
    const Matrix h = oracle_hessian(g, tanh_anm(), x.data.row(r).transpose());
    for (int i = 0; i < 8; ++i)
      if (g.is_leaf(i)) CHECK(h(i, i) == doctest::Approx(1.0 / (sig[static_cast<std::size_t>(i)] * sig[static_cast<std::size_t>(i)])).epsilon(1e-14));
  }
}

TEST_CASE("oracle Hessian matches finite differences of the log-density") {
  Engine rng(3);
  for (TanhForm form : {TanhForm::Elementwise, TanhForm::Dense}) {
    for (NoiseFamily noise : {NoiseFamily::Gaussian, NoiseFamily::Gumbel}) {
      MechanismSpec s = tanh_anm(form);
      s.noise = noise;
      const WeightedDag g = generate_er(6, 9.0, 4).dag.with_sigma({1.0, 0.8, 1.3, 1.0, 0.9, 1.1});
      for (int t = 0; t < 50; ++t) {
        const Vector x = random_point(6, rng, 1.0);
        const Matrix h = oracle_hessian(g, s, x);
        CHECK(testutil::max_rel(fd_neg_hessian(s, g, x, 1e-3), h) < 1e-4);
        CHECK((h - h.transpose()).cwiseAbs().maxCoeff() < 1e-12 * std::max(1.0, h.cwiseAbs().maxCoeff()));
      }
    }
  }
}

TEST_CASE("oracle rejects mechanisms without analytic Hessians") {
  const WeightedDag g(2, {{0, 1, 1.0}});
  MechanismSpec p = tanh_anm();
  p.kind = MechanismKind::Pnl;
  CHECK_THROWS_AS(OracleProvider(g, p), UnsupportedError);
  p.kind = MechanismKind::Mnm;
  CHECK_THROWS_AS(OracleProvider(g, p), UnsupportedError);
  MechanismSpec e = tanh_anm();
  e.noise = NoiseFamily::Exponential;
  CHECK_THROWS_AS(OracleProvider(g, e), UnsupportedError);
}

TEST_CASE("population precision") {
  CHECK(linear_population_precision(WeightedDag(4, {})).isIdentity());
  const double b = -1.3;
  Matrix expect(2, 2);
  expect << 1 + b * b, -b, -b, 1;
  CHECK((linear_population_precision(WeightedDag(2, {{0, 1, b}})) - expect).cwiseAbs().maxCoeff() < 1e-15);
  for (std::uint64_t s = 0; s < 10; ++s) {
    const Matrix p = linear_population_precision(generate_er(20, 30.0, s).dag);
    CHECK((p - p.transpose()).cwiseAbs().maxCoeff() == 0.0);
    CHECK(Eigen::LLT<Matrix>(p).info() == Eigen::Success);
  }
}

TEST_CASE("empirical precision") {
  const Index n = 100000;
  const SampleMatrix one = sample(WeightedDag(1, {}), linear(), n, 1);
  CHECK(std::abs(linear_empirical_precision(one)(0, 0) - 1.0) < 0.05);

  const WeightedDag g(2, {{0, 1, 2.0}});
  CHECK((linear_empirical_precision(sample(g, linear(), n, 2)) - linear_population_precision(g)).cwiseAbs().maxCoeff() <
        0.1);

  const SampleMatrix iid = sample(WeightedDag(4, {}), linear(), n, 3);
  CHECK((linear_empirical_precision(iid) - Matrix::Identity(4, 4)).cwiseAbs().maxCoeff() < 0.05);

  Matrix dup(100, 2);
  dup.col(0) = sample(WeightedDag(1, {}), linear(), 100, 4).data.col(0);
  dup.col(1) = dup.col(0);
  try {
    linear_empirical_precision(SampleMatrix(dup));
    FAIL("expected an inversion error");
  } catch (const InversionError& e) {
    CHECK(std::string(e.what()).find("ridge") != std::string::npos);
  }
  CHECK_NOTHROW(linear_empirical_precision(SampleMatrix(dup), 1e-3));
}

TEST_CASE("off-diagonal block statistics") {
  const WeightedDag lin(3, {{0, 2, 1.0}, {1, 2, -1.5}});
  const SampleMatrix xl = sample(lin, linear(), 2000, 1);
  const OracleProvider pl(lin, linear());
  const OffdiagBlockStats sl = offdiag_block_samples(pl, xl, {2});
  CHECK(sl.remaining == NodeSet{0, 1});
  CHECK(sl.variance().cwiseAbs().maxCoeff() < 1e-12);
  CHECK(sl.mean(0, 0) == doctest::Approx(-1.0));

  const WeightedDag t(2, {{0, 1, 1.5}});
  const SampleMatrix xt = sample(t, tanh_anm(), 2000, 2);
  const OracleProvider pt(t, tanh_anm());
  CHECK(offdiag_block_samples(pt, xt, {1}).variance()(0, 0) > 0.0);

  const OffdiagBlockStats all = offdiag_block_samples(pt, xt, {0, 1});
  CHECK(all.mean.rows() == 0);
  CHECK(all.mean.cols() == 2);

  const LinearEmpiricalProvider emp(xl);
  CHECK(offdiag_block_samples(emp, xl, {2}).variance().cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("streamed mean reports the first bad sample") {
  Matrix x = Matrix::Zero(500, 2);
  x(37, 0) = 999.0;
  x(400, 0) = 999.0;
  const PoisonProvider p;
  for (bool par : {false, true}) {
    try {
      p.mean_hessian(SampleMatrix(x), StreamOptions{64, par});
      FAIL("expected a build error");
    } catch (const BuildError& e) {
      CHECK(e.sample() == 37);
    }
  }
}

TEST_CASE("leaf diagonal sits at 1/sigma^2 and parents above it") {
  const WeightedDag g = generate_er(6, 6.0, 9).dag;
  const SampleMatrix x = sample(g, tanh_anm(), 20000, 9);
  const Matrix m = OracleProvider(g, tanh_anm()).mean_hessian(x);
  for (int i = 0; i < 6; ++i) {
    if (g.is_leaf(i))
      CHECK(m(i, i) == doctest::Approx(1.0));
    else
      CHECK(m(i, i) > 1.0 + 1e-3);
  }
}

TEST_CASE("expectation gap is confined to the leaf's parents") {
  // 3 -> 0 -> 2 <- 1; node 3 is an ancestor but not a parent of the leaf 2.
  const WeightedDag g(4, {{3, 0, 1.2}, {0, 2, 1.5}, {1, 2, -0.9}});
  const SampleMatrix x = sample(g, tanh_anm(), 20000, 5);
  const OracleProvider p(g, tanh_anm());
  const Matrix exact = exact_marginal(p, x, {{2}}, 0.0);
  const Matrix mean = p.mean_hessian(x);
  const NodeSet keep{0, 1, 3};
  const Matrix schur_mean = mean(keep, keep) - mean(keep, NodeSet{2}) * mean(NodeSet{2}, keep) / mean(2, 2);
  const Matrix gap = exact - schur_mean;
  // Row/column of node 3 (index 2 in the kept order) carry no gap.
  CHECK(gap.row(2).cwiseAbs().maxCoeff() < 1e-12);
  CHECK(gap.col(2).cwiseAbs().maxCoeff() < 1e-12);
  CHECK(gap.topLeftCorner(2, 2).cwiseAbs().maxCoeff() > 1e-3);
}

TEST_CASE("providers check dimensions and capabilities") {
  const WeightedDag g(2, {{0, 1, 1.0}});
  const OracleProvider p(g, linear());
  const SampleMatrix wrong = sample(WeightedDag(3, {}), linear(), 10, 1);
  CHECK_THROWS_AS(p.mean_hessian(wrong), InputError);
  const LinearPopulationProvider lp(g);
  CHECK(lp.mean_hessian(sample(g, linear(), 10, 1)).isApprox(linear_population_precision(g)));
  CHECK(lp.build_memory().total() > 0);
}
