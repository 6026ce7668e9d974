#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "ssts/hessian.hpp"
#include "ssts/score_net.hpp"
#include "test_util.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>

using namespace ssts;
using testutil::linear;

namespace {

// Window-5 trailing moving average.
std::vector<double> smooth5(const std::vector<double>& v) {
  std::vector<double> out;
  for (std::size_t i = 4; i < v.size(); ++i) out.push_back((v[i] + v[i - 1] + v[i - 2] + v[i - 3] + v[i - 4]) / 5.0);
  return out;
}

ScoreModel random_model(int d, std::vector<int> hidden, Activation act, std::uint64_t seed) {
  Engine rng(seed);
  std::normal_distribution<double> n(0.0, 0.5);
  std::vector<DenseLayer> layers;
  int in = d;
  hidden.push_back(d);
  for (int w : hidden) {
    DenseLayer L;
    L.weight = Matrix::NullaryExpr(w, in, [&] { return n(rng); });
    L.bias = Vector::NullaryExpr(w, [&] { return n(rng); });
    layers.push_back(std::move(L));
    in = w;
  }
  Vector center = Vector::NullaryExpr(d, [&] { return n(rng); });
  Vector scale = Vector::Constant(d, 1.3);
  ScoreModel m(std::move(layers), act, center, scale);
  m.set_input_std(Vector::Ones(d));
  return m;
}

SampleMatrix gaussian_data(int d, Index n, std::uint64_t seed) { return sample(WeightedDag(d, {}), linear(), n, seed); }

}  // namespace

TEST_CASE("config defaults and validation") {
  ScoreNetConfig c;
  CHECK(c.resolved_hidden(10) == std::vector<int>{64, 64});
  CHECK(c.resolved_hidden(50) == std::vector<int>{100, 100});
  CHECK(c.resolved_hidden(500) == std::vector<int>{256, 256});
  CHECK(c.resolved_lambda(20) == 0.0);
  CHECK(c.resolved_lambda(100) == doctest::Approx(1e-4));
  c.noise_level = 0.0;
  CHECK_THROWS_AS(c.validate(), ParameterError);
  c = {};
  c.lambda_sparse = std::nan("");
  CHECK_THROWS_AS(c.validate(), ParameterError);
  c.lambda_sparse = -2.0;
  CHECK(c.resolved_lambda(100) == doctest::Approx(1e-4));
  CHECK(parse_activation("softplus") == Activation::Softplus);
  CHECK(parse_score_objective(to_string(ScoreObjective::Sliced)) == ScoreObjective::Sliced);
}

TEST_CASE("denoising score of a standard gaussian") {
  ScoreNetConfig c;
  c.epochs = 100;
  const ScoreModel m = train_score_net(gaussian_data(1, 4000, 1), c, 1);
  CHECK(std::abs(m.score(Vector::Constant(1, 0.0))[0]) < 0.3);
  CHECK(std::abs(m.score(Vector::Constant(1, 2.0))[0] + 2.0) < 0.3);
}

TEST_CASE("sliced score of a standard gaussian") {
  ScoreNetConfig c;
  c.epochs = 100;
  c.objective = ScoreObjective::Sliced;
  const ScoreModel m = train_score_net(gaussian_data(1, 4000, 2), c, 2);
  CHECK(std::abs(m.score(Vector::Constant(1, 0.0))[0]) < 0.3);
  CHECK(std::abs(m.score(Vector::Constant(1, 2.0))[0] + 2.0) < 0.3);
}

TEST_CASE("a large group-lasso weight suppresses every input column") {
  ScoreNetConfig c;
  c.epochs = 20;
  c.lambda_sparse = 1000.0;
  const ScoreModel m = train_score_net(gaussian_data(4, 1000, 3), c, 3);
  CHECK(m.input_column_norms().maxCoeff() < 1e-3);
}

TEST_CASE("mean negative Jacobian approximates the linear precision") {
  const WeightedDag g(2, {{0, 1, 2.0}});
  const SampleMatrix x = sample(g, linear(), 5000, 4);
  const ScoreModel m = train_score_net(x, ScoreNetConfig{}, 4);
  const Matrix h = score_net_hessian_stream(m, x, 64);
  const Matrix p = linear_population_precision(g);
  for (int i = 0; i < 2; ++i)
    for (int j = 0; j < 2; ++j) CHECK(std::abs(h(i, j) - p(i, j)) <= 0.15 * std::abs(p(i, j)));
}

TEST_CASE("smoothed training loss does not increase") {
  const WeightedDag g = generate_er(5, 5.0, 5).dag;
  const SampleMatrix x = sample(g, testutil::tanh_anm(), 3000, 5);
  ScoreNetConfig c;
  c.epochs = 120;
  const ScoreModel m = train_score_net(x, c, 5);
  REQUIRE(m.loss_trace.size() == 120);
  const auto s = smooth5(m.loss_trace);
  // Minibatch noise allows upticks. Consecutive smoothed values differ by
  // (v[i] - v[i-5]) / 5, so allow 4 standard deviations of that difference,
  // with the per-epoch spread estimated from the plateau.
  double mu = 0.0, var = 0.0;
  const std::size_t half = m.loss_trace.size() / 2;
  for (std::size_t i = half; i < m.loss_trace.size(); ++i) mu += m.loss_trace[i];
  mu /= static_cast<double>(m.loss_trace.size() - half);
  for (std::size_t i = half; i < m.loss_trace.size(); ++i) var += (m.loss_trace[i] - mu) * (m.loss_trace[i] - mu);
  var /= static_cast<double>(m.loss_trace.size() - half - 1);
  const double slack = 4.0 * std::sqrt(2.0 * var) / 5.0;
  for (std::size_t i = 1; i < s.size(); ++i) CHECK(s[i] <= s[i - 1] + slack);
  CHECK(s.back() < s.front());
  CHECK(m.final_loss == m.loss_trace.back());
}

TEST_CASE("training is deterministic per seed") {
  const SampleMatrix x = gaussian_data(3, 600, 6);
  ScoreNetConfig c;
  c.epochs = 5;
  const ScoreModel a = train_score_net(x, c, 9), b = train_score_net(x, c, 9);
  CHECK(a.loss_trace == b.loss_trace);
  CHECK((a.layers()[0].weight.array() == b.layers()[0].weight.array()).all());
}

TEST_CASE("training errors") {
  CHECK_THROWS_AS(train_score_net(gaussian_data(2, 50, 1), ScoreNetConfig{}, 1), ParameterError);
  Matrix constant = gaussian_data(2, 300, 2).data;
  constant.col(1).setConstant(3.0);
  CHECK_THROWS_AS(train_score_net(SampleMatrix(constant), ScoreNetConfig{}, 1), InputError);
  ScoreNetConfig wild;
  wild.epochs = 30;
  wild.learning_rate = 1e300;
  wild.lr_floor = 1.0;
  try {
    train_score_net(gaussian_data(2, 300, 3), wild, 1);
    FAIL("expected divergence");
  } catch (const TrainingError& e) {
    CHECK(e.epoch() >= 0);
  }
}

TEST_CASE("identity score model yields the identity SJIM") {
  const SampleMatrix x = gaussian_data(4, 333, 7);
  CHECK(score_net_hessian_stream(identity_score_model(4), x, 16) == Matrix::Identity(4, 4));
  const NeuralProvider p(std::make_shared<const ScoreModel>(identity_score_model(4)));
  CHECK(p.mean_hessian(x) == Matrix::Identity(4, 4));
}

TEST_CASE("micro-batch size does not change the streamed mean") {
  const ScoreModel m = random_model(5, {16, 16}, Activation::Tanh, 8);
  const SampleMatrix x = gaussian_data(5, 1000, 8);
  const Matrix a = score_net_hessian_stream(m, x, 1);
  const Matrix b = score_net_hessian_stream(m, x, 64);
  const Matrix c = score_net_hessian_stream(m, x, 64, false);
  CHECK((a - b).cwiseAbs().maxCoeff() < 1e-10);
  CHECK((b - c).cwiseAbs().maxCoeff() < 1e-10);
}

TEST_CASE("fast mean Jacobian paths equal the per-sample average") {
  const SampleMatrix x = gaussian_data(4, 300, 9);
  for (auto hidden : {std::vector<int>{12}, std::vector<int>{12, 10}, std::vector<int>{8, 8, 8}}) {
    for (Activation act : {Activation::Tanh, Activation::Softplus, Activation::Silu}) {
      const ScoreModel m = random_model(4, hidden, act, 10);
      Matrix ref = Matrix::Zero(4, 4);
      for (Index r = 0; r < x.n(); ++r) ref -= m.jacobian(x.data.row(r).transpose());
      ref /= static_cast<double>(x.n());
      CHECK((score_net_hessian_stream(m, x, 32) - ref).cwiseAbs().maxCoeff() < 1e-10);
    }
  }
}

TEST_CASE("exact Jacobian agrees with finite differences") {
  Engine rng(11);
  for (Activation act : {Activation::Tanh, Activation::Softplus, Activation::Silu}) {
    const ScoreModel m = random_model(5, {20, 20}, act, 12);
    for (int t = 0; t < 10; ++t) {
      const Vector x = testutil::random_point(5, rng, 1.0);
      CHECK(testutil::max_rel(m.jacobian_fd(x, 1e-4), m.jacobian(x)) < 1e-6);
    }
  }
  const SampleMatrix x = gaussian_data(5, 200, 12);
  const auto mp = std::make_shared<const ScoreModel>(random_model(5, {20, 20}, Activation::Tanh, 13));
  const Matrix exact = NeuralProvider(mp, JacobianMethod::Exact).mean_hessian(x);
  const Matrix fd = NeuralProvider(mp, JacobianMethod::FiniteDifference).mean_hessian(x);
  CHECK(testutil::max_rel(fd, exact) < 1e-5);
}

TEST_CASE("score batch matches single-sample evaluation") {
  const ScoreModel m = random_model(3, {7, 7}, Activation::Tanh, 14);
  Matrix xs(3, 4);
  xs.setRandom();
  const Matrix s = m.score_batch(xs);
  for (int c = 0; c < 4; ++c) CHECK((s.col(c) - m.score(xs.col(c))).cwiseAbs().maxCoeff() < 1e-14);
}

TEST_CASE("checkpoint round trip") {
  const ScoreModel m = random_model(3, {6, 5}, Activation::Softplus, 15);
  const auto path = (std::filesystem::temp_directory_path() / "ssts_model.json").string();
  m.save(path);
  const ScoreModel r = ScoreModel::load(path);
  CHECK(r.activation() == Activation::Softplus);
  CHECK(r.parameter_count() == m.parameter_count());
  Matrix xs(3, 5);
  xs.setRandom();
  CHECK(r.score_batch(xs) == m.score_batch(xs));
  CHECK(r.input_std() == m.input_std());
}

TEST_CASE("provider memory estimate scales with micro-batch") {
  const auto mp = std::make_shared<const ScoreModel>(random_model(10, {32, 32}, Activation::Tanh, 16));
  const NeuralProvider p(mp);
  const auto small = p.build_memory(StreamOptions{1, false}).total();
  const auto big = p.build_memory(StreamOptions{128, false}).total();
  CHECK(big > small);
  CHECK(p.model_bytes() == mp->parameter_count() * sizeof(double));
}
