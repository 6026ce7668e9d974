#include "ssts/score_net.hpp"

#include "ssts/kernels.hpp"
#include "ssts/rng.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <numeric>
#include <random>

namespace ssts {

std::string to_string(Activation a) {
  switch (a) {
    case Activation::Tanh: return "tanh";
    case Activation::Softplus: return "softplus";
    case Activation::Silu: return "silu";
    case Activation::Identity: return "identity";
  }
  return "?";
}

std::string to_string(ScoreObjective o) { return o == ScoreObjective::Denoising ? "denoising" : "sliced"; }

Activation parse_activation(const std::string& s) {
  if (s == "tanh") return Activation::Tanh;
  if (s == "softplus") return Activation::Softplus;
  if (s == "silu") return Activation::Silu;
  if (s == "identity") return Activation::Identity;
  throw ParameterError("unknown activation '" + s + "' (tanh|softplus|silu|identity)");
}

ScoreObjective parse_score_objective(const std::string& s) {
  if (s == "denoising" || s == "dsm") return ScoreObjective::Denoising;
  if (s == "sliced" || s == "ssm") return ScoreObjective::Sliced;
  throw ParameterError("unknown score objective '" + s + "' (denoising|sliced)");
}

void ScoreNetConfig::validate() const {
  for (int h : hidden_sizes)
    if (h < 1) throw ParameterError("ScoreNetConfig.hidden_sizes: widths must be >= 1");
  if (epochs < 1) throw ParameterError("ScoreNetConfig.epochs must be >= 1");
  if (batch_size < 1) throw ParameterError("ScoreNetConfig.batch_size must be >= 1");
  if (!(learning_rate > 0.0) || !std::isfinite(learning_rate))
    throw ParameterError("ScoreNetConfig.learning_rate must be > 0");
  if (!(lr_floor >= 0.0 && lr_floor <= 1.0)) throw ParameterError("ScoreNetConfig.lr_floor must lie in [0, 1]");
  if (!(noise_level > 0.0) || !std::isfinite(noise_level))
    throw ParameterError("ScoreNetConfig.noise_level must be > 0");
  if (std::isnan(lambda_sparse) || std::isinf(lambda_sparse))
    throw ParameterError("ScoreNetConfig.lambda_sparse must be finite");
  if (projections < 1) throw ParameterError("ScoreNetConfig.projections must be >= 1");
}

std::vector<int> ScoreNetConfig::resolved_hidden(int d) const {
  if (!hidden_sizes.empty()) return hidden_sizes;
  const int w = std::min(std::max(64, 2 * d), 256);
  return {w, w};
}

double ScoreNetConfig::resolved_lambda(int d) const {
  if (lambda_sparse >= 0.0) return lambda_sparse;
  return d < 50 ? 0.0 : 1e-5 * std::sqrt(static_cast<double>(d));
}

namespace {

// a = act(z), d1 = act'(z), d2 = act''(z); any output pointer may be null.
void activate(Activation act, const Matrix& z, Matrix* a, Matrix* d1, Matrix* d2) {
  switch (act) {
    case Activation::Tanh: {
      const Eigen::ArrayXXd t = z.array().tanh();
      const Eigen::ArrayXXd g = 1.0 - t.square();
      if (a) *a = t.matrix();
      if (d1) *d1 = g.matrix();
      if (d2) *d2 = (-2.0 * t * g).matrix();
      break;
    }
    case Activation::Softplus: {
      const Eigen::ArrayXXd sig = 1.0 / (1.0 + (-z.array()).exp());
      if (a) *a = (z.array().max(0.0) + (-z.array().abs()).exp().log1p()).matrix();
      if (d1) *d1 = sig.matrix();
      if (d2) *d2 = (sig * (1.0 - sig)).matrix();
      break;
    }
    case Activation::Silu: {
      const Eigen::ArrayXXd sig = 1.0 / (1.0 + (-z.array()).exp());
      const Eigen::ArrayXXd ds = sig * (1.0 - sig);
      if (a) *a = (z.array() * sig).matrix();
      if (d1) *d1 = (sig + z.array() * ds).matrix();
      if (d2) *d2 = (ds * (2.0 + z.array() * (1.0 - 2.0 * sig))).matrix();
      break;
    }
    case Activation::Identity:
      if (a) *a = z;
      if (d1) *d1 = Matrix::Ones(z.rows(), z.cols());
      if (d2) *d2 = Matrix::Zero(z.rows(), z.cols());
      break;
  }
}

std::size_t hidden_count(const std::vector<DenseLayer>& layers) { return layers.empty() ? 0 : layers.size() - 1; }

// Forward pass in network coordinates with the quantities backprop needs.
struct Tape {
  std::vector<Matrix> a;    // a[0] = input, a[l] = activation of hidden layer l
  std::vector<Matrix> d1;   // act'(z_l)
  std::vector<Matrix> d2;   // act''(z_l), sliced objective only
  std::vector<Matrix> dz;   // tangent pre-activations W_l t_{l-1}
  std::vector<Matrix> t;    // tangents, t[0] = projection directions
  Matrix out;
  Matrix tout;
};

void forward(const std::vector<DenseLayer>& layers, Activation act, const Matrix& x, const Matrix* v, Tape& tp) {
  const std::size_t h = hidden_count(layers);
  tp.a.assign(h + 1, Matrix());
  tp.d1.assign(h + 1, Matrix());
  tp.d2.assign(h + 1, Matrix());
  tp.a[0] = x;
  if (v) {
    tp.t.assign(h + 1, Matrix());
    tp.dz.assign(h + 1, Matrix());
    tp.t[0] = *v;
  }
  for (std::size_t l = 1; l <= h; ++l) {
    const DenseLayer& L = layers[l - 1];
    Matrix z = L.weight * tp.a[l - 1];
    z.colwise() += L.bias;
    activate(act, z, &tp.a[l], &tp.d1[l], v ? &tp.d2[l] : nullptr);
    if (v) {
      tp.dz[l] = L.weight * tp.t[l - 1];
      tp.t[l] = tp.d1[l].cwiseProduct(tp.dz[l]);
    }
  }
  const DenseLayer& O = layers.back();
  tp.out = O.weight * tp.a[h];
  tp.out.colwise() += O.bias;
  if (v) tp.tout = O.weight * tp.t[h];
}

struct Grads {
  std::vector<Matrix> w;
  std::vector<Vector> b;
};

// Reverse pass given dLoss/dout (gs) and, for the sliced objective,
// dLoss/dtout (gt).
void backward(const std::vector<DenseLayer>& layers, const Tape& tp, const Matrix& gs, const Matrix* gt, Grads& g) {
  const std::size_t h = hidden_count(layers);
  g.w.resize(layers.size());
  g.b.resize(layers.size());
  g.w[h] = gs * tp.a[h].transpose();
  if (gt) g.w[h].noalias() += *gt * tp.t[h].transpose();
  g.b[h] = gs.rowwise().sum();
  Matrix ga = layers[h].weight.transpose() * gs;
  Matrix gtan;
  if (gt) gtan = layers[h].weight.transpose() * *gt;
  for (std::size_t l = h; l >= 1; --l) {
    Matrix gz = ga.cwiseProduct(tp.d1[l]);
    Matrix gdz;
    if (gt) {
      gz += gtan.cwiseProduct(tp.d2[l]).cwiseProduct(tp.dz[l]);
      gdz = gtan.cwiseProduct(tp.d1[l]);
    }
    const std::size_t li = l - 1;
    g.w[li] = gz * tp.a[l - 1].transpose();
    if (gt) g.w[li].noalias() += gdz * tp.t[l - 1].transpose();
    g.b[li] = gz.rowwise().sum();
    if (l > 1) {
      ga = layers[li].weight.transpose() * gz;
      if (gt) gtan = layers[li].weight.transpose() * gdz;
    }
  }
}

struct Adam {
  std::vector<Matrix> mw, vw;
  std::vector<Vector> mb, vb;
  long step = 0;
  static constexpr double b1 = 0.9, b2 = 0.999, eps = 1e-8;

  explicit Adam(const std::vector<DenseLayer>& layers) {
    for (const auto& L : layers) {
      mw.push_back(Matrix::Zero(L.weight.rows(), L.weight.cols()));
      vw.push_back(Matrix::Zero(L.weight.rows(), L.weight.cols()));
      mb.push_back(Vector::Zero(L.bias.size()));
      vb.push_back(Vector::Zero(L.bias.size()));
    }
  }

  void apply(std::vector<DenseLayer>& layers, const Grads& g, double lr) {
    ++step;
    const double c1 = 1.0 - std::pow(b1, static_cast<double>(step));
    const double c2 = 1.0 - std::pow(b2, static_cast<double>(step));
    for (std::size_t l = 0; l < layers.size(); ++l) {
      mw[l] = b1 * mw[l] + (1.0 - b1) * g.w[l];
      vw[l] = b2 * vw[l] + (1.0 - b2) * g.w[l].cwiseAbs2();
      layers[l].weight.array() -= lr * (mw[l].array() / c1) / ((vw[l].array() / c2).sqrt() + eps);
      mb[l] = b1 * mb[l] + (1.0 - b1) * g.b[l];
      vb[l] = b2 * vb[l] + (1.0 - b2) * g.b[l].cwiseAbs2();
      layers[l].bias.array() -= lr * (mb[l].array() / c1) / ((vb[l].array() / c2).sqrt() + eps);
    }
  }
};

// Proximal step of t * sum_j ||W[:, j]||_2.
void group_soft_threshold(Matrix& w, double t) {
  for (Index j = 0; j < w.cols(); ++j) {
    const double nrm = w.col(j).norm();
    if (nrm <= t)
      w.col(j).setZero();
    else
      w.col(j) *= 1.0 - t / nrm;
  }
}

double group_norm_sum(const Matrix& w) {
  double s = 0.0;
  for (Index j = 0; j < w.cols(); ++j) s += w.col(j).norm();
  return s;
}

Matrix fill_normal(Index rows, Index cols, Engine& rng) {
  std::normal_distribution<double> nd(0.0, 1.0);
  Matrix m(rows, cols);
  for (Index j = 0; j < cols; ++j)
    for (Index i = 0; i < rows; ++i) m(i, j) = nd(rng);
  return m;
}

}  // namespace

ScoreModel::ScoreModel(std::vector<DenseLayer> layers, Activation act, Vector center, Vector scale)
    : layers_(std::move(layers)), act_(act), center_(std::move(center)), scale_(std::move(scale)) {
  if (layers_.empty()) throw ParameterError("ScoreModel: needs at least one layer");
  const Index d = center_.size();
  if (d < 1 || scale_.size() != d) throw ParameterError("ScoreModel: center/scale length mismatch");
  if ((scale_.array() <= 0.0).any()) throw ParameterError("ScoreModel: scale entries must be > 0");
  Index in = d;
  for (const auto& L : layers_) {
    if (L.weight.cols() != in || L.bias.size() != L.weight.rows())
      throw ParameterError("ScoreModel: inconsistent layer shapes");
    in = L.weight.rows();
  }
  if (in != d) throw ParameterError("ScoreModel: output layer must have d rows");
  input_std_ = Vector::Ones(d);
}

std::size_t ScoreModel::parameter_count() const {
  std::size_t n = 0;
  for (const auto& L : layers_) n += static_cast<std::size_t>(L.weight.size() + L.bias.size());
  return n;
}

Matrix ScoreModel::score_batch(const Eigen::Ref<const Matrix>& x) const {
  if (x.rows() != dim()) throw InputError("ScoreModel::score_batch: wrong input dimension");
  const Matrix xc = ((x.colwise() - center_).array().colwise() / scale_.array()).matrix();
  Tape tp;
  forward(layers_, act_, xc, nullptr, tp);
  return (tp.out.array().colwise() / scale_.array()).matrix();
}

Vector ScoreModel::score(const Eigen::Ref<const Vector>& x) const { return score_batch(Matrix(x)).col(0); }

Matrix ScoreModel::jacobian(const Eigen::Ref<const Vector>& x) const {
  if (x.size() != dim()) throw InputError("ScoreModel::jacobian: wrong input dimension");
  const Matrix xc = ((x - center_).array() / scale_.array()).matrix();
  Tape tp;
  forward(layers_, act_, xc, nullptr, tp);
  const std::size_t h = hidden_count(layers_);
  Matrix m = layers_[h].weight;
  for (std::size_t l = h; l >= 1; --l) m = (m * tp.d1[l].col(0).asDiagonal()) * layers_[l - 1].weight;
  const Vector inv = scale_.cwiseInverse();
  return inv.asDiagonal() * m * inv.asDiagonal();
}

Matrix ScoreModel::jacobian_fd(const Eigen::Ref<const Vector>& x, double rel_step) const {
  const int d = dim();
  Matrix j(d, d);
  for (int k = 0; k < d; ++k) {
    const double h = rel_step * input_std_[k];
    Matrix pm(d, 2);
    pm.col(0) = x;
    pm.col(1) = x;
    pm(k, 0) += h;
    pm(k, 1) -= h;
    const Matrix s = score_batch(pm);
    j.col(k) = (s.col(0) - s.col(1)) / (2.0 * h);
  }
  return j;
}

Vector ScoreModel::input_column_norms() const { return layers_.front().weight.colwise().norm().transpose(); }

void ScoreModel::save(const std::string& path) const {
  nlohmann::json j;
  j["format"] = "ssts-score-mlp";
  j["version"] = 1;
  j["activation"] = to_string(act_);
  j["center"] = std::vector<double>(center_.data(), center_.data() + center_.size());
  j["scale"] = std::vector<double>(scale_.data(), scale_.data() + scale_.size());
  j["input_std"] = std::vector<double>(input_std_.data(), input_std_.data() + input_std_.size());
  nlohmann::json layers = nlohmann::json::array();
  for (const auto& L : layers_) {
    const RowMatrix w = L.weight;
    layers.push_back({{"rows", w.rows()},
                      {"cols", w.cols()},
                      {"weights", std::vector<double>(w.data(), w.data() + w.size())},
                      {"bias", std::vector<double>(L.bias.data(), L.bias.data() + L.bias.size())}});
  }
  j["layers"] = layers;
  std::ofstream f(path);
  if (!f) throw IoError("cannot write model checkpoint '" + path + "'");
  f << j.dump() << '\n';
  if (!f) throw IoError("failed writing model checkpoint '" + path + "'");
}

ScoreModel ScoreModel::load(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw IoError("cannot read model checkpoint '" + path + "'");
  nlohmann::json j;
  try {
    f >> j;
    if (j.at("format").get<std::string>() != "ssts-score-mlp") throw IoError("'" + path + "' is not a score model");
    auto vec = [](const nlohmann::json& a) {
      const auto v = a.get<std::vector<double>>();
      return Vector(Eigen::Map<const Vector>(v.data(), static_cast<Index>(v.size())));
    };
    std::vector<DenseLayer> layers;
    for (const auto& L : j.at("layers")) {
      const Index r = L.at("rows").get<Index>();
      const Index c = L.at("cols").get<Index>();
      const auto w = L.at("weights").get<std::vector<double>>();
      if (static_cast<Index>(w.size()) != r * c) throw IoError("checkpoint layer has wrong weight count");
      DenseLayer dl;
      dl.weight = Eigen::Map<const RowMatrix>(w.data(), r, c);
      dl.bias = vec(L.at("bias"));
      layers.push_back(std::move(dl));
    }
    ScoreModel m(std::move(layers), parse_activation(j.at("activation").get<std::string>()), vec(j.at("center")),
                 vec(j.at("scale")));
    if (j.contains("input_std")) m.set_input_std(vec(j.at("input_std")));
    return m;
  } catch (const nlohmann::json::exception& e) {
    throw IoError("malformed model checkpoint '" + path + "': " + e.what());
  }
}

ScoreModel identity_score_model(int d) {
  if (d < 1) throw ParameterError("identity_score_model: d must be >= 1");
  std::vector<DenseLayer> layers(2);
  layers[0].weight = Matrix::Identity(d, d);
  layers[0].bias = Vector::Zero(d);
  layers[1].weight = -Matrix::Identity(d, d);
  layers[1].bias = Vector::Zero(d);
  return ScoreModel(std::move(layers), Activation::Identity, Vector::Zero(d), Vector::Ones(d));
}

ScoreModel train_score_net(const SampleMatrix& data, const ScoreNetConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  data.validate();
  const Index n = data.n();
  const int d = static_cast<int>(data.d());
  if (n < cfg.batch_size)
    throw ParameterError("train_score_net: n=" + std::to_string(n) + " is smaller than batch_size=" +
                         std::to_string(cfg.batch_size));

  const Vector center = data.data.colwise().mean().transpose();
  const Matrix centered = data.data.rowwise() - center.transpose();
  const Vector stdev = (centered.colwise().squaredNorm() / static_cast<double>(n)).cwiseSqrt().transpose();
  for (int j = 0; j < d; ++j)
    if (!(stdev[j] > 0.0)) throw InputError("train_score_net: column " + std::to_string(j) + " is constant");
  const Vector scale = cfg.scale_inputs ? stdev : Vector::Ones(d);
  // Network coordinates, one sample per column.
  const Matrix xc = (centered.transpose().array().colwise() / scale.array()).matrix();
  const Vector sig_n = cfg.noise_level * (stdev.array() / scale.array()).matrix();
  const Vector sig_n2 = sig_n.cwiseAbs2();

  // LeCun-normal initialization.
  Engine init = make_engine(seed, kTagNetInit);
  std::vector<DenseLayer> layers;
  int in = d;
  auto widths = cfg.resolved_hidden(d);
  widths.push_back(d);
  for (int w : widths) {
    DenseLayer L;
    L.weight = fill_normal(w, in, init) / std::sqrt(static_cast<double>(in));
    L.bias = Vector::Zero(w);
    layers.push_back(std::move(L));
    in = w;
  }

  const double lambda = cfg.resolved_lambda(d);
  const Index bs = cfg.batch_size;
  const Index batches = (n + bs - 1) / bs;
  const double total_steps = static_cast<double>(batches) * cfg.epochs;
  const bool sliced = cfg.objective == ScoreObjective::Sliced;

  Adam adam(layers);
  std::vector<Index> perm(static_cast<std::size_t>(n));
  ScoreModel model;
  std::vector<double> trace;
  trace.reserve(static_cast<std::size_t>(cfg.epochs));
  Tape tp;
  Grads g;
  long step = 0;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::iota(perm.begin(), perm.end(), Index{0});
    Engine shuf = make_engine(seed, kTagNetShuffle, static_cast<std::uint64_t>(epoch));
    std::shuffle(perm.begin(), perm.end(), shuf);
    Engine noise = make_engine(seed, kTagNetNoise, static_cast<std::uint64_t>(epoch));
    KahanSum epoch_loss;
    for (Index b = 0; b < batches; ++b) {
      const Index lo = b * bs;
      const Index m = std::min(bs, n - lo);
      Matrix xb(d, m);
      for (Index c = 0; c < m; ++c) xb.col(c) = xc.col(perm[static_cast<std::size_t>(lo + c)]);
      double batch_loss = 0.0;
      if (!sliced) {
        const Matrix z = fill_normal(d, m, noise);
        forward(layers, cfg.activation, xb + sig_n.asDiagonal() * z, nullptr, tp);
        // Weighted by sigma_n^2 per coordinate: || sigma_n s + z ||^2. The
        // reported value subtracts ||z||^2 - d, a zero-mean control variate.
        const Matrix r = sig_n.asDiagonal() * tp.out + z;
        batch_loss = (r.colwise().squaredNorm().sum() - z.colwise().squaredNorm().sum()) / static_cast<double>(m) +
                     static_cast<double>(d);
        const Matrix gs = (2.0 / static_cast<double>(m)) * (sig_n.asDiagonal() * r);
        backward(layers, tp, gs, nullptr, g);
      } else {
        // Variance-reduced sliced objective: v^T J v + 0.5 ||s||^2.
        const Matrix xr = xb.replicate(1, cfg.projections);
        const Matrix v = fill_normal(d, xr.cols(), noise);
        forward(layers, cfg.activation, xr, &v, tp);
        const double cnt = static_cast<double>(xr.cols());
        batch_loss = (v.cwiseProduct(tp.tout).sum() + 0.5 * tp.out.squaredNorm()) / cnt;
        const Matrix gs = tp.out / cnt;
        const Matrix gt = v / cnt;
        backward(layers, tp, gs, &gt, g);
      }
      const double frac = static_cast<double>(step) / total_steps;
      const double lr = cfg.learning_rate * (cfg.lr_floor + (1.0 - cfg.lr_floor) * 0.5 *
                                                                (1.0 + std::cos(std::numbers::pi * frac)));
      adam.apply(layers, g, lr);
      if (lambda > 0.0) group_soft_threshold(layers.front().weight, lr * lambda);
      ++step;
      if (!std::isfinite(batch_loss)) throw TrainingError("score training diverged (non-finite loss)", epoch);
      epoch_loss.add(batch_loss * static_cast<double>(m));
    }
    const double loss = epoch_loss.sum / static_cast<double>(n) + lambda * group_norm_sum(layers.front().weight);
    if (!std::isfinite(loss)) throw TrainingError("score training diverged (non-finite loss)", epoch);
    trace.push_back(loss);
  }
  model = ScoreModel(std::move(layers), cfg.activation, center, scale);
  model.set_input_std(stdev);
  model.loss_trace = std::move(trace);
  model.final_loss = model.loss_trace.back();
  return model;
}

namespace {

// Network-coordinate batch for rows [lo, lo + m) of the dataset.
Matrix network_batch(const ScoreModel& model, const Matrix& data, Index lo, Index m) {
  Matrix x = data.middleRows(lo, m).transpose();
  x.colwise() -= model.center();
  return (x.array().colwise() / model.scale().array()).matrix();
}

}  // namespace

NeuralProvider::NeuralProvider(std::shared_ptr<const ScoreModel> model, JacobianMethod method, double fd_rel_step)
    : model_(std::move(model)), method_(method), fd_rel_step_(fd_rel_step) {
  if (!model_) throw ParameterError("NeuralProvider: null model");
  if (!(fd_rel_step_ > 0.0)) throw ParameterError("NeuralProvider: finite-difference step must be > 0");
}

void NeuralProvider::sample_hessian(const Eigen::Ref<const Vector>& x, Matrix& out) const {
  out = method_ == JacobianMethod::Exact ? Matrix(-model_->jacobian(x)) : Matrix(-model_->jacobian_fd(x, fd_rel_step_));
}

Matrix NeuralProvider::mean_hessian(const SampleMatrix& data, const StreamOptions& opt) const {
  const ScoreModel& m = *model_;
  const Index d = m.dim();
  if (data.d() != d)
    throw InputError("provider dimension " + std::to_string(d) + " does not match data with " +
                     std::to_string(data.d()) + " columns");
  if (opt.micro_batch < 1) throw ParameterError("micro_batch must be >= 1");
  const Index n = data.n();
  const Index mb = opt.micro_batch;
  const Index chunks = (n + mb - 1) / mb;
  const auto& layers = m.layers();
  const std::size_t h = layers.size() - 1;
  const Vector inv = m.scale().cwiseInverse();

  auto run = [&](Index rows, Index cols, auto&& fn) {
    StreamSum s = opt.parallel ? stream_sum_omp(chunks, rows, cols, fn) : stream_sum_serial(chunks, rows, cols, fn);
    if (s.first_bad >= 0) {
      // Locate the first offending sample inside the failing micro-batch.
      const Index lo = static_cast<Index>(s.first_bad) * mb;
      for (Index r = lo; r < std::min(n, lo + mb); ++r) {
        Matrix hr;
        sample_hessian(data.data.row(r).transpose(), hr);
        if (!hr.allFinite()) throw BuildError("non-finite score Jacobian at sample " + std::to_string(r), r);
      }
      throw BuildError("non-finite score Jacobian in micro-batch starting at sample " + std::to_string(lo), lo);
    }
    return std::move(s.sum);
  };
  const double nn = static_cast<double>(n);

  if (method_ == JacobianMethod::FiniteDifference) {
    const Vector step = fd_rel_step_ * m.input_std();
    Matrix sum = run(d, d, [&](Index c, Matrix& out) {
      const Index lo = c * mb;
      const Index cnt = std::min(mb, n - lo);
      const Matrix x = data.data.middleRows(lo, cnt).transpose();
      for (Index k = 0; k < d; ++k) {
        Matrix xp = x, xm = x;
        xp.row(k).array() += step[k];
        xm.row(k).array() -= step[k];
        out.col(k) = (m.score_batch(xp) - m.score_batch(xm)).rowwise().sum() / (2.0 * step[k]);
      }
    });
    sum /= -nn;
    return sum;
  }

  Matrix jc;
  if (h == 0) {
    jc = layers[0].weight;
  } else if (h == 1) {
    const Index h1 = layers[0].weight.rows();
    const Matrix sum = run(h1, 1, [&](Index c, Matrix& out) {
      const Index lo = c * mb;
      Matrix z = layers[0].weight * network_batch(m, data.data, lo, std::min(mb, n - lo));
      z.colwise() += layers[0].bias;
      Matrix d1;
      activate(m.activation(), z, nullptr, &d1, nullptr);
      out = d1.rowwise().sum();
    });
    jc = layers[1].weight * (sum.col(0) / nn).asDiagonal() * layers[0].weight;
  } else if (h == 2) {
    const Index h1 = layers[0].weight.rows();
    const Index h2 = layers[1].weight.rows();
    Matrix mid = run(h2, h1, [&](Index c, Matrix& out) {
      const Index lo = c * mb;
      // Scoped so each batch buffer is released as soon as it is consumed.
      Matrix d1, d2;
      {
        Matrix a1;
        {
          Matrix z1 = layers[0].weight * network_batch(m, data.data, lo, std::min(mb, n - lo));
          z1.colwise() += layers[0].bias;
          activate(m.activation(), z1, &a1, &d1, nullptr);
        }
        Matrix z2 = layers[1].weight * a1;
        a1.resize(0, 0);
        z2.colwise() += layers[1].bias;
        activate(m.activation(), z2, nullptr, &d2, nullptr);
      }
      out.noalias() = d2 * d1.transpose();
    });
    mid = layers[1].weight.cwiseProduct(mid) / nn;
    // W_out * mid * W_1 one row block at a time; the only intermediate is rows x h1.
    jc.resize(d, d);
    const Index rb = std::max<Index>(1, std::min(mb, d));
    for (Index r0 = 0; r0 < d; r0 += rb) {
      const Index rows = std::min(rb, d - r0);
      const Matrix t = layers[2].weight.middleRows(r0, rows) * mid;
      jc.middleRows(r0, rows).noalias() = t * layers[0].weight;
    }
  } else {
    jc = run(d, d, [&](Index c, Matrix& out) {
      const Index lo = c * mb;
      const Index cnt = std::min(mb, n - lo);
      Tape tp;
      forward(layers, m.activation(), network_batch(m, data.data, lo, cnt), nullptr, tp);
      out.setZero();
      for (Index s = 0; s < cnt; ++s) {
        Matrix acc = layers[h].weight;
        for (std::size_t l = h; l >= 1; --l) acc = (acc * tp.d1[l].col(s).asDiagonal()) * layers[l - 1].weight;
        out += acc;
      }
    });
    jc /= nn;
  }
  // Back to data coordinates in place: H = -S^{-1} J S^{-1}.
  for (Index c = 0; c < d; ++c) jc.col(c) *= -inv[c];
  jc.array().colwise() *= inv.array();
  return jc;
}

MemoryEstimate NeuralProvider::build_memory(const StreamOptions& opt) const {
  const auto& layers = model_->layers();
  const std::size_t h = layers.size() - 1;
  const std::size_t d = static_cast<std::size_t>(model_->dim());
  const std::size_t mb = static_cast<std::size_t>(std::max<Index>(1, opt.micro_batch));
  const std::size_t threads = opt.parallel ? static_cast<std::size_t>(max_threads()) : 1;
  const std::size_t w = sizeof(double);
  std::size_t widest = d;
  for (const auto& L : layers) widest = std::max(widest, static_cast<std::size_t>(L.weight.rows()));
  MemoryEstimate e;
  e.output_bytes = d * d * w;
  std::size_t acc = 0;
  std::size_t scratch = 0;
  if (method_ == JacobianMethod::FiniteDifference) {
    acc = d * d;
    scratch = 6 * mb * widest + d * d;
  } else if (h == 0) {
    acc = 0;
  } else if (h == 1) {
    acc = static_cast<std::size_t>(layers[0].weight.rows());
    scratch = 2 * mb * widest + acc;
    e.finalize_bytes = d * acc * w;
  } else if (h == 2) {
    const std::size_t h1 = static_cast<std::size_t>(layers[0].weight.rows());
    const std::size_t h2 = static_cast<std::size_t>(layers[1].weight.rows());
    acc = h2 * h1;
    // Live batch buffers peak at one of: input + z1, z1/a1/d1, a1/d1/z2, d1/z2/d2.
    // The per-chunk outer product sits beside them.
    scratch = mb * std::max({d + h1, 3 * h1, 2 * h1 + h2, h1 + 2 * h2}) + h2 * h1;
    // Finishing keeps mid (h2 x h1) and one rb x h1 row block next to the output.
    e.finalize_bytes = (h2 * h1 + std::min(mb, d) * h1) * w;
  } else {
    acc = d * d;
    scratch = mb * (2 * h * widest + d) + 2 * d * widest + d * d;
  }
  // Each thread holds a compensated accumulator (sum + compensation) and scratch.
  e.accumulator_bytes = threads * 2 * acc * w;
  e.scratch_bytes = threads * scratch * w;
  return e;
}

Matrix score_net_hessian_stream(const ScoreModel& model, const SampleMatrix& data, Index micro_batch, bool parallel) {
  // Non-owning handle: the provider does not outlive this call.
  NeuralProvider p(std::shared_ptr<const ScoreModel>(std::shared_ptr<const ScoreModel>(), &model));
  StreamOptions opt;
  opt.micro_batch = micro_batch;
  opt.parallel = parallel;
  return p.mean_hessian(data, opt);
}

}  // namespace ssts
