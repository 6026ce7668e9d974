#pragma once

#include "ssts/hessian.hpp"
#include "ssts/mechanisms.hpp"
#include "ssts/types.hpp"

#include <cstdint>
#include <memory>
#include <string>
#include <vector>

namespace ssts {

enum class Activation { Tanh, Softplus, Silu, Identity };
enum class ScoreObjective { Denoising, Sliced };

std::string to_string(Activation a);
std::string to_string(ScoreObjective o);
Activation parse_activation(const std::string& s);
ScoreObjective parse_score_objective(const std::string& s);

struct ScoreNetConfig {
  // Hidden widths; empty selects two layers of width min(max(64, 2d), 256).
  std::vector<int> hidden_sizes;
  Activation activation = Activation::Tanh;
  ScoreObjective objective = ScoreObjective::Denoising;
  int epochs = 200;
  int batch_size = 128;
  double learning_rate = 1e-3;
  // Final learning rate of the cosine schedule, as a fraction of the initial one.
  double lr_floor = 0.05;
  // Denoising noise as a fraction of each column's standard deviation.
  double noise_level = 0.1;
  // Group-lasso weight on input-layer columns; negative selects the default
  // rule (0 below d = 50, otherwise 1e-5 * sqrt(d)).
  double lambda_sparse = -1.0;
  // Divide centered columns by their standard deviation before training.
  bool scale_inputs = false;
  // Random projections per sample for the sliced objective.
  int projections = 1;

  void validate() const;
  std::vector<int> resolved_hidden(int d) const;
  double resolved_lambda(int d) const;
};

struct DenseLayer {
  Matrix weight;  // out x in
  Vector bias;    // out
};

/// MLP score model s(x) ~ grad log p(x). Hidden layers apply the activation;
/// the output layer is affine. Inputs are mapped to x_c = (x - center) / scale
/// before the network, and scores are mapped back, so every public method
/// works in the original data coordinates.
class ScoreModel {
 public:
  ScoreModel() = default;
  ScoreModel(std::vector<DenseLayer> layers, Activation act, Vector center, Vector scale);

  int dim() const { return static_cast<int>(center_.size()); }
  Activation activation() const { return act_; }
  const std::vector<DenseLayer>& layers() const { return layers_; }
  std::vector<DenseLayer>& mutable_layers() { return layers_; }
  const Vector& center() const { return center_; }
  const Vector& scale() const { return scale_; }
  // Per-column standard deviation of the training data (sets finite-difference steps).
  const Vector& input_std() const { return input_std_; }
  void set_input_std(Vector s) { input_std_ = std::move(s); }
  std::size_t parameter_count() const;

  // Scores for a batch given as d x B (one sample per column).
  Matrix score_batch(const Eigen::Ref<const Matrix>& x) const;
  Vector score(const Eigen::Ref<const Vector>& x) const;
  // Exact Jacobian d s / d x at one sample.
  Matrix jacobian(const Eigen::Ref<const Vector>& x) const;
  // Central differences with per-coordinate step rel_step * input_std_k.
  Matrix jacobian_fd(const Eigen::Ref<const Vector>& x, double rel_step = 1e-3) const;
  // Euclidean norms of the input-layer columns (one per variable).
  Vector input_column_norms() const;

  void save(const std::string& path) const;
  static ScoreModel load(const std::string& path);

  // Training diagnostics (not serialized).
  std::vector<double> loss_trace;
  double final_loss = 0.0;

 private:
  std::vector<DenseLayer> layers_;
  Activation act_ = Activation::Tanh;
  Vector center_;
  Vector scale_;
  Vector input_std_;
};

// Trains s_theta on the rows of `data`. The default objective is denoising
// score matching at noise_level; the sliced objective is selectable. Throws
// ParameterError on invalid configuration and TrainingError(epoch) if the loss
// becomes non-finite.
ScoreModel train_score_net(const SampleMatrix& data, const ScoreNetConfig& cfg, std::uint64_t seed);

// A model with s(x) = -x (identity activation); its Jacobian is -I everywhere.
ScoreModel identity_score_model(int d);

enum class JacobianMethod { Exact, FiniteDifference };

/// Hessian provider backed by a score model: H(x) = -d s / d x.
class NeuralProvider final : public HessianProvider {
 public:
  explicit NeuralProvider(std::shared_ptr<const ScoreModel> model, JacobianMethod method = JacobianMethod::Exact,
                          double fd_rel_step = 1e-3);
  int dim() const override { return model_->dim(); }
  ProviderCaps caps() const override { return {true, true, true}; }
  std::string name() const override { return "neural"; }
  void sample_hessian(const Eigen::Ref<const Vector>& x, Matrix& out) const override;
  // Streams -J over micro-batches. With exact Jacobians and one or two
  // hidden layers the per-sample Jacobians are never formed: only the mean of
  // the activation-derivative outer products is accumulated.
  Matrix mean_hessian(const SampleMatrix& data, const StreamOptions& opt = {}) const override;
  MemoryEstimate build_memory(const StreamOptions& opt = {}) const override;

  const ScoreModel& model() const { return *model_; }
  std::size_t model_bytes() const { return model_->parameter_count() * sizeof(double); }

 private:
  std::shared_ptr<const ScoreModel> model_;
  JacobianMethod method_;
  double fd_rel_step_;
};

// Streaming mean of -grad_x s(x) over the rows of `data` (unsymmetrized).
Matrix score_net_hessian_stream(const ScoreModel& model, const SampleMatrix& data, Index micro_batch,
                                bool parallel = true);

}  // namespace ssts
