#pragma once

#include "ssts/dag.hpp"
#include "ssts/mechanisms.hpp"
#include "ssts/types.hpp"

#include <string>

namespace ssts {

enum class FeatureMap { Raw, RawTanh };

std::string to_string(FeatureMap f);
FeatureMap parse_feature_map(const std::string& s);

struct PruneConfig {
  // Lasso weight; negative selects 0.01 * sqrt(log d / n) * std(x_i) per node.
  double penalty_weight = -1.0;
  double coef_threshold = 0.05;
  FeatureMap feature_map = FeatureMap::Raw;
  int max_iter = 20000;
  double tol = 1e-9;
  bool parallel = true;

  void validate() const;
};

struct LassoResult {
  Vector coef;  // on the original feature scale
  double intercept = 0.0;
  int iterations = 0;
  bool converged = false;
};

// min (1/2n) ||y - b0 - X b||^2 + lambda ||b||_1 by cyclic coordinate descent
// on standardized columns (covariance updates). Constant columns get zero
// coefficients.
LassoResult lasso_cd(const Matrix& x, const Vector& y, double lambda, int max_iter = 20000, double tol = 1e-9);

// Regresses every node on the features of nodes in strictly earlier blocks.
// Edge j -> i is kept when some feature of x_j has |coefficient| above the
// threshold; its weight is the raw-feature coefficient when that one passes,
// otherwise the tanh-feature coefficient.
// Noise scales of the result are residual standard deviations.
WeightedDag prune(const TopoOrder& order, const SampleMatrix& data, const PruneConfig& cfg);

}  // namespace ssts
