#pragma once

#include "ssts/dag.hpp"
#include "ssts/hessian.hpp"
#include "ssts/mechanisms.hpp"
#include "ssts/metrics.hpp"
#include "ssts/prune.hpp"
#include "ssts/score_net.hpp"
#include "ssts/sort.hpp"

#include <cstdint>
#include <memory>
#include <optional>
#include <string>
#include <vector>

namespace ssts {

struct GraphSpec {
  std::string kind = "er";      // er | sf
  int d = 10;
  double expected_edges = -1.0;  // ER; negative selects d
  int attach_m = 2;              // SF
  WeightLaw weights;
  std::vector<double> sigma;     // empty: all ones
};

enum class ProviderKind { Oracle, LinearPopulation, LinearEmpirical, Neural };

std::string to_string(ProviderKind p);
ProviderKind parse_provider_kind(const std::string& s);

struct ExperimentConfig {
  GraphSpec graph;
  MechanismSpec mechanism;
  Index n = 1000;
  ProviderKind provider = ProviderKind::Neural;
  double empirical_ridge = 0.0;
  JacobianMethod jacobian = JacobianMethod::Exact;
  ScoreNetConfig score_net;
  SortConfig sort;
  PruneConfig prune;
  // Choose the prune feature map from the mechanism (raw for linear).
  bool prune_auto_features = true;
  bool prune_enabled = true;
  std::vector<std::uint64_t> seeds{0};
  std::string output;
  std::string format = "csv";  // csv | json-lines
  int jobs = 1;                // seeds run concurrently
  // Optional one-parameter sweep.
  std::string sweep_param;
  std::vector<std::string> sweep_values;

  // Throws ParameterError naming the offending field. With check_sample_size,
  // a neural provider also needs n >= score_net.batch_size.
  void validate(bool check_sample_size = true) const;
};

// JSON config parsing; unknown keys are rejected with their path.
ExperimentConfig parse_experiment_config(const std::string& json_text);
ExperimentConfig load_experiment_config(const std::string& path);
std::string experiment_config_to_json(const ExperimentConfig& cfg);

// Sets one named parameter from text (used by sweeps and CLI overrides).
// Supported: gamma, ridge, lambda_sparse, mechanism, noise, graph, d, n, mode,
// criterion, provider, epochs, expected_edges, micro_batch.
void apply_parameter(ExperimentConfig& cfg, const std::string& name, const std::string& value);

GeneratedDag make_graph(const GraphSpec& spec, std::uint64_t seed);

// Digest of the generator settings (graph, mechanism, n) and the seed.
std::string provenance_tag(const ExperimentConfig& cfg, std::uint64_t seed);

// Chain 0 -> 1 -> ... -> d-1 with noise scales interpolated linearly from
// sigma_root to sigma_leaf and weights drawn from `law` under `seed`.
WeightedDag heteroscedastic_chain(int d, double sigma_root, double sigma_leaf, std::uint64_t seed,
                                  WeightLaw law = {});

std::unique_ptr<HessianProvider> make_provider(const ExperimentConfig& cfg, const WeightedDag& g,
                                               const SampleMatrix& data, std::uint64_t seed);

struct RunRow {
  std::uint64_t seed = 0;
  std::string label;  // sweep value, empty without a sweep
  bool ok = false;
  std::string error;
  MetricsReport metrics;
  int block_iters = 0;
  double t_rep = 0.0, t_disc = 0.0, t_prune = 0.0, t_total = 0.0;
  std::size_t build_bytes = 0;    // analytic SJIM build memory
  std::size_t extract_bytes = 0;  // analytic extraction workspace
  std::size_t model_bytes = 0;    // score-network parameters (neural only)
};

struct Aggregate {
  std::string label;
  int runs = 0;
  int failures = 0;
  // name -> (mean, std) over successful runs
  std::vector<std::pair<std::string, std::pair<double, double>>> stats;
};

struct RunReport {
  std::vector<RunRow> rows;
  std::vector<Aggregate> aggregates;
  bool any_failed() const;
};

// Full pipeline for one seed; never throws (errors land in the row).
RunRow run_seed(const ExperimentConfig& cfg, std::uint64_t seed);

// Every seed (and every sweep value), rows ordered by (sweep value, seed).
RunReport run_experiment(const ExperimentConfig& cfg);

Aggregate aggregate_rows(const std::vector<RunRow>& rows, const std::string& label);

std::string report_csv(const RunReport& r);
std::string report_json_lines(const RunReport& r);

struct CheckResult {
  std::string name;
  double measured = 0.0;
  double expected = 0.0;
  double tolerance = 0.0;
  bool pass = false;
  std::string detail;
};

// Individual checks. Each draws its own graph and data from `seed`.
// Leaf diagonals within 3 standard errors of 1/sigma^2, non-leaves above by
// more than 3 (tanh ER graph, sigma = 1, oracle Hessians).
CheckResult verify_leaf_margin(std::uint64_t seed, int d = 10, Index n = 50000);
// Repeated leaf elimination on a linear population precision against the
// precision of the leaf-deleted graph; measured is the max entrywise residual.
CheckResult verify_linear_schur(std::uint64_t seed, int d = 30);
// Per-sample Schur complement of a diamond's sink against the oracle Hessian
// of the remaining graph; measured is the max paired z-score.
CheckResult verify_marginal_sjim(std::uint64_t seed, Index n = 100000);
// E[Schur(H)] - Schur(E[H]) on a tanh collider against -Cov(grad f_l) / sigma^2.
CheckResult verify_expectation_gap(std::uint64_t seed, Index n = 100000);
CheckResult verify_kendall(std::uint64_t seed, long trials = 100000);
// Heteroscedastic 5-node chain: how often each criterion picks the true leaf.
std::vector<CheckResult> verify_cv2_chain(std::uint64_t first_seed, int seeds = 20, Index n = 10000);

std::vector<CheckResult> run_verify(std::uint64_t seed = 0);

std::string format_check(const CheckResult& c);

}  // namespace ssts
