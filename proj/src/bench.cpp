#include "ssts/bench.hpp"

#include "ssts/io.hpp"
#include "ssts/kernels.hpp"
#include "ssts/rng.hpp"
#include "ssts/sjim.hpp"

#include <json.hpp>
#include <spdlog/spdlog.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>
#include <set>
#include <sstream>

namespace ssts {

using nlohmann::json;

std::string to_string(ProviderKind p) {
  switch (p) {
    case ProviderKind::Oracle: return "oracle";
    case ProviderKind::LinearPopulation: return "linear-pop";
    case ProviderKind::LinearEmpirical: return "linear-emp";
    case ProviderKind::Neural: return "neural";
  }
  return "?";
}

ProviderKind parse_provider_kind(const std::string& s) {
  if (s == "oracle") return ProviderKind::Oracle;
  if (s == "linear-pop") return ProviderKind::LinearPopulation;
  if (s == "linear-emp") return ProviderKind::LinearEmpirical;
  if (s == "neural") return ProviderKind::Neural;
  throw ParameterError("unknown provider '" + s + "' (oracle|linear-pop|linear-emp|neural)");
}

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

std::string join_path(const std::string& path, const std::string& key) {
  return path.empty() ? key : path + "." + key;
}

void check_keys(const json& j, const std::string& path, std::initializer_list<const char*> keys) {
  if (!j.is_object()) throw ParameterError((path.empty() ? "config" : path) + ": expected an object");
  for (auto it = j.begin(); it != j.end(); ++it) {
    const bool known = std::any_of(keys.begin(), keys.end(), [&](const char* k) { return it.key() == k; });
    if (!known) throw ParameterError(join_path(path, it.key()) + ": unknown key");
  }
}

template <class T>
void read(const json& j, const std::string& path, const char* key, T& out) {
  const auto it = j.find(key);
  if (it == j.end()) return;
  try {
    out = it->get<T>();
  } catch (const json::exception&) {
    throw ParameterError(join_path(path, key) + ": wrong type");
  }
}

template <class Parse>
void read_enum(const json& j, const std::string& path, const char* key, Parse&& parse) {
  std::string s;
  const auto it = j.find(key);
  if (it == j.end()) return;
  read(j, path, key, s);
  try {
    parse(s);
  } catch (const ParameterError& e) {
    throw ParameterError(join_path(path, key) + ": " + e.what());
  }
}

double parse_number(const std::string& name, const std::string& value) {
  try {
    std::size_t used = 0;
    const double v = std::stod(value, &used);
    if (used != value.size()) throw std::invalid_argument(value);
    return v;
  } catch (const std::exception&) {
    throw ParameterError(name + ": '" + value + "' is not a number");
  }
}

long parse_integer(const std::string& name, const std::string& value) {
  const double v = parse_number(name, value);
  if (v != std::floor(v) || std::abs(v) > 1e15) throw ParameterError(name + ": '" + value + "' is not an integer");
  return static_cast<long>(v);
}

void parse_graph(const json& j, GraphSpec& g) {
  const std::string p = "graph";
  check_keys(j, p, {"kind", "d", "expected_edges", "attach_m", "weight_low", "weight_high", "sigma"});
  read(j, p, "kind", g.kind);
  read(j, p, "d", g.d);
  read(j, p, "expected_edges", g.expected_edges);
  read(j, p, "attach_m", g.attach_m);
  read(j, p, "weight_low", g.weights.low);
  read(j, p, "weight_high", g.weights.high);
  read(j, p, "sigma", g.sigma);
}

void parse_mechanism(const json& j, MechanismSpec& m) {
  const std::string p = "mechanism";
  check_keys(j, p, {"kind", "tanh_form", "noise", "output_scale", "mnm_slope", "pnl_standardize"});
  read_enum(j, p, "kind", [&](const std::string& s) { m.kind = parse_mechanism_kind(s); });
  read_enum(j, p, "tanh_form", [&](const std::string& s) { m.tanh_form = parse_tanh_form(s); });
  read_enum(j, p, "noise", [&](const std::string& s) { m.noise = parse_noise_family(s); });
  read(j, p, "output_scale", m.output_scale);
  read(j, p, "mnm_slope", m.mnm_slope);
  read(j, p, "pnl_standardize", m.pnl_standardize);
}

void parse_score_net(const json& j, ScoreNetConfig& c) {
  const std::string p = "score_net";
  check_keys(j, p,
             {"hidden_sizes", "activation", "objective", "epochs", "batch_size", "learning_rate", "lr_floor",
              "noise_level", "lambda_sparse", "scale_inputs", "projections"});
  read(j, p, "hidden_sizes", c.hidden_sizes);
  read_enum(j, p, "activation", [&](const std::string& s) { c.activation = parse_activation(s); });
  read_enum(j, p, "objective", [&](const std::string& s) { c.objective = parse_score_objective(s); });
  read(j, p, "epochs", c.epochs);
  read(j, p, "batch_size", c.batch_size);
  read(j, p, "learning_rate", c.learning_rate);
  read(j, p, "lr_floor", c.lr_floor);
  read(j, p, "noise_level", c.noise_level);
  read(j, p, "lambda_sparse", c.lambda_sparse);
  read(j, p, "scale_inputs", c.scale_inputs);
  read(j, p, "projections", c.projections);
}

void parse_sort(const json& j, SortConfig& c) {
  const std::string p = "sort";
  check_keys(j, p,
             {"gamma", "ridge", "criterion", "mode", "micro_batch", "parallel", "exact_cache_bytes",
              "exact_cost_budget", "snapshot_dir"});
  read(j, p, "gamma", c.gamma);
  read(j, p, "ridge", c.ridge);
  read_enum(j, p, "criterion", [&](const std::string& s) { c.criterion = parse_leaf_criterion(s); });
  read_enum(j, p, "mode", [&](const std::string& s) { c.mode = parse_sort_mode(s); });
  read(j, p, "micro_batch", c.stream.micro_batch);
  read(j, p, "parallel", c.stream.parallel);
  read(j, p, "exact_cache_bytes", c.exact_cache_bytes);
  read(j, p, "exact_cost_budget", c.exact_cost_budget);
  read(j, p, "snapshot_dir", c.snapshot_dir);
}

void parse_prune(const json& j, ExperimentConfig& cfg) {
  const std::string p = "prune";
  check_keys(j, p, {"enabled", "penalty_weight", "coef_threshold", "feature_map", "max_iter", "tol"});
  read(j, p, "enabled", cfg.prune_enabled);
  read(j, p, "penalty_weight", cfg.prune.penalty_weight);
  read(j, p, "coef_threshold", cfg.prune.coef_threshold);
  read_enum(j, p, "feature_map", [&](const std::string& s) {
    if (s == "auto") {
      cfg.prune_auto_features = true;
    } else {
      cfg.prune.feature_map = parse_feature_map(s);
      cfg.prune_auto_features = false;
    }
  });
  read(j, p, "max_iter", cfg.prune.max_iter);
  read(j, p, "tol", cfg.prune.tol);
}

JacobianMethod parse_jacobian(const std::string& s) {
  if (s == "exact") return JacobianMethod::Exact;
  if (s == "fd" || s == "finite-difference") return JacobianMethod::FiniteDifference;
  throw ParameterError("unknown jacobian method '" + s + "' (exact|fd)");
}

}  // namespace

void ExperimentConfig::validate(bool check_sample_size) const {
  if (graph.kind != "er" && graph.kind != "sf") throw ParameterError("graph.kind: expected er or sf");
  if (graph.d < 1) throw ParameterError("graph.d: must be >= 1");
  const double pairs = 0.5 * graph.d * (graph.d - 1.0);
  if (graph.kind == "er" && graph.expected_edges > pairs)
    throw ParameterError("graph.expected_edges: exceeds d(d-1)/2");
  if (graph.kind == "sf" && (graph.attach_m < 1 || graph.attach_m >= graph.d))
    throw ParameterError("graph.attach_m: need 1 <= attach_m < d");
  if (!(graph.weights.low > 0.0) || !(graph.weights.high >= graph.weights.low))
    throw ParameterError("graph.weight_low/weight_high: need 0 < low <= high");
  if (!graph.sigma.empty()) {
    if (graph.sigma.size() != static_cast<std::size_t>(graph.d))
      throw ParameterError("graph.sigma: needs exactly d entries");
    for (double s : graph.sigma)
      if (!(s > 0.0) || !std::isfinite(s)) throw ParameterError("graph.sigma: entries must be positive");
  }
  try {
    mechanism.validate(WeightedDag(graph.d, {}));
  } catch (const ParameterError& e) {
    throw ParameterError(std::string("mechanism: ") + e.what());
  }
  if (n < 2) throw ParameterError("n: must be >= 2");
  if (!(empirical_ridge >= 0.0)) throw ParameterError("empirical_ridge: must be >= 0");
  try {
    score_net.validate();
  } catch (const ParameterError& e) {
    throw ParameterError(std::string("score_net: ") + e.what());
  }
  if (check_sample_size && provider == ProviderKind::Neural && score_net.batch_size > n)
    throw ParameterError("score_net.batch_size: exceeds n");
  try {
    sort.validate();
  } catch (const ParameterError& e) {
    throw ParameterError(std::string("sort: ") + e.what());
  }
  if (sort.stream.micro_batch < 1) throw ParameterError("sort.micro_batch: must be >= 1");
  try {
    prune.validate();
  } catch (const ParameterError& e) {
    throw ParameterError(std::string("prune: ") + e.what());
  }
  if (seeds.empty()) throw ParameterError("seeds: must be nonempty");
  if (std::set<std::uint64_t>(seeds.begin(), seeds.end()).size() != seeds.size())
    throw ParameterError("seeds: duplicate entries");
  if (format != "csv" && format != "json-lines") throw ParameterError("format: expected csv or json-lines");
  if (jobs < 1) throw ParameterError("jobs: must be >= 1");
  if (!sweep_param.empty()) {
    if (sweep_values.empty()) throw ParameterError("sweep.values: must be nonempty");
    for (const auto& v : sweep_values) {
      ExperimentConfig probe = *this;
      probe.sweep_param.clear();
      try {
        apply_parameter(probe, sweep_param, v);
        probe.validate(check_sample_size);
      } catch (const ParameterError& e) {
        throw ParameterError("sweep: " + std::string(e.what()));
      }
    }
  }
}

ExperimentConfig parse_experiment_config(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ParameterError(std::string("config: ") + e.what());
  }
  ExperimentConfig cfg;
  check_keys(j, "",
             {"graph", "mechanism", "n", "provider", "empirical_ridge", "jacobian", "score_net", "sort", "prune",
              "seeds", "output", "format", "jobs", "sweep"});
  if (j.contains("graph")) parse_graph(j["graph"], cfg.graph);
  if (j.contains("mechanism")) parse_mechanism(j["mechanism"], cfg.mechanism);
  read(j, "", "n", cfg.n);
  read_enum(j, "", "provider", [&](const std::string& s) { cfg.provider = parse_provider_kind(s); });
  read(j, "", "empirical_ridge", cfg.empirical_ridge);
  read_enum(j, "", "jacobian", [&](const std::string& s) { cfg.jacobian = parse_jacobian(s); });
  if (j.contains("score_net")) parse_score_net(j["score_net"], cfg.score_net);
  if (j.contains("sort")) parse_sort(j["sort"], cfg.sort);
  if (j.contains("prune")) parse_prune(j["prune"], cfg);
  if (j.contains("seeds")) {
    const json& s = j["seeds"];
    if (!s.is_array()) throw ParameterError("seeds: expected an array");
    cfg.seeds.clear();
    for (std::size_t i = 0; i < s.size(); ++i) {
      if (!s[i].is_number_unsigned())
        throw ParameterError("seeds[" + std::to_string(i) + "]: expected a non-negative integer");
      cfg.seeds.push_back(s[i].get<std::uint64_t>());
    }
  }
  read(j, "", "output", cfg.output);
  read(j, "", "format", cfg.format);
  read(j, "", "jobs", cfg.jobs);
  if (j.contains("sweep")) {
    const json& s = j["sweep"];
    check_keys(s, "sweep", {"param", "values"});
    read(s, "sweep", "param", cfg.sweep_param);
    if (s.contains("values")) {
      if (!s["values"].is_array()) throw ParameterError("sweep.values: expected an array");
      for (const json& v : s["values"])
        cfg.sweep_values.push_back(v.is_string() ? v.get<std::string>() : v.dump());
    }
  }
  cfg.validate();
  return cfg;
}

ExperimentConfig load_experiment_config(const std::string& path) { return parse_experiment_config(read_text(path)); }

std::string experiment_config_to_json(const ExperimentConfig& c) {
  json j;
  j["graph"] = {{"kind", c.graph.kind},
                {"d", c.graph.d},
                {"expected_edges", c.graph.expected_edges},
                {"attach_m", c.graph.attach_m},
                {"weight_low", c.graph.weights.low},
                {"weight_high", c.graph.weights.high},
                {"sigma", c.graph.sigma}};
  j["mechanism"] = {{"kind", to_string(c.mechanism.kind)},
                    {"tanh_form", to_string(c.mechanism.tanh_form)},
                    {"noise", to_string(c.mechanism.noise)},
                    {"output_scale", c.mechanism.output_scale},
                    {"mnm_slope", c.mechanism.mnm_slope},
                    {"pnl_standardize", c.mechanism.pnl_standardize}};
  j["n"] = c.n;
  j["provider"] = to_string(c.provider);
  j["empirical_ridge"] = c.empirical_ridge;
  j["jacobian"] = c.jacobian == JacobianMethod::Exact ? "exact" : "fd";
  const ScoreNetConfig& s = c.score_net;
  j["score_net"] = {{"hidden_sizes", s.hidden_sizes},   {"activation", to_string(s.activation)},
                    {"objective", to_string(s.objective)}, {"epochs", s.epochs},
                    {"batch_size", s.batch_size},       {"learning_rate", s.learning_rate},
                    {"lr_floor", s.lr_floor},           {"noise_level", s.noise_level},
                    {"lambda_sparse", s.lambda_sparse}, {"scale_inputs", s.scale_inputs},
                    {"projections", s.projections}};
  j["sort"] = {{"gamma", c.sort.gamma},
               {"ridge", c.sort.ridge},
               {"criterion", to_string(c.sort.criterion)},
               {"mode", to_string(c.sort.mode)},
               {"micro_batch", c.sort.stream.micro_batch},
               {"parallel", c.sort.stream.parallel},
               {"exact_cache_bytes", c.sort.exact_cache_bytes},
               {"exact_cost_budget", c.sort.exact_cost_budget},
               {"snapshot_dir", c.sort.snapshot_dir}};
  j["prune"] = {{"enabled", c.prune_enabled},
                {"penalty_weight", c.prune.penalty_weight},
                {"coef_threshold", c.prune.coef_threshold},
                {"feature_map", c.prune_auto_features ? std::string("auto") : to_string(c.prune.feature_map)},
                {"max_iter", c.prune.max_iter},
                {"tol", c.prune.tol}};
  j["seeds"] = c.seeds;
  j["output"] = c.output;
  j["format"] = c.format;
  j["jobs"] = c.jobs;
  if (!c.sweep_param.empty()) j["sweep"] = {{"param", c.sweep_param}, {"values", c.sweep_values}};
  return j.dump(2);
}

void apply_parameter(ExperimentConfig& cfg, const std::string& name, const std::string& value) {
  if (name == "gamma") {
    cfg.sort.gamma = parse_number(name, value);
  } else if (name == "ridge") {
    cfg.sort.ridge = parse_number(name, value);
  } else if (name == "lambda_sparse") {
    cfg.score_net.lambda_sparse = parse_number(name, value);
  } else if (name == "mechanism") {
    cfg.mechanism.kind = parse_mechanism_kind(value);
  } else if (name == "noise") {
    cfg.mechanism.noise = parse_noise_family(value);
  } else if (name == "graph") {
    if (value != "er" && value != "sf") throw ParameterError("graph: expected er or sf");
    cfg.graph.kind = value;
  } else if (name == "d") {
    cfg.graph.d = static_cast<int>(parse_integer(name, value));
  } else if (name == "n") {
    cfg.n = parse_integer(name, value);
  } else if (name == "mode") {
    cfg.sort.mode = parse_sort_mode(value);
  } else if (name == "criterion") {
    cfg.sort.criterion = parse_leaf_criterion(value);
  } else if (name == "provider") {
    cfg.provider = parse_provider_kind(value);
  } else if (name == "epochs") {
    cfg.score_net.epochs = static_cast<int>(parse_integer(name, value));
  } else if (name == "expected_edges") {
    cfg.graph.expected_edges = parse_number(name, value);
  } else if (name == "micro_batch") {
    cfg.sort.stream.micro_batch = parse_integer(name, value);
  } else {
    throw ParameterError("unknown parameter '" + name + "'");
  }
}

GeneratedDag make_graph(const GraphSpec& spec, std::uint64_t seed) {
  GeneratedDag gd;
  if (spec.kind == "er") {
    const double pairs = 0.5 * spec.d * (spec.d - 1.0);
    const double edges = spec.expected_edges < 0.0 ? std::min<double>(spec.d, pairs) : spec.expected_edges;
    gd = generate_er(spec.d, edges, seed, spec.weights);
  } else if (spec.kind == "sf") {
    gd = generate_sf(spec.d, spec.attach_m, seed, spec.weights);
  } else {
    throw ParameterError("graph.kind: expected er or sf");
  }
  if (!spec.sigma.empty()) gd.dag = gd.dag.with_sigma(spec.sigma);
  return gd;
}

std::string provenance_tag(const ExperimentConfig& cfg, std::uint64_t seed) {
  const json full = json::parse(experiment_config_to_json(cfg));
  json gen;
  gen["graph"] = full["graph"];
  gen["mechanism"] = full["mechanism"];
  gen["n"] = full["n"];
  gen["seed"] = seed;
  return fnv1a_hex(gen.dump());
}

WeightedDag heteroscedastic_chain(int d, double sigma_root, double sigma_leaf, std::uint64_t seed, WeightLaw law) {
  if (d < 2) throw ParameterError("heteroscedastic_chain: d must be >= 2");
  Engine rng = make_engine(seed, kTagWeights);
  std::uniform_real_distribution<double> mag(law.low, law.high);
  std::bernoulli_distribution sign(0.5);
  std::vector<Edge> edges;
  std::vector<double> sigma(static_cast<std::size_t>(d));
  for (int i = 0; i < d; ++i) {
    sigma[static_cast<std::size_t>(i)] = sigma_root + (sigma_leaf - sigma_root) * i / (d - 1.0);
    if (i > 0) {
      const double w = mag(rng);
      edges.push_back({i - 1, i, sign(rng) ? w : -w});
    }
  }
  return WeightedDag(d, std::move(edges), std::move(sigma));
}

std::unique_ptr<HessianProvider> make_provider(const ExperimentConfig& cfg, const WeightedDag& g,
                                               const SampleMatrix& data, std::uint64_t seed) {
  switch (cfg.provider) {
    case ProviderKind::Oracle: return std::make_unique<OracleProvider>(g, cfg.mechanism);
    case ProviderKind::LinearPopulation:
      if (cfg.mechanism.kind != MechanismKind::Linear)
        throw UnsupportedError("linear-pop provider requires the linear mechanism");
      return std::make_unique<LinearPopulationProvider>(g);
    case ProviderKind::LinearEmpirical: return std::make_unique<LinearEmpiricalProvider>(data, cfg.empirical_ridge);
    case ProviderKind::Neural: {
      auto model = std::make_shared<const ScoreModel>(train_score_net(data, cfg.score_net, seed));
      return std::make_unique<NeuralProvider>(std::move(model), cfg.jacobian);
    }
  }
  throw ParameterError("unknown provider");
}

RunRow run_seed(const ExperimentConfig& cfg, std::uint64_t seed) {
  RunRow row;
  row.seed = seed;
  const auto t0 = Clock::now();
  try {
    const GeneratedDag gd = make_graph(cfg.graph, seed);
    SampleMatrix data = sample(gd.dag, cfg.mechanism, cfg.n, seed);
    data.provenance = provenance_tag(cfg, seed);

    const auto t_train = Clock::now();
    const auto provider = make_provider(cfg, gd.dag, data, seed);
    const double train_s = seconds_since(t_train);

    const SortTrace tr = run_sort(*provider, data, cfg.sort);
    row.t_rep = train_s + tr.t_rep;
    row.t_disc = tr.t_disc;
    row.block_iters = tr.block_iters;
    row.build_bytes = provider->build_memory(cfg.sort.stream).total();
    row.extract_bytes = tr.workspace_bytes;
    if (const auto* np = dynamic_cast<const NeuralProvider*>(provider.get())) row.model_bytes = np->model_bytes();

    std::optional<WeightedDag> est;
    if (cfg.prune_enabled) {
      PruneConfig pc = cfg.prune;
      if (cfg.prune_auto_features)
        pc.feature_map = cfg.mechanism.kind == MechanismKind::Linear ? FeatureMap::Raw : FeatureMap::RawTanh;
      const auto tp = Clock::now();
      est = prune(tr.order, data, pc);
      row.t_prune = seconds_since(tp);
    }
    row.metrics = evaluate(gd.dag, tr.order, est ? &*est : nullptr, tr.block_iters);
    row.ok = true;
  } catch (const std::exception& e) {
    row.error = e.what();
    spdlog::warn("seed {} failed: {}", seed, e.what());
  }
  row.t_total = seconds_since(t0);
  return row;
}

bool RunReport::any_failed() const {
  return std::any_of(rows.begin(), rows.end(), [](const RunRow& r) { return !r.ok; });
}

namespace {

bool has_prune_metrics(const RunRow& r) { return r.metrics.extras.count("kept_edges") > 0; }

double extra(const RunRow& r, const char* key) {
  const auto it = r.metrics.extras.find(key);
  return it == r.metrics.extras.end() ? 0.0 : it->second;
}

}  // namespace

Aggregate aggregate_rows(const std::vector<RunRow>& rows, const std::string& label) {
  Aggregate a;
  a.label = label;
  a.runs = static_cast<int>(rows.size());
  std::vector<const RunRow*> ok;
  for (const RunRow& r : rows) {
    if (r.ok)
      ok.push_back(&r);
    else
      ++a.failures;
  }
  if (ok.empty()) return a;
  const bool pruned = std::all_of(ok.begin(), ok.end(), [](const RunRow* r) { return has_prune_metrics(*r); });
  auto add = [&](const char* name, auto&& get) {
    double mean = 0.0;
    for (const RunRow* r : ok) mean += get(*r);
    mean /= static_cast<double>(ok.size());
    double ss = 0.0;
    for (const RunRow* r : ok) ss += (get(*r) - mean) * (get(*r) - mean);
    const double sd = ok.size() > 1 ? std::sqrt(ss / static_cast<double>(ok.size() - 1)) : 0.0;
    a.stats.push_back({name, {mean, sd}});
  };
  add("ev", [](const RunRow& r) { return static_cast<double>(r.metrics.ev); });
  if (pruned) {
    add("shd", [](const RunRow& r) { return static_cast<double>(r.metrics.shd); });
    add("tpr", [](const RunRow& r) { return r.metrics.tpr; });
    add("fdr", [](const RunRow& r) { return extra(r, "fdr"); });
  }
  add("block_iters", [](const RunRow& r) { return static_cast<double>(r.block_iters); });
  add("t_rep", [](const RunRow& r) { return r.t_rep; });
  add("t_disc", [](const RunRow& r) { return r.t_disc; });
  add("t_prune", [](const RunRow& r) { return r.t_prune; });
  add("t_total", [](const RunRow& r) { return r.t_total; });
  add("build_bytes", [](const RunRow& r) { return static_cast<double>(r.build_bytes); });
  add("extract_bytes", [](const RunRow& r) { return static_cast<double>(r.extract_bytes); });
  return a;
}

RunReport run_experiment(const ExperimentConfig& cfg) {
  cfg.validate();
  std::vector<std::pair<std::string, ExperimentConfig>> arms;
  if (cfg.sweep_param.empty()) {
    arms.emplace_back("", cfg);
  } else {
    for (const auto& v : cfg.sweep_values) {
      ExperimentConfig c = cfg;
      apply_parameter(c, cfg.sweep_param, v);
      arms.emplace_back(v, std::move(c));
    }
  }
  std::vector<std::uint64_t> seeds = cfg.seeds;
  std::sort(seeds.begin(), seeds.end());

  RunReport report;
  for (const auto& [label, c] : arms) {
    std::vector<RunRow> rows(seeds.size());
    const int n = static_cast<int>(seeds.size());
#pragma omp parallel for schedule(dynamic) num_threads(cfg.jobs) if (cfg.jobs > 1)
    for (int i = 0; i < n; ++i) rows[static_cast<std::size_t>(i)] = run_seed(c, seeds[static_cast<std::size_t>(i)]);
    for (auto& r : rows) r.label = label;
    report.aggregates.push_back(aggregate_rows(rows, label));
    report.rows.insert(report.rows.end(), rows.begin(), rows.end());
  }
  return report;
}

namespace {

std::string csv_quote(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char ch : s) {
    if (ch == '"') out += '"';
    out += ch;
  }
  return out + "\"";
}

const char* kCsvHeader =
    "kind,label,seed,ok,ev,shd,tpr,fdr,kept_edges,block_iters,t_rep,t_disc,t_prune,t_total,build_bytes,"
    "extract_bytes,model_bytes,error\n";

}  // namespace

std::string report_csv(const RunReport& r) {
  std::ostringstream os;
  os << kCsvHeader;
  for (const RunRow& row : r.rows) {
    const bool pm = row.ok && has_prune_metrics(row);
    os << "run," << csv_quote(row.label) << ',' << row.seed << ',' << (row.ok ? 1 : 0) << ',';
    if (row.ok)
      os << row.metrics.ev;
    os << ',';
    if (pm) os << row.metrics.shd << ',' << format_double(row.metrics.tpr) << ',' << format_double(extra(row, "fdr")) << ','
               << extra(row, "kept_edges");
    else
      os << ",,,";
    os << ',' << (row.ok ? std::to_string(row.block_iters) : std::string()) << ',' << format_double(row.t_rep) << ','
       << format_double(row.t_disc) << ',' << format_double(row.t_prune) << ',' << format_double(row.t_total) << ','
       << row.build_bytes << ',' << row.extract_bytes << ',' << row.model_bytes << ',' << csv_quote(row.error)
       << '\n';
  }
  for (const Aggregate& a : r.aggregates) {
    for (int which = 0; which < 2; ++which) {
      std::map<std::string, double> v;
      for (const auto& [name, ms] : a.stats) v[name] = which == 0 ? ms.first : ms.second;
      auto cell = [&](const char* k) { return v.count(k) ? format_double(v[k]) : std::string(); };
      os << (which == 0 ? "mean," : "std,") << csv_quote(a.label) << ",," << (a.runs - a.failures) << ','
         << cell("ev") << ',' << cell("shd") << ',' << cell("tpr") << ',' << cell("fdr") << ",," << cell("block_iters")
         << ',' << cell("t_rep") << ',' << cell("t_disc") << ',' << cell("t_prune") << ',' << cell("t_total") << ','
         << cell("build_bytes") << ',' << cell("extract_bytes") << ",,"
         << (a.failures ? std::to_string(a.failures) + " failed" : std::string()) << '\n';
    }
  }
  return os.str();
}

std::string report_json_lines(const RunReport& r) {
  std::ostringstream os;
  for (const RunRow& row : r.rows) {
    json j;
    j["kind"] = "run";
    j["label"] = row.label;
    j["seed"] = row.seed;
    j["ok"] = row.ok;
    if (row.ok) {
      j["ev"] = row.metrics.ev;
      if (has_prune_metrics(row)) {
        j["shd"] = row.metrics.shd;
        j["tpr"] = row.metrics.tpr;
        j["fdr"] = extra(row, "fdr");
        j["kept_edges"] = extra(row, "kept_edges");
      }
      j["block_iters"] = row.block_iters;
    } else {
      j["error"] = row.error;
    }
    j["t_rep"] = row.t_rep;
    j["t_disc"] = row.t_disc;
    j["t_prune"] = row.t_prune;
    j["t_total"] = row.t_total;
    j["build_bytes"] = row.build_bytes;
    j["extract_bytes"] = row.extract_bytes;
    j["model_bytes"] = row.model_bytes;
    os << j.dump() << '\n';
  }
  for (const Aggregate& a : r.aggregates) {
    json j;
    j["kind"] = "aggregate";
    j["label"] = a.label;
    j["runs"] = a.runs;
    j["failures"] = a.failures;
    for (const auto& [name, ms] : a.stats) j[name] = {{"mean", ms.first}, {"std", ms.second}};
    os << j.dump() << '\n';
  }
  return os.str();
}

// ---------------------------------------------------------------------------
// Verification suite

namespace {

MechanismSpec tanh_spec() {
  MechanismSpec m;
  m.kind = MechanismKind::TanhAnm;
  return m;
}

// Draws n rows and evaluates fn(row_index, x) in parallel.
template <class Fn>
void for_each_row(const SampleMatrix& data, Fn&& fn) {
  const Index n = data.n();
#pragma omp parallel for schedule(static)
  for (Index r = 0; r < n; ++r) fn(r, Vector(data.data.row(r).transpose()));
}

}  // namespace

CheckResult verify_leaf_margin(std::uint64_t seed, int d, Index n) {
  const GeneratedDag gd = generate_er(d, d, seed);
  const MechanismSpec spec = tanh_spec();
  const SampleMatrix data = sample(gd.dag, spec, n, seed);
  Matrix diag(n, d);
  for_each_row(data, [&](Index r, const Vector& x) { diag.row(r) = oracle_hessian(gd.dag, spec, x).diagonal().transpose(); });
  const Vector mean = diag.colwise().mean().transpose();
  const Vector sd = ((diag.rowwise() - mean.transpose()).colwise().squaredNorm() / static_cast<double>(n - 1))
                        .cwiseSqrt()
                        .transpose();
  int fails = 0;
  double leaf_z = 0.0, nonleaf_z = std::numeric_limits<double>::infinity();
  for (int i = 0; i < d; ++i) {
    const double target = 1.0 / (gd.dag.sigma(i) * gd.dag.sigma(i));
    const double se = std::max(sd[i] / std::sqrt(static_cast<double>(n)), 1e-300);
    const double z = (mean[i] - target) / se;
    if (gd.dag.is_leaf(i)) {
      const bool exact = std::abs(mean[i] - target) <= 1e-12 * target;
      leaf_z = std::max(leaf_z, exact ? 0.0 : std::abs(z));
      if (!(exact || std::abs(z) <= 3.0)) ++fails;
    } else {
      nonleaf_z = std::min(nonleaf_z, z);
      if (!(z > 3.0)) ++fails;
    }
  }
  CheckResult c;
  c.name = "leaf_margin";
  c.measured = fails;
  c.expected = 0;
  c.tolerance = 0;
  c.pass = fails == 0;
  std::ostringstream os;
  os << "d=" << d << " n=" << n << " max leaf |z|=" << format_double(leaf_z)
     << " min non-leaf z=" << format_double(nonleaf_z) << " (threshold 3)";
  c.detail = os.str();
  return c;
}

CheckResult verify_linear_schur(std::uint64_t seed, int d) {
  const GeneratedDag gd = generate_er(d, d, seed);
  SjimState state = make_sjim(linear_population_precision(gd.dag), 0.0);
  WeightedDag cur = gd.dag;
  std::vector<int> orig(static_cast<std::size_t>(d));
  std::iota(orig.begin(), orig.end(), 0);
  double worst = 0.0;
  while (cur.d() > 1) {
    int leaf = 0;
    while (!cur.is_leaf(leaf)) ++leaf;
    schur_eliminate_inplace(state, {orig[static_cast<std::size_t>(leaf)]}, false);
    std::vector<int> kept;
    cur = cur.remove_nodes({leaf}, &kept);
    std::vector<int> next;
    for (int k : kept) next.push_back(orig[static_cast<std::size_t>(k)]);
    orig = std::move(next);
    const Matrix expect = linear_population_precision(cur);
    worst = std::max(worst, (state.active_matrix() - expect).cwiseAbs().maxCoeff());
  }
  CheckResult c;
  c.name = "linear_schur";
  c.measured = worst;
  c.expected = 0.0;
  c.tolerance = 1e-10;
  c.pass = worst <= 1e-10;
  c.detail = "d=" + std::to_string(d) + ", leaves removed one at a time";
  return c;
}

CheckResult verify_marginal_sjim(std::uint64_t seed, Index n) {
  Engine rng = make_engine(seed, kTagWeights, 99);
  std::uniform_real_distribution<double> mag(0.5, 2.0);
  auto w = [&] { return mag(rng); };
  const WeightedDag g(4, {{0, 1, w()}, {0, 2, w()}, {1, 3, w()}, {2, 3, -w()}});
  const WeightedDag gm = g.remove_nodes({3});
  const MechanismSpec spec = tanh_spec();
  const SampleMatrix data = sample(g, spec, n, seed);
  // Per-sample differences Schur(H(x)) - H_marginal(x_S), stored as rows.
  Matrix diff(n, 9);
  for_each_row(data, [&](Index r, const Vector& x) {
    const Matrix h = oracle_hessian(g, spec, x);
    const Matrix s = h.topLeftCorner(3, 3) - h.topRightCorner(3, 1) * h.bottomLeftCorner(1, 3) / h(3, 3);
    const Matrix hm = oracle_hessian(gm, spec, x.head(3));
    const Matrix dd = s - hm;
    diff.row(r) = Eigen::Map<const Eigen::RowVectorXd>(dd.data(), 9);
  });
  const Eigen::RowVectorXd mean = diff.colwise().mean();
  const Eigen::RowVectorXd sd =
      ((diff.rowwise() - mean).colwise().squaredNorm() / static_cast<double>(n - 1)).cwiseSqrt();
  double worst = 0.0;
  for (int k = 0; k < 9; ++k) {
    const double se = sd[k] / std::sqrt(static_cast<double>(n));
    if (se < 1e-14) {
      if (std::abs(mean[k]) > 1e-12) worst = std::numeric_limits<double>::infinity();
      continue;
    }
    worst = std::max(worst, std::abs(mean[k]) / se);
  }
  CheckResult c;
  c.name = "marginal_sjim";
  c.measured = worst;
  c.expected = 0.0;
  c.tolerance = 5.0;
  c.pass = worst <= 5.0;
  c.detail = "diamond graph, sink eliminated, n=" + std::to_string(n) + "; measured = max |mean diff| / SE";
  return c;
}

CheckResult verify_expectation_gap(std::uint64_t seed, Index n) {
  Engine rng = make_engine(seed, kTagWeights, 98);
  std::uniform_real_distribution<double> mag(0.5, 2.0);
  const double w0 = mag(rng), w1 = mag(rng);
  const WeightedDag g(3, {{0, 2, w0}, {1, 2, -w1}});
  const MechanismSpec spec = tanh_spec();
  const SampleMatrix data = sample(g, spec, n, seed);
  const double s2 = g.sigma(2) * g.sigma(2);

  Matrix hs(n, 9), schur(n, 4), grad(n, 2);
  for_each_row(data, [&](Index r, const Vector& x) {
    const Matrix h = oracle_hessian(g, spec, x);
    hs.row(r) = Eigen::Map<const Eigen::RowVectorXd>(h.data(), 9);
    const Matrix s = h.topLeftCorner(2, 2) - h.topRightCorner(2, 1) * h.bottomLeftCorner(1, 2) / h(2, 2);
    schur.row(r) = Eigen::Map<const Eigen::RowVectorXd>(s.data(), 4);
    grad.row(r) = mech_grad(spec, g, 2, x).head(2).transpose();
  });
  const Eigen::RowVectorXd hm = hs.colwise().mean();
  const Matrix mean_h = Eigen::Map<const Matrix>(hm.data(), 3, 3);
  const Eigen::RowVectorXd sm = schur.colwise().mean();
  const Matrix mean_schur = Eigen::Map<const Matrix>(sm.data(), 2, 2);
  const Matrix schur_mean =
      mean_h.topLeftCorner(2, 2) - mean_h.topRightCorner(2, 1) * mean_h.bottomLeftCorner(1, 2) / mean_h(2, 2);
  const Matrix measured = mean_schur - schur_mean;

  const Eigen::RowVectorXd gmean = grad.colwise().mean();
  const Matrix gc = grad.rowwise() - gmean;
  const Matrix formula = -(gc.transpose() * gc) / static_cast<double>(n) / s2;
  double worst = 0.0, worst_ratio = 0.0, min_se = std::numeric_limits<double>::infinity();
  for (int a = 0; a < 2; ++a)
    for (int b = 0; b < 2; ++b) {
      const Vector prod = gc.col(a).cwiseProduct(gc.col(b)) / s2;
      const double pm = prod.mean();
      const double se = std::sqrt((prod.array() - pm).square().sum() / static_cast<double>(n - 1)) /
                        std::sqrt(static_cast<double>(n));
      const double diff = std::abs(measured(a, b) - formula(a, b));
      worst = std::max(worst, diff);
      min_se = std::min(min_se, se);
      worst_ratio = std::max(worst_ratio, diff / std::max(se, 1e-300));
    }
  CheckResult c;
  c.name = "expectation_gap";
  c.measured = worst;
  c.expected = 0.0;
  c.tolerance = 5.0 * min_se;
  c.pass = worst_ratio <= 5.0;
  c.detail = "tanh collider, n=" + std::to_string(n) + "; max |gap - formula| against 5 MC standard errors";
  return c;
}

CheckResult verify_kendall(std::uint64_t seed, long trials) {
  const std::pair<int, int> cases[] = {{10, 2}, {10, 10}, {50, 25}};
  double worst = 0.0;
  std::ostringstream os;
  for (const auto& [d, w] : cases) {
    const double e = expected_kendall(d, w);
    const double mc = kendall_mc(d, w, trials, seed);
    worst = std::max(worst, std::abs(e - mc));
    os << "(" << d << "," << w << ") formula=" << format_double(e) << " mc=" << format_double(mc) << "; ";
  }
  CheckResult c;
  c.name = "kendall";
  c.measured = worst;
  c.expected = 0.0;
  c.tolerance = 4.0 / std::sqrt(static_cast<double>(trials));
  c.pass = worst <= c.tolerance;
  c.detail = os.str();
  return c;
}

std::vector<CheckResult> verify_cv2_chain(std::uint64_t first_seed, int seeds, Index n) {
  int cv2_right = 0, diag_wrong = 0;
  for (int k = 0; k < seeds; ++k) {
    const std::uint64_t seed = first_seed + static_cast<std::uint64_t>(k);
    const WeightedDag g = heteroscedastic_chain(5, 5.0, 0.2, seed);
    const MechanismSpec spec = tanh_spec();
    const SampleMatrix data = sample(g, spec, n, seed);
    const OracleProvider prov(g, spec);
    const auto cv2 = leaf_criterion_cv2(prov, data, {0, 1, 2, 3, 4});
    const auto cv2_min = std::min_element(cv2.begin(), cv2.end(), [](const DiagEntry& a, const DiagEntry& b) {
      return a.value < b.value;
    });
    if (cv2_min->node == 4) ++cv2_right;
    const SjimState st = build_sjim(prov, data);
    Index arg = 0;
    st.matrix.diagonal().minCoeff(&arg);
    if (arg != 4) ++diag_wrong;
  }
  const double need_cv2 = std::ceil(0.95 * seeds);
  const double need_diag = std::ceil(0.75 * seeds);
  CheckResult a;
  a.name = "cv2_selects_leaf";
  a.measured = cv2_right;
  a.expected = need_cv2;
  a.tolerance = 0;
  a.pass = cv2_right >= need_cv2;
  a.detail = "seeds=" + std::to_string(seeds) + ", pass when measured >= expected";
  CheckResult b;
  b.name = "diag_selects_nonleaf";
  b.measured = diag_wrong;
  b.expected = need_diag;
  b.tolerance = 0;
  b.pass = diag_wrong >= need_diag;
  b.detail = "seeds=" + std::to_string(seeds) + ", pass when measured >= expected";
  return {a, b};
}

std::vector<CheckResult> run_verify(std::uint64_t seed) {
  std::vector<CheckResult> out;
  auto guarded = [&](const char* name, auto&& fn) {
    try {
      fn();
    } catch (const std::exception& e) {
      CheckResult c;
      c.name = name;
      c.detail = std::string("error: ") + e.what();
      out.push_back(c);
    }
  };
  guarded("leaf_margin", [&] { out.push_back(verify_leaf_margin(seed)); });
  guarded("linear_schur", [&] { out.push_back(verify_linear_schur(seed)); });
  guarded("marginal_sjim", [&] { out.push_back(verify_marginal_sjim(seed)); });
  guarded("expectation_gap", [&] { out.push_back(verify_expectation_gap(seed)); });
  guarded("kendall", [&] { out.push_back(verify_kendall(seed)); });
  guarded("cv2_chain", [&] {
    for (auto& c : verify_cv2_chain(seed)) out.push_back(c);
  });
  return out;
}

std::string format_check(const CheckResult& c) {
  std::ostringstream os;
  os << (c.pass ? "PASS " : "FAIL ") << c.name << ": measured=" << format_double(c.measured)
     << " expected=" << format_double(c.expected) << " tolerance=" << format_double(c.tolerance);
  if (!c.detail.empty()) os << "  [" << c.detail << "]";
  return os.str();
}

}  // namespace ssts
