#include "ssts/bench.hpp"
#include "ssts/io.hpp"

#include <CLI11.hpp>
#include <spdlog/spdlog.h>

#include <filesystem>
#include <iostream>
#include <optional>
#include <sstream>

namespace fs = std::filesystem;
using namespace ssts;

namespace {

struct Overrides {
  std::string config;
  std::string seed_list;
  std::string d, n, gamma, ridge, lambda_sparse, provider, mode, criterion, mechanism, graph, epochs;
  std::string out;
  std::string format;
  int jobs = 0;
  std::string sweep;
};

std::vector<std::uint64_t> parse_seed_list(const std::string& s) {
  // "0,1,2" or a range "0-4"
  std::vector<std::uint64_t> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (item.empty()) continue;
    try {
      const auto dash = item.find('-');
      if (dash != std::string::npos && dash > 0) {
        const auto lo = std::stoull(item.substr(0, dash));
        const auto hi = std::stoull(item.substr(dash + 1));
        if (hi < lo) throw std::invalid_argument(item);
        for (auto v = lo; v <= hi; ++v) out.push_back(v);
      } else {
        std::size_t used = 0;
        out.push_back(std::stoull(item, &used));
        if (used != item.size()) throw std::invalid_argument(item);
      }
    } catch (const std::exception&) {
      throw ParameterError("--seed-list: cannot parse '" + item + "'");
    }
  }
  if (out.empty()) throw ParameterError("--seed-list: no seeds given");
  return out;
}

// Only bench runs the configured n through the score network.
ExperimentConfig resolve(const Overrides& o, bool bench = false) {
  ExperimentConfig cfg = o.config.empty() ? ExperimentConfig{} : load_experiment_config(o.config);
  const std::pair<const char*, const std::string*> named[] = {
      {"d", &o.d},           {"n", &o.n},
      {"gamma", &o.gamma},   {"ridge", &o.ridge},
      {"lambda_sparse", &o.lambda_sparse}, {"provider", &o.provider},
      {"mode", &o.mode},     {"criterion", &o.criterion},
      {"mechanism", &o.mechanism}, {"graph", &o.graph},
      {"epochs", &o.epochs}};
  for (const auto& [name, value] : named)
    if (!value->empty()) apply_parameter(cfg, name, *value);
  if (!o.seed_list.empty()) cfg.seeds = parse_seed_list(o.seed_list);
  if (!o.out.empty()) cfg.output = o.out;
  if (!o.format.empty()) cfg.format = o.format;
  if (o.jobs > 0) cfg.jobs = o.jobs;
  if (!o.sweep.empty()) {
    const auto eq = o.sweep.find('=');
    if (eq == std::string::npos) throw ParameterError("--sweep: expected name=v1,v2,...");
    cfg.sweep_param = o.sweep.substr(0, eq);
    cfg.sweep_values.clear();
    std::stringstream ss(o.sweep.substr(eq + 1));
    std::string v;
    while (std::getline(ss, v, ',')) cfg.sweep_values.push_back(v);
  }
  cfg.validate(bench);
  return cfg;
}

void add_common(CLI::App* app, Overrides& o) {
  const ExperimentConfig def;
  app->add_option("--config", o.config, "JSON experiment config; flags below override it");
  app->add_option("--seed-list", o.seed_list, "Seeds, e.g. 0,1,2 or 0-4 (default: 0)");
  app->add_option("--d", o.d, "Number of variables (default: " + std::to_string(def.graph.d) + ")");
  app->add_option("--n", o.n, "Number of samples (default: " + std::to_string(def.n) + ")");
  app->add_option("--graph", o.graph, "Random graph family er|sf (default: er, expected edges d; sf attach 2)");
  app->add_option("--mechanism", o.mechanism, "linear|tanh|mnm|pnl (default: tanh)");
  app->add_option("--gamma", o.gamma, "Block tolerance (default: " + format_double(def.sort.gamma) + ")");
  app->add_option("--ridge", o.ridge, "Pivot ridge (default: " + format_double(def.sort.ridge) + ")");
  app->add_option("--lambda-sparse", o.lambda_sparse,
                  "Group-lasso weight on input columns (default: 0 for d < 50, else 1e-5*sqrt(d))");
  app->add_option("--provider", o.provider, "oracle|linear-pop|linear-emp|neural (default: neural)");
  app->add_option("--mode", o.mode, "expected|exact|patched (default: expected)");
  app->add_option("--criterion", o.criterion, "diag|cv2 (default: diag; cv2 needs --mode exact)");
  app->add_option("--epochs", o.epochs,
                  "Score network epochs (default: " + std::to_string(def.score_net.epochs) + ")");
}

int cmd_generate(const Overrides& o) {
  const ExperimentConfig cfg = resolve(o);
  const std::uint64_t seed = cfg.seeds.front();
  const std::string dir = cfg.output.empty() ? "." : cfg.output;
  fs::create_directories(dir);
  const GeneratedDag gd = make_graph(cfg.graph, seed);
  SampleMatrix data = sample(gd.dag, cfg.mechanism, cfg.n, seed);
  data.provenance = provenance_tag(cfg, seed);
  write_graph_json((fs::path(dir) / "graph.json").string(), gd.dag);
  write_dataset_csv((fs::path(dir) / "data.csv").string(), data);
  std::cout << "wrote " << (fs::path(dir) / "graph.json").string() << " and " << (fs::path(dir) / "data.csv").string()
            << " (n=" << data.n() << ", d=" << data.d() << ", edges=" << gd.dag.edge_count() << ")\n";
  std::cout << "provenance " << data.provenance << "\n";
  return 0;
}

int cmd_extract(const Overrides& o, const std::string& data_path, const std::string& graph_path,
                const std::string& model_path) {
  ExperimentConfig cfg = resolve(o);
  const SampleMatrix data = read_dataset_csv(data_path);
  std::optional<WeightedDag> truth;
  if (!graph_path.empty()) truth = read_graph_json(graph_path);
  if (truth && truth->d() != data.d()) throw InputError("graph and dataset dimensions differ");

  std::unique_ptr<HessianProvider> provider;
  if (!model_path.empty()) {
    auto model = std::make_shared<const ScoreModel>(ScoreModel::load(model_path));
    provider = std::make_unique<NeuralProvider>(std::move(model), cfg.jacobian);
  } else {
    if (!truth && (cfg.provider == ProviderKind::Oracle || cfg.provider == ProviderKind::LinearPopulation))
      throw ParameterError("--provider " + to_string(cfg.provider) + " needs --truth");
    provider = make_provider(cfg, truth ? *truth : WeightedDag(static_cast<int>(data.d()), {}), data,
                             cfg.seeds.front());
  }
  SortTrace tr = run_sort(*provider, data, cfg.sort);
  const std::string out = cfg.output.empty() ? "trace.json" : cfg.output;
  write_trace_json(out, tr);
  std::cout << "blocks=" << tr.block_iters << " t_rep=" << format_double(tr.t_rep)
            << " t_disc=" << format_double(tr.t_disc);
  if (truth) std::cout << " ev=" << edge_violations(*truth, tr.order);
  std::cout << "\nwrote " << out << "\n";
  return 0;
}

int cmd_prune(const std::string& data_path, const std::string& order_path, const std::string& graph_path,
              const std::string& out, PruneConfig pc) {
  const SampleMatrix data = read_dataset_csv(data_path);
  const SortTrace tr = read_trace_json(order_path);
  const WeightedDag est = prune(tr.order, data, pc);
  write_edges_csv(out, est);
  std::cout << "kept " << est.edge_count() << " edges, wrote " << out << "\n";
  if (!graph_path.empty()) {
    const WeightedDag truth = read_graph_json(graph_path);
    std::cout << metrics_to_json(evaluate(truth, tr.order, &est, tr.block_iters)) << "\n";
  }
  return 0;
}

int cmd_bench(const Overrides& o) {
  const ExperimentConfig cfg = resolve(o, true);
  const RunReport rep = run_experiment(cfg);
  const std::string text = cfg.format == "csv" ? report_csv(rep) : report_json_lines(rep);
  if (cfg.output.empty())
    std::cout << text;
  else
    write_text(cfg.output, text);
  for (const Aggregate& a : rep.aggregates) {
    std::cerr << (a.label.empty() ? std::string("all") : cfg.sweep_param + "=" + a.label) << ": runs=" << a.runs
              << " failures=" << a.failures;
    for (const auto& [name, ms] : a.stats)
      if (name == "ev" || name == "shd" || name == "tpr" || name == "block_iters")
        std::cerr << " " << name << "=" << format_double(ms.first) << "+-" << format_double(ms.second);
    std::cerr << "\n";
  }
  return rep.any_failed() ? 1 : 0;
}

int cmd_verify(std::uint64_t seed) {
  bool ok = true;
  for (const CheckResult& c : run_verify(seed)) {
    std::cout << format_check(c) << "\n";
    ok = ok && c.pass;
  }
  return ok ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Topological ordering from score Jacobians by iterated Schur complements"};
  app.require_subcommand(1);
  std::string log_level = "warn";
  app.add_option("--log-level", log_level, "trace|debug|info|warn|error (default: warn)");

  Overrides o;
  auto* gen = app.add_subcommand("generate", "Sample a random graph and dataset (graph.json, data.csv)");
  add_common(gen, o);
  gen->add_option("--out", o.out, "Output directory (default: .)");

  std::string data_path, graph_path, model_path, order_path;
  auto* ext = app.add_subcommand("extract", "Extract a topological order from a dataset");
  add_common(ext, o);
  ext->add_option("--data", data_path, "Dataset CSV")->required();
  ext->add_option("--truth", graph_path, "True graph JSON (needed by oracle and linear-pop; enables EV)");
  ext->add_option("--model", model_path, "Saved score model to use instead of training");
  ext->add_option("--out", o.out, "Trace JSON (default: trace.json)");

  PruneConfig pc;
  std::string feature_map = "raw";
  std::string prune_out = "edges.csv";
  auto* pr = app.add_subcommand("prune", "Prune a fully connected order with lasso regressions");
  pr->add_option("--data", data_path, "Dataset CSV")->required();
  pr->add_option("--order", order_path, "Trace JSON from extract")->required();
  pr->add_option("--truth", graph_path, "True graph JSON for SHD/TPR");
  pr->add_option("--penalty", pc.penalty_weight, "Lasso weight (default: 0.01*sqrt(log d / n)*std(x_i))");
  pr->add_option("--threshold", pc.coef_threshold, "Coefficient threshold")->capture_default_str();
  pr->add_option("--feature-map", feature_map, "raw|raw+tanh")->capture_default_str();
  pr->add_option("--out", prune_out, "Edge list CSV")->capture_default_str();

  auto* bench = app.add_subcommand("bench", "Run seeds (and an optional sweep) and write a report");
  add_common(bench, o);
  bench->add_option("--out", o.out, "Report path (default: stdout)");
  bench->add_option("--format", o.format, "csv|json-lines (default: csv)");
  bench->add_option("--jobs", o.jobs, "Seeds run concurrently (default: 1)");
  bench->add_option("--sweep", o.sweep, "One-parameter sweep, e.g. gamma=0,0.01,0.05");

  std::uint64_t verify_seed = 0;
  auto* ver = app.add_subcommand("verify", "Numerical checks of the identifiability and marginalization results");
  ver->add_option("--seed", verify_seed, "Seed for every check")->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }
  spdlog::set_level(spdlog::level::from_str(log_level));

  try {
    if (gen->parsed()) return cmd_generate(o);
    if (ext->parsed()) return cmd_extract(o, data_path, graph_path, model_path);
    if (pr->parsed()) {
      pc.feature_map = parse_feature_map(feature_map);
      return cmd_prune(data_path, order_path, graph_path, prune_out, pc);
    }
    if (bench->parsed()) return cmd_bench(o);
    if (ver->parsed()) return cmd_verify(verify_seed);
  } catch (const ParameterError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const GenerationError& e) {
    std::cerr << "generation failed at node " << e.node() << ": " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
