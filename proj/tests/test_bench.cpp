#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "ssts/bench.hpp"
#include "ssts/io.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

using namespace ssts;
namespace fs = std::filesystem;

#ifndef SSTS_CLI_PATH
#define SSTS_CLI_PATH ""
#endif

namespace {

fs::path scratch(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / "ssts_test_bench";
  fs::create_directories(dir);
  return dir / name;
}

std::string error_of(const std::string& json) {
  try {
    parse_experiment_config(json);
  } catch (const ParameterError& e) {
    return e.what();
  }
  return "";
}

// Oracle pipeline: no training, fast.
ExperimentConfig oracle_cfg(int d = 8) {
  ExperimentConfig c;
  c.graph.d = d;
  c.mechanism.kind = MechanismKind::TanhAnm;
  c.provider = ProviderKind::Oracle;
  c.n = 500;
  c.seeds = {0, 1, 2};
  return c;
}

int run_cli(const std::string& args) {
  const std::string cmd = std::string(SSTS_CLI_PATH) + " " + args + " >/dev/null 2>&1";
  const int rc = std::system(cmd.c_str());
  return WIFEXITED(rc) ? WEXITSTATUS(rc) : -1;
}

}  // namespace

TEST_CASE("config errors name the field") {
  CHECK(error_of(R"({"sort": {"gamma": 1.5}})").find("sort") != std::string::npos);
  CHECK(error_of(R"({"sort": {"gama": 0.1}})").find("sort.gama") != std::string::npos);
  CHECK(error_of(R"({"graph": {"d": "ten"}})").find("graph.d") != std::string::npos);
  CHECK(error_of(R"({"n": 1})").find("n") != std::string::npos);
  CHECK(error_of(R"({"seeds": [1, 1]})").find("seeds") != std::string::npos);
  CHECK(error_of(R"({"seeds": []})").find("seeds") != std::string::npos);
  CHECK(error_of(R"({"sort": {"criterion": "cv2"}})").find("sort") != std::string::npos);
  CHECK(error_of(R"({"sweep": {"param": "gamma", "values": [0.1, 2.0]}})").find("gamma") != std::string::npos);
  CHECK(error_of(R"({"provider": "magic"})").find("provider") != std::string::npos);
  CHECK_THROWS_AS(parse_experiment_config("{broken"), ParameterError);
  CHECK(error_of(R"({"graph": {"d": 12}, "sort": {"gamma": 0.1}, "seeds": [3, 4]})").empty());
}

TEST_CASE("config JSON round trip") {
  ExperimentConfig c = oracle_cfg(11);
  c.sort.gamma = 0.15;
  c.prune.coef_threshold = 0.2;
  c.sweep_param = "ridge";
  c.sweep_values = {"0", "1e-3"};
  const ExperimentConfig r = parse_experiment_config(experiment_config_to_json(c));
  CHECK(experiment_config_to_json(r) == experiment_config_to_json(c));
  CHECK(r.graph.d == 11);
  CHECK(r.sort.gamma == 0.15);
  CHECK(r.seeds == c.seeds);
}

TEST_CASE("apply_parameter") {
  ExperimentConfig c;
  apply_parameter(c, "gamma", "0.2");
  apply_parameter(c, "mechanism", "pnl");
  apply_parameter(c, "provider", "linear-emp");
  apply_parameter(c, "d", "17");
  CHECK(c.sort.gamma == 0.2);
  CHECK(c.mechanism.kind == MechanismKind::Pnl);
  CHECK(c.provider == ProviderKind::LinearEmpirical);
  CHECK(c.graph.d == 17);
  CHECK_THROWS_AS(apply_parameter(c, "gamma", "abc"), ParameterError);
  CHECK_THROWS_AS(apply_parameter(c, "colour", "red"), ParameterError);
}

TEST_CASE("runs are deterministic apart from timings") {
  ExperimentConfig c = oracle_cfg();
  const RunReport a = run_experiment(c);
  c.jobs = 3;
  const RunReport b = run_experiment(c);
  REQUIRE(a.rows.size() == 3);
  REQUIRE(b.rows.size() == 3);
  for (std::size_t k = 0; k < 3; ++k) {
    CHECK(a.rows[k].seed == b.rows[k].seed);
    CHECK(a.rows[k].ok);
    CHECK(a.rows[k].metrics.ev == b.rows[k].metrics.ev);
    CHECK(a.rows[k].metrics.shd == b.rows[k].metrics.shd);
    CHECK(a.rows[k].metrics.tpr == b.rows[k].metrics.tpr);
    CHECK(a.rows[k].block_iters == b.rows[k].block_iters);
    CHECK(a.rows[k].build_bytes == b.rows[k].build_bytes);
  }
  CHECK(provenance_tag(c, 1) == provenance_tag(c, 1));
  CHECK(provenance_tag(c, 1) != provenance_tag(c, 2));
}

TEST_CASE("rows follow seed order regardless of the listed order") {
  ExperimentConfig c = oracle_cfg(5);
  c.seeds = {7, 2, 4};
  c.jobs = 2;
  const RunReport r = run_experiment(c);
  REQUIRE(r.rows.size() == 3);
  CHECK(r.rows[0].seed == 2);
  CHECK(r.rows[1].seed == 4);
  CHECK(r.rows[2].seed == 7);
}

TEST_CASE("timings decompose the total") {
  const RunReport r = run_experiment(oracle_cfg(12));
  for (const RunRow& row : r.rows) {
    CHECK(row.t_rep >= 0.0);
    CHECK(row.t_disc >= 0.0);
    CHECK(row.t_prune >= 0.0);
    CHECK(row.t_total >= row.t_rep + row.t_disc + row.t_prune - 1e-6);
    CHECK(row.extract_bytes > 0);
  }
}

TEST_CASE("aggregates are recomputable from the rows") {
  ExperimentConfig c = oracle_cfg(10);
  c.seeds = {0, 1, 2, 3, 4};
  const RunReport r = run_experiment(c);
  REQUIRE(r.aggregates.size() == 1);
  double sum = 0.0, sq = 0.0;
  for (const RunRow& row : r.rows) sum += row.metrics.ev;
  const double mean = sum / 5.0;
  for (const RunRow& row : r.rows) sq += (row.metrics.ev - mean) * (row.metrics.ev - mean);
  const double sd = std::sqrt(sq / 4.0);
  bool found = false;
  for (const auto& [name, ms] : r.aggregates[0].stats)
    if (name == "ev") {
      found = true;
      CHECK(ms.first == doctest::Approx(mean));
      CHECK(ms.second == doctest::Approx(sd));
    }
  CHECK(found);
  CHECK(r.aggregates[0].runs == 5);
  CHECK(r.aggregates[0].failures == 0);
}

TEST_CASE("failed seeds are recorded and excluded from aggregates") {
  // Extreme PNL weights overflow whenever the graph has an edge.
  ExperimentConfig c;
  c.graph.d = 3;
  c.graph.expected_edges = 0.4;
  c.graph.weights = {1e300, 1e300};
  c.mechanism.kind = MechanismKind::Pnl;
  c.provider = ProviderKind::LinearEmpirical;
  c.n = 200;
  std::uint64_t empty_seed = 1000, edge_seed = 1000;
  for (std::uint64_t s = 0; s < 50 && (empty_seed == 1000 || edge_seed == 1000); ++s) {
    const auto g = make_graph(c.graph, s);
    if (g.dag.edge_count() == 0 && empty_seed == 1000) empty_seed = s;
    if (g.dag.edge_count() > 0 && edge_seed == 1000) edge_seed = s;
  }
  REQUIRE(empty_seed < 1000);
  REQUIRE(edge_seed < 1000);
  c.seeds = {empty_seed, edge_seed};
  const RunReport r = run_experiment(c);
  CHECK(r.any_failed());
  int failed = 0;
  for (const RunRow& row : r.rows) {
    if (!row.ok) {
      ++failed;
      CHECK(row.seed == edge_seed);
      CHECK(row.error.find("node") != std::string::npos);
    }
  }
  CHECK(failed == 1);
  REQUIRE(r.aggregates.size() == 1);
  CHECK(r.aggregates[0].failures == 1);
  CHECK(r.aggregates[0].runs == 2);
  CHECK(report_csv(r).find("1 failed") != std::string::npos);
}

TEST_CASE("a sweep emits one aggregate per value") {
  ExperimentConfig c = oracle_cfg(6);
  c.seeds = {0, 1};
  c.sweep_param = "gamma";
  c.sweep_values = {"0", "0.05", "0.3"};
  const RunReport r = run_experiment(c);
  CHECK(r.rows.size() == 6);
  REQUIRE(r.aggregates.size() == 3);
  CHECK(r.aggregates[0].label == "0");
  CHECK(r.aggregates[2].label == "0.3");
  CHECK(r.rows[0].label == "0");
  CHECK(r.rows[5].label == "0.3");

  ExperimentConfig n;
  n.graph.d = 3;
  n.n = 200;
  n.score_net.epochs = 2;
  n.seeds = {0, 1};
  n.sweep_param = "lambda_sparse";
  n.sweep_values = {"0", "0.01", "0.1"};
  const RunReport rn = run_experiment(n);
  CHECK(rn.aggregates.size() == 3);
  CHECK_FALSE(rn.any_failed());
}

TEST_CASE("block count strictly decreases across the gamma grid at d = 100") {
  ExperimentConfig c = oracle_cfg(100);
  c.graph.expected_edges = 200;
  // Unequal noise scales keep leaf diagonals tie-free.
  c.graph.sigma.resize(100);
  for (int i = 0; i < 100; ++i) c.graph.sigma[static_cast<std::size_t>(i)] = 0.8 + 0.4 * ((i * 37) % 100) / 99.0;
  c.n = 2000;
  c.seeds = {0};
  c.prune_enabled = false;
  c.sweep_param = "gamma";
  c.sweep_values = {"0", "0.01", "0.05", "0.15"};
  const RunReport r = run_experiment(c);
  REQUIRE(r.rows.size() == 4);
  CHECK(r.rows[0].block_iters == 100);
  for (std::size_t k = 1; k < 4; ++k) CHECK(r.rows[k].block_iters < r.rows[k - 1].block_iters);
}

TEST_CASE("report formats") {
  ExperimentConfig c = oracle_cfg(5);
  c.seeds = {0, 1};
  const RunReport r = run_experiment(c);
  const std::string csv = report_csv(r);
  std::istringstream in(csv);
  std::string header;
  std::getline(in, header);
  CHECK(header.rfind("kind,label,seed,ok,ev,shd,tpr", 0) == 0);
  int lines = 0;
  for (std::string l; std::getline(in, l);) ++lines;
  CHECK(lines == 4);  // two runs, mean, std
  const std::string jl = report_json_lines(r);
  CHECK(std::count(jl.begin(), jl.end(), '\n') == 3);
  CHECK(jl.find("\"kind\":\"aggregate\"") != std::string::npos);
}

TEST_CASE("cli: generate is reproducible and well shaped") {
  REQUIRE(std::string(SSTS_CLI_PATH).size() > 0);
  const fs::path a = scratch("gen_a"), b = scratch("gen_b");
  fs::remove_all(a);
  fs::remove_all(b);
  const std::string args = "generate --d 2 --n 50 --mechanism linear --seed-list 3 --out ";
  CHECK(run_cli(args + a.string()) == 0);
  CHECK(run_cli(args + b.string()) == 0);
  const std::string da = read_text((a / "data.csv").string());
  CHECK(da == read_text((b / "data.csv").string()));
  CHECK(read_text((a / "graph.json").string()) == read_text((b / "graph.json").string()));
  const SampleMatrix x = read_dataset_csv((a / "data.csv").string());
  CHECK(x.n() == 50);
  CHECK(x.d() == 2);
}

TEST_CASE("cli: exit codes") {
  REQUIRE(std::string(SSTS_CLI_PATH).size() > 0);
  CHECK(run_cli("--help") == 0);
  CHECK(run_cli("bench --gamma 2") == 2);
  CHECK(run_cli("bench --no-such-flag") == 2);
  const fs::path cfg = scratch("bad.json");
  {
    std::ofstream f(cfg);
    f << R"({"graph": {"dd": 3}})";
  }
  CHECK(run_cli("bench --config " + cfg.string()) == 2);
  const fs::path out = scratch("ok.csv");
  CHECK(run_cli("bench --provider oracle --mechanism tanh --d 5 --n 300 --seed-list 0-1 --out " + out.string()) == 0);
  CHECK(fs::exists(out));
  CHECK(run_cli("extract --data " + scratch("missing.csv").string()) == 1);
  const fs::path pnl = scratch("pnl.json");
  {
    std::ofstream f(pnl);
    f << R"({"graph": {"d": 3, "expected_edges": 3, "weight_low": 1e300, "weight_high": 1e300},
             "mechanism": {"kind": "pnl"}, "provider": "linear-emp", "n": 100})";
  }
  CHECK(run_cli("bench --config " + pnl.string() + " --out " + scratch("fail.csv").string()) == 1);
}
