#include "ssts/io.hpp"

#include "ssts/sort.hpp"

#include <json.hpp>

#include <charconv>
#include <cstdio>
#include <fstream>
#include <sstream>

namespace ssts {

using nlohmann::json;

std::string read_text(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open '" + path + "' for reading");
  std::ostringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

void write_text(const std::string& path, const std::string& text) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open '" + path + "' for writing");
  f << text;
  if (!f) throw IoError("write to '" + path + "' failed");
}

std::string fnv1a_hex(const std::string& bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

std::string format_double(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

std::string graph_to_json(const WeightedDag& g) {
  json j;
  j["d"] = g.d();
  json edges = json::array();
  for (const Edge& e : g.edges()) edges.push_back(json::array({e.parent, e.child, e.weight}));
  j["edges"] = edges;
  j["sigma"] = g.sigma();
  return j.dump();
}

WeightedDag graph_from_json(const std::string& text) {
  try {
    const json j = json::parse(text);
    const int d = j.at("d").get<int>();
    std::vector<Edge> edges;
    for (const auto& e : j.at("edges")) {
      if (!e.is_array() || e.size() != 3) throw IoError("graph edge entries must be [parent, child, weight]");
      edges.push_back({e[0].get<int>(), e[1].get<int>(), e[2].get<double>()});
    }
    std::vector<double> sigma = j.contains("sigma") ? j.at("sigma").get<std::vector<double>>()
                                                    : std::vector<double>(static_cast<std::size_t>(d), 1.0);
    return WeightedDag(d, std::move(edges), std::move(sigma));
  } catch (const json::exception& e) {
    throw IoError(std::string("malformed graph JSON: ") + e.what());
  }
}

void write_graph_json(const std::string& path, const WeightedDag& g) { write_text(path, graph_to_json(g) + "\n"); }

WeightedDag read_graph_json(const std::string& path) { return graph_from_json(read_text(path)); }

void write_dataset_csv(const std::string& path, const SampleMatrix& data) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open '" + path + "' for writing");
  for (Index j = 0; j < data.d(); ++j) {
    if (j) f << ',';
    f << (static_cast<std::size_t>(j) < data.names.size() ? data.names[static_cast<std::size_t>(j)]
                                                          : "X" + std::to_string(j));
  }
  f << '\n';
  for (Index r = 0; r < data.n(); ++r) {
    for (Index j = 0; j < data.d(); ++j) {
      if (j) f << ',';
      f << format_double(data.data(r, j));
    }
    f << '\n';
  }
  if (!f) throw IoError("write to '" + path + "' failed");
}

namespace {

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : line) {
    if (c == ',') {
      out.push_back(cur);
      cur.clear();
    } else if (c != '\r') {
      cur.push_back(c);
    }
  }
  out.push_back(cur);
  return out;
}

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\"");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\"");
  return s.substr(b, e - b + 1);
}

}  // namespace

SampleMatrix read_dataset_csv(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw IoError("cannot open '" + path + "' for reading");
  std::string line;
  if (!std::getline(f, line)) throw IoError("'" + path + "' is empty");
  std::vector<std::string> names = split_csv_line(line);
  for (auto& n : names) n = trim(n);
  const std::size_t d = names.size();
  std::vector<double> values;
  std::size_t rows = 0;
  while (std::getline(f, line)) {
    if (trim(line).empty()) continue;
    const auto cells = split_csv_line(line);
    if (cells.size() != d)
      throw IoError("'" + path + "' line " + std::to_string(rows + 2) + ": expected " + std::to_string(d) +
                    " fields, found " + std::to_string(cells.size()));
    for (const auto& c : cells) {
      const std::string t = trim(c);
      double v = 0.0;
      auto res = std::from_chars(t.data(), t.data() + t.size(), v);
      if (res.ec != std::errc() || res.ptr != t.data() + t.size())
        throw IoError("'" + path + "' line " + std::to_string(rows + 2) + ": cannot parse '" + t + "' as a number");
      values.push_back(v);
    }
    ++rows;
  }
  if (rows == 0) throw IoError("'" + path + "' has no data rows");
  Matrix m = Eigen::Map<const RowMatrix>(values.data(), static_cast<Index>(rows), static_cast<Index>(d));
  SampleMatrix s(std::move(m), "file:" + path);
  s.names = std::move(names);
  s.validate();
  return s;
}

void write_matrix_csv(const std::string& path, const Matrix& m, const std::vector<int>& labels) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open '" + path + "' for writing");
  f << "node";
  for (int l : labels) f << ",X" << l;
  f << '\n';
  for (Index r = 0; r < m.rows(); ++r) {
    f << 'X' << labels[static_cast<std::size_t>(r)];
    for (Index c = 0; c < m.cols(); ++c) f << ',' << format_double(m(r, c));
    f << '\n';
  }
  if (!f) throw IoError("write to '" + path + "' failed");
}

void write_edges_csv(const std::string& path, const WeightedDag& g) {
  std::ostringstream ss;
  ss << "parent,child,coefficient\n";
  for (const Edge& e : g.edges()) ss << e.parent << ',' << e.child << ',' << format_double(e.weight) << '\n';
  write_text(path, ss.str());
}

std::string trace_to_json(const SortTrace& tr) {
  json j;
  j["mode"] = tr.mode;
  j["criterion"] = tr.criterion;
  j["block_iters"] = tr.block_iters;
  j["order"] = tr.order.blocks;
  j["flat_order"] = tr.order.flatten();
  json steps = json::array();
  for (const auto& s : tr.steps)
    steps.push_back({{"block", s.block}, {"min_value", s.min_value}, {"condition", s.condition}});
  j["steps"] = steps;
  j["t_rep"] = tr.t_rep;
  j["t_disc"] = tr.t_disc;
  j["workspace_bytes"] = tr.workspace_bytes;
  return j.dump(1);
}

void write_trace_json(const std::string& path, const SortTrace& tr) { write_text(path, trace_to_json(tr) + "\n"); }

SortTrace read_trace_json(const std::string& path) {
  try {
    const json j = json::parse(read_text(path));
    SortTrace tr;
    tr.order.blocks = j.at("order").get<std::vector<NodeSet>>();
    tr.block_iters = static_cast<int>(tr.order.blocks.size());
    if (j.contains("steps"))
      for (const auto& s : j.at("steps"))
        tr.steps.push_back({s.at("block").get<NodeSet>(), s.value("min_value", 0.0), s.value("condition", 1.0)});
    tr.mode = j.value("mode", "");
    tr.criterion = j.value("criterion", "");
    tr.t_rep = j.value("t_rep", 0.0);
    tr.t_disc = j.value("t_disc", 0.0);
    return tr;
  } catch (const json::exception& e) {
    throw IoError("malformed trace '" + path + "': " + e.what());
  }
}

}  // namespace ssts
