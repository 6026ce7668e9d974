#pragma once

#include "ssts/dag.hpp"
#include "ssts/mechanisms.hpp"
#include "ssts/types.hpp"

#include <string>
#include <vector>

namespace ssts {

struct SortTrace;

// Graph as JSON {"d", "edges": [[j, i, w], ...], "sigma": [...]}; doubles are
// written with round-trip precision.
std::string graph_to_json(const WeightedDag& g);
WeightedDag graph_from_json(const std::string& text);
void write_graph_json(const std::string& path, const WeightedDag& g);
WeightedDag read_graph_json(const std::string& path);

// Headered CSV, one column per variable, 17 significant digits.
void write_dataset_csv(const std::string& path, const SampleMatrix& data);
SampleMatrix read_dataset_csv(const std::string& path);

// Square matrix with node labels as header and first column.
void write_matrix_csv(const std::string& path, const Matrix& m, const std::vector<int>& labels);

// Edge list "parent,child,coefficient".
void write_edges_csv(const std::string& path, const WeightedDag& g);

std::string trace_to_json(const SortTrace& tr);
void write_trace_json(const std::string& path, const SortTrace& tr);
// Reads the order (and block diagnostics) back from a trace file.
SortTrace read_trace_json(const std::string& path);

std::string read_text(const std::string& path);
void write_text(const std::string& path, const std::string& text);

// 64-bit FNV-1a digest as 16 hex digits (provenance tags).
std::string fnv1a_hex(const std::string& bytes);

// Shortest decimal that round-trips the double.
std::string format_double(double v);

}  // namespace ssts
