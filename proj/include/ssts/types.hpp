#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace ssts {

using Index = Eigen::Index;
using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;
using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using NodeSet = std::vector<int>;

// Error hierarchy. Every library failure derives from Error so callers (the
// CLI in particular) can separate configuration problems from run failures.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Invalid parameters or configuration (CLI exit code 2).
class ParameterError : public Error {
 public:
  using Error::Error;
};

// Malformed inputs: orders that do not cover the graph, bad files, etc.
class InputError : public Error {
 public:
  using Error::Error;
};

class GenerationError : public Error {
 public:
  GenerationError(const std::string& what, int node) : Error(what), node_(node) {}
  int node() const { return node_; }

 private:
  int node_;
};

class UnsupportedError : public Error {
 public:
  using Error::Error;
};

class InversionError : public Error {
 public:
  using Error::Error;
};

class EliminationError : public Error {
 public:
  using Error::Error;
};

class BuildError : public Error {
 public:
  BuildError(const std::string& what, long sample) : Error(what), sample_(sample) {}
  long sample() const { return sample_; }

 private:
  long sample_;
};

class TrainingError : public Error {
 public:
  TrainingError(const std::string& what, int epoch) : Error(what), epoch_(epoch) {}
  int epoch() const { return epoch_; }

 private:
  int epoch_;
};

class SolverError : public Error {
 public:
  SolverError(const std::string& what, int node) : Error(what), node_(node) {}
  int node() const { return node_; }

 private:
  int node_;
};

// A leaf-selection criterion is undefined for a node (e.g. zero mean diagonal).
class CriterionError : public Error {
 public:
  CriterionError(const std::string& what, int node) : Error(what), node_(node) {}
  int node() const { return node_; }

 private:
  int node_;
};

class IoError : public Error {
 public:
  using Error::Error;
};

}  // namespace ssts
