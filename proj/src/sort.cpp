#include "ssts/sort.hpp"

#include "ssts/io.hpp"
#include "ssts/kernels.hpp"

#include <spdlog/spdlog.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <exception>
#include <filesystem>
#include <string>

namespace ssts {

std::string to_string(SortMode m) {
  switch (m) {
    case SortMode::Expected: return "expected";
    case SortMode::ExactSamplewise: return "exact";
    case SortMode::Patched: return "patched";
  }
  return "?";
}

std::string to_string(LeafCriterion c) { return c == LeafCriterion::DiagEnergy ? "diag" : "cv2"; }

SortMode parse_sort_mode(const std::string& s) {
  if (s == "expected") return SortMode::Expected;
  if (s == "exact" || s == "exact_samplewise") return SortMode::ExactSamplewise;
  if (s == "patched" || s == "expected_with_patch") return SortMode::Patched;
  throw ParameterError("unknown sort mode '" + s + "' (expected|exact|patched)");
}

LeafCriterion parse_leaf_criterion(const std::string& s) {
  if (s == "diag" || s == "diag_energy") return LeafCriterion::DiagEnergy;
  if (s == "cv2" || s == "relative_variance") return LeafCriterion::Cv2;
  throw ParameterError("unknown leaf criterion '" + s + "' (diag|cv2)");
}

void SortConfig::validate() const {
  if (!(gamma >= 0.0 && gamma < 1.0)) throw ParameterError("SortConfig.gamma must lie in [0, 1)");
  if (!(ridge >= 0.0) || !std::isfinite(ridge)) throw ParameterError("SortConfig.ridge must be >= 0");
  if (criterion == LeafCriterion::Cv2 && mode != SortMode::ExactSamplewise)
    throw ParameterError("SortConfig: the cv2 criterion needs per-sample marginals (mode exact)");
  if (stream.micro_batch < 1) throw ParameterError("SortConfig.micro_batch must be >= 1");
}

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

void maybe_snapshot(const SortConfig& cfg, const Matrix& full, const NodeSet& active, std::size_t step) {
  if (cfg.snapshot_dir.empty()) return;
  std::filesystem::create_directories(cfg.snapshot_dir);
  const std::string path = cfg.snapshot_dir + "/sjim_step" + std::to_string(step) + ".csv";
  write_matrix_csv(path, full(active, active), active);
}

std::size_t step_workspace(std::size_t k, std::size_t s) { return (k * k + 2 * k * s) * sizeof(double); }

// Turns blocks discovered leaf-first into a causal order.
TopoOrder assemble_order(const std::vector<SortStep>& steps) {
  TopoOrder order;
  for (auto it = steps.rbegin(); it != steps.rend(); ++it) {
    NodeSet b(it->block.rbegin(), it->block.rend());
    order.blocks.push_back(std::move(b));
  }
  return order;
}

NodeSet complement(const NodeSet& active, const NodeSet& block) {
  NodeSet sorted_block = block;
  std::sort(sorted_block.begin(), sorted_block.end());
  NodeSet out;
  std::set_difference(active.begin(), active.end(), sorted_block.begin(), sorted_block.end(), std::back_inserter(out));
  return out;
}

std::vector<DiagEntry> cv2_values(const NodeSet& active, const Vector& mean, const Vector& mean_sq) {
  const double scale = std::max(1e-300, mean.cwiseAbs().maxCoeff());
  std::vector<DiagEntry> out;
  out.reserve(active.size());
  for (std::size_t a = 0; a < active.size(); ++a) {
    const double m = mean[static_cast<Index>(a)];
    if (!(std::abs(m) > 1e-12 * scale))
      throw CriterionError("cv2 criterion undefined: mean diagonal of node " + std::to_string(active[a]) + " is zero",
                           active[a]);
    const double var = std::max(0.0, mean_sq[static_cast<Index>(a)] - m * m);
    out.push_back({active[a], var / (m * m)});
  }
  return out;
}

Matrix symmetrized_sample(const HessianProvider& provider, const SampleMatrix& data, Index r) {
  Matrix h;
  provider.sample_hessian(data.data.row(r).transpose(), h);
  return 0.5 * (h + h.transpose());
}

// Per-sample marginal: replays `blocks` on one sample's Hessian.
Matrix replay(Matrix h, const std::vector<NodeSet>& blocks, NodeSet& active, double ridge, Index sample) {
  for (const NodeSet& b : blocks) {
    const NodeSet keep = complement(active, b);
    try {
      schur_update_serial(h, keep, b, ridge);
    } catch (const EliminationError& e) {
      throw EliminationError(std::string(e.what()) + " (sample " + std::to_string(sample) + ")");
    }
    active = keep;
  }
  return h;
}

}  // namespace

NodeSet select_block(const std::vector<DiagEntry>& values, double gamma) {
  if (values.empty()) throw InputError("select_block: no active nodes");
  double m = values.front().value;
  for (const auto& v : values) {
    if (!std::isfinite(v.value)) throw EliminationError("non-finite diagonal at node " + std::to_string(v.node));
    m = std::min(m, v.value);
  }
  const double cut = m + gamma * std::abs(m);
  std::vector<DiagEntry> picked;
  for (const auto& v : values)
    if (v.value <= cut) picked.push_back(v);
  std::sort(picked.begin(), picked.end(), [](const DiagEntry& a, const DiagEntry& b) {
    return a.value != b.value ? a.value < b.value : a.node < b.node;
  });
  NodeSet out;
  out.reserve(picked.size());
  for (const auto& p : picked) out.push_back(p.node);
  return out;
}

SortTrace block_ssts(SjimState state, const SortConfig& cfg) {
  cfg.validate();
  if (cfg.mode != SortMode::Expected) throw ParameterError("block_ssts runs the expected mode only");
  state.ridge = cfg.ridge;
  SortTrace tr;
  tr.mode = to_string(cfg.mode);
  tr.criterion = to_string(cfg.criterion);
  const std::size_t d = static_cast<std::size_t>(state.d());
  std::size_t peak = 0;
  const auto t0 = Clock::now();
  while (!state.active.empty()) {
    const auto values = diag_energy(state);
    SortStep step;
    step.block = select_block(values, cfg.gamma);
    step.min_value = state.matrix(step.block.front(), step.block.front());
    const std::size_t k = step.block.size();
    peak = std::max(peak, step_workspace(k, state.active.size() - k));
    step.condition = schur_eliminate_inplace(state, step.block, cfg.stream.parallel);
    tr.steps.push_back(std::move(step));
    maybe_snapshot(cfg, state.matrix, state.active, tr.steps.size());
  }
  tr.t_disc = seconds_since(t0);
  tr.order = assemble_order(tr.steps);
  tr.block_iters = static_cast<int>(tr.steps.size());
  tr.workspace_bytes = d * d * sizeof(double) + peak;
  return tr;
}

Matrix exact_marginal(const HessianProvider& provider, const SampleMatrix& data, const std::vector<NodeSet>& blocks,
                      double ridge, const StreamOptions& opt) {
  require_per_sample(provider, "exact_marginal");
  const int d = provider.dim();
  if (data.d() != d) throw InputError("exact_marginal: data dimension mismatch");
  NodeSet remaining(static_cast<std::size_t>(d));
  for (int i = 0; i < d; ++i) remaining[static_cast<std::size_t>(i)] = i;
  for (const auto& b : blocks) remaining = complement(remaining, b);
  const Index s = static_cast<Index>(remaining.size());
  auto fn = [&](Index r, Matrix& out) {
    NodeSet act(static_cast<std::size_t>(d));
    for (int i = 0; i < d; ++i) act[static_cast<std::size_t>(i)] = i;
    const Matrix h = replay(symmetrized_sample(provider, data, r), blocks, act, ridge, r);
    out = h(remaining, remaining);
  };
  StreamSum sum = opt.parallel ? stream_sum_omp(data.n(), s, s, fn) : stream_sum_serial(data.n(), s, s, fn);
  if (sum.first_bad >= 0)
    throw BuildError("non-finite marginal Hessian at sample " + std::to_string(sum.first_bad), sum.first_bad);
  const Matrix m = sum.sum / static_cast<double>(data.n());
  return 0.5 * (m + m.transpose());
}

SortTrace exact_samplewise_ssts(const HessianProvider& provider, const SampleMatrix& data, const SortConfig& cfg) {
  cfg.validate();
  require_per_sample(provider, "exact sample-wise sorting");
  data.validate();
  const int d = provider.dim();
  if (data.d() != d) throw InputError("exact_samplewise_ssts: data dimension mismatch");
  const Index n = data.n();
  const double dd = static_cast<double>(d);
  if (static_cast<double>(n) * dd * dd * dd > cfg.exact_cost_budget)
    spdlog::warn("exact sample-wise sorting: N*d^3 = {:.3g} exceeds the configured budget {:.3g}",
                 static_cast<double>(n) * dd * dd * dd, cfg.exact_cost_budget);

  SortTrace tr;
  tr.mode = to_string(cfg.mode);
  tr.criterion = to_string(cfg.criterion);
  const std::size_t d2 = static_cast<std::size_t>(d) * static_cast<std::size_t>(d) * sizeof(double);
  const bool cached = static_cast<double>(n) * static_cast<double>(d2) <= static_cast<double>(cfg.exact_cache_bytes);
  const bool par = cfg.stream.parallel;

  Matrix stack;
  const auto t_rep0 = Clock::now();
  if (cached) {
    stack.resize(d, n * d);
    long bad = -1;
    std::exception_ptr err;
#pragma omp parallel for schedule(static) if (par)
    for (Index r = 0; r < n; ++r) {
      try {
        Matrix h = symmetrized_sample(provider, data, r);
        if (!h.allFinite()) {
#pragma omp critical(ssts_exact_bad)
          if (bad < 0 || r < bad) bad = static_cast<long>(r);
        }
        stack.middleCols(r * d, d) = h;
      } catch (...) {
#pragma omp critical(ssts_exact_bad)
        if (!err) err = std::current_exception();
      }
    }
    if (err) std::rethrow_exception(err);
    if (bad >= 0) throw BuildError("non-finite Hessian at sample " + std::to_string(bad), bad);
  }
  tr.t_rep = seconds_since(t_rep0);

  NodeSet active(static_cast<std::size_t>(d));
  for (int i = 0; i < d; ++i) active[static_cast<std::size_t>(i)] = i;
  std::vector<NodeSet> history;
  std::size_t peak = 0;
  const auto t0 = Clock::now();
  while (!active.empty()) {
    const Index s = static_cast<Index>(active.size());
    // Mean working matrix (s x s) plus the mean squared diagonal (last column).
    auto stats = [&](Index r, Matrix& out) {
      if (cached) {
        const auto slice = stack.middleCols(r * d, d);
        out.leftCols(s) = slice(active, active);
      } else {
        NodeSet act(static_cast<std::size_t>(d));
        for (int i = 0; i < d; ++i) act[static_cast<std::size_t>(i)] = i;
        const Matrix h = replay(symmetrized_sample(provider, data, r), history, act, cfg.ridge, r);
        out.leftCols(s) = h(active, active);
      }
      out.col(s) = out.leftCols(s).diagonal().cwiseAbs2();
    };
    StreamSum sum = par ? stream_sum_omp(n, s, s + 1, stats) : stream_sum_serial(n, s, s + 1, stats);
    if (sum.first_bad >= 0)
      throw BuildError("non-finite marginal Hessian at sample " + std::to_string(sum.first_bad), sum.first_bad);
    const Matrix mean = sum.sum / static_cast<double>(n);
    const Matrix work = 0.5 * (mean.leftCols(s) + mean.leftCols(s).transpose());

    std::vector<DiagEntry> values;
    if (cfg.criterion == LeafCriterion::Cv2) {
      values = cv2_values(active, work.diagonal(), mean.col(s));
    } else {
      for (Index a = 0; a < s; ++a) values.push_back({active[static_cast<std::size_t>(a)], work(a, a)});
    }
    SortStep step;
    step.block = select_block(values, cfg.gamma);
    step.min_value = values.front().value;
    for (const auto& v : values) step.min_value = std::min(step.min_value, v.value);

    // Positions of the block inside the active list, for the mean pivot.
    std::vector<Index> pos;
    for (int b : step.block)
      pos.push_back(static_cast<Index>(std::lower_bound(active.begin(), active.end(), b) - active.begin()));
    Matrix pivot = work(pos, pos);
    pivot.diagonal().array() += cfg.ridge;
    step.condition = PivotSolver(pivot).condition_estimate();

    const NodeSet keep = complement(active, step.block);
    const std::size_t k = step.block.size();
    peak = std::max(peak, step_workspace(k, keep.size()) + static_cast<std::size_t>(s * (s + 1)) * sizeof(double));
    if (cached) {
      if (par)
        schur_update_batch_omp(stack, d, keep, step.block, cfg.ridge);
      else
        schur_update_batch_serial(stack, d, keep, step.block, cfg.ridge);
    }
    history.push_back(step.block);
    active = keep;
    tr.steps.push_back(std::move(step));
    if (!cfg.snapshot_dir.empty()) {
      Matrix full = Matrix::Zero(d, d);
      full(NodeSet(active), NodeSet(active)) = exact_marginal(provider, data, history, cfg.ridge, cfg.stream);
      if (!active.empty()) maybe_snapshot(cfg, full, active, tr.steps.size());
    }
  }
  tr.t_disc = seconds_since(t0);
  tr.order = assemble_order(tr.steps);
  tr.block_iters = static_cast<int>(tr.steps.size());
  tr.workspace_bytes = (cached ? static_cast<std::size_t>(n) * d2 : d2) + d2 + peak;
  return tr;
}

SjimState covariance_patch(SjimState state, const HessianProvider& provider, const SampleMatrix& data,
                           const NodeSet& leaf_block, const StreamOptions& opt, double* condition) {
  require_per_sample(provider, "covariance_patch");
  if (leaf_block.empty()) throw InputError("covariance_patch: empty block");
  for (int b : leaf_block)
    if (!std::binary_search(state.active.begin(), state.active.end(), b))
      throw InputError("covariance_patch: node " + std::to_string(b) + " is not active");
  Matrix pivot = state.matrix(leaf_block, leaf_block);
  pivot.diagonal().array() += state.ridge;
  const Index k = static_cast<Index>(leaf_block.size());
  const Matrix kinv = PivotSolver(pivot).solve(Matrix::Identity(k, k));
  const NodeSet keep = complement(state.active, leaf_block);
  const OffdiagBlockStats st = offdiag_block_samples(provider, data, leaf_block, &kinv, &keep, opt);
  const double cond = schur_eliminate_inplace(state, leaf_block, opt.parallel);
  if (condition) *condition = cond;
  if (!keep.empty()) {
    Matrix delta = -(st.weighted - st.mean * kinv * st.mean.transpose());
    delta = 0.5 * (delta + delta.transpose());
    state.matrix(keep, keep) += delta;
  }
  return state;
}

std::vector<DiagEntry> leaf_criterion_cv2(const HessianProvider& provider, const SampleMatrix& data,
                                          const NodeSet& active, const StreamOptions& opt) {
  require_per_sample(provider, "the cv2 criterion");
  if (active.empty()) throw InputError("leaf_criterion_cv2: empty active set");
  if (data.d() != provider.dim()) throw InputError("leaf_criterion_cv2: data dimension mismatch");
  const Index s = static_cast<Index>(active.size());
  auto fn = [&](Index r, Matrix& out) {
    Matrix h;
    provider.sample_hessian(data.data.row(r).transpose(), h);
    for (Index a = 0; a < s; ++a) {
      const double v = h(active[static_cast<std::size_t>(a)], active[static_cast<std::size_t>(a)]);
      out(a, 0) = v;
      out(a, 1) = v * v;
    }
  };
  StreamSum sum = opt.parallel ? stream_sum_omp(data.n(), s, 2, fn) : stream_sum_serial(data.n(), s, 2, fn);
  if (sum.first_bad >= 0)
    throw BuildError("non-finite Hessian diagonal at sample " + std::to_string(sum.first_bad), sum.first_bad);
  const Matrix mean = sum.sum / static_cast<double>(data.n());
  return cv2_values(active, mean.col(0), mean.col(1));
}

SortTrace run_sort(const HessianProvider& provider, const SampleMatrix& data, const SortConfig& cfg) {
  cfg.validate();
  if (cfg.mode == SortMode::ExactSamplewise) return exact_samplewise_ssts(provider, data, cfg);
  const auto t0 = Clock::now();
  SjimState state = build_sjim(provider, data, cfg.ridge, cfg.stream);
  const double t_rep = seconds_since(t0);
  if (cfg.mode == SortMode::Expected) {
    SortTrace tr = block_ssts(std::move(state), cfg);
    tr.t_rep = t_rep;
    return tr;
  }
  require_per_sample(provider, "patched sorting");
  SortTrace tr;
  tr.mode = to_string(cfg.mode);
  tr.criterion = to_string(cfg.criterion);
  tr.t_rep = t_rep;
  const std::size_t d = static_cast<std::size_t>(state.d());
  std::size_t peak = 0;
  const auto t1 = Clock::now();
  while (!state.active.empty()) {
    SortStep step;
    step.block = select_block(diag_energy(state), cfg.gamma);
    step.min_value = state.matrix(step.block.front(), step.block.front());
    const std::size_t k = step.block.size();
    const std::size_t s = state.active.size() - k;
    peak = std::max(peak, step_workspace(k, s) + (2 * k * s + s * s) * sizeof(double));
    state = covariance_patch(std::move(state), provider, data, step.block, cfg.stream, &step.condition);
    tr.steps.push_back(std::move(step));
    maybe_snapshot(cfg, state.matrix, state.active, tr.steps.size());
  }
  tr.t_disc = seconds_since(t1);
  tr.order = assemble_order(tr.steps);
  tr.block_iters = static_cast<int>(tr.steps.size());
  tr.workspace_bytes = d * d * sizeof(double) + peak;
  return tr;
}

}  // namespace ssts
