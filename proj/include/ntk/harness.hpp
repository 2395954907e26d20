#pragma once

// Experiment harness behind the `ntk` CLI: config parsing, the five
// subcommands, and the run journal. Every command writes CSV into the output
// directory and returns the main table so tests can inspect it directly.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "ntk/csv.hpp"
#include "ntk/data.hpp"
#include "ntk/error.hpp"
#include "ntk/finite_net.hpp"
#include "ntk/inference.hpp"
#include "ntk/kernel.hpp"
#include "ntk/kernel_io.hpp"
#include "ntk/netspec.hpp"
#include "ntk/parallel.hpp"

#ifndef NTK_VERSION
#define NTK_VERSION "dev"
#endif

namespace ntk {

namespace fs = std::filesystem;
using nlohmann::json;

struct DatasetConfig {
  std::string source = "synthetic";  // "synthetic" | "cifar10"
  std::string kind = "two-spheres";
  std::vector<std::string> paths;
  std::size_t n = 0;  // synthetic pool size; 0 means n_train + n_test
  std::size_t d = 8;
  double noise = 0.1;
  std::uint64_t seed = 0;
  std::size_t n_train = 100;
  std::size_t n_test = 100;
  bool standardize = false;
  bool center_targets = false;
};

struct ExperimentConfig {
  NetworkSpec spec;
  DatasetConfig dataset;
  std::vector<Parameterization> parameterizations;
  std::vector<std::vector<std::size_t>> widths_sweep;
  std::vector<std::size_t> s_sweep{1};
  std::size_t draws = 8;  // R
  double ridge = 0.0;
  std::vector<double> lr_grid;
  std::vector<std::uint64_t> seeds{0};
  std::size_t train_scale = 1;
  std::size_t epochs = 10;
  std::size_t batch = 32;
  std::string output = "out";
  json source;  // the resolved config tree, for hashing

  std::string hash() const {
    std::uint64_t h = 1469598103934665603ULL;
    for (unsigned char c : source.dump()) {
      h ^= c;
      h *= 1099511628211ULL;
    }
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
    return buf;
  }
};

// `count` log-spaced values in [lo, hi].
inline std::vector<double> log_grid(double lo, double hi, std::size_t count) {
  std::vector<double> g;
  if (count == 0) return g;
  if (count == 1) return {lo};
  for (std::size_t i = 0; i < count; ++i)
    g.push_back(std::exp(std::log(lo) + (std::log(hi) - std::log(lo)) * static_cast<double>(i) /
                                            static_cast<double>(count - 1)));
  g.front() = lo;  // exact endpoints
  g.back() = hi;
  return g;
}

inline std::string widths_label(const std::vector<std::size_t>& w) {
  std::string out;
  for (std::size_t i = 0; i < w.size(); ++i) out += (i ? "x" : "") + std::to_string(w[i]);
  return out;
}

// CLI flags that take precedence over the config file.
struct Overrides {
  std::optional<std::string> out;
  std::optional<std::uint64_t> seed;
  std::optional<double> ridge;
};

inline ExperimentConfig parse_config(json j, const Overrides& ov = {}) {
  if (ov.out) j["output"] = *ov.out;
  if (ov.seed) j["seeds"] = json::array({*ov.seed});
  if (ov.ridge) j["ridge"] = *ov.ridge;
  ExperimentConfig c;
  try {
    c.spec = spec_from_json(j.at("spec"));
    require_valid(c.spec);
    if (j.contains("dataset")) {
      const auto& d = j["dataset"];
      auto& ds = c.dataset;
      ds.source = d.value("source", ds.source);
      ds.kind = d.value("kind", ds.kind);
      ds.paths = d.value("paths", ds.paths);
      ds.n = d.value("n", ds.n);
      ds.d = d.value("d", ds.d);
      ds.noise = d.value("noise", ds.noise);
      ds.seed = d.value("seed", ds.seed);
      ds.n_train = d.value("n_train", ds.n_train);
      ds.n_test = d.value("n_test", ds.n_test);
      ds.standardize = d.value("standardize", ds.source == "cifar10");
      ds.center_targets = d.value("center_targets", ds.center_targets);
    }
    if (j.contains("parameterizations"))
      for (const auto& p : j["parameterizations"]) c.parameterizations.push_back(parse_parameterization(p.get<std::string>()));
    else
      c.parameterizations.push_back(c.spec.parameterization);
    if (j.contains("widths_sweep")) {
      for (const auto& w : j["widths_sweep"]) {
        if (w.is_array()) c.widths_sweep.push_back(w.get<std::vector<std::size_t>>());
        else c.widths_sweep.push_back({w.get<std::size_t>()});
      }
    } else {
      c.widths_sweep.push_back(hidden_widths(c.spec));
    }
    c.s_sweep = j.value("s_sweep", c.s_sweep);
    c.draws = j.value("R", c.draws);
    c.ridge = j.value("ridge", c.ridge);
    if (j.contains("lr_grid")) {
      const auto& g = j["lr_grid"];
      if (g.is_array()) c.lr_grid = g.get<std::vector<double>>();
      else c.lr_grid = log_grid(g.value("min", 0.01), g.value("max", 100.0), g.value("count", std::size_t{20}));
    } else {
      c.lr_grid = log_grid(0.01, 100.0, 20);
    }
    c.seeds = j.value("seeds", c.seeds);
    c.train_scale = j.value("s", c.train_scale);
    c.epochs = j.value("epochs", c.epochs);
    c.batch = j.value("batch", c.batch);
    c.output = j.value("output", c.output);
  } catch (const json::exception& ex) {
    throw SpecError(std::string("malformed config: ") + ex.what());
  }

  if (c.parameterizations.empty()) throw SpecError("config: empty parameterizations list");
  if (c.widths_sweep.empty()) throw SpecError("config: empty widths_sweep");
  if (c.s_sweep.empty()) throw SpecError("config: empty s_sweep");
  if (c.seeds.empty()) throw SpecError("config: empty seeds");
  if (c.lr_grid.empty()) throw SpecError("config: empty lr_grid");
  if (c.draws == 0) throw SpecError("config: R must be >= 1");
  if (!(c.ridge >= 0.0)) throw SpecError("config: ridge must be >= 0");
  for (auto s : c.s_sweep)
    if (s == 0) throw SpecError("config: s values must be >= 1");
  for (const auto& w : c.widths_sweep) {
    for (auto v : w)
      if (v == 0) throw SpecError("config: widths must be >= 1");
    require_valid(with_hidden_widths(c.spec, w));
  }
  if (c.dataset.source == "cifar10") {
    if (c.dataset.paths.empty()) throw SpecError("config: cifar10 dataset needs paths");
    for (const auto& p : c.dataset.paths)
      if (!fs::exists(p)) throw SpecError("config: dataset file " + p + " does not exist");
  } else if (c.dataset.source == "synthetic") {
    parse_synthetic_kind(c.dataset.kind);
  } else {
    throw SpecError("config: unknown dataset source '" + c.dataset.source + "'");
  }
  c.source = std::move(j);
  return c;
}

inline ExperimentConfig load_config(const std::string& path, const Overrides& ov = {}) {
  std::ifstream in(path);
  if (!in) throw SpecError("cannot open config " + path);
  json j;
  try {
    in >> j;
  } catch (const json::exception& ex) {
    throw SpecError("config " + path + ": " + ex.what());
  }
  return parse_config(std::move(j), ov);
}

struct RunOptions {
  std::size_t threads = 1;
};

// Append-only, single-writer journal of completed steps.
class Journal {
 public:
  Journal(const fs::path& dir, std::string command, std::string config_hash)
      : path_(dir / "journal.log"), command_(std::move(command)), hash_(std::move(config_hash)) {}

  void step(const std::string& what, double wall_seconds) const {
    std::ofstream out(path_, std::ios::app);
    if (!out) throw IoError("cannot append to " + path_.string());
    const std::time_t now = std::time(nullptr);
    char stamp[32];
    std::strftime(stamp, sizeof stamp, "%Y-%m-%dT%H:%M:%SZ", std::gmtime(&now));
    out << stamp << " cmd=" << command_ << " config=" << hash_ << " version=" << NTK_VERSION
        << " step=" << what << " wall_s=" << wall_seconds << '\n';
  }

 private:
  fs::path path_;
  std::string command_;
  std::string hash_;
};

namespace detail {

class Stopwatch {
 public:
  double seconds() const {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
  }

 private:
  std::chrono::steady_clock::time_point start_ = std::chrono::steady_clock::now();
};

inline fs::path prepare_output(const ExperimentConfig& c) {
  fs::path out(c.output);
  std::error_code ec;
  fs::create_directories(out, ec);
  if (ec) throw IoError("cannot create output directory " + out.string() + ": " + ec.message());
  return out;
}

// Train/test split for one seed, preprocessed per the dataset config.
inline Split make_split(const ExperimentConfig& c, std::uint64_t seed) {
  const auto& ds = c.dataset;
  Dataset pool;
  std::size_t channels = 1;
  if (ds.source == "cifar10") {
    pool = load_cifar10(ds.paths);
    channels = 3;
  } else {
    const std::size_t n = ds.n ? ds.n : ds.n_train + ds.n_test;
    pool = synthetic(parse_synthetic_kind(ds.kind), n + n % 2, ds.d, ds.noise,
                     derive_seed(ds.seed, seed));
  }
  Split split = subset(pool, ds.n_train, ds.n_test, seed);
  if (ds.standardize) standardize(split, channels);
  if (ds.center_targets) {
    center_targets(split.train);
    center_targets(split.test);
  }
  if (split.train.dim() != c.spec.input_dim)
    throw SpecError("dataset dimension " + std::to_string(split.train.dim()) +
                    " does not match spec input_dim " + std::to_string(c.spec.input_dim));
  return split;
}

inline NetworkSpec variant(const ExperimentConfig& c, Parameterization p,
                           const std::vector<std::size_t>& widths) {
  NetworkSpec s = with_hidden_widths(c.spec, widths);
  s.parameterization = p;
  return s;
}

struct KernelTestError {
  double error = 0.0;
  double mse = 0.0;
  double jitter = 0.0;
};

inline KernelTestError ntk_test_error(const NetworkSpec& spec, const Split& split, double ridge) {
  const KernelState st = propagate(spec, split.train.inputs, &split.test.inputs);
  const Prediction pred = ntk_predict_inf(st, split.train.size(), split.train.targets, ridge);
  return {classification_error(pred.values, split.test.targets),
          (pred.values - split.test.targets).squaredNorm() / static_cast<double>(split.test.size()),
          pred.jitter};
}

inline double loglog_slope(const std::vector<double>& x, const std::vector<double>& y) {
  double mx = 0, my = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    mx += std::log(x[i]);
    my += std::log(y[i]);
  }
  mx /= static_cast<double>(x.size());
  my /= static_cast<double>(x.size());
  double sxy = 0, sxx = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double a = std::log(x[i]) - mx;
    sxy += a * (std::log(y[i]) - my);
    sxx += a * a;
  }
  return sxx > 0 ? sxy / sxx : std::numeric_limits<double>::quiet_NaN();
}

}  // namespace detail

using detail::loglog_slope;

// ---- kernel --------------------------------------------------------------

inline CsvTable cmd_kernel(const ExperimentConfig& c, const RunOptions& run = {}) {
  const fs::path out = detail::prepare_output(c);
  Journal journal(out, "kernel", c.hash());
  struct Job {
    std::uint64_t seed;
    Parameterization p;
    std::vector<std::size_t> widths;
  };
  std::vector<Job> jobs;
  for (auto seed : c.seeds)
    for (auto p : c.parameterizations)
      for (const auto& w : c.widths_sweep) jobs.push_back({seed, p, w});

  auto rows = ordered_parallel_map(jobs.size(), run.threads, [&](std::size_t k) {
    detail::Stopwatch clock;
    const Job& job = jobs[k];
    const Split split = detail::make_split(c, job.seed);
    const NetworkSpec spec = detail::variant(c, job.p, job.widths);
    const KernelState st = propagate(spec, split.train.inputs, &split.test.inputs);
    const std::string stem = "kernel_" + std::to_string(k);
    const std::string nngp_file = stem + "_nngp.bin";
    const std::map<std::string, std::string> meta = {
        {"spec_hash", spec_hash(spec)}, {"parameterization", std::string(to_string(job.p))},
        {"n_train", std::to_string(split.train.size())}, {"n_test", std::to_string(split.test.size())}};
    write_kernel((out / nngp_file).string(), st.nngp, st.num_points, st.spatial);
    auto m = meta;
    m["kind"] = "nngp";
    write_kernel_meta((out / nngp_file).string(), m);
    std::string ntk_file, status = "ok";
    double ntk_diag = std::numeric_limits<double>::quiet_NaN();
    if (st.divergent()) {
      status = "divergent-ntk";
    } else {
      ntk_file = stem + "_ntk.bin";
      write_kernel((out / ntk_file).string(), *st.ntk, st.num_points, st.spatial);
      m["kind"] = "ntk";
      write_kernel_meta((out / ntk_file).string(), m);
      ntk_diag = st.ntk->diagonal().mean();
    }
    std::vector<CsvCell> row{static_cast<long long>(k), static_cast<unsigned long long>(job.seed),
                             std::string(to_string(job.p)), widths_label(job.widths),
                             static_cast<long long>(st.num_points), status, nngp_file, ntk_file,
                             st.nngp.diagonal().mean(), ntk_diag, spec_hash(spec)};
    return std::pair{std::move(row), clock.seconds()};
  });

  CsvTable table({"config_id", "seed", "parameterization", "widths", "n", "status", "nngp_file",
                  "ntk_file", "nngp_mean_diag", "ntk_mean_diag", "spec_hash"});
  for (std::size_t k = 0; k < rows.size(); ++k) {
    table.add_row(rows[k].first);
    journal.step("kernel_" + std::to_string(k), rows[k].second);
  }
  table.write((out / "kernels.csv").string());
  return table;
}

// ---- compare -------------------------------------------------------------

inline CsvTable cmd_compare(const ExperimentConfig& c, const RunOptions& run = {}) {
  const fs::path out = detail::prepare_output(c);
  Journal journal(out, "compare", c.hash());
  struct Job {
    std::uint64_t seed;
    std::vector<std::size_t> widths;
  };
  std::vector<Job> jobs;
  for (auto seed : c.seeds)
    for (const auto& w : c.widths_sweep) jobs.push_back({seed, w});
  auto rows = ordered_parallel_map(jobs.size(), run.threads, [&](std::size_t k) {
    detail::Stopwatch clock;
    const Split split = detail::make_split(c, jobs[k].seed);
    const auto ntk_err = detail::ntk_test_error(
        detail::variant(c, Parameterization::NTK, jobs[k].widths), split, c.ridge);
    const auto imp_err = detail::ntk_test_error(
        detail::variant(c, Parameterization::ImprovedStandard, jobs[k].widths), split, c.ridge);
    std::vector<CsvCell> row{static_cast<unsigned long long>(jobs[k].seed), widths_label(jobs[k].widths),
                             static_cast<long long>(split.train.size()),
                             static_cast<long long>(split.test.size()), ntk_err.error, imp_err.error,
                             ntk_err.mse, imp_err.mse};
    return std::pair{std::move(row), clock.seconds()};
  });
  CsvTable table({"seed", "widths", "n_train", "n_test", "ntk_test_error", "improved_test_error",
                  "ntk_test_mse", "improved_test_mse"});
  for (std::size_t k = 0; k < rows.size(); ++k) {
    table.add_row(rows[k].first);
    journal.step("compare_" + std::to_string(k), rows[k].second);
  }
  table.write((out / "compare.csv").string());
  return table;
}

// ---- sweep-widths --------------------------------------------------------

inline CsvTable cmd_sweep_widths(const ExperimentConfig& c, const RunOptions& run = {}) {
  const fs::path out = detail::prepare_output(c);
  Journal journal(out, "sweep-widths", c.hash());
  struct Job {
    std::uint64_t seed;
    std::vector<std::size_t> widths;
  };
  std::vector<Job> jobs;
  for (auto seed : c.seeds)
    for (const auto& w : c.widths_sweep) jobs.push_back({seed, w});
  auto rows = ordered_parallel_map(jobs.size(), run.threads, [&](std::size_t k) {
    detail::Stopwatch clock;
    const Split split = detail::make_split(c, jobs[k].seed);
    const auto imp = detail::ntk_test_error(
        detail::variant(c, Parameterization::ImprovedStandard, jobs[k].widths), split, c.ridge);
    // NTK-parameterized baseline at the spec's own widths (Nˡ does not enter it).
    const auto base = detail::ntk_test_error(
        detail::variant(c, Parameterization::NTK, hidden_widths(c.spec)), split, c.ridge);
    std::vector<CsvCell> row{static_cast<unsigned long long>(jobs[k].seed), widths_label(jobs[k].widths),
                             imp.error, imp.mse, base.error, base.mse};
    return std::pair{std::move(row), clock.seconds()};
  });
  CsvTable table({"seed", "widths", "improved_test_error", "improved_test_mse",
                  "ntk_baseline_error", "ntk_baseline_mse"});
  for (std::size_t k = 0; k < rows.size(); ++k) {
    table.add_row(rows[k].first);
    journal.step("sweep_" + std::to_string(k), rows[k].second);
  }
  table.write((out / "sweep_widths.csv").string());
  return table;
}

// ---- mc-validate ---------------------------------------------------------

inline CsvTable cmd_mc_validate(const ExperimentConfig& c, const RunOptions& run = {}) {
  const fs::path out = detail::prepare_output(c);
  Journal journal(out, "mc-validate", c.hash());
  CsvTable table({"seed", "parameterization", "widths", "s", "R", "nngp_rel_error",
                  "ntk_rel_error", "ntk_mean_diag", "critical_lr"});
  CsvTable slopes({"seed", "parameterization", "widths", "diag_slope", "critical_lr_slope"});
  for (auto seed : c.seeds) {
    const Split split = detail::make_split(c, seed);
    const Matrix& X = split.train.inputs;
    for (auto p : c.parameterizations)
      for (const auto& w : c.widths_sweep) {
        detail::Stopwatch clock;
        const NetworkSpec spec = detail::variant(c, p, w);
        const KernelState analytic = propagate(spec, X);
        std::vector<double> ss, diags, lrs;
        for (auto s : c.s_sweep) {
          const auto emp = empirical_kernels(spec, X, s, c.draws, derive_seed(seed, s),
                                             {.threads = run.threads});
          const double nngp_err = relative_frobenius_error(emp.nngp_hat, analytic.nngp);
          const double ntk_err = analytic.divergent()
                                     ? std::numeric_limits<double>::quiet_NaN()
                                     : relative_frobenius_error(emp.ntk_hat, *analytic.ntk);
          const double diag = emp.ntk_hat.diagonal().mean();
          const double lr = critical_lr(emp.ntk_hat);
          table.add(static_cast<unsigned long long>(seed), std::string(to_string(p)), widths_label(w), s,
                    c.draws, nngp_err, ntk_err, diag, lr);
          ss.push_back(static_cast<double>(s));
          diags.push_back(diag);
          lrs.push_back(lr);
        }
        if (p == Parameterization::NaiveStandard)
          slopes.add(static_cast<unsigned long long>(seed), std::string(to_string(p)), widths_label(w),
                     ss.size() > 1 ? loglog_slope(ss, diags) : std::numeric_limits<double>::quiet_NaN(),
                     ss.size() > 1 ? loglog_slope(ss, lrs) : std::numeric_limits<double>::quiet_NaN());
        journal.step(std::string("mc_") + std::string(to_string(p)) + "_" + widths_label(w),
                     clock.seconds());
      }
  }
  table.write((out / "mc_validate.csv").string());
  if (slopes.size()) slopes.write((out / "mc_naive_slope.csv").string());
  return table;
}

// ---- train-finite --------------------------------------------------------

// Grid learning rate actually applied: standard parameterizations divide by
// the largest hidden baseline width.
inline double effective_lr(double grid_lr, Parameterization p, const std::vector<std::size_t>& widths) {
  if (p == Parameterization::NTK || widths.empty()) return grid_lr;
  return grid_lr / static_cast<double>(*std::max_element(widths.begin(), widths.end()));
}

inline CsvTable cmd_train_finite(const ExperimentConfig& c, const RunOptions& run = {}) {
  const fs::path out = detail::prepare_output(c);
  fs::create_directories(out / "traces");
  Journal journal(out, "train-finite", c.hash());
  struct Job {
    std::uint64_t seed;
    Parameterization p;
    std::vector<std::size_t> widths;
    double grid_lr;
  };
  std::vector<Job> jobs;
  for (auto seed : c.seeds)
    for (auto p : c.parameterizations)
      for (const auto& w : c.widths_sweep)
        for (double lr : c.lr_grid) jobs.push_back({seed, p, w, lr});

  auto rows = ordered_parallel_map(jobs.size(), run.threads, [&](std::size_t k) {
    detail::Stopwatch clock;
    const Job& job = jobs[k];
    const Split split = detail::make_split(c, job.seed);
    const NetworkSpec spec = detail::variant(c, job.p, job.widths);
    if (spec.layers.back().base_width != split.train.classes())
      throw SpecError("readout width " + std::to_string(spec.layers.back().base_width) +
                      " does not match " + std::to_string(split.train.classes()) + " classes");
    // Weights are re-drawn for every grid point from a seed derived from the
    // run seed and the grid index.
    const std::uint64_t init_seed = derive_seed(job.seed, k);
    FiniteNet net = FiniteNet::init(spec, c.train_scale, init_seed);
    const double lr = effective_lr(job.grid_lr, job.p, job.widths);
    const TrainingTrace trace =
        sgd_train(net, split.train, &split.test,
                  {.lr = lr, .batch = c.batch, .epochs = c.epochs, .seed = derive_seed(init_seed, 1)});
    const std::string trace_file = "traces/trace_" + std::to_string(k) + ".csv";
    trace.table().write((out / trace_file).string());
    const auto& last = trace.records.back();
    std::vector<CsvCell> row{static_cast<unsigned long long>(job.seed), std::string(to_string(job.p)),
                             widths_label(job.widths), static_cast<long long>(c.train_scale),
                             job.grid_lr, lr, static_cast<unsigned long long>(init_seed), trace.best_val_error(),
                             last.train_loss, 1.0 - last.val_acc,
                             static_cast<long long>(last.epoch), static_cast<long long>(trace.diverged),
                             trace_file};
    return std::pair{std::move(row), clock.seconds()};
  });
  CsvTable table({"seed", "parameterization", "widths", "s", "lr_grid", "lr", "init_seed",
                  "best_val_error", "final_train_loss", "final_val_error", "epochs_run", "diverged",
                  "trace_file"});
  for (std::size_t k = 0; k < rows.size(); ++k) {
    table.add_row(rows[k].first);
    journal.step("train_" + std::to_string(k), rows[k].second);
  }
  table.write((out / "train_finite.csv").string());
  return table;
}

}  // namespace ntk
