#pragma once

// Experiment layer behind the command line: configuration with presets,
// measurement simulation, (N, seed) sweeps of EM or grid fits, and report
// merging. Everything a command writes lives under the configured output
// directory:
//
//   surrogate.json
//   measurements/N{N}_seed{s}.json
//   runs/{method}_N{N}_seed{s}/   report.json trace.csv marginals.csv ...
//   summary/

#include "mixem/em_driver.hpp"
#include "mixem/forward_op.hpp"
#include "mixem/metrics.hpp"

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace mixem {

/// Bad configuration or missing inputs; the CLI maps it to exit code 1.
class ConfigError : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

struct ProblemSpec {
  std::optional<std::string> surrogate; ///< existing surrogate file; generated when empty
  Index d = 3;
  Index n = 23;
  std::vector<Index> hidden{64, 64};
  std::uint64_t generator_seed = 7;
  double box_lo = -1.0;
  double box_hi = 1.0;
  double prior_smoothness = 50.0;
};

struct ReportOptions {
  int trace_thin = 20;
  int hist_bins = 50;
  int hist_bins_2d = 40;
  Index hist_samples = 10000;
};

struct ExperimentConfig {
  std::string preset = "desk";
  ProblemSpec problem;
  NoiseParams theta_true{0.005, 0.1};
  std::vector<Index> counts{1, 2, 4, 8};
  int seeds = 5;
  std::uint64_t seed_base = 1000;
  std::string method = "forward"; ///< forward | reverse | grid-forward | grid-reverse
  EMConfig em;
  GridConfig grid;
  ReportOptions report;
  int checkpoint_every = 50;
  std::string out = "mixem-out";
  int jobs = 1;

  void validate() const;
  [[nodiscard]] std::vector<std::string> methods() const;
};

[[nodiscard]] std::vector<std::string> preset_names();
[[nodiscard]] ExperimentConfig preset(const std::string& name);

[[nodiscard]] Json to_json(const ExperimentConfig& cfg);
/// Overlays `doc` on the preset named in doc["preset"] (or `fallback_preset`).
/// Unknown keys are rejected.
[[nodiscard]] ExperimentConfig experiment_config_from_json(const Json& doc,
                                                           const std::string& fallback_preset = "desk");

/// Hash of everything that influences results (the output directory and the
/// worker count are excluded).
[[nodiscard]] std::string config_hash(const ExperimentConfig& cfg);

struct Cell {
  std::size_t index = 0;
  Index count = 0;         ///< N
  std::uint64_t seed = 0;  ///< seed_base + index
};

/// Cells in N-major order.
[[nodiscard]] std::vector<Cell> cells(const ExperimentConfig& cfg);

[[nodiscard]] std::filesystem::path measurement_path(const ExperimentConfig& cfg, const Cell& cell);
[[nodiscard]] std::filesystem::path run_dir(const ExperimentConfig& cfg, const std::string& method,
                                            const Cell& cell);
[[nodiscard]] std::filesystem::path surrogate_path(const ExperimentConfig& cfg);

[[nodiscard]] ForwardOperator problem_operator(const ExperimentConfig& cfg);

struct CellOutcome {
  Cell cell;
  std::string method;
  std::optional<MetricReport> report;
  std::string error;
};

/// Writes the surrogate (when generated) and one measurement file per cell.
std::vector<std::filesystem::path> cmd_simulate(const ExperimentConfig& cfg);
/// EM fit per cell for the forward/reverse methods, then per-N medians.
std::vector<CellOutcome> cmd_fit(const ExperimentConfig& cfg);
/// Grid baseline per cell for the grid-forward/grid-reverse methods.
std::vector<CellOutcome> cmd_grid(const ExperimentConfig& cfg);

struct MergeResult {
  std::vector<MetricReport> reports;
  std::vector<std::string> corrupt;
};

/// Merges every runs/*/report.json under `out` into summary/ files.
MergeResult cmd_report(const std::filesystem::path& out);

/// Single fit cell; exposed for tests.
[[nodiscard]] CellOutcome fit_cell(const ExperimentConfig& cfg, const std::string& method,
                                   const Cell& cell);

} // namespace mixem
