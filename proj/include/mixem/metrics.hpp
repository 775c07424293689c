#pragma once

// Evaluation metrics and plot data: the relative distance D to the true noise
// parameters, corner-style marginal histograms of posterior samples and
// thinned convergence traces, plus their CSV files.

#include "mixem/em_driver.hpp"
#include "mixem/forward_op.hpp"
#include "mixem/losses.hpp"
#include "mixem/noise_model.hpp"

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace mixem {

/// |a - a_true| / a_true + |b - b_true| / b_true. Throws std::invalid_argument
/// unless both true values are strictly positive.
[[nodiscard]] double distance_ab(const NoiseParams& theta, const NoiseParams& truth);

/// bins + 1 equispaced edges over [lo, hi].
[[nodiscard]] std::vector<double> bin_edges(double lo, double hi, int bins);
/// Bin of x; values outside [lo, hi] go to the nearest edge bin.
[[nodiscard]] int bin_of(double x, double lo, double hi, int bins) noexcept;

struct Histogram1D {
  Index dim = 0;
  std::vector<double> edges;
  std::vector<long> counts;
  std::optional<double> truth;

  [[nodiscard]] long total() const;
};

struct Histogram2D {
  Index dim_i = 0;
  Index dim_j = 0;
  std::vector<double> edges_i;
  std::vector<double> edges_j;
  std::vector<long> counts; ///< row-major, counts[bi * bins_j + bj]
  std::optional<std::pair<double, double>> truth;

  [[nodiscard]] long total() const;
};

struct Marginals {
  std::vector<Histogram1D> diagonal;
  std::vector<Histogram2D> pairs; ///< (i, j) with i < j, lexicographic
};

/// 1-D histograms per coordinate and 2-D histograms per coordinate pair, all
/// over the prior box. Samples are columns.
[[nodiscard]] Marginals marginal_histograms(const Mat& samples, const Box& box, int bins = 50,
                                            int bins_2d = 40,
                                            const std::optional<Vec>& truth = std::nullopt);

struct TracePoint {
  int iter = 0;
  double a = 0.0;
  double b = 0.0;
  double elbo = 0.0;
};

/// Rows whose iteration is a multiple of `thin`.
[[nodiscard]] std::vector<TracePoint> trace_export(const std::vector<TraceRow>& trace, int thin = 20);

/// Provenance line written as the first line of every CSV file.
struct FileHeader {
  std::string config_hash;
  std::uint64_t seed = 0;

  [[nodiscard]] std::string line() const;
};

[[nodiscard]] std::string trace_csv(const std::vector<TracePoint>& rows, const FileHeader& header);
[[nodiscard]] std::vector<TracePoint> parse_trace_csv(const std::string& text);
[[nodiscard]] std::string marginals_csv(const Marginals& m, const FileHeader& header);
[[nodiscard]] std::string pairs_csv(const Marginals& m, const FileHeader& header);

struct MetricReport {
  std::string method;
  Index count = 0; ///< N
  std::uint64_t seed = 0;
  std::string config_hash;
  NoiseParams theta;
  std::optional<NoiseParams> truth;
  std::optional<double> distance;
  ElboEstimate elbo;
  int best_iter = 0;
  std::vector<TracePoint> trace;
};

[[nodiscard]] Json to_json(const MetricReport& r);
[[nodiscard]] MetricReport metric_report_from_json(const Json& doc);

/// Median; the mean of the two middle values for even sizes.
[[nodiscard]] double median(std::vector<double> xs);

} // namespace mixem
