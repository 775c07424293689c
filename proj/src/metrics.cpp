#include "mixem/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>
#include <stdexcept>

namespace mixem {

double distance_ab(const NoiseParams& theta, const NoiseParams& truth) {
  if (!(truth.a > 0.0) || !(truth.b > 0.0)) {
    throw std::invalid_argument("distance_ab: true a and b must be strictly positive");
  }
  return std::abs(theta.a - truth.a) / truth.a + std::abs(theta.b - truth.b) / truth.b;
}

std::vector<double> bin_edges(double lo, double hi, int bins) {
  if (bins < 1 || !(hi > lo)) throw std::invalid_argument("bin_edges: need bins >= 1 and hi > lo");
  std::vector<double> edges(static_cast<std::size_t>(bins) + 1);
  for (int k = 0; k <= bins; ++k) edges[static_cast<std::size_t>(k)] = lo + (hi - lo) * k / bins;
  edges.back() = hi;
  return edges;
}

int bin_of(double x, double lo, double hi, int bins) noexcept {
  const double u = (x - lo) / (hi - lo) * bins;
  if (!(u > 0.0)) return 0;
  if (u >= bins) return bins - 1;
  return static_cast<int>(u);
}

long Histogram1D::total() const { return std::accumulate(counts.begin(), counts.end(), 0L); }
long Histogram2D::total() const { return std::accumulate(counts.begin(), counts.end(), 0L); }

Marginals marginal_histograms(const Mat& samples, const Box& box, int bins, int bins_2d,
                              const std::optional<Vec>& truth) {
  box.validate();
  if (samples.cols() == 0) throw std::invalid_argument("marginal_histograms: no samples");
  if (samples.rows() != box.dim()) throw std::invalid_argument("marginal_histograms: dimension mismatch");
  if (bins < 1 || bins_2d < 1) throw std::invalid_argument("marginal_histograms: bins must be positive");
  if (truth && truth->size() != box.dim()) throw std::invalid_argument("marginal_histograms: truth dimension");
  const Index d = box.dim();
  Marginals out;
  for (Index i = 0; i < d; ++i) {
    Histogram1D h;
    h.dim = i;
    h.edges = bin_edges(box.lo(i), box.hi(i), bins);
    h.counts.assign(static_cast<std::size_t>(bins), 0);
    for (Index k = 0; k < samples.cols(); ++k) {
      ++h.counts[static_cast<std::size_t>(bin_of(samples(i, k), box.lo(i), box.hi(i), bins))];
    }
    if (truth) h.truth = (*truth)(i);
    out.diagonal.push_back(std::move(h));
  }
  for (Index i = 0; i < d; ++i) {
    for (Index j = i + 1; j < d; ++j) {
      Histogram2D h;
      h.dim_i = i;
      h.dim_j = j;
      h.edges_i = bin_edges(box.lo(i), box.hi(i), bins_2d);
      h.edges_j = bin_edges(box.lo(j), box.hi(j), bins_2d);
      h.counts.assign(static_cast<std::size_t>(bins_2d) * static_cast<std::size_t>(bins_2d), 0);
      for (Index k = 0; k < samples.cols(); ++k) {
        const int bi = bin_of(samples(i, k), box.lo(i), box.hi(i), bins_2d);
        const int bj = bin_of(samples(j, k), box.lo(j), box.hi(j), bins_2d);
        ++h.counts[static_cast<std::size_t>(bi * bins_2d + bj)];
      }
      if (truth) h.truth = std::make_pair((*truth)(i), (*truth)(j));
      out.pairs.push_back(std::move(h));
    }
  }
  return out;
}

std::vector<TracePoint> trace_export(const std::vector<TraceRow>& trace, int thin) {
  if (trace.empty()) throw std::invalid_argument("trace_export: empty trace");
  if (thin < 1) throw std::invalid_argument("trace_export: thin must be >= 1");
  std::vector<TracePoint> rows;
  for (const auto& t : trace) {
    if (t.iter % thin == 0) rows.push_back({t.iter, t.theta.a, t.theta.b, t.elbo});
  }
  return rows;
}

std::string FileHeader::line() const {
  return "# config_hash=" + config_hash + ",seed=" + std::to_string(seed) + "\n";
}

std::string trace_csv(const std::vector<TracePoint>& rows, const FileHeader& header) {
  std::string s = header.line() + "iter,a,b,elbo\n";
  for (const auto& r : rows) {
    s += std::to_string(r.iter) + ',' + format_double(r.a) + ',' + format_double(r.b) + ',' +
         format_double(r.elbo) + '\n';
  }
  return s;
}

std::vector<TracePoint> parse_trace_csv(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  bool header_seen = false;
  std::vector<TracePoint> rows;
  while (std::getline(in, line)) {
    if (line.empty() || line[0] == '#') continue;
    if (!header_seen) {
      if (line != "iter,a,b,elbo") throw std::runtime_error("trace csv: unexpected header '" + line + "'");
      header_seen = true;
      continue;
    }
    std::istringstream fields(line);
    std::string cell;
    std::vector<std::string> cells;
    while (std::getline(fields, cell, ',')) cells.push_back(cell);
    if (cells.size() != 4) throw std::runtime_error("trace csv: malformed row '" + line + "'");
    try {
      rows.push_back({std::stoi(cells[0]), std::stod(cells[1]), std::stod(cells[2]), std::stod(cells[3])});
    } catch (const std::logic_error&) {
      throw std::runtime_error("trace csv: malformed row '" + line + "'");
    }
  }
  if (!header_seen) throw std::runtime_error("trace csv: missing header");
  return rows;
}

std::string marginals_csv(const Marginals& m, const FileHeader& header) {
  std::string s = header.line();
  std::string truth;
  for (const auto& h : m.diagonal) {
    if (h.truth) truth += (truth.empty() ? "" : ",") + format_double(*h.truth);
  }
  if (!truth.empty()) s += "# truth=" + truth + "\n";
  s += "dim,bin_lo,bin_hi,count\n";
  for (const auto& h : m.diagonal) {
    for (std::size_t k = 0; k < h.counts.size(); ++k) {
      s += std::to_string(h.dim) + ',' + format_double(h.edges[k]) + ',' +
           format_double(h.edges[k + 1]) + ',' + std::to_string(h.counts[k]) + '\n';
    }
  }
  return s;
}

std::string pairs_csv(const Marginals& m, const FileHeader& header) {
  std::string s = header.line() + "dim_i,dim_j,bin_i,bin_j,count\n";
  for (const auto& h : m.pairs) {
    const std::size_t nj = h.edges_j.size() - 1;
    for (std::size_t k = 0; k < h.counts.size(); ++k) {
      if (h.counts[k] == 0) continue;
      s += std::to_string(h.dim_i) + ',' + std::to_string(h.dim_j) + ',' + std::to_string(k / nj) +
           ',' + std::to_string(k % nj) + ',' + std::to_string(h.counts[k]) + '\n';
    }
  }
  return s;
}

Json to_json(const MetricReport& r) {
  Json doc;
  doc["format"] = "mixem-report";
  doc["method"] = r.method;
  doc["N"] = r.count;
  doc["seed"] = r.seed;
  doc["config_hash"] = r.config_hash;
  doc["theta"] = {{"a", r.theta.a}, {"b", r.theta.b}};
  doc["truth"] = r.truth ? Json{{"a", r.truth->a}, {"b", r.truth->b}} : Json(nullptr);
  doc["D"] = r.distance ? Json(*r.distance) : Json(nullptr);
  doc["elbo"] = {{"value", r.elbo.value}, {"m", r.elbo.m}, {"std_error", r.elbo.std_error}};
  doc["best_iter"] = r.best_iter;
  Json trace = Json::array();
  for (const auto& t : r.trace) trace.push_back({t.iter, t.a, t.b, t.elbo});
  doc["trace"] = std::move(trace);
  return doc;
}

MetricReport metric_report_from_json(const Json& doc) {
  if (doc.value("format", "") != "mixem-report") throw std::runtime_error("not a mixem report");
  MetricReport r;
  r.method = doc.at("method").get<std::string>();
  r.count = doc.at("N").get<Index>();
  r.seed = doc.at("seed").get<std::uint64_t>();
  r.config_hash = doc.at("config_hash").get<std::string>();
  r.theta = {doc.at("theta").at("a").get<double>(), doc.at("theta").at("b").get<double>()};
  if (!doc.at("truth").is_null()) {
    r.truth = NoiseParams{doc.at("truth").at("a").get<double>(), doc.at("truth").at("b").get<double>()};
  }
  if (!doc.at("D").is_null()) r.distance = doc.at("D").get<double>();
  const auto& e = doc.at("elbo");
  r.elbo = {e.at("value").get<double>(), e.at("m").get<Index>(), e.at("std_error").get<double>()};
  r.best_iter = doc.at("best_iter").get<int>();
  for (const auto& t : doc.at("trace")) {
    r.trace.push_back({t.at(0).get<int>(), t.at(1).get<double>(), t.at(2).get<double>(), t.at(3).get<double>()});
  }
  return r;
}

double median(std::vector<double> xs) {
  if (xs.empty()) throw std::invalid_argument("median of an empty set");
  std::sort(xs.begin(), xs.end());
  const std::size_t mid = xs.size() / 2;
  return xs.size() % 2 == 1 ? xs[mid] : 0.5 * (xs[mid - 1] + xs[mid]);
}

} // namespace mixem
