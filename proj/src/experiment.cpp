#include "mixem/experiment.hpp"

#include <algorithm>
#include <atomic>
#include <exception>
#include <iostream>
#include <map>
#include <mutex>
#include <thread>

namespace mixem {

namespace fs = std::filesystem;

namespace {

constexpr std::uint64_t kMeasureStream = 0x6d656173ULL;
constexpr std::uint64_t kFlowStream = 0x666c6f77ULL;
constexpr std::uint64_t kHistStream = 0x68697374ULL;

bool is_grid(const std::string& method) { return method.rfind("grid-", 0) == 0; }

LossKind method_loss(const std::string& method) {
  return loss_kind_from_string(is_grid(method) ? method.substr(5) : method);
}

void check_keys(const Json& base, const Json& doc, const std::string& where) {
  if (!doc.is_object()) return;
  for (const auto& [key, value] : doc.items()) {
    if (!base.contains(key)) throw ConfigError("unknown config key '" + where + key + "'");
    if (base.at(key).is_object()) check_keys(base.at(key), value, where + key + ".");
  }
}

void overlay(Json& base, const Json& doc) {
  for (const auto& [key, value] : doc.items()) {
    if (value.is_object() && base.at(key).is_object()) {
      overlay(base.at(key), value);
    } else {
      base[key] = value;
    }
  }
}

Json em_json(const EMConfig& em) {
  return {{"outer_iterations", em.outer_iterations},
          {"estep_steps", em.estep_steps},
          {"inner_steps", em.inner_steps},
          {"posterior_samples", em.posterior_samples},
          {"elbo_samples", em.elbo_samples},
          {"validate_every", em.validate_every},
          {"forward_batch", em.forward_batch},
          {"reverse_batch", em.reverse_batch},
          {"learning_rate", em.learning_rate},
          {"clip_norm", em.clip_norm},
          {"init_factor", em.init_factor},
          {"flow",
           {{"blocks", em.flow.blocks},
            {"hidden", em.flow.hidden},
            {"scale_clamp", em.flow.scale_clamp},
            {"activation", to_string(em.flow.activation)},
            {"init_noise", em.flow.init_noise}}}};
}

EMConfig em_from(const Json& j) {
  EMConfig em;
  em.outer_iterations = j.at("outer_iterations").get<int>();
  em.estep_steps = j.at("estep_steps").get<int>();
  em.inner_steps = j.at("inner_steps").get<int>();
  em.posterior_samples = j.at("posterior_samples").get<Index>();
  em.elbo_samples = j.at("elbo_samples").get<Index>();
  em.validate_every = j.at("validate_every").get<int>();
  em.forward_batch = j.at("forward_batch").get<Index>();
  em.reverse_batch = j.at("reverse_batch").get<Index>();
  em.learning_rate = j.at("learning_rate").get<double>();
  em.clip_norm = j.at("clip_norm").get<double>();
  em.init_factor = j.at("init_factor").get<double>();
  const auto& f = j.at("flow");
  em.flow.blocks = f.at("blocks").get<int>();
  em.flow.hidden = f.at("hidden").get<std::vector<Index>>();
  em.flow.scale_clamp = f.at("scale_clamp").get<double>();
  em.flow.activation = activation_from_string(f.at("activation").get<std::string>());
  em.flow.init_noise = f.at("init_noise").get<double>();
  return em;
}

std::vector<double> to_std(const Vec& v) { return {v.data(), v.data() + v.size()}; }

Vec from_std(const std::vector<double>& v) {
  Vec out(static_cast<Index>(v.size()));
  std::copy(v.begin(), v.end(), out.data());
  return out;
}

template <class Fn>
std::vector<CellOutcome> run_cells(const ExperimentConfig& cfg, const std::vector<std::string>& methods,
                                   Fn&& fn) {
  struct Task {
    std::string method;
    Cell cell;
  };
  std::vector<Task> tasks;
  for (const auto& m : methods) {
    for (const auto& c : cells(cfg)) tasks.push_back({m, c});
  }
  std::vector<CellOutcome> out(tasks.size());
  std::atomic<std::size_t> next{0};
  std::exception_ptr config_error;
  std::mutex mu;
  auto worker = [&] {
    for (std::size_t i = next++; i < tasks.size(); i = next++) {
      try {
        out[i] = fn(tasks[i].method, tasks[i].cell);
      } catch (const ConfigError&) {
        const std::lock_guard lock(mu);
        if (!config_error) config_error = std::current_exception();
        next = tasks.size();
        continue;
      }
      const std::lock_guard lock(mu);
      const auto& o = out[i];
      std::cerr << "[" << o.method << "] N=" << o.cell.count << " seed=" << o.cell.seed << ": ";
      if (o.report) {
        std::cerr << "a=" << o.report->theta.a << " b=" << o.report->theta.b;
        if (o.report->distance) std::cerr << " D=" << *o.report->distance;
        std::cerr << " elbo=" << o.report->elbo.value << "\n";
      } else {
        std::cerr << "FAILED " << o.error << "\n";
      }
    }
  };
  const int jobs = std::max(1, std::min<int>(cfg.jobs, static_cast<int>(tasks.size())));
  if (jobs == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (int j = 0; j < jobs; ++j) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }
  if (config_error) std::rethrow_exception(config_error);
  return out;
}

void write_aggregate(const ExperimentConfig& cfg, const std::vector<CellOutcome>& outcomes) {
  const FileHeader header{config_hash(cfg), cfg.seed_base};
  std::string csv = header.line() + "method,N,runs,failed,median_D,median_elbo\n";
  Json doc = Json::array();
  for (const auto& method : cfg.methods()) {
    for (const Index count : cfg.counts) {
      std::vector<double> ds;
      std::vector<double> elbos;
      int failed = 0;
      for (const auto& o : outcomes) {
        if (o.method != method || o.cell.count != count) continue;
        if (!o.report) {
          ++failed;
          continue;
        }
        if (o.report->distance) ds.push_back(*o.report->distance);
        elbos.push_back(o.report->elbo.value);
      }
      const std::string md = ds.empty() ? "nan" : format_double(median(ds));
      const std::string me = elbos.empty() ? "nan" : format_double(median(elbos));
      csv += method + ',' + std::to_string(count) + ',' + std::to_string(elbos.size()) + ',' +
             std::to_string(failed) + ',' + md + ',' + me + '\n';
      doc.push_back({{"method", method},
                     {"N", count},
                     {"runs", elbos.size()},
                     {"failed", failed},
                     {"median_D", ds.empty() ? Json(nullptr) : Json(median(ds))},
                     {"median_elbo", elbos.empty() ? Json(nullptr) : Json(median(elbos))}});
    }
  }
  const fs::path dir = fs::path(cfg.out) / "summary";
  const std::string stem = is_grid(cfg.method) ? "grid_aggregate" : "fit_aggregate";
  write_text_file(dir / (stem + ".csv"), csv);
  write_text_file(dir / (stem + ".json"),
                  dump_precise({{"config_hash", header.config_hash}, {"seed_base", cfg.seed_base}, {"rows", doc}}));
}

void write_histograms(const fs::path& dir, const ConditionalFlow& flow, const MeasurementSet& ms,
                      const ExperimentConfig& cfg, const Cell& cell, const FileHeader& header) {
  Rng rng(mix_seed(cell.seed, kHistStream));
  const Mat xs = sample_posterior(flow, ms.ys.col(0), cfg.report.hist_samples, rng);
  std::optional<Vec> truth;
  if (ms.truth) truth = Vec(ms.truth->xs.col(0));
  const Marginals m = marginal_histograms(xs, ms.prior_box, cfg.report.hist_bins,
                                          cfg.report.hist_bins_2d, truth);
  write_text_file(dir / "marginals.csv", marginals_csv(m, header));
  write_text_file(dir / "pairs.csv", pairs_csv(m, header));
}

Json report_document(const MetricReport& r, const Json& extra) {
  Json doc = to_json(r);
  for (const auto& [k, v] : extra.items()) doc[k] = v;
  return doc;
}

} // namespace

void ExperimentConfig::validate() const {
  const auto fail = [](const std::string& m) { throw ConfigError(m); };
  if (counts.empty()) fail("counts (the N list) must be non-empty");
  for (const Index c : counts) {
    if (c < 1) fail("every N must be positive");
  }
  if (seeds < 1) fail("seeds must be >= 1");
  if (method != "forward" && method != "reverse" && method != "grid-forward" &&
      method != "grid-reverse") {
    fail("method must be forward, reverse, grid-forward or grid-reverse (got '" + method + "')");
  }
  if (problem.d < 1 || problem.n < 1) fail("problem dimensions must be positive");
  if (!(problem.box_hi > problem.box_lo)) fail("problem box must have box_hi > box_lo");
  if (!(problem.prior_smoothness > 0.0)) fail("prior_smoothness must be positive");
  if (!(theta_true.a > 0.0) || !(theta_true.b > 0.0)) fail("theta_true must be positive");
  if (report.trace_thin < 1 || report.hist_bins < 2 || report.hist_bins_2d < 2 ||
      report.hist_samples < 1) {
    fail("report options out of range");
  }
  if (checkpoint_every < 1 || jobs < 1) fail("checkpoint_every and jobs must be >= 1");
  try {
    em.validate(*std::max_element(counts.begin(), counts.end()));
    grid.validate();
  } catch (const std::invalid_argument& e) {
    fail(e.what());
  }
}

std::vector<std::string> ExperimentConfig::methods() const { return {method}; }

std::vector<std::string> preset_names() { return {"desk", "photomask", "linegrating"}; }

ExperimentConfig preset(const std::string& name) {
  ExperimentConfig cfg;
  cfg.preset = name;
  cfg.grid = GridConfig::standard();
  if (name == "desk") {
    cfg.em = EMConfig::desk();
    cfg.seeds = 5;
  } else if (name == "photomask") {
    cfg.em = EMConfig::full();
    cfg.seeds = 10;
  } else if (name == "linegrating") {
    cfg.em = EMConfig::full();
    cfg.seeds = 10;
    cfg.problem.d = 7;
    cfg.problem.n = 77;
    cfg.problem.generator_seed = 11;
    cfg.problem.box_lo = 0.0;
    cfg.problem.box_hi = 1.0;
    cfg.theta_true = {0.03, 0.25};
  } else {
    throw ConfigError("unknown preset '" + name + "' (desk|photomask|linegrating)");
  }
  return cfg;
}

Json to_json(const ExperimentConfig& cfg) {
  const auto& p = cfg.problem;
  return {{"preset", cfg.preset},
          {"problem",
           {{"surrogate", p.surrogate ? Json(*p.surrogate) : Json(nullptr)},
            {"d", p.d},
            {"n", p.n},
            {"hidden", p.hidden},
            {"generator_seed", p.generator_seed},
            {"box_lo", p.box_lo},
            {"box_hi", p.box_hi},
            {"prior_smoothness", p.prior_smoothness}}},
          {"theta_true", {{"a", cfg.theta_true.a}, {"b", cfg.theta_true.b}}},
          {"counts", cfg.counts},
          {"seeds", cfg.seeds},
          {"seed_base", cfg.seed_base},
          {"method", cfg.method},
          {"em", em_json(cfg.em)},
          {"grid",
           {{"a", to_std(cfg.grid.a_grid)},
            {"b", to_std(cfg.grid.b_grid)},
            {"steps_per_point", cfg.grid.steps_per_point}}},
          {"report",
           {{"trace_thin", cfg.report.trace_thin},
            {"hist_bins", cfg.report.hist_bins},
            {"hist_bins_2d", cfg.report.hist_bins_2d},
            {"hist_samples", cfg.report.hist_samples}}},
          {"checkpoint_every", cfg.checkpoint_every},
          {"out", cfg.out},
          {"jobs", cfg.jobs}};
}

ExperimentConfig experiment_config_from_json(const Json& doc, const std::string& fallback_preset) {
  if (!doc.is_object()) throw ConfigError("config must be a JSON object");
  try {
    const std::string name = doc.value("preset", fallback_preset);
    Json merged = to_json(preset(name));
    check_keys(merged, doc, "");
    overlay(merged, doc);
    ExperimentConfig cfg;
    cfg.preset = name;
    const auto& p = merged.at("problem");
    if (!p.at("surrogate").is_null()) cfg.problem.surrogate = p.at("surrogate").get<std::string>();
    cfg.problem.d = p.at("d").get<Index>();
    cfg.problem.n = p.at("n").get<Index>();
    cfg.problem.hidden = p.at("hidden").get<std::vector<Index>>();
    cfg.problem.generator_seed = p.at("generator_seed").get<std::uint64_t>();
    cfg.problem.box_lo = p.at("box_lo").get<double>();
    cfg.problem.box_hi = p.at("box_hi").get<double>();
    cfg.problem.prior_smoothness = p.at("prior_smoothness").get<double>();
    cfg.theta_true = {merged.at("theta_true").at("a").get<double>(),
                      merged.at("theta_true").at("b").get<double>()};
    cfg.counts = merged.at("counts").get<std::vector<Index>>();
    cfg.seeds = merged.at("seeds").get<int>();
    cfg.seed_base = merged.at("seed_base").get<std::uint64_t>();
    cfg.method = merged.at("method").get<std::string>();
    cfg.em = em_from(merged.at("em"));
    cfg.grid.a_grid = from_std(merged.at("grid").at("a").get<std::vector<double>>());
    cfg.grid.b_grid = from_std(merged.at("grid").at("b").get<std::vector<double>>());
    cfg.grid.steps_per_point = merged.at("grid").at("steps_per_point").get<int>();
    const auto& r = merged.at("report");
    cfg.report = {r.at("trace_thin").get<int>(), r.at("hist_bins").get<int>(),
                  r.at("hist_bins_2d").get<int>(), r.at("hist_samples").get<Index>()};
    cfg.checkpoint_every = merged.at("checkpoint_every").get<int>();
    cfg.out = merged.at("out").get<std::string>();
    cfg.jobs = merged.at("jobs").get<int>();
    cfg.validate();
    return cfg;
  } catch (const Json::exception& e) {
    throw ConfigError(std::string("config: ") + e.what());
  } catch (const std::invalid_argument& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
}

std::string config_hash(const ExperimentConfig& cfg) {
  Json doc = to_json(cfg);
  doc.erase("out");
  doc.erase("jobs");
  return hex64(fnv1a(dump_precise(doc, -1)));
}

std::vector<Cell> cells(const ExperimentConfig& cfg) {
  std::vector<Cell> out;
  for (const Index count : cfg.counts) {
    for (int s = 0; s < cfg.seeds; ++s) {
      const std::size_t index = out.size();
      out.push_back({index, count, cfg.seed_base + index});
    }
  }
  return out;
}

fs::path measurement_path(const ExperimentConfig& cfg, const Cell& cell) {
  return fs::path(cfg.out) / "measurements" /
         ("N" + std::to_string(cell.count) + "_seed" + std::to_string(cell.seed) + ".json");
}

fs::path run_dir(const ExperimentConfig& cfg, const std::string& method, const Cell& cell) {
  return fs::path(cfg.out) / "runs" /
         (method + "_N" + std::to_string(cell.count) + "_seed" + std::to_string(cell.seed));
}

fs::path surrogate_path(const ExperimentConfig& cfg) {
  if (cfg.problem.surrogate) return *cfg.problem.surrogate;
  return fs::path(cfg.out) / "surrogate.json";
}

ForwardOperator problem_operator(const ExperimentConfig& cfg) {
  const auto& p = cfg.problem;
  if (p.surrogate) {
    ForwardOperator op = [&] {
      try {
        return load_surrogate(*p.surrogate);
      } catch (const std::exception& e) {
        throw ConfigError(e.what());
      }
    }();
    if (op.input_dim() != p.d || op.output_dim() != p.n) {
      throw ConfigError(*p.surrogate + ": surrogate dimensions do not match problem.d / problem.n");
    }
    return op;
  }
  return make_random_surrogate(p.d, p.n, p.hidden, p.generator_seed,
                               Box::cube(p.d, p.box_lo, p.box_hi));
}

std::vector<fs::path> cmd_simulate(const ExperimentConfig& cfg) {
  cfg.validate();
  const ForwardOperator op = problem_operator(cfg);
  const Box box = Box::cube(cfg.problem.d, cfg.problem.box_lo, cfg.problem.box_hi);
  std::vector<fs::path> written;
  if (!cfg.problem.surrogate) {
    save_surrogate(op, surrogate_path(cfg));
    written.push_back(surrogate_path(cfg));
  }
  for (const auto& cell : cells(cfg)) {
    const MeasurementSet ms = simulate_measurements(op, cfg.theta_true, box, cell.count,
                                                    mix_seed(cell.seed, kMeasureStream));
    save_measurements(ms, measurement_path(cfg, cell));
    written.push_back(measurement_path(cfg, cell));
  }
  return written;
}

CellOutcome fit_cell(const ExperimentConfig& cfg, const std::string& method, const Cell& cell) {
  CellOutcome outcome{cell, method, std::nullopt, {}};
  const fs::path mpath = measurement_path(cfg, cell);
  if (!fs::exists(mpath)) {
    throw ConfigError(mpath.string() + ": measurement file missing (run simulate first)");
  }
  const MeasurementSet ms = load_measurements(mpath);
  const ForwardOperator op = problem_operator(cfg);
  if (ms.d != op.input_dim() || ms.n() != op.output_dim()) {
    throw ConfigError(mpath.string() + ": measurements do not match the configured problem");
  }
  const Prior prior = Prior::smooth_box(ms.prior_box, cfg.problem.prior_smoothness);
  const FileHeader header{config_hash(cfg), cell.seed};
  EMConfig em = cfg.em;
  em.loss = method_loss(method);
  em.seed = cell.seed;
  const fs::path dir = run_dir(cfg, method, cell);
  fs::remove(dir / "failed.json");

  MetricReport report;
  report.method = method;
  report.count = cell.count;
  report.seed = cell.seed;
  report.config_hash = header.config_hash;
  if (ms.truth) report.truth = ms.truth->theta;
  Json extra = {{"measurements", mpath.string()}};

  try {
    if (is_grid(method)) {
      const GridResult res = run_grid(op, prior, ms.ys, cfg.grid, em);
      std::string csv = header.line() + "a,b,elbo,elbo_se\n";
      for (const auto& c : res.table) {
        csv += format_double(c.theta.a) + ',' + format_double(c.theta.b) + ',' +
               format_double(c.elbo.value) + ',' + format_double(c.elbo.std_error) + '\n';
      }
      write_text_file(dir / "elbo_grid.csv", csv);
      save_flow(res.best_flow, dir / "best_flow.json");
      report.theta = res.best_theta;
      report.elbo = res.table[res.best_index].elbo;
      write_histograms(dir, res.best_flow, ms, cfg, cell, header);
    } else {
      const fs::path ckpt = dir / "checkpoint.json";
      std::optional<EMState> resumed;
      if (fs::exists(ckpt)) {
        const Json doc = read_json_file(ckpt);
        if (doc.value("config_hash", "") == header.config_hash &&
            doc.value("seed", std::uint64_t{0}) == cell.seed) {
          resumed = em_state_from_json(doc.at("state"));
        }
      }
      EMState start = resumed ? std::move(*resumed) : [&] {
        ConditionalFlow flow(op.input_dim(), op.output_dim(), em.flow, mix_seed(cell.seed, kFlowStream));
        return start_em(std::move(flow), init_theta(ms.ys, em.init_factor), em);
      }();
      const auto save = [&](const EMState& s, const fs::path& path) {
        write_text_file(path, dump_precise({{"config_hash", header.config_hash},
                                            {"seed", cell.seed},
                                            {"state", to_json(s)}}));
      };
      const EMState state = run_em(op, prior, ms.ys, std::move(start), em, [&](const EMState& s) {
        if (s.iteration % cfg.checkpoint_every == 0 && s.iteration < em.outer_iterations) save(s, ckpt);
      });
      save(state, ckpt);
      EMState best = state;
      best.flow.set_params(state.best->params);
      best.theta = state.best->theta;
      best.iteration = state.best->iter;
      save(best, dir / "best.json");
      report.theta = state.best->theta;
      report.best_iter = state.best->iter;
      const auto row = std::find_if(state.trace.begin(), state.trace.end(),
                                    [&](const TraceRow& t) { return t.iter == state.best->iter; });
      report.elbo = {state.best->elbo, em.elbo_samples, row->elbo_se};
      report.trace = trace_export(state.trace, cfg.report.trace_thin);
      write_text_file(dir / "trace.csv", trace_csv(report.trace, header));
      write_histograms(dir, best.flow, ms, cfg, cell, header);
      extra["final_theta"] = {{"a", state.theta.a}, {"b", state.theta.b}};
      extra["final_elbo"] = state.trace.back().elbo;
    }
    if (report.truth) report.distance = distance_ab(report.theta, *report.truth);
    write_text_file(dir / "report.json", dump_precise(report_document(report, extra)));
    outcome.report = std::move(report);
  } catch (const EMAborted& e) {
    outcome.error = e.what();
    write_text_file(dir / "abort_state.json", dump_precise(e.dump()));
  } catch (const ConfigError&) {
    throw;
  } catch (const std::exception& e) {
    outcome.error = e.what();
  }
  if (!outcome.report) {
    fs::remove(dir / "report.json");
    write_text_file(dir / "failed.json",
                    dump_precise({{"config_hash", header.config_hash},
                                  {"seed", cell.seed},
                                  {"method", method},
                                  {"N", cell.count},
                                  {"error", outcome.error}}));
  }
  return outcome;
}

std::vector<CellOutcome> cmd_fit(const ExperimentConfig& cfg) {
  cfg.validate();
  if (is_grid(cfg.method)) throw ConfigError("fit runs forward or reverse; use the grid command for " + cfg.method);
  auto out = run_cells(cfg, cfg.methods(),
                       [&](const std::string& m, const Cell& c) { return fit_cell(cfg, m, c); });
  write_aggregate(cfg, out);
  return out;
}

std::vector<CellOutcome> cmd_grid(const ExperimentConfig& cfg) {
  cfg.validate();
  if (!is_grid(cfg.method)) throw ConfigError("grid needs method grid-forward or grid-reverse");
  auto out = run_cells(cfg, cfg.methods(),
                       [&](const std::string& m, const Cell& c) { return fit_cell(cfg, m, c); });
  write_aggregate(cfg, out);
  return out;
}

MergeResult cmd_report(const fs::path& out) {
  MergeResult res;
  const fs::path runs = out / "runs";
  std::vector<fs::path> dirs;
  if (fs::is_directory(runs)) {
    for (const auto& e : fs::directory_iterator(runs)) {
      if (e.is_directory()) dirs.push_back(e.path());
    }
  }
  std::sort(dirs.begin(), dirs.end());
  for (const auto& dir : dirs) {
    const fs::path file = dir / "report.json";
    if (!fs::exists(file)) {
      res.corrupt.push_back(file.string() + ": missing");
      continue;
    }
    try {
      res.reports.push_back(metric_report_from_json(read_json_file(file)));
    } catch (const std::exception& e) {
      res.corrupt.push_back(file.string() + ": " + e.what());
    }
  }
  if (res.reports.empty()) {
    std::string msg = "nothing to merge under " + runs.string();
    for (const auto& c : res.corrupt) msg += "\n  " + c;
    throw std::runtime_error(msg);
  }
  std::string hash = res.reports.front().config_hash;
  for (const auto& r : res.reports) {
    if (r.config_hash != hash) hash = "mixed";
  }
  std::uint64_t seed = res.reports.front().seed;
  for (const auto& r : res.reports) seed = std::min(seed, r.seed);
  const FileHeader header{hash, seed};

  std::string runs_csv = header.line() + "method,N,seed,a,b,D,elbo,elbo_se\n";
  std::string traces_csv = header.line() + "method,N,seed,iter,a,b,elbo\n";
  std::map<std::pair<std::string, Index>, std::pair<std::vector<double>, std::vector<double>>> groups;
  Json all = Json::array();
  for (const auto& r : res.reports) {
    runs_csv += r.method + ',' + std::to_string(r.count) + ',' + std::to_string(r.seed) + ',' +
                format_double(r.theta.a) + ',' + format_double(r.theta.b) + ',' +
                (r.distance ? format_double(*r.distance) : "nan") + ',' + format_double(r.elbo.value) +
                ',' + format_double(r.elbo.std_error) + '\n';
    for (const auto& t : r.trace) {
      traces_csv += r.method + ',' + std::to_string(r.count) + ',' + std::to_string(r.seed) + ',' +
                    std::to_string(t.iter) + ',' + format_double(t.a) + ',' + format_double(t.b) +
                    ',' + format_double(t.elbo) + '\n';
    }
    auto& g = groups[{r.method, r.count}];
    if (r.distance) g.first.push_back(*r.distance);
    g.second.push_back(r.elbo.value);
    all.push_back(to_json(r));
  }
  std::string series = header.line() + "method,N,runs,median_D,median_elbo\n";
  Json series_doc = Json::array();
  for (const auto& [key, g] : groups) {
    const std::string md = g.first.empty() ? "nan" : format_double(median(g.first));
    series += key.first + ',' + std::to_string(key.second) + ',' + std::to_string(g.second.size()) +
              ',' + md + ',' + format_double(median(g.second)) + '\n';
    series_doc.push_back({{"method", key.first},
                          {"N", key.second},
                          {"runs", g.second.size()},
                          {"median_D", g.first.empty() ? Json(nullptr) : Json(median(g.first))},
                          {"median_elbo", median(g.second)}});
  }
  Json histograms = Json::array();
  for (const auto& dir : dirs) {
    if (fs::exists(dir / "marginals.csv")) histograms.push_back((dir / "marginals.csv").string());
  }
  const fs::path summary = out / "summary";
  write_text_file(summary / "runs.csv", runs_csv);
  write_text_file(summary / "traces.csv", traces_csv);
  write_text_file(summary / "d_vs_n.csv", series);
  write_text_file(summary / "summary.json", dump_precise({{"config_hash", hash},
                                                          {"runs", all},
                                                          {"d_vs_n", series_doc},
                                                          {"histograms", histograms},
                                                          {"corrupt", res.corrupt}}));
  return res;
}

} // namespace mixem
