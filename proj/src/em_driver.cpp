#include "mixem/em_driver.hpp"

#include <algorithm>
#include <cmath>

namespace mixem {

namespace {

constexpr std::uint64_t kTrainStream = 0x747261696eULL;
constexpr std::uint64_t kValidStream = 0x76616c6964ULL;
constexpr std::uint64_t kInitStream = 0x696e6974ULL;

void check_problem(const ForwardOperator& op, const Prior& prior, const Mat& ys,
                   const ConditionalFlow& flow) {
  if (op.input_dim() != flow.dim() || prior.dim() != flow.dim()) {
    throw std::invalid_argument("operator, prior and flow disagree on the dimension of x");
  }
  if (op.output_dim() != ys.rows() || flow.cond_dim() != ys.rows()) {
    throw std::invalid_argument("operator, observations and flow disagree on the dimension of y");
  }
  if (ys.cols() < 1) throw std::invalid_argument("need at least one observation");
}

} // namespace

std::string to_string(LossKind kind) { return kind == LossKind::Forward ? "forward" : "reverse"; }

LossKind loss_kind_from_string(std::string_view name) {
  if (name == "forward") return LossKind::Forward;
  if (name == "reverse") return LossKind::Reverse;
  throw std::invalid_argument("unknown loss '" + std::string(name) + "' (forward|reverse)");
}

EMConfig EMConfig::desk() { return EMConfig{}; }

EMConfig EMConfig::full() {
  EMConfig cfg;
  cfg.outer_iterations = 5000;
  cfg.posterior_samples = 2000;
  cfg.elbo_samples = 2000;
  return cfg;
}

void EMConfig::validate(Index observations) const {
  if (outer_iterations < 1 || estep_steps < 1 || inner_steps < 1) {
    throw std::invalid_argument("R, P and L must all be >= 1");
  }
  if (posterior_samples < observations) {
    throw std::invalid_argument("K = " + std::to_string(posterior_samples) +
                                " must be at least the number of observations " +
                                std::to_string(observations));
  }
  if (elbo_samples < 1 || validate_every < 1 || forward_batch < 1 || reverse_batch < 1) {
    throw std::invalid_argument("sample counts and validation period must be positive");
  }
  if (!(learning_rate > 0.0) || !(clip_norm > 0.0) || !(init_factor > 1.0)) {
    throw std::invalid_argument("learning rate and clip norm must be positive, init factor > 1");
  }
  flow.validate();
}

NoiseParams init_theta(const Mat& ys, double factor) {
  if (ys.size() == 0) throw std::invalid_argument("init_theta: no observations");
  if (!(factor > 1.0)) throw std::invalid_argument("init_theta: factor must exceed 1");
  const double mean = ys.mean();
  const double var = (ys.array() - mean).square().mean();
  const double sd = std::sqrt(var);
  const double mean_abs = ys.cwiseAbs().mean();
  constexpr double kLo = 1e-4;
  constexpr double kHi = 10.0;
  const double a0 = std::clamp(factor * sd, kLo, kHi);
  const double b0 = std::clamp(mean_abs > 0.0 ? factor * sd / mean_abs : 0.0, kLo, kHi);
  return make_noise_params(a0, b0);
}

EMState start_em(ConditionalFlow flow, const NoiseParams& theta0, const EMConfig& cfg) {
  theta0.validate();
  AdamState adam(flow.params().size(), AdamOptions{cfg.learning_rate});
  return EMState{std::move(flow), theta0, 0, std::move(adam), {}, std::nullopt};
}

std::uint64_t validation_seed(const EMConfig& cfg, int iter) noexcept {
  return mix_seed(mix_seed(cfg.seed, kValidStream), static_cast<std::uint64_t>(iter));
}

ElboEstimate validation_elbo(const ConditionalFlow& flow, const Mat& ys, const NoiseParams& theta,
                             const Prior& prior, const ForwardOperator& op, Index m,
                             std::uint64_t seed) {
  Rng rng(seed);
  double value = 0.0;
  double var = 0.0;
  for (Index i = 0; i < ys.cols(); ++i) {
    const ElboEstimate e = elbo(flow, ys.col(i), theta, prior, op, m, rng);
    value += e.value;
    var += e.std_error * e.std_error;
  }
  const auto count = static_cast<double>(ys.cols());
  return {value / count, m, std::sqrt(var) / count};
}

double estep_update(ConditionalFlow& flow, AdamState& adam, const ForwardOperator& op,
                    const Prior& prior, const Mat& ys, const NoiseParams& theta,
                    const EMConfig& cfg, Rng& rng) {
  ParamVector g = flow.params().zeros_like();
  double loss = 0.0;
  if (cfg.loss == LossKind::Forward) {
    // fresh joint samples at the current noise level
    const Mat xs = prior.sample(cfg.forward_batch, rng);
    const Mat fx = op.eval_batch(xs);
    Mat sim(fx.rows(), fx.cols());
    for (Index i = 0; i < fx.cols(); ++i) sim.col(i) = sample_noisy(fx.col(i), theta, rng);
    loss = forward_kl_loss(flow, xs, sim, &g);
  } else {
    Mat conds(ys.rows(), cfg.reverse_batch);
    for (Index c = 0; c < cfg.reverse_batch; ++c) conds.col(c) = ys.col(c % ys.cols());
    const Mat latents = standard_normal(flow.dim(), cfg.reverse_batch, rng);
    loss = reverse_kl_loss(flow, conds, latents, theta, prior, op, &g);
    clip_grad_norm(g, cfg.clip_norm);
  }
  g.require_finite("E-step gradient");
  adam_step(adam, flow.params(), g);
  return loss;
}

PairBatch posterior_batch(const ConditionalFlow& flow, const ForwardOperator& op, const Mat& ys,
                          Index k, Rng& rng) {
  const Index count = ys.cols();
  if (k < count) throw std::invalid_argument("posterior_batch: K must be >= N");
  const Index base = k / count;
  const Index extra = k % count;
  PairBatch batch;
  batch.ys.resize(ys.rows(), k);
  Index col = 0;
  for (Index i = 0; i < count; ++i) {
    const Index reps = base + (i < extra ? 1 : 0);
    batch.ys.middleCols(col, reps) = repeat_column(ys.col(i), reps);
    col += reps;
  }
  const Mat latents = standard_normal(flow.dim(), k, rng);
  batch.xs = flow.push(latents, batch.ys).values;
  batch.f_xs = op.eval_batch(batch.xs);
  return batch;
}

namespace {

void record_validation(EMState& state, const ForwardOperator& op, const Prior& prior,
                       const Mat& ys, const EMConfig& cfg) {
  const int iter = state.iteration;
  const ElboEstimate e = validation_elbo(state.flow, ys, state.theta, prior, op, cfg.elbo_samples,
                                         validation_seed(cfg, iter));
  state.trace.push_back({iter, state.theta, e.value, e.std_error});
  if (!state.best || e.value > state.best->elbo) {
    state.best = Snapshot{state.flow.params(), state.theta, e.value, iter};
  }
}

} // namespace

EMState run_em(const ForwardOperator& op, const Prior& prior, const Mat& ys, EMState state,
               const EMConfig& cfg, const IterationCallback& on_iteration) {
  cfg.validate(ys.cols());
  check_problem(op, prior, ys, state.flow);
  try {
    if (state.trace.empty()) record_validation(state, op, prior, ys, cfg);
    for (int r = state.iteration; r < cfg.outer_iterations; ++r) {
      Rng rng(mix_seed(mix_seed(cfg.seed, kTrainStream), static_cast<std::uint64_t>(r)));
      for (int p = 0; p < cfg.estep_steps; ++p) {
        estep_update(state.flow, state.adam, op, prior, ys, state.theta, cfg, rng);
      }
      const PairBatch batch = posterior_batch(state.flow, op, ys, cfg.posterior_samples, rng);
      state.theta = inner_em(batch, state.theta, cfg.inner_steps).theta;
      state.iteration = r + 1;
      if (state.iteration % cfg.validate_every == 0 || state.iteration == cfg.outer_iterations) {
        record_validation(state, op, prior, ys, cfg);
      }
      if (on_iteration) on_iteration(state);
    }
  } catch (const NumericalError& e) {
    throw EMAborted("EM aborted at iteration " + std::to_string(state.iteration) + ": " + e.what(),
                    to_json(state));
  } catch (const std::invalid_argument& e) {
    // an invalid (a, b) coming out of the M-step
    if (state.trace.empty()) throw;
    throw EMAborted("EM aborted at iteration " + std::to_string(state.iteration) + ": " + e.what(),
                    to_json(state));
  }
  return state;
}

namespace {

Json theta_json(const NoiseParams& t) { return {{"a", t.a}, {"b", t.b}}; }
NoiseParams theta_from(const Json& j) { return {j.at("a").get<double>(), j.at("b").get<double>()}; }

std::vector<double> values_of(const ParamVector& p) { return {p.values().begin(), p.values().end()}; }

} // namespace

Json to_json(const EMState& state) {
  Json doc;
  doc["format"] = "mixem-em-checkpoint";
  doc["version"] = 1;
  doc["iteration"] = state.iteration;
  doc["theta"] = theta_json(state.theta);
  doc["flow"] = state.flow.to_json();
  doc["adam"] = {{"step", state.adam.step},
                 {"lr", state.adam.options.lr},
                 {"beta1", state.adam.options.beta1},
                 {"beta2", state.adam.options.beta2},
                 {"eps", state.adam.options.eps},
                 {"m", to_json(state.adam.m)},
                 {"v", to_json(state.adam.v)}};
  Json trace = Json::array();
  for (const auto& row : state.trace) {
    trace.push_back({{"iter", row.iter},
                     {"a", row.theta.a},
                     {"b", row.theta.b},
                     {"elbo", row.elbo},
                     {"elbo_se", row.elbo_se}});
  }
  doc["trace"] = std::move(trace);
  if (state.best) {
    doc["best"] = {{"iter", state.best->iter},
                   {"elbo", state.best->elbo},
                   {"theta", theta_json(state.best->theta)},
                   {"params", values_of(state.best->params)}};
  }
  return doc;
}

EMState em_state_from_json(const Json& doc) {
  ConditionalFlow flow = ConditionalFlow::from_json(doc.at("flow"));
  const auto& a = doc.at("adam");
  AdamState adam(flow.params().size(),
                 AdamOptions{a.at("lr").get<double>(), a.at("beta1").get<double>(),
                             a.at("beta2").get<double>(), a.at("eps").get<double>()});
  adam.step = a.at("step").get<std::uint64_t>();
  adam.m = vec_from_json(a.at("m"));
  adam.v = vec_from_json(a.at("v"));
  if (adam.m.size() != static_cast<Index>(flow.params().size()) || adam.v.size() != adam.m.size()) {
    throw std::invalid_argument("checkpoint optimizer state does not match the flow");
  }
  EMState state{std::move(flow), theta_from(doc.at("theta")), doc.at("iteration").get<int>(),
                std::move(adam), {}, std::nullopt};
  for (const auto& row : doc.at("trace")) {
    state.trace.push_back({row.at("iter").get<int>(),
                           {row.at("a").get<double>(), row.at("b").get<double>()},
                           row.at("elbo").get<double>(),
                           row.at("elbo_se").get<double>()});
  }
  if (doc.contains("best")) {
    const auto& b = doc.at("best");
    ParamVector params = state.flow.params();
    const auto values = b.at("params").get<std::vector<double>>();
    if (values.size() != params.size()) throw std::invalid_argument("best snapshot size mismatch");
    std::copy(values.begin(), values.end(), params.values().begin());
    state.best = Snapshot{std::move(params), theta_from(b.at("theta")), b.at("elbo").get<double>(),
                          b.at("iter").get<int>()};
  }
  return state;
}

void save_checkpoint(const EMState& state, const std::filesystem::path& path) {
  write_text_file(path, dump_precise(to_json(state)));
}

EMState load_checkpoint(const std::filesystem::path& path) {
  try {
    return em_state_from_json(read_json_file(path));
  } catch (const Json::exception& e) {
    throw std::runtime_error(path.string() + ": malformed checkpoint: " + e.what());
  }
}

GridConfig GridConfig::standard() { return equispaced(0.001, 0.03, 8, 0.01, 0.2, 8, 1200); }

GridConfig GridConfig::equispaced(double a_lo, double a_hi, Index na, double b_lo, double b_hi,
                                  Index nb, int steps) {
  GridConfig g;
  g.a_grid = na == 1 ? Vec(Vec::Constant(1, a_lo)) : Vec(Vec::LinSpaced(na, a_lo, a_hi));
  g.b_grid = nb == 1 ? Vec(Vec::Constant(1, b_lo)) : Vec(Vec::LinSpaced(nb, b_lo, b_hi));
  g.steps_per_point = steps;
  g.validate();
  return g;
}

void GridConfig::validate() const {
  const auto increasing = [](const Vec& v) {
    if (v.size() == 0) return false;
    for (Index i = 1; i < v.size(); ++i) {
      if (!(v(i) > v(i - 1))) return false;
    }
    return (v.array() >= 0.0).all();
  };
  if (!increasing(a_grid) || !increasing(b_grid)) {
    throw std::invalid_argument("grids must be non-empty, non-negative and strictly increasing");
  }
  if (!(a_grid(0) > 0.0)) throw std::invalid_argument("grid values of a must be positive");
  if (steps_per_point < 1) throw std::invalid_argument("grid needs at least one step per point");
}

GridResult run_grid(const ForwardOperator& op, const Prior& prior, const Mat& ys,
                    const GridConfig& grid, const EMConfig& cfg) {
  grid.validate();
  cfg.validate(ys.cols());
  const ConditionalFlow fresh(op.input_dim(), ys.rows(), cfg.flow, mix_seed(cfg.seed, kInitStream));
  check_problem(op, prior, ys, fresh);
  std::optional<ConditionalFlow> best_flow;
  std::size_t best = 0;
  std::vector<GridCell> table;
  const std::uint64_t vseed = validation_seed(cfg, 0);
  for (Index ia = 0; ia < grid.a_grid.size(); ++ia) {
    for (Index ib = 0; ib < grid.b_grid.size(); ++ib) {
      const std::size_t index = table.size();
      const NoiseParams theta = make_noise_params(grid.a_grid(ia), grid.b_grid(ib));
      ConditionalFlow flow = fresh;
      AdamState adam(flow.params().size(), AdamOptions{cfg.learning_rate});
      Rng rng(mix_seed(mix_seed(cfg.seed, kTrainStream), index));
      for (int s = 0; s < grid.steps_per_point; ++s) {
        estep_update(flow, adam, op, prior, ys, theta, cfg, rng);
      }
      const ElboEstimate e = validation_elbo(flow, ys, theta, prior, op, cfg.elbo_samples, vseed);
      table.push_back({theta, e});
      if (!best_flow || e.value > table[best].elbo.value) {
        best = index;
        best_flow = std::move(flow);
      }
    }
  }
  return GridResult{table[best].theta, std::move(*best_flow), best, std::move(table)};
}

} // namespace mixem
