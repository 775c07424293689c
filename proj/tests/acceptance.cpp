// Acceptance checks. Each criterion prints one PASS/FAIL line; run one with
// --criterion k or all of them without arguments.

#include "fd_check.hpp"
#include "oracles.hpp"

#include "mixem/em_driver.hpp"
#include "mixem/experiment.hpp"
#include "mixem/linear_gaussian.hpp"
#include "mixem/losses.hpp"
#include "mixem/metrics.hpp"

#include <CLI11.hpp>

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <iostream>

using namespace mixem;
namespace mt = mixem::testing;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(double x) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.4g", x);
  return buf;
}

ConditionalFlow randomized(Index d, Index n, const FlowArchitecture& arch, std::uint64_t seed, double scale) {
  ConditionalFlow flow(d, n, arch, seed);
  Rng rng(mix_seed(seed, 99));
  ParamVector p = flow.params();
  mt::randomize(p, rng, scale);
  flow.set_params(p);
  return flow;
}

void set_lr(AdamState& adam, int step, int total, double lr) {
  // constant, then two tenfold drops over the last 40%
  adam.options.lr = step < 0.6 * total ? lr : (step < 0.85 * total ? 0.1 * lr : 0.01 * lr);
}

// 1 -------------------------------------------------------------------------

Outcome gradient_contract() {
  double worst_fwd = 0.0;
  double worst_rev = 0.0;
  FlowArchitecture arch;
  arch.blocks = 3;
  arch.hidden = {8, 8};
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Rng rng(mix_seed(1, seed));
    const Index d = 1 + static_cast<Index>(seed % 4);
    const Index n = 1 + static_cast<Index>((seed * 7) % 6);
    const Box box = Box::cube(d, -1.0, 1.0);
    const auto op = make_random_surrogate(d, n, {8}, seed, box);
    const Prior prior = Prior::smooth_box(box);
    std::uniform_real_distribution<double> u(0.05, 0.5);
    const NoiseParams theta{u(rng), u(rng)};
    const ConditionalFlow base = randomized(d, n, arch, seed, 0.2);
    const Mat xs = uniform_box(box.lo, box.hi, 6, rng);
    Mat ys = op.eval_batch(xs);
    for (Index k = 0; k < ys.cols(); ++k) ys.col(k) = sample_noisy(ys.col(k), theta, rng);
    const Mat latents = standard_normal(d, 6, rng);
    ConditionalFlow flow = base;
    const auto fwd = [&](const ParamVector& p, ParamVector* g) {
      flow.set_params(p);
      return forward_kl_loss(flow, xs, ys, g);
    };
    const auto rev = [&](const ParamVector& p, ParamVector* g) {
      flow.set_params(p);
      return reverse_kl_loss(flow, ys, latents, theta, prior, op, g);
    };
    worst_fwd = std::max(worst_fwd, mt::fd_check(fwd, base.params(), 1e-5).max_rel);
    worst_rev = std::max(worst_rev, mt::fd_check(rev, base.params(), 1e-5).max_rel);
  }
  return {worst_fwd < 1e-4 && worst_rev < 1e-4,
          "max rel error forward " + fmt(worst_fwd) + ", reverse " + fmt(worst_rev) + " (bar 1e-4)"};
}

// 2 -------------------------------------------------------------------------

Outcome inner_e_step_oracle() {
  const auto hand = inner_e_step(Vec::Constant(1, 2.0), Vec::Constant(1, 1.0), {1.0, 1.0});
  const bool hand_ok = std::abs(hand.mean(0) - 0.5) < 1e-12 && std::abs(hand.var(0) - 0.5) < 1e-12;
  Rng rng(2);
  std::uniform_real_distribution<double> ua(0.02, 1.0);
  std::uniform_real_distribution<double> uf(-2.0, 2.0);
  double worst = 0.0;
  for (int t = 0; t < 100; ++t) {
    const NoiseParams theta{ua(rng), ua(rng)};
    double f = uf(rng);
    if (std::abs(f) < 0.05) f = 0.05;
    const double y = sample_noisy(Vec::Constant(1, f), theta, rng)(0);
    const auto closed = inner_e_step(Vec::Constant(1, y), Vec::Constant(1, f), theta);
    const auto ref = mt::bayes_additive_part(y, f, theta.a, theta.b);
    worst = std::max({worst, std::abs(closed.mean(0) - ref.mean), std::abs(closed.var(0) - ref.var)});
  }
  return {hand_ok && worst < 1e-6, "hand case mean " + fmt(hand.mean(0)) + " var " + fmt(hand.var(0)) +
                                       ", max abs error over 100 triples " + fmt(worst) + " (bar 1e-6)"};
}

// 3 -------------------------------------------------------------------------

Outcome inner_m_step_oracle() {
  const NoiseParams hand = inner_m_update(-0.75, -0.75, 1);
  const bool hand_ok = std::abs(hand.a * hand.a - 0.75) < 1e-12 && std::abs(hand.b * hand.b - 0.75) < 1e-12;
  Rng rng(3);
  std::uniform_real_distribution<double> uf(-2.0, 2.0);
  std::uniform_real_distribution<double> ut(0.01, 0.5);
  double worst_gap = -INFINITY;
  double worst_drop = 0.0;
  for (int t = 0; t < 20; ++t) {
    const Index n = 1 + t % 5;
    const Index k = 10 + 5 * t;
    const NoiseParams truth{ut(rng), ut(rng)};
    PairBatch batch;
    batch.xs = Mat::Zero(1, k);
    batch.f_xs.resize(n, k);
    for (Index i = 0; i < batch.f_xs.size(); ++i) batch.f_xs.data()[i] = uf(rng);
    batch.ys.resize(n, k);
    for (Index i = 0; i < k; ++i) batch.ys.col(i) = sample_noisy(batch.f_xs.col(i), truth, rng);
    const auto res = inner_em(batch, {1.0, 1.0}, 3000);
    for (std::size_t l = 1; l < res.trace.size(); ++l) {
      worst_drop = std::max(worst_drop, q_objective(batch, res.trace[l - 1]) - q_objective(batch, res.trace[l]));
    }
    const auto grid = mt::q_grid_optimum(batch.ys, batch.f_xs, 1e-3, 2.0, 200);
    worst_gap = std::max(worst_gap, grid.q - q_objective(batch, res.theta));
  }
  return {hand_ok && worst_gap < 1e-3 && worst_drop <= 1e-10,
          "hand case a^2 " + fmt(hand.a * hand.a) + " b^2 " + fmt(hand.b * hand.b) + ", worst grid excess " +
              fmt(worst_gap) + " (bar 1e-3), largest q decrease " + fmt(worst_drop) + " (bar 1e-10)"};
}

// 4 -------------------------------------------------------------------------

LinearGaussianModel lg_1d() {
  LinearGaussianModel m;
  m.matrix = Mat(3, 1);
  m.matrix << 1.0, 0.5, -0.8;
  m.offset = Vec::Constant(3, 0.2);
  m.prior_mean = Vec::Zero(1);
  m.prior_std = Vec::Ones(1);
  return m;
}

Outcome elbo_oracle() {
  const auto model = lg_1d();
  const double a = 0.4;
  const NoiseParams theta{a, 0.0};
  const auto op = model.op();
  const Prior prior = model.prior();
  Vec y(3);
  y << 0.9, 0.5, -0.4;
  const double evidence = lg_log_evidence(model, y, a);
  const auto post = lg_posterior(model, y, a);
  const Index m = 10000;
  Rng rng(4);
  bool bound_ok = true;
  int bound_checks = 0;

  FlowArchitecture arch;
  arch.blocks = 2;
  arch.hidden = {16};
  for (std::uint64_t s = 0; s < 10; ++s) {
    const auto flow = randomized(1, 3, arch, 40 + s, 0.3);
    const auto e = elbo(flow, y, theta, prior, op, m, rng);
    bound_ok = bound_ok && e.value <= evidence + 2.0 * e.std_error;
    ++bound_checks;
  }

  // hand-set flow equal to the analytic posterior
  FlowArchitecture one = arch;
  one.blocks = 1;
  ConditionalFlow exact(1, 3, one, 1);
  {
    const auto& block = exact.blocks().front();
    ParamVector p = exact.params();
    const auto& sn = block.scale_net();
    const auto& tn = block.shift_net();
    p.block(sn.bias_segment(sn.num_layers() - 1))(0, 0) = 2.0 * std::atanh(0.25 * std::log(post.cov(0, 0)));
    p.block(tn.bias_segment(tn.num_layers() - 1))(0, 0) = post.mean(0);
    exact.set_params(p);
  }
  const auto e_exact = elbo(exact, y, theta, prior, op, m, rng);

  // flow trained by reverse KL at this observation
  ConditionalFlow trained(1, 3, arch, 2);
  AdamState adam(trained.params().size(), AdamOptions{1e-2});
  const int steps = 3000;
  const Mat conds = repeat_column(y, 256);
  for (int step = 0; step < steps; ++step) {
    set_lr(adam, step, steps, 1e-2);
    ParamVector g = trained.params().zeros_like();
    (void)reverse_kl_loss(trained, conds, standard_normal(1, 256, rng), theta, prior, op, &g);
    adam_step(adam, trained.params(), g);
    if (step % 500 == 0) {
      const auto e = elbo(trained, y, theta, prior, op, m, rng);
      bound_ok = bound_ok && e.value <= evidence + 2.0 * e.std_error;
      ++bound_checks;
    }
  }
  const auto e_trained = elbo(trained, y, theta, prior, op, m, rng);
  bound_ok = bound_ok && e_exact.value <= evidence + 2.0 * e_exact.std_error &&
             e_trained.value <= evidence + 2.0 * e_trained.std_error;
  const bool exact_eq = std::abs(e_exact.value - evidence) <= 2.0 * e_exact.std_error + 1e-12;
  const bool trained_eq = std::abs(e_trained.value - evidence) <= 2.0 * e_trained.std_error;
  return {bound_ok && exact_eq && trained_eq,
          "log evidence " + fmt(evidence) + "; exact flow " + fmt(e_exact.value) + " +- " + fmt(e_exact.std_error) +
              "; trained flow " + fmt(e_trained.value) + " +- " + fmt(e_trained.std_error) + "; bound held in " +
              std::to_string(bound_checks + 2) + " checks: " + (bound_ok ? "yes" : "no")};
}

// 5 -------------------------------------------------------------------------

Outcome posterior_recovery() {
  Rng rng(5);
  LinearGaussianModel model;
  model.matrix = standard_normal(5, 3, rng);
  model.offset = 0.1 * standard_normal(5, 1, rng).col(0);
  model.prior_mean = Vec::Zero(3);
  model.prior_std = Vec::Ones(3);
  const double a = 0.5;
  const auto op = model.op();
  const Prior prior = model.prior();
  Mat ys(5, 4);
  for (Index i = 0; i < 4; ++i) ys.col(i) = op.eval(standard_normal(3, 1, rng).col(0)) + a * standard_normal(5, 1, rng).col(0);

  FlowArchitecture arch;
  arch.blocks = 6;
  arch.hidden = {32, 32};
  ConditionalFlow flow(3, 5, arch, 5);
  AdamState adam(flow.params().size(), AdamOptions{1e-3});
  const int steps = 8000;
  for (int step = 0; step < steps; ++step) {
    set_lr(adam, step, steps, 2e-3);
    const Mat xs = prior.sample(256, rng);
    Mat sim = op.eval_batch(xs);
    sim += a * standard_normal(5, 256, rng);
    ParamVector g = flow.params().zeros_like();
    (void)forward_kl_loss(flow, xs, sim, &g);
    adam_step(adam, flow.params(), g);
  }
  double worst_mean = 0.0;
  double worst_cov = 0.0;
  for (Index i = 0; i < 4; ++i) {
    const auto post = lg_posterior(model, ys.col(i), a);
    const Mat s = sample_posterior(flow, ys.col(i), 50000, rng);
    const Vec mean = s.rowwise().mean();
    const Mat centered = s.colwise() - mean;
    const Mat cov = centered * centered.transpose() / static_cast<double>(s.cols() - 1);
    worst_mean = std::max(worst_mean, (mean - post.mean).cwiseAbs().maxCoeff());
    worst_cov = std::max(worst_cov, (cov - post.cov).norm() / post.cov.norm());
  }
  return {worst_mean < 0.05 && worst_cov < 0.10,
          "worst mean error " + fmt(worst_mean) + " (bar 0.05), worst relative covariance error " + fmt(worst_cov) +
              " (bar 0.10) over 4 observations"};
}

// 6 -------------------------------------------------------------------------

// F(x) = (x1^2, x2): x1 has the bimodal posterior; x2 is an observed passenger
// coordinate that gives the coupling layers something to condition on.
Outcome mode_coverage() {
  const Box box = Box::cube(2, -2.0, 2.0);
  const Prior prior = Prior::smooth_box(box);
  const auto op = ForwardOperator::square({true, false});
  const NoiseParams theta{0.1, 0.0};
  Vec y(2);
  y << 1.0, 0.0;
  Rng rng(6);
  FlowArchitecture arch;
  arch.blocks = 6;
  arch.hidden = {32, 32};
  arch.init_noise = 0.05;

  ConditionalFlow fwd(2, 2, arch, 6);
  AdamState af(fwd.params().size(), AdamOptions{2e-3});
  const int steps = 6000;
  for (int step = 0; step < steps; ++step) {
    set_lr(af, step, steps, 2e-3);
    const Mat xs = prior.sample(256, rng);
    Mat sim = op.eval_batch(xs);
    for (Index k = 0; k < sim.cols(); ++k) sim.col(k) = sample_noisy(sim.col(k), theta, rng);
    ParamVector g = fwd.params().zeros_like();
    (void)forward_kl_loss(fwd, xs, sim, &g);
    adam_step(af, fwd.params(), g);
  }

  ConditionalFlow rev(2, 2, arch, 7);
  AdamState ar(rev.params().size(), AdamOptions{2e-3});
  const Mat conds = repeat_column(y, 256);
  for (int step = 0; step < steps; ++step) {
    set_lr(ar, step, steps, 2e-3);
    ParamVector g = rev.params().zeros_like();
    (void)reverse_kl_loss(rev, conds, standard_normal(2, 256, rng), theta, prior, op, &g);
    clip_grad_norm(g, 10.0);
    adam_step(ar, rev.params(), g);
  }

  const auto masses = [&](const ConditionalFlow& flow) {
    const Mat s = sample_posterior(flow, y, 20000, rng);
    const double right = (s.row(0).array() > 0.0).cast<double>().mean();
    return std::pair{1.0 - right, right};
  };
  const auto [fl, fr] = masses(fwd);
  const auto [rl, rr] = masses(rev);
  return {fl >= 0.2 && fr >= 0.2,
          "forward KL mode masses " + fmt(fl) + " / " + fmt(fr) + " (bar 0.2 each); reverse KL " + fmt(rl) + " / " +
              fmt(rr) + " (reported only)"};
}

// 7 -------------------------------------------------------------------------

fs::path scratch(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / "mixem_acceptance" / name;
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

Outcome end_to_end_trend() {
  const fs::path out = scratch("trend");
  Json doc = to_json(preset("desk"));
  doc["counts"] = {1, 8};
  doc["out"] = out.string();
  std::map<std::pair<std::string, Index>, std::vector<double>> dist;
  std::map<std::pair<std::string, Index>, std::vector<double>> elbos;
  int failed = 0;
  for (const std::string method : {"forward", "reverse"}) {
    doc["method"] = method;
    const auto cfg = experiment_config_from_json(doc);
    if (method == "forward") (void)cmd_simulate(cfg);
    for (const auto& o : cmd_fit(cfg)) {
      if (!o.report || !o.report->distance) {
        ++failed;
        continue;
      }
      dist[{method, o.cell.count}].push_back(*o.report->distance);
      elbos[{method, o.cell.count}].push_back(o.report->elbo.value);
    }
  }
  if (failed > 0) return {false, std::to_string(failed) + " fit cells failed"};
  const double d1 = median(dist[{"forward", 1}]);
  const double d8 = median(dist[{"forward", 8}]);
  const double r1 = median(dist[{"reverse", 1}]);
  const double r8 = median(dist[{"reverse", 8}]);
  // ELBOs are per observation, so medians are compared within each N
  const double f1 = median(elbos[{"forward", 1}]);
  const double f8 = median(elbos[{"forward", 8}]);
  const double rv1 = median(elbos[{"reverse", 1}]);
  const double rv8 = median(elbos[{"reverse", 8}]);
  const bool fwd_trend = d8 < d1 && d8 < 1.0;
  const bool rev_trend = r8 < r1 && r8 < 1.0;
  const bool elbo_ok = f8 >= rv8 - 1.0 && f1 >= rv1 - 1.0;
  return {fwd_trend && rev_trend && elbo_ok,
          "median D forward N=1 " + fmt(d1) + ", N=8 " + fmt(d8) + (fwd_trend ? " ok" : " FAILS") +
              "; reverse N=1 " + fmt(r1) + ", N=8 " + fmt(r8) + (rev_trend ? " ok" : " FAILS") +
              "; median ELBO forward/reverse N=1 " + fmt(f1) + "/" + fmt(rv1) + ", N=8 " + fmt(f8) + "/" +
              fmt(rv8) + (elbo_ok ? " ok" : " FAILS")};
}

// 8 -------------------------------------------------------------------------

Outcome exact_em_monotone() {
  double worst_drop = 0.0;
  Rng rng(8);
  for (const Index d : {1, 3}) {
    LinearGaussianModel model;
    model.matrix = standard_normal(5, d, rng);
    model.offset = standard_normal(5, 1, rng).col(0);
    model.prior_mean = Vec::Zero(d);
    model.prior_std = Vec::Ones(d);
    Mat ys(5, 8);
    for (Index i = 0; i < 8; ++i) ys.col(i) = model.op().eval(standard_normal(d, 1, rng).col(0)) + 0.3 * standard_normal(5, 1, rng).col(0);
    for (const double a0 : {0.01, 0.3, 5.0}) {
      const auto res = run_exact_em(model, ys, a0, 50);
      for (std::size_t r = 1; r < res.elbo.size(); ++r) worst_drop = std::max(worst_drop, res.elbo[r - 1] - res.elbo[r]);
    }
  }
  return {worst_drop <= 1e-8, "largest ELBO decrease over 50 iterations " + fmt(worst_drop) + " (bar 1e-8)"};
}

// 9 -------------------------------------------------------------------------

Outcome reproducibility() {
  Json doc = to_json(preset("desk"));
  doc["counts"] = {2};
  doc["seeds"] = 1;
  doc["em"]["outer_iterations"] = 40;
  doc["checkpoint_every"] = 15;
  std::vector<fs::path> dirs;
  for (const char* name : {"repro_a", "repro_b"}) {
    const fs::path out = scratch(name);
    doc["out"] = out.string();
    const auto cfg = experiment_config_from_json(doc);
    (void)cmd_simulate(cfg);
    const auto o = cmd_fit(cfg);
    if (o.size() != 1 || !o[0].report) return {false, "fit cell failed: " + (o.empty() ? "" : o[0].error)};
    dirs.push_back(run_dir(cfg, "forward", cells(cfg)[0]));
  }
  int compared = 0;
  for (const auto& entry : fs::directory_iterator(dirs[0])) {
    if (entry.path().extension() != ".csv") continue;
    const fs::path other = dirs[1] / entry.path().filename();
    if (!fs::exists(other) || read_text_file(entry.path()) != read_text_file(other)) {
      return {false, entry.path().filename().string() + " differs"};
    }
    ++compared;
  }
  return {compared >= 3, std::to_string(compared) + " CSV files byte-identical across two runs"};
}

struct Criterion {
  std::string name;
  std::function<Outcome()> run;
  double budget_s;
};

} // namespace

int main(int argc, char** argv) {
  CLI::App app{"acceptance checks"};
  int only = 0;
  app.add_option("--criterion", only, "run a single criterion (1-9)")->check(CLI::Range(1, 9));
  CLI11_PARSE(app, argc, argv);

  const std::vector<Criterion> all{
      {"gradient contract", gradient_contract, 30},
      {"inner E-step oracle", inner_e_step_oracle, 10},
      {"inner M-step oracle", inner_m_step_oracle, 60},
      {"ELBO bound and equality", elbo_oracle, 120},
      {"posterior recovery", posterior_recovery, 300},
      {"mode coverage", mode_coverage, 300},
      {"end-to-end trend", end_to_end_trend, 2700},
      {"exact-posterior EM monotone", exact_em_monotone, 60},
      {"reproducibility", reproducibility, 1e9},
  };
  bool ok = true;
  for (std::size_t k = 0; k < all.size(); ++k) {
    if (only != 0 && static_cast<int>(k) + 1 != only) continue;
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = all[k].run();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    const bool in_time = secs < all[k].budget_s;
    const bool pass = o.pass && in_time;
    std::cout << (pass ? "PASS" : "FAIL") << " " << k + 1 << " " << all[k].name << ": " << o.detail << " ["
              << fmt(secs) << " s" << (in_time ? "" : ", over budget") << "]" << std::endl;
    ok = ok && pass;
  }
  return ok ? 0 : 1;
}
