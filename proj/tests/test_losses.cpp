#include "fd_check.hpp"
#include "oracles.hpp"

#include "mixem/linear_gaussian.hpp"
#include "mixem/losses.hpp"

#include <doctest.h>

#include <algorithm>
#include <numbers>

using namespace mixem;
namespace mt = mixem::testing;

namespace {

FlowArchitecture small_arch(int blocks = 3) {
  FlowArchitecture a;
  a.blocks = blocks;
  a.hidden = {8, 8};
  return a;
}

ConditionalFlow random_flow(Index d, Index n, std::uint64_t seed, double scale = 0.2) {
  ConditionalFlow flow(d, n, small_arch(), seed);
  Rng rng(mix_seed(seed, 5));
  ParamVector p = flow.params();
  mt::randomize(p, rng, scale);
  flow.set_params(p);
  return flow;
}

// 1-D flow that maps z to mean + sd * z for every condition
ConditionalFlow gaussian_flow(Index n, double mean, double sd) {
  ConditionalFlow flow(1, n, small_arch(1), 1);
  const auto& block = flow.blocks().front();
  ParamVector p = flow.params();
  const auto& sn = block.scale_net();
  const auto& tn = block.shift_net();
  p.block(sn.bias_segment(sn.num_layers() - 1))(0, 0) = 2.0 * std::atanh(std::log(sd) / 2.0);
  p.block(tn.bias_segment(tn.num_layers() - 1))(0, 0) = mean;
  flow.set_params(p);
  return flow;
}

LinearGaussianModel lg_1d() {
  LinearGaussianModel m;
  m.matrix = Mat(2, 1);
  m.matrix << 1.0, 0.5;
  m.offset = Vec::Zero(2);
  m.prior_mean = Vec::Zero(1);
  m.prior_std = Vec::Ones(1);
  return m;
}

} // namespace

TEST_CASE("smoothed box prior") {
  const PriorBox prior = PriorBox::make(Box::cube(3, -1.0, 1.0), 50.0);
  CHECK(prior_logpdf(prior, Vec::Zero(3)) == doctest::Approx(-3.0 * std::log(2.0)).epsilon(1e-3 / 3.0));
  Vec x(3);
  x << 0.3, -0.5, 0.9;
  CHECK(prior_logpdf(prior, x) == doctest::Approx(prior_logpdf(prior, -x)).epsilon(1e-14));
  double previous = prior_logpdf(prior, Vec::Constant(3, 1.0));
  for (double t = 1.1; t < 3.0; t += 0.1) {
    const double v = prior_logpdf(prior, Vec::Constant(3, t));
    CHECK(v < previous);
    previous = v;
  }
  CHECK(prior_logpdf(prior, Vec::Constant(3, 3.0)) < -200.0);
  CHECK(std::isfinite(prior_logpdf(prior, Vec::Constant(3, 1e3))));
}

TEST_CASE("prior density integrates to one") {
  Box box;
  box.lo = Vec::Constant(1, -0.5);
  box.hi = Vec::Constant(1, 2.0);
  const PriorBox prior = PriorBox::make(box, 20.0);
  const double mass = mt::simpson([&](double x) { return std::exp(prior_logpdf(prior, Vec::Constant(1, x))); },
                                  -4.0, 5.5, 40000);
  CHECK(std::abs(mass - 1.0) < 1e-8);
}

TEST_CASE("prior gradient") {
  const Prior prior = Prior::smooth_box(Box::cube(2, -1.0, 1.0));
  Rng rng(1);
  for (int t = 0; t < 20; ++t) {
    const Vec x = 1.2 * standard_normal(2, 1, rng).col(0);
    const Vec fd = mt::fd_gradient([&](const Vec& u) { return prior.logpdf(Mat(u))(0); }, x);
    CHECK((prior.grad_logpdf(Mat(x)).col(0) - fd).norm() < 1e-6 * std::max(1.0, fd.norm()));
  }
  const Prior g = Prior::gaussian(Vec::Constant(2, 0.5), Vec::Constant(2, 2.0));
  Vec x(2);
  x << 1.0, -1.0;
  const double expected = -std::log(2.0 * std::numbers::pi * 4.0) - (0.25 + 2.25) / 8.0;
  CHECK(g.logpdf(Mat(x))(0) == doctest::Approx(expected).epsilon(1e-14));
  const Vec fd = mt::fd_gradient([&](const Vec& u) { return g.logpdf(Mat(u))(0); }, x);
  CHECK((g.grad_logpdf(Mat(x)).col(0) - fd).norm() < 1e-8);
}

TEST_CASE("box prior samples are uniform in the box") {
  const Prior prior = Prior::smooth_box(Box::cube(2, 0.0, 1.0));
  Rng rng(2);
  const Mat xs = prior.sample(1000, rng);
  CHECK(xs.minCoeff() >= 0.0);
  CHECK(xs.maxCoeff() <= 1.0);
}

TEST_CASE("forward KL at the identity flow") {
  const Index d = 3;
  const ConditionalFlow flow(d, 2, FlowArchitecture{}, 1);
  Rng rng(3);
  const Index m = 20000;
  const Mat xs = standard_normal(d, m, rng);
  const Mat ys = standard_normal(2, m, rng);
  const double loss = forward_kl_loss(flow, xs, ys);
  const double expected = 0.5 * d * (1.0 + std::log(2.0 * std::numbers::pi));
  // per-sample -log p has variance d / 2
  CHECK(std::abs(loss - expected) < 3.0 * std::sqrt(0.5 * d / m));
}

TEST_CASE("forward KL is invariant to shuffling and decreases under Adam") {
  ConditionalFlow flow = random_flow(2, 2, 4);
  Rng rng(4);
  Mat xs = 0.5 * standard_normal(2, 32, rng);
  xs.row(0).array() += 1.0;
  const Mat ys = standard_normal(2, 32, rng);
  Eigen::PermutationMatrix<Eigen::Dynamic> perm(32);
  perm.setIdentity();
  std::shuffle(perm.indices().data(), perm.indices().data() + 32, rng);
  CHECK(forward_kl_loss(flow, xs * perm, ys * perm) == doctest::Approx(forward_kl_loss(flow, xs, ys)).epsilon(1e-13));

  const double start = forward_kl_loss(flow, xs, ys);
  AdamState adam(flow.params().size(), AdamOptions{1e-2});
  for (int i = 0; i < 200; ++i) {
    ParamVector g = flow.params().zeros_like();
    (void)forward_kl_loss(flow, xs, ys, &g);
    adam_step(adam, flow.params(), g);
  }
  CHECK(forward_kl_loss(flow, xs, ys) < start - 0.5);
}

TEST_CASE("loss gradients match finite differences") {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const Index d = 2 + static_cast<Index>(seed % 3);
    const Index n = 3 + static_cast<Index>(seed % 4);
    const ConditionalFlow base = random_flow(d, n, 100 + seed);
    Rng rng(seed);
    const Mat xs = standard_normal(d, 8, rng);
    const Mat ys = standard_normal(n, 8, rng);
    const Mat latents = standard_normal(d, 8, rng);
    const auto op = make_random_surrogate(d, n, {8}, seed, Box::cube(d, -1.0, 1.0));
    const Prior prior = Prior::smooth_box(Box::cube(d, -2.0, 2.0));
    const NoiseParams theta{0.1, 0.2};
    ConditionalFlow flow = base;
    const auto fwd = [&](const ParamVector& p, ParamVector* g) {
      flow.set_params(p);
      return forward_kl_loss(flow, xs, ys, g);
    };
    const auto rev = [&](const ParamVector& p, ParamVector* g) {
      flow.set_params(p);
      return reverse_kl_loss(flow, ys, latents, theta, prior, op, g);
    };
    CHECK(mt::fd_check(fwd, base.params()).max_rel < 1e-4);
    CHECK(mt::fd_check(rev, base.params()).max_rel < 1e-4);
  }
}

TEST_CASE("constant prior offset shifts the reverse loss only") {
  const ConditionalFlow flow = random_flow(2, 3, 7);
  const auto op = ForwardOperator::linear(Mat::Ones(3, 2));
  const Prior prior = Prior::smooth_box(Box::cube(2, -1.0, 1.0));
  Rng r1(5);
  Rng r2(5);
  const Mat ys = Mat::Constant(3, 2, 0.4);
  ParamVector g1 = flow.params().zeros_like();
  ParamVector g2 = flow.params().zeros_like();
  const double l1 = reverse_kl_loss(flow, ys, {0.2, 0.1}, prior, op, 16, r1, &g1);
  const double l2 = reverse_kl_loss(flow, ys, {0.2, 0.1}, prior.with_offset(1.5), op, 16, r2, &g2);
  CHECK(l2 == doctest::Approx(l1 - 1.5).epsilon(1e-12));
  CHECK((g1.as_vector() - g2.as_vector()).norm() == 0.0);
  Rng r3(5);
  CHECK(reverse_kl_loss(flow, ys, {0.2, 0.1}, prior, op, 16, r3) == l1);
}

TEST_CASE("reverse loss plus ELBO is constant across flows with shared draws") {
  const auto op = ForwardOperator::linear(Mat::Ones(3, 2));
  const Prior prior = Prior::smooth_box(Box::cube(2, -1.0, 1.0));
  const NoiseParams theta{0.2, 0.1};
  const Vec y = Vec::Constant(3, 0.3);
  Rng rng(6);
  const Mat latents = standard_normal(2, 64, rng);
  std::vector<double> totals;
  for (std::uint64_t seed = 0; seed < 4; ++seed) {
    const ConditionalFlow flow = random_flow(2, 3, 200 + seed, 0.3);
    const double loss = reverse_kl_loss(flow, repeat_column(y, 64), latents, theta, prior, op);
    const double e = summarize(elbo_terms(flow, y, latents, theta, prior, op)).value;
    totals.push_back(loss + e);
  }
  for (const double t : totals) CHECK(t == doctest::Approx(totals.front()).epsilon(1e-12));
}

TEST_CASE("ELBO is a lower bound with equality at the posterior") {
  const LinearGaussianModel model = lg_1d();
  const double a = 0.5;
  Vec y(2);
  y << 0.8, 0.3;
  const double evidence = lg_log_evidence(model, y, a);
  const GaussianPosterior post = lg_posterior(model, y, a);
  const double mean = post.mean(0);
  const double sd = std::sqrt(post.cov(0, 0));
  const auto op = model.op();
  const Prior prior = model.prior();

  Rng rng(7);
  const ConditionalFlow exact = gaussian_flow(2, mean, sd);
  const ElboEstimate at_post = elbo(exact, y, {a, 0.0}, prior, op, 10000, rng);
  CHECK(std::abs(at_post.value - evidence) <= 2.0 * at_post.std_error + 1e-9);

  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const ConditionalFlow flow = random_flow(1, 2, 300 + seed, 0.3);
    const ElboEstimate e = elbo(flow, y, {a, 0.0}, prior, op, 2000, rng);
    CHECK(e.value <= evidence + 2.0 * e.std_error);
  }

  // Gaussian q off the posterior: the gap equals the closed-form KL
  const ConditionalFlow off = gaussian_flow(2, mean + 0.3, 1.2 * sd);
  const ElboEstimate e_off = elbo(off, y, {a, 0.0}, prior, op, 20000, rng);
  const GaussianPosterior q{Vec::Constant(1, mean + 0.3), Mat::Constant(1, 1, 1.44 * sd * sd)};
  CHECK(std::abs(evidence - e_off.value - gaussian_kl(q, post)) < 3.0 * e_off.std_error);

  Rng r1(8);
  Rng r2(8);
  CHECK(elbo(off, y, {a, 0.0}, prior, op, 100, r1).value == elbo(off, y, {a, 0.0}, prior, op, 100, r2).value);
}

TEST_CASE("reverse loss prefers the analytic posterior to the identity flow") {
  const LinearGaussianModel model = lg_1d();
  Vec y(2);
  y << 0.8, 0.3;
  const GaussianPosterior post = lg_posterior(model, y, 0.5);
  const ConditionalFlow exact = gaussian_flow(2, post.mean(0), std::sqrt(post.cov(0, 0)));
  const ConditionalFlow identity(1, 2, small_arch(1), 1);
  Rng rng(9);
  const Mat latents = standard_normal(1, 5000, rng);
  const Mat conds = repeat_column(y, 5000);
  const auto op = model.op();
  const Prior prior = model.prior();
  CHECK(reverse_kl_loss(exact, conds, latents, {0.5, 0.0}, prior, op) <=
        reverse_kl_loss(identity, conds, latents, {0.5, 0.0}, prior, op));
}

TEST_CASE("forward and reverse training agree on the posterior mean") {
  const LinearGaussianModel model = lg_1d();
  const double a = 0.5;
  Vec y(2);
  y << 0.8, 0.3;
  const GaussianPosterior post = lg_posterior(model, y, a);
  const auto op = model.op();
  const Prior prior = model.prior();
  FlowArchitecture arch;
  arch.blocks = 2;
  arch.hidden = {16, 16};

  ConditionalFlow fwd(1, 2, arch, 1);
  ConditionalFlow rev(1, 2, arch, 2);
  AdamState af(fwd.params().size(), AdamOptions{5e-3});
  AdamState ar(rev.params().size(), AdamOptions{5e-3});
  Rng rng(10);
  for (int step = 0; step < 4000; ++step) {
    if (step == 2400) af.options.lr = ar.options.lr = 5e-4;
    if (step == 3400) af.options.lr = ar.options.lr = 5e-5;
    const Mat xs = prior.sample(512, rng);
    Mat sim = op.eval_batch(xs);
    for (Index k = 0; k < sim.cols(); ++k) sim.col(k) = sample_noisy(sim.col(k), {a, 0.0}, rng);
    ParamVector g = fwd.params().zeros_like();
    (void)forward_kl_loss(fwd, xs, sim, &g);
    adam_step(af, fwd.params(), g);

    ParamVector gr = rev.params().zeros_like();
    (void)reverse_kl_loss(rev, repeat_column(y, 256), standard_normal(1, 256, rng), {a, 0.0}, prior, op, &gr);
    adam_step(ar, rev.params(), gr);
  }
  const Index m = 20000;
  const Mat sf = sample_posterior(fwd, y, m, rng);
  const Mat sr = sample_posterior(rev, y, m, rng);
  const double mf = sf.mean();
  const double mr = sr.mean();
  const double se = std::sqrt(((sf.array() - mf).square().mean() + (sr.array() - mr).square().mean()) / m);
  MESSAGE("forward mean " << mf << ", reverse mean " << mr << ", exact " << post.mean(0));
  CHECK(std::abs(mf - mr) < 3.0 * se);
  CHECK(std::abs(mr - post.mean(0)) < 3.0 * std::sqrt(post.cov(0, 0) / m));
}
