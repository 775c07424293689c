#include "mixem/losses.hpp"

#include <cmath>
#include <numbers>

namespace mixem {

namespace {

// log(sigmoid(u)) without overflow
double log_sigmoid(double u) {
  return u >= 0.0 ? -std::log1p(std::exp(-u)) : u - std::log1p(std::exp(u));
}

double sigmoid(double u) {
  if (u >= 0.0) return 1.0 / (1.0 + std::exp(-u));
  const double e = std::exp(u);
  return e / (1.0 + e);
}

// log of the integral of sigmoid(l (x - lo)) sigmoid(l (hi - x)) over R
double log_edge_normalizer(double lo, double hi, double smoothness) {
  const double pad = 40.0 / smoothness;
  const double a = lo - pad;
  const double b = hi + pad;
  constexpr int kIntervals = 20000; // even, Simpson
  const double h = (b - a) / kIntervals;
  double acc = 0.0;
  for (int i = 0; i <= kIntervals; ++i) {
    const double x = a + h * i;
    const double w = (i == 0 || i == kIntervals) ? 1.0 : (i % 2 == 1 ? 4.0 : 2.0);
    acc += w * std::exp(log_sigmoid(smoothness * (x - lo)) + log_sigmoid(smoothness * (hi - x)));
  }
  return std::log(acc * h / 3.0);
}

} // namespace

PriorBox PriorBox::make(Box box, double smoothness) {
  box.validate();
  if (!(smoothness > 0.0)) throw std::invalid_argument("prior smoothness must be positive");
  PriorBox p{std::move(box), smoothness, Vec()};
  p.log_norm.resize(p.box.dim());
  for (Index j = 0; j < p.box.dim(); ++j) {
    p.log_norm(j) = log_edge_normalizer(p.box.lo(j), p.box.hi(j), smoothness);
  }
  return p;
}

double prior_logpdf(const PriorBox& prior, const Eigen::Ref<const Vec>& x) {
  if (x.size() != prior.box.dim()) throw std::invalid_argument("prior_logpdf: dimension mismatch");
  const double l = prior.smoothness;
  double acc = 0.0;
  for (Index j = 0; j < x.size(); ++j) {
    acc += log_sigmoid(l * (x(j) - prior.box.lo(j))) + log_sigmoid(l * (prior.box.hi(j) - x(j))) -
           prior.log_norm(j);
  }
  return acc;
}

Vec prior_grad(const PriorBox& prior, const Eigen::Ref<const Vec>& x) {
  const double l = prior.smoothness;
  Vec g(x.size());
  for (Index j = 0; j < x.size(); ++j) {
    // d/du log sigmoid(u) = sigmoid(-u)
    g(j) = l * sigmoid(-l * (x(j) - prior.box.lo(j))) - l * sigmoid(-l * (prior.box.hi(j) - x(j)));
  }
  return g;
}

Prior Prior::smooth_box(Box box, double smoothness) {
  Prior p;
  p.is_box_ = true;
  p.box_ = PriorBox::make(std::move(box), smoothness);
  return p;
}

Prior Prior::gaussian(Vec mean, Vec stddev) {
  if (mean.size() == 0 || mean.size() != stddev.size() || (stddev.array() <= 0.0).any()) {
    throw std::invalid_argument("gaussian prior needs matching mean and positive stddev");
  }
  Prior p;
  p.is_box_ = false;
  p.mean_ = std::move(mean);
  p.stddev_ = std::move(stddev);
  return p;
}

Index Prior::dim() const noexcept { return is_box_ ? box_.box.dim() : mean_.size(); }

Prior Prior::with_offset(double offset) const {
  Prior p = *this;
  p.offset_ += offset;
  return p;
}

Mat Prior::sample(Index m, Rng& rng) const {
  if (is_box_) return uniform_box(box_.box.lo, box_.box.hi, m, rng);
  Mat z = standard_normal(dim(), m, rng);
  z = (z.array().colwise() * stddev_.array()).matrix();
  z.colwise() += mean_;
  return z;
}

Vec Prior::logpdf(const Mat& xs) const {
  Vec out(xs.cols());
  if (is_box_) {
    for (Index i = 0; i < xs.cols(); ++i) out(i) = prior_logpdf(box_, xs.col(i)) + offset_;
    return out;
  }
  const double c = 0.5 * static_cast<double>(dim()) * std::log(2.0 * std::numbers::pi) +
                   stddev_.array().log().sum();
  for (Index i = 0; i < xs.cols(); ++i) {
    out(i) = -0.5 * ((xs.col(i) - mean_).array() / stddev_.array()).square().sum() - c + offset_;
  }
  return out;
}

Mat Prior::grad_logpdf(const Mat& xs) const {
  Mat g(xs.rows(), xs.cols());
  if (is_box_) {
    for (Index i = 0; i < xs.cols(); ++i) g.col(i) = prior_grad(box_, xs.col(i));
    return g;
  }
  g = xs;
  g.colwise() -= mean_;
  return (-(g.array().colwise() / stddev_.array().square())).matrix();
}

double forward_kl_loss(const ConditionalFlow& flow, const Mat& xs, const Mat& ys,
                       ParamVector* grad) {
  if (xs.cols() == 0) throw std::invalid_argument("forward_kl_loss: empty batch");
  ConditionalFlow::Tape tape;
  const auto z = flow.pull(xs, ys, grad ? &tape : nullptr);
  const Vec nll = -(standard_normal_logpdf(z.values) + z.logdet);
  const double inv_b = 1.0 / static_cast<double>(xs.cols());
  const double loss = nll.sum() * inv_b;
  if (!std::isfinite(loss)) throw NumericalError("forward KL loss is not finite");
  if (grad != nullptr) {
    flow.pull_backward(tape, z.values * inv_b, Vec::Constant(xs.cols(), -inv_b), *grad);
  }
  return loss;
}

double reverse_kl_loss(const ConditionalFlow& flow, const Mat& conds, const Mat& latents,
                       const NoiseParams& theta, const Prior& prior, const ForwardOperator& op,
                       ParamVector* grad) {
  if (latents.cols() == 0) throw std::invalid_argument("reverse_kl_loss: empty batch");
  ConditionalFlow::Tape tape;
  const auto x = flow.push(latents, conds, grad ? &tape : nullptr);
  const Mat fx = op.eval_batch(x.values);
  const Vec lp = prior.logpdf(x.values);
  const Index batch = latents.cols();
  double acc = 0.0;
  Mat g_f(fx.rows(), batch);
  for (Index i = 0; i < batch; ++i) {
    acc += loglik(conds.col(i), fx.col(i), theta) + lp(i) + x.logdet(i);
    if (grad != nullptr) g_f.col(i) = loglik_grad_f(conds.col(i), fx.col(i), theta);
  }
  const double inv_b = 1.0 / static_cast<double>(batch);
  const double loss = -acc * inv_b;
  if (!std::isfinite(loss)) throw NumericalError("reverse KL loss is not finite");
  if (grad != nullptr) {
    Mat g_x = op.vjp(x.values, g_f) + prior.grad_logpdf(x.values);
    g_x *= -inv_b;
    flow.push_backward(tape, g_x, Vec::Constant(batch, -inv_b), *grad);
  }
  return loss;
}

double reverse_kl_loss(const ConditionalFlow& flow, const Mat& ys, const NoiseParams& theta,
                       const Prior& prior, const ForwardOperator& op, Index m, Rng& rng,
                       ParamVector* grad) {
  if (m < 1) throw std::invalid_argument("reverse_kl_loss: need m >= 1");
  Mat conds(ys.rows(), ys.cols() * m);
  for (Index i = 0; i < ys.cols(); ++i) conds.middleCols(i * m, m) = repeat_column(ys.col(i), m);
  const Mat latents = standard_normal(flow.dim(), conds.cols(), rng);
  return reverse_kl_loss(flow, conds, latents, theta, prior, op, grad);
}

Vec elbo_terms(const ConditionalFlow& flow, const Vec& y, const Mat& latents,
               const NoiseParams& theta, const Prior& prior, const ForwardOperator& op) {
  const auto x = flow.push(latents, repeat_column(y, latents.cols()));
  const Mat fx = op.eval_batch(x.values);
  const Vec log_q = standard_normal_logpdf(latents) - x.logdet;
  const Vec lp = prior.logpdf(x.values);
  Vec terms(latents.cols());
  for (Index k = 0; k < latents.cols(); ++k) {
    terms(k) = loglik(y, fx.col(k), theta) + lp(k) - log_q(k);
  }
  return terms;
}

ElboEstimate summarize(const Vec& terms) {
  const Index m = terms.size();
  if (m < 1) throw std::invalid_argument("summarize: no samples");
  const double mean = terms.mean();
  double se = 0.0;
  if (m > 1) {
    const double var = (terms.array() - mean).square().sum() / static_cast<double>(m - 1);
    se = std::sqrt(var / static_cast<double>(m));
  }
  return {mean, m, se};
}

ElboEstimate elbo(const ConditionalFlow& flow, const Vec& y, const NoiseParams& theta,
                  const Prior& prior, const ForwardOperator& op, Index m, Rng& rng) {
  if (m < 1) throw std::invalid_argument("elbo: need m >= 1");
  const Mat latents = standard_normal(flow.dim(), m, rng);
  return summarize(elbo_terms(flow, y, latents, theta, prior, op));
}

} // namespace mixem
