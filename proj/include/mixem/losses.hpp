#pragma once

// E-step objectives for the conditional flow and the ELBO estimator.

#include "mixem/flow.hpp"
#include "mixem/forward_op.hpp"
#include "mixem/noise_model.hpp"

namespace mixem {

/// Uniform box prior with logistic edges of steepness `smoothness`, so the
/// log density is finite everywhere. `log_norm` holds the per-coordinate log
/// normalizer, computed once by quadrature.
struct PriorBox {
  Box box;
  double smoothness = 50.0;
  Vec log_norm;

  [[nodiscard]] static PriorBox make(Box box, double smoothness = 50.0);
};

[[nodiscard]] double prior_logpdf(const PriorBox& prior, const Eigen::Ref<const Vec>& x);
[[nodiscard]] Vec prior_grad(const PriorBox& prior, const Eigen::Ref<const Vec>& x);

/// Prior over x: either the smoothed box (sampled exactly uniform) or an
/// independent Gaussian. `offset` is added to every log density.
class Prior {
public:
  static Prior smooth_box(Box box, double smoothness = 50.0);
  static Prior gaussian(Vec mean, Vec stddev);

  [[nodiscard]] Index dim() const noexcept;
  [[nodiscard]] bool is_box() const noexcept { return is_box_; }
  [[nodiscard]] const PriorBox& box() const noexcept { return box_; }
  [[nodiscard]] const Vec& mean() const noexcept { return mean_; }
  [[nodiscard]] const Vec& stddev() const noexcept { return stddev_; }

  [[nodiscard]] Prior with_offset(double offset) const;

  [[nodiscard]] Mat sample(Index m, Rng& rng) const;
  [[nodiscard]] Vec logpdf(const Mat& xs) const;
  [[nodiscard]] Mat grad_logpdf(const Mat& xs) const;

private:
  bool is_box_ = true;
  PriorBox box_;
  Vec mean_;
  Vec stddev_;
  double offset_ = 0.0;
};

/// Mean over the batch of -log q(x | y). Writes the parameter gradient when
/// `grad` is non-null.
double forward_kl_loss(const ConditionalFlow& flow, const Mat& xs, const Mat& ys,
                       ParamVector* grad = nullptr);

/// -(1/B) sum_c [loglik(y_c, F(x_c)) + log p(x_c) + logdet_c], x_c = push(y_c, z_c),
/// for explicit conditions (n x B) and latents (d x B). Gradients flow through
/// the push (reparameterization).
double reverse_kl_loss(const ConditionalFlow& flow, const Mat& conds, const Mat& latents,
                       const NoiseParams& theta, const Prior& prior, const ForwardOperator& op,
                       ParamVector* grad = nullptr);

/// Same with `m` standard-normal draws per observation column of `ys`.
double reverse_kl_loss(const ConditionalFlow& flow, const Mat& ys, const NoiseParams& theta,
                       const Prior& prior, const ForwardOperator& op, Index m, Rng& rng,
                       ParamVector* grad = nullptr);

struct ElboEstimate {
  double value = 0.0;
  Index m = 0;
  double std_error = 0.0;
};

/// Monte-Carlo ELBO of the flow posterior at observation y.
[[nodiscard]] ElboEstimate elbo(const ConditionalFlow& flow, const Vec& y,
                                const NoiseParams& theta, const Prior& prior,
                                const ForwardOperator& op, Index m, Rng& rng);

/// Per-sample ELBO integrands for explicit latents.
[[nodiscard]] Vec elbo_terms(const ConditionalFlow& flow, const Vec& y, const Mat& latents,
                             const NoiseParams& theta, const Prior& prior,
                             const ForwardOperator& op);

[[nodiscard]] ElboEstimate summarize(const Vec& terms);

} // namespace mixem
