#pragma once

// Conjugate linear-Gaussian problem y = A x + c + a * xi with x ~ N(m0, diag(s0^2))
// and purely additive noise (b = 0). Posterior, evidence and ELBO are closed
// form, which makes it the reference problem for the flow and EM checks.

#include "mixem/forward_op.hpp"
#include "mixem/losses.hpp"

#include <vector>

namespace mixem {

struct LinearGaussianModel {
  Mat matrix;      ///< n x d
  Vec offset;      ///< n
  Vec prior_mean;  ///< d
  Vec prior_std;   ///< d

  [[nodiscard]] Index dim() const noexcept { return matrix.cols(); }
  [[nodiscard]] Index obs_dim() const noexcept { return matrix.rows(); }
  [[nodiscard]] ForwardOperator op() const { return ForwardOperator::linear(matrix, offset); }
  [[nodiscard]] Prior prior() const { return Prior::gaussian(prior_mean, prior_std); }
};

struct GaussianPosterior {
  Vec mean;
  Mat cov;
};

[[nodiscard]] GaussianPosterior lg_posterior(const LinearGaussianModel& model, const Vec& y, double a);
[[nodiscard]] double lg_log_evidence(const LinearGaussianModel& model, const Vec& y, double a);
/// F(q, a | y) for a Gaussian q.
[[nodiscard]] double lg_elbo(const LinearGaussianModel& model, const Vec& y, double a,
                             const GaussianPosterior& q);
/// KL(q || posterior(y, a)).
[[nodiscard]] double gaussian_kl(const GaussianPosterior& q, const GaussianPosterior& p);

struct ExactEmResult {
  std::vector<double> a;    ///< a[r] after r M-steps; a[0] is the start
  std::vector<double> elbo; ///< mean ELBO of (q_r, a[r + 1]) over observations
};

/// Outer EM with the exact posterior as E-step and the inner-EM update taken
/// in expectation under that posterior as M-step.
[[nodiscard]] ExactEmResult run_exact_em(const LinearGaussianModel& model, const Mat& ys, double a0,
                                         int iterations);

} // namespace mixem
