#pragma once

// Mixed additive/multiplicative Gaussian noise
//
//   y = F(x) + a * xi1 + b * F(x) .* xi2,   xi1, xi2 ~ N(0, I_n)
//
// so that y | x ~ N(F(x), a^2 I + b^2 diag(F(x)^2)), together with the
// closed-form inner EM that updates (a, b) from posterior samples. The hidden
// variable of the inner EM is the additive part v = a * xi1.

#include "mixem/diffcore.hpp"

#include <vector>

namespace mixem {

struct NoiseParams {
  double a = 0.0; ///< additive standard deviation
  double b = 0.0; ///< multiplicative (relative) standard deviation

  /// Throws std::invalid_argument unless a, b >= 0, finite, and a + b > 0.
  void validate() const;
  friend bool operator==(const NoiseParams&, const NoiseParams&) = default;
};

[[nodiscard]] NoiseParams make_noise_params(double a, double b);

/// Variances below this are clamped in compute_c.
inline constexpr double kVarianceFloor = 1e-30;

/// Per-coordinate variance a^2 + b^2 f^2.
[[nodiscard]] inline double total_variance(const NoiseParams& theta, double f) noexcept {
  return theta.a * theta.a + theta.b * theta.b * f * f;
}

/// f_x + a * xi1 + b * f_x .* xi2.
[[nodiscard]] Vec sample_noisy(const Vec& f_x, const NoiseParams& theta, Rng& rng);

/// log N(y | f_x, a^2 I + b^2 diag(f_x^2)). Throws if any variance is zero.
[[nodiscard]] double loglik(const Eigen::Ref<const Vec>& y, const Eigen::Ref<const Vec>& f_x,
                            const NoiseParams& theta);

/// d loglik / d f_x.
[[nodiscard]] Vec loglik_grad_f(const Eigen::Ref<const Vec>& y, const Eigen::Ref<const Vec>& f_x,
                                const NoiseParams& theta);

/// Diagonal Gaussian law of the additive noise given (x, y).
struct InnerPosterior {
  Vec mean;
  Vec var;
};

[[nodiscard]] InnerPosterior inner_e_step(const Eigen::Ref<const Vec>& y,
                                          const Eigen::Ref<const Vec>& f_x,
                                          const NoiseParams& theta);

/// Posterior samples aligned with the (repeated) observations: column i of
/// `xs` was drawn given column i of `ys`, and `f_xs` caches F(xs).
struct PairBatch {
  Mat xs;
  Mat ys;
  Mat f_xs;

  [[nodiscard]] Index size() const noexcept { return ys.cols(); }
  [[nodiscard]] Index obs_dim() const noexcept { return ys.rows(); }
  void validate() const;
};

struct CTerms {
  double c1 = 0.0;
  double c2 = 0.0;
  std::size_t clamped = 0; ///< coordinates whose variance hit kVarianceFloor
};

/// Sufficient statistics of the inner M-step. Both are <= 0.
[[nodiscard]] CTerms compute_c(const PairBatch& batch, const NoiseParams& theta);

/// a = sqrt(-c2 / n), b = sqrt(-c1 / n).
[[nodiscard]] NoiseParams inner_m_update(double c1, double c2, Index n);

struct InnerEmResult {
  NoiseParams theta;
  std::vector<NoiseParams> trace; ///< trace[0] is the start, trace[l] after l updates
  std::size_t clamped = 0;
};

[[nodiscard]] InnerEmResult inner_em(const PairBatch& batch, const NoiseParams& theta0, int steps);

/// (1/K) sum_i loglik(ys_i, f_xs_i, theta): the objective the inner EM ascends.
[[nodiscard]] double q_objective(const PairBatch& batch, const NoiseParams& theta);

} // namespace mixem
