#include "mixem/noise_model.hpp"

#include <cmath>
#include <string>

namespace mixem {

void NoiseParams::validate() const {
  if (!std::isfinite(a) || !std::isfinite(b)) {
    throw std::invalid_argument("noise parameters must be finite");
  }
  if (a < 0.0 || b < 0.0) {
    throw std::invalid_argument("noise parameters must be non-negative");
  }
  if (a + b <= 0.0) {
    throw std::invalid_argument("noise parameters a = b = 0 describe a noiseless model");
  }
}

NoiseParams make_noise_params(double a, double b) {
  NoiseParams p{a, b};
  p.validate();
  return p;
}

Vec sample_noisy(const Vec& f_x, const NoiseParams& theta, Rng& rng) {
  std::normal_distribution<double> normal(0.0, 1.0);
  Vec y(f_x.size());
  for (Index j = 0; j < f_x.size(); ++j) {
    const double xi1 = normal(rng);
    const double xi2 = normal(rng);
    y(j) = f_x(j) + theta.a * xi1 + theta.b * f_x(j) * xi2;
  }
  return y;
}

namespace {

void check_dims(const Eigen::Ref<const Vec>& y, const Eigen::Ref<const Vec>& f) {
  if (y.size() != f.size()) {
    throw std::invalid_argument("observation has length " + std::to_string(y.size()) +
                                " but F(x) has length " + std::to_string(f.size()));
  }
}

double checked_variance(const NoiseParams& theta, double f, Index j) {
  const double var = total_variance(theta, f);
  if (!(var > 0.0)) {
    throw NumericalError("zero noise variance in coordinate " + std::to_string(j));
  }
  return var;
}

} // namespace

double loglik(const Eigen::Ref<const Vec>& y, const Eigen::Ref<const Vec>& f_x,
              const NoiseParams& theta) {
  check_dims(y, f_x);
  constexpr double kLog2Pi = 1.8378770664093453;
  double acc = 0.0;
  for (Index j = 0; j < y.size(); ++j) {
    const double var = checked_variance(theta, f_x(j), j);
    const double r = y(j) - f_x(j);
    acc += -0.5 * (kLog2Pi + std::log(var)) - r * r / (2.0 * var);
  }
  return acc;
}

Vec loglik_grad_f(const Eigen::Ref<const Vec>& y, const Eigen::Ref<const Vec>& f_x,
                  const NoiseParams& theta) {
  check_dims(y, f_x);
  const double b2 = theta.b * theta.b;
  Vec g(y.size());
  for (Index j = 0; j < y.size(); ++j) {
    const double f = f_x(j);
    const double var = checked_variance(theta, f, j);
    const double r = y(j) - f;
    // d/df of -0.5 log var - r^2 / (2 var), with dvar/df = 2 b^2 f
    g(j) = (r - b2 * f) / var + r * r * b2 * f / (var * var);
  }
  return g;
}

InnerPosterior inner_e_step(const Eigen::Ref<const Vec>& y, const Eigen::Ref<const Vec>& f_x,
                            const NoiseParams& theta) {
  check_dims(y, f_x);
  const double a2 = theta.a * theta.a;
  const double b2 = theta.b * theta.b;
  InnerPosterior post{Vec(y.size()), Vec(y.size())};
  for (Index j = 0; j < y.size(); ++j) {
    const double f = f_x(j);
    const double var = checked_variance(theta, f, j);
    post.mean(j) = a2 * (y(j) - f) / var;
    post.var(j) = a2 * b2 * f * f / var;
  }
  return post;
}

void PairBatch::validate() const {
  if (ys.cols() == 0) throw std::invalid_argument("pair batch is empty");
  if (xs.cols() != ys.cols() || f_xs.cols() != ys.cols()) {
    throw std::invalid_argument("pair batch columns disagree: xs " + std::to_string(xs.cols()) +
                                ", ys " + std::to_string(ys.cols()) + ", f_xs " +
                                std::to_string(f_xs.cols()));
  }
  if (f_xs.rows() != ys.rows()) {
    throw std::invalid_argument("pair batch: F(x) and y differ in dimension");
  }
}

CTerms compute_c(const PairBatch& batch, const NoiseParams& theta) {
  batch.validate();
  const double a2 = theta.a * theta.a;
  const double b2 = theta.b * theta.b;
  const Index k = batch.size();
  std::vector<double> t1(static_cast<std::size_t>(k));
  std::vector<double> t2(static_cast<std::size_t>(k));
  std::size_t clamped = 0;
  for (Index i = 0; i < k; ++i) {
    double s1 = 0.0;
    double s2 = 0.0;
    for (Index j = 0; j < batch.obs_dim(); ++j) {
      const double f = batch.f_xs(j, i);
      const double f2 = f * f;
      double var = a2 + b2 * f2;
      if (var < kVarianceFloor) {
        var = kVarianceFloor;
        ++clamped;
      }
      const double r = batch.ys(j, i) - f;
      // multiplicative part: E[(y - f - v)^2] / f^2 under the inner posterior
      s1 += r * r * b2 * b2 * f2 / (var * var) + a2 * b2 / var;
      // additive part: E[v^2]
      const double m = a2 * r / var;
      s2 += m * m + a2 * b2 * f2 / var;
    }
    t1[static_cast<std::size_t>(i)] = s1;
    t2[static_cast<std::size_t>(i)] = s2;
  }
  const double inv_k = 1.0 / static_cast<double>(k);
  CTerms out{-inv_k * pairwise_sum(t1), -inv_k * pairwise_sum(t2), clamped};
  if (!std::isfinite(out.c1) || !std::isfinite(out.c2)) {
    throw NumericalError("compute_c: non-finite accumulation");
  }
  return out;
}

NoiseParams inner_m_update(double c1, double c2, Index n) {
  if (n < 1) throw std::invalid_argument("inner_m_update: n must be >= 1");
  if (c1 > 0.0 || c2 > 0.0) {
    throw std::invalid_argument("inner_m_update: c1 and c2 must be non-positive");
  }
  const double dn = static_cast<double>(n);
  NoiseParams theta{std::sqrt(-c2 / dn), std::sqrt(-c1 / dn)};
  theta.validate();
  return theta;
}

InnerEmResult inner_em(const PairBatch& batch, const NoiseParams& theta0, int steps) {
  if (steps < 1) throw std::invalid_argument("inner_em: need at least one step");
  theta0.validate();
  InnerEmResult res{theta0, {theta0}, 0};
  res.trace.reserve(static_cast<std::size_t>(steps) + 1);
  for (int l = 0; l < steps; ++l) {
    const CTerms c = compute_c(batch, res.theta);
    res.clamped += c.clamped;
    res.theta = inner_m_update(c.c1, c.c2, batch.obs_dim());
    res.trace.push_back(res.theta);
  }
  return res;
}

double q_objective(const PairBatch& batch, const NoiseParams& theta) {
  batch.validate();
  std::vector<double> terms(static_cast<std::size_t>(batch.size()));
  for (Index i = 0; i < batch.size(); ++i) {
    terms[static_cast<std::size_t>(i)] = loglik(batch.ys.col(i), batch.f_xs.col(i), theta);
  }
  return pairwise_sum(terms) / static_cast<double>(batch.size());
}

} // namespace mixem
