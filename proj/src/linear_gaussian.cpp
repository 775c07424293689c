#include "mixem/linear_gaussian.hpp"

#include <Eigen/Cholesky>

#include <cmath>
#include <numbers>

namespace mixem {

namespace {

constexpr double kLog2Pi = 1.8378770664093453;

double logdet_spd(const Mat& m) {
  Eigen::LLT<Mat> llt(m);
  if (llt.info() != Eigen::Success) throw NumericalError("matrix is not positive definite");
  return 2.0 * llt.matrixL().toDenseMatrix().diagonal().array().log().sum();
}

} // namespace

GaussianPosterior lg_posterior(const LinearGaussianModel& model, const Vec& y, double a) {
  if (!(a > 0.0)) throw std::invalid_argument("lg_posterior: a must be positive");
  const Vec prior_prec = model.prior_std.array().square().inverse();
  Mat prec = model.matrix.transpose() * model.matrix / (a * a);
  prec.diagonal() += prior_prec;
  Eigen::LLT<Mat> llt(prec);
  const Vec rhs = prior_prec.cwiseProduct(model.prior_mean) +
                  model.matrix.transpose() * (y - model.offset) / (a * a);
  GaussianPosterior post;
  post.mean = llt.solve(rhs);
  post.cov = llt.solve(Mat::Identity(model.dim(), model.dim()));
  return post;
}

double lg_log_evidence(const LinearGaussianModel& model, const Vec& y, double a) {
  const Index n = model.obs_dim();
  Mat cov = model.matrix * model.prior_std.array().square().matrix().asDiagonal() *
            model.matrix.transpose();
  cov.diagonal().array() += a * a;
  const Vec r = y - model.matrix * model.prior_mean - model.offset;
  Eigen::LLT<Mat> llt(cov);
  return -0.5 * (static_cast<double>(n) * kLog2Pi + logdet_spd(cov) + r.dot(llt.solve(r)));
}

double lg_elbo(const LinearGaussianModel& model, const Vec& y, double a,
               const GaussianPosterior& q) {
  const auto n = static_cast<double>(model.obs_dim());
  const auto d = static_cast<double>(model.dim());
  const Mat& A = model.matrix;
  const Vec r = y - A * q.mean - model.offset;
  const double fit = r.squaredNorm() + (A * q.cov * A.transpose()).trace();
  const double e_loglik = -0.5 * n * (kLog2Pi + std::log(a * a)) - fit / (2.0 * a * a);
  const Vec var0 = model.prior_std.array().square();
  const Vec dm = q.mean - model.prior_mean;
  const double e_logprior = -0.5 * d * kLog2Pi - 0.5 * var0.array().log().sum() -
                            0.5 * (dm.array().square() / var0.array()).sum() -
                            0.5 * (q.cov.diagonal().array() / var0.array()).sum();
  const double entropy = 0.5 * d * (1.0 + kLog2Pi) + 0.5 * logdet_spd(q.cov);
  return e_loglik + e_logprior + entropy;
}

double gaussian_kl(const GaussianPosterior& q, const GaussianPosterior& p) {
  const auto d = static_cast<double>(q.mean.size());
  Eigen::LLT<Mat> llt(p.cov);
  const Vec dm = p.mean - q.mean;
  return 0.5 * (llt.solve(q.cov).trace() + dm.dot(llt.solve(dm)) - d + logdet_spd(p.cov) -
                logdet_spd(q.cov));
}

ExactEmResult run_exact_em(const LinearGaussianModel& model, const Mat& ys, double a0,
                           int iterations) {
  if (iterations < 1) throw std::invalid_argument("run_exact_em: need at least one iteration");
  ExactEmResult res;
  res.a.push_back(a0);
  const auto count = static_cast<double>(ys.cols());
  const Mat& A = model.matrix;
  for (int r = 0; r < iterations; ++r) {
    const double a = res.a.back();
    std::vector<GaussianPosterior> qs;
    double c2 = 0.0;
    for (Index i = 0; i < ys.cols(); ++i) {
      qs.push_back(lg_posterior(model, ys.col(i), a));
      const auto& q = qs.back();
      // with b = 0 the inner posterior of v is a point mass at y - F(x),
      // so E_q[c2] = -E_q ||y - A x - c||^2
      c2 -= (ys.col(i) - A * q.mean - model.offset).squaredNorm() + (A * q.cov * A.transpose()).trace();
    }
    c2 /= count;
    const double a_next = inner_m_update(0.0, c2, model.obs_dim()).a;
    double acc = 0.0;
    for (Index i = 0; i < ys.cols(); ++i) acc += lg_elbo(model, ys.col(i), a_next, qs[static_cast<std::size_t>(i)]);
    res.a.push_back(a_next);
    res.elbo.push_back(acc / count);
  }
  return res;
}

} // namespace mixem
