#include "mixem/diffcore.hpp"

#include <algorithm>
#include <cmath>

namespace mixem {

std::size_t ParamVector::add_segment(std::string name, Index rows, Index cols) {
  if (rows <= 0 || cols <= 0) {
    throw std::invalid_argument("segment '" + name + "' must have positive shape");
  }
  Segment seg{std::move(name), values_.size(), rows, cols};
  values_.resize(values_.size() + seg.size(), 0.0);
  segments_.push_back(std::move(seg));
  return segments_.size() - 1;
}

Eigen::Map<Mat> ParamVector::block(std::size_t seg) {
  const Segment& s = segments_.at(seg);
  return {values_.data() + s.offset, s.rows, s.cols};
}

Eigen::Map<const Mat> ParamVector::block(std::size_t seg) const {
  const Segment& s = segments_.at(seg);
  return {values_.data() + s.offset, s.rows, s.cols};
}

ParamVector ParamVector::zeros_like() const {
  ParamVector out = *this;
  out.set_zero();
  return out;
}

void ParamVector::set_zero() noexcept { std::fill(values_.begin(), values_.end(), 0.0); }

bool ParamVector::same_layout(const ParamVector& other) const noexcept {
  if (segments_.size() != other.segments_.size()) return false;
  for (std::size_t i = 0; i < segments_.size(); ++i) {
    const auto& a = segments_[i];
    const auto& b = other.segments_[i];
    if (a.offset != b.offset || a.rows != b.rows || a.cols != b.cols) return false;
  }
  return true;
}

void ParamVector::require_finite(std::string_view what) const {
  for (const auto& s : segments_) {
    for (std::size_t i = 0; i < s.size(); ++i) {
      if (!std::isfinite(values_[s.offset + i])) {
        throw NumericalError(std::string(what) + ": non-finite value in segment '" + s.name + "'");
      }
    }
  }
}

std::string to_string(Activation act) {
  switch (act) {
  case Activation::Tanh: return "tanh";
  case Activation::Relu: return "relu";
  case Activation::Identity: return "identity";
  }
  return "unknown";
}

Activation activation_from_string(std::string_view name) {
  if (name == "tanh") return Activation::Tanh;
  if (name == "relu") return Activation::Relu;
  if (name == "identity") return Activation::Identity;
  throw std::invalid_argument("unknown activation '" + std::string(name) + "'");
}

DenseNet::DenseNet(ParamVector& params, const std::string& prefix, std::vector<Index> widths,
                   Activation hidden)
    : widths_(std::move(widths)), hidden_(hidden) {
  if (widths_.size() < 2) {
    throw std::invalid_argument("DenseNet needs at least input and output widths");
  }
  for (Index w : widths_) {
    if (w <= 0) throw std::invalid_argument("DenseNet widths must be positive");
  }
  for (std::size_t l = 0; l + 1 < widths_.size(); ++l) {
    const auto tag = prefix + ".l" + std::to_string(l);
    weight_seg_.push_back(params.add_segment(tag + ".weight", widths_[l + 1], widths_[l]));
    bias_seg_.push_back(params.add_segment(tag + ".bias", widths_[l + 1], 1));
  }
}

namespace {

void apply_activation(Mat& h, Activation act) {
  switch (act) {
  case Activation::Tanh: h = h.array().tanh().matrix(); break;
  case Activation::Relu: h = h.cwiseMax(0.0); break;
  case Activation::Identity: break;
  }
}

// Multiplies the incoming gradient by the activation derivative, expressed
// through the post-activation values.
void activation_backward(Mat& g, const Mat& post, Activation act) {
  switch (act) {
  case Activation::Tanh: g.array() *= 1.0 - post.array().square(); break;
  case Activation::Relu: g.array() *= (post.array() > 0.0).cast<double>(); break;
  case Activation::Identity: break;
  }
}

} // namespace

Mat DenseNet::forward(const ParamVector& params, const Mat& input) const {
  if (input.rows() != in_dim()) {
    throw std::invalid_argument("DenseNet input has " + std::to_string(input.rows()) +
                                " rows, expected " + std::to_string(in_dim()));
  }
  Mat h = input;
  const std::size_t last = num_layers() - 1;
  for (std::size_t l = 0; l < num_layers(); ++l) {
    Mat next = params.block(weight_seg_[l]) * h;
    next.colwise() += params.block(bias_seg_[l]).col(0);
    if (l != last) apply_activation(next, hidden_);
    h = std::move(next);
  }
  return h;
}

Mat DenseNet::forward(const ParamVector& params, const Mat& input, Tape& tape) const {
  if (input.rows() != in_dim()) {
    throw std::invalid_argument("DenseNet input has " + std::to_string(input.rows()) +
                                " rows, expected " + std::to_string(in_dim()));
  }
  tape.layers.resize(num_layers() + 1);
  tape.layers[0] = input;
  const std::size_t last = num_layers() - 1;
  for (std::size_t l = 0; l < num_layers(); ++l) {
    Mat next = params.block(weight_seg_[l]) * tape.layers[l];
    next.colwise() += params.block(bias_seg_[l]).col(0);
    if (l != last) apply_activation(next, hidden_);
    tape.layers[l + 1] = std::move(next);
  }
  return tape.layers.back();
}

Mat DenseNet::backward(const ParamVector& params, const Tape& tape, const Mat& grad_out,
                       ParamVector* grad) const {
  Mat g = grad_out;
  for (std::size_t l = num_layers(); l-- > 0;) {
    if (l != num_layers() - 1) activation_backward(g, tape.layers[l + 1], hidden_);
    if (grad != nullptr) {
      grad->block(weight_seg_[l]).noalias() += g * tape.layers[l].transpose();
      grad->block(bias_seg_[l]).col(0) += g.rowwise().sum();
    }
    g = params.block(weight_seg_[l]).transpose() * g;
  }
  return g;
}

void DenseNet::init(ParamVector& params, Rng& rng, bool zero_last, double gain) const {
  for (std::size_t l = 0; l < num_layers(); ++l) {
    auto w = params.block(weight_seg_[l]);
    params.block(bias_seg_[l]).setZero();
    if (zero_last && l == num_layers() - 1) {
      w.setZero();
      continue;
    }
    const double limit = gain * std::sqrt(6.0 / static_cast<double>(w.rows() + w.cols()));
    std::uniform_real_distribution<double> dist(-limit, limit);
    for (Index j = 0; j < w.cols(); ++j) {
      for (Index i = 0; i < w.rows(); ++i) w(i, j) = dist(rng);
    }
  }
}

Vec net_eval(const DenseNet& net, const ParamVector& params, const Vec& input) {
  Mat out = net.forward(params, Mat(input));
  if (!out.allFinite()) throw NumericalError("net_eval produced a non-finite output");
  return out.col(0);
}

void adam_step(AdamState& state, ParamVector& params, const ParamVector& gradient) {
  const auto n = static_cast<Index>(params.size());
  if (gradient.size() != params.size() || state.m.size() != n || state.v.size() != n) {
    throw std::invalid_argument("adam_step: shape mismatch");
  }
  const AdamOptions& o = state.options;
  state.step += 1;
  const auto g = gradient.as_vector();
  state.m = o.beta1 * state.m + (1.0 - o.beta1) * g;
  state.v = o.beta2 * state.v + (1.0 - o.beta2) * g.cwiseProduct(g);
  const double t = static_cast<double>(state.step);
  const double c1 = 1.0 - std::pow(o.beta1, t);
  const double c2 = 1.0 - std::pow(o.beta2, t);
  auto p = params.as_vector();
  p.array() -= o.lr * (state.m.array() / c1) / ((state.v.array() / c2).sqrt() + o.eps);
}

double clip_grad_norm(ParamVector& g, double max_norm) {
  auto v = g.as_vector();
  const double norm = v.norm();
  if (norm > max_norm && norm > 0.0) v *= max_norm / norm;
  return norm;
}

Mat standard_normal(Index rows, Index cols, Rng& rng) {
  std::normal_distribution<double> dist(0.0, 1.0);
  Mat out(rows, cols);
  for (Index j = 0; j < cols; ++j) {
    for (Index i = 0; i < rows; ++i) out(i, j) = dist(rng);
  }
  return out;
}

Mat uniform_box(const Vec& lo, const Vec& hi, Index cols, Rng& rng) {
  std::uniform_real_distribution<double> dist(0.0, 1.0);
  Mat out(lo.size(), cols);
  for (Index j = 0; j < cols; ++j) {
    for (Index i = 0; i < lo.size(); ++i) out(i, j) = lo(i) + (hi(i) - lo(i)) * dist(rng);
  }
  return out;
}

std::uint64_t mix_seed(std::uint64_t base, std::uint64_t stream) noexcept {
  std::uint64_t z = base + 0x9e3779b97f4a7c15ULL * (stream + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

double pairwise_sum(std::span<const double> xs) noexcept {
  constexpr std::size_t kLeaf = 8;
  if (xs.size() <= kLeaf) {
    double s = 0.0;
    for (double x : xs) s += x;
    return s;
  }
  const std::size_t half = xs.size() / 2;
  return pairwise_sum(xs.first(half)) + pairwise_sum(xs.subspan(half));
}

} // namespace mixem
