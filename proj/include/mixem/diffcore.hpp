#pragma once

// Small differentiable substrate: flat parameter storage with named segments,
// batched dense networks with hand-derived backward passes, and Adam.

#include <Eigen/Core>

#include <cmath>
#include <concepts>
#include <cstdint>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace mixem {

using Index = Eigen::Index;
using Vec = Eigen::VectorXd;
using Mat = Eigen::MatrixXd;
using Rng = std::mt19937_64;

/// Raised when a NaN or infinity shows up where a finite value is required.
class NumericalError : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

struct Segment {
  std::string name;
  std::size_t offset = 0;
  Index rows = 0;
  Index cols = 0;

  [[nodiscard]] std::size_t size() const noexcept {
    return static_cast<std::size_t>(rows * cols);
  }
};

/// Flat real-valued parameter storage. Each segment is a column-major matrix
/// view into the shared buffer.
class ParamVector {
public:
  ParamVector() = default;

  /// Appends a zero-filled segment and returns its id.
  std::size_t add_segment(std::string name, Index rows, Index cols);

  [[nodiscard]] std::size_t size() const noexcept { return values_.size(); }
  [[nodiscard]] std::span<double> values() noexcept { return values_; }
  [[nodiscard]] std::span<const double> values() const noexcept { return values_; }
  [[nodiscard]] const std::vector<Segment>& segments() const noexcept { return segments_; }

  [[nodiscard]] Eigen::Map<Mat> block(std::size_t seg);
  [[nodiscard]] Eigen::Map<const Mat> block(std::size_t seg) const;

  [[nodiscard]] Eigen::Map<Vec> as_vector() { return {values_.data(), static_cast<Index>(values_.size())}; }
  [[nodiscard]] Eigen::Map<const Vec> as_vector() const {
    return {values_.data(), static_cast<Index>(values_.size())};
  }

  /// Same layout, all zeros.
  [[nodiscard]] ParamVector zeros_like() const;
  void set_zero() noexcept;
  [[nodiscard]] bool same_layout(const ParamVector& other) const noexcept;

  /// Throws NumericalError naming the first segment holding a non-finite value.
  void require_finite(std::string_view what) const;

private:
  // fixed base alignment keeps vectorized reductions bit-reproducible
  std::vector<double, Eigen::aligned_allocator<double>> values_;
  std::vector<Segment> segments_;
};

enum class Activation { Tanh, Relu, Identity };

[[nodiscard]] std::string to_string(Activation act);
[[nodiscard]] Activation activation_from_string(std::string_view name);

/// Fully connected network. Hidden layers use `hidden`, the output layer is
/// affine. The weights live in an external ParamVector so several networks
/// can share one optimizer state.
class DenseNet {
public:
  /// Activations of one batched forward pass, kept for the backward pass.
  struct Tape {
    std::vector<Mat> layers; // layers[0] is the input, layers[k] the output of layer k
  };

  DenseNet() = default;
  /// Registers the weight and bias segments of every layer in `params`.
  DenseNet(ParamVector& params, const std::string& prefix, std::vector<Index> widths,
           Activation hidden);

  [[nodiscard]] Index in_dim() const noexcept { return widths_.front(); }
  [[nodiscard]] Index out_dim() const noexcept { return widths_.back(); }
  [[nodiscard]] const std::vector<Index>& widths() const noexcept { return widths_; }
  [[nodiscard]] Activation activation() const noexcept { return hidden_; }
  [[nodiscard]] std::size_t num_layers() const noexcept { return weight_seg_.size(); }
  [[nodiscard]] std::size_t weight_segment(std::size_t layer) const { return weight_seg_.at(layer); }
  [[nodiscard]] std::size_t bias_segment(std::size_t layer) const { return bias_seg_.at(layer); }

  /// Inputs are columns; returns out_dim x batch.
  [[nodiscard]] Mat forward(const ParamVector& params, const Mat& input) const;
  Mat forward(const ParamVector& params, const Mat& input, Tape& tape) const;

  /// Accumulates dLoss/dparams into `grad` (skipped when null) and returns
  /// dLoss/dinput.
  Mat backward(const ParamVector& params, const Tape& tape, const Mat& grad_out,
               ParamVector* grad) const;

  /// Glorot-uniform hidden layers. With `zero_last` the output layer starts at
  /// zero so the network outputs zero everywhere.
  void init(ParamVector& params, Rng& rng, bool zero_last, double gain = 1.0) const;

private:
  std::vector<Index> widths_;
  Activation hidden_ = Activation::Tanh;
  std::vector<std::size_t> weight_seg_;
  std::vector<std::size_t> bias_seg_;
};

[[nodiscard]] Vec net_eval(const DenseNet& net, const ParamVector& params, const Vec& input);

/// A loss that writes its gradient into `grad` when it is non-null.
template <class F>
concept DifferentiableLoss = requires(const F& f, const ParamVector& p, ParamVector* g) {
  { f(p, g) } -> std::convertible_to<double>;
};

/// Exact gradient of `loss` at `at`. Throws NumericalError when the value or
/// any gradient segment is non-finite.
template <DifferentiableLoss F>
ParamVector grad(const F& loss, const ParamVector& at) {
  ParamVector g = at.zeros_like();
  const double value = loss(at, &g);
  if (!std::isfinite(value)) {
    throw NumericalError("loss is not finite at the requested point");
  }
  g.require_finite("gradient");
  return g;
}

struct AdamOptions {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct AdamState {
  std::uint64_t step = 0;
  Vec m;
  Vec v;
  AdamOptions options;

  AdamState() = default;
  AdamState(std::size_t n, AdamOptions opts)
      : m(Vec::Zero(static_cast<Index>(n))), v(Vec::Zero(static_cast<Index>(n))), options(opts) {}
};

/// One bias-corrected Adam update, in place.
void adam_step(AdamState& state, ParamVector& params, const ParamVector& gradient);

/// Rescales `g` so its Euclidean norm is at most `max_norm`; returns the norm
/// before clipping.
double clip_grad_norm(ParamVector& g, double max_norm);

// Random helpers.

[[nodiscard]] Mat standard_normal(Index rows, Index cols, Rng& rng);
[[nodiscard]] Mat uniform_box(const Vec& lo, const Vec& hi, Index cols, Rng& rng);

/// splitmix64 finalizer; used to derive independent stream seeds.
[[nodiscard]] std::uint64_t mix_seed(std::uint64_t base, std::uint64_t stream) noexcept;

/// Pairwise summation with a fixed split so results are bit-reproducible.
[[nodiscard]] double pairwise_sum(std::span<const double> xs) noexcept;

} // namespace mixem
