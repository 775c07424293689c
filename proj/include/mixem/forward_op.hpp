#pragma once

// Forward operators F: R^d -> R^n and synthetic measurement generation.

#include "mixem/diffcore.hpp"
#include "mixem/noise_model.hpp"
#include "mixem/serialize.hpp"

#include <filesystem>
#include <optional>
#include <vector>

namespace mixem {

/// Axis-aligned box [lo, hi]. Prior support and histogram range.
struct Box {
  Vec lo;
  Vec hi;

  [[nodiscard]] Index dim() const noexcept { return lo.size(); }
  void validate() const;
  [[nodiscard]] static Box cube(Index d, double lo, double hi);
};

enum class OperatorKind { Linear, AffineSine, Square, Surrogate };

[[nodiscard]] std::string to_string(OperatorKind kind);

class ForwardOperator {
public:
  /// F(x) = A x + c.
  static ForwardOperator linear(Mat matrix, Vec offset);
  static ForwardOperator linear(Mat matrix);
  /// F(x) = A x + c + amplitude * sin(W x).
  static ForwardOperator affine_sine(Mat matrix, Vec offset, Mat frequencies, double amplitude);
  /// F_j(x) = x_j^2 where squared[j], else x_j (so n = d).
  static ForwardOperator square(std::vector<bool> squared);
  /// F(x) = scale .* net(x) + shift.
  static ForwardOperator surrogate(std::vector<Index> widths, Activation act,
                                   const std::vector<double>& weights, Vec out_scale,
                                   Vec out_shift);

  [[nodiscard]] OperatorKind kind() const noexcept { return kind_; }
  [[nodiscard]] Index input_dim() const noexcept { return d_; }
  [[nodiscard]] Index output_dim() const noexcept { return n_; }

  [[nodiscard]] Vec eval(const Vec& x) const;
  /// Columns are points.
  [[nodiscard]] Mat eval_batch(const Mat& xs) const;
  /// Column i is J_F(xs_i)^T grad_out_i.
  [[nodiscard]] Mat vjp(const Mat& xs, const Mat& grad_out) const;

  // surrogate internals; empty for the analytic kinds
  [[nodiscard]] const DenseNet& net() const noexcept { return net_; }
  [[nodiscard]] const ParamVector& net_params() const noexcept { return params_; }
  [[nodiscard]] const Vec& out_scale() const noexcept { return out_scale_; }
  [[nodiscard]] const Vec& out_shift() const noexcept { return out_shift_; }
  /// FNV-1a of the serialized weights (surrogates only).
  [[nodiscard]] const std::string& checksum() const noexcept { return checksum_; }

  [[nodiscard]] Json to_json() const;
  [[nodiscard]] static ForwardOperator from_json(const Json& doc);

private:
  ForwardOperator() = default;
  void check_input(Index rows) const;

  OperatorKind kind_ = OperatorKind::Linear;
  Index d_ = 0;
  Index n_ = 0;
  Mat matrix_;
  Vec offset_;
  Mat freq_;
  double amplitude_ = 0.0;
  std::vector<bool> squared_;
  DenseNet net_;
  ParamVector params_;
  Vec out_scale_;
  Vec out_shift_;
  std::string checksum_;
};

void save_surrogate(const ForwardOperator& op, const std::filesystem::path& path);
[[nodiscard]] ForwardOperator load_surrogate(const std::filesystem::path& path);

/// Random tanh network whose outputs are affinely recalibrated per
/// coordinate so that 10^4 probe points in `box` map onto [0, 1].
[[nodiscard]] ForwardOperator make_random_surrogate(Index d, Index n,
                                                    const std::vector<Index>& hidden,
                                                    std::uint64_t seed, const Box& box);

struct MeasurementTruth {
  Mat xs; ///< d x N, one ground-truth point per observation
  NoiseParams theta;
};

struct MeasurementSet {
  Mat ys; ///< n x N
  Index d = 0;
  Box prior_box;
  std::optional<MeasurementTruth> truth;
  std::uint64_t seed = 0;

  [[nodiscard]] Index n() const noexcept { return ys.rows(); }
  [[nodiscard]] Index count() const noexcept { return ys.cols(); }
  void validate() const;
};

[[nodiscard]] Json to_json(const MeasurementSet& m);
[[nodiscard]] MeasurementSet measurements_from_json(const Json& doc);
void save_measurements(const MeasurementSet& m, const std::filesystem::path& path);
[[nodiscard]] MeasurementSet load_measurements(const std::filesystem::path& path);

/// x_i ~ U(box), y_i = sample_noisy(F(x_i), theta).
[[nodiscard]] MeasurementSet simulate_measurements(const ForwardOperator& op,
                                                   const NoiseParams& theta, const Box& box,
                                                   Index count, std::uint64_t seed);

} // namespace mixem
