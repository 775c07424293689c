#pragma once

// Conditional normalizing flow built from affine coupling blocks.
//
// Block k splits the sample into an active and a passive part. With
// s = s_max * tanh(raw_s / s_max), raw_s = scale_net([passive; y]) and
// t = shift_net([passive; y]):
//
//   push: out_active = in_active .* exp(s) + t,   logdet += sum(s)
//   pull: in_active  = (out_active - t) .* exp(-s)
//
// Passive coordinates pass through unchanged.

#include "mixem/diffcore.hpp"
#include "mixem/serialize.hpp"

#include <filesystem>
#include <vector>

namespace mixem {

struct FlowArchitecture {
  int blocks = 6;
  std::vector<Index> hidden{64, 64};
  double scale_clamp = 2.0;
  Activation activation = Activation::Tanh;
  /// Std of Gaussian noise on the output-layer weights at construction. Zero
  /// gives an exact identity map; a small value breaks the symmetry that can
  /// keep a flow stuck at a unimodal fit of a symmetric target.
  double init_noise = 0.0;

  void validate() const;
};

class CouplingBlock {
public:
  CouplingBlock(ParamVector& params, int index, std::vector<Index> active,
                std::vector<Index> passive, Index cond_dim, const FlowArchitecture& arch);

  [[nodiscard]] const std::vector<Index>& active() const noexcept { return active_; }
  [[nodiscard]] const std::vector<Index>& passive() const noexcept { return passive_; }
  [[nodiscard]] const DenseNet& scale_net() const noexcept { return scale_net_; }
  [[nodiscard]] const DenseNet& shift_net() const noexcept { return shift_net_; }
  [[nodiscard]] double scale_clamp() const noexcept { return clamp_; }

  struct Tape {
    DenseNet::Tape scale;
    DenseNet::Tape shift;
    Mat s;      ///< clamped log-scales, active x batch
    Mat z_side; ///< active coordinates on the latent side of the affine map
  };

  /// Applies the block in place on `u` (d x B) and adds sum(s) to `logdet`.
  void push(const ParamVector& params, Mat& u, const Mat& y, Vec& logdet, Tape* tape) const;
  /// Inverse of push; subtracts sum(s) from `logdet`.
  void pull(const ParamVector& params, Mat& u, const Mat& y, Vec& logdet, Tape* tape) const;

  /// Backward through push. `g` holds dL/d(output) on entry and dL/d(input)
  /// on exit; `g_logdet` is dL/dlogdet per column.
  void push_backward(const ParamVector& params, const Tape& tape, Mat& g, const Vec& g_logdet,
                     ParamVector& grad) const;
  void pull_backward(const ParamVector& params, const Tape& tape, Mat& g, const Vec& g_logdet,
                     ParamVector& grad) const;

private:
  Mat conditioner_input(const Mat& u, const Mat& y) const;
  void scales(const ParamVector& params, const Mat& cin, Mat& s, Mat& t, Tape* tape) const;
  void backprop_conditioner(const ParamVector& params, const Tape& tape, const Mat& g_s,
                            const Mat& g_t, Mat& g, ParamVector& grad) const;

  std::vector<Index> active_;
  std::vector<Index> passive_;
  Index cond_dim_ = 0;
  double clamp_ = 2.0;
  DenseNet scale_net_;
  DenseNet shift_net_;
};

class ConditionalFlow {
public:
  struct Output {
    Mat values;
    Vec logdet;
  };
  struct Tape {
    std::vector<CouplingBlock::Tape> blocks;
  };

  /// Hidden layers are Glorot-initialized from `seed`; output layers are zero
  /// so the freshly built flow is the identity.
  ConditionalFlow(Index dim, Index cond_dim, FlowArchitecture arch, std::uint64_t seed);

  [[nodiscard]] Index dim() const noexcept { return dim_; }
  [[nodiscard]] Index cond_dim() const noexcept { return cond_dim_; }
  [[nodiscard]] const FlowArchitecture& architecture() const noexcept { return arch_; }
  [[nodiscard]] const std::vector<CouplingBlock>& blocks() const noexcept { return blocks_; }
  [[nodiscard]] const ParamVector& params() const noexcept { return params_; }
  [[nodiscard]] ParamVector& params() noexcept { return params_; }
  void set_params(const ParamVector& p);

  /// x = T(y, z) for column-wise batches; logdet = log|det dT/dz|.
  [[nodiscard]] Output push(const Mat& z, const Mat& y, Tape* tape = nullptr) const;
  /// z = T(y, .)^{-1}(x); logdet = log|det dT^{-1}/dx|.
  [[nodiscard]] Output pull(const Mat& x, const Mat& y, Tape* tape = nullptr) const;

  /// Accumulates parameter gradients given dL/dx and dL/dlogdet of a push.
  void push_backward(const Tape& tape, const Mat& g_x, const Vec& g_logdet, ParamVector& grad) const;
  /// Same for a pull, given dL/dz and dL/dlogdet.
  void pull_backward(const Tape& tape, const Mat& g_z, const Vec& g_logdet, ParamVector& grad) const;

  /// log p_Z(pull(x)) + log|det dT^{-1}/dx| per column.
  [[nodiscard]] Vec log_density(const Mat& x, const Mat& y) const;

  /// m independent pushes of standard-normal draws, all conditioned on y.
  [[nodiscard]] Mat sample(const Vec& y, Index m, Rng& rng) const;

  [[nodiscard]] Json to_json() const;
  [[nodiscard]] static ConditionalFlow from_json(const Json& doc);

private:
  void check_shapes(const Mat& u, const Mat& y) const;

  Index dim_;
  Index cond_dim_;
  FlowArchitecture arch_;
  ParamVector params_;
  std::vector<CouplingBlock> blocks_;
};

/// Standard-normal log density of each column.
[[nodiscard]] Vec standard_normal_logpdf(const Mat& z);

/// Single-point conveniences.
[[nodiscard]] std::pair<Vec, double> push(const ConditionalFlow& flow, const Vec& y, const Vec& z);
[[nodiscard]] std::pair<Vec, double> pull(const ConditionalFlow& flow, const Vec& y, const Vec& x);
[[nodiscard]] double log_density(const ConditionalFlow& flow, const Vec& y, const Vec& x);
[[nodiscard]] Mat sample_posterior(const ConditionalFlow& flow, const Vec& y, Index m, Rng& rng);

void save_flow(const ConditionalFlow& flow, const std::filesystem::path& path);
[[nodiscard]] ConditionalFlow load_flow(const std::filesystem::path& path);

/// Column y repeated `count` times.
[[nodiscard]] Mat repeat_column(const Vec& y, Index count);

} // namespace mixem
