#pragma once

// Outer EM for joint posterior and noise estimation: each iteration trains the
// conditional flow for a few optimizer steps at the current (a, b) (E-step),
// then draws K posterior samples for the repeated observations and runs the
// closed-form inner EM on them (M-step). A grid baseline that trains one flow
// per fixed (a, b) lives here as well.

#include "mixem/flow.hpp"
#include "mixem/forward_op.hpp"
#include "mixem/losses.hpp"
#include "mixem/noise_model.hpp"

#include <functional>
#include <optional>
#include <vector>

namespace mixem {

enum class LossKind { Forward, Reverse };

[[nodiscard]] std::string to_string(LossKind kind);
[[nodiscard]] LossKind loss_kind_from_string(std::string_view name);

struct EMConfig {
  int outer_iterations = 300;     ///< R
  int estep_steps = 10;           ///< P
  int inner_steps = 20;           ///< L
  Index posterior_samples = 500;  ///< K
  LossKind loss = LossKind::Forward;
  Index elbo_samples = 500;       ///< m_elbo, per observation
  int validate_every = 1;
  Index forward_batch = 256;      ///< fresh (x, y) pairs per forward-KL step
  Index reverse_batch = 128;      ///< latent draws per reverse-KL step, spread over observations
  double learning_rate = 1e-3;
  double clip_norm = 10.0;        ///< reverse-KL gradient clipping
  double init_factor = 5.0;
  std::uint64_t seed = 0;
  FlowArchitecture flow;

  /// R = 300, K = 500, m_elbo = 500.
  [[nodiscard]] static EMConfig desk();
  /// R = 5000, K = 2000, m_elbo = 2000.
  [[nodiscard]] static EMConfig full();

  void validate(Index observations) const;
};

struct TraceRow {
  int iter = 0;
  NoiseParams theta;
  double elbo = 0.0;
  double elbo_se = 0.0;
};

struct Snapshot {
  ParamVector params;
  NoiseParams theta;
  double elbo = 0.0;
  int iter = 0;
};

struct EMState {
  ConditionalFlow flow;
  NoiseParams theta;
  int iteration = 0; ///< completed outer iterations
  AdamState adam;
  std::vector<TraceRow> trace;
  std::optional<Snapshot> best;
};

/// Thrown when the loss or the noise estimate stops being finite. Carries a
/// checkpoint-format dump of the state at the time of failure.
class EMAborted : public std::runtime_error {
public:
  EMAborted(const std::string& what, Json dump) : std::runtime_error(what), dump_(std::move(dump)) {}
  [[nodiscard]] const Json& dump() const noexcept { return dump_; }

private:
  Json dump_;
};

/// Starting point above the truth: a0 = factor * std(all entries of ys),
/// b0 = factor * std / mean|ys|, both clamped to [1e-4, 10].
[[nodiscard]] NoiseParams init_theta(const Mat& ys, double factor = 5.0);

[[nodiscard]] EMState start_em(ConditionalFlow flow, const NoiseParams& theta0, const EMConfig& cfg);

/// Mean ELBO over the observations, with latents from a stream derived from
/// `seed`. The standard error combines the per-observation errors.
[[nodiscard]] ElboEstimate validation_elbo(const ConditionalFlow& flow, const Mat& ys,
                                           const NoiseParams& theta, const Prior& prior,
                                           const ForwardOperator& op, Index m, std::uint64_t seed);

/// Seed of the validation stream at outer iteration `iter`.
[[nodiscard]] std::uint64_t validation_seed(const EMConfig& cfg, int iter) noexcept;

/// One E-step optimizer update at fixed theta; returns the loss.
double estep_update(ConditionalFlow& flow, AdamState& adam, const ForwardOperator& op,
                    const Prior& prior, const Mat& ys, const NoiseParams& theta,
                    const EMConfig& cfg, Rng& rng);

/// Repeats observation i about K / N times (remainder round-robin), draws one
/// posterior sample per repeat and caches F of it.
[[nodiscard]] PairBatch posterior_batch(const ConditionalFlow& flow, const ForwardOperator& op,
                                        const Mat& ys, Index k, Rng& rng);

using IterationCallback = std::function<void(const EMState&)>;

/// Runs outer iterations until cfg.outer_iterations are complete. Resumes from
/// state.iteration, so a loaded checkpoint continues where it stopped.
[[nodiscard]] EMState run_em(const ForwardOperator& op, const Prior& prior, const Mat& ys,
                             EMState state, const EMConfig& cfg,
                             const IterationCallback& on_iteration = {});

[[nodiscard]] Json to_json(const EMState& state);
[[nodiscard]] EMState em_state_from_json(const Json& doc);
void save_checkpoint(const EMState& state, const std::filesystem::path& path);
[[nodiscard]] EMState load_checkpoint(const std::filesystem::path& path);

struct GridConfig {
  Vec a_grid;
  Vec b_grid;
  int steps_per_point = 1200;

  /// 8 points on [0.001, 0.03] for a and 8 on [0.01, 0.2] for b.
  [[nodiscard]] static GridConfig standard();
  [[nodiscard]] static GridConfig equispaced(double a_lo, double a_hi, Index na, double b_lo,
                                             double b_hi, Index nb, int steps);
  void validate() const;
};

struct GridCell {
  NoiseParams theta;
  ElboEstimate elbo;
};

struct GridResult {
  NoiseParams best_theta;
  ConditionalFlow best_flow;
  std::size_t best_index = 0;
  std::vector<GridCell> table; ///< a-major: index = ia * |b grid| + ib
};

/// Trains a fresh flow at every grid point and keeps the one with the largest
/// validation ELBO.
[[nodiscard]] GridResult run_grid(const ForwardOperator& op, const Prior& prior, const Mat& ys,
                                  const GridConfig& grid, const EMConfig& cfg);

} // namespace mixem
