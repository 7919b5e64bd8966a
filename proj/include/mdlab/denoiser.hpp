#pragma once

#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "mdlab/corpus.hpp"
#include "mdlab/grid.hpp"
#include "mdlab/rng.hpp"
#include "mdlab/schedule.hpp"
#include "mdlab/state.hpp"
#include "mdlab/vocab.hpp"

namespace mdlab {

// Per-position predictor interface. Implementations are time-independent:
// the same state always yields the same grid, which is what makes output
// caching across no-op steps valid.
class Denoiser {
 public:
  virtual ~Denoiser() = default;
  virtual ProbGrid predict(const SequenceState& state) const = 0;
  virtual int support() const = 0;
};

enum class KernelKind { inverse };  // kappa(d) = 1/(1+d), truncated past the radius

struct DenoiserParams {
  int V = 0;
  std::vector<double> bias;   // V
  std::vector<double> assoc;  // V x V row-major: assoc[src * V + dst]
  KernelKind kernel = KernelKind::inverse;
  int radius = 8;

  static DenoiserParams zeros(int V, int radius);

  double kappa(int d) const {
    return (d >= 1 && d <= radius) ? 1.0 / (1.0 + static_cast<double>(d)) : 0.0;
  }
  double assoc_at(int src, int dst) const { return assoc[static_cast<size_t>(src) * V + dst]; }
  double& assoc_at(int src, int dst) { return assoc[static_cast<size_t>(src) * V + dst]; }
};

DenoiserParams random_params(int V, int radius, double scale, Rng& rng);

// Gradient with the same shape as DenoiserParams.
struct Gradient {
  std::vector<double> bias;
  std::vector<double> assoc;

  static Gradient zeros(const DenoiserParams& p);
  void axpy(double a, const Gradient& other);
  void scale(double a);
  double max_abs() const;
};

// logit(i, v) = bias[v] + sum over committed j != i of assoc[token_j, v] * kappa(|i-j|),
// row_i = softmax(logit(i, .)). No time input by design.
class LinearDenoiser : public Denoiser {
 public:
  explicit LinearDenoiser(DenoiserParams params) : params_(std::move(params)) {}

  ProbGrid predict(const SequenceState& state) const override;
  int support() const override { return params_.V; }

  // Rows for selected positions only; identical values to predict().
  void predict_rows(const SequenceState& state, std::span<const int> positions, ProbGrid& out) const;

  const DenoiserParams& params() const { return params_; }
  DenoiserParams& params() { return params_; }

 private:
  DenoiserParams params_;
};

// Context-free rows; useful as a sampler test bed and speed baseline.
class UniformDenoiser : public Denoiser {
 public:
  explicit UniformDenoiser(int V) : V_(V) {}
  ProbGrid predict(const SequenceState& state) const override;
  int support() const override { return V_; }

 private:
  int V_;
};

// Replays a fixed grid regardless of state (window length must match).
class FixedGridDenoiser : public Denoiser {
 public:
  explicit FixedGridDenoiser(ProbGrid grid) : grid_(std::move(grid)) {}
  ProbGrid predict(const SequenceState& state) const override;
  int support() const override { return grid_.cols(); }

 private:
  ProbGrid grid_;
};

enum class OracleMethod { forward_backward, brute_force };

// Exact per-position posterior under the corpus chain given every committed
// token in the window. forward_backward propagates messages along the chain
// in O(L * V^2); brute_force enumerates masked runs and refuses gaps above
// its bound.
class OracleDenoiser : public Denoiser {
 public:
  OracleDenoiser(CorpusModel model, OracleMethod method = OracleMethod::forward_backward,
                 int gap_bound = 6);
  ProbGrid predict(const SequenceState& state) const override;
  int support() const override { return model_.vocab.support(); }

 private:
  ProbGrid predict_fb(const SequenceState& state) const;
  ProbGrid predict_brute(const SequenceState& state) const;

  CorpusModel model_;
  OracleMethod method_;
  int gap_bound_;
};

// --- training --------------------------------------------------------------

inline constexpr int kIgnoreTarget = -1;

// An example serialized into a length-L window: prompt committed as a span,
// response follows, the rest EOS-filled. Targets mark which positions carry
// loss; with attend_full_eos_fill=false only the response plus the EOS that
// immediately follows it are attended.
struct WindowedExample {
  SequenceState x0;
  std::vector<int> targets;
};

WindowedExample serialize_window(const Example& ex, const VocabSpec& vocab, int L,
                                 bool attend_full_eos_fill);

// Discretized simplified objective: w_t * sum over masked, attended positions
// of -log row[target], with w_t = dt / (1 - alpha(t)).
double nelbo_loss(const LinearDenoiser& denoiser, const WindowedExample& windowed,
                  const SequenceState& masked, const NoiseSchedule& sched, double t);

// Adds `batch_scale * w_t * d(loss)/d(params)` for one example into `out`.
void accumulate_nelbo_grad(const DenoiserParams& params, const WindowedExample& windowed,
                           const SequenceState& masked, const NoiseSchedule& sched, double t,
                           double batch_scale, Gradient& out);

struct BatchItem {
  const WindowedExample* windowed;
  const SequenceState* masked;
};

Gradient grad_nelbo(const DenoiserParams& params, std::span<const BatchItem> batch,
                    const NoiseSchedule& sched, double t);

struct TrainConfig {
  int steps = 4000;
  double lr = 0.5;
  int batch = 16;
  uint64_t seed = 1;
  int window_L = 256;
  int schedule_steps = 32;           // t sampled uniformly on this dt grid
  bool attend_full_eos_fill = false; // true for SFT-only models
  int checkpoint_every = 250;
  double holdout_frac = 0.1;

  void validate() const;
};

struct SftReport {
  std::vector<std::pair<int, double>> checkpoints;  // (step, held-out loss)
  double initial_loss = 0.0;
  double final_loss = 0.0;
};

SftReport train_sft(LinearDenoiser& denoiser, std::span<const Example> corpus,
                    const VocabSpec& vocab, const TrainConfig& config);

// Parameter file IO. Numbers are written with 17 significant digits so a
// round-trip reproduces the exact doubles.
inline constexpr const char* kParamsFormatVersion = "mdlab-params-1";
void save_params(const std::string& path, const DenoiserParams& params);
DenoiserParams load_params(const std::string& path);

}  // namespace mdlab
