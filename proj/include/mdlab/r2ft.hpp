#pragma once

#include <string>
#include <utility>
#include <vector>

#include "mdlab/corpus.hpp"
#include "mdlab/decoding.hpp"
#include "mdlab/denoiser.hpp"

namespace mdlab {

// Rule-based corruption: a repetition unit sampled at the context boundary is
// cycled over a span, with an optional EOS dropped at a random position
// inside the span.
struct CorruptionConfig {
  int g_max = 8;   // max repetition-unit length
  int z_min = 4;   // repetition span bounds
  int z_max = 64;
  bool eos_insert = true;

  void validate() const {
    if (g_max < 1 || z_min < 1 || z_min > z_max)
      throw std::invalid_argument("CorruptionConfig: need g_max >= 1 and 1 <= z_min <= z_max");
  }
};

// Corrupted window: x_0[0:c] ++ cyclic repetition of x_0[c-g:c] to length z
// ++ PAD to L. Draw order from `rng`: c, then g (resampled while g > c),
// then z, then the EOS position when eos_insert is set.
std::vector<int> corrupt(const Example& ex, int L, const CorruptionConfig& cfg,
                         const VocabSpec& vocab, Rng& rng);

// A shared masked context plus two target sets over its masked positions:
// the clean continuation y_w (answer suffix + its terminating EOS) and the
// corrupted continuation y_l (the repeated span).
struct PreferencePair {
  SequenceState context;
  std::vector<std::pair<int, int>> y_w;  // (position, token)
  std::vector<std::pair<int, int>> y_l;
};

PreferencePair make_preference_pair(const Example& ex, int L, const CorruptionConfig& cfg,
                                    const VocabSpec& vocab, Rng& rng);

// Sum over target positions of log row[token] from a single denoiser call on
// the shared context. Targets outside the support yield -inf.
double seq_logprob(const Denoiser& denoiser, const SequenceState& context,
                   std::span<const std::pair<int, int>> targets);
double seq_logprob_from_grid(const ProbGrid& grid, std::span<const std::pair<int, int>> targets);

// Penalty gate sigma(beta * logp_l/|y_l| - beta * logp_w/|y_w|); tends to 0
// for unlikable negatives (logp_l -> -inf).
double penalty_s(double logp_w, int len_w, double logp_l, int len_l, double beta);

// L = -(gamma/|y_w|) logpi(y_w|x) - log sigma(beta logpi(y_w|x)/|y_w| - beta logpi(y_l|x)/|y_l|).
double r2ft_loss(const LinearDenoiser& denoiser, const PreferencePair& pair, double gamma,
                 double beta);

Gradient grad_r2ft(const DenoiserParams& params, const PreferencePair& pair, double gamma,
                   double beta);

// Standalone d(seq_logprob)/d(params); kept separate from grad_r2ft so the
// reject-term identity can be checked across two code paths.
Gradient seq_logprob_grad(const DenoiserParams& params, const SequenceState& context,
                          std::span<const std::pair<int, int>> targets);

struct R2ftConfig {
  int steps = 300;
  double lr = 0.05;
  int batch = 8;
  double gamma = 0.1;
  double beta = 1.0;
  CorruptionConfig corruption;
  uint64_t seed = 7;
  int window_L = 256;
  int val_every = 30;
  int val_pairs = 64;
  // mean-log-prior probe: top-k samples decoded at each validation point
  int probe_samples = 6;
  int probe_topk = 5;
  int probe_steps = 32;

  void validate() const;
};

struct R2ftHistoryRow {
  int step = 0;
  double loss = 0.0;       // running mean training loss since the last row
  double loss_w = 0.0;     // validation -logpi(y_w|x)/|y_w|
  double loss_l = 0.0;     // validation -logpi(y_l|x)/|y_l|
  double mean_log_prior = 0.0;
};

// Post-SFT preference stage. Pairs are built on the fly (y_w clean, y_l
// corrupted); validation tracks the per-branch losses and the mean log prior
// of top-k samples decoded from held-out prompts.
std::vector<R2ftHistoryRow> train_r2ft(LinearDenoiser& denoiser, std::span<const Example> corpus,
                                       const VocabSpec& vocab, const PriorTable& prior,
                                       const R2ftConfig& config);

void save_history_csv(const std::string& path, std::span<const R2ftHistoryRow> rows);

}  // namespace mdlab
