#pragma once

#include <string>
#include <vector>

#include "mdlab/corpus.hpp"
#include "mdlab/decoding.hpp"
#include "mdlab/denoiser.hpp"

namespace mdlab {

// Per-distance masses of the two context-free token classes plus the top-k
// candidate table. Tokens in both classes count toward both masses.
struct ZoneRow {
  int distance = 0;
  double high_prior_mass = 0.0;
  double repetition_mass = 0.0;
  std::vector<std::pair<int, double>> topk;  // rank -> (token, probability)
};

struct CandidateZoneReport {
  std::vector<ZoneRow> rows;
};

// One denoiser call on the all-masked continuation of the prompt; distance d
// indexes position prompt_len + d.
CandidateZoneReport candidate_zone(const Denoiser& denoiser, std::span<const int> prompt, int k,
                                   int L, const PriorTable& prior, const VocabSpec& vocab);

std::string zone_to_csv(const CandidateZoneReport& report);

// Mean log prior over content tokens (pre-EOS region; EOS/PAD excluded).
double mean_log_prior(std::span<const int> sequence, const PriorTable& prior,
                      const VocabSpec& vocab);

struct PplSample {
  double ppl = 0.0;
  bool zero_length = false;  // counted as an outlier regardless of value
};

// Fraction of samples with ppl inside [mu - 2 sigma, mu + 2 sigma].
double inlier_rate(std::span<const PplSample> samples, double mu, double sigma);

struct SpeedReport {
  int L_star = 0;          // content tokens before the first EOS
  int S_star = 0;          // actual denoiser calls
  double L_star_norm = 0;  // externally supplied normalizer
  double tokens_per_step = 0.0;  // L_star_norm / S_star
  int L_star_total = 0;    // total unmasked tokens (all trace events)
  double r_star = 0.0;     // L_star_total / S
};

SpeedReport speed_report(const TraceLog& trace, int S, double L_star_norm, const VocabSpec& vocab);

struct TraceViolation {
  std::string rule;
  int step = -1;
  int position = -1;
};

// Replays a trace against its reconstructed initial state and checks the
// structural rules implied by the policy: absorbing uniqueness, semi-AR block
// ordering, conv locality, LLADA per-step counts, and the EOS-fill rule.
std::vector<TraceViolation> validate_trace(const DecodePolicy& policy, const TraceLog& trace,
                                           const VocabSpec& vocab);

}  // namespace mdlab
