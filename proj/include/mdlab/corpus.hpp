#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "mdlab/rng.hpp"
#include "mdlab/vocab.hpp"

namespace mdlab {

// One instruction/response pair over the content vocabulary. The response is
// stored without its terminating EOS; serialization into a window appends it.
struct Example {
  std::vector<int> prompt;
  std::vector<int> response;
};

// First-order generative model: prompts drawn uniformly from a template set,
// responses generated by a row-stochastic transition table seeded from the
// last prompt token, EOS absorbing. Rows cover content vocab + EOS.
struct CorpusModel {
  VocabSpec vocab;
  std::vector<std::vector<int>> templates;
  std::vector<double> trans;  // support() x support(), row-major
  int max_response_len = 80;
  uint64_t model_seed = 0;

  std::span<const double> row(int tok) const;
  void validate() const;
};

// Knobs for the designed toy corpus. Function words carry high marginal
// frequency and prompt tokens recur in responses at a controlled rate, so the
// far-from-context pathology is reproducible at desk scale. The frequent
// classes (function + question + common) cover exactly 100 token ids;
// anchors, starters, meaning tokens and the rare filler stay below the
// top-100 cut by a wide margin.
struct ToyCorpusParams {
  int n_function = 20;
  int n_templates = 18;
  int n_common = 40;
  int n_rare = 12;
  double anchor_sharpness = 0.88;  // p(starter | anchor)
  double eos_rate = 0.022;         // baseline EOS hazard in shared rows
  double repeat_rate = 0.20;       // mass routed back to same-template prompt tokens
  double stutter_rate = 0.15;      // immediate self-repetition in shared rows
  double smoothing = 0.02;         // total mass spread uniformly over every row
  int max_response_len = 80;
};

CorpusModel make_toy_corpus_model(uint64_t seed, const ToyCorpusParams& params = {});

// Token-class accessors for the toy layout (used by tests and reports).
struct ToyLayout {
  int function_begin, function_end;
  int anchor_begin, anchor_end;
  int starter_begin, starter_end;
  int common_begin, common_end;
  int rare_begin, rare_end;
  int tspec_begin, tspec_end;  // per template: q0,q1,q2,m0,m1
};
ToyLayout toy_layout(const ToyCorpusParams& params = {});

Example sample_example(const CorpusModel& model, Rng& rng);

// Deterministic given (seed, n): example k uses the stream mix_seed(seed, k),
// so generation may be sharded arbitrarily without changing the output.
std::vector<Example> generate_corpus(const CorpusModel& model, int n, uint64_t seed);

struct OracleScore {
  double logprob = 0.0;
  int length = 0;
  bool floored = false;  // a zero-probability transition hit the floor
};

// Exact log-likelihood of a response under the corpus process, conditioning
// on the prompt through its last token. Zero-probability transitions
// contribute the documented floor log(kOracleFloor) and set the flag.
inline constexpr double kOracleFloor = 1e-12;
OracleScore oracle_logprob(const CorpusModel& model, std::span<const int> response,
                           std::span<const int> prompt);
double oracle_ppl(const OracleScore& score);

struct CorpusPplStats {
  double mu = 0.0;
  double sigma = 0.0;
};
CorpusPplStats corpus_ppl_stats(const CorpusModel& model, std::span<const Example> corpus);

// Per-token empirical frequencies over prompt+response tokens, the derived
// log-prior, and the identity of the top-100 tokens (frequency desc, then
// token id asc). The zero-count floor is ln(1 / (10 * corpus token count)).
struct PriorTable {
  std::vector<double> freq;       // size support(); EOS never appears, so freq 0
  std::vector<double> log_prior;  // floored
  std::vector<int> top100;
  std::vector<uint8_t> is_top100;  // indexed by token id
  double floor_log = 0.0;

  bool is_top(int tok) const {
    return tok >= 0 && tok < static_cast<int>(is_top100.size()) && is_top100[tok] != 0;
  }
};

PriorTable compute_prior(const VocabSpec& vocab, std::span<const Example> corpus);

// Corpus file: JSON-lines. Header record carries version, vocab and seed;
// every following line is one example. UTF-8, LF endings.
inline constexpr const char* kCorpusFormatVersion = "mdlab-corpus-1";
inline constexpr const char* kPriorFormatVersion = "mdlab-prior-1";

struct CorpusFile {
  VocabSpec vocab;
  uint64_t seed = 0;
  std::vector<Example> examples;
};

void save_corpus(const std::string& path, const VocabSpec& vocab, uint64_t seed,
                 std::span<const Example> corpus);
CorpusFile load_corpus(const std::string& path);

void save_prior(const std::string& path, const PriorTable& prior);
PriorTable load_prior(const std::string& path);

}  // namespace mdlab
