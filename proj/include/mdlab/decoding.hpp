#pragma once

#include <optional>
#include <string>
#include <vector>

#include "mdlab/denoiser.hpp"
#include "mdlab/grid.hpp"
#include "mdlab/rng.hpp"
#include "mdlab/schedule.hpp"
#include "mdlab/state.hpp"
#include "mdlab/vocab.hpp"

namespace mdlab {

enum class BaseSampler { categorical, topk_glob, llada };
enum class Direction { left_context, bidirectional };

struct ConvSettings {
  int kernel = 128;      // K, even, >= 2; counting window is [i-K/2, i+K/2]
  double lambda = 1.0;   // g(u) = tanh(lambda * u)
};

// One decoding configuration: base sampler + modifiers + flags. Modifiers are
// applied per step in the fixed order rep_penalty -> top-k -> conv; conv and
// semi-AR are competing window-narrowing mechanisms and exclude each other.
struct DecodePolicy {
  BaseSampler base = BaseSampler::categorical;
  int topk = 20;                        // used when base == topk_glob
  std::optional<ConvSettings> conv;
  std::optional<int> semi_ar_blocks;    // b; blocks run left to right
  bool eos_fill = false;
  bool cache = false;
  std::optional<double> rep_penalty;    // rho in (0,1)
  Direction direction = Direction::left_context;

  void validate(int L, int S, int V) const;  // throws std::invalid_argument
  std::string describe() const;
};

struct TraceEvent {
  int step = 0;
  int position = 0;
  int token = 0;
  bool fill = false;  // committed by EOS-fill rather than the base sampler
};

struct StepInfo {
  bool denoiser_call = false;
  int events = 0;
};

// Ordered unmask events plus per-step denoiser-call flags; sufficient to
// reconstruct the run (replay) and all speed metrics.
struct TraceLog {
  std::vector<TraceEvent> events;
  std::vector<StepInfo> steps;
  SequenceState final_state;
  int window = 0;
  int total_steps = 0;

  int denoiser_calls() const {
    int n = 0;
    for (const StepInfo& s : steps) n += s.denoiser_call;
    return n;
  }
};

struct RunStats {
  int clamped_draws = 0;     // positions whose unmask probability was clamped to 1
  int masked_remaining = 0;  // masked slots left in the final state
};

struct DecodeResult {
  SequenceState state;
  TraceLog trace;
  RunStats stats;
};

// A span of given context to commit before decoding starts.
struct PromptSpan {
  int start = 0;
  std::vector<int> tokens;
};

// --- per-step operations -----------------------------------------------------

// Carry-over/unmask rule: every committed position is untouched;
// each masked position with row mass m unmasks with probability
// min(1, multiplier * m), drawing its token proportionally to the row.
// Returns the number of clamped rows via `clamped`.
int step_categorical(SequenceState& state, const ProbGrid& weights, double multiplier, Rng& rng,
                     int step_index, std::vector<TraceEvent>& events, int* clamped = nullptr);

// Keep the k largest entries per row (ties to the lower token id), zero the
// rest, then scale every survivor by total-before / total-surviving so the
// window-total mass is preserved. All-zero rows are inactive and untouched.
void apply_topk_glob(ProbGrid& weights, int k);

// Row i is scaled by s_i = tanh(lambda * u_i), u_i = committed positions in
// [i-K/2, i+K/2] (prompt tokens count); one global factor then restores the
// pre-transform total. If every active row is blocked the grid stays zero.
void apply_conv(ProbGrid& weights, const SequenceState& state, int kernel, double lambda);

// Entries of tokens already present in the window (prompt or decoded) are
// multiplied by rho; each row is then rescaled back to its prior row mass.
void apply_rep_penalty(ProbGrid& weights, const SequenceState& state, double rho);

// Unmask exactly min(s, remaining masks) positions, in descending order of
// confidence (max row entry; ties to the lower position), each to its argmax
// token (ties to the lower token id).
int step_llada(SequenceState& state, const ProbGrid& weights, int s, int step_index,
               std::vector<TraceEvent>& events);

// If any committed slot holds EOS, every masked position right of the
// leftmost EOS becomes EOS. Idempotent. Returns the filled positions.
std::vector<int> apply_eos_fill(SequenceState& state, int eos_id);

// --- full runs -----------------------------------------------------------------

// Runs S reverse steps (b sequential sub-runs of S/b steps over blocks under
// semi-AR). Per step: obtain the grid (cached when the flag is set and the
// previous step changed nothing), apply modifiers, sample with the base rule,
// then EOS-fill if flagged.
DecodeResult decode(const Denoiser& denoiser, const std::vector<PromptSpan>& prompts,
                    const DecodePolicy& policy, int L, int S, Rng& rng);

// Trace file: CSV with header step,position,token,denoiser_call. One row per
// event (denoiser_call empty) plus one summary row per step (position and
// token empty, denoiser_call 0/1).
std::string trace_to_csv(const TraceLog& trace);
void save_trace_csv(const std::string& path, const TraceLog& trace);

struct LoadedTrace {
  std::vector<TraceEvent> events;  // fill flags not recoverable from file; see replay
  std::vector<StepInfo> steps;
};
LoadedTrace load_trace_csv(const std::string& path);

}  // namespace mdlab
