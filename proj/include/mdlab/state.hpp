#pragma once

#include <span>
#include <stdexcept>
#include <vector>

#include "mdlab/rng.hpp"
#include "mdlab/schedule.hpp"

namespace mdlab {

struct Span {
  int begin = 0;
  int end = 0;  // half-open
};

// A fixed-length decoding window. Every slot is either Masked or a committed
// token; commits are absorbing: a committed slot never changes for the rest
// of a run. Prompt spans record which regions were given as context (a
// right-side span is allowed for bidirectional decoding).
class SequenceState {
 public:
  static constexpr int kMasked = -1;

  SequenceState() = default;
  explicit SequenceState(int length) : slots_(static_cast<size_t>(length), kMasked) {
    if (length < 1) throw std::invalid_argument("SequenceState: length must be >= 1");
  }

  static SequenceState from_tokens(std::span<const int> tokens) {
    SequenceState s(static_cast<int>(tokens.size()));
    for (size_t i = 0; i < tokens.size(); ++i) s.slots_[i] = tokens[i];
    return s;
  }

  int length() const { return static_cast<int>(slots_.size()); }
  bool is_masked(int i) const { return slots_.at(static_cast<size_t>(i)) == kMasked; }

  int token(int i) const {
    const int t = slots_.at(static_cast<size_t>(i));
    if (t == kMasked) throw std::logic_error("SequenceState::token: slot is masked");
    return t;
  }

  // Absorbing commit: masked -> token, once.
  void commit(int i, int tok) {
    int& slot = slots_.at(static_cast<size_t>(i));
    if (slot != kMasked) throw std::logic_error("SequenceState::commit: slot already committed");
    if (tok < 0) throw std::invalid_argument("SequenceState::commit: invalid token");
    slot = tok;
  }

  // Forcibly clear a slot. Only forward_mask uses this; decode paths never do.
  void clear_for_forward_process(int i) {
    if (in_prompt(i)) throw std::logic_error("clear_for_forward_process: prompt slot");
    slots_.at(static_cast<size_t>(i)) = kMasked;
  }

  void add_prompt_span(int begin, std::span<const int> tokens) {
    const int end = begin + static_cast<int>(tokens.size());
    if (begin < 0 || end > length() || tokens.empty())
      throw std::invalid_argument("add_prompt_span: span out of range");
    for (size_t k = 0; k < tokens.size(); ++k) {
      int& slot = slots_[static_cast<size_t>(begin) + k];
      if (slot != kMasked) throw std::logic_error("add_prompt_span: slot already committed");
      slot = tokens[k];
    }
    prompt_spans_.push_back({begin, end});
  }

  bool in_prompt(int i) const {
    for (const Span& s : prompt_spans_)
      if (i >= s.begin && i < s.end) return true;
    return false;
  }

  const std::vector<Span>& prompt_spans() const { return prompt_spans_; }

  int masked_count() const {
    int n = 0;
    for (int s : slots_) n += (s == kMasked);
    return n;
  }

  int unmasked_count() const { return length() - masked_count(); }

  int step_clock() const { return step_clock_; }
  void set_step_clock(int s) { step_clock_ = s; }

  bool operator==(const SequenceState& o) const {
    return slots_ == o.slots_;  // spans are metadata, not content
  }

 private:
  std::vector<int> slots_;
  std::vector<Span> prompt_spans_;
  int step_clock_ = 0;
};

// Absorbing forward process: each non-prompt position independently becomes
// Masked with probability 1 - alpha(t). Positions are visited in ascending
// order so the draw sequence is reproducible.
inline SequenceState forward_mask(const SequenceState& x0, const NoiseSchedule& sched, double t,
                                  Rng& rng) {
  if (x0.masked_count() != 0) throw std::invalid_argument("forward_mask: x0 must be fully tokenized");
  const double p_mask = 1.0 - schedule_alpha(sched, t);
  SequenceState out = x0;
  for (int i = 0; i < out.length(); ++i) {
    if (out.in_prompt(i)) continue;
    if (rng.uniform() < p_mask) out.clear_for_forward_process(i);
  }
  return out;
}

}  // namespace mdlab
