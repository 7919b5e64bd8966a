#include "mdlab/decoding.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <sstream>

namespace mdlab {

void DecodePolicy::validate(int L, int S, int V) const {
  if (L < 1 || S < 1) throw std::invalid_argument("DecodePolicy: L and S must be positive");
  if (conv && semi_ar_blocks)
    throw std::invalid_argument("DecodePolicy: conv and semi-AR are mutually exclusive");
  if (eos_fill && direction != Direction::left_context)
    throw std::invalid_argument("DecodePolicy: eos_fill requires left-context direction");
  if (base == BaseSampler::topk_glob && (topk < 1 || topk > V))
    throw std::invalid_argument("DecodePolicy: top-k needs 1 <= k <= V");
  if (semi_ar_blocks) {
    const int b = *semi_ar_blocks;
    if (b < 1 || L % b != 0 || S % b != 0)
      throw std::invalid_argument("DecodePolicy: block count must divide both L and S");
  }
  if (conv) {
    if (conv->kernel < 2 || conv->kernel % 2 != 0)
      throw std::invalid_argument("DecodePolicy: conv kernel must be even and >= 2");
    if (conv->lambda <= 0.0) throw std::invalid_argument("DecodePolicy: conv lambda must be > 0");
  }
  if (rep_penalty && (*rep_penalty <= 0.0 || *rep_penalty >= 1.0))
    throw std::invalid_argument("DecodePolicy: rep_penalty must lie in (0,1)");
}

std::string DecodePolicy::describe() const {
  std::ostringstream s;
  switch (base) {
    case BaseSampler::categorical: s << "categorical"; break;
    case BaseSampler::topk_glob: s << "topk" << topk; break;
    case BaseSampler::llada: s << "llada"; break;
  }
  if (rep_penalty) s << "+penalty" << *rep_penalty;
  if (conv) s << "+conv" << conv->kernel;
  if (semi_ar_blocks) s << "+semiAR" << *semi_ar_blocks;
  if (eos_fill) s << "+eosfill";
  if (cache) s << "+cache";
  if (direction == Direction::bidirectional) s << "+bidir";
  return s.str();
}

int step_categorical(SequenceState& state, const ProbGrid& weights, double multiplier, Rng& rng,
                     int step_index, std::vector<TraceEvent>& events, int* clamped) {
  int unmasked = 0;
  for (int i = 0; i < state.length(); ++i) {
    if (!state.is_masked(i)) continue;  // carry-over branch
    const double mass = weights.row_sum(i);
    if (mass <= 0.0) continue;
    double p = multiplier * mass;
    if (p > 1.0) {
      p = 1.0;
      if (clamped) ++*clamped;
    }
    if (rng.uniform() < p) {
      const int token = static_cast<int>(rng.categorical(weights.row(i), mass));
      state.commit(i, token);
      events.push_back({step_index, i, token, false});
      ++unmasked;
    }
  }
  return unmasked;
}

void apply_topk_glob(ProbGrid& weights, int k) {
  if (k < 1 || k > weights.cols()) throw std::invalid_argument("apply_topk_glob: need 1 <= k <= V");
  const double before = weights.total();
  if (before <= 0.0) return;
  if (k == weights.cols()) return;  // identity

  std::vector<int> order(static_cast<size_t>(weights.cols()));
  for (int i = 0; i < weights.rows(); ++i) {
    auto row = weights.row(i);
    for (int v = 0; v < weights.cols(); ++v) order[static_cast<size_t>(v)] = v;
    // k largest entries; ties broken by lower token id
    std::partial_sort(order.begin(), order.begin() + k, order.end(), [&](int a, int b) {
      if (row[static_cast<size_t>(a)] != row[static_cast<size_t>(b)])
        return row[static_cast<size_t>(a)] > row[static_cast<size_t>(b)];
      return a < b;
    });
    std::vector<double> kept(static_cast<size_t>(k));
    for (int j = 0; j < k; ++j) kept[static_cast<size_t>(j)] = row[static_cast<size_t>(order[static_cast<size_t>(j)])];
    for (int v = 0; v < weights.cols(); ++v) row[static_cast<size_t>(v)] = 0.0;
    for (int j = 0; j < k; ++j) row[static_cast<size_t>(order[static_cast<size_t>(j)])] = kept[static_cast<size_t>(j)];
  }

  const double surviving = weights.total();
  if (surviving <= 0.0) return;
  const double factor = before / surviving;
  for (int i = 0; i < weights.rows(); ++i)
    for (double& w : weights.row(i)) w *= factor;
}

void apply_conv(ProbGrid& weights, const SequenceState& state, int kernel, double lambda) {
  if (kernel < 2 || kernel % 2 != 0) throw std::invalid_argument("apply_conv: kernel must be even and >= 2");
  const int half = kernel / 2;
  const int L = state.length();
  if (weights.rows() != L) throw std::invalid_argument("apply_conv: grid/state length mismatch");

  // Prefix sums of committed positions; prompt tokens count toward u_i.
  std::vector<int> committed(static_cast<size_t>(L) + 1, 0);
  for (int i = 0; i < L; ++i)
    committed[static_cast<size_t>(i) + 1] = committed[static_cast<size_t>(i)] + (state.is_masked(i) ? 0 : 1);

  const double before = weights.total();
  if (before <= 0.0) return;

  for (int i = 0; i < L; ++i) {
    const int lo = std::max(0, i - half);
    const int hi = std::min(L - 1, i + half);
    const int u = committed[static_cast<size_t>(hi) + 1] - committed[static_cast<size_t>(lo)];
    const double s_i = std::tanh(lambda * static_cast<double>(u));
    for (double& w : weights.row(i)) w *= s_i;
  }

  const double after = weights.total();
  if (after <= 0.0) return;  // every active row blocked; nothing to restore
  const double s_norm = before / after;
  for (int i = 0; i < L; ++i)
    for (double& w : weights.row(i)) w *= s_norm;
}

void apply_rep_penalty(ProbGrid& weights, const SequenceState& state, double rho) {
  if (rho <= 0.0 || rho >= 1.0) throw std::invalid_argument("apply_rep_penalty: rho must lie in (0,1)");
  std::vector<uint8_t> in_context(static_cast<size_t>(weights.cols()), 0);
  for (int i = 0; i < state.length(); ++i) {
    if (state.is_masked(i)) continue;
    const int tok = state.token(i);
    if (tok < weights.cols()) in_context[static_cast<size_t>(tok)] = 1;
  }
  for (int i = 0; i < weights.rows(); ++i) {
    auto row = weights.row(i);
    double before = 0.0;
    for (double w : row) before += w;
    if (before <= 0.0) continue;
    double after = 0.0;
    for (int v = 0; v < weights.cols(); ++v) {
      if (in_context[static_cast<size_t>(v)]) row[static_cast<size_t>(v)] *= rho;
      after += row[static_cast<size_t>(v)];
    }
    if (after <= 0.0) continue;
    const double restore = before / after;
    for (double& w : row) w *= restore;
  }
}

int step_llada(SequenceState& state, const ProbGrid& weights, int s, int step_index,
               std::vector<TraceEvent>& events) {
  if (s < 1) throw std::invalid_argument("step_llada: s must be >= 1");
  struct Cand {
    double confidence;
    int position;
  };
  std::vector<Cand> cands;
  for (int i = 0; i < state.length(); ++i) {
    if (!state.is_masked(i)) continue;
    auto row = weights.row(i);
    double best = 0.0;
    for (double w : row) best = std::max(best, w);
    if (best <= 0.0) continue;
    cands.push_back({best, i});
  }
  const int take = std::min<int>(s, static_cast<int>(cands.size()));
  std::partial_sort(cands.begin(), cands.begin() + take, cands.end(), [](const Cand& a, const Cand& b) {
    if (a.confidence != b.confidence) return a.confidence > b.confidence;
    return a.position < b.position;  // ties by lower position
  });
  // commit in position order for a stable trace
  std::vector<int> chosen;
  for (int j = 0; j < take; ++j) chosen.push_back(cands[static_cast<size_t>(j)].position);
  std::sort(chosen.begin(), chosen.end());
  for (int i : chosen) {
    auto row = weights.row(i);
    int argmax = 0;
    for (int v = 1; v < weights.cols(); ++v)
      if (row[static_cast<size_t>(v)] > row[static_cast<size_t>(argmax)]) argmax = v;
    state.commit(i, argmax);
    events.push_back({step_index, i, argmax, false});
  }
  return take;
}

std::vector<int> apply_eos_fill(SequenceState& state, int eos_id) {
  int leftmost = -1;
  for (int i = 0; i < state.length(); ++i) {
    if (!state.is_masked(i) && state.token(i) == eos_id) {
      leftmost = i;
      break;
    }
  }
  std::vector<int> filled;
  if (leftmost < 0) return filled;
  for (int i = leftmost + 1; i < state.length(); ++i) {
    if (state.is_masked(i)) {
      state.commit(i, eos_id);
      filled.push_back(i);
    }
  }
  return filled;
}

namespace {

// Copies denoiser rows for masked positions inside [begin,end); every other
// row is zero, which marks it inactive for all modifiers.
ProbGrid masked_weights(const ProbGrid& grid, const SequenceState& state, int begin, int end) {
  ProbGrid w(grid.rows(), grid.cols());
  for (int i = begin; i < end; ++i) {
    if (!state.is_masked(i)) continue;
    auto src = grid.row(i);
    auto dst = w.row(i);
    for (int v = 0; v < grid.cols(); ++v) dst[static_cast<size_t>(v)] = src[static_cast<size_t>(v)];
  }
  return w;
}

}  // namespace

DecodeResult decode(const Denoiser& denoiser, const std::vector<PromptSpan>& prompts,
                    const DecodePolicy& policy, int L, int S, Rng& rng) {
  policy.validate(L, S, denoiser.support());
  const int eos_id = denoiser.support() - 1;  // EOS is the last entry of the support

  SequenceState state(L);
  for (const PromptSpan& p : prompts) state.add_prompt_span(p.start, p.tokens);

  DecodeResult result{state, {}, {}};
  TraceLog& trace = result.trace;
  trace.window = L;
  trace.total_steps = S;
  trace.steps.resize(static_cast<size_t>(S));

  const int blocks = policy.semi_ar_blocks.value_or(1);
  const int block_len = L / blocks;
  const int steps_per_block = S / blocks;
  const NoiseSchedule block_sched{ScheduleKind::linear, steps_per_block};
  const int llada_s = std::max(1, L / S);

  ProbGrid grid;
  bool have_grid = false;
  bool state_dirty = true;

  int global_step = 0;
  for (int block = 0; block < blocks; ++block) {
    const int begin = block * block_len;
    const int end = begin + block_len;
    for (int k = steps_per_block; k >= 1; --k, ++global_step) {
      const double t = static_cast<double>(k) / steps_per_block;
      StepInfo& info = trace.steps[static_cast<size_t>(global_step)];

      int masked_in_scope = 0;
      for (int i = begin; i < end; ++i) masked_in_scope += state.is_masked(i);

      // With caching on, a step whose scope holds no masks needs no inference
      // at all, and an unchanged state reuses the previous output. Without
      // caching every step performs a fresh call.
      if (policy.cache && (masked_in_scope == 0 || (have_grid && !state_dirty))) {
        info.denoiser_call = false;
      } else {
        grid = denoiser.predict(state);
        have_grid = true;
        state_dirty = false;
        info.denoiser_call = true;
      }
      if (masked_in_scope == 0) {
        info.events = 0;
        state.set_step_clock(global_step + 1);
        continue;
      }

      ProbGrid weights = masked_weights(grid, state, begin, end);
      if (policy.rep_penalty) apply_rep_penalty(weights, state, *policy.rep_penalty);
      if (policy.base == BaseSampler::topk_glob) apply_topk_glob(weights, policy.topk);
      if (policy.conv) apply_conv(weights, state, policy.conv->kernel, policy.conv->lambda);

      const size_t events_before = trace.events.size();
      switch (policy.base) {
        case BaseSampler::categorical:
        case BaseSampler::topk_glob:
          step_categorical(state, weights, unmask_multiplier(block_sched, t), rng, global_step,
                           trace.events, &result.stats.clamped_draws);
          break;
        case BaseSampler::llada:
          step_llada(state, weights, llada_s, global_step, trace.events);
          break;
      }
      if (policy.eos_fill) {
        for (int pos : apply_eos_fill(state, eos_id)) {
          // fill commits are trace events too; replay must reproduce them
          trace.events.push_back({global_step, pos, eos_id, true});
        }
      }
      info.events = static_cast<int>(trace.events.size() - events_before);
      state_dirty = info.events > 0;
      state.set_step_clock(global_step + 1);
    }
  }

  result.stats.masked_remaining = state.masked_count();
  result.state = state;
  trace.final_state = state;
  return result;
}

// --- trace CSV -------------------------------------------------------------------

std::string trace_to_csv(const TraceLog& trace) {
  std::ostringstream out;
  out << "step,position,token,denoiser_call\n";
  size_t e = 0;
  for (int s = 0; s < trace.total_steps; ++s) {
    while (e < trace.events.size() && trace.events[e].step == s) {
      out << trace.events[e].step << ',' << trace.events[e].position << ',' << trace.events[e].token
          << ",\n";
      ++e;
    }
    out << s << ",,," << (trace.steps[static_cast<size_t>(s)].denoiser_call ? 1 : 0) << "\n";
  }
  return out.str();
}

void save_trace_csv(const std::string& path, const TraceLog& trace) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("save_trace_csv: cannot open " + path);
  out << trace_to_csv(trace);
  if (!out) throw std::runtime_error("save_trace_csv: write failed for " + path);
}

LoadedTrace load_trace_csv(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("load_trace_csv: cannot open " + path);
  LoadedTrace out;
  std::string line;
  int lineno = 0;
  if (!std::getline(in, line) || line != "step,position,token,denoiser_call")
    throw std::runtime_error(path + ":1: bad trace header");
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::array<std::string, 4> field;
    size_t start = 0, fi = 0;
    for (size_t i = 0; i <= line.size() && fi < 4; ++i) {
      if (i == line.size() || line[i] == ',') {
        field[fi++] = line.substr(start, i - start);
        start = i + 1;
      }
    }
    if (fi != 4) throw std::runtime_error(path + ":" + std::to_string(lineno + 1) + ": bad trace row");
    if (field[1].empty()) {
      StepInfo info;
      info.denoiser_call = field[3] == "1";
      out.steps.push_back(info);
    } else {
      TraceEvent ev;
      ev.step = std::stoi(field[0]);
      ev.position = std::stoi(field[1]);
      ev.token = std::stoi(field[2]);
      if (ev.step < static_cast<int>(out.steps.size()))
        throw std::runtime_error(path + ":" + std::to_string(lineno + 1) + ": event after its step summary");
      out.events.push_back(ev);
    }
  }
  // recompute per-step event counts
  for (const TraceEvent& ev : out.events)
    if (ev.step >= 0 && ev.step < static_cast<int>(out.steps.size()))
      ++out.steps[static_cast<size_t>(ev.step)].events;
  return out;
}

}  // namespace mdlab
