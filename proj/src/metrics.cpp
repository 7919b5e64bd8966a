#include "mdlab/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <sstream>

namespace mdlab {

CandidateZoneReport candidate_zone(const Denoiser& denoiser, std::span<const int> prompt, int k,
                                   int L, const PriorTable& prior, const VocabSpec& vocab) {
  if (prompt.empty()) throw std::invalid_argument("candidate_zone: empty prompt");
  const int p_len = static_cast<int>(prompt.size());
  if (p_len >= L) throw std::invalid_argument("candidate_zone: prompt fills the window");

  SequenceState state(L);
  state.add_prompt_span(0, prompt);
  const ProbGrid grid = denoiser.predict(state);

  std::vector<uint8_t> in_prompt_set(static_cast<size_t>(grid.cols()), 0);
  for (int tok : prompt)
    if (tok < grid.cols()) in_prompt_set[static_cast<size_t>(tok)] = 1;

  CandidateZoneReport report;
  std::vector<int> order(static_cast<size_t>(grid.cols()));
  for (int d = 0; d + p_len < L; ++d) {
    auto row = grid.row(p_len + d);
    ZoneRow zr;
    zr.distance = d;
    for (int v = 0; v < grid.cols(); ++v) {
      if (prior.is_top(v)) zr.high_prior_mass += row[static_cast<size_t>(v)];
      if (in_prompt_set[static_cast<size_t>(v)]) zr.repetition_mass += row[static_cast<size_t>(v)];
    }
    const int take = std::min(k, grid.cols());
    for (int v = 0; v < grid.cols(); ++v) order[static_cast<size_t>(v)] = v;
    std::partial_sort(order.begin(), order.begin() + take, order.end(), [&](int a, int b) {
      if (row[static_cast<size_t>(a)] != row[static_cast<size_t>(b)])
        return row[static_cast<size_t>(a)] > row[static_cast<size_t>(b)];
      return a < b;
    });
    for (int j = 0; j < take; ++j)
      zr.topk.push_back({order[static_cast<size_t>(j)], row[static_cast<size_t>(order[static_cast<size_t>(j)])]});
    report.rows.push_back(std::move(zr));
  }
  (void)vocab;
  return report;
}

std::string zone_to_csv(const CandidateZoneReport& report) {
  std::ostringstream out;
  out << "distance,high_prior_mass,repetition_mass,topk\n";
  char buf[96];
  for (const ZoneRow& r : report.rows) {
    std::snprintf(buf, sizeof buf, "%d,%.17g,%.17g,", r.distance, r.high_prior_mass,
                  r.repetition_mass);
    out << buf;
    for (size_t j = 0; j < r.topk.size(); ++j) {
      std::snprintf(buf, sizeof buf, "%s%d:%.9g", j ? "|" : "", r.topk[j].first, r.topk[j].second);
      out << buf;
    }
    out << "\n";
  }
  return out.str();
}

double mean_log_prior(std::span<const int> sequence, const PriorTable& prior,
                      const VocabSpec& vocab) {
  double sum = 0.0;
  int n = 0;
  for (int tok : sequence) {
    if (tok == vocab.eos_id || tok == vocab.pad_id) break;  // content region ends here
    if (!vocab.is_content(tok)) throw std::invalid_argument("mean_log_prior: non-content token");
    sum += prior.log_prior[static_cast<size_t>(tok)];
    ++n;
  }
  if (n == 0) throw std::invalid_argument("mean_log_prior: empty content region");
  return sum / n;
}

double inlier_rate(std::span<const PplSample> samples, double mu, double sigma) {
  if (samples.empty()) throw std::invalid_argument("inlier_rate: empty sample list");
  if (sigma < 0.0) throw std::invalid_argument("inlier_rate: sigma must be >= 0");
  int inliers = 0;
  for (const PplSample& s : samples) {
    if (s.zero_length) continue;
    if (s.ppl >= mu - 2.0 * sigma && s.ppl <= mu + 2.0 * sigma) ++inliers;
  }
  return static_cast<double>(inliers) / static_cast<double>(samples.size());
}

SpeedReport speed_report(const TraceLog& trace, int S, double L_star_norm, const VocabSpec& vocab) {
  SpeedReport r;
  r.S_star = trace.denoiser_calls();
  r.L_star_total = static_cast<int>(trace.events.size());
  r.r_star = static_cast<double>(r.L_star_total) / static_cast<double>(S);
  r.L_star_norm = L_star_norm;
  r.tokens_per_step = r.S_star > 0 ? L_star_norm / static_cast<double>(r.S_star) : 0.0;

  const SequenceState& fin = trace.final_state;
  int first_eos = fin.length();
  for (int i = 0; i < fin.length(); ++i) {
    if (!fin.is_masked(i) && fin.token(i) == vocab.eos_id) {
      first_eos = i;
      break;
    }
  }
  for (int i = 0; i < first_eos; ++i)
    if (!fin.is_masked(i) && !fin.in_prompt(i)) ++r.L_star;
  return r;
}

namespace {

struct Replay {
  SequenceState state;
  std::vector<uint8_t> committed_before_step;  // snapshot at the current step start

  explicit Replay(const TraceLog& trace) : state(trace.final_state) {
    for (const TraceEvent& ev : trace.events) {
      if (ev.position < 0 || ev.position >= state.length()) continue;
      if (!state.in_prompt(ev.position) && !state.is_masked(ev.position))
        state.clear_for_forward_process(ev.position);
    }
    committed_before_step.assign(static_cast<size_t>(state.length()), 0);
    for (int i = 0; i < state.length(); ++i)
      committed_before_step[static_cast<size_t>(i)] = state.is_masked(i) ? 0 : 1;
  }
};

}  // namespace

std::vector<TraceViolation> validate_trace(const DecodePolicy& policy, const TraceLog& trace,
                                           const VocabSpec& vocab) {
  std::vector<TraceViolation> out;
  auto flag = [&](const std::string& rule, int step, int position) {
    out.push_back({rule, step, position});
  };

  const int L = trace.window;
  const int S = trace.total_steps;
  const int blocks = policy.semi_ar_blocks.value_or(1);
  const int block_len = blocks > 0 ? L / blocks : L;
  const int llada_s = std::max(1, L / S);
  const int conv_half = policy.conv ? policy.conv->kernel / 2 : 0;
  const int eos = vocab.eos_id;

  std::vector<uint8_t> seen(static_cast<size_t>(L), 0);
  for (const TraceEvent& ev : trace.events) {
    if (ev.position < 0 || ev.position >= L) flag("position out of range", ev.step, ev.position);
    else if (seen[static_cast<size_t>(ev.position)]++) flag("absorbing: position unmasked twice", ev.step, ev.position);
    if (ev.step < 0 || ev.step >= S) flag("step index out of range", ev.step, ev.position);
  }
  int prev_step = 0;
  for (const TraceEvent& ev : trace.events) {
    if (ev.step < prev_step) flag("step indices decrease", ev.step, ev.position);
    prev_step = std::max(prev_step, ev.step);
  }

  Replay replay(trace);
  size_t e = 0;
  for (int s = 0; s < S; ++s) {
    // step-start snapshot
    for (int i = 0; i < L; ++i)
      replay.committed_before_step[static_cast<size_t>(i)] = replay.state.is_masked(i) ? 0 : 1;

    // LLADA expected count: eligible masked positions in the active scope
    int eligible = 0;
    if (policy.base == BaseSampler::llada) {
      const int block = (s / std::max(1, S / blocks));
      const int lo = policy.semi_ar_blocks ? block * block_len : 0;
      const int hi = policy.semi_ar_blocks ? lo + block_len : L;
      for (int i = lo; i < hi; ++i) {
        if (!replay.state.is_masked(i)) continue;
        if (policy.conv) {
          bool near = false;
          for (int j = std::max(0, i - conv_half); j <= std::min(L - 1, i + conv_half) && !near; ++j)
            near = replay.committed_before_step[static_cast<size_t>(j)] != 0;
          if (!near) continue;
        }
        ++eligible;
      }
    }

    int sampler_events = 0;
    while (e < trace.events.size() && trace.events[e].step == s) {
      const TraceEvent& ev = trace.events[e];
      ++e;
      if (ev.position < 0 || ev.position >= L) continue;
      if (!replay.state.is_masked(ev.position)) {
        flag("event on a committed position", ev.step, ev.position);
        continue;
      }

      // EOS-fill commits are exempt from block ordering and conv locality:
      // any EOS event with a committed EOS to its left is a fill (a genuine
      // draw there would be immediately overwritten by the fill anyway).
      bool is_fill = false;
      if (policy.eos_fill && ev.token == eos) {
        for (int i = 0; i < ev.position && !is_fill; ++i)
          is_fill = !replay.state.is_masked(i) && replay.state.token(i) == eos;
      }

      if (!is_fill) {
        ++sampler_events;
        if (policy.semi_ar_blocks) {
          const int block = ev.position / block_len;
          for (int i = 0; i < block * block_len; ++i) {
            if (replay.state.is_masked(i)) {
              flag("semi-AR: event before earlier blocks complete", ev.step, ev.position);
              break;
            }
          }
        }
        if (policy.conv) {
          bool near = false;
          for (int j = std::max(0, ev.position - conv_half);
               j <= std::min(L - 1, ev.position + conv_half) && !near; ++j)
            near = replay.committed_before_step[static_cast<size_t>(j)] != 0;
          if (!near) flag("conv: event outside K/2 of earlier commits", ev.step, ev.position);
        }
      }
      replay.state.commit(ev.position, ev.token);
    }

    if (policy.base == BaseSampler::llada) {
      const int expected = std::min(llada_s, eligible);
      if (sampler_events != expected) flag("llada: per-step unmask count mismatch", s, -1);
    }
    if (policy.eos_fill) {
      int leftmost = -1;
      for (int i = 0; i < L && leftmost < 0; ++i)
        if (!replay.state.is_masked(i) && replay.state.token(i) == eos) leftmost = i;
      if (leftmost >= 0) {
        for (int i = leftmost + 1; i < L; ++i) {
          if (replay.state.is_masked(i)) {
            flag("eos-fill: masked slot right of the leftmost EOS", s, i);
            break;
          }
        }
      }
    }
  }

  if (!(replay.state == trace.final_state))
    flag("replay does not reproduce the final state", -1, -1);
  return out;
}

}  // namespace mdlab
