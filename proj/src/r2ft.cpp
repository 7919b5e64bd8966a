#include "mdlab/r2ft.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>

#include "mdlab/metrics.hpp"

namespace mdlab {

namespace {

constexpr double kNegInf = -std::numeric_limits<double>::infinity();

struct CorruptionDraws {
  int c, g, z;
  int eos_pos;  // -1 when eos_insert is off
};

// Shared draw sequence for corrupt() and make_preference_pair(): c, then g
// (resampled while the unit would cross the window start), then z, then the
// EOS position.
CorruptionDraws draw_corruption(const Example& ex, const CorruptionConfig& cfg, Rng& rng) {
  const int lq = static_cast<int>(ex.prompt.size());
  const int la = static_cast<int>(ex.response.size());
  CorruptionDraws d;
  d.c = static_cast<int>(rng.uniform_in(lq, lq + la));
  do {
    d.g = static_cast<int>(rng.uniform_in(1, cfg.g_max));
  } while (d.g > d.c);
  d.z = static_cast<int>(rng.uniform_in(cfg.z_min, cfg.z_max));
  d.eos_pos = cfg.eos_insert ? static_cast<int>(rng.uniform_in(d.c, d.c + d.z - 1)) : -1;
  return d;
}

std::vector<int> clean_tokens(const Example& ex) {
  std::vector<int> x0 = ex.prompt;
  x0.insert(x0.end(), ex.response.begin(), ex.response.end());
  return x0;
}

double stable_sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

double neg_log_sigmoid(double x) {  // -log sigma(x)
  if (std::isinf(x)) return x > 0.0 ? 0.0 : std::numeric_limits<double>::infinity();
  if (x >= 0.0) return std::log1p(std::exp(-x));
  return -x + std::log1p(std::exp(x));
}

}  // namespace

std::vector<int> corrupt(const Example& ex, int L, const CorruptionConfig& cfg,
                         const VocabSpec& vocab, Rng& rng) {
  cfg.validate();
  const int lq = static_cast<int>(ex.prompt.size());
  const int la = static_cast<int>(ex.response.size());
  if (lq < 1 || la < 1) throw std::invalid_argument("corrupt: need L_Q >= 1 and L_A >= 1");
  if (cfg.z_max + lq + la > L)
    throw std::invalid_argument("corrupt: z_max + L_Q + L_A must fit in the window");

  const CorruptionDraws d = draw_corruption(ex, cfg, rng);
  const std::vector<int> x0 = clean_tokens(ex);

  std::vector<int> window(static_cast<size_t>(L), vocab.pad_id);
  for (int i = 0; i < d.c; ++i) window[static_cast<size_t>(i)] = x0[static_cast<size_t>(i)];
  for (int j = 0; j < d.z; ++j)  // cyclic repetition of x0[c-g:c]
    window[static_cast<size_t>(d.c + j)] = x0[static_cast<size_t>(d.c - d.g + j % d.g)];
  if (d.eos_pos >= 0) window[static_cast<size_t>(d.eos_pos)] = vocab.eos_id;
  return window;
}

PreferencePair make_preference_pair(const Example& ex, int L, const CorruptionConfig& cfg,
                                    const VocabSpec& vocab, Rng& rng) {
  cfg.validate();
  const int lq = static_cast<int>(ex.prompt.size());
  const int la = static_cast<int>(ex.response.size());
  if (cfg.z_max + lq + la > L)
    throw std::invalid_argument("make_preference_pair: z_max + L_Q + L_A must fit in the window");

  const CorruptionDraws d = draw_corruption(ex, cfg, rng);
  const std::vector<int> x0 = clean_tokens(ex);

  PreferencePair pair;
  pair.context = SequenceState(L);
  pair.context.add_prompt_span(0, ex.prompt);
  for (int i = lq; i < d.c; ++i) pair.context.commit(i, x0[static_cast<size_t>(i)]);

  // Clean continuation: answer suffix plus the EOS that immediately follows.
  for (int i = d.c; i < lq + la; ++i) pair.y_w.push_back({i, x0[static_cast<size_t>(i)]});
  pair.y_w.push_back({lq + la, vocab.eos_id});

  for (int j = 0; j < d.z; ++j) {
    const int pos = d.c + j;
    int tok = x0[static_cast<size_t>(d.c - d.g + j % d.g)];
    if (pos == d.eos_pos) tok = vocab.eos_id;
    pair.y_l.push_back({pos, tok});
  }
  return pair;
}

double seq_logprob_from_grid(const ProbGrid& grid, std::span<const std::pair<int, int>> targets) {
  double sum = 0.0;
  for (const auto& [pos, tok] : targets) {
    if (tok < 0 || tok >= grid.cols()) return kNegInf;  // outside support: sentinel
    const double p = grid.at(pos, tok);
    if (p <= 0.0) return kNegInf;
    sum += std::log(p);
  }
  return sum;
}

double seq_logprob(const Denoiser& denoiser, const SequenceState& context,
                   std::span<const std::pair<int, int>> targets) {
  for (const auto& [pos, tok] : targets) {
    (void)tok;
    if (!context.is_masked(pos))
      throw std::invalid_argument("seq_logprob: target position is not masked in the context");
  }
  const ProbGrid grid = denoiser.predict(context);
  return seq_logprob_from_grid(grid, targets);
}

double penalty_s(double logp_w, int len_w, double logp_l, int len_l, double beta) {
  if (beta <= 0.0 || len_w < 1 || len_l < 1) throw std::invalid_argument("penalty_s: bad arguments");
  const double x = beta * logp_l / len_l - beta * logp_w / len_w;
  return stable_sigmoid(x);
}

namespace {

// One restricted denoiser call over the union of both target position sets.
struct PairRows {
  std::vector<int> positions;            // sorted unique
  ProbGrid rows;                         // one row per position
  std::vector<int> index_of;             // window position -> row index (-1 elsewhere)

  static PairRows make(const LinearDenoiser& denoiser, const PreferencePair& pair) {
    PairRows pr;
    for (const auto& [pos, tok] : pair.y_w) {
      (void)tok;
      pr.positions.push_back(pos);
    }
    for (const auto& [pos, tok] : pair.y_l) {
      (void)tok;
      pr.positions.push_back(pos);
    }
    std::sort(pr.positions.begin(), pr.positions.end());
    pr.positions.erase(std::unique(pr.positions.begin(), pr.positions.end()), pr.positions.end());
    pr.rows = ProbGrid(static_cast<int>(pr.positions.size()), denoiser.support());
    denoiser.predict_rows(pair.context, pr.positions, pr.rows);
    pr.index_of.assign(static_cast<size_t>(pair.context.length()), -1);
    for (size_t k = 0; k < pr.positions.size(); ++k)
      pr.index_of[static_cast<size_t>(pr.positions[k])] = static_cast<int>(k);
    return pr;
  }

  double logprob(std::span<const std::pair<int, int>> targets) const {
    double sum = 0.0;
    for (const auto& [pos, tok] : targets) {
      if (tok < 0 || tok >= rows.cols()) return kNegInf;
      const double p = rows.at(index_of[static_cast<size_t>(pos)], tok);
      if (p <= 0.0) return kNegInf;
      sum += std::log(p);
    }
    return sum;
  }
};

void accumulate_targets_grad(const DenoiserParams& params, const SequenceState& context,
                             const PairRows& pr, std::span<const std::pair<int, int>> targets,
                             double coeff, Gradient& out) {
  if (coeff == 0.0) return;
  const int V = params.V;
  for (const auto& [pos, tok] : targets) {
    auto row = pr.rows.row(pr.index_of[static_cast<size_t>(pos)]);
    // d(log softmax[target])/d(logit_v) = [v == target] - row_v
    for (int v = 0; v < V; ++v)
      out.bias[static_cast<size_t>(v)] += coeff * ((v == tok ? 1.0 : 0.0) - row[static_cast<size_t>(v)]);
    const int lo = std::max(0, pos - params.radius);
    const int hi = std::min(context.length() - 1, pos + params.radius);
    for (int j = lo; j <= hi; ++j) {
      if (j == pos || context.is_masked(j)) continue;
      const double cw = coeff * params.kappa(std::abs(pos - j));
      double* arow = out.assoc.data() + static_cast<size_t>(context.token(j)) * V;
      for (int v = 0; v < V; ++v)
        arow[v] += cw * ((v == tok ? 1.0 : 0.0) - row[static_cast<size_t>(v)]);
    }
  }
}

}  // namespace

double r2ft_loss(const LinearDenoiser& denoiser, const PreferencePair& pair, double gamma,
                 double beta) {
  if (gamma < 0.0 || beta <= 0.0) throw std::invalid_argument("r2ft_loss: need gamma >= 0, beta > 0");
  const PairRows pr = PairRows::make(denoiser, pair);
  const double s_w = pr.logprob(pair.y_w);
  const double s_l = pr.logprob(pair.y_l);
  const double lw = static_cast<double>(pair.y_w.size());
  const double ll = static_cast<double>(pair.y_l.size());
  const double margin = beta * (s_w / lw - s_l / ll);
  return -(gamma / lw) * s_w + neg_log_sigmoid(margin);
}

Gradient grad_r2ft(const DenoiserParams& params, const PreferencePair& pair, double gamma,
                   double beta) {
  if (gamma < 0.0 || beta <= 0.0) throw std::invalid_argument("grad_r2ft: need gamma >= 0, beta > 0");
  LinearDenoiser local(params);
  const PairRows pr = PairRows::make(local, pair);
  const double s_w = pr.logprob(pair.y_w);
  const double s_l = pr.logprob(pair.y_l);
  const double lw = static_cast<double>(pair.y_w.size());
  const double ll = static_cast<double>(pair.y_l.size());
  const double s_theta = penalty_s(s_w, static_cast<int>(pair.y_w.size()), s_l,
                                   static_cast<int>(pair.y_l.size()), beta);

  Gradient g = Gradient::zeros(params);
  const double coeff_w = -(gamma + beta * s_theta) / lw;
  const double coeff_l = beta * s_theta / ll;
  accumulate_targets_grad(params, pair.context, pr, pair.y_w, coeff_w, g);
  if (s_theta > 0.0 && std::isfinite(s_l))
    accumulate_targets_grad(params, pair.context, pr, pair.y_l, coeff_l, g);
  return g;
}

Gradient seq_logprob_grad(const DenoiserParams& params, const SequenceState& context,
                          std::span<const std::pair<int, int>> targets) {
  LinearDenoiser local(params);
  std::vector<int> positions;
  for (const auto& [pos, tok] : targets) {
    (void)tok;
    positions.push_back(pos);
  }
  std::sort(positions.begin(), positions.end());
  positions.erase(std::unique(positions.begin(), positions.end()), positions.end());
  ProbGrid rows(static_cast<int>(positions.size()), params.V);
  local.predict_rows(context, positions, rows);

  Gradient g = Gradient::zeros(params);
  const int V = params.V;
  for (const auto& [pos, tok] : targets) {
    const auto it = std::lower_bound(positions.begin(), positions.end(), pos);
    auto row = rows.row(static_cast<int>(it - positions.begin()));
    for (int v = 0; v < V; ++v)
      g.bias[static_cast<size_t>(v)] += (v == tok ? 1.0 : 0.0) - row[static_cast<size_t>(v)];
    const int lo = std::max(0, pos - params.radius);
    const int hi = std::min(context.length() - 1, pos + params.radius);
    for (int j = lo; j <= hi; ++j) {
      if (j == pos || context.is_masked(j)) continue;
      const double cw = params.kappa(std::abs(pos - j));
      double* arow = g.assoc.data() + static_cast<size_t>(context.token(j)) * V;
      for (int v = 0; v < V; ++v)
        arow[v] += cw * ((v == tok ? 1.0 : 0.0) - row[static_cast<size_t>(v)]);
    }
  }
  return g;
}

void R2ftConfig::validate() const {
  corruption.validate();
  if (steps < 0 || lr < 0.0 || batch < 1 || gamma < 0.0 || beta <= 0.0 || window_L < 2 ||
      val_every < 1 || val_pairs < 1 || probe_samples < 0 || probe_topk < 1 || probe_steps < 1)
    throw std::invalid_argument("R2ftConfig: bad field values");
}

namespace {

struct Validation {
  double loss_w;
  double loss_l;
  double mean_log_prior;
};

Validation run_validation(const LinearDenoiser& denoiser, std::span<const Example> corpus,
                          const VocabSpec& vocab, const PriorTable& prior, const R2ftConfig& cfg,
                          std::span<const size_t> val_idx) {
  Validation v{0.0, 0.0, 0.0};
  int count = 0;
  for (size_t n = 0; n < val_idx.size(); ++n) {
    const Example& ex = corpus[val_idx[n]];
    Rng rng(mix_seed(cfg.seed ^ 0x56414cULL, n));
    PreferencePair pair = make_preference_pair(ex, cfg.window_L, cfg.corruption, vocab, rng);
    const PairRows pr = PairRows::make(denoiser, pair);
    v.loss_w += -pr.logprob(pair.y_w) / static_cast<double>(pair.y_w.size());
    v.loss_l += -pr.logprob(pair.y_l) / static_cast<double>(pair.y_l.size());
    ++count;
  }
  v.loss_w /= count;
  v.loss_l /= count;

  // Mean log prior of top-k samples; identical prompts and streams at every
  // validation point so only the parameters move the number.
  DecodePolicy policy;
  policy.base = BaseSampler::topk_glob;
  policy.topk = cfg.probe_topk;
  double prior_sum = 0.0;
  int prior_n = 0;
  for (int k = 0; k < cfg.probe_samples; ++k) {
    const Example& ex = corpus[val_idx[static_cast<size_t>(k) % val_idx.size()]];
    Rng rng(mix_seed(cfg.seed ^ 0x50524f4245ULL, static_cast<uint64_t>(k)));
    DecodeResult run = decode(denoiser, {{0, ex.prompt}}, policy, cfg.window_L, cfg.probe_steps, rng);
    std::vector<int> content;
    for (int i = static_cast<int>(ex.prompt.size()); i < run.state.length(); ++i) {
      if (run.state.is_masked(i)) break;
      const int tok = run.state.token(i);
      if (tok == vocab.eos_id) break;
      content.push_back(tok);
    }
    if (content.empty()) continue;
    prior_sum += mean_log_prior(content, prior, vocab);
    ++prior_n;
  }
  v.mean_log_prior = prior_n > 0 ? prior_sum / prior_n : 0.0;
  return v;
}

}  // namespace

std::vector<R2ftHistoryRow> train_r2ft(LinearDenoiser& denoiser, std::span<const Example> corpus,
                                       const VocabSpec& vocab, const PriorTable& prior,
                                       const R2ftConfig& cfg) {
  cfg.validate();
  if (corpus.empty()) throw std::invalid_argument("train_r2ft: empty corpus");

  std::vector<size_t> val_idx, train_idx;
  for (size_t i = 0; i < corpus.size(); ++i)
    (i < static_cast<size_t>(cfg.val_pairs) ? val_idx : train_idx).push_back(i);
  if (train_idx.empty()) train_idx = val_idx;

  std::vector<R2ftHistoryRow> history;
  auto record = [&](int step, double mean_loss) {
    const Validation v = run_validation(denoiser, corpus, vocab, prior, cfg, val_idx);
    history.push_back({step, mean_loss, v.loss_w, v.loss_l, v.mean_log_prior});
  };

  if (cfg.steps == 0) return history;  // 0 steps: params unchanged, empty history
  record(0, 0.0);

  double loss_acc = 0.0;
  int loss_n = 0;
  for (int step = 0; step < cfg.steps; ++step) {
    Rng rng(mix_seed(cfg.seed, static_cast<uint64_t>(step)));
    Gradient g = Gradient::zeros(denoiser.params());
    const double scale = 1.0 / static_cast<double>(cfg.batch);
    for (int b = 0; b < cfg.batch; ++b) {
      const Example& ex = corpus[train_idx[rng.uniform_int(train_idx.size())]];
      PreferencePair pair = make_preference_pair(ex, cfg.window_L, cfg.corruption, vocab, rng);
      loss_acc += r2ft_loss(denoiser, pair, cfg.gamma, cfg.beta);
      ++loss_n;
      Gradient pg = grad_r2ft(denoiser.params(), pair, cfg.gamma, cfg.beta);
      g.axpy(scale, pg);
    }
    DenoiserParams& p = denoiser.params();
    for (size_t i = 0; i < p.bias.size(); ++i) p.bias[i] -= cfg.lr * g.bias[i];
    for (size_t i = 0; i < p.assoc.size(); ++i) p.assoc[i] -= cfg.lr * g.assoc[i];

    if ((step + 1) % cfg.val_every == 0 || step + 1 == cfg.steps) {
      record(step + 1, loss_n > 0 ? loss_acc / loss_n : 0.0);
      loss_acc = 0.0;
      loss_n = 0;
    }
  }
  return history;
}

void save_history_csv(const std::string& path, std::span<const R2ftHistoryRow> rows) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("save_history_csv: cannot open " + path);
  out << "step,loss,loss_w,loss_l,mean_log_prior\n";
  char buf[192];
  for (const R2ftHistoryRow& r : rows) {
    std::snprintf(buf, sizeof buf, "%d,%.17g,%.17g,%.17g,%.17g\n", r.step, r.loss, r.loss_w,
                  r.loss_l, r.mean_log_prior);
    out << buf;
  }
}

}  // namespace mdlab
