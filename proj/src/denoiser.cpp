#include "mdlab/denoiser.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include <json.hpp>

namespace mdlab {

using nlohmann::json;

DenoiserParams DenoiserParams::zeros(int V, int radius) {
  DenoiserParams p;
  p.V = V;
  p.radius = radius;
  p.bias.assign(static_cast<size_t>(V), 0.0);
  p.assoc.assign(static_cast<size_t>(V) * V, 0.0);
  return p;
}

DenoiserParams random_params(int V, int radius, double scale, Rng& rng) {
  DenoiserParams p = DenoiserParams::zeros(V, radius);
  for (double& b : p.bias) b = scale * (2.0 * rng.uniform() - 1.0);
  for (double& a : p.assoc) a = scale * (2.0 * rng.uniform() - 1.0);
  return p;
}

Gradient Gradient::zeros(const DenoiserParams& p) {
  Gradient g;
  g.bias.assign(p.bias.size(), 0.0);
  g.assoc.assign(p.assoc.size(), 0.0);
  return g;
}

void Gradient::axpy(double a, const Gradient& other) {
  for (size_t i = 0; i < bias.size(); ++i) bias[i] += a * other.bias[i];
  for (size_t i = 0; i < assoc.size(); ++i) assoc[i] += a * other.assoc[i];
}

void Gradient::scale(double a) {
  for (double& x : bias) x *= a;
  for (double& x : assoc) x *= a;
}

double Gradient::max_abs() const {
  double m = 0.0;
  for (double x : bias) m = std::max(m, std::abs(x));
  for (double x : assoc) m = std::max(m, std::abs(x));
  return m;
}

namespace {

// kappa-weighted committed neighbors of position i.
struct Feature {
  int token;
  double weight;
};

void context_features(const DenoiserParams& p, const SequenceState& state, int i,
                      std::vector<Feature>& out) {
  out.clear();
  const int lo = std::max(0, i - p.radius);
  const int hi = std::min(state.length() - 1, i + p.radius);
  for (int j = lo; j <= hi; ++j) {
    if (j == i || state.is_masked(j)) continue;
    out.push_back({state.token(j), p.kappa(std::abs(i - j))});
  }
}

void softmax_row(const DenoiserParams& p, const std::vector<Feature>& feats,
                 std::span<double> row) {
  const int V = p.V;
  for (int v = 0; v < V; ++v) row[static_cast<size_t>(v)] = p.bias[static_cast<size_t>(v)];
  for (const Feature& f : feats) {
    const double* arow = p.assoc.data() + static_cast<size_t>(f.token) * V;
    for (int v = 0; v < V; ++v) row[static_cast<size_t>(v)] += f.weight * arow[v];
  }
  double mx = row[0];
  for (int v = 1; v < V; ++v) mx = std::max(mx, row[static_cast<size_t>(v)]);
  double sum = 0.0;
  for (int v = 0; v < V; ++v) {
    row[static_cast<size_t>(v)] = std::exp(row[static_cast<size_t>(v)] - mx);
    sum += row[static_cast<size_t>(v)];
  }
  for (int v = 0; v < V; ++v) row[static_cast<size_t>(v)] /= sum;
}

}  // namespace

ProbGrid LinearDenoiser::predict(const SequenceState& state) const {
  if (state.unmasked_count() == 0)
    throw std::invalid_argument("LinearDenoiser::predict: all positions masked and no prompt");
  ProbGrid grid(state.length(), params_.V);
  std::vector<Feature> feats;
  for (int i = 0; i < state.length(); ++i) {
    context_features(params_, state, i, feats);
    softmax_row(params_, feats, grid.row(i));
  }
  return grid;
}

void LinearDenoiser::predict_rows(const SequenceState& state, std::span<const int> positions,
                                  ProbGrid& out) const {
  if (state.unmasked_count() == 0)
    throw std::invalid_argument("LinearDenoiser::predict_rows: all positions masked and no prompt");
  std::vector<Feature> feats;
  for (size_t k = 0; k < positions.size(); ++k) {
    context_features(params_, state, positions[k], feats);
    softmax_row(params_, feats, out.row(static_cast<int>(k)));
  }
}

ProbGrid UniformDenoiser::predict(const SequenceState& state) const {
  ProbGrid grid(state.length(), V_);
  const double p = 1.0 / static_cast<double>(V_);
  for (int i = 0; i < grid.rows(); ++i)
    for (int v = 0; v < V_; ++v) grid.at(i, v) = p;
  return grid;
}

ProbGrid FixedGridDenoiser::predict(const SequenceState& state) const {
  if (state.length() != grid_.rows())
    throw std::invalid_argument("FixedGridDenoiser: window length mismatch");
  return grid_;
}

// --- oracle ------------------------------------------------------------------

OracleDenoiser::OracleDenoiser(CorpusModel model, OracleMethod method, int gap_bound)
    : model_(std::move(model)), method_(method), gap_bound_(gap_bound) {
  model_.validate();
  // Parallel unmasking can commit jointly impossible evidence (a non-EOS
  // token right of an EOS drawn in the same step). A vanishing smoothing of
  // the window chain keeps the posterior defined in that case without
  // measurably moving it anywhere else.
  const int v = model_.vocab.support();
  const double eta = 1e-9;
  for (int s = 0; s < v; ++s)
    for (int t = 0; t < v; ++t) {
      double& p = model_.trans[static_cast<size_t>(s) * v + t];
      p = (1.0 - eta) * p + eta / v;
    }
}

ProbGrid OracleDenoiser::predict(const SequenceState& state) const {
  if (state.unmasked_count() == 0)
    throw std::invalid_argument("OracleDenoiser::predict: all positions masked and no prompt");
  return method_ == OracleMethod::forward_backward ? predict_fb(state) : predict_brute(state);
}

ProbGrid OracleDenoiser::predict_fb(const SequenceState& state) const {
  const int L = state.length();
  const int V = model_.vocab.support();
  const double* P = model_.trans.data();

  auto normalize = [V](std::vector<double>& v) {
    double s = 0.0;
    for (double x : v) s += x;
    if (s > 0.0)
      for (double& x : v) x /= s;
  };

  // Forward messages: f[i][v] = P(x_i = v | committed tokens left of i).
  // Masked position 0 gets a uniform left message. Committed positions reset
  // the message to a transition row, so they cost O(V) instead of O(V^2).
  std::vector<std::vector<double>> fwd(static_cast<size_t>(L), std::vector<double>(static_cast<size_t>(V)));
  {
    std::vector<double> msg(static_cast<size_t>(V), 1.0 / V);
    for (int i = 0; i < L; ++i) {
      fwd[static_cast<size_t>(i)] = msg;
      std::vector<double> next(static_cast<size_t>(V), 0.0);
      if (!state.is_masked(i)) {
        const double* prow = P + static_cast<size_t>(state.token(i)) * V;
        for (int b = 0; b < V; ++b) next[static_cast<size_t>(b)] = prow[b];
      } else {
        for (int a = 0; a < V; ++a) {
          const double w = msg[static_cast<size_t>(a)];
          if (w == 0.0) continue;
          const double* prow = P + static_cast<size_t>(a) * V;
          for (int b = 0; b < V; ++b) next[static_cast<size_t>(b)] += w * prow[b];
        }
      }
      normalize(next);
      msg = std::move(next);
    }
  }

  // Backward messages: bwd[i][v] = P(committed tokens right of i | x_i = v).
  std::vector<std::vector<double>> bwd(static_cast<size_t>(L), std::vector<double>(static_cast<size_t>(V), 1.0));
  {
    std::vector<double> msg(static_cast<size_t>(V), 1.0);
    for (int i = L - 1; i >= 0; --i) {
      bwd[static_cast<size_t>(i)] = msg;
      std::vector<double> prev(static_cast<size_t>(V), 0.0);
      if (!state.is_masked(i)) {
        const int tok = state.token(i);
        const double scale = msg[static_cast<size_t>(tok)];
        for (int a = 0; a < V; ++a) prev[static_cast<size_t>(a)] = P[static_cast<size_t>(a) * V + tok] * scale;
      } else {
        for (int a = 0; a < V; ++a) {
          const double* prow = P + static_cast<size_t>(a) * V;
          double acc = 0.0;
          for (int b = 0; b < V; ++b) acc += prow[b] * msg[static_cast<size_t>(b)];
          prev[static_cast<size_t>(a)] = acc;
        }
      }
      normalize(prev);
      msg = std::move(prev);
    }
  }

  ProbGrid grid(L, V);
  for (int i = 0; i < L; ++i) {
    auto row = grid.row(i);
    if (!state.is_masked(i)) {
      row[static_cast<size_t>(state.token(i))] = 1.0;
      continue;
    }
    double sum = 0.0;
    for (int v = 0; v < V; ++v) {
      row[static_cast<size_t>(v)] = fwd[static_cast<size_t>(i)][static_cast<size_t>(v)] *
                                    bwd[static_cast<size_t>(i)][static_cast<size_t>(v)];
      sum += row[static_cast<size_t>(v)];
    }
    if (sum <= 0.0) throw std::runtime_error("OracleDenoiser: inconsistent evidence");
    for (int v = 0; v < V; ++v) row[static_cast<size_t>(v)] /= sum;
  }
  return grid;
}

ProbGrid OracleDenoiser::predict_brute(const SequenceState& state) const {
  const int L = state.length();
  const int V = model_.vocab.support();
  const double* P = model_.trans.data();
  ProbGrid grid(L, V);

  // Enumerate each maximal masked run. Runs must be bounded and anchored on
  // the left; beyond the bound the forward-backward method is required.
  int i = 0;
  while (i < L) {
    if (!state.is_masked(i)) {
      grid.at(i, state.token(i)) = 1.0;
      ++i;
      continue;
    }
    int j = i;
    while (j < L && state.is_masked(j)) ++j;
    const int gap = j - i;
    if (gap > gap_bound_)
      throw std::runtime_error("OracleDenoiser: gap length above brute-force bound");
    if (i == 0) throw std::runtime_error("OracleDenoiser: brute force needs a left anchor");
    const int left = state.token(i - 1);
    const int right = (j < L) ? state.token(j) : -1;

    std::vector<int> assign(static_cast<size_t>(gap), 0);
    std::vector<std::vector<double>> marg(static_cast<size_t>(gap),
                                          std::vector<double>(static_cast<size_t>(V), 0.0));
    for (;;) {
      double w = 1.0;
      int prev = left;
      for (int k = 0; k < gap; ++k) {
        w *= P[static_cast<size_t>(prev) * V + assign[static_cast<size_t>(k)]];
        prev = assign[static_cast<size_t>(k)];
      }
      if (right >= 0) w *= P[static_cast<size_t>(prev) * V + right];
      if (w > 0.0)
        for (int k = 0; k < gap; ++k) marg[static_cast<size_t>(k)][static_cast<size_t>(assign[static_cast<size_t>(k)])] += w;
      int k = gap - 1;
      while (k >= 0 && ++assign[static_cast<size_t>(k)] == V) {
        assign[static_cast<size_t>(k)] = 0;
        --k;
      }
      if (k < 0) break;
    }
    for (int k = 0; k < gap; ++k) {
      double sum = 0.0;
      for (double x : marg[static_cast<size_t>(k)]) sum += x;
      if (sum <= 0.0) throw std::runtime_error("OracleDenoiser: inconsistent evidence");
      for (int v = 0; v < V; ++v) grid.at(i + k, v) = marg[static_cast<size_t>(k)][static_cast<size_t>(v)] / sum;
    }
    i = j;
  }
  return grid;
}

// --- training ----------------------------------------------------------------

WindowedExample serialize_window(const Example& ex, const VocabSpec& vocab, int L,
                                 bool attend_full_eos_fill) {
  const int lq = static_cast<int>(ex.prompt.size());
  const int la = static_cast<int>(ex.response.size());
  if (lq < 1 || la < 1) throw std::invalid_argument("serialize_window: need L_Q >= 1 and L_A >= 1");
  if (lq + la + 1 > L) throw std::invalid_argument("serialize_window: example does not fit the window");

  std::vector<int> tokens(static_cast<size_t>(L), vocab.eos_id);
  for (int i = 0; i < lq; ++i) tokens[static_cast<size_t>(i)] = ex.prompt[static_cast<size_t>(i)];
  for (int i = 0; i < la; ++i) tokens[static_cast<size_t>(lq + i)] = ex.response[static_cast<size_t>(i)];

  WindowedExample w;
  w.x0 = SequenceState(L);
  w.x0.add_prompt_span(0, ex.prompt);
  for (int i = lq; i < L; ++i) w.x0.commit(i, tokens[static_cast<size_t>(i)]);

  w.targets.assign(static_cast<size_t>(L), kIgnoreTarget);
  const int first_eos = lq + la;  // the EOS that immediately follows the answer
  for (int i = lq; i <= first_eos; ++i) w.targets[static_cast<size_t>(i)] = tokens[static_cast<size_t>(i)];
  if (attend_full_eos_fill)
    for (int i = first_eos + 1; i < L; ++i) w.targets[static_cast<size_t>(i)] = vocab.eos_id;
  return w;
}

namespace {

std::vector<int> loss_positions(const WindowedExample& windowed, const SequenceState& masked) {
  std::vector<int> positions;
  for (int i = 0; i < masked.length(); ++i)
    if (masked.is_masked(i) && windowed.targets[static_cast<size_t>(i)] != kIgnoreTarget)
      positions.push_back(i);
  return positions;
}

}  // namespace

double nelbo_loss(const LinearDenoiser& denoiser, const WindowedExample& windowed,
                  const SequenceState& masked, const NoiseSchedule& sched, double t) {
  const std::vector<int> positions = loss_positions(windowed, masked);
  if (positions.empty()) return 0.0;
  const double w_t = unmask_multiplier(sched, t);
  ProbGrid rows(static_cast<int>(positions.size()), denoiser.support());
  denoiser.predict_rows(masked, positions, rows);
  double loss = 0.0;
  for (size_t k = 0; k < positions.size(); ++k) {
    const int target = windowed.targets[static_cast<size_t>(positions[k])];
    loss -= std::log(rows.at(static_cast<int>(k), target));
  }
  return w_t * loss;
}

void accumulate_nelbo_grad(const DenoiserParams& params, const WindowedExample& windowed,
                           const SequenceState& masked, const NoiseSchedule& sched, double t,
                           double batch_scale, Gradient& out) {
  const std::vector<int> positions = loss_positions(windowed, masked);
  if (positions.empty()) return;
  const double w_t = unmask_multiplier(sched, t);
  const double coeff = batch_scale * w_t;
  const int V = params.V;

  LinearDenoiser local(params);  // cheap view; predict_rows only reads params
  ProbGrid rows(static_cast<int>(positions.size()), V);
  local.predict_rows(masked, positions, rows);

  std::vector<Feature> feats;
  for (size_t k = 0; k < positions.size(); ++k) {
    const int i = positions[k];
    const int target = windowed.targets[static_cast<size_t>(i)];
    auto row = rows.row(static_cast<int>(k));
    // d(-log softmax)/d(logit_v) = row_v - [v == target]
    for (int v = 0; v < V; ++v)
      out.bias[static_cast<size_t>(v)] += coeff * (row[static_cast<size_t>(v)] - (v == target ? 1.0 : 0.0));
    feats.clear();
    {
      const int lo = std::max(0, i - params.radius);
      const int hi = std::min(masked.length() - 1, i + params.radius);
      for (int j = lo; j <= hi; ++j) {
        if (j == i || masked.is_masked(j)) continue;
        feats.push_back({masked.token(j), params.kappa(std::abs(i - j))});
      }
    }
    for (const Feature& f : feats) {
      double* arow = out.assoc.data() + static_cast<size_t>(f.token) * V;
      const double cw = coeff * f.weight;
      for (int v = 0; v < V; ++v)
        arow[v] += cw * (row[static_cast<size_t>(v)] - (v == target ? 1.0 : 0.0));
    }
  }
}

Gradient grad_nelbo(const DenoiserParams& params, std::span<const BatchItem> batch,
                    const NoiseSchedule& sched, double t) {
  Gradient g = Gradient::zeros(params);
  if (batch.empty()) return g;
  const double scale = 1.0 / static_cast<double>(batch.size());
  for (const BatchItem& item : batch)
    accumulate_nelbo_grad(params, *item.windowed, *item.masked, sched, t, scale, g);
  return g;
}

void TrainConfig::validate() const {
  if (steps < 0 || lr < 0.0 || batch < 1 || window_L < 2 || schedule_steps < 1 ||
      checkpoint_every < 1 || holdout_frac < 0.0 || holdout_frac >= 1.0)
    throw std::invalid_argument("TrainConfig: all fields must be positive");
}

SftReport train_sft(LinearDenoiser& denoiser, std::span<const Example> corpus,
                    const VocabSpec& vocab, const TrainConfig& config) {
  config.validate();
  if (corpus.empty()) throw std::invalid_argument("train_sft: empty corpus");

  // Deterministic split: every k-th example is held out.
  const int holdout_stride = config.holdout_frac > 0.0
                                 ? std::max(2, static_cast<int>(1.0 / config.holdout_frac))
                                 : 0;
  std::vector<size_t> train_idx, holdout_idx;
  for (size_t i = 0; i < corpus.size(); ++i) {
    if (holdout_stride > 0 && i % static_cast<size_t>(holdout_stride) == 0)
      holdout_idx.push_back(i);
    else
      train_idx.push_back(i);
  }
  if (train_idx.empty()) throw std::invalid_argument("train_sft: no training examples after split");
  if (holdout_idx.empty()) holdout_idx.push_back(train_idx[0]);

  NoiseSchedule sched{ScheduleKind::linear, config.schedule_steps};

  auto holdout_loss = [&]() {
    double total = 0.0;
    int count = 0;
    for (size_t n = 0; n < holdout_idx.size(); ++n) {
      const Example& ex = corpus[holdout_idx[n]];
      WindowedExample w = serialize_window(ex, vocab, config.window_L, config.attend_full_eos_fill);
      Rng rng(mix_seed(config.seed ^ 0x48454c444f5554ULL, n));
      const int k = static_cast<int>(rng.uniform_in(1, config.schedule_steps));
      const double t = static_cast<double>(k) / config.schedule_steps;
      SequenceState masked = forward_mask(w.x0, sched, t, rng);
      total += nelbo_loss(denoiser, w, masked, sched, t);
      ++count;
    }
    return total / count;
  };

  SftReport report;
  report.initial_loss = holdout_loss();
  report.checkpoints.push_back({0, report.initial_loss});

  int bad_checkpoints = 0;
  for (int step = 0; step < config.steps; ++step) {
    Rng rng(mix_seed(config.seed, static_cast<uint64_t>(step)));
    Gradient g = Gradient::zeros(denoiser.params());
    const double scale = 1.0 / static_cast<double>(config.batch);
    for (int b = 0; b < config.batch; ++b) {
      const Example& ex = corpus[train_idx[rng.uniform_int(train_idx.size())]];
      WindowedExample w = serialize_window(ex, vocab, config.window_L, config.attend_full_eos_fill);
      const int k = static_cast<int>(rng.uniform_in(1, config.schedule_steps));
      const double t = static_cast<double>(k) / config.schedule_steps;
      SequenceState masked = forward_mask(w.x0, sched, t, rng);
      accumulate_nelbo_grad(denoiser.params(), w, masked, sched, t, scale, g);
    }
    DenoiserParams& p = denoiser.params();
    for (size_t i = 0; i < p.bias.size(); ++i) p.bias[i] -= config.lr * g.bias[i];
    for (size_t i = 0; i < p.assoc.size(); ++i) p.assoc[i] -= config.lr * g.assoc[i];

    if ((step + 1) % config.checkpoint_every == 0 || step + 1 == config.steps) {
      const double loss = holdout_loss();
      report.checkpoints.push_back({step + 1, loss});
      if (loss > 10.0 * report.initial_loss) {
        if (++bad_checkpoints >= 3) {
          std::ostringstream msg;
          msg << "train_sft diverged: held-out loss " << loss << " exceeds 10x initial "
              << report.initial_loss << " at step " << step + 1 << " for 3 consecutive checkpoints";
          throw std::runtime_error(msg.str());
        }
      } else {
        bad_checkpoints = 0;
      }
    }
  }
  report.final_loss = report.checkpoints.back().second;
  return report;
}

// --- params IO -----------------------------------------------------------------

namespace {

std::string fmt17(double x) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", x);
  return buf;
}

}  // namespace

void save_params(const std::string& path, const DenoiserParams& params) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("save_params: cannot open " + path);
  out << "{\n  \"version\": \"" << kParamsFormatVersion << "\",\n";
  out << "  \"V\": " << params.V << ",\n";
  out << "  \"kernel\": \"inverse\",\n";
  out << "  \"R\": " << params.radius << ",\n";
  out << "  \"bias\": [";
  for (int v = 0; v < params.V; ++v) out << (v ? "," : "") << fmt17(params.bias[static_cast<size_t>(v)]);
  out << "],\n  \"assoc\": [";
  for (int s = 0; s < params.V; ++s) {
    out << (s ? ",\n    [" : "\n    [");
    for (int d = 0; d < params.V; ++d)
      out << (d ? "," : "") << fmt17(params.assoc_at(s, d));
    out << "]";
  }
  out << "\n  ]\n}\n";
  if (!out) throw std::runtime_error("save_params: write failed for " + path);
}

DenoiserParams load_params(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("load_params: cannot open " + path);
  json j = json::parse(in, nullptr, false);
  if (j.is_discarded()) throw std::runtime_error("load_params: malformed JSON in " + path);
  const std::string version = j.value("version", "");
  if (version != kParamsFormatVersion)
    throw std::runtime_error("load_params: version mismatch: file has '" + version + "', expected '" +
                             kParamsFormatVersion + "'");
  DenoiserParams p;
  p.V = j.at("V").get<int>();
  p.radius = j.at("R").get<int>();
  const std::string kernel = j.at("kernel").get<std::string>();
  if (kernel != "inverse") throw std::runtime_error("load_params: unknown kernel '" + kernel + "'");
  p.kernel = KernelKind::inverse;
  p.bias = j.at("bias").get<std::vector<double>>();
  if (static_cast<int>(p.bias.size()) != p.V) throw std::runtime_error("load_params: bias size mismatch");
  const auto& rows = j.at("assoc");
  if (static_cast<int>(rows.size()) != p.V) throw std::runtime_error("load_params: assoc shape mismatch");
  p.assoc.reserve(static_cast<size_t>(p.V) * p.V);
  for (const auto& row : rows) {
    const auto vals = row.get<std::vector<double>>();
    if (static_cast<int>(vals.size()) != p.V) throw std::runtime_error("load_params: assoc row size mismatch");
    p.assoc.insert(p.assoc.end(), vals.begin(), vals.end());
  }
  return p;
}

}  // namespace mdlab
