#include <doctest.h>

#include <cmath>
#include <limits>

#include "mdlab/corpus.hpp"
#include "mdlab/r2ft.hpp"

using namespace mdlab;

namespace {

// Independent re-implementation of the corruption rule, written directly from
// its definition: same draw order (c, g resampled while g > c, z, EOS
// position), modulo-indexed cyclic fill instead of the library's loop.
std::vector<int> corrupt_reference(const Example& ex, int L, const CorruptionConfig& cfg,
                                   const VocabSpec& vocab, Rng& rng) {
  const int lq = static_cast<int>(ex.prompt.size());
  const int la = static_cast<int>(ex.response.size());
  std::vector<int> x0;
  for (int t : ex.prompt) x0.push_back(t);
  for (int t : ex.response) x0.push_back(t);

  const int c = static_cast<int>(rng.uniform_in(lq, lq + la));
  int g = 0;
  do {
    g = static_cast<int>(rng.uniform_in(1, cfg.g_max));
  } while (g > c);
  const int z = static_cast<int>(rng.uniform_in(cfg.z_min, cfg.z_max));

  std::vector<int> unit(x0.begin() + (c - g), x0.begin() + c);
  std::vector<int> out(static_cast<size_t>(L), vocab.pad_id);
  for (int i = 0; i < c; ++i) out[static_cast<size_t>(i)] = x0[static_cast<size_t>(i)];
  for (int j = 0; j < z; ++j)
    out[static_cast<size_t>(c + j)] = unit[static_cast<size_t>(j % g)];
  if (cfg.eos_insert) {
    const int pos = static_cast<int>(rng.uniform_in(c, c + z - 1));
    out[static_cast<size_t>(pos)] = vocab.eos_id;
  }
  return out;
}

DenoiserParams small_params(uint64_t seed) {
  Rng rng(seed);
  return random_params(6, 3, 0.5, rng);
}

PreferencePair small_pair(uint64_t seed = 12) {
  const VocabSpec vocab = VocabSpec::make(5);
  Example ex;
  ex.prompt = {1, 2};
  ex.response = {3, 4, 0, 2};
  CorruptionConfig cfg;
  cfg.g_max = 2;
  cfg.z_min = 2;
  cfg.z_max = 4;
  Rng rng(seed);
  return make_preference_pair(ex, 16, cfg, vocab, rng);
}

template <typename LossFn>
Gradient numeric_grad(DenoiserParams params, LossFn loss, double h = 1e-5) {
  Gradient g = Gradient::zeros(params);
  for (size_t i = 0; i < params.bias.size(); ++i) {
    const double keep = params.bias[i];
    params.bias[i] = keep + h;
    const double up = loss(params);
    params.bias[i] = keep - h;
    const double dn = loss(params);
    params.bias[i] = keep;
    g.bias[i] = (up - dn) / (2.0 * h);
  }
  for (size_t i = 0; i < params.assoc.size(); ++i) {
    const double keep = params.assoc[i];
    params.assoc[i] = keep + h;
    const double up = loss(params);
    params.assoc[i] = keep - h;
    const double dn = loss(params);
    params.assoc[i] = keep;
    g.assoc[i] = (up - dn) / (2.0 * h);
  }
  return g;
}

}  // namespace

TEST_CASE("corrupt: hand-executed example") {
  // x_0 = [Q1,Q2,A1,A2,A3,A4]; with c=4, g=2, z=4 the window becomes
  // [Q1,Q2,A1,A2, A1,A2,A1,A2, PAD...]. Find a seed that draws (c=4, g=2) and
  // check the assembled window against the hand execution.
  const VocabSpec vocab = VocabSpec::make(20);
  Example ex;
  ex.prompt = {10, 11};
  ex.response = {12, 13, 14, 15};
  CorruptionConfig cfg;
  cfg.g_max = 2;
  cfg.z_min = 4;
  cfg.z_max = 4;
  cfg.eos_insert = false;

  bool found = false;
  for (uint64_t seed = 0; seed < 400 && !found; ++seed) {
    Rng probe(seed);
    const int c = static_cast<int>(probe.uniform_in(2, 6));
    int g;
    do {
      g = static_cast<int>(probe.uniform_in(1, 2));
    } while (g > c);
    if (c != 4 || g != 2) continue;
    found = true;
    Rng rng(seed);
    const auto window = corrupt(ex, 16, cfg, vocab, rng);
    const std::vector<int> expect{10, 11, 12, 13, 12, 13, 12, 13,
                                  vocab.pad_id, vocab.pad_id, vocab.pad_id, vocab.pad_id,
                                  vocab.pad_id, vocab.pad_id, vocab.pad_id, vocab.pad_id};
    CHECK(window == expect);
  }
  CHECK(found);
}

TEST_CASE("corrupt: unit length 1 repeats the boundary token") {
  const VocabSpec vocab = VocabSpec::make(20);
  Example ex;
  ex.prompt = {10, 11};
  ex.response = {12, 13};
  CorruptionConfig cfg;
  cfg.g_max = 1;  // g is always 1
  cfg.z_min = 3;
  cfg.z_max = 3;
  cfg.eos_insert = false;
  for (uint64_t seed = 0; seed < 64; ++seed) {
    Rng rng(seed);
    const auto window = corrupt(ex, 12, cfg, vocab, rng);
    Rng replay(seed);
    const int c = static_cast<int>(replay.uniform_in(2, 4));
    const int boundary = window[static_cast<size_t>(c - 1)];
    for (int j = 0; j < 3; ++j) CHECK(window[static_cast<size_t>(c + j)] == boundary);
  }
}

TEST_CASE("corrupt matches the independent oracle implementation over 1000 seeds") {
  const VocabSpec vocab = VocabSpec::make(30);
  Example ex;
  ex.prompt = {20, 21, 22};
  ex.response = {23, 24, 25, 26, 27, 28, 5, 6, 7};
  CorruptionConfig cfg;  // defaults: g_max 8, z_min 4
  cfg.z_max = 32;
  for (uint64_t seed = 0; seed < 1000; ++seed) {
    Rng a(seed), b(seed);
    const auto ours = corrupt(ex, 64, cfg, vocab, a);
    const auto ref = corrupt_reference(ex, 64, cfg, vocab, b);
    REQUIRE(ours == ref);
  }
  SUBCASE("with EOS insertion") {
    cfg.eos_insert = true;
    for (uint64_t seed = 0; seed < 1000; ++seed) {
      Rng a(seed), b(seed);
      REQUIRE(corrupt(ex, 64, cfg, vocab, a) == corrupt_reference(ex, 64, cfg, vocab, b));
    }
  }
}

TEST_CASE("corrupt: output length, span size, and PAD tail") {
  const VocabSpec vocab = VocabSpec::make(30);
  Example ex;
  ex.prompt = {20, 21, 22};
  ex.response = {23, 24, 25, 26};
  CorruptionConfig cfg;
  cfg.z_max = 16;
  cfg.eos_insert = false;
  for (uint64_t seed = 0; seed < 200; ++seed) {
    Rng rng(seed);
    Rng replay(seed);
    const auto window = corrupt(ex, 40, cfg, vocab, rng);
    const int c = static_cast<int>(replay.uniform_in(3, 7));
    int g;
    do {
      g = static_cast<int>(replay.uniform_in(1, 8));
    } while (g > c);
    const int z = static_cast<int>(replay.uniform_in(4, 16));
    CHECK(window.size() == 40);
    for (int i = c + z; i < 40; ++i) CHECK(window[static_cast<size_t>(i)] == vocab.pad_id);
    for (int i = c; i < c + z; ++i) CHECK(window[static_cast<size_t>(i)] != vocab.pad_id);
  }
}

TEST_CASE("make_preference_pair: shapes and masked targets") {
  const PreferencePair pair = small_pair();
  CHECK(pair.y_w.size() >= 1);
  CHECK(pair.y_l.size() >= 1);
  for (const auto& [pos, tok] : pair.y_w) {
    CHECK(pair.context.is_masked(pos));
    CHECK(tok >= 0);
  }
  for (const auto& [pos, tok] : pair.y_l) {
    (void)tok;
    CHECK(pair.context.is_masked(pos));
  }
  // y_w ends with the EOS immediately after the answer, at position L_Q + L_A
  CHECK(pair.y_w.back().second == 5);
  CHECK(pair.y_w.back().first == 6);
}

TEST_CASE("seq_logprob: one-hot, uniform, and per-position decomposition") {
  SUBCASE("uniform rows: |y|=3 over V=10 gives 3 ln(1/10)") {
    LinearDenoiser d(DenoiserParams::zeros(10, 3));
    SequenceState ctx(8);
    ctx.commit(0, 1);
    std::vector<std::pair<int, int>> targets{{2, 4}, {3, 7}, {5, 0}};
    CHECK(seq_logprob(d, ctx, targets) == doctest::Approx(3.0 * std::log(0.1)).epsilon(1e-12));
  }

  SUBCASE("near-one-hot correct rows give ~0") {
    DenoiserParams p = DenoiserParams::zeros(6, 3);
    p.bias[4] = 50.0;
    LinearDenoiser d(p);
    SequenceState ctx(6);
    ctx.commit(0, 1);
    std::vector<std::pair<int, int>> targets{{2, 4}, {4, 4}};
    CHECK(seq_logprob(d, ctx, targets) == doctest::Approx(0.0).epsilon(1e-9));
  }

  SUBCASE("equals the sum of individually queried rows") {
    Rng rng(9);
    LinearDenoiser d(random_params(6, 3, 0.7, rng));
    SequenceState ctx(10);
    ctx.commit(0, 2);
    ctx.commit(4, 5);
    std::vector<std::pair<int, int>> targets{{1, 3}, {2, 0}, {6, 5}, {8, 1}};
    const double whole = seq_logprob(d, ctx, targets);
    double parts = 0.0;
    const ProbGrid grid = d.predict(ctx);
    for (const auto& [pos, tok] : targets) parts += std::log(grid.at(pos, tok));
    CHECK(whole == doctest::Approx(parts).epsilon(1e-12));
  }

  SUBCASE("out-of-support target yields the -inf sentinel") {
    LinearDenoiser d(DenoiserParams::zeros(6, 3));
    SequenceState ctx(4);
    ctx.commit(0, 1);
    std::vector<std::pair<int, int>> targets{{2, 7}};
    CHECK(seq_logprob(d, ctx, targets) == -std::numeric_limits<double>::infinity());
  }

  SUBCASE("unmasked target position is an error") {
    LinearDenoiser d(DenoiserParams::zeros(6, 3));
    SequenceState ctx(4);
    ctx.commit(0, 1);
    std::vector<std::pair<int, int>> targets{{0, 1}};
    CHECK_THROWS_AS(seq_logprob(d, ctx, targets), std::invalid_argument);
  }
}

TEST_CASE("penalty_s: trivial and derived values") {
  CHECK(penalty_s(-2.0, 1, -2.0, 1, 1.0) == doctest::Approx(0.5));
  // beta=1, normalized logs -10 (l) and -2 (w): sigma(-8)
  CHECK(penalty_s(-2.0, 1, -10.0, 1, 1.0) == doctest::Approx(3.3535013046647827e-4).epsilon(1e-9));
  CHECK(penalty_s(-2.0, 1, -std::numeric_limits<double>::infinity(), 3, 1.0) == 0.0);
}

TEST_CASE("penalty_s is monotone in both normalized log-probs") {
  double prev = -1.0;
  for (int i = 0; i < 10; ++i) {
    const double s = penalty_s(-4.0, 1, -10.0 + i, 1, 1.0);
    CHECK(s > prev);
    prev = s;
  }
  for (int j = 0; j < 10; ++j) {
    const double lp_w = -10.0 + j;
    CHECK(penalty_s(lp_w, 1, -4.0, 1, 1.0) < penalty_s(lp_w - 0.5, 1, -4.0, 1, 1.0));
  }
}

TEST_CASE("r2ft_loss: sigma(0) cases and the reject-term limit") {
  LinearDenoiser uniform(DenoiserParams::zeros(6, 3));
  PreferencePair pair;
  pair.context = SequenceState(10);
  pair.context.commit(0, 1);
  pair.y_w = {{2, 1}, {3, 2}};
  pair.y_l = {{4, 3}, {5, 4}};

  SUBCASE("gamma=0 with equal normalized logs gives ln 2") {
    CHECK(r2ft_loss(uniform, pair, 0.0, 1.0) == doctest::Approx(std::log(2.0)).epsilon(1e-12));
  }

  SUBCASE("gamma > 0 adds the length-normalized clean term") {
    const double norm_log = std::log(1.0 / 6.0);
    const double expect = -0.1 * norm_log + std::log(2.0);
    CHECK(r2ft_loss(uniform, pair, 0.1, 1.0) == doctest::Approx(expect).epsilon(1e-12));
  }

  SUBCASE("out-of-support y_l: reject term vanishes") {
    PreferencePair bad = pair;
    bad.y_l = {{4, 9}};
    const double expect = -0.1 * std::log(1.0 / 6.0);
    CHECK(r2ft_loss(uniform, bad, 0.1, 1.0) == doctest::Approx(expect).epsilon(1e-12));
  }
}

TEST_CASE("r2ft swap property: loss(w,l) + loss(l,w) >= 2 ln 2 at gamma 0") {
  for (uint64_t seed = 0; seed < 40; ++seed) {
    LinearDenoiser d(small_params(seed + 500));
    PreferencePair pair = small_pair(seed);
    PreferencePair swapped = pair;
    std::swap(swapped.y_w, swapped.y_l);
    const double a = r2ft_loss(d, pair, 0.0, 1.0);
    const double b = r2ft_loss(d, swapped, 0.0, 1.0);
    CHECK(a + b >= 2.0 * std::log(2.0) - 1e-12);
  }
}

TEST_CASE("grad_r2ft matches central finite differences on 20 random instances") {
  for (uint64_t inst = 0; inst < 20; ++inst) {
    DenoiserParams p = small_params(inst);
    PreferencePair pair = small_pair(inst + 60);
    const double gamma = (inst % 2) ? 0.1 : 0.3;
    const Gradient analytic = grad_r2ft(p, pair, gamma, 1.0);
    const Gradient numeric = numeric_grad(p, [&](const DenoiserParams& q) {
      LinearDenoiser d(q);
      return r2ft_loss(d, pair, gamma, 1.0);
    });
    for (size_t i = 0; i < analytic.bias.size(); ++i) {
      if (std::abs(analytic.bias[i]) <= 1e-8) continue;
      CHECK(std::abs(analytic.bias[i] - numeric.bias[i]) / std::abs(analytic.bias[i]) < 1e-4);
    }
    for (size_t i = 0; i < analytic.assoc.size(); ++i) {
      if (std::abs(analytic.assoc[i]) <= 1e-8) continue;
      CHECK(std::abs(analytic.assoc[i] - numeric.assoc[i]) / std::abs(analytic.assoc[i]) < 1e-4);
    }
  }
}

TEST_CASE("reject-term gradient equals -beta s (grad_w/|y_w| - grad_l/|y_l|) across code paths") {
  for (uint64_t inst = 0; inst < 10; ++inst) {
    DenoiserParams p = small_params(inst + 30);
    PreferencePair pair = small_pair(inst + 90);
    LinearDenoiser d(p);

    const Gradient reject = grad_r2ft(p, pair, 0.0, 1.0);  // gamma 0 isolates the reject term
    const double s_w = seq_logprob(d, pair.context, pair.y_w);
    const double s_l = seq_logprob(d, pair.context, pair.y_l);
    const double s_theta = penalty_s(s_w, static_cast<int>(pair.y_w.size()), s_l,
                                     static_cast<int>(pair.y_l.size()), 1.0);
    const Gradient gw = seq_logprob_grad(p, pair.context, pair.y_w);
    const Gradient gl = seq_logprob_grad(p, pair.context, pair.y_l);
    const double cw = -s_theta / static_cast<double>(pair.y_w.size());
    const double cl = s_theta / static_cast<double>(pair.y_l.size());
    for (size_t i = 0; i < reject.bias.size(); ++i)
      CHECK(std::abs(reject.bias[i] - (cw * gw.bias[i] + cl * gl.bias[i])) < 1e-10);
    for (size_t i = 0; i < reject.assoc.size(); ++i)
      CHECK(std::abs(reject.assoc[i] - (cw * gw.assoc[i] + cl * gl.assoc[i])) < 1e-10);
  }
}

TEST_CASE("grad_r2ft: sentinel y_l zeroes the reject term exactly") {
  DenoiserParams p = small_params(77);
  PreferencePair pair = small_pair(44);
  pair.y_l = {{pair.y_l[0].first, 9}};  // outside support
  const Gradient g = grad_r2ft(p, pair, 0.0, 1.0);
  CHECK(g.max_abs() == 0.0);
}

TEST_CASE("grad_r2ft ascent property: gamma=0 step increases the preference margin") {
  DenoiserParams p = small_params(3);
  PreferencePair pair = small_pair(5);
  const Gradient g = grad_r2ft(p, pair, 0.0, 1.0);

  auto margin = [&](const DenoiserParams& q) {
    LinearDenoiser d(q);
    const double s_w = seq_logprob(d, pair.context, pair.y_w) / pair.y_w.size();
    const double s_l = seq_logprob(d, pair.context, pair.y_l) / pair.y_l.size();
    return s_w - s_l;
  };
  const double before = margin(p);
  DenoiserParams stepped = p;
  const double lr = 1e-3;
  for (size_t i = 0; i < stepped.bias.size(); ++i) stepped.bias[i] -= lr * g.bias[i];
  for (size_t i = 0; i < stepped.assoc.size(); ++i) stepped.assoc[i] -= lr * g.assoc[i];
  CHECK(margin(stepped) > before);
}

TEST_CASE("train_r2ft: 0 steps returns unchanged params and empty history") {
  const CorpusModel model = make_toy_corpus_model(5);
  const auto corpus = generate_corpus(model, 100, 9);
  const PriorTable prior = compute_prior(model.vocab, corpus);
  LinearDenoiser d(DenoiserParams::zeros(model.vocab.support(), 8));
  R2ftConfig cfg;
  cfg.steps = 0;
  cfg.window_L = 192;
  const auto history = train_r2ft(d, corpus, model.vocab, prior, cfg);
  CHECK(history.empty());
  for (double b : d.params().bias) CHECK(b == 0.0);
}

TEST_CASE("train_r2ft: widens the preference margin and is deterministic") {
  const CorpusModel model = make_toy_corpus_model(5);
  const auto corpus = generate_corpus(model, 400, 9);
  const PriorTable prior = compute_prior(model.vocab, corpus);
  LinearDenoiser d(DenoiserParams::zeros(model.vocab.support(), 8));
  TrainConfig sft;
  sft.steps = 800;
  sft.lr = 1.0;
  sft.batch = 8;
  sft.window_L = 192;
  sft.checkpoint_every = 400;
  train_sft(d, corpus, model.vocab, sft);

  R2ftConfig cfg;
  cfg.steps = 60;
  cfg.lr = 0.3;
  cfg.batch = 4;
  cfg.window_L = 192;
  cfg.corruption.z_max = 16;
  cfg.val_every = 60;
  cfg.val_pairs = 24;
  cfg.probe_samples = 2;
  cfg.probe_steps = 16;
  LinearDenoiser a = d;
  const auto history = train_r2ft(a, corpus, model.vocab, prior, cfg);
  REQUIRE(history.size() >= 2);
  // the objective maximizes the normalized clean-vs-corrupted margin
  const double margin_start = history.front().loss_l - history.front().loss_w;
  const double margin_end = history.back().loss_l - history.back().loss_w;
  CHECK(margin_end > margin_start);

  // deterministic given the seed
  LinearDenoiser b = d;
  const auto history2 = train_r2ft(b, corpus, model.vocab, prior, cfg);
  CHECK(a.params().bias == b.params().bias);
  CHECK(a.params().assoc == b.params().assoc);
  CHECK(history2.back().loss_l == history.back().loss_l);
}
