#include "mdlab/corpus.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <sstream>

#include <json.hpp>

namespace mdlab {

using nlohmann::json;

std::span<const double> CorpusModel::row(int tok) const {
  const int v = vocab.support();
  if (tok < 0 || tok >= v) throw std::out_of_range("CorpusModel::row: token outside support");
  return {trans.data() + static_cast<size_t>(tok) * v, static_cast<size_t>(v)};
}

void CorpusModel::validate() const {
  vocab.validate();
  const int v = vocab.support();
  if (static_cast<int>(trans.size()) != v * v)
    throw std::invalid_argument("CorpusModel: transition table shape mismatch");
  for (int s = 0; s < v; ++s) {
    double sum = 0.0;
    for (double p : row(s)) {
      if (p < 0.0) throw std::invalid_argument("CorpusModel: negative transition probability");
      sum += p;
    }
    if (std::abs(sum - 1.0) > 1e-12)
      throw std::invalid_argument("CorpusModel: transition row does not sum to 1");
  }
  // EOS must be reachable from every state: responses terminate a.s.
  std::vector<char> reaches(static_cast<size_t>(v), 0);
  reaches[static_cast<size_t>(vocab.eos_id)] = 1;
  for (bool grew = true; grew;) {
    grew = false;
    for (int s = 0; s < v; ++s) {
      if (reaches[static_cast<size_t>(s)]) continue;
      for (int t = 0; t < v; ++t) {
        if (reaches[static_cast<size_t>(t)] && row(s)[static_cast<size_t>(t)] > 0.0) {
          reaches[static_cast<size_t>(s)] = 1;
          grew = true;
          break;
        }
      }
    }
  }
  for (char r : reaches)
    if (!r) throw std::invalid_argument("CorpusModel: EOS unreachable from some state");
  if (templates.empty()) throw std::invalid_argument("CorpusModel: no templates");
  for (const auto& t : templates) {
    if (t.empty()) throw std::invalid_argument("CorpusModel: empty template");
    for (int tok : t)
      if (!vocab.is_content(tok)) throw std::invalid_argument("CorpusModel: template token outside content vocab");
  }
}

ToyLayout toy_layout(const ToyCorpusParams& p) {
  ToyLayout l;
  l.function_begin = 0;
  l.function_end = p.n_function;
  l.anchor_begin = l.function_end;
  l.anchor_end = l.anchor_begin + p.n_templates;
  l.starter_begin = l.anchor_end;
  l.starter_end = l.starter_begin + p.n_templates;
  l.common_begin = l.starter_end;
  l.common_end = l.common_begin + p.n_common;
  l.rare_begin = l.common_end;
  l.rare_end = l.rare_begin + p.n_rare;
  l.tspec_begin = l.rare_end;
  l.tspec_end = l.tspec_begin + 5 * p.n_templates;  // q0,q1,q2,m0,m1 per template
  return l;
}

namespace {

// Deterministic pseudo-random pick used while wiring the toy table; keeps the
// model a pure function of (seed, params).
int pick(uint64_t seed, int slot, int salt, int lo, int hi) {
  uint64_t x = seed ^ (static_cast<uint64_t>(slot) << 32) ^ static_cast<uint64_t>(salt) * 0x9e3779b97f4a7c15ULL;
  const uint64_t r = Rng::splitmix64(x);
  return lo + static_cast<int>(r % static_cast<uint64_t>(hi - lo));
}

struct RowBuilder {
  std::vector<double> w;
  explicit RowBuilder(int v) : w(static_cast<size_t>(v), 0.0) {}
  void add(int tok, double mass) { w[static_cast<size_t>(tok)] += mass; }
  void add_uniform(int begin, int end, double mass) {
    for (int t = begin; t < end; ++t) w[static_cast<size_t>(t)] += mass / (end - begin);
  }
};

}  // namespace

CorpusModel make_toy_corpus_model(uint64_t seed, const ToyCorpusParams& p) {
  const ToyLayout lay = toy_layout(p);
  const int content = lay.tspec_end;
  CorpusModel model;
  model.vocab = VocabSpec::make(content);
  model.max_response_len = p.max_response_len;
  model.model_seed = seed;
  const int v = model.vocab.support();
  const int eos = model.vocab.eos_id;

  auto q_tok = [&](int tpl, int i) { return lay.tspec_begin + 5 * tpl + i; };      // i in 0..2
  auto m_tok = [&](int tpl, int i) { return lay.tspec_begin + 5 * tpl + 3 + i; };  // i in 0..1
  auto anchor = [&](int tpl) { return lay.anchor_begin + tpl; };
  auto starter = [&](int tpl) { return lay.starter_begin + tpl; };
  auto fn = [&](int i) { return lay.function_begin + i % p.n_function; };
  auto common = [&](int i) { return lay.common_begin + ((i % p.n_common) + p.n_common) % p.n_common; };

  auto rare = [&](int i) { return lay.rare_begin + ((i % p.n_rare) + p.n_rare) % p.n_rare; };

  std::vector<double> table(static_cast<size_t>(v) * v, 0.0);
  auto put_row = [&](int src, const RowBuilder& b) {
    double named = std::accumulate(b.w.begin(), b.w.end(), 0.0);
    const double eps_each = p.smoothing / v;
    double sum = 0.0;
    for (int t = 0; t < v; ++t) {
      double val = (1.0 - p.smoothing) * (b.w[static_cast<size_t>(t)] / named) + eps_each;
      table[static_cast<size_t>(src) * v + t] = val;
      sum += val;
    }
    for (int t = 0; t < v; ++t) table[static_cast<size_t>(src) * v + t] /= sum;
  };

  // Shared rows form tight reversible clusters: function word j pairs with
  // common tokens 2j and 2j+1; within-cluster transitions dominate and
  // cross-cluster hops are rare. Sequences are bursts inside a cluster with
  // occasional moves to a neighboring one.
  for (int j = 0; j < p.n_function; ++j) {
    RowBuilder b(v);
    b.add(fn(j), p.stutter_rate);
    b.add(common(2 * j), 0.27);
    b.add(common(2 * j + 1), 0.27);
    b.add(fn(j + 1), 0.055);
    b.add(fn(j - 1 + p.n_function), 0.055);
    b.add_uniform(lay.common_begin, lay.common_end, 0.05);
    b.add(eos, p.eos_rate);
    put_row(fn(j), b);
  }
  for (int c = 0; c < p.n_common; ++c) {
    RowBuilder b(v);
    b.add(common(c), p.stutter_rate);
    b.add(fn((c / 2) % p.n_function), 0.30);   // cluster's function word
    b.add(common(c ^ 1), 0.26);                // cluster partner
    b.add(fn((c / 2 + 1) % p.n_function), 0.04);
    b.add_uniform(lay.common_begin, lay.common_end, 0.05);
    b.add(eos, p.eos_rate + 0.01);
    put_row(lay.common_begin + c, b);
  }
  for (int r = 0; r < p.n_rare; ++r) {
    RowBuilder b(v);
    b.add(fn(r), 0.40);
    b.add(common(3 * r), 0.40);
    b.add(eos, 0.20);
    put_row(rare(r), b);
  }

  // Template-specific rows. Anchors concentrate on their starter; meaning
  // tokens route a controlled slice back to the template's prompt tokens.
  for (int tpl = 0; tpl < p.n_templates; ++tpl) {
    {
      RowBuilder b(v);
      b.add(starter(tpl), p.anchor_sharpness);
      b.add(m_tok(tpl, 0), 1.0 - p.anchor_sharpness);
      put_row(anchor(tpl), b);
    }
    {
      RowBuilder b(v);
      b.add(m_tok(tpl, 0), 0.45);
      b.add(m_tok(tpl, 1), 0.20);
      b.add(fn(pick(seed, 200 + tpl, 1, 0, p.n_function)), 0.10);
      b.add(fn(pick(seed, 200 + tpl, 2, 0, p.n_function)), 0.08);
      b.add(common(pick(seed, 200 + tpl, 3, 0, p.n_common)), 0.17);
      put_row(starter(tpl), b);
    }
    for (int i = 0; i < 2; ++i) {
      RowBuilder b(v);
      b.add(fn(pick(seed, 300 + 2 * tpl + i, 1, 0, p.n_function)), 0.17);
      b.add(fn(pick(seed, 300 + 2 * tpl + i, 2, 0, p.n_function)), 0.13);
      b.add(m_tok(tpl, 1 - i), 0.20);
      b.add(q_tok(tpl, pick(seed, 300 + 2 * tpl + i, 3, 0, 3)), p.repeat_rate);
      b.add(common(pick(seed, 300 + 2 * tpl + i, 4, 0, p.n_common)), 0.13);
      b.add(common(pick(seed, 300 + 2 * tpl + i, 5, 0, p.n_common)), 0.12);
      b.add(eos, 0.04 + 0.02 * i);
      put_row(m_tok(tpl, i), b);
    }
    for (int i = 0; i < 3; ++i) {
      RowBuilder b(v);
      b.add(fn(pick(seed, 400 + 3 * tpl + i, 1, 0, p.n_function)), 0.22);
      b.add(fn(pick(seed, 400 + 3 * tpl + i, 2, 0, p.n_function)), 0.16);
      b.add(common(pick(seed, 400 + 3 * tpl + i, 3, 0, p.n_common)), 0.20);
      b.add(common(pick(seed, 400 + 3 * tpl + i, 4, 0, p.n_common)), 0.15);
      b.add(m_tok(tpl, 0), 0.12);
      b.add(eos, 0.06);
      put_row(q_tok(tpl, i), b);
    }
  }

  // EOS absorbs.
  table[static_cast<size_t>(eos) * v + eos] = 1.0;
  model.trans = std::move(table);

  // Prompt templates: the three question tokens appear twice each (keeps them
  // comfortably inside the top-100 cut), one function word, one rotating
  // common token, and the template anchor last. L_Q = 9 for every template.
  for (int tpl = 0; tpl < p.n_templates; ++tpl) {
    std::vector<int> prompt = {q_tok(tpl, 0), q_tok(tpl, 1), q_tok(tpl, 2),
                               fn(0),         q_tok(tpl, 0), q_tok(tpl, 1),
                               q_tok(tpl, 2), common(5 * tpl), anchor(tpl)};
    model.templates.push_back(std::move(prompt));
  }

  model.validate();
  return model;
}

Example sample_example(const CorpusModel& model, Rng& rng) {
  Example ex;
  ex.prompt = model.templates[rng.uniform_int(model.templates.size())];
  int state = ex.prompt.back();
  const int eos = model.vocab.eos_id;
  for (int k = 0; k < model.max_response_len; ++k) {
    auto r = model.row(state);
    const int next = static_cast<int>(rng.categorical(r, 1.0));
    if (next == eos) break;
    ex.response.push_back(next);
    state = next;
  }
  if (ex.response.empty()) {
    // L_A >= 1 by contract; the anchor row carries negligible EOS mass so
    // this is a smoothing-tail event. Take the anchor row's argmax.
    auto r = model.row(state);
    int best = 0;
    for (int t = 1; t < model.vocab.content_size; ++t)
      if (r[static_cast<size_t>(t)] > r[static_cast<size_t>(best)]) best = t;
    ex.response.push_back(best);
  }
  return ex;
}

std::vector<Example> generate_corpus(const CorpusModel& model, int n, uint64_t seed) {
  if (n < 0) throw std::invalid_argument("generate_corpus: n must be >= 0");
  std::vector<Example> out;
  out.reserve(static_cast<size_t>(n));
  for (int k = 0; k < n; ++k) {
    Rng rng(mix_seed(seed, static_cast<uint64_t>(k)));
    out.push_back(sample_example(model, rng));
  }
  return out;
}

OracleScore oracle_logprob(const CorpusModel& model, std::span<const int> response,
                           std::span<const int> prompt) {
  if (prompt.empty()) throw std::invalid_argument("oracle_logprob: empty prompt");
  OracleScore score;
  int state = prompt.back();
  for (int tok : response) {
    if (!model.vocab.in_support(tok) || tok == model.vocab.eos_id)
      throw std::invalid_argument("oracle_logprob: response token outside content vocabulary");
    const double p = model.row(state)[static_cast<size_t>(tok)];
    if (p > 0.0) {
      score.logprob += std::log(p);
    } else {
      score.logprob += std::log(kOracleFloor);
      score.floored = true;
    }
    state = tok;
    ++score.length;
  }
  return score;
}

double oracle_ppl(const OracleScore& score) {
  if (score.length == 0) throw std::invalid_argument("oracle_ppl: zero-length response");
  return std::exp(-score.logprob / score.length);
}

CorpusPplStats corpus_ppl_stats(const CorpusModel& model, std::span<const Example> corpus) {
  if (corpus.empty()) throw std::invalid_argument("corpus_ppl_stats: empty corpus");
  double sum = 0.0, sum2 = 0.0;
  for (const Example& ex : corpus) {
    const double ppl = oracle_ppl(oracle_logprob(model, ex.response, ex.prompt));
    sum += ppl;
    sum2 += ppl * ppl;
  }
  const double n = static_cast<double>(corpus.size());
  CorpusPplStats stats;
  stats.mu = sum / n;
  stats.sigma = std::sqrt(std::max(0.0, sum2 / n - stats.mu * stats.mu));
  return stats;
}

PriorTable compute_prior(const VocabSpec& vocab, std::span<const Example> corpus) {
  if (corpus.empty()) throw std::invalid_argument("compute_prior: empty corpus");
  const int v = vocab.support();
  std::vector<int64_t> counts(static_cast<size_t>(v), 0);
  int64_t total = 0;
  auto tally = [&](const std::vector<int>& seq) {
    for (int tok : seq) {
      if (!vocab.in_support(tok)) throw std::invalid_argument("compute_prior: token outside support");
      ++counts[static_cast<size_t>(tok)];
      ++total;
    }
  };
  for (const Example& ex : corpus) {
    tally(ex.prompt);
    tally(ex.response);
  }

  PriorTable prior;
  prior.freq.resize(static_cast<size_t>(v));
  prior.log_prior.resize(static_cast<size_t>(v));
  prior.floor_log = std::log(1.0 / (10.0 * static_cast<double>(total)));
  for (int t = 0; t < v; ++t) {
    prior.freq[static_cast<size_t>(t)] = static_cast<double>(counts[static_cast<size_t>(t)]) / static_cast<double>(total);
    prior.log_prior[static_cast<size_t>(t)] =
        counts[static_cast<size_t>(t)] > 0 ? std::log(prior.freq[static_cast<size_t>(t)]) : prior.floor_log;
  }

  std::vector<int> order(static_cast<size_t>(v));
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](int a, int b) {
    if (counts[static_cast<size_t>(a)] != counts[static_cast<size_t>(b)])
      return counts[static_cast<size_t>(a)] > counts[static_cast<size_t>(b)];
    return a < b;  // documented tie-break: lower id first
  });
  const int take = std::min(100, v);
  prior.top100.assign(order.begin(), order.begin() + take);
  prior.is_top100.assign(static_cast<size_t>(v), 0);
  for (int t : prior.top100) prior.is_top100[static_cast<size_t>(t)] = 1;
  return prior;
}

namespace {

json vocab_to_json(const VocabSpec& v) {
  return json{{"content_size", v.content_size},
              {"eos_id", v.eos_id},
              {"mask_id", v.mask_id},
              {"pad_id", v.pad_id}};
}

VocabSpec vocab_from_json(const json& j) {
  VocabSpec v;
  v.content_size = j.at("content_size").get<int>();
  v.eos_id = j.at("eos_id").get<int>();
  v.mask_id = j.at("mask_id").get<int>();
  v.pad_id = j.at("pad_id").get<int>();
  v.validate();
  return v;
}

[[noreturn]] void parse_fail(const std::string& path, int line, const std::string& what) {
  throw std::runtime_error(path + ":" + std::to_string(line) + ": " + what);
}

}  // namespace

void save_corpus(const std::string& path, const VocabSpec& vocab, uint64_t seed,
                 std::span<const Example> corpus) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("save_corpus: cannot open " + path);
  json header{{"version", kCorpusFormatVersion}, {"vocab", vocab_to_json(vocab)}, {"seed", seed}};
  out << header.dump() << "\n";
  for (const Example& ex : corpus) {
    json rec{{"prompt", ex.prompt}, {"response", ex.response}};
    out << rec.dump() << "\n";
  }
  if (!out) throw std::runtime_error("save_corpus: write failed for " + path);
}

CorpusFile load_corpus(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("load_corpus: cannot open " + path);
  CorpusFile file;
  std::string line;
  int lineno = 0;

  if (!std::getline(in, line)) parse_fail(path, 1, "missing header line");
  ++lineno;
  json header = json::parse(line, nullptr, false);
  if (header.is_discarded()) parse_fail(path, lineno, "malformed JSON header");
  const std::string version = header.value("version", "");
  if (version != kCorpusFormatVersion)
    parse_fail(path, lineno,
               "version mismatch: file has '" + version + "', expected '" + kCorpusFormatVersion + "'");
  file.vocab = vocab_from_json(header.at("vocab"));
  file.seed = header.at("seed").get<uint64_t>();

  const int alphabet = file.vocab.alphabet();
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    json rec = json::parse(line, nullptr, false);
    if (rec.is_discarded()) parse_fail(path, lineno, "malformed JSON record");
    Example ex;
    try {
      ex.prompt = rec.at("prompt").get<std::vector<int>>();
      ex.response = rec.at("response").get<std::vector<int>>();
    } catch (const json::exception& e) {
      parse_fail(path, lineno, std::string("bad record: ") + e.what());
    }
    for (int tok : ex.prompt) {
      if (tok < 0 || tok >= alphabet) parse_fail(path, lineno, "token id outside alphabet");
      if (tok == file.vocab.mask_id || tok == file.vocab.pad_id)
        parse_fail(path, lineno, "MASK/PAD id inside example");
    }
    for (int tok : ex.response) {
      if (tok < 0 || tok >= alphabet) parse_fail(path, lineno, "token id outside alphabet");
      if (tok == file.vocab.mask_id || tok == file.vocab.pad_id)
        parse_fail(path, lineno, "MASK/PAD id inside example");
    }
    if (ex.prompt.empty() || ex.response.empty()) parse_fail(path, lineno, "empty prompt or response");
    file.examples.push_back(std::move(ex));
  }
  return file;
}

void save_prior(const std::string& path, const PriorTable& prior) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("save_prior: cannot open " + path);
  json j{{"version", kPriorFormatVersion},
         {"freq", prior.freq},
         {"top100", prior.top100},
         {"floor_log", prior.floor_log}};
  out << j.dump(2) << "\n";
}

PriorTable load_prior(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("load_prior: cannot open " + path);
  json j = json::parse(in, nullptr, false);
  if (j.is_discarded()) throw std::runtime_error("load_prior: malformed JSON in " + path);
  const std::string version = j.value("version", "");
  if (version != kPriorFormatVersion)
    throw std::runtime_error("load_prior: version mismatch: file has '" + version + "', expected '" +
                             kPriorFormatVersion + "'");
  PriorTable prior;
  prior.freq = j.at("freq").get<std::vector<double>>();
  prior.top100 = j.at("top100").get<std::vector<int>>();
  prior.floor_log = j.at("floor_log").get<double>();
  prior.log_prior.resize(prior.freq.size());
  for (size_t t = 0; t < prior.freq.size(); ++t)
    prior.log_prior[t] = prior.freq[t] > 0.0 ? std::log(prior.freq[t]) : prior.floor_log;
  prior.is_top100.assign(prior.freq.size(), 0);
  for (int t : prior.top100) {
    if (t < 0 || t >= static_cast<int>(prior.freq.size()))
      throw std::runtime_error("load_prior: top100 id outside table");
    prior.is_top100[static_cast<size_t>(t)] = 1;
  }
  return prior;
}

}  // namespace mdlab
