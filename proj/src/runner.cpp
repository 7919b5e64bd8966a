#include "mdlab/runner.hpp"

#include <atomic>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <memory>
#include <sstream>
#include <thread>

#include <json.hpp>

#include "mdlab/corpus.hpp"
#include "mdlab/decoding.hpp"
#include "mdlab/denoiser.hpp"
#include "mdlab/hazard.hpp"
#include "mdlab/manifest.hpp"
#include "mdlab/metrics.hpp"
#include "mdlab/r2ft.hpp"
#include "mdlab/svg.hpp"

namespace mdlab {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::string key(const std::string& cmd, const std::string& name) { return cmd + "." + name; }

std::vector<int> parse_int_list(const std::string& text) {
  std::vector<int> out;
  std::istringstream in(text);
  std::string item;
  while (std::getline(in, item, ',')) {
    if (item.empty()) continue;
    out.push_back(std::stoi(item));
  }
  return out;
}

std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

Manifest start_manifest(const std::string& command, const Config& cfg) {
  Manifest m;
  m.command = command;
  m.config = cfg.entries();
  return m;
}

void add_input(Manifest& m, const std::string& path) { m.inputs[path] = file_hash_hex(path); }
void add_output(Manifest& m, const std::string& path) { m.outputs[path] = file_hash_hex(path); }

struct LoadedCorpus {
  CorpusFile file;
  CorpusModel model;
  PriorTable prior;
};

LoadedCorpus load_corpus_bundle(const std::string& path) {
  LoadedCorpus lc;
  lc.file = load_corpus(path);
  // The generative model is a pure function of the header seed.
  lc.model = make_toy_corpus_model(lc.file.seed);
  if (lc.model.vocab.content_size != lc.file.vocab.content_size)
    throw std::runtime_error("corpus vocab does not match the model derived from its seed");
  lc.prior = compute_prior(lc.file.vocab, lc.file.examples);
  return lc;
}

DecodePolicy policy_from_config(const Config& cfg, const std::string& cmd) {
  DecodePolicy policy;
  const std::string base = cfg.get_string(key(cmd, "base"), "categorical");
  if (base == "categorical") policy.base = BaseSampler::categorical;
  else if (base == "topk") policy.base = BaseSampler::topk_glob;
  else if (base == "llada") policy.base = BaseSampler::llada;
  else throw std::runtime_error("unknown base sampler '" + base + "'");
  policy.topk = static_cast<int>(cfg.get_int(key(cmd, "k"), 20));
  const int kernel = static_cast<int>(cfg.get_int(key(cmd, "conv_kernel"), 0));
  if (kernel > 0) policy.conv = ConvSettings{kernel, cfg.get_double(key(cmd, "conv_lambda"), 1.0)};
  const int blocks = static_cast<int>(cfg.get_int(key(cmd, "blocks"), 0));
  if (blocks > 1) policy.semi_ar_blocks = blocks;
  policy.eos_fill = cfg.get_bool(key(cmd, "eos_fill"), false);
  policy.cache = cfg.get_bool(key(cmd, "cache"), false);
  const double rho = cfg.get_double(key(cmd, "rep_penalty"), 0.0);
  if (rho > 0.0) policy.rep_penalty = rho;
  const std::string dir = cfg.get_string(key(cmd, "direction"), "left");
  if (dir == "left") policy.direction = Direction::left_context;
  else if (dir == "bidirectional") policy.direction = Direction::bidirectional;
  else throw std::runtime_error("unknown direction '" + dir + "'");
  return policy;
}

std::unique_ptr<Denoiser> denoiser_from_config(const Config& cfg, const std::string& cmd,
                                               const LoadedCorpus* corpus, Manifest& manifest) {
  const std::string kind = cfg.get_string(key(cmd, "denoiser"), "linear");
  if (kind == "oracle") {
    if (!corpus) throw std::runtime_error("oracle denoiser needs a corpus");
    return std::make_unique<OracleDenoiser>(corpus->model);
  }
  if (kind == "linear") {
    const std::string path = cfg.get_string(key(cmd, "params"), "");
    if (path.empty()) throw std::runtime_error("linear denoiser needs params = <file>");
    add_input(manifest, path);
    return std::make_unique<LinearDenoiser>(load_params(path));
  }
  throw std::runtime_error("unknown denoiser '" + kind + "'");
}

struct ScoredRun {
  double ppl = 0.0;
  bool zero_length = false;
  bool floored = false;
  int content_len = 0;
  double mean_prior = 0.0;
  bool has_prior = false;
};

std::vector<int> content_tokens(const SequenceState& state, int prompt_len, int eos_id) {
  std::vector<int> content;
  for (int i = prompt_len; i < state.length(); ++i) {
    if (state.is_masked(i)) break;
    const int tok = state.token(i);
    if (tok == eos_id) break;
    content.push_back(tok);
  }
  return content;
}

ScoredRun score_run(const SequenceState& state, const Example& ex, const CorpusModel& model,
                    const PriorTable& prior) {
  ScoredRun s;
  const std::vector<int> content =
      content_tokens(state, static_cast<int>(ex.prompt.size()), model.vocab.eos_id);
  s.content_len = static_cast<int>(content.size());
  if (content.empty()) {
    s.zero_length = true;
    return s;
  }
  const OracleScore score = oracle_logprob(model, content, ex.prompt);
  s.ppl = oracle_ppl(score);
  s.floored = score.floored;
  s.mean_prior = mean_log_prior(content, prior, model.vocab);
  s.has_prior = true;
  return s;
}

int cmd_gen_corpus(const Config& cfg) {
  const std::string out_dir = resolve_out_dir(cfg, "gen-corpus");
  const int n = static_cast<int>(cfg.get_int("gen-corpus.n", 4000));
  const uint64_t seed = static_cast<uint64_t>(cfg.get_int("gen-corpus.seed", 1));

  const CorpusModel model = make_toy_corpus_model(seed);
  const std::vector<Example> corpus = generate_corpus(model, n, mix_seed(seed, 0xC0));
  const PriorTable prior = compute_prior(model.vocab, corpus);
  const CorpusPplStats stats = corpus_ppl_stats(model, corpus);

  Manifest manifest = start_manifest("gen-corpus", cfg);
  const std::string corpus_path = out_dir + "/corpus.jsonl";
  const std::string prior_path = out_dir + "/prior.json";
  const std::string stats_path = out_dir + "/stats.json";
  save_corpus(corpus_path, model.vocab, seed, corpus);
  save_prior(prior_path, prior);
  {
    std::ofstream out(stats_path, std::ios::binary);
    json j{{"ppl_mu", stats.mu}, {"ppl_sigma", stats.sigma}, {"examples", n}};
    out << j.dump(2) << "\n";
  }
  add_output(manifest, corpus_path);
  add_output(manifest, prior_path);
  add_output(manifest, stats_path);
  save_manifest(out_dir + "/manifest.json", manifest);
  std::cout << "gen-corpus: wrote " << n << " examples to " << corpus_path << " (ppl mu=" << stats.mu
            << " sigma=" << stats.sigma << ")\n";
  return 0;
}

int cmd_train(const Config& cfg) {
  const std::string out_dir = resolve_out_dir(cfg, "train");
  const std::string corpus_path = cfg.get_string("train.corpus", "");
  if (corpus_path.empty()) throw std::runtime_error("train: corpus = <file> required");

  Manifest manifest = start_manifest("train", cfg);
  add_input(manifest, corpus_path);
  const LoadedCorpus lc = load_corpus_bundle(corpus_path);

  TrainConfig tc;
  tc.steps = static_cast<int>(cfg.get_int("train.steps", 4000));
  tc.lr = cfg.get_double("train.lr", 0.5);
  tc.batch = static_cast<int>(cfg.get_int("train.batch", 16));
  tc.seed = static_cast<uint64_t>(cfg.get_int("train.seed", 1));
  tc.window_L = static_cast<int>(cfg.get_int("train.L", 256));
  tc.schedule_steps = static_cast<int>(cfg.get_int("train.schedule_steps", 32));
  tc.attend_full_eos_fill = cfg.get_string("train.eos_attend", "first") == "full";
  tc.checkpoint_every = static_cast<int>(cfg.get_int("train.checkpoint_every", 250));

  const int radius = static_cast<int>(cfg.get_int("train.radius", 8));
  LinearDenoiser denoiser(DenoiserParams::zeros(lc.model.vocab.support(), radius));
  const SftReport report = train_sft(denoiser, lc.file.examples, lc.model.vocab, tc);

  const std::string params_path = out_dir + "/params.json";
  const std::string log_path = out_dir + "/train_log.csv";
  save_params(params_path, denoiser.params());
  {
    std::ofstream out(log_path, std::ios::binary);
    out << "step,holdout_loss\n";
    for (const auto& [step, loss] : report.checkpoints) out << step << ',' << fmt(loss) << "\n";
  }
  add_output(manifest, params_path);
  add_output(manifest, log_path);
  save_manifest(out_dir + "/manifest.json", manifest);
  std::cout << "train: holdout loss " << report.initial_loss << " -> " << report.final_loss
            << ", params at " << params_path << "\n";
  return 0;
}

int cmd_r2ft(const Config& cfg) {
  const std::string out_dir = resolve_out_dir(cfg, "r2ft");
  const std::string corpus_path = cfg.get_string("r2ft.corpus", "");
  const std::string params_path = cfg.get_string("r2ft.params", "");
  if (corpus_path.empty() || params_path.empty())
    throw std::runtime_error("r2ft: corpus = <file> and params = <file> required");

  Manifest manifest = start_manifest("r2ft", cfg);
  add_input(manifest, corpus_path);
  add_input(manifest, params_path);
  const LoadedCorpus lc = load_corpus_bundle(corpus_path);
  LinearDenoiser denoiser(load_params(params_path));

  R2ftConfig rc;
  rc.steps = static_cast<int>(cfg.get_int("r2ft.steps", 300));
  rc.lr = cfg.get_double("r2ft.lr", 0.05);
  rc.batch = static_cast<int>(cfg.get_int("r2ft.batch", 8));
  rc.gamma = cfg.get_double("r2ft.gamma", 0.1);
  rc.beta = cfg.get_double("r2ft.beta", 1.0);
  rc.corruption.g_max = static_cast<int>(cfg.get_int("r2ft.g_max", 8));
  rc.corruption.z_min = static_cast<int>(cfg.get_int("r2ft.z_min", 4));
  rc.corruption.z_max = static_cast<int>(cfg.get_int("r2ft.z_max", 64));
  rc.corruption.eos_insert = cfg.get_bool("r2ft.eos_insert", true);
  rc.seed = static_cast<uint64_t>(cfg.get_int("r2ft.seed", 7));
  rc.window_L = static_cast<int>(cfg.get_int("r2ft.L", 256));
  rc.val_every = static_cast<int>(cfg.get_int("r2ft.val_every", 30));

  const auto history = train_r2ft(denoiser, lc.file.examples, lc.model.vocab, lc.prior, rc);

  const std::string out_params = out_dir + "/params.json";
  const std::string history_path = out_dir + "/history.csv";
  save_params(out_params, denoiser.params());
  save_history_csv(history_path, history);
  add_output(manifest, out_params);
  add_output(manifest, history_path);
  save_manifest(out_dir + "/manifest.json", manifest);
  if (!history.empty())
    std::cout << "r2ft: loss_l " << history.front().loss_l << " -> " << history.back().loss_l
              << ", loss_w " << history.front().loss_w << " -> " << history.back().loss_w << "\n";
  return 0;
}

int cmd_decode(const Config& cfg) {
  const std::string out_dir = resolve_out_dir(cfg, "decode");
  const std::string corpus_path = cfg.get_string("decode.corpus", "");
  if (corpus_path.empty()) throw std::runtime_error("decode: corpus = <file> required");

  Manifest manifest = start_manifest("decode", cfg);
  add_input(manifest, corpus_path);
  const LoadedCorpus lc = load_corpus_bundle(corpus_path);
  const auto denoiser = denoiser_from_config(cfg, "decode", &lc, manifest);

  const int L = static_cast<int>(cfg.get_int("decode.L", 1024));
  const int S = static_cast<int>(cfg.get_int("decode.S", 128));
  const uint64_t seed = static_cast<uint64_t>(cfg.get_int("decode.seed", 1));
  const DecodePolicy policy = policy_from_config(cfg, "decode");

  Rng rng(seed);
  Example ex;
  const std::string prompt_text = cfg.get_string("decode.prompt", "");
  if (!prompt_text.empty()) {
    ex.prompt = parse_int_list(prompt_text);
  } else {
    ex = sample_example(lc.model, rng);
  }
  std::vector<PromptSpan> prompts = {{0, ex.prompt}};
  const std::string right_text = cfg.get_string("decode.prompt_right", "");
  if (!right_text.empty()) {
    const std::vector<int> right = parse_int_list(right_text);
    prompts.push_back({L - static_cast<int>(right.size()), right});
  }

  DecodeResult run = decode(*denoiser, prompts, policy, L, S, rng);
  const ScoredRun scored = score_run(run.state, ex, lc.model, lc.prior);

  const std::string trace_path = out_dir + "/trace.csv";
  save_trace_csv(trace_path, run.trace);
  const std::string output_path = out_dir + "/output.json";
  {
    std::vector<int> tokens;
    for (int i = 0; i < run.state.length(); ++i)
      tokens.push_back(run.state.is_masked(i) ? -1 : run.state.token(i));
    json j{{"policy", policy.describe()},
           {"prompt", ex.prompt},
           {"tokens", tokens},
           {"content_len", scored.content_len},
           {"zero_length", scored.zero_length},
           {"oracle_ppl", scored.zero_length ? json(nullptr) : json(scored.ppl)},
           {"denoiser_calls", run.trace.denoiser_calls()},
           {"clamped_draws", run.stats.clamped_draws},
           {"masked_remaining", run.stats.masked_remaining}};
    std::ofstream out(output_path, std::ios::binary);
    out << j.dump(2) << "\n";
  }
  add_output(manifest, trace_path);
  add_output(manifest, output_path);
  save_manifest(out_dir + "/manifest.json", manifest);
  std::cout << "decode: " << policy.describe() << " content_len=" << scored.content_len
            << (scored.zero_length ? "" : (" ppl=" + fmt(scored.ppl)))
            << " calls=" << run.trace.denoiser_calls() << "\n";
  return 0;
}

int cmd_sweep(const Config& cfg) {
  const std::string out_dir = resolve_out_dir(cfg, "sweep");
  const std::string corpus_path = cfg.get_string("sweep.corpus", "");
  if (corpus_path.empty()) throw std::runtime_error("sweep: corpus = <file> required");
  const std::string axis = cfg.get_string("sweep.axis", "");
  const std::vector<int> values = parse_int_list(cfg.get_string("sweep.values", ""));
  if (values.empty()) throw std::runtime_error("sweep: values = v1,v2,... required");
  const int seeds = static_cast<int>(cfg.get_int("sweep.seeds", 8));
  const int jobs = std::max(1, static_cast<int>(cfg.get_int("sweep.jobs", 1)));
  const int L = static_cast<int>(cfg.get_int("sweep.L", 256));
  const int base_S = static_cast<int>(cfg.get_int("sweep.S", 32));
  const uint64_t base_seed = static_cast<uint64_t>(cfg.get_int("sweep.seed", 1));
  const int prompts_per_run = static_cast<int>(cfg.get_int("sweep.prompts_per_run", 4));

  Manifest manifest = start_manifest("sweep", cfg);
  add_input(manifest, corpus_path);
  const LoadedCorpus lc = load_corpus_bundle(corpus_path);
  const auto denoiser = denoiser_from_config(cfg, "sweep", &lc, manifest);
  const DecodePolicy base_policy = policy_from_config(cfg, "sweep");
  const CorpusPplStats stats = corpus_ppl_stats(lc.model, lc.file.examples);

  if (axis != "block_size" && axis != "kernel_size" && axis != "steps")
    throw std::runtime_error("sweep: axis must be block_size, kernel_size or steps");
  if (axis == "block_size" && base_policy.conv)
    throw std::runtime_error("sweep: block_size axis conflicts with a conv policy");
  if (axis == "kernel_size" && base_policy.semi_ar_blocks)
    throw std::runtime_error("sweep: kernel_size axis conflicts with a semi-AR policy");

  struct RunSpec {
    int value;
    int seed_index;
    uint64_t run_seed;
  };
  std::vector<RunSpec> runs;
  for (int value : values)
    for (int s = 0; s < seeds; ++s)
      runs.push_back({value, s, mix_seed(base_seed, runs.size())});

  struct RunRow {
    RunSpec spec;
    ScoredRun scored[16];
    int n_prompts = 0;
    int s_star = 0;
  };
  std::vector<RunRow> rows(runs.size());

  auto run_one = [&](size_t idx) {
    const RunSpec& spec = runs[idx];
    DecodePolicy policy = base_policy;
    int S = base_S;
    if (axis == "block_size") {
      if (L % spec.value != 0) throw std::runtime_error("sweep: block size must divide L");
      const int b = L / spec.value;
      if (b > 1) policy.semi_ar_blocks = b;
      else policy.semi_ar_blocks.reset();
    } else if (axis == "kernel_size") {
      ConvSettings conv = policy.conv.value_or(ConvSettings{});
      conv.kernel = spec.value;
      policy.conv = conv;
    } else {
      S = spec.value;
    }

    RunRow& row = rows[idx];
    row.spec = spec;
    row.n_prompts = std::min(prompts_per_run, 16);
    Rng rng(spec.run_seed);
    for (int p = 0; p < row.n_prompts; ++p) {
      const Example ex = sample_example(lc.model, rng);
      DecodeResult result = decode(*denoiser, {{0, ex.prompt}}, policy, L, S, rng);
      row.scored[p] = score_run(result.state, ex, lc.model, lc.prior);
      row.s_star += result.trace.denoiser_calls();
      if (p == 0) {
        const fs::path run_dir = fs::path(out_dir) / "runs" /
                                 ("run_" + std::to_string(spec.value) + "_" + std::to_string(spec.seed_index));
        fs::create_directories(run_dir);
        save_trace_csv((run_dir / "trace.csv").string(), result.trace);
      }
    }
  };

  std::atomic<size_t> next{0};
  std::vector<std::thread> pool;
  std::vector<std::exception_ptr> errors(static_cast<size_t>(jobs));
  for (int j = 0; j < jobs; ++j) {
    pool.emplace_back([&, j]() {
      try {
        for (;;) {
          const size_t idx = next.fetch_add(1);
          if (idx >= runs.size()) return;
          run_one(idx);
        }
      } catch (...) {
        errors[static_cast<size_t>(j)] = std::current_exception();
      }
    });
  }
  for (auto& t : pool) t.join();
  for (const auto& err : errors)
    if (err) std::rethrow_exception(err);

  const std::string sweep_path = out_dir + "/sweep.csv";
  {
    std::ofstream out(sweep_path, std::ios::binary);
    out << "axis,value,seed_index,prompt,ppl,zero_length,floored,content_len,mean_log_prior\n";
    for (const RunRow& row : rows) {
      for (int p = 0; p < row.n_prompts; ++p) {
        const ScoredRun& s = row.scored[p];
        out << axis << ',' << row.spec.value << ',' << row.spec.seed_index << ',' << p << ','
            << (s.zero_length ? "" : fmt(s.ppl)) << ',' << (s.zero_length ? 1 : 0) << ','
            << (s.floored ? 1 : 0) << ',' << s.content_len << ','
            << (s.has_prior ? fmt(s.mean_prior) : "") << "\n";
      }
    }
  }

  const std::string agg_path = out_dir + "/sweep_agg.csv";
  std::vector<SvgSeries> chart(1);
  chart[0].label = "mean oracle ppl";
  {
    std::ofstream out(agg_path, std::ios::binary);
    out << "value,mean_ppl,inlier_rate,mean_log_prior,tokens_per_step,runs\n";
    for (int value : values) {
      double ppl_sum = 0.0, prior_sum = 0.0, tps_sum = 0.0;
      int ppl_n = 0, prior_n = 0, tps_n = 0;
      std::vector<PplSample> samples;
      for (const RunRow& row : rows) {
        if (row.spec.value != value) continue;
        int content = 0;
        for (int p = 0; p < row.n_prompts; ++p) {
          const ScoredRun& s = row.scored[p];
          samples.push_back({s.ppl, s.zero_length});
          if (!s.zero_length) {
            ppl_sum += s.ppl;
            ++ppl_n;
          }
          if (s.has_prior) {
            prior_sum += s.mean_prior;
            ++prior_n;
          }
          content += s.content_len;
        }
        if (row.s_star > 0) {
          tps_sum += static_cast<double>(content) / row.s_star;
          ++tps_n;
        }
      }
      const double mean_ppl = ppl_n ? ppl_sum / ppl_n : 0.0;
      out << value << ',' << fmt(mean_ppl) << ','
          << fmt(inlier_rate(samples, stats.mu, stats.sigma)) << ','
          << fmt(prior_n ? prior_sum / prior_n : 0.0) << ',' << fmt(tps_n ? tps_sum / tps_n : 0.0)
          << ',' << samples.size() << "\n";
      chart[0].points.push_back({static_cast<double>(value), mean_ppl});
    }
  }
  const std::string svg_path = out_dir + "/sweep.svg";
  save_svg(svg_path, render_line_chart("sweep: " + axis, axis, "mean oracle ppl", chart));

  add_output(manifest, sweep_path);
  add_output(manifest, agg_path);
  add_output(manifest, svg_path);
  save_manifest(out_dir + "/manifest.json", manifest);
  std::cout << "sweep: " << runs.size() << " runs over " << axis << " -> " << agg_path << "\n";
  return 0;
}

int cmd_metrics(const Config& cfg) {
  const std::string out_dir = resolve_out_dir(cfg, "metrics");
  const std::string corpus_path = cfg.get_string("metrics.corpus", "");
  if (corpus_path.empty()) throw std::runtime_error("metrics: corpus = <file> required");
  Manifest manifest = start_manifest("metrics", cfg);
  add_input(manifest, corpus_path);
  const LoadedCorpus lc = load_corpus_bundle(corpus_path);

  const bool zone_mode = cfg.get_bool("metrics.zone", false);
  if (zone_mode) {
    const auto denoiser = denoiser_from_config(cfg, "metrics", &lc, manifest);
    const int tpl = static_cast<int>(cfg.get_int("metrics.prompt_template", 0));
    const int k = static_cast<int>(cfg.get_int("metrics.k", 10));
    const int L = static_cast<int>(cfg.get_int("metrics.L", 256));
    if (tpl < 0 || tpl >= static_cast<int>(lc.model.templates.size()))
      throw std::runtime_error("metrics: prompt_template out of range");
    const CandidateZoneReport report =
        candidate_zone(*denoiser, lc.model.templates[static_cast<size_t>(tpl)], k, L, lc.prior, lc.model.vocab);
    const std::string zone_path = out_dir + "/zone.csv";
    std::ofstream(zone_path, std::ios::binary) << zone_to_csv(report);
    std::vector<SvgSeries> series(2);
    series[0].label = "high-prior";
    series[1].label = "repetition";
    for (const ZoneRow& r : report.rows) {
      series[0].points.push_back({static_cast<double>(r.distance), r.high_prior_mass});
      series[1].points.push_back({static_cast<double>(r.distance), r.repetition_mass});
    }
    const std::string zone_svg = out_dir + "/zone.svg";
    save_svg(zone_svg, render_line_chart("candidate zone", "distance from prompt", "mass", series));
    add_output(manifest, zone_path);
    add_output(manifest, zone_svg);
    save_manifest(out_dir + "/manifest.json", manifest);
    std::cout << "metrics: zone report at " << zone_path << "\n";
    return 0;
  }

  const std::string run_dir = cfg.get_string("metrics.run", "");
  if (run_dir.empty()) throw std::runtime_error("metrics: run = <decode output dir> required");
  const std::string output_path = run_dir + "/output.json";
  const std::string trace_path = run_dir + "/trace.csv";
  add_input(manifest, output_path);
  add_input(manifest, trace_path);

  json output;
  {
    std::ifstream in(output_path, std::ios::binary);
    if (!in) throw std::runtime_error("metrics: cannot open " + output_path);
    output = json::parse(in);
  }
  const LoadedTrace trace = load_trace_csv(trace_path);
  const std::vector<int> prompt = output.at("prompt").get<std::vector<int>>();
  const std::vector<int> tokens = output.at("tokens").get<std::vector<int>>();
  std::vector<int> content;
  for (size_t i = prompt.size(); i < tokens.size(); ++i) {
    if (tokens[i] < 0 || tokens[i] == lc.model.vocab.eos_id) break;
    content.push_back(tokens[i]);
  }
  int s_star = 0;
  for (const StepInfo& s : trace.steps) s_star += s.denoiser_call;

  const std::string metrics_path = out_dir + "/metrics.csv";
  {
    std::ofstream out(metrics_path, std::ios::binary);
    out << "run,content_len,oracle_ppl,zero_length,mean_log_prior,L_star_total,S_star,r_star\n";
    const bool zero = content.empty();
    const double ppl = zero ? 0.0 : oracle_ppl(oracle_logprob(lc.model, content, prompt));
    const double prior = zero ? 0.0 : mean_log_prior(content, lc.prior, lc.model.vocab);
    out << run_dir << ',' << content.size() << ',' << (zero ? "" : fmt(ppl)) << ',' << (zero ? 1 : 0)
        << ',' << (zero ? "" : fmt(prior)) << ',' << trace.events.size() << ',' << s_star << ','
        << fmt(static_cast<double>(trace.events.size()) / std::max<size_t>(1, trace.steps.size()))
        << "\n";
  }
  add_output(manifest, metrics_path);
  save_manifest(out_dir + "/manifest.json", manifest);
  std::cout << "metrics: row written to " << metrics_path << "\n";
  return 0;
}

int cmd_hazard(const Config& cfg) {
  const std::string out_dir = resolve_out_dir(cfg, "hazard");
  const std::string family_name = cfg.get_string("hazard.family", "ratio");
  std::unique_ptr<HazardFamily> family;
  if (family_name == "ratio")
    family = std::make_unique<RatioHazard>(cfg.get_double("hazard.c", 0.1),
                                           cfg.get_double("hazard.p_cap", 0.5));
  else if (family_name == "zero")
    family = std::make_unique<ZeroHazard>();
  else
    throw std::runtime_error("hazard: unknown family '" + family_name + "'");
  const ConvHazardMode mode = cfg.get_string("hazard.mode", "per_step") == "per_token"
                                  ? ConvHazardMode::per_token
                                  : ConvHazardMode::per_step;

  struct Point {
    int L, S, b;
  };
  std::vector<Point> points;
  if (cfg.get_bool("hazard.grid", false)) {
    for (int L : {64, 128})
      for (int S : {16, 32})
        for (int b : {1, 2, 4, 8})
          if (L % S == 0 && S % b == 0 && S / b >= 1) points.push_back({L, S, b});
  } else {
    points.push_back({static_cast<int>(cfg.get_int("hazard.L", 128)),
                      static_cast<int>(cfg.get_int("hazard.S", 32)),
                      static_cast<int>(cfg.get_int("hazard.b", 4))});
  }

  Manifest manifest = start_manifest("hazard", cfg);
  const std::string csv_path = out_dir + "/hazard.csv";
  {
    std::ofstream out(csv_path, std::ios::binary);
    out << "L,S,b,K,family,params,Q_default,Q_semi_ar,Q_conv,ordering_ok\n";
    for (const Point& pt : points) {
      const int K = pt.L / pt.b;
      const double q0 = Q_default(pt.L, pt.S, *family);
      const double qsa = Q_semi_ar(pt.L, pt.S, pt.b, *family);
      const double qc = Q_conv(pt.L, pt.S, K, *family, mode);
      const bool ok = qsa <= qc && qc <= q0;
      out << pt.L << ',' << pt.S << ',' << pt.b << ',' << K << ',' << family->name() << ','
          << family->params() << ',' << fmt(q0) << ',' << fmt(qsa) << ',' << fmt(qc) << ','
          << (ok ? 1 : 0) << "\n";
    }
  }
  add_output(manifest, csv_path);
  save_manifest(out_dir + "/manifest.json", manifest);
  std::cout << "hazard: " << points.size() << " rows -> " << csv_path << "\n";
  return 0;
}

int cmd_rerun(const Config& cfg) {
  const std::string manifest_path = cfg.get_string("rerun.manifest", "");
  if (manifest_path.empty()) throw std::runtime_error("rerun: manifest = <file> required");
  const Manifest manifest = load_manifest(manifest_path);
  Config replay;
  for (const auto& [k, v] : manifest.config) replay.set(k, v);
  return run_command(manifest.command, replay);
}

}  // namespace

std::string resolve_out_dir(const Config& cfg, const std::string& command) {
  std::string dir = cfg.get_string(key(command, "out"), "");
  if (dir.empty()) {
    const char* root = std::getenv(kOutputRootEnv);
    dir = (root && *root ? std::string(root) : std::string("out")) + "/" + command;
  }
  fs::create_directories(dir);
  return dir;
}

int run_command(const std::string& command, const Config& cfg) {
  try {
    if (command == "gen-corpus") return cmd_gen_corpus(cfg);
    if (command == "train") return cmd_train(cfg);
    if (command == "r2ft") return cmd_r2ft(cfg);
    if (command == "decode") return cmd_decode(cfg);
    if (command == "sweep") return cmd_sweep(cfg);
    if (command == "metrics") return cmd_metrics(cfg);
    if (command == "hazard") return cmd_hazard(cfg);
    if (command == "rerun") return cmd_rerun(cfg);
    throw std::runtime_error("unknown command '" + command + "'");
  } catch (const std::exception& e) {
    json err{{"error", e.what()}, {"command", command}};
    std::cerr << err.dump() << "\n";
    return 1;
  }
}

}  // namespace mdlab
