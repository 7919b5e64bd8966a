#include <CLI11.hpp>

#include "mdlab/config.hpp"
#include "mdlab/runner.hpp"

namespace {

// Flag values override config-file values, which override built-in defaults.
struct FlagSet {
  std::vector<std::pair<std::string, std::string>> kv;  // key suffix -> value
};

void add_common(CLI::App* sub, std::string& config_path, FlagSet& flags) {
  sub->add_option("--config", config_path, "flat key = value config file with [sections]");
  sub->add_option_function<std::vector<std::string>>(
      "--set", [&flags](const std::vector<std::string>& items) {
        for (const std::string& item : items) {
          const auto eq = item.find('=');
          if (eq == std::string::npos) throw CLI::ValidationError("--set expects key=value");
          flags.kv.push_back({item.substr(0, eq), item.substr(eq + 1)});
        }
      },
      "override any config key (section.key=value)");
}

void opt(CLI::App* sub, FlagSet& flags, const std::string& name, const std::string& key,
         const std::string& help) {
  sub->add_option_function<std::string>(
      "--" + name, [&flags, key](const std::string& v) { flags.kv.push_back({key, v}); }, help);
}

void flag_opt(CLI::App* sub, FlagSet& flags, const std::string& name, const std::string& key,
              const std::string& help) {
  sub->add_flag_callback(
      "--" + name, [&flags, key]() { flags.kv.push_back({key, "1"}); }, help);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"mdlab: a desk-scale masked-diffusion decoding laboratory"};
  app.require_subcommand(1);

  struct SubState {
    std::string config_path;
    FlagSet flags;
  };
  std::map<std::string, SubState> state;

  auto make_sub = [&](const std::string& name, const std::string& desc) {
    CLI::App* sub = app.add_subcommand(name, desc);
    SubState& st = state[name];
    add_common(sub, st.config_path, st.flags);
    return sub;
  };

  {
    CLI::App* sub = make_sub("gen-corpus", "generate the synthetic corpus, prior table and stats");
    auto& f = state["gen-corpus"].flags;
    opt(sub, f, "n", "gen-corpus.n", "number of examples");
    opt(sub, f, "seed", "gen-corpus.seed", "model + sampling seed");
    opt(sub, f, "out", "gen-corpus.out", "output directory");
  }
  {
    CLI::App* sub = make_sub("train", "standard fine-tuning of the linear denoiser");
    auto& f = state["train"].flags;
    opt(sub, f, "corpus", "train.corpus", "corpus.jsonl path");
    opt(sub, f, "steps", "train.steps", "SGD steps");
    opt(sub, f, "lr", "train.lr", "learning rate");
    opt(sub, f, "batch", "train.batch", "batch size");
    opt(sub, f, "seed", "train.seed", "seed");
    opt(sub, f, "L", "train.L", "training window length");
    opt(sub, f, "eos-attend", "train.eos_attend", "first|full: attended EOS-fill region");
    opt(sub, f, "out", "train.out", "output directory");
  }
  {
    CLI::App* sub = make_sub("r2ft", "preference stage with rule-based corruption");
    auto& f = state["r2ft"].flags;
    opt(sub, f, "corpus", "r2ft.corpus", "corpus.jsonl path");
    opt(sub, f, "params", "r2ft.params", "input params.json");
    opt(sub, f, "steps", "r2ft.steps", "training steps");
    opt(sub, f, "lr", "r2ft.lr", "learning rate");
    opt(sub, f, "seed", "r2ft.seed", "seed");
    opt(sub, f, "out", "r2ft.out", "output directory");
  }
  {
    CLI::App* sub = make_sub("decode", "run one decoding configuration");
    auto& f = state["decode"].flags;
    opt(sub, f, "corpus", "decode.corpus", "corpus.jsonl path (model + prompt source)");
    opt(sub, f, "params", "decode.params", "params.json for the linear denoiser");
    opt(sub, f, "denoiser", "decode.denoiser", "linear|oracle");
    opt(sub, f, "base", "decode.base", "categorical|topk|llada");
    opt(sub, f, "k", "decode.k", "top-k size");
    opt(sub, f, "conv-kernel", "decode.conv_kernel", "conv kernel size (0 = off)");
    opt(sub, f, "blocks", "decode.blocks", "semi-AR block count (0/1 = off)");
    flag_opt(sub, f, "eos-fill", "decode.eos_fill", "fill right of the first EOS");
    flag_opt(sub, f, "cache", "decode.cache", "reuse grids across no-op steps");
    opt(sub, f, "rep-penalty", "decode.rep_penalty", "context-token penalty factor in (0,1)");
    opt(sub, f, "direction", "decode.direction", "left|bidirectional");
    opt(sub, f, "prompt", "decode.prompt", "explicit prompt tokens, comma separated");
    opt(sub, f, "prompt-right", "decode.prompt_right", "right-side context tokens");
    opt(sub, f, "L", "decode.L", "window length");
    opt(sub, f, "S", "decode.S", "total steps");
    opt(sub, f, "seed", "decode.seed", "seed");
    opt(sub, f, "out", "decode.out", "output directory");
  }
  {
    CLI::App* sub = make_sub("sweep", "decode across an axis and aggregate oracle metrics");
    auto& f = state["sweep"].flags;
    opt(sub, f, "corpus", "sweep.corpus", "corpus.jsonl path");
    opt(sub, f, "params", "sweep.params", "params.json");
    opt(sub, f, "denoiser", "sweep.denoiser", "linear|oracle");
    opt(sub, f, "axis", "sweep.axis", "block_size|kernel_size|steps");
    opt(sub, f, "values", "sweep.values", "comma-separated axis values");
    opt(sub, f, "seeds", "sweep.seeds", "seeds per value");
    opt(sub, f, "base", "sweep.base", "base sampler");
    opt(sub, f, "k", "sweep.k", "top-k size");
    opt(sub, f, "L", "sweep.L", "window length");
    opt(sub, f, "S", "sweep.S", "total steps");
    opt(sub, f, "seed", "sweep.seed", "base seed");
    opt(sub, f, "jobs", "sweep.jobs", "concurrent runs");
    opt(sub, f, "out", "sweep.out", "output directory");
  }
  {
    CLI::App* sub = make_sub("metrics", "score a decode run or emit a candidate-zone report");
    auto& f = state["metrics"].flags;
    opt(sub, f, "corpus", "metrics.corpus", "corpus.jsonl path");
    opt(sub, f, "run", "metrics.run", "decode output directory to score");
    flag_opt(sub, f, "zone", "metrics.zone", "candidate-zone mode");
    opt(sub, f, "params", "metrics.params", "params.json (zone mode)");
    opt(sub, f, "denoiser", "metrics.denoiser", "linear|oracle (zone mode)");
    opt(sub, f, "prompt-template", "metrics.prompt_template", "template index (zone mode)");
    opt(sub, f, "k", "metrics.k", "top-k table size (zone mode)");
    opt(sub, f, "L", "metrics.L", "window length (zone mode)");
    opt(sub, f, "out", "metrics.out", "output directory");
  }
  {
    CLI::App* sub = make_sub("hazard", "analytic structural-corruption model");
    auto& f = state["hazard"].flags;
    opt(sub, f, "L", "hazard.L", "window length");
    opt(sub, f, "S", "hazard.S", "steps");
    opt(sub, f, "b", "hazard.b", "block count (kernel K = L/b)");
    opt(sub, f, "family", "hazard.family", "ratio|zero");
    opt(sub, f, "c", "hazard.c", "ratio family slope");
    opt(sub, f, "p-cap", "hazard.p_cap", "ratio family cap");
    opt(sub, f, "mode", "hazard.mode", "per_step|per_token");
    flag_opt(sub, f, "grid", "hazard.grid", "evaluate the documented (L,S,b) grid");
    opt(sub, f, "out", "hazard.out", "output directory");
  }
  {
    CLI::App* sub = make_sub("rerun", "re-execute a command from its manifest");
    auto& f = state["rerun"].flags;
    opt(sub, f, "manifest", "rerun.manifest", "manifest.json path");
  }

  CLI11_PARSE(app, argc, argv);

  for (auto& [name, st] : state) {
    CLI::App* sub = app.get_subcommand(name);
    if (!sub->parsed()) continue;
    mdlab::Config cfg;
    if (!st.config_path.empty()) cfg = mdlab::Config::parse_file(st.config_path);
    for (const auto& [k, v] : st.flags.kv) cfg.set(k, v);
    return mdlab::run_command(name, cfg);
  }
  return 1;
}
