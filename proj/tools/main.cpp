// caddi: train, sample, eval, analyze, robustness, selftest.

#include <CLI11.hpp>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <iostream>
#include <map>
#include <sstream>

#include "caddi/checkpoint.hpp"
#include "caddi/config.hpp"
#include "caddi/corpus.hpp"
#include "caddi/evaluation.hpp"
#include "caddi/sampler.hpp"
#include "caddi/selftest.hpp"
#include "caddi/training.hpp"

namespace fs = std::filesystem;
using namespace caddi;

namespace {

const std::vector<std::string> kBoolKeys = {"autoregressive", "random_offset", "greedy", "speculative",
                                            "dump_trajectory"};

// Keys that describe how the model was trained; read from the checkpoint.
const std::vector<std::string> kModelBound = {"T", "kernel", "process", "attention", "autoregressive", "recon",
                                              "seq_len"};

struct Sub {
  CLI::App* app = nullptr;
  std::string config_path;
  std::map<std::string, std::string> values;
  std::map<std::string, bool> flags;
  std::map<std::string, CLI::Option*> options;
};

std::string dashed(std::string key) {
  for (char& c : key) {
    if (c == '_') c = '-';
  }
  return key;
}

std::string flag_name(const std::string& key) {
  if (key == "train_steps" || key == "sample_steps") return "--steps";
  return "--" + dashed(key);
}

bool is_bool_key(const std::string& key) {
  return std::find(kBoolKeys.begin(), kBoolKeys.end(), key) != kBoolKeys.end();
}

std::string help_for(const std::string& key) {
  for (const KeySpec& s : RunConfig::keys()) {
    if (s.key == key) return s.help + " [" + (s.default_value.empty() ? "none" : s.default_value) + "]";
  }
  return "";
}

void add_keys(Sub& sub, const std::vector<std::string>& keys) {
  sub.app->add_option("--config", sub.config_path, "config file of key = value lines");
  for (const std::string& key : keys) {
    if (is_bool_key(key)) {
      sub.options[key] = sub.app->add_flag(flag_name(key), sub.flags[key], help_for(key));
    } else {
      sub.options[key] = sub.app->add_option(flag_name(key), sub.values[key], help_for(key));
    }
  }
}

RunConfig resolve(const Sub& sub) {
  RunConfig cfg;
  if (!sub.config_path.empty()) cfg.load_file(sub.config_path);
  for (const auto& [key, opt] : sub.options) {
    if (opt->count() == 0) continue;
    if (is_bool_key(key)) {
      cfg.set(key, sub.flags.at(key) ? "true" : "false");
    } else {
      cfg.set(key, sub.values.at(key));
    }
  }
  return cfg;
}

std::string config_hash(const RunConfig& cfg) {
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << std::hash<std::string>{}(cfg.resolved());
  return os.str();
}

fs::path prepare_out(const RunConfig& cfg) {
  const fs::path out = cfg.get("out");
  fs::create_directories(out);
  std::ofstream(out / "config.resolved") << cfg.resolved();
  return out;
}

std::string require(const RunConfig& cfg, const std::string& key) {
  const std::string& v = cfg.get(key);
  if (v.empty()) throw UsageError("missing required setting '" + key + "' (" + flag_name(key) + ")");
  return v;
}

struct CorpusSplit {
  Vocabulary vocab;
  TokenSequence train;
  TokenSequence heldout;
};

CorpusSplit load_corpus(const RunConfig& cfg, const Vocabulary* fixed_vocab = nullptr) {
  const std::string text = read_text_file(require(cfg, "corpus"));
  CorpusSplit split;
  split.vocab = fixed_vocab ? *fixed_vocab : Vocabulary::build(text);
  const TokenSequence ids = split.vocab.encode(text);
  const double frac = cfg.get_double("eval_fraction");
  if (!(frac >= 0.0 && frac < 1.0)) throw UsageError("eval_fraction must lie in [0, 1)");
  const auto cut = static_cast<std::size_t>(std::floor(static_cast<double>(ids.size()) * (1.0 - frac)));
  split.train.assign(ids.begin(), ids.begin() + static_cast<std::ptrdiff_t>(cut));
  split.heldout.assign(ids.begin() + static_cast<std::ptrdiff_t>(cut), ids.end());
  return split;
}

struct LoadedModel {
  Checkpoint ckpt;
  Vocabulary vocab;
  std::unique_ptr<TransformerDenoiser<float>> model;
};

// Applies the checkpoint's training settings to cfg; explicit conflicting
// values are rejected.
LoadedModel load_model(RunConfig& cfg, const std::string& path) {
  LoadedModel lm;
  lm.ckpt = load_checkpoint(path);
  for (const std::string& key : kModelBound) {
    const auto it = lm.ckpt.meta.find(key);
    if (it == lm.ckpt.meta.end()) continue;
    if (cfg.explicitly_set(key) && cfg.get(key) != it->second) {
      throw UsageError("setting '" + key + "' = " + cfg.get(key) + " conflicts with the checkpoint (" + it->second +
                       ")");
    }
    cfg.set(key, it->second);
  }
  for (const char* key : {"window", "compression"}) {
    const auto it = lm.ckpt.meta.find(key);
    if (it != lm.ckpt.meta.end() && !cfg.explicitly_set(key)) cfg.set(key, it->second);
  }
  const auto vocab_it = lm.ckpt.meta.find("vocab");
  if (vocab_it == lm.ckpt.meta.end()) throw Error("checkpoint has no vocabulary");
  lm.vocab = decode_symbols(vocab_it->second);
  if (static_cast<int>(lm.vocab.size()) + 1 != lm.ckpt.params.config.vocab_augmented) {
    throw Error("checkpoint vocabulary does not match its model size");
  }
  lm.model = std::make_unique<TransformerDenoiser<float>>(lm.ckpt.params);
  return lm;
}

SamplerConfig sampler_for(const RunConfig& cfg, const LoadedModel& lm) {
  SamplerConfig s = cfg.sampler_config();
  const DenoiseSetup setup = cfg.setup();
  if (!cfg.explicitly_set("mode")) {
    s.mode = setup.process == ProcessKind::markov ? SamplerMode::markov_baseline
             : setup.context.autoregressive       ? SamplerMode::caddi_ar
                                                  : SamplerMode::caddi;
  }
  const int length = cfg.get_int("length");
  s.length = static_cast<std::size_t>(length > 0 ? length : cfg.get_int("seq_len"));
  s.vocab_real = lm.vocab.size();
  s.prompt = parse_prompt(cfg.get("prompt"), lm.vocab);
  return s;
}

int cmd_train(const RunConfig& in) {
  RunConfig cfg = in;
  const CorpusSplit data = load_corpus(cfg);
  const TrainConfig tc = cfg.train_config(static_cast<int>(data.vocab.size_augmented()));
  const fs::path out = prepare_out(cfg);
  std::ofstream loss(out / "loss.csv");
  loss << "step,loss,lr,probe_loss\n" << std::setprecision(8);
  const TrainResult res = train(tc, data.train, [&](const LossPoint& p) {
    loss << p.step << ',' << p.loss << ',' << p.lr << ',';
    if (!std::isnan(p.probe_loss)) {
      loss << p.probe_loss;
      std::cerr << "step " << p.step << " loss " << p.loss << " probe " << p.probe_loss << "\n";
    }
    loss << '\n';
  });
  Checkpoint ck;
  ck.params = res.params;
  const DenoiseSetup setup = tc.setup;
  ck.meta = {{"T", std::to_string(tc.schedule.T)},
             {"kernel", to_string(setup.kernel)},
             {"process", to_string(setup.process)},
             {"window", std::to_string(setup.context.window)},
             {"attention", to_string(setup.context.attention)},
             {"compression", to_string(setup.context.compression)},
             {"autoregressive", setup.context.autoregressive ? "true" : "false"},
             {"recon", to_string(setup.recon)},
             {"seq_len", std::to_string(tc.seq_len)},
             {"seed", std::to_string(tc.seed)},
             {"vocab", encode_symbols(data.vocab)}};
  save_checkpoint(ck, (out / "ckpt").string());
  std::cout << "trained " << res.steps_done << " steps in " << res.seconds << " s; checkpoint " << (out / "ckpt")
            << "\n";
  return 0;
}

int cmd_sample(const RunConfig& in) {
  RunConfig cfg = in;
  const LoadedModel lm = load_model(cfg, require(cfg, "checkpoint"));
  const SamplerConfig base = sampler_for(cfg, lm);
  const NoiseSchedule schedule = cfg.schedule();
  const fs::path out = prepare_out(cfg);
  const int n = cfg.get_int("n");
  if (n < 1) throw UsageError("n must be at least 1");
  std::ofstream samples(out / "samples.txt");
  std::ofstream traj_out;
  if (cfg.get_bool("dump_trajectory")) traj_out.open(out / "trajectory.txt");
  for (int i = 0; i < n; ++i) {
    SamplerConfig c = base;
    c.seed = derive_seed(base.seed, static_cast<std::uint64_t>(i));
    const GenerationTrace trace = generate(*lm.model, schedule, c);
    const std::string text = lm.vocab.decode(trace.x0);
    std::cout << text << "\n";
    samples << text << "\n";
    if (traj_out) {
      traj_out << "# sample " << i << " model_calls " << trace.model_calls << "\n";
      for (int t = schedule.T; t >= 0; --t) traj_out << "t=" << t << " " << lm.vocab.decode(trace.latents.row(t)) << "\n";
    }
  }
  return 0;
}

int cmd_eval(const RunConfig& in) {
  RunConfig cfg = in;
  const LoadedModel lm = load_model(cfg, require(cfg, "checkpoint"));
  const CorpusSplit data = load_corpus(cfg, &lm.vocab);
  const NoiseSchedule schedule = cfg.schedule();
  const DenoiseSetup setup = cfg.setup();
  const auto L = static_cast<std::size_t>(cfg.get_int("seq_len"));
  const fs::path out = prepare_out(cfg);
  const std::string hash = config_hash(cfg);
  std::ofstream metrics(out / "metrics.csv");
  metrics << "metric,value,stderr,config_hash\n" << std::setprecision(8);
  auto emit = [&](const std::string& name, double v, double se) {
    metrics << name << ',' << v << ',' << se << ',' << hash << '\n';
    std::cout << name << " = " << v << " (stderr " << se << ")\n";
  };

  if (setup.process == ProcessKind::nonmarkov) {
    std::vector<TokenSequence> held = split_windows(data.heldout, L);
    const auto cap = static_cast<std::size_t>(std::max(1, cfg.get_int("eval_sequences")));
    if (held.size() > cap) held.resize(cap);
    if (held.empty()) throw Error("held-out split is shorter than one sequence; raise eval_fraction");
    const BpdReport bpd =
        bpd_bound(*lm.model, held, schedule, setup, static_cast<std::size_t>(cfg.get_int("n_mc")), cfg.get_u64("seed"));
    emit("bpd", bpd.bpd, bpd.std_error);
    emit("T", bpd.T, 0.0);
  } else {
    std::cerr << "bpd bound is defined for the non-Markov process only; skipped\n";
  }

  NgramOracle oracle(lm.vocab.size(), cfg.get_int("oracle_order"));
  oracle.fit(data.train);
  const SamplerConfig base = sampler_for(cfg, lm);
  std::vector<TokenSequence> samples;
  for (int i = 0; i < std::max(1, cfg.get_int("n")); ++i) {
    SamplerConfig c = base;
    c.seed = derive_seed(base.seed, static_cast<std::uint64_t>(i));
    samples.push_back(generate(*lm.model, schedule, c).x0);
  }
  emit("entropy", generation_entropy(samples), 0.0);
  emit("oracle_perplexity", oracle.perplexity(samples), 0.0);
  emit("samples", static_cast<double>(samples.size()), 0.0);
  return 0;
}

int cmd_analyze(const RunConfig& cfg) {
  const NoiseSchedule schedule = cfg.schedule();
  const int V = cfg.get_int("vocab_size");
  if (V < 1) throw UsageError("vocab_size must be positive");
  const std::vector<double> p0(static_cast<std::size_t>(V), 1.0 / V);
  const auto markov = mi_decay_analytic(schedule, ProcessKind::markov, p0);
  const auto nonmarkov = mi_decay_analytic(schedule, ProcessKind::nonmarkov, p0);
  const auto mc = mi_decay_montecarlo(schedule, parse_kernel(cfg.get("kernel")), ProcessKind::nonmarkov, p0,
                                      cfg.get_u64("mc_samples"), cfg.get_u64("seed"));
  const fs::path out = prepare_out(cfg);
  std::ostringstream csv;
  csv << std::setprecision(12) << "t,alpha,alpha_star,beta,D_markov,D_nonmarkov,D_montecarlo\n";
  for (int t = 0; t <= schedule.T; ++t) {
    const auto i = static_cast<std::size_t>(t);
    csv << t << ',' << schedule.alpha[i] << ',' << schedule.alpha_star[i] << ',' << schedule.beta[i] << ','
        << markov.decay[i] << ',' << nonmarkov.decay[i] << ',' << mc.decay[i] << '\n';
  }
  std::ofstream(out / "metrics.csv") << csv.str();
  std::cout << csv.str();
  return 0;
}

int cmd_robustness(const RunConfig& in, const std::string& baseline_path) {
  RunConfig cfg = in;
  const LoadedModel lm = load_model(cfg, require(cfg, "checkpoint"));
  const CorpusSplit data = load_corpus(cfg, &lm.vocab);
  const NoiseSchedule schedule = cfg.schedule();
  const SamplerConfig config = sampler_for(cfg, lm);
  NgramOracle oracle(lm.vocab.size(), cfg.get_int("oracle_order"));
  oracle.fit(data.train);
  const int t_inject = cfg.get_int("t_inject") > 0 ? cfg.get_int("t_inject") : std::max(1, schedule.T / 2);
  const double fraction = cfg.get_double("fraction");
  const int n_seeds = cfg.get_int("n_seeds");
  const auto per_seed = static_cast<std::size_t>(cfg.get_int("samples_per_seed"));
  if (n_seeds < 1) throw UsageError("n_seeds must be at least 1");

  std::unique_ptr<LoadedModel> base;
  SamplerConfig base_config;
  if (!baseline_path.empty()) {
    RunConfig bcfg = in;
    for (const std::string& key : kModelBound) {
      if (!in.explicitly_set(key)) continue;
      throw UsageError("model-bound setting '" + key + "' cannot be forced when comparing two checkpoints");
    }
    base = std::make_unique<LoadedModel>(load_model(bcfg, baseline_path));
    if (!(base->vocab == lm.vocab)) throw Error("baseline checkpoint uses a different vocabulary");
    base_config = sampler_for(bcfg, *base);
    if (bcfg.get_int("T") != schedule.T) throw Error("baseline checkpoint uses a different horizon");
  }

  const fs::path out = prepare_out(cfg);
  std::ofstream metrics(out / "metrics.csv");
  metrics << std::setprecision(8) << "seed,model,clean_ppl,injected_ppl,delta\n";
  std::size_t wins = 0;
  double sum_delta = 0.0, sum_base = 0.0;
  for (int s = 0; s < n_seeds; ++s) {
    const std::uint64_t seed = derive_seed(cfg.get_u64("seed"), static_cast<std::uint64_t>(s));
    const auto rep = noise_injection_run(*lm.model, schedule, config, oracle, t_inject, fraction, per_seed, seed);
    const double d = rep.injected.mean_perplexity - rep.clean.mean_perplexity;
    sum_delta += d;
    metrics << s << ",model," << rep.clean.mean_perplexity << ',' << rep.injected.mean_perplexity << ',' << d << '\n';
    if (base) {
      const auto b = noise_injection_run(*base->model, schedule, base_config, oracle, t_inject, fraction, per_seed, seed);
      const double bd = b.injected.mean_perplexity - b.clean.mean_perplexity;
      sum_base += bd;
      if (d < bd) ++wins;
      metrics << s << ",baseline," << b.clean.mean_perplexity << ',' << b.injected.mean_perplexity << ',' << bd
              << '\n';
    }
  }
  std::cout << "t_inject " << t_inject << " fraction " << fraction << "\n";
  std::cout << "mean perplexity degradation: " << sum_delta / n_seeds << "\n";
  if (base) {
    std::cout << "baseline mean degradation: " << sum_base / n_seeds << "\n";
    std::cout << "model degrades less on " << wins << "/" << n_seeds
              << " seeds, one-sided sign test p = " << sign_test_p(wins, static_cast<std::size_t>(n_seeds)) << "\n";
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Non-Markovian discrete diffusion laboratory"};
  app.require_subcommand(1);

  const std::vector<std::string> setup_keys = {"T", "kernel", "process", "window", "attention", "compression",
                                               "autoregressive", "recon"};
  const std::vector<std::string> model_keys = {"layers", "d_model", "heads", "seq_rotary_dims", "time_rotary_dims",
                                               "seq_base", "time_base"};
  const std::vector<std::string> sample_keys = {"mode", "sample_steps", "temperature", "top_k", "greedy", "gamma",
                                                "window", "compression", "speculative", "verify", "p_min",
                                                "prompt", "n", "length"};
  auto join = [](std::initializer_list<std::vector<std::string>> parts) {
    std::vector<std::string> out;
    for (const auto& p : parts) {
      for (const auto& k : p) {
        if (std::find(out.begin(), out.end(), k) == out.end()) out.push_back(k);
      }
    }
    return out;
  };

  Sub train_sub, sample_sub, eval_sub, analyze_sub, robust_sub;
  train_sub.app = app.add_subcommand("train", "train a denoiser on a text corpus");
  add_keys(train_sub, join({{"corpus", "out", "seed", "seq_len", "batch_size", "lr", "warmup", "train_steps",
                             "weight_decay", "grad_clip", "random_offset", "log_every", "max_seconds",
                             "eval_fraction"},
                            setup_keys, model_keys}));
  sample_sub.app = app.add_subcommand("sample", "generate text from a checkpoint");
  add_keys(sample_sub, join({{"checkpoint", "out", "seed", "dump_trajectory"}, sample_keys}));
  eval_sub.app = app.add_subcommand("eval", "likelihood bound and sample statistics");
  add_keys(eval_sub, join({{"checkpoint", "corpus", "out", "seed", "n_mc", "eval_fraction", "eval_sequences",
                            "oracle_order"},
                           sample_keys}));
  analyze_sub.app = app.add_subcommand("analyze", "schedule and information-decay table");
  add_keys(analyze_sub, {"T", "kernel", "out", "seed", "mc_samples", "vocab_size"});
  robust_sub.app = app.add_subcommand("robustness", "noise-injection comparison");
  std::string baseline_path;
  add_keys(robust_sub, join({{"checkpoint", "corpus", "out", "seed", "t_inject", "fraction", "n_seeds",
                              "samples_per_seed", "eval_fraction", "oracle_order"},
                             sample_keys}));
  robust_sub.app->add_option("--baseline", baseline_path, "second checkpoint to compare against");
  CLI::App* selftest = app.add_subcommand("selftest", "run the invariant suite");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 1;
  }

  try {
    if (*selftest) return run_selftest(std::cout) == 0 ? 0 : 2;
    if (*train_sub.app) return cmd_train(resolve(train_sub));
    if (*sample_sub.app) return cmd_sample(resolve(sample_sub));
    if (*eval_sub.app) return cmd_eval(resolve(eval_sub));
    if (*analyze_sub.app) return cmd_analyze(resolve(analyze_sub));
    if (*robust_sub.app) return cmd_robustness(resolve(robust_sub), baseline_path);
  } catch (const UsageError& e) {
    std::cerr << "usage error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 1;
}
