#pragma once

#include <algorithm>
#include <cstdio>
#include <deque>
#include <filesystem>
#include <iostream>
#include <optional>
#include <regex>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "relprop/analysis/experiment.hpp"
#include "relprop/analysis/parallel.hpp"
#include "relprop/cli/manifest.hpp"
#include "relprop/cli/svg.hpp"
#include "relprop/data/corpus.hpp"
#include "relprop/data/vocab.hpp"
#include "relprop/errors.hpp"
#include "relprop/lrp/rules.hpp"
#include "relprop/model/decode.hpp"
#include "relprop/train/checkpoint.hpp"
#include "relprop/train/mrt.hpp"
#include "relprop/train/trainer.hpp"

namespace relprop::cli {

namespace fs = std::filesystem;

inline constexpr int kExitOk = 0;
inline constexpr int kExitUsage = 2;
inline constexpr int kExitRuntime = 3;

struct GenDataOptions {
  std::string task = "copy";
  std::size_t n = 10000;
  std::size_t min_len = 4;
  std::size_t max_len = 12;
  std::size_t vocab_size = 32;
  std::uint64_t seed = 1;
  bool no_source_eos = false;
  std::string out = "data";
};

struct TrainOptions {
  std::string corpus;
  std::string vocab;
  std::string out = "run";
  std::string objective = "mle";
  std::string init_checkpoint;
  bool resume = false;
  std::int64_t steps = 5000;
  std::size_t tokens_per_batch = 2048;
  std::int64_t checkpoint_every = 500;
  std::uint64_t seed = 1;
  std::string word_dropout = "none";
  double rate = 0.1;
  double label_smoothing = 0.1;
  std::int64_t warmup = 400;
  double lr_scale = 1.0;
  double clip_norm = 5.0;
  double stop_at_accuracy = 0.0;
  std::size_t monitor_pairs = 256;
  std::size_t average = 1;
  int layers = 2;
  int heads = 2;
  int d_model = 64;
  int d_ff = 128;
  int max_len = 32;
  double dropout = 0.0;
  std::size_t candidates = 8;
  bool no_reference = false;
  double sharpness = 0.005;
  double mrt_lr = 1e-5;
  std::int64_t mrt_steps = 0;
  std::size_t sentences_per_step = 16;
  std::size_t risk_pairs = 100;
  std::int64_t log_every = 100;
  bool quiet = false;
};

struct DecodeOptions {
  std::string checkpoint;
  std::string vocab;
  std::string input;
  std::string output;
  int beam = 1;
  int max_steps = 0;
  std::size_t threads = 0;
};

struct AnalyzeOptions {
  std::string checkpoint;
  std::string corpus;
  std::string vocab;
  std::size_t source_len = 0;
  std::size_t target_len = 0;
  std::size_t n = 200;
  std::vector<std::string> stats{"source-contribution"};
  std::vector<std::string> modes{"reference"};
  double alpha = 1.0;
  double beta = 0.0;
  int beam = 1;
  std::uint64_t shuffle_seed = 1;
  std::string logit = "top1";
  bool attention_as_constant = false;
  std::vector<std::string> series;
  std::string out = "analysis";
  std::size_t threads = 0;
};

struct ReportOptions {
  std::vector<std::string> csv;
  std::vector<std::string> labels;
  std::string out = "report.svg";
  std::string title = "relevance statistics";
  std::string x_label = "index";
  std::string y_label = "value";
};

struct RerunOptions {
  std::string manifest;
};

/// Merges `--config file.json` into the argument list: every key becomes
/// `--key value` unless the user passed that flag explicitly.
inline std::vector<std::string> expand_config(const std::vector<std::string>& args) {
  auto it = std::find(args.begin(), args.end(), "--config");
  std::string path;
  std::vector<std::string> rest;
  for (std::size_t i = 0; i < args.size(); ++i) {
    if (args[i] == "--config") {
      if (i + 1 >= args.size()) {
        throw ConfigError("--config needs a file path");
      }
      path = args[++i];
    } else if (args[i].starts_with("--config=")) {
      path = args[i].substr(9);
    } else {
      rest.push_back(args[i]);
    }
  }
  if (path.empty() && it == args.end()) {
    return rest;
  }
  nlohmann::json cfg;
  try {
    cfg = nlohmann::json::parse(read_file(path));
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("config file " + path + " is not valid JSON: " + e.what());
  } catch (const IoError&) {
    throw ConfigError("cannot read config file " + path);
  }
  if (!cfg.is_object()) {
    throw ConfigError("config file " + path + " must hold a JSON object");
  }
  auto given = [&](const std::string& key) {
    const std::string flag = "--" + key;
    return std::any_of(rest.begin(), rest.end(),
                       [&](const std::string& a) { return a == flag || a.starts_with(flag + "="); });
  };
  auto scalar = [](const nlohmann::json& v) { return v.is_string() ? v.get<std::string>() : v.dump(); };
  std::vector<std::string> injected;
  for (const auto& [key, value] : cfg.items()) {
    if (given(key)) {
      continue;
    }
    if (value.is_boolean()) {
      if (value.get<bool>()) {
        injected.push_back("--" + key);
      }
    } else if (value.is_array()) {
      injected.push_back("--" + key);
      for (const auto& v : value) {
        injected.push_back(scalar(v));
      }
    } else {
      injected.push_back("--" + key);
      injected.push_back(scalar(value));
    }
  }
  if (rest.empty()) {
    return injected;
  }
  std::vector<std::string> out{rest.front()};
  out.insert(out.end(), injected.begin(), injected.end());
  out.insert(out.end(), rest.begin() + 1, rest.end());
  return out;
}

/// Every option of a subcommand with its effective value.
inline nlohmann::json resolved_options(const CLI::App* sub) {
  nlohmann::json j = nlohmann::json::object();
  for (const CLI::Option* o : sub->get_options()) {
    if (o->get_lnames().empty()) {
      continue;
    }
    const std::string& name = o->get_lnames().front();
    if (name == "help") {
      continue;
    }
    if (o->get_expected_max() == 0) {
      j[name] = o->count() > 0;
    } else if (o->count() > 0) {
      const auto& r = o->results();
      j[name] = o->get_expected_max() > 1 ? nlohmann::json(r) : nlohmann::json(r.back());
    } else {
      j[name] = o->get_default_str();
    }
  }
  return j;
}

inline std::size_t resolve_threads(std::size_t flag) { return flag > 0 ? flag : threads_from_env(1); }

inline std::string checkpoint_name(std::int64_t step) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "ckpt-%08lld.bin", static_cast<long long>(step));
  return buf;
}

/// Checkpoint files in `dir` sorted by step.
inline std::vector<std::pair<std::int64_t, std::string>> list_checkpoints(const std::string& dir) {
  std::vector<std::pair<std::int64_t, std::string>> out;
  if (!fs::is_directory(dir)) {
    return out;
  }
  const std::regex pattern(R"(ckpt-(\d+)\.bin)");
  for (const auto& e : fs::directory_iterator(dir)) {
    std::smatch m;
    const std::string name = e.path().filename().string();
    if (std::regex_match(name, m, pattern)) {
      out.emplace_back(std::stoll(m[1].str()), e.path().string());
    }
  }
  std::sort(out.begin(), out.end());
  return out;
}

inline std::vector<LossRow> read_loss_csv(const std::string& path) {
  std::vector<LossRow> rows;
  if (!fs::exists(path)) {
    return rows;
  }
  const auto t = read_csv(path);
  for (const auto& r : t.rows) {
    if (r.size() != 3) {
      throw InputError("malformed loss log row in " + path);
    }
    rows.push_back({std::stoll(r[0]), std::stod(r[1]), std::stod(r[2])});
  }
  return rows;
}

class Runner {
 public:
  Runner(std::ostream& out, std::ostream& err) : out_(out), err_(err) {}

  int gen_data(const GenDataOptions& o, RunManifest& m) {
    CorpusSpec spec;
    spec.task = parse_task(o.task);
    spec.n = o.n;
    spec.min_len = o.min_len;
    spec.max_len = o.max_len;
    spec.vocab_size = o.vocab_size;
    spec.seed = o.seed;
    spec.source_eos = !o.no_source_eos;
    m.seed = o.seed;
    fs::create_directories(o.out);
    const std::string manifest = (fs::path(o.out) / "manifest.json").string();
    m.save(manifest);
    const Vocab vocab = Vocab::synthetic(o.vocab_size);
    const Corpus corpus = generate_corpus(spec);
    const std::string corpus_path = (fs::path(o.out) / "corpus.tsv").string();
    const std::string vocab_path = (fs::path(o.out) / "vocab.txt").string();
    write_corpus(corpus_path, corpus, vocab);
    vocab.save(vocab_path);
    m.add_output(corpus_path);
    m.add_output(vocab_path);
    finish(m, manifest);
    out_ << "wrote " << corpus.size() << " pairs to " << corpus_path << "\n";
    return kExitOk;
  }

  int train(const TrainOptions& o, RunManifest& m) {
    if (o.objective != "mle" && o.objective != "mrt") {
      throw ConfigError("unknown objective '" + o.objective + "'; expected one of: mle, mrt");
    }
    if (o.objective == "mrt" && o.init_checkpoint.empty()) {
      throw ConfigError("--objective mrt fine-tunes an MLE model and needs --init-checkpoint");
    }
    if (o.objective == "mle" && !o.init_checkpoint.empty()) {
      throw ConfigError("--init-checkpoint is only used with --objective mrt");
    }
    m.seed = o.seed;
    const Vocab vocab = Vocab::load(o.vocab);
    const Corpus corpus = read_corpus(o.corpus, vocab);
    m.add_input(o.corpus);
    m.add_input(o.vocab);
    fs::create_directories(o.out);
    const std::string manifest = (fs::path(o.out) / "manifest.json").string();
    if (o.objective == "mrt") {
      m.add_input(o.init_checkpoint);
      m.save(manifest);
      return train_mrt(o, corpus, m, manifest);
    }

    ModelConfig mc;
    mc.n_layers = o.layers;
    mc.n_heads = o.heads;
    mc.d_model = o.d_model;
    mc.d_ff = o.d_ff;
    mc.src_vocab = static_cast<int>(vocab.size());
    mc.tgt_vocab = static_cast<int>(vocab.size());
    mc.max_len = o.max_len;
    mc.dropout = o.dropout;
    mc.validate();
    TrainConfig tc;
    tc.tokens_per_batch = o.tokens_per_batch;
    tc.total_steps = o.steps;
    tc.checkpoint_every = o.checkpoint_every;
    tc.seed = o.seed;
    tc.word_dropout_side = parse_dropout_side(o.word_dropout);
    tc.word_dropout_rate = o.rate;
    tc.label_smoothing = o.label_smoothing;
    tc.warmup_steps = o.warmup;
    tc.lr_scale = o.lr_scale;
    tc.clip_norm = o.clip_norm;
    tc.stop_at_accuracy = o.stop_at_accuracy;
    tc.monitor_pairs = o.monitor_pairs;
    tc.validate();
    if (o.average < 1) {
      throw ConfigError("--average must be at least 1");
    }

    const std::string loss_path = (fs::path(o.out) / "loss.csv").string();
    std::optional<Checkpoint> resume;
    std::vector<LossRow> log;
    std::deque<Checkpoint> recent;
    if (o.resume) {
      const auto found = list_checkpoints(o.out);
      if (found.empty()) {
        throw ConfigError("--resume found no checkpoint in " + o.out);
      }
      resume = load_checkpoint(found.back().second);
      m.add_input(found.back().second);
      for (const auto& r : read_loss_csv(loss_path)) {
        if (r.step <= resume->step) {
          log.push_back(r);
        }
      }
      for (std::size_t i = found.size() - std::min(found.size(), o.average); i < found.size(); ++i) {
        recent.push_back(load_checkpoint(found[i].second));
      }
    }
    m.save(manifest);

    TrainHooks hooks;
    hooks.on_step = [&](const LossRow& r) {
      log.push_back(r);
      if (!o.quiet && o.log_every > 0 && r.step % o.log_every == 0) {
        char buf[128];
        std::snprintf(buf, sizeof buf, "step %lld loss %.6f lr %.6g\n", static_cast<long long>(r.step), r.loss, r.lr);
        err_ << buf;
      }
    };
    hooks.on_checkpoint = [&](const Checkpoint& c) {
      const std::string path = (fs::path(o.out) / checkpoint_name(c.step)).string();
      save_checkpoint(c, path);
      write_loss_csv(log, loss_path);
      recent.push_back(c);
      while (recent.size() > o.average) {
        recent.pop_front();
      }
    };
    const auto result = train_mle(tc, mc, corpus, resume ? &*resume : nullptr, hooks);
    write_loss_csv(log, loss_path);

    Checkpoint final_ck = result.final;
    if (o.average > 1) {
      std::vector<Checkpoint> list(recent.begin(), recent.end());
      final_ck = average_checkpoints(list, std::min(o.average, list.size()));
    }
    const std::string final_path = (fs::path(o.out) / "final.bin").string();
    save_checkpoint(final_ck, final_path);
    for (const auto& [step, path] : list_checkpoints(o.out)) {
      m.add_output(path);
    }
    m.add_output(loss_path);
    m.add_output(final_path);
    finish(m, manifest);
    out_ << "trained to step " << result.final.step << (result.stopped_early ? " (accuracy target reached)" : "")
         << ", final checkpoint " << final_path << "\n";
    return kExitOk;
  }

  int decode(const DecodeOptions& o, RunManifest& m) {
    const std::string manifest = o.output + ".manifest.json";
    m.add_input(o.checkpoint);
    m.add_input(o.vocab);
    m.add_input(o.input);
    m.save(manifest);
    const Checkpoint ck = load_checkpoint(o.checkpoint);
    const Vocab vocab = Vocab::load(o.vocab);
    if (o.beam < 1) {
      throw ConfigError("--beam must be at least 1");
    }
    std::vector<TokenIds> sources;
    {
      std::istringstream in(read_file(o.input));
      std::string line;
      while (std::getline(in, line)) {
        if (!line.empty() && line.back() == '\r') {
          line.pop_back();
        }
        const auto tab = line.find('\t');
        sources.push_back(split_tokens(tab == std::string::npos ? line : line.substr(0, tab), vocab));
      }
    }
    const int max_steps = o.max_steps > 0 ? o.max_steps : ck.config.max_len;
    std::vector<std::string> lines(sources.size());
    parallel_for(sources.size(), resolve_threads(o.threads), [&](std::size_t i) {
      if (sources[i].empty()) {
        return;
      }
      const TokenIds hyp = o.beam == 1 ? greedy_decode(ck.params, ck.config, sources[i], max_steps)
                                       : beam_decode(ck.params, ck.config, sources[i], o.beam, max_steps);
      lines[i] = join_tokens(strip_eos(hyp), vocab);
    });
    std::string text;
    for (const auto& l : lines) {
      text += l + "\n";
    }
    write_file(o.output, text);
    m.add_output(o.output);
    finish(m, manifest);
    return kExitOk;
  }

  int analyze(const AnalyzeOptions& o, RunManifest& m) {
    LrpConfig lrp;
    lrp.alpha = o.alpha;
    lrp.beta = o.beta;
    lrp.attention_as_constant = o.attention_as_constant;
    if (o.logit != "top1") {
      lrp.logit_choice = LogitChoice::Index;
      try {
        lrp.logit_index = std::stoi(o.logit);
      } catch (const std::exception&) {
        throw ConfigError("--logit must be 'top1' or a token id, got '" + o.logit + "'");
      }
    }
    lrp.validate();
    if (o.source_len == 0 || o.target_len == 0) {
      throw ConfigError("--source-len and --target-len are required");
    }
    std::vector<Statistic> stats;
    bool want_kl = false;
    for (const auto& s : o.stats) {
      if (s == "kl") {
        want_kl = true;
      } else {
        stats.push_back(parse_statistic(s));
      }
    }
    std::vector<PrefixMode> modes;
    for (const auto& s : o.modes) {
      modes.push_back(parse_prefix_mode(s));
    }
    if (want_kl && o.series.empty()) {
      throw ConfigError("--stat kl needs --series with the in-training checkpoints");
    }
    m.add_input(o.checkpoint);
    m.add_input(o.corpus);
    m.add_input(o.vocab);
    for (const auto& s : o.series) {
      m.add_input(s);
    }
    m.seed = o.shuffle_seed;
    fs::create_directories(o.out);
    const std::string manifest = (fs::path(o.out) / "manifest.json").string();
    m.save(manifest);

    const Checkpoint ck = load_checkpoint(o.checkpoint);
    const Vocab vocab = Vocab::load(o.vocab);
    const EvalSet eval = make_eval_set(read_corpus(o.corpus, vocab), o.source_len, o.target_len, o.n);
    const std::size_t threads = resolve_threads(o.threads);
    nlohmann::json summary = nlohmann::json::object();

    if (!stats.empty()) {
      ExperimentConfig cfg;
      cfg.modes = modes;
      cfg.statistics = stats;
      cfg.lrp = lrp;
      cfg.prefixes.beam = o.beam;
      cfg.prefixes.shuffle_seed = o.shuffle_seed;
      cfg.threads = threads;
      for (const auto& e : run_prefix_experiment(ck.params, ck.config, eval, cfg)) {
        const std::string name = std::string(statistic_name(e.statistic)) + "_" + prefix_mode_name(e.mode) + ".csv";
        const std::string path = (fs::path(o.out) / name).string();
        write_csv(path, rows_to_csv(e.table, {prefix_mode_name(e.mode), ck.step}));
        m.add_output(path);
        summary[name] = table_summary(e.table);
      }
    }
    if (want_kl) {
      std::vector<Checkpoint> series;
      for (const auto& s : o.series) {
        series.push_back(load_checkpoint(s));
      }
      const auto table = kl_convergence(eval, series, ck, lrp, threads);
      const std::string path = (fs::path(o.out) / "kl.csv").string();
      write_csv(path, rows_to_csv(table));
      m.add_output(path);
      summary["kl.csv"] = table_summary(table);
    }
    const std::string summary_path = (fs::path(o.out) / "summary.json").string();
    write_file(summary_path, summary.dump(2) + "\n");
    m.add_output(summary_path);
    finish(m, manifest);
    out_ << "wrote " << (summary.size()) << " tables to " << o.out << "\n";
    return kExitOk;
  }

  int report(const ReportOptions& o, RunManifest& m) {
    if (o.csv.empty()) {
      throw ConfigError("report needs at least one --csv file");
    }
    if (!o.labels.empty() && o.labels.size() != o.csv.size()) {
      throw ConfigError("--labels needs one label per --csv file");
    }
    for (const auto& c : o.csv) {
      m.add_input(c);
    }
    const std::string manifest = o.out + ".manifest.json";
    m.save(manifest);
    std::vector<PlotSeries> series;
    for (std::size_t i = 0; i < o.csv.size(); ++i) {
      const auto t = read_csv(o.csv[i]);
      if (t.rows.empty()) {
        throw ConfigError("csv file " + o.csv[i] + " has no data rows");
      }
      auto col = [&](const std::string& name) {
        auto it = std::find(t.header.begin(), t.header.end(), name);
        if (it == t.header.end()) {
          throw ConfigError("csv file " + o.csv[i] + " lacks a '" + name + "' column");
        }
        return static_cast<std::size_t>(it - t.header.begin());
      };
      const std::size_t xi = col("index");
      const std::size_t yi = col("value");
      PlotSeries s;
      s.label = o.labels.empty() ? fs::path(o.csv[i]).stem().string() : o.labels[i];
      for (const auto& r : t.rows) {
        try {
          s.x.push_back(std::stod(r.at(xi)));
          s.y.push_back(std::stod(r.at(yi)));
        } catch (const std::exception&) {
          throw InputError("csv file " + o.csv[i] + " has a non-numeric row");
        }
      }
      series.push_back(std::move(s));
    }
    write_file(o.out, render_line_plot(series, o.title, o.x_label, o.y_label));
    m.add_output(o.out);
    finish(m, manifest);
    return kExitOk;
  }

 private:
  int train_mrt(const TrainOptions& o, const Corpus& corpus, RunManifest& m, const std::string& manifest) {
    const Checkpoint init = load_checkpoint(o.init_checkpoint);
    MrtConfig mrt;
    mrt.n_candidates = o.candidates;
    mrt.include_reference = !o.no_reference;
    mrt.sharpness = o.sharpness;
    mrt.learning_rate = o.mrt_lr;
    mrt.steps = o.mrt_steps;
    mrt.sentences_per_step = o.sentences_per_step;
    mrt.seed = o.seed;
    mrt.clip_norm = o.clip_norm;
    mrt.validate();
    const std::uint64_t risk_seed = mix_seed(o.seed, 0x5249534bULL);
    const double before = corpus_risk(init.params, init.config, corpus, mrt, risk_seed, o.risk_pairs);
    std::string log = "step,risk,sentences,skipped\n";
    const auto result = mrt_finetune(mrt, init, corpus, [&](const MrtLogRow& r) {
      char buf[128];
      std::snprintf(buf, sizeof buf, "%lld,%.9g,%zu,%zu\n", static_cast<long long>(r.step), r.risk, r.sentences,
                    r.skipped);
      log += buf;
      if (!o.quiet && o.log_every > 0 && r.step % o.log_every == 0) {
        err_ << "mrt " << buf;
      }
    });
    const double after = corpus_risk(result.final.params, init.config, corpus, mrt, risk_seed, o.risk_pairs);
    const std::string final_path = (fs::path(o.out) / "final.bin").string();
    const std::string log_path = (fs::path(o.out) / "mrt.csv").string();
    const std::string risk_path = (fs::path(o.out) / "risk.json").string();
    save_checkpoint(result.final, final_path);
    write_file(log_path, log);
    write_file(risk_path,
               nlohmann::json{{"before", before}, {"after", after}, {"skipped_sentences", result.skipped}}.dump(2) +
                   "\n");
    m.add_output(final_path);
    m.add_output(log_path);
    m.add_output(risk_path);
    finish(m, manifest);
    out_ << "mrt fine-tuning: corpus risk " << before << " -> " << after << "\n";
    return kExitOk;
  }

  static nlohmann::json table_summary(const StatisticTable& t) {
    nlohmann::json j{{"kind", t.kind},
                     {"rows", t.rows.size()},
                     {"skipped", t.skipped},
                     {"excluded_sentences", t.excluded_sentences}};
    std::vector<std::size_t> flagged;
    for (const auto& r : t.rows) {
      if (r.flagged) {
        flagged.push_back(r.index);
      }
    }
    j["flagged_indices"] = flagged;
    return j;
  }

  static void finish(RunManifest& m, const std::string& path) {
    m.status = "complete";
    m.save(path);
  }

  std::ostream& out_;
  std::ostream& err_;
};

/// Runs one command; `args` starts with the subcommand name. Returns the
/// process exit code.
inline int run(const std::vector<std::string>& raw_args, std::ostream& out = std::cout,
               std::ostream& err = std::cerr) {
  std::vector<std::string> args;
  try {
    args = expand_config(raw_args);
  } catch (const ConfigError& e) {
    err << "error: " << e.what() << "\n";
    return kExitUsage;
  }

  CLI::App app{"relprop: source/target relevance analysis for toy translation models", "relprop"};
  app.option_defaults()->always_capture_default();
  app.require_subcommand(1);
  app.set_help_all_flag("--help-all");

  GenDataOptions g;
  auto* gen = app.add_subcommand("gen-data", "Generate a synthetic parallel corpus and vocabulary");
  gen->add_option("--task", g.task, "copy, reverse or cipher_reorder");
  gen->add_option("--n", g.n, "number of sentence pairs");
  gen->add_option("--min-len", g.min_len, "minimum content length");
  gen->add_option("--max-len", g.max_len, "maximum content length");
  gen->add_option("--vocab-size", g.vocab_size, "vocabulary size including 4 reserved tokens");
  gen->add_option("--seed", g.seed);
  gen->add_flag("--no-source-eos", g.no_source_eos, "do not append eos to sources");
  gen->add_option("--out", g.out, "output directory");

  TrainOptions t;
  auto* tr = app.add_subcommand("train", "Train with MLE or fine-tune with MRT");
  tr->add_option("--corpus", t.corpus)->required()->check(CLI::ExistingFile);
  tr->add_option("--vocab", t.vocab)->required()->check(CLI::ExistingFile);
  tr->add_option("--out", t.out, "output directory");
  tr->add_option("--objective", t.objective, "mle or mrt");
  tr->add_option("--init-checkpoint", t.init_checkpoint, "MLE checkpoint to fine-tune (mrt)")
      ->check(CLI::ExistingFile);
  tr->add_flag("--resume", t.resume, "continue from the last checkpoint in --out");
  tr->add_option("--steps", t.steps);
  tr->add_option("--tokens-per-batch", t.tokens_per_batch);
  tr->add_option("--checkpoint-every", t.checkpoint_every);
  tr->add_option("--seed", t.seed);
  tr->add_option("--word-dropout", t.word_dropout, "none, source or target");
  tr->add_option("--rate", t.rate, "word dropout rate");
  tr->add_option("--label-smoothing", t.label_smoothing);
  tr->add_option("--warmup", t.warmup);
  tr->add_option("--lr-scale", t.lr_scale);
  tr->add_option("--clip-norm", t.clip_norm);
  tr->add_option("--stop-at-accuracy", t.stop_at_accuracy, "stop once teacher-forced accuracy reaches this");
  tr->add_option("--monitor-pairs", t.monitor_pairs);
  tr->add_option("--average", t.average, "average the last K checkpoints into final.bin");
  tr->add_option("--layers", t.layers);
  tr->add_option("--heads", t.heads);
  tr->add_option("--d-model", t.d_model);
  tr->add_option("--d-ff", t.d_ff);
  tr->add_option("--max-len", t.max_len);
  tr->add_option("--dropout", t.dropout);
  tr->add_option("--candidates", t.candidates, "mrt samples per sentence");
  tr->add_flag("--no-reference", t.no_reference, "mrt: do not add the reference to the subset");
  tr->add_option("--sharpness", t.sharpness, "mrt subset sharpness");
  tr->add_option("--mrt-lr", t.mrt_lr);
  tr->add_option("--mrt-steps", t.mrt_steps, "0 means one pass over the corpus");
  tr->add_option("--sentences-per-step", t.sentences_per_step);
  tr->add_option("--risk-pairs", t.risk_pairs, "pairs used for the before/after corpus risk");
  tr->add_option("--log-every", t.log_every);
  tr->add_flag("--quiet", t.quiet);

  DecodeOptions d;
  auto* de = app.add_subcommand("decode", "Translate source lines with greedy or beam search");
  de->add_option("--checkpoint", d.checkpoint)->required()->check(CLI::ExistingFile);
  de->add_option("--vocab", d.vocab)->required()->check(CLI::ExistingFile);
  de->add_option("--input", d.input, "one source per line (text before a TAB)")->required()->check(CLI::ExistingFile);
  de->add_option("--output", d.output)->required();
  de->add_option("--beam", d.beam);
  de->add_option("--max-steps", d.max_steps, "0 means the model max_len");
  de->add_option("--threads", d.threads, "0 reads RELPROP_THREADS, default 1");

  AnalyzeOptions a;
  auto* an = app.add_subcommand("analyze", "Compute relevance statistics over a fixed-length eval set");
  an->add_option("--checkpoint", a.checkpoint)->required()->check(CLI::ExistingFile);
  an->add_option("--corpus", a.corpus, "corpus the eval set is drawn from")->required()->check(CLI::ExistingFile);
  an->add_option("--vocab", a.vocab)->required()->check(CLI::ExistingFile);
  an->add_option("--source-len", a.source_len, "S, source tokens including eos")->required();
  an->add_option("--target-len", a.target_len, "T, target tokens including eos")->required();
  an->add_option("--n", a.n, "eval pairs");
  an->add_option("--stat", a.stats,
                 "source-contribution, source-influence, source-entropy, target-entropy, accuracy, kl");
  an->add_option("--mode", a.modes, "reference, model, random");
  an->add_option("--alpha", a.alpha);
  an->add_option("--beta", a.beta);
  an->add_option("--beam", a.beam, "model-mode prefixes: 1 decodes greedily");
  an->add_option("--shuffle-seed", a.shuffle_seed, "random-mode target shuffle");
  an->add_option("--logit", a.logit, "top1 or a token id");
  an->add_flag("--attention-as-constant", a.attention_as_constant);
  an->add_option("--series", a.series, "in-training checkpoints for --stat kl");
  an->add_option("--out", a.out, "output directory");
  an->add_option("--threads", a.threads, "0 reads RELPROP_THREADS, default 1");

  ReportOptions r;
  auto* re = app.add_subcommand("report", "Render CSV statistics as an SVG line plot");
  re->add_option("--csv", r.csv)->required()->check(CLI::ExistingFile);
  re->add_option("--labels", r.labels);
  re->add_option("--out", r.out);
  re->add_option("--title", r.title);
  re->add_option("--x-label", r.x_label);
  re->add_option("--y-label", r.y_label);

  RerunOptions rr;
  auto* rer = app.add_subcommand("rerun", "Replay a manifest and check its outputs are byte-identical");
  rer->add_option("--manifest", rr.manifest)->required()->check(CLI::ExistingFile);

  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n";
    return kExitUsage;
  }

  CLI::App* sub = app.get_subcommands().front();
  RunManifest m;
  m.command = sub->get_name();
  m.argv = args;
  m.config = resolved_options(sub);
  Runner runner(out, err);
  try {
    if (sub == gen) {
      return runner.gen_data(g, m);
    }
    if (sub == tr) {
      return runner.train(t, m);
    }
    if (sub == de) {
      return runner.decode(d, m);
    }
    if (sub == an) {
      return runner.analyze(a, m);
    }
    if (sub == re) {
      return runner.report(r, m);
    }
    const RunManifest recorded = RunManifest::load(rr.manifest);
    if (recorded.command == "rerun") {
      throw ConfigError("refusing to rerun a rerun manifest");
    }
    const int code = run(recorded.argv, out, err);
    if (code != kExitOk) {
      return code;
    }
    std::size_t mismatched = 0;
    for (const auto& [path, hash] : recorded.outputs) {
      const std::string now = fs::exists(path) ? hash_file(path) : "missing";
      if (now != hash) {
        err << "rerun: " << path << " differs (" << hash << " -> " << now << ")\n";
        ++mismatched;
      }
    }
    if (mismatched > 0) {
      return kExitRuntime;
    }
    out << "rerun: " << recorded.outputs.size() << " outputs identical\n";
    return kExitOk;
  } catch (const ConfigError& e) {
    err << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const InputError& e) {
    err << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitRuntime;
  }
}

inline int main(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return run(args);
}

}  // namespace relprop::cli
