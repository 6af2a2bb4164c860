#include "commands.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <optional>
#include <ostream>
#include <sstream>

#include "ctxreg/checkpoint.hpp"
#include "ctxreg/evaluation.hpp"
#include "ctxreg/keyvalue.hpp"
#include "ctxreg/log.hpp"

namespace fs = std::filesystem;

namespace ctxreg::cli {
namespace {

constexpr std::uint64_t kEvalSeedOffset = 100;

struct CorpusDir {
  Vocabulary vocab;
  Corpus train, valid, test;
};

CorpusDir load_corpus_dir(const fs::path& dir) {
  CorpusDir c;
  c.vocab = Vocabulary::read(dir / "vocab.txt");
  c.train = read_corpus(dir / "train.txt", c.vocab);
  c.valid = read_corpus(dir / "valid.txt", c.vocab);
  c.test = read_corpus(dir / "test.txt", c.vocab);
  return c;
}

const Corpus& split_of(const CorpusDir& c, const std::string& name) {
  if (name == "train") return c.train;
  if (name == "valid") return c.valid;
  if (name == "test") return c.test;
  throw ConfigError("unknown split '" + name + "' (expected train, valid or test)");
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << text;
}

CorpusSplits generate(const SyntheticTaskSpec& spec, const fs::path& out_dir) {
  spec.validate();
  const SyntheticTask task(spec);
  CorpusSplits splits = generate_corpus(task);
  fs::create_directories(out_dir);
  task.vocab().write(out_dir / "vocab.txt");
  write_corpus(splits.train, task.vocab(), out_dir / "train.txt");
  write_corpus(splits.valid, task.vocab(), out_dir / "valid.txt");
  write_corpus(splits.test, task.vocab(), out_dir / "test.txt");
  std::ostringstream os;
  spec.write(os);
  write_text(out_dir / "task.txt", os.str());
  return splits;
}

struct EvalArgs {
  std::size_t beam = 5;
  bool greedy = false;
  std::size_t shuffles = 3;
  std::size_t samples = 1;
  bool random_context = false;
};

EvalOptions make_eval_options(const EvalArgs& a, std::uint64_t seed, const Vocabulary& vocab) {
  EvalOptions o;
  o.decode.mode = a.greedy ? DecodeConfig::Mode::kGreedy : DecodeConfig::Mode::kBeam;
  o.decode.beam = a.beam;
  o.shuffles = a.shuffles;
  o.samples = a.samples;
  o.seed = seed;
  o.random_context_model = a.random_context;
  o.ambiguous_flags = ambiguous_target_flags(vocab);
  if (a.beam < 1) throw ConfigError("--beam must be >= 1");
  if (a.shuffles < 1) throw ConfigError("--shuffles must be >= 1");
  if (a.samples < 1) throw ConfigError("--samples must be >= 1");
  return o;
}

EvalReport run_eval(const ContextTransformer& model, const Corpus& data, const EvalOptions& opt, const fs::path& out_dir) {
  const EvalReport rep = evaluate(model, data, opt);
  fs::create_directories(out_dir);
  std::ostringstream report, scores, curve, table;
  write_report(report, rep, opt);
  write_score_dump(scores, rep.scores);
  write_curve(curve, rep.curve);
  write_sentence_table(table, rep.scores);
  write_text(out_dir / "report.txt", report.str());
  write_text(out_dir / "scores.tsv", scores.str());
  write_text(out_dir / "curve.tsv", curve.str());
  write_text(out_dir / "sentences.tsv", table.str());
  return rep;
}

std::string fmt(double v, int digits = 2) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(digits) << v;
  return os.str();
}

std::string summary_table(const std::vector<std::pair<Variant, EvalReport>>& rows) {
  std::ostringstream os;
  os << "variant                    Normal  Ctx-Marginalized  Delta_BLEU  Delta_D/token  AmbAcc(true)  "
        "AmbAcc(deranged)  TopQ-gap  BottomQ-gap\n";
  const char* names[] = {"(a) no context", "(b) random context", "(c) larger-context", "(d) + regularizer"};
  for (const auto& [v, r] : rows) {
    os << std::left << std::setw(24) << names[static_cast<int>(v)] << std::right << std::setw(9)
       << fmt(r.bleu_normal) << std::setw(18) << fmt(r.bleu_substituted_mean) << std::setw(12) << fmt(r.delta_bleu)
       << std::setw(15) << fmt(r.delta_data.per_token, 4) << std::setw(14) << fmt(100 * r.ambiguous_true.rate())
       << std::setw(18) << fmt(100 * r.ambiguous_substituted.rate()) << std::setw(10) << fmt(r.top_quartile_gap)
       << std::setw(13) << fmt(r.bottom_quartile_gap) << '\n';
  }
  return os.str();
}

std::vector<std::string> ordering_violations(const std::vector<std::pair<Variant, EvalReport>>& rows) {
  const EvalReport& a = rows[0].second;
  const EvalReport& b = rows[1].second;
  const EvalReport& c = rows[2].second;
  const EvalReport& d = rows[3].second;
  std::vector<std::string> bad;
  auto check = [&](bool ok, const std::string& what) {
    if (!ok) bad.push_back(what);
  };
  check(d.delta_data.raw > c.delta_data.raw,
        "Delta_D(d) > Delta_D(c) failed: " + fmt(d.delta_data.raw, 6) + " vs " + fmt(c.delta_data.raw, 6));
  check(c.delta_data.raw >= 0, "Delta_D(c) >= 0 failed: " + fmt(c.delta_data.raw, 6));
  check(d.delta_bleu > c.delta_bleu,
        "Delta_BLEU(d) > Delta_BLEU(c) failed: " + fmt(d.delta_bleu, 6) + " vs " + fmt(c.delta_bleu, 6));
  check(d.bleu_normal >= c.bleu_normal,
        "Normal(d) >= Normal(c) failed: " + fmt(d.bleu_normal, 6) + " vs " + fmt(c.bleu_normal, 6));
  check(a.delta_bleu == 0 && a.delta_data.raw == 0,
        "row (a) deltas not zero: " + fmt(a.delta_bleu, 6) + ", " + fmt(a.delta_data.raw, 6));
  check(b.delta_bleu == 0 && b.delta_data.raw == 0,
        "row (b) deltas not zero: " + fmt(b.delta_bleu, 6) + ", " + fmt(b.delta_data.raw, 6));
  return bad;
}

// Restores the previous log sink on scope exit.
class LogRedirect {
 public:
  explicit LogRedirect(std::ostream& err)
      : previous_(set_log_sink([&err](LogLevel level, std::string_view msg) {
          err << (level == LogLevel::kWarning ? "warning: " : "") << msg << '\n';
        })) {}
  ~LogRedirect() { set_log_sink(previous_); }

 private:
  LogSink previous_;
};

}  // namespace

TrainConfig default_repro_config(std::size_t vocab_size) {
  TrainConfig c;
  c.step_size = 3e-3;
  c.batch_size = 16;
  c.max_epochs = 40;
  c.evals_per_epoch = 2;
  c.patience = 5;
  c.seed = 1;
  c.model.layers = 1;
  c.model.width = 32;
  c.model.heads = 4;
  c.model.ff_width = 64;
  c.model.dropout = 0.1;
  c.model.vocab_size = vocab_size;
  return c;
}

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  LogRedirect redirect(err);
  CLI::App app{"Context-regularized larger-context translation toolkit", "ctxreg"};
  app.require_subcommand(1);
  std::optional<std::uint64_t> seed;
  app.add_option("--seed", seed, "Seed for every random choice; sub-seeds use fixed offsets");

  // gen
  auto* gen = app.add_subcommand("gen", "Generate the synthetic corpus");
  std::string spec_file, gen_out;
  gen->add_option("--spec", spec_file, "Task spec file (defaults when omitted)")->check(CLI::ExistingFile);
  gen->add_option("--out", gen_out, "Output directory")->required();

  // train
  auto* tr = app.add_subcommand("train", "Train one variant");
  std::string train_config, train_corpus, train_out, variant;
  tr->add_option("--config", train_config, "Training config file")->required()->check(CLI::ExistingFile);
  tr->add_option("--corpus", train_corpus, "Corpus directory from `gen`")->required();
  tr->add_option("--out", train_out, "Output directory")->required();
  tr->add_option("--variant", variant, "a, b, c or d (overrides train.variant)");

  // eval
  auto* ev = app.add_subcommand("eval", "Decode and score a checkpoint");
  std::string eval_ckpt, eval_corpus, eval_split = "test", eval_out;
  EvalArgs eval_args;
  ev->add_option("--checkpoint", eval_ckpt, "Checkpoint file")->required();
  ev->add_option("--corpus", eval_corpus, "Corpus directory")->required();
  ev->add_option("--split", eval_split, "train, valid or test")->capture_default_str();
  ev->add_option("--out", eval_out, "Output directory")->required();
  ev->add_option("--beam", eval_args.beam, "Beam size")->capture_default_str();
  ev->add_flag("--greedy", eval_args.greedy, "Greedy decoding instead of beam search");
  ev->add_option("--shuffles", eval_args.shuffles, "Context substitutions R")->capture_default_str();
  ev->add_option("--samples", eval_args.samples, "Context-less samples M")->capture_default_str();
  ev->add_flag("--random-context", eval_args.random_context, "Model was trained on random contexts");

  // score-dump
  auto* sd = app.add_subcommand("score-dump", "Write per-sentence scores");
  std::string sd_ckpt, sd_corpus, sd_split = "test", sd_out;
  std::size_t sd_samples = 1;
  sd->add_option("--checkpoint", sd_ckpt, "Checkpoint file")->required();
  sd->add_option("--corpus", sd_corpus, "Corpus directory")->required();
  sd->add_option("--split", sd_split, "train, valid or test")->capture_default_str();
  sd->add_option("--out", sd_out, "Output file")->required();
  sd->add_option("--samples", sd_samples, "Context-less samples M")->capture_default_str();

  // repro
  auto* rp = app.add_subcommand("repro", "Generate, train and evaluate all four variants");
  std::string rp_out, rp_spec, rp_config;
  EvalArgs rp_eval;
  rp->add_option("--out", rp_out, "Output directory")->required();
  rp->add_option("--spec", rp_spec, "Task spec file")->check(CLI::ExistingFile);
  rp->add_option("--config", rp_config, "Training config file (variant key is ignored)")->check(CLI::ExistingFile);
  rp->add_option("--beam", rp_eval.beam, "Beam size")->capture_default_str();
  rp->add_option("--shuffles", rp_eval.shuffles, "Context substitutions R")->capture_default_str();

  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kOk;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return kOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << '\n';
    return kUsageError;
  }

  try {
    if (gen->parsed()) {
      SyntheticTaskSpec spec = spec_file.empty() ? SyntheticTaskSpec{} : SyntheticTaskSpec::read(spec_file);
      if (seed) spec.seed = *seed;
      const auto splits = generate(spec, gen_out);
      out << "wrote " << splits.train.size() << '/' << splits.valid.size() << '/' << splits.test.size()
          << " examples to " << gen_out << '\n';
      return kOk;
    }
    if (tr->parsed()) {
      TrainConfig cfg = TrainConfig::read(train_config);
      if (!variant.empty()) cfg.variant = parse_variant(variant);
      if (seed) cfg.seed = *seed;
      const CorpusDir corpus = load_corpus_dir(train_corpus);
      if (cfg.model.vocab_size != corpus.vocab.size()) {
        throw ConfigError("model.vocab_size is " + std::to_string(cfg.model.vocab_size) + " but the corpus vocabulary has " +
                          std::to_string(corpus.vocab.size()) + " entries");
      }
      const TrainResult r = train(cfg, corpus.train, corpus.valid, train_out);
      out << "variant " << to_string(cfg.variant) << ": " << r.steps << " steps, " << r.evaluations
          << " evaluations, best dev BLEU " << fmt(r.best_bleu) << ", final lr " << r.final_lr << " (" << r.stop_reason
          << ")\n";
      return kOk;
    }
    if (ev->parsed()) {
      const auto model = restore_model(load_checkpoint(eval_ckpt));
      const CorpusDir corpus = load_corpus_dir(eval_corpus);
      const EvalOptions opt = make_eval_options(eval_args, seed.value_or(1), corpus.vocab);
      const EvalReport rep = run_eval(*model, split_of(corpus, eval_split), opt, eval_out);
      write_report(out, rep, opt);
      return kOk;
    }
    if (sd->parsed()) {
      if (sd_samples < 1) throw ConfigError("--samples must be >= 1");
      const auto model = restore_model(load_checkpoint(sd_ckpt));
      const CorpusDir corpus = load_corpus_dir(sd_corpus);
      const Corpus& data = split_of(corpus, sd_split);
      const auto scores = sentence_scores_dataset(*model, data, true_contexts(data), sd_samples, seed.value_or(1));
      std::ostringstream os;
      write_score_dump(os, scores);
      write_text(sd_out, os.str());
      return kOk;
    }
    if (rp->parsed()) {
      SyntheticTaskSpec spec = rp_spec.empty() ? SyntheticTaskSpec{} : SyntheticTaskSpec::read(rp_spec);
      const fs::path root(rp_out);
      const CorpusSplits splits = generate(spec, root / "corpus");
      const Vocabulary vocab = Vocabulary::read(root / "corpus" / "vocab.txt");
      TrainConfig base = rp_config.empty() ? default_repro_config(vocab.size()) : TrainConfig::read(rp_config);
      if (seed) base.seed = *seed;
      if (base.model.vocab_size != vocab.size()) {
        throw ConfigError("model.vocab_size must be " + std::to_string(vocab.size()) + " for this task");
      }
      std::vector<std::pair<Variant, EvalReport>> rows;
      for (Variant v : {Variant::kA, Variant::kB, Variant::kC, Variant::kD}) {
        TrainConfig cfg = base;
        cfg.variant = v;
        const fs::path dir = root / to_string(v);
        const TrainResult r = train(cfg, splits.train, splits.valid, dir);
        err << "variant " << to_string(v) << ": " << r.steps << " steps, best dev BLEU " << fmt(r.best_bleu) << '\n';
        const auto model = restore_model(load_checkpoint(dir / "best.ckpt"));
        EvalArgs ea = rp_eval;
        ea.random_context = v == Variant::kB;
        const EvalOptions opt = make_eval_options(ea, base.seed + kEvalSeedOffset, vocab);
        rows.emplace_back(v, run_eval(*model, splits.test, opt, dir / "eval"));
      }
      const std::string table = summary_table(rows);
      const auto violations = ordering_violations(rows);
      std::ostringstream summary;
      summary << table;
      summary << (violations.empty() ? "\nordering checks: all hold\n" : "\nordering checks: FAILED\n");
      for (const auto& v : violations) summary << "  " << v << '\n';
      write_text(root / "summary.txt", summary.str());
      out << summary.str();
      return violations.empty() ? kOk : kRuntimeFailure;
    }
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << '\n';
    return kUsageError;
  } catch (const UnsupportedModeError& e) {
    err << "usage error: " << e.what() << '\n';
    return kUsageError;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kRuntimeFailure;
  }
  return kUsageError;
}

}  // namespace ctxreg::cli
