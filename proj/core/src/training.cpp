#include "ctxreg/training.hpp"

#include <cmath>
#include <fstream>
#include <iomanip>
#include <ostream>
#include <sstream>

#include "ctxreg/keyvalue.hpp"
#include "ctxreg/log.hpp"

namespace ctxreg {

std::string to_string(Variant v) {
  switch (v) {
    case Variant::kA: return "a";
    case Variant::kB: return "b";
    case Variant::kC: return "c";
    case Variant::kD: return "d";
  }
  return "?";
}

Variant parse_variant(const std::string& text) {
  if (text == "a") return Variant::kA;
  if (text == "b") return Variant::kB;
  if (text == "c") return Variant::kC;
  if (text == "d") return Variant::kD;
  throw ConfigError("variant must be one of a, b, c, d; got '" + text + "'");
}

void TrainConfig::validate() const {
  if (!(step_size > 0)) throw ConfigError("train.step_size must be > 0");
  if (patience < 1) throw ConfigError("train.patience must be >= 1");
  if (batch_size < 2) throw ConfigError("train.batch_size must be >= 2 (context substitution needs a derangement)");
  if (evals_per_epoch < 1) throw ConfigError("train.evals_per_epoch must be >= 1");
  if (!(halving_factor > 0 && halving_factor < 1)) throw ConfigError("train.halving_factor must be in (0, 1)");
  if (clip_norm < 0) throw ConfigError("train.clip_norm must be >= 0");
  if (!(adam.beta1 >= 0 && adam.beta1 < 1 && adam.beta2 >= 0 && adam.beta2 < 1 && adam.epsilon > 0)) {
    throw ConfigError("train: Adam constants out of range");
  }
  model.validate();
  reg.validate();
}

void TrainConfig::write(std::ostream& out) const {
  out << "train.step_size = " << format_exact(step_size) << '\n'
      << "train.beta1 = " << format_exact(adam.beta1) << '\n'
      << "train.beta2 = " << format_exact(adam.beta2) << '\n'
      << "train.epsilon = " << format_exact(adam.epsilon) << '\n'
      << "train.batch_size = " << batch_size << '\n'
      << "train.max_epochs = " << max_epochs << '\n'
      << "train.evals_per_epoch = " << evals_per_epoch << '\n'
      << "train.patience = " << patience << '\n'
      << "train.halving_factor = " << format_exact(halving_factor) << '\n'
      << "train.max_halvings = " << max_halvings << '\n'
      << "train.clip_norm = " << format_exact(clip_norm) << '\n'
      << "train.seed = " << seed << '\n'
      << "train.variant = " << to_string(variant) << '\n'
      << "train.detach_contextless = " << (detach_contextless ? "true" : "false") << '\n';
  model.write(out);
  reg.write(out);
}

TrainConfig TrainConfig::parse(std::istream& in, const std::string& source_name) {
  KeyValueReader kv(in, source_name);
  TrainConfig c;
  c.step_size = kv.get_double("train.step_size");
  c.adam.beta1 = kv.get_double("train.beta1");
  c.adam.beta2 = kv.get_double("train.beta2");
  c.adam.epsilon = kv.get_double("train.epsilon");
  c.batch_size = kv.get_uint("train.batch_size");
  c.max_epochs = kv.get_uint("train.max_epochs");
  c.evals_per_epoch = kv.get_uint("train.evals_per_epoch");
  c.patience = kv.get_uint("train.patience");
  c.halving_factor = kv.get_double("train.halving_factor");
  c.max_halvings = kv.get_uint("train.max_halvings");
  c.clip_norm = kv.get_double("train.clip_norm");
  c.seed = kv.get_uint("train.seed");
  c.variant = parse_variant(kv.get_string("train.variant"));
  c.detach_contextless = kv.get_bool("train.detach_contextless");
  c.model = ModelConfig::read(kv);
  c.reg = RegConfig::read(kv);
  kv.finish();
  c.validate();
  return c;
}

TrainConfig TrainConfig::read(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config " + path.string());
  return parse(in, path.string());
}

ModelConfig TrainConfig::effective_model() const {
  ModelConfig m = model;
  m.context_mode = variant == Variant::kA ? ContextMode::kContextBlind : ContextMode::kLargerContext;
  return m;
}

RegConfig TrainConfig::effective_reg() const { return variant == Variant::kD ? reg : RegConfig::disabled(); }

ContextChoice TrainConfig::base_context() const {
  return variant == Variant::kB ? ContextChoice::kShuffled : ContextChoice::kTrue;
}

// ---------------------------------------------------------------------------

void write_log_header(std::ostream& out) {
  out << "step\tepoch\tlr\tloss\tnll\treg_data\treg_sent\treg_tok\tdev_bleu\tdev_delta_data\n";
}

void write_log_record(std::ostream& out, const TrainLogRecord& r) {
  auto opt = [](const std::optional<double>& v) {
    if (!v) return std::string("-");
    std::ostringstream os;
    os << std::setprecision(9) << *v;
    return os.str();
  };
  out << std::setprecision(9) << r.step << '\t' << r.epoch << '\t' << r.lr << '\t' << r.loss.total_value << '\t'
      << r.loss.nll << '\t' << r.loss.reg_data << '\t' << r.loss.reg_sent << '\t' << r.loss.reg_tok << '\t'
      << opt(r.dev_bleu) << '\t' << opt(r.dev_delta_data) << '\n';
}

// ---------------------------------------------------------------------------

namespace {

// Fixed sub-seed offsets.
constexpr std::uint64_t kInitOffset = 1;
constexpr std::uint64_t kDropoutOffset = 2;
constexpr std::uint64_t kSubstitutionOffset = 3;
constexpr std::uint64_t kEpochOffset = 1000;

std::uint64_t sub_seed(std::uint64_t seed, std::uint64_t offset, std::uint64_t index) {
  return derive_rng(seed, offset)() ^ derive_rng(index, offset)();
}

std::vector<std::size_t> epoch_order(std::uint64_t seed, std::uint64_t epoch, std::size_t count) {
  std::vector<std::size_t> order(count);
  for (std::size_t i = 0; i < count; ++i) order[i] = i;
  std::mt19937_64 rng = derive_rng(seed, kEpochOffset + 2 * epoch + 1);
  for (std::size_t i = count; i > 1; --i) std::swap(order[i - 1], order[uniform_index(rng, i)]);
  return order;
}

}  // namespace

Trainer::Trainer(const TrainConfig& config, const Corpus& train, const Corpus& dev)
    : config_(config), train_(train), dev_(dev) {
  config_.validate();
  if (train.size() < 2) throw DataError("training corpus needs at least 2 examples");
  model_ = std::make_unique<ContextTransformer>(config_.effective_model(), derive_rng(config_.seed, kInitOffset)());
  adam_ = AdamState::for_params(model_->params());
  state_.lr = config_.step_size;
  batches_per_epoch_ = (train.size() + config_.batch_size - 1) / config_.batch_size;
}

PaddedBatch Trainer::batch_for_step(std::uint64_t step) const {
  const std::uint64_t epoch = step / batches_per_epoch_;
  const std::size_t index = static_cast<std::size_t>(step % batches_per_epoch_);
  auto batches = make_batches(train_, config_.batch_size, derive_rng(config_.seed, kEpochOffset + 2 * epoch)());
  const auto order = epoch_order(config_.seed, epoch, batches.size());
  return std::move(batches[order[index]]);
}

LossBreakdown Trainer::loss_at(const PaddedBatch& batch, std::uint64_t step) {
  model_->set_training(true);
  model_->reseed_dropout(sub_seed(config_.seed, kDropoutOffset, step));
  LossOptions opt;
  opt.reg = config_.effective_reg();
  opt.base = config_.base_context();
  opt.detach_contextless = config_.detach_contextless;
  opt.seed = sub_seed(config_.seed, kSubstitutionOffset, step);
  return total_loss(*model_, batch, opt);
}

LossBreakdown Trainer::step() {
  const PaddedBatch batch = batch_for_step(state_.step);
  model_->params().zero_grad();
  LossBreakdown loss = loss_at(batch, state_.step);
  if (!std::isfinite(loss.total_value)) {
    ComputationRecord::current().clear();
    throw TrainingDiverged("non-finite loss at step " + std::to_string(state_.step));
  }
  backward(loss.total);
  if (config_.clip_norm > 0) clip_gradients(model_->params(), config_.clip_norm);
  try {
    adam_step(model_->params(), adam_, state_.lr, config_.adam);
  } catch (const NonFiniteGradient& e) {
    throw TrainingDiverged(std::string(e.what()) + " at step " + std::to_string(state_.step));
  }
  ++state_.step;
  state_.epoch = state_.step / batches_per_epoch_;
  return loss;
}

Trainer::DevResult Trainer::evaluate_dev() const {
  const bool was_training = model_->training();
  model_->set_training(false);
  std::vector<const Sequence*> contexts = config_.variant == Variant::kB
                                              ? substituted_contexts(dev_, corpus_derangement(dev_.size(), config_.seed))
                                              : true_contexts(dev_);
  DecodeConfig greedy;
  greedy.mode = DecodeConfig::Mode::kGreedy;
  DevResult r;
  // Smoothed so that early evaluations without any 4-gram match still rank.
  r.bleu = bleu(decode_all(*model_, sources_of(dev_), contexts, greedy), references_of(dev_), true);
  r.delta = delta_from_scores(sentence_scores_dataset(*model_, dev_, contexts, 1, config_.seed));
  model_->set_training(was_training);
  return r;
}

void Trainer::set_schedule(double lr, const PlateauState& plateau) {
  state_.lr = lr;
  state_.plateau = plateau;
}

Checkpoint Trainer::checkpoint() const { return capture_checkpoint(*model_, &adam_, state_); }

void Trainer::restore(const Checkpoint& ckpt) {
  if (!(ckpt.config == model_->config())) throw CheckpointError("checkpoint model configuration differs from the trainer's");
  load_weights(*model_, ckpt);
  if (ckpt.optimizer) {
    adam_.step = ckpt.optimizer->step;
    for (std::size_t i = 0; i < adam_.first.size(); ++i) {
      adam_.first[i] = ckpt.optimizer->first.at(i).clone();
      adam_.second[i] = ckpt.optimizer->second.at(i).clone();
    }
  }
  state_ = ckpt.trainer;
}

// ---------------------------------------------------------------------------

TrainResult train(const TrainConfig& config, const Corpus& train_data, const Corpus& dev,
                  const std::filesystem::path& out_dir) {
  if (dev.size() < 2) throw DataError("development corpus needs at least 2 examples");
  std::filesystem::create_directories(out_dir);
  Trainer trainer(config, train_data, dev);
  {
    std::ofstream cfg(out_dir / "config.txt");
    TrainConfig effective = config;
    effective.model = config.effective_model();
    effective.write(cfg);
  }
  std::ofstream log(out_dir / "train.log");
  if (!log) throw std::runtime_error("cannot write " + (out_dir / "train.log").string());
  write_log_header(log);

  TrainResult result;
  const std::size_t nb = trainer.batches_per_epoch();
  const std::size_t marks = config.evals_per_epoch;
  PlateauState plateau;
  double lr = config.step_size;
  bool stop = false;
  for (std::size_t epoch = 0; epoch < config.max_epochs && !stop; ++epoch) {
    std::size_t next_mark = 1;
    for (std::size_t i = 1; i <= nb && !stop; ++i) {
      TrainLogRecord rec;
      rec.lr = lr;
      rec.loss = trainer.step();
      rec.step = trainer.state().step;
      rec.epoch = double(rec.step) / double(nb);
      bool eval_now = false;
      while (next_mark <= marks && i * marks >= next_mark * nb) {
        ++next_mark;
        eval_now = true;
      }
      if (eval_now) {
        const auto dev_result = trainer.evaluate_dev();
        rec.dev_bleu = dev_result.bleu;
        rec.dev_delta_data = dev_result.delta.raw;
        ++result.evaluations;
        const bool improved = !plateau.has_best || dev_result.bleu > plateau.best;
        if (plateau.observe(dev_result.bleu, config.patience)) lr *= config.halving_factor;
        trainer.set_schedule(lr, plateau);
        const Checkpoint ck = trainer.checkpoint();
        if (improved) save_checkpoint(out_dir / "best.ckpt", ck);
        save_checkpoint(out_dir / "last.ckpt", ck);
        if (plateau.halvings >= config.max_halvings) {
          stop = true;
          result.stop_reason = "learning rate halved " + std::to_string(plateau.halvings) + " times";
        }
      }
      write_log_record(log, rec);
    }
  }
  if (result.stop_reason.empty()) result.stop_reason = "reached max epochs";
  if (result.evaluations == 0 || !std::filesystem::exists(out_dir / "best.ckpt")) {
    trainer.set_schedule(lr, plateau);
    const Checkpoint ck = trainer.checkpoint();
    save_checkpoint(out_dir / "best.ckpt", ck);
    save_checkpoint(out_dir / "last.ckpt", ck);
  }
  result.steps = trainer.state().step;
  result.best_bleu = plateau.has_best ? plateau.best : 0.0;
  result.final_lr = lr;
  result.halvings = plateau.halvings;
  log_info("training stopped: " + result.stop_reason);
  return result;
}

}  // namespace ctxreg
