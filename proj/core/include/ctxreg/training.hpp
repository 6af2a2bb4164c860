#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "ctxreg/checkpoint.hpp"
#include "ctxreg/data.hpp"
#include "ctxreg/evaluation.hpp"
#include "ctxreg/loss.hpp"
#include "ctxreg/model.hpp"
#include "ctxreg/optim.hpp"

namespace ctxreg {

enum class Variant { kA, kB, kC, kD };
std::string to_string(Variant v);
Variant parse_variant(const std::string& text);

struct TrainConfig {
  double step_size = 1e-4;
  AdamHyper adam;
  std::size_t batch_size = 32;
  std::size_t max_epochs = 20;
  std::size_t evals_per_epoch = 2;
  std::size_t patience = 5;
  double halving_factor = 0.5;
  std::size_t max_halvings = 6;
  double clip_norm = 1.0;  // 0 disables clipping
  std::uint64_t seed = 1;
  Variant variant = Variant::kD;
  bool detach_contextless = false;
  ModelConfig model;
  RegConfig reg;

  void validate() const;
  /// Writes every `train.*`, `model.*` and `reg.*` key.
  void write(std::ostream& out) const;
  /// Every key is required; unknown keys are errors.
  static TrainConfig parse(std::istream& in, const std::string& source_name = "<config>");
  static TrainConfig read(const std::filesystem::path& path);

  /// Model and regularizer settings after applying the variant wiring.
  ModelConfig effective_model() const;
  RegConfig effective_reg() const;
  /// Context fed as the "true" context during training and evaluation.
  ContextChoice base_context() const;
};

class TrainingDiverged : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct TrainLogRecord {
  std::uint64_t step = 0;
  double epoch = 0;
  double lr = 0;
  LossBreakdown loss;
  std::optional<double> dev_bleu;
  std::optional<double> dev_delta_data;
};

void write_log_header(std::ostream& out);
void write_log_record(std::ostream& out, const TrainLogRecord& rec);

/// Step-level trainer. Batch order, dropout masks and substitution draws are
/// functions of (seed, step), so a run restored from a checkpoint continues
/// exactly where it stopped.
class Trainer {
 public:
  Trainer(const TrainConfig& config, const Corpus& train, const Corpus& dev);

  ContextTransformer& model() { return *model_; }
  const ContextTransformer& model() const { return *model_; }
  const TrainConfig& config() const { return config_; }
  const TrainerState& state() const { return state_; }
  const AdamState& optimizer() const { return adam_; }
  std::size_t batches_per_epoch() const { return batches_per_epoch_; }

  /// Batch consumed by the optimizer step number `step` (0-based).
  PaddedBatch batch_for_step(std::uint64_t step) const;
  /// Loss of `batch` with the dropout/substitution streams of `step`,
  /// without updating anything.
  LossBreakdown loss_at(const PaddedBatch& batch, std::uint64_t step);
  /// One optimizer step on the next batch.
  LossBreakdown step();
  /// Records the schedule's current rate and plateau bookkeeping.
  void set_schedule(double lr, const PlateauState& plateau);

  struct DevResult {
    double bleu = 0;
    IntrinsicDelta delta;
  };
  DevResult evaluate_dev() const;

  Checkpoint checkpoint() const;
  void restore(const Checkpoint& ckpt);

 private:
  TrainConfig config_;
  const Corpus& train_;
  const Corpus& dev_;
  std::unique_ptr<ContextTransformer> model_;
  AdamState adam_;
  TrainerState state_;
  std::size_t batches_per_epoch_ = 0;
};

struct TrainResult {
  std::uint64_t steps = 0;
  std::size_t evaluations = 0;
  double best_bleu = 0;
  double final_lr = 0;
  std::size_t halvings = 0;
  std::string stop_reason;
};

/// Full protocol: Adam steps, dev evaluation at the first batch boundary at
/// or after each 1/evals_per_epoch mark, plateau halving, best.ckpt on every
/// improvement, last.ckpt after every evaluation, and train.log. Stops after
/// max_epochs or max_halvings halvings.
TrainResult train(const TrainConfig& config, const Corpus& train, const Corpus& dev,
                  const std::filesystem::path& out_dir);

}  // namespace ctxreg
