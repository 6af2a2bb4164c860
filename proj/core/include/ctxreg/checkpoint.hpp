#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "ctxreg/model.hpp"
#include "ctxreg/optim.hpp"

namespace ctxreg {

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Trainer bookkeeping carried alongside the weights so a run can resume.
struct TrainerState {
  std::uint64_t step = 0;
  std::uint64_t epoch = 0;
  double lr = 0;
  PlateauState plateau;
  bool operator==(const TrainerState& o) const {
    return step == o.step && epoch == o.epoch && lr == o.lr && plateau.best == o.plateau.best &&
           plateau.has_best == o.plateau.has_best && plateau.stagnant == o.plateau.stagnant &&
           plateau.halvings == o.plateau.halvings;
  }
};

/// Binary checkpoint, little-endian throughout:
///
///   magic      8 bytes  "CTXREGCK"
///   version    u32      kCheckpointVersion
///   real_bytes u32      4 (32-bit profile) or 8 (64-bit profile)
///   config     u64 length + UTF-8 `model.*` key/value text
///   params     u64 count, then per tensor:
///                u32 name length, name bytes, u32 rank, u64 dims[rank],
///                raw element values (real_bytes each)
///   optimizer  u8 present flag; if 1: u64 step, then first and second
///              moments per parameter (raw values, parameter order)
///   trainer    u64 length + key/value text (step, epoch, lr, plateau state)
struct Checkpoint {
  static constexpr std::uint32_t kVersion = 1;

  ModelConfig config;
  std::vector<std::pair<std::string, Tensor>> params;
  std::optional<AdamState> optimizer;
  TrainerState trainer;
};

Checkpoint capture_checkpoint(const ContextTransformer& model, const AdamState* optimizer, const TrainerState& trainer);
void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& path);

/// Model with the checkpoint's configuration and weights.
std::unique_ptr<ContextTransformer> restore_model(const Checkpoint& ckpt);
/// Copies checkpoint weights into an existing model of matching layout.
void load_weights(ContextTransformer& model, const Checkpoint& ckpt);

}  // namespace ctxreg
