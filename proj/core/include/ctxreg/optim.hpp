#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "ctxreg/model.hpp"

namespace ctxreg {

struct AdamHyper {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

/// First/second moments, one pair per parameter in store order.
struct AdamState {
  std::uint64_t step = 0;
  std::vector<Tensor> first;
  std::vector<Tensor> second;

  static AdamState for_params(const ParameterStore& params);
};

class NonFiniteGradient : public std::runtime_error {
 public:
  explicit NonFiniteGradient(const std::string& param)
      : std::runtime_error("non-finite gradient in parameter '" + param + "'"), param_(param) {}
  const std::string& param() const { return param_; }

 private:
  std::string param_;
};

/// One bias-corrected Adam update. Parameters without a gradient buffer are
/// treated as having a zero gradient. Throws NonFiniteGradient before
/// touching anything if any gradient is NaN/Inf.
void adam_step(ParameterStore& params, AdamState& state, double lr, const AdamHyper& hyper);

/// Global L2 norm of all gradients.
double gradient_norm(const ParameterStore& params);
/// Rescales gradients so their global norm is at most `max_norm`; returns the
/// norm before clipping.
double clip_gradients(ParameterStore& params, double max_norm);

/// Plateau bookkeeping: an evaluation improves only if it strictly exceeds
/// the best score seen so far. After `patience` consecutive non-improving
/// evaluations the rate is multiplied by `factor` and the counter restarts.
struct PlateauState {
  double best = -1.0;  // BLEU lies in [0, 100]
  bool has_best = false;
  std::size_t stagnant = 0;
  std::size_t halvings = 0;

  /// Feeds one evaluation; returns true when the rate should drop now.
  bool observe(double score, std::size_t patience);
};

/// Learning rate after replaying `history` (oldest first) from `initial_lr`.
double lr_schedule(const std::vector<double>& history, double initial_lr, std::size_t patience, double factor);

}  // namespace ctxreg
