#pragma once

#include <cstdint>
#include <iosfwd>

#include "ctxreg/model.hpp"
#include "ctxreg/scoring.hpp"

namespace ctxreg {

class KeyValueReader;

/// Strengths and margins of the three-level context regularizer. Margins
/// are on the natural-log scale.
struct RegConfig {
  double alpha_data = 1.0;
  double alpha_sent = 0.0;
  double alpha_tok = 1.0;
  double delta_data = 0.09531017980432486;  // log(1.1)
  double delta_sent = 0.0;
  double delta_tok = 0.0;
  std::size_t samples = 1;  // M

  static RegConfig disabled();
  bool enabled() const { return alpha_data > 0 || alpha_sent > 0 || alpha_tok > 0; }
  void validate() const;
  void write(std::ostream& out) const;
  static RegConfig read(KeyValueReader& kv);
  bool operator==(const RegConfig&) const = default;
};

/// Loss terms; the regularizer terms are unweighted and already divided by
/// the batch token count.
struct LossBreakdown {
  Tensor total;
  double nll = 0;
  double reg_data = 0;
  double reg_sent = 0;
  double reg_tok = 0;
  double total_value = 0;
};

struct RegTerms {
  Tensor data, sent, tok;  // scalars
};

/// Per-token mean negative log-likelihood under the true context.
Tensor nll(const ScoreBundle& bundle);

/// max(0, (margin - s_with) + s_without), evaluated in exactly that order.
Real hinge(Real margin, Real s_with, Real s_without);
/// Elementwise hinge with a scalar margin.
Tensor hinge(Real margin, const Tensor& s_with, const Tensor& s_without);

/// Data-, sentence- and token-level margin-ranking terms, each divided by
/// sum_n T_n. All zero (with a warning) when the bundle has no context-less
/// scores.
RegTerms context_regularizer(const ScoreBundle& bundle, const RegConfig& cfg);

/// nll + alpha_d * reg_data + alpha_s * reg_sent + alpha_tok * reg_tok.
LossBreakdown combine_loss(const Tensor& nll_term, const RegTerms& reg, const RegConfig& cfg);

struct LossOptions {
  RegConfig reg = RegConfig::disabled();
  ContextChoice base = ContextChoice::kTrue;
  bool detach_contextless = false;
  std::uint64_t seed = 0;  // for M > 1 substitutions
};

/// Runs the forward passes (true and substituted context when the
/// regularizer is on) and combines them into the training loss.
LossBreakdown total_loss(const ContextTransformer& model, const PaddedBatch& batch, const LossOptions& options);

}  // namespace ctxreg
