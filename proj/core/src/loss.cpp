#include "ctxreg/loss.hpp"

#include <ostream>

#include "ctxreg/keyvalue.hpp"
#include "ctxreg/log.hpp"
#include "ctxreg/ops.hpp"

namespace ctxreg {

RegConfig RegConfig::disabled() {
  RegConfig c;
  c.alpha_data = c.alpha_sent = c.alpha_tok = 0.0;
  return c;
}

void RegConfig::validate() const {
  if (alpha_data < 0 || alpha_sent < 0 || alpha_tok < 0) throw ConfigError("reg: alphas must be >= 0");
  if (delta_data < 0 || delta_sent < 0 || delta_tok < 0) throw ConfigError("reg: margins must be >= 0");
  if (samples < 1) throw ConfigError("reg: samples (M) must be >= 1");
}

void RegConfig::write(std::ostream& out) const {
  out << "reg.alpha_data = " << format_exact(alpha_data) << '\n'
      << "reg.alpha_sent = " << format_exact(alpha_sent) << '\n'
      << "reg.alpha_tok = " << format_exact(alpha_tok) << '\n'
      << "reg.delta_data = " << format_exact(delta_data) << '\n'
      << "reg.delta_sent = " << format_exact(delta_sent) << '\n'
      << "reg.delta_tok = " << format_exact(delta_tok) << '\n'
      << "reg.samples = " << samples << '\n';
}

RegConfig RegConfig::read(KeyValueReader& kv) {
  RegConfig c;
  c.alpha_data = kv.get_double("reg.alpha_data");
  c.alpha_sent = kv.get_double("reg.alpha_sent");
  c.alpha_tok = kv.get_double("reg.alpha_tok");
  c.delta_data = kv.get_double("reg.delta_data");
  c.delta_sent = kv.get_double("reg.delta_sent");
  c.delta_tok = kv.get_double("reg.delta_tok");
  c.samples = kv.get_uint("reg.samples");
  c.validate();
  return c;
}

Tensor nll(const ScoreBundle& bundle) {
  const Real inv_tokens = Real(1) / static_cast<Real>(bundle.total_tokens());
  return ops::scale(bundle.data_true, -inv_tokens);
}

Real hinge(Real margin, Real s_with, Real s_without) {
  const Real v = (margin - s_with) + s_without;
  return v > Real(0) ? v : Real(0);
}

Tensor hinge(Real margin, const Tensor& s_with, const Tensor& s_without) {
  // (-s_with + margin) is bitwise equal to (margin - s_with).
  return ops::hinge(ops::add(ops::scale(s_with, Real(-1), margin), s_without));
}

RegTerms context_regularizer(const ScoreBundle& bundle, const RegConfig& cfg) {
  RegTerms terms;
  if (!bundle.has_contextless) {
    log_warning("batch without a context substitution (size 1): regularizer terms skipped");
    terms.data = terms.sent = terms.tok = Tensor::scalar(Real(0));
    return terms;
  }
  const std::size_t total = bundle.total_tokens();
  const Real inv_tokens = Real(1) / static_cast<Real>(total);

  const Real data_margin = static_cast<Real>(total) * static_cast<Real>(cfg.delta_data);
  terms.data = ops::scale(hinge(data_margin, bundle.data_true, bundle.data_contextless), inv_tokens);

  std::vector<Real> sent_margins(bundle.lengths.size());
  for (std::size_t n = 0; n < sent_margins.size(); ++n) {
    sent_margins[n] = static_cast<Real>(bundle.lengths[n]) * static_cast<Real>(cfg.delta_sent);
  }
  const std::size_t rows = sent_margins.size();
  Tensor margins = Tensor::from({rows}, std::move(sent_margins));
  Tensor sent = ops::hinge(ops::add(ops::add(ops::scale(bundle.sent_true, Real(-1)), margins), bundle.sent_contextless));
  terms.sent = ops::scale(ops::sum(sent), inv_tokens);

  Tensor tok = hinge(static_cast<Real>(cfg.delta_tok), bundle.token_true, bundle.token_contextless);
  terms.tok = ops::scale(ops::sum(ops::masked_fill(tok, bundle.pad_mask, Real(0))), inv_tokens);
  return terms;
}

LossBreakdown combine_loss(const Tensor& nll_term, const RegTerms& reg, const RegConfig& cfg) {
  LossBreakdown out;
  out.nll = static_cast<double>(nll_term.item());
  out.reg_data = static_cast<double>(reg.data.item());
  out.reg_sent = static_cast<double>(reg.sent.item());
  out.reg_tok = static_cast<double>(reg.tok.item());
  Tensor total = nll_term;
  const std::pair<double, const Tensor*> weighted[] = {
      {cfg.alpha_data, &reg.data}, {cfg.alpha_sent, &reg.sent}, {cfg.alpha_tok, &reg.tok}};
  for (const auto& [alpha, term] : weighted) {
    if (alpha != 0.0) total = ops::add(total, ops::scale(*term, static_cast<Real>(alpha)));
  }
  out.total = total;
  out.total_value = static_cast<double>(total.item());
  return out;
}

LossBreakdown total_loss(const ContextTransformer& model, const PaddedBatch& batch, const LossOptions& options) {
  ScoreOptions so;
  so.base = options.base;
  so.with_contextless = options.reg.enabled();
  so.samples = options.reg.samples;
  so.seed = options.seed;
  so.detach_contextless = options.detach_contextless;
  const ScoreBundle bundle = score_batch(model, batch, so);
  RegTerms reg;
  if (options.reg.enabled()) {
    reg = context_regularizer(bundle, options.reg);
  } else {
    reg.data = reg.sent = reg.tok = Tensor::scalar(Real(0));
  }
  return combine_loss(nll(bundle), reg, options.reg);
}

}  // namespace ctxreg
