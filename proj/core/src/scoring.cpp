#include "ctxreg/scoring.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>
#include <stdexcept>

#include "ctxreg/ops.hpp"

namespace ctxreg {

std::size_t ScoreBundle::total_tokens() const {
  return std::accumulate(lengths.begin(), lengths.end(), std::size_t{0});
}

Tensor token_scores(const Tensor& logprobs, const PaddedBatch& batch) {
  return ContextTransformer::gather_reference(logprobs, batch);
}

Tensor sentence_scores(const Tensor& token_scores) { return ops::sum_last(token_scores); }

Tensor data_score(const Tensor& sentence_scores) { return ops::sum(sentence_scores); }

double log_mean_exp(std::span<const double> values) {
  if (values.empty()) throw std::invalid_argument("log_mean_exp: no values");
  const double mx = *std::max_element(values.begin(), values.end());
  double acc = 0;
  for (double v : values) acc += std::exp(v - mx);
  return mx + std::log(acc / double(values.size()));
}

std::vector<std::vector<std::size_t>> substitution_permutations(const PaddedBatch& batch, std::size_t samples,
                                                                 std::uint64_t seed) {
  if (samples < 1) throw std::invalid_argument("context-less estimate needs M >= 1");
  if (!batch.has_derangement) throw std::invalid_argument("context-less estimate needs a batch of size >= 2");
  if (derangement_count(batch.size()) < samples) {
    throw std::invalid_argument("M = " + std::to_string(samples) + " exceeds the " +
                                std::to_string(derangement_count(batch.size())) +
                                " distinct context substitutions available for a batch of " +
                                std::to_string(batch.size()));
  }
  std::vector<std::vector<std::size_t>> perms{batch.perm};
  std::set<std::vector<std::size_t>> seen{batch.perm};
  std::mt19937_64 rng = derive_rng(seed, 0x5ca1ab1eULL);
  while (perms.size() < samples) {
    auto p = random_derangement(batch.size(), rng);
    if (seen.insert(p).second) perms.push_back(std::move(p));
  }
  return perms;
}

namespace {

std::vector<std::uint8_t> pad_mask_of(const PaddedBatch& batch) {
  std::vector<std::uint8_t> pad(batch.target_out.mask.size());
  for (std::size_t i = 0; i < pad.size(); ++i) pad[i] = batch.target_out.mask[i] ? 0 : 1;
  return pad;
}

// Token scores with the context rows of `encoded_context` taken in `perm` order.
Tensor substituted_scores(const ContextTransformer& model, const PaddedBatch& batch, const Tensor& source,
                          const Tensor& encoded_context, const std::vector<std::size_t>& perm) {
  const IdMatrix ctx = permute_rows(batch.context, perm);
  Tensor memory = model.merge(source, ops::index_rows(encoded_context, perm), ctx);
  return token_scores(model.decode(batch.target_in, memory, batch.source), batch);
}

}  // namespace

ContextLessEstimate contextless_scores(const ContextTransformer& model, const PaddedBatch& batch,
                                       std::size_t samples, std::uint64_t seed) {
  const auto perms = substitution_permutations(batch, samples, seed);
  ContextLessEstimate est;
  est.samples = samples;
  if (!model.uses_context()) {
    Tensor tok = model.forward_batch(batch, ContextChoice::kNone);
    est.token_scores = samples == 1 ? tok : ops::log_mean_exp(std::vector<Tensor>(samples, tok));
    return est;
  }
  Tensor source = model.encode_source(batch.source);
  Tensor context = model.encode_context(batch.context);
  std::vector<Tensor> per_sample;
  for (const auto& p : perms) per_sample.push_back(substituted_scores(model, batch, source, context, p));
  est.token_scores = samples == 1 ? per_sample.front() : ops::log_mean_exp(per_sample);
  return est;
}

ScoreBundle make_bundle(Tensor token_true, Tensor token_contextless, std::vector<std::size_t> lengths,
                        std::vector<std::uint8_t> pad_mask) {
  ScoreBundle b;
  b.token_true = std::move(token_true);
  b.sent_true = sentence_scores(b.token_true);
  b.data_true = data_score(b.sent_true);
  if (token_contextless.defined()) {
    b.token_contextless = std::move(token_contextless);
    b.sent_contextless = sentence_scores(b.token_contextless);
    b.data_contextless = data_score(b.sent_contextless);
    b.has_contextless = true;
  }
  b.lengths = std::move(lengths);
  b.pad_mask = std::move(pad_mask);
  return b;
}

ScoreBundle score_batch(const ContextTransformer& model, const PaddedBatch& batch, const ScoreOptions& options) {
  const bool want_contextless = options.with_contextless && batch.has_derangement;
  Tensor token_true, token_less;
  if (!model.uses_context()) {
    token_true = model.forward_batch(batch, ContextChoice::kNone);
    if (want_contextless) {
      token_less = options.samples == 1 ? token_true
                                        : contextless_scores(model, batch, options.samples, options.seed).token_scores;
    }
  } else {
    Tensor source = model.encode_source(batch.source);
    Tensor context = model.encode_context(batch.context);
    // Every pass below shares one set of dropout masks, so the true and
    // substituted scores differ only through the context.
    const auto masks = model.dropout_state();
    if (options.base == ContextChoice::kShuffled) {
      token_true = substituted_scores(model, batch, source, context, batch.perm);
    } else if (options.base == ContextChoice::kTrue) {
      token_true = token_scores(model.decode(batch.target_in, model.merge(source, context, batch.context), batch.source),
                                batch);
    } else {
      model.memory(batch, ContextChoice::kNone);  // raises the unsupported-mode error
    }
    if (want_contextless) {
      std::vector<Tensor> per_sample;
      for (const auto& p : substitution_permutations(batch, options.samples, options.seed)) {
        model.restore_dropout_state(masks);
        per_sample.push_back(substituted_scores(model, batch, source, context, p));
      }
      token_less = options.samples == 1 ? per_sample.front() : ops::log_mean_exp(per_sample);
    }
  }
  if (token_less.defined() && options.detach_contextless) token_less = token_less.detach();
  return make_bundle(std::move(token_true), std::move(token_less), batch.lengths, pad_mask_of(batch));
}

}  // namespace ctxreg
