#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "ctxreg/data.hpp"
#include "ctxreg/model.hpp"
#include "ctxreg/tensor.hpp"

namespace ctxreg {

/// Token, sentence and data scores under the true context and under the
/// context-less estimate. Token tensors are [B, T] with zeros at PAD; the
/// sentence tensor is [B]; the data scores are scalars.
struct ScoreBundle {
  Tensor token_true;
  Tensor sent_true;
  Tensor data_true;
  Tensor token_contextless;
  Tensor sent_contextless;
  Tensor data_contextless;
  std::vector<std::size_t> lengths;
  std::vector<std::uint8_t> pad_mask;  // [B, T], 1 at PAD
  bool has_contextless = false;

  std::size_t total_tokens() const;
};

struct ContextLessEstimate {
  Tensor token_scores;  // [B, T]
  std::size_t samples = 1;
};

/// s_tok: reference-token log-probabilities gathered from [B, T, V].
Tensor token_scores(const Tensor& logprobs, const PaddedBatch& batch);
/// s_sent(n) = sum_t s_tok(n, t), summed in position order.
Tensor sentence_scores(const Tensor& token_scores);
/// s_data = sum_n s_sent(n), summed in example order.
Tensor data_score(const Tensor& sentence_scores);

/// log((1/M) sum_m exp(v_m)), stable for any finite inputs.
double log_mean_exp(std::span<const double> values);

/// Derangements used for M samples: the batch's own permutation first, then
/// M - 1 further distinct derangements drawn from `seed`. Throws when fewer
/// than M distinct derangements exist.
std::vector<std::vector<std::size_t>> substitution_permutations(const PaddedBatch& batch, std::size_t samples,
                                                                 std::uint64_t seed);

/// Context-less token scores by context substitution: for M = 1 the batch's
/// derangement; for M > 1 a per-position log-mean-exp over M derangements.
ContextLessEstimate contextless_scores(const ContextTransformer& model, const PaddedBatch& batch,
                                       std::size_t samples, std::uint64_t seed);

struct ScoreOptions {
  /// Context used for the "true" scores; kShuffled trains on random context.
  ContextChoice base = ContextChoice::kTrue;
  bool with_contextless = true;
  std::size_t samples = 1;
  std::uint64_t seed = 0;
  /// Stop gradients through the substituted-context branch.
  bool detach_contextless = false;
};

/// Full bundle for one batch. Source and context are each encoded once; the
/// substituted context reuses the encoded rows under the batch permutation.
ScoreBundle score_batch(const ContextTransformer& model, const PaddedBatch& batch, const ScoreOptions& options);

/// Assembles a bundle from precomputed token tensors (sentence and data
/// levels are derived by summation).
ScoreBundle make_bundle(Tensor token_true, Tensor token_contextless, std::vector<std::size_t> lengths,
                        std::vector<std::uint8_t> pad_mask);

}  // namespace ctxreg
