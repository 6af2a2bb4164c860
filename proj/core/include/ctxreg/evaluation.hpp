#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <iosfwd>
#include <span>
#include <vector>

#include "ctxreg/data.hpp"
#include "ctxreg/model.hpp"

namespace ctxreg {

// ---------------------------------------------------------------------------
// Decoding

struct DecodeConfig {
  enum class Mode { kGreedy, kBeam };
  Mode mode = Mode::kBeam;
  std::size_t beam = 5;
  double length_alpha = 0.6;
  /// 0 means 2 * |X| + 5.
  std::size_t max_length = 0;

  void validate() const;
  std::size_t limit_for(std::size_t source_length) const;
};

/// ((5 + length) / 6) ^ alpha
double length_penalty(std::size_t length, double alpha);

struct Hypothesis {
  Sequence tokens;       // generated tokens, EOS excluded
  double logprob = 0;    // sum of step log-probabilities, EOS included
  double score = 0;      // logprob / length_penalty(generated length incl. EOS)
  bool finished = false; // false when truncated at the length limit
};

/// Log-probability rows for a set of prefixes (each starting with BOS).
using StepScorer = std::function<std::vector<std::vector<double>>(const std::vector<Sequence>& prefixes)>;

/// Argmax per step (lowest id wins ties) until EOS or `max_length` tokens.
Hypothesis greedy_search(const StepScorer& scorer, std::size_t max_length, std::span<const TokenId> banned);

/// Beam search returning the best finished hypothesis by length-adjusted
/// score. Candidates are ranked by cumulative log-probability (stable ties);
/// the greedy path is always among the final candidates. With no finished
/// hypothesis, the best truncated one is returned with finished == false.
Hypothesis beam_search(const StepScorer& scorer, const DecodeConfig& cfg, std::size_t max_length,
                       std::span<const TokenId> banned);

/// Ids never generated by the model decoders (PAD and BOS).
std::span<const TokenId> decoder_banned_ids();

StepScorer model_scorer(const ContextTransformer& model, const Sequence& source, const Sequence& context);

/// Batched greedy decoding of every example (context taken from `contexts[i]`).
std::vector<Hypothesis> greedy_decode(const ContextTransformer& model, const std::vector<const Sequence*>& sources,
                                      const std::vector<const Sequence*>& contexts, const DecodeConfig& cfg,
                                      std::size_t batch_size = 64);
Hypothesis beam_decode(const ContextTransformer& model, const Sequence& source, const Sequence& context,
                       const DecodeConfig& cfg);
/// Greedy or beam per cfg.mode; beam size 1 takes the greedy path.
std::vector<Sequence> decode_all(const ContextTransformer& model, const std::vector<const Sequence*>& sources,
                                 const std::vector<const Sequence*>& contexts, const DecodeConfig& cfg);

// ---------------------------------------------------------------------------
// BLEU

/// Clipped n-gram statistics (n = 1..4) accumulated over a corpus.
struct BleuStats {
  std::array<std::uint64_t, 4> matches{};
  std::array<std::uint64_t, 4> totals{};
  std::uint64_t hyp_length = 0;
  std::uint64_t ref_length = 0;

  void add(std::span<const TokenId> hypothesis, std::span<const TokenId> reference);
  void merge(const BleuStats& other);
  /// Corpus BLEU in [0, 100]. `smooth` adds one to zero counts.
  double score(bool smooth = false) const;
};

double bleu(const std::vector<Sequence>& hypotheses, const std::vector<Sequence>& references, bool smooth = false);

// ---------------------------------------------------------------------------
// Context sensitivity

/// Contexts of `data` reordered by `perm` (example i receives context perm[i]).
std::vector<const Sequence*> substituted_contexts(const Corpus& data, const std::vector<std::size_t>& perm);
std::vector<const Sequence*> true_contexts(const Corpus& data);
std::vector<const Sequence*> sources_of(const Corpus& data);
std::vector<Sequence> references_of(const Corpus& data);

/// Corpus-scope derangement for shuffle r: drawn from seed + r.
std::vector<std::size_t> corpus_derangement(std::size_t n, std::uint64_t seed);

/// Sentence-level scores, true context and context-less estimate.
struct SentenceScores {
  std::vector<std::size_t> lengths;
  std::vector<double> with_context;
  std::vector<double> contextless;
};

/// Teacher-forced sentence scores for `data` under the given contexts, plus
/// the context-less estimate from M corpus-scope derangements
/// (perm_m = corpus_derangement(N, seed + m)) combined per token by log-mean-exp.
SentenceScores sentence_scores_dataset(const ContextTransformer& model, const Corpus& data,
                                       const std::vector<const Sequence*>& contexts, std::size_t samples,
                                       std::uint64_t seed, std::size_t batch_size = 64);

struct IntrinsicDelta {
  double raw = 0;        // s_data(Y|X,C) - s_data(Y|X)
  double per_token = 0;  // raw / sum_n T_n
  std::size_t tokens = 0;
};

IntrinsicDelta delta_from_scores(const SentenceScores& scores);
IntrinsicDelta intrinsic_delta(const ContextTransformer& model, const Corpus& data, std::size_t samples,
                               std::uint64_t seed);

struct DeltaBleu {
  double bleu_true = 0;
  std::vector<double> bleu_substituted;
  double bleu_substituted_mean = 0;
  double delta = 0;
};

/// Running mean that stays exact when all values are equal.
double stable_mean(std::span<const double> values);

DeltaBleu delta_bleu(const ContextTransformer& model, const Corpus& data, std::size_t shuffles, std::uint64_t seed,
                     const DecodeConfig& cfg);

/// Teacher-forced argmax accuracy at positions whose reference token is
/// flagged in `target_flags`.
struct PositionAccuracy {
  std::size_t correct = 0;
  std::size_t total = 0;
  double rate() const { return total ? double(correct) / double(total) : 0.0; }
};
PositionAccuracy flagged_accuracy(const ContextTransformer& model, const Corpus& data,
                                  const std::vector<const Sequence*>& contexts,
                                  const std::vector<std::uint8_t>& target_flags, std::size_t batch_size = 64);

// ---------------------------------------------------------------------------
// Cumulative analysis

struct CurveRow {
  std::size_t rank = 0;
  std::size_t sentence = 0;
  double score_diff = 0;
  double cumulative_true = 0;
  double cumulative_substituted = 0;  // mean over shuffles
};

/// Sentences sorted by descending score difference (stable), with corpus
/// BLEU of each prefix for true-context and substituted-context decodes.
std::vector<CurveRow> cumulative_curve(const std::vector<double>& score_diff, const std::vector<Sequence>& references,
                                       const std::vector<Sequence>& hyp_true,
                                       const std::vector<std::vector<Sequence>>& hyp_substituted);

/// BLEU gap (true minus mean substituted) restricted to a set of sentences.
double subset_gap(const std::vector<std::size_t>& sentences, const std::vector<Sequence>& references,
                  const std::vector<Sequence>& hyp_true, const std::vector<std::vector<Sequence>>& hyp_substituted);

// ---------------------------------------------------------------------------
// Full report

struct EvalOptions {
  DecodeConfig decode;
  std::size_t shuffles = 3;  // R
  std::size_t samples = 1;   // M
  std::uint64_t seed = 0;
  /// Feed substituted contexts on the "normal" side as well (random-context baseline).
  bool random_context_model = false;
  std::vector<std::uint8_t> ambiguous_flags;  // optional, indexed by target id
};

struct EvalReport {
  double bleu_normal = 0;
  std::vector<double> bleu_substituted;
  double bleu_substituted_mean = 0;
  double delta_bleu = 0;
  IntrinsicDelta delta_data;
  SentenceScores scores;
  std::vector<CurveRow> curve;
  double top_quartile_gap = 0;
  double bottom_quartile_gap = 0;
  PositionAccuracy ambiguous_true;
  PositionAccuracy ambiguous_substituted;
  std::size_t sentences = 0;
  std::size_t truncated = 0;
};

EvalReport evaluate(const ContextTransformer& model, const Corpus& data, const EvalOptions& options);

/// Key/value block.
void write_report(std::ostream& out, const EvalReport& report, const EvalOptions& options);
/// index, T_n, s_sent true-context, s_sent context-less (tab-separated).
void write_score_dump(std::ostream& out, const SentenceScores& scores);
/// rank, score-diff, cumulative BLEU true, cumulative BLEU substituted.
void write_curve(std::ostream& out, const std::vector<CurveRow>& curve);
/// Per-sentence table: index, T_n, s_true, s_contextless, difference.
void write_sentence_table(std::ostream& out, const SentenceScores& scores);

/// Parses a score dump written by write_score_dump.
SentenceScores read_score_dump(std::istream& in);

}  // namespace ctxreg
