#include "ctxreg/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <istream>
#include <map>
#include <numeric>
#include <ostream>
#include <sstream>
#include <stdexcept>

#include "ctxreg/ops.hpp"
#include "ctxreg/scoring.hpp"

namespace ctxreg {

void DecodeConfig::validate() const {
  if (beam < 1) throw std::invalid_argument("decode: beam must be >= 1");
  if (length_alpha < 0) throw std::invalid_argument("decode: length exponent must be >= 0");
}

std::size_t DecodeConfig::limit_for(std::size_t source_length) const {
  return max_length ? max_length : 2 * source_length + 5;
}

double length_penalty(std::size_t length, double alpha) {
  return std::pow((5.0 + double(length)) / 6.0, alpha);
}

namespace {

bool is_banned(TokenId v, std::span<const TokenId> banned) {
  return std::find(banned.begin(), banned.end(), v) != banned.end();
}

Hypothesis finalize(Sequence tokens, double logprob, bool finished, double alpha) {
  Hypothesis h;
  h.logprob = logprob;
  h.finished = finished;
  const std::size_t len = tokens.size() + (finished ? 1 : 0);
  h.score = logprob / length_penalty(len, alpha);
  h.tokens = std::move(tokens);
  return h;
}

}  // namespace

std::span<const TokenId> decoder_banned_ids() {
  static constexpr TokenId kBanned[] = {Vocabulary::kPad, Vocabulary::kBos};
  return kBanned;
}

Hypothesis greedy_search(const StepScorer& scorer, std::size_t max_length, std::span<const TokenId> banned) {
  Sequence prefix{Vocabulary::kBos};
  double logprob = 0;
  for (std::size_t t = 0; t < max_length; ++t) {
    const auto rows = scorer({prefix});
    const auto& row = rows.front();
    TokenId best = -1;
    for (std::size_t v = 0; v < row.size(); ++v) {
      if (is_banned(static_cast<TokenId>(v), banned)) continue;
      if (best < 0 || row[v] > row[static_cast<std::size_t>(best)]) best = static_cast<TokenId>(v);
    }
    logprob += row[static_cast<std::size_t>(best)];
    if (best == Vocabulary::kEos) return finalize(Sequence(prefix.begin() + 1, prefix.end()), logprob, true, 0.0);
    prefix.push_back(best);
  }
  return finalize(Sequence(prefix.begin() + 1, prefix.end()), logprob, false, 0.0);
}

Hypothesis beam_search(const StepScorer& scorer, const DecodeConfig& cfg, std::size_t max_length,
                       std::span<const TokenId> banned) {
  cfg.validate();
  struct Live {
    Sequence prefix;
    double logprob;
  };
  struct Candidate {
    double logprob;
    double step;
    std::size_t parent;
    TokenId token;
  };
  std::vector<Live> live{{Sequence{Vocabulary::kBos}, 0.0}};
  std::vector<Hypothesis> pool;
  for (std::size_t t = 0; t < max_length && !live.empty(); ++t) {
    std::vector<Sequence> prefixes;
    for (const auto& h : live) prefixes.push_back(h.prefix);
    const auto rows = scorer(prefixes);
    std::vector<Candidate> cand;
    for (std::size_t i = 0; i < live.size(); ++i) {
      for (std::size_t v = 0; v < rows[i].size(); ++v) {
        if (is_banned(static_cast<TokenId>(v), banned)) continue;
        cand.push_back({live[i].logprob + rows[i][v], rows[i][v], i, static_cast<TokenId>(v)});
      }
    }
    // Ties on the cumulative score fall back to the step score, so a single
    // parent ranks its tokens exactly as greedy argmax would.
    std::stable_sort(cand.begin(), cand.end(), [](const Candidate& a, const Candidate& b) {
      if (a.logprob != b.logprob) return a.logprob > b.logprob;
      return a.step > b.step;
    });
    if (cand.size() > cfg.beam) cand.resize(cfg.beam);
    std::vector<Live> next;
    for (const auto& c : cand) {
      const Sequence& parent = live[c.parent].prefix;
      if (c.token == Vocabulary::kEos) {
        pool.push_back(finalize(Sequence(parent.begin() + 1, parent.end()), c.logprob, true, cfg.length_alpha));
      } else {
        Sequence p = parent;
        p.push_back(c.token);
        next.push_back({std::move(p), c.logprob});
      }
    }
    live = std::move(next);
  }
  std::vector<Hypothesis> truncated;
  for (const auto& h : live) {
    truncated.push_back(finalize(Sequence(h.prefix.begin() + 1, h.prefix.end()), h.logprob, false, cfg.length_alpha));
  }
  Hypothesis greedy = greedy_search(scorer, max_length, banned);
  greedy = finalize(std::move(greedy.tokens), greedy.logprob, greedy.finished, cfg.length_alpha);
  (greedy.finished ? pool : truncated).push_back(std::move(greedy));

  const auto& from = pool.empty() ? truncated : pool;
  const Hypothesis* best = &from.front();
  for (const auto& h : from) {
    if (h.score > best->score) best = &h;
  }
  return *best;
}

namespace {

IdMatrix pad_rows(const std::vector<const Sequence*>& seqs) { return pad_sequences(seqs, true); }

Tensor memory_for(const ContextTransformer& model, const IdMatrix& src, const IdMatrix& ctx) {
  Tensor x = model.encode_source(src);
  if (!model.uses_context()) return model.merge_without_context(x);
  return model.merge(x, model.encode_context(ctx), ctx);
}

}  // namespace

StepScorer model_scorer(const ContextTransformer& model, const Sequence& source, const Sequence& context) {
  NoGradGuard guard;
  const IdMatrix src = pad_rows({&source});
  const IdMatrix ctx = pad_rows({&context});
  Tensor memory = memory_for(model, src, ctx);
  return [&model, src, memory](const std::vector<Sequence>& prefixes) {
    NoGradGuard inner;
    std::vector<const Sequence*> ptrs;
    for (const auto& p : prefixes) ptrs.push_back(&p);
    const IdMatrix tin = pad_sequences(ptrs, false);
    std::vector<std::size_t> zeros(prefixes.size(), 0);
    const IdMatrix srcs = permute_rows(src, zeros);
    Tensor lp = model.decode_step(tin, ops::index_rows(memory, zeros), srcs);
    const std::size_t vocab = lp.dim(1);
    std::vector<std::vector<double>> rows(prefixes.size(), std::vector<double>(vocab));
    for (std::size_t r = 0; r < prefixes.size(); ++r) {
      for (std::size_t v = 0; v < vocab; ++v) rows[r][v] = static_cast<double>(lp.ptr()[r * vocab + v]);
    }
    return rows;
  };
}

std::vector<Hypothesis> greedy_decode(const ContextTransformer& model, const std::vector<const Sequence*>& sources,
                                      const std::vector<const Sequence*>& contexts, const DecodeConfig& cfg,
                                      std::size_t batch_size) {
  if (sources.size() != contexts.size()) throw std::invalid_argument("greedy_decode: sources/contexts size mismatch");
  NoGradGuard guard;
  const auto banned = decoder_banned_ids();
  std::vector<Hypothesis> out(sources.size());
  for (std::size_t start = 0; start < sources.size(); start += batch_size) {
    const std::size_t end = std::min(sources.size(), start + batch_size);
    const std::size_t rows = end - start;
    std::vector<const Sequence*> src_chunk(sources.begin() + static_cast<std::ptrdiff_t>(start),
                                           sources.begin() + static_cast<std::ptrdiff_t>(end));
    std::vector<const Sequence*> ctx_chunk(contexts.begin() + static_cast<std::ptrdiff_t>(start),
                                           contexts.begin() + static_cast<std::ptrdiff_t>(end));
    const IdMatrix src = pad_rows(src_chunk);
    Tensor memory = memory_for(model, src, pad_rows(ctx_chunk));
    std::vector<Sequence> prefix(rows, Sequence{Vocabulary::kBos});
    std::vector<double> logprob(rows, 0.0);
    std::vector<std::uint8_t> done(rows, 0), finished(rows, 0);
    std::vector<std::size_t> limit(rows);
    std::size_t max_limit = 0;
    for (std::size_t r = 0; r < rows; ++r) {
      limit[r] = cfg.limit_for(src_chunk[r]->size());
      max_limit = std::max(max_limit, limit[r]);
      if (limit[r] == 0) done[r] = 1;
    }
    for (std::size_t t = 0; t < max_limit; ++t) {
      if (std::all_of(done.begin(), done.end(), [](std::uint8_t d) { return d != 0; })) break;
      std::vector<const Sequence*> ptrs;
      for (const auto& p : prefix) ptrs.push_back(&p);
      Tensor lp = model.decode_step(pad_sequences(ptrs, false), memory, src);
      const std::size_t vocab = lp.dim(1);
      for (std::size_t r = 0; r < rows; ++r) {
        const Real* row = lp.ptr() + r * vocab;
        TokenId best = -1;
        for (std::size_t v = 0; v < vocab; ++v) {
          if (is_banned(static_cast<TokenId>(v), banned)) continue;
          if (best < 0 || row[v] > row[static_cast<std::size_t>(best)]) best = static_cast<TokenId>(v);
        }
        if (!done[r]) {
          logprob[r] += static_cast<double>(row[static_cast<std::size_t>(best)]);
          if (best == Vocabulary::kEos) {
            done[r] = finished[r] = 1;
          } else if (prefix[r].size() >= limit[r]) {
            done[r] = 1;
          }
        }
        prefix[r].push_back(best);
      }
    }
    for (std::size_t r = 0; r < rows; ++r) {
      // Generated tokens up to (not including) the first EOS or the limit.
      Sequence toks;
      for (std::size_t i = 1; i < prefix[r].size() && toks.size() < limit[r]; ++i) {
        if (prefix[r][i] == Vocabulary::kEos && finished[r]) break;
        toks.push_back(prefix[r][i]);
      }
      out[start + r] = finalize(std::move(toks), logprob[r], finished[r] != 0, 0.0);
    }
  }
  return out;
}

Hypothesis beam_decode(const ContextTransformer& model, const Sequence& source, const Sequence& context,
                       const DecodeConfig& cfg) {
  const StepScorer scorer = model_scorer(model, source, context);
  const std::size_t limit = cfg.limit_for(source.size());
  if (cfg.mode == DecodeConfig::Mode::kGreedy) return greedy_search(scorer, limit, decoder_banned_ids());
  return beam_search(scorer, cfg, limit, decoder_banned_ids());
}

std::vector<Sequence> decode_all(const ContextTransformer& model, const std::vector<const Sequence*>& sources,
                                 const std::vector<const Sequence*>& contexts, const DecodeConfig& cfg) {
  std::vector<Sequence> out;
  out.reserve(sources.size());
  if (cfg.mode == DecodeConfig::Mode::kGreedy) {
    for (auto& h : greedy_decode(model, sources, contexts, cfg)) out.push_back(std::move(h.tokens));
    return out;
  }
  for (std::size_t i = 0; i < sources.size(); ++i) out.push_back(beam_decode(model, *sources[i], *contexts[i], cfg).tokens);
  return out;
}

// ---------------------------------------------------------------------------

void BleuStats::add(std::span<const TokenId> hyp, std::span<const TokenId> ref) {
  hyp_length += hyp.size();
  ref_length += ref.size();
  for (std::size_t n = 1; n <= 4; ++n) {
    std::map<std::vector<TokenId>, std::uint64_t> ref_counts;
    for (std::size_t i = 0; i + n <= ref.size(); ++i) ++ref_counts[std::vector<TokenId>(ref.begin() + i, ref.begin() + i + n)];
    std::map<std::vector<TokenId>, std::uint64_t> hyp_counts;
    for (std::size_t i = 0; i + n <= hyp.size(); ++i) ++hyp_counts[std::vector<TokenId>(hyp.begin() + i, hyp.begin() + i + n)];
    for (const auto& [gram, count] : hyp_counts) {
      auto it = ref_counts.find(gram);
      if (it != ref_counts.end()) matches[n - 1] += std::min(count, it->second);
      totals[n - 1] += count;
    }
  }
}

void BleuStats::merge(const BleuStats& o) {
  for (std::size_t n = 0; n < 4; ++n) {
    matches[n] += o.matches[n];
    totals[n] += o.totals[n];
  }
  hyp_length += o.hyp_length;
  ref_length += o.ref_length;
}

double BleuStats::score(bool smooth) const {
  if (hyp_length == 0) return 0.0;
  double log_precision = 0;
  for (std::size_t n = 0; n < 4; ++n) {
    double m = double(matches[n]), t = double(totals[n]);
    if (matches[n] == 0) {
      if (!smooth) return 0.0;
      m = 1.0;
      t += 1.0;
    }
    log_precision += std::log(m / t) / 4.0;
  }
  const double c = double(hyp_length), r = double(ref_length);
  const double bp = c > r ? 1.0 : std::exp(1.0 - r / c);
  return 100.0 * bp * std::exp(log_precision);
}

double bleu(const std::vector<Sequence>& hypotheses, const std::vector<Sequence>& references, bool smooth) {
  if (hypotheses.empty()) throw std::invalid_argument("bleu: empty corpus");
  if (hypotheses.size() != references.size()) throw std::invalid_argument("bleu: hypothesis/reference count mismatch");
  BleuStats stats;
  for (std::size_t i = 0; i < hypotheses.size(); ++i) stats.add(hypotheses[i], references[i]);
  return stats.score(smooth);
}

// ---------------------------------------------------------------------------

std::vector<const Sequence*> substituted_contexts(const Corpus& data, const std::vector<std::size_t>& perm) {
  std::vector<const Sequence*> out;
  for (std::size_t i = 0; i < data.size(); ++i) out.push_back(&data.at(perm.at(i)).context);
  return out;
}

std::vector<const Sequence*> true_contexts(const Corpus& data) {
  std::vector<const Sequence*> out;
  for (const auto& t : data) out.push_back(&t.context);
  return out;
}

std::vector<const Sequence*> sources_of(const Corpus& data) {
  std::vector<const Sequence*> out;
  for (const auto& t : data) out.push_back(&t.source);
  return out;
}

std::vector<Sequence> references_of(const Corpus& data) {
  std::vector<Sequence> out;
  for (const auto& t : data) out.push_back(t.target);
  return out;
}

std::vector<std::size_t> corpus_derangement(std::size_t n, std::uint64_t seed) {
  if (n < 2) throw std::invalid_argument("context substitution needs at least 2 examples");
  std::mt19937_64 rng = derive_rng(seed, 0xde7aULL);
  return random_derangement(n, rng);
}

namespace {

Corpus with_contexts(const Corpus& data, const std::vector<const Sequence*>& contexts, std::size_t start,
                     std::size_t end) {
  Corpus chunk;
  for (std::size_t i = start; i < end; ++i) {
    TranslationTriplet t = data[i];
    t.context = *contexts[i];
    chunk.push_back(std::move(t));
  }
  return chunk;
}

PaddedBatch sequential_batch(const Corpus& chunk) {
  std::vector<std::size_t> rows(chunk.size());
  std::iota(rows.begin(), rows.end(), std::size_t{0});
  std::mt19937_64 rng(0);
  return make_batch(chunk, rows, rng);
}

}  // namespace

SentenceScores sentence_scores_dataset(const ContextTransformer& model, const Corpus& data,
                                       const std::vector<const Sequence*>& contexts, std::size_t samples,
                                       std::uint64_t seed, std::size_t batch_size) {
  if (samples < 1) throw std::invalid_argument("context-less estimate needs M >= 1");
  NoGradGuard guard;
  std::vector<std::vector<const Sequence*>> substituted;
  for (std::size_t m = 0; m < samples; ++m) {
    substituted.push_back(substituted_contexts(data, corpus_derangement(data.size(), seed + m)));
  }
  SentenceScores out;
  for (std::size_t start = 0; start < data.size(); start += batch_size) {
    const std::size_t end = std::min(data.size(), start + batch_size);
    const PaddedBatch with = sequential_batch(with_contexts(data, contexts, start, end));
    Tensor sent_with = sentence_scores(model.forward_batch(with, ContextChoice::kTrue));
    std::vector<Tensor> per_sample;
    for (std::size_t m = 0; m < samples; ++m) {
      const PaddedBatch sub = sequential_batch(with_contexts(data, substituted[m], start, end));
      per_sample.push_back(model.forward_batch(sub, ContextChoice::kTrue));
    }
    Tensor less_tok = samples == 1 ? per_sample.front() : ops::log_mean_exp(per_sample);
    Tensor sent_less = sentence_scores(less_tok);
    for (std::size_t r = 0; r < with.size(); ++r) {
      out.lengths.push_back(with.lengths[r]);
      out.with_context.push_back(static_cast<double>(sent_with.ptr()[r]));
      out.contextless.push_back(static_cast<double>(sent_less.ptr()[r]));
    }
  }
  return out;
}

IntrinsicDelta delta_from_scores(const SentenceScores& scores) {
  IntrinsicDelta d;
  double with = 0, less = 0;
  for (std::size_t i = 0; i < scores.lengths.size(); ++i) {
    with += scores.with_context[i];
    less += scores.contextless[i];
    d.tokens += scores.lengths[i];
  }
  d.raw = with - less;
  d.per_token = d.tokens ? d.raw / double(d.tokens) : 0.0;
  return d;
}

IntrinsicDelta intrinsic_delta(const ContextTransformer& model, const Corpus& data, std::size_t samples,
                               std::uint64_t seed) {
  if (data.size() < 2) throw std::invalid_argument("intrinsic_delta: need at least 2 examples");
  return delta_from_scores(sentence_scores_dataset(model, data, true_contexts(data), samples, seed));
}

double stable_mean(std::span<const double> values) {
  if (values.empty()) throw std::invalid_argument("stable_mean: no values");
  double mean = values[0];
  for (std::size_t i = 1; i < values.size(); ++i) mean += (values[i] - mean) / double(i + 1);
  return mean;
}

DeltaBleu delta_bleu(const ContextTransformer& model, const Corpus& data, std::size_t shuffles, std::uint64_t seed,
                     const DecodeConfig& cfg) {
  if (shuffles < 1) throw std::invalid_argument("delta_bleu: need R >= 1");
  if (data.size() < 2) throw std::invalid_argument("delta_bleu: need at least 2 examples for a derangement");
  const auto refs = references_of(data);
  const auto srcs = sources_of(data);
  DeltaBleu out;
  out.bleu_true = bleu(decode_all(model, srcs, true_contexts(data), cfg), refs);
  for (std::size_t r = 0; r < shuffles; ++r) {
    const auto ctx = substituted_contexts(data, corpus_derangement(data.size(), seed + r));
    out.bleu_substituted.push_back(bleu(decode_all(model, srcs, ctx, cfg), refs));
  }
  out.bleu_substituted_mean = stable_mean(out.bleu_substituted);
  out.delta = out.bleu_true - out.bleu_substituted_mean;
  return out;
}

PositionAccuracy flagged_accuracy(const ContextTransformer& model, const Corpus& data,
                                  const std::vector<const Sequence*>& contexts,
                                  const std::vector<std::uint8_t>& target_flags, std::size_t batch_size) {
  NoGradGuard guard;
  PositionAccuracy acc;
  for (std::size_t start = 0; start < data.size(); start += batch_size) {
    const std::size_t end = std::min(data.size(), start + batch_size);
    const PaddedBatch batch = sequential_batch(with_contexts(data, contexts, start, end));
    Tensor lp = model.forward_logprobs(batch, ContextChoice::kTrue);
    const std::size_t vocab = lp.dim(2);
    const IdMatrix& ref = batch.target_out;
    for (std::size_t i = 0; i < ref.ids.size(); ++i) {
      if (!ref.mask[i]) continue;
      const TokenId want = ref.ids[i];
      if (want < 0 || static_cast<std::size_t>(want) >= target_flags.size() || !target_flags[static_cast<std::size_t>(want)]) {
        continue;
      }
      const Real* row = lp.ptr() + i * vocab;
      const auto best = static_cast<TokenId>(std::max_element(row, row + vocab) - row);
      ++acc.total;
      if (best == want) ++acc.correct;
    }
  }
  return acc;
}

// ---------------------------------------------------------------------------

std::vector<CurveRow> cumulative_curve(const std::vector<double>& score_diff, const std::vector<Sequence>& references,
                                       const std::vector<Sequence>& hyp_true,
                                       const std::vector<std::vector<Sequence>>& hyp_substituted) {
  const std::size_t n = score_diff.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return score_diff[a] > score_diff[b]; });
  BleuStats cum_true;
  std::vector<BleuStats> cum_sub(hyp_substituted.size());
  std::vector<CurveRow> rows;
  for (std::size_t rank = 0; rank < n; ++rank) {
    const std::size_t i = order[rank];
    cum_true.add(hyp_true[i], references[i]);
    std::vector<double> subs;
    for (std::size_t r = 0; r < hyp_substituted.size(); ++r) {
      cum_sub[r].add(hyp_substituted[r][i], references[i]);
      subs.push_back(cum_sub[r].score());
    }
    rows.push_back({rank + 1, i, score_diff[i], cum_true.score(), subs.empty() ? 0.0 : stable_mean(subs)});
  }
  return rows;
}

double subset_gap(const std::vector<std::size_t>& sentences, const std::vector<Sequence>& references,
                  const std::vector<Sequence>& hyp_true, const std::vector<std::vector<Sequence>>& hyp_substituted) {
  BleuStats t;
  std::vector<BleuStats> s(hyp_substituted.size());
  for (std::size_t i : sentences) {
    t.add(hyp_true[i], references[i]);
    for (std::size_t r = 0; r < s.size(); ++r) s[r].add(hyp_substituted[r][i], references[i]);
  }
  std::vector<double> subs;
  for (const auto& st : s) subs.push_back(st.score());
  return t.score() - (subs.empty() ? 0.0 : stable_mean(subs));
}

EvalReport evaluate(const ContextTransformer& model, const Corpus& data, const EvalOptions& options) {
  if (data.size() < 2) throw std::invalid_argument("evaluate: need at least 2 examples");
  if (options.shuffles < 1) throw std::invalid_argument("evaluate: need R >= 1");
  options.decode.validate();
  EvalReport rep;
  rep.sentences = data.size();
  const auto refs = references_of(data);
  const auto srcs = sources_of(data);

  std::vector<std::vector<const Sequence*>> shuffled;
  for (std::size_t r = 0; r < options.shuffles; ++r) {
    shuffled.push_back(substituted_contexts(data, corpus_derangement(data.size(), options.seed + r)));
  }
  const auto normal_ctx = options.random_context_model ? shuffled.front() : true_contexts(data);

  std::vector<std::vector<Sequence>> hyp_sub;
  for (const auto& ctx : shuffled) {
    hyp_sub.push_back(decode_all(model, srcs, ctx, options.decode));
    rep.bleu_substituted.push_back(bleu(hyp_sub.back(), refs));
  }
  rep.bleu_substituted_mean = stable_mean(rep.bleu_substituted);
  std::vector<Sequence> hyp_true;
  if (options.random_context_model) {
    // The random-context baseline never sees its true context: the normal
    // column is the same set of randomly paired decodes.
    hyp_true = hyp_sub.front();
    rep.bleu_normal = rep.bleu_substituted_mean;
  } else {
    hyp_true = decode_all(model, srcs, normal_ctx, options.decode);
    rep.bleu_normal = bleu(hyp_true, refs);
  }
  rep.delta_bleu = rep.bleu_normal - rep.bleu_substituted_mean;

  rep.scores = sentence_scores_dataset(model, data, normal_ctx, options.samples, options.seed);
  rep.delta_data = delta_from_scores(rep.scores);

  std::vector<double> diff(data.size());
  for (std::size_t i = 0; i < diff.size(); ++i) diff[i] = rep.scores.with_context[i] - rep.scores.contextless[i];
  rep.curve = cumulative_curve(diff, refs, hyp_true, hyp_sub);
  const std::size_t q = std::max<std::size_t>(1, data.size() / 4);
  std::vector<std::size_t> top, bottom;
  for (std::size_t k = 0; k < q; ++k) {
    top.push_back(rep.curve[k].sentence);
    bottom.push_back(rep.curve[data.size() - 1 - k].sentence);
  }
  rep.top_quartile_gap = subset_gap(top, refs, hyp_true, hyp_sub);
  rep.bottom_quartile_gap = subset_gap(bottom, refs, hyp_true, hyp_sub);

  if (!options.ambiguous_flags.empty()) {
    rep.ambiguous_true = flagged_accuracy(model, data, normal_ctx, options.ambiguous_flags);
    rep.ambiguous_substituted = flagged_accuracy(model, data, shuffled.front(), options.ambiguous_flags);
  }
  return rep;
}

namespace {
std::string fixed(double v, int digits = 6) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(digits) << v;
  return os.str();
}
}  // namespace

void write_report(std::ostream& out, const EvalReport& rep, const EvalOptions& opt) {
  out << "sentences = " << rep.sentences << '\n'
      << "shuffles = " << opt.shuffles << '\n'
      << "samples = " << opt.samples << '\n'
      << "seed = " << opt.seed << '\n'
      << "bleu_normal = " << fixed(rep.bleu_normal) << '\n';
  for (std::size_t r = 0; r < rep.bleu_substituted.size(); ++r) {
    out << "bleu_substituted_" << r << " = " << fixed(rep.bleu_substituted[r]) << '\n';
  }
  out << "bleu_context_marginalized = " << fixed(rep.bleu_substituted_mean) << '\n'
      << "delta_bleu = " << fixed(rep.delta_bleu) << '\n'
      << "delta_data = " << fixed(rep.delta_data.raw) << '\n'
      << "delta_data_per_token = " << fixed(rep.delta_data.per_token) << '\n'
      << "tokens = " << rep.delta_data.tokens << '\n'
      << "top_quartile_gap = " << fixed(rep.top_quartile_gap) << '\n'
      << "bottom_quartile_gap = " << fixed(rep.bottom_quartile_gap) << '\n'
      << "ambiguous_positions = " << rep.ambiguous_true.total << '\n'
      << "ambiguous_accuracy_true = " << fixed(rep.ambiguous_true.rate()) << '\n'
      << "ambiguous_accuracy_substituted = " << fixed(rep.ambiguous_substituted.rate()) << '\n';
}

void write_score_dump(std::ostream& out, const SentenceScores& s) {
  out << std::setprecision(17);
  for (std::size_t i = 0; i < s.lengths.size(); ++i) {
    out << i << '\t' << s.lengths[i] << '\t' << s.with_context[i] << '\t' << s.contextless[i] << '\n';
  }
}

SentenceScores read_score_dump(std::istream& in) {
  SentenceScores s;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::istringstream ls(line);
    std::size_t idx = 0, len = 0;
    double w = 0, l = 0;
    if (!(ls >> idx >> len >> w >> l) || idx != s.lengths.size()) {
      throw std::runtime_error("score dump line " + std::to_string(line_no) + ": malformed row");
    }
    s.lengths.push_back(len);
    s.with_context.push_back(w);
    s.contextless.push_back(l);
  }
  return s;
}

void write_curve(std::ostream& out, const std::vector<CurveRow>& curve) {
  out << "rank\tscore_diff\tcumulative_bleu_true\tcumulative_bleu_substituted\n";
  for (const auto& r : curve) {
    out << r.rank << '\t' << fixed(r.score_diff) << '\t' << fixed(r.cumulative_true) << '\t'
        << fixed(r.cumulative_substituted) << '\n';
  }
}

void write_sentence_table(std::ostream& out, const SentenceScores& s) {
  out << "index\tlength\tscore_true\tscore_contextless\tscore_diff\n";
  for (std::size_t i = 0; i < s.lengths.size(); ++i) {
    out << i << '\t' << s.lengths[i] << '\t' << fixed(s.with_context[i]) << '\t' << fixed(s.contextless[i]) << '\t'
        << fixed(s.with_context[i] - s.contextless[i]) << '\n';
  }
}

}  // namespace ctxreg
