#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <random>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

namespace ctxreg {

using TokenId = std::int32_t;
using Sequence = std::vector<TokenId>;

class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Token strings <-> contiguous ids. Ids 0..3 are always PAD, BOS, EOS, UNK.
class Vocabulary {
 public:
  static constexpr TokenId kPad = 0;
  static constexpr TokenId kBos = 1;
  static constexpr TokenId kEos = 2;
  static constexpr TokenId kUnk = 3;
  static constexpr TokenId kNumReserved = 4;

  Vocabulary();

  /// Adds a token if absent; returns its id.
  TokenId add(const std::string& token);
  std::optional<TokenId> find(const std::string& token) const;
  /// Throws DataError naming the token when it is unknown.
  TokenId id(const std::string& token) const;
  const std::string& token(TokenId id) const;
  std::size_t size() const { return tokens_.size(); }
  const std::vector<std::string>& tokens() const { return tokens_; }

  static Vocabulary read(const std::filesystem::path& path);
  void write(const std::filesystem::path& path) const;

  bool operator==(const Vocabulary& other) const { return tokens_ == other.tokens_; }

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, TokenId> index_;
};

/// One example. `target` holds the content tokens only; BOS and EOS are
/// implicit delimiters added when batching, so T_n = target.size() + 1.
struct TranslationTriplet {
  Sequence source;
  Sequence target;
  Sequence context;

  std::size_t target_length() const { return target.size() + 1; }
  bool operator==(const TranslationTriplet&) const = default;
};

using Corpus = std::vector<TranslationTriplet>;

/// Padded id matrix with a validity mask (1 = real token).
struct IdMatrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<TokenId> ids;
  std::vector<std::uint8_t> mask;

  TokenId at(std::size_t r, std::size_t c) const { return ids[r * cols + c]; }
  bool valid(std::size_t r, std::size_t c) const { return mask[r * cols + c] != 0; }
  std::size_t row_length(std::size_t r) const;
};

/// Pads sequences to the longest one. An empty sequence becomes a single
/// BOS sentinel so attention over it stays well defined.
IdMatrix pad_sequences(const std::vector<const Sequence*>& seqs, bool sentinel_for_empty);
/// Row i of the result is row perm[i] of `m`.
IdMatrix permute_rows(const IdMatrix& m, const std::vector<std::size_t>& perm);

struct PaddedBatch {
  std::vector<std::size_t> example_index;  // positions in the source corpus
  IdMatrix source;
  IdMatrix context;
  IdMatrix target_in;   // BOS y_1 .. y_k
  IdMatrix target_out;  // y_1 .. y_k EOS
  std::vector<std::size_t> lengths;  // T_n
  /// perm[i] is the example whose context substitutes for example i.
  std::vector<std::size_t> perm;
  /// False when no derangement exists (batch of one); context-less terms are skipped.
  bool has_derangement = false;

  std::size_t size() const { return lengths.size(); }
  std::size_t total_tokens() const;
};

/// Builds one batch from the given corpus rows. The permutation is a uniformly
/// drawn derangement when size >= 2.
PaddedBatch make_batch(const Corpus& data, const std::vector<std::size_t>& rows, std::mt19937_64& rng);

/// Shuffles with `seed`, stable-sorts by length, and cuts consecutive groups of
/// `batch_size`. Every example appears exactly once; the last batch may be short.
std::vector<PaddedBatch> make_batches(const Corpus& data, std::size_t batch_size, std::uint64_t seed);

/// Uniformly random derangement of 0..n-1 (n >= 2), by rejection.
std::vector<std::size_t> random_derangement(std::size_t n, std::mt19937_64& rng);
bool is_derangement(const std::vector<std::size_t>& perm);
/// Number of derangements of n items, saturating at UINT64_MAX.
std::uint64_t derangement_count(std::size_t n);

/// Unbiased integer in [0, n).
std::size_t uniform_index(std::mt19937_64& rng, std::size_t n);

/// Fresh RNG stream for a (seed, offset) pair.
std::mt19937_64 derive_rng(std::uint64_t seed, std::uint64_t offset);

// Corpus file: one triplet per line, three tab-separated fields (context,
// source, target), tokens separated by single spaces.
Corpus read_corpus(const std::filesystem::path& path, const Vocabulary& vocab);
Corpus parse_corpus(std::istream& in, const Vocabulary& vocab);
void write_corpus(const Corpus& data, const Vocabulary& vocab, const std::filesystem::path& path);
void write_corpus(const Corpus& data, const Vocabulary& vocab, std::ostream& out);

struct SyntheticTaskSpec {
  std::size_t vocab_limit = 256;    // generation fails if the task needs more ids
  std::size_t lexicon_size = 12;    // unambiguous source words (each with one fixed translation)
  std::size_t ambiguous_types = 4;  // source words with two context-selected translations
  std::size_t marker_types = 2;     // context markers; marker m selects alternative m % 2
  std::size_t min_length = 4;       // source length range, ambiguous tokens included
  std::size_t max_length = 7;
  std::size_t ambiguous_per_sentence = 1;
  std::size_t context_min_length = 3;  // context length range, marker included
  std::size_t context_max_length = 6;
  std::size_t train_size = 1000;
  std::size_t valid_size = 100;
  std::size_t test_size = 100;
  std::uint64_t seed = 13;

  /// Key/value text; every field must be present, unknown keys are errors.
  static SyntheticTaskSpec parse(std::istream& in);
  static SyntheticTaskSpec read(const std::filesystem::path& path);
  void write(std::ostream& out) const;
  void validate() const;
};

/// The generated task with its ground-truth translation rule.
class SyntheticTask {
 public:
  explicit SyntheticTask(const SyntheticTaskSpec& spec);

  const Vocabulary& vocab() const { return vocab_; }
  const SyntheticTaskSpec& spec() const { return spec_; }

  /// The reference translation of `source` given `context`. An ambiguous
  /// word takes the alternative selected by the first marker in the context.
  Sequence translate(const Sequence& source, const Sequence& context) const;

  TranslationTriplet sample(std::mt19937_64& rng) const;

  bool is_ambiguous_source(TokenId id) const;
  /// True for target ids that are one of the two translations of an ambiguous word.
  bool is_ambiguous_target(TokenId id) const;
  std::optional<std::size_t> marker_index(TokenId id) const;
  const std::vector<TokenId>& markers() const { return markers_; }
  const std::vector<TokenId>& ambiguous_sources() const { return ambiguous_src_; }
  /// alternatives()[a][k] is translation k of ambiguous word a.
  const std::vector<std::array<TokenId, 2>>& alternatives() const { return ambiguous_tgt_; }
  const std::vector<TokenId>& lexicon_sources() const { return lexicon_src_; }

 private:
  SyntheticTaskSpec spec_;
  Vocabulary vocab_;
  std::vector<TokenId> lexicon_src_, lexicon_tgt_, ambiguous_src_, markers_;
  std::vector<std::array<TokenId, 2>> ambiguous_tgt_;
  std::unordered_map<TokenId, TokenId> lexicon_map_;
  std::unordered_map<TokenId, std::size_t> ambiguous_index_, marker_index_;
  std::vector<std::uint8_t> ambiguous_target_flag_;
};

/// Target ids that belong to an ambiguous word, recovered from the
/// vocabulary's naming scheme (works on any vocabulary written by the generator).
std::vector<std::uint8_t> ambiguous_target_flags(const Vocabulary& vocab);

struct CorpusSplits {
  Corpus train, valid, test;
};

/// Deterministic under spec.seed; the three splits share no triplet.
CorpusSplits generate_corpus(const SyntheticTask& task);

}  // namespace ctxreg
