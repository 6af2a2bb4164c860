#include "ctxreg/data.hpp"

#include <algorithm>
#include <fstream>
#include <limits>
#include <numeric>
#include <set>
#include <sstream>
#include <tuple>

#include "ctxreg/keyvalue.hpp"

namespace ctxreg {

Vocabulary::Vocabulary() {
  for (const char* t : {"<pad>", "<s>", "</s>", "<unk>"}) add(t);
}

TokenId Vocabulary::add(const std::string& token) {
  if (token.empty() || token.find_first_of(" \t\n\r") != std::string::npos) {
    throw DataError("vocabulary: invalid token '" + token + "'");
  }
  if (auto it = index_.find(token); it != index_.end()) return it->second;
  const auto id = static_cast<TokenId>(tokens_.size());
  tokens_.push_back(token);
  index_.emplace(token, id);
  return id;
}

std::optional<TokenId> Vocabulary::find(const std::string& token) const {
  if (auto it = index_.find(token); it != index_.end()) return it->second;
  return std::nullopt;
}

TokenId Vocabulary::id(const std::string& token) const {
  if (auto found = find(token)) return *found;
  throw DataError("unknown token '" + token + "'");
}

const std::string& Vocabulary::token(TokenId id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= tokens_.size()) {
    throw DataError("token id " + std::to_string(id) + " out of range");
  }
  return tokens_[static_cast<std::size_t>(id)];
}

Vocabulary Vocabulary::read(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open vocabulary file " + path.string());
  Vocabulary v;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line_no < static_cast<std::size_t>(kNumReserved)) {
      if (line != v.tokens_[line_no]) {
        throw DataError(path.string() + ":" + std::to_string(line_no + 1) + ": expected reserved token '" +
                        v.tokens_[line_no] + "', got '" + line + "'");
      }
    } else {
      if (v.find(line)) {
        throw DataError(path.string() + ":" + std::to_string(line_no + 1) + ": duplicate token '" + line + "'");
      }
      v.add(line);
    }
    ++line_no;
  }
  if (line_no < static_cast<std::size_t>(kNumReserved)) {
    throw DataError(path.string() + ": vocabulary is missing reserved tokens");
  }
  return v;
}

void Vocabulary::write(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write vocabulary file " + path.string());
  for (const auto& t : tokens_) out << t << '\n';
}

std::size_t IdMatrix::row_length(std::size_t r) const {
  std::size_t n = 0;
  for (std::size_t c = 0; c < cols; ++c) n += mask[r * cols + c];
  return n;
}

IdMatrix pad_sequences(const std::vector<const Sequence*>& seqs, bool sentinel_for_empty) {
  IdMatrix m;
  m.rows = seqs.size();
  for (const Sequence* s : seqs) m.cols = std::max(m.cols, s->size());
  if (sentinel_for_empty) m.cols = std::max<std::size_t>(m.cols, 1);
  m.ids.assign(m.rows * m.cols, Vocabulary::kPad);
  m.mask.assign(m.rows * m.cols, 0);
  for (std::size_t r = 0; r < m.rows; ++r) {
    const Sequence& s = *seqs[r];
    if (s.empty() && sentinel_for_empty) {
      m.ids[r * m.cols] = Vocabulary::kBos;
      m.mask[r * m.cols] = 1;
      continue;
    }
    for (std::size_t c = 0; c < s.size(); ++c) {
      m.ids[r * m.cols + c] = s[c];
      m.mask[r * m.cols + c] = 1;
    }
  }
  return m;
}

IdMatrix permute_rows(const IdMatrix& m, const std::vector<std::size_t>& perm) {
  IdMatrix out;
  out.rows = perm.size();
  out.cols = m.cols;
  out.ids.resize(out.rows * out.cols);
  out.mask.resize(out.rows * out.cols);
  for (std::size_t i = 0; i < perm.size(); ++i) {
    if (perm[i] >= m.rows) throw DataError("permute_rows: index out of range");
    std::copy_n(m.ids.begin() + static_cast<std::ptrdiff_t>(perm[i] * m.cols), m.cols,
                out.ids.begin() + static_cast<std::ptrdiff_t>(i * m.cols));
    std::copy_n(m.mask.begin() + static_cast<std::ptrdiff_t>(perm[i] * m.cols), m.cols,
                out.mask.begin() + static_cast<std::ptrdiff_t>(i * m.cols));
  }
  return out;
}

std::size_t PaddedBatch::total_tokens() const { return std::accumulate(lengths.begin(), lengths.end(), std::size_t{0}); }

std::size_t uniform_index(std::mt19937_64& rng, std::size_t n) {
  if (n <= 1) return 0;
  const std::uint64_t bound = static_cast<std::uint64_t>(n);
  const std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() - std::numeric_limits<std::uint64_t>::max() % bound;
  std::uint64_t x = rng();
  while (x >= limit) x = rng();
  return static_cast<std::size_t>(x % bound);
}

std::mt19937_64 derive_rng(std::uint64_t seed, std::uint64_t offset) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(offset), static_cast<std::uint32_t>(offset >> 32)};
  return std::mt19937_64(seq);
}

bool is_derangement(const std::vector<std::size_t>& perm) {
  std::vector<std::uint8_t> seen(perm.size(), 0);
  for (std::size_t i = 0; i < perm.size(); ++i) {
    if (perm[i] == i || perm[i] >= perm.size() || seen[perm[i]]) return false;
    seen[perm[i]] = 1;
  }
  return true;
}

std::vector<std::size_t> random_derangement(std::size_t n, std::mt19937_64& rng) {
  if (n < 2) throw DataError("random_derangement: need at least 2 items");
  std::vector<std::size_t> p(n);
  for (;;) {
    std::iota(p.begin(), p.end(), std::size_t{0});
    for (std::size_t i = n - 1; i > 0; --i) std::swap(p[i], p[uniform_index(rng, i + 1)]);
    if (is_derangement(p)) return p;
  }
}

std::uint64_t derangement_count(std::size_t n) {
  // D(n) = (n - 1) * (D(n - 1) + D(n - 2))
  if (n == 0) return 1;
  std::uint64_t prev2 = 1, prev1 = 0;
  constexpr auto kMax = std::numeric_limits<std::uint64_t>::max();
  for (std::size_t k = 2; k <= n; ++k) {
    const std::uint64_t s = prev1 > kMax - prev2 ? kMax : prev1 + prev2;
    const std::uint64_t next = s > kMax / (k - 1) ? kMax : (k - 1) * s;
    prev2 = prev1;
    prev1 = next;
  }
  return prev1;
}

PaddedBatch make_batch(const Corpus& data, const std::vector<std::size_t>& rows, std::mt19937_64& rng) {
  PaddedBatch b;
  b.example_index = rows;
  std::vector<const Sequence*> src, ctx;
  std::vector<Sequence> tin, tout;
  for (std::size_t r : rows) {
    const TranslationTriplet& t = data.at(r);
    src.push_back(&t.source);
    ctx.push_back(&t.context);
    Sequence in{Vocabulary::kBos};
    in.insert(in.end(), t.target.begin(), t.target.end());
    Sequence out = t.target;
    out.push_back(Vocabulary::kEos);
    tin.push_back(std::move(in));
    tout.push_back(std::move(out));
    b.lengths.push_back(t.target_length());
  }
  std::vector<const Sequence*> tin_p, tout_p;
  for (std::size_t i = 0; i < rows.size(); ++i) {
    tin_p.push_back(&tin[i]);
    tout_p.push_back(&tout[i]);
  }
  b.source = pad_sequences(src, true);
  b.context = pad_sequences(ctx, true);
  b.target_in = pad_sequences(tin_p, false);
  b.target_out = pad_sequences(tout_p, false);
  if (rows.size() >= 2) {
    b.perm = random_derangement(rows.size(), rng);
    b.has_derangement = true;
  } else {
    b.perm.assign(rows.size(), 0);
    b.has_derangement = false;
  }
  return b;
}

std::vector<PaddedBatch> make_batches(const Corpus& data, std::size_t batch_size, std::uint64_t seed) {
  if (batch_size == 0) throw DataError("make_batches: batch size must be >= 1");
  std::vector<PaddedBatch> out;
  if (data.empty()) return out;
  std::mt19937_64 rng = derive_rng(seed, 0);
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  for (std::size_t i = order.size() - 1; i > 0; --i) std::swap(order[i], order[uniform_index(rng, i + 1)]);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    const auto ka = std::make_pair(data[a].target.size(), data[a].source.size());
    const auto kb = std::make_pair(data[b].target.size(), data[b].source.size());
    return ka < kb;
  });
  for (std::size_t start = 0; start < order.size(); start += batch_size) {
    const std::size_t end = std::min(order.size(), start + batch_size);
    std::vector<std::size_t> rows(order.begin() + static_cast<std::ptrdiff_t>(start),
                                  order.begin() + static_cast<std::ptrdiff_t>(end));
    out.push_back(make_batch(data, rows, rng));
  }
  return out;
}

namespace {

Sequence parse_field(const std::string& field, const Vocabulary& vocab, std::size_t line_no) {
  Sequence s;
  std::istringstream ss(field);
  std::string tok;
  while (ss >> tok) {
    auto id = vocab.find(tok);
    if (!id) throw DataError("line " + std::to_string(line_no) + ": unknown token '" + tok + "'");
    s.push_back(*id);
  }
  return s;
}

void write_field(std::ostream& out, const Sequence& s, const Vocabulary& vocab) {
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) out << ' ';
    out << vocab.token(s[i]);
  }
}

}  // namespace

Corpus parse_corpus(std::istream& in, const Vocabulary& vocab) {
  Corpus data;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    std::vector<std::string> fields;
    std::size_t start = 0;
    for (;;) {
      const auto tab = line.find('\t', start);
      fields.push_back(line.substr(start, tab == std::string::npos ? std::string::npos : tab - start));
      if (tab == std::string::npos) break;
      start = tab + 1;
    }
    if (fields.size() != 3) {
      throw DataError("line " + std::to_string(line_no) + ": expected 3 tab-separated fields, got " +
                      std::to_string(fields.size()));
    }
    TranslationTriplet t;
    t.context = parse_field(fields[0], vocab, line_no);
    t.source = parse_field(fields[1], vocab, line_no);
    t.target = parse_field(fields[2], vocab, line_no);
    data.push_back(std::move(t));
  }
  return data;
}

Corpus read_corpus(const std::filesystem::path& path, const Vocabulary& vocab) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open corpus file " + path.string());
  try {
    return parse_corpus(in, vocab);
  } catch (const DataError& e) {
    throw DataError(path.string() + ": " + e.what());
  }
}

void write_corpus(const Corpus& data, const Vocabulary& vocab, std::ostream& out) {
  for (const auto& t : data) {
    write_field(out, t.context, vocab);
    out << '\t';
    write_field(out, t.source, vocab);
    out << '\t';
    write_field(out, t.target, vocab);
    out << '\n';
  }
}

void write_corpus(const Corpus& data, const Vocabulary& vocab, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write corpus file " + path.string());
  write_corpus(data, vocab, out);
}

// ---------------------------------------------------------------------------
// Synthetic task

SyntheticTaskSpec SyntheticTaskSpec::parse(std::istream& in) {
  KeyValueReader kv(in, "task spec");
  SyntheticTaskSpec s;
  s.vocab_limit = kv.get_uint("vocab_limit");
  s.lexicon_size = kv.get_uint("lexicon_size");
  s.ambiguous_types = kv.get_uint("ambiguous_types");
  s.marker_types = kv.get_uint("marker_types");
  s.min_length = kv.get_uint("min_length");
  s.max_length = kv.get_uint("max_length");
  s.ambiguous_per_sentence = kv.get_uint("ambiguous_per_sentence");
  s.context_min_length = kv.get_uint("context_min_length");
  s.context_max_length = kv.get_uint("context_max_length");
  s.train_size = kv.get_uint("train_size");
  s.valid_size = kv.get_uint("valid_size");
  s.test_size = kv.get_uint("test_size");
  s.seed = kv.get_uint("seed");
  kv.finish();
  s.validate();
  return s;
}

SyntheticTaskSpec SyntheticTaskSpec::read(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open task spec " + path.string());
  return parse(in);
}

void SyntheticTaskSpec::write(std::ostream& out) const {
  out << "vocab_limit = " << vocab_limit << '\n'
      << "lexicon_size = " << lexicon_size << '\n'
      << "ambiguous_types = " << ambiguous_types << '\n'
      << "marker_types = " << marker_types << '\n'
      << "min_length = " << min_length << '\n'
      << "max_length = " << max_length << '\n'
      << "ambiguous_per_sentence = " << ambiguous_per_sentence << '\n'
      << "context_min_length = " << context_min_length << '\n'
      << "context_max_length = " << context_max_length << '\n'
      << "train_size = " << train_size << '\n'
      << "valid_size = " << valid_size << '\n'
      << "test_size = " << test_size << '\n'
      << "seed = " << seed << '\n';
}

void SyntheticTaskSpec::validate() const {
  auto fail = [](const std::string& msg) { throw ConfigError("task spec: " + msg); };
  if (train_size < 1 || valid_size < 1 || test_size < 1) fail("corpus sizes must be >= 1");
  if (lexicon_size < 1) fail("lexicon_size must be >= 1");
  if (min_length < 1 || min_length > max_length) fail("need 1 <= min_length <= max_length");
  if (context_min_length > context_max_length) fail("need context_min_length <= context_max_length");
  if (ambiguous_types > 0) {
    if (marker_types < 2) fail("ambiguous words need at least 2 marker types");
    if (ambiguous_per_sentence < 1 || ambiguous_per_sentence > min_length) {
      fail("need 1 <= ambiguous_per_sentence <= min_length");
    }
  }
  if (marker_types > 0 && context_min_length < 1) fail("context must have room for its marker");
  const std::size_t needed = static_cast<std::size_t>(Vocabulary::kNumReserved) + 2 * lexicon_size +
                             3 * ambiguous_types + marker_types;
  if (needed > vocab_limit) {
    throw DataError("task spec: vocabulary too small: need " + std::to_string(needed) + " ids, limit is " +
                    std::to_string(vocab_limit));
  }
}

SyntheticTask::SyntheticTask(const SyntheticTaskSpec& spec) : spec_(spec) {
  spec_.validate();
  for (std::size_t i = 0; i < spec_.lexicon_size; ++i) lexicon_src_.push_back(vocab_.add("s" + std::to_string(i)));
  for (std::size_t i = 0; i < spec_.lexicon_size; ++i) lexicon_tgt_.push_back(vocab_.add("t" + std::to_string(i)));
  for (std::size_t i = 0; i < spec_.ambiguous_types; ++i) ambiguous_src_.push_back(vocab_.add("a" + std::to_string(i)));
  for (std::size_t i = 0; i < spec_.ambiguous_types; ++i) {
    ambiguous_tgt_.push_back({vocab_.add("A" + std::to_string(i) + ".0"), vocab_.add("A" + std::to_string(i) + ".1")});
  }
  for (std::size_t i = 0; i < spec_.marker_types; ++i) markers_.push_back(vocab_.add("m" + std::to_string(i)));
  for (std::size_t i = 0; i < lexicon_src_.size(); ++i) lexicon_map_[lexicon_src_[i]] = lexicon_tgt_[i];
  for (std::size_t i = 0; i < ambiguous_src_.size(); ++i) ambiguous_index_[ambiguous_src_[i]] = i;
  for (std::size_t i = 0; i < markers_.size(); ++i) marker_index_[markers_[i]] = i;
  ambiguous_target_flag_ = ambiguous_target_flags(vocab_);
}

bool SyntheticTask::is_ambiguous_source(TokenId id) const { return ambiguous_index_.count(id) != 0; }

bool SyntheticTask::is_ambiguous_target(TokenId id) const {
  return id >= 0 && static_cast<std::size_t>(id) < ambiguous_target_flag_.size() &&
         ambiguous_target_flag_[static_cast<std::size_t>(id)];
}

std::optional<std::size_t> SyntheticTask::marker_index(TokenId id) const {
  if (auto it = marker_index_.find(id); it != marker_index_.end()) return it->second;
  return std::nullopt;
}

Sequence SyntheticTask::translate(const Sequence& source, const Sequence& context) const {
  std::optional<std::size_t> marker;
  for (TokenId c : context) {
    if ((marker = marker_index(c))) break;
  }
  Sequence out;
  out.reserve(source.size());
  for (TokenId s : source) {
    if (auto it = lexicon_map_.find(s); it != lexicon_map_.end()) {
      out.push_back(it->second);
    } else if (auto a = ambiguous_index_.find(s); a != ambiguous_index_.end()) {
      if (!marker) throw DataError("translate: ambiguous word without a context marker");
      out.push_back(ambiguous_tgt_[a->second][*marker % 2]);
    } else {
      throw DataError("translate: token '" + vocab_.token(s) + "' is not a source word");
    }
  }
  return out;
}

TranslationTriplet SyntheticTask::sample(std::mt19937_64& rng) const {
  auto draw_length = [&](std::size_t lo, std::size_t hi) { return lo + uniform_index(rng, hi - lo + 1); };
  TranslationTriplet t;
  const std::size_t len = draw_length(spec_.min_length, spec_.max_length);
  t.source.resize(len);
  for (auto& tok : t.source) tok = lexicon_src_[uniform_index(rng, lexicon_src_.size())];
  if (!ambiguous_src_.empty()) {
    // distinct positions via a partial shuffle
    std::vector<std::size_t> pos(len);
    std::iota(pos.begin(), pos.end(), std::size_t{0});
    for (std::size_t k = 0; k < spec_.ambiguous_per_sentence; ++k) {
      std::swap(pos[k], pos[k + uniform_index(rng, len - k)]);
      t.source[pos[k]] = ambiguous_src_[uniform_index(rng, ambiguous_src_.size())];
    }
  }
  const std::size_t clen = draw_length(spec_.context_min_length, spec_.context_max_length);
  t.context.resize(clen);
  for (auto& tok : t.context) tok = lexicon_src_[uniform_index(rng, lexicon_src_.size())];
  if (!markers_.empty()) {
    t.context[uniform_index(rng, clen)] = markers_[uniform_index(rng, markers_.size())];
  }
  t.target = translate(t.source, t.context);
  return t;
}

std::vector<std::uint8_t> ambiguous_target_flags(const Vocabulary& vocab) {
  std::vector<std::uint8_t> flags(vocab.size(), 0);
  for (std::size_t i = 0; i < vocab.size(); ++i) {
    const std::string& t = vocab.tokens()[i];
    const auto dot = t.find('.');
    if (t.size() < 4 || t[0] != 'A' || dot == std::string::npos || dot + 2 != t.size()) continue;
    const bool digits = std::all_of(t.begin() + 1, t.begin() + static_cast<std::ptrdiff_t>(dot),
                                    [](char c) { return c >= '0' && c <= '9'; });
    if (digits && dot > 1 && (t.back() == '0' || t.back() == '1')) flags[i] = 1;
  }
  return flags;
}

CorpusSplits generate_corpus(const SyntheticTask& task) {
  const auto& spec = task.spec();
  std::mt19937_64 rng = derive_rng(spec.seed, 0);
  std::set<std::tuple<Sequence, Sequence, Sequence>> seen;
  const std::size_t total = spec.train_size + spec.valid_size + spec.test_size;
  const std::size_t max_attempts = 50 * total + 1000;
  std::size_t attempts = 0;
  auto fill = [&](Corpus& out, std::size_t n) {
    while (out.size() < n) {
      if (++attempts > max_attempts) {
        throw DataError("generate_corpus: task space too small for " + std::to_string(total) + " distinct triplets");
      }
      TranslationTriplet t = task.sample(rng);
      if (seen.emplace(t.context, t.source, t.target).second) out.push_back(std::move(t));
    }
  };
  CorpusSplits splits;
  fill(splits.train, spec.train_size);
  fill(splits.valid, spec.valid_size);
  fill(splits.test, spec.test_size);
  return splits;
}

}  // namespace ctxreg
