#include <doctest.h>

#include <algorithm>
#include <filesystem>
#include <map>
#include <numeric>
#include <set>
#include <sstream>

#include "ctxreg/data.hpp"
#include "ctxreg/keyvalue.hpp"
#include "helpers.hpp"

using namespace ctxreg;

namespace {

Vocabulary small_vocab() {
  Vocabulary v;
  for (const char* t : {"a", "b", "c", "x", "y"}) v.add(t);
  return v;
}

std::filesystem::path temp_dir(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("ctxreg_test_" + name);
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p;
}

}  // namespace

TEST_CASE("vocabulary reserves the four special ids") {
  Vocabulary v;
  CHECK(v.size() == 4);
  CHECK(v.token(Vocabulary::kPad) == "<pad>");
  CHECK(v.id("<unk>") == Vocabulary::kUnk);
  const TokenId a = v.add("hello");
  CHECK(a == 4);
  CHECK(v.add("hello") == a);
  CHECK_THROWS_AS(v.id("missing"), DataError);
}

TEST_CASE("batches of ten with size four come out as 4, 4, 2") {
  const Corpus c = testing::random_corpus(3, 10, 12);
  const auto batches = make_batches(c, 4, 99);
  REQUIRE(batches.size() == 3);
  CHECK(batches[0].size() == 4);
  CHECK(batches[1].size() == 4);
  CHECK(batches[2].size() == 2);

  std::vector<std::size_t> seen;
  for (const auto& b : batches) {
    for (std::size_t i = 0; i < b.size(); ++i) {
      const auto& ex = c[b.example_index[i]];
      seen.push_back(b.example_index[i]);
      CHECK(b.target_out.row_length(i) == ex.target.size() + 1);
      CHECK(b.target_in.row_length(i) == ex.target.size() + 1);
      CHECK(b.source.row_length(i) == ex.source.size());
      CHECK(b.context.row_length(i) == ex.context.size());
      CHECK(b.lengths[i] == ex.target_length());
      CHECK(b.target_in.at(i, 0) == Vocabulary::kBos);
      CHECK(b.target_out.at(i, ex.target.size()) == Vocabulary::kEos);
    }
    const std::size_t mask_sum = std::accumulate(b.target_out.mask.begin(), b.target_out.mask.end(), std::size_t{0});
    CHECK(mask_sum == b.total_tokens());
    CHECK(b.has_derangement);
    CHECK(is_derangement(b.perm));
  }
  std::sort(seen.begin(), seen.end());
  std::vector<std::size_t> all(10);
  std::iota(all.begin(), all.end(), std::size_t{0});
  CHECK(seen == all);
}

TEST_CASE("batching is sorted by length within a shuffle and reproducible") {
  const Corpus c = testing::random_corpus(5, 40, 12, 1, 9);
  const auto a = make_batches(c, 8, 4);
  const auto b = make_batches(c, 8, 4);
  REQUIRE(a.size() == b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(a[i].example_index == b[i].example_index);
    CHECK(a[i].perm == b[i].perm);
  }
}

TEST_CASE("a batch of one has no derangement") {
  const Corpus c = testing::random_corpus(1, 1, 10);
  const auto batches = make_batches(c, 4, 1);
  REQUIRE(batches.size() == 1);
  CHECK_FALSE(batches[0].has_derangement);
}

TEST_CASE("empty context becomes a single sentinel") {
  Sequence empty;
  Sequence one{5, 6};
  const IdMatrix m = pad_sequences({&empty, &one}, true);
  CHECK(m.cols == 2);
  CHECK(m.at(0, 0) == Vocabulary::kBos);
  CHECK(m.row_length(0) == 1);
  CHECK(m.row_length(1) == 2);
}

TEST_CASE("derangements have no fixed points and cover the space uniformly") {
  std::mt19937_64 rng(11);
  std::map<std::vector<std::size_t>, int> counts;
  const int draws = 9000;
  for (int i = 0; i < draws; ++i) {
    auto p = random_derangement(4, rng);
    REQUIRE(is_derangement(p));
    ++counts[p];
  }
  CHECK(counts.size() == derangement_count(4));
  for (const auto& [perm, n] : counts) CHECK(std::abs(n - draws / 9) < 150);
  CHECK(derangement_count(2) == 1);
  CHECK(derangement_count(5) == 44);
  CHECK_FALSE(is_derangement({0, 2, 1}));
  CHECK_THROWS_AS(random_derangement(1, rng), DataError);
}

TEST_CASE("corpus round trip keeps every triplet") {
  const Vocabulary v = small_vocab();
  Corpus c = testing::random_corpus(2, 6, v.size());
  c[2].context.clear();
  std::stringstream ss;
  write_corpus(c, v, ss);
  const Corpus back = parse_corpus(ss, v);
  CHECK(back == c);
}

TEST_CASE("corpus lines hold context, source, target in that order") {
  const Vocabulary v = small_vocab();
  std::istringstream in("x y\ta b\tc\n");
  const Corpus c = parse_corpus(in, v);
  REQUIRE(c.size() == 1);
  CHECK(c[0].context == Sequence{v.id("x"), v.id("y")});
  CHECK(c[0].source == Sequence{v.id("a"), v.id("b")});
  CHECK(c[0].target == Sequence{v.id("c")});
}

TEST_CASE("corpus parse errors carry the line number") {
  const Vocabulary v = small_vocab();
  {
    std::istringstream in("x\ta\tb\nx\ta\n");
    try {
      parse_corpus(in, v);
      FAIL("expected an error");
    } catch (const DataError& e) {
      CHECK(std::string(e.what()).find("line 2") != std::string::npos);
    }
  }
  {
    std::istringstream in("x\ta\tb\nx\ta\tb\nx\tzzz\tb\n");
    try {
      parse_corpus(in, v);
      FAIL("expected an error");
    } catch (const DataError& e) {
      const std::string msg = e.what();
      CHECK(msg.find("line 3") != std::string::npos);
      CHECK(msg.find("zzz") != std::string::npos);
    }
  }
}

TEST_CASE("vocabulary file round trip") {
  const auto dir = temp_dir("vocab");
  const Vocabulary v = small_vocab();
  v.write(dir / "vocab.txt");
  CHECK(Vocabulary::read(dir / "vocab.txt") == v);
  std::filesystem::remove_all(dir);
}

TEST_CASE("generator is deterministic and splits are disjoint") {
  SyntheticTaskSpec spec;
  spec.train_size = 200;
  spec.valid_size = 30;
  spec.test_size = 30;
  const SyntheticTask task(spec);
  const CorpusSplits a = generate_corpus(task);
  const CorpusSplits b = generate_corpus(task);
  CHECK(a.train == b.train);
  CHECK(a.valid == b.valid);
  CHECK(a.test == b.test);
  CHECK(a.train.size() == 200);

  std::set<std::tuple<Sequence, Sequence, Sequence>> all;
  for (const Corpus* c : {&a.train, &a.valid, &a.test}) {
    for (const auto& t : *c) all.emplace(t.context, t.source, t.target);
  }
  CHECK(all.size() == 260);

  spec.seed = 14;
  const CorpusSplits other = generate_corpus(SyntheticTask(spec));
  CHECK(other.train != a.train);
}

TEST_CASE("generated targets follow the translation rule") {
  SyntheticTaskSpec spec;
  spec.train_size = 100;
  spec.valid_size = 10;
  spec.test_size = 10;
  const SyntheticTask task(spec);
  const auto splits = generate_corpus(task);
  for (const auto& t : splits.train) {
    CHECK(t.target == task.translate(t.source, t.context));
    CHECK(t.source.size() >= spec.min_length);
    CHECK(t.source.size() <= spec.max_length);
    const auto amb = std::count_if(t.source.begin(), t.source.end(),
                                   [&](TokenId s) { return task.is_ambiguous_source(s); });
    CHECK(static_cast<std::size_t>(amb) == spec.ambiguous_per_sentence);
  }
  const auto flags = ambiguous_target_flags(task.vocab());
  for (const auto& alt : task.alternatives()) {
    CHECK(flags[static_cast<std::size_t>(alt[0])] == 1);
    CHECK(flags[static_cast<std::size_t>(alt[1])] == 1);
  }
  CHECK(std::accumulate(flags.begin(), flags.end(), 0) == int(2 * spec.ambiguous_types));
}

TEST_CASE("without context the best ambiguous-word accuracy is one half") {
  // Enumerate every (ambiguous word, marker) pair: the marker is uniform, so
  // the best context-free guess per word is the majority alternative.
  SyntheticTaskSpec spec;
  const SyntheticTask task(spec);
  std::size_t best_total = 0, total = 0;
  for (TokenId a : task.ambiguous_sources()) {
    std::map<TokenId, std::size_t> outcome;
    for (TokenId m : task.markers()) {
      const Sequence out = task.translate({a}, {m});
      ++outcome[out[0]];
    }
    std::size_t best = 0, sum = 0;
    for (const auto& [tok, n] : outcome) {
      best = std::max(best, n);
      sum += n;
    }
    best_total += best;
    total += sum;
  }
  CHECK(double(best_total) / double(total) == doctest::Approx(0.5));

  // Empirical check on the generated training split.
  const auto splits = generate_corpus(task);
  std::map<TokenId, std::map<TokenId, std::size_t>> by_word;
  for (const auto& t : splits.train) {
    for (std::size_t i = 0; i < t.source.size(); ++i) {
      if (task.is_ambiguous_source(t.source[i])) ++by_word[t.source[i]][t.target[i]];
    }
  }
  std::size_t majority = 0, n = 0;
  for (const auto& [w, outs] : by_word) {
    std::size_t best = 0;
    for (const auto& [tok, k] : outs) {
      best = std::max(best, k);
      n += k;
    }
    majority += best;
  }
  CHECK(double(majority) / double(n) < 0.56);
}

TEST_CASE("task spec rejects a vocabulary that is too small") {
  SyntheticTaskSpec spec;
  spec.vocab_limit = 20;
  CHECK_THROWS_AS(spec.validate(), DataError);
  spec.vocab_limit = 256;
  spec.min_length = 9;
  CHECK_THROWS_AS(spec.validate(), ConfigError);
}

TEST_CASE("task spec key file round trip and strictness") {
  SyntheticTaskSpec spec;
  spec.seed = 99;
  spec.marker_types = 4;
  std::stringstream ss;
  spec.write(ss);
  const std::string text = ss.str();
  std::istringstream in(text);
  const SyntheticTaskSpec back = SyntheticTaskSpec::parse(in);
  CHECK(back.seed == 99);
  CHECK(back.marker_types == 4);

  std::istringstream extra(text + "bogus = 1\n");
  CHECK_THROWS_AS(SyntheticTaskSpec::parse(extra), ConfigError);
  std::istringstream missing(text.substr(0, text.find("seed")));
  CHECK_THROWS_AS(SyntheticTaskSpec::parse(missing), ConfigError);
}

TEST_CASE("derived rng streams differ by offset and repeat by seed") {
  auto a = derive_rng(5, 1);
  auto b = derive_rng(5, 1);
  auto c = derive_rng(5, 2);
  const auto va = a(), vb = b(), vc = c();
  CHECK(va == vb);
  CHECK(va != vc);
  std::mt19937_64 r(3);
  for (int i = 0; i < 1000; ++i) CHECK(uniform_index(r, 7) < 7);
}
