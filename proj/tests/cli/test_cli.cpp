#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <iterator>
#include <sstream>

#include "commands.hpp"
#include "ctxreg/training.hpp"

namespace fs = std::filesystem;
using ctxreg::cli::run;

namespace {

struct Result {
  int code;
  std::string out, err;
};

Result call(std::vector<std::string> args) {
  std::ostringstream out, err;
  const int code = run(args, out, err);
  return {code, out.str(), err.str()};
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

std::size_t lines(const fs::path& p) {
  const std::string s = slurp(p);
  return static_cast<std::size_t>(std::count(s.begin(), s.end(), '\n'));
}

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("ctxreg_cli_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

void write(const fs::path& p, const std::string& text) {
  std::ofstream(p) << text;
}

// Small task and model so a full train/eval cycle takes a moment.
void small_setup(const fs::path& dir) {
  write(dir / "spec.txt",
        "vocab_limit = 64\nlexicon_size = 6\nambiguous_types = 2\nmarker_types = 2\nmin_length = 2\n"
        "max_length = 4\nambiguous_per_sentence = 1\ncontext_min_length = 2\ncontext_max_length = 3\n"
        "train_size = 40\nvalid_size = 8\ntest_size = 8\nseed = 5\n");
  ctxreg::TrainConfig cfg = ctxreg::cli::default_repro_config(4 + 12 + 6 + 2);
  cfg.model.width = 8;
  cfg.model.heads = 2;
  cfg.model.ff_width = 16;
  cfg.max_epochs = 1;
  cfg.batch_size = 8;
  std::ofstream out(dir / "config.txt");
  cfg.write(out);
}

}  // namespace

TEST_CASE("usage errors exit with code 2") {
  CHECK(call({}).code == 2);
  CHECK(call({"frobnicate"}).code == 2);
  CHECK(call({"gen"}).code == 2);
  CHECK(call({"--help"}).code == 0);
}

TEST_CASE("a truncated config is a usage error naming the missing key") {
  const fs::path dir = scratch("truncated");
  small_setup(dir);
  REQUIRE(call({"gen", "--spec", (dir / "spec.txt").string(), "--out", (dir / "corpus").string()}).code == 0);
  const std::string text = slurp(dir / "config.txt");
  write(dir / "short.txt", text.substr(0, text.find("reg.samples")));
  const Result r = call({"train", "--config", (dir / "short.txt").string(), "--corpus", (dir / "corpus").string(),
                         "--out", (dir / "run").string()});
  CHECK(r.code == 2);
  CHECK(r.err.find("reg.samples") != std::string::npos);
  fs::remove_all(dir);
}

TEST_CASE("gen writes the requested split sizes and is byte-reproducible") {
  const fs::path dir = scratch("gen");
  small_setup(dir);
  const std::string spec = (dir / "spec.txt").string();
  REQUIRE(call({"gen", "--spec", spec, "--out", (dir / "one").string()}).code == 0);
  REQUIRE(call({"gen", "--spec", spec, "--out", (dir / "two").string()}).code == 0);
  CHECK(lines(dir / "one" / "train.txt") == 40);
  CHECK(lines(dir / "one" / "valid.txt") == 8);
  CHECK(lines(dir / "one" / "test.txt") == 8);
  for (const char* f : {"vocab.txt", "train.txt", "valid.txt", "test.txt", "task.txt"}) {
    CHECK(slurp(dir / "one" / f) == slurp(dir / "two" / f));
  }
  REQUIRE(call({"--seed", "77", "gen", "--spec", spec, "--out", (dir / "three").string()}).code == 0);
  CHECK(slurp(dir / "one" / "train.txt") != slurp(dir / "three" / "train.txt"));
  fs::remove_all(dir);
}

TEST_CASE("train, eval and score-dump work end to end") {
  const fs::path dir = scratch("e2e");
  small_setup(dir);
  const std::string corpus = (dir / "corpus").string();
  REQUIRE(call({"gen", "--spec", (dir / "spec.txt").string(), "--out", corpus}).code == 0);
  const Result t = call({"train", "--config", (dir / "config.txt").string(), "--corpus", corpus, "--out",
                         (dir / "run").string(), "--variant", "d"});
  REQUIRE(t.code == 0);
  const std::string ckpt = (dir / "run" / "best.ckpt").string();

  const Result beam1 = call({"eval", "--checkpoint", ckpt, "--corpus", corpus, "--out", (dir / "b1").string(),
                             "--beam", "1", "--shuffles", "2"});
  const Result greedy = call({"eval", "--checkpoint", ckpt, "--corpus", corpus, "--out", (dir / "g").string(),
                              "--greedy", "--shuffles", "2"});
  REQUIRE(beam1.code == 0);
  REQUIRE(greedy.code == 0);
  CHECK(beam1.out == greedy.out);
  CHECK(slurp(dir / "b1" / "report.txt") == slurp(dir / "g" / "report.txt"));
  for (const char* f : {"report.txt", "scores.tsv", "curve.tsv", "sentences.tsv"}) CHECK(fs::exists(dir / "g" / f));

  const Result sd = call({"score-dump", "--checkpoint", ckpt, "--corpus", corpus, "--out",
                          (dir / "dump.tsv").string()});
  REQUIRE(sd.code == 0);
  CHECK(slurp(dir / "dump.tsv") == slurp(dir / "g" / "scores.tsv"));

  // Wrong vocabulary size is a config error.
  std::string cfg = slurp(dir / "config.txt");
  const auto pos = cfg.find("model.vocab_size = ");
  cfg.replace(pos, cfg.find('\n', pos) - pos, "model.vocab_size = 99");
  write(dir / "wrong.txt", cfg);
  CHECK(call({"train", "--config", (dir / "wrong.txt").string(), "--corpus", corpus, "--out",
              (dir / "run2").string()}).code == 2);

  CHECK(call({"eval", "--checkpoint", (dir / "missing.ckpt").string(), "--corpus", corpus, "--out",
              (dir / "x").string()}).code == 1);
  fs::remove_all(dir);
}
