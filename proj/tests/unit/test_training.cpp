#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "ctxreg/keyvalue.hpp"
#include "ctxreg/log.hpp"
#include "ctxreg/training.hpp"
#include "helpers.hpp"

using namespace ctxreg;

namespace {

TrainConfig small_config(Variant v) {
  TrainConfig c;
  c.model = testing::tiny_config(12, 1, 8, 2);
  c.model.dropout = 0.1;
  c.batch_size = 4;
  c.step_size = 5e-3;
  c.seed = 11;
  c.variant = v;
  return c;
}

std::string config_text(const TrainConfig& c) {
  std::ostringstream out;
  c.write(out);
  return out.str();
}

struct QuietLog {
  LogSink previous = set_log_sink([](LogLevel, std::string_view) {});
  ~QuietLog() { set_log_sink(previous); }
};

}  // namespace

TEST_CASE("config text round trip") {
  TrainConfig c = small_config(Variant::kB);
  c.detach_contextless = true;
  c.reg.samples = 3;
  std::istringstream in(config_text(c));
  const TrainConfig back = TrainConfig::parse(in);
  CHECK(back.variant == Variant::kB);
  CHECK(back.detach_contextless);
  CHECK(back.reg == c.reg);
  CHECK(back.model == c.model);
  CHECK(back.step_size == c.step_size);
  CHECK(config_text(back) == config_text(c));
}

TEST_CASE("config parsing rejects missing, unknown and malformed keys") {
  const std::string text = config_text(small_config(Variant::kD));
  {
    std::istringstream in(text.substr(0, text.find("train.patience")));
    CHECK_THROWS_WITH_AS(TrainConfig::parse(in), doctest::Contains("train.patience"), ConfigError);
  }
  {
    std::istringstream in(text + "train.bogus = 3\n");
    CHECK_THROWS_WITH_AS(TrainConfig::parse(in), doctest::Contains("train.bogus"), ConfigError);
  }
  {
    std::string bad = text;
    bad.replace(bad.find("train.batch_size = 4"), 20, "train.batch_size = x");
    std::istringstream in(bad);
    CHECK_THROWS_AS(TrainConfig::parse(in), ConfigError);
  }
  {
    std::string bad = text;
    bad.replace(bad.find("train.variant = d"), 17, "train.variant = q");
    std::istringstream in(bad);
    CHECK_THROWS_AS(TrainConfig::parse(in), ConfigError);
  }
}

TEST_CASE("variant wiring") {
  CHECK(small_config(Variant::kA).effective_model().context_mode == ContextMode::kContextBlind);
  CHECK_FALSE(small_config(Variant::kA).effective_reg().enabled());
  CHECK(small_config(Variant::kB).base_context() == ContextChoice::kShuffled);
  CHECK_FALSE(small_config(Variant::kB).effective_reg().enabled());
  CHECK(small_config(Variant::kC).effective_model().context_mode == ContextMode::kLargerContext);
  CHECK_FALSE(small_config(Variant::kC).effective_reg().enabled());
  CHECK(small_config(Variant::kD).effective_reg().enabled());
  CHECK(parse_variant("c") == Variant::kC);
  CHECK(to_string(Variant::kD) == "d");
}

TEST_CASE("ten seeded steps are reproducible") {
  const Corpus train = testing::random_corpus(1, 22, 12);
  const Corpus dev = testing::random_corpus(2, 4, 12);
  Trainer a(small_config(Variant::kD), train, dev), b(small_config(Variant::kD), train, dev);
  for (int i = 0; i < 10; ++i) {
    const LossBreakdown la = a.step(), lb = b.step();
    CHECK(la.total_value == lb.total_value);
  }
  auto ib = b.model().params().begin();
  for (const auto& [name, t] : a.model().params()) {
    CHECK(std::equal(t.data().begin(), t.data().end(), ib->second.data().begin()));
    ++ib;
  }
}

TEST_CASE("every training example is visited once per epoch") {
  const Corpus train = testing::random_corpus(1, 22, 12);
  const Corpus dev = testing::random_corpus(2, 4, 12);
  Trainer t(small_config(Variant::kC), train, dev);
  REQUIRE(t.batches_per_epoch() == 6);
  for (std::uint64_t epoch = 0; epoch < 2; ++epoch) {
    std::vector<int> seen(train.size(), 0);
    for (std::uint64_t s = 0; s < 6; ++s) {
      for (std::size_t i : t.batch_for_step(epoch * 6 + s).example_index) ++seen[i];
    }
    for (int n : seen) CHECK(n == 1);
  }
  CHECK(t.batch_for_step(0).example_index != t.batch_for_step(6).example_index);
}

TEST_CASE("regularized variant with zero strengths trains exactly like plain MLE") {
  const Corpus train = testing::random_corpus(3, 20, 12);
  const Corpus dev = testing::random_corpus(4, 4, 12);
  TrainConfig d = small_config(Variant::kD);
  d.reg = RegConfig::disabled();
  Trainer with_d(d, train, dev), with_c(small_config(Variant::kC), train, dev);
  for (int i = 0; i < 8; ++i) CHECK(with_d.step().total_value == with_c.step().total_value);
}

TEST_CASE("random-context variant trains on substituted contexts") {
  const Corpus train = testing::random_corpus(5, 12, 12);
  const Corpus dev = testing::random_corpus(6, 4, 12);
  Trainer b(small_config(Variant::kB), train, dev);
  const PaddedBatch batch = b.batch_for_step(0);
  NoGradGuard guard;
  b.model().set_training(false);
  const Tensor shuffled = b.model().forward_batch(batch, ContextChoice::kShuffled);
  double s = 0;
  for (Real v : shuffled.data()) s += double(v);
  // loss_at turns dropout on; with dropout off the nll must equal -mean(shuffled scores).
  TrainConfig cfg = small_config(Variant::kB);
  cfg.model.dropout = 0;
  Trainer b0(cfg, train, dev);
  const Tensor sh0 = b0.model().forward_batch(batch, ContextChoice::kShuffled);
  double s0 = 0;
  for (Real v : sh0.data()) s0 += double(v);
  const LossBreakdown l = b0.loss_at(batch, 0);
  CHECK(l.nll == doctest::Approx(-s0 / double(batch.total_tokens())).epsilon(1e-5));
  CHECK(std::isfinite(s));
}

TEST_CASE("full protocol writes its files and never raises the rate") {
  QuietLog quiet;
  const Corpus train_set = testing::random_corpus(7, 16, 12);
  const Corpus dev = testing::random_corpus(8, 6, 12);
  TrainConfig cfg = small_config(Variant::kD);
  cfg.max_epochs = 6;
  cfg.patience = 2;
  cfg.max_halvings = 100;
  const auto dir = std::filesystem::temp_directory_path() / ("ctxreg_train_" + std::to_string(sizeof(Real)));
  std::filesystem::remove_all(dir);
  const TrainResult r = ctxreg::train(cfg, train_set, dev, dir);
  CHECK(std::filesystem::exists(dir / "best.ckpt"));
  CHECK(std::filesystem::exists(dir / "last.ckpt"));
  CHECK(std::filesystem::exists(dir / "config.txt"));
  CHECK(r.evaluations == 12);
  CHECK(r.steps == 24);
  CHECK(r.final_lr <= cfg.step_size);

  std::ifstream log(dir / "train.log");
  std::string line;
  std::getline(log, line);
  CHECK(line.rfind("step\tepoch\tlr", 0) == 0);
  double prev_lr = cfg.step_size;
  std::size_t evals = 0;
  while (std::getline(log, line)) {
    std::istringstream row(line);
    std::string step, epoch, lr;
    std::getline(row, step, '\t');
    std::getline(row, epoch, '\t');
    std::getline(row, lr, '\t');
    CHECK(std::stod(lr) <= prev_lr);
    prev_lr = std::stod(lr);
    if (line.find("\t-\t") == std::string::npos && line.back() != '-') ++evals;
  }
  CHECK(evals == r.evaluations);
  CHECK(prev_lr == r.final_lr);
  std::filesystem::remove_all(dir);
}
