#include <doctest.h>

#include <filesystem>
#include <fstream>

#include "ctxreg/checkpoint.hpp"
#include "ctxreg/training.hpp"
#include "helpers.hpp"

using namespace ctxreg;

namespace {

std::filesystem::path temp_file(const std::string& name) {
  return std::filesystem::temp_directory_path() / ("ctxreg_ckpt_" + name + "_" + std::to_string(sizeof(Real)));
}

void patch_u32(const std::filesystem::path& p, std::size_t offset, std::uint32_t value) {
  std::fstream f(p, std::ios::in | std::ios::out | std::ios::binary);
  f.seekp(static_cast<std::streamoff>(offset));
  for (int i = 0; i < 4; ++i) f.put(static_cast<char>((value >> (8 * i)) & 0xff));
}

TrainConfig small_train_config() {
  TrainConfig c;
  c.model = testing::tiny_config(12, 1, 8, 2);
  c.model.dropout = 0.1;
  c.batch_size = 4;
  c.step_size = 1e-2;
  c.seed = 3;
  return c;
}

}  // namespace

TEST_CASE("checkpoint round trip restores weights, optimizer and trainer state") {
  ContextTransformer m(testing::tiny_config(10), 4);
  AdamState opt = AdamState::for_params(m.params());
  opt.step = 7;
  opt.first[0].ptr()[0] = Real(0.25);
  TrainerState ts;
  ts.step = 7;
  ts.epoch = 1;
  ts.lr = 0.0125;
  ts.plateau.best = 12.5;
  ts.plateau.has_best = true;
  ts.plateau.stagnant = 2;
  ts.plateau.halvings = 1;
  const auto path = temp_file("roundtrip");
  save_checkpoint(path, capture_checkpoint(m, &opt, ts));
  const Checkpoint back = load_checkpoint(path);
  CHECK(back.config == m.config());
  CHECK(back.trainer == ts);
  REQUIRE(back.optimizer.has_value());
  CHECK(back.optimizer->step == 7);
  CHECK(back.optimizer->first[0].at(0) == Real(0.25));

  auto restored = restore_model(back);
  auto it = restored->params().begin();
  for (const auto& [name, t] : m.params()) {
    CHECK(it->first == name);
    CHECK(std::equal(t.data().begin(), t.data().end(), it->second.data().begin()));
    ++it;
  }
  std::filesystem::remove(path);
}

TEST_CASE("checkpoints from another format version or precision are refused") {
  ContextTransformer m(testing::tiny_config(10), 4);
  const auto path = temp_file("bad");
  save_checkpoint(path, capture_checkpoint(m, nullptr, TrainerState{}));
  patch_u32(path, 8, 99);
  CHECK_THROWS_WITH_AS(load_checkpoint(path), doctest::Contains("version 99"), CheckpointError);

  save_checkpoint(path, capture_checkpoint(m, nullptr, TrainerState{}));
  patch_u32(path, 12, sizeof(Real) == 8 ? 4 : 8);
  CHECK_THROWS_WITH_AS(load_checkpoint(path), doctest::Contains("-bit values"), CheckpointError);

  {
    std::ofstream junk(path, std::ios::binary);
    junk << "not a checkpoint";
  }
  CHECK_THROWS_AS(load_checkpoint(path), CheckpointError);
  std::filesystem::remove(path);
  CHECK_THROWS_AS(load_checkpoint(path), CheckpointError);
}

TEST_CASE("weights cannot be loaded into a different layout") {
  ContextTransformer a(testing::tiny_config(10, 1), 1);
  ContextTransformer b(testing::tiny_config(10, 2), 1);
  CHECK_THROWS_AS(load_weights(b, capture_checkpoint(a, nullptr, TrainerState{})), CheckpointError);
}

TEST_CASE("a resumed trainer continues with the identical next step") {
  const Corpus train = testing::random_corpus(21, 18, 12);
  const Corpus dev = testing::random_corpus(22, 4, 12);
  const TrainConfig cfg = small_train_config();

  Trainer first(cfg, train, dev);
  for (int i = 0; i < 6; ++i) first.step();
  const auto path = temp_file("resume");
  save_checkpoint(path, first.checkpoint());
  const LossBreakdown expected = first.step();

  Trainer second(cfg, train, dev);
  second.restore(load_checkpoint(path));
  CHECK(second.state().step == 6);
  const LossBreakdown resumed = second.step();
  CHECK(resumed.total_value == expected.total_value);
  CHECK(resumed.nll == expected.nll);
  std::filesystem::remove(path);
}
