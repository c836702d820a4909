#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

#include "helpers.hpp"
#include "tlid/checkpoint.hpp"
#include "tlid/error.hpp"

using namespace tlid;
using tlid::test::max_abs_diff;
using tlid::test::random_tensor;
using tlid::test::values;

namespace {

ModelConfig small_config() {
  auto cfg = ModelConfig::titanet(3, 1, 8, 3);
  cfg.epilogue_channels = 16;
  cfg.hidden_dim = 8;
  cfg.n_mels = 12;
  cfg.dropout_p = 0.1;
  return cfg;
}

// A model whose BN running statistics have moved away from their defaults.
Model trained_model() {
  auto m = Model::build(small_config(), 5);
  for (int i = 0; i < 3; ++i) {
    m.forward(random_tensor({4, 12, 10}, i, 1.0, false), SequenceMask::full(4, 10), Mode::Train, i);
  }
  return m;
}

std::filesystem::path temp_path(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / "tlid_checkpoint_test";
  std::filesystem::create_directories(dir);
  return dir / name;
}

}  // namespace

TEST(Checkpoint, RoundTripReproducesLogits) {
  auto m = trained_model();
  Tensor x = random_tensor({3, 12, 15}, 9, 1.0, false);
  auto mask = SequenceMask::from_lengths({15, 11, 4});
  const auto before = values(m.infer(x, mask));
  const auto path = temp_path("rt.ckpt");
  save_checkpoint(make_checkpoint(m, {"a", "b", "c"}, {4, 0.875}), path);
  auto ckpt = load_checkpoint(path);
  EXPECT_EQ(ckpt.label_set, (std::vector<std::string>{"a", "b", "c"}));
  EXPECT_EQ(ckpt.metrics.epoch, 4);
  EXPECT_EQ(ckpt.metrics.val_macro_acc, 0.875);
  EXPECT_EQ(ckpt.model_config, m.config());
  auto restored = model_from_checkpoint(ckpt);
  EXPECT_LT(max_abs_diff(before, values(restored.infer(x, mask))), 1e-5);
}

TEST(Checkpoint, ContainerIsBitExact) {
  auto ckpt = make_checkpoint(trained_model(), {"a", "b", "c"});
  const auto bytes = serialize_checkpoint(ckpt);
  EXPECT_EQ(serialize_checkpoint(deserialize_checkpoint(bytes)), bytes);
  EXPECT_EQ(std::string(bytes.begin(), bytes.begin() + 4), "TLID");
}

TEST(Checkpoint, CorruptionRejected) {
  const auto bytes = serialize_checkpoint(make_checkpoint(trained_model(), {"a", "b", "c"}));
  auto bad_magic = bytes;
  bad_magic[1] = 'X';
  EXPECT_THROW(deserialize_checkpoint(bad_magic), FormatError);

  auto bad_version = bytes;
  bad_version[4] = 99;
  EXPECT_THROW(deserialize_checkpoint(bad_version), FormatError);

  for (std::size_t pos : {std::size_t{20}, bytes.size() / 2, bytes.size() - 5}) {
    auto flipped = bytes;
    flipped[pos] ^= 0x40;
    EXPECT_THROW(deserialize_checkpoint(flipped), FormatError) << pos;
  }
  for (std::size_t len : {std::size_t{3}, std::size_t{15}, bytes.size() / 3, bytes.size() - 1}) {
    EXPECT_THROW(deserialize_checkpoint(std::span(bytes.data(), len)), FormatError) << len;
  }
}

TEST(Checkpoint, HeadShapeMismatchNamesTensor) {
  auto ckpt = make_checkpoint(trained_model(), {"a", "b", "c"});
  auto m = Model::build(small_config(), 1);
  m.replace_head(5, 1);
  try {
    load_into(m, ckpt);
    FAIL();
  } catch (const ShapeMismatchError& e) {
    EXPECT_NE(std::string(e.what()).find("decoder.fc2.weight"), std::string::npos) << e.what();
  }
}

TEST(Checkpoint, MissingFile) {
  EXPECT_THROW(load_checkpoint(temp_path("does_not_exist.ckpt")), Error);
}

TEST(Checkpoint, ConfigJsonRoundTrip) {
  auto cfg = small_config();
  cfg.mega_kernel_sizes = {5, 9, 13};
  EXPECT_EQ(model_config_from_json(model_config_to_json(cfg)), cfg);
  EXPECT_THROW(model_config_from_json("{not json"), FormatError);
}
