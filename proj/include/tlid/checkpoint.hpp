#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "tlid/model.hpp"

namespace tlid {

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct TensorRecord {
  std::string name;
  Shape shape;
  std::vector<float> values;
};

struct CheckpointMetrics {
  int epoch = -1;
  double val_macro_acc = 0.0;
};

/// Model configuration, label set, 32-bit parameters and BN running stats.
///
/// On disk: "TLID" | u32 version | u32 doc_len | UTF-8 JSON document
/// (config, labels, metrics, record counts) | tensor records (u32 name_len,
/// name, u32 rank, u32 dims[rank], f32 data) for parameters then buffers |
/// u32 CRC32 of every byte between the version field and the CRC. All
/// integers and floats are little-endian.
struct Checkpoint {
  std::uint32_t format_version = kCheckpointVersion;
  ModelConfig model_config;
  std::vector<std::string> label_set;
  std::vector<TensorRecord> params;
  std::vector<TensorRecord> buffers;
  CheckpointMetrics metrics;
};

Checkpoint make_checkpoint(const Model& model, std::vector<std::string> labels, CheckpointMetrics metrics = {});

/// Copies checkpoint tensors into a model with the same layout. Throws
/// ShapeMismatchError naming the first tensor whose name or shape differs.
void load_into(Model& model, const Checkpoint& ckpt);
Model model_from_checkpoint(const Checkpoint& ckpt);

std::vector<std::uint8_t> serialize_checkpoint(const Checkpoint& ckpt);
/// Throws FormatError on bad magic, version, CRC or truncation.
Checkpoint deserialize_checkpoint(std::span<const std::uint8_t> bytes);

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

std::string model_config_to_json(const ModelConfig& cfg);
ModelConfig model_config_from_json(const std::string& text);

}  // namespace tlid
