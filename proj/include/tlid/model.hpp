#pragma once

#include <algorithm>
#include <cstdint>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "tlid/features.hpp"
#include "tlid/ops.hpp"
#include "tlid/tensor.hpp"

namespace tlid {

/// TitaNet-LID-BxRxC architecture description.
struct ModelConfig {
  int num_blocks = 3;   // B: residual mega-blocks
  int repeats = 5;      // R: basic blocks per mega-block
  int channels = 1024;  // C
  std::vector<int> mega_kernel_sizes{7, 11, 15};
  int prologue_kernel = 3;
  int prologue_channels = 0;  // 0 means `channels`
  int epilogue_kernel = 1;
  int epilogue_channels = 3072;
  int se_reduction = 8;
  double dropout_p = 0.0;          // after ReLU in every basic block
  double decoder_dropout_p = 0.0;  // after the hidden decoder ReLU
  int hidden_dim = 512;
  int num_classes = 107;
  int n_mels = 80;

  /// B x R x C with default kernels (7, 11, 15 for B = 3; 7 + 4b otherwise).
  static ModelConfig titanet(int blocks, int repeats, int channels, int num_classes);

  int prologue_out() const { return prologue_channels > 0 ? prologue_channels : channels; }
  int se_bottleneck() const { return std::max(1, channels / se_reduction); }
  std::string name() const;
  /// Throws ConfigError naming the offending field.
  void validate() const;

  bool operator==(const ModelConfig&) const = default;
};

/// Global average pool -> linear -> ReLU -> linear -> sigmoid, then the
/// resulting [N, C] gate rescales x over time.
Tensor squeeze_excite(const Tensor& x, const SequenceMask& mask, const Tensor& fc1_w, const Tensor& fc1_b,
                      const Tensor& fc2_w, const Tensor& fc2_b);

/// Closed-form parameter count; buffers (BN running stats) are excluded.
std::uint64_t param_count_formula(const ModelConfig& cfg);

/// Analytic forward FLOPs for a single item of `frames` frames: work that is
/// proportional to T (convolutions, normalization, pooling, activations) and
/// work that is not (SE bottleneck layers, decoder).
struct FlopCount {
  std::uint64_t time_proportional = 0;
  std::uint64_t fixed = 0;
  std::uint64_t total() const { return time_proportional + fixed; }
};
FlopCount forward_flops(const ModelConfig& cfg, std::size_t frames);

struct NamedParameter {
  std::string name;
  Tensor tensor;
};

struct NamedBuffer {
  std::string name;
  std::vector<double> values;
};

/// Zero-padded [N, n_mels, T_max] batch and its mask.
struct FeatureBatch {
  Tensor features;
  SequenceMask mask;
};
FeatureBatch make_batch(std::span<const FeatureMatrix* const> items);
FeatureBatch make_batch(const std::vector<FeatureMatrix>& items);

class Model {
 public:
  /// Kaiming-uniform (fan-in) weights, zero biases and beta, unit gamma.
  static Model build(const ModelConfig& cfg, std::uint64_t seed);

  Model(const Model& other);
  Model& operator=(const Model& other);
  Model(Model&&) noexcept = default;
  Model& operator=(Model&&) noexcept = default;

  const ModelConfig& config() const { return cfg_; }

  /// features: [N, n_mels, T]. Train mode uses batch BN statistics (and
  /// updates running estimates) plus dropout seeded by `seed`. With a frozen
  /// encoder, the encoder always runs in eval mode.
  Tensor forward(const Tensor& features, const SequenceMask& mask, Mode mode, std::uint64_t seed = 0);
  /// Eval-mode forward without tape or state mutation; safe to call
  /// concurrently on a shared model.
  Tensor infer(const Tensor& features, const SequenceMask& mask) const;

  std::vector<NamedParameter>& parameters() { return params_; }
  const std::vector<NamedParameter>& parameters() const { return params_; }
  std::vector<NamedBuffer>& buffers() { return buffers_; }
  const std::vector<NamedBuffer>& buffers() const { return buffers_; }
  const Tensor& parameter(const std::string& name) const;

  std::uint64_t count_params() const;

  /// New classifier width; the final linear layer is re-initialized from
  /// `seed`, everything else is copied bit-exactly.
  void replace_head(int new_num_classes, std::uint64_t seed);
  /// Marks every non-decoder parameter frozen and detaches it from the tape.
  void freeze_encoder();
  bool encoder_frozen() const { return encoder_frozen_; }
  const std::set<std::string>& frozen_names() const { return frozen_; }
  bool is_frozen(const std::string& name) const { return frozen_.count(name) > 0; }

  void set_dropout(double block_p, double decoder_p);

  static bool is_decoder_parameter(const std::string& name);

 private:
  struct BnRef {
    std::size_t gamma, beta, stats;  // stats: buffers_[stats] mean, [stats + 1] var
  };
  struct BasicRef {
    std::size_t dw, pw;
    BnRef bn;
  };
  struct MegaRef {
    std::vector<BasicRef> subs;
    std::size_t se_fc1_w, se_fc1_b, se_fc2_w, se_fc2_b;
    std::size_t res_pw;
    BnRef res_bn;
  };

  Model() = default;
  std::size_t add_param(std::string name, Shape shape);
  BnRef add_bn(const std::string& prefix, std::size_t channels);
  BasicRef add_basic(const std::string& prefix, std::size_t cin, std::size_t cout, std::size_t kernel);
  void init_param(std::size_t index, std::uint64_t seed);
  Tensor run(const Tensor& features, const SequenceMask& mask, Mode mode, std::uint64_t seed) const;
  Tensor run_bn(const Tensor& x, const BnRef& bn, Mode mode, const SequenceMask& mask) const;
  Tensor run_basic(const Tensor& x, const BasicRef& b, Mode mode, const SequenceMask& mask) const;

  ModelConfig cfg_;
  std::vector<NamedParameter> params_;
  // Mutated through const run() only in train mode; see forward()/infer().
  mutable std::vector<NamedBuffer> buffers_;
  BasicRef prologue_{};
  std::vector<MegaRef> mega_;
  BasicRef epilogue_{};
  std::size_t fc1_w_ = 0, fc1_b_ = 0, fc2_w_ = 0, fc2_b_ = 0;
  std::uint64_t seed_ = 0;
  std::set<std::string> frozen_;
  bool encoder_frozen_ = false;
};

}  // namespace tlid
