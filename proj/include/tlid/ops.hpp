#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "tlid/tensor.hpp"

namespace tlid {

enum class Mode { Train, Eval };

/// Valid-frame lengths of a padded [N, C, T] batch.
struct SequenceMask {
  std::size_t batch = 0;
  std::vector<std::size_t> lengths;
  std::size_t max_len = 0;

  static SequenceMask full(std::size_t batch, std::size_t len);
  static SequenceMask from_lengths(std::vector<std::size_t> lengths);

  /// Throws DegenerateInputError / DimensionError when an invariant fails.
  void validate() const;
  std::size_t total_valid() const;
};

// Shapes: time-series ops accept [C, T] or batched [N, C, T].

/// Per-channel temporal filter, stride 1, zero "same" padding; K must be odd.
Tensor conv1d_depthwise(const Tensor& x, const Tensor& kernel);

/// out[o, t] = sum_i weight[o, i] x[i, t] (+ bias[o]). An undefined bias
/// tensor means no bias.
Tensor conv1d_pointwise(const Tensor& x, const Tensor& weight, const Tensor& bias = {});

struct BatchNormOptions {
  double eps = 1e-5;
  double momentum = 0.1;
};

/// Per-channel batch normalization over valid frames. Train mode uses batch
/// statistics and updates the running estimates in place (EMA with unbiased
/// variance); eval mode uses the running estimates. Padded frames produce 0.
Tensor batchnorm1d(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                   std::span<double> running_mean, std::span<double> running_var, Mode mode,
                   const SequenceMask& mask, BatchNormOptions opts = {});

/// [N, C, T] -> [N, 2C]: per-channel mean then population std over valid
/// frames, with the variance floored at var_floor before the square root.
Tensor stats_pool(const Tensor& x, const SequenceMask& mask, double var_floor = 1e-10);

/// stats_pool(relu(batchnorm1d(x, ...))) without materializing the
/// normalized or rectified activations. Same values, gradients and running
/// statistic updates as the composition; returns [N, 2C].
Tensor batchnorm_relu_stats_pool(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                                 std::span<double> running_mean, std::span<double> running_var, Mode mode,
                                 const SequenceMask& mask, BatchNormOptions opts = {}, double var_floor = 1e-10);

/// [N, C, T] -> [N, C] mean over valid frames.
Tensor global_avg_pool_time(const Tensor& x, const SequenceMask& mask);

/// Zeroes frames beyond each item's length.
Tensor mask_time(const Tensor& x, const SequenceMask& mask);

/// [N, D] x [O, D]^T + [O] -> [N, O]. Bias may be undefined.
Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias = {});

Tensor relu(const Tensor& x);
Tensor sigmoid(const Tensor& x);
/// Inverted dropout; identity in eval mode or when p == 0.
Tensor dropout(const Tensor& x, double p, Mode mode, std::uint64_t seed);
/// [N, C, T] * [N, C] broadcast over time.
Tensor channel_scale(const Tensor& x, const Tensor& scale);
Tensor add(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor sum(const Tensor& x);
/// Row softmax over the last dimension of [N, K].
Tensor softmax(const Tensor& logits);

/// sum_n w[y_n] * CE_n / sum_n w[y_n].
Tensor weighted_cross_entropy(const Tensor& logits, std::span<const std::size_t> targets,
                              std::span<const double> class_weights);
Tensor cross_entropy(const Tensor& logits, std::span<const std::size_t> targets);

/// While alive, records the smallest nonzero |input| seen by any ReLU on this
/// thread.
/// Used by gradient checks to reject inputs that sit near the kink.
class ReluMarginProbe {
 public:
  ReluMarginProbe();
  ~ReluMarginProbe();
  ReluMarginProbe(const ReluMarginProbe&) = delete;
  ReluMarginProbe& operator=(const ReluMarginProbe&) = delete;
  double min_abs_input() const { return min_; }
  void observe(double relu_input);

 private:
  double min_;
  ReluMarginProbe* previous_;
};

}  // namespace tlid
