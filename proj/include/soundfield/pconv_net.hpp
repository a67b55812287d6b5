// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "soundfield/preprocess.hpp"
#include "soundfield/types.hpp"

#include <algorithm>
#include <cstdint>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace sfr {

class NonFiniteError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Values and validity mask, both channels x (batch * height * width).
/// Column b * height * width + y * width + x addresses sample b.
template <typename Scalar>
struct FeatureMap {
  int batch = 0;
  int height = 0;
  int width = 0;
  Matrix<Scalar> values;
  Matrix<Scalar> mask;

  [[nodiscard]] int channels() const { return static_cast<int>(values.rows()); }
  [[nodiscard]] int plane() const { return height * width; }
  void check() const;
};

/// Stacks network inputs into a batch of K-channel 32x32 feature maps.
template <typename Scalar>
FeatureMap<Scalar> make_feature_map(std::span<const NetworkInput> inputs);

struct ConvGeometry {
  int kernel = 3;
  int stride = 1;
  int padding = 1;

  [[nodiscard]] int output_size(int input) const { return (input + 2 * padding - kernel) / stride + 1; }
};

template <typename Scalar>
struct ConvLayer {
  /// out_channels x (in_channels * k * k); column (c * k + ky) * k + kx.
  Matrix<Scalar> weight;
  Vector<Scalar> bias;
  ConvGeometry geometry;

  [[nodiscard]] int in_channels() const {
    return static_cast<int>(weight.cols()) / (geometry.kernel * geometry.kernel);
  }
  [[nodiscard]] int out_channels() const { return static_cast<int>(weight.rows()); }
};

template <typename Scalar>
struct BatchNorm {
  Vector<Scalar> gamma;
  Vector<Scalar> beta;
  Vector<Scalar> running_mean;
  Vector<Scalar> running_var;
};

inline constexpr double kBatchNormEpsilon = 1e-3;
inline constexpr double kBatchNormMomentum = 0.99;

struct UNetConfig {
  int depth = 4;
  int base_filters = 64;
  std::vector<int> encoder_kernels{7, 5, 3, 3};
  std::vector<int> decoder_kernels{3, 3, 3, 3};
  double leaky_slope = 0.2;
  int in_channels = kNumFrequencies;
  int out_channels = kNumFrequencies;
  int input_size = kFineN;
  std::vector<bool> encoder_batch_norm{true, true, true, true};
  std::vector<bool> decoder_batch_norm{true, true, true, true};

  /// Small network with uniform 3x3 kernels and batch norm everywhere.
  static UNetConfig small(int depth, int base_filters, int channels, int input_size);

  [[nodiscard]] int encoder_filters(int stage) const { return base_filters << stage; }
  /// Decoder stage s mirrors encoder stage s - 1; stage 0 halves the base width.
  [[nodiscard]] int decoder_filters(int stage) const {
    return stage == 0 ? std::max(1, base_filters / 2) : base_filters << (stage - 1);
  }
  [[nodiscard]] int decoder_upsampled_channels(int stage) const {
    return stage + 1 < depth ? decoder_filters(stage + 1) : encoder_filters(depth - 1);
  }
  [[nodiscard]] int decoder_skip_channels(int stage) const {
    return stage == 0 ? in_channels : encoder_filters(stage - 1);
  }

  void validate() const;
  bool operator==(const UNetConfig&) const = default;
};

template <typename Scalar>
struct UNetWeights {
  UNetConfig config;
  std::vector<ConvLayer<Scalar>> encoder;   // stage s: stride 2
  std::vector<ConvLayer<Scalar>> decoder;   // stage s: output at encoder s - 1 resolution
  std::vector<std::optional<BatchNorm<Scalar>>> encoder_bn;
  std::vector<std::optional<BatchNorm<Scalar>>> decoder_bn;
  ConvLayer<Scalar> head;                   // 1x1 projection

  template <typename Other>
  [[nodiscard]] UNetWeights<Other> cast() const;

  /// Same shapes, all entries zero.
  [[nodiscard]] UNetWeights zeros_like() const;
};

/// He-uniform weights (limit sqrt(6 / fan_in)), zero biases, identity batch norm.
template <typename Scalar>
UNetWeights<Scalar> initialize_weights(const UNetConfig& config, std::uint64_t seed);

enum class TensorRole { kWeight, kBias, kScale, kShift, kRunningMean, kRunningVar };

struct TensorInfo {
  std::string name;
  TensorRole role;
  bool encoder_batch_norm = false;

  [[nodiscard]] bool learnable() const { return role != TensorRole::kRunningMean && role != TensorRole::kRunningVar; }
};

/// Calls fn(info, data, size) for every stored tensor in checkpoint order:
/// encoder stages, decoder stages (0 first), head; within a stage weight,
/// bias, then gamma, beta, running mean, running variance.
template <typename Weights, typename Fn>
void for_each_tensor(Weights& weights, Fn&& fn) {
  const auto visit_conv = [&](const std::string& prefix, auto& conv) {
    fn(TensorInfo{prefix + ".weight", TensorRole::kWeight}, conv.weight.data(), conv.weight.size());
    fn(TensorInfo{prefix + ".bias", TensorRole::kBias}, conv.bias.data(), conv.bias.size());
  };
  const auto visit_bn = [&](const std::string& prefix, auto& bn, bool encoder) {
    if (!bn) return;
    fn(TensorInfo{prefix + ".bn.gamma", TensorRole::kScale, encoder}, bn->gamma.data(), bn->gamma.size());
    fn(TensorInfo{prefix + ".bn.beta", TensorRole::kShift, encoder}, bn->beta.data(), bn->beta.size());
    fn(TensorInfo{prefix + ".bn.running_mean", TensorRole::kRunningMean, encoder}, bn->running_mean.data(),
       bn->running_mean.size());
    fn(TensorInfo{prefix + ".bn.running_var", TensorRole::kRunningVar, encoder}, bn->running_var.data(),
       bn->running_var.size());
  };
  for (size_t s = 0; s < weights.encoder.size(); ++s) {
    const std::string prefix = "encoder." + std::to_string(s);
    visit_conv(prefix, weights.encoder[s]);
    visit_bn(prefix, weights.encoder_bn[s], true);
  }
  for (size_t s = 0; s < weights.decoder.size(); ++s) {
    const std::string prefix = "decoder." + std::to_string(s);
    visit_conv(prefix, weights.decoder[s]);
    visit_bn(prefix, weights.decoder_bn[s], false);
  }
  visit_conv("head", weights.head);
}

/// Learnable scalars (weights, biases, batch-norm scale and shift).
template <typename Scalar>
std::int64_t parameter_count(const UNetWeights<Scalar>& weights);

// ---------------------------------------------------------------------------
// Layers
// ---------------------------------------------------------------------------

template <typename Scalar>
struct PartialConvTrace {
  Matrix<Scalar> columns;   // im2col of values * mask
  RowVector<Scalar> ratio;  // sum(1) / sum(M_w), 0 where the window saw nothing
  RowVector<Scalar> valid;  // 1 where sum(M_w) > 0
};

/// Mask-renormalized convolution with zero padding (padding cells are
/// mask 0). Windows with no valid input produce 0 without bias; the output
/// mask is 1 wherever the window saw a valid input, on every channel.
template <typename Scalar>
FeatureMap<Scalar> partial_conv(const FeatureMap<Scalar>& input, const ConvLayer<Scalar>& layer,
                                PartialConvTrace<Scalar>* trace = nullptr);

template <typename Scalar>
struct ConvGradient {
  Matrix<Scalar> weight;
  Vector<Scalar> bias;
  Matrix<Scalar> input;   // empty unless requested
};

/// Masks are constants: gradients flow through values only.
template <typename Scalar>
ConvGradient<Scalar> partial_conv_backward(const FeatureMap<Scalar>& input, const ConvLayer<Scalar>& layer,
                                           const PartialConvTrace<Scalar>& trace, const Matrix<Scalar>& grad_output,
                                           bool need_input_gradient);

template <typename Scalar>
Matrix<Scalar> upsample_nearest(const Matrix<Scalar>& values, int batch, int height, int width);

/// Adjoint of upsample_nearest: sums each 2x2 block.
template <typename Scalar>
Matrix<Scalar> upsample_nearest_backward(const Matrix<Scalar>& grad, int batch, int height, int width);

enum class BatchNormMode { kBatchStatistics, kRunningStatistics };

struct ForwardOptions {
  bool training = false;
  bool freeze_encoder_bn = false;   // encoder batch norm uses running statistics even when training

  [[nodiscard]] BatchNormMode encoder_mode() const {
    return training && !freeze_encoder_bn ? BatchNormMode::kBatchStatistics : BatchNormMode::kRunningStatistics;
  }
  [[nodiscard]] BatchNormMode decoder_mode() const {
    return training ? BatchNormMode::kBatchStatistics : BatchNormMode::kRunningStatistics;
  }
};

template <typename Scalar>
struct StageTrace {
  FeatureMap<Scalar> conv_input;
  PartialConvTrace<Scalar> conv;
  Matrix<Scalar> normalized;        // batch-norm x-hat, empty without batch norm
  Vector<Scalar> batch_mean;
  Vector<Scalar> batch_var;
  Vector<Scalar> inv_std;
  BatchNormMode bn_mode = BatchNormMode::kRunningStatistics;
  bool has_bn = false;
  Matrix<Scalar> pre_activation;
  FeatureMap<Scalar> output;
};

/// Stride-2 partial conv -> batch norm (if present) -> ReLU.
template <typename Scalar>
FeatureMap<Scalar> encoder_stage(const FeatureMap<Scalar>& input, const ConvLayer<Scalar>& conv,
                                 const std::optional<BatchNorm<Scalar>>& bn, BatchNormMode mode,
                                 StageTrace<Scalar>* trace = nullptr);

/// Nearest 2x upsample -> concat [upsampled; skip] -> partial conv ->
/// batch norm (if present) -> LeakyReLU.
template <typename Scalar>
FeatureMap<Scalar> decoder_stage(const FeatureMap<Scalar>& input, const FeatureMap<Scalar>& skip,
                                 const ConvLayer<Scalar>& conv, const std::optional<BatchNorm<Scalar>>& bn,
                                 BatchNormMode mode, double leaky_slope, StageTrace<Scalar>* trace = nullptr);

template <typename Scalar>
struct UNetTrace {
  ForwardOptions options;
  FeatureMap<Scalar> input;
  std::vector<StageTrace<Scalar>> encoder;
  std::vector<StageTrace<Scalar>> decoder;
  Matrix<Scalar> output;
};

/// Full network: returns out_channels x (batch * H * W) in (0, 1). Throws
/// NonFiniteError if any activation is not finite.
template <typename Scalar>
Matrix<Scalar> unet_forward(const FeatureMap<Scalar>& input, const UNetWeights<Scalar>& weights,
                            const ForwardOptions& options = {}, UNetTrace<Scalar>* trace = nullptr);

/// Convenience overload for preprocessed inputs in inference mode.
Matrix<float> unet_forward(std::span<const NetworkInput> inputs, const UNetWeights<float>& weights);

/// Gradient of a scalar loss with respect to every stored tensor, given
/// dLoss/dOutput. Running-statistic entries of the result are zero.
template <typename Scalar>
UNetWeights<Scalar> unet_backward(const UNetTrace<Scalar>& trace, const UNetWeights<Scalar>& weights,
                                  const Matrix<Scalar>& upstream);

/// Exponential moving average of the batch statistics recorded in `trace`.
template <typename Scalar>
void update_running_statistics(UNetWeights<Scalar>& weights, const UNetTrace<Scalar>& trace,
                               double momentum = kBatchNormMomentum);

// ---------------------------------------------------------------------------

template <typename Scalar>
template <typename Other>
UNetWeights<Other> UNetWeights<Scalar>::cast() const {
  UNetWeights<Other> out;
  out.config = config;
  const auto conv = [](const ConvLayer<Scalar>& c) {
    return ConvLayer<Other>{c.weight.template cast<Other>(), c.bias.template cast<Other>(), c.geometry};
  };
  const auto norm = [](const std::optional<BatchNorm<Scalar>>& b) -> std::optional<BatchNorm<Other>> {
    if (!b) return std::nullopt;
    return BatchNorm<Other>{b->gamma.template cast<Other>(), b->beta.template cast<Other>(),
                            b->running_mean.template cast<Other>(), b->running_var.template cast<Other>()};
  };
  for (const auto& c : encoder) out.encoder.push_back(conv(c));
  for (const auto& c : decoder) out.decoder.push_back(conv(c));
  for (const auto& b : encoder_bn) out.encoder_bn.push_back(norm(b));
  for (const auto& b : decoder_bn) out.decoder_bn.push_back(norm(b));
  out.head = conv(head);
  return out;
}

template <typename Scalar>
UNetWeights<Scalar> UNetWeights<Scalar>::zeros_like() const {
  UNetWeights out = *this;
  for_each_tensor(out, [](const TensorInfo&, Scalar* data, Eigen::Index size) {
    Eigen::Map<Vector<Scalar>>(data, size).setZero();
  });
  return out;
}

}  // namespace sfr
