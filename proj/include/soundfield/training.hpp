// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "soundfield/dataset.hpp"
#include "soundfield/pconv_net.hpp"
#include "soundfield/types.hpp"

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <vector>

namespace sfr {

inline constexpr double kMissingWeight = 12.0;

/// Min-max scaling of the whole tensor (one min and max over every point
/// and frequency). A constant field maps to 0.5.
Matrix<float> scaled_ground_truth(const FieldTensor& field);

/// sum|M (p - t)| / n + w sum|(1 - M)(p - t)| / n, with n = p.size(). For a
/// single 32x32x40 sample n = 40960; for a batch this is the sample mean.
template <typename Scalar>
double masked_l1_loss(const Matrix<Scalar>& pred, const Matrix<Scalar>& target, const Matrix<Scalar>& mask,
                      double missing_weight = kMissingWeight) {
  if (pred.rows() != target.rows() || pred.cols() != target.cols() || pred.rows() != mask.rows() ||
      pred.cols() != mask.cols()) {
    throw std::invalid_argument("masked_l1_loss: shape mismatch");
  }
  const auto err = (pred.template cast<double>() - target.template cast<double>()).array().abs().eval();
  const auto m = mask.template cast<double>().array();
  const double observed = (m * err).sum();
  const double missing = ((1.0 - m) * err).sum();
  const auto n = static_cast<double>(pred.size());
  return observed / n + missing_weight * missing / n;
}

/// Subgradient of masked_l1_loss with sign(0) = 0.
template <typename Scalar>
Matrix<Scalar> masked_l1_loss_gradient(const Matrix<Scalar>& pred, const Matrix<Scalar>& target,
                                       const Matrix<Scalar>& mask, double missing_weight = kMissingWeight) {
  const auto n = static_cast<Scalar>(pred.size());
  const auto w = static_cast<Scalar>(missing_weight);
  const auto diff = (pred - target).array();
  const auto sign = (diff > Scalar(0)).template cast<Scalar>() - (diff < Scalar(0)).template cast<Scalar>();
  return (sign * (mask.array() + w * (Scalar(1) - mask.array())) / n).matrix();
}

struct StageConfig {
  int epochs = 400;
  double learning_rate = 2e-4;
  bool freeze_encoder_bn = false;
};

struct TrainConfig {
  UNetConfig net;
  StageConfig stage1{400, 2e-4, false};
  StageConfig stage2{400, 5e-5, true};
  int batch_size = 16;
  double missing_weight = kMissingWeight;
  int min_mics = 5;
  int max_mics = 55;
  std::uint64_t seed = 0;
  std::filesystem::path checkpoint_dir;   // empty: nothing written
  int snapshot_every = 0;                 // epochs between snapshots, 0 disables
  bool stage2_only = false;
  std::optional<UNetWeights<float>> initial_weights;

  void validate() const;
};

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

/// Adam over every learnable tensor; `frozen` tensors keep their values.
class AdamOptimizer {
 public:
  AdamOptimizer(const UNetWeights<float>& shape, AdamConfig config = {});

  void step(UNetWeights<float>& weights, const UNetWeights<float>& grads, double learning_rate,
            bool freeze_encoder_bn);

  [[nodiscard]] long steps() const { return t_; }

 private:
  AdamConfig config_;
  UNetWeights<float> m_;
  UNetWeights<float> v_;
  long t_ = 0;
};

struct EpochLog {
  int stage = 1;
  int epoch = 1;
  double train_loss = 0.0;
  double val_loss = 0.0;
  double elapsed_s = 0.0;
};

struct TrainResult {
  UNetWeights<float> best;
  double best_val_loss = 0.0;
  int best_stage = 0;
  int best_epoch = 0;
  std::vector<EpochLog> log;
};

/// One training sample: network input plus scaled target.
struct TrainingExample {
  NetworkInput input;
  Matrix<float> target;
};

/// Mean masked loss over `examples`, inference-mode forward passes.
double evaluate_loss(const UNetWeights<float>& weights, std::span<const TrainingExample> examples, int batch_size,
                     double missing_weight = kMissingWeight);

/// One optimization step on a batch; returns the batch loss.
double train_step(UNetWeights<float>& weights, AdamOptimizer& optimizer, std::span<const TrainingExample> batch,
                  const StageConfig& stage, double missing_weight = kMissingWeight);

/// Stage 1 then stage 2 (starting from stage 1's best weights). Each epoch
/// draws a fresh arrangement per training room; validation arrangements are
/// fixed for the run. Returns the weights with the lowest validation loss.
/// Throws NonFiniteError on a non-finite loss.
TrainResult train(const DatasetManifest& dataset, const TrainConfig& config,
                  const std::function<void(const EpochLog&)>& on_epoch = {});

/// CSV columns stage, epoch, train_loss, val_loss, elapsed_s.
void write_training_log(const std::filesystem::path& path, const std::vector<EpochLog>& log);

}  // namespace sfr
