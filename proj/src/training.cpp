// SPDX-License-Identifier: Apache-2.0
#include "soundfield/training.hpp"

#include "soundfield/checkpoint.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <numeric>

namespace sfr {

Matrix<float> scaled_ground_truth(const FieldTensor& field) {
  if (!field.values.allFinite()) throw std::invalid_argument("ground truth must be finite");
  const Matrix<double> s = field.values.cast<double>();
  const double lo = s.minCoeff();
  const double hi = s.maxCoeff();
  if (!(hi > lo)) return Matrix<float>::Constant(s.rows(), s.cols(), 0.5f);
  return ((s.array() - lo) / (hi - lo)).matrix().cast<float>();
}

void TrainConfig::validate() const {
  net.validate();
  if (!(stage1.learning_rate > 0.0 && stage2.learning_rate > 0.0)) {
    throw std::invalid_argument("learning rates must be positive");
  }
  if (stage1.epochs < 0 || stage2.epochs < 0) throw std::invalid_argument("epoch counts must be non-negative");
  if (batch_size < 1) throw std::invalid_argument("batch size must be positive");
  if (min_mics < 1 || max_mics > kCoarsePlaneSize || min_mics > max_mics) {
    throw std::invalid_argument("microphone count range must lie in [1, 64]");
  }
  if (net.in_channels != kNumFrequencies || net.out_channels != kNumFrequencies || net.input_size != kFineN) {
    throw std::invalid_argument("training needs a 40-channel 32x32 network");
  }
  if (stage2_only && !initial_weights) throw std::invalid_argument("stage-2-only training needs initial weights");
}

namespace {

template <typename Weights>
std::vector<std::tuple<TensorInfo, decltype(std::declval<Weights&>().head.weight.data()), Eigen::Index>> tensors(
    Weights& w) {
  std::vector<std::tuple<TensorInfo, decltype(std::declval<Weights&>().head.weight.data()), Eigen::Index>> out;
  for_each_tensor(w, [&](const TensorInfo& info, auto* data, Eigen::Index size) { out.emplace_back(info, data, size); });
  return out;
}

bool is_frozen(const TensorInfo& info, bool freeze_encoder_bn) {
  return !info.learnable() ||
         (freeze_encoder_bn && info.encoder_batch_norm &&
          (info.role == TensorRole::kScale || info.role == TensorRole::kShift));
}

}  // namespace

AdamOptimizer::AdamOptimizer(const UNetWeights<float>& shape, AdamConfig config)
    : config_(config), m_(shape.zeros_like()), v_(shape.zeros_like()) {}

void AdamOptimizer::step(UNetWeights<float>& weights, const UNetWeights<float>& grads, double learning_rate,
                         bool freeze_encoder_bn) {
  ++t_;
  const double bias1 = 1.0 - std::pow(config_.beta1, static_cast<double>(t_));
  const double bias2 = 1.0 - std::pow(config_.beta2, static_cast<double>(t_));
  const auto b1 = static_cast<float>(config_.beta1);
  const auto b2 = static_cast<float>(config_.beta2);
  const auto step_size = static_cast<float>(learning_rate / bias1);
  const auto eps = static_cast<float>(config_.epsilon);
  const auto inv_sqrt_bias2 = static_cast<float>(1.0 / std::sqrt(bias2));

  auto w = tensors(weights);
  const auto g = tensors(grads);
  auto m = tensors(m_);
  auto v = tensors(v_);
  if (w.size() != g.size()) throw std::invalid_argument("gradient structure does not match the weights");
  for (size_t i = 0; i < w.size(); ++i) {
    const auto& [info, data, size] = w[i];
    if (is_frozen(info, freeze_encoder_bn)) continue;
    Eigen::Map<Vector<float>> param(data, size);
    Eigen::Map<const Vector<float>> grad(std::get<1>(g[i]), size);
    Eigen::Map<Vector<float>> mom(std::get<1>(m[i]), size);
    Eigen::Map<Vector<float>> vel(std::get<1>(v[i]), size);
    mom = b1 * mom + (1.0f - b1) * grad;
    vel = b2 * vel + (1.0f - b2) * grad.cwiseAbs2();
    param.array() -= step_size * mom.array() / (vel.array().sqrt() * inv_sqrt_bias2 + eps);
  }
}

namespace {

FeatureMap<float> batch_inputs(std::span<const TrainingExample> examples) {
  std::vector<NetworkInput> inputs;
  inputs.reserve(examples.size());
  for (const auto& e : examples) inputs.push_back(e.input);
  return make_feature_map<float>(inputs);
}

Matrix<float> batch_targets(std::span<const TrainingExample> examples) {
  Matrix<float> t(examples.front().target.rows(), static_cast<Eigen::Index>(examples.size()) * kPlaneSize);
  for (size_t b = 0; b < examples.size(); ++b) {
    t.middleCols(static_cast<Eigen::Index>(b) * kPlaneSize, kPlaneSize) = examples[b].target;
  }
  return t;
}

TrainingExample make_example(const FieldTensor& field, const Matrix<float>& target, Rng& rng, int min_mics,
                             int max_mics) {
  std::uniform_int_distribution<int> count(min_mics, max_mics);
  const MicArrangement arrangement = sample_arrangement(rng, count(rng));
  return {prepare_input(observe(field, arrangement)), target};
}

constexpr std::uint64_t kValidationStream = 0x7a11da7eULL;
constexpr std::uint64_t kOrderStream = 0x0dde7ULL;

}  // namespace

double evaluate_loss(const UNetWeights<float>& weights, std::span<const TrainingExample> examples, int batch_size,
                     double missing_weight) {
  if (examples.empty()) return 0.0;
  double total = 0.0;
  for (size_t start = 0; start < examples.size(); start += static_cast<size_t>(batch_size)) {
    const auto batch = examples.subspan(start, std::min(examples.size() - start, static_cast<size_t>(batch_size)));
    const FeatureMap<float> input = batch_inputs(batch);
    const Matrix<float> pred = unet_forward(input, weights, ForwardOptions{});
    total += masked_l1_loss(pred, batch_targets(batch), input.mask, missing_weight) * static_cast<double>(batch.size());
  }
  return total / static_cast<double>(examples.size());
}

double train_step(UNetWeights<float>& weights, AdamOptimizer& optimizer, std::span<const TrainingExample> batch,
                  const StageConfig& stage, double missing_weight) {
  const FeatureMap<float> input = batch_inputs(batch);
  const Matrix<float> target = batch_targets(batch);
  const ForwardOptions options{true, stage.freeze_encoder_bn};
  UNetTrace<float> trace;
  const Matrix<float> pred = unet_forward(input, weights, options, &trace);
  const double loss = masked_l1_loss(pred, target, input.mask, missing_weight);
  if (!std::isfinite(loss)) throw NonFiniteError("non-finite training loss");
  const Matrix<float> upstream = masked_l1_loss_gradient(pred, target, input.mask, missing_weight);
  const UNetWeights<float> grads = unet_backward(trace, weights, upstream);
  optimizer.step(weights, grads, stage.learning_rate, stage.freeze_encoder_bn);
  update_running_statistics(weights, trace);
  return loss;
}

TrainResult train(const DatasetManifest& dataset, const TrainConfig& config,
                  const std::function<void(const EpochLog&)>& on_epoch) {
  config.validate();
  const std::vector<int> train_ids = dataset.ids(Split::kTrain);
  const std::vector<int> val_ids = dataset.ids(Split::kValidation);
  if (train_ids.empty() || val_ids.empty()) throw std::invalid_argument("dataset needs both a train and a validation split");

  std::vector<FieldTensor> train_fields;
  std::vector<Matrix<float>> train_targets;
  for (int id : train_ids) {
    train_fields.push_back(load_field(dataset, id));
    train_targets.push_back(scaled_ground_truth(train_fields.back()));
  }
  std::vector<TrainingExample> validation;
  for (int id : val_ids) {
    const FieldTensor field = load_field(dataset, id);
    Rng rng = derive_rng(config.seed, kValidationStream, static_cast<std::uint64_t>(id));
    validation.push_back(make_example(field, scaled_ground_truth(field), rng, config.min_mics, config.max_mics));
  }

  const auto start = std::chrono::steady_clock::now();
  TrainResult result;
  UNetWeights<float> weights =
      config.initial_weights ? *config.initial_weights : initialize_weights<float>(config.net, config.seed);
  if (weights.config != config.net && config.initial_weights) {
    throw std::invalid_argument("initial weights do not match the network configuration");
  }
  result.best = weights;
  result.best_val_loss = std::numeric_limits<double>::infinity();

  const auto run_stage = [&](int stage_number, const StageConfig& stage) {
    AdamOptimizer optimizer(weights);
    std::vector<size_t> order(train_ids.size());
    for (int epoch = 1; epoch <= stage.epochs; ++epoch) {
      std::vector<TrainingExample> examples;
      examples.reserve(train_ids.size());
      for (size_t r = 0; r < train_ids.size(); ++r) {
        Rng rng = derive_rng(config.seed, static_cast<std::uint64_t>(stage_number), static_cast<std::uint64_t>(epoch),
                             static_cast<std::uint64_t>(train_ids[r]) + 1);
        examples.push_back(make_example(train_fields[r], train_targets[r], rng, config.min_mics, config.max_mics));
      }
      std::iota(order.begin(), order.end(), size_t{0});
      Rng order_rng = derive_rng(config.seed, static_cast<std::uint64_t>(stage_number),
                                 static_cast<std::uint64_t>(epoch), kOrderStream);
      std::shuffle(order.begin(), order.end(), order_rng);

      double train_total = 0.0;
      for (size_t begin = 0; begin < order.size(); begin += static_cast<size_t>(config.batch_size)) {
        std::vector<TrainingExample> batch;
        for (size_t i = begin; i < std::min(order.size(), begin + static_cast<size_t>(config.batch_size)); ++i) {
          batch.push_back(examples[order[i]]);
        }
        train_total += train_step(weights, optimizer, batch, stage, config.missing_weight) * static_cast<double>(batch.size());
      }

      EpochLog entry;
      entry.stage = stage_number;
      entry.epoch = epoch;
      entry.train_loss = train_total / static_cast<double>(order.size());
      entry.val_loss = evaluate_loss(weights, validation, config.batch_size, config.missing_weight);
      entry.elapsed_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
      if (!std::isfinite(entry.val_loss) || !std::isfinite(entry.train_loss)) {
        throw NonFiniteError("non-finite loss at stage " + std::to_string(stage_number) + " epoch " +
                             std::to_string(epoch));
      }
      result.log.push_back(entry);
      if (entry.val_loss < result.best_val_loss) {
        result.best_val_loss = entry.val_loss;
        result.best = weights;
        result.best_stage = stage_number;
        result.best_epoch = epoch;
      }
      if (!config.checkpoint_dir.empty() && config.snapshot_every > 0 && epoch % config.snapshot_every == 0) {
        save_checkpoint(weights, config.checkpoint_dir /
                                     ("stage" + std::to_string(stage_number) + "_epoch" + std::to_string(epoch) + ".ckpt"));
      }
      if (on_epoch) on_epoch(entry);
    }
  };

  if (!config.stage2_only) {
    run_stage(1, config.stage1);
    if (result.best_stage == 1) weights = result.best;
  }
  run_stage(2, config.stage2);

  if (result.log.empty()) result.best_val_loss = evaluate_loss(weights, validation, config.batch_size, config.missing_weight);
  if (!config.checkpoint_dir.empty()) {
    save_checkpoint(result.best, config.checkpoint_dir / "best.ckpt");
    write_training_log(config.checkpoint_dir / "train_log.csv", result.log);
  }
  return result;
}

void write_training_log(const std::filesystem::path& path, const std::vector<EpochLog>& log) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << "stage,epoch,train_loss,val_loss,elapsed_s\n" << std::setprecision(17);
  for (const auto& e : log) {
    out << e.stage << ',' << e.epoch << ',' << e.train_loss << ',' << e.val_loss << ',' << std::setprecision(6)
        << e.elapsed_s << std::setprecision(17) << '\n';
  }
  if (!out) throw std::runtime_error("failed writing " + path.string());
}

}  // namespace sfr
