// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "soundfield/dataset.hpp"
#include "soundfield/metrics.hpp"
#include "soundfield/pconv_net.hpp"
#include "soundfield/preprocess.hpp"
#include "soundfield/types.hpp"

#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace sfr {

struct EvalConfig {
  std::vector<int> n_mics{5, 15, 35, 55};
  int arrangements_per_room = 200;
  int max_rooms = 10;          // 0 keeps every room handed in
  std::uint64_t seed = 0;
  double confidence = 0.95;
  int threads = 1;
  int batch_size = 16;

  void validate() const;
};

/// One reconstruction problem: a room, a microphone count and one arrangement.
struct Trial {
  int room_id = 0;
  int n_mic = 0;
  int arrangement_id = 0;
  const FieldTensor* truth = nullptr;
  Observations observations;
};

/// Produces physical-magnitude fields for a batch of trials.
class Reconstructor {
 public:
  virtual ~Reconstructor() = default;
  [[nodiscard]] virtual std::string name() const = 0;
  [[nodiscard]] virtual std::vector<FieldTensor> reconstruct(std::span<const Trial> trials) const = 0;
};

/// Scaled-domain prediction for a batch: K x (batch * 1024), values in [0, 1].
using ScaledPredictor = std::function<Matrix<float>(std::span<const Trial>, std::span<const NetworkInput>)>;

ScaledPredictor unet_predictor(std::shared_ptr<const UNetWeights<float>> weights);

/// Returns the min-max scaled ground truth. Only useful to test the harness.
ScaledPredictor oracle_predictor();

/// preprocess -> predictor -> least-squares rescale.
class NetworkReconstructor : public Reconstructor {
 public:
  NetworkReconstructor(ScaledPredictor predictor, std::string name = "network");
  [[nodiscard]] std::string name() const override { return name_; }
  [[nodiscard]] std::vector<FieldTensor> reconstruct(std::span<const Trial> trials) const override;

 private:
  ScaledPredictor predictor_;
  std::string name_;
};

enum class BaselineMethod { kNearest, kInverseDistance };

BaselineMethod parse_baseline_method(const std::string& name);
std::string baseline_name(BaselineMethod method);

/// Interpolation weights of the observed points at fine index (fi, fj),
/// inverse squared distance in fine-index units. An observed point gets
/// weight 1 on itself.
Vector<double> idw_weights(const MicArrangement& arrangement, int fi, int fj);

/// Nearest observed point (Euclidean in fine-index units, ties to the
/// smallest coarse index) or inverse-distance weighting with power 2.
FieldTensor baseline_reconstruct(BaselineMethod method, const Observations& observations, const RoomSpec& room);

class BaselineReconstructor : public Reconstructor {
 public:
  explicit BaselineReconstructor(BaselineMethod method) : method_(method) {}
  [[nodiscard]] std::string name() const override { return baseline_name(method_); }
  [[nodiscard]] std::vector<FieldTensor> reconstruct(std::span<const Trial> trials) const override;

 private:
  BaselineMethod method_;
};

struct EvalRecord {
  int room_id = 0;
  int arrangement_id = 0;
  int n_mic = 0;
  std::vector<double> nmse;      // linear
  std::vector<double> nmse_db;
  std::vector<double> mssim;
};

/// 10 log10 of the NMSE averaged linearly over frequency bins [first, last).
double band_nmse_db(const EvalRecord& record, int first = 0, int last = kNumFrequencies);

struct AggregateRow {
  int n_mic = 0;
  double frequency_hz = 0.0;
  int count = 0;
  double mean_nmse_db = 0.0;
  double nmse_ci_lo = 0.0;
  double nmse_ci_hi = 0.0;
  double mean_mssim = 0.0;
  double mssim_ci_lo = 0.0;
  double mssim_ci_hi = 0.0;
};

struct EvalResult {
  std::vector<EvalRecord> records;      // ordered by room, n_mic, arrangement
  std::vector<AggregateRow> aggregate;  // ordered by n_mic, frequency
  int skipped = 0;
};

/// Scores `reconstructor` on every (room, n_mic, arrangement). Arrangement a
/// of room r with n_mic m is drawn from derive_rng(seed, r, m, a), so results
/// do not depend on thread count or batch size. Failed batches are logged to
/// stderr and skipped.
EvalResult evaluate(const Reconstructor& reconstructor, const DatasetManifest& dataset, std::span<const int> room_ids,
                    const EvalConfig& config);

/// Two-sided normal quantile for `confidence` (1.959964 for 0.95).
double normal_quantile(double confidence);

/// Mean and normal-approximation confidence interval per (n_mic, frequency).
/// NaN entries are ignored.
std::vector<AggregateRow> aggregate(std::span<const EvalRecord> records, const FrequencyGrid& freqs,
                                    std::span<const int> n_mics, double confidence);

struct ExtremeArrangement {
  EvalRecord record;
  MicArrangement arrangement;
  double band_nmse_db = 0.0;
};

struct ArrangementExtremes {
  ExtremeArrangement best;
  ExtremeArrangement worst;
};

/// Evaluates `n_trials` random arrangements of one room and returns the
/// lowest and highest band-averaged NMSE. Requires n_trials >= 2.
ArrangementExtremes arrangement_extremes(const Reconstructor& reconstructor, const FieldTensor& truth, int room_id,
                                         int n_mic, int n_trials, std::uint64_t seed);

/// 33 x 33 CSV: header row of x positions, first column of y positions (m).
void export_field_csv(const FieldTensor& field, int frequency_index, const std::filesystem::path& path);

/// Long format: room_id, arrangement_id, n_mic, frequency_hz, nmse_db, mssim.
void write_records_csv(const std::filesystem::path& path, const FrequencyGrid& freqs,
                       std::span<const EvalRecord> records);

/// n_mic, frequency_hz, mean_nmse_db, nmse_ci_lo, nmse_ci_hi, mean_mssim,
/// mssim_ci_lo, mssim_ci_hi.
void write_aggregate_csv(const std::filesystem::path& path, std::span<const AggregateRow> rows);

}  // namespace sfr
