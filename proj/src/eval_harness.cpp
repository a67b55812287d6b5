// SPDX-License-Identifier: Apache-2.0
#include "soundfield/eval_harness.hpp"

#include "soundfield/parallel.hpp"
#include "soundfield/training.hpp"

#include <cmath>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <limits>
#include <numeric>
#include <stdexcept>

namespace sfr {

void EvalConfig::validate() const {
  if (n_mics.empty()) throw std::invalid_argument("n_mic list must not be empty");
  for (int m : n_mics) {
    if (m < 1 || m > kCoarsePlaneSize) throw std::invalid_argument("n_mic must lie in [1, 64]");
  }
  if (arrangements_per_room < 1) throw std::invalid_argument("need at least one arrangement per room");
  if (max_rooms < 0) throw std::invalid_argument("max_rooms must be non-negative");
  if (!(confidence > 0.0 && confidence < 1.0)) throw std::invalid_argument("confidence must lie in (0, 1)");
  if (batch_size < 1) throw std::invalid_argument("batch size must be positive");
}

ScaledPredictor unet_predictor(std::shared_ptr<const UNetWeights<float>> weights) {
  if (!weights) throw std::invalid_argument("unet_predictor needs weights");
  const auto& c = weights->config;
  if (c.in_channels != kNumFrequencies || c.out_channels != kNumFrequencies || c.input_size != kFineN) {
    throw std::invalid_argument("network does not map 40-channel 32x32 inputs");
  }
  return [weights](std::span<const Trial>, std::span<const NetworkInput> inputs) {
    return unet_forward(inputs, *weights);
  };
}

ScaledPredictor oracle_predictor() {
  return [](std::span<const Trial> trials, std::span<const NetworkInput>) {
    Matrix<float> out(kNumFrequencies, static_cast<Eigen::Index>(trials.size()) * kPlaneSize);
    for (size_t b = 0; b < trials.size(); ++b) {
      out.middleCols(static_cast<Eigen::Index>(b) * kPlaneSize, kPlaneSize) = scaled_ground_truth(*trials[b].truth);
    }
    return out;
  };
}

NetworkReconstructor::NetworkReconstructor(ScaledPredictor predictor, std::string name)
    : predictor_(std::move(predictor)), name_(std::move(name)) {}

std::vector<FieldTensor> NetworkReconstructor::reconstruct(std::span<const Trial> trials) const {
  std::vector<NetworkInput> inputs;
  inputs.reserve(trials.size());
  for (const auto& t : trials) inputs.push_back(prepare_input(t.observations));
  const Matrix<float> scaled = predictor_(trials, inputs);
  std::vector<FieldTensor> out;
  out.reserve(trials.size());
  for (size_t b = 0; b < trials.size(); ++b) {
    const Matrix<float> slice = scaled.middleCols(static_cast<Eigen::Index>(b) * kPlaneSize, kPlaneSize);
    out.push_back(rescale(slice, trials[b].observations, trials[b].truth->room));
  }
  return out;
}

BaselineMethod parse_baseline_method(const std::string& name) {
  if (name == "nearest") return BaselineMethod::kNearest;
  if (name == "idw" || name == "bilinear") return BaselineMethod::kInverseDistance;
  throw std::invalid_argument("unknown baseline method '" + name + "'");
}

std::string baseline_name(BaselineMethod method) {
  return method == BaselineMethod::kNearest ? "nearest" : "idw";
}

namespace {

double squared_distance(const CoarsePoint& p, int fi, int fj) {
  const double dx = kUpsample * p.i - fi;
  const double dy = kUpsample * p.j - fj;
  return dx * dx + dy * dy;
}

}  // namespace

Vector<double> idw_weights(const MicArrangement& arrangement, int fi, int fj) {
  const auto n = static_cast<Eigen::Index>(arrangement.points.size());
  Vector<double> w = Vector<double>::Zero(n);
  for (Eigen::Index m = 0; m < n; ++m) {
    const double d2 = squared_distance(arrangement.points[static_cast<size_t>(m)], fi, fj);
    if (d2 == 0.0) {
      w.setZero();
      w(m) = 1.0;
      return w;
    }
    w(m) = 1.0 / d2;   // power 2: 1 / d^2
  }
  return w / w.sum();
}

FieldTensor baseline_reconstruct(BaselineMethod method, const Observations& observations, const RoomSpec& room) {
  const MicArrangement& arrangement = observations.arrangement;
  arrangement.validate();
  if (observations.values.cols() != arrangement.size()) {
    throw std::invalid_argument("observation count does not match the arrangement");
  }
  // Per fine point weights over the observed microphones.
  Matrix<double> weights = Matrix<double>::Zero(arrangement.size(), kPlaneSize);
  for (int fj = 0; fj < kFineN; ++fj) {
    for (int fi = 0; fi < kFineN; ++fi) {
      const int col = fj * kFineN + fi;
      if (method == BaselineMethod::kInverseDistance) {
        weights.col(col) = idw_weights(arrangement, fi, fj);
        continue;
      }
      int best = -1;
      for (int m = 0; m < arrangement.size(); ++m) {
        const auto& p = arrangement.points[static_cast<size_t>(m)];
        if (best < 0) {
          best = m;
          continue;
        }
        const auto& q = arrangement.points[static_cast<size_t>(best)];
        const double dp = squared_distance(p, fi, fj);
        const double dq = squared_distance(q, fi, fj);
        if (dp < dq || (dp == dq && p.flat() < q.flat())) best = m;
      }
      weights(best, col) = 1.0;
    }
  }
  FieldTensor out;
  out.values = (observations.values * weights).cast<float>();
  out.room = room;
  return out;
}

std::vector<FieldTensor> BaselineReconstructor::reconstruct(std::span<const Trial> trials) const {
  std::vector<FieldTensor> out;
  out.reserve(trials.size());
  for (const auto& t : trials) out.push_back(baseline_reconstruct(method_, t.observations, t.truth->room));
  return out;
}

double band_nmse_db(const EvalRecord& record, int first, int last) {
  double sum = 0.0;
  int n = 0;
  for (int k = first; k < last; ++k) {
    const double v = record.nmse.at(static_cast<size_t>(k));
    if (std::isnan(v)) continue;
    sum += v;
    ++n;
  }
  if (n == 0) return std::numeric_limits<double>::quiet_NaN();
  return nmse_to_db(sum / n);
}

namespace {

EvalRecord score(const Trial& trial, const FieldTensor& reconstruction) {
  const MetricCurve n = nmse(*trial.truth, reconstruction);
  const MetricCurve s = mssim_curve(*trial.truth, reconstruction);
  return {trial.room_id, trial.arrangement_id, trial.n_mic, n.value, n.db, s.value};
}

Trial make_trial(const FieldTensor& truth, int room_id, int n_mic, int arrangement_id, std::uint64_t seed) {
  Rng rng = derive_rng(seed, static_cast<std::uint64_t>(room_id), static_cast<std::uint64_t>(n_mic),
                       static_cast<std::uint64_t>(arrangement_id));
  Trial t;
  t.room_id = room_id;
  t.n_mic = n_mic;
  t.arrangement_id = arrangement_id;
  t.truth = &truth;
  t.observations = observe(truth, sample_arrangement(rng, n_mic));
  return t;
}

}  // namespace

EvalResult evaluate(const Reconstructor& reconstructor, const DatasetManifest& dataset, std::span<const int> room_ids,
                    const EvalConfig& config) {
  config.validate();
  std::vector<int> rooms(room_ids.begin(), room_ids.end());
  if (config.max_rooms > 0 && static_cast<int>(rooms.size()) > config.max_rooms) rooms.resize(static_cast<size_t>(config.max_rooms));
  if (rooms.empty()) throw std::invalid_argument("no rooms to evaluate");

  std::vector<FieldTensor> truths;
  truths.reserve(rooms.size());
  for (int id : rooms) truths.push_back(load_field(dataset, id));

  // Work units are batches inside one (room, n_mic) cell; each owns its slots.
  struct Unit {
    size_t room;
    int n_mic;
    int first;
    int count;
  };
  std::vector<Unit> units;
  for (size_t r = 0; r < rooms.size(); ++r) {
    for (int m : config.n_mics) {
      for (int a = 0; a < config.arrangements_per_room; a += config.batch_size) {
        units.push_back({r, m, a, std::min(config.batch_size, config.arrangements_per_room - a)});
      }
    }
  }
  std::vector<std::vector<EvalRecord>> slots(units.size());
  std::vector<char> failed(units.size(), 0);
  std::mutex log_mutex;

  parallel_for(static_cast<int>(units.size()), config.threads, [&](int u) {
    const Unit& unit = units[static_cast<size_t>(u)];
    try {
      std::vector<Trial> trials;
      for (int a = unit.first; a < unit.first + unit.count; ++a) {
        trials.push_back(make_trial(truths[unit.room], rooms[unit.room], unit.n_mic, a, config.seed));
      }
      const std::vector<FieldTensor> fields = reconstructor.reconstruct(trials);
      for (size_t b = 0; b < trials.size(); ++b) slots[static_cast<size_t>(u)].push_back(score(trials[b], fields[b]));
    } catch (const std::exception& e) {
      failed[static_cast<size_t>(u)] = 1;
      slots[static_cast<size_t>(u)].clear();
      std::lock_guard lock(log_mutex);
      std::cerr << "evaluate: skipping room " << rooms[unit.room] << " n_mic " << unit.n_mic << " arrangements "
                << unit.first << ".." << unit.first + unit.count - 1 << ": " << e.what() << '\n';
    }
  });

  EvalResult result;
  for (size_t u = 0; u < units.size(); ++u) {
    if (failed[u]) result.skipped += units[u].count;
    for (auto& rec : slots[u]) result.records.push_back(std::move(rec));
  }
  result.aggregate = aggregate(result.records, dataset.freqs, config.n_mics, config.confidence);
  return result;
}

double normal_quantile(double confidence) {
  if (!(confidence > 0.0 && confidence < 1.0)) throw std::invalid_argument("confidence must lie in (0, 1)");
  // Solve erf(z / sqrt 2) = confidence by bisection.
  double lo = 0.0;
  double hi = 40.0;
  for (int i = 0; i < 200; ++i) {
    const double mid = 0.5 * (lo + hi);
    (std::erf(mid / std::sqrt(2.0)) < confidence ? lo : hi) = mid;
  }
  return 0.5 * (lo + hi);
}

namespace {

struct MeanCi {
  double mean = std::numeric_limits<double>::quiet_NaN();
  double lo = std::numeric_limits<double>::quiet_NaN();
  double hi = std::numeric_limits<double>::quiet_NaN();
  int count = 0;
};

MeanCi mean_ci(const std::vector<double>& xs, double z) {
  MeanCi r;
  std::vector<double> v;
  for (double x : xs) {
    if (!std::isnan(x)) v.push_back(x);
  }
  r.count = static_cast<int>(v.size());
  if (v.empty()) return r;
  r.mean = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
  double half = 0.0;
  if (v.size() > 1) {
    double ss = 0.0;
    for (double x : v) ss += (x - r.mean) * (x - r.mean);
    const double sd = std::sqrt(ss / static_cast<double>(v.size() - 1));
    half = z * sd / std::sqrt(static_cast<double>(v.size()));
  }
  r.lo = r.mean - half;
  r.hi = r.mean + half;
  return r;
}

}  // namespace

std::vector<AggregateRow> aggregate(std::span<const EvalRecord> records, const FrequencyGrid& freqs,
                                    std::span<const int> n_mics, double confidence) {
  const double z = normal_quantile(confidence);
  std::vector<AggregateRow> rows;
  for (int m : n_mics) {
    for (int k = 0; k < freqs.size(); ++k) {
      std::vector<double> db;
      std::vector<double> ss;
      for (const auto& r : records) {
        if (r.n_mic != m) continue;
        db.push_back(r.nmse_db.at(static_cast<size_t>(k)));
        ss.push_back(r.mssim.at(static_cast<size_t>(k)));
      }
      const MeanCi a = mean_ci(db, z);
      const MeanCi b = mean_ci(ss, z);
      rows.push_back({m, freqs.hz[static_cast<size_t>(k)], a.count, a.mean, a.lo, a.hi, b.mean, b.lo, b.hi});
    }
  }
  return rows;
}

ArrangementExtremes arrangement_extremes(const Reconstructor& reconstructor, const FieldTensor& truth, int room_id,
                                         int n_mic, int n_trials, std::uint64_t seed) {
  if (n_trials < 2) throw std::invalid_argument("arrangement_extremes needs at least two trials");
  std::vector<Trial> trials;
  trials.reserve(static_cast<size_t>(n_trials));
  for (int a = 0; a < n_trials; ++a) trials.push_back(make_trial(truth, room_id, n_mic, a, seed));

  ArrangementExtremes out;
  double best = std::numeric_limits<double>::infinity();
  double worst = -std::numeric_limits<double>::infinity();
  constexpr size_t kChunk = 16;
  for (size_t start = 0; start < trials.size(); start += kChunk) {
    const auto chunk = std::span<const Trial>(trials).subspan(start, std::min(kChunk, trials.size() - start));
    const std::vector<FieldTensor> fields = reconstructor.reconstruct(chunk);
    for (size_t b = 0; b < chunk.size(); ++b) {
      EvalRecord rec = score(chunk[b], fields[b]);
      const double band = band_nmse_db(rec);
      if (band < best) {
        best = band;
        out.best = {rec, chunk[b].observations.arrangement, band};
      }
      if (band > worst) {
        worst = band;
        out.worst = {std::move(rec), chunk[b].observations.arrangement, band};
      }
    }
  }
  return out;
}

void export_field_csv(const FieldTensor& field, int frequency_index, const std::filesystem::path& path) {
  if (frequency_index < 0 || frequency_index >= field.values.rows()) {
    throw std::out_of_range("frequency index " + std::to_string(frequency_index) + " out of range");
  }
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  const GridSpec grid;
  out << std::setprecision(9) << "y\\x";
  for (int i = 0; i < kFineN; ++i) out << ',' << grid.fine_position(i, field.room.lx);
  out << '\n';
  for (int j = 0; j < kFineN; ++j) {
    out << grid.fine_position(j, field.room.ly);
    for (int i = 0; i < kFineN; ++i) out << ',' << field.at(frequency_index, j, i);
    out << '\n';
  }
  if (!out) throw std::runtime_error("failed writing " + path.string());
}

void write_records_csv(const std::filesystem::path& path, const FrequencyGrid& freqs,
                       std::span<const EvalRecord> records) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << "room_id,arrangement_id,n_mic,frequency_hz,nmse_db,mssim\n" << std::setprecision(10);
  for (const auto& r : records) {
    for (int k = 0; k < freqs.size(); ++k) {
      out << r.room_id << ',' << r.arrangement_id << ',' << r.n_mic << ',' << freqs.hz[static_cast<size_t>(k)] << ','
          << r.nmse_db[static_cast<size_t>(k)] << ',' << r.mssim[static_cast<size_t>(k)] << '\n';
    }
  }
  if (!out) throw std::runtime_error("failed writing " + path.string());
}

void write_aggregate_csv(const std::filesystem::path& path, std::span<const AggregateRow> rows) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << "n_mic,frequency_hz,mean_nmse_db,nmse_ci_lo,nmse_ci_hi,mean_mssim,mssim_ci_lo,mssim_ci_hi\n"
      << std::setprecision(10);
  for (const auto& r : rows) {
    out << r.n_mic << ',' << r.frequency_hz << ',' << r.mean_nmse_db << ',' << r.nmse_ci_lo << ',' << r.nmse_ci_hi
        << ',' << r.mean_mssim << ',' << r.mssim_ci_lo << ',' << r.mssim_ci_hi << '\n';
  }
  if (!out) throw std::runtime_error("failed writing " + path.string());
}

}  // namespace sfr
