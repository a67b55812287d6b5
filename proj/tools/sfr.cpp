// SPDX-License-Identifier: Apache-2.0
// sfr: dataset generation, training, evaluation and reconstruction.
#include "soundfield/checkpoint.hpp"
#include "soundfield/dataset.hpp"
#include "soundfield/eval_harness.hpp"
#include "soundfield/metrics.hpp"
#include "soundfield/modal_sim.hpp"
#include "soundfield/parallel.hpp"
#include "soundfield/preprocess.hpp"
#include "soundfield/training.hpp"

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <memory>
#include <string>
#include <vector>

namespace fs = std::filesystem;
using namespace sfr;

namespace {

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct Options {
  int threads = default_thread_count();

  // generate-dataset
  int rooms = 200;
  std::uint64_t seed = 0;
  std::string out;
  RoomSampler sampler;

  // train
  std::string dataset;
  int epochs1 = 50;
  int epochs2 = 50;
  double lr1 = 2e-4;
  double lr2 = 5e-5;
  int batch_size = 16;
  int min_mics = 5;
  int max_mics = 55;
  double missing_weight = kMissingWeight;
  int depth = 4;
  int base_filters = 64;
  int snapshot_every = 0;
  bool stage2_only = false;
  std::string from;

  // evaluate / baseline / reconstruct
  std::string checkpoint;
  std::vector<int> nmics{5, 15, 35, 55};
  int arrangements = 200;
  int eval_rooms = 10;
  double confidence = 0.95;
  std::string split = "all";
  std::string method = "nearest";
  int room = 0;
  int nmic = 5;
  int arrangement = 0;
  int freq_index = 0;
};

// Effective flags of the active subcommand; `sfr --config <file>` replays it.
void write_run_config(const CLI::App& cmd, int threads, const fs::path& dir) {
  fs::create_directories(dir);
  std::ofstream out(dir / "run_config.toml");
  out << "threads=" << threads << "\n[" << cmd.get_name() << "]\n" << cmd.config_to_str(true, false);
  if (!out) throw std::runtime_error("cannot write " + (dir / "run_config.toml").string());
}

std::vector<int> select_rooms(const DatasetManifest& manifest, const std::string& split) {
  if (split == "train") return manifest.ids(Split::kTrain);
  if (split == "validation") return manifest.ids(Split::kValidation);
  std::vector<int> ids;
  for (const auto& r : manifest.rooms) ids.push_back(r.room_id);
  return ids;
}

EvalConfig eval_config(const Options& o) {
  EvalConfig c;
  c.n_mics = o.nmics;
  c.arrangements_per_room = o.arrangements;
  c.max_rooms = o.eval_rooms;
  c.seed = o.seed;
  c.confidence = o.confidence;
  c.threads = o.threads;
  c.batch_size = o.batch_size;
  try {
    c.validate();
  } catch (const std::invalid_argument& e) {
    throw UsageError(e.what());
  }
  return c;
}

std::unique_ptr<Reconstructor> network_reconstructor(const std::string& checkpoint) {
  auto weights = std::make_shared<const UNetWeights<float>>(load_checkpoint(checkpoint));
  return std::make_unique<NetworkReconstructor>(unet_predictor(weights));
}

int run_generate(const CLI::App& app, const Options& o) {
  if (o.rooms < 1) throw UsageError("--rooms must be positive");
  const DatasetManifest m = generate_dataset(o.rooms, o.seed, o.out, o.threads, o.sampler);
  write_run_config(app, o.threads, o.out);
  std::cout << "wrote " << m.n_rooms << " rooms to " << o.out << ": " << m.ids(Split::kTrain).size() << " train, "
            << m.ids(Split::kValidation).size() << " validation (seed " << m.seed << ")\n";
  return 0;
}

int run_train(const CLI::App& app, const Options& o) {
  TrainConfig cfg;
  cfg.net.depth = o.depth;
  cfg.net.base_filters = o.base_filters;
  cfg.net.encoder_kernels.resize(static_cast<size_t>(o.depth), 3);
  cfg.net.decoder_kernels.assign(static_cast<size_t>(o.depth), 3);
  cfg.net.encoder_batch_norm.assign(static_cast<size_t>(o.depth), true);
  cfg.net.decoder_batch_norm.assign(static_cast<size_t>(o.depth), true);
  cfg.stage1 = {o.epochs1, o.lr1, false};
  cfg.stage2 = {o.epochs2, o.lr2, true};
  cfg.batch_size = o.batch_size;
  cfg.missing_weight = o.missing_weight;
  cfg.min_mics = o.min_mics;
  cfg.max_mics = o.max_mics;
  cfg.seed = o.seed;
  cfg.checkpoint_dir = o.out;
  cfg.snapshot_every = o.snapshot_every;
  cfg.stage2_only = o.stage2_only;
  if (!o.from.empty()) {
    cfg.initial_weights = load_checkpoint(o.from);
    cfg.net = cfg.initial_weights->config;
  }
  try {
    cfg.validate();
  } catch (const std::invalid_argument& e) {
    throw UsageError(e.what());
  }
  const DatasetManifest dataset = load_manifest(o.dataset);
  write_run_config(app, o.threads, o.out);
  const TrainResult r = train(dataset, cfg, [](const EpochLog& e) {
    std::cerr << "stage " << e.stage << " epoch " << e.epoch << " train " << e.train_loss << " val " << e.val_loss
              << " (" << std::fixed << std::setprecision(1) << e.elapsed_s << " s)\n"
              << std::defaultfloat << std::setprecision(6);
  });
  std::cout << "best val loss " << r.best_val_loss << " at stage " << r.best_stage << " epoch " << r.best_epoch
            << "; wrote " << (fs::path(o.out) / "best.ckpt").string() << '\n';
  return 0;
}

int run_evaluation(const CLI::App& app, const Options& o, const Reconstructor& reconstructor) {
  const EvalConfig cfg = eval_config(o);
  const DatasetManifest dataset = load_manifest(o.dataset);
  const std::vector<int> rooms = select_rooms(dataset, o.split);
  write_run_config(app, o.threads, o.out);
  const EvalResult r = evaluate(reconstructor, dataset, rooms, cfg);
  write_records_csv(fs::path(o.out) / "eval_records.csv", dataset.freqs, r.records);
  write_aggregate_csv(fs::path(o.out) / "eval_aggregate.csv", r.aggregate);
  for (int m : cfg.n_mics) {
    double sum = 0.0;
    int n = 0;
    for (const auto& rec : r.records) {
      if (rec.n_mic != m) continue;
      sum += band_nmse_db(rec);
      ++n;
    }
    std::cout << reconstructor.name() << " n_mic " << m << ": band-averaged NMSE " << (n ? sum / n : 0.0) << " dB over "
              << n << " trials\n";
  }
  if (r.skipped > 0) std::cerr << r.skipped << " trials skipped\n";
  return r.records.empty() ? 1 : 0;
}

int run_reconstruct(const CLI::App& app, const Options& o) {
  if (o.freq_index < 0 || o.freq_index >= kNumFrequencies) throw UsageError("--freq-index must lie in [0, 39]");
  if (o.nmic < 1 || o.nmic > kCoarsePlaneSize) throw UsageError("--nmic must lie in [1, 64]");
  std::unique_ptr<Reconstructor> reconstructor;
  if (o.method == "network") {
    if (o.checkpoint.empty()) throw UsageError("--checkpoint is required for the network method");
    reconstructor = network_reconstructor(o.checkpoint);
  } else {
    reconstructor = std::make_unique<BaselineReconstructor>(parse_baseline_method(o.method));
  }
  const DatasetManifest dataset = load_manifest(o.dataset);
  const FieldTensor truth = load_field(dataset, o.room);
  write_run_config(app, o.threads, o.out);

  Rng rng = derive_rng(o.seed, static_cast<std::uint64_t>(o.room), static_cast<std::uint64_t>(o.nmic),
                       static_cast<std::uint64_t>(o.arrangement));
  Trial trial;
  trial.room_id = o.room;
  trial.n_mic = o.nmic;
  trial.arrangement_id = o.arrangement;
  trial.truth = &truth;
  trial.observations = observe(truth, sample_arrangement(rng, o.nmic));
  const FieldTensor pred = reconstructor->reconstruct(std::span<const Trial>(&trial, 1)).front();

  FieldTensor mask;
  mask.room = truth.room;
  mask.values = prepare_input(trial.observations).mask;

  const fs::path dir(o.out);
  export_field_csv(truth, o.freq_index, dir / "truth.csv");
  export_field_csv(mask, o.freq_index, dir / "mask.csv");
  export_field_csv(pred, o.freq_index, dir / "prediction.csv");
  write_metric_csv(dir / "metrics.csv", dataset.freqs, nmse(truth, pred), mssim_curve(truth, pred));

  std::ofstream mics(dir / "arrangement.csv");
  mics << "i,j,x_m,y_m\n" << std::setprecision(9);
  const GridSpec grid;
  for (const auto& p : trial.observations.arrangement.points) {
    mics << p.i << ',' << p.j << ',' << grid.fine_position(kUpsample * p.i, truth.room.lx) << ','
         << grid.fine_position(kUpsample * p.j, truth.room.ly) << '\n';
  }
  const MetricCurve n = nmse(truth, pred);
  std::cout << "room " << o.room << " n_mic " << o.nmic << " f = " << dataset.freqs.hz[static_cast<size_t>(o.freq_index)]
            << " Hz: NMSE " << n.db[static_cast<size_t>(o.freq_index)] << " dB; CSVs in " << dir.string() << '\n';
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Sound field reconstruction with a partial-convolution U-Net"};
  app.require_subcommand(1);
  app.set_config("--config", "", "Load flags from a run_config.toml written by an earlier run");
  Options o;
  app.add_option("--threads", o.threads, "Worker threads (default: SFR_THREADS or 1)")->capture_default_str()->check(CLI::PositiveNumber);

  auto* gen = app.add_subcommand("generate-dataset", "Simulate rooms into a dataset directory");
  gen->add_option("--rooms", o.rooms, "Number of rooms")->capture_default_str();
  gen->add_option("--seed", o.seed, "Dataset seed")->capture_default_str();
  gen->add_option("--out", o.out, "Output directory")->required();
  gen->add_option("--min-area", o.sampler.min_area, "Minimum floor area (m^2)")->capture_default_str();
  gen->add_option("--max-area", o.sampler.max_area, "Maximum floor area (m^2)")->capture_default_str();
  gen->add_option("--min-height", o.sampler.min_height, "Minimum height (m)")->capture_default_str();
  gen->add_option("--max-height", o.sampler.max_height, "Maximum height (m)")->capture_default_str();
  gen->add_option("--t60", o.sampler.t60, "Reverberation time (s)")->capture_default_str();
  gen->add_option("--speed-of-sound", o.sampler.c, "Speed of sound (m/s)")->capture_default_str();

  auto* tr = app.add_subcommand("train", "Two-stage training; writes best.ckpt and train_log.csv");
  tr->add_option("--dataset", o.dataset, "Dataset directory")->required()->check(CLI::ExistingDirectory);
  tr->add_option("--out", o.out, "Run directory")->required();
  tr->add_option("--epochs1", o.epochs1, "Stage 1 epochs")->capture_default_str();
  tr->add_option("--epochs2", o.epochs2, "Stage 2 epochs (encoder batch norm frozen)")->capture_default_str();
  tr->add_option("--lr1", o.lr1, "Stage 1 learning rate")->capture_default_str();
  tr->add_option("--lr2", o.lr2, "Stage 2 learning rate")->capture_default_str();
  tr->add_option("--batch-size", o.batch_size, "Batch size")->capture_default_str();
  tr->add_option("--min-mics", o.min_mics, "Fewest microphones per training sample")->capture_default_str();
  tr->add_option("--max-mics", o.max_mics, "Most microphones per training sample")->capture_default_str();
  tr->add_option("--missing-weight", o.missing_weight, "Loss weight of unobserved points")->capture_default_str();
  tr->add_option("--depth", o.depth, "U-Net depth")->capture_default_str();
  tr->add_option("--base-filters", o.base_filters, "Filters of the first encoder stage")->capture_default_str();
  tr->add_option("--seed", o.seed, "Training seed")->capture_default_str();
  tr->add_option("--snapshot-every", o.snapshot_every, "Epochs between snapshots (0: none)")->capture_default_str();
  tr->add_flag("--stage2-only", o.stage2_only, "Skip stage 1 (needs --from)");
  tr->add_option("--from", o.from, "Initial checkpoint")->check(CLI::ExistingFile);

  const auto add_eval_flags = [&](CLI::App* cmd) {
    cmd->add_option("--dataset", o.dataset, "Test dataset directory")->required()->check(CLI::ExistingDirectory);
    cmd->add_option("--out", o.out, "Output directory")->required();
    cmd->add_option("--nmics", o.nmics, "Microphone counts")->delimiter(',')->capture_default_str();
    cmd->add_option("--arrangements", o.arrangements, "Arrangements per room and count")->capture_default_str();
    cmd->add_option("--rooms", o.eval_rooms, "Rooms to use (0: all)")->capture_default_str();
    cmd->add_option("--split", o.split, "Rooms to draw from")
        ->check(CLI::IsMember({"all", "train", "validation"}))
        ->capture_default_str();
    cmd->add_option("--seed", o.seed, "Arrangement seed")->capture_default_str();
    cmd->add_option("--confidence", o.confidence, "Confidence level of the intervals")->capture_default_str();
    cmd->add_option("--batch-size", o.batch_size, "Trials per forward pass")->capture_default_str();
  };
  auto* ev = app.add_subcommand("evaluate", "Score a checkpoint; writes eval_records.csv and eval_aggregate.csv");
  add_eval_flags(ev);
  ev->add_option("--checkpoint", o.checkpoint, "Trained weights")->required()->check(CLI::ExistingFile);

  auto* bl = app.add_subcommand("baseline", "Score an interpolation baseline with the evaluate schema");
  add_eval_flags(bl);
  bl->add_option("--method", o.method, "nearest or idw")
      ->check(CLI::IsMember({"nearest", "idw"}))
      ->capture_default_str();

  auto* rc = app.add_subcommand("reconstruct", "Truth, mask and prediction CSVs for one room and arrangement");
  rc->add_option("--dataset", o.dataset, "Dataset directory")->required()->check(CLI::ExistingDirectory);
  rc->add_option("--out", o.out, "Output directory")->required();
  rc->add_option("--checkpoint", o.checkpoint, "Trained weights")->check(CLI::ExistingFile);
  rc->add_option("--method", o.method, "network, nearest or idw")
      ->check(CLI::IsMember({"network", "nearest", "idw"}))
      ->default_val("network");
  rc->add_option("--room", o.room, "Room id")->required();
  rc->add_option("--nmic", o.nmic, "Microphone count")->capture_default_str();
  rc->add_option("--arrangement", o.arrangement, "Arrangement id")->capture_default_str();
  rc->add_option("--freq-index", o.freq_index, "Frequency bin of the slice CSVs (0..39)")->capture_default_str();
  rc->add_option("--seed", o.seed, "Arrangement seed")->capture_default_str();

  for (auto* cmd : {gen, tr, ev, bl, rc}) cmd->configurable();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (gen->parsed()) return run_generate(*gen, o);
    if (tr->parsed()) return run_train(*tr, o);
    if (ev->parsed()) return run_evaluation(*ev, o, *network_reconstructor(o.checkpoint));
    if (bl->parsed()) return run_evaluation(*bl, o, BaselineReconstructor(parse_baseline_method(o.method)));
    if (rc->parsed()) return run_reconstruct(*rc, o);
  } catch (const UsageError& e) {
    std::cerr << "usage error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 2;
}
