// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "soundfield/types.hpp"

#include <cstdint>
#include <filesystem>
#include <random>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace sfr {

using Rng = std::mt19937_64;

class NotFoundError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class CorruptFileError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Ranges of the ITU-style room distribution.
struct RoomSampler {
  double min_area = 20.0;
  double max_area = 60.0;
  double min_height = 2.2;
  double max_height = 3.5;
  double min_aspect = 1.0;   // l_x / l_y
  double max_aspect = 4.0;
  int max_rejections = 10000;
  double t60 = 0.6;
  double c = 343.0;
};

/// 1.1 (l_y/l_z) <= l_x/l_z <= 4.5 (l_y/l_z) - 4.
bool satisfies_itu_ratios(double lx, double ly, double lz);

/// Rejection-samples room dimensions; source coordinates are drawn with
/// sample_source(). Throws std::runtime_error after `max_rejections` misses.
RoomSpec sample_room(Rng& rng, const RoomSampler& sampler = {});

/// Uniform position strictly inside (0, l_x) x (0, l_y).
std::pair<double, double> sample_source(Rng& rng, const RoomSpec& room);

/// Independent stream for (seed, stream id).
Rng derive_rng(std::uint64_t seed, std::uint64_t stream);
Rng derive_rng(std::uint64_t seed, std::uint64_t a, std::uint64_t b, std::uint64_t c = 0);

enum class Split { kTrain, kValidation };

struct RoomRecord {
  int room_id = 0;
  RoomSpec room;
  Split split = Split::kTrain;
  std::string file;
};

struct DatasetManifest {
  int n_rooms = 0;
  std::uint64_t seed = 0;
  double split_fraction = 0.75;
  GridSpec grid;
  FrequencyGrid freqs;
  std::vector<RoomRecord> rooms;   // ordered by room_id
  std::filesystem::path directory;

  [[nodiscard]] const RoomRecord& record(int room_id) const;
  [[nodiscard]] std::vector<int> ids(Split split) const;
};

inline constexpr const char* kManifestName = "manifest.json";
inline constexpr std::uintmax_t kFieldFileBytes = sizeof(float) * kNumFrequencies * kPlaneSize;

/// Simulates `n_rooms` rooms into `out_dir` (room_<id>.f32 + manifest.json).
/// The first floor(0.75 n) rooms of a seeded shuffle form the training split.
DatasetManifest generate_dataset(int n_rooms, std::uint64_t seed, const std::filesystem::path& out_dir,
                                 int threads = 1, const RoomSampler& sampler = {});

void save_manifest(const DatasetManifest& manifest);
DatasetManifest load_manifest(const std::filesystem::path& dir);

/// Raw little-endian float32, layout [k][j][i].
void write_field(const FieldTensor& field, const std::filesystem::path& path);
Matrix<float> read_field_values(const std::filesystem::path& path);

/// Throws NotFoundError for an unknown id or missing file, CorruptFileError on
/// a length mismatch.
FieldTensor load_field(const DatasetManifest& manifest, int room_id);

std::string split_name(Split split);

}  // namespace sfr
