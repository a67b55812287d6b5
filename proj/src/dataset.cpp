// SPDX-License-Identifier: Apache-2.0
#include "soundfield/dataset.hpp"

#include "soundfield/modal_sim.hpp"
#include "soundfield/parallel.hpp"

#include <json.hpp>

#include <algorithm>
#include <bit>
#include <cmath>
#include <fstream>
#include <numeric>

namespace sfr {

namespace fs = std::filesystem;
using nlohmann::json;

bool satisfies_itu_ratios(double lx, double ly, double lz) {
  const double x = lx / lz;
  const double y = ly / lz;
  return 1.1 * y <= x && x <= 4.5 * y - 4.0;
}

namespace {

double uniform_open(Rng& rng, double lo, double hi) {
  std::uniform_real_distribution<double> dist(lo, hi);
  double v = dist(rng);
  while (v <= lo) v = dist(rng);
  return v;
}

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

}  // namespace

Rng derive_rng(std::uint64_t seed, std::uint64_t stream) {
  return Rng(splitmix64(splitmix64(seed) ^ splitmix64(stream + 0x632be59bd9b4e019ULL)));
}

Rng derive_rng(std::uint64_t seed, std::uint64_t a, std::uint64_t b, std::uint64_t c) {
  std::uint64_t h = splitmix64(seed);
  h = splitmix64(h ^ a);
  h = splitmix64(h ^ b);
  h = splitmix64(h ^ c);
  return Rng(h);
}

RoomSpec sample_room(Rng& rng, const RoomSampler& sampler) {
  std::uniform_real_distribution<double> area_dist(sampler.min_area, sampler.max_area);
  std::uniform_real_distribution<double> height_dist(sampler.min_height, sampler.max_height);
  std::uniform_real_distribution<double> aspect_dist(sampler.min_aspect, sampler.max_aspect);
  for (int attempt = 0; attempt < sampler.max_rejections; ++attempt) {
    const double area = area_dist(rng);
    const double height = height_dist(rng);
    const double aspect = aspect_dist(rng);
    const double lx = std::sqrt(area * aspect);
    const double ly = std::sqrt(area / aspect);
    if (!satisfies_itu_ratios(lx, ly, height)) continue;

    RoomSpec room;
    room.lx = lx;
    room.ly = ly;
    room.lz = height;
    room.t60 = sampler.t60;
    room.c = sampler.c;
    std::tie(room.source_x, room.source_y) = sample_source(rng, room);
    return room;
  }
  throw std::runtime_error("room sampler exceeded " + std::to_string(sampler.max_rejections) +
                           " consecutive rejections; check the sampling ranges");
}

std::pair<double, double> sample_source(Rng& rng, const RoomSpec& room) {
  const double x = uniform_open(rng, 0.0, room.lx);
  const double y = uniform_open(rng, 0.0, room.ly);
  return {x, y};
}

std::string split_name(Split split) { return split == Split::kTrain ? "train" : "validation"; }

namespace {

Split parse_split(const std::string& name) {
  if (name == "train") return Split::kTrain;
  if (name == "validation") return Split::kValidation;
  throw CorruptFileError("unknown split tag '" + name + "'");
}

std::string field_file_name(int room_id) { return "room_" + std::to_string(room_id) + ".f32"; }

json room_to_json(const RoomSpec& room) {
  return {{"lx", room.lx}, {"ly", room.ly}, {"lz", room.lz}, {"t60", room.t60},
          {"c", room.c},   {"source_x", room.source_x}, {"source_y", room.source_y}};
}

RoomSpec room_from_json(const json& j) {
  RoomSpec room;
  room.lx = j.at("lx").get<double>();
  room.ly = j.at("ly").get<double>();
  room.lz = j.at("lz").get<double>();
  room.t60 = j.at("t60").get<double>();
  room.c = j.at("c").get<double>();
  room.source_x = j.at("source_x").get<double>();
  room.source_y = j.at("source_y").get<double>();
  return room;
}

}  // namespace

const RoomRecord& DatasetManifest::record(int room_id) const {
  const auto it = std::find_if(rooms.begin(), rooms.end(), [&](const RoomRecord& r) { return r.room_id == room_id; });
  if (it == rooms.end()) throw NotFoundError("room " + std::to_string(room_id) + " is not in the manifest");
  return *it;
}

std::vector<int> DatasetManifest::ids(Split split) const {
  std::vector<int> out;
  for (const auto& r : rooms) {
    if (r.split == split) out.push_back(r.room_id);
  }
  return out;
}

DatasetManifest generate_dataset(int n_rooms, std::uint64_t seed, const fs::path& out_dir, int threads,
                                 const RoomSampler& sampler) {
  if (n_rooms < 2) throw std::invalid_argument("a dataset needs at least 2 rooms");
  fs::create_directories(out_dir);

  DatasetManifest manifest;
  manifest.n_rooms = n_rooms;
  manifest.seed = seed;
  manifest.freqs = frequency_grid();
  manifest.directory = out_dir;
  manifest.rooms.resize(static_cast<size_t>(n_rooms));

  std::vector<int> order(static_cast<size_t>(n_rooms));
  std::iota(order.begin(), order.end(), 0);
  Rng split_rng = derive_rng(seed, 0xda7a5e7ULL);
  std::shuffle(order.begin(), order.end(), split_rng);
  const auto n_train = static_cast<size_t>(std::floor(manifest.split_fraction * n_rooms));
  std::vector<Split> splits(static_cast<size_t>(n_rooms), Split::kValidation);
  for (size_t i = 0; i < n_train; ++i) splits[static_cast<size_t>(order[i])] = Split::kTrain;

  parallel_for(n_rooms, threads, [&](int id) {
    Rng rng = derive_rng(seed, static_cast<std::uint64_t>(id));
    RoomRecord& rec = manifest.rooms[static_cast<size_t>(id)];
    rec.room_id = id;
    rec.room = sample_room(rng, sampler);
    rec.split = splits[static_cast<size_t>(id)];
    rec.file = field_file_name(id);
    write_field(magnitude_field(rec.room, manifest.freqs), out_dir / rec.file);
  });

  save_manifest(manifest);
  return manifest;
}

void save_manifest(const DatasetManifest& manifest) {
  json rooms = json::array();
  for (const auto& r : manifest.rooms) {
    rooms.push_back({{"room_id", r.room_id}, {"split", split_name(r.split)}, {"file", r.file},
                     {"room", room_to_json(r.room)}});
  }
  const json doc = {
      {"format", "soundfield-dataset"},
      {"version", 1},
      {"n_rooms", manifest.n_rooms},
      {"seed", manifest.seed},
      {"split_fraction", manifest.split_fraction},
      {"n_train", manifest.ids(Split::kTrain).size()},
      {"n_validation", manifest.ids(Split::kValidation).size()},
      {"grid",
       {{"coarse_x", manifest.grid.coarse_x},
        {"coarse_y", manifest.grid.coarse_y},
        {"upsample_x", manifest.grid.upsample_x},
        {"upsample_y", manifest.grid.upsample_y},
        {"fine_n", manifest.grid.fine_n}}},
      {"frequencies_hz", manifest.freqs.hz},
      {"field_layout", "float32 little-endian [frequency][y][x]"},
      {"rooms", rooms},
  };
  std::ofstream out(manifest.directory / kManifestName);
  if (!out) throw std::runtime_error("cannot write manifest in " + manifest.directory.string());
  out << doc.dump(2) << '\n';
  if (!out) throw std::runtime_error("failed writing manifest in " + manifest.directory.string());
}

DatasetManifest load_manifest(const fs::path& dir) {
  std::ifstream in(dir / kManifestName);
  if (!in) throw NotFoundError("no " + std::string(kManifestName) + " in " + dir.string());
  json doc;
  try {
    in >> doc;
    DatasetManifest m;
    m.directory = dir;
    m.n_rooms = doc.at("n_rooms").get<int>();
    m.seed = doc.at("seed").get<std::uint64_t>();
    m.split_fraction = doc.at("split_fraction").get<double>();
    const auto& g = doc.at("grid");
    m.grid.coarse_x = g.at("coarse_x").get<int>();
    m.grid.coarse_y = g.at("coarse_y").get<int>();
    m.grid.upsample_x = g.at("upsample_x").get<int>();
    m.grid.upsample_y = g.at("upsample_y").get<int>();
    m.grid.fine_n = g.at("fine_n").get<int>();
    m.freqs.hz = doc.at("frequencies_hz").get<std::vector<double>>();
    for (const auto& r : doc.at("rooms")) {
      RoomRecord rec;
      rec.room_id = r.at("room_id").get<int>();
      rec.split = parse_split(r.at("split").get<std::string>());
      rec.file = r.at("file").get<std::string>();
      rec.room = room_from_json(r.at("room"));
      m.rooms.push_back(std::move(rec));
    }
    return m;
  } catch (const json::exception& e) {
    throw CorruptFileError("malformed manifest in " + dir.string() + ": " + e.what());
  }
}

void write_field(const FieldTensor& field, const fs::path& path) {
  static_assert(std::endian::native == std::endian::little, "field files are little-endian");
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open " + path.string() + " for writing");
  out.write(reinterpret_cast<const char*>(field.values.data()),
            static_cast<std::streamsize>(field.values.size() * sizeof(float)));
  if (!out) throw std::runtime_error("failed writing " + path.string());
}

Matrix<float> read_field_values(const fs::path& path) {
  std::error_code ec;
  const auto size = fs::file_size(path, ec);
  if (ec) throw NotFoundError("missing field file " + path.string());
  if (size != kFieldFileBytes) {
    throw CorruptFileError(path.string() + " has " + std::to_string(size) + " bytes, expected " +
                           std::to_string(kFieldFileBytes));
  }
  Matrix<float> values(kNumFrequencies, kPlaneSize);
  std::ifstream in(path, std::ios::binary);
  in.read(reinterpret_cast<char*>(values.data()), static_cast<std::streamsize>(kFieldFileBytes));
  if (!in) throw CorruptFileError("short read from " + path.string());
  return values;
}

FieldTensor load_field(const DatasetManifest& manifest, int room_id) {
  const RoomRecord& rec = manifest.record(room_id);
  FieldTensor field;
  field.values = read_field_values(manifest.directory / rec.file);
  field.room = rec.room;
  return field;
}

}  // namespace sfr
