// SPDX-License-Identifier: Apache-2.0
#include "soundfield/checkpoint.hpp"

#include <json.hpp>

#include <array>
#include <bit>
#include <cstring>
#include <fstream>

namespace sfr {

namespace {

static_assert(std::endian::native == std::endian::little, "checkpoints are written little-endian");

constexpr std::array<char, 8> kMagic{'S', 'F', 'R', 'C', 'K', 'P', 'T', '\0'};

template <typename T>
void put(std::ofstream& out, const T& value) {
  out.write(reinterpret_cast<const char*>(&value), sizeof(T));
}

template <typename T>
T get(std::ifstream& in, const std::filesystem::path& path) {
  T value{};
  in.read(reinterpret_cast<char*>(&value), sizeof(T));
  if (!in) throw std::runtime_error("truncated checkpoint " + path.string());
  return value;
}

std::string get_string(std::ifstream& in, const std::filesystem::path& path) {
  const auto length = get<std::uint32_t>(in, path);
  if (length > (1u << 20)) throw std::runtime_error("implausible string length in " + path.string());
  std::string s(length, '\0');
  in.read(s.data(), length);
  if (!in) throw std::runtime_error("truncated checkpoint " + path.string());
  return s;
}

}  // namespace

std::string config_to_json(const UNetConfig& c) {
  const nlohmann::json j = {
      {"depth", c.depth},
      {"base_filters", c.base_filters},
      {"encoder_kernels", c.encoder_kernels},
      {"decoder_kernels", c.decoder_kernels},
      {"leaky_slope", c.leaky_slope},
      {"in_channels", c.in_channels},
      {"out_channels", c.out_channels},
      {"input_size", c.input_size},
      {"encoder_batch_norm", c.encoder_batch_norm},
      {"decoder_batch_norm", c.decoder_batch_norm},
  };
  return j.dump();
}

UNetConfig config_from_json(const std::string& text) {
  const auto j = nlohmann::json::parse(text);
  UNetConfig c;
  c.depth = j.at("depth").get<int>();
  c.base_filters = j.at("base_filters").get<int>();
  c.encoder_kernels = j.at("encoder_kernels").get<std::vector<int>>();
  c.decoder_kernels = j.at("decoder_kernels").get<std::vector<int>>();
  c.leaky_slope = j.at("leaky_slope").get<double>();
  c.in_channels = j.at("in_channels").get<int>();
  c.out_channels = j.at("out_channels").get<int>();
  c.input_size = j.at("input_size").get<int>();
  c.encoder_batch_norm = j.at("encoder_batch_norm").get<std::vector<bool>>();
  c.decoder_batch_norm = j.at("decoder_batch_norm").get<std::vector<bool>>();
  c.validate();
  return c;
}

void save_checkpoint(const UNetWeights<float>& weights, const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write checkpoint " + path.string());
  out.write(kMagic.data(), kMagic.size());
  put(out, kCheckpointVersion);
  const std::string header = config_to_json(weights.config);
  put(out, static_cast<std::uint32_t>(header.size()));
  out.write(header.data(), static_cast<std::streamsize>(header.size()));

  std::uint32_t count = 0;
  for_each_tensor(weights, [&](const TensorInfo&, const float*, Eigen::Index) { ++count; });
  put(out, count);
  for_each_tensor(weights, [&](const TensorInfo& info, const float* data, Eigen::Index size) {
    put(out, static_cast<std::uint32_t>(info.name.size()));
    out.write(info.name.data(), static_cast<std::streamsize>(info.name.size()));
    put(out, static_cast<std::uint64_t>(size));
    out.write(reinterpret_cast<const char*>(data), static_cast<std::streamsize>(size * sizeof(float)));
  });
  if (!out) throw std::runtime_error("failed writing checkpoint " + path.string());
}

UNetWeights<float> load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open checkpoint " + path.string());
  std::array<char, 8> magic{};
  in.read(magic.data(), magic.size());
  if (!in || magic != kMagic) throw std::runtime_error(path.string() + " is not a soundfield checkpoint");
  const auto version = get<std::uint32_t>(in, path);
  if (version != kCheckpointVersion) {
    throw std::runtime_error("unsupported checkpoint version " + std::to_string(version));
  }

  UNetConfig config;
  try {
    config = config_from_json(get_string(in, path));
  } catch (const nlohmann::json::exception& e) {
    throw std::runtime_error("bad checkpoint header in " + path.string() + ": " + e.what());
  }
  UNetWeights<float> weights = initialize_weights<float>(config, 0);

  const auto count = get<std::uint32_t>(in, path);
  std::uint32_t expected = 0;
  for_each_tensor(weights, [&](const TensorInfo&, const float*, Eigen::Index) { ++expected; });
  if (count != expected) {
    throw std::runtime_error("checkpoint holds " + std::to_string(count) + " tensors, config implies " +
                             std::to_string(expected));
  }
  for_each_tensor(weights, [&](const TensorInfo& info, float* data, Eigen::Index size) {
    const std::string name = get_string(in, path);
    if (name != info.name) throw std::runtime_error("checkpoint tensor '" + name + "' where '" + info.name + "' expected");
    const auto n = get<std::uint64_t>(in, path);
    if (n != static_cast<std::uint64_t>(size)) {
      throw std::runtime_error("checkpoint tensor '" + name + "' has " + std::to_string(n) + " values, expected " +
                               std::to_string(size));
    }
    in.read(reinterpret_cast<char*>(data), static_cast<std::streamsize>(size * sizeof(float)));
    if (!in) throw std::runtime_error("truncated checkpoint " + path.string());
  });
  if (in.peek() != std::ifstream::traits_type::eof()) {
    throw std::runtime_error("trailing bytes in checkpoint " + path.string());
  }
  return weights;
}

}  // namespace sfr
