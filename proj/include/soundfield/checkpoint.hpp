// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "soundfield/pconv_net.hpp"

#include <filesystem>
#include <string>

namespace sfr {

/// Binary checkpoint layout (all integers little-endian):
///
///   magic      8 bytes  "SFRCKPT\0"
///   version    u32      1
///   header     u32 length + UTF-8 JSON of the UNetConfig
///   tensors    u32 count, then per tensor in for_each_tensor() order:
///                u32 name length, name bytes, u64 element count,
///                element count float32 values (row-major)
inline constexpr std::uint32_t kCheckpointVersion = 1;

void save_checkpoint(const UNetWeights<float>& weights, const std::filesystem::path& path);

/// Throws std::runtime_error when the file is unreadable or its tensors do
/// not match the stored configuration.
UNetWeights<float> load_checkpoint(const std::filesystem::path& path);

std::string config_to_json(const UNetConfig& config);
UNetConfig config_from_json(const std::string& text);

}  // namespace sfr
