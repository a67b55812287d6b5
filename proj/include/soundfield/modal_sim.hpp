// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "soundfield/types.hpp"

#include <Eigen/Core>

#include <compare>
#include <complex>
#include <span>
#include <vector>

namespace sfr {

/// Standing-wave index of a rigid-walled rectangular room.
struct ModeIndex {
  int nx = 0;
  int ny = 0;
  int nz = 0;

  auto operator<=>(const ModeIndex&) const = default;
};

/// Modes up to this resonance frequency enter the dataset fields.
inline constexpr double kModeCutoffHz = 400.0;

/// 1/12-octave grid f_k = 30 * 2^(k/12), k = 0..39.
FrequencyGrid frequency_grid();

/// Rigid-wall resonance f_N = (c/2) sqrt((nx/lx)^2 + (ny/ly)^2 + (nz/lz)^2), in Hz.
double resonance_frequency(const ModeIndex& mode, const RoomSpec& room);

/// Normalized cosine mode shape; Lambda_N = sqrt(eps_nx eps_ny eps_nz) with
/// eps_0 = 1 and eps_n = 2 otherwise.
double mode_shape(const ModeIndex& mode, const RoomSpec& room, const Eigen::Vector3d& point);

/// Every mode with resonance strictly below `f_max`, sorted by resonance
/// frequency then lexicographically. Without `include_height` only nz = 0.
std::vector<ModeIndex> enumerate_modes(const RoomSpec& room, double f_max, bool include_height = false);

/// Uniform modal time constant tau = T60 / (3 ln 10).
double time_constant(const RoomSpec& room);

/// Damped modal sum
///   G = -(1/V) sum_N psi_N(r) psi_N(r0) / ((w/c)^2 - (w_N/c)^2 - j w / (tau c^2)).
/// Throws std::invalid_argument on an empty mode list.
std::complex<double> greens_function(const RoomSpec& room, const Eigen::Vector3d& receiver,
                                     const Eigen::Vector3d& source, double omega,
                                     std::span<const ModeIndex> modes);

/// Same, with the source taken from `room` at z = 0.
std::complex<double> greens_function(const RoomSpec& room, const Eigen::Vector3d& receiver, double omega,
                                     std::span<const ModeIndex> modes);

/// |G| over the fine grid in double precision, K x (32*32), using all
/// horizontal modes below 400 Hz. Throws std::runtime_error on a non-finite value.
Matrix<double> field_magnitudes(const RoomSpec& room, const FrequencyGrid& freqs);

/// Float32 field tensor of field_magnitudes().
FieldTensor magnitude_field(const RoomSpec& room, const FrequencyGrid& freqs = frequency_grid());

}  // namespace sfr
