// SPDX-License-Identifier: Apache-2.0
#include "soundfield/modal_sim.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <numbers>
#include <stdexcept>

namespace sfr {

void RoomSpec::validate() const {
  if (!(lx > 0.0 && ly > 0.0 && lz > 0.0)) throw std::invalid_argument("room dimensions must be positive");
  if (!(t60 > 0.0)) throw std::invalid_argument("t60 must be positive");
  if (!(c > 0.0)) throw std::invalid_argument("speed of sound must be positive");
  if (!(source_x > 0.0 && source_x < lx && source_y > 0.0 && source_y < ly)) {
    throw std::invalid_argument("source must lie strictly inside the floor plan");
  }
}

void GridSpec::validate() const {
  if (coarse_x != kCoarseN || coarse_y != kCoarseN || upsample_x != kUpsample || upsample_y != kUpsample ||
      fine_n != kFineN) {
    throw std::invalid_argument("only the 8x8 coarse / 32x32 fine grid is supported");
  }
}

double FrequencyGrid::omega(int k) const { return 2.0 * std::numbers::pi * hz.at(static_cast<size_t>(k)); }

FrequencyGrid frequency_grid() {
  FrequencyGrid grid;
  grid.hz.reserve(kNumFrequencies);
  for (int k = 0; k < kNumFrequencies; ++k) grid.hz.push_back(30.0 * std::exp2(k / 12.0));
  return grid;
}

double resonance_frequency(const ModeIndex& mode, const RoomSpec& room) {
  const double ax = mode.nx / room.lx;
  const double ay = mode.ny / room.ly;
  const double az = mode.nz / room.lz;
  return 0.5 * room.c * std::sqrt(ax * ax + ay * ay + az * az);
}

namespace {

double epsilon(int n) { return n == 0 ? 1.0 : 2.0; }

double normalization(const ModeIndex& mode) {
  return std::sqrt(epsilon(mode.nx) * epsilon(mode.ny) * epsilon(mode.nz));
}

}  // namespace

double mode_shape(const ModeIndex& mode, const RoomSpec& room, const Eigen::Vector3d& point) {
  using std::numbers::pi;
  return normalization(mode) * std::cos(mode.nx * pi * point.x() / room.lx) *
         std::cos(mode.ny * pi * point.y() / room.ly) * std::cos(mode.nz * pi * point.z() / room.lz);
}

std::vector<ModeIndex> enumerate_modes(const RoomSpec& room, double f_max, bool include_height) {
  if (!(f_max > 0.0)) throw std::invalid_argument("f_max must be positive");
  // f_N >= c n_i / (2 l_i) for every axis, which bounds each index.
  const auto bound = [&](double length) { return static_cast<int>(std::ceil(2.0 * f_max * length / room.c)); };
  const int max_x = bound(room.lx);
  const int max_y = bound(room.ly);
  const int max_z = include_height ? bound(room.lz) : 0;

  std::vector<std::pair<double, ModeIndex>> found;
  for (int nx = 0; nx <= max_x; ++nx) {
    for (int ny = 0; ny <= max_y; ++ny) {
      for (int nz = 0; nz <= max_z; ++nz) {
        const ModeIndex mode{nx, ny, nz};
        const double f = resonance_frequency(mode, room);
        if (f < f_max) found.emplace_back(f, mode);
      }
    }
  }
  std::sort(found.begin(), found.end());

  std::vector<ModeIndex> modes;
  modes.reserve(found.size());
  for (const auto& entry : found) modes.push_back(entry.second);
  return modes;
}

double time_constant(const RoomSpec& room) {
  if (!(room.t60 > 0.0)) throw std::invalid_argument("t60 must be positive");
  return room.t60 / (3.0 * std::log(10.0));
}

std::complex<double> greens_function(const RoomSpec& room, const Eigen::Vector3d& receiver,
                                     const Eigen::Vector3d& source, double omega,
                                     std::span<const ModeIndex> modes) {
  if (modes.empty()) throw std::invalid_argument("greens_function needs at least one mode");
  const double tau = time_constant(room);
  const double k2 = (omega / room.c) * (omega / room.c);
  const std::complex<double> damping(0.0, omega / (tau * room.c * room.c));

  std::complex<double> sum = 0.0;
  for (const auto& mode : modes) {
    const double kn = 2.0 * std::numbers::pi * resonance_frequency(mode, room) / room.c;
    sum += mode_shape(mode, room, receiver) * mode_shape(mode, room, source) / (k2 - kn * kn - damping);
  }
  return -sum / room.volume();
}

std::complex<double> greens_function(const RoomSpec& room, const Eigen::Vector3d& receiver, double omega,
                                     std::span<const ModeIndex> modes) {
  return greens_function(room, receiver, Eigen::Vector3d(room.source_x, room.source_y, 0.0), omega, modes);
}

Matrix<double> field_magnitudes(const RoomSpec& room, const FrequencyGrid& freqs) {
  room.validate();
  const auto modes = enumerate_modes(room, kModeCutoffHz, false);
  const auto n_modes = static_cast<Eigen::Index>(modes.size());
  const GridSpec grid;
  const Eigen::Vector3d source(room.source_x, room.source_y, 0.0);

  // G(r, w_k) = -(1/V) sum_N psi_N(r) * [psi_N(r0) / den_N(w_k)] is a
  // (points x modes) * (modes x frequencies) product.
  Eigen::MatrixXd shapes(kPlaneSize, n_modes);
  for (int j = 0; j < kFineN; ++j) {
    for (int i = 0; i < kFineN; ++i) {
      const Eigen::Vector3d point(grid.fine_position(i, room.lx), grid.fine_position(j, room.ly), 0.0);
      for (Eigen::Index m = 0; m < n_modes; ++m) shapes(j * kFineN + i, m) = mode_shape(modes[m], room, point);
    }
  }

  const double tau = time_constant(room);
  Eigen::MatrixXcd weights(n_modes, freqs.size());
  for (int k = 0; k < freqs.size(); ++k) {
    const double omega = freqs.omega(k);
    const double k2 = (omega / room.c) * (omega / room.c);
    const std::complex<double> damping(0.0, omega / (tau * room.c * room.c));
    for (Eigen::Index m = 0; m < n_modes; ++m) {
      const double kn = 2.0 * std::numbers::pi * resonance_frequency(modes[m], room) / room.c;
      weights(m, k) = mode_shape(modes[m], room, source) / (k2 - kn * kn - damping);
    }
  }

  const Eigen::MatrixXcd green = -(shapes.cast<std::complex<double>>() * weights) / room.volume();
  Matrix<double> magnitudes = green.cwiseAbs().transpose();
  if (!magnitudes.allFinite()) throw std::runtime_error("non-finite value in simulated field");
  return magnitudes;
}

FieldTensor magnitude_field(const RoomSpec& room, const FrequencyGrid& freqs) {
  if (freqs.size() != kNumFrequencies) throw std::invalid_argument("field tensors hold exactly 40 frequencies");
  FieldTensor field;
  field.values = field_magnitudes(room, freqs).cast<float>();
  field.room = room;
  return field;
}

}  // namespace sfr
