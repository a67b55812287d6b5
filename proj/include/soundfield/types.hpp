// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <Eigen/Core>

#include <cstdint>
#include <vector>

namespace sfr {

/// Row-major dynamic matrix. Tensors in this library are stored as
/// (channels or frequencies) x (flattened plane) with each row contiguous.
template <typename Scalar>
using Matrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <typename Scalar>
using Vector = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

template <typename Scalar>
using RowVector = Eigen::Matrix<Scalar, 1, Eigen::Dynamic>;

inline constexpr int kCoarseN = 8;     // microphone candidate grid, per axis
inline constexpr int kUpsample = 4;    // fine points per coarse step
inline constexpr int kFineN = kCoarseN * kUpsample;
inline constexpr int kPlaneSize = kFineN * kFineN;
inline constexpr int kCoarsePlaneSize = kCoarseN * kCoarseN;
inline constexpr int kNumFrequencies = 40;

/// Rectangular room with a point source in the plane z = 0.
struct RoomSpec {
  double lx = 5.0;
  double ly = 4.0;
  double lz = 2.5;
  double t60 = 0.6;    // seconds
  double c = 343.0;    // m/s
  double source_x = 1.0;
  double source_y = 1.0;

  [[nodiscard]] double volume() const { return lx * ly * lz; }

  /// Throws std::invalid_argument when geometry or acoustics are out of range.
  void validate() const;

  bool operator==(const RoomSpec&) const = default;
};

/// Coarse microphone grid embedded in the fine reconstruction grid.
/// Only the 8x8 -> 32x32 geometry is supported by the network and file format.
struct GridSpec {
  int coarse_x = kCoarseN;
  int coarse_y = kCoarseN;
  int upsample_x = kUpsample;
  int upsample_y = kUpsample;
  int fine_n = kFineN;

  void validate() const;

  /// Physical coordinate of fine index `i` along an axis of length `length`.
  [[nodiscard]] double fine_position(int i, double length) const {
    return static_cast<double>(i) * length / static_cast<double>(fine_n - 1);
  }

  bool operator==(const GridSpec&) const = default;
};

struct FrequencyGrid {
  std::vector<double> hz;

  [[nodiscard]] int size() const { return static_cast<int>(hz.size()); }
  [[nodiscard]] double omega(int k) const;
};

/// Magnitude field on the fine grid. Row k holds the 32x32 slice of
/// frequency k with element (j, i) at column j * 32 + i (j = y, i = x).
struct FieldTensor {
  Matrix<float> values = Matrix<float>::Zero(kNumFrequencies, kPlaneSize);
  RoomSpec room;

  [[nodiscard]] float at(int k, int j, int i) const { return values(k, j * kFineN + i); }
  float& at(int k, int j, int i) { return values(k, j * kFineN + i); }

  /// 32x32 view of frequency slice k, indexed (y, x).
  [[nodiscard]] Eigen::Map<const Matrix<float>> slice(int k) const {
    return {values.row(k).data(), kFineN, kFineN};
  }
};

}  // namespace sfr
