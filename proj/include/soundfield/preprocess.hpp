// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "soundfield/dataset.hpp"
#include "soundfield/types.hpp"

#include <span>
#include <vector>

namespace sfr {

/// Index on the 8x8 microphone grid; i along x, j along y.
struct CoarsePoint {
  int i = 0;
  int j = 0;

  [[nodiscard]] int flat() const { return j * kCoarseN + i; }
  /// Column of the matching fine-grid point (4i, 4j).
  [[nodiscard]] int fine_flat() const { return (kUpsample * j) * kFineN + kUpsample * i; }

  auto operator<=>(const CoarsePoint&) const = default;
};

struct MicArrangement {
  std::vector<CoarsePoint> points;

  [[nodiscard]] int size() const { return static_cast<int>(points.size()); }
  [[nodiscard]] bool contains(CoarsePoint p) const;
  /// Non-empty, in range, no duplicates.
  void validate() const;
};

/// Measured magnitudes: column m holds the K values at arrangement.points[m].
struct Observations {
  MicArrangement arrangement;
  Matrix<double> values;
};

struct ScaleParams {
  Vector<double> min;
  Vector<double> max;
  std::vector<bool> degenerate;   // max == min for that frequency
};

struct NetworkInput {
  Matrix<float> s_irr;   // K x 1024
  Matrix<float> mask;    // K x 1024, identical rows
  ScaleParams scale;
};

/// Uniform subset of the 64 coarse points, without replacement.
MicArrangement sample_arrangement(Rng& rng, int n_mic);

/// Reads the field at the arrangement's fine positions (4i, 4j).
Observations observe(const FieldTensor& field, const MicArrangement& arrangement);

/// K x 64 grid: observed values where measured, per-frequency max elsewhere.
Matrix<double> complete(const Observations& observations);

struct ScaledGrid {
  Matrix<double> values;   // K x 64 in [0, 1]
  ScaleParams params;
};

/// Min-max scaling per frequency over the observed points. A constant
/// frequency maps to 0.5 everywhere and is flagged degenerate.
ScaledGrid scale(const Matrix<double>& completed, const MicArrangement& arrangement);

/// Places coarse values at (4i, 4j), 1 elsewhere, plus the binary mask.
NetworkInput upsample_and_mask(const ScaledGrid& scaled, const MicArrangement& arrangement);

/// complete -> scale -> upsample_and_mask.
NetworkInput prepare_input(const Observations& observations);

}  // namespace sfr
