// SPDX-License-Identifier: Apache-2.0
#include "soundfield/preprocess.hpp"

#include <algorithm>
#include <array>
#include <limits>
#include <numeric>
#include <set>
#include <stdexcept>
#include <string>

namespace sfr {

bool MicArrangement::contains(CoarsePoint p) const {
  return std::find(points.begin(), points.end(), p) != points.end();
}

void MicArrangement::validate() const {
  if (points.empty()) throw std::invalid_argument("microphone arrangement is empty");
  std::set<CoarsePoint> seen;
  for (const auto& p : points) {
    if (p.i < 0 || p.i >= kCoarseN || p.j < 0 || p.j >= kCoarseN) {
      throw std::invalid_argument("coarse point out of range");
    }
    if (!seen.insert(p).second) throw std::invalid_argument("duplicate coarse point in arrangement");
  }
}

MicArrangement sample_arrangement(Rng& rng, int n_mic) {
  if (n_mic < 1 || n_mic > kCoarsePlaneSize) {
    throw std::invalid_argument("n_mic must be in [1, 64], got " + std::to_string(n_mic));
  }
  // Partial Fisher-Yates over the 64 cells.
  std::array<int, kCoarsePlaneSize> cells{};
  std::iota(cells.begin(), cells.end(), 0);
  MicArrangement arrangement;
  arrangement.points.reserve(static_cast<size_t>(n_mic));
  for (int m = 0; m < n_mic; ++m) {
    std::uniform_int_distribution<int> pick(m, kCoarsePlaneSize - 1);
    std::swap(cells[static_cast<size_t>(m)], cells[static_cast<size_t>(pick(rng))]);
    const int c = cells[static_cast<size_t>(m)];
    arrangement.points.push_back({c % kCoarseN, c / kCoarseN});
  }
  return arrangement;
}

Observations observe(const FieldTensor& field, const MicArrangement& arrangement) {
  arrangement.validate();
  Observations obs;
  obs.arrangement = arrangement;
  obs.values.resize(field.values.rows(), arrangement.size());
  for (int m = 0; m < arrangement.size(); ++m) {
    obs.values.col(m) = field.values.col(arrangement.points[static_cast<size_t>(m)].fine_flat()).cast<double>();
  }
  return obs;
}

Matrix<double> complete(const Observations& observations) {
  const auto& arrangement = observations.arrangement;
  if (arrangement.points.empty()) throw std::invalid_argument("cannot complete an empty arrangement");
  if (observations.values.cols() != arrangement.size()) {
    throw std::invalid_argument("observation columns do not match the arrangement");
  }
  if (!observations.values.allFinite()) throw std::invalid_argument("observations must be finite");

  const Vector<double> fill = observations.values.rowwise().maxCoeff();
  Matrix<double> completed = fill.replicate(1, kCoarsePlaneSize);
  for (int m = 0; m < arrangement.size(); ++m) {
    completed.col(arrangement.points[static_cast<size_t>(m)].flat()) = observations.values.col(m);
  }
  return completed;
}

ScaledGrid scale(const Matrix<double>& completed, const MicArrangement& arrangement) {
  arrangement.validate();
  const auto rows = completed.rows();
  ScaledGrid out;
  out.params.min = Vector<double>::Constant(rows, std::numeric_limits<double>::infinity());
  out.params.max = Vector<double>::Constant(rows, -std::numeric_limits<double>::infinity());
  for (const auto& p : arrangement.points) {
    out.params.min = out.params.min.cwiseMin(completed.col(p.flat()));
    out.params.max = out.params.max.cwiseMax(completed.col(p.flat()));
  }

  out.values.resize(rows, completed.cols());
  out.params.degenerate.assign(static_cast<size_t>(rows), false);
  for (Eigen::Index k = 0; k < rows; ++k) {
    const double range = out.params.max(k) - out.params.min(k);
    if (range > 0.0) {
      out.values.row(k) = (completed.row(k).array() - out.params.min(k)) / range;
    } else {
      out.values.row(k).setConstant(0.5);
      out.params.degenerate[static_cast<size_t>(k)] = true;
    }
  }
  return out;
}

NetworkInput upsample_and_mask(const ScaledGrid& scaled, const MicArrangement& arrangement) {
  arrangement.validate();
  const auto rows = scaled.values.rows();
  NetworkInput input;
  input.s_irr = Matrix<float>::Ones(rows, kPlaneSize);
  input.mask = Matrix<float>::Zero(rows, kPlaneSize);
  for (int j = 0; j < kCoarseN; ++j) {
    for (int i = 0; i < kCoarseN; ++i) {
      const CoarsePoint p{i, j};
      input.s_irr.col(p.fine_flat()) = scaled.values.col(p.flat()).cast<float>();
    }
  }
  for (const auto& p : arrangement.points) input.mask.col(p.fine_flat()).setOnes();
  input.scale = scaled.params;
  return input;
}

NetworkInput prepare_input(const Observations& observations) {
  return upsample_and_mask(scale(complete(observations), observations.arrangement), observations.arrangement);
}

}  // namespace sfr
