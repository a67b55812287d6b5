// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "soundfield/preprocess.hpp"
#include "soundfield/types.hpp"

#include <Eigen/Core>

#include <filesystem>
#include <vector>

namespace sfr {

/// Per-frequency affine map ŝ = a_k ŝ_p + b_k.
struct RegressionCoeffs {
  Vector<double> slope;
  Vector<double> intercept;
  std::vector<bool> degenerate;   // prediction constant over the observed points
};

/// Least-squares fit of the network output at the observed fine points to
/// the measured values, per frequency. A constant prediction gives slope 0
/// and the mean measurement as intercept.
RegressionCoeffs fit_rescale(const Matrix<float>& pred_scaled, const Observations& observations);

/// Applies fit_rescale() everywhere and clamps negative magnitudes to 0.
FieldTensor rescale(const Matrix<float>& pred_scaled, const Observations& observations, const RoomSpec& room);

inline constexpr double kNmseFloorDb = -300.0;

struct MetricCurve {
  std::vector<double> value;    // linear NMSE or MSSIM; NaN when undefined
  std::vector<double> db;       // NMSE only
  std::vector<bool> flagged;    // NMSE: undefined slice; MSSIM: zero dynamic range

  [[nodiscard]] int size() const { return static_cast<int>(value.size()); }
};

/// Sum |s - ŝ|^2 / sum |s|^2 per frequency slice; dB floored at -300.
MetricCurve nmse(const FieldTensor& truth, const FieldTensor& pred);

double nmse_to_db(double linear);

inline constexpr double kSsimH1 = 0.01;
inline constexpr double kSsimH2 = 0.03;
inline constexpr int kSsimWindow = 7;

/// SSIM of two equally sized matrices using plain means, unbiased
/// (n - 1) variances and covariance, c1 = (0.01 R)^2 and c2 = (0.03 R)^2.
template <typename DerivedA, typename DerivedB>
double ssim(const Eigen::MatrixBase<DerivedA>& a, const Eigen::MatrixBase<DerivedB>& b, double dynamic_range) {
  eigen_assert(a.rows() == b.rows() && a.cols() == b.cols());
  const auto n = static_cast<double>(a.size());
  const auto x = a.template cast<double>().array().eval();
  const auto y = b.template cast<double>().array().eval();
  const double mu_x = x.mean();
  const double mu_y = y.mean();
  const double dof = n > 1.0 ? n - 1.0 : 1.0;
  const double var_x = (x - mu_x).square().sum() / dof;
  const double var_y = (y - mu_y).square().sum() / dof;
  const double cov = ((x - mu_x) * (y - mu_y)).sum() / dof;
  const double c1 = (kSsimH1 * dynamic_range) * (kSsimH1 * dynamic_range);
  const double c2 = (kSsimH2 * dynamic_range) * (kSsimH2 * dynamic_range);
  return ((2.0 * mu_x * mu_y + c1) * (2.0 * cov + c2)) /
         ((mu_x * mu_x + mu_y * mu_y + c1) * (var_x + var_y + c2));
}

struct MssimResult {
  double value = 0.0;
  int windows = 0;
  bool degenerate_range = false;   // truth slice constant; R taken as 1
};

/// Mean SSIM over every fully contained window x window patch (stride 1),
/// with R = max - min of the truth slice.
template <typename DerivedA, typename DerivedB>
MssimResult mssim(const Eigen::MatrixBase<DerivedA>& truth, const Eigen::MatrixBase<DerivedB>& pred,
                  int window = kSsimWindow) {
  eigen_assert(truth.rows() == pred.rows() && truth.cols() == pred.cols());
  MssimResult result;
  double range = static_cast<double>(truth.maxCoeff()) - static_cast<double>(truth.minCoeff());
  if (!(range > 0.0)) {
    range = 1.0;
    result.degenerate_range = true;
  }
  double sum = 0.0;
  for (Eigen::Index r = 0; r + window <= truth.rows(); ++r) {
    for (Eigen::Index c = 0; c + window <= truth.cols(); ++c) {
      sum += ssim(truth.block(r, c, window, window), pred.block(r, c, window, window), range);
      ++result.windows;
    }
  }
  result.value = result.windows > 0 ? sum / result.windows : 0.0;
  return result;
}

/// MSSIM for every frequency slice.
MetricCurve mssim_curve(const FieldTensor& truth, const FieldTensor& pred);

/// Columns frequency_hz, nmse_db, mssim; one row per frequency.
void write_metric_csv(const std::filesystem::path& path, const FrequencyGrid& freqs, const MetricCurve& nmse_curve,
                      const MetricCurve& mssim_values);

}  // namespace sfr
