// SPDX-License-Identifier: Apache-2.0
#include "soundfield/metrics.hpp"

#include <cmath>
#include <fstream>
#include <iomanip>
#include <limits>
#include <stdexcept>

namespace sfr {

RegressionCoeffs fit_rescale(const Matrix<float>& pred_scaled, const Observations& observations) {
  const auto& points = observations.arrangement.points;
  if (points.empty()) throw std::invalid_argument("rescale needs at least one observation");
  if (pred_scaled.cols() != kPlaneSize || pred_scaled.rows() != observations.values.rows()) {
    throw std::invalid_argument("prediction shape does not match the observations");
  }
  const auto rows = pred_scaled.rows();
  const auto n = static_cast<Eigen::Index>(points.size());

  Matrix<double> x(rows, n);
  for (Eigen::Index m = 0; m < n; ++m) x.col(m) = pred_scaled.col(points[static_cast<size_t>(m)].fine_flat()).cast<double>();
  const Matrix<double>& y = observations.values;

  RegressionCoeffs coeffs;
  coeffs.slope.resize(rows);
  coeffs.intercept.resize(rows);
  coeffs.degenerate.assign(static_cast<size_t>(rows), false);
  for (Eigen::Index k = 0; k < rows; ++k) {
    // Normal equations in centered form: a = Sxy / Sxx, b = mean(y) - a mean(x).
    const double mx = x.row(k).mean();
    const double my = y.row(k).mean();
    const auto dx = (x.row(k).array() - mx).eval();
    const double sxx = dx.square().sum();
    const double sxy = (dx * (y.row(k).array() - my)).sum();
    const double scale = x.row(k).cwiseAbs().maxCoeff();
    if (sxx <= static_cast<double>(n) * 1e-24 * std::max(scale * scale, 1e-300)) {
      coeffs.slope(k) = 0.0;
      coeffs.intercept(k) = my;
      coeffs.degenerate[static_cast<size_t>(k)] = true;
    } else {
      coeffs.slope(k) = sxy / sxx;
      coeffs.intercept(k) = my - coeffs.slope(k) * mx;
    }
  }
  return coeffs;
}

FieldTensor rescale(const Matrix<float>& pred_scaled, const Observations& observations, const RoomSpec& room) {
  const RegressionCoeffs coeffs = fit_rescale(pred_scaled, observations);
  Matrix<double> restored = pred_scaled.cast<double>();
  restored = ((restored.array().colwise() * coeffs.slope.array()).colwise() + coeffs.intercept.array()).matrix();
  FieldTensor out;
  out.values = restored.cwiseMax(0.0).cast<float>();
  out.room = room;
  return out;
}

double nmse_to_db(double linear) {
  if (std::isnan(linear)) return linear;
  if (linear <= 0.0) return kNmseFloorDb;
  return std::max(10.0 * std::log10(linear), kNmseFloorDb);
}

MetricCurve nmse(const FieldTensor& truth, const FieldTensor& pred) {
  MetricCurve curve;
  const auto rows = truth.values.rows();
  if (pred.values.rows() != rows || pred.values.cols() != truth.values.cols()) {
    throw std::invalid_argument("nmse: shape mismatch");
  }
  for (Eigen::Index k = 0; k < rows; ++k) {
    const auto s = truth.values.row(k).cast<double>().array();
    const auto e = s - pred.values.row(k).cast<double>().array();
    const double energy = s.square().sum();
    if (energy == 0.0) {
      curve.value.push_back(std::numeric_limits<double>::quiet_NaN());
      curve.flagged.push_back(true);
    } else {
      curve.value.push_back(e.square().sum() / energy);
      curve.flagged.push_back(false);
    }
    curve.db.push_back(nmse_to_db(curve.value.back()));
  }
  return curve;
}

MetricCurve mssim_curve(const FieldTensor& truth, const FieldTensor& pred) {
  MetricCurve curve;
  for (Eigen::Index k = 0; k < truth.values.rows(); ++k) {
    const MssimResult r = mssim(truth.slice(static_cast<int>(k)), pred.slice(static_cast<int>(k)));
    curve.value.push_back(r.value);
    curve.flagged.push_back(r.degenerate_range);
  }
  return curve;
}

void write_metric_csv(const std::filesystem::path& path, const FrequencyGrid& freqs, const MetricCurve& nmse_curve,
                      const MetricCurve& mssim_values) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << "frequency_hz,nmse_db,mssim\n" << std::setprecision(10);
  for (int k = 0; k < freqs.size(); ++k) {
    out << freqs.hz[static_cast<size_t>(k)] << ',' << nmse_curve.db.at(static_cast<size_t>(k)) << ','
        << mssim_values.value.at(static_cast<size_t>(k)) << '\n';
  }
  if (!out) throw std::runtime_error("failed writing " + path.string());
}

}  // namespace sfr
