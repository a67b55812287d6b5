// SPDX-License-Identifier: Apache-2.0
// Test-only generators and brute-force reference implementations. None of
// these call into the code under test beyond plain data types.
#pragma once

#include "soundfield/dataset.hpp"
#include "soundfield/modal_sim.hpp"
#include "soundfield/pconv_net.hpp"
#include "soundfield/types.hpp"

#include <algorithm>
#include <cmath>
#include <complex>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

namespace sfr::test {

inline std::mt19937_64 rng_for(std::uint64_t salt) { return std::mt19937_64(0x5eed0000ULL + salt); }

inline double uniform(std::mt19937_64& rng, double lo, double hi) {
  return std::uniform_real_distribution<double>(lo, hi)(rng);
}

inline int uniform_int(std::mt19937_64& rng, int lo, int hi) {
  return std::uniform_int_distribution<int>(lo, hi)(rng);
}

inline RoomSpec random_room(std::mt19937_64& rng) {
  RoomSpec r;
  r.lx = uniform(rng, 3.0, 9.0);
  r.ly = uniform(rng, 3.0, 7.0);
  r.lz = uniform(rng, 2.2, 3.5);
  r.t60 = uniform(rng, 0.3, 1.2);
  r.source_x = uniform(rng, 0.05, 0.95) * r.lx;
  r.source_y = uniform(rng, 0.05, 0.95) * r.ly;
  return r;
}

// Direct transcription of the damped modal sum with the wavenumber written
// as k_N = pi sqrt(sum (n_i / l_i)^2).
inline std::complex<double> naive_greens(const RoomSpec& room, const double r[3], const double r0[3], double omega,
                                         const std::vector<ModeIndex>& modes) {
  const double pi = 3.14159265358979323846;
  const double len[3] = {room.lx, room.ly, room.lz};
  const double tau = room.t60 / (3.0 * std::log(10.0));
  const double k = omega / room.c;
  std::complex<double> total(0.0, 0.0);
  for (const auto& m : modes) {
    const int n[3] = {m.nx, m.ny, m.nz};
    double psi = 1.0;
    double psi0 = 1.0;
    double kn2 = 0.0;
    for (int a = 0; a < 3; ++a) {
      const double e = n[a] == 0 ? 1.0 : 2.0;
      psi *= std::sqrt(e) * std::cos(n[a] * pi * r[a] / len[a]);
      psi0 *= std::sqrt(e) * std::cos(n[a] * pi * r0[a] / len[a]);
      kn2 += (pi * n[a] / len[a]) * (pi * n[a] / len[a]);
    }
    total += psi * psi0 / std::complex<double>(k * k - kn2, -omega / (tau * room.c * room.c));
  }
  return -total / (room.lx * room.ly * room.lz);
}

// Every (nx, ny, nz) in a generous box, filtered by the resonance bound.
inline std::vector<ModeIndex> brute_force_modes(const RoomSpec& room, double f_max, bool include_height) {
  std::vector<ModeIndex> out;
  for (int nx = 0; nx < 200; ++nx) {
    for (int ny = 0; ny < 200; ++ny) {
      for (int nz = 0; nz < (include_height ? 200 : 1); ++nz) {
        const double q = (nx / room.lx) * (nx / room.lx) + (ny / room.ly) * (ny / room.ly) +
                         (nz / room.lz) * (nz / room.lz);
        if (0.5 * room.c * std::sqrt(q) < f_max) out.push_back({nx, ny, nz});
      }
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Nested-loop network reference. Tensors are [b][c][y][x] in flat vectors.

struct Tensor4 {
  int b = 0, c = 0, h = 0, w = 0;
  std::vector<double> v;

  Tensor4() = default;
  Tensor4(int b_, int c_, int h_, int w_) : b(b_), c(c_), h(h_), w(w_), v(static_cast<size_t>(b_ * c_ * h_ * w_), 0.0) {}
  double& operator()(int bi, int ci, int y, int x) { return v[static_cast<size_t>(((bi * c + ci) * h + y) * w + x)]; }
  double operator()(int bi, int ci, int y, int x) const {
    return v[static_cast<size_t>(((bi * c + ci) * h + y) * w + x)];
  }
};

template <typename Scalar>
Tensor4 to_tensor(const Matrix<Scalar>& m, int batch, int h, int w) {
  Tensor4 t(batch, static_cast<int>(m.rows()), h, w);
  for (int b = 0; b < batch; ++b)
    for (int c = 0; c < t.c; ++c)
      for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) t(b, c, y, x) = static_cast<double>(m(c, b * h * w + y * w + x));
  return t;
}

inline Matrix<double> from_tensor(const Tensor4& t) {
  Matrix<double> m(t.c, t.b * t.h * t.w);
  for (int b = 0; b < t.b; ++b)
    for (int c = 0; c < t.c; ++c)
      for (int y = 0; y < t.h; ++y)
        for (int x = 0; x < t.w; ++x) m(c, b * t.h * t.w + y * t.w + x) = t(b, c, y, x);
  return m;
}

// Plain zero-padded convolution, weights [o][c][ky][kx].
template <typename Scalar>
Tensor4 dense_conv(const Tensor4& in, const ConvLayer<Scalar>& layer) {
  const int k = layer.geometry.kernel, s = layer.geometry.stride, p = layer.geometry.padding;
  const int oh = (in.h + 2 * p - k) / s + 1, ow = (in.w + 2 * p - k) / s + 1;
  Tensor4 out(in.b, layer.out_channels(), oh, ow);
  for (int b = 0; b < in.b; ++b)
    for (int o = 0; o < out.c; ++o)
      for (int y = 0; y < oh; ++y)
        for (int x = 0; x < ow; ++x) {
          double acc = static_cast<double>(layer.bias(o));
          for (int c = 0; c < in.c; ++c)
            for (int ky = 0; ky < k; ++ky)
              for (int kx = 0; kx < k; ++kx) {
                const int iy = y * s + ky - p, ix = x * s + kx - p;
                if (iy < 0 || iy >= in.h || ix < 0 || ix >= in.w) continue;
                acc += static_cast<double>(layer.weight(o, (c * k + ky) * k + kx)) * in(b, c, iy, ix);
              }
          out(b, o, y, x) = acc;
        }
  return out;
}

// Partial convolution straight from its definition: renormalize by
// (window size) / (valid cells in window), zero and no bias when none.
template <typename Scalar>
std::pair<Tensor4, Tensor4> naive_partial_conv(const Tensor4& in, const Tensor4& mask, const ConvLayer<Scalar>& layer) {
  const int k = layer.geometry.kernel, s = layer.geometry.stride, p = layer.geometry.padding;
  const int oh = (in.h + 2 * p - k) / s + 1, ow = (in.w + 2 * p - k) / s + 1;
  Tensor4 out(in.b, layer.out_channels(), oh, ow), out_mask(in.b, layer.out_channels(), oh, ow);
  for (int b = 0; b < in.b; ++b)
    for (int y = 0; y < oh; ++y)
      for (int x = 0; x < ow; ++x) {
        double covered = 0.0;
        for (int c = 0; c < in.c; ++c)
          for (int ky = 0; ky < k; ++ky)
            for (int kx = 0; kx < k; ++kx) {
              const int iy = y * s + ky - p, ix = x * s + kx - p;
              if (iy >= 0 && iy < in.h && ix >= 0 && ix < in.w) covered += mask(b, c, iy, ix);
            }
        for (int o = 0; o < out.c; ++o) {
          if (covered == 0.0) continue;
          double acc = 0.0;
          for (int c = 0; c < in.c; ++c)
            for (int ky = 0; ky < k; ++ky)
              for (int kx = 0; kx < k; ++kx) {
                const int iy = y * s + ky - p, ix = x * s + kx - p;
                if (iy < 0 || iy >= in.h || ix < 0 || ix >= in.w) continue;
                acc += static_cast<double>(layer.weight(o, (c * k + ky) * k + kx)) * in(b, c, iy, ix) *
                       mask(b, c, iy, ix);
              }
          out(b, o, y, x) = acc * (in.c * k * k) / covered + static_cast<double>(layer.bias(o));
          out_mask(b, o, y, x) = 1.0;
        }
      }
  return {out, out_mask};
}

template <typename Scalar>
void naive_batch_norm(Tensor4& t, const BatchNorm<Scalar>& bn, bool batch_statistics) {
  for (int c = 0; c < t.c; ++c) {
    double mean = static_cast<double>(bn.running_mean(c));
    double var = static_cast<double>(bn.running_var(c));
    if (batch_statistics) {
      double s = 0.0, ss = 0.0;
      const double n = static_cast<double>(t.b * t.h * t.w);
      for (int b = 0; b < t.b; ++b)
        for (int y = 0; y < t.h; ++y)
          for (int x = 0; x < t.w; ++x) s += t(b, c, y, x);
      mean = s / n;
      for (int b = 0; b < t.b; ++b)
        for (int y = 0; y < t.h; ++y)
          for (int x = 0; x < t.w; ++x) ss += (t(b, c, y, x) - mean) * (t(b, c, y, x) - mean);
      var = ss / n;
    }
    for (int b = 0; b < t.b; ++b)
      for (int y = 0; y < t.h; ++y)
        for (int x = 0; x < t.w; ++x)
          t(b, c, y, x) = static_cast<double>(bn.gamma(c)) * (t(b, c, y, x) - mean) / std::sqrt(var + 1e-3) +
                          static_cast<double>(bn.beta(c));
  }
}

inline Tensor4 naive_upsample(const Tensor4& t) {
  Tensor4 out(t.b, t.c, 2 * t.h, 2 * t.w);
  for (int b = 0; b < t.b; ++b)
    for (int c = 0; c < t.c; ++c)
      for (int y = 0; y < out.h; ++y)
        for (int x = 0; x < out.w; ++x) out(b, c, y, x) = t(b, c, y / 2, x / 2);
  return out;
}

inline Tensor4 naive_concat(const Tensor4& a, const Tensor4& b) {
  Tensor4 out(a.b, a.c + b.c, a.h, a.w);
  for (int n = 0; n < a.b; ++n)
    for (int y = 0; y < a.h; ++y)
      for (int x = 0; x < a.w; ++x) {
        for (int c = 0; c < a.c; ++c) out(n, c, y, x) = a(n, c, y, x);
        for (int c = 0; c < b.c; ++c) out(n, a.c + c, y, x) = b(n, c, y, x);
      }
  return out;
}

// Whole U-Net in nested loops; returns [b][c][y][x] sigmoid outputs.
template <typename Scalar>
Tensor4 naive_unet(const FeatureMap<Scalar>& input, const UNetWeights<Scalar>& w, bool training, bool freeze_encoder) {
  Tensor4 x = to_tensor(input.values, input.batch, input.height, input.width);
  Tensor4 m = to_tensor(input.mask, input.batch, input.height, input.width);
  const int depth = w.config.depth;
  std::vector<Tensor4> skips_x{x}, skips_m{m};
  for (int s = 0; s < depth; ++s) {
    auto [y, ym] = naive_partial_conv(skips_x.back(), skips_m.back(), w.encoder[static_cast<size_t>(s)]);
    if (w.encoder_bn[static_cast<size_t>(s)]) naive_batch_norm(y, *w.encoder_bn[static_cast<size_t>(s)], training && !freeze_encoder);
    for (double& v : y.v) v = std::max(v, 0.0);
    skips_x.push_back(y);
    skips_m.push_back(ym);
  }
  Tensor4 cur = skips_x.back(), cur_m = skips_m.back();
  for (int s = depth - 1; s >= 0; --s) {
    const Tensor4 cat = naive_concat(naive_upsample(cur), skips_x[static_cast<size_t>(s)]);
    const Tensor4 cat_m = naive_concat(naive_upsample(cur_m), skips_m[static_cast<size_t>(s)]);
    auto [y, ym] = naive_partial_conv(cat, cat_m, w.decoder[static_cast<size_t>(s)]);
    if (w.decoder_bn[static_cast<size_t>(s)]) naive_batch_norm(y, *w.decoder_bn[static_cast<size_t>(s)], training);
    for (double& v : y.v) v = v > 0.0 ? v : w.config.leaky_slope * v;
    cur = y;
    cur_m = ym;
  }
  Tensor4 out = dense_conv(cur, w.head);
  for (double& v : out.v) v = 1.0 / (1.0 + std::exp(-v));
  return out;
}

// Random feature map with a random binary mask shared by all channels.
template <typename Scalar>
FeatureMap<Scalar> random_feature_map(std::mt19937_64& rng, int batch, int channels, int size, double keep) {
  FeatureMap<Scalar> f;
  f.batch = batch;
  f.height = size;
  f.width = size;
  f.values.resize(channels, batch * size * size);
  f.mask.resize(channels, batch * size * size);
  for (Eigen::Index col = 0; col < f.values.cols(); ++col) {
    const bool on = uniform(rng, 0.0, 1.0) < keep;
    for (int c = 0; c < channels; ++c) {
      f.values(c, col) = static_cast<Scalar>(uniform(rng, 0.0, 1.0));
      f.mask(c, col) = on ? Scalar(1) : Scalar(0);
    }
  }
  return f;
}

// Randomizes every tensor of a network so batch norm is not the identity.
template <typename Scalar>
void perturb_weights(UNetWeights<Scalar>& w, std::mt19937_64& rng) {
  for_each_tensor(w, [&](const TensorInfo& info, Scalar* data, Eigen::Index size) {
    for (Eigen::Index i = 0; i < size; ++i) {
      switch (info.role) {
        case TensorRole::kWeight: break;
        case TensorRole::kBias: data[i] = static_cast<Scalar>(uniform(rng, -0.1, 0.1)); break;
        case TensorRole::kScale: data[i] = static_cast<Scalar>(uniform(rng, 0.5, 1.5)); break;
        case TensorRole::kShift: data[i] = static_cast<Scalar>(uniform(rng, -0.2, 0.2)); break;
        case TensorRole::kRunningMean: data[i] = static_cast<Scalar>(uniform(rng, -0.2, 0.2)); break;
        case TensorRole::kRunningVar: data[i] = static_cast<Scalar>(uniform(rng, 0.5, 2.0)); break;
      }
    }
  });
}

// Central-difference check of unet_backward for L = sum(weights_out . y).
// Parameters whose +-h perturbation flips the sign of any pre-activation
// are skipped: the loss has a kink there and differences are meaningless.
struct GradientCheck {
  int checked = 0;
  int skipped = 0;
  double max_rel = 0.0;
};

inline std::vector<bool> activation_signs(const UNetTrace<double>& t) {
  std::vector<bool> s;
  for (const auto* stages : {&t.encoder, &t.decoder})
    for (const auto& st : *stages)
      for (Eigen::Index i = 0; i < st.pre_activation.size(); ++i) s.push_back(st.pre_activation.data()[i] > 0.0);
  return s;
}

inline GradientCheck gradient_check(UNetWeights<double> w, const FeatureMap<double>& input,
                                    const ForwardOptions& options, std::mt19937_64& rng, int wanted, double h) {
  UNetTrace<double> base;
  const Matrix<double> out = unet_forward(input, w, options, &base);
  Matrix<double> upstream(out.rows(), out.cols());
  for (Eigen::Index i = 0; i < upstream.size(); ++i) upstream.data()[i] = uniform(rng, -1.0, 1.0);
  const UNetWeights<double> grad = unet_backward(base, w, upstream);
  const std::vector<bool> signs = activation_signs(base);

  std::vector<std::pair<double*, const double*>> params;   // (parameter, analytic gradient)
  std::vector<const double*> grads;
  for_each_tensor(grad, [&](const TensorInfo& info, const double* data, Eigen::Index size) {
    if (!info.learnable()) return;
    for (Eigen::Index i = 0; i < size; ++i) grads.push_back(data + i);
  });
  size_t g = 0;
  for_each_tensor(w, [&](const TensorInfo& info, double* data, Eigen::Index size) {
    if (!info.learnable()) return;
    for (Eigen::Index i = 0; i < size; ++i) params.emplace_back(data + i, grads[g++]);
  });
  std::shuffle(params.begin(), params.end(), rng);

  GradientCheck result;
  const auto loss = [&](UNetTrace<double>* trace) {
    return unet_forward(input, w, options, trace).cwiseProduct(upstream).sum();
  };
  for (const auto& [param, analytic] : params) {
    if (result.checked >= wanted) break;
    const double saved = *param;
    UNetTrace<double> tp, tm;
    *param = saved + h;
    const double lp = loss(&tp);
    *param = saved - h;
    const double lm = loss(&tm);
    *param = saved;
    if (activation_signs(tp) != signs || activation_signs(tm) != signs) {
      ++result.skipped;
      continue;
    }
    const double numeric = (lp - lm) / (2.0 * h);
    const double rel = std::abs(*analytic - numeric) / std::max({std::abs(*analytic), std::abs(numeric), 1e-6});
    result.max_rel = std::max(result.max_rel, rel);
    ++result.checked;
  }
  return result;
}

// Fresh scratch directory under the build tree.
inline std::filesystem::path scratch_dir(const std::string& name) {
  const auto dir = std::filesystem::temp_directory_path() / ("sfr_test_" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

}  // namespace sfr::test
