// SPDX-License-Identifier: Apache-2.0
#include "soundfield/pconv_net.hpp"

#include "soundfield/dataset.hpp"

#include <cmath>
#include <limits>
#include <random>

namespace sfr {

namespace {

void require(bool condition, const std::string& message) {
  if (!condition) throw std::invalid_argument(message);
}

/// Gathers kernel windows of a channels x (batch*h*w) map into
/// (channels*k*k) x (batch*oh*ow) columns; out-of-image taps read 0.
template <typename Scalar>
void im2col(const Matrix<Scalar>& src, int batch, int h, int w, const ConvGeometry& g, Matrix<Scalar>& cols) {
  const int k = g.kernel;
  const int oh = g.output_size(h);
  const int ow = g.output_size(w);
  const auto channels = src.rows();
  const Eigen::Index in_plane = static_cast<Eigen::Index>(h) * w;
  const Eigen::Index out_plane = static_cast<Eigen::Index>(oh) * ow;
  cols.resize(channels * k * k, batch * out_plane);
  for (Eigen::Index c = 0; c < channels; ++c) {
    const Scalar* channel = src.row(c).data();
    for (int ky = 0; ky < k; ++ky) {
      for (int kx = 0; kx < k; ++kx) {
        Scalar* dst = cols.row((c * k + ky) * k + kx).data();
        for (int b = 0; b < batch; ++b) {
          const Scalar* plane = channel + b * in_plane;
          for (int oy = 0; oy < oh; ++oy) {
            const int iy = oy * g.stride + ky - g.padding;
            if (iy < 0 || iy >= h) {
              std::fill(dst, dst + ow, Scalar(0));
              dst += ow;
              continue;
            }
            const Scalar* row = plane + static_cast<Eigen::Index>(iy) * w;
            for (int ox = 0; ox < ow; ++ox) {
              const int ix = ox * g.stride + kx - g.padding;
              *dst++ = (ix >= 0 && ix < w) ? row[ix] : Scalar(0);
            }
          }
        }
      }
    }
  }
}

/// Adjoint of im2col: scatters column gradients back onto the input map.
template <typename Scalar>
void col2im(const Matrix<Scalar>& cols, int channels, int batch, int h, int w, const ConvGeometry& g,
            Matrix<Scalar>& dst) {
  const int k = g.kernel;
  const int oh = g.output_size(h);
  const int ow = g.output_size(w);
  const Eigen::Index in_plane = static_cast<Eigen::Index>(h) * w;
  dst.setZero(channels, batch * in_plane);
  for (int c = 0; c < channels; ++c) {
    Scalar* channel = dst.row(c).data();
    for (int ky = 0; ky < k; ++ky) {
      for (int kx = 0; kx < k; ++kx) {
        const Scalar* src = cols.row((c * k + ky) * k + kx).data();
        for (int b = 0; b < batch; ++b) {
          Scalar* plane = channel + b * in_plane;
          for (int oy = 0; oy < oh; ++oy) {
            const int iy = oy * g.stride + ky - g.padding;
            if (iy < 0 || iy >= h) {
              src += ow;
              continue;
            }
            Scalar* row = plane + static_cast<Eigen::Index>(iy) * w;
            for (int ox = 0; ox < ow; ++ox, ++src) {
              const int ix = ox * g.stride + kx - g.padding;
              if (ix >= 0 && ix < w) row[ix] += *src;
            }
          }
        }
      }
    }
  }
}

template <typename Scalar>
ConvLayer<Scalar> make_conv(int in_channels, int out_channels, int kernel, int stride, std::mt19937_64& rng) {
  ConvLayer<Scalar> layer;
  layer.geometry = {kernel, stride, (kernel - 1) / 2};
  const int fan_in = in_channels * kernel * kernel;
  const double limit = std::sqrt(6.0 / fan_in);
  std::uniform_real_distribution<double> dist(-limit, limit);
  layer.weight.resize(out_channels, fan_in);
  for (Eigen::Index i = 0; i < layer.weight.size(); ++i) layer.weight.data()[i] = static_cast<Scalar>(dist(rng));
  layer.bias = Vector<Scalar>::Zero(out_channels);
  return layer;
}

template <typename Scalar>
BatchNorm<Scalar> make_batch_norm(int channels) {
  return {Vector<Scalar>::Ones(channels), Vector<Scalar>::Zero(channels), Vector<Scalar>::Zero(channels),
          Vector<Scalar>::Ones(channels)};
}

template <typename Scalar>
Matrix<Scalar> batch_norm_forward(const Matrix<Scalar>& x, const BatchNorm<Scalar>& bn, BatchNormMode mode,
                                  StageTrace<Scalar>* trace) {
  const auto eps = static_cast<Scalar>(kBatchNormEpsilon);
  Vector<Scalar> mean;
  Vector<Scalar> var;
  if (mode == BatchNormMode::kBatchStatistics) {
    mean = x.rowwise().mean();
    var = (x.colwise() - mean).array().square().rowwise().mean();
  } else {
    mean = bn.running_mean;
    var = bn.running_var;
  }
  const Vector<Scalar> inv_std = (var.array() + eps).rsqrt();
  Matrix<Scalar> normalized = ((x.colwise() - mean).array().colwise() * inv_std.array()).matrix();
  Matrix<Scalar> y = ((normalized.array().colwise() * bn.gamma.array()).colwise() + bn.beta.array()).matrix();
  if (trace) {
    trace->has_bn = true;
    trace->bn_mode = mode;
    trace->batch_mean = std::move(mean);
    trace->batch_var = std::move(var);
    trace->inv_std = inv_std;
    trace->normalized = std::move(normalized);
  }
  return y;
}

/// Returns dL/dx and accumulates dL/dgamma, dL/dbeta into `grad`.
template <typename Scalar>
Matrix<Scalar> batch_norm_backward(const Matrix<Scalar>& dy, const BatchNorm<Scalar>& bn,
                                   const StageTrace<Scalar>& trace, BatchNorm<Scalar>& grad) {
  const auto& xhat = trace.normalized;
  grad.gamma = dy.cwiseProduct(xhat).rowwise().sum();
  grad.beta = dy.rowwise().sum();
  const Vector<Scalar> scale = bn.gamma.cwiseProduct(trace.inv_std);
  if (trace.bn_mode == BatchNormMode::kRunningStatistics) {
    return (dy.array().colwise() * scale.array()).matrix();
  }
  const auto n = static_cast<Scalar>(dy.cols());
  const Vector<Scalar> mean_dy = grad.beta / n;
  const Vector<Scalar> mean_dy_xhat = grad.gamma / n;
  // dx = gamma * inv_std * (dy - mean(dy) - xhat * mean(dy * xhat))
  Matrix<Scalar> centered = dy.colwise() - mean_dy;
  centered -= (xhat.array().colwise() * mean_dy_xhat.array()).matrix();
  return (centered.array().colwise() * scale.array()).matrix();
}

template <typename Scalar>
void accumulate(Matrix<Scalar>& into, const Matrix<Scalar>& term) {
  if (into.size() == 0) {
    into = term;
  } else {
    into += term;
  }
}

template <typename Scalar>
void check_finite(const Matrix<Scalar>& m, const char* where) {
  if (!m.allFinite()) throw NonFiniteError(std::string("non-finite activation in ") + where);
}

}  // namespace

// ---------------------------------------------------------------------------

template <typename Scalar>
void FeatureMap<Scalar>::check() const {
  require(values.rows() == mask.rows() && values.cols() == mask.cols(), "feature values and mask shapes differ");
  require(values.cols() == static_cast<Eigen::Index>(batch) * height * width, "feature map column count mismatch");
}

template <typename Scalar>
FeatureMap<Scalar> make_feature_map(std::span<const NetworkInput> inputs) {
  require(!inputs.empty(), "empty input batch");
  const auto channels = inputs.front().s_irr.rows();
  FeatureMap<Scalar> map;
  map.batch = static_cast<int>(inputs.size());
  map.height = kFineN;
  map.width = kFineN;
  map.values.resize(channels, map.batch * kPlaneSize);
  map.mask.resize(channels, map.batch * kPlaneSize);
  for (int b = 0; b < map.batch; ++b) {
    const auto& in = inputs[static_cast<size_t>(b)];
    require(in.s_irr.rows() == channels && in.s_irr.cols() == kPlaneSize && in.mask.rows() == channels &&
                in.mask.cols() == kPlaneSize,
            "network input has the wrong shape");
    map.values.middleCols(b * kPlaneSize, kPlaneSize) = in.s_irr.cast<Scalar>();
    map.mask.middleCols(b * kPlaneSize, kPlaneSize) = in.mask.cast<Scalar>();
  }
  return map;
}

UNetConfig UNetConfig::small(int depth, int base_filters, int channels, int input_size) {
  UNetConfig c;
  c.depth = depth;
  c.base_filters = base_filters;
  c.encoder_kernels.assign(static_cast<size_t>(depth), 3);
  c.decoder_kernels.assign(static_cast<size_t>(depth), 3);
  c.in_channels = channels;
  c.out_channels = channels;
  c.input_size = input_size;
  c.encoder_batch_norm.assign(static_cast<size_t>(depth), true);
  c.decoder_batch_norm.assign(static_cast<size_t>(depth), true);
  return c;
}

void UNetConfig::validate() const {
  require(depth >= 1, "depth must be at least 1");
  require(base_filters >= 1, "base_filters must be positive");
  require(in_channels >= 1 && out_channels >= 1, "channel counts must be positive");
  require(static_cast<int>(encoder_kernels.size()) == depth && static_cast<int>(decoder_kernels.size()) == depth,
          "one kernel size per stage is required");
  require(static_cast<int>(encoder_batch_norm.size()) == depth && static_cast<int>(decoder_batch_norm.size()) == depth,
          "one batch-norm flag per stage is required");
  for (int k : encoder_kernels) require(k >= 1 && k % 2 == 1, "kernel sizes must be odd");
  for (int k : decoder_kernels) require(k >= 1 && k % 2 == 1, "kernel sizes must be odd");
  require(leaky_slope >= 0.0, "leaky slope must be non-negative");
  require(input_size % (1 << depth) == 0 && (input_size >> depth) >= 2,
          "input size must be divisible by 2^depth with a bottleneck of at least 2");
}

template <typename Scalar>
UNetWeights<Scalar> initialize_weights(const UNetConfig& config, std::uint64_t seed) {
  config.validate();
  std::mt19937_64 rng = derive_rng(seed, 0x9e7ULL);
  UNetWeights<Scalar> w;
  w.config = config;
  int channels = config.in_channels;
  for (int s = 0; s < config.depth; ++s) {
    const int out = config.encoder_filters(s);
    w.encoder.push_back(make_conv<Scalar>(channels, out, config.encoder_kernels[static_cast<size_t>(s)], 2, rng));
    w.encoder_bn.push_back(config.encoder_batch_norm[static_cast<size_t>(s)]
                               ? std::optional(make_batch_norm<Scalar>(out))
                               : std::nullopt);
    channels = out;
  }
  w.decoder.resize(static_cast<size_t>(config.depth));
  w.decoder_bn.resize(static_cast<size_t>(config.depth));
  for (int s = config.depth - 1; s >= 0; --s) {
    const int in = config.decoder_upsampled_channels(s) + config.decoder_skip_channels(s);
    const int out = config.decoder_filters(s);
    w.decoder[static_cast<size_t>(s)] =
        make_conv<Scalar>(in, out, config.decoder_kernels[static_cast<size_t>(s)], 1, rng);
    if (config.decoder_batch_norm[static_cast<size_t>(s)]) w.decoder_bn[static_cast<size_t>(s)] = make_batch_norm<Scalar>(out);
  }
  w.head = make_conv<Scalar>(config.decoder_filters(0), config.out_channels, 1, 1, rng);
  return w;
}

template <typename Scalar>
std::int64_t parameter_count(const UNetWeights<Scalar>& weights) {
  std::int64_t total = 0;
  for_each_tensor(weights, [&](const TensorInfo& info, const Scalar*, Eigen::Index size) {
    if (info.learnable()) total += size;
  });
  return total;
}

template <typename Scalar>
FeatureMap<Scalar> partial_conv(const FeatureMap<Scalar>& input, const ConvLayer<Scalar>& layer,
                                PartialConvTrace<Scalar>* trace) {
  input.check();
  const ConvGeometry& g = layer.geometry;
  require(layer.weight.cols() == static_cast<Eigen::Index>(input.channels()) * g.kernel * g.kernel,
          "partial_conv: weight columns do not match input channels");
  require(layer.bias.size() == layer.weight.rows(), "partial_conv: bias size mismatch");

  FeatureMap<Scalar> out;
  out.batch = input.batch;
  out.height = g.output_size(input.height);
  out.width = g.output_size(input.width);
  require(out.height >= 1 && out.width >= 1, "partial_conv: empty output");

  Matrix<Scalar> columns;
  im2col<Scalar>(input.values.cwiseProduct(input.mask), input.batch, input.height, input.width, g, columns);

  // sum(M_w) per window: channel-summed mask gathered as a 1-channel map.
  Matrix<Scalar> mask_columns;
  im2col<Scalar>(input.mask.colwise().sum(), input.batch, input.height, input.width, g, mask_columns);
  const RowVector<Scalar> coverage = mask_columns.colwise().sum();
  const auto window_size = static_cast<Scalar>(input.channels() * g.kernel * g.kernel);
  const RowVector<Scalar> valid = (coverage.array() > Scalar(0)).template cast<Scalar>();
  const RowVector<Scalar> ratio =
      (coverage.array() > Scalar(0)).select(window_size / coverage.array().max(Scalar(1)), Scalar(0));

  out.values.noalias() = layer.weight * columns;
  out.values.array().rowwise() *= ratio.array();
  out.values.noalias() += layer.bias * valid;
  out.mask = valid.replicate(layer.weight.rows(), 1);

  if (trace) {
    trace->columns = std::move(columns);
    trace->ratio = ratio;
    trace->valid = valid;
  }
  return out;
}

template <typename Scalar>
ConvGradient<Scalar> partial_conv_backward(const FeatureMap<Scalar>& input, const ConvLayer<Scalar>& layer,
                                           const PartialConvTrace<Scalar>& trace, const Matrix<Scalar>& grad_output,
                                           bool need_input_gradient) {
  require(grad_output.rows() == layer.weight.rows() && grad_output.cols() == trace.columns.cols(),
          "partial_conv_backward: gradient shape mismatch");
  ConvGradient<Scalar> grad;
  const Matrix<Scalar> scaled = (grad_output.array().rowwise() * trace.ratio.array()).matrix();
  grad.weight.noalias() = scaled * trace.columns.transpose();
  grad.bias.noalias() = grad_output * trace.valid.transpose();
  if (need_input_gradient) {
    const Matrix<Scalar> grad_columns = layer.weight.transpose() * scaled;
    col2im<Scalar>(grad_columns, input.channels(), input.batch, input.height, input.width, layer.geometry, grad.input);
    grad.input.array() *= input.mask.array();
  }
  return grad;
}

template <typename Scalar>
Matrix<Scalar> upsample_nearest(const Matrix<Scalar>& values, int batch, int height, int width) {
  const int oh = 2 * height;
  const int ow = 2 * width;
  Matrix<Scalar> out(values.rows(), static_cast<Eigen::Index>(batch) * oh * ow);
  for (Eigen::Index c = 0; c < values.rows(); ++c) {
    const Scalar* src = values.row(c).data();
    Scalar* dst = out.row(c).data();
    for (int b = 0; b < batch; ++b) {
      for (int y = 0; y < oh; ++y) {
        const Scalar* row = src + (static_cast<Eigen::Index>(b) * height + y / 2) * width;
        for (int x = 0; x < ow; ++x) *dst++ = row[x / 2];
      }
    }
  }
  return out;
}

template <typename Scalar>
Matrix<Scalar> upsample_nearest_backward(const Matrix<Scalar>& grad, int batch, int height, int width) {
  const int oh = 2 * height;
  const int ow = 2 * width;
  Matrix<Scalar> out = Matrix<Scalar>::Zero(grad.rows(), static_cast<Eigen::Index>(batch) * height * width);
  for (Eigen::Index c = 0; c < grad.rows(); ++c) {
    const Scalar* src = grad.row(c).data();
    Scalar* dst = out.row(c).data();
    for (int b = 0; b < batch; ++b) {
      for (int y = 0; y < oh; ++y) {
        Scalar* row = dst + (static_cast<Eigen::Index>(b) * height + y / 2) * width;
        for (int x = 0; x < ow; ++x) row[x / 2] += *src++;
      }
    }
  }
  return out;
}

template <typename Scalar>
FeatureMap<Scalar> encoder_stage(const FeatureMap<Scalar>& input, const ConvLayer<Scalar>& conv,
                                 const std::optional<BatchNorm<Scalar>>& bn, BatchNormMode mode,
                                 StageTrace<Scalar>* trace) {
  require(input.height % 2 == 0 && input.width % 2 == 0, "encoder_stage: spatial size must be even");
  FeatureMap<Scalar> out = partial_conv(input, conv, trace ? &trace->conv : nullptr);
  if (bn) out.values = batch_norm_forward(out.values, *bn, mode, trace);
  if (trace) {
    trace->conv_input = input;
    trace->pre_activation = out.values;
  }
  out.values = out.values.cwiseMax(Scalar(0));
  check_finite(out.values, "encoder");
  if (trace) trace->output = out;
  return out;
}

template <typename Scalar>
FeatureMap<Scalar> decoder_stage(const FeatureMap<Scalar>& input, const FeatureMap<Scalar>& skip,
                                 const ConvLayer<Scalar>& conv, const std::optional<BatchNorm<Scalar>>& bn,
                                 BatchNormMode mode, double leaky_slope, StageTrace<Scalar>* trace) {
  require(skip.batch == input.batch && skip.height == 2 * input.height && skip.width == 2 * input.width,
          "decoder_stage: skip must be twice the input resolution");
  FeatureMap<Scalar> cat;
  cat.batch = skip.batch;
  cat.height = skip.height;
  cat.width = skip.width;
  cat.values.resize(input.channels() + skip.channels(), skip.values.cols());
  cat.mask.resize(cat.values.rows(), cat.values.cols());
  cat.values.topRows(input.channels()) = upsample_nearest(input.values, input.batch, input.height, input.width);
  cat.values.bottomRows(skip.channels()) = skip.values;
  cat.mask.topRows(input.channels()) = upsample_nearest(input.mask, input.batch, input.height, input.width);
  cat.mask.bottomRows(skip.channels()) = skip.mask;

  FeatureMap<Scalar> out = partial_conv(cat, conv, trace ? &trace->conv : nullptr);
  if (bn) out.values = batch_norm_forward(out.values, *bn, mode, trace);
  if (trace) {
    trace->pre_activation = out.values;
    trace->conv_input = std::move(cat);
  }
  const auto slope = static_cast<Scalar>(leaky_slope);
  out.values = (out.values.array() > Scalar(0)).select(out.values, slope * out.values);
  check_finite(out.values, "decoder");
  if (trace) trace->output = out;
  return out;
}

template <typename Scalar>
Matrix<Scalar> unet_forward(const FeatureMap<Scalar>& input, const UNetWeights<Scalar>& weights,
                            const ForwardOptions& options, UNetTrace<Scalar>* trace) {
  const UNetConfig& config = weights.config;
  input.check();
  require(input.channels() == config.in_channels, "unet_forward: input channel count does not match the config");
  require(input.height == config.input_size && input.width == config.input_size,
          "unet_forward: input size does not match the config");
  require(static_cast<int>(weights.encoder.size()) == config.depth &&
              static_cast<int>(weights.decoder.size()) == config.depth,
          "unet_forward: weights do not match the config depth");

  const auto depth = static_cast<size_t>(config.depth);
  if (trace) {
    trace->options = options;
    trace->input = input;
    trace->encoder.assign(depth, {});
    trace->decoder.assign(depth, {});
  }

  std::vector<FeatureMap<Scalar>> encoded(depth);
  for (size_t s = 0; s < depth; ++s) {
    encoded[s] = encoder_stage(s == 0 ? input : encoded[s - 1], weights.encoder[s], weights.encoder_bn[s],
                               options.encoder_mode(), trace ? &trace->encoder[s] : nullptr);
  }
  FeatureMap<Scalar> x = encoded[depth - 1];
  for (size_t s = depth; s-- > 0;) {
    x = decoder_stage(x, s == 0 ? input : encoded[s - 1], weights.decoder[s], weights.decoder_bn[s],
                      options.decoder_mode(), config.leaky_slope, trace ? &trace->decoder[s] : nullptr);
  }

  Matrix<Scalar> logits = weights.head.weight * x.values;
  logits.colwise() += weights.head.bias;
  check_finite(logits, "output projection");
  // Keep the sigmoid strictly inside (0, 1) at the precision of Scalar.
  const Scalar hi = Scalar(1) - std::numeric_limits<Scalar>::epsilon();
  const Scalar lo = std::numeric_limits<Scalar>::min();
  Matrix<Scalar> output = ((-logits.array()).exp() + Scalar(1)).inverse().max(lo).min(hi).matrix();
  if (trace) trace->output = output;
  return output;
}

Matrix<float> unet_forward(std::span<const NetworkInput> inputs, const UNetWeights<float>& weights) {
  return unet_forward(make_feature_map<float>(inputs), weights, ForwardOptions{});
}

template <typename Scalar>
UNetWeights<Scalar> unet_backward(const UNetTrace<Scalar>& trace, const UNetWeights<Scalar>& weights,
                                  const Matrix<Scalar>& upstream) {
  const UNetConfig& config = weights.config;
  const auto depth = static_cast<size_t>(config.depth);
  require(trace.encoder.size() == depth && trace.decoder.size() == depth, "unet_backward: trace does not match");
  require(upstream.rows() == trace.output.rows() && upstream.cols() == trace.output.cols(),
          "unet_backward: upstream gradient shape mismatch");

  UNetWeights<Scalar> grad = weights.zeros_like();
  const Matrix<Scalar>& y = trace.output;
  const Matrix<Scalar> grad_logits = (upstream.array() * y.array() * (Scalar(1) - y.array())).matrix();
  const Matrix<Scalar>& head_input = trace.decoder[0].output.values;
  grad.head.weight.noalias() = grad_logits * head_input.transpose();
  grad.head.bias = grad_logits.rowwise().sum();
  Matrix<Scalar> grad_x = weights.head.weight.transpose() * grad_logits;

  const auto stage_backward = [&](const StageTrace<Scalar>& st, const ConvLayer<Scalar>& conv,
                                  const std::optional<BatchNorm<Scalar>>& bn, std::optional<BatchNorm<Scalar>>& bn_grad,
                                  ConvLayer<Scalar>& conv_grad, Matrix<Scalar> grad_out, Scalar negative_slope,
                                  bool need_input) {
    grad_out.array() *=
        (st.pre_activation.array() > Scalar(0)).template cast<Scalar>() * (Scalar(1) - negative_slope) + negative_slope;
    if (bn) grad_out = batch_norm_backward(grad_out, *bn, st, *bn_grad);
    auto g = partial_conv_backward(st.conv_input, conv, st.conv, grad_out, need_input);
    conv_grad.weight = std::move(g.weight);
    conv_grad.bias = std::move(g.bias);
    return std::move(g.input);
  };

  std::vector<Matrix<Scalar>> grad_encoded(depth);
  const auto slope = static_cast<Scalar>(config.leaky_slope);
  for (size_t s = 0; s < depth; ++s) {
    const StageTrace<Scalar>& st = trace.decoder[s];
    Matrix<Scalar> grad_cat = stage_backward(st, weights.decoder[s], weights.decoder_bn[s], grad.decoder_bn[s],
                                             grad.decoder[s], std::move(grad_x), slope, true);
    const int up_channels = config.decoder_upsampled_channels(static_cast<int>(s));
    const auto& below = s + 1 < depth ? trace.decoder[s + 1].output : trace.encoder[depth - 1].output;
    grad_x = upsample_nearest_backward<Scalar>(grad_cat.topRows(up_channels), below.batch, below.height, below.width);
    if (s > 0) grad_encoded[s - 1] = grad_cat.bottomRows(grad_cat.rows() - up_channels);
  }
  accumulate(grad_encoded[depth - 1], grad_x);

  for (size_t s = depth; s-- > 0;) {
    Matrix<Scalar> grad_in = stage_backward(trace.encoder[s], weights.encoder[s], weights.encoder_bn[s],
                                            grad.encoder_bn[s], grad.encoder[s], std::move(grad_encoded[s]), Scalar(0),
                                            s > 0);
    if (s > 0) accumulate(grad_encoded[s - 1], grad_in);
  }
  return grad;
}

template <typename Scalar>
void update_running_statistics(UNetWeights<Scalar>& weights, const UNetTrace<Scalar>& trace, double momentum) {
  const auto m = static_cast<Scalar>(momentum);
  const auto update = [&](std::optional<BatchNorm<Scalar>>& bn, const StageTrace<Scalar>& st) {
    if (!bn || !st.has_bn || st.bn_mode != BatchNormMode::kBatchStatistics) return;
    bn->running_mean = m * bn->running_mean + (Scalar(1) - m) * st.batch_mean;
    bn->running_var = m * bn->running_var + (Scalar(1) - m) * st.batch_var;
  };
  for (size_t s = 0; s < weights.encoder_bn.size(); ++s) update(weights.encoder_bn[s], trace.encoder[s]);
  for (size_t s = 0; s < weights.decoder_bn.size(); ++s) update(weights.decoder_bn[s], trace.decoder[s]);
}

#define SFR_INSTANTIATE(Scalar)                                                                                   \
  template struct FeatureMap<Scalar>;                                                                             \
  template FeatureMap<Scalar> make_feature_map<Scalar>(std::span<const NetworkInput>);                            \
  template UNetWeights<Scalar> initialize_weights<Scalar>(const UNetConfig&, std::uint64_t);                      \
  template std::int64_t parameter_count<Scalar>(const UNetWeights<Scalar>&);                                      \
  template FeatureMap<Scalar> partial_conv<Scalar>(const FeatureMap<Scalar>&, const ConvLayer<Scalar>&,           \
                                                   PartialConvTrace<Scalar>*);                                    \
  template ConvGradient<Scalar> partial_conv_backward<Scalar>(const FeatureMap<Scalar>&, const ConvLayer<Scalar>&, \
                                                              const PartialConvTrace<Scalar>&,                    \
                                                              const Matrix<Scalar>&, bool);                       \
  template Matrix<Scalar> upsample_nearest<Scalar>(const Matrix<Scalar>&, int, int, int);                         \
  template Matrix<Scalar> upsample_nearest_backward<Scalar>(const Matrix<Scalar>&, int, int, int);                \
  template FeatureMap<Scalar> encoder_stage<Scalar>(const FeatureMap<Scalar>&, const ConvLayer<Scalar>&,          \
                                                    const std::optional<BatchNorm<Scalar>>&, BatchNormMode,       \
                                                    StageTrace<Scalar>*);                                         \
  template FeatureMap<Scalar> decoder_stage<Scalar>(const FeatureMap<Scalar>&, const FeatureMap<Scalar>&,         \
                                                    const ConvLayer<Scalar>&,                                     \
                                                    const std::optional<BatchNorm<Scalar>>&, BatchNormMode,       \
                                                    double, StageTrace<Scalar>*);                                 \
  template Matrix<Scalar> unet_forward<Scalar>(const FeatureMap<Scalar>&, const UNetWeights<Scalar>&,             \
                                               const ForwardOptions&, UNetTrace<Scalar>*);                        \
  template UNetWeights<Scalar> unet_backward<Scalar>(const UNetTrace<Scalar>&, const UNetWeights<Scalar>&,        \
                                                     const Matrix<Scalar>&);                                      \
  template void update_running_statistics<Scalar>(UNetWeights<Scalar>&, const UNetTrace<Scalar>&, double);

SFR_INSTANTIATE(float)
SFR_INSTANTIATE(double)

#undef SFR_INSTANTIATE

}  // namespace sfr
