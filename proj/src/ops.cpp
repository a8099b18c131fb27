#include "fbalign/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <string>

namespace fbalign {

namespace {

template <typename T>
using RowMatrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatrixMap = Eigen::Map<RowMatrix<T>>;
template <typename T>
using ConstMatrixMap = Eigen::Map<const RowMatrix<T>>;

struct ImageDims {
  std::size_t batch, channels, height, width;
  bool batched;
};

ImageDims image_dims(const Shape& shape, const char* what) {
  if (shape.size() == 4) return {shape[0], shape[1], shape[2], shape[3], true};
  if (shape.size() == 3) return {1, shape[0], shape[1], shape[2], false};
  throw ShapeError(std::string(what) + ": expected [N,C,H,W] or [C,H,W], got " + to_string(shape));
}

Shape image_shape(const ImageDims& d, std::size_t c, std::size_t h, std::size_t w) {
  if (d.batched) return {d.batch, c, h, w};
  return {c, h, w};
}

struct ConvPlan {
  ImageDims in;
  std::size_t out_channels, kernel_h, kernel_w, out_h, out_w;
  ConvGeometry geometry;

  std::size_t patch() const { return in.channels * kernel_h * kernel_w; }
  std::size_t positions() const { return out_h * out_w; }
};

ConvPlan plan_conv(const Shape& input_shape, const Shape& kernel_shape, ConvGeometry geometry,
                   const char* what) {
  if (geometry.stride == 0) throw ShapeError(std::string(what) + ": stride must be positive");
  ConvPlan plan{};
  plan.in = image_dims(input_shape, what);
  if (kernel_shape.size() != 4) {
    throw ShapeError(std::string(what) + ": kernels must be [C_out,C_in,kh,kw], got " +
                     to_string(kernel_shape));
  }
  if (kernel_shape[1] != plan.in.channels) {
    throw ShapeError(std::string(what) + ": kernel expects " + std::to_string(kernel_shape[1]) +
                     " input channels but input " + to_string(input_shape) + " has " +
                     std::to_string(plan.in.channels));
  }
  plan.out_channels = kernel_shape[0];
  plan.kernel_h = kernel_shape[2];
  plan.kernel_w = kernel_shape[3];
  plan.geometry = geometry;
  plan.out_h = conv_output_extent(plan.in.height, plan.kernel_h, geometry);
  plan.out_w = conv_output_extent(plan.in.width, plan.kernel_w, geometry);
  return plan;
}

// col[(c*kh + p)*kw + q, i*out_w + j] = x_pad[c, i*s + p, j*s + q]
template <typename T>
void im2col(const T* image, const ConvPlan& plan, T* col) {
  const auto& in = plan.in;
  const auto pad = static_cast<std::ptrdiff_t>(plan.geometry.padding);
  const auto stride = static_cast<std::ptrdiff_t>(plan.geometry.stride);
  const std::size_t positions = plan.positions();
  for (std::size_t c = 0; c < in.channels; ++c) {
    const T* channel = image + c * in.height * in.width;
    for (std::size_t p = 0; p < plan.kernel_h; ++p) {
      for (std::size_t q = 0; q < plan.kernel_w; ++q) {
        T* row = col + ((c * plan.kernel_h + p) * plan.kernel_w + q) * positions;
        for (std::size_t i = 0; i < plan.out_h; ++i) {
          const std::ptrdiff_t y = static_cast<std::ptrdiff_t>(i) * stride + static_cast<std::ptrdiff_t>(p) - pad;
          T* dst = row + i * plan.out_w;
          if (y < 0 || y >= static_cast<std::ptrdiff_t>(in.height)) {
            std::fill(dst, dst + plan.out_w, T{0});
            continue;
          }
          const T* src = channel + static_cast<std::size_t>(y) * in.width;
          for (std::size_t j = 0; j < plan.out_w; ++j) {
            const std::ptrdiff_t x = static_cast<std::ptrdiff_t>(j) * stride + static_cast<std::ptrdiff_t>(q) - pad;
            dst[j] = (x < 0 || x >= static_cast<std::ptrdiff_t>(in.width)) ? T{0} : src[x];
          }
        }
      }
    }
  }
}

template <typename T>
void col2im_accumulate(const T* col, const ConvPlan& plan, T* image) {
  const auto& in = plan.in;
  const auto pad = static_cast<std::ptrdiff_t>(plan.geometry.padding);
  const auto stride = static_cast<std::ptrdiff_t>(plan.geometry.stride);
  const std::size_t positions = plan.positions();
  for (std::size_t c = 0; c < in.channels; ++c) {
    T* channel = image + c * in.height * in.width;
    for (std::size_t p = 0; p < plan.kernel_h; ++p) {
      for (std::size_t q = 0; q < plan.kernel_w; ++q) {
        const T* row = col + ((c * plan.kernel_h + p) * plan.kernel_w + q) * positions;
        for (std::size_t i = 0; i < plan.out_h; ++i) {
          const std::ptrdiff_t y = static_cast<std::ptrdiff_t>(i) * stride + static_cast<std::ptrdiff_t>(p) - pad;
          if (y < 0 || y >= static_cast<std::ptrdiff_t>(in.height)) continue;
          T* dst = channel + static_cast<std::size_t>(y) * in.width;
          const T* src = row + i * plan.out_w;
          for (std::size_t j = 0; j < plan.out_w; ++j) {
            const std::ptrdiff_t x = static_cast<std::ptrdiff_t>(j) * stride + static_cast<std::ptrdiff_t>(q) - pad;
            if (x >= 0 && x < static_cast<std::ptrdiff_t>(in.width)) dst[x] += src[j];
          }
        }
      }
    }
  }
}

std::size_t flat_features(const Shape& shape) {
  if (shape.empty()) throw ShapeError("expected a batched tensor, got a scalar shape");
  return shape_size(shape) / shape[0];
}

}  // namespace

void require_same_shape(const Shape& a, const Shape& b, const char* what) {
  if (a != b) throw ShapeError(std::string(what) + ": shape mismatch " + to_string(a) + " vs " + to_string(b));
}

std::size_t conv_output_extent(std::size_t in, std::size_t kernel, ConvGeometry geometry) {
  if (geometry.stride == 0) throw ShapeError("convolution stride must be positive");
  const std::size_t padded = in + 2 * geometry.padding;
  if (kernel == 0 || kernel > padded) {
    throw ShapeError("kernel extent " + std::to_string(kernel) + " exceeds padded input extent " +
                     std::to_string(padded));
  }
  return (padded - kernel) / geometry.stride + 1;
}

template <typename T>
BasicTensor<T> conv2d(const BasicTensor<T>& input, const BasicTensor<T>& kernels,
                      const BasicTensor<T>& bias, ConvGeometry geometry) {
  const ConvPlan plan = plan_conv(input.shape(), kernels.shape(), geometry, "conv2d");
  if (bias.shape() != Shape{plan.out_channels}) {
    throw ShapeError("conv2d: bias must be [" + std::to_string(plan.out_channels) + "], got " +
                     to_string(bias.shape()));
  }
  BasicTensor<T> out(image_shape(plan.in, plan.out_channels, plan.out_h, plan.out_w));
  std::vector<T> col(plan.patch() * plan.positions());
  ConstMatrixMap<T> k(kernels.raw(), plan.out_channels, plan.patch());
  const std::size_t in_stride = plan.in.channels * plan.in.height * plan.in.width;
  const std::size_t out_stride = plan.out_channels * plan.positions();
  for (std::size_t n = 0; n < plan.in.batch; ++n) {
    im2col(input.raw() + n * in_stride, plan, col.data());
    ConstMatrixMap<T> c(col.data(), plan.patch(), plan.positions());
    MatrixMap<T> o(out.raw() + n * out_stride, plan.out_channels, plan.positions());
    o.noalias() = k * c;
    for (std::size_t ch = 0; ch < plan.out_channels; ++ch) o.row(ch).array() += bias[ch];
  }
  return out;
}

template <typename T>
BasicTensor<T> conv2d_input_grad(const BasicTensor<T>& delta, const BasicTensor<T>& kernels,
                                 const Shape& input_shape, ConvGeometry geometry) {
  const ConvPlan plan = plan_conv(input_shape, kernels.shape(), geometry, "conv2d_input_grad");
  const Shape expected = image_shape(plan.in, plan.out_channels, plan.out_h, plan.out_w);
  require_same_shape(delta.shape(), expected, "conv2d_input_grad delta");
  BasicTensor<T> grad(input_shape);
  std::vector<T> col(plan.patch() * plan.positions());
  ConstMatrixMap<T> k(kernels.raw(), plan.out_channels, plan.patch());
  const std::size_t in_stride = plan.in.channels * plan.in.height * plan.in.width;
  const std::size_t out_stride = plan.out_channels * plan.positions();
  for (std::size_t n = 0; n < plan.in.batch; ++n) {
    ConstMatrixMap<T> d(delta.raw() + n * out_stride, plan.out_channels, plan.positions());
    MatrixMap<T> c(col.data(), plan.patch(), plan.positions());
    c.noalias() = k.transpose() * d;
    col2im_accumulate(col.data(), plan, grad.raw() + n * in_stride);
  }
  return grad;
}

template <typename T>
ParamGrads<T> conv2d_kernel_grad(const BasicTensor<T>& input, const BasicTensor<T>& delta,
                                 std::size_t kernel_h, std::size_t kernel_w, ConvGeometry geometry) {
  const ImageDims in = image_dims(input.shape(), "conv2d_kernel_grad");
  const ImageDims dd = image_dims(delta.shape(), "conv2d_kernel_grad delta");
  const Shape kernel_shape{dd.channels, in.channels, kernel_h, kernel_w};
  const ConvPlan plan = plan_conv(input.shape(), kernel_shape, geometry, "conv2d_kernel_grad");
  require_same_shape(delta.shape(), image_shape(plan.in, plan.out_channels, plan.out_h, plan.out_w),
                     "conv2d_kernel_grad delta");
  ParamGrads<T> grads{BasicTensor<T>(kernel_shape), BasicTensor<T>(Shape{plan.out_channels})};
  std::vector<T> col(plan.patch() * plan.positions());
  MatrixMap<T> gk(grads.weights.raw(), plan.out_channels, plan.patch());
  const std::size_t in_stride = plan.in.channels * plan.in.height * plan.in.width;
  const std::size_t out_stride = plan.out_channels * plan.positions();
  for (std::size_t n = 0; n < plan.in.batch; ++n) {
    im2col(input.raw() + n * in_stride, plan, col.data());
    ConstMatrixMap<T> c(col.data(), plan.patch(), plan.positions());
    ConstMatrixMap<T> d(delta.raw() + n * out_stride, plan.out_channels, plan.positions());
    gk.noalias() += d * c.transpose();
    for (std::size_t ch = 0; ch < plan.out_channels; ++ch) {
      const T* row = delta.raw() + n * out_stride + ch * plan.positions();
      T acc{0};
      for (std::size_t j = 0; j < plan.positions(); ++j) acc += row[j];
      grads.bias[ch] += acc;
    }
  }
  return grads;
}

template <typename T>
PoolResult<T> maxpool2d(const BasicTensor<T>& input, std::size_t window, std::size_t stride) {
  const ImageDims in = image_dims(input.shape(), "maxpool2d");
  if (window == 0 || stride == 0) throw ShapeError("maxpool2d: window and stride must be positive");
  const std::size_t out_h = conv_output_extent(in.height, window, {stride, 0});
  const std::size_t out_w = conv_output_extent(in.width, window, {stride, 0});
  PoolResult<T> result{BasicTensor<T>(image_shape(in, in.channels, out_h, out_w)), {}};
  result.indices.input_shape = input.shape();
  result.indices.output_shape = result.output.shape();
  result.indices.argmax.resize(result.output.size());
  std::size_t o = 0;
  for (std::size_t plane = 0; plane < in.batch * in.channels; ++plane) {
    const std::size_t base = plane * in.height * in.width;
    for (std::size_t i = 0; i < out_h; ++i) {
      for (std::size_t j = 0; j < out_w; ++j, ++o) {
        std::size_t best = base + (i * stride) * in.width + j * stride;
        T best_value = input[best];
        for (std::size_t p = 0; p < window; ++p) {
          for (std::size_t q = 0; q < window; ++q) {
            const std::size_t idx = base + (i * stride + p) * in.width + (j * stride + q);
            if (input[idx] > best_value) {  // strict: first maximum wins ties
              best_value = input[idx];
              best = idx;
            }
          }
        }
        result.output[o] = best_value;
        result.indices.argmax[o] = best;
      }
    }
  }
  return result;
}

template <typename T>
BasicTensor<T> maxpool2d_grad(const BasicTensor<T>& delta, const PoolIndices& indices) {
  require_same_shape(delta.shape(), indices.output_shape, "maxpool2d_grad");
  if (indices.argmax.size() != delta.size()) throw ShapeError("maxpool2d_grad: index count mismatch");
  BasicTensor<T> grad(indices.input_shape);
  for (std::size_t o = 0; o < delta.size(); ++o) {
    const std::size_t target = indices.argmax[o];
    if (target >= grad.size()) throw ShapeError("maxpool2d_grad: argmax index outside input");
    grad[target] += delta[o];
  }
  return grad;
}

template <typename T>
BasicTensor<T> matmul(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
    throw ShapeError("matmul: incompatible shapes " + to_string(a.shape()) + " x " + to_string(b.shape()));
  }
  BasicTensor<T> out(Shape{a.dim(0), b.dim(1)});
  MatrixMap<T>(out.raw(), a.dim(0), b.dim(1)).noalias() =
      ConstMatrixMap<T>(a.raw(), a.dim(0), a.dim(1)) * ConstMatrixMap<T>(b.raw(), b.dim(0), b.dim(1));
  return out;
}

template <typename T>
BasicTensor<T> matmul_transposed(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(1)) {
    throw ShapeError("matmul_transposed: incompatible shapes " + to_string(a.shape()) + " x " +
                     to_string(b.shape()) + "^T");
  }
  BasicTensor<T> out(Shape{a.dim(0), b.dim(0)});
  MatrixMap<T>(out.raw(), a.dim(0), b.dim(0)).noalias() =
      ConstMatrixMap<T>(a.raw(), a.dim(0), a.dim(1)) *
      ConstMatrixMap<T>(b.raw(), b.dim(0), b.dim(1)).transpose();
  return out;
}

template <typename T>
BasicTensor<T> dense(const BasicTensor<T>& input, const BasicTensor<T>& weights,
                     const BasicTensor<T>& bias) {
  const std::size_t batch = input.dim(0);
  const std::size_t features = flat_features(input.shape());
  if (weights.rank() != 2 || weights.dim(1) != features) {
    throw ShapeError("dense: weights " + to_string(weights.shape()) + " do not accept " +
                     std::to_string(features) + " input features");
  }
  const std::size_t units = weights.dim(0);
  if (bias.shape() != Shape{units}) throw ShapeError("dense: bias must be [" + std::to_string(units) + "]");
  BasicTensor<T> out(Shape{batch, units});
  MatrixMap<T> o(out.raw(), batch, units);
  o.noalias() = ConstMatrixMap<T>(input.raw(), batch, features) *
                ConstMatrixMap<T>(weights.raw(), units, features).transpose();
  for (std::size_t n = 0; n < batch; ++n) {
    for (std::size_t u = 0; u < units; ++u) o(n, u) += bias[u];
  }
  return out;
}

template <typename T>
BasicTensor<T> dense_input_grad(const BasicTensor<T>& delta, const BasicTensor<T>& matrix,
                                const Shape& input_shape) {
  if (delta.rank() != 2 || matrix.rank() != 2 || delta.dim(1) != matrix.dim(0)) {
    throw ShapeError("dense_input_grad: delta " + to_string(delta.shape()) + " incompatible with " +
                     to_string(matrix.shape()));
  }
  if (input_shape.empty() || input_shape[0] != delta.dim(0) || flat_features(input_shape) != matrix.dim(1)) {
    throw ShapeError("dense_input_grad: input shape " + to_string(input_shape) + " does not match " +
                     to_string(matrix.shape()));
  }
  BasicTensor<T> grad(Shape{delta.dim(0), matrix.dim(1)});
  MatrixMap<T>(grad.raw(), delta.dim(0), matrix.dim(1)).noalias() =
      ConstMatrixMap<T>(delta.raw(), delta.dim(0), delta.dim(1)) *
      ConstMatrixMap<T>(matrix.raw(), matrix.dim(0), matrix.dim(1));
  return std::move(grad).reshaped(input_shape);
}

template <typename T>
ParamGrads<T> dense_weight_grad(const BasicTensor<T>& input, const BasicTensor<T>& delta) {
  const std::size_t batch = input.dim(0);
  const std::size_t features = flat_features(input.shape());
  if (delta.rank() != 2 || delta.dim(0) != batch) {
    throw ShapeError("dense_weight_grad: delta " + to_string(delta.shape()) + " does not match batch " +
                     std::to_string(batch));
  }
  const std::size_t units = delta.dim(1);
  ParamGrads<T> grads{BasicTensor<T>(Shape{units, features}), BasicTensor<T>(Shape{units})};
  ConstMatrixMap<T> d(delta.raw(), batch, units);
  MatrixMap<T>(grads.weights.raw(), units, features).noalias() =
      d.transpose() * ConstMatrixMap<T>(input.raw(), batch, features);
  for (std::size_t u = 0; u < units; ++u) {
    T acc{0};
    for (std::size_t n = 0; n < batch; ++n) acc += d(n, u);
    grads.bias[u] = acc;
  }
  return grads;
}

template <typename T>
BasicTensor<T> relu(const BasicTensor<T>& u) {
  BasicTensor<T> out(u.shape());
  for (std::size_t i = 0; i < u.size(); ++i) out[i] = u[i] > T{0} ? u[i] : T{0};
  return out;
}

template <typename T>
BasicTensor<T> relu_grad(const BasicTensor<T>& u, const BasicTensor<T>& delta) {
  require_same_shape(u.shape(), delta.shape(), "relu_grad");
  BasicTensor<T> out(u.shape());
  for (std::size_t i = 0; i < u.size(); ++i) out[i] = u[i] > T{0} ? delta[i] : T{0};
  return out;
}

template <typename T>
BasicTensor<T> global_avg_pool(const BasicTensor<T>& input) {
  const ImageDims in = image_dims(input.shape(), "global_avg_pool");
  const std::size_t area = in.height * in.width;
  BasicTensor<T> out(Shape{in.batch, in.channels});
  for (std::size_t plane = 0; plane < in.batch * in.channels; ++plane) {
    double acc = 0.0;
    for (std::size_t k = 0; k < area; ++k) acc += input[plane * area + k];
    out[plane] = static_cast<T>(acc / static_cast<double>(area));
  }
  return out;
}

template <typename T>
BasicTensor<T> global_avg_pool_grad(const BasicTensor<T>& delta, const Shape& input_shape) {
  const ImageDims in = image_dims(input_shape, "global_avg_pool_grad");
  require_same_shape(delta.shape(), Shape{in.batch, in.channels}, "global_avg_pool_grad");
  const std::size_t area = in.height * in.width;
  BasicTensor<T> grad(input_shape);
  for (std::size_t plane = 0; plane < in.batch * in.channels; ++plane) {
    const T share = delta[plane] / static_cast<T>(area);
    std::fill(grad.raw() + plane * area, grad.raw() + (plane + 1) * area, share);
  }
  return grad;
}

template <typename T>
SoftmaxLoss<T> softmax_cross_entropy(const BasicTensor<T>& logits, std::span<const int> labels) {
  if (logits.rank() != 2) throw ShapeError("softmax_cross_entropy: logits must be [N,K]");
  const std::size_t batch = logits.dim(0);
  const std::size_t classes = logits.dim(1);
  if (labels.size() != batch) {
    throw ShapeError("softmax_cross_entropy: " + std::to_string(labels.size()) + " labels for batch of " +
                     std::to_string(batch));
  }
  SoftmaxLoss<T> result{0.0, BasicTensor<T>(logits.shape()), BasicTensor<T>(logits.shape()), 0};
  const double inv_batch = 1.0 / static_cast<double>(batch);
  for (std::size_t n = 0; n < batch; ++n) {
    const int label = labels[n];
    if (label < 0 || static_cast<std::size_t>(label) >= classes) {
      throw Error("label " + std::to_string(label) + " out of range [0," + std::to_string(classes) + ")");
    }
    const T* row = logits.raw() + n * classes;
    std::size_t arg = 0;
    for (std::size_t k = 1; k < classes; ++k) {
      if (row[k] > row[arg]) arg = k;
    }
    const double shift = row[arg];
    double denom = 0.0;
    for (std::size_t k = 0; k < classes; ++k) denom += std::exp(static_cast<double>(row[k]) - shift);
    const double log_denom = std::log(denom);
    for (std::size_t k = 0; k < classes; ++k) {
      const double p = std::exp(static_cast<double>(row[k]) - shift - log_denom);
      result.probabilities[n * classes + k] = static_cast<T>(p);
      const double target = static_cast<std::size_t>(label) == k ? 1.0 : 0.0;
      result.delta[n * classes + k] = static_cast<T>((p - target) * inv_batch);
    }
    result.loss += (log_denom - (static_cast<double>(row[label]) - shift)) * inv_batch;
    if (arg != static_cast<std::size_t>(label)) ++result.errors;
  }
  return result;
}

template <typename T>
BasicTensor<T> add(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  require_same_shape(a.shape(), b.shape(), "add");
  BasicTensor<T> out(a.shape());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i] + b[i];
  return out;
}

template <typename T>
BasicTensor<T> sub(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  require_same_shape(a.shape(), b.shape(), "sub");
  BasicTensor<T> out(a.shape());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i] - b[i];
  return out;
}

template <typename T>
BasicTensor<T> mul(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  require_same_shape(a.shape(), b.shape(), "mul");
  BasicTensor<T> out(a.shape());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i] * b[i];
  return out;
}

template <typename T>
BasicTensor<T> scale(const BasicTensor<T>& a, double factor) {
  BasicTensor<T> out(a.shape());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = static_cast<T>(a[i] * factor);
  return out;
}

template <typename T>
void add_inplace(BasicTensor<T>& a, const BasicTensor<T>& b, double factor) {
  require_same_shape(a.shape(), b.shape(), "add_inplace");
  for (std::size_t i = 0; i < a.size(); ++i) a[i] = static_cast<T>(a[i] + factor * b[i]);
}

template <typename T>
BasicTensor<T> sign(const BasicTensor<T>& a) {
  BasicTensor<T> out(a.shape());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = static_cast<T>((a[i] > T{0}) - (a[i] < T{0}));
  return out;
}

template <typename T>
BasicTensor<T> abs(const BasicTensor<T>& a) {
  BasicTensor<T> out(a.shape());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = std::abs(a[i]);
  return out;
}

template <typename T>
double l2_norm(const BasicTensor<T>& a) {
  return std::sqrt(dot(a, a));
}

template <typename T>
double dot(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  if (a.size() != b.size()) throw ShapeError("dot: size mismatch");
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) acc += static_cast<double>(a[i]) * static_cast<double>(b[i]);
  return acc;
}

template <typename T>
double sum(const BasicTensor<T>& a) {
  double acc = 0.0;
  for (auto v : a.data()) acc += v;
  return acc;
}

template <typename T>
double variance(const BasicTensor<T>& a) {
  if (a.empty()) return 0.0;
  const double mean = sum(a) / static_cast<double>(a.size());
  double acc = 0.0;
  for (auto v : a.data()) acc += (v - mean) * (v - mean);
  return acc / static_cast<double>(a.size());
}

template <typename T>
BasicTensor<T> fill_gaussian(Rng& rng, const Shape& shape, double variance) {
  if (variance < 0.0) throw Error("fill_gaussian: negative variance");
  BasicTensor<T> out(shape);
  const double sd = std::sqrt(variance);
  for (auto& v : out.data()) v = static_cast<T>(sd * rng.normal());
  return out;
}

template <typename T>
BasicTensor<T> fill_uniform_signed(Rng& rng, const Shape& shape, double bound) {
  if (bound < 0.0) throw Error("fill_uniform_signed: negative bound");
  BasicTensor<T> out(shape);
  for (auto& v : out.data()) v = static_cast<T>(rng.uniform(-bound, bound));
  return out;
}

std::optional<double> angle_degrees(std::span<const float> a, std::span<const float> b) {
  if (a.size() != b.size()) throw ShapeError("angle_degrees: size mismatch");
  double ab = 0.0, aa = 0.0, bb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ab += static_cast<double>(a[i]) * b[i];
    aa += static_cast<double>(a[i]) * a[i];
    bb += static_cast<double>(b[i]) * b[i];
  }
  if (aa == 0.0 || bb == 0.0) return std::nullopt;
  const double cosine = std::clamp(ab / (std::sqrt(aa) * std::sqrt(bb)), -1.0, 1.0);
  return std::acos(cosine) * 180.0 / std::numbers::pi;
}

#define FBALIGN_INSTANTIATE_OPS(T)                                                                   \
  template BasicTensor<T> conv2d(const BasicTensor<T>&, const BasicTensor<T>&, const BasicTensor<T>&, \
                                 ConvGeometry);                                                      \
  template BasicTensor<T> conv2d_input_grad(const BasicTensor<T>&, const BasicTensor<T>&, const Shape&, \
                                            ConvGeometry);                                           \
  template ParamGrads<T> conv2d_kernel_grad(const BasicTensor<T>&, const BasicTensor<T>&, std::size_t,  \
                                            std::size_t, ConvGeometry);                              \
  template PoolResult<T> maxpool2d(const BasicTensor<T>&, std::size_t, std::size_t);                  \
  template BasicTensor<T> maxpool2d_grad(const BasicTensor<T>&, const PoolIndices&);                  \
  template BasicTensor<T> matmul(const BasicTensor<T>&, const BasicTensor<T>&);                       \
  template BasicTensor<T> matmul_transposed(const BasicTensor<T>&, const BasicTensor<T>&);            \
  template BasicTensor<T> dense(const BasicTensor<T>&, const BasicTensor<T>&, const BasicTensor<T>&); \
  template BasicTensor<T> dense_input_grad(const BasicTensor<T>&, const BasicTensor<T>&, const Shape&); \
  template ParamGrads<T> dense_weight_grad(const BasicTensor<T>&, const BasicTensor<T>&);             \
  template BasicTensor<T> relu(const BasicTensor<T>&);                                                \
  template BasicTensor<T> relu_grad(const BasicTensor<T>&, const BasicTensor<T>&);                    \
  template BasicTensor<T> global_avg_pool(const BasicTensor<T>&);                                     \
  template BasicTensor<T> global_avg_pool_grad(const BasicTensor<T>&, const Shape&);                  \
  template SoftmaxLoss<T> softmax_cross_entropy(const BasicTensor<T>&, std::span<const int>);         \
  template BasicTensor<T> add(const BasicTensor<T>&, const BasicTensor<T>&);                          \
  template BasicTensor<T> sub(const BasicTensor<T>&, const BasicTensor<T>&);                          \
  template BasicTensor<T> mul(const BasicTensor<T>&, const BasicTensor<T>&);                          \
  template BasicTensor<T> scale(const BasicTensor<T>&, double);                                       \
  template void add_inplace(BasicTensor<T>&, const BasicTensor<T>&, double);                          \
  template BasicTensor<T> sign(const BasicTensor<T>&);                                                \
  template BasicTensor<T> abs(const BasicTensor<T>&);                                                 \
  template double l2_norm(const BasicTensor<T>&);                                                     \
  template double dot(const BasicTensor<T>&, const BasicTensor<T>&);                                  \
  template double sum(const BasicTensor<T>&);                                                         \
  template double variance(const BasicTensor<T>&);                                                    \
  template BasicTensor<T> fill_gaussian<T>(Rng&, const Shape&, double);                               \
  template BasicTensor<T> fill_uniform_signed<T>(Rng&, const Shape&, double);

FBALIGN_INSTANTIATE_OPS(float)
FBALIGN_INSTANTIATE_OPS(double)

#undef FBALIGN_INSTANTIATE_OPS

}  // namespace fbalign
