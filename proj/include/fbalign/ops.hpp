#pragma once

// Numeric kernels shared by the network and the credit-assignment strategies.
// Everything here is a pure function of its arguments and is instantiated for
// float (training) and double (finite-difference oracles).
//
// Image tensors are [N, C, H, W]; a rank-3 [C, H, W] input is treated as a
// batch of one and the result keeps rank 3.

#include <cstddef>
#include <optional>
#include <span>
#include <vector>

#include "fbalign/rng.hpp"
#include "fbalign/tensor.hpp"

namespace fbalign {

struct ConvGeometry {
  std::size_t stride = 1;
  std::size_t padding = 0;
};

/// Output extent along one spatial axis: floor((in + 2p - k) / stride) + 1.
std::size_t conv_output_extent(std::size_t in, std::size_t kernel, ConvGeometry geometry);

/// Cross-correlation: out[o,i,j] = bias[o] + sum_{c,p,q} k[o,c,p,q] * x_pad[c, i*s+p, j*s+q].
template <typename T>
BasicTensor<T> conv2d(const BasicTensor<T>& input, const BasicTensor<T>& kernels,
                      const BasicTensor<T>& bias, ConvGeometry geometry);

/// Adjoint of conv2d with respect to its input, i.e. the flipped-kernel
/// transposed convolution. `kernels` may be the forward kernels (backprop)
/// or any same-shaped feedback tensor. `input_shape` is the shape of the
/// tensor conv2d consumed (needed because strided outputs do not determine it).
template <typename T>
BasicTensor<T> conv2d_input_grad(const BasicTensor<T>& delta, const BasicTensor<T>& kernels,
                                 const Shape& input_shape, ConvGeometry geometry);

template <typename T>
struct ParamGrads {
  BasicTensor<T> weights;
  BasicTensor<T> bias;
};

/// Gradients of a scalar loss with respect to kernels and bias given the
/// upstream delta; sums over the batch.
template <typename T>
ParamGrads<T> conv2d_kernel_grad(const BasicTensor<T>& input, const BasicTensor<T>& delta,
                                 std::size_t kernel_h, std::size_t kernel_w, ConvGeometry geometry);

/// Recorded argmax positions of a max-pool: argmax[j] is the flat input
/// index chosen for flat output index j.
struct PoolIndices {
  Shape input_shape;
  Shape output_shape;
  std::vector<std::size_t> argmax;
};

template <typename T>
struct PoolResult {
  BasicTensor<T> output;
  PoolIndices indices;
};

/// Ties go to the first maximum in row-major scan order of the window.
template <typename T>
PoolResult<T> maxpool2d(const BasicTensor<T>& input, std::size_t window = 2, std::size_t stride = 2);

template <typename T>
BasicTensor<T> maxpool2d_grad(const BasicTensor<T>& delta, const PoolIndices& indices);

/// [M,K] x [K,N] -> [M,N]
template <typename T>
BasicTensor<T> matmul(const BasicTensor<T>& a, const BasicTensor<T>& b);

/// [M,K] x [N,K]^T -> [M,N]
template <typename T>
BasicTensor<T> matmul_transposed(const BasicTensor<T>& a, const BasicTensor<T>& b);

/// Fully-connected layer. `input` is [N, ...] and is flattened per example;
/// weights are [out, in]. Returns [N, out].
template <typename T>
BasicTensor<T> dense(const BasicTensor<T>& input, const BasicTensor<T>& weights,
                     const BasicTensor<T>& bias);

/// delta [N,out] x matrix [out,in] -> [N,in], reshaped to `input_shape`.
/// With the forward weights this is W^T delta; with feedback B it is the FA signal.
template <typename T>
BasicTensor<T> dense_input_grad(const BasicTensor<T>& delta, const BasicTensor<T>& matrix,
                                const Shape& input_shape);

/// dW = delta^T x, db = column sums of delta.
template <typename T>
ParamGrads<T> dense_weight_grad(const BasicTensor<T>& input, const BasicTensor<T>& delta);

template <typename T>
BasicTensor<T> relu(const BasicTensor<T>& u);

/// delta * f'(u) with f'(u) = 1 for u > 0, else 0.
template <typename T>
BasicTensor<T> relu_grad(const BasicTensor<T>& u, const BasicTensor<T>& delta);

/// [N,C,H,W] -> [N,C]
template <typename T>
BasicTensor<T> global_avg_pool(const BasicTensor<T>& input);

template <typename T>
BasicTensor<T> global_avg_pool_grad(const BasicTensor<T>& delta, const Shape& input_shape);

template <typename T>
struct SoftmaxLoss {
  double loss = 0.0;          // mean cross-entropy over the batch
  BasicTensor<T> delta;       // (softmax - onehot) / N
  BasicTensor<T> probabilities;
  std::size_t errors = 0;     // top-1 mistakes in the batch
};

/// Fused, max-shifted softmax + cross-entropy over logits [N,K].
template <typename T>
SoftmaxLoss<T> softmax_cross_entropy(const BasicTensor<T>& logits, std::span<const int> labels);

// Elementwise helpers. Binary ops require identical shapes.
template <typename T>
BasicTensor<T> add(const BasicTensor<T>& a, const BasicTensor<T>& b);
template <typename T>
BasicTensor<T> sub(const BasicTensor<T>& a, const BasicTensor<T>& b);
template <typename T>
BasicTensor<T> mul(const BasicTensor<T>& a, const BasicTensor<T>& b);
template <typename T>
BasicTensor<T> scale(const BasicTensor<T>& a, double factor);
template <typename T>
void add_inplace(BasicTensor<T>& a, const BasicTensor<T>& b, double factor = 1.0);

/// sign(0) = 0.
template <typename T>
BasicTensor<T> sign(const BasicTensor<T>& a);
template <typename T>
BasicTensor<T> abs(const BasicTensor<T>& a);

// Reductions accumulate in double in index order.
template <typename T>
double l2_norm(const BasicTensor<T>& a);
template <typename T>
double dot(const BasicTensor<T>& a, const BasicTensor<T>& b);
template <typename T>
double sum(const BasicTensor<T>& a);
/// Population variance of all entries.
template <typename T>
double variance(const BasicTensor<T>& a);

template <typename T = float>
BasicTensor<T> fill_gaussian(Rng& rng, const Shape& shape, double variance);
template <typename T = float>
BasicTensor<T> fill_uniform_signed(Rng& rng, const Shape& shape, double bound);

/// Angle in degrees between two flattened tensors; nullopt if either has zero norm.
std::optional<double> angle_degrees(std::span<const float> a, std::span<const float> b);

void require_same_shape(const Shape& a, const Shape& b, const char* what);

}  // namespace fbalign
