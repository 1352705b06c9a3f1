#pragma once

// Forward and backward kernels shared by the autoencoder and perceptron
// models. Image tensors are [N, H, W, C]; feature matrices are [N, F].

#include <cstddef>
#include <span>
#include <vector>

#include "susa/numerics/tensor.hpp"

namespace susa::kernels {

/// `same` pads with zeros, `edge` replicates the border pixels; both keep the
/// spatial size. `valid` does not pad.
enum class Padding { same, valid, edge };

// ---------------------------------------------------------------------------
// Convolution (stride 1)

/// weights: [k, k, Fin, Fout] with k odd.
template <typename T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& weights, Padding pad);

template <typename T>
struct Conv2dGrads {
  Tensor<T> input;
  Tensor<T> weights;
};

template <typename T>
Conv2dGrads<T> conv2d_backward(const Tensor<T>& input, const Tensor<T>& weights,
                               const Tensor<T>& grad_output, Padding pad,
                               bool need_input_grad = true);

/// Adds a per-channel bias along the last axis.
template <typename T>
Tensor<T> add_bias(const Tensor<T>& input, const Tensor<T>& bias);

/// Sums the gradient over every axis except the last.
template <typename T>
Tensor<T> bias_backward(const Tensor<T>& grad_output);

// ---------------------------------------------------------------------------
// Pooling and upsampling

enum class PoolKind { mean, max };

struct PoolSpec {
  PoolKind kind = PoolKind::max;
  std::size_t window = 2;
  std::size_t stride = 2;
  Padding pad = Padding::valid;
};

template <typename T>
struct PoolResult {
  Tensor<T> output;
  /// Flat input index of the winning element per output element (max only).
  std::vector<std::size_t> argmax;
  Shape input_shape;
};

template <typename T>
PoolResult<T> pool2d(const Tensor<T>& input, const PoolSpec& spec);

template <typename T>
Tensor<T> pool2d_backward(const PoolResult<T>& forward, const Tensor<T>& grad_output,
                          const PoolSpec& spec);

template <typename T>
Tensor<T> upsample_nearest2d(const Tensor<T>& input, std::size_t factor);

template <typename T>
Tensor<T> upsample_nearest2d_backward(const Tensor<T>& grad_output, std::size_t factor);

/// Reflect-pads the bottom and right edges of an [H, W, C] or [N, H, W, C]
/// tensor to the requested spatial size (edge pixel not repeated).
template <typename T>
Tensor<T> reflect_pad_to(const Tensor<T>& input, std::size_t height, std::size_t width);

/// Keeps the top-left height x width window.
template <typename T>
Tensor<T> crop_to(const Tensor<T>& input, std::size_t height, std::size_t width);

// ---------------------------------------------------------------------------
// Channel concatenation

template <typename T>
Tensor<T> concat_channels(const Tensor<T>& a, const Tensor<T>& b);

template <typename T>
Tensor<T> concat_channels(std::span<const Tensor<T>> parts);

/// Inverse of concat_channels for a gradient: splits off the first
/// `first_channels` channels.
template <typename T>
std::pair<Tensor<T>, Tensor<T>> split_channels(const Tensor<T>& grad, std::size_t first_channels);

// ---------------------------------------------------------------------------
// Activations

template <typename T>
struct PeluParams {
  T a{1};
  T b{1};
};

/// Throws std::invalid_argument unless a > 0 and b > 0.
template <typename T>
void validate(const PeluParams<T>& params);

/// (a/b)·h for h >= 0, a·(exp(h/b) − 1) otherwise.
template <typename T>
Tensor<T> pelu(const Tensor<T>& input, PeluParams<T> params);

template <typename T>
struct PeluGrads {
  Tensor<T> input;
  T a{};
  T b{};
};

template <typename T>
PeluGrads<T> pelu_backward(const Tensor<T>& input, PeluParams<T> params,
                           const Tensor<T>& grad_output);

template <typename T>
Tensor<T> relu(const Tensor<T>& input);

template <typename T>
Tensor<T> relu_backward(const Tensor<T>& input, const Tensor<T>& grad_output);

// ---------------------------------------------------------------------------
// Dense layers: input [N, Fin], weights [Fin, Fout], bias [Fout]

template <typename T>
Tensor<T> dense(const Tensor<T>& input, const Tensor<T>& weights, const Tensor<T>& bias);

template <typename T>
struct DenseGrads {
  Tensor<T> input;
  Tensor<T> weights;
  Tensor<T> bias;
};

template <typename T>
DenseGrads<T> dense_backward(const Tensor<T>& input, const Tensor<T>& weights,
                             const Tensor<T>& grad_output, bool need_input_grad = true);

// ---------------------------------------------------------------------------
// Losses

template <typename T>
struct LossResult {
  Accum<T> value = 0.0;
  /// d(loss)/d(prediction) or d(loss)/d(logits).
  Tensor<T> grad;
};

/// Mean of squared differences; gradient 2(p − t)/n.
template <typename T>
LossResult<T> loss_mse(const Tensor<T>& prediction, const Tensor<T>& target);

/// Value-only variant that skips the gradient allocation.
template <typename T>
Accum<T> mse_value(const Tensor<T>& prediction, const Tensor<T>& target);

/// Row-wise softmax of [N, C] logits with max subtraction.
template <typename T>
Tensor<T> softmax(const Tensor<T>& logits);

/// Softmax backward given the softmax output.
template <typename T>
Tensor<T> softmax_backward(const Tensor<T>& probabilities, const Tensor<T>& grad_output);

/// Mean negative log-likelihood of the true class. Labels index columns.
template <typename T>
LossResult<T> loss_softmax_crossentropy(const Tensor<T>& logits,
                                        std::span<const std::size_t> labels);

// ---------------------------------------------------------------------------
// Elementwise helpers

template <typename T>
void add_inplace(Tensor<T>& acc, const Tensor<T>& x);

template <typename T>
void scale_inplace(Tensor<T>& acc, T factor);

template <typename T>
Tensor<T> scaled(const Tensor<T>& x, T factor);

}  // namespace susa::kernels
