#pragma once

#include <cstdint>
#include <vector>

#include "skyrm/tensor.hpp"

namespace skyrm {

/// Weights shaped (out_c, in_c, kh, kw) plus one bias per output channel.
template <typename T>
struct ConvKernel {
  BasicTensor<T> weights;
  std::vector<T> bias;

  int out_c() const noexcept { return weights.n(); }
  int in_c() const noexcept { return weights.c(); }
  int kh() const noexcept { return weights.h(); }
  int kw() const noexcept { return weights.w(); }

  static ConvKernel zeros(int out_c, int in_c, int kh, int kw) {
    return {BasicTensor<T>({out_c, in_c, kh, kw}), std::vector<T>(out_c, T{0})};
  }

  template <typename U>
  ConvKernel<U> cast() const {
    return {weights.template cast<U>(), std::vector<U>(bias.begin(), bias.end())};
  }

  friend bool operator==(const ConvKernel&, const ConvKernel&) = default;
};

enum class Padding { same, valid };

template <typename T>
struct ConvGrads {
  BasicTensor<T> input;  // empty when not requested
  ConvKernel<T> kernel;
};

// 2-D cross-correlation (no kernel flip), stride 1. Same padding zero-fills
// (kh-1)/2 rows/cols on each border, so odd kernels preserve h and w.
template <typename T>
BasicTensor<T> conv2d_forward(const BasicTensor<T>& input, const ConvKernel<T>& k,
                              Padding padding = Padding::same);

/// Gradients of sum(grad_out * conv2d_forward(input, k)) with respect to input,
/// weights and bias. Skips the input gradient when `need_input_grad` is false.
template <typename T>
ConvGrads<T> conv2d_backward(const BasicTensor<T>& input, const ConvKernel<T>& k,
                             const BasicTensor<T>& grad_out, Padding padding = Padding::same,
                             bool need_input_grad = true);

template <typename T>
struct PoolResult {
  BasicTensor<T> output;
  // Flat input offset of each output element's maximum.
  std::vector<std::uint32_t> argmax;
  Shape4 input_shape;
};

/// 2x2 max pooling, stride 2. Ties resolve to the first element in row-major
/// window order. Odd h or w throws ShapeError.
template <typename T>
PoolResult<T> maxpool2x2_forward(const BasicTensor<T>& input);

template <typename T>
BasicTensor<T> maxpool2x2_backward(const std::vector<std::uint32_t>& argmax, Shape4 input_shape,
                                   const BasicTensor<T>& grad_out);

/// Transposed convolution with a (out_c, in_c, 2, 2) kernel and stride 2:
/// out(o, 2y+dy, 2x+dx) = bias[o] + sum_c in(c, y, x) * w(o, c, dy, dx).
template <typename T>
BasicTensor<T> upconv2x2_forward(const BasicTensor<T>& input, const ConvKernel<T>& k);

template <typename T>
ConvGrads<T> upconv2x2_backward(const BasicTensor<T>& input, const ConvKernel<T>& k,
                                const BasicTensor<T>& grad_out);

enum class ActivationKind { relu, prelu, tanh, mish };

struct Activation {
  ActivationKind kind = ActivationKind::relu;
  // Initial PReLU slope; the learned value lives in the model parameters.
  float prelu_init = 0.25f;
};

const char* to_string(ActivationKind kind);
ActivationKind parse_activation(const std::string& name);

enum class Direction { forward, backward };

template <typename T>
BasicTensor<T> activation_forward(const BasicTensor<T>& x, ActivationKind kind, T slope = T{0});

template <typename T>
struct ActivationGrads {
  BasicTensor<T> input;
  T slope = T{0};  // only meaningful for prelu
};

/// `x` is the forward input (pre-activation), `grad` the gradient of the output.
template <typename T>
ActivationGrads<T> activation_backward(const BasicTensor<T>& x, const BasicTensor<T>& grad,
                                       ActivationKind kind, T slope = T{0});

/// Single entry point covering both directions. Backward needs the gradient
/// of the output in `grad` and returns dOut/dIn * grad.
template <typename T>
BasicTensor<T> activation_apply(const BasicTensor<T>& x, ActivationKind kind, Direction direction,
                                const BasicTensor<T>& grad = {}, T slope = T{0});

enum class Mode { train, infer };

template <typename T>
struct DropoutResult {
  BasicTensor<T> output;
  // Per-element multiplier: 0 or 1/(1-rate). Empty when dropout was a no-op.
  BasicTensor<T> mask;
};

/// Inverted dropout. Infer mode and rate 0 return the input unchanged.
template <typename T>
DropoutResult<T> dropout_apply(const BasicTensor<T>& x, float rate, Mode mode, std::uint64_t seed);

template <typename T>
BasicTensor<T> dropout_backward(const BasicTensor<T>& mask, const BasicTensor<T>& grad_out);

template <typename T>
BasicTensor<T> concat_channels(const BasicTensor<T>& a, const BasicTensor<T>& b);

template <typename T>
struct ChannelSplit {
  BasicTensor<T> first;
  BasicTensor<T> second;
};

/// Inverse of concat_channels; also the backward of concat.
template <typename T>
ChannelSplit<T> split_channels(const BasicTensor<T>& x, int first_channels);

/// Per-pixel softmax over the channel axis (max-subtracted).
template <typename T>
BasicTensor<T> softmax_channelwise(const BasicTensor<T>& logits);

/// Gradient with respect to the logits given the softmax output and the
/// gradient of the probabilities.
template <typename T>
BasicTensor<T> softmax_backward(const BasicTensor<T>& probs, const BasicTensor<T>& grad_probs);

}  // namespace skyrm
