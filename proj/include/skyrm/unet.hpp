#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "skyrm/image.hpp"
#include "skyrm/layers.hpp"

namespace skyrm {

/// Encoder-decoder hyperparameters.
///
/// `depth` counts pooling stages. Encoder level i (0..depth) emits
/// base_channels * 2^i channels; level `depth` is the bottleneck. Input height
/// and width must be divisible by 2^depth.
struct UNetConfig {
  int depth = 3;
  int base_channels = 16;
  int num_classes = 3;
  int in_channels = 1;
  Activation activation{};
  float dropout_rate = 0.05f;
  int input_h = 128;
  int input_w = 128;

  int channels_at(int level) const noexcept { return base_channels << level; }
  bool has_slopes() const noexcept { return activation.kind == ActivationKind::prelu; }

  /// Throws ConfigError on invalid values.
  void validate() const;
  /// Throws ShapeError unless h and w are positive multiples of 2^depth.
  void check_input(int h, int w) const;

  friend bool operator==(const UNetConfig& a, const UNetConfig& b) {
    return a.depth == b.depth && a.base_channels == b.base_channels &&
           a.num_classes == b.num_classes && a.in_channels == b.in_channels &&
           a.activation.kind == b.activation.kind &&
           a.activation.prelu_init == b.activation.prelu_init && a.dropout_rate == b.dropout_rate &&
           a.input_h == b.input_h && a.input_w == b.input_w;
  }
};

/// Two 3x3 same-padded convolutions, each followed by the activation.
template <typename T>
struct ConvBlock {
  ConvKernel<T> conv1;
  ConvKernel<T> conv2;
  T slope1{};  // PReLU slopes, unused for other activations
  T slope2{};

  friend bool operator==(const ConvBlock&, const ConvBlock&) = default;
};

template <typename T>
struct UNetParams {
  std::vector<ConvBlock<T>> encoder;  // depth + 1 blocks, the last is the bottleneck
  std::vector<ConvKernel<T>> up;      // up[i] maps level i+1 to level i
  std::vector<ConvBlock<T>> decoder;  // decoder[i] runs at level i
  ConvKernel<T> head;                 // 1x1 convolution to num_classes
  // Bumped by every optimizer step; tapes recorded against an older version
  // are rejected by backward().
  std::uint64_t version = 0;

  template <typename U>
  UNetParams<U> cast() const;

  bool same_values(const UNetParams& o) const {
    return encoder == o.encoder && up == o.up && decoder == o.decoder && head == o.head;
  }
};

/// Mutable view of one named learnable tensor.
template <typename T>
struct ParamView {
  std::string name;
  std::span<T> values;
  std::vector<std::uint32_t> dims;
};

/// Names and dims of every learnable tensor of `config`, in checkpoint order.
struct ParamSpec {
  std::string name;
  std::vector<std::uint32_t> dims;
};
std::vector<ParamSpec> param_layout(const UNetConfig& config);

template <typename T>
std::vector<ParamView<T>> param_views(UNetParams<T>& params, const UNetConfig& config);
template <typename T>
std::vector<ParamView<const T>> param_views(const UNetParams<T>& params, const UNetConfig& config);

/// He-normal weights (std = sqrt(2 / fan_in)), zero biases, PReLU slopes at
/// their configured initial value. Deterministic in `seed`.
UNetParams<float> init_params(const UNetConfig& config, std::uint64_t seed);

/// All-zero parameters with the same layout as `like`.
template <typename T>
UNetParams<T> zeros_like(const UNetParams<T>& like);

template <typename T>
struct BlockTape {
  BasicTensor<T> input1, pre1;
  BasicTensor<T> input2, pre2;
  BasicTensor<T> dropout_mask;
};

/// Intermediates recorded by a train-mode forward pass. Single use.
template <typename T>
struct Tape {
  const UNetParams<T>* params = nullptr;
  std::uint64_t version = 0;
  bool consumed = true;
  UNetConfig config;
  std::vector<BlockTape<T>> encoder;
  std::vector<std::vector<std::uint32_t>> pool_argmax;
  std::vector<Shape4> pool_shapes;
  std::vector<BasicTensor<T>> up_inputs;
  std::vector<BlockTape<T>> decoder;
  BasicTensor<T> head_input;
};

template <typename T>
struct ForwardResult {
  BasicTensor<T> logits;
  BasicTensor<T> probabilities;
  Tape<T> tape;  // empty in infer mode
};

/// Runs the network on an (n, in_channels, h, w) batch. Train mode applies
/// dropout (seeded) and records a tape; infer mode does neither.
template <typename T>
ForwardResult<T> forward(const UNetParams<T>& params, const UNetConfig& config,
                         const BasicTensor<T>& input, Mode mode, std::uint64_t seed = 0);

/// Which consumers of an encoder block's output feed gradient back into it.
/// Anything other than `both` is a diagnostic ablation.
enum class SkipPath { both, concat_only, pool_only };

struct BackwardOptions {
  SkipPath skip = SkipPath::both;
  bool input_grad = false;
};

template <typename T>
struct Gradients {
  UNetParams<T> params;
  BasicTensor<T> input;  // only with BackwardOptions::input_grad
};

/// Backpropagates d loss / d logits through a recorded tape.
template <typename T>
Gradients<T> backward(Tape<T>& tape, const BasicTensor<T>& grad_logits,
                      const BackwardOptions& opts = {});

/// Per-pixel argmax of item `n`; ties go to the lower class index.
template <typename T>
ClassMask argmax_mask(const BasicTensor<T>& probs, int n = 0);

Tensor image_to_tensor(const Image& image);
Tensor images_to_tensor(std::span<const Image> images);

/// Infer-mode class masks, one per batch item.
std::vector<ClassMask> predict(const UNetParams<float>& params, const UNetConfig& config,
                               const Tensor& input);
ClassMask predict(const UNetParams<float>& params, const UNetConfig& config, const Image& image);

/// Infer-mode probabilities (1, num_classes, h, w) for one image.
Tensor predict_probabilities(const UNetParams<float>& params, const UNetConfig& config,
                             const Image& image);

}  // namespace skyrm
