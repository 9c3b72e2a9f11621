#include "skyrm/unet.hpp"

#include <cmath>
#include <random>

#include "skyrm/rng.hpp"

namespace skyrm {

void UNetConfig::validate() const {
  if (depth < 1) throw ConfigError("model.depth must be >= 1, got " + std::to_string(depth));
  if (depth > 8) throw ConfigError("model.depth must be <= 8, got " + std::to_string(depth));
  if (base_channels < 1)
    throw ConfigError("model.base_channels must be >= 1, got " + std::to_string(base_channels));
  if (num_classes != 2 && num_classes != 3)
    throw ConfigError("model.num_classes must be 2 or 3, got " + std::to_string(num_classes));
  if (in_channels < 1)
    throw ConfigError("model.in_channels must be >= 1, got " + std::to_string(in_channels));
  if (!(dropout_rate >= 0.0f && dropout_rate < 1.0f))
    throw ConfigError("model.dropout must be in [0, 1), got " + std::to_string(dropout_rate));
  const int unit = 1 << depth;
  if (input_h < unit || input_w < unit || input_h % unit != 0 || input_w % unit != 0)
    throw ConfigError("model input size " + dims_str(input_h, input_w) + " is not divisible by 2^" +
                      std::to_string(depth) + " = " + std::to_string(unit));
}

void UNetConfig::check_input(int h, int w) const {
  const int unit = 1 << depth;
  if (h < unit || w < unit || h % unit != 0 || w % unit != 0)
    throw ShapeError("input size " + dims_str(h, w) + " is not divisible by 2^" +
                     std::to_string(depth) + " = " + std::to_string(unit));
}

namespace {

std::vector<std::uint32_t> dims4(int a, int b, int c, int d) {
  return {static_cast<std::uint32_t>(a), static_cast<std::uint32_t>(b),
          static_cast<std::uint32_t>(c), static_cast<std::uint32_t>(d)};
}

void add_conv(std::vector<ParamSpec>& out, const std::string& name, int oc, int ic, int k) {
  out.push_back({name + ".weight", dims4(oc, ic, k, k)});
  out.push_back({name + ".bias", {static_cast<std::uint32_t>(oc)}});
}

void add_block(std::vector<ParamSpec>& out, const std::string& name, int oc, int ic, bool slopes) {
  add_conv(out, name + ".conv1", oc, ic, 3);
  add_conv(out, name + ".conv2", oc, oc, 3);
  if (slopes) {
    out.push_back({name + ".act1.slope", {1}});
    out.push_back({name + ".act2.slope", {1}});
  }
}

template <typename T>
void view_conv(std::vector<ParamView<T>>& out, const std::string& name, ConvKernel<T>& k) {
  const auto& s = k.weights.shape();
  out.push_back({name + ".weight", k.weights.values(), dims4(s.n, s.c, s.h, s.w)});
  out.push_back({name + ".bias", std::span<T>(k.bias), {static_cast<std::uint32_t>(k.bias.size())}});
}

template <typename T>
void view_block(std::vector<ParamView<T>>& out, const std::string& name, ConvBlock<T>& b,
                bool slopes) {
  view_conv(out, name + ".conv1", b.conv1);
  view_conv(out, name + ".conv2", b.conv2);
  if (slopes) {
    out.push_back({name + ".act1.slope", std::span<T>(&b.slope1, 1), {1}});
    out.push_back({name + ".act2.slope", std::span<T>(&b.slope2, 1), {1}});
  }
}

ConvKernel<float> he_normal(int oc, int ic, int k, std::mt19937_64& rng) {
  auto kernel = ConvKernel<float>::zeros(oc, ic, k, k);
  std::normal_distribution<float> dist(0.0f, std::sqrt(2.0f / static_cast<float>(ic * k * k)));
  for (float& v : kernel.weights.values()) v = dist(rng);
  return kernel;
}

ConvBlock<float> init_block(int oc, int ic, float slope, std::mt19937_64& rng) {
  ConvBlock<float> b;
  b.conv1 = he_normal(oc, ic, 3, rng);
  b.conv2 = he_normal(oc, oc, 3, rng);
  b.slope1 = slope;
  b.slope2 = slope;
  return b;
}

template <typename T>
ConvBlock<T> zero_block(const ConvBlock<T>& like) {
  return {ConvKernel<T>::zeros(like.conv1.out_c(), like.conv1.in_c(), like.conv1.kh(), like.conv1.kw()),
          ConvKernel<T>::zeros(like.conv2.out_c(), like.conv2.in_c(), like.conv2.kh(), like.conv2.kw()),
          T{0}, T{0}};
}

template <typename T>
ConvKernel<T> zero_kernel(const ConvKernel<T>& like) {
  return ConvKernel<T>::zeros(like.out_c(), like.in_c(), like.kh(), like.kw());
}

template <typename T, typename U>
ConvBlock<U> cast_block(const ConvBlock<T>& b) {
  return {b.conv1.template cast<U>(), b.conv2.template cast<U>(), static_cast<U>(b.slope1),
          static_cast<U>(b.slope2)};
}

// Conv -> activation -> conv -> activation -> dropout.
template <typename T>
BasicTensor<T> block_forward(const ConvBlock<T>& block, const UNetConfig& config,
                             const BasicTensor<T>& x, Mode mode, std::uint64_t seed,
                             BlockTape<T>* tape) {
  const ActivationKind kind = config.activation.kind;
  BasicTensor<T> pre1 = conv2d_forward(x, block.conv1, Padding::same);
  BasicTensor<T> a1 = activation_forward(pre1, kind, block.slope1);
  BasicTensor<T> pre2 = conv2d_forward(a1, block.conv2, Padding::same);
  BasicTensor<T> a2 = activation_forward(pre2, kind, block.slope2);
  DropoutResult<T> d = dropout_apply(a2, config.dropout_rate, mode, seed);
  if (tape) {
    tape->input1 = x;
    tape->pre1 = std::move(pre1);
    tape->input2 = std::move(a1);
    tape->pre2 = std::move(pre2);
    tape->dropout_mask = std::move(d.mask);
  }
  return std::move(d.output);
}

template <typename T>
BasicTensor<T> block_backward(const ConvBlock<T>& block, const UNetConfig& config,
                              const BlockTape<T>& tape, const BasicTensor<T>& grad_out,
                              ConvBlock<T>& grads, bool need_input_grad) {
  const ActivationKind kind = config.activation.kind;
  BasicTensor<T> g = dropout_backward(tape.dropout_mask, grad_out);
  ActivationGrads<T> act2 = activation_backward(tape.pre2, g, kind, block.slope2);
  ConvGrads<T> c2 = conv2d_backward(tape.input2, block.conv2, act2.input, Padding::same, true);
  ActivationGrads<T> act1 = activation_backward(tape.pre1, c2.input, kind, block.slope1);
  ConvGrads<T> c1 = conv2d_backward(tape.input1, block.conv1, act1.input, Padding::same, need_input_grad);
  grads.conv1 = std::move(c1.kernel);
  grads.conv2 = std::move(c2.kernel);
  grads.slope1 = act1.slope;
  grads.slope2 = act2.slope;
  return std::move(c1.input);
}

template <typename T>
void add_inplace(BasicTensor<T>& a, const BasicTensor<T>& b) {
  if (a.shape() != b.shape())
    throw InternalError("gradient shape mismatch " + a.shape().str() + " vs " + b.shape().str());
  auto av = a.values();
  auto bv = b.values();
  for (std::size_t i = 0; i < av.size(); ++i) av[i] += bv[i];
}

}  // namespace

std::vector<ParamSpec> param_layout(const UNetConfig& config) {
  std::vector<ParamSpec> out;
  const bool slopes = config.has_slopes();
  for (int i = 0; i <= config.depth; ++i)
    add_block(out, "enc" + std::to_string(i), config.channels_at(i),
              i == 0 ? config.in_channels : config.channels_at(i - 1), slopes);
  for (int i = config.depth - 1; i >= 0; --i) {
    const std::string up = "up" + std::to_string(i);
    out.push_back({up + ".weight", dims4(config.channels_at(i), config.channels_at(i + 1), 2, 2)});
    out.push_back({up + ".bias", {static_cast<std::uint32_t>(config.channels_at(i))}});
    add_block(out, "dec" + std::to_string(i), config.channels_at(i), 2 * config.channels_at(i), slopes);
  }
  add_conv(out, "head", config.num_classes, config.base_channels, 1);
  return out;
}

template <typename T>
std::vector<ParamView<T>> param_views(UNetParams<T>& params, const UNetConfig& config) {
  std::vector<ParamView<T>> out;
  const bool slopes = config.has_slopes();
  for (std::size_t i = 0; i < params.encoder.size(); ++i)
    view_block(out, "enc" + std::to_string(i), params.encoder[i], slopes);
  for (int i = static_cast<int>(params.up.size()) - 1; i >= 0; --i) {
    view_conv(out, "up" + std::to_string(i), params.up[i]);
    view_block(out, "dec" + std::to_string(i), params.decoder[i], slopes);
  }
  view_conv(out, "head", params.head);
  return out;
}

template <typename T>
std::vector<ParamView<const T>> param_views(const UNetParams<T>& params, const UNetConfig& config) {
  std::vector<ParamView<const T>> out;
  for (auto& v : param_views(const_cast<UNetParams<T>&>(params), config))
    out.push_back({std::move(v.name), v.values, std::move(v.dims)});
  return out;
}

UNetParams<float> init_params(const UNetConfig& config, std::uint64_t seed) {
  config.validate();
  std::mt19937_64 rng(seed);
  UNetParams<float> p;
  const float slope = config.activation.prelu_init;
  for (int i = 0; i <= config.depth; ++i)
    p.encoder.push_back(init_block(config.channels_at(i),
                                   i == 0 ? config.in_channels : config.channels_at(i - 1), slope, rng));
  p.up.resize(config.depth);
  p.decoder.resize(config.depth);
  for (int i = config.depth - 1; i >= 0; --i) {
    p.up[i] = he_normal(config.channels_at(i), config.channels_at(i + 1), 2, rng);
    p.decoder[i] = init_block(config.channels_at(i), 2 * config.channels_at(i), slope, rng);
  }
  p.head = he_normal(config.num_classes, config.base_channels, 1, rng);
  return p;
}

template <typename T>
UNetParams<T> zeros_like(const UNetParams<T>& like) {
  UNetParams<T> z;
  for (const auto& b : like.encoder) z.encoder.push_back(zero_block(b));
  for (const auto& k : like.up) z.up.push_back(zero_kernel(k));
  for (const auto& b : like.decoder) z.decoder.push_back(zero_block(b));
  z.head = zero_kernel(like.head);
  return z;
}

template <typename T>
template <typename U>
UNetParams<U> UNetParams<T>::cast() const {
  UNetParams<U> out;
  for (const auto& b : encoder) out.encoder.push_back(cast_block<T, U>(b));
  for (const auto& k : up) out.up.push_back(k.template cast<U>());
  for (const auto& b : decoder) out.decoder.push_back(cast_block<T, U>(b));
  out.head = head.template cast<U>();
  out.version = version;
  return out;
}

template <typename T>
ForwardResult<T> forward(const UNetParams<T>& params, const UNetConfig& config,
                         const BasicTensor<T>& input, Mode mode, std::uint64_t seed) {
  require_nonempty(input, "forward");
  if (input.c() != config.in_channels)
    throw ShapeError("forward: input has " + std::to_string(input.c()) + " channels, model expects " +
                     std::to_string(config.in_channels));
  config.check_input(input.h(), input.w());
  if (static_cast<int>(params.encoder.size()) != config.depth + 1 ||
      static_cast<int>(params.up.size()) != config.depth ||
      static_cast<int>(params.decoder.size()) != config.depth)
    throw ShapeError("forward: parameters do not match depth " + std::to_string(config.depth));

  const int depth = config.depth;
  const bool record = mode == Mode::train;
  ForwardResult<T> result;
  Tape<T>& tape = result.tape;
  if (record) {
    tape.params = &params;
    tape.version = params.version;
    tape.consumed = false;
    tape.config = config;
    tape.encoder.resize(depth + 1);
    tape.pool_argmax.resize(depth);
    tape.pool_shapes.resize(depth);
    tape.up_inputs.resize(depth);
    tape.decoder.resize(depth);
  }

  std::uint64_t layer = 0;
  std::vector<BasicTensor<T>> skips(depth);
  BasicTensor<T> x = input;
  for (int i = 0; i <= depth; ++i) {
    x = block_forward(params.encoder[i], config, x, mode, derive_seed(seed, {layer++}),
                      record ? &tape.encoder[i] : nullptr);
    if (i == depth) break;
    PoolResult<T> pool = maxpool2x2_forward(x);
    skips[i] = std::move(x);
    x = std::move(pool.output);
    if (record) {
      tape.pool_argmax[i] = std::move(pool.argmax);
      tape.pool_shapes[i] = pool.input_shape;
    }
  }
  for (int i = depth - 1; i >= 0; --i) {
    BasicTensor<T> up = upconv2x2_forward(x, params.up[i]);
    if (record) tape.up_inputs[i] = std::move(x);
    BasicTensor<T> cat = concat_channels(skips[i], up);
    skips[i] = {};
    x = block_forward(params.decoder[i], config, cat, mode, derive_seed(seed, {layer++}),
                      record ? &tape.decoder[i] : nullptr);
  }
  result.logits = conv2d_forward(x, params.head, Padding::same);
  if (record) tape.head_input = std::move(x);
  result.probabilities = softmax_channelwise(result.logits);
  return result;
}

template <typename T>
Gradients<T> backward(Tape<T>& tape, const BasicTensor<T>& grad_logits, const BackwardOptions& opts) {
  if (tape.consumed || tape.params == nullptr)
    throw InternalError("backward: tape already consumed or recorded in infer mode");
  if (tape.params->version != tape.version)
    throw InternalError("backward: stale tape (parameters changed since forward)");
  tape.consumed = true;

  const UNetParams<T>& params = *tape.params;
  const UNetConfig& config = tape.config;
  const int depth = config.depth;
  Gradients<T> out;
  out.params = zeros_like(params);
  UNetParams<T>& g = out.params;

  ConvGrads<T> head = conv2d_backward(tape.head_input, params.head, grad_logits, Padding::same, true);
  g.head = std::move(head.kernel);
  BasicTensor<T> grad = std::move(head.input);

  std::vector<BasicTensor<T>> skip_grads(depth);
  for (int i = 0; i < depth; ++i) {
    BasicTensor<T> gcat = block_backward(params.decoder[i], config, tape.decoder[i], grad, g.decoder[i], true);
    ChannelSplit<T> parts = split_channels(gcat, config.channels_at(i));
    skip_grads[i] = std::move(parts.first);
    ConvGrads<T> up = upconv2x2_backward(tape.up_inputs[i], params.up[i], parts.second);
    g.up[i] = std::move(up.kernel);
    grad = std::move(up.input);
  }

  for (int i = depth; i >= 0; --i) {
    if (i < depth) {
      BasicTensor<T> pooled = maxpool2x2_backward(tape.pool_argmax[i], tape.pool_shapes[i], grad);
      switch (opts.skip) {
        case SkipPath::both:
          add_inplace(pooled, skip_grads[i]);
          grad = std::move(pooled);
          break;
        case SkipPath::concat_only:
          grad = std::move(skip_grads[i]);
          break;
        case SkipPath::pool_only:
          grad = std::move(pooled);
          break;
      }
    }
    const bool need_input = i > 0 || opts.input_grad;
    grad = block_backward(params.encoder[i], config, tape.encoder[i], grad, g.encoder[i], need_input);
  }
  if (opts.input_grad) out.input = std::move(grad);
  return out;
}

template <typename T>
ClassMask argmax_mask(const BasicTensor<T>& probs, int n) {
  require_nonempty(probs, "argmax_mask");
  ClassMask mask(probs.h(), probs.w());
  const std::size_t hw = probs.shape().plane();
  const T* p = probs.item(n);
  for (std::size_t i = 0; i < hw; ++i) {
    int best = 0;
    for (int c = 1; c < probs.c(); ++c)
      if (p[c * hw + i] > p[best * hw + i]) best = c;
    mask.data[i] = static_cast<std::uint8_t>(best);
  }
  return mask;
}

Tensor image_to_tensor(const Image& image) {
  if (image.empty()) throw ShapeError("image_to_tensor: empty image");
  return Tensor({1, 1, image.h, image.w}, image.data);
}

Tensor images_to_tensor(std::span<const Image> images) {
  if (images.empty()) throw ShapeError("images_to_tensor: no images");
  Tensor t({static_cast<int>(images.size()), 1, images[0].h, images[0].w});
  for (std::size_t i = 0; i < images.size(); ++i) {
    if (!images[i].same_dims(images[0]))
      throw ShapeError("images_to_tensor: image " + std::to_string(i) + " is " +
                       dims_str(images[i].h, images[i].w) + ", expected " +
                       dims_str(images[0].h, images[0].w));
    std::copy(images[i].data.begin(), images[i].data.end(), t.item(static_cast<int>(i)));
  }
  return t;
}

std::vector<ClassMask> predict(const UNetParams<float>& params, const UNetConfig& config,
                               const Tensor& input) {
  ForwardResult<float> r = forward(params, config, input, Mode::infer);
  std::vector<ClassMask> masks;
  for (int n = 0; n < input.n(); ++n) masks.push_back(argmax_mask(r.probabilities, n));
  return masks;
}

ClassMask predict(const UNetParams<float>& params, const UNetConfig& config, const Image& image) {
  return predict(params, config, image_to_tensor(image)).front();
}

Tensor predict_probabilities(const UNetParams<float>& params, const UNetConfig& config,
                             const Image& image) {
  return forward(params, config, image_to_tensor(image), Mode::infer).probabilities;
}

#define SKYRM_INSTANTIATE_UNET(T)                                                                  \
  template std::vector<ParamView<T>> param_views(UNetParams<T>&, const UNetConfig&);              \
  template std::vector<ParamView<const T>> param_views(const UNetParams<T>&, const UNetConfig&);  \
  template UNetParams<T> zeros_like(const UNetParams<T>&);                                         \
  template ForwardResult<T> forward(const UNetParams<T>&, const UNetConfig&, const BasicTensor<T>&, \
                                    Mode, std::uint64_t);                                          \
  template Gradients<T> backward(Tape<T>&, const BasicTensor<T>&, const BackwardOptions&);         \
  template ClassMask argmax_mask(const BasicTensor<T>&, int);

SKYRM_INSTANTIATE_UNET(float)
SKYRM_INSTANTIATE_UNET(double)
template UNetParams<double> UNetParams<float>::cast<double>() const;
template UNetParams<float> UNetParams<double>::cast<float>() const;
template UNetParams<float> UNetParams<float>::cast<float>() const;

}  // namespace skyrm
