#include "skyrm/layers.hpp"

#include <cmath>
#include <cstring>
#include <limits>
#include <random>

#include "skyrm/gemm.hpp"
#include "skyrm/parallel.hpp"

namespace skyrm {

std::string Shape4::str() const {
  return "(" + std::to_string(n) + "," + std::to_string(c) + "," + std::to_string(h) + "," +
         std::to_string(w) + ")";
}

template <typename T>
bool all_finite(const BasicTensor<T>& t) {
  for (T v : t.values())
    if (!std::isfinite(v)) return false;
  return true;
}

template <typename T>
double dot(std::span<const T> a, std::span<const T> b) {
  if (a.size() != b.size()) throw ShapeError("dot: length mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += static_cast<double>(a[i]) * b[i];
  return s;
}

namespace {

struct ConvGeometry {
  int pad_h = 0;
  int pad_w = 0;
  int out_h = 0;
  int out_w = 0;
};

template <typename T>
void check_kernel(const ConvKernel<T>& k, const char* op) {
  if (k.weights.empty()) throw ShapeError(std::string(op) + ": empty kernel");
  if (k.bias.size() != static_cast<std::size_t>(k.out_c()))
    throw ShapeError(std::string(op) + ": bias length " + std::to_string(k.bias.size()) +
                     " != out channels " + std::to_string(k.out_c()));
}

template <typename T>
ConvGeometry conv_geometry(const BasicTensor<T>& input, const ConvKernel<T>& k, Padding padding) {
  require_nonempty(input, "conv2d");
  check_kernel(k, "conv2d");
  if (input.c() != k.in_c())
    throw ShapeError("conv2d: input has " + std::to_string(input.c()) +
                     " channels, kernel expects " + std::to_string(k.in_c()));
  ConvGeometry g;
  if (padding == Padding::same) {
    if (k.kh() % 2 == 0 || k.kw() % 2 == 0)
      throw ShapeError("conv2d: same padding needs an odd kernel, got " + k.weights.shape().str());
    g.pad_h = (k.kh() - 1) / 2;
    g.pad_w = (k.kw() - 1) / 2;
    g.out_h = input.h();
    g.out_w = input.w();
  } else {
    g.out_h = input.h() - k.kh() + 1;
    g.out_w = input.w() - k.kw() + 1;
    if (g.out_h < 1 || g.out_w < 1)
      throw ShapeError("conv2d: kernel larger than input " + input.shape().str());
  }
  return g;
}

// Column matrix rows are (c, ki, kj); columns are output pixels.
template <typename T>
void im2col(const T* x, int channels, int h, int w, int kh, int kw, const ConvGeometry& g, T* col) {
  const int out_hw = g.out_h * g.out_w;
  for (int c = 0; c < channels; ++c) {
    const T* plane = x + static_cast<std::size_t>(c) * h * w;
    for (int ki = 0; ki < kh; ++ki) {
      for (int kj = 0; kj < kw; ++kj) {
        T* row = col + static_cast<std::size_t>((c * kh + ki) * kw + kj) * out_hw;
        const int dx = kj - g.pad_w;
        const int lo = std::max(0, -dx);
        const int hi = std::min(g.out_w, w - dx);
        for (int oy = 0; oy < g.out_h; ++oy) {
          T* dst = row + static_cast<std::size_t>(oy) * g.out_w;
          const int iy = oy + ki - g.pad_h;
          if (iy < 0 || iy >= h || hi <= lo) {
            std::fill(dst, dst + g.out_w, T{0});
            continue;
          }
          std::fill(dst, dst + lo, T{0});
          std::memcpy(dst + lo, plane + static_cast<std::size_t>(iy) * w + lo + dx,
                      sizeof(T) * (hi - lo));
          std::fill(dst + hi, dst + g.out_w, T{0});
        }
      }
    }
  }
}

template <typename T>
void col2im(const T* col, int channels, int h, int w, int kh, int kw, const ConvGeometry& g, T* x) {
  const int out_hw = g.out_h * g.out_w;
  std::fill(x, x + static_cast<std::size_t>(channels) * h * w, T{0});
  for (int c = 0; c < channels; ++c) {
    T* plane = x + static_cast<std::size_t>(c) * h * w;
    for (int ki = 0; ki < kh; ++ki) {
      for (int kj = 0; kj < kw; ++kj) {
        const T* row = col + static_cast<std::size_t>((c * kh + ki) * kw + kj) * out_hw;
        const int dx = kj - g.pad_w;
        const int lo = std::max(0, -dx);
        const int hi = std::min(g.out_w, w - dx);
        for (int oy = 0; oy < g.out_h; ++oy) {
          const int iy = oy + ki - g.pad_h;
          if (iy < 0 || iy >= h) continue;
          const T* src = row + static_cast<std::size_t>(oy) * g.out_w;
          T* dst = plane + static_cast<std::size_t>(iy) * w + dx;
          for (int ox = lo; ox < hi; ++ox) dst[ox] += src[ox];
        }
      }
    }
  }
}

bool is_pointwise(int kh, int kw, const ConvGeometry& g) {
  return kh == 1 && kw == 1 && g.pad_h == 0 && g.pad_w == 0;
}

template <typename T>
std::vector<T> channel_sums(const BasicTensor<T>& t) {
  std::vector<double> acc(t.c(), 0.0);
  const std::size_t hw = t.shape().plane();
  for (int n = 0; n < t.n(); ++n)
    for (int c = 0; c < t.c(); ++c) {
      const T* p = t.plane(n, c);
      double s = 0.0;
      for (std::size_t i = 0; i < hw; ++i) s += p[i];
      acc[c] += s;
    }
  return std::vector<T>(acc.begin(), acc.end());
}

// Sums per-item weight gradients in item order so the result does not depend
// on how many threads produced them.
template <typename T>
void reduce_items(const std::vector<std::vector<T>>& items, T* out, std::size_t len) {
  std::fill(out, out + len, T{0});
  for (const auto& v : items)
    for (std::size_t i = 0; i < len; ++i) out[i] += v[i];
}

}  // namespace

template <typename T>
BasicTensor<T> conv2d_forward(const BasicTensor<T>& input, const ConvKernel<T>& k, Padding padding) {
  const ConvGeometry g = conv_geometry(input, k, padding);
  const int oc = k.out_c();
  const int ckk = k.in_c() * k.kh() * k.kw();
  const int out_hw = g.out_h * g.out_w;
  BasicTensor<T> out({input.n(), oc, g.out_h, g.out_w});
  const bool pointwise = is_pointwise(k.kh(), k.kw(), g);

  parallel_for(input.n(), [&](int n) {
    T* y = out.item(n);
    for (int o = 0; o < oc; ++o)
      std::fill(y + static_cast<std::size_t>(o) * out_hw, y + static_cast<std::size_t>(o + 1) * out_hw,
                k.bias[o]);
    const T* cols = input.item(n);
    std::vector<T> buffer;
    if (!pointwise) {
      buffer.resize(static_cast<std::size_t>(ckk) * out_hw);
      im2col(input.item(n), input.c(), input.h(), input.w(), k.kh(), k.kw(), g, buffer.data());
      cols = buffer.data();
    }
    gemm<T>(Trans::no, Trans::no, oc, out_hw, ckk, k.weights.data(), ckk, cols, out_hw, y, out_hw,
            true);
  });
  return out;
}

template <typename T>
ConvGrads<T> conv2d_backward(const BasicTensor<T>& input, const ConvKernel<T>& k,
                             const BasicTensor<T>& grad_out, Padding padding, bool need_input_grad) {
  const ConvGeometry g = conv_geometry(input, k, padding);
  require_nonempty(grad_out, "conv2d_backward");
  const Shape4 expected{input.n(), k.out_c(), g.out_h, g.out_w};
  if (grad_out.shape() != expected)
    throw ShapeError("conv2d_backward: grad_out " + grad_out.shape().str() + " expected " +
                     expected.str());
  const int oc = k.out_c();
  const int ckk = k.in_c() * k.kh() * k.kw();
  const int out_hw = g.out_h * g.out_w;
  const bool pointwise = is_pointwise(k.kh(), k.kw(), g);

  ConvGrads<T> grads;
  grads.kernel.weights = BasicTensor<T>(k.weights.shape());
  grads.kernel.bias = channel_sums(grad_out);
  if (need_input_grad) grads.input = BasicTensor<T>(input.shape());

  std::vector<std::vector<T>> item_grads(input.n());
  parallel_for(input.n(), [&](int n) {
    const T* gy = grad_out.item(n);
    const T* cols = input.item(n);
    std::vector<T> buffer;
    if (!pointwise) {
      buffer.resize(static_cast<std::size_t>(ckk) * out_hw);
      im2col(input.item(n), input.c(), input.h(), input.w(), k.kh(), k.kw(), g, buffer.data());
      cols = buffer.data();
    }
    auto& gw = item_grads[n];
    gw.resize(static_cast<std::size_t>(oc) * ckk);
    gemm<T>(Trans::no, Trans::yes, oc, ckk, out_hw, gy, out_hw, cols, out_hw, gw.data(), ckk, false);
    if (!need_input_grad) return;
    if (pointwise) {
      gemm<T>(Trans::yes, Trans::no, ckk, out_hw, oc, k.weights.data(), ckk, gy, out_hw,
              grads.input.item(n), out_hw, false);
    } else {
      gemm<T>(Trans::yes, Trans::no, ckk, out_hw, oc, k.weights.data(), ckk, gy, out_hw,
              buffer.data(), out_hw, false);
      col2im(buffer.data(), input.c(), input.h(), input.w(), k.kh(), k.kw(), g, grads.input.item(n));
    }
  });
  reduce_items(item_grads, grads.kernel.weights.data(), grads.kernel.weights.size());
  return grads;
}

template <typename T>
PoolResult<T> maxpool2x2_forward(const BasicTensor<T>& input) {
  require_nonempty(input, "maxpool2x2");
  if (input.h() % 2 != 0 || input.w() % 2 != 0)
    throw ShapeError("maxpool2x2: odd spatial dims " + input.shape().str());
  const int oh = input.h() / 2;
  const int ow = input.w() / 2;
  PoolResult<T> r{BasicTensor<T>({input.n(), input.c(), oh, ow}), {}, input.shape()};
  r.argmax.resize(r.output.size());
  std::size_t o = 0;
  for (int n = 0; n < input.n(); ++n)
    for (int c = 0; c < input.c(); ++c) {
      const T* p = input.plane(n, c);
      const std::size_t base = input.offset(n, c, 0, 0);
      for (int y = 0; y < oh; ++y)
        for (int x = 0; x < ow; ++x, ++o) {
          const std::size_t i0 = static_cast<std::size_t>(2 * y) * input.w() + 2 * x;
          const std::size_t cand[4] = {i0, i0 + 1, i0 + input.w(), i0 + input.w() + 1};
          std::size_t best = cand[0];
          for (int j = 1; j < 4; ++j)
            if (p[cand[j]] > p[best]) best = cand[j];
          r.output.data()[o] = p[best];
          r.argmax[o] = static_cast<std::uint32_t>(base + best);
        }
    }
  return r;
}

template <typename T>
BasicTensor<T> maxpool2x2_backward(const std::vector<std::uint32_t>& argmax, Shape4 input_shape,
                                   const BasicTensor<T>& grad_out) {
  require_nonempty(grad_out, "maxpool2x2_backward");
  const Shape4 expected{input_shape.n, input_shape.c, input_shape.h / 2, input_shape.w / 2};
  if (grad_out.shape() != expected || argmax.size() != grad_out.size())
    throw ShapeError("maxpool2x2_backward: grad_out " + grad_out.shape().str() + " expected " +
                     expected.str());
  BasicTensor<T> grad_in(input_shape);
  const std::size_t limit = grad_in.size();
  for (std::size_t i = 0; i < argmax.size(); ++i) {
    if (argmax[i] >= limit) throw InternalError("maxpool2x2_backward: argmax index out of range");
    grad_in.data()[argmax[i]] += grad_out.data()[i];
  }
  return grad_in;
}

namespace {

template <typename T>
void check_upconv(const BasicTensor<T>& input, const ConvKernel<T>& k) {
  require_nonempty(input, "upconv2x2");
  check_kernel(k, "upconv2x2");
  if (k.kh() != 2 || k.kw() != 2)
    throw ShapeError("upconv2x2: kernel must be 2x2, got " + k.weights.shape().str());
  if (input.c() != k.in_c())
    throw ShapeError("upconv2x2: input has " + std::to_string(input.c()) +
                     " channels, kernel expects " + std::to_string(k.in_c()));
}

// Rearranges (o, c, dy, dx) into a ((o, dy, dx), c) matrix.
template <typename T>
std::vector<T> upconv_matrix(const ConvKernel<T>& k) {
  const int oc = k.out_c();
  const int ic = k.in_c();
  std::vector<T> m(static_cast<std::size_t>(oc) * 4 * ic);
  for (int o = 0; o < oc; ++o)
    for (int c = 0; c < ic; ++c)
      for (int q = 0; q < 4; ++q)
        m[(static_cast<std::size_t>(o) * 4 + q) * ic + c] = k.weights(o, c, q / 2, q % 2);
  return m;
}

}  // namespace

template <typename T>
BasicTensor<T> upconv2x2_forward(const BasicTensor<T>& input, const ConvKernel<T>& k) {
  check_upconv(input, k);
  const int oc = k.out_c();
  const int ic = k.in_c();
  const int h = input.h();
  const int w = input.w();
  const int hw = h * w;
  const std::vector<T> wm = upconv_matrix(k);
  BasicTensor<T> out({input.n(), oc, 2 * h, 2 * w});
  parallel_for(input.n(), [&](int n) {
    std::vector<T> t(static_cast<std::size_t>(oc) * 4 * hw);
    gemm<T>(Trans::no, Trans::no, oc * 4, hw, ic, wm.data(), ic, input.item(n), hw, t.data(), hw,
            false);
    for (int o = 0; o < oc; ++o) {
      T* y = out.plane(n, o);
      for (int q = 0; q < 4; ++q) {
        const T* src = t.data() + (static_cast<std::size_t>(o) * 4 + q) * hw;
        const int dy = q / 2;
        const int dx = q % 2;
        for (int yy = 0; yy < h; ++yy) {
          T* dst = y + static_cast<std::size_t>(2 * yy + dy) * (2 * w) + dx;
          const T* s = src + static_cast<std::size_t>(yy) * w;
          for (int xx = 0; xx < w; ++xx) dst[2 * xx] = s[xx] + k.bias[o];
        }
      }
    }
  });
  return out;
}

template <typename T>
ConvGrads<T> upconv2x2_backward(const BasicTensor<T>& input, const ConvKernel<T>& k,
                                const BasicTensor<T>& grad_out) {
  check_upconv(input, k);
  require_nonempty(grad_out, "upconv2x2_backward");
  const Shape4 expected{input.n(), k.out_c(), 2 * input.h(), 2 * input.w()};
  if (grad_out.shape() != expected)
    throw ShapeError("upconv2x2_backward: grad_out " + grad_out.shape().str() + " expected " +
                     expected.str());
  const int oc = k.out_c();
  const int ic = k.in_c();
  const int h = input.h();
  const int w = input.w();
  const int hw = h * w;
  const std::vector<T> wm = upconv_matrix(k);

  ConvGrads<T> grads;
  grads.input = BasicTensor<T>(input.shape());
  grads.kernel.weights = BasicTensor<T>(k.weights.shape());
  grads.kernel.bias = channel_sums(grad_out);

  std::vector<std::vector<T>> item_grads(input.n());
  parallel_for(input.n(), [&](int n) {
    std::vector<T> gathered(static_cast<std::size_t>(oc) * 4 * hw);
    for (int o = 0; o < oc; ++o) {
      const T* gy = grad_out.plane(n, o);
      for (int q = 0; q < 4; ++q) {
        T* dst = gathered.data() + (static_cast<std::size_t>(o) * 4 + q) * hw;
        const int dy = q / 2;
        const int dx = q % 2;
        for (int yy = 0; yy < h; ++yy) {
          const T* s = gy + static_cast<std::size_t>(2 * yy + dy) * (2 * w) + dx;
          for (int xx = 0; xx < w; ++xx) dst[static_cast<std::size_t>(yy) * w + xx] = s[2 * xx];
        }
      }
    }
    gemm<T>(Trans::yes, Trans::no, ic, hw, oc * 4, wm.data(), ic, gathered.data(), hw,
            grads.input.item(n), hw, false);
    auto& gm = item_grads[n];
    gm.resize(wm.size());
    gemm<T>(Trans::no, Trans::yes, oc * 4, ic, hw, gathered.data(), hw, input.item(n), hw,
            gm.data(), ic, false);
  });
  std::vector<T> gm(wm.size());
  reduce_items(item_grads, gm.data(), gm.size());
  for (int o = 0; o < oc; ++o)
    for (int c = 0; c < ic; ++c)
      for (int q = 0; q < 4; ++q)
        grads.kernel.weights(o, c, q / 2, q % 2) = gm[(static_cast<std::size_t>(o) * 4 + q) * ic + c];
  return grads;
}

const char* to_string(ActivationKind kind) {
  switch (kind) {
    case ActivationKind::relu: return "relu";
    case ActivationKind::prelu: return "prelu";
    case ActivationKind::tanh: return "tanh";
    case ActivationKind::mish: return "mish";
  }
  return "?";
}

ActivationKind parse_activation(const std::string& name) {
  if (name == "relu") return ActivationKind::relu;
  if (name == "prelu") return ActivationKind::prelu;
  if (name == "tanh") return ActivationKind::tanh;
  if (name == "mish") return ActivationKind::mish;
  throw ConfigError("unknown activation '" + name + "' (expected relu, prelu, tanh, mish)");
}

namespace {

template <typename T>
T softplus(T x) {
  return x > T{20} ? x : std::log1p(std::exp(x));
}

}  // namespace

template <typename T>
BasicTensor<T> activation_forward(const BasicTensor<T>& x, ActivationKind kind, T slope) {
  BasicTensor<T> y(x);
  auto v = y.values();
  switch (kind) {
    case ActivationKind::relu:
      for (T& e : v) e = e > T{0} ? e : T{0};
      break;
    case ActivationKind::prelu:
      for (T& e : v) e = e > T{0} ? e : slope * e;
      break;
    case ActivationKind::tanh:
      for (T& e : v) e = std::tanh(e);
      break;
    case ActivationKind::mish:
      for (T& e : v) e = e * std::tanh(softplus(e));
      break;
  }
  return y;
}

template <typename T>
ActivationGrads<T> activation_backward(const BasicTensor<T>& x, const BasicTensor<T>& grad,
                                       ActivationKind kind, T slope) {
  if (x.shape() != grad.shape())
    throw ShapeError("activation_backward: grad " + grad.shape().str() + " vs input " +
                     x.shape().str());
  ActivationGrads<T> r;
  r.input = BasicTensor<T>(grad);
  auto g = r.input.values();
  auto in = x.values();
  switch (kind) {
    case ActivationKind::relu:
      for (std::size_t i = 0; i < g.size(); ++i)
        if (!(in[i] > T{0})) g[i] = T{0};
      break;
    case ActivationKind::prelu: {
      double ds = 0.0;
      for (std::size_t i = 0; i < g.size(); ++i)
        if (!(in[i] > T{0})) {
          ds += static_cast<double>(in[i]) * g[i];
          g[i] *= slope;
        }
      r.slope = static_cast<T>(ds);
      break;
    }
    case ActivationKind::tanh:
      for (std::size_t i = 0; i < g.size(); ++i) {
        const T t = std::tanh(in[i]);
        g[i] *= T{1} - t * t;
      }
      break;
    case ActivationKind::mish:
      for (std::size_t i = 0; i < g.size(); ++i) {
        const T xi = in[i];
        const T t = std::tanh(softplus(xi));
        const T sig = T{1} / (T{1} + std::exp(-xi));
        g[i] *= t + xi * (T{1} - t * t) * sig;
      }
      break;
  }
  return r;
}

template <typename T>
BasicTensor<T> activation_apply(const BasicTensor<T>& x, ActivationKind kind, Direction direction,
                                const BasicTensor<T>& grad, T slope) {
  if (direction == Direction::forward) return activation_forward(x, kind, slope);
  return activation_backward(x, grad, kind, slope).input;
}

template <typename T>
DropoutResult<T> dropout_apply(const BasicTensor<T>& x, float rate, Mode mode, std::uint64_t seed) {
  if (!(rate >= 0.0f && rate < 1.0f))
    throw ConfigError("dropout rate must be in [0, 1), got " + std::to_string(rate));
  if (mode == Mode::infer || rate == 0.0f) return {x, {}};
  DropoutResult<T> r{BasicTensor<T>(x.shape()), BasicTensor<T>(x.shape())};
  std::mt19937_64 rng(seed);
  const T scale = static_cast<T>(1.0 / (1.0 - static_cast<double>(rate)));
  auto m = r.mask.values();
  auto out = r.output.values();
  auto in = x.values();
  for (std::size_t i = 0; i < m.size(); ++i) {
    const double u = static_cast<double>(rng() >> 11) * 0x1.0p-53;
    m[i] = u < rate ? T{0} : scale;
    out[i] = in[i] * m[i];
  }
  return r;
}

template <typename T>
BasicTensor<T> dropout_backward(const BasicTensor<T>& mask, const BasicTensor<T>& grad_out) {
  if (mask.empty()) return grad_out;
  if (mask.shape() != grad_out.shape())
    throw ShapeError("dropout_backward: mask " + mask.shape().str() + " vs grad " +
                     grad_out.shape().str());
  BasicTensor<T> g(grad_out);
  auto gv = g.values();
  auto mv = mask.values();
  for (std::size_t i = 0; i < gv.size(); ++i) gv[i] *= mv[i];
  return g;
}

template <typename T>
BasicTensor<T> concat_channels(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  require_nonempty(a, "concat_channels");
  require_nonempty(b, "concat_channels");
  if (a.n() != b.n() || a.h() != b.h() || a.w() != b.w())
    throw ShapeError("concat_channels: " + a.shape().str() + " vs " + b.shape().str());
  BasicTensor<T> out({a.n(), a.c() + b.c(), a.h(), a.w()});
  const std::size_t la = static_cast<std::size_t>(a.c()) * a.shape().plane();
  const std::size_t lb = static_cast<std::size_t>(b.c()) * b.shape().plane();
  for (int n = 0; n < a.n(); ++n) {
    std::memcpy(out.item(n), a.item(n), sizeof(T) * la);
    std::memcpy(out.item(n) + la, b.item(n), sizeof(T) * lb);
  }
  return out;
}

template <typename T>
ChannelSplit<T> split_channels(const BasicTensor<T>& x, int first_channels) {
  require_nonempty(x, "split_channels");
  if (first_channels < 1 || first_channels >= x.c())
    throw ShapeError("split_channels: cannot split " + x.shape().str() + " at " +
                     std::to_string(first_channels));
  ChannelSplit<T> r{BasicTensor<T>({x.n(), first_channels, x.h(), x.w()}),
                    BasicTensor<T>({x.n(), x.c() - first_channels, x.h(), x.w()})};
  const std::size_t la = static_cast<std::size_t>(first_channels) * x.shape().plane();
  const std::size_t lb = static_cast<std::size_t>(x.c() - first_channels) * x.shape().plane();
  for (int n = 0; n < x.n(); ++n) {
    std::memcpy(r.first.item(n), x.item(n), sizeof(T) * la);
    std::memcpy(r.second.item(n), x.item(n) + la, sizeof(T) * lb);
  }
  return r;
}

template <typename T>
BasicTensor<T> softmax_channelwise(const BasicTensor<T>& logits) {
  require_nonempty(logits, "softmax_channelwise");
  BasicTensor<T> p(logits.shape());
  const std::size_t hw = logits.shape().plane();
  const int channels = logits.c();
  for (int n = 0; n < logits.n(); ++n) {
    const T* z = logits.item(n);
    T* out = p.item(n);
    for (std::size_t i = 0; i < hw; ++i) {
      T mx = z[i];
      for (int c = 1; c < channels; ++c) mx = std::max(mx, z[c * hw + i]);
      T sum = 0;
      for (int c = 0; c < channels; ++c) {
        const T e = std::exp(z[c * hw + i] - mx);
        out[c * hw + i] = e;
        sum += e;
      }
      const T inv = T{1} / sum;
      for (int c = 0; c < channels; ++c) out[c * hw + i] *= inv;
    }
  }
  return p;
}

template <typename T>
BasicTensor<T> softmax_backward(const BasicTensor<T>& probs, const BasicTensor<T>& grad_probs) {
  if (probs.shape() != grad_probs.shape())
    throw ShapeError("softmax_backward: " + probs.shape().str() + " vs " + grad_probs.shape().str());
  BasicTensor<T> g(probs.shape());
  const std::size_t hw = probs.shape().plane();
  const int channels = probs.c();
  for (int n = 0; n < probs.n(); ++n) {
    const T* p = probs.item(n);
    const T* gp = grad_probs.item(n);
    T* out = g.item(n);
    for (std::size_t i = 0; i < hw; ++i) {
      T inner = 0;
      for (int c = 0; c < channels; ++c) inner += p[c * hw + i] * gp[c * hw + i];
      for (int c = 0; c < channels; ++c) out[c * hw + i] = p[c * hw + i] * (gp[c * hw + i] - inner);
    }
  }
  return g;
}

#define SKYRM_INSTANTIATE_LAYERS(T)                                                              \
  template bool all_finite(const BasicTensor<T>&);                                               \
  template double dot(std::span<const T>, std::span<const T>);                                   \
  template BasicTensor<T> conv2d_forward(const BasicTensor<T>&, const ConvKernel<T>&, Padding);  \
  template ConvGrads<T> conv2d_backward(const BasicTensor<T>&, const ConvKernel<T>&,             \
                                        const BasicTensor<T>&, Padding, bool);                   \
  template PoolResult<T> maxpool2x2_forward(const BasicTensor<T>&);                              \
  template BasicTensor<T> maxpool2x2_backward(const std::vector<std::uint32_t>&, Shape4,         \
                                              const BasicTensor<T>&);                            \
  template BasicTensor<T> upconv2x2_forward(const BasicTensor<T>&, const ConvKernel<T>&);        \
  template ConvGrads<T> upconv2x2_backward(const BasicTensor<T>&, const ConvKernel<T>&,          \
                                           const BasicTensor<T>&);                               \
  template BasicTensor<T> activation_forward(const BasicTensor<T>&, ActivationKind, T);          \
  template ActivationGrads<T> activation_backward(const BasicTensor<T>&, const BasicTensor<T>&,  \
                                                  ActivationKind, T);                            \
  template BasicTensor<T> activation_apply(const BasicTensor<T>&, ActivationKind, Direction,     \
                                           const BasicTensor<T>&, T);                            \
  template DropoutResult<T> dropout_apply(const BasicTensor<T>&, float, Mode, std::uint64_t);    \
  template BasicTensor<T> dropout_backward(const BasicTensor<T>&, const BasicTensor<T>&);        \
  template BasicTensor<T> concat_channels(const BasicTensor<T>&, const BasicTensor<T>&);         \
  template ChannelSplit<T> split_channels(const BasicTensor<T>&, int);                           \
  template BasicTensor<T> softmax_channelwise(const BasicTensor<T>&);                            \
  template BasicTensor<T> softmax_backward(const BasicTensor<T>&, const BasicTensor<T>&);

SKYRM_INSTANTIATE_LAYERS(float)
SKYRM_INSTANTIATE_LAYERS(double)

}  // namespace skyrm
