#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "cprobe/binary_io.hpp"
#include "cprobe/errors.hpp"

namespace cprobe {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

/// Dense row-major float tensor. A default-constructed tensor is the rank-0
/// scalar 0.
class Tensor {
 public:
  Tensor() : data_(1, 0.0f) {}

  explicit Tensor(Shape shape, float fill = 0.0f)
      : shape_(std::move(shape)) {
    check_extents();
    data_.assign(shape_size(shape_), fill);
  }

  Tensor(Shape shape, std::vector<float> data)
      : shape_(std::move(shape)), data_(std::move(data)) {
    check_extents();
    if (shape_size(shape_) != data_.size()) {
      throw ShapeError("tensor data length " + std::to_string(data_.size()) +
                       " does not match shape " + shape_str(shape_));
    }
  }

  /// Rank-1 tensor holding `values`.
  static Tensor vector(std::vector<float> values) {
    const std::size_t n = values.size();
    return Tensor({n}, std::move(values));
  }

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t dim(std::size_t axis) const {
    if (axis >= shape_.size()) throw ShapeError("axis out of range");
    return shape_[axis];
  }
  std::size_t size() const noexcept { return data_.size(); }

  std::span<float> data() noexcept { return data_; }
  std::span<const float> data() const noexcept { return data_; }
  const std::vector<float>& values() const noexcept { return data_; }

  float& operator[](std::size_t i) { return data_[i]; }
  float operator[](std::size_t i) const { return data_[i]; }

  /// Element access for rank-4 (N,C,H,W) tensors; unchecked.
  float& at(std::size_t n, std::size_t c, std::size_t h, std::size_t w) {
    return data_[((n * shape_[1] + c) * shape_[2] + h) * shape_[3] + w];
  }
  float at(std::size_t n, std::size_t c, std::size_t h, std::size_t w) const {
    return data_[((n * shape_[1] + c) * shape_[2] + h) * shape_[3] + w];
  }

  Tensor reshaped(Shape shape) const {
    return Tensor(std::move(shape), data_);
  }

  bool operator==(const Tensor& other) const = default;

 private:
  void check_extents() const {
    for (std::size_t e : shape_) {
      if (e == 0) throw ShapeError("tensor extents must be >= 1, got " + shape_str(shape_));
    }
  }

  Shape shape_;
  std::vector<float> data_;
};

/// Canonical feature-map layout.
struct Shape4 {
  std::size_t batch = 0;
  std::size_t channels = 0;
  std::size_t height = 0;
  std::size_t width = 0;

  Shape to_shape() const { return {batch, channels, height, width}; }
  std::size_t per_sample() const { return channels * height * width; }
  bool operator==(const Shape4&) const = default;
};

inline Shape4 shape4(const Tensor& t) {
  if (t.rank() != 4) {
    throw ShapeError("expected a rank-4 (N,C,H,W) tensor, got " + shape_str(t.shape()));
  }
  return {t.dim(0), t.dim(1), t.dim(2), t.dim(3)};
}

// ---------------------------------------------------------------------------
// Convolution kernels. Accumulation is done in double.

struct ConvGeometry {
  std::size_t n, c, h, w;      // input
  std::size_t k, kh, kw;       // kernel
  std::size_t oh, ow;          // output
  std::size_t stride, pad;
};

inline std::size_t conv_out_extent(std::size_t in, std::size_t kernel,
                                   std::size_t stride, std::size_t pad) {
  const std::size_t padded = in + 2 * pad;
  if (stride < 1) throw ShapeError("stride must be >= 1");
  if (padded < kernel) throw ShapeError("kernel larger than padded input");
  if ((padded - kernel) % stride != 0) {
    throw ShapeError("non-integral convolution output extent: (" +
                     std::to_string(in) + " + 2*" + std::to_string(pad) + " - " +
                     std::to_string(kernel) + ") / " + std::to_string(stride));
  }
  return (padded - kernel) / stride + 1;
}

inline ConvGeometry conv_geometry(const Shape& input, const Shape& kernel,
                                  std::size_t stride, std::size_t pad) {
  if (input.size() != 4 || kernel.size() != 4) {
    throw ShapeError("conv2d expects rank-4 input and kernel");
  }
  if (input[1] != kernel[1]) {
    throw ShapeError("conv2d channel mismatch: input " + shape_str(input) +
                     ", kernel " + shape_str(kernel));
  }
  ConvGeometry g{input[0], input[1], input[2], input[3],
                 kernel[0], kernel[2], kernel[3], 0, 0, stride, pad};
  g.oh = conv_out_extent(g.h, g.kh, stride, pad);
  g.ow = conv_out_extent(g.w, g.kw, stride, pad);
  return g;
}

namespace detail {

/// Visits every (output position, kernel tap) pair that lands inside the
/// unpadded input. fn(n, k, oy, ox, c, ky, kx, iy, ix).
template <typename Fn>
void for_each_tap(const ConvGeometry& g, Fn&& fn) {
  for (std::size_t n = 0; n < g.n; ++n)
    for (std::size_t k = 0; k < g.k; ++k)
      for (std::size_t oy = 0; oy < g.oh; ++oy)
        for (std::size_t ox = 0; ox < g.ow; ++ox)
          for (std::size_t c = 0; c < g.c; ++c)
            for (std::size_t ky = 0; ky < g.kh; ++ky) {
              const long iy = static_cast<long>(oy * g.stride + ky) - static_cast<long>(g.pad);
              if (iy < 0 || iy >= static_cast<long>(g.h)) continue;
              for (std::size_t kx = 0; kx < g.kw; ++kx) {
                const long ix = static_cast<long>(ox * g.stride + kx) - static_cast<long>(g.pad);
                if (ix < 0 || ix >= static_cast<long>(g.w)) continue;
                fn(n, k, oy, ox, c, ky, kx, static_cast<std::size_t>(iy),
                   static_cast<std::size_t>(ix));
              }
            }
}

}  // namespace detail

/// Cross-correlation of `input` [N,C,H,W] with `kernel` [K,C,kh,kw].
inline Tensor conv2d(const Tensor& input, const Tensor& kernel, const Tensor& bias,
                     std::size_t stride, std::size_t pad) {
  const ConvGeometry g = conv_geometry(input.shape(), kernel.shape(), stride, pad);
  if (bias.rank() != 1 || bias.dim(0) != g.k) {
    throw ShapeError("conv2d bias must have shape [" + std::to_string(g.k) + "]");
  }
  Tensor out({g.n, g.k, g.oh, g.ow});
  const auto in = input.data();
  const auto w = kernel.data();
  for (std::size_t n = 0; n < g.n; ++n) {
    for (std::size_t k = 0; k < g.k; ++k) {
      for (std::size_t oy = 0; oy < g.oh; ++oy) {
        for (std::size_t ox = 0; ox < g.ow; ++ox) {
          double acc = bias[k];
          for (std::size_t c = 0; c < g.c; ++c) {
            const float* plane = in.data() + (n * g.c + c) * g.h * g.w;
            const float* wk = w.data() + (k * g.c + c) * g.kh * g.kw;
            for (std::size_t ky = 0; ky < g.kh; ++ky) {
              const long iy = static_cast<long>(oy * stride + ky) - static_cast<long>(pad);
              if (iy < 0 || iy >= static_cast<long>(g.h)) continue;
              for (std::size_t kx = 0; kx < g.kw; ++kx) {
                const long ix = static_cast<long>(ox * stride + kx) - static_cast<long>(pad);
                if (ix < 0 || ix >= static_cast<long>(g.w)) continue;
                acc += static_cast<double>(plane[iy * static_cast<long>(g.w) + ix]) *
                       wk[ky * g.kw + kx];
              }
            }
          }
          out.at(n, k, oy, ox) = static_cast<float>(acc);
        }
      }
    }
  }
  return out;
}

/// Adjoint of conv2d with respect to its input: scatters `grad_out`
/// [N,K,H',W'] back through `kernel` into a tensor of `input_shape`.
inline Tensor conv2d_backward_input(const Tensor& grad_out, const Tensor& kernel,
                                    const Shape& input_shape, std::size_t stride,
                                    std::size_t pad) {
  const ConvGeometry g = conv_geometry(input_shape, kernel.shape(), stride, pad);
  if (grad_out.shape() != Shape{g.n, g.k, g.oh, g.ow}) {
    throw ShapeError("conv2d_backward_input: gradient shape " +
                     shape_str(grad_out.shape()) + " does not match geometry");
  }
  std::vector<double> acc(shape_size(input_shape), 0.0);
  const auto w = kernel.data();
  detail::for_each_tap(g, [&](std::size_t n, std::size_t k, std::size_t oy, std::size_t ox,
                              std::size_t c, std::size_t ky, std::size_t kx, std::size_t iy,
                              std::size_t ix) {
    acc[((n * g.c + c) * g.h + iy) * g.w + ix] +=
        static_cast<double>(grad_out.at(n, k, oy, ox)) *
        w[((k * g.c + c) * g.kh + ky) * g.kw + kx];
  });
  return Tensor(input_shape, std::vector<float>(acc.begin(), acc.end()));
}

/// Gradient of conv2d with respect to its kernel.
inline Tensor conv2d_backward_kernel(const Tensor& input, const Tensor& grad_out,
                                     const Shape& kernel_shape, std::size_t stride,
                                     std::size_t pad) {
  const ConvGeometry g = conv_geometry(input.shape(), kernel_shape, stride, pad);
  std::vector<double> acc(shape_size(kernel_shape), 0.0);
  const auto in = input.data();
  detail::for_each_tap(g, [&](std::size_t n, std::size_t k, std::size_t oy, std::size_t ox,
                              std::size_t c, std::size_t ky, std::size_t kx, std::size_t iy,
                              std::size_t ix) {
    acc[((k * g.c + c) * g.kh + ky) * g.kw + kx] +=
        static_cast<double>(grad_out.at(n, k, oy, ox)) *
        in[((n * g.c + c) * g.h + iy) * g.w + ix];
  });
  return Tensor(kernel_shape, std::vector<float>(acc.begin(), acc.end()));
}

// ---------------------------------------------------------------------------
// Pointwise operations.

enum class ElementwiseOp { Relu, Sigmoid, ClipMin0, Add, Mul };

inline float sigmoid(float z) {
  return static_cast<float>(1.0 / (1.0 + std::exp(-static_cast<double>(z))));
}

inline Tensor elementwise(ElementwiseOp op, const Tensor& a) {
  Tensor out = a;
  auto d = out.data();
  switch (op) {
    case ElementwiseOp::Relu:
    case ElementwiseOp::ClipMin0:
      for (float& x : d) x = std::max(x, 0.0f);
      break;
    case ElementwiseOp::Sigmoid:
      for (float& x : d) x = sigmoid(x);
      break;
    default:
      throw ShapeError("binary elementwise op requires a second operand");
  }
  return out;
}

/// Binary op with either equal shapes or a rank-1 channel vector broadcast
/// against a rank-4 (N,C,H,W) tensor.
inline Tensor elementwise(ElementwiseOp op, const Tensor& a, const Tensor& b) {
  if (op != ElementwiseOp::Add && op != ElementwiseOp::Mul) {
    throw ShapeError("unary elementwise op given a second operand");
  }
  const auto apply = [op](float x, float y) { return op == ElementwiseOp::Add ? x + y : x * y; };
  Tensor out = a;
  auto d = out.data();
  if (a.shape() == b.shape()) {
    for (std::size_t i = 0; i < d.size(); ++i) d[i] = apply(d[i], b[i]);
    return out;
  }
  if (a.rank() == 4 && b.rank() == 1 && b.dim(0) == a.dim(1)) {
    const Shape4 s = shape4(a);
    const std::size_t plane = s.height * s.width;
    for (std::size_t n = 0; n < s.batch; ++n)
      for (std::size_t c = 0; c < s.channels; ++c) {
        float* p = d.data() + (n * s.channels + c) * plane;
        for (std::size_t i = 0; i < plane; ++i) p[i] = apply(p[i], b[c]);
      }
    return out;
  }
  throw ShapeError("cannot broadcast " + shape_str(b.shape()) + " against " +
                   shape_str(a.shape()));
}

// ---------------------------------------------------------------------------
// Reductions.

enum class ReduceOp { Sum, Mean, Max, L1Norm };

/// Reduces over `axes`, removing them from the result shape. Reducing every
/// axis yields a rank-0 scalar.
inline Tensor reduce(ReduceOp op, const Tensor& t, const std::vector<std::size_t>& axes) {
  std::vector<bool> reduced(t.rank(), false);
  for (std::size_t axis : axes) {
    if (axis >= t.rank()) throw ShapeError("reduce axis " + std::to_string(axis) + " out of range");
    if (reduced[axis]) throw ShapeError("reduce axes must be distinct");
    reduced[axis] = true;
  }
  Shape out_shape;
  for (std::size_t i = 0; i < t.rank(); ++i)
    if (!reduced[i]) out_shape.push_back(t.dim(i));

  const std::size_t out_n = shape_size(out_shape);
  std::vector<double> acc(out_n, op == ReduceOp::Max ? -std::numeric_limits<double>::infinity() : 0.0);
  std::vector<std::size_t> counts(out_n, 0);

  std::vector<std::size_t> index(t.rank(), 0);
  for (std::size_t flat = 0; flat < t.size(); ++flat) {
    std::size_t out_flat = 0;
    for (std::size_t i = 0; i < t.rank(); ++i)
      if (!reduced[i]) out_flat = out_flat * t.dim(i) + index[i];
    const double x = t[flat];
    switch (op) {
      case ReduceOp::Sum:
      case ReduceOp::Mean: acc[out_flat] += x; break;
      case ReduceOp::Max: acc[out_flat] = std::max(acc[out_flat], x); break;
      case ReduceOp::L1Norm: acc[out_flat] += std::abs(x); break;
    }
    ++counts[out_flat];
    for (std::size_t i = t.rank(); i-- > 0;) {
      if (++index[i] < t.dim(i)) break;
      index[i] = 0;
    }
  }
  if (op == ReduceOp::Mean)
    for (std::size_t i = 0; i < out_n; ++i) acc[i] /= static_cast<double>(counts[i]);
  return Tensor(out_shape, std::vector<float>(acc.begin(), acc.end()));
}

inline double sum(const Tensor& t) {
  double acc = 0.0;
  for (float x : t.data()) acc += x;
  return acc;
}

inline double l1norm(const Tensor& t) {
  double acc = 0.0;
  for (float x : t.data()) acc += std::abs(x);
  return acc;
}

inline double l2norm(const Tensor& t) {
  double acc = 0.0;
  for (float x : t.data()) acc += static_cast<double>(x) * x;
  return std::sqrt(acc);
}

inline Tensor scaled(const Tensor& t, float factor) {
  Tensor out = t;
  for (float& x : out.data()) x *= factor;
  return out;
}

// ---------------------------------------------------------------------------
// "CPTN" tensor records.

inline void write_tensor(std::ostream& os, const Tensor& t) {
  bin::write_magic(os, "CPTN");
  if (t.rank() > 0xFF) throw IoError("tensor rank too large");
  bin::write_u8(os, static_cast<std::uint8_t>(t.rank()));
  for (std::size_t e : t.shape()) bin::write_u32(os, static_cast<std::uint32_t>(e));
  for (float x : t.data()) bin::write_f32(os, x);
}

inline Tensor read_tensor(std::istream& is) {
  bin::expect_magic(is, "CPTN");
  const std::size_t rank = bin::read_u8(is);
  Shape shape(rank);
  for (auto& e : shape) e = bin::read_u32(is);
  std::vector<float> data(shape_size(shape));
  for (float& x : data) x = bin::read_f32(is);
  try {
    return Tensor(std::move(shape), std::move(data));
  } catch (const ShapeError& e) {
    throw IoError(std::string("corrupt tensor record: ") + e.what());
  }
}

inline void save_tensor(const std::filesystem::path& path, const Tensor& t) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open " + path.string() + " for writing");
  write_tensor(os, t);
  if (!os) throw IoError("failed writing " + path.string());
}

inline Tensor load_tensor(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open " + path.string());
  return read_tensor(is);
}

}  // namespace cprobe
