#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <numeric>
#include <optional>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace iff {

using Shape = std::vector<std::size_t>;

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ']';
  return os.str();
}

inline std::size_t shape_volume(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

/// Dense row-major real array of rank 1 to 4.
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(Shape shape, double fill = 0.0) : shape_(std::move(shape)) {
    check_rank();
    data_.assign(shape_volume(shape_), fill);
  }

  Tensor(Shape shape, std::vector<double> data)
      : shape_(std::move(shape)), data_(std::move(data)) {
    check_rank();
    if (shape_volume(shape_) != data_.size())
      throw std::invalid_argument("Tensor: shape " + shape_str(shape_) + " needs " +
                                  std::to_string(shape_volume(shape_)) + " values, got " +
                                  std::to_string(data_.size()));
  }

  static Tensor zeros(Shape shape) { return Tensor(std::move(shape), 0.0); }
  static Tensor ones(Shape shape) { return Tensor(std::move(shape), 1.0); }

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t dim(std::size_t i) const { return shape_.at(i); }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  std::span<const double> data() const noexcept { return data_; }
  std::span<double> data() noexcept { return data_; }
  const std::vector<double>& values() const noexcept { return data_; }

  double operator[](std::size_t i) const { return data_[i]; }
  double& operator[](std::size_t i) { return data_[i]; }

  double& at(std::size_t c, std::size_t h, std::size_t w) {
    return data_[(c * shape_[1] + h) * shape_[2] + w];
  }
  double at(std::size_t c, std::size_t h, std::size_t w) const {
    return data_[(c * shape_[1] + h) * shape_[2] + w];
  }

  /// Same data, different extents; volumes must agree.
  Tensor reshaped(Shape shape) const { return Tensor(std::move(shape), data_); }

  bool operator==(const Tensor&) const = default;

 private:
  void check_rank() const {
    if (shape_.empty() || shape_.size() > 4)
      throw std::invalid_argument("Tensor: rank must be 1..4, got " + std::to_string(shape_.size()));
  }

  Shape shape_;
  std::vector<double> data_;
};

inline void require_finite(const Tensor& t, const char* where) {
  for (double v : t.data())
    if (!std::isfinite(v)) throw std::domain_error(std::string(where) + ": non-finite value in input");
}

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* where) {
  if (a.shape() != b.shape())
    throw std::invalid_argument(std::string(where) + ": shape mismatch " + shape_str(a.shape()) +
                                " vs " + shape_str(b.shape()));
}

enum class PaddingMode { Zero, Circular };

/// Weights [out, in, kH, kW] with optional bias [out]. Kernel extents are odd.
struct ConvFilter {
  Tensor weights;
  std::optional<Tensor> bias;

  ConvFilter() = default;
  explicit ConvFilter(Tensor w, std::optional<Tensor> b = std::nullopt)
      : weights(std::move(w)), bias(std::move(b)) {
    validate();
  }

  std::size_t out_channels() const { return weights.dim(0); }
  std::size_t in_channels() const { return weights.dim(1); }
  std::size_t kh() const { return weights.dim(2); }
  std::size_t kw() const { return weights.dim(3); }

  void validate() const {
    if (weights.rank() != 4)
      throw std::invalid_argument("ConvFilter: weights must be rank 4, got " + shape_str(weights.shape()));
    if (kh() % 2 == 0 || kw() % 2 == 0)
      throw std::invalid_argument("ConvFilter: kernel extents must be odd, got " + shape_str(weights.shape()));
    if (bias && (bias->rank() != 1 || bias->dim(0) != out_channels()))
      throw std::invalid_argument("ConvFilter: bias must have shape [" + std::to_string(out_channels()) + "]");
  }
};

namespace detail {

// Calls fn(dst_begin, src_begin, len) for each contiguous run of dst[c] += src[c + shift].
template <typename Fn>
inline void for_each_run(std::size_t n, std::ptrdiff_t shift, PaddingMode pad, Fn&& fn) {
  const auto sn = static_cast<std::ptrdiff_t>(n);
  if (pad == PaddingMode::Zero) {
    std::ptrdiff_t lo = std::max<std::ptrdiff_t>(0, -shift);
    std::ptrdiff_t hi = std::min<std::ptrdiff_t>(sn, sn - shift);
    if (hi > lo) fn(std::size_t(lo), std::size_t(lo + shift), std::size_t(hi - lo));
    return;
  }
  std::ptrdiff_t s = ((shift % sn) + sn) % sn;
  if (sn - s > 0) fn(std::size_t{0}, std::size_t(s), std::size_t(sn - s));
  if (s > 0) fn(std::size_t(sn - s), std::size_t{0}, std::size_t(s));
}

// Source row for output row r and kernel row offset; nullopt when it falls in the zero border.
inline std::optional<std::size_t> source_index(std::size_t r, std::ptrdiff_t shift, std::size_t n,
                                               PaddingMode pad) {
  auto s = static_cast<std::ptrdiff_t>(r) + shift;
  const auto sn = static_cast<std::ptrdiff_t>(n);
  if (pad == PaddingMode::Zero) {
    if (s < 0 || s >= sn) return std::nullopt;
    return std::size_t(s);
  }
  return std::size_t(((s % sn) + sn) % sn);
}

inline void check_conv_shapes(const Shape& in, const ConvFilter& f, const char* where) {
  if (in.size() != 3)
    throw std::invalid_argument(std::string(where) + ": input must be [C,H,W], got " + shape_str(in));
  if (f.in_channels() != in[0])
    throw std::invalid_argument(std::string(where) + ": filter expects " + std::to_string(f.in_channels()) +
                                " input channels, input has " + std::to_string(in[0]));
  if (f.kh() > in[1] || f.kw() > in[2])
    throw std::invalid_argument(std::string(where) + ": kernel " + shape_str(f.weights.shape()) +
                                " larger than input " + shape_str(in));
}

// Unfolds x [Cin,H,W] into col [(i,a,b), (r,c)] holding x[i, r+a-ph, c+b-pw] (0 in the zero border).
inline std::vector<double> im2col(const Tensor& in, std::size_t kh, std::size_t kw, PaddingMode pad) {
  const std::size_t cin = in.dim(0), H = in.dim(1), W = in.dim(2), P = H * W;
  const auto ph = static_cast<std::ptrdiff_t>(kh / 2), pw = static_cast<std::ptrdiff_t>(kw / 2);
  std::vector<double> col(cin * kh * kw * P, 0.0);
  const double* x = in.data().data();
  for (std::size_t i = 0; i < cin; ++i)
    for (std::size_t a = 0; a < kh; ++a)
      for (std::size_t b = 0; b < kw; ++b) {
        double* dst = col.data() + ((i * kh + a) * kw + b) * P;
        for (std::size_t r = 0; r < H; ++r) {
          auto sr = source_index(r, std::ptrdiff_t(a) - ph, H, pad);
          if (!sr) continue;
          const double* xrow = x + (i * H + *sr) * W;
          double* drow = dst + r * W;
          for_each_run(W, std::ptrdiff_t(b) - pw, pad, [&](std::size_t d, std::size_t s, std::size_t len) {
            std::copy(xrow + s, xrow + s + len, drow + d);
          });
        }
      }
  return col;
}

// Adjoint of im2col: scatters col back onto a [Cin,H,W] tensor.
inline Tensor col2im(const std::vector<double>& col, std::size_t cin, std::size_t H, std::size_t W, std::size_t kh,
                     std::size_t kw, PaddingMode pad) {
  const std::size_t P = H * W;
  const auto ph = static_cast<std::ptrdiff_t>(kh / 2), pw = static_cast<std::ptrdiff_t>(kw / 2);
  Tensor out({cin, H, W});
  double* x = out.data().data();
  for (std::size_t i = 0; i < cin; ++i)
    for (std::size_t a = 0; a < kh; ++a)
      for (std::size_t b = 0; b < kw; ++b) {
        const double* src = col.data() + ((i * kh + a) * kw + b) * P;
        for (std::size_t r = 0; r < H; ++r) {
          auto sr = source_index(r, std::ptrdiff_t(a) - ph, H, pad);
          if (!sr) continue;
          double* xrow = x + (i * H + *sr) * W;
          const double* crow = src + r * W;
          for_each_run(W, std::ptrdiff_t(b) - pw, pad, [&](std::size_t d, std::size_t s, std::size_t len) {
            for (std::size_t c = 0; c < len; ++c) xrow[s + c] += crow[d + c];
          });
        }
      }
  return out;
}

// out[o,r,c] = b[o] + sum_{i,a,b} w[o,i,a,b] * in[i, r+a-ph, c+b-pw]
inline Tensor conv_forward(const Tensor& in, const Tensor& w, const Tensor* bias, PaddingMode pad) {
  const std::size_t H = in.dim(1), W = in.dim(2), P = H * W;
  const std::size_t cout = w.dim(0), K = w.dim(1) * w.dim(2) * w.dim(3);
  const auto col = im2col(in, w.dim(2), w.dim(3), pad);
  Tensor out({cout, H, W});
  const double* wp = w.data().data();
  double* y = out.data().data();
  for (std::size_t o = 0; o < cout; ++o) {
    double* yo = y + o * P;
    if (bias) std::fill(yo, yo + P, (*bias)[o]);
    for (std::size_t k = 0; k < K; ++k) {
      const double wv = wp[o * K + k];
      const double* ck = col.data() + k * P;
      for (std::size_t p = 0; p < P; ++p) yo[p] += wv * ck[p];
    }
  }
  return out;
}

// Adjoint of conv_forward with respect to the input.
inline Tensor conv_backward_input(const Tensor& dy, const Tensor& w, PaddingMode pad) {
  const std::size_t cout = dy.dim(0), H = dy.dim(1), W = dy.dim(2), P = H * W;
  const std::size_t cin = w.dim(1), K = cin * w.dim(2) * w.dim(3);
  std::vector<double> dcol(K * P, 0.0);
  const double* wp = w.data().data();
  const double* g = dy.data().data();
  for (std::size_t k = 0; k < K; ++k) {
    double* dk = dcol.data() + k * P;
    for (std::size_t o = 0; o < cout; ++o) {
      const double wv = wp[o * K + k];
      const double* go = g + o * P;
      for (std::size_t p = 0; p < P; ++p) dk[p] += wv * go[p];
    }
  }
  return col2im(dcol, cin, H, W, w.dim(2), w.dim(3), pad);
}

// Gradient of conv_forward with respect to the weights.
inline Tensor conv_backward_weight(const Tensor& dy, const Tensor& in, const Shape& wshape, PaddingMode pad) {
  const std::size_t cout = dy.dim(0), P = dy.dim(1) * dy.dim(2);
  const std::size_t K = wshape[1] * wshape[2] * wshape[3];
  const auto col = im2col(in, wshape[2], wshape[3], pad);
  Tensor dw(wshape);
  const double* g = dy.data().data();
  for (std::size_t o = 0; o < cout; ++o) {
    const double* go = g + o * P;
    for (std::size_t k = 0; k < K; ++k) {
      const double* ck = col.data() + k * P;
      double acc[4] = {0.0, 0.0, 0.0, 0.0};
      std::size_t p = 0;
      for (; p + 4 <= P; p += 4)
        for (std::size_t j = 0; j < 4; ++j) acc[j] += go[p + j] * ck[p + j];
      for (; p < P; ++p) acc[0] += go[p] * ck[p];
      dw[o * K + k] = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    }
  }
  return dw;
}

}  // namespace detail

/// "Same" 2D convolution (CNN cross-correlation convention) of a [Cin,H,W] input.
inline Tensor conv2d(const Tensor& input, const ConvFilter& filter, PaddingMode pad = PaddingMode::Zero) {
  filter.validate();
  detail::check_conv_shapes(input.shape(), filter, "conv2d");
  require_finite(input, "conv2d");
  require_finite(filter.weights, "conv2d");
  return detail::conv_forward(input, filter.weights, filter.bias ? &*filter.bias : nullptr, pad);
}

inline void require_slope(double slope, const char* where) {
  if (!(slope > 0.0 && slope < 1.0))
    throw std::invalid_argument(std::string(where) + ": Leaky ReLU slope must lie in (0,1), got " +
                                std::to_string(slope));
}

/// h(x) = x for x > 0, slope * x otherwise.
inline Tensor leaky_relu(const Tensor& x, double slope) {
  require_slope(slope, "leaky_relu");
  require_finite(x, "leaky_relu");
  Tensor out = x;
  for (double& v : out.data())
    if (!(v > 0.0)) v *= slope;
  return out;
}

inline double frobenius_norm(const Tensor& x) {
  require_finite(x, "frobenius_norm");
  double s = 0.0;
  for (double v : x.data()) s += v * v;
  return std::sqrt(s);
}

/// a * x + y, elementwise.
inline Tensor axpy(double a, const Tensor& x, const Tensor& y) {
  require_same_shape(x, y, "axpy");
  require_finite(x, "axpy");
  require_finite(y, "axpy");
  Tensor out = y;
  auto xs = x.data();
  auto os = out.data();
  for (std::size_t i = 0; i < os.size(); ++i) os[i] += a * xs[i];
  return out;
}

inline Tensor scaled(const Tensor& x, double a) {
  Tensor out = x;
  for (double& v : out.data()) v *= a;
  return out;
}

/// Non-overlapping 2x2 mean pooling of a [C,H,W] tensor with even H, W.
inline Tensor avg_pool2(const Tensor& x) {
  if (x.rank() != 3 || x.dim(1) % 2 || x.dim(2) % 2)
    throw std::invalid_argument("avg_pool2: need [C,H,W] with even H,W, got " + shape_str(x.shape()));
  const std::size_t C = x.dim(0), H = x.dim(1) / 2, W = x.dim(2) / 2;
  Tensor out({C, H, W});
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t r = 0; r < H; ++r)
      for (std::size_t q = 0; q < W; ++q)
        out.at(c, r, q) = 0.25 * (x.at(c, 2 * r, 2 * q) + x.at(c, 2 * r, 2 * q + 1) +
                                  x.at(c, 2 * r + 1, 2 * q) + x.at(c, 2 * r + 1, 2 * q + 1));
  return out;
}

/// Channel slice [begin, end) of a [C,H,W] tensor.
inline Tensor slice_channels(const Tensor& x, std::size_t begin, std::size_t end) {
  if (x.rank() != 3 || begin >= end || end > x.dim(0))
    throw std::invalid_argument("slice_channels: bad range for " + shape_str(x.shape()));
  const std::size_t plane = x.dim(1) * x.dim(2);
  std::vector<double> v(x.data().begin() + std::ptrdiff_t(begin * plane),
                        x.data().begin() + std::ptrdiff_t(end * plane));
  return Tensor({end - begin, x.dim(1), x.dim(2)}, std::move(v));
}

/// Sum over channels of a [C,H,W] tensor, giving [H,W].
inline Tensor channel_sum(const Tensor& x) {
  if (x.rank() != 3) throw std::invalid_argument("channel_sum: need [C,H,W], got " + shape_str(x.shape()));
  const std::size_t plane = x.dim(1) * x.dim(2);
  Tensor out({x.dim(1), x.dim(2)});
  for (std::size_t c = 0; c < x.dim(0); ++c)
    for (std::size_t i = 0; i < plane; ++i) out[i] += x[c * plane + i];
  return out;
}

}  // namespace iff
