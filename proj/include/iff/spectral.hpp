#pragma once

#include <complex>
#include <numbers>

#include "iff/tensor.hpp"

namespace iff {

using cplx = std::complex<double>;

/// Row-major [H,W] array of complex values; holds 2D spectra.
class ComplexTensor {
 public:
  ComplexTensor() = default;
  ComplexTensor(std::size_t h, std::size_t w) : h_(h), w_(w), data_(h * w) {}
  ComplexTensor(std::size_t h, std::size_t w, std::vector<cplx> data) : h_(h), w_(w), data_(std::move(data)) {
    if (data_.size() != h * w) throw std::invalid_argument("ComplexTensor: extents do not match data length");
  }

  std::size_t rows() const noexcept { return h_; }
  std::size_t cols() const noexcept { return w_; }
  std::size_t size() const noexcept { return data_.size(); }
  Shape shape() const { return {h_, w_}; }

  cplx& operator()(std::size_t r, std::size_t c) { return data_[r * w_ + c]; }
  cplx operator()(std::size_t r, std::size_t c) const { return data_[r * w_ + c]; }
  cplx& operator[](std::size_t i) { return data_[i]; }
  cplx operator[](std::size_t i) const { return data_[i]; }

  std::span<const cplx> data() const noexcept { return data_; }
  std::span<cplx> data() noexcept { return data_; }

  bool operator==(const ComplexTensor&) const = default;

 private:
  std::size_t h_ = 0, w_ = 0;
  std::vector<cplx> data_;
};

inline double frobenius_norm(const ComplexTensor& x) {
  double s = 0.0;
  for (const cplx& v : x.data()) s += std::norm(v);
  return std::sqrt(s);
}

/// Root-sum-square of per-channel spectra.
inline double frobenius_norm(std::span<const ComplexTensor> channels) {
  double s = 0.0;
  for (const auto& c : channels) {
    double n = frobenius_norm(c);
    s += n * n;
  }
  return std::sqrt(s);
}

inline ComplexTensor operator-(const ComplexTensor& a, const ComplexTensor& b) {
  if (a.shape() != b.shape()) throw std::invalid_argument("ComplexTensor: shape mismatch");
  ComplexTensor out = a;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= b[i];
  return out;
}

inline ComplexTensor hadamard(const ComplexTensor& a, const ComplexTensor& b) {
  if (a.shape() != b.shape()) throw std::invalid_argument("hadamard: shape mismatch");
  ComplexTensor out = a;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= b[i];
  return out;
}

namespace detail {

// exp(sign * 2 pi i k / n) for k in [0, n), exact index reduction keeps the table symmetric.
inline std::vector<cplx> twiddles(std::size_t n, double sign) {
  std::vector<cplx> t(n);
  for (std::size_t k = 0; k < n; ++k) {
    double ang = sign * 2.0 * std::numbers::pi * double(k) / double(n);
    t[k] = {std::cos(ang), std::sin(ang)};
  }
  return t;
}

// Direct O(n^2) 1D DFT.
inline void dft1(std::span<const cplx> in, std::span<cplx> out, const std::vector<cplx>& tw) {
  const std::size_t n = in.size();
  for (std::size_t k = 0; k < n; ++k) {
    cplx acc{0.0, 0.0};
    for (std::size_t j = 0; j < n; ++j) acc += in[j] * tw[(k * j) % n];
    out[k] = acc;
  }
}

inline bool is_pow2(std::size_t n) { return n && !(n & (n - 1)); }

// In-place iterative radix-2 Cooley-Tukey.
inline void fft1(std::span<cplx> a, double sign) {
  const std::size_t n = a.size();
  for (std::size_t i = 1, j = 0; i < n; ++i) {
    std::size_t bit = n >> 1;
    for (; j & bit; bit >>= 1) j ^= bit;
    j ^= bit;
    if (i < j) std::swap(a[i], a[j]);
  }
  auto tw = twiddles(n, sign);
  for (std::size_t len = 2; len <= n; len <<= 1) {
    const std::size_t step = n / len;
    for (std::size_t i = 0; i < n; i += len) {
      for (std::size_t k = 0; k < len / 2; ++k) {
        cplx u = a[i + k];
        cplx v = a[i + k + len / 2] * tw[k * step];
        a[i + k] = u + v;
        a[i + k + len / 2] = u - v;
      }
    }
  }
}

template <typename Row1D>
inline ComplexTensor separable(const ComplexTensor& x, Row1D&& transform) {
  const std::size_t H = x.rows(), W = x.cols();
  ComplexTensor tmp(H, W), out(H, W);
  std::vector<cplx> buf_in, buf_out;
  buf_in.resize(W);
  buf_out.resize(W);
  for (std::size_t r = 0; r < H; ++r) {
    for (std::size_t c = 0; c < W; ++c) buf_in[c] = x(r, c);
    transform(buf_in, buf_out);
    for (std::size_t c = 0; c < W; ++c) tmp(r, c) = buf_out[c];
  }
  buf_in.resize(H);
  buf_out.resize(H);
  for (std::size_t c = 0; c < W; ++c) {
    for (std::size_t r = 0; r < H; ++r) buf_in[r] = tmp(r, c);
    transform(buf_in, buf_out);
    for (std::size_t r = 0; r < H; ++r) out(r, c) = buf_out[r];
  }
  return out;
}

inline ComplexTensor to_complex(const Tensor& x) {
  if (x.rank() != 2) throw std::invalid_argument("dft2: input must be rank 2, got " + shape_str(x.shape()));
  require_finite(x, "dft2");
  ComplexTensor c(x.dim(0), x.dim(1));
  for (std::size_t i = 0; i < x.size(); ++i) c[i] = x[i];
  return c;
}

inline ComplexTensor dft2_direct(const ComplexTensor& x, double sign) {
  auto tw_w = twiddles(x.cols(), sign);
  auto tw_h = twiddles(x.rows(), sign);
  return separable(x, [&](std::span<const cplx> in, std::span<cplx> out) {
    dft1(in, out, in.size() == tw_w.size() ? tw_w : tw_h);
  });
}

}  // namespace detail

/// Unnormalized 2D DFT: X[u,v] = sum x[r,c] exp(-2 pi i (u r / H + v c / W)).
/// Direct summation along each axis.
inline ComplexTensor dft2(const Tensor& x) { return detail::dft2_direct(detail::to_complex(x), -1.0); }

inline ComplexTensor dft2(const ComplexTensor& x) { return detail::dft2_direct(x, -1.0); }

/// Inverse of dft2, including the 1/(HW) factor.
inline ComplexTensor idft2(const ComplexTensor& X) {
  ComplexTensor out = detail::dft2_direct(X, +1.0);
  const double s = 1.0 / double(X.size());
  for (auto& v : out.data()) v *= s;
  return out;
}

/// Radix-2 path for power-of-two extents; agrees with dft2.
inline ComplexTensor fft2(const Tensor& x) {
  if (x.rank() != 2 || !detail::is_pow2(x.dim(0)) || !detail::is_pow2(x.dim(1)))
    throw std::invalid_argument("fft2: needs rank-2 power-of-two extents, got " + shape_str(x.shape()));
  return detail::separable(detail::to_complex(x), [](std::span<const cplx> in, std::span<cplx> out) {
    std::copy(in.begin(), in.end(), out.begin());
    detail::fft1(out, -1.0);
  });
}

/// Per-channel dft2 of a [C,H,W] tensor.
inline std::vector<ComplexTensor> dft2_channels(const Tensor& x) {
  if (x.rank() == 2) return {dft2(x)};
  if (x.rank() != 3) throw std::invalid_argument("dft2_channels: need [C,H,W], got " + shape_str(x.shape()));
  std::vector<ComplexTensor> out;
  out.reserve(x.dim(0));
  for (std::size_t c = 0; c < x.dim(0); ++c) out.push_back(dft2(slice_channels(x, c, c + 1).reshaped({x.dim(1), x.dim(2)})));
  return out;
}

struct EnergyPair {
  double spatial = 0.0;
  double spectral_over_n = 0.0;
};

/// Both sides of Parseval's identity: sum |x|^2 and (1/HW) sum |X|^2.
inline EnergyPair spectral_energy(const Tensor& x) {
  if (x.rank() != 2) throw std::invalid_argument("spectral_energy: input must be rank 2");
  EnergyPair e;
  for (double v : x.data()) e.spatial += v * v;
  auto X = dft2(x);
  for (const auto& v : X.data()) e.spectral_over_n += std::norm(v);
  e.spectral_over_n /= double(x.size());
  return e;
}

struct Theorem1Report {
  double lhs = 0.0;  ///< ||F(h(x))||
  double rhs = 0.0;  ///< ||F(x)||
  bool holds = false;
};

/// Checks that Leaky ReLU does not increase spectral energy.
inline Theorem1Report theorem1_check(const Tensor& x, double slope) {
  require_slope(slope, "theorem1_check");
  if (x.rank() != 2) throw std::invalid_argument("theorem1_check: input must be rank 2");
  Theorem1Report r;
  r.lhs = frobenius_norm(dft2(leaky_relu(x, slope)));
  r.rhs = frobenius_norm(dft2(x));
  r.holds = r.lhs <= r.rhs + 1e-9 * r.rhs;
  return r;
}

/// Places a kH x kW kernel into an H x W array, flipped and centred on the origin, so that
/// dft2(circular conv2d(x, f)) == dft2(x) * dft2(embed_kernel(f, H, W)).
inline Tensor embed_kernel(const Tensor& f, std::size_t H, std::size_t W) {
  if (f.rank() != 2) throw std::invalid_argument("embed_kernel: kernel must be rank 2");
  const std::size_t kh = f.dim(0), kw = f.dim(1);
  if (kh > H || kw > W) throw std::invalid_argument("embed_kernel: kernel larger than target extent");
  Tensor e({H, W});
  for (std::size_t a = 0; a < kh; ++a)
    for (std::size_t b = 0; b < kw; ++b) {
      std::size_t r = (kh / 2 + H - a) % H;
      std::size_t c = (kw / 2 + W - b) % W;
      e[r * W + c] += f[a * kw + b];
    }
  return e;
}

/// Single-channel same-size convolution of two rank-2 tensors.
inline Tensor conv2d_plane(const Tensor& x, const Tensor& f, PaddingMode pad) {
  if (x.rank() != 2 || f.rank() != 2) throw std::invalid_argument("conv2d_plane: rank-2 inputs required");
  ConvFilter cf(f.reshaped({1, 1, f.dim(0), f.dim(1)}));
  return conv2d(x.reshaped({1, x.dim(0), x.dim(1)}), cf, pad).reshaped({x.dim(0), x.dim(1)});
}

struct ConvTheoremReport {
  double max_abs_diff = 0.0;
  double rel_diff = 0.0;  ///< max_abs_diff / max |rhs|
  bool holds = false;
};

/// Compares dft2(conv(x, f)) against dft2(x) * dft2(embed(f)) elementwise.
inline ConvTheoremReport circular_conv_theorem_check(const Tensor& x, const Tensor& f,
                                                     PaddingMode pad = PaddingMode::Circular) {
  auto lhs = dft2(conv2d_plane(x, f, pad));
  auto rhs = hadamard(dft2(x), dft2(embed_kernel(f, x.dim(0), x.dim(1))));
  ConvTheoremReport r;
  double scale = 0.0;
  for (std::size_t i = 0; i < lhs.size(); ++i) {
    r.max_abs_diff = std::max(r.max_abs_diff, std::abs(lhs[i] - rhs[i]));
    scale = std::max(scale, std::abs(rhs[i]));
  }
  r.rel_diff = scale > 0.0 ? r.max_abs_diff / scale : r.max_abs_diff;
  r.holds = r.rel_diff <= 1e-8;
  return r;
}

/// The kH x kW slice w[o,i,:,:] of largest Frobenius norm; ties go to the lowest (o,i).
inline Tensor max_norm_slice(const ConvFilter& f) {
  f.validate();
  const std::size_t kh = f.kh(), kw = f.kw(), plane = kh * kw;
  const std::size_t n = f.out_channels() * f.in_channels();
  if (n == 0) throw std::invalid_argument("max_norm_slice: filter has no slices");
  std::size_t best = 0;
  double best_norm = -1.0;
  for (std::size_t s = 0; s < n; ++s) {
    double acc = 0.0;
    for (std::size_t j = 0; j < plane; ++j) acc += f.weights[s * plane + j] * f.weights[s * plane + j];
    if (acc > best_norm) {
      best_norm = acc;
      best = s;
    }
  }
  std::vector<double> v(f.weights.data().begin() + std::ptrdiff_t(best * plane),
                        f.weights.data().begin() + std::ptrdiff_t((best + 1) * plane));
  return Tensor({kh, kw}, std::move(v));
}

/// ||dft2(embed(max_norm_slice(f)))|| at feature extent H x W.
inline double filter_spectral_norm(const ConvFilter& f, std::size_t H, std::size_t W) {
  return frobenius_norm(dft2(embed_kernel(max_norm_slice(f), H, W)));
}

}  // namespace iff
