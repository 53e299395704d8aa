#pragma once

#include <cstdint>
#include <ostream>

#include "iff/detector.hpp"

namespace iff {

/// V(Y) = ||Y - Y_N||^2 summed over channels.
inline double lyapunov(std::span<const ComplexTensor> Y, std::span<const ComplexTensor> YN) {
  if (Y.size() != YN.size()) throw std::invalid_argument("lyapunov: channel count mismatch");
  double s = 0.0;
  for (std::size_t c = 0; c < Y.size(); ++c) {
    if (Y[c].shape() != YN[c].shape()) throw std::invalid_argument("lyapunov: shape mismatch");
    for (std::size_t i = 0; i < Y[c].size(); ++i) s += std::norm(Y[c][i] - YN[c][i]);
  }
  return s;
}

inline double lyapunov(const ComplexTensor& Y, const ComplexTensor& YN) {
  return lyapunov(std::span<const ComplexTensor>(&Y, 1), std::span<const ComplexTensor>(&YN, 1));
}

/// x^[0] = n + delta, with the spectra the stability analysis needs.
struct IdealFeatureModel {
  Tensor n;
  Tensor delta;
  std::vector<ComplexTensor> N;
  std::vector<ComplexTensor> Delta;

  /// Splits x0 into the supplied ideal map n and the residual noise.
  static IdealFeatureModel from_observation(const Tensor& n, const Tensor& x0) {
    require_same_shape(n, x0, "IdealFeatureModel");
    IdealFeatureModel m;
    m.n = n;
    m.delta = axpy(-1.0, n, x0);
    m.N = dft2_channels(as_channels(n));
    m.Delta = dft2_channels(as_channels(m.delta));
    return m;
  }

  static Tensor as_channels(const Tensor& t) {
    return t.rank() == 2 ? t.reshaped({1, t.dim(0), t.dim(1)}) : t;
  }
};

/// Coefficients of the quadratic bound V'(Y^[k]) <= A ||X^[k]||^2 + B ||X^[k]|| + C.
struct StabilityConstants {
  double A = 0.0, B = 0.0, C = 0.0;
  std::optional<double> epsilon;  ///< threshold on ||X^[k] - N||; only when A < 0
  double w1_norm = 0.0, w2_norm = 0.0, n_norm = 0.0, delta_norm = 0.0;
};

/// A = |W1|^2 (|W1|^2 |W2|^2 - 1),  B = 2 (|W1|^2 |N| + |W1|^3 |Delta| |W2|),  C = |W1|^2 (|Delta|^2 - |N|^2).
/// Filter norms use the max-norm 2D slice embedded at the feature extent.
inline StabilityConstants stability_constants(const ConvFilter& w1, const ConvFilter& w2, const Tensor& n,
                                              const Tensor& delta) {
  require_same_shape(n, delta, "stability_constants");
  const Tensor nc = IdealFeatureModel::as_channels(n);
  const std::size_t H = nc.dim(1), W = nc.dim(2);
  StabilityConstants s;
  s.w1_norm = filter_spectral_norm(w1, H, W);
  if (!(s.w1_norm > 0.0)) throw std::invalid_argument("stability_constants: w1 has zero norm");
  s.w2_norm = filter_spectral_norm(w2, H, W);
  s.n_norm = frobenius_norm(std::span<const ComplexTensor>(dft2_channels(nc)));
  s.delta_norm = frobenius_norm(std::span<const ComplexTensor>(dft2_channels(IdealFeatureModel::as_channels(delta))));
  const double a2 = s.w1_norm * s.w1_norm, b2 = s.w2_norm * s.w2_norm;
  s.A = a2 * (a2 * b2 - 1.0);
  s.B = 2.0 * (a2 * s.n_norm + a2 * s.w1_norm * s.delta_norm * s.w2_norm);
  s.C = a2 * (s.delta_norm * s.delta_norm - s.n_norm * s.n_norm);
  if (s.A < 0.0) {
    const double disc = s.B * s.B - 4.0 * s.A * s.C;
    if (disc < 0.0) {
      s.epsilon = 0.0;
    } else {
      // larger root; beyond it the quadratic is negative. ||X|| >= ||X - N|| - ||N|| moves it to a deviation bound.
      const double root = (-s.B - std::sqrt(disc)) / (2.0 * s.A);
      s.epsilon = std::max(0.0, root + s.n_norm);
    }
  }
  return s;
}

inline StabilityConstants stability_constants(const ConvFilter& w1, const ConvFilter& w2, const IdealFeatureModel& m) {
  return stability_constants(w1, w2, m.n, m.delta);
}

struct StabilityStep {
  std::uint32_t k = 0;
  double V = 0.0;           ///< V(Y^[k])
  double V_prime = 0.0;     ///< V(Y^[k+1]) - V(Y^[k])
  double bound = 0.0;       ///< A ||X^[k]||^2 + B ||X^[k]|| + C
  double slack = 0.0;       ///< bound - V_prime
  double deviation = 0.0;   ///< ||X^[k] - N||
  double x_norm = 0.0;      ///< ||X^[k]||
  bool violation = false;
  bool beyond_epsilon = false;
};

struct StabilityReport {
  StabilityConstants constants;
  bool hypothesis_met = false;  ///< A < 0
  std::vector<double> V_trajectory;
  std::vector<StabilityStep> steps;
  std::size_t violations = 0;            ///< trajectory steps with slack < -1e-6 relative
  std::size_t conclusion_checks = 0;     ///< states with ||X - N|| > epsilon (trajectory and probes)
  std::size_t conclusion_failures = 0;   ///< of those, states where V increased
  std::size_t probes = 0;
  std::size_t probe_bound_failures = 0;  ///< informational: the quadratic bound off the trajectory
  double min_relative_slack = 0.0;
};

inline constexpr double kBoundRelTol = 1e-6;

namespace detail {

struct StepEval {
  double V_now, V_next, bound, deviation, x_norm;
};

inline StepEval evaluate_step(const Tensor& xk, const Tensor& yk, const Tensor& yk1, const IdealFeatureModel& ideal,
                              const std::vector<ComplexTensor>& YN, const StabilityConstants& s) {
  auto Y = dft2_channels(yk);
  auto Y1 = dft2_channels(yk1);
  auto X = dft2_channels(xk);
  StepEval e;
  e.V_now = lyapunov(Y, YN);
  e.V_next = lyapunov(Y1, YN);
  e.x_norm = frobenius_norm(std::span<const ComplexTensor>(X));
  double dev = 0.0;
  for (std::size_t c = 0; c < X.size(); ++c) {
    double d = frobenius_norm(X[c] - ideal.N[c]);
    dev += d * d;
  }
  e.deviation = std::sqrt(dev);
  e.bound = s.A * e.x_norm * e.x_norm + s.B * e.x_norm + s.C;
  return e;
}

inline double relative_slack(double bound, double v_prime) {
  const double scale = std::max({std::abs(bound), std::abs(v_prime), 1e-300});
  return (bound - v_prime) / scale;
}

}  // namespace detail

/// Runs the loop in circular mode for `steps` iterations and checks the quadratic bound on every
/// step. `probes` extra one-step evaluations start from n + r with ||R|| spread around epsilon,
/// so the decrease claim beyond epsilon is exercised away from the trajectory too.
inline StabilityReport bound_check(const Tensor& x0, const ConvFilter& w1, const ConvFilter& w2, const IffConfig& cfg,
                                   const IdealFeatureModel& ideal, std::uint32_t steps, std::uint32_t probes = 0,
                                   std::uint64_t seed = 0) {
  if (cfg.pad != PaddingMode::Circular)
    throw std::invalid_argument("bound_check: the spectral identities need circular padding");
  const Tensor x0c = IdealFeatureModel::as_channels(x0);
  const ConvFilter fb = cfg.enforce_contraction ? contraction_rescale(w1, w2, x0c.dim(1), x0c.dim(2)) : w2;
  IffConfig run = cfg;
  run.enforce_contraction = false;
  run.iterations = steps;

  StabilityReport rep;
  rep.constants = stability_constants(w1, fb, ideal);
  rep.hypothesis_met = rep.constants.A < 0.0;
  const auto YN = dft2_channels(conv2d(IdealFeatureModel::as_channels(ideal.n), w1, PaddingMode::Circular));

  auto traj = iff_forward(x0c, w1, fb, run);
  for (const auto& st : traj.states) rep.V_trajectory.push_back(lyapunov(dft2_channels(st.y), YN));
  rep.min_relative_slack = std::numeric_limits<double>::infinity();

  auto check_conclusion = [&](double deviation, double v_now, double v_next) {
    if (!rep.constants.epsilon || !(deviation > *rep.constants.epsilon)) return false;
    ++rep.conclusion_checks;
    if (v_next > v_now + 1e-9 * std::max(v_now, 1e-300)) ++rep.conclusion_failures;
    return true;
  };

  for (std::uint32_t k = 0; k < steps; ++k) {
    const auto e = detail::evaluate_step(traj.states[k].x, traj.states[k].y, traj.states[k + 1].y, ideal, YN, rep.constants);
    StabilityStep st;
    st.k = k;
    st.V = e.V_now;
    st.V_prime = e.V_next - e.V_now;
    st.bound = e.bound;
    st.slack = e.bound - st.V_prime;
    st.deviation = e.deviation;
    st.x_norm = e.x_norm;
    const double rel = detail::relative_slack(e.bound, st.V_prime);
    rep.min_relative_slack = std::min(rep.min_relative_slack, rel);
    st.violation = rep.hypothesis_met && rel < -kBoundRelTol;
    rep.violations += st.violation;
    if (rep.hypothesis_met) st.beyond_epsilon = check_conclusion(e.deviation, e.V_now, e.V_next);
    rep.steps.push_back(st);
  }

  if (rep.hypothesis_met && rep.constants.epsilon && probes > 0) {
    Rng rng(seed);
    const double eps = std::max(*rep.constants.epsilon, 1e-12);
    const Tensor nc = IdealFeatureModel::as_channels(ideal.n);
    for (std::uint32_t p = 0; p < probes; ++p) {
      Tensor r(nc.shape());
      for (double& v : r.data()) v = rng.normal();
      const double rn = frobenius_norm(std::span<const ComplexTensor>(dft2_channels(r)));
      const double target = eps * std::pow(10.0, rng.uniform(-1.0, 1.0));
      const Tensor xk = axpy(target / rn, r, nc);
      const Tensor yk = conv2d(xk, w1, PaddingMode::Circular);
      const Tensor xk1 = axpy(1.0, conv2d(leaky_relu(yk, cfg.slope), fb, PaddingMode::Circular), x0c);
      const Tensor yk1 = conv2d(xk1, w1, PaddingMode::Circular);
      const auto e = detail::evaluate_step(xk, yk, yk1, ideal, YN, rep.constants);
      ++rep.probes;
      if (detail::relative_slack(e.bound, e.V_next - e.V_now) < -kBoundRelTol) ++rep.probe_bound_failures;
      check_conclusion(e.deviation, e.V_now, e.V_next);
    }
  }
  if (rep.steps.empty()) rep.min_relative_slack = 0.0;
  return rep;
}

inline void write_stability_csv(std::ostream& os, const StabilityReport& r) {
  os << "k,V,V_prime,bound,slack\n";
  char buf[256];
  for (const auto& s : r.steps) {
    std::snprintf(buf, sizeof buf, "%u,%.17g,%.17g,%.17g,%.17g\n", s.k, s.V, s.V_prime, s.bound, s.slack);
    os << buf;
  }
  char eps[32] = "none";
  if (r.constants.epsilon) std::snprintf(eps, sizeof eps, "%.17g", *r.constants.epsilon);
  std::snprintf(buf, sizeof buf, "# summary A=%.17g B=%.17g C=%.17g epsilon=%s violations=%zu\n", r.constants.A,
                r.constants.B, r.constants.C, eps, r.violations);
  os << buf;
}

/// Channel sum, then min-max normalisation to [0,1]. A constant map normalises to all zeros.
inline Tensor normalized_energy(const Tensor& feature) {
  Tensor s = channel_sum(IdealFeatureModel::as_channels(feature));
  const auto [lo, hi] = std::minmax_element(s.data().begin(), s.data().end());
  const double mn = *lo, range = *hi - *lo;
  for (double& v : s.data()) v = range > 0.0 ? (v - mn) / range : 0.0;
  return s;
}

/// [H,W] mask: 1 where the cell centre lies inside a ground-truth box.
inline Tensor foreground_mask(const std::vector<SceneObject>& objects, std::size_t H, std::size_t W, double cell) {
  Tensor m({H, W});
  for (std::size_t r = 0; r < H; ++r)
    for (std::size_t c = 0; c < W; ++c) {
      const double py = (double(r) + 0.5) * cell, px = (double(c) + 0.5) * cell;
      for (const auto& o : objects)
        if (px >= o.box.x && px < o.box.x + o.box.w && py >= o.box.y && py < o.box.y + o.box.h) m[r * W + c] = 1.0;
    }
  return m;
}

struct EnergyHistogram {
  std::vector<double> bin_centers;
  std::vector<double> bg;  ///< probability mass per bin
  std::vector<double> fg;
  bool bg_empty = true;
  bool fg_empty = true;
  double bg_mean = 0.0;  ///< mean normalised value over background pixels
  double fg_mean = 0.0;
};

inline EnergyHistogram energy_histogram(const std::vector<Tensor>& features, const std::vector<Tensor>& masks,
                                        std::size_t bins = 50) {
  if (features.size() != masks.size()) throw std::invalid_argument("energy_histogram: one mask per feature map");
  if (bins == 0) throw std::invalid_argument("energy_histogram: bins must be positive");
  EnergyHistogram h;
  h.bg.assign(bins, 0.0);
  h.fg.assign(bins, 0.0);
  for (std::size_t b = 0; b < bins; ++b) h.bin_centers.push_back((double(b) + 0.5) / double(bins));
  std::size_t nbg = 0, nfg = 0;
  for (std::size_t i = 0; i < features.size(); ++i) {
    const Tensor e = normalized_energy(features[i]);
    if (masks[i].shape() != e.shape())
      throw std::invalid_argument("energy_histogram: mask " + shape_str(masks[i].shape()) + " does not match feature " +
                                  shape_str(e.shape()));
    for (std::size_t p = 0; p < e.size(); ++p) {
      const auto b = std::min(bins - 1, std::size_t(e[p] * double(bins)));
      if (masks[i][p] > 0.5) {
        h.fg[b] += 1.0;
        h.fg_mean += e[p];
        ++nfg;
      } else {
        h.bg[b] += 1.0;
        h.bg_mean += e[p];
        ++nbg;
      }
    }
  }
  h.bg_empty = nbg == 0;
  h.fg_empty = nfg == 0;
  for (auto& v : h.bg) v = nbg ? v / double(nbg) : 0.0;
  for (auto& v : h.fg) v = nfg ? v / double(nfg) : 0.0;
  h.bg_mean = nbg ? h.bg_mean / double(nbg) : 0.0;
  h.fg_mean = nfg ? h.fg_mean / double(nfg) : 0.0;
  return h;
}

inline void write_histogram_csv(std::ostream& os, const EnergyHistogram& h) {
  os << "bin_center,bg_mass,fg_mass\n";
  char buf[128];
  for (std::size_t b = 0; b < h.bin_centers.size(); ++b) {
    std::snprintf(buf, sizeof buf, "%.6f,%.17g,%.17g\n", h.bin_centers[b], h.bg[b], h.fg[b]);
    os << buf;
  }
}

/// Energy statistics of x^[0] ("without") and x^[M_I] ("with") over a scene set.
struct FeatureComparison {
  EnergyHistogram without_iff;
  EnergyHistogram with_iff;
};

inline FeatureComparison compare_features(const DetectorModel& m, const std::vector<SyntheticScene>& scenes,
                                          std::size_t bins = 50) {
  std::vector<Tensor> before, after, masks;
  for (const auto& s : scenes) {
    auto traj = detector_forward(m, s.image, m.config);
    before.push_back(traj.states.front().x);
    after.push_back(traj.final_feature());
    masks.push_back(foreground_mask(s.objects, kGrid, kGrid, double(kCell)));
  }
  return {energy_histogram(before, masks, bins), energy_histogram(after, masks, bins)};
}

/// 8-bit grayscale raster.
struct GrayImage {
  std::size_t width = 0, height = 0;
  std::vector<std::uint8_t> pixels;  ///< row-major
  bool operator==(const GrayImage&) const = default;
};

/// Channel sum, min-max normalisation, nearest-neighbour upsampling, 8-bit quantisation.
inline GrayImage heatmap_export(const Tensor& feature, std::size_t out_h, std::size_t out_w) {
  if (feature.rank() != 3) throw std::invalid_argument("heatmap_export: feature must be [C,H,W]");
  if (out_h == 0 || out_w == 0) throw std::invalid_argument("heatmap_export: empty output size");
  const Tensor e = normalized_energy(feature);
  const std::size_t H = e.dim(0), W = e.dim(1);
  GrayImage img{out_w, out_h, std::vector<std::uint8_t>(out_w * out_h)};
  for (std::size_t r = 0; r < out_h; ++r)
    for (std::size_t c = 0; c < out_w; ++c) {
      const double v = e[(r * H / out_h) * W + (c * W / out_w)];
      img.pixels[r * out_w + c] = static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
    }
  return img;
}

/// Binary PGM (P5), maxval 255.
inline void write_pgm(std::ostream& os, const GrayImage& img) {
  os << "P5\n" << img.width << ' ' << img.height << "\n255\n";
  os.write(reinterpret_cast<const char*>(img.pixels.data()), std::streamsize(img.pixels.size()));
}

}  // namespace iff
