#pragma once

#include <limits>
#include <numeric>

#include "iff/analysis.hpp"
#include "iff/detector.hpp"

namespace iff {

/// Outcome of one randomized invariant sweep.
struct SuiteReport {
  std::string suite;
  std::size_t trials = 0;   ///< checks performed
  std::size_t violations = 0;
  std::size_t skipped = 0;  ///< e.g. kink-adjacent gradient coordinates
  double worst = 0.0;       ///< largest gap or error; smallest relative slack for theorem2
  std::string csv_header = {};
  std::vector<std::string> csv_rows = {};

  bool passed() const { return violations == 0; }
};

inline const std::vector<std::string>& verify_suites() {
  static const std::vector<std::string> names = {"parseval", "theorem1", "theorem2", "convtheorem", "gradcheck"};
  return names;
}

namespace detail {

inline Tensor random_plane(Rng& rng, std::size_t H, std::size_t W, double scale = 1.0) {
  Tensor t({H, W});
  for (double& v : t.data()) v = rng.normal(0.0, scale);
  return t;
}

inline std::string fmt_row(std::initializer_list<double> values) {
  std::string s;
  char buf[64];
  for (double v : values) {
    std::snprintf(buf, sizeof buf, "%.17g", v);
    if (!s.empty()) s += ',';
    s += buf;
  }
  return s;
}

/// Signs of every Leaky ReLU input on the tape, flattened.
inline std::vector<signed char> kink_pattern(const GradTape& tape) {
  std::vector<signed char> out;
  for (std::size_t i = 0; i < tape.size(); ++i) {
    const auto& n = tape.node(i);
    if (n.kind != OpKind::LeakyRelu) continue;
    for (double v : tape.value(n.inputs[0]).data()) {
      out.push_back(v > 0.0 ? 1 : (v < 0.0 ? -1 : 0));
    }
  }
  return out;
}

}  // namespace detail

/// Lemma 1: sum |x|^2 == (1/HW) sum |X|^2 on random tensors with sides in [4, 64].
inline SuiteReport verify_parseval(std::size_t trials, std::uint64_t seed) {
  SuiteReport r{"parseval"};
  r.csv_header = "trial,H,W,relative_gap";
  Rng rng(seed);
  for (std::size_t t = 0; t < trials; ++t) {
    const auto H = std::size_t(rng.uniform_int(4, 64)), W = std::size_t(rng.uniform_int(4, 64));
    const auto e = spectral_energy(detail::random_plane(rng, H, W, std::pow(10.0, rng.uniform(-3, 3))));
    const double gap = std::abs(e.spatial - e.spectral_over_n) / e.spatial;
    r.worst = std::max(r.worst, gap);
    ++r.trials;
    r.violations += !(gap < 1e-9);
    r.csv_rows.push_back(detail::fmt_row({double(t), double(H), double(W), gap}));
  }
  return r;
}

/// Theorem 1: ||F(h(x))|| <= ||F(x)|| for each slope in {0.01, 0.1, 0.5, 0.9}.
inline SuiteReport verify_theorem1(std::size_t trials, std::uint64_t seed) {
  SuiteReport r{"theorem1"};
  r.csv_header = "trial,slope,lhs,rhs";
  Rng rng(seed);
  for (std::size_t t = 0; t < trials; ++t) {
    const auto H = std::size_t(rng.uniform_int(2, 32)), W = std::size_t(rng.uniform_int(2, 32));
    Tensor x = detail::random_plane(rng, H, W);
    if (t % 10 == 0)
      for (double& v : x.data()) v = std::abs(v);
    for (double slope : {0.01, 0.1, 0.5, 0.9}) {
      const auto c = theorem1_check(x, slope);
      ++r.trials;
      r.violations += !c.holds;
      r.worst = std::max(r.worst, (c.lhs - c.rhs) / c.rhs);
      r.csv_rows.push_back(detail::fmt_row({double(t), slope, c.lhs, c.rhs}));
    }
  }
  return r;
}

/// One random single-channel contraction-enforced configuration for the stability analysis.
struct StabilityCase {
  Tensor n;
  Tensor x0;
  ConvFilter w1;
  ConvFilter w2;
};

inline StabilityCase random_stability_case(Rng& rng) {
  const auto H = std::size_t(rng.uniform_int(4, 16)), W = std::size_t(rng.uniform_int(4, 16));
  const std::size_t k = rng.uniform_int(0, 1) ? 3 : 1;
  StabilityCase c;
  Tensor w1({1, 1, k, k}), w2({1, 1, k, k});
  for (double& v : w1.data()) v = rng.normal();
  const double s2 = std::pow(10.0, rng.uniform(-3, 1));
  for (double& v : w2.data()) v = rng.normal(0.0, s2);
  c.w1 = ConvFilter(w1);
  c.w2 = contraction_rescale(c.w1, ConvFilter(w2), H, W);
  c.n = detail::random_plane(rng, H, W).reshaped({1, H, W});
  const Tensor d = detail::random_plane(rng, H, W, std::pow(10.0, rng.uniform(-1, 1.5))).reshaped({1, H, W});
  c.x0 = axpy(1.0, d, c.n);
  return c;
}

/// Theorem 2 on random configurations: A < 0, the quadratic bound on every trajectory step,
/// and V non-increasing wherever ||X - N|| > eps (trajectory and perturbed probes).
inline SuiteReport verify_theorem2(std::size_t trials, std::uint64_t seed, std::uint32_t steps = 20,
                                   std::uint32_t probes = 12) {
  SuiteReport r{"theorem2"};
  r.worst = std::numeric_limits<double>::infinity();
  r.csv_header = "trial,A,B,C,epsilon,min_relative_slack,violations,conclusion_checks,conclusion_failures,probe_bound_failures";
  Rng rng(seed);
  IffConfig cfg;
  cfg.pad = PaddingMode::Circular;
  for (std::size_t t = 0; t < trials; ++t) {
    const auto c = random_stability_case(rng);
    const auto ideal = IdealFeatureModel::from_observation(c.n, c.x0);
    const auto rep = bound_check(c.x0, c.w1, c.w2, cfg, ideal, steps, probes, rng.next());
    ++r.trials;
    const bool bad = !rep.hypothesis_met || rep.violations > 0 || rep.conclusion_failures > 0;
    r.violations += bad;
    r.worst = std::min(r.worst, rep.min_relative_slack);
    r.csv_rows.push_back(detail::fmt_row({double(t), rep.constants.A, rep.constants.B, rep.constants.C,
                                          rep.constants.epsilon.value_or(-1.0), rep.min_relative_slack,
                                          double(rep.violations), double(rep.conclusion_checks),
                                          double(rep.conclusion_failures), double(rep.probe_bound_failures)}));
  }
  return r;
}

/// Convolution theorem under circular padding.
inline SuiteReport verify_convtheorem(std::size_t trials, std::uint64_t seed) {
  SuiteReport r{"convtheorem"};
  r.csv_header = "trial,H,W,k,relative_diff";
  Rng rng(seed);
  for (std::size_t t = 0; t < trials; ++t) {
    const auto H = std::size_t(rng.uniform_int(3, 24)), W = std::size_t(rng.uniform_int(3, 24));
    const std::size_t kmax = std::min<std::size_t>({H, W, 7});
    const std::size_t k = 2 * std::size_t(rng.uniform_int(0, std::int64_t((kmax - 1) / 2))) + 1;
    const Tensor x = detail::random_plane(rng, H, W);
    const Tensor f = detail::random_plane(rng, k, k);
    const auto rep = circular_conv_theorem_check(x, f);
    ++r.trials;
    r.violations += !rep.holds;
    r.worst = std::max(r.worst, rep.rel_diff);
    r.csv_rows.push_back(detail::fmt_row({double(t), double(H), double(W), double(k), rep.rel_diff}));
  }
  return r;
}

struct GradCheckOptions {
  std::size_t coords_per_tensor = 32;
  double step = 1e-5;
  double rel_tol = 1e-4;
  double abs_floor = 1e-8;  ///< gradients this small on both sides count as agreeing
  std::uint32_t iterations = 2;
};

/// Reverse-mode gradient of the full unrolled detector loss vs central differences, on a
/// random scene with a nonzero feedback filter. Coordinates whose +-step perturbation moves any
/// Leaky ReLU input across zero are skipped.
inline SuiteReport verify_gradcheck(std::size_t trials, std::uint64_t seed, const GradCheckOptions& opt = {}) {
  SuiteReport r{"gradcheck"};
  r.csv_header = "trial,tensor,index,analytic,numeric,relative_error";
  Rng rng(seed);
  for (std::size_t t = 0; t < trials; ++t) {
    IffConfig cfg;
    cfg.iterations = opt.iterations;
    DetectorModel m = DetectorModel::initialize(rng.next(), cfg);
    for (const auto* name : {&param::kFeedbackW, &param::kConv1B, &param::kConv2B, &param::kConv3B}) {
      Tensor v = m.params.get(*name);
      for (double& e : v.data()) e = rng.normal(0.0, 0.1);
      m.params.set(*name, std::move(v));
    }
    const auto scene = gen_scene(rng.next(), SceneSpec{});
    const auto targets = make_targets(scene.objects);

    const auto lg = detector_loss_and_grad(m.params, cfg, scene.image, targets);
    std::vector<signed char> base_pattern;
    {
      GradTape tape;
      record_detector(tape, m.params, cfg, scene.image, targets);
      base_pattern = detail::kink_pattern(tape);
    }
    auto eval = [&](const ModelParams& p, bool& kink) {
      GradTape tape;
      auto g = record_detector(tape, p, cfg, scene.image, targets);
      if (detail::kink_pattern(tape) != base_pattern) kink = true;
      return tape.value(g.loss)[0];
    };

    for (const auto& [name, value] : m.params.entries()) {
      const std::size_t n = std::min(opt.coords_per_tensor, value.size());
      std::vector<std::size_t> pool(value.size());
      std::iota(pool.begin(), pool.end(), std::size_t{0});
      for (std::size_t j = 0; j < n; ++j) {
        std::swap(pool[j], pool[std::size_t(rng.uniform_int(std::int64_t(j), std::int64_t(pool.size()) - 1))]);
        const std::size_t idx = pool[j];
        ModelParams p = m.params;
        bool kink = false;
        p.at(name, idx) = value[idx] + opt.step;
        const double fp = eval(p, kink);
        p.at(name, idx) = value[idx] - opt.step;
        const double fm = eval(p, kink);
        if (kink) {
          ++r.skipped;
          continue;
        }
        const double numeric = (fp - fm) / (2.0 * opt.step);
        const double analytic = lg.grads.get(name)[idx];
        const double diff = std::abs(analytic - numeric);
        const double scale = std::max(std::abs(analytic), std::abs(numeric));
        const double rel = scale > 0.0 ? diff / scale : 0.0;
        const bool ok = diff <= opt.abs_floor || rel <= opt.rel_tol;
        ++r.trials;
        r.violations += !ok;
        r.worst = std::max(r.worst, rel);
        r.csv_rows.push_back(std::to_string(t) + "," + name + "," + std::to_string(idx) + "," +
                             detail::fmt_row({analytic, numeric, rel}));
      }
    }
  }
  return r;
}

/// Dispatches by suite name; throws std::invalid_argument for unknown names.
inline SuiteReport run_verify_suite(const std::string& suite, std::size_t trials, std::uint64_t seed) {
  if (suite == "parseval") return verify_parseval(trials, seed);
  if (suite == "theorem1") return verify_theorem1(trials, seed);
  if (suite == "theorem2") return verify_theorem2(trials, seed);
  if (suite == "convtheorem") return verify_convtheorem(trials, seed);
  if (suite == "gradcheck") return verify_gradcheck(trials, seed);
  throw std::invalid_argument("unknown suite '" + suite + "'");
}

inline void write_suite_csv(std::ostream& os, const SuiteReport& r) {
  os << r.csv_header << '\n';
  for (const auto& row : r.csv_rows) os << row << '\n';
}

}  // namespace iff
