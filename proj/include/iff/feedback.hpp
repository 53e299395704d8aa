#pragma once

#include <cstdint>

#include "iff/spectral.hpp"

namespace iff {

/// Hyperparameters of the feedback loop.
struct IffConfig {
  std::uint32_t iterations = 1;  ///< M_I; 0 is the open-loop detector
  double slope = 0.1;            ///< Leaky ReLU slope, in (0,1)
  PaddingMode pad = PaddingMode::Zero;
  bool enforce_contraction = false;
  std::uint32_t feedback_kernel = 1;  ///< spatial extent of w2

  void validate() const {
    require_slope(slope, "IffConfig");
    if (feedback_kernel % 2 == 0) throw std::invalid_argument("IffConfig: feedback_kernel must be odd");
  }

  bool operator==(const IffConfig&) const = default;
};

struct IffState {
  Tensor x;
  Tensor y;
};

/// States (x^[k], y^[k]) for k = 0..M_I.
struct IffTrajectory {
  std::vector<IffState> states;

  const Tensor& final_output() const { return states.back().y; }
  const Tensor& final_feature() const { return states.back().x; }
};

/// Target value of ||W1||^2 ||W2||^2 after rescaling.
inline constexpr double kContractionTarget = 0.81;

/// Scales w2 so that ||W1||^2 ||W2||^2 == kContractionTarget when the product is >= 1.
/// Norms are those of the max-norm slice embedded at H x W, in the spectral domain.
inline ConvFilter contraction_rescale(const ConvFilter& w1, const ConvFilter& w2, std::size_t H, std::size_t W) {
  const double n1 = filter_spectral_norm(w1, H, W);
  if (!(n1 > 0.0)) throw std::invalid_argument("contraction_rescale: w1 has zero norm");
  const double n2 = filter_spectral_norm(w2, H, W);
  const double product = n1 * n1 * n2 * n2;
  if (product < 1.0) return w2;
  ConvFilter out = w2;
  const double factor = std::sqrt(kContractionTarget / product);
  for (double& v : out.weights.data()) v *= factor;
  if (out.bias)
    for (double& v : out.bias->data()) v *= factor;
  return out;
}

namespace detail {

inline void check_feedback_pair(const Tensor& x0, const ConvFilter& w1, const ConvFilter& w2) {
  w1.validate();
  w2.validate();
  if (x0.rank() != 3) throw std::invalid_argument("iff_forward: x0 must be [C,H,W], got " + shape_str(x0.shape()));
  if (w1.in_channels() != x0.dim(0))
    throw std::invalid_argument("iff_forward: w1 expects " + std::to_string(w1.in_channels()) +
                                " feature channels, x0 has " + std::to_string(x0.dim(0)));
  if (w2.in_channels() != w1.out_channels())
    throw std::invalid_argument("iff_forward: w2 consumes " + std::to_string(w2.in_channels()) +
                                " channels but w1 produces " + std::to_string(w1.out_channels()));
  if (w2.out_channels() != x0.dim(0))
    throw std::invalid_argument("iff_forward: w2 produces " + std::to_string(w2.out_channels()) +
                                " channels, feature map has " + std::to_string(x0.dim(0)));
}

}  // namespace detail

/// Closed-loop refinement:
///   y^[k]   = w1 (*) x^[k]
///   x^[k+1] = x^[0] + w2 (*) h(y^[k])
inline IffTrajectory iff_forward(const Tensor& x0, const ConvFilter& w1, const ConvFilter& w2, const IffConfig& cfg) {
  cfg.validate();
  detail::check_feedback_pair(x0, w1, w2);
  require_finite(x0, "iff_forward");
  const ConvFilter fb = cfg.enforce_contraction ? contraction_rescale(w1, w2, x0.dim(1), x0.dim(2)) : w2;

  IffTrajectory traj;
  traj.states.reserve(cfg.iterations + 1);
  traj.states.push_back({x0, conv2d(x0, w1, cfg.pad)});
  for (std::uint32_t k = 0; k < cfg.iterations; ++k) {
    const Tensor& y = traj.states.back().y;
    Tensor feedback = conv2d(leaky_relu(y, cfg.slope), fb, cfg.pad);
    Tensor x = axpy(1.0, feedback, x0);
    Tensor y_next = conv2d(x, w1, cfg.pad);
    traj.states.push_back({std::move(x), std::move(y_next)});
  }
  return traj;
}

struct FeedbackPair {
  ConvFilter w1;
  ConvFilter w2;
};

/// Independent loops per prediction scale.
inline std::vector<IffTrajectory> iff_forward_multiscale(std::span<const Tensor> features,
                                                         std::span<const FeedbackPair> heads, const IffConfig& cfg) {
  if (features.size() != heads.size())
    throw std::invalid_argument("iff_forward_multiscale: one (w1, w2) pair per scale required");
  std::vector<IffTrajectory> out;
  out.reserve(features.size());
  for (std::size_t s = 0; s < features.size(); ++s) out.push_back(iff_forward(features[s], heads[s].w1, heads[s].w2, cfg));
  return out;
}

}  // namespace iff
