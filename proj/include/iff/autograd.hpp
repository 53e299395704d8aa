#pragma once

#include <functional>
#include <map>
#include <memory>

#include "iff/tensor.hpp"

namespace iff {

/// Ordered collection of named parameter tensors. Shapes are fixed after insertion.
class ModelParams {
 public:
  void add(std::string name, Tensor value) {
    if (index_.count(name)) throw std::invalid_argument("ModelParams: duplicate name '" + name + "'");
    index_.emplace(name, entries_.size());
    entries_.emplace_back(std::move(name), std::move(value));
  }

  bool contains(const std::string& name) const { return index_.count(name) != 0; }

  const Tensor& get(const std::string& name) const { return entries_.at(lookup(name)).second; }

  void set(const std::string& name, Tensor value) {
    auto& slot = entries_.at(lookup(name)).second;
    if (slot.shape() != value.shape())
      throw std::invalid_argument("ModelParams: shape of '" + name + "' is fixed at " + shape_str(slot.shape()));
    slot = std::move(value);
  }

  /// Mutable element access without changing the shape.
  double& at(const std::string& name, std::size_t i) { return entries_.at(lookup(name)).second.data()[i]; }

  std::size_t size() const { return entries_.size(); }
  const std::vector<std::pair<std::string, Tensor>>& entries() const { return entries_; }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& [_, t] : entries_) n += t.size();
    return n;
  }

  /// Same names and shapes, all values zero.
  ModelParams zeros_like() const {
    ModelParams z;
    for (const auto& [n, t] : entries_) z.add(n, Tensor::zeros(t.shape()));
    return z;
  }

  bool operator==(const ModelParams& o) const { return entries_ == o.entries_; }

 private:
  std::size_t lookup(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw std::out_of_range("ModelParams: unknown parameter '" + name + "'");
    return it->second;
  }

  std::vector<std::pair<std::string, Tensor>> entries_;
  std::map<std::string, std::size_t> index_;
};

enum class OpKind {
  Leaf,
  Conv2d,
  LeakyRelu,
  Add,
  Axpy,
  Scale,
  AvgPool2,
  SliceChannels,
  Sigmoid,
  SumSquares,
  BceWithLogits,
  WeightedSquaredError,
  SoftmaxCrossEntropy,
};

struct Var {
  std::size_t id = 0;
};

/// Records a forward computation for reverse-mode differentiation.
///
/// Each node keeps its value, the ids of its inputs (always smaller than its own id), a
/// forward rule for replay and a backward rule that accumulates into the inputs' gradients.
class GradTape {
 public:
  struct Node {
    OpKind kind = OpKind::Leaf;
    std::vector<std::size_t> inputs;
    Tensor value;
    Tensor grad;
    bool requires_grad = false;
    std::function<Tensor(const GradTape&)> forward;
    std::function<void(GradTape&, std::size_t)> backward;
  };

  Var leaf(Tensor value, bool requires_grad = false) {
    Node n;
    n.value = std::move(value);
    n.requires_grad = requires_grad;
    nodes_.push_back(std::move(n));
    return {nodes_.size() - 1};
  }

  Var record(OpKind kind, std::vector<std::size_t> inputs, std::function<Tensor(const GradTape&)> fwd,
             std::function<void(GradTape&, std::size_t)> bwd) {
    bool rg = false;
    for (auto i : inputs) {
      if (i >= nodes_.size()) throw std::logic_error("GradTape: input recorded after its consumer");
      rg = rg || nodes_[i].requires_grad;
    }
    Node n;
    n.kind = kind;
    n.inputs = std::move(inputs);
    n.value = fwd(*this);
    n.requires_grad = rg;
    n.forward = std::move(fwd);
    n.backward = std::move(bwd);
    nodes_.push_back(std::move(n));
    return {nodes_.size() - 1};
  }

  const Tensor& value(Var v) const { return nodes_.at(v.id).value; }
  const Tensor& value(std::size_t id) const { return nodes_.at(id).value; }
  const Node& node(std::size_t id) const { return nodes_.at(id); }
  std::size_t size() const { return nodes_.size(); }

  /// Gradient of the last backward() loss with respect to v (zeros if v was not reached).
  Tensor grad(Var v) const {
    const Node& n = nodes_.at(v.id);
    return n.grad.empty() ? Tensor::zeros(n.value.shape()) : n.grad;
  }

  /// Adds g into the gradient slot of node id.
  void accumulate(std::size_t id, const Tensor& g) {
    Node& n = nodes_[id];
    if (!n.requires_grad) return;
    if (n.grad.empty()) {
      n.grad = g;
      return;
    }
    auto d = n.grad.data();
    auto s = g.data();
    for (std::size_t i = 0; i < d.size(); ++i) d[i] += s[i];
  }

  bool wants_grad(std::size_t id) const { return nodes_[id].requires_grad; }
  const Tensor& grad_of(std::size_t id) const { return nodes_[id].grad; }

  void backward(Var loss) {
    if (nodes_.at(loss.id).value.size() != 1)
      throw std::invalid_argument("backward: loss must be a scalar, got shape " +
                                  shape_str(nodes_[loss.id].value.shape()));
    for (auto& n : nodes_) n.grad = Tensor();
    nodes_[loss.id].grad = Tensor(nodes_[loss.id].value.shape(), 1.0);
    for (std::size_t i = loss.id + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (n.kind == OpKind::Leaf || n.grad.empty() || !n.requires_grad) continue;
      n.backward(*this, i);
    }
  }

  /// Re-runs every recorded op from the leaves and reports whether each value is reproduced exactly.
  bool replay_matches() const {
    GradTape copy = *this;
    for (std::size_t i = 0; i < copy.nodes_.size(); ++i) {
      Node& n = copy.nodes_[i];
      if (n.kind == OpKind::Leaf) continue;
      n.value = n.forward(copy);
      if (!(n.value == nodes_[i].value)) return false;
    }
    return true;
  }

 private:
  std::vector<Node> nodes_;
};

namespace ops {

inline double scalar(const Tensor& t) { return t[0]; }

inline Var conv2d(GradTape& t, Var x, Var w, std::optional<Var> b, PaddingMode pad) {
  {
    ConvFilter probe(t.value(w), b ? std::optional<Tensor>(t.value(*b)) : std::nullopt);
    detail::check_conv_shapes(t.value(x).shape(), probe, "ops::conv2d");
  }
  std::vector<std::size_t> in{x.id, w.id};
  if (b) in.push_back(b->id);
  const std::size_t xi = x.id, wi = w.id;
  const std::optional<std::size_t> bi = b ? std::optional(b->id) : std::nullopt;
  return t.record(
      OpKind::Conv2d, in,
      [=](const GradTape& g) {
        return detail::conv_forward(g.value(xi), g.value(wi), bi ? &g.value(*bi) : nullptr, pad);
      },
      [=](GradTape& g, std::size_t self) {
        const Tensor& dy = g.grad_of(self);
        if (g.wants_grad(xi)) g.accumulate(xi, detail::conv_backward_input(dy, g.value(wi), pad));
        if (g.wants_grad(wi)) g.accumulate(wi, detail::conv_backward_weight(dy, g.value(xi), g.value(wi).shape(), pad));
        if (bi && g.wants_grad(*bi)) {
          const std::size_t C = dy.dim(0), plane = dy.dim(1) * dy.dim(2);
          Tensor db({C});
          for (std::size_t c = 0; c < C; ++c)
            for (std::size_t i = 0; i < plane; ++i) db[c] += dy[c * plane + i];
          g.accumulate(*bi, db);
        }
      });
}

/// Subgradient at 0 is the slope.
inline Var leaky_relu(GradTape& t, Var x, double slope) {
  require_slope(slope, "ops::leaky_relu");
  const std::size_t xi = x.id;
  return t.record(
      OpKind::LeakyRelu, {xi}, [=](const GradTape& g) { return iff::leaky_relu(g.value(xi), slope); },
      [=](GradTape& g, std::size_t self) {
        Tensor dx = g.grad_of(self);
        const auto xs = g.value(xi).data();
        for (std::size_t i = 0; i < dx.size(); ++i)
          if (!(xs[i] > 0.0)) dx[i] *= slope;
        g.accumulate(xi, dx);
      });
}

inline Var axpy(GradTape& t, double a, Var x, Var y) {
  require_same_shape(t.value(x), t.value(y), "ops::axpy");
  const std::size_t xi = x.id, yi = y.id;
  return t.record(
      OpKind::Axpy, {xi, yi}, [=](const GradTape& g) { return iff::axpy(a, g.value(xi), g.value(yi)); },
      [=](GradTape& g, std::size_t self) {
        const Tensor& d = g.grad_of(self);
        g.accumulate(xi, scaled(d, a));
        g.accumulate(yi, d);
      });
}

inline Var add(GradTape& t, Var x, Var y) {
  require_same_shape(t.value(x), t.value(y), "ops::add");
  const std::size_t xi = x.id, yi = y.id;
  return t.record(
      OpKind::Add, {xi, yi}, [=](const GradTape& g) { return iff::axpy(1.0, g.value(xi), g.value(yi)); },
      [=](GradTape& g, std::size_t self) {
        g.accumulate(xi, g.grad_of(self));
        g.accumulate(yi, g.grad_of(self));
      });
}

inline Var scale(GradTape& t, double a, Var x) {
  const std::size_t xi = x.id;
  return t.record(
      OpKind::Scale, {xi}, [=](const GradTape& g) { return scaled(g.value(xi), a); },
      [=](GradTape& g, std::size_t self) { g.accumulate(xi, scaled(g.grad_of(self), a)); });
}

inline Var avg_pool2(GradTape& t, Var x) {
  const std::size_t xi = x.id;
  return t.record(
      OpKind::AvgPool2, {xi}, [=](const GradTape& g) { return iff::avg_pool2(g.value(xi)); },
      [=](GradTape& g, std::size_t self) {
        const Tensor& d = g.grad_of(self);
        Tensor dx(g.value(xi).shape());
        for (std::size_t c = 0; c < d.dim(0); ++c)
          for (std::size_t r = 0; r < d.dim(1); ++r)
            for (std::size_t q = 0; q < d.dim(2); ++q) {
              const double v = 0.25 * d.at(c, r, q);
              dx.at(c, 2 * r, 2 * q) = v;
              dx.at(c, 2 * r, 2 * q + 1) = v;
              dx.at(c, 2 * r + 1, 2 * q) = v;
              dx.at(c, 2 * r + 1, 2 * q + 1) = v;
            }
        g.accumulate(xi, dx);
      });
}

inline Var slice_channels(GradTape& t, Var x, std::size_t begin, std::size_t end) {
  const std::size_t xi = x.id;
  return t.record(
      OpKind::SliceChannels, {xi}, [=](const GradTape& g) { return iff::slice_channels(g.value(xi), begin, end); },
      [=](GradTape& g, std::size_t self) {
        const Tensor& d = g.grad_of(self);
        Tensor dx(g.value(xi).shape());
        const std::size_t plane = dx.dim(1) * dx.dim(2);
        std::copy(d.data().begin(), d.data().end(), dx.data().begin() + std::ptrdiff_t(begin * plane));
        g.accumulate(xi, dx);
      });
}

inline double sigmoid(double v) { return 1.0 / (1.0 + std::exp(-v)); }

inline Var sigmoid(GradTape& t, Var x) {
  const std::size_t xi = x.id;
  return t.record(
      OpKind::Sigmoid, {xi},
      [=](const GradTape& g) {
        Tensor out = g.value(xi);
        for (double& v : out.data()) v = ops::sigmoid(v);
        return out;
      },
      [=](GradTape& g, std::size_t self) {
        Tensor dx = g.grad_of(self);
        const Tensor& y = g.value(self);
        for (std::size_t i = 0; i < dx.size(); ++i) dx[i] *= y[i] * (1.0 - y[i]);
        g.accumulate(xi, dx);
      });
}

/// sum of squared entries.
inline Var sum_squares(GradTape& t, Var x) {
  const std::size_t xi = x.id;
  return t.record(
      OpKind::SumSquares, {xi},
      [=](const GradTape& g) {
        double s = 0.0;
        for (double v : g.value(xi).data()) s += v * v;
        return Tensor({1}, {s});
      },
      [=](GradTape& g, std::size_t self) { g.accumulate(xi, scaled(g.value(xi), 2.0 * scalar(g.grad_of(self)))); });
}

/// sum_i weight_i * BCE(sigmoid(x_i), target_i), computed stably from logits.
inline Var bce_with_logits(GradTape& t, Var x, Tensor target, Tensor weight) {
  require_same_shape(t.value(x), target, "ops::bce_with_logits");
  require_same_shape(t.value(x), weight, "ops::bce_with_logits");
  const std::size_t xi = x.id;
  auto tg = std::make_shared<const Tensor>(std::move(target));
  auto wt = std::make_shared<const Tensor>(std::move(weight));
  return t.record(
      OpKind::BceWithLogits, {xi},
      [=](const GradTape& g) {
        const Tensor& z = g.value(xi);
        double s = 0.0;
        for (std::size_t i = 0; i < z.size(); ++i) {
          const double v = z[i];
          s += (*wt)[i] * (std::max(v, 0.0) - v * (*tg)[i] + std::log1p(std::exp(-std::abs(v))));
        }
        return Tensor({1}, {s});
      },
      [=](GradTape& g, std::size_t self) {
        const double up = scalar(g.grad_of(self));
        const Tensor& z = g.value(xi);
        Tensor dx(z.shape());
        for (std::size_t i = 0; i < z.size(); ++i) dx[i] = up * (*wt)[i] * (sigmoid(z[i]) - (*tg)[i]);
        g.accumulate(xi, dx);
      });
}

/// sum_i weight_i * (x_i - target_i)^2
inline Var weighted_squared_error(GradTape& t, Var x, Tensor target, Tensor weight) {
  require_same_shape(t.value(x), target, "ops::weighted_squared_error");
  require_same_shape(t.value(x), weight, "ops::weighted_squared_error");
  const std::size_t xi = x.id;
  auto tg = std::make_shared<const Tensor>(std::move(target));
  auto wt = std::make_shared<const Tensor>(std::move(weight));
  return t.record(
      OpKind::WeightedSquaredError, {xi},
      [=](const GradTape& g) {
        const Tensor& z = g.value(xi);
        double s = 0.0;
        for (std::size_t i = 0; i < z.size(); ++i) {
          const double d = z[i] - (*tg)[i];
          s += (*wt)[i] * d * d;
        }
        return Tensor({1}, {s});
      },
      [=](GradTape& g, std::size_t self) {
        const double up = scalar(g.grad_of(self));
        const Tensor& z = g.value(xi);
        Tensor dx(z.shape());
        for (std::size_t i = 0; i < z.size(); ++i) dx[i] = up * 2.0 * (*wt)[i] * (z[i] - (*tg)[i]);
        g.accumulate(xi, dx);
      });
}

/// Cross-entropy of a softmax over the channel axis of x [C,H,W] against per-cell labels,
/// summed over cells with weight_hw (shape [H,W]).
inline Var softmax_cross_entropy(GradTape& t, Var x, std::vector<std::size_t> labels, Tensor weight_hw) {
  const Tensor& xv = t.value(x);
  if (xv.rank() != 3 || weight_hw.rank() != 2 || weight_hw.dim(0) != xv.dim(1) || weight_hw.dim(1) != xv.dim(2) ||
      labels.size() != weight_hw.size())
    throw std::invalid_argument("ops::softmax_cross_entropy: shape mismatch");
  for (auto l : labels)
    if (l >= xv.dim(0)) throw std::invalid_argument("ops::softmax_cross_entropy: label out of range");
  const std::size_t xi = x.id;
  auto lb = std::make_shared<const std::vector<std::size_t>>(std::move(labels));
  auto wt = std::make_shared<const Tensor>(std::move(weight_hw));
  auto softmax_at = [](const Tensor& z, std::size_t cell, std::vector<double>& p) {
    const std::size_t C = z.dim(0), plane = z.dim(1) * z.dim(2);
    double m = z[cell];
    for (std::size_t c = 1; c < C; ++c) m = std::max(m, z[c * plane + cell]);
    double s = 0.0;
    for (std::size_t c = 0; c < C; ++c) s += (p[c] = std::exp(z[c * plane + cell] - m));
    for (auto& v : p) v /= s;
    return m + std::log(s);
  };
  return t.record(
      OpKind::SoftmaxCrossEntropy, {xi},
      [=](const GradTape& g) {
        const Tensor& z = g.value(xi);
        const std::size_t plane = z.dim(1) * z.dim(2);
        std::vector<double> p(z.dim(0));
        double s = 0.0;
        for (std::size_t cell = 0; cell < plane; ++cell) {
          if ((*wt)[cell] == 0.0) continue;
          const double lse = softmax_at(z, cell, p);
          s += (*wt)[cell] * (lse - z[(*lb)[cell] * plane + cell]);
        }
        return Tensor({1}, {s});
      },
      [=](GradTape& g, std::size_t self) {
        const double up = scalar(g.grad_of(self));
        const Tensor& z = g.value(xi);
        const std::size_t C = z.dim(0), plane = z.dim(1) * z.dim(2);
        std::vector<double> p(C);
        Tensor dx(z.shape());
        for (std::size_t cell = 0; cell < plane; ++cell) {
          if ((*wt)[cell] == 0.0) continue;
          softmax_at(z, cell, p);
          for (std::size_t c = 0; c < C; ++c)
            dx[c * plane + cell] = up * (*wt)[cell] * (p[c] - (c == (*lb)[cell] ? 1.0 : 0.0));
        }
        g.accumulate(xi, dx);
      });
}

}  // namespace ops

/// Central difference (f(p + h e) - f(p - h e)) / 2h along one coordinate of a named parameter.
inline double finite_diff_grad(const std::function<double(const ModelParams&)>& f, const ModelParams& params,
                               const std::string& name, std::size_t index, double h) {
  if (!(h > 0.0)) throw std::invalid_argument("finite_diff_grad: step must be positive");
  ModelParams p = params;
  const double orig = p.get(name)[index];
  p.at(name, index) = orig + h;
  const double fp = f(p);
  p.at(name, index) = orig - h;
  const double fm = f(p);
  return (fp - fm) / (2.0 * h);
}

/// Heavy-ball momentum: v <- momentum * v + g;  theta <- theta - lr * v.
class SgdMomentum {
 public:
  SgdMomentum(double lr, double momentum) : lr_(lr), momentum_(momentum) {
    if (!(lr >= 0.0)) throw std::invalid_argument("SgdMomentum: lr must be >= 0");
    if (!(momentum >= 0.0 && momentum < 1.0)) throw std::invalid_argument("SgdMomentum: momentum must be in [0,1)");
  }

  void set_lr(double lr) { lr_ = lr; }
  double lr() const { return lr_; }

  void step(ModelParams& params, const ModelParams& grads) {
    if (!velocity_) velocity_ = params.zeros_like();
    for (const auto& [name, g] : grads.entries()) {
      const Tensor& p = params.get(name);
      require_same_shape(p, g, "sgd_step");
      Tensor v = velocity_->get(name);
      Tensor np = p;
      for (std::size_t i = 0; i < np.size(); ++i) {
        v[i] = momentum_ * v[i] + g[i];
        np[i] -= lr_ * v[i];
      }
      velocity_->set(name, std::move(v));
      params.set(name, std::move(np));
    }
  }

 private:
  double lr_;
  double momentum_;
  std::optional<ModelParams> velocity_;
};

/// One plain or momentum step with fresh velocity.
inline ModelParams sgd_step(const ModelParams& params, const ModelParams& grads, double lr, double momentum = 0.0) {
  if (!(lr > 0.0)) throw std::invalid_argument("sgd_step: lr must be > 0");
  ModelParams out = params;
  SgdMomentum opt(lr, momentum);
  opt.step(out, grads);
  return out;
}

}  // namespace iff
