#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "mmsurv/common.hpp"

namespace mmsurv {

using Shape = std::vector<int64_t>;

inline int64_t shape_numel(const Shape& s) {
  int64_t n = 1;
  for (int64_t d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "[";
  for (size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << "]";
  return os.str();
}

template <class Scalar>
struct TensorStorage {
  Shape shape;
  std::vector<Scalar> val;
  std::vector<Scalar> grad;  // accumulated gradient, persists across backward calls
  std::vector<Scalar> adj;   // scratch adjoint for the backward pass in flight
  bool requires_grad = false;
};

/// Dense n-dimensional value, row-major with the innermost axis last.
/// Copying a Tensor copies the handle; the storage is shared.
template <class Scalar>
class Tensor {
 public:
  Tensor() : st_(std::make_shared<TensorStorage<Scalar>>()) {}

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    Tensor t;
    t.st_->shape = std::move(shape);
    t.st_->val.assign(static_cast<size_t>(shape_numel(t.st_->shape)), Scalar(0));
    t.st_->requires_grad = requires_grad;
    return t;
  }
  static Tensor full(Shape shape, Scalar value, bool requires_grad = false) {
    Tensor t = zeros(std::move(shape), requires_grad);
    std::fill(t.st_->val.begin(), t.st_->val.end(), value);
    return t;
  }
  static Tensor from(Shape shape, std::vector<Scalar> data, bool requires_grad = false) {
    if (static_cast<int64_t>(data.size()) != shape_numel(shape))
      throw ShapeError("Tensor: data length " + std::to_string(data.size()) +
                       " does not match shape " + shape_str(shape));
    Tensor t;
    t.st_->shape = std::move(shape);
    t.st_->val = std::move(data);
    t.st_->requires_grad = requires_grad;
    return t;
  }

  const Shape& shape() const { return st_->shape; }
  int64_t dim(size_t i) const { return st_->shape.at(i); }
  int64_t numel() const { return static_cast<int64_t>(st_->val.size()); }

  Scalar* data() { return st_->val.data(); }
  const Scalar* data() const { return st_->val.data(); }
  std::vector<Scalar>& values() { return st_->val; }
  const std::vector<Scalar>& values() const { return st_->val; }

  bool requires_grad() const { return st_->requires_grad; }
  void set_requires_grad(bool rg) { st_->requires_grad = rg; }

  bool has_grad() const { return !st_->grad.empty(); }
  std::vector<Scalar>& grad() {
    if (st_->grad.empty()) st_->grad.assign(st_->val.size(), Scalar(0));
    return st_->grad;
  }
  const std::vector<Scalar>& grad() const {
    const_cast<Tensor*>(this)->grad();
    return st_->grad;
  }
  void zero_grad() { st_->grad.assign(st_->val.size(), Scalar(0)); }

  std::shared_ptr<TensorStorage<Scalar>> storage() const { return st_; }
  bool same_storage(const Tensor& o) const { return st_ == o.st_; }

  /// Deep copy (fresh storage, values only).
  Tensor clone() const {
    Tensor t;
    t.st_->shape = st_->shape;
    t.st_->val = st_->val;
    t.st_->requires_grad = st_->requires_grad;
    return t;
  }

 private:
  std::shared_ptr<TensorStorage<Scalar>> st_;
};

/// Append-only record of operations. Ops push a backward closure at
/// execution time, so insertion order is a topological order of the
/// computation and running the closures in reverse propagates adjoints.
///
/// Gradient semantics: each backward() pass computes adjoints from scratch
/// and then adds them into every participating tensor's .grad, so calling
/// backward twice on the same graph doubles the accumulated gradients.
template <class Scalar>
class Graph {
 public:
  void record(std::vector<Tensor<Scalar>> participants, std::function<void()> backward_fn) {
    for (auto& t : participants) touched_.push_back(t.storage());
    nodes_.push_back(std::move(backward_fn));
  }

  void backward(const Tensor<Scalar>& loss) {
    if (loss.numel() != 1)
      throw ShapeError("backward: loss must be scalar, got shape " + shape_str(loss.shape()));
    auto seed = loss.storage();
    touched_.push_back(seed);
    for (auto& st : touched_) st->adj.assign(st->val.size(), Scalar(0));
    seed->adj[0] = Scalar(1);
    for (size_t k = nodes_.size(); k-- > 0;) nodes_[k]();
    // Fold adjoints into persistent grads exactly once per storage.
    std::vector<TensorStorage<Scalar>*> uniq;
    uniq.reserve(touched_.size());
    for (auto& st : touched_) uniq.push_back(st.get());
    std::sort(uniq.begin(), uniq.end());
    uniq.erase(std::unique(uniq.begin(), uniq.end()), uniq.end());
    for (auto* st : uniq) {
      if (st->grad.empty()) st->grad.assign(st->val.size(), Scalar(0));
      for (size_t i = 0; i < st->adj.size(); ++i) st->grad[i] += st->adj[i];
    }
  }

  void clear() {
    nodes_.clear();
    touched_.clear();
  }
  size_t size() const { return nodes_.size(); }

 private:
  std::vector<std::function<void()>> nodes_;
  std::vector<std::shared_ptr<TensorStorage<Scalar>>> touched_;
};

namespace detail {
template <class Scalar>
std::span<Scalar> adj(const Tensor<Scalar>& t) {
  return {t.storage()->adj.data(), t.storage()->adj.size()};
}
}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise and structural ops
// ---------------------------------------------------------------------------

template <class Scalar>
Tensor<Scalar> add(Graph<Scalar>& g, const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  if (a.shape() != b.shape())
    throw ShapeError("add: shapes differ " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  Tensor<Scalar> out = Tensor<Scalar>::zeros(a.shape());
  out.set_requires_grad(a.requires_grad() || b.requires_grad());
  for (int64_t i = 0; i < a.numel(); ++i) out.data()[i] = a.data()[i] + b.data()[i];
  g.record({a, b, out}, [a, b, out]() {
    auto da = detail::adj(a), db = detail::adj(b), dout = detail::adj(out);
    for (size_t i = 0; i < dout.size(); ++i) {
      da[i] += dout[i];
      db[i] += dout[i];
    }
  });
  return out;
}

template <class Scalar>
Tensor<Scalar> relu(Graph<Scalar>& g, const Tensor<Scalar>& x) {
  Tensor<Scalar> out = Tensor<Scalar>::zeros(x.shape());
  out.set_requires_grad(x.requires_grad());
  for (int64_t i = 0; i < x.numel(); ++i)
    out.data()[i] = x.data()[i] > Scalar(0) ? x.data()[i] : Scalar(0);
  g.record({x, out}, [x, out]() {
    auto dx = detail::adj(x), dout = detail::adj(out);
    for (size_t i = 0; i < dout.size(); ++i)
      if (x.data()[i] > Scalar(0)) dx[i] += dout[i];
  });
  return out;
}

template <class Scalar>
Scalar stable_sigmoid(Scalar v) {
  if (v >= Scalar(0)) {
    const Scalar e = std::exp(-v);
    return Scalar(1) / (Scalar(1) + e);
  }
  const Scalar e = std::exp(v);
  return e / (Scalar(1) + e);
}

template <class Scalar>
Tensor<Scalar> sigmoid(Graph<Scalar>& g, const Tensor<Scalar>& x) {
  Tensor<Scalar> out = Tensor<Scalar>::zeros(x.shape());
  out.set_requires_grad(x.requires_grad());
  for (int64_t i = 0; i < x.numel(); ++i) out.data()[i] = stable_sigmoid(x.data()[i]);
  g.record({x, out}, [x, out]() {
    auto dx = detail::adj(x), dout = detail::adj(out);
    for (size_t i = 0; i < dout.size(); ++i) {
      const Scalar s = out.data()[i];
      dx[i] += dout[i] * s * (Scalar(1) - s);
    }
  });
  return out;
}

/// Copying reshape; total element count must be preserved.
template <class Scalar>
Tensor<Scalar> reshape(Graph<Scalar>& g, const Tensor<Scalar>& x, Shape new_shape) {
  if (shape_numel(new_shape) != x.numel())
    throw ShapeError("reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(new_shape));
  Tensor<Scalar> out = Tensor<Scalar>::from(std::move(new_shape), x.values());
  out.set_requires_grad(x.requires_grad());
  g.record({x, out}, [x, out]() {
    auto dx = detail::adj(x), dout = detail::adj(out);
    for (size_t i = 0; i < dout.size(); ++i) dx[i] += dout[i];
  });
  return out;
}

/// Mean over every element, producing a scalar tensor of shape [1].
template <class Scalar>
Tensor<Scalar> mean_all(Graph<Scalar>& g, const Tensor<Scalar>& x) {
  if (x.numel() == 0) throw ShapeError("mean_all: empty tensor");
  Scalar acc = 0;
  for (int64_t i = 0; i < x.numel(); ++i) acc += x.data()[i];
  Tensor<Scalar> out = Tensor<Scalar>::from({1}, {acc / static_cast<Scalar>(x.numel())});
  out.set_requires_grad(x.requires_grad());
  const Scalar inv_n = Scalar(1) / static_cast<Scalar>(x.numel());
  g.record({x, out}, [x, out, inv_n]() {
    auto dx = detail::adj(x), dout = detail::adj(out);
    for (size_t i = 0; i < dx.size(); ++i) dx[i] += dout[0] * inv_n;
  });
  return out;
}

/// Concatenation along axis 1 of two rank-2 tensors [N,A] ++ [N,B] -> [N,A+B].
template <class Scalar>
Tensor<Scalar> concat_features(Graph<Scalar>& g, const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  if (a.shape().size() != 2 || b.shape().size() != 2 || a.dim(0) != b.dim(0))
    throw ShapeError("concat_features: need [N,A] and [N,B] with matching N, got " +
                     shape_str(a.shape()) + " and " + shape_str(b.shape()));
  const int64_t n = a.dim(0), wa = a.dim(1), wb = b.dim(1);
  Tensor<Scalar> out = Tensor<Scalar>::zeros({n, wa + wb});
  out.set_requires_grad(a.requires_grad() || b.requires_grad());
  for (int64_t r = 0; r < n; ++r) {
    std::copy_n(a.data() + r * wa, wa, out.data() + r * (wa + wb));
    std::copy_n(b.data() + r * wb, wb, out.data() + r * (wa + wb) + wa);
  }
  g.record({a, b, out}, [a, b, out, n, wa, wb]() {
    auto da = detail::adj(a), db = detail::adj(b), dout = detail::adj(out);
    for (int64_t r = 0; r < n; ++r) {
      for (int64_t c = 0; c < wa; ++c) da[r * wa + c] += dout[r * (wa + wb) + c];
      for (int64_t c = 0; c < wb; ++c) db[r * wb + c] += dout[r * (wa + wb) + wa + c];
    }
  });
  return out;
}

/// Mean over the spatial axes of [N,C,D,H,W] -> [N,C].
template <class Scalar>
Tensor<Scalar> global_avg_pool(Graph<Scalar>& g, const Tensor<Scalar>& x) {
  if (x.shape().size() != 5)
    throw ShapeError("global_avg_pool: expected [N,C,D,H,W], got " + shape_str(x.shape()));
  const int64_t n = x.dim(0), c = x.dim(1), spatial = x.dim(2) * x.dim(3) * x.dim(4);
  Tensor<Scalar> out = Tensor<Scalar>::zeros({n, c});
  out.set_requires_grad(x.requires_grad());
  for (int64_t i = 0; i < n * c; ++i) {
    Scalar acc = 0;
    const Scalar* base = x.data() + i * spatial;
    for (int64_t s = 0; s < spatial; ++s) acc += base[s];
    out.data()[i] = acc / static_cast<Scalar>(spatial);
  }
  const Scalar inv = Scalar(1) / static_cast<Scalar>(spatial);
  g.record({x, out}, [x, out, n, c, spatial, inv]() {
    auto dx = detail::adj(x), dout = detail::adj(out);
    for (int64_t i = 0; i < n * c; ++i)
      for (int64_t s = 0; s < spatial; ++s) dx[i * spatial + s] += dout[i] * inv;
  });
  return out;
}

// ---------------------------------------------------------------------------
// Linear layer
// ---------------------------------------------------------------------------

template <class Scalar>
using RowMat = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class Scalar>
using RowMatMap = Eigen::Map<RowMat<Scalar>>;
template <class Scalar>
using ConstRowMatMap = Eigen::Map<const RowMat<Scalar>>;

/// Affine map: input [N,I], weight [O,I], bias [O] -> [N,O].
template <class Scalar>
Tensor<Scalar> linear(Graph<Scalar>& g, const Tensor<Scalar>& x, const Tensor<Scalar>& w,
                      const Tensor<Scalar>& b) {
  if (x.shape().size() != 2 || w.shape().size() != 2 || b.shape().size() != 1 ||
      x.dim(1) != w.dim(1) || b.dim(0) != w.dim(0))
    throw ShapeError("linear: incompatible shapes x=" + shape_str(x.shape()) +
                     " w=" + shape_str(w.shape()) + " b=" + shape_str(b.shape()));
  const int64_t n = x.dim(0), in = x.dim(1), out_w = w.dim(0);
  Tensor<Scalar> out = Tensor<Scalar>::zeros({n, out_w});
  out.set_requires_grad(x.requires_grad() || w.requires_grad() || b.requires_grad());
  {
    ConstRowMatMap<Scalar> xm(x.data(), n, in), wm(w.data(), out_w, in);
    RowMatMap<Scalar> om(out.data(), n, out_w);
    om.noalias() = xm * wm.transpose();
    for (int64_t r = 0; r < n; ++r)
      for (int64_t c = 0; c < out_w; ++c) out.data()[r * out_w + c] += b.data()[c];
  }
  g.record({x, w, b, out}, [x, w, b, out, n, in, out_w]() {
    ConstRowMatMap<Scalar> xm(x.data(), n, in), wm(w.data(), out_w, in);
    ConstRowMatMap<Scalar> dom(detail::adj(out).data(), n, out_w);
    RowMatMap<Scalar> dxm(detail::adj(x).data(), n, in);
    RowMatMap<Scalar> dwm(detail::adj(w).data(), out_w, in);
    dxm.noalias() += dom * wm;
    dwm.noalias() += dom.transpose() * xm;
    auto db = detail::adj(b);
    for (int64_t r = 0; r < n; ++r)
      for (int64_t c = 0; c < out_w; ++c) db[c] += dom(r, c);
  });
  return out;
}

// ---------------------------------------------------------------------------
// Batch normalization
// ---------------------------------------------------------------------------

enum class BnMode { Train, Eval };

template <class Scalar>
struct RunningStats {
  std::vector<Scalar> mean;
  std::vector<Scalar> var;
  double momentum = 0.1;

  static RunningStats make(int64_t channels, double momentum = 0.1) {
    RunningStats rs;
    rs.mean.assign(static_cast<size_t>(channels), Scalar(0));
    rs.var.assign(static_cast<size_t>(channels), Scalar(1));
    rs.momentum = momentum;
    return rs;
  }
};

/// Per-channel batch normalization over axis 1. In train mode uses batch
/// statistics with population variance (divisor M) and updates the running
/// stats by exponential moving average (unbiased variance in the running
/// copy). In eval mode normalizes with the running statistics.
/// Input is [N,K] or [N,C,D,H,W]; gamma/beta are [channels].
template <class Scalar>
Tensor<Scalar> batch_norm(Graph<Scalar>& g, const Tensor<Scalar>& x, const Tensor<Scalar>& gamma,
                          const Tensor<Scalar>& beta, Scalar eps, BnMode mode,
                          RunningStats<Scalar>& running) {
  const auto& sh = x.shape();
  if (sh.size() != 2 && sh.size() != 5)
    throw ShapeError("batch_norm: expected [N,K] or [N,C,D,H,W], got " + shape_str(sh));
  const int64_t n = sh[0], channels = sh[1];
  int64_t spatial = 1;
  for (size_t i = 2; i < sh.size(); ++i) spatial *= sh[i];
  const int64_t reduce_count = n * spatial;
  if (gamma.numel() != channels || beta.numel() != channels ||
      static_cast<int64_t>(running.mean.size()) != channels)
    throw ShapeError("batch_norm: gamma/beta/running stats must have one entry per channel");
  if (mode == BnMode::Train && reduce_count < 2)
    throw ShapeError("batch_norm: batch of size 1 in train mode has degenerate variance");

  Tensor<Scalar> out = Tensor<Scalar>::zeros(sh);
  out.set_requires_grad(x.requires_grad() || gamma.requires_grad() || beta.requires_grad());

  // Saved for backward: normalized activations and inverse stddev per channel.
  auto xhat = std::make_shared<std::vector<Scalar>>(static_cast<size_t>(x.numel()));
  auto invstd = std::make_shared<std::vector<Scalar>>(static_cast<size_t>(channels));

  auto for_each_channel_elem = [&](int64_t c, auto&& fn) {
    for (int64_t b = 0; b < n; ++b) {
      const int64_t base = (b * channels + c) * spatial;
      for (int64_t s = 0; s < spatial; ++s) fn(base + s);
    }
  };

  for (int64_t c = 0; c < channels; ++c) {
    Scalar mu, var;
    if (mode == BnMode::Train) {
      Scalar sum = 0;
      for_each_channel_elem(c, [&](int64_t i) { sum += x.data()[i]; });
      mu = sum / static_cast<Scalar>(reduce_count);
      Scalar sq = 0;
      for_each_channel_elem(c, [&](int64_t i) {
        const Scalar d = x.data()[i] - mu;
        sq += d * d;
      });
      var = sq / static_cast<Scalar>(reduce_count);
      const Scalar mom = static_cast<Scalar>(running.momentum);
      running.mean[static_cast<size_t>(c)] =
          (Scalar(1) - mom) * running.mean[static_cast<size_t>(c)] + mom * mu;
      const Scalar unbiased =
          var * static_cast<Scalar>(reduce_count) / static_cast<Scalar>(reduce_count - 1);
      running.var[static_cast<size_t>(c)] =
          (Scalar(1) - mom) * running.var[static_cast<size_t>(c)] + mom * unbiased;
    } else {
      mu = running.mean[static_cast<size_t>(c)];
      var = running.var[static_cast<size_t>(c)];
    }
    const Scalar istd = Scalar(1) / std::sqrt(var + eps);
    (*invstd)[static_cast<size_t>(c)] = istd;
    const Scalar gc = gamma.data()[c], bc = beta.data()[c];
    for_each_channel_elem(c, [&](int64_t i) {
      const Scalar xh = (x.data()[i] - mu) * istd;
      (*xhat)[static_cast<size_t>(i)] = xh;
      out.data()[i] = gc * xh + bc;
    });
  }

  g.record({x, gamma, beta, out},
           [x, gamma, beta, out, xhat, invstd, mode, n, channels, spatial, reduce_count]() {
             auto dx = detail::adj(x), dgamma = detail::adj(gamma), dbeta = detail::adj(beta),
                  dout = detail::adj(out);
             for (int64_t c = 0; c < channels; ++c) {
               Scalar sum_dy = 0, sum_dy_xhat = 0;
               for (int64_t b = 0; b < n; ++b) {
                 const int64_t base = (b * channels + c) * spatial;
                 for (int64_t s = 0; s < spatial; ++s) {
                   const int64_t i = base + s;
                   sum_dy += dout[static_cast<size_t>(i)];
                   sum_dy_xhat += dout[static_cast<size_t>(i)] * (*xhat)[static_cast<size_t>(i)];
                 }
               }
               dgamma[static_cast<size_t>(c)] += sum_dy_xhat;
               dbeta[static_cast<size_t>(c)] += sum_dy;
               const Scalar gc = gamma.data()[c];
               const Scalar istd = (*invstd)[static_cast<size_t>(c)];
               if (mode == BnMode::Train) {
                 const Scalar inv_m = Scalar(1) / static_cast<Scalar>(reduce_count);
                 for (int64_t b = 0; b < n; ++b) {
                   const int64_t base = (b * channels + c) * spatial;
                   for (int64_t s = 0; s < spatial; ++s) {
                     const int64_t i = base + s;
                     const Scalar xh = (*xhat)[static_cast<size_t>(i)];
                     dx[static_cast<size_t>(i)] +=
                         gc * istd * inv_m *
                         (static_cast<Scalar>(reduce_count) * dout[static_cast<size_t>(i)] -
                          sum_dy - xh * sum_dy_xhat);
                   }
                 }
               } else {
                 for (int64_t b = 0; b < n; ++b) {
                   const int64_t base = (b * channels + c) * spatial;
                   for (int64_t s = 0; s < spatial; ++s) {
                     const int64_t i = base + s;
                     dx[static_cast<size_t>(i)] += gc * istd * dout[static_cast<size_t>(i)];
                   }
                 }
               }
             }
           });
  return out;
}

// ---------------------------------------------------------------------------
// Objective
// ---------------------------------------------------------------------------

/// Mean squared error plus lambda * sum of squared entries of the given
/// weight tensors. Biases and normalization parameters must not be passed in
/// `penalized_weights`.
template <class Scalar>
Tensor<Scalar> mse_l2_objective(Graph<Scalar>& g, const Tensor<Scalar>& predictions,
                                const Tensor<Scalar>& targets,
                                const std::vector<Tensor<Scalar>>& penalized_weights,
                                double lambda) {
  if (predictions.shape() != targets.shape())
    throw ShapeError("mse_l2_objective: prediction/target shapes differ");
  const int64_t n = predictions.numel();
  if (n == 0) throw ShapeError("mse_l2_objective: empty batch");
  if (lambda < 0) throw ShapeError("mse_l2_objective: lambda must be >= 0");

  Scalar mse = 0;
  for (int64_t i = 0; i < n; ++i) {
    const Scalar d = targets.data()[i] - predictions.data()[i];
    mse += d * d;
  }
  mse /= static_cast<Scalar>(n);
  Scalar penalty = 0;
  for (const auto& w : penalized_weights)
    for (int64_t i = 0; i < w.numel(); ++i) penalty += w.data()[i] * w.data()[i];

  Tensor<Scalar> out =
      Tensor<Scalar>::from({1}, {mse + static_cast<Scalar>(lambda) * penalty});
  out.set_requires_grad(true);
  std::vector<Tensor<Scalar>> parts = {predictions, targets, out};
  for (const auto& w : penalized_weights) parts.push_back(w);
  g.record(std::move(parts), [predictions, targets, penalized_weights, out, n, lambda]() {
    auto dpred = detail::adj(predictions), dout = detail::adj(out);
    const Scalar two_over_n = Scalar(2) / static_cast<Scalar>(n);
    for (int64_t i = 0; i < n; ++i)
      dpred[static_cast<size_t>(i)] +=
          dout[0] * two_over_n * (predictions.data()[i] - targets.data()[i]);
    for (const auto& w : penalized_weights) {
      auto dw = detail::adj(w);
      for (int64_t i = 0; i < w.numel(); ++i)
        dw[static_cast<size_t>(i)] +=
            dout[0] * Scalar(2) * static_cast<Scalar>(lambda) * w.data()[i];
    }
  });
  return out;
}

}  // namespace mmsurv
