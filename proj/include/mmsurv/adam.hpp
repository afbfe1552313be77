#pragma once

#include <cmath>
#include <vector>

#include "mmsurv/autodiff.hpp"

namespace mmsurv {

struct AdamHyper {
  double lr = 0.001;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Per-parameter first/second moment estimates plus the shared step count.
/// Moment buffers are allocated lazily on the first step so the state can be
/// constructed before the parameter list is final.
template <class Scalar>
struct AdamState {
  int64_t step_count = 0;
  std::vector<std::vector<Scalar>> first_moment;
  std::vector<std::vector<Scalar>> second_moment;
  AdamHyper hyper;
};

/// Bias-corrected Adam update, applied in place to params using their
/// accumulated .grad buffers. Update order follows the parameter list order.
template <class Scalar>
void adam_step(std::vector<Tensor<Scalar>>& params, AdamState<Scalar>& state) {
  if (state.first_moment.empty()) {
    state.first_moment.resize(params.size());
    state.second_moment.resize(params.size());
    for (size_t p = 0; p < params.size(); ++p) {
      state.first_moment[p].assign(static_cast<size_t>(params[p].numel()), Scalar(0));
      state.second_moment[p].assign(static_cast<size_t>(params[p].numel()), Scalar(0));
    }
  }
  if (state.first_moment.size() != params.size())
    throw ShapeError("adam_step: state does not match parameter list");

  state.step_count += 1;
  const double t = static_cast<double>(state.step_count);
  const double bc1 = 1.0 - std::pow(state.hyper.beta1, t);
  const double bc2 = 1.0 - std::pow(state.hyper.beta2, t);
  const Scalar b1 = static_cast<Scalar>(state.hyper.beta1);
  const Scalar b2 = static_cast<Scalar>(state.hyper.beta2);

  for (size_t p = 0; p < params.size(); ++p) {
    auto& m = state.first_moment[p];
    auto& v = state.second_moment[p];
    if (m.size() != static_cast<size_t>(params[p].numel()))
      throw ShapeError("adam_step: moment shape does not match parameter");
    const auto& grad = params[p].grad();
    Scalar* val = params[p].data();
    for (size_t i = 0; i < m.size(); ++i) {
      const Scalar gi = grad[i];
      m[i] = b1 * m[i] + (Scalar(1) - b1) * gi;
      v[i] = b2 * v[i] + (Scalar(1) - b2) * gi * gi;
      const double mhat = static_cast<double>(m[i]) / bc1;
      const double vhat = static_cast<double>(v[i]) / bc2;
      val[i] -= static_cast<Scalar>(state.hyper.lr * mhat /
                                    (std::sqrt(vhat) + state.hyper.eps));
    }
  }
}

template <class Scalar>
void zero_grads(std::vector<Tensor<Scalar>>& params) {
  for (auto& p : params) p.zero_grad();
}

}  // namespace mmsurv
