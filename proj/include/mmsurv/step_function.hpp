#pragma once

#include <algorithm>
#include <vector>

#include "mmsurv/common.hpp"

namespace mmsurv {

/// Right-continuous piecewise-constant function over time. Evaluation at
/// exactly a knot returns the post-jump value.
struct StepFunction {
  std::vector<double> knots;   // strictly increasing
  std::vector<double> values;  // one per knot
  double initial_value = 0.0;  // value before the first knot

  double operator()(double t) const {
    // last knot <= t
    auto it = std::upper_bound(knots.begin(), knots.end(), t);
    if (it == knots.begin()) return initial_value;
    return values[static_cast<size_t>(it - knots.begin()) - 1];
  }

  void validate() const {
    if (knots.size() != values.size())
      throw ShapeError("StepFunction: knots and values differ in length");
    for (size_t i = 1; i < knots.size(); ++i)
      if (!(knots[i] > knots[i - 1]))
        throw ShapeError("StepFunction: knots must be strictly increasing");
  }
};

}  // namespace mmsurv
