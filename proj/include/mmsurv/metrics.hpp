#pragma once

#include <span>
#include <vector>

#include "mmsurv/common.hpp"

namespace mmsurv {

/// One scored patient: a predicted survival time (same normalized scale as
/// the labels), the observed time, and the event flag (1 = death observed,
/// 0 = right-censored).
struct EvalSample {
  double predicted = 0.0;
  double time = 0.0;
  int event = 0;
};

/// Concordance index with strict inequalities: a pair (i, j) is comparable
/// when e_i = 1 and y_i < y_j; it counts as concordant when additionally
/// yhat_i < yhat_j. Ties in predictions or times earn no credit.
/// Throws MetricError when no comparable pair exists.
double c_index(std::span<const EvalSample> samples);

/// Mean absolute error over uncensored samples only.
/// Throws MetricError when every sample is censored.
double mae_uncensored(std::span<const EvalSample> samples);

/// Convenience assembly from parallel arrays; validates finiteness,
/// non-negative times and binary event flags.
std::vector<EvalSample> make_samples(std::span<const double> predicted,
                                     std::span<const double> time,
                                     std::span<const int> event);

}  // namespace mmsurv
