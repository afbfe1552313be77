#include "mmsurv/metrics.hpp"

#include <cmath>
#include <cstdint>

namespace mmsurv {

double c_index(std::span<const EvalSample> samples) {
  const size_t n = samples.size();
  uint64_t comparable = 0;
  uint64_t concordant = 0;
  for (size_t i = 0; i < n; ++i) {
    if (samples[i].event != 1) continue;
    for (size_t j = 0; j < n; ++j) {
      if (samples[i].time < samples[j].time) {
        ++comparable;
        if (samples[i].predicted < samples[j].predicted) ++concordant;
      }
    }
  }
  if (comparable == 0)
    throw MetricError("undefined concordance: no comparable pair (need some i with event=1 and time_i < time_j)");
  return static_cast<double>(concordant) / static_cast<double>(comparable);
}

double mae_uncensored(std::span<const EvalSample> samples) {
  double abs_err = 0.0;
  uint64_t events = 0;
  for (const auto& s : samples) {
    if (s.event != 1) continue;
    abs_err += std::abs(s.time - s.predicted);
    ++events;
  }
  if (events == 0) throw MetricError("undefined MAE: all samples censored");
  return abs_err / static_cast<double>(events);
}

std::vector<EvalSample> make_samples(std::span<const double> predicted,
                                     std::span<const double> time,
                                     std::span<const int> event) {
  if (predicted.size() != time.size() || time.size() != event.size())
    throw ShapeError("make_samples: arrays must have identical length");
  std::vector<EvalSample> out(predicted.size());
  for (size_t i = 0; i < out.size(); ++i) {
    if (!std::isfinite(time[i]) || time[i] < 0.0)
      throw ShapeError("make_samples: time must be finite and non-negative");
    if (event[i] != 0 && event[i] != 1)
      throw ShapeError("make_samples: event flag must be 0 or 1");
    out[i] = EvalSample{predicted[i], time[i], event[i]};
  }
  return out;
}

}  // namespace mmsurv
