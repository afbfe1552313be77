#include "mmsurv/classical.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace mmsurv {

namespace {

struct Grouped {
  std::vector<size_t> order;          // indices sorted by time ascending
  std::vector<size_t> group_start;    // offsets into `order`, one per distinct time
  std::vector<double> group_time;
  std::vector<int> group_deaths;
  std::vector<int> group_total;
};

void validate_surv_input(std::span<const double> times, std::span<const int> events,
                         bool require_nonneg) {
  if (times.empty()) throw ShapeError("survival input must be nonempty");
  if (times.size() != events.size())
    throw ShapeError("times and events must have the same length");
  for (size_t i = 0; i < times.size(); ++i) {
    if (!std::isfinite(times[i])) throw ShapeError("times must be finite");
    if (require_nonneg && times[i] < 0.0) throw ShapeError("times must be non-negative");
    if (events[i] != 0 && events[i] != 1)
      throw ShapeError("event flags must be 0 or 1");
  }
}

Grouped group_by_time(std::span<const double> times, std::span<const int> events) {
  Grouped g;
  g.order.resize(times.size());
  std::iota(g.order.begin(), g.order.end(), size_t{0});
  std::sort(g.order.begin(), g.order.end(),
            [&](size_t a, size_t b) { return times[a] < times[b]; });
  for (size_t k = 0; k < g.order.size();) {
    const double t = times[g.order[k]];
    int d = 0, total = 0;
    g.group_start.push_back(k);
    while (k < g.order.size() && times[g.order[k]] == t) {
      d += events[g.order[k]];
      ++total;
      ++k;
    }
    g.group_time.push_back(t);
    g.group_deaths.push_back(d);
    g.group_total.push_back(total);
  }
  return g;
}

}  // namespace

StepFunction kaplan_meier(std::span<const double> times, std::span<const int> events) {
  validate_surv_input(times, events, /*require_nonneg=*/true);
  const Grouped g = group_by_time(times, events);

  StepFunction sf;
  sf.initial_value = 1.0;
  double surv = 1.0;
  size_t at_risk = times.size();
  for (size_t k = 0; k < g.group_time.size(); ++k) {
    const int d = g.group_deaths[k];
    if (d > 0) {
      surv *= 1.0 - static_cast<double>(d) / static_cast<double>(at_risk);
      sf.knots.push_back(g.group_time[k]);
      sf.values.push_back(surv);
    }
    at_risk -= static_cast<size_t>(g.group_total[k]);
  }
  sf.validate();
  return sf;
}

StepFunction nelson_aalen(std::span<const double> times, std::span<const int> events) {
  validate_surv_input(times, events, /*require_nonneg=*/true);
  const Grouped g = group_by_time(times, events);

  StepFunction sf;
  sf.initial_value = 0.0;
  double hazard = 0.0;
  size_t at_risk = times.size();
  for (size_t k = 0; k < g.group_time.size(); ++k) {
    const int d = g.group_deaths[k];
    if (d > 0) {
      hazard += static_cast<double>(d) / static_cast<double>(at_risk);
      sf.knots.push_back(g.group_time[k]);
      sf.values.push_back(hazard);
    }
    at_risk -= static_cast<size_t>(g.group_total[k]);
  }
  sf.validate();
  return sf;
}

namespace {

// Breslow log partial likelihood, gradient and information matrix at beta.
// Walks distinct times descending, so the risk-set sums S0, S1, S2 grow by
// addition of positive terms.
struct PartialLik {
  double loglik = 0.0;
  Eigen::VectorXd grad;
  Eigen::MatrixXd info;  // negative Hessian
};

PartialLik breslow_quantities(const Eigen::MatrixXd& X, const Grouped& g,
                              std::span<const int> events, const Eigen::VectorXd& beta,
                              bool want_derivatives) {
  const auto p = X.cols();
  PartialLik out;
  out.grad = Eigen::VectorXd::Zero(p);
  out.info = Eigen::MatrixXd::Zero(p, p);

  const Eigen::VectorXd lp = X * beta;
  const Eigen::VectorXd w = lp.array().exp();

  double s0 = 0.0;
  Eigen::VectorXd s1 = Eigen::VectorXd::Zero(p);
  Eigen::MatrixXd s2 = Eigen::MatrixXd::Zero(p, p);

  const size_t n_groups = g.group_time.size();
  for (size_t kk = n_groups; kk-- > 0;) {
    const size_t begin = g.group_start[kk];
    const size_t end = begin + static_cast<size_t>(g.group_total[kk]);
    for (size_t s = begin; s < end; ++s) {
      const size_t i = g.order[s];
      s0 += w(static_cast<Eigen::Index>(i));
      if (want_derivatives) {
        s1 += w(static_cast<Eigen::Index>(i)) * X.row(static_cast<Eigen::Index>(i)).transpose();
        s2 += w(static_cast<Eigen::Index>(i)) *
              (X.row(static_cast<Eigen::Index>(i)).transpose() * X.row(static_cast<Eigen::Index>(i)));
      }
    }
    const int d = g.group_deaths[kk];
    if (d == 0) continue;
    for (size_t s = begin; s < end; ++s) {
      const size_t i = g.order[s];
      if (events[i] == 1) {
        out.loglik += lp(static_cast<Eigen::Index>(i));
        if (want_derivatives) out.grad += X.row(static_cast<Eigen::Index>(i)).transpose();
      }
    }
    out.loglik -= d * std::log(s0);
    if (want_derivatives) {
      const Eigen::VectorXd xbar = s1 / s0;
      out.grad -= d * xbar;
      out.info += d * (s2 / s0 - xbar * xbar.transpose());
    }
  }
  return out;
}

}  // namespace

double cox_log_partial_likelihood(const Eigen::MatrixXd& covariates,
                                  std::span<const double> times,
                                  std::span<const int> events,
                                  const Eigen::VectorXd& beta) {
  validate_surv_input(times, events, /*require_nonneg=*/false);
  if (covariates.rows() != static_cast<Eigen::Index>(times.size()))
    throw ShapeError("cox: covariate rows must match number of subjects");
  if (covariates.cols() != beta.size())
    throw ShapeError("cox: beta length must match covariate columns");
  const Grouped g = group_by_time(times, events);
  return breslow_quantities(covariates, g, events, beta, false).loglik;
}

CoxModel cox_fit(const Eigen::MatrixXd& covariates, std::span<const double> times,
                 std::span<const int> events, const CoxFitConfig& config) {
  validate_surv_input(times, events, /*require_nonneg=*/false);
  const auto n = covariates.rows();
  const auto p = covariates.cols();
  if (n != static_cast<Eigen::Index>(times.size()))
    throw ShapeError("cox_fit: covariate rows must match number of subjects");
  if (n < 2) throw ShapeError("cox_fit: need at least 2 subjects");
  if (std::find(events.begin(), events.end(), 1) == events.end())
    throw ShapeError("cox_fit: need at least one event");
  if (!covariates.allFinite()) throw ShapeError("cox_fit: covariates must be finite");

  // Standardize columns; constant columns stay out of the optimization and
  // end up with coefficient exactly 0.
  Eigen::VectorXd mean = covariates.colwise().mean();
  Eigen::VectorXd sd(p);
  std::vector<Eigen::Index> active;
  for (Eigen::Index j = 0; j < p; ++j) {
    const double var = (covariates.col(j).array() - mean(j)).square().sum() / static_cast<double>(n);
    sd(j) = std::sqrt(var);
    if (sd(j) > 0.0) active.push_back(j);
  }
  const auto pa = static_cast<Eigen::Index>(active.size());
  Eigen::MatrixXd Z(n, pa);
  for (Eigen::Index k = 0; k < pa; ++k)
    Z.col(k) = (covariates.col(active[static_cast<size_t>(k)]).array() - mean(active[static_cast<size_t>(k)])) /
               sd(active[static_cast<size_t>(k)]);

  const Grouped g = group_by_time(times, events);

  auto finish = [&](const Eigen::VectorXd& beta_std, int iters, double loglik,
                    std::vector<double> path) {
    CoxModel m;
    m.coefficients = Eigen::VectorXd::Zero(p);
    for (Eigen::Index k = 0; k < pa; ++k)
      m.coefficients(active[static_cast<size_t>(k)]) = beta_std(k) / sd(active[static_cast<size_t>(k)]);
    m.n_iterations = iters;
    m.final_log_partial_likelihood = loglik;
    m.log_likelihood_path = std::move(path);
    // Breslow cumulative baseline hazard on the original covariate scale.
    const Eigen::VectorXd w = (covariates * m.coefficients).array().exp();
    std::vector<double> s0_at_group(g.group_time.size(), 0.0);
    double s0 = 0.0;
    for (size_t kk = g.group_time.size(); kk-- > 0;) {
      const size_t begin = g.group_start[kk];
      const size_t end = begin + static_cast<size_t>(g.group_total[kk]);
      for (size_t s = begin; s < end; ++s) s0 += w(static_cast<Eigen::Index>(g.order[s]));
      s0_at_group[kk] = s0;
    }
    m.baseline_hazard.initial_value = 0.0;
    double cumhaz = 0.0;
    for (size_t kk = 0; kk < g.group_time.size(); ++kk) {
      if (g.group_deaths[kk] == 0) continue;
      cumhaz += g.group_deaths[kk] / s0_at_group[kk];
      m.baseline_hazard.knots.push_back(g.group_time[kk]);
      m.baseline_hazard.values.push_back(cumhaz);
    }
    m.baseline_hazard.validate();
    return m;
  };

  Eigen::VectorXd beta = Eigen::VectorXd::Zero(pa);
  PartialLik cur = breslow_quantities(Z, g, events, beta, true);
  std::vector<double> path{cur.loglik};

  if (pa == 0) return finish(beta, 0, cur.loglik, std::move(path));

  for (int iter = 1; iter <= config.max_iter; ++iter) {
    if (cur.grad.cwiseAbs().maxCoeff() <= config.tol)
      return finish(beta, iter - 1, cur.loglik, std::move(path));

    Eigen::VectorXd step = cur.info.ldlt().solve(cur.grad);

    // Step-halving: accept only steps that do not decrease the likelihood.
    double scale = 1.0;
    Eigen::VectorXd beta_new;
    PartialLik next;
    bool accepted = false;
    for (int h = 0; h <= 10; ++h) {
      beta_new = beta + scale * step;
      next = breslow_quantities(Z, g, events, beta_new, true);
      if (next.loglik >= cur.loglik - 1e-12 * (1.0 + std::abs(cur.loglik))) {
        accepted = true;
        break;
      }
      scale *= 0.5;
    }
    if (!accepted)
      throw CoxConvergenceError("cox_fit: step-halving failed to improve the log partial likelihood",
                                finish(beta, iter, cur.loglik, path));

    beta = beta_new;
    cur = next;
    path.push_back(cur.loglik);

    if (beta.cwiseAbs().maxCoeff() > config.beta_bound)
      throw CoxConvergenceError(
          "cox_fit: divergent coefficient (|beta| exceeds bound; monotone likelihood / separation)",
          finish(beta, iter, cur.loglik, path));

    if (cur.grad.cwiseAbs().maxCoeff() <= config.tol)
      return finish(beta, iter, cur.loglik, std::move(path));
  }
  throw CoxConvergenceError("cox_fit: no convergence within max_iter",
                            finish(beta, config.max_iter, cur.loglik, path));
}

Eigen::VectorXd cox_risk_scores(const CoxModel& model, const Eigen::MatrixXd& covariates) {
  if (covariates.cols() != model.coefficients.size())
    throw ShapeError("cox_risk_scores: covariate width does not match model");
  return -(covariates * model.coefficients);
}

}  // namespace mmsurv
