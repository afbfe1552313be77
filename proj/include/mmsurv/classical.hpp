#pragma once

#include <Eigen/Dense>
#include <span>
#include <vector>

#include "mmsurv/common.hpp"
#include "mmsurv/step_function.hpp"

namespace mmsurv {

/// Kaplan-Meier product-limit survival curve. Knots appear at distinct
/// event times only; censored observations shrink the risk set but add
/// no knot. initial_value is 1.
StepFunction kaplan_meier(std::span<const double> times, std::span<const int> events);

/// Nelson-Aalen cumulative hazard: H(t) = sum over event times <= t of d/n.
/// initial_value is 0.
StepFunction nelson_aalen(std::span<const double> times, std::span<const int> events);

struct CoxFitConfig {
  int max_iter = 50;
  double tol = 1e-8;           // gradient max-norm
  double beta_bound = 50.0;    // |beta| beyond this (standardized scale) = separation
};

struct CoxModel {
  Eigen::VectorXd coefficients;      // on the original covariate scale
  StepFunction baseline_hazard;      // Breslow cumulative baseline hazard
  int n_iterations = 0;
  double final_log_partial_likelihood = 0.0;
  std::vector<double> log_likelihood_path;  // per accepted iterate, starts at beta=0
};

struct CoxConvergenceError : std::runtime_error {
  CoxModel last_iterate;
  CoxConvergenceError(const std::string& msg, CoxModel last)
      : std::runtime_error(msg), last_iterate(std::move(last)) {}
};

/// Newton-Raphson fit of the Cox proportional hazards model with Breslow tie
/// handling. Covariates are standardized internally; coefficients are
/// reported on the original scale. Step-halving keeps the log partial
/// likelihood non-decreasing across accepted steps.
CoxModel cox_fit(const Eigen::MatrixXd& covariates, std::span<const double> times,
                 std::span<const int> events, const CoxFitConfig& config = {});

/// Breslow log partial likelihood at a fixed beta (no fitting). Exposed so
/// callers and tests can score candidate coefficients independently.
double cox_log_partial_likelihood(const Eigen::MatrixXd& covariates,
                                  std::span<const double> times,
                                  std::span<const int> events,
                                  const Eigen::VectorXd& beta);

/// Scores = -(X * beta) per row, so larger means longer predicted survival
/// and the result can be fed straight into c_index.
Eigen::VectorXd cox_risk_scores(const CoxModel& model, const Eigen::MatrixXd& covariates);

}  // namespace mmsurv
