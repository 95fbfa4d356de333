#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>
#include <vector>

#include "dualest/common.hpp"
#include "dualest/ekf.hpp"
#include "dualest/joint_filters.hpp"
#include "dualest/model.hpp"
#include "dualest/simgen.hpp"

namespace dualest {

struct ParameterScore {
  double corr = 0.0;
  double rmse = 0.0;
};

// Pearson correlation and RMSE between two flat parameter vectors.
inline ParameterScore parameter_score(const Vector& fitted, const Vector& truth) {
  if (fitted.size() != truth.size())
    throw invalid_input("parameter_score: length mismatch");
  const Eigen::Index n = fitted.size();
  if (n < 2)
    throw invalid_input("parameter_score: correlation undefined for fewer than 2 entries");
  const double mf = fitted.mean();
  const double mt = truth.mean();
  const Vector df = fitted.array() - mf;
  const Vector dt = truth.array() - mt;
  const double denom = std::sqrt(df.squaredNorm() * dt.squaredNorm());
  ParameterScore score;
  score.corr = denom > 0 ? df.dot(dt) / denom : 0.0;
  score.rmse = std::sqrt((fitted - truth).squaredNorm() / double(n));
  return score;
}

// Scored over the free (unmasked) entries only, in row-major order.
inline ParameterScore parameter_score(const Matrix& fitted_b, const Matrix& true_b,
                                      const BoolMask& mask) {
  if (fitted_b.rows() != true_b.rows() || fitted_b.cols() != true_b.cols() ||
      mask.rows() != fitted_b.rows() || mask.cols() != fitted_b.cols())
    throw invalid_input("parameter_score: shape mismatch");
  std::vector<double> f, t;
  for (Eigen::Index i = 0; i < fitted_b.rows(); ++i)
    for (Eigen::Index j = 0; j < fitted_b.cols(); ++j)
      if (mask(i, j)) {
        f.push_back(fitted_b(i, j));
        t.push_back(true_b(i, j));
      }
  Vector fv = Eigen::Map<Vector>(f.data(), Eigen::Index(f.size()));
  Vector tv = Eigen::Map<Vector>(t.data(), Eigen::Index(t.size()));
  return parameter_score(fv, tv);
}

enum class StateEstimator { EKF, UKF };

// Held-out state-estimation error: run the chosen estimator with the fitted
// model on fresh data from the true system, score x_hat against the true
// states. All estimators start from x0 = 0, P0 = I so comparisons differ only
// through the fitted model and the estimator. Divergence scores as infinity.
inline double crossval_state_mse(const NetworkModel& fitted, const ObservationSetup& obs,
                                 const GroundTruth& fresh, StateEstimator estimator) {
  const Eigen::Index n = fitted.size();
  const Eigen::Index horizon = fresh.measurements.rows();
  if (fresh.states.rows() != horizon)
    throw invalid_input("crossval_state_mse: states/measurements length mismatch");
  const Vector x0 = Vector::Zero(n);
  Matrix estimates;
  try {
    if (estimator == StateEstimator::EKF) {
      const FilterResult fr =
          filter_segment(fitted, obs, fresh.measurements, x0, Matrix::Identity(n, n), 0);
      estimates.resize(horizon, n);
      for (Eigen::Index t = 0; t < horizon; ++t)
        estimates.row(t) = fr.trajectory.steps[t].x_post.transpose();
    } else {
      const ParameterLayout empty = ParameterLayout::create(fitted, false, false, false);
      JointTuning tuning;
      tuning.state_p0 = 1.0;
      estimates = jukf_run(fitted, empty, obs, fresh.measurements, x0, tuning).state_estimates;
    }
  } catch (const divergence_error&) {
    return std::numeric_limits<double>::infinity();
  } catch (const singular_innovation_error&) {
    return std::numeric_limits<double>::infinity();
  }
  return (estimates - fresh.states).squaredNorm() / double(horizon * n);
}

// One row of the benchmark results table.
struct ScoreCard {
  std::string method;
  std::uint64_t seed = 0;
  Eigen::Index n = 0;
  Eigen::Index replicate = 0;
  double param_corr = 0.0;
  double param_rmse = 0.0;
  double state_mse_ekf = 0.0;
  double state_mse_ukf = 0.0;
  double objective_final = 0.0;
  double wall_time_per_iteration = 0.0;  // kept out of the deterministic CSVs
};

// Linear-interpolation quantile (numpy default convention).
inline double quantile_linear(std::vector<double> v, double q) {
  if (v.empty()) throw invalid_input("quantile_linear: empty sample");
  if (q < 0 || q > 1) throw invalid_input("quantile_linear: q must lie in [0, 1]");
  std::sort(v.begin(), v.end());
  const double pos = q * double(v.size() - 1);
  const size_t lo = size_t(std::floor(pos));
  const double frac = pos - double(lo);
  if (lo + 1 >= v.size()) return v.back();
  return v[lo] * (1.0 - frac) + v[lo + 1] * frac;
}

inline double median(std::vector<double> v) { return quantile_linear(std::move(v), 0.5); }

}  // namespace dualest
