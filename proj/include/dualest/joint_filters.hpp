#pragma once

#include <chrono>
#include <cmath>
#include <vector>

#include "dualest/common.hpp"
#include "dualest/ekf.hpp"
#include "dualest/model.hpp"
#include "dualest/optimizer.hpp"

namespace dualest {

// Shared tuning for both joint filters. Parameter blocks get their own prior
// variance and random-walk process variance; the latter is annealed
// multiplicatively on a fixed cadence.
struct JointTuning {
  double param_init_var = 0.01;
  double param_process_var = 1e-5;
  long anneal_every = 50;
  double anneal_factor = 0.995;
  long resym_every = 50;
  double alpha = 1.0;  // UKF sigma-point scaling
  double beta = 2.0;
  double kappa = 0.0;
  double state_p0 = 1.0;

  void validate() const {
    if (anneal_factor <= 0 || anneal_factor > 1)
      throw invalid_input("JointTuning: anneal_factor must lie in (0, 1]");
    if (param_init_var < 0 || param_process_var < 0)
      throw invalid_input("JointTuning: variances must be nonnegative");
  }
};

// Mean/covariance over the augmented [states; parameters] vector. For the
// square-root filter, cov holds the lower-triangular factor instead.
struct AugmentedState {
  Vector mean;
  Matrix cov;
};

constexpr Eigen::Index sigma_point_count(Eigen::Index dim) { return 2 * dim + 1; }

struct JointResult {
  Vector fitted_params;
  NetworkModel fitted_model;
  Matrix state_estimates;  // T x n posterior state means
  std::vector<LossRecord> history;  // per-step Mahalanobis error, same format as train()
  double final_param_process_var = 0.0;
  double median_step_seconds = 0.0;
  long refactor_count = 0;
};

namespace detail {

inline Vector initial_theta(const NetworkModel& tmpl, const ParameterLayout& layout) {
  return pack_parameters(tmpl, layout).values;
}

// Lower-triangular rank-1 Cholesky update (sign=+1) / downdate (sign=-1).
// Returns false when a downdate would destroy positive-definiteness.
inline bool cholesky_rank1(Matrix& l, Vector x, double sign) {
  const Eigen::Index n = l.rows();
  for (Eigen::Index k = 0; k < n; ++k) {
    const double lkk = l(k, k);
    const double r2 = lkk * lkk + sign * x[k] * x[k];
    if (r2 <= 0.0 || lkk == 0.0) return false;
    const double r = std::sqrt(r2);
    const double c = r / lkk;
    const double s = x[k] / lkk;
    l(k, k) = r;
    if (k + 1 < n) {
      l.col(k).tail(n - k - 1) =
          (l.col(k).tail(n - k - 1) + sign * s * x.tail(n - k - 1)) / c;
      x.tail(n - k - 1) = c * x.tail(n - k - 1) - s * l.col(k).tail(n - k - 1);
    }
  }
  return true;
}

// Lower-triangular factor of the R part of a thin QR: for compound C (n x m,
// m >= n), returns lower-triangular S with S S^T = C C^T.
inline Matrix qr_sqrt(const Matrix& compound) {
  Eigen::HouseholderQR<Matrix> qr(compound.transpose());
  Matrix r = qr.matrixQR()
                 .topRows(compound.rows())
                 .triangularView<Eigen::Upper>();
  Matrix s = r.transpose();
  for (Eigen::Index j = 0; j < s.cols(); ++j)
    if (s(j, j) < 0) s.col(j) = -s.col(j);
  return s;
}

// Triangular square root of a (possibly slightly indefinite) covariance,
// clipping negative eigenvalues; used to recover from downdate failures.
inline Matrix refactor_sqrt(const Matrix& p) {
  const Matrix ps = symmetrize(p);
  Eigen::LLT<Matrix> llt(ps);
  if (llt.info() == Eigen::Success) return Matrix(llt.matrixL());
  Eigen::SelfAdjointEigenSolver<Matrix> eig(ps);
  const double floor = 1e-14 * std::max(1.0, eig.eigenvalues().cwiseAbs().maxCoeff());
  const Vector vals = eig.eigenvalues().cwiseMax(floor).cwiseSqrt();
  const Matrix root = eig.eigenvectors() * vals.asDiagonal();
  return qr_sqrt(root);
}

inline double median_seconds(std::vector<double> v) {
  if (v.empty()) return 0.0;
  const size_t skip = std::min<size_t>(10, v.size() - 1);
  return median_of(std::vector<double>(v.begin() + long(skip), v.end()));
}

}  // namespace detail

// Joint Extended Kalman Filter on the augmented system
//   [x; theta] -> [f(x, theta); theta] + noise diag(Q, q_theta I).
// The cross-Jacobian d f / d theta comes from the parameter layout. The
// parameter process variance is annealed and the covariance resymmetrized on
// their configured cadences.
inline JointResult jekf_run(const NetworkModel& tmpl, const ParameterLayout& layout,
                            const ObservationSetup& obs, const Matrix& y, const Vector& x0,
                            const JointTuning& tuning) {
  tuning.validate();
  const Eigen::Index n = tmpl.size();
  const Eigen::Index q = layout.total_size();
  const Eigen::Index d = n + q;
  const Eigen::Index steps = y.rows();
  if (steps < 1) throw invalid_input("jekf_run: need at least one measurement");
  if (obs.state_size() != n) throw invalid_input("jekf_run: observation setup mismatch");
  if (x0.size() != n) throw invalid_input("jekf_run: x0 length mismatch");

  AugmentedState st;
  st.mean = Vector::Zero(d);
  st.mean.head(n) = x0;
  st.mean.tail(q) = detail::initial_theta(tmpl, layout);
  st.cov = Matrix::Zero(d, d);
  st.cov.topLeftCorner(n, n) = tuning.state_p0 * Matrix::Identity(n, n);
  st.cov.bottomRightCorner(q, q) = tuning.param_init_var * Matrix::Identity(q, q);

  double param_var = tuning.param_process_var;
  NetworkModel model = tmpl;

  JointResult result;
  result.state_estimates.resize(steps, n);
  std::vector<double> step_seconds;
  step_seconds.reserve(size_t(steps));
  const auto start = std::chrono::steady_clock::now();

  Matrix f_aug = Matrix::Zero(d, d);
  f_aug.bottomRightCorner(q, q).setIdentity();

  for (Eigen::Index t = 0; t < steps; ++t) {
    const auto tic = std::chrono::steady_clock::now();
    unpack_parameters(model, layout, st.mean.tail(q));
    const Vector x = st.mean.head(n);

    f_aug.topLeftCorner(n, n) = jacobian(model, x);
    f_aug.topRightCorner(n, q) = param_step_jacobian(model, x, layout);

    Vector mean_pred(d);
    mean_pred.head(n) = step(model, x);
    mean_pred.tail(q) = st.mean.tail(q);
    Matrix p_pred = f_aug * st.cov * f_aug.transpose();
    p_pred.topLeftCorner(n, n) += obs.q;
    p_pred.bottomRightCorner(q, q) += param_var * Matrix::Identity(q, q);

    // H_aug = [H 0]: only the leading state block of P enters S and K.
    const Matrix s = obs.h * p_pred.topLeftCorner(n, n) * obs.h.transpose() + obs.r;
    Eigen::LLT<Matrix> llt(symmetrize(s));
    if (llt.info() != Eigen::Success)
      throw singular_innovation_error("jekf_run: innovation covariance not invertible", t + 1);
    const Matrix k_gain = llt.solve(obs.h * p_pred.leftCols(n).transpose()).transpose();
    const Vector innovation = y.row(t).transpose() - obs.h * mean_pred.head(n);

    st.mean = mean_pred + k_gain * innovation;
    st.cov = p_pred - k_gain * (obs.h * p_pred.topRows(n));

    if (!all_finite(st.mean) || !all_finite(st.cov))
      throw divergence_error("jekf_run: filter diverged", t + 1);

    if (tuning.resym_every > 0 && (t + 1) % tuning.resym_every == 0)
      st.cov = symmetrize(st.cov);
    if (tuning.anneal_every > 0 && (t + 1) % tuning.anneal_every == 0)
      param_var *= tuning.anneal_factor;

    result.state_estimates.row(t) = st.mean.head(n).transpose();
    const auto now = std::chrono::steady_clock::now();
    step_seconds.push_back(std::chrono::duration<double>(now - tic).count());
    result.history.push_back(LossRecord{long(t + 1), mahalanobis(innovation, obs.m), 0.0,
                                        std::chrono::duration<double>(now - start).count()});
  }

  result.fitted_params = st.mean.tail(q);
  unpack_parameters(model, layout, result.fitted_params);
  result.fitted_model = model;
  result.final_param_process_var = param_var;
  result.median_step_seconds = detail::median_seconds(std::move(step_seconds));
  return result;
}

// Square-root joint Unscented Kalman Filter on the same augmented system:
// 2(n+q)+1 sigma points, QR-based covariance square roots, rank-1
// updates/downdates on the triangular factor. Tuning is shared with jEKF;
// resymmetrization is inherent to the square-root form.
inline JointResult jukf_run(const NetworkModel& tmpl, const ParameterLayout& layout,
                            const ObservationSetup& obs, const Matrix& y, const Vector& x0,
                            const JointTuning& tuning) {
  tuning.validate();
  const Eigen::Index n = tmpl.size();
  const Eigen::Index q = layout.total_size();
  const Eigen::Index d = n + q;
  const Eigen::Index p = obs.channels();
  const Eigen::Index steps = y.rows();
  const Eigen::Index n_sigma = sigma_point_count(d);
  if (steps < 1) throw invalid_input("jukf_run: need at least one measurement");
  if (obs.state_size() != n) throw invalid_input("jukf_run: observation setup mismatch");
  if (x0.size() != n) throw invalid_input("jukf_run: x0 length mismatch");

  const double lambda = tuning.alpha * tuning.alpha * (double(d) + tuning.kappa) - double(d);
  const double gamma = std::sqrt(double(d) + lambda);
  const double wm0 = lambda / (double(d) + lambda);
  const double wc0 = wm0 + 1.0 - tuning.alpha * tuning.alpha + tuning.beta;
  const double wi = 0.5 / (double(d) + lambda);

  AugmentedState st;
  st.mean = Vector::Zero(d);
  st.mean.head(n) = x0;
  st.mean.tail(q) = detail::initial_theta(tmpl, layout);
  st.cov = Matrix::Zero(d, d);  // lower-triangular factor
  st.cov.topLeftCorner(n, n) = std::sqrt(tuning.state_p0) * Matrix::Identity(n, n);
  st.cov.bottomRightCorner(q, q) =
      std::sqrt(tuning.param_init_var) * Matrix::Identity(q, q);

  double param_var = tuning.param_process_var;
  const Matrix q_state_sqrt = covariance_sqrt(obs.q);
  const Matrix r_sqrt = covariance_sqrt(obs.r);
  NetworkModel model = tmpl;

  JointResult result;
  result.state_estimates.resize(steps, n);
  std::vector<double> step_seconds;
  step_seconds.reserve(size_t(steps));
  const auto start = std::chrono::steady_clock::now();

  Matrix sigma(d, n_sigma), propagated(d, n_sigma);
  const auto draw_sigma = [&](const Vector& mean, const Matrix& sqrt_cov) {
    sigma.col(0) = mean;
    for (Eigen::Index j = 0; j < d; ++j) {
      sigma.col(1 + j) = mean + gamma * sqrt_cov.col(j);
      sigma.col(1 + d + j) = mean - gamma * sqrt_cov.col(j);
    }
  };

  for (Eigen::Index t = 0; t < steps; ++t) {
    const auto tic = std::chrono::steady_clock::now();

    // Predict.
    draw_sigma(st.mean, st.cov);
    for (Eigen::Index i = 0; i < n_sigma; ++i) {
      unpack_parameters(model, layout, sigma.col(i).tail(q));
      propagated.col(i).head(n) = step(model, sigma.col(i).head(n));
      propagated.col(i).tail(q) = sigma.col(i).tail(q);
    }
    Vector mean_pred = wm0 * propagated.col(0);
    for (Eigen::Index i = 1; i < n_sigma; ++i) mean_pred += wi * propagated.col(i);

    Matrix compound(d, 2 * d + d);
    const double swi = std::sqrt(wi);
    for (Eigen::Index i = 1; i < n_sigma; ++i)
      compound.col(i - 1) = swi * (propagated.col(i) - mean_pred);
    compound.rightCols(d).setZero();
    compound.block(0, 2 * d, n, n) = q_state_sqrt;
    compound.bottomRightCorner(q, q).diagonal().setConstant(std::sqrt(param_var));
    Matrix s_pred = detail::qr_sqrt(compound);
    {
      const Vector dev0 = propagated.col(0) - mean_pred;
      if (!detail::cholesky_rank1(s_pred, dev0, wc0 >= 0 ? 1.0 : -1.0)) {
        s_pred = detail::refactor_sqrt(s_pred * s_pred.transpose() +
                                       wc0 * dev0 * dev0.transpose());
        ++result.refactor_count;
      }
    }

    // Measurement update on redrawn sigma points (observation is linear in
    // the state block).
    draw_sigma(mean_pred, s_pred);
    Matrix z_sigma(p, n_sigma);
    for (Eigen::Index i = 0; i < n_sigma; ++i)
      z_sigma.col(i) = obs.h * sigma.col(i).head(n);
    Vector z_mean = wm0 * z_sigma.col(0);
    for (Eigen::Index i = 1; i < n_sigma; ++i) z_mean += wi * z_sigma.col(i);

    Matrix z_compound(p, 2 * d + p);
    for (Eigen::Index i = 1; i < n_sigma; ++i)
      z_compound.col(i - 1) = swi * (z_sigma.col(i) - z_mean);
    z_compound.rightCols(p) = r_sqrt;
    Matrix s_y = detail::qr_sqrt(z_compound);
    {
      const Vector dev0 = z_sigma.col(0) - z_mean;
      if (!detail::cholesky_rank1(s_y, dev0, wc0 >= 0 ? 1.0 : -1.0)) {
        s_y = detail::refactor_sqrt(s_y * s_y.transpose() + wc0 * dev0 * dev0.transpose());
        ++result.refactor_count;
      }
    }

    Matrix p_xz = wc0 * (sigma.col(0) - mean_pred) * (z_sigma.col(0) - z_mean).transpose();
    for (Eigen::Index i = 1; i < n_sigma; ++i)
      p_xz += wi * (sigma.col(i) - mean_pred) * (z_sigma.col(i) - z_mean).transpose();

    const Matrix w = s_y.triangularView<Eigen::Lower>().solve(p_xz.transpose());
    const Matrix k_gain =
        s_y.transpose().triangularView<Eigen::Upper>().solve(w).transpose();

    const Vector innovation = y.row(t).transpose() - z_mean;
    st.mean = mean_pred + k_gain * innovation;
    const Matrix u = k_gain * s_y;
    st.cov = s_pred;
    bool ok = true;
    for (Eigen::Index j = 0; j < p && ok; ++j)
      ok = detail::cholesky_rank1(st.cov, u.col(j), -1.0);
    if (!ok) {
      Matrix full = s_pred * s_pred.transpose() - u * u.transpose();
      st.cov = detail::refactor_sqrt(full);
      ++result.refactor_count;
    }

    if (!all_finite(st.mean) || !all_finite(st.cov))
      throw divergence_error("jukf_run: filter diverged", t + 1);

    if (tuning.anneal_every > 0 && (t + 1) % tuning.anneal_every == 0)
      param_var *= tuning.anneal_factor;

    result.state_estimates.row(t) = st.mean.head(n).transpose();
    const auto now = std::chrono::steady_clock::now();
    step_seconds.push_back(std::chrono::duration<double>(now - tic).count());
    result.history.push_back(LossRecord{long(t + 1), mahalanobis(innovation, obs.m), 0.0,
                                        std::chrono::duration<double>(now - start).count()});
  }

  result.fitted_params = st.mean.tail(q);
  unpack_parameters(model, layout, result.fitted_params);
  result.fitted_model = model;
  result.final_param_process_var = param_var;
  result.median_step_seconds = detail::median_seconds(std::move(step_seconds));
  return result;
}

}  // namespace dualest
