#pragma once

#include <fstream>
#include <vector>

#include "dualest/common.hpp"
#include "dualest/model.hpp"

namespace dualest {

// Time-invariant measurement operator and noise covariances, with the
// Mahalanobis weight M = (H Q H^T + R)^{-1} precomputed once per run.
struct ObservationSetup {
  Matrix h;  // p x n
  Matrix q;  // n x n, symmetric PSD
  Matrix r;  // p x p, symmetric PD
  Matrix m;  // p x p, (H Q H^T + R)^{-1}

  Eigen::Index state_size() const { return h.cols(); }
  Eigen::Index channels() const { return h.rows(); }

  // require_weight=false allows singular noise for simulation-only setups;
  // the filter rejects such setups because it needs M.
  static ObservationSetup create(Matrix h, Matrix q, Matrix r, bool require_weight = true) {
    ObservationSetup obs;
    obs.h = std::move(h);
    obs.q = std::move(q);
    obs.r = std::move(r);
    const Eigen::Index n = obs.h.cols();
    const Eigen::Index p = obs.h.rows();
    if (p == 0 || n == 0) throw invalid_input("ObservationSetup: empty H");
    if (obs.q.rows() != n || obs.q.cols() != n)
      throw invalid_input("ObservationSetup: Q must be n x n");
    if (obs.r.rows() != p || obs.r.cols() != p)
      throw invalid_input("ObservationSetup: R must be p x p");
    if ((obs.q - obs.q.transpose()).cwiseAbs().maxCoeff() > 1e-12)
      throw invalid_input("ObservationSetup: Q must be symmetric");
    if ((obs.r - obs.r.transpose()).cwiseAbs().maxCoeff() > 1e-12)
      throw invalid_input("ObservationSetup: R must be symmetric");
    const Matrix s0 = obs.h * obs.q * obs.h.transpose() + obs.r;
    Eigen::LLT<Matrix> llt(s0);
    if (llt.info() != Eigen::Success) {
      if (require_weight)
        throw invalid_input("ObservationSetup: H Q H^T + R is not positive definite");
      obs.m = Matrix(0, 0);
      return obs;
    }
    obs.m = llt.solve(Matrix::Identity(p, p));
    obs.m = symmetrize(obs.m);
    if ((obs.m * s0 - Matrix::Identity(p, p)).cwiseAbs().maxCoeff() > 1e-10)
      throw invalid_input("ObservationSetup: Mahalanobis weight failed the inverse check");
    return obs;
  }

  bool has_weight() const { return m.rows() == channels(); }
};

inline double mahalanobis(const Vector& z, const Matrix& m) {
  if (m.rows() != z.size() || m.cols() != z.size())
    throw invalid_input("mahalanobis: weight shape does not match vector");
  return z.dot(m * z);
}

// One recorded filter step; everything the backward pass consumes.
struct FilterStep {
  Vector x_pred;     // x_{t|t-1}
  Matrix p_pred;     // P_{t|t-1}
  Matrix s;          // innovation covariance S_t
  Matrix k_gain;     // K_t
  Matrix g;          // G_t = I - K_t H
  Vector innovation; // z_t = y_t - H x_pred
  Vector x_post;     // x_t
  Matrix p_post;     // P_t (resymmetrized)
  Matrix jac;        // F'_t, Jacobian of f at x_{t-1}
};

struct FilterTrajectory {
  Vector x0;
  Matrix p0;
  int warmup = 0;
  std::vector<FilterStep> steps;

  Eigen::Index length() const { return Eigen::Index(steps.size()); }
  const Vector& prior_state(Eigen::Index t) const {
    return t == 0 ? x0 : steps[t - 1].x_post;
  }
  const Matrix& prior_cov(Eigen::Index t) const {
    return t == 0 ? p0 : steps[t - 1].p_post;
  }
};

struct FilterResult {
  FilterTrajectory trajectory;
  double objective = 0.0;
};

// Extended Kalman filter over a measurement segment y (k x p, one row per
// step). Records every intermediate quantity and evaluates the objective as
// the mean post-warmup Mahalanobis error z^T M z.
inline FilterResult filter_segment(const NetworkModel& model, const ObservationSetup& obs,
                                   const Matrix& y, const Vector& x0, const Matrix& p0,
                                   int warmup) {
  const Eigen::Index n = model.size();
  const Eigen::Index p = obs.channels();
  const Eigen::Index k = y.rows();
  if (!obs.has_weight())
    throw invalid_input("filter_segment: observation setup lacks the Mahalanobis weight");
  if (obs.state_size() != n) throw invalid_input("filter_segment: H width must match model");
  if (y.cols() != p) throw invalid_input("filter_segment: measurement width must match H");
  if (k < 1) throw invalid_input("filter_segment: need at least one measurement");
  if (warmup < 0 || warmup >= k)
    throw invalid_input("filter_segment: warmup must lie in [0, k)");
  if (x0.size() != n || p0.rows() != n || p0.cols() != n)
    throw invalid_input("filter_segment: initial state/covariance shape mismatch");

  FilterResult result;
  FilterTrajectory& traj = result.trajectory;
  traj.x0 = x0;
  traj.p0 = symmetrize(p0);
  traj.warmup = warmup;
  traj.steps.resize(k);

  const Matrix ident = Matrix::Identity(n, n);
  Vector x = traj.x0;
  Matrix cov = traj.p0;
  double error_sum = 0.0;

  for (Eigen::Index t = 0; t < k; ++t) {
    FilterStep& st = traj.steps[t];
    st.jac = jacobian(model, x);
    st.x_pred = step(model, x);
    st.p_pred = symmetrize(st.jac * cov * st.jac.transpose() + obs.q);
    st.s = symmetrize(obs.h * st.p_pred * obs.h.transpose() + obs.r);

    Eigen::LLT<Matrix> llt(st.s);
    if (llt.info() != Eigen::Success)
      throw singular_innovation_error("filter_segment: innovation covariance not invertible",
                                      t + 1);
    // K = P_pred H^T S^{-1}, via solve on the transposed system.
    st.k_gain = llt.solve(obs.h * st.p_pred).transpose();
    st.g = ident - st.k_gain * obs.h;
    st.innovation = y.row(t).transpose() - obs.h * st.x_pred;
    st.x_post = st.x_pred + st.k_gain * st.innovation;
    st.p_post = symmetrize(st.g * st.p_pred);

    if (!all_finite(st.x_post) || !all_finite(st.p_post))
      throw divergence_error("filter_segment: filter state diverged", t + 1);

    if (t >= warmup) error_sum += mahalanobis(st.innovation, obs.m);
    x = st.x_post;
    cov = st.p_post;
  }

  result.objective = error_sum / double(k - warmup);
  return result;
}

// One row per step: x_pred, x_post, innovation, diag(P_post).
inline void dump_trajectory_csv(const FilterTrajectory& traj, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw invalid_input("cannot open for writing: " + path);
  if (traj.steps.empty()) throw invalid_input("dump_trajectory_csv: empty trajectory");
  const Eigen::Index n = traj.x0.size();
  const Eigen::Index p = traj.steps.front().innovation.size();
  out << "t";
  for (Eigen::Index i = 0; i < n; ++i) out << ",x_pred" << i;
  for (Eigen::Index i = 0; i < n; ++i) out << ",x_post" << i;
  for (Eigen::Index i = 0; i < p; ++i) out << ",z" << i;
  for (Eigen::Index i = 0; i < n; ++i) out << ",p_diag" << i;
  out << "\n";
  for (Eigen::Index t = 0; t < traj.length(); ++t) {
    const FilterStep& st = traj.steps[t];
    out << (t + 1);
    for (Eigen::Index i = 0; i < n; ++i) out << "," << format_double(st.x_pred[i]);
    for (Eigen::Index i = 0; i < n; ++i) out << "," << format_double(st.x_post[i]);
    for (Eigen::Index i = 0; i < p; ++i) out << "," << format_double(st.innovation[i]);
    for (Eigen::Index i = 0; i < n; ++i) out << "," << format_double(st.p_post(i, i));
    out << "\n";
  }
}

}  // namespace dualest
