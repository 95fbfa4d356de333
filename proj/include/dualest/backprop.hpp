#pragma once

#include <fstream>
#include <vector>

#include "dualest/common.hpp"
#include "dualest/ekf.hpp"
#include "dualest/model.hpp"

namespace dualest {

// Accumulated objective value and gradients for one filtered segment.
struct GradientReport {
  double objective = 0.0;
  Vector grad;  // packed per layout
  ParameterLayout layout;
  Matrix d_a;  // per-block views; filled for the blocks the route computes
  Matrix d_b;
  Vector d_c;
  long t0 = 0;
  Eigen::Index k = 0;
  int warmup = 0;
};

// Per-step adjoint quantities, recorded when a debug sink is supplied.
struct AdjointState {
  Vector d_x;       // dObjective/dx_t
  Matrix d_p;       // dObjective/dP_t
  Vector d_x_pred;  // dObjective/dx_{t|t-1}
  Matrix u;         // rank-one covariance-path term U_t
  Matrix z_mat;     // Z_t
};

namespace detail {

inline void check_backward_inputs(const FilterTrajectory& traj, const NetworkModel& model,
                                  const ObservationSetup& obs, const Matrix& y) {
  const Eigen::Index n = model.size();
  if (obs.state_size() != n)
    throw invalid_input("backward: observation setup does not match model");
  if (traj.length() == 0) throw invalid_input("backward: empty trajectory");
  if (y.rows() != traj.length() || y.cols() != obs.channels())
    throw invalid_input("backward: measurement block does not match trajectory");
  if (traj.x0.size() != n)
    throw invalid_input("backward: trajectory state dimension does not match model");
  // Cheap consistency probe: innovations must reproduce from (y, H, x_pred).
  for (Eigen::Index t = 0; t < traj.length(); ++t) {
    const Vector z = y.row(t).transpose() - obs.h * traj.steps[t].x_pred;
    if ((z - traj.steps[t].innovation).cwiseAbs().maxCoeff() > 1e-9)
      throw invalid_input("backward: trajectory was not produced from these measurements");
  }
}

// Shared per-step adjoint recursion. The U term uses the exact adjoint of the
// implemented forward pass: U_t = (G_t^T dx_t)(H^T S_t^{-1} z_t)^T. Only the
// symmetric part of U enters, via Psi.
struct StepAdjoint {
  Vector d_x_pred;
  Matrix u;
  Matrix z_mat;
  Matrix zp;       // Z_t P_{t-1}
  Matrix psi;      // (U + U^T)/2 + G^T dP G
};

inline StepAdjoint step_adjoint(const FilterTrajectory& traj, const ObservationSetup& obs,
                                Eigen::Index t, double inv_n, const Vector& d_x,
                                const Matrix& d_p) {
  const FilterStep& st = traj.steps[t];
  StepAdjoint adj;
  const Vector g_dx = st.g.transpose() * d_x;
  adj.d_x_pred = g_dx;
  if (t >= traj.warmup)
    adj.d_x_pred -= (2.0 * inv_n) * (obs.h.transpose() * (obs.m * st.innovation));
  Eigen::LLT<Matrix> llt(st.s);
  if (llt.info() != Eigen::Success)
    throw singular_innovation_error("backward: innovation covariance not invertible", t + 1);
  const Vector a = obs.h.transpose() * llt.solve(st.innovation);
  adj.u = g_dx * a.transpose();
  adj.psi = 0.5 * (adj.u + adj.u.transpose()) + st.g.transpose() * d_p * st.g;
  adj.z_mat = 2.0 * adj.psi * st.jac;
  adj.zp = adj.z_mat * traj.prior_cov(t);
  return adj;
}

inline double objective_from_trajectory(const FilterTrajectory& traj,
                                        const ObservationSetup& obs) {
  double sum = 0.0;
  for (Eigen::Index t = traj.warmup; t < traj.length(); ++t)
    sum += mahalanobis(traj.steps[t].innovation, obs.m);
  return sum / double(traj.length() - traj.warmup);
}

}  // namespace detail

// Backward accumulation of the objective gradient through the recorded filter
// recursion, in the structure-agnostic form: second-derivative and parameter
// contractions go through the model's per-coordinate dense derivative
// callbacks and the trace identity. Quadratic-per-coordinate cost; intended
// for validation and small systems.
inline GradientReport backward_general(const FilterTrajectory& traj, const NetworkModel& model,
                                       const ObservationSetup& obs, const Matrix& y,
                                       const ParameterLayout& layout,
                                       std::vector<AdjointState>* debug = nullptr) {
  detail::check_backward_inputs(traj, model, obs, y);
  const Eigen::Index n = model.size();
  const Eigen::Index k = traj.length();
  const double inv_n = 1.0 / double(k - traj.warmup);

  GradientReport report;
  report.layout = layout;
  report.grad = Vector::Zero(layout.total_size());
  report.d_a = Matrix::Zero(n, n);
  report.d_b = Matrix::Zero(n, n);
  report.d_c = Vector::Zero(n);
  report.k = k;
  report.warmup = traj.warmup;
  report.objective = detail::objective_from_trajectory(traj, obs);
  if (debug) debug->assign(k, AdjointState{});

  Vector d_x = Vector::Zero(n);
  Matrix d_p = Matrix::Zero(n, n);

  for (Eigen::Index t = k - 1; t >= 0; --t) {
    const FilterStep& st = traj.steps[t];
    const Vector& x_prev = traj.prior_state(t);
    const detail::StepAdjoint adj = detail::step_adjoint(traj, obs, t, inv_n, d_x, d_p);

    if (debug)
      (*debug)[t] = AdjointState{d_x, d_p, adj.d_x_pred, adj.u, adj.z_mat};

    for (Eigen::Index m = 0; m < layout.total_size(); ++m) {
      const Vector df = param_step_derivative(model, x_prev, layout, m);
      const Matrix dj = param_jacobian_derivative(model, x_prev, layout, m);
      report.grad[m] += df.dot(adj.d_x_pred) + (adj.zp.transpose() * dj).trace();
    }

    Vector d_x_prev = st.jac.transpose() * adj.d_x_pred;
    for (Eigen::Index i = 0; i < n; ++i) {
      const Matrix dfdx = jacobian_state_derivative(model, x_prev, i);
      d_x_prev[i] += (adj.zp.transpose() * dfdx).trace();
    }

    d_p = st.jac.transpose() * adj.psi * st.jac;
    d_x = d_x_prev;
    if (!all_finite(d_x) || !all_finite(d_p))
      throw divergence_error("backward_general: adjoint state diverged", t + 1);
  }

  // Per-block views from the packed vector.
  for (const auto& block : layout.blocks) {
    if (block.name == "A") {
      for (Eigen::Index i = 0; i < n; ++i)
        for (Eigen::Index j = 0; j < n; ++j) report.d_a(i, j) = report.grad[block.offset + i * n + j];
    } else if (block.name == "B.free") {
      for (Eigen::Index m = 0; m < block.size; ++m)
        report.d_b(layout.b_free[m].first, layout.b_free[m].second) = report.grad[block.offset + m];
    } else if (block.name == "c") {
      report.d_c = report.grad.segment(block.offset, n);
    }
  }
  return report;
}

// Same mathematical result on the recurrent-network family, computed via the
// specialized closed forms: Hadamard/column-sum contraction for the
// second-derivative term, outer products for the A and B blocks.
inline GradientReport backward_network(const FilterTrajectory& traj, const NetworkModel& model,
                                       const ObservationSetup& obs, const Matrix& y,
                                       const ParameterLayout& layout,
                                       std::vector<AdjointState>* debug = nullptr) {
  detail::check_backward_inputs(traj, model, obs, y);
  const Eigen::Index n = model.size();
  const Eigen::Index k = traj.length();
  const double inv_n = 1.0 / double(k - traj.warmup);

  GradientReport report;
  report.layout = layout;
  report.d_a = Matrix::Zero(n, n);
  report.d_b = Matrix::Zero(n, n);
  report.d_c = Vector::Zero(n);
  report.k = k;
  report.warmup = traj.warmup;
  report.objective = detail::objective_from_trajectory(traj, obs);
  if (debug) debug->assign(k, AdjointState{});

  const Vector gain_sq = model.gain.cwiseProduct(model.gain);
  Vector d_x = Vector::Zero(n);
  Matrix d_p = Matrix::Zero(n, n);

  for (Eigen::Index t = k - 1; t >= 0; --t) {
    const FilterStep& st = traj.steps[t];
    const Vector& x_prev = traj.prior_state(t);
    const detail::StepAdjoint adj = detail::step_adjoint(traj, obs, t, inv_n, d_x, d_p);

    if (debug)
      (*debug)[t] = AdjointState{d_x, d_p, adj.d_x_pred, adj.u, adj.z_mat};

    const Vector phi = model.activation_values(x_prev);
    const Vector slope = model.activation_slopes(x_prev);
    const Vector curv = model.activation_curvatures(x_prev);
    // [(B o ZP)^T 1]_i = sum_j B_ji ZP_ji
    const Vector bzp_colsum =
        model.b_matrix.cwiseProduct(adj.zp).colwise().sum().transpose();

    report.d_a += adj.d_x_pred * x_prev.transpose() + adj.zp;
    report.d_b += adj.d_x_pred * phi.transpose() +
                  adj.zp * slope.cwiseProduct(model.gain).asDiagonal();
    if (model.offset_mode == OffsetMode::Activation) {
      report.d_c += slope.cwiseProduct(model.b_matrix.transpose() * adj.d_x_pred) +
                    curv.cwiseProduct(model.gain).cwiseProduct(bzp_colsum);
    } else {
      report.d_c += adj.d_x_pred;
    }

    d_x = st.jac.transpose() * adj.d_x_pred +
          curv.cwiseProduct(gain_sq).cwiseProduct(bzp_colsum);
    d_p = st.jac.transpose() * adj.psi * st.jac;
    if (!all_finite(d_x) || !all_finite(d_p))
      throw divergence_error("backward_network: adjoint state diverged", t + 1);
  }

  report.grad = Vector::Zero(layout.total_size());
  for (const auto& block : layout.blocks) {
    if (block.name == "A") {
      for (Eigen::Index i = 0; i < n; ++i)
        for (Eigen::Index j = 0; j < n; ++j) report.grad[block.offset + i * n + j] = report.d_a(i, j);
    } else if (block.name == "B.free") {
      for (Eigen::Index m = 0; m < block.size; ++m)
        report.grad[block.offset + m] = report.d_b(layout.b_free[m].first, layout.b_free[m].second);
    } else if (block.name == "c") {
      report.grad.segment(block.offset, n) = report.d_c;
    }
  }
  return report;
}

// One row per step: the adjoint vectors plus the Frobenius norms of the
// adjoint matrices.
inline void dump_adjoints_csv(const std::vector<AdjointState>& adjoints,
                              const std::string& path) {
  std::ofstream out(path);
  if (!out) throw invalid_input("cannot open for writing: " + path);
  if (adjoints.empty()) throw invalid_input("dump_adjoints_csv: empty adjoint record");
  const Eigen::Index n = adjoints.front().d_x.size();
  out << "t";
  for (Eigen::Index i = 0; i < n; ++i) out << ",d_x" << i;
  for (Eigen::Index i = 0; i < n; ++i) out << ",d_x_pred" << i;
  out << ",d_p_fro,u_fro,z_fro\n";
  for (size_t t = 0; t < adjoints.size(); ++t) {
    const AdjointState& a = adjoints[t];
    out << (t + 1);
    for (Eigen::Index i = 0; i < n; ++i) out << "," << format_double(a.d_x[i]);
    for (Eigen::Index i = 0; i < n; ++i) out << "," << format_double(a.d_x_pred[i]);
    out << "," << format_double(a.d_p.norm()) << "," << format_double(a.u.norm()) << ","
        << format_double(a.z_mat.norm()) << "\n";
  }
}

}  // namespace dualest
