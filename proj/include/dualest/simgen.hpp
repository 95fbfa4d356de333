#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <numeric>
#include <string>
#include <utility>
#include <vector>

#include "dualest/common.hpp"
#include "dualest/ekf.hpp"
#include "dualest/io.hpp"
#include "dualest/model.hpp"

namespace dualest {

struct WeightDistribution {
  double w_std_scale = 1.0;  // W entries ~ N(0, (scale/sqrt(n))^2)
  double d_min = 0.1;        // D entries ~ U(d_min, d_max)
  double d_max = 0.9;
  double c_std = 0.5;        // c entries ~ N(0, c_std^2)
};

struct SimulationSpec {
  Eigen::Index n_nodes = 10;
  double measurement_fraction = 0.4;
  double sparsity_fraction = 0.4;
  Eigen::Index horizon = 30000;
  std::uint64_t seed = 0;
  double process_std = 0.5;  // strong excitation keeps the connectivity identifiable
  double measurement_std = 0.02;
  WeightDistribution weights;
  double sv_mean = 2.0;
  double sv_param = 0.25;  // variance by default; see sv_param_is_variance
  bool sv_param_is_variance = true;
  Eigen::Index burn_in = 200;

  Eigen::Index channels() const {
    return std::max<Eigen::Index>(1, Eigen::Index(std::lround(measurement_fraction * double(n_nodes))));
  }

  void validate() const {
    if (n_nodes <= 0) throw invalid_input("SimulationSpec: n_nodes must be positive");
    if (measurement_fraction <= 0 || measurement_fraction > 1)
      throw invalid_input("SimulationSpec: measurement_fraction must lie in (0, 1]");
    if (sparsity_fraction < 0 || sparsity_fraction >= 1)
      throw invalid_input("SimulationSpec: sparsity_fraction must lie in [0, 1)");
    if (horizon < 1) throw invalid_input("SimulationSpec: horizon must be at least 1");
    if (process_std < 0 || measurement_std < 0)
      throw invalid_input("SimulationSpec: noise levels must be nonnegative");
  }
};

struct GroundTruth {
  NetworkModel model;
  ObservationSetup obs;
  Vector x0;
  Matrix states;        // horizon x n, row t holds x_{t+1}
  Matrix measurements;  // horizon x p, row t holds y_{t+1}
  bool dynamic_range_ok = true;
  std::vector<Eigen::Index> saturated_coords;
  std::uint64_t seed = 0;
};

// Zero the floor(fraction * n^2) entries smallest in absolute value.
// Ties break by (|value|, row-major index) so the result is platform-stable.
inline std::pair<Matrix, BoolMask> sparsify(const Matrix& w, double fraction) {
  if (fraction < 0 || fraction >= 1)
    throw invalid_input("sparsify: fraction must lie in [0, 1)");
  const Eigen::Index total = w.size();
  const Eigen::Index count = Eigen::Index(std::floor(fraction * double(total)));
  std::vector<Eigen::Index> order(static_cast<size_t>(total));
  std::iota(order.begin(), order.end(), 0);
  auto abs_at = [&](Eigen::Index flat) { return std::abs(w(flat / w.cols(), flat % w.cols())); };
  std::sort(order.begin(), order.end(), [&](Eigen::Index a, Eigen::Index b) {
    const double va = abs_at(a), vb = abs_at(b);
    return va != vb ? va < vb : a < b;
  });
  Matrix out = w;
  BoolMask mask = BoolMask::Constant(w.rows(), w.cols(), true);
  for (Eigen::Index k = 0; k < count; ++k) {
    const Eigen::Index flat = order[size_t(k)];
    out(flat / w.cols(), flat % w.cols()) = 0.0;
    mask(flat / w.cols(), flat % w.cols()) = false;
  }
  return {std::move(out), std::move(mask)};
}

namespace detail {

// Haar-distributed orthogonal matrix via QR of a Gaussian matrix with the
// R-diagonal sign fix.
inline Matrix haar_orthogonal(Eigen::Index n, RandomStream& rng) {
  const Matrix g = rng.normal_matrix(n, n);
  Eigen::HouseholderQR<Matrix> qr(g);
  Matrix q = qr.householderQ();
  const Matrix r = qr.matrixQR().triangularView<Eigen::Upper>();
  for (Eigen::Index j = 0; j < n; ++j)
    if (r(j, j) < 0) q.col(j) = -q.col(j);
  return q;
}

}  // namespace detail

// H = U Sigma V^T with Haar-uniform factors and singular values drawn
// |N(sv_mean, sv_std^2)|. Draw order: singular values, then U, then V.
inline Matrix random_measurement_matrix(Eigen::Index p, Eigen::Index n, RandomStream& rng,
                                        double sv_mean = 2.0, double sv_param = 0.25,
                                        bool sv_param_is_variance = true) {
  if (p <= 0 || n <= 0) throw invalid_input("random_measurement_matrix: dimensions must be positive");
  if (p > n) throw invalid_input("random_measurement_matrix: requires p <= n");
  const double sv_std = sv_param_is_variance ? std::sqrt(sv_param) : sv_param;
  Vector sv(p);
  for (Eigen::Index i = 0; i < p; ++i) sv[i] = std::abs(rng.normal(sv_mean, sv_std));
  const Matrix u = detail::haar_orthogonal(p, rng);
  const Matrix v = detail::haar_orthogonal(n, rng);
  return u * sv.asDiagonal() * v.leftCols(p).transpose();
}

// Zero-padded measurement matrix for the two-population brain model: only the
// excitatory half of the stacked state is observable.
inline Matrix ei_measurement_matrix(Eigen::Index p, Eigen::Index n_regions, RandomStream& rng,
                                    double sv_mean = 2.0, double sv_param = 0.25,
                                    bool sv_param_is_variance = true) {
  Matrix h = Matrix::Zero(p, 2 * n_regions);
  h.leftCols(n_regions) =
      random_measurement_matrix(p, n_regions, rng, sv_mean, sv_param, sv_param_is_variance);
  return h;
}

namespace detail {

// Fraction of steps each coordinate spends in tanh saturation (|phi| > 0.95).
inline void dynamic_range_screen(const NetworkModel& model, const Matrix& states,
                                 GroundTruth& gt) {
  gt.saturated_coords.clear();
  gt.dynamic_range_ok = true;
  if (model.nonlinearity != Nonlinearity::Tanh || states.rows() == 0) return;
  const double sat_input = std::atanh(0.95);
  const Eigen::Index n = model.size();
  std::vector<Eigen::Index> counts(size_t(n), 0);
  for (Eigen::Index t = 0; t < states.rows(); ++t) {
    const Vector u = model.activation_input(states.row(t).transpose());
    for (Eigen::Index i = 0; i < n; ++i)
      if (std::abs(u[i]) > sat_input) ++counts[size_t(i)];
  }
  for (Eigen::Index i = 0; i < n; ++i) {
    if (double(counts[size_t(i)]) > 0.9 * double(states.rows())) {
      gt.saturated_coords.push_back(i);
      gt.dynamic_range_ok = false;
    }
  }
}

}  // namespace detail

// Iterate the state equation with additive Gaussian process noise and emit
// noisy measurements. Per step the draw order is state noise then measurement
// noise, so the trajectory is a pure function of the stream.
inline GroundTruth simulate(const NetworkModel& model, const ObservationSetup& obs,
                            Eigen::Index horizon, const Vector& x0, RandomStream& rng) {
  if (horizon < 1) throw invalid_input("simulate: horizon must be at least 1");
  if (obs.state_size() != model.size())
    throw invalid_input("simulate: observation setup does not match model");
  const Eigen::Index n = model.size();
  const Eigen::Index p = obs.channels();
  const Matrix q_sqrt = covariance_sqrt(obs.q);
  const Matrix r_sqrt = covariance_sqrt(obs.r);

  GroundTruth gt;
  gt.model = model;
  gt.obs = obs;
  gt.x0 = x0;
  gt.states.resize(horizon, n);
  gt.measurements.resize(horizon, p);

  Vector x = x0;
  for (Eigen::Index t = 0; t < horizon; ++t) {
    x = step(model, x) + q_sqrt * rng.normal_vector(n);
    if (!all_finite(x)) throw divergence_error("simulate: state diverged", t + 1);
    gt.states.row(t) = x.transpose();
    gt.measurements.row(t) = (obs.h * x + r_sqrt * rng.normal_vector(p)).transpose();
  }
  detail::dynamic_range_screen(model, gt.states, gt);
  return gt;
}

// Full benchmark pipeline: random sparse recurrent net, random measurement
// operator, burn-in toward the attractor, then the recorded trajectory.
inline GroundTruth generate_ground_truth(const SimulationSpec& spec) {
  spec.validate();
  RandomStream rng(spec.seed);
  const Eigen::Index n = spec.n_nodes;
  const Eigen::Index p = spec.channels();

  const Matrix w_dense = rng.normal_matrix(n, n, spec.weights.w_std_scale / std::sqrt(double(n)));
  auto [w, mask] = sparsify(w_dense, spec.sparsity_fraction);
  Vector d(n), c(n);
  for (Eigen::Index i = 0; i < n; ++i) d[i] = rng.uniform(spec.weights.d_min, spec.weights.d_max);
  for (Eigen::Index i = 0; i < n; ++i) c[i] = rng.normal(0.0, spec.weights.c_std);
  NetworkModel model = NetworkModel::hopfield(w, d, c);
  model.free_mask = mask;
  model.validate();

  const Matrix h = random_measurement_matrix(p, n, rng, spec.sv_mean, spec.sv_param,
                                             spec.sv_param_is_variance);
  const Matrix q = spec.process_std * spec.process_std * Matrix::Identity(n, n);
  const Matrix r = spec.measurement_std * spec.measurement_std * Matrix::Identity(p, p);
  const ObservationSetup obs = ObservationSetup::create(h, q, r);

  Vector x = rng.normal_vector(n, 0.1);
  const Matrix q_sqrt = covariance_sqrt(q);
  for (Eigen::Index t = 0; t < spec.burn_in; ++t) {
    x = step(model, x) + q_sqrt * rng.normal_vector(n);
    if (!all_finite(x)) throw divergence_error("generate_ground_truth: burn-in diverged", t + 1);
  }

  GroundTruth gt = simulate(model, obs, spec.horizon, x, rng);
  gt.seed = spec.seed;
  return gt;
}

inline void save_ground_truth(const std::string& dir, const GroundTruth& gt,
                              const std::vector<std::string>& header_comments = {}) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  save_model(dir + "/model.json", gt.model);
  write_matrix_csv(dir + "/h.csv", gt.obs.h, "x", header_comments);
  write_matrix_csv(dir + "/q.csv", gt.obs.q, "x", header_comments);
  write_matrix_csv(dir + "/r.csv", gt.obs.r, "y", header_comments);
  write_matrix_csv(dir + "/x0.csv", gt.x0.transpose(), "x", header_comments);
  write_matrix_csv(dir + "/states.csv", gt.states, "x", header_comments);
  write_matrix_csv(dir + "/measurements.csv", gt.measurements, "y", header_comments);
  nlohmann::json meta;
  meta["seed"] = gt.seed;
  meta["dynamic_range_ok"] = gt.dynamic_range_ok;
  meta["saturated_coords"] = gt.saturated_coords;
  save_json(dir + "/meta.json", meta);
}

inline GroundTruth load_ground_truth(const std::string& dir) {
  GroundTruth gt;
  gt.model = load_model(dir + "/model.json");
  const Matrix h = read_matrix_csv(dir + "/h.csv");
  const Matrix q = read_matrix_csv(dir + "/q.csv");
  const Matrix r = read_matrix_csv(dir + "/r.csv");
  gt.obs = ObservationSetup::create(h, q, r);
  gt.x0 = read_matrix_csv(dir + "/x0.csv").row(0).transpose();
  gt.states = read_matrix_csv(dir + "/states.csv");
  gt.measurements = read_matrix_csv(dir + "/measurements.csv");
  const nlohmann::json meta = load_json(dir + "/meta.json");
  gt.seed = meta.value("seed", std::uint64_t(0));
  gt.dynamic_range_ok = meta.value("dynamic_range_ok", true);
  for (const auto& v : meta.value("saturated_coords", std::vector<Eigen::Index>{}))
    gt.saturated_coords.push_back(v);
  return gt;
}

}  // namespace dualest
