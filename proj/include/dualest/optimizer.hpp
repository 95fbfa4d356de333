#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "dualest/backprop.hpp"
#include "dualest/common.hpp"
#include "dualest/ekf.hpp"
#include "dualest/io.hpp"
#include "dualest/model.hpp"

namespace dualest {

struct NadamState {
  Vector first_moment;
  Vector second_moment;
  long step_count = 0;
  double rate = 1e-3;
  double beta1 = 0.98;
  double beta2 = 0.95;
  double epsilon = 1e-8;

  static NadamState create(Eigen::Index size, double rate, double beta1 = 0.98,
                           double beta2 = 0.95, double epsilon = 1e-8) {
    NadamState s;
    s.first_moment = Vector::Zero(size);
    s.second_moment = Vector::Zero(size);
    s.rate = rate;
    s.beta1 = beta1;
    s.beta2 = beta2;
    s.epsilon = epsilon;
    return s;
  }
};

// Nesterov-accelerated Adam with bias correction (dense form).
inline void nadam_step(NadamState& state, const Vector& grad, Vector& params) {
  if (grad.size() != params.size() || grad.size() != state.first_moment.size())
    throw invalid_input("nadam_step: gradient/parameter length mismatch");
  if (!all_finite(grad))
    throw invalid_input("nadam_step: non-finite gradient at update " +
                        std::to_string(state.step_count + 1));
  state.step_count += 1;
  const double t = double(state.step_count);
  state.first_moment = state.beta1 * state.first_moment + (1.0 - state.beta1) * grad;
  state.second_moment =
      state.beta2 * state.second_moment + (1.0 - state.beta2) * grad.cwiseProduct(grad);
  const double m_corr_next = 1.0 - std::pow(state.beta1, t + 1.0);
  const double m_corr = 1.0 - std::pow(state.beta1, t);
  const double v_corr = 1.0 - std::pow(state.beta2, t);
  const Vector nesterov =
      state.beta1 / m_corr_next * state.first_moment + (1.0 - state.beta1) / m_corr * grad;
  const Vector denom =
      (state.second_moment / v_corr).cwiseSqrt().array() + state.epsilon;
  params -= state.rate * nesterov.cwiseQuotient(denom);
}

// Segment start times drawn uniformly from [0, horizon - k], independently.
inline std::vector<Eigen::Index> sample_start_times(Eigen::Index horizon, Eigen::Index k,
                                                    Eigen::Index batch_size, RandomStream& rng) {
  if (horizon < k) throw invalid_input("sample_start_times: horizon shorter than segment");
  if (batch_size < 1) throw invalid_input("sample_start_times: batch_size must be positive");
  std::vector<Eigen::Index> out(static_cast<size_t>(batch_size));
  for (auto& t0 : out) t0 = Eigen::Index(rng.uniform_int(0, long(horizon - k)));
  return out;
}

struct TrainConfig {
  long iterations = 20000;
  Eigen::Index segment_length = 16;
  int warmup = 5;
  Eigen::Index batch_size = 1;
  std::uint64_t seed = 0;
  double rate = 1e-3;
  double beta1 = 0.98;
  double beta2 = 0.95;
  double epsilon = 1e-8;
  double rate_decay = 1.0;  // geometric per-iteration decay; 1 = constant
  bool train_a = false;
  bool train_offset = false;
  bool reinit_free_b = false;        // draw fresh N(0, (init_b_std_scale/sqrt(n))^2)
  double init_b_std_scale = 0.1;
  double p0_scale = 1.0;             // P0 = p0_scale * I per segment
  double x0_std = 0.1;               // x0 ~ N(0, x0_std^2 I) per segment
  long checkpoint_every = 0;         // 0 = off
  std::string checkpoint_dir;

  void validate() const {
    if (iterations < 1) throw invalid_input("TrainConfig: iterations must be positive");
    if (warmup < 0 || warmup >= segment_length)
      throw invalid_input("TrainConfig: warmup must lie in [0, segment_length)");
    if (batch_size < 1) throw invalid_input("TrainConfig: batch_size must be positive");
  }
};

struct LossRecord {
  long iteration = 0;
  double objective = 0.0;
  double grad_norm = 0.0;
  double wall_time = 0.0;  // seconds since training start
};

struct TrainResult {
  NetworkModel model;
  std::vector<LossRecord> history;
  bool diverged = false;
  long diverged_at = -1;
  double median_iteration_seconds = 0.0;
};

inline void write_loss_csv(const std::string& path, const std::vector<LossRecord>& history,
                           const std::vector<std::string>& header_comments = {}) {
  std::ofstream out(path);
  if (!out) throw invalid_input("cannot open for writing: " + path);
  for (const auto& c : header_comments) out << "# " << c << "\n";
  out << "iteration,objective,grad_norm,wall_time\n";
  for (const auto& rec : history)
    out << rec.iteration << "," << format_double(rec.objective) << ","
        << format_double(rec.grad_norm) << "," << format_double(rec.wall_time) << "\n";
}

namespace detail {

inline double median_of(std::vector<double> v) {
  if (v.empty()) return 0.0;
  const size_t mid = v.size() / 2;
  std::nth_element(v.begin(), v.begin() + mid, v.end());
  double m = v[mid];
  if (v.size() % 2 == 0) {
    std::nth_element(v.begin(), v.begin() + mid - 1, v.begin() + mid);
    m = 0.5 * (m + v[mid - 1]);
  }
  return m;
}

}  // namespace detail

// Stochastic-gradient training loop: sample segment starts, filter each
// segment, backpropagate, average the batch gradients, Nadam-update the
// packed parameters. On divergence the last finite model is kept (and
// checkpointed when a checkpoint directory is set).
inline TrainResult train(const NetworkModel& init, const ObservationSetup& obs, const Matrix& y,
                         const TrainConfig& config) {
  config.validate();
  if (y.rows() < config.segment_length)
    throw invalid_input("train: data horizon shorter than segment length");

  TrainResult result;
  result.model = init;
  RandomStream rng(config.seed);

  ParameterLayout layout =
      ParameterLayout::create(result.model, config.train_a, true, config.train_offset);
  if (config.reinit_free_b) {
    const double std = config.init_b_std_scale / std::sqrt(double(result.model.size()));
    for (const auto& [i, j] : layout.b_free) result.model.b_matrix(i, j) = rng.normal(0.0, std);
  }
  Vector params = pack_parameters(result.model, layout).values;
  NadamState nadam =
      NadamState::create(params.size(), config.rate, config.beta1, config.beta2, config.epsilon);

  const Eigen::Index n = result.model.size();
  const Matrix p0 = config.p0_scale * Matrix::Identity(n, n);
  result.history.reserve(size_t(config.iterations));
  std::vector<double> iter_seconds;
  iter_seconds.reserve(size_t(config.iterations));
  const auto start = std::chrono::steady_clock::now();

  auto checkpoint = [&](const std::string& name) {
    if (config.checkpoint_dir.empty()) return;
    std::filesystem::create_directories(config.checkpoint_dir);
    save_model(config.checkpoint_dir + "/" + name, result.model);
  };

  for (long iter = 1; iter <= config.iterations; ++iter) {
    const auto iter_start = std::chrono::steady_clock::now();
    const auto t0s =
        sample_start_times(y.rows(), config.segment_length, config.batch_size, rng);

    Vector grad = Vector::Zero(params.size());
    double objective = 0.0;
    bool failed = false;
    for (const Eigen::Index t0 : t0s) {
      const Vector x0 = rng.normal_vector(n, config.x0_std);
      try {
        const FilterResult fr =
            filter_segment(result.model, obs, y.middleRows(t0, config.segment_length), x0, p0,
                           config.warmup);
        GradientReport report =
            backward_network(fr.trajectory, result.model, obs,
                             y.middleRows(t0, config.segment_length), layout);
        grad += report.grad;
        objective += report.objective;
      } catch (const divergence_error&) {
        failed = true;
      } catch (const singular_innovation_error&) {
        failed = true;
      }
      if (failed) break;
    }
    grad /= double(config.batch_size);
    objective /= double(config.batch_size);

    if (failed || !std::isfinite(objective) || !all_finite(grad)) {
      result.diverged = true;
      result.diverged_at = iter;
      checkpoint("model_last_finite.json");
      break;
    }

    nadam.rate = config.rate * std::pow(config.rate_decay, double(iter - 1));
    nadam_step(nadam, grad, params);
    unpack_parameters(result.model, layout, params);

    const auto now = std::chrono::steady_clock::now();
    iter_seconds.push_back(std::chrono::duration<double>(now - iter_start).count());
    result.history.push_back(LossRecord{iter, objective, grad.norm(),
                                        std::chrono::duration<double>(now - start).count()});
    if (config.checkpoint_every > 0 && iter % config.checkpoint_every == 0) {
      char name[64];
      std::snprintf(name, sizeof(name), "model_iter_%08ld.json", iter);
      checkpoint(name);
    }
  }

  // Median per-iteration time with the first few warm-up iterations dropped.
  if (!iter_seconds.empty()) {
    const size_t skip = std::min<size_t>(10, iter_seconds.size() - 1);
    result.median_iteration_seconds = detail::median_of(
        std::vector<double>(iter_seconds.begin() + long(skip), iter_seconds.end()));
  }
  return result;
}

}  // namespace dualest
