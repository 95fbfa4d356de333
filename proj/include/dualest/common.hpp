#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <random>
#include <stdexcept>
#include <string>

namespace dualest {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;
using BoolMask = Eigen::Array<bool, Eigen::Dynamic, Eigen::Dynamic>;

class invalid_input : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Filter state or simulation became non-finite at a known step.
class divergence_error : public std::runtime_error {
 public:
  divergence_error(const std::string& what, long step)
      : std::runtime_error(what + " (step " + std::to_string(step) + ")"), step_(step) {}
  long step() const { return step_; }

 private:
  long step_;
};

class singular_innovation_error : public std::runtime_error {
 public:
  singular_innovation_error(const std::string& what, long step)
      : std::runtime_error(what + " (step " + std::to_string(step) + ")"), step_(step) {}
  long step() const { return step_; }

 private:
  long step_;
};

// Shortest decimal form that round-trips the double exactly.
inline std::string format_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  if (std::strtod(buf, nullptr) == v) {
    for (int prec = 1; prec < 17; ++prec) {
      char tmp[40];
      std::snprintf(tmp, sizeof(tmp), "%.*g", prec, v);
      if (std::strtod(tmp, nullptr) == v) return tmp;
    }
  }
  return buf;
}

inline Matrix symmetrize(const Matrix& a) { return 0.5 * (a + a.transpose()); }

// Symmetric PSD square root for noise sampling; exact for diagonal input.
inline Matrix covariance_sqrt(const Matrix& cov) {
  if (cov.isDiagonal(0.0)) {
    Matrix s = Matrix::Zero(cov.rows(), cov.cols());
    for (Eigen::Index i = 0; i < cov.rows(); ++i) {
      if (cov(i, i) < 0) throw invalid_input("covariance has a negative diagonal entry");
      s(i, i) = std::sqrt(cov(i, i));
    }
    return s;
  }
  Eigen::SelfAdjointEigenSolver<Matrix> eig(cov);
  if (eig.info() != Eigen::Success) throw invalid_input("covariance eigendecomposition failed");
  Vector vals = eig.eigenvalues().cwiseMax(0.0).cwiseSqrt();
  return eig.eigenvectors() * vals.asDiagonal() * eig.eigenvectors().transpose();
}

inline bool all_finite(const Matrix& a) { return a.allFinite(); }
inline bool all_finite(const Vector& v) { return v.allFinite(); }

// splitmix64; used to derive independent sub-seeds from one master seed.
inline std::uint64_t splitmix64(std::uint64_t& state) {
  state += 0x9e3779b97f4a7c15ULL;
  std::uint64_t z = state;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

inline std::uint64_t derive_seed(std::uint64_t base, std::uint64_t tag) {
  std::uint64_t s = base ^ (0x9e3779b97f4a7c15ULL * (tag + 1));
  return splitmix64(s);
}

// Seeded random stream. One underlying N(0,1) distribution object is kept so
// the draw sequence is a pure function of the seed and the call order.
class RandomStream {
 public:
  explicit RandomStream(std::uint64_t seed) : engine_(seed) {}

  double normal() { return normal_(engine_); }
  double normal(double mean, double stddev) { return mean + stddev * normal_(engine_); }

  double uniform(double lo, double hi) {
    return std::uniform_real_distribution<double>(lo, hi)(engine_);
  }

  // Inclusive range [lo, hi].
  long uniform_int(long lo, long hi) {
    return std::uniform_int_distribution<long>(lo, hi)(engine_);
  }

  Vector normal_vector(Eigen::Index n, double stddev = 1.0) {
    Vector v(n);
    for (Eigen::Index i = 0; i < n; ++i) v[i] = stddev * normal_(engine_);
    return v;
  }

  Matrix normal_matrix(Eigen::Index rows, Eigen::Index cols, double stddev = 1.0) {
    Matrix m(rows, cols);
    for (Eigen::Index i = 0; i < rows; ++i)
      for (Eigen::Index j = 0; j < cols; ++j) m(i, j) = stddev * normal_(engine_);
    return m;
  }

  std::mt19937_64& engine() { return engine_; }

 private:
  std::mt19937_64 engine_;
  std::normal_distribution<double> normal_{0.0, 1.0};
};

}  // namespace dualest
