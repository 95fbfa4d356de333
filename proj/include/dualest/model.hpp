#pragma once

#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "dualest/common.hpp"

namespace dualest {

enum class Nonlinearity { Tanh, Identity };

// Placement of the offset vector c in the state equation.
//   Activation: x' = A x + B phi(gain.*x + c)        (canonical form)
//   Additive:   x' = A x + B phi(gain.*x) + c        (Hopfield-style recurrent nets)
enum class OffsetMode { Activation, Additive };

inline double sigma_value(Nonlinearity nl, double u) {
  return nl == Nonlinearity::Tanh ? std::tanh(u) : u;
}
inline double sigma_slope(Nonlinearity nl, double u) {
  if (nl == Nonlinearity::Identity) return 1.0;
  const double t = std::tanh(u);
  return 1.0 - t * t;
}
inline double sigma_curvature(Nonlinearity nl, double u) {
  if (nl == Nonlinearity::Identity) return 0.0;
  const double t = std::tanh(u);
  return -2.0 * t * (1.0 - t * t);
}

// Nonlinear recurrent network state-transition model. All estimators in this
// library run against this family (the two-population brain model converts
// into it, see EiBrainModel::to_network).
struct NetworkModel {
  Matrix a_matrix;  // n x n linear recurrence
  Matrix b_matrix;  // n x n weight on the nonlinear activations
  Vector offset;    // n, placement per offset_mode
  Vector gain;      // n, per-state activation slope
  Nonlinearity nonlinearity = Nonlinearity::Tanh;
  OffsetMode offset_mode = OffsetMode::Activation;
  BoolMask free_mask;  // trainable entries of b_matrix

  Eigen::Index size() const { return a_matrix.rows(); }

  static NetworkModel canonical(Matrix a, Matrix b, Vector offset, Vector gain,
                                Nonlinearity nl = Nonlinearity::Tanh) {
    NetworkModel m;
    m.a_matrix = std::move(a);
    m.b_matrix = std::move(b);
    m.offset = std::move(offset);
    m.gain = std::move(gain);
    m.nonlinearity = nl;
    m.offset_mode = OffsetMode::Activation;
    m.free_mask = BoolMask::Constant(m.a_matrix.rows(), m.a_matrix.cols(), true);
    m.validate();
    return m;
  }

  // x' = W tanh(x) + D.*x + c: the diagonal decay D folds into a_matrix.
  static NetworkModel hopfield(const Matrix& w, const Vector& d, Vector c) {
    NetworkModel m;
    m.a_matrix = Matrix(d.asDiagonal());
    m.b_matrix = w;
    m.offset = std::move(c);
    m.gain = Vector::Ones(w.rows());
    m.nonlinearity = Nonlinearity::Tanh;
    m.offset_mode = OffsetMode::Additive;
    m.free_mask = BoolMask::Constant(w.rows(), w.cols(), true);
    m.validate();
    return m;
  }

  void validate() const {
    const Eigen::Index n = a_matrix.rows();
    if (n == 0) throw invalid_input("NetworkModel: state dimension must be positive");
    if (a_matrix.cols() != n || b_matrix.rows() != n || b_matrix.cols() != n)
      throw invalid_input("NetworkModel: A and B must be square of matching size");
    if (offset.size() != n || gain.size() != n)
      throw invalid_input("NetworkModel: offset/gain length must equal state dimension");
    if (free_mask.rows() != n || free_mask.cols() != n)
      throw invalid_input("NetworkModel: free_mask shape must match B");
    for (Eigen::Index i = 0; i < n; ++i)
      for (Eigen::Index j = 0; j < n; ++j)
        if (!free_mask(i, j) && b_matrix(i, j) != 0.0)
          throw invalid_input("NetworkModel: masked entries of B must be exactly zero");
  }

  // Argument fed to the elementwise nonlinearity.
  Vector activation_input(const Vector& x) const {
    Vector u = gain.cwiseProduct(x);
    if (offset_mode == OffsetMode::Activation) u += offset;
    return u;
  }

  Vector activation_values(const Vector& x) const {
    Vector u = activation_input(x);
    for (Eigen::Index i = 0; i < u.size(); ++i) u[i] = sigma_value(nonlinearity, u[i]);
    return u;
  }

  Vector activation_slopes(const Vector& x) const {
    Vector u = activation_input(x);
    for (Eigen::Index i = 0; i < u.size(); ++i) u[i] = sigma_slope(nonlinearity, u[i]);
    return u;
  }

  // sigma''(u) elementwise, without chain factors.
  Vector activation_curvatures(const Vector& x) const {
    Vector u = activation_input(x);
    for (Eigen::Index i = 0; i < u.size(); ++i) u[i] = sigma_curvature(nonlinearity, u[i]);
    return u;
  }
};

inline void check_state_dim(const NetworkModel& model, const Vector& x) {
  if (x.size() != model.size())
    throw invalid_input("state vector length does not match model dimension");
}

inline Vector step(const NetworkModel& model, const Vector& x) {
  check_state_dim(model, x);
  if (!all_finite(x)) throw invalid_input("step: state must be finite");
  Vector out = model.a_matrix * x + model.b_matrix * model.activation_values(x);
  if (model.offset_mode == OffsetMode::Additive) out += model.offset;
  return out;
}

// d step / d x = A + B diag(sigma'(u)) diag(gain)
inline Matrix jacobian(const NetworkModel& model, const Vector& x) {
  check_state_dim(model, x);
  if (!all_finite(x)) throw invalid_input("jacobian: state must be finite");
  const Vector slope_gain = model.activation_slopes(x).cwiseProduct(model.gain);
  return model.a_matrix + model.b_matrix * slope_gain.asDiagonal();
}

// Elementwise second derivative of phi(gain.*x [+ c]) with respect to x,
// i.e. sigma''(u) .* gain^2.
inline Vector activation_second_derivative(const NetworkModel& model, const Vector& x) {
  check_state_dim(model, x);
  return model.activation_curvatures(x).cwiseProduct(model.gain.cwiseProduct(model.gain));
}

// dF'/dx_i as an explicit dense matrix: only column i is nonzero, equal to
// B[:,i] * sigma''(u_i) * gain_i^2.
inline Matrix jacobian_state_derivative(const NetworkModel& model, const Vector& x,
                                        Eigen::Index i) {
  const Eigen::Index n = model.size();
  Matrix d = Matrix::Zero(n, n);
  const Vector curv = activation_second_derivative(model, x);
  d.col(i) = model.b_matrix.col(i) * curv[i];
  return d;
}

// ---------------------------------------------------------------------------
// Parameter packing

// Maps named trainable blocks onto contiguous ranges of one flat vector.
// Block order is fixed: "A" (dense, row-major), "B.free" (row-major order of
// unmasked entries), "c".
struct ParameterLayout {
  struct Block {
    std::string name;
    Eigen::Index offset = 0;
    Eigen::Index size = 0;
  };

  Eigen::Index n = 0;
  bool train_a = false;
  bool train_b = true;
  bool train_c = false;
  std::vector<std::pair<Eigen::Index, Eigen::Index>> b_free;  // (row, col)
  std::vector<Block> blocks;

  static ParameterLayout create(const NetworkModel& model, bool train_a, bool train_b,
                                bool train_c) {
    ParameterLayout layout;
    layout.n = model.size();
    layout.train_a = train_a;
    layout.train_b = train_b;
    layout.train_c = train_c;
    if (train_b) {
      for (Eigen::Index i = 0; i < layout.n; ++i)
        for (Eigen::Index j = 0; j < layout.n; ++j)
          if (model.free_mask(i, j)) layout.b_free.emplace_back(i, j);
    }
    Eigen::Index at = 0;
    if (train_a) {
      layout.blocks.push_back({"A", at, layout.n * layout.n});
      at += layout.n * layout.n;
    }
    if (train_b) {
      layout.blocks.push_back({"B.free", at, Eigen::Index(layout.b_free.size())});
      at += Eigen::Index(layout.b_free.size());
    }
    if (train_c) {
      layout.blocks.push_back({"c", at, layout.n});
      at += layout.n;
    }
    return layout;
  }

  Eigen::Index total_size() const {
    Eigen::Index s = 0;
    for (const auto& b : blocks) s += b.size;
    return s;
  }

  const Block* find(const std::string& name) const {
    for (const auto& b : blocks)
      if (b.name == name) return &b;
    return nullptr;
  }
};

struct ParameterVector {
  Vector values;
  ParameterLayout layout;
};

inline ParameterVector pack_parameters(const NetworkModel& model,
                                       const ParameterLayout& layout) {
  Vector v(layout.total_size());
  for (const auto& block : layout.blocks) {
    if (block.name == "A") {
      for (Eigen::Index i = 0; i < layout.n; ++i)
        for (Eigen::Index j = 0; j < layout.n; ++j)
          v[block.offset + i * layout.n + j] = model.a_matrix(i, j);
    } else if (block.name == "B.free") {
      for (Eigen::Index k = 0; k < block.size; ++k)
        v[block.offset + k] = model.b_matrix(layout.b_free[k].first, layout.b_free[k].second);
    } else if (block.name == "c") {
      v.segment(block.offset, layout.n) = model.offset;
    }
  }
  return ParameterVector{std::move(v), layout};
}

inline void unpack_parameters(NetworkModel& model, const ParameterLayout& layout,
                              const Vector& v) {
  if (v.size() != layout.total_size())
    throw invalid_input("unpack_parameters: vector length does not match layout");
  for (const auto& block : layout.blocks) {
    if (block.name == "A") {
      for (Eigen::Index i = 0; i < layout.n; ++i)
        for (Eigen::Index j = 0; j < layout.n; ++j)
          model.a_matrix(i, j) = v[block.offset + i * layout.n + j];
    } else if (block.name == "B.free") {
      for (Eigen::Index k = 0; k < block.size; ++k)
        model.b_matrix(layout.b_free[k].first, layout.b_free[k].second) = v[block.offset + k];
    } else if (block.name == "c") {
      model.offset = v.segment(block.offset, layout.n);
    }
  }
}

inline NetworkModel unpacked(const NetworkModel& model, const ParameterVector& pv) {
  NetworkModel out = model;
  unpack_parameters(out, pv.layout, pv.values);
  return out;
}

// d f / d theta_coord as a state-space vector.
inline Vector param_step_derivative(const NetworkModel& model, const Vector& x,
                                    const ParameterLayout& layout, Eigen::Index coord) {
  const Eigen::Index n = model.size();
  Vector d = Vector::Zero(n);
  for (const auto& block : layout.blocks) {
    if (coord < block.offset || coord >= block.offset + block.size) continue;
    const Eigen::Index local = coord - block.offset;
    if (block.name == "A") {
      d[local / n] = x[local % n];
    } else if (block.name == "B.free") {
      const auto [i, j] = layout.b_free[local];
      d[i] = model.activation_values(x)[j];
    } else if (block.name == "c") {
      if (model.offset_mode == OffsetMode::Additive) {
        d[local] = 1.0;
      } else {
        d = model.b_matrix.col(local) * model.activation_slopes(x)[local];
      }
    }
    return d;
  }
  throw invalid_input("param_step_derivative: coordinate outside layout");
}

// d f / d theta over all layout coordinates at once, as an n x q matrix.
inline Matrix param_step_jacobian(const NetworkModel& model, const Vector& x,
                                  const ParameterLayout& layout) {
  const Eigen::Index n = model.size();
  Matrix d = Matrix::Zero(n, layout.total_size());
  const Vector phi = model.activation_values(x);
  const Vector slope = model.activation_slopes(x);
  for (const auto& block : layout.blocks) {
    if (block.name == "A") {
      for (Eigen::Index m = 0; m < block.size; ++m) d(m / n, block.offset + m) = x[m % n];
    } else if (block.name == "B.free") {
      for (Eigen::Index m = 0; m < block.size; ++m) {
        const auto [i, j] = layout.b_free[m];
        d(i, block.offset + m) = phi[j];
      }
    } else if (block.name == "c") {
      if (model.offset_mode == OffsetMode::Additive) {
        for (Eigen::Index i = 0; i < n; ++i) d(i, block.offset + i) = 1.0;
      } else {
        for (Eigen::Index i = 0; i < n; ++i)
          d.col(block.offset + i) = model.b_matrix.col(i) * slope[i];
      }
    }
  }
  return d;
}

// d F' / d theta_coord as an explicit dense matrix.
inline Matrix param_jacobian_derivative(const NetworkModel& model, const Vector& x,
                                        const ParameterLayout& layout, Eigen::Index coord) {
  const Eigen::Index n = model.size();
  Matrix d = Matrix::Zero(n, n);
  for (const auto& block : layout.blocks) {
    if (coord < block.offset || coord >= block.offset + block.size) continue;
    const Eigen::Index local = coord - block.offset;
    if (block.name == "A") {
      d(local / n, local % n) = 1.0;
    } else if (block.name == "B.free") {
      const auto [i, j] = layout.b_free[local];
      d(i, j) = model.activation_slopes(x)[j] * model.gain[j];
    } else if (block.name == "c") {
      if (model.offset_mode == OffsetMode::Activation) {
        const Vector curv = model.activation_curvatures(x);
        d.col(local) = model.b_matrix.col(local) * (curv[local] * model.gain[local]);
      }
      // Additive offset does not enter the Jacobian.
    }
    return d;
  }
  throw invalid_input("param_jacobian_derivative: coordinate outside layout");
}

// ---------------------------------------------------------------------------
// Two-population (excitatory/inhibitory) regional brain model. Stacked state
// is [p; r] with excitatory populations first.
struct EiBrainModel {
  Eigen::Index n_regions = 0;
  Matrix w_p, w_r;      // long-range excitatory weights, n x n
  Vector j_p, j_r;      // local inhibitory weights, n
  Vector tau_p, tau_r;  // decay constants, n, strictly positive
  Vector gain, offset;  // sigmoid parameters over the stacked 2n state

  Eigen::Index state_size() const { return 2 * n_regions; }

  void validate() const {
    const Eigen::Index n = n_regions;
    if (n <= 0) throw invalid_input("EiBrainModel: n_regions must be positive");
    if (w_p.rows() != n || w_p.cols() != n || w_r.rows() != n || w_r.cols() != n)
      throw invalid_input("EiBrainModel: W matrices must be n_regions square");
    if (j_p.size() != n || j_r.size() != n || tau_p.size() != n || tau_r.size() != n)
      throw invalid_input("EiBrainModel: local weight/decay vectors must have length n_regions");
    if ((tau_p.array() <= 0).any() || (tau_r.array() <= 0).any())
      throw invalid_input("EiBrainModel: decay constants must be strictly positive");
    if (gain.size() != 2 * n || offset.size() != 2 * n)
      throw invalid_input("EiBrainModel: gain/offset must cover the stacked state");
  }

  // Lossless re-expression on the stacked 2n state: decay terms become the
  // diagonal A block, long-range/local weights the B block.
  NetworkModel to_network() const {
    validate();
    const Eigen::Index n = n_regions;
    Matrix a = Matrix::Zero(2 * n, 2 * n);
    a.diagonal().head(n) = tau_p.cwiseInverse();
    a.diagonal().tail(n) = tau_r.cwiseInverse();
    Matrix b = Matrix::Zero(2 * n, 2 * n);
    b.topLeftCorner(n, n) = w_p;
    b.bottomLeftCorner(n, n) = w_r;
    b.topRightCorner(n, n) = Matrix(Vector(-j_p).asDiagonal());
    b.bottomRightCorner(n, n) = Matrix(Vector(-j_r).asDiagonal());
    NetworkModel m = NetworkModel::canonical(std::move(a), std::move(b), offset, gain,
                                             Nonlinearity::Tanh);
    return m;
  }
};

inline Vector step(const EiBrainModel& model, const Vector& x) {
  model.validate();
  const Eigen::Index n = model.n_regions;
  if (x.size() != 2 * n) throw invalid_input("EiBrainModel step: state length must be 2n");
  const Vector p = x.head(n);
  const Vector r = x.tail(n);
  Vector psi(2 * n);
  for (Eigen::Index i = 0; i < 2 * n; ++i)
    psi[i] = std::tanh(model.gain[i] * x[i] + model.offset[i]);
  const Vector psi_p = psi.head(n);
  const Vector psi_r = psi.tail(n);
  Vector out(2 * n);
  out.head(n) = p.cwiseQuotient(model.tau_p) + model.w_p * psi_p - model.j_p.cwiseProduct(psi_r);
  out.tail(n) = r.cwiseQuotient(model.tau_r) + model.w_r * psi_p - model.j_r.cwiseProduct(psi_r);
  return out;
}

}  // namespace dualest
