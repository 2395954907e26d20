#pragma once

// Analytic infinite-width NNGP (K) and NTK (Θ) propagation for dense and
// circular-convolution ReLU networks under the naive standard, NTK and
// improved standard parameterizations.
//
// Kernels over n inputs with P pixels are stored as one (n·P) x (n·P)
// matrix indexed by a = i·P + p, so the full pixel-pixel covariance is an
// ordinary symmetric matrix. Fully connected states have P = 1.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numbers>
#include <optional>
#include <span>
#include <vector>

#include <Eigen/Dense>

#include "ntk/error.hpp"
#include "ntk/netspec.hpp"

namespace ntk {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

struct InputKernel {
  Matrix gram;
  std::size_t num_points = 0;
  std::size_t spatial = 1;
  bool spatial_axes = false;
};

// Per-layer NTK contribution, carried forward through later layers so that
// the parts sum to the final NTK.
struct Contribution {
  Matrix weight_part;
  Matrix bias_part;
};

struct KernelState {
  std::size_t num_points = 0;
  std::size_t spatial = 1;
  // True until a gap/vectorize reduction collapses the pixel axes (a Conv
  // state with P = 1 still has them).
  bool spatial_axes = false;
  Matrix nngp;
  // Disengaged means Divergent (naive standard parameterization). Sticky.
  std::optional<Matrix> ntk;
  int layer_index = 0;
  std::optional<std::vector<Contribution>> contributions;

  bool divergent() const { return !ntk.has_value(); }

  double nngp_at(std::size_t i, std::size_t j, std::size_t p = 0, std::size_t q = 0) const {
    return nngp(static_cast<Eigen::Index>(i * spatial + p),
                static_cast<Eigen::Index>(j * spatial + q));
  }
  const Matrix& ntk_matrix() const {
    if (!ntk) throw DivergentKernelError();
    return *ntk;
  }
};

// ---- small matrix diagnostics -------------------------------------------

inline double max_abs_asymmetry(const Matrix& m) {
  return m.rows() == 0 ? 0.0 : (m - m.transpose()).cwiseAbs().maxCoeff();
}

inline double min_eigenvalue(const Matrix& m) {
  Eigen::SelfAdjointEigenSolver<Matrix> es(m, Eigen::EigenvaluesOnly);
  return es.eigenvalues().minCoeff();
}

inline double max_eigenvalue(const Matrix& m) {
  Eigen::SelfAdjointEigenSolver<Matrix> es(m, Eigen::EigenvaluesOnly);
  return es.eigenvalues().maxCoeff();
}

// PSD up to `rel_tol` times the largest diagonal entry.
inline bool is_psd(const Matrix& m, double rel_tol = 1e-8) {
  if (m.rows() == 0) return true;
  const double scale = std::max(m.diagonal().cwiseAbs().maxCoeff(), 0.0);
  return min_eigenvalue(m) >= -rel_tol * scale;
}

inline double relative_frobenius_error(const Matrix& estimate, const Matrix& reference) {
  return (estimate - reference).norm() / reference.norm();
}

// ---- input kernel --------------------------------------------------------

inline InputKernel input_kernel(const Matrix& X, const NetworkSpec& spec) {
  if (static_cast<std::size_t>(X.cols()) != spec.input_dim)
    throw ShapeError("input dimension " + std::to_string(X.cols()) +
                     " does not match spec input_dim " + std::to_string(spec.input_dim));
  InputKernel out;
  out.num_points = static_cast<std::size_t>(X.rows());
  if (!spec.spatial_input()) {
    out.gram = (X * X.transpose()) / static_cast<double>(spec.input_dim);
    return out;
  }
  const auto P = static_cast<Eigen::Index>(spec.spatial_size);
  const auto C = static_cast<Eigen::Index>(spec.input_channels());
  const Eigen::Index n = X.rows();
  // Row (i, p) of `pix` holds the C channel values of pixel p of input i.
  Matrix pix(n * P, C);
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index c = 0; c < C; ++c)
      for (Eigen::Index p = 0; p < P; ++p) pix(i * P + p, c) = X(i, c * P + p);
  out.gram = (pix * pix.transpose()) / static_cast<double>(C);
  out.spatial = static_cast<std::size_t>(P);
  out.spatial_axes = true;
  return out;
}

inline KernelState initial_state(const InputKernel& k0, bool track_contributions = false) {
  KernelState s;
  s.num_points = k0.num_points;
  s.spatial = k0.spatial;
  s.spatial_axes = k0.spatial_axes;
  s.nngp = k0.gram;
  s.ntk = Matrix::Zero(k0.gram.rows(), k0.gram.cols());
  if (track_contributions) s.contributions.emplace();
  return s;
}

// ---- spatial operators ---------------------------------------------------

namespace detail {

inline Eigen::Index wrap(Eigen::Index p, Eigen::Index P) {
  const Eigen::Index r = p % P;
  return r < 0 ? r + P : r;
}

// Mean of `count` values as first + Σ (v - first) / count, which returns a
// constant input unchanged.
template <class Get>
double shifted_mean(Eigen::Index count, Get&& get) {
  const double first = get(0);
  double acc = 0.0;
  for (Eigen::Index k = 1; k < count; ++k) acc += get(k) - first;
  return first + acc / static_cast<double>(count);
}

}  // namespace detail

// Diagonal filter average: out[(i,p),(j,q)] = (1/M) Σ_m T[(i,p+m),(j,q+m)],
// pixel indices wrapping circularly.
inline Matrix filter_average(const Matrix& t, std::size_t num_points, std::size_t spatial,
                             std::span<const int> offsets) {
  const auto n = static_cast<Eigen::Index>(num_points);
  const auto P = static_cast<Eigen::Index>(spatial);
  if (t.rows() != n * P || t.cols() != n * P)
    throw ShapeError("filter_average: tensor shape does not match (n, P)");
  if (offsets.empty()) throw ShapeError("filter_average: empty offset list");
  const auto M = static_cast<Eigen::Index>(offsets.size());
  Matrix out(t.rows(), t.cols());
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index j = 0; j < n; ++j)
      for (Eigen::Index p = 0; p < P; ++p)
        for (Eigen::Index q = 0; q < P; ++q)
          out(i * P + p, j * P + q) = detail::shifted_mean(M, [&](Eigen::Index k) {
            const Eigen::Index m = offsets[static_cast<std::size_t>(k)];
            return t(i * P + detail::wrap(p + m, P), j * P + detail::wrap(q + m, P));
          });
  return out;
}

inline Matrix gap_reduce(const Matrix& t, std::size_t num_points, std::size_t spatial) {
  const auto n = static_cast<Eigen::Index>(num_points);
  const auto P = static_cast<Eigen::Index>(spatial);
  Matrix out(n, n);
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index j = 0; j < n; ++j)
      out(i, j) = detail::shifted_mean(P * P, [&](Eigen::Index k) {
        return t(i * P + k / P, j * P + k % P);
      });
  return out;
}

inline Matrix vec_reduce(const Matrix& t, std::size_t num_points, std::size_t spatial) {
  const auto n = static_cast<Eigen::Index>(num_points);
  const auto P = static_cast<Eigen::Index>(spatial);
  Matrix out(n, n);
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index j = 0; j < n; ++j)
      out(i, j) = detail::shifted_mean(P, [&](Eigen::Index k) { return t(i * P + k, j * P + k); });
  return out;
}

// ---- ReLU dual maps ------------------------------------------------------

struct ReluMaps {
  Matrix value;       // T(K)  = E[relu(u) relu(v)]
  Matrix derivative;  // Ṫ(K) = E[step(u) step(v)]
};

inline constexpr double kCorrelationTolerance = 1e-12;

inline ReluMaps relu_maps(const Matrix& k) {
  if (k.rows() != k.cols()) throw ShapeError("relu map needs a square covariance");
  const Eigen::Index n = k.rows();
  const double max_diag = n ? k.diagonal().cwiseAbs().maxCoeff() : 0.0;
  Vector diag(n);
  for (Eigen::Index a = 0; a < n; ++a) {
    const double v = k(a, a);
    if (!std::isfinite(v)) throw NumericalError("relu map: non-finite variance");
    if (v < -kCorrelationTolerance * std::max(1.0, max_diag))
      throw NumericalError("relu map: negative variance " + std::to_string(v));
    diag(a) = std::max(v, 0.0);
  }
  constexpr double pi = std::numbers::pi;
  ReluMaps out{Matrix(n, n), Matrix(n, n)};
  for (Eigen::Index b = 0; b < n; ++b)
    for (Eigen::Index a = 0; a < n; ++a) {
      const double prod = diag(a) * diag(b);
      if (prod <= 0.0) {
        out.value(a, b) = 0.0;
        out.derivative(a, b) = 0.0;
        continue;
      }
      const double norm = std::sqrt(prod);
      double rho = k(a, b) / norm;
      if (!std::isfinite(rho)) throw NumericalError("relu map: non-finite covariance");
      if (std::abs(rho) > 1.0 + kCorrelationTolerance)
        throw NumericalError("relu map: correlation " + std::to_string(rho) + " outside [-1, 1]");
      rho = std::clamp(rho, -1.0, 1.0);
      const double theta = std::acos(rho);
      out.value(a, b) = norm / (2.0 * pi) * (std::sin(theta) + (pi - theta) * rho);
      out.derivative(a, b) = (pi - theta) / (2.0 * pi);
    }
  return out;
}

inline Matrix relu_nngp_map(const Matrix& k) { return relu_maps(k).value; }

inline std::optional<Matrix> relu_ntk_map(const Matrix& k_pre, const std::optional<Matrix>& ntk) {
  if (!ntk) return std::nullopt;
  if (ntk->rows() != k_pre.rows() || ntk->cols() != k_pre.cols())
    throw ShapeError("relu_ntk_map: kernel shapes differ");
  return Matrix(relu_maps(k_pre).derivative.cwiseProduct(*ntk));
}

// ---- layer steps ---------------------------------------------------------

namespace detail {

// This layer's own NTK contribution given the (filter-averaged) incoming NNGP.
inline Contribution affine_parts(const Matrix& k, double fan_in_times_m, const Hyperparams& hp,
                                 Parameterization p) {
  Contribution c;
  if (p == Parameterization::NTK) {
    c.weight_part = hp.sigma_w_sq * k;
    c.bias_part = Matrix::Constant(k.rows(), k.cols(), hp.sigma_b_sq);
  } else {
    c.weight_part = fan_in_times_m * k;
    c.bias_part = Matrix::Constant(k.rows(), k.cols(), 1.0);
  }
  return c;
}

inline void affine_update(KernelState& s, const Matrix& k_in, const Matrix* theta_in,
                          double fan_in_times_m, const Hyperparams& hp, Parameterization p,
                          const auto& carry) {
  Matrix next_nngp = (hp.sigma_w_sq * k_in).array() + hp.sigma_b_sq;
  if (p == Parameterization::NaiveStandard || s.divergent()) {
    s.ntk.reset();
    s.contributions.reset();
  } else {
    Contribution own = affine_parts(k_in, fan_in_times_m, hp, p);
    Matrix next_ntk = own.weight_part + own.bias_part;
    next_ntk += hp.sigma_w_sq * (*theta_in);
    if (s.contributions) {
      for (auto& c : *s.contributions) {
        c.weight_part = hp.sigma_w_sq * carry(c.weight_part);
        c.bias_part = hp.sigma_w_sq * carry(c.bias_part);
      }
      s.contributions->push_back(std::move(own));
    }
    s.ntk = std::move(next_ntk);
  }
  s.nngp = std::move(next_nngp);
  ++s.layer_index;
}

}  // namespace detail

// Fully connected affine layer with baseline fan-in `fan_in`.
inline KernelState dense_step(KernelState s, std::size_t fan_in, const Hyperparams& hp,
                              Parameterization p) {
  if (s.spatial_axes) throw ShapeError("dense_step: spatial state must be reduced first");
  const Matrix k = s.nngp;
  detail::affine_update(s, k, s.ntk ? &*s.ntk : nullptr, static_cast<double>(fan_in), hp, p,
                        [](const Matrix& m) -> const Matrix& { return m; });
  return s;
}

// Circular convolution with `fan_in` baseline input channels.
inline KernelState conv_step(KernelState s, std::size_t fan_in, std::span<const int> offsets,
                             const Hyperparams& hp, Parameterization p) {
  if (!s.spatial_axes) throw ShapeError("conv_step: state has no spatial axes");
  const Matrix k = filter_average(s.nngp, s.num_points, s.spatial, offsets);
  std::optional<Matrix> theta;
  if (s.ntk && p != Parameterization::NaiveStandard)
    theta = filter_average(*s.ntk, s.num_points, s.spatial, offsets);
  const double nm = static_cast<double>(fan_in * offsets.size());
  const std::size_t n = s.num_points, P = s.spatial;
  detail::affine_update(s, k, theta ? &*theta : nullptr, nm, hp, p,
                        [&](const Matrix& m) { return filter_average(m, n, P, offsets); });
  return s;
}

inline KernelState relu_step(KernelState s) {
  ReluMaps maps = relu_maps(s.nngp);
  if (s.ntk) s.ntk = maps.derivative.cwiseProduct(*s.ntk);
  if (s.contributions)
    for (auto& c : *s.contributions) {
      c.weight_part = maps.derivative.cwiseProduct(c.weight_part);
      c.bias_part = maps.derivative.cwiseProduct(c.bias_part);
    }
  s.nngp = std::move(maps.value);
  ++s.layer_index;
  return s;
}

namespace detail {

template <class Reduce>
KernelState reduce_state(KernelState s, Reduce&& reduce, const char* name) {
  if (!s.spatial_axes) throw ShapeError(std::string(name) + ": state has no spatial axes");
  s.nngp = reduce(s.nngp);
  if (s.ntk) s.ntk = reduce(*s.ntk);
  if (s.contributions)
    for (auto& c : *s.contributions) {
      c.weight_part = reduce(c.weight_part);
      c.bias_part = reduce(c.bias_part);
    }
  s.spatial = 1;
  s.spatial_axes = false;
  ++s.layer_index;
  return s;
}

}  // namespace detail

inline KernelState gap_reduce(KernelState s) {
  const std::size_t n = s.num_points, P = s.spatial;
  return detail::reduce_state(
      std::move(s), [&](const Matrix& m) { return gap_reduce(m, n, P); }, "gap_reduce");
}

inline KernelState vec_reduce(KernelState s) {
  const std::size_t n = s.num_points, P = s.spatial;
  return detail::reduce_state(
      std::move(s), [&](const Matrix& m) { return vec_reduce(m, n, P); }, "vec_reduce");
}

// ---- whole-network propagation -------------------------------------------

namespace detail {

inline KernelState apply_layer(KernelState s, const NetworkSpec& spec, const LayerSpec& layer,
                               const AffineLayerPlan* affine) {
  switch (layer.kind) {
    case LayerKind::Dense:
      return dense_step(std::move(s), affine->fan_in_base, spec.hyper, spec.parameterization);
    case LayerKind::Conv:
      return conv_step(std::move(s), affine->fan_in_base, layer.filter_offsets, spec.hyper,
                       spec.parameterization);
    case LayerKind::Relu: return relu_step(std::move(s));
    case LayerKind::GlobalAvgPool: return gap_reduce(std::move(s));
    case LayerKind::VectorizeReadout: return vec_reduce(std::move(s));
  }
  return s;
}

inline Matrix stack_inputs(const Matrix& X, const Matrix* X2) {
  if (!X2) return X;
  if (X2->cols() != X.cols()) throw ShapeError("second input set has a different dimension");
  Matrix all(X.rows() + X2->rows(), X.cols());
  all << X, *X2;
  return all;
}

}  // namespace detail

// Kernel state after every layer (element 0 is the input kernel).
inline std::vector<KernelState> propagate_trace(const NetworkSpec& spec, const Matrix& X,
                                                bool track_contributions = false) {
  const auto plan = affine_plan(spec);
  std::vector<KernelState> states;
  states.push_back(initial_state(input_kernel(X, spec), track_contributions));
  std::size_t next_affine = 0;
  for (const auto& layer : spec.layers) {
    const AffineLayerPlan* a = layer.parametric() ? &plan[next_affine++] : nullptr;
    states.push_back(detail::apply_layer(states.back(), spec, layer, a));
  }
  return states;
}

// Readout-level K and Θ over the rows of [X; X2].
inline KernelState propagate(const NetworkSpec& spec, const Matrix& X, const Matrix* X2 = nullptr,
                             bool track_contributions = false) {
  const auto plan = affine_plan(spec);
  KernelState s = initial_state(input_kernel(detail::stack_inputs(X, X2), spec),
                                track_contributions);
  std::size_t next_affine = 0;
  for (const auto& layer : spec.layers) {
    const AffineLayerPlan* a = layer.parametric() ? &plan[next_affine++] : nullptr;
    s = detail::apply_layer(std::move(s), spec, layer, a);
  }
  return s;
}

// NTK contribution of the final affine layer alone.
inline Matrix readout_kernel(const NetworkSpec& spec, const Matrix& X) {
  if (spec.parameterization == Parameterization::NaiveStandard)
    throw DivergentKernelError(
        "readout kernel is not defined for the naive standard parameterization");
  const auto plan = affine_plan(spec);
  KernelState s = initial_state(input_kernel(X, spec));
  std::size_t next_affine = 0;
  for (std::size_t i = 0; i + 1 < spec.layers.size(); ++i) {
    const auto& layer = spec.layers[i];
    const AffineLayerPlan* a = layer.parametric() ? &plan[next_affine++] : nullptr;
    s = detail::apply_layer(std::move(s), spec, layer, a);
  }
  const auto& last = plan.back();
  Contribution c = detail::affine_parts(s.nngp, static_cast<double>(last.fan_in_base), spec.hyper,
                                        spec.parameterization);
  return c.weight_part + c.bias_part;
}

// Per-affine-layer (weight, bias) NTK contributions, in layer order.
inline std::vector<Contribution> decompose(const NetworkSpec& spec, const Matrix& X) {
  if (spec.parameterization == Parameterization::NaiveStandard)
    throw DivergentKernelError("naive standard NTK has no finite decomposition");
  return std::move(*propagate(spec, X, nullptr, true).contributions);
}

// Train/test blocks of a kernel over [train; test] rows.
struct KernelBlocks {
  Matrix train;  // n x n
  Matrix cross;  // m x n, test rows against train columns
  Matrix test;   // m x m
};

inline KernelBlocks split_blocks(const Matrix& full, std::size_t n_train) {
  const auto n = static_cast<Eigen::Index>(n_train);
  const Eigen::Index m = full.rows() - n;
  if (m < 0) throw ShapeError("split_blocks: n_train exceeds kernel size");
  return {full.topLeftCorner(n, n), full.bottomLeftCorner(m, n), full.bottomRightCorner(m, m)};
}

}  // namespace ntk
