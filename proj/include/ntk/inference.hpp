#pragma once

// Kernel regression predictions: NNGP posterior mean, NTK gradient-flow mean
// predictions (t -> infinity and finite t), and the GD stability threshold.

#include <array>
#include <cmath>
#include <cstddef>

#include <Eigen/Dense>

#include "ntk/error.hpp"
#include "ntk/kernel.hpp"

namespace ntk {

enum class KernelChoice { Nngp, Ntk };

struct Predictor {
  Matrix train_kernel;  // n x n
  Matrix cross_kernel;  // m x n
  Matrix targets;       // n x k
  double ridge = 0.0;

  // Splits a kernel over [train; test] rows. Asking for the NTK of a
  // naive-standard state throws DivergentKernelError.
  static Predictor from_state(const KernelState& state, KernelChoice which, std::size_t n_train,
                              const Matrix& targets, double ridge = 0.0) {
    if (state.spatial_axes) throw ShapeError("predictor needs a readout-level kernel");
    const Matrix& full = which == KernelChoice::Nngp ? state.nngp : state.ntk_matrix();
    auto blocks = split_blocks(full, n_train);
    return {std::move(blocks.train), std::move(blocks.cross), targets, ridge};
  }

  void check() const {
    const Eigen::Index n = train_kernel.rows();
    if (train_kernel.cols() != n) throw ShapeError("predictor: train kernel is not square");
    if (cross_kernel.cols() != n) throw ShapeError("predictor: cross kernel width != n_train");
    if (targets.rows() != n) throw ShapeError("predictor: targets rows != n_train");
    if (!(ridge >= 0.0)) throw SpecError("predictor: ridge must be >= 0");
  }
};

struct Prediction {
  Matrix values;       // m x k
  double jitter = 0.0;  // diagonal added on top of the ridge to factorize
};

inline constexpr std::array<double, 3> kJitterLadder = {1e-10, 1e-8, 1e-6};

namespace detail {

// (K + (ridge + jitter) I)^{-1} Y, escalating jitter until Cholesky succeeds.
inline Matrix regularized_solve(const Matrix& k, const Matrix& y, double ridge, double* jitter_used) {
  const Eigen::Index n = k.rows();
  const double mean_diag = n ? k.diagonal().mean() : 0.0;
  auto attempt = [&](double jitter, Matrix& out) {
    Matrix a = k;
    a.diagonal().array() += ridge + jitter;
    Eigen::LLT<Matrix> llt(a);
    if (llt.info() != Eigen::Success) return false;
    out = llt.solve(y);
    return out.allFinite();
  };
  Matrix sol;
  if (attempt(0.0, sol)) {
    *jitter_used = 0.0;
    return sol;
  }
  for (double rel : kJitterLadder) {
    const double jitter = rel * std::abs(mean_diag);
    if (attempt(jitter, sol)) {
      *jitter_used = jitter;
      return sol;
    }
  }
  throw NumericalError("kernel factorization failed after jitter escalation");
}

}  // namespace detail

inline Prediction gp_mean(const Predictor& p) {
  p.check();
  Prediction out;
  out.values = p.cross_kernel * detail::regularized_solve(p.train_kernel, p.targets, p.ridge, &out.jitter);
  return out;
}

// Mean prediction of an infinitely wide network trained to convergence by
// gradient flow; the same linear solve as gp_mean with Θ in place of K.
inline Prediction ntk_predict_inf(const Predictor& p) { return gp_mean(p); }

inline Prediction ntk_predict_inf(const KernelState& state, std::size_t n_train,
                                  const Matrix& targets, double ridge = 0.0) {
  return ntk_predict_inf(Predictor::from_state(state, KernelChoice::Ntk, n_train, targets, ridge));
}

// cross · Θ⁻¹ (I − exp(−lr·Θ·t)) · Y, evaluated in the eigenbasis of Θ + ridge·I.
inline Prediction ntk_predict_time(const Predictor& p, double t, double lr) {
  p.check();
  if (!std::isfinite(t) || t < 0.0) throw NumericalError("ntk_predict_time: t must be finite and >= 0");
  if (!(lr > 0.0) || !std::isfinite(lr)) throw NumericalError("ntk_predict_time: lr must be > 0");
  Matrix a = p.train_kernel;
  a.diagonal().array() += p.ridge;
  Eigen::SelfAdjointEigenSolver<Matrix> es(a);
  if (es.info() != Eigen::Success) throw NumericalError("ntk_predict_time: eigendecomposition failed");
  const Vector& lam = es.eigenvalues();
  Vector gain(lam.size());
  const double tiny = 1e-300;
  for (Eigen::Index i = 0; i < lam.size(); ++i)
    gain(i) = lam(i) > tiny ? -std::expm1(-lr * t * lam(i)) / lam(i) : lr * t;
  const Matrix& v = es.eigenvectors();
  Prediction out;
  out.values = p.cross_kernel * (v * (gain.asDiagonal() * (v.transpose() * p.targets)));
  return out;
}

// 2 / λ_max: the largest stable learning rate of full-batch GD on the
// linearized ½||f − y||² dynamics.
inline double critical_lr(const Matrix& theta_train) {
  const double top = max_eigenvalue(theta_train);
  if (!(top > 0.0)) throw NumericalError("critical_lr: kernel has no positive eigenvalue");
  return 2.0 / top;
}

inline double critical_lr(const KernelState& state) { return critical_lr(state.ntk_matrix()); }

}  // namespace ntk
