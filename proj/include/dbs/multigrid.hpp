#pragma once

// Seven-point cell-centered operators on a structured grid, an aggregation
// multigrid V-cycle built from them, and a preconditioned conjugate-gradient
// solver. Everything is templated on the scalar type: with std::complex the
// same code runs COCG (unconjugated inner products) on complex-symmetric
// admittivity operators.

#include "dbs/common.hpp"

#include <cmath>
#include <cstdint>
#include <memory>
#include <vector>

namespace dbs {

/// Unconjugated bilinear form x^T y; equals the usual dot product for reals.
template <typename Scalar>
Scalar bilinear_dot(const VectorX<Scalar>& x, const VectorX<Scalar>& y) {
  return (x.array() * y.array()).sum();
}

/// Symmetric seven-point operator
///   (A x)_i = diag_i x_i - sum_{nb} c_{i,nb} x_nb
/// where couplings are stored once per face on the lower cell. Inactive
/// cells carry diag = 1 and no couplings.
template <typename Scalar>
struct StencilLevel {
  Eigen::Array3i n = Eigen::Array3i::Zero();
  VectorX<Scalar> diag;
  VectorX<Scalar> cx, cy, cz;
  std::vector<std::uint8_t> active;

  StencilLevel() = default;
  explicit StencilLevel(const Eigen::Array3i& dims) : n(dims) {
    const auto m = size();
    diag = VectorX<Scalar>::Ones(static_cast<Eigen::Index>(m));
    cx = cy = cz = VectorX<Scalar>::Zero(static_cast<Eigen::Index>(m));
    active.assign(m, 0);
  }

  std::size_t size() const { return static_cast<std::size_t>(n[0]) * n[1] * n[2]; }
  std::size_t sx() const { return 1; }
  std::size_t sy() const { return static_cast<std::size_t>(n[0]); }
  std::size_t sz() const { return static_cast<std::size_t>(n[0]) * n[1]; }

  void apply(const VectorX<Scalar>& x, VectorX<Scalar>& y) const {
    y.resize(x.size());
    const int nx = n[0], ny = n[1], nz = n[2];
    const std::size_t Sy = sy(), Sz = sz();
    const Scalar* X = x.data();
    Scalar* Y = y.data();
    for (int k = 0; k < nz; ++k) {
      for (int j = 0; j < ny; ++j) {
        const std::size_t row = static_cast<std::size_t>(j) * Sy + static_cast<std::size_t>(k) * Sz;
        for (int i = 0; i < nx; ++i) {
          const std::size_t id = row + static_cast<std::size_t>(i);
          Scalar s = diag[id] * X[id];
          if (i > 0) s -= cx[id - 1] * X[id - 1];
          if (i + 1 < nx) s -= cx[id] * X[id + 1];
          if (j > 0) s -= cy[id - Sy] * X[id - Sy];
          if (j + 1 < ny) s -= cy[id] * X[id + Sy];
          if (k > 0) s -= cz[id - Sz] * X[id - Sz];
          if (k + 1 < nz) s -= cz[id] * X[id + Sz];
          Y[id] = s;
        }
      }
    }
  }

  /// One Gauss-Seidel half sweep over the cells of one red/black color.
  void smooth_color(const VectorX<Scalar>& b, VectorX<Scalar>& x, int color) const {
    const int nx = n[0], ny = n[1], nz = n[2];
    const std::size_t Sy = sy(), Sz = sz();
    Scalar* X = x.data();
    for (int k = 0; k < nz; ++k) {
      for (int j = 0; j < ny; ++j) {
        const std::size_t row = static_cast<std::size_t>(j) * Sy + static_cast<std::size_t>(k) * Sz;
        for (int i = (color + j + k) & 1; i < nx; i += 2) {
          const std::size_t id = row + static_cast<std::size_t>(i);
          if (!active[id]) continue;
          Scalar s = b[id];
          if (i > 0) s += cx[id - 1] * X[id - 1];
          if (i + 1 < nx) s += cx[id] * X[id + 1];
          if (j > 0) s += cy[id - Sy] * X[id - Sy];
          if (j + 1 < ny) s += cy[id] * X[id + Sy];
          if (k > 0) s += cz[id - Sz] * X[id - Sz];
          if (k + 1 < nz) s += cz[id] * X[id + Sz];
          X[id] = s / diag[id];
        }
      }
    }
  }

  /// Galerkin coarse operator P^T A P for piecewise-constant 2x2x2 aggregates.
  StencilLevel coarsen() const {
    const Eigen::Array3i m = (n + 1) / 2;
    StencilLevel c(m);
    c.diag.setZero();
    const int nx = n[0], ny = n[1], nz = n[2];
    for (int k = 0; k < nz; ++k) {
      for (int j = 0; j < ny; ++j) {
        for (int i = 0; i < nx; ++i) {
          const std::size_t id = static_cast<std::size_t>(i) + sy() * j + sz() * k;
          if (!active[id]) continue;
          const std::size_t ci = static_cast<std::size_t>(i / 2) + c.sy() * (j / 2) + c.sz() * (k / 2);
          c.active[ci] = 1;
          c.diag[ci] += diag[id];
          if (i + 1 < nx) {
            if ((i & 1) == 0) c.diag[ci] -= Scalar(2) * cx[id];
            else c.cx[ci] += cx[id];
          }
          if (j + 1 < ny) {
            if ((j & 1) == 0) c.diag[ci] -= Scalar(2) * cy[id];
            else c.cy[ci] += cy[id];
          }
          if (k + 1 < nz) {
            if ((k & 1) == 0) c.diag[ci] -= Scalar(2) * cz[id];
            else c.cz[ci] += cz[id];
          }
        }
      }
    }
    for (std::size_t ci = 0; ci < c.size(); ++ci)
      if (!c.active[ci]) c.diag[static_cast<Eigen::Index>(ci)] = Scalar(1);
    return c;
  }

  Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic> dense() const {
    const auto m = static_cast<Eigen::Index>(size());
    Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic> a = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>::Zero(m, m);
    for (int k = 0; k < n[2]; ++k)
      for (int j = 0; j < n[1]; ++j)
        for (int i = 0; i < n[0]; ++i) {
          const auto id = static_cast<Eigen::Index>(i + sy() * j + sz() * k);
          a(id, id) = diag[id];
          if (i + 1 < n[0]) a(id, id + 1) = a(id + 1, id) = -cx[id];
          if (j + 1 < n[1]) a(id, id + sy()) = a(id + sy(), id) = -cy[id];
          if (k + 1 < n[2]) a(id, id + sz()) = a(id + sz(), id) = -cz[id];
        }
    return a;
  }
};

struct MultigridOptions {
  int smoothing_steps = 2;
  double over_correction = 1.8;  // coarse correction weight for constant interpolation
  std::size_t coarsest_cells = 600;
};

/// Symmetric V-cycle used as a preconditioner. Holds per-level scratch, so an
/// instance must not be shared between concurrent solves.
template <typename Scalar>
class Multigrid {
 public:
  using Matrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;

  Multigrid(std::shared_ptr<const StencilLevel<Scalar>> fine, MultigridOptions opts = {}) : opts_(opts) {
    levels_.push_back(std::move(fine));
    while (levels_.back()->size() > opts_.coarsest_cells && (levels_.back()->n > 1).any())
      levels_.push_back(std::make_shared<const StencilLevel<Scalar>>(levels_.back()->coarsen()));
    coarse_lu_ = levels_.back()->dense().partialPivLu();
    scratch_.resize(levels_.size());
    for (std::size_t l = 0; l < levels_.size(); ++l) {
      const auto m = static_cast<Eigen::Index>(levels_[l]->size());
      scratch_[l].x = VectorX<Scalar>::Zero(m);
      scratch_[l].b = VectorX<Scalar>::Zero(m);
      scratch_[l].r = VectorX<Scalar>::Zero(m);
    }
  }

  std::size_t levels() const { return levels_.size(); }

  /// z = M^{-1} r
  void apply(const VectorX<Scalar>& r, VectorX<Scalar>& z) const {
    z.setZero(r.size());
    cycle(0, r, z);
  }

 private:
  struct Scratch {
    VectorX<Scalar> x, b, r;
  };

  void cycle(std::size_t l, const VectorX<Scalar>& b, VectorX<Scalar>& x) const {
    const auto& A = *levels_[l];
    if (l + 1 == levels_.size()) {
      x = coarse_lu_.solve(b);
      return;
    }
    for (int s = 0; s < opts_.smoothing_steps; ++s) {
      A.smooth_color(b, x, 0);
      A.smooth_color(b, x, 1);
    }
    auto& sc = scratch_[l];
    A.apply(x, sc.r);
    sc.r = b - sc.r;

    const auto& C = *levels_[l + 1];
    auto& cs = scratch_[l + 1];
    cs.b.setZero();
    for (int k = 0; k < A.n[2]; ++k)
      for (int j = 0; j < A.n[1]; ++j)
        for (int i = 0; i < A.n[0]; ++i) {
          const std::size_t id = i + A.sy() * j + A.sz() * k;
          if (A.active[id]) cs.b[static_cast<Eigen::Index>(i / 2 + C.sy() * (j / 2) + C.sz() * (k / 2))] += sc.r[static_cast<Eigen::Index>(id)];
        }
    cs.x.setZero();
    cycle(l + 1, cs.b, cs.x);
    const Scalar w(opts_.over_correction);
    for (int k = 0; k < A.n[2]; ++k)
      for (int j = 0; j < A.n[1]; ++j)
        for (int i = 0; i < A.n[0]; ++i) {
          const std::size_t id = i + A.sy() * j + A.sz() * k;
          if (A.active[id]) x[static_cast<Eigen::Index>(id)] += w * cs.x[static_cast<Eigen::Index>(i / 2 + C.sy() * (j / 2) + C.sz() * (k / 2))];
        }
    for (int s = 0; s < opts_.smoothing_steps; ++s) {
      A.smooth_color(b, x, 1);
      A.smooth_color(b, x, 0);
    }
  }

  MultigridOptions opts_;
  std::vector<std::shared_ptr<const StencilLevel<Scalar>>> levels_;
  Eigen::PartialPivLU<Matrix> coarse_lu_;
  mutable std::vector<Scratch> scratch_;
};

struct KrylovResult {
  int iterations = 0;
  double relative_residual = 0.0;
  bool converged = false;
};

/// Preconditioned conjugate gradients (COCG for complex-symmetric operators).
/// Starts from x = 0; stops on ||r|| <= tol ||b||.
template <typename Scalar>
KrylovResult preconditioned_cg(const StencilLevel<Scalar>& A, const Multigrid<Scalar>& M, const VectorX<Scalar>& b,
                               VectorX<Scalar>& x, double tol, int max_iterations) {
  KrylovResult res;
  x = VectorX<Scalar>::Zero(b.size());
  const double bnorm = b.norm();
  if (bnorm == 0.0) {
    res.converged = true;
    return res;
  }
  VectorX<Scalar> r = b, z, p, q;
  Scalar rho_old(0);
  for (int it = 1; it <= max_iterations; ++it) {
    M.apply(r, z);
    const Scalar rho = bilinear_dot(r, z);
    if (it == 1) {
      p = z;
    } else {
      const Scalar beta = rho / rho_old;
      p = z + beta * p;
    }
    A.apply(p, q);
    const Scalar pq = bilinear_dot(p, q);
    if (std::abs(pq) == 0.0 || !std::isfinite(std::abs(pq))) {
      res.iterations = it;
      res.relative_residual = r.norm() / bnorm;
      return res;  // breakdown; caller reports non-convergence
    }
    const Scalar alpha = rho / pq;
    x += alpha * p;
    r -= alpha * q;
    rho_old = rho;
    res.iterations = it;
    res.relative_residual = r.norm() / bnorm;
    if (res.relative_residual <= tol) {
      res.converged = true;
      return res;
    }
  }
  return res;
}

}  // namespace dbs
