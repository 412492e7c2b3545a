#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <vector>

#include <Eigen/Dense>

#include "graphyr/errors.hpp"

namespace graphyr::qp {

/// minimize 0.5 x'Hx + g'x  subject to  lower <= A x <= upper.
/// H must be positive semidefinite; infinite bounds are allowed. Rows with
/// lower == upper are treated as equalities.
struct Problem {
  Eigen::MatrixXd hessian;
  Eigen::VectorXd gradient;
  Eigen::MatrixXd constraints;
  Eigen::VectorXd lower;
  Eigen::VectorXd upper;
};

enum class Status { optimal, infeasible };

struct Result {
  Status status = Status::infeasible;
  Eigen::VectorXd x;
  double objective = std::numeric_limits<double>::infinity();
  double kkt_residual = std::numeric_limits<double>::infinity();
  Eigen::VectorXd multipliers; // per row; > 0 at an active lower bound, < 0 at an active upper bound
  int iterations = 0;
};

struct Options {
  int max_iterations = 500;
  double feasibility_tol = 1e-9;
  double kkt_tol = 1e-8;
};

namespace detail {

enum class Side { lower, upper, equality };

struct ActiveRow {
  Eigen::Index row;
  Side side;
};

inline constexpr double inf = std::numeric_limits<double>::infinity();

inline double max_violation(const Problem& p, const Eigen::VectorXd& x) {
  double worst = 0.0;
  if (p.constraints.rows() == 0) return 0.0;
  const Eigen::VectorXd ax = p.constraints * x;
  for (Eigen::Index i = 0; i < ax.size(); ++i) {
    worst = std::max({worst, p.lower[i] - ax[i], ax[i] - p.upper[i]});
  }
  return worst;
}

inline Eigen::MatrixXd active_matrix(const Problem& p, const std::vector<ActiveRow>& working) {
  Eigen::MatrixXd a(static_cast<Eigen::Index>(working.size()), p.hessian.cols());
  for (std::size_t k = 0; k < working.size(); ++k) a.row(static_cast<Eigen::Index>(k)) = p.constraints.row(working[k].row);
  return a;
}

/// Orthonormal basis of the null space of `a` (rows are constraint normals).
inline Eigen::MatrixXd null_space(const Eigen::MatrixXd& a, Eigen::Index n) {
  if (a.rows() == 0) return Eigen::MatrixXd::Identity(n, n);
  Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(a.transpose());
  qr.setThreshold(1e-12);
  const Eigen::Index rank = qr.rank();
  const Eigen::MatrixXd q = qr.householderQ() * Eigen::MatrixXd::Identity(n, n);
  return q.rightCols(n - rank);
}

inline Eigen::VectorXd least_squares_multipliers(const Eigen::MatrixXd& a, const Eigen::VectorXd& grad) {
  if (a.rows() == 0) return Eigen::VectorXd();
  return a.transpose().colPivHouseholderQr().solve(grad);
}

struct KktReport {
  double residual;
  Eigen::VectorXd multipliers;
};

inline KktReport kkt(const Problem& p, const Eigen::VectorXd& x, const std::vector<ActiveRow>& working) {
  const Eigen::VectorXd grad = p.hessian * x + p.gradient;
  const Eigen::MatrixXd a = active_matrix(p, working);
  const Eigen::VectorXd lambda = least_squares_multipliers(a, grad);
  Eigen::VectorXd full = Eigen::VectorXd::Zero(p.constraints.rows());
  double residual = max_violation(p, x);
  Eigen::VectorXd stationarity = grad;
  if (a.rows() > 0) stationarity -= a.transpose() * lambda;
  residual = std::max(residual, stationarity.size() ? stationarity.cwiseAbs().maxCoeff() : 0.0);
  const Eigen::VectorXd ax = p.constraints.rows() ? Eigen::VectorXd(p.constraints * x) : Eigen::VectorXd();
  for (std::size_t k = 0; k < working.size(); ++k) {
    const auto& w = working[k];
    const double l = lambda[static_cast<Eigen::Index>(k)];
    full[w.row] = l;
    if (w.side == Side::lower) {
      residual = std::max({residual, -l, std::abs(l * (ax[w.row] - p.lower[w.row]))});
    } else if (w.side == Side::upper) {
      residual = std::max({residual, l, std::abs(l * (ax[w.row] - p.upper[w.row]))});
    }
  }
  return {residual, full};
}

/// Primal active-set iteration from a (nearly) feasible start. Handles
/// semidefinite H by stepping along zero-curvature descent directions until a
/// constraint blocks.
inline Result active_set(const Problem& p, Eigen::VectorXd x, const Options& opt) {
  const Eigen::Index n = p.hessian.cols();
  const Eigen::Index m = p.constraints.rows();
  std::vector<ActiveRow> working;
  std::vector<char> in_working(static_cast<std::size_t>(m), 0);
  for (Eigen::Index i = 0; i < m; ++i) {
    if (p.lower[i] == p.upper[i]) {
      working.push_back({i, Side::equality});
      in_working[static_cast<std::size_t>(i)] = 1;
    }
  }

  Result result;
  for (int iter = 0; iter < opt.max_iterations; ++iter) {
    result.iterations = iter + 1;
    const Eigen::VectorXd grad = p.hessian * x + p.gradient;
    const Eigen::MatrixXd a = active_matrix(p, working);
    const Eigen::MatrixXd z = null_space(a, n);

    Eigen::VectorXd d = Eigen::VectorXd::Zero(n);
    bool ray = false;
    if (z.cols() > 0) {
      const Eigen::MatrixXd hr = z.transpose() * p.hessian * z;
      const Eigen::VectorXd gr = z.transpose() * grad;
      Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(hr);
      const Eigen::VectorXd& lam = eig.eigenvalues();
      const Eigen::MatrixXd& vecs = eig.eigenvectors();
      const double scale = std::max(1.0, lam.cwiseAbs().maxCoeff());
      const Eigen::VectorXd c = vecs.transpose() * gr;
      Eigen::VectorXd kernel_part = Eigen::VectorXd::Zero(hr.rows());
      Eigen::VectorXd newton = Eigen::VectorXd::Zero(hr.rows());
      for (Eigen::Index i = 0; i < lam.size(); ++i) {
        if (lam[i] <= 1e-11 * scale) {
          kernel_part -= c[i] * vecs.col(i);
        } else {
          newton -= (c[i] / lam[i]) * vecs.col(i);
        }
      }
      if (kernel_part.norm() > 1e-13) {
        ray = true;
        d = z * kernel_part;
      } else {
        d = z * newton;
      }
    }

    if (!ray && d.lpNorm<Eigen::Infinity>() <= 1e-13) {
      const Eigen::VectorXd lambda = least_squares_multipliers(a, grad);
      double worst = 1e-12;
      std::ptrdiff_t drop = -1;
      for (std::size_t k = 0; k < working.size(); ++k) {
        const double l = lambda[static_cast<Eigen::Index>(k)];
        const double wrong = working[k].side == Side::lower ? -l : (working[k].side == Side::upper ? l : 0.0);
        if (wrong > worst) {
          worst = wrong;
          drop = static_cast<std::ptrdiff_t>(k);
        }
      }
      if (drop < 0) {
        const auto report = kkt(p, x, working);
        result.status = Status::optimal;
        result.x = x;
        result.multipliers = report.multipliers;
        result.kkt_residual = report.residual;
        result.objective = 0.5 * x.dot(p.hessian * x) + p.gradient.dot(x);
        return result;
      }
      in_working[static_cast<std::size_t>(working[static_cast<std::size_t>(drop)].row)] = 0;
      working.erase(working.begin() + drop);
      continue;
    }

    // Ratio test over rows outside the working set.
    double alpha = ray ? inf : 1.0;
    Eigen::Index block_row = -1;
    Side block_side = Side::lower;
    if (m > 0) {
      const Eigen::VectorXd ax = p.constraints * x;
      const Eigen::VectorXd ad = p.constraints * d;
      const double dn = d.norm();
      for (Eigen::Index i = 0; i < m; ++i) {
        if (in_working[static_cast<std::size_t>(i)]) continue;
        const double tol = 1e-14 * p.constraints.row(i).norm() * dn;
        if (ad[i] < -tol && std::isfinite(p.lower[i])) {
          const double step = std::max(0.0, (p.lower[i] - ax[i]) / ad[i]);
          if (step < alpha) {
            alpha = step;
            block_row = i;
            block_side = Side::lower;
          }
        } else if (ad[i] > tol && std::isfinite(p.upper[i])) {
          const double step = std::max(0.0, (p.upper[i] - ax[i]) / ad[i]);
          if (step < alpha) {
            alpha = step;
            block_row = i;
            block_side = Side::upper;
          }
        }
      }
    }
    if (!std::isfinite(alpha)) throw DivergenceError("qp: objective unbounded below on the feasible set");
    x += alpha * d;
    if (block_row >= 0) {
      working.push_back({block_row, block_side});
      in_working[static_cast<std::size_t>(block_row)] = 1;
    }
  }
  throw DivergenceError("qp: active-set iteration limit reached");
}

} // namespace detail

/// Two-phase solve: an elastic LP finds a feasible point (or proves
/// infeasibility), then the active-set iteration minimizes the quadratic.
inline Result solve(const Problem& p, const Eigen::VectorXd& start, const Options& opt = {}) {
  using detail::inf;
  const Eigen::Index n = p.hessian.cols();
  const Eigen::Index m = p.constraints.rows();

  if (n == 0) {
    Result r;
    r.x = Eigen::VectorXd();
    r.multipliers = Eigen::VectorXd::Zero(m);
    r.iterations = 0;
    for (Eigen::Index i = 0; i < m; ++i) {
      if (p.lower[i] > opt.feasibility_tol || p.upper[i] < -opt.feasibility_tol) return r;
    }
    r.status = Status::optimal;
    r.objective = 0.0;
    r.kkt_residual = 0.0;
    return r;
  }

  Eigen::VectorXd x = start;
  double violation = detail::max_violation(p, x);
  int phase1_iterations = 0;
  if (violation > 0.0) {
    // Elastic phase: minimize t subject to lower - t <= A x <= upper + t, t >= 0.
    std::vector<Eigen::Index> rows_lo, rows_hi;
    for (Eigen::Index i = 0; i < m; ++i) {
      if (std::isfinite(p.lower[i])) rows_lo.push_back(i);
      if (std::isfinite(p.upper[i])) rows_hi.push_back(i);
    }
    const auto m1 = static_cast<Eigen::Index>(rows_lo.size() + rows_hi.size() + 1);
    Problem e;
    e.hessian = Eigen::MatrixXd::Zero(n + 1, n + 1);
    e.gradient = Eigen::VectorXd::Zero(n + 1);
    e.gradient[n] = 1.0;
    e.constraints = Eigen::MatrixXd::Zero(m1, n + 1);
    e.lower = Eigen::VectorXd::Constant(m1, -inf);
    e.upper = Eigen::VectorXd::Constant(m1, inf);
    Eigen::Index r = 0;
    for (auto i : rows_lo) {
      e.constraints.row(r).head(n) = p.constraints.row(i);
      e.constraints(r, n) = 1.0;
      e.lower[r++] = p.lower[i];
    }
    for (auto i : rows_hi) {
      e.constraints.row(r).head(n) = p.constraints.row(i);
      e.constraints(r, n) = -1.0;
      e.upper[r++] = p.upper[i];
    }
    e.constraints(r, n) = 1.0;
    e.lower[r] = 0.0;
    Eigen::VectorXd x1(n + 1);
    x1.head(n) = x;
    x1[n] = violation + 1.0;
    const Result phase1 = detail::active_set(e, x1, opt);
    phase1_iterations = phase1.iterations;
    x = phase1.x.head(n);
    violation = detail::max_violation(p, x);
    if (violation > opt.feasibility_tol) {
      Result r1;
      r1.x = x;
      r1.multipliers = Eigen::VectorXd::Zero(m);
      r1.iterations = phase1_iterations;
      return r1;
    }
  }
  Result r = detail::active_set(p, x, opt);
  r.iterations += phase1_iterations;
  if (r.kkt_residual > opt.kkt_tol) {
    throw DivergenceError("qp: KKT residual " + std::to_string(r.kkt_residual) + " above tolerance");
  }
  return r;
}

} // namespace graphyr::qp
