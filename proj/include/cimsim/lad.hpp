#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>

namespace cimsim {

struct LadOptions {
  /// Residual floor in the IRLS weights 1 / max(|r|, epsilon).
  double epsilon = 1e-8;
  int max_iterations = 200;
  /// Stop once an iteration improves the objective by less than this.
  double tolerance = 1e-9;
  /// Residuals smaller than this are reported as exactly zero.
  double zero_residual = 1e-9;
};

struct LadResult {
  Eigen::VectorXd x;
  Eigen::VectorXd residuals;  // y - A x
  double objective = 0.0;     // sum |residuals|
  int iterations = 0;
};

class RankDeficientError : public std::runtime_error {
 public:
  RankDeficientError(std::vector<int> columns, const std::string& what)
      : std::runtime_error(what), columns_(std::move(columns)) {}
  const std::vector<int>& columns() const { return columns_; }

 private:
  std::vector<int> columns_;
};

namespace detail {

inline double l1_objective(const Eigen::MatrixXd& a, const Eigen::VectorXd& y,
                           const Eigen::VectorXd& x) {
  return (y - a * x).cwiseAbs().sum();
}

/// Interpolates the n rows with the smallest |residual| that form a full-rank
/// basis. An L1 optimum always sits on such a vertex.
inline bool vertex_solution(const Eigen::MatrixXd& a, const Eigen::VectorXd& y,
                            const Eigen::VectorXd& r, std::vector<Eigen::Index>& rows,
                            Eigen::VectorXd& out) {
  const Eigen::Index n = a.cols();
  std::vector<Eigen::Index> order(static_cast<std::size_t>(a.rows()));
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](auto i, auto j) { return std::abs(r(i)) < std::abs(r(j)); });
  Eigen::MatrixXd basis(n, n);
  Eigen::VectorXd rhs(n);
  rows.clear();
  for (auto row : order) {
    const auto taken = static_cast<Eigen::Index>(rows.size());
    basis.row(taken) = a.row(row);
    Eigen::FullPivLU<Eigen::MatrixXd> lu(basis.topRows(taken + 1));
    if (lu.rank() == taken + 1) {
      rhs(taken) = y(row);
      rows.push_back(row);
      if (taken + 1 == n) break;
    }
  }
  if (static_cast<Eigen::Index>(rows.size()) < n) return false;
  out = basis.partialPivLu().solve(rhs);
  return out.allFinite();
}

/// Basis-exchange descent from a vertex. Releasing basis row k moves x along
/// the edge d = B^-1 e_k; the objective along that edge is a weighted sum of
/// |t - t_i| terms, minimized exactly at a weighted median. Stops at a vertex
/// with no improving edge, which is an L1 optimum.
inline void descend_vertices(const Eigen::MatrixXd& a, const Eigen::VectorXd& y,
                             std::vector<Eigen::Index>& rows, Eigen::VectorXd& x, double& obj) {
  const Eigen::Index n = a.cols();
  const Eigen::Index m = a.rows();
  struct Breakpoint {
    double t;
    double w;
    Eigen::Index row;
  };
  std::vector<Breakpoint> bps;
  for (int pass = 0; pass < 1000; ++pass) {
    Eigen::MatrixXd basis(n, n);
    for (Eigen::Index k = 0; k < n; ++k) basis.row(k) = a.row(rows[k]);
    const Eigen::MatrixXd dirs = basis.partialPivLu().inverse();  // column k = edge k
    const Eigen::VectorXd r = y - a * x;
    const Eigen::MatrixXd slopes = a * dirs;  // slopes(i, k) = a_i . d_k
    bool moved = false;
    for (Eigen::Index k = 0; k < n && !moved; ++k) {
      bps.clear();
      double total = 1.0;
      bps.push_back({0.0, 1.0, -1});  // the released row's own |t|
      for (Eigen::Index i = 0; i < m; ++i) {
        const double c = slopes(i, k);
        if (std::abs(c) < 1e-12) continue;
        if (std::find(rows.begin(), rows.end(), i) != rows.end()) continue;
        bps.push_back({r(i) / c, std::abs(c), i});
        total += std::abs(c);
      }
      std::sort(bps.begin(), bps.end(), [](const auto& p, const auto& q) { return p.t < q.t; });
      double acc = 0.0;
      const Breakpoint* med = nullptr;
      for (const auto& bp : bps) {
        acc += bp.w;
        if (acc >= 0.5 * total) {
          med = &bp;
          break;
        }
      }
      if (!med || med->row < 0) continue;
      const Eigen::VectorXd cand = x + med->t * dirs.col(k);
      const double cand_obj = l1_objective(a, y, cand);
      if (cand_obj < obj - 1e-12 * std::max(1.0, obj)) {
        x = cand;
        obj = cand_obj;
        rows[k] = med->row;
        moved = true;
      }
    }
    if (!moved) return;
  }
}

}  // namespace detail

/// Least-absolute-deviation regression: argmin_x sum_i |y_i - (A x)_i|.
///
/// Iteratively reweighted least squares from the ordinary least-squares start,
/// followed by vertex refinement: the solution is snapped to the exact
/// interpolant of its best-fitting basis rows, then improved by basis
/// exchange until no edge of the vertex lowers the objective.
inline LadResult solve_lad(const Eigen::MatrixXd& a, const Eigen::VectorXd& y,
                           const LadOptions& opt = {}) {
  if (a.rows() != y.size()) throw std::invalid_argument("solve_lad: row count mismatch");
  if (a.rows() < a.cols()) throw std::invalid_argument("solve_lad: fewer samples than unknowns");

  Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(a);
  if (qr.rank() < a.cols()) {
    std::vector<int> cols;
    for (Eigen::Index k = qr.rank(); k < a.cols(); ++k)
      cols.push_back(static_cast<int>(qr.colsPermutation().indices()(k)));
    std::sort(cols.begin(), cols.end());
    std::string msg = "solve_lad: rank-deficient design; unidentifiable columns:";
    for (int c : cols) msg += " " + std::to_string(c);
    throw RankDeficientError(cols, msg);
  }

  LadResult res;
  Eigen::VectorXd x = qr.solve(y);
  double obj = detail::l1_objective(a, y, x);
  int it = 0;
  if (obj > 0.0) {
    for (; it < opt.max_iterations; ++it) {
      const Eigen::VectorXd r = y - a * x;
      const Eigen::VectorXd w = r.cwiseAbs().cwiseMax(opt.epsilon).cwiseInverse();
      const Eigen::MatrixXd atw = a.transpose() * w.asDiagonal();
      const Eigen::VectorXd next = (atw * a).ldlt().solve(atw * y);
      if (!next.allFinite()) break;
      const double next_obj = detail::l1_objective(a, y, next);
      const double gain = obj - next_obj;
      if (next_obj <= obj) {
        x = next;
        obj = next_obj;
      }
      if (gain < opt.tolerance) break;
    }
  }

  // Vertex refinement.
  if (obj > 0.0) {
    std::vector<Eigen::Index> rows;
    Eigen::VectorXd v;
    if (detail::vertex_solution(a, y, y - a * x, rows, v)) {
      double v_obj = detail::l1_objective(a, y, v);
      detail::descend_vertices(a, y, rows, v, v_obj);
      if (v_obj <= obj) {
        x = v;
        obj = v_obj;
      }
    }
  }

  res.x = x;
  res.residuals = y - a * x;
  for (auto& r : res.residuals)
    if (std::abs(r) < opt.zero_residual) r = 0.0;
  res.objective = res.residuals.cwiseAbs().sum();
  res.iterations = it;
  return res;
}

}  // namespace cimsim
