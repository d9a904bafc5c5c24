// Exact maximum-weight perfect matching on square weight matrices.
//
// kuhn_munkres() is the O(n^3) shortest-augmenting-path Hungarian method with
// row/column potentials. Among all optimal matchings it returns the
// lexicographically smallest permutation (perm[0] smallest, then perm[1], ...),
// which brute_force_matching() reproduces by exhaustive enumeration.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>

namespace msmo::matching {

class MatchingError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// perm[j] is the row assigned to column j.
struct Matching {
  std::vector<std::size_t> perm;
  double total_weight = 0.0;
};

inline constexpr std::size_t kBruteForceMaxN = 9;

namespace detail {

inline void check_weights(const Eigen::MatrixXd& w) {
  if (w.rows() != w.cols()) {
    throw MatchingError("weight matrix must be square, got " + std::to_string(w.rows()) + "x" +
                        std::to_string(w.cols()));
  }
  if (!w.allFinite()) throw MatchingError("weight matrix has non-finite entries");
}

inline double weight_of(const Eigen::MatrixXd& w, const std::vector<std::size_t>& perm) {
  double total = 0.0;
  for (std::size_t j = 0; j < perm.size(); ++j) total += w(static_cast<Eigen::Index>(perm[j]), static_cast<Eigen::Index>(j));
  return total;
}

inline double tie_tolerance(const Eigen::MatrixXd& w) {
  const double scale = w.size() == 0 ? 1.0 : std::max(1.0, w.cwiseAbs().maxCoeff());
  return 1e-9 * scale;
}

// Augmenting-path search restricted to tight edges. Columns below `locked_upto`
// and rows in `row_locked` keep their current partners.
class TightGraph {
 public:
  TightGraph(std::vector<std::vector<std::size_t>> rows_of_col, std::vector<std::size_t> col_of_row,
             std::vector<std::size_t> row_of_col)
      : rows_of_col_(std::move(rows_of_col)),
        col_of_row_(std::move(col_of_row)),
        row_of_col_(std::move(row_of_col)),
        row_locked_(row_of_col_.size(), false) {}

  // Makes col -> row part of the matching if the rest can still be perfectly
  // matched without disturbing locked pairs. Returns false (and leaves the
  // matching unchanged) otherwise.
  bool try_assign(std::size_t col, std::size_t row) {
    if (row_of_col_[col] == row) return true;
    if (row_locked_[row]) return false;
    const std::size_t displaced_col = col_of_row_[row];
    const std::size_t freed_row = row_of_col_[col];
    // Temporarily pin col->row, then look for an alternating path that gives
    // displaced_col some other row, ending at freed_row.
    auto saved_rows = row_of_col_;
    auto saved_cols = col_of_row_;
    row_of_col_[col] = row;
    col_of_row_[row] = col;
    col_of_row_[freed_row] = kNone;
    row_locked_[row] = true;
    std::vector<char> visited(row_of_col_.size(), 0);
    const bool ok = augment(displaced_col, col, visited);
    row_locked_[row] = false;
    if (!ok) {
      row_of_col_ = std::move(saved_rows);
      col_of_row_ = std::move(saved_cols);
    }
    return ok;
  }

  void lock_column(std::size_t col) {
    locked_upto_ = col + 1;
    row_locked_[row_of_col_[col]] = true;
  }

  const std::vector<std::size_t>& row_of_col() const { return row_of_col_; }

 private:
  static constexpr std::size_t kNone = std::numeric_limits<std::size_t>::max();

  bool augment(std::size_t col, std::size_t pinned_col, std::vector<char>& visited) {
    for (std::size_t r : rows_of_col_[col]) {
      if (visited[r] || row_locked_[r]) continue;
      visited[r] = 1;
      const std::size_t owner = col_of_row_[r];
      if (owner == kNone || (owner != pinned_col && owner >= locked_upto_ && augment(owner, pinned_col, visited))) {
        row_of_col_[col] = r;
        col_of_row_[r] = col;
        return true;
      }
    }
    return false;
  }

  std::vector<std::vector<std::size_t>> rows_of_col_;
  std::vector<std::size_t> col_of_row_;
  std::vector<std::size_t> row_of_col_;
  std::vector<char> row_locked_;
  std::size_t locked_upto_ = 0;
};

}  // namespace detail

/// Maximum-weight perfect matching. Negative weights are allowed; the matrix is
/// shifted to a non-negative cost internally.
inline Matching kuhn_munkres(const Eigen::MatrixXd& weights) {
  detail::check_weights(weights);
  const std::size_t n = static_cast<std::size_t>(weights.rows());
  Matching result;
  if (n == 0) return result;

  // Minimise cost = max_w - w, 1-based potentials, row p[j] matched to column j.
  const double max_w = weights.maxCoeff();
  auto cost = [&](std::size_t i, std::size_t j) {
    return max_w - weights(static_cast<Eigen::Index>(i - 1), static_cast<Eigen::Index>(j - 1));
  };
  const double inf = std::numeric_limits<double>::infinity();
  std::vector<double> u(n + 1, 0.0), v(n + 1, 0.0), minv(n + 1);
  std::vector<std::size_t> p(n + 1, 0), way(n + 1, 0);
  std::vector<char> used(n + 1);
  for (std::size_t i = 1; i <= n; ++i) {
    p[0] = i;
    std::size_t j0 = 0;
    std::fill(minv.begin(), minv.end(), inf);
    std::fill(used.begin(), used.end(), 0);
    do {
      used[j0] = 1;
      const std::size_t i0 = p[j0];
      double delta = inf;
      std::size_t j1 = 0;
      for (std::size_t j = 1; j <= n; ++j) {
        if (used[j]) continue;
        const double cur = cost(i0, j) - u[i0] - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = j0;
        }
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = j;
        }
      }
      for (std::size_t j = 0; j <= n; ++j) {
        if (used[j]) {
          u[p[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (p[j0] != 0);
    do {
      const std::size_t j1 = way[j0];
      p[j0] = p[j1];
      j0 = j1;
    } while (j0 != 0);
  }

  // Every optimal matching lives on the tight edges of the dual solution.
  // Walk columns in order and pin the smallest row that still completes.
  const double tol = detail::tie_tolerance(weights);
  std::vector<std::vector<std::size_t>> rows_of_col(n);
  for (std::size_t j = 1; j <= n; ++j) {
    for (std::size_t i = 1; i <= n; ++i) {
      if (cost(i, j) - u[i] - v[j] <= tol) rows_of_col[j - 1].push_back(i - 1);
    }
  }
  std::vector<std::size_t> row_of_col(n), col_of_row(n);
  for (std::size_t j = 1; j <= n; ++j) {
    row_of_col[j - 1] = p[j] - 1;
    col_of_row[p[j] - 1] = j - 1;
  }
  detail::TightGraph graph(rows_of_col, std::move(col_of_row), std::move(row_of_col));
  for (std::size_t j = 0; j < n; ++j) {
    for (std::size_t r : rows_of_col[j]) {
      if (graph.try_assign(j, r)) break;
    }
    graph.lock_column(j);
  }
  result.perm = graph.row_of_col();
  result.total_weight = detail::weight_of(weights, result.perm);
  return result;
}

/// Exhaustive search over all n! permutations (n <= 9). Test oracle.
inline Matching brute_force_matching(const Eigen::MatrixXd& weights) {
  detail::check_weights(weights);
  const std::size_t n = static_cast<std::size_t>(weights.rows());
  if (n > kBruteForceMaxN) {
    throw MatchingError("brute_force_matching supports n <= " + std::to_string(kBruteForceMaxN) + ", got " +
                        std::to_string(n));
  }
  Matching best;
  if (n == 0) return best;
  std::vector<std::size_t> perm(n);
  std::iota(perm.begin(), perm.end(), 0);
  double best_w = -std::numeric_limits<double>::infinity();
  std::vector<std::pair<double, std::vector<std::size_t>>> all;
  do {
    const double w = detail::weight_of(weights, perm);
    all.emplace_back(w, perm);
    best_w = std::max(best_w, w);
  } while (std::next_permutation(perm.begin(), perm.end()));
  // next_permutation enumerates in lexicographic order.
  const double tol = detail::tie_tolerance(weights);
  for (const auto& [w, candidate] : all) {
    if (w >= best_w - tol) {
      best.perm = candidate;
      best.total_weight = w;
      break;
    }
  }
  return best;
}

}  // namespace msmo::matching
