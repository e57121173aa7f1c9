// Independent reference implementations used to cross-check the library.
// Everything here recomputes expected values from first principles and must
// stay decoupled from the code paths under test.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

namespace oracles {

// Brute-force adjacent-pair counting over word unit sequences (weighted by
// word frequency), with the lexicographically-smallest tie break. Returns
// the winning pair, or nullopt when no pair exists.
inline std::optional<std::pair<std::string, std::string>> best_pair(
    const std::vector<std::pair<std::vector<std::string>, std::int64_t>>& words) {
  std::map<std::pair<std::string, std::string>, std::int64_t> counts;
  for (const auto& [units, freq] : words) {
    for (std::size_t i = 0; i + 1 < units.size(); ++i) {
      counts[{units[i], units[i + 1]}] += freq;
    }
  }
  std::optional<std::pair<std::string, std::string>> best;
  std::int64_t best_count = 0;
  for (const auto& [pair, count] : counts) {
    if (count > best_count) {
      best = pair;
      best_count = count;
    }
  }
  return best;
}

// Sort-based reciprocal rank with pessimistic ties: sorts scores descending
// and walks tie blocks explicitly, assigning the matching model the last
// position of its block.
inline double reciprocal_rank(const std::vector<double>& column, int k) {
  std::vector<int> order(column.size());
  for (std::size_t i = 0; i < column.size(); ++i) order[i] = static_cast<int>(i);
  std::stable_sort(order.begin(), order.end(),
                   [&](int a, int b) { return column[a] > column[b]; });
  std::size_t pos = 0;
  while (pos < order.size()) {
    std::size_t end = pos;
    while (end + 1 < order.size() &&
           column[order[end + 1]] == column[order[pos]]) {
      ++end;
    }
    for (std::size_t i = pos; i <= end; ++i) {
      if (order[i] == k) return 1.0 / static_cast<double>(end + 1);
    }
    pos = end + 1;
  }
  return 0.0;  // unreachable for valid k
}

inline double mean_reciprocal_rank(const Eigen::MatrixXd& scores) {
  double sum = 0.0;
  const int n = static_cast<int>(scores.rows());
  for (int k = 0; k < n; ++k) {
    std::vector<double> column(static_cast<std::size_t>(n));
    for (int j = 0; j < n; ++j) column[static_cast<std::size_t>(j)] = scores(j, k);
    sum += reciprocal_rank(column, k);
  }
  return sum / n;
}

// Early-stopping simulator: feeds the loss sequence and returns the 1-based
// epoch after which training stops (or the sequence length if it never
// does).
inline int stopping_epoch(const std::vector<double>& losses, int patience,
                          double min_delta) {
  double best = std::numeric_limits<double>::infinity();
  int bad = 0;
  for (std::size_t e = 0; e < losses.size(); ++e) {
    if (losses[e] < best - min_delta) {
      best = losses[e];
      bad = 0;
    } else {
      ++bad;
    }
    if (bad >= patience) return static_cast<int>(e) + 1;
  }
  return static_cast<int>(losses.size());
}

// Paired one-tailed t statistic computed longhand.
inline double t_statistic(const std::vector<double>& diffs) {
  const double n = static_cast<double>(diffs.size());
  double mean = 0.0;
  for (const double d : diffs) mean += d;
  mean /= n;
  double sq = 0.0;
  for (const double d : diffs) sq += (d - mean) * (d - mean);
  const double sd = std::sqrt(sq / (n - 1.0));
  return mean / (sd / std::sqrt(n));
}

}  // namespace oracles
