#pragma once

// Independent reference computations used by unit and acceptance tests.

#include "unveil/core.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <random>
#include <vector>

namespace oracle {

/// IoU by counting cells of a 1/res lattice. Exact when every coordinate is a multiple of 1/res.
inline double raster_iou(const unveil::BBox& a, const unveil::BBox& b, int res, double extent) {
  const int n = static_cast<int>(std::lround(extent * res));
  auto covers = [res](const unveil::BBox& box, int i, int j) {
    const double cx = (i + 0.5) / res, cy = (j + 0.5) / res;
    return cx > box.x1 && cx < box.x2 && cy > box.y1 && cy < box.y2;
  };
  long inter = 0, uni = 0;
  for (int j = 0; j < n; ++j) {
    for (int i = 0; i < n; ++i) {
      const bool ia = covers(a, i, j), ib = covers(b, i, j);
      inter += ia && ib;
      uni += ia || ib;
    }
  }
  return uni == 0 ? 0.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

/// Random box with corners on the 1/res lattice inside [0, extent]^2.
inline unveil::BBox lattice_box(std::mt19937_64& rng, int res, int extent) {
  std::uniform_int_distribution<int> u(0, extent * res);
  int x1 = u(rng), x2 = u(rng), y1 = u(rng), y2 = u(rng);
  if (x1 > x2) std::swap(x1, x2);
  if (y1 > y2) std::swap(y1, y2);
  return unveil::BBox(x1 / double(res), y1 / double(res), x2 / double(res), y2 / double(res));
}

/// Attention mass on `cols` after a plain per-row softmax, summed over rows.
inline double softmax_mass(const unveil::Matrix& logits, const std::vector<int>& cols) {
  double total = 0.0;
  for (int r = 0; r < logits.rows(); ++r) {
    double z = 0.0;
    for (int c = 0; c < logits.cols(); ++c) z += std::exp(logits(r, c));
    for (int c : cols) total += std::exp(logits(r, c)) / z;
  }
  return total;
}

/// 3-state, 2-action deterministic MDP.
struct TabularMdp {
  static constexpr int kStates = 3;
  static constexpr int kActions = 2;
  std::array<std::array<int, kActions>, kStates> next{{{1, 2}, {0, 2}, {2, 0}}};
  std::array<std::array<double, kActions>, kStates> reward{{{0.0, 1.0}, {2.0, 0.0}, {0.5, -1.0}}};
};

/// Q* by exact value iteration, iterated until the update is below 1e-14.
inline std::array<std::array<double, 2>, 3> value_iteration(const TabularMdp& m, double gamma) {
  std::array<std::array<double, 2>, 3> q{};
  for (int it = 0; it < 100000; ++it) {
    auto nq = q;
    double diff = 0.0;
    for (int s = 0; s < 3; ++s) {
      for (int a = 0; a < 2; ++a) {
        const int sn = m.next[s][a];
        nq[s][a] = m.reward[s][a] + gamma * std::max(q[sn][0], q[sn][1]);
        diff = std::max(diff, std::abs(nq[s][a] - q[s][a]));
      }
    }
    q = nq;
    if (diff < 1e-14) break;
  }
  return q;
}

}  // namespace oracle
