#pragma once

// Independent reference computations for the property tests and the
// acceptance run. None of them calls the code under test.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <numeric>
#include <optional>
#include <random>
#include <vector>

namespace drfo::oracle {

// ---- projection onto {w >= 0, sum w = 1, sum |w - c| <= 2 rho} ----
//
// The set is a polytope: w_j >= 0 and sigma . (w - c) <= 2 rho for every
// sign vector sigma. The Euclidean projection is the projection onto the
// affine hull of the face that contains it, so enumerating every set of
// at most n-1 active inequalities (plus the equality), projecting onto
// each affine subspace and keeping the nearest feasible point is exact.

struct Halfspace {
  std::vector<double> a;  // a . w <= b
  double b;
};

inline bool solve_linear(std::vector<std::vector<double>> m, std::vector<double> rhs, std::vector<double>& x) {
  const std::size_t n = rhs.size();
  for (std::size_t col = 0; col < n; ++col) {
    std::size_t piv = col;
    for (std::size_t r = col + 1; r < n; ++r) {
      if (std::abs(m[r][col]) > std::abs(m[piv][col])) piv = r;
    }
    if (std::abs(m[piv][col]) < 1e-12) return false;
    std::swap(m[piv], m[col]);
    std::swap(rhs[piv], rhs[col]);
    for (std::size_t r = 0; r < n; ++r) {
      if (r == col) continue;
      const double f = m[r][col] / m[col][col];
      for (std::size_t k = col; k < n; ++k) m[r][k] -= f * m[col][k];
      rhs[r] -= f * rhs[col];
    }
  }
  x.resize(n);
  for (std::size_t i = 0; i < n; ++i) x[i] = rhs[i] / m[i][i];
  return true;
}

// argmin |w - q| subject to rows[i] . w = b[i].
inline std::optional<std::vector<double>> project_affine(const std::vector<double>& q,
                                                         const std::vector<std::vector<double>>& rows,
                                                         const std::vector<double>& b) {
  const std::size_t k = rows.size(), n = q.size();
  std::vector<std::vector<double>> gram(k, std::vector<double>(k, 0.0));
  std::vector<double> resid(k, 0.0);
  for (std::size_t i = 0; i < k; ++i) {
    for (std::size_t j = 0; j < k; ++j) {
      for (std::size_t t = 0; t < n; ++t) gram[i][j] += rows[i][t] * rows[j][t];
    }
    for (std::size_t t = 0; t < n; ++t) resid[i] += rows[i][t] * q[t];
    resid[i] -= b[i];
  }
  std::vector<double> y;
  if (!solve_linear(gram, resid, y)) return std::nullopt;
  std::vector<double> w = q;
  for (std::size_t i = 0; i < k; ++i) {
    for (std::size_t t = 0; t < n; ++t) w[t] -= y[i] * rows[i][t];
  }
  return w;
}

inline double sq_dist(const std::vector<double>& a, const std::vector<double>& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
  return s;
}

inline double l1_dist(const std::vector<double>& a, const std::vector<double>& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += std::abs(a[i] - b[i]);
  return s;
}

inline std::vector<double> project_tv_ball(const std::vector<double>& q, const std::vector<double>& c, double rho) {
  const std::size_t n = q.size();
  std::vector<Halfspace> hs;
  for (std::size_t j = 0; j < n; ++j) {
    std::vector<double> a(n, 0.0);
    a[j] = -1.0;
    hs.push_back({a, 0.0});
  }
  for (std::size_t mask = 0; mask < (std::size_t{1} << n); ++mask) {
    std::vector<double> a(n);
    double b = 2.0 * rho;
    for (std::size_t j = 0; j < n; ++j) {
      a[j] = (mask >> j) & 1 ? 1.0 : -1.0;
      b += a[j] * c[j];
    }
    hs.push_back({a, b});
  }
  auto feasible = [&](const std::vector<double>& w) {
    double sum = 0.0;
    for (double x : w) {
      if (x < -1e-12) return false;
      sum += x;
    }
    return std::abs(sum - 1.0) < 1e-12 && l1_dist(w, c) <= 2.0 * rho + 1e-12;
  };

  std::vector<double> best;
  double best_d = std::numeric_limits<double>::infinity();
  const std::size_t m = hs.size();
  // Active sets of size 0 .. n-1, enumerated as increasing index tuples.
  std::vector<std::size_t> pick;
  auto consider = [&] {
    std::vector<std::vector<double>> rows = {std::vector<double>(n, 1.0)};
    std::vector<double> b = {1.0};
    for (std::size_t i : pick) {
      rows.push_back(hs[i].a);
      b.push_back(hs[i].b);
    }
    const auto w = project_affine(q, rows, b);
    if (!w || !feasible(*w)) return;
    const double d = sq_dist(*w, q);
    if (d < best_d) {
      best_d = d;
      best = *w;
    }
  };
  auto rec = [&](auto&& self, std::size_t start, std::size_t depth) -> void {
    consider();
    if (depth == n - 1) return;
    for (std::size_t i = start; i < m; ++i) {
      pick.push_back(i);
      self(self, i + 1, depth + 1);
      pick.pop_back();
    }
  };
  rec(rec, 0, 0);
  for (double& x : best) x = std::max(x, 0.0);
  return best;
}

// ---- worst case of a linear functional over a TV ball on the simplex ----

// max (or min) of sum_j w_j r_j over {w in simplex, TV(w, c) <= rho}: move up
// to rho of mass from the records with the lowest (highest) values onto one
// record with the highest (lowest) value.
inline double extreme_expectation(const std::vector<double>& r, const std::vector<double>& c, double rho, bool maximize) {
  const std::size_t n = r.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return maximize ? r[a] < r[b] : r[a] > r[b];
  });
  const std::size_t target = order.back();
  double value = 0.0;
  for (std::size_t j = 0; j < n; ++j) value += c[j] * r[j];
  double budget = std::min(rho, 1.0 - c[target]);
  for (std::size_t k = 0; k + 1 < n && budget > 0.0; ++k) {
    const std::size_t j = order[k];
    const double take = std::min(c[j], budget);
    value += take * (r[target] - r[j]);
    budget -= take;
  }
  return value;
}

// ---- matched-prior reconstruction populations ----

struct Population {
  std::vector<std::pair<std::uint32_t, std::uint32_t>> pairs;  // (user, item) per record
  std::vector<int> s, s_hat;
};

// Every user has the same number of distinct items, and a user's records
// share S and S-hat. With `max_prior_shift` 0 the same number of users is
// flipped in each direction, so P(S-hat = s) = P(S = s) exactly; otherwise
// up to that share of users is additionally flipped one way.
inline Population make_population(std::mt19937_64& rng, double max_prior_shift = 0.0) {
  std::uniform_int_distribution<int> n_users_d(20, 80), per_user_d(1, 6);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  const int n_users = n_users_d(rng), per_user = per_user_d(rng), n_items = 40;
  const double p1 = 0.3 + 0.4 * unit(rng);
  std::vector<int> s_user(n_users);
  std::array<std::vector<int>, 2> members;
  for (int u = 0; u < n_users; ++u) {
    s_user[u] = unit(rng) < p1 ? 1 : 0;
    members[s_user[u]].push_back(u);
  }
  if (members[0].size() < 4 || members[1].size() < 4) return make_population(rng, max_prior_shift);
  for (int g = 0; g < 2; ++g) std::shuffle(members[g].begin(), members[g].end(), rng);
  std::vector<int> s_hat_user = s_user;
  const int max_flip = static_cast<int>(std::min(members[0].size(), members[1].size())) / 2;
  const int k = std::uniform_int_distribution<int>(0, max_flip)(rng);
  for (int j = 0; j < k; ++j) {
    s_hat_user[members[0][j]] = 1;
    s_hat_user[members[1][j]] = 0;
  }
  const int max_extra = static_cast<int>(std::floor(max_prior_shift * n_users));
  if (max_extra > 0) {
    const int g = unit(rng) < 0.5 ? 0 : 1;
    const int room = static_cast<int>(members[g].size()) - k - 1;
    const int extra = std::uniform_int_distribution<int>(1, std::max(1, std::min(max_extra, room)))(rng);
    for (int j = k; j < std::min(k + extra, static_cast<int>(members[g].size()) - 1); ++j) {
      s_hat_user[members[g][j]] = 1 - g;
    }
  }
  Population pop;
  std::vector<std::uint32_t> items(n_items);
  std::iota(items.begin(), items.end(), 0u);
  for (int u = 0; u < n_users; ++u) {
    std::shuffle(items.begin(), items.end(), rng);
    for (int r = 0; r < per_user; ++r) {
      pop.pairs.push_back({static_cast<std::uint32_t>(u), items[r]});
      pop.s.push_back(s_user[u]);
      pop.s_hat.push_back(s_hat_user[u]);
    }
  }
  return pop;
}

// TV between the empirical (user, item) distributions of {S = s} and {S-hat = s}.
inline double conditional_tv(const Population& pop, int s) {
  std::map<std::pair<std::uint32_t, std::uint32_t>, std::array<double, 2>> mass;
  double n_s = 0, n_hat = 0;
  for (std::size_t i = 0; i < pop.pairs.size(); ++i) {
    n_s += pop.s[i] == s;
    n_hat += pop.s_hat[i] == s;
  }
  for (std::size_t i = 0; i < pop.pairs.size(); ++i) {
    auto& m = mass[pop.pairs[i]];
    if (pop.s[i] == s) m[0] += 1.0 / n_s;
    if (pop.s_hat[i] == s) m[1] += 1.0 / n_hat;
  }
  double l1 = 0.0;
  for (const auto& [key, m] : mass) l1 += std::abs(m[0] - m[1]);
  return 0.5 * l1;
}

struct ErrorStats {
  double error_rate;  // P(S-hat != s | S = s)
  double prior_s, prior_hat, joint;
};

inline ErrorStats error_stats(const Population& pop, int s) {
  double n = static_cast<double>(pop.s.size()), a = 0, b = 0, both = 0;
  for (std::size_t i = 0; i < pop.s.size(); ++i) {
    a += pop.s[i] == s;
    b += pop.s_hat[i] == s;
    both += pop.s[i] == s && pop.s_hat[i] == s;
  }
  return {(a - both) / a, a / n, b / n, both / n};
}

}  // namespace drfo::oracle
