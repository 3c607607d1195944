#include "drfo/ambiguity.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <numeric>
#include <string>

#include "drfo/errors.hpp"

namespace drfo {

EmpiricalDistribution::EmpiricalDistribution(Partition tag, std::vector<double> weights)
    : tag_(tag), weights_(std::move(weights)) {
  double sum = 0.0;
  for (double w : weights_) {
    if (!std::isfinite(w) || w < 0.0) throw UsageError("distribution weights must be finite and non-negative");
    sum += w;
  }
  if (!(sum > 0.0)) throw UsageError("distribution weights must have a positive sum");
  if (sum != 1.0) {
    for (double& w : weights_) w /= sum;
  }
}

AmbiguitySet::AmbiguitySet(EmpiricalDistribution c, double r) : center(std::move(c)), radius(r) {
  if (!(radius >= 0.0 && radius <= 1.0)) throw UsageError("ambiguity radius must lie in [0,1]");
}

EmpiricalDistribution init_center(const ReconstructedDataset& ds, Partition partition, int s) {
  if (s != 0 && s != 1) throw UsageError("sensitive attribute must be 0 or 1");
  const auto index = ds.base().index(partition);
  std::size_t count = 0;
  for (RecordIndex i : index) count += ds.attr(i) == s;
  if (count == 0) {
    throw DegenerateDataError("partition '" + std::string(partition_tag(partition)) +
                              "' has no record with reconstructed attribute " + std::to_string(s));
  }
  const double w = 1.0 / static_cast<double>(count);
  std::vector<double> weights(index.size(), 0.0);
  for (std::size_t j = 0; j < index.size(); ++j) {
    if (ds.attr(index[j]) == s) weights[j] = w;
  }
  return EmpiricalDistribution(partition, std::move(weights));
}

double tv_distance(std::span<const double> p, std::span<const double> q) {
  if (p.size() != q.size()) throw UsageError("TV distance between distributions over different index spaces");
  double l1 = 0.0;
  for (std::size_t j = 0; j < p.size(); ++j) l1 += std::abs(p[j] - q[j]);
  return 0.5 * l1;
}

double tv_distance(const EmpiricalDistribution& p, const EmpiricalDistribution& q) {
  if (p.tag() != q.tag()) throw UsageError("TV distance between distributions over different partitions");
  return tv_distance(p.weights(), q.weights());
}

std::vector<double> project_simplex(std::span<const double> v) {
  if (v.empty()) throw UsageError("cannot project an empty vector onto the simplex");
  std::vector<double> sorted(v.begin(), v.end());
  std::sort(sorted.begin(), sorted.end(), std::greater<>());
  double running = 0.0, theta = 0.0;
  for (std::size_t j = 0; j < sorted.size(); ++j) {
    running += sorted[j];
    const double candidate = (running - 1.0) / static_cast<double>(j + 1);
    if (sorted[j] - candidate > 0.0) theta = candidate;
  }
  std::vector<double> out(v.size());
  for (std::size_t j = 0; j < v.size(); ++j) out[j] = std::max(v[j] - theta, 0.0);
  return out;
}

std::vector<double> project_l1_ball(std::span<const double> v, std::span<const double> center, double radius) {
  if (v.size() != center.size()) throw UsageError("L1-ball projection: dimension mismatch");
  std::vector<double> diff(v.size());
  double l1 = 0.0;
  for (std::size_t j = 0; j < v.size(); ++j) {
    diff[j] = v[j] - center[j];
    l1 += std::abs(diff[j]);
  }
  if (l1 <= radius) return {v.begin(), v.end()};
  std::vector<double> mags(diff.size());
  for (std::size_t j = 0; j < diff.size(); ++j) mags[j] = std::abs(diff[j]);
  std::sort(mags.begin(), mags.end(), std::greater<>());
  double running = 0.0, theta = 0.0;
  for (std::size_t j = 0; j < mags.size(); ++j) {
    running += mags[j];
    const double candidate = (running - radius) / static_cast<double>(j + 1);
    if (mags[j] - candidate > 0.0) theta = candidate;
  }
  std::vector<double> out(v.size());
  for (std::size_t j = 0; j < v.size(); ++j) {
    const double shrunk = std::max(std::abs(diff[j]) - theta, 0.0);
    out[j] = center[j] + std::copysign(shrunk, diff[j]);
  }
  return out;
}

namespace {

// Coordinates sharing one center value, with their q values sorted
// ascending and prefix sums for O(log n) zone sums.
struct CenterGroup {
  double c = 0.0;
  std::vector<double> a;
  std::vector<double> prefix;  // prefix[k] = a[0] + ... + a[k-1]

  std::size_t below(double x) const { return std::lower_bound(a.begin(), a.end(), x) - a.begin(); }
  std::size_t at_most(double x) const { return std::upper_bound(a.begin(), a.end(), x) - a.begin(); }
  double sum(std::size_t lo, std::size_t hi) const { return prefix[hi] - prefix[lo]; }
};

// Per-coordinate solution of min ½(w−q)² + μ|w−c| + νw over w ≥ 0:
//   q−ν > c+μ        -> q−ν−μ
//   |q−ν−c| <= μ      -> c
//   q−ν < c−μ         -> max(0, q−ν+μ)
double coordinate(double q, double c, double mu, double nu) {
  const double z = q - nu;
  if (z > c + mu) return z - mu;
  if (z >= c - mu) return c;
  return std::max(0.0, z + mu);
}

struct ZoneSums {
  double total = 0.0;  // Σ w
  double l1 = 0.0;     // Σ |w − c|
};

ZoneSums zone_sums(const std::vector<CenterGroup>& groups, double mu, double nu) {
  ZoneSums out;
  for (const auto& g : groups) {
    const std::size_t m = g.a.size();
    const std::size_t upper_start = g.at_most(nu + g.c + mu);          // a > ν+c+μ
    const std::size_t middle_start = g.below(nu + g.c - mu);           // a >= ν+c−μ
    const std::size_t positive_start = std::min(g.at_most(nu - mu), middle_start);  // a > ν−μ
    const double n_upper = static_cast<double>(m - upper_start);
    const double n_middle = static_cast<double>(upper_start - middle_start);
    const double n_pos = static_cast<double>(middle_start - positive_start);
    const double n_zero = static_cast<double>(positive_start);
    const double s_upper = g.sum(upper_start, m) - n_upper * (nu + mu);
    const double s_pos = g.sum(positive_start, middle_start) - n_pos * (nu - mu);
    out.total += s_upper + n_middle * g.c + s_pos;
    out.l1 += (s_upper - n_upper * g.c) + (n_pos * g.c - s_pos) + n_zero * g.c;
  }
  return out;
}

// ν with Σw(μ, ν) = 1 by bisection to adjacent doubles; Σw is continuous and
// non-increasing in ν.
double solve_nu(const std::vector<CenterGroup>& groups, double mu, double lo, double hi) {
  for (int it = 0; it < 2000; ++it) {
    const double mid = 0.5 * (lo + hi);
    if (mid <= lo || mid >= hi) break;
    (zone_sums(groups, mu, mid).total > 1.0 ? lo : hi) = mid;
  }
  return 0.5 * (lo + hi);
}

std::vector<double> project_dual(std::span<const double> q, std::span<const double> center, double radius) {
  std::vector<std::pair<double, double>> pairs(q.size());  // (center, q)
  for (std::size_t j = 0; j < q.size(); ++j) pairs[j] = {center[j], q[j]};
  std::sort(pairs.begin(), pairs.end());
  std::vector<CenterGroup> groups;
  double q_min = std::numeric_limits<double>::infinity(), q_max = -q_min, c_max = 0.0;
  for (std::size_t j = 0; j < pairs.size();) {
    CenterGroup g;
    g.c = pairs[j].first;
    for (; j < pairs.size() && pairs[j].first == g.c; ++j) g.a.push_back(pairs[j].second);
    g.prefix.assign(g.a.size() + 1, 0.0);
    for (std::size_t k = 0; k < g.a.size(); ++k) g.prefix[k + 1] = g.prefix[k] + g.a[k];
    q_min = std::min(q_min, g.a.front());
    q_max = std::max(q_max, g.a.back());
    c_max = std::max(c_max, g.c);
    groups.push_back(std::move(g));
  }
  const double budget = 2.0 * radius;
  auto nu_for = [&](double mu) { return solve_nu(groups, mu, q_min - c_max - mu - 1.0, q_max + mu + 1.0); };

  double mu_hi = 0.0;
  double nu = nu_for(0.0);
  if (zone_sums(groups, 0.0, nu).l1 > budget) {
    // Smallest μ whose solution meets the TV budget; keep the feasible end.
    double mu_lo = 0.0;
    mu_hi = 1.0;
    for (std::size_t j = 0; j < q.size(); ++j) mu_hi = std::max(mu_hi, std::abs(q[j] - center[j]) + 1.0);
    for (int it = 0; it < 200; ++it) {
      const double mid = 0.5 * (mu_lo + mu_hi);
      if (mid <= mu_lo || mid >= mu_hi) break;
      (zone_sums(groups, mid, nu_for(mid)).l1 > budget ? mu_lo : mu_hi) = mid;
    }
    nu = nu_for(mu_hi);
  }
  std::vector<double> w(q.size());
  for (std::size_t j = 0; j < q.size(); ++j) w[j] = coordinate(q[j], center[j], mu_hi, nu);
  return w;
}

std::vector<double> project_dykstra(std::span<const double> q, std::span<const double> center, double radius,
                                    const ProjectionOptions& options) {
  const std::size_t n = q.size();
  std::vector<double> x(q.begin(), q.end()), p(n, 0.0), r(n, 0.0), y(n), buf(n);
  for (std::size_t it = 0; it < options.max_iterations; ++it) {
    for (std::size_t j = 0; j < n; ++j) buf[j] = x[j] + p[j];
    y = project_simplex(buf);
    for (std::size_t j = 0; j < n; ++j) p[j] = buf[j] - y[j];
    for (std::size_t j = 0; j < n; ++j) buf[j] = y[j] + r[j];
    auto x_next = project_l1_ball(buf, center, 2.0 * radius);
    double moved = 0.0, gap = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      r[j] = buf[j] - x_next[j];
      moved = std::max(moved, std::abs(x_next[j] - x[j]));
      gap = std::max(gap, std::abs(x_next[j] - y[j]));
    }
    x = std::move(x_next);
    if (moved < options.tolerance && gap < options.tolerance) return y;
  }
  throw NumericalError("Dykstra projection did not converge within " + std::to_string(options.max_iterations) +
                       " iterations (dimension " + std::to_string(n) + ", radius " + std::to_string(radius) + ")");
}

}  // namespace

EmpiricalDistribution project(std::span<const double> q, const AmbiguitySet& set, const ProjectionOptions& options) {
  const auto center = set.center.weights();
  if (q.size() != center.size()) throw UsageError("projection input and ambiguity center differ in dimension");
  for (double x : q) {
    if (!std::isfinite(x)) throw NumericalError("projection input has a non-finite entry");
  }
  if (set.radius <= 0.0) return set.center;
  if (set.radius >= 1.0) return EmpiricalDistribution(set.center.tag(), project_simplex(q));

  std::vector<double> w = options.method == ProjectionMethod::Dykstra
                              ? project_dykstra(q, center, set.radius, options)
                              : project_dual(q, center, set.radius);
  return EmpiricalDistribution(set.center.tag(), std::move(w));
}

}  // namespace drfo
