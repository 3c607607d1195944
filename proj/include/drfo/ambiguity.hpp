#pragma once

// Empirical distributions over a partition's records, total-variation balls
// around them, and Euclidean projection onto those balls.

#include <cstddef>
#include <span>
#include <vector>

#include "drfo/dataset.hpp"

namespace drfo {

// Probability weights indexed by the records of one partition, in the
// partition's ascending record order.
class EmpiricalDistribution {
 public:
  EmpiricalDistribution() = default;
  // Weights must be finite, non-negative and have a positive sum; they are
  // divided by their sum unless it is exactly 1.
  EmpiricalDistribution(Partition tag, std::vector<double> weights);

  Partition tag() const { return tag_; }
  std::span<const double> weights() const { return weights_; }
  std::size_t size() const { return weights_.size(); }
  double operator[](std::size_t j) const { return weights_[j]; }

  friend bool operator==(const EmpiricalDistribution&, const EmpiricalDistribution&) = default;

 private:
  Partition tag_ = Partition::Missing;
  std::vector<double> weights_;
};

// {Q : TV(Q, center) <= radius}.
struct AmbiguitySet {
  EmpiricalDistribution center;
  double radius = 0.0;

  AmbiguitySet() = default;
  AmbiguitySet(EmpiricalDistribution c, double r);
};

// Uniform weight over the partition's records whose attribute is s, zero on
// the others. Throws DegenerateDataError when no record has attribute s.
EmpiricalDistribution init_center(const ReconstructedDataset& ds, Partition partition, int s);

// ½‖p − q‖₁. Throws UsageError for mismatched index spaces.
double tv_distance(const EmpiricalDistribution& p, const EmpiricalDistribution& q);
double tv_distance(std::span<const double> p, std::span<const double> q);

// Euclidean projection onto the probability simplex (sort-based).
std::vector<double> project_simplex(std::span<const double> v);
// Euclidean projection onto {x : ‖x − center‖₁ <= radius} (sort-based soft threshold).
std::vector<double> project_l1_ball(std::span<const double> v, std::span<const double> center, double radius);

enum class ProjectionMethod {
  // Exact: bisection on the two KKT multipliers with per-center-value
  // prefix sums; one sort per call.
  DualBisection,
  // Dykstra alternating projections between the simplex and the L1 ball.
  Dykstra,
};

struct ProjectionOptions {
  ProjectionMethod method = ProjectionMethod::DualBisection;
  std::size_t max_iterations = 500;  // Dykstra only
  double tolerance = 1e-10;          // Dykstra only
};

// argmin ‖w − q‖₂ over {w ≥ 0, Σw = 1, ½‖w − center‖₁ <= radius}.
// radius 0 returns the center; radius >= 1 is a plain simplex projection.
// Throws NumericalError if Dykstra does not converge or q is not finite.
EmpiricalDistribution project(std::span<const double> q, const AmbiguitySet& set,
                              const ProjectionOptions& options = {});

}  // namespace drfo
