#include <cmath>
#include <limits>
#include <vector>

#include <gtest/gtest.h>

#include "fblcrd/crd_solver.hpp"
#include "fblcrd/tilted_info.hpp"
#include "test_support.hpp"

using namespace fblcrd;
using fblcrd::testing::binary_instance;
using fblcrd::testing::hamming;
using fblcrd::testing::interior_distortion;
using fblcrd::testing::random_instance;

namespace {

// Uniform ternary source, Hamming distortion. By cyclic symmetry and convexity
// an optimal channel can be taken circulant with rows (1 - D, w, D - w), whose
// output is uniform; the mutual information is ln 3 - H(1 - D, w, D - w).
double ternary_grid_oracle(double dist, double step) {
  double best = std::numeric_limits<double>::infinity();
  for (double w = 0.0; w <= dist + 1e-15; w += step) {
    const double probs[] = {1.0 - dist, w, std::max(dist - w, 0.0)};
    best = std::min(best, std::log(3.0) - entropy(probs));
  }
  return best;
}

// Analytic per-state curve of a Bernoulli(c) source under Hamming distortion.
struct BinaryCurve {
  double c;
  double floor() const { return 0.0; }
  double zero_rate() const { return c; }
  double distortion_at_slope(double lambda) const {
    return std::min(1.0 / (1.0 + std::exp(lambda)), c);
  }
  double rate(double d) const { return d >= c ? 0.0 : binary_entropy(c) - binary_entropy(d); }
};

Instance two_state_instance(double p1, double c0, double c1) {
  JointSource src;
  src.pmf.resize(2, 2);
  src.pmf << (1 - c0) * (1 - p1), (1 - c1) * p1, c0 * (1 - p1), c1 * p1;
  return validate(src, DistortionSpec{hamming(2, 2)});
}

}  // namespace

TEST(SolveRd, BernoulliClosedForm) {
  Vector px(2);
  px << 0.8, 0.2;
  const DistortionSpec d{hamming(2, 2)};
  for (double dist : {0.01, 0.05, 0.1, 0.15, 0.19}) {
    const auto r = solve_rd_per_state(px, d, dist);
    EXPECT_NEAR(r.rate, binary_entropy(0.2) - binary_entropy(dist), 1e-9) << dist;
    EXPECT_NEAR(r.slope, std::log((1 - dist) / dist), 1e-6) << dist;
    EXPECT_LE(r.distortion_achieved, dist + 1e-9);
  }
  EXPECT_EQ(solve_rd_per_state(px, d, 0.2).rate, 0.0);
  EXPECT_EQ(solve_rd_per_state(px, d, 0.7).rate, 0.0);
}

// Just below the zero-rate point the optimal slope sits next to the one where
// the second output dies, and plain alternating sweeps crawl.
TEST(SolveRd, NearZeroRatePoint) {
  Vector px(2);
  px << 0.7, 0.3;
  const DistortionSpec d{hamming(2, 2)};
  for (double gap : {1e-3, 1e-5, 1e-7}) {
    const double dist = 0.3 - gap;
    const auto r = solve_rd_per_state(px, d, dist);
    EXPECT_NEAR(r.rate, binary_entropy(0.3) - binary_entropy(dist), 1e-10) << gap;
    EXPECT_NEAR(r.distortion_achieved, dist, 1e-9) << gap;
  }
}

// A two-state-pair chain marginal whose decomposed route lands one state just
// inside its zero-rate point.
TEST(SolveCrd, RoutesAgreeNearStateZeroRate) {
  JointSource src;
  src.pmf.resize(2, 3);
  src.pmf << 0.097309599971171015, 0.33388913636930806, 0.19352201249301246,
      0.14729572294632515, 0.071922874210049254, 0.15606065401013405;
  Matrix dm(2, 2);
  dm << 0.0, 0.90408232269853905, 0.49818187603939557, 0.0;
  const Instance inst = validate(src, DistortionSpec{dm});
  const double dist = 0.074782928553916286;
  SolverOptions opts;
  opts.cross_check = false;
  const auto a = solve_crd_direct(inst, dist, opts);
  const auto b = solve_crd_decomposed(inst, dist, opts);
  EXPECT_NEAR(a.rate, b.rate, 10 * opts.tol);
  EXPECT_NEAR(a.distortion_achieved, dist, 1e-9);
}

// Two states have a nearly straight piece at almost the same slope; the target
// lands inside one of them.
TEST(SolveCrd, StraightPieceSharedByTwoStates) {
  JointSource src;
  src.pmf.resize(2, 3);
  src.pmf << 0.093840942867218932, 0.27453108392646852, 0.22645266881379267,
      0.053676982450429192, 0.00048480614186337246, 0.35101351580022744;
  Matrix dm(2, 4);
  dm << 0.0, 0.53568172653866841, 0.31221383923669283, 0.16142310835815149,
      0.76469142460392747, 0.0, 0.62646738878779384, 0.27331067318795321;
  const Instance inst = validate(src, DistortionSpec{dm});
  const double dist = 0.11710366426692038;
  SolverOptions opts;
  opts.cross_check = false;
  const auto a = solve_crd_direct(inst, dist, opts);
  const auto b = solve_crd_decomposed(inst, dist, opts);
  EXPECT_NEAR(a.rate, b.rate, 10 * opts.tol);
  EXPECT_NEAR(a.distortion_achieved, dist, 1e-9);
  EXPECT_NEAR(b.distortion_achieved, dist, 1e-9);
  // Convexity against neighbours on either side.
  const double h = 2e-3;
  const double lo = solve_crd_direct(inst, dist - h, opts).rate;
  const double hi = solve_crd_direct(inst, dist + h, opts).rate;
  EXPECT_LE(a.rate, 0.5 * (lo + hi) + 1e-10);
}

TEST(SolveRd, UniformTernaryGridOracle) {
  Vector px = Vector::Constant(3, 1.0 / 3.0);
  const auto r = solve_rd_per_state(px, DistortionSpec{hamming(3, 3)}, 0.2);
  EXPECT_NEAR(r.rate, ternary_grid_oracle(0.2, 1e-3), 1e-3);
  // The grid oracle agrees with ln 3 - H(D) - D ln 2 at its optimum.
  EXPECT_NEAR(r.rate, std::log(3.0) - binary_entropy(0.2) - 0.2 * std::log(2.0), 1e-9);
}

TEST(SolveRd, InfeasibleAndBadTolerance) {
  Vector px(2);
  px << 0.5, 0.5;
  DistortionSpec d{Matrix::Constant(2, 2, 1.0)};
  d.d(0, 0) = 0.5;
  EXPECT_THROW(solve_rd_per_state(px, d, 0.5), InfeasibleDistortion);
  SolverOptions bad;
  bad.tol = 0.0;
  EXPECT_THROW(solve_rd_per_state(px, d, 0.9, bad), std::invalid_argument);
}

TEST(SolveCrd, BinaryExample) {
  for (double a : {0.5, 0.1, 0.9}) {
    const Instance inst = binary_instance(a, 0.2);
    const auto sol = solve_crd(inst, 0.1);
    EXPECT_NEAR(sol.rate, binary_entropy(0.2) - binary_entropy(0.1), 1e-9);
    EXPECT_NEAR(sol.rate, 0.175319, 1e-6);
    EXPECT_LE(sol.distortion_achieved, 0.1 + 1e-9);
    EXPECT_NEAR(inst.p_s().dot(sol.allocation), 0.1, 1e-9);
    for (const auto& w : sol.channel)
      for (Eigen::Index x = 0; x < w.rows(); ++x) EXPECT_NEAR(w.row(x).sum(), 1.0, 1e-12);
  }
}

TEST(SolveCrd, ZeroRateRegime) {
  const Instance inst = binary_instance(0.5, 0.2);
  for (double dist : {0.2, 0.5, 1.0}) {
    const auto sol = solve_crd(inst, dist);
    EXPECT_EQ(sol.rate, 0.0);
    EXPECT_EQ(sol.slope, 0.0);
    EXPECT_EQ(sol.method, CrdMethod::zero_rate);
    // The reconstruction does not depend on x.
    for (const auto& w : sol.channel) EXPECT_EQ(w.row(0), w.row(1));
  }
}

TEST(SolveCrd, InfeasibleDistortion) {
  Rng rng(1);
  const Instance inst = random_instance(rng, 3, 2, 3);
  JointSource src = inst.source();
  DistortionSpec d = inst.distortion();
  d.d.array() += 0.3;
  const Instance shifted = validate(src, d);
  EXPECT_THROW(solve_crd(shifted, 0.1), InfeasibleDistortion);
  EXPECT_THROW(solve_crd(shifted, std::nan("")), std::invalid_argument);
}

TEST(SolveCrd, RoutesAgreeOnRandomInstances) {
  Rng rng(2024);
  for (int t = 0; t < 25; ++t) {
    const int nx = 2 + static_cast<int>(rng.next_u64() % 3);
    const int ns = 1 + static_cast<int>(rng.next_u64() % 4);
    const int ny = 2 + static_cast<int>(rng.next_u64() % 3);
    const Instance inst = random_instance(rng, nx, ns, ny);
    const double dist = interior_distortion(inst, 0.1 + 0.8 * rng.uniform());
    SolverOptions opts;
    opts.cross_check = false;
    const auto a = solve_crd_direct(inst, dist, opts);
    const auto b = solve_crd_decomposed(inst, dist, opts);
    EXPECT_NEAR(a.rate, b.rate, 10 * opts.tol) << t;
    EXPECT_NEAR(inst.p_s().dot(b.allocation.unaryExpr([](double v) {
      return std::isnan(v) ? 0.0 : v;
    })), dist, 1e-9);
  }
}

TEST(SolveCrd, CurveMonotoneConvexAndSlopeConsistent) {
  Rng rng(7);
  const Instance inst = random_instance(rng, 3, 3, 3);
  const double lo = inst.distortion_floor();
  const double hi = inst.zero_rate_distortion();
  std::vector<double> grid, rates;
  for (int i = 1; i < 12; ++i) grid.push_back(lo + (hi - lo) * i / 12.0);
  for (double dist : grid) rates.push_back(solve_crd(inst, dist).rate);
  for (std::size_t i = 1; i < rates.size(); ++i) EXPECT_LE(rates[i], rates[i - 1] + 1e-10);
  for (std::size_t i = 1; i + 1 < rates.size(); ++i)
    EXPECT_LE(rates[i], 0.5 * (rates[i - 1] + rates[i + 1]) + 1e-9);

  const double mid = grid[5];
  const double h = 1e-4;
  const auto sol = solve_crd(inst, mid);
  const double fd = -(solve_crd(inst, mid + h).rate - solve_crd(inst, mid - h).rate) / (2 * h);
  EXPECT_NEAR(sol.slope, fd, 1e-3);
}

TEST(SolveCrd, ConditioningReducesRate) {
  Rng rng(9);
  for (int t = 0; t < 10; ++t) {
    const Instance inst = random_instance(rng, 3, 3, 3);
    const Instance merged = merge_side_information(inst);
    const double dist = interior_distortion(inst, 0.5);
    const double cond = solve_crd(inst, dist).rate;
    const double uncond = solve_crd(merged, dist).rate;
    EXPECT_LE(cond, uncond + 1e-9);
  }
}

TEST(SolveCrd, ZeroRateBoundaryExact) {
  Rng rng(10);
  const Instance inst = random_instance(rng, 4, 2, 3);
  EXPECT_EQ(solve_crd(inst, inst.zero_rate_distortion()).rate, 0.0);
}

TEST(SolveCrd, NullStateExcluded) {
  JointSource src;
  src.pmf.resize(2, 3);
  src.pmf << 0.4, 0.0, 0.3, 0.1, 0.0, 0.2;
  const Instance inst = validate(src, DistortionSpec{hamming(2, 2)});
  const auto sol = solve_crd(inst, 0.1);
  EXPECT_TRUE(std::isnan(sol.allocation(1)));
  EXPECT_NEAR(sol.allocation(0) * inst.p_s()(0) + sol.allocation(2) * inst.p_s()(2), 0.1,
              1e-9);
}

TEST(Allocation, IdenticalCurvesSplitEvenly) {
  const std::vector<BinaryCurve> curves{{0.3}, {0.3}, {0.3}};
  Vector p(3);
  p << 0.2, 0.5, 0.3;
  const auto alloc = allocate_distortion(curves, p, 0.12);
  for (int s = 0; s < 3; ++s) EXPECT_NEAR(alloc.d(s), 0.12, 1e-9);
}

TEST(Allocation, NullWeightIsNaN) {
  const std::vector<BinaryCurve> curves{{0.3}, {0.1}};
  Vector p(2);
  p << 1.0, 0.0;
  const auto alloc = allocate_distortion(curves, p, 0.12);
  EXPECT_NEAR(alloc.d(0), 0.12, 1e-9);
  EXPECT_TRUE(std::isnan(alloc.d(1)));
}

TEST(Allocation, InfeasibleThrows) {
  struct Floored {
    double floor() const { return 0.2; }
    double zero_rate() const { return 0.5; }
    double distortion_at_slope(double l) const { return 0.2 + 0.3 / (1.0 + l); }
  };
  Vector p(1);
  p << 1.0;
  EXPECT_THROW(allocate_distortion(std::vector<Floored>{{}}, p, 0.1), InfeasibleDistortion);
}

TEST(Allocation, TwoStateGridOracle) {
  const double p1 = 0.4, dist = 0.12;
  const BinaryCurve c0{0.3}, c1{0.15};
  // Exhaustive 1-D search over d1 with d0 fixed by the budget.
  double best = std::numeric_limits<double>::infinity(), best_d1 = 0.0;
  const int steps = 2000000;
  for (int i = 0; i <= steps; ++i) {
    const double d1 = (dist / p1) * i / steps;
    const double d0 = (dist - p1 * d1) / (1 - p1);
    if (d0 < 0) continue;
    const double obj = (1 - p1) * c0.rate(d0) + p1 * c1.rate(d1);
    if (obj < best) {
      best = obj;
      best_d1 = d1;
    }
  }
  Vector p(2);
  p << 1 - p1, p1;
  const auto analytic = allocate_distortion(std::vector<BinaryCurve>{c0, c1}, p, dist);
  EXPECT_NEAR(analytic.d(1), best_d1, 1e-6);
  EXPECT_NEAR((1 - p1) * c0.rate(analytic.d(0)) + p1 * c1.rate(analytic.d(1)), best, 1e-9);

  // The solver-backed route on the same instance.
  const Instance inst = two_state_instance(p1, 0.3, 0.15);
  const auto sol = solve_crd_decomposed(inst, dist);
  EXPECT_NEAR(sol.allocation(1), best_d1, 1e-6);
  EXPECT_NEAR(sol.rate, best, 1e-8);
}

TEST(Gradient, MatchesTiltedTableOnBinaryExample) {
  const Instance inst = binary_instance(0.5, 0.2);
  const auto sol = solve_crd(inst, 0.1);
  const auto field = tilted_density(sol, inst);
  const auto g = rd_gradient(inst, 0.1, 1e-4);
  EXPECT_TRUE(g.diagnostics.empty());
  for (int x = 0; x < 2; ++x)
    for (int s = 0; s < 2; ++s) EXPECT_NEAR(g.gradient(x, s), field.table(x, s), 1e-3);
  EXPECT_NEAR(inst.pmf().cwiseProduct(g.gradient).sum(), sol.rate, 1e-3);
}

TEST(Gradient, EulerIdentityOnRandomInstance) {
  Rng rng(12);
  const Instance inst = random_instance(rng, 3, 2, 3);
  const double dist = interior_distortion(inst, 0.4);
  const auto g = rd_gradient(inst, dist, 1e-4);
  const double rate = solve_crd(inst, dist).rate;
  EXPECT_NEAR(inst.pmf().cwiseProduct(g.gradient).sum(), rate, 1e-3);
}

TEST(Gradient, StepRange) {
  const Instance inst = binary_instance();
  EXPECT_THROW(rd_gradient(inst, 0.1, 1e-8), std::invalid_argument);
  EXPECT_THROW(rd_gradient(inst, 0.1, 1e-2), std::invalid_argument);
}

TEST(Gradient, InfeasiblePerturbationIsDiagnosed) {
  // D sits at the floor; adding mass at x = 1 lifts the floor above D.
  JointSource src;
  src.pmf.resize(2, 1);
  src.pmf << 0.5, 0.5;
  DistortionSpec d{Matrix(2, 2)};
  d.d << 0.0, 1.0, 0.5, 1.0;
  const Instance inst = validate(src, d);
  const auto g = rd_gradient(inst, inst.distortion_floor(), 1e-4, false);
  EXPECT_FALSE(g.diagnostics.empty());
  EXPECT_TRUE(std::isnan(g.gradient(1, 0)));
}
