#include <cmath>

#include <gtest/gtest.h>

#include "fblcrd/tilted_info.hpp"
#include "test_support.hpp"

using namespace fblcrd;
using fblcrd::testing::binary_instance;
using fblcrd::testing::hamming;
using fblcrd::testing::interior_distortion;
using fblcrd::testing::random_instance;

namespace {

const double kBinaryV = 0.16 * std::log(4.0) * std::log(4.0);

}  // namespace

TEST(TiltedDensity, BinaryExampleClosedForm) {
  const Instance inst = binary_instance(0.3, 0.2);
  for (double dist : {0.02, 0.1, 0.18}) {
    const auto sol = solve_crd(inst, dist);
    const auto f = tilted_density(sol, inst);
    for (int x = 0; x < 2; ++x)
      for (int s = 0; s < 2; ++s)
        EXPECT_NEAR(f.table(x, s), -std::log(inst.conditional()(x, s)) - binary_entropy(dist),
                    1e-8);
  }
}

TEST(TiltedDensity, ZeroRateTableVanishes) {
  const Instance inst = binary_instance(0.3, 0.2);
  for (double dist : {0.2, 0.6}) {
    const auto f = tilted_density(solve_crd(inst, dist), inst);
    EXPECT_EQ(f.table.cwiseAbs().maxCoeff(), 0.0);
    EXPECT_EQ(f.variance, 0.0);
  }
}

TEST(TiltedDensity, MeanMatchesIndependentRoute) {
  Rng rng(31);
  for (int t = 0; t < 10; ++t) {
    const Instance inst = random_instance(rng, 3, 2, 3);
    const double dist = interior_distortion(inst, 0.3 + 0.4 * rng.uniform());
    const auto f = tilted_density(solve_crd_direct(inst, dist), inst);
    EXPECT_NEAR(f.mean, solve_crd_decomposed(inst, dist).rate, 1e-8);
  }
}

TEST(TiltedDensity, ShapeMismatchThrows) {
  const Instance inst = binary_instance();
  auto sol = solve_crd(inst, 0.1);
  sol.induced = Matrix::Constant(3, 2, 1.0 / 3.0);
  EXPECT_THROW(tilted_density(sol, inst), std::invalid_argument);
}

TEST(TiltedDensity, IndependentOfInitialization) {
  Rng rng(5);
  const Instance inst = random_instance(rng, 4, 2, 3);
  const double dist = interior_distortion(inst, 0.5);
  const auto base = tilted_density(solve_crd(inst, dist), inst);
  for (std::uint64_t seed : {1ull, 2ull, 3ull}) {
    SolverOptions opts;
    opts.init_seed = seed;
    const auto other = tilted_density(solve_crd(inst, dist, opts), inst);
    EXPECT_LE((other.table - base.table).cwiseAbs().maxCoeff(), 1e-6);
  }
}

TEST(InfoDensities, SelfInformation) {
  const Instance inst = binary_instance(0.3, 0.2);
  const auto dens = info_densities(solve_crd(inst, 0.1), inst);
  EXPECT_NEAR(dens.i_x_given_s(1, 0), -std::log(0.2), 1e-15);
  EXPECT_NEAR(dens.i_x_given_s(0, 1), -std::log(0.8), 1e-15);
}

TEST(Lemma1, BinaryExampleHolds) {
  const Instance inst = binary_instance(0.5, 0.2);
  const auto sol = solve_crd(inst, 0.1);
  const auto f = tilted_density(sol, inst);
  const auto rep = verify_lemma1(f, sol, inst, 100, 17);
  EXPECT_TRUE(rep.ok());
  EXPECT_LE(rep.tilt_max, 1.0 + 1e-9);
  EXPECT_NEAR(rep.tilt_at_optimum, 1.0, 1e-9);
  EXPECT_LE(rep.identity_slack, 1e-8);
}

TEST(Lemma1, CorruptedDensityFlagged) {
  const Instance inst = binary_instance(0.5, 0.2);
  const auto sol = solve_crd(inst, 0.1);
  auto f = tilted_density(sol, inst);
  f.table.array() += 0.01;
  refresh_moments(f);
  const auto rep = verify_lemma1(f, sol, inst, 10, 17);
  EXPECT_FALSE(rep.ok());
  EXPECT_NEAR(rep.mean_slack, 0.01, 1e-8);
  EXPECT_GE(rep.failures.size(), 2u);
}

TEST(Lemma1, ThreadCountDoesNotMatter) {
  Rng rng(8);
  const Instance inst = random_instance(rng, 3, 3, 4);
  const double dist = interior_distortion(inst, 0.5);
  const auto sol = solve_crd(inst, dist);
  const auto f = tilted_density(sol, inst);
  const auto a = verify_lemma1(f, sol, inst, 64, 3, 1);
  const auto b = verify_lemma1(f, sol, inst, 64, 3, 4);
  EXPECT_EQ(a.tilt_max, b.tilt_max);
  EXPECT_TRUE(a.ok()) << (a.failures.empty() ? "" : a.failures[0]);
}

TEST(Dispersion, BinaryExample) {
  const Instance inst = binary_instance(0.5, 0.2);
  const auto f = tilted_density(solve_crd(inst, 0.1), inst);
  const auto v = dispersion_v(f);
  EXPECT_NEAR(v.v, kBinaryV, 1e-9);
  EXPECT_NEAR(v.v, 0.307490, 1e-6);
  EXPECT_NEAR(f.variance, v.v, 1e-12);
  // Per-state rates coincide, so all variance is within-state.
  EXPECT_NEAR(v.state_rate_var, 0.0, 1e-15);
}

TEST(Dispersion, DeterministicSourceIsZero) {
  JointSource src;
  src.pmf = Matrix::Zero(2, 1);
  src.pmf(0, 0) = 1.0;
  DistortionSpec d{Matrix(2, 2)};
  d.d << 0.2, 1.0, 1.0, 0.0;
  const Instance inst = validate(src, d);
  const auto f = tilted_density(solve_crd(inst, 0.5), inst);
  EXPECT_EQ(dispersion_v(f).v, 0.0);
}

TEST(Dispersion, BinarySideInformationRegime) {
  // Distinct per-state biases, both states active: V = var i_{X|S} + the
  // state-rate spread, and the split holds exactly.
  JointSource src;
  src.pmf.resize(2, 2);
  src.pmf << 0.8 * 0.6, 0.9 * 0.4, 0.2 * 0.6, 0.1 * 0.4;
  const Instance inst = validate(src, DistortionSpec{hamming(2, 2)});
  const auto sol = solve_crd(inst, 0.05);
  const auto f = tilted_density(sol, inst);
  const auto v = dispersion_v(f);
  EXPECT_NEAR(v.expected_state_var + v.state_rate_var, v.v, 1e-12);
  // With equal slopes both states sit at the same d_s, hence j = i_{X|S} - H(d).
  const auto dens = info_densities(sol, inst);
  double m = 0.0, m2 = 0.0;
  for (int x = 0; x < 2; ++x)
    for (int s = 0; s < 2; ++s) {
      m += inst.pmf(x, s) * dens.i_x_given_s(x, s);
      m2 += inst.pmf(x, s) * dens.i_x_given_s(x, s) * dens.i_x_given_s(x, s);
    }
  EXPECT_NEAR(v.v, m2 - m * m, 1e-8);
}

TEST(Dispersion, TotalVarianceOnRandomInstances) {
  Rng rng(77);
  for (int t = 0; t < 20; ++t) {
    const Instance inst = random_instance(rng, 4, 3, 3);
    const auto f = tilted_density(solve_crd(inst, interior_distortion(inst, 0.5)), inst);
    EXPECT_NO_THROW(dispersion_v(f));
    EXPECT_GE(f.variance, 0.0);
  }
}

TEST(SecondOrder, Classifier) {
  const double r = 0.175319;
  auto at = second_order_classifier(r, r, kBinaryV, 0.5);
  EXPECT_EQ(at.kind, SecondOrderLimit::Kind::finite);
  EXPECT_EQ(at.value, 0.0);
  EXPECT_EQ(second_order_classifier(r - 0.01, r, kBinaryV, 0.1).kind,
            SecondOrderLimit::Kind::plus_infinity);
  EXPECT_EQ(second_order_classifier(r + 0.01, r, kBinaryV, 0.1).kind,
            SecondOrderLimit::Kind::minus_infinity);
  at = second_order_classifier(r, r, kBinaryV, 0.1);
  EXPECT_NEAR(at.value, std::sqrt(kBinaryV) * gaussian_q_inv(0.1), 1e-12);
  // 0.554518 * 1.281552 evaluated by hand.
  EXPECT_NEAR(at.value, 0.710643, 1e-5);
}

TEST(RdCurve, FillsDispersion) {
  const Instance inst = binary_instance(0.5, 0.2);
  const auto pts = rd_curve(inst, {0.05, 0.1, 0.25});
  ASSERT_EQ(pts.size(), 3u);
  EXPECT_NEAR(pts[1].dispersion, kBinaryV, 1e-9);
  EXPECT_EQ(pts[2].rate, 0.0);
  EXPECT_EQ(pts[2].dispersion, 0.0);
}
