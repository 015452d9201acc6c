#include <cmath>
#include <numbers>
#include <stdexcept>
#include <vector>

#include <gtest/gtest.h>

#include "fblcrd/core_math.hpp"
#include "fblcrd/random.hpp"

using namespace fblcrd;

namespace {

// Simpson's rule on the standard normal density; independent of erfc.
double cdf_by_quadrature(double t) {
  const double lo = -12.0;
  const int steps = 20000;
  const double h = (t - lo) / steps;
  double acc = 0.0;
  for (int i = 0; i <= steps; ++i) {
    const double x = lo + i * h;
    const double w = (i == 0 || i == steps) ? 1.0 : (i % 2 ? 4.0 : 2.0);
    acc += w * std::exp(-0.5 * x * x);
  }
  return acc * h / 3.0 / std::sqrt(2.0 * std::numbers::pi);
}

}  // namespace

TEST(GaussianCdf, KnownValues) {
  EXPECT_DOUBLE_EQ(gaussian_cdf(0.0), 0.5);
  EXPECT_NEAR(gaussian_cdf(10.0), 1.0, 1e-15);
  EXPECT_NEAR(gaussian_cdf(1.2815515655), cdf_by_quadrature(1.2815515655), 1e-10);
  EXPECT_NEAR(gaussian_cdf(1.2815515655), 0.9, 1e-9);
}

TEST(GaussianCdf, ComplementsQ) {
  for (int i = 0; i < 1000; ++i) {
    const double t = -10.0 + 20.0 * i / 999.0;
    EXPECT_NEAR(gaussian_cdf(t) + gaussian_q(t), 1.0, 1e-14) << t;
  }
}

TEST(GaussianCdf, Monotone) {
  double prev = 0.0;
  for (int i = 0; i <= 400; ++i) {
    const double v = gaussian_cdf(-20.0 + 0.1 * i);
    EXPECT_GE(v, prev);
    prev = v;
  }
}

TEST(GaussianQInv, KnownValues) {
  EXPECT_NEAR(gaussian_q_inv(0.5), 0.0, 1e-15);
  // Bisection on the cdf is the oracle.
  double lo = 0.0, hi = 5.0;
  for (int i = 0; i < 200; ++i) {
    const double mid = 0.5 * (lo + hi);
    (gaussian_q(mid) > 0.1 ? lo : hi) = mid;
  }
  EXPECT_NEAR(gaussian_q_inv(0.1), lo, 1e-12);
  EXPECT_NEAR(gaussian_q_inv(0.1), 1.2815515655, 1e-9);
}

TEST(GaussianQInv, DomainErrors) {
  EXPECT_THROW(gaussian_q_inv(0.0), std::domain_error);
  EXPECT_THROW(gaussian_q_inv(1.0), std::domain_error);
  EXPECT_THROW(gaussian_q_inv(-0.2), std::domain_error);
  EXPECT_THROW(gaussian_q_inv(std::nan("")), std::domain_error);
}

TEST(GaussianQInv, RoundTrip) {
  // For t < 0, Q(t) is near 1 and carries an absolute rounding error of half
  // an ulp of 1; inverting amplifies it by 1/phi(t). Beyond t = -5.4 that
  // exceeds 1e-9, so the tolerance there is the conditioning limit.
  for (int i = 0; i <= 600; ++i) {
    const double t = -6.0 + 0.02 * i;
    const double tol = 1e-9 + 0x1.0p-53 / gaussian_pdf(t);
    EXPECT_NEAR(gaussian_q_inv(gaussian_q(t)), t, t >= -5.4 ? 1e-9 : tol) << t;
  }
  for (double eps : {1e-300, 1e-100, 1e-20, 1e-8, 0.3, 0.9, 1.0 - 1e-12}) {
    EXPECT_NEAR(gaussian_q(gaussian_q_inv(eps)), eps, 1e-12) << eps;
    // Relative accuracy survives into the deep tail.
    EXPECT_NEAR(gaussian_q(gaussian_q_inv(eps)) / eps, 1.0, 1e-11) << eps;
  }
}

TEST(GaussianQInv, Antisymmetric) {
  for (double eps : {0.01, 0.1, 0.25, 0.4}) {
    EXPECT_NEAR(gaussian_q_inv(eps), -gaussian_q_inv(1.0 - eps), 1e-12);
  }
}

TEST(Entropy, BinaryValues) {
  EXPECT_EQ(binary_entropy(0.0), 0.0);
  EXPECT_EQ(binary_entropy(1.0), 0.0);
  EXPECT_NEAR(binary_entropy(0.5), std::numbers::ln2, 1e-15);
  // -0.2 ln 0.2 - 0.8 ln 0.8 evaluated by hand to 12 digits.
  EXPECT_NEAR(binary_entropy(0.2), 0.500402423538, 1e-12);
}

TEST(Entropy, BinaryConcave) {
  for (int i = 0; i <= 50; ++i) {
    for (int k = 0; k <= 50; ++k) {
      const double p = i / 50.0, q = k / 50.0;
      EXPECT_GE(binary_entropy(0.5 * (p + q)) + 1e-12,
                0.5 * (binary_entropy(p) + binary_entropy(q)));
    }
  }
}

TEST(Entropy, VectorMatchesBinary) {
  const std::vector<double> p{0.3, 0.7};
  EXPECT_NEAR(entropy(p), binary_entropy(0.3), 1e-15);
  const std::vector<double> u{0.25, 0.25, 0.25, 0.25, 0.0};
  EXPECT_NEAR(entropy(u), std::log(4.0), 1e-15);
}

TEST(BerryEsseen, SingleTerm) {
  const std::vector<MomentTerm> t{{0.0, 1.0, 1.0}};
  EXPECT_DOUBLE_EQ(berry_esseen_bound(t).bound, 6.0);
}

TEST(BerryEsseen, IdenticalTermsScaleAsRootN) {
  // Bernoulli(0.5) centered: var 1/4, E|X - 1/2|^3 = 1/8.
  const MomentTerm one{0.5, 0.25, 0.125};
  const std::vector<MomentTerm> terms(100, one);
  const auto be = berry_esseen_bound(terms);
  EXPECT_NEAR(be.bound, 6.0 * 0.125 / (std::pow(0.25, 1.5) * 10.0), 1e-12);
  EXPECT_NEAR(be.sigma2, 25.0, 1e-12);
  EXPECT_NEAR(be.t3, 12.5, 1e-12);
}

TEST(BerryEsseen, SelfInformationTerms) {
  const double p = 0.11;
  const double a = -std::log(p), b = -std::log(1.0 - p);
  const double mean = p * a + (1 - p) * b;
  const double var = p * (a - mean) * (a - mean) + (1 - p) * (b - mean) * (b - mean);
  const double abs3 =
      p * std::pow(std::abs(a - mean), 3) + (1 - p) * std::pow(std::abs(b - mean), 3);
  const std::vector<MomentTerm> terms(1000, MomentTerm{mean, var, abs3});
  const auto be = berry_esseen_bound(terms);
  EXPECT_NEAR(be.bound, 6.0 * 1000 * abs3 / std::pow(1000 * var, 1.5), 1e-12);
}

TEST(BerryEsseen, DegenerateVariance) {
  const std::vector<MomentTerm> zero{{1.0, 0.0, 0.0}};
  EXPECT_EQ(berry_esseen_bound(zero).bound, 0.0);
  const std::vector<MomentTerm> bad{{1.0, 0.0, 0.5}};
  EXPECT_TRUE(std::isinf(berry_esseen_bound(bad).bound));
  const std::vector<MomentTerm> neg{{1.0, -1.0, 0.5}};
  EXPECT_THROW(berry_esseen_bound(neg), std::invalid_argument);
}

TEST(ChiSquare, Density) {
  EXPECT_NEAR(chi2_pdf(2, 0.0), 0.5, 1e-15);
  EXPECT_NEAR(chi2_pdf(2, 2.0), 0.5 * std::exp(-1.0), 1e-15);
  EXPECT_EQ(chi2_pdf(3, -1.0), 0.0);
  EXPECT_THROW(chi2_pdf(0, 1.0), std::invalid_argument);
  // Large k stays finite through the log-gamma route.
  EXPECT_GT(chi2_pdf(1000000, 1000000.0), 0.0);
  EXPECT_TRUE(std::isfinite(chi2_pdf(1000000, 1000000.0)));
}

TEST(ChiSquare, IntegratesToOne) {
  for (int k : {1, 2, 5, 50, 1000}) {
    const double kd = k;
    const double sd = std::sqrt(2.0 * kd);
    const auto pdf = [k](double x) { return chi2_pdf(k, x); };
    // [0, 1] with x = u^2 removes the k = 1 singularity at the origin.
    double total = integrate([&](double u) { return 2.0 * u * pdf(u * u); }, 0.0, 1.0, 1e-12)
                       .value;
    const std::vector<double> cuts{1.0, std::max(1.0, kd - 10 * sd), kd + 10 * sd,
                                   kd + 40 * sd + 80.0};
    for (std::size_t i = 0; i + 1 < cuts.size(); ++i) {
      if (cuts[i + 1] <= cuts[i]) continue;
      total += integrate(pdf, cuts[i], cuts[i + 1], 1e-12).value;
    }
    EXPECT_NEAR(total, 1.0, 1e-6) << k;
  }
  const double five = integrate([](double x) { return chi2_pdf(5, x); }, 0.0, 200.0, 1e-12)
                          .value;
  EXPECT_NEAR(five, 1.0, 1e-9);
}

TEST(ChiSquare, TailsAgree) {
  for (double k : {1.0, 3.0, 40.0}) {
    for (double x : {0.5, 3.0, 50.0}) {
      EXPECT_NEAR(chi2_cdf(k, x) + chi2_sf(k, x), 1.0, 1e-14);
    }
  }
  EXPECT_EQ(chi2_sf(4.0, 0.0), 1.0);
  EXPECT_EQ(chi2_cdf(4.0, -1.0), 0.0);
}

TEST(LogSpace, PowOneMinus) {
  // Plain evaluation where it is accurate.
  EXPECT_NEAR(pow_one_minus(std::log(0.3), std::log(5.0)), std::pow(0.7, 5.0), 1e-15);
  EXPECT_EQ(pow_one_minus(-kInf, 100.0), 1.0);
  EXPECT_EQ(pow_one_minus(0.0, 0.0), 0.0);  // p = 1
  // Huge M, tiny p: M p = e^{-1}.
  const double log_m = 120.0;
  EXPECT_NEAR(pow_one_minus(-log_m - 1.0, log_m), std::exp(-std::exp(-1.0)), 1e-14);
  // Far below the normal range of doubles the result still varies smoothly.
  EXPECT_NEAR(pow_one_minus(-740.0, 740.0), std::exp(-1.0), 1e-13);
  EXPECT_NEAR(pow_one_minus(-740.001, 740.0), std::exp(-std::exp(-0.001)), 1e-13);
  // Vanishing contributions short-circuit to one.
  EXPECT_EQ(pow_one_minus(-800.0, 10.0), 1.0);
}

TEST(LogSpace, PowOneMinusMonotoneInM) {
  double prev = 1.0;
  for (int i = 0; i <= 100; ++i) {
    const double v = pow_one_minus(std::log(1e-5), 0.2 * i);
    EXPECT_LE(v, prev);
    prev = v;
  }
}

TEST(Random, DeterministicStreams) {
  Rng a(derive_seed(7, 3)), b(derive_seed(7, 3)), c(derive_seed(7, 4));
  for (int i = 0; i < 10; ++i) {
    const auto va = a.next_u64();
    EXPECT_EQ(va, b.next_u64());
    EXPECT_NE(va, c.next_u64());
  }
}

TEST(Random, DirichletOnSimplex) {
  Rng rng(1);
  for (int t = 0; t < 100; ++t) {
    const auto w = rng.dirichlet_flat(4);
    double s = 0.0;
    for (double x : w) {
      EXPECT_GT(x, 0.0);
      s += x;
    }
    EXPECT_NEAR(s, 1.0, 1e-14);
  }
}

TEST(Random, NormalMoments) {
  Rng rng(99);
  double m = 0.0, m2 = 0.0;
  const int n = 200000;
  for (int i = 0; i < n; ++i) {
    const double z = rng.normal();
    m += z;
    m2 += z * z;
  }
  m /= n;
  m2 /= n;
  EXPECT_NEAR(m, 0.0, 5.0 / std::sqrt(n));
  EXPECT_NEAR(m2, 1.0, 5.0 * std::sqrt(2.0 / n));
}
