#pragma once

// Scalar numerical primitives shared by every other module. All information
// quantities are in nats; bits appear only in the CLI presentation layer.

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <boost/math/quadrature/gauss_kronrod.hpp>
#include <boost/math/special_functions/gamma.hpp>

#include "fblcrd/errors.hpp"

namespace fblcrd {

inline constexpr double kInf = std::numeric_limits<double>::infinity();
inline constexpr double kBitsPerNat = 1.4426950408889634;  // 1 / ln 2

inline double nats_to_bits(double nats) { return nats * kBitsPerNat; }

//----------------------------------------------------------------------------
// Standard normal distribution
//----------------------------------------------------------------------------

inline double gaussian_pdf(double t) {
  return std::exp(-0.5 * t * t) / std::sqrt(2.0 * std::numbers::pi);
}

/// Phi(t). erfc keeps full relative accuracy in both tails.
inline double gaussian_cdf(double t) {
  return 0.5 * std::erfc(-t / std::numbers::sqrt2);
}

/// Q(t) = 1 - Phi(t), evaluated without cancellation.
inline double gaussian_q(double t) {
  return 0.5 * std::erfc(t / std::numbers::sqrt2);
}

namespace detail {

// Solves Q(t) = eps for eps in (0, 0.5], where t >= 0. Newton on ln Q with a
// bisection safeguard keeps the iteration stable deep in the tail.
inline double q_inv_upper(double eps) {
  if (eps == 0.5) return 0.0;
  const double log_eps = std::log(eps);
  // Abramowitz & Stegun 26.2.23 starting point.
  const double w = std::sqrt(-2.0 * log_eps);
  double t = w - (2.515517 + 0.802853 * w + 0.010328 * w * w) /
                     (1.0 + 1.432788 * w + 0.189269 * w * w +
                      0.001308 * w * w * w);
  double lo = 0.0;
  double hi = 40.0;
  t = std::clamp(t, lo, hi);
  for (int iter = 0; iter < 200; ++iter) {
    const double q = gaussian_q(t);
    const double h = std::log(q) - log_eps;
    if (h > 0.0) {
      lo = t;
    } else {
      hi = t;
    }
    // d/dt ln Q(t) = -phi(t) / Q(t)
    const double slope = -gaussian_pdf(t) / q;
    double next = t - h / slope;
    if (!(next > lo && next < hi)) next = 0.5 * (lo + hi);
    if (std::abs(next - t) <= 1e-15 * std::max(1.0, std::abs(t))) {
      return next;
    }
    t = next;
  }
  return t;
}

}  // namespace detail

/// Q^{-1}(eps): the t with Q(t) = eps. Throws std::domain_error outside (0,1).
inline double gaussian_q_inv(double eps) {
  if (!(eps > 0.0 && eps < 1.0)) {
    throw std::domain_error("gaussian_q_inv: eps must lie in (0, 1), got " +
                            std::to_string(eps));
  }
  if (eps <= 0.5) return detail::q_inv_upper(eps);
  // 1 - eps is exact for eps in [0.5, 1).
  return -detail::q_inv_upper(1.0 - eps);
}

//----------------------------------------------------------------------------
// Entropies
//----------------------------------------------------------------------------

/// -p ln p with the convention 0 ln 0 = 0.
inline double xlogx_neg(double p) { return p > 0.0 ? -p * std::log(p) : 0.0; }

inline double binary_entropy(double p) {
  return xlogx_neg(p) + xlogx_neg(1.0 - p);
}

inline double entropy(std::span<const double> pmf) {
  double h = 0.0;
  for (double p : pmf) h += xlogx_neg(p);
  return h;
}

//----------------------------------------------------------------------------
// Berry-Esseen
//----------------------------------------------------------------------------

struct MomentTerm {
  double mean = 0.0;
  double var = 0.0;
  double abs3 = 0.0;  // E|X - mean|^3
};

struct BerryEsseenTerms {
  double sigma2 = 0.0;  // sum of variances
  double t3 = 0.0;      // sum of absolute third central moments
  double bound = 0.0;   // 6 t3 / sigma2^{3/2}
};

/// Aggregates independent summands into the uniform Gaussian-approximation
/// error |Pr[sum (X_k - mu_k) >= lambda sigma] - Q(lambda)| <= bound.
inline BerryEsseenTerms berry_esseen_bound(std::span<const MomentTerm> terms) {
  BerryEsseenTerms out;
  for (const auto& t : terms) {
    if (t.var < 0.0 || t.abs3 < 0.0) {
      throw std::invalid_argument("berry_esseen_bound: negative moment");
    }
    out.sigma2 += t.var;
    out.t3 += t.abs3;
  }
  if (out.sigma2 == 0.0) {
    out.bound = out.t3 > 0.0 ? kInf : 0.0;
  } else {
    out.bound = 6.0 * out.t3 / std::pow(out.sigma2, 1.5);
  }
  return out;
}

//----------------------------------------------------------------------------
// Chi-square distribution
//----------------------------------------------------------------------------

/// log of the central chi-square density with k degrees of freedom; -inf
/// outside the support.
inline double chi2_log_pdf(double k, double x) {
  if (x < 0.0) return -kInf;
  const double half_k = 0.5 * k;
  if (x == 0.0) {
    if (k < 2.0) return kInf;
    if (k == 2.0) return std::log(0.5);
    return -kInf;
  }
  return (half_k - 1.0) * std::log(x) - 0.5 * x - half_k * std::numbers::ln2 -
         std::lgamma(half_k);
}

inline double chi2_pdf(int k, double x) {
  if (k < 1) throw std::invalid_argument("chi2_pdf: k must be positive");
  return std::exp(chi2_log_pdf(static_cast<double>(k), x));
}

/// Pr[chi2_k <= x]
inline double chi2_cdf(double k, double x) {
  if (x <= 0.0) return 0.0;
  if (std::isinf(x)) return 1.0;
  return boost::math::gamma_p(0.5 * k, 0.5 * x);
}

/// Pr[chi2_k > x], accurate in the upper tail.
inline double chi2_sf(double k, double x) {
  if (x <= 0.0) return 1.0;
  if (std::isinf(x)) return 0.0;
  return boost::math::gamma_q(0.5 * k, 0.5 * x);
}

//----------------------------------------------------------------------------
// Log-space helpers
//----------------------------------------------------------------------------

/// -ln(1 - p) given ln p, accurate for p near 0 and near 1.
inline double neg_log1m_from_log(double log_p) {
  if (log_p >= 0.0) return kInf;
  if (log_p < -30.0) {
    // -ln(1-p) = p + p^2/2 + ...; p^2 is below double resolution here.
    return std::exp(log_p);
  }
  return -std::log1p(-std::exp(log_p));
}

/// (1 - p)^M with both p and M supplied as logarithms. M may be astronomically
/// large, so the product M * (-ln(1-p)) is formed in log space too.
inline double pow_one_minus(double log_p, double log_m) {
  if (log_p == -kInf) return 1.0;
  // -ln(1-p) = p (1 + p/2 + ...), so below -30 ln p itself is exact to
  // 1e-13; forming p there would lose everything once p is subnormal.
  double log_a = log_p;
  if (log_p >= -30.0) {
    const double a = neg_log1m_from_log(log_p);
    if (std::isinf(a)) return 0.0;
    log_a = std::log(a);
  }
  const double log_exponent = log_m + log_a;
  if (log_exponent < std::log(1e-300)) return 1.0;
  return std::exp(-std::exp(log_exponent));
}

//----------------------------------------------------------------------------
// Quadrature
//----------------------------------------------------------------------------

struct QuadratureResult {
  double value = 0.0;
  double error = 0.0;
};

/// Globally adaptive 31-point Gauss-Kronrod on [a, b]: the panel with the
/// largest error estimate is bisected until the summed estimate falls below
/// rel_tol |value| (or abs_tol), or `max_panels` is reached. Boost supplies
/// the per-panel rule; its own recursion reports errors unscaled by the panel
/// width, so the bookkeeping is done here.
template <class F>
QuadratureResult integrate(F&& f, double a, double b, double rel_tol,
                           std::size_t max_panels = 4096, double abs_tol = 1e-300) {
  struct Panel {
    double a, b, value, error;
    bool operator<(const Panel& o) const { return error < o.error; }
  };
  const auto rule = [&](double lo, double hi) {
    double e = 0.0;
    const double v =
        boost::math::quadrature::gauss_kronrod<double, 31>::integrate(f, lo, hi, 0, 0.0, &e);
    return Panel{lo, hi, v, e * 0.5 * (hi - lo)};
  };
  std::vector<Panel> heap{rule(a, b)};
  double value = heap.front().value, error = heap.front().error;
  while (error > std::max(rel_tol * std::abs(value), abs_tol) && heap.size() < max_panels) {
    std::pop_heap(heap.begin(), heap.end());
    const Panel worst = heap.back();
    heap.pop_back();
    const double mid = 0.5 * (worst.a + worst.b);
    if (!(mid > worst.a && mid < worst.b)) {
      heap.push_back(worst);
      std::push_heap(heap.begin(), heap.end());
      break;
    }
    for (const Panel& p : {rule(worst.a, mid), rule(mid, worst.b)}) {
      heap.push_back(p);
      std::push_heap(heap.begin(), heap.end());
    }
    // Re-sum rather than update incrementally to avoid drift.
    value = error = 0.0;
    for (const auto& p : heap) {
      value += p.value;
      error += p.error;
    }
  }
  return {value, error};
}

}  // namespace fblcrd
