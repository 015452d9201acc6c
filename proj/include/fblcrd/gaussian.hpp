#pragma once

// Jointly Gaussian source with side information S = X + Z, X ~ N(0, var_x),
// Z ~ N(0, var_z) independent, squared-error distortion. Everything is in
// nats.
//
// Residual geometry: with e = x^n - mu(s^n), |e|^2 / var_{X|S} ~ chi2_n. The
// codebook lives on the sphere of radius r0 = sqrt(n (var_{X|S} - D)) around
// mu(s^n). We measure the residual by z = |e|^2 / (n var_{X|S}), so n z ~
// chi2_n and the covering window r1 <= |e| <= r2 becomes
//   (sqrt(1 - t) - sqrt(t))^2 <= z <= (sqrt(1 - t) + sqrt(t))^2,  t = D / var_{X|S}.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <boost/math/special_functions/beta.hpp>

#include "fblcrd/core_math.hpp"
#include "fblcrd/errors.hpp"
#include "fblcrd/fbl_bounds.hpp"
#include "fblcrd/parallel.hpp"
#include "fblcrd/random.hpp"

namespace fblcrd {

struct GaussianModel {
  double var_x = 1.0;
  double var_z = 1.0;
  double distortion = 0.5;

  double cond_var() const { return var_x * var_z / (var_x + var_z); }
  double rho() const { return std::sqrt(var_x / (var_x + var_z)); }
  double mmse_coeff() const { return var_x / (var_x + var_z); }
  double mu(double s) const { return mmse_coeff() * s; }
  /// D / var_{X|S}
  double ratio() const { return distortion / cond_var(); }
};

inline void validate(const GaussianModel& m) {
  if (!(m.var_x > 0.0) || !std::isfinite(m.var_x))
    throw std::invalid_argument("gaussian model: var_x must be positive");
  if (!(m.var_z > 0.0) || !std::isfinite(m.var_z))
    throw std::invalid_argument("gaussian model: var_z must be positive");
  if (!(m.distortion > 0.0) || !std::isfinite(m.distortion))
    throw std::invalid_argument("gaussian model: D must be positive");
}

/// R(D) = 1/2 ln(var_{X|S} / D), zero once D >= var_{X|S}.
inline double gaussian_crd(const GaussianModel& m) {
  validate(m);
  return m.distortion < m.cond_var() ? 0.5 * std::log(m.cond_var() / m.distortion) : 0.0;
}

/// Dispersion of the Gaussian source, for every variance pair.
inline constexpr double kGaussianDispersion = 0.5;

/// j(x^n, D | s^n) = n/2 ln(var/D) + |x - mu(s)|^2 / (2 var) - n/2
inline double gaussian_tilted_density(const GaussianModel& m, std::span<const double> x,
                                      std::span<const double> s) {
  validate(m);
  if (x.size() != s.size())
    throw std::invalid_argument("gaussian_tilted_density: sequence lengths differ");
  const double var = m.cond_var();
  const double c = m.mmse_coeff();
  double r2 = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double e = x[i] - c * s[i];
    r2 += e * e;
  }
  const double n = static_cast<double>(x.size());
  return 0.5 * n * std::log(var / m.distortion) + r2 / (2.0 * var) - 0.5 * n;
}

/// ln M = n R + sqrt(n / 2) Q^{-1}(eps) + 1/2 ln n + ln ln n
inline double gaussian_log_m(const GaussianModel& m, int n, double eps) {
  if (n < 2) throw std::invalid_argument("gaussian_log_m: n must be at least 2");
  const double dn = n;
  return dn * gaussian_crd(m) + std::sqrt(0.5 * dn) * gaussian_q_inv(eps) +
         0.5 * std::log(dn) + std::log(std::log(dn));
}

struct SphereCapParams {
  int n = 0;
  double r0 = 0.0, r1 = 0.0, r2 = 0.0;
  double log_m = 0.0;
};

inline SphereCapParams sphere_cap_params(const GaussianModel& m, int n, double log_m) {
  validate(m);
  if (n < 2) throw std::invalid_argument("sphere cap: n must be at least 2");
  if (!(m.distortion < m.cond_var()))
    throw std::invalid_argument("sphere cap: requires D < var_{X|S}");
  const double dn = n;
  SphereCapParams p;
  p.n = n;
  p.r0 = std::sqrt(dn * (m.cond_var() - m.distortion));
  p.r1 = p.r0 - std::sqrt(dn * m.distortion);
  p.r2 = p.r0 + std::sqrt(dn * m.distortion);
  p.log_m = log_m;
  return p;
}

namespace detail {

/// sin^2 of the cap angle at normalized residual z; clamped to [0, 1].
inline double cap_sin2(double z, double t) {
  if (!(z > 0.0)) return 0.0;
  const double a = 1.0 + z - 2.0 * t;
  return std::clamp(1.0 - a * a / (4.0 * (1.0 - t) * z), 0.0, 1.0);
}

/// cos of the cap angle at normalized residual z.
inline double cap_cos(double z, double t) {
  return (1.0 + z - 2.0 * t) / (2.0 * std::sqrt((1.0 - t) * z));
}

/// ln of Gamma(n/2 + 1) / (sqrt(pi) n Gamma((n - 1)/2 + 1))
inline double cap_log_prefactor(int n) {
  const double dn = n;
  return std::lgamma(0.5 * dn + 1.0) - std::lgamma(0.5 * (dn - 1.0) + 1.0) -
         0.5 * std::log(std::numbers::pi) - std::log(dn);
}

/// ln I_x(a, b) by the Lentz continued fraction, for x < (a + 1)/(a + b + 2).
inline double log_ibeta_cf(double a, double b, double x) {
  const double tiny = 1e-300;
  double c = 1.0, d = 1.0 - (a + b) * x / (a + 1.0);
  if (std::abs(d) < tiny) d = tiny;
  d = 1.0 / d;
  double h = d;
  for (int m = 1; m < 10000; ++m) {
    const double dm = m;
    double num = dm * (b - dm) * x / ((a + 2 * dm - 1) * (a + 2 * dm));
    d = 1.0 + num * d;
    if (std::abs(d) < tiny) d = tiny;
    c = 1.0 + num / c;
    if (std::abs(c) < tiny) c = tiny;
    d = 1.0 / d;
    h *= d * c;
    num = -(a + dm) * (a + b + dm) * x / ((a + 2 * dm) * (a + 2 * dm + 1));
    d = 1.0 + num * d;
    if (std::abs(d) < tiny) d = tiny;
    c = 1.0 + num / c;
    if (std::abs(c) < tiny) c = tiny;
    d = 1.0 / d;
    const double del = d * c;
    h *= del;
    if (std::abs(del - 1.0) < 1e-15) break;
  }
  const double log_front = a * std::log(x) + b * std::log1p(-x) - std::log(a) -
                           (std::lgamma(a) + std::lgamma(b) - std::lgamma(a + b));
  return log_front + std::log(h);
}

}  // namespace detail

/// ln f(n, z): the polar-cap lower bound on the covering probability.
inline double log_cap_lower(int n, double z, double t) {
  const double s2 = detail::cap_sin2(z, t);
  if (s2 <= 0.0) return -kInf;
  return detail::cap_log_prefactor(n) + 0.5 * (n - 1.0) * std::log(s2);
}

/// ln of the exact fraction of the sphere of radius r0 that lies within
/// distortion D of a point at normalized residual z.
inline double log_cap_exact(int n, double z, double t) {
  if (t >= 1.0) return z <= t ? 0.0 : -kInf;
  const double c = detail::cap_cos(z, t);
  if (!(c > -1.0)) return 0.0;
  if (!(c < 1.0)) return -kInf;
  const double a = 0.5 * (n - 1.0);
  const double s2 = 1.0 - c * c;
  if (c <= 0.0) {
    // Past the equator: one minus the opposite cap.
    return std::log1p(-0.5 * boost::math::ibeta(a, 0.5, s2));
  }
  const double v = boost::math::ibeta(a, 0.5, s2);
  if (v > 1e-250) return std::log(0.5 * v);
  return std::log(0.5) + detail::log_ibeta_cf(a, 0.5, s2);
}

/// n int (1 - f(n, z))^M 1{z1 <= z <= z2} p_chi2_n(n z) dz plus the two
/// chi-square tails outside [z1, z2].
inline BoundResult sphere_cap_bound(const GaussianModel& m, int n, double log_m,
                                    double quad_tol = 1e-8) {
  const auto par = sphere_cap_params(m, n, log_m);
  if (!(log_m >= 0.0)) throw std::invalid_argument("sphere_cap_bound: M must be at least 1");
  const double t = m.ratio();
  const double dn = n;
  const double scale = dn * m.cond_var();
  const double z1 = par.r1 > 0.0 ? par.r1 * par.r1 / scale : 0.0;
  const double z2 = par.r2 * par.r2 / scale;

  const double log_pref = detail::cap_log_prefactor(n);
  const auto integrand = [&](double z) {
    if (!(z > 0.0)) return 0.0;
    const double s2 = detail::cap_sin2(z, t);
    const double lf = s2 > 0.0 ? log_pref + 0.5 * (dn - 1.0) * std::log(s2) : -kInf;
    return pow_one_minus(lf, log_m) * dn * std::exp(chi2_log_pdf(dn, dn * z));
  };

  // Panels: the chi-square bulk, plus the points where ln(M f) crosses a few
  // levels, because (1 - f)^M switches from 0 to 1 over a width of order 1/n.
  std::vector<double> cuts{z1, z2};
  const double w = std::sqrt(2.0 / dn);
  for (int k = -16; k <= 16; ++k) {
    const double c = 1.0 + k * w;
    if (c > z1 && c < z2) cuts.push_back(c);
  }
  const auto excess = [&](double z) { return log_m + log_cap_lower(n, z, t); };
  const double peak = std::clamp(2.0 * t - 1.0, z1, z2);  // where the cap angle is pi/2
  for (double level : {8.0, 3.0, 1.0, 0.0, -1.0, -3.0, -8.0, -30.0}) {
    for (auto [a, b] : {std::pair{z1, peak}, std::pair{peak, z2}}) {
      if (!(b > a)) continue;
      const bool rising = b == peak;
      double lo = a, hi = b;
      const double ga = excess(lo), gb = excess(hi);
      if ((ga - level) * (gb - level) > 0.0 || std::isnan(ga - gb)) continue;
      for (int it = 0; it < 100; ++it) {
        const double mid = 0.5 * (lo + hi);
        ((excess(mid) < level) == rising ? lo : hi) = mid;
      }
      cuts.push_back(0.5 * (lo + hi));
    }
  }
  std::sort(cuts.begin(), cuts.end());
  cuts.erase(std::unique(cuts.begin(), cuts.end()), cuts.end());
  double body = 0.0, err = 0.0;
  for (std::size_t i = 0; i + 1 < cuts.size(); ++i) {
    const auto q = integrate(integrand, cuts[i], cuts[i + 1], quad_tol, 4096, 1e-16);
    body += q.value;
    err += q.error;
  }
  if (!(err <= std::max(quad_tol * body, 1e-14)))
    throw ConvergenceError("sphere_cap_bound: quadrature did not converge", err);

  BoundResult r;
  r.method = "quadrature";
  r.terms.push_back({"cap_integral", body, 0.0});
  r.terms.push_back({"inner_tail", z1 > 0.0 ? chi2_cdf(dn, dn * z1) : 0.0, 0.0});
  r.terms.push_back({"outer_tail", chi2_sf(dn, dn * z2), 0.0});
  return finish(r);
}

enum class CapMode {
  lower_bound,  // covering probability f(n, z), the integrand above
  exact,        // exact cap fraction
  empirical,    // draw M codewords uniformly on the sphere
};

inline const char* cap_mode_name(CapMode m) {
  switch (m) {
    case CapMode::lower_bound: return "lower-bound";
    case CapMode::exact: return "exact";
    case CapMode::empirical: return "empirical";
  }
  return "";
}

/// Monte-Carlo estimate of E[(1 - P(cover | X^n, S^n))^M] for the spherical
/// codebook. Trial t uses the stream derive_seed(seed, t).
inline BoundResult gaussian_simulate(const GaussianModel& m, int n, double log_m,
                                     std::size_t trials, std::uint64_t seed,
                                     CapMode mode = CapMode::lower_bound,
                                     unsigned threads = 1) {
  validate(m);
  if (n < 2) throw std::invalid_argument("gaussian_simulate: n must be at least 2");
  if (trials == 0) throw std::invalid_argument("gaussian_simulate: trials must be positive");
  if (!(log_m >= 0.0)) throw std::invalid_argument("gaussian_simulate: M must be at least 1");
  const double t = m.ratio();
  const double var = m.cond_var();
  const double sx = std::sqrt(m.var_x), sz = std::sqrt(m.var_z);
  const double c = m.mmse_coeff();
  const double dn = n;
  const double budget = dn * m.distortion;
  const double r0 = t < 1.0 ? std::sqrt(dn * (var - m.distortion)) : 0.0;
  long long codewords = 0;
  if (mode == CapMode::empirical) {
    const double mm = std::exp(log_m);
    if (mm > 1e6) throw std::invalid_argument("gaussian_simulate: empirical mode needs M <= 1e6");
    codewords = std::llround(mm);
  }
  if (mode == CapMode::lower_bound && t >= 1.0)
    throw std::invalid_argument("gaussian_simulate: the cap bound requires D < var_{X|S}");

  auto parts = map_chunks(trials, 256, threads, [&](ChunkRange range) {
    std::vector<double> out;
    std::vector<double> e(static_cast<std::size_t>(n)), y(static_cast<std::size_t>(n));
    for (std::size_t tr = range.begin; tr < range.end; ++tr) {
      Rng rng(derive_seed(seed, tr));
      double r2 = 0.0;
      for (int i = 0; i < n; ++i) {
        const double x = sx * rng.normal();
        const double s = x + sz * rng.normal();
        e[static_cast<std::size_t>(i)] = x - c * s;
        r2 += e[static_cast<std::size_t>(i)] * e[static_cast<std::size_t>(i)];
      }
      const double z = r2 / (dn * var);
      double miss = 1.0;
      if (mode == CapMode::empirical) {
        bool covered = false;
        for (long long k = 0; k < codewords && !covered; ++k) {
          double norm = 0.0;
          for (auto& v : y) {
            v = rng.normal();
            norm += v * v;
          }
          const double scale = r0 / std::sqrt(norm);
          double dist = 0.0;
          for (std::size_t i = 0; i < y.size(); ++i) {
            const double diff = e[i] - scale * y[i];
            dist += diff * diff;
          }
          covered = dist <= budget;
        }
        miss = covered ? 0.0 : 1.0;
      } else if (mode == CapMode::exact) {
        miss = pow_one_minus(log_cap_exact(n, z, t), log_m);
      } else {
        const double lo = std::max(0.0, std::sqrt(1.0 - t) - std::sqrt(t));
        const double hi = std::sqrt(1.0 - t) + std::sqrt(t);
        miss = (z < lo * lo || z > hi * hi) ? 1.0 : pow_one_minus(log_cap_lower(n, z, t), log_m);
      }
      out.push_back(miss);
    }
    return out;
  });
  double mean = 0.0, m2 = 0.0;
  for (const auto& p : parts)
    for (double v : p) {
      mean += v;
      m2 += v * v;
    }
  const double tt = static_cast<double>(trials);
  mean /= tt;
  m2 /= tt;
  BoundResult r;
  r.method = std::string("monte-carlo/") + cap_mode_name(mode);
  r.terms.push_back({"random_coding", mean, std::sqrt(std::max(m2 - mean * mean, 0.0) / tt)});
  return finish(r);
}

/// Converse with the Gaussian tilted density, evaluated exactly through the
/// chi-square law of the residual:
/// Pr[j >= ln M + gamma] - e^{-gamma}.
inline ConverseResult gaussian_converse(const GaussianModel& m, int n, double log_m, double gamma) {
  validate(m);
  if (n < 1) throw std::invalid_argument("gaussian_converse: n must be positive");
  if (!(gamma > 0.0)) throw std::invalid_argument("gaussian_converse: gamma must be positive");
  const double dn = n;
  const double base = 0.5 * dn * std::log(m.cond_var() / m.distortion) - 0.5 * dn;
  const double threshold = 2.0 * (log_m + gamma - base);
  ConverseResult r;
  r.gamma = gamma;
  r.tail = threshold <= 0.0 ? 1.0 : chi2_sf(dn, threshold);
  r.value = std::max(0.0, r.tail - std::exp(-gamma));
  r.method = "chi-square";
  return r;
}

}  // namespace fblcrd
