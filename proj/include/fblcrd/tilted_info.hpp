#pragma once

// Conditional information densities and the conditional D-tilted information
// density
//
//   j(x, D | s) = -ln sum_y P_{Y*|S}(y|s) exp(lambda* D - lambda* d(x, y)),
//
// evaluated with the nonnegative slope lambda* = -dR/dD stored in
// CrdSolution. Its mean is R(X;D|S) and its variance is the dispersion V.

#include <cmath>
#include <cstdint>
#include <limits>
#include <string>
#include <vector>

#include "fblcrd/core_math.hpp"
#include "fblcrd/crd_solver.hpp"
#include "fblcrd/parallel.hpp"
#include "fblcrd/random.hpp"
#include "fblcrd/source_model.hpp"

namespace fblcrd {

struct TiltedField {
  Matrix table;          // table(x, s) = j(x, D | s), nats
  Matrix weights;        // P_XS used for the moments
  double distortion = 0.0;
  double slope = 0.0;    // lambda*, copied from the solution
  double mean = 0.0;     // E[j]
  double variance = 0.0; // V = var j
  double third_abs = 0.0;  // E|j - E j|^3
  Vector state_mean;     // E[j | S = s] = R(P_{X|S}(.|s), d_s)
  Vector state_var;      // V_s = var(j | S = s)
};

/// Recomputes the moments of `field.table` under `field.weights`.
inline void refresh_moments(TiltedField& field) {
  const Matrix& p = field.weights;
  const Matrix& j = field.table;
  field.mean = p.cwiseProduct(j).sum();
  double var = 0.0;
  double abs3 = 0.0;
  for (Eigen::Index x = 0; x < p.rows(); ++x) {
    for (Eigen::Index s = 0; s < p.cols(); ++s) {
      if (p(x, s) <= 0.0) continue;
      const double c = j(x, s) - field.mean;
      var += p(x, s) * c * c;
      abs3 += p(x, s) * std::abs(c) * c * c;
    }
  }
  field.variance = var;
  field.third_abs = abs3;

  const auto ns = p.cols();
  field.state_mean = Vector::Zero(ns);
  field.state_var = Vector::Zero(ns);
  for (Eigen::Index s = 0; s < ns; ++s) {
    const double ps = p.col(s).sum();
    if (ps <= 0.0) continue;
    double m = 0.0;
    for (Eigen::Index x = 0; x < p.rows(); ++x) m += p(x, s) * j(x, s);
    m /= ps;
    double v = 0.0;
    for (Eigen::Index x = 0; x < p.rows(); ++x) {
      if (p(x, s) <= 0.0) continue;
      const double c = j(x, s) - m;
      v += p(x, s) * c * c;
    }
    field.state_mean(s) = m;
    field.state_var(s) = v / ps;
  }
}

/// j(x, D | s) for every (x, s). States with P_S(s) = 0 carry no weight and
/// are reported as 0. In the zero-rate regime (slope 0) the table is all zeros.
inline TiltedField tilted_density(const CrdSolution& sol, const Instance& inst) {
  if (sol.induced.rows() != inst.y_size() || sol.induced.cols() != inst.s_size()) {
    throw std::invalid_argument(
        "tilted_density: output law does not match the distortion alphabet");
  }
  TiltedField f;
  f.weights = inst.pmf();
  f.distortion = sol.distortion;
  f.slope = sol.slope;
  f.table = Matrix::Zero(inst.x_size(), inst.s_size());
  if (sol.slope > 0.0) {
    const double lambda = sol.slope;
    for (int s = 0; s < inst.s_size(); ++s) {
      if (inst.p_s()(s) <= 0.0) continue;
      for (int x = 0; x < inst.x_size(); ++x) {
        // log-sum-exp over y with the exponent lambda (D - d(x,y)).
        double top = -kInf;
        for (int y = 0; y < inst.y_size(); ++y)
          if (sol.induced(y, s) > 0.0)
            top = std::max(top, std::log(sol.induced(y, s)) +
                                    lambda * (sol.distortion - inst.d(x, y)));
        double acc = 0.0;
        for (int y = 0; y < inst.y_size(); ++y)
          if (sol.induced(y, s) > 0.0)
            acc += std::exp(std::log(sol.induced(y, s)) +
                            lambda * (sol.distortion - inst.d(x, y)) - top);
        f.table(x, s) = -(top + std::log(acc));
      }
    }
  }
  refresh_moments(f);
  return f;
}

struct InfoDensities {
  std::vector<Matrix> i_xy_given_s;  // [s](x, y) = ln W(y|x,s) / P_{Y|S}(y|s)
  Matrix i_x_given_s;                // (x, s) = -ln P_{X|S}(x|s); +inf off support
};

inline InfoDensities info_densities(const CrdSolution& sol, const Instance& inst) {
  InfoDensities out;
  out.i_x_given_s = Matrix::Constant(inst.x_size(), inst.s_size(), kInf);
  for (int s = 0; s < inst.s_size(); ++s) {
    Matrix m = Matrix::Constant(inst.x_size(), inst.y_size(), -kInf);
    for (int x = 0; x < inst.x_size(); ++x) {
      const double c = inst.conditional()(x, s);
      if (c > 0.0) out.i_x_given_s(x, s) = -std::log(c);
      for (int y = 0; y < inst.y_size(); ++y) {
        const double w = sol.channel[static_cast<std::size_t>(s)](x, y);
        const double q = sol.induced(y, s);
        if (w > 0.0 && q > 0.0) m(x, y) = std::log(w / q);
      }
    }
    out.i_xy_given_s.push_back(std::move(m));
  }
  return out;
}

//----------------------------------------------------------------------------
// Structural checks
//----------------------------------------------------------------------------

struct Lemma1Report {
  double identity_slack = 0.0;   // max |j - (i + lambda d - lambda D)| on the support
  double mean_slack = 0.0;       // |E[j] - R|
  double tilt_max = 0.0;         // max over random P_{Y|S} of E[exp(...)]
  double tilt_at_optimum = 0.0;  // the same expectation at P_{Y*|S}
  int trials = 0;
  std::vector<std::string> failures;
  bool ok() const { return failures.empty(); }
};

inline constexpr double kIdentityTolerance = 1e-8;
inline constexpr double kMeanTolerance = 1e-8;
inline constexpr double kTiltTolerance = 1e-9;

namespace detail {

// E[exp(lambda D - lambda d(X, Y) + j(X, D | S))] with Y ~ out(., S).
inline double tilt_expectation(const TiltedField& field, const Instance& inst,
                               const Matrix& out) {
  double e = 0.0;
  for (int x = 0; x < inst.x_size(); ++x) {
    for (int s = 0; s < inst.s_size(); ++s) {
      const double p = inst.pmf(x, s);
      if (p <= 0.0) continue;
      for (int y = 0; y < inst.y_size(); ++y) {
        e += p * out(y, s) *
             std::exp(field.slope * (field.distortion - inst.d(x, y)) + field.table(x, s));
      }
    }
  }
  return e;
}

}  // namespace detail

/// Checks the three structural properties of the tilted density:
///  (1) j = i_{X;Y*|S} + lambda d - lambda D on the support of P_{Y*|XS};
///  (2) E[j] = R;
///  (3) E[exp(lambda D - lambda d(X,Y) + j)] <= 1 for P_{Y|S} drawn from a flat
///      Dirichlet, `trials` times.
inline Lemma1Report verify_lemma1(const TiltedField& field, const CrdSolution& sol,
                                  const Instance& inst, int trials,
                                  std::uint64_t seed, unsigned threads = 1) {
  Lemma1Report rep;
  rep.trials = trials;
  const double mean = inst.pmf().cwiseProduct(field.table).sum();
  rep.mean_slack = std::abs(mean - sol.rate);

  const InfoDensities dens = info_densities(sol, inst);
  for (int s = 0; s < inst.s_size(); ++s) {
    for (int x = 0; x < inst.x_size(); ++x) {
      if (inst.pmf(x, s) <= 0.0) continue;
      for (int y = 0; y < inst.y_size(); ++y) {
        if (sol.channel[static_cast<std::size_t>(s)](x, y) <= 1e-300) continue;
        const double rhs = dens.i_xy_given_s[static_cast<std::size_t>(s)](x, y) +
                           sol.slope * (inst.d(x, y) - sol.distortion);
        rep.identity_slack = std::max(rep.identity_slack, std::abs(field.table(x, s) - rhs));
      }
    }
  }

  rep.tilt_at_optimum = detail::tilt_expectation(field, inst, sol.induced);
  const auto per_trial = map_chunks(
      static_cast<std::size_t>(std::max(trials, 0)), 16, threads, [&](ChunkRange r) {
        double worst = -kInf;
        for (std::size_t t = r.begin; t < r.end; ++t) {
          Rng rng(derive_seed(seed, t));
          Matrix out(inst.y_size(), inst.s_size());
          for (int s = 0; s < inst.s_size(); ++s) {
            const auto w = rng.dirichlet_flat(static_cast<std::size_t>(inst.y_size()));
            for (int y = 0; y < inst.y_size(); ++y) out(y, s) = w[static_cast<std::size_t>(y)];
          }
          worst = std::max(worst, detail::tilt_expectation(field, inst, out));
        }
        return worst;
      });
  rep.tilt_max = rep.tilt_at_optimum;
  for (double w : per_trial) rep.tilt_max = std::max(rep.tilt_max, w);

  if (rep.identity_slack > kIdentityTolerance)
    rep.failures.push_back("identity j = i + lambda d - lambda D violated by " +
                           std::to_string(rep.identity_slack));
  if (rep.mean_slack > kMeanTolerance)
    rep.failures.push_back("E[j] differs from R by " + std::to_string(rep.mean_slack));
  if (rep.tilt_max > 1.0 + kTiltTolerance)
    rep.failures.push_back("tilted expectation exceeds 1 by " +
                           std::to_string(rep.tilt_max - 1.0));
  return rep;
}

//----------------------------------------------------------------------------
// Dispersion
//----------------------------------------------------------------------------

struct Dispersion {
  double v = 0.0;                // var j
  double expected_state_var = 0.0;  // E[V_S]
  double state_rate_var = 0.0;      // var[R(P_{X|S}(.|S), d_S)]
};

/// V together with its law-of-total-variance split. Throws if the two routes
/// disagree beyond 1e-10.
inline Dispersion dispersion_v(const TiltedField& field) {
  Dispersion out;
  const Matrix& p = field.weights;
  const Matrix& j = field.table;
  double second = 0.0;
  for (Eigen::Index x = 0; x < p.rows(); ++x)
    for (Eigen::Index s = 0; s < p.cols(); ++s)
      if (p(x, s) > 0.0) second += p(x, s) * j(x, s) * j(x, s);
  const double mean = p.cwiseProduct(j).sum();
  out.v = std::max(second - mean * mean, 0.0);

  const Vector p_s = p.colwise().sum().transpose();
  out.expected_state_var = p_s.dot(field.state_var);
  const double m = p_s.dot(field.state_mean);
  for (Eigen::Index s = 0; s < p_s.size(); ++s) {
    const double c = field.state_mean(s) - m;
    out.state_rate_var += p_s(s) * c * c;
  }
  const double split = out.expected_state_var + out.state_rate_var;
  if (std::abs(split - out.v) > 1e-10 * std::max(1.0, out.v)) {
    throw ConvergenceError("total-variance decomposition of V is inconsistent",
                           std::abs(split - out.v));
  }
  return out;
}

//----------------------------------------------------------------------------
// Second-order limit
//----------------------------------------------------------------------------

struct SecondOrderLimit {
  enum class Kind { plus_infinity, finite, minus_infinity };
  Kind kind = Kind::finite;
  double value = 0.0;  // meaningful when kind == finite
};

/// L*(eps, D, kappa): +inf below the rate-distortion function, sqrt(V) Q^{-1}(eps)
/// at it, -inf above it. `kappa` equal to `rate` within 1e-12 counts as equal.
inline SecondOrderLimit second_order_classifier(double kappa, double rate, double v,
                                                double eps) {
  if (v < 0.0) throw std::invalid_argument("second_order_classifier: V < 0");
  if (std::abs(kappa - rate) <= 1e-12) {
    return {SecondOrderLimit::Kind::finite, std::sqrt(v) * gaussian_q_inv(eps)};
  }
  if (kappa < rate) return {SecondOrderLimit::Kind::plus_infinity, kInf};
  return {SecondOrderLimit::Kind::minus_infinity, -kInf};
}

/// R(D) and V(D) on a distortion grid.
inline std::vector<RdCurvePoint> rd_curve(const Instance& inst,
                                          const std::vector<double>& grid,
                                          const SolverOptions& opts = {}) {
  std::vector<RdCurvePoint> out;
  out.reserve(grid.size());
  for (double dist : grid) {
    const auto sol = solve_crd(inst, dist, opts);
    const auto field = tilted_density(sol, inst);
    out.push_back({dist, sol.rate, sol.slope, field.variance});
  }
  return out;
}

}  // namespace fblcrd
