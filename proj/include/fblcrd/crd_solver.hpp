#pragma once

// Conditional rate-distortion function R(X;D|S) for finite alphabets.
//
// Slope convention: `slope` is the nonnegative magnitude lambda* = -dR/dD.
// The optimal test channel at slope lambda is
//
//   W(y|x,s) = q_s(y) exp(-lambda d(x,y)) / Z_s(x),
//   Z_s(x)   = sum_y q_s(y) exp(-lambda d(x,y)),
//
// where q_s = P_{Y*|S}(.|s) is the induced output law of state s.
//
// Two routes are provided and cross-checked:
//  * direct: alternating minimization over P_{Y|XS} with a single multiplier
//    on the joint distortion constraint (every state shares lambda);
//  * decomposed: independent per-state rate-distortion curves combined by an
//    equal-slope allocation of per-state distortions d_s with
//    sum_s P_S(s) d_s = D.

#include <algorithm>
#include <cmath>
#include <concepts>
#include <cstdint>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include <boost/math/tools/roots.hpp>

#include "fblcrd/core_math.hpp"
#include "fblcrd/errors.hpp"
#include "fblcrd/random.hpp"
#include "fblcrd/source_model.hpp"

namespace fblcrd {

struct SolverOptions {
  double tol = 1e-10;          // target accuracy of the rate, nats
  int max_iter = 200000;       // alternating-minimization sweeps per slope
  int max_root_iter = 200;     // slope search iterations
  double max_slope = 1e8;      // slope search gives up growing past this
  std::optional<std::uint64_t> init_seed;  // random initial output laws
  bool cross_check = true;     // solve_crd also runs the decomposed route
};

enum class CrdMethod { direct, decomposed, zero_rate };

struct CrdSolution {
  double distortion = 0.0;           // the constraint D
  double rate = 0.0;                 // R(X;D|S), nats
  std::vector<Matrix> channel;       // channel[s](x, y) = P_{Y*|XS}(y|x,s)
  Matrix induced;                    // induced(y, s) = P_{Y*|S}(y|s)
  double slope = 0.0;                // lambda* = -dR/dD >= 0
  double distortion_achieved = 0.0;  // E[d(X, Y*)]
  Vector allocation;                 // per-state distortions d_s (NaN if P_S(s)=0)
  Vector state_rate;                 // per-state I(X;Y*|S=s)
  double gap = 0.0;                  // worst primal-dual gap of the last sweep
  CrdMethod method = CrdMethod::direct;
};

/// Single-source result, S = empty.
struct RdSolution {
  double rate = 0.0;
  Matrix channel;  // channel(x, y)
  Vector output;   // q(y)
  double slope = 0.0;
  double distortion_achieved = 0.0;
  double gap = 0.0;
};

namespace detail {

/// Alternating minimization for one source at a fixed slope. `q` is the
/// output law, updated in place (warm start on entry).
struct SlopeSweep {
  double rate = 0.0;
  double distortion = 0.0;
  double gap = 0.0;
  Matrix channel;
};

/// Damped active-set Newton ascent on g(q) = sum_x P(x) ln (A q)(x) over the
/// simplex, whose maximizer is the fixed point of the alternating updates
/// (c(y) = 1 on the support, <= 1 off it). The updates alone are sublinear
/// near a slope where an output is dying out, and there the Lagrangian is
/// also flat in D, so a small gap does not pin the distortion; the Newton
/// fixed point does. The Hessian is singular once the support outgrows |X|,
/// hence the minimum-norm KKT solve. The result replaces q if its gap is
/// below max(gap, floor); returns false otherwise.
inline bool newton_polish(const Vector& px, const Matrix& a, Vector& q,
                          double& gap, double floor = -kInf) {
  const Eigen::Index nx = a.rows();
  const Eigen::Index ny = a.cols();
  auto objective = [&](const Vector& qq) {
    const Vector z = a * qq;
    double g = 0.0;
    for (Eigen::Index x = 0; x < nx; ++x) {
      if (px(x) <= 0.0) continue;
      if (!(z(x) > 0.0)) return -kInf;
      g += px(x) * std::log(z(x));
    }
    return g;
  };
  Vector cand = q / q.sum();
  std::vector<char> active(static_cast<std::size_t>(ny));
  for (Eigen::Index y = 0; y < ny; ++y) active[static_cast<std::size_t>(y)] = cand(y) > 0.0;
  Vector best = cand;
  double best_g = kInf;
  for (int it = 0; it < 100; ++it) {
    const Vector z = (a * cand).cwiseMax(1e-300);
    Vector w = Vector::Zero(nx);  // P(x) / z(x)
    for (Eigen::Index x = 0; x < nx; ++x)
      if (px(x) > 0.0) w(x) = px(x) / z(x);
    const Vector c = a.transpose() * w;
    const double g_cur = std::log(c.maxCoeff());
    if (g_cur < best_g) {
      best_g = g_cur;
      best = cand;
    }
    if (g_cur <= 1e-15) break;
    // Bring back the most underpriced output outside the support.
    Eigen::Index add = -1;
    for (Eigen::Index y = 0; y < ny; ++y)
      if (!active[static_cast<std::size_t>(y)] && c(y) > 1.0 + 1e-13 &&
          (add < 0 || c(y) > c(add)))
        add = y;
    if (add >= 0) active[static_cast<std::size_t>(add)] = 1;

    std::vector<Eigen::Index> sup;
    for (Eigen::Index y = 0; y < ny; ++y)
      if (active[static_cast<std::size_t>(y)]) sup.push_back(y);
    const auto k = static_cast<Eigen::Index>(sup.size());
    // [H 1; 1' 0] [delta; -nu] = [-c; 0], H = -A_S' diag(P / z^2) A_S.
    Matrix kkt = Matrix::Zero(k + 1, k + 1);
    Vector rhs = Vector::Zero(k + 1);
    for (Eigen::Index i = 0; i < k; ++i) {
      const Eigen::Index yi = sup[static_cast<std::size_t>(i)];
      rhs(i) = -c(yi);
      for (Eigen::Index l = 0; l < k; ++l) {
        const Eigen::Index yl = sup[static_cast<std::size_t>(l)];
        double h = 0.0;
        for (Eigen::Index x = 0; x < nx; ++x) h += w(x) * a(x, yi) * a(x, yl) / z(x);
        kkt(i, l) = -h;
      }
      kkt(i, k) = 1.0;
      kkt(k, i) = 1.0;
    }
    const Vector sol = kkt.completeOrthogonalDecomposition().solve(rhs);
    if (!sol.allFinite()) return false;
    const Vector step = sol.head(k);

    // Largest step keeping q >= 0; a blocked output leaves the support.
    double t_bound = kInf;
    Eigen::Index block_at_bound = -1;
    for (Eigen::Index i = 0; i < k; ++i) {
      const double v = cand(sup[static_cast<std::size_t>(i)]);
      if (step(i) < 0.0 && -v / step(i) < t_bound) {
        t_bound = -v / step(i);
        block_at_bound = sup[static_cast<std::size_t>(i)];
      }
    }
    if (block_at_bound >= 0 && t_bound <= 0.0) {
      active[static_cast<std::size_t>(block_at_bound)] = 0;
      cand(block_at_bound) = 0.0;
      continue;
    }
    auto take = [&](double tt) {
      Vector nq = cand;
      for (Eigen::Index i = 0; i < k; ++i)
        nq(sup[static_cast<std::size_t>(i)]) += tt * step(i);
      return Vector(nq.cwiseMax(0.0));
    };
    const double g0 = objective(cand);
    double t = std::min(1.0, t_bound);
    double g_t = objective(take(t));
    while (g_t < g0 - 1e-15 * std::abs(g0) && t > 1e-12) {
      t *= 0.5;
      g_t = objective(take(t));
    }
    // Along a nearly flat face the quadratic model undershoots badly: keep
    // going while the objective still improves, up to the boundary.
    if (t == 1.0 && t_bound < kInf) {
      const double g_b = objective(take(t_bound));
      if (g_b > g_t + 1e-14 * std::abs(g_t)) {
        t = t_bound;
        g_t = g_b;
      }
      while (t < t_bound) {
        const double t2 = std::min(2.0 * t, t_bound);
        const double g2 = objective(take(t2));
        if (!(g2 > g_t + 1e-14 * std::abs(g_t))) break;
        t = t2;
        g_t = g2;
      }
    }
    Vector next = take(t);
    Eigen::Index block = -1;
    if (t == t_bound && block_at_bound >= 0) {
      block = block_at_bound;
      next(block) = 0.0;
      active[static_cast<std::size_t>(block)] = 0;
    }
    const double moved = (next - cand).lpNorm<Eigen::Infinity>();
    cand = next / next.sum();
    if (moved <= 1e-16 && add < 0 && block < 0) break;
  }
  const Vector z = (a * cand).cwiseMax(1e-300);
  Vector c = Vector::Zero(ny);
  for (Eigen::Index x = 0; x < nx; ++x)
    if (px(x) > 0.0) c += (px(x) / z(x)) * a.row(x).transpose();
  const double g_last = std::log(c.maxCoeff());
  if (g_last < best_g) {
    best_g = g_last;
    best = cand;
  }
  if (!(best_g < std::max(gap, floor))) return false;
  q = best;
  gap = best_g;
  return true;
}

inline SlopeSweep sweep_fixed_slope(const Vector& px, const Matrix& d,
                                    double lambda, Vector& q, double gap_tol,
                                    int max_iter) {
  const Eigen::Index nx = d.rows();
  const Eigen::Index ny = d.cols();
  // Shift by the row minimum so exp() never underflows a whole row.
  const Vector d_min = d.rowwise().minCoeff();
  Matrix a(nx, ny);
  for (Eigen::Index x = 0; x < nx; ++x)
    for (Eigen::Index y = 0; y < ny; ++y)
      a(x, y) = std::exp(-lambda * (d(x, y) - d_min(x)));

  // A warm start may carry outputs that underflowed to zero at another slope;
  // the multiplicative update could never revive them.
  q = q.cwiseMax(1e-30);
  q /= q.sum();

  Vector z(nx);
  Vector c(ny);
  SlopeSweep out;
  int iter = 0;
  for (;; ++iter) {
    z = (a * q).cwiseMax(1e-300);
    c.setZero();
    for (Eigen::Index x = 0; x < nx; ++x) {
      if (px(x) <= 0.0) continue;
      c += (px(x) / z(x)) * a.row(x).transpose();
    }
    double gap = -kInf;
    for (Eigen::Index y = 0; y < ny; ++y) gap = std::max(gap, std::log(c(y)));
    out.gap = gap;
    q = q.cwiseProduct(c);
    q /= q.sum();
    if (gap <= gap_tol) break;
    if (iter % 64 == 63 && gap < 1e-2 && newton_polish(px, a, q, gap)) {
      out.gap = gap;
      if (gap <= gap_tol) break;
      // Outputs Newton zeroed out must stay revivable by the updates.
      q = q.cwiseMax(1e-30);
      q /= q.sum();
    }
    if (iter >= max_iter) {
      throw ConvergenceError("alternating minimization did not converge at slope " +
                                 std::to_string(lambda),
                             gap);
    }
  }

  if (newton_polish(px, a, q, out.gap, 1e-15)) out.gap = std::max(out.gap, 0.0);
  z = (a * q).cwiseMax(1e-300);
  out.channel.resize(nx, ny);
  for (Eigen::Index x = 0; x < nx; ++x)
    out.channel.row(x) = (q.transpose().cwiseProduct(a.row(x))) / z(x);
  const Vector induced = out.channel.transpose() * px;
  double rate = 0.0;
  double dist = 0.0;
  for (Eigen::Index x = 0; x < nx; ++x) {
    if (px(x) <= 0.0) continue;
    for (Eigen::Index y = 0; y < ny; ++y) {
      const double w = out.channel(x, y);
      if (w <= 0.0) continue;
      rate += px(x) * w * std::log(w / induced(y));
      dist += px(x) * w * d(x, y);
    }
  }
  out.rate = std::max(rate, 0.0);
  out.distortion = dist;
  // q stays the law that defines the channel, so ln(W/q) + lambda d is exact;
  // it differs from `induced` only on outputs that are dying out.
  return out;
}

inline Vector initial_output(Eigen::Index ny, const SolverOptions& opts,
                             std::uint64_t stream) {
  if (!opts.init_seed) return Vector::Constant(ny, 1.0 / static_cast<double>(ny));
  Rng rng(derive_seed(*opts.init_seed, stream));
  const auto w = rng.dirichlet_flat(static_cast<std::size_t>(ny));
  return Eigen::Map<const Vector>(w.data(), ny);
}

/// Weighted family of sources sharing one slope: the direct route when the
/// weights are P_S, a plain rate-distortion problem when there is one member.
struct SharedSlopeProblem {
  std::vector<Vector> sources;  // per-member P_X
  std::vector<double> weights;
  const Matrix* d = nullptr;
};

struct SharedSlopeResult {
  double slope = 0.0;
  std::vector<SlopeSweep> sweeps;
  std::vector<Vector> outputs;
  double distortion = 0.0;
  double rate = 0.0;
  double gap = 0.0;
};

inline SharedSlopeResult sweep_all(const SharedSlopeProblem& prob, double lambda,
                                   std::vector<Vector>& q, double gap_tol,
                                   int max_iter) {
  SharedSlopeResult r;
  r.slope = lambda;
  r.gap = -kInf;
  for (std::size_t k = 0; k < prob.sources.size(); ++k) {
    auto sw = sweep_fixed_slope(prob.sources[k], *prob.d, lambda, q[k], gap_tol,
                                max_iter);
    r.distortion += prob.weights[k] * sw.distortion;
    r.rate += prob.weights[k] * sw.rate;
    r.gap = std::max(r.gap, sw.gap);
    r.sweeps.push_back(std::move(sw));
  }
  r.outputs = q;
  return r;
}

inline SharedSlopeResult time_share(const SharedSlopeProblem& prob,
                                    const SharedSlopeResult& lo,
                                    const SharedSlopeResult& hi, double target) {
  const double theta = (hi.distortion - target) / (hi.distortion - lo.distortion);
  SharedSlopeResult r;
  r.slope = 0.5 * (lo.slope + hi.slope);
  r.gap = std::max(lo.gap, hi.gap);
  const Matrix& d = *prob.d;
  for (std::size_t k = 0; k < prob.sources.size(); ++k) {
    const Vector& px = prob.sources[k];
    SlopeSweep sw;
    sw.gap = r.gap;
    sw.channel = theta * lo.sweeps[k].channel + (1.0 - theta) * hi.sweeps[k].channel;
    const Vector induced = sw.channel.transpose() * px;
    for (Eigen::Index x = 0; x < d.rows(); ++x) {
      if (px(x) <= 0.0) continue;
      for (Eigen::Index y = 0; y < d.cols(); ++y) {
        const double w = sw.channel(x, y);
        if (w <= 0.0) continue;
        sw.rate += px(x) * w * std::log(w / induced(y));
        sw.distortion += px(x) * w * d(x, y);
      }
    }
    sw.rate = std::max(sw.rate, 0.0);
    r.distortion += prob.weights[k] * sw.distortion;
    r.rate += prob.weights[k] * sw.rate;
    r.outputs.push_back(theta * lo.outputs[k] + (1.0 - theta) * hi.outputs[k]);
    r.sweeps.push_back(std::move(sw));
  }
  return r;
}

/// Finds the slope whose optimal channels meet `target` with equality and
/// returns the sweep there. Requires floor <= target < zero-rate distortion.
inline SharedSlopeResult solve_shared_slope(const SharedSlopeProblem& prob,
                                            double target,
                                            const SolverOptions& opts) {
  const double gap_tol = opts.tol / 10.0;
  const int max_iter = opts.max_iter;
  std::vector<Vector> q;
  for (std::size_t k = 0; k < prob.sources.size(); ++k)
    q.push_back(initial_output(prob.d->cols(), opts, k));

  auto eval = [&](double lambda) {
    return sweep_all(prob, lambda, q, gap_tol, max_iter);
  };

  double lo = 0.0;
  double hi = 1.0;
  double f_lo = kInf;  // distortion excess at lo; positive
  SharedSlopeResult at_hi = eval(hi);
  while (at_hi.distortion > target) {
    lo = hi;
    f_lo = at_hi.distortion - target;
    hi *= 2.0;
    if (hi > opts.max_slope) {
      // target sits at the floor: return the steepest slope we tried.
      return at_hi;
    }
    at_hi = eval(hi);
  }
  if (at_hi.distortion == target) return at_hi;

  SharedSlopeResult best = at_hi;
  double best_err = std::abs(at_hi.distortion - target);
  // Tightest sweeps on either side of the target, for time sharing.
  SharedSlopeResult below = at_hi;
  std::optional<SharedSlopeResult> above;
  auto g = [&](double lambda) {
    auto r = eval(lambda);
    const double err = r.distortion - target;
    // Keep the closest feasible point (distortion <= target + tiny).
    if (std::abs(err) < best_err && err <= 1e-12) {
      best_err = std::abs(err);
      best = r;
    }
    if (err <= 0.0 && r.distortion > below.distortion) below = r;
    if (err > 0.0 && (!above || r.distortion < above->distortion)) above = r;
    return err;
  };
  std::uintmax_t iters = static_cast<std::uintmax_t>(opts.max_root_iter);
  auto tolerance = [&](double a, double b) {
    return std::abs(b - a) <= 4e-16 * std::max(1.0, std::abs(b)) || best_err <= 1e-14;
  };
  if (lo == 0.0) f_lo = eval(0.0).distortion - target;
  const double f_hi = at_hi.distortion - target;
  try {
    boost::math::tools::toms748_solve(g, lo, hi, f_lo, f_hi, tolerance, iters);
  } catch (const boost::math::evaluation_error&) {
  }
  if (best_err > 1e-9 && above &&
      std::abs(above->slope - below.slope) <=
          1e-10 * std::max(1.0, std::abs(below.slope))) {
    // D(lambda) jumps across a slope window narrower than we can resolve: the
    // curve is a line there, reached by mixing the two end channels.
    best = time_share(prob, below, *above, target);
    best_err = std::abs(best.distortion - target);
  }
  if (best_err > 1e-9) {
    throw ConvergenceError("slope search failed to meet the distortion constraint",
                           best_err);
  }
  return best;
}

}  // namespace detail

/// Classical rate-distortion function R(P_X, D) (no side information).
inline RdSolution solve_rd_per_state(const Vector& px, const DistortionSpec& dist,
                                     double distortion,
                                     const SolverOptions& opts = {}) {
  if (!(opts.tol > 0.0)) throw std::invalid_argument("tolerance must be positive");
  const Matrix& d = dist.d;
  const Vector d_min_x = d.rowwise().minCoeff();
  const double floor = px.dot(d_min_x);
  if (distortion < floor - 1e-12) throw InfeasibleDistortion(distortion, floor);
  const Vector per_y = d.transpose() * px;
  Eigen::Index best_y = 0;
  const double zero_rate = per_y.minCoeff(&best_y);

  RdSolution out;
  if (distortion >= zero_rate) {
    out.channel = Matrix::Zero(d.rows(), d.cols());
    out.channel.col(best_y).setOnes();
    out.output = Vector::Zero(d.cols());
    out.output(best_y) = 1.0;
    out.distortion_achieved = zero_rate;
    return out;
  }
  detail::SharedSlopeProblem prob{{px}, {1.0}, &d};
  auto r = detail::solve_shared_slope(prob, distortion, opts);
  out.rate = r.rate;
  out.channel = r.sweeps[0].channel;
  out.output = r.outputs[0];
  out.slope = r.slope;
  out.distortion_achieved = r.distortion;
  out.gap = r.gap;
  return out;
}

namespace detail {

inline CrdSolution zero_rate_solution(const Instance& inst, double distortion) {
  CrdSolution sol;
  sol.method = CrdMethod::zero_rate;
  sol.distortion = distortion;
  const int ns = inst.s_size();
  sol.induced = Matrix::Zero(inst.y_size(), ns);
  sol.allocation = Vector::Constant(ns, std::numeric_limits<double>::quiet_NaN());
  sol.state_rate = Vector::Zero(ns);
  const double slack = distortion - inst.zero_rate_distortion();
  for (int s = 0; s < ns; ++s) {
    const int y_star = inst.state_zero_rate_output()[static_cast<std::size_t>(s)];
    Matrix w = Matrix::Zero(inst.x_size(), inst.y_size());
    w.col(y_star).setOnes();
    sol.channel.push_back(std::move(w));
    sol.induced(y_star, s) = 1.0;
    if (inst.p_s()(s) > 0.0) sol.allocation(s) = inst.state_zero_rate()(s) + slack;
  }
  sol.distortion_achieved = inst.zero_rate_distortion();
  return sol;
}

inline void check_distortion(const Instance& inst, double distortion,
                             const SolverOptions& opts) {
  if (!(opts.tol > 0.0)) throw std::invalid_argument("tolerance must be positive");
  if (!std::isfinite(distortion)) throw std::invalid_argument("distortion must be finite");
  if (distortion < inst.distortion_floor() - 1e-12)
    throw InfeasibleDistortion(distortion, inst.distortion_floor());
}

}  // namespace detail

/// Direct route: one slope shared by all side-information states.
inline CrdSolution solve_crd_direct(const Instance& inst, double distortion,
                                    const SolverOptions& opts = {}) {
  detail::check_distortion(inst, distortion, opts);
  if (distortion >= inst.zero_rate_distortion())
    return detail::zero_rate_solution(inst, distortion);

  const int ns = inst.s_size();
  detail::SharedSlopeProblem prob;
  prob.d = &inst.d();
  std::vector<int> active;
  for (int s = 0; s < ns; ++s) {
    if (inst.p_s()(s) <= 0.0) continue;  // contributes to no expectation
    active.push_back(s);
    prob.sources.push_back(inst.conditional().col(s));
    prob.weights.push_back(inst.p_s()(s));
  }
  auto r = detail::solve_shared_slope(prob, distortion, opts);

  CrdSolution sol;
  sol.method = CrdMethod::direct;
  sol.distortion = distortion;
  sol.slope = r.slope;
  sol.rate = r.rate;
  sol.distortion_achieved = r.distortion;
  sol.gap = r.gap;
  sol.induced = Matrix::Constant(inst.y_size(), ns, 1.0 / inst.y_size());
  sol.allocation = Vector::Constant(ns, std::numeric_limits<double>::quiet_NaN());
  sol.state_rate = Vector::Zero(ns);
  sol.channel.assign(static_cast<std::size_t>(ns),
                     Matrix::Constant(inst.x_size(), inst.y_size(), 1.0 / inst.y_size()));
  for (std::size_t k = 0; k < active.size(); ++k) {
    const int s = active[k];
    sol.channel[static_cast<std::size_t>(s)] = r.sweeps[k].channel;
    sol.induced.col(s) = r.outputs[k];
    sol.allocation(s) = r.sweeps[k].distortion;
    sol.state_rate(s) = r.sweeps[k].rate;
  }
  return sol;
}

//----------------------------------------------------------------------------
// Distortion allocation across side-information states
//----------------------------------------------------------------------------

/// A convex, nonincreasing per-state rate-distortion curve, queried through
/// its slope parametrization.
template <class C>
concept RdCurve = requires(const C& c, double lambda) {
  { c.distortion_at_slope(lambda) } -> std::convertible_to<double>;
  { c.floor() } -> std::convertible_to<double>;
  { c.zero_rate() } -> std::convertible_to<double>;
};

struct Allocation {
  Vector d;            // d_s; NaN where P_S(s) = 0
  double slope = 0.0;  // common slope of the interior states
};

/// Minimizes sum_s P_S(s) R_s(d_s) subject to sum_s P_S(s) d_s = D by matching
/// slopes: every state with floor_s < d_s < zero_rate_s sits at the same
/// lambda. States with P_S(s) = 0 are excluded and reported as NaN.
template <RdCurve Curve>
Allocation allocate_distortion(const std::vector<Curve>& curves, const Vector& p_s,
                               double distortion) {
  const auto ns = static_cast<Eigen::Index>(curves.size());
  if (p_s.size() != ns) throw std::invalid_argument("allocate_distortion: size mismatch");
  double floor = 0.0;
  double ceiling = 0.0;
  for (Eigen::Index s = 0; s < ns; ++s) {
    if (p_s(s) <= 0.0) continue;
    floor += p_s(s) * curves[static_cast<std::size_t>(s)].floor();
    ceiling += p_s(s) * curves[static_cast<std::size_t>(s)].zero_rate();
  }
  if (distortion < floor - 1e-12) throw InfeasibleDistortion(distortion, floor);

  Allocation out;
  out.d = Vector::Constant(ns, std::numeric_limits<double>::quiet_NaN());
  if (distortion >= ceiling) {
    const double slack = distortion - ceiling;
    for (Eigen::Index s = 0; s < ns; ++s)
      if (p_s(s) > 0.0) out.d(s) = curves[static_cast<std::size_t>(s)].zero_rate() + slack;
    return out;
  }

  auto total = [&](double lambda, Vector* per_state) {
    double t = 0.0;
    for (Eigen::Index s = 0; s < ns; ++s) {
      if (p_s(s) <= 0.0) continue;
      const double ds = curves[static_cast<std::size_t>(s)].distortion_at_slope(lambda);
      if (per_state) (*per_state)(s) = ds;
      t += p_s(s) * ds;
    }
    return t;
  };

  // Per-state distortions are kept from the evaluation that set each bracket
  // end: near a straight piece a repeated query may land elsewhere on it.
  double lo = 0.0;
  double hi = 1.0;
  Vector d_lo = out.d;
  Vector d_hi = out.d;
  double t_lo = total(lo, &d_lo);
  double t_hi = total(hi, &d_hi);
  while (t_hi > distortion) {
    lo = hi;
    t_lo = t_hi;
    d_lo = d_hi;
    hi *= 2.0;
    if (hi > 1e8) break;
    t_hi = total(hi, &d_hi);
  }
  Vector d_mid = out.d;
  for (int iter = 0; iter < 200 && hi - lo > 1e-15 * std::max(1.0, hi); ++iter) {
    const double mid = 0.5 * (lo + hi);
    const double t_mid = total(mid, &d_mid);
    if (t_mid > distortion) {
      lo = mid;
      t_lo = t_mid;
      d_lo = d_mid;
    } else {
      hi = mid;
      t_hi = t_mid;
      d_hi = d_mid;
    }
  }
  out.slope = 0.5 * (lo + hi);
  // Interpolate between the bracket ends so the budget holds exactly. A state
  // whose curve has a straight piece jumps across the bracket and takes the
  // residual; the others barely move.
  const double theta = t_lo > t_hi ? std::clamp((distortion - t_hi) / (t_lo - t_hi), 0.0, 1.0)
                                   : 0.0;
  for (Eigen::Index s = 0; s < ns; ++s) {
    if (p_s(s) <= 0.0) continue;
    const auto& c = curves[static_cast<std::size_t>(s)];
    out.d(s) = std::clamp(theta * d_lo(s) + (1.0 - theta) * d_hi(s), c.floor(), c.zero_rate());
  }
  return out;
}

/// Per-state curve backed by the alternating-minimization solver.
class SolverCurve {
 public:
  SolverCurve(Vector px, const Matrix& d, SolverOptions opts)
      : px_(std::move(px)), d_(&d), opts_(opts) {
    floor_ = px_.dot(d.rowwise().minCoeff());
    zero_rate_ = (d.transpose() * px_).minCoeff();
    q_ = detail::initial_output(d.cols(), opts_, 0);
  }

  double floor() const { return floor_; }
  double zero_rate() const { return zero_rate_; }

  double distortion_at_slope(double lambda) const {
    if (lambda <= 0.0) return zero_rate_;
    auto sw = detail::sweep_fixed_slope(px_, *d_, lambda, q_, opts_.tol / 10.0,
                                        opts_.max_iter);
    return std::min(sw.distortion, zero_rate_);
  }

  const Vector& source() const { return px_; }

 private:
  Vector px_;
  const Matrix* d_;
  SolverOptions opts_;
  double floor_ = 0.0;
  double zero_rate_ = 0.0;
  mutable Vector q_;  // warm start across slope queries
};

/// Decomposed route: per-state curves, equal-slope allocation, then an
/// independent constrained solve per state at its allocated distortion.
inline CrdSolution solve_crd_decomposed(const Instance& inst, double distortion,
                                        const SolverOptions& opts = {}) {
  detail::check_distortion(inst, distortion, opts);
  if (distortion >= inst.zero_rate_distortion())
    return detail::zero_rate_solution(inst, distortion);

  const int ns = inst.s_size();
  std::vector<SolverCurve> curves;
  curves.reserve(static_cast<std::size_t>(ns));
  for (int s = 0; s < ns; ++s) curves.emplace_back(inst.conditional().col(s), inst.d(), opts);
  const Allocation alloc = allocate_distortion(curves, inst.p_s(), distortion);

  CrdSolution sol;
  sol.method = CrdMethod::decomposed;
  sol.distortion = distortion;
  sol.slope = alloc.slope;
  sol.allocation = alloc.d;
  sol.state_rate = Vector::Zero(ns);
  sol.induced = Matrix::Constant(inst.y_size(), ns, 1.0 / inst.y_size());
  sol.channel.assign(static_cast<std::size_t>(ns),
                     Matrix::Constant(inst.x_size(), inst.y_size(), 1.0 / inst.y_size()));
  for (int s = 0; s < ns; ++s) {
    if (inst.p_s()(s) <= 0.0) continue;
    const auto rd = solve_rd_per_state(inst.conditional().col(s), inst.distortion(),
                                       alloc.d(s), opts);
    sol.channel[static_cast<std::size_t>(s)] = rd.channel;
    sol.induced.col(s) = rd.output;
    sol.state_rate(s) = rd.rate;
    sol.rate += inst.p_s()(s) * rd.rate;
    sol.distortion_achieved += inst.p_s()(s) * rd.distortion_achieved;
    sol.gap = std::max(sol.gap, rd.gap);
  }
  return sol;
}

/// R(X;D|S) by the direct route, cross-checked against the decomposed route
/// when `opts.cross_check` is set (disagreement beyond 10 tol throws).
inline CrdSolution solve_crd(const Instance& inst, double distortion,
                             const SolverOptions& opts = {}) {
  CrdSolution direct = solve_crd_direct(inst, distortion, opts);
  if (opts.cross_check && direct.method == CrdMethod::direct) {
    const CrdSolution other = solve_crd_decomposed(inst, distortion, opts);
    const double diff = std::abs(direct.rate - other.rate);
    if (diff > 10.0 * opts.tol) {
      throw ConvergenceError("direct and decomposed solutions disagree", diff);
    }
  }
  return direct;
}

//----------------------------------------------------------------------------
// Gradient with respect to the joint pmf
//----------------------------------------------------------------------------

struct GradientResult {
  Matrix gradient;                   // (x, s); NaN where the perturbation failed
  std::vector<std::string> diagnostics;
};

namespace detail {

// R extended to an unnormalized mass vector m P: both the rate and the
// distortion budget scale with the total mass, so R(m P) = m R(P).
inline double rate_of_mass(const Matrix& mass, const DistortionSpec& dist,
                           double distortion, const SolverOptions& opts) {
  const double total = mass.sum();
  JointSource src;
  src.pmf = mass / total;
  const Instance inst = validate(src, dist);
  return total * solve_crd_direct(inst, distortion, opts).rate;
}

}  // namespace detail

/// Finite-difference estimate of dR/dP_XS(a, b). The mass at (a, b) is moved
/// by +-h without renormalizing the other entries; R is extended to
/// unnormalized arguments 1-homogeneously (see detail::rate_of_mass).
inline GradientResult rd_gradient(const Instance& inst, double distortion, double h,
                                  bool central = true, SolverOptions opts = {}) {
  if (!(h >= 1e-7 && h <= 1e-3)) {
    throw std::invalid_argument("rd_gradient: step must lie in [1e-7, 1e-3]");
  }
  opts.cross_check = false;
  const DistortionSpec dist = inst.distortion();
  const double base = solve_crd_direct(inst, distortion, opts).rate;

  GradientResult out;
  out.gradient = Matrix::Constant(inst.x_size(), inst.s_size(),
                                  std::numeric_limits<double>::quiet_NaN());
  for (int a = 0; a < inst.x_size(); ++a) {
    for (int b = 0; b < inst.s_size(); ++b) {
      try {
        Matrix plus = inst.pmf();
        plus(a, b) += h;
        const double r_plus = detail::rate_of_mass(plus, dist, distortion, opts);
        if (central && inst.pmf(a, b) >= h) {
          Matrix minus = inst.pmf();
          minus(a, b) -= h;
          const double r_minus = detail::rate_of_mass(minus, dist, distortion, opts);
          out.gradient(a, b) = (r_plus - r_minus) / (2.0 * h);
        } else {
          out.gradient(a, b) = (r_plus - base) / h;
        }
      } catch (const std::exception& e) {
        out.diagnostics.push_back("entry (" + std::to_string(a) + ", " +
                                  std::to_string(b) + "): " + e.what());
      }
    }
  }
  return out;
}

/// Samples R(D) on a grid (rate and slope only; dispersion is filled in by the
/// tilted-density layer).
struct RdCurvePoint {
  double distortion = 0.0;
  double rate = 0.0;
  double slope = 0.0;
  double dispersion = 0.0;
};

}  // namespace fblcrd
