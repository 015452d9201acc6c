#pragma once

// Sources where (X_i, S_i) is a stationary, irreducible, aperiodic Markov
// chain on K = |X| |S| states, indexed u = x * s_size + s.
//
// The per-letter tilted density j(u) is the one of the stationary marginal
// pi_XS. With mu = E_pi[j]:
//   cov_k  = sum_u pi(u) j(u) (Xi^k j)(u) - mu^2
//   V_n    = cov_0 + (2/n) sum_{k<n} (n - k) cov_k
//   V_inf  = cov_0 + 2 sum_{k>=1} cov_k
// V_inf also equals pi . (j o W j) - mu^2 with W = U diag(1, (1+l)/(1-l)) U^{-1}
// for Xi = U diag(1, l_2, ...) U^{-1}.

#include <algorithm>
#include <cmath>
#include <complex>
#include <cstdint>
#include <numeric>
#include <optional>
#include <queue>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <Eigen/Eigenvalues>

#include "fblcrd/core_math.hpp"
#include "fblcrd/crd_solver.hpp"
#include "fblcrd/errors.hpp"
#include "fblcrd/fbl_bounds.hpp"
#include "fblcrd/lattice.hpp"
#include "fblcrd/model_io.hpp"
#include "fblcrd/parallel.hpp"
#include "fblcrd/random.hpp"
#include "fblcrd/source_model.hpp"
#include "fblcrd/tilted_info.hpp"

namespace fblcrd {

inline constexpr double kStationaryResidual = 1e-12;

namespace detail {

inline std::vector<int> reachable(const Matrix& xi, int from, bool forward) {
  const auto k = static_cast<int>(xi.rows());
  std::vector<int> level(static_cast<std::size_t>(k), -1);
  std::queue<int> q;
  level[static_cast<std::size_t>(from)] = 0;
  q.push(from);
  while (!q.empty()) {
    const int u = q.front();
    q.pop();
    for (int v = 0; v < k; ++v) {
      const double w = forward ? xi(u, v) : xi(v, u);
      if (w > 0.0 && level[static_cast<std::size_t>(v)] < 0) {
        level[static_cast<std::size_t>(v)] = level[static_cast<std::size_t>(u)] + 1;
        q.push(v);
      }
    }
  }
  return level;
}

}  // namespace detail

/// Checks row-stochasticity, irreducibility and aperiodicity.
inline void check_transition_matrix(const Matrix& xi) {
  const auto k = static_cast<int>(xi.rows());
  if (k == 0 || xi.cols() != xi.rows())
    throw ModelError(ModelError::Kind::shape_mismatch, "transition matrix must be square and nonempty");
  for (int u = 0; u < k; ++u) {
    for (int v = 0; v < k; ++v) {
      if (!std::isfinite(xi(u, v)))
        throw ModelError(ModelError::Kind::non_finite, "transition matrix has a non-finite entry");
      if (xi(u, v) < 0.0)
        throw ModelError(ModelError::Kind::negative_probability,
                         "transition matrix entry (" + std::to_string(u) + ", " +
                             std::to_string(v) + ") is negative");
    }
    if (std::abs(xi.row(u).sum() - 1.0) > kPmfSumTolerance)
      throw ModelError(ModelError::Kind::sum_violation,
                       "transition matrix row " + std::to_string(u) + " sums to " +
                           std::to_string(xi.row(u).sum()));
  }
  for (bool forward : {true, false}) {
    const auto level = detail::reachable(xi, 0, forward);
    std::string missing;
    for (int u = 0; u < k; ++u)
      if (level[static_cast<std::size_t>(u)] < 0) missing += (missing.empty() ? "" : ", ") + std::to_string(u);
    if (!missing.empty())
      throw ModelError(ModelError::Kind::not_irreducible,
                       std::string("chain is reducible: states {") + missing + "} " +
                           (forward ? "are unreachable from" : "cannot reach") + " state 0");
  }
  // Period = gcd over edges u -> v of level(u) + 1 - level(v).
  const auto level = detail::reachable(xi, 0, true);
  int period = 0;
  for (int u = 0; u < k; ++u)
    for (int v = 0; v < k; ++v)
      if (xi(u, v) > 0.0)
        period = std::gcd(period, std::abs(level[static_cast<std::size_t>(u)] + 1 -
                                           level[static_cast<std::size_t>(v)]));
  if (period != 1)
    throw ModelError(ModelError::Kind::periodic, "chain has period " + std::to_string(period));
}

/// Stationary law: the eigenvector of Xi^T at eigenvalue 1, polished by power
/// iteration. Requires an irreducible chain.
inline Vector stationary_law(const Matrix& xi) {
  const auto k = xi.rows();
  if (k == 0 || xi.cols() != k)
    throw ModelError(ModelError::Kind::shape_mismatch, "transition matrix must be square and nonempty");
  for (bool forward : {true, false}) {
    const auto level = detail::reachable(xi, 0, forward);
    std::string missing;
    for (Eigen::Index u = 0; u < k; ++u)
      if (level[static_cast<std::size_t>(u)] < 0) missing += (missing.empty() ? "" : ", ") + std::to_string(u);
    if (!missing.empty())
      throw ModelError(ModelError::Kind::not_irreducible,
                       "chain is reducible: states {" + missing + "} are not in the class of state 0");
  }
  Vector pi;
  Eigen::EigenSolver<Matrix> es(xi.transpose());
  if (es.info() == Eigen::Success) {
    Eigen::Index best = 0;
    for (Eigen::Index i = 1; i < k; ++i)
      if (std::abs(es.eigenvalues()(i) - 1.0) < std::abs(es.eigenvalues()(best) - 1.0)) best = i;
    pi = es.eigenvectors().col(best).real();
    if (pi.sum() < 0.0) pi = -pi;
    pi = pi.cwiseMax(0.0);
  }
  if (pi.size() != k || !(pi.sum() > 0.0)) pi = Vector::Constant(k, 1.0 / static_cast<double>(k));
  pi /= pi.sum();
  // Power polish with a lazy chain (same stationary law, no periodicity).
  const Matrix lazy = 0.5 * (Matrix::Identity(k, k) + xi);
  double residual = (xi.transpose() * pi - pi).cwiseAbs().maxCoeff();
  for (int it = 0; it < 100000 && residual > 0.1 * kStationaryResidual; ++it) {
    pi = lazy.transpose() * pi;
    pi /= pi.sum();
    residual = (xi.transpose() * pi - pi).cwiseAbs().maxCoeff();
  }
  if (residual > kStationaryResidual)
    throw ConvergenceError("stationary_law: residual above tolerance", residual);
  return pi;
}

struct MarkovModel {
  int x_size = 0;
  int s_size = 0;
  Matrix xi;
  Vector pi;
  DistortionSpec dist;

  int states() const { return x_size * s_size; }
  /// pi arranged as P_XS(x, s).
  Matrix joint() const {
    Matrix p(x_size, s_size);
    for (int x = 0; x < x_size; ++x)
      for (int s = 0; s < s_size; ++s) p(x, s) = pi(x * s_size + s);
    return p;
  }
  /// The i.i.d. instance with the stationary marginal.
  Instance marginal() const {
    JointSource src;
    src.pmf = joint();
    return validate(src, dist);
  }
};

inline MarkovModel make_markov_model(const MarkovSpec& spec) {
  if (spec.x_size < 1 || spec.s_size < 1)
    throw ModelError(ModelError::Kind::empty_alphabet, "markov model: empty alphabet");
  const int k = spec.x_size * spec.s_size;
  if (spec.xi.rows() != k || spec.xi.cols() != k)
    throw ModelError(ModelError::Kind::shape_mismatch,
                     "markov model: xi must be " + std::to_string(k) + " x " + std::to_string(k));
  if (spec.dist.d.rows() != spec.x_size)
    throw ModelError(ModelError::Kind::shape_mismatch, "markov model: d must have x_size rows");
  check_transition_matrix(spec.xi);
  MarkovModel m;
  m.x_size = spec.x_size;
  m.s_size = spec.s_size;
  m.xi = spec.xi;
  m.pi = stationary_law(spec.xi);
  m.dist = spec.dist;
  m.marginal();  // validates the distortion matrix against the marginal
  return m;
}

//----------------------------------------------------------------------------
// Covariance ladder
//----------------------------------------------------------------------------

struct CovarianceLadder {
  double mu = 0.0;    // E_pi[j] = R(X; D | S) at P_XS = pi
  double lag0 = 0.0;  // var_pi[j]
  std::vector<double> covs;  // covs[k - 1] = cov_k, k = 1 .. k_max
  double v_inf = 0.0;
  double remainder = 0.0;    // geometric estimate of |2 sum_{k > k_max} cov_k|
  Vector j;                  // per-state tilted density
};

inline constexpr int kLadderMaxLag = 10000;
inline constexpr double kLadderFloor = 1e-14;

/// Second-largest eigenvalue modulus of Xi.
inline double second_eigenvalue_modulus(const Matrix& xi) {
  Eigen::EigenSolver<Matrix> es(xi, false);
  std::vector<double> mods;
  for (Eigen::Index i = 0; i < xi.rows(); ++i) mods.push_back(std::abs(es.eigenvalues()(i)));
  std::sort(mods.rbegin(), mods.rend());
  return mods.size() > 1 ? mods[1] : 0.0;
}

/// Lag covariances of j along the chain for a given per-state density.
inline CovarianceLadder covariance_ladder(const MarkovModel& m, const Vector& j) {
  CovarianceLadder lad;
  lad.j = j;
  lad.mu = m.pi.dot(j);
  const Vector centered = j.array() - lad.mu;
  lad.lag0 = m.pi.dot(centered.cwiseProduct(centered));
  Vector v = centered;
  int small = 0;
  double sum = 0.0;
  for (int k = 1; k <= kLadderMaxLag && small < 5; ++k) {
    v = m.xi * v;
    const double c = m.pi.dot(centered.cwiseProduct(v));
    lad.covs.push_back(c);
    sum += c;
    small = std::abs(c) < kLadderFloor ? small + 1 : 0;
  }
  lad.v_inf = lad.lag0 + 2.0 * sum;
  const double r = second_eigenvalue_modulus(m.xi);
  lad.remainder = (r < 1.0 && !lad.covs.empty())
                      ? 2.0 * std::abs(lad.covs.back()) * r / (1.0 - r)
                      : kInf;
  return lad;
}

struct MarkovTilted {
  CrdSolution solution;
  TiltedField field;
  CovarianceLadder ladder;
};

/// Solves the conditional RD problem at P_XS = pi and builds the ladder.
inline MarkovTilted markov_tilted_quantities(const MarkovModel& m, double distortion,
                                             const SolverOptions& opts = {}) {
  const Instance inst = m.marginal();
  MarkovTilted out;
  out.solution = solve_crd(inst, distortion, opts);
  out.field = tilted_density(out.solution, inst);
  Vector j(m.states());
  for (int x = 0; x < m.x_size; ++x)
    for (int s = 0; s < m.s_size; ++s) j(x * m.s_size + s) = out.field.table(x, s);
  out.ladder = covariance_ladder(m, j);
  return out;
}

/// V_n = cov_0 + (2/n) sum_{k=1}^{n-1} (n - k) cov_k
inline double v_n(const CovarianceLadder& lad, long long n) {
  if (n < 1) throw std::invalid_argument("v_n: n must be positive");
  double acc = 0.0;
  const long long top = std::min<long long>(n - 1, static_cast<long long>(lad.covs.size()));
  for (long long k = 1; k <= top; ++k)
    acc += static_cast<double>(n - k) * lad.covs[static_cast<std::size_t>(k - 1)];
  return lad.lag0 + 2.0 * acc / static_cast<double>(n);
}

struct SpectralResult {
  double v_inf = 0.0;
  double condition = 0.0;  // condition number of the eigenvector basis
  bool fallback = false;   // ladder value used instead
  std::string warning;
};

inline constexpr double kSpectralMaxCondition = 1e10;

/// V_inf = pi . (j o W j) - mu^2 with W = U diag(1, (1+l)/(1-l)) U^{-1}.
inline SpectralResult v_inf_spectral(const MarkovModel& m, const CovarianceLadder& lad) {
  using CMatrix = Eigen::MatrixXcd;
  SpectralResult r;
  Eigen::EigenSolver<Matrix> es(m.xi);
  const auto fallback = [&](const std::string& why) {
    r.v_inf = lad.v_inf;
    r.fallback = true;
    r.warning = why + "; using the covariance ladder";
    return r;
  };
  if (es.info() != Eigen::Success) return fallback("eigen-decomposition failed");
  // Eigen returns dependent vectors for repeated eigenvalues, so each cluster
  // of (numerically) equal eigenvalues gets its basis from the null space of
  // Xi - l I instead. A cluster whose null space is too small is defective.
  Eigen::VectorXcd lam = es.eigenvalues();
  CMatrix u = es.eigenvectors();
  const auto k = lam.size();
  const CMatrix xc = m.xi.cast<std::complex<double>>();
  std::vector<bool> done(static_cast<std::size_t>(k), false);
  for (Eigen::Index i = 0; i < k; ++i) {
    if (done[static_cast<std::size_t>(i)]) continue;
    std::vector<Eigen::Index> cluster;
    for (Eigen::Index j = i; j < k; ++j)
      if (!done[static_cast<std::size_t>(j)] && std::abs(lam(j) - lam(i)) < 1e-6) cluster.push_back(j);
    for (auto j : cluster) done[static_cast<std::size_t>(j)] = true;
    if (cluster.size() == 1) continue;
    std::complex<double> centre = 0.0;
    for (auto j : cluster) centre += lam(j);
    centre /= static_cast<double>(cluster.size());
    const CMatrix shifted = xc - centre * CMatrix::Identity(k, k);
    Eigen::JacobiSVD<CMatrix> null_svd(shifted, Eigen::ComputeFullV);
    for (std::size_t c = 0; c < cluster.size(); ++c) {
      const Eigen::VectorXcd v = null_svd.matrixV().col(k - 1 - static_cast<Eigen::Index>(c));
      if ((shifted * v).norm() > 1e-8) return fallback("transition matrix is not diagonalizable");
      u.col(cluster[c]) = v;
      lam(cluster[c]) = centre;
    }
  }
  for (Eigen::Index i = 0; i < k; ++i)
    if ((xc * u.col(i) - lam(i) * u.col(i)).norm() > 1e-8 * u.col(i).norm())
      return fallback("eigenvector residual too large");
  Eigen::JacobiSVD<CMatrix> svd(u);
  const auto sv = svd.singularValues();
  r.condition = sv(sv.size() - 1) > 0.0 ? sv(0) / sv(sv.size() - 1) : kInf;
  if (!(r.condition <= kSpectralMaxCondition)) return fallback("eigenvector basis is ill-conditioned");
  Eigen::Index lead = 0;
  for (Eigen::Index i = 1; i < lam.size(); ++i)
    if (std::abs(lam(i) - 1.0) < std::abs(lam(lead) - 1.0)) lead = i;
  Eigen::VectorXcd w(lam.size());
  for (Eigen::Index i = 0; i < lam.size(); ++i)
    w(i) = i == lead ? std::complex<double>(1.0) : (1.0 + lam(i)) / (1.0 - lam(i));
  const CMatrix kernel = u * w.asDiagonal() * u.inverse();
  const Eigen::VectorXcd jc = lad.j.cast<std::complex<double>>();
  const Eigen::VectorXcd wj = kernel * jc;
  std::complex<double> acc = 0.0;
  for (Eigen::Index i = 0; i < jc.size(); ++i) acc += m.pi(i) * jc(i) * wj(i);
  r.v_inf = acc.real() - lad.mu * lad.mu;
  return r;
}

/// mu + sqrt(V_inf / n) Q^{-1}(eps)
inline double markov_second_order_rate(const CovarianceLadder& lad, int n, double eps) {
  return second_order_rate(n, eps, lad.mu, lad.v_inf);
}

//----------------------------------------------------------------------------
// Sampling
//----------------------------------------------------------------------------

/// Path of length n started from pi; deterministic given the seed.
inline SequencePair sample_markov(const MarkovModel& m, std::size_t n, std::uint64_t seed) {
  Rng rng(seed);
  const auto k = static_cast<std::size_t>(m.states());
  std::vector<std::vector<double>> rows(k);
  for (std::size_t u = 0; u < k; ++u) {
    std::vector<double> r(k);
    for (std::size_t v = 0; v < k; ++v) r[v] = m.xi(static_cast<Eigen::Index>(u), static_cast<Eigen::Index>(v));
    rows[u] = cumulative(r);
  }
  std::vector<double> start(m.pi.data(), m.pi.data() + m.pi.size());
  const auto start_cdf = cumulative(start);
  SequencePair out;
  out.reserve(n);
  std::size_t u = n ? rng.categorical(start_cdf) : 0;
  for (std::size_t i = 0; i < n; ++i) {
    if (i > 0) u = rng.categorical(rows[u]);
    out.push_back({static_cast<int>(u) / m.s_size, static_cast<int>(u) % m.s_size});
  }
  return out;
}

/// Law of sum_i j(X_i, S_i) over sampled paths; path t uses derive_seed(seed, t).
inline SumLaw markov_sum_law(const MarkovModel& m, const CovarianceLadder& lad, int n,
                             std::size_t paths, std::uint64_t seed, unsigned threads = 1) {
  if (paths == 0) throw std::invalid_argument("markov_sum_law: paths must be positive");
  auto parts = map_chunks(paths, 64, threads, [&](ChunkRange r) {
    std::vector<double> out;
    for (std::size_t t = r.begin; t < r.end; ++t) {
      const auto path = sample_markov(m, static_cast<std::size_t>(n), derive_seed(seed, t));
      double s = 0.0;
      for (const auto& p : path) s += lad.j(p.x * m.s_size + p.s);
      out.push_back(s);
    }
    return out;
  });
  std::vector<double> all;
  all.reserve(paths);
  for (auto& p : parts) all.insert(all.end(), p.begin(), p.end());
  return SumLaw::from_samples(all);
}

/// Converse with the density sum sampled along Markov paths.
inline ConverseResult markov_converse(const MarkovModel& m, const CovarianceLadder& lad,
                                      const FblQuery& q, std::size_t paths, std::uint64_t seed,
                                      std::optional<double> gamma = std::nullopt,
                                      unsigned threads = 1) {
  const SumLaw law = markov_sum_law(m, lad, q.n, paths, seed, threads);
  return gamma ? converse_lower(q, law, *gamma) : converse_lower_sup(q, law, lad.v_inf);
}

}  // namespace fblcrd
