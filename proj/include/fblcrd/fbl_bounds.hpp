#pragma once

// Finite-blocklength bounds for i.i.d. sources with side information at both
// terminals:
//
//  * converse:   eps >= Pr[sum j >= ln M + gamma] - e^{-gamma}
//  * forward:    eps <= T1 + T2 + T3 (relaxed random-coding bound)
//  * simulation: eps <= E[(1 - P_Ybar(B_D(X^n) | S^n))^M] estimated by
//                Monte-Carlo with exact ball probabilities
//  * normal approximation R + sqrt(V/n) Q^{-1}(eps)
//
// All rates and logarithms are in nats. M enters only through ln M.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <mutex>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "fblcrd/core_math.hpp"
#include "fblcrd/crd_solver.hpp"
#include "fblcrd/lattice.hpp"
#include "fblcrd/parallel.hpp"
#include "fblcrd/random.hpp"
#include "fblcrd/source_model.hpp"
#include "fblcrd/tilted_info.hpp"

namespace fblcrd {

struct FblQuery {
  int n = 1;
  double distortion = 0.0;
  double eps = 0.1;
  double log_m = 0.0;  // ln M, M >= 1

  double rate() const { return log_m / n; }
};

inline void check_query(const FblQuery& q) {
  if (q.n < 1) throw std::invalid_argument("blocklength must be at least 1");
  if (!(q.eps > 0.0 && q.eps < 1.0)) throw std::invalid_argument("eps must lie in (0, 1)");
  if (!(q.log_m >= 0.0)) throw std::invalid_argument("M must be at least 1");
}

struct BoundTerm {
  std::string name;
  double value = 0.0;
  double std_error = 0.0;
};

struct BoundResult {
  double value = 0.0;   // clamped to [0, 1]
  double raw = 0.0;     // sum of the terms before clamping
  std::vector<BoundTerm> terms;
  double mc_stderr = 0.0;
  double quantization_error = 0.0;  // lattice rounding of the density sum, nats
  std::string method;               // "lattice" or "monte-carlo"
};

inline BoundResult finish(BoundResult r) {
  r.raw = 0.0;
  double var = 0.0;
  for (const auto& t : r.terms) {
    r.raw += t.value;
    var += t.std_error * t.std_error;
  }
  r.value = std::clamp(r.raw, 0.0, 1.0);
  r.mc_stderr = std::sqrt(var);
  return r;
}

inline const char* method_name(SumLaw::Kind k) {
  return k == SumLaw::Kind::lattice ? "lattice" : "monte-carlo";
}

//----------------------------------------------------------------------------
// Law of the tilted-density sum
//----------------------------------------------------------------------------

struct SumLawOptions {
  double step = 1e-6;                 // lattice resolution q, nats
  std::size_t max_support = 1 << 21;  // beyond this, fall back to Monte-Carlo
  std::size_t mc_trials = 100000;
  std::uint64_t seed = 1;
  unsigned threads = 1;
  bool force_monte_carlo = false;
};

/// Law of sum_{i <= n} j(X_i, D | S_i) under P_XS^n.
inline SumLaw tilted_sum_law(const TiltedField& field, int n, const SumLawOptions& opts = {}) {
  std::vector<std::pair<double, double>> atoms;
  for (Eigen::Index x = 0; x < field.table.rows(); ++x)
    for (Eigen::Index s = 0; s < field.table.cols(); ++s)
      if (field.weights(x, s) > 0.0) atoms.emplace_back(field.table(x, s), field.weights(x, s));
  if (!opts.force_monte_carlo) {
    if (auto law = lattice_sum(atoms, n, opts.step, opts.max_support)) return *law;
  }
  std::vector<double> cdf_src;
  for (const auto& a : atoms) cdf_src.push_back(a.second);
  const auto cdf = cumulative(cdf_src);
  auto parts = map_chunks(opts.mc_trials, 1024, opts.threads, [&](ChunkRange r) {
    std::vector<double> out;
    out.reserve(r.end - r.begin);
    for (std::size_t t = r.begin; t < r.end; ++t) {
      Rng rng(derive_seed(opts.seed, t));
      double s = 0.0;
      for (int i = 0; i < n; ++i) s += atoms[rng.categorical(cdf)].first;
      out.push_back(s);
    }
    return out;
  });
  std::vector<double> samples;
  samples.reserve(opts.mc_trials);
  for (auto& p : parts) samples.insert(samples.end(), p.begin(), p.end());
  return SumLaw::from_samples(samples);
}

//----------------------------------------------------------------------------
// Converse
//----------------------------------------------------------------------------

struct ConverseResult {
  double value = 0.0;  // max(0, tail - e^{-gamma}) at the best gamma
  double gamma = 0.0;
  double tail = 0.0;   // Pr[S >= ln M + gamma]
  double mc_stderr = 0.0;
  double quantization_error = 0.0;
  std::string method;
};

/// gamma grid: ln sqrt(n) together with 2^k sqrt(n V), k = -4 .. 10.
inline std::vector<double> converse_gamma_grid(int n, double v) {
  std::vector<double> grid{0.5 * std::log(static_cast<double>(n))};
  const double scale = v > 0.0 ? std::sqrt(n * v) : 1.0;
  for (int k = -4; k <= 10; ++k) grid.push_back(std::ldexp(scale, k));
  std::erase_if(grid, [](double g) { return !(g > 0.0); });
  std::sort(grid.begin(), grid.end());
  return grid;
}

/// Lower bound on eps at a single gamma > 0.
inline ConverseResult converse_lower(const FblQuery& q, const SumLaw& law, double gamma) {
  check_query(q);
  if (!(gamma > 0.0)) throw std::invalid_argument("converse_lower: gamma must be positive");
  ConverseResult r;
  r.gamma = gamma;
  r.tail = law.at_least(q.log_m + gamma);
  r.value = std::max(0.0, r.tail - std::exp(-gamma));
  r.mc_stderr = law.stderr_of(r.tail);
  r.quantization_error = law.quantization_error();
  r.method = method_name(law.kind());
  return r;
}

/// Supremum over converse_gamma_grid(n, v).
inline ConverseResult converse_lower_sup(const FblQuery& q, const SumLaw& law, double v) {
  ConverseResult best;
  bool first = true;
  for (double g : converse_gamma_grid(q.n, v)) {
    auto r = converse_lower(q, law, g);
    if (first || r.value > best.value) {
      best = r;
      first = false;
    }
  }
  return best;
}

inline ConverseResult converse_lower(const FblQuery& q, const TiltedField& field,
                                     std::optional<double> gamma = std::nullopt,
                                     const SumLawOptions& opts = {}) {
  const SumLaw law = tilted_sum_law(field, q.n, opts);
  return gamma ? converse_lower(q, law, *gamma) : converse_lower_sup(q, law, field.variance);
}

/// Smallest ln M / n at which the gamma-grid converse drops to eps or below:
/// no code of lower rate can reach excess probability eps.
inline double converse_rate(int n, double eps, const SumLaw& law, double v) {
  FblQuery q{n, 0.0, eps, 0.0};
  auto bound = [&](double log_m) {
    q.log_m = log_m;
    return converse_lower_sup(q, law, v).value;
  };
  if (bound(0.0) <= eps) return 0.0;
  double lo = 0.0;
  double hi = std::max(1.0, law.max());
  while (bound(hi) > eps) hi *= 2.0;
  for (int i = 0; i < 200 && hi - lo > 1e-12 * std::max(1.0, hi); ++i) {
    const double mid = 0.5 * (lo + hi);
    (bound(mid) > eps ? lo : hi) = mid;
  }
  return hi / n;
}

//----------------------------------------------------------------------------
// Ball probabilities
//----------------------------------------------------------------------------

namespace detail {

/// Per-(x, s) letter laws of the lattice distortion d(x, Y) for Y drawn from
/// `out(x, s, .)`, grouped so that letters with identical laws share a group.
struct LetterGroups {
  std::vector<LetterLaw> laws;
  std::vector<int> group;  // group[x * s_size + s]
};

template <class OutLaw>
LetterGroups group_letters(const Instance& inst, const DistortionLattice& lat, OutLaw&& out) {
  LetterGroups g;
  const int ns = inst.s_size();
  g.group.assign(static_cast<std::size_t>(inst.x_size() * ns), -1);
  for (int x = 0; x < inst.x_size(); ++x) {
    for (int s = 0; s < ns; ++s) {
      std::map<int, double> acc;
      for (int y = 0; y < inst.y_size(); ++y) {
        const double p = out(x, s, y);
        if (p > 0.0) acc[lat.index[static_cast<std::size_t>(x)][static_cast<std::size_t>(y)]] += p;
      }
      LetterLaw law(acc.begin(), acc.end());
      int found = -1;
      for (std::size_t k = 0; k < g.laws.size() && found < 0; ++k)
        if (g.laws[k] == law) found = static_cast<int>(k);
      if (found < 0) {
        found = static_cast<int>(g.laws.size());
        g.laws.push_back(std::move(law));
      }
      g.group[static_cast<std::size_t>(x * ns + s)] = found;
    }
  }
  return g;
}

/// Flattened P_XS for sampling letters: index k = x * s_size + s.
inline std::vector<double> letter_cdf(const Instance& inst) {
  std::vector<double> flat;
  for (int x = 0; x < inst.x_size(); ++x)
    for (int s = 0; s < inst.s_size(); ++s) flat.push_back(inst.pmf(x, s));
  return cumulative(flat);
}

/// Memoized ln Pr[window] keyed by group counts; values are deterministic
/// so concurrent fills are harmless.
class WindowCache {
 public:
  WindowCache(const std::vector<LetterLaw>& laws, long long lo, long long hi)
      : laws_(&laws), lo_(lo), hi_(hi) {}

  double operator()(const std::vector<int>& counts) {
    {
      std::lock_guard lock(mutex_);
      if (auto it = memo_.find(counts); it != memo_.end()) return it->second;
    }
    const double v = log_window_probability(*laws_, counts, lo_, hi_);
    std::lock_guard lock(mutex_);
    memo_.emplace(counts, v);
    return v;
  }

 private:
  const std::vector<LetterLaw>* laws_;
  long long lo_, hi_;
  std::mutex mutex_;
  std::map<std::vector<int>, double> memo_;
};

}  // namespace detail

//----------------------------------------------------------------------------
// Random-coding simulation
//----------------------------------------------------------------------------

/// Per-trial ball probabilities ln p_t; eps(M) = mean_t (1 - p_t)^M. The same
/// sample serves every M, so eps(M) is exactly nonincreasing in M.
struct RandomCodingSample {
  std::vector<double> log_p;
  bool exact_lattice = true;

  std::pair<double, double> eps(double log_m) const {
    double m = 0.0, m2 = 0.0;
    for (double lp : log_p) {
      const double v = pow_one_minus(lp, log_m);
      m += v;
      m2 += v * v;
    }
    const double t = static_cast<double>(log_p.size());
    m /= t;
    m2 /= t;
    return {m, std::sqrt(std::max(m2 - m * m, 0.0) / t)};
  }

  /// Smallest ln M / n with estimated eps <= target; +inf if unreachable.
  double rate(int n, double target) const {
    std::size_t stuck = 0;
    for (double lp : log_p) stuck += lp == -kInf;
    if (static_cast<double>(stuck) / log_p.size() > target) return kInf;
    if (eps(0.0).first <= target) return 0.0;
    double lo = 0.0, hi = 1.0;
    while (eps(hi).first > target) hi *= 2.0;
    for (int i = 0; i < 200 && hi - lo > 1e-12 * std::max(1.0, hi); ++i) {
      const double mid = 0.5 * (lo + hi);
      (eps(mid).first > target ? lo : hi) = mid;
    }
    return hi / n;
  }
};

/// Draws `trials` source/side-information sequences of length n (trial t uses
/// the stream derive_seed(seed, t)) and computes the exact probability that
/// an i.i.d. codeword from P_{Y*|S}(.|s_i) lies within distortion D.
inline RandomCodingSample sample_ball_probabilities(int n, double distortion,
                                                    const CrdSolution& sol,
                                                    const Instance& inst, std::size_t trials,
                                                    std::uint64_t seed, unsigned threads = 1) {
  if (trials == 0) throw std::invalid_argument("simulate_random_code: trials must be positive");
  if (n < 1) throw std::invalid_argument("simulate_random_code: n must be positive");
  const DistortionLattice lat = make_distortion_lattice(inst.d());
  const auto groups = detail::group_letters(
      inst, lat, [&](int, int s, int y) { return sol.induced(y, s); });
  detail::WindowCache cache(groups.laws, 0, lat.floor_index(n * distortion));
  const auto cdf = detail::letter_cdf(inst);

  auto parts = map_chunks(trials, 256, threads, [&](ChunkRange r) {
    std::vector<double> out;
    out.reserve(r.end - r.begin);
    std::vector<int> counts(groups.laws.size());
    for (std::size_t t = r.begin; t < r.end; ++t) {
      Rng rng(derive_seed(seed, t));
      std::fill(counts.begin(), counts.end(), 0);
      for (int i = 0; i < n; ++i) ++counts[static_cast<std::size_t>(groups.group[rng.categorical(cdf)])];
      out.push_back(cache(counts));
    }
    return out;
  });
  RandomCodingSample sample;
  sample.exact_lattice = lat.exact;
  sample.log_p.reserve(trials);
  for (auto& p : parts) sample.log_p.insert(sample.log_p.end(), p.begin(), p.end());
  return sample;
}

/// Monte-Carlo estimate of the random-coding bound at (n, D, M).
inline BoundResult simulate_random_code(const FblQuery& q, const CrdSolution& sol,
                                        const Instance& inst, std::size_t trials,
                                        std::uint64_t seed, unsigned threads = 1) {
  check_query(q);
  const auto sample = sample_ball_probabilities(q.n, q.distortion, sol, inst, trials, seed, threads);
  const auto [m, se] = sample.eps(q.log_m);
  BoundResult r;
  r.method = "monte-carlo";
  r.terms.push_back({"random_coding", m, se});
  return finish(r);
}

//----------------------------------------------------------------------------
// Forward (relaxed achievability) bound
//----------------------------------------------------------------------------

/// gamma and beta are carried as logarithms because the defaults grow like M.
struct ForwardBoundParams {
  double log_gamma = 0.0;
  double log_beta = 0.0;
  double delta = 0.0;
};

/// Window probabilities Pr[n(D - delta) <= sum d(x_i, Y*_i) <= nD | x^n, s^n]
/// with Y* drawn from the test channel, one per trial.
inline std::vector<double> sample_window_probabilities(int n, double distortion, double delta,
                                                       const CrdSolution& sol,
                                                       const Instance& inst, std::size_t trials,
                                                       std::uint64_t seed, unsigned threads) {
  const DistortionLattice lat = make_distortion_lattice(inst.d());
  const auto groups = detail::group_letters(inst, lat, [&](int x, int s, int y) {
    return sol.channel[static_cast<std::size_t>(s)](x, y);
  });
  detail::WindowCache cache(groups.laws, lat.ceil_index(n * (distortion - delta)),
                            lat.floor_index(n * distortion));
  const auto cdf = detail::letter_cdf(inst);
  auto parts = map_chunks(trials, 256, threads, [&](ChunkRange r) {
    std::vector<double> out;
    std::vector<int> counts(groups.laws.size());
    for (std::size_t t = r.begin; t < r.end; ++t) {
      Rng rng(derive_seed(seed, t));
      std::fill(counts.begin(), counts.end(), 0);
      for (int i = 0; i < n; ++i) ++counts[static_cast<std::size_t>(groups.group[rng.categorical(cdf)])];
      out.push_back(cache(counts));
    }
    return out;
  });
  std::vector<double> all;
  for (auto& p : parts) all.insert(all.end(), p.begin(), p.end());
  return all;
}

/// ln C with C = sqrt(n) min_t Pr[window | pilot trial t], from a pilot sample
/// drawn on its own stream so the bound's own Monte-Carlo stays independent.
inline double calibrate_log_c(int n, double distortion, double delta, const CrdSolution& sol,
                              const Instance& inst, std::size_t pilot, std::uint64_t seed,
                              unsigned threads = 1) {
  const auto lp = sample_window_probabilities(n, distortion, delta, sol, inst, pilot,
                                              derive_seed(seed, 0x70696c6f74ULL), threads);
  return 0.5 * std::log(static_cast<double>(n)) + *std::min_element(lp.begin(), lp.end());
}

/// Defaults: delta = D / 100, beta = sqrt(n) / C, gamma = M / sqrt(n).
inline ForwardBoundParams default_forward_params(const FblQuery& q, double log_c) {
  const double half_log_n = 0.5 * std::log(static_cast<double>(q.n));
  return {q.log_m - half_log_n, half_log_n - log_c, q.distortion / 100.0};
}

/// T1 = Pr[sum j > ln gamma - ln beta - n lambda delta]
/// T2 = E[|1 - beta Pr[D - delta <= d(X^n, Y*^n) <= D | X^n, S^n]|^+]
/// T3 = e^{-M/gamma} E[min(1, gamma e^{-sum j})]
/// The slope multiplying delta is the block slope n lambda*.
inline BoundResult forward_bound(const FblQuery& q, const ForwardBoundParams& p,
                                 const CrdSolution& sol, const Instance& inst,
                                 const SumLaw& law, std::size_t trials, std::uint64_t seed,
                                 unsigned threads = 1) {
  check_query(q);
  if (!(p.delta > 0.0)) throw std::invalid_argument("forward_bound: delta must be positive");
  if (std::isnan(p.log_gamma) || std::isnan(p.log_beta))
    throw std::invalid_argument("forward_bound: gamma and beta must be positive");
  if (trials == 0) throw std::invalid_argument("forward_bound: trials must be positive");

  BoundResult r;
  r.method = method_name(law.kind());
  r.quantization_error = law.quantization_error();

  const double t1_threshold = p.log_gamma - p.log_beta - q.n * sol.slope * p.delta;
  const double t1 = law.greater(t1_threshold);
  r.terms.push_back({"T1", t1, law.stderr_of(t1)});

  const auto lp = sample_window_probabilities(q.n, q.distortion, p.delta, sol, inst, trials,
                                              seed, threads);
  double m = 0.0, m2 = 0.0;
  for (double l : lp) {
    const double v = std::max(0.0, 1.0 - std::exp(std::min(p.log_beta + l, 700.0)));
    m += v;
    m2 += v * v;
  }
  m /= static_cast<double>(lp.size());
  m2 /= static_cast<double>(lp.size());
  r.terms.push_back({"T2", m, std::sqrt(std::max(m2 - m * m, 0.0) / lp.size())});

  const double log_ratio = q.log_m - p.log_gamma;  // ln(M / gamma)
  const double front = log_ratio > 709.0 ? 0.0 : std::exp(-std::exp(log_ratio));
  const auto [e3, se3] = law.expect([&](double s) { return std::exp(std::min(0.0, p.log_gamma - s)); });
  r.terms.push_back({"T3", front * e3, front * se3});
  return finish(r);
}

//----------------------------------------------------------------------------
// Normal approximation
//----------------------------------------------------------------------------

/// R + sqrt(V / n) Q^{-1}(eps)
inline double second_order_rate(int n, double eps, double rate, double v) {
  if (n < 1) throw std::invalid_argument("second_order_rate: n must be positive");
  if (v < 0.0) throw std::invalid_argument("second_order_rate: V must be nonnegative");
  return rate + std::sqrt(v / n) * gaussian_q_inv(eps);
}

}  // namespace fblcrd
