#pragma once

// Distributions of sums of i.i.d. per-letter quantities.
//
// SumLaw holds the law of S = sum_i v(X_i, S_i) either exactly (per-letter
// values rounded to a lattice of step q, then convolved) or as an empirical
// Monte-Carlo sample. Both expose the same tail and expectation queries.
//
// Distortion sums use a second, integer lattice: per-letter distortions are
// multiples of a unit u, and the probability that a sum lands in a window is
// obtained by truncated convolution in scaled (log-offset) arithmetic.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "fblcrd/core_math.hpp"

namespace fblcrd {

class SumLaw {
 public:
  enum class Kind { lattice, monte_carlo };

  /// Atoms (value, weight); weights must sum to 1. Values are sorted here.
  static SumLaw from_atoms(std::vector<std::pair<double, double>> atoms, Kind kind,
                           double quantization_error, std::size_t samples) {
    SumLaw law;
    law.kind_ = kind;
    law.quantization_error_ = quantization_error;
    law.samples_ = samples;
    std::sort(atoms.begin(), atoms.end());
    law.values_.reserve(atoms.size());
    law.weights_.reserve(atoms.size());
    for (const auto& [v, w] : atoms) {
      if (!law.values_.empty() && law.values_.back() == v) {
        law.weights_.back() += w;
      } else {
        law.values_.push_back(v);
        law.weights_.push_back(w);
      }
    }
    law.suffix_.assign(law.values_.size() + 1, 0.0);
    for (std::size_t i = law.values_.size(); i-- > 0;)
      law.suffix_[i] = law.suffix_[i + 1] + law.weights_[i];
    return law;
  }

  /// Empirical law of a Monte-Carlo sample.
  static SumLaw from_samples(const std::vector<double>& samples) {
    if (samples.empty()) throw std::invalid_argument("SumLaw: empty sample");
    std::vector<std::pair<double, double>> atoms;
    atoms.reserve(samples.size());
    const double w = 1.0 / static_cast<double>(samples.size());
    for (double v : samples) atoms.emplace_back(v, w);
    return from_atoms(std::move(atoms), Kind::monte_carlo, 0.0, samples.size());
  }

  Kind kind() const { return kind_; }
  /// Bound on |lattice value - exact sum| (lattice laws only).
  double quantization_error() const { return quantization_error_; }
  std::size_t samples() const { return samples_; }
  double min() const { return values_.front(); }
  double max() const { return values_.back(); }
  std::size_t support_size() const { return values_.size(); }

  /// Pr[S >= t]
  double at_least(double t) const {
    const auto it = std::lower_bound(values_.begin(), values_.end(), t);
    return std::min(1.0, suffix_[static_cast<std::size_t>(it - values_.begin())]);
  }
  /// Pr[S > t]
  double greater(double t) const {
    const auto it = std::upper_bound(values_.begin(), values_.end(), t);
    return std::min(1.0, suffix_[static_cast<std::size_t>(it - values_.begin())]);
  }

  /// Standard error of a Monte-Carlo probability estimate; 0 for exact laws.
  double stderr_of(double p) const {
    if (kind_ != Kind::monte_carlo) return 0.0;
    return std::sqrt(std::max(p * (1.0 - p), 0.0) / static_cast<double>(samples_));
  }

  /// E[f(S)] together with its Monte-Carlo standard error (0 when exact).
  template <class F>
  std::pair<double, double> expect(F&& f) const {
    double m = 0.0, m2 = 0.0;
    for (std::size_t i = 0; i < values_.size(); ++i) {
      const double v = f(values_[i]);
      m += weights_[i] * v;
      m2 += weights_[i] * v * v;
    }
    if (kind_ != Kind::monte_carlo) return {m, 0.0};
    const double var = std::max(m2 - m * m, 0.0);
    return {m, std::sqrt(var / static_cast<double>(samples_))};
  }

 private:
  Kind kind_ = Kind::lattice;
  double quantization_error_ = 0.0;
  std::size_t samples_ = 0;
  std::vector<double> values_;
  std::vector<double> weights_;
  std::vector<double> suffix_;  // suffix_[i] = sum of weights_[i..]
};

/// Exact law of the n-fold sum of a finite per-letter law. Values are rounded
/// to multiples of `step`; the result is off by at most n step / 2 per
/// outcome. Returns nullopt when the support would exceed `max_support`.
inline std::optional<SumLaw> lattice_sum(const std::vector<std::pair<double, double>>& atoms,
                                         int n, double step, std::size_t max_support) {
  if (n < 1) throw std::invalid_argument("lattice_sum: n must be positive");
  if (!(step > 0.0)) throw std::invalid_argument("lattice_sum: step must be positive");
  // Per-letter atoms merged on the lattice.
  std::vector<std::pair<std::int64_t, double>> letter;
  for (const auto& [v, w] : atoms) {
    if (w <= 0.0) continue;
    letter.emplace_back(std::llround(v / step), w);
  }
  std::sort(letter.begin(), letter.end());
  std::vector<std::pair<std::int64_t, double>> merged;
  for (const auto& a : letter) {
    if (!merged.empty() && merged.back().first == a.first) {
      merged.back().second += a.second;
    } else {
      merged.push_back(a);
    }
  }
  if (merged.empty()) throw std::invalid_argument("lattice_sum: no mass");

  std::vector<std::pair<std::int64_t, double>> cur{{0, 1.0}}, next;
  std::vector<std::size_t> pos(merged.size());
  for (int step_i = 0; step_i < n; ++step_i) {
    // K-way merge of the shifted copies cur + merged[k].
    next.clear();
    std::fill(pos.begin(), pos.end(), 0);
    for (;;) {
      std::int64_t best = std::numeric_limits<std::int64_t>::max();
      for (std::size_t k = 0; k < merged.size(); ++k)
        if (pos[k] < cur.size()) best = std::min(best, cur[pos[k]].first + merged[k].first);
      if (best == std::numeric_limits<std::int64_t>::max()) break;
      double mass = 0.0;
      for (std::size_t k = 0; k < merged.size(); ++k) {
        if (pos[k] < cur.size() && cur[pos[k]].first + merged[k].first == best) {
          mass += cur[pos[k]].second * merged[k].second;
          ++pos[k];
        }
      }
      if (mass > 1e-300) next.emplace_back(best, mass);
    }
    if (next.size() > max_support) return std::nullopt;
    cur.swap(next);
  }
  std::vector<std::pair<double, double>> out;
  out.reserve(cur.size());
  for (const auto& [idx, w] : cur) out.emplace_back(static_cast<double>(idx) * step, w);
  return SumLaw::from_atoms(std::move(out), SumLaw::Kind::lattice, 0.5 * n * step, 0);
}

//----------------------------------------------------------------------------
// Integer distortion lattice
//----------------------------------------------------------------------------

struct DistortionLattice {
  double unit = 1.0;
  bool exact = true;  // every d(x, y) is an integer multiple of unit
  std::vector<std::vector<int>> index;  // index[x][y] = round(d(x, y) / unit)

  /// Largest lattice total not exceeding `total` (the distortion budget n D).
  long long floor_index(double total) const {
    return static_cast<long long>(std::floor(total / unit + 1e-9));
  }
  /// Smallest lattice total not below `total`.
  long long ceil_index(double total) const {
    return static_cast<long long>(std::ceil(total / unit - 1e-9));
  }
};

/// Finds the coarsest unit d_max / k (k <= 4096) on which every distortion is
/// an integer; otherwise rounds to d_max / 4096 and marks the lattice inexact.
template <class Mat>
DistortionLattice make_distortion_lattice(const Mat& d) {
  DistortionLattice lat;
  const double d_max = d.maxCoeff();
  const auto rows = static_cast<int>(d.rows());
  const auto cols = static_cast<int>(d.cols());
  lat.index.assign(static_cast<std::size_t>(rows), std::vector<int>(static_cast<std::size_t>(cols), 0));
  if (d_max <= 0.0) return lat;
  int chosen = 0;
  for (int k = 1; k <= 4096 && chosen == 0; ++k) {
    const double u = d_max / k;
    bool ok = true;
    for (int x = 0; x < rows && ok; ++x)
      for (int y = 0; y < cols && ok; ++y) {
        const double r = d(x, y) / u;
        ok = std::abs(r - std::round(r)) <= 1e-9 * std::max(1.0, r);
      }
    if (ok) chosen = k;
  }
  lat.exact = chosen != 0;
  if (chosen == 0) chosen = 4096;
  lat.unit = d_max / chosen;
  for (int x = 0; x < rows; ++x)
    for (int y = 0; y < cols; ++y)
      lat.index[static_cast<std::size_t>(x)][static_cast<std::size_t>(y)] =
          static_cast<int>(std::llround(d(x, y) / lat.unit));
  return lat;
}

/// Law of one letter's lattice distortion: (index, probability) pairs.
using LetterLaw = std::vector<std::pair<int, double>>;

/// ln Pr[lo <= sum <= hi] for a sum of independent letters where `laws[g]`
/// occurs `counts[g]` times. Only totals <= hi are tracked, with a running
/// log scale so that tiny probabilities keep full relative precision.
inline double log_window_probability(const std::vector<LetterLaw>& laws,
                                     const std::vector<int>& counts, long long lo,
                                     long long hi) {
  if (hi < 0 || lo > hi) return -kInf;
  lo = std::max(lo, 0LL);
  const auto len = static_cast<std::size_t>(hi + 1);
  std::vector<double> cur(len, 0.0), next(len, 0.0);
  cur[0] = 1.0;
  double log_scale = 0.0;
  std::size_t top = 0;  // highest index that may be nonzero
  for (std::size_t g = 0; g < laws.size(); ++g) {
    const auto& law = laws[g];
    for (int rep = 0; rep < counts[g]; ++rep) {
      std::fill(next.begin(), next.begin() + static_cast<std::ptrdiff_t>(std::min(len, top + 1)),
                0.0);
      std::size_t new_top = 0;
      for (const auto& [idx, p] : law) {
        if (p <= 0.0) continue;
        const auto shift = static_cast<std::size_t>(idx);
        if (shift >= len) continue;
        const std::size_t end = std::min(top, len - 1 - shift);
        for (std::size_t t = 0; t <= end; ++t) next[t + shift] += p * cur[t];
        new_top = std::max(new_top, end + shift);
      }
      top = new_top;
      double m = 0.0;
      for (std::size_t t = 0; t <= top; ++t) m = std::max(m, next[t]);
      if (m == 0.0) return -kInf;
      for (std::size_t t = 0; t <= top; ++t) next[t] /= m;
      std::fill(next.begin() + static_cast<std::ptrdiff_t>(top + 1), next.end(), 0.0);
      log_scale += std::log(m);
      cur.swap(next);
    }
  }
  double acc = 0.0;
  for (std::size_t t = static_cast<std::size_t>(lo); t <= std::min(top, len - 1); ++t) acc += cur[t];
  if (acc <= 0.0) return -kInf;
  return log_scale + std::log(acc);
}

}  // namespace fblcrd
