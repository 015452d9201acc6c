#pragma once

// Finite-alphabet joint sources P_XS with a per-letter distortion matrix.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "fblcrd/errors.hpp"
#include "fblcrd/parallel.hpp"
#include "fblcrd/random.hpp"

namespace fblcrd {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

/// Probabilities below this are structural zeros.
inline constexpr double kStructuralZero = 1e-15;
inline constexpr double kPmfSumTolerance = 1e-12;

/// Raw joint law: pmf(x, s) = P_XS(x, s).
struct JointSource {
  Matrix pmf;
  std::map<std::string, std::vector<std::string>> labels;  // presentation only
};

/// Per-letter distortion d(x, y); the sequence distortion is the mean.
struct DistortionSpec {
  Matrix d;
};

struct SymbolPair {
  int x = 0;
  int s = 0;
  bool operator==(const SymbolPair&) const = default;
};

using SequencePair = std::vector<SymbolPair>;

/// A validated, immutable problem instance with cached marginals.
class Instance {
 public:
  int x_size() const { return static_cast<int>(pmf_.rows()); }
  int s_size() const { return static_cast<int>(pmf_.cols()); }
  int y_size() const { return static_cast<int>(d_.cols()); }

  const Matrix& pmf() const { return pmf_; }
  double pmf(int x, int s) const { return pmf_(x, s); }
  const Vector& p_s() const { return p_s_; }
  const Vector& p_x() const { return p_x_; }
  /// Column s holds P_{X|S}(.|s); all-zero when P_S(s) = 0.
  const Matrix& conditional() const { return cond_; }
  const Matrix& d() const { return d_; }
  double d(int x, int y) const { return d_(x, y); }

  /// Largest per-letter distortion value.
  double d_max() const { return d_max_; }
  /// E[min_y d(X, y)]: no code can achieve less.
  double distortion_floor() const { return floor_; }
  /// Smallest distortion reachable at zero rate: sum_s P_S(s) D_max(s).
  double zero_rate_distortion() const { return zero_rate_; }
  /// Per-state floor D_min(s) = E[min_y d(X, y) | S = s].
  const Vector& state_floor() const { return state_floor_; }
  /// Per-state zero-rate distortion D_max(s) = min_y E[d(X, y) | S = s].
  const Vector& state_zero_rate() const { return state_zero_rate_; }
  /// argmin_y E[d(X, y) | S = s]
  const std::vector<int>& state_zero_rate_output() const {
    return state_zero_rate_output_;
  }
  const std::map<std::string, std::vector<std::string>>& labels() const {
    return labels_;
  }

  JointSource source() const { return JointSource{pmf_, labels_}; }
  DistortionSpec distortion() const { return DistortionSpec{d_}; }

  friend Instance validate(const JointSource&, const DistortionSpec&);

 private:
  Instance() = default;

  Matrix pmf_;
  Vector p_s_;
  Vector p_x_;
  Matrix cond_;
  Matrix d_;
  double d_max_ = 0.0;
  double floor_ = 0.0;
  double zero_rate_ = 0.0;
  Vector state_floor_;
  Vector state_zero_rate_;
  std::vector<int> state_zero_rate_output_;
  std::map<std::string, std::vector<std::string>> labels_;
};

inline Instance validate(const JointSource& source, const DistortionSpec& dist) {
  using K = ModelError::Kind;
  const auto& pmf = source.pmf;
  const auto& d = dist.d;
  if (pmf.rows() == 0 || pmf.cols() == 0 || d.cols() == 0) {
    throw ModelError(K::empty_alphabet, "empty alphabet: |X|=" +
                                            std::to_string(pmf.rows()) +
                                            " |S|=" + std::to_string(pmf.cols()) +
                                            " |Y|=" + std::to_string(d.cols()));
  }
  if (d.rows() != pmf.rows()) {
    throw ModelError(K::shape_mismatch,
                     "distortion matrix has " + std::to_string(d.rows()) +
                         " rows but |X| = " + std::to_string(pmf.rows()));
  }
  const auto cell = [](Eigen::Index r, Eigen::Index c) {
    return "[" + std::to_string(r) + "][" + std::to_string(c) + "]";
  };

  Instance inst;
  inst.pmf_ = pmf;
  double total = 0.0;
  for (Eigen::Index x = 0; x < pmf.rows(); ++x) {
    for (Eigen::Index s = 0; s < pmf.cols(); ++s) {
      const double p = pmf(x, s);
      if (!std::isfinite(p)) {
        throw ModelError(K::non_finite, "pmf" + cell(x, s) + " is not finite");
      }
      if (p < 0.0) {
        throw ModelError(K::negative_probability,
                         "pmf" + cell(x, s) + " = " + std::to_string(p) +
                             " is negative");
      }
      total += p;
      if (p < kStructuralZero) inst.pmf_(x, s) = 0.0;
    }
  }
  if (std::abs(total - 1.0) > kPmfSumTolerance) {
    throw ModelError(K::sum_violation,
                     "pmf sums to " + std::to_string(total) + ", expected 1");
  }
  for (Eigen::Index x = 0; x < d.rows(); ++x) {
    for (Eigen::Index y = 0; y < d.cols(); ++y) {
      if (!std::isfinite(d(x, y))) {
        throw ModelError(K::non_finite, "d" + cell(x, y) + " is not finite");
      }
      if (d(x, y) < 0.0) {
        throw ModelError(K::negative_distortion,
                         "d" + cell(x, y) + " = " + std::to_string(d(x, y)) +
                             " is negative");
      }
    }
  }

  inst.d_ = d;
  inst.labels_ = source.labels;
  inst.p_s_ = inst.pmf_.colwise().sum().transpose();
  inst.p_x_ = inst.pmf_.rowwise().sum();
  inst.cond_ = Matrix::Zero(pmf.rows(), pmf.cols());
  for (Eigen::Index s = 0; s < pmf.cols(); ++s) {
    if (inst.p_s_(s) > 0.0) inst.cond_.col(s) = inst.pmf_.col(s) / inst.p_s_(s);
  }
  inst.d_max_ = d.maxCoeff();

  const Vector d_min_x = d.rowwise().minCoeff();
  inst.floor_ = inst.p_x_.dot(d_min_x);
  const auto ns = pmf.cols();
  inst.state_floor_ = Vector::Zero(ns);
  inst.state_zero_rate_ = Vector::Zero(ns);
  inst.state_zero_rate_output_.assign(static_cast<std::size_t>(ns), 0);
  inst.zero_rate_ = 0.0;
  for (Eigen::Index s = 0; s < ns; ++s) {
    const Vector c = inst.cond_.col(s);
    inst.state_floor_(s) = c.dot(d_min_x);
    // Expected distortion of each constant reconstruction.
    const Vector per_y = d.transpose() * c;
    Eigen::Index best = 0;
    inst.state_zero_rate_(s) = per_y.minCoeff(&best);
    inst.state_zero_rate_output_[static_cast<std::size_t>(s)] =
        static_cast<int>(best);
    inst.zero_rate_ += inst.p_s_(s) * inst.state_zero_rate_(s);
  }
  return inst;
}

/// Restricts an instance to a single side-information symbol by merging S.
inline Instance merge_side_information(const Instance& inst) {
  JointSource merged;
  merged.pmf = inst.p_x();
  return validate(merged, inst.distortion());
}

/// n i.i.d. draws from P_XS. Chunk c uses the stream derive_seed(seed, c), so
/// the output is a function of (seed, chunk_size) only.
inline SequencePair sample_iid(const Instance& inst, std::size_t n,
                               std::uint64_t seed,
                               std::size_t chunk_size = 4096,
                               unsigned threads = 1) {
  const int ns = inst.s_size();
  std::vector<double> flat;
  flat.reserve(static_cast<std::size_t>(inst.pmf().size()));
  for (int x = 0; x < inst.x_size(); ++x)
    for (int s = 0; s < ns; ++s) flat.push_back(inst.pmf(x, s));
  const std::vector<double> cdf = cumulative(flat);

  auto chunks = map_chunks(n, chunk_size, threads, [&](ChunkRange r) {
    Rng rng(derive_seed(seed, r.index));
    SequencePair part(r.end - r.begin);
    for (auto& sym : part) {
      const auto k = static_cast<int>(rng.categorical(cdf));
      sym = SymbolPair{k / ns, k % ns};
    }
    return part;
  });
  SequencePair out;
  out.reserve(n);
  for (auto& part : chunks) out.insert(out.end(), part.begin(), part.end());
  return out;
}

/// (1/n) sum_i d(x_i, y_i)
inline double sequence_distortion(std::span<const int> x, std::span<const int> y,
                                  const DistortionSpec& dist) {
  if (x.size() != y.size()) {
    throw std::invalid_argument("sequence_distortion: length mismatch (" +
                                std::to_string(x.size()) + " vs " +
                                std::to_string(y.size()) + ")");
  }
  if (x.empty()) throw std::invalid_argument("sequence_distortion: empty input");
  double total = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) total += dist.d(x[i], y[i]);
  return total / static_cast<double>(x.size());
}

}  // namespace fblcrd
