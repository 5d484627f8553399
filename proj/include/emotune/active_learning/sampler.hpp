#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "emotune/metrics/metrics.hpp"
#include "emotune/numerics/random.hpp"

namespace emotune {

struct ClassWeights {
  std::vector<double> v;  // per-category fraction of negative labels
  std::vector<double> w;  // 10 (v - 0.5)
};

inline ClassWeights weights_from_negative_fraction(std::vector<double> v) {
  ClassWeights cw;
  for (double x : v) {
    if (!(x >= 0.0 && x <= 1.0)) throw std::invalid_argument("negative fraction must lie in [0, 1]");
    cw.w.push_back(10.0 * (x - 0.5));
  }
  cw.v = std::move(v);
  return cw;
}

inline ClassWeights class_weights(const LabelMatrix& labeled) {
  if (labeled.empty()) throw std::invalid_argument("class weights need a nonempty labeled set");
  const std::size_t width = labeled.front().size();
  std::vector<std::size_t> negatives(width, 0);
  for (const auto& row : labeled) {
    if (row.size() != width) throw std::invalid_argument("labeled rows have inconsistent category count");
    for (std::size_t k = 0; k < width; ++k) negatives[k] += row[k] == 0;
  }
  std::vector<double> v;
  for (std::size_t n : negatives) v.push_back(static_cast<double>(n) / static_cast<double>(labeled.size()));
  return weights_from_negative_fraction(std::move(v));
}

/// s_j = exp(w · p_j), where `predictions` holds one row of category
/// probabilities per unlabeled example.
inline std::vector<double> score_pool(const ScoreMatrix& predictions, std::span<const double> w) {
  std::vector<double> s;
  s.reserve(predictions.size());
  for (std::size_t j = 0; j < predictions.size(); ++j) {
    const auto& p = predictions[j];
    if (p.size() != w.size()) {
      throw std::invalid_argument("pool example " + std::to_string(j) + " has " + std::to_string(p.size()) +
                                  " categories, weights have " + std::to_string(w.size()));
    }
    double dot = 0.0;
    for (std::size_t k = 0; k < w.size(); ++k) dot += w[k] * p[k];
    s.push_back(std::exp(dot));
  }
  return s;
}

namespace al_detail {

// Fenwick tree over nonnegative weights.
class Fenwick {
 public:
  explicit Fenwick(std::span<const double> w) : tree_(w.size() + 1, 0.0), raw_(w.begin(), w.end()) {
    for (std::size_t i = 0; i < w.size(); ++i) add(i, w[i]);
  }

  void remove(std::size_t i) {
    add(i, -raw_[i]);
    raw_[i] = 0.0;
  }

  double total() const { return prefix(raw_.size()); }

  /// Index i whose cumulative interval contains `target`.
  std::size_t find(double target) const {
    std::size_t pos = 0, step = 1;
    while (step * 2 <= raw_.size()) step *= 2;
    for (; step > 0; step /= 2) {
      if (pos + step <= raw_.size() && tree_[pos + step] <= target) {
        pos += step;
        target -= tree_[pos];
      }
    }
    std::size_t i = std::min(pos, raw_.size() - 1);
    // Rounding can land on an exhausted slot; move to a live neighbour.
    if (raw_[i] <= 0.0) {
      std::size_t j = i;
      while (j > 0 && raw_[j] <= 0.0) --j;
      if (raw_[j] <= 0.0) {
        j = i;
        while (j + 1 < raw_.size() && raw_[j] <= 0.0) ++j;
      }
      i = j;
    }
    return i;
  }

 private:
  void add(std::size_t i, double d) {
    for (std::size_t k = i + 1; k < tree_.size(); k += k & (~k + 1)) tree_[k] += d;
  }
  double prefix(std::size_t n) const {
    double s = 0.0;
    for (std::size_t k = n; k > 0; k -= k & (~k + 1)) s += tree_[k];
    return s;
  }

  std::vector<double> tree_;
  std::vector<double> raw_;
};

}  // namespace al_detail

/// Weighted sampling without replacement: k successive draws, each
/// proportional to the weights of the items not yet taken.
inline std::vector<std::string> sample(std::span<const std::string> ids, std::span<const double> s, std::size_t k,
                                       std::uint64_t seed) {
  if (ids.size() != s.size()) throw std::invalid_argument("ids and scores differ in length");
  if (k > ids.size()) {
    throw std::invalid_argument("cannot select " + std::to_string(k) + " from a pool of " + std::to_string(ids.size()));
  }
  for (double x : s) {
    if (!(x > 0.0) || !std::isfinite(x)) throw std::invalid_argument("sampling weights must be positive and finite");
  }
  al_detail::Fenwick tree(s);
  Rng rng(seed);
  std::vector<std::string> out;
  out.reserve(k);
  for (std::size_t n = 0; n < k; ++n) {
    const std::size_t i = tree.find(rng.uniform() * tree.total());
    out.push_back(ids[i]);
    tree.remove(i);
  }
  return out;
}

}  // namespace emotune
