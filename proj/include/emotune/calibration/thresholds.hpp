#pragma once

#include <charconv>
#include <cstddef>
#include <sstream>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include "emotune/metrics/metrics.hpp"

namespace emotune {

/// The threshold grid {i/200 : 1 <= i <= 200}.
struct ThresholdGrid {
  static constexpr std::size_t kSize = 200;

  /// Grid value for index i in [1, 200].
  static constexpr double value(std::size_t i) { return static_cast<double>(i) / static_cast<double>(kSize); }

  /// The grid mapped affinely onto scores in (-1, 1]: 2·(i/200) − 1.
  static constexpr double score_value(std::size_t i) {
    return (2.0 * static_cast<double>(i) - static_cast<double>(kSize)) / static_cast<double>(kSize);
  }

  static std::vector<double> values() {
    std::vector<double> v;
    for (std::size_t i = 1; i <= kSize; ++i) v.push_back(value(i));
    return v;
  }
};

enum class Sentiment { negative, neutral, positive };

inline std::string_view to_string(Sentiment s) {
  switch (s) {
    case Sentiment::negative: return "neg";
    case Sentiment::neutral: return "neu";
    case Sentiment::positive: return "pos";
  }
  return "?";
}

inline Sentiment parse_sentiment(std::string_view s) {
  if (s == "neg") return Sentiment::negative;
  if (s == "neu") return Sentiment::neutral;
  if (s == "pos") return Sentiment::positive;
  throw std::invalid_argument("unknown sentiment tag '" + std::string(s) + "'");
}

struct PerCategoryThresholds {
  std::vector<std::string> categories;
  std::vector<double> thresholds;

  friend bool operator==(const PerCategoryThresholds&, const PerCategoryThresholds&) = default;
};

/// Score-space cut points: negative below `lower`, positive at or above `upper`.
struct NeutralPairThresholds {
  double lower = 0.0;
  double upper = 0.0;

  friend bool operator==(const NeutralPairThresholds&, const NeutralPairThresholds&) = default;
};

/// Thresholds for a two-unit (positive, negative) sigmoid decoder.
struct PnPairThresholds {
  double positive = 0.5;
  double negative = 0.5;

  friend bool operator==(const PnPairThresholds&, const PnPairThresholds&) = default;
};

using ThresholdSet = std::variant<PerCategoryThresholds, NeutralPairThresholds, PnPairThresholds>;

// ---- decision rules ------------------------------------------------------

inline int decide(double p, double t) { return p >= t ? 1 : 0; }

inline Sentiment decide_neutral(double score, const NeutralPairThresholds& t) {
  if (score < t.lower) return Sentiment::negative;
  if (score < t.upper) return Sentiment::neutral;
  return Sentiment::positive;
}

/// When both units clear their thresholds the larger margin wins; equal
/// margins resolve to neutral.
inline Sentiment decide_pn(double y_p, double y_n, const PnPairThresholds& t) {
  const bool pos = y_p >= t.positive, neg = y_n >= t.negative;
  if (pos && !neg) return Sentiment::positive;
  if (neg && !pos) return Sentiment::negative;
  if (!pos && !neg) return Sentiment::neutral;
  const double mp = y_p - t.positive, mn = y_n - t.negative;
  if (mp > mn) return Sentiment::positive;
  if (mn > mp) return Sentiment::negative;
  return Sentiment::neutral;
}

inline LabelMatrix apply_thresholds(const PerCategoryThresholds& t, const ScoreMatrix& preds) {
  LabelMatrix out;
  out.reserve(preds.size());
  for (const auto& row : preds) {
    if (row.size() != t.thresholds.size()) {
      throw std::invalid_argument("prediction row has " + std::to_string(row.size()) + " categories, thresholds have " +
                                  std::to_string(t.thresholds.size()));
    }
    std::vector<int> labels(row.size());
    for (std::size_t k = 0; k < row.size(); ++k) labels[k] = decide(row[k], t.thresholds[k]);
    out.push_back(std::move(labels));
  }
  return out;
}

inline LabelMatrix apply_thresholds(const ThresholdSet& set, const ScoreMatrix& preds) {
  const auto* t = std::get_if<PerCategoryThresholds>(&set);
  if (!t) throw std::invalid_argument("per-category predictions need per-category thresholds");
  return apply_thresholds(*t, preds);
}

inline std::vector<Sentiment> apply_thresholds(const ThresholdSet& set, std::span<const double> scores) {
  const auto* t = std::get_if<NeutralPairThresholds>(&set);
  if (!t) throw std::invalid_argument("scalar scores need a neutral threshold pair");
  std::vector<Sentiment> out;
  for (double s : scores) out.push_back(decide_neutral(s, *t));
  return out;
}

inline std::vector<Sentiment> apply_thresholds(const ThresholdSet& set, std::span<const double> y_p, std::span<const double> y_n) {
  const auto* t = std::get_if<PnPairThresholds>(&set);
  if (!t) throw std::invalid_argument("two-unit predictions need a positive/negative threshold pair");
  if (y_p.size() != y_n.size()) throw std::invalid_argument("positive and negative outputs differ in length");
  std::vector<Sentiment> out;
  for (std::size_t i = 0; i < y_p.size(); ++i) out.push_back(decide_pn(y_p[i], y_n[i], *t));
  return out;
}

// ---- searches ------------------------------------------------------------

struct CategorySearchResult {
  PerCategoryThresholds thresholds;
  std::vector<double> f1;  // per category at the chosen threshold
};

/// Per category, the smallest grid value maximizing that category's F1
/// under the rule p >= t.
inline CategorySearchResult search_category_thresholds(const ScoreMatrix& preds, const LabelMatrix& labels,
                                                       std::vector<std::string> categories = {}) {
  if (preds.size() != labels.size()) throw std::invalid_argument("predictions and labels differ in length");
  const std::size_t width = labels.empty() ? categories.size() : labels.front().size();
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (preds[i].size() != width || labels[i].size() != width) {
      throw std::invalid_argument("row " + std::to_string(i) + " has inconsistent category count");
    }
    for (double p : preds[i]) {
      if (!(p >= 0.0 && p <= 1.0)) throw std::invalid_argument("predictions must lie in [0, 1]");
    }
  }
  if (categories.empty()) {
    for (std::size_t k = 0; k < width; ++k) categories.push_back("c" + std::to_string(k));
  }
  if (categories.size() != width) throw std::invalid_argument("category names do not match label width");

  CategorySearchResult r;
  r.thresholds.categories = std::move(categories);
  for (std::size_t k = 0; k < width; ++k) {
    double best_t = ThresholdGrid::value(1), best_f1 = -1.0;
    for (std::size_t i = 1; i <= ThresholdGrid::kSize; ++i) {
      const double t = ThresholdGrid::value(i);
      CategoryCounts c;
      for (std::size_t n = 0; n < labels.size(); ++n) {
        const bool p = preds[n][k] >= t, y = labels[n][k] != 0;
        if (p && y) ++c.tp;
        else if (p) ++c.fp;
        else if (y) ++c.fn;
        else ++c.tn;
      }
      const double f = f1_score(c);
      if (f > best_f1) {
        best_f1 = f;
        best_t = t;
      }
    }
    r.thresholds.thresholds.push_back(best_t);
    r.f1.push_back(best_f1);
  }
  return r;
}

inline double three_class_accuracy(std::span<const Sentiment> predicted, std::span<const Sentiment> gold) {
  if (gold.empty()) return 0.0;
  std::size_t hit = 0;
  for (std::size_t i = 0; i < gold.size(); ++i) hit += predicted[i] == gold[i];
  return static_cast<double>(hit) / static_cast<double>(gold.size());
}

struct NeutralSearchResult {
  NeutralPairThresholds thresholds;
  std::size_t lower_index = 0;  // grid indices of the chosen pair
  std::size_t upper_index = 0;
  double accuracy = 0.0;
  std::vector<std::string> warnings;
};

/// Joint search over ordered grid pairs i < j, mapped onto the score range,
/// maximizing three-class accuracy. Ties go to the smallest (i, j).
inline NeutralSearchResult search_neutral_thresholds(std::span<const double> scores, std::span<const Sentiment> labels) {
  if (scores.size() != labels.size()) throw std::invalid_argument("scores and labels differ in length");
  NeutralSearchResult r;
  std::size_t per_class[3] = {0, 0, 0};
  for (Sentiment s : labels) ++per_class[static_cast<int>(s)];
  for (Sentiment s : {Sentiment::negative, Sentiment::neutral, Sentiment::positive}) {
    if (per_class[static_cast<int>(s)] == 0) {
      r.warnings.push_back("no examples labeled '" + std::string(to_string(s)) + "'");
    }
  }
  std::size_t best_hits = 0;
  bool found = false;
  for (std::size_t i = 1; i < ThresholdGrid::kSize; ++i) {
    const double lo = ThresholdGrid::score_value(i);
    for (std::size_t j = i + 1; j <= ThresholdGrid::kSize; ++j) {
      const NeutralPairThresholds t{lo, ThresholdGrid::score_value(j)};
      std::size_t hits = 0;
      for (std::size_t n = 0; n < scores.size(); ++n) hits += decide_neutral(scores[n], t) == labels[n];
      if (!found || hits > best_hits) {
        found = true;
        best_hits = hits;
        r.thresholds = t;
        r.lower_index = i;
        r.upper_index = j;
      }
    }
  }
  r.accuracy = scores.empty() ? 0.0 : static_cast<double>(best_hits) / static_cast<double>(scores.size());
  return r;
}

struct PnSearchResult {
  PnPairThresholds thresholds;
  double accuracy = 0.0;
};

/// Exhaustive search of T × T maximizing three-class accuracy; ties go to
/// the lexicographically smallest (t_p, t_n).
inline PnSearchResult search_pn_thresholds(std::span<const double> y_p, std::span<const double> y_n,
                                           std::span<const Sentiment> labels) {
  if (y_p.size() != y_n.size() || y_p.size() != labels.size()) {
    throw std::invalid_argument("positive outputs, negative outputs and labels differ in length");
  }
  for (std::size_t i = 0; i < y_p.size(); ++i) {
    if (!(y_p[i] >= 0.0 && y_p[i] <= 1.0 && y_n[i] >= 0.0 && y_n[i] <= 1.0)) {
      throw std::invalid_argument("probabilities must lie in [0, 1]");
    }
  }
  PnSearchResult r;
  std::size_t best_hits = 0;
  bool found = false;
  for (std::size_t i = 1; i <= ThresholdGrid::kSize; ++i) {
    for (std::size_t j = 1; j <= ThresholdGrid::kSize; ++j) {
      const PnPairThresholds t{ThresholdGrid::value(i), ThresholdGrid::value(j)};
      std::size_t hits = 0;
      for (std::size_t n = 0; n < labels.size(); ++n) hits += decide_pn(y_p[n], y_n[n], t) == labels[n];
      if (!found || hits > best_hits) {
        found = true;
        best_hits = hits;
        r.thresholds = t;
      }
    }
  }
  r.accuracy = labels.empty() ? 0.0 : static_cast<double>(best_hits) / static_cast<double>(labels.size());
  return r;
}

// ---- persistence ---------------------------------------------------------

inline constexpr std::string_view kThresholdFormatTag = "emotune-thresholds 1";

inline std::string serialize_thresholds(const ThresholdSet& set) {
  std::ostringstream os;
  os << kThresholdFormatTag << '\n';
  auto num = [](double v) { return metrics_detail::format_double(v); };
  if (const auto* t = std::get_if<PerCategoryThresholds>(&set)) {
    os << "kind = per_category\n";
    for (std::size_t k = 0; k < t->thresholds.size(); ++k) os << "category." << t->categories[k] << " = " << num(t->thresholds[k]) << '\n';
  } else if (const auto* t = std::get_if<NeutralPairThresholds>(&set)) {
    os << "kind = neutral_pair\nlower = " << num(t->lower) << "\nupper = " << num(t->upper) << '\n';
  } else if (const auto* t = std::get_if<PnPairThresholds>(&set)) {
    os << "kind = pn_pair\npositive = " << num(t->positive) << "\nnegative = " << num(t->negative) << '\n';
  }
  return os.str();
}

inline ThresholdSet parse_thresholds(std::string_view text) {
  std::istringstream is{std::string(text)};
  std::string line;
  if (!std::getline(is, line) || line != kThresholdFormatTag) throw std::invalid_argument("not a thresholds file");
  std::vector<std::pair<std::string, std::string>> entries;
  while (std::getline(is, line)) {
    if (line.empty() || line[0] == '#') continue;
    const auto eq = line.find(" = ");
    if (eq == std::string::npos) throw std::invalid_argument("malformed thresholds line '" + line + "'");
    entries.emplace_back(line.substr(0, eq), line.substr(eq + 3));
  }
  auto number = [](const std::string& s) {
    double v = 0.0;
    auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc() || ptr != s.data() + s.size()) throw std::invalid_argument("bad threshold value '" + s + "'");
    return v;
  };
  if (entries.empty() || entries.front().first != "kind") throw std::invalid_argument("thresholds file lacks a kind");
  const std::string kind = entries.front().second;
  auto lookup = [&](const std::string& key) {
    for (const auto& [k, v] : entries)
      if (k == key) return number(v);
    throw std::invalid_argument("thresholds file lacks '" + key + "'");
  };
  if (kind == "per_category") {
    PerCategoryThresholds t;
    for (std::size_t i = 1; i < entries.size(); ++i) {
      if (entries[i].first.rfind("category.", 0) != 0) throw std::invalid_argument("unexpected key '" + entries[i].first + "'");
      t.categories.push_back(entries[i].first.substr(9));
      t.thresholds.push_back(number(entries[i].second));
    }
    return t;
  }
  if (kind == "neutral_pair") return NeutralPairThresholds{lookup("lower"), lookup("upper")};
  if (kind == "pn_pair") return PnPairThresholds{lookup("positive"), lookup("negative")};
  throw std::invalid_argument("unknown thresholds kind '" + kind + "'");
}

}  // namespace emotune
