#pragma once

#include <charconv>
#include <cstddef>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

namespace emotune {

/// Row per example, column per category, entries 0 or 1.
using LabelMatrix = std::vector<std::vector<int>>;
/// Row per example, column per category, probabilities in [0, 1].
using ScoreMatrix = std::vector<std::vector<double>>;

struct CategoryCounts {
  std::size_t tp = 0;
  std::size_t fp = 0;
  std::size_t tn = 0;
  std::size_t fn = 0;

  std::size_t total() const noexcept { return tp + fp + tn + fn; }
  friend bool operator==(const CategoryCounts&, const CategoryCounts&) = default;
};

struct Confusion {
  std::vector<CategoryCounts> per_category;
  std::size_t examples = 0;
};

/// F1 with the zero-positive convention: 1 when there is nothing to find and
/// nothing was predicted, otherwise 0 whenever TP is 0.
inline double f1_score(const CategoryCounts& c) {
  if (c.tp == 0) return c.fp == 0 && c.fn == 0 ? 1.0 : 0.0;
  return 2.0 * static_cast<double>(c.tp) / static_cast<double>(2 * c.tp + c.fp + c.fn);
}

namespace metrics_detail {

inline std::size_t check_shapes(const LabelMatrix& preds, const LabelMatrix& labels) {
  if (preds.size() != labels.size()) {
    throw std::invalid_argument("prediction rows " + std::to_string(preds.size()) + " vs label rows " +
                                std::to_string(labels.size()));
  }
  const std::size_t width = labels.empty() ? 0 : labels.front().size();
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (preds[i].size() != width || labels[i].size() != width) {
      throw std::invalid_argument("row " + std::to_string(i) + " has inconsistent category count");
    }
  }
  return width;
}

inline std::string format_double(double v) {
  char buf[64];
  auto [end, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, end);
}

}  // namespace metrics_detail

inline Confusion confusion(const LabelMatrix& preds, const LabelMatrix& labels) {
  const std::size_t width = metrics_detail::check_shapes(preds, labels);
  Confusion c;
  c.examples = labels.size();
  c.per_category.resize(width);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    for (std::size_t k = 0; k < width; ++k) {
      auto& cc = c.per_category[k];
      const bool p = preds[i][k] != 0, y = labels[i][k] != 0;
      if (p && y) ++cc.tp;
      else if (p) ++cc.fp;
      else if (y) ++cc.fn;
      else ++cc.tn;
    }
  }
  return c;
}

inline double macro_f1(const Confusion& c) {
  if (c.per_category.empty()) throw std::invalid_argument("macro F1 needs at least one category");
  double s = 0.0;
  for (const auto& cc : c.per_category) s += f1_score(cc);
  return s / static_cast<double>(c.per_category.size());
}

inline double micro_f1(const Confusion& c) {
  if (c.per_category.empty()) throw std::invalid_argument("micro F1 needs at least one category");
  CategoryCounts pooled;
  for (const auto& cc : c.per_category) {
    pooled.tp += cc.tp;
    pooled.fp += cc.fp;
    pooled.tn += cc.tn;
    pooled.fn += cc.fn;
  }
  return f1_score(pooled);
}

/// Mean per-example intersection over union of label sets; an example with
/// empty predicted and gold sets scores 1.
inline double jaccard_accuracy(const LabelMatrix& preds, const LabelMatrix& labels) {
  const std::size_t width = metrics_detail::check_shapes(preds, labels);
  if (labels.empty()) throw std::invalid_argument("jaccard accuracy of an empty set");
  double total = 0.0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    std::size_t inter = 0, uni = 0;
    for (std::size_t k = 0; k < width; ++k) {
      const bool p = preds[i][k] != 0, y = labels[i][k] != 0;
      inter += p && y;
      uni += p || y;
    }
    total += uni == 0 ? 1.0 : static_cast<double>(inter) / static_cast<double>(uni);
  }
  return total / static_cast<double>(labels.size());
}

/// Mean per-category binary accuracy.
inline double mean_binary_accuracy(const LabelMatrix& preds, const LabelMatrix& labels) {
  const std::size_t width = metrics_detail::check_shapes(preds, labels);
  if (labels.empty() || width == 0) throw std::invalid_argument("accuracy of an empty set");
  std::size_t correct = 0;
  for (std::size_t i = 0; i < labels.size(); ++i)
    for (std::size_t k = 0; k < width; ++k) correct += (preds[i][k] != 0) == (labels[i][k] != 0);
  return static_cast<double>(correct) / static_cast<double>(labels.size() * width);
}

struct MetricReport {
  std::vector<std::string> categories;
  std::vector<double> per_category_f1;
  double macro_f1 = 0.0;
  double micro_f1 = 0.0;
  double jaccard_accuracy = 0.0;

  /// One `name value` pair per line; values print in shortest round-trip form.
  std::string to_text() const {
    std::string out;
    out += "macro_f1 " + metrics_detail::format_double(macro_f1) + "\n";
    out += "micro_f1 " + metrics_detail::format_double(micro_f1) + "\n";
    out += "jaccard_accuracy " + metrics_detail::format_double(jaccard_accuracy) + "\n";
    for (std::size_t i = 0; i < categories.size(); ++i) {
      out += "f1." + categories[i] + " " + metrics_detail::format_double(per_category_f1[i]) + "\n";
    }
    return out;
  }

  nlohmann::json to_json() const {
    nlohmann::json per = nlohmann::json::object();
    for (std::size_t i = 0; i < categories.size(); ++i) per[categories[i]] = per_category_f1[i];
    return {{"macro_f1", macro_f1}, {"micro_f1", micro_f1}, {"jaccard_accuracy", jaccard_accuracy}, {"f1", per}};
  }

  friend bool operator==(const MetricReport&, const MetricReport&) = default;
};

inline MetricReport evaluate_labels(const LabelMatrix& preds, const LabelMatrix& labels,
                                    std::vector<std::string> categories) {
  const Confusion c = confusion(preds, labels);
  if (categories.size() != c.per_category.size()) {
    throw std::invalid_argument("category names do not match label width");
  }
  MetricReport r;
  r.categories = std::move(categories);
  for (const auto& cc : c.per_category) r.per_category_f1.push_back(f1_score(cc));
  r.macro_f1 = macro_f1(c);
  r.micro_f1 = micro_f1(c);
  r.jaccard_accuracy = jaccard_accuracy(preds, labels);
  return r;
}

}  // namespace emotune
