#pragma once

#include <charconv>
#include <filesystem>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "emotune/calibration/thresholds.hpp"
#include "emotune/metrics/metrics.hpp"
#include "emotune/util/files.hpp"

namespace emotune {

class DatasetError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline const std::vector<std::string>& plutchik_categories() {
  static const std::vector<std::string> c{"anger", "anticipation", "disgust", "fear",
                                          "joy",   "sadness",      "surprise", "trust"};
  return c;
}

inline const std::vector<std::string>& semeval_categories() {
  static const std::vector<std::string> c{"anger", "anticipation", "disgust", "fear",    "joy",  "love",
                                          "optimism", "pessimism", "sadness", "surprise", "trust"};
  return c;
}

struct LabeledExample {
  std::string id;
  std::string text;
  std::vector<int> labels;  // aligned with the dataset's categories
  std::optional<Sentiment> sentiment;

  friend bool operator==(const LabeledExample&, const LabeledExample&) = default;
};

struct LabeledDataset {
  std::vector<std::string> categories;
  std::vector<LabeledExample> examples;

  LabelMatrix labels() const {
    LabelMatrix y;
    for (const auto& x : examples) y.push_back(x.labels);
    return y;
  }

  friend bool operator==(const LabeledDataset&, const LabeledDataset&) = default;
};

/// One JSON object per line: {"id", "text", "labels": {category: 0|1}} with
/// an optional "sentiment": "neg"|"neu"|"pos". Categories missing from
/// "labels" are 0. Blank lines are skipped.
inline LabeledDataset parse_dataset(std::string_view text, const std::vector<std::string>& categories) {
  std::map<std::string, std::size_t, std::less<>> index;
  for (std::size_t k = 0; k < categories.size(); ++k) index.emplace(categories[k], k);
  LabeledDataset ds;
  ds.categories = categories;
  std::set<std::string> seen;
  std::size_t line_no = 0;
  std::size_t pos = 0;
  while (pos <= text.size()) {
    const std::size_t end = std::min(text.find('\n', pos), text.size());
    std::string_view line = text.substr(pos, end - pos);
    pos = end + 1;
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
    if (line.find_first_not_of(" \t") == std::string_view::npos) {
      if (end == text.size()) break;
      continue;
    }
    const auto fail = [&](const std::string& what) {
      return DatasetError("line " + std::to_string(line_no) + ": " + what);
    };
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::parse_error& e) {
      throw fail(std::string("malformed JSON: ") + e.what());
    }
    if (!j.is_object()) throw fail("record is not an object");
    LabeledExample x;
    if (!j.contains("id") || !j["id"].is_string()) throw fail("missing string field \"id\"");
    if (!j.contains("text") || !j["text"].is_string()) throw fail("missing string field \"text\"");
    x.id = j["id"].get<std::string>();
    x.text = j["text"].get<std::string>();
    if (x.text.empty()) throw fail("empty text");
    if (!seen.insert(x.id).second) throw fail("duplicate id '" + x.id + "'");
    x.labels.assign(categories.size(), 0);
    if (j.contains("labels")) {
      if (!j["labels"].is_object()) throw fail("\"labels\" is not an object");
      for (const auto& [cat, v] : j["labels"].items()) {
        auto it = index.find(cat);
        if (it == index.end()) throw fail("unknown category '" + cat + "'");
        if (!v.is_number_integer() || (v.get<int>() != 0 && v.get<int>() != 1)) {
          throw fail("label for '" + cat + "' must be 0 or 1");
        }
        x.labels[it->second] = v.get<int>();
      }
    }
    if (j.contains("sentiment")) {
      if (!j["sentiment"].is_string()) throw fail("\"sentiment\" is not a string");
      try {
        x.sentiment = parse_sentiment(j["sentiment"].get<std::string>());
      } catch (const std::invalid_argument& e) {
        throw fail(e.what());
      }
    }
    ds.examples.push_back(std::move(x));
    if (end == text.size()) break;
  }
  return ds;
}

inline LabeledDataset load_dataset(const std::filesystem::path& path, const std::vector<std::string>& categories) {
  try {
    return parse_dataset(read_file(path), categories);
  } catch (const DatasetError& e) {
    throw DatasetError(path.string() + ": " + e.what());
  }
}

inline std::string serialize_dataset(const LabeledDataset& ds) {
  std::string out;
  for (const auto& x : ds.examples) {
    nlohmann::ordered_json j;
    j["id"] = x.id;
    j["text"] = x.text;
    nlohmann::ordered_json labels = nlohmann::ordered_json::object();
    for (std::size_t k = 0; k < ds.categories.size(); ++k) labels[ds.categories[k]] = x.labels[k];
    j["labels"] = labels;
    if (x.sentiment) j["sentiment"] = std::string(to_string(*x.sentiment));
    out += j.dump() + "\n";
  }
  return out;
}

// ---- prediction tables ---------------------------------------------------

/// Tab-separated: a header "id\t<column>..." then one row of scores per id.
struct PredictionTable {
  std::vector<std::string> columns;
  std::vector<std::string> ids;
  ScoreMatrix scores;

  friend bool operator==(const PredictionTable&, const PredictionTable&) = default;

  /// Rows reordered to follow `order`; every id must be present.
  ScoreMatrix aligned(const std::vector<std::string>& order) const {
    std::map<std::string_view, std::size_t> at;
    for (std::size_t i = 0; i < ids.size(); ++i) at.emplace(ids[i], i);
    ScoreMatrix out;
    for (const auto& id : order) {
      auto it = at.find(id);
      if (it == at.end()) throw DatasetError("no prediction for id '" + id + "'");
      out.push_back(scores[it->second]);
    }
    return out;
  }
};

inline std::string serialize_predictions(const PredictionTable& t) {
  std::string out = "id";
  for (const auto& c : t.columns) out += "\t" + c;
  out += "\n";
  for (std::size_t i = 0; i < t.ids.size(); ++i) {
    out += t.ids[i];
    for (double v : t.scores[i]) out += "\t" + metrics_detail::format_double(v);
    out += "\n";
  }
  return out;
}

inline PredictionTable parse_predictions(std::string_view text) {
  auto split_tabs = [](std::string_view line) {
    std::vector<std::string_view> f;
    std::size_t p = 0;
    while (true) {
      const std::size_t q = line.find('\t', p);
      f.push_back(line.substr(p, q == std::string_view::npos ? std::string_view::npos : q - p));
      if (q == std::string_view::npos) break;
      p = q + 1;
    }
    return f;
  };
  PredictionTable t;
  std::size_t line_no = 0, pos = 0;
  while (pos < text.size()) {
    const std::size_t end = std::min(text.find('\n', pos), text.size());
    std::string_view line = text.substr(pos, end - pos);
    pos = end + 1;
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
    if (line.empty()) continue;
    const auto fields = split_tabs(line);
    if (line_no == 1) {
      if (fields.front() != "id") throw DatasetError("predictions header must start with 'id'");
      for (std::size_t i = 1; i < fields.size(); ++i) t.columns.emplace_back(fields[i]);
      continue;
    }
    if (fields.size() != t.columns.size() + 1) {
      throw DatasetError("predictions line " + std::to_string(line_no) + " has " + std::to_string(fields.size()) +
                         " fields, expected " + std::to_string(t.columns.size() + 1));
    }
    t.ids.emplace_back(fields[0]);
    std::vector<double> row;
    for (std::size_t i = 1; i < fields.size(); ++i) {
      double v = 0.0;
      auto [p, ec] = std::from_chars(fields[i].data(), fields[i].data() + fields[i].size(), v);
      if (ec != std::errc() || p != fields[i].data() + fields[i].size()) {
        throw DatasetError("predictions line " + std::to_string(line_no) + ": bad number '" + std::string(fields[i]) + "'");
      }
      row.push_back(v);
    }
    t.scores.push_back(std::move(row));
  }
  if (line_no == 0) throw DatasetError("predictions file is empty");
  return t;
}

}  // namespace emotune
