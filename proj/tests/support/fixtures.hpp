#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "emotune/data/dataset.hpp"
#include "emotune/numerics/random.hpp"
#include "emotune/util/files.hpp"

namespace emotune::fixtures {

inline const std::vector<std::string>& filler_words() {
  static const std::vector<std::string> w{"the",  "game", "was",   "today", "stock", "price", "my",   "team",
                                          "went", "out",  "again", "with",  "news",  "this",  "week", "just"};
  return w;
}

/// Words that mark category k in synthetic texts.
inline std::string marker_word(std::size_t k) {
  static const std::vector<std::string> w{"furious", "awaiting", "gross",  "scared", "happy", "gloomy",
                                          "shocked", "reliable", "loving", "hopeful", "doomed"};
  return w.at(k % w.size()) + (k >= w.size() ? std::to_string(k) : "");
}

/// Category k is positive iff its marker word occurs in the text.
inline LabeledDataset marker_dataset(std::size_t n, const std::vector<std::string>& categories, std::uint64_t seed,
                                     double rate = 0.3) {
  Rng rng(seed);
  LabeledDataset ds;
  ds.categories = categories;
  for (std::size_t i = 0; i < n; ++i) {
    LabeledExample x;
    x.id = "ex" + std::to_string(i);
    std::vector<std::string> words;
    const std::size_t len = 3 + rng.below(4);
    for (std::size_t t = 0; t < len; ++t) words.push_back(filler_words()[rng.below(filler_words().size())]);
    x.labels.assign(categories.size(), 0);
    for (std::size_t k = 0; k < categories.size(); ++k) {
      if (rng.uniform() < rate) {
        x.labels[k] = 1;
        words.insert(words.begin() + static_cast<std::ptrdiff_t>(rng.below(words.size() + 1)), marker_word(k));
      }
    }
    for (std::size_t t = 0; t < words.size(); ++t) x.text += (t ? " " : "") + words[t];
    ds.examples.push_back(std::move(x));
  }
  return ds;
}

inline std::string corpus_text(const LabeledDataset& ds) {
  std::string out;
  for (const auto& x : ds.examples) out += x.text + "\n";
  return out;
}

/// A fresh, empty directory under the system temporary directory.
inline std::filesystem::path scratch_dir(const std::string& name) {
  const auto dir = std::filesystem::temp_directory_path() / ("emotune_" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

}  // namespace emotune::fixtures
