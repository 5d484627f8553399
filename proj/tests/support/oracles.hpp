#pragma once

#include <algorithm>
#include <map>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "emotune/calibration/thresholds.hpp"
#include "emotune/metrics/metrics.hpp"
#include "emotune/numerics/random.hpp"
#include "emotune/tokenizer/bpe.hpp"

namespace emotune::testing_support {

// ---- brute-force oracles over the raw grid ---------------------------------

inline double grid(int i) { return i / 200.0; }

inline double oracle_category_f1(const std::vector<double>& p, const std::vector<int>& y, double t) {
  long tp = 0, fp = 0, fn = 0;
  for (std::size_t n = 0; n < p.size(); ++n) {
    const int pred = p[n] >= t;
    tp += pred && y[n];
    fp += pred && !y[n];
    fn += !pred && y[n];
  }
  if (tp + fp + fn == 0) return 1.0;
  return static_cast<double>(2 * tp) / static_cast<double>(2 * tp + fp + fn);
}

inline double oracle_category_threshold(const std::vector<double>& p, const std::vector<int>& y) {
  double best = -1.0, best_t = 0.0;
  for (int i = 1; i <= 200; ++i) {
    const double f = oracle_category_f1(p, y, grid(i));
    if (f > best) best = f, best_t = grid(i);
  }
  return best_t;
}

inline std::pair<double, double> oracle_neutral(const std::vector<double>& s, const std::vector<Sentiment>& y) {
  auto mapped = [](int i) { return (2.0 * i - 200.0) / 200.0; };
  long best = -1;
  std::pair<double, double> out;
  for (int i = 1; i <= 200; ++i)
    for (int j = i + 1; j <= 200; ++j) {
      long hits = 0;
      for (std::size_t n = 0; n < s.size(); ++n) {
        Sentiment d = Sentiment::positive;
        if (s[n] < mapped(i)) d = Sentiment::negative;
        else if (s[n] < mapped(j)) d = Sentiment::neutral;
        hits += d == y[n];
      }
      if (hits > best) best = hits, out = {mapped(i), mapped(j)};
    }
  return out;
}

inline Sentiment oracle_pn_rule(double yp, double yn, double tp, double tn) {
  if (yp >= tp && yn >= tn) {
    if (yp - tp == yn - tn) return Sentiment::neutral;
    return yp - tp > yn - tn ? Sentiment::positive : Sentiment::negative;
  }
  if (yp >= tp) return Sentiment::positive;
  if (yn >= tn) return Sentiment::negative;
  return Sentiment::neutral;
}

inline std::pair<double, double> oracle_pn(const std::vector<double>& yp, const std::vector<double>& yn,
                                    const std::vector<Sentiment>& y) {
  long best = -1;
  std::pair<double, double> out;
  for (int i = 1; i <= 200; ++i)
    for (int j = 1; j <= 200; ++j) {
      long hits = 0;
      for (std::size_t n = 0; n < y.size(); ++n) hits += oracle_pn_rule(yp[n], yn[n], grid(i), grid(j)) == y[n];
      if (hits > best) best = hits, out = {grid(i), grid(j)};
    }
  return out;
}

inline ScoreMatrix column(const std::vector<double>& v) {
  ScoreMatrix m;
  for (double x : v) m.push_back({x});
  return m;
}

inline LabelMatrix column(const std::vector<int>& v) {
  LabelMatrix m;
  for (int x : v) m.push_back({x});
  return m;
}


// Set-based reference implementation, written from the metric definitions.
struct OracleScores {
  double macro;
  double micro;
  double jaccard;
};

inline double oracle_f1(long tp, long fp, long fn) {
  if (tp == 0 && fp == 0 && fn == 0) return 1.0;
  if (tp == 0) return 0.0;
  return static_cast<double>(2 * tp) / static_cast<double>(2 * tp + fp + fn);
}

inline OracleScores oracle(const LabelMatrix& p, const LabelMatrix& y) {
  const std::size_t n = y.size(), c = y.front().size();
  double macro = 0.0;
  long stp = 0, sfp = 0, sfn = 0;
  for (std::size_t k = 0; k < c; ++k) {
    long tp = 0, fp = 0, fn = 0;
    for (std::size_t i = 0; i < n; ++i) {
      tp += p[i][k] == 1 && y[i][k] == 1;
      fp += p[i][k] == 1 && y[i][k] == 0;
      fn += p[i][k] == 0 && y[i][k] == 1;
    }
    macro += oracle_f1(tp, fp, fn);
    stp += tp;
    sfp += fp;
    sfn += fn;
  }
  double jac = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    std::set<std::size_t> ps, ys, inter, uni;
    for (std::size_t k = 0; k < c; ++k) {
      if (p[i][k]) ps.insert(k);
      if (y[i][k]) ys.insert(k);
    }
    std::set_intersection(ps.begin(), ps.end(), ys.begin(), ys.end(), std::inserter(inter, inter.end()));
    std::set_union(ps.begin(), ps.end(), ys.begin(), ys.end(), std::inserter(uni, uni.end()));
    jac += uni.empty() ? 1.0 : static_cast<double>(inter.size()) / static_cast<double>(uni.size());
  }
  return {macro / static_cast<double>(c), oracle_f1(stp, sfp, sfn), jac / static_cast<double>(n)};
}

using StringPair = std::pair<std::string, std::string>;

// Brute-force BPE over explicit string symbols: every word occurrence is
// rescanned for every merge, with no shared bookkeeping with the library.
inline std::vector<StringPair> oracle_merges(const std::string& corpus, std::size_t max_merges) {
  std::vector<std::vector<std::string>> words;
  std::vector<std::string> cur;
  for (char c : corpus) {
    if ((c == ' ' || c == '\n' || c == '\t' || c == '\r') && !cur.empty()) {
      words.push_back(cur);
      cur.clear();
    }
    cur.emplace_back(1, c);
  }
  if (!cur.empty()) words.push_back(cur);

  std::vector<StringPair> merges;
  while (merges.size() < max_merges) {
    std::map<StringPair, long> counts;
    for (const auto& w : words)
      for (std::size_t i = 0; i + 1 < w.size(); ++i) ++counts[{w[i], w[i + 1]}];
    StringPair best;
    long best_count = 0;
    for (const auto& [p, c] : counts) {
      if (c > best_count) {  // std::map iterates pairs in lexicographic order
        best = p;
        best_count = c;
      }
    }
    if (best_count < 2) break;
    merges.push_back(best);
    for (auto& w : words) {
      std::vector<std::string> out;
      for (std::size_t i = 0; i < w.size(); ++i) {
        if (i + 1 < w.size() && w[i] == best.first && w[i + 1] == best.second) {
          out.push_back(w[i] + w[i + 1]);
          ++i;
        } else {
          out.push_back(w[i]);
        }
      }
      w = std::move(out);
    }
  }
  return merges;
}

inline std::vector<StringPair> merge_strings(const BpeModel& m) {
  std::vector<StringPair> out;
  for (const Merge& mg : m.merges()) out.emplace_back(m.token(mg.left), m.token(mg.right));
  return out;
}

inline std::size_t base_vocab(const BpeModel& m) { return BpeModel::kSpecialCount + m.alphabet_size(); }

inline std::string synthetic_corpus(std::size_t bytes, std::uint64_t seed) {
  static const std::vector<std::string> words = {"joy",   "anger",  "trust",   "fear",  "surprise", "sad",
                                                 "the",   "stock",  "game",    "was",   "so",       "not",
                                                 "great", "today!", "really?", "happy", "\tlol",    "\xC3\xA9t\xC3\xA9"};
  Rng rng(seed);
  std::string out;
  while (out.size() < bytes) {
    out += words[rng.below(words.size())];
    out += rng.below(10) == 0 ? "\n" : (rng.below(20) == 0 ? "  " : " ");
  }
  return out;
}

}  // namespace emotune::testing_support
