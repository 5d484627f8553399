#pragma once

#include <algorithm>
#include <array>
#include <cstdint>
#include <istream>
#include <iterator>
#include <limits>
#include <map>
#include <optional>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

namespace emotune {

class TokenizerError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

namespace bpe_detail {

/// Whitespace bytes begin a new word; the leading whitespace byte is the
/// word-boundary marker and never merges with the previous word.
inline bool is_boundary(unsigned char c) { return c == ' ' || c == '\n' || c == '\t' || c == '\r'; }

inline std::vector<std::string_view> split_words(std::string_view text) {
  std::vector<std::string_view> words;
  std::size_t start = 0;
  for (std::size_t i = 1; i <= text.size(); ++i) {
    if (i == text.size() || is_boundary(static_cast<unsigned char>(text[i]))) {
      if (i > start) words.push_back(text.substr(start, i - start));
      start = i;
    }
  }
  return words;
}

inline std::string escape(std::string_view s) {
  static constexpr char hex[] = "0123456789abcdef";
  std::string out;
  for (unsigned char c : s) {
    if (c == '\\') {
      out += "\\\\";
    } else if (c > 0x20 && c < 0x7f) {
      out += static_cast<char>(c);
    } else {
      out += "\\x";
      out += hex[c >> 4];
      out += hex[c & 15];
    }
  }
  return out;
}

inline std::string unescape(std::string_view s) {
  auto nibble = [](char c) -> int {
    if (c >= '0' && c <= '9') return c - '0';
    if (c >= 'a' && c <= 'f') return c - 'a' + 10;
    throw TokenizerError("bad hex digit in token escape");
  };
  std::string out;
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (s[i] != '\\') {
      out += s[i];
      continue;
    }
    if (i + 1 < s.size() && s[i + 1] == '\\') {
      out += '\\';
      i += 1;
    } else if (i + 3 < s.size() && s[i + 1] == 'x') {
      out += static_cast<char>(nibble(s[i + 2]) * 16 + nibble(s[i + 3]));
      i += 3;
    } else {
      throw TokenizerError("truncated escape in token '" + std::string(s) + "'");
    }
  }
  return out;
}

struct PairHash {
  std::size_t operator()(const std::pair<int, int>& p) const noexcept {
    return std::hash<std::uint64_t>{}((static_cast<std::uint64_t>(static_cast<std::uint32_t>(p.first)) << 32) |
                                      static_cast<std::uint32_t>(p.second));
  }
};

}  // namespace bpe_detail

struct Merge {
  int left;
  int right;
  int result;

  friend bool operator==(const Merge&, const Merge&) = default;
};

/// Ordered byte-pair merges over a byte alphabet, plus the id table.
///
/// Ids are dense: the three specials first, then the byte alphabet in byte
/// order, then one id per distinct merged string in training order.
class BpeModel {
 public:
  static constexpr int kPad = 0;
  static constexpr int kUnk = 1;
  static constexpr int kBos = 2;
  static constexpr std::size_t kSpecialCount = 3;
  /// Decoded form of the unknown token (U+FFFD).
  static constexpr std::string_view kReplacement = "\xEF\xBF\xBD";
  static constexpr std::string_view kFormatTag = "emotune-bpe";
  static constexpr int kFormatVersion = 1;

  BpeModel() { reset_specials(); }

  std::size_t vocab_size() const noexcept { return tokens_.size(); }
  std::size_t alphabet_size() const noexcept { return alphabet_size_; }
  const std::vector<Merge>& merges() const noexcept { return merges_; }
  const std::string& token(int id) const { return tokens_.at(static_cast<std::size_t>(id)); }
  bool is_special(int id) const noexcept { return id >= 0 && static_cast<std::size_t>(id) < kSpecialCount; }

  std::optional<int> id_of(std::string_view token) const {
    auto it = ids_.find(std::string(token));
    if (it == ids_.end()) return std::nullopt;
    return it->second;
  }

  /// Bytes of source text covered by a token; used for bits-per-character.
  std::size_t char_count(int id) const {
    if (id == kUnk) return 1;
    if (is_special(id)) return 0;
    return token(id).size();
  }

  std::size_t char_count(std::span<const int> ids) const {
    std::size_t n = 0;
    for (int id : ids) n += char_count(id);
    return n;
  }

  /// Applies merges in training order; bytes outside the alphabet become kUnk.
  std::vector<int> encode(std::string_view text) const {
    std::vector<int> out;
    std::vector<int> syms;
    for (std::string_view word : bpe_detail::split_words(text)) {
      syms.clear();
      for (unsigned char c : word) syms.push_back(byte_ids_[c]);
      apply_merges(syms);
      out.insert(out.end(), syms.begin(), syms.end());
    }
    return out;
  }

  std::string decode(std::span<const int> ids) const {
    std::string out;
    for (int id : ids) {
      if (id < 0 || static_cast<std::size_t>(id) >= tokens_.size()) {
        throw TokenizerError("token id " + std::to_string(id) + " outside vocabulary of " +
                             std::to_string(tokens_.size()));
      }
      if (id == kUnk) {
        out += kReplacement;
      } else if (!is_special(id)) {
        out += tokens_[static_cast<std::size_t>(id)];
      }
    }
    return out;
  }

  /// Versioned line-oriented text form.
  std::string serialize() const {
    std::ostringstream os;
    os << kFormatTag << ' ' << kFormatVersion << '\n';
    os << "alphabet " << alphabet_size_ << '\n';
    for (std::size_t i = kSpecialCount; i < kSpecialCount + alphabet_size_; ++i) {
      os << bpe_detail::escape(tokens_[i]) << '\n';
    }
    os << "merges " << merges_.size() << '\n';
    for (const Merge& m : merges_) {
      os << bpe_detail::escape(token(m.left)) << ' ' << bpe_detail::escape(token(m.right)) << '\n';
    }
    os << "vocab " << tokens_.size() << '\n';
    for (std::size_t i = 0; i < tokens_.size(); ++i) {
      os << i << ' ' << (i < kSpecialCount ? tokens_[i] : bpe_detail::escape(tokens_[i])) << '\n';
    }
    return os.str();
  }

  static BpeModel parse(std::string_view text) {
    std::istringstream is{std::string(text)};
    std::string line;
    auto next = [&](const char* what) -> std::string {
      if (!std::getline(is, line)) throw TokenizerError(std::string("bpe model truncated before ") + what);
      return line;
    };
    auto count_after = [&](std::string_view key) -> std::size_t {
      const std::string l = next(std::string(key).c_str());
      if (l.rfind(std::string(key) + " ", 0) != 0) throw TokenizerError("expected '" + std::string(key) + "' line");
      return std::stoul(l.substr(key.size() + 1));
    };

    {
      std::istringstream hs(next("header"));
      std::string tag;
      int version = 0;
      hs >> tag >> version;
      if (tag != kFormatTag) throw TokenizerError("not a bpe model file");
      if (version != kFormatVersion) throw TokenizerError("unsupported bpe model version " + std::to_string(version));
    }

    BpeModel m;
    const std::size_t alphabet = count_after("alphabet");
    std::vector<unsigned char> bytes;
    for (std::size_t i = 0; i < alphabet; ++i) {
      const std::string tok = bpe_detail::unescape(next("alphabet entry"));
      if (tok.size() != 1) throw TokenizerError("alphabet entry must be a single byte");
      bytes.push_back(static_cast<unsigned char>(tok[0]));
    }
    m.set_alphabet(bytes);
    const std::size_t merges = count_after("merges");
    for (std::size_t i = 0; i < merges; ++i) {
      const std::string l = next("merge");
      const auto sp = l.find(' ');
      if (sp == std::string::npos) throw TokenizerError("malformed merge line '" + l + "'");
      auto left = m.id_of(bpe_detail::unescape(l.substr(0, sp)));
      auto right = m.id_of(bpe_detail::unescape(l.substr(sp + 1)));
      if (!left || !right) throw TokenizerError("merge references unknown token: '" + l + "'");
      m.add_merge(*left, *right);
    }
    const std::size_t vocab = count_after("vocab");
    if (vocab != m.tokens_.size()) throw TokenizerError("vocab size does not match merges");
    for (std::size_t i = 0; i < vocab; ++i) {
      const std::string l = next("vocab entry");
      const auto sp = l.find(' ');
      if (sp == std::string::npos || std::stoul(l.substr(0, sp)) != i) {
        throw TokenizerError("vocab entry " + std::to_string(i) + " out of order");
      }
      const std::string tok = l.substr(sp + 1);
      const std::string expect = i < kSpecialCount ? m.tokens_[i] : bpe_detail::escape(m.tokens_[i]);
      if (tok != expect) throw TokenizerError("vocab entry " + std::to_string(i) + " disagrees with merges");
    }
    return m;
  }

  /// FNV-1a over the serialized form; checkpoints record it.
  std::uint64_t fingerprint() const {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : serialize()) {
      h ^= c;
      h *= 0x100000001b3ULL;
    }
    return h;
  }

  friend bool operator==(const BpeModel& a, const BpeModel& b) {
    return a.tokens_ == b.tokens_ && a.merges_ == b.merges_ && a.alphabet_size_ == b.alphabet_size_;
  }

  // Construction hooks used by training and parsing.
  void set_alphabet(std::span<const unsigned char> bytes) {
    reset_specials();
    std::vector<unsigned char> sorted(bytes.begin(), bytes.end());
    std::sort(sorted.begin(), sorted.end());
    sorted.erase(std::unique(sorted.begin(), sorted.end()), sorted.end());
    for (unsigned char c : sorted) {
      byte_ids_[c] = static_cast<int>(tokens_.size());
      ids_.emplace(std::string(1, static_cast<char>(c)), static_cast<int>(tokens_.size()));
      tokens_.emplace_back(1, static_cast<char>(c));
    }
    alphabet_size_ = sorted.size();
  }

  /// Appends a merge; reuses the id when the merged string already exists.
  int add_merge(int left, int right) {
    if (is_special(left) || is_special(right)) throw TokenizerError("specials cannot be merged");
    std::string joined = token(left) + token(right);
    int result;
    if (auto existing = id_of(joined)) {
      result = *existing;
    } else {
      result = static_cast<int>(tokens_.size());
      ids_.emplace(joined, result);
      tokens_.push_back(std::move(joined));
    }
    rank_.emplace(std::pair{left, right}, static_cast<int>(merges_.size()));
    merges_.push_back({left, right, result});
    return result;
  }

 private:
  void reset_specials() {
    tokens_ = {"<pad>", "<unk>", "<bos>"};
    ids_.clear();
    merges_.clear();
    rank_.clear();
    byte_ids_.fill(kUnk);
    alphabet_size_ = 0;
  }

  void apply_merges(std::vector<int>& syms) const {
    int last = -1;
    while (syms.size() > 1) {
      int best = std::numeric_limits<int>::max();
      for (std::size_t i = 0; i + 1 < syms.size(); ++i) {
        auto it = rank_.find({syms[i], syms[i + 1]});
        if (it != rank_.end() && it->second > last && it->second < best) best = it->second;
      }
      if (best == std::numeric_limits<int>::max()) break;
      const Merge& m = merges_[static_cast<std::size_t>(best)];
      std::size_t w = 0;
      for (std::size_t r = 0; r < syms.size(); ++r) {
        if (r + 1 < syms.size() && syms[r] == m.left && syms[r + 1] == m.right) {
          syms[w++] = m.result;
          ++r;
        } else {
          syms[w++] = syms[r];
        }
      }
      syms.resize(w);
      last = best;
    }
  }

  std::vector<std::string> tokens_;
  std::unordered_map<std::string, int> ids_;
  std::vector<Merge> merges_;
  std::unordered_map<std::pair<int, int>, int, bpe_detail::PairHash> rank_;
  std::array<int, 256> byte_ids_{};
  std::size_t alphabet_size_ = 0;
};

/// Greedy most-frequent-pair training. Stops at `target_vocab` ids or when
/// no adjacent pair occurs at least twice. Frequency ties go to the
/// lexicographically smaller (left, right) token pair.
inline BpeModel train_bpe(std::string_view corpus, std::size_t target_vocab) {
  if (corpus.empty()) throw TokenizerError("cannot train a tokenizer on an empty corpus");

  std::map<std::string_view, std::int64_t> word_counts;
  for (std::string_view w : bpe_detail::split_words(corpus)) ++word_counts[w];

  std::vector<unsigned char> bytes(corpus.begin(), corpus.end());
  BpeModel model;
  model.set_alphabet(bytes);
  if (target_vocab <= BpeModel::kSpecialCount + model.alphabet_size()) {
    throw TokenizerError("target vocabulary " + std::to_string(target_vocab) + " must exceed the " +
                         std::to_string(BpeModel::kSpecialCount + model.alphabet_size()) +
                         " specials and base symbols");
  }

  struct Word {
    std::vector<int> syms;
    std::int64_t count;
  };
  std::vector<Word> words;
  words.reserve(word_counts.size());
  for (const auto& [w, c] : word_counts) {
    Word word{{}, c};
    for (unsigned char ch : w) word.syms.push_back(*model.id_of(std::string(1, static_cast<char>(ch))));
    words.push_back(std::move(word));
  }

  std::unordered_map<std::pair<int, int>, std::int64_t, bpe_detail::PairHash> counts;
  while (model.vocab_size() < target_vocab) {
    counts.clear();
    for (const Word& w : words) {
      for (std::size_t i = 0; i + 1 < w.syms.size(); ++i) counts[{w.syms[i], w.syms[i + 1]}] += w.count;
    }
    const std::pair<int, int>* best = nullptr;
    std::int64_t best_count = 0;
    for (const auto& [pair, c] : counts) {
      if (c > best_count) {
        best = &pair;
        best_count = c;
      } else if (c == best_count) {
        const auto& a = std::tie(model.token(pair.first), model.token(pair.second));
        const auto& b = std::tie(model.token(best->first), model.token(best->second));
        if (a < b) best = &pair;
      }
    }
    if (!best || best_count < 2) break;
    const auto [left, right] = *best;
    const int result = model.add_merge(left, right);
    for (Word& w : words) {
      std::size_t out = 0;
      for (std::size_t r = 0; r < w.syms.size(); ++r) {
        if (r + 1 < w.syms.size() && w.syms[r] == left && w.syms[r + 1] == right) {
          w.syms[out++] = result;
          ++r;
        } else {
          w.syms[out++] = w.syms[r];
        }
      }
      w.syms.resize(out);
    }
  }
  return model;
}

inline BpeModel train_bpe(std::istream& corpus, std::size_t target_vocab) {
  std::string text{std::istreambuf_iterator<char>(corpus), std::istreambuf_iterator<char>()};
  return train_bpe(text, target_vocab);
}

}  // namespace emotune
