#pragma once

#include <cmath>
#include <cstddef>
#include <numbers>
#include <span>
#include <stdexcept>

namespace emotune {

/// Language-model loss expressed in bits per character of source text.
struct BpcReport {
  double total_nll_nats = 0.0;
  std::size_t token_count = 0;
  std::size_t char_count = 0;
  double bpc = 0.0;
};

/// Neumaier-compensated running sum of token losses, so token-by-token and
/// batched accumulation agree to rounding.
class BpcAccumulator {
 public:
  void add(double nll_nats, std::size_t tokens, std::size_t chars) {
    const double t = sum_ + nll_nats;
    if (std::abs(sum_) >= std::abs(nll_nats)) {
      carry_ += (sum_ - t) + nll_nats;
    } else {
      carry_ += (nll_nats - t) + sum_;
    }
    sum_ = t;
    tokens_ += tokens;
    chars_ += chars;
  }

  void add_tokens(std::span<const double> nll_per_token, std::size_t chars) {
    for (double v : nll_per_token) add(v, 1, 0);
    chars_ += chars;
  }

  double total() const noexcept { return sum_ + carry_; }
  std::size_t tokens() const noexcept { return tokens_; }
  std::size_t chars() const noexcept { return chars_; }

  BpcReport report() const {
    if (chars_ == 0) throw std::invalid_argument("bits per character needs a positive character count");
    return {total(), tokens_, chars_, total() / std::numbers::ln2 / static_cast<double>(chars_)};
  }

 private:
  double sum_ = 0.0;
  double carry_ = 0.0;
  std::size_t tokens_ = 0;
  std::size_t chars_ = 0;
};

inline BpcReport bits_per_character(std::span<const double> nll_per_token, std::size_t char_count) {
  if (char_count == 0) throw std::invalid_argument("bits per character needs a positive character count");
  for (double v : nll_per_token) {
    if (!(v >= 0.0)) throw std::invalid_argument("token losses must be non-negative");
  }
  BpcAccumulator acc;
  acc.add_tokens(nll_per_token, char_count);
  return acc.report();
}

}  // namespace emotune
