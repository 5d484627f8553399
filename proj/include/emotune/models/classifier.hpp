#pragma once

#include <span>
#include <stdexcept>
#include <utility>
#include <vector>

#include "emotune/models/language_model.hpp"

namespace emotune {

/// Either one multihead model, or one single-head model per category
/// (member i predicts category i).
class Classifier {
 public:
  Classifier() = default;

  explicit Classifier(std::vector<LanguageModel> members) : members_(std::move(members)) {
    if (members_.empty()) throw std::invalid_argument("classifier needs at least one model");
    for (const auto& m : members_) {
      if (!m.head()) throw std::invalid_argument("classifier member has no classification head");
    }
    const HeadSpec& first = *members_.front().head();
    if (first.kind == HeadKind::multihead) {
      if (members_.size() != 1) throw std::invalid_argument("a multihead classifier has exactly one model");
      return;
    }
    if (members_.size() != first.n_c) {
      throw std::invalid_argument("single-head classifier needs one model per category");
    }
    for (std::size_t i = 0; i < members_.size(); ++i) {
      const HeadSpec& h = *members_[i].head();
      if (h.kind != HeadKind::single || h.category != i || h.n_c != first.n_c) {
        throw std::invalid_argument("single-head member " + std::to_string(i) + " does not predict category " +
                                    std::to_string(i));
      }
    }
  }

  std::size_t categories() const { return members_.front().head()->n_c; }
  const std::vector<LanguageModel>& members() const noexcept { return members_; }
  HeadKind kind() const { return members_.front().head()->kind; }

  std::vector<double> predict(std::span<const int> tokens) const {
    if (members_.size() == 1 && kind() == HeadKind::multihead) return members_.front().classify(tokens);
    std::vector<double> out;
    out.reserve(members_.size());
    for (const auto& m : members_) out.push_back(m.classify(tokens).front());
    return out;
  }

  friend bool operator==(const Classifier&, const Classifier&) = default;

 private:
  std::vector<LanguageModel> members_;
};

}  // namespace emotune
