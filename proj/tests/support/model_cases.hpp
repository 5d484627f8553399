#pragma once

#include <vector>

#include "emotune/models/classifier.hpp"
#include "emotune/models/language_model.hpp"
#include "emotune/numerics/ops.hpp"

namespace emotune::testing_support {

inline ModelConfig transformer_config(std::size_t d = 32, std::size_t layers = 2, std::size_t heads = 2, std::size_t vocab = 100) {
  ModelConfig c;
  c.architecture = Architecture::transformer;
  c.vocab_size = vocab;
  c.d_model = d;
  c.layers = layers;
  c.heads = heads;
  c.max_seq_len = 16;
  c.dropout = 0.1;
  return c;
}

inline ModelConfig mlstm_config(std::size_t d = 16, std::size_t layers = 1, std::size_t vocab = 50) {
  ModelConfig c;
  c.architecture = Architecture::mlstm;
  c.vocab_size = vocab;
  c.d_model = d;
  c.layers = layers;
  c.max_seq_len = 16;
  c.dropout = 0.1;
  return c;
}

inline HeadSpec multihead(std::vector<std::size_t> sizes, std::size_t n_c) {
  HeadSpec h;
  h.kind = HeadKind::multihead;
  h.layer_sizes = std::move(sizes);
  h.n_c = n_c;
  return h;
}

inline std::vector<int> tokens(std::size_t n, std::size_t vocab, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<int> t;
  for (std::size_t i = 0; i < n; ++i) t.push_back(3 + static_cast<int>(rng.below(vocab - 3)));
  return t;
}

// Replace the small default initialization with values large enough that
// finite differences resolve every parameter's gradient.
inline void randomize(LanguageModel& m, std::uint64_t seed) {
  Rng rng(seed);
  for (auto& [name, t] : m.parameters()) {
    const bool gain = name.ends_with(".g");
    for (double& v : t.data()) v = gain ? 1.0 + rng.normal(0.0, 0.2) : rng.normal(0.0, 0.4);
  }
}

inline NodeId combined_loss(Graph& g, ModelGraph& mg, const std::vector<std::vector<int>>& seqs, std::size_t n_c) {
  const auto batch = mg.encode(seqs);
  std::vector<int> targets;
  for (const auto& s : seqs) {
    for (std::size_t t = 0; t + 1 < s.size(); ++t) targets.push_back(s[t + 1]);
    targets.push_back(-1);
  }
  const NodeId lm = ops::softmax_cross_entropy(g, mg.lm_logits(batch.hidden), targets);
  Tensor labels({seqs.size(), n_c});
  for (std::size_t i = 0; i < labels.size(); ++i) labels[i] = static_cast<double>(i % 2);
  const NodeId cls = ops::sigmoid_bce(g, mg.head_logits(mg.pool_last(batch)), labels);
  return ops::add(g, lm, cls);
}

}  // namespace emotune::testing_support
