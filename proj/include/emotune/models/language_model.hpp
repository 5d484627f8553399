#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "emotune/models/config.hpp"
#include "emotune/numerics/ops.hpp"
#include "emotune/numerics/random.hpp"
#include "emotune/tokenizer/bpe.hpp"

namespace emotune {

/// Named parameter tensors, ordered by name.
using ParameterSet = std::map<std::string, Tensor>;

inline constexpr double kInitStddev = 0.02;
inline constexpr int kPadId = BpeModel::kPad;

namespace model_detail {

inline Tensor normal_tensor(Shape shape, Rng& rng) {
  Tensor t(std::move(shape));
  for (double& v : t.data()) v = rng.normal(0.0, kInitStddev);
  return t;
}

inline std::string block(std::size_t l, const char* leaf) { return "block" + std::to_string(l) + "." + leaf; }
inline std::string layer(std::size_t l, const char* leaf) { return "layer" + std::to_string(l) + "." + leaf; }
inline std::string hidden(std::size_t i, const char* leaf) { return "head.hidden" + std::to_string(i) + "." + leaf; }

inline bool is_head_param(const std::string& name) { return name.rfind("head.", 0) == 0; }
inline bool is_lm_head_param(const std::string& name) { return name.rfind("lm_head.", 0) == 0; }

}  // namespace model_detail

/// Encoder f_e with language-model decoder f_d and an optional
/// classification decoder f_d†.
class LanguageModel {
 public:
  static LanguageModel build(const ModelConfig& config, std::uint64_t seed) {
    using namespace model_detail;
    config.validate();
    LanguageModel m;
    m.config_ = config;
    Rng rng(seed);
    const std::size_t d = config.d_model, v = config.vocab_size;
    auto& p = m.params_;
    p["tok_emb"] = normal_tensor({v, d}, rng);
    if (config.architecture == Architecture::transformer) {
      p["pos_emb"] = normal_tensor({config.max_seq_len, d}, rng);
      for (std::size_t l = 0; l < config.layers; ++l) {
        p[block(l, "ln1.g")] = Tensor({d}, 1.0);
        p[block(l, "ln1.b")] = Tensor({d});
        for (const char* proj : {"attn.q", "attn.k", "attn.v", "attn.o"}) {
          p[block(l, proj) + ".w"] = normal_tensor({d, d}, rng);
          p[block(l, proj) + ".b"] = Tensor({d});
        }
        p[block(l, "ln2.g")] = Tensor({d}, 1.0);
        p[block(l, "ln2.b")] = Tensor({d});
        p[block(l, "ff1.w")] = normal_tensor({d, 4 * d}, rng);
        p[block(l, "ff1.b")] = Tensor({4 * d});
        p[block(l, "ff2.w")] = normal_tensor({4 * d, d}, rng);
        p[block(l, "ff2.b")] = Tensor({d});
      }
      p["ln_f.g"] = Tensor({d}, 1.0);
      p["ln_f.b"] = Tensor({d});
    } else {
      for (std::size_t l = 0; l < config.layers; ++l) {
        p[layer(l, "wmx")] = normal_tensor({d, d}, rng);
        p[layer(l, "wmh")] = normal_tensor({d, d}, rng);
        p[layer(l, "wx")] = normal_tensor({d, 4 * d}, rng);
        p[layer(l, "wm")] = normal_tensor({d, 4 * d}, rng);
        p[layer(l, "b")] = Tensor({4 * d});
      }
    }
    p["lm_head.w"] = normal_tensor({d, v}, rng);
    p["lm_head.b"] = Tensor({v});
    return m;
  }

  /// Reassemble a model from stored parts (checkpoint loading).
  static LanguageModel from_parts(ModelConfig config, ParameterSet params, std::optional<HeadSpec> head) {
    config.validate();
    LanguageModel m;
    m.config_ = config;
    m.head_ = std::move(head);
    const LanguageModel reference = build(config, 0);
    for (const auto& [name, t] : reference.params_) {
      auto it = params.find(name);
      if (it == params.end()) throw ConfigError("missing parameter '" + name + "'");
      if (it->second.shape() != t.shape()) {
        throw ShapeError("parameter '" + name + "' has shape " + to_string(it->second.shape()) + ", expected " +
                         to_string(t.shape()));
      }
    }
    m.params_ = std::move(params);
    return m;
  }

  const ModelConfig& config() const noexcept { return config_; }
  const ParameterSet& parameters() const noexcept { return params_; }
  ParameterSet& parameters() noexcept { return params_; }
  const std::optional<HeadSpec>& head() const noexcept { return head_; }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& [name, t] : params_) n += t.size();
    return n;
  }

  /// Installs a freshly initialized f_d†, replacing any existing one.
  /// Encoder and f_d parameters are left untouched.
  void attach_head(const HeadSpec& spec, std::uint64_t seed) {
    using namespace model_detail;
    spec.validate();
    if (spec.input_width() != config_.d_model) {
      throw ConfigError("head input width " + std::to_string(spec.input_width()) + " does not match d_model " +
                        std::to_string(config_.d_model));
    }
    detach_head();
    Rng rng(seed);
    const auto& w = spec.layer_sizes;
    for (std::size_t i = 0; i + 1 < w.size(); ++i) {
      params_[hidden(i, "w")] = normal_tensor({w[i], w[i + 1]}, rng);
      params_[hidden(i, "b")] = Tensor({w[i + 1]});
      params_[hidden(i, "slope")] = Tensor::scalar(spec.prelu_init);
    }
    params_["head.out.w"] = normal_tensor({w.back(), spec.output_width()}, rng);
    params_["head.out.b"] = Tensor({spec.output_width()});
    head_ = spec;
  }

  void detach_head() {
    std::erase_if(params_, [](const auto& kv) { return model_detail::is_head_param(kv.first); });
    head_.reset();
  }

  /// Per-position next-token log-probabilities, [T, vocab].
  Tensor lm_forward(std::span<const int> tokens) const;

  /// Final-layer hidden states, [T, d_model].
  Tensor hidden_states(std::span<const int> tokens) const;

  /// Sigmoid outputs of f_d† read from the last non-padding position.
  std::vector<double> classify(std::span<const int> tokens) const;

  friend bool operator==(const LanguageModel& a, const LanguageModel& b) {
    if (!(a.config_ == b.config_) || a.head_ != b.head_ || a.params_.size() != b.params_.size()) return false;
    for (auto ia = a.params_.begin(), ib = b.params_.begin(); ia != a.params_.end(); ++ia, ++ib) {
      if (ia->first != ib->first || !bitwise_equal(ia->second, ib->second)) return false;
    }
    return true;
  }

 private:
  ModelConfig config_;
  ParameterSet params_;
  std::optional<HeadSpec> head_;
};

inline LanguageModel attach_head(LanguageModel model, const HeadSpec& spec, std::uint64_t seed) {
  model.attach_head(spec, seed);
  return model;
}

/// Hidden rows for a batch of sequences, packed sequence after sequence.
struct EncodedBatch {
  NodeId hidden;
  std::vector<prim::Segment> segments;

  std::vector<std::size_t> last_rows() const {
    std::vector<std::size_t> rows;
    for (const auto& s : segments) rows.push_back(s.offset + s.length - 1);
    return rows;
  }
};

/// Binds a model's parameters into a graph and builds its forward pass.
class ModelGraph {
 public:
  /// Parameters named in `frozen` are bound without gradients.
  ModelGraph(Graph& graph, const LanguageModel& model, bool trainable, const std::set<std::string>& frozen = {})
      : g_(graph), model_(model) {
    for (const auto& [name, t] : model.parameters()) {
      ids_.emplace(name, g_.input(name, t, trainable && !frozen.count(name)));
    }
  }

  NodeId param(const std::string& name) const {
    auto it = ids_.find(name);
    if (it == ids_.end()) throw std::out_of_range("model has no parameter '" + name + "'");
    return it->second;
  }

  EncodedBatch encode(const std::vector<std::vector<int>>& sequences) {
    const auto& cfg = model_.config();
    if (sequences.empty()) throw std::invalid_argument("empty batch");
    EncodedBatch out;
    std::size_t offset = 0;
    for (const auto& s : sequences) {
      if (s.empty()) throw std::invalid_argument("empty sequence in batch");
      if (s.size() > cfg.max_seq_len) {
        throw std::length_error("sequence of " + std::to_string(s.size()) + " tokens exceeds max_seq_len " +
                                std::to_string(cfg.max_seq_len));
      }
      out.segments.push_back({offset, s.size()});
      offset += s.size();
    }
    out.hidden = cfg.architecture == Architecture::transformer ? transformer(sequences, out.segments)
                                                               : mlstm(sequences);
    return out;
  }

  NodeId lm_logits(NodeId hidden) { return ops::affine(g_, hidden, param("lm_head.w"), param("lm_head.b")); }

  NodeId head_logits(NodeId pooled) {
    const auto& spec = model_.head();
    if (!spec) throw std::logic_error("no classification head attached");
    NodeId x = pooled;
    for (std::size_t i = 0; i + 1 < spec->layer_sizes.size(); ++i) {
      x = ops::dropout(g_, x, spec->dropout);
      x = ops::affine(g_, x, param(model_detail::hidden(i, "w")), param(model_detail::hidden(i, "b")));
      x = ops::prelu(g_, x, param(model_detail::hidden(i, "slope")));
    }
    x = ops::dropout(g_, x, spec->dropout);
    return ops::affine(g_, x, param("head.out.w"), param("head.out.b"));
  }

  NodeId pool_last(const EncodedBatch& batch) { return ops::gather_rows(g_, batch.hidden, batch.last_rows()); }

  /// One mLSTM cell update for a batch of rows; returns (h, c).
  std::pair<NodeId, NodeId> mlstm_cell(std::size_t l, NodeId x, NodeId h, NodeId c) {
    using model_detail::layer;
    const std::size_t d = model_.config().d_model;
    const NodeId m = ops::mul(g_, ops::matmul(g_, x, param(layer(l, "wmx"))), ops::matmul(g_, h, param(layer(l, "wmh"))));
    const NodeId z = ops::add(g_, ops::affine(g_, x, param(layer(l, "wx")), param(layer(l, "b"))),
                              ops::matmul(g_, m, param(layer(l, "wm"))));
    const NodeId in_gate = ops::sigmoid(g_, ops::slice_cols(g_, z, 0, d));
    const NodeId forget = ops::sigmoid(g_, ops::slice_cols(g_, z, d, 2 * d));
    const NodeId out_gate = ops::sigmoid(g_, ops::slice_cols(g_, z, 2 * d, 3 * d));
    const NodeId update = ops::tanh(g_, ops::slice_cols(g_, z, 3 * d, 4 * d));
    const NodeId c_next = ops::add(g_, ops::mul(g_, forget, c), ops::mul(g_, in_gate, update));
    const NodeId h_next = ops::mul(g_, out_gate, ops::tanh(g_, c_next));
    return {h_next, c_next};
  }

  Graph& graph() noexcept { return g_; }

 private:
  NodeId transformer(const std::vector<std::vector<int>>& seqs, const std::vector<prim::Segment>& segments) {
    using model_detail::block;
    const auto& cfg = model_.config();
    std::vector<int> ids, positions;
    for (const auto& s : seqs) {
      for (std::size_t t = 0; t < s.size(); ++t) {
        ids.push_back(s[t]);
        positions.push_back(static_cast<int>(t));
      }
    }
    NodeId x = ops::add(g_, ops::embedding(g_, param("tok_emb"), ids), ops::embedding(g_, param("pos_emb"), positions));
    x = ops::dropout(g_, x, cfg.dropout);
    for (std::size_t l = 0; l < cfg.layers; ++l) {
      auto proj = [&](NodeId in, const char* name) {
        const std::string base = block(l, name);
        return ops::affine(g_, in, param(base + ".w"), param(base + ".b"));
      };
      NodeId h = ops::layer_norm(g_, x, param(block(l, "ln1.g")), param(block(l, "ln1.b")));
      NodeId a = ops::causal_attention(g_, proj(h, "attn.q"), proj(h, "attn.k"), proj(h, "attn.v"), cfg.heads, segments);
      a = ops::dropout(g_, proj(a, "attn.o"), cfg.dropout);
      x = ops::add(g_, x, a);
      h = ops::layer_norm(g_, x, param(block(l, "ln2.g")), param(block(l, "ln2.b")));
      NodeId f = ops::gelu(g_, proj(h, "ff1"));
      f = ops::dropout(g_, proj(f, "ff2"), cfg.dropout);
      x = ops::add(g_, x, f);
    }
    return ops::layer_norm(g_, x, param("ln_f.g"), param("ln_f.b"));
  }

  NodeId mlstm(const std::vector<std::vector<int>>& seqs) {
    const auto& cfg = model_.config();
    const std::size_t batch = seqs.size(), d = cfg.d_model;
    std::size_t steps = 0;
    for (const auto& s : seqs) steps = std::max(steps, s.size());
    std::vector<int> padded(batch * steps, kPadId);
    for (std::size_t b = 0; b < batch; ++b) std::copy(seqs[b].begin(), seqs[b].end(), padded.begin() + b * steps);
    const NodeId emb = ops::dropout(g_, ops::embedding(g_, param("tok_emb"), padded), cfg.dropout);

    std::vector<NodeId> inputs(steps);
    for (std::size_t t = 0; t < steps; ++t) {
      std::vector<std::size_t> rows(batch);
      for (std::size_t b = 0; b < batch; ++b) rows[b] = b * steps + t;
      inputs[t] = ops::gather_rows(g_, emb, std::move(rows));
    }
    for (std::size_t l = 0; l < cfg.layers; ++l) {
      NodeId h = g_.constant(Tensor({batch, d}));
      NodeId c = g_.constant(Tensor({batch, d}));
      for (std::size_t t = 0; t < steps; ++t) {
        std::tie(h, c) = mlstm_cell(l, inputs[t], h, c);
        inputs[t] = l + 1 < cfg.layers ? ops::dropout(g_, h, cfg.dropout) : h;
      }
    }
    const NodeId stacked = steps == 1 ? inputs[0] : ops::concat(g_, inputs, 0);
    std::vector<std::size_t> packed;
    for (std::size_t b = 0; b < batch; ++b) {
      for (std::size_t t = 0; t < seqs[b].size(); ++t) packed.push_back(t * batch + b);
    }
    return ops::gather_rows(g_, stacked, std::move(packed));
  }

  Graph& g_;
  const LanguageModel& model_;
  std::map<std::string, NodeId> ids_;
};

inline Tensor LanguageModel::hidden_states(std::span<const int> tokens) const {
  Graph g;
  ModelGraph mg(g, *this, false);
  const auto batch = mg.encode({std::vector<int>(tokens.begin(), tokens.end())});
  return g.value(batch.hidden);
}

inline Tensor LanguageModel::lm_forward(std::span<const int> tokens) const {
  Graph g;
  ModelGraph mg(g, *this, false);
  const auto batch = mg.encode({std::vector<int>(tokens.begin(), tokens.end())});
  return log_softmax_rows(g.value(mg.lm_logits(batch.hidden)));
}

/// Drops trailing padding so the classifier reads the last real token.
inline std::vector<int> strip_padding(std::span<const int> tokens) {
  std::size_t n = tokens.size();
  while (n > 0 && tokens[n - 1] == kPadId) --n;
  return {tokens.begin(), tokens.begin() + static_cast<std::ptrdiff_t>(n)};
}

inline std::vector<double> LanguageModel::classify(std::span<const int> tokens) const {
  if (!head_) throw std::logic_error("classify requires an attached classification head");
  std::vector<int> seq = strip_padding(tokens);
  if (seq.empty()) throw std::invalid_argument("classify needs at least one non-padding token");
  Graph g;
  ModelGraph mg(g, *this, false);
  const auto batch = mg.encode({std::move(seq)});
  const Tensor& logits = g.value(mg.head_logits(mg.pool_last(batch)));
  std::vector<double> probs(logits.size());
  for (std::size_t i = 0; i < probs.size(); ++i) probs[i] = detail::sigmoid(logits[i]);
  return probs;
}

/// Recurrent state of every mLSTM layer for one sequence.
struct MlstmState {
  std::vector<Tensor> h;
  std::vector<Tensor> c;

  static MlstmState zeros(const ModelConfig& cfg) {
    MlstmState s;
    s.h.assign(cfg.layers, Tensor({1, cfg.d_model}));
    s.c.assign(cfg.layers, Tensor({1, cfg.d_model}));
    return s;
  }
};

/// Advance an mLSTM by one token.
inline MlstmState mlstm_step(const LanguageModel& model, const MlstmState& state, int token) {
  if (model.config().architecture != Architecture::mlstm) throw std::logic_error("mlstm_step on a non-mLSTM model");
  Graph g;
  ModelGraph mg(g, model, false);
  NodeId x = ops::embedding(g, mg.param("tok_emb"), {token});
  MlstmState next;
  for (std::size_t l = 0; l < model.config().layers; ++l) {
    auto [h, c] = mg.mlstm_cell(l, x, g.constant(state.h.at(l)), g.constant(state.c.at(l)));
    next.h.push_back(g.value(h));
    next.c.push_back(g.value(c));
    x = h;
  }
  return next;
}

}  // namespace emotune
