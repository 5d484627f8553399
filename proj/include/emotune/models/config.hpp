#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace emotune {

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

enum class Architecture { transformer, mlstm };

inline std::string_view to_string(Architecture a) { return a == Architecture::transformer ? "transformer" : "mlstm"; }

inline Architecture parse_architecture(std::string_view s) {
  if (s == "transformer") return Architecture::transformer;
  if (s == "mlstm") return Architecture::mlstm;
  throw ConfigError("unknown architecture '" + std::string(s) + "'");
}

struct ModelConfig {
  Architecture architecture = Architecture::transformer;
  std::size_t vocab_size = 2000;
  std::size_t d_model = 128;
  std::size_t layers = 4;
  std::size_t heads = 4;  // transformer only
  std::size_t max_seq_len = 64;
  double dropout = 0.1;

  void validate() const {
    if (vocab_size < 1) throw ConfigError("vocab_size must be positive");
    if (d_model < 1) throw ConfigError("d_model must be positive");
    if (max_seq_len < 1) throw ConfigError("max_seq_len must be at least 1");
    if (!(dropout >= 0.0 && dropout < 1.0)) throw ConfigError("dropout must lie in [0, 1)");
    if (architecture == Architecture::transformer) {
      if (heads < 1 || d_model % heads != 0) {
        throw ConfigError("d_model " + std::to_string(d_model) + " is not divisible by heads " +
                          std::to_string(heads));
      }
    } else if (layers < 1) {
      throw ConfigError("an mlstm needs at least one layer");
    }
  }

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

/// Closed-form parameter count of the encoder plus the language-model head.
inline std::size_t parameter_count(const ModelConfig& c) {
  const std::size_t d = c.d_model, v = c.vocab_size;
  std::size_t n = v * d + d * v + v;  // token embedding, lm head weight and bias
  if (c.architecture == Architecture::transformer) {
    n += c.max_seq_len * d;
    const std::size_t per_layer = 2 * 2 * d          // two layer norms
                                  + 4 * (d * d + d)  // q, k, v, output projections
                                  + (d * 4 * d + 4 * d) + (4 * d * d + d);  // feed-forward
    n += c.layers * per_layer + 2 * d;  // final layer norm
  } else {
    const std::size_t per_layer = d * d + d * d   // multiplicative projections
                                  + d * 4 * d + d * 4 * d + 4 * d;  // gate projections and bias
    n += c.layers * per_layer;
  }
  return n;
}

enum class HeadKind { single, multihead };

inline std::string_view to_string(HeadKind k) { return k == HeadKind::single ? "single" : "multihead"; }

inline HeadKind parse_head_kind(std::string_view s) {
  if (s == "single") return HeadKind::single;
  if (s == "multihead") return HeadKind::multihead;
  throw ConfigError("unknown head kind '" + std::string(s) + "'");
}

/// Classification decoder f_d†: an MLP with PReLU activations and dropout
/// on the input of every linear layer, ending in sigmoid units.
///
/// `layer_sizes` lists the input width followed by hidden widths, so
/// MLP(4096 → 2048 → 1024 → n_c) is {4096, 2048, 1024} with n_c categories.
/// A multihead decoder predicts all n_c categories; a single decoder
/// predicts only `category`.
struct HeadSpec {
  HeadKind kind = HeadKind::multihead;
  std::vector<std::size_t> layer_sizes;
  std::size_t n_c = 8;
  std::size_t category = 0;
  double dropout = 0.3;
  double prelu_init = 0.25;

  std::size_t output_width() const { return kind == HeadKind::multihead ? n_c : 1; }
  std::size_t input_width() const { return layer_sizes.empty() ? 0 : layer_sizes.front(); }

  void validate() const {
    if (layer_sizes.empty()) throw ConfigError("head layer_sizes must name at least the input width");
    for (std::size_t w : layer_sizes) {
      if (w == 0) throw ConfigError("head layer widths must be positive");
    }
    if (n_c == 0) throw ConfigError("head needs at least one category");
    if (kind == HeadKind::single && category >= n_c) throw ConfigError("single head category out of range");
    if (!(dropout >= 0.0 && dropout < 1.0)) throw ConfigError("head dropout must lie in [0, 1)");
  }

  friend bool operator==(const HeadSpec&, const HeadSpec&) = default;
};

inline std::size_t parameter_count(const HeadSpec& h) {
  std::size_t n = 0;
  for (std::size_t i = 0; i + 1 < h.layer_sizes.size(); ++i) {
    n += h.layer_sizes[i] * h.layer_sizes[i + 1] + h.layer_sizes[i + 1] + 1;  // affine + PReLU slope
  }
  return n + h.layer_sizes.back() * h.output_width() + h.output_width();
}

}  // namespace emotune
