#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "emotune/models/classifier.hpp"
#include "emotune/models/language_model.hpp"
#include "emotune/util/files.hpp"

namespace emotune {

// Layout: 8-byte magic, u32 version, u64 header length, JSON header, then
// every parameter's doubles in header order, little endian.

inline constexpr std::string_view kCheckpointMagic = "EMOTCKPT";
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  std::vector<LanguageModel> models;
  /// Fingerprint of the tokenizer the models were trained with.
  std::uint64_t tokenizer_fingerprint = 0;

  friend bool operator==(const Checkpoint&, const Checkpoint&) = default;
};

namespace ckpt_detail {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

using nlohmann::json;

inline json to_json(const ModelConfig& c) {
  return {{"architecture", std::string(to_string(c.architecture))},
          {"vocab_size", c.vocab_size},
          {"d_model", c.d_model},
          {"layers", c.layers},
          {"heads", c.heads},
          {"max_seq_len", c.max_seq_len},
          {"dropout", c.dropout}};
}

inline ModelConfig config_from_json(const json& j) {
  ModelConfig c;
  c.architecture = parse_architecture(j.at("architecture").get<std::string>());
  c.vocab_size = j.at("vocab_size").get<std::size_t>();
  c.d_model = j.at("d_model").get<std::size_t>();
  c.layers = j.at("layers").get<std::size_t>();
  c.heads = j.at("heads").get<std::size_t>();
  c.max_seq_len = j.at("max_seq_len").get<std::size_t>();
  c.dropout = j.at("dropout").get<double>();
  return c;
}

inline json to_json(const HeadSpec& h) {
  return {{"kind", std::string(to_string(h.kind))},
          {"layer_sizes", h.layer_sizes},
          {"n_c", h.n_c},
          {"category", h.category},
          {"dropout", h.dropout},
          {"prelu_init", h.prelu_init}};
}

inline HeadSpec head_from_json(const json& j) {
  HeadSpec h;
  h.kind = parse_head_kind(j.at("kind").get<std::string>());
  h.layer_sizes = j.at("layer_sizes").get<std::vector<std::size_t>>();
  h.n_c = j.at("n_c").get<std::size_t>();
  h.category = j.value("category", std::size_t{0});
  h.dropout = j.value("dropout", 0.3);
  h.prelu_init = j.value("prelu_init", 0.25);
  return h;
}

template <typename T>
void put(std::string& out, T v) {
  char buf[sizeof(T)];
  std::memcpy(buf, &v, sizeof(T));
  out.append(buf, sizeof(T));
}

template <typename T>
T get(std::string_view bytes, std::size_t& pos) {
  if (pos + sizeof(T) > bytes.size()) throw IoError("checkpoint truncated");
  T v;
  std::memcpy(&v, bytes.data() + pos, sizeof(T));
  pos += sizeof(T);
  return v;
}

}  // namespace ckpt_detail

inline std::string serialize_checkpoint(const Checkpoint& ckpt) {
  using ckpt_detail::json;
  json header;
  header["tokenizer_fingerprint"] = ckpt.tokenizer_fingerprint;
  header["models"] = json::array();
  for (const auto& m : ckpt.models) {
    json jm;
    jm["config"] = ckpt_detail::to_json(m.config());
    jm["head"] = m.head() ? ckpt_detail::to_json(*m.head()) : json(nullptr);
    json params = json::array();
    for (const auto& [name, t] : m.parameters()) params.push_back({{"name", name}, {"shape", t.shape()}});
    jm["parameters"] = std::move(params);
    header["models"].push_back(std::move(jm));
  }
  const std::string text = header.dump();

  std::string out(kCheckpointMagic);
  ckpt_detail::put<std::uint32_t>(out, kCheckpointVersion);
  ckpt_detail::put<std::uint64_t>(out, text.size());
  out += text;
  for (const auto& m : ckpt.models) {
    for (const auto& [name, t] : m.parameters()) {
      for (double v : t.data()) ckpt_detail::put<std::uint64_t>(out, std::bit_cast<std::uint64_t>(v));
    }
  }
  return out;
}

inline Checkpoint parse_checkpoint(std::string_view bytes) {
  using ckpt_detail::json;
  if (bytes.substr(0, kCheckpointMagic.size()) != kCheckpointMagic) throw IoError("not a checkpoint file");
  std::size_t pos = kCheckpointMagic.size();
  const auto version = ckpt_detail::get<std::uint32_t>(bytes, pos);
  if (version != kCheckpointVersion) throw IoError("unsupported checkpoint version " + std::to_string(version));
  const auto len = ckpt_detail::get<std::uint64_t>(bytes, pos);
  if (pos + len > bytes.size()) throw IoError("checkpoint header truncated");
  const json header = json::parse(bytes.substr(pos, len));
  pos += len;

  Checkpoint ckpt;
  ckpt.tokenizer_fingerprint = header.at("tokenizer_fingerprint").get<std::uint64_t>();
  for (const auto& jm : header.at("models")) {
    ParameterSet params;
    for (const auto& jp : jm.at("parameters")) {
      Tensor t(jp.at("shape").get<Shape>());
      for (double& v : t.data()) v = std::bit_cast<double>(ckpt_detail::get<std::uint64_t>(bytes, pos));
      params.emplace(jp.at("name").get<std::string>(), std::move(t));
    }
    std::optional<HeadSpec> head;
    if (!jm.at("head").is_null()) head = ckpt_detail::head_from_json(jm.at("head"));
    ckpt.models.push_back(
        LanguageModel::from_parts(ckpt_detail::config_from_json(jm.at("config")), std::move(params), std::move(head)));
  }
  if (pos != bytes.size()) throw IoError("trailing bytes after checkpoint payload");
  return ckpt;
}

inline void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  write_file_atomic(path, serialize_checkpoint(ckpt));
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) { return parse_checkpoint(read_file(path)); }

}  // namespace emotune
