#pragma once

#include <cstdint>
#include <filesystem>
#include <cmath>
#include <map>
#include <set>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "emotune/data/dataset.hpp"
#include "emotune/models/config.hpp"
#include "emotune/training/schedule.hpp"
#include "emotune/training/training.hpp"

namespace emotune {

class RunConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct RunConfig {
  std::vector<std::string> categories = plutchik_categories();
  std::uint64_t seed = 0;
  std::size_t bpe_vocab_size = 2000;
  ModelConfig model;  // vocab_size is taken from the tokenizer
  Schedule pretrain = pretrain_schedule();
  std::size_t pretrain_log_interval = 100;
  Schedule finetune = finetune_schedule();
  double auxiliary_weight = 0.02;
  bool freeze_lm_head = false;
  HeadKind head_kind = HeadKind::multihead;
  std::vector<std::size_t> head_hidden;  // widths between d_model and the output
  double head_dropout = 0.3;
  SplitSpec split;
  /// Named input paths (corpus, data, pool, ...), resolved relative to the config file.
  std::map<std::string, std::filesystem::path> paths;
  std::optional<std::filesystem::path> out;

  HeadSpec head_spec() const {
    HeadSpec h;
    h.kind = head_kind;
    h.layer_sizes = {model.d_model};
    h.layer_sizes.insert(h.layer_sizes.end(), head_hidden.begin(), head_hidden.end());
    h.n_c = categories.size();
    h.dropout = head_dropout;
    return h;
  }
};

namespace config_detail {

using nlohmann::json;

inline void reject_unknown(const json& j, std::initializer_list<const char*> known, const std::string& where) {
  for (const auto& [key, v] : j.items()) {
    bool ok = false;
    for (const char* k : known) ok |= key == k;
    if (!ok) throw RunConfigError("unknown key '" + key + "' in " + where);
  }
}

inline Schedule schedule_from_json(const json& j, Schedule s, const std::string& where) {
  reject_unknown(j, {"base_lr", "warmup_steps", "warmup_epochs", "decay", "batch_size", "epochs", "max_steps", "log_interval",
                     "auxiliary_weight", "freeze_lm_head"},
                 where);
  s.base_lr = j.value("base_lr", s.base_lr);
  s.warmup_steps = j.value("warmup_steps", s.warmup_steps);
  s.warmup_epochs = j.value("warmup_epochs", s.warmup_epochs);
  if (j.contains("decay")) s.decay = parse_decay(j["decay"].get<std::string>());
  s.batch_size = j.value("batch_size", s.batch_size);
  s.epochs = j.value("epochs", s.epochs);
  s.max_steps = j.value("max_steps", s.max_steps);
  s.validate();
  return s;
}

}  // namespace config_detail

/// Parses a JSON run configuration. Relative paths are resolved against
/// `base_dir`; each named path must exist.
inline RunConfig parse_run_config(std::string_view text, const std::filesystem::path& base_dir = {}) {
  using config_detail::json;
  RunConfig c;
  json j;
  try {
    j = json::parse(text);
    config_detail::reject_unknown(j, {"categories", "seed", "bpe", "model", "pretrain", "finetune", "head", "split", "paths", "out"},
                                  "config");
    if (j.contains("categories")) {
      const auto& cats = j["categories"];
      if (cats.is_string()) {
        const auto name = cats.get<std::string>();
        if (name == "plutchik8") c.categories = plutchik_categories();
        else if (name == "semeval11") c.categories = semeval_categories();
        else throw RunConfigError("unknown category list '" + name + "'");
      } else {
        c.categories = cats.get<std::vector<std::string>>();
      }
      if (c.categories.empty()) throw RunConfigError("category list is empty");
      if (std::set<std::string>(c.categories.begin(), c.categories.end()).size() != c.categories.size()) {
        throw RunConfigError("category list has duplicates");
      }
    }
    c.seed = j.value("seed", c.seed);
    if (j.contains("bpe")) {
      config_detail::reject_unknown(j["bpe"], {"vocab_size"}, "bpe");
      c.bpe_vocab_size = j["bpe"].value("vocab_size", c.bpe_vocab_size);
    }
    if (j.contains("model")) {
      const auto& m = j["model"];
      config_detail::reject_unknown(m, {"architecture", "d_model", "layers", "heads", "max_seq_len", "dropout"}, "model");
      if (m.contains("architecture")) c.model.architecture = parse_architecture(m["architecture"].get<std::string>());
      c.model.d_model = m.value("d_model", c.model.d_model);
      c.model.layers = m.value("layers", c.model.layers);
      c.model.heads = m.value("heads", c.model.heads);
      c.model.max_seq_len = m.value("max_seq_len", c.model.max_seq_len);
      c.model.dropout = m.value("dropout", c.model.dropout);
    }
    if (j.contains("pretrain")) {
      c.pretrain = config_detail::schedule_from_json(j["pretrain"], c.pretrain, "pretrain");
      c.pretrain_log_interval = j["pretrain"].value("log_interval", c.pretrain_log_interval);
    }
    if (j.contains("finetune")) {
      c.finetune = config_detail::schedule_from_json(j["finetune"], c.finetune, "finetune");
      c.auxiliary_weight = j["finetune"].value("auxiliary_weight", c.auxiliary_weight);
      c.freeze_lm_head = j["finetune"].value("freeze_lm_head", c.freeze_lm_head);
    }
    if (j.contains("head")) {
      const auto& h = j["head"];
      config_detail::reject_unknown(h, {"kind", "hidden", "dropout"}, "head");
      if (h.contains("kind")) c.head_kind = parse_head_kind(h["kind"].get<std::string>());
      c.head_hidden = h.value("hidden", c.head_hidden);
      c.head_dropout = h.value("dropout", c.head_dropout);
    }
    if (j.contains("split")) {
      const auto& s = j["split"];
      config_detail::reject_unknown(s, {"train", "threshold", "validation"}, "split");
      c.split.train = s.value("train", c.split.train);
      c.split.threshold = s.value("threshold", c.split.threshold);
      c.split.validation = s.value("validation", c.split.validation);
      if (std::abs(c.split.train + c.split.threshold + c.split.validation - 1.0) > 1e-9) {
        throw RunConfigError("split fractions must sum to 1");
      }
    }
    if (j.contains("paths")) {
      for (const auto& [name, v] : j["paths"].items()) {
        std::filesystem::path p = v.get<std::string>();
        if (p.is_relative() && !base_dir.empty()) p = base_dir / p;
        if (!std::filesystem::exists(p)) throw RunConfigError("path '" + name + "' does not exist: " + p.string());
        c.paths[name] = p;
      }
    }
    if (j.contains("out")) {
      std::filesystem::path p = j["out"].get<std::string>();
      if (p.is_relative() && !base_dir.empty()) p = base_dir / p;
      c.out = p;
    }
  } catch (const nlohmann::json::exception& e) {
    throw RunConfigError(std::string("config: ") + e.what());
  } catch (const std::invalid_argument& e) {  // includes ConfigError
    throw RunConfigError(std::string("config: ") + e.what());
  }
  return c;
}

inline RunConfig load_run_config(const std::filesystem::path& path) {
  return parse_run_config(read_file(path), path.parent_path());
}

}  // namespace emotune
