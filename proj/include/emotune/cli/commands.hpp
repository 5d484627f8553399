#pragma once

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "emotune/active_learning/sampler.hpp"
#include "emotune/calibration/thresholds.hpp"
#include "emotune/data/dataset.hpp"
#include "emotune/data/run_config.hpp"
#include "emotune/metrics/metrics.hpp"
#include "emotune/models/checkpoint.hpp"
#include "emotune/tokenizer/bpe.hpp"
#include "emotune/training/training.hpp"

namespace emotune::cli {

namespace fs = std::filesystem;

/// Values collected from the command line before dispatch.
struct Args {
  std::string command;
  std::optional<fs::path> config;
  std::optional<std::uint64_t> seed;
  std::optional<fs::path> out;
  std::optional<fs::path> corpus, bpe, data, pool, checkpoint, thresholds, predictions;
  std::optional<std::size_t> k;
  std::optional<std::size_t> vocab;
  std::string mode = "per_category";
};

/// Seed streams, one per pipeline stage.
enum Stream : std::uint64_t { kModelInit = 1, kPretrain = 2, kSplit = 3, kFinetune = 4, kSelect = 5 };

class CommandError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct Context {
  Args args;
  RunConfig config;
  fs::path out_dir;
  std::ostream& out;
  std::ostream& err;

  std::uint64_t seed() const { return args.seed.value_or(config.seed); }

  fs::path input(const std::optional<fs::path>& flag, const std::string& name) const {
    if (flag) {
      if (!fs::exists(*flag)) throw CommandError("--" + name + " file does not exist: " + flag->string());
      return *flag;
    }
    auto it = config.paths.find(name);
    if (it != config.paths.end()) return it->second;
    throw CommandError(args.command + " needs --" + name);
  }

  fs::path output(const std::string& file) const { return out_dir / file; }

  void write(const std::string& file, std::string_view bytes) const { write_file_atomic(output(file), bytes); }
};

inline BpeModel load_bpe(const fs::path& p) { return BpeModel::parse(read_file(p)); }

inline std::vector<int> tokenize(const BpeModel& bpe, std::string_view text, std::size_t max_len) {
  std::vector<int> ids = bpe.encode(text);
  if (ids.size() > max_len) ids.resize(max_len);
  return ids;
}

inline std::vector<TokenizedExample> tokenize(const BpeModel& bpe, const LabeledDataset& ds, std::size_t max_len) {
  std::vector<TokenizedExample> out;
  for (const auto& x : ds.examples) {
    auto ids = tokenize(bpe, x.text, max_len);
    if (ids.empty()) throw DatasetError("example '" + x.id + "' tokenizes to nothing");
    out.push_back({x.id, std::move(ids), x.labels});
  }
  return out;
}

inline std::vector<std::string> ids_of(const LabeledDataset& ds) {
  std::vector<std::string> ids;
  for (const auto& x : ds.examples) ids.push_back(x.id);
  return ids;
}

inline void check_fingerprint(const Checkpoint& ck, const BpeModel& bpe) {
  if (ck.tokenizer_fingerprint != bpe.fingerprint()) {
    throw CommandError("checkpoint was trained with a different tokenizer");
  }
}

// ---- subcommands ---------------------------------------------------------

inline int cmd_train_bpe(const Context& c) {
  const std::string corpus = read_file(c.input(c.args.corpus, "corpus"));
  const BpeModel bpe = train_bpe(corpus, c.args.vocab.value_or(c.config.bpe_vocab_size));
  c.write("bpe.txt", bpe.serialize());
  c.out << "vocab_size " << bpe.vocab_size() << "\nmerges " << bpe.merges().size() << "\n";
  return 0;
}

inline int cmd_pretrain(const Context& c) {
  const BpeModel bpe = load_bpe(c.input(c.args.bpe, "bpe"));
  const std::vector<int> corpus = bpe.encode(read_file(c.input(c.args.corpus, "corpus")));
  ModelConfig mc = c.config.model;
  mc.vocab_size = bpe.vocab_size();
  const LanguageModel fresh = LanguageModel::build(mc, derive_seed(c.seed(), kModelInit));

  PretrainOptions opt;
  opt.log_interval = c.config.pretrain_log_interval;
  for (std::size_t id = 0; id < bpe.vocab_size(); ++id) opt.token_chars.push_back(bpe.char_count(static_cast<int>(id)));
  std::string log;
  opt.on_log = [&](const PretrainLogEntry& e) { log += e.to_line() + "\n"; };
  const PretrainResult r = pretrain(fresh, corpus, c.config.pretrain, derive_seed(c.seed(), kPretrain), opt);

  save_checkpoint(c.output("pretrain.ckpt"), Checkpoint{{r.model}, bpe.fingerprint()});
  c.write("pretrain_log.txt", log);
  const BpcReport final_bpc = evaluate_bpc(r.model, corpus, opt.token_chars);
  c.out << "steps " << r.steps << "\ncorpus_bpc " << metrics_detail::format_double(final_bpc.bpc) << "\n";
  return 0;
}

inline int cmd_finetune(const Context& c) {
  const BpeModel bpe = load_bpe(c.input(c.args.bpe, "bpe"));
  const LabeledDataset ds = load_dataset(c.input(c.args.data, "data"), c.config.categories);

  LanguageModel base;
  if (c.args.checkpoint || c.config.paths.contains("checkpoint")) {
    Checkpoint ck = load_checkpoint(c.input(c.args.checkpoint, "checkpoint"));
    check_fingerprint(ck, bpe);
    if (ck.models.size() != 1) throw CommandError("finetuning starts from a single pretrained model");
    base = std::move(ck.models.front());
    base.detach_head();
  } else {
    ModelConfig mc = c.config.model;
    mc.vocab_size = bpe.vocab_size();
    base = LanguageModel::build(mc, derive_seed(c.seed(), kModelInit));
  }

  SplitSpec spec = c.config.split;
  spec.seed = derive_seed(c.seed(), kSplit);
  const Splits<LabeledExample> parts = split(ds.examples, spec);
  const LabeledDataset train{ds.categories, parts.train}, thr{ds.categories, parts.threshold},
      val{ds.categories, parts.validation};
  c.write("train.jsonl", serialize_dataset(train));
  c.write("threshold.jsonl", serialize_dataset(thr));
  c.write("validation.jsonl", serialize_dataset(val));

  const std::size_t max_len = base.config().max_seq_len;
  const FinetuneData fd{tokenize(bpe, train, max_len), tokenize(bpe, thr, max_len), tokenize(bpe, val, max_len)};
  HeadSpec head = c.config.head_spec();
  head.layer_sizes.front() = base.config().d_model;
  FinetuneOptions opt;
  opt.auxiliary_weight = c.config.auxiliary_weight;
  opt.freeze_lm_head = c.config.freeze_lm_head;
  std::string log;
  opt.on_step = [&](const FinetuneStepLog& s) { log += s.to_line() + "\n"; };
  opt.on_epoch = [&](std::size_t member, std::size_t epoch, double acc, const LanguageModel&) {
    log += "member " + std::to_string(member) + " epoch " + std::to_string(epoch) + " validation_accuracy " +
           metrics_detail::format_double(acc) + "\n";
  };
  const FinetuneResult r = finetune(base, fd, head, c.config.finetune, derive_seed(c.seed(), kFinetune), opt);

  save_checkpoint(c.output("finetune.ckpt"), Checkpoint{r.classifier.members(), bpe.fingerprint()});
  c.write("finetune_log.txt", log);
  c.write("threshold_predictions.tsv", serialize_predictions({ds.categories, ids_of(thr), r.threshold_predictions}));
  c.write("validation_predictions.tsv", serialize_predictions({ds.categories, ids_of(val), r.validation_predictions}));
  const MetricReport report = evaluate_labels(threshold_at(r.validation_predictions, 0.5), val.labels(), ds.categories);
  c.write("validation_metrics.txt", report.to_text());
  c.write("validation_metrics.json", report.to_json().dump(2) + "\n");
  c.out << report.to_text();
  return 0;
}

inline std::vector<Sentiment> sentiments_of(const LabeledDataset& ds) {
  std::vector<Sentiment> out;
  for (const auto& x : ds.examples) {
    if (!x.sentiment) throw DatasetError("example '" + x.id + "' has no sentiment label");
    out.push_back(*x.sentiment);
  }
  return out;
}

inline ScoreMatrix aligned_predictions(const PredictionTable& t, const LabeledDataset& ds, std::size_t width) {
  if (t.columns.size() != width) {
    throw CommandError("predictions have " + std::to_string(t.columns.size()) + " columns, expected " +
                       std::to_string(width));
  }
  return t.aligned(ids_of(ds));
}

inline std::vector<double> column(const ScoreMatrix& m, std::size_t k) {
  std::vector<double> out;
  for (const auto& r : m) out.push_back(r[k]);
  return out;
}

inline int cmd_calibrate(const Context& c) {
  const PredictionTable table = parse_predictions(read_file(c.input(c.args.predictions, "predictions")));
  const LabeledDataset ds = load_dataset(c.input(c.args.data, "data"), c.config.categories);
  ThresholdSet set;
  if (c.args.mode == "per_category") {
    if (table.columns != ds.categories) throw CommandError("prediction columns do not match the configured categories");
    const auto r = search_category_thresholds(aligned_predictions(table, ds, ds.categories.size()), ds.labels(),
                                              ds.categories);
    for (std::size_t k = 0; k < r.f1.size(); ++k) {
      c.out << "threshold." << ds.categories[k] << " " << metrics_detail::format_double(r.thresholds.thresholds[k])
            << "\nf1." << ds.categories[k] << " " << metrics_detail::format_double(r.f1[k]) << "\n";
    }
    set = r.thresholds;
  } else if (c.args.mode == "neutral") {
    const ScoreMatrix s = aligned_predictions(table, ds, 1);
    const auto r = search_neutral_thresholds(column(s, 0), sentiments_of(ds));
    for (const auto& w : r.warnings) c.err << "warning: " << w << "\n";
    c.out << "accuracy " << metrics_detail::format_double(r.accuracy) << "\n";
    set = r.thresholds;
  } else if (c.args.mode == "pn") {
    const ScoreMatrix s = aligned_predictions(table, ds, 2);
    const auto r = search_pn_thresholds(column(s, 0), column(s, 1), sentiments_of(ds));
    c.out << "accuracy " << metrics_detail::format_double(r.accuracy) << "\n";
    set = r.thresholds;
  } else {
    throw CommandError("unknown calibration mode '" + c.args.mode + "'");
  }
  c.write("thresholds.txt", serialize_thresholds(set));
  return 0;
}

inline int cmd_predict(const Context& c) {
  const BpeModel bpe = load_bpe(c.input(c.args.bpe, "bpe"));
  const Checkpoint ck = load_checkpoint(c.input(c.args.checkpoint, "checkpoint"));
  check_fingerprint(ck, bpe);
  const Classifier clf(ck.models);
  if (clf.categories() != c.config.categories.size()) {
    throw CommandError("checkpoint predicts " + std::to_string(clf.categories()) + " categories, config lists " +
                       std::to_string(c.config.categories.size()));
  }
  const LabeledDataset ds = load_dataset(c.input(c.args.data, "data"), c.config.categories);
  const auto xs = tokenize(bpe, ds, ck.models.front().config().max_seq_len);
  const ScoreMatrix scores = predict_scores(clf, train_detail::sequences(xs));
  c.write("predictions.tsv", serialize_predictions({c.config.categories, ids_of(ds), scores}));
  c.out << "predicted " << scores.size() << "\n";
  return 0;
}

inline int cmd_evaluate(const Context& c) {
  const PredictionTable table = parse_predictions(read_file(c.input(c.args.predictions, "predictions")));
  const LabeledDataset ds = load_dataset(c.input(c.args.data, "data"), c.config.categories);
  if (table.columns != ds.categories) throw CommandError("prediction columns do not match the configured categories");
  const ScoreMatrix scores = aligned_predictions(table, ds, ds.categories.size());
  LabelMatrix preds;
  if (c.args.thresholds || c.config.paths.contains("thresholds")) {
    const ThresholdSet set = parse_thresholds(read_file(c.input(c.args.thresholds, "thresholds")));
    const auto* t = std::get_if<PerCategoryThresholds>(&set);
    if (!t || t->categories != ds.categories) throw CommandError("thresholds do not cover the configured categories");
    preds = apply_thresholds(set, scores);
  } else {
    preds = threshold_at(scores, 0.5);
  }
  const MetricReport report = evaluate_labels(preds, ds.labels(), ds.categories);
  c.write("metrics.txt", report.to_text());
  c.write("metrics.json", report.to_json().dump(2) + "\n");
  c.out << report.to_text();
  return 0;
}

inline int cmd_select(const Context& c) {
  const PredictionTable pool = parse_predictions(read_file(c.input(c.args.pool, "pool")));
  const LabeledDataset labeled = load_dataset(c.input(c.args.data, "data"), c.config.categories);
  if (pool.columns != labeled.categories) throw CommandError("pool columns do not match the configured categories");
  if (!c.args.k) throw CommandError("select needs --k");
  const ClassWeights cw = class_weights(labeled.labels());
  const std::vector<double> s = score_pool(pool.scores, cw.w);
  const auto chosen = sample(pool.ids, s, *c.args.k, derive_seed(c.seed(), kSelect));
  std::string text;
  for (const auto& id : chosen) text += id + "\n";
  c.write("selected.txt", text);
  c.out << "selected " << chosen.size() << "\n";
  return 0;
}

// ---- entry point ---------------------------------------------------------

inline void add_common(CLI::App* sub, Args& a) {
  sub->add_option("--config", a.config, "Run configuration (JSON)");
  sub->add_option("--seed", a.seed, "Seed overriding the configuration");
  sub->add_option("--out", a.out, "Output directory");
}

/// Runs one subcommand; `args` excludes the program name.
inline int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Emotion classification toolkit: tokenizer, pretraining, finetuning, calibration, evaluation"};
  app.require_subcommand(1);
  Args a;
  struct Spec {
    const char* name;
    const char* help;
    std::vector<std::pair<const char*, std::optional<fs::path>*>> paths;
  };
  const std::vector<Spec> specs{
      {"train-bpe", "Learn a byte-pair tokenizer from a text corpus", {{"--corpus", &a.corpus}}},
      {"pretrain", "Train a language model on a corpus", {{"--corpus", &a.corpus}, {"--bpe", &a.bpe}}},
      {"finetune", "Split a labeled dataset and finetune a classifier",
       {{"--data", &a.data}, {"--bpe", &a.bpe}, {"--checkpoint", &a.checkpoint}}},
      {"calibrate", "Search decision thresholds on threshold-split predictions",
       {{"--predictions", &a.predictions}, {"--data", &a.data}}},
      {"evaluate", "Score predictions against labels",
       {{"--predictions", &a.predictions}, {"--data", &a.data}, {"--thresholds", &a.thresholds}}},
      {"select", "Pick unlabeled examples for labeling", {{"--pool", &a.pool}, {"--data", &a.data}}},
      {"predict", "Predict category probabilities for a dataset",
       {{"--checkpoint", &a.checkpoint}, {"--bpe", &a.bpe}, {"--data", &a.data}}},
  };
  for (const auto& s : specs) {
    CLI::App* sub = app.add_subcommand(s.name, s.help);
    add_common(sub, a);
    for (const auto& [flag, target] : s.paths) sub->add_option(flag, *target);
    if (std::string_view(s.name) == "train-bpe") sub->add_option("--vocab", a.vocab, "Target vocabulary size");
    if (std::string_view(s.name) == "select") sub->add_option("--k", a.k, "Number of examples to select");
    if (std::string_view(s.name) == "calibrate") {
      sub->add_option("--mode", a.mode, "per_category, neutral or pn")->check(CLI::IsMember({"per_category", "neutral", "pn"}));
    }
    sub->callback([&a, name = std::string(s.name)] { a.command = name; });
  }

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::ParseError& e) {
    return app.exit(e, out, err);
  }

  try {
    RunConfig config = a.config ? load_run_config(*a.config) : RunConfig{};
    fs::path out_dir = ".";
    if (a.out) out_dir = *a.out;
    else if (const char* env = std::getenv("EMOTUNE_OUT"); env && *env) out_dir = env;
    else if (config.out) out_dir = *config.out;
    const Context c{a, std::move(config), out_dir, out, err};
    if (a.command == "train-bpe") return cmd_train_bpe(c);
    if (a.command == "pretrain") return cmd_pretrain(c);
    if (a.command == "finetune") return cmd_finetune(c);
    if (a.command == "calibrate") return cmd_calibrate(c);
    if (a.command == "evaluate") return cmd_evaluate(c);
    if (a.command == "select") return cmd_select(c);
    if (a.command == "predict") return cmd_predict(c);
    err << "error: unknown command\n";
    return 2;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return 1;
  }
}

}  // namespace emotune::cli
