#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <numbers>
#include <optional>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include "emotune/metrics/metrics.hpp"
#include "emotune/models/classifier.hpp"
#include "emotune/models/language_model.hpp"
#include "emotune/numerics/random.hpp"
#include "emotune/tokenizer/bpc.hpp"
#include "emotune/training/adam.hpp"
#include "emotune/training/schedule.hpp"

namespace emotune {

// ---- split ---------------------------------------------------------------

struct SplitSpec {
  double train = 0.70;
  double threshold = 0.10;
  double validation = 0.20;
  std::uint64_t seed = 0;
};

struct SplitIndices {
  std::vector<std::size_t> train, threshold, validation;
};

/// Shuffled partition with sizes floor(0.7 n) / floor(0.1 n) / remainder.
inline SplitIndices split_indices(std::size_t n, const SplitSpec& spec) {
  if (n < 10) throw std::invalid_argument("splitting needs at least 10 examples, got " + std::to_string(n));
  // The small offset keeps products such as 0.7 * 10 from flooring below the exact value.
  const auto part = [n](double f) { return static_cast<std::size_t>(std::floor(f * static_cast<double>(n) + 1e-9)); };
  const std::size_t n_train = part(spec.train), n_thr = part(spec.threshold);
  if (n_train + n_thr > n) throw std::invalid_argument("split fractions exceed 1");
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  Rng rng(spec.seed);
  rng.shuffle(order);
  SplitIndices s;
  s.train.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_train));
  s.threshold.assign(order.begin() + static_cast<std::ptrdiff_t>(n_train),
                     order.begin() + static_cast<std::ptrdiff_t>(n_train + n_thr));
  s.validation.assign(order.begin() + static_cast<std::ptrdiff_t>(n_train + n_thr), order.end());
  return s;
}

template <typename T>
struct Splits {
  std::vector<T> train, threshold, validation;
};

template <typename T>
Splits<T> split(const std::vector<T>& data, const SplitSpec& spec) {
  const SplitIndices idx = split_indices(data.size(), spec);
  Splits<T> out;
  for (std::size_t i : idx.train) out.train.push_back(data[i]);
  for (std::size_t i : idx.threshold) out.threshold.push_back(data[i]);
  for (std::size_t i : idx.validation) out.validation.push_back(data[i]);
  return out;
}

// ---- shared pieces -------------------------------------------------------

namespace train_detail {

inline std::size_t ceil_div(std::size_t a, std::size_t b) { return (a + b - 1) / b; }

/// Next-token targets for each packed sequence; the last position has none.
inline std::vector<int> shifted_targets(const std::vector<std::vector<int>>& seqs) {
  std::vector<int> targets;
  for (const auto& s : seqs) {
    for (std::size_t t = 0; t + 1 < s.size(); ++t) targets.push_back(s[t + 1] == kPadId ? -1 : s[t + 1]);
    targets.push_back(-1);
  }
  return targets;
}

inline std::set<std::string> lm_head_names(const LanguageModel& m) {
  std::set<std::string> out;
  for (const auto& [name, t] : m.parameters())
    if (model_detail::is_lm_head_param(name)) out.insert(name);
  return out;
}

}  // namespace train_detail

// ---- pretraining ---------------------------------------------------------

struct LmChunk {
  std::vector<int> input;
  std::vector<int> target;
};

/// Contiguous chunks of up to seq_len inputs; each target is the next corpus
/// token, so every token after the first is predicted exactly once.
inline std::vector<LmChunk> make_chunks(std::span<const int> corpus, std::size_t seq_len) {
  if (seq_len == 0) throw std::invalid_argument("seq_len must be positive");
  std::vector<LmChunk> chunks;
  if (corpus.size() < 2) return chunks;
  for (std::size_t s = 0; s + 1 < corpus.size(); s += seq_len) {
    const std::size_t e = std::min(s + seq_len, corpus.size() - 1);
    chunks.push_back({{corpus.begin() + static_cast<std::ptrdiff_t>(s), corpus.begin() + static_cast<std::ptrdiff_t>(e)},
                      {corpus.begin() + static_cast<std::ptrdiff_t>(s + 1), corpus.begin() + static_cast<std::ptrdiff_t>(e + 1)}});
  }
  return chunks;
}

struct PretrainLogEntry {
  std::size_t step = 0;  // steps completed
  double lr = 0.0;
  double loss = 0.0;  // mean training nll per token over the interval, nats
  BpcReport bpc;      // training BPC over the interval
  std::optional<BpcReport> eval_bpc;

  std::string to_line() const {
    std::string s = "step " + std::to_string(step) + " lr " + metrics_detail::format_double(lr) + " loss " +
                    metrics_detail::format_double(loss) + " bpc " + metrics_detail::format_double(bpc.bpc);
    if (eval_bpc) s += " eval_bpc " + metrics_detail::format_double(eval_bpc->bpc);
    return s;
  }
};

struct PretrainOptions {
  std::size_t log_interval = 50;
  /// Characters per vocabulary id for BPC; empty counts one per token.
  std::vector<std::size_t> token_chars;
  /// Evaluate BPC over the whole corpus without dropout at each log point.
  bool eval_corpus = false;
  /// Stop once evaluated BPC falls below this value (needs eval_corpus).
  double stop_below_bpc = 0.0;
  std::function<void(const PretrainLogEntry&)> on_log;
};

struct PretrainResult {
  LanguageModel model;
  std::vector<PretrainLogEntry> log;
  std::size_t steps = 0;
  double initial_loss = 0.0;  // training loss of the first batch
};

namespace train_detail {

inline std::size_t chars_of(std::span<const int> targets, const std::vector<std::size_t>& token_chars) {
  std::size_t n = 0;
  for (int t : targets) {
    if (t < 0) continue;
    n += token_chars.empty() ? 1 : token_chars.at(static_cast<std::size_t>(t));
  }
  return n;
}

}  // namespace train_detail

/// BPC of `model` on the corpus chunks, evaluated without dropout.
inline BpcReport evaluate_bpc(const LanguageModel& model, std::span<const int> corpus,
                              const std::vector<std::size_t>& token_chars = {}, std::size_t batch_size = 16) {
  const auto chunks = make_chunks(corpus, model.config().max_seq_len);
  if (chunks.empty()) throw std::invalid_argument("BPC needs at least two tokens");
  BpcAccumulator acc;
  for (std::size_t b = 0; b < chunks.size(); b += batch_size) {
    const std::size_t e = std::min(chunks.size(), b + batch_size);
    std::vector<std::vector<int>> inputs;
    std::vector<int> targets;
    for (std::size_t i = b; i < e; ++i) {
      inputs.push_back(chunks[i].input);
      targets.insert(targets.end(), chunks[i].target.begin(), chunks[i].target.end());
    }
    Graph g;
    ModelGraph mg(g, model, false);
    const auto enc = mg.encode(inputs);
    const double mean = g.value(ops::softmax_cross_entropy(g, mg.lm_logits(enc.hidden), targets)).item();
    acc.add(mean * static_cast<double>(targets.size()), targets.size(), train_detail::chars_of(targets, token_chars));
  }
  return acc.report();
}

/// Maximum-likelihood next-token training with Adam on contiguous chunks.
inline PretrainResult pretrain(LanguageModel model, std::span<const int> corpus, const Schedule& schedule,
                               std::uint64_t seed, const PretrainOptions& opt = {}) {
  schedule.validate();
  if (schedule.phase != Phase::pretrain) throw std::invalid_argument("pretrain needs a pretrain schedule");
  if (corpus.empty()) throw std::invalid_argument("pretraining corpus is empty");
  const auto chunks = make_chunks(corpus, model.config().max_seq_len);
  if (chunks.empty()) throw std::invalid_argument("pretraining corpus needs at least two tokens");
  if (opt.log_interval == 0) throw std::invalid_argument("log_interval must be positive");

  const std::size_t per_epoch = train_detail::ceil_div(chunks.size(), schedule.batch_size);
  const std::size_t total = schedule.planned_steps(per_epoch);
  const auto frozen = std::set<std::string>{};
  Adam adam;
  PretrainResult result{model, {}, 0, 0.0};
  BpcAccumulator interval;
  double interval_loss = 0.0;
  std::size_t interval_steps = 0;

  for (std::size_t step = 0; step < total; ++step) {
    const std::size_t first = (step % per_epoch) * schedule.batch_size;
    const std::size_t last = std::min(chunks.size(), first + schedule.batch_size);
    std::vector<std::vector<int>> inputs;
    std::vector<int> targets;
    for (std::size_t i = first; i < last; ++i) {
      inputs.push_back(chunks[i].input);
      targets.insert(targets.end(), chunks[i].target.begin(), chunks[i].target.end());
    }
    Graph g(GraphOptions{true, derive_seed(seed, step)});
    ModelGraph mg(g, result.model, true, frozen);
    const auto enc = mg.encode(inputs);
    const NodeId loss = ops::softmax_cross_entropy(g, mg.lm_logits(enc.hidden), targets);
    const double value = g.value(loss).item();
    if (step == 0) result.initial_loss = value;
    const double lr = lr_at(schedule, step, per_epoch);
    adam.step(result.model.parameters(), g.backward(loss), lr);

    interval.add(value * static_cast<double>(targets.size()), targets.size(), train_detail::chars_of(targets, opt.token_chars));
    interval_loss += value;
    ++interval_steps;
    result.steps = step + 1;

    if (result.steps % opt.log_interval == 0 || result.steps == total) {
      PretrainLogEntry e;
      e.step = result.steps;
      e.lr = lr;
      e.loss = interval_loss / static_cast<double>(interval_steps);
      e.bpc = interval.report();
      if (opt.eval_corpus) e.eval_bpc = evaluate_bpc(result.model, corpus, opt.token_chars);
      result.log.push_back(e);
      if (opt.on_log) opt.on_log(e);
      interval = {};
      interval_loss = 0.0;
      interval_steps = 0;
      if (e.eval_bpc && opt.stop_below_bpc > 0.0 && e.eval_bpc->bpc < opt.stop_below_bpc) break;
    }
  }
  return result;
}

// ---- finetuning ----------------------------------------------------------

struct TokenizedExample {
  std::string id;
  std::vector<int> tokens;
  std::vector<int> labels;  // one 0/1 entry per category

  friend bool operator==(const TokenizedExample&, const TokenizedExample&) = default;
};

struct FinetuneData {
  std::vector<TokenizedExample> train, threshold, validation;
};

struct FinetuneStepLog {
  std::size_t member = 0;  // model index within the classifier
  std::size_t epoch = 0;
  std::size_t step = 0;
  double lr = 0.0;
  double total = 0.0;
  double classification = 0.0;
  double lm = 0.0;

  std::string to_line() const {
    return "member " + std::to_string(member) + " epoch " + std::to_string(epoch) + " step " + std::to_string(step) +
           " lr " + metrics_detail::format_double(lr) + " loss " + metrics_detail::format_double(total) + " cls " +
           metrics_detail::format_double(classification) + " lm " + metrics_detail::format_double(lm);
  }
};

struct FinetuneOptions {
  double auxiliary_weight = 0.02;
  /// Keep the language-model decoder fixed.
  bool freeze_lm_head = false;
  std::size_t eval_batch_size = 64;
  std::function<void(const FinetuneStepLog&)> on_step;
  std::function<void(std::size_t member, std::size_t epoch, double validation_accuracy, const LanguageModel& model)>
      on_epoch;
};

struct FinetuneResult {
  Classifier classifier;
  std::vector<std::size_t> best_epoch;  // per member, 1-based
  std::vector<std::vector<double>> validation_accuracy;  // per member, per epoch
  ScoreMatrix threshold_predictions;
  ScoreMatrix validation_predictions;
};

/// Sigmoid outputs of a model's classification head for each sequence.
inline ScoreMatrix predict_scores(const LanguageModel& model, const std::vector<std::vector<int>>& seqs,
                                  std::size_t batch_size = 64) {
  if (!model.head()) throw std::logic_error("prediction requires a classification head");
  ScoreMatrix out;
  out.reserve(seqs.size());
  for (std::size_t b = 0; b < seqs.size(); b += batch_size) {
    std::vector<std::vector<int>> batch;
    for (std::size_t i = b; i < std::min(seqs.size(), b + batch_size); ++i) {
      batch.push_back(strip_padding(seqs[i]));
      if (batch.back().empty()) throw std::invalid_argument("sequence " + std::to_string(i) + " has no tokens");
    }
    Graph g;
    ModelGraph mg(g, model, false);
    const Tensor& logits = g.value(mg.head_logits(mg.pool_last(mg.encode(batch))));
    for (std::size_t r = 0; r < logits.rows(); ++r) {
      std::vector<double> row(logits.cols());
      for (std::size_t c = 0; c < row.size(); ++c) row[c] = detail::sigmoid(logits.at(r, c));
      out.push_back(std::move(row));
    }
  }
  return out;
}

inline ScoreMatrix predict_scores(const Classifier& clf, const std::vector<std::vector<int>>& seqs,
                                  std::size_t batch_size = 64) {
  if (clf.kind() == HeadKind::multihead) return predict_scores(clf.members().front(), seqs, batch_size);
  ScoreMatrix out(seqs.size());
  for (const auto& m : clf.members()) {
    const ScoreMatrix col = predict_scores(m, seqs, batch_size);
    for (std::size_t i = 0; i < seqs.size(); ++i) out[i].push_back(col[i][0]);
  }
  return out;
}

inline LabelMatrix threshold_at(const ScoreMatrix& scores, double t) {
  LabelMatrix out;
  for (const auto& row : scores) {
    std::vector<int> r;
    for (double p : row) r.push_back(p >= t ? 1 : 0);
    out.push_back(std::move(r));
  }
  return out;
}

namespace train_detail {

inline std::vector<std::vector<int>> sequences(const std::vector<TokenizedExample>& xs) {
  std::vector<std::vector<int>> out;
  for (const auto& x : xs) out.push_back(x.tokens);
  return out;
}

/// Label columns a member is trained on: all of them, or just its category.
inline LabelMatrix member_labels(const std::vector<TokenizedExample>& xs, const HeadSpec& spec) {
  LabelMatrix out;
  for (const auto& x : xs) {
    if (x.labels.size() != spec.n_c) {
      throw std::invalid_argument("example '" + x.id + "' has " + std::to_string(x.labels.size()) +
                                  " labels, head expects " + std::to_string(spec.n_c));
    }
    if (spec.kind == HeadKind::multihead) out.push_back(x.labels);
    else out.push_back({x.labels[spec.category]});
  }
  return out;
}

struct MemberOutcome {
  LanguageModel model;
  std::size_t best_epoch = 0;
  std::vector<double> accuracy;
  ScoreMatrix threshold_predictions;
  ScoreMatrix validation_predictions;
};

inline MemberOutcome train_member(LanguageModel model, const FinetuneData& data, const HeadSpec& spec,
                                  const Schedule& schedule, std::uint64_t seed, std::size_t member,
                                  const FinetuneOptions& opt) {
  model.attach_head(spec, derive_seed(seed, 1'000'000 + member));
  const LabelMatrix train_y = member_labels(data.train, spec);
  const LabelMatrix val_y = member_labels(data.validation, spec);
  const auto val_x = sequences(data.validation);
  const auto thr_x = sequences(data.threshold);
  const std::size_t n = data.train.size();
  const std::size_t per_epoch = ceil_div(n, schedule.batch_size);
  const std::set<std::string> frozen = opt.freeze_lm_head ? lm_head_names(model) : std::set<std::string>{};
  const std::uint64_t member_seed = derive_seed(seed, member);

  Adam adam;
  MemberOutcome best{model, 0, {}, {}, {}};
  double best_acc = -1.0;
  std::size_t step = 0;
  for (std::size_t epoch = 0; epoch < schedule.epochs; ++epoch) {
    std::vector<std::size_t> order(n);
    for (std::size_t i = 0; i < n; ++i) order[i] = i;
    Rng shuffler(derive_seed(derive_seed(member_seed, 1), epoch));
    shuffler.shuffle(order);
    for (std::size_t b = 0; b < n; b += schedule.batch_size, ++step) {
      std::vector<std::vector<int>> seqs;
      Tensor labels({std::min(n, b + schedule.batch_size) - b, train_y.front().size()});
      for (std::size_t i = b, r = 0; i < std::min(n, b + schedule.batch_size); ++i, ++r) {
        seqs.push_back(strip_padding(data.train[order[i]].tokens));
        if (seqs.back().empty()) throw std::invalid_argument("example '" + data.train[order[i]].id + "' has no tokens");
        for (std::size_t c = 0; c < labels.cols(); ++c) labels.at(r, c) = train_y[order[i]][c];
      }
      Graph g(GraphOptions{true, derive_seed(derive_seed(member_seed, 2), step)});
      ModelGraph mg(g, model, true, frozen);
      const auto enc = mg.encode(seqs);
      const NodeId cls = ops::sigmoid_bce(g, mg.head_logits(mg.pool_last(enc)), labels);
      NodeId total = cls;
      double lm_value = 0.0;
      if (opt.auxiliary_weight != 0.0) {
        const NodeId lm = ops::softmax_cross_entropy(g, mg.lm_logits(enc.hidden), shifted_targets(seqs));
        lm_value = g.value(lm).item();
        total = ops::add(g, cls, ops::scale(g, lm, opt.auxiliary_weight));
      }
      const double lr = lr_at(schedule, step, per_epoch);
      adam.step(model.parameters(), g.backward(total), lr);
      if (opt.on_step) {
        opt.on_step({member, epoch + 1, step, lr, g.value(total).item(), g.value(cls).item(), lm_value});
      }
    }
    const ScoreMatrix val_p = predict_scores(model, val_x, opt.eval_batch_size);
    const double acc = mean_binary_accuracy(threshold_at(val_p, 0.5), val_y);
    best.accuracy.push_back(acc);
    if (opt.on_epoch) opt.on_epoch(member, epoch + 1, acc, model);
    if (acc > best_acc) {
      best_acc = acc;
      best.model = model;
      best.best_epoch = epoch + 1;
      best.validation_predictions = val_p;
      best.threshold_predictions = predict_scores(model, thr_x, opt.eval_batch_size);
    }
  }
  return best;
}

}  // namespace train_detail

/// Trains a freshly attached classification head together with the encoder
/// on sigmoid BCE plus the weighted auxiliary LM loss. After each epoch the
/// validation accuracy (mean per-category binary accuracy at 0.5) is
/// measured; the earliest best epoch supplies the returned model and its
/// threshold-split predictions. A single-kind head trains one model per
/// category, each selecting its own best epoch.
inline FinetuneResult finetune(const LanguageModel& base, const FinetuneData& data, const HeadSpec& head,
                               const Schedule& schedule, std::uint64_t seed, const FinetuneOptions& opt = {}) {
  schedule.validate();
  head.validate();
  if (data.train.empty() || data.threshold.empty() || data.validation.empty()) {
    throw std::invalid_argument("finetuning needs nonempty train, threshold and validation splits");
  }
  if (schedule.epochs == 0) throw std::invalid_argument("finetuning needs at least one epoch");

  std::vector<HeadSpec> specs;
  if (head.kind == HeadKind::multihead) {
    specs.push_back(head);
  } else {
    for (std::size_t k = 0; k < head.n_c; ++k) {
      HeadSpec s = head;
      s.category = k;
      specs.push_back(s);
    }
  }

  FinetuneResult r;
  std::vector<LanguageModel> members;
  r.threshold_predictions.assign(data.threshold.size(), {});
  r.validation_predictions.assign(data.validation.size(), {});
  for (std::size_t m = 0; m < specs.size(); ++m) {
    auto out = train_detail::train_member(base, data, specs[m], schedule, seed, m, opt);
    for (std::size_t i = 0; i < data.threshold.size(); ++i) {
      auto& row = r.threshold_predictions[i];
      row.insert(row.end(), out.threshold_predictions[i].begin(), out.threshold_predictions[i].end());
    }
    for (std::size_t i = 0; i < data.validation.size(); ++i) {
      auto& row = r.validation_predictions[i];
      row.insert(row.end(), out.validation_predictions[i].begin(), out.validation_predictions[i].end());
    }
    r.best_epoch.push_back(out.best_epoch);
    r.validation_accuracy.push_back(std::move(out.accuracy));
    members.push_back(std::move(out.model));
  }
  r.classifier = Classifier(std::move(members));
  return r;
}

}  // namespace emotune
