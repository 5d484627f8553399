#include <cmath>
#include <set>
#include <vector>

#include <gtest/gtest.h>

#include "emotune/training/training.hpp"

namespace emotune {
namespace {

ModelConfig small_transformer(std::size_t vocab, std::size_t layers = 1, std::size_t d = 16, std::size_t seq = 16) {
  ModelConfig c;
  c.architecture = Architecture::transformer;
  c.vocab_size = vocab;
  c.d_model = d;
  c.layers = layers;
  c.heads = 2;
  c.max_seq_len = seq;
  c.dropout = 0.0;
  return c;
}

// Desk-scale runs use a larger step size than the full-scale defaults.
Schedule fast_pretrain(std::size_t steps, double lr = 1e-2) {
  Schedule s = pretrain_schedule();
  s.base_lr = lr;
  s.warmup_steps = 10;
  s.max_steps = steps;
  s.batch_size = 8;
  return s;
}

Schedule fast_finetune(std::size_t epochs, std::size_t batch = 8, double lr = 5e-3) {
  Schedule s = finetune_schedule();
  s.base_lr = lr;
  s.epochs = epochs;
  s.batch_size = batch;
  return s;
}

TEST(LrAt, WarmupAndCosine) {
  Schedule s = pretrain_schedule();
  s.max_steps = 10000;
  EXPECT_EQ(lr_at(s, 0, 100), 0.0);
  EXPECT_NEAR(lr_at(s, 1000, 100), 1e-4, 1e-18);
  EXPECT_NEAR(lr_at(s, 2000, 100), 2e-4, 1e-18);
  EXPECT_NEAR(lr_at(s, 6000, 100), 1e-4, 1e-15);
  EXPECT_NEAR(lr_at(s, 10000, 100), 0.0, 1e-12);
  for (std::size_t k = 0; k <= 10000; k += 37) EXPECT_GE(lr_at(s, k, 100), 0.0);
}

TEST(LrAt, HalfEpochWarmupThenConstant) {
  const Schedule s = finetune_schedule();
  EXPECT_EQ(lr_at(s, 0, 100), 0.0);
  EXPECT_NEAR(lr_at(s, 25, 100), 5e-6, 1e-20);
  EXPECT_EQ(lr_at(s, 50, 100), 1e-5);
  EXPECT_EQ(lr_at(s, 499, 100), 1e-5);
  EXPECT_EQ(lr_at(s, 10'000, 100), 1e-5);
}

TEST(LrAt, EpochPlannedCosine) {
  Schedule s{Phase::pretrain, 1.0, 0.0, 0.0, Decay::cosine, 4, 2, 0};
  EXPECT_EQ(lr_at(s, 0, 5), 1.0);
  EXPECT_NEAR(lr_at(s, 5, 5), 0.5, 1e-15);
  EXPECT_NEAR(lr_at(s, 10, 5), 0.0, 1e-15);
}

TEST(Split, SeventyTenTwenty) {
  const SplitIndices s = split_indices(100, {});
  EXPECT_EQ(s.train.size(), 70u);
  EXPECT_EQ(s.threshold.size(), 10u);
  EXPECT_EQ(s.validation.size(), 20u);
  std::set<std::size_t> all;
  for (const auto* part : {&s.train, &s.threshold, &s.validation}) all.insert(part->begin(), part->end());
  EXPECT_EQ(all.size(), 100u);
  EXPECT_EQ(*all.rbegin(), 99u);
}

TEST(Split, SizesDeterminismErrors) {
  for (std::size_t n : {10u, 11u, 19u, 30u, 57u, 1000u}) {
    const SplitIndices s = split_indices(n, {0.7, 0.1, 0.2, 5});
    EXPECT_EQ(s.train.size(), n * 7 / 10) << n;
    EXPECT_EQ(s.threshold.size(), n / 10) << n;
    EXPECT_EQ(s.train.size() + s.threshold.size() + s.validation.size(), n);
  }
  SplitSpec a{0.7, 0.1, 0.2, 3};
  EXPECT_EQ(split_indices(50, a).train, split_indices(50, a).train);
  SplitSpec b = a;
  b.seed = 4;
  EXPECT_NE(split_indices(50, a).train, split_indices(50, b).train);
  EXPECT_THROW(split_indices(9, a), std::invalid_argument);
  const std::vector<int> data{0, 1, 2, 3, 4, 5, 6, 7, 8, 9};
  const auto parts = split(data, a);
  EXPECT_EQ(parts.train.size() + parts.threshold.size() + parts.validation.size(), 10u);
}

TEST(Chunks, EveryTokenAfterTheFirstIsATargetOnce) {
  std::vector<int> corpus;
  for (int i = 0; i < 23; ++i) corpus.push_back(3 + i);
  const auto chunks = make_chunks(corpus, 5);
  std::vector<int> targets;
  for (const auto& c : chunks) {
    EXPECT_EQ(c.input.size(), c.target.size());
    for (std::size_t i = 0; i < c.input.size(); ++i) EXPECT_EQ(c.target[i], c.input[i] + 1);
    targets.insert(targets.end(), c.target.begin(), c.target.end());
  }
  EXPECT_EQ(targets, std::vector<int>(corpus.begin() + 1, corpus.end()));
}

TEST(Pretrain, FreshLossIsUniformNll) {
  for (std::size_t vocab : {50u, 300u}) {
    const LanguageModel m = LanguageModel::build(small_transformer(vocab), 1);
    std::vector<int> corpus;
    Rng rng(2);
    for (int i = 0; i < 200; ++i) corpus.push_back(3 + static_cast<int>(rng.below(vocab - 3)));
    const auto r = pretrain(m, corpus, fast_pretrain(1), 3);
    EXPECT_NEAR(r.initial_loss, std::log(static_cast<double>(vocab)), 0.05 * std::log(static_cast<double>(vocab)));
  }
}

TEST(Pretrain, RepeatedTokenIsMemorized) {
  const LanguageModel m = LanguageModel::build(small_transformer(20), 1);
  const std::vector<int> corpus(400, 7);
  PretrainOptions opt;
  opt.log_interval = 50;
  const auto r = pretrain(m, corpus, fast_pretrain(200), 4, opt);
  ASSERT_FALSE(r.log.empty());
  EXPECT_LT(r.log.back().loss, 0.01);
}

TEST(Pretrain, BpcDecreasesAndRunsAreDeterministic) {
  Rng rng(5);
  std::vector<int> corpus;
  for (int i = 0; i < 1000; ++i) corpus.push_back(3 + static_cast<int>(rng.below(30)));
  const LanguageModel m = LanguageModel::build(small_transformer(33, 2, 16, 32), 6);
  const double before = evaluate_bpc(m, corpus).bpc;
  PretrainOptions opt;
  opt.log_interval = 20;
  std::vector<std::string> lines;
  opt.on_log = [&](const PretrainLogEntry& e) { lines.push_back(e.to_line()); };
  const auto a = pretrain(m, corpus, fast_pretrain(60), 7, opt);
  EXPECT_LT(evaluate_bpc(a.model, corpus).bpc, before);
  EXPECT_EQ(lines.size(), 3u);
  const auto b = pretrain(m, corpus, fast_pretrain(60), 7);
  EXPECT_EQ(a.model, b.model);
}

TEST(Pretrain, Errors) {
  const LanguageModel m = LanguageModel::build(small_transformer(20), 1);
  EXPECT_THROW(pretrain(m, std::vector<int>{}, fast_pretrain(5), 1), std::invalid_argument);
  EXPECT_THROW(pretrain(m, std::vector<int>{3, 4}, fast_finetune(1), 1), std::invalid_argument);
}

TEST(Pretrain, BpcUsesCharacterCounts) {
  const LanguageModel m = LanguageModel::build(small_transformer(10), 1);
  const std::vector<int> corpus{3, 4, 5, 3, 4, 5, 3};
  std::vector<std::size_t> chars(10, 2);
  const BpcReport one = evaluate_bpc(m, corpus);
  const BpcReport two = evaluate_bpc(m, corpus, chars);
  EXPECT_EQ(one.char_count, 6u);
  EXPECT_EQ(two.char_count, 12u);
  EXPECT_NEAR(two.bpc * 2.0, one.bpc, 1e-12);
}

// Category k is positive iff marker token 3 + k appears.
FinetuneData marker_dataset(std::size_t n, std::size_t n_c, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<TokenizedExample> all;
  for (std::size_t i = 0; i < n; ++i) {
    TokenizedExample x;
    x.id = "x" + std::to_string(i);
    x.labels.assign(n_c, 0);
    const std::size_t len = 4 + rng.below(5);
    for (std::size_t t = 0; t < len; ++t) x.tokens.push_back(3 + static_cast<int>(n_c + rng.below(10)));
    for (std::size_t k = 0; k < n_c; ++k) {
      if (rng.below(2)) {
        x.labels[k] = 1;
        x.tokens[rng.below(len)] = 3 + static_cast<int>(k);
      }
    }
    for (std::size_t k = 0; k < n_c; ++k) {
      x.labels[k] = std::find(x.tokens.begin(), x.tokens.end(), 3 + static_cast<int>(k)) != x.tokens.end();
    }
    all.push_back(std::move(x));
  }
  FinetuneData d;
  d.train.assign(all.begin(), all.begin() + static_cast<std::ptrdiff_t>(n * 7 / 10));
  d.threshold.assign(all.begin() + static_cast<std::ptrdiff_t>(n * 7 / 10), all.begin() + static_cast<std::ptrdiff_t>(n * 8 / 10));
  d.validation.assign(all.begin() + static_cast<std::ptrdiff_t>(n * 8 / 10), all.end());
  return d;
}

HeadSpec head_spec(HeadKind kind, std::size_t d, std::size_t n_c) {
  HeadSpec h;
  h.kind = kind;
  h.layer_sizes = {d, 16};
  h.n_c = n_c;
  return h;
}

// Training-set micro F1 at 0.5 of the model each member holds after every
// epoch; members are combined column by column.
struct EpochF1Tracker {
  const std::vector<TokenizedExample>* xs;
  std::size_t members;
  std::vector<ScoreMatrix> latest;  // per member
  std::vector<double> per_epoch;

  FinetuneOptions options() {
    latest.assign(members, {});
    FinetuneOptions opt;
    opt.on_epoch = [this](std::size_t member, std::size_t epoch, double, const LanguageModel& m) {
      latest[member] = predict_scores(m, train_detail::sequences(*xs));
      if (member + 1 == members || members == 1) record(epoch);
    };
    return opt;
  }

  // Single-head members train one after another: earlier members contribute
  // their final-epoch model while the last member's epochs are recorded.
  void record(std::size_t) {
    LabelMatrix y;
    ScoreMatrix p(xs->size());
    for (const auto& x : *xs) y.push_back(x.labels);
    for (const auto& col : latest)
      for (std::size_t i = 0; i < p.size(); ++i) p[i].insert(p[i].end(), col[i].begin(), col[i].end());
    per_epoch.push_back(micro_f1(confusion(threshold_at(p, 0.5), y)));
  }
};

TEST(Finetune, MultiheadMemorizesToyTrainingSet) {
  FinetuneData d = marker_dataset(46, 3, 1);
  ASSERT_EQ(d.train.size(), 32u);
  const LanguageModel base = LanguageModel::build(small_transformer(20, 2, 32), 2);
  EpochF1Tracker tracker{&d.train, 1, {}, {}};
  const auto r = finetune(base, d, head_spec(HeadKind::multihead, 32, 3), fast_finetune(50, 8, 3e-3), 3, tracker.options());
  ASSERT_EQ(tracker.per_epoch.size(), 50u);
  EXPECT_EQ(tracker.per_epoch.back(), 1.0);
  EXPECT_EQ(r.threshold_predictions.size(), d.threshold.size());
  EXPECT_EQ(r.validation_predictions.size(), d.validation.size());
  EXPECT_EQ(r.validation_accuracy.at(0).size(), 50u);
}

TEST(Finetune, SingleHeadKindAlsoMemorizes) {
  FinetuneData d = marker_dataset(46, 3, 1);
  const LanguageModel base = LanguageModel::build(small_transformer(20, 2, 32), 2);
  EpochF1Tracker tracker{&d.train, 3, {}, {}};
  const auto r = finetune(base, d, head_spec(HeadKind::single, 32, 3), fast_finetune(50, 8, 3e-3), 3, tracker.options());
  EXPECT_EQ(r.classifier.members().size(), 3u);
  EXPECT_EQ(r.classifier.kind(), HeadKind::single);
  EXPECT_EQ(r.threshold_predictions.front().size(), 3u);
  ASSERT_EQ(tracker.per_epoch.size(), 50u);
  EXPECT_EQ(tracker.per_epoch.back(), 1.0);
}

TEST(Finetune, SnapshotIsBestEpochAndDeterministic) {
  FinetuneData d = marker_dataset(40, 2, 4);
  const LanguageModel base = LanguageModel::build(small_transformer(20), 5);
  const auto a = finetune(base, d, head_spec(HeadKind::multihead, 16, 2), fast_finetune(6), 9);
  const auto b = finetune(base, d, head_spec(HeadKind::multihead, 16, 2), fast_finetune(6), 9);
  EXPECT_EQ(a.classifier, b.classifier);
  EXPECT_EQ(a.threshold_predictions, b.threshold_predictions);
  const auto& acc = a.validation_accuracy[0];
  const std::size_t best = a.best_epoch[0];
  for (std::size_t e = 0; e < acc.size(); ++e) {
    if (e + 1 < best) EXPECT_LT(acc[e], acc[best - 1]);
    else EXPECT_LE(acc[e], acc[best - 1]);
  }
  EXPECT_EQ(a.threshold_predictions, predict_scores(a.classifier, train_detail::sequences(d.threshold)));
}

TEST(Finetune, FrozenDecoderWithoutAuxiliaryLossIsUnchanged) {
  FinetuneData d = marker_dataset(30, 2, 6);
  const LanguageModel base = LanguageModel::build(small_transformer(20), 7);
  FinetuneOptions opt;
  opt.auxiliary_weight = 0.0;
  opt.freeze_lm_head = true;
  const auto r = finetune(base, d, head_spec(HeadKind::multihead, 16, 2), fast_finetune(3), 1, opt);
  const auto& tuned = r.classifier.members().front().parameters();
  for (const char* name : {"lm_head.w", "lm_head.b"}) EXPECT_TRUE(bitwise_equal(tuned.at(name), base.parameters().at(name)));
  EXPECT_FALSE(bitwise_equal(tuned.at("tok_emb"), base.parameters().at("tok_emb")));
}

TEST(Finetune, LossDecomposition) {
  FinetuneData d = marker_dataset(30, 2, 8);
  const LanguageModel base = LanguageModel::build(small_transformer(20), 9);
  FinetuneOptions opt;
  std::size_t steps = 0;
  opt.on_step = [&](const FinetuneStepLog& s) {
    ++steps;
    EXPECT_NEAR(s.total, s.classification + 0.02 * s.lm, 1e-10);
    EXPECT_GT(s.lm, 0.0);
  };
  finetune(base, d, head_spec(HeadKind::multihead, 16, 2), fast_finetune(2), 1, opt);
  EXPECT_EQ(steps, 6u);
}

TEST(Finetune, Errors) {
  FinetuneData d = marker_dataset(30, 2, 8);
  const LanguageModel base = LanguageModel::build(small_transformer(20), 9);
  FinetuneData no_thr = d;
  no_thr.threshold.clear();
  EXPECT_THROW(finetune(base, no_thr, head_spec(HeadKind::multihead, 16, 2), fast_finetune(1), 1), std::invalid_argument);
  EXPECT_THROW(finetune(base, d, head_spec(HeadKind::multihead, 16, 3), fast_finetune(1), 1), std::invalid_argument);
}

}  // namespace
}  // namespace emotune
