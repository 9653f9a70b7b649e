#include <gtest/gtest.h>

#include <cmath>

#include "cgd/trainer.hpp"
#include "support.hpp"

using namespace cgd;
using cgd::test::Rng;

namespace {

std::vector<Label> corpus_labels(std::size_t classes, std::size_t per_class) {
  std::vector<Label> l;
  for (std::size_t c = 0; c < classes; ++c)
    for (std::size_t i = 0; i < per_class; ++i) l.push_back(static_cast<Label>(c));
  return l;
}

// Tiny corpus and model so training tests stay fast.
struct Tiny {
  LabeledImages train, test;
  ModelConfig model{DescriptorConfig::parse("SM", 8), BackboneConfig{{4, 8}, {2, 2}, true, 16}, Architecture::cgd,
                    CombineMethod::concat, 4};
  Tiny() {
    auto [tr, te] = synthetic_in_memory(SyntheticSpec{4, 8, 16, 0.2, 3});
    train = std::move(tr);
    test = std::move(te);
  }
  TrainOptions options(std::size_t epochs = 2) const {
    TrainOptions o;
    o.train.epochs = epochs;
    o.train.batch_p = 4;
    o.train.batch_k = 2;
    o.train.lr = 1e-2;
    return o;
  }
};

}  // namespace

TEST(PkSample, FullDatasetWhenExactlyEnough) {
  Rng rng(1);
  auto labels = corpus_labels(2, 2);
  auto idx = pk_sample(labels, 2, 2, rng);
  std::sort(idx.begin(), idx.end());
  EXPECT_EQ(idx, (std::vector<std::size_t>{0, 1, 2, 3}));
}

TEST(PkSample, HistogramIsExactlyPTimesK) {
  Rng rng(2);
  auto labels = corpus_labels(10, 7);
  labels.push_back(10);  // singleton class never qualifies
  for (int trial = 0; trial < 200; ++trial) {
    auto idx = pk_sample(labels, 4, 5, rng);
    ASSERT_EQ(idx.size(), 20u);
    std::map<Label, std::size_t> hist;
    std::set<std::size_t> unique(idx.begin(), idx.end());
    for (auto i : idx) ++hist[labels[i]];
    EXPECT_EQ(hist.size(), 4u);
    for (auto [l, n] : hist) {
      EXPECT_EQ(n, 5u);
      EXPECT_NE(l, 10);
    }
    EXPECT_EQ(unique.size(), 20u);  // without replacement when the class is big enough
  }
}

TEST(PkSample, WithReplacementForSmallClasses) {
  Rng rng(3);
  auto labels = corpus_labels(3, 2);
  auto idx = pk_sample(labels, 3, 4, rng);
  std::map<Label, std::size_t> hist;
  for (auto i : idx) ++hist[labels[i]];
  for (auto [l, n] : hist) EXPECT_EQ(n, 4u);
}

TEST(PkSample, DeterministicForSeedAndRejectsShortage) {
  auto labels = corpus_labels(6, 5);
  Rng a(9), b(9);
  for (int i = 0; i < 10; ++i) EXPECT_EQ(pk_sample(labels, 3, 2, a), pk_sample(labels, 3, 2, b));
  Rng c(1);
  EXPECT_THROW(pk_sample(labels, 7, 2, c), DataError);
}

TEST(Adam, ZeroGradientLeavesParametersUnchanged) {
  auto p = Tensor({3}, {1, -2, 3}, true);
  Adam adam({{"p", p}});
  p.mutable_grad();
  adam.step(0.1);
  EXPECT_EQ(p[0], 1.0);
  EXPECT_EQ(p[1], -2.0);
  EXPECT_EQ(adam.step_count(), 1u);
}

TEST(Adam, FirstStepIsLearningRateTimesSign) {
  auto p = Tensor({1}, {0.0}, true);
  Adam adam({{"p", p}});
  p.mutable_grad()[0] = 1.0;
  adam.step(0.1);
  // m_hat = 1, v_hat = 1 -> delta = -0.1 / (1 + 1e-8)
  EXPECT_NEAR(p[0], -0.1 / (1.0 + 1e-8), 1e-15);
}

TEST(Adam, ConvergesOnQuadratic) {
  auto x = Tensor({1}, {5.0}, true);
  Adam adam({{"x", x}});
  for (int i = 0; i < 2000; ++i) {
    adam.zero_grad();
    backward(sum(mul(x, x)));
    adam.step(0.05);
  }
  EXPECT_LT(std::abs(x[0]), 1e-2);
}

TEST(Adam, MissingGradientRejected) {
  auto p = Tensor({1}, {1.0}, true);
  Adam adam({{"p", p}});
  EXPECT_THROW(adam.step(0.1), std::logic_error);
}

TEST(Schedule, StepDecayIsExact) {
  TrainConfig cfg;
  cfg.lr = 0.01;
  cfg.decay_factor = 0.5;
  cfg.decay_every = 3;
  for (std::size_t e = 0; e < 12; ++e) EXPECT_EQ(scheduled_lr(cfg, e), 0.01 * std::pow(0.5, static_cast<double>(e / 3)));
}

TEST(TrainConfig, RejectsSingleInstanceBatches) {
  TrainConfig cfg;
  cfg.batch_k = 1;
  EXPECT_THROW(cfg.validate(), ConfigError);
}

TEST(Train, ZeroLearningRateKeepsParameters) {
  Tiny t;
  CgdModel model(t.model, 1);
  auto before = model.state();
  auto opt = t.options(1);
  opt.train.lr = 0.0;
  train(model, t.train, t.test, opt);
  auto after = model.state();
  for (std::size_t i = 0; i < before.size(); ++i)
    EXPECT_TRUE(std::equal(before[i].second.data().begin(), before[i].second.data().end(), after[i].second.data().begin()))
        << before[i].first;
}

TEST(Train, LogsEveryEpochWithScheduledLr) {
  Tiny t;
  CgdModel model(t.model, 2);
  auto opt = t.options(3);
  opt.train.decay_every = 2;
  auto res = train(model, t.train, t.test, opt);
  ASSERT_EQ(res.log.size(), 3u);
  EXPECT_EQ(res.log[2].lr, 1e-2 * 0.5);
  for (const auto& m : res.log) {
    EXPECT_NEAR(m.total, m.rank_loss + m.cls_loss, 1e-12);
    EXPECT_GE(m.val_recall_at_1, 0.0);
    EXPECT_LE(m.val_recall_at_1, 1.0);
  }
  EXPECT_GE(res.best_epoch, 1u);
}

TEST(Train, TypeALogsOneRankingLossPerBranch) {
  Tiny t;
  auto cfg = t.model;
  cfg.architecture = Architecture::type_a;
  CgdModel model(cfg, 3);
  auto res = train(model, t.train, t.test, t.options(1));
  ASSERT_EQ(res.log[0].branch_rank_losses.size(), 2u);
  EXPECT_NEAR(res.log[0].branch_rank_losses[0] + res.log[0].branch_rank_losses[1], res.log[0].rank_loss, 1e-12);
}

TEST(Train, RankOnlyNeverTouchesClassifier) {
  Tiny t;
  CgdModel model(t.model, 4);
  auto opt = t.options(1);
  opt.cls_weight = 0.0;
  auto before = model.classifier_weight().detach();
  auto res = train(model, t.train, t.test, opt);
  EXPECT_FALSE(model.classifier_weight().has_grad());
  EXPECT_FALSE(model.classifier_bias().has_grad());
  for (std::size_t i = 0; i < before.numel(); ++i) EXPECT_EQ(model.classifier_weight()[i], before[i]);
  EXPECT_EQ(res.log[0].cls_loss, 0.0);
}

TEST(Train, DeterministicForFixedSeed) {
  Tiny t;
  auto run = [&] {
    CgdModel model(t.model, 5);
    auto res = train(model, t.train, t.test, t.options(2));
    std::string log;
    for (const auto& m : res.log) log += format_metrics_line(m) + "\n";
    return std::pair{log, model.state()};
  };
  auto [la, sa] = run();
  auto [lb, sb] = run();
  EXPECT_EQ(la, lb);
  for (std::size_t i = 0; i < sa.size(); ++i)
    EXPECT_TRUE(std::equal(sa[i].second.data().begin(), sa[i].second.data().end(), sb[i].second.data().begin()));
}

TEST(Train, NonFiniteLossAbortsWithBestState) {
  Tiny t;
  CgdModel model(t.model, 6);
  auto opt = t.options(2);
  opt.train.lr = std::numeric_limits<double>::max();  // parameters blow up after the first step
  auto res = train(model, t.train, t.test, opt);
  EXPECT_TRUE(res.aborted);
  EXPECT_FALSE(res.abort_reason.empty());
  for (const auto& [name, p] : model.parameters())
    for (double v : p.data()) ASSERT_TRUE(std::isfinite(v)) << name;
}

TEST(Metrics, LineFormat) {
  EpochMetrics m;
  m.epoch = 3;
  m.rank_loss = 0.25;
  m.cls_loss = 1.5;
  m.total = 1.75;
  m.val_recall_at_1 = 0.875;
  m.lr = 1e-4;
  EXPECT_EQ(format_metrics_line(m), "3\t0.25\t1.5\t1.75\t0.875000\t0.0001");
  EXPECT_EQ(std::string(kMetricsHeader), "epoch\trank_loss\tcls_loss\ttotal\tval_recall@1\tlr");
}
