#include <gtest/gtest.h>

#include <cmath>

#include "cgd/loss.hpp"
#include "support.hpp"

using namespace cgd;
using cgd::test::Rng;

namespace {

std::vector<Label> balanced_labels(std::size_t classes, std::size_t per_class) {
  std::vector<Label> l;
  for (std::size_t c = 0; c < classes; ++c)
    for (std::size_t i = 0; i < per_class; ++i) l.push_back(static_cast<Label>(c));
  return l;
}

}  // namespace

TEST(Triplet, CollapsedSeparatedClassesGiveZero) {
  auto x = Tensor({4, 2}, {0, 0, 0, 0, 1, 0, 1, 0});
  EXPECT_EQ(batch_hard_triplet(x, std::vector<Label>{0, 0, 1, 1}, {}).item(), 0.0);
}

TEST(Triplet, IdenticalEmbeddingsGiveMargin) {
  auto x = Tensor::full({6, 3}, 0.5);
  TripletConfig cfg{0.1, TripletVariant::hard_margin};
  EXPECT_DOUBLE_EQ(batch_hard_triplet(x, balanced_labels(3, 2), cfg).item(), 0.1);
  cfg.variant = TripletVariant::soft_margin;
  EXPECT_DOUBLE_EQ(batch_hard_triplet(x, balanced_labels(3, 2), cfg).item(), std::log(2.0));
}

TEST(Triplet, MatchesExhaustiveOracle) {
  Rng rng(1);
  for (int trial = 0; trial < 20; ++trial) {
    auto x = test::uniform({16, 5}, rng, -1, 1, false);
    auto labels = balanced_labels(4, 4);
    std::shuffle(labels.begin(), labels.end(), rng);
    for (bool soft : {false, true}) {
      TripletConfig cfg{0.1, soft ? TripletVariant::soft_margin : TripletVariant::hard_margin};
      double got = batch_hard_triplet(x, labels, cfg).item();
      EXPECT_NEAR(got, test::triplet_oracle(x.data(), labels, 5, 0.1, soft), 1e-12);
    }
  }
}

TEST(Triplet, PermutationInvariant) {
  Rng rng(2);
  auto x = test::uniform({12, 4}, rng, -1, 1, false);
  auto labels = balanced_labels(3, 4);
  std::vector<std::size_t> perm(12);
  std::iota(perm.begin(), perm.end(), 0u);
  std::shuffle(perm.begin(), perm.end(), rng);
  std::vector<double> px;
  std::vector<Label> pl;
  for (auto i : perm) {
    for (std::size_t d = 0; d < 4; ++d) px.push_back(x[i * 4 + d]);
    pl.push_back(labels[i]);
  }
  EXPECT_NEAR(batch_hard_triplet(x, labels, {}).item(), batch_hard_triplet(Tensor({12, 4}, px), pl, {}).item(), 1e-15);
}

TEST(Triplet, ZeroIffMarginSatisfied) {
  Rng rng(3);
  for (int trial = 0; trial < 50; ++trial) {
    auto x = test::uniform({8, 2}, rng, -1, 1, false);
    auto labels = balanced_labels(2, 4);
    for (std::size_t i = 0; i < 8; ++i) x.mutable_data()[i * 2] += labels[i] * 3.0 * (trial % 2);
    auto h = mine_hardest(x.data(), labels, 2);
    bool satisfied = true;
    for (std::size_t a = 0; a < 8; ++a) satisfied = satisfied && h.d_neg[a] - h.d_pos[a] >= 0.1;
    EXPECT_EQ(batch_hard_triplet(x, labels, {}).item() == 0.0, satisfied);
  }
}

TEST(Triplet, RejectsSingletonClass) {
  EXPECT_THROW(batch_hard_triplet(Tensor::zeros({3, 2}), std::vector<Label>{0, 0, 1}, {}), std::invalid_argument);
  EXPECT_THROW(batch_hard_triplet(Tensor::zeros({3, 2}), std::vector<Label>{0, 0, 0}, {}), std::invalid_argument);
}

TEST(Triplet, GradientsMatchFiniteDifferences) {
  Rng rng(4);
  for (bool soft : {false, true}) {
    TripletConfig cfg{0.1, soft ? TripletVariant::soft_margin : TripletVariant::hard_margin};
    auto labels = balanced_labels(3, 3);
    auto r = test::check_gradients(
        [&](const std::vector<Tensor>& in) { return batch_hard_triplet(in[0], labels, cfg); },
        {test::uniform({9, 4}, rng)}, rng);
    EXPECT_TRUE(r.ok) << r.max_rel_error;
  }
}

TEST(Softmax, UniformLogitsGiveLogM) {
  std::size_t m = 5;
  auto f = Tensor::zeros({2, 3});
  auto w = Tensor::zeros({m, 3});
  auto b = Tensor::zeros({m});
  auto loss = aux_softmax_loss(f, std::vector<Label>{1, 4}, w, b, {1.0, 0.0});
  EXPECT_NEAR(loss.item(), std::log(5.0), 1e-14);
}

TEST(Softmax, HandComputedOracle) {
  // z = (2, 1, 0) via identity weights on f = (2, 1, 0); tau 0.5, eps 0.1, true class 0
  auto f = Tensor({1, 3}, {2, 1, 0});
  auto w = Tensor({3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1});
  auto b = Tensor::zeros({3});
  double z0 = 4, z1 = 2, z2 = 0;
  double lse = std::log(std::exp(z0) + std::exp(z1) + std::exp(z2));
  double expected = -(0.9 * (z0 - lse) + 0.05 * (z1 - lse) + 0.05 * (z2 - lse));
  EXPECT_NEAR(aux_softmax_loss(f, std::vector<Label>{0}, w, b, {0.5, 0.1}).item(), expected, 1e-12);
}

TEST(Softmax, TemperatureEquivalentToPrescaledLogits) {
  Rng rng(5);
  auto f = test::uniform({6, 4}, rng, -1, 1, false);
  auto w = test::uniform({3, 4}, rng, -1, 1, false);
  auto b = test::uniform({3}, rng, -1, 1, false);
  std::vector<Label> labels{0, 1, 2, 0, 1, 2};
  double tau = 0.37;
  auto scaled = aux_softmax_loss(f, labels, w, b, {tau, 0.1}).item();
  auto pre = aux_softmax_loss(f, labels, scale(w, 1 / tau), scale(b, 1 / tau), {1.0, 0.1}).item();
  EXPECT_NEAR(scaled, pre, 1e-12);

  auto logits = bias_add(matmul(f, transpose(w)), b);
  for (double t : {0.1, 0.5, 2.0}) {
    auto z = scale(logits, 1 / t);
    for (std::size_t r = 0; r < 6; ++r) {
      auto row = z.data().subspan(r * 3, 3);
      auto ref = logits.data().subspan(r * 3, 3);
      EXPECT_EQ(std::max_element(row.begin(), row.end()) - row.begin(), std::max_element(ref.begin(), ref.end()) - ref.begin());
    }
  }
}

TEST(Softmax, NoSmoothingIsCrossEntropy) {
  Rng rng(6);
  auto f = test::uniform({4, 3}, rng, -1, 1, false);
  auto w = test::uniform({3, 3}, rng, -1, 1, false);
  auto b = Tensor::zeros({3});
  std::vector<Label> labels{2, 0, 1, 1};
  auto z = matmul(f, transpose(w));
  double ce = 0;
  for (std::size_t r = 0; r < 4; ++r) {
    double s = 0;
    for (std::size_t c = 0; c < 3; ++c) s += std::exp(z[r * 3 + c]);
    ce += std::log(s) - z[r * 3 + labels[r]];
  }
  EXPECT_NEAR(aux_softmax_loss(f, labels, w, b, {1.0, 0.0}).item(), ce / 4, 1e-12);
}

TEST(Softmax, SmoothedTargetsSumToOne) {
  auto t = smoothed_targets(std::vector<Label>{0, 3, 1}, 7, 0.1);
  for (std::size_t r = 0; r < 3; ++r) EXPECT_NEAR(std::accumulate(t.begin() + r * 7, t.begin() + (r + 1) * 7, 0.0), 1.0, 1e-12);
}

TEST(Softmax, RejectsOutOfRangeLabel) {
  EXPECT_THROW(aux_softmax_loss(Tensor::zeros({1, 2}), std::vector<Label>{3}, Tensor::zeros({3, 2}), Tensor::zeros({3}), {}),
               std::invalid_argument);
}

TEST(Softmax, GradientsMatchFiniteDifferences) {
  Rng rng(7);
  std::vector<Label> labels{0, 2, 1, 2};
  auto r = test::check_gradients(
      [&](const std::vector<Tensor>& in) { return aux_softmax_loss(in[0], labels, in[1], in[2], {0.5, 0.1}); },
      {test::uniform({4, 3}, rng), test::uniform({3, 3}, rng), test::uniform({3}, rng)}, rng);
  EXPECT_TRUE(r.ok) << r.max_rel_error;
}

TEST(JointLoss, SumsComponents) {
  EXPECT_EQ(joint_loss(Tensor::scalar(0), Tensor::scalar(0)).total.item(), 0.0);
  EXPECT_DOUBLE_EQ(joint_loss(Tensor::scalar(0.7), Tensor::scalar(1.3)).total.item(), 2.0);
  EXPECT_THROW(joint_loss(Tensor::scalar(std::nan("")), Tensor::scalar(1.0)), NumericError);
}

TEST(JointLoss, GradientIsSumOfComponentGradients) {
  Rng rng(8);
  auto x = test::uniform({6, 3}, rng);
  auto w = test::uniform({3, 3}, rng, -1, 1, false);
  auto b = Tensor::zeros({3});
  std::vector<Label> labels{0, 0, 1, 1, 2, 2};
  auto rank_grad = [&] {
    x.zero_grad();
    backward(batch_hard_triplet(x, labels, {}));
    return std::vector<double>(x.grad().begin(), x.grad().end());
  }();
  auto cls_grad = [&] {
    x.zero_grad();
    backward(aux_softmax_loss(x, labels, w, b, {}));
    return std::vector<double>(x.grad().begin(), x.grad().end());
  }();
  x.zero_grad();
  backward(joint_loss(batch_hard_triplet(x, labels, {}), aux_softmax_loss(x, labels, w, b, {})).total);
  for (std::size_t i = 0; i < x.numel(); ++i) EXPECT_NEAR(x.grad()[i], rank_grad[i] + cls_grad[i], 1e-12);

  auto r = test::check_gradients(
      [&](const std::vector<Tensor>& in) {
        return joint_loss(batch_hard_triplet(in[0], labels, {}), aux_softmax_loss(in[0], labels, w, b, {})).total;
      },
      {x}, rng);
  EXPECT_TRUE(r.ok) << r.max_rel_error;
}
