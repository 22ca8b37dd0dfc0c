// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cmath>

#include "comodal/error.hpp"
#include "comodal/objectives.hpp"
#include "fixtures.hpp"

namespace comodal {
namespace {

using testing::random_batch;
using testing::small_config;
using testing::uniform_tensor;

CoTrainModel built(bool attention, bool projector = false,
                   TaskKind kind = TaskKind::classification, std::uint64_t seed = 1) {
  ModelConfig c = small_config(2, attention, kind);
  c.kt_projector = projector;
  CoTrainModel model(c);
  model.initialize(seed);
  return model;
}

TEST(TaskLoss, PerfectPredictionApproachesZero) {
  const std::vector<int> labels = {1, 0};
  const double loss =
      task_loss_classification(Tensor::from({2, 2}, {-50, 50, 50, -50}), labels).item();
  EXPECT_LT(loss, 1e-30);
  EXPECT_GE(loss, 0.0);
}

TEST(TaskLoss, UniformLogitsGiveLogClasses) {
  const std::vector<int> two = {0, 1, 1};
  EXPECT_NEAR(task_loss_classification(Tensor::zeros({3, 2}), two).item(), std::log(2.0), 1e-15);
  EXPECT_NEAR(task_loss_classification(Tensor::zeros({3, 2}), two).item(), 0.693147, 1e-6);
  const std::vector<int> four = {3, 0};
  EXPECT_NEAR(task_loss_classification(Tensor::zeros({2, 4}), four).item(), 1.386294, 1e-6);
}

TEST(TaskLoss, MeanAbsoluteError) {
  const std::vector<double> same = {0.5, -1};
  EXPECT_EQ(task_loss_regression(Tensor::from({2, 1}, {0.5, -1}), same).item(), 0.0);
  const std::vector<double> one = {1};
  EXPECT_EQ(task_loss_regression(Tensor::from({1, 1}, {3}), one).item(), 2.0);
  const std::vector<double> zeros = {0, 0};
  EXPECT_EQ(task_loss_regression(Tensor::from({2, 1}, {1, -1}), zeros).item(), 1.0);
}

TEST(TaskLoss, RejectsMismatchedLabels) {
  const std::vector<int> labels = {0};
  EXPECT_THROW(task_loss_classification(Tensor::zeros({2, 3}), labels), ShapeError);
}

TEST(KtDecision, IdenticalLogitsGiveZero) {
  const Tensor z = uniform_tensor({4, 3}, 2);
  EXPECT_NEAR(kt_decision(z, z, 3.0).item(), 0.0, 1e-15);
}

TEST(KtDecision, ClosedFormKl) {
  const Tensor teacher = Tensor::from({1, 2}, {0, 0});
  const Tensor student = Tensor::from({1, 2}, {std::log(3.0), 0});
  const double expected = 0.5 * std::log(0.5 / 0.75) + 0.5 * std::log(0.5 / 0.25);
  EXPECT_NEAR(kt_decision(student, teacher, 1.0).item(), expected, 1e-15);
  EXPECT_NEAR(expected, 0.5 * std::log(4.0 / 3.0), 1e-15);
  EXPECT_NEAR(kt_decision(student, teacher, 1.0).item(), 0.14384, 1e-5);
}

TEST(KtDecision, ScalesWithTemperatureSquared) {
  const Tensor teacher = Tensor::from({1, 2}, {0, 0});
  const Tensor student = Tensor::from({1, 2}, {2 * std::log(3.0), 0});
  EXPECT_NEAR(kt_decision(student, teacher, 2.0).item(), 4 * 0.5 * std::log(4.0 / 3.0), 1e-14);
}

TEST(KtDecision, TeacherReceivesNoGradient) {
  Tensor student = Tensor::from({2, 3}, {1, 2, 3, 0, 1, -1}, true);
  Tensor teacher = Tensor::from({2, 3}, {0.5, 0, 1, 2, 2, 0}, true);
  backward(kt_decision(student, teacher, 2.0));
  EXPECT_TRUE(student.has_grad());
  EXPECT_FALSE(teacher.has_grad());
}

TEST(KtFeature, CosineExtremes) {
  LinearLayer identity(2, 2);
  std::vector<double> eye = {1, 0, 0, 1};
  std::copy(eye.begin(), eye.end(), identity.weight.mutable_data().begin());
  const Tensor s = Tensor::from({1, 2}, {1, 0});
  EXPECT_NEAR(kt_feature(s, Tensor::from({1, 2}, {3, 0}), identity).item(), 0.0, 1e-7);
  EXPECT_NEAR(kt_feature(s, Tensor::from({1, 2}, {0, 2}), identity).item(), 1.0, 1e-7);
  EXPECT_NEAR(kt_feature(s, Tensor::from({1, 2}, {-1, 0}), identity).item(), 2.0, 1e-7);
}

TEST(KtAttention, ClosedFormKl) {
  EXPECT_NEAR(kt_attention(Tensor::from({1, 2}, {0.5, 0.5}), Tensor::from({1, 2}, {1, 0})).item(),
              std::log(2.0), 1e-12);
  const Tensor p = Tensor::from({2, 2}, {0.3, 0.7, 0.9, 0.1});
  EXPECT_NEAR(kt_attention(p, p).item(), 0.0, 1e-15);
}

TEST(KtAttention, MissingMapsAreCapabilityErrors) {
  EXPECT_THROW(kt_attention(Tensor(), Tensor::from({1, 2}, {1, 0})), CapabilityError);
  EXPECT_THROW(kt_attention(Tensor::from({1, 2}, {1, 0}), Tensor()), CapabilityError);
}

TEST(TotalLoss, AttentionModeOnConvStudentIsRejected) {
  ModelConfig c = small_config(2, false);
  c.stack.self_depth = 1;
  CoTrainModel model(c);
  model.initialize(3);
  const auto batch = random_batch(model, 2, 4);
  const auto out = model.forward_all(batch, ForwardMode::cotrain);
  EXPECT_THROW(total_loss(model, out, batch, LossWeights{}, KtMode::attention), CapabilityError);
}

TEST(TotalLoss, DecisionModeNeedsClassification) {
  const CoTrainModel model = built(false, false, TaskKind::regression);
  const auto batch = random_batch(model, 3, 5);
  const auto out = model.forward_all(batch, ForwardMode::cotrain);
  EXPECT_THROW(total_loss(model, out, batch, LossWeights{}, KtMode::decision), CapabilityError);
  EXPECT_NO_THROW(total_loss(model, out, batch, LossWeights{1, 1, 1, 1}, KtMode::none));
}

TEST(TotalLoss, AlphaZeroIsTheSumOfTaskLosses) {
  const CoTrainModel model = built(false);
  const auto batch = random_batch(model, 4, 6);
  const auto out = model.forward_all(batch, ForwardMode::cotrain);
  const auto loss = total_loss(model, out, batch, LossWeights{0, 1, 1, 5}, KtMode::decision);
  const double expected = (loss.breakdown.at("task.rgb") + loss.breakdown.at("task.depth")) +
                          loss.breakdown.at("task.mm");
  EXPECT_EQ(loss.value.item(), expected);
  EXPECT_EQ(loss.breakdown.count("kt.rgb"), 0u);
}

TEST(TotalLoss, LinearInAlpha) {
  for (auto mode : {KtMode::decision, KtMode::feature, KtMode::attention}) {
    const CoTrainModel model = built(true, mode == KtMode::feature);
    const auto batch = random_batch(model, 4, 7);
    const auto out = model.forward_all(batch, ForwardMode::cotrain);
    const LossWeights w1{1.5, 0.7, 1.3, 4.0};
    LossWeights w2 = w1;
    w2.alpha = 3.0;
    const auto l1 = total_loss(model, out, batch, w1, mode);
    const auto l2 = total_loss(model, out, batch, w2, mode);
    const double tasks = w1.beta * (l1.breakdown.at("task.rgb") + l1.breakdown.at("task.depth")) +
                         w1.gamma * l1.breakdown.at("task.mm");
    EXPECT_NEAR(l2.value.item() - tasks, 2 * (l1.value.item() - tasks), 1e-12) << to_string(mode);
  }
}

TEST(TotalLoss, TransferTermsAreNonNegative) {
  for (auto mode : {KtMode::decision, KtMode::feature, KtMode::attention}) {
    const CoTrainModel model = built(true, mode == KtMode::feature, TaskKind::classification, 8);
    const auto batch = random_batch(model, 5, 9);
    const auto loss = total_loss(model, model.forward_all(batch, ForwardMode::cotrain), batch,
                                 LossWeights{}, mode);
    for (const std::string m : {"rgb", "depth"}) {
      const double kt = loss.breakdown.at("kt." + m);
      EXPECT_GE(kt, 0.0);
      if (mode == KtMode::feature) {
        EXPECT_LE(kt, 2.0);
      }
    }
  }
}

TEST(TotalLoss, TeacherIsNeverUpdatedByTransfer) {
  for (auto mode : {KtMode::decision, KtMode::feature, KtMode::attention}) {
    for (std::uint64_t seed = 1; seed <= 3; ++seed) {
      CoTrainModel model = built(true, mode == KtMode::feature, TaskKind::classification, seed);
      const auto batch = random_batch(model, 4, seed + 10);
      const auto out = model.forward_all(batch, ForwardMode::cotrain);
      backward(total_loss(model, out, batch, LossWeights{1, 0, 0, 3}, mode).value);
      for (const auto& e : model.partition(Partition::mm_exclusive)) {
        if (!e.ref.tensor.has_grad()) continue;
        for (double g : e.ref.tensor.grad()) ASSERT_EQ(g, 0.0) << e.ref.name;
      }
    }
  }
}

TEST(TotalLoss, MultimodalTaskOnlyTouchesStemsAndTeacher) {
  CoTrainModel model = built(true);
  const auto batch = random_batch(model, 4, 12);
  const auto out = model.forward_all(batch, ForwardMode::cotrain);
  backward(total_loss(model, out, batch, LossWeights{0, 0, 1, 2}, KtMode::decision).value);
  for (auto p : {Partition::tail, Partition::head}) {
    for (const auto& e : model.partition(p)) {
      if (!e.ref.tensor.has_grad()) continue;
      for (double g : e.ref.tensor.grad()) ASSERT_EQ(g, 0.0) << e.ref.name;
    }
  }
  double stem = 0;
  for (const auto& e : model.partition(Partition::stem))
    if (e.ref.tensor.has_grad())
      for (double g : e.ref.tensor.grad()) stem += std::fabs(g);
  EXPECT_GT(stem, 0.0);
}

TEST(TotalLoss, BlockedStemKeepsTransferInTheTail) {
  CoTrainModel model = built(false);
  const auto batch = random_batch(model, 4, 13);
  const auto out = model.forward_all(batch, ForwardMode::cotrain, false);
  backward(total_loss(model, out, batch, LossWeights{1, 0, 0, 2}, KtMode::decision).value);
  for (const auto& e : model.partition(Partition::stem)) {
    if (!e.ref.tensor.has_grad()) continue;
    for (double g : e.ref.tensor.grad()) ASSERT_EQ(g, 0.0) << e.ref.name;
  }
  double head = 0;
  for (const auto& e : model.partition(Partition::head))
    if (e.ref.tensor.has_grad())
      for (double g : e.ref.tensor.grad()) head += std::fabs(g);
  EXPECT_GT(head, 0.0);
}

TEST(LossWeights, Validation) {
  EXPECT_THROW((LossWeights{-1, 1, 1, 1}.validate()), ParameterError);
  EXPECT_THROW((LossWeights{1, 1, 1, 0}.validate()), ParameterError);
  EXPECT_NO_THROW((LossWeights{0, 0, 0, 0.5}.validate()));
}

TEST(KtModeNames, RoundTrip) {
  for (auto m : {KtMode::decision, KtMode::feature, KtMode::attention, KtMode::none}) {
    EXPECT_EQ(kt_mode_from_string(to_string(m)), m);
  }
  EXPECT_THROW(kt_mode_from_string("logits"), ConfigError);
}

}  // namespace
}  // namespace comodal
