// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <set>

#include "comodal/checkpoint.hpp"
#include "comodal/error.hpp"
#include "comodal/model.hpp"
#include "comodal/objectives.hpp"
#include "fixtures.hpp"

namespace comodal {
namespace {

using testing::random_batch;
using testing::small_config;
using testing::uniform_tensor;
using testing::values;

CoTrainModel built(std::size_t m = 2, bool attention = false, std::uint64_t seed = 1) {
  CoTrainModel model(small_config(m, attention));
  model.initialize(seed);
  return model;
}

std::size_t partition_size(const CoTrainModel& model, Partition p, const std::string& m = {}) {
  std::size_t n = 0;
  for (const auto& e : model.partition(p, m)) n += e.ref.tensor.numel();
  return n;
}

TEST(Model, CrossDirectionsScaleWithModalities) {
  EXPECT_EQ(built(2).stack().cross_directions().size(), 2u);
  EXPECT_EQ(built(3).stack().cross_directions().size(), 6u);
}

TEST(Model, PartitionsCoverEveryParameterOnce) {
  const CoTrainModel model = built(3, true);
  std::size_t total = 0;
  for (auto p : {Partition::stem, Partition::tail, Partition::head, Partition::kt,
                 Partition::mm_exclusive}) {
    total += partition_size(model, p);
  }
  EXPECT_EQ(total, model.parameter_count());
  std::set<std::string> names;
  for (const auto& e : model.parameters()) EXPECT_TRUE(names.insert(e.ref.name).second);
  for (const auto& e : model.partition(Partition::mm_exclusive)) {
    EXPECT_EQ(e.ref.name.rfind("mm.", 0), 0u) << e.ref.name;
  }
  for (const auto& e : model.partition(Partition::stem)) {
    EXPECT_NE(e.ref.name.find(".stem."), std::string::npos) << e.ref.name;
  }
}

TEST(Model, RegistryNamesFollowModulePaths) {
  const CoTrainModel model = built();
  EXPECT_NO_THROW(model.parameter("rgb.stem.1.weight"));
  EXPECT_NO_THROW(model.parameter("depth.tail.0.bias"));
  EXPECT_NO_THROW(model.parameter("mm.cross.rgb->depth.0.Wq"));
  EXPECT_NO_THROW(model.parameter("mm.head.weight"));
  EXPECT_THROW(model.parameter("nope"), LookupError);
}

TEST(Model, InitializationIsDeterministic) {
  const CoTrainModel a = built(2, true, 9), b = built(2, true, 9);
  for (std::size_t i = 0; i < a.parameters().size(); ++i) {
    EXPECT_EQ(values(a.parameters()[i].ref.tensor), values(b.parameters()[i].ref.tensor));
  }
}

TEST(Model, StemFeedsTailAndTokensWithTheSameTensor) {
  const CoTrainModel model = built();
  const auto out = model.forward_all(random_batch(model, 3, 2), ForwardMode::cotrain);
  ASSERT_TRUE(out.has_mm());
  for (const auto& name : model.modalities()) {
    const Tensor& stem = out.uni.at(name).stem;
    const auto recomputed = model.branch(name).stem_forward(random_batch(model, 3, 2).inputs.at(name));
    EXPECT_EQ(values(stem), values(recomputed));
    EXPECT_EQ(out.tokens.at(name).shape(), (Shape{3, 4, 4}));
  }
}

TEST(Model, NoMmSkipsTheMultimodalBranch) {
  CoTrainModel model = built();
  const auto batch = random_batch(model, 4, 3);
  const auto out = model.forward_all(batch, ForwardMode::no_mm);
  EXPECT_FALSE(out.has_mm());
  const TotalLoss loss = total_loss(model, out, batch, LossWeights{}, KtMode::decision);
  backward(loss.value);
  for (const auto& e : model.partition(Partition::mm_exclusive)) {
    EXPECT_FALSE(e.ref.tensor.has_grad()) << e.ref.name;
  }
}

TEST(Model, NoMmMatchesIndependentUnimodalModel) {
  const CoTrainModel model = built(2, true, 4);
  const auto batch = random_batch(model, 5, 5);
  const auto out = model.forward_all(batch, ForwardMode::no_mm);
  for (const auto& spec : model.config().modalities) {
    UnimodalModel alone(spec, model.config().task);
    ParamList source;
    for (const auto& e : model.parameters()) source.push_back(e.ref);
    ParamList target = alone.parameters();
    copy_parameters(source, target);
    EXPECT_EQ(values(alone.forward(batch.inputs.at(spec.name))),
              values(out.uni.at(spec.name).pred));
  }
}

TEST(Model, FrozenModeBlocksMultimodalGradientAtTheStem) {
  CoTrainModel model = built();
  const auto batch = random_batch(model, 4, 6);
  const auto out = model.forward_all(batch, ForwardMode::frozen_shared_mm);
  backward(task_loss(out.mm_pred, batch, model.config().task));
  for (const auto& e : model.partition(Partition::stem)) {
    if (!e.ref.tensor.has_grad()) continue;
    for (double g : e.ref.tensor.grad()) EXPECT_EQ(g, 0.0) << e.ref.name;
  }
  bool reached_mm = false;
  for (const auto& e : model.partition(Partition::mm_exclusive)) {
    reached_mm = reached_mm || e.ref.tensor.has_grad();
  }
  EXPECT_TRUE(reached_mm);
}

TEST(Model, CotrainMultimodalLossReachesTheStem) {
  CoTrainModel model = built();
  const auto batch = random_batch(model, 4, 7);
  const auto out = model.forward_all(batch, ForwardMode::cotrain);
  backward(task_loss(out.mm_pred, batch, model.config().task));
  double norm = 0;
  for (const auto& e : model.partition(Partition::stem, "rgb")) {
    if (e.ref.tensor.has_grad())
      for (double g : e.ref.tensor.grad()) norm += g * g;
  }
  EXPECT_GT(norm, 0.0);
}

TEST(Model, ExtractionReproducesUnimodalOutputsExactly) {
  const CoTrainModel model = built(3, true, 8);
  const auto batch = random_batch(model, 6, 9);
  const auto out = model.forward_all(batch, ForwardMode::cotrain);
  for (const auto& name : model.modalities()) {
    const UnimodalModel alone = model.extract_unimodal(name);
    EXPECT_EQ(values(alone.forward(batch.inputs.at(name))), values(out.uni.at(name).pred));
    std::size_t count = 0;
    for (const auto& p : alone.parameters()) count += p.tensor.numel();
    EXPECT_EQ(count, partition_size(model, Partition::stem, name) +
                         partition_size(model, Partition::tail, name) +
                         partition_size(model, Partition::head, name));
  }
}

TEST(Model, ExtractedModelSurvivesCheckpointRoundTrip) {
  const CoTrainModel model = built(2, false, 10);
  const UnimodalModel alone = model.extract_unimodal("depth");
  const Checkpoint ckpt = decode_checkpoint(encode_checkpoint(to_checkpoint(alone)));
  const UnimodalModel reloaded(alone.spec(), alone.task());
  apply_checkpoint(ckpt, reloaded);
  const Tensor x = uniform_tensor({5, 4, 4, 2}, 11);
  EXPECT_EQ(values(reloaded.forward(x)), values(alone.forward(x)));
}

TEST(Model, ExtractionIsACopy) {
  const CoTrainModel model = built();
  const UnimodalModel alone = model.extract_unimodal("rgb");
  const Tensor x = uniform_tensor({2, 3, 4, 2, 2}, 12);
  const auto before = values(alone.forward(x));
  for (auto& e : model.parameters()) {
    for (auto& v : Tensor(e.ref.tensor).mutable_data()) v += 1.0;
  }
  EXPECT_EQ(values(alone.forward(x)), before);
}

TEST(Tokens, SpatialPoolThenTokenMajor) {
  TokenRecipe recipe;
  recipe.pool_axes = {3, 4};
  const Tensor phi = uniform_tensor({2, 3, 5, 2, 2}, 13);
  const Tensor tokens = tokens_from_features(phi, recipe);
  ASSERT_EQ(tokens.shape(), (Shape{2, 5, 3}));
  const double expected = (phi.at({1, 2, 4, 0, 0}) + phi.at({1, 2, 4, 0, 1}) +
                           phi.at({1, 2, 4, 1, 0}) + phi.at({1, 2, 4, 1, 1})) / 4;
  EXPECT_NEAR(tokens.at({1, 4, 2}), expected, 1e-15);
}

TEST(Tokens, IdentityRecipeLeavesTokensUnchanged) {
  TokenRecipe recipe;
  recipe.to_tokens = false;
  const Tensor phi = uniform_tensor({3, 4}, 14);
  EXPECT_EQ(values(tokens_from_features(phi, recipe)), values(phi));
}

TEST(Tokens, ConstantFeaturesGiveIdenticalRows) {
  TokenRecipe recipe;
  recipe.pool_axes = {3};
  const Tensor tokens = tokens_from_features(Tensor::full({1, 4, 3, 2}, 0.75), recipe);
  ASSERT_EQ(tokens.shape(), (Shape{1, 3, 4}));
  for (double v : tokens.data()) EXPECT_EQ(v, 0.75);
}

TEST(ModelConfigErrors, Rejected) {
  ModelConfig one = small_config(2);
  one.modalities.pop_back();
  EXPECT_THROW(CoTrainModel{one}, ConfigError);

  ModelConfig conv_first = small_config(2);
  std::swap(conv_first.modalities[0].stages[0], conv_first.modalities[0].stages[1]);
  EXPECT_THROW(CoTrainModel{conv_first}, ConfigError);

  ModelConfig attach = small_config(2);
  attach.modalities[1].attach_after = 9;
  EXPECT_THROW(CoTrainModel{attach}, ConfigError);

  ModelConfig dup = small_config(2);
  dup.modalities[1].name = "rgb";
  EXPECT_THROW(CoTrainModel{dup}, ConfigError);

  ModelConfig width = small_config(2);
  width.stack.heads = 3;
  EXPECT_THROW(CoTrainModel{width}, ConfigError);

  ModelConfig fixed = small_config(2);
  fixed.stack.width = 8;
  fixed.modalities[0].project_tokens = false;
  EXPECT_THROW(CoTrainModel{fixed}, ConfigError);
}

TEST(Model, ZeroSelfBlocksExposeNoTeacherAttention) {
  const CoTrainModel model = built(2, true);
  ModelConfig c = model.config();
  c.stack.self_depth = 0;
  CoTrainModel plain(c);
  plain.initialize(1);
  const auto batch = random_batch(plain, 2, 15);
  const auto out = plain.forward_all(batch, ForwardMode::cotrain);
  EXPECT_TRUE(out.mm_attn.empty());
  EXPECT_THROW(total_loss(plain, out, batch, LossWeights{}, KtMode::attention), CapabilityError);
}

TEST(Model, BatchValidation) {
  const CoTrainModel model = built();
  auto batch = random_batch(model, 2, 16);
  batch.inputs.erase("depth");
  EXPECT_THROW(model.forward_all(batch, ForwardMode::cotrain), ContractError);
  auto wrong = random_batch(model, 2, 16);
  wrong.inputs["depth"] = Tensor::zeros({2, 5, 4, 2});
  EXPECT_THROW(model.forward_all(wrong, ForwardMode::cotrain), ShapeError);
}

}  // namespace
}  // namespace comodal
