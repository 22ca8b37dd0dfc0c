// SPDX-License-Identifier: Apache-2.0
//
// The co-training graph: per-modality unimodal branches whose stems also feed
// a multimodal cross-attention branch with its own head.
#pragma once

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "comodal/layers.hpp"
#include "comodal/tensor.hpp"

namespace comodal {

enum class TaskKind { classification, regression };

struct TaskSpec {
  TaskKind kind = TaskKind::classification;
  std::size_t classes = 4;

  std::size_t outputs() const {
    return kind == TaskKind::classification ? classes : 1;
  }
};

enum class StageKind { pointwise, conv1d, spatial_pool, self_attention };

const char* to_string(StageKind kind);

/// One stage of a unimodal branch. Stages operate channel-first on
/// [B x C x T x spatial...] activations.
struct StageSpec {
  StageKind kind = StageKind::pointwise;
  std::size_t out = 0;  // pointwise / conv1d output channels
  std::size_t kernel = 3;
  std::size_t stride = 1;
  std::size_t padding = 1;
  std::size_t heads = 1;       // self_attention
  std::size_t ffn_hidden = 0;  // self_attention; 0 means 2 x width
  bool activation = true;      // relu after pointwise / conv1d
};

/// Per-example input layout [channels x length x spatial...].
struct InputSpec {
  std::size_t channels = 4;
  std::size_t length = 8;
  std::vector<std::size_t> spatial;

  Shape shape() const;
};

struct ModalitySpec {
  std::string name;
  InputSpec input;
  std::vector<StageSpec> stages;
  // Stages [0, attach_after) form the shared stem; the rest is the tail.
  std::size_t attach_after = 1;
  // Learn a linear map from stem channels to the multimodal width.
  bool project_tokens = true;
};

struct ModelConfig {
  TaskSpec task;
  std::vector<ModalitySpec> modalities;
  StackConfig stack;
  bool positional_encoding = true;
  // Student-side projectors for feature-level transfer.
  bool kt_projector = false;
};

enum class Partition { stem, tail, head, kt, mm_exclusive };
const char* to_string(Partition p);

struct ParamEntry {
  ParamRef ref;
  Partition partition;
  std::string modality;  // empty for mm_exclusive
};

/// Per-modality inputs plus targets for one step. Inputs are batched
/// [B x C x T x spatial...].
struct MultimodalBatch {
  std::map<std::string, Tensor> inputs;
  std::vector<int> labels;      // classification
  std::vector<double> targets;  // regression

  std::size_t size() const;
};

enum class ForwardMode { cotrain, frozen_shared_mm, no_mm };
const char* to_string(ForwardMode mode);

struct UnimodalOutputs {
  Tensor stem;  // shared stem activation
  Tensor pred;  // head output [B x outputs]
  Tensor feat;  // final hidden feature [B x c]
  Tensor attn;  // last tail self-attention probabilities, may be undefined
  // Views consumed by transfer objectives. Identical to the above unless
  // transfer gradients are blocked at the stem.
  Tensor kt_pred, kt_feat, kt_attn;
};

struct BranchOutputs {
  std::map<std::string, UnimodalOutputs> uni;
  std::map<std::string, Tensor> tokens;   // multimodal branch inputs
  Tensor mm_pred;                         // undefined in no_mm mode
  Tensor mm_feat;                         // [B x M*d]
  std::map<std::string, Tensor> mm_attn;  // teacher self-attention probs

  bool has_mm() const { return mm_pred.defined(); }
};

/// Pools and reorders stem features into [B x T x d] tokens.
struct TokenRecipe {
  std::vector<std::size_t> pool_axes;  // axes of the batched tensor
  bool to_tokens = true;               // [B x C x T] -> [B x T x C]
  std::optional<LinearLayer> projection;
};

Tensor tokens_from_features(const Tensor& phi, const TokenRecipe& recipe);

class Stage {
 public:
  Stage(const StageSpec& spec, std::size_t in_channels);

  Tensor forward(const Tensor& x) const;
  /// Per-example output shape; throws ConfigError when infeasible.
  Shape infer(const Shape& in) const;
  void collect(const std::string& prefix, ParamList& out) const;
  const StageSpec& spec() const { return spec_; }
  /// Probabilities of the last forward for self-attention stages.
  const Tensor& probs() const;

 private:
  StageSpec spec_;
  std::optional<LinearLayer> pointwise_;
  std::optional<Conv1dLayer> conv_;
  std::optional<AttentionLayer> attention_;
};

/// stem -> tail -> temporal mean -> head for one modality.
class UnimodalBranch {
 public:
  UnimodalBranch(const ModalitySpec& spec, const TaskSpec& task);

  const ModalitySpec& spec() const { return spec_; }
  /// Per-example [C x T x spatial...] at the attach point.
  const Shape& stem_shape() const { return stem_shape_; }
  std::size_t feature_width() const { return feature_width_; }
  bool has_attention_tail() const;

  Tensor stem_forward(const Tensor& x) const;
  /// Returns prediction, final hidden feature and attention probabilities.
  UnimodalOutputs tail_forward(const Tensor& stem) const;
  UnimodalOutputs forward(const Tensor& x) const;

  void collect_stem(ParamList& out) const;
  void collect_tail(ParamList& out) const;
  void collect_head(ParamList& out) const;

 private:
  ModalitySpec spec_;
  std::vector<Stage> stem_, tail_;
  LinearLayer head_;
  Shape stem_shape_;
  std::size_t feature_width_ = 0;
};

/// A standalone unimodal model holding its own copy of the parameters.
class UnimodalModel {
 public:
  UnimodalModel(const ModalitySpec& spec, const TaskSpec& task);

  const std::string& modality() const { return branch_.spec().name; }
  const ModalitySpec& spec() const { return branch_.spec(); }
  const TaskSpec& task() const { return task_; }
  Tensor forward(const Tensor& x) const;
  const ParamList& parameters() const { return params_; }

 private:
  UnimodalBranch branch_;
  TaskSpec task_;
  ParamList params_;
};

class CoTrainModel {
 public:
  /// Validates the architecture and builds zero-valued parameters; call
  /// `initialize` before training.
  explicit CoTrainModel(ModelConfig config);

  const ModelConfig& config() const { return config_; }
  const std::vector<std::string>& modalities() const { return names_; }
  const UnimodalBranch& branch(const std::string& modality) const;
  const TransformerStack& stack() const { return stack_; }

  const std::vector<ParamEntry>& parameters() const { return params_; }
  std::vector<ParamEntry> partition(Partition p, const std::string& modality = {}) const;
  std::size_t parameter_count() const;
  Tensor parameter(const std::string& name) const;

  void initialize(std::uint64_t seed);
  void zero_grad();

  BranchOutputs forward_all(const MultimodalBatch& batch, ForwardMode mode,
                            bool kt_through_stem = true) const;
  /// Drops the multimodal branch and other modalities; parameters are copied.
  UnimodalModel extract_unimodal(const std::string& modality) const;

  /// Feature-level transfer projector of a modality (requires kt_projector).
  const LinearLayer& kt_projector(const std::string& modality) const;

 private:
  ModelConfig config_;
  std::vector<std::string> names_;
  std::vector<UnimodalBranch> branches_;
  std::vector<TokenRecipe> recipes_;
  std::vector<std::optional<LinearLayer>> projectors_;
  TransformerStack stack_;
  LinearLayer mm_head_;
  std::map<std::string, Tensor> positions_;
  std::vector<ParamEntry> params_;
};

/// Copies values by name from `source` into `target`; every target name must
/// be present with the same shape.
void copy_parameters(const ParamList& source, ParamList& target);

}  // namespace comodal
