// SPDX-License-Identifier: Apache-2.0
#include "comodal/model.hpp"

#include <algorithm>
#include <numeric>
#include <set>

#include "comodal/error.hpp"

namespace comodal {

const char* to_string(StageKind kind) {
  switch (kind) {
    case StageKind::pointwise: return "pointwise";
    case StageKind::conv1d: return "conv1d";
    case StageKind::spatial_pool: return "spatial_pool";
    case StageKind::self_attention: return "self_attention";
  }
  return "?";
}

const char* to_string(Partition p) {
  switch (p) {
    case Partition::stem: return "stem";
    case Partition::tail: return "tail";
    case Partition::head: return "head";
    case Partition::kt: return "kt";
    case Partition::mm_exclusive: return "mm_exclusive";
  }
  return "?";
}

const char* to_string(ForwardMode mode) {
  switch (mode) {
    case ForwardMode::cotrain: return "cotrain";
    case ForwardMode::frozen_shared_mm: return "frozen_shared_mm";
    case ForwardMode::no_mm: return "no_mm";
  }
  return "?";
}

Shape InputSpec::shape() const {
  Shape s{channels, length};
  s.insert(s.end(), spatial.begin(), spatial.end());
  return s;
}

std::size_t MultimodalBatch::size() const {
  if (inputs.empty()) return 0;
  return inputs.begin()->second.dim(0);
}

namespace {

std::vector<std::size_t> trailing_axes(std::size_t first, std::size_t rank) {
  std::vector<std::size_t> axes;
  for (std::size_t a = first; a < rank; ++a) axes.push_back(a);
  return axes;
}

Tensor batched_positions(const Tensor& positions, std::size_t batch) {
  const auto values = positions.data();
  std::vector<double> out;
  out.reserve(batch * values.size());
  for (std::size_t b = 0; b < batch; ++b) out.insert(out.end(), values.begin(), values.end());
  return Tensor::from({batch, positions.dim(0), positions.dim(1)}, std::move(out));
}

}  // namespace

// ---- tokens -------------------------------------------------------------

Tensor tokens_from_features(const Tensor& phi, const TokenRecipe& recipe) {
  Tensor x = phi;
  if (!recipe.pool_axes.empty()) x = mean_pool(x, recipe.pool_axes);
  if (recipe.to_tokens) {
    if (x.rank() < 2) {
      throw ShapeError("token recipe: pooled features " + to_string(x.shape()) +
                       " have no temporal axis");
    }
    x = transpose(x);
  }
  if (recipe.projection) x = recipe.projection->forward(x);
  return x;
}

// ---- Stage --------------------------------------------------------------

Stage::Stage(const StageSpec& spec, std::size_t in_channels) : spec_(spec) {
  switch (spec.kind) {
    case StageKind::pointwise:
      if (spec.out == 0) throw ConfigError("pointwise stage needs 'out' > 0");
      pointwise_.emplace(in_channels, spec.out);
      break;
    case StageKind::conv1d:
      if (spec.out == 0 || spec.kernel == 0 || spec.stride == 0) {
        throw ConfigError("conv1d stage needs positive 'out', 'kernel', 'stride'");
      }
      conv_.emplace(in_channels, spec.out, spec.kernel, spec.stride, spec.padding);
      break;
    case StageKind::spatial_pool:
      break;
    case StageKind::self_attention:
      if (spec.heads == 0 || in_channels % spec.heads != 0) {
        throw ConfigError("self_attention stage: " + std::to_string(in_channels) +
                          " channels not divisible by " + std::to_string(spec.heads) +
                          " heads");
      }
      attention_.emplace(in_channels, spec.heads,
                         spec.ffn_hidden ? spec.ffn_hidden : 2 * in_channels, true);
      break;
  }
}

Shape Stage::infer(const Shape& in) const {
  Shape out = in;
  switch (spec_.kind) {
    case StageKind::pointwise:
      if (in.size() < 2) throw ConfigError("pointwise stage needs [C x T ...] input");
      out[0] = spec_.out;
      return out;
    case StageKind::conv1d:
      if (in.size() != 2) {
        throw ConfigError("conv1d stage needs [C x T] input, got " + to_string(in) +
                          "; pool spatial axes first");
      }
      if (in[1] + 2 * spec_.padding < spec_.kernel) {
        throw ConfigError("conv1d stage: length " + std::to_string(in[1]) +
                          " shorter than kernel " + std::to_string(spec_.kernel));
      }
      return {spec_.out, conv_->output_length(in[1])};
    case StageKind::spatial_pool:
      if (in.size() < 3) throw ConfigError("spatial_pool stage needs spatial axes");
      return {in[0], in[1]};
    case StageKind::self_attention:
      if (in.size() != 2) {
        throw ConfigError("self_attention stage needs [C x T] input, got " + to_string(in));
      }
      return out;
  }
  return out;
}

Tensor Stage::forward(const Tensor& x) const {
  const std::size_t r = x.rank();
  switch (spec_.kind) {
    case StageKind::pointwise: {
      std::vector<std::size_t> to_last{0}, back{0, r - 1};
      for (std::size_t a = 2; a < r; ++a) to_last.push_back(a);
      to_last.push_back(1);
      for (std::size_t a = 1; a + 1 < r; ++a) back.push_back(a);
      Tensor y = pointwise_->forward(permute(x, to_last));
      if (spec_.activation) y = relu(y);
      return permute(y, back);
    }
    case StageKind::conv1d: {
      Tensor y = conv_->forward(x);
      return spec_.activation ? relu(y) : y;
    }
    case StageKind::spatial_pool:
      return mean_pool(x, trailing_axes(3, r));
    case StageKind::self_attention: {
      const Tensor t = transpose(x);
      return transpose(attention_->forward(t, t));
    }
  }
  return x;
}

const Tensor& Stage::probs() const {
  if (!attention_) throw CapabilityError("stage has no attention probabilities");
  return attention_->attention.probs();
}

void Stage::collect(const std::string& prefix, ParamList& out) const {
  if (pointwise_) pointwise_->collect(prefix, out);
  if (conv_) conv_->collect(prefix, out);
  if (attention_) attention_->collect(prefix, out);
}

// ---- UnimodalBranch -------------------------------------------------------

UnimodalBranch::UnimodalBranch(const ModalitySpec& spec, const TaskSpec& task)
    : spec_(spec) {
  if (spec.attach_after == 0 || spec.attach_after > spec.stages.size()) {
    throw ConfigError("modality '" + spec.name + "': attach_after must be in [1, " +
                      std::to_string(spec.stages.size()) + "]");
  }
  Shape shape = spec.input.shape();
  for (std::size_t i = 0; i < spec.stages.size(); ++i) {
    Stage stage(spec.stages[i], shape[0]);
    shape = stage.infer(shape);
    (i < spec.attach_after ? stem_ : tail_).push_back(std::move(stage));
    if (i + 1 == spec.attach_after) stem_shape_ = shape;
  }
  feature_width_ = shape[0];
  head_ = LinearLayer(feature_width_, task.outputs());
}

bool UnimodalBranch::has_attention_tail() const {
  return std::any_of(tail_.begin(), tail_.end(), [](const Stage& s) {
    return s.spec().kind == StageKind::self_attention;
  });
}

Tensor UnimodalBranch::stem_forward(const Tensor& x) const {
  Tensor h = x;
  for (const auto& stage : stem_) h = stage.forward(h);
  return h;
}

UnimodalOutputs UnimodalBranch::tail_forward(const Tensor& stem) const {
  UnimodalOutputs out;
  out.stem = stem;
  Tensor h = stem;
  const Stage* last_attention = nullptr;
  for (const auto& stage : tail_) {
    h = stage.forward(h);
    if (stage.spec().kind == StageKind::self_attention) last_attention = &stage;
  }
  out.feat = mean_pool(h, trailing_axes(2, h.rank()));
  out.pred = head_.forward(out.feat);
  if (last_attention) out.attn = last_attention->probs();
  out.kt_pred = out.pred;
  out.kt_feat = out.feat;
  out.kt_attn = out.attn;
  return out;
}

UnimodalOutputs UnimodalBranch::forward(const Tensor& x) const {
  return tail_forward(stem_forward(x));
}

void UnimodalBranch::collect_stem(ParamList& out) const {
  for (std::size_t i = 0; i < stem_.size(); ++i) {
    stem_[i].collect(spec_.name + ".stem." + std::to_string(i), out);
  }
}

void UnimodalBranch::collect_tail(ParamList& out) const {
  for (std::size_t i = 0; i < tail_.size(); ++i) {
    tail_[i].collect(spec_.name + ".tail." + std::to_string(i), out);
  }
}

void UnimodalBranch::collect_head(ParamList& out) const {
  head_.collect(spec_.name + ".head", out);
}

// ---- UnimodalModel --------------------------------------------------------

UnimodalModel::UnimodalModel(const ModalitySpec& spec, const TaskSpec& task)
    : branch_(spec, task), task_(task) {
  branch_.collect_stem(params_);
  branch_.collect_tail(params_);
  branch_.collect_head(params_);
}

Tensor UnimodalModel::forward(const Tensor& x) const {
  return branch_.forward(x).pred;
}

// ---- CoTrainModel ---------------------------------------------------------

namespace {

void validate_name(const std::string& name) {
  if (name.empty() || name.find_first_of(".>- ") != std::string::npos) {
    throw ConfigError("modality name '" + name +
                      "' must be non-empty without '.', '-', '>' or spaces");
  }
}

}  // namespace

CoTrainModel::CoTrainModel(ModelConfig config) : config_(std::move(config)) {
  if (config_.modalities.size() < 2) {
    throw ConfigError("co-training needs at least 2 modalities, got " +
                      std::to_string(config_.modalities.size()));
  }
  if (config_.task.kind == TaskKind::classification && config_.task.classes < 2) {
    throw ConfigError("classification needs at least 2 classes");
  }
  const std::size_t d = config_.stack.width;
  if (d == 0 || config_.stack.heads == 0 || d % config_.stack.heads != 0) {
    throw ConfigError("multimodal width " + std::to_string(d) +
                      " must be a positive multiple of heads");
  }
  std::set<std::string> seen;
  for (const auto& spec : config_.modalities) {
    validate_name(spec.name);
    if (!seen.insert(spec.name).second) {
      throw ConfigError("duplicate modality '" + spec.name + "'");
    }
    names_.push_back(spec.name);
    branches_.emplace_back(spec, config_.task);
    const Shape& stem = branches_.back().stem_shape();
    TokenRecipe recipe;
    recipe.pool_axes = trailing_axes(3, stem.size() + 1);
    recipe.to_tokens = true;
    if (stem[0] != d) {
      if (!spec.project_tokens) {
        throw ConfigError("modality '" + spec.name + "': stem width " +
                          std::to_string(stem[0]) + " does not match multimodal width " +
                          std::to_string(d) + " at the attach point");
      }
      recipe.projection.emplace(stem[0], d);
    }
    recipes_.push_back(std::move(recipe));
    if (config_.positional_encoding) {
      positions_.emplace(spec.name, sinusoidal_encoding(stem[1], d));
    }
    if (config_.kt_projector) {
      projectors_.emplace_back(LinearLayer(branches_.back().feature_width(),
                                           config_.modalities.size() * d));
    } else {
      projectors_.emplace_back(std::nullopt);
    }
  }
  stack_ = TransformerStack(names_, config_.stack);
  mm_head_ = LinearLayer(names_.size() * d, config_.task.outputs());

  auto add = [this](ParamList list, Partition p, const std::string& m) {
    for (auto& ref : list) params_.push_back({std::move(ref), p, m});
  };
  for (std::size_t i = 0; i < branches_.size(); ++i) {
    ParamList stem, tail, head, kt;
    branches_[i].collect_stem(stem);
    branches_[i].collect_tail(tail);
    branches_[i].collect_head(head);
    if (projectors_[i]) projectors_[i]->collect(names_[i] + ".kt_proj", kt);
    add(std::move(stem), Partition::stem, names_[i]);
    add(std::move(tail), Partition::tail, names_[i]);
    add(std::move(head), Partition::head, names_[i]);
    add(std::move(kt), Partition::kt, names_[i]);
  }
  ParamList mm;
  for (std::size_t i = 0; i < recipes_.size(); ++i) {
    if (recipes_[i].projection) recipes_[i].projection->collect("mm.tokens." + names_[i], mm);
  }
  stack_.collect("mm", mm);
  mm_head_.collect("mm.head", mm);
  add(std::move(mm), Partition::mm_exclusive, "");
}

const UnimodalBranch& CoTrainModel::branch(const std::string& modality) const {
  for (std::size_t i = 0; i < names_.size(); ++i) {
    if (names_[i] == modality) return branches_[i];
  }
  throw LookupError("unknown modality '" + modality + "'");
}

std::vector<ParamEntry> CoTrainModel::partition(Partition p,
                                                const std::string& modality) const {
  std::vector<ParamEntry> out;
  for (const auto& e : params_) {
    if (e.partition == p && (modality.empty() || e.modality == modality)) out.push_back(e);
  }
  return out;
}

std::size_t CoTrainModel::parameter_count() const {
  std::size_t n = 0;
  for (const auto& e : params_) n += e.ref.tensor.numel();
  return n;
}

Tensor CoTrainModel::parameter(const std::string& name) const {
  for (const auto& e : params_) {
    if (e.ref.name == name) return e.ref.tensor;
  }
  throw LookupError("unknown parameter '" + name + "'");
}

void CoTrainModel::initialize(std::uint64_t seed) {
  ParamList refs;
  for (const auto& e : params_) refs.push_back(e.ref);
  init_params(refs, seed);
}

void CoTrainModel::zero_grad() {
  for (auto& e : params_) e.ref.tensor.zero_grad();
}

const LinearLayer& CoTrainModel::kt_projector(const std::string& modality) const {
  for (std::size_t i = 0; i < names_.size(); ++i) {
    if (names_[i] != modality) continue;
    if (!projectors_[i]) {
      throw CapabilityError("model was built without feature-transfer projectors");
    }
    return *projectors_[i];
  }
  throw LookupError("unknown modality '" + modality + "'");
}

BranchOutputs CoTrainModel::forward_all(const MultimodalBatch& batch, ForwardMode mode,
                                        bool kt_through_stem) const {
  BranchOutputs out;
  std::size_t batch_size = 0;
  for (std::size_t i = 0; i < names_.size(); ++i) {
    auto it = batch.inputs.find(names_[i]);
    if (it == batch.inputs.end() || !it->second.defined()) {
      throw ContractError("batch is missing data for modality '" + names_[i] + "'");
    }
    const Tensor& x = it->second;
    Shape expected = branches_[i].spec().input.shape();
    expected.insert(expected.begin(), x.rank() > 0 ? x.dim(0) : 0);
    if (x.shape() != expected) {
      throw ShapeError("modality '" + names_[i] + "' input " + to_string(x.shape()) +
                       " does not match " + to_string(expected));
    }
    if (i == 0) batch_size = x.dim(0);
    if (x.dim(0) != batch_size) throw ShapeError("modalities disagree on batch size");

    const Tensor stem = branches_[i].stem_forward(x);
    UnimodalOutputs uo = branches_[i].tail_forward(stem);
    if (!kt_through_stem && mode != ForwardMode::no_mm) {
      const UnimodalOutputs blocked = branches_[i].tail_forward(detach(stem));
      uo.kt_pred = blocked.pred;
      uo.kt_feat = blocked.feat;
      uo.kt_attn = blocked.attn;
    }
    out.uni.emplace(names_[i], std::move(uo));
  }
  if (mode == ForwardMode::no_mm) return out;

  for (std::size_t i = 0; i < names_.size(); ++i) {
    const Tensor& stem = out.uni.at(names_[i]).stem;
    const Tensor source = mode == ForwardMode::frozen_shared_mm ? detach(stem) : stem;
    Tensor tokens = tokens_from_features(source, recipes_[i]);
    if (config_.positional_encoding) {
      tokens = add(tokens, batched_positions(positions_.at(names_[i]), batch_size));
    }
    out.tokens.emplace(names_[i], tokens);
  }
  StackOutputs fused = stack_.forward(out.tokens);
  std::vector<Tensor> pooled;
  for (const auto& name : names_) pooled.push_back(mean_pool(fused.fused.at(name), {1}));
  out.mm_feat = concat(pooled, 1);
  out.mm_pred = mm_head_.forward(out.mm_feat);
  out.mm_attn = std::move(fused.self_probs);
  return out;
}

UnimodalModel CoTrainModel::extract_unimodal(const std::string& modality) const {
  const UnimodalBranch& source = branch(modality);
  UnimodalModel model(source.spec(), config_.task);
  ParamList mine;
  for (const auto& e : params_) {
    if (e.modality == modality &&
        (e.partition == Partition::stem || e.partition == Partition::tail ||
         e.partition == Partition::head)) {
      mine.push_back(e.ref);
    }
  }
  ParamList target = model.parameters();
  copy_parameters(mine, target);
  return model;
}

void copy_parameters(const ParamList& source, ParamList& target) {
  std::map<std::string, const Tensor*> by_name;
  for (const auto& p : source) by_name[p.name] = &p.tensor;
  for (auto& p : target) {
    auto it = by_name.find(p.name);
    if (it == by_name.end()) throw LookupError("missing parameter '" + p.name + "'");
    if (it->second->shape() != p.tensor.shape()) {
      throw ShapeError("parameter '" + p.name + "' has shape " +
                       to_string(it->second->shape()) + ", expected " +
                       to_string(p.tensor.shape()));
    }
    auto src = it->second->data();
    std::copy(src.begin(), src.end(), p.tensor.mutable_data().begin());
  }
}

}  // namespace comodal
