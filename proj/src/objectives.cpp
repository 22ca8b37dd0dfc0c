// SPDX-License-Identifier: Apache-2.0
#include "comodal/objectives.hpp"

#include <cmath>

#include "comodal/error.hpp"

namespace comodal {

namespace {

constexpr double kLogEps = 1e-8;
constexpr double kNormEps = 1e-8;

void check_weight(double value, const char* name) {
  if (!(value >= 0.0) || !std::isfinite(value)) {
    throw ParameterError(std::string("loss weight ") + name +
                         " must be finite and >= 0, got " + std::to_string(value));
  }
}

}  // namespace

void LossWeights::validate() const {
  check_weight(alpha, "alpha");
  check_weight(beta, "beta");
  check_weight(gamma, "gamma");
  if (!(temperature > 0.0) || !std::isfinite(temperature)) {
    throw ParameterError("temperature must be > 0, got " + std::to_string(temperature));
  }
}

const char* to_string(KtMode mode) {
  switch (mode) {
    case KtMode::decision: return "decision";
    case KtMode::feature: return "feature";
    case KtMode::attention: return "attention";
    case KtMode::none: return "none";
  }
  return "?";
}

KtMode kt_mode_from_string(const std::string& name) {
  for (auto m : {KtMode::decision, KtMode::feature, KtMode::attention, KtMode::none}) {
    if (name == to_string(m)) return m;
  }
  throw ConfigError("unknown knowledge-transfer mode '" + name + "'");
}

Tensor task_loss_classification(const Tensor& logits, std::span<const int> labels) {
  if (logits.rank() != 2 || logits.dim(0) != labels.size()) {
    throw ShapeError("classification loss: logits " + to_string(logits.shape()) +
                     " vs " + std::to_string(labels.size()) + " labels");
  }
  return neg(mean(pick(log_softmax_t(logits, 1, 1.0), labels)));
}

Tensor task_loss_regression(const Tensor& pred, std::span<const double> target) {
  if (pred.rank() != 2 || pred.dim(1) != 1 || pred.dim(0) != target.size()) {
    throw ShapeError("regression loss: predictions " + to_string(pred.shape()) +
                     " vs " + std::to_string(target.size()) + " targets");
  }
  const Tensor t = Tensor::from(pred.shape(), {target.begin(), target.end()});
  return mean(abs(sub(pred, t)));
}

Tensor kt_decision(const Tensor& student_logits, const Tensor& teacher_logits,
                   double temperature) {
  if (student_logits.shape() != teacher_logits.shape() || student_logits.rank() != 2) {
    throw ShapeError("kt_decision: student " + to_string(student_logits.shape()) +
                     " vs teacher " + to_string(teacher_logits.shape()));
  }
  const Tensor teacher = detach(teacher_logits);
  const Tensor p_teacher = softmax_t(teacher, 1, temperature);
  const Tensor log_teacher = log_softmax_t(teacher, 1, temperature);
  const Tensor log_student = log_softmax_t(student_logits, 1, temperature);
  const Tensor kl = sum(mul(p_teacher, sub(log_teacher, log_student)));
  return scale(kl, temperature * temperature /
                       static_cast<double>(student_logits.dim(0)));
}

Tensor kt_feature(const Tensor& student_feat, const Tensor& teacher_feat,
                  const LinearLayer& projector) {
  if (student_feat.rank() != 2 || teacher_feat.rank() != 2 ||
      student_feat.dim(1) != projector.in_features() ||
      teacher_feat.dim(1) != projector.out_features() ||
      student_feat.dim(0) != teacher_feat.dim(0)) {
    throw ShapeError("kt_feature: student " + to_string(student_feat.shape()) +
                     " and teacher " + to_string(teacher_feat.shape()) +
                     " do not fit projector " + std::to_string(projector.in_features()) +
                     "->" + std::to_string(projector.out_features()));
  }
  const Tensor cos =
      row_cosine(projector.forward(student_feat), detach(teacher_feat), kNormEps);
  return add_scalar(neg(mean(cos)), 1.0);
}

Tensor kt_attention(const Tensor& student_probs, const Tensor& teacher_probs) {
  if (!student_probs.defined()) {
    throw CapabilityError("attention-level transfer needs a student with self-attention");
  }
  if (!teacher_probs.defined()) {
    throw CapabilityError("attention-level transfer needs teacher self-attention blocks");
  }
  if (student_probs.shape() != teacher_probs.shape() || student_probs.rank() < 2) {
    throw ShapeError("kt_attention: student " + to_string(student_probs.shape()) +
                     " vs teacher " + to_string(teacher_probs.shape()));
  }
  const Tensor teacher = detach(teacher_probs);
  const std::size_t rows = teacher.numel() / teacher.shape().back();
  const Tensor kl = sum(mul(teacher, sub(log_clamped(teacher, kLogEps),
                                         log_clamped(student_probs, kLogEps))));
  return scale(kl, 1.0 / static_cast<double>(rows));
}

Tensor task_loss(const Tensor& pred, const MultimodalBatch& batch, const TaskSpec& task) {
  if (task.kind == TaskKind::classification) {
    return task_loss_classification(pred, batch.labels);
  }
  return task_loss_regression(pred, batch.targets);
}

TotalLoss total_loss(const CoTrainModel& model, const BranchOutputs& outputs,
                     const MultimodalBatch& batch, const LossWeights& weights,
                     KtMode mode) {
  weights.validate();
  const TaskSpec& task = model.config().task;
  if (mode == KtMode::decision && task.kind != TaskKind::classification) {
    throw CapabilityError("decision-level transfer needs a classification task");
  }
  TotalLoss result;
  Tensor total;
  auto accumulate = [&total](const Tensor& term, double weight) {
    const Tensor weighted = weight == 1.0 ? term : scale(term, weight);
    total = total.defined() ? add(total, weighted) : weighted;
  };

  const bool transfer = mode != KtMode::none && weights.alpha != 0.0 && outputs.has_mm();
  if (transfer) {
    Tensor kt_sum;
    for (const auto& name : model.modalities()) {
      const UnimodalOutputs& uni = outputs.uni.at(name);
      Tensor term;
      switch (mode) {
        case KtMode::decision:
          term = kt_decision(uni.kt_pred, outputs.mm_pred, weights.temperature);
          break;
        case KtMode::feature:
          term = kt_feature(uni.kt_feat, outputs.mm_feat, model.kt_projector(name));
          break;
        case KtMode::attention: {
          auto it = outputs.mm_attn.find(name);
          term = kt_attention(uni.kt_attn,
                              it == outputs.mm_attn.end() ? Tensor() : it->second);
          break;
        }
        case KtMode::none:
          break;
      }
      result.breakdown["kt." + name] = term.item();
      kt_sum = kt_sum.defined() ? add(kt_sum, term) : term;
    }
    accumulate(kt_sum, weights.alpha);
  }

  Tensor task_sum;
  for (const auto& name : model.modalities()) {
    const Tensor term = task_loss(outputs.uni.at(name).pred, batch, task);
    result.breakdown["task." + name] = term.item();
    task_sum = task_sum.defined() ? add(task_sum, term) : term;
  }
  if (weights.beta != 0.0) accumulate(task_sum, weights.beta);

  if (outputs.has_mm()) {
    const Tensor term = task_loss(outputs.mm_pred, batch, task);
    result.breakdown["task.mm"] = term.item();
    if (weights.gamma != 0.0) accumulate(term, weights.gamma);
  }

  result.value = total.defined() ? total : Tensor::scalar(0.0);
  result.breakdown["total"] = result.value.item();
  return result;
}

}  // namespace comodal
