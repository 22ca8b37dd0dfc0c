// SPDX-License-Identifier: Apache-2.0
//
// Task losses, knowledge-transfer losses and their weighted composition.
// Every transfer loss detaches its teacher input, so the multimodal branch
// never receives gradient from a transfer term.
#pragma once

#include <map>
#include <span>
#include <string>

#include "comodal/layers.hpp"
#include "comodal/model.hpp"
#include "comodal/tensor.hpp"

namespace comodal {

struct LossWeights {
  double alpha = 5.0;
  double beta = 1.0;
  double gamma = 1.0;
  double temperature = 5.0;

  /// Throws ParameterError on negative weights or non-positive temperature.
  void validate() const;
};

enum class KtMode { decision, feature, attention, none };

const char* to_string(KtMode mode);
KtMode kt_mode_from_string(const std::string& name);

/// Mean over the batch of -log softmax(logits)[label].
Tensor task_loss_classification(const Tensor& logits, std::span<const int> labels);
/// Mean absolute error of pred[B x 1] against target[B].
Tensor task_loss_regression(const Tensor& pred, std::span<const double> target);

/// T^2 * mean_b KL(softmax(teacher/T) || softmax(student/T)).
Tensor kt_decision(const Tensor& student_logits, const Tensor& teacher_logits,
                   double temperature);
/// mean_b (1 - cos(projector(student), teacher)), eps = 1e-8 on norms.
Tensor kt_feature(const Tensor& student_feat, const Tensor& teacher_feat,
                  const LinearLayer& projector);
/// Mean over rows (and heads) of KL(teacher_row || student_row) with logs
/// clamped at 1e-8. Undefined inputs raise CapabilityError.
Tensor kt_attention(const Tensor& student_probs, const Tensor& teacher_probs);

struct TotalLoss {
  Tensor value;
  // "task.<modality>", "task.mm", "kt.<modality>", "total".
  std::map<std::string, double> breakdown;
};

/// alpha * sum_i kt_i + beta * sum_i task_i + gamma * task_mm. Terms with a
/// zero weight, transfer terms under KtMode::none and every multimodal term
/// when the outputs carry no multimodal branch are left out of the graph.
TotalLoss total_loss(const CoTrainModel& model, const BranchOutputs& outputs,
                     const MultimodalBatch& batch, const LossWeights& weights,
                     KtMode mode);

Tensor task_loss(const Tensor& pred, const MultimodalBatch& batch, const TaskSpec& task);

}  // namespace comodal
