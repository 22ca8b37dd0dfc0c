// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <string>
#include <vector>

#include "comodal/model.hpp"
#include "comodal/random.hpp"
#include "comodal/tensor.hpp"

namespace comodal::testing {

inline std::vector<double> values(const Tensor& t) { return {t.data().begin(), t.data().end()}; }

inline Tensor uniform_tensor(Shape shape, std::uint64_t seed, double lo = -1.0, double hi = 1.0) {
  Rng rng(seed);
  std::vector<double> v(numel(shape));
  for (auto& x : v) x = rng.uniform(lo, hi);
  return Tensor::from(std::move(shape), std::move(v));
}

inline ModalitySpec conv_modality(const std::string& name, std::size_t channels,
                                  std::vector<std::size_t> spatial, bool attention_tail) {
  ModalitySpec m;
  m.name = name;
  m.input = {channels, 4, std::move(spatial)};
  StageSpec pool;
  pool.kind = StageKind::spatial_pool;
  StageSpec conv;
  conv.kind = StageKind::conv1d;
  conv.out = 4;
  StageSpec point;
  point.kind = StageKind::pointwise;
  point.out = 6;
  m.stages = {pool, conv, point};
  if (attention_tail) {
    StageSpec attn;
    attn.kind = StageKind::self_attention;
    attn.heads = 2;
    attn.ffn_hidden = 8;
    m.stages.push_back(attn);
  }
  m.attach_after = 2;
  return m;
}

/// Two or three small modalities around a width-4 multimodal stack.
inline ModelConfig small_config(std::size_t modalities = 2, bool attention = false,
                                TaskKind kind = TaskKind::classification) {
  ModelConfig c;
  c.task.kind = kind;
  c.task.classes = 3;
  const std::vector<std::string> names = {"rgb", "depth", "audio"};
  for (std::size_t i = 0; i < modalities; ++i) {
    c.modalities.push_back(conv_modality(names[i], 3 + i, i == 0 ? std::vector<std::size_t>{2, 2}
                                                                  : std::vector<std::size_t>{2},
                                         attention));
  }
  c.stack = StackConfig{4, 2, 1, attention ? 1u : 0u, 8};
  return c;
}

inline MultimodalBatch random_batch(const CoTrainModel& model, std::size_t size,
                                    std::uint64_t seed) {
  MultimodalBatch batch;
  for (const auto& spec : model.config().modalities) {
    Shape shape = spec.input.shape();
    shape.insert(shape.begin(), size);
    batch.inputs.emplace(spec.name, uniform_tensor(shape, derive_seed(seed, spec.name)));
  }
  Rng rng(seed);
  for (std::size_t i = 0; i < size; ++i) {
    batch.labels.push_back(static_cast<int>(rng.below(model.config().task.classes)));
    batch.targets.push_back(rng.uniform(-3.0, 3.0));
  }
  return batch;
}

}  // namespace comodal::testing
