// SPDX-License-Identifier: Apache-2.0
//
// Synthetic multimodal data. Every example draws one latent vector z. Channel
// c of a modality carries tanh(m_c . z) for a fixed per-modality projection
// m_c, observed with fresh Gaussian noise at every time step and spatial
// position. Labels are a fixed function of z alone, so a modality with fewer
// channels than latent dimensions cannot resolve every label.
#pragma once

#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "comodal/model.hpp"

namespace comodal {

struct ViewSpec {
  std::string name;
  InputSpec input;
  double noise = 0.5;
  // Rank of the latent projection seen by this view; 0 means full rank.
  std::size_t rank = 0;
};

struct SyntheticDatasetSpec {
  std::size_t latent_dim = 8;
  TaskSpec task;
  std::vector<ViewSpec> views;
  std::size_t train = 400;
  std::size_t val = 200;
  std::size_t test = 1000;
  // Regression targets are regression_scale * <w, z> / |w|, clipped to [-3, 3].
  double regression_scale = 1.5;
};

/// One split held as flat per-modality buffers of N examples.
class Split {
 public:
  std::size_t size() const { return size_; }
  const std::vector<int>& labels() const { return labels_; }
  const std::vector<double>& targets() const { return targets_; }
  const std::vector<double>& latents() const { return latents_; }
  std::span<const double> view(const std::string& modality) const;
  const Shape& example_shape(const std::string& modality) const;

  MultimodalBatch batch(std::span<const std::size_t> indices) const;
  MultimodalBatch batch(std::size_t begin, std::size_t end) const;
  MultimodalBatch all() const { return batch(0, size_); }

 private:
  friend struct SplitBuilder;
  std::size_t size_ = 0;
  std::size_t latent_dim_ = 0;
  std::map<std::string, Shape> shapes_;
  std::map<std::string, std::vector<double>> views_;
  std::vector<int> labels_;
  std::vector<double> targets_;
  std::vector<double> latents_;
};

struct Dataset {
  Split train, val, test;
  // Label rule: classification scores readout[classes x k] * z, regression
  // target clip(functional . z, -3, 3).
  std::vector<double> readout;
  std::vector<double> functional;
  const Split& split(const std::string& name) const;
};

/// Deterministic in (spec, seed). Per-view maps and noise streams are keyed
/// by view name, so reordering views leaves every view and label unchanged.
Dataset generate_synthetic(const SyntheticDatasetSpec& spec, std::uint64_t seed);

}  // namespace comodal
