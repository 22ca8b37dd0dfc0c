// SPDX-License-Identifier: Apache-2.0
#include "comodal/data.hpp"

#include <algorithm>
#include <cmath>
#include <set>

#include "comodal/error.hpp"
#include "comodal/random.hpp"

namespace comodal {

struct SplitBuilder {
  static Split& prepare(Split& s, std::size_t n, std::size_t k) {
    s.size_ = n;
    s.latent_dim_ = k;
    return s;
  }
  static std::vector<double>& latents(Split& s) { return s.latents_; }
  static std::vector<int>& labels(Split& s) { return s.labels_; }
  static std::vector<double>& targets(Split& s) { return s.targets_; }
  static std::vector<double>& view(Split& s, const std::string& name, const Shape& shape) {
    s.shapes_[name] = shape;
    return s.views_[name];
  }
};

std::span<const double> Split::view(const std::string& modality) const {
  auto it = views_.find(modality);
  if (it == views_.end()) throw LookupError("split has no modality '" + modality + "'");
  return it->second;
}

const Shape& Split::example_shape(const std::string& modality) const {
  auto it = shapes_.find(modality);
  if (it == shapes_.end()) throw LookupError("split has no modality '" + modality + "'");
  return it->second;
}

MultimodalBatch Split::batch(std::span<const std::size_t> indices) const {
  MultimodalBatch out;
  for (const auto& [name, values] : views_) {
    const Shape& shape = shapes_.at(name);
    const std::size_t per = numel(shape);
    std::vector<double> data;
    data.reserve(indices.size() * per);
    for (auto i : indices) {
      data.insert(data.end(), values.begin() + i * per, values.begin() + (i + 1) * per);
    }
    Shape batched = shape;
    batched.insert(batched.begin(), indices.size());
    out.inputs.emplace(name, Tensor::from(std::move(batched), std::move(data)));
  }
  for (auto i : indices) {
    if (!labels_.empty()) out.labels.push_back(labels_[i]);
    if (!targets_.empty()) out.targets.push_back(targets_[i]);
  }
  return out;
}

MultimodalBatch Split::batch(std::size_t begin, std::size_t end) const {
  if (begin >= end || end > size_) throw ContractError("empty or out-of-range batch");
  std::vector<std::size_t> indices(end - begin);
  for (std::size_t i = 0; i < indices.size(); ++i) indices[i] = begin + i;
  return batch(indices);
}

const Split& Dataset::split(const std::string& name) const {
  if (name == "train") return train;
  if (name == "val") return val;
  if (name == "test") return test;
  throw LookupError("unknown split '" + name + "'");
}

namespace {

// Standard deviation of m_c . z; keeps tanh in its near-linear range.
constexpr double kPreactivationScale = 0.5;

struct ViewMap {
  std::vector<double> mix;  // [C x k]
};

ViewMap make_view_map(const ViewSpec& view, std::size_t k, std::uint64_t seed) {
  Rng rng(derive_seed(seed, "view-map." + view.name));
  const std::size_t rank = view.rank == 0 ? k : view.rank;
  const std::size_t rows = view.input.channels;
  // mix = G * Q with G [C x rank], Q [rank x k].
  std::vector<double> q(rank * k), g(rows * rank);
  for (auto& v : q) v = rng.normal();
  for (auto& v : g) v = rng.normal();
  const double norm = kPreactivationScale / std::sqrt(static_cast<double>(rank * k));
  ViewMap map;
  map.mix.assign(rows * k, 0.0);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t j = 0; j < rank; ++j)
      for (std::size_t c = 0; c < k; ++c) map.mix[r * k + c] += g[r * rank + j] * q[j * k + c] * norm;
  return map;
}

void fill_split(Split& split, const SyntheticDatasetSpec& spec, std::size_t n,
                const std::string& split_name, std::uint64_t seed,
                const std::vector<double>& readout, const std::vector<double>& functional,
                const std::map<std::string, ViewMap>& maps) {
  const std::size_t k = spec.latent_dim;
  SplitBuilder::prepare(split, n, k);
  auto& z = SplitBuilder::latents(split);
  z.resize(n * k);
  Rng latent_rng(derive_seed(seed, "latent." + split_name));
  for (auto& v : z) v = latent_rng.normal();

  if (spec.task.kind == TaskKind::classification) {
    auto& labels = SplitBuilder::labels(split);
    labels.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
      int best = 0;
      double best_score = -INFINITY;
      for (std::size_t c = 0; c < spec.task.classes; ++c) {
        double score = 0;
        for (std::size_t j = 0; j < k; ++j) score += readout[c * k + j] * z[i * k + j];
        if (score > best_score) {
          best_score = score;
          best = static_cast<int>(c);
        }
      }
      labels[i] = best;
    }
  } else {
    auto& targets = SplitBuilder::targets(split);
    targets.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
      double y = 0;
      for (std::size_t j = 0; j < k; ++j) y += functional[j] * z[i * k + j];
      targets[i] = std::clamp(y, -3.0, 3.0);
    }
  }

  for (const auto& view : spec.views) {
    const Shape shape = view.input.shape();
    const std::size_t per = numel(shape);
    const std::size_t channels = view.input.channels;
    const std::size_t repeats = per / channels;  // time steps x spatial positions
    auto& values = SplitBuilder::view(split, view.name, shape);
    values.resize(n * per);
    const auto& mix = maps.at(view.name).mix;
    Rng noise_rng(derive_seed(seed, "noise." + split_name + "." + view.name));
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t c = 0; c < channels; ++c) {
        double pre = 0;
        for (std::size_t j = 0; j < k; ++j) pre += mix[c * k + j] * z[i * k + j];
        const double base = std::tanh(pre);
        for (std::size_t r = 0; r < repeats; ++r) {
          values[i * per + c * repeats + r] = base + view.noise * noise_rng.normal();
        }
      }
    }
  }
}

}  // namespace

Dataset generate_synthetic(const SyntheticDatasetSpec& spec, std::uint64_t seed) {
  if (spec.latent_dim == 0) throw ConfigError("synthetic data needs latent_dim > 0");
  if (spec.train == 0 || spec.val == 0 || spec.test == 0) {
    throw ConfigError("synthetic split sizes must be positive");
  }
  if (spec.views.empty()) throw ConfigError("synthetic data needs at least one view");
  if (spec.task.kind == TaskKind::classification && spec.task.classes < 2) {
    throw ConfigError("classification needs at least 2 classes");
  }
  std::set<std::string> names;
  for (const auto& v : spec.views) {
    if (!names.insert(v.name).second) throw ConfigError("duplicate view '" + v.name + "'");
    if (v.rank > spec.latent_dim) {
      throw ConfigError("view '" + v.name + "' rank exceeds latent_dim");
    }
    if (!(v.noise >= 0)) throw ConfigError("view '" + v.name + "' noise must be >= 0");
    if (v.input.channels == 0 || v.input.length == 0) {
      throw ConfigError("view '" + v.name + "' needs positive channels and length");
    }
  }
  const std::size_t k = spec.latent_dim;
  Rng world(derive_seed(seed, "world"));
  std::vector<double> readout(spec.task.classes * k), functional(k);
  for (auto& v : readout) v = world.normal();
  double norm = 0;
  for (auto& v : functional) {
    v = world.normal();
    norm += v * v;
  }
  for (auto& v : functional) v *= spec.regression_scale / std::sqrt(norm);

  std::map<std::string, ViewMap> maps;
  for (const auto& v : spec.views) maps.emplace(v.name, make_view_map(v, k, seed));

  Dataset data;
  data.readout = readout;
  data.functional = functional;
  fill_split(data.train, spec, spec.train, "train", seed, readout, functional, maps);
  fill_split(data.val, spec, spec.val, "val", seed, readout, functional, maps);
  fill_split(data.test, spec, spec.test, "test", seed, readout, functional, maps);
  return data;
}

}  // namespace comodal
