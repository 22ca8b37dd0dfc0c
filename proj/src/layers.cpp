// SPDX-License-Identifier: Apache-2.0
#include "comodal/layers.hpp"

#include <cmath>

#include "comodal/error.hpp"
#include "comodal/random.hpp"

namespace comodal {

namespace {

Tensor param(Shape shape) { return Tensor::zeros(std::move(shape), true); }

// x[... x d_in] * w[d_in x d_out] over the trailing axis.
Tensor project(const Tensor& x, const Tensor& w) {
  if (x.rank() == 2) return matmul(x, w);
  Shape out = x.shape();
  out.back() = w.dim(1);
  const std::size_t rows = x.numel() / x.shape().back();
  return reshape(matmul(reshape(x, {rows, x.shape().back()}), w), std::move(out));
}

}  // namespace

void init_params(ParamList& params, std::uint64_t seed) {
  for (auto& p : params) {
    auto values = p.tensor.mutable_data();
    switch (p.init) {
      case InitKind::zero:
        std::fill(values.begin(), values.end(), 0.0);
        break;
      case InitKind::one:
        std::fill(values.begin(), values.end(), 1.0);
        break;
      case InitKind::glorot: {
        Rng rng(derive_seed(seed, p.name));
        const double a = std::sqrt(6.0 / static_cast<double>(p.fan_in + p.fan_out));
        for (auto& v : values) v = rng.uniform(-a, a);
        break;
      }
    }
  }
}

// ---- LinearLayer --------------------------------------------------------

LinearLayer::LinearLayer(std::size_t d_in, std::size_t d_out)
    : weight(param({d_in, d_out})), bias(param({d_out})) {}

Tensor LinearLayer::forward(const Tensor& x) const {
  if (x.rank() == 0 || x.shape().back() != in_features()) {
    throw ShapeError("linear: input " + to_string(x.shape()) +
                     " does not end in width " + std::to_string(in_features()));
  }
  return add_bias(project(x, weight), bias);
}

void LinearLayer::collect(const std::string& prefix, ParamList& out) const {
  out.push_back({prefix + ".weight", weight, InitKind::glorot, weight.dim(0),
                 weight.dim(1)});
  out.push_back({prefix + ".bias", bias, InitKind::zero, 1, 1});
}

// ---- Conv1dLayer --------------------------------------------------------

Conv1dLayer::Conv1dLayer(std::size_t c_in, std::size_t c_out, std::size_t kernel,
                         std::size_t stride_, std::size_t padding_)
    : kernels(param({c_out, c_in, kernel})),
      bias(param({c_out})),
      stride(stride_),
      padding(padding_) {
  if (stride == 0) throw ParameterError("conv1d stride must be positive");
}

Tensor Conv1dLayer::forward(const Tensor& x) const {
  return conv1d(x, kernels, bias, stride, padding);
}

std::size_t Conv1dLayer::output_length(std::size_t length) const {
  const std::size_t k = kernels.dim(2);
  if (length + 2 * padding < k) {
    throw ShapeError("conv1d: length " + std::to_string(length) +
                     " shorter than kernel " + std::to_string(k));
  }
  return (length + 2 * padding - k) / stride + 1;
}

void Conv1dLayer::collect(const std::string& prefix, ParamList& out) const {
  const std::size_t k = kernels.dim(2);
  out.push_back({prefix + ".weight", kernels, InitKind::glorot,
                 kernels.dim(1) * k, kernels.dim(0) * k});
  out.push_back({prefix + ".bias", bias, InitKind::zero, 1, 1});
}

// ---- LayerNorm / FeedForward ---------------------------------------------

LayerNorm::LayerNorm(std::size_t width)
    : gain(Tensor::full({width}, 1.0, true)), bias(param({width})) {}

Tensor LayerNorm::forward(const Tensor& x) const {
  return layer_norm(x, gain, bias);
}

void LayerNorm::collect(const std::string& prefix, ParamList& out) const {
  out.push_back({prefix + ".gain", gain, InitKind::one, 1, 1});
  out.push_back({prefix + ".bias", bias, InitKind::zero, 1, 1});
}

FeedForward::FeedForward(std::size_t width, std::size_t hidden)
    : expand(width, hidden), contract(hidden, width) {}

Tensor FeedForward::forward(const Tensor& x) const {
  return contract.forward(relu(expand.forward(x)));
}

void FeedForward::collect(const std::string& prefix, ParamList& out) const {
  expand.collect(prefix + ".0", out);
  contract.collect(prefix + ".1", out);
}

// ---- attention ----------------------------------------------------------

AttentionBlock::AttentionBlock(std::size_t width, std::size_t heads,
                               bool expose_probs)
    : wq(param({width, width})),
      wk(param({width, width})),
      wv(param({width, width})),
      wo(param({width, width})),
      heads_(heads),
      expose_probs_(expose_probs) {
  if (heads == 0 || width % heads != 0) {
    throw ParameterError("attention width " + std::to_string(width) +
                         " is not divisible by " + std::to_string(heads) +
                         " heads");
  }
}

const Tensor& AttentionBlock::probs() const {
  if (!expose_probs_) {
    throw CapabilityError("attention block does not expose probabilities");
  }
  if (!last_probs_.defined()) {
    throw ContractError("attention probabilities requested before a forward");
  }
  return last_probs_;
}

void AttentionBlock::collect(const std::string& prefix, ParamList& out) const {
  const std::size_t d = width();
  out.push_back({prefix + ".Wq", wq, InitKind::glorot, d, d});
  out.push_back({prefix + ".Wk", wk, InitKind::glorot, d, d});
  out.push_back({prefix + ".Wv", wv, InitKind::glorot, d, d});
  out.push_back({prefix + ".Wo", wo, InitKind::glorot, d, d});
}

Tensor cross_attention(const Tensor& phi_a, const Tensor& phi_b,
                       const AttentionBlock& block) {
  const std::size_t d = block.width();
  const bool single = phi_a.rank() == 2;
  if ((phi_a.rank() != 2 && phi_a.rank() != 3) || phi_b.rank() != phi_a.rank() ||
      phi_a.shape().back() != d || phi_b.shape().back() != d ||
      (!single && phi_a.dim(0) != phi_b.dim(0))) {
    throw ShapeError("cross_attention: features " + to_string(phi_a.shape()) +
                     " and " + to_string(phi_b.shape()) +
                     " do not match block width " + std::to_string(d));
  }
  const Tensor a = single ? reshape(phi_a, {1, phi_a.dim(0), d}) : phi_a;
  const Tensor b = single ? reshape(phi_b, {1, phi_b.dim(0), d}) : phi_b;
  const std::size_t batch = a.dim(0), tq = a.dim(1), tk = b.dim(1);
  const std::size_t heads = block.heads(), dh = d / heads;

  const Tensor q = project(a, block.wq);
  const Tensor k = project(b, block.wk);
  const Tensor v = project(b, block.wv);
  const double inv_scale = 1.0 / std::sqrt(static_cast<double>(dh));

  std::vector<Tensor> head_out, head_probs;
  for (std::size_t h = 0; h < heads; ++h) {
    const Tensor qh = heads == 1 ? q : slice(q, 2, h * dh, dh);
    const Tensor kh = heads == 1 ? k : slice(k, 2, h * dh, dh);
    const Tensor vh = heads == 1 ? v : slice(v, 2, h * dh, dh);
    const Tensor p = softmax_t(scale(matmul(qh, transpose(kh)), inv_scale), 2, 1.0);
    head_out.push_back(matmul(p, vh));
    if (block.expose_probs_) head_probs.push_back(reshape(p, {batch, 1, tq, tk}));
  }
  if (block.expose_probs_) {
    block.last_probs_ = heads == 1 ? head_probs[0] : concat(head_probs, 1);
  }
  const Tensor merged = heads == 1 ? head_out[0] : concat(head_out, 2);
  const Tensor out = project(merged, block.wo);
  return single ? reshape(out, {tq, d}) : out;
}

Tensor self_attention(const Tensor& phi, const AttentionBlock& block) {
  return cross_attention(phi, phi, block);
}

AttentionLayer::AttentionLayer(std::size_t width, std::size_t heads,
                               std::size_t ffn_hidden, bool expose_probs)
    : attention(width, heads, expose_probs),
      norm1(width),
      ffn(width, ffn_hidden),
      norm2(width) {}

Tensor AttentionLayer::forward(const Tensor& query, const Tensor& context) const {
  const Tensor h = norm1.forward(add(query, cross_attention(query, context, attention)));
  return norm2.forward(add(h, ffn.forward(h)));
}

void AttentionLayer::collect(const std::string& prefix, ParamList& out) const {
  attention.collect(prefix, out);
  norm1.collect(prefix + ".ln1", out);
  ffn.collect(prefix + ".ffn", out);
  norm2.collect(prefix + ".ln2", out);
}

Tensor sinusoidal_encoding(std::size_t tokens, std::size_t width) {
  std::vector<double> values(tokens * width);
  for (std::size_t t = 0; t < tokens; ++t) {
    for (std::size_t j = 0; j < width; ++j) {
      const double rate =
          std::pow(10000.0, -static_cast<double>(2 * (j / 2)) / static_cast<double>(width));
      values[t * width + j] = j % 2 == 0 ? std::sin(t * rate) : std::cos(t * rate);
    }
  }
  return Tensor::from({tokens, width}, std::move(values));
}

// ---- TransformerStack -----------------------------------------------------

TransformerStack::TransformerStack(std::vector<std::string> modalities,
                                   const StackConfig& config)
    : modalities_(std::move(modalities)), config_(config) {
  const std::size_t m = modalities_.size();
  if (m < 2) throw ConfigError("multimodal stack needs at least 2 modalities");
  for (const auto& [src, dst] : cross_directions()) {
    auto& layers = cross_[{src, dst}];
    for (std::size_t l = 0; l < config.cross_depth; ++l) {
      layers.emplace_back(config.width, config.heads, config.ffn_hidden, false);
    }
  }
  for (const auto& name : modalities_) {
    fuse_.emplace(name, LinearLayer((m - 1) * config.width, config.width));
    auto& layers = self_[name];
    for (std::size_t l = 0; l < config.self_depth; ++l) {
      const bool last = l + 1 == config.self_depth;
      layers.emplace_back(config.width, config.heads, config.ffn_hidden, last);
    }
  }
}

std::vector<std::pair<std::string, std::string>>
TransformerStack::cross_directions() const {
  std::vector<std::pair<std::string, std::string>> out;
  for (const auto& dst : modalities_) {
    for (const auto& src : modalities_) {
      if (src != dst) out.emplace_back(src, dst);
    }
  }
  return out;
}

StackOutputs TransformerStack::forward(
    const std::map<std::string, Tensor>& tokens) const {
  for (const auto& name : modalities_) {
    auto it = tokens.find(name);
    if (it == tokens.end() || !it->second.defined()) {
      throw ContractError("multimodal stack is missing features for modality '" +
                          name + "'");
    }
  }
  StackOutputs out;
  for (const auto& dst : modalities_) {
    std::vector<Tensor> incoming;
    for (const auto& src : modalities_) {
      if (src == dst) continue;
      Tensor h = tokens.at(dst);
      for (const auto& layer : cross_.at({src, dst})) {
        h = layer.forward(h, tokens.at(src));
      }
      incoming.push_back(h);
      out.executed.emplace_back(src, dst);
    }
    Tensor h = fuse_.at(dst).forward(
        incoming.size() == 1 ? incoming[0] : concat(incoming, incoming[0].rank() - 1));
    const auto& self_layers = self_.at(dst);
    for (const auto& layer : self_layers) h = layer.forward(h, h);
    if (!self_layers.empty()) {
      out.self_probs.emplace(dst, self_layers.back().attention.probs());
    }
    out.fused.emplace(dst, h);
  }
  return out;
}

void TransformerStack::collect(const std::string& prefix, ParamList& out) const {
  for (const auto& [src, dst] : cross_directions()) {
    const auto& layers = cross_.at({src, dst});
    for (std::size_t l = 0; l < layers.size(); ++l) {
      layers[l].collect(prefix + ".cross." + src + "->" + dst + "." + std::to_string(l), out);
    }
  }
  for (const auto& name : modalities_) {
    fuse_.at(name).collect(prefix + ".fuse." + name, out);
    const auto& layers = self_.at(name);
    for (std::size_t l = 0; l < layers.size(); ++l) {
      layers[l].collect(prefix + ".self." + name + "." + std::to_string(l), out);
    }
  }
}

}  // namespace comodal
