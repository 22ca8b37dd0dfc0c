// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "comodal/tensor.hpp"

namespace comodal {

enum class InitKind { glorot, zero, one };

/// A trainable tensor together with its registry path and init recipe.
struct ParamRef {
  std::string name;
  Tensor tensor;
  InitKind init = InitKind::glorot;
  std::size_t fan_in = 1;
  std::size_t fan_out = 1;
};

using ParamList = std::vector<ParamRef>;

/// Glorot-uniform weights with a = sqrt(6 / (fan_in + fan_out)), zero biases,
/// unit norm gains. Each parameter draws from a stream keyed by its name, so
/// a parameter's initial value does not depend on which other modules exist.
void init_params(ParamList& params, std::uint64_t seed);

class LinearLayer {
 public:
  LinearLayer() = default;
  LinearLayer(std::size_t d_in, std::size_t d_out);

  /// x[... x d_in] -> [... x d_out]
  Tensor forward(const Tensor& x) const;
  void collect(const std::string& prefix, ParamList& out) const;

  std::size_t in_features() const { return weight.dim(0); }
  std::size_t out_features() const { return weight.dim(1); }

  Tensor weight;  // [d_in x d_out]
  Tensor bias;    // [d_out]
};

class Conv1dLayer {
 public:
  Conv1dLayer() = default;
  Conv1dLayer(std::size_t c_in, std::size_t c_out, std::size_t kernel,
              std::size_t stride = 1, std::size_t padding = 0);

  Tensor forward(const Tensor& x) const;
  void collect(const std::string& prefix, ParamList& out) const;
  std::size_t output_length(std::size_t length) const;

  Tensor kernels;  // [c_out x c_in x k]
  Tensor bias;     // [c_out]
  std::size_t stride = 1;
  std::size_t padding = 0;
};

class LayerNorm {
 public:
  LayerNorm() = default;
  explicit LayerNorm(std::size_t width);
  Tensor forward(const Tensor& x) const;
  void collect(const std::string& prefix, ParamList& out) const;

  Tensor gain;
  Tensor bias;
};

class FeedForward {
 public:
  FeedForward() = default;
  FeedForward(std::size_t width, std::size_t hidden);
  Tensor forward(const Tensor& x) const;
  void collect(const std::string& prefix, ParamList& out) const;

  LinearLayer expand;
  LinearLayer contract;
};

/// Query/key/value/output projections of one attention block.
class AttentionBlock {
 public:
  AttentionBlock() = default;
  AttentionBlock(std::size_t width, std::size_t heads, bool expose_probs = false);

  std::size_t width() const { return wq.dim(0); }
  std::size_t heads() const { return heads_; }
  bool exposes_probs() const { return expose_probs_; }

  /// Softmax probabilities of the last forward, [B x heads x T_q x T_k].
  /// Throws CapabilityError when the block does not expose them.
  const Tensor& probs() const;

  void collect(const std::string& prefix, ParamList& out) const;

  Tensor wq, wk, wv, wo;  // each [d x d]

 private:
  friend Tensor cross_attention(const Tensor&, const Tensor&,
                                const AttentionBlock&);
  std::size_t heads_ = 1;
  bool expose_probs_ = false;
  mutable Tensor last_probs_;
};

/// Queries from phi_a, keys and values from phi_b. Accepts [T x d] or
/// batched [B x T x d]; the output has phi_a's token count.
Tensor cross_attention(const Tensor& phi_a, const Tensor& phi_b,
                       const AttentionBlock& block);
Tensor self_attention(const Tensor& phi, const AttentionBlock& block);

/// Attention and feed-forward sublayers, each wrapped in a residual
/// connection followed by layer normalization.
class AttentionLayer {
 public:
  AttentionLayer() = default;
  AttentionLayer(std::size_t width, std::size_t heads, std::size_t ffn_hidden,
                 bool expose_probs);

  Tensor forward(const Tensor& query, const Tensor& context) const;
  void collect(const std::string& prefix, ParamList& out) const;

  AttentionBlock attention;
  LayerNorm norm1;
  FeedForward ffn;
  LayerNorm norm2;
};

/// [T x d] fixed sinusoidal position code.
Tensor sinusoidal_encoding(std::size_t tokens, std::size_t width);

struct StackConfig {
  std::size_t width = 16;
  std::size_t heads = 1;
  std::size_t cross_depth = 1;
  std::size_t self_depth = 1;
  std::size_t ffn_hidden = 32;
};

struct StackOutputs {
  std::map<std::string, Tensor> fused;  // per destination, [B x T x d]
  // Probabilities of the final self block per modality; empty when the
  // stack has no self blocks.
  std::map<std::string, Tensor> self_probs;
  std::vector<std::pair<std::string, std::string>> executed;  // (src, dst)
};

/// Pairwise cross-modal blocks for every ordered (src, dst) pair, a
/// concatenate-then-project fusion per destination, then optional per-modality
/// self-attention blocks.
class TransformerStack {
 public:
  TransformerStack() = default;
  TransformerStack(std::vector<std::string> modalities, const StackConfig& config);

  const std::vector<std::string>& modalities() const { return modalities_; }
  std::vector<std::pair<std::string, std::string>> cross_directions() const;
  std::size_t width() const { return config_.width; }
  const StackConfig& config() const { return config_; }

  StackOutputs forward(const std::map<std::string, Tensor>& tokens) const;
  void collect(const std::string& prefix, ParamList& out) const;

 private:
  std::vector<std::string> modalities_;
  StackConfig config_;
  std::map<std::pair<std::string, std::string>, std::vector<AttentionLayer>> cross_;
  std::map<std::string, LinearLayer> fuse_;
  std::map<std::string, std::vector<AttentionLayer>> self_;
};

}  // namespace comodal
