#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "freqtune/ops.hpp"
#include "freqtune/tensor.hpp"
#include "freqtune/vocab.hpp"

namespace freqtune {

using Real = double;
using RealTensor = Tensor<Real>;
using RealMatrix = Matrix<Real>;

struct NamedTensor {
  std::string name;
  RealTensor tensor;
};

/// Post-norm transformer encoder hyper-parameters.
struct EncoderConfig {
  Index vocab_size = 0;
  Index dim = 64;
  Index layers = 2;
  Index heads = 4;
  Index ffn_dim = 256;
  Index max_len = 64;
  double dropout = 0.1;
  double init_std = 0.02;
  double layer_norm_eps = 1e-5;

  void validate() const;
  friend bool operator==(const EncoderConfig&, const EncoderConfig&) = default;
};

struct EncoderLayer {
  RealTensor query_weight, query_bias;
  RealTensor key_weight, key_bias;
  RealTensor value_weight, value_bias;
  RealTensor output_weight, output_bias;
  RealTensor attention_norm_scale, attention_norm_shift;
  RealTensor ffn_in_weight, ffn_in_bias;
  RealTensor ffn_out_weight, ffn_out_bias;
  RealTensor ffn_norm_scale, ffn_norm_shift;
};

/// All trainable encoder weights. Every tensor requires grad.
struct EncoderParams {
  EncoderConfig config;
  RealTensor token_embedding;     // vocab_size x dim
  RealTensor position_embedding;  // max_len x dim
  RealTensor embedding_norm_scale, embedding_norm_shift;
  std::vector<EncoderLayer> layers;

  /// Normal(0, init_std) weights, zero biases, unit norm scales.
  static EncoderParams initialize(const EncoderConfig& config, std::uint64_t seed);

  /// Stable, documented order; names are used as checkpoint block names.
  std::vector<NamedTensor> named_parameters() const;
};

struct EncodeOptions {
  bool train = false;
  std::uint64_t dropout_seed = 0;
  bool retain_attention = false;
  /// Per sentence, embedding dimensions zeroed after the embedding layer
  /// (feature cutoff). Empty span or empty entries mean no cutoff.
  std::span<const std::vector<Index>> feature_cutoff = {};
};

/// Contextual token embeddings for a padded batch.
struct EncodedBatch {
  Index seq_len = 0;
  Index dim = 0;
  Index heads = 0;
  std::vector<std::vector<TokenId>> ids;  ///< padded to seq_len with PAD
  std::vector<RealTensor> hidden;         ///< per sentence, seq_len x dim
  Mask attention_mask;                    ///< batch x seq_len, true = non-PAD
  /// [layer][sentence] -> (heads * seq_len) x seq_len softmax weights; filled
  /// only when retention was requested.
  std::vector<std::vector<RealMatrix>> attention;

  Index batch_size() const { return static_cast<Index>(hidden.size()); }
  /// Detached B x T x D copy of `hidden`.
  RealTensor hidden_tensor() const;
  /// Positions of sentence `i` holding content tokens (not PAD/CLS/SEP).
  std::vector<Index> content_positions(Index i) const;
};

/// Runs the encoder on each sentence. Sequences of unequal length are padded
/// with PAD. Deterministic in (params, batch, options).
EncodedBatch encode(std::span<const std::vector<TokenId>> batch, const EncoderParams& params,
                    const EncodeOptions& options = {});

/// Masked average of the rows of `hidden` at content positions of `ids`;
/// returns 1 x D. Throws UsageError when there is no content token.
RealTensor mean_pool(const RealTensor& hidden, std::span<const TokenId> ids);

/// Sentence embeddings (B x D), differentiable through the encoder.
RealTensor sentence_embedding(const EncodedBatch& batch);

/// Softmax weights of `layer` as a B x heads x T x T tensor.
RealTensor dump_attention(const EncodedBatch& batch, Index layer);

}  // namespace freqtune
