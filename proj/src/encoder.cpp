#include "freqtune/encoder.hpp"

#include <cmath>
#include <numeric>

#include "freqtune/error.hpp"
#include "freqtune/random.hpp"

namespace freqtune {

void EncoderConfig::validate() const {
  if (vocab_size <= special::kCount) throw UsageError("encoder: vocab_size must exceed the special tokens");
  if (dim <= 0 || layers < 0 || heads <= 0 || ffn_dim <= 0 || max_len < 2)
    throw UsageError("encoder: dimensions must be positive");
  if (dim % heads != 0)
    throw UsageError("encoder: dim " + std::to_string(dim) + " is not divisible by heads " +
                     std::to_string(heads));
  if (dropout < 0.0 || dropout >= 1.0) throw UsageError("encoder: dropout must be in [0, 1)");
}

namespace {

RealTensor normal_init(Rng& rng, Index rows, Index cols, double stddev) {
  RealMatrix m(rows, cols);
  for (Index i = 0; i < m.size(); ++i) m.data()[i] = stddev * rng.normal();
  return RealTensor::from_matrix(std::move(m), true);
}

RealTensor constant_row(Index n, Real v) {
  return RealTensor(Shape{n}, RealMatrix::Constant(1, n, v), true);
}

}  // namespace

EncoderParams EncoderParams::initialize(const EncoderConfig& config, std::uint64_t seed) {
  config.validate();
  Rng rng(derive_seed({seed, 0x656e63}));
  const double s = config.init_std;
  const Index d = config.dim, f = config.ffn_dim;
  EncoderParams p;
  p.config = config;
  p.token_embedding = normal_init(rng, config.vocab_size, d, s);
  p.position_embedding = normal_init(rng, config.max_len, d, s);
  p.embedding_norm_scale = constant_row(d, 1.0);
  p.embedding_norm_shift = constant_row(d, 0.0);
  for (Index l = 0; l < config.layers; ++l) {
    EncoderLayer layer;
    layer.query_weight = normal_init(rng, d, d, s);
    layer.query_bias = constant_row(d, 0.0);
    layer.key_weight = normal_init(rng, d, d, s);
    layer.key_bias = constant_row(d, 0.0);
    layer.value_weight = normal_init(rng, d, d, s);
    layer.value_bias = constant_row(d, 0.0);
    layer.output_weight = normal_init(rng, d, d, s);
    layer.output_bias = constant_row(d, 0.0);
    layer.attention_norm_scale = constant_row(d, 1.0);
    layer.attention_norm_shift = constant_row(d, 0.0);
    layer.ffn_in_weight = normal_init(rng, d, f, s);
    layer.ffn_in_bias = constant_row(f, 0.0);
    layer.ffn_out_weight = normal_init(rng, f, d, s);
    layer.ffn_out_bias = constant_row(d, 0.0);
    layer.ffn_norm_scale = constant_row(d, 1.0);
    layer.ffn_norm_shift = constant_row(d, 0.0);
    p.layers.push_back(std::move(layer));
  }
  return p;
}

std::vector<NamedTensor> EncoderParams::named_parameters() const {
  std::vector<NamedTensor> out{
      {"encoder.token_embedding", token_embedding},
      {"encoder.position_embedding", position_embedding},
      {"encoder.embedding_norm.scale", embedding_norm_scale},
      {"encoder.embedding_norm.shift", embedding_norm_shift},
  };
  for (std::size_t l = 0; l < layers.size(); ++l) {
    const auto& L = layers[l];
    const std::string p = "encoder.layer" + std::to_string(l) + ".";
    out.push_back({p + "attention.query.weight", L.query_weight});
    out.push_back({p + "attention.query.bias", L.query_bias});
    out.push_back({p + "attention.key.weight", L.key_weight});
    out.push_back({p + "attention.key.bias", L.key_bias});
    out.push_back({p + "attention.value.weight", L.value_weight});
    out.push_back({p + "attention.value.bias", L.value_bias});
    out.push_back({p + "attention.output.weight", L.output_weight});
    out.push_back({p + "attention.output.bias", L.output_bias});
    out.push_back({p + "attention_norm.scale", L.attention_norm_scale});
    out.push_back({p + "attention_norm.shift", L.attention_norm_shift});
    out.push_back({p + "ffn.in.weight", L.ffn_in_weight});
    out.push_back({p + "ffn.in.bias", L.ffn_in_bias});
    out.push_back({p + "ffn.out.weight", L.ffn_out_weight});
    out.push_back({p + "ffn.out.bias", L.ffn_out_bias});
    out.push_back({p + "ffn_norm.scale", L.ffn_norm_scale});
    out.push_back({p + "ffn_norm.shift", L.ffn_norm_shift});
  }
  return out;
}

RealTensor EncodedBatch::hidden_tensor() const {
  RealMatrix stacked(batch_size() * seq_len, dim);
  for (Index i = 0; i < batch_size(); ++i)
    stacked.middleRows(i * seq_len, seq_len) = hidden[static_cast<std::size_t>(i)].value();
  return RealTensor(Shape{batch_size(), seq_len, dim}, std::move(stacked), false);
}

std::vector<Index> EncodedBatch::content_positions(Index i) const {
  std::vector<Index> pos;
  const auto& s = ids.at(static_cast<std::size_t>(i));
  for (std::size_t t = 0; t < s.size(); ++t)
    if (is_content(s[t])) pos.push_back(static_cast<Index>(t));
  return pos;
}

namespace {

RealTensor affine(const RealTensor& x, const RealTensor& w, const RealTensor& b) {
  return add(matmul(x, w), b);
}

// Sites at which hidden dropout is applied, for seed derivation.
std::uint64_t dropout_site(Index layer, int slot) { return 1 + 2 * static_cast<std::uint64_t>(layer) + slot; }

struct SentencePass {
  RealTensor hidden;
  std::vector<RealMatrix> attention;  // per layer
};

SentencePass encode_one(const std::vector<TokenId>& ids, const EncoderParams& params,
                        const EncodeOptions& options, Index sentence,
                        const std::vector<Index>* cutoff_dims) {
  const auto& cfg = params.config;
  const Index T = static_cast<Index>(ids.size());
  const Index dh = cfg.dim / cfg.heads;
  const Real attn_scale = Real{1} / std::sqrt(static_cast<Real>(dh));
  const auto seed_for = [&](std::uint64_t site) {
    return derive_seed({options.dropout_seed, static_cast<std::uint64_t>(sentence), site});
  };

  Mask keep(1, T);
  for (Index t = 0; t < T; ++t) keep(0, t) = ids[static_cast<std::size_t>(t)] != special::kPad;

  std::vector<Index> positions(static_cast<std::size_t>(T));
  std::iota(positions.begin(), positions.end(), Index{0});

  RealTensor x = add(embedding_lookup(params.token_embedding, std::span<const Index>(ids)),
                     embedding_lookup(params.position_embedding, std::span<const Index>(positions)));
  x = layer_norm(x, params.embedding_norm_scale, params.embedding_norm_shift, cfg.layer_norm_eps);
  if (cutoff_dims && !cutoff_dims->empty()) {
    RealMatrix m = RealMatrix::Ones(1, cfg.dim);
    for (Index d : *cutoff_dims) m(0, d) = 0.0;
    x = multiply(x, RealTensor(Shape{cfg.dim}, std::move(m), false));
  }
  x = dropout(x, cfg.dropout, seed_for(0), options.train);

  SentencePass pass;
  for (std::size_t l = 0; l < params.layers.size(); ++l) {
    const auto& L = params.layers[l];
    const RealTensor q = affine(x, L.query_weight, L.query_bias);
    const RealTensor k = affine(x, L.key_weight, L.key_bias);
    const RealTensor v = affine(x, L.value_weight, L.value_bias);
    std::vector<RealTensor> heads;
    RealMatrix weights(cfg.heads * T, T);
    for (Index h = 0; h < cfg.heads; ++h) {
      const RealTensor qh = slice(q, 1, h * dh, (h + 1) * dh);
      const RealTensor kh = slice(k, 1, h * dh, (h + 1) * dh);
      const RealTensor vh = slice(v, 1, h * dh, (h + 1) * dh);
      const RealTensor p = softmax(scale(matmul(qh, transpose(kh)), attn_scale), &keep);
      if (options.retain_attention) weights.middleRows(h * T, T) = p.value();
      heads.push_back(matmul(p, vh));
    }
    if (options.retain_attention) pass.attention.push_back(std::move(weights));
    RealTensor attn = affine(concat(heads, 1), L.output_weight, L.output_bias);
    attn = dropout(attn, cfg.dropout, seed_for(dropout_site(static_cast<Index>(l), 0)), options.train);
    x = layer_norm(add(x, attn), L.attention_norm_scale, L.attention_norm_shift, cfg.layer_norm_eps);

    RealTensor f = relu(affine(x, L.ffn_in_weight, L.ffn_in_bias));
    f = affine(f, L.ffn_out_weight, L.ffn_out_bias);
    f = dropout(f, cfg.dropout, seed_for(dropout_site(static_cast<Index>(l), 1)), options.train);
    x = layer_norm(add(x, f), L.ffn_norm_scale, L.ffn_norm_shift, cfg.layer_norm_eps);
  }
  pass.hidden = x;
  return pass;
}

}  // namespace

EncodedBatch encode(std::span<const std::vector<TokenId>> batch, const EncoderParams& params,
                    const EncodeOptions& options) {
  const auto& cfg = params.config;
  if (batch.empty()) throw UsageError("encode: empty batch");
  if (!options.feature_cutoff.empty() && options.feature_cutoff.size() != batch.size())
    throw UsageError("encode: feature cutoff given for " + std::to_string(options.feature_cutoff.size()) +
                     " of " + std::to_string(batch.size()) + " sentences");

  EncodedBatch out;
  out.dim = cfg.dim;
  out.heads = cfg.heads;
  for (std::size_t i = 0; i < batch.size(); ++i) {
    // Trailing PADs do not count against the length limit.
    Index len = static_cast<Index>(batch[i].size());
    while (len > 0 && batch[i][static_cast<std::size_t>(len - 1)] == special::kPad) --len;
    if (len > cfg.max_len)
      throw UsageError("encode: sentence " + std::to_string(i) + " has " + std::to_string(len) +
                       " tokens, limit is " + std::to_string(cfg.max_len));
    if (len == 0) throw UsageError("encode: sentence " + std::to_string(i) + " is empty");
    out.seq_len = std::max(out.seq_len, len);
  }
  for (std::size_t i = 0; i < batch.size(); ++i) {
    std::vector<TokenId> padded(batch[i].begin(), batch[i].end());
    padded.resize(static_cast<std::size_t>(out.seq_len), special::kPad);
    for (std::size_t t = 0; t < padded.size(); ++t)
      if (padded[t] < 0 || padded[t] >= cfg.vocab_size)
        throw UsageError("encode: sentence " + std::to_string(i) + " position " + std::to_string(t) +
                         " has id " + std::to_string(padded[t]) + " outside the vocabulary");
    out.ids.push_back(std::move(padded));
  }

  const Index B = static_cast<Index>(batch.size());
  out.attention_mask.resize(B, out.seq_len);
  if (options.retain_attention) out.attention.assign(params.layers.size(), {});
  for (Index i = 0; i < B; ++i) {
    const auto& ids = out.ids[static_cast<std::size_t>(i)];
    for (Index t = 0; t < out.seq_len; ++t) out.attention_mask(i, t) = ids[static_cast<std::size_t>(t)] != special::kPad;
    const std::vector<Index>* cutoff =
        options.feature_cutoff.empty() ? nullptr : &options.feature_cutoff[static_cast<std::size_t>(i)];
    if (cutoff)
      for (Index d : *cutoff)
        if (d < 0 || d >= cfg.dim) throw UsageError("encode: feature cutoff dimension out of range");
    SentencePass pass = encode_one(ids, params, options, i, cutoff);
    out.hidden.push_back(pass.hidden);
    for (std::size_t l = 0; l < pass.attention.size(); ++l)
      out.attention[l].push_back(std::move(pass.attention[l]));
  }
  return out;
}

RealTensor mean_pool(const RealTensor& hidden, std::span<const TokenId> ids) {
  if (static_cast<Index>(ids.size()) != hidden.rows())
    throw ShapeError("mean_pool: " + std::to_string(ids.size()) + " ids for " +
                     std::to_string(hidden.rows()) + " rows");
  std::vector<Index> rows;
  for (std::size_t t = 0; t < ids.size(); ++t)
    if (is_content(ids[t])) rows.push_back(static_cast<Index>(t));
  if (rows.empty()) throw UsageError("mean_pool: sentence has no content tokens");
  return mean_rows(hidden, std::span<const Index>(rows));
}

RealTensor sentence_embedding(const EncodedBatch& batch) {
  std::vector<RealTensor> rows;
  rows.reserve(batch.hidden.size());
  for (std::size_t i = 0; i < batch.hidden.size(); ++i) {
    try {
      rows.push_back(mean_pool(batch.hidden[i], batch.ids[i]));
    } catch (const UsageError&) {
      throw UsageError("sentence_embedding: sentence " + std::to_string(i) + " has no content tokens");
    }
  }
  return concat(rows, 0);
}

RealTensor dump_attention(const EncodedBatch& batch, Index layer) {
  if (batch.attention.empty())
    throw UsageError("dump_attention: attention retention was not requested at encode time");
  if (layer < 0 || layer >= static_cast<Index>(batch.attention.size()))
    throw UsageError("dump_attention: layer " + std::to_string(layer) + " out of range");
  const auto& per_sentence = batch.attention[static_cast<std::size_t>(layer)];
  const Index B = batch.batch_size(), T = batch.seq_len, H = batch.heads;
  RealMatrix stacked(B * H * T, T);
  for (Index i = 0; i < B; ++i) stacked.middleRows(i * H * T, H * T) = per_sentence[static_cast<std::size_t>(i)];
  return RealTensor(Shape{B, H, T, T}, std::move(stacked), false);
}

}  // namespace freqtune
