#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "symape/data.hpp"
#include "symape/tensor.hpp"

namespace symape {

struct ModelConfig {
  int64_t num_layers = 2;
  int64_t num_heads = 2;
  int64_t d_model = 64;
  int64_t d_k = 32;
  int64_t d_v = 32;
  int64_t d_ff = 128;
  double p_drop = 0.1;
  int64_t vocab_size = 0;
  int64_t max_len = 128;

  static ModelConfig paper_preset();
  static ModelConfig desk_preset();
  void validate() const;  // d_model == num_heads * d_k, all dims positive
};

// Post-softmax self-attention of one MT-encoder layer, recorded before
// attention dropout. probs is [B, H, L_z, L_z]; rows at true query
// positions are distributions over the true key positions, padded keys
// carry probability exactly 0.
struct AttentionRecord {
  Tensor probs;
  std::vector<int64_t> true_len;
};

struct ForwardOutput {
  Tensor logits;     // [B, L_dec, vocab]
  Tensor mt_output;  // v: [B, L_z, d_model]
  std::vector<AttentionRecord> attention;  // one per MT-encoder layer
};

// A padded id batch for one stream; ids is row-major [batch x len].
struct IdBatch {
  std::vector<int64_t> ids;
  int64_t batch = 0;
  int64_t len = 0;
  std::vector<int64_t> true_len;
};

// Padded triples ready for forward(): encoder streams are bare; the
// decoder input is [BOS, y...] and targets are [y..., EOS].
struct PaddedBatch {
  IdBatch src;
  IdBatch mt;
  IdBatch dec;
  std::vector<int64_t> targets;      // [batch x dec.len]
  std::vector<uint8_t> target_mask;  // 1 at real target positions
  int64_t token_count = 0;           // real target tokens

  static PaddedBatch make(const std::vector<TripleExample>& examples);
};

struct AttentionWeights {
  Tensor wq, bq, wk, bk, wv, bv, wo, bo;
};

struct LayerNormWeights {
  Tensor gain, bias;
};

struct FeedForwardWeights {
  Tensor w1, b1, w2, b2;
};

struct SourceLayerParams {
  AttentionWeights self_attn;
  LayerNormWeights ln_self;
  FeedForwardWeights ffn;
  LayerNormWeights ln_ffn;
};

struct MtLayerParams {
  AttentionWeights self_attn;
  LayerNormWeights ln_self;
  AttentionWeights cross_attn;  // over the source representation u
  LayerNormWeights ln_cross;
  FeedForwardWeights ffn;
  LayerNormWeights ln_ffn;
};

struct DecoderLayerParams {
  AttentionWeights self_attn;
  LayerNormWeights ln_self;
  AttentionWeights cross_src;  // branch over u
  AttentionWeights cross_mt;   // branch over v
  LayerNormWeights ln_cross;
  FeedForwardWeights ffn;
  LayerNormWeights ln_ffn;
};

struct ModelParams {
  Tensor embedding;  // [vocab, d_model], tied input/output
  Tensor gate_w;     // [d_model]
  Tensor gate_b;     // scalar
  std::vector<SourceLayerParams> src_layers;
  std::vector<MtLayerParams> mt_layers;
  std::vector<DecoderLayerParams> dec_layers;
};

// Multi-encoder APE transformer: a source-text encoder and an MT encoder
// that cross-attends the source (joint-final conditioning), plus a
// decoder whose two cross-attention branches over u and v are averaged.
class ApeModel {
 public:
  ApeModel(const ModelConfig& config, uint64_t init_seed);

  Tensor encode_source(const IdBatch& src, bool training, Rng* rng);
  std::pair<Tensor, std::vector<AttentionRecord>> encode_mt(
      const IdBatch& mt, const Tensor& u, const std::vector<int64_t>& src_true,
      bool training, Rng* rng);
  Tensor decode(const IdBatch& dec, const Tensor& u,
                const std::vector<int64_t>& src_true, const Tensor& v,
                const std::vector<int64_t>& mt_true, bool training, Rng* rng);
  ForwardOutput forward(const PaddedBatch& batch, bool training, Rng* rng);

  // Checkpoint order; stable across save/load.
  std::vector<std::pair<std::string, Tensor>> named_parameters();

  const ModelConfig& config() const { return config_; }
  ModelParams& params() { return params_; }

  // Test hooks.
  bool zero_attention_logits = false;  // forces uniform attention rows
  bool capture_decoder_branches = false;
  std::vector<std::pair<Tensor, Tensor>> captured_branches;

 private:
  Tensor embed(const IdBatch& batch, bool training, Rng* rng);

  ModelConfig config_;
  ModelParams params_;
  std::vector<double> positional_;  // [max_len x d_model]
};

// Elementwise mean of the two decoder cross-attention branches; kept as
// a seam so a different merge is a one-line change.
Tensor merge_branches(const Tensor& branch_u, const Tensor& branch_v);

void save_checkpoint(ApeModel& model, const std::string& path);
ApeModel load_checkpoint(const std::string& path);

}  // namespace symape
