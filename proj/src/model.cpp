#include "symape/model.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <stdexcept>

namespace symape {

ModelConfig ModelConfig::paper_preset() {
  ModelConfig c;
  c.num_layers = 6;
  c.num_heads = 8;
  c.d_model = 512;
  c.d_k = 64;
  c.d_v = 64;
  c.d_ff = 2048;
  c.p_drop = 0.1;
  c.max_len = 1024;
  return c;
}

ModelConfig ModelConfig::desk_preset() {
  ModelConfig c;
  c.num_layers = 2;
  c.num_heads = 2;
  c.d_model = 64;
  c.d_k = 32;
  c.d_v = 32;
  c.d_ff = 128;
  c.p_drop = 0.1;
  c.max_len = 128;
  return c;
}

void ModelConfig::validate() const {
  if (num_layers <= 0 || num_heads <= 0 || d_model <= 0 || d_k <= 0 ||
      d_v <= 0 || d_ff <= 0 || vocab_size <= 0 || max_len <= 0)
    throw std::invalid_argument("ModelConfig: all dimensions must be positive");
  if (d_model != num_heads * d_k)
    throw std::invalid_argument("ModelConfig: d_model must equal num_heads * d_k");
  if (p_drop < 0.0 || p_drop >= 1.0)
    throw std::invalid_argument("ModelConfig: p_drop must be in [0, 1)");
}

// ---------------------------------------------------------------------------
// batch assembly
// ---------------------------------------------------------------------------

namespace {

IdBatch pad_stream(const std::vector<const std::vector<int64_t>*>& rows) {
  IdBatch out;
  out.batch = static_cast<int64_t>(rows.size());
  out.len = 0;
  for (const auto* r : rows)
    out.len = std::max(out.len, static_cast<int64_t>(r->size()));
  out.len = std::max<int64_t>(out.len, 1);
  out.ids.assign(static_cast<size_t>(out.batch * out.len), Vocabulary::kPad);
  for (size_t b = 0; b < rows.size(); ++b) {
    std::copy(rows[b]->begin(), rows[b]->end(),
              out.ids.begin() + static_cast<int64_t>(b) * out.len);
    out.true_len.push_back(static_cast<int64_t>(rows[b]->size()));
  }
  return out;
}

}  // namespace

PaddedBatch PaddedBatch::make(const std::vector<TripleExample>& examples) {
  if (examples.empty())
    throw std::invalid_argument("PaddedBatch: batch must be nonempty");
  std::vector<const std::vector<int64_t>*> src, mt;
  std::vector<std::vector<int64_t>> dec_rows, tgt_rows;
  for (const auto& ex : examples) {
    src.push_back(&ex.src);
    mt.push_back(&ex.mt);
    std::vector<int64_t> dec_in{Vocabulary::kBos};
    dec_in.insert(dec_in.end(), ex.pe.begin(), ex.pe.end());
    std::vector<int64_t> tgt(ex.pe);
    tgt.push_back(Vocabulary::kEos);
    dec_rows.push_back(std::move(dec_in));
    tgt_rows.push_back(std::move(tgt));
  }

  PaddedBatch batch;
  batch.src = pad_stream(src);
  batch.mt = pad_stream(mt);
  std::vector<const std::vector<int64_t>*> dec_ptrs;
  for (const auto& r : dec_rows) dec_ptrs.push_back(&r);
  batch.dec = pad_stream(dec_ptrs);

  batch.targets.assign(static_cast<size_t>(batch.dec.batch * batch.dec.len),
                       Vocabulary::kPad);
  batch.target_mask.assign(batch.targets.size(), 0);
  for (size_t b = 0; b < tgt_rows.size(); ++b) {
    for (size_t t = 0; t < tgt_rows[b].size(); ++t) {
      const size_t at = b * static_cast<size_t>(batch.dec.len) + t;
      batch.targets[at] = tgt_rows[b][t];
      batch.target_mask[at] = 1;
      ++batch.token_count;
    }
  }
  return batch;
}

// ---------------------------------------------------------------------------
// parameters
// ---------------------------------------------------------------------------

namespace {

Tensor xavier(int64_t fan_in, int64_t fan_out, Rng& rng) {
  Tensor t = Tensor::zeros({fan_in, fan_out}, true);
  const double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  for (auto& v : t.values()) v = rng.uniform(-limit, limit);
  return t;
}

AttentionWeights make_attention(const ModelConfig& cfg, Rng& rng) {
  AttentionWeights w;
  w.wq = xavier(cfg.d_model, cfg.num_heads * cfg.d_k, rng);
  w.bq = Tensor::zeros({cfg.num_heads * cfg.d_k}, true);
  w.wk = xavier(cfg.d_model, cfg.num_heads * cfg.d_k, rng);
  w.bk = Tensor::zeros({cfg.num_heads * cfg.d_k}, true);
  w.wv = xavier(cfg.d_model, cfg.num_heads * cfg.d_v, rng);
  w.bv = Tensor::zeros({cfg.num_heads * cfg.d_v}, true);
  w.wo = xavier(cfg.num_heads * cfg.d_v, cfg.d_model, rng);
  w.bo = Tensor::zeros({cfg.d_model}, true);
  return w;
}

LayerNormWeights make_layer_norm(int64_t d) {
  LayerNormWeights w;
  w.gain = Tensor::full({d}, 1.0, true);
  w.bias = Tensor::zeros({d}, true);
  return w;
}

FeedForwardWeights make_ffn(const ModelConfig& cfg, Rng& rng) {
  FeedForwardWeights w;
  w.w1 = xavier(cfg.d_model, cfg.d_ff, rng);
  w.b1 = Tensor::zeros({cfg.d_ff}, true);
  w.w2 = xavier(cfg.d_ff, cfg.d_model, rng);
  w.b2 = Tensor::zeros({cfg.d_model}, true);
  return w;
}

void register_attention(std::vector<std::pair<std::string, Tensor>>& out,
                        const std::string& prefix, AttentionWeights& w) {
  out.emplace_back(prefix + ".wq", w.wq);
  out.emplace_back(prefix + ".bq", w.bq);
  out.emplace_back(prefix + ".wk", w.wk);
  out.emplace_back(prefix + ".bk", w.bk);
  out.emplace_back(prefix + ".wv", w.wv);
  out.emplace_back(prefix + ".bv", w.bv);
  out.emplace_back(prefix + ".wo", w.wo);
  out.emplace_back(prefix + ".bo", w.bo);
}

void register_ln(std::vector<std::pair<std::string, Tensor>>& out,
                 const std::string& prefix, LayerNormWeights& w) {
  out.emplace_back(prefix + ".gain", w.gain);
  out.emplace_back(prefix + ".bias", w.bias);
}

void register_ffn(std::vector<std::pair<std::string, Tensor>>& out,
                  const std::string& prefix, FeedForwardWeights& w) {
  out.emplace_back(prefix + ".w1", w.w1);
  out.emplace_back(prefix + ".b1", w.b1);
  out.emplace_back(prefix + ".w2", w.w2);
  out.emplace_back(prefix + ".b2", w.b2);
}

}  // namespace

ApeModel::ApeModel(const ModelConfig& config, uint64_t init_seed)
    : config_(config) {
  config_.validate();
  Rng rng(init_seed);

  params_.embedding = Tensor::zeros({config_.vocab_size, config_.d_model}, true);
  const double emb_std = 1.0 / std::sqrt(static_cast<double>(config_.d_model));
  for (auto& v : params_.embedding.values()) v = rng.normal() * emb_std;
  params_.gate_w = Tensor::zeros({config_.d_model}, true);
  params_.gate_b = Tensor::zeros({}, true);

  for (int64_t n = 0; n < config_.num_layers; ++n) {
    SourceLayerParams s;
    s.self_attn = make_attention(config_, rng);
    s.ln_self = make_layer_norm(config_.d_model);
    s.ffn = make_ffn(config_, rng);
    s.ln_ffn = make_layer_norm(config_.d_model);
    params_.src_layers.push_back(std::move(s));

    MtLayerParams m;
    m.self_attn = make_attention(config_, rng);
    m.ln_self = make_layer_norm(config_.d_model);
    m.cross_attn = make_attention(config_, rng);
    m.ln_cross = make_layer_norm(config_.d_model);
    m.ffn = make_ffn(config_, rng);
    m.ln_ffn = make_layer_norm(config_.d_model);
    params_.mt_layers.push_back(std::move(m));

    DecoderLayerParams d;
    d.self_attn = make_attention(config_, rng);
    d.ln_self = make_layer_norm(config_.d_model);
    d.cross_src = make_attention(config_, rng);
    d.cross_mt = make_attention(config_, rng);
    d.ln_cross = make_layer_norm(config_.d_model);
    d.ffn = make_ffn(config_, rng);
    d.ln_ffn = make_layer_norm(config_.d_model);
    params_.dec_layers.push_back(std::move(d));
  }

  positional_.assign(static_cast<size_t>(config_.max_len * config_.d_model), 0.0);
  for (int64_t pos = 0; pos < config_.max_len; ++pos)
    for (int64_t i = 0; i < config_.d_model; i += 2) {
      const double angle =
          static_cast<double>(pos) /
          std::pow(10000.0, static_cast<double>(i) /
                                static_cast<double>(config_.d_model));
      positional_[pos * config_.d_model + i] = std::sin(angle);
      if (i + 1 < config_.d_model)
        positional_[pos * config_.d_model + i + 1] = std::cos(angle);
    }
}

std::vector<std::pair<std::string, Tensor>> ApeModel::named_parameters() {
  std::vector<std::pair<std::string, Tensor>> out;
  out.emplace_back("embedding", params_.embedding);
  out.emplace_back("gate.w", params_.gate_w);
  out.emplace_back("gate.b", params_.gate_b);
  for (size_t n = 0; n < params_.src_layers.size(); ++n) {
    const std::string p = "src." + std::to_string(n);
    auto& layer = params_.src_layers[n];
    register_attention(out, p + ".self", layer.self_attn);
    register_ln(out, p + ".ln_self", layer.ln_self);
    register_ffn(out, p + ".ffn", layer.ffn);
    register_ln(out, p + ".ln_ffn", layer.ln_ffn);
  }
  for (size_t n = 0; n < params_.mt_layers.size(); ++n) {
    const std::string p = "mt." + std::to_string(n);
    auto& layer = params_.mt_layers[n];
    register_attention(out, p + ".self", layer.self_attn);
    register_ln(out, p + ".ln_self", layer.ln_self);
    register_attention(out, p + ".cross", layer.cross_attn);
    register_ln(out, p + ".ln_cross", layer.ln_cross);
    register_ffn(out, p + ".ffn", layer.ffn);
    register_ln(out, p + ".ln_ffn", layer.ln_ffn);
  }
  for (size_t n = 0; n < params_.dec_layers.size(); ++n) {
    const std::string p = "dec." + std::to_string(n);
    auto& layer = params_.dec_layers[n];
    register_attention(out, p + ".self", layer.self_attn);
    register_ln(out, p + ".ln_self", layer.ln_self);
    register_attention(out, p + ".cross_src", layer.cross_src);
    register_attention(out, p + ".cross_mt", layer.cross_mt);
    register_ln(out, p + ".ln_cross", layer.ln_cross);
    register_ffn(out, p + ".ffn", layer.ffn);
    register_ln(out, p + ".ln_ffn", layer.ln_ffn);
  }
  return out;
}

// ---------------------------------------------------------------------------
// forward pieces
// ---------------------------------------------------------------------------

Tensor merge_branches(const Tensor& branch_u, const Tensor& branch_v) {
  return scale(add(branch_u, branch_v), 0.5);
}

namespace {

// keep[b,h,i,j] = j is a true key position (and j <= i when causal).
Mask attention_mask(int64_t batch, int64_t heads, int64_t q_len, int64_t k_len,
                    const std::vector<int64_t>& key_true, bool causal) {
  Mask m;
  m.shape = {batch * heads, q_len, k_len};
  m.keep.assign(static_cast<size_t>(batch * heads * q_len * k_len), 0);
  size_t at = 0;
  for (int64_t b = 0; b < batch; ++b)
    for (int64_t h = 0; h < heads; ++h)
      for (int64_t i = 0; i < q_len; ++i)
        for (int64_t j = 0; j < k_len; ++j, ++at)
          m.keep[at] = j < key_true[static_cast<size_t>(b)] && (!causal || j <= i);
  return m;
}

struct MhaResult {
  Tensor out;
  Tensor probs;  // [B, H, Lq, Lk]
};

MhaResult multi_head_attention(const AttentionWeights& w, const Tensor& q_in,
                               const Tensor& kv_in,
                               const std::vector<int64_t>& key_true,
                               bool causal, const ModelConfig& cfg,
                               bool training, Rng* rng, bool zero_logits) {
  const int64_t B = q_in.dim(0), Lq = q_in.dim(1), Lk = kv_in.dim(1);
  const int64_t H = cfg.num_heads, dk = cfg.d_k, dv = cfg.d_v;
  if (kv_in.dim(0) != B)
    throw std::invalid_argument(
        "attention: batch size mismatch between query (" + std::to_string(B) +
        ") and key (" + std::to_string(kv_in.dim(0)) + ") streams");

  Tensor q = add_bias(matmul(q_in, w.wq), w.bq);
  Tensor k = add_bias(matmul(kv_in, w.wk), w.bk);
  Tensor v = add_bias(matmul(kv_in, w.wv), w.bv);

  Tensor qh = reshape(permute(reshape(q, {B, Lq, H, dk}), {0, 2, 1, 3}),
                      {B * H, Lq, dk});
  Tensor kh = reshape(permute(reshape(k, {B, Lk, H, dk}), {0, 2, 1, 3}),
                      {B * H, Lk, dk});
  Tensor vh = reshape(permute(reshape(v, {B, Lk, H, dv}), {0, 2, 1, 3}),
                      {B * H, Lk, dv});

  Tensor scores = scale(bmm(qh, transpose_last2(kh)),
                        1.0 / std::sqrt(static_cast<double>(dk)));
  if (zero_logits) scores = scale(scores, 0.0);

  const Mask mask = attention_mask(B, H, Lq, Lk, key_true, causal);
  Tensor probs = softmax_lastdim(scores, &mask);

  MhaResult res;
  res.probs = reshape(probs, {B, H, Lq, Lk});  // recorded pre-dropout

  Tensor probs_d = dropout(probs, cfg.p_drop, training, rng);
  Tensor ctx = bmm(probs_d, vh);  // [B*H, Lq, dv]
  Tensor ctx_merged = reshape(permute(reshape(ctx, {B, H, Lq, dv}), {0, 2, 1, 3}),
                              {B, Lq, H * dv});
  res.out = add_bias(matmul(ctx_merged, w.wo), w.bo);
  return res;
}

Tensor feed_forward(const FeedForwardWeights& w, const Tensor& x) {
  return add_bias(matmul(relu(add_bias(matmul(x, w.w1), w.b1)), w.w2), w.b2);
}

// Post-norm residual: LayerNorm(x + Dropout(sublayer_out)).
Tensor add_norm(const Tensor& x, const Tensor& sub_out,
                const LayerNormWeights& ln, const ModelConfig& cfg,
                bool training, Rng* rng) {
  return layer_norm(add(x, dropout(sub_out, cfg.p_drop, training, rng)),
                    ln.gain, ln.bias);
}

}  // namespace

Tensor ApeModel::embed(const IdBatch& batch, bool training, Rng* rng) {
  if (batch.len > config_.max_len)
    throw std::invalid_argument("embed: sequence length " +
                                std::to_string(batch.len) + " exceeds max_len " +
                                std::to_string(config_.max_len));
  Tensor e = embedding(params_.embedding, batch.ids, {batch.batch, batch.len});
  e = scale(e, std::sqrt(static_cast<double>(config_.d_model)));
  std::vector<double> pos(static_cast<size_t>(batch.batch * batch.len *
                                              config_.d_model));
  for (int64_t b = 0; b < batch.batch; ++b)
    std::copy_n(positional_.data(), batch.len * config_.d_model,
                pos.data() + b * batch.len * config_.d_model);
  Tensor pos_t = Tensor::from_vector({batch.batch, batch.len, config_.d_model},
                                     std::move(pos));
  return dropout(add(e, pos_t), config_.p_drop, training, rng);
}

Tensor ApeModel::encode_source(const IdBatch& src, bool training, Rng* rng) {
  Tensor x = embed(src, training, rng);
  for (const auto& layer : params_.src_layers) {
    MhaResult self = multi_head_attention(layer.self_attn, x, x, src.true_len,
                                          false, config_, training, rng,
                                          zero_attention_logits);
    x = add_norm(x, self.out, layer.ln_self, config_, training, rng);
    x = add_norm(x, feed_forward(layer.ffn, x), layer.ln_ffn, config_, training,
                 rng);
  }
  return x;
}

std::pair<Tensor, std::vector<AttentionRecord>> ApeModel::encode_mt(
    const IdBatch& mt, const Tensor& u, const std::vector<int64_t>& src_true,
    bool training, Rng* rng) {
  if (u.dim(0) != mt.batch)
    throw std::invalid_argument(
        "encode_mt: batch size mismatch with source representation");
  Tensor x = embed(mt, training, rng);
  std::vector<AttentionRecord> records;
  for (const auto& layer : params_.mt_layers) {
    MhaResult self = multi_head_attention(layer.self_attn, x, x, mt.true_len,
                                          false, config_, training, rng,
                                          zero_attention_logits);
    records.push_back({self.probs, mt.true_len});
    x = add_norm(x, self.out, layer.ln_self, config_, training, rng);
    MhaResult cross = multi_head_attention(layer.cross_attn, x, u, src_true,
                                           false, config_, training, rng,
                                           zero_attention_logits);
    x = add_norm(x, cross.out, layer.ln_cross, config_, training, rng);
    x = add_norm(x, feed_forward(layer.ffn, x), layer.ln_ffn, config_, training,
                 rng);
  }
  return {x, std::move(records)};
}

Tensor ApeModel::decode(const IdBatch& dec, const Tensor& u,
                        const std::vector<int64_t>& src_true, const Tensor& v,
                        const std::vector<int64_t>& mt_true, bool training,
                        Rng* rng) {
  if (dec.len <= 0 || dec.ids.empty())
    throw std::invalid_argument("decode: empty prefix (must start with BOS)");
  if (u.dim(0) != dec.batch || v.dim(0) != dec.batch)
    throw std::invalid_argument("decode: batch size mismatch with encoders");
  captured_branches.clear();

  Tensor x = embed(dec, training, rng);
  for (const auto& layer : params_.dec_layers) {
    MhaResult self = multi_head_attention(layer.self_attn, x, x, dec.true_len,
                                          true, config_, training, rng,
                                          zero_attention_logits);
    x = add_norm(x, self.out, layer.ln_self, config_, training, rng);

    MhaResult branch_u = multi_head_attention(layer.cross_src, x, u, src_true,
                                              false, config_, training, rng,
                                              zero_attention_logits);
    MhaResult branch_v = multi_head_attention(layer.cross_mt, x, v, mt_true,
                                              false, config_, training, rng,
                                              zero_attention_logits);
    if (capture_decoder_branches)
      captured_branches.emplace_back(branch_u.out, branch_v.out);
    x = add_norm(x, merge_branches(branch_u.out, branch_v.out), layer.ln_cross,
                 config_, training, rng);
    x = add_norm(x, feed_forward(layer.ffn, x), layer.ln_ffn, config_, training,
                 rng);
  }
  // Weight-tied output projection.
  return matmul(x, transpose_last2(params_.embedding));
}

ForwardOutput ApeModel::forward(const PaddedBatch& batch, bool training,
                                Rng* rng) {
  if (batch.src.batch == 0)
    throw std::invalid_argument("forward: batch must be nonempty");
  ForwardOutput out;
  Tensor u = encode_source(batch.src, training, rng);
  auto [v, records] = encode_mt(batch.mt, u, batch.src.true_len, training, rng);
  out.mt_output = v;
  out.attention = std::move(records);
  out.logits = decode(batch.dec, u, batch.src.true_len, v, batch.mt.true_len,
                      training, rng);
  return out;
}

// ---------------------------------------------------------------------------
// checkpointing
// ---------------------------------------------------------------------------

namespace {

constexpr char kMagic[8] = {'S', 'Y', 'M', 'A', 'P', 'E', 'C', '1'};

void write_i64(std::ostream& os, int64_t v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(v));
}

void write_f64(std::ostream& os, double v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(v));
}

int64_t read_i64(std::istream& is) {
  int64_t v = 0;
  is.read(reinterpret_cast<char*>(&v), sizeof(v));
  return v;
}

double read_f64(std::istream& is) {
  double v = 0;
  is.read(reinterpret_cast<char*>(&v), sizeof(v));
  return v;
}

}  // namespace

void save_checkpoint(ApeModel& model, const std::string& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("save_checkpoint: cannot open " + path);
  os.write(kMagic, sizeof(kMagic));
  const ModelConfig& c = model.config();
  write_i64(os, c.num_layers);
  write_i64(os, c.num_heads);
  write_i64(os, c.d_model);
  write_i64(os, c.d_k);
  write_i64(os, c.d_v);
  write_i64(os, c.d_ff);
  write_f64(os, c.p_drop);
  write_i64(os, c.vocab_size);
  write_i64(os, c.max_len);

  auto params = model.named_parameters();
  write_i64(os, static_cast<int64_t>(params.size()));
  for (auto& [name, tensor] : params) {
    write_i64(os, static_cast<int64_t>(name.size()));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    write_i64(os, tensor.rank());
    for (int i = 0; i < tensor.rank(); ++i) write_i64(os, tensor.dim(i));
    os.write(reinterpret_cast<const char*>(tensor.values().data()),
             static_cast<std::streamsize>(tensor.size() * sizeof(double)));
  }
  if (!os) throw std::runtime_error("save_checkpoint: write failed for " + path);
}

ApeModel load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("load_checkpoint: cannot open " + path);
  char magic[8];
  is.read(magic, sizeof(magic));
  if (!is || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0)
    throw std::runtime_error("load_checkpoint: " + path +
                             " is not a symape checkpoint");
  ModelConfig c;
  c.num_layers = read_i64(is);
  c.num_heads = read_i64(is);
  c.d_model = read_i64(is);
  c.d_k = read_i64(is);
  c.d_v = read_i64(is);
  c.d_ff = read_i64(is);
  c.p_drop = read_f64(is);
  c.vocab_size = read_i64(is);
  c.max_len = read_i64(is);

  ApeModel model(c, 0);
  auto params = model.named_parameters();
  const int64_t count = read_i64(is);
  if (count != static_cast<int64_t>(params.size()))
    throw std::runtime_error("load_checkpoint: parameter count mismatch");
  for (auto& [name, tensor] : params) {
    const int64_t name_len = read_i64(is);
    std::string stored(static_cast<size_t>(name_len), '\0');
    is.read(stored.data(), name_len);
    if (stored != name)
      throw std::runtime_error("load_checkpoint: expected parameter " + name +
                               ", found " + stored);
    const int64_t rank = read_i64(is);
    Shape shape(static_cast<size_t>(rank));
    for (auto& d : shape) d = read_i64(is);
    if (shape != tensor.shape())
      throw std::runtime_error("load_checkpoint: shape mismatch for " + name);
    is.read(reinterpret_cast<char*>(tensor.values().data()),
            static_cast<std::streamsize>(tensor.size() * sizeof(double)));
  }
  if (!is) throw std::runtime_error("load_checkpoint: truncated file " + path);
  return model;
}

}  // namespace symape
