#include "retro/model.hpp"

#include <algorithm>
#include <cmath>
#include <random>

#include "retro/binary_io.hpp"
#include "retro/hashing.hpp"

namespace retro {

// ---------------------------------------------------------------------------
// config

void ModelConfig::validate() const {
  if (n_layers < 1 || hidden < 1 || n_heads < 1) throw ConfigError("model: layers/hidden/heads must be positive");
  if (hidden % n_heads != 0) throw ConfigError("model: hidden must be divisible by n_heads");
  if (chunk_size < 1) throw ConfigError("model: chunk_size must be >= 1");
  if (max_seq < chunk_size || max_seq % chunk_size != 0) {
    throw ConfigError("model: max_seq must be a positive multiple of chunk_size");
  }
  if (k_neighbors < 0) throw ConfigError("model: k_neighbors must be >= 0");
  if (enc_layers < 0) throw ConfigError("model: enc_layers must be >= 0");
  if (neighbor_len < 1) throw ConfigError("model: neighbor_len must be >= 1");
  if (vocab < static_cast<int>(kVocabSize)) throw ConfigError("model: vocab must cover the tokenizer");
  for (int l : cca_layers) {
    if (l < 1 || l > n_layers) throw ConfigError("model: cca layer " + std::to_string(l) + " outside [1, n_layers]");
  }
}

bool ModelConfig::has_cca(int layer_index0) const {
  return std::find(cca_layers.begin(), cca_layers.end(), layer_index0 + 1) != cca_layers.end();
}

nlohmann::json ModelConfig::to_json() const {
  return {{"n_layers", n_layers},         {"hidden", hidden},         {"n_heads", n_heads},
          {"chunk_size", chunk_size},     {"k_neighbors", k_neighbors}, {"cca_layers", cca_layers},
          {"enc_layers", enc_layers},     {"max_seq", max_seq},       {"vocab", vocab},
          {"neighbor_len", neighbor_len}, {"ln_eps", ln_eps},         {"init_std", init_std}};
}

ModelConfig ModelConfig::from_json(const nlohmann::json& j) {
  ModelConfig c = desk_default();
  bool cca_given = false;
  for (const auto& [key, v] : j.items()) {
    if (key == "n_layers") c.n_layers = v.get<int>();
    else if (key == "hidden") c.hidden = v.get<int>();
    else if (key == "n_heads") c.n_heads = v.get<int>();
    else if (key == "chunk_size") c.chunk_size = v.get<int>();
    else if (key == "k_neighbors") c.k_neighbors = v.get<int>();
    else if (key == "cca_layers") {
      c.cca_layers = v.get<std::vector<int>>();
      cca_given = true;
    } else if (key == "enc_layers") c.enc_layers = v.get<int>();
    else if (key == "max_seq") c.max_seq = v.get<int>();
    else if (key == "vocab") c.vocab = v.get<int>();
    else if (key == "neighbor_len") c.neighbor_len = v.get<int>();
    else if (key == "ln_eps") c.ln_eps = v.get<double>();
    else if (key == "init_std") c.init_std = v.get<double>();
    else throw ConfigError("model: unknown key '" + key + "'");
  }
  if (!cca_given) {
    c.cca_layers.clear();
    for (int l = 2; l <= c.n_layers; ++l) c.cca_layers.push_back(l);
  }
  if (!j.contains("neighbor_len")) c.neighbor_len = 2 * c.chunk_size;
  c.validate();
  return c;
}

ModelConfig ModelConfig::desk_default() {
  ModelConfig c;
  c.n_layers = 4;
  c.hidden = 128;
  c.n_heads = 4;
  c.chunk_size = 64;
  c.max_seq = 256;
  c.neighbor_len = 2 * c.chunk_size;
  for (int l = 2; l <= c.n_layers; ++l) c.cca_layers.push_back(l);
  return c;
}

ModelConfig ModelConfig::as_gpt() const {
  ModelConfig c = *this;
  c.cca_layers.clear();
  return c;
}

// ---------------------------------------------------------------------------
// parameters

namespace {

template <typename Scalar, typename F>
void visit(RetroParams<Scalar>& p, F&& f) {
  f("tok_emb", p.tok_emb);
  f("pos_emb", p.pos_emb);
  auto attn = [&](const std::string& pre, AttentionParams<Scalar>& a) {
    f(pre + ".wq", a.wq); f(pre + ".bq", a.bq);
    f(pre + ".wk", a.wk); f(pre + ".bk", a.bk);
    f(pre + ".wv", a.wv); f(pre + ".bv", a.bv);
    f(pre + ".wo", a.wo); f(pre + ".bo", a.bo);
  };
  auto norm = [&](const std::string& pre, NormParams<Scalar>& n) {
    f(pre + ".gain", n.gain);
    f(pre + ".bias", n.bias);
  };
  auto mlp = [&](const std::string& pre, MlpParams<Scalar>& m) {
    f(pre + ".w1", m.w1); f(pre + ".b1", m.b1);
    f(pre + ".w2", m.w2); f(pre + ".b2", m.b2);
  };
  for (std::size_t i = 0; i < p.layers.size(); ++i) {
    const std::string pre = "dec" + std::to_string(i);
    auto& l = p.layers[i];
    norm(pre + ".ln_attn", l.ln_attn);
    attn(pre + ".attn", l.attn);
    if (l.has_cca) {
      norm(pre + ".ln_cca", l.ln_cca);
      attn(pre + ".cca", l.cca);
    }
    norm(pre + ".ln_mlp", l.ln_mlp);
    mlp(pre + ".mlp", l.mlp);
  }
  norm("ln_final", p.ln_final);
  if (!p.config.is_gpt()) {
    f("enc.tok_emb", p.enc_tok_emb);
    f("enc.pos_emb", p.enc_pos_emb);
    for (std::size_t i = 0; i < p.enc_layers.size(); ++i) {
      const std::string pre = "enc" + std::to_string(i);
      auto& l = p.enc_layers[i];
      norm(pre + ".ln_attn", l.ln_attn);
      attn(pre + ".attn", l.attn);
      norm(pre + ".ln_mlp", l.ln_mlp);
      mlp(pre + ".mlp", l.mlp);
    }
    norm("enc.ln_final", p.enc_ln_final);
  }
}

template <typename Scalar>
RetroParams<Scalar> allocate(const ModelConfig& c) {
  c.validate();
  const int h = c.hidden;
  auto attn = [h]() {
    AttentionParams<Scalar> a;
    for (auto* w : {&a.wq, &a.wk, &a.wv, &a.wo}) w->setZero(h, h);
    for (auto* b : {&a.bq, &a.bk, &a.bv, &a.bo}) b->setZero(1, h);
    return a;
  };
  auto norm = [h]() {
    NormParams<Scalar> n;
    n.gain.setOnes(1, h);
    n.bias.setZero(1, h);
    return n;
  };
  auto mlp = [h]() {
    MlpParams<Scalar> m;
    m.w1.setZero(h, 4 * h);
    m.b1.setZero(1, 4 * h);
    m.w2.setZero(4 * h, h);
    m.b2.setZero(1, h);
    return m;
  };
  RetroParams<Scalar> p;
  p.config = c;
  p.tok_emb.setZero(c.vocab, h);
  p.pos_emb.setZero(c.max_seq, h);
  for (int i = 0; i < c.n_layers; ++i) {
    DecoderLayerParams<Scalar> l;
    l.ln_attn = norm();
    l.attn = attn();
    l.has_cca = c.has_cca(i);
    if (l.has_cca) {
      l.ln_cca = norm();
      l.cca = attn();
    }
    l.ln_mlp = norm();
    l.mlp = mlp();
    p.layers.push_back(std::move(l));
  }
  p.ln_final = norm();
  if (!c.is_gpt()) {
    p.enc_tok_emb.setZero(c.vocab, h);
    p.enc_pos_emb.setZero(c.neighbor_len, h);
    for (int i = 0; i < c.enc_layers; ++i) {
      p.enc_layers.push_back({norm(), attn(), norm(), mlp()});
    }
    p.enc_ln_final = norm();
  }
  return p;
}

bool ends_with(const std::string& s, std::string_view suffix) {
  return s.size() >= suffix.size() && s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
}

}  // namespace

template <typename Scalar>
std::vector<ParamRef<Scalar>> param_refs(RetroParams<Scalar>& p) {
  std::vector<ParamRef<Scalar>> out;
  visit(p, [&](const std::string& name, Mat<Scalar>& m) { out.push_back({name, &m, false}); });
  return out;
}

template <typename Scalar>
RetroParams<Scalar> init_params(const ModelConfig& config, std::uint64_t seed) {
  auto p = allocate<Scalar>(config);
  const double out_std = config.init_std / std::sqrt(2.0 * config.n_layers);
  visit(p, [&](const std::string& name, Mat<Scalar>& m) {
    // Biases and norm offsets stay 0, norm gains stay 1.
    const auto leaf = name.substr(name.rfind('.') + 1);
    if (leaf == "gain" || leaf.front() == 'b') return;
    const bool residual_out = ends_with(name, ".wo") || ends_with(name, ".w2");
    std::mt19937_64 rng(hash_combine(seed, fnv1a(name)));
    std::normal_distribution<double> dist(0.0, residual_out ? out_std : config.init_std);
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<Scalar>(dist(rng));
  });
  return p;
}

template <typename Scalar>
RetroParams<Scalar> zeros_like(const RetroParams<Scalar>& p) {
  RetroParams<Scalar> z = p;
  visit(z, [](const std::string&, Mat<Scalar>& m) { m.setZero(); });
  return z;
}

template <typename To, typename From>
RetroParams<To> cast_params(const RetroParams<From>& p) {
  auto src = p;
  auto dst = allocate<To>(p.config);
  auto a = param_refs(src);
  auto b = param_refs(dst);
  for (std::size_t i = 0; i < a.size(); ++i) *b[i].value = a[i].value->template cast<To>();
  return dst;
}

std::int64_t parameter_count(const RetroParams<float>& p) {
  auto copy = p;
  std::int64_t n = 0;
  for (const auto& r : param_refs(copy)) n += r.value->size();
  return n;
}

// ---------------------------------------------------------------------------
// neighbors

Neighbor Neighbor::from_tokens(std::vector<Token> tokens, std::int64_t chunk_id, double distance) {
  Neighbor n;
  n.valid.resize(tokens.size());
  for (std::size_t i = 0; i < tokens.size(); ++i) n.valid[i] = tokens[i] != kPadId;
  n.tokens = std::move(tokens);
  n.chunk_id = chunk_id;
  n.distance = distance;
  return n;
}

Neighbor Neighbor::padding(int length) {
  Neighbor n;
  n.tokens.assign(static_cast<std::size_t>(length), kPadId);
  n.valid.assign(static_cast<std::size_t>(length), false);
  return n;
}

SequenceNeighbors normalize_neighbors(const SequenceNeighbors& in, int num_chunks, const ModelConfig& config) {
  const auto len = static_cast<std::size_t>(config.neighbor_len);
  SequenceNeighbors out(static_cast<std::size_t>(num_chunks));
  for (int i = 0; i < num_chunks; ++i) {
    auto& dst = out[static_cast<std::size_t>(i)];
    const ChunkNeighbors* src = static_cast<std::size_t>(i) < in.size() ? &in[static_cast<std::size_t>(i)] : nullptr;
    for (int j = 0; j < config.k_neighbors; ++j) {
      if (src && static_cast<std::size_t>(j) < src->size()) {
        Neighbor n = (*src)[static_cast<std::size_t>(j)];
        if (n.valid.size() != n.tokens.size()) n = Neighbor::from_tokens(n.tokens, n.chunk_id, n.distance);
        n.tokens.resize(len, kPadId);
        n.valid.resize(len, false);
        dst.push_back(std::move(n));
      } else {
        dst.push_back(Neighbor::padding(config.neighbor_len));
      }
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// building blocks with caches

namespace {

template <typename Scalar>
struct AttnBlockCache {
  Mat<Scalar> xq, xkv, q, k, v, ctx;
  AttentionCoreCache<Scalar> core;
  std::vector<char> active;
};

template <typename Scalar>
Mat<Scalar> attn_block_forward(const AttentionParams<Scalar>& p, const Mat<Scalar>& xq, const Mat<Scalar>& xkv,
                               const Mask& allowed, int heads, AttnBlockCache<Scalar>* cache) {
  Mat<Scalar> q = linear(xq, p.wq, p.bq);
  Mat<Scalar> k = linear(xkv, p.wk, p.bk);
  Mat<Scalar> v = linear(xkv, p.wv, p.bv);
  AttentionCoreCache<Scalar> core;
  Mat<Scalar> ctx = attention_core(q, k, v, allowed, heads, cache ? &core : nullptr);
  Mat<Scalar> out = linear(ctx, p.wo, p.bo);
  std::vector<char> active(static_cast<std::size_t>(xq.rows()));
  for (Eigen::Index r = 0; r < xq.rows(); ++r) {
    active[static_cast<std::size_t>(r)] = allowed.row(r).any();
    // A query with nothing to attend to contributes nothing.
    if (!active[static_cast<std::size_t>(r)]) out.row(r).setZero();
  }
  if (cache) {
    cache->xq = xq;
    cache->xkv = xkv;
    cache->q = std::move(q);
    cache->k = std::move(k);
    cache->v = std::move(v);
    cache->ctx = std::move(ctx);
    cache->core = std::move(core);
    cache->active = std::move(active);
  }
  return out;
}

template <typename Scalar>
void attn_block_backward(const AttentionParams<Scalar>& p, AttentionParams<Scalar>& g, const AttnBlockCache<Scalar>& c,
                         Mat<Scalar> dout, int heads, Mat<Scalar>& dxq, Mat<Scalar>& dxkv) {
  for (Eigen::Index r = 0; r < dout.rows(); ++r) {
    if (!c.active[static_cast<std::size_t>(r)]) dout.row(r).setZero();
  }
  const Mat<Scalar> dctx = linear_backward(c.ctx, p.wo, dout, g.wo, g.bo);
  Mat<Scalar> dq, dk, dv;
  attention_core_backward(c.q, c.k, c.v, c.core, dctx, heads, dq, dk, dv);
  dxq = linear_backward(c.xq, p.wq, dq, g.wq, g.bq);
  dxkv = linear_backward(c.xkv, p.wk, dk, g.wk, g.bk);
  dxkv += linear_backward(c.xkv, p.wv, dv, g.wv, g.bv);
}

template <typename Scalar>
struct MlpCache {
  Mat<Scalar> x, pre, act;
};

template <typename Scalar>
Mat<Scalar> mlp_forward(const MlpParams<Scalar>& p, const Mat<Scalar>& x, MlpCache<Scalar>* cache) {
  Mat<Scalar> pre = linear(x, p.w1, p.b1);
  Mat<Scalar> act = gelu(pre);
  Mat<Scalar> out = linear(act, p.w2, p.b2);
  if (cache) {
    cache->x = x;
    cache->pre = std::move(pre);
    cache->act = std::move(act);
  }
  return out;
}

template <typename Scalar>
Mat<Scalar> mlp_backward(const MlpParams<Scalar>& p, MlpParams<Scalar>& g, const MlpCache<Scalar>& c,
                         const Mat<Scalar>& dout) {
  const Mat<Scalar> dact = linear_backward(c.act, p.w2, dout, g.w2, g.b2);
  const Mat<Scalar> dpre = gelu_backward(c.pre, dact);
  return linear_backward(c.x, p.w1, dpre, g.w1, g.b1);
}

template <typename Scalar>
Mat<Scalar> norm_forward(const NormParams<Scalar>& n, const Mat<Scalar>& x, double eps, LayerNormCache<Scalar>* cache) {
  return layer_norm(x, n.gain, n.bias, static_cast<Scalar>(eps), cache);
}

template <typename Scalar>
Mat<Scalar> norm_backward(const NormParams<Scalar>& n, NormParams<Scalar>& g, const LayerNormCache<Scalar>& c,
                          const Mat<Scalar>& dy) {
  return layer_norm_backward(c, n.gain, dy, g.gain, g.bias);
}

// --- neighbor encoder

template <typename Scalar>
struct EncoderLayerCache {
  LayerNormCache<Scalar> ln_attn, ln_mlp;
  AttnBlockCache<Scalar> attn;
  MlpCache<Scalar> mlp;
};

template <typename Scalar>
struct NeighborCache {
  std::vector<Token> tokens;
  std::vector<bool> valid;
  std::vector<EncoderLayerCache<Scalar>> layers;
  LayerNormCache<Scalar> ln_final;
};

template <typename Scalar>
Mat<Scalar> encode_one(const RetroParams<Scalar>& p, const Neighbor& nb, NeighborCache<Scalar>* cache) {
  const auto& c = p.config;
  const auto len = static_cast<Eigen::Index>(nb.tokens.size());
  if (len != c.neighbor_len || nb.valid.size() != nb.tokens.size()) {
    throw ShapeError("encode_neighbors: neighbor length " + std::to_string(len) + " != " + std::to_string(c.neighbor_len));
  }
  Mat<Scalar> x(len, c.hidden);
  for (Eigen::Index t = 0; t < len; ++t) {
    const Token tok = nb.tokens[static_cast<std::size_t>(t)];
    if (tok >= static_cast<Token>(c.vocab)) throw VocabError("encode_neighbors: token id out of range");
    x.row(t) = p.enc_tok_emb.row(tok) + p.enc_pos_emb.row(t);
  }
  Mask allowed(len, len);
  for (Eigen::Index r = 0; r < len; ++r) {
    for (Eigen::Index col = 0; col < len; ++col) allowed(r, col) = nb.valid[static_cast<std::size_t>(col)];
  }
  if (cache) {
    cache->tokens = nb.tokens;
    cache->valid = nb.valid;
    cache->layers.resize(p.enc_layers.size());
  }
  for (std::size_t l = 0; l < p.enc_layers.size(); ++l) {
    const auto& lp = p.enc_layers[l];
    auto* lc = cache ? &cache->layers[l] : nullptr;
    const Mat<Scalar> n1 = norm_forward(lp.ln_attn, x, c.ln_eps, lc ? &lc->ln_attn : nullptr);
    x += attn_block_forward(lp.attn, n1, n1, allowed, c.n_heads, lc ? &lc->attn : nullptr);
    const Mat<Scalar> n2 = norm_forward(lp.ln_mlp, x, c.ln_eps, lc ? &lc->ln_mlp : nullptr);
    x += mlp_forward(lp.mlp, n2, lc ? &lc->mlp : nullptr);
  }
  Mat<Scalar> out = norm_forward(p.enc_ln_final, x, c.ln_eps, cache ? &cache->ln_final : nullptr);
  for (Eigen::Index t = 0; t < len; ++t) {
    if (!nb.valid[static_cast<std::size_t>(t)]) out.row(t).setZero();
  }
  return out;
}

template <typename Scalar>
void encode_one_backward(const RetroParams<Scalar>& p, RetroParams<Scalar>& g, const NeighborCache<Scalar>& cache,
                         Mat<Scalar> dout) {
  const auto& c = p.config;
  for (Eigen::Index t = 0; t < dout.rows(); ++t) {
    if (!cache.valid[static_cast<std::size_t>(t)]) dout.row(t).setZero();
  }
  Mat<Scalar> dx = norm_backward(p.enc_ln_final, g.enc_ln_final, cache.ln_final, dout);
  for (std::size_t li = p.enc_layers.size(); li-- > 0;) {
    const auto& lp = p.enc_layers[li];
    auto& lg = g.enc_layers[li];
    const auto& lc = cache.layers[li];
    const Mat<Scalar> dn2 = mlp_backward(lp.mlp, lg.mlp, lc.mlp, dx);
    dx += norm_backward(lp.ln_mlp, lg.ln_mlp, lc.ln_mlp, dn2);
    Mat<Scalar> dq, dkv;
    attn_block_backward(lp.attn, lg.attn, lc.attn, dx, c.n_heads, dq, dkv);
    dx += norm_backward(lp.ln_attn, lg.ln_attn, lc.ln_attn, Mat<Scalar>(dq + dkv));
  }
  for (Eigen::Index t = 0; t < dx.rows(); ++t) {
    g.enc_tok_emb.row(cache.tokens[static_cast<std::size_t>(t)]) += dx.row(t);
    g.enc_pos_emb.row(t) += dx.row(t);
  }
}

// --- chunked cross-attention

template <typename Scalar>
struct CcaCache {
  LayerNormCache<Scalar> ln;
  std::vector<AttnBlockCache<Scalar>> chunks;  // entry i-1 serves chunk i
  std::vector<char> present;
};

// Keys/values for chunk i: the k encoded neighbors of chunk i-1, stacked.
template <typename Scalar>
bool gather_neighbors(const EncodedNeighbors<Scalar>& enc, std::size_t prev_chunk, Eigen::Index rows, Mat<Scalar>& kv,
                      Mask& allowed) {
  if (prev_chunk >= enc.states.size() || enc.states[prev_chunk].empty()) return false;
  const auto& slots = enc.states[prev_chunk];
  Eigen::Index total = 0;
  for (const auto& s : slots) total += s.rows();
  if (total == 0) return false;
  kv.resize(total, slots.front().cols());
  allowed.resize(rows, total);
  Eigen::Index off = 0;
  for (std::size_t j = 0; j < slots.size(); ++j) {
    kv.middleRows(off, slots[j].rows()) = slots[j];
    for (Eigen::Index t = 0; t < slots[j].rows(); ++t) {
      allowed.col(off + t).setConstant(enc.valid[prev_chunk][j][static_cast<std::size_t>(t)]);
    }
    off += slots[j].rows();
  }
  return true;
}

// Returns the sublayer output (without the residual).
template <typename Scalar>
Mat<Scalar> cca_forward(const NormParams<Scalar>& norm, const AttentionParams<Scalar>& attn, const Mat<Scalar>& h,
                        const EncodedNeighbors<Scalar>& enc, int m, int heads, double eps, CcaCache<Scalar>* cache) {
  if (h.rows() % m != 0) {
    throw AlignmentError("chunked_cross_attention: " + std::to_string(h.rows()) + " positions not a multiple of chunk size " +
                         std::to_string(m));
  }
  const Eigen::Index chunks = h.rows() / m;
  Mat<Scalar> out = Mat<Scalar>::Zero(h.rows(), h.cols());
  const Mat<Scalar> normed = norm_forward(norm, h, eps, cache ? &cache->ln : nullptr);
  if (cache) {
    cache->chunks.assign(static_cast<std::size_t>(std::max<Eigen::Index>(chunks - 1, 0)), {});
    cache->present.assign(cache->chunks.size(), 0);
  }
  Mat<Scalar> kv;
  Mask allowed;
  for (Eigen::Index i = 1; i < chunks; ++i) {
    if (!gather_neighbors(enc, static_cast<std::size_t>(i - 1), m, kv, allowed)) continue;
    auto* cc = cache ? &cache->chunks[static_cast<std::size_t>(i - 1)] : nullptr;
    out.middleRows(i * m, m) = attn_block_forward(attn, Mat<Scalar>(normed.middleRows(i * m, m)), kv, allowed, heads, cc);
    if (cache) cache->present[static_cast<std::size_t>(i - 1)] = 1;
  }
  return out;
}

// Accumulates parameter gradients and d(encoded); returns d(h) from this path.
template <typename Scalar>
Mat<Scalar> cca_backward(const NormParams<Scalar>& norm, const AttentionParams<Scalar>& attn, NormParams<Scalar>& gnorm,
                         AttentionParams<Scalar>& gattn, const CcaCache<Scalar>& cache, const Mat<Scalar>& dout,
                         const EncodedNeighbors<Scalar>& enc, EncodedNeighbors<Scalar>& denc, int m, int heads) {
  Mat<Scalar> dnormed = Mat<Scalar>::Zero(dout.rows(), dout.cols());
  for (std::size_t idx = 0; idx < cache.chunks.size(); ++idx) {
    if (!cache.present[idx]) continue;
    const auto i = static_cast<Eigen::Index>(idx + 1);
    Mat<Scalar> dq, dkv;
    attn_block_backward(attn, gattn, cache.chunks[idx], Mat<Scalar>(dout.middleRows(i * m, m)), heads, dq, dkv);
    dnormed.middleRows(i * m, m) = dq;
    Eigen::Index off = 0;
    for (std::size_t j = 0; j < enc.states[idx].size(); ++j) {
      const auto rows = enc.states[idx][j].rows();
      denc.states[idx][j] += dkv.middleRows(off, rows);
      off += rows;
    }
  }
  return norm_backward(norm, gnorm, cache.ln, dnormed);
}

// --- decoder

template <typename Scalar>
struct DecoderLayerCache {
  LayerNormCache<Scalar> ln_attn, ln_mlp;
  AttnBlockCache<Scalar> attn;
  bool has_cca = false;
  CcaCache<Scalar> cca;
  MlpCache<Scalar> mlp;
};

template <typename Scalar>
struct SequenceCache {
  std::vector<Token> tokens;
  std::vector<DecoderLayerCache<Scalar>> layers;
  LayerNormCache<Scalar> ln_final;
  Mat<Scalar> final_states;
  std::vector<std::vector<NeighborCache<Scalar>>> neighbors;
  EncodedNeighbors<Scalar> encoded;
};

template <typename Scalar>
Mat<Scalar> forward_impl(const RetroParams<Scalar>& p, std::span<const Token> tokens, const std::vector<bool>& valid,
                         const SequenceNeighbors& neighbors, SequenceCache<Scalar>* cache) {
  const auto& c = p.config;
  const auto n = static_cast<Eigen::Index>(tokens.size());
  if (valid.size() != tokens.size()) throw ShapeError("forward: pad mask length differs from token count");
  if (n == 0 || n % c.chunk_size != 0) {
    throw AlignmentError("forward: sequence length " + std::to_string(n) + " is not a positive multiple of chunk size " +
                         std::to_string(c.chunk_size));
  }
  if (n > c.max_seq) throw LengthError("forward: sequence length exceeds max_seq");
  const Eigen::Index chunks = n / c.chunk_size;

  // Only neighbors of chunks 0..l-2 are ever attended to.
  EncodedNeighbors<Scalar> encoded;
  if (!c.is_gpt() && c.k_neighbors > 0 && chunks > 1) {
    const auto norm = normalize_neighbors(neighbors, static_cast<int>(chunks - 1), c);
    encoded.states.resize(norm.size());
    encoded.valid.resize(norm.size());
    if (cache) cache->neighbors.resize(norm.size());
    for (std::size_t i = 0; i < norm.size(); ++i) {
      if (cache) cache->neighbors[i].resize(norm[i].size());
      for (std::size_t j = 0; j < norm[i].size(); ++j) {
        encoded.states[i].push_back(encode_one(p, norm[i][j], cache ? &cache->neighbors[i][j] : nullptr));
        encoded.valid[i].push_back(norm[i][j].valid);
      }
    }
  }

  Mat<Scalar> x(n, c.hidden);
  for (Eigen::Index t = 0; t < n; ++t) {
    const Token tok = tokens[static_cast<std::size_t>(t)];
    if (tok >= static_cast<Token>(c.vocab)) throw VocabError("forward: token id out of range");
    x.row(t) = p.tok_emb.row(tok) + p.pos_emb.row(t);
  }
  Mask causal(n, n);
  for (Eigen::Index r = 0; r < n; ++r) {
    for (Eigen::Index col = 0; col < n; ++col) causal(r, col) = col <= r && valid[static_cast<std::size_t>(col)];
  }
  if (cache) {
    cache->tokens.assign(tokens.begin(), tokens.end());
    cache->layers.resize(p.layers.size());
  }
  for (std::size_t l = 0; l < p.layers.size(); ++l) {
    const auto& lp = p.layers[l];
    auto* lc = cache ? &cache->layers[l] : nullptr;
    const Mat<Scalar> n1 = norm_forward(lp.ln_attn, x, c.ln_eps, lc ? &lc->ln_attn : nullptr);
    x += attn_block_forward(lp.attn, n1, n1, causal, c.n_heads, lc ? &lc->attn : nullptr);
    if (lp.has_cca) {
      if (lc) lc->has_cca = true;
      x += cca_forward(lp.ln_cca, lp.cca, x, encoded, c.chunk_size, c.n_heads, c.ln_eps, lc ? &lc->cca : nullptr);
    }
    const Mat<Scalar> n2 = norm_forward(lp.ln_mlp, x, c.ln_eps, lc ? &lc->ln_mlp : nullptr);
    x += mlp_forward(lp.mlp, n2, lc ? &lc->mlp : nullptr);
  }
  Mat<Scalar> xf = norm_forward(p.ln_final, x, c.ln_eps, cache ? &cache->ln_final : nullptr);
  Mat<Scalar> logits = xf * p.tok_emb.transpose();
  if (cache) {
    cache->final_states = std::move(xf);
    cache->encoded = std::move(encoded);
  }
  return logits;
}

template <typename Scalar>
void backward_impl(const RetroParams<Scalar>& p, RetroParams<Scalar>& g, const SequenceCache<Scalar>& cache,
                   const Mat<Scalar>& dlogits) {
  const auto& c = p.config;
  g.tok_emb.noalias() += dlogits.transpose() * cache.final_states;
  const Mat<Scalar> dxf = dlogits * p.tok_emb;
  Mat<Scalar> dx = norm_backward(p.ln_final, g.ln_final, cache.ln_final, dxf);

  EncodedNeighbors<Scalar> denc;
  denc.states.resize(cache.encoded.states.size());
  for (std::size_t i = 0; i < denc.states.size(); ++i) {
    for (const auto& s : cache.encoded.states[i]) denc.states[i].push_back(Mat<Scalar>::Zero(s.rows(), s.cols()));
  }

  for (std::size_t li = p.layers.size(); li-- > 0;) {
    const auto& lp = p.layers[li];
    auto& lg = g.layers[li];
    const auto& lc = cache.layers[li];
    const Mat<Scalar> dn2 = mlp_backward(lp.mlp, lg.mlp, lc.mlp, dx);
    dx += norm_backward(lp.ln_mlp, lg.ln_mlp, lc.ln_mlp, dn2);
    if (lc.has_cca) {
      dx += cca_backward(lp.ln_cca, lp.cca, lg.ln_cca, lg.cca, lc.cca, dx, cache.encoded, denc, c.chunk_size, c.n_heads);
    }
    Mat<Scalar> dq, dkv;
    attn_block_backward(lp.attn, lg.attn, lc.attn, dx, c.n_heads, dq, dkv);
    dx += norm_backward(lp.ln_attn, lg.ln_attn, lc.ln_attn, Mat<Scalar>(dq + dkv));
  }
  for (Eigen::Index t = 0; t < dx.rows(); ++t) {
    g.tok_emb.row(cache.tokens[static_cast<std::size_t>(t)]) += dx.row(t);
    g.pos_emb.row(t) += dx.row(t);
  }
  for (std::size_t i = 0; i < denc.states.size(); ++i) {
    for (std::size_t j = 0; j < denc.states[i].size(); ++j) {
      encode_one_backward(p, g, cache.neighbors[i][j], denc.states[i][j]);
    }
  }
}

}  // namespace

template <typename Scalar>
EncodedNeighbors<Scalar> encode_neighbors(const RetroParams<Scalar>& params, const SequenceNeighbors& neighbors) {
  if (params.config.is_gpt()) throw ConfigError("encode_neighbors: model has no neighbor encoder");
  EncodedNeighbors<Scalar> out;
  for (const auto& chunk : neighbors) {
    auto& states = out.states.emplace_back();
    auto& valid = out.valid.emplace_back();
    for (const auto& nb : chunk) {
      states.push_back(encode_one<Scalar>(params, nb, nullptr));
      valid.push_back(nb.valid);
    }
  }
  return out;
}

template <typename Scalar>
Mat<Scalar> chunked_cross_attention(const NormParams<Scalar>& norm, const AttentionParams<Scalar>& attn,
                                    const Mat<Scalar>& states, const EncodedNeighbors<Scalar>& encoded, int chunk_size,
                                    int heads, double ln_eps) {
  return states + cca_forward<Scalar>(norm, attn, states, encoded, chunk_size, heads, ln_eps, nullptr);
}

template <typename Scalar>
Mat<Scalar> forward(const RetroParams<Scalar>& params, std::span<const Token> tokens, const std::vector<bool>& valid,
                    const SequenceNeighbors& neighbors) {
  return forward_impl<Scalar>(params, tokens, valid, neighbors, nullptr);
}

// ---------------------------------------------------------------------------
// loss

TrainingExample TrainingExample::language_modeling(std::vector<Token> tokens, std::vector<bool> valid,
                                                   SequenceNeighbors neighbors) {
  TrainingExample ex;
  ex.target_mask.assign(tokens.size(), false);
  bool seen = false;
  for (std::size_t t = 0; t < tokens.size(); ++t) {
    if (valid[t] && seen) ex.target_mask[t] = true;
    seen = seen || valid[t];
  }
  ex.tokens = std::move(tokens);
  ex.valid = std::move(valid);
  ex.neighbors = std::move(neighbors);
  return ex;
}

void shifted_targets(const TrainingExample& ex, std::vector<Token>& targets, std::vector<bool>& mask) {
  const auto n = ex.tokens.size();
  if (ex.target_mask.size() != n || ex.valid.size() != n) throw ShapeError("training example: mask lengths differ");
  targets.assign(n, kPadId);
  mask.assign(n, false);
  for (std::size_t t = 0; t + 1 < n; ++t) {
    targets[t] = ex.tokens[t + 1];
    mask[t] = ex.target_mask[t + 1];
  }
}

template <typename Scalar>
double lm_loss(const Mat<Scalar>& logits, std::span<const Token> targets, const std::vector<bool>& loss_mask) {
  std::vector<Scalar> w(loss_mask.size());
  double count = 0;
  for (std::size_t i = 0; i < w.size(); ++i) {
    w[i] = loss_mask[i] ? Scalar(1) : Scalar(0);
    count += loss_mask[i] ? 1 : 0;
  }
  if (count == 0) {
    log_warning("lm_loss: every position is masked; loss defined as 0");
    return 0.0;
  }
  return cross_entropy_sum<Scalar>(logits, targets, w) / count;
}

namespace {

double count_targets(const Batch& batch) {
  double total = 0;
  for (const auto& ex : batch) {
    std::vector<Token> targets;
    std::vector<bool> mask;
    shifted_targets(ex, targets, mask);
    for (bool b : mask) total += b ? 1 : 0;
  }
  return total;
}

}  // namespace

template <typename Scalar>
std::vector<double> example_nll(const RetroParams<Scalar>& params, const Batch& batch) {
  std::vector<double> out;
  for (const auto& ex : batch) {
    std::vector<Token> targets;
    std::vector<bool> mask;
    shifted_targets(ex, targets, mask);
    const Mat<Scalar> logits = forward(params, ex.tokens, ex.valid, ex.neighbors);
    std::vector<Scalar> w(mask.size());
    for (std::size_t i = 0; i < w.size(); ++i) w[i] = mask[i] ? Scalar(1) : Scalar(0);
    out.push_back(cross_entropy_sum<Scalar>(logits, targets, w));
  }
  return out;
}

template <typename Scalar>
double batch_loss(const RetroParams<Scalar>& params, const Batch& batch) {
  const double total = count_targets(batch);
  if (total == 0) {
    log_warning("batch_loss: every position is masked; loss defined as 0");
    return 0.0;
  }
  double sum = 0.0;
  for (double v : example_nll(params, batch)) sum += v;
  return sum / total;
}

template <typename Scalar>
LossAndGrad<Scalar> loss_and_grad(const RetroParams<Scalar>& params, const Batch& batch, const FrozenPredicate& frozen) {
  LossAndGrad<Scalar> out;
  out.grads = zeros_like(params);
  out.target_count = count_targets(batch);
  if (out.target_count == 0) {
    log_warning("loss_and_grad: every position is masked; loss defined as 0");
    return out;
  }
  const auto scale = static_cast<Scalar>(1.0 / out.target_count);
  double sum = 0.0;
  for (const auto& ex : batch) {
    std::vector<Token> targets;
    std::vector<bool> mask;
    shifted_targets(ex, targets, mask);
    SequenceCache<Scalar> cache;
    const Mat<Scalar> logits = forward_impl(params, ex.tokens, ex.valid, ex.neighbors, &cache);
    std::vector<Scalar> w(mask.size());
    for (std::size_t i = 0; i < w.size(); ++i) w[i] = mask[i] ? Scalar(1) : Scalar(0);
    Mat<Scalar> dlogits;
    sum += cross_entropy_sum<Scalar>(logits, targets, w, &dlogits, scale);
    backward_impl(params, out.grads, cache, dlogits);
  }
  out.loss = sum / out.target_count;
  if (frozen) {
    for (auto& ref : param_refs(out.grads)) {
      if (frozen(ref.name)) ref.value->setZero();
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// training

double TrainHyper::lr_at(std::int64_t step) const {
  const double base = adam.lr;
  if (warmup_steps > 0 && step < warmup_steps) return base * static_cast<double>(step + 1) / warmup_steps;
  if (total_steps <= 0 || total_steps <= warmup_steps) return base;
  const double progress =
      std::clamp(static_cast<double>(step - warmup_steps) / static_cast<double>(total_steps - warmup_steps), 0.0, 1.0);
  const double cosine = 0.5 * (1.0 + std::cos(M_PI * progress));
  return base * (min_lr_ratio + (1.0 - min_lr_ratio) * cosine);
}

template <typename Scalar>
TrainStepResult train_step(RetroParams<Scalar>& params, AdamState<Scalar>& opt, const Batch& batch,
                           const TrainHyper& hyper) {
  auto refs = param_refs(params);
  if (opt.first_moment.empty()) opt = AdamState<Scalar>::zeros_like(refs);
  auto lg = loss_and_grad(params, batch, hyper.frozen);
  if (!std::isfinite(lg.loss)) {
    throw NumericError("train_step: non-finite loss " + std::to_string(lg.loss) + " at step " + std::to_string(opt.t) +
                       " (" + std::to_string(lg.target_count) + " targets)");
  }
  auto grad_refs = param_refs(lg.grads);
  std::vector<Mat<Scalar>> grads;
  grads.reserve(grad_refs.size());
  for (auto& r : grad_refs) grads.push_back(std::move(*r.value));
  TrainStepResult result;
  result.loss = lg.loss;
  result.grad_norm = clip_global_norm<Scalar>(grads, hyper.clip_norm);
  if (hyper.frozen) {
    for (auto& r : refs) r.frozen = hyper.frozen(r.name);
  }
  AdamHyper h = hyper.adam;
  h.lr = hyper.lr_at(opt.t);
  result.lr = h.lr;
  adam_step<Scalar>(refs, grads, opt, h);
  return result;
}

template <typename Scalar>
Trainer<Scalar>::Trainer(RetroParams<Scalar> p) : params(std::move(p)) {
  opt = AdamState<Scalar>::zeros_like(param_refs(params));
}

template <typename Scalar>
TrainStepResult Trainer<Scalar>::step(const Batch& batch, const TrainHyper& hyper) {
  return train_step(params, opt, batch, hyper);
}

// ---------------------------------------------------------------------------
// checkpoints

void save_checkpoint(const std::filesystem::path& path, const RetroParams<float>& params, const nlohmann::json& echo) {
  BinaryWriter out;
  out.magic("RTWT");
  out.put(kCheckpointVersion);
  out.put_string(params.config.to_json().dump());
  nlohmann::json meta{{"tool_version", kToolVersion}, {"echo", echo}};
  out.put_string(meta.dump());
  auto copy = params;
  const auto refs = param_refs(copy);
  out.put(static_cast<std::uint32_t>(refs.size()));
  for (const auto& r : refs) {
    out.put_string(r.name);
    out.put(static_cast<std::uint32_t>(2));
    out.put(static_cast<std::uint32_t>(r.value->rows()));
    out.put(static_cast<std::uint32_t>(r.value->cols()));
    out.put_span<float>(std::span<const float>(r.value->data(), static_cast<std::size_t>(r.value->size())));
  }
  out.write_file(path);
}

RetroParams<float> load_checkpoint(const std::filesystem::path& path) {
  auto in = BinaryReader::from_file(path);
  in.expect_magic("RTWT");
  if (in.get<std::uint32_t>() != kCheckpointVersion) throw ParseError("checkpoint: unsupported version");
  ModelConfig config;
  try {
    config = ModelConfig::from_json(nlohmann::json::parse(in.get_string()));
    const auto meta = nlohmann::json::parse(in.get_string());
    if (!meta.is_object()) throw ParseError("checkpoint: bad metadata");
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("checkpoint: bad header: ") + e.what());
  }
  auto params = allocate<float>(config);
  auto refs = param_refs(params);
  const auto count = in.get<std::uint32_t>();
  if (count != refs.size()) throw IntegrityError("checkpoint: tensor count does not match config");
  for (auto& r : refs) {
    const auto name = in.get_string();
    if (name != r.name) throw IntegrityError("checkpoint: expected tensor " + r.name + ", found " + name);
    if (in.get<std::uint32_t>() != 2) throw ParseError("checkpoint: tensor rank must be 2");
    const auto rows = in.get<std::uint32_t>();
    const auto cols = in.get<std::uint32_t>();
    if (rows != r.value->rows() || cols != r.value->cols()) throw IntegrityError("checkpoint: shape mismatch for " + name);
    in.get_span<float>(std::span<float>(r.value->data(), static_cast<std::size_t>(r.value->size())));
  }
  if (!in.at_end()) throw ParseError("checkpoint: trailing bytes");
  return params;
}

// ---------------------------------------------------------------------------
// instantiations

#define RETRO_INSTANTIATE(S)                                                                                       \
  template std::vector<ParamRef<S>> param_refs<S>(RetroParams<S>&);                                                \
  template RetroParams<S> init_params<S>(const ModelConfig&, std::uint64_t);                                       \
  template RetroParams<S> zeros_like<S>(const RetroParams<S>&);                                                    \
  template EncodedNeighbors<S> encode_neighbors<S>(const RetroParams<S>&, const SequenceNeighbors&);               \
  template Mat<S> chunked_cross_attention<S>(const NormParams<S>&, const AttentionParams<S>&, const Mat<S>&,        \
                                             const EncodedNeighbors<S>&, int, int, double);                        \
  template Mat<S> forward<S>(const RetroParams<S>&, std::span<const Token>, const std::vector<bool>&,              \
                             const SequenceNeighbors&);                                                            \
  template double lm_loss<S>(const Mat<S>&, std::span<const Token>, const std::vector<bool>&);                     \
  template std::vector<double> example_nll<S>(const RetroParams<S>&, const Batch&);                                \
  template double batch_loss<S>(const RetroParams<S>&, const Batch&);                                              \
  template LossAndGrad<S> loss_and_grad<S>(const RetroParams<S>&, const Batch&, const FrozenPredicate&);           \
  template TrainStepResult train_step<S>(RetroParams<S>&, AdamState<S>&, const Batch&, const TrainHyper&);         \
  template struct Trainer<S>;

RETRO_INSTANTIATE(float)
RETRO_INSTANTIATE(double)
#undef RETRO_INSTANTIATE

template RetroParams<double> cast_params<double, float>(const RetroParams<float>&);
template RetroParams<float> cast_params<float, double>(const RetroParams<double>&);
template RetroParams<float> cast_params<float, float>(const RetroParams<float>&);
template RetroParams<double> cast_params<double, double>(const RetroParams<double>&);

}  // namespace retro
