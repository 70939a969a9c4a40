#pragma once

// Decoder-only transformer with chunked cross-attention to a bidirectional
// neighbor encoder. Chunk i of the input attends to the encoded neighbors
// retrieved for chunk i-1; chunk 0 has no cross-attention input. With no
// cross-attention layers the model is a plain GPT.
//
// Templated on the scalar: double for gradient checks, float for training.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "retro/common.hpp"
#include "retro/numerics.hpp"

namespace retro {

struct ModelConfig {
  int n_layers = 4;
  int hidden = 128;
  int n_heads = 4;
  int chunk_size = 64;
  int k_neighbors = 2;
  std::vector<int> cca_layers;  // 1-based decoder layer indices
  int enc_layers = 2;
  int max_seq = 256;
  int vocab = static_cast<int>(kVocabSize);
  int neighbor_len = 128;  // chunk + continuation
  double ln_eps = 1e-5;
  double init_std = 0.02;

  void validate() const;
  bool is_gpt() const { return cca_layers.empty(); }
  bool has_cca(int layer_index0) const;
  nlohmann::json to_json() const;
  static ModelConfig from_json(const nlohmann::json& j);
  /// Desk-scale defaults: cross-attention in every layer from the second on.
  static ModelConfig desk_default();
  /// Same architecture with cross-attention removed.
  ModelConfig as_gpt() const;
};

template <typename Scalar>
struct NormParams {
  Mat<Scalar> gain, bias;
};

template <typename Scalar>
struct AttentionParams {
  Mat<Scalar> wq, bq, wk, bk, wv, bv, wo, bo;
};

template <typename Scalar>
struct MlpParams {
  Mat<Scalar> w1, b1, w2, b2;
};

template <typename Scalar>
struct DecoderLayerParams {
  NormParams<Scalar> ln_attn;
  AttentionParams<Scalar> attn;
  bool has_cca = false;
  NormParams<Scalar> ln_cca;
  AttentionParams<Scalar> cca;
  NormParams<Scalar> ln_mlp;
  MlpParams<Scalar> mlp;
};

template <typename Scalar>
struct EncoderLayerParams {
  NormParams<Scalar> ln_attn;
  AttentionParams<Scalar> attn;
  NormParams<Scalar> ln_mlp;
  MlpParams<Scalar> mlp;
};

/// All weights. The output projection is tied to `tok_emb`. Encoder weights
/// exist only when the config has cross-attention layers.
template <typename Scalar>
struct RetroParams {
  ModelConfig config;
  Mat<Scalar> tok_emb;  // vocab x hidden
  Mat<Scalar> pos_emb;  // max_seq x hidden
  std::vector<DecoderLayerParams<Scalar>> layers;
  NormParams<Scalar> ln_final;
  Mat<Scalar> enc_tok_emb;
  Mat<Scalar> enc_pos_emb;  // neighbor_len x hidden
  std::vector<EncoderLayerParams<Scalar>> enc_layers;
  NormParams<Scalar> enc_ln_final;
};

/// Named views of every tensor in a fixed order.
template <typename Scalar>
std::vector<ParamRef<Scalar>> param_refs(RetroParams<Scalar>& p);

template <typename Scalar>
RetroParams<Scalar> init_params(const ModelConfig& config, std::uint64_t seed);

/// Same shapes, all zeros.
template <typename Scalar>
RetroParams<Scalar> zeros_like(const RetroParams<Scalar>& p);

template <typename To, typename From>
RetroParams<To> cast_params(const RetroParams<From>& p);

std::int64_t parameter_count(const RetroParams<float>& p);

// ---------------------------------------------------------------------------
// neighbors

struct Neighbor {
  std::vector<Token> tokens;
  std::vector<bool> valid;
  std::int64_t chunk_id = -1;
  double distance = 0.0;

  /// Validity derived from token identity (pad ids are invalid).
  static Neighbor from_tokens(std::vector<Token> tokens, std::int64_t chunk_id = -1, double distance = 0.0);
  static Neighbor padding(int length);
};

using ChunkNeighbors = std::vector<Neighbor>;          // k entries
using SequenceNeighbors = std::vector<ChunkNeighbors>; // one per chunk
using NeighborSet = std::vector<SequenceNeighbors>;    // one per batch item

/// Pads/truncates each chunk's list to exactly k entries of neighbor_len tokens.
SequenceNeighbors normalize_neighbors(const SequenceNeighbors& in, int num_chunks, const ModelConfig& config);

template <typename Scalar>
struct EncodedNeighbors {
  std::vector<std::vector<Mat<Scalar>>> states;          // [chunk][k] neighbor_len x hidden
  std::vector<std::vector<std::vector<bool>>> valid;      // [chunk][k][pos]
};

/// Bidirectional encoding of every neighbor, independently. Pad positions are
/// masked out of attention and zero in the output.
template <typename Scalar>
EncodedNeighbors<Scalar> encode_neighbors(const RetroParams<Scalar>& params, const SequenceNeighbors& neighbors);

/// Pre-norm chunked cross-attention sublayer plus residual: rows of chunk i
/// attend to the k encoded neighbors of chunk i-1; chunk 0 passes through.
template <typename Scalar>
Mat<Scalar> chunked_cross_attention(const NormParams<Scalar>& norm, const AttentionParams<Scalar>& attn,
                                    const Mat<Scalar>& states, const EncodedNeighbors<Scalar>& encoded,
                                    int chunk_size, int heads, double ln_eps);

/// Logits [n x vocab] for one sequence. n must be a multiple of the chunk size
/// and at most max_seq.
template <typename Scalar>
Mat<Scalar> forward(const RetroParams<Scalar>& params, std::span<const Token> tokens, const std::vector<bool>& valid,
                    const SequenceNeighbors& neighbors);

// ---------------------------------------------------------------------------
// loss and training

struct TrainingExample {
  std::vector<Token> tokens;
  std::vector<bool> valid;
  /// 1 where the token at that position is a prediction target.
  std::vector<bool> target_mask;
  SequenceNeighbors neighbors;

  /// Plain LM example: every valid token after the first valid one is a target.
  static TrainingExample language_modeling(std::vector<Token> tokens, std::vector<bool> valid,
                                           SequenceNeighbors neighbors);
};

using Batch = std::vector<TrainingExample>;

/// Targets shifted left by one with their per-position weights.
void shifted_targets(const TrainingExample& ex, std::vector<Token>& targets, std::vector<bool>& mask);

/// Mean masked next-token cross-entropy in nats. All-masked input gives 0
/// with a warning.
template <typename Scalar>
double lm_loss(const Mat<Scalar>& logits, std::span<const Token> targets, const std::vector<bool>& loss_mask);

template <typename Scalar>
struct LossAndGrad {
  double loss = 0.0;
  double target_count = 0.0;
  RetroParams<Scalar> grads;
};

/// Mean loss over every target in the batch.
template <typename Scalar>
double batch_loss(const RetroParams<Scalar>& params, const Batch& batch);

/// Per-target negative log-likelihoods summed per example.
template <typename Scalar>
std::vector<double> example_nll(const RetroParams<Scalar>& params, const Batch& batch);

using FrozenPredicate = std::function<bool(const std::string&)>;

template <typename Scalar>
LossAndGrad<Scalar> loss_and_grad(const RetroParams<Scalar>& params, const Batch& batch,
                                  const FrozenPredicate& frozen = {});

struct TrainHyper {
  AdamHyper adam;
  double clip_norm = 1.0;
  int warmup_steps = 0;
  int total_steps = 0;  // cosine decay horizon; 0 keeps lr constant after warmup
  double min_lr_ratio = 0.1;
  FrozenPredicate frozen;

  double lr_at(std::int64_t step) const;
};

struct TrainStepResult {
  double loss = 0.0;
  double grad_norm = 0.0;
  double lr = 0.0;
};

template <typename Scalar>
struct Trainer {
  RetroParams<Scalar> params;
  AdamState<Scalar> opt;

  explicit Trainer(RetroParams<Scalar> p);
  /// Forward, backward, global-norm clip, Adam. Returns the pre-step loss.
  TrainStepResult step(const Batch& batch, const TrainHyper& hyper);
};

template <typename Scalar>
TrainStepResult train_step(RetroParams<Scalar>& params, AdamState<Scalar>& opt, const Batch& batch,
                           const TrainHyper& hyper);

// ---------------------------------------------------------------------------
// checkpoints

inline constexpr std::uint32_t kCheckpointVersion = 1;

void save_checkpoint(const std::filesystem::path& path, const RetroParams<float>& params,
                     const nlohmann::json& echo = {});
RetroParams<float> load_checkpoint(const std::filesystem::path& path);

}  // namespace retro
