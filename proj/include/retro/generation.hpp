#pragma once

// Retrieval-aware decoding and QA input construction.

#include <cstdint>
#include <filesystem>
#include <random>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "retro/ann_index.hpp"
#include "retro/common.hpp"
#include "retro/datastore.hpp"
#include "retro/model.hpp"

namespace retro {

struct SamplingParams {
  enum class Strategy { greedy, nucleus };
  Strategy strategy = Strategy::nucleus;
  double p = 0.9;
  int max_tokens = 200;
  std::uint64_t seed = 0;
  double temperature = 1.0;

  void validate() const;
  nlohmann::json to_json() const;
  static SamplingParams from_json(const nlohmann::json& j);
};

struct LeftPadded {
  std::vector<Token> tokens;
  int left_pad_count = 0;
};

/// Prepends (m - n mod m) mod m pads so the last context token ends a chunk.
LeftPadded left_pad(std::span<const Token> context, int m);

/// Ids kept by nucleus filtering, in descending probability order.
std::vector<Token> nucleus_support(std::span<const double> logits, double p, double temperature = 1.0);

Token sample_token(std::span<const double> logits, const SamplingParams& params, std::mt19937_64& rng);

// ---------------------------------------------------------------------------
// retrieval during generation

/// Maps query chunks (m tokens each) to their neighbor lists.
class Retriever {
 public:
  virtual ~Retriever() = default;
  virtual std::vector<ChunkNeighbors> retrieve(const std::vector<std::vector<Token>>& chunks) = 0;
};

/// Embeds with the datastore's hashing embedder and searches the index.
class IndexRetriever : public Retriever {
 public:
  IndexRetriever(const Datastore& datastore, const AnnIndex& index, int k, int nprobe = 0, bool exclude_self = false);
  std::vector<ChunkNeighbors> retrieve(const std::vector<std::vector<Token>>& chunks) override;

 private:
  const Datastore& datastore_;
  const AnnIndex& index_;
  int k_;
  int nprobe_;
  bool exclude_self_;
};

/// Returns the same neighbor list for every chunk.
class ConstantRetriever : public Retriever {
 public:
  explicit ConstantRetriever(ChunkNeighbors neighbors) : neighbors_(std::move(neighbors)) {}
  std::vector<ChunkNeighbors> retrieve(const std::vector<std::vector<Token>>& chunks) override {
    return std::vector<ChunkNeighbors>(chunks.size(), neighbors_);
  }

 private:
  ChunkNeighbors neighbors_;
};

struct GenerationResult {
  std::vector<Token> tokens;  // excludes the terminating EOT
  int queries = 0;            // retriever calls
  bool hit_eot = false;
};

/// One decoding run. The buffer is kept chunk-aligned: the prompt is
/// left-padded, appended tokens shift the left pads out one at a time, and
/// once none remain a fresh pad chunk is opened and filled left to right.
/// Before every s-th generated token, one retriever call refreshes the
/// neighbors of every complete chunk whose content changed, always including
/// the rightmost complete chunk. Chunks completed between refreshes use the
/// neighbors from the most recent refresh.
class GenerationSession {
 public:
  GenerationSession(const RetroParams<float>& model, Retriever* retriever, int retrieval_step);

  GenerationResult generate(std::span<const Token> prompt, const SamplingParams& sampling);

  int retrieval_step() const { return step_; }

 private:
  struct ChunkState {
    std::vector<Token> retrieved_for;
    ChunkNeighbors neighbors;
    bool has = false;
  };

  void append(Token t);
  void refresh();
  std::vector<Token> chunk_tokens(int c) const;

  const RetroParams<float>& model_;
  Retriever* retriever_;
  int step_;
  int m_;
  std::vector<Token> buffer_;
  int left_pad_ = 0;
  int fill_ = 0;
  int queries_ = 0;
  std::vector<ChunkState> chunks_;
  ChunkNeighbors latest_;  // result for the rightmost chunk at the last refresh
  bool have_latest_ = false;
};

// ---------------------------------------------------------------------------
// QA

enum class QaTemplate { A, B };

QaTemplate parse_template(const std::string& s);

struct Evidence {
  std::string title;
  std::string text;
};

struct QaSample {
  std::string question;
  std::vector<std::string> answers;
  std::vector<Evidence> passages;
};

std::vector<QaSample> read_qa_jsonl(const std::filesystem::path& path);

struct FormattedQa {
  std::string decoder_text;
  std::vector<Evidence> encoder_evidences;
};

/// A: top passage rendered into the decoder text, the next k passages go to
/// the encoder. B: question only, the first k passages go to the encoder.
FormattedQa format_qa(const std::string& question, const std::vector<Evidence>& evidences, QaTemplate tmpl, int k);

/// Passage text as neighbor token sequences of `length` tokens.
ChunkNeighbors evidence_neighbors(const std::vector<Evidence>& evidences, int length);

struct QaPair {
  std::vector<Token> context;
  std::vector<Token> answer;
};

struct QaBatch {
  std::vector<std::vector<Token>> tokens;
  std::vector<std::vector<bool>> valid;
  std::vector<std::vector<bool>> loss_mask;       // answer tokens only
  std::vector<std::vector<bool>> neighbor_slots;  // per chunk: false for batch filler
  int chunks = 0;
};

/// Context left-padded and answer right-padded to chunk boundaries, then
/// filler chunks on the right up to the batch maximum.
QaBatch batch_pad_qa(const std::vector<QaPair>& samples, int m, int max_seq);

/// Training examples from a padded batch; `neighbors[i]` is used for every
/// real chunk of sample i.
Batch qa_examples(const QaBatch& batch, const std::vector<ChunkNeighbors>& neighbors);

}  // namespace retro
