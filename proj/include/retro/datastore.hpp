#pragma once

// Chunk-level key/value retrieval database: m-token chunks with their
// m-token continuations as values, hashed chunk embeddings as keys.

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "retro/common.hpp"

namespace retro {

struct DatastoreConfig {
  int chunk_size = 64;
  int embed_dim = 64;
  std::uint64_t hash_seed = 0;
  int position_buckets = 4;

  void validate() const;
  nlohmann::json to_json() const;
  static DatastoreConfig from_json(const nlohmann::json& j);
};

struct ChunkRecord {
  std::int64_t chunk_id = 0;
  std::int64_t doc_id = 0;
  std::int64_t offset = 0;  // token index in the document, multiple of m
  std::vector<Token> tokens;
  std::vector<Token> continuation;  // next chunk of the same document, pad-filled at the end
};

using Embedding = Eigen::VectorXf;

/// Splits a document into ceil(n/m) pad-filled chunks. Chunk ids start at
/// `first_chunk_id`.
std::vector<ChunkRecord> chunk_document(std::span<const Token> tokens, int chunk_size, std::int64_t doc_id = 0,
                                        std::int64_t first_chunk_id = 0);

/// Feature-hashing embedder: signed unigram and bigram features keyed by
/// position bucket, L2-normalized. An all-pad chunk maps to e_1.
Embedding embed_chunk(std::span<const Token> tokens, const DatastoreConfig& config);

struct CorpusDocument {
  std::string id;
  std::string text;
};

std::vector<CorpusDocument> read_corpus_jsonl(const std::filesystem::path& path);

struct DocumentSpan {
  std::string id;
  std::int64_t first_chunk = 0;
  std::int64_t num_chunks = 0;
  std::int64_t num_tokens = 0;
};

/// Read-only view of a built datastore directory.
class Datastore {
 public:
  static Datastore open(const std::filesystem::path& dir);

  std::int64_t size() const { return num_chunks_; }
  int chunk_size() const { return config_.chunk_size; }
  const DatastoreConfig& config() const { return config_; }
  const std::vector<DocumentSpan>& documents() const { return documents_; }

  /// Chunk tokens followed by continuation tokens (2m ids).
  std::vector<Token> fetch_neighbor_tokens(std::int64_t chunk_id) const;
  ChunkRecord record(std::int64_t chunk_id) const;
  /// N x d row-major embedding matrix.
  const Mat<float>& embeddings() const { return embeddings_; }

 private:
  DatastoreConfig config_;
  std::int64_t num_chunks_ = 0;
  std::vector<Token> records_;  // N * 2m
  Mat<float> embeddings_;
  std::vector<DocumentSpan> documents_;
};

struct DatastoreBuildResult {
  std::int64_t num_chunks = 0;
  std::filesystem::path dir;
};

/// Writes chunks.bin, embeds.bin and manifest.json under `out_dir`. `echo` is
/// embedded verbatim in the manifest.
DatastoreBuildResult build_datastore(const std::filesystem::path& corpus_path, const DatastoreConfig& config,
                                     const std::filesystem::path& out_dir, const nlohmann::json& echo = {});
DatastoreBuildResult build_datastore(const std::vector<CorpusDocument>& docs, const DatastoreConfig& config,
                                     const std::filesystem::path& out_dir, const nlohmann::json& echo = {});

inline constexpr std::uint32_t kChunksVersion = 1;
inline constexpr std::uint32_t kEmbedsVersion = 1;
/// Byte size of the chunks.bin header ("RTCK", version, m, N).
inline constexpr std::size_t kChunksHeaderBytes = 4 + 4 + 4 + 8;

}  // namespace retro
