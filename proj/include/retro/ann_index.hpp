#pragma once

// IVF-PQ index over chunk embeddings: OPQ rotation, k-means coarse quantizer
// with HNSW assignment, PQ-coded residuals in inverted lists, and optional
// exact re-ranking from stored full vectors.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <unordered_set>
#include <span>
#include <vector>

#include <nlohmann/json.hpp>

#include "retro/common.hpp"
#include "retro/hnsw.hpp"
#include "retro/pq.hpp"

namespace retro {

struct IndexConfig {
  int ncentroids = 256;
  int num_subquantizers = 8;  // M
  int bits_per_code = 8;
  int nprobe_default = 16;
  int hnsw_degree = 16;
  int hnsw_ef_construction = 64;
  int hnsw_ef_search = 64;
  int rerank_R = 0;  // 0 disables re-ranking, negative re-ranks every candidate
  bool use_opq = true;
  int kmeans_iters = 20;
  int pq_iters = 15;
  int opq_iters = 3;
  int max_train_points = 65536;
  int opq_train_points = 8192;
  std::uint64_t seed = 0;

  void validate(int dim) const;
  nlohmann::json to_json() const;
  static IndexConfig from_json(const nlohmann::json& j);
};

struct CoarseQuantizer {
  Mat<float> centroids;
  Hnsw graph;

  /// `count` nearest centroid ids via the graph, ascending distance.
  std::vector<int> nearest(const float* x, int count, int ef) const;
};

/// Lloyd's k-means (k-means++ seeded) followed by an HNSW build over the final
/// centroids.
CoarseQuantizer train_coarse(const Mat<float>& vectors, int ncentroids, int iters, std::uint64_t seed,
                             const HnswParams& hnsw = {});

struct QueryParams {
  int k = 2;
  int nprobe = 0;  // 0 uses the index default
  int top_N = 0;   // candidate pool before filtering; 0 means k
  std::function<bool(std::int64_t)> filter;  // keep when true
};

struct SearchHit {
  std::int64_t chunk_id = -1;
  double distance = 0.0;
  bool operator==(const SearchHit&) const = default;
};

struct SearchResult {
  std::vector<SearchHit> hits;  // ascending distance, ties by chunk id
  bool underfull = false;
  int lists_probed = 0;
  std::size_t codes_scanned = 0;
};

class AnnIndex {
 public:
  AnnIndex() = default;

  /// Trains rotation, coarse quantizer and PQ on (a sample of) `vectors`.
  static AnnIndex train(const Mat<float>& vectors, const IndexConfig& config);

  /// Assigns, encodes and appends. Throws IntegrityError on a duplicate id.
  void add(const Mat<float>& vectors, std::span<const std::int64_t> ids);

  SearchResult search(const float* query, const QueryParams& params) const;

  /// Nearest list for an (unrotated) vector using the HNSW graph.
  int assign(const float* x) const;
  /// Same, by exhaustive scan over centroids.
  int assign_exhaustive(const float* x) const;

  const IndexConfig& config() const { return config_; }
  int dim() const { return dim_; }
  std::int64_t size() const { return total_; }
  std::size_t list_size(int list) const { return lists_[static_cast<std::size_t>(list)].ids.size(); }
  const std::vector<std::int64_t>& list_ids(int list) const { return lists_[static_cast<std::size_t>(list)].ids; }
  const Mat<float>& rotation() const { return rotation_; }
  const CoarseQuantizer& coarse() const { return coarse_; }
  const ProductQuantizer& pq() const { return pq_; }
  bool stores_vectors() const { return config_.rerank_R != 0; }

  void set_config_for_search(int nprobe, int rerank_R, int ef_search);

  /// `echo` is stored verbatim next to the tool version.
  void save(const std::filesystem::path& path, const nlohmann::json& echo = {}) const;
  /// {tool_version, echo} as written by save().
  const nlohmann::json& meta() const { return meta_; }
  static AnnIndex load(const std::filesystem::path& path);

 private:
  struct InvertedList {
    std::vector<std::int64_t> ids;
    std::vector<std::uint8_t> codes;  // M bytes per entry
    std::vector<std::int64_t> rows;   // rows of full_vectors_, when stored
  };

  Eigen::VectorXf rotate(const float* x) const;

  IndexConfig config_;
  int dim_ = 0;
  Mat<float> rotation_;
  CoarseQuantizer coarse_;
  ProductQuantizer pq_;
  std::vector<InvertedList> lists_;
  Mat<float> full_vectors_;
  std::int64_t full_rows_ = 0;
  std::int64_t total_ = 0;
  std::unordered_set<std::int64_t> id_set_;
  nlohmann::json meta_;
};

inline AnnIndex add_vectors(AnnIndex index, const Mat<float>& embeddings, std::span<const std::int64_t> ids) {
  index.add(embeddings, ids);
  return index;
}

inline SearchResult search(const AnnIndex& index, const float* query, const QueryParams& params) {
  return index.search(query, params);
}

/// Exact top-k by squared L2 over rows of `embeddings`; row i has id i.
/// Ties go to the lower id.
std::vector<SearchHit> brute_force_search(const Mat<float>& embeddings, const float* query, int k);

inline constexpr std::uint32_t kIndexVersion = 1;

}  // namespace retro
