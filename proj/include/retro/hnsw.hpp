#pragma once

// Hierarchical navigable small-world graph over the rows of a point matrix.
// The graph stores only ids; callers pass the same matrix to search.

#include <cstdint>
#include <utility>
#include <vector>

#include "retro/common.hpp"

namespace retro {

class BinaryWriter;
class BinaryReader;

struct HnswParams {
  int degree = 16;  // links per node on upper layers; layer 0 allows 2x
  int ef_construction = 64;
  std::uint64_t seed = 0;
};

class Hnsw {
 public:
  using Candidate = std::pair<double, int>;  // (squared distance, id)

  void build(const Mat<float>& points, const HnswParams& params);

  /// Up to `k` nearest ids, ascending by (distance, id). `ef` is the beam
  /// width on layer 0 and is raised to at least k.
  std::vector<Candidate> search(const Mat<float>& points, const float* query, int k, int ef) const;

  int size() const { return static_cast<int>(levels_.size()); }
  int max_level() const { return max_level_; }
  const std::vector<int>& neighbors(int node, int level) const { return links_[static_cast<std::size_t>(node)][static_cast<std::size_t>(level)]; }
  bool base_layer_connected() const;

  void serialize(BinaryWriter& out) const;
  static Hnsw deserialize(BinaryReader& in);

 private:
  std::vector<Candidate> search_layer(const Mat<float>& points, const float* query, int entry, int ef, int level) const;
  std::vector<int> select_closest(const Mat<float>& points, int node, std::vector<Candidate> cands, int max_links) const;
  void connect_components(const Mat<float>& points);

  HnswParams params_;
  std::vector<int> levels_;
  std::vector<std::vector<std::vector<int>>> links_;  // node -> level -> ids
  int entry_ = -1;
  int max_level_ = -1;
};

}  // namespace retro
