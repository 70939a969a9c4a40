#include "retro/hnsw.hpp"

#include <algorithm>
#include <cmath>
#include <queue>
#include <random>

#include "retro/binary_io.hpp"
#include "retro/kmeans.hpp"

namespace retro {

namespace {

double dist(const Mat<float>& points, int id, const float* q) {
  return squared_l2(points.row(id).data(), q, points.cols());
}

}  // namespace

std::vector<Hnsw::Candidate> Hnsw::search_layer(const Mat<float>& points, const float* query, int entry, int ef,
                                                int level) const {
  std::vector<char> visited(levels_.size(), 0);
  // min-heap of candidates to expand, max-heap of current results
  std::priority_queue<Candidate, std::vector<Candidate>, std::greater<>> frontier;
  std::priority_queue<Candidate> results;
  const Candidate start{dist(points, entry, query), entry};
  frontier.push(start);
  results.push(start);
  visited[static_cast<std::size_t>(entry)] = 1;
  while (!frontier.empty()) {
    const Candidate c = frontier.top();
    if (c.first > results.top().first) break;
    frontier.pop();
    for (int nb : links_[static_cast<std::size_t>(c.second)][static_cast<std::size_t>(level)]) {
      if (visited[static_cast<std::size_t>(nb)]) continue;
      visited[static_cast<std::size_t>(nb)] = 1;
      const Candidate e{dist(points, nb, query), nb};
      if (static_cast<int>(results.size()) < ef || e < results.top()) {
        frontier.push(e);
        results.push(e);
        if (static_cast<int>(results.size()) > ef) results.pop();
      }
    }
  }
  std::vector<Candidate> out;
  out.reserve(results.size());
  while (!results.empty()) {
    out.push_back(results.top());
    results.pop();
  }
  std::reverse(out.begin(), out.end());
  return out;
}

std::vector<int> Hnsw::select_closest(const Mat<float>& points, int node, std::vector<Candidate> cands,
                                      int max_links) const {
  (void)points;
  std::sort(cands.begin(), cands.end());
  std::vector<int> out;
  for (const auto& c : cands) {
    if (c.second == node) continue;
    out.push_back(c.second);
    if (static_cast<int>(out.size()) == max_links) break;
  }
  return out;
}

void Hnsw::build(const Mat<float>& points, const HnswParams& params) {
  if (params.degree < 2) throw ConfigError("hnsw: degree must be >= 2");
  params_ = params;
  const int n = static_cast<int>(points.rows());
  levels_.assign(static_cast<std::size_t>(n), 0);
  links_.assign(static_cast<std::size_t>(n), {});
  entry_ = -1;
  max_level_ = -1;
  std::mt19937_64 rng(params.seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  const double ml = 1.0 / std::log(static_cast<double>(params.degree));

  for (int id = 0; id < n; ++id) {
    const int level = static_cast<int>(std::floor(-std::log(1.0 - unit(rng)) * ml));
    levels_[static_cast<std::size_t>(id)] = level;
    links_[static_cast<std::size_t>(id)].assign(static_cast<std::size_t>(level + 1), {});
    const float* q = points.row(id).data();
    if (entry_ < 0) {
      entry_ = id;
      max_level_ = level;
      continue;
    }
    int ep = entry_;
    for (int l = max_level_; l > level; --l) ep = search_layer(points, q, ep, 1, l).front().second;
    for (int l = std::min(level, max_level_); l >= 0; --l) {
      auto cands = search_layer(points, q, ep, params.ef_construction, l);
      const int cap = l == 0 ? 2 * params.degree : params.degree;
      auto chosen = select_closest(points, id, cands, params.degree);
      links_[static_cast<std::size_t>(id)][static_cast<std::size_t>(l)] = chosen;
      for (int nb : chosen) {
        auto& back = links_[static_cast<std::size_t>(nb)][static_cast<std::size_t>(l)];
        back.push_back(id);
        if (static_cast<int>(back.size()) > cap) {
          std::vector<Candidate> pool;
          for (int x : back) pool.emplace_back(dist(points, x, points.row(nb).data()), x);
          back = select_closest(points, nb, pool, cap);
        }
      }
      ep = cands.front().second;
    }
    if (level > max_level_) {
      max_level_ = level;
      entry_ = id;
    }
  }
  connect_components(points);
}

bool Hnsw::base_layer_connected() const {
  if (levels_.empty()) return true;
  std::vector<char> seen(levels_.size(), 0);
  std::vector<int> stack{entry_};
  seen[static_cast<std::size_t>(entry_)] = 1;
  std::size_t count = 1;
  while (!stack.empty()) {
    const int v = stack.back();
    stack.pop_back();
    for (int nb : links_[static_cast<std::size_t>(v)][0]) {
      if (!seen[static_cast<std::size_t>(nb)]) {
        seen[static_cast<std::size_t>(nb)] = 1;
        ++count;
        stack.push_back(nb);
      }
    }
  }
  return count == levels_.size();
}

// Pruning can orphan nodes from the entry point; link each unreachable node
// to its nearest reachable one in both directions.
void Hnsw::connect_components(const Mat<float>& points) {
  const auto n = levels_.size();
  if (n == 0) return;
  std::vector<char> seen(n, 0);
  auto flood = [&](int from) {
    std::vector<int> stack{from};
    seen[static_cast<std::size_t>(from)] = 1;
    while (!stack.empty()) {
      const int v = stack.back();
      stack.pop_back();
      for (int nb : links_[static_cast<std::size_t>(v)][0]) {
        if (!seen[static_cast<std::size_t>(nb)]) {
          seen[static_cast<std::size_t>(nb)] = 1;
          stack.push_back(nb);
        }
      }
    }
  };
  flood(entry_);
  for (std::size_t v = 0; v < n; ++v) {
    if (seen[v]) continue;
    int best = -1;
    double best_d = 0.0;
    for (std::size_t u = 0; u < n; ++u) {
      if (!seen[u]) continue;
      const double dd = dist(points, static_cast<int>(u), points.row(static_cast<Eigen::Index>(v)).data());
      if (best < 0 || dd < best_d) {
        best = static_cast<int>(u);
        best_d = dd;
      }
    }
    links_[v][0].push_back(best);
    links_[static_cast<std::size_t>(best)][0].push_back(static_cast<int>(v));
    flood(static_cast<int>(v));
  }
}

std::vector<Hnsw::Candidate> Hnsw::search(const Mat<float>& points, const float* query, int k, int ef) const {
  if (entry_ < 0 || k <= 0) return {};
  ef = std::max(ef, k);
  int ep = entry_;
  for (int l = max_level_; l > 0; --l) ep = search_layer(points, query, ep, 1, l).front().second;
  auto out = search_layer(points, query, ep, ef, 0);
  if (static_cast<int>(out.size()) > k) out.resize(static_cast<std::size_t>(k));
  return out;
}

void Hnsw::serialize(BinaryWriter& out) const {
  out.put(static_cast<std::int32_t>(params_.degree));
  out.put(static_cast<std::int32_t>(params_.ef_construction));
  out.put(params_.seed);
  out.put(static_cast<std::int32_t>(entry_));
  out.put(static_cast<std::int32_t>(max_level_));
  out.put(static_cast<std::uint32_t>(levels_.size()));
  for (std::size_t v = 0; v < levels_.size(); ++v) {
    out.put(static_cast<std::int32_t>(levels_[v]));
    for (const auto& layer : links_[v]) {
      out.put(static_cast<std::uint32_t>(layer.size()));
      for (int nb : layer) out.put(static_cast<std::int32_t>(nb));
    }
  }
}

Hnsw Hnsw::deserialize(BinaryReader& in) {
  Hnsw h;
  h.params_.degree = in.get<std::int32_t>();
  h.params_.ef_construction = in.get<std::int32_t>();
  h.params_.seed = in.get<std::uint64_t>();
  h.entry_ = in.get<std::int32_t>();
  h.max_level_ = in.get<std::int32_t>();
  const auto n = in.get<std::uint32_t>();
  h.levels_.resize(n);
  h.links_.resize(n);
  for (std::uint32_t v = 0; v < n; ++v) {
    const int level = in.get<std::int32_t>();
    if (level < 0 || level > 64) throw ParseError("hnsw: corrupt level");
    h.levels_[v] = level;
    h.links_[v].resize(static_cast<std::size_t>(level + 1));
    for (auto& layer : h.links_[v]) {
      const auto cnt = in.get<std::uint32_t>();
      if (cnt > n) throw ParseError("hnsw: corrupt adjacency");
      layer.resize(cnt);
      for (auto& nb : layer) {
        nb = in.get<std::int32_t>();
        if (nb < 0 || static_cast<std::uint32_t>(nb) >= n) throw ParseError("hnsw: link out of range");
      }
    }
  }
  return h;
}

}  // namespace retro
