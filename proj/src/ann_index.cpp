#include "retro/ann_index.hpp"

#include <algorithm>
#include <numeric>
#include <random>

#include "retro/binary_io.hpp"
#include "retro/kmeans.hpp"
#include "retro/parallel.hpp"

namespace retro {

void IndexConfig::validate(int dim) const {
  if (ncentroids < 1) throw ConfigError("index: ncentroids must be >= 1");
  if (num_subquantizers < 1 || dim % num_subquantizers != 0) {
    throw ConfigError("index: dimension " + std::to_string(dim) + " not divisible by M=" +
                      std::to_string(num_subquantizers));
  }
  if (bits_per_code < 1 || bits_per_code > 8) throw ConfigError("index: bits_per_code must be in [1, 8]");
  if (nprobe_default < 1 || nprobe_default > ncentroids) throw ConfigError("index: nprobe must be in [1, ncentroids]");
  if (hnsw_degree < 2) throw ConfigError("index: hnsw_degree must be >= 2");
  if (hnsw_ef_search < 1 || hnsw_ef_construction < 1) throw ConfigError("index: ef values must be >= 1");
}

nlohmann::json IndexConfig::to_json() const {
  return {{"ncentroids", ncentroids},
          {"M", num_subquantizers},
          {"bits_per_code", bits_per_code},
          {"nprobe_default", nprobe_default},
          {"hnsw_degree", hnsw_degree},
          {"hnsw_ef_construction", hnsw_ef_construction},
          {"hnsw_ef_search", hnsw_ef_search},
          {"rerank_R", rerank_R},
          {"use_opq", use_opq},
          {"kmeans_iters", kmeans_iters},
          {"pq_iters", pq_iters},
          {"opq_iters", opq_iters},
          {"max_train_points", max_train_points},
          {"opq_train_points", opq_train_points},
          {"seed", seed}};
}

IndexConfig IndexConfig::from_json(const nlohmann::json& j) {
  IndexConfig c;
  for (const auto& [key, v] : j.items()) {
    if (key == "ncentroids") c.ncentroids = v.get<int>();
    else if (key == "M") c.num_subquantizers = v.get<int>();
    else if (key == "bits_per_code") c.bits_per_code = v.get<int>();
    else if (key == "nprobe_default") c.nprobe_default = v.get<int>();
    else if (key == "hnsw_degree") c.hnsw_degree = v.get<int>();
    else if (key == "hnsw_ef_construction") c.hnsw_ef_construction = v.get<int>();
    else if (key == "hnsw_ef_search") c.hnsw_ef_search = v.get<int>();
    else if (key == "rerank_R") c.rerank_R = v.get<int>();
    else if (key == "use_opq") c.use_opq = v.get<bool>();
    else if (key == "kmeans_iters") c.kmeans_iters = v.get<int>();
    else if (key == "pq_iters") c.pq_iters = v.get<int>();
    else if (key == "opq_iters") c.opq_iters = v.get<int>();
    else if (key == "max_train_points") c.max_train_points = v.get<int>();
    else if (key == "opq_train_points") c.opq_train_points = v.get<int>();
    else if (key == "seed") c.seed = v.get<std::uint64_t>();
    else throw ConfigError("index: unknown key '" + key + "'");
  }
  return c;
}

std::vector<int> CoarseQuantizer::nearest(const float* x, int count, int ef) const {
  const auto hits = graph.search(centroids, x, count, std::max(ef, count));
  std::vector<int> out;
  out.reserve(hits.size());
  for (const auto& h : hits) out.push_back(h.second);
  return out;
}

CoarseQuantizer train_coarse(const Mat<float>& vectors, int ncentroids, int iters, std::uint64_t seed,
                             const HnswParams& hnsw) {
  if (vectors.rows() < ncentroids) {
    throw ConfigError("train_coarse: " + std::to_string(vectors.rows()) + " vectors < " + std::to_string(ncentroids) +
                      " centroids");
  }
  CoarseQuantizer cq;
  cq.centroids = kmeans(vectors, ncentroids, iters, seed).centroids;
  HnswParams p = hnsw;
  p.seed = hnsw.seed ^ seed;
  cq.graph.build(cq.centroids, p);
  return cq;
}

namespace {

Mat<float> sample_rows(const Mat<float>& x, int limit, std::uint64_t seed) {
  if (limit <= 0 || x.rows() <= limit) return x;
  std::vector<Eigen::Index> idx(static_cast<std::size_t>(x.rows()));
  std::iota(idx.begin(), idx.end(), Eigen::Index{0});
  std::mt19937_64 rng(seed);
  std::shuffle(idx.begin(), idx.end(), rng);
  idx.resize(static_cast<std::size_t>(limit));
  std::sort(idx.begin(), idx.end());
  Mat<float> out(limit, x.cols());
  for (int i = 0; i < limit; ++i) out.row(i) = x.row(idx[static_cast<std::size_t>(i)]);
  return out;
}

bool hit_less(const SearchHit& a, const SearchHit& b) {
  return a.distance < b.distance || (a.distance == b.distance && a.chunk_id < b.chunk_id);
}

}  // namespace

AnnIndex AnnIndex::train(const Mat<float>& vectors, const IndexConfig& config) {
  const int d = static_cast<int>(vectors.cols());
  config.validate(d);
  AnnIndex index;
  index.config_ = config;
  index.dim_ = d;

  const Mat<float> train = sample_rows(vectors, config.max_train_points, config.seed);
  if (config.use_opq) {
    const Mat<float> opq_sample = sample_rows(train, config.opq_train_points, config.seed + 1);
    index.rotation_ = train_opq(opq_sample, config.num_subquantizers, config.opq_iters, config.seed + 2,
                                {config.bits_per_code, config.pq_iters});
  } else {
    index.rotation_ = Mat<float>::Identity(d, d);
  }
  const Mat<float> rotated = train * index.rotation_;
  index.coarse_ = train_coarse(rotated, config.ncentroids, config.kmeans_iters, config.seed + 3,
                               {config.hnsw_degree, config.hnsw_ef_construction, config.seed + 4});
  Mat<float> residuals(rotated.rows(), d);
  for (Eigen::Index i = 0; i < rotated.rows(); ++i) {
    const int c = nearest_centroid(index.coarse_.centroids, rotated.row(i).data());
    residuals.row(i) = rotated.row(i) - index.coarse_.centroids.row(c);
  }
  index.pq_ = train_pq(residuals, config.num_subquantizers, config.bits_per_code, config.pq_iters, config.seed + 5);
  index.lists_.assign(static_cast<std::size_t>(config.ncentroids), {});
  return index;
}

Eigen::VectorXf AnnIndex::rotate(const float* x) const {
  const Eigen::Map<const Eigen::RowVectorXf> v(x, dim_);
  return (v * rotation_).transpose();
}

int AnnIndex::assign(const float* x) const {
  const Eigen::VectorXf y = rotate(x);
  return coarse_.nearest(y.data(), 1, config_.hnsw_ef_search).front();
}

int AnnIndex::assign_exhaustive(const float* x) const {
  const Eigen::VectorXf y = rotate(x);
  return nearest_centroid(coarse_.centroids, y.data());
}

void AnnIndex::add(const Mat<float>& vectors, std::span<const std::int64_t> ids) {
  if (lists_.empty()) throw ConfigError("index: add before train");
  if (vectors.cols() != dim_) throw ShapeError("index: vector dimension mismatch");
  if (static_cast<std::size_t>(vectors.rows()) != ids.size()) throw ShapeError("index: id count mismatch");
  {
    std::unordered_set<std::int64_t> batch;
    for (auto id : ids) {
      if (id_set_.count(id) || !batch.insert(id).second) {
        throw IntegrityError("index: duplicate chunk id " + std::to_string(id));
      }
    }
  }
  const auto n = static_cast<std::size_t>(vectors.rows());
  const auto m = static_cast<std::size_t>(pq_.num_subquantizers());
  std::vector<int> assignment(n);
  std::vector<std::uint8_t> codes(n * m);
  parallel_for(n, [&](std::size_t begin, std::size_t end) {
    Eigen::VectorXf residual(dim_);
    for (std::size_t i = begin; i < end; ++i) {
      const Eigen::VectorXf y = rotate(vectors.row(static_cast<Eigen::Index>(i)).data());
      const int c = coarse_.nearest(y.data(), 1, config_.hnsw_ef_search).front();
      assignment[i] = c;
      residual = y - coarse_.centroids.row(c).transpose();
      pq_.encode(residual.data(), codes.data() + i * m);
    }
  });
  if (stores_vectors()) {
    full_vectors_.conservativeResize(full_rows_ + static_cast<Eigen::Index>(n), dim_);
    full_vectors_.middleRows(full_rows_, static_cast<Eigen::Index>(n)) = vectors;
  }
  for (std::size_t i = 0; i < n; ++i) {
    auto& list = lists_[static_cast<std::size_t>(assignment[i])];
    list.ids.push_back(ids[i]);
    list.codes.insert(list.codes.end(), codes.begin() + static_cast<std::ptrdiff_t>(i * m),
                      codes.begin() + static_cast<std::ptrdiff_t>((i + 1) * m));
    if (stores_vectors()) list.rows.push_back(full_rows_ + static_cast<std::int64_t>(i));
    id_set_.insert(ids[i]);
  }
  if (stores_vectors()) full_rows_ += static_cast<std::int64_t>(n);
  total_ += static_cast<std::int64_t>(n);
}

void AnnIndex::set_config_for_search(int nprobe, int rerank_R, int ef_search) {
  if (nprobe > 0) config_.nprobe_default = std::min(nprobe, config_.ncentroids);
  if (ef_search > 0) config_.hnsw_ef_search = ef_search;
  if (rerank_R != config_.rerank_R) {
    if (config_.rerank_R == 0 && rerank_R != 0 && total_ > 0) {
      throw ConfigError("index: re-ranking needs full vectors stored at add time");
    }
    config_.rerank_R = rerank_R;
  }
}

SearchResult AnnIndex::search(const float* query, const QueryParams& params) const {
  if (total_ == 0) throw ArgumentError("index: search on an empty index");
  if (params.k < 1) throw ArgumentError("index: k must be >= 1");
  const int nprobe = std::clamp(params.nprobe > 0 ? params.nprobe : config_.nprobe_default, 1, config_.ncentroids);
  const int top_n = std::max(params.top_N, params.k);

  SearchResult result;
  const Eigen::VectorXf y = rotate(query);
  const auto probes = coarse_.nearest(y.data(), nprobe, std::max(config_.hnsw_ef_search, nprobe));
  const auto m = static_cast<std::size_t>(pq_.num_subquantizers());

  struct Cand {
    double dist;
    std::int64_t id;
    std::int64_t row;
  };
  std::vector<Cand> cands;
  Eigen::VectorXf residual(dim_);
  for (int list_id : probes) {
    const auto& list = lists_[static_cast<std::size_t>(list_id)];
    ++result.lists_probed;
    if (list.ids.empty()) continue;
    residual = y - coarse_.centroids.row(list_id).transpose();
    const Mat<double> table = pq_.distance_table(residual.data());
    for (std::size_t e = 0; e < list.ids.size(); ++e) {
      cands.push_back({ProductQuantizer::adc_distance(table, list.codes.data() + e * m), list.ids[e],
                       list.rows.empty() ? -1 : list.rows[e]});
    }
    result.codes_scanned += list.ids.size();
  }
  auto less = [](const Cand& a, const Cand& b) { return a.dist < b.dist || (a.dist == b.dist && a.id < b.id); };

  std::size_t pool = static_cast<std::size_t>(top_n);
  if (config_.rerank_R != 0 && full_vectors_.size() != 0) {
    const std::size_t r = config_.rerank_R < 0 ? cands.size() : static_cast<std::size_t>(config_.rerank_R);
    const std::size_t keep = std::min(cands.size(), r);
    std::partial_sort(cands.begin(), cands.begin() + static_cast<std::ptrdiff_t>(keep), cands.end(), less);
    cands.resize(keep);
    for (auto& c : cands) c.dist = squared_l2(full_vectors_.row(c.row).data(), query, dim_);
    std::sort(cands.begin(), cands.end(), less);
  } else {
    const std::size_t keep = std::min(cands.size(), pool);
    std::partial_sort(cands.begin(), cands.begin() + static_cast<std::ptrdiff_t>(keep), cands.end(), less);
    cands.resize(keep);
  }
  if (cands.size() > pool) cands.resize(pool);
  for (const auto& c : cands) {
    if (params.filter && !params.filter(c.id)) continue;
    result.hits.push_back({c.id, c.dist});
    if (static_cast<int>(result.hits.size()) == params.k) break;
  }
  result.underfull = static_cast<int>(result.hits.size()) < params.k;
  return result;
}

std::vector<SearchHit> brute_force_search(const Mat<float>& embeddings, const float* query, int k) {
  if (k < 0 || k > embeddings.rows()) {
    throw ArgumentError("brute_force_search: k=" + std::to_string(k) + " exceeds " + std::to_string(embeddings.rows()) +
                        " stored vectors");
  }
  std::vector<SearchHit> all(static_cast<std::size_t>(embeddings.rows()));
  for (Eigen::Index i = 0; i < embeddings.rows(); ++i) {
    all[static_cast<std::size_t>(i)] = {i, squared_l2(embeddings.row(i).data(), query, embeddings.cols())};
  }
  std::partial_sort(all.begin(), all.begin() + k, all.end(), hit_less);
  all.resize(static_cast<std::size_t>(k));
  return all;
}

void AnnIndex::save(const std::filesystem::path& path, const nlohmann::json& echo) const {
  BinaryWriter out;
  out.magic("RTIX");
  out.put(kIndexVersion);
  out.put(static_cast<std::uint32_t>(dim_));
  out.put_string(config_.to_json().dump());
  out.put_string(nlohmann::json{{"tool_version", kToolVersion}, {"echo", echo}}.dump());
  out.put_span<float>(std::span<const float>(coarse_.centroids.data(), static_cast<std::size_t>(coarse_.centroids.size())));
  coarse_.graph.serialize(out);
  out.put_span<float>(std::span<const float>(rotation_.data(), static_cast<std::size_t>(rotation_.size())));
  pq_.serialize(out);
  out.put(static_cast<std::uint32_t>(lists_.size()));
  for (const auto& list : lists_) {
    out.put(static_cast<std::uint64_t>(list.ids.size()));
    out.put_span<std::int64_t>(list.ids);
    out.put_span<std::uint8_t>(list.codes);
    out.put(static_cast<std::uint64_t>(list.rows.size()));
    out.put_span<std::int64_t>(list.rows);
  }
  out.put(static_cast<std::uint64_t>(full_rows_));
  out.put_span<float>(std::span<const float>(full_vectors_.data(), static_cast<std::size_t>(full_vectors_.size())));
  out.write_file(path);
}

AnnIndex AnnIndex::load(const std::filesystem::path& path) {
  auto in = BinaryReader::from_file(path);
  in.expect_magic("RTIX");
  if (in.get<std::uint32_t>() != kIndexVersion) throw ParseError("index: unsupported version");
  AnnIndex index;
  index.dim_ = static_cast<int>(in.get<std::uint32_t>());
  try {
    index.config_ = IndexConfig::from_json(nlohmann::json::parse(in.get_string()));
    index.meta_ = nlohmann::json::parse(in.get_string());
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("index: bad config block: ") + e.what());
  }
  index.config_.validate(index.dim_);
  index.coarse_.centroids.resize(index.config_.ncentroids, index.dim_);
  in.get_span<float>(std::span<float>(index.coarse_.centroids.data(), static_cast<std::size_t>(index.coarse_.centroids.size())));
  index.coarse_.graph = Hnsw::deserialize(in);
  index.rotation_.resize(index.dim_, index.dim_);
  in.get_span<float>(std::span<float>(index.rotation_.data(), static_cast<std::size_t>(index.rotation_.size())));
  index.pq_ = ProductQuantizer::deserialize(in);
  const auto nlists = in.get<std::uint32_t>();
  if (nlists != static_cast<std::uint32_t>(index.config_.ncentroids)) throw ParseError("index: list count mismatch");
  index.lists_.resize(nlists);
  const auto m = static_cast<std::size_t>(index.pq_.num_subquantizers());
  for (auto& list : index.lists_) {
    const auto n = in.get<std::uint64_t>();
    list.ids.resize(n);
    in.get_span<std::int64_t>(list.ids);
    list.codes.resize(n * m);
    in.get_span<std::uint8_t>(list.codes);
    list.rows.resize(in.get<std::uint64_t>());
    in.get_span<std::int64_t>(list.rows);
    for (auto id : list.ids) index.id_set_.insert(id);
    index.total_ += static_cast<std::int64_t>(n);
  }
  index.full_rows_ = static_cast<std::int64_t>(in.get<std::uint64_t>());
  index.full_vectors_.resize(index.full_rows_, index.dim_);
  in.get_span<float>(std::span<float>(index.full_vectors_.data(), static_cast<std::size_t>(index.full_vectors_.size())));
  if (!in.at_end()) throw ParseError("index: trailing bytes");
  return index;
}

}  // namespace retro
