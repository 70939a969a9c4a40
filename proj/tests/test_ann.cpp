#include <doctest.h>

#include <random>
#include <set>

#include "retro/ann_index.hpp"
#include "retro/kmeans.hpp"
#include "retro/pq.hpp"
#include "test_helpers.hpp"

using namespace retro;

namespace {

Mat<float> random_unit(int n, int d, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<float> nd;
  Mat<float> x(n, d);
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < d; ++j) x(i, j) = nd(rng);
    x.row(i).normalize();
  }
  return x;
}

std::vector<std::int64_t> iota_ids(std::int64_t n) {
  std::vector<std::int64_t> ids(static_cast<std::size_t>(n));
  for (std::int64_t i = 0; i < n; ++i) ids[static_cast<std::size_t>(i)] = i;
  return ids;
}

double recall_at(const AnnIndex& index, const Mat<float>& data, const Mat<float>& queries, int k, int nprobe) {
  double hit = 0;
  for (Eigen::Index q = 0; q < queries.rows(); ++q) {
    const auto truth = brute_force_search(data, queries.row(q).data(), k);
    QueryParams p;
    p.k = k;
    p.nprobe = nprobe;
    const auto got = index.search(queries.row(q).data(), p);
    std::set<std::int64_t> t;
    for (const auto& h : truth) t.insert(h.chunk_id);
    for (const auto& h : got.hits) hit += t.count(h.chunk_id);
  }
  return hit / (static_cast<double>(k) * static_cast<double>(queries.rows()));
}

}  // namespace

TEST_CASE("kmeans fixed point on square corners") {
  Mat<float> pts(4, 2);
  pts << 0, 0, 0, 1, 1, 0, 1, 1;
  Mat<float> init(2, 2);
  init << 0.1f, 0.4f, 0.9f, 0.6f;
  const auto r = kmeans(pts, 2, 10, 1, &init);
  CHECK(r.centroids(0, 0) == 0.0f);
  CHECK(r.centroids(0, 1) == 0.5f);
  CHECK(r.centroids(1, 0) == 1.0f);
  CHECK(r.centroids(1, 1) == 0.5f);
  CHECK(r.assignment == std::vector<int>{0, 0, 1, 1});

  Mat<float> one(1, 3);
  one << 0.5f, -2.0f, 7.0f;
  CHECK(kmeans(one, 1, 5, 0).centroids == one);
  CHECK_THROWS_AS(kmeans(one, 2, 5, 0), ConfigError);
}

TEST_CASE("kmeans objective is non-increasing") {
  const auto x = random_unit(2000, 8, 3);
  const auto r = kmeans(x, 32, 15, 4);
  REQUIRE(r.objective_trace.size() >= 2);
  for (std::size_t i = 1; i < r.objective_trace.size(); ++i) {
    CHECK(r.objective_trace[i] <= r.objective_trace[i - 1] + 1e-9);
  }
  const auto again = kmeans(x, 32, 15, 4);
  CHECK(again.centroids == r.centroids);
}

TEST_CASE("hnsw base layer is connected and exhaustive beam is exact") {
  const auto pts = random_unit(300, 16, 5);
  Hnsw g;
  g.build(pts, HnswParams{8, 32, 6});
  CHECK(g.size() == 300);
  CHECK(g.base_layer_connected());
  const auto q = random_unit(20, 16, 7);
  for (int i = 0; i < 20; ++i) {
    const auto got = g.search(pts, q.row(i).data(), 5, 300);
    const auto truth = brute_force_search(pts, q.row(i).data(), 5);
    REQUIRE(got.size() == 5);
    for (int j = 0; j < 5; ++j) CHECK(got[static_cast<std::size_t>(j)].second == truth[static_cast<std::size_t>(j)].chunk_id);
  }
}

TEST_CASE("pq shapes, memorisation and exact adc") {
  const auto x = random_unit(12, 4, 8);
  const auto pq = train_pq(x, 2, 8, 10, 9);
  CHECK(pq.num_subquantizers() == 2);
  CHECK(pq.sub_dim() == 2);
  CHECK(pq.codebook(0).cols() == 2);
  CHECK(pq.reconstruction_error(x) < 1e-12);
  std::vector<std::uint8_t> code(2);
  for (int i = 0; i < 12; ++i) {
    for (int j = 0; j < 12; ++j) {
      pq.encode(x.row(j).data(), code.data());
      const auto table = pq.distance_table(x.row(i).data());
      const double adc = ProductQuantizer::adc_distance(table, code.data());
      CHECK(std::abs(adc - squared_l2(x.row(i).data(), x.row(j).data(), 4)) < 1e-9);
    }
  }
  CHECK_THROWS_AS(train_pq(x, 3, 8, 10, 9), ConfigError);
  CHECK_THROWS_AS(train_pq(x, 2, 9, 10, 9), ConfigError);
}

TEST_CASE("pq codebook size is 2^bits with enough data") {
  const auto x = random_unit(600, 8, 10);
  const auto pq = train_pq(x, 4, 8, 5, 11);
  CHECK(pq.codebook_size() == 256);
  CHECK(pq.codebook(3).allFinite());
}

TEST_CASE("opq rotation is orthogonal and never worse than identity") {
  const auto x = random_unit(800, 16, 12);
  OpqOptions o;
  o.bits = 4;
  o.pq_iters = 8;
  const auto r = train_opq(x, 4, 3, 13, o);
  CHECK(((r.transpose() * r) - Mat<float>::Identity(16, 16)).cwiseAbs().maxCoeff() < 1e-5);
  const Mat<float> eye = Mat<float>::Identity(16, 16);
  CHECK(opq_objective(x, r, 4, 13, o) <= opq_objective(x, eye, 4, 13, o) + 1e-9);

  Mat<float> same(50, 16);
  same.rowwise() = x.row(0);
  CHECK(train_opq(same, 4, 3, 1, o) == eye);
}

TEST_CASE("opq helps on correlated data") {
  OpqOptions o;
  o.bits = 4;
  o.pq_iters = 8;
  double with = 0, without = 0;
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    std::mt19937_64 rng(100 + seed);
    std::normal_distribution<float> nd;
    Mat<float> x(600, 8);
    for (int i = 0; i < 600; ++i) {
      const float a = nd(rng), b = nd(rng);
      // Each latent spans two subspaces.
      x.row(i) << a, b, 0.1f * nd(rng), 0.1f * nd(rng), a, b, 0.1f * nd(rng), 0.1f * nd(rng);
    }
    const auto r = train_opq(x, 2, 4, seed, o);
    with += opq_objective(x, r, 2, seed, o);
    without += opq_objective(x, Mat<float>(Mat<float>::Identity(8, 8)), 2, seed, o);
  }
  CHECK(with < without);
}

TEST_CASE("brute force search") {
  Mat<float> pts(3, 2);
  pts << 0, 0, 1, 0, 0, 1;
  const float q[2] = {0.9f, 0.1f};
  const auto all = brute_force_search(pts, q, 3);
  REQUIRE(all.size() == 3);
  CHECK(all[0].chunk_id == 1);
  CHECK(all[1].distance <= all[2].distance);
  const auto self = brute_force_search(pts, pts.row(2).data(), 1);
  CHECK(self[0].chunk_id == 2);
  CHECK(self[0].distance == 0.0);
  const float mid[2] = {0.5f, 0.5f};
  const auto tie = brute_force_search(pts, mid, 2);
  CHECK(tie[0].chunk_id == 0);
  CHECK(tie[1].chunk_id == 1);
  CHECK_THROWS_AS(brute_force_search(pts, q, 4), ArgumentError);
}

TEST_CASE("toy index: exact codes, filter and underfull") {
  Mat<float> pts(3, 2);
  pts << 0, 0, 1, 0, 0, 1;
  IndexConfig cfg;
  cfg.ncentroids = 1;
  cfg.num_subquantizers = 2;
  cfg.nprobe_default = 1;
  cfg.use_opq = false;
  auto index = AnnIndex::train(pts, cfg);
  index.add(pts, iota_ids(3));
  const float q[2] = {0.9f, 0.1f};
  QueryParams p;
  p.k = 1;
  auto r = index.search(q, p);
  REQUIRE(r.hits.size() == 1);
  CHECK(r.hits[0].chunk_id == 1);
  CHECK(r.hits[0].distance == doctest::Approx(0.02).epsilon(1e-5));

  p.top_N = 3;
  p.filter = [](std::int64_t id) { return id != 1; };
  r = index.search(q, p);
  CHECK(r.hits[0].chunk_id == 0);

  p.k = 3;
  p.filter = [](std::int64_t id) { return id == 2; };
  r = index.search(q, p);
  CHECK(r.underfull);
  CHECK(r.hits.size() == 1);

  CHECK_THROWS_AS(index.add(pts.topRows(1), iota_ids(1)), IntegrityError);
}

TEST_CASE("index add, assignment and serialization") {
  const auto data = random_unit(3000, 16, 21);
  IndexConfig cfg;
  cfg.ncentroids = 32;
  cfg.num_subquantizers = 4;
  cfg.hnsw_ef_search = 32;
  cfg.rerank_R = -1;
  cfg.seed = 22;
  auto index = AnnIndex::train(data, cfg);
  index.add(data, iota_ids(3000));
  std::size_t total = 0;
  std::set<std::int64_t> seen;
  for (int l = 0; l < 32; ++l) {
    total += index.list_size(l);
    for (auto id : index.list_ids(l)) seen.insert(id);
  }
  CHECK(total == 3000);
  CHECK(seen.size() == 3000);
  for (int i = 0; i < 3000; ++i) CHECK(index.assign(data.row(i).data()) == index.assign_exhaustive(data.row(i).data()));
  CHECK(index.coarse().graph.base_layer_connected());

  auto again = AnnIndex::train(data, cfg);
  again.add(data, iota_ids(3000));
  for (int l = 0; l < 32; ++l) CHECK(again.list_ids(l) == index.list_ids(l));

  testutil::TempDir dir("ann_io");
  index.save(dir / "index.bin");
  const auto loaded = AnnIndex::load(dir / "index.bin");
  const auto queries = random_unit(20, 16, 23);
  for (int q = 0; q < 20; ++q) {
    QueryParams p;
    p.k = 5;
    CHECK(loaded.search(queries.row(q).data(), p).hits == index.search(queries.row(q).data(), p).hits);
  }

  // Probing everything with a full re-rank is exact.
  for (int q = 0; q < 20; ++q) {
    QueryParams p;
    p.k = 10;
    p.nprobe = 32;
    const auto got = index.search(queries.row(q).data(), p);
    CHECK(got.lists_probed == 32);
    const auto truth = brute_force_search(data, queries.row(q).data(), 10);
    REQUIRE(got.hits.size() == truth.size());
    for (std::size_t i = 0; i < truth.size(); ++i) {
      CHECK(got.hits[i].chunk_id == truth[i].chunk_id);
      CHECK(got.hits[i].distance == doctest::Approx(truth[i].distance).epsilon(1e-9));
    }
  }
}

TEST_CASE("probe counter and recall growth in nprobe") {
  const auto data = random_unit(5000, 32, 31);
  IndexConfig cfg;
  cfg.ncentroids = 64;
  cfg.num_subquantizers = 8;
  cfg.seed = 32;
  auto index = AnnIndex::train(data, cfg);
  index.add(data, iota_ids(5000));
  const auto queries = random_unit(40, 32, 33);
  double prev = 0;
  for (int nprobe : {1, 2, 4, 8, 16, 32, 64}) {
    const double r = recall_at(index, data, queries, 10, nprobe);
    CHECK(r >= prev - 1e-12);
    prev = r;
    QueryParams p;
    p.nprobe = nprobe;
    const auto res = index.search(queries.row(0).data(), p);
    CHECK(res.lists_probed <= nprobe);
  }
}

TEST_CASE("index config validation") {
  IndexConfig c;
  CHECK_THROWS_AS(c.validate(60), ConfigError);
  c.nprobe_default = 0;
  CHECK_THROWS_AS(c.validate(64), ConfigError);
  CHECK(IndexConfig::from_json(IndexConfig{}.to_json()).to_json() == IndexConfig{}.to_json());
  CHECK_THROWS_AS(IndexConfig::from_json({{"nlist", 4}}), ConfigError);
}
