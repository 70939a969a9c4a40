#pragma once

#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include "retro/model.hpp"

namespace testutil {

inline retro::ModelConfig tiny_config() {
  retro::ModelConfig c;
  c.n_layers = 2;
  c.hidden = 8;
  c.n_heads = 2;
  c.chunk_size = 4;
  c.max_seq = 8;
  c.k_neighbors = 2;
  c.cca_layers = {2};
  c.enc_layers = 1;
  c.neighbor_len = 8;
  c.init_std = 0.3;
  return c;
}

/// Perturbs every tensor, gains and biases included, so no gradient path is
/// trivially zero.
template <typename Scalar>
void jitter(retro::RetroParams<Scalar>& p, std::uint64_t seed, double scale = 0.2) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> nd(0.0, scale);
  for (auto& r : retro::param_refs(p)) {
    for (Eigen::Index i = 0; i < r.value->size(); ++i) r.value->data()[i] += static_cast<Scalar>(nd(rng));
  }
}

inline std::vector<retro::Token> random_tokens(std::size_t n, std::mt19937_64& rng, retro::Token vocab = 256) {
  std::uniform_int_distribution<retro::Token> d(0, vocab - 1);
  std::vector<retro::Token> t(n);
  for (auto& v : t) v = d(rng);
  return t;
}

inline retro::Neighbor random_neighbor(int len, std::mt19937_64& rng, int pads_at_end = 0) {
  auto t = random_tokens(static_cast<std::size_t>(len), rng);
  for (int i = 0; i < pads_at_end; ++i) t[static_cast<std::size_t>(len - 1 - i)] = retro::kPadId;
  return retro::Neighbor::from_tokens(std::move(t));
}

inline retro::SequenceNeighbors random_neighbors(const retro::ModelConfig& c, int chunks, std::mt19937_64& rng) {
  retro::SequenceNeighbors s(static_cast<std::size_t>(chunks));
  for (auto& ch : s) {
    for (int j = 0; j < c.k_neighbors; ++j) ch.push_back(random_neighbor(c.neighbor_len, rng, j));
  }
  return s;
}

inline std::vector<bool> all_valid(std::size_t n) { return std::vector<bool>(n, true); }


/// Fresh directory under the system temp dir, removed on destruction.
struct TempDir {
  std::filesystem::path path;
  explicit TempDir(const std::string& name) : path(std::filesystem::temp_directory_path() / ("retro_test_" + name)) {
    std::filesystem::remove_all(path);
    std::filesystem::create_directories(path);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path, ec);
  }
  std::filesystem::path operator/(const std::string& leaf) const { return path / leaf; }
};

}  // namespace testutil
