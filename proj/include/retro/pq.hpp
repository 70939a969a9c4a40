#pragma once

// Product quantization and the OPQ rotation learned in front of it.

#include <cstdint>
#include <span>
#include <vector>

#include "retro/common.hpp"

namespace retro {

class BinaryWriter;
class BinaryReader;

class ProductQuantizer {
 public:
  ProductQuantizer() = default;

  int dim() const { return dim_; }
  int num_subquantizers() const { return static_cast<int>(codebooks_.size()); }
  int sub_dim() const { return sub_dim_; }
  int bits() const { return bits_; }
  /// Centroids per sub-codebook; 2^bits unless training data was scarcer.
  int codebook_size() const { return codebooks_.empty() ? 0 : static_cast<int>(codebooks_[0].rows()); }
  const Mat<float>& codebook(int m) const { return codebooks_[static_cast<std::size_t>(m)]; }

  void encode(const float* x, std::uint8_t* code) const;
  void decode(const std::uint8_t* code, float* out) const;
  /// M x ksub table of squared distances between each query slice and each
  /// sub-centroid (asymmetric distance computation).
  Mat<double> distance_table(const float* query) const;
  static double adc_distance(const Mat<double>& table, const std::uint8_t* code);

  /// Mean squared reconstruction error over the rows of `x`.
  double reconstruction_error(const Mat<float>& x) const;
  Mat<float> reconstruct(const Mat<float>& x) const;

  void serialize(BinaryWriter& out) const;
  static ProductQuantizer deserialize(BinaryReader& in);

  friend ProductQuantizer train_pq(const Mat<float>&, int, int, int, std::uint64_t, const ProductQuantizer*);

 private:
  int dim_ = 0;
  int sub_dim_ = 0;
  int bits_ = 0;
  std::vector<Mat<float>> codebooks_;  // M blocks of ksub x sub_dim
};

/// Independent k-means per subspace. `warm_start` reuses its codebooks as
/// initial centroids.
ProductQuantizer train_pq(const Mat<float>& vectors, int num_subquantizers, int bits, int iters, std::uint64_t seed,
                          const ProductQuantizer* warm_start = nullptr);

struct OpqOptions {
  int bits = 8;
  int pq_iters = 10;
};

/// Alternates PQ training with an orthogonal Procrustes update of the
/// rotation. Rotated vectors are x * R (row convention). Each candidate
/// rotation is scored by the reconstruction error of a PQ trained from scratch
/// with `seed`; the best candidate (identity included) is returned.
Mat<float> train_opq(const Mat<float>& vectors, int num_subquantizers, int iters, std::uint64_t seed,
                     const OpqOptions& options = {});

/// Reconstruction error of a fresh PQ on x * rotation, the score used by
/// train_opq.
double opq_objective(const Mat<float>& vectors, const Mat<float>& rotation, int num_subquantizers,
                     std::uint64_t seed, const OpqOptions& options = {});

}  // namespace retro
