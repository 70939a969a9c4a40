#include "retro/pq.hpp"

#include <limits>

#include "retro/binary_io.hpp"
#include "retro/kmeans.hpp"

namespace retro {

void ProductQuantizer::encode(const float* x, std::uint8_t* code) const {
  for (std::size_t m = 0; m < codebooks_.size(); ++m) {
    code[m] = static_cast<std::uint8_t>(nearest_centroid(codebooks_[m], x + m * static_cast<std::size_t>(sub_dim_)));
  }
}

void ProductQuantizer::decode(const std::uint8_t* code, float* out) const {
  for (std::size_t m = 0; m < codebooks_.size(); ++m) {
    const auto row = codebooks_[m].row(code[m]);
    std::copy(row.data(), row.data() + sub_dim_, out + m * static_cast<std::size_t>(sub_dim_));
  }
}

Mat<double> ProductQuantizer::distance_table(const float* query) const {
  Mat<double> table(num_subquantizers(), codebook_size());
  for (std::size_t m = 0; m < codebooks_.size(); ++m) {
    const float* q = query + m * static_cast<std::size_t>(sub_dim_);
    for (Eigen::Index j = 0; j < codebooks_[m].rows(); ++j) {
      table(static_cast<Eigen::Index>(m), j) = squared_l2(codebooks_[m].row(j).data(), q, sub_dim_);
    }
  }
  return table;
}

double ProductQuantizer::adc_distance(const Mat<double>& table, const std::uint8_t* code) {
  double s = 0.0;
  for (Eigen::Index m = 0; m < table.rows(); ++m) s += table(m, code[m]);
  return s;
}

Mat<float> ProductQuantizer::reconstruct(const Mat<float>& x) const {
  Mat<float> out(x.rows(), x.cols());
  std::vector<std::uint8_t> code(codebooks_.size());
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    encode(x.row(i).data(), code.data());
    decode(code.data(), out.row(i).data());
  }
  return out;
}

double ProductQuantizer::reconstruction_error(const Mat<float>& x) const {
  if (x.rows() == 0) return 0.0;
  const Mat<float> r = reconstruct(x);
  double s = 0.0;
  for (Eigen::Index i = 0; i < x.rows(); ++i) s += squared_l2(x.row(i).data(), r.row(i).data(), x.cols());
  return s / static_cast<double>(x.rows());
}

ProductQuantizer train_pq(const Mat<float>& vectors, int num_subquantizers, int bits, int iters, std::uint64_t seed,
                          const ProductQuantizer* warm_start) {
  const auto d = static_cast<int>(vectors.cols());
  if (num_subquantizers < 1 || d % num_subquantizers != 0) {
    throw ConfigError("train_pq: dimension " + std::to_string(d) + " not divisible by M=" +
                      std::to_string(num_subquantizers));
  }
  if (bits < 1 || bits > 8) throw ConfigError("train_pq: bits per code must be in [1, 8]");
  if (vectors.rows() < 1) throw ConfigError("train_pq: no training vectors");
  int ksub = 1 << bits;
  if (vectors.rows() < ksub) {
    log_warning("train_pq: " + std::to_string(vectors.rows()) + " training vectors < " + std::to_string(ksub) +
                " clusters; shrinking codebooks");
    ksub = static_cast<int>(vectors.rows());
  }
  ProductQuantizer pq;
  pq.dim_ = d;
  pq.bits_ = bits;
  pq.sub_dim_ = d / num_subquantizers;
  for (int m = 0; m < num_subquantizers; ++m) {
    const Mat<float> sub = vectors.middleCols(m * pq.sub_dim_, pq.sub_dim_);
    const Mat<float>* init = nullptr;
    if (warm_start && warm_start->num_subquantizers() == num_subquantizers && warm_start->codebook_size() == ksub &&
        warm_start->sub_dim() == pq.sub_dim_) {
      init = &warm_start->codebook(m);
    }
    pq.codebooks_.push_back(kmeans(sub, ksub, iters, seed + static_cast<std::uint64_t>(m), init).centroids);
  }
  return pq;
}

void ProductQuantizer::serialize(BinaryWriter& out) const {
  out.put(static_cast<std::uint32_t>(dim_));
  out.put(static_cast<std::uint32_t>(codebooks_.size()));
  out.put(static_cast<std::uint32_t>(bits_));
  out.put(static_cast<std::uint32_t>(codebook_size()));
  for (const auto& cb : codebooks_) out.put_span<float>(std::span<const float>(cb.data(), static_cast<std::size_t>(cb.size())));
}

ProductQuantizer ProductQuantizer::deserialize(BinaryReader& in) {
  ProductQuantizer pq;
  pq.dim_ = static_cast<int>(in.get<std::uint32_t>());
  const auto m = in.get<std::uint32_t>();
  pq.bits_ = static_cast<int>(in.get<std::uint32_t>());
  const auto ksub = in.get<std::uint32_t>();
  if (m == 0 || pq.dim_ % static_cast<int>(m) != 0 || ksub > 256) throw ParseError("pq: corrupt header");
  pq.sub_dim_ = pq.dim_ / static_cast<int>(m);
  for (std::uint32_t i = 0; i < m; ++i) {
    Mat<float> cb(ksub, pq.sub_dim_);
    in.get_span<float>(std::span<float>(cb.data(), static_cast<std::size_t>(cb.size())));
    pq.codebooks_.push_back(std::move(cb));
  }
  return pq;
}

double opq_objective(const Mat<float>& vectors, const Mat<float>& rotation, int num_subquantizers,
                     std::uint64_t seed, const OpqOptions& options) {
  const Mat<float> rotated = vectors * rotation;
  return train_pq(rotated, num_subquantizers, options.bits, options.pq_iters, seed).reconstruction_error(rotated);
}

Mat<float> train_opq(const Mat<float>& vectors, int num_subquantizers, int iters, std::uint64_t seed,
                     const OpqOptions& options) {
  const auto d = vectors.cols();
  if (num_subquantizers < 1 || d % num_subquantizers != 0) {
    throw ConfigError("train_opq: dimension not divisible by M");
  }
  const Mat<float> identity = Mat<float>::Identity(d, d);
  if (vectors.rows() == 0) return identity;
  bool degenerate = true;
  for (Eigen::Index i = 1; i < vectors.rows() && degenerate; ++i) degenerate = vectors.row(i) == vectors.row(0);
  if (degenerate) return identity;

  Mat<float> best = identity;
  double best_err = opq_objective(vectors, identity, num_subquantizers, seed, options);
  Mat<float> rotation = identity;
  ProductQuantizer pq;
  const Mat<double> xd = vectors.cast<double>();
  for (int it = 0; it < iters; ++it) {
    const Mat<float> rotated = vectors * rotation;
    pq = train_pq(rotated, num_subquantizers, options.bits, options.pq_iters, seed, it == 0 ? nullptr : &pq);
    const Mat<double> target = pq.reconstruct(rotated).cast<double>();
    // argmin_R ||X R - Y||_F over orthogonal R is U V^T for X^T Y = U S V^T.
    Eigen::JacobiSVD<Mat<double>> svd(xd.transpose() * target, Eigen::ComputeFullU | Eigen::ComputeFullV);
    const Mat<double> r = svd.matrixU() * svd.matrixV().transpose();
    rotation = r.cast<float>();
    const double err = opq_objective(vectors, rotation, num_subquantizers, seed, options);
    if (err < best_err) {
      best_err = err;
      best = rotation;
    }
  }
  return best;
}

}  // namespace retro
