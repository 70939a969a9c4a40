#pragma once

// Dense primitives with hand-written backward passes, finite-difference
// gradient checking and Adam. Everything is templated on the scalar type so
// the same code runs in double (gradient checks) and float (training).

#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "retro/common.hpp"

namespace retro {

template <typename Scalar>
bool all_finite(const Mat<Scalar>& x) {
  return x.allFinite();
}

template <typename Scalar>
Mat<Scalar> matmul(const Mat<Scalar>& a, const Mat<Scalar>& b) {
  if (a.cols() != b.rows()) {
    throw ShapeError("matmul: inner dimensions differ (" + std::to_string(a.cols()) + " vs " +
                     std::to_string(b.rows()) + ")");
  }
  return a * b;
}

// ---------------------------------------------------------------------------
// softmax

/// Softmax along `axis` (0: down each column, 1: along each row), with
/// max-subtraction.
template <typename Scalar>
Mat<Scalar> softmax(const Mat<Scalar>& x, int axis = 1) {
  if (axis != 0 && axis != 1) throw ShapeError("softmax: axis must be 0 or 1");
  if ((axis == 1 && x.cols() == 0) || (axis == 0 && x.rows() == 0)) {
    throw ShapeError("softmax: empty axis");
  }
  if (axis == 0) return softmax<Scalar>(Mat<Scalar>(x.transpose()), 1).transpose();
  Mat<Scalar> y(x.rows(), x.cols());
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    const Scalar mx = x.row(r).maxCoeff();
    y.row(r) = (x.row(r).array() - mx).exp().matrix();
    y.row(r) /= y.row(r).sum();
  }
  return y;
}

/// Row softmax restricted to `allowed` entries. Disallowed entries are exactly
/// zero; a row with nothing allowed is all zeros.
template <typename Scalar>
Mat<Scalar> masked_softmax_rows(const Mat<Scalar>& x, const Mask& allowed) {
  Mat<Scalar> y = Mat<Scalar>::Zero(x.rows(), x.cols());
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    Scalar mx = -std::numeric_limits<Scalar>::infinity();
    for (Eigen::Index c = 0; c < x.cols(); ++c) {
      if (allowed(r, c) && x(r, c) > mx) mx = x(r, c);
    }
    if (mx == -std::numeric_limits<Scalar>::infinity()) continue;
    Scalar sum = 0;
    for (Eigen::Index c = 0; c < x.cols(); ++c) {
      if (allowed(r, c)) {
        y(r, c) = std::exp(x(r, c) - mx);
        sum += y(r, c);
      }
    }
    y.row(r) /= sum;
  }
  return y;
}

/// Backward of a row softmax given its output `p`: dx = p * (dy - <dy, p>).
template <typename Scalar>
Mat<Scalar> softmax_rows_backward(const Mat<Scalar>& p, const Mat<Scalar>& dy) {
  Mat<Scalar> dx(p.rows(), p.cols());
  for (Eigen::Index r = 0; r < p.rows(); ++r) {
    const Scalar dot = p.row(r).dot(dy.row(r));
    dx.row(r) = (p.row(r).array() * (dy.row(r).array() - dot)).matrix();
  }
  return dx;
}

// ---------------------------------------------------------------------------
// layer norm

template <typename Scalar>
struct LayerNormCache {
  Mat<Scalar> normalized;            // (x - mean) * rstd
  Eigen::Matrix<Scalar, Eigen::Dynamic, 1> rstd;
};

/// Row-wise layer norm; gamma and beta are 1 x D.
template <typename Scalar>
Mat<Scalar> layer_norm(const Mat<Scalar>& x, const Mat<Scalar>& gamma, const Mat<Scalar>& beta,
                       Scalar eps, LayerNormCache<Scalar>* cache = nullptr) {
  const Eigen::Index d = x.cols();
  if (d < 1) throw ShapeError("layer_norm: empty feature axis");
  if (gamma.size() != d || beta.size() != d) throw ShapeError("layer_norm: gamma/beta size mismatch");
  Mat<Scalar> xhat(x.rows(), d);
  Eigen::Matrix<Scalar, Eigen::Dynamic, 1> rstd(x.rows());
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    const Scalar mean = x.row(r).mean();
    const auto centered = (x.row(r).array() - mean).eval();
    const Scalar var = centered.square().mean();
    rstd(r) = Scalar(1) / std::sqrt(var + eps);
    xhat.row(r) = (centered * rstd(r)).matrix();
  }
  Mat<Scalar> y = (xhat.array().rowwise() * gamma.array().row(0)).rowwise() + beta.array().row(0);
  if (cache) {
    cache->normalized = std::move(xhat);
    cache->rstd = std::move(rstd);
  }
  return y;
}

/// Accumulates into dgamma/dbeta and returns dx.
template <typename Scalar>
Mat<Scalar> layer_norm_backward(const LayerNormCache<Scalar>& cache, const Mat<Scalar>& gamma,
                                const Mat<Scalar>& dy, Mat<Scalar>& dgamma, Mat<Scalar>& dbeta) {
  const auto& xhat = cache.normalized;
  dgamma.row(0) += (dy.array() * xhat.array()).colwise().sum().matrix();
  dbeta.row(0) += dy.colwise().sum();
  const Mat<Scalar> dxhat = dy.array().rowwise() * gamma.array().row(0);
  Mat<Scalar> dx(dy.rows(), dy.cols());
  for (Eigen::Index r = 0; r < dy.rows(); ++r) {
    const Scalar mean_d = dxhat.row(r).mean();
    const Scalar mean_dx = (dxhat.row(r).array() * xhat.row(r).array()).mean();
    dx.row(r) = (cache.rstd(r) * (dxhat.row(r).array() - mean_d - xhat.row(r).array() * mean_dx)).matrix();
  }
  return dx;
}

// ---------------------------------------------------------------------------
// linear / GELU

/// y = x W + b, W is in x out, b is 1 x out.
template <typename Scalar>
Mat<Scalar> linear(const Mat<Scalar>& x, const Mat<Scalar>& w, const Mat<Scalar>& b) {
  if (x.cols() != w.rows() || b.cols() != w.cols()) throw ShapeError("linear: shape mismatch");
  Mat<Scalar> y = x * w;
  y.rowwise() += b.row(0);
  return y;
}

template <typename Scalar>
Mat<Scalar> linear_backward(const Mat<Scalar>& x, const Mat<Scalar>& w, const Mat<Scalar>& dy,
                            Mat<Scalar>& dw, Mat<Scalar>& db) {
  dw.noalias() += x.transpose() * dy;
  db.row(0) += dy.colwise().sum();
  return dy * w.transpose();
}

namespace detail {
template <typename Scalar>
constexpr Scalar kGeluC = Scalar(0.7978845608028654);  // sqrt(2/pi)
template <typename Scalar>
constexpr Scalar kGeluA = Scalar(0.044715);
}  // namespace detail

/// tanh-approximated GELU.
template <typename Scalar>
Mat<Scalar> gelu(const Mat<Scalar>& x) {
  using namespace detail;
  return x.unaryExpr([](Scalar v) {
    return Scalar(0.5) * v * (Scalar(1) + std::tanh(kGeluC<Scalar> * (v + kGeluA<Scalar> * v * v * v)));
  });
}

template <typename Scalar>
Mat<Scalar> gelu_backward(const Mat<Scalar>& x, const Mat<Scalar>& dy) {
  using namespace detail;
  Mat<Scalar> dx(x.rows(), x.cols());
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    const Scalar v = x.data()[i];
    const Scalar t = std::tanh(kGeluC<Scalar> * (v + kGeluA<Scalar> * v * v * v));
    const Scalar dt = (Scalar(1) - t * t) * kGeluC<Scalar> * (Scalar(1) + Scalar(3) * kGeluA<Scalar> * v * v);
    dx.data()[i] = dy.data()[i] * (Scalar(0.5) * (Scalar(1) + t) + Scalar(0.5) * v * dt);
  }
  return dx;
}

// ---------------------------------------------------------------------------
// multi-head scaled dot-product attention (projections excluded)

template <typename Scalar>
struct AttentionCoreCache {
  std::vector<Mat<Scalar>> probs;  // one [Tq x Tk] matrix per head
};

/// q: Tq x D, k/v: Tk x D, D split into `heads` equal slices.
template <typename Scalar>
Mat<Scalar> attention_core(const Mat<Scalar>& q, const Mat<Scalar>& k, const Mat<Scalar>& v,
                           const Mask& allowed, int heads, AttentionCoreCache<Scalar>* cache) {
  const Eigen::Index d = q.cols();
  if (heads <= 0 || d % heads != 0) throw ShapeError("attention: width not divisible by heads");
  if (k.cols() != d || v.cols() != d || k.rows() != v.rows()) throw ShapeError("attention: k/v shape");
  if (allowed.rows() != q.rows() || allowed.cols() != k.rows()) throw ShapeError("attention: mask shape");
  const Eigen::Index dh = d / heads;
  const Scalar scale = Scalar(1) / std::sqrt(Scalar(dh));
  Mat<Scalar> out(q.rows(), d);
  if (cache) cache->probs.resize(static_cast<std::size_t>(heads));
  for (int h = 0; h < heads; ++h) {
    const auto qh = q.middleCols(h * dh, dh);
    const auto kh = k.middleCols(h * dh, dh);
    const auto vh = v.middleCols(h * dh, dh);
    Mat<Scalar> scores = (qh * kh.transpose()) * scale;
    Mat<Scalar> p = masked_softmax_rows<Scalar>(scores, allowed);
    out.middleCols(h * dh, dh).noalias() = p * vh;
    if (cache) cache->probs[static_cast<std::size_t>(h)] = std::move(p);
  }
  return out;
}

template <typename Scalar>
void attention_core_backward(const Mat<Scalar>& q, const Mat<Scalar>& k, const Mat<Scalar>& v,
                             const AttentionCoreCache<Scalar>& cache, const Mat<Scalar>& dout, int heads,
                             Mat<Scalar>& dq, Mat<Scalar>& dk, Mat<Scalar>& dv) {
  const Eigen::Index d = q.cols();
  const Eigen::Index dh = d / heads;
  const Scalar scale = Scalar(1) / std::sqrt(Scalar(dh));
  dq.setZero(q.rows(), d);
  dk.setZero(k.rows(), d);
  dv.setZero(v.rows(), d);
  for (int h = 0; h < heads; ++h) {
    const auto& p = cache.probs[static_cast<std::size_t>(h)];
    const auto doh = dout.middleCols(h * dh, dh);
    dv.middleCols(h * dh, dh).noalias() = p.transpose() * doh;
    const Mat<Scalar> dp = doh * v.middleCols(h * dh, dh).transpose();
    const Mat<Scalar> ds = softmax_rows_backward<Scalar>(p, dp) * scale;
    dq.middleCols(h * dh, dh).noalias() = ds * k.middleCols(h * dh, dh);
    dk.middleCols(h * dh, dh).noalias() = ds.transpose() * q.middleCols(h * dh, dh);
  }
}

// ---------------------------------------------------------------------------
// cross entropy

/// Sum of weighted negative log-likelihoods of `targets` under row softmax of
/// `logits`. If `dlogits` is given it receives d(sum)/d(logits) scaled by
/// `grad_scale`.
template <typename Scalar>
double cross_entropy_sum(const Mat<Scalar>& logits, std::span<const Token> targets,
                         std::span<const Scalar> weights, Mat<Scalar>* dlogits = nullptr,
                         Scalar grad_scale = Scalar(1)) {
  if (static_cast<Eigen::Index>(targets.size()) != logits.rows() || targets.size() != weights.size()) {
    throw ShapeError("cross_entropy: target/weight length mismatch");
  }
  if (dlogits) dlogits->setZero(logits.rows(), logits.cols());
  double total = 0.0;
  for (Eigen::Index r = 0; r < logits.rows(); ++r) {
    const Scalar w = weights[static_cast<std::size_t>(r)];
    if (w == Scalar(0)) continue;
    const auto t = static_cast<Eigen::Index>(targets[static_cast<std::size_t>(r)]);
    if (t >= logits.cols()) throw VocabError("cross_entropy: target id out of range");
    const Scalar mx = logits.row(r).maxCoeff();
    const Scalar sum = (logits.row(r).array() - mx).exp().sum();
    const Scalar log_z = mx + std::log(sum);
    total += static_cast<double>(w) * static_cast<double>(log_z - logits(r, t));
    if (dlogits) {
      dlogits->row(r) = ((logits.row(r).array() - log_z).exp() * (w * grad_scale)).matrix();
      (*dlogits)(r, t) -= w * grad_scale;
    }
  }
  return total;
}

// ---------------------------------------------------------------------------
// parameters, gradient check, Adam

template <typename Scalar>
struct ParamRef {
  std::string name;
  Mat<Scalar>* value = nullptr;
  bool frozen = false;
};

struct GradCheckEntry {
  std::string name;
  double rel_error = 0.0;
  double max_abs_analytic = 0.0;
  bool frozen = false;
};

struct GradCheckReport {
  std::vector<GradCheckEntry> entries;
  double max_rel_error = 0.0;
  bool passed = false;
};

/// Central finite differences (step h) against analytic gradients, one entry
/// per parameter tensor. The relative error is ||a - f|| / max(||a||, ||f||),
/// falling back to the absolute error when both norms are below 1e-10.
/// Frozen parameters are not perturbed; their analytic gradient must be 0.
GradCheckReport grad_check(const std::function<double()>& loss, std::span<const ParamRef<double>> params,
                           std::span<const Mat<double>> analytic, double tolerance, double h = 1e-5);

struct AdamHyper {
  double lr = 3e-4;
  double beta1 = 0.9;
  double beta2 = 0.95;
  double eps = 1e-8;
  double weight_decay = 0.1;

  void validate() const;
};

template <typename Scalar>
struct AdamState {
  std::vector<Mat<Scalar>> first_moment;
  std::vector<Mat<Scalar>> second_moment;
  std::int64_t t = 0;

  static AdamState zeros_like(std::span<const ParamRef<Scalar>> params) {
    AdamState s;
    for (const auto& p : params) {
      s.first_moment.push_back(Mat<Scalar>::Zero(p.value->rows(), p.value->cols()));
      s.second_moment.push_back(Mat<Scalar>::Zero(p.value->rows(), p.value->cols()));
    }
    return s;
  }
};

/// Bias-corrected Adam with decoupled weight decay. Frozen parameters and
/// their moments are left untouched; t advances by one.
template <typename Scalar>
void adam_step(std::span<const ParamRef<Scalar>> params, std::span<const Mat<Scalar>> grads,
               AdamState<Scalar>& state, const AdamHyper& hyper) {
  hyper.validate();
  if (grads.size() != params.size() || state.first_moment.size() != params.size()) {
    throw ShapeError("adam_step: parameter/gradient/state count mismatch");
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (grads[i].rows() != params[i].value->rows() || grads[i].cols() != params[i].value->cols()) {
      throw ShapeError("adam_step: gradient shape mismatch for " + params[i].name);
    }
    if (!grads[i].allFinite()) throw NumericError("adam_step: non-finite gradient for " + params[i].name);
  }
  state.t += 1;
  const double bc1 = 1.0 - std::pow(hyper.beta1, static_cast<double>(state.t));
  const double bc2 = 1.0 - std::pow(hyper.beta2, static_cast<double>(state.t));
  const auto b1 = static_cast<Scalar>(hyper.beta1);
  const auto b2 = static_cast<Scalar>(hyper.beta2);
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (params[i].frozen) continue;
    auto& m = state.first_moment[i];
    auto& v = state.second_moment[i];
    auto& p = *params[i].value;
    const auto& g = grads[i];
    m = b1 * m + (Scalar(1) - b1) * g;
    v = b2 * v + (Scalar(1) - b2) * g.cwiseProduct(g);
    for (Eigen::Index j = 0; j < p.size(); ++j) {
      const double mhat = static_cast<double>(m.data()[j]) / bc1;
      const double vhat = static_cast<double>(v.data()[j]) / bc2;
      const double pj = static_cast<double>(p.data()[j]);
      const double update = mhat / (std::sqrt(vhat) + hyper.eps) + hyper.weight_decay * pj;
      p.data()[j] = static_cast<Scalar>(pj - hyper.lr * update);
    }
  }
}

/// Scales all gradients so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
template <typename Scalar>
double clip_global_norm(std::span<Mat<Scalar>> grads, double max_norm) {
  double sq = 0.0;
  for (const auto& g : grads) sq += g.template cast<double>().squaredNorm();
  const double norm = std::sqrt(sq);
  if (max_norm > 0 && norm > max_norm) {
    const auto s = static_cast<Scalar>(max_norm / norm);
    for (auto& g : grads) g *= s;
  }
  return norm;
}

}  // namespace retro
