#pragma once

// Dense building blocks shared by the forward and backward passes. Everything
// here is row-wise over a P x d activation matrix and templated on the scalar.

#include <Eigen/Dense>

#include <cmath>

namespace vitcd::kernels {

template <typename Scalar>
using MatrixX = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;
template <typename Scalar>
using VectorX = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

template <typename Scalar>
struct LayerNormCache {
  MatrixX<Scalar> normalized;  // (x - mean) / std, before the affine part
  VectorX<Scalar> inv_std;     // one per row
};

template <typename Derived, typename Gamma, typename Beta>
MatrixX<typename Derived::Scalar> layer_norm_rows(
    const Eigen::MatrixBase<Derived>& x, const Eigen::MatrixBase<Gamma>& gamma,
    const Eigen::MatrixBase<Beta>& beta, typename Derived::Scalar epsilon,
    LayerNormCache<typename Derived::Scalar>* cache = nullptr) {
  using Scalar = typename Derived::Scalar;
  const Eigen::Index cols = x.cols();
  VectorX<Scalar> mean = x.rowwise().mean();
  MatrixX<Scalar> centered = x.colwise() - mean;
  VectorX<Scalar> var = centered.rowwise().squaredNorm() / Scalar(cols);
  VectorX<Scalar> inv_std = (var.array() + epsilon).rsqrt().matrix();
  MatrixX<Scalar> normalized = inv_std.asDiagonal() * centered;
  MatrixX<Scalar> y = (normalized * gamma.asDiagonal()).rowwise() + beta.transpose();
  if (cache) {
    cache->normalized = std::move(normalized);
    cache->inv_std = std::move(inv_std);
  }
  return y;
}

// Full Jacobian of the normalization, statistics included.
template <typename Derived, typename Gamma>
MatrixX<typename Derived::Scalar> layer_norm_rows_backward(
    const Eigen::MatrixBase<Derived>& grad_out, const Eigen::MatrixBase<Gamma>& gamma,
    const LayerNormCache<typename Derived::Scalar>& cache) {
  using Scalar = typename Derived::Scalar;
  const Scalar cols = Scalar(grad_out.cols());
  MatrixX<Scalar> g = grad_out * gamma.asDiagonal();
  VectorX<Scalar> mean_g = g.rowwise().sum() / cols;
  VectorX<Scalar> mean_gx = (g.array() * cache.normalized.array()).rowwise().sum().matrix() / cols;
  MatrixX<Scalar> dx = (g.colwise() - mean_g) - cache.normalized.cwiseProduct(mean_gx.replicate(1, g.cols()));
  return cache.inv_std.asDiagonal() * dx;
}

template <typename Scalar>
Scalar gelu(Scalar x) {
  return Scalar(0.5) * x * (Scalar(1) + std::erf(x * Scalar(M_SQRT1_2)));
}

template <typename Scalar>
Scalar gelu_derivative(Scalar x) {
  const Scalar cdf = Scalar(0.5) * (Scalar(1) + std::erf(x * Scalar(M_SQRT1_2)));
  const Scalar pdf = std::exp(Scalar(-0.5) * x * x) * Scalar(0.5 * M_2_SQRTPI * M_SQRT1_2);
  return cdf + x * pdf;
}

template <typename Derived>
MatrixX<typename Derived::Scalar> softmax_rows(const Eigen::MatrixBase<Derived>& scores) {
  using Scalar = typename Derived::Scalar;
  MatrixX<Scalar> out = scores.colwise() - scores.rowwise().maxCoeff();
  out = out.array().exp().matrix();
  VectorX<Scalar> sums = out.rowwise().sum();
  return sums.cwiseInverse().asDiagonal() * out;
}

template <typename DerivedP, typename DerivedG>
MatrixX<typename DerivedP::Scalar> softmax_rows_backward(const Eigen::MatrixBase<DerivedP>& probs,
                                                         const Eigen::MatrixBase<DerivedG>& grad_probs) {
  using Scalar = typename DerivedP::Scalar;
  VectorX<Scalar> dots = probs.cwiseProduct(grad_probs).rowwise().sum();
  return probs.cwiseProduct(grad_probs.colwise() - dots);
}

template <typename Derived>
VectorX<typename Derived::Scalar> softmax(const Eigen::MatrixBase<Derived>& logits) {
  using Scalar = typename Derived::Scalar;
  VectorX<Scalar> shifted = logits.array() - logits.maxCoeff();
  VectorX<Scalar> e = shifted.array().exp();
  return e / e.sum();
}

template <typename Derived>
VectorX<typename Derived::Scalar> log_softmax(const Eigen::MatrixBase<Derived>& logits) {
  using Scalar = typename Derived::Scalar;
  const Scalar m = logits.maxCoeff();
  VectorX<Scalar> shifted = logits.array() - m;
  const Scalar lse = std::log(shifted.array().exp().sum());
  return shifted.array() - lse;
}

}  // namespace vitcd::kernels
