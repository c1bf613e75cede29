#pragma once

// Volume-rendering weight algebra along one ray, with reverse-mode products.
// Arrays are per-sample column vectors ordered front to back.

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "presem/geometry.hpp"
#include "presem/mlp.hpp"

namespace presem {

/// Logistic SDF-to-density mapping. With sdf_positive_outside the argument is negated so
/// density rises as the ray enters the surface.
template <typename Scalar>
inline Scalar sdf_to_density(Scalar sdf, Scalar inv_s, bool sdf_positive_outside = true) {
  return sigmoid(sdf_positive_outside ? -sdf * inv_s : sdf * inv_s);
}

template <typename Scalar>
void check_same_length(const VecX<Scalar>& a, const VecX<Scalar>& b, const char* what) {
  if (a.size() != b.size()) throw std::domain_error(std::string(what) + ": length mismatch");
}

/// omega_k = exp(-sum_{j<k} sigma_j dz_j) * (1 - exp(-sigma_k dz_k)).
template <typename Scalar>
VecX<Scalar> coarse_weights(const VecX<Scalar>& sigma, const VecX<Scalar>& dz) {
  check_same_length(sigma, dz, "coarse_weights");
  VecX<Scalar> w(sigma.size());
  Scalar acc = Scalar(0);
  for (Eigen::Index k = 0; k < sigma.size(); ++k) {
    const Scalar s = sigma(k) * dz(k);
    w(k) = std::exp(-acc) * -std::expm1(-s);
    acc += s;
  }
  return w;
}

/// d(loss)/d(sigma) given d(loss)/d(omega) for coarse_weights.
template <typename Scalar>
VecX<Scalar> coarse_weights_vjp(const VecX<Scalar>& sigma, const VecX<Scalar>& dz, const VecX<Scalar>& dw) {
  const Eigen::Index n = sigma.size();
  const VecX<Scalar> w = coarse_weights(sigma, dz);
  VecX<Scalar> dsigma(n);
  Scalar acc = Scalar(0);
  Scalar suffix = Scalar(0);  // sum_{i>k} dw_i * w_i
  VecX<Scalar> trans(n);
  for (Eigen::Index k = 0; k < n; ++k) {
    trans(k) = std::exp(-acc);
    acc += sigma(k) * dz(k);
  }
  for (Eigen::Index k = n; k-- > 0;) {
    const Scalar s = sigma(k) * dz(k);
    const Scalar ds = dw(k) * trans(k) * std::exp(-s) - suffix;
    dsigma(k) = ds * dz(k);
    suffix += dw(k) * w(k);
  }
  return dsigma;
}

inline constexpr double kFineWeightEpsilon = 1e-6;

/// beta * omega_k * exp(-s_k) / max(1 - exp(-s_{k+1}), eps) with s = sigma * dz; the last
/// sample is its own successor.
template <typename Scalar>
VecX<Scalar> fine_weights_raw(const VecX<Scalar>& coarse, const VecX<Scalar>& sigma, const VecX<Scalar>& dz,
                              Scalar beta, Scalar eps = Scalar(kFineWeightEpsilon)) {
  check_same_length(coarse, sigma, "fine_weights");
  check_same_length(sigma, dz, "fine_weights");
  const Eigen::Index n = sigma.size();
  VecX<Scalar> pre(n);
  for (Eigen::Index k = 0; k < n; ++k) {
    const Eigen::Index succ = k + 1 < n ? k + 1 : k;
    const Scalar den = std::max(-std::expm1(-sigma(succ) * dz(succ)), eps);
    pre(k) = beta * coarse(k) * std::exp(-sigma(k) * dz(k)) / den;
  }
  return pre;
}

/// fine_weights_raw rescaled so that the sum equals min(sum(coarse), 1).
template <typename Scalar>
VecX<Scalar> fine_weights(const VecX<Scalar>& coarse, const VecX<Scalar>& sigma, const VecX<Scalar>& dz, Scalar beta,
                          Scalar eps = Scalar(kFineWeightEpsilon)) {
  VecX<Scalar> pre = fine_weights_raw(coarse, sigma, dz, beta, eps);
  const Scalar total = pre.sum();
  if (!(total > Scalar(0))) return VecX<Scalar>::Zero(pre.size());
  const Scalar target = std::min(coarse.sum(), Scalar(1));
  return pre * (target / total);
}

template <typename Scalar>
struct FineWeightsVjp {
  VecX<Scalar> dcoarse;
  VecX<Scalar> dsigma;  // direct dependence only; chain dcoarse through coarse_weights_vjp
};

template <typename Scalar>
FineWeightsVjp<Scalar> fine_weights_vjp(const VecX<Scalar>& coarse, const VecX<Scalar>& sigma, const VecX<Scalar>& dz,
                                        Scalar beta, const VecX<Scalar>& dout,
                                        Scalar eps = Scalar(kFineWeightEpsilon)) {
  const Eigen::Index n = sigma.size();
  FineWeightsVjp<Scalar> r{VecX<Scalar>::Zero(n), VecX<Scalar>::Zero(n)};
  const VecX<Scalar> pre = fine_weights_raw(coarse, sigma, dz, beta, eps);
  const Scalar total = pre.sum();
  if (!(total > Scalar(0))) return r;
  const Scalar coarse_sum = coarse.sum();
  const Scalar target = std::min(coarse_sum, Scalar(1));
  const Scalar g_dot_pre = dout.dot(pre);
  const VecX<Scalar> dpre = dout * (target / total) - VecX<Scalar>::Constant(n, target * g_dot_pre / (total * total));
  if (coarse_sum < Scalar(1)) r.dcoarse.array() += g_dot_pre / total;
  VecX<Scalar> ds = VecX<Scalar>::Zero(n);
  for (Eigen::Index k = 0; k < n; ++k) {
    const Eigen::Index succ = k + 1 < n ? k + 1 : k;
    const Scalar e_k = std::exp(-sigma(k) * dz(k));
    const Scalar raw_den = -std::expm1(-sigma(succ) * dz(succ));
    const Scalar den = std::max(raw_den, eps);
    r.dcoarse(k) += dpre(k) * beta * e_k / den;
    ds(k) -= dpre(k) * pre(k);
    if (raw_den > eps) ds(succ) -= dpre(k) * pre(k) / den * std::exp(-sigma(succ) * dz(succ));
  }
  r.dsigma = ds.cwiseProduct(dz);
  return r;
}

/// Sample spacing: dz_k = z_{k+1} - z_k, the last sample repeating its predecessor's.
template <typename Scalar>
VecX<Scalar> sample_spacing(const VecX<Scalar>& z, Scalar fallback) {
  const Eigen::Index n = z.size();
  VecX<Scalar> dz(n);
  for (Eigen::Index k = 0; k + 1 < n; ++k) dz(k) = z(k + 1) - z(k);
  if (n > 0) dz(n - 1) = n > 1 ? dz(n - 2) : fallback;
  return dz;
}

}  // namespace presem
