#pragma once

#include <cmath>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "presem/geometry.hpp"

namespace presem {

enum class Activation { kLinear, kSoftplus, kSigmoid };

/// Softplus with sharpness beta, log(1 + exp(beta x)) / beta, evaluated without overflow.
template <typename Scalar>
inline Scalar softplus(Scalar x, Scalar beta) {
  const Scalar bx = beta * x;
  if (bx > Scalar(0)) return x + std::log1p(std::exp(-bx)) / beta;
  return std::log1p(std::exp(bx)) / beta;
}

template <typename Scalar>
inline Scalar sigmoid(Scalar x) {
  if (x >= Scalar(0)) return Scalar(1) / (Scalar(1) + std::exp(-x));
  const Scalar e = std::exp(x);
  return e / (Scalar(1) + e);
}

template <typename Scalar>
struct DenseLayer {
  MatX<Scalar> weight;  // out x in
  VecX<Scalar> bias;    // out
};

/// Fully connected network operating on column batches (features x batch). Hidden layers
/// use softplus with sharpness hidden_beta; the output layer uses output_act.
template <typename Scalar>
class Mlp {
 public:
  struct Cache {
    std::vector<MatX<Scalar>> inputs;  // input to each layer
    std::vector<MatX<Scalar>> pre;     // pre-activation of each layer
  };

  Mlp() = default;

  Mlp(int in_dim, const std::vector<int>& hidden, int out_dim, Activation output_act, Scalar hidden_beta = Scalar(100),
      Scalar output_beta = Scalar(1))
      : output_act_(output_act), hidden_beta_(hidden_beta), output_beta_(output_beta) {
    if (in_dim < 1 || out_dim < 1) throw std::domain_error("mlp: dimensions must be positive");
    int prev = in_dim;
    for (int h : hidden) {
      if (h < 1) throw std::domain_error("mlp: hidden width must be positive");
      layers_.push_back({MatX<Scalar>::Zero(h, prev), VecX<Scalar>::Zero(h)});
      prev = h;
    }
    layers_.push_back({MatX<Scalar>::Zero(out_dim, prev), VecX<Scalar>::Zero(out_dim)});
  }

  int in_dim() const { return static_cast<int>(layers_.front().weight.cols()); }
  int out_dim() const { return static_cast<int>(layers_.back().weight.rows()); }
  int num_layers() const { return static_cast<int>(layers_.size()); }
  Activation output_activation() const { return output_act_; }
  Scalar hidden_beta() const { return hidden_beta_; }
  Scalar output_beta() const { return output_beta_; }
  std::vector<DenseLayer<Scalar>>& layers() { return layers_; }
  const std::vector<DenseLayer<Scalar>>& layers() const { return layers_; }

  /// Uniform(-b, b) weights with b = gain * sqrt(6 / (fan_in + fan_out)), zero biases.
  void init_xavier(std::mt19937_64& rng, double gain = 1.0) {
    for (auto& l : layers_) {
      const double b = gain * std::sqrt(6.0 / static_cast<double>(l.weight.rows() + l.weight.cols()));
      std::uniform_real_distribution<double> u(-b, b);
      for (Eigen::Index j = 0; j < l.weight.cols(); ++j)
        for (Eigen::Index i = 0; i < l.weight.rows(); ++i) l.weight(i, j) = static_cast<Scalar>(u(rng));
      l.bias.setZero();
    }
  }

  void set_zero() {
    for (auto& l : layers_) {
      l.weight.setZero();
      l.bias.setZero();
    }
  }

  long long num_parameters() const {
    long long n = 0;
    for (const auto& l : layers_) n += l.weight.size() + l.bias.size();
    return n;
  }

  bool all_finite() const {
    for (const auto& l : layers_)
      if (!l.weight.allFinite() || !l.bias.allFinite()) return false;
    return true;
  }

  MatX<Scalar> forward(const MatX<Scalar>& x, Cache* cache = nullptr) const {
    if (x.rows() != in_dim()) throw std::domain_error("mlp: input has wrong dimension");
    if (cache) {
      cache->inputs.resize(layers_.size());
      cache->pre.resize(layers_.size());
    }
    MatX<Scalar> a = x;
    for (std::size_t li = 0; li < layers_.size(); ++li) {
      const auto& l = layers_[li];
      MatX<Scalar> z(l.weight.rows(), a.cols());
      z.noalias() = l.weight * a;
      z.colwise() += l.bias;
      const bool last = li + 1 == layers_.size();
      MatX<Scalar> out = activate(z, last);
      if (cache) {
        cache->inputs[li] = std::move(a);
        cache->pre[li] = std::move(z);
      }
      a = std::move(out);
    }
    return a;
  }

  /// Reverse pass: accumulates parameter gradients into `grad` and returns d(loss)/d(input).
  MatX<Scalar> backward(const Cache& cache, const MatX<Scalar>& dy, Mlp& grad) const {
    MatX<Scalar> g = dy;
    for (std::size_t r = layers_.size(); r-- > 0;) {
      const bool last = r + 1 == layers_.size();
      g.array() *= activation_derivative(cache.pre[r], last).array();
      auto& gl = grad.layers_[r];
      gl.weight.noalias() += g * cache.inputs[r].transpose();
      gl.bias += g.rowwise().sum();
      MatX<Scalar> next(layers_[r].weight.cols(), g.cols());
      next.noalias() = layers_[r].weight.transpose() * g;
      g = std::move(next);
    }
    return g;
  }

  template <typename Other>
  Mlp<Other> cast() const {
    Mlp<Other> m;
    m.output_act_ = output_act_;
    m.hidden_beta_ = static_cast<Other>(hidden_beta_);
    m.output_beta_ = static_cast<Other>(output_beta_);
    for (const auto& l : layers_) m.layers_.push_back({l.weight.template cast<Other>(), l.bias.template cast<Other>()});
    return m;
  }

 private:
  template <typename>
  friend class Mlp;

  static MatX<Scalar> softplus_array(const MatX<Scalar>& z, Scalar beta) {
    const auto bz = (beta * z.array()).eval();
    return (z.array().max(Scalar(0)) + (-bz.abs()).exp().log1p() / beta).matrix();
  }

  static MatX<Scalar> sigmoid_array(const MatX<Scalar>& z) {
    return ((-z.array()).exp() + Scalar(1)).inverse().matrix();
  }

  MatX<Scalar> activate(const MatX<Scalar>& z, bool last) const {
    if (!last) return softplus_array(z, hidden_beta_);
    switch (output_act_) {
      case Activation::kLinear:
        return z;
      case Activation::kSigmoid:
        return sigmoid_array(z);
      case Activation::kSoftplus:
        return softplus_array(z, output_beta_);
    }
    return z;
  }

  MatX<Scalar> activation_derivative(const MatX<Scalar>& z, bool last) const {
    if (!last) return sigmoid_array(hidden_beta_ * z);
    switch (output_act_) {
      case Activation::kLinear:
        return MatX<Scalar>::Ones(z.rows(), z.cols());
      case Activation::kSigmoid: {
        const MatX<Scalar> s = sigmoid_array(z);
        return (s.array() * (Scalar(1) - s.array())).matrix();
      }
      case Activation::kSoftplus:
        return sigmoid_array(output_beta_ * z);
    }
    return MatX<Scalar>::Ones(z.rows(), z.cols());
  }

  std::vector<DenseLayer<Scalar>> layers_;
  Activation output_act_ = Activation::kLinear;
  Scalar hidden_beta_ = Scalar(100);
  Scalar output_beta_ = Scalar(1);
};

}  // namespace presem
