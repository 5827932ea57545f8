#pragma once

#include <cmath>
#include <cstddef>
#include <optional>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "cstnet/ops.hpp"
#include "cstnet/tensor.hpp"

namespace cstnet {

// Named handle onto a model tensor. Buffers (BN running stats) are saved in
// checkpoints but never optimized.
template <typename T>
struct NamedTensor {
  std::string name;
  Tensor<T> tensor;
  bool trainable = true;
};

template <typename T>
using ParamList = std::vector<NamedTensor<T>>;

using InitRng = std::mt19937_64;

// U(-b, b) with b = sqrt(gain / fan_in).
template <typename T>
Tensor<T> fan_in_uniform(const Shape& shape, std::size_t fan_in, InitRng& rng, double gain = 6.0) {
  const double b = std::sqrt(gain / static_cast<double>(fan_in));
  return Tensor<T>::uniform(shape, static_cast<T>(-b), static_cast<T>(b), rng, true);
}

template <typename T>
class Conv2dLayer {
 public:
  Conv2dLayer() = default;
  Conv2dLayer(std::size_t c_in, std::size_t c_out, std::size_t kernel, std::size_t stride, std::size_t padding,
              bool with_bias, InitRng& rng, double gain = 6.0)
      : weight_(fan_in_uniform<T>({c_out, c_in, kernel, kernel}, c_in * kernel * kernel, rng, gain)),
        stride_(stride),
        padding_(padding) {
    if (with_bias) bias_ = Tensor<T>::zeros({c_out}, true);
  }

  Tensor<T> operator()(const Tensor<T>& x) const { return conv2d(x, weight_, bias_, stride_, padding_); }

  Tensor<T>& weight() { return weight_; }
  const Tensor<T>& weight() const { return weight_; }
  std::optional<Tensor<T>>& bias() { return bias_; }
  const std::optional<Tensor<T>>& bias() const { return bias_; }
  std::size_t in_channels() const { return weight_.dim(1); }
  std::size_t out_channels() const { return weight_.dim(0); }

  void collect(ParamList<T>& out, const std::string& prefix) const {
    out.push_back({prefix + ".weight", weight_, true});
    if (bias_) out.push_back({prefix + ".bias", *bias_, true});
  }

 private:
  Tensor<T> weight_;
  std::optional<Tensor<T>> bias_;
  std::size_t stride_ = 1;
  std::size_t padding_ = 0;
};

template <typename T>
class BatchNormLayer {
 public:
  BatchNormLayer() = default;
  explicit BatchNormLayer(std::size_t channels)
      : gamma_(Tensor<T>::ones({channels}, true)),
        beta_(Tensor<T>::zeros({channels}, true)),
        running_mean_(Tensor<T>::zeros({channels})),
        running_var_(Tensor<T>::ones({channels})) {}

  // Running statistics are updated in training mode even though the call is
  // logically const with respect to the learned parameters.
  Tensor<T> operator()(const Tensor<T>& x, bool training) const {
    return batch_norm(x, gamma_, beta_, running_mean_, running_var_, training);
  }

  Tensor<T>& gamma() { return gamma_; }
  Tensor<T>& beta() { return beta_; }

  void collect(ParamList<T>& out, const std::string& prefix) const {
    out.push_back({prefix + ".gamma", gamma_, true});
    out.push_back({prefix + ".beta", beta_, true});
    out.push_back({prefix + ".running_mean", running_mean_, false});
    out.push_back({prefix + ".running_var", running_var_, false});
  }

 private:
  Tensor<T> gamma_, beta_;
  mutable Tensor<T> running_mean_, running_var_;
};

template <typename T>
class LinearLayer {
 public:
  LinearLayer() = default;
  LinearLayer(std::size_t in, std::size_t out, InitRng& rng, double gain = 3.0)
      : weight_(fan_in_uniform<T>({out, in}, in, rng, gain)), bias_(Tensor<T>::zeros({out}, true)) {}

  Tensor<T> operator()(const Tensor<T>& x) const { return linear(x, weight_, bias_); }

  Tensor<T>& weight() { return weight_; }
  const Tensor<T>& weight() const { return weight_; }
  Tensor<T>& bias() { return bias_; }
  const Tensor<T>& bias() const { return bias_; }

  void collect(ParamList<T>& out, const std::string& prefix) const {
    out.push_back({prefix + ".weight", weight_, true});
    out.push_back({prefix + ".bias", bias_, true});
  }

 private:
  Tensor<T> weight_, bias_;
};

template <typename T>
void fill(Tensor<T>& t, T value) {
  for (auto& v : t.mutable_data()) v = value;
}

}  // namespace cstnet
