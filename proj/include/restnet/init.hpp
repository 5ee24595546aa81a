#pragma once

#include <cmath>

#include "restnet/rng.hpp"
#include "restnet/tensor.hpp"

namespace restnet {

template <typename Scalar>
Tensor<Scalar> uniform_tensor(Shape shape, double bound, Rng& rng, bool requires_grad) {
  Buffer<Scalar> data(numel(shape));
  for (Index i = 0; i < data.size(); ++i) data[i] = static_cast<Scalar>(rng.uniform(-bound, bound));
  return Tensor<Scalar>(std::move(shape), std::move(data), requires_grad);
}

inline double glorot_bound(Index fan_in, Index fan_out) {
  return std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
}

template <typename Scalar>
struct ConvLayer {
  Tensor<Scalar> kernel;  // Cout x Cin x k x k
  Tensor<Scalar> bias;    // Cout

  Index parameter_count() const { return kernel.size() + bias.size(); }
};

// Kernel and bias both drawn from uniform(-a, a), a = sqrt(6 / (fan_in + fan_out)).
template <typename Scalar>
ConvLayer<Scalar> glorot_conv(Index cout, Index cin, Index k, Rng& rng, bool trainable) {
  const double bound = glorot_bound(cin * k * k, cout * k * k);
  ConvLayer<Scalar> layer;
  layer.kernel = uniform_tensor<Scalar>({cout, cin, k, k}, bound, rng, trainable);
  layer.bias = uniform_tensor<Scalar>({cout}, bound, rng, trainable);
  return layer;
}

}  // namespace restnet
