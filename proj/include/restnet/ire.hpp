#pragma once

// Intra-domain residual enhancement and the ReLU-cosine hypercorrelation.

#include <cstdint>

#include "restnet/tensor.hpp"

namespace restnet {

template <typename Scalar>
struct ResidualFeatures {
  int level = 0;
  Tensor<Scalar> r;  // D x H x W
};

// Query-major correlation matrix: row j is a query pixel, column i a
// support pixel, both flattened row-major over their grids.
template <typename Scalar>
struct CorrelationTensor {
  int level = 0;
  Index query_h = 0, query_w = 0;
  Index support_h = 0, support_w = 0;
  Tensor<Scalar> cos;  // (query_h * query_w) x (support_h * support_w)

  Index total_pairs() const { return query_h * query_w * support_h * support_w; }
};

// Pixel vectors with norm below this contribute similarity 0.
inline constexpr double kZeroNormGuard = 1e-12;

template <typename Scalar>
ResidualFeatures<Scalar> residual_enhance(const Tensor<Scalar>& transformed, const Tensor<Scalar>& original,
                                          int level = 0);

template <typename Scalar>
CorrelationTensor<Scalar> hypercorrelation(const ResidualFeatures<Scalar>& support,
                                           const ResidualFeatures<Scalar>& query);

// Number of strictly positive correlation entries.
template <typename Scalar>
std::int64_t active_matching_count(const CorrelationTensor<Scalar>& c);

}  // namespace restnet
