#include "restnet/ire.hpp"

#include "restnet/ops.hpp"

namespace restnet {

template <typename Scalar>
ResidualFeatures<Scalar> residual_enhance(const Tensor<Scalar>& transformed, const Tensor<Scalar>& original,
                                          int level) {
  if (transformed.shape() != original.shape()) {
    throw ShapeError("residual_enhance: shapes differ, " + to_string(transformed.shape()) + " vs " +
                     to_string(original.shape()));
  }
  return {level, add(transformed, original)};
}

template <typename Scalar>
CorrelationTensor<Scalar> hypercorrelation(const ResidualFeatures<Scalar>& support,
                                           const ResidualFeatures<Scalar>& query) {
  const auto& s = support.r;
  const auto& q = query.r;
  if (s.rank() != 3 || q.rank() != 3 || s.dim(0) != q.dim(0)) {
    throw ShapeError("hypercorrelation: incompatible residual features " + to_string(s.shape()) + " and " +
                     to_string(q.shape()));
  }
  if (support.level != query.level) throw std::invalid_argument("hypercorrelation: level mismatch");
  const Index d = s.dim(0);
  const auto eps = static_cast<Scalar>(kZeroNormGuard);
  const Tensor<Scalar> sn = normalize_columns(reshape(s, {d, s.dim(1) * s.dim(2)}), eps);
  const Tensor<Scalar> qn = normalize_columns(reshape(q, {d, q.dim(1) * q.dim(2)}), eps);
  CorrelationTensor<Scalar> out;
  out.level = support.level;
  out.query_h = q.dim(1);
  out.query_w = q.dim(2);
  out.support_h = s.dim(1);
  out.support_w = s.dim(2);
  // ReLU of the cosine; the upper clamp only absorbs rounding above 1.
  out.cos = clamp(matmul(transpose(qn), sn), Scalar(0), Scalar(1));
  return out;
}

template <typename Scalar>
std::int64_t active_matching_count(const CorrelationTensor<Scalar>& c) {
  return static_cast<std::int64_t>((c.cos.data() > Scalar(0)).count());
}

template ResidualFeatures<float> residual_enhance(const Tensor<float>&, const Tensor<float>&, int);
template ResidualFeatures<double> residual_enhance(const Tensor<double>&, const Tensor<double>&, int);
template CorrelationTensor<float> hypercorrelation(const ResidualFeatures<float>&, const ResidualFeatures<float>&);
template CorrelationTensor<double> hypercorrelation(const ResidualFeatures<double>&, const ResidualFeatures<double>&);
template std::int64_t active_matching_count(const CorrelationTensor<float>&);
template std::int64_t active_matching_count(const CorrelationTensor<double>&);

}  // namespace restnet
