#include "restnet/seat.hpp"

#include <cmath>

#include "restnet/init.hpp"
#include "restnet/log.hpp"
#include "restnet/ops.hpp"

namespace restnet {

namespace {

template <typename Scalar>
Tensor<Scalar> unit_random(Index dim, Rng& rng) {
  Buffer<Scalar> v(dim);
  double norm = 0;
  do {
    for (Index i = 0; i < dim; ++i) v[i] = static_cast<Scalar>(rng.normal());
    norm = std::sqrt(static_cast<double>(v.square().sum()));
  } while (norm < 1e-6);
  v /= static_cast<Scalar>(norm);
  return Tensor<Scalar>({dim}, std::move(v), true);
}

template <typename Scalar>
Tensor<Scalar> as_column_pair(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  const Index d = a.size();
  return transpose(concat<Scalar>({reshape(a, {1, d}), reshape(b, {1, d})}));
}

template <typename Scalar>
Tensor<Scalar> unit(const Tensor<Scalar>& v, const char* what) {
  if (v.rank() != 1) throw ShapeError(std::string(what) + " must be a vector, got " + to_string(v.shape()));
  const double norm = std::sqrt(static_cast<double>(v.data().square().sum()));
  if (!(norm > 1e-12)) {
    throw DegenerateInputError(std::string(what) + " has norm " + std::to_string(norm) + " <= 1e-12");
  }
  return reshape(normalize_columns(reshape(v, {v.size(), 1}), Scalar(0)), {v.size()});
}

}  // namespace

template <typename Scalar>
int AnchorBank<Scalar>::repair(Rng& rng) {
  int redrawn = 0;
  for (auto* bank : {&fg, &bg}) {
    for (auto& a : *bank) {
      if (std::sqrt(static_cast<double>(a.data().square().sum())) < 1e-12) {
        a.mutable_data() = unit_random<Scalar>(a.size(), rng).data();
        ++redrawn;
      }
    }
  }
  return redrawn;
}

template <typename Scalar>
AttentionParams<Scalar> init_attention(int kernel_size, Rng& rng) {
  if (kernel_size < 1 || kernel_size % 2 == 0) {
    throw ConfigError("attention kernel size must be odd and positive, got " + std::to_string(kernel_size));
  }
  const Index k = kernel_size;
  AttentionParams<Scalar> p;
  p.kernel = uniform_tensor<Scalar>({1, 2, k, k}, glorot_bound(2 * k * k, k * k), rng, true);
  p.bias = Tensor<Scalar>::zeros({1}).set_requires_grad(true);
  return p;
}

template <typename Scalar>
AnchorBank<Scalar> init_anchors(const std::array<int, 3>& dims, Rng& rng) {
  AnchorBank<Scalar> bank;
  for (std::size_t g = 0; g < 3; ++g) {
    bank.fg[g] = unit_random<Scalar>(dims[g], rng);
    bank.bg[g] = unit_random<Scalar>(dims[g], rng);
  }
  return bank;
}

template <typename Scalar>
Tensor<Scalar> mask_features(const Tensor<Scalar>& f, const Tensor<Scalar>& mask) {
  if (!mask.defined()) return f;
  if (f.rank() != 3 || mask.rank() != 2) {
    throw ShapeError("mask_features expects D x H x W features and an H x W mask, got " + to_string(f.shape()) +
                     " and " + to_string(mask.shape()));
  }
  const Tensor<Scalar> m = bilinear_resize(reshape(mask, {1, mask.dim(0), mask.dim(1)}), f.dim(1), f.dim(2));
  return mul(f, m);
}

template <typename Scalar>
Tensor<Scalar> unified_attention(const Tensor<Scalar>& f_hat, const AttentionParams<Scalar>& p) {
  if (f_hat.rank() != 3) throw ShapeError("unified_attention expects D x H x W, got " + to_string(f_hat.shape()));
  const Index d = f_hat.dim(0), h = f_hat.dim(1), w = f_hat.dim(2);
  const Tensor<Scalar> per_pixel = transpose(reshape(f_hat, {d, h * w}));  // HW x D
  const Tensor<Scalar> pooled = concat<Scalar>({reshape(mean_last(per_pixel), {1, h, w}),
                                                reshape(max_last(per_pixel), {1, h, w})});
  const Tensor<Scalar> gate = sigmoid(conv2d(pooled, p.kernel, p.bias));  // 1 x H x W
  return mul(gate, f_hat);
}

template <typename Scalar>
Tensor<Scalar> masked_average_pool(const Tensor<Scalar>& f, const Tensor<Scalar>& mask) {
  if (f.rank() != 3 || mask.rank() != 2) {
    throw ShapeError("masked_average_pool expects D x H x W features and an H x W mask, got " +
                     to_string(f.shape()) + " and " + to_string(mask.shape()));
  }
  const Index d = f.dim(0), h = f.dim(1), w = f.dim(2);
  const Tensor<Scalar> m = reshape(bilinear_resize(reshape(mask, {1, mask.dim(0), mask.dim(1)}), h, w), {h * w});
  const Tensor<Scalar> mass = sum(m);
  if (!(static_cast<double>(mass.item()) > 1e-8)) {
    throw EmptyRegionError("mask mass " + std::to_string(static_cast<double>(mass.item())) + " <= 1e-8");
  }
  return div(sum_last(mul(reshape(f, {d, h * w}), m)), mass);
}

template <typename Scalar>
Tensor<Scalar> masked_average_pool_or_global(const Tensor<Scalar>& f, const Tensor<Scalar>& mask, const char* what) {
  try {
    return masked_average_pool(f, mask);
  } catch (const EmptyRegionError& e) {
    warn(std::string(what) + ": " + e.what() + "; using global average pooling");
    return masked_average_pool(f, Tensor<Scalar>::ones({f.dim(1), f.dim(2)}));
  }
}

template <typename Scalar>
Scalar auto_ridge(const Tensor<Scalar>& c) {
  return static_cast<Scalar>(1e-6 * static_cast<double>(c.data().square().sum()) / 2.0);
}

template <typename Scalar>
TransformMatrix<Scalar> compute_transform(const PrototypePair<Scalar>& proto, const Tensor<Scalar>& anchor_fg,
                                          const Tensor<Scalar>& anchor_bg, std::optional<double> ridge) {
  if (proto.fg.size() != anchor_fg.size() || proto.bg.size() != anchor_bg.size() ||
      proto.fg.size() != proto.bg.size()) {
    throw ShapeError("compute_transform: prototype dims " + to_string(proto.fg.shape()) + "/" +
                     to_string(proto.bg.shape()) + " do not match anchors " + to_string(anchor_fg.shape()) + "/" +
                     to_string(anchor_bg.shape()));
  }
  const Tensor<Scalar> c = as_column_pair(unit(proto.fg, "foreground prototype"), unit(proto.bg, "background prototype"));
  const Tensor<Scalar> a = as_column_pair(unit(anchor_fg, "foreground anchor"), unit(anchor_bg, "background anchor"));
  const Scalar r = ridge ? static_cast<Scalar>(*ridge) : auto_ridge(c);
  return {proto.level, matmul(a, pseudo_inverse_2col(c, r))};
}

template <typename Scalar>
Tensor<Scalar> apply_transform(const TransformMatrix<Scalar>& w, const Tensor<Scalar>& f) {
  if (f.rank() != 3 || w.w.rank() != 2 || w.w.dim(1) != f.dim(0)) {
    throw ShapeError("apply_transform: matrix " + to_string(w.w.shape()) + " does not match features " +
                     to_string(f.shape()));
  }
  const Index d = f.dim(0), h = f.dim(1), wd = f.dim(2);
  return reshape(matmul(w.w, reshape(f, {d, h * wd})), {w.w.dim(0), h, wd});
}

#define RESTNET_INSTANTIATE_SEAT(S)                                                                           \
  template struct AnchorBank<S>;                                                                              \
  template AttentionParams<S> init_attention(int, Rng&);                                                      \
  template AnchorBank<S> init_anchors(const std::array<int, 3>&, Rng&);                                       \
  template Tensor<S> mask_features(const Tensor<S>&, const Tensor<S>&);                                       \
  template Tensor<S> unified_attention(const Tensor<S>&, const AttentionParams<S>&);                          \
  template Tensor<S> masked_average_pool(const Tensor<S>&, const Tensor<S>&);                                 \
  template Tensor<S> masked_average_pool_or_global(const Tensor<S>&, const Tensor<S>&, const char*);          \
  template S auto_ridge(const Tensor<S>&);                                                                    \
  template TransformMatrix<S> compute_transform(const PrototypePair<S>&, const Tensor<S>&, const Tensor<S>&, \
                                                std::optional<double>);                                       \
  template Tensor<S> apply_transform(const TransformMatrix<S>&, const Tensor<S>&);

RESTNET_INSTANTIATE_SEAT(float)
RESTNET_INSTANTIATE_SEAT(double)

}  // namespace restnet
