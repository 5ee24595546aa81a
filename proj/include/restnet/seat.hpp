#pragma once

// Semantic enhanced anchor transformation: spatial attention shared across
// levels and branches, mask-weighted prototypes, and the anchor transform
// W = A C^+ mapping normalised prototypes onto normalised anchors.

#include <array>
#include <optional>

#include "restnet/backbone.hpp"
#include "restnet/rng.hpp"
#include "restnet/tensor.hpp"

namespace restnet {

template <typename Scalar>
struct AttentionParams {
  Tensor<Scalar> kernel;  // 1 x 2 x k x k
  Tensor<Scalar> bias;    // 1

  Index parameter_count() const { return kernel.size() + bias.size(); }
};

template <typename Scalar>
struct PrototypePair {
  int level = 0;
  Tensor<Scalar> fg;  // D
  Tensor<Scalar> bg;  // D
};

// One foreground/background anchor pair per group.
template <typename Scalar>
struct AnchorBank {
  std::array<Tensor<Scalar>, 3> fg;
  std::array<Tensor<Scalar>, 3> bg;

  const Tensor<Scalar>& fg_of(AnchorGroup g) const { return fg[static_cast<std::size_t>(g)]; }
  const Tensor<Scalar>& bg_of(AnchorGroup g) const { return bg[static_cast<std::size_t>(g)]; }

  // Redraws any anchor whose norm fell below 1e-12; returns how many.
  int repair(Rng& rng);
};

template <typename Scalar>
struct TransformMatrix {
  int level = 0;
  Tensor<Scalar> w;  // D x D
};

template <typename Scalar>
AttentionParams<Scalar> init_attention(int kernel_size, Rng& rng);

// Seeded unit-norm random anchors; dims[g] is the channel count of group g.
template <typename Scalar>
AnchorBank<Scalar> init_anchors(const std::array<int, 3>& dims, Rng& rng);

// Support branch: f scaled by the mask resized to f's resolution.
// Query branch (mask undefined): f unchanged.
template <typename Scalar>
Tensor<Scalar> mask_features(const Tensor<Scalar>& f, const Tensor<Scalar>& mask);

// sigmoid(conv([mean_c f; max_c f])) broadcast-multiplied into f.
template <typename Scalar>
Tensor<Scalar> unified_attention(const Tensor<Scalar>& f_hat, const AttentionParams<Scalar>& p);

// Mask-weighted mean of every channel; mask is H_m x W_m in [0, 1] and is
// bilinearly resized to the feature resolution. Throws EmptyRegionError
// when the resized mask mass is <= 1e-8.
template <typename Scalar>
Tensor<Scalar> masked_average_pool(const Tensor<Scalar>& f, const Tensor<Scalar>& mask);

// masked_average_pool, falling back to a global average (with a warning)
// on an empty region.
template <typename Scalar>
Tensor<Scalar> masked_average_pool_or_global(const Tensor<Scalar>& f, const Tensor<Scalar>& mask, const char* what);

// Default ridge: 1e-6 * trace(C^T C) / 2.
template <typename Scalar>
Scalar auto_ridge(const Tensor<Scalar>& c);

// W = A pinv(C_s) with C_s, A built from normalised prototypes/anchors.
// `ridge` unset selects auto_ridge.
template <typename Scalar>
TransformMatrix<Scalar> compute_transform(const PrototypePair<Scalar>& proto, const Tensor<Scalar>& anchor_fg,
                                          const Tensor<Scalar>& anchor_bg, std::optional<double> ridge);

template <typename Scalar>
Tensor<Scalar> apply_transform(const TransformMatrix<Scalar>& w, const Tensor<Scalar>& f);

}  // namespace restnet
