#include "restnet/segmenter.hpp"

#include "restnet/ops.hpp"

namespace restnet {

void EncoderConfig::validate() const {
  if (kind != "pooling") throw ConfigError("unknown encoder '" + kind + "' (available: pooling)");
  if (pooled < 0) throw ConfigError("encoder pooled must be >= 0");
  if (pivot_channels < 1 || hidden < 1) throw ConfigError("encoder widths must be >= 1");
}

template <typename Scalar>
Index EncoderDecoderParams<Scalar>::parameter_count() const {
  Index n = decode1.parameter_count() + decode2.parameter_count() + logits.parameter_count();
  for (const auto& l : levels) n += l.pool.size() + l.pivot.parameter_count();
  return n;
}

template <typename Scalar>
Tensor<Scalar> FusionParam<Scalar>::alpha() const {
  return sigmoid(raw);
}

template <typename Scalar>
EncoderDecoderParams<Scalar> init_encoder_decoder(const EncoderConfig& cfg, const std::vector<Index>& support_pixels,
                                                  Rng& rng) {
  cfg.validate();
  EncoderDecoderParams<Scalar> p;
  const Index descriptors = 2 + cfg.pooled;
  for (Index n : support_pixels) {
    LevelEncoder<Scalar> level;
    level.pool = uniform_tensor<Scalar>({cfg.pooled, n}, 0.5, rng, true);
    level.pivot = glorot_conv<Scalar>(cfg.pivot_channels, descriptors, 3, rng, true);
    p.levels.push_back(std::move(level));
  }
  const Index stacked = cfg.pivot_channels * static_cast<Index>(support_pixels.size());
  p.decode1 = glorot_conv<Scalar>(cfg.hidden, stacked, 3, rng, true);
  p.decode2 = glorot_conv<Scalar>(cfg.hidden, cfg.hidden, 3, rng, true);
  p.logits = glorot_conv<Scalar>(2, cfg.hidden, 1, rng, true);
  return p;
}

template <typename Scalar>
FusionParam<Scalar> init_fusion() {
  return {Tensor<Scalar>::zeros({}).set_requires_grad(true)};
}

template <typename Scalar>
Tensor<Scalar> channel_softmax(const Tensor<Scalar>& logits) {
  if (logits.rank() != 3) throw ShapeError("channel_softmax expects C x H x W, got " + to_string(logits.shape()));
  const Index c = logits.dim(0), h = logits.dim(1), w = logits.dim(2);
  return reshape(transpose(softmax_last(transpose(reshape(logits, {c, h * w})))), {c, h, w});
}

template <typename Scalar>
SoftMask<Scalar> encode_decode(const std::vector<CorrelationTensor<Scalar>>& corrs,
                               const EncoderDecoderParams<Scalar>& params, Index out_h, Index out_w) {
  if (corrs.empty()) throw std::invalid_argument("encode_decode: empty level list");
  if (corrs.size() != params.levels.size()) {
    throw ShapeError("encode_decode: " + std::to_string(corrs.size()) + " correlation levels for " +
                     std::to_string(params.levels.size()) + " encoder levels");
  }
  if (out_h < 1 || out_w < 1) throw std::invalid_argument("encode_decode: output size must be positive");
  const Index fine_h = corrs[0].query_h, fine_w = corrs[0].query_w;
  std::vector<Tensor<Scalar>> stacked;
  for (std::size_t l = 0; l < corrs.size(); ++l) {
    const auto& c = corrs[l];
    const auto& enc = params.levels[l];
    const Index nq = c.query_h * c.query_w;
    const Index ns = c.support_h * c.support_w;
    if (enc.pool.dim(1) != ns) {
      throw ShapeError("encode_decode: level " + std::to_string(l) + " has " + std::to_string(ns) +
                       " support pixels, encoder expects " + std::to_string(enc.pool.dim(1)));
    }
    std::vector<Tensor<Scalar>> descriptors{reshape(mean_last(c.cos), {1, nq}), reshape(max_last(c.cos), {1, nq})};
    if (enc.pool.dim(0) > 0) {
      descriptors.push_back(transpose(matmul(c.cos, transpose(softmax_last(enc.pool)))));  // P x Nq
    }
    const Tensor<Scalar> grid =
        reshape(concat(descriptors), {static_cast<Index>(2) + enc.pool.dim(0), c.query_h, c.query_w});
    const Tensor<Scalar> h = relu(conv2d(grid, enc.pivot.kernel, enc.pivot.bias));
    stacked.push_back(bilinear_resize(h, fine_h, fine_w));
  }
  Tensor<Scalar> x = concat(stacked);
  x = relu(conv2d(x, params.decode1.kernel, params.decode1.bias));
  x = relu(conv2d(x, params.decode2.kernel, params.decode2.bias));
  x = conv2d(x, params.logits.kernel, params.logits.bias);
  SoftMask<Scalar> out;
  out.logits = bilinear_resize(x, out_h, out_w);
  out.probs = select(channel_softmax(out.logits), 1);
  return out;
}

template <typename Scalar>
PrototypePair<Scalar> query_prototypes(const Tensor<Scalar>& f_q, const SoftMask<Scalar>& soft, int level) {
  return {level, masked_average_pool_or_global(f_q, soft.probs, "query foreground prototype"),
          masked_average_pool_or_global(f_q, Scalar(1) - soft.probs, "query background prototype")};
}

template <typename Scalar>
PrototypePair<Scalar> fuse_prototypes(const PrototypePair<Scalar>& support, const PrototypePair<Scalar>& query,
                                      const Tensor<Scalar>& alpha) {
  if (support.fg.shape() != query.fg.shape() || support.bg.shape() != query.bg.shape()) {
    throw ShapeError("fuse_prototypes: support " + to_string(support.fg.shape()) + " vs query " +
                     to_string(query.fg.shape()));
  }
  if (alpha.size() != 1) throw ShapeError("fuse_prototypes: alpha must be a scalar");
  const Tensor<Scalar> beta = Scalar(1) - alpha;
  return {support.level, add(mul(alpha, support.fg), mul(beta, query.fg)),
          add(mul(alpha, support.bg), mul(beta, query.bg))};
}

#define RESTNET_INSTANTIATE_SEGMENTER(S)                                                                       \
  template struct EncoderDecoderParams<S>;                                                                     \
  template struct FusionParam<S>;                                                                              \
  template EncoderDecoderParams<S> init_encoder_decoder(const EncoderConfig&, const std::vector<Index>&, Rng&); \
  template FusionParam<S> init_fusion();                                                                       \
  template Tensor<S> channel_softmax(const Tensor<S>&);                                                        \
  template SoftMask<S> encode_decode(const std::vector<CorrelationTensor<S>>&, const EncoderDecoderParams<S>&, \
                                     Index, Index);                                                            \
  template PrototypePair<S> query_prototypes(const Tensor<S>&, const SoftMask<S>&, int);                       \
  template PrototypePair<S> fuse_prototypes(const PrototypePair<S>&, const PrototypePair<S>&, const Tensor<S>&);

RESTNET_INSTANTIATE_SEGMENTER(float)
RESTNET_INSTANTIATE_SEGMENTER(double)

}  // namespace restnet
