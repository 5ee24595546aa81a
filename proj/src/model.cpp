#include "restnet/model.hpp"

#include "restnet/ops.hpp"

namespace restnet {

void ModelConfig::validate() const {
  backbone.validate();
  encoder.validate();
  if (attn_k < 1 || attn_k % 2 == 0) throw ConfigError("attn_k must be odd and positive");
  if (ridge && *ridge < 0) throw ConfigError("ridge must be >= 0");
}

std::array<int, 3> ModelConfig::group_dims() const {
  return {backbone.channels(0), backbone.channels(1), backbone.channels(2)};
}

template <typename Scalar>
Model<Scalar> Model<Scalar>::init(const ModelConfig& cfg) {
  cfg.validate();
  Model m;
  m.config = cfg;
  m.backbone = init_backbone<Scalar>(cfg.backbone);
  Rng rng(cfg.init_seed);
  m.attention = init_attention<Scalar>(cfg.attn_k, rng);
  m.anchors = init_anchors<Scalar>(cfg.group_dims(), rng);
  std::vector<Index> support_pixels;
  for (int l = 0; l < kNumLevels; ++l) {
    const Index r = cfg.backbone.resolution(l);
    support_pixels.push_back(r * r);
  }
  m.head = init_encoder_decoder<Scalar>(cfg.encoder, support_pixels, rng);
  m.fusion = init_fusion<Scalar>();
  return m;
}

namespace {

template <typename Scalar>
void deep_copy(Tensor<Scalar>& t) {
  t = t.clone();
}

template <typename Scalar>
void deep_copy(ConvLayer<Scalar>& c) {
  deep_copy(c.kernel);
  deep_copy(c.bias);
}

}  // namespace

template <typename Scalar>
Model<Scalar> Model<Scalar>::clone() const {
  Model m = *this;
  for (auto& l : m.backbone.levels) deep_copy(l);
  deep_copy(m.attention.kernel);
  deep_copy(m.attention.bias);
  for (auto& a : m.anchors.fg) deep_copy(a);
  for (auto& a : m.anchors.bg) deep_copy(a);
  for (auto& l : m.head.levels) {
    deep_copy(l.pool);
    deep_copy(l.pivot);
  }
  deep_copy(m.head.decode1);
  deep_copy(m.head.decode2);
  deep_copy(m.head.logits);
  deep_copy(m.fusion.raw);
  return m;
}

template <typename Scalar>
std::vector<NamedTensor<Scalar>> Model<Scalar>::trainable_parameters() const {
  std::vector<NamedTensor<Scalar>> out;
  for (AnchorGroup g : kAllGroups) {
    const std::string prefix = std::string("seat.anchor.") + group_name(g);
    out.push_back({prefix + ".f", anchors.fg_of(g)});
    out.push_back({prefix + ".b", anchors.bg_of(g)});
  }
  out.push_back({"seat.attn.kernel", attention.kernel});
  out.push_back({"seat.attn.bias", attention.bias});
  for (std::size_t l = 0; l < head.levels.size(); ++l) {
    const std::string prefix = "seg.enc.level" + std::to_string(l + 1);
    out.push_back({prefix + ".pool", head.levels[l].pool});
    out.push_back({prefix + ".pivot.kernel", head.levels[l].pivot.kernel});
    out.push_back({prefix + ".pivot.bias", head.levels[l].pivot.bias});
  }
  out.push_back({"seg.dec.conv1.kernel", head.decode1.kernel});
  out.push_back({"seg.dec.conv1.bias", head.decode1.bias});
  out.push_back({"seg.dec.conv2.kernel", head.decode2.kernel});
  out.push_back({"seg.dec.conv2.bias", head.decode2.bias});
  out.push_back({"seg.dec.out.kernel", head.logits.kernel});
  out.push_back({"seg.dec.out.bias", head.logits.bias});
  out.push_back({"seg.alpha", fusion.raw});
  return out;
}

template <typename Scalar>
std::vector<NamedTensor<Scalar>> Model<Scalar>::backbone_parameters() const {
  std::vector<NamedTensor<Scalar>> out;
  for (int l = 0; l < kNumLevels; ++l) {
    const std::string prefix = "backbone.level" + std::to_string(l + 1);
    out.push_back({prefix + ".kernel", backbone.levels[static_cast<std::size_t>(l)].kernel});
    out.push_back({prefix + ".bias", backbone.levels[static_cast<std::size_t>(l)].bias});
  }
  return out;
}

template <typename Scalar>
void Model<Scalar>::zero_grad() {
  for (auto& p : trainable_parameters()) p.tensor.zero_grad();
}

namespace {

template <typename E>
[[noreturn]] void rethrow_in_episode(const E& e, const std::string& id) {
  throw E("episode " + id + ": " + e.what());
}

template <typename Scalar>
EpisodeOutput<Scalar> run_pipeline(const Episode& ep, const Model<Scalar>& model, const SegmentOptions& opts) {
  ep.validate();
  const auto& cfg = model.config;
  const int shots = ep.shots();
  const Index out_h = ep.query_mask.dim(0), out_w = ep.query_mask.dim(1);
  const auto scalar_cast = [](const Tensor<double>& t) { return t.cast<Scalar>(); };

  const PyramidFeatures<Scalar> query = extract_features(model.backbone, scalar_cast(ep.query_image));
  std::vector<PyramidFeatures<Scalar>> support;
  std::vector<Tensor<Scalar>> support_masks;
  for (const auto& s : ep.supports) {
    support.push_back(extract_features(model.backbone, scalar_cast(s.image)));
    support_masks.push_back(scalar_cast(s.mask));
  }

  // Attention-enhanced features: masked per support shot, raw for the query.
  std::vector<std::vector<Tensor<Scalar>>> enhanced_support(kNumLevels);
  std::vector<Tensor<Scalar>> enhanced_query;
  std::vector<Tensor<Scalar>> query_proto_source;
  std::vector<PrototypePair<Scalar>> support_protos;
  const auto inv_shots = static_cast<Scalar>(1) / static_cast<Scalar>(shots);
  for (int l = 0; l < kNumLevels; ++l) {
    const auto lvl = static_cast<std::size_t>(l);
    enhanced_query.push_back(unified_attention(query.levels[lvl], model.attention));
    query_proto_source.push_back(cfg.prototypes_from == PrototypeSource::Enhanced ? enhanced_query.back()
                                                                                   : query.levels[lvl]);
    Tensor<Scalar> fg, bg;
    for (int k = 0; k < shots; ++k) {
      const auto& f = support[static_cast<std::size_t>(k)].levels[lvl];
      const auto& m = support_masks[static_cast<std::size_t>(k)];
      enhanced_support[lvl].push_back(unified_attention(mask_features(f, m), model.attention));
      const Tensor<Scalar> source =
          cfg.prototypes_from == PrototypeSource::Enhanced ? unified_attention(f, model.attention) : f;
      const Tensor<Scalar> shot_fg = masked_average_pool_or_global(source, m, "support foreground prototype");
      const Tensor<Scalar> shot_bg =
          masked_average_pool_or_global(source, Scalar(1) - m, "support background prototype");
      fg = fg.defined() ? add(fg, shot_fg) : shot_fg;
      bg = bg.defined() ? add(bg, shot_bg) : shot_bg;
    }
    if (shots > 1) {
      fg = fg * inv_shots;
      bg = bg * inv_shots;
    }
    support_protos.push_back({l, fg, bg});
  }

  const auto run_stage = [&](const std::vector<PrototypePair<Scalar>>& protos,
                             std::vector<CorrelationTensor<Scalar>>& corrs) {
    corrs.clear();
    for (int l = 0; l < kNumLevels; ++l) {
      const auto lvl = static_cast<std::size_t>(l);
      const AnchorGroup g = query.group_of_level[lvl];
      const TransformMatrix<Scalar> w =
          compute_transform(protos[lvl], model.anchors.fg_of(g), model.anchors.bg_of(g), cfg.ridge);
      const auto& eq = enhanced_query[lvl];
      const ResidualFeatures<Scalar> rq = residual_enhance(apply_transform(w, eq), eq, l);
      CorrelationTensor<Scalar> merged;
      for (int k = 0; k < shots; ++k) {
        const auto& es = enhanced_support[lvl][static_cast<std::size_t>(k)];
        CorrelationTensor<Scalar> c = hypercorrelation(residual_enhance(apply_transform(w, es), es, l), rq);
        if (k == 0) {
          merged = std::move(c);
        } else {
          merged.cos = add(merged.cos, c.cos);
        }
      }
      if (shots > 1) merged.cos = merged.cos * inv_shots;
      corrs.push_back(std::move(merged));
    }
    return encode_decode(corrs, model.head, out_h, out_w);
  };

  EpisodeOutput<Scalar> out;
  out.coarse = run_stage(support_protos, out.coarse_correlations);

  const Tensor<Scalar> alpha =
      opts.alpha_override ? Tensor<Scalar>::scalar(static_cast<Scalar>(*opts.alpha_override)) : model.fusion.alpha();
  std::vector<PrototypePair<Scalar>> fused;
  for (int l = 0; l < kNumLevels; ++l) {
    const auto lvl = static_cast<std::size_t>(l);
    fused.push_back(
        fuse_prototypes(support_protos[lvl], query_prototypes(query_proto_source[lvl], out.coarse, l), alpha));
  }
  out.fine = run_stage(fused, out.fine_correlations);
  return out;
}

}  // namespace

template <typename Scalar>
EpisodeOutput<Scalar> segment_episode(const Episode& ep, const Model<Scalar>& model, const SegmentOptions& opts) {
  try {
    return run_pipeline(ep, model, opts);
  } catch (const DegenerateInputError& e) {
    rethrow_in_episode(e, ep.episode_id);
  } catch (const SingularMatrixError& e) {
    rethrow_in_episode(e, ep.episode_id);
  } catch (const EmptyRegionError& e) {
    rethrow_in_episode(e, ep.episode_id);
  } catch (const ShapeError& e) {
    rethrow_in_episode(e, ep.episode_id);
  }
}

template struct Model<float>;
template struct Model<double>;
template EpisodeOutput<float> segment_episode(const Episode&, const Model<float>&, const SegmentOptions&);
template EpisodeOutput<double> segment_episode(const Episode&, const Model<double>&, const SegmentOptions&);

}  // namespace restnet
