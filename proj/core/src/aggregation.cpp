#include "stfusion/aggregation.hpp"

namespace stf {

std::string to_string(FusionStrategy s) {
  switch (s) {
    case FusionStrategy::fusion_token: return "fusion_token";
    case FusionStrategy::late_fusion: return "late_fusion";
    case FusionStrategy::vision_only: return "vision_only";
  }
  throw ContractError("unhandled fusion strategy");
}

FusionStrategy fusion_strategy_from_string(const std::string& name) {
  if (name == "fusion_token") return FusionStrategy::fusion_token;
  if (name == "late_fusion") return FusionStrategy::late_fusion;
  if (name == "vision_only") return FusionStrategy::vision_only;
  throw ConfigError("unknown fusion strategy '" + name +
                    "' (valid: fusion_token, late_fusion, vision_only)");
}

Var init_fusion_token(Tape& tp, const ModelVars& mv) {
  return tp.add(tp.add(mv.fus_init, mv.fus_type), mv.fus_token_id);
}

FusionStateVars aggregation_layer(Tape& tp, const FusionStateVars& state,
                                  const LayerVars& vision_layer,
                                  const LayerVars& scene_layer) {
  const int nv = tp.value(state.v).rows();
  const int ns = tp.value(state.s).rows();
  if (tp.value(state.f).rows() != 1) {
    throw ContractError("aggregation expects a single fusion token, got " +
                        shape_str(tp.value(state.f).shape));
  }
  Var v_out = transformer_layer(tp, tp.concat_rows(state.v, state.f), vision_layer);
  Var s_out = transformer_layer(tp, tp.concat_rows(state.s, state.f), scene_layer);
  FusionStateVars next;
  next.v = tp.slice_rows(v_out, 0, nv);
  next.s = tp.slice_rows(s_out, 0, ns);
  next.f = tp.add(tp.slice_rows(v_out, nv, nv + 1), tp.slice_rows(s_out, ns, ns + 1));
  return next;
}

namespace {

void capture(AggregationTrace* trace, Tape& tp, const FusionStateVars& st) {
  if (!trace) return;
  trace->v.push_back(tp.value(st.v));
  trace->s.push_back(tp.value(st.s));
  trace->f.push_back(tp.value(st.f));
}

Var project_head(Tape& tp, Var token_state, Var head) {
  return l2_normalize_rows(tp, tp.matmul(token_state, head));
}

}  // namespace

Var vision_encoder_vars(Tape& tp, const ModelVars& mv, const ModelConfig& cfg,
                        const ImageRecord& image) {
  Var seq = patchify(tp, image, cfg.patch, mv.patch_w, mv.patch_b, mv.vision_pos,
                     mv.img_token);
  for (int l = 0; l < cfg.layers_vision; ++l) {
    seq = transformer_layer(tp, seq, mv.vision[static_cast<size_t>(l)]);
  }
  return project_head(tp, tp.slice_rows(seq, 0, 1), mv.head_img);
}

TowerOutVars visual_tower_vars(Tape& tp, const ModelVars& mv, const ModelConfig& cfg,
                               const Vocab& vocab, const ImageRecord& image,
                               std::span<const OcrToken> ocr, AggregationTrace* trace) {
  Var seq = patchify(tp, image, cfg.patch, mv.patch_w, mv.patch_b, mv.vision_pos,
                     mv.img_token);
  if (ocr.empty()) {
    for (int l = 0; l < cfg.layers_vision; ++l) {
      seq = transformer_layer(tp, seq, mv.vision[static_cast<size_t>(l)]);
    }
    return TowerOutVars{project_head(tp, tp.slice_rows(seq, 0, 1), mv.head_img), std::nullopt};
  }

  const int pre_v = cfg.layers_vision - cfg.layers_fusion;
  const int pre_s = cfg.layers_scene - cfg.layers_fusion;
  seq = vision_backbone(tp, seq, mv.vision, pre_v);
  Var s = scene_text_embed(tp, ocr, vocab, mv.scene_word_emb, mv.scene_type, mv.scene_pos,
                           mv.bbox_w, mv.bbox_b, cfg.max_ocr);
  for (int l = 0; l < pre_s; ++l) {
    s = transformer_layer(tp, s, mv.scene[static_cast<size_t>(l)]);
  }
  FusionStateVars st{seq, s, init_fusion_token(tp, mv)};
  capture(trace, tp, st);
  for (int j = 0; j < cfg.layers_fusion; ++j) {
    st = aggregation_layer(tp, st, mv.vision[static_cast<size_t>(pre_v + j)],
                           mv.scene[static_cast<size_t>(pre_s + j)]);
    capture(trace, tp, st);
  }
  TowerOutVars out;
  out.v = project_head(tp, tp.slice_rows(st.v, 0, 1), mv.head_img);
  out.f = project_head(tp, st.f, mv.head_fus);
  return out;
}

TowerOutVars late_fusion_vars(Tape& tp, const ModelVars& mv, const ModelConfig& cfg,
                              const Vocab& vocab, const ImageRecord& image,
                              std::span<const OcrToken> ocr) {
  if (ocr.empty()) {
    throw ContractError("late_fusion needs scene text; route ocr-free images to the "
                        "plain vision encoder");
  }
  Var seq = patchify(tp, image, cfg.patch, mv.patch_w, mv.patch_b, mv.vision_pos,
                     mv.img_token);
  for (int l = 0; l < cfg.layers_vision; ++l) {
    seq = transformer_layer(tp, seq, mv.vision[static_cast<size_t>(l)]);
  }
  Var s = scene_text_embed(tp, ocr, vocab, mv.scene_word_emb, mv.scene_type, mv.scene_pos,
                           mv.bbox_w, mv.bbox_b, cfg.max_ocr);
  for (int l = 0; l < cfg.layers_scene; ++l) {
    s = transformer_layer(tp, s, mv.scene[static_cast<size_t>(l)]);
  }
  Var img_state = tp.slice_rows(seq, 0, 1);
  TowerOutVars out;
  out.v = project_head(tp, img_state, mv.head_img);
  out.f = project_head(tp, tp.add(img_state, mean_over_rows(tp, s)), mv.head_fus);
  return out;
}

TowerOutput visual_tower_forward(const ModelParams& p, const Vocab& vocab,
                                 const ImageRecord& image, std::span<const OcrToken> ocr,
                                 FusionStrategy strategy, ForwardCounters* counters) {
  if (strategy == FusionStrategy::vision_only) ocr = {};
  Tape tp;
  ModelVars mv = lift(tp, p, false);
  TowerOutVars vars = strategy == FusionStrategy::late_fusion && !ocr.empty()
                          ? late_fusion_vars(tp, mv, p.config, vocab, image, ocr)
                          : visual_tower_vars(tp, mv, p.config, vocab, image, ocr);
  if (counters) {
    ++counters->visual;
    if (!ocr.empty()) ++counters->scene;
  }
  TowerOutput out;
  out.v = tp.value(vars.v);
  if (vars.f) out.f = tp.value(*vars.f);
  out.has_scene_text = !ocr.empty();
  return out;
}

Tensor text_forward(const ModelParams& p, const Vocab& vocab, const std::string& caption,
                    ForwardCounters* counters) {
  Tape tp;
  ModelVars mv = lift(tp, p, false);
  Var t = text_encode(tp, mv, p.config, vocab, caption);
  if (counters) ++counters->text;
  return tp.value(t);
}

}  // namespace stf
