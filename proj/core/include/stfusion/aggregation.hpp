#pragma once

// Mid-level fusion between the vision and scene-text towers via a single
// shared fusion token.
//
// Both towers run their early layers independently. Their last layers_fusion
// layers run as aggregation layers: the fusion token is appended to each
// tower's sequence, both towers process [tokens; F] with their own layer
// parameters, and the next fusion state is the element-wise sum of the two
// post-layer fusion slots. The token is the only channel between towers, so
// with one aggregation layer a scene-text change cannot reach the vision
// tokens yet; it reaches them one layer later through the updated token.

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "stfusion/encoders.hpp"

namespace stf {

enum class FusionStrategy { fusion_token, late_fusion, vision_only };

std::string to_string(FusionStrategy s);
FusionStrategy fusion_strategy_from_string(const std::string& name);

struct FusionStateVars {
  Var v;  // vision tokens [n_patches+1, d]
  Var s;  // scene-text tokens [n_ocr, d]
  Var f;  // fusion token [1, d]
};

// Captured token states around the aggregation stack: entry states plus the
// state after every aggregation layer.
struct AggregationTrace {
  std::vector<Tensor> v, s, f;
};

// F_0 = init + type + token-id vectors. Input-independent.
Var init_fusion_token(Tape& tp, const ModelVars& mv);

// One aggregation step. Both branches read the same incoming fusion token.
FusionStateVars aggregation_layer(Tape& tp, const FusionStateVars& state,
                                  const LayerVars& vision_layer, const LayerVars& scene_layer);

struct TowerOutVars {
  Var v;                  // [1, embed_dim], unit norm
  std::optional<Var> f;   // [1, embed_dim], unit norm; absent without scene text
};

// Fusion-token visual tower. With empty ocr this is exactly the plain vision
// encoder (same ops in the same order) and f is absent.
TowerOutVars visual_tower_vars(Tape& tp, const ModelVars& mv, const ModelConfig& cfg,
                               const Vocab& vocab, const ImageRecord& image,
                               std::span<const OcrToken> ocr,
                               AggregationTrace* trace = nullptr);

// Pure vision encoder: all vision layers, no fusion token, projected [IMG]
// state. Kept as an independent code path so the empty-ocr tower can be
// pinned to it bit-for-bit.
Var vision_encoder_vars(Tape& tp, const ModelVars& mv, const ModelConfig& cfg,
                        const ImageRecord& image);

// Late-fusion baseline: towers run fully independently; f projects the sum
// of the final [IMG] state and the mean-pooled scene-text states. Requires
// non-empty ocr (the caller routes ocr-free images to the plain encoder).
TowerOutVars late_fusion_vars(Tape& tp, const ModelVars& mv, const ModelConfig& cfg,
                              const Vocab& vocab, const ImageRecord& image,
                              std::span<const OcrToken> ocr);

// Inference-side results and counters.
struct TowerOutput {
  Tensor v;
  std::optional<Tensor> f;
  bool has_scene_text = false;
};

struct ForwardCounters {
  uint64_t visual = 0;  // visual tower invocations
  uint64_t scene = 0;   // invocations where the scene tower actually ran
  uint64_t text = 0;    // caption encoder invocations
};

TowerOutput visual_tower_forward(const ModelParams& p, const Vocab& vocab,
                                 const ImageRecord& image, std::span<const OcrToken> ocr,
                                 FusionStrategy strategy = FusionStrategy::fusion_token,
                                 ForwardCounters* counters = nullptr);

Tensor text_forward(const ModelParams& p, const Vocab& vocab, const std::string& caption,
                    ForwardCounters* counters = nullptr);

}  // namespace stf
