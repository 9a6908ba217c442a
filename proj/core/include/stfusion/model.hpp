#pragma once

// Model configuration plus the full named parameter set for the two-tower
// retrieval model (vision tower, scene-text tower, fusion token, text tower,
// projection heads, temperature).
//
// ModelParams::for_each fixes a deterministic (name, tensor) ordering that
// checkpointing, the optimizer, and gradient export all share.

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "stfusion/layers.hpp"
#include "stfusion/tensor.hpp"

namespace stf {

struct ModelConfig {
  int patch = 2;          // square patch edge, must divide image_h and image_w
  int d = 32;             // tower width
  int heads = 4;          // attention heads, must divide d
  int layers_vision = 2;  // L_v
  int layers_scene = 2;   // L_s
  int layers_text = 2;    // L_t
  int layers_fusion = 1;  // L_f, last layers_fusion layers of both towers fuse
  int embed_dim = 32;     // shared retrieval space width
  int max_ocr = 8;        // scene-text tokens kept per image
  int max_text = 16;      // caption tokens kept (excluding the start token)
  int image_h = 8;
  int image_w = 8;
  int image_c = 1;
  int fusion_tokens = 1;  // reserved knob; only 1 is supported

  int n_patches() const { return (image_h / patch) * (image_w / patch); }
  void validate() const;  // throws ConfigError
};

struct HeadParams {
  Tensor wq, wk, wv;  // [d, d/h]
  Tensor wo;          // [d/h, d]
};

struct LayerParams {
  std::vector<HeadParams> heads;
  Tensor w1, b1, w2, b2;
  Tensor ln1_g, ln1_b, ln2_g, ln2_b;
};

struct ModelParams {
  ModelConfig config;
  int vocab_size = 0;

  Tensor patch_w, patch_b;  // [P*P*C, d], [1, d]
  Tensor vision_pos;        // [n_patches+1, d]
  Tensor img_token;         // [1, d]
  std::vector<LayerParams> vision;

  Tensor scene_word_emb;  // [vocab, d]
  Tensor scene_type;      // [1, d]
  Tensor scene_pos;       // [max_ocr, d]
  Tensor bbox_w, bbox_b;  // [4, d], [1, d]
  std::vector<LayerParams> scene;

  Tensor fus_init, fus_type, fus_token_id;  // [1, d] each

  Tensor text_word_emb;  // [vocab, d]
  Tensor text_pos;       // [max_text+1, d]
  std::vector<LayerParams> text;

  Tensor head_img, head_fus, head_text;  // [d, embed_dim]
  Tensor log_sigma;                      // [1, 1]; temperature is exp(log_sigma)

  // Seeded initialization: normal(0, 0.02) weights and embeddings, zero
  // biases, unit layer-norm gains, log_sigma = log(sigma_init).
  static ModelParams init(const ModelConfig& cfg, int vocab_size, uint64_t seed,
                          double sigma_init = 0.07);

  // Allocates all tensors with the right shapes but does not fill them.
  static ModelParams shaped(const ModelConfig& cfg, int vocab_size);

  void for_each(const std::function<void(const std::string&, Tensor&)>& fn);
  void for_each(const std::function<void(const std::string&, const Tensor&)>& fn) const;
  int64_t parameter_count() const;

  double sigma() const;
};

// Tape-side mirror of ModelParams, produced by lift().
struct ModelVars {
  Var patch_w, patch_b, vision_pos, img_token;
  std::vector<LayerVars> vision;
  Var scene_word_emb, scene_type, scene_pos, bbox_w, bbox_b;
  std::vector<LayerVars> scene;
  Var fus_init, fus_type, fus_token_id;
  Var text_word_emb, text_pos;
  std::vector<LayerVars> text;
  Var head_img, head_fus, head_text;
  Var log_sigma;

  // (name, var) pairs in for_each order, used to export gradients.
  std::vector<std::pair<std::string, Var>> ordered;
};

ModelVars lift(Tape& tp, const ModelParams& p, bool requires_grad);

// Copies tape-side gradients back into the parameter tensors' grad fields
// (zeros where a parameter never reached the loss).
void export_grads(const Tape& tp, const ModelVars& mv, ModelParams& p);

}  // namespace stf
