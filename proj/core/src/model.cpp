#include "stfusion/model.hpp"

#include <cmath>
#include <unordered_map>

#include "stfusion/rng.hpp"

namespace stf {

void ModelConfig::validate() const {
  auto positive = [](int v, const char* name) {
    if (v <= 0) throw ConfigError(std::string("model config: ") + name + " must be positive");
  };
  positive(patch, "patch");
  positive(d, "d");
  positive(heads, "heads");
  positive(layers_vision, "layers_vision");
  positive(layers_scene, "layers_scene");
  positive(layers_text, "layers_text");
  positive(embed_dim, "embed_dim");
  positive(max_ocr, "max_ocr");
  positive(max_text, "max_text");
  positive(image_h, "image_h");
  positive(image_w, "image_w");
  positive(image_c, "image_c");
  if (layers_fusion < 0) throw ConfigError("model config: layers_fusion must be non-negative");
  if (layers_fusion > layers_vision || layers_fusion > layers_scene) {
    throw ConfigError("model config: layers_fusion " + std::to_string(layers_fusion) +
                      " exceeds min(layers_vision, layers_scene)");
  }
  if (d % heads != 0) {
    throw ConfigError("model config: d " + std::to_string(d) + " not divisible by heads " +
                      std::to_string(heads));
  }
  if (image_h % patch != 0 || image_w % patch != 0) {
    throw ConfigError("model config: image " + std::to_string(image_h) + "x" +
                      std::to_string(image_w) + " not divisible by patch " +
                      std::to_string(patch));
  }
  if (fusion_tokens != 1) {
    throw ConfigError("model config: fusion_tokens must be 1 (multi-token fusion is reserved)");
  }
}

namespace {

LayerParams shaped_layer(const ModelConfig& cfg) {
  LayerParams lp;
  const int d = cfg.d, dh = cfg.d / cfg.heads;
  lp.heads.resize(static_cast<size_t>(cfg.heads));
  for (HeadParams& h : lp.heads) {
    h.wq = Tensor({d, dh});
    h.wk = Tensor({d, dh});
    h.wv = Tensor({d, dh});
    h.wo = Tensor({dh, d});
  }
  lp.w1 = Tensor({d, 4 * d});
  lp.b1 = Tensor({1, 4 * d});
  lp.w2 = Tensor({4 * d, d});
  lp.b2 = Tensor({1, d});
  lp.ln1_g = Tensor({1, d});
  lp.ln1_b = Tensor({1, d});
  lp.ln2_g = Tensor({1, d});
  lp.ln2_b = Tensor({1, d});
  return lp;
}

template <class Params, class Fn>
void walk_layer(Params& lp, const std::string& prefix, Fn&& fn) {
  for (size_t h = 0; h < lp.heads.size(); ++h) {
    const std::string hp = prefix + ".head" + std::to_string(h);
    fn(hp + ".wq", lp.heads[h].wq);
    fn(hp + ".wk", lp.heads[h].wk);
    fn(hp + ".wv", lp.heads[h].wv);
    fn(hp + ".wo", lp.heads[h].wo);
  }
  fn(prefix + ".mlp.w1", lp.w1);
  fn(prefix + ".mlp.b1", lp.b1);
  fn(prefix + ".mlp.w2", lp.w2);
  fn(prefix + ".mlp.b2", lp.b2);
  fn(prefix + ".ln1.g", lp.ln1_g);
  fn(prefix + ".ln1.b", lp.ln1_b);
  fn(prefix + ".ln2.g", lp.ln2_g);
  fn(prefix + ".ln2.b", lp.ln2_b);
}

template <class Params, class Fn>
void walk(Params& p, Fn&& fn) {
  fn("vision.patch_proj.w", p.patch_w);
  fn("vision.patch_proj.b", p.patch_b);
  fn("vision.pos", p.vision_pos);
  fn("vision.img_token", p.img_token);
  for (size_t l = 0; l < p.vision.size(); ++l) {
    walk_layer(p.vision[l], "vision.layer" + std::to_string(l), fn);
  }
  fn("scene.word_emb", p.scene_word_emb);
  fn("scene.type", p.scene_type);
  fn("scene.pos", p.scene_pos);
  fn("scene.bbox_proj.w", p.bbox_w);
  fn("scene.bbox_proj.b", p.bbox_b);
  for (size_t l = 0; l < p.scene.size(); ++l) {
    walk_layer(p.scene[l], "scene.layer" + std::to_string(l), fn);
  }
  fn("fusion.init", p.fus_init);
  fn("fusion.type", p.fus_type);
  fn("fusion.token_id", p.fus_token_id);
  fn("text.word_emb", p.text_word_emb);
  fn("text.pos", p.text_pos);
  for (size_t l = 0; l < p.text.size(); ++l) {
    walk_layer(p.text[l], "text.layer" + std::to_string(l), fn);
  }
  fn("head.img", p.head_img);
  fn("head.fus", p.head_fus);
  fn("head.text", p.head_text);
  fn("loss.log_sigma", p.log_sigma);
}

}  // namespace

ModelParams ModelParams::shaped(const ModelConfig& cfg, int vocab_size) {
  cfg.validate();
  if (vocab_size <= 0) throw ConfigError("model params need a positive vocab size");
  ModelParams p;
  p.config = cfg;
  p.vocab_size = vocab_size;
  const int d = cfg.d;
  p.patch_w = Tensor({cfg.patch * cfg.patch * cfg.image_c, d});
  p.patch_b = Tensor({1, d});
  p.vision_pos = Tensor({cfg.n_patches() + 1, d});
  p.img_token = Tensor({1, d});
  p.vision.assign(static_cast<size_t>(cfg.layers_vision), LayerParams{});
  for (LayerParams& lp : p.vision) lp = shaped_layer(cfg);
  p.scene_word_emb = Tensor({vocab_size, d});
  p.scene_type = Tensor({1, d});
  p.scene_pos = Tensor({cfg.max_ocr, d});
  p.bbox_w = Tensor({4, d});
  p.bbox_b = Tensor({1, d});
  p.scene.assign(static_cast<size_t>(cfg.layers_scene), LayerParams{});
  for (LayerParams& lp : p.scene) lp = shaped_layer(cfg);
  p.fus_init = Tensor({1, d});
  p.fus_type = Tensor({1, d});
  p.fus_token_id = Tensor({1, d});
  p.text_word_emb = Tensor({vocab_size, d});
  p.text_pos = Tensor({cfg.max_text + 1, d});
  p.text.assign(static_cast<size_t>(cfg.layers_text), LayerParams{});
  for (LayerParams& lp : p.text) lp = shaped_layer(cfg);
  p.head_img = Tensor({d, cfg.embed_dim});
  p.head_fus = Tensor({d, cfg.embed_dim});
  p.head_text = Tensor({d, cfg.embed_dim});
  p.log_sigma = Tensor({1, 1});
  return p;
}

ModelParams ModelParams::init(const ModelConfig& cfg, int vocab_size, uint64_t seed,
                              double sigma_init) {
  if (!(sigma_init > 0.0)) throw ConfigError("sigma_init must be positive");
  ModelParams p = shaped(cfg, vocab_size);
  Rng rng(mix64(seed));
  p.for_each([&](const std::string& name, Tensor& t) {
    const bool is_bias = name.ends_with(".b") || name.ends_with(".b1") || name.ends_with(".b2");
    const bool is_ln_gain = name.find(".ln") != std::string::npos && name.ends_with(".g");
    if (name == "loss.log_sigma") {
      t.values[0] = std::log(sigma_init);
    } else if (is_ln_gain) {
      std::fill(t.values.begin(), t.values.end(), 1.0);
    } else if (is_bias) {
      std::fill(t.values.begin(), t.values.end(), 0.0);
    } else {
      for (double& v : t.values) v = rng.normal(0.0, 0.02);
    }
  });
  return p;
}

void ModelParams::for_each(const std::function<void(const std::string&, Tensor&)>& fn) {
  walk(*this, fn);
}

void ModelParams::for_each(
    const std::function<void(const std::string&, const Tensor&)>& fn) const {
  walk(*this, fn);
}

int64_t ModelParams::parameter_count() const {
  int64_t n = 0;
  for_each([&](const std::string&, const Tensor& t) { n += t.size(); });
  return n;
}

double ModelParams::sigma() const { return std::exp(log_sigma.values[0]); }

ModelVars lift(Tape& tp, const ModelParams& p, bool requires_grad) {
  std::unordered_map<std::string, Var> by_name;
  ModelVars mv;
  p.for_each([&](const std::string& name, const Tensor& t) {
    Var v = tp.input(t, requires_grad);
    by_name.emplace(name, v);
    mv.ordered.emplace_back(name, v);
  });
  auto at = [&](const std::string& name) { return by_name.at(name); };
  auto lift_layer = [&](const std::string& prefix, int heads) {
    LayerVars lv;
    lv.heads.resize(static_cast<size_t>(heads));
    for (int h = 0; h < heads; ++h) {
      const std::string hp = prefix + ".head" + std::to_string(h);
      lv.heads[static_cast<size_t>(h)] =
          HeadVars{at(hp + ".wq"), at(hp + ".wk"), at(hp + ".wv"), at(hp + ".wo")};
    }
    lv.w1 = at(prefix + ".mlp.w1");
    lv.b1 = at(prefix + ".mlp.b1");
    lv.w2 = at(prefix + ".mlp.w2");
    lv.b2 = at(prefix + ".mlp.b2");
    lv.ln1_g = at(prefix + ".ln1.g");
    lv.ln1_b = at(prefix + ".ln1.b");
    lv.ln2_g = at(prefix + ".ln2.g");
    lv.ln2_b = at(prefix + ".ln2.b");
    return lv;
  };
  mv.patch_w = at("vision.patch_proj.w");
  mv.patch_b = at("vision.patch_proj.b");
  mv.vision_pos = at("vision.pos");
  mv.img_token = at("vision.img_token");
  for (int l = 0; l < p.config.layers_vision; ++l) {
    mv.vision.push_back(lift_layer("vision.layer" + std::to_string(l), p.config.heads));
  }
  mv.scene_word_emb = at("scene.word_emb");
  mv.scene_type = at("scene.type");
  mv.scene_pos = at("scene.pos");
  mv.bbox_w = at("scene.bbox_proj.w");
  mv.bbox_b = at("scene.bbox_proj.b");
  for (int l = 0; l < p.config.layers_scene; ++l) {
    mv.scene.push_back(lift_layer("scene.layer" + std::to_string(l), p.config.heads));
  }
  mv.fus_init = at("fusion.init");
  mv.fus_type = at("fusion.type");
  mv.fus_token_id = at("fusion.token_id");
  mv.text_word_emb = at("text.word_emb");
  mv.text_pos = at("text.pos");
  for (int l = 0; l < p.config.layers_text; ++l) {
    mv.text.push_back(lift_layer("text.layer" + std::to_string(l), p.config.heads));
  }
  mv.head_img = at("head.img");
  mv.head_fus = at("head.fus");
  mv.head_text = at("head.text");
  mv.log_sigma = at("loss.log_sigma");
  return mv;
}

void export_grads(const Tape& tp, const ModelVars& mv, ModelParams& p) {
  size_t cursor = 0;
  p.for_each([&](const std::string& name, Tensor& t) {
    if (cursor >= mv.ordered.size() || mv.ordered[cursor].first != name) {
      throw ContractError("gradient export order desynchronized at '" + name + "'");
    }
    std::span<const double> g = tp.grad(mv.ordered[cursor].second);
    t.ensure_grad();
    if (g.empty()) {
      t.zero_grad();
    } else {
      std::copy(g.begin(), g.end(), t.grad.begin());
    }
    ++cursor;
  });
}

}  // namespace stf
