#pragma once

// Input encoders: image patchification, scene-text token embedding, and the
// caption encoder, plus the shared vocabulary and tokenizer.

#include <array>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "stfusion/model.hpp"
#include "stfusion/tensor.hpp"

namespace stf {

struct ImageRecord {
  std::string id;
  Tensor pixels;  // [H, W, C], values in [0, 1]
};

struct OcrToken {
  std::string word;
  std::array<double, 4> bbox;  // normalized [x1, y1, x2, y2], x1 <= x2, y1 <= y2
};

struct CaptionRecord {
  std::string image_id;
  std::string text;
};

void validate_bbox(const std::array<double, 4>& bbox);  // throws ContractError

// Lowercases and splits on anything that is not a letter or digit.
std::vector<std::string> tokenize(const std::string& text);

// Word index with five reserved entries at the front. Unknown words map to
// the unk id rather than failing, so a trained model can score novel text.
class Vocab {
 public:
  static constexpr int kPad = 0;
  static constexpr int kUnk = 1;
  static constexpr int kCls = 2;
  static constexpr int kImg = 3;
  static constexpr int kFus = 4;
  static constexpr int kReserved = 5;

  Vocab();
  // Deduplicates and sorts; reserved names collide with nothing because user
  // words are lowercase while reserved entries are bracketed.
  static Vocab build(std::vector<std::string> words);
  static Vocab from_index(std::vector<std::string> words);  // exact restore

  int id(const std::string& word) const;
  int size() const { return static_cast<int>(words_.size()); }
  const std::vector<std::string>& words() const { return words_; }

 private:
  std::vector<std::string> words_;
  std::unordered_map<std::string, int> index_;
};

// Pre-projection patch extraction: row p holds patch p's pixels flattened in
// (y, x, channel) order; patches are ordered row-major over the patch grid.
Tensor patch_matrix(const Tensor& pixels, int patch);

// Patch tokens: project every patch to width d, prepend the learned image
// token, then add the positional table to all n_patches+1 rows.
Var patchify(Tape& tp, const ImageRecord& image, int patch, Var proj_w, Var proj_b,
             Var pos, Var img_token);

// Scene-text tokens: word embedding + shared type vector + per-slot position
// embedding, plus a linear projection of the box coordinates. Inputs beyond
// max_ocr are dropped (with a one-line warning on stderr).
Var scene_text_embed(Tape& tp, std::span<const OcrToken> ocr, const Vocab& vocab,
                     Var word_emb, Var type_vec, Var pos_table, Var bbox_w, Var bbox_b,
                     int max_ocr);

// Full caption encoder: tokenize, truncate to max_text, prepend the start
// token, run layers_text transformer layers, then project the start-token
// state to the retrieval space and L2-normalize. Empty captions are a
// ContractError.
Var text_encode(Tape& tp, const ModelVars& mv, const ModelConfig& cfg, const Vocab& vocab,
                const std::string& text);

// Applies the first n_layers vision layers to a patchified sequence.
Var vision_backbone(Tape& tp, Var seq, const std::vector<LayerVars>& layers, int n_layers);

}  // namespace stf
