#include "stfusion/encoders.hpp"

#include <algorithm>
#include <cctype>
#include <iostream>

namespace stf {

void validate_bbox(const std::array<double, 4>& b) {
  for (double v : b) {
    if (!(v >= 0.0 && v <= 1.0)) {
      throw ContractError("bbox coordinate " + std::to_string(v) + " outside [0,1]");
    }
  }
  if (b[0] > b[2] || b[1] > b[3]) {
    throw ContractError("bbox corners out of order: x1=" + std::to_string(b[0]) +
                        " x2=" + std::to_string(b[2]) + " y1=" + std::to_string(b[1]) +
                        " y2=" + std::to_string(b[3]));
  }
}

std::vector<std::string> tokenize(const std::string& text) {
  std::vector<std::string> out;
  std::string cur;
  for (char ch : text) {
    const unsigned char u = static_cast<unsigned char>(ch);
    if (std::isalnum(u)) {
      cur.push_back(static_cast<char>(std::tolower(u)));
    } else if (!cur.empty()) {
      out.push_back(std::move(cur));
      cur.clear();
    }
  }
  if (!cur.empty()) out.push_back(std::move(cur));
  return out;
}

Vocab::Vocab() {
  words_ = {"[PAD]", "[UNK]", "[CLS]", "[IMG]", "[FUS]"};
  for (size_t i = 0; i < words_.size(); ++i) index_[words_[i]] = static_cast<int>(i);
}

Vocab Vocab::build(std::vector<std::string> words) {
  std::sort(words.begin(), words.end());
  words.erase(std::unique(words.begin(), words.end()), words.end());
  Vocab v;
  for (std::string& w : words) {
    if (w.empty()) continue;
    v.index_[w] = static_cast<int>(v.words_.size());
    v.words_.push_back(std::move(w));
  }
  return v;
}

Vocab Vocab::from_index(std::vector<std::string> words) {
  Vocab v;
  if (words.size() < kReserved ||
      !std::equal(v.words_.begin(), v.words_.end(), words.begin())) {
    throw ContractError("vocab index does not start with the reserved entries");
  }
  v.words_.clear();
  v.index_.clear();
  for (std::string& w : words) {
    if (v.index_.count(w)) throw ContractError("vocab index has duplicate word '" + w + "'");
    v.index_[w] = static_cast<int>(v.words_.size());
    v.words_.push_back(std::move(w));
  }
  return v;
}

int Vocab::id(const std::string& word) const {
  auto it = index_.find(word);
  return it == index_.end() ? kUnk : it->second;
}

Tensor patch_matrix(const Tensor& pixels, int patch) {
  if (pixels.rank() != 3) {
    throw ShapeError("patch_matrix needs [H,W,C] pixels, shape is " + shape_str(pixels.shape));
  }
  const int h = pixels.shape[0], w = pixels.shape[1], c = pixels.shape[2];
  if (patch <= 0 || h % patch != 0 || w % patch != 0) {
    throw ConfigError("image size must be divisible by the patch size; got " +
                      std::to_string(h) + "x" + std::to_string(w) + " with patch " +
                      std::to_string(patch));
  }
  const int gy = h / patch, gx = w / patch;
  Tensor out({gy * gx, patch * patch * c});
  for (int by = 0; by < gy; ++by) {
    for (int bx = 0; bx < gx; ++bx) {
      double* row = &out.values[static_cast<size_t>(by * gx + bx) * out.cols()];
      int k = 0;
      for (int py = 0; py < patch; ++py) {
        for (int px = 0; px < patch; ++px) {
          for (int ch = 0; ch < c; ++ch) {
            const int y = by * patch + py, x = bx * patch + px;
            row[k++] = pixels.values[(static_cast<size_t>(y) * w + x) * c + ch];
          }
        }
      }
    }
  }
  return out;
}

Var patchify(Tape& tp, const ImageRecord& image, int patch, Var proj_w, Var proj_b,
             Var pos, Var img_token) {
  for (double v : image.pixels.values) {
    if (!(v >= 0.0 && v <= 1.0)) {
      throw ContractError("image '" + image.id + "' has pixel value " + std::to_string(v) +
                          " outside [0,1]");
    }
  }
  Var patches = tp.constant(patch_matrix(image.pixels, patch));
  Var projected = linear(tp, patches, proj_w, proj_b);
  Var seq = tp.concat_rows(img_token, projected);
  const int n = tp.value(seq).rows();
  if (tp.value(pos).rows() != n) {
    throw ConfigError("positional table has " + std::to_string(tp.value(pos).rows()) +
                      " rows but the patch sequence has " + std::to_string(n));
  }
  return tp.add(seq, pos);
}

Var scene_text_embed(Tape& tp, std::span<const OcrToken> ocr, const Vocab& vocab,
                     Var word_emb, Var type_vec, Var pos_table, Var bbox_w, Var bbox_b,
                     int max_ocr) {
  if (ocr.empty()) {
    throw ContractError("scene_text_embed needs at least one token; the caller routes "
                        "images without scene text around the scene tower");
  }
  if (static_cast<int>(ocr.size()) > max_ocr) {
    std::cerr << "scene_text_embed: dropping " << (ocr.size() - static_cast<size_t>(max_ocr))
              << " scene-text tokens beyond max_ocr=" << max_ocr << "\n";
    ocr = ocr.subspan(0, static_cast<size_t>(max_ocr));
  }
  const int n = static_cast<int>(ocr.size());
  std::vector<int> ids;
  ids.reserve(ocr.size());
  Tensor boxes({n, 4});
  for (int i = 0; i < n; ++i) {
    validate_bbox(ocr[i].bbox);
    ids.push_back(vocab.id(ocr[i].word));
    for (int j = 0; j < 4; ++j) boxes.at(i, j) = ocr[i].bbox[static_cast<size_t>(j)];
  }
  Var words = tp.gather_rows(word_emb, std::move(ids));
  Var typed = tp.add(words, broadcast_rows(tp, type_vec, n));
  Var placed = tp.add(typed, tp.slice_rows(pos_table, 0, n));
  return tp.add(placed, linear(tp, tp.constant(std::move(boxes)), bbox_w, bbox_b));
}

Var text_encode(Tape& tp, const ModelVars& mv, const ModelConfig& cfg, const Vocab& vocab,
                const std::string& text) {
  std::vector<std::string> tokens = tokenize(text);
  if (tokens.empty()) {
    throw ContractError("caption produced no tokens: '" + text + "'");
  }
  if (static_cast<int>(tokens.size()) > cfg.max_text) {
    tokens.resize(static_cast<size_t>(cfg.max_text));
  }
  std::vector<int> ids;
  ids.reserve(tokens.size() + 1);
  ids.push_back(Vocab::kCls);
  for (const std::string& t : tokens) ids.push_back(vocab.id(t));
  const int n = static_cast<int>(ids.size());
  Var seq = tp.gather_rows(mv.text_word_emb, std::move(ids));
  seq = tp.add(seq, tp.slice_rows(mv.text_pos, 0, n));
  for (const LayerVars& layer : mv.text) seq = transformer_layer(tp, seq, layer);
  Var cls = tp.slice_rows(seq, 0, 1);
  return l2_normalize_rows(tp, tp.matmul(cls, mv.head_text));
}

Var vision_backbone(Tape& tp, Var seq, const std::vector<LayerVars>& layers, int n_layers) {
  if (n_layers < 0 || n_layers > static_cast<int>(layers.size())) {
    throw ContractError("vision_backbone asked for " + std::to_string(n_layers) +
                        " layers but " + std::to_string(layers.size()) + " exist");
  }
  for (int l = 0; l < n_layers; ++l) seq = transformer_layer(tp, seq, layers[static_cast<size_t>(l)]);
  return seq;
}

}  // namespace stf
