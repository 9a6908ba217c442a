#pragma once

// Synthetic corpus generation, line-delimited corpus persistence, vocabulary
// construction, and deterministic batching.
//
// Generated images are procedural patterns whose pixel statistics follow a
// category word that also appears in the caption. Scene text, when present,
// draws words from the caption with probability scene_text_relevance (random
// distractors otherwise) and by default each word is painted into its box as
// a deterministic pixel signature so the pixels genuinely carry it.

#include <cstdint>
#include <string>
#include <vector>

#include "stfusion/encoders.hpp"

namespace stf {

struct CorpusItem {
  ImageRecord image;
  std::vector<OcrToken> ocr;           // may be empty
  std::vector<std::string> captions;   // at least one
};

struct CorpusSpec {
  int n_items = 16;
  int image_h = 8, image_w = 8, image_c = 1;
  int vocab_size = 48;                // generator word pool size
  int caption_len_min = 3, caption_len_max = 6;
  double ocr_probability = 0.5;       // chance an item carries scene text
  int ocr_min = 1, ocr_max = 2;       // tokens per scene-text-bearing item
  double scene_text_relevance = 0.8;  // chance an ocr word comes from the caption
  bool paint_ocr = true;              // stamp word signatures into the box pixels
  bool duplicate_pairs = false;       // discrimination mode: items 2k and 2k+1
                                      // share identical pixels and differ only
                                      // in scene text / caption keyword
  uint64_t seed = 1;

  void validate() const;  // throws ConfigError

  static CorpusSpec mixed();
  // Pixel-identical pairs, scene text always present and drawn from the
  // caption, painting off so pixels alone cannot separate a pair.
  static CorpusSpec discrimination(int n_pairs = 16);
};

std::vector<CorpusItem> generate_corpus(const CorpusSpec& spec);

// Line-delimited format: line 1 is a schema header object, every following
// line is one item with base64-encoded 64-bit pixel data. Loading validates
// every invariant and reports the offending line or item.
void write_corpus(const std::string& path, const std::vector<CorpusItem>& items);
std::vector<CorpusItem> load_corpus(const std::string& path);

// All caption and scene-text words, deduplicated, behind the reserved ids.
Vocab build_vocab(const std::vector<CorpusItem>& items);

struct Batch {
  std::vector<int> items;     // corpus indices
  std::vector<int> captions;  // chosen caption index per item
};

// Deterministic function of (seed, epoch): shuffles items, samples one
// caption per item, chunks to batch_size, and drops a trailing batch smaller
// than two (a one-item contrastive batch is degenerate).
std::vector<Batch> make_batches(const std::vector<CorpusItem>& corpus, int batch_size,
                                uint64_t seed, int epoch);

}  // namespace stf
