#include "stfusion/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>
#include <sstream>

#include <json.hpp>

#include "stfusion/hashing.hpp"
#include "stfusion/rng.hpp"

namespace stf {

namespace {

using nlohmann::json;

// Category words; each drives a distinct procedural pixel pattern.
const std::vector<std::string> kCategories = {
    "stripes", "checker", "gradx", "grady", "rings",  "dots",
    "bands",   "diag",    "slope", "bright", "shadow", "weave"};

std::vector<std::string> filler_pool(int vocab_size) {
  std::vector<std::string> pool;
  const int n = vocab_size - static_cast<int>(kCategories.size());
  pool.reserve(static_cast<size_t>(n));
  for (int i = 0; i < n; ++i) {
    std::ostringstream os;
    os << "w" << i;
    pool.push_back(os.str());
  }
  return pool;
}

Rng stream(uint64_t seed, uint64_t tag, uint64_t idx) {
  return Rng(mix64(mix64(seed ^ tag) + idx));
}

constexpr uint64_t kTagImage = 0x11;
constexpr uint64_t kTagCaption = 0x22;
constexpr uint64_t kTagOcr = 0x33;
constexpr uint64_t kTagBatch = 0x44;

double pattern_value(int category, double variant, int x, int y, int ch,
                     const CorpusSpec& spec) {
  const double u = (x + 0.5) / spec.image_w;
  const double v = (y + 0.5) / spec.image_h;
  const double tau = 6.283185307179586;
  double val = 0.5;
  switch (category % 12) {
    case 0: val = 0.5 + 0.45 * std::sin(tau * (3.0 * u + variant)); break;
    case 1: val = ((x + y) % 2 == 0) ? 0.15 + 0.2 * variant : 0.85 - 0.2 * variant; break;
    case 2: val = 0.05 + 0.9 * u; break;
    case 3: val = 0.05 + 0.9 * v; break;
    case 4: {
      const double r = std::sqrt((u - 0.5) * (u - 0.5) + (v - 0.5) * (v - 0.5));
      val = 0.5 + 0.45 * std::sin(tau * (4.0 * r + variant));
      break;
    }
    case 5: val = 0.5 + 0.45 * std::sin(tau * 2.0 * u) * std::sin(tau * 2.0 * v); break;
    case 6: val = 0.5 + 0.45 * std::sin(tau * (3.0 * v + variant)); break;
    case 7: val = 0.5 + 0.45 * std::sin(tau * (2.0 * (u + v) + variant)); break;
    case 8: val = 0.05 + 0.9 * u * (1.0 - v); break;
    case 9: val = 0.25 + 0.5 * variant; break;
    case 10: val = 0.95 - 0.85 * std::sqrt(u * v); break;
    case 11: val = 0.5 + 0.45 * std::sin(tau * (2.0 * u + variant)) *
                          std::cos(tau * (2.0 * v + variant));
      break;
  }
  val += 0.04 * ch;
  return std::clamp(val, 0.0, 1.0);
}

Tensor render_image(int category, double variant, Rng& rng, const CorpusSpec& spec) {
  Tensor px({spec.image_h, spec.image_w, spec.image_c});
  size_t k = 0;
  for (int y = 0; y < spec.image_h; ++y) {
    for (int x = 0; x < spec.image_w; ++x) {
      for (int c = 0; c < spec.image_c; ++c) {
        const double noise = 0.04 * (rng.uniform() - 0.5);
        px.values[k++] = std::clamp(pattern_value(category, variant, x, y, c, spec) + noise,
                                    0.0, 1.0);
      }
    }
  }
  return px;
}

double signature01(uint64_t word_hash, int dx, int dy, int ch) {
  const uint64_t h = mix64(word_hash ^ mix64((static_cast<uint64_t>(dx) * 131 +
                                              static_cast<uint64_t>(dy)) * 31 +
                                             static_cast<uint64_t>(ch)));
  return static_cast<double>(h >> 11) * 0x1.0p-53;
}

void paint_word(Tensor& pixels, const OcrToken& tok, const CorpusSpec& spec) {
  const uint64_t wh = fnv1a64(tok.word);
  const int x0 = static_cast<int>(std::floor(tok.bbox[0] * spec.image_w));
  const int y0 = static_cast<int>(std::floor(tok.bbox[1] * spec.image_h));
  int x1 = static_cast<int>(std::ceil(tok.bbox[2] * spec.image_w));
  int y1 = static_cast<int>(std::ceil(tok.bbox[3] * spec.image_h));
  x1 = std::min(std::max(x1, x0 + 1), spec.image_w);
  y1 = std::min(std::max(y1, y0 + 1), spec.image_h);
  for (int y = y0; y < y1; ++y) {
    for (int x = x0; x < x1; ++x) {
      for (int c = 0; c < spec.image_c; ++c) {
        pixels.values[(static_cast<size_t>(y) * spec.image_w + x) * spec.image_c + c] =
            signature01(wh, x - x0, y - y0, c);
      }
    }
  }
}

std::array<double, 4> random_bbox(Rng& rng) {
  const double x1 = rng.uniform(0.0, 0.65);
  const double y1 = rng.uniform(0.0, 0.65);
  const double x2 = std::min(1.0, x1 + rng.uniform(0.2, 0.35));
  const double y2 = std::min(1.0, y1 + rng.uniform(0.2, 0.35));
  return {x1, y1, x2, y2};
}

std::string item_id(int i) {
  std::ostringstream os;
  os << "item";
  std::string n = std::to_string(i);
  for (size_t k = n.size(); k < 4; ++k) os << '0';
  os << n;
  return os.str();
}

// ---------------------------------------------------------------------------
// base64 of raw little-endian doubles

constexpr char kB64Alphabet[] =
    "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789+/";

std::string base64_encode(const std::vector<double>& values) {
  const unsigned char* bytes = reinterpret_cast<const unsigned char*>(values.data());
  const size_t n = values.size() * sizeof(double);
  std::string out;
  out.reserve((n + 2) / 3 * 4);
  for (size_t i = 0; i < n; i += 3) {
    uint32_t chunk = static_cast<uint32_t>(bytes[i]) << 16;
    int have = 1;
    if (i + 1 < n) { chunk |= static_cast<uint32_t>(bytes[i + 1]) << 8; have = 2; }
    if (i + 2 < n) { chunk |= bytes[i + 2]; have = 3; }
    out.push_back(kB64Alphabet[(chunk >> 18) & 63]);
    out.push_back(kB64Alphabet[(chunk >> 12) & 63]);
    out.push_back(have >= 2 ? kB64Alphabet[(chunk >> 6) & 63] : '=');
    out.push_back(have >= 3 ? kB64Alphabet[chunk & 63] : '=');
  }
  return out;
}

std::vector<double> base64_decode_doubles(const std::string& text) {
  static const auto value_of = [] {
    std::array<int, 256> v{};
    v.fill(-1);
    for (int i = 0; i < 64; ++i) v[static_cast<unsigned char>(kB64Alphabet[i])] = i;
    return v;
  }();
  if (text.size() % 4 != 0) throw IoError("base64 payload length not a multiple of 4");
  std::vector<unsigned char> bytes;
  bytes.reserve(text.size() / 4 * 3);
  for (size_t i = 0; i < text.size(); i += 4) {
    uint32_t chunk = 0;
    int pads = 0;
    for (int j = 0; j < 4; ++j) {
      const char ch = text[i + j];
      if (ch == '=') {
        if (j < 2 || i + 4 != text.size()) throw IoError("misplaced base64 padding");
        ++pads;
        chunk <<= 6;
      } else {
        const int v = value_of[static_cast<unsigned char>(ch)];
        if (v < 0 || pads > 0) throw IoError("invalid base64 character");
        chunk = (chunk << 6) | static_cast<uint32_t>(v);
      }
    }
    bytes.push_back(static_cast<unsigned char>((chunk >> 16) & 0xff));
    if (pads < 2) bytes.push_back(static_cast<unsigned char>((chunk >> 8) & 0xff));
    if (pads < 1) bytes.push_back(static_cast<unsigned char>(chunk & 0xff));
  }
  if (bytes.size() % sizeof(double) != 0) {
    throw IoError("pixel payload is not a whole number of 64-bit values");
  }
  std::vector<double> values(bytes.size() / sizeof(double));
  std::copy(bytes.begin(), bytes.end(), reinterpret_cast<unsigned char*>(values.data()));
  return values;
}

}  // namespace

void CorpusSpec::validate() const {
  if (n_items <= 0) throw ConfigError("corpus spec: n_items must be positive");
  if (image_h <= 0 || image_w <= 0 || image_c <= 0) {
    throw ConfigError("corpus spec: image dimensions must be positive");
  }
  const int min_vocab = static_cast<int>(kCategories.size()) + 4;
  if (vocab_size < min_vocab) {
    throw ConfigError("corpus spec: vocab_size must be at least " + std::to_string(min_vocab));
  }
  if (caption_len_min < 2 || caption_len_max < caption_len_min) {
    throw ConfigError("corpus spec: caption length range invalid (need 2 <= min <= max)");
  }
  if (!(ocr_probability >= 0.0 && ocr_probability <= 1.0)) {
    throw ConfigError("corpus spec: ocr_probability must lie in [0,1]");
  }
  if (ocr_min < 1 || ocr_max < ocr_min) {
    throw ConfigError("corpus spec: ocr token range invalid (need 1 <= min <= max)");
  }
  if (!(scene_text_relevance >= 0.0 && scene_text_relevance <= 1.0)) {
    throw ConfigError("corpus spec: scene_text_relevance must lie in [0,1]");
  }
  if (duplicate_pairs) {
    if (n_items % 2 != 0) throw ConfigError("corpus spec: duplicate_pairs needs an even n_items");
    if (paint_ocr) {
      throw ConfigError("corpus spec: painting scene text would break pixel-identical pairs");
    }
    const int fillers = vocab_size - static_cast<int>(kCategories.size());
    if (fillers < n_items) {
      throw ConfigError("corpus spec: duplicate_pairs needs vocab_size >= " +
                        std::to_string(static_cast<int>(kCategories.size()) + n_items) +
                        " for per-item keywords");
    }
  }
}

CorpusSpec CorpusSpec::mixed() { return CorpusSpec{}; }

CorpusSpec CorpusSpec::discrimination(int n_pairs) {
  CorpusSpec s;
  s.n_items = 2 * n_pairs;
  s.vocab_size = static_cast<int>(kCategories.size()) + 2 * n_pairs + 8;
  s.caption_len_min = 3;
  s.caption_len_max = 4;
  s.ocr_probability = 1.0;
  s.ocr_min = 1;
  s.ocr_max = 1;
  s.scene_text_relevance = 1.0;
  s.paint_ocr = false;
  s.duplicate_pairs = true;
  return s;
}

std::vector<CorpusItem> generate_corpus(const CorpusSpec& spec) {
  spec.validate();
  const std::vector<std::string> fillers = filler_pool(spec.vocab_size);
  const int n_cat = static_cast<int>(kCategories.size());
  std::vector<CorpusItem> items;
  items.reserve(static_cast<size_t>(spec.n_items));

  for (int i = 0; i < spec.n_items; ++i) {
    CorpusItem item;
    item.image.id = item_id(i);
    const int group = spec.duplicate_pairs ? i / 2 : i;

    Rng img_rng = stream(spec.seed, kTagImage, static_cast<uint64_t>(group));
    const int category = img_rng.uniform_int(n_cat);
    const double variant = img_rng.uniform();
    item.image.pixels = render_image(category, variant, img_rng, spec);

    Rng cap_rng = stream(spec.seed, kTagCaption, static_cast<uint64_t>(group));
    const int len = spec.caption_len_min +
                    cap_rng.uniform_int(spec.caption_len_max - spec.caption_len_min + 1);
    std::vector<std::string> tokens;
    tokens.push_back(kCategories[static_cast<size_t>(category)]);
    for (int k = 0; k < len - 2; ++k) {
      tokens.push_back(fillers[static_cast<size_t>(cap_rng.uniform_int(
          static_cast<int>(fillers.size())))]);
    }
    // A per-item keyword keeps captions unique; in duplicate-pair mode it is
    // the only difference between the two captions of a pair.
    tokens.push_back(fillers[static_cast<size_t>(i) % fillers.size()]);
    std::ostringstream caption;
    for (size_t k = 0; k < tokens.size(); ++k) {
      if (k) caption << ' ';
      caption << tokens[k];
    }
    item.captions.push_back(caption.str());

    Rng ocr_rng = stream(spec.seed, kTagOcr, static_cast<uint64_t>(i));
    const bool has_ocr = spec.duplicate_pairs || ocr_rng.uniform() < spec.ocr_probability;
    if (has_ocr) {
      const int count = spec.ocr_min + ocr_rng.uniform_int(spec.ocr_max - spec.ocr_min + 1);
      for (int k = 0; k < count; ++k) {
        OcrToken tok;
        if (spec.duplicate_pairs && k == 0) {
          tok.word = tokens.back();  // the discriminating keyword
        } else if (ocr_rng.uniform() < spec.scene_text_relevance) {
          tok.word = tokens[static_cast<size_t>(ocr_rng.uniform_int(
              static_cast<int>(tokens.size())))];
        } else {
          // Distractor from outside the caption so the measured relevance
          // fraction matches the knob.
          for (int tries = 0; tries < 100; ++tries) {
            tok.word = fillers[static_cast<size_t>(ocr_rng.uniform_int(
                static_cast<int>(fillers.size())))];
            if (std::find(tokens.begin(), tokens.end(), tok.word) == tokens.end()) break;
          }
        }
        tok.bbox = random_bbox(ocr_rng);
        if (spec.paint_ocr) paint_word(item.image.pixels, tok, spec);
        item.ocr.push_back(std::move(tok));
      }
    }
    items.push_back(std::move(item));
  }
  return items;
}

void write_corpus(const std::string& path, const std::vector<CorpusItem>& items) {
  if (items.empty()) throw ContractError("refusing to write an empty corpus");
  const Shape& s0 = items.front().image.pixels.shape;
  for (const CorpusItem& it : items) {
    if (it.image.pixels.shape != s0) {
      throw ContractError("corpus images must share one size; '" + it.image.id +
                          "' is " + shape_str(it.image.pixels.shape));
    }
  }
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open '" + path + "' for writing");
  json header = {{"schema_version", 1},
                 {"height", s0[0]},
                 {"width", s0[1]},
                 {"channels", s0[2]},
                 {"count", items.size()}};
  out << header.dump() << '\n';
  for (const CorpusItem& it : items) {
    json rec;
    rec["id"] = it.image.id;
    rec["pixels"] = base64_encode(it.image.pixels.values);
    json ocr = json::array();
    for (const OcrToken& t : it.ocr) {
      ocr.push_back({{"word", t.word},
                     {"bbox", {t.bbox[0], t.bbox[1], t.bbox[2], t.bbox[3]}}});
    }
    rec["ocr"] = std::move(ocr);
    rec["captions"] = it.captions;
    out << rec.dump() << '\n';
  }
  if (!out) throw IoError("write to '" + path + "' failed");
}

namespace {

[[noreturn]] void load_fail(const std::string& path, size_t line, const std::string& what) {
  throw IoError(path + ":" + std::to_string(line) + ": " + what);
}

}  // namespace

std::vector<CorpusItem> load_corpus(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open corpus '" + path + "'");
  std::string line;
  size_t line_no = 0;

  if (!std::getline(in, line)) throw IoError(path + ": empty corpus file");
  ++line_no;
  int h = 0, w = 0, c = 0;
  size_t declared = 0;
  try {
    json header = json::parse(line);
    if (header.at("schema_version").get<int>() != 1) {
      load_fail(path, line_no, "unsupported schema_version");
    }
    h = header.at("height").get<int>();
    w = header.at("width").get<int>();
    c = header.at("channels").get<int>();
    declared = header.at("count").get<size_t>();
  } catch (const json::exception& e) {
    load_fail(path, line_no, std::string("bad header: ") + e.what());
  }
  if (h <= 0 || w <= 0 || c <= 0) load_fail(path, line_no, "non-positive image dimensions");

  std::vector<CorpusItem> items;
  std::set<std::string> seen_ids;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    json rec;
    try {
      rec = json::parse(line);
    } catch (const json::exception& e) {
      load_fail(path, line_no, std::string("malformed record: ") + e.what());
    }
    CorpusItem item;
    try {
      item.image.id = rec.at("id").get<std::string>();
      if (item.image.id.empty()) load_fail(path, line_no, "empty id");
      if (!seen_ids.insert(item.image.id).second) {
        load_fail(path, line_no, "duplicate id '" + item.image.id + "'");
      }
      std::vector<double> px;
      const json& jp = rec.at("pixels");
      if (jp.is_string()) {
        try {
          px = base64_decode_doubles(jp.get<std::string>());
        } catch (const IoError& e) {
          load_fail(path, line_no, "item '" + item.image.id + "': " + e.what());
        }
      } else if (jp.is_array()) {
        std::function<void(const json&)> collect = [&](const json& node) {
          if (node.is_array()) {
            for (const json& ch : node) collect(ch);
          } else {
            px.push_back(node.get<double>());
          }
        };
        collect(jp);
      } else {
        load_fail(path, line_no, "pixels must be a base64 string or a (nested) array");
      }
      if (static_cast<int64_t>(px.size()) != static_cast<int64_t>(h) * w * c) {
        load_fail(path, line_no, "item '" + item.image.id + "': pixel count " +
                                     std::to_string(px.size()) + " does not match " +
                                     std::to_string(h) + "x" + std::to_string(w) + "x" +
                                     std::to_string(c));
      }
      for (double v : px) {
        if (!(v >= 0.0 && v <= 1.0)) {
          load_fail(path, line_no,
                    "item '" + item.image.id + "': pixel value outside [0,1]");
        }
      }
      item.image.pixels = Tensor({h, w, c}, std::move(px));
      for (const json& jt : rec.at("ocr")) {
        OcrToken tok;
        tok.word = jt.at("word").get<std::string>();
        if (tok.word.empty()) {
          load_fail(path, line_no, "item '" + item.image.id + "': empty ocr word");
        }
        const json& jb = jt.at("bbox");
        if (!jb.is_array() || jb.size() != 4) {
          load_fail(path, line_no, "item '" + item.image.id + "': bbox must have 4 numbers");
        }
        for (int k = 0; k < 4; ++k) tok.bbox[static_cast<size_t>(k)] = jb[static_cast<size_t>(k)].get<double>();
        try {
          validate_bbox(tok.bbox);
        } catch (const ContractError& e) {
          load_fail(path, line_no, "item '" + item.image.id + "': " + e.what());
        }
        item.ocr.push_back(std::move(tok));
      }
      for (const json& jc : rec.at("captions")) {
        std::string text = jc.get<std::string>();
        if (tokenize(text).empty()) {
          load_fail(path, line_no, "item '" + item.image.id + "': caption has no tokens");
        }
        item.captions.push_back(std::move(text));
      }
      if (item.captions.empty()) {
        load_fail(path, line_no, "item '" + item.image.id + "': needs at least one caption");
      }
    } catch (const json::exception& e) {
      load_fail(path, line_no, std::string("bad record field: ") + e.what());
    }
    items.push_back(std::move(item));
  }
  if (declared != items.size()) {
    throw IoError(path + ": header declares " + std::to_string(declared) + " items but " +
                  std::to_string(items.size()) + " were read");
  }
  if (items.empty()) throw IoError(path + ": corpus has no items");
  return items;
}

Vocab build_vocab(const std::vector<CorpusItem>& items) {
  std::vector<std::string> words;
  for (const CorpusItem& it : items) {
    for (const std::string& cap : it.captions) {
      for (std::string& t : tokenize(cap)) words.push_back(std::move(t));
    }
    for (const OcrToken& t : it.ocr) {
      for (std::string& w : tokenize(t.word)) words.push_back(std::move(w));
    }
  }
  return Vocab::build(std::move(words));
}

std::vector<Batch> make_batches(const std::vector<CorpusItem>& corpus, int batch_size,
                                uint64_t seed, int epoch) {
  if (batch_size < 2) throw ContractError("batch_size must be at least 2");
  if (epoch < 0) throw ContractError("epoch must be non-negative");
  const int n = static_cast<int>(corpus.size());
  Rng rng = stream(seed, kTagBatch, static_cast<uint64_t>(epoch));
  std::vector<int> perm(static_cast<size_t>(n));
  for (int i = 0; i < n; ++i) perm[static_cast<size_t>(i)] = i;
  for (int i = n - 1; i > 0; --i) {
    const int j = rng.uniform_int(i + 1);
    std::swap(perm[static_cast<size_t>(i)], perm[static_cast<size_t>(j)]);
  }
  std::vector<Batch> batches;
  for (int at = 0; at < n; at += batch_size) {
    const int end = std::min(n, at + batch_size);
    if (end - at < 2) break;  // a single leftover item cannot form a contrastive pair
    Batch b;
    for (int k = at; k < end; ++k) {
      const int item = perm[static_cast<size_t>(k)];
      b.items.push_back(item);
      b.captions.push_back(rng.uniform_int(
          static_cast<int>(corpus[static_cast<size_t>(item)].captions.size())));
    }
    batches.push_back(std::move(b));
  }
  return batches;
}

}  // namespace stf
