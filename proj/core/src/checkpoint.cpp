#include "stfusion/checkpoint.hpp"

#include <array>
#include <cstring>
#include <fstream>
#include <map>

namespace stf {

namespace {

constexpr char kMagic[8] = {'S', 'T', 'F', 'C', 'K', 'P', 'T', '1'};
constexpr uint32_t kVersion = 1;

struct Writer {
  std::ofstream out;
  std::string path;

  Writer(const std::string& p) : out(p, std::ios::binary | std::ios::trunc), path(p) {
    if (!out) throw IoError("cannot open checkpoint '" + p + "' for writing");
  }
  void bytes(const void* data, size_t n) {
    out.write(static_cast<const char*>(data), static_cast<std::streamsize>(n));
    if (!out) throw IoError("write to checkpoint '" + path + "' failed");
  }
  void u8(uint8_t x) { bytes(&x, sizeof(x)); }
  void u32(uint32_t x) { bytes(&x, sizeof(x)); }
  void u64(uint64_t x) { bytes(&x, sizeof(x)); }
  void i64(int64_t x) { bytes(&x, sizeof(x)); }
  void str(const std::string& s) {
    u32(static_cast<uint32_t>(s.size()));
    bytes(s.data(), s.size());
  }
  void doubles(const std::vector<double>& xs) {
    bytes(xs.data(), xs.size() * sizeof(double));
  }
};

struct Reader {
  std::ifstream in;
  std::string path;

  Reader(const std::string& p) : in(p, std::ios::binary), path(p) {
    if (!in) throw IoError("cannot open checkpoint '" + p + "'");
  }
  void bytes(void* data, size_t n) {
    in.read(static_cast<char*>(data), static_cast<std::streamsize>(n));
    if (!in) throw IoError("checkpoint '" + path + "' is truncated or unreadable");
  }
  uint8_t u8() { uint8_t x; bytes(&x, sizeof(x)); return x; }
  uint32_t u32() { uint32_t x; bytes(&x, sizeof(x)); return x; }
  uint64_t u64() { uint64_t x; bytes(&x, sizeof(x)); return x; }
  int64_t i64() { int64_t x; bytes(&x, sizeof(x)); return x; }
  std::string str(uint32_t max_len = 1u << 20) {
    const uint32_t n = u32();
    if (n > max_len) throw IoError("checkpoint '" + path + "' has an oversized string");
    std::string s(n, '\0');
    bytes(s.data(), n);
    return s;
  }
  std::vector<double> doubles(uint64_t n) {
    std::vector<double> xs(n);
    bytes(xs.data(), n * sizeof(double));
    return xs;
  }
};

// Config fields in declaration order; shared by save and load so the two can
// never drift apart.
template <typename Cfg, typename Fn>
void config_fields(Cfg& cfg, Fn&& fn) {
  fn(cfg.patch);
  fn(cfg.d);
  fn(cfg.heads);
  fn(cfg.layers_vision);
  fn(cfg.layers_scene);
  fn(cfg.layers_text);
  fn(cfg.layers_fusion);
  fn(cfg.embed_dim);
  fn(cfg.max_ocr);
  fn(cfg.max_text);
  fn(cfg.image_h);
  fn(cfg.image_w);
  fn(cfg.image_c);
  fn(cfg.fusion_tokens);
}

}  // namespace

void save_checkpoint(const std::string& path, const ModelParams& params,
                     const Vocab& vocab, const AdamState* opt, uint64_t step) {
  if (vocab.size() != params.vocab_size) {
    throw ContractError("vocabulary size " + std::to_string(vocab.size()) +
                        " does not match the model's " + std::to_string(params.vocab_size));
  }
  if (opt && !opt->matches(params)) {
    throw ContractError("optimizer state does not match the parameter layout");
  }
  Writer w(path);
  w.bytes(kMagic, sizeof(kMagic));
  w.u32(kVersion);
  config_fields(params.config, [&](int x) { w.i64(x); });

  w.u64(static_cast<uint64_t>(vocab.size()));
  for (const std::string& word : vocab.words()) w.str(word);

  uint64_t n_tensors = 0;
  params.for_each([&](const std::string&, const Tensor&) { ++n_tensors; });
  w.u64(n_tensors);
  params.for_each([&](const std::string& name, const Tensor& t) {
    w.str(name);
    w.u32(static_cast<uint32_t>(t.rank()));
    for (int i = 0; i < t.rank(); ++i) w.i64(t.dim(i));
    w.doubles(t.values);
  });

  w.u8(opt ? 1 : 0);
  if (opt) {
    w.u64(step);
    for (size_t i = 0; i < opt->m.size(); ++i) {
      w.u64(static_cast<uint64_t>(opt->m[i].size()));
      w.doubles(opt->m[i]);
      w.u64(static_cast<uint64_t>(opt->v[i].size()));
      w.doubles(opt->v[i]);
    }
  }
}

Checkpoint load_checkpoint(const std::string& path) {
  Reader r(path);
  char magic[8];
  r.bytes(magic, sizeof(magic));
  if (std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) {
    throw IoError("'" + path + "' is not a checkpoint (bad magic)");
  }
  const uint32_t version = r.u32();
  if (version != kVersion) {
    throw IoError("checkpoint '" + path + "' has unsupported version " +
                  std::to_string(version));
  }
  ModelConfig cfg;
  config_fields(cfg, [&](int& x) {
    const int64_t v = r.i64();
    x = static_cast<int>(v);
    if (static_cast<int64_t>(x) != v) {
      throw IoError("checkpoint '" + path + "' has an out-of-range config field");
    }
  });
  cfg.validate();

  const uint64_t n_words = r.u64();
  if (n_words > (1u << 24)) {
    throw IoError("checkpoint '" + path + "' declares an implausible vocabulary");
  }
  std::vector<std::string> words;
  words.reserve(n_words);
  for (uint64_t i = 0; i < n_words; ++i) words.push_back(r.str());

  Checkpoint ck;
  ck.vocab = Vocab::from_index(std::move(words));
  ck.params = ModelParams::shaped(cfg, ck.vocab.size());

  std::map<std::string, Tensor*> by_name;
  ck.params.for_each([&](const std::string& name, Tensor& t) { by_name[name] = &t; });

  const uint64_t n_tensors = r.u64();
  if (n_tensors != by_name.size()) {
    throw IoError("checkpoint '" + path + "' holds " + std::to_string(n_tensors) +
                  " tensors but this configuration needs " +
                  std::to_string(by_name.size()));
  }
  size_t filled = 0;
  std::map<std::string, bool> seen;
  for (uint64_t i = 0; i < n_tensors; ++i) {
    const std::string name = r.str();
    const uint32_t rank = r.u32();
    if (rank > 8) throw IoError("checkpoint '" + path + "' tensor '" + name +
                                "' has implausible rank");
    Shape shape(rank);
    for (uint32_t k = 0; k < rank; ++k) {
      const int64_t d = r.i64();
      shape[k] = static_cast<int>(d);
      if (shape[k] <= 0 || static_cast<int64_t>(shape[k]) != d) {
        throw IoError("checkpoint '" + path + "' tensor '" + name + "' has a bad dimension");
      }
    }
    auto it = by_name.find(name);
    if (it == by_name.end()) {
      throw IoError("checkpoint '" + path + "' names unknown tensor '" + name + "'");
    }
    if (seen[name]) {
      throw IoError("checkpoint '" + path + "' repeats tensor '" + name + "'");
    }
    seen[name] = true;
    Tensor& dst = *it->second;
    if (shape != dst.shape) {
      throw IoError("checkpoint '" + path + "' tensor '" + name + "' has shape " +
                    shape_str(shape) + ", expected " + shape_str(dst.shape));
    }
    dst.values = r.doubles(static_cast<uint64_t>(shape_numel(shape)));
    if (!dst.all_finite()) {
      throw IoError("checkpoint '" + path + "' tensor '" + name + "' holds non-finite values");
    }
    ++filled;
  }
  if (filled != by_name.size()) {
    throw IoError("checkpoint '" + path + "' left parameters unset");
  }

  if (r.u8() != 0) {
    ck.step = r.u64();
    AdamState opt;
    opt.step = static_cast<int64_t>(ck.step);
    ck.params.for_each([&](const std::string& name, const Tensor& t) {
      const uint64_t mn = r.u64();
      if (mn != static_cast<uint64_t>(t.size())) {
        throw IoError("checkpoint '" + path + "' optimizer slot for '" + name +
                      "' has the wrong length");
      }
      opt.m.push_back(r.doubles(mn));
      const uint64_t vn = r.u64();
      if (vn != static_cast<uint64_t>(t.size())) {
        throw IoError("checkpoint '" + path + "' optimizer slot for '" + name +
                      "' has the wrong length");
      }
      opt.v.push_back(r.doubles(vn));
    });
    ck.opt = std::move(opt);
  }
  return ck;
}

}  // namespace stf
