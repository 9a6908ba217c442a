#include "stfusion/runconfig.hpp"

#include <cstdio>
#include <fstream>
#include <sstream>

#include "stfusion/hashing.hpp"

namespace stf {

std::string hex64(uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
  return std::string(buf, 16);
}

std::string file_hash_hex(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path + "' for hashing");
  uint64_t h = 0xcbf29ce484222325ULL;
  char buf[1 << 16];
  while (in.read(buf, sizeof(buf)) || in.gcount() > 0) {
    h = fnv1a64(std::string_view(buf, static_cast<size_t>(in.gcount())), h);
  }
  return hex64(h);
}

namespace {

double parse_double(const std::string& key, const std::string& value) {
  size_t used = 0;
  double x = 0.0;
  try {
    x = std::stod(value, &used);
  } catch (const std::exception&) {
    throw ConfigError("config key '" + key + "' needs a number, got '" + value + "'");
  }
  if (used != value.size()) {
    throw ConfigError("config key '" + key + "' needs a number, got '" + value + "'");
  }
  return x;
}

int parse_int(const std::string& key, const std::string& value) {
  size_t used = 0;
  long long x = 0;
  try {
    x = std::stoll(value, &used);
  } catch (const std::exception&) {
    throw ConfigError("config key '" + key + "' needs an integer, got '" + value + "'");
  }
  if (used != value.size() || x != static_cast<long long>(static_cast<int>(x))) {
    throw ConfigError("config key '" + key + "' needs an integer, got '" + value + "'");
  }
  return static_cast<int>(x);
}

uint64_t parse_u64(const std::string& key, const std::string& value) {
  size_t used = 0;
  unsigned long long x = 0;
  try {
    x = std::stoull(value, &used);
  } catch (const std::exception&) {
    throw ConfigError("config key '" + key + "' needs an unsigned integer, got '" + value + "'");
  }
  if (used != value.size()) {
    throw ConfigError("config key '" + key + "' needs an unsigned integer, got '" + value + "'");
  }
  return static_cast<uint64_t>(x);
}

// Shortest decimal text that parses back to the same double.
std::string fmt_double(double x) {
  char buf[64];
  for (int prec = 1; prec <= 17; ++prec) {
    std::snprintf(buf, sizeof(buf), "%.*g", prec, x);
    if (std::stod(buf) == x) break;
  }
  return buf;
}

}  // namespace

void RunConfig::validate() const {
  model.validate();
  if (sigma_init < kSigmaMin || sigma_init > kSigmaMax) {
    throw ConfigError("sigma_init must lie in [" + fmt_double(kSigmaMin) + ", " +
                      fmt_double(kSigmaMax) + "]");
  }
  if (train.lr <= 0.0) throw ConfigError("lr must be positive");
  if (train.beta1 < 0.0 || train.beta1 >= 1.0 || train.beta2 < 0.0 || train.beta2 >= 1.0) {
    throw ConfigError("adam betas must lie in [0, 1)");
  }
  if (train.adam_eps <= 0.0) throw ConfigError("adam_eps must be positive");
  if (train.alpha < 0.0 || train.alpha > 1.0) {
    throw ConfigError("alpha must lie in [0, 1]");
  }
  if (steps < 0) throw ConfigError("steps must be non-negative");
  if (batch_size < 2) throw ConfigError("batch_size must be at least 2");
}

std::string RunConfig::dump() const {
  std::ostringstream os;
  os << "patch=" << model.patch << '\n'
     << "d=" << model.d << '\n'
     << "heads=" << model.heads << '\n'
     << "layers_vision=" << model.layers_vision << '\n'
     << "layers_scene=" << model.layers_scene << '\n'
     << "layers_text=" << model.layers_text << '\n'
     << "layers_fusion=" << model.layers_fusion << '\n'
     << "embed_dim=" << model.embed_dim << '\n'
     << "max_ocr=" << model.max_ocr << '\n'
     << "max_text=" << model.max_text << '\n'
     << "image_h=" << model.image_h << '\n'
     << "image_w=" << model.image_w << '\n'
     << "image_c=" << model.image_c << '\n'
     << "fusion_tokens=" << model.fusion_tokens << '\n'
     << "lr=" << fmt_double(train.lr) << '\n'
     << "beta1=" << fmt_double(train.beta1) << '\n'
     << "beta2=" << fmt_double(train.beta2) << '\n'
     << "adam_eps=" << fmt_double(train.adam_eps) << '\n'
     << "alpha=" << fmt_double(train.alpha) << '\n'
     << "sigma_init=" << fmt_double(sigma_init) << '\n'
     << "seed=" << seed << '\n'
     << "steps=" << steps << '\n'
     << "batch_size=" << batch_size << '\n'
     << "corpus=" << corpus << '\n'
     << "out_dir=" << out_dir << '\n'
     << "checkpoint=" << checkpoint << '\n'
     << "resume=" << resume << '\n'
     << "eval_mode=" << to_string(eval_mode) << '\n'
     << "strategy=" << to_string(strategy) << '\n';
  return os.str();
}

std::string RunConfig::hash() const { return hex64(fnv1a64(dump())); }

void RunConfig::set(const std::string& key, const std::string& value) {
  if (key == "patch") model.patch = parse_int(key, value);
  else if (key == "d") model.d = parse_int(key, value);
  else if (key == "heads") model.heads = parse_int(key, value);
  else if (key == "layers_vision") model.layers_vision = parse_int(key, value);
  else if (key == "layers_scene") model.layers_scene = parse_int(key, value);
  else if (key == "layers_text") model.layers_text = parse_int(key, value);
  else if (key == "layers_fusion") model.layers_fusion = parse_int(key, value);
  else if (key == "embed_dim") model.embed_dim = parse_int(key, value);
  else if (key == "max_ocr") model.max_ocr = parse_int(key, value);
  else if (key == "max_text") model.max_text = parse_int(key, value);
  else if (key == "image_h") model.image_h = parse_int(key, value);
  else if (key == "image_w") model.image_w = parse_int(key, value);
  else if (key == "image_c") model.image_c = parse_int(key, value);
  else if (key == "fusion_tokens") model.fusion_tokens = parse_int(key, value);
  else if (key == "lr") train.lr = parse_double(key, value);
  else if (key == "beta1") train.beta1 = parse_double(key, value);
  else if (key == "beta2") train.beta2 = parse_double(key, value);
  else if (key == "adam_eps") train.adam_eps = parse_double(key, value);
  else if (key == "alpha") train.alpha = parse_double(key, value);
  else if (key == "sigma_init") sigma_init = parse_double(key, value);
  else if (key == "seed") seed = parse_u64(key, value);
  else if (key == "steps") steps = parse_int(key, value);
  else if (key == "batch_size") batch_size = parse_int(key, value);
  else if (key == "corpus") corpus = value;
  else if (key == "out_dir") out_dir = value;
  else if (key == "checkpoint") checkpoint = value;
  else if (key == "resume") resume = value;
  else if (key == "eval_mode") eval_mode = eval_mode_from_string(value);
  else if (key == "strategy") strategy = fusion_strategy_from_string(value);
  else throw ConfigError("unknown config key '" + key + "'");
}

RunConfig RunConfig::from_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config file '" + path + "'");
  RunConfig cfg;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const size_t hash_pos = line.find('#');
    if (hash_pos != std::string::npos) line.resize(hash_pos);
    const auto begin = line.find_first_not_of(" \t\r");
    if (begin == std::string::npos) continue;
    const auto end = line.find_last_not_of(" \t\r");
    const std::string body = line.substr(begin, end - begin + 1);
    const size_t eq = body.find('=');
    if (eq == std::string::npos) {
      throw ConfigError(path + ":" + std::to_string(lineno) +
                        ": expected key=value, got '" + body + "'");
    }
    auto trim = [](std::string s) {
      const auto b = s.find_first_not_of(" \t");
      if (b == std::string::npos) return std::string();
      const auto e = s.find_last_not_of(" \t");
      return s.substr(b, e - b + 1);
    };
    const std::string key = trim(body.substr(0, eq));
    const std::string value = trim(body.substr(eq + 1));
    if (key.empty()) {
      throw ConfigError(path + ":" + std::to_string(lineno) + ": empty key");
    }
    try {
      cfg.set(key, value);
    } catch (const ConfigError& e) {
      throw ConfigError(path + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return cfg;
}

}  // namespace stf
