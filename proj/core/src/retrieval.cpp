#include "stfusion/retrieval.hpp"

#include <algorithm>
#include <fstream>
#include <numeric>
#include <sstream>

#include <json.hpp>

namespace stf {

void EmbeddingSet::validate() const {
  if (vectors.rank() != 2) {
    throw ShapeError("embedding set needs rank-2 vectors, shape is " +
                     shape_str(vectors.shape));
  }
  if (static_cast<int>(ids.size()) != vectors.rows()) {
    throw ContractError("embedding set has " + std::to_string(ids.size()) + " ids but " +
                        std::to_string(vectors.rows()) + " vectors");
  }
}

Tensor similarity_matrix(const EmbeddingSet& queries, const EmbeddingSet& gallery) {
  queries.validate();
  gallery.validate();
  if (queries.vectors.cols() != gallery.vectors.cols()) {
    throw ShapeError("embedding widths disagree: " + shape_str(queries.vectors.shape) +
                     " vs " + shape_str(gallery.vectors.shape));
  }
  const int nq = queries.vectors.rows(), ng = gallery.vectors.rows();
  const int d = queries.vectors.cols();
  Tensor s({nq, ng});
  for (int i = 0; i < nq; ++i) {
    const double* q = &queries.vectors.values[static_cast<size_t>(i) * d];
    for (int j = 0; j < ng; ++j) {
      const double* g = &gallery.vectors.values[static_cast<size_t>(j) * d];
      double acc = 0.0;
      for (int k = 0; k < d; ++k) acc += q[k] * g[k];
      s.at(i, j) = acc;
    }
  }
  return s;
}

namespace {

void check_ranking_args(const Tensor& scores, const std::vector<std::vector<int>>& relevant) {
  if (scores.rank() != 2) {
    throw ShapeError("score matrix must be rank 2, shape is " + shape_str(scores.shape));
  }
  if (static_cast<int>(relevant.size()) != scores.rows()) {
    throw ContractError("relevance list length " + std::to_string(relevant.size()) +
                        " does not match " + std::to_string(scores.rows()) + " queries");
  }
  for (size_t q = 0; q < relevant.size(); ++q) {
    if (relevant[q].empty()) {
      throw ContractError("query " + std::to_string(q) + " has no relevant items");
    }
    for (int g : relevant[q]) {
      if (g < 0 || g >= scores.cols()) {
        throw ContractError("query " + std::to_string(q) + " lists relevant item " +
                            std::to_string(g) + " outside the gallery");
      }
    }
  }
}

// score descending, index ascending on exact ties
struct RankOrder {
  const double* row;
  bool operator()(int a, int b) const {
    if (row[a] != row[b]) return row[a] > row[b];
    return a < b;
  }
};

}  // namespace

double recall_at_k(const Tensor& scores, const std::vector<std::vector<int>>& relevant,
                   int k) {
  check_ranking_args(scores, relevant);
  if (k < 1) throw ContractError("recall needs k >= 1");
  const int nq = scores.rows(), ng = scores.cols();
  const int kk = std::min(k, ng);
  int hits = 0;
  std::vector<int> idx(static_cast<size_t>(ng));
  for (int q = 0; q < nq; ++q) {
    std::iota(idx.begin(), idx.end(), 0);
    const double* row = &scores.values[static_cast<size_t>(q) * ng];
    std::partial_sort(idx.begin(), idx.begin() + kk, idx.end(), RankOrder{row});
    bool hit = false;
    for (int t = 0; t < kk && !hit; ++t) {
      hit = std::find(relevant[static_cast<size_t>(q)].begin(),
                      relevant[static_cast<size_t>(q)].end(),
                      idx[static_cast<size_t>(t)]) != relevant[static_cast<size_t>(q)].end();
    }
    hits += hit ? 1 : 0;
  }
  return static_cast<double>(hits) / nq;
}

double recall_at_k_oracle(const Tensor& scores,
                          const std::vector<std::vector<int>>& relevant, int k) {
  check_ranking_args(scores, relevant);
  if (k < 1) throw ContractError("recall needs k >= 1");
  const int nq = scores.rows(), ng = scores.cols();
  const int kk = std::min(k, ng);
  int hits = 0;
  for (int q = 0; q < nq; ++q) {
    const double* row = &scores.values[static_cast<size_t>(q) * ng];
    std::vector<int> order(static_cast<size_t>(ng));
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](int a, int b) { return row[a] > row[b]; });
    bool hit = false;
    for (int t = 0; t < kk; ++t) {
      for (int g : relevant[static_cast<size_t>(q)]) {
        if (order[static_cast<size_t>(t)] == g) hit = true;
      }
    }
    hits += hit ? 1 : 0;
  }
  return static_cast<double>(hits) / nq;
}

double median_rank(const Tensor& scores, const std::vector<std::vector<int>>& relevant) {
  check_ranking_args(scores, relevant);
  const int nq = scores.rows(), ng = scores.cols();
  std::vector<double> ranks;
  ranks.reserve(static_cast<size_t>(nq));
  for (int q = 0; q < nq; ++q) {
    const double* row = &scores.values[static_cast<size_t>(q) * ng];
    int best = ng;  // 0-based position of the best-ranked relevant item
    for (int g : relevant[static_cast<size_t>(q)]) {
      int before = 0;
      for (int j = 0; j < ng; ++j) {
        if (row[j] > row[g] || (row[j] == row[g] && j < g)) ++before;
      }
      best = std::min(best, before);
    }
    ranks.push_back(static_cast<double>(best + 1));
  }
  std::sort(ranks.begin(), ranks.end());
  const size_t n = ranks.size();
  return n % 2 == 1 ? ranks[n / 2] : 0.5 * (ranks[n / 2 - 1] + ranks[n / 2]);
}

double median_rank_oracle(const Tensor& scores,
                          const std::vector<std::vector<int>>& relevant) {
  check_ranking_args(scores, relevant);
  const int nq = scores.rows(), ng = scores.cols();
  std::vector<double> ranks;
  for (int q = 0; q < nq; ++q) {
    const double* row = &scores.values[static_cast<size_t>(q) * ng];
    std::vector<int> order(static_cast<size_t>(ng));
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](int a, int b) { return row[a] > row[b]; });
    int rank = ng;
    for (int pos = ng - 1; pos >= 0; --pos) {
      for (int g : relevant[static_cast<size_t>(q)]) {
        if (order[static_cast<size_t>(pos)] == g) rank = pos + 1;
      }
    }
    ranks.push_back(static_cast<double>(rank));
  }
  std::sort(ranks.begin(), ranks.end());
  const size_t n = ranks.size();
  return n % 2 == 1 ? ranks[n / 2] : 0.5 * (ranks[n / 2 - 1] + ranks[n / 2]);
}

std::string to_string(EvalMode m) {
  return m == EvalMode::scene_text_aware ? "scene_text_aware" : "scene_text_free";
}

EvalMode eval_mode_from_string(const std::string& name) {
  if (name == "scene_text_aware") return EvalMode::scene_text_aware;
  if (name == "scene_text_free") return EvalMode::scene_text_free;
  throw ConfigError("unknown eval mode '" + name +
                    "' (valid: scene_text_aware, scene_text_free)");
}

EmbeddingSet embed_images(const ModelParams& params, const Vocab& vocab,
                          const std::vector<CorpusItem>& corpus, EvalMode mode,
                          FusionStrategy strategy, ForwardCounters* counters) {
  if (corpus.empty()) throw ContractError("cannot embed an empty corpus");
  const bool use_scene = mode == EvalMode::scene_text_aware &&
                         strategy != FusionStrategy::vision_only;
  EmbeddingSet set;
  set.kind = use_scene ? EmbeddingKind::fusion : EmbeddingKind::image;
  set.vectors = Tensor({static_cast<int>(corpus.size()), params.config.embed_dim});
  for (size_t i = 0; i < corpus.size(); ++i) {
    const CorpusItem& item = corpus[i];
    std::span<const OcrToken> ocr = use_scene ? std::span<const OcrToken>(item.ocr)
                                              : std::span<const OcrToken>();
    TowerOutput out = visual_tower_forward(params, vocab, item.image, ocr, strategy, counters);
    const Tensor& vec = out.f ? *out.f : out.v;
    std::copy(vec.values.begin(), vec.values.end(),
              set.vectors.values.begin() +
                  static_cast<int64_t>(i) * params.config.embed_dim);
    set.ids.push_back(item.image.id);
  }
  return set;
}

EmbeddingSet embed_captions(const ModelParams& params, const Vocab& vocab,
                            const std::vector<CorpusItem>& corpus,
                            std::vector<int>* caption_owner, ForwardCounters* counters) {
  if (corpus.empty()) throw ContractError("cannot embed an empty corpus");
  EmbeddingSet set;
  set.kind = EmbeddingKind::text;
  std::vector<double> rows;
  for (size_t i = 0; i < corpus.size(); ++i) {
    const CorpusItem& item = corpus[i];
    for (size_t c = 0; c < item.captions.size(); ++c) {
      Tensor t = text_forward(params, vocab, item.captions[c], counters);
      rows.insert(rows.end(), t.values.begin(), t.values.end());
      set.ids.push_back(item.image.id + "#" + std::to_string(c));
      if (caption_owner) caption_owner->push_back(static_cast<int>(i));
    }
  }
  set.vectors = Tensor({static_cast<int>(set.ids.size()), params.config.embed_dim},
                       std::move(rows));
  return set;
}

RetrievalReport evaluate(const ModelParams& params, const Vocab& vocab,
                         const std::vector<CorpusItem>& corpus, EvalMode mode,
                         FusionStrategy strategy, ForwardCounters* counters,
                         bool use_oracle) {
  EmbeddingSet images = embed_images(params, vocab, corpus, mode, strategy, counters);
  std::vector<int> owner;
  EmbeddingSet captions = embed_captions(params, vocab, corpus, &owner, counters);

  // image -> text: all captions of the image are relevant.
  std::vector<std::vector<int>> rel_i2t(corpus.size());
  for (size_t c = 0; c < owner.size(); ++c) {
    rel_i2t[static_cast<size_t>(owner[c])].push_back(static_cast<int>(c));
  }
  // text -> image: exactly the owning image.
  std::vector<std::vector<int>> rel_t2i(owner.size());
  for (size_t c = 0; c < owner.size(); ++c) rel_t2i[c] = {owner[c]};

  const Tensor s_i2t = similarity_matrix(images, captions);
  const Tensor s_t2i = similarity_matrix(captions, images);

  auto direction = [&](const Tensor& s, const std::vector<std::vector<int>>& rel) {
    DirectionReport d;
    for (int k : kReportKs) {
      d.recall[k] = use_oracle ? recall_at_k_oracle(s, rel, k) : recall_at_k(s, rel, k);
    }
    d.median = use_oracle ? median_rank_oracle(s, rel) : median_rank(s, rel);
    return d;
  };
  RetrievalReport rep;
  rep.image_to_text = direction(s_i2t, rel_i2t);
  rep.text_to_image = direction(s_t2i, rel_t2i);
  rep.n_images = static_cast<int>(corpus.size());
  rep.n_captions = static_cast<int>(owner.size());
  return rep;
}

void write_embedding_set(const std::string& path, const EmbeddingSet& set) {
  set.validate();
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open '" + path + "' for writing");
  const uint64_t n = static_cast<uint64_t>(set.vectors.rows());
  const uint64_t d = static_cast<uint64_t>(set.vectors.cols());
  const uint32_t kind = static_cast<uint32_t>(set.kind);
  out.write(reinterpret_cast<const char*>(&n), sizeof(n));
  out.write(reinterpret_cast<const char*>(&d), sizeof(d));
  out.write(reinterpret_cast<const char*>(&kind), sizeof(kind));
  out.write(reinterpret_cast<const char*>(set.vectors.values.data()),
            static_cast<std::streamsize>(set.vectors.values.size() * sizeof(double)));
  if (!out) throw IoError("write to '" + path + "' failed");
  std::ofstream ids(path + ".ids", std::ios::binary | std::ios::trunc);
  if (!ids) throw IoError("cannot open '" + path + ".ids' for writing");
  for (const std::string& id : set.ids) ids << id << '\n';
  if (!ids) throw IoError("write to '" + path + ".ids' failed");
}

EmbeddingSet read_embedding_set(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open embedding set '" + path + "'");
  uint64_t n = 0, d = 0;
  uint32_t kind = 0;
  in.read(reinterpret_cast<char*>(&n), sizeof(n));
  in.read(reinterpret_cast<char*>(&d), sizeof(d));
  in.read(reinterpret_cast<char*>(&kind), sizeof(kind));
  if (!in || n == 0 || d == 0 || kind > 2) {
    throw IoError("'" + path + "' is not a valid embedding set");
  }
  EmbeddingSet set;
  set.kind = static_cast<EmbeddingKind>(kind);
  std::vector<double> values(n * d);
  in.read(reinterpret_cast<char*>(values.data()),
          static_cast<std::streamsize>(values.size() * sizeof(double)));
  if (!in) throw IoError("'" + path + "' truncated");
  set.vectors = Tensor({static_cast<int>(n), static_cast<int>(d)}, std::move(values));
  std::ifstream ids(path + ".ids", std::ios::binary);
  if (!ids) throw IoError("cannot open id sidecar '" + path + ".ids'");
  std::string id;
  while (std::getline(ids, id)) set.ids.push_back(id);
  set.validate();
  return set;
}

void write_report_lines(const std::string& path, const RetrievalReport& rep,
                        const std::string& config_hash, const std::string& corpus_hash) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open '" + path + "' for writing");
  nlohmann::json head = {{"record", "provenance"},
                         {"config_hash", config_hash},
                         {"corpus_hash", corpus_hash},
                         {"n_images", rep.n_images},
                         {"n_captions", rep.n_captions}};
  out << head.dump() << '\n';
  auto line = [&](const char* name, const DirectionReport& d) {
    nlohmann::json j = {{"record", "direction"}, {"direction", name}, {"median_rank", d.median}};
    nlohmann::json r;
    for (auto [k, v] : d.recall) r[std::to_string(k)] = v;
    j["recall"] = std::move(r);
    out << j.dump() << '\n';
  };
  line("image_to_text", rep.image_to_text);
  line("text_to_image", rep.text_to_image);
  if (!out) throw IoError("write to '" + path + "' failed");
}

std::string report_table(const RetrievalReport& rep) {
  std::ostringstream os;
  os << "direction        R@1      R@5      R@10     med-rank\n";
  auto row = [&](const char* name, const DirectionReport& d) {
    os << name;
    for (size_t i = std::string(name).size(); i < 17; ++i) os << ' ';
    os.setf(std::ios::fixed);
    os.precision(4);
    for (int k : kReportKs) os << d.recall.at(k) << "   ";
    os.precision(1);
    os << d.median << "\n";
  };
  row("image_to_text", rep.image_to_text);
  row("text_to_image", rep.text_to_image);
  return os.str();
}

}  // namespace stf
