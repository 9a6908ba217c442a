#pragma once

// Offline retrieval evaluation: cosine similarity over unit-norm embeddings,
// recall@K with deterministic tie-breaking (ascending gallery index), median
// rank, and the evaluation driver for both retrieval directions.
//
// Every ranking metric exists twice: the production path (partial selection
// / counting) and a brute-force oracle (full stable sort and scan). The two
// must agree exactly; the acceptance suite pins that.

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "stfusion/aggregation.hpp"
#include "stfusion/data.hpp"
#include "stfusion/model.hpp"

namespace stf {

enum class EmbeddingKind : uint32_t { image = 0, fusion = 1, text = 2 };

struct EmbeddingSet {
  std::vector<std::string> ids;
  Tensor vectors;  // [n, embed_dim]
  EmbeddingKind kind = EmbeddingKind::image;

  void validate() const;  // ids/vector row agreement, rank 2
};

// Dot products of query rows against gallery rows ([nq, ng]). Inputs are
// unit-norm by construction upstream, so this is cosine similarity.
Tensor similarity_matrix(const EmbeddingSet& queries, const EmbeddingSet& gallery);

// Fraction of queries whose top-K (score descending, gallery index ascending
// on ties) intersects the query's relevant set. Every query needs at least
// one relevant index.
double recall_at_k(const Tensor& scores, const std::vector<std::vector<int>>& relevant,
                   int k);
double recall_at_k_oracle(const Tensor& scores,
                          const std::vector<std::vector<int>>& relevant, int k);

// Median over queries of the best relevant item's 1-based rank under the
// same ordering. Even query counts average the two central values.
double median_rank(const Tensor& scores, const std::vector<std::vector<int>>& relevant);
double median_rank_oracle(const Tensor& scores,
                          const std::vector<std::vector<int>>& relevant);

enum class EvalMode { scene_text_aware, scene_text_free };

std::string to_string(EvalMode m);
EvalMode eval_mode_from_string(const std::string& name);

struct DirectionReport {
  std::map<int, double> recall;  // K -> fraction
  double median = 0.0;
};

struct RetrievalReport {
  DirectionReport image_to_text;
  DirectionReport text_to_image;
  int n_images = 0;
  int n_captions = 0;
};

inline constexpr int kReportKs[] = {1, 5, 10};

// Embeds the whole corpus once (images as gallery, every caption as a text
// query) and scores both directions. In scene_text_aware mode an image with
// scene text contributes its fusion embedding, otherwise its vision
// embedding; scene_text_free always uses the vision embedding.
RetrievalReport evaluate(const ModelParams& params, const Vocab& vocab,
                         const std::vector<CorpusItem>& corpus, EvalMode mode,
                         FusionStrategy strategy = FusionStrategy::fusion_token,
                         ForwardCounters* counters = nullptr, bool use_oracle = false);

// Corpus embedding helpers shared by evaluate() and the embedding dump.
EmbeddingSet embed_images(const ModelParams& params, const Vocab& vocab,
                          const std::vector<CorpusItem>& corpus, EvalMode mode,
                          FusionStrategy strategy, ForwardCounters* counters = nullptr);
// One row per caption; caption_owner[i] is the corpus index it describes.
EmbeddingSet embed_captions(const ModelParams& params, const Vocab& vocab,
                            const std::vector<CorpusItem>& corpus,
                            std::vector<int>* caption_owner,
                            ForwardCounters* counters = nullptr);

/// Flat binary persistence: header (row count, width, kind), then row-major
// 64-bit values; ids go to "<path>.ids", one per line.
void write_embedding_set(const std::string& path, const EmbeddingSet& set);
EmbeddingSet read_embedding_set(const std::string& path);

// One JSON object per line (a provenance line, then one line per direction),
// and a fixed-width human table.
void write_report_lines(const std::string& path, const RetrievalReport& rep,
                        const std::string& config_hash, const std::string& corpus_hash);
std::string report_table(const RetrievalReport& rep);

}  // namespace stf
