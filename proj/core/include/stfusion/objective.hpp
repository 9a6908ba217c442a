#pragma once

// Symmetric InfoNCE objectives and the training step.
//
// For K aligned pairs with unit-norm rows X and T and temperature
// sigma = exp(log_sigma), the pair loss is
//
//   L = 1/2 (Lx2t + Lt2x),  Lx2t = -(1/K) sum_i log softmax_row_i(X T' / sigma)[i]
//
// The total objective is the pair loss over all image embeddings, plus an
// alpha-weighted second term over the fusion embeddings of the scene-text
// subset when that subset has at least two members:
//
//   total = alpha * itc + (1 - alpha) * ftc    (subset size >= 2)
//   total = itc                                (otherwise, same node, bit-equal)

#include <optional>
#include <vector>

#include "stfusion/aggregation.hpp"
#include "stfusion/data.hpp"
#include "stfusion/model.hpp"
#include "stfusion/tensor.hpp"

namespace stf {

inline constexpr double kSigmaMin = 0.01;
inline constexpr double kSigmaMax = 1.0;

Var contrastive_pair_loss(Tape& tp, Var x, Var t, Var log_sigma);

struct BatchVars {
  Var v;                          // [N, embed_dim]
  Var t;                          // [N, embed_dim]
  std::optional<Var> f;           // [M, embed_dim]
  std::vector<int> fusion_index;  // strictly increasing rows of v/t with scene text
};

struct TotalLossVars {
  Var total;
  Var itc;
  std::optional<Var> ftc;
};

TotalLossVars total_loss(Tape& tp, const BatchVars& batch, double alpha, Var log_sigma);

struct TrainConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  double alpha = 0.9;
};

// First/second moment vectors aligned with ModelParams::for_each order.
struct AdamState {
  std::vector<std::vector<double>> m, v;
  int64_t step = 0;

  static AdamState init(const ModelParams& p);
  bool matches(const ModelParams& p) const;
};

void adam_update(ModelParams& p, AdamState& st, const TrainConfig& cfg);

struct LossParts {
  double total = 0.0;
  double itc = 0.0;
  std::optional<double> ftc;
  double sigma = 0.0;  // after the post-step clamp
};

// One optimizer step over a batch: forward all towers, dual loss, backward,
// Adam update, then clamp sigma into [kSigmaMin, kSigmaMax]. A non-finite
// loss aborts with the batch's item ids in the message and leaves the
// parameters untouched.
LossParts train_step(ModelParams& p, const Vocab& vocab,
                     const std::vector<CorpusItem>& corpus, const Batch& batch,
                     const TrainConfig& cfg, AdamState& opt,
                     FusionStrategy strategy = FusionStrategy::fusion_token);

// Forward-only loss of a batch; with_grad additionally leaves gradients in
// the parameter tensors. Shared by train_step's verification tests.
double batch_loss(ModelParams& p, const Vocab& vocab, const std::vector<CorpusItem>& corpus,
                  const Batch& batch, const TrainConfig& cfg, FusionStrategy strategy,
                  bool with_grad, LossParts* parts = nullptr);

}  // namespace stf
