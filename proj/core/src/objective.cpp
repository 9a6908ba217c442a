#include "stfusion/objective.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace stf {

Var contrastive_pair_loss(Tape& tp, Var x, Var t, Var log_sigma) {
  const Tensor& xv = tp.value(x);
  const Tensor& tv = tp.value(t);
  if (xv.rank() != 2 || tv.rank() != 2 || xv.shape != tv.shape) {
    throw ShapeError("contrastive_pair_loss needs matching [K,D] inputs, got " +
                     shape_str(xv.shape) + " vs " + shape_str(tv.shape));
  }
  if (tp.value(log_sigma).size() != 1) {
    throw ShapeError("log_sigma must be a single scalar");
  }
  const int k = xv.rows();
  Var inv_sigma = tp.exp(tp.scale(log_sigma, -1.0));  // [1,1]
  Var sims = tp.matmul(x, tp.transpose(t));           // [K,K]
  Var scaled = tp.mul(sims, tp.matmul(tp.matmul(tp.ones(k, 1), inv_sigma), tp.ones(1, k)));
  Var eye = tp.constant(Tensor::identity(k));
  Var l_x2t = tp.scale(tp.sum_all(tp.mul(tp.log(tp.softmax_rows(scaled)), eye)), -1.0 / k);
  Var l_t2x = tp.scale(
      tp.sum_all(tp.mul(tp.log(tp.softmax_rows(tp.transpose(scaled))), eye)), -1.0 / k);
  return tp.scale(tp.add(l_x2t, l_t2x), 0.5);
}

TotalLossVars total_loss(Tape& tp, const BatchVars& batch, double alpha, Var log_sigma) {
  if (!(alpha >= 0.0 && alpha <= 1.0)) {
    throw ContractError("alpha must lie in [0,1]");
  }
  const int n = tp.value(batch.v).rows();
  const int m = static_cast<int>(batch.fusion_index.size());
  for (int i = 0; i < m; ++i) {
    const int row = batch.fusion_index[static_cast<size_t>(i)];
    if (row < 0 || row >= n || (i > 0 && row <= batch.fusion_index[static_cast<size_t>(i - 1)])) {
      throw ContractError("fusion_index must be strictly increasing rows of the batch");
    }
  }
  if ((m > 0) != batch.f.has_value()) {
    throw ContractError("fusion embeddings and fusion_index must agree");
  }
  if (batch.f && tp.value(*batch.f).rows() != m) {
    throw ContractError("fusion embedding count " +
                        std::to_string(tp.value(*batch.f).rows()) +
                        " does not match fusion_index size " + std::to_string(m));
  }

  TotalLossVars out;
  out.itc = contrastive_pair_loss(tp, batch.v, batch.t, log_sigma);
  if (batch.f && m >= 2) {
    Var t_sub = tp.gather_rows(batch.t, batch.fusion_index);
    out.ftc = contrastive_pair_loss(tp, *batch.f, t_sub, log_sigma);
    out.total = tp.add(tp.scale(out.itc, alpha), tp.scale(*out.ftc, 1.0 - alpha));
  } else {
    // Fewer than two scene-text items: the fusion term is dropped entirely
    // and the total IS the itc node.
    out.total = out.itc;
  }
  return out;
}

AdamState AdamState::init(const ModelParams& p) {
  AdamState st;
  p.for_each([&](const std::string&, const Tensor& t) {
    st.m.emplace_back(t.values.size(), 0.0);
    st.v.emplace_back(t.values.size(), 0.0);
  });
  return st;
}

bool AdamState::matches(const ModelParams& p) const {
  size_t i = 0;
  bool ok = true;
  p.for_each([&](const std::string&, const Tensor& t) {
    if (i >= m.size() || m[i].size() != t.values.size() || v[i].size() != t.values.size()) {
      ok = false;
    }
    ++i;
  });
  return ok && i == m.size() && i == v.size();
}

void adam_update(ModelParams& p, AdamState& st, const TrainConfig& cfg) {
  if (!st.matches(p)) throw ContractError("optimizer state does not match the parameters");
  st.step += 1;
  const double b1 = cfg.beta1, b2 = cfg.beta2;
  const double bc1 = 1.0 - std::pow(b1, static_cast<double>(st.step));
  const double bc2 = 1.0 - std::pow(b2, static_cast<double>(st.step));
  size_t idx = 0;
  p.for_each([&](const std::string& name, Tensor& t) {
    if (t.grad.size() != t.values.size()) {
      throw ContractError("parameter '" + name + "' has no gradient for the update");
    }
    std::vector<double>& m = st.m[idx];
    std::vector<double>& v = st.v[idx];
    for (size_t i = 0; i < t.values.size(); ++i) {
      const double g = t.grad[i];
      m[i] = b1 * m[i] + (1.0 - b1) * g;
      v[i] = b2 * v[i] + (1.0 - b2) * g * g;
      const double mhat = m[i] / bc1;
      const double vhat = v[i] / bc2;
      t.values[i] -= cfg.lr * mhat / (std::sqrt(vhat) + cfg.adam_eps);
    }
    ++idx;
  });
}

double batch_loss(ModelParams& p, const Vocab& vocab, const std::vector<CorpusItem>& corpus,
                  const Batch& batch, const TrainConfig& cfg, FusionStrategy strategy,
                  bool with_grad, LossParts* parts) {
  if (batch.items.size() != batch.captions.size()) {
    throw ContractError("batch items and caption choices disagree in length");
  }
  Tape tp;
  ModelVars mv = lift(tp, p, with_grad);
  std::vector<Var> vs, ts, fs;
  std::vector<int> fusion_index;
  for (size_t i = 0; i < batch.items.size(); ++i) {
    const int idx = batch.items[i];
    if (idx < 0 || idx >= static_cast<int>(corpus.size())) {
      throw ContractError("batch refers to item " + std::to_string(idx) +
                          " outside the corpus");
    }
    const CorpusItem& item = corpus[static_cast<size_t>(idx)];
    std::span<const OcrToken> ocr = item.ocr;
    if (strategy == FusionStrategy::vision_only) ocr = {};
    TowerOutVars tower = strategy == FusionStrategy::late_fusion && !ocr.empty()
                             ? late_fusion_vars(tp, mv, p.config, vocab, item.image, ocr)
                             : visual_tower_vars(tp, mv, p.config, vocab, item.image, ocr);
    vs.push_back(tower.v);
    if (tower.f) {
      fs.push_back(*tower.f);
      fusion_index.push_back(static_cast<int>(i));
    }
    const int cap = batch.captions[i];
    if (cap < 0 || cap >= static_cast<int>(item.captions.size())) {
      throw ContractError("caption choice out of range for item '" + item.image.id + "'");
    }
    ts.push_back(text_encode(tp, mv, p.config, vocab, item.captions[static_cast<size_t>(cap)]));
  }
  auto stack = [&tp](const std::vector<Var>& rows) {
    Var out = rows.front();
    for (size_t i = 1; i < rows.size(); ++i) out = tp.concat_rows(out, rows[i]);
    return out;
  };
  BatchVars bv;
  bv.v = stack(vs);
  bv.t = stack(ts);
  if (!fs.empty()) bv.f = stack(fs);
  bv.fusion_index = std::move(fusion_index);
  TotalLossVars tl = total_loss(tp, bv, cfg.alpha, mv.log_sigma);
  const double loss = tp.scalar(tl.total);
  if (parts) {
    parts->total = loss;
    parts->itc = tp.scalar(tl.itc);
    if (tl.ftc) parts->ftc = tp.scalar(*tl.ftc);
    parts->sigma = p.sigma();
  }
  if (with_grad) {
    tp.backward(tl.total);
    export_grads(tp, mv, p);
  }
  return loss;
}

LossParts train_step(ModelParams& p, const Vocab& vocab,
                     const std::vector<CorpusItem>& corpus, const Batch& batch,
                     const TrainConfig& cfg, AdamState& opt, FusionStrategy strategy) {
  if (batch.items.size() < 2) {
    throw ContractError("train_step needs a batch of at least two items");
  }
  auto batch_ids = [&] {
    std::ostringstream os;
    for (size_t i = 0; i < batch.items.size(); ++i) {
      if (i) os << ", ";
      const int idx = batch.items[i];
      os << (idx >= 0 && idx < static_cast<int>(corpus.size())
                 ? corpus[static_cast<size_t>(idx)].image.id
                 : "#" + std::to_string(idx));
    }
    return os.str();
  };
  LossParts parts;
  try {
    batch_loss(p, vocab, corpus, batch, cfg, strategy, true, &parts);
  } catch (const NumericError& e) {
    throw NumericError(std::string(e.what()) + " (batch items: " + batch_ids() + ")");
  }
  adam_update(p, opt, cfg);
  p.log_sigma.values[0] = std::clamp(p.log_sigma.values[0], std::log(kSigmaMin),
                                     std::log(kSigmaMax));
  parts.sigma = p.sigma();
  return parts;
}

}  // namespace stf
