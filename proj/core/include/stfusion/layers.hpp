#pragma once

// Pre-norm transformer building blocks. One layer computes
//
//   Y   = MHSA(LayerNorm(X)) + X
//   out = MLP(LayerNorm(Y)) + Y
//
// with unmasked bidirectional attention, per-head scale 1/sqrt(d/h), an MLP
// of two linear maps (d -> 4d -> d) around a GELU, and no dropout anywhere.

#include <vector>

#include "stfusion/tensor.hpp"

namespace stf {

// Per-layer parameter handles on a tape. Attention projections carry no
// biases; the MLP does. Gain/bias vectors are [1,d] rows.
struct HeadVars {
  Var wq, wk, wv;  // [d, d/h]
  Var wo;          // [d/h, d]
};

struct LayerVars {
  std::vector<HeadVars> heads;
  Var w1, b1;  // [d, 4d], [1, 4d]
  Var w2, b2;  // [4d, d], [1, d]
  Var ln1_g, ln1_b;
  Var ln2_g, ln2_b;
};

inline constexpr double kLayerNormEps = 1e-5;

// Row-wise standardization followed by the affine map. Width 1 is rejected:
// a single-element row always normalizes to zero, which silently destroys
// the signal, so it is treated as a caller bug.
Var layer_norm(Tape& tp, Var x, Var gain, Var bias, double eps = kLayerNormEps);

// Multi-head self-attention. Heads run on their own projections and the
// concatenated result is folded into the output projection by summing
// per-head ctx * wo_h terms.
Var mhsa(Tape& tp, Var x, const LayerVars& p);

Var mlp(Tape& tp, Var x, const LayerVars& p);

Var transformer_layer(Tape& tp, Var x, const LayerVars& p);

}  // namespace stf
