#include "stfusion/layers.hpp"

#include <cmath>

namespace stf {

Var layer_norm(Tape& tp, Var x, Var gain, Var bias, double eps) {
  const Tensor& xv = tp.value(x);
  const int n = xv.rows(), d = xv.cols();
  if (d < 2) {
    throw ContractError("layer_norm over width-1 rows is degenerate (shape " +
                        shape_str(xv.shape) + ")");
  }
  Var mu = tp.mean_rows(x);                                   // [n,1]
  Var xc = tp.sub(x, tp.matmul(mu, tp.ones(1, d)));           // centered
  Var var = tp.mean_rows(tp.mul(xc, xc));                     // [n,1]
  Var inv = tp.exp(tp.scale(tp.log(tp.add_scalar(var, eps)), -0.5));
  Var xh = tp.mul(xc, tp.matmul(inv, tp.ones(1, d)));
  Var g = tp.matmul(tp.ones(n, 1), gain);
  Var b = tp.matmul(tp.ones(n, 1), bias);
  return tp.add(tp.mul(xh, g), b);
}

Var mhsa(Tape& tp, Var x, const LayerVars& p) {
  const Tensor& xv = tp.value(x);
  const int d = xv.cols();
  const int h = static_cast<int>(p.heads.size());
  if (h == 0) throw ContractError("mhsa needs at least one head");
  if (d % h != 0) {
    throw ShapeError("mhsa width " + std::to_string(d) + " not divisible by " +
                     std::to_string(h) + " heads");
  }
  const int dh = d / h;
  const double att_scale = 1.0 / std::sqrt(static_cast<double>(dh));
  Var out{};
  for (const HeadVars& head : p.heads) {
    if (tp.value(head.wq).rows() != d || tp.value(head.wq).cols() != dh) {
      throw ShapeError("mhsa head projection is " + shape_str(tp.value(head.wq).shape) +
                       ", expected [" + std::to_string(d) + "," + std::to_string(dh) + "]");
    }
    Var q = tp.matmul(x, head.wq);
    Var k = tp.matmul(x, head.wk);
    Var v = tp.matmul(x, head.wv);
    Var scores = tp.scale(tp.matmul(q, tp.transpose(k)), att_scale);
    Var att = tp.softmax_rows(scores);
    Var ctx = tp.matmul(att, v);
    Var proj = tp.matmul(ctx, head.wo);
    out = out.valid() ? tp.add(out, proj) : proj;
  }
  return out;
}

Var mlp(Tape& tp, Var x, const LayerVars& p) {
  Var hidden = tp.gelu(linear(tp, x, p.w1, p.b1));
  return linear(tp, hidden, p.w2, p.b2);
}

Var transformer_layer(Tape& tp, Var x, const LayerVars& p) {
  Var y = tp.add(mhsa(tp, layer_norm(tp, x, p.ln1_g, p.ln1_b), p), x);
  return tp.add(mlp(tp, layer_norm(tp, y, p.ln2_g, p.ln2_b), p), y);
}

}  // namespace stf
