// Transformer building blocks pinned against scalar reference computations
// written out longhand with std::exp / std::tanh loops.

#include <doctest.h>

#include <cmath>
#include <numeric>
#include <vector>

#include "stfusion/layers.hpp"
#include "stfusion/rng.hpp"

using namespace stf;

namespace {

Tensor random_matrix(int r, int c, Rng& rng, double scale = 0.5) {
  Tensor t({r, c});
  for (double& v : t.values) v = rng.normal() * scale;
  return t;
}

struct LayerFixture {
  int d, h, dh;
  std::vector<Tensor> wq, wk, wv, wo;
  Tensor w1, b1, w2, b2, ln1_g, ln1_b, ln2_g, ln2_b;

  LayerFixture(int d_, int h_, Rng& rng) : d(d_), h(h_), dh(d_ / h_) {
    for (int i = 0; i < h; ++i) {
      wq.push_back(random_matrix(d, dh, rng));
      wk.push_back(random_matrix(d, dh, rng));
      wv.push_back(random_matrix(d, dh, rng));
      wo.push_back(random_matrix(dh, d, rng));
    }
    w1 = random_matrix(d, 4 * d, rng);
    b1 = random_matrix(1, 4 * d, rng);
    w2 = random_matrix(4 * d, d, rng);
    b2 = random_matrix(1, d, rng);
    ln1_g = random_matrix(1, d, rng, 0.2);
    for (double& v : ln1_g.values) v += 1.0;
    ln1_b = random_matrix(1, d, rng, 0.2);
    ln2_g = random_matrix(1, d, rng, 0.2);
    for (double& v : ln2_g.values) v += 1.0;
    ln2_b = random_matrix(1, d, rng, 0.2);
  }

  LayerVars lift(Tape& tp, bool rg = false) const {
    LayerVars lv;
    for (int i = 0; i < h; ++i) {
      lv.heads.push_back({tp.input(wq[i], rg), tp.input(wk[i], rg), tp.input(wv[i], rg),
                          tp.input(wo[i], rg)});
    }
    lv.w1 = tp.input(w1, rg);
    lv.b1 = tp.input(b1, rg);
    lv.w2 = tp.input(w2, rg);
    lv.b2 = tp.input(b2, rg);
    lv.ln1_g = tp.input(ln1_g, rg);
    lv.ln1_b = tp.input(ln1_b, rg);
    lv.ln2_g = tp.input(ln2_g, rg);
    lv.ln2_b = tp.input(ln2_b, rg);
    return lv;
  }

  void zero_everything() {
    auto clear = [](Tensor& t) { std::fill(t.values.begin(), t.values.end(), 0.0); };
    for (int i = 0; i < h; ++i) {
      clear(wq[i]);
      clear(wk[i]);
      clear(wv[i]);
      clear(wo[i]);
    }
    clear(w1);
    clear(b1);
    clear(w2);
    clear(b2);
    clear(ln1_g);
    clear(ln1_b);
    clear(ln2_g);
    clear(ln2_b);
  }
};

double gelu_reference(double x) {
  constexpr double k0 = 0.7978845608028654;
  constexpr double k1 = 0.044715;
  return 0.5 * x * (1.0 + std::tanh(k0 * (x + k1 * x * x * x)));
}

// Scalar-loop layer norm: per-row mean/variance, then the affine map.
Tensor layer_norm_reference(const Tensor& x, const Tensor& g, const Tensor& b, double eps) {
  Tensor out({x.rows(), x.cols()});
  for (int i = 0; i < x.rows(); ++i) {
    double mean = 0.0;
    for (int j = 0; j < x.cols(); ++j) mean += x.at(i, j);
    mean /= x.cols();
    double var = 0.0;
    for (int j = 0; j < x.cols(); ++j) {
      var += (x.at(i, j) - mean) * (x.at(i, j) - mean);
    }
    var /= x.cols();
    for (int j = 0; j < x.cols(); ++j) {
      out.at(i, j) = (x.at(i, j) - mean) / std::sqrt(var + eps) * g.at(0, j) + b.at(0, j);
    }
  }
  return out;
}

// Scalar-loop single-head attention with output projection.
Tensor mhsa_single_head_reference(const Tensor& x, const LayerFixture& f) {
  const int n = x.rows();
  auto mm = [](const Tensor& a, const Tensor& b) {
    Tensor o({a.rows(), b.cols()});
    for (int i = 0; i < a.rows(); ++i)
      for (int k = 0; k < a.cols(); ++k)
        for (int j = 0; j < b.cols(); ++j) o.at(i, j) += a.at(i, k) * b.at(k, j);
    return o;
  };
  Tensor q = mm(x, f.wq[0]), k = mm(x, f.wk[0]), v = mm(x, f.wv[0]);
  Tensor attn({n, n});
  const double scale = 1.0 / std::sqrt(static_cast<double>(f.dh));
  for (int i = 0; i < n; ++i) {
    double denom = 0.0;
    std::vector<double> row(n);
    for (int j = 0; j < n; ++j) {
      double dot = 0.0;
      for (int t = 0; t < f.dh; ++t) dot += q.at(i, t) * k.at(j, t);
      row[j] = std::exp(dot * scale);
      denom += row[j];
    }
    for (int j = 0; j < n; ++j) attn.at(i, j) = row[j] / denom;
  }
  return mm(mm(attn, v), f.wo[0]);
}

}  // namespace

TEST_CASE("gelu matches the tanh formula") {
  Tape tp;
  std::vector<double> xs = {-3.0, -1.0, -0.1, 0.0, 0.5, 2.0, 4.0};
  Var v = tp.constant(Tensor::matrix(1, static_cast<int>(xs.size()), xs));
  const Tensor got = tp.value(tp.gelu(v));
  for (size_t i = 0; i < xs.size(); ++i) {
    CHECK(std::abs(got.values[i] - gelu_reference(xs[i])) < 1e-12);
  }
}

TEST_CASE("layer_norm matches the scalar reference") {
  Rng rng(31);
  Tensor x = random_matrix(4, 6, rng, 3.0);
  Tensor g = random_matrix(1, 6, rng), b = random_matrix(1, 6, rng);
  Tape tp;
  const Tensor& got =
      tp.value(layer_norm(tp, tp.constant(x), tp.constant(g), tp.constant(b)));
  Tensor want = layer_norm_reference(x, g, b, kLayerNormEps);
  for (int64_t i = 0; i < want.size(); ++i) {
    CHECK(std::abs(got.values[i] - want.values[i]) < 1e-12);
  }
}

TEST_CASE("layer_norm of a constant row is exactly the bias") {
  Tape tp;
  Var x = tp.constant(Tensor::full({2, 5}, 7.25));
  Var g = tp.constant(Tensor::full({1, 5}, 1.3));
  Var b = tp.constant(Tensor::matrix(1, 5, {1, 2, 3, 4, 5}));
  const Tensor got = tp.value(layer_norm(tp, x, g, b));
  for (int i = 0; i < 2; ++i) {
    for (int j = 0; j < 5; ++j) CHECK(got.at(i, j) == doctest::Approx(j + 1.0).epsilon(1e-12));
  }
}

TEST_CASE("layer_norm standardizes high-variance rows to zero mean unit variance") {
  Rng rng(37);
  Tensor x = random_matrix(3, 16, rng, 1000.0);  // variance ~1e6, eps negligible
  Tape tp;
  Var g = tp.constant(Tensor::full({1, 16}, 1.0));
  Var b = tp.constant(Tensor::zeros({1, 16}));
  const Tensor got = tp.value(layer_norm(tp, tp.constant(x), g, b));
  for (int i = 0; i < 3; ++i) {
    double mean = 0.0, var = 0.0;
    for (int j = 0; j < 16; ++j) mean += got.at(i, j);
    mean /= 16;
    for (int j = 0; j < 16; ++j) var += (got.at(i, j) - mean) * (got.at(i, j) - mean);
    var /= 16;
    CHECK(std::abs(mean) < 1e-10);
    CHECK(std::abs(var - 1.0) < 1e-8);
  }
}

TEST_CASE("layer_norm rejects width-one rows") {
  Tape tp;
  Var x = tp.constant(Tensor::zeros({3, 1}));
  Var g = tp.constant(Tensor::full({1, 1}, 1.0));
  Var b = tp.constant(Tensor::zeros({1, 1}));
  CHECK_THROWS_AS(layer_norm(tp, x, g, b), ContractError);
}

TEST_CASE("single-head attention matches the scalar reference") {
  Rng rng(41);
  LayerFixture f(6, 1, rng);
  Tensor x = random_matrix(5, 6, rng);
  Tape tp;
  LayerVars lv = f.lift(tp);
  const Tensor got = tp.value(mhsa(tp, tp.constant(x), lv));
  Tensor want = mhsa_single_head_reference(x, f);
  for (int64_t i = 0; i < want.size(); ++i) {
    CHECK(std::abs(got.values[i] - want.values[i]) < 1e-12);
  }
}

TEST_CASE("attention is equivariant to row permutations") {
  Rng rng(43);
  LayerFixture f(8, 2, rng);
  Tensor x = random_matrix(6, 8, rng);
  const std::vector<int> perm = {3, 0, 5, 1, 4, 2};
  Tensor px({6, 8});
  for (int i = 0; i < 6; ++i) {
    for (int j = 0; j < 8; ++j) px.at(i, j) = x.at(perm[i], j);
  }
  Tape tp;
  LayerVars lv = f.lift(tp);
  const Tensor base = tp.value(mhsa(tp, tp.constant(x), lv));
  const Tensor permuted = tp.value(mhsa(tp, tp.constant(px), lv));
  for (int i = 0; i < 6; ++i) {
    for (int j = 0; j < 8; ++j) {
      CHECK(std::abs(permuted.at(i, j) - base.at(perm[i], j)) < 1e-12);
    }
  }
}

TEST_CASE("mlp matches the scalar reference") {
  Rng rng(47);
  LayerFixture f(4, 1, rng);
  Tensor x = random_matrix(3, 4, rng);
  Tape tp;
  LayerVars lv = f.lift(tp);
  const Tensor got = tp.value(mlp(tp, tp.constant(x), lv));
  for (int i = 0; i < 3; ++i) {
    std::vector<double> hidden(16);
    for (int j = 0; j < 16; ++j) {
      double acc = f.b1.at(0, j);
      for (int k = 0; k < 4; ++k) acc += x.at(i, k) * f.w1.at(k, j);
      hidden[static_cast<size_t>(j)] = gelu_reference(acc);
    }
    for (int j = 0; j < 4; ++j) {
      double acc = f.b2.at(0, j);
      for (int k = 0; k < 16; ++k) acc += hidden[static_cast<size_t>(k)] * f.w2.at(k, j);
      CHECK(std::abs(got.at(i, j) - acc) < 1e-12);
    }
  }
}

TEST_CASE("transformer_layer is exactly the documented composition") {
  Rng rng(53);
  LayerFixture f(8, 2, rng);
  Tensor x = random_matrix(5, 8, rng);

  Tape tp1;
  LayerVars lv1 = f.lift(tp1);
  const Tensor& got = tp1.value(transformer_layer(tp1, tp1.constant(x), lv1));

  Tape tp2;
  LayerVars lv2 = f.lift(tp2);
  Var vx = tp2.constant(x);
  Var y = tp2.add(mhsa(tp2, layer_norm(tp2, vx, lv2.ln1_g, lv2.ln1_b), lv2), vx);
  Var out = tp2.add(mlp(tp2, layer_norm(tp2, y, lv2.ln2_g, lv2.ln2_b), lv2), y);
  const Tensor& want = tp2.value(out);

  for (int64_t i = 0; i < want.size(); ++i) CHECK(got.values[i] == want.values[i]);
}

TEST_CASE("an all-zero layer is the identity map") {
  Rng rng(59);
  LayerFixture f(4, 2, rng);
  f.zero_everything();  // zero LN gain kills both branches, residuals pass through
  Tensor x = random_matrix(3, 4, rng);
  Tape tp;
  LayerVars lv = f.lift(tp);
  const Tensor got = tp.value(transformer_layer(tp, tp.constant(x), lv));
  for (int64_t i = 0; i < x.size(); ++i) CHECK(got.values[i] == x.values[i]);
}

TEST_CASE("transformer_layer gradients pass central differences") {
  Rng rng(61);
  LayerFixture base(4, 2, rng);
  Tensor x = random_matrix(3, 4, rng);
  Tensor readout = random_matrix(4, 1, rng);

  auto eval = [&](bool with_grad) {
    Tape tp;
    Var vx = tp.input(x, true);
    LayerVars lv;
    Var wq0 = tp.input(base.wq[0], true);
    lv.heads.push_back({wq0, tp.input(base.wk[0], false), tp.input(base.wv[0], false),
                        tp.input(base.wo[0], false)});
    lv.heads.push_back({tp.input(base.wq[1], false), tp.input(base.wk[1], false),
                        tp.input(base.wv[1], false), tp.input(base.wo[1], false)});
    Var w1 = tp.input(base.w1, true);
    lv.w1 = w1;
    lv.b1 = tp.input(base.b1, false);
    lv.w2 = tp.input(base.w2, false);
    lv.b2 = tp.input(base.b2, false);
    Var g1 = tp.input(base.ln1_g, true);
    lv.ln1_g = g1;
    lv.ln1_b = tp.input(base.ln1_b, false);
    lv.ln2_g = tp.input(base.ln2_g, false);
    lv.ln2_b = tp.input(base.ln2_b, false);
    Var out = transformer_layer(tp, vx, lv);
    Var loss = tp.sum_all(tp.matmul(out, tp.constant(readout)));
    if (with_grad) {
      tp.backward(loss);
      auto copy = [&](Var v, Tensor& dst) {
        auto g = tp.grad(v);
        dst.ensure_grad();
        std::copy(g.begin(), g.end(), dst.grad.begin());
      };
      copy(vx, x);
      copy(wq0, base.wq[0]);
      copy(w1, base.w1);
      copy(g1, base.ln1_g);
    }
    return tp.scalar(loss);
  };
  std::vector<std::pair<std::string, Tensor*>> params = {
      {"x", &x}, {"wq0", &base.wq[0]}, {"w1", &base.w1}, {"ln1_g", &base.ln1_g}};
  GradCheckReport rep = grad_check(eval, params, 1e-5);
  INFO("worst " << rep.worst_name << "[" << rep.worst_coord << "]");
  CHECK(rep.max_rel_error < 1e-6);
}
