#include <cmath>

#include "doctest.h"
#include "test_util.hpp"
#include "vocap/nn.hpp"
#include "vocap/tape.hpp"

using namespace vocap;
using testutil::gradcheck;
using testutil::random_tensor;

namespace {

constexpr double kTol = 1e-3;

TEST_CASE("tape: elementwise and matmul gradients") {
  auto a = random_tensor<double>({4, 5}, 1);
  auto b = random_tensor<double>({4, 5}, 2);
  auto m = random_tensor<double>({5, 3}, 3);

  auto r1 = gradcheck(
      [](Tape<double>& t, const std::vector<Var>& v) {
        return t.sum_all(t.mul(t.add(v[0], v[1]), t.sub(v[0], v[1])));
      },
      {a, b}, 8, 42);
  CHECK(r1.max_rel_err < kTol);

  auto r2 = gradcheck(
      [](Tape<double>& t, const std::vector<Var>& v) {
        return t.mean_all(t.gelu(t.matmul(v[0], v[1])));
      },
      {a, m}, 8, 43);
  CHECK(r2.max_rel_err < kTol);

  auto r3 = gradcheck(
      [](Tape<double>& t, const std::vector<Var>& v) {
        return t.sum_all(t.sigmoid(t.matmul_t(v[0], v[1])));
      },
      {a, b}, 8, 44);
  CHECK(r3.max_rel_err < kTol);
}

TEST_CASE("tape: softmax, layernorm, attention-shaped graphs") {
  auto x = random_tensor<double>({6, 8}, 5);
  auto gamma = random_tensor<double>({8}, 6, 0.2);
  auto beta = random_tensor<double>({8}, 7, 0.2);
  for (int64_t i = 0; i < gamma.numel(); ++i) gamma[i] += 1.0;

  auto r1 = gradcheck(
      [](Tape<double>& t, const std::vector<Var>& v) {
        return t.mean_all(t.softmax_rows(v[0]));
      },
      {x}, 10, 52);
  CHECK(r1.max_rel_err < kTol);

  auto r2 = gradcheck(
      [](Tape<double>& t, const std::vector<Var>& v) {
        return t.mean_all(t.mul(t.layer_norm(v[0], v[1], v[2]), v[0]));
      },
      {x, gamma, beta}, 10, 53);
  CHECK(r2.max_rel_err < kTol);

  auto q = random_tensor<double>({3, 8}, 8);
  auto k = random_tensor<double>({5, 8}, 9);
  auto vv = random_tensor<double>({5, 8}, 10);
  auto r3 = gradcheck(
      [](Tape<double>& t, const std::vector<Var>& v) {
        Var scores = t.scale(t.matmul_t(v[0], v[1]), 0.35);
        return t.sum_all(t.matmul(t.softmax_rows(scores), v[2]));
      },
      {q, k, vv}, 8, 54);
  CHECK(r3.max_rel_err < kTol);
}

TEST_CASE("tape: slicing, concat, embedding, broadcast") {
  auto x = random_tensor<double>({6, 8}, 11);
  auto table = random_tensor<double>({10, 4}, 12);
  auto row = random_tensor<double>({1, 8}, 13);

  auto r1 = gradcheck(
      [](Tape<double>& t, const std::vector<Var>& v) {
        Var a = t.slice_rows(v[0], 1, 3);
        Var b = t.slice_rows(v[0], 3, 3);
        Var c = t.concat_rows({a, b});
        Var d = t.slice_cols(c, 2, 4);
        return t.sum_all(t.mul(d, d));
      },
      {x}, 10, 61);
  CHECK(r1.max_rel_err < kTol);

  auto r2 = gradcheck(
      [](Tape<double>& t, const std::vector<Var>& v) {
        Var e = t.embedding_rows(v[0], {1, 3, 3, 7});
        return t.mean_all(t.mul(e, e));
      },
      {table}, 10, 62);
  CHECK(r2.max_rel_err < kTol);

  auto r3 = gradcheck(
      [](Tape<double>& t, const std::vector<Var>& v) {
        Var b = t.broadcast_row(v[1], 6);
        return t.sum_all(t.mul(t.add_rowvec(v[0], v[1]), b));
      },
      {x, row}, 10, 63);
  CHECK(r3.max_rel_err < kTol);
}

TEST_CASE("tape: conv2d / conv_transpose2d / upsample / patches gradients") {
  auto x = random_tensor<double>({6, 6, 3}, 21);
  auto w = random_tensor<double>({3, 3, 3, 4}, 22, 0.5);
  auto b = random_tensor<double>({4}, 23, 0.5);

  auto r1 = gradcheck(
      [](Tape<double>& t, const std::vector<Var>& v) {
        return t.mean_all(t.gelu(t.conv2d(v[0], v[1], v[2], 2, 1)));
      },
      {x, w, b}, 8, 71);
  CHECK(r1.max_rel_err < kTol);

  auto wt = random_tensor<double>({2, 2, 3, 5}, 24, 0.5);
  auto bt = random_tensor<double>({5}, 25, 0.5);
  auto r2 = gradcheck(
      [](Tape<double>& t, const std::vector<Var>& v) {
        return t.mean_all(t.mul(t.conv_transpose2d(v[0], v[1], v[2], 2),
                                t.conv_transpose2d(v[0], v[1], v[2], 2)));
      },
      {x, wt, bt}, 8, 72);
  CHECK(r2.max_rel_err < kTol);

  auto img = random_tensor<double>({4, 4, 2}, 26);
  auto r3 = gradcheck(
      [](Tape<double>& t, const std::vector<Var>& v) {
        Var u = t.upsample_bilinear(v[0], 4);
        return t.mean_all(t.mul(u, u));
      },
      {img}, 10, 73);
  CHECK(r3.max_rel_err < kTol);

  auto r4 = gradcheck(
      [](Tape<double>& t, const std::vector<Var>& v) {
        Var p = t.extract_patches(v[0], 2);
        return t.sum_all(t.mul(p, p));
      },
      {img}, 10, 74);
  CHECK(r4.max_rel_err < kTol);
}

TEST_CASE("tape: loss gradients match finite differences") {
  auto logits = random_tensor<double>({5, 5}, 31, 2.0);
  Tensor<double> target({5, 5});
  Rng rng(99);
  for (int64_t i = 0; i < target.numel(); ++i) target[i] = rng.uniform() < 0.4 ? 1.0 : 0.0;

  auto r1 = gradcheck(
      [&](Tape<double>& t, const std::vector<Var>& v) {
        return t.focal_loss(v[0], target, 2.0, 0.25);
      },
      {logits}, 12, 81);
  CHECK(r1.max_rel_err < kTol);

  auto r2 = gradcheck(
      [&](Tape<double>& t, const std::vector<Var>& v) { return t.dice_loss(v[0], target); },
      {logits}, 12, 82);
  CHECK(r2.max_rel_err < kTol);

  auto r3 = gradcheck(
      [&](Tape<double>& t, const std::vector<Var>& v) { return t.bce_with_logits(v[0], target); },
      {logits}, 12, 83);
  CHECK(r3.max_rel_err < kTol);

  auto cls_logits = random_tensor<double>({6, 9}, 32, 2.0);
  std::vector<int> ids = {0, 3, 8, 1, 1, 5};
  auto r4 = gradcheck(
      [&](Tape<double>& t, const std::vector<Var>& v) {
        return t.cross_entropy_smoothed(v[0], ids, 0.1);
      },
      {cls_logits}, 12, 84);
  CHECK(r4.max_rel_err < kTol);

  auto pred = random_tensor<double>({7}, 33);
  auto tgt = random_tensor<double>({7}, 34);
  auto r5 = gradcheck(
      [&](Tape<double>& t, const std::vector<Var>& v) { return t.l1_to_const(v[0], tgt); },
      {pred}, 7, 85);
  CHECK(r5.max_rel_err < kTol);
}

TEST_CASE("tape: stop_gradient blocks flow") {
  auto x = random_tensor<double>({3, 3}, 41);
  Tape<double> t;
  Var v = t.leaf(x, true);
  Var loss = t.sum_all(t.mul(t.stop_gradient(v), t.stop_gradient(v)));
  t.backward(loss);
  CHECK_FALSE(t.has_grad(v));
}

TEST_CASE("nn: transformer block and two-way block gradients") {
  ParamStore<double> ps(7);
  TransformerBlock<double> block(ps, "blk", 8, 2, 16);
  auto x = random_tensor<double>({5, 8}, 51);

  // Check gradients through a named parameter and the input.
  Tensor<double> w = ps.get("blk/attn/q/w");
  auto fn = [&](Tape<double>& t, const std::vector<Var>& v) {
    ParamCtx<double> pc(t, ps, true);
    (void)v;
    Var in = t.leaf(x, false);
    auto mask = causal_mask<double>(5);
    return t.mean_all(block.fwd(pc, in, &mask));
  };

  // Finite differences directly on a parameter tensor inside the store.
  Tape<double> tape;
  ParamCtx<double> pc(tape, ps, true);
  Var in = tape.leaf(x, false);
  auto mask = causal_mask<double>(5);
  Var loss = tape.mean_all(block.fwd(pc, in, &mask));
  tape.backward(loss);
  GradMap<double> grads;
  pc.collect_grads(grads);

  Rng rng(52);
  double h = 1e-6;
  int checked = 0;
  for (int c = 0; c < 10; ++c) {
    int64_t idx = static_cast<int64_t>(rng.uniform() * w.numel());
    double orig = w[idx];
    w[idx] = orig + h;
    Tape<double> tp;
    ParamCtx<double> pcp(tp, ps, false);
    double fp = tp.val(tp.mean_all(block.fwd(pcp, tp.leaf(x, false), &mask)))[0];
    w[idx] = orig - h;
    Tape<double> tm;
    ParamCtx<double> pcm(tm, ps, false);
    double fm = tm.val(tm.mean_all(block.fwd(pcm, tm.leaf(x, false), &mask)))[0];
    w[idx] = orig;
    double fd = (fp - fm) / (2 * h);
    double an = grads.at("blk/attn/q/w")[idx];
    double rel = std::abs(fd - an) / std::max({std::abs(fd), std::abs(an), 1e-4});
    CHECK(rel < kTol);
    ++checked;
  }
  CHECK(checked == 10);
  (void)fn;
}

TEST_CASE("nn: shared parameter receives gradients from both uses") {
  ParamStore<double> ps(8);
  Linear<double> lin(ps, "shared", 4, 4);
  auto x = random_tensor<double>({3, 4}, 61);

  Tape<double> t;
  ParamCtx<double> pc(t, ps, true);
  Var in = t.leaf(x, false);
  Var once = lin.fwd(pc, in);
  Var twice = lin.fwd(pc, once);  // same Var leaf reused through the cache
  Var loss = t.sum_all(t.mul(twice, twice));
  t.backward(loss);
  GradMap<double> grads;
  pc.collect_grads(grads);
  CHECK(grads.count("shared/w") == 1);
  double norm = 0;
  for (int64_t i = 0; i < grads["shared/w"].numel(); ++i)
    norm += std::abs(grads["shared/w"][i]);
  CHECK(norm > 0);
}

}  // namespace
