#pragma once

#include <map>
#include <string>
#include <unordered_map>
#include <vector>

#include "vocap/rng.hpp"
#include "vocap/tape.hpp"
#include "vocap/tensor.hpp"

namespace vocap {

/// Named parameter arrays. Initialization is derived from (master seed, name)
/// so it does not depend on registration order.
template <typename S>
class ParamStore {
 public:
  explicit ParamStore(uint64_t seed = 0) : seed_(seed) {}

  enum class Init { zeros, ones, normal };

  Tensor<S>& add(const std::string& name, std::vector<int> shape, Init init,
                 double stddev = 0.02) {
    auto it = params_.find(name);
    if (it != params_.end()) throw InternalError("duplicate parameter: " + name);
    Tensor<S> t(shape);
    switch (init) {
      case Init::zeros:
        break;
      case Init::ones:
        for (int64_t i = 0; i < t.numel(); ++i) t[i] = S(1);
        break;
      case Init::normal: {
        Rng rng(hash_combine(seed_, fnv1a64(name)));
        rng.fill_normal(t, stddev);
        break;
      }
    }
    return params_.emplace(name, std::move(t)).first->second;
  }

  Tensor<S>& get(const std::string& name) {
    auto it = params_.find(name);
    if (it == params_.end()) throw InternalError("unknown parameter: " + name);
    return it->second;
  }
  const Tensor<S>& get(const std::string& name) const {
    return const_cast<ParamStore*>(this)->get(name);
  }
  bool has(const std::string& name) const { return params_.count(name) > 0; }

  const std::map<std::string, Tensor<S>>& all() const { return params_; }
  std::map<std::string, Tensor<S>>& all() { return params_; }

  int64_t total_params() const {
    int64_t n = 0;
    for (const auto& [k, v] : params_) n += v.numel();
    return n;
  }

  std::vector<std::string> names_with_prefix(const std::string& prefix) const {
    std::vector<std::string> out;
    for (const auto& [k, v] : params_)
      if (k.rfind(prefix, 0) == 0) out.push_back(k);
    return out;
  }

  uint64_t seed() const { return seed_; }

 private:
  uint64_t seed_;
  std::map<std::string, Tensor<S>> params_;
};

template <typename S>
using GradMap = std::map<std::string, Tensor<S>>;

/// Per-tape binding of parameters to graph leaves. Each parameter becomes one
/// leaf per tape; gradients are collected back by name after backward().
template <typename S>
class ParamCtx {
 public:
  ParamCtx(Tape<S>& tape, const ParamStore<S>& store, bool trainable)
      : tape_(&tape), store_(&store), trainable_(trainable) {}

  Var operator()(const std::string& name) {
    auto it = cache_.find(name);
    if (it != cache_.end()) return it->second;
    Var v = tape_->leaf(store_->get(name), trainable_);
    cache_.emplace(name, v);
    return v;
  }

  /// Accumulate parameter gradients into `out` in name order (deterministic).
  void collect_grads(GradMap<S>& out) {
    std::vector<std::string> names;
    names.reserve(cache_.size());
    for (const auto& [k, v] : cache_) names.push_back(k);
    std::sort(names.begin(), names.end());
    for (const auto& name : names) {
      Var v = cache_.at(name);
      if (!tape_->has_grad(v)) continue;
      const Tensor<S>& g = tape_->grad(v);
      auto it = out.find(name);
      if (it == out.end()) {
        out.emplace(name, g.clone());
      } else {
        it->second.mat(g.numel(), 1) += g.mat(g.numel(), 1);
      }
    }
  }

  Tape<S>& tape() { return *tape_; }

 private:
  Tape<S>* tape_;
  const ParamStore<S>* store_;
  bool trainable_;
  std::unordered_map<std::string, Var> cache_;
};

// ---------------------------------------------------------------------------
// Layers. Each layer registers its parameters at construction and replays
// pure functions of (tape, params) afterwards.
// ---------------------------------------------------------------------------

template <typename S>
struct Linear {
  std::string w, b;
  int in = 0, out = 0;

  Linear() = default;
  Linear(ParamStore<S>& ps, const std::string& prefix, int in_dim, int out_dim)
      : w(prefix + "/w"), b(prefix + "/b"), in(in_dim), out(out_dim) {
    ps.add(w, {in_dim, out_dim}, ParamStore<S>::Init::normal, 1.0 / std::sqrt(in_dim));
    ps.add(b, {out_dim}, ParamStore<S>::Init::zeros);
  }

  Var fwd(ParamCtx<S>& pc, Var x) const {
    return pc.tape().add_rowvec(pc.tape().matmul(x, pc(w)), pc(b));
  }
};

template <typename S>
struct LayerNorm {
  std::string gamma, beta;

  LayerNorm() = default;
  LayerNorm(ParamStore<S>& ps, const std::string& prefix, int dim)
      : gamma(prefix + "/gamma"), beta(prefix + "/beta") {
    ps.add(gamma, {dim}, ParamStore<S>::Init::ones);
    ps.add(beta, {dim}, ParamStore<S>::Init::zeros);
  }

  Var fwd(ParamCtx<S>& pc, Var x) const {
    return pc.tape().layer_norm(x, pc(gamma), pc(beta));
  }
};

/// Multi-head attention. Query rows [nq, dim_q], key/value rows [nk, dim_kv];
/// output [nq, dim_q]. An optional additive mask [nq, nk] is added to scores.
template <typename S>
struct Attention {
  Linear<S> wq, wk, wv, wo;
  int n_heads = 1, head_dim = 0;

  Attention() = default;
  Attention(ParamStore<S>& ps, const std::string& prefix, int dim_q, int dim_kv, int inner,
            int heads)
      : wq(ps, prefix + "/q", dim_q, inner),
        wk(ps, prefix + "/k", dim_kv, inner),
        wv(ps, prefix + "/v", dim_kv, inner),
        wo(ps, prefix + "/o", inner, dim_q),
        n_heads(heads),
        head_dim(inner / heads) {
    if (inner % heads != 0) throw ConfigError("attention inner dim not divisible by heads");
  }

  Var fwd(ParamCtx<S>& pc, Var q_rows, Var kv_rows, const Tensor<S>* additive_mask = nullptr) const {
    Tape<S>& t = pc.tape();
    Var q = wq.fwd(pc, q_rows);
    Var k = wk.fwd(pc, kv_rows);
    Var v = wv.fwd(pc, kv_rows);
    S inv_sqrt = static_cast<S>(1.0 / std::sqrt(static_cast<double>(head_dim)));
    Var mask_const;
    if (additive_mask) mask_const = t.constant(*additive_mask);
    std::vector<Var> heads;
    heads.reserve(n_heads);
    for (int h = 0; h < n_heads; ++h) {
      Var qh = t.slice_cols(q, h * head_dim, head_dim);
      Var kh = t.slice_cols(k, h * head_dim, head_dim);
      Var vh = t.slice_cols(v, h * head_dim, head_dim);
      Var scores = t.scale(t.matmul_t(qh, kh), inv_sqrt);
      if (additive_mask) scores = t.add(scores, mask_const);
      heads.push_back(t.matmul(t.softmax_rows(scores), vh));
    }
    Var merged = n_heads == 1 ? heads[0] : t.concat_cols(heads);
    return wo.fwd(pc, merged);
  }
};

/// Two-layer MLP with GELU.
template <typename S>
struct Mlp {
  Linear<S> fc1, fc2;

  Mlp() = default;
  Mlp(ParamStore<S>& ps, const std::string& prefix, int dim, int hidden)
      : fc1(ps, prefix + "/fc1", dim, hidden), fc2(ps, prefix + "/fc2", hidden, dim) {}

  Var fwd(ParamCtx<S>& pc, Var x) const {
    Tape<S>& t = pc.tape();
    return fc2.fwd(pc, t.gelu(fc1.fwd(pc, x)));
  }
};

/// Pre-LN transformer block (self-attention + MLP).
template <typename S>
struct TransformerBlock {
  LayerNorm<S> ln1, ln2;
  Attention<S> attn;
  Mlp<S> mlp;

  TransformerBlock() = default;
  TransformerBlock(ParamStore<S>& ps, const std::string& prefix, int dim, int heads, int hidden)
      : ln1(ps, prefix + "/ln1", dim),
        ln2(ps, prefix + "/ln2", dim),
        attn(ps, prefix + "/attn", dim, dim, dim, heads),
        mlp(ps, prefix + "/mlp", dim, hidden) {}

  Var fwd(ParamCtx<S>& pc, Var x, const Tensor<S>* additive_mask = nullptr) const {
    Tape<S>& t = pc.tape();
    Var h = ln1.fwd(pc, x);
    x = t.add(x, attn.fwd(pc, h, h, additive_mask));
    x = t.add(x, mlp.fwd(pc, ln2.fwd(pc, x)));
    return x;
  }
};

/// SAM-style two-way block: token self-attention, token->image cross-attention,
/// token MLP, image->token cross-attention. Pre-LN with residuals on both sides.
template <typename S>
struct TwoWayBlock {
  LayerNorm<S> ln_self, ln_t2i_q, ln_mlp, ln_i2t_q;
  Attention<S> self_attn, t2i, i2t;
  Mlp<S> mlp;

  TwoWayBlock() = default;
  TwoWayBlock(ParamStore<S>& ps, const std::string& prefix, int dim, int heads, int hidden)
      : ln_self(ps, prefix + "/ln_self", dim),
        ln_t2i_q(ps, prefix + "/ln_t2i", dim),
        ln_mlp(ps, prefix + "/ln_mlp", dim),
        ln_i2t_q(ps, prefix + "/ln_i2t", dim),
        self_attn(ps, prefix + "/self", dim, dim, dim, heads),
        t2i(ps, prefix + "/t2i", dim, dim, dim, heads),
        i2t(ps, prefix + "/i2t", dim, dim, dim, heads),
        mlp(ps, prefix + "/mlp", dim, hidden) {}

  std::pair<Var, Var> fwd(ParamCtx<S>& pc, Var tokens, Var image) const {
    Tape<S>& t = pc.tape();
    Var h = ln_self.fwd(pc, tokens);
    tokens = t.add(tokens, self_attn.fwd(pc, h, h));
    tokens = t.add(tokens, t2i.fwd(pc, ln_t2i_q.fwd(pc, tokens), image));
    tokens = t.add(tokens, mlp.fwd(pc, ln_mlp.fwd(pc, tokens)));
    image = t.add(image, i2t.fwd(pc, ln_i2t_q.fwd(pc, image), tokens));
    return {tokens, image};
  }
};

/// Stack of two-way blocks plus a final token->image attention, as in the
/// segment-anything decoder family.
template <typename S>
struct TwoWayTransformer {
  std::vector<TwoWayBlock<S>> blocks;
  LayerNorm<S> ln_final_q;
  Attention<S> final_t2i;
  LayerNorm<S> ln_out;

  TwoWayTransformer() = default;
  TwoWayTransformer(ParamStore<S>& ps, const std::string& prefix, int dim, int heads, int hidden,
                    int depth) {
    for (int i = 0; i < depth; ++i)
      blocks.emplace_back(ps, prefix + "/block" + std::to_string(i), dim, heads, hidden);
    ln_final_q = LayerNorm<S>(ps, prefix + "/ln_final", dim);
    final_t2i = Attention<S>(ps, prefix + "/final_t2i", dim, dim, dim, heads);
    ln_out = LayerNorm<S>(ps, prefix + "/ln_out", dim);
  }

  std::pair<Var, Var> fwd(ParamCtx<S>& pc, Var tokens, Var image) const {
    Tape<S>& t = pc.tape();
    for (const auto& b : blocks) std::tie(tokens, image) = b.fwd(pc, tokens, image);
    tokens = t.add(tokens, final_t2i.fwd(pc, ln_final_q.fwd(pc, tokens), image));
    tokens = ln_out.fwd(pc, tokens);
    return {tokens, image};
  }
};

template <typename S>
struct Conv2dLayer {
  std::string w, b;
  int stride = 1, pad = 0;

  Conv2dLayer() = default;
  Conv2dLayer(ParamStore<S>& ps, const std::string& prefix, int kh, int kw, int cin, int cout,
              int stride_, int pad_)
      : w(prefix + "/w"), b(prefix + "/b"), stride(stride_), pad(pad_) {
    ps.add(w, {kh, kw, cin, cout}, ParamStore<S>::Init::normal, 1.0 / std::sqrt(kh * kw * cin));
    ps.add(b, {cout}, ParamStore<S>::Init::zeros);
  }

  Var fwd(ParamCtx<S>& pc, Var x) const { return pc.tape().conv2d(x, pc(w), pc(b), stride, pad); }
};

template <typename S>
struct ConvTranspose2dLayer {
  std::string w, b;
  int stride = 2;

  ConvTranspose2dLayer() = default;
  ConvTranspose2dLayer(ParamStore<S>& ps, const std::string& prefix, int k, int cin, int cout,
                       int stride_)
      : w(prefix + "/w"), b(prefix + "/b"), stride(stride_) {
    ps.add(w, {k, k, cin, cout}, ParamStore<S>::Init::normal, 1.0 / std::sqrt(k * k * cin));
    ps.add(b, {cout}, ParamStore<S>::Init::zeros);
  }

  Var fwd(ParamCtx<S>& pc, Var x) const { return pc.tape().conv_transpose2d(x, pc(w), pc(b), stride); }
};

/// Builds the [n, n] causal additive mask (0 on/below diagonal, -inf above).
template <typename S>
Tensor<S> causal_mask(int n) {
  Tensor<S> m({n, n});
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) m.at(i, j) = j <= i ? S(0) : S(-1e30);
  return m;
}

}  // namespace vocap
