#pragma once

#include <numeric>
#include <string>
#include <vector>

#include "vocap/model_config.hpp"
#include "vocap/nn.hpp"

namespace vocap {

/// Byte-level tokenizer: ids 0..255 are raw bytes, plus BOS/EOS/PAD.
struct ByteTokenizer {
  static std::vector<int> encode(const std::string& text) {
    std::vector<int> ids;
    ids.reserve(text.size());
    for (unsigned char c : text) ids.push_back(static_cast<int>(c));
    return ids;
  }

  static std::string decode(const std::vector<int>& ids) {
    std::string out;
    for (int id : ids) {
      if (id == ModelConfig::eos_id) break;
      if (id >= 0 && id < 256) out.push_back(static_cast<char>(id));
    }
    return out;
  }
};

/// One transformer stack serving both the text encoder (bidirectional) and the
/// text decoder (causal). The two roles share every parameter; only the
/// attention mask and the input layout differ. The vocabulary projection is
/// used by the decoder role alone.
template <typename S>
class SharedTextStack {
 public:
  SharedTextStack() = default;
  SharedTextStack(ParamStore<S>& ps, const std::string& prefix, const ModelConfig& cfg)
      : cfg_(cfg), emb_(prefix + "/token_emb"), pos_(prefix + "/pos_emb") {
    ps.add(emb_, {ModelConfig::vocab_size, cfg.embed_dim}, ParamStore<S>::Init::normal, 0.02);
    ps.add(pos_, {cfg.max_text_positions(), cfg.embed_dim}, ParamStore<S>::Init::normal, 0.02);
    for (int i = 0; i < cfg.text_depth; ++i)
      blocks_.emplace_back(ps, prefix + "/block" + std::to_string(i), cfg.embed_dim,
                           cfg.text_heads, cfg.embed_dim * cfg.mlp_ratio);
    ln_final_ = LayerNorm<S>(ps, prefix + "/ln_final", cfg.embed_dim);
    vocab_proj_ = Linear<S>(ps, prefix + "/vocab_proj", cfg.embed_dim, ModelConfig::vocab_size);
  }

  /// Encoder role: bidirectional attention over token ids; features before the
  /// vocabulary layer, shape [n, d].
  Var encode(ParamCtx<S>& pc, const std::vector<int>& ids) const {
    Tape<S>& t = pc.tape();
    Var x = t.embedding_rows(pc(emb_), ids);
    x = t.add(x, t.embedding_rows(pc(pos_), iota(static_cast<int>(ids.size()), 0)));
    for (const auto& b : blocks_) x = b.fwd(pc, x);  // full attention
    return ln_final_.fwd(pc, x);
  }

  /// Decoder role, teacher-forced: rows [prefix; BOS; target[:-1]] with causal
  /// attention. Returns logits [k, vocab] where row i predicts target[i].
  Var teacher_forced_logits(ParamCtx<S>& pc, Var prefix_rows, const std::vector<int>& target) const {
    Tape<S>& t = pc.tape();
    int l = t.val(prefix_rows).rows_flat();
    int k = static_cast<int>(target.size());
    std::vector<int> in_ids;
    in_ids.reserve(k);
    in_ids.push_back(ModelConfig::bos_id);
    for (int i = 0; i + 1 < k; ++i) in_ids.push_back(target[i]);
    Var tok = t.embedding_rows(pc(emb_), in_ids);
    Var x = t.concat_rows({prefix_rows, tok});
    x = t.add(x, t.embedding_rows(pc(pos_), iota(l + k, 0)));
    Tensor<S> mask = causal_mask<S>(l + k);
    for (const auto& b : blocks_) x = b.fwd(pc, x, &mask);
    x = ln_final_.fwd(pc, x);
    Var logits = vocab_proj_.fwd(pc, x);
    return t.slice_rows(logits, l, k);
  }

  /// Decoder role, greedy sampling with per-layer KV caches. Pure forward on
  /// plain tensors; mirrors the tape computation.
  std::vector<int> greedy_decode(const ParamStore<S>& ps, const Tensor<S>& prefix_rows,
                                 int max_len) const {
    const int d = cfg_.embed_dim;
    const int l = prefix_rows.rows_flat();
    const int heads = cfg_.text_heads;
    const int hd = d / heads;
    const int n_blocks = static_cast<int>(blocks_.size());
    const int max_pos = l + max_len + 1;

    struct Cache {
      std::vector<S> k, v;  // [steps, d]
      int n = 0;
    };
    std::vector<Cache> caches(n_blocks);
    for (auto& c : caches) {
      c.k.reserve(static_cast<size_t>(max_pos) * d);
      c.v.reserve(static_cast<size_t>(max_pos) * d);
    }

    auto linear_row = [&](const std::vector<S>& in, const std::string& w, const std::string& b,
                          std::vector<S>& out) {
      const Tensor<S>& W = ps.get(w);
      const Tensor<S>& B = ps.get(b);
      int win = W.dim(0), wout = W.dim(1);
      out.assign(wout, S(0));
      Eigen::Map<const Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>> Wm(
          W.data(), win, wout);
      Eigen::Map<const Eigen::Matrix<S, 1, Eigen::Dynamic>> xv(in.data(), win);
      Eigen::Map<Eigen::Matrix<S, 1, Eigen::Dynamic>> ov(out.data(), wout);
      ov.noalias() = xv * Wm;
      for (int i = 0; i < wout; ++i) out[i] += B[i];
    };
    auto layer_norm_row = [&](std::vector<S>& x, const std::string& g, const std::string& b) {
      const Tensor<S>& G = ps.get(g);
      const Tensor<S>& B = ps.get(b);
      int n = static_cast<int>(x.size());
      double mu = 0;
      for (S v : x) mu += v;
      mu /= n;
      double var = 0;
      for (S v : x) var += (v - mu) * (v - mu);
      var /= n;
      double inv = 1.0 / std::sqrt(var + 1e-5);
      for (int i = 0; i < n; ++i)
        x[i] = static_cast<S>((x[i] - mu) * inv) * G[i] + B[i];
    };
    auto gelu_vec = [](std::vector<S>& x) {
      for (S& v : x) {
        double z = static_cast<double>(v);
        v = static_cast<S>(0.5 * z * (1.0 + std::erf(z * M_SQRT1_2)));
      }
    };

    std::vector<int> out_ids;
    std::vector<S> x(d), h(d), q(d), tmp;
    int next_token = -1;
    const Tensor<S>& pos_table = ps.get(pos_);
    const Tensor<S>& emb_table = ps.get(emb_);

    for (int step = 0; step < l + max_len; ++step) {
      if (step < l) {
        std::copy(prefix_rows.data() + static_cast<int64_t>(step) * d,
                  prefix_rows.data() + static_cast<int64_t>(step + 1) * d, x.begin());
      } else {
        int tok = step == l ? ModelConfig::bos_id : next_token;
        std::copy(emb_table.data() + static_cast<int64_t>(tok) * d,
                  emb_table.data() + static_cast<int64_t>(tok + 1) * d, x.begin());
      }
      for (int i = 0; i < d; ++i) x[i] += pos_table[static_cast<int64_t>(step) * d + i];

      for (int bi = 0; bi < n_blocks; ++bi) {
        const TransformerBlock<S>& b = blocks_[bi];
        Cache& c = caches[bi];
        h = x;
        layer_norm_row(h, b.ln1.gamma, b.ln1.beta);
        linear_row(h, b.attn.wq.w, b.attn.wq.b, q);
        size_t base = c.k.size();
        c.k.resize(base + d);
        c.v.resize(base + d);
        linear_row(h, b.attn.wk.w, b.attn.wk.b, tmp);
        std::copy(tmp.begin(), tmp.end(), c.k.begin() + base);
        linear_row(h, b.attn.wv.w, b.attn.wv.b, tmp);
        std::copy(tmp.begin(), tmp.end(), c.v.begin() + base);
        c.n += 1;

        std::vector<S> merged(d, S(0));
        S inv_sqrt = static_cast<S>(1.0 / std::sqrt(static_cast<double>(hd)));
        std::vector<double> scores(c.n);
        for (int hh = 0; hh < heads; ++hh) {
          double mx = -1e300;
          for (int j = 0; j < c.n; ++j) {
            double s = 0;
            const S* kr = c.k.data() + static_cast<size_t>(j) * d + hh * hd;
            const S* qr = q.data() + hh * hd;
            for (int u = 0; u < hd; ++u) s += static_cast<double>(qr[u]) * kr[u];
            s *= inv_sqrt;
            scores[j] = s;
            mx = std::max(mx, s);
          }
          double denom = 0;
          for (int j = 0; j < c.n; ++j) {
            scores[j] = std::exp(scores[j] - mx);
            denom += scores[j];
          }
          for (int j = 0; j < c.n; ++j) {
            S wgt = static_cast<S>(scores[j] / denom);
            const S* vr = c.v.data() + static_cast<size_t>(j) * d + hh * hd;
            for (int u = 0; u < hd; ++u) merged[hh * hd + u] += wgt * vr[u];
          }
        }
        linear_row(merged, b.attn.wo.w, b.attn.wo.b, tmp);
        for (int i = 0; i < d; ++i) x[i] += tmp[i];

        h = x;
        layer_norm_row(h, b.ln2.gamma, b.ln2.beta);
        linear_row(h, b.mlp.fc1.w, b.mlp.fc1.b, tmp);
        gelu_vec(tmp);
        std::vector<S> m2;
        linear_row(tmp, b.mlp.fc2.w, b.mlp.fc2.b, m2);
        for (int i = 0; i < d; ++i) x[i] += m2[i];
      }

      if (step < l) continue;  // prefix rows do not predict; BOS enters at step l
      h = x;
      layer_norm_row(h, ln_final_.gamma, ln_final_.beta);
      linear_row(h, vocab_proj_.w, vocab_proj_.b, tmp);
      int best = 0;
      for (int j = 1; j < ModelConfig::vocab_size; ++j)
        if (tmp[j] > tmp[best]) best = j;
      next_token = best;
      if (next_token == ModelConfig::eos_id) break;
      out_ids.push_back(next_token);
      if (static_cast<int>(out_ids.size()) >= max_len) break;
    }
    return out_ids;
  }

  /// Stable logits of the first generated step given a prefix (test hook for
  /// comparing the cached path against the tape path).
  const std::vector<TransformerBlock<S>>& blocks() const { return blocks_; }
  const std::string& pos_name() const { return pos_; }
  const std::string& emb_name() const { return emb_; }
  const LayerNorm<S>& final_ln() const { return ln_final_; }
  const Linear<S>& vocab_proj() const { return vocab_proj_; }

 private:
  static std::vector<int> iota(int n, int start) {
    std::vector<int> v(n);
    std::iota(v.begin(), v.end(), start);
    return v;
  }

  ModelConfig cfg_;
  std::string emb_, pos_;
  std::vector<TransformerBlock<S>> blocks_;
  LayerNorm<S> ln_final_;
  Linear<S> vocab_proj_;
};

}  // namespace vocap
