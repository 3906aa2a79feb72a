#pragma once

#include <string>
#include <vector>

#include "vocap/model_config.hpp"
#include "vocap/nn.hpp"

namespace vocap {

/// Fixed-capacity FIFO of memory entries. Eviction removes the oldest
/// non-prompt entry; the prompt-frame entry is never evicted.
template <typename E>
class MemoryBankT {
 public:
  struct Item {
    E payload;
    int frame_index = 0;
    bool is_prompt = false;
  };

  MemoryBankT() = default;
  explicit MemoryBankT(int capacity) : capacity_(capacity) {}

  void push(E payload, int frame_index, bool is_prompt) {
    items_.push_back(Item{std::move(payload), frame_index, is_prompt});
    if (static_cast<int>(items_.size()) > capacity_) {
      for (size_t i = 0; i < items_.size(); ++i) {
        if (!items_[i].is_prompt) {
          items_.erase(items_.begin() + static_cast<ptrdiff_t>(i));
          return;
        }
      }
      items_.pop_back();  // bank full of pinned entries; drop the newcomer
    }
  }

  const std::vector<Item>& items() const { return items_; }
  int capacity() const { return capacity_; }
  int size() const { return static_cast<int>(items_.size()); }
  bool empty() const { return items_.empty(); }
  void clear() { items_.clear(); }

 private:
  int capacity_ = 0;
  std::vector<Item> items_;
};

/// Memory encoder plus cross-attention read. The encoder fuses frame features
/// with the predicted mask additively after projection:
///   entry = project_features(f_t) + encode_mask_embedding(mask).
template <typename S>
class MemorySystem {
 public:
  MemorySystem() = default;
  MemorySystem(ParamStore<S>& ps, const ModelConfig& cfg)
      : cfg_(cfg), feat_proj_(ps, "memory/feat_proj", cfg.embed_dim, cfg.memory_dim) {
    int steps = log2_int(cfg.patch_size);
    int c_in = 1;
    int c_out = 8;
    for (int i = 0; i < steps; ++i) {
      mask_convs_.emplace_back(ps, "memory/mask_conv" + std::to_string(i), 3, 3, c_in, c_out, 2, 1);
      c_in = c_out;
      c_out = std::min(2 * c_out, cfg.memory_dim);
    }
    mask_out_ = Linear<S>(ps, "memory/mask_out", c_in, cfg.memory_dim);
    age_emb_ = "memory/age_emb";
    ps.add(age_emb_, {cfg.memory_capacity + 2, cfg.memory_dim}, ParamStore<S>::Init::normal, 0.02);
    for (int i = 0; i < cfg.memory_layers; ++i) {
      std::string p = "memory/layer" + std::to_string(i);
      layers_.push_back(Layer{
          LayerNorm<S>(ps, p + "/ln_q", cfg.embed_dim),
          Linear<S>(ps, p + "/q", cfg.embed_dim, cfg.memory_dim),
          Linear<S>(ps, p + "/k", cfg.memory_dim, cfg.memory_dim),
          Linear<S>(ps, p + "/v", cfg.memory_dim, cfg.memory_dim),
          Linear<S>(ps, p + "/o", cfg.memory_dim, cfg.embed_dim),
          LayerNorm<S>(ps, p + "/ln_mlp", cfg.embed_dim),
          Mlp<S>(ps, p + "/mlp", cfg.embed_dim, cfg.embed_dim * cfg.mlp_ratio),
      });
    }
  }

  Var project_features(ParamCtx<S>& pc, Var feature_rows) const {
    return feat_proj_.fwd(pc, feature_rows);
  }

  /// Mask path of the encoder: [H,W] values in [0,1] -> [h*w, d'] rows.
  Var encode_mask_embedding(ParamCtx<S>& pc, Var mask_hw) const {
    Tape<S>& t = pc.tape();
    const Tensor<S>& m = t.val(mask_hw);
    Var x = t.reshape(mask_hw, {m.dim(0), m.dim(1), 1});
    for (size_t i = 0; i < mask_convs_.size(); ++i) {
      x = mask_convs_[i].fwd(pc, x);
      if (i + 1 < mask_convs_.size()) x = t.gelu(x);
    }
    const Tensor<S>& xv = t.val(x);
    Var rows = t.reshape(x, {xv.dim(0) * xv.dim(1), xv.dim(2)});
    return mask_out_.fwd(pc, rows);
  }

  /// entry = project_features + encode_mask_embedding (additive fusion).
  Var encode_memory(ParamCtx<S>& pc, Var feature_rows, Var mask_hw) const {
    Tape<S>& t = pc.tape();
    Var proj = project_features(pc, feature_rows);
    Var memb = encode_mask_embedding(pc, mask_hw);
    if (t.val(proj).rows_flat() != t.val(memb).rows_flat())
      throw ShapeMismatch("encode_memory: mask grid does not match feature grid");
    return t.add(proj, memb);
  }

  struct EntryRef {
    Var rows;        // [h*w, d']
    int age = 0;     // current frame index minus entry frame index
    bool is_prompt = false;
  };

  /// Cross-attention read f_t -> f̄_t. An empty entry list returns the input
  /// unchanged (same Var; exact bypass).
  TokenGrid attend(ParamCtx<S>& pc, TokenGrid x, const std::vector<EntryRef>& entries) const {
    if (entries.empty()) return x;
    Tape<S>& t = pc.tape();
    std::vector<Var> mem_parts;
    mem_parts.reserve(entries.size());
    for (const auto& e : entries) {
      int bucket = e.is_prompt ? cfg_.memory_capacity + 1
                               : std::min(std::max(e.age, 0), cfg_.memory_capacity);
      Var age_row = t.embedding_rows(pc(age_emb_), {bucket});
      mem_parts.push_back(t.add_rowvec(e.rows, age_row));
    }
    Var mem = mem_parts.size() == 1 ? mem_parts[0] : t.concat_rows(mem_parts);

    Var rows = x.rows;
    const int heads = cfg_.num_heads;
    const int hd = cfg_.memory_dim / heads;
    S inv_sqrt = static_cast<S>(1.0 / std::sqrt(static_cast<double>(hd)));
    for (const auto& layer : layers_) {
      Var q = layer.wq.fwd(pc, layer.ln_q.fwd(pc, rows));
      Var k = layer.wk.fwd(pc, mem);
      Var v = layer.wv.fwd(pc, mem);
      std::vector<Var> head_outs;
      head_outs.reserve(heads);
      for (int hh = 0; hh < heads; ++hh) {
        Var qh = t.slice_cols(q, hh * hd, hd);
        Var kh = t.slice_cols(k, hh * hd, hd);
        Var vh = t.slice_cols(v, hh * hd, hd);
        Var scores = t.scale(t.matmul_t(qh, kh), inv_sqrt);
        head_outs.push_back(t.matmul(t.softmax_rows(scores), vh));
      }
      Var merged = heads == 1 ? head_outs[0] : t.concat_cols(head_outs);
      rows = t.add(rows, layer.wo.fwd(pc, merged));
      rows = t.add(rows, layer.mlp.fwd(pc, layer.ln_mlp.fwd(pc, rows)));
    }
    return TokenGrid{rows, x.h, x.w, x.d};
  }

 private:
  static int log2_int(int v) {
    int n = 0;
    while ((1 << n) < v) ++n;
    return n;
  }

  struct Layer {
    LayerNorm<S> ln_q;
    Linear<S> wq, wk, wv, wo;
    LayerNorm<S> ln_mlp;
    Mlp<S> mlp;
  };

  ModelConfig cfg_;
  Linear<S> feat_proj_;
  std::vector<Conv2dLayer<S>> mask_convs_;
  Linear<S> mask_out_;
  std::string age_emb_;
  std::vector<Layer> layers_;
};

}  // namespace vocap
