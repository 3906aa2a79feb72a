#pragma once

#include <vector>

#include "vocap/model_config.hpp"
#include "vocap/nn.hpp"

namespace vocap {

/// Per-frame features: base grid [h*w, d] plus a two-level convolutional
/// upsampling pyramid at 2x and 4x resolution (channels d/2 and d/4).
struct FrameFeaturesVar {
  TokenGrid base;
  ImageVar pyr2x;
  ImageVar pyr4x;
};

/// Patch-transformer frame encoder. Frames never exchange information; the
/// clip entry point only batches the projections for throughput.
template <typename S>
class VisualBackbone {
 public:
  VisualBackbone() = default;
  VisualBackbone(ParamStore<S>& ps, const ModelConfig& cfg)
      : cfg_(cfg),
        patch_embed_(ps, "backbone/patch_embed", cfg.patch_size * cfg.patch_size * 3,
                     cfg.embed_dim),
        pos_(  "backbone/pos_emb"),
        ln_final_(ps, "backbone/ln_final", cfg.embed_dim),
        up2x_(ps, "backbone/pyr_up2x", 2, cfg.embed_dim, cfg.embed_dim / 2, 2),
        up4x_(ps, "backbone/pyr_up4x", 2, cfg.embed_dim / 2, cfg.embed_dim / 4, 2) {
    ps.add(pos_, {cfg.grid() * cfg.grid(), cfg.embed_dim}, ParamStore<S>::Init::normal, 0.02);
    for (int i = 0; i < cfg.depth; ++i)
      blocks_.emplace_back(ps, "backbone/block" + std::to_string(i), cfg.embed_dim,
                           cfg.num_heads, cfg.embed_dim * cfg.mlp_ratio);
  }

  /// Encode one frame [H,W,3]. H and W must be divisible by patch_size and no
  /// larger than the configured input size.
  FrameFeaturesVar encode_frame(ParamCtx<S>& pc, Var frame) const {
    return encode_clip(pc, {frame})[0];
  }

  /// Encode a clip; projections run batched across frames, attention runs
  /// per frame (block-diagonal), so outputs match per-frame encoding.
  std::vector<FrameFeaturesVar> encode_clip(ParamCtx<S>& pc, const std::vector<Var>& frames) const {
    if (frames.empty()) throw ShapeMismatch("encode_clip: empty clip");
    Tape<S>& t = pc.tape();
    const int T = static_cast<int>(frames.size());
    const int d = cfg_.embed_dim;
    int gh = 0, gw = 0;
    std::vector<Var> tokens;
    tokens.reserve(T);
    for (Var f : frames) {
      const Tensor<S>& vf = t.val(f);
      if (vf.rank() != 3 || vf.dim(2) != 3) throw ShapeMismatch("frame must be HxWx3");
      if (vf.dim(0) % cfg_.patch_size != 0 || vf.dim(1) % cfg_.patch_size != 0)
        throw IndivisibleShape("frame size not divisible by patch size");
      int fgh = vf.dim(0) / cfg_.patch_size, fgw = vf.dim(1) / cfg_.patch_size;
      if (gh == 0) {
        gh = fgh;
        gw = fgw;
      } else if (gh != fgh || gw != fgw) {
        throw ShapeMismatch("clip frames must share one resolution");
      }
      if (fgh > cfg_.grid() || fgw > cfg_.grid())
        throw IndivisibleShape("frame larger than configured input size");
      tokens.push_back(t.extract_patches(f, cfg_.patch_size));
    }
    const int n = gh * gw;

    Var x = T == 1 ? tokens[0] : t.concat_rows(tokens);
    x = patch_embed_.fwd(pc, x);

    // Top-left sub-grid of the learned positional table.
    std::vector<int> pos_ids;
    pos_ids.reserve(static_cast<size_t>(T) * n);
    for (int f = 0; f < T; ++f)
      for (int i = 0; i < gh; ++i)
        for (int j = 0; j < gw; ++j) pos_ids.push_back(i * cfg_.grid() + j);
    x = t.add(x, t.embedding_rows(pc(pos_), pos_ids));

    for (const auto& b : blocks_) x = block_fwd_framewise(pc, b, x, T, n);
    x = ln_final_.fwd(pc, x);

    std::vector<FrameFeaturesVar> out;
    out.reserve(T);
    for (int f = 0; f < T; ++f) {
      FrameFeaturesVar ff;
      ff.base = TokenGrid{t.slice_rows(x, f * n, n), gh, gw, d};
      Var grid = t.reshape(ff.base.rows, {gh, gw, d});
      Var p2 = up2x_.fwd(pc, grid);
      ff.pyr2x = ImageVar{p2, gh * 2, gw * 2, d / 2};
      Var p4 = up4x_.fwd(pc, t.gelu(p2));
      ff.pyr4x = ImageVar{p4, gh * 4, gw * 4, d / 4};
      out.push_back(std::move(ff));
    }
    return out;
  }

  const ModelConfig& config() const { return cfg_; }

 private:
  /// Pre-LN block with per-frame attention over stacked rows [T*n, d].
  Var block_fwd_framewise(ParamCtx<S>& pc, const TransformerBlock<S>& b, Var x, int T,
                          int n) const {
    Tape<S>& t = pc.tape();
    Var h = b.ln1.fwd(pc, x);
    Var q = b.attn.wq.fwd(pc, h);
    Var k = b.attn.wk.fwd(pc, h);
    Var v = b.attn.wv.fwd(pc, h);
    const int heads = b.attn.n_heads;
    const int hd = b.attn.head_dim;
    S inv_sqrt = static_cast<S>(1.0 / std::sqrt(static_cast<double>(hd)));
    std::vector<Var> frame_outs;
    frame_outs.reserve(T);
    for (int f = 0; f < T; ++f) {
      std::vector<Var> head_outs;
      head_outs.reserve(heads);
      Var qf = t.slice_rows(q, f * n, n);
      Var kf = t.slice_rows(k, f * n, n);
      Var vf = t.slice_rows(v, f * n, n);
      for (int hh = 0; hh < heads; ++hh) {
        Var qh = t.slice_cols(qf, hh * hd, hd);
        Var kh = t.slice_cols(kf, hh * hd, hd);
        Var vh = t.slice_cols(vf, hh * hd, hd);
        Var scores = t.scale(t.matmul_t(qh, kh), inv_sqrt);
        head_outs.push_back(t.matmul(t.softmax_rows(scores), vh));
      }
      frame_outs.push_back(heads == 1 ? head_outs[0] : t.concat_cols(head_outs));
    }
    Var merged = T == 1 ? frame_outs[0] : t.concat_rows(frame_outs);
    x = t.add(x, b.attn.wo.fwd(pc, merged));
    x = t.add(x, b.mlp.fwd(pc, b.ln2.fwd(pc, x)));
    return x;
  }

  ModelConfig cfg_;
  Linear<S> patch_embed_;
  std::string pos_;
  std::vector<TransformerBlock<S>> blocks_;
  LayerNorm<S> ln_final_;
  ConvTranspose2dLayer<S> up2x_, up4x_;
};

}  // namespace vocap
