#pragma once

#include <optional>

#include "vocap/backbone.hpp"
#include "vocap/model_config.hpp"
#include "vocap/nn.hpp"

namespace vocap {

/// Per-frame decoder output on a tape.
struct DecoderOut {
  Var mask_logits;       // [H, W]
  Var appearance_logit;  // [1, 1]
  Var iou_estimate;      // [1, 1], sigmoid-bounded
  Var object_token;      // [1, d]
};

/// Two-way cross-attention between [sparse prompt; mask token] and the
/// memory-conditioned image features; emits mask logits via upsampling
/// convolutions fused with the backbone pyramid and a final dot-product,
/// plus appearance and IoU heads read from the object token.
template <typename S>
class MaskDecoder {
 public:
  MaskDecoder() = default;
  MaskDecoder(ParamStore<S>& ps, const ModelConfig& cfg)
      : cfg_(cfg),
        mask_token_("decoder/mask_token"),
        transformer_(ps, "decoder/twoway", cfg.embed_dim, cfg.num_heads,
                     cfg.embed_dim * cfg.mlp_ratio, cfg.decoder_blocks),
        up1_(ps, "decoder/up1", 2, cfg.embed_dim, cfg.embed_dim / 2, 2),
        up2_(ps, "decoder/up2", 2, cfg.embed_dim / 2, cfg.embed_dim / 4, 2),
        hyper_(ps, "decoder/hyper", cfg.embed_dim, cfg.embed_dim / 4),
        iou_head_(ps, "decoder/iou", cfg.embed_dim, cfg.embed_dim / 2),
        iou_out_(ps, "decoder/iou_out", cfg.embed_dim / 2, 1),
        app_head_(ps, "decoder/app", cfg.embed_dim, cfg.embed_dim / 2),
        app_out_(ps, "decoder/app_out", cfg.embed_dim / 2, 1) {
    ps.add(mask_token_, {1, cfg.embed_dim}, ParamStore<S>::Init::normal, 0.02);
  }

  /// `fused` is f̄_t + dense prompt embedding; `sparse` holds n prompt tokens
  /// (std::nullopt when the prompt contributes no sparse tokens).
  DecoderOut decode(ParamCtx<S>& pc, const TokenGrid& fused, std::optional<Var> sparse,
                    const ImageVar& pyr2x, const ImageVar& pyr4x, int out_h, int out_w) const {
    Tape<S>& t = pc.tape();
    if (t.val(fused.rows).cols_flat() != cfg_.embed_dim)
      throw ShapeMismatch("decoder: feature width != embed_dim");

    Var tokens = sparse ? t.concat_rows({*sparse, pc(mask_token_)})
                        : pc(mask_token_);
    auto [tok_out, img_out] = transformer_.fwd(pc, tokens, fused.rows);
    int n_tokens = t.val(tok_out).rows_flat();
    Var obj = t.slice_rows(tok_out, n_tokens - 1, 1);

    Var img = t.reshape(img_out, {fused.h, fused.w, cfg_.embed_dim});
    Var u1 = t.add(up1_.fwd(pc, img), pyr2x.v);
    Var u2 = t.add(up2_.fwd(pc, t.gelu(u1)), pyr4x.v);
    Var hi = t.gelu(u2);
    int uh = fused.h * 4, uw = fused.w * 4;
    Var hi_rows = t.reshape(hi, {uh * uw, cfg_.embed_dim / 4});
    Var weights = hyper_.fwd(pc, obj);  // [1, d/4]
    Var logits = t.reshape(t.matmul_t(hi_rows, weights), {uh, uw});
    int factor = cfg_.patch_size / 4;
    if (factor > 1) logits = t.upsample_bilinear(logits, factor);
    if (t.val(logits).dim(0) != out_h || t.val(logits).dim(1) != out_w)
      throw ShapeMismatch("decoder: output resolution mismatch");

    DecoderOut out;
    out.mask_logits = logits;
    out.object_token = obj;
    out.appearance_logit = app_out_.fwd(pc, t.gelu(app_head_.fwd(pc, obj)));
    out.iou_estimate = t.sigmoid(iou_out_.fwd(pc, t.gelu(iou_head_.fwd(pc, obj))));
    return out;
  }

 private:
  ModelConfig cfg_;
  std::string mask_token_;
  TwoWayTransformer<S> transformer_;
  ConvTranspose2dLayer<S> up1_, up2_;
  Linear<S> hyper_;
  Linear<S> iou_head_, iou_out_, app_head_, app_out_;
};

/// Text feature extractor: learned caption tokens cross-attend with the
/// prompt-conditioned image features; only the caption-token outputs are kept.
template <typename S>
class CaptionExtractor {
 public:
  CaptionExtractor() = default;
  CaptionExtractor(ParamStore<S>& ps, const ModelConfig& cfg)
      : cfg_(cfg),
        caption_tokens_("caption/tokens"),
        transformer_(ps, "caption/twoway", cfg.embed_dim, cfg.num_heads,
                     cfg.embed_dim * cfg.mlp_ratio, cfg.decoder_blocks) {
    ps.add(caption_tokens_, {cfg.caption_tokens, cfg.embed_dim}, ParamStore<S>::Init::normal,
           0.02);
  }

  /// Returns ĉ, shape [l, d]; the image- and prompt-side outputs are dropped.
  Var extract(ParamCtx<S>& pc, const TokenGrid& fused, std::optional<Var> sparse) const {
    Tape<S>& t = pc.tape();
    Var cap = pc(caption_tokens_);
    Var tokens = sparse ? t.concat_rows({*sparse, cap}) : cap;
    auto [tok_out, img_out] = transformer_.fwd(pc, tokens, fused.rows);
    (void)img_out;
    int n_tokens = t.val(tok_out).rows_flat();
    return t.slice_rows(tok_out, n_tokens - cfg_.caption_tokens, cfg_.caption_tokens);
  }

 private:
  ModelConfig cfg_;
  std::string caption_tokens_;
  TwoWayTransformer<S> transformer_;
};

}  // namespace vocap
