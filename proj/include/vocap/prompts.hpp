#pragma once

#include <optional>
#include <string>
#include <vector>

#include "vocap/domain.hpp"
#include "vocap/model_config.hpp"
#include "vocap/nn.hpp"
#include "vocap/text_stack.hpp"

namespace vocap {

/// Sinusoidal encoding of a normalized 2-D point into d dims; wavelengths are
/// powers of two over the unit interval, half the dims for x and half for y.
template <typename S>
Tensor<S> sinusoidal_point_encoding(double x, double y, int d) {
  Tensor<S> out({1, d});
  int quarter = d / 4;
  for (int i = 0; i < quarter; ++i) {
    double freq = 2.0 * M_PI * static_cast<double>(1 << i);
    out[2 * i] = static_cast<S>(std::sin(freq * x));
    out[2 * i + 1] = static_cast<S>(std::cos(freq * x));
    out[d / 2 + 2 * i] = static_cast<S>(std::sin(freq * y));
    out[d / 2 + 2 * i + 1] = static_cast<S>(std::cos(freq * y));
  }
  return out;
}

/// Projects box, mask, and text prompts into the decoder embedding spaces:
/// sparse tokens [n, d] and dense grids [h*w, d].
template <typename S>
class PromptEncoders {
 public:
  PromptEncoders() = default;
  PromptEncoders(ParamStore<S>& ps, const ModelConfig& cfg)
      : cfg_(cfg), corner_emb_("prompts/corner_emb"), no_mask_emb_("prompts/no_mask_emb") {
    ps.add(corner_emb_, {2, cfg.embed_dim}, ParamStore<S>::Init::normal, 0.02);
    ps.add(no_mask_emb_, {1, cfg.embed_dim}, ParamStore<S>::Init::normal, 0.02);
    int steps = 0;
    while ((1 << steps) < cfg.patch_size) ++steps;
    int c_in = 1;
    int c_out = 8;
    for (int i = 0; i < steps; ++i) {
      mask_convs_.emplace_back(ps, "prompts/mask_conv" + std::to_string(i), 3, 3, c_in, c_out, 2,
                               1);
      c_in = c_out;
      c_out = std::min(2 * c_out, cfg.embed_dim);
    }
    mask_out_ = Linear<S>(ps, "prompts/mask_out", c_in, cfg.embed_dim);
    text_dim_match_ = Linear<S>(ps, "prompts/text_dim_match", cfg.embed_dim, cfg.embed_dim);
  }

  /// Two corner tokens: sinusoidal position encoding plus a learned
  /// corner-type embedding. Shape [2, d].
  Var encode_box(ParamCtx<S>& pc, const Box& box) const {
    if (!(box.x_min < box.x_max) || !(box.y_min < box.y_max))
      throw DegenerateBox("box must have positive area");
    Tape<S>& t = pc.tape();
    Tensor<S> pe({2, cfg_.embed_dim});
    Tensor<S> tl = sinusoidal_point_encoding<S>(box.x_min, box.y_min, cfg_.embed_dim);
    Tensor<S> br = sinusoidal_point_encoding<S>(box.x_max, box.y_max, cfg_.embed_dim);
    for (int j = 0; j < cfg_.embed_dim; ++j) {
      pe.at(0, j) = tl[j];
      pe.at(1, j) = br[j];
    }
    return t.add(t.constant(pe), t.embedding_rows(pc(corner_emb_), {0, 1}));
  }

  /// Dense embedding of a binary mask prompt at clip resolution -> [h*w, d].
  Var encode_mask(ParamCtx<S>& pc, const Mask& mask) const {
    Tape<S>& t = pc.tape();
    Tensor<S> m({mask.h, mask.w});
    for (int64_t i = 0; i < m.numel(); ++i) m[i] = static_cast<S>(mask.v[i]);
    return encode_mask_var(pc, t.constant(m));
  }

  /// Same dense encoder applied to an on-tape [H,W] map (used when seeding
  /// propagation from predicted masks).
  Var encode_mask_var(ParamCtx<S>& pc, Var mask_hw) const {
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

  /// Learned "no mask prompt" dense embedding broadcast over the grid.
  Var no_mask_dense(ParamCtx<S>& pc, int grid_cells) const {
    return pc.tape().broadcast_row(pc(no_mask_emb_), grid_cells);
  }

  /// Text prompt -> sparse embedding [n, d], n = byte count. Runs the shared
  /// text stack bidirectionally and applies the dimension-matching layer.
  Var encode_text(ParamCtx<S>& pc, const SharedTextStack<S>& stack, const std::string& text) const {
    if (text.empty()) throw EmptyText("text prompt must be non-empty");
    if (static_cast<int>(text.size()) > cfg_.max_text_len)
      throw TextTooLong("text prompt exceeds max_text_len");
    std::vector<int> ids = ByteTokenizer::encode(text);
    return text_dim_match_.fwd(pc, stack.encode(pc, ids));
  }

 private:
  ModelConfig cfg_;
  std::string corner_emb_, no_mask_emb_;
  std::vector<Conv2dLayer<S>> mask_convs_;
  Linear<S> mask_out_;
  Linear<S> text_dim_match_;
};

}  // namespace vocap
