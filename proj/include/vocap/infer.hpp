#pragma once

#include <algorithm>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "vocap/model.hpp"

namespace vocap {

/// Frame features held as plain tensors so they can be cached across tapes.
template <typename S>
struct FrameFeaturesPlain {
  Tensor<S> base_rows;
  Tensor<S> pyr2x, pyr4x;
  int gh = 0, gw = 0;
};

/// Plain memory entry stored between frames of one tracked object.
template <typename S>
using PlainMemoryBank = MemoryBankT<Tensor<S>>;

/// Streaming inference: one session per object, frames strictly in order,
/// memory updated after every processed frame with that frame's prediction.
template <typename S>
class InferenceEngine {
 public:
  struct Options {
    int caption_stride = 1;          // decode captions on every k-th frame
    double appearance_threshold = 0.5;
  };

  explicit InferenceEngine(const VoCapModel<S>& model, Options options = {})
      : model_(&model), opts_(options) {}

  FrameFeaturesPlain<S> encode_frame(const Tensor<float>& frame) const {
    Tape<S> t;
    ParamCtx<S> pc(t, model_->params(), false);
    auto ff = model_->backbone().encode_frame(pc, model_->frame_leaf(t, frame));
    FrameFeaturesPlain<S> out;
    out.base_rows = t.val(ff.base.rows).clone();
    out.pyr2x = t.val(ff.pyr2x.v).clone();
    out.pyr4x = t.val(ff.pyr4x.v).clone();
    out.gh = ff.base.h;
    out.gw = ff.base.w;
    return out;
  }

  /// Online streaming inference over the whole clip.
  ObjectResult infer_online(const VideoClip& clip, const PromptSpec& prompt) const {
    validate_prompt(prompt, clip);
    std::vector<FrameFeaturesPlain<S>> features;
    features.reserve(clip.frames.size());
    for (const auto& f : clip.frames) features.push_back(encode_frame(f));
    std::vector<int> order(clip.frames.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);
    return run_sequence(features, order, prompt, clip.height(), clip.width());
  }

  struct FindTrackDebug {
    std::vector<double> stage1_iou;
    int anchor = -1;
  };

  /// FindTrack: score every frame independently with the text prompt, anchor
  /// at the best self-estimated mask, then propagate the anchor mask forward
  /// and backward with independent memory banks. Frame features are computed
  /// once and shared by all three passes.
  ObjectResult infer_findtrack(const VideoClip& clip, const PromptSpec& prompt,
                               FindTrackDebug* debug = nullptr) const {
    if (prompt.kind != PromptKind::text)
      throw RouteMismatch("findtrack requires a text prompt");
    validate_prompt(prompt, clip);
    const int T = clip.frame_count();
    std::vector<FrameFeaturesPlain<S>> features;
    features.reserve(static_cast<size_t>(T));
    for (const auto& f : clip.frames) features.push_back(encode_frame(f));

    // Stage 1: single-frame path (empty memory) on every frame.
    std::vector<double> ious(static_cast<size_t>(T));
    int anchor = 0;
    Tensor<S> anchor_logits;
    for (int t = 0; t < T; ++t) {
      StepResult r = run_step(features[static_cast<size_t>(t)], {}, 0, &prompt.text, nullptr,
                              nullptr, false, clip.height(), clip.width());
      ious[static_cast<size_t>(t)] = r.iou;
      if (t == 0 || r.iou > ious[static_cast<size_t>(anchor)]) {
        anchor = t;
        anchor_logits = r.logits;
      }
    }
    if (debug) {
      debug->stage1_iou = ious;
      debug->anchor = anchor;
    }
    Mask anchor_mask = binarize(anchor_logits);

    // Stages 2-3: propagate in both directions, seeding each with the anchor
    // mask as a mask prompt; the directions never share memory state.
    PromptSpec seed = PromptSpec::make_mask(anchor_mask);
    std::vector<int> fwd, bwd;
    for (int t = anchor; t < T; ++t) fwd.push_back(t);
    for (int t = anchor; t >= 0; --t) bwd.push_back(t);
    ObjectResult fres = run_sequence(features, fwd, seed, clip.height(), clip.width());
    ObjectResult bres = run_sequence(features, bwd, seed, clip.height(), clip.width());

    ObjectResult out;
    out.masklet.masks.resize(static_cast<size_t>(T));
    out.masklet.appearance.resize(static_cast<size_t>(T));
    out.masklet.iou_estimates.resize(static_cast<size_t>(T));
    out.frame_captions.resize(static_cast<size_t>(T));
    for (int t = 0; t < T; ++t) {
      const ObjectResult& src = t >= anchor ? fres : bres;
      int pos = t >= anchor ? t - anchor : anchor - t;
      out.masklet.masks[static_cast<size_t>(t)] = src.masklet.masks[static_cast<size_t>(pos)];
      out.masklet.appearance[static_cast<size_t>(t)] =
          src.masklet.appearance[static_cast<size_t>(pos)];
      out.masklet.iou_estimates[static_cast<size_t>(t)] =
          src.masklet.iou_estimates[static_cast<size_t>(pos)];
      out.frame_captions[static_cast<size_t>(t)] = src.frame_captions[static_cast<size_t>(pos)];
    }
    out.caption = aggregate_captions(out.frame_captions, out.masklet.appearance);
    return out;
  }

  /// Keep captions from frames where the object appears and return the most
  /// common one; ties resolve to the earliest-appearing caption; all-absent
  /// tracks caption to the empty string.
  static std::string aggregate_captions(const std::vector<std::string>& frame_captions,
                                        const std::vector<uint8_t>& appearance) {
    if (frame_captions.size() != appearance.size())
      throw LengthMismatch("aggregate_captions: input lengths differ");
    std::map<std::string, int> counts;
    std::vector<std::string> first_seen_order;
    for (size_t t = 0; t < frame_captions.size(); ++t) {
      if (!appearance[t]) continue;
      if (counts[frame_captions[t]]++ == 0) first_seen_order.push_back(frame_captions[t]);
    }
    std::string best;
    int best_count = 0;
    for (const auto& cap : first_seen_order) {
      if (counts[cap] > best_count) {
        best = cap;
        best_count = counts[cap];
      }
    }
    return best;
  }

  Mask binarize(const Tensor<S>& logits) const {
    Mask m(logits.dim(0), logits.dim(1));
    for (int64_t i = 0; i < logits.numel(); ++i) m.v[static_cast<size_t>(i)] = logits[i] > 0;
    return m;
  }

 private:
  struct StepResult {
    Tensor<S> logits;
    double appearance_prob = 0;
    double iou = 0;
    Tensor<S> memory_entry;
    std::string caption;
  };

  /// One frame on its own tape. Memory entries arrive as plain tensors with
  /// their ages; sparse/dense prompt sources apply to this frame only.
  StepResult run_step(const FrameFeaturesPlain<S>& ff,
                      const std::vector<typename PlainMemoryBank<S>::Item>& bank_items,
                      int step_index, const std::string* text, const Box* box, const Mask* mask,
                      bool want_caption, int out_h, int out_w) const {
    Tape<S> t;
    ParamCtx<S> pc(t, model_->params(), false);

    TokenGrid base{t.constant(ff.base_rows), ff.gh, ff.gw, model_->config().embed_dim};
    ImageVar pyr2x{t.constant(ff.pyr2x), ff.gh * 2, ff.gw * 2, model_->config().embed_dim / 2};
    ImageVar pyr4x{t.constant(ff.pyr4x), ff.gh * 4, ff.gw * 4, model_->config().embed_dim / 4};

    std::vector<typename MemorySystem<S>::EntryRef> entries;
    entries.reserve(bank_items.size());
    for (const auto& item : bank_items)
      entries.push_back({t.constant(item.payload), step_index - item.frame_index, item.is_prompt});
    TokenGrid fbar = model_->memory().attend(pc, base, entries);

    Var dense = mask ? model_->prompts().encode_mask(pc, *mask)
                     : model_->prompts().no_mask_dense(pc, ff.gh * ff.gw);
    std::optional<Var> sparse;
    if (text) sparse = model_->prompts().encode_text(pc, model_->text(), *text);
    if (box) sparse = model_->prompts().encode_box(pc, *box);

    TokenGrid fused{t.add(fbar.rows, dense), ff.gh, ff.gw, model_->config().embed_dim};
    DecoderOut dec = model_->decoder().decode(pc, fused, sparse, pyr2x, pyr4x, out_h, out_w);

    StepResult out;
    out.logits = t.val(dec.mask_logits).clone();
    out.appearance_prob =
        1.0 / (1.0 + std::exp(-static_cast<double>(t.val(dec.appearance_logit)[0])));
    out.iou = static_cast<double>(t.val(dec.iou_estimate)[0]);

    Var probs = t.sigmoid(dec.mask_logits);
    out.memory_entry = t.val(model_->memory().encode_memory(pc, base.rows, probs)).clone();

    if (want_caption) {
      Var chat = model_->caption().extract(pc, fused, sparse);
      out.caption = ByteTokenizer::decode(model_->text().greedy_decode(
          model_->params(), t.val(chat), model_->config().max_text_len));
    }
    return out;
  }

  /// Runs the online loop over frame indices `order` (a contiguous ascending
  /// or descending range). The prompt applies to the first processed frame;
  /// text prompts are re-fed on every frame.
  ObjectResult run_sequence(const std::vector<FrameFeaturesPlain<S>>& features,
                            const std::vector<int>& order, const PromptSpec& prompt, int out_h,
                            int out_w) const {
    const int n = static_cast<int>(order.size());
    PlainMemoryBank<S> bank(model_->config().memory_capacity);
    ObjectResult result;
    result.masklet.masks.resize(static_cast<size_t>(n));
    result.masklet.appearance.resize(static_cast<size_t>(n));
    result.masklet.iou_estimates.resize(static_cast<size_t>(n));
    result.frame_captions.resize(static_cast<size_t>(n));
    std::vector<uint8_t> caption_decoded;
    caption_decoded.reserve(static_cast<size_t>(n));

    for (int i = 0; i < n; ++i) {
      const std::string* text = prompt.kind == PromptKind::text ? &prompt.text : nullptr;
      const Box* box = (prompt.kind == PromptKind::box && i == 0) ? &prompt.box : nullptr;
      const Mask* mask = (prompt.kind == PromptKind::mask && i == 0) ? &prompt.mask : nullptr;
      bool want_caption = opts_.caption_stride <= 1 || i % opts_.caption_stride == 0;

      StepResult r = run_step(features[static_cast<size_t>(order[static_cast<size_t>(i)])],
                              bank.items(), i, text, box, mask, want_caption, out_h, out_w);

      bool visible = r.appearance_prob > opts_.appearance_threshold;
      Mask bin = binarize(r.logits);
      result.masklet.masks[static_cast<size_t>(i)] = visible ? bin : Mask(out_h, out_w);
      result.masklet.appearance[static_cast<size_t>(i)] = visible ? 1 : 0;
      result.masklet.iou_estimates[static_cast<size_t>(i)] = r.iou;
      result.frame_captions[static_cast<size_t>(i)] = r.caption;
      caption_decoded.push_back(want_caption ? 1 : 0);

      bank.push(std::move(r.memory_entry), i, i == 0);
    }
    // Frames skipped by the caption stride do not vote in the aggregation.
    std::vector<uint8_t> votes = result.masklet.appearance;
    for (size_t i = 0; i < votes.size(); ++i)
      if (!caption_decoded[i]) votes[i] = 0;
    result.caption = aggregate_captions(result.frame_captions, votes);
    return result;
  }

  const VoCapModel<S>* model_;
  Options opts_;
};

}  // namespace vocap
