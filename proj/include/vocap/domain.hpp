#pragma once

#include <string>
#include <vector>

#include "vocap/common.hpp"
#include "vocap/tensor.hpp"

namespace vocap {

/// Binary H x W mask, row-major.
struct Mask {
  int h = 0, w = 0;
  std::vector<uint8_t> v;

  Mask() = default;
  Mask(int h_, int w_) : h(h_), w(w_), v(static_cast<size_t>(h_) * w_, 0) {}

  uint8_t& at(int y, int x) { return v[static_cast<size_t>(y) * w + x]; }
  uint8_t at(int y, int x) const { return v[static_cast<size_t>(y) * w + x]; }
  int64_t area() const {
    int64_t n = 0;
    for (uint8_t b : v) n += b != 0;
    return n;
  }
  bool empty_mask() const { return area() == 0; }
  bool same_shape(const Mask& o) const { return h == o.h && w == o.w; }
  bool operator==(const Mask& o) const { return h == o.h && w == o.w && v == o.v; }
};

/// A video as per-frame [H,W,3] float tensors with values in [0,1]; images are
/// single-frame clips.
struct VideoClip {
  std::vector<Tensor<float>> frames;
  std::vector<double> timestamps;

  int frame_count() const { return static_cast<int>(frames.size()); }
  int height() const { return frames.empty() ? 0 : frames[0].dim(0); }
  int width() const { return frames.empty() ? 0 : frames[0].dim(1); }

  void validate() const;

  /// Clip containing the first k frames (shared frame buffers).
  VideoClip prefix(int k) const {
    VideoClip c;
    c.frames.assign(frames.begin(), frames.begin() + k);
    if (!timestamps.empty()) c.timestamps.assign(timestamps.begin(), timestamps.begin() + k);
    return c;
  }
};

/// Box normalized to [0,1] in both axes.
struct Box {
  double x_min = 0, y_min = 0, x_max = 0, y_max = 0;
};

enum class PromptKind { box, mask, text };

/// Tagged union of the three prompt modalities; exactly one payload is
/// meaningful, matching `kind`.
struct PromptSpec {
  PromptKind kind = PromptKind::box;
  Box box;
  Mask mask;
  std::string text;

  static PromptSpec make_box(Box b) {
    PromptSpec p;
    p.kind = PromptKind::box;
    p.box = b;
    return p;
  }
  static PromptSpec make_mask(Mask m) {
    PromptSpec p;
    p.kind = PromptKind::mask;
    p.mask = std::move(m);
    return p;
  }
  static PromptSpec make_text(std::string t) {
    PromptSpec p;
    p.kind = PromptKind::text;
    p.text = std::move(t);
    return p;
  }
};

/// Spatio-temporal mask with per-frame appearance flags and IoU estimates.
struct Masklet {
  std::vector<Mask> masks;
  std::vector<uint8_t> appearance;
  std::vector<double> iou_estimates;

  int frame_count() const { return static_cast<int>(masks.size()); }
  void validate() const;
};

struct ObjectResult {
  Masklet masklet;
  std::string caption;
  std::vector<std::string> frame_captions;
};

/// Throws ShapeMismatch / DegenerateBox / EmptyText when the prompt violates
/// its typed invariants against the clip.
void validate_prompt(const PromptSpec& prompt, const VideoClip& clip);

/// Run-length codec: row-major scan, comma-separated run lengths, alternating
/// and starting with the zero-run ("4" = 2x2 zeros, "0,4" = 2x2 ones).
std::string rle_encode(const Mask& mask);
Mask rle_decode(const std::string& rle, int h, int w);

}  // namespace vocap
