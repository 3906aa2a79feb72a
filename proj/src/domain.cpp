#include "vocap/domain.hpp"

#include <charconv>

namespace vocap {

void VideoClip::validate() const {
  if (frames.empty()) throw ShapeMismatch("clip must contain at least one frame");
  int h = frames[0].dim(0), w = frames[0].dim(1);
  for (const auto& f : frames) {
    if (f.rank() != 3 || f.dim(2) != 3) throw ShapeMismatch("frame must be HxWx3");
    if (f.dim(0) != h || f.dim(1) != w) throw ShapeMismatch("frames must share one resolution");
    for (int64_t i = 0; i < f.numel(); ++i)
      if (f[i] < 0.0f || f[i] > 1.0f) throw DataError("frame intensities must lie in [0,1]");
  }
}

void Masklet::validate() const {
  size_t t = masks.size();
  if (appearance.size() != t || iou_estimates.size() != t)
    throw LengthMismatch("masklet fields must have equal length");
  for (double e : iou_estimates)
    if (e < 0.0 || e > 1.0) throw DataError("iou estimate outside [0,1]");
}

void validate_prompt(const PromptSpec& prompt, const VideoClip& clip) {
  switch (prompt.kind) {
    case PromptKind::box: {
      const Box& b = prompt.box;
      if (!(b.x_min < b.x_max) || !(b.y_min < b.y_max))
        throw DegenerateBox("box must have positive area");
      if (b.x_min < 0 || b.y_min < 0 || b.x_max > 1 || b.y_max > 1)
        throw DataError("box coordinates must be normalized to [0,1]");
      break;
    }
    case PromptKind::mask:
      if (prompt.mask.h != clip.height() || prompt.mask.w != clip.width())
        throw ShapeMismatch("mask prompt shape must equal clip shape");
      break;
    case PromptKind::text:
      if (prompt.text.empty()) throw EmptyText("text prompt must be non-empty");
      break;
  }
}

std::string rle_encode(const Mask& mask) {
  std::string out;
  int64_t total = static_cast<int64_t>(mask.h) * mask.w;
  uint8_t current = 0;  // scan starts in the zero-run
  int64_t run = 0;
  auto emit = [&out](int64_t n) {
    if (!out.empty()) out.push_back(',');
    out += std::to_string(n);
  };
  for (int64_t i = 0; i < total; ++i) {
    uint8_t bit = mask.v[i] ? 1 : 0;
    if (bit == current) {
      ++run;
    } else {
      emit(run);
      current = bit;
      run = 1;
    }
  }
  emit(run);
  return out;
}

Mask rle_decode(const std::string& rle, int h, int w) {
  Mask mask(h, w);
  int64_t total = static_cast<int64_t>(h) * w;
  int64_t pos = 0;
  uint8_t bit = 0;
  const char* p = rle.data();
  const char* end = rle.data() + rle.size();
  while (p < end) {
    int64_t run = 0;
    auto [next, ec] = std::from_chars(p, end, run);
    if (ec != std::errc() || run < 0) throw MalformedRLE("bad run count in '" + rle + "'");
    if (pos + run > total) throw MalformedRLE("runs exceed mask size");
    if (bit)
      std::fill(mask.v.begin() + pos, mask.v.begin() + pos + run, uint8_t(1));
    pos += run;
    bit ^= 1;
    p = next;
    if (p < end) {
      if (*p != ',') throw MalformedRLE("expected ',' separator");
      ++p;
      if (p == end) throw MalformedRLE("trailing separator");
    }
  }
  if (pos != total) throw MalformedRLE("runs do not cover mask");
  return mask;
}

}  // namespace vocap
