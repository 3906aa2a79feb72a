#pragma once

#include <map>
#include <string>
#include <vector>

#include "vocap/domain.hpp"

namespace vocap {

/// Per-frame intersection-over-union; both masks empty counts as 1.0.
double iou_frame(const Mask& pred, const Mask& gt);

/// Region similarity J: mean IoU over frames.
double region_j(const Masklet& pred, const Masklet& gt);
double region_j(const std::vector<Mask>& pred, const std::vector<Mask>& gt);

/// 1-px boundary of a mask: mask pixels with a 4-neighbor outside the mask
/// (image border counts as outside).
Mask boundary_pixels(const Mask& mask);

/// Boundary measure F at a pixel tolerance of ceil(tolerance_frac * image
/// diagonal): precision/recall of boundary pixels matched across the two
/// boundaries within that Euclidean distance, F = 2PR/(P+R). Both boundaries
/// empty scores 1; single-sided empty scores 0.
double boundary_f_frame(const Mask& pred, const Mask& gt, double tolerance_frac = 0.008);
double boundary_f(const std::vector<Mask>& pred, const std::vector<Mask>& gt,
                  double tolerance_frac = 0.008);

inline double jf_score(double j, double f) { return 0.5 * (j + f); }

/// CIDEr-D: tf-idf weighted n-gram (1..4) cosine similarity with clipped
/// counts and a Gaussian length penalty (sigma tokens), corpus-level idf,
/// scaled by 10. Tokenization lowercases, strips punctuation, splits on
/// whitespace. Throws MissingReference when a candidate id has no references.
double cider_d(const std::map<std::string, std::string>& candidates,
               const std::map<std::string, std::vector<std::string>>& references,
               double sigma = 6.0);

std::vector<std::string> cider_tokenize(const std::string& text);

/// Fraction of ids whose candidate equals any reference byte-for-byte.
double caption_exact_match(const std::map<std::string, std::string>& candidates,
                           const std::map<std::string, std::vector<std::string>>& references);

struct ObjectScore {
  std::string video_id;
  std::string object_id;
  double j = 0, f = 0, jf = 0;
};

struct EvalReport {
  std::vector<ObjectScore> per_object;
  double mean_j = 0, mean_f = 0, mean_jf = 0;
  double cider = 0;
  double exact_match = 0;
  int n_objects = 0;
  int n_captioned = 0;
};

}  // namespace vocap
