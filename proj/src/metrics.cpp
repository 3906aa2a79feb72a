#include "vocap/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <unordered_map>

namespace vocap {

double iou_frame(const Mask& pred, const Mask& gt) {
  if (!pred.same_shape(gt)) throw ShapeMismatch("iou_frame");
  int64_t inter = 0, uni = 0;
  for (size_t i = 0; i < pred.v.size(); ++i) {
    bool p = pred.v[i] != 0, g = gt.v[i] != 0;
    inter += p && g;
    uni += p || g;
  }
  if (uni == 0) return 1.0;  // both empty
  return static_cast<double>(inter) / static_cast<double>(uni);
}

double region_j(const std::vector<Mask>& pred, const std::vector<Mask>& gt) {
  if (pred.size() != gt.size()) throw LengthMismatch("region_j: frame counts differ");
  if (pred.empty()) throw LengthMismatch("region_j: empty masklet");
  double sum = 0;
  for (size_t t = 0; t < pred.size(); ++t) sum += iou_frame(pred[t], gt[t]);
  return sum / static_cast<double>(pred.size());
}

double region_j(const Masklet& pred, const Masklet& gt) { return region_j(pred.masks, gt.masks); }

Mask boundary_pixels(const Mask& mask) {
  Mask b(mask.h, mask.w);
  for (int y = 0; y < mask.h; ++y)
    for (int x = 0; x < mask.w; ++x) {
      if (!mask.at(y, x)) continue;
      bool edge = y == 0 || y == mask.h - 1 || x == 0 || x == mask.w - 1 ||
                  !mask.at(y - 1, x) || !mask.at(y + 1, x) || !mask.at(y, x - 1) ||
                  !mask.at(y, x + 1);
      if (edge) b.at(y, x) = 1;
    }
  return b;
}

double boundary_f_frame(const Mask& pred, const Mask& gt, double tolerance_frac) {
  if (!pred.same_shape(gt)) throw ShapeMismatch("boundary_f_frame");
  Mask pb = boundary_pixels(pred);
  Mask gb = boundary_pixels(gt);
  int64_t np = pb.area(), ng = gb.area();
  if (np == 0 && ng == 0) return 1.0;
  if (np == 0 || ng == 0) return 0.0;

  int radius = static_cast<int>(
      std::ceil(tolerance_frac * std::sqrt(static_cast<double>(pred.h) * pred.h +
                                           static_cast<double>(pred.w) * pred.w)));
  // Disc dilation implements "matched within tolerance" for both directions.
  auto count_matched = [radius](const Mask& a, const Mask& b) {
    int64_t matched = 0;
    for (int y = 0; y < a.h; ++y)
      for (int x = 0; x < a.w; ++x) {
        if (!a.at(y, x)) continue;
        bool hit = false;
        for (int dy = -radius; dy <= radius && !hit; ++dy) {
          int ny = y + dy;
          if (ny < 0 || ny >= a.h) continue;
          for (int dx = -radius; dx <= radius; ++dx) {
            int nx = x + dx;
            if (nx < 0 || nx >= a.w) continue;
            if (dx * dx + dy * dy > radius * radius) continue;
            if (b.at(ny, nx)) {
              hit = true;
              break;
            }
          }
        }
        matched += hit;
      }
    return matched;
  };
  double precision = static_cast<double>(count_matched(pb, gb)) / static_cast<double>(np);
  double recall = static_cast<double>(count_matched(gb, pb)) / static_cast<double>(ng);
  if (precision + recall == 0) return 0.0;
  return 2.0 * precision * recall / (precision + recall);
}

double boundary_f(const std::vector<Mask>& pred, const std::vector<Mask>& gt,
                  double tolerance_frac) {
  if (pred.size() != gt.size()) throw LengthMismatch("boundary_f: frame counts differ");
  if (pred.empty()) throw LengthMismatch("boundary_f: empty masklet");
  double sum = 0;
  for (size_t t = 0; t < pred.size(); ++t) sum += boundary_f_frame(pred[t], gt[t], tolerance_frac);
  return sum / static_cast<double>(pred.size());
}

std::vector<std::string> cider_tokenize(const std::string& text) {
  std::vector<std::string> tokens;
  std::string cur;
  for (char ch : text) {
    unsigned char c = static_cast<unsigned char>(ch);
    if (std::isalnum(c)) {
      cur.push_back(static_cast<char>(std::tolower(c)));
    } else {
      if (!cur.empty()) tokens.push_back(cur);
      cur.clear();
    }
  }
  if (!cur.empty()) tokens.push_back(cur);
  return tokens;
}

namespace {

constexpr int kMaxN = 4;
using NgramCounts = std::unordered_map<std::string, int>;

/// N-gram counts keyed by the joined token string, one map per n.
std::array<NgramCounts, kMaxN> ngram_counts(const std::vector<std::string>& tokens) {
  std::array<NgramCounts, kMaxN> out;
  for (int n = 1; n <= kMaxN; ++n) {
    for (int i = 0; i + n <= static_cast<int>(tokens.size()); ++i) {
      std::string key = tokens[static_cast<size_t>(i)];
      for (int j = 1; j < n; ++j) key += " " + tokens[static_cast<size_t>(i + j)];
      out[static_cast<size_t>(n - 1)][key] += 1;
    }
  }
  return out;
}

}  // namespace

double cider_d(const std::map<std::string, std::string>& candidates,
               const std::map<std::string, std::vector<std::string>>& references,
               double sigma) {
  for (const auto& [id, cand] : candidates) {
    auto it = references.find(id);
    if (it == references.end() || it->second.empty())
      throw MissingReference("no references for id " + id);
  }
  const double log_n = std::log(static_cast<double>(candidates.size()));

  // Document frequency: an n-gram counts once per id if any reference uses it.
  std::array<NgramCounts, kMaxN> df;
  for (const auto& [id, cand] : candidates) {
    std::array<NgramCounts, kMaxN> seen;
    for (const auto& ref : references.at(id)) {
      auto counts = ngram_counts(cider_tokenize(ref));
      for (int n = 0; n < kMaxN; ++n)
        for (const auto& [ngram, c] : counts[static_cast<size_t>(n)])
          seen[static_cast<size_t>(n)][ngram] = 1;
    }
    for (int n = 0; n < kMaxN; ++n)
      for (const auto& [ngram, one] : seen[static_cast<size_t>(n)])
        df[static_cast<size_t>(n)][ngram] += 1;
  }

  struct Vec {
    std::array<std::unordered_map<std::string, double>, kMaxN> w;
    std::array<double, kMaxN> norm{};
    int length = 0;
  };
  auto to_vec = [&](const std::vector<std::string>& tokens) {
    Vec v;
    v.length = static_cast<int>(tokens.size());
    auto counts = ngram_counts(tokens);
    for (int n = 0; n < kMaxN; ++n) {
      double sq = 0;
      for (const auto& [ngram, c] : counts[static_cast<size_t>(n)]) {
        auto it = df[static_cast<size_t>(n)].find(ngram);
        double dfc = it == df[static_cast<size_t>(n)].end() ? 0.0 : it->second;
        double idf = log_n - std::log(std::max(1.0, dfc));
        double wgt = c * idf;
        v.w[static_cast<size_t>(n)][ngram] = wgt;
        sq += wgt * wgt;
      }
      v.norm[static_cast<size_t>(n)] = std::sqrt(sq);
    }
    return v;
  };

  double total = 0;
  for (const auto& [id, cand] : candidates) {
    Vec hv = to_vec(cider_tokenize(cand));
    std::array<double, kMaxN> acc{};
    const auto& refs = references.at(id);
    for (const auto& ref : refs) {
      Vec rv = to_vec(cider_tokenize(ref));
      double delta = static_cast<double>(hv.length - rv.length);
      double penalty = std::exp(-delta * delta / (2.0 * sigma * sigma));
      for (int n = 0; n < kMaxN; ++n) {
        double dot = 0;
        for (const auto& [ngram, hw] : hv.w[static_cast<size_t>(n)]) {
          auto it = rv.w[static_cast<size_t>(n)].find(ngram);
          if (it == rv.w[static_cast<size_t>(n)].end()) continue;
          dot += std::min(hw, it->second) * it->second;  // clipped (CIDEr-D)
        }
        double denom = hv.norm[static_cast<size_t>(n)] * rv.norm[static_cast<size_t>(n)];
        if (denom > 0) acc[static_cast<size_t>(n)] += penalty * dot / denom;
      }
    }
    double id_score = 0;
    for (int n = 0; n < kMaxN; ++n)
      id_score += acc[static_cast<size_t>(n)] / static_cast<double>(refs.size());
    id_score /= kMaxN;
    total += 10.0 * id_score;
  }
  return total / static_cast<double>(candidates.size());
}

double caption_exact_match(const std::map<std::string, std::string>& candidates,
                           const std::map<std::string, std::vector<std::string>>& references) {
  if (candidates.empty()) return 0.0;
  int hits = 0;
  for (const auto& [id, cand] : candidates) {
    auto it = references.find(id);
    if (it == references.end()) throw MissingReference("no references for id " + id);
    for (const auto& ref : it->second)
      if (ref == cand) {
        ++hits;
        break;
      }
  }
  return static_cast<double>(hits) / static_cast<double>(candidates.size());
}

}  // namespace vocap
