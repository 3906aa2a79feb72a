#include <cmath>

#include "doctest.h"
#include "test_util.hpp"
#include "vocap/metrics.hpp"

using namespace vocap;

namespace {

Mask random_mask(int h, int w, double density, Rng& rng) {
  Mask m(h, w);
  for (auto& b : m.v) b = rng.uniform() < density ? 1 : 0;
  return m;
}

Mask rect_mask(int h, int w, int y0, int x0, int y1, int x1) {
  Mask m(h, w);
  for (int y = y0; y < y1; ++y)
    for (int x = x0; x < x1; ++x) m.at(y, x) = 1;
  return m;
}

TEST_CASE("region J: fixed cases and brute-force oracle") {
  Mask a = rect_mask(16, 16, 2, 2, 10, 10);
  CHECK(iou_frame(a, a) == 1.0);

  Mask b = rect_mask(16, 16, 12, 12, 16, 16);
  CHECK(iou_frame(a, b) == 0.0);  // disjoint non-empty

  Mask e1(16, 16), e2(16, 16);
  CHECK(iou_frame(e1, e2) == 1.0);  // both empty

  Rng rng(3);
  for (int it = 0; it < 100; ++it) {
    Mask p = random_mask(16, 16, rng.uniform(), rng);
    Mask g = random_mask(16, 16, rng.uniform(), rng);
    // independent pixel-count oracle
    int inter = 0, uni = 0;
    for (int y = 0; y < 16; ++y)
      for (int x = 0; x < 16; ++x) {
        inter += p.at(y, x) && g.at(y, x);
        uni += p.at(y, x) || g.at(y, x);
      }
    double expected = uni == 0 ? 1.0 : static_cast<double>(inter) / uni;
    REQUIRE(iou_frame(p, g) == expected);
  }

  // symmetry and range
  Rng rng2(4);
  for (int it = 0; it < 50; ++it) {
    Mask p = random_mask(12, 12, 0.4, rng2);
    Mask g = random_mask(12, 12, 0.4, rng2);
    double j1 = iou_frame(p, g), j2 = iou_frame(g, p);
    REQUIRE(j1 == j2);
    REQUIRE(j1 >= 0.0);
    REQUIRE(j1 <= 1.0);
  }
}

// Direct reference for F: brute-force pairwise distance matching.
double boundary_f_reference(const Mask& pred, const Mask& gt, double tol_frac) {
  auto boundary = [](const Mask& m) {
    std::vector<std::pair<int, int>> pts;
    for (int y = 0; y < m.h; ++y)
      for (int x = 0; x < m.w; ++x) {
        if (!m.at(y, x)) continue;
        bool edge = y == 0 || y == m.h - 1 || x == 0 || x == m.w - 1 || !m.at(y - 1, x) ||
                    !m.at(y + 1, x) || !m.at(y, x - 1) || !m.at(y, x + 1);
        if (edge) pts.push_back({y, x});
      }
    return pts;
  };
  auto pb = boundary(pred);
  auto gb = boundary(gt);
  if (pb.empty() && gb.empty()) return 1.0;
  if (pb.empty() || gb.empty()) return 0.0;
  double diag = std::sqrt(static_cast<double>(pred.h) * pred.h +
                          static_cast<double>(pred.w) * pred.w);
  double r = std::ceil(tol_frac * diag);
  double r2 = r * r;
  auto matched = [&](const std::vector<std::pair<int, int>>& a,
                     const std::vector<std::pair<int, int>>& b) {
    int count = 0;
    for (auto [ya, xa] : a) {
      bool hit = false;
      for (auto [yb, xb] : b) {
        double dy = ya - yb, dx = xa - xb;
        if (dy * dy + dx * dx <= r2) {
          hit = true;
          break;
        }
      }
      count += hit;
    }
    return count;
  };
  double precision = static_cast<double>(matched(pb, gb)) / pb.size();
  double recall = static_cast<double>(matched(gb, pb)) / gb.size();
  if (precision + recall == 0) return 0.0;
  return 2 * precision * recall / (precision + recall);
}

TEST_CASE("boundary F: fixed cases") {
  Mask a = rect_mask(128, 128, 30, 30, 80, 80);
  CHECK(boundary_f_frame(a, a) == 1.0);

  // 1-px shift stays within the default tolerance at 128x128
  Mask shifted = rect_mask(128, 128, 31, 31, 81, 81);
  CHECK(boundary_f_frame(shifted, a) == 1.0);

  // far shift: no matches
  Mask far = rect_mask(128, 128, 100, 100, 120, 120);
  CHECK(boundary_f_frame(far, a) == 0.0);

  Mask e1(64, 64), e2(64, 64);
  CHECK(boundary_f_frame(e1, e2) == 1.0);
  CHECK(boundary_f_frame(a, Mask(128, 128)) == 0.0);
}

TEST_CASE("boundary F: matches the pairwise-distance reference") {
  Rng rng(9);
  for (int it = 0; it < 40; ++it) {
    Mask p = random_mask(24, 24, rng.uniform(0.1, 0.6), rng);
    Mask g = random_mask(24, 24, rng.uniform(0.1, 0.6), rng);
    double impl = boundary_f_frame(p, g);
    double ref = boundary_f_reference(p, g, 0.008);
    REQUIRE(std::abs(impl - ref) < 1e-12);
    // symmetry
    REQUIRE(std::abs(boundary_f_frame(p, g) - boundary_f_frame(g, p)) < 1e-12);
  }
}

TEST_CASE("cider-d: idf vanishes on a single-document corpus") {
  std::map<std::string, std::string> cands{{"x", "a red square"}};
  std::map<std::string, std::vector<std::string>> refs{{"x", {"a red square"}}};
  CHECK(cider_d(cands, refs) == doctest::Approx(0.0).epsilon(1e-12));
}

TEST_CASE("cider-d: frozen values from an independent tf-idf computation") {
  {
    std::map<std::string, std::string> cands{
        {"a", "a red square moving left"},
        {"b", "a blue circle staying static"},
        {"c", "a green triangle moving up then down"},
    };
    std::map<std::string, std::vector<std::string>> refs{
        {"a", {"a red square moving left", "the red square goes left"}},
        {"b", {"a blue circle staying still"}},
        {"c", {"a green triangle moving up then down"}},
    };
    CHECK(std::abs(cider_d(cands, refs) - 7.642050846929) < 1e-9);
  }
  {
    // two-item corpus, one exact match + one disjoint candidate -> exactly 5
    std::map<std::string, std::string> cands{{"p", "one two three four"},
                                             {"q", "alpha beta gamma delta"}};
    std::map<std::string, std::vector<std::string>> refs{{"p", {"one two three four"}},
                                                         {"q", {"five six seven eight"}}};
    CHECK(std::abs(cider_d(cands, refs) - 5.0) < 1e-12);
  }
}

TEST_CASE("cider-d: invariances and errors") {
  std::map<std::string, std::string> cands{{"a", "red square"}, {"b", "blue circle"}};
  std::map<std::string, std::vector<std::string>> refs{
      {"a", {"red square", "crimson square"}}, {"b", {"blue circle"}}};
  double base = cider_d(cands, refs);

  std::map<std::string, std::vector<std::string>> refs_swapped{
      {"a", {"crimson square", "red square"}}, {"b", {"blue circle"}}};
  CHECK(cider_d(cands, refs_swapped) == doctest::Approx(base).epsilon(1e-12));

  std::map<std::string, std::vector<std::string>> missing{{"a", {"red square"}}};
  CHECK_THROWS_AS(cider_d(cands, missing), MissingReference);

  // tokenization: case and punctuation insensitive
  std::map<std::string, std::string> cands2{{"a", "Red, square!"}, {"b", "blue circle"}};
  CHECK(cider_d(cands2, refs) == doctest::Approx(base).epsilon(1e-12));

  // empty candidate scores zero for its id
  std::map<std::string, std::string> cands3{{"a", ""}, {"b", "blue circle"}};
  double with_empty = cider_d(cands3, refs);
  CHECK(with_empty < base);
}

TEST_CASE("caption exact match") {
  std::map<std::string, std::string> cands{{"a", "x y"}, {"b", "z"}};
  std::map<std::string, std::vector<std::string>> refs{{"a", {"x y"}}, {"b", {"w"}}};
  CHECK(caption_exact_match(cands, refs) == 0.5);
}

}  // namespace
