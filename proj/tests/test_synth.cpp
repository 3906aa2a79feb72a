#include <filesystem>
#include <fstream>

#include "doctest.h"
#include "test_util.hpp"
#include "vocap/synth.hpp"

using namespace vocap;
namespace fs = std::filesystem;

namespace {

TEST_CASE("generator: deterministic under seed") {
  SynthDistribution dist;
  GeneratedVideo a = generate_video(dist, 0, "v0");
  GeneratedVideo b = generate_video(dist, 0, "v0");
  REQUIRE(a.objects.size() == b.objects.size());
  for (size_t i = 0; i < a.objects.size(); ++i) {
    CHECK(a.objects[i].caption == b.objects[i].caption);
    for (int t = 0; t < dist.frames; ++t)
      REQUIRE(a.objects[i].masklet[static_cast<size_t>(t)] ==
              b.objects[i].masklet[static_cast<size_t>(t)]);
  }
  for (int t = 0; t < dist.frames; ++t)
    REQUIRE(bitwise_equal(a.clip.frames[static_cast<size_t>(t)],
                          b.clip.frames[static_cast<size_t>(t)]));

  GeneratedVideo c = generate_video(dist, 1, "v0");
  bool any_diff = false;
  for (int t = 0; t < dist.frames && !any_diff; ++t)
    any_diff = !bitwise_equal(a.clip.frames[static_cast<size_t>(t)],
                              c.clip.frames[static_cast<size_t>(t)]);
  CHECK(any_diff);
}

TEST_CASE("generator: masks equal an independent rasterization") {
  SynthDistribution dist;
  GeneratedVideo v = generate_video(dist, 7, "v7");
  for (const auto& obj : v.objects) {
    for (int t = 0; t < dist.frames; ++t) {
      // independent oracle: re-derive center, then pointwise inside tests
      double cx, cy;
      object_center_at(obj.spec, dist.frames, t, cx, cy);
      const Mask& m = obj.masklet[static_cast<size_t>(t)];
      Mask oracle(dist.canvas, dist.canvas);
      for (int y = 0; y < dist.canvas; ++y)
        for (int x = 0; x < dist.canvas; ++x) {
          double px = x + 0.5, py = y + 0.5;
          bool inside = false;
          double half = obj.spec.size / 2;
          if (obj.spec.shape == ShapeKind::square) {
            inside = std::abs(px - cx) <= half && std::abs(py - cy) <= half;
          } else if (obj.spec.shape == ShapeKind::circle) {
            inside = (px - cx) * (px - cx) + (py - cy) * (py - cy) <= half * half;
          } else {
            double h = obj.spec.size * 0.866;
            double ax = cx, ay = cy - h / 2, bx = cx - half, by = cy + h / 2, qx = cx + half,
                   qy = cy + h / 2;
            auto cross = [](double ox, double oy, double x1, double y1, double x2, double y2) {
              return (x1 - ox) * (y2 - oy) - (y1 - oy) * (x2 - ox);
            };
            double d1 = cross(ax, ay, bx, by, px, py);
            double d2 = cross(bx, by, qx, qy, px, py);
            double d3 = cross(qx, qy, ax, ay, px, py);
            inside = !((d1 < 0 || d2 < 0 || d3 < 0) && (d1 > 0 || d2 > 0 || d3 > 0));
          }
          oracle.at(y, x) = inside ? 1 : 0;
        }
      REQUIRE(m == oracle);
    }
  }
}

TEST_CASE("generator: caption templates") {
  SceneObject still;
  still.shape = ShapeKind::square;
  still.color = 0;
  still.motion = {MotionKind::still, std::nullopt};
  CHECK(caption_for(still) == "a red square staying static");
  CHECK(caption_for(still).find("static") != std::string::npos);

  SceneObject comp;
  comp.shape = ShapeKind::circle;
  comp.color = 2;
  comp.motion = {MotionKind::left, MotionKind::up};
  CHECK(caption_for(comp) == "a blue circle moving left then moving up");
  CHECK(refexp_for(comp) == "the blue circle");
}

TEST_CASE("generator: uniqueness violation raises") {
  SceneSpec scene;
  scene.objects.resize(2);
  scene.objects[0].shape = ShapeKind::square;
  scene.objects[0].color = 0;
  scene.objects[0].cx = 30;
  scene.objects[0].cy = 30;
  scene.objects[1].shape = ShapeKind::square;
  scene.objects[1].color = 0;
  scene.objects[1].cx = 90;
  scene.objects[1].cy = 90;
  CHECK_THROWS_AS(render_scene(scene, "dup"), UnsatisfiableUniqueness);
}

TEST_CASE("generator: late-entry videos enter at or after T/2") {
  SynthDistribution dist;
  for (uint64_t s = 0; s < 5; ++s) {
    GeneratedVideo v = generate_late_entry_video(dist, s, "late" + std::to_string(s));
    const auto& target = v.objects[1];
    int first = -1;
    for (int t = 0; t < dist.frames; ++t)
      if (!target.masklet[static_cast<size_t>(t)].empty_mask()) {
        first = t;
        break;
      }
    REQUIRE(first >= dist.frames / 2);
    // distractor visible from the start
    CHECK(!v.objects[0].masklet[0].empty_mask());
  }
}

TEST_CASE("highlight_and_blur: interior, contour, and far background") {
  Rng rng(11);
  Tensor<float> frame({48, 48, 3});
  rng.fill_uniform(frame, 0.0, 1.0);
  Mask mask(48, 48);
  for (int y = 18; y < 30; ++y)
    for (int x = 18; x < 30; ++x) mask.at(y, x) = 1;

  int thickness = 2;
  double sigma = 1.5;
  Tensor<float> out = highlight_and_blur(frame, mask, thickness, sigma);

  // interior pixels identical to input
  for (int y = 18; y < 30; ++y)
    for (int x = 18; x < 30; ++x)
      for (int c = 0; c < 3; ++c) REQUIRE(out.at(y, x, c) == frame.at(y, x, c));

  // contour band exactly pure red
  Mask dil = dilate_disc(mask, thickness);
  int band_pixels = 0;
  for (int y = 0; y < 48; ++y)
    for (int x = 0; x < 48; ++x)
      if (dil.at(y, x) && !mask.at(y, x)) {
        ++band_pixels;
        REQUIRE(out.at(y, x, 0) == 1.0f);
        REQUIRE(out.at(y, x, 1) == 0.0f);
        REQUIRE(out.at(y, x, 2) == 0.0f);
      }
  CHECK(band_pixels > 0);

  // a far-background pixel equals an independent direct 2-D Gaussian blur
  int radius = static_cast<int>(std::ceil(3.0 * sigma));
  auto direct_blur = [&](int y, int x, int c) {
    double acc = 0, wsum = 0;
    for (int dy = -radius; dy <= radius; ++dy)
      for (int dx = -radius; dx <= radius; ++dx) {
        double w = std::exp(-0.5 * (dy * dy + dx * dx) / (sigma * sigma));
        int yy = std::clamp(y + dy, 0, 47);
        int xx = std::clamp(x + dx, 0, 47);
        acc += w * frame.at(yy, xx, c);
        wsum += w;
      }
    return acc / wsum;
  };
  for (auto [y, x] : std::vector<std::pair<int, int>>{{5, 5}, {40, 8}, {44, 44}, {2, 30}}) {
    for (int c = 0; c < 3; ++c) {
      REQUIRE(std::abs(out.at(y, x, c) - direct_blur(y, x, c)) < 1e-6);
    }
  }

  // idempotence on the interior
  Tensor<float> again = highlight_and_blur(out, mask, thickness, sigma);
  for (int y = 18; y < 30; ++y)
    for (int x = 18; x < 30; ++x)
      for (int c = 0; c < 3; ++c) REQUIRE(again.at(y, x, c) == frame.at(y, x, c));
}

TEST_CASE("vlm prompt: byte-stable with the required clauses") {
  std::string p1 = build_vlm_prompt();
  std::string p2 = build_vlm_prompt();
  CHECK(p1 == p2);
  CHECK(p1.find("DO NOT DESCRIBE") != std::string::npos);
  CHECK(p1.find("Please use this FORMAT: 'The video shows a {CATEGORY}. The subject's properties "
                "are {PROPERTIES}. The subject's action is {ACTION}. {DESCRIPTION}.'") !=
        std::string::npos);
  CHECK(p1.find("I cannot perform the task for this video.") != std::string::npos);
}

TEST_CASE("vlm parse: format grammar, refusal, static omission") {
  auto ok = parse_vlm_response(
      "The video shows a square. The subject's properties are red. The subject's action is "
      "moving left. a red square moving left.");
  REQUIRE(ok.kind == VlmParseOutcome::Kind::parsed);
  CHECK(ok.fields.category == "square");
  CHECK(ok.fields.properties == "red");
  CHECK(ok.fields.action == "moving left");
  CHECK(ok.fields.description == "a red square moving left");

  auto refusal = parse_vlm_response("I cannot perform the task for this video.");
  CHECK(refusal.kind == VlmParseOutcome::Kind::refusal);

  auto no_action = parse_vlm_response(
      "The video shows a rock. The subject's properties are gray. A gray rock.");
  REQUIRE(no_action.kind == VlmParseOutcome::Kind::parsed);
  CHECK(no_action.fields.action == "static");
  CHECK(no_action.fields.description == "A gray rock");

  auto bad = parse_vlm_response("This text does not follow the format at all.");
  CHECK(bad.kind == VlmParseOutcome::Kind::parse_error);

  // format -> parse round-trips the four fields
  ObjectAttributes attrs{"circle", "blue", "moving up", "a blue circle moving up"};
  auto rt = parse_vlm_response(format_vlm_response(attrs));
  REQUIRE(rt.kind == VlmParseOutcome::Kind::parsed);
  CHECK(rt.fields.category == attrs.category);
  CHECK(rt.fields.properties == attrs.properties);
  CHECK(rt.fields.action == attrs.action);
  CHECK(rt.fields.description == attrs.description);
}

TEST_CASE("gen-data + annotate + audit round trip") {
  std::string dir = "/tmp/vocap_test_synth";
  fs::remove_all(dir);
  SynthDistribution dist;
  dist.min_objects = 1;
  dist.max_objects = 2;
  GenDataResult gen = generate_synthetic_dataset(dist, 3, 123, dir);
  CHECK(gen.n_videos == 3);
  CHECK(!gen.dataset_files.empty());

  // determinism: regenerate into another directory, byte-compare one dataset
  std::string dir2 = "/tmp/vocap_test_synth2";
  fs::remove_all(dir2);
  generate_synthetic_dataset(dist, 3, 123, dir2);
  auto slurp = [](const std::string& p) {
    std::ifstream f(p);
    return std::string((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  };
  CHECK(slurp(dir + "/sav.jsonl") == slurp(dir2 + "/sav.jsonl"));
  CHECK(slurp(dir + "/frames/vid_00000/f000.ppm") == slurp(dir2 + "/frames/vid_00000/f000.ppm"));

  // dataset io round trip
  auto records = read_dataset(dir + "/sav.jsonl");
  REQUIRE(!records.empty());
  std::string round = dir + "/sav_rt.jsonl";
  write_dataset(round, records);
  auto records2 = read_dataset(round);
  REQUIRE(records2.size() == records.size());
  CHECK(records2[0].video_id == records[0].video_id);
  REQUIRE(records2[0].objects.size() == records[0].objects.size());
  for (size_t i = 0; i < records[0].objects.size(); ++i) {
    REQUIRE(records2[0].objects[i].masklet.has_value());
    CHECK(*records2[0].objects[i].masklet == *records[0].objects[i].masklet);
    CHECK(records2[0].objects[i].caption == records[0].objects[i].caption);
  }

  // annotate with the template oracle: captions reproduce the GT templates
  TemplateOracleVlmClient oracle(dir + "/attributes.jsonl");
  AnnotateOptions opts;
  AnnotateResult ares = annotate_dataset(dir + "/sav.jsonl", dir + "/sav_annotated.jsonl", oracle,
                                         opts);
  CHECK(ares.parse_errors == 0);
  CHECK(ares.refusals == 0);
  CHECK(ares.annotated > 0);
  auto annotated = read_dataset(dir + "/sav_annotated.jsonl");
  auto original = read_dataset(dir + "/sav.jsonl");
  for (size_t r = 0; r < annotated.size(); ++r)
    for (size_t o = 0; o < annotated[r].objects.size(); ++o)
      CHECK(*annotated[r].objects[o].caption == *original[r].objects[o].caption);

  // audit: oracle responses agree with the attributes everywhere
  AuditReport audit = audit_annotations(dir + "/sav_annotated.jsonl.responses.jsonl",
                                        dir + "/attributes.jsonl");
  CHECK(audit.category_incorrect == 0);
  CHECK(audit.properties_incorrect == 0);
  CHECK(audit.action_incorrect == 0);
  CHECK(audit.category_correct == ares.annotated);
}

TEST_CASE("ppm round trip") {
  Tensor<float> img({5, 7, 3});
  Rng rng(5);
  rng.fill_uniform(img, 0.0, 1.0);
  write_ppm("/tmp/vocap_test.ppm", img);
  Tensor<float> back = read_ppm("/tmp/vocap_test.ppm");
  REQUIRE(back.shape() == img.shape());
  for (int64_t i = 0; i < img.numel(); ++i) CHECK(std::abs(back[i] - img[i]) <= 0.5f / 255.0f);
}

}  // namespace
