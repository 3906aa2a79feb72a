#include "vocap/synth.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>

#include "json.hpp"

namespace vocap {

using nlohmann::json;
namespace fs = std::filesystem;

// ---- palette / naming ----------------------------------------------------------

const std::vector<PaletteColor>& color_palette() {
  static const std::vector<PaletteColor> palette = {
      {"red", 1.0f, 0.1f, 0.1f},     {"green", 0.1f, 0.8f, 0.15f},
      {"blue", 0.15f, 0.3f, 1.0f},   {"yellow", 1.0f, 0.95f, 0.1f},
      {"cyan", 0.1f, 0.95f, 0.95f},  {"magenta", 0.95f, 0.1f, 0.95f},
      {"white", 0.97f, 0.97f, 0.97f}, {"orange", 1.0f, 0.6f, 0.1f},
  };
  return palette;
}

std::string shape_name(ShapeKind s) {
  switch (s) {
    case ShapeKind::square: return "square";
    case ShapeKind::circle: return "circle";
    case ShapeKind::triangle: return "triangle";
  }
  return "?";
}

static std::string motion_segment(MotionKind m) {
  switch (m) {
    case MotionKind::left: return "moving left";
    case MotionKind::right: return "moving right";
    case MotionKind::up: return "moving up";
    case MotionKind::down: return "moving down";
    case MotionKind::still: return "staying static";
  }
  return "?";
}

std::string motion_phrase(const MotionSpec& m) {
  std::string s = motion_segment(m.first);
  if (m.second) s += " then " + motion_segment(*m.second);
  return s;
}

std::string caption_for(const SceneObject& o) {
  return "a " + std::string(color_palette()[o.color].name) + " " + shape_name(o.shape) + " " +
         motion_phrase(o.motion);
}

std::string refexp_for(const SceneObject& o) {
  return "the " + std::string(color_palette()[o.color].name) + " " + shape_name(o.shape);
}

// ---- rasterization ----------------------------------------------------------------

static void motion_velocity(MotionKind m, double speed, double& vx, double& vy) {
  vx = 0;
  vy = 0;
  switch (m) {
    case MotionKind::left: vx = -speed; break;
    case MotionKind::right: vx = speed; break;
    case MotionKind::up: vy = -speed; break;
    case MotionKind::down: vy = speed; break;
    case MotionKind::still: break;
  }
}

void object_center_at(const SceneObject& o, int frames, int t, double& cx, double& cy) {
  int mid = frames / 2;
  double v1x, v1y, v2x, v2y;
  motion_velocity(o.motion.first, o.speed, v1x, v1y);
  if (o.motion.second) {
    motion_velocity(*o.motion.second, o.speed, v2x, v2y);
  } else {
    v2x = v1x;
    v2y = v1y;
  }
  int t1 = std::min(t, mid);
  int t2 = std::max(0, t - mid);
  cx = o.cx + v1x * t1 + v2x * t2;
  cy = o.cy + v1y * t1 + v2y * t2;
}

static bool inside_shape(const SceneObject& o, double cx, double cy, double px, double py) {
  double half = o.size / 2.0;
  switch (o.shape) {
    case ShapeKind::square:
      return std::abs(px - cx) <= half && std::abs(py - cy) <= half;
    case ShapeKind::circle: {
      double dx = px - cx, dy = py - cy;
      return dx * dx + dy * dy <= half * half;
    }
    case ShapeKind::triangle: {
      // Upward-pointing triangle: apex (cx, cy-h/2), base corners at cy+h/2.
      double h = o.size * 0.866;
      double ax = cx, ay = cy - h / 2;
      double bx = cx - half, by = cy + h / 2;
      double cx2 = cx + half, cy2 = cy + h / 2;
      auto cross = [](double ox, double oy, double x1, double y1, double x2, double y2) {
        return (x1 - ox) * (y2 - oy) - (y1 - oy) * (x2 - ox);
      };
      double d1 = cross(ax, ay, bx, by, px, py);
      double d2 = cross(bx, by, cx2, cy2, px, py);
      double d3 = cross(cx2, cy2, ax, ay, px, py);
      bool neg = d1 < 0 || d2 < 0 || d3 < 0;
      bool pos = d1 > 0 || d2 > 0 || d3 > 0;
      return !(neg && pos);
    }
  }
  return false;
}

Mask rasterize_object(const SceneObject& o, int canvas, int frames, int t) {
  Mask m(canvas, canvas);
  double cx, cy;
  object_center_at(o, frames, t, cx, cy);
  double reach = o.size;  // generous bound for all shapes
  int y0 = std::max(0, static_cast<int>(std::floor(cy - reach)));
  int y1 = std::min(canvas - 1, static_cast<int>(std::ceil(cy + reach)));
  int x0 = std::max(0, static_cast<int>(std::floor(cx - reach)));
  int x1 = std::min(canvas - 1, static_cast<int>(std::ceil(cx + reach)));
  for (int y = y0; y <= y1; ++y)
    for (int x = x0; x <= x1; ++x)
      if (inside_shape(o, cx, cy, x + 0.5, y + 0.5)) m.at(y, x) = 1;
  return m;
}

static Box mask_box_normalized(const Mask& m) {
  int ymin = m.h, ymax = -1, xmin = m.w, xmax = -1;
  for (int y = 0; y < m.h; ++y)
    for (int x = 0; x < m.w; ++x)
      if (m.at(y, x)) {
        ymin = std::min(ymin, y);
        ymax = std::max(ymax, y);
        xmin = std::min(xmin, x);
        xmax = std::max(xmax, x);
      }
  if (ymax < 0) return Box{};
  return Box{static_cast<double>(xmin) / m.w, static_cast<double>(ymin) / m.h,
             static_cast<double>(xmax + 1) / m.w, static_cast<double>(ymax + 1) / m.h};
}

GeneratedVideo render_scene(const SceneSpec& scene, const std::string& video_id) {
  std::set<std::pair<int, int>> seen;
  for (const auto& o : scene.objects) {
    if (!seen.insert({o.color, static_cast<int>(o.shape)}).second)
      throw UnsatisfiableUniqueness("two objects share color and shape in " + video_id);
  }

  GeneratedVideo out;
  out.video_id = video_id;
  out.scene = scene;

  const auto& palette = color_palette();
  std::vector<std::vector<Mask>> masks(scene.objects.size());
  for (size_t i = 0; i < scene.objects.size(); ++i) {
    masks[i].reserve(scene.frames);
    for (int t = 0; t < scene.frames; ++t)
      masks[i].push_back(rasterize_object(scene.objects[i], scene.canvas, scene.frames, t));
  }

  for (int t = 0; t < scene.frames; ++t) {
    Tensor<float> frame({scene.canvas, scene.canvas, 3});
    float bg = static_cast<float>(scene.background);
    for (int64_t i = 0; i < frame.numel(); ++i) frame[i] = bg;
    for (size_t i = 0; i < scene.objects.size(); ++i) {  // later objects on top
      const PaletteColor& c = palette[scene.objects[i].color];
      const Mask& m = masks[i][t];
      for (int y = 0; y < scene.canvas; ++y)
        for (int x = 0; x < scene.canvas; ++x)
          if (m.at(y, x)) {
            frame.at(y, x, 0) = c.r;
            frame.at(y, x, 1) = c.g;
            frame.at(y, x, 2) = c.b;
          }
    }
    out.clip.frames.push_back(std::move(frame));
    out.clip.timestamps.push_back(t);
  }

  for (size_t i = 0; i < scene.objects.size(); ++i) {
    GeneratedObject obj;
    obj.spec = scene.objects[i];
    obj.object_id = "obj_" + std::to_string(i);
    obj.masklet = std::move(masks[i]);
    obj.visible_at_0 = !obj.masklet[0].empty_mask();
    if (obj.visible_at_0) obj.box0 = mask_box_normalized(obj.masklet[0]);
    obj.caption = caption_for(obj.spec);
    obj.refexp = refexp_for(obj.spec);
    out.objects.push_back(std::move(obj));
  }
  return out;
}

// ---- scene sampling -----------------------------------------------------------------

namespace {

MotionKind random_direction(Rng& rng) {
  return static_cast<MotionKind>(rng.uniform_int(0, 3));
}

MotionSpec sample_motion(const SynthDistribution& dist, Rng& rng) {
  MotionSpec m;
  if (rng.uniform() < dist.still_fraction) {
    m.first = MotionKind::still;
    if (rng.uniform() < dist.composite_fraction) m.second = random_direction(rng);
    return m;
  }
  m.first = random_direction(rng);
  if (rng.uniform() < dist.composite_fraction) {
    MotionKind second = rng.uniform() < 0.25 ? MotionKind::still : random_direction(rng);
    if (second != m.first) m.second = second;
  }
  return m;
}

struct Extent {
  double x0, x1, y0, y1;  // trajectory bounding box of the shape
};

Extent trajectory_extent(const SceneObject& o, int frames) {
  Extent e{1e9, -1e9, 1e9, -1e9};
  for (int t = 0; t < frames; ++t) {
    double cx, cy;
    object_center_at(o, frames, t, cx, cy);
    double half_w = o.size / 2;
    double half_h = o.shape == ShapeKind::triangle ? o.size * 0.433 : o.size / 2;
    e.x0 = std::min(e.x0, cx - half_w);
    e.x1 = std::max(e.x1, cx + half_w);
    e.y0 = std::min(e.y0, cy - half_h);
    e.y1 = std::max(e.y1, cy + half_h);
  }
  return e;
}

bool extents_overlap(const Extent& a, const Extent& b, double gap) {
  return !(a.x1 + gap < b.x0 || b.x1 + gap < a.x0 || a.y1 + gap < b.y0 || b.y1 + gap < a.y0);
}

}  // namespace

GeneratedVideo generate_video(const SynthDistribution& dist, uint64_t seed,
                              const std::string& video_id) {
  Rng rng(hash_combine(seed, fnv1a64(video_id)));
  SceneSpec scene;
  scene.canvas = dist.canvas;
  scene.frames = dist.frames;
  scene.background = 0.04 + rng.uniform() * 0.08;

  int n = rng.uniform_int(dist.min_objects, dist.max_objects);
  // distinct (color, shape) pairs keep referring expressions unambiguous
  std::vector<std::pair<int, int>> pairs;
  for (int c = 0; c < static_cast<int>(color_palette().size()); ++c)
    for (int s = 0; s < 3; ++s) pairs.push_back({c, s});
  if (n > static_cast<int>(pairs.size()))
    throw UnsatisfiableUniqueness("more objects than distinct color/shape pairs");
  for (int i = static_cast<int>(pairs.size()) - 1; i > 0; --i)
    std::swap(pairs[static_cast<size_t>(i)], pairs[static_cast<size_t>(rng.uniform_int(0, i))]);

  std::vector<Extent> placed;
  for (int i = 0; i < n; ++i) {
    bool ok = false;
    for (int attempt = 0; attempt < 400 && !ok; ++attempt) {
      SceneObject o;
      o.color = pairs[static_cast<size_t>(i)].first;
      o.shape = static_cast<ShapeKind>(pairs[static_cast<size_t>(i)].second);
      o.size = rng.uniform(dist.min_size, dist.max_size);
      o.motion = sample_motion(dist, rng);
      o.speed = rng.uniform(dist.min_speed, dist.max_speed);

      // Start so the whole trajectory stays in-canvas with a small margin.
      o.cx = rng.uniform(0, dist.canvas);
      o.cy = rng.uniform(0, dist.canvas);
      Extent e = trajectory_extent(o, dist.frames);
      double margin = 2.0;
      double shift_x = 0, shift_y = 0;
      if (e.x0 < margin) shift_x = margin - e.x0;
      if (e.x1 + shift_x > dist.canvas - margin) shift_x -= e.x1 + shift_x - (dist.canvas - margin);
      if (e.y0 < margin) shift_y = margin - e.y0;
      if (e.y1 + shift_y > dist.canvas - margin) shift_y -= e.y1 + shift_y - (dist.canvas - margin);
      o.cx += shift_x;
      o.cy += shift_y;
      e = trajectory_extent(o, dist.frames);
      if (e.x0 < 0 || e.y0 < 0 || e.x1 > dist.canvas || e.y1 > dist.canvas) continue;

      bool clash = false;
      for (const auto& pe : placed)
        if (extents_overlap(e, pe, 4.0)) clash = true;
      if (clash) continue;

      placed.push_back(e);
      scene.objects.push_back(o);
      ok = true;
    }
    if (!ok) throw DataError("could not place synthetic objects for " + video_id);
  }
  return render_scene(scene, video_id);
}

GeneratedVideo generate_late_entry_video(const SynthDistribution& dist, uint64_t seed,
                                         const std::string& video_id) {
  Rng rng(hash_combine(hash_combine(seed, fnv1a64(video_id)), 0x1a7eull));
  SceneSpec scene;
  scene.canvas = dist.canvas;
  scene.frames = dist.frames;
  scene.background = 0.04 + rng.uniform() * 0.08;

  // Distractor: static, visible throughout, parked in one quadrant.
  SceneObject distractor;
  distractor.color = rng.uniform_int(0, 7);
  distractor.shape = static_cast<ShapeKind>(rng.uniform_int(0, 2));
  distractor.size = rng.uniform(dist.min_size, dist.max_size * 0.8);
  distractor.motion = MotionSpec{MotionKind::still, std::nullopt};
  distractor.cx = dist.canvas * 0.25;
  distractor.cy = rng.uniform(0.3, 0.7) * dist.canvas;

  // Referred object: enters from the right edge at frame >= T/2.
  SceneObject target;
  do {
    target.color = rng.uniform_int(0, 7);
    target.shape = static_cast<ShapeKind>(rng.uniform_int(0, 2));
  } while (target.color == distractor.color && target.shape == distractor.shape);
  target.size = rng.uniform(dist.min_size, dist.max_size * 0.8);
  target.motion = MotionSpec{MotionKind::left, std::nullopt};
  target.speed = rng.uniform(std::max(2.0, dist.min_speed), dist.max_speed);
  int enter = rng.uniform_int(scene.frames / 2, scene.frames - 2);
  target.cy = rng.uniform(0.3, 0.7) * dist.canvas;
  // Position the leading edge one pixel inside the canvas at `enter`.
  target.cx = dist.canvas + target.size / 2 - 1.5 + target.speed * enter;
  target.enter_frame = enter;

  scene.objects = {distractor, target};
  GeneratedVideo video = render_scene(scene, video_id);

  // Verify the construction: empty before `enter`, visible from `enter` on.
  const auto& masklet = video.objects[1].masklet;
  int first_visible = -1;
  for (int t = 0; t < scene.frames; ++t)
    if (!masklet[static_cast<size_t>(t)].empty_mask()) {
      first_visible = t;
      break;
    }
  if (first_visible < scene.frames / 2 || first_visible < 0)
    throw InternalError("late-entry construction failed for " + video_id);
  video.objects[1].spec.enter_frame = first_visible;
  return video;
}

// ---- dataset emission -----------------------------------------------------------------

std::string route_name(TaskRoute r) {
  switch (r) {
    case TaskRoute::mask_to_text_and_masklet: return "mask_to_text_and_masklet";
    case TaskRoute::box_to_text: return "box_to_text";
    case TaskRoute::text_to_masklet: return "text_to_masklet";
    case TaskRoute::mask_to_masklet: return "mask_to_masklet";
    case TaskRoute::text_inverted_caption: return "text_inverted_caption";
  }
  return "?";
}

TaskRoute route_from_name(const std::string& name) {
  if (name == "mask_to_text_and_masklet") return TaskRoute::mask_to_text_and_masklet;
  if (name == "box_to_text") return TaskRoute::box_to_text;
  if (name == "text_to_masklet") return TaskRoute::text_to_masklet;
  if (name == "mask_to_masklet") return TaskRoute::mask_to_masklet;
  if (name == "text_inverted_caption") return TaskRoute::text_inverted_caption;
  throw ConfigError("unknown task route: " + name);
}

GenDataResult generate_synthetic_dataset(const SynthDistribution& dist, int n_videos,
                                         uint64_t seed, const std::string& out_dir,
                                         const std::string& prefix) {
  if (n_videos < 1) throw ConfigError("n_videos must be >= 1");
  fs::create_directories(fs::path(out_dir) / "frames");

  std::vector<VideoRecord> gt, sav, refvos, refcoco, vg, inverted;
  std::map<std::pair<std::string, std::string>, ObjectAttributes> attrs;
  GenDataResult result;

  int n_late = static_cast<int>(std::lround(dist.late_entry_fraction * n_videos));
  for (int v = 0; v < n_videos; ++v) {
    char idbuf[64];
    std::snprintf(idbuf, sizeof(idbuf), "%s_%05d", prefix.c_str(), v);
    std::string vid = idbuf;
    bool late = v < n_late;
    GeneratedVideo video = late ? generate_late_entry_video(dist, seed, vid)
                                : generate_video(dist, seed, vid);

    fs::path frame_dir = fs::path(out_dir) / "frames" / vid;
    fs::create_directories(frame_dir);
    std::vector<std::string> frame_paths;
    for (int t = 0; t < video.clip.frame_count(); ++t) {
      char fbuf[32];
      std::snprintf(fbuf, sizeof(fbuf), "f%03d.ppm", t);
      fs::path p = frame_dir / fbuf;
      write_ppm(p.string(), video.clip.frames[static_cast<size_t>(t)]);
      frame_paths.push_back((fs::path("frames") / vid / fbuf).string());
    }

    VideoRecord gt_rec{vid, frame_paths, {}};
    VideoRecord sav_rec{vid, frame_paths, {}};
    VideoRecord refvos_rec{vid, frame_paths, {}};
    VideoRecord refcoco_rec{vid + "__img", {frame_paths[0]}, {}};
    VideoRecord vg_rec{vid + "__vg", {frame_paths[0]}, {}};
    VideoRecord inv_rec{vid + "__inv", {frame_paths[0]}, {}};

    for (const auto& obj : video.objects) {
      ++result.n_objects;
      attrs[{vid, obj.object_id}] =
          ObjectAttributes{shape_name(obj.spec.shape), color_palette()[obj.spec.color].name,
                           motion_phrase(obj.spec.motion), obj.caption};

      ObjectAnnotation full;
      full.object_id = obj.object_id;
      full.prompt = obj.visible_at_0 ? PromptSpec::make_mask(obj.masklet[0])
                                     : PromptSpec::make_text(obj.refexp);
      full.masklet = obj.masklet;
      full.caption = obj.caption;
      gt_rec.objects.push_back(full);

      ObjectAnnotation ref;
      ref.object_id = obj.object_id;
      ref.prompt = PromptSpec::make_text(obj.refexp);
      ref.masklet = obj.masklet;
      refvos_rec.objects.push_back(ref);

      if (obj.visible_at_0) {
        ObjectAnnotation savo;
        savo.object_id = obj.object_id;
        savo.prompt = PromptSpec::make_mask(obj.masklet[0]);
        savo.masklet = obj.masklet;
        savo.caption = obj.caption;
        sav_rec.objects.push_back(savo);

        ObjectAnnotation rc;
        rc.object_id = obj.object_id;
        rc.prompt = PromptSpec::make_text(obj.refexp);
        rc.masklet = std::vector<Mask>{obj.masklet[0]};
        refcoco_rec.objects.push_back(rc);

        ObjectAnnotation vgo;
        vgo.object_id = obj.object_id;
        vgo.prompt = PromptSpec::make_box(obj.box0);
        // single-frame caption: motion is not observable in one frame
        vgo.caption = "a " + std::string(color_palette()[obj.spec.color].name) + " " +
                      shape_name(obj.spec.shape);
        vg_rec.objects.push_back(vgo);

        ObjectAnnotation inv;
        inv.object_id = obj.object_id;
        inv.prompt = PromptSpec::make_box(obj.box0);
        inv.caption = obj.refexp;  // referring text inverted into the output
        inv_rec.objects.push_back(inv);
      }
    }
    gt.push_back(std::move(gt_rec));
    sav.push_back(std::move(sav_rec));
    refvos.push_back(std::move(refvos_rec));
    if (!refcoco_rec.objects.empty()) refcoco.push_back(std::move(refcoco_rec));
    if (!vg_rec.objects.empty()) vg.push_back(std::move(vg_rec));
    if (!inv_rec.objects.empty()) inverted.push_back(std::move(inv_rec));
    ++result.n_videos;
  }

  auto emit = [&](const char* name, const std::vector<VideoRecord>& recs) {
    std::string path = (fs::path(out_dir) / name).string();
    write_dataset(path, recs);
    result.dataset_files.push_back(path);
  };
  emit("gt.jsonl", gt);
  emit("sav.jsonl", sav);
  emit("refvos.jsonl", refvos);
  emit("refcoco.jsonl", refcoco);
  emit("vg.jsonl", vg);
  emit("inverted.jsonl", inverted);
  write_attributes((fs::path(out_dir) / "attributes.jsonl").string(), attrs);
  return result;
}

// ---- contour + blur preprocessing ------------------------------------------------------

Mask dilate_disc(const Mask& mask, int radius) {
  Mask out(mask.h, mask.w);
  std::vector<std::pair<int, int>> offsets;
  for (int dy = -radius; dy <= radius; ++dy)
    for (int dx = -radius; dx <= radius; ++dx)
      if (dx * dx + dy * dy <= radius * radius) offsets.push_back({dy, dx});
  for (int y = 0; y < mask.h; ++y)
    for (int x = 0; x < mask.w; ++x) {
      if (!mask.at(y, x)) continue;
      for (auto [dy, dx] : offsets) {
        int ny = y + dy, nx = x + dx;
        if (ny >= 0 && ny < mask.h && nx >= 0 && nx < mask.w) out.at(ny, nx) = 1;
      }
    }
  return out;
}

Tensor<float> highlight_and_blur(const Tensor<float>& frame, const Mask& mask, int thickness,
                                 double sigma) {
  if (frame.rank() != 3 || frame.dim(0) != mask.h || frame.dim(1) != mask.w)
    throw ShapeMismatch("highlight_and_blur: frame/mask shapes differ");
  const int h = mask.h, w = mask.w;

  // Separable Gaussian, kernel truncated at 3 sigma, clamp-to-edge padding.
  int radius = std::max(1, static_cast<int>(std::ceil(3.0 * sigma)));
  std::vector<double> kernel(static_cast<size_t>(2 * radius + 1));
  double ksum = 0;
  for (int i = -radius; i <= radius; ++i) {
    kernel[static_cast<size_t>(i + radius)] = std::exp(-0.5 * i * i / (sigma * sigma));
    ksum += kernel[static_cast<size_t>(i + radius)];
  }
  for (double& k : kernel) k /= ksum;

  std::vector<double> tmp(static_cast<size_t>(h) * w * 3);
  auto src = [&](int y, int x, int c) {
    y = std::clamp(y, 0, h - 1);
    x = std::clamp(x, 0, w - 1);
    return static_cast<double>(frame[(static_cast<int64_t>(y) * w + x) * 3 + c]);
  };
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      for (int c = 0; c < 3; ++c) {
        double acc = 0;
        for (int i = -radius; i <= radius; ++i)
          acc += kernel[static_cast<size_t>(i + radius)] * src(y, x + i, c);
        tmp[(static_cast<size_t>(y) * w + x) * 3 + c] = acc;
      }
  auto tmp_at = [&](int y, int x, int c) {
    y = std::clamp(y, 0, h - 1);
    return tmp[(static_cast<size_t>(y) * w + x) * 3 + c];
  };

  Mask dilated = dilate_disc(mask, thickness);
  Tensor<float> out = frame.clone();
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      if (mask.at(y, x)) continue;  // interior untouched
      if (dilated.at(y, x)) {
        out.at(y, x, 0) = 1.0f;  // contour band: pure red
        out.at(y, x, 1) = 0.0f;
        out.at(y, x, 2) = 0.0f;
      } else {
        for (int c = 0; c < 3; ++c) {
          double acc = 0;
          for (int i = -radius; i <= radius; ++i)
            acc += kernel[static_cast<size_t>(i + radius)] * tmp_at(y + i, x, c);
          out.at(y, x, c) = static_cast<float>(acc);
        }
      }
    }
  return out;
}

// ---- VLM prompt / parsing ---------------------------------------------------------------

std::string build_vlm_prompt() {
  return
      "Describe the subject in the red contour in the following video.\n"
      "If the subject is a part of an object, please describe this part instead of the whole "
      "object.\n"
      "Please DO NOT DESCRIBE anything in the blurred background outside the red contour.\n"
      "First determine the subject's category ({CATEGORY}), properties ({PROPERTIES}), action "
      "({ACTION}), and then give a description in ONE sentence ({DESCRIPTION}) including "
      "category, properties, and action, etc..\n"
      "Please use this FORMAT: 'The video shows a {CATEGORY}. The subject's properties are "
      "{PROPERTIES}. The subject's action is {ACTION}. {DESCRIPTION}.'.\n"
      "The {DESCRIPTION} starts with 'A/ An {CATEGORY}' or 'A/ An {PROPERTIES} {CATEGORY}' if it "
      "is grammarly more proper to put the properties before the category.\n"
      "The category, properties, motion and the descriptions should be consistent.\n"
      "{PROPERTIES} should be about the objects appearance (color, texture, size, material, "
      "shape), what it is wearing or a functional property (e.g. fast, sharp). Please always "
      "include interesting or unexpected properties.\n"
      "If there are multiple actions happening sequentially, connect them with 'then', but do "
      "not include more than 3 actions.\n"
      "For static objects or parts, just say the {ACTION} is 'static' and it is OK to not "
      "include {ACTION} in {DESCRIPTION}.\n"
      "Please DO NOT mention the red contour in the description.\n"
      "If the subject is a person, please avoid describing the person's skin color and describe "
      "the person's clothes color instead.\n"
      "You only need to describe the details that you are certain about.\n"
      "If you cannot perform the task or you are very uncertain, please say 'I cannot perform "
      "the task for this video.'.";
}

static std::string trim(const std::string& s) {
  size_t a = s.find_first_not_of(" \t\r\n");
  if (a == std::string::npos) return "";
  size_t b = s.find_last_not_of(" \t\r\n");
  return s.substr(a, b - a + 1);
}

VlmParseOutcome parse_vlm_response(const std::string& text) {
  VlmParseOutcome out;
  std::string t = trim(text);
  if (t.find("I cannot perform the task for this video.") != std::string::npos) {
    out.kind = VlmParseOutcome::Kind::refusal;
    return out;
  }

  const std::string head_a = "The video shows a ";
  const std::string head_an = "The video shows an ";
  size_t cat_start;
  if (t.rfind(head_an, 0) == 0) {
    cat_start = head_an.size();
  } else if (t.rfind(head_a, 0) == 0) {
    cat_start = head_a.size();
  } else {
    out.message = "missing category sentence";
    return out;
  }

  const std::string props_sep = ". The subject's properties are ";
  size_t props_pos = t.find(props_sep, cat_start);
  if (props_pos == std::string::npos) {
    out.message = "missing properties sentence";
    return out;
  }
  out.fields.category = t.substr(cat_start, props_pos - cat_start);

  size_t props_start = props_pos + props_sep.size();
  const std::string action_sep = ". The subject's action is ";
  size_t action_pos = t.find(action_sep, props_start);
  if (action_pos != std::string::npos) {
    out.fields.properties = t.substr(props_start, action_pos - props_start);
    size_t action_start = action_pos + action_sep.size();
    size_t desc_pos = t.find(". ", action_start);
    if (desc_pos == std::string::npos) {
      out.message = "missing description sentence";
      return out;
    }
    out.fields.action = t.substr(action_start, desc_pos - action_start);
    out.fields.description = t.substr(desc_pos + 2);
  } else {
    // Static objects may omit the action sentence.
    size_t desc_pos = t.find(". ", props_start);
    if (desc_pos == std::string::npos) {
      out.message = "missing description sentence";
      return out;
    }
    out.fields.properties = t.substr(props_start, desc_pos - props_start);
    out.fields.action = "static";
    out.fields.description = t.substr(desc_pos + 2);
  }
  out.fields.description = trim(out.fields.description);
  if (!out.fields.description.empty() && out.fields.description.back() == '.')
    out.fields.description.pop_back();
  if (out.fields.category.empty() || out.fields.description.empty()) {
    out.message = "empty fields";
    out.kind = VlmParseOutcome::Kind::parse_error;
    return out;
  }
  out.kind = VlmParseOutcome::Kind::parsed;
  return out;
}

std::string format_vlm_response(const ObjectAttributes& attrs) {
  return "The video shows a " + attrs.category + ". The subject's properties are " +
         attrs.properties + ". The subject's action is " + attrs.action + ". " +
         attrs.description + ".";
}

// ---- clients -------------------------------------------------------------------------------

std::map<std::pair<std::string, std::string>, ObjectAttributes> read_attributes(
    const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open attributes: " + path);
  std::map<std::pair<std::string, std::string>, ObjectAttributes> out;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    json j = json::parse(line);
    ObjectAttributes a;
    a.category = j.at("category").get<std::string>();
    a.properties = j.at("properties").get<std::string>();
    a.action = j.at("action").get<std::string>();
    a.description = j.at("description").get<std::string>();
    out[{j.at("video_id").get<std::string>(), j.at("object_id").get<std::string>()}] = a;
  }
  return out;
}

void write_attributes(const std::string& path,
                      const std::map<std::pair<std::string, std::string>, ObjectAttributes>& a) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write attributes: " + path);
  for (const auto& [key, attrs] : a) {
    json j;
    j["video_id"] = key.first;
    j["object_id"] = key.second;
    j["category"] = attrs.category;
    j["properties"] = attrs.properties;
    j["action"] = attrs.action;
    j["description"] = attrs.description;
    out << j.dump() << "\n";
  }
}

ReplayVlmClient::ReplayVlmClient(const std::string& responses_path) {
  std::ifstream in(responses_path);
  if (!in) throw DataError("cannot open responses: " + responses_path);
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    json j = json::parse(line);
    responses_[{j.at("video_id").get<std::string>(), j.at("object_id").get<std::string>()}] =
        j.at("response").get<std::string>();
  }
}

std::string ReplayVlmClient::annotate(const VlmAnnotationRequest& request) {
  auto it = responses_.find({request.video_id, request.object_id});
  if (it == responses_.end())
    throw DataError("no canned response for " + request.video_id + "/" + request.object_id);
  return it->second;
}

TemplateOracleVlmClient::TemplateOracleVlmClient(const std::string& attributes_path)
    : attrs_(read_attributes(attributes_path)) {}

std::string TemplateOracleVlmClient::annotate(const VlmAnnotationRequest& request) {
  auto it = attrs_.find({request.video_id, request.object_id});
  if (it == attrs_.end())
    throw DataError("no attributes for " + request.video_id + "/" + request.object_id);
  return format_vlm_response(it->second);
}

// ---- annotate + audit -----------------------------------------------------------------------

AnnotateResult annotate_dataset(const std::string& dataset_path, const std::string& out_path,
                                VlmClient& client, const AnnotateOptions& opts) {
  std::vector<VideoRecord> records = read_dataset(dataset_path);
  std::string base_dir = dir_of(dataset_path);
  std::string prompt = build_vlm_prompt();
  AnnotateResult result;

  std::ofstream responses(out_path + ".responses.jsonl");
  if (!responses) throw DataError("cannot write responses log");

  for (auto& rec : records) {
    VideoClip clip = load_clip(rec, base_dir);
    int thickness = opts.contour_thickness > 0
                        ? opts.contour_thickness
                        : std::max(1, static_cast<int>(std::lround(3.0 * clip.width() / 512.0)));
    double sigma = opts.blur_sigma > 0 ? opts.blur_sigma : 10.0 * clip.width() / 512.0;

    for (auto& obj : rec.objects) {
      if (!obj.masklet) continue;  // nothing to highlight
      VlmAnnotationRequest req;
      req.prompt = prompt;
      req.video_id = rec.video_id;
      req.object_id = obj.object_id;
      for (int t = 0; t < clip.frame_count(); t += opts.frame_stride) {
        Tensor<float> proc = highlight_and_blur(clip.frames[static_cast<size_t>(t)],
                                                (*obj.masklet)[static_cast<size_t>(t)], thickness,
                                                sigma);
        if (!opts.processed_dir.empty()) {
          fs::path dir = fs::path(opts.processed_dir) / rec.video_id / obj.object_id;
          fs::create_directories(dir);
          char buf[32];
          std::snprintf(buf, sizeof(buf), "f%03d.ppm", t);
          write_ppm((dir / buf).string(), proc);
        }
        req.processed_frames.push_back(std::move(proc));
      }

      std::string response = client.annotate(req);
      json jr;
      jr["video_id"] = rec.video_id;
      jr["object_id"] = obj.object_id;
      jr["response"] = response;
      responses << jr.dump() << "\n";

      VlmParseOutcome parsed = parse_vlm_response(response);
      switch (parsed.kind) {
        case VlmParseOutcome::Kind::parsed:
          obj.caption = parsed.fields.description;
          ++result.annotated;
          break;
        case VlmParseOutcome::Kind::refusal:
          obj.caption.reset();
          ++result.refusals;
          break;
        case VlmParseOutcome::Kind::parse_error:
          obj.caption.reset();
          ++result.parse_errors;
          break;
      }
    }
  }
  write_dataset(out_path, records);
  return result;
}

AuditReport audit_annotations(const std::string& responses_path,
                              const std::string& attributes_path) {
  auto attrs = read_attributes(attributes_path);
  std::ifstream in(responses_path);
  if (!in) throw DataError("cannot open responses: " + responses_path);
  AuditReport report;
  std::string line;
  auto norm = [](std::string s) {
    for (char& c : s) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
    return trim(s);
  };
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    json j = json::parse(line);
    auto key = std::make_pair(j.at("video_id").get<std::string>(),
                              j.at("object_id").get<std::string>());
    auto it = attrs.find(key);
    if (it == attrs.end()) {
      ++report.missing;
      continue;
    }
    VlmParseOutcome parsed = parse_vlm_response(j.at("response").get<std::string>());
    if (parsed.kind == VlmParseOutcome::Kind::refusal) {
      ++report.refusals;
      continue;
    }
    if (parsed.kind == VlmParseOutcome::Kind::parse_error) {
      ++report.parse_errors;
      continue;
    }
    (norm(parsed.fields.category) == norm(it->second.category) ? report.category_correct
                                                               : report.category_incorrect)++;
    (norm(parsed.fields.properties) == norm(it->second.properties) ? report.properties_correct
                                                                   : report.properties_incorrect)++;
    (norm(parsed.fields.action) == norm(it->second.action) ? report.action_correct
                                                           : report.action_incorrect)++;
  }
  return report;
}

}  // namespace vocap
