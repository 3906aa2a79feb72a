#pragma once

#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "vocap/dataset.hpp"
#include "vocap/domain.hpp"
#include "vocap/rng.hpp"

namespace vocap {

// ---- synthetic moving-shapes generator ---------------------------------------

enum class ShapeKind { square, circle, triangle };
enum class MotionKind { left, right, up, down, still };

/// A motion segment sequence; a second segment makes a "then" composite.
struct MotionSpec {
  MotionKind first = MotionKind::still;
  std::optional<MotionKind> second;
};

struct SceneObject {
  ShapeKind shape = ShapeKind::square;
  int color = 0;  // palette index
  double size = 24;
  double cx = 64, cy = 64;  // center at frame 0
  MotionSpec motion;
  double speed = 2.0;  // px per frame
  int enter_frame = 0;  // first frame with any visible pixels (late entries)
};

struct SceneSpec {
  int canvas = 128;
  int frames = 8;
  double background = 0.08;
  std::vector<SceneObject> objects;
};

/// Distribution the dataset generator samples scenes from.
struct SynthDistribution {
  int canvas = 128;
  int frames = 8;
  int min_objects = 2;
  int max_objects = 2;
  double min_size = 28;
  double max_size = 52;
  double still_fraction = 0.15;
  double composite_fraction = 0.15;
  double late_entry_fraction = 0.0;  // objects entering at frame >= frames/2
  double min_speed = 2.0;
  double max_speed = 3.5;
};

struct PaletteColor {
  const char* name;
  float r, g, b;
};
const std::vector<PaletteColor>& color_palette();  // 8 named colors

std::string shape_name(ShapeKind s);
std::string motion_phrase(const MotionSpec& m);  // "moving left then staying static" ...
std::string caption_for(const SceneObject& o);   // "a red square moving left"
std::string refexp_for(const SceneObject& o);    // "the red square"

/// Center of an object at frame t (piecewise linear; composites switch at the
/// middle frame).
void object_center_at(const SceneObject& o, int frames, int t, double& cx, double& cy);

/// Exact analytic rasterization of one object at frame t.
Mask rasterize_object(const SceneObject& o, int canvas, int frames, int t);

struct GeneratedObject {
  SceneObject spec;
  std::string object_id;
  std::vector<Mask> masklet;
  Box box0;  // bounding box of the frame-0 mask (normalized); valid if visible
  bool visible_at_0 = false;
  std::string caption;
  std::string refexp;
};

struct GeneratedVideo {
  std::string video_id;
  SceneSpec scene;
  VideoClip clip;
  std::vector<GeneratedObject> objects;
};

/// Renders one video from an explicit scene (throws UnsatisfiableUniqueness if
/// two objects share color and shape).
GeneratedVideo render_scene(const SceneSpec& scene, const std::string& video_id);

/// Samples a scene from the distribution and renders it. Deterministic in
/// (dist, seed, video_id).
GeneratedVideo generate_video(const SynthDistribution& dist, uint64_t seed,
                              const std::string& video_id);

/// Scene where the referred object enters at frame >= frames/2 while a
/// distractor is visible throughout (FindTrack stress case).
GeneratedVideo generate_late_entry_video(const SynthDistribution& dist, uint64_t seed,
                                         const std::string& video_id);

// ---- dataset emission ---------------------------------------------------------

enum class TaskRoute {
  mask_to_text_and_masklet,  // SAV-Caption style
  box_to_text,               // VisualGenome style (images)
  text_to_masklet,           // RefVOS style
  mask_to_masklet,           // SS-VOS style
  text_inverted_caption,     // referring text used as the output caption
};

std::string route_name(TaskRoute r);
TaskRoute route_from_name(const std::string& name);

/// Per-object VLM attribute triple used by the template oracle and the audit.
struct ObjectAttributes {
  std::string category;
  std::string properties;
  std::string action;
  std::string description;
};

struct GenDataResult {
  std::vector<std::string> dataset_files;
  int n_videos = 0;
  int n_objects = 0;
};

/// Writes frames (PPM) plus one dataset file per route under out_dir:
/// sav.jsonl, refvos.jsonl, refcoco.jsonl (single-frame records), vg.jsonl
/// (inverted captions), and gt.jsonl carrying every annotation, plus
/// attributes.jsonl for the annotation pipeline. Deterministic under seed.
GenDataResult generate_synthetic_dataset(const SynthDistribution& dist, int n_videos,
                                         uint64_t seed, const std::string& out_dir,
                                         const std::string& prefix = "vid");

// ---- SAV-Caption preprocessing (contour + blur) --------------------------------

/// Replaces background with a Gaussian-blurred copy, paints the contour band
/// (mask dilated by `thickness` minus mask) pure red, and leaves interior
/// pixels untouched. Blur uses a separable kernel truncated at 3*sigma with
/// clamp-to-edge padding.
Tensor<float> highlight_and_blur(const Tensor<float>& frame, const Mask& mask, int thickness,
                                 double sigma);

/// Dilation by a Euclidean disc of radius r (pixels).
Mask dilate_disc(const Mask& mask, int radius);

// ---- VLM prompt + response handling --------------------------------------------

/// The structured annotation prompt fed to the VLM, byte-stable across calls.
std::string build_vlm_prompt();

struct VlmParsed {
  std::string category, properties, action, description;
};

struct VlmParseOutcome {
  enum class Kind { parsed, refusal, parse_error };
  Kind kind = Kind::parse_error;
  VlmParsed fields;
  std::string message;
};

VlmParseOutcome parse_vlm_response(const std::string& text);

/// Formats attributes into the response FORMAT the prompt requests.
std::string format_vlm_response(const ObjectAttributes& attrs);

struct VlmAnnotationRequest {
  std::vector<Tensor<float>> processed_frames;
  std::string prompt;
  std::string video_id;
  std::string object_id;
};

class VlmClient {
 public:
  virtual ~VlmClient() = default;
  virtual std::string annotate(const VlmAnnotationRequest& request) = 0;
};

/// Replays canned responses from a JSONL file {video_id, object_id, response}.
class ReplayVlmClient : public VlmClient {
 public:
  explicit ReplayVlmClient(const std::string& responses_path);
  std::string annotate(const VlmAnnotationRequest& request) override;

 private:
  std::map<std::pair<std::string, std::string>, std::string> responses_;
};

/// Answers from ground-truth attributes (attributes.jsonl) in the prompt's
/// FORMAT; used to run the pipeline offline on synthetic data.
class TemplateOracleVlmClient : public VlmClient {
 public:
  explicit TemplateOracleVlmClient(const std::string& attributes_path);
  std::string annotate(const VlmAnnotationRequest& request) override;

 private:
  std::map<std::pair<std::string, std::string>, ObjectAttributes> attrs_;
};

std::map<std::pair<std::string, std::string>, ObjectAttributes> read_attributes(
    const std::string& path);
void write_attributes(const std::string& path,
                      const std::map<std::pair<std::string, std::string>, ObjectAttributes>& a);

// ---- annotate + audit ------------------------------------------------------------

struct AnnotateOptions {
  int contour_thickness = 0;  // 0 = scale 3px@512 with the frame width
  double blur_sigma = 0.0;    // 0 = scale 10px@512
  int frame_stride = 1;       // VLM sees every k-th frame
  std::string processed_dir;  // when set, dumps processed frames
};

struct AnnotateResult {
  int annotated = 0;
  int refusals = 0;
  int parse_errors = 0;
};

/// Runs the pseudo-labeling pipeline: highlight+blur each object's frames,
/// query the client, parse, and write a captioned copy of the dataset plus a
/// raw-response log (<out_path>.responses.jsonl) for auditing.
AnnotateResult annotate_dataset(const std::string& dataset_path, const std::string& out_path,
                                VlmClient& client, const AnnotateOptions& opts);

struct AuditReport {
  int category_correct = 0, category_incorrect = 0;
  int properties_correct = 0, properties_incorrect = 0;
  int action_correct = 0, action_incorrect = 0;
  int refusals = 0, parse_errors = 0, missing = 0;
};

/// Re-parses logged responses and counts per-field agreement with reference
/// attributes (the quality-audit counters).
AuditReport audit_annotations(const std::string& responses_path,
                              const std::string& attributes_path);

}  // namespace vocap
