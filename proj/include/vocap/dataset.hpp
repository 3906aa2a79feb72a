#pragma once

#include <optional>
#include <string>
#include <vector>

#include "vocap/domain.hpp"

namespace vocap {

/// One annotated object inside a dataset record. Masklet and caption are
/// optional: their presence encodes the partial-annotation regime of the
/// dataset the record belongs to.
struct ObjectAnnotation {
  std::string object_id;
  PromptSpec prompt;
  std::optional<std::vector<Mask>> masklet;
  std::optional<std::string> caption;
};

struct VideoRecord {
  std::string video_id;
  std::vector<std::string> frame_paths;  // relative to the dataset file
  std::vector<ObjectAnnotation> objects;
};

/// Inference output for one object.
struct PredictedObject {
  std::string object_id;
  std::string caption;
  std::vector<std::string> masklet_rle;
  std::vector<bool> appearance;
  std::vector<double> iou;
};

struct PredictionRecord {
  std::string video_id;
  std::vector<PredictedObject> objects;
};

// ---- dataset files (one JSON object per line) -------------------------------

std::vector<VideoRecord> read_dataset(const std::string& path);
void write_dataset(const std::string& path, const std::vector<VideoRecord>& records);

std::vector<PredictionRecord> read_predictions(const std::string& path);
void write_predictions(const std::string& path, const std::vector<PredictionRecord>& records);

/// Loads the clip referenced by a record; frame paths resolve against the
/// directory containing the dataset file.
VideoClip load_clip(const VideoRecord& record, const std::string& dataset_dir);

/// Directory part of a path ("" when the path has no directory).
std::string dir_of(const std::string& path);

// ---- binary PPM (P6) image io ------------------------------------------------

Tensor<float> read_ppm(const std::string& path);
void write_ppm(const std::string& path, const Tensor<float>& frame);

}  // namespace vocap
