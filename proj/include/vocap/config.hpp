#pragma once

#include <string>

#include "vocap/model_config.hpp"
#include "vocap/synth.hpp"
#include "vocap/train.hpp"

namespace vocap {

/// Flat key=value run configuration. Every key has a documented default;
/// unknown keys are a hard error. Loss and schedule keys keep the
/// hyperparameter-table names (mask_loss_focal_weight, data_ratio_*, ...).
struct RunConfig {
  // model
  ModelConfig model;

  // losses
  LossWeights weights;

  // schedule
  int steps = 2000;
  int batch_size = 8;
  double learning_rate = 1e-3;
  int warmup_steps = 100;
  double weight_decay = 0.05;
  double gradient_clip_norm = 0.1;
  double adam_beta1 = 0.9, adam_beta2 = 0.999;
  double layerwise_lr_decay = 0.0;
  int num_frames = 8;
  int max_masks_video = 2;
  int max_masks_image = 32;
  uint64_t seed = 0;
  int threads = 2;
  int eval_every = 0;
  int eval_records = 8;
  int ckpt_every = 0;

  // data mixture
  double data_ratio_sav = 2.0;
  double data_ratio_refvos = 1.0;
  double data_ratio_refcoco = 1.0;
  double data_ratio_vg = 0.5;
  double data_ratio_inverted = 0.0;
  std::string dataset_sav, dataset_refvos, dataset_refcoco, dataset_vg, dataset_inverted;

  // output locations (prefixed by $VOCAP_OUT_ROOT when relative)
  std::string out_dir = "out";

  // inference
  std::string checkpoint;
  std::string infer_dataset;
  std::string infer_out = "predictions.jsonl";
  int use_findtrack = 0;
  int caption_stride = 1;
  double appearance_threshold = 0.5;

  // evaluation
  std::string eval_predictions;
  std::string eval_gt;
  std::string eval_out = "eval_report.json";
  double boundary_tolerance = 0.008;

  // synthetic data generation
  std::string gen_out_dir = "data";
  int gen_videos = 8;
  uint64_t gen_seed = 0;
  std::string gen_prefix = "vid";
  SynthDistribution synth;

  // annotation pipeline
  std::string annotate_dataset;
  std::string annotate_out = "annotated.jsonl";
  std::string annotate_client = "oracle";  // oracle | replay
  std::string annotate_attributes;
  std::string annotate_responses;
  int contour_thickness = 0;  // 0 = auto-scale (3 px at 512 width)
  double blur_sigma = 0.0;    // 0 = auto-scale (10 px at 512 width)
  int frame_stride = 1;
  std::string processed_dir;

  // audit
  std::string audit_responses;
  std::string audit_attributes;
  std::string audit_out = "audit_report.json";

  static RunConfig load(const std::string& path);
  static RunConfig from_string(const std::string& text);

  /// Canonical dump of every key (defaults included), one per line.
  std::string canonical() const;
  /// FNV-1a hash of the canonical dump, as hex.
  std::string hash() const;

  TrainerOptions trainer_options() const;
  SamplerOptions sampler_options() const;
};

constexpr const char* kCodeVersion = "vocap 0.1.0";

/// Writes {config_hash, seed, code_version} beside a command's outputs.
void write_manifest(const std::string& out_dir, const RunConfig& cfg);

/// Applies $VOCAP_OUT_ROOT to relative paths.
std::string resolve_out_path(const std::string& path);

}  // namespace vocap
