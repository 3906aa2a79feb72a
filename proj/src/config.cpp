#include "vocap/config.hpp"

#include <charconv>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>

#include "json.hpp"

namespace vocap {

namespace {

struct KeyBinding {
  std::function<void(RunConfig&, const std::string&)> set;
  std::function<std::string(const RunConfig&)> get;
};

template <typename T>
T parse_number(const std::string& key, const std::string& value) {
  std::stringstream ss(value);
  T out;
  ss >> out;
  if (ss.fail() || !ss.eof()) throw ConfigError("bad value for " + key + ": '" + value + "'");
  return out;
}

std::string format_double(double v) {
  std::ostringstream ss;
  ss.precision(17);
  ss << v;
  return ss.str();
}

std::map<std::string, KeyBinding> build_registry() {
  std::map<std::string, KeyBinding> reg;
  auto bind_int = [&reg](const std::string& key, int RunConfig::* member) {
    reg[key] = {[key, member](RunConfig& c, const std::string& v) {
                  c.*member = parse_number<int>(key, v);
                },
                [member](const RunConfig& c) { return std::to_string(c.*member); }};
  };
  auto bind_u64 = [&reg](const std::string& key, uint64_t RunConfig::* member) {
    reg[key] = {[key, member](RunConfig& c, const std::string& v) {
                  c.*member = parse_number<uint64_t>(key, v);
                },
                [member](const RunConfig& c) { return std::to_string(c.*member); }};
  };
  auto bind_double = [&reg](const std::string& key, double RunConfig::* member) {
    reg[key] = {[key, member](RunConfig& c, const std::string& v) {
                  c.*member = parse_number<double>(key, v);
                },
                [member](const RunConfig& c) { return format_double(c.*member); }};
  };
  auto bind_string = [&reg](const std::string& key, std::string RunConfig::* member) {
    reg[key] = {[member](RunConfig& c, const std::string& v) { c.*member = v; },
                [member](const RunConfig& c) { return c.*member; }};
  };
  auto bind_sub_int = [&reg](const std::string& key, auto submember, auto field) {
    reg[key] = {[key, submember, field](RunConfig& c, const std::string& v) {
                  (c.*submember).*field = parse_number<int>(key, v);
                },
                [submember, field](const RunConfig& c) {
                  return std::to_string((c.*submember).*field);
                }};
  };
  auto bind_sub_double = [&reg](const std::string& key, auto submember, auto field) {
    reg[key] = {[key, submember, field](RunConfig& c, const std::string& v) {
                  (c.*submember).*field = parse_number<double>(key, v);
                },
                [submember, field](const RunConfig& c) {
                  return format_double((c.*submember).*field);
                }};
  };

  // model
  bind_sub_int("input_size", &RunConfig::model, &ModelConfig::input_size);
  bind_sub_int("patch_size", &RunConfig::model, &ModelConfig::patch_size);
  bind_sub_int("embed_dim", &RunConfig::model, &ModelConfig::embed_dim);
  bind_sub_int("depth", &RunConfig::model, &ModelConfig::depth);
  bind_sub_int("num_heads", &RunConfig::model, &ModelConfig::num_heads);
  bind_sub_int("mlp_ratio", &RunConfig::model, &ModelConfig::mlp_ratio);
  bind_sub_int("memory_dim", &RunConfig::model, &ModelConfig::memory_dim);
  bind_sub_int("memory_capacity", &RunConfig::model, &ModelConfig::memory_capacity);
  bind_sub_int("memory_layers", &RunConfig::model, &ModelConfig::memory_layers);
  bind_sub_int("decoder_blocks", &RunConfig::model, &ModelConfig::decoder_blocks);
  bind_sub_int("text_depth", &RunConfig::model, &ModelConfig::text_depth);
  bind_sub_int("text_heads", &RunConfig::model, &ModelConfig::text_heads);
  bind_sub_int("caption_tokens", &RunConfig::model, &ModelConfig::caption_tokens);
  bind_sub_int("max_text_len", &RunConfig::model, &ModelConfig::max_text_len);

  // losses (hyperparameter-table names)
  bind_sub_double("mask_loss_focal_weight", &RunConfig::weights, &LossWeights::focal);
  bind_sub_double("mask_loss_dice_weight", &RunConfig::weights, &LossWeights::dice);
  bind_sub_double("iou_loss_weight", &RunConfig::weights, &LossWeights::iou_l1);
  bind_sub_double("occlusion_loss_weight", &RunConfig::weights, &LossWeights::occlusion_ce);
  bind_sub_double("caption_loss_weight", &RunConfig::weights, &LossWeights::caption_ce);
  bind_sub_double("caption_label_smooth", &RunConfig::weights, &LossWeights::label_smooth);
  bind_sub_double("focal_gamma", &RunConfig::weights, &LossWeights::focal_gamma);
  bind_sub_double("focal_alpha", &RunConfig::weights, &LossWeights::focal_alpha);

  // schedule
  bind_int("steps", &RunConfig::steps);
  bind_int("batch_size", &RunConfig::batch_size);
  bind_double("learning_rate", &RunConfig::learning_rate);
  bind_int("warmup_steps", &RunConfig::warmup_steps);
  bind_double("weight_decay", &RunConfig::weight_decay);
  bind_double("gradient_clip_norm", &RunConfig::gradient_clip_norm);
  bind_double("adam_beta1", &RunConfig::adam_beta1);
  bind_double("adam_beta2", &RunConfig::adam_beta2);
  bind_double("layerwise_lr_decay", &RunConfig::layerwise_lr_decay);
  bind_int("num_frames", &RunConfig::num_frames);
  bind_int("max_masks_video", &RunConfig::max_masks_video);
  bind_int("max_masks_image", &RunConfig::max_masks_image);
  bind_u64("seed", &RunConfig::seed);
  bind_int("threads", &RunConfig::threads);
  bind_int("eval_every", &RunConfig::eval_every);
  bind_int("eval_records", &RunConfig::eval_records);
  bind_int("ckpt_every", &RunConfig::ckpt_every);

  // mixture
  bind_double("data_ratio_sav", &RunConfig::data_ratio_sav);
  bind_double("data_ratio_refvos", &RunConfig::data_ratio_refvos);
  bind_double("data_ratio_refcoco", &RunConfig::data_ratio_refcoco);
  bind_double("data_ratio_vg", &RunConfig::data_ratio_vg);
  bind_double("data_ratio_inverted", &RunConfig::data_ratio_inverted);
  bind_string("dataset_sav", &RunConfig::dataset_sav);
  bind_string("dataset_refvos", &RunConfig::dataset_refvos);
  bind_string("dataset_refcoco", &RunConfig::dataset_refcoco);
  bind_string("dataset_vg", &RunConfig::dataset_vg);
  bind_string("dataset_inverted", &RunConfig::dataset_inverted);

  bind_string("out_dir", &RunConfig::out_dir);

  // inference
  bind_string("checkpoint", &RunConfig::checkpoint);
  bind_string("infer_dataset", &RunConfig::infer_dataset);
  bind_string("infer_out", &RunConfig::infer_out);
  bind_int("use_findtrack", &RunConfig::use_findtrack);
  bind_int("caption_stride", &RunConfig::caption_stride);
  bind_double("appearance_threshold", &RunConfig::appearance_threshold);

  // evaluation
  bind_string("eval_predictions", &RunConfig::eval_predictions);
  bind_string("eval_gt", &RunConfig::eval_gt);
  bind_string("eval_out", &RunConfig::eval_out);
  bind_double("boundary_tolerance", &RunConfig::boundary_tolerance);

  // synthetic generation
  bind_string("gen_out_dir", &RunConfig::gen_out_dir);
  bind_int("gen_videos", &RunConfig::gen_videos);
  bind_u64("gen_seed", &RunConfig::gen_seed);
  bind_string("gen_prefix", &RunConfig::gen_prefix);
  bind_sub_int("synth_canvas", &RunConfig::synth, &SynthDistribution::canvas);
  bind_sub_int("synth_frames", &RunConfig::synth, &SynthDistribution::frames);
  bind_sub_int("synth_min_objects", &RunConfig::synth, &SynthDistribution::min_objects);
  bind_sub_int("synth_max_objects", &RunConfig::synth, &SynthDistribution::max_objects);
  bind_sub_double("synth_min_size", &RunConfig::synth, &SynthDistribution::min_size);
  bind_sub_double("synth_max_size", &RunConfig::synth, &SynthDistribution::max_size);
  bind_sub_double("synth_still_fraction", &RunConfig::synth, &SynthDistribution::still_fraction);
  bind_sub_double("synth_composite_fraction", &RunConfig::synth,
                  &SynthDistribution::composite_fraction);
  bind_sub_double("synth_late_entry_fraction", &RunConfig::synth,
                  &SynthDistribution::late_entry_fraction);
  bind_sub_double("synth_min_speed", &RunConfig::synth, &SynthDistribution::min_speed);
  bind_sub_double("synth_max_speed", &RunConfig::synth, &SynthDistribution::max_speed);

  // annotation
  bind_string("annotate_dataset", &RunConfig::annotate_dataset);
  bind_string("annotate_out", &RunConfig::annotate_out);
  bind_string("annotate_client", &RunConfig::annotate_client);
  bind_string("annotate_attributes", &RunConfig::annotate_attributes);
  bind_string("annotate_responses", &RunConfig::annotate_responses);
  bind_int("contour_thickness", &RunConfig::contour_thickness);
  bind_double("blur_sigma", &RunConfig::blur_sigma);
  bind_int("frame_stride", &RunConfig::frame_stride);
  bind_string("processed_dir", &RunConfig::processed_dir);

  // audit
  bind_string("audit_responses", &RunConfig::audit_responses);
  bind_string("audit_attributes", &RunConfig::audit_attributes);
  bind_string("audit_out", &RunConfig::audit_out);

  return reg;
}

const std::map<std::string, KeyBinding>& registry() {
  static const std::map<std::string, KeyBinding> reg = build_registry();
  return reg;
}

std::string trim(const std::string& s) {
  size_t a = s.find_first_not_of(" \t\r\n");
  if (a == std::string::npos) return "";
  size_t b = s.find_last_not_of(" \t\r\n");
  return s.substr(a, b - a + 1);
}

}  // namespace

RunConfig RunConfig::from_string(const std::string& text) {
  RunConfig cfg;
  std::istringstream in(text);
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    std::string t = trim(line);
    if (t.empty() || t[0] == '#') continue;
    size_t eq = t.find('=');
    if (eq == std::string::npos)
      throw ConfigError("line " + std::to_string(line_no) + ": expected key=value");
    std::string key = trim(t.substr(0, eq));
    std::string value = trim(t.substr(eq + 1));
    auto it = registry().find(key);
    if (it == registry().end())
      throw ConfigError("unknown config key '" + key + "' (line " + std::to_string(line_no) + ")");
    it->second.set(cfg, value);
  }
  return cfg;
}

RunConfig RunConfig::load(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config: " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return from_string(ss.str());
}

std::string RunConfig::canonical() const {
  std::string out;
  for (const auto& [key, binding] : registry()) {
    out += key;
    out += '=';
    out += binding.get(*this);
    out += '\n';
  }
  return out;
}

std::string RunConfig::hash() const {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx",
                static_cast<unsigned long long>(fnv1a64(canonical())));
  return std::string(buf);
}

TrainerOptions RunConfig::trainer_options() const {
  TrainerOptions o;
  o.steps = steps;
  o.batch_size = batch_size;
  o.lr = learning_rate;
  o.warmup_steps = warmup_steps;
  o.weight_decay = weight_decay;
  o.grad_clip = gradient_clip_norm;
  o.adam_beta1 = adam_beta1;
  o.adam_beta2 = adam_beta2;
  o.layerwise_lr_decay = layerwise_lr_decay;
  o.seed = seed;
  o.threads = threads;
  o.eval_every = eval_every;
  o.eval_records = eval_records;
  o.ckpt_every = ckpt_every;
  o.out_dir = resolve_out_path(out_dir);
  o.config_hash = hash();
  o.sampler = sampler_options();
  o.weights = weights;
  return o;
}

SamplerOptions RunConfig::sampler_options() const {
  SamplerOptions s;
  s.num_frames = num_frames;
  s.max_masks_video = max_masks_video;
  s.max_masks_image = max_masks_image;
  return s;
}

std::string resolve_out_path(const std::string& path) {
  if (path.empty()) return path;
  std::filesystem::path p(path);
  if (p.is_absolute()) return path;
  const char* root = std::getenv("VOCAP_OUT_ROOT");
  if (!root || !*root) return path;
  return (std::filesystem::path(root) / p).string();
}

void write_manifest(const std::string& out_dir, const RunConfig& cfg) {
  std::filesystem::create_directories(out_dir);
  nlohmann::json j;
  j["config_hash"] = cfg.hash();
  j["seed"] = cfg.seed;
  j["code_version"] = kCodeVersion;
  std::ofstream out(std::filesystem::path(out_dir) / "manifest.json");
  if (!out) throw DataError("cannot write manifest in " + out_dir);
  out << j.dump(2) << "\n";
}

}  // namespace vocap
