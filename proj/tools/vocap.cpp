// Command-line surface: gen-data, annotate, train, infer, findtrack, eval,
// audit. Every command reads one flat config file, writes its artifacts under
// the configured output location, and drops a manifest next to them.

#include <filesystem>
#include <fstream>
#include <future>
#include <iostream>

#include "CLI11.hpp"
#include "json.hpp"
#include "vocap/config.hpp"
#include "vocap/infer.hpp"
#include "vocap/metrics.hpp"
#include "vocap/model.hpp"
#include "vocap/synth.hpp"
#include "vocap/train.hpp"

namespace fs = std::filesystem;
using namespace vocap;

namespace {

using Model = VoCapModel<float>;

int cmd_gen_data(const RunConfig& cfg) {
  std::string out_dir = resolve_out_path(cfg.gen_out_dir);
  GenDataResult res =
      generate_synthetic_dataset(cfg.synth, cfg.gen_videos, cfg.gen_seed, out_dir, cfg.gen_prefix);
  write_manifest(out_dir, cfg);
  std::cout << "generated " << res.n_videos << " videos, " << res.n_objects << " objects under "
            << out_dir << "\n";
  return 0;
}

int cmd_annotate(const RunConfig& cfg) {
  if (cfg.annotate_dataset.empty()) throw ConfigError("annotate_dataset is required");
  std::unique_ptr<VlmClient> client;
  if (cfg.annotate_client == "oracle") {
    if (cfg.annotate_attributes.empty())
      throw ConfigError("annotate_attributes is required for the oracle client");
    client = std::make_unique<TemplateOracleVlmClient>(cfg.annotate_attributes);
  } else if (cfg.annotate_client == "replay") {
    if (cfg.annotate_responses.empty())
      throw ConfigError("annotate_responses is required for the replay client");
    client = std::make_unique<ReplayVlmClient>(cfg.annotate_responses);
  } else {
    throw ConfigError("annotate_client must be 'oracle' or 'replay'");
  }
  AnnotateOptions opts;
  opts.contour_thickness = cfg.contour_thickness;
  opts.blur_sigma = cfg.blur_sigma;
  opts.frame_stride = cfg.frame_stride;
  opts.processed_dir = cfg.processed_dir.empty() ? "" : resolve_out_path(cfg.processed_dir);
  std::string out_path = resolve_out_path(cfg.annotate_out);
  fs::create_directories(fs::path(out_path).parent_path().empty()
                             ? "."
                             : fs::path(out_path).parent_path().string());
  AnnotateResult res = annotate_dataset(cfg.annotate_dataset, out_path, *client, opts);
  write_manifest(dir_of(out_path), cfg);
  std::cout << "annotated " << res.annotated << " objects (" << res.refusals << " refusals, "
            << res.parse_errors << " parse errors) -> " << out_path << "\n";
  return 0;
}

std::vector<LoadedDataset> load_mixture(const RunConfig& cfg) {
  std::vector<LoadedDataset> out;
  auto add = [&out](const std::string& name, const std::string& path, TaskRoute route,
                    double weight) {
    if (path.empty() || weight <= 0) return;
    LoadedDataset ds;
    ds.name = name;
    ds.route = route;
    ds.weight = weight;
    ds.base_dir = dir_of(path);
    ds.records = read_dataset(path);
    out.push_back(std::move(ds));
  };
  add("sav", cfg.dataset_sav, TaskRoute::mask_to_text_and_masklet, cfg.data_ratio_sav);
  add("refvos", cfg.dataset_refvos, TaskRoute::text_to_masklet, cfg.data_ratio_refvos);
  add("refcoco", cfg.dataset_refcoco, TaskRoute::text_to_masklet, cfg.data_ratio_refcoco);
  add("vg", cfg.dataset_vg, TaskRoute::box_to_text, cfg.data_ratio_vg);
  add("inverted", cfg.dataset_inverted, TaskRoute::text_inverted_caption,
      cfg.data_ratio_inverted);
  if (out.empty()) throw EmptyDataset("no datasets configured for training");
  return out;
}

int cmd_train(const RunConfig& cfg) {
  Model model = [&]() {
    if (!cfg.checkpoint.empty()) return Model::load(cfg.checkpoint).model;
    return Model(cfg.model, cfg.seed);
  }();
  MixtureSampler sampler(load_mixture(cfg), cfg.sampler_options());
  TrainerOptions opts = cfg.trainer_options();
  fs::create_directories(opts.out_dir);
  write_manifest(opts.out_dir, cfg);
  Trainer<float> trainer(model, std::move(sampler), opts);
  auto summary = trainer.run();
  std::cout << "trained " << summary.steps << " steps; final loss "
            << summary.last.weighted_total << "; checkpoint " << summary.final_checkpoint << "\n";
  return 0;
}

int cmd_infer(const RunConfig& cfg, bool force_findtrack) {
  if (cfg.checkpoint.empty()) throw ConfigError("checkpoint is required");
  if (cfg.infer_dataset.empty()) throw ConfigError("infer_dataset is required");
  auto loaded = Model::load(cfg.checkpoint);
  typename InferenceEngine<float>::Options iopts;
  iopts.caption_stride = cfg.caption_stride;
  iopts.appearance_threshold = cfg.appearance_threshold;
  InferenceEngine<float> engine(loaded.model, iopts);

  std::vector<VideoRecord> records = read_dataset(cfg.infer_dataset);
  std::string base_dir = dir_of(cfg.infer_dataset);
  bool findtrack = force_findtrack || cfg.use_findtrack != 0;

  std::vector<PredictionRecord> preds(records.size());
  std::atomic<size_t> next{0};
  auto worker = [&]() {
    while (true) {
      size_t i = next.fetch_add(1);
      if (i >= records.size()) break;
      const VideoRecord& rec = records[i];
      VideoClip clip = load_clip(rec, base_dir);
      PredictionRecord out;
      out.video_id = rec.video_id;
      for (const auto& obj : rec.objects) {
        ObjectResult res = findtrack && obj.prompt.kind == PromptKind::text
                               ? engine.infer_findtrack(clip, obj.prompt)
                               : engine.infer_online(clip, obj.prompt);
        PredictedObject po;
        po.object_id = obj.object_id;
        po.caption = res.caption;
        for (const auto& m : res.masklet.masks) po.masklet_rle.push_back(rle_encode(m));
        for (uint8_t a : res.masklet.appearance) po.appearance.push_back(a != 0);
        po.iou = res.masklet.iou_estimates;
        out.objects.push_back(std::move(po));
      }
      preds[i] = std::move(out);
    }
  };
  int n_workers = std::max(1, cfg.threads);
  std::vector<std::future<void>> futs;
  for (int w = 0; w < n_workers; ++w) futs.push_back(std::async(std::launch::async, worker));
  for (auto& f : futs) f.get();

  std::string out_path = resolve_out_path(cfg.infer_out);
  write_predictions(out_path, preds);
  write_manifest(dir_of(out_path), cfg);
  std::cout << "wrote predictions for " << preds.size() << " videos -> " << out_path << "\n";
  return 0;
}

int cmd_eval(const RunConfig& cfg) {
  if (cfg.eval_predictions.empty() || cfg.eval_gt.empty())
    throw ConfigError("eval_predictions and eval_gt are required");
  std::vector<PredictionRecord> preds = read_predictions(cfg.eval_predictions);
  std::vector<VideoRecord> gt = read_dataset(cfg.eval_gt);
  std::string gt_dir = dir_of(cfg.eval_gt);

  std::map<std::pair<std::string, std::string>, const PredictedObject*> by_id;
  for (const auto& rec : preds)
    for (const auto& obj : rec.objects) by_id[{rec.video_id, obj.object_id}] = &obj;

  EvalReport report;
  std::map<std::string, std::string> candidates;
  std::map<std::string, std::vector<std::string>> references;

  for (const auto& rec : gt) {
    int h = 0, w = 0;
    if (!rec.objects.empty()) {
      // mask dims come from the stored masklets; fall back to reading a frame
      for (const auto& obj : rec.objects)
        if (obj.masklet && !obj.masklet->empty()) {
          h = (*obj.masklet)[0].h;
          w = (*obj.masklet)[0].w;
          break;
        }
      if (h == 0) {
        Tensor<float> f = read_ppm((fs::path(gt_dir) / rec.frame_paths[0]).string());
        h = f.dim(0);
        w = f.dim(1);
      }
    }
    for (const auto& obj : rec.objects) {
      auto it = by_id.find({rec.video_id, obj.object_id});
      if (it == by_id.end())
        throw DataError("missing prediction for " + rec.video_id + "/" + obj.object_id);
      const PredictedObject& pred = *it->second;
      if (obj.masklet) {
        if (pred.masklet_rle.size() != obj.masklet->size())
          throw LengthMismatch("prediction frame count differs for " + rec.video_id);
        std::vector<Mask> pm;
        for (const auto& rle : pred.masklet_rle) pm.push_back(rle_decode(rle, h, w));
        ObjectScore score;
        score.video_id = rec.video_id;
        score.object_id = obj.object_id;
        score.j = region_j(pm, *obj.masklet);
        score.f = boundary_f(pm, *obj.masklet, cfg.boundary_tolerance);
        score.jf = jf_score(score.j, score.f);
        report.per_object.push_back(score);
      }
      if (obj.caption) {
        std::string key = rec.video_id + "::" + obj.object_id;
        candidates[key] = pred.caption;
        references[key].push_back(*obj.caption);
      }
    }
  }

  report.n_objects = static_cast<int>(report.per_object.size());
  for (const auto& s : report.per_object) {
    report.mean_j += s.j;
    report.mean_f += s.f;
    report.mean_jf += s.jf;
  }
  if (report.n_objects > 0) {
    report.mean_j /= report.n_objects;
    report.mean_f /= report.n_objects;
    report.mean_jf /= report.n_objects;
  }
  report.n_captioned = static_cast<int>(candidates.size());
  if (!candidates.empty()) {
    report.cider = cider_d(candidates, references);
    report.exact_match = caption_exact_match(candidates, references);
  }

  nlohmann::json j;
  j["mean_j"] = report.mean_j;
  j["mean_f"] = report.mean_f;
  j["mean_jf"] = report.mean_jf;
  j["cider_d"] = report.cider;
  j["caption_exact_match"] = report.exact_match;
  j["n_objects"] = report.n_objects;
  j["n_captioned"] = report.n_captioned;
  nlohmann::json per = nlohmann::json::array();
  for (const auto& s : report.per_object)
    per.push_back({{"video_id", s.video_id},
                   {"object_id", s.object_id},
                   {"j", s.j},
                   {"f", s.f},
                   {"jf", s.jf}});
  j["per_object"] = per;

  std::string out_path = resolve_out_path(cfg.eval_out);
  std::ofstream out(out_path);
  if (!out) throw DataError("cannot write eval report: " + out_path);
  out << j.dump(2) << "\n";
  write_manifest(dir_of(out_path), cfg);
  std::cout << "J " << report.mean_j << "  F " << report.mean_f << "  J&F " << report.mean_jf
            << "  CIDEr-D " << report.cider << "  EM " << report.exact_match << " -> " << out_path
            << "\n";
  return 0;
}

int cmd_audit(const RunConfig& cfg) {
  if (cfg.audit_responses.empty() || cfg.audit_attributes.empty())
    throw ConfigError("audit_responses and audit_attributes are required");
  AuditReport rep = audit_annotations(cfg.audit_responses, cfg.audit_attributes);
  nlohmann::json j;
  j["category"] = {{"correct", rep.category_correct}, {"incorrect", rep.category_incorrect}};
  j["properties"] = {{"correct", rep.properties_correct}, {"incorrect", rep.properties_incorrect}};
  j["action"] = {{"correct", rep.action_correct}, {"incorrect", rep.action_incorrect}};
  j["refusals"] = rep.refusals;
  j["parse_errors"] = rep.parse_errors;
  j["missing"] = rep.missing;
  std::string out_path = resolve_out_path(cfg.audit_out);
  std::ofstream out(out_path);
  if (!out) throw DataError("cannot write audit report: " + out_path);
  out << j.dump(2) << "\n";
  write_manifest(dir_of(out_path), cfg);
  std::cout << "audit report -> " << out_path << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"promptable video object segmentation and captioning"};
  app.require_subcommand(1);

  std::string config_path;
  for (const char* name : {"gen-data", "annotate", "train", "infer", "findtrack", "eval", "audit"})
    app.add_subcommand(name)->add_option("--config", config_path, "flat key=value config file")
        ->required();

  try {
    app.parse(argc, argv);
    RunConfig cfg = RunConfig::load(config_path);
    std::string sub = app.get_subcommands().front()->get_name();
    if (sub == "gen-data") return cmd_gen_data(cfg);
    if (sub == "annotate") return cmd_annotate(cfg);
    if (sub == "train") return cmd_train(cfg);
    if (sub == "infer") return cmd_infer(cfg, false);
    if (sub == "findtrack") return cmd_infer(cfg, true);
    if (sub == "eval") return cmd_eval(cfg);
    if (sub == "audit") return cmd_audit(cfg);
    return static_cast<int>(ErrorCode::internal);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  } catch (const Error& e) {
    std::cerr << "ERROR " << static_cast<int>(e.code()) << " " << e.what() << "\n";
    return static_cast<int>(e.code());
  } catch (const std::exception& e) {
    std::cerr << "ERROR 5 InternalError: " << e.what() << "\n";
    return static_cast<int>(ErrorCode::internal);
  }
}
