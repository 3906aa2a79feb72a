#pragma once

#include <atomic>
#include <cmath>
#include <fstream>
#include <future>
#include <optional>
#include <string>
#include <vector>

#include "vocap/dataset.hpp"
#include "vocap/infer.hpp"
#include "vocap/metrics.hpp"
#include "vocap/model.hpp"
#include "vocap/synth.hpp"

namespace vocap {

struct LossWeights {
  double focal = 20.0;
  double dice = 1.0;
  double iou_l1 = 1.0;
  double occlusion_ce = 1.0;
  double caption_ce = 1.0;
  double label_smooth = 0.1;
  double focal_gamma = 2.0;
  double focal_alpha = 0.25;
};

/// Which loss groups a dataset route activates.
struct RouteLosses {
  bool mask_losses = false;  // focal + dice + iou + occlusion
  bool caption_loss = false;
};

inline RouteLosses route_losses(TaskRoute r) {
  switch (r) {
    case TaskRoute::mask_to_text_and_masklet: return {true, true};
    case TaskRoute::box_to_text: return {false, true};
    case TaskRoute::text_to_masklet: return {true, false};
    case TaskRoute::mask_to_masklet: return {true, false};
    case TaskRoute::text_inverted_caption: return {false, true};
  }
  return {};
}

/// Raw (unweighted) per-term means for one record or one batch.
struct LossTerms {
  double focal = 0, dice = 0, iou = 0, occlusion = 0, caption = 0;
  double weighted_total = 0;

  void add(const LossTerms& o) {
    focal += o.focal;
    dice += o.dice;
    iou += o.iou;
    occlusion += o.occlusion;
    caption += o.caption;
    weighted_total += o.weighted_total;
  }
  void scale(double s) {
    focal *= s;
    dice *= s;
    iou *= s;
    occlusion *= s;
    caption *= s;
    weighted_total *= s;
  }
};

/// A record ready for the forward pass: loaded frames plus annotations.
struct TrainRecord {
  std::string dataset;
  TaskRoute route = TaskRoute::mask_to_text_and_masklet;
  std::string video_id;
  VideoClip clip;
  std::vector<ObjectAnnotation> objects;
};

/// Verifies that a record carries the annotations its route consumes.
inline void check_route(const TrainRecord& rec) {
  RouteLosses act = route_losses(rec.route);
  for (const auto& obj : rec.objects) {
    if (act.mask_losses && !obj.masklet)
      throw RouteMismatch(route_name(rec.route) + " requires masklet annotations (" +
                          rec.video_id + ")");
    if (act.caption_loss && !obj.caption)
      throw RouteMismatch(route_name(rec.route) + " requires caption annotations (" +
                          rec.video_id + ")");
    switch (rec.route) {
      case TaskRoute::mask_to_text_and_masklet:
      case TaskRoute::mask_to_masklet:
        if (obj.prompt.kind != PromptKind::mask)
          throw RouteMismatch(route_name(rec.route) + " requires mask prompts");
        break;
      case TaskRoute::text_to_masklet:
        if (obj.prompt.kind != PromptKind::text)
          throw RouteMismatch(route_name(rec.route) + " requires text prompts");
        break;
      case TaskRoute::box_to_text:
      case TaskRoute::text_inverted_caption:
        if (obj.prompt.kind == PromptKind::text)
          throw RouteMismatch(route_name(rec.route) + " requires a location prompt");
        break;
    }
  }
}

/// Builds the training graph for one record and returns the weighted record
/// loss plus the raw term breakdown. Caption targets are truncated to
/// max_text_len (EOS included); records without a loss term contribute no
/// graph nodes for it, so unrelated heads receive exactly-zero gradients.
template <typename S>
struct RecordGraph {
  Var loss;       // weighted sum of active losses for this record
  LossTerms raw;  // host-side breakdown
  int memory_attend_calls = 0;
};

template <typename S>
RecordGraph<S> build_record_graph(const VoCapModel<S>& model, Tape<S>& t, ParamCtx<S>& pc,
                                  const TrainRecord& rec, const LossWeights& w) {
  check_route(rec);
  RouteLosses act = route_losses(rec.route);
  const ModelConfig& cfg = model.config();
  const int T = rec.clip.frame_count();
  const int H = rec.clip.height(), W = rec.clip.width();

  std::vector<Var> frame_vars;
  frame_vars.reserve(static_cast<size_t>(T));
  for (const auto& f : rec.clip.frames) frame_vars.push_back(model.frame_leaf(t, f));
  std::vector<FrameFeaturesVar> feats = model.backbone().encode_clip(pc, frame_vars);
  const int cells = feats[0].base.h * feats[0].base.w;

  auto mean_of = [&t](const std::vector<Var>& vs) -> std::optional<Var> {
    if (vs.empty()) return std::nullopt;
    Var acc = vs[0];
    for (size_t i = 1; i < vs.size(); ++i) acc = t.add(acc, vs[i]);
    return t.scale(acc, static_cast<S>(1.0 / static_cast<double>(vs.size())));
  };

  std::vector<Var> focal_terms, dice_terms, iou_terms, occl_terms, caption_terms;
  RecordGraph<S> out;

  for (const auto& obj : rec.objects) {
    validate_prompt(obj.prompt, rec.clip);

    std::optional<Var> sparse_all;  // text prompts feed every frame
    std::optional<Var> sparse_frame0;
    std::optional<Var> dense_frame0;
    switch (obj.prompt.kind) {
      case PromptKind::text:
        sparse_all = model.prompts().encode_text(pc, model.text(), obj.prompt.text);
        break;
      case PromptKind::box:
        sparse_frame0 = model.prompts().encode_box(pc, obj.prompt.box);
        break;
      case PromptKind::mask:
        dense_frame0 = model.prompts().encode_mask(pc, obj.prompt.mask);
        break;
    }

    std::vector<int> caption_ids;
    if (act.caption_loss) {
      caption_ids = ByteTokenizer::encode(*obj.caption);
      if (static_cast<int>(caption_ids.size()) >= cfg.max_text_len)
        caption_ids.resize(static_cast<size_t>(cfg.max_text_len - 1));
      caption_ids.push_back(ModelConfig::eos_id);
    }

    MemoryBankT<Var> bank(cfg.memory_capacity);
    bool needs_decoder = act.mask_losses || T > 1;

    for (int ft = 0; ft < T; ++ft) {
      const Mask* gt = obj.masklet ? &(*obj.masklet)[static_cast<size_t>(ft)] : nullptr;
      bool gt_visible = gt ? !gt->empty_mask() : true;

      TokenGrid fbar = feats[static_cast<size_t>(ft)].base;
      if (!bank.empty()) {
        std::vector<typename MemorySystem<S>::EntryRef> entries;
        entries.reserve(static_cast<size_t>(bank.size()));
        for (const auto& item : bank.items())
          entries.push_back({item.payload, ft - item.frame_index, item.is_prompt});
        fbar = model.memory().attend(pc, fbar, entries);
        ++out.memory_attend_calls;
      }
      Var dense = (dense_frame0 && ft == 0) ? *dense_frame0
                                            : model.prompts().no_mask_dense(pc, cells);
      std::optional<Var> sparse =
          sparse_all ? sparse_all : (ft == 0 ? sparse_frame0 : std::nullopt);
      TokenGrid fused{t.add(fbar.rows, dense), fbar.h, fbar.w, fbar.d};

      std::optional<DecoderOut> dec;
      if (needs_decoder)
        dec = model.decoder().decode(pc, fused, sparse, feats[static_cast<size_t>(ft)].pyr2x,
                                     feats[static_cast<size_t>(ft)].pyr4x, H, W);

      if (act.mask_losses) {
        Tensor<S> gt_mask = model.mask_tensor(*gt);
        if (gt_visible) {
          focal_terms.push_back(t.focal_loss(dec->mask_logits, gt_mask,
                                             static_cast<S>(w.focal_gamma),
                                             static_cast<S>(w.focal_alpha)));
          dice_terms.push_back(t.dice_loss(dec->mask_logits, gt_mask));
        }
        // IoU head regresses the quality of the current binary mask; the
        // target for ground-truth-empty frames is 0 so anchors avoid them.
        double iou_target = 0.0;
        if (gt_visible) {
          const Tensor<S>& lg = t.val(dec->mask_logits);
          int64_t inter = 0, uni = 0;
          for (int64_t i = 0; i < lg.numel(); ++i) {
            bool p = lg[i] > 0;
            bool g = gt->v[static_cast<size_t>(i)] != 0;
            inter += p && g;
            uni += p || g;
          }
          iou_target = uni == 0 ? 0.0 : static_cast<double>(inter) / static_cast<double>(uni);
        }
        iou_terms.push_back(
            t.l1_to_const(dec->iou_estimate, Tensor<S>::scalar(static_cast<S>(iou_target))));
        occl_terms.push_back(t.bce_with_logits(
            dec->appearance_logit, Tensor<S>::scalar(gt_visible ? S(1) : S(0))));
      }

      if (act.caption_loss && gt_visible) {
        Var chat = model.caption().extract(pc, fused, sparse);
        Var logits = model.text().teacher_forced_logits(pc, chat, caption_ids);
        caption_terms.push_back(
            t.cross_entropy_smoothed(logits, caption_ids, static_cast<S>(w.label_smooth)));
      }

      if (T > 1 && ft < T - 1) {
        Var logits_for_memory =
            act.mask_losses ? dec->mask_logits : t.stop_gradient(dec->mask_logits);
        Var probs = t.sigmoid(logits_for_memory);
        Var entry = model.memory().encode_memory(
            pc, feats[static_cast<size_t>(ft)].base.rows, probs);
        bank.push(entry, ft, ft == 0);
      }
    }
  }

  std::vector<Var> weighted;
  LossTerms raw;
  auto push_term = [&](std::optional<Var> term, double weight, double& raw_slot) {
    if (!term) return;
    raw_slot = static_cast<double>(t.val(*term)[0]);
    weighted.push_back(t.scale(*term, static_cast<S>(weight)));
  };
  push_term(mean_of(focal_terms), w.focal, raw.focal);
  push_term(mean_of(dice_terms), w.dice, raw.dice);
  push_term(mean_of(iou_terms), w.iou_l1, raw.iou);
  push_term(mean_of(occl_terms), w.occlusion_ce, raw.occlusion);
  push_term(mean_of(caption_terms), w.caption_ce, raw.caption);
  if (weighted.empty()) throw RouteMismatch("record produced no loss terms: " + rec.video_id);

  Var total = weighted[0];
  for (size_t i = 1; i < weighted.size(); ++i) total = t.add(total, weighted[i]);
  raw.weighted_total = static_cast<double>(t.val(total)[0]);
  out.loss = total;
  out.raw = raw;
  return out;
}

// ---------------------------------------------------------------------------
// Mixture sampling
// ---------------------------------------------------------------------------

struct LoadedDataset {
  std::string name;
  TaskRoute route = TaskRoute::mask_to_text_and_masklet;
  double weight = 1.0;
  std::string base_dir;
  std::vector<VideoRecord> records;
};

struct SamplerOptions {
  int num_frames = 8;
  int max_masks_video = 2;
  int max_masks_image = 32;
};

/// Chooses a dataset proportionally to its weight, then a record uniformly;
/// videos are windowed to num_frames; object count is capped per the
/// image/video limits.
class MixtureSampler {
 public:
  MixtureSampler(std::vector<LoadedDataset> datasets, SamplerOptions opts)
      : datasets_(std::move(datasets)), opts_(opts) {
    if (datasets_.empty()) throw EmptyDataset("no datasets in mixture");
    double total = 0;
    for (const auto& d : datasets_) {
      if (d.records.empty()) throw EmptyDataset("dataset has no records: " + d.name);
      if (d.weight <= 0) throw ConfigError("mixture weights must be > 0");
      total += d.weight;
    }
    cumulative_.reserve(datasets_.size());
    double acc = 0;
    for (const auto& d : datasets_) {
      acc += d.weight / total;
      cumulative_.push_back(acc);
    }
  }

  const std::vector<LoadedDataset>& datasets() const { return datasets_; }

  int pick_dataset(Rng& rng) const {
    double u = rng.uniform();
    for (size_t i = 0; i < cumulative_.size(); ++i)
      if (u < cumulative_[i]) return static_cast<int>(i);
    return static_cast<int>(cumulative_.size()) - 1;
  }

  TrainRecord sample(Rng& rng) const {
    const LoadedDataset& ds = datasets_[static_cast<size_t>(pick_dataset(rng))];
    const VideoRecord& rec = ds.records[static_cast<size_t>(
        rng.uniform_int(0, static_cast<int>(ds.records.size()) - 1))];

    TrainRecord out;
    out.dataset = ds.name;
    out.route = ds.route;
    out.video_id = rec.video_id;

    int total_frames = static_cast<int>(rec.frame_paths.size());
    int take = std::min(opts_.num_frames, total_frames);
    int start = total_frames > take ? rng.uniform_int(0, total_frames - take) : 0;

    VideoClip clip;
    for (int i = 0; i < take; ++i) {
      clip.frames.push_back(
          read_ppm((std::filesystem::path(ds.base_dir) / rec.frame_paths[static_cast<size_t>(
                        start + i)]).string()));
      clip.timestamps.push_back(start + i);
    }
    out.clip = std::move(clip);

    std::vector<ObjectAnnotation> objects = rec.objects;
    if (take < total_frames) {
      for (auto& obj : objects)
        if (obj.masklet)
          obj.masklet = std::vector<Mask>(obj.masklet->begin() + start,
                                          obj.masklet->begin() + start + take);
    }
    int max_objects = take == 1 ? opts_.max_masks_image : opts_.max_masks_video;
    while (static_cast<int>(objects.size()) > max_objects) {
      objects.erase(objects.begin() +
                    rng.uniform_int(0, static_cast<int>(objects.size()) - 1));
    }
    out.objects = std::move(objects);
    return out;
  }

 private:
  std::vector<LoadedDataset> datasets_;
  SamplerOptions opts_;
  std::vector<double> cumulative_;
};

// ---------------------------------------------------------------------------
// Optimizer + loop
// ---------------------------------------------------------------------------

struct TrainerOptions {
  int steps = 2000;
  int batch_size = 8;
  double lr = 1e-3;
  int warmup_steps = 100;
  double weight_decay = 0.05;
  double grad_clip = 0.1;  // global l2 norm ceiling
  double adam_beta1 = 0.9, adam_beta2 = 0.999, adam_eps = 1e-8;
  double layerwise_lr_decay = 0.0;  // 0 disables; applies to backbone blocks
  uint64_t seed = 0;
  int threads = 2;
  int eval_every = 0;
  int eval_records = 8;
  int ckpt_every = 0;
  std::string out_dir;
  std::string config_hash;
  SamplerOptions sampler;
  LossWeights weights;
};

struct StepStats {
  LossTerms terms;   // batch means
  double grad_norm = 0;
  double lr = 0;
};

/// Global l2-norm clipping: gradients whose joint norm exceeds `max_norm` are
/// rescaled to exactly `max_norm`. Returns the pre-clip norm.
template <typename S>
double clip_global_norm(GradMap<S>& grads, double max_norm) {
  double sq = 0;
  for (const auto& [name, g] : grads)
    for (int64_t i = 0; i < g.numel(); ++i) sq += static_cast<double>(g[i]) * g[i];
  double norm = std::sqrt(sq);
  if (max_norm > 0 && norm > max_norm) {
    double s = max_norm / norm;
    for (auto& [name, g] : grads)
      for (int64_t i = 0; i < g.numel(); ++i) g[i] = static_cast<S>(g[i] * s);
  }
  return norm;
}

template <typename S>
class Trainer {
 public:
  Trainer(VoCapModel<S>& model, MixtureSampler sampler, TrainerOptions opts)
      : model_(&model), sampler_(std::move(sampler)), opts_(opts), rng_(opts.seed) {
    for (const auto& [name, tensor] : model_->params().all()) {
      adam_m_.emplace(name, Tensor<S>::zeros(tensor.shape()));
      adam_v_.emplace(name, Tensor<S>::zeros(tensor.shape()));
    }
  }

  double lr_at(int step) const {
    double base = opts_.lr;
    if (step < opts_.warmup_steps)
      return base * static_cast<double>(step + 1) / std::max(1, opts_.warmup_steps);
    double progress = opts_.steps <= opts_.warmup_steps
                          ? 1.0
                          : static_cast<double>(step - opts_.warmup_steps) /
                                static_cast<double>(opts_.steps - opts_.warmup_steps);
    return base * 0.5 * (1.0 + std::cos(M_PI * std::min(1.0, progress)));
  }

  /// One optimizer step over a freshly sampled batch.
  StepStats step() {
    std::vector<TrainRecord> batch;
    batch.reserve(static_cast<size_t>(opts_.batch_size));
    for (int i = 0; i < opts_.batch_size; ++i) batch.push_back(sampler_.sample(rng_));
    return step_on(batch);
  }

  /// One optimizer step over an explicit batch (used by tests).
  StepStats step_on(const std::vector<TrainRecord>& batch) {
    const int B = static_cast<int>(batch.size());
    struct WorkerOut {
      GradMap<S> grads;
      LossTerms terms;
    };
    auto run_record = [&](const TrainRecord& rec) {
      WorkerOut wo;
      Tape<S> tape;
      ParamCtx<S> pc(tape, model_->params(), true);
      RecordGraph<S> g = build_record_graph(*model_, tape, pc, rec, opts_.weights);
      if (!std::isfinite(g.raw.weighted_total))
        throw NonFiniteLoss("record " + rec.video_id + " produced loss " +
                            std::to_string(g.raw.weighted_total));
      Var scaled = tape.scale(g.loss, static_cast<S>(1.0 / static_cast<double>(B)));
      tape.backward(scaled);
      pc.collect_grads(wo.grads);
      wo.terms = g.raw;
      return wo;
    };

    std::vector<WorkerOut> outs(static_cast<size_t>(B));
    int workers = std::max(1, std::min(opts_.threads, B));
    if (workers == 1) {
      for (int i = 0; i < B; ++i) outs[static_cast<size_t>(i)] = run_record(batch[static_cast<size_t>(i)]);
    } else {
      std::atomic<int> next{0};
      std::vector<std::future<void>> futs;
      std::vector<std::exception_ptr> errors(static_cast<size_t>(workers));
      for (int wi = 0; wi < workers; ++wi) {
        futs.push_back(std::async(std::launch::async, [&, wi]() {
          try {
            while (true) {
              int i = next.fetch_add(1);
              if (i >= B) break;
              outs[static_cast<size_t>(i)] = run_record(batch[static_cast<size_t>(i)]);
            }
          } catch (...) {
            errors[static_cast<size_t>(wi)] = std::current_exception();
          }
        }));
      }
      for (auto& f : futs) f.get();
      for (auto& e : errors)
        if (e) std::rethrow_exception(e);
    }

    // Deterministic accumulation in record order.
    GradMap<S> grads;
    LossTerms batch_terms;
    for (const auto& wo : outs) {
      batch_terms.add(wo.terms);
      for (const auto& [name, g] : wo.grads) {
        auto it = grads.find(name);
        if (it == grads.end())
          grads.emplace(name, g.clone());
        else
          it->second.mat(g.numel(), 1) += g.mat(g.numel(), 1);
      }
    }
    batch_terms.scale(1.0 / static_cast<double>(B));

    StepStats stats;
    stats.terms = batch_terms;
    stats.lr = lr_at(step_count_);
    stats.grad_norm = apply_adamw(grads, stats.lr);
    ++step_count_;
    return stats;
  }

  struct RunSummary {
    int steps = 0;
    LossTerms last;
    std::string final_checkpoint;
  };

  RunSummary run() {
    namespace fs = std::filesystem;
    std::ofstream log;
    if (!opts_.out_dir.empty()) {
      fs::create_directories(opts_.out_dir);
      log.open((fs::path(opts_.out_dir) / "metrics.jsonl").string());
    }
    RunSummary summary;
    for (int s = 0; s < opts_.steps; ++s) {
      StepStats st = step();
      summary.last = st.terms;
      if (log.is_open()) {
        log << "{\"step\":" << s << ",\"loss\":" << st.terms.weighted_total
            << ",\"focal\":" << st.terms.focal << ",\"dice\":" << st.terms.dice
            << ",\"iou\":" << st.terms.iou << ",\"occlusion\":" << st.terms.occlusion
            << ",\"caption\":" << st.terms.caption << ",\"grad_norm\":" << st.grad_norm
            << ",\"lr\":" << st.lr << "}\n";
        log.flush();
      }
      if (opts_.ckpt_every > 0 && (s + 1) % opts_.ckpt_every == 0 && !opts_.out_dir.empty())
        model_->save((fs::path(opts_.out_dir) / ("ckpt_" + std::to_string(s + 1) + ".bin")).string(),
                     opts_.config_hash);
      if (opts_.eval_every > 0 && (s + 1) % opts_.eval_every == 0 && log.is_open()) {
        auto ev = quick_eval();
        log << "{\"step\":" << s << ",\"eval_j\":" << ev.first << ",\"eval_em\":" << ev.second
            << "}\n";
        log.flush();
      }
    }
    summary.steps = opts_.steps;
    if (!opts_.out_dir.empty()) {
      summary.final_checkpoint = (fs::path(opts_.out_dir) / "ckpt_final.bin").string();
      model_->save(summary.final_checkpoint, opts_.config_hash);
    }
    return summary;
  }

  int step_count() const { return step_count_; }

  /// Mean mask-prompt J and caption exact-match over a few fixed records.
  std::pair<double, double> quick_eval() const {
    InferenceEngine<S> engine(*model_);
    double j_sum = 0;
    int j_n = 0, em_hit = 0, em_n = 0;
    for (const auto& ds : sampler_.datasets()) {
      int limit = std::min<int>(opts_.eval_records, static_cast<int>(ds.records.size()));
      for (int i = 0; i < limit; ++i) {
        const VideoRecord& rec = ds.records[static_cast<size_t>(i)];
        VideoClip clip = load_clip(rec, ds.base_dir);
        for (const auto& obj : rec.objects) {
          ObjectResult res = engine.infer_online(clip, obj.prompt);
          if (obj.masklet) {
            j_sum += region_j(res.masklet.masks, *obj.masklet);
            ++j_n;
          }
          if (obj.caption) {
            em_hit += res.caption == *obj.caption;
            ++em_n;
          }
        }
      }
      break;  // first dataset only; this is a cheap trend signal
    }
    return {j_n ? j_sum / j_n : 0.0, em_n ? static_cast<double>(em_hit) / em_n : 0.0};
  }

 private:
  /// Clips the global gradient norm, then applies decoupled AdamW. Returns the
  /// pre-clip norm.
  double apply_adamw(GradMap<S>& grads, double lr) {
    double norm = clip_global_norm(grads, opts_.grad_clip);
    double t_step = static_cast<double>(step_count_ + 1);
    double bc1 = 1.0 - std::pow(opts_.adam_beta1, t_step);
    double bc2 = 1.0 - std::pow(opts_.adam_beta2, t_step);
    for (auto& [name, g] : grads) {
      Tensor<S>& p = model_->params().get(name);
      Tensor<S>& m = adam_m_.at(name);
      Tensor<S>& v = adam_v_.at(name);
      double plr = lr * lr_factor(name);
      bool decay = p.rank() >= 2;
      for (int64_t i = 0; i < p.numel(); ++i) {
        double gi = static_cast<double>(g[i]);
        double mi = opts_.adam_beta1 * m[i] + (1 - opts_.adam_beta1) * gi;
        double vi = opts_.adam_beta2 * v[i] + (1 - opts_.adam_beta2) * gi * gi;
        m[i] = static_cast<S>(mi);
        v[i] = static_cast<S>(vi);
        double update = (mi / bc1) / (std::sqrt(vi / bc2) + opts_.adam_eps);
        double pi = static_cast<double>(p[i]);
        if (decay) pi -= plr * opts_.weight_decay * pi;
        p[i] = static_cast<S>(pi - plr * update);
      }
    }
    return norm;
  }

  /// Layer-wise decay factor (1.0 when disabled); earlier backbone blocks
  /// train slower, mirroring the pretrained-backbone schedule.
  double lr_factor(const std::string& name) const {
    double d = opts_.layerwise_lr_decay;
    if (d <= 0 || d >= 1.0) return 1.0;
    if (name.rfind("backbone/block", 0) == 0) {
      size_t pos = std::string("backbone/block").size();
      int idx = std::atoi(name.c_str() + pos);
      return std::pow(d, model_->config().depth - idx);
    }
    if (name.rfind("backbone/patch_embed", 0) == 0 || name.rfind("backbone/pos_emb", 0) == 0)
      return std::pow(d, model_->config().depth + 1);
    return 1.0;
  }

  VoCapModel<S>* model_;
  MixtureSampler sampler_;
  TrainerOptions opts_;
  Rng rng_;
  int step_count_ = 0;
  std::map<std::string, Tensor<S>> adam_m_, adam_v_;
};

}  // namespace vocap
