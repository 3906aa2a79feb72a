#include "vocap/dataset.hpp"

#include <filesystem>
#include <fstream>

#include "json.hpp"

namespace vocap {

using nlohmann::json;

namespace {

json prompt_to_json(const PromptSpec& p) {
  json j;
  switch (p.kind) {
    case PromptKind::box:
      j["kind"] = "box";
      j["box"] = {p.box.x_min, p.box.y_min, p.box.x_max, p.box.y_max};
      break;
    case PromptKind::mask:
      j["kind"] = "mask";
      j["rle"] = rle_encode(p.mask);
      j["h"] = p.mask.h;
      j["w"] = p.mask.w;
      break;
    case PromptKind::text:
      j["kind"] = "text";
      j["text"] = p.text;
      break;
  }
  return j;
}

PromptSpec prompt_from_json(const json& j) {
  std::string kind = j.at("kind").get<std::string>();
  if (kind == "box") {
    auto b = j.at("box");
    return PromptSpec::make_box({b.at(0).get<double>(), b.at(1).get<double>(),
                                 b.at(2).get<double>(), b.at(3).get<double>()});
  }
  if (kind == "mask") {
    int h = j.at("h").get<int>();
    int w = j.at("w").get<int>();
    return PromptSpec::make_mask(rle_decode(j.at("rle").get<std::string>(), h, w));
  }
  if (kind == "text") return PromptSpec::make_text(j.at("text").get<std::string>());
  throw DataError("unknown prompt kind: " + kind);
}

}  // namespace

std::string dir_of(const std::string& path) {
  std::filesystem::path p(path);
  return p.has_parent_path() ? p.parent_path().string() : std::string(".");
}

std::vector<VideoRecord> read_dataset(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open dataset: " + path);
  std::vector<VideoRecord> records;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    json j;
    try {
      j = json::parse(line);
    } catch (const json::exception& e) {
      throw DataError(path + ":" + std::to_string(line_no) + ": " + e.what());
    }
    VideoRecord rec;
    rec.video_id = j.at("video_id").get<std::string>();
    for (const auto& fp : j.at("frame_paths")) rec.frame_paths.push_back(fp.get<std::string>());
    int mask_h = j.value("height", 0);
    int mask_w = j.value("width", 0);
    for (const auto& jo : j.at("objects")) {
      ObjectAnnotation obj;
      obj.object_id = jo.at("object_id").get<std::string>();
      obj.prompt = prompt_from_json(jo.at("prompt"));
      if (jo.contains("masklet_rle")) {
        if (mask_h <= 0 || mask_w <= 0)
          throw DataError(path + ": record with masklet_rle lacks height/width");
        std::vector<Mask> masks;
        for (const auto& r : jo.at("masklet_rle"))
          masks.push_back(rle_decode(r.get<std::string>(), mask_h, mask_w));
        if (masks.size() != rec.frame_paths.size())
          throw DataError(path + ": masklet length != frame count for " + obj.object_id);
        obj.masklet = std::move(masks);
      }
      if (jo.contains("caption")) obj.caption = jo.at("caption").get<std::string>();
      rec.objects.push_back(std::move(obj));
    }
    records.push_back(std::move(rec));
  }
  return records;
}

void write_dataset(const std::string& path, const std::vector<VideoRecord>& records) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write dataset: " + path);
  for (const auto& rec : records) {
    json j;
    j["video_id"] = rec.video_id;
    j["frame_paths"] = rec.frame_paths;
    int h = 0, w = 0;
    for (const auto& obj : rec.objects) {
      if (obj.masklet && !obj.masklet->empty()) {
        h = (*obj.masklet)[0].h;
        w = (*obj.masklet)[0].w;
      } else if (obj.prompt.kind == PromptKind::mask) {
        h = obj.prompt.mask.h;
        w = obj.prompt.mask.w;
      }
    }
    if (h > 0) {
      j["height"] = h;
      j["width"] = w;
    }
    json objs = json::array();
    for (const auto& obj : rec.objects) {
      json jo;
      jo["object_id"] = obj.object_id;
      jo["prompt"] = prompt_to_json(obj.prompt);
      if (obj.masklet) {
        json rles = json::array();
        for (const auto& m : *obj.masklet) rles.push_back(rle_encode(m));
        jo["masklet_rle"] = std::move(rles);
      }
      if (obj.caption) jo["caption"] = *obj.caption;
      objs.push_back(std::move(jo));
    }
    j["objects"] = std::move(objs);
    out << j.dump() << "\n";
  }
  if (!out) throw DataError("short write: " + path);
}

std::vector<PredictionRecord> read_predictions(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open predictions: " + path);
  std::vector<PredictionRecord> out;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    json j = json::parse(line);
    PredictionRecord rec;
    rec.video_id = j.at("video_id").get<std::string>();
    for (const auto& jo : j.at("objects")) {
      PredictedObject obj;
      obj.object_id = jo.at("object_id").get<std::string>();
      obj.caption = jo.at("caption").get<std::string>();
      for (const auto& r : jo.at("masklet_rle")) obj.masklet_rle.push_back(r.get<std::string>());
      for (const auto& a : jo.at("appearance")) obj.appearance.push_back(a.get<bool>());
      for (const auto& v : jo.at("iou")) obj.iou.push_back(v.get<double>());
      rec.objects.push_back(std::move(obj));
    }
    out.push_back(std::move(rec));
  }
  return out;
}

void write_predictions(const std::string& path, const std::vector<PredictionRecord>& records) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write predictions: " + path);
  for (const auto& rec : records) {
    json j;
    j["video_id"] = rec.video_id;
    json objs = json::array();
    for (const auto& obj : rec.objects) {
      json jo;
      jo["object_id"] = obj.object_id;
      jo["caption"] = obj.caption;
      jo["masklet_rle"] = obj.masklet_rle;
      jo["appearance"] = obj.appearance;
      jo["iou"] = obj.iou;
      objs.push_back(std::move(jo));
    }
    j["objects"] = std::move(objs);
    out << j.dump() << "\n";
  }
}

VideoClip load_clip(const VideoRecord& record, const std::string& dataset_dir) {
  VideoClip clip;
  for (const auto& rel : record.frame_paths) {
    std::filesystem::path p = std::filesystem::path(dataset_dir) / rel;
    clip.frames.push_back(read_ppm(p.string()));
    clip.timestamps.push_back(static_cast<double>(clip.timestamps.size()));
  }
  if (clip.frames.empty()) throw DataError("record has no frames: " + record.video_id);
  return clip;
}

Tensor<float> read_ppm(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open image: " + path);
  std::string magic;
  in >> magic;
  if (magic != "P6") throw DataError("not a binary PPM: " + path);
  auto next_int = [&in, &path]() {
    int v;
    while (true) {
      in >> std::ws;
      if (in.peek() == '#') {
        std::string comment;
        std::getline(in, comment);
        continue;
      }
      if (!(in >> v)) throw DataError("bad PPM header: " + path);
      return v;
    }
  };
  int w = next_int();
  int h = next_int();
  int maxval = next_int();
  if (maxval != 255) throw DataError("unsupported PPM maxval: " + path);
  in.get();  // single whitespace after header
  std::vector<unsigned char> buf(static_cast<size_t>(w) * h * 3);
  in.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
  if (!in) throw DataError("truncated PPM: " + path);
  Tensor<float> frame({h, w, 3});
  for (size_t i = 0; i < buf.size(); ++i) frame[static_cast<int64_t>(i)] = buf[i] / 255.0f;
  return frame;
}

void write_ppm(const std::string& path, const Tensor<float>& frame) {
  if (frame.rank() != 3 || frame.dim(2) != 3) throw ShapeMismatch("write_ppm expects HxWx3");
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write image: " + path);
  out << "P6\n" << frame.dim(1) << " " << frame.dim(0) << "\n255\n";
  std::vector<unsigned char> buf(static_cast<size_t>(frame.numel()));
  for (int64_t i = 0; i < frame.numel(); ++i) {
    float v = std::min(1.0f, std::max(0.0f, frame[i]));
    buf[static_cast<size_t>(i)] = static_cast<unsigned char>(std::lround(v * 255.0f));
  }
  out.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
  if (!out) throw DataError("short write: " + path);
}

}  // namespace vocap
