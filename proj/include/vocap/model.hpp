#pragma once

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>

#include "vocap/backbone.hpp"
#include "vocap/decoder.hpp"
#include "vocap/domain.hpp"
#include "vocap/memory.hpp"
#include "vocap/prompts.hpp"
#include "vocap/text_stack.hpp"

namespace vocap {

template <typename To, typename From>
Tensor<To> cast_tensor(const Tensor<From>& in) {
  Tensor<To> out(in.shape());
  for (int64_t i = 0; i < in.numel(); ++i) out[i] = static_cast<To>(in[i]);
  return out;
}

/// The full promptable segmentation-and-captioning network: one parameter
/// store shared by the visual backbone, memory system, prompt encoders, mask
/// decoder, caption extractor, and the shared text stack.
template <typename S>
class VoCapModel {
 public:
  explicit VoCapModel(ModelConfig cfg, uint64_t seed = 0)
      : cfg_(cfg), store_(seed) {
    cfg_.validate();
    backbone_ = VisualBackbone<S>(store_, cfg_);
    memory_ = MemorySystem<S>(store_, cfg_);
    prompts_ = PromptEncoders<S>(store_, cfg_);
    decoder_ = MaskDecoder<S>(store_, cfg_);
    caption_ = CaptionExtractor<S>(store_, cfg_);
    text_ = SharedTextStack<S>(store_, "text", cfg_);
  }

  const ModelConfig& config() const { return cfg_; }
  ParamStore<S>& params() { return store_; }
  const ParamStore<S>& params() const { return store_; }

  const VisualBackbone<S>& backbone() const { return backbone_; }
  const MemorySystem<S>& memory() const { return memory_; }
  const PromptEncoders<S>& prompts() const { return prompts_; }
  const MaskDecoder<S>& decoder() const { return decoder_; }
  const CaptionExtractor<S>& caption() const { return caption_; }
  const SharedTextStack<S>& text() const { return text_; }

  /// Parameters used only by the caption path (caption extractor, caption
  /// tokens, and the decoder-role-only vocabulary projection).
  std::vector<std::string> caption_only_param_names() const {
    std::vector<std::string> names = store_.names_with_prefix("caption/");
    names.push_back(text_.vocab_proj().w);
    names.push_back(text_.vocab_proj().b);
    return names;
  }

  std::vector<std::string> mask_decoder_only_param_names() const {
    return store_.names_with_prefix("decoder/");
  }

  Var frame_leaf(Tape<S>& tape, const Tensor<float>& frame) const {
    if constexpr (std::is_same_v<S, float>) {
      return tape.constant(frame);
    } else {
      return tape.constant(cast_tensor<S>(frame));
    }
  }

  Tensor<S> mask_tensor(const Mask& m) const {
    Tensor<S> t({m.h, m.w});
    for (int64_t i = 0; i < t.numel(); ++i) t[i] = static_cast<S>(m.v[i]);
    return t;
  }

  // ---- checkpoint io --------------------------------------------------------

  void save(const std::string& path, const std::string& config_hash) const {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot write checkpoint: " + path);
    out.write("VOCAPCK1", 8);
    uint32_t ssize = sizeof(S);
    write_pod(out, ssize);
    write_config(out, cfg_);
    write_string(out, config_hash);
    uint64_t count = store_.all().size();
    write_pod(out, count);
    for (const auto& [name, tensor] : store_.all()) {
      write_string(out, name);
      uint32_t rank = static_cast<uint32_t>(tensor.rank());
      write_pod(out, rank);
      for (int i = 0; i < tensor.rank(); ++i) {
        uint32_t d = static_cast<uint32_t>(tensor.dim(i));
        write_pod(out, d);
      }
      out.write(reinterpret_cast<const char*>(tensor.data()),
                static_cast<std::streamsize>(tensor.numel() * sizeof(S)));
    }
    if (!out) throw DataError("short write on checkpoint: " + path);
  }

  struct Loaded {
    VoCapModel model;
    std::string config_hash;
  };

  static Loaded load(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot read checkpoint: " + path);
    char magic[8];
    in.read(magic, 8);
    if (!in || std::string(magic, 8) != "VOCAPCK1") throw DataError("bad checkpoint magic");
    uint32_t ssize = 0;
    read_pod(in, ssize);
    ModelConfig cfg = read_config(in);
    std::string hash = read_string(in);
    VoCapModel model(cfg, 0);
    uint64_t count = 0;
    read_pod(in, count);
    size_t expected = model.store_.all().size();
    if (count != expected) throw DataError("checkpoint parameter count mismatch");
    for (uint64_t i = 0; i < count; ++i) {
      std::string name = read_string(in);
      uint32_t rank = 0;
      read_pod(in, rank);
      std::vector<int> shape(rank);
      int64_t numel = 1;
      for (uint32_t r = 0; r < rank; ++r) {
        uint32_t d = 0;
        read_pod(in, d);
        shape[r] = static_cast<int>(d);
        numel *= d;
      }
      if (!model.store_.has(name)) throw DataError("unknown parameter in checkpoint: " + name);
      Tensor<S>& dst = model.store_.get(name);
      if (dst.shape() != shape) throw DataError("parameter shape mismatch: " + name);
      if (ssize == sizeof(S)) {
        in.read(reinterpret_cast<char*>(dst.data()),
                static_cast<std::streamsize>(numel * sizeof(S)));
      } else if (ssize == 4) {
        std::vector<float> buf(static_cast<size_t>(numel));
        in.read(reinterpret_cast<char*>(buf.data()),
                static_cast<std::streamsize>(numel * sizeof(float)));
        for (int64_t j = 0; j < numel; ++j) dst[j] = static_cast<S>(buf[j]);
      } else if (ssize == 8) {
        std::vector<double> buf(static_cast<size_t>(numel));
        in.read(reinterpret_cast<char*>(buf.data()),
                static_cast<std::streamsize>(numel * sizeof(double)));
        for (int64_t j = 0; j < numel; ++j) dst[j] = static_cast<S>(buf[j]);
      } else {
        throw DataError("unsupported checkpoint scalar size");
      }
      if (!in) throw DataError("truncated checkpoint");
    }
    return Loaded{std::move(model), hash};
  }

 private:
  template <typename T>
  static void write_pod(std::ofstream& out, const T& v) {
    out.write(reinterpret_cast<const char*>(&v), sizeof(T));
  }
  template <typename T>
  static void read_pod(std::ifstream& in, T& v) {
    in.read(reinterpret_cast<char*>(&v), sizeof(T));
    if (!in) throw DataError("truncated checkpoint");
  }
  static void write_string(std::ofstream& out, const std::string& s) {
    uint32_t n = static_cast<uint32_t>(s.size());
    write_pod(out, n);
    out.write(s.data(), n);
  }
  static std::string read_string(std::ifstream& in) {
    uint32_t n = 0;
    read_pod(in, n);
    std::string s(n, '\0');
    in.read(s.data(), n);
    if (!in) throw DataError("truncated checkpoint");
    return s;
  }
  static void write_config(std::ofstream& out, const ModelConfig& c) {
    int fields[] = {c.input_size,    c.patch_size,  c.embed_dim,      c.depth,
                    c.num_heads,     c.mlp_ratio,   c.memory_dim,     c.memory_capacity,
                    c.memory_layers, c.decoder_blocks, c.text_depth,  c.text_heads,
                    c.caption_tokens, c.max_text_len};
    uint32_t n = sizeof(fields) / sizeof(int);
    write_pod(out, n);
    for (uint32_t i = 0; i < n; ++i) write_pod(out, fields[i]);
  }
  static ModelConfig read_config(std::ifstream& in) {
    uint32_t n = 0;
    read_pod(in, n);
    if (n != 14) throw DataError("unsupported checkpoint config layout");
    int f[14];
    for (uint32_t i = 0; i < n; ++i) read_pod(in, f[i]);
    ModelConfig c;
    c.input_size = f[0];
    c.patch_size = f[1];
    c.embed_dim = f[2];
    c.depth = f[3];
    c.num_heads = f[4];
    c.mlp_ratio = f[5];
    c.memory_dim = f[6];
    c.memory_capacity = f[7];
    c.memory_layers = f[8];
    c.decoder_blocks = f[9];
    c.text_depth = f[10];
    c.text_heads = f[11];
    c.caption_tokens = f[12];
    c.max_text_len = f[13];
    return c;
  }

  ModelConfig cfg_;
  ParamStore<S> store_;
  VisualBackbone<S> backbone_;
  MemorySystem<S> memory_;
  PromptEncoders<S> prompts_;
  MaskDecoder<S> decoder_;
  CaptionExtractor<S> caption_;
  SharedTextStack<S> text_;
};

}  // namespace vocap
