#pragma once

#include "vocap/common.hpp"
#include "vocap/tape.hpp"

namespace vocap {

/// Image features on a tape: [h*w, d] rows plus grid dims.
struct TokenGrid {
  Var rows;
  int h = 0, w = 0, d = 0;
};

/// A [h, w, c] image tensor on a tape.
struct ImageVar {
  Var v;
  int h = 0, w = 0, c = 0;
};

struct ModelConfig {
  int input_size = 128;    // largest H = W the positional table covers
  int patch_size = 16;
  int embed_dim = 128;     // d
  int depth = 4;
  int num_heads = 4;
  int mlp_ratio = 2;
  int memory_dim = 64;     // d'
  int memory_capacity = 7; // pinned prompt entry + recent frames
  int memory_layers = 2;
  int decoder_blocks = 2;
  int text_depth = 6;
  int text_heads = 4;
  int caption_tokens = 32; // l
  int max_text_len = 64;

  static constexpr int vocab_size = 259;  // 256 bytes + BOS/EOS/PAD
  static constexpr int bos_id = 256;
  static constexpr int eos_id = 257;
  static constexpr int pad_id = 258;

  int grid() const { return input_size / patch_size; }
  int max_text_positions() const { return caption_tokens + max_text_len + 2; }

  void validate() const {
    if (input_size % patch_size != 0) throw ConfigError("input_size not divisible by patch_size");
    if (embed_dim % num_heads != 0) throw ConfigError("embed_dim not divisible by num_heads");
    if (patch_size < 4 || (patch_size & (patch_size - 1)) != 0)
      throw ConfigError("patch_size must be a power of two >= 4");
    if (embed_dim % 4 != 0) throw ConfigError("embed_dim must be divisible by 4");
    if (memory_dim % num_heads != 0) throw ConfigError("memory_dim not divisible by num_heads");
    if (caption_tokens <= 0 || text_depth <= 0 || depth <= 0)
      throw ConfigError("depths and token counts must be positive");
  }
};

}  // namespace vocap
