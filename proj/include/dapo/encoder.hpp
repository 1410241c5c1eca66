#pragma once

#include <functional>
#include <string>
#include <vector>

#include "dapo/rng.hpp"
#include "dapo/tensor.hpp"

namespace dapo {

struct EncoderConfig {
  int width = 64;
  int depth = 6;
  int heads = 4;
  int patch_size = 8;
  int image_size = 64;
  std::vector<int> tap_layers = {2, 3, 4, 6};  // 1-based layer indices
  int prefix_len = 4;
  int text_prefix_depth = 6;  // N_d; vision side is always full depth
  double alpha = 0.1;         // progressive blend weight
  int max_text_len = 32;
  double ln_eps = 1e-5;

  int grid() const { return image_size / patch_size; }
  int patch_count() const { return grid() * grid(); }
  int patch_dim() const { return patch_size * patch_size * 3; }
  void validate() const;
};

struct LayerWeights {
  Tensor ln1_gain, ln1_bias;
  Tensor wq, bq, wk, bk, wv, bv, wo, bo;
  Tensor ln2_gain, ln2_bias;
  Tensor w1, b1, w2, b2;
};

struct TowerWeights {
  std::vector<LayerWeights> layers;
  Tensor final_ln_gain, final_ln_bias;
  Tensor proj;  // width x width map into the shared space
};

// Frozen-after-pretraining transformer weights for both encoders.
struct BackboneWeights {
  TowerWeights text;
  Tensor token_emb;     // vocab x width
  Tensor text_pos_emb;  // max_text_len x width

  TowerWeights vision;
  Tensor patch_embed;  // patch_dim x width
  Tensor patch_bias;   // width
  Tensor cls_token;    // 1 x width
  Tensor vision_pos_emb;  // (1 + patch_count) x width

  bool frozen = false;

  static BackboneWeights init(const EncoderConfig& cfg, int vocab_size, Rng& rng);

  // Deterministic traversal order; used by the optimizer, serialization and
  // the freeze-contract hash alike.
  void for_each_param(const std::function<void(const std::string&, Tensor&)>& fn);
  void set_requires_grad(bool b);
  std::size_t param_count();

  // Mean / stddev over all token embedding coordinates (prompt init stats).
  std::pair<double, double> token_embedding_stats() const;
};

// Per-layer learnable prefix blocks, each prefix_len x width.
struct PrefixState {
  std::vector<Tensor> text_blocks;    // text_prefix_depth entries
  std::vector<Tensor> vision_blocks;  // depth entries

  static PrefixState init(const EncoderConfig& cfg, Rng& rng, double mean,
                          double stddev);
  static PrefixState zeros(const EncoderConfig& cfg);
  void for_each_param(const std::function<void(const std::string&, Tensor&)>& fn);
};

// Prefix block fed to layer j (1-based): j == 1 takes U_1 as-is, deeper
// layers blend fresh tokens with the previous layer's prefix output.
// Returns the full layer input [T_prev ; block].
Tensor progressive_prefix_step(const Tensor& t_prev, const Tensor& u_j,
                               const Tensor& o_prev, double alpha, int j);

struct ImageEncodeResult {
  Tensor global;              // 1 x width, L2-normalized
  std::vector<Tensor> taps;   // per tap layer: patch_count x width, raw
};

// token_rows: embedded original sequence (rows already include start/end
// positions), pooled_index picks the row whose final representation is
// projected and normalized. Prefix may be null (plain forward).
Tensor encode_text(const Tensor& token_rows, int pooled_index,
                   const BackboneWeights& bb, const PrefixState* prefix,
                   const EncoderConfig& cfg, bool progressive);

ImageEncodeResult encode_image(const Tensor& image, const BackboneWeights& bb,
                               const PrefixState* prefix,
                               const EncoderConfig& cfg, bool progressive);

// Embeds a plain token id sequence (start/end added here) for captions.
Tensor embed_token_ids(const std::vector<int>& ids, const BackboneWeights& bb,
                       int start_id, int end_id);

}  // namespace dapo
