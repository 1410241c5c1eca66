#include "dapo/encoder.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace dapo {

namespace {

constexpr double kMaskBias = -1e30;

Tensor random_matrix(Shape shape, Rng& rng, double mean, double stddev) {
  Tensor t(std::move(shape));
  for (double& v : t.data()) v = rng.normal(mean, stddev);
  return t;
}

LayerWeights init_layer(int d, Rng& rng) {
  double w_std = 1.0 / std::sqrt(static_cast<double>(d));
  LayerWeights lw;
  lw.ln1_gain = Tensor(Shape{d}, 1.0);
  lw.ln1_bias = Tensor(Shape{d}, 0.0);
  lw.wq = random_matrix({d, d}, rng, 0.0, w_std);
  lw.bq = Tensor(Shape{d}, 0.0);
  lw.wk = random_matrix({d, d}, rng, 0.0, w_std);
  lw.bk = Tensor(Shape{d}, 0.0);
  lw.wv = random_matrix({d, d}, rng, 0.0, w_std);
  lw.bv = Tensor(Shape{d}, 0.0);
  lw.wo = random_matrix({d, d}, rng, 0.0, w_std);
  lw.bo = Tensor(Shape{d}, 0.0);
  lw.ln2_gain = Tensor(Shape{d}, 1.0);
  lw.ln2_bias = Tensor(Shape{d}, 0.0);
  lw.w1 = random_matrix({d, 4 * d}, rng, 0.0, w_std);
  lw.b1 = Tensor(Shape{4 * d}, 0.0);
  lw.w2 = random_matrix({4 * d, d}, rng, 0.0, 1.0 / std::sqrt(4.0 * d));
  lw.b2 = Tensor(Shape{d}, 0.0);
  return lw;
}

TowerWeights init_tower(const EncoderConfig& cfg, Rng& rng) {
  TowerWeights tw;
  for (int j = 0; j < cfg.depth; ++j) tw.layers.push_back(init_layer(cfg.width, rng));
  tw.final_ln_gain = Tensor(Shape{cfg.width}, 1.0);
  tw.final_ln_bias = Tensor(Shape{cfg.width}, 0.0);
  tw.proj = random_matrix({cfg.width, cfg.width}, rng, 0.0,
                          1.0 / std::sqrt(static_cast<double>(cfg.width)));
  return tw;
}

// One pre-LN transformer block. mask_row, when defined, is a {n} bias added
// to every query's attention logits (kMaskBias on inert key positions).
Tensor transformer_block(const Tensor& x, const LayerWeights& lw, int heads,
                         double eps, const Tensor& mask_row) {
  int n = x.dim(0), d = x.dim(1);
  int dh = d / heads;
  double att_scale = 1.0 / std::sqrt(static_cast<double>(dh));

  Tensor h = layer_norm(x, lw.ln1_gain, lw.ln1_bias, eps);
  Tensor q = add(matmul(h, lw.wq), lw.bq);
  Tensor k = add(matmul(h, lw.wk), lw.bk);
  Tensor v = add(matmul(h, lw.wv), lw.bv);
  std::vector<Tensor> head_outs;
  head_outs.reserve(static_cast<std::size_t>(heads));
  for (int hd = 0; hd < heads; ++hd) {
    Tensor qh = slice_cols(q, hd * dh, dh);
    Tensor kh = slice_cols(k, hd * dh, dh);
    Tensor vh = slice_cols(v, hd * dh, dh);
    Tensor logits = scale(matmul(qh, transpose(kh)), att_scale);
    if (mask_row.defined()) logits = add(logits, mask_row);
    head_outs.push_back(matmul(softmax(logits, 1), vh));
  }
  Tensor attn = add(matmul(concat_cols(head_outs), lw.wo), lw.bo);
  Tensor x1 = add(x, attn);

  Tensor h2 = layer_norm(x1, lw.ln2_gain, lw.ln2_bias, eps);
  Tensor m = add(matmul(gelu(add(matmul(h2, lw.w1), lw.b1)), lw.w2), lw.b2);
  (void)n;
  return add(x1, m);
}

struct TowerResult {
  Tensor final_rows;          // original positions only
  std::vector<Tensor> taps;   // requested tap slices
};

// Shared trunk for both towers. Prefix blocks are re-injected at every
// prefixed layer; all-zero blocks are masked out of attention so they are
// inert (this is what makes the zero-init/alpha=0 case collapse to the
// plain forward).
TowerResult tower_forward(Tensor x0, const TowerWeights& tw,
                          const std::vector<Tensor>* prefix_blocks,
                          int prefix_depth, double alpha, bool progressive,
                          const EncoderConfig& cfg,
                          const std::vector<int>& tap_layers, int tap_start,
                          int tap_count) {
  int n0 = x0.dim(0);
  int plen = cfg.prefix_len;
  TowerResult res;
  Tensor t = x0;
  Tensor o_prev;
  for (int j = 1; j <= cfg.depth; ++j) {
    const LayerWeights& lw = tw.layers[static_cast<std::size_t>(j - 1)];
    bool with_prefix = prefix_blocks != nullptr && plen > 0 && j <= prefix_depth;
    Tensor out;
    if (with_prefix) {
      const Tensor& u = (*prefix_blocks)[static_cast<std::size_t>(j - 1)];
      Tensor xin = progressive_prefix_step(t, u, o_prev,
                                           progressive ? alpha : 0.0,
                                           progressive ? j : 1);
      Tensor block = slice_rows(xin, n0, plen);
      Tensor mask_row;
      bool any_masked = false;
      std::vector<double> mask(static_cast<std::size_t>(n0 + plen), 0.0);
      for (int r = 0; r < plen; ++r) {
        bool all_zero = true;
        for (int c = 0; c < cfg.width; ++c)
          if (block.at({r, c}) != 0.0) {
            all_zero = false;
            break;
          }
        if (all_zero) {
          mask[static_cast<std::size_t>(n0 + r)] = kMaskBias;
          any_masked = true;
        }
      }
      if (any_masked) mask_row = Tensor(Shape{n0 + plen}, mask);
      out = transformer_block(xin, lw, cfg.heads, cfg.ln_eps, mask_row);
      o_prev = slice_rows(out, n0, plen);
      t = slice_rows(out, 0, n0);
    } else {
      out = transformer_block(t, lw, cfg.heads, cfg.ln_eps, Tensor());
      o_prev = Tensor();
      t = slice_rows(out, 0, n0);
    }
    if (std::find(tap_layers.begin(), tap_layers.end(), j) != tap_layers.end())
      res.taps.push_back(slice_rows(out, tap_start, tap_count));
  }
  res.final_rows = t;
  return res;
}

}  // namespace

void EncoderConfig::validate() const {
  if (width <= 0 || depth <= 0 || heads <= 0)
    throw std::invalid_argument("encoder config: width/depth/heads must be positive");
  if (width % heads != 0)
    throw std::invalid_argument("encoder config: width must divide by heads");
  if (image_size % patch_size != 0)
    throw std::invalid_argument("encoder config: image_size must divide by patch_size");
  for (int t : tap_layers)
    if (t < 1 || t > depth)
      throw std::invalid_argument("encoder config: tap layer " + std::to_string(t) +
                                  " outside [1," + std::to_string(depth) + "]");
  if (prefix_len < 0)
    throw std::invalid_argument("encoder config: prefix_len must be >= 0");
  if (text_prefix_depth < 0 || text_prefix_depth > depth)
    throw std::invalid_argument("encoder config: text_prefix_depth outside [0,depth]");
  if (alpha < 0.0 || alpha >= 1.0)
    throw std::invalid_argument("encoder config: alpha must lie in [0,1)");
}

BackboneWeights BackboneWeights::init(const EncoderConfig& cfg, int vocab_size,
                                      Rng& rng) {
  cfg.validate();
  BackboneWeights bb;
  bb.text = init_tower(cfg, rng);
  bb.token_emb = random_matrix({vocab_size, cfg.width}, rng, 0.0, 0.02);
  bb.text_pos_emb = random_matrix({cfg.max_text_len, cfg.width}, rng, 0.0, 0.01);
  bb.vision = init_tower(cfg, rng);
  bb.patch_embed = random_matrix({cfg.patch_dim(), cfg.width}, rng, 0.0,
                                 1.0 / std::sqrt(static_cast<double>(cfg.patch_dim())));
  bb.patch_bias = Tensor(Shape{cfg.width}, 0.0);
  bb.cls_token = random_matrix({1, cfg.width}, rng, 0.0, 0.02);
  bb.vision_pos_emb =
      random_matrix({1 + cfg.patch_count(), cfg.width}, rng, 0.0, 0.01);
  return bb;
}

void BackboneWeights::for_each_param(
    const std::function<void(const std::string&, Tensor&)>& fn) {
  auto tower = [&](const std::string& base, TowerWeights& tw) {
    for (std::size_t j = 0; j < tw.layers.size(); ++j) {
      LayerWeights& lw = tw.layers[j];
      std::string p = base + ".layer" + std::to_string(j) + ".";
      fn(p + "ln1_gain", lw.ln1_gain);
      fn(p + "ln1_bias", lw.ln1_bias);
      fn(p + "wq", lw.wq);
      fn(p + "bq", lw.bq);
      fn(p + "wk", lw.wk);
      fn(p + "bk", lw.bk);
      fn(p + "wv", lw.wv);
      fn(p + "bv", lw.bv);
      fn(p + "wo", lw.wo);
      fn(p + "bo", lw.bo);
      fn(p + "ln2_gain", lw.ln2_gain);
      fn(p + "ln2_bias", lw.ln2_bias);
      fn(p + "w1", lw.w1);
      fn(p + "b1", lw.b1);
      fn(p + "w2", lw.w2);
      fn(p + "b2", lw.b2);
    }
    fn(base + ".final_ln_gain", tw.final_ln_gain);
    fn(base + ".final_ln_bias", tw.final_ln_bias);
    fn(base + ".proj", tw.proj);
  };
  tower("text", text);
  fn("text.token_emb", token_emb);
  fn("text.pos_emb", text_pos_emb);
  tower("vision", vision);
  fn("vision.patch_embed", patch_embed);
  fn("vision.patch_bias", patch_bias);
  fn("vision.cls_token", cls_token);
  fn("vision.pos_emb", vision_pos_emb);
}

void BackboneWeights::set_requires_grad(bool b) {
  for_each_param([b](const std::string&, Tensor& t) { t.set_requires_grad(b); });
}

std::size_t BackboneWeights::param_count() {
  std::size_t n = 0;
  for_each_param([&n](const std::string&, Tensor& t) {
    n += static_cast<std::size_t>(t.size());
  });
  return n;
}

std::pair<double, double> BackboneWeights::token_embedding_stats() const {
  const auto& d = token_emb.data();
  double mu = 0.0;
  for (double v : d) mu += v;
  mu /= static_cast<double>(d.size());
  double var = 0.0;
  for (double v : d) var += (v - mu) * (v - mu);
  var /= static_cast<double>(d.size());
  return {mu, std::sqrt(var)};
}

PrefixState PrefixState::init(const EncoderConfig& cfg, Rng& rng, double mean,
                              double stddev) {
  PrefixState ps;
  for (int j = 0; j < cfg.text_prefix_depth; ++j)
    ps.text_blocks.push_back(
        random_matrix({std::max(cfg.prefix_len, 1), cfg.width}, rng, mean, stddev));
  for (int j = 0; j < cfg.depth; ++j)
    ps.vision_blocks.push_back(
        random_matrix({std::max(cfg.prefix_len, 1), cfg.width}, rng, mean, stddev));
  ps.for_each_param([](const std::string&, Tensor& t) { t.set_requires_grad(true); });
  return ps;
}

PrefixState PrefixState::zeros(const EncoderConfig& cfg) {
  PrefixState ps;
  for (int j = 0; j < cfg.text_prefix_depth; ++j)
    ps.text_blocks.emplace_back(Shape{std::max(cfg.prefix_len, 1), cfg.width}, 0.0);
  for (int j = 0; j < cfg.depth; ++j)
    ps.vision_blocks.emplace_back(Shape{std::max(cfg.prefix_len, 1), cfg.width}, 0.0);
  return ps;
}

void PrefixState::for_each_param(
    const std::function<void(const std::string&, Tensor&)>& fn) {
  for (std::size_t j = 0; j < text_blocks.size(); ++j)
    fn("prefix.text" + std::to_string(j), text_blocks[j]);
  for (std::size_t j = 0; j < vision_blocks.size(); ++j)
    fn("prefix.vision" + std::to_string(j), vision_blocks[j]);
}

Tensor progressive_prefix_step(const Tensor& t_prev, const Tensor& u_j,
                               const Tensor& o_prev, double alpha, int j) {
  if (j < 1) throw std::invalid_argument("progressive_prefix_step: j must be >= 1");
  if (j == 1 || alpha == 0.0) return concat_rows({t_prev, u_j});
  if (!o_prev.defined() || o_prev.shape() != u_j.shape())
    throw std::invalid_argument("progressive_prefix_step: O_{j-1} shape mismatch");
  Tensor block = add(scale(u_j, 1.0 - alpha), scale(o_prev, alpha));
  return concat_rows({t_prev, block});
}

Tensor encode_text(const Tensor& token_rows, int pooled_index,
                   const BackboneWeights& bb, const PrefixState* prefix,
                   const EncoderConfig& cfg, bool progressive) {
  int n = token_rows.dim(0);
  if (n > cfg.max_text_len)
    throw std::invalid_argument("encode_text: sequence length " + std::to_string(n) +
                                " exceeds max context " + std::to_string(cfg.max_text_len));
  if (pooled_index < 0 || pooled_index >= n)
    throw std::invalid_argument("encode_text: pooled index out of range");
  Tensor x0 = add(token_rows, slice_rows(bb.text_pos_emb, 0, n));
  const std::vector<Tensor>* blocks = prefix ? &prefix->text_blocks : nullptr;
  TowerResult r = tower_forward(x0, bb.text, blocks, cfg.text_prefix_depth, cfg.alpha,
                                progressive, cfg, {}, 0, 0);
  Tensor ln = layer_norm(r.final_rows, bb.text.final_ln_gain, bb.text.final_ln_bias,
                         cfg.ln_eps);
  Tensor pooled = slice_rows(ln, pooled_index, 1);
  return l2_normalize_rows(matmul(pooled, bb.text.proj));
}

ImageEncodeResult encode_image(const Tensor& image, const BackboneWeights& bb,
                               const PrefixState* prefix,
                               const EncoderConfig& cfg, bool progressive) {
  if (image.ndim() != 3 || image.dim(0) != cfg.image_size ||
      image.dim(1) != cfg.image_size || image.dim(2) != 3)
    throw std::invalid_argument("encode_image: expected " +
                                std::to_string(cfg.image_size) + "x" +
                                std::to_string(cfg.image_size) + "x3, got " +
                                shape_str(image.shape()));
  int g = cfg.grid(), p = cfg.patch_size;
  Tensor patches(Shape{cfg.patch_count(), cfg.patch_dim()});
  const auto& im = image.data();
  auto& pd = patches.data();
  for (int py = 0; py < g; ++py)
    for (int px = 0; px < g; ++px) {
      std::size_t row = static_cast<std::size_t>(py * g + px);
      std::size_t off = row * static_cast<std::size_t>(cfg.patch_dim());
      for (int y = 0; y < p; ++y)
        for (int x = 0; x < p; ++x)
          for (int c = 0; c < 3; ++c)
            pd[off + static_cast<std::size_t>((y * p + x) * 3 + c)] =
                im[static_cast<std::size_t>(((py * p + y) * cfg.image_size +
                                             px * p + x) * 3 + c)];
    }
  Tensor x = add(matmul(patches, bb.patch_embed), bb.patch_bias);
  Tensor rows = concat_rows({bb.cls_token, x});
  Tensor x0 = add(rows, bb.vision_pos_emb);
  const std::vector<Tensor>* blocks = prefix ? &prefix->vision_blocks : nullptr;
  TowerResult r = tower_forward(x0, bb.vision, blocks, cfg.depth, cfg.alpha,
                                progressive, cfg, cfg.tap_layers, 1,
                                cfg.patch_count());
  ImageEncodeResult res;
  res.taps = std::move(r.taps);
  Tensor ln = layer_norm(r.final_rows, bb.vision.final_ln_gain,
                         bb.vision.final_ln_bias, cfg.ln_eps);
  res.global = l2_normalize_rows(matmul(slice_rows(ln, 0, 1), bb.vision.proj));
  return res;
}

Tensor embed_token_ids(const std::vector<int>& ids, const BackboneWeights& bb,
                       int start_id, int end_id) {
  std::vector<int> full;
  full.push_back(start_id);
  full.insert(full.end(), ids.begin(), ids.end());
  full.push_back(end_id);
  return gather_rows(bb.token_emb, full);
}

}  // namespace dapo
