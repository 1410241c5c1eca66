#include "dapo/alignment.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace dapo {

namespace {

constexpr double kLogClamp = 1e-12;

void require_rank3(const Tensor& t, const char* what) {
  if (t.ndim() != 3)
    throw std::invalid_argument(std::string(what) + ": expected {C,H,W}, got " +
                                shape_str(t.shape()));
}

Tensor one_minus(const Tensor& t) { return add_scalar(neg(t), 1.0); }

Tensor channel_plane(const Tensor& chw, int channel) {
  int c = chw.dim(0), h = chw.dim(1), w = chw.dim(2);
  Tensor flat = reshape(chw, Shape{c, h * w});
  return reshape(slice_rows(flat, channel, 1), Shape{h, w});
}

}  // namespace

AdapterStack AdapterStack::identity(int stages, int width) {
  if (stages < 1 || width < 1)
    throw std::invalid_argument("AdapterStack: stages and width must be positive");
  AdapterStack s;
  for (int i = 0; i < stages; ++i) {
    Tensor w(Shape{width, width}, 0.0, true);
    for (int d = 0; d < width; ++d)
      w.data()[static_cast<std::size_t>(d * width + d)] = 1.0;
    s.weights.push_back(w);
    s.biases.emplace_back(Shape{width}, 0.0, true);
  }
  return s;
}

std::size_t AdapterStack::trainable_count() const {
  std::size_t n = 0;
  for (const Tensor& w : weights) n += static_cast<std::size_t>(w.size());
  for (const Tensor& b : biases) n += static_cast<std::size_t>(b.size());
  return n;
}

void AdapterStack::for_each_param(
    const std::function<void(const std::string&, Tensor&)>& fn) {
  for (std::size_t i = 0; i < weights.size(); ++i) {
    fn("adapter" + std::to_string(i) + ".w", weights[i]);
    fn("adapter" + std::to_string(i) + ".b", biases[i]);
  }
}

Tensor adapt_patches(const Tensor& patches, const AdapterStack& adapters,
                     int stage) {
  if (stage < 0 || stage >= adapters.stages())
    throw std::invalid_argument("adapt_patches: stage " + std::to_string(stage) +
                                " outside adapter stack");
  return l2_normalize_rows(
      add(matmul(patches, adapters.weights[static_cast<std::size_t>(stage)]),
          adapters.biases[static_cast<std::size_t>(stage)]));
}

SimilarityMapSet similarity_maps(const std::vector<Tensor>& adapted_stages,
                                 const Tensor& prototypes, double tau, int grid) {
  if (adapted_stages.empty())
    throw std::invalid_argument("similarity_maps: no stages");
  for (int r = 0; r < prototypes.dim(0); ++r) {
    double n = 0.0;
    for (int c = 0; c < prototypes.dim(1); ++c) {
      double v = prototypes.at({r, c});
      n += v * v;
    }
    if (std::abs(std::sqrt(n) - 1.0) > 1e-6)
      throw std::invalid_argument("similarity_maps: prototype row " +
                                  std::to_string(r) + " is not unit-norm");
  }
  SimilarityMapSet out;
  out.grid = grid;
  out.tau = tau;
  Tensor protos_t = transpose(prototypes);
  for (const Tensor& patches : adapted_stages) {
    if (patches.dim(0) != grid * grid)
      throw std::invalid_argument("similarity_maps: patch count mismatch");
    out.maps.push_back(softmax(scale(matmul(patches, protos_t), 1.0 / tau), 1));
  }
  return out;
}

Tensor global_score(const Tensor& z_x, const Tensor& z_normal,
                    const Tensor& z_abnormal, double tau) {
  Tensor cos_n = matmul(z_x, transpose(z_normal));
  Tensor cos_a = matmul(z_x, transpose(z_abnormal));
  Tensor logits = reshape(concat_rows({cos_n, cos_a}), Shape{2});
  return softmax(scale(logits, 1.0 / tau), 0);
}

Tensor focal_loss(const Tensor& pred, const Tensor& target, double gamma,
                  const std::vector<double>* class_weights) {
  require_rank3(pred, "focal_loss");
  if (pred.shape() != target.shape())
    throw std::invalid_argument("focal_loss: pred/target shape mismatch");
  Tensor p_t = sum_axis(mul(pred, target), 0);  // {H,W}
  Tensor mod = pow_scalar(one_minus(p_t), gamma);
  Tensor nll = neg(log_op(clamp_min(p_t, kLogClamp)));
  Tensor per_pixel = mul(mod, nll);
  if (class_weights) {
    if (static_cast<int>(class_weights->size()) != pred.dim(0))
      throw std::invalid_argument("focal_loss: class weight count mismatch");
    Tensor w(Shape{pred.dim(0), 1, 1}, *class_weights);
    per_pixel = mul(per_pixel, sum_axis(mul(target, w), 0));
  }
  return mean(per_pixel);
}

Tensor dice_loss(const Tensor& pred, const Tensor& target, double eps) {
  if (pred.shape() != target.shape())
    throw std::invalid_argument("dice_loss: pred/target shape mismatch");
  Tensor inter = sum(mul(pred, target));
  Tensor numer = add_scalar(scale(inter, 2.0), eps);
  Tensor denom = add_scalar(add(sum(pred), sum(target)), eps);
  return add_scalar(neg(divide(numer, denom)), 1.0);
}

Tensor upsampled_channel(const SimilarityMapSet& maps, int stage, int channel,
                         int out_h, int out_w) {
  const Tensor& m = maps.maps[static_cast<std::size_t>(stage)];
  if (channel < 0 || channel >= m.dim(1))
    throw std::invalid_argument("upsampled_channel: channel out of range");
  Tensor plane = reshape(slice_cols(m, channel, 1), Shape{maps.grid, maps.grid});
  return upsample_bilinear(plane, out_h, out_w);
}

Tensor local_loss(const SimilarityMapSet& maps, const Tensor& target,
                  double gamma) {
  require_rank3(target, "local_loss");
  int classes = target.dim(0), out_h = target.dim(1), out_w = target.dim(2);
  if (maps.maps.empty()) throw std::invalid_argument("local_loss: no stages");
  if (maps.maps[0].dim(1) != classes)
    throw std::invalid_argument("local_loss: channel count mismatch");
  Tensor y0 = channel_plane(target, 0);
  Tensor acc;
  for (std::size_t i = 0; i < maps.maps.size(); ++i) {
    std::vector<Tensor> up_rows;
    for (int c = 0; c < classes; ++c)
      up_rows.push_back(reshape(
          upsampled_channel(maps, static_cast<int>(i), c, out_h, out_w),
          Shape{1, out_h * out_w}));
    Tensor up_full = reshape(concat_rows(up_rows), Shape{classes, out_h, out_w});
    Tensor up0 = reshape(slice_rows(concat_rows(up_rows), 0, 1), Shape{out_h, out_w});
    Tensor term = add(focal_loss(up_full, target, gamma),
                      add(dice_loss(up0, y0),
                          dice_loss(one_minus(up0), one_minus(y0))));
    acc = acc.defined() ? add(acc, term) : term;
  }
  return scale(acc, 1.0 / static_cast<double>(maps.maps.size()));
}

Tensor total_loss(const Tensor& global, const Tensor& local, double lambda) {
  if (lambda < 0.0) throw std::invalid_argument("total_loss: lambda must be >= 0");
  return add(global, scale(local, lambda));
}

Tensor binary_anomaly_map(const SimilarityMapSet& maps, int out_h, int out_w) {
  Tensor acc;
  for (std::size_t i = 0; i < maps.maps.size(); ++i) {
    Tensor inv = one_minus(upsampled_channel(maps, static_cast<int>(i), 0, out_h, out_w));
    acc = acc.defined() ? add(acc, inv) : inv;
  }
  return scale(acc, 1.0 / static_cast<double>(maps.maps.size()));
}

MultitypeResult multitype_mask(const SimilarityMapSet& maps) {
  if (maps.maps.empty()) throw std::invalid_argument("multitype_mask: no stages");
  MultitypeResult res;
  Tensor acc = maps.maps[0];
  for (std::size_t i = 1; i < maps.maps.size(); ++i) {
    if (maps.maps[i].shape() != acc.shape())
      throw std::invalid_argument("multitype_mask: stage shape mismatch");
    acc = add(acc, maps.maps[i]);
  }
  res.aggregate = acc;
  int rows = acc.dim(0), cols = acc.dim(1);
  res.labels.resize(static_cast<std::size_t>(rows));
  for (int r = 0; r < rows; ++r) {
    int best = 0;
    double best_v = acc.at({r, 0});
    for (int c = 1; c < cols; ++c) {
      double v = acc.at({r, c});
      if (v > best_v) {  // strict: ties stay at the lowest channel
        best_v = v;
        best = c;
      }
    }
    res.labels[static_cast<std::size_t>(r)] = best;
  }
  return res;
}

double image_score(const Tensor& global_probs, const Tensor& anomaly_map,
                   double beta) {
  if (beta < 0.0 || beta > 1.0)
    throw std::invalid_argument("image_score: beta must lie in [0,1]");
  if (global_probs.size() != 2)
    throw std::invalid_argument("image_score: global score must have 2 entries");
  double max_pix = 0.0;
  for (double v : anomaly_map.data()) max_pix = std::max(max_pix, v);
  return beta * global_probs.data()[1] + (1.0 - beta) * max_pix;
}

Tensor multilabel_probs(const Tensor& z_x, const Tensor& z_normal,
                        const Tensor& defect_prototypes, double tau) {
  Tensor cos_d = matmul(defect_prototypes, transpose(z_x));  // K x 1
  Tensor cos_n = matmul(z_normal, transpose(z_x));           // 1 x 1
  Tensor logits = scale(sub(cos_d, cos_n), 1.0 / tau);
  return reshape(sigmoid(logits), Shape{defect_prototypes.dim(0)});
}

}  // namespace dapo
