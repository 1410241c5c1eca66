#pragma once

#include <functional>
#include <string>
#include <vector>

#include "dapo/tensor.hpp"

namespace dapo {

// One trainable linear map per tap layer, identity-initialized.
struct AdapterStack {
  std::vector<Tensor> weights;  // d x d each
  std::vector<Tensor> biases;   // d each

  static AdapterStack identity(int stages, int width);
  int stages() const { return static_cast<int>(weights.size()); }
  std::size_t trainable_count() const;
  void for_each_param(const std::function<void(const std::string&, Tensor&)>& fn);
};

// Affine map into the shared space followed by row L2 normalization.
Tensor adapt_patches(const Tensor& patches, const AdapterStack& adapters,
                     int stage);

// Per-stage class-probability maps over the patch grid, stored patch-major:
// each maps[i] is patch_count x (K+1), softmax over classes at temperature tau.
struct SimilarityMapSet {
  std::vector<Tensor> maps;
  int grid = 0;  // H' == W'
  double tau = 0.07;
};

SimilarityMapSet similarity_maps(const std::vector<Tensor>& adapted_stages,
                                 const Tensor& prototypes, double tau, int grid);

// softmax([cos(z_x,z_N), cos(z_x,z_agg)] / tau); index 0 = normal.
Tensor global_score(const Tensor& z_x, const Tensor& z_normal,
                    const Tensor& z_abnormal, double tau);

// pred/target are {C,H,W}; target one-hot per pixel.
Tensor focal_loss(const Tensor& pred, const Tensor& target, double gamma = 2.0,
                  const std::vector<double>* class_weights = nullptr);

// pred/target are {H,W}; 1 - (2*intersection + eps) / (sum + eps).
Tensor dice_loss(const Tensor& pred, const Tensor& target, double eps = 1.0);

// Eq-style per-stage composition: focal on the full upsampled map plus both
// dice terms on the normal channel, averaged over stages.
Tensor local_loss(const SimilarityMapSet& maps, const Tensor& target,
                  double gamma = 2.0);

Tensor total_loss(const Tensor& global, const Tensor& local, double lambda);

// Upsampled channel c of stage map i as a {H,W} tensor.
Tensor upsampled_channel(const SimilarityMapSet& maps, int stage, int channel,
                         int out_h, int out_w);

// mean over stages of UP(1 - S_i[0]); values in [0,1].
Tensor binary_anomaly_map(const SimilarityMapSet& maps, int out_h, int out_w);

struct MultitypeResult {
  std::vector<int> labels;  // patch-major argmax, ties to lowest channel
  Tensor aggregate;         // patch_count x (K+1) summed over stages
};
MultitypeResult multitype_mask(const SimilarityMapSet& maps);

// beta * s[1] + (1-beta) * max(anomaly_map).
double image_score(const Tensor& global_probs, const Tensor& anomaly_map,
                   double beta = 0.5);

// sigmoid((cos(z_x, z_Dk) - cos(z_x, z_N)) / tau) per defect.
Tensor multilabel_probs(const Tensor& z_x, const Tensor& z_normal,
                        const Tensor& defect_prototypes, double tau);

}  // namespace dapo
