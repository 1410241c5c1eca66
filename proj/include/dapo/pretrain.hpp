#pragma once

#include <string>
#include <vector>

#include "dapo/encoder.hpp"
#include "dapo/rng.hpp"
#include "dapo/tensor.hpp"
#include "dapo/vocab.hpp"

namespace dapo {

struct CaptionPair {
  Tensor image;         // image_size x image_size x 3 in [0,1]
  std::string caption;  // must tokenize under the vocabulary
};

struct PretrainConfig {
  int epochs = 6;
  int batch = 16;
  double lr = 1e-3;
  double temperature = 0.07;
};

// Symmetric in-batch InfoNCE over stacked image/text embeddings.
// Returns the scalar loss tensor (graph-connected when a tape is active).
Tensor infonce_loss(const Tensor& image_embs, const Tensor& text_embs,
                    double temperature);

// Trains every backbone parameter contrastively on (image, caption) pairs,
// then freezes the result. No prefix tokens are active here.
BackboneWeights pretrain_backbone(const std::vector<CaptionPair>& corpus,
                                  const Vocabulary& vocab,
                                  const EncoderConfig& cfg,
                                  const PretrainConfig& pcfg, Rng& rng,
                                  std::vector<double>* loss_log = nullptr);

}  // namespace dapo
