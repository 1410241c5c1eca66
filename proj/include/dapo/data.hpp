#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "dapo/rng.hpp"
#include "dapo/tensor.hpp"

namespace dapo {

struct PaletteColor {
  std::string name;
  std::uint8_t r = 0, g = 0, b = 0;
};

// Procedural corpus recipe. Train and target splits use disjoint palettes
// (the distribution shift) and the unseen defects never occur in train.
struct CorpusSpec {
  int image_size = 64;
  std::vector<std::string> object_shapes = {"disk",  "square", "triangle",
                                            "ring",  "cross",  "capsule"};
  std::vector<PaletteColor> train_palette;
  std::vector<PaletteColor> target_palette;
  std::vector<std::string> train_defects = {"scratch", "hole", "stain", "crack"};
  std::vector<std::string> unseen_defects = {"bent", "missing"};
  int train_count = 400;
  int target_count = 200;
  double anomalous_fraction = 0.5;
  std::uint64_t seed = 1;

  static CorpusSpec defaults();
  void validate() const;
  std::vector<std::string> target_defects() const;  // train then unseen
};

struct SampleRecord {
  std::string name;
  Tensor image;                    // H x W x 3 in [0,1], 1/255 quantized
  std::vector<std::uint8_t> mask;  // H*W channel labels, 0 = normal
  int label = 0;                   // 1 iff any defect pixel
  std::string object_class;
  std::vector<std::string> defects_present;
};

struct RenderedObject {
  int size = 0;
  std::vector<std::uint8_t> rgb;        // size*size*3
  std::vector<std::uint8_t> silhouette;  // size*size, 1 inside the object
};

struct ObjectParams {
  std::string shape;
  PaletteColor palette;
};

RenderedObject render_object(const ObjectParams& params, int image_size, Rng& rng);

// Mutates the image in place and returns the defect pixel set (flat indices),
// always within the silhouette dilated by 2 px.
std::vector<int> render_defect(RenderedObject& obj, const std::string& defect,
                               Rng& rng);

struct GeneratedCorpus {
  std::vector<SampleRecord> train;
  std::vector<SampleRecord> target;
  std::vector<std::pair<Tensor, std::string>> captions;  // train images only
  std::vector<std::string> train_defect_list;
  std::vector<std::string> target_defect_list;
};

// Pure function of the spec, including its seed.
GeneratedCorpus generate_corpus(const CorpusSpec& spec);

void save_split(const std::vector<SampleRecord>& records, const std::string& dir,
                const std::vector<std::string>& defect_list);
std::vector<std::string> load_defect_list(const std::string& path);
SampleRecord load_sample(const std::string& split_dir, const std::string& name);
std::vector<SampleRecord> load_split(const std::string& split_dir);

// One-hot {C,H,W} ground truth with channel 0 = normal.
Tensor mask_to_onehot(const SampleRecord& record, int channels, int image_size);

// Nearest-centroid color-histogram classifier accuracy on held-back halves;
// the measurable witness that the two splits really differ in distribution.
double shift_witness_accuracy(const std::vector<SampleRecord>& train,
                              const std::vector<SampleRecord>& target);

}  // namespace dapo
