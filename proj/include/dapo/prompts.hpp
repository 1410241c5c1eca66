#pragma once

#include <string>
#include <vector>

#include "dapo/encoder.hpp"
#include "dapo/rng.hpp"
#include "dapo/tensor.hpp"
#include "dapo/vocab.hpp"

namespace dapo {

// Learnable hybrid-prompt parameters. Normal context V and abnormal context W
// are each a single (E*l) x d block; W is shared across every defect type, so
// registering a new defect adds no parameters.
struct PromptBank {
  Tensor V;  // (E*l) x d
  Tensor W;  // (E*l) x d
  std::vector<std::string> defect_names;
  int prompts_per_state = 10;  // E
  int context_len = 5;         // l
  int width = 64;              // d

  int K() const { return static_cast<int>(defect_names.size()); }
  Tensor context_block(bool abnormal, int e) const;  // l x d slice
  std::size_t trainable_count() const;
  void for_each_param(const std::function<void(const std::string&, Tensor&)>& fn);
};

enum class PromptInit { Random, ClipSpace, Offset };
PromptInit prompt_init_from_string(const std::string& name);

PromptBank init_prompt_bank(PromptInit strategy, double mu, double sigma,
                            double offset_mult, int E, int l, int width,
                            std::vector<std::string> defect_names, Rng& rng);

// One prompt position: either a learnable context row or a literal word id.
struct PromptToken {
  bool learnable = false;
  int index = 0;  // row into the bank block when learnable, vocab id otherwise
};

struct MixedPrompt {
  std::vector<PromptToken> tokens;
  bool abnormal = false;
};

// Eq-style layouts: [W...]<defect> anomaly object / [V...] normal object.
MixedPrompt build_defect_prompt(const PromptBank& bank, const Vocabulary& vocab,
                                int e, const std::string& defect);
MixedPrompt build_normal_prompt(const PromptBank& bank, const Vocabulary& vocab,
                                int e);

// Embedded rows for the prompt, including start/end, graph-connected to the
// bank parameters through the learnable slots.
Tensor embed_prompt_rows(const PromptBank& bank, const Vocabulary& vocab,
                         const BackboneWeights& bb, const MixedPrompt& prompt);

struct StatePrototypes {
  Tensor normal;    // 1 x d unit row
  Tensor defects;   // K x d unit rows
  Tensor stacked() const;  // (K+1) x d, normal first
};

StatePrototypes embed_state_prototypes(const PromptBank& bank,
                                       const Vocabulary& vocab,
                                       const BackboneWeights& bb,
                                       const PrefixState* prefix,
                                       const EncoderConfig& cfg,
                                       bool progressive);

enum class Aggregation { Mean, Attention };
Aggregation aggregation_from_string(const std::string& name);

// Single abnormal prototype; attention mode weights defects by cosine
// similarity to the image embedding at temperature tau.
Tensor aggregate_abnormal(const StatePrototypes& prototypes, Aggregation mode,
                          const Tensor& z_x = Tensor(), double tau = 0.07);

// Zero-shot registration: grows the defect list only.
void register_unseen_defect(PromptBank& bank, const Vocabulary& vocab,
                            const std::string& name);

}  // namespace dapo
