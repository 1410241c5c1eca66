#include "dapo/prompts.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace dapo {

Tensor PromptBank::context_block(bool abnormal, int e) const {
  if (e < 0 || e >= prompts_per_state)
    throw std::invalid_argument("prompt index " + std::to_string(e) + " outside E=" +
                                std::to_string(prompts_per_state));
  return slice_rows(abnormal ? W : V, e * context_len, context_len);
}

std::size_t PromptBank::trainable_count() const {
  return static_cast<std::size_t>(V.size()) + static_cast<std::size_t>(W.size());
}

void PromptBank::for_each_param(
    const std::function<void(const std::string&, Tensor&)>& fn) {
  fn("prompts.V", V);
  fn("prompts.W", W);
}

PromptInit prompt_init_from_string(const std::string& name) {
  if (name == "random") return PromptInit::Random;
  if (name == "clip_space") return PromptInit::ClipSpace;
  if (name == "offset") return PromptInit::Offset;
  throw std::invalid_argument("unknown prompt init strategy '" + name + "'");
}

PromptBank init_prompt_bank(PromptInit strategy, double mu, double sigma,
                            double offset_mult, int E, int l, int width,
                            std::vector<std::string> defect_names, Rng& rng) {
  if (E < 1 || l < 1 || width < 1)
    throw std::invalid_argument("init_prompt_bank: E, l, width must be positive");
  if (defect_names.empty())
    throw std::invalid_argument("init_prompt_bank: need at least one defect name");
  for (std::size_t i = 0; i < defect_names.size(); ++i)
    for (std::size_t j = i + 1; j < defect_names.size(); ++j)
      if (defect_names[i] == defect_names[j])
        throw std::invalid_argument("init_prompt_bank: duplicate defect '" +
                                    defect_names[i] + "'");
  if (strategy != PromptInit::Random && sigma <= 0.0)
    throw std::invalid_argument("init_prompt_bank: sigma must be positive");

  PromptBank bank;
  bank.prompts_per_state = E;
  bank.context_len = l;
  bank.width = width;
  bank.defect_names = std::move(defect_names);
  double v_mean = 0.0, v_std = 1.0, w_mean = 0.0, w_std = 1.0;
  switch (strategy) {
    case PromptInit::Random:
      break;
    case PromptInit::ClipSpace:
      v_mean = w_mean = mu;
      v_std = w_std = sigma;
      break;
    case PromptInit::Offset:
      v_mean = mu;
      w_mean = mu + offset_mult * sigma;
      v_std = w_std = sigma;
      break;
  }
  bank.V = Tensor(Shape{E * l, width}, 0.0, true);
  for (double& v : bank.V.data()) v = rng.normal(v_mean, v_std);
  bank.W = Tensor(Shape{E * l, width}, 0.0, true);
  for (double& v : bank.W.data()) v = rng.normal(w_mean, w_std);
  return bank;
}

MixedPrompt build_defect_prompt(const PromptBank& bank, const Vocabulary& vocab,
                                int e, const std::string& defect) {
  if (e < 0 || e >= bank.prompts_per_state)
    throw std::invalid_argument("build_defect_prompt: prompt index out of range");
  if (std::find(bank.defect_names.begin(), bank.defect_names.end(), defect) ==
      bank.defect_names.end())
    throw std::invalid_argument("build_defect_prompt: '" + defect +
                                "' is not a registered defect");
  MixedPrompt p;
  p.abnormal = true;
  for (int i = 0; i < bank.context_len; ++i)
    p.tokens.push_back({true, e * bank.context_len + i});
  for (int id : vocab.tokenize(defect)) p.tokens.push_back({false, id});
  p.tokens.push_back({false, vocab.id("anomaly")});
  p.tokens.push_back({false, vocab.id("object")});
  return p;
}

MixedPrompt build_normal_prompt(const PromptBank& bank, const Vocabulary& vocab,
                                int e) {
  if (e < 0 || e >= bank.prompts_per_state)
    throw std::invalid_argument("build_normal_prompt: prompt index out of range");
  MixedPrompt p;
  p.abnormal = false;
  for (int i = 0; i < bank.context_len; ++i)
    p.tokens.push_back({true, e * bank.context_len + i});
  p.tokens.push_back({false, vocab.id("normal")});
  p.tokens.push_back({false, vocab.id("object")});
  return p;
}

Tensor embed_prompt_rows(const PromptBank& bank, const Vocabulary& vocab,
                         const BackboneWeights& bb, const MixedPrompt& prompt) {
  std::vector<Tensor> rows;
  rows.push_back(gather_rows(bb.token_emb, {vocab.start_id()}));
  const Tensor& block = prompt.abnormal ? bank.W : bank.V;
  for (const PromptToken& t : prompt.tokens) {
    if (t.learnable)
      rows.push_back(slice_rows(block, t.index, 1));
    else
      rows.push_back(gather_rows(bb.token_emb, {t.index}));
  }
  rows.push_back(gather_rows(bb.token_emb, {vocab.end_id()}));
  return concat_rows(rows);
}

Tensor StatePrototypes::stacked() const {
  return concat_rows({normal, defects});
}

StatePrototypes embed_state_prototypes(const PromptBank& bank,
                                       const Vocabulary& vocab,
                                       const BackboneWeights& bb,
                                       const PrefixState* prefix,
                                       const EncoderConfig& cfg,
                                       bool progressive) {
  auto encode_mean = [&](const std::vector<MixedPrompt>& prompts) {
    std::vector<Tensor> embs;
    for (const MixedPrompt& p : prompts) {
      Tensor seq = embed_prompt_rows(bank, vocab, bb, p);
      embs.push_back(encode_text(seq, seq.dim(0) - 1, bb, prefix, cfg, progressive));
    }
    Tensor stacked = concat_rows(embs);
    Tensor meaned = reshape(
        scale(sum_axis(stacked, 0), 1.0 / static_cast<double>(embs.size())),
        Shape{1, bank.width});
    return l2_normalize_rows(meaned);
  };

  StatePrototypes out;
  std::vector<MixedPrompt> normals;
  for (int e = 0; e < bank.prompts_per_state; ++e)
    normals.push_back(build_normal_prompt(bank, vocab, e));
  out.normal = encode_mean(normals);

  std::vector<Tensor> defect_rows;
  for (const std::string& name : bank.defect_names) {
    std::vector<MixedPrompt> prompts;
    for (int e = 0; e < bank.prompts_per_state; ++e)
      prompts.push_back(build_defect_prompt(bank, vocab, e, name));
    defect_rows.push_back(encode_mean(prompts));
  }
  out.defects = concat_rows(defect_rows);
  return out;
}

Aggregation aggregation_from_string(const std::string& name) {
  if (name == "mean") return Aggregation::Mean;
  if (name == "attention") return Aggregation::Attention;
  throw std::invalid_argument("unknown aggregation mode '" + name + "'");
}

Tensor aggregate_abnormal(const StatePrototypes& prototypes, Aggregation mode,
                          const Tensor& z_x, double tau) {
  int k = prototypes.defects.dim(0);
  if (k == 0) throw std::invalid_argument("aggregate_abnormal: no defect prototypes");
  Tensor combined;
  if (mode == Aggregation::Mean) {
    combined = reshape(scale(sum_axis(prototypes.defects, 0), 1.0 / k),
                       Shape{1, prototypes.defects.dim(1)});
  } else {
    if (!z_x.defined())
      throw std::invalid_argument("aggregate_abnormal: attention mode needs z_x");
    Tensor cos = matmul(prototypes.defects, transpose(z_x));  // K x 1
    Tensor weights = softmax(scale(cos, 1.0 / tau), 0);
    combined = matmul(transpose(weights), prototypes.defects);  // 1 x d
  }
  double norm_sq = 0.0;
  for (double v : combined.data()) norm_sq += v * v;
  if (std::sqrt(norm_sq) < 1e-9)
    throw std::domain_error("aggregate_abnormal: degenerate (near-zero) aggregate");
  return l2_normalize_rows(combined);
}

void register_unseen_defect(PromptBank& bank, const Vocabulary& vocab,
                            const std::string& name) {
  if (std::find(bank.defect_names.begin(), bank.defect_names.end(), name) !=
      bank.defect_names.end())
    throw std::invalid_argument("register_unseen_defect: '" + name +
                                "' already registered");
  vocab.tokenize(name);  // throws on unknown words
  bank.defect_names.push_back(name);
}

}  // namespace dapo
