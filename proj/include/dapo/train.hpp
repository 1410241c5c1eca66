#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "dapo/alignment.hpp"
#include "dapo/checkpoint.hpp"
#include "dapo/data.hpp"
#include "dapo/encoder.hpp"
#include "dapo/optim.hpp"
#include "dapo/pretrain.hpp"
#include "dapo/prompts.hpp"
#include "dapo/vocab.hpp"

namespace dapo {

// Fully resolved run settings; everything downstream of the seed.
struct RunConfig {
  EncoderConfig enc;
  CorpusSpec corpus = CorpusSpec::defaults();
  PretrainConfig pretrain;

  int prompts_per_state = 10;  // E
  int context_len = 5;         // l
  double lambda = 4.0;
  double tau = 0.07;
  double beta = 0.5;  // image-score fusion weight
  double focal_gamma = 2.0;
  double lr = 1e-3;
  int batch = 8;
  int epochs = 5;
  std::string init_strategy = "offset";  // random | clip_space | offset
  double offset_mult = 5.0;
  std::string aggregation = "attention";  // mean | attention
  bool progressive = true;
  std::uint64_t seed = 1;

  std::string data_dir = "data";
  std::string run_dir = "run";
  std::string backbone_path = "backbone.dapo";

  void validate() const;
  std::string to_json() const;
  static RunConfig from_json(const std::string& text);
};

struct DapoModel {
  Vocabulary vocab = Vocabulary::defaults();
  BackboneWeights backbone;
  PromptBank prompts;
  PrefixState prefix;
  AdapterStack adapters;
};

// Prompt bank per the configured init strategy (statistics taken from the
// frozen token embeddings), prefix tokens, identity adapters.
DapoModel build_model(const RunConfig& cfg, const Vocabulary& vocab,
                      BackboneWeights backbone, Rng& rng);

// The only tensors the optimizer ever sees, in fixed order:
// prompts (V, W), text prefix blocks, vision prefix blocks, adapters.
std::vector<std::pair<std::string, Tensor>> trainable_params(DapoModel& model);
std::vector<std::pair<std::string, Tensor>> backbone_tensors(DapoModel& model);
std::size_t trainable_param_count(DapoModel& model);
std::size_t expected_trainable_count(const RunConfig& cfg);
std::string backbone_hash(DapoModel& model);

void save_backbone(const std::string& path, DapoModel& model,
                   const RunConfig& cfg);
// Restores vocab + frozen backbone; config echo must match cfg.enc.
void load_backbone(const std::string& path, DapoModel& model, RunConfig& cfg);

struct StepLoss {
  double global = 0.0, local = 0.0, total = 0.0;
};

class Trainer {
 public:
  Trainer(RunConfig cfg, DapoModel model);

  // One optimizer step on the next batch of the deterministic epoch order.
  StepLoss step(const std::vector<SampleRecord>& records);

  // Full training loop; when run_dir is non-empty writes config echo,
  // loss_log.csv and one checkpoint per epoch.
  std::vector<StepLoss> run_epochs(const std::vector<SampleRecord>& records,
                                   int epochs, const std::string& run_dir = "");

  long step_count() const { return step_; }
  int steps_per_epoch(std::size_t n_records) const;
  DapoModel& model() { return model_; }
  const RunConfig& config() const { return cfg_; }
  Adam& optimizer() { return adam_; }

  Checkpoint to_checkpoint();
  static Trainer from_checkpoint(const Checkpoint& ckpt);

 private:
  RunConfig cfg_;
  DapoModel model_;
  Adam adam_;
  Rng rng_;
  long step_ = 0;
  long cached_epoch_ = -1;
  std::vector<int> epoch_order_;
};

enum class EvalTask { BinaryAD, BinaryAS, MultitypeAS };
EvalTask eval_task_from_string(const std::string& name);

struct PerClassRow {
  std::string name;
  double f1 = 0.0;
  double auroc = 0.0, ap = 0.0;
  bool ranking_defined = false;  // false when a class is single-sided
};

struct MetricsReport {
  std::string task;
  std::map<std::string, double> scalars;
  std::vector<PerClassRow> per_class;
  std::string to_json() const;
  std::string to_csv() const;
};

// Registers any defect from defect_list unknown to the bank (zero-shot),
// then runs the protocol over the records.
MetricsReport evaluate(DapoModel& model, const RunConfig& cfg,
                       const std::vector<SampleRecord>& records,
                       const std::vector<std::string>& defect_list,
                       EvalTask task);

struct InferOutput {
  std::string name;
  bool ok = false;
  std::string error;
  double image_score = 0.0;
  std::vector<double> multilabel;  // per defect in bank order
};

// Writes <name>_map.png / <name>_map.f64 / <name>_mask.png / <name>.json per
// readable input; unreadable files are reported and skipped.
std::vector<InferOutput> infer(DapoModel& model, const RunConfig& cfg,
                               const std::vector<std::string>& image_paths,
                               const std::vector<std::string>& defect_list,
                               const std::string& out_dir);

struct GradcheckReport {
  std::vector<std::pair<std::string, double>> groups;  // name -> max rel err
  double worst = 0.0;
  bool pass = false;
};

// Finite-difference check of the total loss against every trainable group on
// a forced tiny configuration (2 layers, 8x8 image).
GradcheckReport run_gradcheck(std::uint64_t seed = 7);

// One full train+evaluate per value on a shared seed; CSV row per value.
// Failures are recorded in the row and the sweep continues.
std::string ablate(const std::string& axis, const std::vector<std::string>& values,
                   const RunConfig& base, const DapoModel& base_model,
                   const std::vector<SampleRecord>& train_records,
                   const std::vector<SampleRecord>& target_records);

// Adapted final-stage patch rows per record followed by the prototype rows,
// with a parallel labels file; both byte-stable across re-export.
void export_embeddings(DapoModel& model, const RunConfig& cfg,
                       const std::vector<SampleRecord>& records,
                       const std::string& out_dir);

}  // namespace dapo
