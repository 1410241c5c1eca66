#include "dapo/train.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>
#include <stdexcept>

#include "dapo/metrics.hpp"
#include "dapo/png_io.hpp"
#include "json.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace dapo {

namespace {

Tensor pick_entry(const Tensor& vec, int i) {
  int n = vec.size();
  return reshape(slice_rows(reshape(vec, Shape{n, 1}), i, 1), Shape{1});
}

std::string fmt_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

std::array<std::uint8_t, 3> class_color(int channel) {
  static const std::array<std::uint8_t, 3> kColors[] = {
      {0, 0, 0},      {230, 60, 60},  {60, 200, 90},  {70, 110, 240},
      {240, 200, 40}, {200, 70, 220}, {60, 210, 210}, {240, 140, 40},
      {150, 150, 150}};
  return kColors[channel % 9];
}

struct ImagePass {
  Tensor global_probs;        // 2 entries, index 1 = anomalous
  SimilarityMapSet maps;
  Tensor z_x;
};

ImagePass forward_image(const Tensor& image, DapoModel& model,
                        const RunConfig& cfg, const StatePrototypes& protos,
                        const Tensor& proto_stack, Aggregation agg) {
  ImagePass out;
  ImageEncodeResult enc =
      encode_image(image, model.backbone, &model.prefix, cfg.enc, cfg.progressive);
  out.z_x = enc.global;
  std::vector<Tensor> adapted;
  for (std::size_t s = 0; s < enc.taps.size(); ++s)
    adapted.push_back(adapt_patches(enc.taps[s], model.adapters, static_cast<int>(s)));
  out.maps = similarity_maps(adapted, proto_stack, cfg.tau, cfg.enc.grid());
  Tensor z_agg = aggregate_abnormal(protos, agg, out.z_x, cfg.tau);
  out.global_probs = global_score(out.z_x, protos.normal, z_agg, cfg.tau);
  return out;
}

// Per-pixel class score planes: mean over stages of the upsampled maps.
std::vector<Tensor> class_score_planes(const SimilarityMapSet& maps, int classes,
                                       int out_hw) {
  std::vector<Tensor> planes;
  double inv = 1.0 / static_cast<double>(maps.maps.size());
  for (int c = 0; c < classes; ++c) {
    Tensor acc;
    for (std::size_t s = 0; s < maps.maps.size(); ++s) {
      Tensor up = upsampled_channel(maps, static_cast<int>(s), c, out_hw, out_hw);
      acc = acc.defined() ? add(acc, up) : up;
    }
    planes.push_back(scale(acc, inv));
  }
  return planes;
}

double binary_f1(const Confusion& c) {
  long denom = 2 * c.tp + c.fp + c.fn;
  return denom == 0 ? 0.0 : 2.0 * static_cast<double>(c.tp) / static_cast<double>(denom);
}

void apply_named(std::vector<std::pair<std::string, Tensor>>& dst,
                 const std::vector<std::pair<std::string, Tensor>>& src) {
  std::size_t j = 0;
  for (auto& [name, t] : dst) {
    if (j >= src.size() || src[j].first != name)
      throw std::runtime_error("checkpoint: missing tensor '" + name + "'");
    const Tensor& s = src[j].second;
    if (s.shape() != t.shape())
      throw std::runtime_error("checkpoint: shape mismatch for '" + name + "'");
    t.data() = s.data();
    ++j;
  }
  if (j != src.size())
    throw std::runtime_error("checkpoint: unexpected extra tensors");
}

}  // namespace

// ---- RunConfig ----

void RunConfig::validate() const {
  enc.validate();
  if (corpus.image_size != enc.image_size)
    throw std::invalid_argument("config: corpus image size must match encoder");
  if (prompts_per_state < 1 || context_len < 1)
    throw std::invalid_argument("config: prompt bank dimensions must be positive");
  if (lambda < 0.0) throw std::invalid_argument("config: lambda must be >= 0");
  if (tau <= 0.0) throw std::invalid_argument("config: tau must be positive");
  if (beta < 0.0 || beta > 1.0)
    throw std::invalid_argument("config: beta must lie in [0,1]");
  if (focal_gamma < 0.0) throw std::invalid_argument("config: focal gamma must be >= 0");
  if (lr <= 0.0) throw std::invalid_argument("config: lr must be positive");
  if (batch < 1) throw std::invalid_argument("config: batch must be positive");
  if (epochs < 0) throw std::invalid_argument("config: epochs must be >= 0");
  prompt_init_from_string(init_strategy);
  aggregation_from_string(aggregation);
  if (pretrain.epochs < 0 || pretrain.batch < 1 || pretrain.lr <= 0.0)
    throw std::invalid_argument("config: bad pretraining settings");
}

std::string RunConfig::to_json() const {
  json j;
  j["width"] = enc.width;
  j["depth"] = enc.depth;
  j["heads"] = enc.heads;
  j["patch_size"] = enc.patch_size;
  j["image_size"] = enc.image_size;
  j["tap_layers"] = enc.tap_layers;
  j["prefix_len"] = enc.prefix_len;
  j["text_prefix_depth"] = enc.text_prefix_depth;
  j["alpha"] = enc.alpha;
  j["max_text_len"] = enc.max_text_len;
  j["prompts_per_state"] = prompts_per_state;
  j["context_len"] = context_len;
  j["lambda"] = lambda;
  j["tau"] = tau;
  j["beta"] = beta;
  j["focal_gamma"] = focal_gamma;
  j["lr"] = lr;
  j["batch"] = batch;
  j["epochs"] = epochs;
  j["init_strategy"] = init_strategy;
  j["offset_mult"] = offset_mult;
  j["aggregation"] = aggregation;
  j["progressive"] = progressive;
  j["seed"] = seed;
  j["data_dir"] = data_dir;
  j["run_dir"] = run_dir;
  j["backbone_path"] = backbone_path;
  j["pretrain_epochs"] = pretrain.epochs;
  j["pretrain_batch"] = pretrain.batch;
  j["pretrain_lr"] = pretrain.lr;
  j["pretrain_temperature"] = pretrain.temperature;
  j["train_count"] = corpus.train_count;
  j["target_count"] = corpus.target_count;
  j["anomalous_fraction"] = corpus.anomalous_fraction;
  j["corpus_seed"] = corpus.seed;
  j["train_defects"] = corpus.train_defects;
  j["unseen_defects"] = corpus.unseen_defects;
  return j.dump(2);
}

RunConfig RunConfig::from_json(const std::string& text) {
  json j = json::parse(text);
  if (!j.is_object()) throw std::invalid_argument("config: expected a JSON object");
  RunConfig c;
  for (auto it = j.begin(); it != j.end(); ++it) {
    const std::string& k = it.key();
    const json& v = it.value();
    if (k == "width") c.enc.width = v.get<int>();
    else if (k == "depth") c.enc.depth = v.get<int>();
    else if (k == "heads") c.enc.heads = v.get<int>();
    else if (k == "patch_size") c.enc.patch_size = v.get<int>();
    else if (k == "image_size") c.enc.image_size = v.get<int>();
    else if (k == "tap_layers") c.enc.tap_layers = v.get<std::vector<int>>();
    else if (k == "prefix_len") c.enc.prefix_len = v.get<int>();
    else if (k == "text_prefix_depth") c.enc.text_prefix_depth = v.get<int>();
    else if (k == "alpha") c.enc.alpha = v.get<double>();
    else if (k == "max_text_len") c.enc.max_text_len = v.get<int>();
    else if (k == "prompts_per_state") c.prompts_per_state = v.get<int>();
    else if (k == "context_len") c.context_len = v.get<int>();
    else if (k == "lambda") c.lambda = v.get<double>();
    else if (k == "tau") c.tau = v.get<double>();
    else if (k == "beta") c.beta = v.get<double>();
    else if (k == "focal_gamma") c.focal_gamma = v.get<double>();
    else if (k == "lr") c.lr = v.get<double>();
    else if (k == "batch") c.batch = v.get<int>();
    else if (k == "epochs") c.epochs = v.get<int>();
    else if (k == "init_strategy") c.init_strategy = v.get<std::string>();
    else if (k == "offset_mult") c.offset_mult = v.get<double>();
    else if (k == "aggregation") c.aggregation = v.get<std::string>();
    else if (k == "progressive") c.progressive = v.get<bool>();
    else if (k == "seed") c.seed = v.get<std::uint64_t>();
    else if (k == "data_dir") c.data_dir = v.get<std::string>();
    else if (k == "run_dir") c.run_dir = v.get<std::string>();
    else if (k == "backbone_path") c.backbone_path = v.get<std::string>();
    else if (k == "pretrain_epochs") c.pretrain.epochs = v.get<int>();
    else if (k == "pretrain_batch") c.pretrain.batch = v.get<int>();
    else if (k == "pretrain_lr") c.pretrain.lr = v.get<double>();
    else if (k == "pretrain_temperature") c.pretrain.temperature = v.get<double>();
    else if (k == "train_count") c.corpus.train_count = v.get<int>();
    else if (k == "target_count") c.corpus.target_count = v.get<int>();
    else if (k == "anomalous_fraction") c.corpus.anomalous_fraction = v.get<double>();
    else if (k == "corpus_seed") c.corpus.seed = v.get<std::uint64_t>();
    else if (k == "train_defects") c.corpus.train_defects = v.get<std::vector<std::string>>();
    else if (k == "unseen_defects") c.corpus.unseen_defects = v.get<std::vector<std::string>>();
    else
      throw std::invalid_argument("config: unknown key '" + k + "'");
  }
  c.corpus.image_size = c.enc.image_size;
  c.validate();
  return c;
}

// ---- model assembly ----

DapoModel build_model(const RunConfig& cfg, const Vocabulary& vocab,
                      BackboneWeights backbone, Rng& rng) {
  if (!backbone.frozen)
    throw std::invalid_argument("build_model: backbone must be frozen first");
  DapoModel m;
  m.vocab = vocab;
  m.backbone = std::move(backbone);
  auto [mu, sigma] = m.backbone.token_embedding_stats();
  m.prompts = init_prompt_bank(prompt_init_from_string(cfg.init_strategy), mu,
                               sigma, cfg.offset_mult, cfg.prompts_per_state,
                               cfg.context_len, cfg.enc.width,
                               cfg.corpus.train_defects, rng);
  m.prefix = PrefixState::init(cfg.enc, rng, 0.0, 0.02);
  m.adapters = AdapterStack::identity(static_cast<int>(cfg.enc.tap_layers.size()),
                                      cfg.enc.width);
  return m;
}

std::vector<std::pair<std::string, Tensor>> trainable_params(DapoModel& model) {
  std::vector<std::pair<std::string, Tensor>> out;
  auto grab = [&out](const std::string& n, Tensor& t) { out.emplace_back(n, t); };
  model.prompts.for_each_param(grab);
  model.prefix.for_each_param(grab);
  model.adapters.for_each_param(grab);
  return out;
}

std::vector<std::pair<std::string, Tensor>> backbone_tensors(DapoModel& model) {
  std::vector<std::pair<std::string, Tensor>> out;
  model.backbone.for_each_param(
      [&out](const std::string& n, Tensor& t) { out.emplace_back("backbone." + n, t); });
  return out;
}

std::size_t trainable_param_count(DapoModel& model) {
  std::size_t n = 0;
  for (auto& [name, t] : trainable_params(model)) n += static_cast<std::size_t>(t.size());
  return n;
}

std::size_t expected_trainable_count(const RunConfig& cfg) {
  std::size_t d = static_cast<std::size_t>(cfg.enc.width);
  std::size_t prompts = 2ull * cfg.prompts_per_state * cfg.context_len * d;
  std::size_t prefix = static_cast<std::size_t>(cfg.enc.text_prefix_depth + cfg.enc.depth) *
                       cfg.enc.prefix_len * d;
  std::size_t adapters = cfg.enc.tap_layers.size() * (d * d + d);
  return prompts + prefix + adapters;
}

std::string backbone_hash(DapoModel& model) {
  return sha256_hex(tensor_bytes(backbone_tensors(model)));
}

void save_backbone(const std::string& path, DapoModel& model, const RunConfig& cfg) {
  Checkpoint ckpt;
  ckpt.config_json = cfg.to_json();
  ckpt.vocab_tokens = model.vocab.tokens();
  ckpt.tensors = backbone_tensors(model);
  save_checkpoint(path, ckpt);
}

void load_backbone(const std::string& path, DapoModel& model, RunConfig& cfg) {
  Checkpoint ckpt = load_checkpoint(path);
  RunConfig stored = RunConfig::from_json(ckpt.config_json);
  model.vocab = Vocabulary::from_tokens(ckpt.vocab_tokens);
  cfg.enc = stored.enc;
  Rng dummy(0);
  model.backbone = BackboneWeights::init(cfg.enc, model.vocab.size(), dummy);
  auto slots = backbone_tensors(model);
  apply_named(slots, ckpt.tensors);
  model.backbone.set_requires_grad(false);
  model.backbone.frozen = true;
}

// ---- Trainer ----

Trainer::Trainer(RunConfig cfg, DapoModel model)
    : cfg_(std::move(cfg)), model_(std::move(model)), rng_(cfg_.seed ^ 0x7EA1) {
  cfg_.validate();
  if (!model_.backbone.frozen)
    throw std::invalid_argument("trainer: backbone must be frozen");
  adam_.lr = cfg_.lr;
  std::vector<Tensor> params;
  for (auto& [name, t] : trainable_params(model_)) params.push_back(t);
  adam_.register_params(params);
}

int Trainer::steps_per_epoch(std::size_t n_records) const {
  return static_cast<int>((n_records + static_cast<std::size_t>(cfg_.batch) - 1) /
                          static_cast<std::size_t>(cfg_.batch));
}

StepLoss Trainer::step(const std::vector<SampleRecord>& records) {
  if (records.empty()) throw std::invalid_argument("trainer: empty corpus");
  int spe = steps_per_epoch(records.size());
  long epoch = step_ / spe;
  int pos = static_cast<int>(step_ % spe);
  if (epoch != cached_epoch_) {
    // batch order is a pure function of seed+epoch, so resumed runs replay it
    epoch_order_.resize(records.size());
    for (std::size_t i = 0; i < records.size(); ++i)
      epoch_order_[i] = static_cast<int>(i);
    Rng order_rng = Rng(cfg_.seed).fork(0xE70000ULL + static_cast<std::uint64_t>(epoch));
    order_rng.shuffle(epoch_order_);
    cached_epoch_ = epoch;
  }
  int lo = pos * cfg_.batch;
  int hi = std::min<int>(lo + cfg_.batch, static_cast<int>(records.size()));

  StepLoss log;
  std::vector<std::string> batch_names;
  {
    Tape tape;
    StatePrototypes protos =
        embed_state_prototypes(model_.prompts, model_.vocab, model_.backbone,
                               &model_.prefix, cfg_.enc, cfg_.progressive);
    Tensor proto_stack = protos.stacked();
    int classes = model_.prompts.K() + 1;
    Tensor g_acc, l_acc;
    for (int i = lo; i < hi; ++i) {
      const SampleRecord& rec = records[static_cast<std::size_t>(epoch_order_[static_cast<std::size_t>(i)])];
      batch_names.push_back(rec.name);
      ImagePass pass = forward_image(rec.image, model_, cfg_, protos, proto_stack,
                                     aggregation_from_string(cfg_.aggregation));
      Tensor g_loss = neg(
          log_op(clamp_min(pick_entry(pass.global_probs, rec.label), 1e-12)));
      Tensor target = mask_to_onehot(rec, classes, cfg_.enc.image_size);
      Tensor l_loss = local_loss(pass.maps, target, cfg_.focal_gamma);
      g_acc = g_acc.defined() ? add(g_acc, g_loss) : g_loss;
      l_acc = l_acc.defined() ? add(l_acc, l_loss) : l_loss;
    }
    double inv = 1.0 / static_cast<double>(hi - lo);
    Tensor g_mean = scale(g_acc, inv);
    Tensor l_mean = scale(l_acc, inv);
    Tensor total = total_loss(g_mean, l_mean, cfg_.lambda);
    log.global = g_mean.value();
    log.local = l_mean.value();
    log.total = total.value();
    if (!std::isfinite(log.total)) {
      std::string names;
      for (const auto& n : batch_names) names += " " + n;
      throw std::runtime_error(
          "trainer: non-finite loss at step " + std::to_string(step_) +
          " (global=" + std::to_string(log.global) +
          ", local=" + std::to_string(log.local) + "); batch:" + names);
    }
    backward(total);
  }
  adam_.step();
  adam_.zero_grad();
  ++step_;
  return log;
}

std::vector<StepLoss> Trainer::run_epochs(const std::vector<SampleRecord>& records,
                                          int epochs, const std::string& run_dir) {
  std::vector<StepLoss> logs;
  std::ofstream loss_csv;
  if (!run_dir.empty()) {
    fs::create_directories(run_dir);
    std::ofstream cfg_echo(run_dir + "/config.json");
    cfg_echo << cfg_.to_json() << "\n";
    loss_csv.open(run_dir + "/loss_log.csv");
    loss_csv << "step,global,local,total\n";
  }
  int spe = steps_per_epoch(records.size());
  for (int e = 0; e < epochs; ++e) {
    for (int s = 0; s < spe; ++s) {
      StepLoss l = step(records);
      logs.push_back(l);
      if (loss_csv.is_open())
        loss_csv << step_ - 1 << "," << fmt_double(l.global) << ","
                 << fmt_double(l.local) << "," << fmt_double(l.total) << "\n";
    }
    if (!run_dir.empty())
      save_checkpoint(run_dir + "/epoch_" + std::to_string(e + 1) + ".dapo",
                      to_checkpoint());
  }
  return logs;
}

Checkpoint Trainer::to_checkpoint() {
  Checkpoint ckpt;
  ckpt.config_json = cfg_.to_json();
  ckpt.vocab_tokens = model_.vocab.tokens();
  ckpt.tensors = backbone_tensors(model_);
  for (auto& [name, t] : trainable_params(model_)) ckpt.tensors.emplace_back(name, t);
  ckpt.adam_m = adam_.moments_m();
  ckpt.adam_v = adam_.moments_v();
  ckpt.adam_steps = adam_.step_count();
  ckpt.epoch = 0;  // derived from step and corpus size on resume
  ckpt.step = step_;
  ckpt.rng_state = rng_.state();
  return ckpt;
}

Trainer Trainer::from_checkpoint(const Checkpoint& ckpt) {
  RunConfig cfg = RunConfig::from_json(ckpt.config_json);
  DapoModel model;
  model.vocab = Vocabulary::from_tokens(ckpt.vocab_tokens);

  Rng dummy(0);
  model.backbone = BackboneWeights::init(cfg.enc, model.vocab.size(), dummy);
  model.backbone.set_requires_grad(false);
  model.backbone.frozen = true;
  model.prompts = init_prompt_bank(PromptInit::Random, 0.0, 1.0, 0.0,
                                   cfg.prompts_per_state, cfg.context_len,
                                   cfg.enc.width, cfg.corpus.train_defects, dummy);
  model.prefix = PrefixState::zeros(cfg.enc);
  model.prefix.for_each_param(
      [](const std::string&, Tensor& t) { t.set_requires_grad(true); });
  model.adapters = AdapterStack::identity(
      static_cast<int>(cfg.enc.tap_layers.size()), cfg.enc.width);

  auto slots = backbone_tensors(model);
  for (auto& [name, t] : trainable_params(model)) slots.emplace_back(name, t);
  apply_named(slots, ckpt.tensors);

  Trainer tr(cfg, std::move(model));
  if (ckpt.adam_m.size() != tr.adam_.moments_m().size())
    throw std::runtime_error("checkpoint: optimizer moment count mismatch");
  tr.adam_.moments_m() = ckpt.adam_m;
  tr.adam_.moments_v() = ckpt.adam_v;
  tr.adam_.set_step_count(ckpt.adam_steps);
  tr.step_ = ckpt.step;
  tr.rng_.set_state(ckpt.rng_state);
  return tr;
}

// ---- evaluation ----

EvalTask eval_task_from_string(const std::string& name) {
  if (name == "binary_ad") return EvalTask::BinaryAD;
  if (name == "binary_as") return EvalTask::BinaryAS;
  if (name == "multitype_as") return EvalTask::MultitypeAS;
  throw std::invalid_argument("unknown evaluation task '" + name + "'");
}

std::string MetricsReport::to_json() const {
  json j;
  j["task"] = task;
  for (const auto& [k, v] : scalars) j["metrics"][k] = v;
  for (const auto& row : per_class) {
    json r;
    r["class"] = row.name;
    r["f1"] = row.f1;
    if (row.ranking_defined) {
      r["auroc"] = row.auroc;
      r["ap"] = row.ap;
    } else {
      r["auroc"] = nullptr;
      r["ap"] = nullptr;
    }
    j["per_class"].push_back(r);
  }
  j["notes"] = {{"aupro_fpr_limit", 0.3}};
  return j.dump(2);
}

std::string MetricsReport::to_csv() const {
  std::ostringstream out;
  out << "kind,name,metric,value\n";
  for (const auto& [k, v] : scalars)
    out << "scalar," << task << "," << k << "," << fmt_double(v) << "\n";
  for (const auto& row : per_class) {
    out << "class," << row.name << ",f1," << fmt_double(row.f1) << "\n";
    if (row.ranking_defined) {
      out << "class," << row.name << ",auroc," << fmt_double(row.auroc) << "\n";
      out << "class," << row.name << ",ap," << fmt_double(row.ap) << "\n";
    }
  }
  return out.str();
}

MetricsReport evaluate(DapoModel& model, const RunConfig& cfg,
                       const std::vector<SampleRecord>& records,
                       const std::vector<std::string>& defect_list,
                       EvalTask task) {
  if (records.empty()) throw std::invalid_argument("evaluate: empty corpus");
  std::vector<std::string> bad;
  for (const auto& name : defect_list) {
    try {
      model.vocab.tokenize(name);
    } catch (const std::exception&) {
      bad.push_back(name);
    }
  }
  if (!bad.empty()) {
    std::string msg = "evaluate: defect names not tokenizable:";
    for (const auto& b : bad) msg += " " + b;
    throw std::invalid_argument(msg);
  }
  for (const auto& name : defect_list) {
    const auto& known = model.prompts.defect_names;
    if (std::find(known.begin(), known.end(), name) == known.end())
      register_unseen_defect(model.prompts, model.vocab, name);
  }
  for (std::size_t i = 0; i < defect_list.size(); ++i)
    if (model.prompts.defect_names[i] != defect_list[i])
      throw std::invalid_argument(
          "evaluate: defect list order disagrees with the prompt bank at index " +
          std::to_string(i));

  int classes = model.prompts.K() + 1;
  int hw = cfg.enc.image_size;
  StatePrototypes protos =
      embed_state_prototypes(model.prompts, model.vocab, model.backbone,
                             &model.prefix, cfg.enc, cfg.progressive);
  Tensor proto_stack = protos.stacked();
  Aggregation agg = aggregation_from_string(cfg.aggregation);

  MetricsReport report;
  if (task == EvalTask::BinaryAD) {
    report.task = "binary_ad";
    std::vector<double> scores;
    std::vector<int> labels;
    for (const auto& rec : records) {
      ImagePass pass = forward_image(rec.image, model, cfg, protos, proto_stack, agg);
      Tensor map = binary_anomaly_map(pass.maps, hw, hw);
      scores.push_back(image_score(pass.global_probs, map, cfg.beta));
      labels.push_back(rec.label);
    }
    report.scalars["image_auroc"] = auroc(scores, labels);
    report.scalars["image_ap"] = average_precision(scores, labels);
    report.scalars["image_f1_at_0.5"] = binary_f1(confusion_at(scores, labels, 0.5));
    return report;
  }

  if (task == EvalTask::BinaryAS) {
    report.task = "binary_as";
    std::vector<std::vector<double>> maps_flat;
    std::vector<std::vector<std::uint8_t>> masks_bin;
    std::vector<double> px_scores, px_scores_nm;
    std::vector<int> px_labels, px_labels_nm;
    int missing_channel = -1;
    for (std::size_t i = 0; i < defect_list.size(); ++i)
      if (defect_list[i] == "missing") missing_channel = static_cast<int>(i) + 1;
    for (const auto& rec : records) {
      ImagePass pass = forward_image(rec.image, model, cfg, protos, proto_stack, agg);
      Tensor map = binary_anomaly_map(pass.maps, hw, hw);
      maps_flat.push_back(map.data());
      std::vector<std::uint8_t> bin(rec.mask.size());
      for (std::size_t p = 0; p < rec.mask.size(); ++p) {
        bin[p] = rec.mask[p] != 0;
        px_scores.push_back(map.data()[p]);
        px_labels.push_back(bin[p]);
        if (missing_channel < 0 || rec.mask[p] != missing_channel) {
          px_scores_nm.push_back(map.data()[p]);
          px_labels_nm.push_back(bin[p]);
        }
      }
      masks_bin.push_back(std::move(bin));
    }
    report.scalars["pixel_auroc"] = auroc(px_scores, px_labels);
    report.scalars["pixel_ap"] = average_precision(px_scores, px_labels);
    report.scalars["aupro"] = aupro(maps_flat, masks_bin, hw, hw, 0.3);
    if (missing_channel >= 0)
      report.scalars["pixel_auroc_excl_missing"] = auroc(px_scores_nm, px_labels_nm);
    return report;
  }

  report.task = "multitype_as";
  std::vector<int> pred, truth;
  std::vector<std::vector<double>> class_scores(static_cast<std::size_t>(classes));
  for (const auto& rec : records) {
    ImagePass pass = forward_image(rec.image, model, cfg, protos, proto_stack, agg);
    std::vector<Tensor> planes = class_score_planes(pass.maps, classes, hw);
    for (std::size_t p = 0; p < rec.mask.size(); ++p) {
      int best = 0;
      double best_v = planes[0].data()[p];
      for (int c = 1; c < classes; ++c) {
        double v = planes[static_cast<std::size_t>(c)].data()[p];
        if (v > best_v) {  // ties resolve to the lowest channel
          best_v = v;
          best = c;
        }
      }
      pred.push_back(best);
      truth.push_back(rec.mask[p]);
      for (int c = 0; c < classes; ++c)
        class_scores[static_cast<std::size_t>(c)].push_back(
            planes[static_cast<std::size_t>(c)].data()[p]);
    }
  }
  report.scalars["macro_f1"] = f1_macro(pred, truth, classes);
  double auroc_sum = 0.0;
  int auroc_n = 0;
  for (int c = 0; c < classes; ++c) {
    PerClassRow row;
    row.name = c == 0 ? "normal" : model.prompts.defect_names[static_cast<std::size_t>(c - 1)];
    long tp = 0, fp = 0, fn = 0;
    std::vector<int> bin(truth.size());
    for (std::size_t i = 0; i < truth.size(); ++i) {
      bool p = pred[i] == c, t = truth[i] == c;
      tp += p && t;
      fp += p && !t;
      fn += !p && t;
      bin[i] = t;
    }
    row.f1 = (2 * tp + fp + fn) == 0
                 ? 0.0
                 : 2.0 * static_cast<double>(tp) / static_cast<double>(2 * tp + fp + fn);
    long pos = std::count(bin.begin(), bin.end(), 1);
    if (pos > 0 && pos < static_cast<long>(bin.size())) {
      row.auroc = auroc(class_scores[static_cast<std::size_t>(c)], bin);
      row.ap = average_precision(class_scores[static_cast<std::size_t>(c)], bin);
      row.ranking_defined = true;
      auroc_sum += row.auroc;
      ++auroc_n;
    }
    report.per_class.push_back(row);
  }
  if (auroc_n > 0) report.scalars["macro_auroc"] = auroc_sum / auroc_n;
  return report;
}

// ---- inference ----

std::vector<InferOutput> infer(DapoModel& model, const RunConfig& cfg,
                               const std::vector<std::string>& image_paths,
                               const std::vector<std::string>& defect_list,
                               const std::string& out_dir) {
  for (const auto& name : defect_list) {
    const auto& known = model.prompts.defect_names;
    if (std::find(known.begin(), known.end(), name) == known.end())
      register_unseen_defect(model.prompts, model.vocab, name);
  }
  fs::create_directories(out_dir);
  int hw = cfg.enc.image_size;
  int classes = model.prompts.K() + 1;
  StatePrototypes protos =
      embed_state_prototypes(model.prompts, model.vocab, model.backbone,
                             &model.prefix, cfg.enc, cfg.progressive);
  Tensor proto_stack = protos.stacked();
  Aggregation agg = aggregation_from_string(cfg.aggregation);

  std::vector<InferOutput> results;
  for (const auto& path : image_paths) {
    InferOutput res;
    res.name = fs::path(path).stem().string();
    try {
      PngImage png = read_png(path);
      if (png.channels != 3 || png.width != hw || png.height != hw)
        throw std::runtime_error("expected " + std::to_string(hw) + "x" +
                                 std::to_string(hw) + " RGB input");
      Tensor image(Shape{hw, hw, 3});
      for (std::size_t i = 0; i < png.pixels.size(); ++i)
        image.data()[i] = static_cast<double>(png.pixels[i]) / 255.0;

      ImagePass pass = forward_image(image, model, cfg, protos, proto_stack, agg);
      Tensor map = binary_anomaly_map(pass.maps, hw, hw);
      res.image_score = image_score(pass.global_probs, map, cfg.beta);
      Tensor ml = multilabel_probs(pass.z_x, protos.normal, protos.defects, cfg.tau);
      res.multilabel = ml.data();

      PngImage map_png;
      map_png.width = map_png.height = hw;
      map_png.channels = 1;
      map_png.pixels.resize(static_cast<std::size_t>(hw) * hw);
      for (std::size_t p = 0; p < map_png.pixels.size(); ++p)
        map_png.pixels[p] = static_cast<std::uint8_t>(
            std::lround(std::clamp(map.data()[p], 0.0, 1.0) * 255.0));
      write_png(out_dir + "/" + res.name + "_map.png", map_png);
      {
        std::ofstream raw(out_dir + "/" + res.name + "_map.f64", std::ios::binary);
        for (double v : map.data()) {
          auto bits = std::bit_cast<std::uint64_t>(v);
          for (int b = 0; b < 8; ++b) {
            char byte = static_cast<char>(bits >> (8 * b));
            raw.write(&byte, 1);
          }
        }
      }

      std::vector<Tensor> planes = class_score_planes(pass.maps, classes, hw);
      PngImage mask_png;
      mask_png.width = mask_png.height = hw;
      mask_png.indexed = true;
      mask_png.pixels.resize(static_cast<std::size_t>(hw) * hw);
      for (int c = 0; c < classes; ++c) mask_png.palette.push_back(class_color(c));
      for (std::size_t p = 0; p < mask_png.pixels.size(); ++p) {
        int best = 0;
        double best_v = planes[0].data()[p];
        for (int c = 1; c < classes; ++c)
          if (planes[static_cast<std::size_t>(c)].data()[p] > best_v) {
            best_v = planes[static_cast<std::size_t>(c)].data()[p];
            best = c;
          }
        mask_png.pixels[p] = static_cast<std::uint8_t>(best);
      }
      write_png(out_dir + "/" + res.name + "_mask.png", mask_png);

      json j;
      j["name"] = res.name;
      j["image_score"] = res.image_score;
      for (std::size_t k = 0; k < model.prompts.defect_names.size(); ++k)
        j["multilabel"][model.prompts.defect_names[k]] = res.multilabel[k];
      std::ofstream jf(out_dir + "/" + res.name + ".json");
      jf << j.dump(2) << "\n";
      res.ok = true;
    } catch (const std::exception& e) {
      res.error = e.what();
    }
    results.push_back(std::move(res));
  }
  return results;
}

// ---- gradient check ----

GradcheckReport run_gradcheck(std::uint64_t seed) {
  RunConfig cfg;
  cfg.enc.width = 16;
  cfg.enc.depth = 2;
  cfg.enc.heads = 2;
  cfg.enc.patch_size = 4;
  cfg.enc.image_size = 8;
  cfg.enc.tap_layers = {1, 2};
  cfg.enc.prefix_len = 2;
  cfg.enc.text_prefix_depth = 2;
  cfg.enc.max_text_len = 16;
  cfg.corpus.image_size = 8;
  cfg.prompts_per_state = 2;
  cfg.context_len = 2;
  cfg.corpus.train_defects = {"scratch", "hole"};
  cfg.lambda = 2.0;
  cfg.validate();

  Rng rng(seed);
  Vocabulary vocab = Vocabulary::defaults();
  BackboneWeights backbone = BackboneWeights::init(cfg.enc, vocab.size(), rng);
  backbone.set_requires_grad(false);
  backbone.frozen = true;
  DapoModel model = build_model(cfg, vocab, std::move(backbone), rng);

  int hw = cfg.enc.image_size;
  Tensor image(Shape{hw, hw, 3});
  for (double& v : image.data()) v = rng.uniform();
  int classes = model.prompts.K() + 1;
  Tensor target(Shape{classes, hw, hw});
  for (int y = 0; y < hw; ++y)
    for (int x = 0; x < hw; ++x) {
      int c = static_cast<int>(rng.below(static_cast<std::uint64_t>(classes)));
      target.data()[static_cast<std::size_t>(c * hw * hw + y * hw + x)] = 1.0;
    }

  auto loss_fn = [&]() -> Tensor {
    StatePrototypes protos =
        embed_state_prototypes(model.prompts, model.vocab, model.backbone,
                               &model.prefix, cfg.enc, cfg.progressive);
    Tensor proto_stack = protos.stacked();
    ImagePass pass = forward_image(image, model, cfg, protos, proto_stack,
                                   Aggregation::Mean);
    Tensor g_loss =
        neg(log_op(clamp_min(pick_entry(pass.global_probs, 1), 1e-12)));
    Tensor l_loss = local_loss(pass.maps, target, cfg.focal_gamma);
    return total_loss(g_loss, l_loss, cfg.lambda);
  };

  auto group_of = [](const std::string& name) -> std::string {
    if (name == "prompts.V") return "V";
    if (name == "prompts.W") return "W";
    if (name.rfind("prefix.text", 0) == 0) return "U_text";
    if (name.rfind("prefix.vision", 0) == 0) return "U_vision";
    return "adapters";
  };

  GradcheckReport report;
  std::map<std::string, double> worst;
  for (const char* g : {"V", "W", "U_text", "U_vision", "adapters"}) worst[g] = 0.0;

  // One analytic backward pass populates every trainable gradient, then each
  // coordinate is probed in place with central differences.
  auto params = trainable_params(model);
  for (auto& [name, param] : params) param.zero_grad();
  std::vector<std::vector<double>> analytic;
  {
    Tape tape;
    Tensor loss = loss_fn();
    backward(loss);
  }
  for (auto& [name, param] : params)
    analytic.push_back(param.has_grad() ? param.grad()
                                        : std::vector<double>(param.data().size(), 0.0));
  for (auto& [name, param] : params) param.zero_grad();

  const double step = 1e-5;
  for (std::size_t t = 0; t < params.size(); ++t) {
    Tensor& param = params[t].second;
    std::string g = group_of(params[t].first);
    for (std::size_t i = 0; i < param.data().size(); ++i) {
      double orig = param.data()[i];
      param.data()[i] = orig + step;
      double fp = loss_fn().value();
      param.data()[i] = orig - step;
      double fm = loss_fn().value();
      param.data()[i] = orig;
      double numeric = (fp - fm) / (2.0 * step);
      double a = analytic[t][i];
      double err = std::abs(a - numeric) / std::max(1e-8, std::abs(a) + std::abs(numeric));
      worst[g] = std::max(worst[g], err);
    }
  }
  for (const auto& [g, e] : worst) {
    report.groups.emplace_back(g, e);
    report.worst = std::max(report.worst, e);
  }
  report.pass = report.worst < 1e-4;
  return report;
}

// ---- ablation sweeps ----

std::string ablate(const std::string& axis, const std::vector<std::string>& values,
                   const RunConfig& base, const DapoModel& base_model,
                   const std::vector<SampleRecord>& train_records,
                   const std::vector<SampleRecord>& target_records) {
  static const std::set<std::string> kAxes = {"lambda",      "prompt_len",
                                              "depth_Nd",    "progressive",
                                              "aggregation", "init"};
  if (!kAxes.count(axis))
    throw std::invalid_argument("ablate: unknown axis '" + axis + "'");
  if (values.empty()) throw std::invalid_argument("ablate: no values");

  std::ostringstream csv;
  csv << "axis,value,image_auroc,image_ap,pixel_auroc,aupro,status\n";
  for (const auto& value : values) {
    csv << axis << "," << value << ",";
    try {
      RunConfig cfg = base;
      if (axis == "lambda") cfg.lambda = std::stod(value);
      else if (axis == "prompt_len") cfg.context_len = std::stoi(value);
      else if (axis == "depth_Nd") cfg.enc.text_prefix_depth = std::stoi(value);
      else if (axis == "progressive") cfg.progressive = value == "on" || value == "true" || value == "1";
      else if (axis == "aggregation") cfg.aggregation = value;
      else cfg.init_strategy = value;
      cfg.validate();

      Rng rng(cfg.seed ^ 0xAB1A7EULL);
      DapoModel model = build_model(cfg, base_model.vocab, base_model.backbone, rng);
      Trainer trainer(cfg, std::move(model));
      trainer.run_epochs(train_records, cfg.epochs);
      std::vector<std::string> defects = cfg.corpus.target_defects();
      MetricsReport ad = evaluate(trainer.model(), cfg, target_records, defects,
                                  EvalTask::BinaryAD);
      MetricsReport as = evaluate(trainer.model(), cfg, target_records, defects,
                                  EvalTask::BinaryAS);
      csv << fmt_double(ad.scalars.at("image_auroc")) << ","
          << fmt_double(ad.scalars.at("image_ap")) << ","
          << fmt_double(as.scalars.at("pixel_auroc")) << ","
          << fmt_double(as.scalars.at("aupro")) << ",ok\n";
    } catch (const std::exception& e) {
      std::string msg = e.what();
      std::replace(msg.begin(), msg.end(), ',', ';');
      std::replace(msg.begin(), msg.end(), '\n', ' ');
      csv << ",,,,error: " << msg << "\n";
    }
  }
  return csv.str();
}

// ---- embedding export ----

void export_embeddings(DapoModel& model, const RunConfig& cfg,
                       const std::vector<SampleRecord>& records,
                       const std::string& out_dir) {
  fs::create_directories(out_dir);
  StatePrototypes protos =
      embed_state_prototypes(model.prompts, model.vocab, model.backbone,
                             &model.prefix, cfg.enc, cfg.progressive);
  Tensor proto_stack = protos.stacked();

  std::ofstream emb(out_dir + "/embeddings.csv");
  std::ofstream lab(out_dir + "/labels.csv");
  if (!emb || !lab)
    throw std::runtime_error("export_embeddings: cannot write to " + out_dir);
  lab << "source,label\n";

  int last_stage = static_cast<int>(cfg.enc.tap_layers.size()) - 1;
  int grid = cfg.enc.grid();
  int ps = cfg.enc.patch_size;
  for (const auto& rec : records) {
    ImageEncodeResult enc = encode_image(rec.image, model.backbone, &model.prefix,
                                         cfg.enc, cfg.progressive);
    Tensor adapted = adapt_patches(enc.taps[static_cast<std::size_t>(last_stage)],
                                   model.adapters, last_stage);
    for (int p = 0; p < adapted.dim(0); ++p) {
      for (int c = 0; c < adapted.dim(1); ++c)
        emb << (c ? "," : "") << fmt_double(adapted.at({p, c}));
      emb << "\n";
      // label each patch by its center pixel's ground-truth class
      int py = (p / grid) * ps + ps / 2, px = (p % grid) * ps + ps / 2;
      lab << rec.name << ","
          << static_cast<int>(
                 rec.mask[static_cast<std::size_t>(py) * cfg.enc.image_size + px])
          << "\n";
    }
  }
  for (int r = 0; r < proto_stack.dim(0); ++r) {
    for (int c = 0; c < proto_stack.dim(1); ++c)
      emb << (c ? "," : "") << fmt_double(proto_stack.at({r, c}));
    emb << "\n";
    lab << "prototype,"
        << (r == 0 ? std::string("normal")
                   : model.prompts.defect_names[static_cast<std::size_t>(r - 1)])
        << "\n";
  }
}

}  // namespace dapo
