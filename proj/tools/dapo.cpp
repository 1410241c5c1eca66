// Command-line front end: data generation, contrastive pretraining, prompt
// training, evaluation, inference, gradient checking, ablations and exports.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>

#include "CLI11.hpp"
#include "dapo/train.hpp"
#include "json.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace dapo;

namespace {

// Collects --config plus per-field overrides; overrides win over the file.
struct ConfigCli {
  std::string config_path;
  json overrides = json::object();

  void attach(CLI::App* app) {
    app->add_option("--config", config_path, "JSON config file");
    auto opt_int = [this, app](const char* flag, const std::string& key) {
      app->add_option_function<int>(
          flag, [this, key](int v) { overrides[key] = v; });
    };
    auto opt_dbl = [this, app](const char* flag, const std::string& key) {
      app->add_option_function<double>(
          flag, [this, key](double v) { overrides[key] = v; });
    };
    auto opt_str = [this, app](const char* flag, const std::string& key) {
      app->add_option_function<std::string>(
          flag, [this, key](const std::string& v) { overrides[key] = v; });
    };
    opt_int("--width", "width");
    opt_int("--depth", "depth");
    opt_int("--heads", "heads");
    opt_int("--patch-size", "patch_size");
    opt_int("--image-size", "image_size");
    opt_int("--prefix-len", "prefix_len");
    opt_int("--text-prefix-depth", "text_prefix_depth");
    opt_dbl("--alpha", "alpha");
    opt_int("--max-text-len", "max_text_len");
    opt_int("--prompts-per-state", "prompts_per_state");
    opt_int("--context-len", "context_len");
    opt_dbl("--lambda", "lambda");
    opt_dbl("--tau", "tau");
    opt_dbl("--beta", "beta");
    opt_dbl("--focal-gamma", "focal_gamma");
    opt_dbl("--lr", "lr");
    opt_int("--batch", "batch");
    opt_int("--epochs", "epochs");
    opt_str("--init-strategy", "init_strategy");
    opt_dbl("--offset-mult", "offset_mult");
    opt_str("--aggregation", "aggregation");
    opt_int("--pretrain-epochs", "pretrain_epochs");
    opt_int("--pretrain-batch", "pretrain_batch");
    opt_dbl("--pretrain-lr", "pretrain_lr");
    opt_int("--train-count", "train_count");
    opt_int("--target-count", "target_count");
    opt_dbl("--anomalous-fraction", "anomalous_fraction");
    opt_str("--data-dir", "data_dir");
    opt_str("--run-dir", "run_dir");
    opt_str("--backbone-path", "backbone_path");
    app->add_option_function<std::uint64_t>(
        "--seed", [this](std::uint64_t v) { overrides["seed"] = v; });
    app->add_option_function<std::uint64_t>(
        "--corpus-seed", [this](std::uint64_t v) { overrides["corpus_seed"] = v; });
    app->add_option_function<std::vector<int>>(
        "--tap-layers", [this](const std::vector<int>& v) { overrides["tap_layers"] = v; });
    app->add_flag_function("--progressive,!--no-progressive", [this](std::int64_t n) {
      overrides["progressive"] = n > 0;
    });
  }

  RunConfig resolve() const {
    json base = json::object();
    if (!config_path.empty()) {
      std::ifstream f(config_path);
      if (!f) throw std::runtime_error("cannot open config " + config_path);
      base = json::parse(f);
    }
    for (auto it = overrides.begin(); it != overrides.end(); ++it)
      base[it.key()] = it.value();
    return RunConfig::from_json(base.dump());
  }
};

std::vector<CaptionPair> load_caption_pairs(const RunConfig& cfg) {
  std::vector<SampleRecord> train = load_split(cfg.data_dir + "/train");
  std::map<std::string, const SampleRecord*> by_name;
  for (const auto& r : train) by_name[r.name] = &r;

  std::ifstream f(cfg.data_dir + "/captions.txt");
  if (!f)
    throw std::runtime_error("cannot open " + cfg.data_dir +
                             "/captions.txt (run generate-data first)");
  std::vector<CaptionPair> pairs;
  std::string line;
  while (std::getline(f, line)) {
    if (line.empty()) continue;
    auto tab = line.find('\t');
    if (tab == std::string::npos)
      throw std::runtime_error("malformed caption line: " + line);
    std::string name = line.substr(0, tab);
    auto it = by_name.find(name);
    if (it == by_name.end())
      throw std::runtime_error("caption refers to unknown sample " + name);
    pairs.push_back({it->second->image, line.substr(tab + 1)});
  }
  return pairs;
}

DapoModel model_with_backbone(RunConfig& cfg) {
  DapoModel m;
  load_backbone(cfg.backbone_path, m, cfg);
  return m;
}

void write_text(const std::string& path, const std::string& text) {
  std::ofstream f(path);
  if (!f) throw std::runtime_error("cannot write " + path);
  f << text;
}

int cmd_generate_data(const RunConfig& cfg) {
  GeneratedCorpus corpus = generate_corpus(cfg.corpus);
  save_split(corpus.train, cfg.data_dir + "/train", corpus.train_defect_list);
  save_split(corpus.target, cfg.data_dir + "/target", corpus.target_defect_list);
  std::ofstream cap(cfg.data_dir + "/captions.txt");
  for (std::size_t i = 0; i < corpus.captions.size(); ++i)
    cap << corpus.train[i].name << "\t" << corpus.captions[i].second << "\n";
  double witness = shift_witness_accuracy(corpus.train, corpus.target);
  std::cout << "wrote " << corpus.train.size() << " train / " << corpus.target.size()
            << " target samples to " << cfg.data_dir << "\n"
            << "distribution-shift witness accuracy: " << witness << "\n";
  return 0;
}

int cmd_pretrain(RunConfig cfg) {
  std::vector<CaptionPair> pairs = load_caption_pairs(cfg);
  Vocabulary vocab = Vocabulary::defaults();
  Rng rng(cfg.seed);
  std::vector<double> loss_log;
  DapoModel m;
  m.vocab = vocab;
  m.backbone = pretrain_backbone(pairs, vocab, cfg.enc, cfg.pretrain, rng, &loss_log);
  save_backbone(cfg.backbone_path, m, cfg);
  std::cout << "pretrained on " << pairs.size() << " pairs; first/last batch loss "
            << (loss_log.empty() ? 0.0 : loss_log.front()) << " -> "
            << (loss_log.empty() ? 0.0 : loss_log.back()) << "\nsaved backbone to "
            << cfg.backbone_path << "\n";
  return 0;
}

int cmd_train(RunConfig cfg) {
  DapoModel model = model_with_backbone(cfg);
  std::vector<SampleRecord> train = load_split(cfg.data_dir + "/train");
  Rng rng(cfg.seed);
  DapoModel full = build_model(cfg, model.vocab, std::move(model.backbone), rng);
  std::string hash_before = backbone_hash(full);
  Trainer trainer(cfg, std::move(full));
  std::vector<StepLoss> log = trainer.run_epochs(train, cfg.epochs, cfg.run_dir);
  save_checkpoint(cfg.run_dir + "/final.dapo", trainer.to_checkpoint());
  std::string hash_after = backbone_hash(trainer.model());
  std::cout << "trained " << trainer.step_count() << " steps; final total loss "
            << (log.empty() ? 0.0 : log.back().total) << "\n"
            << "backbone hash before/after: " << hash_before.substr(0, 16) << " / "
            << hash_after.substr(0, 16)
            << (hash_before == hash_after ? " (frozen)" : " (VIOLATED)") << "\n"
            << "checkpoint: " << cfg.run_dir << "/final.dapo\n";
  return hash_before == hash_after ? 0 : 1;
}

int cmd_eval(const std::string& ckpt_path, const std::string& task_name,
             const std::string& split) {
  Trainer trainer = Trainer::from_checkpoint(load_checkpoint(ckpt_path));
  RunConfig cfg = trainer.config();
  std::string split_dir = cfg.data_dir + "/" + split;
  std::vector<SampleRecord> records = load_split(split_dir);
  std::vector<std::string> defects = load_defect_list(split_dir + "/defects.txt");
  MetricsReport report = evaluate(trainer.model(), cfg, records, defects,
                                  eval_task_from_string(task_name));
  fs::create_directories(cfg.run_dir);
  write_text(cfg.run_dir + "/report_" + task_name + "_" + split + ".json",
             report.to_json() + "\n");
  write_text(cfg.run_dir + "/report_" + task_name + "_" + split + ".csv",
             report.to_csv());
  std::cout << report.to_json() << "\n";
  return 0;
}

int cmd_infer(const std::string& ckpt_path, const std::string& input,
              const std::string& defects_csv, const std::string& out_dir) {
  Trainer trainer = Trainer::from_checkpoint(load_checkpoint(ckpt_path));
  RunConfig cfg = trainer.config();
  std::vector<std::string> paths;
  if (fs::is_directory(input)) {
    for (const auto& e : fs::directory_iterator(input))
      if (e.path().extension() == ".png") paths.push_back(e.path().string());
    std::sort(paths.begin(), paths.end());
  } else {
    paths.push_back(input);
  }
  std::vector<std::string> defects;
  std::stringstream ss(defects_csv);
  std::string item;
  while (std::getline(ss, item, ','))
    if (!item.empty()) defects.push_back(item);
  auto results = infer(trainer.model(), cfg, paths, defects, out_dir);
  int failures = 0;
  for (const auto& r : results) {
    if (r.ok) {
      std::cout << r.name << ": image score " << r.image_score << "\n";
    } else {
      std::cerr << r.name << ": " << r.error << "\n";
      ++failures;
    }
  }
  return failures == static_cast<int>(results.size()) && !results.empty() ? 1 : 0;
}

int cmd_gradcheck(std::uint64_t seed) {
  GradcheckReport report = run_gradcheck(seed);
  for (const auto& [group, err] : report.groups)
    std::cout << group << ": max rel err " << err << "\n";
  std::cout << (report.pass ? "PASS" : "FAIL") << " (worst " << report.worst
            << ", threshold 1e-4)\n";
  return report.pass ? 0 : 1;
}

int cmd_ablate(RunConfig cfg, const std::string& axis,
               const std::vector<std::string>& values) {
  DapoModel model = model_with_backbone(cfg);
  std::vector<SampleRecord> train = load_split(cfg.data_dir + "/train");
  std::vector<SampleRecord> target = load_split(cfg.data_dir + "/target");
  std::string csv = ablate(axis, values, cfg, model, train, target);
  fs::create_directories(cfg.run_dir);
  write_text(cfg.run_dir + "/ablate_" + axis + ".csv", csv);
  std::cout << csv;
  return 0;
}

int cmd_export(const std::string& ckpt_path, const std::string& split, int count,
               const std::string& out_dir) {
  Trainer trainer = Trainer::from_checkpoint(load_checkpoint(ckpt_path));
  RunConfig cfg = trainer.config();
  std::vector<SampleRecord> records = load_split(cfg.data_dir + "/" + split);
  if (count > 0 && count < static_cast<int>(records.size()))
    records.resize(static_cast<std::size_t>(count));
  export_embeddings(trainer.model(), cfg, records, out_dir);
  std::cout << "exported embeddings for " << records.size() << " samples to "
            << out_dir << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"defect-aware prompt optimization toolkit"};
  app.require_subcommand(1);

  ConfigCli gen_cfg, pre_cfg, train_cfg, abl_cfg;
  auto* gen = app.add_subcommand("generate-data", "render the synthetic corpus");
  gen_cfg.attach(gen);
  auto* pre = app.add_subcommand("pretrain", "contrastive backbone pretraining");
  pre_cfg.attach(pre);
  auto* train = app.add_subcommand("train", "prompt/prefix/adapter training");
  train_cfg.attach(train);

  std::string ckpt, task = "binary_ad", split = "target";
  auto* eval = app.add_subcommand("eval", "run an evaluation protocol");
  eval->add_option("--checkpoint", ckpt)->required();
  eval->add_option("--task", task, "binary_ad | binary_as | multitype_as");
  eval->add_option("--split", split, "train | target");

  std::string in_path, in_defects, in_out = "infer_out";
  auto* inf = app.add_subcommand("infer", "score images and export maps");
  inf->add_option("--checkpoint", ckpt)->required();
  inf->add_option("--input", in_path, "PNG file or directory")->required();
  inf->add_option("--defects", in_defects, "comma-separated defect names");
  inf->add_option("--out", in_out);

  std::uint64_t gc_seed = 7;
  auto* gc = app.add_subcommand("gradcheck", "finite-difference gradient check");
  gc->add_option("--seed", gc_seed);

  std::string axis;
  std::vector<std::string> values;
  auto* abl = app.add_subcommand("ablate", "sweep one study axis");
  abl_cfg.attach(abl);
  abl->add_option("--axis", axis,
                  "lambda | prompt_len | depth_Nd | progressive | aggregation | init")
      ->required();
  abl->add_option("--values", values, "values to sweep")->required();

  int exp_count = 8;
  std::string exp_out = "embeddings";
  auto* exp = app.add_subcommand("export-embeddings", "dump features as CSV");
  exp->add_option("--checkpoint", ckpt)->required();
  exp->add_option("--split", split);
  exp->add_option("--count", exp_count, "number of samples (0 = all)");
  exp->add_option("--out", exp_out);

  CLI11_PARSE(app, argc, argv);

  try {
    if (gen->parsed()) return cmd_generate_data(gen_cfg.resolve());
    if (pre->parsed()) return cmd_pretrain(pre_cfg.resolve());
    if (train->parsed()) return cmd_train(train_cfg.resolve());
    if (eval->parsed()) return cmd_eval(ckpt, task, split);
    if (inf->parsed()) return cmd_infer(ckpt, in_path, in_defects, in_out);
    if (gc->parsed()) return cmd_gradcheck(gc_seed);
    if (abl->parsed()) return cmd_ablate(abl_cfg.resolve(), axis, values);
    if (exp->parsed()) return cmd_export(ckpt, split, exp_count, exp_out);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
