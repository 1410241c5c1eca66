// End-to-end acceptance runner: one printed pass/fail line per criterion.
// Exit status is the number of failed criteria.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <set>
#include <string>
#include <unistd.h>
#include <vector>

#include "dapo/metrics.hpp"
#include "dapo/train.hpp"

using namespace dapo;
namespace fs = std::filesystem;
using Clock = std::chrono::steady_clock;

namespace {

int failures = 0;

void report(int criterion, bool pass, const std::string& what) {
  std::printf("criterion %d: %s - %s\n", criterion, pass ? "PASS" : "FAIL",
              what.c_str());
  std::fflush(stdout);
  if (!pass) ++failures;
}

void note(const std::string& what) {
  std::printf("    note: %s\n", what.c_str());
  std::fflush(stdout);
}

double elapsed(Clock::time_point a, Clock::time_point b) {
  return std::chrono::duration<double>(b - a).count();
}

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), f, v);
  return buf;
}

bool same_bits(const Tensor& a, const Tensor& b) {
  return a.shape() == b.shape() && a.data() == b.data();
}

// ---- criterion 4 oracles (pairwise / sweep / exhaustive reimplementations) ----

double auroc_oracle(const std::vector<double>& s, const std::vector<int>& y) {
  double num = 0.0;
  long pos = 0, neg = 0;
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (y[i] != 1) continue;
    ++pos;
    for (std::size_t j = 0; j < s.size(); ++j) {
      if (y[j] == 1) continue;
      if (s[i] > s[j]) num += 1.0;
      else if (s[i] == s[j]) num += 0.5;
    }
  }
  for (int l : y) neg += l == 0;
  return num / (static_cast<double>(pos) * static_cast<double>(neg));
}

double ap_oracle(const std::vector<double>& s, const std::vector<int>& y) {
  std::set<double, std::greater<double>> levels(s.begin(), s.end());
  long pos = std::count(y.begin(), y.end(), 1);
  double ap = 0.0, prev_recall = 0.0;
  for (double t : levels) {
    long tp = 0, predicted = 0;
    for (std::size_t i = 0; i < s.size(); ++i)
      if (s[i] >= t) {
        ++predicted;
        tp += y[i] == 1;
      }
    double recall = static_cast<double>(tp) / static_cast<double>(pos);
    ap += (recall - prev_recall) * static_cast<double>(tp) / static_cast<double>(predicted);
    prev_recall = recall;
  }
  return ap;
}

double aupro_oracle(const std::vector<std::vector<double>>& maps,
                    const std::vector<std::vector<std::uint8_t>>& masks, int h,
                    int w, double limit) {
  std::vector<std::vector<int>> comps;
  int next_id = 0;
  std::vector<long> comp_size;
  long negatives = 0;
  for (std::size_t m = 0; m < masks.size(); ++m) {
    std::vector<int> c(static_cast<std::size_t>(h) * w, -1);
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        std::size_t p = static_cast<std::size_t>(y) * w + x;
        if (!masks[m][p]) {
          ++negatives;
          continue;
        }
        if (c[p] != -1) continue;
        int id = next_id++;
        comp_size.push_back(0);
        std::vector<std::size_t> stack = {p};
        c[p] = id;
        while (!stack.empty()) {
          std::size_t q = stack.back();
          stack.pop_back();
          ++comp_size[static_cast<std::size_t>(id)];
          int qy = static_cast<int>(q) / w, qx = static_cast<int>(q) % w;
          for (int dy = -1; dy <= 1; ++dy)
            for (int dx = -1; dx <= 1; ++dx) {
              int ny = qy + dy, nx = qx + dx;
              if (ny < 0 || ny >= h || nx < 0 || nx >= w) continue;
              std::size_t n = static_cast<std::size_t>(ny) * w + nx;
              if (masks[m][n] && c[n] == -1) {
                c[n] = id;
                stack.push_back(n);
              }
            }
        }
      }
    comps.push_back(std::move(c));
  }
  std::set<double, std::greater<double>> levels;
  for (const auto& m : maps) levels.insert(m.begin(), m.end());
  double area = 0.0, prev_fpr = 0.0, prev_pro = 0.0;
  bool clipped = false;
  for (double t : levels) {
    std::vector<long> hits(comp_size.size(), 0);
    long fp = 0;
    for (std::size_t m = 0; m < maps.size(); ++m)
      for (std::size_t p = 0; p < maps[m].size(); ++p) {
        if (maps[m][p] < t) continue;
        if (comps[m][p] >= 0) ++hits[static_cast<std::size_t>(comps[m][p])];
        else ++fp;
      }
    double pro = 0.0;
    for (std::size_t c = 0; c < hits.size(); ++c)
      pro += static_cast<double>(hits[c]) / static_cast<double>(comp_size[c]);
    pro /= static_cast<double>(comp_size.size());
    double fpr = static_cast<double>(fp) / static_cast<double>(negatives);
    if (fpr >= limit) {
      double frac = (limit - prev_fpr) / (fpr - prev_fpr);
      double pro_at = prev_pro + frac * (pro - prev_pro);
      area += (limit - prev_fpr) * 0.5 * (prev_pro + pro_at);
      clipped = true;
      break;
    }
    area += (fpr - prev_fpr) * 0.5 * (prev_pro + pro);
    prev_fpr = fpr;
    prev_pro = pro;
  }
  if (!clipped) area += (limit - prev_fpr) * prev_pro;
  return area / limit;
}

double f1_oracle(const std::vector<int>& pred, const std::vector<int>& truth,
                 int classes) {
  double sum = 0.0;
  for (int c = 0; c < classes; ++c) {
    double tp = 0, fp = 0, fn = 0;
    for (std::size_t i = 0; i < pred.size(); ++i) {
      tp += pred[i] == c && truth[i] == c;
      fp += pred[i] == c && truth[i] != c;
      fn += pred[i] != c && truth[i] == c;
    }
    double p = tp + fp > 0 ? tp / (tp + fp) : 0.0;
    double r = tp + fn > 0 ? tp / (tp + fn) : 0.0;
    sum += (p + r) > 0 ? 2.0 * p * r / (p + r) : 0.0;
  }
  return sum / classes;
}

// ---- criterion 5 oracles ----

double focal_oracle(const std::vector<double>& pred, const std::vector<double>& tgt,
                    int c, int h, int w, double gamma) {
  double acc = 0.0;
  for (int p = 0; p < h * w; ++p) {
    double pt = 0.0;
    for (int k = 0; k < c; ++k)
      pt += pred[static_cast<std::size_t>(k * h * w + p)] *
            tgt[static_cast<std::size_t>(k * h * w + p)];
    acc += std::pow(1.0 - pt, gamma) * -std::log(std::max(pt, 1e-12));
  }
  return acc / (h * w);
}

double dice_oracle(const std::vector<double>& pred, const std::vector<double>& tgt) {
  double inter = 0.0, sp = 0.0, st = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    inter += pred[i] * tgt[i];
    sp += pred[i];
    st += tgt[i];
  }
  return 1.0 - (2.0 * inter + 1.0) / (sp + st + 1.0);
}

std::vector<double> bilinear_oracle(const std::vector<double>& in, int h, int w,
                                    int oh, int ow) {
  std::vector<double> out(static_cast<std::size_t>(oh) * ow);
  for (int y = 0; y < oh; ++y)
    for (int x = 0; x < ow; ++x) {
      double sy = std::clamp((y + 0.5) * h / oh - 0.5, 0.0, h - 1.0);
      double sx = std::clamp((x + 0.5) * w / ow - 0.5, 0.0, w - 1.0);
      int y0 = std::clamp(static_cast<int>(std::floor(sy)), 0, h - 2);
      int x0 = std::clamp(static_cast<int>(std::floor(sx)), 0, w - 2);
      double fy = h == 1 ? 0.0 : sy - y0, fx = w == 1 ? 0.0 : sx - x0;
      int y1 = std::min(y0 + 1, h - 1), x1 = std::min(x0 + 1, w - 1);
      auto at = [&](int r, int c) { return in[static_cast<std::size_t>(r) * w + c]; };
      out[static_cast<std::size_t>(y) * ow + x] =
          (1 - fy) * ((1 - fx) * at(y0, x0) + fx * at(y0, x1)) +
          fy * ((1 - fx) * at(y1, x0) + fx * at(y1, x1));
    }
  return out;
}

// tie-heavy random scores + mixed labels
std::vector<double> random_scores(int n, Rng& rng, int levels) {
  std::vector<double> s(static_cast<std::size_t>(n));
  for (double& v : s)
    v = static_cast<double>(rng.below(static_cast<std::uint64_t>(levels))) / levels;
  return s;
}

std::vector<int> random_labels(int n, Rng& rng) {
  std::vector<int> y(static_cast<std::size_t>(n));
  bool h0 = false, h1 = false;
  while (!(h0 && h1)) {
    h0 = h1 = false;
    for (int& v : y) {
      v = static_cast<int>(rng.below(2));
      (v ? h1 : h0) = true;
    }
  }
  return y;
}

RunConfig small_run_config() {
  RunConfig cfg;
  cfg.enc.width = 16;
  cfg.enc.depth = 2;
  cfg.enc.heads = 2;
  cfg.enc.patch_size = 8;
  cfg.enc.image_size = 32;
  cfg.enc.tap_layers = {1, 2};
  cfg.enc.prefix_len = 2;
  cfg.enc.text_prefix_depth = 2;
  cfg.enc.alpha = 0.1;
  cfg.enc.max_text_len = 16;
  cfg.corpus = CorpusSpec::defaults();
  cfg.corpus.image_size = 32;
  cfg.corpus.train_count = 12;
  cfg.corpus.target_count = 8;
  cfg.corpus.seed = 3;
  cfg.prompts_per_state = 2;
  cfg.context_len = 2;
  cfg.batch = 4;
  cfg.seed = 11;
  cfg.validate();
  return cfg;
}

DapoModel model_from_frozen(const RunConfig& cfg, const Vocabulary& vocab,
                            const BackboneWeights& bb, std::uint64_t seed) {
  BackboneWeights copy = bb;  // tensor handles are shared; frozen weights never move
  Rng rng(seed);
  return build_model(cfg, vocab, std::move(copy), rng);
}

}  // namespace

int main() {
  const fs::path work =
      fs::temp_directory_path() / ("dapo_acceptance_" + std::to_string(::getpid()));
  fs::remove_all(work);
  fs::create_directories(work);

  // ---- criterion 1: gradient correctness on the tiny config ----
  {
    auto t0 = Clock::now();
    GradcheckReport gc = run_gradcheck(7);
    double dt = elapsed(t0, Clock::now());
    std::string detail = "gradcheck worst rel err " + fmt("%.3g", gc.worst) + " in " +
                         fmt("%.1f", dt) + "s (groups:";
    for (auto& [name, err] : gc.groups) detail += " " + name + "=" + fmt("%.2g", err);
    detail += ")";
    report(1, gc.pass && dt < 60.0, detail);
  }

  // ---- criterion 3: alpha=0 progressive == naive re-injection, bit-identical ----
  {
    RunConfig cfg = small_run_config();
    cfg.enc.alpha = 0.0;
    Vocabulary vocab = Vocabulary::defaults();
    Rng rng(301);
    BackboneWeights bb = BackboneWeights::init(cfg.enc, vocab.size(), rng);
    PrefixState prefix = PrefixState::init(cfg.enc, rng, 0.0, 0.05);
    bool all_same = true;
    std::vector<std::string> captions = {"a navy ring", "an olive cross",
                                         "a gold capsule", "a slate square"};
    for (int trial = 0; trial < 20; ++trial) {
      Tensor img(Shape{cfg.enc.image_size, cfg.enc.image_size, 3});
      for (double& v : img.data()) v = rng.uniform();
      ImageEncodeResult a = encode_image(img, bb, &prefix, cfg.enc, true);
      ImageEncodeResult b = encode_image(img, bb, &prefix, cfg.enc, false);
      all_same = all_same && same_bits(a.global, b.global);
      for (std::size_t i = 0; i < a.taps.size(); ++i)
        all_same = all_same && same_bits(a.taps[i], b.taps[i]);
      Tensor rows = embed_token_ids(
          vocab.tokenize(captions[static_cast<std::size_t>(trial) % captions.size()]),
          bb, vocab.start_id(), vocab.end_id());
      Tensor za = encode_text(rows, rows.dim(0) - 1, bb, &prefix, cfg.enc, true);
      Tensor zb = encode_text(rows, rows.dim(0) - 1, bb, &prefix, cfg.enc, false);
      all_same = all_same && same_bits(za, zb);
    }
    report(3, all_same,
           "20 seeded inputs: progressive(alpha=0) and plain prefix re-injection "
           "agree bit-for-bit on text and image towers");
  }

  // ---- criterion 4: ranking metric oracles ----
  {
    Rng rng(401);
    bool rank_exact = true, integrals_ok = true, roc_ok = true;
    for (int trial = 0; trial < 100; ++trial) {
      int n = rng.range(8, 50);
      auto s = random_scores(n, rng, rng.range(3, 12));
      auto y = random_labels(n, rng);
      if (auroc(s, y) != auroc_oracle(s, y)) rank_exact = false;
      if (std::abs(average_precision(s, y) - ap_oracle(s, y)) > 1e-9)
        integrals_ok = false;
      auto curve = roc_curve(s, y);
      double area = 0.0;
      for (std::size_t i = 1; i < curve.size(); ++i)
        area += (curve[i].fpr - curve[i - 1].fpr) * 0.5 *
                (curve[i].tpr + curve[i - 1].tpr);
      if (std::abs(area - auroc(s, y)) > 1e-12) roc_ok = false;

      std::vector<int> pred(static_cast<std::size_t>(n)), truth(static_cast<std::size_t>(n));
      int classes = rng.range(2, 5);
      for (int& v : pred) v = static_cast<int>(rng.below(static_cast<std::uint64_t>(classes)));
      for (int& v : truth) v = static_cast<int>(rng.below(static_cast<std::uint64_t>(classes)));
      if (std::abs(f1_macro(pred, truth, classes) - f1_oracle(pred, truth, classes)) > 1e-12)
        rank_exact = false;
    }
    bool aupro_ok = true;
    for (int trial = 0; trial < 100; ++trial) {
      std::vector<std::vector<double>> maps;
      std::vector<std::vector<std::uint8_t>> masks;
      int n_img = rng.range(1, 3);
      bool any = false;
      for (int m = 0; m < n_img; ++m) {
        std::vector<double> map(64);
        std::vector<std::uint8_t> msk(64, 0);
        for (double& v : map) v = static_cast<double>(rng.below(6)) / 6.0;
        for (auto& v : msk) v = rng.uniform() < 0.25 ? 1 : 0;
        if (std::all_of(msk.begin(), msk.end(), [](std::uint8_t v) { return v; }))
          msk[0] = 0;
        any = any || std::any_of(msk.begin(), msk.end(),
                                 [](std::uint8_t v) { return v; });
        maps.push_back(std::move(map));
        masks.push_back(std::move(msk));
      }
      if (!any) masks[0][5] = 1;
      if (std::abs(aupro(maps, masks, 8, 8, 0.3) -
                   aupro_oracle(maps, masks, 8, 8, 0.3)) > 1e-9)
        aupro_ok = false;
    }
    report(4, rank_exact && integrals_ok && roc_ok && aupro_ok,
           "100 seeded instances per metric: auroc/f1 exact, ap+aupro within "
           "1e-9, roc trapezoid area == auroc within 1e-12");
  }

  // ---- criterion 5: loss oracles ----
  {
    Rng rng(501);
    bool focal_ok = true, dice_ok = true;
    for (int trial = 0; trial < 50; ++trial) {
      int c = rng.range(2, 5);
      std::vector<double> pred(static_cast<std::size_t>(c) * 16, 0.0), tgt(pred.size(), 0.0);
      for (int p = 0; p < 16; ++p) {
        double z = 0.0;
        for (int k = 0; k < c; ++k) {
          pred[static_cast<std::size_t>(k * 16 + p)] = rng.uniform(0.05, 1.0);
          z += pred[static_cast<std::size_t>(k * 16 + p)];
        }
        for (int k = 0; k < c; ++k) pred[static_cast<std::size_t>(k * 16 + p)] /= z;
        tgt[static_cast<std::size_t>(static_cast<int>(rng.below(static_cast<std::uint64_t>(c))) * 16 + p)] = 1.0;
      }
      double gamma = static_cast<double>(rng.below(4));
      Tensor pt(Shape{c, 4, 4}, pred), tt(Shape{c, 4, 4}, tgt);
      if (std::abs(focal_loss(pt, tt, gamma).value() -
                   focal_oracle(pred, tgt, c, 4, 4, gamma)) > 1e-12)
        focal_ok = false;

      std::vector<double> dp(16), dt(16);
      for (double& v : dp) v = rng.uniform();
      for (double& v : dt) v = rng.below(2) ? 1.0 : 0.0;
      if (std::abs(dice_loss(Tensor(Shape{4, 4}, dp), Tensor(Shape{4, 4}, dt)).value() -
                   dice_oracle(dp, dt)) > 1e-12)
        dice_ok = false;
    }

    // 2-stage composition vs independent scalar assembly
    SimilarityMapSet maps;
    maps.grid = 2;
    int classes = 3, out = 4;
    for (int s = 0; s < 2; ++s) {
      std::vector<double> m(static_cast<std::size_t>(4 * classes));
      for (int p = 0; p < 4; ++p) {
        double z = 0.0;
        for (int c = 0; c < classes; ++c) {
          m[static_cast<std::size_t>(p * classes + c)] = rng.uniform(0.05, 1.0);
          z += m[static_cast<std::size_t>(p * classes + c)];
        }
        for (int c = 0; c < classes; ++c) m[static_cast<std::size_t>(p * classes + c)] /= z;
      }
      maps.maps.push_back(Tensor(Shape{4, classes}, m));
    }
    std::vector<double> tgt(static_cast<std::size_t>(classes * out * out), 0.0);
    for (int p = 0; p < out * out; ++p)
      tgt[static_cast<std::size_t>(static_cast<int>(rng.below(3)) * out * out + p)] = 1.0;
    double want = 0.0;
    for (int s = 0; s < 2; ++s) {
      std::vector<double> up_full(static_cast<std::size_t>(classes * out * out));
      const auto& m = maps.maps[static_cast<std::size_t>(s)].data();
      for (int c = 0; c < classes; ++c) {
        std::vector<double> plane(4);
        for (int p = 0; p < 4; ++p)
          plane[static_cast<std::size_t>(p)] = m[static_cast<std::size_t>(p * classes + c)];
        auto up = bilinear_oracle(plane, 2, 2, out, out);
        std::copy(up.begin(), up.end(), up_full.begin() + static_cast<long>(c) * out * out);
      }
      std::vector<double> up0(up_full.begin(), up_full.begin() + out * out);
      std::vector<double> y0(tgt.begin(), tgt.begin() + out * out);
      std::vector<double> inv0(16), inv_y0(16);
      for (int i = 0; i < 16; ++i) {
        inv0[static_cast<std::size_t>(i)] = 1.0 - up0[static_cast<std::size_t>(i)];
        inv_y0[static_cast<std::size_t>(i)] = 1.0 - y0[static_cast<std::size_t>(i)];
      }
      want += focal_oracle(up_full, tgt, classes, out, out, 2.0) +
              dice_oracle(up0, y0) + dice_oracle(inv0, inv_y0);
    }
    want /= 2.0;
    double got = local_loss(maps, Tensor(Shape{classes, out, out}, tgt)).value();
    bool local_ok = std::abs(got - want) <= 1e-12;
    report(5, focal_ok && dice_ok && local_ok,
           "50 seeded 4x4 focal/dice cases within 1e-12; 2-stage composition "
           "matches scalar assembly (delta " + fmt("%.2g", std::abs(got - want)) + ")");
  }

  // ---- the shared full-scale pipeline (criteria 2, 6, 7, 8, 9) ----
  RunConfig cfg;
  auto pipeline_t0 = Clock::now();
  GeneratedCorpus corpus = generate_corpus(cfg.corpus);
  double witness = shift_witness_accuracy(corpus.train, corpus.target);
  note("shift witness accuracy " + fmt("%.3f", witness) +
       " (corpus valid for criterion 7 requires > 0.9)");

  Vocabulary vocab = Vocabulary::defaults();
  std::vector<CaptionPair> pairs;
  for (auto& [img, cap] : corpus.captions) pairs.push_back({img, cap});
  Rng prng(cfg.seed);
  std::vector<double> plog;
  BackboneWeights frozen =
      pretrain_backbone(pairs, vocab, cfg.enc, cfg.pretrain, prng, &plog);
  note("pretraining loss " + fmt("%.3f", plog.front()) + " -> " +
       fmt("%.3f", plog.back()) + " over " + std::to_string(cfg.pretrain.epochs) +
       " epochs");

  DapoModel model = model_from_frozen(cfg, vocab, frozen, cfg.seed ^ 0xB0D);
  std::string hash_before = backbone_hash(model);
  Trainer trainer(cfg, std::move(model));
  auto tlogs = trainer.run_epochs(corpus.train, cfg.epochs);
  std::string hash_after = backbone_hash(trainer.model());
  note("training loss " + fmt("%.3f", tlogs.front().total) + " -> " +
       fmt("%.3f", tlogs.back().total) + " over " + std::to_string(cfg.epochs) +
       " epochs");

  // ---- criterion 2: freeze contract ----
  report(2, hash_before == hash_after,
         "backbone sha256 before == after the full " + std::to_string(cfg.epochs) +
             "-epoch run (" + hash_before.substr(0, 16) + "...)");

  // ---- criterion 6: zero-shot registration invariance ----
  std::string worst_class;
  double worst_f1 = 2.0;
  std::string f1_list;
  {
    std::size_t count_before = trainable_param_count(trainer.model());
    std::vector<std::uint8_t> bytes_before = serialize_checkpoint(trainer.to_checkpoint());
    register_unseen_defect(trainer.model().prompts, trainer.model().vocab, "bent");
    register_unseen_defect(trainer.model().prompts, trainer.model().vocab, "missing");
    std::size_t count_after = trainable_param_count(trainer.model());
    std::vector<std::uint8_t> bytes_after = serialize_checkpoint(trainer.to_checkpoint());
    MetricsReport mt = evaluate(trainer.model(), cfg, corpus.target,
                                corpus.target_defect_list, EvalTask::MultitypeAS);
    bool rows_ok = mt.per_class.size() ==
                   corpus.target_defect_list.size() + 1;
    report(6, count_before == count_after && bytes_before == bytes_after && rows_ok,
           "registering 2 unseen defects: parameter count delta 0, checkpoint "
           "byte delta " + std::to_string(static_cast<long>(bytes_after.size()) -
                                          static_cast<long>(bytes_before.size())) +
               ", multi-type report has " + std::to_string(mt.per_class.size()) +
               " per-class rows");

    // criterion 9's first trend comes from this report; emitted further down
    for (const auto& row : mt.per_class) {
      if (row.name == "normal") continue;
      f1_list += " " + row.name + "=" + fmt("%.3f", row.f1);
      if (row.f1 < worst_f1) {
        worst_f1 = row.f1;
        worst_class = row.name;
      }
    }
  }

  // ---- criterion 7: desk-scale learning signal + runtime ----
  {
    MetricsReport ad = evaluate(trainer.model(), cfg, corpus.target,
                                corpus.target_defect_list, EvalTask::BinaryAD);
    MetricsReport as = evaluate(trainer.model(), cfg, corpus.target,
                                corpus.target_defect_list, EvalTask::BinaryAS);
    double minutes = elapsed(pipeline_t0, Clock::now()) / 60.0;
    double img_auroc = ad.scalars.at("image_auroc");
    double px_auroc = as.scalars.at("pixel_auroc_excl_missing");
    note("target split: image_auroc=" + fmt("%.4f", img_auroc) +
         " image_ap=" + fmt("%.4f", ad.scalars.at("image_ap")) +
         " pixel_auroc=" + fmt("%.4f", as.scalars.at("pixel_auroc")) +
         " pixel_auroc_excl_missing=" + fmt("%.4f", px_auroc) +
         " aupro=" + fmt("%.4f", as.scalars.at("aupro")));
    report(7,
           witness > 0.9 && img_auroc >= 0.75 && px_auroc >= 0.80 && minutes < 15.0,
           "full pipeline: image auroc " + fmt("%.3f", img_auroc) +
               " (>= 0.75), pixel auroc excl missing " + fmt("%.3f", px_auroc) +
               " (>= 0.80), " + fmt("%.1f", minutes) + " min (< 15)");
  }

  // ---- criterion 8: untrained prompts are a null baseline ----
  {
    bool in_range = true;
    std::string per_seed;
    for (std::uint64_t seed = 1; seed <= 5; ++seed) {
      DapoModel null_model = model_from_frozen(cfg, vocab, frozen, 0x8000 + seed);
      MetricsReport ad = evaluate(null_model, cfg, corpus.target,
                                  corpus.target_defect_list, EvalTask::BinaryAD);
      double a = ad.scalars.at("image_auroc");
      per_seed += " " + fmt("%.3f", a);
      in_range = in_range && a >= 0.4 && a <= 0.6;
    }
    report(8, in_range, "untrained prompts, 5 seeds: image auroc" + per_seed +
                            " (all within [0.4, 0.6])");
  }

  // ---- criterion 9 (logged, never hard-asserted): paper trends at toy scale ----
  {
    MetricsReport as_l4 = evaluate(trainer.model(), cfg, corpus.target,
                                   corpus.target_defect_list, EvalTask::BinaryAS);
    RunConfig cfg0 = cfg;
    cfg0.lambda = 0.0;
    DapoModel m0 = model_from_frozen(cfg0, vocab, frozen, cfg.seed ^ 0xB0D);
    Trainer t0(cfg0, std::move(m0));
    t0.run_epochs(corpus.train, cfg0.epochs);
    MetricsReport as_l0 = evaluate(t0.model(), cfg0, corpus.target,
                                   corpus.target_defect_list, EvalTask::BinaryAS);
    double p0 = as_l0.scalars.at("pixel_auroc"), p4 = as_l4.scalars.at("pixel_auroc");
    note("per-class defect f1:" + f1_list);
    note("pixel auroc lambda=0 " + fmt("%.4f", p0) + " vs lambda=4 " +
         fmt("%.4f", p4));
    report(9, true,
           "logged only: lowest per-class f1 '" + worst_class + "' (" +
               fmt("%.3f", worst_f1) +
               (worst_class == "missing" ? ", matches" : ", differs from") +
               " the expected 'missing'); lambda=0 " +
               (p0 < p4 ? "underperforms" : "does not underperform") +
               " lambda=4 on pixel auroc");
  }

  // ---- criterion 10: determinism and persistence ----
  {
    RunConfig cfg10 = small_run_config();
    GeneratedCorpus tiny = generate_corpus(cfg10.corpus);
    Vocabulary v10 = Vocabulary::defaults();
    Rng b10(1001);
    BackboneWeights bb10 = BackboneWeights::init(cfg10.enc, v10.size(), b10);
    bb10.frozen = true;
    bb10.set_requires_grad(false);

    Rng m1(1002), m2(1002);
    BackboneWeights bb_copy = bb10;
    Trainer straight(cfg10, build_model(cfg10, v10, std::move(bb10), m1));
    straight.run_epochs(tiny.train, 6);

    Trainer half(cfg10, build_model(cfg10, v10, std::move(bb_copy), m2));
    half.run_epochs(tiny.train, 3);
    Trainer resumed = Trainer::from_checkpoint(
        deserialize_checkpoint(serialize_checkpoint(half.to_checkpoint())));
    resumed.run_epochs(tiny.train, 3);
    bool ckpt_ok = serialize_checkpoint(resumed.to_checkpoint()) ==
                   serialize_checkpoint(straight.to_checkpoint());

    fs::path d1 = work / "corpus_a", d2 = work / "corpus_b";
    GeneratedCorpus c1 = generate_corpus(cfg10.corpus);
    GeneratedCorpus c2 = generate_corpus(cfg10.corpus);
    save_split(c1.train, (d1 / "train").string(), cfg10.corpus.train_defects);
    save_split(c2.train, (d2 / "train").string(), cfg10.corpus.train_defects);
    save_split(c1.target, (d1 / "target").string(), c1.target_defect_list);
    save_split(c2.target, (d2 / "target").string(), c2.target_defect_list);
    bool files_ok = true;
    int file_count = 0;
    for (const auto& e : fs::recursive_directory_iterator(d1)) {
      if (!e.is_regular_file()) continue;
      ++file_count;
      fs::path other = d2 / fs::relative(e.path(), d1);
      std::ifstream fa(e.path(), std::ios::binary), fb(other, std::ios::binary);
      std::string ba((std::istreambuf_iterator<char>(fa)), {});
      std::string bbs((std::istreambuf_iterator<char>(fb)), {});
      if (!fb || ba != bbs) files_ok = false;
    }
    report(10, ckpt_ok && files_ok && file_count > 0,
           "train 3 + save/load + train 3 checkpoints byte-identically to "
           "train 6; corpus regeneration reproduced " +
               std::to_string(file_count) + " files byte-identically");
  }

  fs::remove_all(work);
  std::printf("%s (%d of 10 criteria failed)\n", failures == 0 ? "ALL PASS" : "FAILURES",
              failures);
  return failures;
}
