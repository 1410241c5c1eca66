#include "dapo/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace dapo {

namespace {

void check_scored(const std::vector<double>& scores, const std::vector<int>& labels) {
  if (scores.size() != labels.size())
    throw std::invalid_argument("metrics: score/label count mismatch");
  if (scores.empty()) throw std::invalid_argument("metrics: empty input");
  for (double s : scores)
    if (!std::isfinite(s)) throw std::invalid_argument("metrics: non-finite score");
  for (int l : labels)
    if (l != 0 && l != 1) throw std::invalid_argument("metrics: labels must be 0/1");
}

std::pair<long, long> class_counts(const std::vector<int>& labels) {
  long pos = std::count(labels.begin(), labels.end(), 1);
  return {pos, static_cast<long>(labels.size()) - pos};
}

// Indices sorted by descending score.
std::vector<std::size_t> order_desc(const std::vector<double>& scores) {
  std::vector<std::size_t> idx(scores.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
    return scores[a] > scores[b];
  });
  return idx;
}

}  // namespace

double auroc(const std::vector<double>& scores, const std::vector<int>& labels) {
  check_scored(scores, labels);
  auto [pos, neg] = class_counts(labels);
  if (pos == 0 || neg == 0)
    throw std::invalid_argument("auroc: needs both classes present");

  // Mann-Whitney U from midranks over ascending scores.
  std::vector<std::size_t> idx(scores.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::sort(idx.begin(), idx.end(),
            [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  double rank_sum_pos = 0.0;
  std::size_t i = 0;
  while (i < idx.size()) {
    std::size_t j = i;
    while (j < idx.size() && scores[idx[j]] == scores[idx[i]]) ++j;
    double midrank = 0.5 * (static_cast<double>(i + 1) + static_cast<double>(j));
    for (std::size_t k = i; k < j; ++k)
      if (labels[idx[k]] == 1) rank_sum_pos += midrank;
    i = j;
  }
  double u = rank_sum_pos - static_cast<double>(pos) * (pos + 1) / 2.0;
  return u / (static_cast<double>(pos) * static_cast<double>(neg));
}

double average_precision(const std::vector<double>& scores,
                         const std::vector<int>& labels) {
  check_scored(scores, labels);
  auto [pos, neg] = class_counts(labels);
  (void)neg;
  if (pos == 0) throw std::invalid_argument("average_precision: no positives");

  auto idx = order_desc(scores);
  double ap = 0.0;
  long tp = 0, seen = 0;
  std::size_t i = 0;
  while (i < idx.size()) {
    std::size_t j = i;
    long group_tp = 0;
    while (j < idx.size() && scores[idx[j]] == scores[idx[i]]) {
      if (labels[idx[j]] == 1) ++group_tp;
      ++j;
    }
    // all members of a tie group enter together
    long prev_tp = tp;
    tp += group_tp;
    seen += static_cast<long>(j - i);
    double precision = static_cast<double>(tp) / static_cast<double>(seen);
    double recall_delta = static_cast<double>(tp - prev_tp) / static_cast<double>(pos);
    ap += recall_delta * precision;
    i = j;
  }
  return ap;
}

std::vector<RocPoint> roc_curve(const std::vector<double>& scores,
                                const std::vector<int>& labels) {
  check_scored(scores, labels);
  auto [pos, neg] = class_counts(labels);
  if (pos == 0 || neg == 0)
    throw std::invalid_argument("roc_curve: needs both classes present");

  auto idx = order_desc(scores);
  std::vector<RocPoint> curve;
  curve.push_back({0.0, 0.0, scores[idx[0]] + 1.0});
  long tp = 0, fp = 0;
  std::size_t i = 0;
  while (i < idx.size()) {
    std::size_t j = i;
    while (j < idx.size() && scores[idx[j]] == scores[idx[i]]) {
      if (labels[idx[j]] == 1) ++tp;
      else ++fp;
      ++j;
    }
    curve.push_back({static_cast<double>(fp) / static_cast<double>(neg),
                     static_cast<double>(tp) / static_cast<double>(pos),
                     scores[idx[i]]});
    i = j;
  }
  return curve;
}

double aupro(const std::vector<std::vector<double>>& score_maps,
             const std::vector<std::vector<std::uint8_t>>& truth_masks,
             int height, int width, double fpr_limit) {
  if (score_maps.size() != truth_masks.size())
    throw std::invalid_argument("aupro: map/mask count mismatch");
  if (score_maps.empty()) throw std::invalid_argument("aupro: empty input");
  if (fpr_limit <= 0.0 || fpr_limit > 1.0)
    throw std::invalid_argument("aupro: fpr_limit must lie in (0,1]");
  std::size_t plane = static_cast<std::size_t>(height) * width;

  // Label 8-connected anomaly regions across all images; each pixel keeps a
  // global component id, or -1 for normal pixels.
  struct Pixel {
    double score;
    int component;  // -1 = normal
  };
  std::vector<Pixel> pixels;
  std::vector<long> component_size;
  long negatives = 0;

  for (std::size_t m = 0; m < score_maps.size(); ++m) {
    const auto& s = score_maps[m];
    const auto& t = truth_masks[m];
    if (s.size() != plane || t.size() != plane)
      throw std::invalid_argument("aupro: map size mismatch at image " +
                                  std::to_string(m));
    std::vector<int> comp(plane, -1);
    for (std::size_t p = 0; p < plane; ++p) {
      if (!t[p] || comp[p] != -1) continue;
      int id = static_cast<int>(component_size.size());
      component_size.push_back(0);
      std::vector<std::size_t> stack = {p};
      comp[p] = id;
      while (!stack.empty()) {
        std::size_t q = stack.back();
        stack.pop_back();
        ++component_size[static_cast<std::size_t>(id)];
        int y = static_cast<int>(q) / width, x = static_cast<int>(q) % width;
        for (int dy = -1; dy <= 1; ++dy)
          for (int dx = -1; dx <= 1; ++dx) {
            int ny = y + dy, nx = x + dx;
            if (ny < 0 || ny >= height || nx < 0 || nx >= width) continue;
            std::size_t n = static_cast<std::size_t>(ny) * width + nx;
            if (t[n] && comp[n] == -1) {
              comp[n] = id;
              stack.push_back(n);
            }
          }
      }
    }
    for (std::size_t p = 0; p < plane; ++p) {
      if (!std::isfinite(s[p]))
        throw std::invalid_argument("aupro: non-finite score");
      pixels.push_back({s[p], comp[p]});
      if (comp[p] == -1) ++negatives;
    }
  }
  if (component_size.empty())
    throw std::invalid_argument("aupro: no anomalous regions");
  if (negatives == 0) throw std::invalid_argument("aupro: no normal pixels");

  std::sort(pixels.begin(), pixels.end(),
            [](const Pixel& a, const Pixel& b) { return a.score > b.score; });

  // Sweep thresholds from high to low, emitting one (fpr, mean-overlap) point
  // per distinct score, then integrate the clipped trapezoid area.
  std::vector<long> hits(component_size.size(), 0);
  double overlap_sum = 0.0;  // sum over components of hits/size
  long fp = 0;
  double prev_fpr = 0.0, prev_pro = 0.0, area = 0.0;
  std::size_t i = 0;
  while (i < pixels.size()) {
    std::size_t j = i;
    while (j < pixels.size() && pixels[j].score == pixels[i].score) {
      if (pixels[j].component >= 0) {
        std::size_t c = static_cast<std::size_t>(pixels[j].component);
        overlap_sum += 1.0 / static_cast<double>(component_size[c]);
        ++hits[c];
      } else {
        ++fp;
      }
      ++j;
    }
    double fpr = static_cast<double>(fp) / static_cast<double>(negatives);
    double pro = overlap_sum / static_cast<double>(component_size.size());
    if (fpr >= fpr_limit) {
      double t = (fpr_limit - prev_fpr) / (fpr - prev_fpr);
      double pro_at_limit = prev_pro + t * (pro - prev_pro);
      area += (fpr_limit - prev_fpr) * 0.5 * (prev_pro + pro_at_limit);
      prev_fpr = fpr_limit;
      break;
    }
    area += (fpr - prev_fpr) * 0.5 * (prev_pro + pro);
    prev_fpr = fpr;
    prev_pro = pro;
    i = j;
  }
  if (prev_fpr < fpr_limit)  // every pixel flagged before reaching the limit
    area += (fpr_limit - prev_fpr) * prev_pro;
  return area / fpr_limit;
}

double f1_macro(const std::vector<int>& predicted, const std::vector<int>& truth,
                int num_classes) {
  if (predicted.size() != truth.size())
    throw std::invalid_argument("f1_macro: prediction/truth count mismatch");
  if (predicted.empty()) throw std::invalid_argument("f1_macro: empty input");
  if (num_classes < 1) throw std::invalid_argument("f1_macro: bad class count");
  for (std::size_t i = 0; i < predicted.size(); ++i)
    if (predicted[i] < 0 || predicted[i] >= num_classes || truth[i] < 0 ||
        truth[i] >= num_classes)
      throw std::invalid_argument("f1_macro: class index out of range");

  double sum = 0.0;
  for (int c = 0; c < num_classes; ++c) {
    long tp = 0, fp = 0, fn = 0;
    for (std::size_t i = 0; i < predicted.size(); ++i) {
      bool p = predicted[i] == c, t = truth[i] == c;
      tp += p && t;
      fp += p && !t;
      fn += !p && t;
    }
    if (2 * tp + fp + fn > 0)
      sum += 2.0 * static_cast<double>(tp) / static_cast<double>(2 * tp + fp + fn);
    // class absent from both sides contributes 0
  }
  return sum / static_cast<double>(num_classes);
}

Confusion confusion_at(const std::vector<double>& scores,
                       const std::vector<int>& labels, double threshold) {
  check_scored(scores, labels);
  Confusion c;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    bool p = scores[i] >= threshold;
    if (p && labels[i] == 1) ++c.tp;
    else if (p) ++c.fp;
    else if (labels[i] == 1) ++c.fn;
    else ++c.tn;
  }
  return c;
}

}  // namespace dapo
