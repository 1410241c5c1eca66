#pragma once

#include <cstdint>
#include <vector>

namespace dapo {

// Threshold-free ranking metrics. Labels are 0/1; higher score = more anomalous.
// Ties are handled exactly (midranks / grouped thresholds), no interpolation.

double auroc(const std::vector<double>& scores, const std::vector<int>& labels);

double average_precision(const std::vector<double>& scores,
                         const std::vector<int>& labels);

struct RocPoint {
  double fpr = 0.0;
  double tpr = 0.0;
  double threshold = 0.0;
};

// Tie-grouped ROC curve including the (0,0) and (1,1) endpoints.
std::vector<RocPoint> roc_curve(const std::vector<double>& scores,
                                const std::vector<int>& labels);

// Per-region overlap curve integrated over false positive rate up to
// fpr_limit and normalized by it. Each entry pairs a score map with its
// binary ground truth mask; regions are 8-connected components pooled
// across all images.
double aupro(const std::vector<std::vector<double>>& score_maps,
             const std::vector<std::vector<std::uint8_t>>& truth_masks,
             int height, int width, double fpr_limit = 0.3);

// Macro-averaged F1 over num_classes classes; a class absent from both
// predictions and ground truth contributes 0.
double f1_macro(const std::vector<int>& predicted, const std::vector<int>& truth,
                int num_classes);

struct Confusion {
  long tp = 0, fp = 0, tn = 0, fn = 0;
};

// score >= threshold counts as a positive prediction.
Confusion confusion_at(const std::vector<double>& scores,
                       const std::vector<int>& labels, double threshold);

}  // namespace dapo
