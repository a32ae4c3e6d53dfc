#pragma once

#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>

#include "cleftnet/labels.hpp"
#include "cleftnet/tensor.hpp"

namespace cleftnet {

class AucUndefinedError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

/// score >= threshold -> 1.
template <typename T>
Tensor<std::uint8_t> binarize(const Tensor<T>& scores, double threshold = 0.5);

struct Confusion {
  std::uint64_t tp = 0, fp = 0, fn = 0, tn = 0;
};

struct F1Result {
  Confusion counts;
  double precision = 0;
  double recall = 0;
  double f1 = 0;
};

/// Empty denominators count as 0 (no predicted positives -> precision 0).
F1Result f1_score(const Tensor<std::uint8_t>& pred, const Tensor<std::uint8_t>& gt);

/// Area under the ROC curve from the rank statistic; tied scores count half.
template <typename T>
double roc_auc(const Tensor<T>& scores, const Tensor<std::uint8_t>& gt);

struct CremiResult {
  double adgt = 0;
  double adf = 0;
  double score = 0;
  // Exactly one of the masks was empty; the undefined side carries the penalty.
  bool degenerate = false;
};

/// Physical length of the volume diagonal.
double volume_diagonal(const Shape& extents, const Spacing& spacing);

/// ADGT: mean distance of predicted cleft voxels to ground truth.
/// ADF: mean distance of ground-truth cleft voxels to the prediction.
/// When only the prediction is empty ADF is `penalty`; when only the ground
/// truth is empty ADGT is `penalty` (default: volume diagonal).
CremiResult cremi_score(const Tensor<std::uint8_t>& pred, const Tensor<std::uint8_t>& gt,
                        const Spacing& spacing = kCremiSpacing, std::optional<double> penalty = std::nullopt);

struct MetricReport {
  Confusion counts;
  double precision = 0;
  double recall = 0;
  double f1 = 0;
  double auc = 0;  // NaN when ground truth is single-class
  double adgt = 0;
  double adf = 0;
  double cremi_score = 0;
  double threshold = 0.5;
  bool cremi_degenerate = false;
};

template <typename T>
MetricReport evaluate(const Tensor<T>& scores, const Tensor<std::uint8_t>& gt, const Spacing& spacing,
                      double threshold = 0.5);

/// One `key = value` line per field.
std::string report_to_text(const MetricReport& r);
std::string report_to_json(const MetricReport& r);

}  // namespace cleftnet
