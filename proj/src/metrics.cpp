#include "cleftnet/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>
#include <vector>

#include "json.hpp"

namespace cleftnet {

template <typename T>
Tensor<std::uint8_t> binarize(const Tensor<T>& scores, double threshold) {
  Tensor<std::uint8_t> out(scores.shape());
  for (std::size_t i = 0; i < scores.size(); ++i) out[i] = double(scores[i]) >= threshold ? 1 : 0;
  return out;
}

F1Result f1_score(const Tensor<std::uint8_t>& pred, const Tensor<std::uint8_t>& gt) {
  if (pred.shape() != gt.shape()) throw ShapeError("f1_score: prediction and ground truth shapes differ");
  F1Result r;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const bool p = pred[i] != 0, g = gt[i] != 0;
    if (p && g) ++r.counts.tp;
    else if (p) ++r.counts.fp;
    else if (g) ++r.counts.fn;
    else ++r.counts.tn;
  }
  const auto& c = r.counts;
  r.precision = c.tp + c.fp ? double(c.tp) / double(c.tp + c.fp) : 0.0;
  r.recall = c.tp + c.fn ? double(c.tp) / double(c.tp + c.fn) : 0.0;
  r.f1 = r.precision + r.recall > 0 ? 2 * r.precision * r.recall / (r.precision + r.recall) : 0.0;
  return r;
}

template <typename T>
double roc_auc(const Tensor<T>& scores, const Tensor<std::uint8_t>& gt) {
  if (scores.size() != gt.size()) throw ShapeError("roc_auc: score and label counts differ");
  const std::size_t n = scores.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  double pos_rank_sum = 0;
  std::uint64_t pos = 0;
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i;
    while (j < n && scores[order[j]] == scores[order[i]]) ++j;
    // Ranks are 1-based; a tie group shares the mean of its ranks.
    const double mean_rank = 0.5 * (double(i + 1) + double(j));
    for (std::size_t k = i; k < j; ++k) {
      if (gt[order[k]]) {
        pos_rank_sum += mean_rank;
        ++pos;
      }
    }
    i = j;
  }
  const std::uint64_t neg = n - pos;
  if (pos == 0 || neg == 0) throw AucUndefinedError("AUC is undefined when ground truth has a single class");
  const double u = pos_rank_sum - double(pos) * double(pos + 1) / 2;
  return u / (double(pos) * double(neg));
}

double volume_diagonal(const Shape& extents, const Spacing& spacing) {
  double s = 0;
  for (std::size_t a = 0; a < 3 && a < extents.size(); ++a) {
    const double len = double(extents[a]) * spacing[a];
    s += len * len;
  }
  return std::sqrt(s);
}

namespace {

double mean_distance_over(const Tensor<std::uint8_t>& from, const Tensor<double>& dist) {
  double sum = 0;
  std::uint64_t count = 0;
  for (std::size_t i = 0; i < from.size(); ++i) {
    if (from[i]) {
      sum += dist[i];
      ++count;
    }
  }
  return sum / double(count);
}

bool any_set(const Tensor<std::uint8_t>& m) {
  return std::any_of(m.values().begin(), m.values().end(), [](std::uint8_t v) { return v != 0; });
}

}  // namespace

CremiResult cremi_score(const Tensor<std::uint8_t>& pred, const Tensor<std::uint8_t>& gt, const Spacing& spacing,
                        std::optional<double> penalty) {
  if (pred.shape() != gt.shape()) throw ShapeError("cremi_score: prediction and ground truth shapes differ");
  CremiResult r;
  const bool has_pred = any_set(pred), has_gt = any_set(gt);
  const double pen = penalty.value_or(volume_diagonal(gt.shape(), spacing));
  if (!has_pred && !has_gt) return r;
  if (!has_pred || !has_gt) {
    r.degenerate = true;
    r.adgt = has_gt ? 0.0 : pen;
    r.adf = has_pred ? 0.0 : pen;
  } else {
    r.adgt = mean_distance_over(pred, euclidean_distance_transform(gt, spacing));
    r.adf = mean_distance_over(gt, euclidean_distance_transform(pred, spacing));
  }
  r.score = 0.5 * (r.adgt + r.adf);
  return r;
}

template <typename T>
MetricReport evaluate(const Tensor<T>& scores, const Tensor<std::uint8_t>& gt, const Spacing& spacing,
                      double threshold) {
  const auto pred = binarize(scores, threshold);
  const auto f1 = f1_score(pred, gt);
  MetricReport r;
  r.counts = f1.counts;
  r.precision = f1.precision;
  r.recall = f1.recall;
  r.f1 = f1.f1;
  try {
    r.auc = roc_auc(scores, gt);
  } catch (const AucUndefinedError&) {
    r.auc = std::numeric_limits<double>::quiet_NaN();
  }
  const auto c = cremi_score(pred, gt, spacing);
  r.adgt = c.adgt;
  r.adf = c.adf;
  r.cremi_score = c.score;
  r.cremi_degenerate = c.degenerate;
  r.threshold = threshold;
  return r;
}

std::string report_to_text(const MetricReport& r) {
  std::ostringstream os;
  os.precision(10);
  os << "threshold = " << r.threshold << '\n'
     << "TP = " << r.counts.tp << '\n'
     << "FP = " << r.counts.fp << '\n'
     << "FN = " << r.counts.fn << '\n'
     << "TN = " << r.counts.tn << '\n'
     << "precision = " << r.precision << '\n'
     << "recall = " << r.recall << '\n'
     << "F1 = " << r.f1 << '\n'
     << "AUC = ";
  if (std::isnan(r.auc)) {
    os << "undefined";
  } else {
    os << r.auc;
  }
  os << '\n'
     << "ADGT = " << r.adgt << '\n'
     << "ADF = " << r.adf << '\n'
     << "CREMI-score = " << r.cremi_score << '\n';
  if (r.cremi_degenerate) os << "CREMI-degenerate = true\n";
  return os.str();
}

std::string report_to_json(const MetricReport& r) {
  nlohmann::ordered_json j;
  j["threshold"] = r.threshold;
  j["TP"] = r.counts.tp;
  j["FP"] = r.counts.fp;
  j["FN"] = r.counts.fn;
  j["TN"] = r.counts.tn;
  j["precision"] = r.precision;
  j["recall"] = r.recall;
  j["F1"] = r.f1;
  j["AUC"] = std::isnan(r.auc) ? nlohmann::ordered_json(nullptr) : nlohmann::ordered_json(r.auc);
  j["ADGT"] = r.adgt;
  j["ADF"] = r.adf;
  j["CREMI-score"] = r.cremi_score;
  j["CREMI-degenerate"] = r.cremi_degenerate;
  return j.dump(2);
}

template Tensor<std::uint8_t> binarize(const Tensor<float>&, double);
template Tensor<std::uint8_t> binarize(const Tensor<double>&, double);
template double roc_auc(const Tensor<float>&, const Tensor<std::uint8_t>&);
template double roc_auc(const Tensor<double>&, const Tensor<std::uint8_t>&);
template MetricReport evaluate(const Tensor<float>&, const Tensor<std::uint8_t>&, const Spacing&, double);
template MetricReport evaluate(const Tensor<double>&, const Tensor<std::uint8_t>&, const Spacing&, double);

}  // namespace cleftnet
