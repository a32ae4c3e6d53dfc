#pragma once

#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "cleftnet/checkpoint.hpp"
#include "cleftnet/data.hpp"
#include "cleftnet/labels.hpp"
#include "cleftnet/metrics.hpp"
#include "cleftnet/model.hpp"

namespace cleftnet {

/// Non-finite loss or a failed numerical check.
class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// ---- Adam -----------------------------------------------------------------

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

template <typename T>
struct AdamState {
  std::vector<Tensor<T>> m;
  std::vector<Tensor<T>> v;
  std::uint64_t t = 0;
};

/// One bias-corrected Adam update of every trainable parameter from its grad.
/// An empty state is initialized to zeros; a state of the wrong shape throws.
template <typename T>
void adam_step(std::span<Parameter<T>* const> params, AdamState<T>& state, const AdamConfig& cfg);

// ---- training ---------------------------------------------------------------

struct TrainConfig {
  double learning_rate = 1e-3;
  std::size_t batch_size = 2;
  std::size_t iterations = 1000;
  std::size_t eval_interval = 100;
  std::uint64_t seed = 0;
  LossWeights loss;
  RejectionPolicy rejection;
  AugmentProbabilities augment;
  double eval_threshold = 0.5;
  Triple eval_overlap{0, 0, 0};

  void validate() const;
};

struct Batch {
  Tensor<float> raw;  // (b,d,h,w)
  Tensor<float> y_s;
  Tensor<float> y_b;
  std::vector<Triple> origins;
};

using BatchSource = std::function<Batch(Rng& rng, std::size_t batch_size)>;

Batch make_batch(const std::vector<PatchSample>& patches);

/// Rejection-sampled, augmented patches from a labelled volume.
BatchSource volume_source(std::shared_ptr<const LabeledVolume> volume, Triple patch, RejectionPolicy rejection,
                          AugmentProbabilities augment);

/// The same patch repeated; draws nothing from the generator.
BatchSource fixed_source(PatchSample patch);

struct IterationRecord {
  std::size_t iteration = 0;  // 1-based
  double loss = 0;
  double segmentation = 0;
  double boundary = 0;
  double coherence = 0;
};

struct EvalRecord {
  std::size_t iteration = 0;
  double cremi = 0;
  double f1 = 0;
  double auc = 0;
};

/// Chronological record of a run, one line per iteration and per evaluation.
struct History {
  std::vector<std::string> lines;
  std::vector<IterationRecord> iterations;
  std::vector<EvalRecord> evals;

  void add(const IterationRecord& r);
  void add(const EvalRecord& r);
  std::string text() const;
};

std::string format_record(const IterationRecord& r);
std::string format_record(const EvalRecord& r);

// ---- inference --------------------------------------------------------------

/// Tile origins along one axis: steps of `patch - overlap`, with a final tile
/// flush against the end.
std::vector<std::size_t> tile_origins(std::size_t extent, std::size_t patch, std::size_t overlap);

struct VolumePrediction {
  Tensor<float> prob;      // (d,h,w)
  Tensor<float> boundary;  // empty for segmentation-only models
};

/// Sliding-window inference in inference mode; overlapping tiles are averaged.
VolumePrediction infer_volume(Model<float>& model, const Tensor<std::uint8_t>& raw, Triple overlap = {0, 0, 0});

MetricReport evaluate_model(Model<float>& model, const Volume& volume, double threshold, Triple overlap = {0, 0, 0});

// ---- trainer ----------------------------------------------------------------

class Trainer {
 public:
  /// `validation` may be null, which disables evaluation and model selection.
  Trainer(Model<float>& model, TrainConfig cfg, BatchSource source, std::shared_ptr<const Volume> validation = nullptr);

  /// Trains until `until` total iterations (resumed ones included) or until
  /// `stop` returns true after an iteration.
  void run(std::size_t until, const std::function<bool(const IterationRecord&)>& stop = {});

  const History& history() const { return history_; }
  std::size_t iteration() const { return iteration_; }
  const TrainConfig& config() const { return cfg_; }

  /// Model, optimizer moments, iteration, generator state and best score.
  Checkpoint checkpoint() const;
  /// Continues from `c`; the model config must match.
  void resume(const Checkpoint& c);

  /// Snapshot with the lowest validation CREMI-score so far.
  const std::optional<Checkpoint>& best() const { return best_; }
  double best_score() const { return best_score_; }

  /// Forward pass plus loss on one batch without updating anything.
  LossTerms loss_on(const Batch& b, BatchNormMode mode);

 private:
  IterationRecord step();
  void evaluate();

  Model<float>& model_;
  TrainConfig cfg_;
  BatchSource source_;
  std::shared_ptr<const Volume> validation_;
  Rng rng_;
  AdamState<float> adam_;
  std::size_t iteration_ = 0;
  History history_;
  std::optional<Checkpoint> best_;
  double best_score_ = std::numeric_limits<double>::infinity();
  std::size_t best_iteration_ = 0;
};

// ---- gradient checks --------------------------------------------------------

struct GradCheckCase {
  std::string name;
  GradCheckReport report;
};

struct GradCheckSuite {
  std::vector<GradCheckCase> cases;
  bool passed = false;
  std::string text() const;
};

/// Tiny network used by the gradient checks: channels [2,3], bottom 4, patch 2x8x8.
CleftNetConfig gradcheck_config(BlockVariant variant);

/// One case per block variant (combined loss) and one per loss term.
GradCheckSuite run_gradchecks(const GradCheckOptions& opts = {});

}  // namespace cleftnet
