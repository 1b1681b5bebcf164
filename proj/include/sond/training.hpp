#pragma once

// Multi-task objective (cross entropy over power-set labels plus a margin
// penalty on projected-profile similarity), the reverse pass that ties the
// objective to the model, Adam updates and the staged training loop.

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include "sond/error.hpp"
#include "sond/kv_config.hpp"
#include "sond/model.hpp"
#include "sond/pse_codec.hpp"

namespace sond {

/// Which (i, j) pairs the similarity penalty sums over.
enum class SimilarityPairs {
  UnorderedDistinct,  // i < j
  OrderedDistinct,    // i != j
  OrderedWithSelf,    // all i, j, the literal double sum
};

struct LossBreakdown {
  double ce = 0.0;
  double sim = 0.0;
  double total = 0.0;
  double lambda = 1.0;
};

struct TrainConfig {
  double lambda = 1.0;
  double delta = 1.0;
  SimilarityPairs pairs = SimilarityPairs::UnorderedDistinct;
  int stage = 2;     // 1: frozen speech encoder, 2: full model, 3: fine-tune
  double lr = 0.0;   // 0 selects the stage default (1e-3, 1e-4, 1e-5)
  int batch_size = 8;
  int max_steps = 1000;
  double clip_norm = 5.0;
  bool shuffle_slots = true;  // fresh slot permutation each time an example is drawn
  int crop_min_frames = 0;    // > 0: each draw is a random crop at least this long
  // Chance that one enrolled slot whose speaker is silent throughout the drawn
  // example gets another speaker's profile from the dataset instead.
  double distractor_prob = 0.0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  double divergence_limit = 1e6;
  std::uint64_t seed = 1;
  std::string checkpoint_path;  // last good parameters are written here on divergence

  bool freeze_speech_encoder() const { return stage == 1; }
  double learning_rate() const;
  void validate() const;

  static TrainConfig from_kv(const KeyValueConfig& kv, const TrainConfig& base);
  static TrainConfig from_kv(const KeyValueConfig& kv) { return from_kv(kv, TrainConfig{}); }
};

struct TrainingExample {
  Matrix features;  // T x D
  ProfileSet profiles;
  ActivityMatrix activity;  // T x N reference
  PseLabelSeq labels;  // power-set classes of `activity`
};

/// Builds the example, deriving class labels from the activity matrix.
TrainingExample make_example(Matrix features, ProfileSet profiles, ActivityMatrix activity,
                             const ModelConfig& cfg);

/// Frames [begin, begin + length) of the example.
TrainingExample crop_example(const TrainingExample& ex, std::size_t begin, std::size_t length,
                             const ModelConfig& cfg);

/// Replaces slot `slot` with `profile` and clears its activity.
TrainingExample swap_in_distractor(const TrainingExample& ex, int slot, const RowVector& profile,
                                   const ModelConfig& cfg);

/// Moves slot n to slot perm[n] in profiles, activity and labels.
TrainingExample permute_slots(const TrainingExample& ex, std::span<const int> perm,
                              const ModelConfig& cfg);

/// Mean over frames of -log p_t[label_t], probabilities clamped at 1e-12.
double ce_loss(const Matrix& posteriors, const PseLabelSeq& labels);

/// Mean over frames of the summed per-slot binary cross entropy.
double bce_loss(const Matrix& posteriors, const ActivityMatrix& activity);

/// sum over pairs of max(0, cos(vbar_i, vbar_j) + delta - 1), invalid slots
/// excluded. Accumulates dL/dvbar into `grad` when given.
double similarity_loss(const Matrix& vbar, const std::vector<bool>& valid, double delta,
                       SimilarityPairs pairs = SimilarityPairs::UnorderedDistinct,
                       Matrix* grad = nullptr);

LossBreakdown combine_losses(double ce, double sim, double lambda);

/// Objective for one forward pass, dispatching on the model's output head.
LossBreakdown total_loss(const Matrix& posteriors, const TrainingExample& example,
                         const Matrix& vbar, const ModelConfig& model_cfg,
                         const TrainConfig& cfg);

struct SampleGradient {
  LossBreakdown loss;
  Params grad;
};

/// Forward and reverse pass for one example. Throws NumericError naming the
/// tensor if any gradient entry is non-finite.
SampleGradient backward(const TrainingExample& example, const Params& params,
                        const ModelConfig& model_cfg, const TrainConfig& cfg);

/// Flat-vector objective for finite-difference checks.
double objective(const TrainingExample& example, const Params& params, const ModelConfig& model_cfg,
                 const TrainConfig& cfg);

class AdamOptimizer {
 public:
  AdamOptimizer(const Params& like, double beta1, double beta2, double eps);

  /// Updates every tensor except those for which `frozen(name)` is true.
  void step(Params& params, const Params& grad, double lr,
            const std::function<bool(const std::string&)>& frozen);

 private:
  Params m_;
  Params v_;
  double beta1_;
  double beta2_;
  double eps_;
  long step_ = 0;
};

/// Scales `grad` in place so its global L2 norm is at most `max_norm`;
/// returns the norm before clipping.
double clip_global_norm(Params& grad, double max_norm);

struct StepLog {
  int step = 0;
  LossBreakdown loss;
  double lr = 0.0;
};

/// `step  ce  sim  total  lr`, tab separated.
std::string format_step_log(const StepLog& entry);

struct TrainResult {
  Params params;
  std::vector<StepLog> curve;
};

class DivergenceError : public Error {
 public:
  DivergenceError(const std::string& what, int step, Params last_good)
      : Error(what), step_(step), last_good_(std::move(last_good)) {}
  int step() const { return step_; }
  const Params& last_good() const { return last_good_; }

 private:
  int step_;
  Params last_good_;
};

/// Called after every optimizer step; returning false stops training early.
using StepHook = std::function<bool(const StepLog&, const Params&)>;

TrainResult train(const std::vector<TrainingExample>& dataset, const ModelConfig& model_cfg,
                  Params params, const TrainConfig& cfg, std::ostream* log = nullptr,
                  const StepHook& hook = {});

/// Element-wise mean of parameter sets with identical layout.
Params average_params(const std::vector<Params>& sets);

/// Loads checkpoints, checks their configs agree and averages them.
Checkpoint average_checkpoints(const std::vector<std::string>& paths);

}  // namespace sond
