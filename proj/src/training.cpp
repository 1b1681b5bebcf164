#include "sond/training.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <optional>
#include <ostream>
#include <random>

namespace sond {
namespace {

constexpr double kProbFloor = 1e-12;

std::span<const double> row_span(const Matrix& m, Eigen::Index r) {
  return {m.data() + r * m.cols(), static_cast<std::size_t>(m.cols())};
}

std::span<double> row_span(Matrix& m, Eigen::Index r) {
  return {m.data() + r * m.cols(), static_cast<std::size_t>(m.cols())};
}

void check_labels(const Matrix& posteriors, const PseLabelSeq& labels) {
  if (static_cast<std::size_t>(posteriors.rows()) != labels.size()) {
    throw ShapeError("posteriors have " + std::to_string(posteriors.rows()) + " frames, labels " +
                     std::to_string(labels.size()));
  }
  for (std::size_t t = 0; t < labels.size(); ++t) {
    if (labels[t] >= static_cast<PseClass>(posteriors.cols())) {
      throw OutOfRangeError("label " + std::to_string(labels[t]) + " at frame " +
                            std::to_string(t) + " exceeds class count " +
                            std::to_string(posteriors.cols()));
    }
  }
}

Matrix loss_grad_logits(const Matrix& posteriors, const TrainingExample& example,
                        const ModelConfig& cfg) {
  const double inv_frames = 1.0 / static_cast<double>(posteriors.rows());
  Matrix grad = posteriors;
  if (cfg.head == OutputHead::PowerSet) {
    for (std::size_t t = 0; t < example.labels.size(); ++t) {
      grad(static_cast<Eigen::Index>(t), static_cast<Eigen::Index>(example.labels[t])) -= 1.0;
    }
  } else {
    for (std::size_t t = 0; t < example.activity.frames(); ++t) {
      for (int n = 0; n < cfg.slots; ++n) {
        grad(static_cast<Eigen::Index>(t), n) -= example.activity.at(t, n) ? 1.0 : 0.0;
      }
    }
  }
  return grad * inv_frames;
}

}  // namespace

double TrainConfig::learning_rate() const {
  if (lr > 0.0) return lr;
  switch (stage) {
    case 1:
      return 1e-3;
    case 3:
      return 1e-5;
    default:
      return 1e-4;
  }
}

void TrainConfig::validate() const {
  if (delta < 0.0 || delta > 1.0) throw ConfigError("similarity margin delta must lie in [0, 1]");
  if (lambda < 0.0) throw ConfigError("lambda must be >= 0");
  if (lr < 0.0) throw ConfigError("learning rate must be > 0");
  if (stage < 1 || stage > 3) throw ConfigError("stage must be 1, 2 or 3");
  if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
  if (max_steps < 0) throw ConfigError("max_steps must be >= 0");
  if (clip_norm <= 0.0) throw ConfigError("clip_norm must be > 0");
  if (crop_min_frames < 0) throw ConfigError("crop_min_frames must be >= 0");
  if (!(distractor_prob >= 0.0 && distractor_prob <= 1.0)) throw ConfigError("distractor_prob must be in [0, 1]");
}

TrainConfig TrainConfig::from_kv(const KeyValueConfig& kv, const TrainConfig& base) {
  TrainConfig cfg = base;
  cfg.lambda = kv.get_double("lambda", cfg.lambda);
  cfg.delta = kv.get_double("delta", cfg.delta);
  const std::string pairs = kv.get_string("pairs", "");
  if (pairs == "unordered") {
    cfg.pairs = SimilarityPairs::UnorderedDistinct;
  } else if (pairs == "ordered") {
    cfg.pairs = SimilarityPairs::OrderedDistinct;
  } else if (pairs == "ordered_self") {
    cfg.pairs = SimilarityPairs::OrderedWithSelf;
  } else if (!pairs.empty()) {
    throw ConfigError("unknown pairs mode '" + pairs + "'");
  }
  cfg.stage = kv.get_int("stage", cfg.stage);
  cfg.lr = kv.get_double("lr", cfg.lr);
  cfg.batch_size = kv.get_int("batch_size", cfg.batch_size);
  cfg.max_steps = kv.get_int("max_steps", cfg.max_steps);
  cfg.clip_norm = kv.get_double("clip_norm", cfg.clip_norm);
  cfg.shuffle_slots = kv.get_bool("shuffle_slots", cfg.shuffle_slots);
  cfg.crop_min_frames = kv.get_int("crop_min_frames", cfg.crop_min_frames);
  cfg.distractor_prob = kv.get_double("distractor_prob", cfg.distractor_prob);
  cfg.seed = static_cast<std::uint64_t>(kv.get_int("seed", static_cast<int>(cfg.seed)));
  cfg.checkpoint_path = kv.get_string("checkpoint_path", cfg.checkpoint_path);
  cfg.validate();
  return cfg;
}

TrainingExample make_example(Matrix features, ProfileSet profiles, ActivityMatrix activity,
                             const ModelConfig& cfg) {
  if (static_cast<std::size_t>(features.rows()) != activity.frames()) {
    throw ShapeError("features and activity disagree on frame count");
  }
  TrainingExample ex{std::move(features), std::move(profiles), std::move(activity), {}};
  if (cfg.head == OutputHead::PowerSet) {
    ex.labels = encode_sequence(ex.activity, PseConfig::make(cfg.slots, cfg.max_active));
  }
  return ex;
}

TrainingExample crop_example(const TrainingExample& ex, std::size_t begin, std::size_t length,
                             const ModelConfig& cfg) {
  if (length == 0 || begin + length > ex.activity.frames()) {
    throw ShapeError("crop_example: range outside the example");
  }
  ActivityMatrix activity(length, ex.activity.slots());
  for (std::size_t t = 0; t < length; ++t) {
    for (int n = 0; n < activity.slots(); ++n) activity.set(t, n, ex.activity.at(begin + t, n));
  }
  return make_example(ex.features.middleRows(static_cast<Eigen::Index>(begin), static_cast<Eigen::Index>(length)),
                      ex.profiles, std::move(activity), cfg);
}

TrainingExample swap_in_distractor(const TrainingExample& ex, int slot, const RowVector& profile,
                                   const ModelConfig& cfg) {
  if (slot < 0 || slot >= ex.profiles.slots()) throw ShapeError("swap_in_distractor: slot out of range");
  if (profile.size() != ex.profiles.vectors.cols()) throw ShapeError("swap_in_distractor: profile width");
  ProfileSet profiles = ex.profiles;
  profiles.vectors.row(slot) = profile;
  profiles.valid[static_cast<std::size_t>(slot)] = true;
  ActivityMatrix activity = ex.activity;
  for (std::size_t t = 0; t < activity.frames(); ++t) activity.set(t, slot, false);
  return make_example(ex.features, std::move(profiles), std::move(activity), cfg);
}

namespace {

// A profile from elsewhere in the dataset that is not close to any profile
// already silent_slots in `ex`; empty when none qualifies.
std::optional<RowVector> pick_distractor(const std::vector<TrainingExample>& dataset,
                                         const TrainingExample& ex, std::mt19937_64& rng) {
  std::uniform_int_distribution<std::size_t> pick_ex(0, dataset.size() - 1);
  for (int attempt = 0; attempt < 16; ++attempt) {
    const ProfileSet& other = dataset[pick_ex(rng)].profiles;
    const int slot = std::uniform_int_distribution<int>(0, other.slots() - 1)(rng);
    if (!other.valid[static_cast<std::size_t>(slot)]) continue;
    const RowVector v = other.vectors.row(slot);
    bool distinct = true;
    for (int n = 0; n < ex.profiles.slots() && distinct; ++n) {
      if (ex.profiles.valid[static_cast<std::size_t>(n)]) {
        const RowVector u = ex.profiles.vectors.row(n);
        distinct = cosine({v.data(), static_cast<std::size_t>(v.size())},
                          {u.data(), static_cast<std::size_t>(u.size())}).value < 0.5;
      }
    }
    if (distinct) return v;
  }
  return std::nullopt;
}

}  // namespace

TrainingExample permute_slots(const TrainingExample& ex, std::span<const int> perm,
                              const ModelConfig& cfg) {
  const int slots = ex.profiles.slots();
  if (static_cast<int>(perm.size()) != slots || ex.activity.slots() != slots) {
    throw ShapeError("permute_slots: permutation length differs from slot count");
  }
  std::vector<bool> seen(static_cast<std::size_t>(slots), false);
  for (int to : perm) {
    if (to < 0 || to >= slots || seen[static_cast<std::size_t>(to)]) {
      throw ConfigError("permute_slots: not a permutation");
    }
    seen[static_cast<std::size_t>(to)] = true;
  }
  ProfileSet profiles = ProfileSet::zeros(slots, static_cast<int>(ex.profiles.vectors.cols()));
  ActivityMatrix activity(ex.activity.frames(), slots);
  for (int n = 0; n < slots; ++n) {
    const int to = perm[static_cast<std::size_t>(n)];
    profiles.vectors.row(to) = ex.profiles.vectors.row(n);
    profiles.valid[static_cast<std::size_t>(to)] = ex.profiles.valid[static_cast<std::size_t>(n)];
    for (std::size_t t = 0; t < activity.frames(); ++t) {
      if (ex.activity.at(t, n)) activity.set(t, to, true);
    }
  }
  return make_example(ex.features, std::move(profiles), std::move(activity), cfg);
}

double ce_loss(const Matrix& posteriors, const PseLabelSeq& labels) {
  check_labels(posteriors, labels);
  if (labels.empty()) return 0.0;
  double sum = 0.0;
  for (std::size_t t = 0; t < labels.size(); ++t) {
    const double prob = posteriors(static_cast<Eigen::Index>(t), static_cast<Eigen::Index>(labels[t]));
    sum -= std::log(std::max(prob, kProbFloor));
  }
  return sum / static_cast<double>(labels.size());
}

double bce_loss(const Matrix& posteriors, const ActivityMatrix& activity) {
  if (static_cast<std::size_t>(posteriors.rows()) != activity.frames() ||
      posteriors.cols() != activity.slots()) {
    throw ShapeError("bce_loss: posteriors " + shape_string(posteriors) +
                     " do not match the activity matrix");
  }
  if (activity.frames() == 0) return 0.0;
  double sum = 0.0;
  for (std::size_t t = 0; t < activity.frames(); ++t) {
    for (int n = 0; n < activity.slots(); ++n) {
      const double prob = posteriors(static_cast<Eigen::Index>(t), n);
      sum -= activity.at(t, n) ? std::log(std::max(prob, kProbFloor))
                               : std::log(std::max(1.0 - prob, kProbFloor));
    }
  }
  return sum / static_cast<double>(activity.frames());
}

double similarity_loss(const Matrix& vbar, const std::vector<bool>& valid, double delta,
                       SimilarityPairs pairs, Matrix* grad) {
  if (valid.size() != static_cast<std::size_t>(vbar.rows())) {
    throw ShapeError("similarity_loss: mask length differs from slot count");
  }
  double loss = 0.0;
  const Eigen::Index slots = vbar.rows();
  for (Eigen::Index i = 0; i < slots; ++i) {
    if (!valid[static_cast<std::size_t>(i)]) continue;
    for (Eigen::Index j = 0; j < slots; ++j) {
      if (!valid[static_cast<std::size_t>(j)]) continue;
      if (i == j && pairs != SimilarityPairs::OrderedWithSelf) continue;
      if (j < i && pairs == SimilarityPairs::UnorderedDistinct) continue;
      const double hinge = cosine(row_span(vbar, i), row_span(vbar, j)).value + delta - 1.0;
      if (hinge <= 0.0) continue;
      loss += hinge;
      if (grad != nullptr && i != j) {
        cosine_backward(row_span(vbar, i), row_span(vbar, j), 1.0, row_span(*grad, i),
                        row_span(*grad, j));
      }
    }
  }
  return loss;
}

LossBreakdown combine_losses(double ce, double sim, double lambda) {
  return {ce, sim, ce + lambda * sim, lambda};
}

LossBreakdown total_loss(const Matrix& posteriors, const TrainingExample& example,
                         const Matrix& vbar, const ModelConfig& model_cfg,
                         const TrainConfig& cfg) {
  const double ce = model_cfg.head == OutputHead::PowerSet
                        ? ce_loss(posteriors, example.labels)
                        : bce_loss(posteriors, example.activity);
  const double sim = similarity_loss(vbar, example.profiles.valid, cfg.delta, cfg.pairs);
  return combine_losses(ce, sim, cfg.lambda);
}

SampleGradient backward(const TrainingExample& example, const Params& params,
                        const ModelConfig& model_cfg, const TrainConfig& cfg) {
  ForwardTrace trace;
  const Matrix posteriors = forward(example.features, example.profiles, params, model_cfg, &trace);
  SampleGradient out;
  out.loss = total_loss(posteriors, example, trace.vbar, model_cfg, cfg);

  const Matrix grad_logits = loss_grad_logits(posteriors, example, model_cfg);
  Matrix grad_vbar = Matrix::Zero(trace.vbar.rows(), trace.vbar.cols());
  similarity_loss(trace.vbar, example.profiles.valid, cfg.delta, cfg.pairs, &grad_vbar);
  grad_vbar *= cfg.lambda;

  out.grad = model_backward(trace, grad_logits, &grad_vbar, params, model_cfg,
                            {cfg.freeze_speech_encoder()});
  for (const auto& [name, g] : out.grad.tensors()) {
    if (!g.allFinite()) throw NumericError("non-finite gradient in parameter '" + name + "'");
  }
  return out;
}

double objective(const TrainingExample& example, const Params& params, const ModelConfig& model_cfg,
                 const TrainConfig& cfg) {
  const Matrix vbar = speaker_encode(example.profiles.vectors, params, model_cfg);
  const Matrix posteriors = forward(example.features, example.profiles, params, model_cfg);
  return total_loss(posteriors, example, vbar, model_cfg, cfg).total;
}

AdamOptimizer::AdamOptimizer(const Params& like, double beta1, double beta2, double eps)
    : m_(like.zeros_like()), v_(like.zeros_like()), beta1_(beta1), beta2_(beta2), eps_(eps) {}

void AdamOptimizer::step(Params& params, const Params& grad, double lr,
                         const std::function<bool(const std::string&)>& frozen) {
  ++step_;
  const double bias1 = 1.0 - std::pow(beta1_, static_cast<double>(step_));
  const double bias2 = 1.0 - std::pow(beta2_, static_cast<double>(step_));
  for (auto& [name, value] : params.tensors()) {
    if (frozen && frozen(name)) continue;
    const Matrix& g = grad.at(name);
    Matrix& m = m_.at(name);
    Matrix& v = v_.at(name);
    m = beta1_ * m + (1.0 - beta1_) * g;
    v = beta2_ * v + (1.0 - beta2_) * g.cwiseAbs2();
    value.array() -= lr * (m.array() / bias1) / ((v.array() / bias2).sqrt() + eps_);
  }
}

double clip_global_norm(Params& grad, double max_norm) {
  double sq = 0.0;
  for (const auto& [_, g] : grad.tensors()) sq += g.squaredNorm();
  const double norm = std::sqrt(sq);
  if (norm > max_norm) {
    const double scale = max_norm / norm;
    for (auto& [_, g] : grad.tensors()) g *= scale;
  }
  return norm;
}

std::string format_step_log(const StepLog& entry) {
  char buf[160];
  std::snprintf(buf, sizeof buf, "%d\t%.6f\t%.6f\t%.6f\t%.3g", entry.step, entry.loss.ce,
                entry.loss.sim, entry.loss.total, entry.lr);
  return buf;
}

TrainResult train(const std::vector<TrainingExample>& dataset, const ModelConfig& model_cfg,
                  Params params, const TrainConfig& cfg, std::ostream* log, const StepHook& hook) {
  cfg.validate();
  if (dataset.empty()) throw ConfigError("training dataset is empty");

  std::mt19937_64 rng(cfg.seed);
  std::vector<std::size_t> order(dataset.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::shuffle(order.begin(), order.end(), rng);
  std::size_t cursor = 0;
  std::vector<int> perm(static_cast<std::size_t>(model_cfg.slots));
  std::iota(perm.begin(), perm.end(), 0);

  const double lr = cfg.learning_rate();
  const bool freeze = cfg.freeze_speech_encoder();
  const auto frozen = [freeze](const std::string& name) {
    return freeze && is_speech_encoder_param(name);
  };
  AdamOptimizer adam(params, cfg.beta1, cfg.beta2, cfg.adam_eps);

  TrainResult result;
  const auto batch = static_cast<std::size_t>(cfg.batch_size);
  for (int step = 1; step <= cfg.max_steps; ++step) {
    Params grad = params.zeros_like();
    LossBreakdown mean{0.0, 0.0, 0.0, cfg.lambda};
    for (std::size_t b = 0; b < batch; ++b) {
      if (cursor == order.size()) {
        std::shuffle(order.begin(), order.end(), rng);
        cursor = 0;
      }
      const TrainingExample& drawn = dataset[order[cursor++]];
      std::optional<TrainingExample> augmented;
      const std::size_t frames = drawn.activity.frames();
      const auto min_len = static_cast<std::size_t>(cfg.crop_min_frames);
      if (min_len > 0 && frames > min_len) {
        const std::size_t len = std::uniform_int_distribution<std::size_t>(min_len, frames)(rng);
        const std::size_t begin = std::uniform_int_distribution<std::size_t>(0, frames - len)(rng);
        augmented = crop_example(drawn, begin, len, model_cfg);
      }
      if (cfg.distractor_prob > 0.0 && std::bernoulli_distribution(cfg.distractor_prob)(rng)) {
        const TrainingExample& base = augmented ? *augmented : drawn;
        std::vector<int> silent_slots;
        for (int n = 0; n < base.profiles.slots(); ++n) {
          if (!base.profiles.valid[static_cast<std::size_t>(n)]) continue;
          bool silent = true;
          for (std::size_t t = 0; t < base.activity.frames() && silent; ++t) silent = !base.activity.at(t, n);
          if (silent) silent_slots.push_back(n);
        }
        if (!silent_slots.empty()) {
          const int slot = silent_slots[std::uniform_int_distribution<std::size_t>(0, silent_slots.size() - 1)(rng)];
          if (const auto v = pick_distractor(dataset, base, rng)) {
            augmented = swap_in_distractor(base, slot, *v, model_cfg);
          }
        }
      }
      if (cfg.shuffle_slots) {
        std::shuffle(perm.begin(), perm.end(), rng);
        augmented = permute_slots(augmented ? *augmented : drawn, perm, model_cfg);
      }
      SampleGradient sg = backward(augmented ? *augmented : drawn, params, model_cfg, cfg);
      for (auto& [name, g] : grad.tensors()) g += sg.grad.at(name);
      mean.ce += sg.loss.ce;
      mean.sim += sg.loss.sim;
      mean.total += sg.loss.total;
    }
    const double inv = 1.0 / static_cast<double>(batch);
    mean.ce *= inv;
    mean.sim *= inv;
    mean.total *= inv;
    if (!std::isfinite(mean.total) || mean.total > cfg.divergence_limit) {
      if (!cfg.checkpoint_path.empty()) save_checkpoint(cfg.checkpoint_path, model_cfg, params);
      throw DivergenceError("training diverged at step " + std::to_string(step) +
                                " (loss " + std::to_string(mean.total) + ")",
                            step, params);
    }
    for (auto& [_, g] : grad.tensors()) g *= inv;
    clip_global_norm(grad, cfg.clip_norm);
    adam.step(params, grad, lr, frozen);

    StepLog entry{step, mean, lr};
    if (log != nullptr) *log << format_step_log(entry) << '\n';
    result.curve.push_back(entry);
    if (hook && !hook(entry, params)) break;
  }
  result.params = std::move(params);
  return result;
}

Params average_params(const std::vector<Params>& sets) {
  if (sets.empty()) throw ConfigError("nothing to average");
  Params mean = sets.front();
  for (std::size_t i = 1; i < sets.size(); ++i) {
    if (!sets[i].same_layout(mean)) throw ConfigError("parameter sets differ in layout");
    for (auto& [name, t] : mean.tensors()) t += sets[i].at(name);
  }
  const double inv = 1.0 / static_cast<double>(sets.size());
  for (auto& [_, t] : mean.tensors()) t *= inv;
  return mean;
}

Checkpoint average_checkpoints(const std::vector<std::string>& paths) {
  if (paths.empty()) throw ConfigError("no checkpoints to average");
  std::vector<Params> sets;
  Checkpoint first = load_checkpoint(paths.front());
  sets.push_back(first.params);
  for (std::size_t i = 1; i < paths.size(); ++i) {
    Checkpoint c = load_checkpoint(paths[i]);
    if (!(c.config == first.config)) {
      throw ConfigError("checkpoint " + paths[i] + " has a different model config");
    }
    sets.push_back(std::move(c.params));
  }
  return {first.config, average_params(sets)};
}

}  // namespace sond
