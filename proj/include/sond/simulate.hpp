#pragma once

// Synthetic conversations: alternating talk/silence runs per speaker,
// parametric Gaussian speakers filling the active regions, and profile sets
// padded with distractor speakers.

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "sond/eval.hpp"
#include "sond/kv_config.hpp"
#include "sond/model.hpp"
#include "sond/pse_codec.hpp"

namespace sond {

/// Log-normal run lengths, parameterized by median (seconds) and log-sigma.
struct TurnStats {
  double talk_median_s = 2.0;
  double talk_sigma = 0.6;
  double silence_median_s = 4.5;
  double silence_sigma = 0.8;
};

struct SimulatedLabels {
  ActivityMatrix labels;
  double overlap_ratio = 0.0;  // frames with >= 2 speakers / frames with >= 1
};

/// Activity for `speakers` columns over `duration_s` seconds of 10 ms frames.
/// A talk run that would push a frame above `max_active` is redrawn (gap and
/// length) up to 100 times before giving up with SimulationError.
SimulatedLabels simulate_labels(const TurnStats& stats, int speakers, double duration_s,
                                int max_active, std::uint64_t seed);

double overlap_ratio(const ActivityMatrix& labels);

struct SpeakerModel {
  RowVector mean;
  double sigma = 1.0;
};

/// `count` speakers with means at distance `radius` from the origin in random
/// directions, pairwise at least `min_separation` * sigma apart.
std::vector<SpeakerModel> make_speaker_bank(int count, int dim, double radius, double sigma,
                                            double min_separation, std::uint64_t seed);

/// Column n of `labels` is voiced by `speakers[n]`. Active frames sum one
/// draw per active speaker; silent frames draw N(0, noise_sigma^2).
Matrix synth_features(const ActivityMatrix& labels, std::span<const SpeakerModel> speakers,
                      double noise_sigma, std::uint64_t seed);

struct SimConfig {
  int slots = 16;  // N
  int max_active = 4;  // K
  int feature_dim = 24;  // D; profiles share this space
  double duration_s = 16.0;
  int min_speakers = 2;
  int max_speakers = 4;
  int max_distractors = 2;
  int pool_size = 40;
  double radius = 6.0;
  double sigma = 1.0;
  double min_separation = 4.0;
  double noise_sigma = 0.3;
  double profile_noise = 0.2;
  TurnStats turns;
  std::uint64_t bank_seed = 7;
  std::uint64_t seed = 1;

  void validate() const;
  KeyValueConfig to_kv() const;
  static SimConfig from_kv(const KeyValueConfig& kv, const SimConfig& base);
  static SimConfig from_kv(const KeyValueConfig& kv) { return from_kv(kv, SimConfig{}); }
};

struct SimSample {
  Matrix features;  // T x D
  ActivityMatrix labels;  // T x N, slot order matches profiles
  ProfileSet profiles;
  std::vector<int> speaker_ids;  // bank index per slot, -1 for padding
  double overlap_ratio = 0.0;
};

/// Profile of a bank speaker: its mean plus N(0, profile_noise^2) jitter.
RowVector speaker_profile(const SpeakerModel& model, double profile_noise, std::uint64_t seed);

std::vector<SimSample> simulate_dataset(int count, const SimConfig& cfg);
SimSample simulate_sample(const SimConfig& cfg, const std::vector<SpeakerModel>& bank,
                          std::uint64_t seed);

/// A long recording with oracle VAD and its reference timeline.
struct Recording {
  Matrix features;
  ActivityMatrix labels;  // T x speakers
  std::vector<int> speaker_ids;
  std::vector<Interval> vad;
  Timeline reference;
};

Recording simulate_recording(const SimConfig& cfg, const std::vector<SpeakerModel>& bank,
                             int speakers, double duration_s, std::uint64_t seed);

/// Voiced intervals of an activity matrix (frames with any active speaker).
std::vector<Interval> activity_vad(const ActivityMatrix& labels);

std::string speaker_name(int bank_index);

/// Independent per-task seed derived from a master seed.
std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t index);

}  // namespace sond
