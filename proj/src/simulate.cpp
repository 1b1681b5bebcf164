#include "sond/simulate.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <random>

namespace sond {
namespace {

constexpr int kMaxRedraws = 100;

std::string num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

long to_frames(double seconds) {
  return std::max<long>(1, std::lround(seconds / kFrameSeconds));
}

}  // namespace

std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t index) {
  return splitmix64(splitmix64(seed) ^ (index * 0xd1b54a32d192ed03ULL));
}

std::string speaker_name(int bank_index) { return "spk" + std::to_string(bank_index); }

double overlap_ratio(const ActivityMatrix& labels) {
  std::size_t voiced = 0;
  std::size_t overlapped = 0;
  for (std::size_t t = 0; t < labels.frames(); ++t) {
    const int c = labels.active_count(t);
    voiced += c >= 1;
    overlapped += c >= 2;
  }
  return voiced == 0 ? 0.0 : static_cast<double>(overlapped) / static_cast<double>(voiced);
}

SimulatedLabels simulate_labels(const TurnStats& stats, int speakers, double duration_s,
                                int max_active, std::uint64_t seed) {
  if (speakers < 1) throw ConfigError("simulate_labels: need at least one speaker");
  if (max_active < 1) throw ConfigError("simulate_labels: max_active must be >= 1");
  if (duration_s <= 0.0) throw ConfigError("simulate_labels: duration must be > 0");
  if (stats.talk_median_s <= 0.0 || stats.silence_median_s <= 0.0 || stats.talk_sigma < 0.0 ||
      stats.silence_sigma < 0.0) {
    throw ConfigError("simulate_labels: invalid turn statistics");
  }
  const long frames = to_frames(duration_s);
  std::mt19937_64 rng(seed);
  std::lognormal_distribution<double> talk(std::log(stats.talk_median_s), stats.talk_sigma);
  std::lognormal_distribution<double> silence(std::log(stats.silence_median_s), stats.silence_sigma);
  const double cycle = stats.talk_median_s * std::exp(0.5 * stats.talk_sigma * stats.talk_sigma) +
                       stats.silence_median_s * std::exp(0.5 * stats.silence_sigma * stats.silence_sigma);
  std::uniform_real_distribution<double> phase(0.0, cycle);

  SimulatedLabels out{ActivityMatrix(static_cast<std::size_t>(frames), speakers), 0.0};
  std::vector<int> count(static_cast<std::size_t>(frames), 0);
  for (int s = 0; s < speakers; ++s) {
    long pos = -to_frames(phase(rng));
    while (pos < frames) {
      long begin = 0;
      long end = 0;
      bool placed = false;
      for (int attempt = 0; attempt <= kMaxRedraws && !placed; ++attempt) {
        begin = pos + to_frames(silence(rng));
        end = begin + to_frames(talk(rng));
        const long lo = std::max<long>(begin, 0);
        const long hi = std::min(end, frames);
        placed = true;
        for (long t = lo; t < hi; ++t) {
          if (count[static_cast<std::size_t>(t)] >= max_active) {
            placed = false;
            break;
          }
        }
      }
      if (!placed) {
        throw SimulationError("could not place a talk run for speaker " + std::to_string(s) +
                              " without exceeding " + std::to_string(max_active) +
                              " active speakers after " + std::to_string(kMaxRedraws) +
                              " redraws");
      }
      for (long t = std::max<long>(begin, 0); t < std::min(end, frames); ++t) {
        ++count[static_cast<std::size_t>(t)];
        out.labels.set(static_cast<std::size_t>(t), s, true);
      }
      pos = end;
    }
  }
  out.overlap_ratio = overlap_ratio(out.labels);
  return out;
}

std::vector<SpeakerModel> make_speaker_bank(int count, int dim, double radius, double sigma,
                                            double min_separation, std::uint64_t seed) {
  if (count < 1 || dim < 1 || radius <= 0.0 || sigma <= 0.0) {
    throw ConfigError("make_speaker_bank: count, dim, radius and sigma must be positive");
  }
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> g(0.0, 1.0);
  std::vector<SpeakerModel> bank;
  int tries = 0;
  while (static_cast<int>(bank.size()) < count) {
    if (++tries > 100 * count + 1000) {
      throw SimulationError("cannot place " + std::to_string(count) + " speakers " +
                            num(min_separation) + " sigma apart at radius " + num(radius));
    }
    RowVector mean(dim);
    for (int i = 0; i < dim; ++i) mean(i) = g(rng);
    const double norm = mean.norm();
    if (norm == 0.0) continue;
    mean *= radius / norm;
    bool far = true;
    for (const SpeakerModel& other : bank) {
      if ((other.mean - mean).norm() < min_separation * sigma) {
        far = false;
        break;
      }
    }
    if (far) bank.push_back({std::move(mean), sigma});
  }
  return bank;
}

Matrix synth_features(const ActivityMatrix& labels, std::span<const SpeakerModel> speakers,
                      double noise_sigma, std::uint64_t seed) {
  if (speakers.size() != static_cast<std::size_t>(labels.slots())) {
    throw ShapeError("synth_features: " + std::to_string(speakers.size()) + " speaker models for " +
                     std::to_string(labels.slots()) + " label columns");
  }
  if (speakers.empty()) throw ShapeError("synth_features: no speakers");
  const Eigen::Index dim = speakers[0].mean.size();
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> g(0.0, 1.0);
  Matrix x = Matrix::Zero(static_cast<Eigen::Index>(labels.frames()), dim);
  for (std::size_t t = 0; t < labels.frames(); ++t) {
    const auto row = static_cast<Eigen::Index>(t);
    bool any = false;
    for (int n = 0; n < labels.slots(); ++n) {
      if (!labels.at(t, n)) continue;
      any = true;
      const SpeakerModel& m = speakers[static_cast<std::size_t>(n)];
      for (Eigen::Index d = 0; d < dim; ++d) x(row, d) += m.mean(d) + m.sigma * g(rng);
    }
    if (!any) {
      for (Eigen::Index d = 0; d < dim; ++d) x(row, d) = noise_sigma * g(rng);
    }
  }
  return x;
}

void SimConfig::validate() const {
  if (slots < 1 || max_active < 1 || max_active > slots) {
    throw ConfigError("simulator needs 1 <= max_active <= slots");
  }
  if (min_speakers < 1 || max_speakers < min_speakers || max_speakers > slots) {
    throw ConfigError("simulator needs 1 <= min_speakers <= max_speakers <= slots");
  }
  if (pool_size < max_speakers + max_distractors) {
    throw ConfigError("speaker pool smaller than speakers plus distractors per sample");
  }
  if (feature_dim < 1 || duration_s <= 0.0 || max_distractors < 0) {
    throw ConfigError("simulator dimensions and duration must be positive");
  }
}

KeyValueConfig SimConfig::to_kv() const {
  KeyValueConfig kv;
  kv.set("slots", std::to_string(slots));
  kv.set("max_active", std::to_string(max_active));
  kv.set("feature_dim", std::to_string(feature_dim));
  kv.set("duration_s", num(duration_s));
  kv.set("min_speakers", std::to_string(min_speakers));
  kv.set("max_speakers", std::to_string(max_speakers));
  kv.set("max_distractors", std::to_string(max_distractors));
  kv.set("pool_size", std::to_string(pool_size));
  kv.set("radius", num(radius));
  kv.set("sigma", num(sigma));
  kv.set("min_separation", num(min_separation));
  kv.set("noise_sigma", num(noise_sigma));
  kv.set("profile_noise", num(profile_noise));
  kv.set("talk_median_s", num(turns.talk_median_s));
  kv.set("talk_sigma", num(turns.talk_sigma));
  kv.set("silence_median_s", num(turns.silence_median_s));
  kv.set("silence_sigma", num(turns.silence_sigma));
  kv.set("bank_seed", std::to_string(bank_seed));
  kv.set("seed", std::to_string(seed));
  return kv;
}

SimConfig SimConfig::from_kv(const KeyValueConfig& kv, const SimConfig& base) {
  SimConfig c = base;
  c.slots = kv.get_int("slots", c.slots);
  c.max_active = kv.get_int("max_active", c.max_active);
  c.feature_dim = kv.get_int("feature_dim", c.feature_dim);
  c.duration_s = kv.get_double("duration_s", c.duration_s);
  c.min_speakers = kv.get_int("min_speakers", c.min_speakers);
  c.max_speakers = kv.get_int("max_speakers", c.max_speakers);
  c.max_distractors = kv.get_int("max_distractors", c.max_distractors);
  c.pool_size = kv.get_int("pool_size", c.pool_size);
  c.radius = kv.get_double("radius", c.radius);
  c.sigma = kv.get_double("sigma", c.sigma);
  c.min_separation = kv.get_double("min_separation", c.min_separation);
  c.noise_sigma = kv.get_double("noise_sigma", c.noise_sigma);
  c.profile_noise = kv.get_double("profile_noise", c.profile_noise);
  c.turns.talk_median_s = kv.get_double("talk_median_s", c.turns.talk_median_s);
  c.turns.talk_sigma = kv.get_double("talk_sigma", c.turns.talk_sigma);
  c.turns.silence_median_s = kv.get_double("silence_median_s", c.turns.silence_median_s);
  c.turns.silence_sigma = kv.get_double("silence_sigma", c.turns.silence_sigma);
  c.bank_seed = static_cast<std::uint64_t>(kv.get_int("bank_seed", static_cast<int>(c.bank_seed)));
  c.seed = static_cast<std::uint64_t>(kv.get_int("seed", static_cast<int>(c.seed)));
  c.validate();
  return c;
}

RowVector speaker_profile(const SpeakerModel& model, double profile_noise, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> g(0.0, 1.0);
  RowVector v = model.mean;
  for (Eigen::Index d = 0; d < v.size(); ++d) v(d) += profile_noise * g(rng);
  return v;
}

SimSample simulate_sample(const SimConfig& cfg, const std::vector<SpeakerModel>& bank,
                          std::uint64_t seed) {
  cfg.validate();
  if (static_cast<int>(bank.size()) < cfg.max_speakers + cfg.max_distractors) {
    throw ConfigError("speaker bank too small for the simulator config");
  }
  std::mt19937_64 rng(seed);
  const int speakers = std::uniform_int_distribution<int>(cfg.min_speakers, cfg.max_speakers)(rng);
  const int distractors = std::min(std::uniform_int_distribution<int>(0, cfg.max_distractors)(rng),
                                   cfg.slots - speakers);

  std::vector<int> pool(bank.size());
  std::iota(pool.begin(), pool.end(), 0);
  std::shuffle(pool.begin(), pool.end(), rng);
  std::vector<int> slot_order(static_cast<std::size_t>(cfg.slots));
  std::iota(slot_order.begin(), slot_order.end(), 0);
  std::shuffle(slot_order.begin(), slot_order.end(), rng);

  const SimulatedLabels compact =
      simulate_labels(cfg.turns, speakers, cfg.duration_s, cfg.max_active, rng());
  std::vector<SpeakerModel> voices;
  for (int i = 0; i < speakers; ++i) voices.push_back(bank[static_cast<std::size_t>(pool[static_cast<std::size_t>(i)])]);

  SimSample s;
  s.features = synth_features(compact.labels, voices, cfg.noise_sigma, rng());
  s.overlap_ratio = compact.overlap_ratio;
  s.labels = ActivityMatrix(compact.labels.frames(), cfg.slots);
  s.profiles = ProfileSet::zeros(cfg.slots, cfg.feature_dim);
  s.speaker_ids.assign(static_cast<std::size_t>(cfg.slots), -1);
  for (int i = 0; i < speakers + distractors; ++i) {
    const int slot = slot_order[static_cast<std::size_t>(i)];
    const int id = pool[static_cast<std::size_t>(i)];
    s.speaker_ids[static_cast<std::size_t>(slot)] = id;
    s.profiles.vectors.row(slot) =
        speaker_profile(bank[static_cast<std::size_t>(id)], cfg.profile_noise, rng());
    s.profiles.valid[static_cast<std::size_t>(slot)] = true;
    if (i < speakers) {
      for (std::size_t t = 0; t < compact.labels.frames(); ++t) {
        if (compact.labels.at(t, i)) s.labels.set(t, slot, true);
      }
    }
  }
  return s;
}

std::vector<SimSample> simulate_dataset(int count, const SimConfig& cfg) {
  cfg.validate();
  const std::vector<SpeakerModel> bank = make_speaker_bank(
      cfg.pool_size, cfg.feature_dim, cfg.radius, cfg.sigma, cfg.min_separation, cfg.bank_seed);
  std::vector<SimSample> out;
  out.reserve(static_cast<std::size_t>(std::max(count, 0)));
  for (int i = 0; i < count; ++i) {
    out.push_back(simulate_sample(cfg, bank, derive_seed(cfg.seed, static_cast<std::uint64_t>(i))));
  }
  return out;
}

std::vector<Interval> activity_vad(const ActivityMatrix& labels) {
  std::vector<Interval> vad;
  std::size_t t = 0;
  while (t < labels.frames()) {
    if (labels.active_count(t) == 0) {
      ++t;
      continue;
    }
    const std::size_t begin = t;
    while (t < labels.frames() && labels.active_count(t) > 0) ++t;
    vad.push_back({static_cast<double>(begin) * kFrameSeconds, static_cast<double>(t) * kFrameSeconds});
  }
  return vad;
}

Recording simulate_recording(const SimConfig& cfg, const std::vector<SpeakerModel>& bank,
                             int speakers, double duration_s, std::uint64_t seed) {
  if (speakers < 1 || speakers > static_cast<int>(bank.size())) {
    throw ConfigError("simulate_recording: speaker count outside the bank");
  }
  std::mt19937_64 rng(seed);
  std::vector<int> pool(bank.size());
  std::iota(pool.begin(), pool.end(), 0);
  std::shuffle(pool.begin(), pool.end(), rng);

  Recording r;
  r.speaker_ids.assign(pool.begin(), pool.begin() + speakers);
  r.labels = simulate_labels(cfg.turns, speakers, duration_s, cfg.max_active, rng()).labels;
  std::vector<SpeakerModel> voices;
  std::vector<std::string> names;
  for (int id : r.speaker_ids) {
    voices.push_back(bank[static_cast<std::size_t>(id)]);
    names.push_back(speaker_name(id));
  }
  r.features = synth_features(r.labels, voices, cfg.noise_sigma, rng());
  r.vad = activity_vad(r.labels);
  r.reference = activity_to_timeline(r.labels, names);
  return r;
}

}  // namespace sond
