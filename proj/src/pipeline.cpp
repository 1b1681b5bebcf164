#include "sond/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>

#include "sond/numerics.hpp"

namespace sond {
namespace {

std::size_t seconds_to_frames(double s) {
  return static_cast<std::size_t>(std::max(0L, std::lround(s / kFrameSeconds)));
}

std::string num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::vector<FrameRange> voiced_ranges(const std::vector<Interval>& vad, std::size_t frames) {
  std::vector<FrameRange> out;
  for (const Interval& iv : vad) {
    FrameRange r = to_frames(iv);
    r.end = std::min(r.end, frames);
    if (r.begin < r.end) out.push_back(r);
  }
  return out;
}

Matrix class_membership(const ModelConfig& cfg) {
  const PseConfig pse = PseConfig::make(cfg.slots, cfg.max_active);
  Matrix m = Matrix::Zero(static_cast<Eigen::Index>(pse.classes), cfg.slots);
  for (PseClass c = 0; c < pse.classes; ++c) {
    const PseCode code = class_to_pse(c, pse);
    for (int n = 0; n < cfg.slots; ++n) {
      if ((code >> n) & 1U) m(static_cast<Eigen::Index>(c), n) = 1.0;
    }
  }
  return m;
}

}  // namespace

Interval FrameRange::seconds() const {
  return {static_cast<double>(begin) * kFrameSeconds, static_cast<double>(end) * kFrameSeconds};
}

FrameRange to_frames(const Interval& iv) {
  return {seconds_to_frames(iv.start), seconds_to_frames(iv.end)};
}

void PipelineConfig::validate() const {
  if (segment_s <= 0.0 || segment_shift_s <= 0.0 || chunk_s <= 0.0 || chunk_shift_s <= 0.0) {
    throw ConfigError("window and shift lengths must be positive");
  }
  if (seconds_to_frames(segment_s) < 1 || seconds_to_frames(segment_shift_s) < 1 ||
      seconds_to_frames(chunk_s) < 1 || seconds_to_frames(chunk_shift_s) < 1) {
    throw ConfigError("windows and shifts must span at least one frame");
  }
  if (median_window_s < 0.0) throw ConfigError("median window must be >= 0");
  if (min_turn_frames < 1) throw ConfigError("min_turn_frames must be >= 1");
  if (iterations < 1) throw ConfigError("iterations must be >= 1");
  if (k_max < 1) throw ConfigError("k_max must be >= 1");
  if (affinity_keep <= 0.0 || affinity_keep > 1.0) throw ConfigError("affinity_keep must lie in (0, 1]");
}

KeyValueConfig PipelineConfig::to_kv() const {
  KeyValueConfig kv;
  kv.set("segment_s", num(segment_s));
  kv.set("segment_shift_s", num(segment_shift_s));
  kv.set("chunk_s", num(chunk_s));
  kv.set("chunk_shift_s", num(chunk_shift_s));
  kv.set("median_window_s", num(median_window_s));
  kv.set("min_turn_frames", std::to_string(min_turn_frames));
  kv.set("iterations", std::to_string(iterations));
  kv.set("k_max", std::to_string(k_max));
  kv.set("affinity_keep", num(affinity_keep));
  kv.set("seed", std::to_string(seed));
  return kv;
}

PipelineConfig PipelineConfig::from_kv(const KeyValueConfig& kv, const PipelineConfig& base) {
  PipelineConfig c = base;
  c.segment_s = kv.get_double("segment_s", c.segment_s);
  c.segment_shift_s = kv.get_double("segment_shift_s", c.segment_shift_s);
  c.chunk_s = kv.get_double("chunk_s", c.chunk_s);
  c.chunk_shift_s = kv.get_double("chunk_shift_s", c.chunk_shift_s);
  c.median_window_s = kv.get_double("median_window_s", c.median_window_s);
  c.min_turn_frames = kv.get_int("min_turn_frames", c.min_turn_frames);
  c.iterations = kv.get_int("iterations", c.iterations);
  c.k_max = kv.get_int("k_max", c.k_max);
  c.affinity_keep = kv.get_double("affinity_keep", c.affinity_keep);
  c.seed = static_cast<std::uint64_t>(kv.get_int("seed", static_cast<int>(c.seed)));
  c.validate();
  return c;
}

std::vector<FrameRange> plan_windows(const FrameRange& range, std::size_t win, std::size_t shift) {
  if (win < 1 || shift < 1) throw ConfigError("window and shift must be at least one frame");
  std::vector<FrameRange> out;
  if (range.end <= range.begin) return out;
  if (range.size() <= win) {
    out.push_back(range);
    return out;
  }
  std::size_t start = range.begin;
  for (; start + win <= range.end; start += shift) out.push_back({start, start + win});
  if (out.back().end < range.end) out.push_back({out.back().begin + shift, range.end});
  return out;
}

SegmentPlan plan_segments(const std::vector<Interval>& vad, const PipelineConfig& cfg) {
  cfg.validate();
  SegmentPlan plan;
  for (const Interval& iv : vad) {
    const FrameRange r = to_frames(iv);
    for (const FrameRange& w : plan_windows(r, seconds_to_frames(cfg.segment_s),
                                            seconds_to_frames(cfg.segment_shift_s))) {
      plan.segments.push_back(w);
    }
    for (const FrameRange& w : plan_windows(r, seconds_to_frames(cfg.chunk_s),
                                            seconds_to_frames(cfg.chunk_shift_s))) {
      plan.chunks.push_back(w);
    }
  }
  return plan;
}

Matrix embed_chunks(const Matrix& features, const std::vector<FrameRange>& chunks,
                    std::size_t* skipped) {
  std::vector<RowVector> rows;
  std::size_t dropped = 0;
  const auto frames = static_cast<std::size_t>(features.rows());
  for (const FrameRange& c : chunks) {
    const std::size_t end = std::min(c.end, frames);
    if (end <= c.begin) {
      ++dropped;
      continue;
    }
    rows.push_back(features.middleRows(static_cast<Eigen::Index>(c.begin),
                                       static_cast<Eigen::Index>(end - c.begin))
                       .colwise()
                       .mean());
  }
  if (skipped != nullptr) *skipped = dropped;
  Matrix out(static_cast<Eigen::Index>(rows.size()), features.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) out.row(static_cast<Eigen::Index>(i)) = rows[i];
  return out;
}

SegmentResult infer_segment(const Matrix& features, const FrameRange& range,
                            const ProfileSet& profiles, const Params& params,
                            const ModelConfig& cfg) {
  if (range.end > static_cast<std::size_t>(features.rows()) || range.end <= range.begin) {
    throw ShapeError("segment [" + std::to_string(range.begin) + ", " + std::to_string(range.end) +
                     ") lies outside " + std::to_string(features.rows()) + " frames");
  }
  if (profiles.valid_count() == 0) throw ConfigError("inference needs at least one valid profile");
  SegmentResult r;
  r.range = range;
  const Matrix x = features.middleRows(static_cast<Eigen::Index>(range.begin),
                                       static_cast<Eigen::Index>(range.size()));
  r.posteriors = forward(x, profiles, params, cfg);
  if (cfg.head == OutputHead::PowerSet) {
    r.labels.resize(range.size());
    for (Eigen::Index t = 0; t < r.posteriors.rows(); ++t) {
      Eigen::Index best = 0;
      r.posteriors.row(t).maxCoeff(&best);
      r.labels[static_cast<std::size_t>(t)] = static_cast<PseClass>(best);
    }
  }
  return r;
}

Matrix average_posteriors(const std::vector<SegmentResult>& segments, std::size_t frames,
                          std::vector<int>* coverage) {
  Eigen::Index width = 0;
  for (const SegmentResult& s : segments) width = std::max(width, s.posteriors.cols());
  Matrix sum = Matrix::Zero(static_cast<Eigen::Index>(frames), width);
  std::vector<int> count(frames, 0);
  for (const SegmentResult& s : segments) {
    if (s.range.end > frames || s.posteriors.rows() != static_cast<Eigen::Index>(s.range.size()) ||
        s.posteriors.cols() != width) {
      throw ShapeError("segment posteriors do not fit the recording");
    }
    sum.middleRows(static_cast<Eigen::Index>(s.range.begin), s.posteriors.rows()) += s.posteriors;
    for (std::size_t t = s.range.begin; t < s.range.end; ++t) ++count[t];
  }
  for (std::size_t t = 0; t < frames; ++t) {
    if (count[t] > 1) sum.row(static_cast<Eigen::Index>(t)) /= count[t];
  }
  if (coverage != nullptr) *coverage = std::move(count);
  return sum;
}

Matrix speaker_marginals(const Matrix& posteriors, const ModelConfig& cfg) {
  if (cfg.head == OutputHead::MultiLabel) return posteriors;
  return posteriors * class_membership(cfg);
}

int median_window_frames(double window_s) {
  const double frames = window_s / kFrameSeconds;
  const auto lower_odd = static_cast<long>(std::floor((frames - 1.0) / 2.0)) * 2 + 1;
  const long best = std::abs(frames - static_cast<double>(lower_odd)) <=
                            std::abs(static_cast<double>(lower_odd + 2) - frames)
                        ? lower_odd
                        : lower_odd + 2;
  return static_cast<int>(std::max(1L, best));
}

ActivityMatrix smooth(const ActivityMatrix& activity, int window_frames,
                      const std::vector<FrameRange>& ranges, const Matrix& marginals,
                      int max_active) {
  if (marginals.rows() != static_cast<Eigen::Index>(activity.frames()) ||
      marginals.cols() != activity.slots()) {
    throw ShapeError("smooth: marginals " + shape_string(marginals) + " do not match activity");
  }
  ActivityMatrix out(activity.frames(), activity.slots());
  std::vector<std::uint8_t> stream;
  for (const FrameRange& r : ranges) {
    const std::size_t end = std::min(r.end, activity.frames());
    if (end <= r.begin) continue;
    for (int n = 0; n < activity.slots(); ++n) {
      stream.clear();
      for (std::size_t t = r.begin; t < end; ++t) stream.push_back(activity.at(t, n) ? 1 : 0);
      const std::vector<std::uint8_t> f =
          median_filter<std::uint8_t>(std::span<const std::uint8_t>(stream), window_frames);
      for (std::size_t t = r.begin; t < end; ++t) out.set(t, n, f[t - r.begin] != 0);
    }
  }
  std::vector<int> order(static_cast<std::size_t>(activity.slots()));
  for (std::size_t t = 0; t < out.frames(); ++t) {
    if (out.active_count(t) <= max_active) continue;
    std::iota(order.begin(), order.end(), 0);
    const auto row = static_cast<Eigen::Index>(t);
    std::stable_sort(order.begin(), order.end(),
                     [&](int a, int b) { return marginals(row, a) > marginals(row, b); });
    int kept = 0;
    for (int n : order) {
      if (!out.at(t, n)) continue;
      if (kept < max_active) {
        ++kept;
      } else {
        out.set(t, n, false);
      }
    }
  }
  return out;
}

std::string slot_name(int slot) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "S%02d", slot);
  return buf;
}

std::vector<std::string> slot_names(int slots) {
  std::vector<std::string> names;
  for (int n = 0; n < slots; ++n) names.push_back(slot_name(n));
  return names;
}

Timeline stitch(const std::vector<SegmentResult>& segments, std::size_t frames,
                const ModelConfig& cfg, int min_turn_frames) {
  const Matrix post = average_posteriors(segments, frames, nullptr);
  return activity_to_timeline(decode_activity(post, cfg), slot_names(cfg.slots), min_turn_frames);
}

ProfileSet refine_profiles(const Matrix& features, const ActivityMatrix& activity) {
  if (activity.frames() != static_cast<std::size_t>(features.rows())) {
    throw ShapeError("refine_profiles: activity and features disagree on frame count");
  }
  ProfileSet p = ProfileSet::zeros(activity.slots(), static_cast<int>(features.cols()));
  std::vector<int> count(static_cast<std::size_t>(activity.slots()), 0);
  for (std::size_t t = 0; t < activity.frames(); ++t) {
    if (activity.active_count(t) != 1) continue;
    for (int n = 0; n < activity.slots(); ++n) {
      if (!activity.at(t, n)) continue;
      p.vectors.row(n) += features.row(static_cast<Eigen::Index>(t));
      ++count[static_cast<std::size_t>(n)];
    }
  }
  for (int n = 0; n < activity.slots(); ++n) {
    const int c = count[static_cast<std::size_t>(n)];
    if (c > 0) {
      p.vectors.row(n) /= c;
      p.valid[static_cast<std::size_t>(n)] = true;
    }
  }
  return p;
}

int carry_over_profiles(ProfileSet& refined, const ProfileSet& previous) {
  if (refined.slots() != previous.slots() || refined.vectors.cols() != previous.vectors.cols()) {
    throw ShapeError("carry_over_profiles: profile sets differ in shape");
  }
  int carried = 0;
  for (int n = 0; n < refined.slots(); ++n) {
    const auto i = static_cast<std::size_t>(n);
    if (refined.valid[i] || !previous.valid[i]) continue;
    refined.vectors.row(n) = previous.vectors.row(n);
    refined.valid[i] = true;
    ++carried;
  }
  return carried;
}

PipelineResult run_pipeline(const Matrix& features, const std::vector<Interval>& vad,
                            const Params& params, const ModelConfig& model_cfg,
                            const PipelineConfig& cfg) {
  cfg.validate();
  model_cfg.validate();
  if (features.cols() != model_cfg.feature_dim) {
    throw ShapeError("features have " + std::to_string(features.cols()) + " dims, model expects " +
                     std::to_string(model_cfg.feature_dim));
  }
  if (model_cfg.profile_dim != model_cfg.feature_dim) {
    throw ConfigError("pipeline profiles are feature-space means; model needs profile_dim == feature_dim");
  }
  const auto frames = static_cast<std::size_t>(features.rows());
  PipelineResult result;
  result.activity = ActivityMatrix(frames, model_cfg.slots);
  result.profiles = ProfileSet::zeros(model_cfg.slots, model_cfg.profile_dim);

  const std::vector<FrameRange> ranges = voiced_ranges(vad, frames);
  std::vector<FrameRange> segments;
  std::vector<FrameRange> chunks;
  for (const FrameRange& r : ranges) {
    for (const FrameRange& w : plan_windows(r, seconds_to_frames(cfg.segment_s),
                                            seconds_to_frames(cfg.segment_shift_s))) {
      segments.push_back(w);
    }
    for (const FrameRange& w :
         plan_windows(r, seconds_to_frames(cfg.chunk_s), seconds_to_frames(cfg.chunk_shift_s))) {
      chunks.push_back(w);
    }
  }
  if (chunks.empty()) {
    result.warnings.push_back("no voiced frames; empty hypothesis");
    result.iterations.assign(static_cast<std::size_t>(cfg.iterations), Timeline{});
    return result;
  }

  std::size_t skipped = 0;
  const Matrix embeddings = embed_chunks(features, chunks, &skipped);
  if (skipped > 0) result.warnings.push_back(std::to_string(skipped) + " empty chunks skipped");
  ClusterOptions copt;
  copt.k_max = std::min(cfg.k_max, model_cfg.slots);
  copt.seed = cfg.seed;
  const double keep = cfg.affinity_keep;
  copt.affinity = [keep](const Matrix& e) { return pruned_affinity(e, keep); };
  result.clusters = cluster_embeddings(embeddings, copt);
  ProfileSet profiles = extract_profiles(result.clusters, model_cfg.slots);

  const int window = median_window_frames(cfg.median_window_s);
  const std::vector<std::string> names = slot_names(model_cfg.slots);
  for (int it = 1; it <= cfg.iterations; ++it) {
    if (it > 1) {
      ProfileSet refined = refine_profiles(features, result.activity);
      if (refined.valid_count() == 0) {
        result.warnings.push_back("iteration " + std::to_string(it) +
                                  ": no single-speaker frames, keeping previous profiles");
      } else {
        if (const int kept = carry_over_profiles(refined, profiles); kept > 0) {
          result.warnings.push_back("iteration " + std::to_string(it) + ": " + std::to_string(kept) +
                                    " slot(s) without single-speaker frames keep their previous profile");
        }
        profiles = std::move(refined);
      }
    }
    std::vector<SegmentResult> outputs;
    outputs.reserve(segments.size());
    for (const FrameRange& s : segments) {
      outputs.push_back(infer_segment(features, s, profiles, params, model_cfg));
    }
    const Matrix post = average_posteriors(outputs, frames, nullptr);
    result.activity = smooth(decode_activity(post, model_cfg), window, ranges,
                             speaker_marginals(post, model_cfg), model_cfg.max_active);
    result.iterations.push_back(activity_to_timeline(result.activity, names, cfg.min_turn_frames));
    result.profiles = profiles;
  }
  result.timeline = result.iterations.back();
  return result;
}

}  // namespace sond
