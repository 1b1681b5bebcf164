#pragma once

// Long-recording inference: windows over voiced regions, chunk embeddings,
// clustering, per-window SOND inference, posterior averaging, median
// smoothing and iterative profile refinement.

#include <cstdint>
#include <string>
#include <vector>

#include "sond/clustering.hpp"
#include "sond/eval.hpp"
#include "sond/kv_config.hpp"
#include "sond/model.hpp"

namespace sond {

/// Half-open frame range [begin, end).
struct FrameRange {
  std::size_t begin = 0;
  std::size_t end = 0;
  std::size_t size() const { return end - begin; }
  Interval seconds() const;
  bool operator==(const FrameRange&) const = default;
};

FrameRange to_frames(const Interval& iv);

struct PipelineConfig {
  double segment_s = 16.0;
  double segment_shift_s = 4.0;
  double chunk_s = 1.28;
  double chunk_shift_s = 0.64;
  double median_window_s = 1.28;
  int min_turn_frames = 2;
  int iterations = 3;
  int k_max = 16;
  double affinity_keep = 0.2;
  std::uint64_t seed = 1;

  void validate() const;
  KeyValueConfig to_kv() const;
  static PipelineConfig from_kv(const KeyValueConfig& kv, const PipelineConfig& base);
  static PipelineConfig from_kv(const KeyValueConfig& kv) { return from_kv(kv, PipelineConfig{}); }
};

struct SegmentPlan {
  std::vector<FrameRange> segments;
  std::vector<FrameRange> chunks;
};

/// Windows of `win` frames every `shift` frames inside one range. A range no
/// longer than `win` yields itself; uncovered frames after the last full
/// window get one shorter tail window.
std::vector<FrameRange> plan_windows(const FrameRange& range, std::size_t win, std::size_t shift);

SegmentPlan plan_segments(const std::vector<Interval>& vad, const PipelineConfig& cfg = {});

/// Mean feature frame of every chunk; m x D. Empty chunks are skipped and
/// counted in `skipped`.
Matrix embed_chunks(const Matrix& features, const std::vector<FrameRange>& chunks,
                    std::size_t* skipped = nullptr);

struct SegmentResult {
  FrameRange range;
  Matrix posteriors;  // frames x output_dim
  PseLabelSeq labels;  // argmax classes (power-set head only)
};

SegmentResult infer_segment(const Matrix& features, const FrameRange& range,
                            const ProfileSet& profiles, const Params& params,
                            const ModelConfig& cfg);

/// Frame-wise mean of overlapping segment posteriors over `frames` frames;
/// `coverage[t]` counts contributing segments (rows with 0 stay zero).
Matrix average_posteriors(const std::vector<SegmentResult>& segments, std::size_t frames,
                          std::vector<int>* coverage);

/// Per-slot probability of being active: a sum over classes containing the
/// slot (power-set head) or the sigmoid itself (multi-label head).
Matrix speaker_marginals(const Matrix& posteriors, const ModelConfig& cfg);

/// Nearest odd frame count for a window in seconds.
int median_window_frames(double window_s);

/// Median-filters each slot's binary stream inside every range, then keeps at
/// most `max_active` slots per frame (highest marginal first). Frames outside
/// the ranges are cleared.
ActivityMatrix smooth(const ActivityMatrix& activity, int window_frames,
                      const std::vector<FrameRange>& ranges, const Matrix& marginals,
                      int max_active);

/// Averages posteriors, takes the per-frame decision on covered frames and
/// converts it to turns, dropping turns shorter than `min_turn_frames`.
Timeline stitch(const std::vector<SegmentResult>& segments, std::size_t frames,
                const ModelConfig& cfg, int min_turn_frames = 2);

std::string slot_name(int slot);
std::vector<std::string> slot_names(int slots);

struct PipelineResult {
  Timeline timeline;  // final iteration
  std::vector<Timeline> iterations;
  ActivityMatrix activity;  // final, recording frames x N
  ProfileSet profiles;  // used by the final iteration
  ClusterResult clusters;
  std::vector<std::string> warnings;
};

PipelineResult run_pipeline(const Matrix& features, const std::vector<Interval>& vad,
                            const Params& params, const ModelConfig& model_cfg,
                            const PipelineConfig& cfg = {});

/// Mean features over frames where the slot is the only active one; slots
/// without such frames become invalid.
ProfileSet refine_profiles(const Matrix& features, const ActivityMatrix& activity);

/// `refined` with every invalid slot taken from `previous`. Returns the number
/// of slots carried over.
int carry_over_profiles(ProfileSet& refined, const ProfileSet& previous);

}  // namespace sond
