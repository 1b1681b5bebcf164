#pragma once

// Speaker timelines, RTTM interchange and diarization error rate.

#include <map>
#include <string>
#include <vector>

#include "sond/error.hpp"
#include "sond/pse_codec.hpp"

namespace sond {

inline constexpr double kFrameSeconds = 0.01;

struct Interval {
  double start = 0.0;
  double end = 0.0;
  double duration() const { return end - start; }
  bool operator==(const Interval&) const = default;
};

struct Turn {
  std::string speaker;
  double start = 0.0;
  double end = 0.0;
  bool operator==(const Turn&) const = default;
};

struct Timeline {
  std::vector<Turn> turns;

  std::vector<std::string> speakers() const;  // sorted, unique
  bool empty() const { return turns.empty(); }
};

/// Sorts turns and fuses same-speaker turns that overlap or touch.
Timeline merge_turns(const Timeline& timeline);

/// Turns from frame activity: consecutive active frames of a slot become one
/// turn; runs shorter than `min_frames` are dropped. `names[n]` labels slot n.
Timeline activity_to_timeline(const ActivityMatrix& activity, const std::vector<std::string>& names,
                              int min_frames = 1, std::size_t frame_offset = 0);

/// Union of all speech in the timeline, as sorted disjoint intervals.
std::vector<Interval> speech_regions(const Timeline& timeline);

std::string emit_rttm(const Timeline& timeline, const std::string& file_id);

/// SPEAKER lines only; other record types and blank lines are skipped.
Timeline parse_rttm(const std::string& text);
std::map<std::string, Timeline> parse_rttm_files(const std::string& text);

enum class DerDenominator {
  RefSpeech,   // scored reference speech, each active speaker counted separately
  ScoredTime,  // scored reference speech with overlap collapsed
};

struct DerOptions {
  double collar = 0.25;  // seconds on each side of every reference boundary
  DerDenominator denominator = DerDenominator::RefSpeech;
};

struct DerResult {
  double der = 0.0;  // percentages
  double md = 0.0;
  double fa = 0.0;
  double sc = 0.0;
  double t_total = 0.0;  // seconds
  double t_md = 0.0;
  double t_fa = 0.0;
  double t_sc = 0.0;
  std::map<std::string, std::string> mapping;  // reference speaker -> hypothesis speaker
};

/// Throws ScoringError when the reference has no scored speech.
DerResult der(const Timeline& ref, const Timeline& hyp, const DerOptions& options = {});

/// Optimal assignment maximizing total weight; result[i] is the column for row
/// i or -1. Rectangular inputs are allowed.
std::vector<int> max_weight_assignment(const std::vector<std::vector<double>>& weight);

/// `file  DER  MD  FA  SC  total_s`, tab separated.
std::string format_der_row(const std::string& file_id, const DerResult& r);

}  // namespace sond
