#pragma once

// Power-set encoding of overlapped speaker activity.
//
// A frame's set of active speaker slots is packed into an integer code with
// slot n (0-based) contributing bit n. Codes whose popcount is at most K are
// then mapped onto a dense class range [0, C) ordered by (popcount, code), so
// class 0 is silence and classes 1..N are the solo speakers in slot order.
// Slot order is whatever order the profile set supplies.

#include <cstdint>
#include <iosfwd>
#include <span>
#include <vector>

namespace sond {

using PseCode = std::uint64_t;
using PseClass = std::uint64_t;
using PseLabelSeq = std::vector<PseClass>;

inline constexpr int kMaxSlots = 63;

/// Exact binomial coefficient for 0 <= k, n <= 64 (0 when k > n).
std::uint64_t binomial(int n, int k);

/// Number of speaker subsets of size at most k out of n: sum_{j<=k} C(n, j).
std::uint64_t num_classes(int n, int k);

struct PseConfig {
  int slots = 16;        // N
  int max_active = 4;    // K
  std::uint64_t classes = 2517;  // C

  /// Validated construction; throws ConfigError unless 1 <= K <= N <= 63.
  static PseConfig make(int slots, int max_active);
};

/// Binary T x N activity matrix, row-major.
class ActivityMatrix {
 public:
  ActivityMatrix() = default;
  ActivityMatrix(std::size_t frames, int slots);

  std::size_t frames() const { return frames_; }
  int slots() const { return slots_; }

  bool at(std::size_t t, int n) const { return data_[t * slots_ + n] != 0; }
  void set(std::size_t t, int n, bool active) { data_[t * slots_ + n] = active ? 1 : 0; }
  std::span<const std::uint8_t> row(std::size_t t) const {
    return {data_.data() + t * slots_, static_cast<std::size_t>(slots_)};
  }
  int active_count(std::size_t t) const;

  bool operator==(const ActivityMatrix&) const = default;

 private:
  std::size_t frames_ = 0;
  int slots_ = 0;
  std::vector<std::uint8_t> data_;
};

PseCode encode_pse(std::span<const std::uint8_t> row);
std::vector<std::uint8_t> decode_pse(PseCode code, int slots);

PseClass pse_to_class(PseCode code, const PseConfig& cfg);
PseCode class_to_pse(PseClass cls, const PseConfig& cfg);

PseLabelSeq encode_sequence(const ActivityMatrix& acts, const PseConfig& cfg);
ActivityMatrix decode_sequence(const PseLabelSeq& labels, const PseConfig& cfg);

/// Label file: `#pse N=<n> K=<k> C=<c>` followed by one class index per line.
void write_label_file(std::ostream& os, const PseLabelSeq& labels, const PseConfig& cfg);

struct LabelFile {
  PseConfig config;
  PseLabelSeq labels;
};
LabelFile read_label_file(std::istream& is);

}  // namespace sond
