#include "sond/pse_codec.hpp"

#include <array>
#include <bit>
#include <cstdio>
#include <istream>
#include <ostream>
#include <sstream>
#include <string>

#include "sond/error.hpp"

namespace sond {
namespace {

using BinomialTable = std::array<std::array<std::uint64_t, 65>, 65>;

// C(64, 32) overflows 64 bits; entries we need (n <= 63) all fit.
constexpr BinomialTable make_binomial_table() {
  BinomialTable table{};
  for (int n = 0; n <= 64; ++n) {
    table[n][0] = 1;
    for (int k = 1; k <= n; ++k) {
      table[n][k] = table[n - 1][k - 1] + (k <= n - 1 ? table[n - 1][k] : 0);
    }
  }
  return table;
}

constexpr BinomialTable kBinomial = make_binomial_table();

std::uint64_t class_offset(int slots, int popcount) {
  std::uint64_t offset = 0;
  for (int k = 0; k < popcount; ++k) offset += kBinomial[slots][k];
  return offset;
}

PseClass to_class_checked(PseCode code, const PseConfig& cfg, std::size_t frame, bool has_frame) {
  if (cfg.slots < 64 && (code >> cfg.slots) != 0) {
    throw OutOfRangeError("PSE code " + std::to_string(code) + " needs more than " +
                          std::to_string(cfg.slots) + " slots");
  }
  const int active = std::popcount(code);
  if (active > cfg.max_active) {
    if (has_frame) throw OverlapExceededError(frame, active, cfg.max_active);
    throw OverlapExceededError(active, cfg.max_active);
  }
  // Colex rank of the subset among all subsets of the same size: ascending
  // integer order of codes with equal popcount is exactly colex order.
  std::uint64_t rank = 0;
  int i = 1;
  for (PseCode rest = code; rest != 0; rest &= rest - 1, ++i) {
    rank += kBinomial[std::countr_zero(rest)][i];
  }
  return class_offset(cfg.slots, active) + rank;
}

}  // namespace

std::uint64_t binomial(int n, int k) {
  if (n < 0 || n > 64 || k < 0) throw ConfigError("binomial arguments out of range");
  if (k > n) return 0;
  // Multiplicative form; every partial product C(n-k+i, i) is an integer.
  unsigned __int128 result = 1;
  for (int i = 1; i <= k; ++i) {
    result = result * static_cast<unsigned>(n - k + i) / static_cast<unsigned>(i);
  }
  return static_cast<std::uint64_t>(result);
}

std::uint64_t num_classes(int n, int k) {
  if (n < 1 || n > kMaxSlots) throw ConfigError("slot count must be in [1, 63]");
  if (k < 1 || k > n) {
    throw ConfigError("max active speakers K=" + std::to_string(k) + " must be in [1, N=" +
                      std::to_string(n) + "]");
  }
  std::uint64_t total = 0;
  for (int j = 0; j <= k; ++j) total += binomial(n, j);
  return total;
}

PseConfig PseConfig::make(int slots, int max_active) {
  PseConfig cfg;
  cfg.classes = num_classes(slots, max_active);
  cfg.slots = slots;
  cfg.max_active = max_active;
  return cfg;
}

ActivityMatrix::ActivityMatrix(std::size_t frames, int slots)
    : frames_(frames), slots_(slots), data_(frames * static_cast<std::size_t>(slots), 0) {
  if (slots < 1) throw ShapeError("activity matrix needs at least one slot");
}

int ActivityMatrix::active_count(std::size_t t) const {
  int count = 0;
  for (auto v : row(t)) count += v != 0;
  return count;
}

PseCode encode_pse(std::span<const std::uint8_t> row) {
  if (row.size() > 64) throw ShapeError("PSE rows are limited to 64 slots");
  PseCode code = 0;
  for (std::size_t n = 0; n < row.size(); ++n) {
    if (row[n] != 0) code |= PseCode{1} << n;
  }
  return code;
}

std::vector<std::uint8_t> decode_pse(PseCode code, int slots) {
  if (slots < 1 || slots > 64) throw ShapeError("slot count must be in [1, 64]");
  if (slots < 64 && (code >> slots) != 0) {
    throw OutOfRangeError("PSE code " + std::to_string(code) + " out of range for N=" +
                          std::to_string(slots));
  }
  std::vector<std::uint8_t> row(static_cast<std::size_t>(slots), 0);
  for (int n = 0; n < slots; ++n) row[n] = (code >> n) & 1U;
  return row;
}

PseClass pse_to_class(PseCode code, const PseConfig& cfg) {
  return to_class_checked(code, cfg, 0, false);
}

PseCode class_to_pse(PseClass cls, const PseConfig& cfg) {
  if (cls >= cfg.classes) {
    throw OutOfRangeError("class " + std::to_string(cls) + " out of range, C=" +
                          std::to_string(cfg.classes));
  }
  int active = 0;
  std::uint64_t offset = 0;
  while (offset + kBinomial[cfg.slots][active] <= cls) {
    offset += kBinomial[cfg.slots][active];
    ++active;
  }
  std::uint64_t rank = cls - offset;
  PseCode code = 0;
  int upper = cfg.slots - 1;
  for (int i = active; i >= 1; --i) {
    int c = upper;
    while (kBinomial[c][i] > rank) --c;
    code |= PseCode{1} << c;
    rank -= kBinomial[c][i];
    upper = c - 1;
  }
  return code;
}

PseLabelSeq encode_sequence(const ActivityMatrix& acts, const PseConfig& cfg) {
  if (acts.slots() != cfg.slots) {
    throw ShapeError("activity matrix has " + std::to_string(acts.slots()) +
                     " slots, codec expects " + std::to_string(cfg.slots));
  }
  PseLabelSeq labels(acts.frames());
  for (std::size_t t = 0; t < acts.frames(); ++t) {
    labels[t] = to_class_checked(encode_pse(acts.row(t)), cfg, t, true);
  }
  return labels;
}

ActivityMatrix decode_sequence(const PseLabelSeq& labels, const PseConfig& cfg) {
  ActivityMatrix acts(labels.size(), cfg.slots);
  for (std::size_t t = 0; t < labels.size(); ++t) {
    const PseCode code = class_to_pse(labels[t], cfg);
    for (int n = 0; n < cfg.slots; ++n) acts.set(t, n, (code >> n) & 1U);
  }
  return acts;
}

void write_label_file(std::ostream& os, const PseLabelSeq& labels, const PseConfig& cfg) {
  os << "#pse N=" << cfg.slots << " K=" << cfg.max_active << " C=" << cfg.classes << '\n';
  for (auto label : labels) os << label << '\n';
}

LabelFile read_label_file(std::istream& is) {
  std::string line;
  if (!std::getline(is, line)) throw ParseError("missing #pse header", 1);
  int n = 0;
  int k = 0;
  unsigned long long c = 0;
  if (std::sscanf(line.c_str(), "#pse N=%d K=%d C=%llu", &n, &k, &c) != 3) {
    throw ParseError("malformed #pse header", 1);
  }
  LabelFile file;
  try {
    file.config = PseConfig::make(n, k);
  } catch (const ConfigError& e) {
    throw ParseError(e.what(), 1);
  }
  if (file.config.classes != c) throw ParseError("header C disagrees with N and K", 1);
  std::size_t line_no = 1;
  while (std::getline(is, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::istringstream fields(line);
    unsigned long long label = 0;
    std::string extra;
    if (!(fields >> label) || (fields >> extra)) throw ParseError("expected a class index", line_no);
    if (label >= c) throw ParseError("class index out of range", line_no);
    file.labels.push_back(label);
  }
  return file;
}

}  // namespace sond
