#include "sond/eval.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <limits>
#include <set>
#include <sstream>

namespace sond {
namespace {

double round_ms(double s) { return std::round(s * 1000.0) / 1000.0; }

std::vector<Interval> merge_intervals(std::vector<Interval> v) {
  std::sort(v.begin(), v.end(),
            [](const Interval& a, const Interval& b) { return a.start < b.start; });
  std::vector<Interval> out;
  for (const Interval& iv : v) {
    if (iv.end <= iv.start) continue;
    if (!out.empty() && iv.start <= out.back().end) {
      out.back().end = std::max(out.back().end, iv.end);
    } else {
      out.push_back(iv);
    }
  }
  return out;
}

// Per-speaker merged intervals, speakers in sorted order.
struct SpeakerTracks {
  std::vector<std::string> names;
  std::vector<std::vector<Interval>> tracks;
};

SpeakerTracks tracks_of(const Timeline& t) {
  SpeakerTracks out;
  out.names = t.speakers();
  out.tracks.resize(out.names.size());
  for (const Turn& turn : t.turns) {
    const auto it = std::lower_bound(out.names.begin(), out.names.end(), turn.speaker);
    out.tracks[static_cast<std::size_t>(it - out.names.begin())].push_back({turn.start, turn.end});
  }
  for (auto& tr : out.tracks) tr = merge_intervals(std::move(tr));
  return out;
}

// Walks monotonically increasing query points through sorted disjoint intervals.
class Cursor {
 public:
  explicit Cursor(const std::vector<Interval>& iv) : iv_(&iv) {}
  bool contains(double x) {
    while (pos_ < iv_->size() && (*iv_)[pos_].end <= x) ++pos_;
    return pos_ < iv_->size() && (*iv_)[pos_].start <= x;
  }

 private:
  const std::vector<Interval>* iv_;
  std::size_t pos_ = 0;
};

struct Piece {
  double duration;
  std::vector<int> ref;
  std::vector<int> hyp;
};

double parse_number(const std::string& field, std::size_t line, const char* what) {
  double v = 0.0;
  const char* first = field.data();
  const char* last = first + field.size();
  const auto [ptr, ec] = std::from_chars(first, last, v);
  if (ec != std::errc() || ptr != last || !std::isfinite(v)) {
    throw ParseError(std::string("non-numeric ") + what + " '" + field + "'", line);
  }
  return v;
}

}  // namespace

std::vector<std::string> Timeline::speakers() const {
  std::set<std::string> s;
  for (const Turn& t : turns) s.insert(t.speaker);
  return {s.begin(), s.end()};
}

Timeline merge_turns(const Timeline& timeline) {
  const SpeakerTracks st = tracks_of(timeline);
  Timeline out;
  for (std::size_t i = 0; i < st.names.size(); ++i) {
    for (const Interval& iv : st.tracks[i]) out.turns.push_back({st.names[i], iv.start, iv.end});
  }
  std::sort(out.turns.begin(), out.turns.end(), [](const Turn& a, const Turn& b) {
    return a.start != b.start ? a.start < b.start : a.speaker < b.speaker;
  });
  return out;
}

Timeline activity_to_timeline(const ActivityMatrix& activity, const std::vector<std::string>& names,
                              int min_frames, std::size_t frame_offset) {
  if (names.size() != static_cast<std::size_t>(activity.slots())) {
    throw ShapeError("activity_to_timeline: " + std::to_string(names.size()) + " names for " +
                     std::to_string(activity.slots()) + " slots");
  }
  Timeline out;
  const std::size_t frames = activity.frames();
  for (int n = 0; n < activity.slots(); ++n) {
    std::size_t t = 0;
    while (t < frames) {
      if (!activity.at(t, n)) {
        ++t;
        continue;
      }
      const std::size_t begin = t;
      while (t < frames && activity.at(t, n)) ++t;
      if (t - begin >= static_cast<std::size_t>(std::max(min_frames, 1))) {
        out.turns.push_back({names[static_cast<std::size_t>(n)],
                             static_cast<double>(frame_offset + begin) * kFrameSeconds,
                             static_cast<double>(frame_offset + t) * kFrameSeconds});
      }
    }
  }
  std::sort(out.turns.begin(), out.turns.end(), [](const Turn& a, const Turn& b) {
    return a.start != b.start ? a.start < b.start : a.speaker < b.speaker;
  });
  return out;
}

std::vector<Interval> speech_regions(const Timeline& timeline) {
  std::vector<Interval> all;
  for (const Turn& t : timeline.turns) all.push_back({t.start, t.end});
  return merge_intervals(std::move(all));
}

std::string emit_rttm(const Timeline& timeline, const std::string& file_id) {
  std::vector<Turn> turns = timeline.turns;
  std::stable_sort(turns.begin(), turns.end(), [](const Turn& a, const Turn& b) {
    return a.start != b.start ? a.start < b.start : a.speaker < b.speaker;
  });
  std::string out;
  char buf[64];
  for (const Turn& t : turns) {
    const double start = round_ms(t.start);
    const double dur = round_ms(round_ms(t.end) - start);
    out += "SPEAKER " + file_id + " 1 ";
    std::snprintf(buf, sizeof buf, "%.3f %.3f", start, dur);
    out += buf;
    out += " <NA> <NA> " + t.speaker + " <NA> <NA>\n";
  }
  return out;
}

std::map<std::string, Timeline> parse_rttm_files(const std::string& text) {
  std::map<std::string, Timeline> files;
  std::istringstream in(text);
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    std::istringstream fields(line);
    std::vector<std::string> f;
    for (std::string tok; fields >> tok;) f.push_back(tok);
    if (f.empty() || f[0][0] == ';' || f[0][0] == '#') continue;
    if (f[0] != "SPEAKER") continue;
    if (f.size() < 8) throw ParseError("SPEAKER line needs at least 8 fields", line_no);
    const double start = parse_number(f[3], line_no, "onset");
    const double dur = parse_number(f[4], line_no, "duration");
    if (start < 0.0) throw ParseError("negative onset", line_no);
    if (dur < 0.0) throw ParseError("negative duration", line_no);
    files[f[1]].turns.push_back({f[7], start, start + dur});
  }
  return files;
}

Timeline parse_rttm(const std::string& text) {
  Timeline all;
  for (auto& [_, t] : parse_rttm_files(text)) {
    all.turns.insert(all.turns.end(), t.turns.begin(), t.turns.end());
  }
  return all;
}

std::vector<int> max_weight_assignment(const std::vector<std::vector<double>>& weight) {
  const std::size_t rows = weight.size();
  std::size_t cols = 0;
  for (const auto& r : weight) cols = std::max(cols, r.size());
  const std::size_t n = std::max(rows, cols);
  std::vector<int> result(rows, -1);
  if (n == 0) return result;

  double wmax = 0.0;
  for (const auto& r : weight) {
    for (double w : r) wmax = std::max(wmax, w);
  }
  // Square cost matrix, 1-based, padded entries cost wmax (weight 0).
  std::vector<std::vector<double>> cost(n + 1, std::vector<double>(n + 1, wmax));
  for (std::size_t i = 0; i < rows; ++i) {
    for (std::size_t j = 0; j < weight[i].size(); ++j) cost[i + 1][j + 1] = wmax - weight[i][j];
  }

  const double inf = std::numeric_limits<double>::infinity();
  std::vector<double> u(n + 1, 0.0), v(n + 1, 0.0);
  std::vector<std::size_t> match(n + 1, 0), way(n + 1, 0);
  for (std::size_t i = 1; i <= n; ++i) {
    match[0] = i;
    std::size_t j0 = 0;
    std::vector<double> minv(n + 1, inf);
    std::vector<bool> used(n + 1, false);
    do {
      used[j0] = true;
      const std::size_t i0 = match[j0];
      double delta = inf;
      std::size_t j1 = 0;
      for (std::size_t j = 1; j <= n; ++j) {
        if (used[j]) continue;
        const double cur = cost[i0][j] - u[i0] - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = j0;
        }
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = j;
        }
      }
      for (std::size_t j = 0; j <= n; ++j) {
        if (used[j]) {
          u[match[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (match[j0] != 0);
    do {
      const std::size_t j1 = way[j0];
      match[j0] = match[j1];
      j0 = j1;
    } while (j0 != 0);
  }
  for (std::size_t j = 1; j <= n; ++j) {
    const std::size_t i = match[j];
    if (i >= 1 && i <= rows && j <= weight[i - 1].size()) result[i - 1] = static_cast<int>(j - 1);
  }
  return result;
}

DerResult der(const Timeline& ref, const Timeline& hyp, const DerOptions& options) {
  if (options.collar < 0.0) throw ConfigError("collar must be >= 0");
  const SpeakerTracks rt = tracks_of(ref);
  const SpeakerTracks ht = tracks_of(hyp);

  std::vector<Interval> no_score;
  std::vector<double> cuts;
  for (const auto& track : rt.tracks) {
    for (const Interval& iv : track) {
      cuts.push_back(iv.start);
      cuts.push_back(iv.end);
      if (options.collar > 0.0) {
        for (double b : {iv.start, iv.end}) no_score.push_back({b - options.collar, b + options.collar});
      }
    }
  }
  for (const auto& track : ht.tracks) {
    for (const Interval& iv : track) {
      cuts.push_back(iv.start);
      cuts.push_back(iv.end);
    }
  }
  no_score = merge_intervals(std::move(no_score));
  for (const Interval& iv : no_score) {
    cuts.push_back(iv.start);
    cuts.push_back(iv.end);
  }
  std::sort(cuts.begin(), cuts.end());
  cuts.erase(std::unique(cuts.begin(), cuts.end()), cuts.end());

  std::vector<Cursor> ref_cur, hyp_cur;
  for (const auto& tr : rt.tracks) ref_cur.emplace_back(tr);
  for (const auto& tr : ht.tracks) hyp_cur.emplace_back(tr);
  Cursor skip(no_score);

  std::vector<Piece> pieces;
  std::vector<std::vector<double>> overlap(rt.names.size(), std::vector<double>(ht.names.size(), 0.0));
  for (std::size_t k = 0; k + 1 < cuts.size(); ++k) {
    const double dur = cuts[k + 1] - cuts[k];
    if (dur <= 0.0) continue;
    const double mid = 0.5 * (cuts[k] + cuts[k + 1]);
    Piece p{dur, {}, {}};
    for (std::size_t i = 0; i < ref_cur.size(); ++i) {
      if (ref_cur[i].contains(mid)) p.ref.push_back(static_cast<int>(i));
    }
    for (std::size_t j = 0; j < hyp_cur.size(); ++j) {
      if (hyp_cur[j].contains(mid)) p.hyp.push_back(static_cast<int>(j));
    }
    if (skip.contains(mid) || (p.ref.empty() && p.hyp.empty())) continue;
    for (int i : p.ref) {
      for (int j : p.hyp) overlap[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)] += dur;
    }
    pieces.push_back(std::move(p));
  }

  std::vector<int> map = max_weight_assignment(overlap);
  DerResult r;
  for (std::size_t i = 0; i < map.size(); ++i) {
    if (map[i] >= 0 && overlap[i][static_cast<std::size_t>(map[i])] > 0.0) {
      r.mapping[rt.names[i]] = ht.names[static_cast<std::size_t>(map[i])];
    } else {
      map[i] = -1;
    }
  }

  for (const Piece& p : pieces) {
    const auto n_ref = static_cast<double>(p.ref.size());
    const auto n_hyp = static_cast<double>(p.hyp.size());
    double correct = 0.0;
    for (int i : p.ref) {
      const int j = map[static_cast<std::size_t>(i)];
      if (j >= 0 && std::find(p.hyp.begin(), p.hyp.end(), j) != p.hyp.end()) correct += 1.0;
    }
    r.t_md += p.duration * std::max(0.0, n_ref - n_hyp);
    r.t_fa += p.duration * std::max(0.0, n_hyp - n_ref);
    r.t_sc += p.duration * (std::min(n_ref, n_hyp) - correct);
    if (options.denominator == DerDenominator::RefSpeech) {
      r.t_total += p.duration * n_ref;
    } else if (n_ref > 0.0) {
      r.t_total += p.duration;
    }
  }
  if (r.t_total <= 0.0) throw ScoringError("reference has no scored speech; DER is undefined");
  r.md = 100.0 * r.t_md / r.t_total;
  r.fa = 100.0 * r.t_fa / r.t_total;
  r.sc = 100.0 * r.t_sc / r.t_total;
  r.der = 100.0 * (r.t_md + r.t_fa + r.t_sc) / r.t_total;
  return r;
}

std::string format_der_row(const std::string& file_id, const DerResult& r) {
  char buf[128];
  std::snprintf(buf, sizeof buf, "\t%.2f\t%.2f\t%.2f\t%.2f\t%.3f", r.der, r.md, r.fa, r.sc,
                r.t_total);
  return file_id + buf;
}

}  // namespace sond
