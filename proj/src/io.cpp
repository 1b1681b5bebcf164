#include "sond/io.hpp"

#include <bit>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>
#include <sstream>

namespace sond {
namespace {

static_assert(std::endian::native == std::endian::little, "binary features assume a little-endian host");

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::vector<std::string> split(const std::string& line) {
  std::istringstream in(line);
  std::vector<std::string> out;
  for (std::string tok; in >> tok;) out.push_back(tok);
  return out;
}

double to_double(const std::string& s, std::size_t line) {
  double v = 0.0;
  const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || ptr != s.data() + s.size() || !std::isfinite(v)) {
    throw ParseError("expected a finite number, got '" + s + "'", line);
  }
  return v;
}

// Reads the next non-blank line; false at end of input.
bool next_line(std::istream& is, std::string& line, std::size_t& line_no) {
  while (std::getline(is, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") != std::string::npos) return true;
  }
  return false;
}

std::string header_line(std::istream& is, std::size_t& line_no, const char* what) {
  std::string line;
  if (!next_line(is, line, line_no)) throw ParseError(std::string("missing ") + what + " header", 1);
  return line;
}

void read_row(const std::vector<std::string>& f, std::size_t offset, Eigen::Index cols, Matrix& m,
              Eigen::Index row, std::size_t line_no) {
  if (f.size() != offset + static_cast<std::size_t>(cols)) {
    throw ParseError("expected " + std::to_string(offset + static_cast<std::size_t>(cols)) +
                         " fields, got " + std::to_string(f.size()),
                     line_no);
  }
  for (Eigen::Index c = 0; c < cols; ++c) {
    m(row, c) = to_double(f[offset + static_cast<std::size_t>(c)], line_no);
  }
}

}  // namespace

void write_features(std::ostream& os, const Matrix& features, bool binary) {
  os << "#feat T=" << features.rows() << " D=" << features.cols() << '\n';
  if (binary) {
    os.write(reinterpret_cast<const char*>(features.data()),
             static_cast<std::streamsize>(features.size() * sizeof(double)));
    return;
  }
  for (Eigen::Index t = 0; t < features.rows(); ++t) {
    for (Eigen::Index d = 0; d < features.cols(); ++d) {
      if (d > 0) os << ' ';
      os << fmt(features(t, d));
    }
    os << '\n';
  }
}

Matrix read_features(std::istream& is, bool binary) {
  std::size_t line_no = 0;
  const std::string header = header_line(is, line_no, "#feat");
  long frames = -1;
  long dim = -1;
  if (std::sscanf(header.c_str(), "#feat T=%ld D=%ld", &frames, &dim) != 2 || frames < 0 || dim < 1) {
    throw ParseError("malformed feature header '" + header + "'", line_no);
  }
  Matrix m(frames, dim);
  if (binary) {
    is.read(reinterpret_cast<char*>(m.data()), static_cast<std::streamsize>(m.size() * sizeof(double)));
    if (is.gcount() != static_cast<std::streamsize>(m.size() * sizeof(double))) {
      throw ParseError("binary feature payload is truncated", line_no + 1);
    }
    if (!m.allFinite()) throw ParseError("binary features contain non-finite values", line_no + 1);
    return m;
  }
  std::string line;
  for (long t = 0; t < frames; ++t) {
    if (!next_line(is, line, line_no)) {
      throw ParseError("expected " + std::to_string(frames) + " frames, got " + std::to_string(t),
                       line_no);
    }
    read_row(split(line), 0, dim, m, t, line_no);
  }
  return m;
}

void write_vad(std::ostream& os, const std::vector<Interval>& vad) {
  char buf[64];
  for (const Interval& iv : vad) {
    std::snprintf(buf, sizeof buf, "%.3f %.3f\n", iv.start, iv.end);
    os << buf;
  }
}

std::vector<Interval> read_vad(std::istream& is) {
  std::vector<Interval> vad;
  std::string line;
  std::size_t line_no = 0;
  while (next_line(is, line, line_no)) {
    const auto f = split(line);
    if (f[0][0] == '#') continue;
    if (f.size() != 2) throw ParseError("VAD lines hold 'start end'", line_no);
    const Interval iv{to_double(f[0], line_no), to_double(f[1], line_no)};
    if (iv.start < 0.0 || iv.end <= iv.start) throw ParseError("VAD interval must have 0 <= start < end", line_no);
    if (!vad.empty() && iv.start < vad.back().end) {
      throw ParseError("VAD intervals must be sorted and non-overlapping", line_no);
    }
    vad.push_back(iv);
  }
  return vad;
}

void write_profiles(std::ostream& os, const ProfileSet& profiles) {
  os << "#profiles N=" << profiles.slots() << " dim=" << profiles.vectors.cols() << '\n';
  for (int n = 0; n < profiles.slots(); ++n) {
    os << (profiles.valid[static_cast<std::size_t>(n)] ? 1 : 0);
    for (Eigen::Index d = 0; d < profiles.vectors.cols(); ++d) os << ' ' << fmt(profiles.vectors(n, d));
    os << '\n';
  }
}

ProfileSet read_profiles(std::istream& is) {
  std::size_t line_no = 0;
  const std::string header = header_line(is, line_no, "#profiles");
  int slots = 0;
  int dim = 0;
  if (std::sscanf(header.c_str(), "#profiles N=%d dim=%d", &slots, &dim) != 2 || slots < 1 || dim < 1) {
    throw ParseError("malformed profile header '" + header + "'", line_no);
  }
  ProfileSet p = ProfileSet::zeros(slots, dim);
  std::string line;
  for (int n = 0; n < slots; ++n) {
    if (!next_line(is, line, line_no)) throw ParseError("missing profile slot " + std::to_string(n), line_no);
    const auto f = split(line);
    if (f.empty() || (f[0] != "0" && f[0] != "1")) throw ParseError("slot flag must be 0 or 1", line_no);
    read_row(f, 1, dim, p.vectors, n, line_no);
    p.valid[static_cast<std::size_t>(n)] = f[0] == "1";
    if (!p.valid[static_cast<std::size_t>(n)] && !p.vectors.row(n).isZero(0.0)) {
      throw ParseError("invalid profile slot must be all zeros", line_no);
    }
  }
  return p;
}

void write_embeddings(std::ostream& os, const ChunkEmbeddings& emb) {
  os << "#emb m=" << emb.vectors.rows() << " dim=" << emb.vectors.cols() << '\n';
  char buf[64];
  for (Eigen::Index i = 0; i < emb.vectors.rows(); ++i) {
    const auto k = static_cast<std::size_t>(i);
    std::snprintf(buf, sizeof buf, " %.3f %.3f", emb.spans[k].start, emb.spans[k].end);
    os << emb.ids[k] << buf;
    for (Eigen::Index d = 0; d < emb.vectors.cols(); ++d) os << ' ' << fmt(emb.vectors(i, d));
    os << '\n';
  }
}

ChunkEmbeddings read_embeddings(std::istream& is) {
  std::size_t line_no = 0;
  const std::string header = header_line(is, line_no, "#emb");
  long m = -1;
  long dim = -1;
  if (std::sscanf(header.c_str(), "#emb m=%ld dim=%ld", &m, &dim) != 2 || m < 0 || dim < 1) {
    throw ParseError("malformed embedding header '" + header + "'", line_no);
  }
  ChunkEmbeddings e;
  e.vectors.resize(m, dim);
  std::string line;
  for (long i = 0; i < m; ++i) {
    if (!next_line(is, line, line_no)) throw ParseError("missing chunk " + std::to_string(i), line_no);
    const auto f = split(line);
    read_row(f, 3, dim, e.vectors, i, line_no);
    e.ids.push_back(f[0]);
    e.spans.push_back({to_double(f[1], line_no), to_double(f[2], line_no)});
  }
  return e;
}

void write_manifest(std::ostream& os, const std::vector<ManifestEntry>& entries) {
  for (const ManifestEntry& e : entries) {
    os << e.id << '\t' << e.features << '\t' << e.labels << '\t' << e.profiles << '\n';
  }
}

std::vector<ManifestEntry> read_manifest(std::istream& is) {
  std::vector<ManifestEntry> out;
  std::string line;
  std::size_t line_no = 0;
  while (next_line(is, line, line_no)) {
    const auto f = split(line);
    if (f[0][0] == '#') continue;
    if (f.size() != 4) throw ParseError("manifest lines hold id, features, labels, profiles", line_no);
    out.push_back({f[0], f[1], f[2], f[3]});
  }
  return out;
}

std::string read_text_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_text_file(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write " + path);
  out << text;
  if (!out) throw Error("write failed for " + path);
}

}  // namespace sond
