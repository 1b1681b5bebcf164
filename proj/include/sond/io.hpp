#pragma once

// Text (and binary feature) formats exchanged through the CLI.

#include <iosfwd>
#include <string>
#include <vector>

#include "sond/eval.hpp"
#include "sond/model.hpp"

namespace sond {

/// `#feat T=<t> D=<d>` then T rows of D decimals, or with `binary` the same
/// header line followed by T*D little-endian doubles.
void write_features(std::ostream& os, const Matrix& features, bool binary = false);
Matrix read_features(std::istream& is, bool binary = false);

/// One `start_s end_s` pair per line; '#' starts a comment.
void write_vad(std::ostream& os, const std::vector<Interval>& vad);
std::vector<Interval> read_vad(std::istream& is);

/// `#profiles N=<n> dim=<p>` then one `valid v1 .. vp` line per slot.
void write_profiles(std::ostream& os, const ProfileSet& profiles);
ProfileSet read_profiles(std::istream& is);

struct ChunkEmbeddings {
  std::vector<std::string> ids;
  std::vector<Interval> spans;
  Matrix vectors;  // m x P
};

/// `#emb m=<m> dim=<p>` then `chunk_id start_s end_s v1 .. vp` per chunk.
void write_embeddings(std::ostream& os, const ChunkEmbeddings& emb);
ChunkEmbeddings read_embeddings(std::istream& is);

struct ManifestEntry {
  std::string id;
  std::string features;
  std::string labels;
  std::string profiles;
};

/// Tab-separated `id  features  labels  profiles`, paths relative to the manifest.
void write_manifest(std::ostream& os, const std::vector<ManifestEntry>& entries);
std::vector<ManifestEntry> read_manifest(std::istream& is);

std::string read_text_file(const std::string& path);
void write_text_file(const std::string& path, const std::string& text);

}  // namespace sond
