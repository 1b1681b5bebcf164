#include <gtest/gtest.h>

#include <random>
#include <sstream>

#include "sond/io.hpp"
#include "tiny_model.hpp"

using namespace sond;

TEST(Features, TextAndBinaryRoundTrip) {
  std::mt19937_64 rng(1);
  const Matrix x = sond::testing::random_matrix(7, 3, rng);
  for (bool binary : {false, true}) {
    std::stringstream ss;
    write_features(ss, x, binary);
    EXPECT_EQ(ss.str().substr(0, 13), "#feat T=7 D=3");
    EXPECT_EQ(read_features(ss, binary), x);
  }
  std::stringstream short_body("#feat T=2 D=2\n1 2\n3\n");
  EXPECT_THROW(read_features(short_body), ParseError);
  std::stringstream no_header("1 2\n");
  EXPECT_THROW(read_features(no_header), ParseError);
}

TEST(Vad, RoundTripAndValidation) {
  const std::vector<Interval> vad{{0.5, 1.25}, {2.0, 3.0}};
  std::stringstream ss;
  write_vad(ss, vad);
  EXPECT_EQ(read_vad(ss), vad);
  std::stringstream commented("# regions\n0 1\n\n1.5 2\n");
  EXPECT_EQ(read_vad(commented).size(), 2u);
  std::stringstream overlapping("0 2\n1 3\n");
  EXPECT_THROW(read_vad(overlapping), ParseError);
  std::stringstream reversed("2 1\n");
  EXPECT_THROW(read_vad(reversed), ParseError);
}

TEST(Profiles, RoundTripAndInvalidSlots) {
  ProfileSet p = ProfileSet::zeros(3, 2);
  p.vectors.row(0) << 0.25, -1.5;
  p.valid[0] = true;
  std::stringstream ss;
  write_profiles(ss, p);
  const ProfileSet back = read_profiles(ss);
  EXPECT_EQ(back.vectors, p.vectors);
  EXPECT_EQ(back.valid, p.valid);
  std::stringstream bad("#profiles N=1 dim=2\n0 1 0\n");
  EXPECT_THROW(read_profiles(bad), ParseError);
}

TEST(Embeddings, RoundTrip) {
  ChunkEmbeddings e;
  e.ids = {"c0", "c1"};
  e.spans = {{0.0, 1.28}, {0.64, 1.92}};
  e.vectors = Matrix(2, 2);
  e.vectors << 1, 2, 3, 4.5;
  std::stringstream ss;
  write_embeddings(ss, e);
  const ChunkEmbeddings back = read_embeddings(ss);
  EXPECT_EQ(back.ids, e.ids);
  EXPECT_EQ(back.vectors, e.vectors);
  EXPECT_NEAR(back.spans[1].end, 1.92, 1e-9);
}

TEST(Manifest, RoundTrip) {
  const std::vector<ManifestEntry> m{{"a", "a.feat", "a.pse", "a.prof"}, {"b", "b.feat", "b.pse", "b.prof"}};
  std::stringstream ss;
  write_manifest(ss, m);
  const auto back = read_manifest(ss);
  ASSERT_EQ(back.size(), 2u);
  EXPECT_EQ(back[1].labels, "b.pse");
  std::stringstream bad("a\tb\n");
  EXPECT_THROW(read_manifest(bad), ParseError);
}

TEST(TextFile, MissingFileThrows) {
  EXPECT_THROW(read_text_file("/nonexistent/sond/file"), Error);
}
