#include <gtest/gtest.h>

#include <algorithm>
#include <bit>
#include <numeric>
#include <random>
#include <sstream>

#include "sond/error.hpp"
#include "sond/pse_codec.hpp"

using namespace sond;

namespace {

// Every code with popcount <= k, sorted by (popcount, code).
std::vector<PseCode> brute_force_classes(int n, int k) {
  std::vector<PseCode> codes;
  for (PseCode c = 0; c < (PseCode{1} << n); ++c) {
    if (std::popcount(c) <= k) codes.push_back(c);
  }
  std::stable_sort(codes.begin(), codes.end(), [](PseCode a, PseCode b) {
    return std::popcount(a) < std::popcount(b);
  });
  return codes;
}

std::vector<std::uint8_t> row_of(std::initializer_list<int> bits) {
  std::vector<std::uint8_t> r;
  for (int b : bits) r.push_back(static_cast<std::uint8_t>(b));
  return r;
}

}  // namespace

TEST(EncodePse, Examples) {
  EXPECT_EQ(encode_pse(row_of({0, 0, 0})), 0u);
  EXPECT_EQ(encode_pse(row_of({1, 0, 1})), 5u);
  std::vector<std::uint8_t> r(16, 0);
  r[0] = r[1] = 1;
  EXPECT_EQ(encode_pse(r), 3u);
}

TEST(DecodePse, Examples) {
  EXPECT_EQ(decode_pse(0, 4), row_of({0, 0, 0, 0}));
  EXPECT_EQ(decode_pse(5, 3), row_of({1, 0, 1}));
  EXPECT_EQ(decode_pse((1u << 16) - 1, 16), std::vector<std::uint8_t>(16, 1));
  EXPECT_THROW(decode_pse(8, 3), OutOfRangeError);
}

TEST(NumClasses, TableValues) {
  EXPECT_EQ(num_classes(16, 1), 17u);
  EXPECT_EQ(num_classes(16, 2), 137u);
  EXPECT_EQ(num_classes(16, 3), 697u);
  EXPECT_EQ(num_classes(16, 4), 2517u);
  EXPECT_EQ(num_classes(3, 3), 8u);
}

TEST(NumClasses, RejectsInvalidConfigs) {
  EXPECT_THROW(num_classes(3, 4), ConfigError);
  EXPECT_THROW(num_classes(3, 0), ConfigError);
  EXPECT_THROW(PseConfig::make(4, 5), ConfigError);
}

TEST(NumClasses, MonotoneInKAndFullPowerSet) {
  for (int n = 1; n <= 20; ++n) {
    for (int k = 1; k < n; ++k) EXPECT_LT(num_classes(n, k), num_classes(n, k + 1));
    EXPECT_EQ(num_classes(n, n), std::uint64_t{1} << n);
  }
}

TEST(NumClasses, MatchesBruteForceCardinality) {
  for (int n = 1; n <= 16; ++n) {
    for (int k = 1; k <= std::min(n, 4); ++k) {
      std::uint64_t count = 0;
      for (PseCode c = 0; c < (PseCode{1} << n); ++c) count += std::popcount(c) <= k;
      EXPECT_EQ(num_classes(n, k), count) << n << "," << k;
    }
  }
}

TEST(NumClasses, LargeNIsExact) {
  EXPECT_EQ(num_classes(63, 63), std::uint64_t{1} << 63);
  EXPECT_EQ(binomial(60, 30), 118264581564861424ULL);
}

TEST(PseClass, BruteForceExamples) {
  const PseConfig cfg = PseConfig::make(16, 4);
  const auto oracle = brute_force_classes(16, 4);
  EXPECT_EQ(pse_to_class(0, cfg), 0u);
  EXPECT_EQ(pse_to_class(4, cfg), 3u);
  EXPECT_EQ(pse_to_class(3, cfg), 17u);
  EXPECT_EQ(class_to_pse(1, cfg), 1u);
  EXPECT_EQ(class_to_pse(cfg.classes - 1, cfg), oracle.back());
  EXPECT_EQ(oracle.size(), cfg.classes);
}

TEST(PseClass, ExhaustiveAgainstOracle) {
  for (int n = 1; n <= 10; ++n) {
    for (int k = 1; k <= n; ++k) {
      const PseConfig cfg = PseConfig::make(n, k);
      const auto oracle = brute_force_classes(n, k);
      ASSERT_EQ(oracle.size(), cfg.classes);
      for (PseClass c = 0; c < cfg.classes; ++c) {
        ASSERT_EQ(class_to_pse(c, cfg), oracle[c]) << n << "," << k << "," << c;
        ASSERT_EQ(pse_to_class(oracle[c], cfg), c);
      }
    }
  }
}

TEST(PseClass, Errors) {
  const PseConfig cfg = PseConfig::make(16, 4);
  EXPECT_THROW(class_to_pse(cfg.classes, cfg), OutOfRangeError);
  try {
    pse_to_class(0b11111, cfg);
    FAIL();
  } catch (const OverlapExceededError& e) {
    EXPECT_EQ(e.active(), 5);
  }
}

TEST(Sequence, Examples) {
  const PseConfig cfg = PseConfig::make(16, 4);
  EXPECT_EQ(encode_sequence(ActivityMatrix(10, 16), cfg), PseLabelSeq(10, 0));
  EXPECT_EQ(decode_sequence(PseLabelSeq(10, 0), cfg), ActivityMatrix(10, 16));

  const PseConfig three = PseConfig::make(3, 3);
  ActivityMatrix one(1, 3);
  one.set(0, 0, true);
  one.set(0, 2, true);
  EXPECT_EQ(encode_sequence(one, three)[0], pse_to_class(5, three));

  const PseLabelSeq top{pse_to_class(PseCode{1} << 15, cfg)};
  const ActivityMatrix a = decode_sequence(top, cfg);
  for (int n = 0; n < 16; ++n) EXPECT_EQ(a.at(0, n), n == 15);
}

TEST(Sequence, OverlapExceededReportsFrame) {
  const PseConfig cfg = PseConfig::make(16, 4);
  ActivityMatrix a(6, 16);
  for (int n = 0; n < 5; ++n) a.set(4, n, true);
  try {
    encode_sequence(a, cfg);
    FAIL();
  } catch (const OverlapExceededError& e) {
    EXPECT_EQ(e.frame(), 4u);
    EXPECT_EQ(e.active(), 5);
  }
  EXPECT_THROW(decode_sequence({cfg.classes}, cfg), OutOfRangeError);
}

TEST(Sequence, RandomRoundTrip) {
  const PseConfig cfg = PseConfig::make(8, 3);
  std::mt19937_64 rng(42);
  for (int trial = 0; trial < 20; ++trial) {
    ActivityMatrix a(100, 8);
    for (std::size_t t = 0; t < 100; ++t) {
      std::vector<int> slots(8);
      std::iota(slots.begin(), slots.end(), 0);
      std::shuffle(slots.begin(), slots.end(), rng);
      const int k = std::uniform_int_distribution<int>(0, 3)(rng);
      for (int i = 0; i < k; ++i) a.set(t, slots[static_cast<std::size_t>(i)], true);
    }
    EXPECT_EQ(decode_sequence(encode_sequence(a, cfg), cfg), a);
  }
}

TEST(Sequence, SlotPermutationEquivariance) {
  const PseConfig cfg = PseConfig::make(6, 3);
  std::mt19937_64 rng(7);
  ActivityMatrix a(50, 6);
  for (std::size_t t = 0; t < 50; ++t) {
    for (int n = 0; n < 3; ++n) a.set(t, n, std::bernoulli_distribution(0.5)(rng));
  }
  std::vector<int> perm{4, 2, 0, 5, 1, 3};
  ActivityMatrix permuted(50, 6);
  for (std::size_t t = 0; t < 50; ++t) {
    for (int n = 0; n < 6; ++n) permuted.set(t, perm[static_cast<std::size_t>(n)], a.at(t, n));
  }
  const ActivityMatrix back = decode_sequence(encode_sequence(permuted, cfg), cfg);
  ActivityMatrix restored(50, 6);
  for (std::size_t t = 0; t < 50; ++t) {
    for (int n = 0; n < 6; ++n) restored.set(t, n, back.at(t, perm[static_cast<std::size_t>(n)]));
  }
  EXPECT_EQ(restored, a);
}

TEST(LabelFile, RoundTripAndHeader) {
  const PseConfig cfg = PseConfig::make(16, 4);
  const PseLabelSeq labels{0, 3, 17, 2516, 1};
  std::stringstream ss;
  write_label_file(ss, labels, cfg);
  EXPECT_EQ(ss.str().substr(0, ss.str().find('\n')), "#pse N=16 K=4 C=2517");
  const LabelFile back = read_label_file(ss);
  EXPECT_EQ(back.labels, labels);
  EXPECT_EQ(back.config.classes, 2517u);
}

TEST(LabelFile, RejectsBadInput) {
  std::stringstream bad_header("#pse N=16 K=4 C=99\n0\n");
  EXPECT_THROW(read_label_file(bad_header), ParseError);
  std::stringstream out_of_range("#pse N=3 K=1 C=4\n4\n");
  EXPECT_THROW(read_label_file(out_of_range), ParseError);
}
