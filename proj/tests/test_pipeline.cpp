#include <gtest/gtest.h>

#include <algorithm>
#include <random>

#include "sond/pipeline.hpp"
#include "sond/simulate.hpp"
#include "tiny_model.hpp"

using namespace sond;
using sond::testing::random_matrix;

namespace {

ActivityMatrix random_activity(std::size_t frames, int slots, double p, std::mt19937_64& rng) {
  ActivityMatrix a(frames, slots);
  std::bernoulli_distribution on(p);
  for (std::size_t t = 0; t < frames; ++t) {
    for (int n = 0; n < slots; ++n) a.set(t, n, on(rng));
  }
  return a;
}

std::vector<Turn> sorted_turns(Timeline t) {
  std::sort(t.turns.begin(), t.turns.end(), [](const Turn& a, const Turn& b) {
    return std::tie(a.speaker, a.start) < std::tie(b.speaker, b.start);
  });
  return t.turns;
}

}  // namespace

TEST(PlanSegments, WindowCountsAndTail) {
  const SegmentPlan exact = plan_segments({{0.0, 24.0}});
  EXPECT_EQ(exact.segments, (std::vector<FrameRange>{{0, 1600}, {400, 2000}, {800, 2400}}));
  const SegmentPlan tail = plan_segments({{0.0, 26.0}});
  ASSERT_EQ(tail.segments.size(), 4u);
  EXPECT_EQ(tail.segments.back(), (FrameRange{1200, 2600}));
  const SegmentPlan short_region = plan_segments({{1.0, 3.0}, {5.0, 5.5}});
  EXPECT_EQ(short_region.segments, (std::vector<FrameRange>{{100, 300}, {500, 550}}));
  ASSERT_FALSE(short_region.chunks.empty());
  EXPECT_EQ(short_region.chunks.front(), (FrameRange{100, 228}));
  EXPECT_EQ(short_region.chunks.back(), (FrameRange{500, 550}));
  for (const auto& c : short_region.chunks) EXPECT_LE(c.size(), 128u);
}

TEST(PlanWindows, CoverEveryFrame) {
  for (std::size_t len : {1u, 5u, 16u, 17u, 100u, 333u}) {
    const auto w = plan_windows({10, 10 + len}, 16, 4);
    std::vector<int> cover(len, 0);
    for (const auto& r : w) {
      EXPECT_LE(r.size(), 16u);
      for (std::size_t t = r.begin; t < r.end; ++t) ++cover[t - 10];
    }
    EXPECT_TRUE(std::all_of(cover.begin(), cover.end(), [](int c) { return c > 0; }));
  }
  EXPECT_THROW(plan_windows({0, 10}, 0, 1), ConfigError);
  EXPECT_TRUE(plan_windows({5, 5}, 4, 2).empty());
}

TEST(EmbedChunks, MeanOfFrames) {
  std::mt19937_64 rng(1);
  const Matrix x = random_matrix(20, 3, rng);
  std::size_t skipped = 0;
  const Matrix e = embed_chunks(x, {{0, 4}, {18, 30}, {25, 30}}, &skipped);
  ASSERT_EQ(e.rows(), 2);
  EXPECT_EQ(skipped, 1u);
  EXPECT_LT((e.row(0) - (x.row(0) + x.row(1) + x.row(2) + x.row(3)) / 4.0).cwiseAbs().maxCoeff(), 1e-12);
  EXPECT_LT((e.row(1) - (x.row(18) + x.row(19)) / 2.0).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(MedianWindow, NearestOdd) {
  EXPECT_EQ(median_window_frames(1.28), 127);
  EXPECT_EQ(median_window_frames(0.05), 5);
  EXPECT_EQ(median_window_frames(0.04), 3);
  EXPECT_EQ(median_window_frames(0.11), 11);
  EXPECT_EQ(median_window_frames(0.0), 1);
}

TEST(Smooth, MatchesMajorityOracle) {
  std::mt19937_64 rng(2);
  for (int trial = 0; trial < 10; ++trial) {
    const ActivityMatrix a = random_activity(200, 4, 0.45, rng);
    Matrix marg = random_matrix(200, 4, rng).cwiseAbs();
    const std::vector<FrameRange> ranges{{5, 90}, {120, 200}};
    const int window = 7, k = 2;
    const ActivityMatrix s = smooth(a, window, ranges, marg, k);
    for (std::size_t t = 0; t < 200; ++t) {
      const FrameRange* in = nullptr;
      for (const auto& r : ranges) {
        if (t >= r.begin && t < r.end) in = &r;
      }
      std::vector<int> voted;
      for (int n = 0; n < 4; ++n) {
        if (in == nullptr) continue;
        const std::size_t lo = std::max<std::size_t>(in->begin, t >= 3 ? t - 3 : 0);
        const std::size_t hi = std::min<std::size_t>(in->end, t + 4);
        int ones = 0;
        for (std::size_t u = lo; u < hi; ++u) ones += a.at(u, n);
        if (2 * ones > static_cast<int>(hi - lo)) voted.push_back(n);
      }
      std::sort(voted.begin(), voted.end(), [&](int x, int y) {
        return marg(static_cast<Eigen::Index>(t), x) > marg(static_cast<Eigen::Index>(t), y);
      });
      if (voted.size() > static_cast<std::size_t>(k)) voted.resize(static_cast<std::size_t>(k));
      for (int n = 0; n < 4; ++n) {
        const bool expect = std::find(voted.begin(), voted.end(), n) != voted.end();
        ASSERT_EQ(s.at(t, n), expect) << "frame " << t << " slot " << n;
      }
    }
  }
}

TEST(Marginals, PowerSetSumsClassesContainingSlot) {
  ModelConfig cfg = sond::testing::tiny_config();
  const PseConfig pse = PseConfig::make(cfg.slots, cfg.max_active);
  std::mt19937_64 rng(3);
  Matrix post = random_matrix(5, static_cast<int>(pse.classes), rng);
  softmax_rows(post);
  const Matrix m = speaker_marginals(post, cfg);
  for (Eigen::Index t = 0; t < 5; ++t) {
    for (int n = 0; n < cfg.slots; ++n) {
      double sum = 0.0;
      for (PseClass c = 0; c < pse.classes; ++c) {
        if ((class_to_pse(c, pse) >> n) & 1U) sum += post(t, static_cast<Eigen::Index>(c));
      }
      EXPECT_NEAR(m(t, n), sum, 1e-12);
    }
  }
}

TEST(Stitch, MatchesFrameGridOracle) {
  ModelConfig cfg = sond::testing::tiny_config();
  const PseConfig pse = PseConfig::make(cfg.slots, cfg.max_active);
  const auto width = static_cast<int>(pse.classes);
  std::mt19937_64 rng(4);
  const std::size_t frames = 120;
  std::vector<SegmentResult> segs;
  for (FrameRange r : {FrameRange{0, 50}, FrameRange{30, 80}, FrameRange{100, 120}}) {
    SegmentResult s;
    s.range = r;
    // Peaked rows so argmax runs are long enough to survive the turn filter.
    s.posteriors = Matrix::Constant(static_cast<int>(r.size()), width, 0.01);
    int cls = 0;
    for (Eigen::Index t = 0; t < s.posteriors.rows(); ++t) {
      if (t % 6 == 0) cls = static_cast<int>(rng() % pse.classes);
      s.posteriors(t, cls) += 1.0 + 0.1 * std::uniform_real_distribution<double>(0, 1)(rng);
    }
    segs.push_back(s);
  }
  std::vector<int> coverage;
  const Matrix avg = average_posteriors(segs, frames, &coverage);
  ActivityMatrix oracle(frames, cfg.slots);
  for (std::size_t t = 0; t < frames; ++t) {
    Matrix sum = Matrix::Zero(1, width);
    int count = 0;
    for (const auto& s : segs) {
      if (t >= s.range.begin && t < s.range.end) {
        sum += s.posteriors.row(static_cast<Eigen::Index>(t - s.range.begin));
        ++count;
      }
    }
    EXPECT_EQ(coverage[t], count);
    if (count == 0) {
      EXPECT_TRUE(avg.row(static_cast<Eigen::Index>(t)).isZero(0.0));
      continue;
    }
    sum /= count;
    EXPECT_LT((avg.row(static_cast<Eigen::Index>(t)) - sum).cwiseAbs().maxCoeff(), 1e-12);
    Eigen::Index best = 0;
    sum.row(0).maxCoeff(&best);
    const PseCode code = class_to_pse(static_cast<PseClass>(best), pse);
    for (int n = 0; n < cfg.slots; ++n) oracle.set(t, n, (code >> n) & 1U);
  }
  Timeline expected;
  for (int n = 0; n < cfg.slots; ++n) {
    std::size_t t = 0;
    while (t < frames) {
      if (!oracle.at(t, n)) {
        ++t;
        continue;
      }
      std::size_t e = t;
      while (e < frames && oracle.at(e, n)) ++e;
      if (e - t >= 3) expected.turns.push_back({slot_name(n), t * kFrameSeconds, e * kFrameSeconds});
      t = e;
    }
  }
  const auto got = sorted_turns(stitch(segs, frames, cfg, 3));
  const auto want = sorted_turns(expected);
  ASSERT_EQ(got.size(), want.size());
  for (std::size_t i = 0; i < got.size(); ++i) {
    EXPECT_EQ(got[i].speaker, want[i].speaker);
    EXPECT_NEAR(got[i].start, want[i].start, 1e-9);
    EXPECT_NEAR(got[i].end, want[i].end, 1e-9);
  }
}

TEST(RefineProfiles, SingleSpeakerMeans) {
  Matrix x(5, 2);
  x << 1, 1, 3, 3, 10, 10, 5, 7, 0, 0;
  ActivityMatrix a(5, 3);
  a.set(0, 0, true);
  a.set(1, 0, true);
  a.set(2, 0, true);
  a.set(2, 1, true);
  a.set(3, 1, true);
  const ProfileSet p = refine_profiles(x, a);
  EXPECT_EQ(p.valid, (std::vector<bool>{true, true, false}));
  EXPECT_EQ(p.vectors.row(0), (RowVector(2) << 2, 2).finished());
  EXPECT_EQ(p.vectors.row(1), (RowVector(2) << 5, 7).finished());
  EXPECT_TRUE(p.vectors.row(2).isZero(0.0));
}

TEST(RefineProfiles, CarryOverFillsOnlyEmptySlots) {
  ProfileSet refined = ProfileSet::zeros(3, 2);
  refined.vectors.row(0) << 1, 2;
  refined.valid[0] = true;
  ProfileSet previous = ProfileSet::zeros(3, 2);
  previous.vectors << 9, 9, 4, 5, 0, 0;
  previous.valid = {true, true, false};
  EXPECT_EQ(carry_over_profiles(refined, previous), 1);
  EXPECT_EQ(refined.valid, (std::vector<bool>{true, true, false}));
  EXPECT_EQ(refined.vectors.row(0), (RowVector(2) << 1, 2).finished());
  EXPECT_EQ(refined.vectors.row(1), (RowVector(2) << 4, 5).finished());
  EXPECT_TRUE(refined.vectors.row(2).isZero(0.0));
  ProfileSet narrow = ProfileSet::zeros(3, 1);
  EXPECT_THROW(carry_over_profiles(narrow, previous), ShapeError);
}

TEST(RunPipeline, DeterministicAndWellFormed) {
  ModelConfig cfg = sond::testing::tiny_config();
  cfg.profile_dim = cfg.feature_dim;
  const Params params = sond::testing::jittered_params(cfg, 5);
  SimConfig sim;
  sim.feature_dim = cfg.feature_dim;
  sim.radius = 3.0;
  sim.min_separation = 2.0;
  const auto bank = make_speaker_bank(6, sim.feature_dim, sim.radius, sim.sigma, sim.min_separation, 3);
  const Recording rec = simulate_recording(sim, bank, 2, 30.0, 11);
  PipelineConfig pc;
  pc.iterations = 2;
  const PipelineResult a = run_pipeline(rec.features, rec.vad, params, cfg, pc);
  const PipelineResult b = run_pipeline(rec.features, rec.vad, params, cfg, pc);
  EXPECT_EQ(a.iterations.size(), 2u);
  EXPECT_EQ(sorted_turns(a.timeline), sorted_turns(b.timeline));
  EXPECT_EQ(a.activity, b.activity);
  std::vector<bool> voiced(a.activity.frames(), false);
  for (const auto& iv : rec.vad) {
    const FrameRange r = to_frames(iv);
    for (std::size_t t = r.begin; t < r.end; ++t) voiced[t] = true;
  }
  for (std::size_t t = 0; t < a.activity.frames(); ++t) {
    EXPECT_LE(a.activity.active_count(t), cfg.max_active);
    if (!voiced[t]) EXPECT_EQ(a.activity.active_count(t), 0) << t;
  }
  for (const auto& turn : a.timeline.turns) EXPECT_GE(turn.end - turn.start, 2 * kFrameSeconds - 1e-9);

  ModelConfig mismatch = cfg;
  mismatch.profile_dim = cfg.feature_dim + 1;
  EXPECT_THROW(run_pipeline(rec.features, rec.vad, init_params(mismatch, 1), mismatch, pc), ConfigError);
}

TEST(PipelineConfig, KeyValueRoundTrip) {
  PipelineConfig c;
  c.iterations = 5;
  c.median_window_s = 0.5;
  const PipelineConfig back = PipelineConfig::from_kv(c.to_kv());
  EXPECT_EQ(back.iterations, 5);
  EXPECT_DOUBLE_EQ(back.median_window_s, 0.5);
  c.iterations = 0;
  EXPECT_THROW(c.validate(), ConfigError);
  EXPECT_EQ(slot_name(3), "S03");
}
