#include <gtest/gtest.h>

#include <cmath>
#include <cstdio>
#include <random>

#include "sond/model.hpp"
#include "tiny_model.hpp"

using namespace sond;
using sond::testing::jittered_params;
using sond::testing::random_matrix;
using sond::testing::tiny_config;
using sond::testing::tiny_example;

namespace {

Matrix loop_memory_block(const Matrix& z, const Matrix& a, const Matrix& c) {
  const Eigen::Index frames = z.rows();
  Matrix out = Matrix::Zero(frames, z.cols());
  for (Eigen::Index t = 0; t < frames; ++t) {
    for (Eigen::Index d = 0; d < z.cols(); ++d) {
      for (Eigen::Index i = 0; i < a.rows(); ++i) {
        if (t - i >= 0) out(t, d) += a(i, d) * z(t - i, d);
      }
      for (Eigen::Index j = 1; j <= c.rows(); ++j) {
        if (t + j < frames) out(t, d) += c(j - 1, d) * z(t + j, d);
      }
    }
  }
  return out;
}

ProfileSet random_profiles(const ModelConfig& cfg, int valid, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  ProfileSet p = ProfileSet::zeros(cfg.slots, cfg.profile_dim);
  for (int n = 0; n < valid; ++n) {
    p.vectors.row(n) = random_matrix(1, cfg.profile_dim, rng);
    p.valid[static_cast<std::size_t>(n)] = true;
  }
  return p;
}

}  // namespace

TEST(ModelConfig, DefaultsAndValidation) {
  ModelConfig c;
  EXPECT_EQ(c.output_dim(), 2517u);
  EXPECT_NO_THROW(c.validate());
  c.attn_heads = 3;
  EXPECT_THROW(c.validate(), ConfigError);
  ModelConfig ml = ModelConfig::desk_scale();
  ml.head = OutputHead::MultiLabel;
  EXPECT_EQ(ml.output_dim(), 4u);
}

TEST(ModelConfig, KeyValueRoundTrip) {
  ModelConfig c = ModelConfig::desk_scale();
  c.head = OutputHead::MultiLabel;
  c.conv_channels = {8, 16};
  EXPECT_EQ(ModelConfig::from_kv(c.to_kv()), c);
}

TEST(SpeechEncode, ShapeAndZeroInput) {
  ModelConfig cfg = tiny_config();
  cfg.feature_dim = 80;
  const Params p = jittered_params(cfg, 1);
  std::mt19937_64 rng(2);
  EXPECT_EQ(speech_encode(random_matrix(50, 80, rng), p, cfg).rows(), 50);
  const Matrix z = speech_encode(Matrix::Zero(12, 80), p, cfg);
  EXPECT_EQ(z.cols(), cfg.embed_dim);
  EXPECT_THROW(speech_encode(Matrix::Zero(5, 3), p, cfg), ShapeError);
}

TEST(SpeechEncode, LocalityProbe) {
  ModelConfig cfg = tiny_config();
  cfg.conv_channels = {4, 4};
  cfg.pool_window = 4;
  const Params p = jittered_params(cfg, 3);
  std::mt19937_64 rng(4);
  const Matrix x = random_matrix(40, cfg.feature_dim, rng);
  const int probe = 20;
  Matrix y = x;
  y.row(probe).array() += 1.0;
  const Matrix a = speech_encode(x, p, cfg);
  const Matrix b = speech_encode(y, p, cfg);
  const int reach = static_cast<int>(cfg.conv_channels.size()) * (cfg.conv_kernel / 2) + cfg.pool_window / 2;
  bool changed_inside = false;
  for (int t = 0; t < 40; ++t) {
    const bool same = a.row(t) == b.row(t);
    if (std::abs(t - probe) > reach) {
      EXPECT_TRUE(same) << "frame " << t << " outside the receptive field changed";
    } else if (!same) {
      changed_inside = true;
    }
  }
  EXPECT_TRUE(changed_inside);
}

TEST(SpeakerEncode, ShapesAndDeterminism) {
  const ModelConfig cfg = tiny_config();
  const Params p = jittered_params(cfg, 5);
  ProfileSet prof = random_profiles(cfg, 2, 6);
  prof.vectors.row(1) = prof.vectors.row(0);
  const Matrix v = speaker_encode(prof.vectors, p, cfg);
  EXPECT_EQ(v.rows(), cfg.slots);
  EXPECT_EQ(v.cols(), cfg.embed_dim);
  EXPECT_EQ(v.row(0), v.row(1));
  const Matrix zero = speaker_encode(Matrix::Zero(1, cfg.profile_dim), p, cfg);
  EXPECT_EQ(zero.row(0), v.row(2));
  EXPECT_THROW(speaker_encode(Matrix::Zero(2, cfg.profile_dim + 1), p, cfg), ShapeError);
}

TEST(CiScore, CosineContractAndMask) {
  Matrix h(2, 3);
  h << 1, 2, 3, 0, 0, 1;
  Matrix v(2, 3);
  v << 1, 2, 3, 0, 1, 0;
  const ScoreTensor s = ci_score(h, v, {true, false});
  EXPECT_NEAR(s.data(0, 0), 1.0, 1e-12);
  EXPECT_EQ(s.data(1, 0), -1.0);
  EXPECT_EQ(s.data(1, 1), -1.0);
  Matrix scaled = h;
  scaled.row(0) *= 5.0;
  EXPECT_NEAR(ci_score(scaled, v, {true, true}).data(0, 0), s.data(0, 0), 1e-12);
  Matrix orth(1, 3);
  orth << 3, 0, -1;
  EXPECT_NEAR(ci_score(orth, v.topRows(1), {true}).data(0, 0), 0.0, 1e-12);
}

TEST(CdScore, RangeShapeAndSlotEquivariance) {
  const ModelConfig cfg = tiny_config();
  const Params p = jittered_params(cfg, 7);
  std::mt19937_64 rng(8);
  const Matrix h = random_matrix(10, cfg.embed_dim, rng);
  const Matrix v = random_matrix(cfg.slots, cfg.embed_dim, rng);
  const ScoreTensor s = cd_score(h, v, p, cfg);
  EXPECT_EQ(s.data.rows(), cfg.slots);
  EXPECT_EQ(s.data.cols(), 10);
  EXPECT_TRUE((s.data.array() > 0.0).all() && (s.data.array() < 1.0).all());
  Matrix permuted(cfg.slots, cfg.embed_dim);
  const std::vector<int> perm{2, 0, 1};
  for (int n = 0; n < cfg.slots; ++n) permuted.row(perm[static_cast<std::size_t>(n)]) = v.row(n);
  const ScoreTensor sp = cd_score(h, permuted, p, cfg);
  for (int n = 0; n < cfg.slots; ++n) {
    EXPECT_LT((sp.data.row(perm[static_cast<std::size_t>(n)]) - s.data.row(n)).cwiseAbs().maxCoeff(), 1e-12);
  }
}

TEST(CdScore, SinglePositionUsesValuePath) {
  ModelConfig cfg = tiny_config();
  const Params p = jittered_params(cfg, 9);
  std::mt19937_64 rng(10);
  const Matrix h = random_matrix(1, cfg.embed_dim, rng);
  const Matrix v = random_matrix(1, cfg.embed_dim, rng);
  cfg.slots = 1;
  cfg.max_active = 1;
  // Attention over one position is exactly its value projection.
  Matrix in(1, 2 * cfg.embed_dim);
  in << h, v;
  const auto bias = [&](const std::string& n) { return p.row(n + ".b"); };
  Matrix z = affine(in, p.at("cd.in.w"), bias("cd.in"));
  const Matrix value = affine(z, p.at("cd.0.v.w"), bias("cd.0.v"));
  z += affine(value, p.at("cd.0.o.w"), bias("cd.0.o"));
  const Matrix hidden = affine(z, p.at("cd.0.ff1.w"), bias("cd.0.ff1")).cwiseMax(0.0);
  z += affine(hidden, p.at("cd.0.ff2.w"), bias("cd.0.ff2"));
  const double logit = affine(z, p.at("cd.out.w"), bias("cd.out"))(0, 0);
  const double expected = 1.0 / (1.0 + std::exp(-logit));
  EXPECT_NEAR(cd_score(h, v, p, cfg).data(0, 0), expected, 1e-12);
}

TEST(MemoryBlock, IdentityDelayAndLoopOracle) {
  std::mt19937_64 rng(11);
  const Matrix z = random_matrix(9, 4, rng);
  Matrix a = Matrix::Zero(3, 4);
  Matrix c = Matrix::Zero(2, 4);
  a.row(0).setOnes();
  EXPECT_EQ(memory_block(z, a, c), z);
  a.setZero();
  a.row(1).setOnes();
  const Matrix delayed = memory_block(z, a, c);
  EXPECT_TRUE(delayed.row(0).isZero(0.0));
  EXPECT_EQ(delayed.bottomRows(8), z.topRows(8));
  const Matrix ra = random_matrix(4, 4, rng);
  const Matrix rc = random_matrix(3, 4, rng);
  EXPECT_LT((memory_block(z, ra, rc) - loop_memory_block(z, ra, rc)).cwiseAbs().maxCoeff(), 1e-12);
  const Matrix short_seq = random_matrix(2, 4, rng);
  EXPECT_LT((memory_block(short_seq, ra, rc) - loop_memory_block(short_seq, ra, rc)).cwiseAbs().maxCoeff(),
            1e-12);
}

TEST(MemoryBlock, BackwardMatchesFiniteDifferences) {
  std::mt19937_64 rng(12);
  const Matrix z = random_matrix(6, 3, rng);
  const Matrix a = random_matrix(3, 3, rng);
  const Matrix c = random_matrix(2, 3, rng);
  const Matrix w = random_matrix(6, 3, rng);
  Matrix ga = Matrix::Zero(3, 3), gc = Matrix::Zero(2, 3);
  const Matrix dz = memory_block_backward(z, a, c, w, ga, gc);
  const auto loss = [&](std::span<const double> p) {
    return (memory_block(Eigen::Map<const Matrix>(p.data(), 6, 3), a, c).array() * w.array()).sum();
  };
  EXPECT_TRUE(grad_check(loss, {z.data(), 18}, {dz.data(), 18}, 1e-5, 1e-6).passed);
  const auto loss_a = [&](std::span<const double> p) {
    return (memory_block(z, Eigen::Map<const Matrix>(p.data(), 3, 3), c).array() * w.array()).sum();
  };
  EXPECT_TRUE(grad_check(loss_a, {a.data(), 9}, {ga.data(), 9}, 1e-5, 1e-6).passed);
}

TEST(ScnCombine, RowsAreProbabilitiesWithFullClassCount) {
  ModelConfig cfg;
  cfg.scn_layers = 1;
  cfg.scn_ff_dim = 8;
  cfg.lookback = 1;
  cfg.lookahead = 1;
  cfg.cd_layers = 0;
  const Params p = init_params(cfg, 13);
  std::mt19937_64 rng(14);
  ScoreTensor ci{random_matrix(16, 5, rng).cwiseMax(-1.0).cwiseMin(1.0), ScoreKind::ContextIndependent};
  ScoreTensor cd{random_matrix(16, 5, rng).cwiseAbs().cwiseMin(0.99), ScoreKind::ContextDependent};
  const Matrix post = scn_combine(ci, cd, p, cfg);
  EXPECT_EQ(post.cols(), 2517);
  for (Eigen::Index t = 0; t < post.rows(); ++t) EXPECT_NEAR(post.row(t).sum(), 1.0, 1e-9);
}

TEST(ScnCombine, ZeroTapsEqualFeedForwardStack) {
  ModelConfig cfg = tiny_config();
  cfg.lookback = 0;
  cfg.lookahead = 0;
  const Params p = jittered_params(cfg, 15);
  Params identity = p;
  for (int l = 0; l < cfg.scn_layers; ++l) {
    identity.at("scn." + std::to_string(l) + ".mem.a").setOnes();
  }
  std::mt19937_64 rng(16);
  const ScoreTensor ci{random_matrix(cfg.slots, 7, rng), ScoreKind::ContextIndependent};
  const ScoreTensor cd{random_matrix(cfg.slots, 7, rng), ScoreKind::ContextDependent};
  Matrix z = scn_input(ci, cd);
  for (int l = 0; l < cfg.scn_layers; ++l) {
    const std::string pre = "scn." + std::to_string(l);
    const Matrix hidden = affine(z, identity.at(pre + ".ff1.w"), identity.row(pre + ".ff1.b")).cwiseMax(0.0);
    const Matrix normed = layer_norm(hidden, identity.row(pre + ".ln.g"), identity.row(pre + ".ln.b"));
    z = affine(normed, identity.at(pre + ".ff2.w"), identity.row(pre + ".ff2.b"));
  }
  Matrix expected = affine(z, identity.at("out.w"), identity.row("out.b"));
  softmax_rows(expected);
  EXPECT_LT((scn_combine(ci, cd, identity, cfg) - expected).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(Forward, DeterministicAndDecodable) {
  const ModelConfig cfg = tiny_config();
  const Params p = jittered_params(cfg, 17);
  const auto ex = tiny_example(cfg, 18, 12);
  const Matrix a = forward(ex.features, ex.profiles, p, cfg);
  const Matrix b = forward(ex.features, ex.profiles, p, cfg);
  EXPECT_EQ(a, b);
  const ActivityMatrix act = decode_activity(a, cfg);
  for (std::size_t t = 0; t < act.frames(); ++t) EXPECT_LE(act.active_count(t), cfg.max_active);
}

TEST(Forward, SlotPermutationPermutesScnInput) {
  const ModelConfig cfg = tiny_config();
  const Params p = jittered_params(cfg, 19);
  const auto ex = tiny_example(cfg, 20, 10);
  ForwardTrace ta, tb;
  forward(ex.features, ex.profiles, p, cfg, &ta);
  const std::vector<int> perm{1, 2, 0};
  ProfileSet permuted = ProfileSet::zeros(cfg.slots, cfg.profile_dim);
  for (int n = 0; n < cfg.slots; ++n) {
    permuted.vectors.row(perm[static_cast<std::size_t>(n)]) = ex.profiles.vectors.row(n);
    permuted.valid[static_cast<std::size_t>(perm[static_cast<std::size_t>(n)])] =
        ex.profiles.valid[static_cast<std::size_t>(n)];
  }
  forward(ex.features, permuted, p, cfg, &tb);
  const Matrix za = scn_input(ta.ci, ta.cd);
  const Matrix zb = scn_input(tb.ci, tb.cd);
  for (int n = 0; n < cfg.slots; ++n) {
    const int m = perm[static_cast<std::size_t>(n)];
    EXPECT_LT((za.col(n) - zb.col(m)).cwiseAbs().maxCoeff(), 1e-12);
    EXPECT_LT((za.col(cfg.slots + n) - zb.col(cfg.slots + m)).cwiseAbs().maxCoeff(), 1e-12);
  }
}

TEST(Forward, ShapeClosureAcrossConfigs) {
  for (int slots : {2, 3, 5}) {
    for (int k = 1; k <= 2; ++k) {
      for (int frames : {1, 4, 9}) {
        ModelConfig cfg = tiny_config();
        cfg.slots = slots;
        cfg.max_active = k;
        const Params p = init_params(cfg, 21);
        std::mt19937_64 rng(22);
        ProfileSet prof = random_profiles(cfg, 1, 23);
        const Matrix post = forward(random_matrix(frames, cfg.feature_dim, rng), prof, p, cfg);
        EXPECT_EQ(post.rows(), frames);
        EXPECT_EQ(static_cast<std::uint64_t>(post.cols()), cfg.output_dim());
      }
    }
  }
}

TEST(Params, FlattenAssignAndLayout) {
  const ModelConfig cfg = tiny_config();
  Params p = init_params(cfg, 24);
  const std::vector<double> flat = p.flatten();
  EXPECT_EQ(flat.size(), p.size());
  Params q = p.zeros_like();
  q.assign(flat);
  EXPECT_TRUE(q.same_layout(p));
  EXPECT_EQ(q.flatten(), flat);
  EXPECT_TRUE(is_speech_encoder_param("speech.conv0.w"));
  EXPECT_FALSE(is_speech_encoder_param("speaker.fc0.w"));
  EXPECT_EQ(p.at("scn.0.mem.a").row(0), RowVector::Ones(cfg.slots));
  EXPECT_TRUE(p.at("scn.0.mem.a").bottomRows(cfg.lookback).isZero(0.0));
}

TEST(Checkpoint, RoundTripIsBitExact) {
  ModelConfig cfg = tiny_config();
  cfg.head = OutputHead::MultiLabel;
  const Params p = jittered_params(cfg, 25);
  const std::string bytes = serialize_checkpoint(cfg, p);
  EXPECT_EQ(bytes.substr(4, 12), kCheckpointTag);
  const Checkpoint c = deserialize_checkpoint(bytes);
  EXPECT_EQ(c.config, cfg);
  EXPECT_EQ(c.params.flatten(), p.flatten());

  char path[] = "/tmp/sond_ckpt_XXXXXX";
  const int fd = mkstemp(path);
  ASSERT_GE(fd, 0);
  save_checkpoint(path, cfg, p);
  EXPECT_EQ(load_checkpoint(path).params.flatten(), p.flatten());
  std::remove(path);
}

TEST(Checkpoint, RejectsCorruptInput) {
  const ModelConfig cfg = tiny_config();
  const std::string bytes = serialize_checkpoint(cfg, init_params(cfg, 26));
  EXPECT_THROW(deserialize_checkpoint(bytes.substr(0, bytes.size() / 2)), Error);
  std::string wrong_tag = bytes;
  wrong_tag[5] = 'X';
  EXPECT_THROW(deserialize_checkpoint(wrong_tag), Error);
}
