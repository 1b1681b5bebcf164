#include "sond/model.hpp"

#include <cmath>
#include <random>

#include "sond/error.hpp"
#include "sond/pse_codec.hpp"

namespace sond {
namespace {

std::span<const double> row_span(const Matrix& m, Eigen::Index r) {
  return {m.data() + r * m.cols(), static_cast<std::size_t>(m.cols())};
}

std::span<double> row_span(Matrix& m, Eigen::Index r) {
  return {m.data() + r * m.cols(), static_cast<std::size_t>(m.cols())};
}

Matrix relu(const Matrix& x) { return x.cwiseMax(0.0); }

Matrix relu_grad(const Matrix& grad, const Matrix& pre) {
  return (pre.array() > 0.0).select(grad, 0.0);
}

void add_bias(Matrix& m, const Matrix& bias) { m.rowwise() += bias.row(0); }

Matrix col_sum(const Matrix& m) { return m.colwise().sum(); }

// Rows t-r .. t+r of x side by side, zero outside the sequence.
Matrix im2col(const Matrix& x, int kernel) {
  const Eigen::Index frames = x.rows();
  const Eigen::Index width = x.cols();
  const int radius = kernel / 2;
  Matrix cols = Matrix::Zero(frames, width * kernel);
  for (int j = 0; j < kernel; ++j) {
    const int shift = j - radius;
    const Eigen::Index lo = std::max<Eigen::Index>(0, -shift);
    const Eigen::Index hi = std::min<Eigen::Index>(frames, frames - shift);
    if (hi <= lo) continue;
    cols.block(lo, j * width, hi - lo, width) = x.middleRows(lo + shift, hi - lo);
  }
  return cols;
}

Matrix col2im(const Matrix& cols, int kernel, Eigen::Index width) {
  const Eigen::Index frames = cols.rows();
  const int radius = kernel / 2;
  Matrix x = Matrix::Zero(frames, width);
  for (int j = 0; j < kernel; ++j) {
    const int shift = j - radius;
    const Eigen::Index lo = std::max<Eigen::Index>(0, -shift);
    const Eigen::Index hi = std::min<Eigen::Index>(frames, frames - shift);
    if (hi <= lo) continue;
    x.middleRows(lo + shift, hi - lo) += cols.block(lo, j * width, hi - lo, width);
  }
  return x;
}

Matrix sigmoid(const Matrix& x) {
  return x.unaryExpr([](double v) {
    if (v >= 0) return 1.0 / (1.0 + std::exp(-v));
    const double e = std::exp(v);
    return e / (1.0 + e);
  });
}

std::string conv_name(std::size_t i) { return "speech.conv" + std::to_string(i); }
std::string cd_name(int l) { return "cd." + std::to_string(l); }
std::string scn_name(int l) { return "scn." + std::to_string(l); }

// One residual self-attention block plus residual ReLU feed-forward.
Matrix attention_block(const Matrix& z, const Params& p, const std::string& prefix,
                       const ModelConfig& cfg, AttentionLayerTrace* trace) {
  const Eigen::Index frames = z.rows();
  const int heads = cfg.attn_heads;
  const int head_dim = cfg.attn_dim / heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(head_dim));

  Matrix q = z * p.at(prefix + ".q.w");
  add_bias(q, p.at(prefix + ".q.b"));
  Matrix k = z * p.at(prefix + ".k.w");
  add_bias(k, p.at(prefix + ".k.b"));
  Matrix v = z * p.at(prefix + ".v.w");
  add_bias(v, p.at(prefix + ".v.b"));

  Matrix concat(frames, cfg.attn_dim);
  if (trace != nullptr) trace->probs.resize(static_cast<std::size_t>(heads));
  for (int h = 0; h < heads; ++h) {
    Matrix scores = (q.middleCols(h * head_dim, head_dim) *
                     k.middleCols(h * head_dim, head_dim).transpose()) *
                    scale;
    softmax_rows(scores);
    concat.middleCols(h * head_dim, head_dim) = scores * v.middleCols(h * head_dim, head_dim);
    if (trace != nullptr) trace->probs[static_cast<std::size_t>(h)] = std::move(scores);
  }
  Matrix after_attn = concat * p.at(prefix + ".o.w");
  add_bias(after_attn, p.at(prefix + ".o.b"));
  after_attn += z;

  Matrix ff_pre = after_attn * p.at(prefix + ".ff1.w");
  add_bias(ff_pre, p.at(prefix + ".ff1.b"));
  Matrix out = relu(ff_pre) * p.at(prefix + ".ff2.w");
  add_bias(out, p.at(prefix + ".ff2.b"));
  out += after_attn;

  if (trace != nullptr) {
    trace->input = z;
    trace->q = std::move(q);
    trace->k = std::move(k);
    trace->v = std::move(v);
    trace->heads = std::move(concat);
    trace->after_attn = std::move(after_attn);
    trace->ff_pre = std::move(ff_pre);
  }
  return out;
}

// Returns dL/dinput; accumulates parameter gradients into g.
Matrix attention_block_backward(const AttentionLayerTrace& tr, const Matrix& grad_out,
                                const Params& p, Params& g, const std::string& prefix,
                                const ModelConfig& cfg) {
  const int heads = cfg.attn_heads;
  const int head_dim = cfg.attn_dim / heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(head_dim));

  // Feed-forward residual branch.
  const Matrix ff_act = relu(tr.ff_pre);
  g.at(prefix + ".ff2.w") += ff_act.transpose() * grad_out;
  g.at(prefix + ".ff2.b") += col_sum(grad_out);
  const Matrix d_ff_pre = relu_grad(grad_out * p.at(prefix + ".ff2.w").transpose(), tr.ff_pre);
  g.at(prefix + ".ff1.w") += tr.after_attn.transpose() * d_ff_pre;
  g.at(prefix + ".ff1.b") += col_sum(d_ff_pre);
  const Matrix d_after = grad_out + d_ff_pre * p.at(prefix + ".ff1.w").transpose();

  // Attention residual branch.
  g.at(prefix + ".o.w") += tr.heads.transpose() * d_after;
  g.at(prefix + ".o.b") += col_sum(d_after);
  const Matrix d_heads = d_after * p.at(prefix + ".o.w").transpose();

  Matrix dq(tr.q.rows(), tr.q.cols());
  Matrix dk(tr.k.rows(), tr.k.cols());
  Matrix dv(tr.v.rows(), tr.v.cols());
  for (int h = 0; h < heads; ++h) {
    const Matrix& probs = tr.probs[static_cast<std::size_t>(h)];
    const auto d_out = d_heads.middleCols(h * head_dim, head_dim);
    dv.middleCols(h * head_dim, head_dim) = probs.transpose() * d_out;
    const Matrix d_probs = d_out * tr.v.middleCols(h * head_dim, head_dim).transpose();
    const Vector row_dot = (d_probs.array() * probs.array()).rowwise().sum();
    const Matrix d_scores =
        (probs.array() * (d_probs.colwise() - row_dot).array()).matrix() * scale;
    dq.middleCols(h * head_dim, head_dim) = d_scores * tr.k.middleCols(h * head_dim, head_dim);
    dk.middleCols(h * head_dim, head_dim) =
        d_scores.transpose() * tr.q.middleCols(h * head_dim, head_dim);
  }
  g.at(prefix + ".q.w") += tr.input.transpose() * dq;
  g.at(prefix + ".q.b") += col_sum(dq);
  g.at(prefix + ".k.w") += tr.input.transpose() * dk;
  g.at(prefix + ".k.b") += col_sum(dk);
  g.at(prefix + ".v.w") += tr.input.transpose() * dv;
  g.at(prefix + ".v.b") += col_sum(dv);

  return d_after + dq * p.at(prefix + ".q.w").transpose() +
         dk * p.at(prefix + ".k.w").transpose() + dv * p.at(prefix + ".v.w").transpose();
}

}  // namespace

// ---------------------------------------------------------------------------
// ModelConfig

std::uint64_t ModelConfig::output_dim() const {
  if (head == OutputHead::MultiLabel) return static_cast<std::uint64_t>(slots);
  return num_classes(slots, max_active);
}

void ModelConfig::validate() const {
  auto positive = [](int v, const char* what) {
    if (v < 1) throw ConfigError(std::string(what) + " must be >= 1");
  };
  positive(feature_dim, "feature_dim");
  positive(profile_dim, "profile_dim");
  positive(embed_dim, "embed_dim");
  positive(slots, "slots");
  positive(pool_window, "pool_window");
  positive(speaker_hidden, "speaker_hidden");
  positive(attn_dim, "attn_dim");
  positive(attn_heads, "attn_heads");
  positive(cd_ff_dim, "cd_ff_dim");
  positive(scn_ff_dim, "scn_ff_dim");
  positive(scn_layers, "scn_layers");
  if (cd_layers < 0) throw ConfigError("cd_layers must be >= 0");
  if (lookback < 0 || lookahead < 0) throw ConfigError("memory taps must be >= 0");
  if (conv_kernel < 1 || conv_kernel % 2 == 0) throw ConfigError("conv_kernel must be odd");
  for (int c : conv_channels) positive(c, "conv channel width");
  if (attn_dim % attn_heads != 0) {
    throw ConfigError("attn_dim " + std::to_string(attn_dim) + " not divisible by " +
                      std::to_string(attn_heads) + " heads");
  }
  (void)PseConfig::make(slots, max_active);
}

ModelConfig ModelConfig::desk_scale() {
  ModelConfig cfg;
  cfg.feature_dim = 24;
  cfg.profile_dim = 24;
  cfg.embed_dim = 32;
  cfg.slots = 4;
  cfg.max_active = 2;
  cfg.pool_window = 2;
  cfg.conv_channels = {32};
  cfg.speaker_hidden = 32;
  cfg.cd_layers = 1;
  cfg.attn_dim = 64;
  cfg.attn_heads = 4;
  cfg.cd_ff_dim = 128;
  cfg.scn_layers = 2;
  cfg.scn_ff_dim = 64;
  cfg.lookback = 5;
  cfg.lookahead = 5;
  return cfg;
}

KeyValueConfig ModelConfig::to_kv() const {
  KeyValueConfig kv;
  kv.set("feature_dim", std::to_string(feature_dim));
  kv.set("profile_dim", std::to_string(profile_dim));
  kv.set("embed_dim", std::to_string(embed_dim));
  kv.set("slots", std::to_string(slots));
  kv.set("max_active", std::to_string(max_active));
  kv.set("pool_window", std::to_string(pool_window));
  std::string channels;
  for (std::size_t i = 0; i < conv_channels.size(); ++i) {
    channels += (i ? "," : "") + std::to_string(conv_channels[i]);
  }
  kv.set("conv_channels", channels);
  kv.set("conv_kernel", std::to_string(conv_kernel));
  kv.set("speaker_hidden", std::to_string(speaker_hidden));
  kv.set("cd_layers", std::to_string(cd_layers));
  kv.set("attn_dim", std::to_string(attn_dim));
  kv.set("attn_heads", std::to_string(attn_heads));
  kv.set("cd_ff_dim", std::to_string(cd_ff_dim));
  kv.set("scn_layers", std::to_string(scn_layers));
  kv.set("scn_ff_dim", std::to_string(scn_ff_dim));
  kv.set("lookback", std::to_string(lookback));
  kv.set("lookahead", std::to_string(lookahead));
  kv.set("head", head == OutputHead::PowerSet ? "pse" : "multilabel");
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", layer_norm_eps);
  kv.set("layer_norm_eps", buf);
  std::snprintf(buf, sizeof buf, "%.17g", stat_pool_eps);
  kv.set("stat_pool_eps", buf);
  return kv;
}

ModelConfig ModelConfig::from_kv(const KeyValueConfig& kv, const ModelConfig& base) {
  ModelConfig cfg = base;
  cfg.feature_dim = kv.get_int("feature_dim", cfg.feature_dim);
  cfg.profile_dim = kv.get_int("profile_dim", cfg.profile_dim);
  cfg.embed_dim = kv.get_int("embed_dim", cfg.embed_dim);
  cfg.slots = kv.get_int("slots", cfg.slots);
  cfg.max_active = kv.get_int("max_active", cfg.max_active);
  cfg.pool_window = kv.get_int("pool_window", cfg.pool_window);
  cfg.conv_channels = kv.get_int_list("conv_channels", cfg.conv_channels);
  cfg.conv_kernel = kv.get_int("conv_kernel", cfg.conv_kernel);
  cfg.speaker_hidden = kv.get_int("speaker_hidden", cfg.speaker_hidden);
  cfg.cd_layers = kv.get_int("cd_layers", cfg.cd_layers);
  cfg.attn_dim = kv.get_int("attn_dim", cfg.attn_dim);
  cfg.attn_heads = kv.get_int("attn_heads", cfg.attn_heads);
  cfg.cd_ff_dim = kv.get_int("cd_ff_dim", cfg.cd_ff_dim);
  cfg.scn_layers = kv.get_int("scn_layers", cfg.scn_layers);
  cfg.scn_ff_dim = kv.get_int("scn_ff_dim", cfg.scn_ff_dim);
  cfg.lookback = kv.get_int("lookback", cfg.lookback);
  cfg.lookahead = kv.get_int("lookahead", cfg.lookahead);
  const std::string head = kv.get_string("head", cfg.head == OutputHead::PowerSet ? "pse" : "multilabel");
  if (head == "pse") {
    cfg.head = OutputHead::PowerSet;
  } else if (head == "multilabel") {
    cfg.head = OutputHead::MultiLabel;
  } else {
    throw ConfigError("unknown output head '" + head + "'");
  }
  cfg.layer_norm_eps = kv.get_double("layer_norm_eps", cfg.layer_norm_eps);
  cfg.stat_pool_eps = kv.get_double("stat_pool_eps", cfg.stat_pool_eps);
  cfg.validate();
  return cfg;
}

// ---------------------------------------------------------------------------
// Params

Matrix& Params::at(const std::string& name) {
  auto it = tensors_.find(name);
  if (it == tensors_.end()) throw ConfigError("missing parameter tensor '" + name + "'");
  return it->second;
}

const Matrix& Params::at(const std::string& name) const {
  auto it = tensors_.find(name);
  if (it == tensors_.end()) throw ConfigError("missing parameter tensor '" + name + "'");
  return it->second;
}

std::size_t Params::size() const {
  std::size_t n = 0;
  for (const auto& [_, t] : tensors_) n += static_cast<std::size_t>(t.size());
  return n;
}

std::vector<double> Params::flatten() const {
  std::vector<double> flat;
  flat.reserve(size());
  for (const auto& [_, t] : tensors_) flat.insert(flat.end(), t.data(), t.data() + t.size());
  return flat;
}

void Params::assign(std::span<const double> flat) {
  if (flat.size() != size()) throw ShapeError("parameter vector length mismatch");
  std::size_t offset = 0;
  for (auto& [_, t] : tensors_) {
    std::copy_n(flat.begin() + static_cast<std::ptrdiff_t>(offset), t.size(), t.data());
    offset += static_cast<std::size_t>(t.size());
  }
}

Params Params::zeros_like() const {
  Params z;
  for (const auto& [name, t] : tensors_) z.tensors_[name] = Matrix::Zero(t.rows(), t.cols());
  return z;
}

bool Params::same_layout(const Params& other) const {
  if (tensors_.size() != other.tensors_.size()) return false;
  auto it = other.tensors_.begin();
  for (const auto& [name, t] : tensors_) {
    if (it->first != name || it->second.rows() != t.rows() || it->second.cols() != t.cols()) {
      return false;
    }
    ++it;
  }
  return true;
}

bool is_speech_encoder_param(const std::string& name) { return name.rfind("speech.", 0) == 0; }

Params init_params(const ModelConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  std::mt19937_64 rng(seed);
  Params p;
  // Uniform in +-sqrt(gain / fan_in); gain 6 ahead of a ReLU, 3 otherwise.
  auto dense = [&](const std::string& name, int fan_in, int fan_out, double gain) {
    const double limit = std::sqrt(gain / static_cast<double>(fan_in));
    std::uniform_real_distribution<double> dist(-limit, limit);
    Matrix w(fan_in, fan_out);
    for (Eigen::Index i = 0; i < w.size(); ++i) w.data()[i] = dist(rng);
    p.set(name + ".w", std::move(w));
    p.set(name + ".b", Matrix::Zero(1, fan_out));
  };

  int width = cfg.feature_dim;
  for (std::size_t i = 0; i < cfg.conv_channels.size(); ++i) {
    dense(conv_name(i), width * cfg.conv_kernel, cfg.conv_channels[i], 6.0);
    width = cfg.conv_channels[i];
  }
  dense("speech.emb", 2 * width, cfg.embed_dim, 3.0);

  dense("speaker.fc0", cfg.profile_dim, cfg.speaker_hidden, 6.0);
  dense("speaker.fc1", cfg.speaker_hidden, cfg.speaker_hidden, 6.0);
  dense("speaker.fc2", cfg.speaker_hidden, cfg.embed_dim, 6.0);

  dense("cd.in", 2 * cfg.embed_dim, cfg.attn_dim, 3.0);
  for (int l = 0; l < cfg.cd_layers; ++l) {
    const std::string prefix = cd_name(l);
    for (const char* proj : {".q", ".k", ".v"}) dense(prefix + proj, cfg.attn_dim, cfg.attn_dim, 3.0);
    dense(prefix + ".o", cfg.attn_dim, cfg.attn_dim, 1.0);
    dense(prefix + ".ff1", cfg.attn_dim, cfg.cd_ff_dim, 6.0);
    dense(prefix + ".ff2", cfg.cd_ff_dim, cfg.attn_dim, 1.0);
  }
  dense("cd.out", cfg.attn_dim, 1, 3.0);

  for (int l = 0; l < cfg.scn_layers; ++l) {
    const std::string prefix = scn_name(l);
    dense(prefix + ".ff1", l == 0 ? 2 * cfg.slots : cfg.slots, cfg.scn_ff_dim, 6.0);
    p.set(prefix + ".ln.g", Matrix::Ones(1, cfg.scn_ff_dim));
    p.set(prefix + ".ln.b", Matrix::Zero(1, cfg.scn_ff_dim));
    dense(prefix + ".ff2", cfg.scn_ff_dim, cfg.slots, 3.0);
    Matrix lookback = Matrix::Zero(cfg.lookback + 1, cfg.slots);
    lookback.row(0).setOnes();
    p.set(prefix + ".mem.a", std::move(lookback));
    p.set(prefix + ".mem.c", Matrix::Zero(cfg.lookahead, cfg.slots));
  }
  dense("out", cfg.slots, static_cast<int>(cfg.output_dim()), 3.0);
  return p;
}

// ---------------------------------------------------------------------------
// ProfileSet

int ProfileSet::valid_count() const {
  int n = 0;
  for (bool v : valid) n += v;
  return n;
}

ProfileSet ProfileSet::zeros(int slots, int dim) {
  return {Matrix::Zero(slots, dim), std::vector<bool>(static_cast<std::size_t>(slots), false)};
}

// ---------------------------------------------------------------------------
// Forward

Matrix speech_encode(const Matrix& features, const Params& p, const ModelConfig& cfg,
                     SpeechTrace* trace) {
  if (features.cols() != cfg.feature_dim) {
    throw ShapeError("speech_encode: features " + shape_string(features) + " but D=" +
                     std::to_string(cfg.feature_dim));
  }
  Matrix x = features;
  for (std::size_t i = 0; i < cfg.conv_channels.size(); ++i) {
    Matrix cols = im2col(x, cfg.conv_kernel);
    Matrix pre = cols * p.at(conv_name(i) + ".w");
    add_bias(pre, p.at(conv_name(i) + ".b"));
    x = relu(pre);
    if (trace != nullptr) {
      trace->columns.push_back(std::move(cols));
      trace->pre_act.push_back(std::move(pre));
    }
  }
  Matrix pooled = windowed_stat_pool(x, cfg.pool_window, cfg.stat_pool_eps);
  Matrix encoded = pooled * p.at("speech.emb.w");
  add_bias(encoded, p.at("speech.emb.b"));
  if (!encoded.allFinite()) throw NumericError("speech_encode: non-finite activations");
  if (trace != nullptr) {
    trace->conv_out = std::move(x);
    trace->pooled = std::move(pooled);
    trace->encoded = encoded;
  }
  return encoded;
}

Matrix speaker_encode(const Matrix& profiles, const Params& p, const ModelConfig& cfg,
                      SpeakerTrace* trace) {
  if (profiles.cols() != cfg.profile_dim) {
    throw ShapeError("speaker_encode: profiles " + shape_string(profiles) + " but P=" +
                     std::to_string(cfg.profile_dim));
  }
  Matrix x = profiles;
  if (trace != nullptr) trace->input = profiles;
  for (int i = 0; i < 3; ++i) {
    const std::string name = "speaker.fc" + std::to_string(i);
    Matrix pre = affine(x, p.at(name + ".w"), p.row(name + ".b"));
    x = relu(pre);
    if (trace != nullptr) {
      trace->pre_act.push_back(std::move(pre));
      trace->act.push_back(x);
    }
  }
  return x;
}

ScoreTensor ci_score(const Matrix& encoded, const Matrix& vbar, const std::vector<bool>& valid) {
  if (encoded.cols() != vbar.cols()) {
    throw ShapeError("ci_score: encodings " + shape_string(encoded) + " vs profiles " +
                     shape_string(vbar));
  }
  if (valid.size() != static_cast<std::size_t>(vbar.rows())) {
    throw ShapeError("ci_score: mask length differs from slot count");
  }
  ScoreTensor s{Matrix(vbar.rows(), encoded.rows()), ScoreKind::ContextIndependent};
  for (Eigen::Index n = 0; n < vbar.rows(); ++n) {
    for (Eigen::Index t = 0; t < encoded.rows(); ++t) {
      s.data(n, t) = valid[static_cast<std::size_t>(n)]
                         ? cosine(row_span(vbar, n), row_span(encoded, t)).value
                         : -1.0;
    }
  }
  return s;
}

ScoreTensor cd_score(const Matrix& encoded, const Matrix& vbar, const Params& p,
                     const ModelConfig& cfg, std::vector<CdSpeakerTrace>* traces) {
  if (cfg.attn_dim % cfg.attn_heads != 0) {
    throw ConfigError("cd_score: attn_dim not divisible by attn_heads");
  }
  if (encoded.cols() != cfg.embed_dim || vbar.cols() != cfg.embed_dim) {
    throw ShapeError("cd_score: encodings " + shape_string(encoded) + " and profiles " +
                     shape_string(vbar) + " must both have E=" + std::to_string(cfg.embed_dim));
  }
  const Matrix& w_in = p.at("cd.in.w");
  const Matrix frame_part = encoded * w_in.topRows(cfg.embed_dim);
  const Matrix speaker_part = vbar * w_in.bottomRows(cfg.embed_dim);
  const Matrix& w_out = p.at("cd.out.w");
  const double b_out = p.at("cd.out.b")(0, 0);

  ScoreTensor s{Matrix(vbar.rows(), encoded.rows()), ScoreKind::ContextDependent};
  if (traces != nullptr) traces->assign(static_cast<std::size_t>(vbar.rows()), {});
  for (Eigen::Index n = 0; n < vbar.rows(); ++n) {
    Matrix z = frame_part;
    z.rowwise() += speaker_part.row(n) + p.at("cd.in.b").row(0);
    CdSpeakerTrace* tr = traces != nullptr ? &(*traces)[static_cast<std::size_t>(n)] : nullptr;
    if (tr != nullptr) tr->layers.resize(static_cast<std::size_t>(cfg.cd_layers));
    for (int l = 0; l < cfg.cd_layers; ++l) {
      z = attention_block(z, p, cd_name(l), cfg,
                          tr != nullptr ? &tr->layers[static_cast<std::size_t>(l)] : nullptr);
    }
    Matrix logit = z * w_out;
    logit.array() += b_out;
    const Matrix prob = sigmoid(logit);
    s.data.row(n) = prob.col(0).transpose();
    if (tr != nullptr) {
      tr->final_state = std::move(z);
      tr->scores = prob.col(0);
    }
  }
  return s;
}

Matrix memory_block(const Matrix& zbar, const Matrix& lookback, const Matrix& lookahead) {
  if (lookback.rows() < 1 || lookback.cols() != zbar.cols() ||
      (lookahead.rows() > 0 && lookahead.cols() != zbar.cols())) {
    throw ShapeError("memory_block: taps must have one column per channel");
  }
  const Eigen::Index frames = zbar.rows();
  Matrix out = Matrix::Zero(frames, zbar.cols());
  for (Eigen::Index i = 0; i < lookback.rows(); ++i) {
    if (i >= frames) break;
    out.bottomRows(frames - i) +=
        (zbar.topRows(frames - i).array().rowwise() * lookback.row(i).array()).matrix();
  }
  for (Eigen::Index j = 1; j <= lookahead.rows(); ++j) {
    if (j >= frames) break;
    out.topRows(frames - j) +=
        (zbar.bottomRows(frames - j).array().rowwise() * lookahead.row(j - 1).array()).matrix();
  }
  return out;
}

Matrix memory_block_backward(const Matrix& zbar, const Matrix& lookback, const Matrix& lookahead,
                             const Matrix& grad_out, Matrix& grad_lookback,
                             Matrix& grad_lookahead) {
  const Eigen::Index frames = zbar.rows();
  Matrix dz = Matrix::Zero(frames, zbar.cols());
  for (Eigen::Index i = 0; i < lookback.rows(); ++i) {
    if (i >= frames) break;
    grad_lookback.row(i) +=
        (grad_out.bottomRows(frames - i).array() * zbar.topRows(frames - i).array())
            .colwise()
            .sum()
            .matrix();
    dz.topRows(frames - i) +=
        (grad_out.bottomRows(frames - i).array().rowwise() * lookback.row(i).array()).matrix();
  }
  for (Eigen::Index j = 1; j <= lookahead.rows(); ++j) {
    if (j >= frames) break;
    grad_lookahead.row(j - 1) +=
        (grad_out.topRows(frames - j).array() * zbar.bottomRows(frames - j).array())
            .colwise()
            .sum()
            .matrix();
    dz.bottomRows(frames - j) +=
        (grad_out.topRows(frames - j).array().rowwise() * lookahead.row(j - 1).array()).matrix();
  }
  return dz;
}

Matrix scn_input(const ScoreTensor& ci, const ScoreTensor& cd) {
  if (ci.data.rows() != cd.data.rows() || ci.data.cols() != cd.data.cols()) {
    throw ShapeError("scn: CI scores " + shape_string(ci.data) + " vs CD scores " +
                     shape_string(cd.data));
  }
  const Eigen::Index slots = ci.data.rows();
  Matrix z(ci.data.cols(), 2 * slots);
  z.leftCols(slots) = ci.data.transpose();
  z.rightCols(slots) = cd.data.transpose();
  return z;
}

Matrix scn_combine(const ScoreTensor& ci, const ScoreTensor& cd, const Params& p,
                   const ModelConfig& cfg, ScnTrace* trace) {
  if (ci.data.rows() != cfg.slots) {
    throw ShapeError("scn: expected " + std::to_string(cfg.slots) + " speaker rows, got " +
                     std::to_string(ci.data.rows()));
  }
  Matrix z = scn_input(ci, cd);
  if (trace != nullptr) trace->layers.resize(static_cast<std::size_t>(cfg.scn_layers));
  for (int l = 0; l < cfg.scn_layers; ++l) {
    const std::string prefix = scn_name(l);
    Matrix ff_pre = affine(z, p.at(prefix + ".ff1.w"), p.row(prefix + ".ff1.b"));
    ScnLayerTrace* tr = trace != nullptr ? &trace->layers[static_cast<std::size_t>(l)] : nullptr;
    Matrix ln_out = layer_norm(relu(ff_pre), p.row(prefix + ".ln.g"), p.row(prefix + ".ln.b"),
                               cfg.layer_norm_eps, tr != nullptr ? &tr->ln : nullptr);
    Matrix projected = ln_out * p.at(prefix + ".ff2.w");
    add_bias(projected, p.at(prefix + ".ff2.b"));
    Matrix next = memory_block(projected, p.at(prefix + ".mem.a"), p.at(prefix + ".mem.c"));
    if (tr != nullptr) {
      tr->input = std::move(z);
      tr->ff_pre = std::move(ff_pre);
      tr->ln_out = std::move(ln_out);
      tr->projected = std::move(projected);
    }
    z = std::move(next);
  }
  Matrix logits = z * p.at("out.w");
  add_bias(logits, p.at("out.b"));
  Matrix posteriors = logits;
  if (cfg.head == OutputHead::PowerSet) {
    softmax_rows(posteriors);
  } else {
    posteriors = sigmoid(logits);
  }
  if (trace != nullptr) {
    trace->final_state = std::move(z);
    trace->logits = std::move(logits);
  }
  return posteriors;
}

Matrix forward(const Matrix& features, const ProfileSet& profiles, const Params& p,
               const ModelConfig& cfg, ForwardTrace* trace) {
  if (profiles.slots() != cfg.slots || profiles.valid.size() != static_cast<std::size_t>(cfg.slots)) {
    throw ShapeError("forward: profile set has " + std::to_string(profiles.slots()) +
                     " slots, model expects " + std::to_string(cfg.slots));
  }
  Matrix encoded = speech_encode(features, p, cfg, trace != nullptr ? &trace->speech : nullptr);
  Matrix vbar =
      speaker_encode(profiles.vectors, p, cfg, trace != nullptr ? &trace->speaker : nullptr);
  ScoreTensor ci = ci_score(encoded, vbar, profiles.valid);
  ScoreTensor cd =
      cd_score(encoded, vbar, p, cfg, trace != nullptr ? &trace->cd_speakers : nullptr);
  Matrix posteriors = scn_combine(ci, cd, p, cfg, trace != nullptr ? &trace->scn : nullptr);
  if (trace != nullptr) {
    trace->vbar = std::move(vbar);
    trace->valid = profiles.valid;
    trace->ci = std::move(ci);
    trace->cd = std::move(cd);
    trace->posteriors = posteriors;
  }
  return posteriors;
}

// ---------------------------------------------------------------------------
// Backward

Params model_backward(const ForwardTrace& tr, const Matrix& grad_logits, const Matrix* grad_vbar,
                      const Params& p, const ModelConfig& cfg, const BackwardOptions& options) {
  Params g = p.zeros_like();

  // Output layer and combining network.
  g.at("out.w") += tr.scn.final_state.transpose() * grad_logits;
  g.at("out.b") += col_sum(grad_logits);
  Matrix dz = grad_logits * p.at("out.w").transpose();
  for (int l = cfg.scn_layers - 1; l >= 0; --l) {
    const std::string prefix = scn_name(l);
    const ScnLayerTrace& lt = tr.scn.layers[static_cast<std::size_t>(l)];
    const Matrix d_proj =
        memory_block_backward(lt.projected, p.at(prefix + ".mem.a"), p.at(prefix + ".mem.c"), dz,
                              g.at(prefix + ".mem.a"), g.at(prefix + ".mem.c"));
    g.at(prefix + ".ff2.w") += lt.ln_out.transpose() * d_proj;
    g.at(prefix + ".ff2.b") += col_sum(d_proj);
    RowVector d_gain = RowVector::Zero(cfg.scn_ff_dim);
    RowVector d_bias = RowVector::Zero(cfg.scn_ff_dim);
    const Matrix d_relu = layer_norm_backward(d_proj * p.at(prefix + ".ff2.w").transpose(),
                                              p.row(prefix + ".ln.g"), lt.ln, d_gain, d_bias);
    g.at(prefix + ".ln.g").row(0) += d_gain;
    g.at(prefix + ".ln.b").row(0) += d_bias;
    const Matrix d_pre = relu_grad(d_relu, lt.ff_pre);
    g.at(prefix + ".ff1.w") += lt.input.transpose() * d_pre;
    g.at(prefix + ".ff1.b") += col_sum(d_pre);
    dz = d_pre * p.at(prefix + ".ff1.w").transpose();
  }

  const int slots = cfg.slots;
  const Matrix& encoded = tr.speech.encoded;
  const Matrix& vbar = tr.vbar;
  Matrix d_encoded = Matrix::Zero(encoded.rows(), encoded.cols());
  Matrix d_vbar = Matrix::Zero(vbar.rows(), vbar.cols());
  if (grad_vbar != nullptr) d_vbar += *grad_vbar;

  // Context-dependent scorer, one independent sequence per slot.
  const Matrix& w_in = p.at("cd.in.w");
  const Matrix& w_out = p.at("cd.out.w");
  Matrix d_in_frames = Matrix::Zero(cfg.embed_dim, cfg.attn_dim);
  Matrix d_in_speaker = Matrix::Zero(cfg.embed_dim, cfg.attn_dim);
  for (int n = 0; n < slots; ++n) {
    const CdSpeakerTrace& st = tr.cd_speakers[static_cast<std::size_t>(n)];
    const Vector d_score = dz.col(slots + n);
    const Vector d_logit = (d_score.array() * st.scores.array() * (1.0 - st.scores.array())).matrix();
    g.at("cd.out.w") += st.final_state.transpose() * d_logit;
    g.at("cd.out.b")(0, 0) += d_logit.sum();
    Matrix d_state = d_logit * w_out.transpose();
    for (int l = cfg.cd_layers - 1; l >= 0; --l) {
      d_state = attention_block_backward(st.layers[static_cast<std::size_t>(l)], d_state, p, g,
                                         cd_name(l), cfg);
    }
    const RowVector d_sum = d_state.colwise().sum();
    d_in_frames += encoded.transpose() * d_state;
    d_in_speaker += vbar.row(n).transpose() * d_sum;
    g.at("cd.in.b").row(0) += d_sum;
    d_encoded += d_state * w_in.topRows(cfg.embed_dim).transpose();
    d_vbar.row(n) += d_sum * w_in.bottomRows(cfg.embed_dim).transpose();
  }
  g.at("cd.in.w").topRows(cfg.embed_dim) += d_in_frames;
  g.at("cd.in.w").bottomRows(cfg.embed_dim) += d_in_speaker;

  // Context-independent scorer.
  for (int n = 0; n < slots; ++n) {
    if (!tr.valid[static_cast<std::size_t>(n)]) continue;
    for (Eigen::Index t = 0; t < encoded.rows(); ++t) {
      cosine_backward(row_span(vbar, n), row_span(encoded, t), dz(t, n), row_span(d_vbar, n),
                      row_span(d_encoded, t));
    }
  }

  // Speaker encoder.
  Matrix d_act = std::move(d_vbar);
  for (int i = 2; i >= 0; --i) {
    const std::string name = "speaker.fc" + std::to_string(i);
    const Matrix d_pre = relu_grad(d_act, tr.speaker.pre_act[static_cast<std::size_t>(i)]);
    const Matrix& input = i == 0 ? tr.speaker.input : tr.speaker.act[static_cast<std::size_t>(i - 1)];
    g.at(name + ".w") += input.transpose() * d_pre;
    g.at(name + ".b") += col_sum(d_pre);
    if (i > 0) d_act = d_pre * p.at(name + ".w").transpose();
  }

  if (options.freeze_speech_encoder) return g;

  // Speech encoder.
  g.at("speech.emb.w") += tr.speech.pooled.transpose() * d_encoded;
  g.at("speech.emb.b") += col_sum(d_encoded);
  const Matrix d_pooled = d_encoded * p.at("speech.emb.w").transpose();
  Matrix dx = windowed_stat_pool_backward(tr.speech.conv_out, tr.speech.pooled, d_pooled,
                                          cfg.pool_window);
  for (int i = static_cast<int>(cfg.conv_channels.size()) - 1; i >= 0; --i) {
    const auto idx = static_cast<std::size_t>(i);
    const Matrix d_pre = relu_grad(dx, tr.speech.pre_act[idx]);
    g.at(conv_name(idx) + ".w") += tr.speech.columns[idx].transpose() * d_pre;
    g.at(conv_name(idx) + ".b") += col_sum(d_pre);
    if (i > 0) {
      const int width = cfg.conv_channels[idx - 1];
      dx = col2im(d_pre * p.at(conv_name(idx) + ".w").transpose(), cfg.conv_kernel, width);
    }
  }
  return g;
}

ActivityMatrix decode_activity(const Matrix& posteriors, const ModelConfig& cfg) {
  ActivityMatrix acts(static_cast<std::size_t>(posteriors.rows()), cfg.slots);
  if (cfg.head == OutputHead::MultiLabel) {
    for (Eigen::Index t = 0; t < posteriors.rows(); ++t) {
      for (int n = 0; n < cfg.slots; ++n) acts.set(static_cast<std::size_t>(t), n, posteriors(t, n) > 0.5);
    }
    return acts;
  }
  const PseConfig pse = PseConfig::make(cfg.slots, cfg.max_active);
  for (Eigen::Index t = 0; t < posteriors.rows(); ++t) {
    Eigen::Index best = 0;
    posteriors.row(t).maxCoeff(&best);
    const PseCode code = class_to_pse(static_cast<PseClass>(best), pse);
    for (int n = 0; n < cfg.slots; ++n) acts.set(static_cast<std::size_t>(t), n, (code >> n) & 1U);
  }
  return acts;
}

}  // namespace sond
