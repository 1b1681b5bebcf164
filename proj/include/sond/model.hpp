#pragma once

// Speaker overlap-aware neural diarization model: speech and speaker
// encoders, context-independent (cosine) and context-dependent (self
// attention) scorers, and the speaker-combining network that turns the
// per-speaker scores into posteriors over power-set classes.
//
// Every forward stage can record a trace that the explicit backward pass
// consumes; inference passes nullptr and keeps nothing.

#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "sond/kv_config.hpp"
#include "sond/numerics.hpp"
#include "sond/pse_codec.hpp"

namespace sond {

enum class OutputHead {
  PowerSet,    // softmax over C power-set classes
  MultiLabel,  // one sigmoid per speaker slot (ablation baseline)
};

struct ModelConfig {
  int feature_dim = 80;  // D
  int profile_dim = 256;  // P
  int embed_dim = 256;  // E
  int slots = 16;  // N
  int max_active = 4;  // K
  int pool_window = 20;  // l, in frames
  std::vector<int> conv_channels = {32, 32};
  int conv_kernel = 3;
  int speaker_hidden = 256;
  int cd_layers = 4;
  int attn_dim = 512;
  int attn_heads = 4;
  int cd_ff_dim = 1024;
  int scn_layers = 6;
  int scn_ff_dim = 512;  // d_ff
  int lookback = 15;  // L1
  int lookahead = 15;  // L2
  OutputHead head = OutputHead::PowerSet;
  double layer_norm_eps = kLayerNormEps;
  double stat_pool_eps = kStatPoolEps;

  /// Width of the output layer: C for the power-set head, N for multi-label.
  std::uint64_t output_dim() const;
  void validate() const;

  /// Reduced sizes that train on one CPU core.
  static ModelConfig desk_scale();

  KeyValueConfig to_kv() const;
  static ModelConfig from_kv(const KeyValueConfig& kv, const ModelConfig& base);
  static ModelConfig from_kv(const KeyValueConfig& kv) { return from_kv(kv, ModelConfig{}); }

  bool operator==(const ModelConfig&) const = default;
};

/// Named parameter tensors. Biases are stored as 1 x n matrices.
class Params {
 public:
  Matrix& at(const std::string& name);
  const Matrix& at(const std::string& name) const;
  RowVector row(const std::string& name) const { return at(name).row(0); }
  bool contains(const std::string& name) const { return tensors_.count(name) != 0; }
  void set(const std::string& name, Matrix value) { tensors_[name] = std::move(value); }

  const std::map<std::string, Matrix>& tensors() const { return tensors_; }
  std::map<std::string, Matrix>& tensors() { return tensors_; }

  std::size_t size() const;
  std::vector<double> flatten() const;
  void assign(std::span<const double> flat);

  /// Same names and shapes, all zeros.
  Params zeros_like() const;
  bool same_layout(const Params& other) const;

 private:
  std::map<std::string, Matrix> tensors_;
};

/// True for tensors belonging to the speech encoder (freezable as a unit).
bool is_speech_encoder_param(const std::string& name);

Params init_params(const ModelConfig& cfg, std::uint64_t seed);

/// N profile slots with a validity mask; invalid slots hold zero vectors.
struct ProfileSet {
  Matrix vectors;  // N x P
  std::vector<bool> valid;

  int slots() const { return static_cast<int>(vectors.rows()); }
  int valid_count() const;
  static ProfileSet zeros(int slots, int dim);
};

enum class ScoreKind { ContextIndependent, ContextDependent };

struct ScoreTensor {
  Matrix data;  // N x T
  ScoreKind kind = ScoreKind::ContextIndependent;
};

// ---------------------------------------------------------------------------
// Traces recorded for the backward pass.

struct SpeechTrace {
  std::vector<Matrix> columns;  // im2col input per conv layer
  std::vector<Matrix> pre_act;  // conv output before ReLU
  Matrix conv_out;
  Matrix pooled;
  Matrix encoded;  // H
};

struct SpeakerTrace {
  Matrix input;
  std::vector<Matrix> pre_act;
  std::vector<Matrix> act;
};

struct AttentionLayerTrace {
  Matrix input, q, k, v;
  std::vector<Matrix> probs;  // one T x T matrix per head
  Matrix heads;  // concatenated head outputs
  Matrix after_attn;  // residual sum
  Matrix ff_pre;
};

struct CdSpeakerTrace {
  std::vector<AttentionLayerTrace> layers;
  Matrix final_state;
  Vector scores;
};

struct ScnLayerTrace {
  Matrix input, ff_pre;
  LayerNormCache ln;
  Matrix ln_out;
  Matrix projected;  // memory block input
};

struct ScnTrace {
  std::vector<ScnLayerTrace> layers;
  Matrix final_state;
  Matrix logits;
};

struct ForwardTrace {
  SpeechTrace speech;
  SpeakerTrace speaker;
  Matrix vbar;  // N x E
  std::vector<bool> valid;
  ScoreTensor ci;
  ScoreTensor cd;
  std::vector<CdSpeakerTrace> cd_speakers;
  ScnTrace scn;
  Matrix posteriors;
};

// ---------------------------------------------------------------------------
// Forward stages.

/// Stride-1 conv stack, windowed statistic pooling and an embedding layer; T x E.
Matrix speech_encode(const Matrix& features, const Params& p, const ModelConfig& cfg,
                     SpeechTrace* trace = nullptr);

/// Three affine + ReLU layers applied to every slot, valid or not; N x E.
Matrix speaker_encode(const Matrix& profiles, const Params& p, const ModelConfig& cfg,
                      SpeakerTrace* trace = nullptr);

/// Cosine between every projected profile and every frame encoding. Invalid
/// slots score -1.
ScoreTensor ci_score(const Matrix& encoded, const Matrix& vbar, const std::vector<bool>& valid);

ScoreTensor cd_score(const Matrix& encoded, const Matrix& vbar, const Params& p,
                     const ModelConfig& cfg, std::vector<CdSpeakerTrace>* traces = nullptr);

/// z[t] = sum_{i=0..L1} a_i * zbar[t-i] + sum_{j=1..L2} c_j * zbar[t+j], per
/// channel, zero outside [0, T). `lookback` is (L1+1) x d, `lookahead` L2 x d.
Matrix memory_block(const Matrix& zbar, const Matrix& lookback, const Matrix& lookahead);

/// Returns dL/dzbar and accumulates tap gradients.
Matrix memory_block_backward(const Matrix& zbar, const Matrix& lookback, const Matrix& lookahead,
                             const Matrix& grad_out, Matrix& grad_lookback,
                             Matrix& grad_lookahead);

/// Per-frame input of the combining network: [CI scores | CD scores], T x 2N.
Matrix scn_input(const ScoreTensor& ci, const ScoreTensor& cd);

/// Posteriors: T x C probability rows (power-set head) or T x N sigmoids.
Matrix scn_combine(const ScoreTensor& ci, const ScoreTensor& cd, const Params& p,
                   const ModelConfig& cfg, ScnTrace* trace = nullptr);

Matrix forward(const Matrix& features, const ProfileSet& profiles, const Params& p,
               const ModelConfig& cfg, ForwardTrace* trace = nullptr);

// ---------------------------------------------------------------------------
// Reverse pass.

struct BackwardOptions {
  bool freeze_speech_encoder = false;
};

/// Gradients of a loss whose partials w.r.t. the output logits (T x out) and,
/// optionally, the projected profiles (N x E) are given.
Params model_backward(const ForwardTrace& trace, const Matrix& grad_logits,
                      const Matrix* grad_vbar, const Params& p, const ModelConfig& cfg,
                      const BackwardOptions& options = {});

// ---------------------------------------------------------------------------
// Checkpoints: little-endian container tagged "sond-ckpt-v1".

inline constexpr const char* kCheckpointTag = "sond-ckpt-v1";

struct Checkpoint {
  ModelConfig config;
  Params params;
};

void save_checkpoint(const std::string& path, const ModelConfig& cfg, const Params& params);
Checkpoint load_checkpoint(const std::string& path);
std::string serialize_checkpoint(const ModelConfig& cfg, const Params& params);
Checkpoint deserialize_checkpoint(const std::string& bytes);

/// Frame decisions from posteriors: argmax class for the power-set head,
/// 0.5 threshold for the multi-label head.
ActivityMatrix decode_activity(const Matrix& posteriors, const ModelConfig& cfg);

}  // namespace sond
