#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include "CLI11.hpp"
#include "sond/clustering.hpp"
#include "sond/eval.hpp"
#include "sond/io.hpp"
#include "sond/pipeline.hpp"
#include "sond/simulate.hpp"
#include "sond/training.hpp"

namespace fs = std::filesystem;
using namespace sond;

namespace {

KeyValueConfig load_config(const std::string& path) {
  return path.empty() ? KeyValueConfig{} : KeyValueConfig::load(path);
}

std::ifstream open_in(const std::string& path, bool binary = false) {
  std::ifstream in(path, binary ? std::ios::binary : std::ios::in);
  if (!in) throw Error("cannot open " + path);
  return in;
}

std::ofstream open_out(const std::string& path, bool binary = false) {
  std::ofstream out(path, binary ? std::ios::binary : std::ios::out);
  if (!out) throw Error("cannot write " + path);
  return out;
}

// Writes to `path`, or stdout when it is empty.
void emit(const std::string& path, const std::string& text) {
  if (path.empty()) {
    std::cout << text;
  } else {
    write_text_file(path, text);
  }
}

std::string numbered(const char* prefix, int i) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%s%04d", prefix, i);
  return buf;
}

struct SimulateArgs {
  std::string config, output;
  std::uint64_t seed = 0;
  bool seed_set = false;
  int count = 100;
  bool recordings = false;
  int speakers = 4;
  double duration = 60.0;
  bool binary = false;
};

int run_simulate(const SimulateArgs& a) {
  SimConfig cfg = SimConfig::from_kv(load_config(a.config));
  if (a.seed_set) cfg.seed = a.seed;
  cfg.validate();
  fs::create_directories(a.output);
  const fs::path dir(a.output);
  if (a.recordings) {
    const auto bank = make_speaker_bank(cfg.pool_size, cfg.feature_dim, cfg.radius, cfg.sigma,
                                        cfg.min_separation, cfg.bank_seed);
    std::string all_rttm;
    for (int i = 0; i < a.count; ++i) {
      const std::string id = numbered("rec", i);
      const Recording r = simulate_recording(cfg, bank, a.speakers, a.duration,
                                             derive_seed(cfg.seed, static_cast<std::uint64_t>(i)));
      auto feat = open_out((dir / (id + ".feat")).string(), a.binary);
      write_features(feat, r.features, a.binary);
      auto vad = open_out((dir / (id + ".vad")).string());
      write_vad(vad, r.vad);
      const std::string rttm = emit_rttm(r.reference, id);
      write_text_file((dir / (id + ".rttm")).string(), rttm);
      all_rttm += rttm;
    }
    write_text_file((dir / "ref.rttm").string(), all_rttm);
    std::cerr << "wrote " << a.count << " recordings to " << a.output << '\n';
    return 0;
  }
  const PseConfig pse = PseConfig::make(cfg.slots, cfg.max_active);
  std::vector<ManifestEntry> manifest;
  const auto samples = simulate_dataset(a.count, cfg);
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const std::string id = numbered("seg", static_cast<int>(i));
    const SimSample& s = samples[i];
    ManifestEntry e{id, id + ".feat", id + ".pse", id + ".prof"};
    auto feat = open_out((dir / e.features).string(), a.binary);
    write_features(feat, s.features, a.binary);
    auto labels = open_out((dir / e.labels).string());
    write_label_file(labels, encode_sequence(s.labels, pse), pse);
    auto prof = open_out((dir / e.profiles).string());
    write_profiles(prof, s.profiles);
    manifest.push_back(e);
  }
  auto m = open_out((dir / "manifest.tsv").string());
  write_manifest(m, manifest);
  std::cerr << "wrote " << samples.size() << " segments to " << a.output << '\n';
  return 0;
}

struct TrainArgs {
  std::string config, manifest, output, init, log;
  std::vector<std::string> average;
  std::uint64_t seed = 0;
  bool seed_set = false;
  int stage = 0;
  int steps = 0;
  bool binary = false;
};

std::vector<TrainingExample> load_corpus(const std::string& manifest_path, const ModelConfig& cfg,
                                         bool binary) {
  auto in = open_in(manifest_path);
  const fs::path base = fs::path(manifest_path).parent_path();
  std::vector<TrainingExample> out;
  for (const ManifestEntry& e : read_manifest(in)) {
    auto feat = open_in((base / e.features).string(), binary);
    Matrix features = read_features(feat, binary);
    auto lab = open_in((base / e.labels).string());
    const LabelFile labels = read_label_file(lab);
    if (labels.config.slots != cfg.slots || labels.config.max_active != cfg.max_active) {
      throw ConfigError(e.id + ": labels use N=" + std::to_string(labels.config.slots) +
                        " K=" + std::to_string(labels.config.max_active) + ", model has N=" +
                        std::to_string(cfg.slots) + " K=" + std::to_string(cfg.max_active));
    }
    auto prof = open_in((base / e.profiles).string());
    ProfileSet profiles = read_profiles(prof);
    out.push_back(make_example(std::move(features), std::move(profiles),
                               decode_sequence(labels.labels, labels.config), cfg));
  }
  if (out.empty()) throw ConfigError("manifest " + manifest_path + " lists no segments");
  return out;
}

int run_train(const TrainArgs& a) {
  if (!a.average.empty()) {
    const Checkpoint avg = average_checkpoints(a.average);
    save_checkpoint(a.output, avg.config, avg.params);
    std::cerr << "averaged " << a.average.size() << " checkpoints into " << a.output << '\n';
    return 0;
  }
  if (a.manifest.empty()) throw ConfigError("train needs --manifest (or --average)");
  const KeyValueConfig kv = load_config(a.config);
  TrainConfig tc = TrainConfig::from_kv(kv);
  if (a.seed_set) tc.seed = a.seed;
  if (a.stage != 0) tc.stage = a.stage;
  if (a.steps > 0) tc.max_steps = a.steps;

  ModelConfig mc;
  Params params;
  if (!a.init.empty()) {
    Checkpoint init = load_checkpoint(a.init);
    mc = init.config;
    params = std::move(init.params);
  } else {
    const std::string preset = kv.get_string("preset", "paper");
    if (preset != "paper" && preset != "desk") throw ConfigError("unknown preset '" + preset + "'");
    mc = ModelConfig::from_kv(kv, preset == "desk" ? ModelConfig::desk_scale() : ModelConfig{});
    mc.validate();
    params = init_params(mc, tc.seed);
  }
  const auto corpus = load_corpus(a.manifest, mc, a.binary);

  std::ofstream log_file;
  std::ostream* log = &std::cerr;
  if (!a.log.empty()) {
    log_file = open_out(a.log);
    log = &log_file;
  }
  if (tc.checkpoint_path.empty()) tc.checkpoint_path = a.output + ".last_good";
  const TrainResult r = train(corpus, mc, std::move(params), tc, log);
  save_checkpoint(a.output, mc, r.params);
  std::cerr << "trained " << r.curve.size() << " steps, final loss "
            << (r.curve.empty() ? 0.0 : r.curve.back().loss.total) << ", saved " << a.output << '\n';
  return 0;
}

struct InferArgs {
  std::string config, features, vad, checkpoint, output, file_id;
  std::uint64_t seed = 0;
  bool seed_set = false;
  int iterations = 0;
  bool binary = false;
};

int run_infer(const InferArgs& a) {
  PipelineConfig pc = PipelineConfig::from_kv(load_config(a.config));
  if (a.seed_set) pc.seed = a.seed;
  if (a.iterations > 0) pc.iterations = a.iterations;
  const Checkpoint ckpt = load_checkpoint(a.checkpoint);
  auto feat = open_in(a.features, a.binary);
  const Matrix features = read_features(feat, a.binary);
  auto vad_in = open_in(a.vad);
  const std::vector<Interval> vad = read_vad(vad_in);
  const PipelineResult r = run_pipeline(features, vad, ckpt.params, ckpt.config, pc);
  for (const std::string& w : r.warnings) std::cerr << "warning: " << w << '\n';
  const std::string id = a.file_id.empty() ? fs::path(a.features).stem().string() : a.file_id;
  emit(a.output, emit_rttm(r.timeline, id));
  return 0;
}

struct ScoreArgs {
  std::string ref, hyp, output, denominator = "ref_speech";
  double collar = 0.25;
};

int run_score(const ScoreArgs& a) {
  DerOptions opt;
  opt.collar = a.collar;
  if (a.denominator == "ref_speech") {
    opt.denominator = DerDenominator::RefSpeech;
  } else if (a.denominator == "scored_time") {
    opt.denominator = DerDenominator::ScoredTime;
  } else {
    throw ConfigError("--denominator must be ref_speech or scored_time");
  }
  const auto refs = parse_rttm_files(read_text_file(a.ref));
  const auto hyps = parse_rttm_files(read_text_file(a.hyp));
  if (refs.empty()) throw ScoringError("reference " + a.ref + " has no SPEAKER lines");
  std::ostringstream out;
  out << "file\tDER\tMD\tFA\tSC\ttotal_s\n";
  DerResult sum;
  for (const auto& [id, ref] : refs) {
    const auto it = hyps.find(id);
    const DerResult r = der(ref, it == hyps.end() ? Timeline{} : it->second, opt);
    out << format_der_row(id, r) << '\n';
    sum.t_total += r.t_total;
    sum.t_md += r.t_md;
    sum.t_fa += r.t_fa;
    sum.t_sc += r.t_sc;
  }
  for (const auto& [id, _] : hyps) {
    if (refs.count(id) == 0) std::cerr << "warning: hypothesis file " << id << " has no reference\n";
  }
  sum.md = 100.0 * sum.t_md / sum.t_total;
  sum.fa = 100.0 * sum.t_fa / sum.t_total;
  sum.sc = 100.0 * sum.t_sc / sum.t_total;
  sum.der = sum.md + sum.fa + sum.sc;
  out << format_der_row("ALL", sum) << '\n';
  emit(a.output, out.str());
  return 0;
}

struct ClusterArgs {
  std::string config, embeddings, output;
  std::uint64_t seed = 0;
  bool seed_set = false;
  int slots = 0;
};

int run_cluster(const ClusterArgs& a) {
  const KeyValueConfig kv = load_config(a.config);
  ClusterOptions opt;
  opt.k_max = kv.get_int("k_max", opt.k_max);
  opt.seed = static_cast<std::uint64_t>(kv.get_int("seed", static_cast<int>(opt.seed)));
  if (a.seed_set) opt.seed = a.seed;
  const double keep = kv.get_double("affinity_keep", 0.2);
  opt.affinity = [keep](const Matrix& e) { return pruned_affinity(e, keep); };
  const int slots = a.slots > 0 ? a.slots : kv.get_int("slots", 16);

  auto in = open_in(a.embeddings);
  const ChunkEmbeddings emb = read_embeddings(in);
  opt.k_max = std::min<int>(opt.k_max, static_cast<int>(emb.vectors.rows()));
  const ClusterResult r = cluster_embeddings(emb.vectors, opt);
  std::ostringstream out;
  write_profiles(out, extract_profiles(r, slots));
  emit(a.output, out.str());
  std::cerr << "found " << r.k << " speakers in " << emb.vectors.rows() << " chunks\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Overlap-aware speaker diarization toolkit"};
  app.require_subcommand(1);

  SimulateArgs sim;
  auto* s = app.add_subcommand("simulate", "emit a simulated corpus");
  s->add_option("--config", sim.config, "simulator key=value config");
  s->add_option("--seed", sim.seed)->each([&](const std::string&) { sim.seed_set = true; });
  s->add_option("--output", sim.output, "output directory")->required();
  s->add_option("--count", sim.count, "segments or recordings to emit")->check(CLI::PositiveNumber);
  s->add_flag("--recordings", sim.recordings, "long recordings with VAD and reference RTTM");
  s->add_option("--speakers", sim.speakers, "speakers per recording")->check(CLI::PositiveNumber);
  s->add_option("--duration", sim.duration, "recording length in seconds")->check(CLI::PositiveNumber);
  s->add_flag("--binary", sim.binary, "binary feature files");

  TrainArgs tr;
  auto* t = app.add_subcommand("train", "train or fine-tune a model");
  t->add_option("--config", tr.config, "model and training key=value config");
  t->add_option("--manifest", tr.manifest, "manifest.tsv from `simulate`");
  t->add_option("--output", tr.output, "checkpoint to write")->required();
  t->add_option("--seed", tr.seed)->each([&](const std::string&) { tr.seed_set = true; });
  t->add_option("--stage", tr.stage, "1 frozen speech encoder, 2 full, 3 fine-tune")->check(CLI::Range(1, 3));
  t->add_option("--steps", tr.steps, "override max_steps")->check(CLI::PositiveNumber);
  t->add_option("--init", tr.init, "start from this checkpoint");
  t->add_option("--log", tr.log, "step log file (default stderr)");
  t->add_option("--average", tr.average, "average these checkpoints instead of training");
  t->add_flag("--binary", tr.binary, "binary feature files");

  InferArgs inf;
  auto* i = app.add_subcommand("infer", "diarize one recording into RTTM");
  i->add_option("--config", inf.config, "pipeline key=value config");
  i->add_option("--features", inf.features)->required();
  i->add_option("--vad", inf.vad)->required();
  i->add_option("--checkpoint", inf.checkpoint)->required();
  i->add_option("--output", inf.output, "RTTM path (default stdout)");
  i->add_option("--file-id", inf.file_id, "RTTM file id (default features stem)");
  i->add_option("--seed", inf.seed)->each([&](const std::string&) { inf.seed_set = true; });
  i->add_option("--iterations", inf.iterations)->check(CLI::PositiveNumber);
  i->add_flag("--binary", inf.binary, "binary feature file");

  ScoreArgs sc;
  auto* r = app.add_subcommand("score", "DER table for hypothesis against reference RTTM");
  r->add_option("--ref", sc.ref)->required();
  r->add_option("--hyp", sc.hyp)->required();
  r->add_option("--collar", sc.collar, "no-score collar in seconds")->check(CLI::NonNegativeNumber);
  r->add_option("--denominator", sc.denominator)->check(CLI::IsMember({"ref_speech", "scored_time"}));
  r->add_option("--output", sc.output, "table path (default stdout)");

  ClusterArgs cl;
  auto* c = app.add_subcommand("cluster", "chunk embeddings to speaker profiles");
  c->add_option("--config", cl.config, "k_max, slots, seed, affinity_keep");
  c->add_option("--embeddings", cl.embeddings)->required();
  c->add_option("--output", cl.output, "profiles path (default stdout)");
  c->add_option("--seed", cl.seed)->each([&](const std::string&) { cl.seed_set = true; });
  c->add_option("--slots", cl.slots)->check(CLI::PositiveNumber);

  CLI11_PARSE(app, argc, argv);
  try {
    if (s->parsed()) return run_simulate(sim);
    if (t->parsed()) return run_train(tr);
    if (i->parsed()) return run_infer(inf);
    if (r->parsed()) return run_score(sc);
    if (c->parsed()) return run_cluster(cl);
  } catch (const DivergenceError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  }
  return 1;
}
