#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "cmal/cmal.hpp"
#include "cmal/data.hpp"
#include "cmal/metrics.hpp"
#include "cmal/model.hpp"
#include "cmal/optim.hpp"

namespace cmal {

/// Every knob of a run. Serialized as a flat key=value file; a run is
/// reproducible from this plus its seed.
struct RunConfig {
  // data
  Task task;
  std::size_t n_train = 5000;
  std::size_t n_test = 500;
  std::size_t n_unlabeled = 0;

  // model (vocab_size is derived from the task)
  ModelConfig model = [] {
    ModelConfig m;
    m.n_agents = 11;
    return m;
  }();

  // optimization
  std::size_t batch_size = 25;
  std::size_t teacher_epochs = 12;
  double teacher_lr = 2e-3;
  std::size_t xe_epochs = 1;
  double xe_lr = 6e-4;
  std::size_t warmup_steps = 200;
  double clip_norm = 1.0;
  std::size_t cmal_steps = 3200;
  double cmal_lr = 2e-4;
  std::size_t cmal_batch_size = 10;
  std::size_t log_every = 10;

  // CMAL
  std::string baseline = "cf";
  std::size_t k = 2;
  double lambda = 0.5;
  double ma_decay = 0.99;
  std::size_t samples_per_input = 5;
  RewardKind reward = RewardKind::Gleu;

  // decoding / evaluation
  std::size_t beam_width = 3;
  bool weight_init = true;
  bool postprocess = false;
  std::vector<std::size_t> bucket_edges{4, 6, 8};
  std::size_t latency_runs = 3;

  std::uint64_t seed = 1;
  std::filesystem::path out_dir = "runs/default";

  std::map<std::string, std::string> to_kv() const;
  /// Applies keys on top of `base`; unknown keys are an error.
  static RunConfig from_kv(const std::map<std::string, std::string>& kv, RunConfig base);
  static RunConfig from_kv(const std::map<std::string, std::string>& kv);
  static RunConfig load(const std::filesystem::path& path);
  void save(const std::filesystem::path& path) const;
  std::string text() const;
  /// FNV-1a 64 over the serialized text, hex.
  std::string hash() const;

  ModelConfig teacher_config() const;
  ModelConfig student_config() const;
  BaselineSpec baseline_spec() const;
};

struct Splits {
  ParallelCorpus train;
  ParallelCorpus test;  // sources disjoint from train
};

Splits generate_splits(const RunConfig& config);

/// Parses "key=value" lines; '#' starts a comment.
std::map<std::string, std::string> parse_kv_text(const std::string& text);

struct EpochLog {
  std::size_t epoch = 0;
  double loss = 0.0;
  double wall_ms = 0.0;
};

struct CmalLogRow {
  std::size_t step = 0;
  double mean_reward = 0.0;
  double mean_baseline = 0.0;
  double mean_abs_advantage = 0.0;
  std::size_t rescoring_calls = 0;
  double wall_ms = 0.0;
};

using EpochCallback = std::function<void(const EpochLog&)>;
using CmalCallback = std::function<void(const CmalLogRow&)>;

/// Cross-entropy training of an autoregressive teacher.
std::vector<EpochLog> train_teacher(Seq2Seq& teacher, const ParallelCorpus& corpus, const RunConfig& config,
                                    const EpochCallback& on_epoch = {});

/// Cross-entropy training of the non-autoregressive student on real and
/// distilled pairs.
std::vector<EpochLog> pretrain_xe(Seq2Seq& student, const ParallelCorpus& corpus, const RunConfig& config,
                                  const EpochCallback& on_epoch = {});

/// CMAL loop over real pairs only, cycling through the corpus in seeded order.
std::vector<CmalLogRow> train_cmal(Seq2Seq& student, const ParallelCorpus& real, const RunConfig& config,
                                   const BaselineSpec& baseline, const CmalCallback& on_log = {});

/// Per-token argmax accuracy of a teacher-forced autoregressive pass.
double teacher_forced_accuracy(const Seq2Seq& teacher, const ParallelCorpus& corpus);

enum class DecodeMode { Autoregressive, NonAutoregressive };

struct BucketScore {
  std::size_t lo = 0;
  std::size_t hi = 0;  // exclusive; 0 means unbounded
  std::size_t count = 0;
  double gleu = 0.0;
  double bleu = 0.0;
  double repetition = 0.0;
};

struct EvalReport {
  std::size_t examples = 0;
  double bleu = 0.0;        // corpus BLEU-4 x100
  double gleu = 0.0;        // mean sentence GLEU x100
  double cider = 0.0;       // mean CIDEr-D, df over the evaluated references
  double repetition = 0.0;  // mean repetition rate
  std::vector<BucketScore> buckets;
  double latency_ms = 0.0;  // mean per-sentence decode time, batch size 1
  std::vector<TokenSequence> hypotheses;
};

std::vector<TokenSequence> decode_corpus(const Seq2Seq& model, const ParallelCorpus& corpus, DecodeMode mode,
                                         std::size_t beam_width, bool postprocess);

/// Scores given hypotheses; metrics come from the metrics module only.
EvalReport score_hypotheses(const ParallelCorpus& corpus, std::vector<TokenSequence> hyps,
                            const std::vector<std::size_t>& bucket_edges);

EvalReport evaluate(const Seq2Seq& model, const ParallelCorpus& corpus, DecodeMode mode, bool postprocess,
                    const RunConfig& config);

struct LatencyRow {
  std::size_t length = 0;
  double ar_ms = 0.0;
  double na_ms = 0.0;
  double speedup = 0.0;
};

/// Per target length: median over `runs` of the per-sentence decode time at
/// batch size 1. The teacher is forced to emit exactly `length` tokens; the
/// student runs one pass with its inference agent count.
std::vector<LatencyRow> bench_latency(const Seq2Seq& teacher, const Seq2Seq& student,
                                      const std::vector<std::size_t>& lengths, std::span<const TokenId> source,
                                      std::size_t runs, std::size_t reps_per_run = 3);

/// Artifact index written alongside every command's outputs.
class Manifest {
 public:
  explicit Manifest(std::filesystem::path out_dir);
  void record(const std::string& artifact, const std::string& kind, const std::string& config_hash);

 private:
  std::filesystem::path path_;
  std::map<std::string, std::pair<std::string, std::string>> entries_;
};

// CLI commands. Each reads and writes files under config.out_dir and records
// its artifacts in the manifest.
void cmd_gen_data(const RunConfig& config);
void cmd_train_teacher(const RunConfig& config, const std::optional<std::filesystem::path>& resume = {});
void cmd_distill(const RunConfig& config);
void cmd_pretrain_xe(const RunConfig& config);
void cmd_train_cmal(const RunConfig& config);
EvalReport cmd_evaluate(const RunConfig& config, const std::filesystem::path& checkpoint,
                        const std::filesystem::path& corpus, DecodeMode mode, bool postprocess);
std::vector<LatencyRow> cmd_bench_latency(const RunConfig& config, const std::filesystem::path& teacher,
                                          const std::filesystem::path& student,
                                          const std::vector<std::size_t>& lengths);
void cmd_ablate_topk(const RunConfig& config, const std::vector<std::size_t>& ks);
void cmd_ablate_baselines(const RunConfig& config, const std::vector<std::string>& baselines);
void cmd_ablate_unlabeled(const RunConfig& config, const std::vector<std::size_t>& counts);

void write_eval_csv(const EvalReport& report, const std::string& label, std::ostream& out, bool header);

}  // namespace cmal
