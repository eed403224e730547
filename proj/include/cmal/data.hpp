#pragma once

#include <cstdint>
#include <filesystem>
#include <set>
#include <string>
#include <vector>

#include "cmal/model.hpp"
#include "cmal/sequence.hpp"

namespace cmal {

enum class TaskKind { Copy, Reverse, Sort, LexTranslate };

std::string to_string(TaskKind kind);
TaskKind parse_task_kind(const std::string& text);

/// Synthetic transduction task. Content ids are kNumReserved + [0, vocab_size).
struct Task {
  TaskKind kind = TaskKind::LexTranslate;
  std::size_t vocab_size = 20;
  std::size_t min_len = 4;
  std::size_t max_len = 10;
  std::uint64_t seed = 1;
  std::uint64_t lexicon_seed = 7;
  /// Draw each source without repeated tokens, so any repetition in a
  /// decode comes from the model rather than the data.
  bool distinct_tokens = true;

  std::size_t model_vocab_size() const { return vocab_size + static_cast<std::size_t>(kNumReserved); }
  void validate() const;
};

/// Seed streams. Sources from different streams are drawn independently.
enum class Stream : std::uint64_t { Train = 0, Test = 1, Unlabeled = 2 };

enum class Provenance { Real, Distilled };

struct Example {
  TokenSequence source;
  std::vector<TokenSequence> targets;
  Provenance provenance = Provenance::Real;

  const TokenSequence& target() const { return targets.front(); }
};

using ParallelCorpus = std::vector<Example>;

/// The seeded bijection used by LexTranslate.
std::vector<TokenId> task_lexicon(const Task& task);
/// Deterministic target for a source under `task`.
TokenSequence task_target(const Task& task, std::span<const TokenId> source);

/// Fresh sources from one seed stream, skipping any listed in `exclude`.
std::vector<TokenSequence> generate_sources(const Task& task, std::size_t n, Stream stream,
                                            const std::set<TokenSequence>& exclude = {});

ParallelCorpus generate_task(const Task& task, std::size_t n_examples, Stream stream = Stream::Train);

/// Replaces references with one beam-searched teacher output per source.
ParallelCorpus distill(const Seq2Seq& teacher, const std::vector<TokenSequence>& sources, std::size_t beam_width,
                       std::size_t max_len);

/// Teacher-labelled pairs for fresh sources absent from `labeled`.
ParallelCorpus augment_unlabeled(const Task& task, std::size_t n_unlabeled, const Seq2Seq& teacher,
                                 const ParallelCorpus& labeled, std::size_t beam_width, std::size_t max_len);

/// One example per line: source ids, a tab, target ids, then optional extra
/// tab-separated references. Lines "#provenance=real" or
/// "#provenance=distilled" tag the lines that follow.
ParallelCorpus load_corpus(const std::filesystem::path& path);
void save_corpus(const ParallelCorpus& corpus, const std::filesystem::path& path);
ParallelCorpus parse_corpus(std::istream& in, const std::string& origin = "<stream>");
void write_corpus(const ParallelCorpus& corpus, std::ostream& out);

std::size_t count_provenance(const ParallelCorpus& corpus, Provenance p);
/// Throws unless every pair carries provenance `p`.
void require_provenance(const ParallelCorpus& corpus, Provenance p, const std::string& stage);

}  // namespace cmal
