#include "cmal/data.hpp"

#include <algorithm>
#include <charconv>
#include <fstream>
#include <numeric>
#include <random>
#include <sstream>
#include <stdexcept>

namespace cmal {

std::string to_string(TaskKind kind) {
  switch (kind) {
    case TaskKind::Copy: return "copy";
    case TaskKind::Reverse: return "reverse";
    case TaskKind::Sort: return "sort";
    case TaskKind::LexTranslate: return "lextranslate";
  }
  return "?";
}

TaskKind parse_task_kind(const std::string& text) {
  if (text == "copy") return TaskKind::Copy;
  if (text == "reverse") return TaskKind::Reverse;
  if (text == "sort") return TaskKind::Sort;
  if (text == "lextranslate" || text == "lex") return TaskKind::LexTranslate;
  throw std::invalid_argument("unknown task '" + text + "' (expected copy|reverse|sort|lextranslate)");
}

void Task::validate() const {
  if (vocab_size < 1) throw std::invalid_argument("task vocabulary is empty");
  if (kind == TaskKind::LexTranslate && vocab_size < 2) {
    throw std::invalid_argument("vocab too small for a lexicon: need at least 2 content tokens");
  }
  if (min_len < 1 || min_len > max_len) throw std::invalid_argument("task lengths must satisfy 1 <= min <= max");
  if (distinct_tokens && max_len > vocab_size) {
    throw std::invalid_argument("vocab too small: " + std::to_string(vocab_size) +
                                " distinct tokens cannot fill length " + std::to_string(max_len));
  }
}

std::vector<TokenId> task_lexicon(const Task& task) {
  std::vector<TokenId> lex(task.vocab_size);
  std::iota(lex.begin(), lex.end(), kNumReserved);
  std::mt19937_64 rng(task.lexicon_seed);
  std::shuffle(lex.begin(), lex.end(), rng);
  return lex;
}

TokenSequence task_target(const Task& task, std::span<const TokenId> source) {
  TokenSequence t(source.begin(), source.end());
  switch (task.kind) {
    case TaskKind::Copy: break;
    case TaskKind::Reverse: std::reverse(t.begin(), t.end()); break;
    case TaskKind::Sort: std::sort(t.begin(), t.end()); break;
    case TaskKind::LexTranslate: {
      const auto lex = task_lexicon(task);
      for (TokenId& x : t) x = lex.at(static_cast<std::size_t>(x - kNumReserved));
      for (std::size_t i = 0; i + 1 < t.size(); i += 2) std::swap(t[i], t[i + 1]);
      break;
    }
  }
  return t;
}

std::vector<TokenSequence> generate_sources(const Task& task, std::size_t n, Stream stream,
                                            const std::set<TokenSequence>& exclude) {
  task.validate();
  std::seed_seq seq{task.seed, static_cast<std::uint64_t>(stream), std::uint64_t{0x5eed}};
  std::mt19937_64 rng(seq);
  std::uniform_int_distribution<std::size_t> length(task.min_len, task.max_len);
  std::uniform_int_distribution<TokenId> token(kNumReserved, static_cast<TokenId>(task.vocab_size) + kNumReserved - 1);
  std::vector<TokenId> pool(task.vocab_size);
  std::iota(pool.begin(), pool.end(), kNumReserved);

  std::vector<TokenSequence> out;
  out.reserve(n);
  std::size_t attempts = 0;
  while (out.size() < n) {
    if (++attempts > 100 * n + 1000) throw std::runtime_error("cannot draw enough distinct sources for the task");
    const std::size_t len = length(rng);
    TokenSequence s;
    if (task.distinct_tokens) {
      std::shuffle(pool.begin(), pool.end(), rng);
      s.assign(pool.begin(), pool.begin() + static_cast<long>(len));
    } else {
      s.resize(len);
      for (TokenId& x : s) x = token(rng);
    }
    if (exclude.count(s)) continue;
    out.push_back(std::move(s));
  }
  return out;
}

ParallelCorpus generate_task(const Task& task, std::size_t n_examples, Stream stream) {
  if (n_examples < 1) throw std::invalid_argument("generate_task: n_examples must be >= 1");
  ParallelCorpus corpus;
  for (auto& s : generate_sources(task, n_examples, stream)) {
    Example ex;
    ex.targets.push_back(task_target(task, s));
    ex.source = std::move(s);
    corpus.push_back(std::move(ex));
  }
  return corpus;
}

ParallelCorpus distill(const Seq2Seq& teacher, const std::vector<TokenSequence>& sources, std::size_t beam_width,
                       std::size_t max_len) {
  ParallelCorpus out;
  out.reserve(sources.size());
  for (const auto& s : sources) {
    const Tensor context = teacher.encode(s);
    Example ex;
    ex.source = s;
    ex.targets.push_back(truncate_at_eos(beam_search(teacher, context, beam_width, max_len)));
    ex.provenance = Provenance::Distilled;
    out.push_back(std::move(ex));
  }
  return out;
}

ParallelCorpus augment_unlabeled(const Task& task, std::size_t n_unlabeled, const Seq2Seq& teacher,
                                 const ParallelCorpus& labeled, std::size_t beam_width, std::size_t max_len) {
  if (n_unlabeled == 0) return {};
  std::set<TokenSequence> seen;
  for (const auto& ex : labeled) seen.insert(ex.source);
  return distill(teacher, generate_sources(task, n_unlabeled, Stream::Unlabeled, seen), beam_width, max_len);
}

namespace {

TokenSequence parse_ids(const std::string& field, std::size_t line_no, const std::string& origin) {
  TokenSequence out;
  std::size_t i = 0;
  while (i < field.size()) {
    if (field[i] == ' ') {
      ++i;
      continue;
    }
    std::size_t j = field.find(' ', i);
    if (j == std::string::npos) j = field.size();
    TokenId v = 0;
    auto res = std::from_chars(field.data() + i, field.data() + j, v);
    if (res.ec != std::errc{} || res.ptr != field.data() + j || v < 0) {
      throw std::runtime_error(origin + ":" + std::to_string(line_no) + ": bad token id '" +
                               field.substr(i, j - i) + "'");
    }
    out.push_back(v);
    i = j;
  }
  return out;
}

}  // namespace

ParallelCorpus parse_corpus(std::istream& in, const std::string& origin) {
  ParallelCorpus corpus;
  Provenance current = Provenance::Real;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    if (line.front() == '#') {
      if (line == "#provenance=real") current = Provenance::Real;
      else if (line == "#provenance=distilled") current = Provenance::Distilled;
      else throw std::runtime_error(origin + ":" + std::to_string(line_no) + ": unknown directive '" + line + "'");
      continue;
    }
    std::vector<std::string> fields;
    std::size_t start = 0;
    for (;;) {
      const std::size_t tab = line.find('\t', start);
      fields.push_back(line.substr(start, tab - start));
      if (tab == std::string::npos) break;
      start = tab + 1;
    }
    if (fields.size() < 2) {
      throw std::runtime_error(origin + ":" + std::to_string(line_no) + ": missing tab between source and target");
    }
    Example ex;
    ex.source = parse_ids(fields[0], line_no, origin);
    for (std::size_t f = 1; f < fields.size(); ++f) ex.targets.push_back(parse_ids(fields[f], line_no, origin));
    ex.provenance = current;
    corpus.push_back(std::move(ex));
  }
  return corpus;
}

void write_corpus(const ParallelCorpus& corpus, std::ostream& out) {
  Provenance current = Provenance::Real;
  for (const auto& ex : corpus) {
    if (ex.provenance != current) {
      current = ex.provenance;
      out << (current == Provenance::Real ? "#provenance=real" : "#provenance=distilled") << '\n';
    }
    out << join_ids(ex.source);
    for (const auto& t : ex.targets) out << '\t' << join_ids(t);
    out << '\n';
  }
}

ParallelCorpus load_corpus(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open corpus " + path.string());
  return parse_corpus(in, path.string());
}

void save_corpus(const ParallelCorpus& corpus, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write corpus " + path.string());
  write_corpus(corpus, out);
}

std::size_t count_provenance(const ParallelCorpus& corpus, Provenance p) {
  return static_cast<std::size_t>(
      std::count_if(corpus.begin(), corpus.end(), [p](const Example& ex) { return ex.provenance == p; }));
}

void require_provenance(const ParallelCorpus& corpus, Provenance p, const std::string& stage) {
  const std::size_t bad = corpus.size() - count_provenance(corpus, p);
  if (bad != 0) {
    throw std::invalid_argument(stage + ": " + std::to_string(bad) + " pairs have the wrong provenance (" +
                                (p == Provenance::Real ? "only real pairs allowed" : "only distilled pairs allowed") +
                                ")");
  }
}

}  // namespace cmal
