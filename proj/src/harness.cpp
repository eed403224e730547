#include "cmal/harness.hpp"

#include <algorithm>
#include <charconv>
#include <chrono>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <numeric>
#include <random>
#include <set>
#include <sstream>
#include <stdexcept>

namespace cmal {

namespace {

using Clock = std::chrono::steady_clock;

double elapsed_ms(Clock::time_point since) {
  return std::chrono::duration<double, std::milli>(Clock::now() - since).count();
}

std::string fmt(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

double to_double(const std::string& key, const std::string& s) {
  double v = 0.0;
  auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc{} || res.ptr != s.data() + s.size()) {
    throw std::invalid_argument("config key '" + key + "': not a number: '" + s + "'");
  }
  return v;
}

std::uint64_t to_u64(const std::string& key, const std::string& s) {
  std::uint64_t v = 0;
  auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc{} || res.ptr != s.data() + s.size()) {
    throw std::invalid_argument("config key '" + key + "': not a non-negative integer: '" + s + "'");
  }
  return v;
}

bool to_bool(const std::string& key, const std::string& s) {
  if (s == "1" || s == "true" || s == "yes") return true;
  if (s == "0" || s == "false" || s == "no") return false;
  throw std::invalid_argument("config key '" + key + "': not a boolean: '" + s + "'");
}

std::vector<std::size_t> to_size_list(const std::string& key, const std::string& s) {
  std::vector<std::size_t> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (!item.empty()) out.push_back(static_cast<std::size_t>(to_u64(key, item)));
  }
  return out;
}

std::string join_sizes(const std::vector<std::size_t>& v) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) out += (i ? "," : "") + std::to_string(v[i]);
  return out;
}

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

std::vector<std::size_t> shuffled_indices(std::size_t n, std::mt19937_64& rng) {
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  std::shuffle(idx.begin(), idx.end(), rng);
  return idx;
}

using LossFn = Tensor (*)(const Seq2Seq&, std::span<const TokenId>, std::span<const TokenId>);

std::vector<EpochLog> xe_loop(Seq2Seq& model, const ParallelCorpus& corpus, const RunConfig& config,
                              std::size_t epochs, double lr, std::uint64_t seed, LossFn loss_fn,
                              const EpochCallback& on_epoch) {
  if (corpus.empty()) throw std::invalid_argument("training corpus is empty");
  AdamConfig ac;
  ac.lr = lr;
  ac.clip_norm = config.clip_norm;
  ac.schedule = LrSchedule::WarmupInvSqrt;
  ac.warmup_steps = config.warmup_steps;
  Adam opt(model.parameters(), ac);
  std::mt19937_64 rng(seed);
  model.set_training(true, seed);
  std::vector<EpochLog> logs;
  const std::size_t batch = std::max<std::size_t>(1, config.batch_size);
  for (std::size_t epoch = 1; epoch <= epochs; ++epoch) {
    const auto start = Clock::now();
    const auto order = shuffled_indices(corpus.size(), rng);
    double total = 0.0;
    for (std::size_t b = 0; b < order.size(); b += batch) {
      const std::size_t end = std::min(order.size(), b + batch);
      model.zero_grad();
      for (std::size_t i = b; i < end; ++i) {
        const Example& ex = corpus[order[i]];
        Tape tape;
        TapeScope scope(tape);
        const Tensor loss = loss_fn(model, ex.source, ex.target());
        total += loss.item();
        tape.backward(scale(loss, 1.0 / static_cast<double>(end - b)));
      }
      opt.step();
    }
    EpochLog log{epoch, total / static_cast<double>(corpus.size()), elapsed_ms(start)};
    logs.push_back(log);
    if (on_epoch) on_epoch(log);
  }
  model.set_training(false);
  return logs;
}

std::size_t decode_max_len(const Seq2Seq& model, std::size_t source_len) {
  return std::min(model.config().n_max, 2 * source_len + 2);
}

void write_epoch_csv(const std::vector<EpochLog>& logs, const std::filesystem::path& path) {
  std::ofstream out(path);
  out << "epoch,loss,wall_ms\n";
  for (const auto& l : logs) out << l.epoch << ',' << fmt(l.loss) << ',' << fmt(l.wall_ms) << '\n';
}

void write_cmal_csv(const std::vector<CmalLogRow>& rows, std::ostream& out, bool header,
                    const std::string& label = "") {
  if (header) out << (label.empty() ? "" : "run,") << "step,mean_reward,mean_baseline,mean_abs_advantage,rescoring_calls,wall_ms\n";
  for (const auto& r : rows) {
    if (!label.empty()) out << label << ',';
    out << r.step << ',' << fmt(r.mean_reward) << ',' << fmt(r.mean_baseline) << ',' << fmt(r.mean_abs_advantage)
        << ',' << r.rescoring_calls << ',' << fmt(r.wall_ms) << '\n';
  }
}

std::filesystem::path ensure_out_dir(const RunConfig& config) {
  std::filesystem::create_directories(config.out_dir);
  config.save(config.out_dir / "config.txt");
  return config.out_dir;
}

ParallelCorpus load_real(const RunConfig& config, const std::string& name) {
  ParallelCorpus c = load_corpus(config.out_dir / name);
  return c;
}

double tail_mean_reward(const std::vector<CmalLogRow>& rows, std::size_t window) {
  if (rows.empty()) return 0.0;
  const std::size_t n = std::min(window, rows.size());
  double s = 0.0;
  for (std::size_t i = rows.size() - n; i < rows.size(); ++i) s += rows[i].mean_reward;
  return s / static_cast<double>(n);
}

}  // namespace

// ---------------------------------------------------------------------------
// RunConfig

std::map<std::string, std::string> parse_kv_text(const std::string& text) {
  std::map<std::string, std::string> kv;
  std::istringstream in(text);
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (auto hash = line.find('#'); hash != std::string::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw std::invalid_argument("config line " + std::to_string(line_no) + ": expected key=value");
    }
    kv[trim(line.substr(0, eq))] = trim(line.substr(eq + 1));
  }
  return kv;
}

std::map<std::string, std::string> RunConfig::to_kv() const {
  std::map<std::string, std::string> kv{
      {"task", to_string(task.kind)},
      {"vocab", std::to_string(task.vocab_size)},
      {"min_len", std::to_string(task.min_len)},
      {"max_len", std::to_string(task.max_len)},
      {"data_seed", std::to_string(task.seed)},
      {"lexicon_seed", std::to_string(task.lexicon_seed)},
      {"distinct_tokens", task.distinct_tokens ? "1" : "0"},
      {"n_train", std::to_string(n_train)},
      {"n_test", std::to_string(n_test)},
      {"n_unlabeled", std::to_string(n_unlabeled)},
      {"d_model", std::to_string(model.d_model)},
      {"n_heads", std::to_string(model.n_heads)},
      {"n_layers", std::to_string(model.n_layers)},
      {"d_ff", std::to_string(model.d_ff)},
      {"length_mode", to_string(model.length_mode)},
      {"n_agents", std::to_string(model.n_agents)},
      {"n_max", std::to_string(model.n_max)},
      {"max_offset", std::to_string(model.max_offset)},
      {"dropout", fmt(model.dropout)},
      {"batch_size", std::to_string(batch_size)},
      {"teacher_epochs", std::to_string(teacher_epochs)},
      {"teacher_lr", fmt(teacher_lr)},
      {"xe_epochs", std::to_string(xe_epochs)},
      {"xe_lr", fmt(xe_lr)},
      {"warmup_steps", std::to_string(warmup_steps)},
      {"clip_norm", fmt(clip_norm)},
      {"cmal_steps", std::to_string(cmal_steps)},
      {"cmal_lr", fmt(cmal_lr)},
      {"cmal_batch_size", std::to_string(cmal_batch_size)},
      {"log_every", std::to_string(log_every)},
      {"baseline", baseline},
      {"k", std::to_string(k)},
      {"lambda", fmt(lambda)},
      {"ma_decay", fmt(ma_decay)},
      {"samples_per_input", std::to_string(samples_per_input)},
      {"reward", to_string(reward)},
      {"beam_width", std::to_string(beam_width)},
      {"weight_init", weight_init ? "1" : "0"},
      {"postprocess", postprocess ? "1" : "0"},
      {"bucket_edges", join_sizes(bucket_edges)},
      {"latency_runs", std::to_string(latency_runs)},
      {"seed", std::to_string(seed)},
      {"out_dir", out_dir.string()},
  };
  return kv;
}

RunConfig RunConfig::from_kv(const std::map<std::string, std::string>& kv, RunConfig c) {
  for (const auto& [key, v] : kv) {
    if (key == "task") c.task.kind = parse_task_kind(v);
    else if (key == "vocab") c.task.vocab_size = to_u64(key, v);
    else if (key == "min_len") c.task.min_len = to_u64(key, v);
    else if (key == "max_len") c.task.max_len = to_u64(key, v);
    else if (key == "data_seed") c.task.seed = to_u64(key, v);
    else if (key == "lexicon_seed") c.task.lexicon_seed = to_u64(key, v);
    else if (key == "distinct_tokens") c.task.distinct_tokens = to_bool(key, v);
    else if (key == "n_train") c.n_train = to_u64(key, v);
    else if (key == "n_test") c.n_test = to_u64(key, v);
    else if (key == "n_unlabeled") c.n_unlabeled = to_u64(key, v);
    else if (key == "d_model") c.model.d_model = to_u64(key, v);
    else if (key == "n_heads") c.model.n_heads = to_u64(key, v);
    else if (key == "n_layers") c.model.n_layers = to_u64(key, v);
    else if (key == "d_ff") c.model.d_ff = to_u64(key, v);
    else if (key == "length_mode") c.model.length_mode = parse_length_mode(v);
    else if (key == "n_agents") c.model.n_agents = to_u64(key, v);
    else if (key == "n_max") c.model.n_max = to_u64(key, v);
    else if (key == "max_offset") c.model.max_offset = static_cast<int>(to_u64(key, v));
    else if (key == "dropout") c.model.dropout = to_double(key, v);
    else if (key == "batch_size") c.batch_size = to_u64(key, v);
    else if (key == "teacher_epochs") c.teacher_epochs = to_u64(key, v);
    else if (key == "teacher_lr") c.teacher_lr = to_double(key, v);
    else if (key == "xe_epochs") c.xe_epochs = to_u64(key, v);
    else if (key == "xe_lr") c.xe_lr = to_double(key, v);
    else if (key == "warmup_steps") c.warmup_steps = to_u64(key, v);
    else if (key == "clip_norm") c.clip_norm = to_double(key, v);
    else if (key == "cmal_steps") c.cmal_steps = to_u64(key, v);
    else if (key == "cmal_lr") c.cmal_lr = to_double(key, v);
    else if (key == "cmal_batch_size") c.cmal_batch_size = to_u64(key, v);
    else if (key == "log_every") c.log_every = to_u64(key, v);
    else if (key == "baseline") c.baseline = v;
    else if (key == "k") c.k = to_u64(key, v);
    else if (key == "lambda") c.lambda = to_double(key, v);
    else if (key == "ma_decay") c.ma_decay = to_double(key, v);
    else if (key == "samples_per_input") c.samples_per_input = to_u64(key, v);
    else if (key == "reward") c.reward = parse_reward_kind(v);
    else if (key == "beam_width") c.beam_width = to_u64(key, v);
    else if (key == "weight_init") c.weight_init = to_bool(key, v);
    else if (key == "postprocess") c.postprocess = to_bool(key, v);
    else if (key == "bucket_edges") c.bucket_edges = to_size_list(key, v);
    else if (key == "latency_runs") c.latency_runs = to_u64(key, v);
    else if (key == "seed") c.seed = to_u64(key, v);
    else if (key == "out_dir") c.out_dir = v;
    else throw std::invalid_argument("unknown config key '" + key + "'");
  }
  c.task.validate();
  c.student_config().validate();
  c.baseline_spec();
  return c;
}

RunConfig RunConfig::from_kv(const std::map<std::string, std::string>& kv) { return from_kv(kv, RunConfig{}); }

RunConfig RunConfig::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open config " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return from_kv(parse_kv_text(ss.str()));
}

std::string RunConfig::text() const {
  std::string out;
  for (const auto& [k, v] : to_kv()) out += k + "=" + v + "\n";
  return out;
}

void RunConfig::save(const std::filesystem::path& path) const {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write config " + path.string());
  out << text();
}

std::string RunConfig::hash() const {
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char ch : text()) {
    h ^= ch;
    h *= 1099511628211ULL;
  }
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << h;
  return os.str();
}

ModelConfig RunConfig::teacher_config() const {
  ModelConfig m = model;
  m.vocab_size = task.model_vocab_size();
  m.decoder = DecoderKind::Autoregressive;
  m.length_mode = LengthMode::Fixed;
  return m;
}

ModelConfig RunConfig::student_config() const {
  ModelConfig m = model;
  m.vocab_size = task.model_vocab_size();
  m.decoder = DecoderKind::NonAutoregressive;
  return m;
}

BaselineSpec RunConfig::baseline_spec() const { return BaselineSpec::parse(baseline, k, lambda, ma_decay); }

Splits generate_splits(const RunConfig& config) {
  Splits splits;
  splits.train = generate_task(config.task, config.n_train, Stream::Train);
  std::set<TokenSequence> seen;
  for (const auto& ex : splits.train) seen.insert(ex.source);
  for (auto& s : generate_sources(config.task, config.n_test, Stream::Test, seen)) {
    Example ex;
    ex.targets.push_back(task_target(config.task, s));
    ex.source = std::move(s);
    splits.test.push_back(std::move(ex));
  }
  return splits;
}

// ---------------------------------------------------------------------------
// Training

std::vector<EpochLog> train_teacher(Seq2Seq& teacher, const ParallelCorpus& corpus, const RunConfig& config,
                                    const EpochCallback& on_epoch) {
  if (teacher.config().decoder != DecoderKind::Autoregressive) {
    throw std::invalid_argument("train_teacher: model must be autoregressive");
  }
  return xe_loop(teacher, corpus, config, config.teacher_epochs, config.teacher_lr, config.seed * 7919 + 11,
                 &ar_xe_loss, on_epoch);
}

std::vector<EpochLog> pretrain_xe(Seq2Seq& student, const ParallelCorpus& corpus, const RunConfig& config,
                                  const EpochCallback& on_epoch) {
  if (student.config().decoder != DecoderKind::NonAutoregressive) {
    throw std::invalid_argument("pretrain_xe: model must be non-autoregressive");
  }
  return xe_loop(student, corpus, config, config.xe_epochs, config.xe_lr, config.seed * 7919 + 23, &na_xe_loss,
                 on_epoch);
}

std::vector<CmalLogRow> train_cmal(Seq2Seq& student, const ParallelCorpus& real, const RunConfig& config,
                                   const BaselineSpec& baseline, const CmalCallback& on_log) {
  require_provenance(real, Provenance::Real, "train-cmal");
  if (real.empty()) throw std::invalid_argument("train-cmal: empty corpus");
  AdamConfig ac;
  ac.lr = config.cmal_lr;
  ac.clip_norm = config.clip_norm;
  Adam opt(student.parameters(), ac);
  RewardFunction reward;
  reward.kind = config.reward;
  DocFreqTable df;
  if (reward.kind == RewardKind::CiderD) {
    std::vector<std::vector<TokenSequence>> refs;
    for (const auto& ex : real) refs.push_back(ex.targets);
    df = DocFreqTable(refs);
    reward.df = &df;
  }
  CmalTrainer trainer(student, opt, baseline, reward, config.samples_per_input, config.seed * 7919 + 37);
  std::mt19937_64 order_rng(config.seed * 7919 + 41);
  std::vector<std::size_t> order = shuffled_indices(real.size(), order_rng);
  std::size_t cursor = 0;
  const std::size_t batch = std::max<std::size_t>(1, config.cmal_batch_size);
  std::vector<CmalLogRow> rows;
  std::vector<Example> chunk;
  for (std::size_t step = 1; step <= config.cmal_steps; ++step) {
    const auto start = Clock::now();
    chunk.clear();
    for (std::size_t i = 0; i < batch; ++i) {
      if (cursor == order.size()) {
        order = shuffled_indices(real.size(), order_rng);
        cursor = 0;
      }
      chunk.push_back(real[order[cursor++]]);
    }
    const StepStats stats = trainer.step(chunk);
    CmalLogRow row{step, stats.mean_reward, stats.mean_baseline, stats.mean_abs_advantage, stats.rescoring_calls,
                   elapsed_ms(start)};
    rows.push_back(row);
    if (on_log) on_log(row);
  }
  return rows;
}

double teacher_forced_accuracy(const Seq2Seq& teacher, const ParallelCorpus& corpus) {
  std::size_t correct = 0, total = 0;
  for (const auto& ex : corpus) {
    TokenSequence input{kBos};
    input.insert(input.end(), ex.target().begin(), ex.target().end());
    TokenSequence expected = ex.target();
    expected.push_back(kEos);
    const Tensor logp = teacher.decode_ar(teacher.encode(ex.source), input);
    const std::size_t V = logp.cols();
    for (std::size_t i = 0; i < expected.size(); ++i) {
      const auto row = logp.data().subspan(i * V, V);
      const auto best = static_cast<TokenId>(std::max_element(row.begin(), row.end()) - row.begin());
      correct += best == expected[i];
      ++total;
    }
  }
  return total == 0 ? 0.0 : static_cast<double>(correct) / static_cast<double>(total);
}

// ---------------------------------------------------------------------------
// Evaluation

std::vector<TokenSequence> decode_corpus(const Seq2Seq& model, const ParallelCorpus& corpus, DecodeMode mode,
                                         std::size_t beam_width, bool postprocess_output) {
  std::vector<TokenSequence> hyps;
  hyps.reserve(corpus.size());
  for (const auto& ex : corpus) {
    TokenSequence h;
    if (mode == DecodeMode::Autoregressive) {
      h = truncate_at_eos(beam_search(model, model.encode(ex.source), beam_width,
                                      decode_max_len(model, ex.source.size())));
    } else {
      h = decode_na_argmax(model, ex.source);
    }
    hyps.push_back(postprocess_output ? postprocess(h) : std::move(h));
  }
  return hyps;
}

EvalReport score_hypotheses(const ParallelCorpus& corpus, std::vector<TokenSequence> hyps,
                            const std::vector<std::size_t>& bucket_edges) {
  if (corpus.size() != hyps.size()) throw std::invalid_argument("score_hypotheses: size mismatch");
  if (corpus.empty()) throw std::invalid_argument("score_hypotheses: empty corpus");
  EvalReport report;
  report.examples = corpus.size();
  std::vector<std::vector<TokenSequence>> refs;
  refs.reserve(corpus.size());
  for (const auto& ex : corpus) refs.push_back(ex.targets);
  const DocFreqTable df(refs);
  report.bleu = corpus_bleu(hyps, refs);
  std::vector<double> gleu(hyps.size()), rep(hyps.size());
  for (std::size_t i = 0; i < hyps.size(); ++i) {
    gleu[i] = 100.0 * sentence_gleu(hyps[i], refs[i]);
    rep[i] = repetition_rate(hyps[i]);
    report.gleu += gleu[i];
    report.cider += cider_d(hyps[i], refs[i], &df);
    report.repetition += rep[i];
  }
  const double n = static_cast<double>(hyps.size());
  report.gleu /= n;
  report.cider /= n;
  report.repetition /= n;

  std::vector<std::size_t> edges = bucket_edges;
  std::sort(edges.begin(), edges.end());
  if (edges.empty() || edges.front() > 0) edges.insert(edges.begin(), 0);
  for (std::size_t b = 0; b < edges.size(); ++b) {
    BucketScore bucket;
    bucket.lo = edges[b];
    bucket.hi = b + 1 < edges.size() ? edges[b + 1] : 0;
    std::vector<TokenSequence> bh;
    std::vector<std::vector<TokenSequence>> br;
    for (std::size_t i = 0; i < hyps.size(); ++i) {
      const std::size_t len = corpus[i].source.size();
      if (len < bucket.lo || (bucket.hi != 0 && len >= bucket.hi)) continue;
      bh.push_back(hyps[i]);
      br.push_back(refs[i]);
      bucket.gleu += gleu[i];
      bucket.repetition += rep[i];
    }
    bucket.count = bh.size();
    if (bucket.count == 0) continue;
    bucket.gleu /= static_cast<double>(bucket.count);
    bucket.repetition /= static_cast<double>(bucket.count);
    bucket.bleu = corpus_bleu(bh, br);
    report.buckets.push_back(bucket);
  }
  report.hypotheses = std::move(hyps);
  return report;
}

EvalReport evaluate(const Seq2Seq& model, const ParallelCorpus& corpus, DecodeMode mode, bool postprocess_output,
                    const RunConfig& config) {
  auto hyps = decode_corpus(model, corpus, mode, config.beam_width, postprocess_output);
  EvalReport report = score_hypotheses(corpus, std::move(hyps), config.bucket_edges);

  const std::size_t timed = std::min<std::size_t>(corpus.size(), 20);
  const std::size_t runs = std::max<std::size_t>(3, config.latency_runs);
  double total_ms = 0.0;
  for (std::size_t r = 0; r < runs; ++r) {
    const auto start = Clock::now();
    for (std::size_t i = 0; i < timed; ++i) {
      const auto& src = corpus[i].source;
      if (mode == DecodeMode::Autoregressive) {
        (void)beam_search(model, model.encode(src), config.beam_width, decode_max_len(model, src.size()));
      } else {
        (void)decode_na_argmax(model, src);
      }
    }
    total_ms += elapsed_ms(start);
  }
  report.latency_ms = total_ms / static_cast<double>(runs * timed);
  return report;
}

std::vector<LatencyRow> bench_latency(const Seq2Seq& teacher, const Seq2Seq& student,
                                      const std::vector<std::size_t>& lengths, std::span<const TokenId> source,
                                      std::size_t runs, std::size_t reps_per_run) {
  if (teacher.config().decoder != DecoderKind::Autoregressive) throw std::invalid_argument("bench: teacher must be AR");
  if (student.config().decoder != DecoderKind::NonAutoregressive) throw std::invalid_argument("bench: student must be NA");
  runs = std::max<std::size_t>(runs, 3);
  reps_per_run = std::max<std::size_t>(reps_per_run, 1);
  auto median = [](std::vector<double> v) {
    std::sort(v.begin(), v.end());
    return v.size() % 2 ? v[v.size() / 2] : 0.5 * (v[v.size() / 2 - 1] + v[v.size() / 2]);
  };
  std::vector<std::size_t> agents;
  for (std::size_t length : lengths) {
    if (length > teacher.config().n_max) throw std::invalid_argument("bench: length exceeds teacher n_max");
    agents.push_back(length);
    if (student.config().length_mode == LengthMode::Fixed) {
      agents.back() = student.config().n_agents;
      if (length > agents.back()) {
        throw std::invalid_argument("bench: length " + std::to_string(length) + " exceeds the student's " +
                                    std::to_string(agents.back()) + " agents");
      }
    }
    (void)greedy_decode(teacher, teacher.encode(source), length, false);
    (void)argmax_joint(student.decode_na(student.encode(source), agents.back()));
  }
  std::vector<std::vector<double>> ar(lengths.size()), na(lengths.size());
  for (std::size_t r = 0; r < runs; ++r) {
    for (std::size_t j = 0; j < lengths.size(); ++j) {
      auto start = Clock::now();
      for (std::size_t i = 0; i < reps_per_run; ++i) {
        const TokenSequence out = greedy_decode(teacher, teacher.encode(source), lengths[j], false);
        if (out.size() != lengths[j]) throw std::logic_error("forced-length decode produced the wrong length");
      }
      ar[j].push_back(elapsed_ms(start) / static_cast<double>(reps_per_run));
      start = Clock::now();
      for (std::size_t i = 0; i < reps_per_run; ++i) {
        const PolicyMatrix policy = student.decode_na(student.encode(source), agents[j]);
        (void)argmax_joint(policy);
      }
      na[j].push_back(elapsed_ms(start) / static_cast<double>(reps_per_run));
    }
  }
  std::vector<LatencyRow> rows;
  for (std::size_t j = 0; j < lengths.size(); ++j) {
    LatencyRow row{lengths[j], median(ar[j]), median(na[j]), 0.0};
    row.speedup = row.ar_ms / row.na_ms;
    rows.push_back(row);
  }
  return rows;
}

void write_eval_csv(const EvalReport& report, const std::string& label, std::ostream& out, bool header) {
  if (header) out << "label,scope,lo,hi,count,bleu,gleu,cider,repetition,latency_ms\n";
  out << label << ",all,,," << report.examples << ',' << fmt(report.bleu) << ',' << fmt(report.gleu) << ','
      << fmt(report.cider) << ',' << fmt(report.repetition) << ',' << fmt(report.latency_ms) << '\n';
  for (const auto& b : report.buckets) {
    out << label << ",bucket," << b.lo << ',' << (b.hi == 0 ? std::string() : std::to_string(b.hi)) << ','
        << b.count << ',' << fmt(b.bleu) << ',' << fmt(b.gleu) << ",," << fmt(b.repetition) << ",\n";
  }
}

// ---------------------------------------------------------------------------
// Manifest

Manifest::Manifest(std::filesystem::path out_dir) : path_(std::move(out_dir) / "manifest.tsv") {
  std::ifstream in(path_);
  std::string line;
  while (std::getline(in, line)) {
    std::stringstream ss(line);
    std::string artifact, kind, hash;
    if (std::getline(ss, artifact, '\t') && std::getline(ss, kind, '\t') && std::getline(ss, hash)) {
      if (artifact != "artifact") entries_[artifact] = {kind, hash};
    }
  }
}

void Manifest::record(const std::string& artifact, const std::string& kind, const std::string& config_hash) {
  entries_[artifact] = {kind, config_hash};
  std::ofstream out(path_);
  out << "artifact\tkind\tconfig_hash\n";
  for (const auto& [a, e] : entries_) out << a << '\t' << e.first << '\t' << e.second << '\n';
}

// ---------------------------------------------------------------------------
// Commands

void cmd_gen_data(const RunConfig& config) {
  const auto dir = ensure_out_dir(config);
  Manifest manifest(dir);
  const Splits splits = generate_splits(config);
  save_corpus(splits.train, dir / "train.tsv");
  save_corpus(splits.test, dir / "test.tsv");
  Vocabulary::synthetic(config.task.vocab_size).save(dir / "vocab.txt");
  manifest.record("config.txt", "config", config.hash());
  manifest.record("train.tsv", "corpus", config.hash());
  manifest.record("test.tsv", "corpus", config.hash());
  manifest.record("vocab.txt", "vocabulary", config.hash());
}

void cmd_train_teacher(const RunConfig& config, const std::optional<std::filesystem::path>& resume) {
  const auto dir = ensure_out_dir(config);
  Manifest manifest(dir);
  const ParallelCorpus train = load_real(config, "train.tsv");
  Seq2Seq teacher = resume ? Seq2Seq::load(*resume) : Seq2Seq(config.teacher_config(), config.seed * 1000 + 1);
  const auto logs = train_teacher(teacher, train, config, [](const EpochLog& l) {
    std::cerr << "teacher epoch " << l.epoch << " loss " << l.loss << " (" << l.wall_ms << " ms)\n";
  });
  teacher.save(dir / "teacher.ckpt");
  write_epoch_csv(logs, dir / "teacher_log.csv");
  manifest.record("teacher.ckpt", "checkpoint", config.hash());
  manifest.record("teacher_log.csv", "log", config.hash());
}

void cmd_distill(const RunConfig& config) {
  const auto dir = ensure_out_dir(config);
  Manifest manifest(dir);
  const Seq2Seq teacher = Seq2Seq::load(dir / "teacher.ckpt");
  const ParallelCorpus train = load_real(config, "train.tsv");
  std::vector<TokenSequence> sources;
  for (const auto& ex : train) sources.push_back(ex.source);
  const std::size_t max_len = std::min(teacher.config().n_max, 2 * config.task.max_len + 2);
  ParallelCorpus distilled = distill(teacher, sources, config.beam_width, max_len);
  ParallelCorpus extra = augment_unlabeled(config.task, config.n_unlabeled, teacher, train, config.beam_width, max_len);
  distilled.insert(distilled.end(), extra.begin(), extra.end());
  save_corpus(distilled, dir / "distilled.tsv");
  manifest.record("distilled.tsv", "corpus", config.hash());
}

void cmd_pretrain_xe(const RunConfig& config) {
  const auto dir = ensure_out_dir(config);
  Manifest manifest(dir);
  ParallelCorpus corpus = load_real(config, "train.tsv");
  require_provenance(corpus, Provenance::Real, "pretrain-xe (train.tsv)");
  if (std::filesystem::exists(dir / "distilled.tsv")) {
    ParallelCorpus distilled = load_corpus(dir / "distilled.tsv");
    require_provenance(distilled, Provenance::Distilled, "pretrain-xe (distilled.tsv)");
    corpus.insert(corpus.end(), distilled.begin(), distilled.end());
  }
  Seq2Seq student(config.student_config(), config.seed * 1000 + 2);
  std::vector<std::string> skipped;
  if (config.weight_init) {
    const Seq2Seq teacher = Seq2Seq::load(dir / "teacher.ckpt");
    skipped = init_from_teacher(student, teacher);
  }
  const auto logs = pretrain_xe(student, corpus, config, [](const EpochLog& l) {
    std::cerr << "xe epoch " << l.epoch << " loss " << l.loss << " (" << l.wall_ms << " ms)\n";
  });
  student.save(dir / "xe.ckpt");
  write_epoch_csv(logs, dir / "xe_log.csv");
  {
    std::ofstream report(dir / "xe_report.txt");
    report << "weight_init=" << (config.weight_init ? 1 : 0) << '\n';
    report << "real_pairs=" << count_provenance(corpus, Provenance::Real) << '\n';
    report << "distilled_pairs=" << count_provenance(corpus, Provenance::Distilled) << '\n';
    report << "skipped_parameters=";
    for (std::size_t i = 0; i < skipped.size(); ++i) report << (i ? "," : "") << skipped[i];
    report << '\n';
  }
  manifest.record("xe.ckpt", "checkpoint", config.hash());
  manifest.record("xe_log.csv", "log", config.hash());
  manifest.record("xe_report.txt", "report", config.hash());
}

void cmd_train_cmal(const RunConfig& config) {
  const auto dir = ensure_out_dir(config);
  Manifest manifest(dir);
  const ParallelCorpus real = load_real(config, "train.tsv");
  Seq2Seq student = Seq2Seq::load(dir / "xe.ckpt");
  std::ofstream log(dir / "cmal_log.csv");
  write_cmal_csv({}, log, true);
  train_cmal(student, real, config, config.baseline_spec(), [&](const CmalLogRow& row) {
    write_cmal_csv({row}, log, false);
    if (config.log_every && row.step % config.log_every == 0) {
      std::cerr << "cmal step " << row.step << " reward " << row.mean_reward << '\n';
    }
  });
  student.save(dir / "cmal.ckpt");
  manifest.record("cmal.ckpt", "checkpoint", config.hash());
  manifest.record("cmal_log.csv", "log", config.hash());
}

EvalReport cmd_evaluate(const RunConfig& config, const std::filesystem::path& checkpoint,
                        const std::filesystem::path& corpus_path, DecodeMode mode, bool postprocess_output) {
  const auto dir = ensure_out_dir(config);
  Manifest manifest(dir);
  const Seq2Seq model = Seq2Seq::load(checkpoint);
  const ParallelCorpus corpus = load_corpus(corpus_path);
  const EvalReport report = evaluate(model, corpus, mode, postprocess_output, config);
  const std::string label = checkpoint.stem().string() + (mode == DecodeMode::Autoregressive ? "_ar" : "_na") +
                            (postprocess_output ? "_pp" : "");
  const std::string name = "eval_" + label + ".csv";
  std::ofstream out(dir / name);
  write_eval_csv(report, label, out, true);
  manifest.record(name, "evaluation", config.hash());
  return report;
}

std::vector<LatencyRow> cmd_bench_latency(const RunConfig& config, const std::filesystem::path& teacher_path,
                                          const std::filesystem::path& student_path,
                                          const std::vector<std::size_t>& lengths) {
  const auto dir = ensure_out_dir(config);
  Manifest manifest(dir);
  const Seq2Seq teacher = Seq2Seq::load(teacher_path);
  const Seq2Seq student = Seq2Seq::load(student_path);
  const TokenSequence source = generate_sources(config.task, 1, Stream::Test).front();
  const auto rows = bench_latency(teacher, student, lengths, source, config.latency_runs);
  std::ofstream out(dir / "latency.csv");
  out << "length,ar_ms,na_ms,speedup\n";
  for (const auto& r : rows) out << r.length << ',' << fmt(r.ar_ms) << ',' << fmt(r.na_ms) << ',' << fmt(r.speedup) << '\n';
  manifest.record("latency.csv", "benchmark", config.hash());
  return rows;
}

void cmd_ablate_topk(const RunConfig& config, const std::vector<std::size_t>& ks) {
  const auto dir = ensure_out_dir(config);
  Manifest manifest(dir);
  const ParallelCorpus real = load_real(config, "train.tsv");
  const ParallelCorpus test = load_corpus(dir / "test.tsv");
  const Seq2Seq base = Seq2Seq::load(dir / "xe.ckpt");
  std::ofstream out(dir / "topk.csv");
  out << "k,final_train_reward,test_gleu\n";
  for (std::size_t k : ks) {
    RunConfig c = config;
    c.k = k;
    Seq2Seq student = base.clone();
    const auto rows = train_cmal(student, real, c, c.baseline_spec());
    const EvalReport report = score_hypotheses(test, decode_corpus(student, test, DecodeMode::NonAutoregressive,
                                                                   c.beam_width, false),
                                               c.bucket_edges);
    out << k << ',' << fmt(tail_mean_reward(rows, 20)) << ',' << fmt(report.gleu) << '\n';
    std::cerr << "k=" << k << " test gleu " << report.gleu << '\n';
  }
  manifest.record("topk.csv", "ablation", config.hash());
}

void cmd_ablate_baselines(const RunConfig& config, const std::vector<std::string>& baselines) {
  const auto dir = ensure_out_dir(config);
  Manifest manifest(dir);
  const ParallelCorpus real = load_real(config, "train.tsv");
  const ParallelCorpus test = load_corpus(dir / "test.tsv");
  const Seq2Seq base = Seq2Seq::load(dir / "xe.ckpt");
  std::ofstream curves(dir / "baseline_curves.csv");
  write_cmal_csv({}, curves, true, "run");
  std::ofstream summary(dir / "baselines.csv");
  summary << "run,final_train_reward,test_gleu,test_bleu,test_repetition\n";
  for (const std::string& spec : baselines) {
    // "name" or "name@lambda" for the lambda sweep.
    RunConfig c = config;
    std::string name = spec;
    if (auto at = spec.find('@'); at != std::string::npos) {
      name = spec.substr(0, at);
      c.lambda = to_double("lambda", spec.substr(at + 1));
    }
    c.baseline = name;
    Seq2Seq student = base.clone();
    const auto rows = train_cmal(student, real, c, c.baseline_spec());
    write_cmal_csv(rows, curves, false, spec);
    const EvalReport report = score_hypotheses(test, decode_corpus(student, test, DecodeMode::NonAutoregressive,
                                                                   c.beam_width, false),
                                               c.bucket_edges);
    summary << spec << ',' << fmt(tail_mean_reward(rows, 20)) << ',' << fmt(report.gleu) << ','
            << fmt(report.bleu) << ',' << fmt(report.repetition) << '\n';
    std::cerr << spec << " test gleu " << report.gleu << '\n';
  }
  manifest.record("baseline_curves.csv", "ablation", config.hash());
  manifest.record("baselines.csv", "ablation", config.hash());
}

void cmd_ablate_unlabeled(const RunConfig& config, const std::vector<std::size_t>& counts) {
  const auto dir = ensure_out_dir(config);
  Manifest manifest(dir);
  const ParallelCorpus real = load_real(config, "train.tsv");
  const ParallelCorpus test = load_corpus(dir / "test.tsv");
  const Seq2Seq teacher = Seq2Seq::load(dir / "teacher.ckpt");
  std::vector<TokenSequence> sources;
  for (const auto& ex : real) sources.push_back(ex.source);
  const std::size_t max_len = std::min(teacher.config().n_max, 2 * config.task.max_len + 2);
  const ParallelCorpus distilled = distill(teacher, sources, config.beam_width, max_len);
  std::ofstream out(dir / "unlabeled.csv");
  out << "n_unlabeled,test_gleu,test_bleu\n";
  for (std::size_t n : counts) {
    ParallelCorpus corpus = real;
    corpus.insert(corpus.end(), distilled.begin(), distilled.end());
    const ParallelCorpus extra = augment_unlabeled(config.task, n, teacher, real, config.beam_width, max_len);
    corpus.insert(corpus.end(), extra.begin(), extra.end());
    Seq2Seq student(config.student_config(), config.seed * 1000 + 2);
    if (config.weight_init) init_from_teacher(student, teacher);
    pretrain_xe(student, corpus, config);
    const EvalReport report = score_hypotheses(
        test, decode_corpus(student, test, DecodeMode::NonAutoregressive, config.beam_width, false),
        config.bucket_edges);
    out << n << ',' << fmt(report.gleu) << ',' << fmt(report.bleu) << '\n';
    std::cerr << "unlabeled=" << n << " test gleu " << report.gleu << '\n';
  }
  manifest.record("unlabeled.csv", "ablation", config.hash());
}

}  // namespace cmal
