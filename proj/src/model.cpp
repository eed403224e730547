#include "cmal/model.hpp"

#include <algorithm>
#include <bit>
#include <charconv>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <sstream>
#include <stdexcept>

namespace cmal {

namespace {

constexpr char kCheckpointMagic[8] = {'C', 'M', 'A', 'L', 'C', 'K', 'P', 'T'};
constexpr std::uint32_t kCheckpointVersion = 1;
constexpr double kMaskedScore = -1e9;

std::string format_double(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

double parse_double(const std::string& s) {
  double v = 0.0;
  auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc{} || res.ptr != s.data() + s.size()) {
    throw std::invalid_argument("not a number: '" + s + "'");
  }
  return v;
}

std::size_t parse_size(const std::string& s) {
  std::size_t v = 0;
  auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc{} || res.ptr != s.data() + s.size()) {
    throw std::invalid_argument("not a non-negative integer: '" + s + "'");
  }
  return v;
}

void write_u32(std::ostream& out, std::uint32_t v) {
  unsigned char b[4];
  for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
  out.write(reinterpret_cast<const char*>(b), 4);
}

void write_u64(std::ostream& out, std::uint64_t v) {
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
  out.write(reinterpret_cast<const char*>(b), 8);
}

std::uint32_t read_u32(std::istream& in) {
  unsigned char b[4];
  if (!in.read(reinterpret_cast<char*>(b), 4)) throw std::runtime_error("checkpoint truncated");
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b[i]) << (8 * i);
  return v;
}

std::uint64_t read_u64(std::istream& in) {
  unsigned char b[8];
  if (!in.read(reinterpret_cast<char*>(b), 8)) throw std::runtime_error("checkpoint truncated");
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
  return v;
}

std::string read_string(std::istream& in) {
  const std::uint32_t n = read_u32(in);
  std::string s(n, '\0');
  if (!in.read(s.data(), n)) throw std::runtime_error("checkpoint truncated");
  return s;
}

Tensor causal_mask(std::size_t n) {
  std::vector<double> m(n * n, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j) m[i * n + j] = kMaskedScore;
  return Tensor::matrix(n, n, std::move(m));
}

}  // namespace

std::string to_string(DecoderKind kind) { return kind == DecoderKind::Autoregressive ? "ar" : "na"; }
std::string to_string(LengthMode mode) { return mode == LengthMode::Fixed ? "fixed" : "predicted"; }

DecoderKind parse_decoder_kind(const std::string& text) {
  if (text == "ar") return DecoderKind::Autoregressive;
  if (text == "na") return DecoderKind::NonAutoregressive;
  throw std::invalid_argument("unknown decoder kind '" + text + "' (expected ar|na)");
}

LengthMode parse_length_mode(const std::string& text) {
  if (text == "fixed") return LengthMode::Fixed;
  if (text == "predicted") return LengthMode::Predicted;
  throw std::invalid_argument("unknown length mode '" + text + "' (expected fixed|predicted)");
}

void ModelConfig::validate() const {
  if (d_model == 0 || n_heads == 0 || d_model % n_heads != 0) {
    throw std::invalid_argument("d_model (" + std::to_string(d_model) + ") must be divisible by n_heads (" +
                                std::to_string(n_heads) + ")");
  }
  if (n_agents < 1) throw std::invalid_argument("n_agents must be >= 1");
  if (n_max < 1) throw std::invalid_argument("n_max must be >= 1");
  if (n_agents > n_max) throw std::invalid_argument("n_agents exceeds n_max");
  if (vocab_size <= static_cast<std::size_t>(kNumReserved)) {
    throw std::invalid_argument("vocab_size must exceed the reserved ids");
  }
  if (n_layers == 0 || d_ff == 0 || max_source_len == 0) throw std::invalid_argument("empty model dimension");
  if (max_offset < 0) throw std::invalid_argument("max_offset must be >= 0");
  if (dropout < 0.0 || dropout >= 1.0) throw std::invalid_argument("dropout must lie in [0, 1)");
}

std::map<std::string, std::string> ModelConfig::to_kv() const {
  return {
      {"vocab_size", std::to_string(vocab_size)},
      {"d_model", std::to_string(d_model)},
      {"n_heads", std::to_string(n_heads)},
      {"n_layers", std::to_string(n_layers)},
      {"d_ff", std::to_string(d_ff)},
      {"max_source_len", std::to_string(max_source_len)},
      {"decoder", to_string(decoder)},
      {"length_mode", to_string(length_mode)},
      {"n_agents", std::to_string(n_agents)},
      {"n_max", std::to_string(n_max)},
      {"max_offset", std::to_string(max_offset)},
      {"dropout", format_double(dropout)},
      {"source_positions", source_positions ? "1" : "0"},
  };
}

ModelConfig ModelConfig::from_kv(const std::map<std::string, std::string>& kv) {
  ModelConfig c;
  for (const auto& [key, value] : kv) {
    if (key == "vocab_size") c.vocab_size = parse_size(value);
    else if (key == "d_model") c.d_model = parse_size(value);
    else if (key == "n_heads") c.n_heads = parse_size(value);
    else if (key == "n_layers") c.n_layers = parse_size(value);
    else if (key == "d_ff") c.d_ff = parse_size(value);
    else if (key == "max_source_len") c.max_source_len = parse_size(value);
    else if (key == "decoder") c.decoder = parse_decoder_kind(value);
    else if (key == "length_mode") c.length_mode = parse_length_mode(value);
    else if (key == "n_agents") c.n_agents = parse_size(value);
    else if (key == "n_max") c.n_max = parse_size(value);
    else if (key == "max_offset") c.max_offset = static_cast<int>(parse_size(value));
    else if (key == "dropout") c.dropout = parse_double(value);
    else if (key == "source_positions") c.source_positions = value != "0";
    else throw std::invalid_argument("unknown model config key '" + key + "'");
  }
  c.validate();
  return c;
}

Tensor positional_encoding(std::size_t length, std::size_t d_model) {
  std::vector<double> pe(length * d_model);
  for (std::size_t p = 0; p < length; ++p)
    for (std::size_t i = 0; i < d_model; i += 2) {
      const double angle =
          static_cast<double>(p) / std::pow(10000.0, static_cast<double>(i) / static_cast<double>(d_model));
      pe[p * d_model + i] = std::sin(angle);
      if (i + 1 < d_model) pe[p * d_model + i + 1] = std::cos(angle);
    }
  return Tensor::matrix(length, d_model, std::move(pe));
}

PolicyMatrix PolicyMatrix::from_log_probs(Tensor log_probs) {
  PolicyMatrix p;
  p.agents = log_probs.rows();
  p.vocab = log_probs.cols();
  p.probs.resize(log_probs.numel());
  for (std::size_t i = 0; i < p.probs.size(); ++i) p.probs[i] = std::exp(log_probs.data()[i]);
  p.log_probs = std::move(log_probs);
  return p;
}

std::size_t length_offset_class(std::size_t source_len, std::size_t target_len, int max_offset) {
  const long offset = static_cast<long>(target_len) - static_cast<long>(source_len);
  const long clamped = std::clamp<long>(offset, -max_offset, max_offset);
  return static_cast<std::size_t>(clamped + max_offset);
}

Tensor Attention::operator()(const Tensor& query, const Tensor& memory, const Tensor* mask) const {
  const Tensor Q = q(query);
  const Tensor K = k(memory);
  const Tensor V = v(memory);
  const std::size_t dh = Q.cols() / heads;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
  std::vector<Tensor> outs;
  outs.reserve(heads);
  for (std::size_t h = 0; h < heads; ++h) {
    const Tensor qh = heads == 1 ? Q : slice(Q, 1, h * dh, dh);
    const Tensor kh = heads == 1 ? K : slice(K, 1, h * dh, dh);
    const Tensor vh = heads == 1 ? V : slice(V, 1, h * dh, dh);
    Tensor scores = scale(matmul(qh, transpose(kh)), inv_sqrt);
    if (mask != nullptr) scores = add(scores, *mask);
    outs.push_back(matmul(softmax(scores, -1), vh));
  }
  return o(heads == 1 ? outs.front() : concat(outs, 1));
}

// ---------------------------------------------------------------------------

Seq2Seq::Seq2Seq(ModelConfig config, std::uint64_t seed)
    : config_(std::move(config)), init_rng_(seed), dropout_rng_(seed ^ 0x9e3779b97f4a7c15ULL) {
  config_.validate();
  const std::size_t d = config_.d_model, V = config_.vocab_size;
  {
    std::normal_distribution<double> normal(0.0, 1.0 / std::sqrt(static_cast<double>(d)));
    std::vector<double> e(V * d);
    for (double& x : e) x = normal(init_rng_);
    embedding_ = register_parameter("embed", Tensor::matrix(V, d, std::move(e), true));
  }
  for (std::size_t l = 0; l < config_.n_layers; ++l) {
    const std::string p = "enc." + std::to_string(l) + ".";
    EncoderLayer layer;
    layer.attn_norm = make_norm(p + "attn_norm", d);
    layer.attn = make_attention(p + "attn");
    layer.ffn_norm = make_norm(p + "ffn_norm", d);
    layer.ffn = {make_linear(p + "ffn.in", d, config_.d_ff), make_linear(p + "ffn.out", config_.d_ff, d)};
    encoder_.push_back(std::move(layer));
  }
  encoder_norm_ = make_norm("enc.norm", d);
  for (std::size_t l = 0; l < config_.n_layers; ++l) {
    const std::string p = "dec." + std::to_string(l) + ".";
    DecoderLayer layer;
    layer.self_norm = make_norm(p + "self_norm", d);
    layer.self_attn = make_attention(p + "self");
    layer.cross_norm = make_norm(p + "cross_norm", d);
    layer.cross_attn = make_attention(p + "cross");
    layer.ffn_norm = make_norm(p + "ffn_norm", d);
    layer.ffn = {make_linear(p + "ffn.in", d, config_.d_ff), make_linear(p + "ffn.out", config_.d_ff, d)};
    decoder_.push_back(std::move(layer));
  }
  decoder_norm_ = make_norm("dec.norm", d);
  output_ = make_linear("out", d, V);
  if (config_.decoder == DecoderKind::NonAutoregressive && config_.length_mode == LengthMode::Predicted) {
    length_head_ = make_linear("length", d, static_cast<std::size_t>(2 * config_.max_offset + 1));
    has_length_head_ = true;
  }
}

Seq2Seq Seq2Seq::clone() const {
  Seq2Seq copy(config_, 0);
  for (std::size_t i = 0; i < params_.size(); ++i) {
    auto dst = copy.params_[i].second.data();
    auto src = params_[i].second.data();
    std::copy(src.begin(), src.end(), dst.begin());
  }
  copy.training_ = training_;
  return copy;
}

Tensor Seq2Seq::register_parameter(const std::string& name, Tensor t) {
  t.set_requires_grad(true);
  params_.emplace_back(name, t);
  return t;
}

Linear Seq2Seq::make_linear(const std::string& name, std::size_t in, std::size_t out) {
  const double limit = std::sqrt(6.0 / static_cast<double>(in + out));
  std::uniform_real_distribution<double> uni(-limit, limit);
  std::vector<double> w(in * out);
  for (double& x : w) x = uni(init_rng_);
  Linear lin;
  lin.weight = register_parameter(name + ".w", Tensor::matrix(in, out, std::move(w)));
  lin.bias = register_parameter(name + ".b", Tensor::zeros({out}));
  return lin;
}

Norm Seq2Seq::make_norm(const std::string& name, std::size_t d) {
  Norm n;
  n.gain = register_parameter(name + ".gain", Tensor::filled({d}, 1.0));
  n.bias = register_parameter(name + ".bias", Tensor::zeros({d}));
  return n;
}

Attention Seq2Seq::make_attention(const std::string& name) {
  const std::size_t d = config_.d_model;
  Attention a;
  a.q = make_linear(name + ".q", d, d);
  a.k = make_linear(name + ".k", d, d);
  a.v = make_linear(name + ".v", d, d);
  a.o = make_linear(name + ".o", d, d);
  a.heads = config_.n_heads;
  return a;
}

std::size_t Seq2Seq::parameter_count() const {
  std::size_t n = 0;
  for (const auto& [name, t] : params_) n += t.numel();
  return n;
}

Tensor* Seq2Seq::find_parameter(const std::string& name) {
  for (auto& [n, t] : params_)
    if (n == name) return &t;
  return nullptr;
}

void Seq2Seq::zero_grad() {
  for (auto& [name, t] : params_) t.zero_grad();
}

void Seq2Seq::set_training(bool training, std::uint64_t seed) {
  training_ = training;
  dropout_rng_.seed(seed);
}

Tensor Seq2Seq::maybe_dropout(const Tensor& x) const {
  if (!training_ || config_.dropout == 0.0) return x;
  return dropout(x, config_.dropout, dropout_rng_);
}

Tensor Seq2Seq::embed_tokens(std::span<const TokenId> ids) const {
  return scale(embedding_gather(embedding_, ids), std::sqrt(static_cast<double>(config_.d_model)));
}

Tensor Seq2Seq::encode(std::span<const TokenId> source) const {
  if (source.empty()) throw std::invalid_argument("encode: empty source");
  return encode_features(embed_tokens(source));
}

Tensor Seq2Seq::encode_features(const Tensor& embedded) const {
  if (embedded.dim() != 2 || embedded.cols() != config_.d_model) {
    throw ShapeError("encode: expected n x " + std::to_string(config_.d_model) + " input, got " +
                     shape_str(embedded.shape()));
  }
  const std::size_t n = embedded.rows();
  if (n == 0) throw std::invalid_argument("encode: empty source");
  if (n > config_.max_source_len) {
    throw std::invalid_argument("encode: source length " + std::to_string(n) + " exceeds max_source_len " +
                                std::to_string(config_.max_source_len));
  }
  Tensor x = config_.source_positions ? add(embedded, positional_encoding(n, config_.d_model)) : embedded;
  x = maybe_dropout(x);
  for (const EncoderLayer& layer : encoder_) {
    const Tensor h = layer.attn_norm(x);
    x = add(x, maybe_dropout(layer.attn(h, h, nullptr)));
    x = add(x, maybe_dropout(layer.ffn(layer.ffn_norm(x))));
  }
  return encoder_norm_(x);
}

Tensor Seq2Seq::run_decoder(Tensor x, const Tensor& context, const Tensor* self_mask) const {
  x = maybe_dropout(x);
  for (const DecoderLayer& layer : decoder_) {
    const Tensor h = layer.self_norm(x);
    x = add(x, maybe_dropout(layer.self_attn(h, h, self_mask)));
    x = add(x, maybe_dropout(layer.cross_attn(layer.cross_norm(x), context, nullptr)));
    x = add(x, maybe_dropout(layer.ffn(layer.ffn_norm(x))));
  }
  return decoder_norm_(x);
}

PolicyMatrix Seq2Seq::decode_na(const Tensor& context, std::size_t length) const {
  if (length < 1 || length > config_.n_max) {
    throw std::invalid_argument("decode_na: length " + std::to_string(length) + " outside [1, " +
                                std::to_string(config_.n_max) + "]");
  }
  // Inputs are positional encodings only and no causal mask is applied.
  Tensor states = run_decoder(positional_encoding(length, config_.d_model), context, nullptr);
  Tensor logp = log_softmax(output_(states), -1);
  PolicyMatrix policy = PolicyMatrix::from_log_probs(std::move(logp));
  policy.states = std::move(states);
  return policy;
}

std::size_t Seq2Seq::inference_length(const Tensor& context, std::size_t source_len) const {
  if (config_.length_mode == LengthMode::Fixed) return config_.n_agents;
  return predict_length(context, source_len).predicted_length;
}

Tensor Seq2Seq::decode_ar(const Tensor& context, std::span<const TokenId> prefix) const {
  if (prefix.empty() || prefix.front() != kBos) throw std::invalid_argument("decode_ar: prefix must start with bos");
  if (prefix.size() > config_.n_max + 1) {
    throw std::invalid_argument("decode_ar: prefix length " + std::to_string(prefix.size()) + " exceeds n_max + 1");
  }
  const std::size_t n = prefix.size();
  const Tensor mask = causal_mask(n);
  Tensor x = add(embed_tokens(prefix), positional_encoding(n, config_.d_model));
  return log_softmax(output_(run_decoder(std::move(x), context, &mask)), -1);
}

std::vector<double> Seq2Seq::decode_ar_step(const Tensor& context, std::span<const TokenId> prefix) const {
  const Tensor logp = decode_ar(context, prefix);
  const std::size_t V = logp.cols(), last = logp.rows() - 1;
  std::vector<double> dist(V);
  for (std::size_t u = 0; u < V; ++u) dist[u] = std::exp(logp.data()[last * V + u]);
  return dist;
}

Tensor Seq2Seq::length_log_probs(const Tensor& context) const {
  if (!has_length_head_) throw std::logic_error("model has no length predictor");
  if (context.rows() == 0) throw std::invalid_argument("length prediction on empty context");
  return log_softmax(length_head_(mean_rows(context)), -1);
}

LengthPrediction Seq2Seq::predict_length(const Tensor& context, std::size_t source_len) const {
  const Tensor logp = length_log_probs(context);
  LengthPrediction pred;
  pred.offset_logits.assign(logp.data().begin(), logp.data().end());
  const auto best = static_cast<long>(
      std::max_element(pred.offset_logits.begin(), pred.offset_logits.end()) - pred.offset_logits.begin());
  const long length = static_cast<long>(source_len) + best - config_.max_offset;
  pred.predicted_length = static_cast<std::size_t>(std::clamp<long>(length, 1, static_cast<long>(config_.n_max)));
  return pred;
}

void Seq2Seq::save(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write checkpoint " + path.string());
  out.write(kCheckpointMagic, sizeof kCheckpointMagic);
  write_u32(out, kCheckpointVersion);
  std::string header;
  for (const auto& [k, v] : config_.to_kv()) header += k + "=" + v + "\n";
  write_u32(out, static_cast<std::uint32_t>(header.size()));
  out.write(header.data(), static_cast<std::streamsize>(header.size()));
  write_u32(out, static_cast<std::uint32_t>(params_.size()));
  for (const auto& [name, t] : params_) {
    write_u32(out, static_cast<std::uint32_t>(name.size()));
    out.write(name.data(), static_cast<std::streamsize>(name.size()));
    write_u32(out, static_cast<std::uint32_t>(t.dim()));
    for (std::size_t d : t.shape()) write_u64(out, d);
    for (double v : t.data()) write_u64(out, std::bit_cast<std::uint64_t>(v));
  }
  if (!out) throw std::runtime_error("failed writing checkpoint " + path.string());
}

Seq2Seq Seq2Seq::load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open checkpoint " + path.string());
  char magic[8];
  if (!in.read(magic, 8) || std::memcmp(magic, kCheckpointMagic, 8) != 0) {
    throw std::runtime_error(path.string() + " is not a checkpoint");
  }
  const std::uint32_t version = read_u32(in);
  if (version != kCheckpointVersion) {
    throw std::runtime_error("unsupported checkpoint version " + std::to_string(version));
  }
  std::map<std::string, std::string> kv;
  {
    std::istringstream header(read_string(in));
    std::string line;
    while (std::getline(header, line)) {
      const auto eq = line.find('=');
      if (eq == std::string::npos) throw std::runtime_error("bad checkpoint header line '" + line + "'");
      kv[line.substr(0, eq)] = line.substr(eq + 1);
    }
  }
  Seq2Seq model(ModelConfig::from_kv(kv), 0);
  const std::uint32_t count = read_u32(in);
  if (count != model.params_.size()) {
    throw std::runtime_error("checkpoint holds " + std::to_string(count) + " parameters, model expects " +
                             std::to_string(model.params_.size()));
  }
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::string name = read_string(in);
    Tensor* t = model.find_parameter(name);
    if (t == nullptr) throw std::runtime_error("checkpoint parameter '" + name + "' unknown to model");
    Shape shape(read_u32(in));
    for (auto& d : shape) d = read_u64(in);
    if (shape != t->shape()) {
      throw std::runtime_error("checkpoint parameter '" + name + "' has shape " + shape_str(shape) +
                               ", expected " + shape_str(t->shape()));
    }
    for (double& v : t->data()) v = std::bit_cast<double>(read_u64(in));
  }
  return model;
}

std::vector<std::string> init_from_teacher(Seq2Seq& student, const Seq2Seq& teacher) {
  const ModelConfig& s = student.config();
  const ModelConfig& t = teacher.config();
  if (s.vocab_size != t.vocab_size || s.d_model != t.d_model || s.n_heads != t.n_heads ||
      s.n_layers != t.n_layers || s.d_ff != t.d_ff) {
    throw std::invalid_argument("init_from_teacher: student and teacher dimensions differ");
  }
  std::map<std::string, const Tensor*> source;
  for (const auto& [name, tensor] : teacher.parameters()) source[name] = &tensor;
  std::vector<std::string> skipped;
  for (auto& [name, tensor] : student.parameters()) {
    auto it = source.find(name);
    if (it == source.end() || it->second->shape() != tensor.shape()) {
      skipped.push_back(name);
      continue;
    }
    auto src = it->second->data();
    std::copy(src.begin(), src.end(), tensor.data().begin());
  }
  return skipped;
}

TokenSequence fixed_length_target(std::span<const TokenId> target, std::size_t n_agents) {
  TokenSequence out(n_agents, kPad);
  const std::size_t m = std::min(target.size(), n_agents);
  std::copy_n(target.begin(), m, out.begin());
  if (m < n_agents) out[m] = kEos;
  return out;
}

Tensor na_xe_loss(const Seq2Seq& model, std::span<const TokenId> source, std::span<const TokenId> target) {
  const ModelConfig& cfg = model.config();
  const Tensor context = model.encode(source);
  if (cfg.length_mode == LengthMode::Fixed) {
    const TokenSequence padded = fixed_length_target(target, cfg.n_agents);
    const PolicyMatrix policy = model.decode_na(context, cfg.n_agents);
    return scale(mean(pick(policy.log_probs, padded)), -1.0);
  }
  if (target.empty()) throw std::invalid_argument("na_xe_loss: predicted-length mode needs a non-empty target");
  const std::size_t length = std::min(target.size(), cfg.n_max);
  const PolicyMatrix policy = model.decode_na(context, length);
  const Tensor token_loss = scale(mean(pick(policy.log_probs, target.first(length))), -1.0);
  const std::int32_t cls =
      static_cast<std::int32_t>(length_offset_class(source.size(), target.size(), cfg.max_offset));
  const Tensor length_loss = scale(sum(pick(model.length_log_probs(context), std::span(&cls, 1))), -1.0);
  return add(token_loss, length_loss);
}

Tensor ar_xe_loss(const Seq2Seq& model, std::span<const TokenId> source, std::span<const TokenId> target) {
  const std::size_t m = std::min(target.size(), model.config().n_max);
  TokenSequence input{kBos};
  input.insert(input.end(), target.begin(), target.begin() + static_cast<long>(m));
  TokenSequence expected(target.begin(), target.begin() + static_cast<long>(m));
  expected.push_back(kEos);
  const Tensor context = model.encode(source);
  return scale(mean(pick(model.decode_ar(context, input), expected)), -1.0);
}

namespace {

bool proposable(std::size_t u) { return u != static_cast<std::size_t>(kPad) && u != static_cast<std::size_t>(kBos); }

}  // namespace

TokenSequence greedy_decode(const Seq2Seq& model, const Tensor& context, std::size_t max_len, bool allow_eos) {
  TokenSequence prefix{kBos};
  for (std::size_t step = 0; step < max_len; ++step) {
    const std::vector<double> dist = model.decode_ar_step(context, prefix);
    TokenId best = -1;
    for (std::size_t u = 0; u < dist.size(); ++u) {
      if (!proposable(u) || (!allow_eos && u == static_cast<std::size_t>(kEos))) continue;
      if (best < 0 || dist[u] > dist[static_cast<std::size_t>(best)]) best = static_cast<TokenId>(u);
    }
    prefix.push_back(best);
    if (best == kEos) break;
  }
  return TokenSequence(prefix.begin() + 1, prefix.end());
}

TokenSequence beam_search(const Seq2Seq& model, const Tensor& context, std::size_t beam_width,
                          std::size_t max_len) {
  if (beam_width < 1) throw std::invalid_argument("beam_search: beam_width must be >= 1");
  struct Hyp {
    TokenSequence tokens;  // starts with bos
    double log_prob = 0.0;
  };
  auto normalized = [](const Hyp& h) { return h.log_prob / static_cast<double>(h.tokens.size() - 1); };

  std::vector<Hyp> active{{{kBos}, 0.0}};
  std::vector<Hyp> finished;
  for (std::size_t step = 0; step < max_len && !active.empty(); ++step) {
    struct Candidate {
      double log_prob;
      std::size_t parent;
      TokenId token;
    };
    std::vector<Candidate> cands;
    for (std::size_t b = 0; b < active.size(); ++b) {
      const std::vector<double> dist = model.decode_ar_step(context, active[b].tokens);
      for (std::size_t u = 0; u < dist.size(); ++u) {
        if (!proposable(u)) continue;
        cands.push_back({active[b].log_prob + std::log(dist[u]), b, static_cast<TokenId>(u)});
      }
    }
    // Every candidate has the same length here, so raw log-prob ranks them
    // exactly as the normalized score would.
    std::stable_sort(cands.begin(), cands.end(),
                     [](const Candidate& a, const Candidate& b) { return a.log_prob > b.log_prob; });
    if (cands.size() > beam_width) cands.resize(beam_width);
    std::vector<Hyp> next;
    for (const Candidate& c : cands) {
      Hyp h{active[c.parent].tokens, c.log_prob};
      h.tokens.push_back(c.token);
      (c.token == kEos ? finished : next).push_back(std::move(h));
    }
    active = std::move(next);
    if (finished.size() >= beam_width) break;
  }
  for (Hyp& h : active) finished.push_back(std::move(h));
  const Hyp* best = nullptr;
  for (const Hyp& h : finished)
    if (best == nullptr || normalized(h) > normalized(*best)) best = &h;
  if (best == nullptr) return {};
  return TokenSequence(best->tokens.begin() + 1, best->tokens.end());
}

TokenSequence decode_na_argmax(const Seq2Seq& model, std::span<const TokenId> source) {
  const Tensor context = model.encode(source);
  const std::size_t length = model.inference_length(context, source.size());
  const PolicyMatrix policy = model.decode_na(context, length);
  TokenSequence joint(length);
  for (std::size_t a = 0; a < length; ++a) {
    const auto row = policy.row(a);
    joint[a] = static_cast<TokenId>(std::max_element(row.begin(), row.end()) - row.begin());
  }
  if (model.config().length_mode == LengthMode::Fixed) return truncate_at_eos(joint);
  return joint;
}

}  // namespace cmal
