#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <random>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "cmal/sequence.hpp"
#include "cmal/tensor.hpp"

namespace cmal {

enum class DecoderKind { Autoregressive, NonAutoregressive };
enum class LengthMode { Fixed, Predicted };

std::string to_string(DecoderKind kind);
std::string to_string(LengthMode mode);
DecoderKind parse_decoder_kind(const std::string& text);
LengthMode parse_length_mode(const std::string& text);

struct ModelConfig {
  std::size_t vocab_size = 24;
  std::size_t d_model = 32;
  std::size_t n_heads = 4;
  std::size_t n_layers = 2;
  std::size_t d_ff = 64;
  std::size_t max_source_len = 64;
  DecoderKind decoder = DecoderKind::NonAutoregressive;
  LengthMode length_mode = LengthMode::Fixed;
  /// Agent count N in fixed-length mode.
  std::size_t n_agents = 16;
  /// Upper bound on any decode length.
  std::size_t n_max = 64;
  /// Length-offset classes cover [-max_offset, +max_offset].
  int max_offset = 20;
  double dropout = 0.0;
  bool source_positions = true;

  void validate() const;
  std::map<std::string, std::string> to_kv() const;
  static ModelConfig from_kv(const std::map<std::string, std::string>& kv);
  bool operator==(const ModelConfig&) const = default;
};

/// Sinusoidal encodings: PE(p, 2i) = sin(p / 10000^(2i/d)), PE(p, 2i+1) = cos(p / 10000^(2i/d)).
Tensor positional_encoding(std::size_t length, std::size_t d_model);

/// Per-agent categorical distributions from one non-autoregressive pass.
struct PolicyMatrix {
  Tensor log_probs;            // N x |U|; carries the tape during training
  std::vector<double> probs;   // N x |U|, detached
  Tensor states;               // N x d final agent states
  std::size_t agents = 0;
  std::size_t vocab = 0;

  double prob(std::size_t agent, TokenId u) const { return probs[agent * vocab + static_cast<std::size_t>(u)]; }
  double log_prob(std::size_t agent, TokenId u) const {
    return log_probs.data()[agent * vocab + static_cast<std::size_t>(u)];
  }
  std::span<const double> row(std::size_t agent) const {
    return std::span<const double>(probs).subspan(agent * vocab, vocab);
  }

  /// Builds a policy from a detached log-prob matrix (used by tests and tools).
  static PolicyMatrix from_log_probs(Tensor log_probs);
};

struct LengthPrediction {
  std::vector<double> offset_logits;
  std::size_t predicted_length = 1;
};

/// Offset class index for a (source, target) length pair, clamped into range.
std::size_t length_offset_class(std::size_t source_len, std::size_t target_len, int max_offset);

struct Linear {
  Tensor weight;  // in x out
  Tensor bias;    // out
  Tensor operator()(const Tensor& x) const { return add(matmul(x, weight), bias); }
};

struct Norm {
  Tensor gain;
  Tensor bias;
  Tensor operator()(const Tensor& x) const { return layer_norm(x, gain, bias); }
};

struct Attention {
  Linear q, k, v, o;
  std::size_t heads = 1;
  /// `mask`, when defined, is added to the pre-softmax scores.
  Tensor operator()(const Tensor& query, const Tensor& memory, const Tensor* mask) const;
};

struct FeedForward {
  Linear in, out;
  Tensor operator()(const Tensor& x) const { return out(relu(in(x))); }
};

struct EncoderLayer {
  Norm attn_norm, ffn_norm;
  Attention attn;
  FeedForward ffn;
};

struct DecoderLayer {
  Norm self_norm, cross_norm, ffn_norm;
  Attention self_attn, cross_attn;
  FeedForward ffn;
};

using NamedParameters = std::vector<std::pair<std::string, Tensor>>;

/// Transformer encoder-decoder. The decoder runs either autoregressively
/// (causal self-attention over embedded prefixes) or in one parallel pass
/// whose inputs are positional encodings only.
class Seq2Seq {
 public:
  Seq2Seq(ModelConfig config, std::uint64_t seed);
  Seq2Seq(const Seq2Seq&) = delete;
  Seq2Seq& operator=(const Seq2Seq&) = delete;
  Seq2Seq(Seq2Seq&&) = default;
  Seq2Seq& operator=(Seq2Seq&&) = default;

  /// Deep copy with independent parameter storage.
  Seq2Seq clone() const;

  const ModelConfig& config() const { return config_; }
  NamedParameters& parameters() { return params_; }
  const NamedParameters& parameters() const { return params_; }
  std::size_t parameter_count() const;
  Tensor* find_parameter(const std::string& name);
  void zero_grad();

  /// Encodes token ids; rows of the result correspond to source positions.
  Tensor encode(std::span<const TokenId> source) const;
  /// Encodes pre-embedded source vectors (n x d).
  Tensor encode_features(const Tensor& embedded) const;

  /// One parallel decoder pass producing `length` agent distributions.
  PolicyMatrix decode_na(const Tensor& context, std::size_t length) const;
  /// Agent count used at inference: N in fixed mode, the predicted length otherwise.
  std::size_t inference_length(const Tensor& context, std::size_t source_len) const;

  /// Log-probs for every position of a teacher-forced prefix (rows = prefix length).
  Tensor decode_ar(const Tensor& context, std::span<const TokenId> prefix) const;
  /// Next-token distribution after `prefix` (which must start with bos).
  std::vector<double> decode_ar_step(const Tensor& context, std::span<const TokenId> prefix) const;

  /// Log-probs over offset classes, shape 1 x (2 * max_offset + 1).
  Tensor length_log_probs(const Tensor& context) const;
  LengthPrediction predict_length(const Tensor& context, std::size_t source_len) const;

  void set_training(bool training, std::uint64_t seed = 0);

  void save(const std::filesystem::path& path) const;
  static Seq2Seq load(const std::filesystem::path& path);

 private:
  Tensor embed_tokens(std::span<const TokenId> ids) const;
  Tensor run_decoder(Tensor x, const Tensor& context, const Tensor* self_mask) const;
  Tensor maybe_dropout(const Tensor& x) const;
  Linear make_linear(const std::string& name, std::size_t in, std::size_t out);
  Norm make_norm(const std::string& name, std::size_t d);
  Attention make_attention(const std::string& name);
  Tensor register_parameter(const std::string& name, Tensor t);

  ModelConfig config_;
  NamedParameters params_;
  std::mt19937_64 init_rng_;
  Tensor embedding_;
  std::vector<EncoderLayer> encoder_;
  Norm encoder_norm_;
  std::vector<DecoderLayer> decoder_;
  Norm decoder_norm_;
  Linear output_;
  Linear length_head_;
  bool has_length_head_ = false;
  bool training_ = false;
  mutable std::mt19937_64 dropout_rng_;
};

/// Copies every parameter whose name and shape match; returns the names of
/// student parameters that were left untouched.
std::vector<std::string> init_from_teacher(Seq2Seq& student, const Seq2Seq& teacher);

/// Pads a target to N agents: content, one eos, then pad. Longer targets are cut to N.
TokenSequence fixed_length_target(std::span<const TokenId> target, std::size_t n_agents);

/// Mean per-position cross-entropy of the non-autoregressive decoder.
/// In predicted-length mode the length-offset loss is added.
Tensor na_xe_loss(const Seq2Seq& model, std::span<const TokenId> source, std::span<const TokenId> target);
/// Mean per-position teacher-forced cross-entropy including the final eos.
Tensor ar_xe_loss(const Seq2Seq& model, std::span<const TokenId> source, std::span<const TokenId> target);

/// Argmax per step until eos or `max_len`; the result excludes bos and keeps
/// the eos when one was emitted. With `allow_eos` false exactly `max_len`
/// tokens are produced (used for latency measurement). Pad and bos are never
/// proposed.
TokenSequence greedy_decode(const Seq2Seq& model, const Tensor& context, std::size_t max_len,
                            bool allow_eos = true);

/// Length-normalized beam search (score = log-prob / tokens, eos counted).
/// Returns the best hypothesis in the same form as greedy_decode; width 1
/// reproduces greedy_decode exactly.
TokenSequence beam_search(const Seq2Seq& model, const Tensor& context, std::size_t beam_width,
                          std::size_t max_len);

/// Argmax per agent, truncated per the model's length mode.
TokenSequence decode_na_argmax(const Seq2Seq& model, std::span<const TokenId> source);

}  // namespace cmal
