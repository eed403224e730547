#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "cmal/sequence.hpp"

namespace cmal {

/// Packs an n-gram (n <= 4, ids < 2^15) into one key; the order lives in the top bits.
std::uint64_t ngram_key(std::span<const TokenId> gram);

/// Counts of every n-gram of order 1..max_n in a sequence.
class NgramCounts {
 public:
  NgramCounts() = default;
  NgramCounts(std::span<const TokenId> seq, std::size_t max_n = 4);

  int count(std::uint64_t key) const;
  /// Total number of n-grams of order n: max(0, len - n + 1).
  std::size_t total(std::size_t n) const { return n >= 1 && n <= totals_.size() ? totals_[n - 1] : 0; }
  std::size_t length() const { return length_; }
  std::size_t max_n() const { return totals_.size(); }
  const std::unordered_map<std::uint64_t, int>& order(std::size_t n) const { return by_order_.at(n - 1); }

 private:
  std::vector<std::unordered_map<std::uint64_t, int>> by_order_;
  std::vector<std::size_t> totals_;
  std::size_t length_ = 0;
};

/// Sentence BLEU with uniform weights over orders 1..max_n. When `smooth`
/// is set, orders >= 2 use (matches + 1) / (total + 1).
double sentence_bleu(std::span<const TokenId> hyp, const std::vector<TokenSequence>& refs,
                     std::size_t max_n = 4, bool smooth = true);

/// min(precision, recall) over n-grams of orders 1..max_n pooled together,
/// best over references.
double sentence_gleu(std::span<const TokenId> hyp, const std::vector<TokenSequence>& refs,
                     std::size_t max_n = 4);

/// Document frequencies of n-grams over a reference corpus; one document is
/// the reference set of one example.
class DocFreqTable {
 public:
  DocFreqTable() = default;
  explicit DocFreqTable(const std::vector<std::vector<TokenSequence>>& corpus_refs, std::size_t max_n = 4);

  double df(std::uint64_t key) const;
  std::size_t documents() const { return documents_; }
  std::size_t max_n() const { return max_n_; }
  /// Overrides one entry (tests build synthetic tables with this).
  void set(std::uint64_t key, double value) { df_[key] = value; }
  void set_documents(std::size_t n) { documents_ = n; }

 private:
  std::unordered_map<std::uint64_t, double> df_;
  std::size_t documents_ = 0;
  std::size_t max_n_ = 4;
};

/// CIDEr-D: clipped tf-idf cosine per order with a gaussian length penalty,
/// averaged over references and orders, scaled by 10.
double cider_d(std::span<const TokenId> hyp, const std::vector<TokenSequence>& refs, const DocFreqTable* df,
               double sigma = 6.0);

/// Adjacent identical content-token pairs over max(1, len - 1).
double repetition_rate(std::span<const TokenId> seq);

/// Corpus BLEU-4 from pooled clipped counts, reported x100.
double corpus_bleu(const std::vector<TokenSequence>& hyps, const std::vector<std::vector<TokenSequence>>& refs);

enum class RewardKind { Bleu, Gleu, CiderD };

std::string to_string(RewardKind kind);
RewardKind parse_reward_kind(const std::string& text);

using SentenceReward = std::function<double(std::span<const TokenId>)>;

struct RewardFunction {
  RewardKind kind = RewardKind::Gleu;
  std::size_t max_n = 4;
  bool smooth = true;
  double sigma = 6.0;
  const DocFreqTable* df = nullptr;

  double operator()(std::span<const TokenId> hyp, const std::vector<TokenSequence>& refs) const;
  /// Reward against fixed references, with reference statistics precomputed.
  SentenceReward bind(std::vector<TokenSequence> refs) const;
  double upper_bound() const { return kind == RewardKind::CiderD ? 10.0 : 1.0; }
};

}  // namespace cmal
