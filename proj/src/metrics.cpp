#include "cmal/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <memory>
#include <set>
#include <stdexcept>

namespace cmal {

std::uint64_t ngram_key(std::span<const TokenId> gram) {
  if (gram.empty() || gram.size() > 4) throw std::invalid_argument("ngram_key: order must be in 1..4");
  std::uint64_t key = static_cast<std::uint64_t>(gram.size()) << 60;
  for (std::size_t i = 0; i < gram.size(); ++i) {
    if (gram[i] < 0 || gram[i] >= (1 << 15)) throw std::out_of_range("ngram_key: token id out of range");
    key |= static_cast<std::uint64_t>(gram[i]) << (15 * i);
  }
  return key;
}

NgramCounts::NgramCounts(std::span<const TokenId> seq, std::size_t max_n)
    : by_order_(max_n), totals_(max_n, 0), length_(seq.size()) {
  for (std::size_t n = 1; n <= max_n; ++n) {
    if (seq.size() < n) continue;
    auto& bucket = by_order_[n - 1];
    for (std::size_t i = 0; i + n <= seq.size(); ++i) ++bucket[ngram_key(seq.subspan(i, n))];
    totals_[n - 1] = seq.size() - n + 1;
  }
}

int NgramCounts::count(std::uint64_t key) const {
  const std::size_t n = key >> 60;
  if (n < 1 || n > by_order_.size()) return 0;
  const auto& bucket = by_order_[n - 1];
  auto it = bucket.find(key);
  return it == bucket.end() ? 0 : it->second;
}

namespace {

std::size_t clipped_matches(const NgramCounts& hyp, const NgramCounts& ref, std::size_t n) {
  std::size_t m = 0;
  for (const auto& [key, c] : hyp.order(n)) m += static_cast<std::size_t>(std::min(c, ref.count(key)));
  return m;
}

std::size_t clipped_matches_multi(const NgramCounts& hyp, const std::vector<NgramCounts>& refs, std::size_t n) {
  std::size_t m = 0;
  for (const auto& [key, c] : hyp.order(n)) {
    int best = 0;
    for (const auto& r : refs) best = std::max(best, r.count(key));
    m += static_cast<std::size_t>(std::min(c, best));
  }
  return m;
}

std::size_t closest_ref_length(std::size_t hyp_len, const std::vector<NgramCounts>& refs) {
  std::size_t best = refs.front().length();
  for (const auto& r : refs) {
    const auto d = [&](std::size_t x) { return x > hyp_len ? x - hyp_len : hyp_len - x; };
    if (d(r.length()) < d(best) || (d(r.length()) == d(best) && r.length() < best)) best = r.length();
  }
  return best;
}

std::vector<NgramCounts> count_all(const std::vector<TokenSequence>& refs, std::size_t max_n) {
  std::vector<NgramCounts> out;
  out.reserve(refs.size());
  for (const auto& r : refs) out.emplace_back(r, max_n);
  return out;
}

double bleu_from_counts(const NgramCounts& h, const std::vector<NgramCounts>& refs, std::size_t max_n, bool smooth) {
  if (refs.empty()) throw std::invalid_argument("sentence_bleu: no references");
  if (h.length() == 0) return 0.0;
  double log_sum = 0.0;
  for (std::size_t n = 1; n <= max_n; ++n) {
    double num = static_cast<double>(clipped_matches_multi(h, refs, n));
    double den = static_cast<double>(h.total(n));
    if (smooth && n >= 2) {
      num += 1.0;
      den += 1.0;
    }
    if (num == 0.0 || den == 0.0) return 0.0;
    log_sum += std::log(num / den);
  }
  const double c = static_cast<double>(h.length());
  const double r = static_cast<double>(closest_ref_length(h.length(), refs));
  const double bp = c < r ? std::exp(1.0 - r / c) : 1.0;
  return bp * std::exp(log_sum / static_cast<double>(max_n));
}

double gleu_from_counts(const NgramCounts& h, const std::vector<NgramCounts>& refs, std::size_t max_n) {
  if (refs.empty()) throw std::invalid_argument("sentence_gleu: no references");
  if (h.length() == 0) return 0.0;
  std::size_t hyp_total = 0;
  for (std::size_t n = 1; n <= max_n; ++n) hyp_total += h.total(n);
  double best = 0.0;
  for (const auto& r : refs) {
    std::size_t matched = 0, ref_total = 0;
    for (std::size_t n = 1; n <= max_n; ++n) {
      matched += clipped_matches(h, r, n);
      ref_total += r.total(n);
    }
    if (ref_total == 0) continue;
    const double precision = static_cast<double>(matched) / static_cast<double>(hyp_total);
    const double recall = static_cast<double>(matched) / static_cast<double>(ref_total);
    best = std::max(best, std::min(precision, recall));
  }
  return best;
}

// tf-idf vectors per order for CIDEr-D.
struct CiderVector {
  std::vector<std::unordered_map<std::uint64_t, double>> weights;
  std::vector<double> norms;
  std::size_t length = 0;
};

CiderVector cider_vector(std::span<const TokenId> seq, const DocFreqTable& df) {
  const std::size_t max_n = df.max_n();
  const NgramCounts counts(seq, max_n);
  CiderVector v;
  v.weights.resize(max_n);
  v.norms.assign(max_n, 0.0);
  v.length = seq.size();
  const double log_docs = std::log(std::max<double>(1.0, static_cast<double>(df.documents())));
  for (std::size_t n = 1; n <= max_n; ++n) {
    for (const auto& [key, tf] : counts.order(n)) {
      const double w = static_cast<double>(tf) * (log_docs - std::log(std::max(1.0, df.df(key))));
      v.weights[n - 1][key] = w;
      v.norms[n - 1] += w * w;
    }
    v.norms[n - 1] = std::sqrt(v.norms[n - 1]);
  }
  return v;
}

double cider_pair(const CiderVector& h, const CiderVector& r, double sigma) {
  const double delta = static_cast<double>(h.length) - static_cast<double>(r.length);
  const double penalty = std::exp(-(delta * delta) / (2.0 * sigma * sigma));
  double total = 0.0;
  for (std::size_t n = 0; n < h.weights.size(); ++n) {
    double val = 0.0;
    for (const auto& [key, wh] : h.weights[n]) {
      auto it = r.weights[n].find(key);
      if (it == r.weights[n].end()) continue;
      val += std::min(wh, it->second) * it->second;
    }
    if (h.norms[n] != 0.0 && r.norms[n] != 0.0) val /= h.norms[n] * r.norms[n];
    total += val * penalty;
  }
  return total / static_cast<double>(h.weights.size());
}

}  // namespace

double sentence_bleu(std::span<const TokenId> hyp, const std::vector<TokenSequence>& refs, std::size_t max_n,
                     bool smooth) {
  if (refs.empty()) throw std::invalid_argument("sentence_bleu: no references");
  return bleu_from_counts(NgramCounts(hyp, max_n), count_all(refs, max_n), max_n, smooth);
}

double sentence_gleu(std::span<const TokenId> hyp, const std::vector<TokenSequence>& refs, std::size_t max_n) {
  if (refs.empty()) throw std::invalid_argument("sentence_gleu: no references");
  return gleu_from_counts(NgramCounts(hyp, max_n), count_all(refs, max_n), max_n);
}

DocFreqTable::DocFreqTable(const std::vector<std::vector<TokenSequence>>& corpus_refs, std::size_t max_n)
    : documents_(corpus_refs.size()), max_n_(max_n) {
  for (const auto& refs : corpus_refs) {
    std::set<std::uint64_t> seen;
    for (const auto& r : refs) {
      const NgramCounts c(r, max_n);
      for (std::size_t n = 1; n <= max_n; ++n)
        for (const auto& [key, count] : c.order(n)) seen.insert(key);
    }
    for (auto key : seen) df_[key] += 1.0;
  }
}

double DocFreqTable::df(std::uint64_t key) const {
  auto it = df_.find(key);
  return it == df_.end() ? 0.0 : it->second;
}

double cider_d(std::span<const TokenId> hyp, const std::vector<TokenSequence>& refs, const DocFreqTable* df,
               double sigma) {
  if (df == nullptr) throw std::invalid_argument("cider_d: document-frequency table required");
  if (refs.empty()) throw std::invalid_argument("cider_d: no references");
  const CiderVector h = cider_vector(hyp, *df);
  double score = 0.0;
  for (const auto& r : refs) score += cider_pair(h, cider_vector(r, *df), sigma);
  return 10.0 * score / static_cast<double>(refs.size());
}

double repetition_rate(std::span<const TokenId> seq) {
  std::size_t repeats = 0;
  for (std::size_t i = 1; i < seq.size(); ++i)
    if (seq[i] == seq[i - 1] && !is_reserved(seq[i])) ++repeats;
  const std::size_t pairs = seq.size() > 1 ? seq.size() - 1 : 1;
  return static_cast<double>(repeats) / static_cast<double>(pairs);
}

double corpus_bleu(const std::vector<TokenSequence>& hyps, const std::vector<std::vector<TokenSequence>>& refs) {
  if (hyps.empty()) throw std::invalid_argument("corpus_bleu: empty corpus");
  if (hyps.size() != refs.size()) {
    throw std::invalid_argument("corpus_bleu: " + std::to_string(hyps.size()) + " hypotheses vs " +
                                std::to_string(refs.size()) + " reference sets");
  }
  constexpr std::size_t kMaxN = 4;
  std::vector<double> num(kMaxN, 0.0), den(kMaxN, 0.0);
  double hyp_len = 0.0, ref_len = 0.0;
  for (std::size_t i = 0; i < hyps.size(); ++i) {
    if (refs[i].empty()) throw std::invalid_argument("corpus_bleu: example without references");
    const NgramCounts h(hyps[i], kMaxN);
    const auto r = count_all(refs[i], kMaxN);
    for (std::size_t n = 1; n <= kMaxN; ++n) {
      num[n - 1] += static_cast<double>(clipped_matches_multi(h, r, n));
      den[n - 1] += static_cast<double>(h.total(n));
    }
    hyp_len += static_cast<double>(h.length());
    ref_len += static_cast<double>(closest_ref_length(h.length(), r));
  }
  double log_sum = 0.0;
  for (std::size_t n = 0; n < kMaxN; ++n) {
    if (num[n] == 0.0 || den[n] == 0.0) return 0.0;
    log_sum += std::log(num[n] / den[n]);
  }
  const double bp = hyp_len < ref_len ? std::exp(1.0 - ref_len / hyp_len) : 1.0;
  return 100.0 * bp * std::exp(log_sum / static_cast<double>(kMaxN));
}

std::string to_string(RewardKind kind) {
  switch (kind) {
    case RewardKind::Bleu: return "bleu";
    case RewardKind::Gleu: return "gleu";
    case RewardKind::CiderD: return "cider";
  }
  return "?";
}

RewardKind parse_reward_kind(const std::string& text) {
  if (text == "bleu") return RewardKind::Bleu;
  if (text == "gleu") return RewardKind::Gleu;
  if (text == "cider" || text == "cider-d") return RewardKind::CiderD;
  throw std::invalid_argument("unknown reward '" + text + "' (expected bleu|gleu|cider)");
}

double RewardFunction::operator()(std::span<const TokenId> hyp, const std::vector<TokenSequence>& refs) const {
  switch (kind) {
    case RewardKind::Bleu: return sentence_bleu(hyp, refs, max_n, smooth);
    case RewardKind::Gleu: return sentence_gleu(hyp, refs, max_n);
    case RewardKind::CiderD: return cider_d(hyp, refs, df, sigma);
  }
  return 0.0;
}

SentenceReward RewardFunction::bind(std::vector<TokenSequence> refs) const {
  if (refs.empty()) throw std::invalid_argument("reward: no references");
  switch (kind) {
    case RewardKind::Bleu: {
      auto counts = std::make_shared<std::vector<NgramCounts>>(count_all(refs, max_n));
      return [counts, n = max_n, s = smooth](std::span<const TokenId> hyp) {
        return bleu_from_counts(NgramCounts(hyp, n), *counts, n, s);
      };
    }
    case RewardKind::Gleu: {
      auto counts = std::make_shared<std::vector<NgramCounts>>(count_all(refs, max_n));
      return [counts, n = max_n](std::span<const TokenId> hyp) {
        return gleu_from_counts(NgramCounts(hyp, n), *counts, n);
      };
    }
    case RewardKind::CiderD: {
      if (df == nullptr) throw std::invalid_argument("cider_d: document-frequency table required");
      auto vecs = std::make_shared<std::vector<CiderVector>>();
      for (const auto& r : refs) vecs->push_back(cider_vector(r, *df));
      return [vecs, table = df, s = sigma](std::span<const TokenId> hyp) {
        const CiderVector h = cider_vector(hyp, *table);
        double score = 0.0;
        for (const auto& r : *vecs) score += cider_pair(h, r, s);
        return 10.0 * score / static_cast<double>(vecs->size());
      };
    }
  }
  throw std::logic_error("unreachable");
}

}  // namespace cmal
