#include "cmal/sequence.hpp"

#include <algorithm>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace cmal {

Vocabulary::Vocabulary() {
  for (const char* t : {"<pad>", "<bos>", "<eos>", "<unk>"}) add(t);
}

Vocabulary Vocabulary::synthetic(std::size_t content_size) {
  Vocabulary v;
  for (std::size_t i = 0; i < content_size; ++i) v.add("w" + std::to_string(i));
  return v;
}

Vocabulary Vocabulary::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open vocabulary " + path.string());
  Vocabulary v;
  v.tokens_.clear();
  v.ids_.clear();
  std::string line;
  while (std::getline(in, line)) {
    if (v.ids_.count(line)) throw std::runtime_error("duplicate token '" + line + "' in " + path.string());
    v.add(line);
  }
  if (v.size() < static_cast<std::size_t>(kNumReserved)) {
    throw std::runtime_error("vocabulary " + path.string() + " lacks the reserved tokens");
  }
  return v;
}

void Vocabulary::save(const std::filesystem::path& path) const {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write vocabulary " + path.string());
  for (const auto& t : tokens_) out << t << '\n';
}

TokenId Vocabulary::add(const std::string& token) {
  if (auto it = ids_.find(token); it != ids_.end()) return it->second;
  const auto id = static_cast<TokenId>(tokens_.size());
  tokens_.push_back(token);
  ids_.emplace(token, id);
  return id;
}

TokenId Vocabulary::id(const std::string& token) const {
  auto it = ids_.find(token);
  return it == ids_.end() ? kUnk : it->second;
}

const std::string& Vocabulary::token(TokenId id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= tokens_.size()) {
    throw std::out_of_range("token id " + std::to_string(id) + " outside vocabulary");
  }
  return tokens_[static_cast<std::size_t>(id)];
}

std::string Vocabulary::render(std::span<const TokenId> seq) const {
  std::string out;
  for (std::size_t i = 0; i < seq.size(); ++i) {
    if (i) out += ' ';
    out += token(seq[i]);
  }
  return out;
}

TokenSequence truncate_at_eos(std::span<const TokenId> tokens) {
  auto end = std::find(tokens.begin(), tokens.end(), kEos);
  return TokenSequence(tokens.begin(), end);
}

TokenSequence postprocess(std::span<const TokenId> seq) {
  TokenSequence out;
  out.reserve(seq.size());
  for (TokenId t : seq)
    if (out.empty() || out.back() != t) out.push_back(t);
  return out;
}

std::string join_ids(std::span<const TokenId> seq) {
  std::ostringstream os;
  for (std::size_t i = 0; i < seq.size(); ++i) os << (i ? " " : "") << seq[i];
  return os.str();
}

}  // namespace cmal
