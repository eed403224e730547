#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

namespace cmal {

using TokenId = std::int32_t;
using TokenSequence = std::vector<TokenId>;

inline constexpr TokenId kPad = 0;
inline constexpr TokenId kBos = 1;
inline constexpr TokenId kEos = 2;
inline constexpr TokenId kUnk = 3;
inline constexpr TokenId kNumReserved = 4;

inline bool is_reserved(TokenId id) { return id >= 0 && id < kNumReserved; }

/// Bidirectional id <-> token map with the four reserved ids in front.
class Vocabulary {
 public:
  Vocabulary();
  /// Reserved tokens followed by "w0", "w1", ... for `content_size` content ids.
  static Vocabulary synthetic(std::size_t content_size);
  /// One token per line; the line number is the id.
  static Vocabulary load(const std::filesystem::path& path);
  void save(const std::filesystem::path& path) const;

  TokenId add(const std::string& token);
  TokenId id(const std::string& token) const;
  const std::string& token(TokenId id) const;
  std::size_t size() const { return tokens_.size(); }

  std::string render(std::span<const TokenId> seq) const;

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, TokenId> ids_;
};

/// Tokens strictly before the first eos (the whole input when none).
TokenSequence truncate_at_eos(std::span<const TokenId> tokens);

/// Collapses runs of identical adjacent tokens to a single occurrence.
TokenSequence postprocess(std::span<const TokenId> seq);

std::string join_ids(std::span<const TokenId> seq);

}  // namespace cmal
