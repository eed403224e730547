#include <doctest.h>

#include <filesystem>

#include "cmal/sequence.hpp"

using namespace cmal;

TEST_CASE("postprocess collapses adjacent duplicates") {
  CHECK(postprocess(TokenSequence{5, 5, 6, 6, 6, 5}) == TokenSequence{5, 6, 5});
  CHECK(postprocess(TokenSequence{}).empty());
  CHECK(postprocess(TokenSequence{7}) == TokenSequence{7});
}

TEST_CASE("truncate at eos") {
  CHECK(truncate_at_eos(TokenSequence{5, 6, kEos, 7}) == TokenSequence{5, 6});
  CHECK(truncate_at_eos(TokenSequence{kEos, 5}).empty());
  CHECK(truncate_at_eos(TokenSequence{5, 6}) == TokenSequence{5, 6});
}

TEST_CASE("vocabulary reserves the special ids and round trips through a file") {
  const Vocabulary v = Vocabulary::synthetic(3);
  CHECK(v.size() == 7);
  CHECK(v.id(v.token(kEos)) == kEos);
  CHECK(v.token(4) == "w0");
  CHECK(v.id("never-seen") == kUnk);
  CHECK(is_reserved(kBos));
  CHECK_FALSE(is_reserved(4));

  const auto path = std::filesystem::temp_directory_path() / "cmal_test_vocab.txt";
  v.save(path);
  const Vocabulary back = Vocabulary::load(path);
  std::filesystem::remove(path);
  CHECK(back.size() == v.size());
  for (TokenId i = 0; i < static_cast<TokenId>(v.size()); ++i) CHECK(back.token(i) == v.token(i));
  const TokenSequence seq{4, 6};
  CHECK(back.render(seq) == v.render(seq));
  CHECK(join_ids(seq) == "4 6");
}
