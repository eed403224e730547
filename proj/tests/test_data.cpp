#include <doctest.h>

#include <algorithm>
#include <set>
#include <sstream>

#include "cmal/data.hpp"

using namespace cmal;

TEST_CASE("task targets") {
  Task t;
  t.kind = TaskKind::Reverse;
  CHECK(task_target(t, TokenSequence{3, 4, 5}) == TokenSequence{5, 4, 3});
  t.kind = TaskKind::Sort;
  CHECK(task_target(t, TokenSequence{7, 5, 6}) == TokenSequence{5, 6, 7});
  t.kind = TaskKind::Copy;
  CHECK(task_target(t, TokenSequence{7, 5, 6}) == TokenSequence{7, 5, 6});
}

TEST_CASE("lexicon is a seeded bijection and translation swaps adjacent pairs") {
  Task t;
  t.kind = TaskKind::LexTranslate;
  const auto lex = task_lexicon(t);
  std::set<TokenId> image(lex.begin(), lex.end());
  CHECK(image.size() == t.vocab_size);
  CHECK(*image.begin() == kNumReserved);
  CHECK(*image.rbegin() == static_cast<TokenId>(t.vocab_size) + kNumReserved - 1);
  CHECK(task_lexicon(t) == lex);
  Task other = t;
  other.lexicon_seed = 8;
  CHECK(task_lexicon(other) != lex);

  auto L = [&](TokenId x) { return lex[static_cast<std::size_t>(x - kNumReserved)]; };
  CHECK(task_target(t, TokenSequence{4, 5, 6}) == TokenSequence{L(5), L(4), L(6)});
  CHECK(task_target(t, TokenSequence{4, 5, 6, 7}) == TokenSequence{L(5), L(4), L(7), L(6)});
}

TEST_CASE("generation is deterministic and respects the task") {
  Task t;
  t.kind = TaskKind::Sort;
  const ParallelCorpus a = generate_task(t, 50), b = generate_task(t, 50);
  REQUIRE(a.size() == 50);
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(a[i].source == b[i].source);
    CHECK(a[i].target() == task_target(t, a[i].source));
    CHECK(a[i].source.size() >= t.min_len);
    CHECK(a[i].source.size() <= t.max_len);
    CHECK(std::set<TokenId>(a[i].source.begin(), a[i].source.end()).size() == a[i].source.size());
    CHECK(a[i].provenance == Provenance::Real);
  }
  const ParallelCorpus test = generate_task(t, 50, Stream::Test);
  CHECK(test[0].source != a[0].source);
  Task reseeded = t;
  reseeded.seed = 2;
  CHECK(generate_task(reseeded, 1)[0].source != a[0].source);
  CHECK_THROWS_AS((void)generate_task(t, 0), std::invalid_argument);
}

TEST_CASE("sources skip excluded sequences") {
  Task t;
  const auto first = generate_sources(t, 5, Stream::Train);
  const std::set<TokenSequence> exclude(first.begin(), first.end());
  for (const auto& s : generate_sources(t, 20, Stream::Train, exclude)) CHECK(exclude.count(s) == 0);
}

TEST_CASE("task validation") {
  Task t;
  t.min_len = 5;
  t.max_len = 3;
  CHECK_THROWS_AS(t.validate(), std::invalid_argument);
  t = Task{};
  t.vocab_size = 5;
  t.max_len = 8;
  CHECK_THROWS_AS(t.validate(), std::invalid_argument);
  CHECK(parse_task_kind(to_string(TaskKind::Reverse)) == TaskKind::Reverse);
  CHECK_THROWS_AS((void)parse_task_kind("shuffle"), std::invalid_argument);
}

TEST_CASE("corpus parsing") {
  std::istringstream in("3 4\t4 3\n");
  const ParallelCorpus c = parse_corpus(in);
  REQUIRE(c.size() == 1);
  CHECK(c[0].source == TokenSequence{3, 4});
  CHECK(c[0].target() == TokenSequence{4, 3});

  std::istringstream multi("5 6\t6 5\t5 6\n");
  CHECK(parse_corpus(multi)[0].targets.size() == 2);

  std::istringstream bad("3 4\t4 3\n5 6 7\n");
  try {
    (void)parse_corpus(bad, "train.tsv");
    FAIL("expected a parse error");
  } catch (const std::runtime_error& e) {
    CHECK(std::string(e.what()).find("train.tsv:2") != std::string::npos);
  }
  std::istringstream junk("3 x\t4\n");
  CHECK_THROWS_AS((void)parse_corpus(junk), std::runtime_error);
}

TEST_CASE("provenance directives round trip") {
  std::istringstream in("4 5\t5 4\n#provenance=distilled\n6 7\t7 6\n#provenance=real\n8\t8\n");
  const ParallelCorpus c = parse_corpus(in);
  REQUIRE(c.size() == 3);
  CHECK(c[0].provenance == Provenance::Real);
  CHECK(c[1].provenance == Provenance::Distilled);
  CHECK(c[2].provenance == Provenance::Real);
  CHECK(count_provenance(c, Provenance::Distilled) == 1);
  CHECK_THROWS_AS(require_provenance(c, Provenance::Real, "cmal"), std::invalid_argument);

  std::ostringstream out;
  write_corpus(c, out);
  std::istringstream back(out.str());
  const ParallelCorpus again = parse_corpus(back);
  REQUIRE(again.size() == c.size());
  for (std::size_t i = 0; i < c.size(); ++i) {
    CHECK(again[i].source == c[i].source);
    CHECK(again[i].targets == c[i].targets);
    CHECK(again[i].provenance == c[i].provenance);
  }
  std::istringstream unknown("#origin=web\n");
  CHECK_THROWS_AS((void)parse_corpus(unknown), std::runtime_error);
}

TEST_CASE("distillation and augmentation") {
  ModelConfig cfg;
  cfg.vocab_size = 24;
  cfg.d_model = 8;
  cfg.n_heads = 2;
  cfg.n_layers = 1;
  cfg.d_ff = 8;
  cfg.decoder = DecoderKind::Autoregressive;
  const Seq2Seq teacher(cfg, 1);
  Task t;
  const ParallelCorpus labeled = generate_task(t, 20);
  CHECK(augment_unlabeled(t, 0, teacher, labeled, 2, 6).empty());
  const ParallelCorpus extra = augment_unlabeled(t, 10, teacher, labeled, 2, 6);
  REQUIRE(extra.size() == 10);
  std::set<TokenSequence> seen;
  for (const auto& ex : labeled) seen.insert(ex.source);
  for (const auto& ex : extra) {
    CHECK(seen.count(ex.source) == 0);
    CHECK(ex.provenance == Provenance::Distilled);
    CHECK(ex.target().size() <= 6);
    CHECK(std::find(ex.target().begin(), ex.target().end(), kEos) == ex.target().end());
  }
}
