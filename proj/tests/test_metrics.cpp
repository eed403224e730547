#include <doctest.h>

#include <cmath>
#include <fstream>
#include <functional>
#include <random>
#include <sstream>

#include "cmal/metrics.hpp"

#ifndef CMAL_GOLDEN_DIR
#error "CMAL_GOLDEN_DIR must point at tests/golden"
#endif

using namespace cmal;

namespace {

struct GoldenCase {
  TokenSequence hyp;
  std::vector<TokenSequence> refs;
  double expected = 0.0;
};

TokenSequence parse_ids(const std::string& text) {
  std::istringstream in(text);
  TokenSequence out;
  TokenId id;
  while (in >> id) out.push_back(id);
  return out;
}

std::vector<GoldenCase> load_golden(const std::string& name) {
  std::ifstream in(std::string(CMAL_GOLDEN_DIR) + "/" + name);
  REQUIRE(in.good());
  std::vector<GoldenCase> cases;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty() || line[0] == '#') continue;
    const auto a = line.find('|'), b = line.rfind('|');
    REQUIRE(a != b);
    GoldenCase c;
    c.hyp = parse_ids(line.substr(0, a));
    std::istringstream refs(line.substr(a + 1, b - a - 1));
    std::string ref;
    while (std::getline(refs, ref, ';')) c.refs.push_back(parse_ids(ref));
    c.expected = std::stod(line.substr(b + 1));
    cases.push_back(std::move(c));
  }
  REQUIRE(cases.size() >= 40);
  return cases;
}

void check_golden(const std::string& file, const std::function<double(const GoldenCase&)>& metric) {
  for (const GoldenCase& c : load_golden(file)) {
    INFO(file << " hyp " << join_ids(c.hyp));
    CHECK(std::abs(metric(c) - c.expected) <= 1e-6);
  }
}

}  // namespace

TEST_CASE("sentence BLEU matches the independent oracle") {
  check_golden("bleu.txt", [](const GoldenCase& c) { return sentence_bleu(c.hyp, c.refs); });
  check_golden("bleu_nosmooth.txt", [](const GoldenCase& c) { return sentence_bleu(c.hyp, c.refs, 4, false); });
}

TEST_CASE("sentence GLEU matches the independent oracle") {
  check_golden("gleu.txt", [](const GoldenCase& c) { return sentence_gleu(c.hyp, c.refs); });
}

TEST_CASE("CIDEr-D matches the independent oracle") {
  const auto cases = load_golden("cider.txt");
  std::vector<std::vector<TokenSequence>> corpus;
  for (const auto& c : cases) corpus.push_back(c.refs);
  const DocFreqTable df(corpus);
  CHECK(df.documents() == cases.size());
  for (const auto& c : cases) {
    INFO("hyp " << join_ids(c.hyp));
    CHECK(std::abs(cider_d(c.hyp, c.refs, &df) - c.expected) <= 1e-6);
  }
}

TEST_CASE("repetition rate matches the independent oracle") {
  check_golden("repetition.txt", [](const GoldenCase& c) { return repetition_rate(c.hyp); });
}

TEST_CASE("hand-computed examples") {
  const std::vector<TokenSequence> ref{{4, 5, 6, 7}};
  CHECK(sentence_bleu(TokenSequence{4, 5, 6, 7}, ref) == doctest::Approx(1.0));
  CHECK(sentence_gleu(TokenSequence{4, 5, 6, 7}, ref) == doctest::Approx(1.0));
  CHECK(sentence_bleu(TokenSequence{8, 9}, ref) == 0.0);
  CHECK(sentence_gleu(TokenSequence{}, ref) == 0.0);
  CHECK(sentence_gleu(TokenSequence{4}, {{4, 5}}) == doctest::Approx(1.0 / 3.0));
  CHECK(repetition_rate(TokenSequence{4, 4, 5}) == doctest::Approx(0.5));
  CHECK(repetition_rate(TokenSequence{4, 4, 4, 4}) == doctest::Approx(1.0));
  CHECK(repetition_rate(TokenSequence{4, 5, 6}) == 0.0);
  CHECK(repetition_rate(TokenSequence{}) == 0.0);
  CHECK(repetition_rate(TokenSequence{0, 0, 0}) == 0.0);
}

TEST_CASE("corpus BLEU is 100 on identity and pools counts") {
  const std::vector<TokenSequence> hyps{{4, 5, 6, 7}, {8, 9, 10, 11, 12}};
  const std::vector<std::vector<TokenSequence>> refs{{hyps[0]}, {hyps[1]}};
  CHECK(corpus_bleu(hyps, refs) == doctest::Approx(100.0));
  CHECK_THROWS_AS((void)corpus_bleu(hyps, {{hyps[0]}}), std::invalid_argument);
}

TEST_CASE("metric invariants over random sequences") {
  std::mt19937 rng(77);
  std::uniform_int_distribution<int> len(1, 9), tok(4, 9);
  auto draw = [&] {
    TokenSequence s(static_cast<std::size_t>(len(rng)));
    for (auto& t : s) t = tok(rng);
    return s;
  };
  for (int i = 0; i < 200; ++i) {
    const TokenSequence h = draw(), r = draw();
    const double b = sentence_bleu(h, {r}), g = sentence_gleu(h, {r});
    CHECK(b >= 0.0);
    CHECK(b <= 1.0 + 1e-12);
    CHECK(g >= 0.0);
    CHECK(g <= 1.0 + 1e-12);
    CHECK(sentence_gleu(h, {r}) == doctest::Approx(sentence_gleu(r, {h})));
    CHECK(sentence_gleu(h, {r, draw()}) >= g - 1e-12);
    CHECK(sentence_gleu(r, {r}) == doctest::Approx(1.0));
  }
}

TEST_CASE("bound reward equals direct scoring") {
  const std::vector<TokenSequence> refs{{4, 5, 6, 7}, {4, 6, 5, 7}};
  const TokenSequence hyp{4, 5, 7};
  for (RewardKind kind : {RewardKind::Bleu, RewardKind::Gleu}) {
    RewardFunction f;
    f.kind = kind;
    CHECK(f.bind(refs)(hyp) == doctest::Approx(f(hyp, refs)).epsilon(1e-14));
  }
  CHECK(parse_reward_kind(to_string(RewardKind::CiderD)) == RewardKind::CiderD);
  CHECK_THROWS_AS((void)parse_reward_kind("rouge"), std::invalid_argument);
}

TEST_CASE("n-gram counts") {
  const NgramCounts c(TokenSequence{4, 5, 4, 5}, 2);
  CHECK(c.total(1) == 4);
  CHECK(c.total(2) == 3);
  CHECK(c.total(3) == 0);
  const TokenSequence g{4, 5};
  CHECK(c.count(ngram_key(g)) == 2);
}

TEST_CASE("CIDEr-D self-similarity, sigma monotonicity and length penalty") {
  DocFreqTable uniform;
  uniform.set_documents(10);
  const TokenSequence s{4, 5, 6, 7, 8};
  CHECK(cider_d(s, {s}, &uniform) == doctest::Approx(10.0));
  CHECK(cider_d(TokenSequence{9, 10}, {s}, &uniform) == 0.0);
  const TokenSequence partial{4, 5, 6, 9};
  CHECK(cider_d(partial, {s}, &uniform, 12.0) >= cider_d(partial, {s}, &uniform, 6.0));
  const TokenSequence ref{4, 5, 4, 5, 4, 5, 4, 5};
  double previous = INFINITY;
  for (std::size_t len = 8; len <= 16; len += 2) {
    TokenSequence padded = ref;
    padded.resize(len, 4);
    std::vector<TokenSequence> refs{padded};
    const double score = cider_d(ref, refs, &uniform);
    CHECK(score < previous);
    previous = score;
  }
  CHECK_THROWS_AS((void)cider_d(s, {s}, nullptr), std::invalid_argument);
}

TEST_CASE("rewards ignore reference order") {
  const TokenSequence hyp{4, 5, 6, 9};
  std::vector<TokenSequence> refs{{4, 5, 6, 7}, {9, 6, 5}, {4, 9}};
  std::vector<TokenSequence> reversed(refs.rbegin(), refs.rend());
  const DocFreqTable df({refs});
  CHECK(sentence_bleu(hyp, refs) == sentence_bleu(hyp, reversed));
  CHECK(sentence_gleu(hyp, refs) == sentence_gleu(hyp, reversed));
  CHECK(cider_d(hyp, refs, &df) == doctest::Approx(cider_d(hyp, reversed, &df)).epsilon(1e-14));
}

TEST_CASE("postprocessed sequences have no repetition") {
  std::mt19937 rng(3);
  std::uniform_int_distribution<int> tok(4, 6), len(0, 12);
  for (int i = 0; i < 200; ++i) {
    TokenSequence s(static_cast<std::size_t>(len(rng)));
    for (auto& t : s) t = tok(rng);
    CHECK(repetition_rate(postprocess(s)) == 0.0);
  }
}

TEST_CASE("single-sentence corpus BLEU equals unsmoothed sentence BLEU") {
  const TokenSequence hyp{4, 5, 6, 7, 8, 9}, ref{4, 5, 6, 7, 8, 9, 10};
  CHECK(corpus_bleu({hyp}, {{ref}}) == doctest::Approx(100.0 * sentence_bleu(hyp, {ref}, 4, false)).epsilon(1e-12));
  CHECK_THROWS_AS((void)corpus_bleu({}, {}), std::invalid_argument);
}
