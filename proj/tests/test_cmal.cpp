#include <doctest.h>

#include <cmath>

#include "cmal/cmal.hpp"

using namespace cmal;

namespace {

constexpr std::size_t kN = 3;
constexpr std::size_t kU = 5;

Tensor instance_logits() {
  return Tensor::matrix(kN, kU, {0.2, 1.0, -0.5, 0.3, 0.9, -0.2, 0.4, 1.3, 0.0, -1.1, 0.8, 0.1, -0.3, 0.6, 0.5},
                        true);
}

PolicyMatrix policy_of(const Tensor& logits) { return PolicyMatrix::from_log_probs(log_softmax(logits, -1)); }

// Position matches against a fixed reference, a small length bonus and a
// penalty for a repeated opening token. Id 2 is eos under truncation.
double toy_reward(std::span<const TokenId> s) {
  const TokenSequence ref{4, 3, 4};
  double r = 0.1 * static_cast<double>(s.size());
  for (std::size_t i = 0; i < s.size() && i < ref.size(); ++i) r += s[i] == ref[i] ? 1.0 : 0.0;
  if (s.size() >= 2 && s[0] == s[1]) r -= 0.7;
  return r;
}

std::vector<TokenSequence> all_joint_actions() {
  std::vector<TokenSequence> out;
  for (std::size_t code = 0; code < kU * kU * kU; ++code) {
    TokenSequence u(kN);
    std::size_t c = code;
    for (auto& t : u) {
      t = static_cast<TokenId>(c % kU);
      c /= kU;
    }
    out.push_back(u);
  }
  return out;
}

JointSample sample_for(const PolicyMatrix& policy, const TokenSequence& u, Truncation truncation) {
  JointSample s;
  s.actions = u;
  s.sentence = joint_to_sentence(u, truncation);
  for (std::size_t a = 0; a < kN; ++a) s.log_probs.push_back(policy.log_prob(a, u[a]));
  s.reward = toy_reward(s.sentence);
  return s;
}

std::vector<double> gradient(const TokenSequence& u, const BaselineSpec& spec, Truncation truncation,
                             double ma_state) {
  Tensor logits = instance_logits();
  Tape tape;
  TapeScope scope(tape);
  const PolicyMatrix policy = policy_of(logits);
  JointReward reward(toy_reward, truncation);
  const std::vector<JointSample> samples{sample_for(policy, u, truncation)};
  MovingAverageBaseline ma(0.5);
  ma.next(2.0 * ma_state);
  const auto adv = compute_advantages(samples, spec, policy, reward, &ma);
  tape.backward(reinforce_loss(samples, adv, policy));
  return {logits.grad().begin(), logits.grad().end()};
}

std::vector<double> expected_gradient(const BaselineSpec& spec, Truncation truncation) {
  const PolicyMatrix policy = policy_of(instance_logits().detach());
  std::vector<double> g(kN * kU, 0.0);
  for (const TokenSequence& u : all_joint_actions()) {
    double pu = 1.0;
    for (std::size_t a = 0; a < kN; ++a) pu *= policy.prob(a, u[a]);
    const auto gu = gradient(u, spec, truncation, 0.8);
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += pu * gu[i];
  }
  return g;
}

double max_abs_diff(const std::vector<double>& a, const std::vector<double>& b) {
  double worst = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) worst = std::max(worst, std::abs(a[i] - b[i]));
  return worst;
}

}  // namespace

TEST_CASE("moving average baseline returns the value before each update") {
  MovingAverageBaseline ma(0.9);
  CHECK(ma.next(1.0) == 0.0);
  CHECK(ma.next(0.0) == doctest::Approx(0.1));
  CHECK(ma.value() == doctest::Approx(0.09));
  CHECK_THROWS_AS(MovingAverageBaseline(1.0), std::invalid_argument);
}

TEST_CASE("top-k ids sort by probability with ties to the lower id") {
  const std::vector<double> p{0.1, 0.3, 0.3, 0.2, 0.1};
  CHECK(top_k_ids(p, 2) == std::vector<TokenId>{1, 2});
  CHECK(top_k_ids(p, 4) == std::vector<TokenId>{1, 2, 3, 0});
  CHECK(top_k_ids(p, 9).size() == 5);
}

TEST_CASE("final baseline mixes individual and compositional terms") {
  const std::vector<double> ind{1.0, 2.0}, comp{3.0, 6.0};
  CHECK(final_baseline(ind, comp, 0.0) == ind);
  CHECK(final_baseline(ind, comp, 1.0) == comp);
  const auto half = final_baseline(ind, comp, 0.25);
  CHECK(half[0] == doctest::Approx(1.5));
  CHECK(half[1] == doctest::Approx(3.0));
}

TEST_CASE("baseline spec parsing and names") {
  for (const char* name : {"none", "ma", "sc", "cf", "cf+ca"}) CHECK(BaselineSpec::parse(name).name() == name);
  CHECK(BaselineSpec::parse("cf+ca", 5, 0.3).k == 5);
  CHECK(BaselineSpec::parse("cf+ca", 5, 0.3).lambda == 0.3);
  CHECK_THROWS_AS((void)BaselineSpec::parse("critic"), std::invalid_argument);
  CHECK_THROWS_AS((void)BaselineSpec::parse("cf", 0), std::invalid_argument);
  CHECK_THROWS_AS((void)BaselineSpec::parse("cf+ca", 2, 1.5), std::invalid_argument);
}

TEST_CASE("joint actions become sentences") {
  const TokenSequence u{5, 6, kEos, 7};
  CHECK(joint_to_sentence(u, Truncation::AtFirstEos) == TokenSequence{5, 6});
  CHECK(joint_to_sentence(u, Truncation::None) == u);
}

TEST_CASE("self-critical baseline scores the argmax decode") {
  const PolicyMatrix policy = policy_of(Tensor::matrix(2, 6, {0, 0, 0, 0, 9, 0, 0, 0, 0, 0, 0, 9}));
  CHECK(argmax_joint(policy) == TokenSequence{4, 5});
  JointReward reward([](std::span<const TokenId> s) { return static_cast<double>(s.size() * 10 + s[0]); },
                     Truncation::None);
  CHECK(self_critical_baseline(policy, reward) == 24.0);
}

TEST_CASE("joint reward caches by truncated sentence") {
  int evaluations = 0;
  JointReward reward(
      [&](std::span<const TokenId> s) {
        ++evaluations;
        return static_cast<double>(s.size());
      },
      Truncation::AtFirstEos);
  CHECK(reward(TokenSequence{5, kEos, 6}) == 1.0);
  CHECK(reward(TokenSequence{5, kEos, 7}) == 1.0);
  CHECK(evaluations == 1);
  CHECK(reward.calls() == 2);
  CHECK(reward.evaluations() == 1);
}

TEST_CASE("reinforce loss vanishes with zero reward") {
  Tensor logits = instance_logits();
  Tape tape;
  TapeScope scope(tape);
  const PolicyMatrix policy = policy_of(logits);
  JointSample s = sample_for(policy, {1, 2, 3}, Truncation::None);
  s.reward = 0.0;
  const std::vector<JointSample> samples{s};
  const std::vector<AdvantageVector> adv{make_advantages(s, std::vector<double>(kN, 0.0))};
  const Tensor loss = reinforce_loss(samples, adv, policy);
  CHECK(loss.item() == 0.0);
  tape.backward(loss);
  for (double g : logits.grad()) CHECK(g == 0.0);
}

TEST_CASE("sampled action frequencies match the policy") {
  const PolicyMatrix policy = policy_of(instance_logits().detach());
  std::mt19937_64 rng(5);
  constexpr std::size_t draws = 20000;
  std::vector<double> counts(kN * kU, 0.0);
  for (std::size_t d = 0; d < draws; ++d) {
    const JointSample s = sample_joint(policy, rng, Truncation::None);
    for (std::size_t a = 0; a < kN; ++a) {
      counts[a * kU + static_cast<std::size_t>(s.actions[a])] += 1.0;
      CHECK(s.log_probs[a] == policy.log_prob(a, s.actions[a]));
    }
  }
  for (std::size_t i = 0; i < counts.size(); ++i) {
    const double p = policy.probs[i];
    const double sigma = std::sqrt(draws * p * (1 - p));
    CHECK(std::abs(counts[i] - draws * p) <= 3.0 * sigma + 1.0);
  }
}

TEST_CASE("individual counterfactual baseline matches direct marginalization for k < |U|") {
  const PolicyMatrix policy = policy_of(instance_logits().detach());
  const TokenSequence u{3, 0, 4};
  JointReward reward(toy_reward, Truncation::None);
  const JointSample s = sample_for(policy, u, Truncation::None);
  const auto b = counterfactual_baseline_individual(s, policy, reward, 2);
  for (std::size_t a = 0; a < kN; ++a) {
    const auto ids = top_k_ids(policy.row(a), 2);
    double mass = 0.0, expect = 0.0;
    for (TokenId v : ids) mass += policy.prob(a, v);
    for (TokenId v : ids) {
      TokenSequence alt = u;
      alt[a] = v;
      expect += policy.prob(a, v) / mass * toy_reward(alt);
    }
    CHECK(b[a] == doctest::Approx(expect).epsilon(1e-14));
  }
}

TEST_CASE("every baseline leaves the expected gradient unchanged") {
  for (Truncation truncation : {Truncation::None, Truncation::AtFirstEos}) {
    const auto reference = expected_gradient(BaselineSpec::none(), truncation);
    CHECK(max_abs_diff(reference, expected_gradient(BaselineSpec::moving_average(0.5), truncation)) < 1e-10);
    CHECK(max_abs_diff(reference, expected_gradient(BaselineSpec::self_critical(), truncation)) < 1e-10);
    CHECK(max_abs_diff(reference, expected_gradient(BaselineSpec::counterfactual(2, 0.5, false), truncation)) <
          1e-10);
    CHECK(max_abs_diff(reference, expected_gradient(BaselineSpec::counterfactual(kU, 0.5, false), truncation)) <
          1e-10);
    const double bias = max_abs_diff(reference, expected_gradient(BaselineSpec::counterfactual(2, 0.5, true), truncation));
    MESSAGE("cf+ca expected-gradient deviation from none: " << bias);
    CHECK(bias < 1e-10);
  }
}

TEST_CASE("trainer rejects distilled pairs and is deterministic") {
  ModelConfig cfg;
  cfg.vocab_size = 10;
  cfg.d_model = 8;
  cfg.n_heads = 2;
  cfg.n_layers = 1;
  cfg.d_ff = 8;
  cfg.n_agents = 4;
  cfg.n_max = 8;
  const ParallelCorpus batch{{{4, 5}, {{5, 4}}, Provenance::Real}, {{6, 7, 8}, {{8, 7, 6}}, Provenance::Real}};

  auto run = [&](std::uint64_t seed) {
    Seq2Seq model(cfg, 3);
    Adam adam(model.parameters(), AdamConfig{});
    CmalTrainer trainer(model, adam, BaselineSpec::counterfactual(2, 0.5, true), RewardFunction{}, 3, seed);
    std::vector<double> trace;
    for (int i = 0; i < 3; ++i) trace.push_back(trainer.step(batch).mean_reward);
    trace.push_back(model.find_parameter("out.w")->data()[0]);
    return trace;
  };
  CHECK(run(9) == run(9));

  Seq2Seq model(cfg, 3);
  Adam adam(model.parameters(), AdamConfig{});
  CmalTrainer trainer(model, adam, BaselineSpec::none(), RewardFunction{}, 2, 1);
  ParallelCorpus distilled = batch;
  distilled[1].provenance = Provenance::Distilled;
  CHECK_THROWS_AS((void)trainer.step(distilled), std::invalid_argument);
}
