#pragma once

#include <cstdint>
#include <functional>
#include <random>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "cmal/data.hpp"
#include "cmal/metrics.hpp"
#include "cmal/model.hpp"
#include "cmal/optim.hpp"

namespace cmal {

/// How a joint action becomes a sentence: cut at the first eos (fixed agent
/// count) or keep every token (predicted length).
enum class Truncation { AtFirstEos, None };

Truncation truncation_for(const ModelConfig& config);
TokenSequence joint_to_sentence(std::span<const TokenId> actions, Truncation truncation);

/// One sampled joint action u and its team reward R(u).
struct JointSample {
  TokenSequence actions;
  std::vector<double> log_probs;
  TokenSequence sentence;
  double reward = 0.0;
};

/// One categorical draw per agent row.
JointSample sample_joint(const PolicyMatrix& policy, std::mt19937_64& rng, Truncation truncation);
/// Highest-probability id per agent (lowest id on ties).
TokenSequence argmax_joint(const PolicyMatrix& policy);

/// Team reward over joint actions, memoized by truncated sentence.
class JointReward {
 public:
  JointReward(SentenceReward reward, Truncation truncation);

  double operator()(std::span<const TokenId> actions);
  double score_sentence(const TokenSequence& sentence);
  /// Rewards requested (including cache hits).
  std::size_t calls() const { return calls_; }
  /// Rewards actually computed by the metric.
  std::size_t evaluations() const { return evaluations_; }
  Truncation truncation() const { return truncation_; }

 private:
  struct Hash {
    std::size_t operator()(const TokenSequence& s) const;
  };
  SentenceReward reward_;
  Truncation truncation_;
  std::unordered_map<TokenSequence, double, Hash> cache_;
  std::size_t calls_ = 0;
  std::size_t evaluations_ = 0;
};

struct BaselineSpec {
  enum class Kind { None, MovingAverage, SelfCritical, Counterfactual };

  Kind kind = Kind::None;
  double decay = 0.99;
  std::size_t k = 2;
  double lambda = 0.5;
  bool compositional = false;

  static BaselineSpec none() { return {}; }
  static BaselineSpec moving_average(double decay = 0.99);
  static BaselineSpec self_critical();
  static BaselineSpec counterfactual(std::size_t k = 2, double lambda = 0.5, bool compositional = false);

  void validate() const;
  /// Short label: none | ma | sc | cf | cf+ca.
  std::string name() const;
  static BaselineSpec parse(const std::string& name, std::size_t k = 2, double lambda = 0.5, double decay = 0.99);
};

/// b <- decay * b + (1 - decay) * r. next() returns b as it was before the update.
class MovingAverageBaseline {
 public:
  explicit MovingAverageBaseline(double decay = 0.99);
  double next(double reward);
  double value() const { return value_; }

 private:
  double decay_;
  double value_ = 0.0;
};

/// Top-k ids of a distribution; ties go to the lower id.
std::vector<TokenId> top_k_ids(std::span<const double> probs, std::size_t k);

double baseline_none(const JointSample& sample);

/// Reward of the per-agent argmax decode; shared by every agent of the input.
double self_critical_baseline(const PolicyMatrix& policy, JointReward& reward);

/// B_a = sum over the renormalized top-k actions u' of agent a of
/// pi'(u') * R([u_-a, u']).
std::vector<double> counterfactual_baseline_individual(const JointSample& sample, const PolicyMatrix& policy,
                                                       JointReward& reward, std::size_t k);

/// Pair baselines over adjacent agents (i, i+1), marginalizing the pair
/// jointly over the top-k of the k x k product cross, then averaged onto
/// agents: interior agents take the mean of their two pairs, the first and
/// last agent take their single pair.
std::vector<double> counterfactual_baseline_compositional(const JointSample& sample, const PolicyMatrix& policy,
                                                          JointReward& reward, std::size_t k);

/// (1 - lambda) * individual + lambda * compositional.
std::vector<double> final_baseline(std::span<const double> individual, std::span<const double> compositional,
                                   double lambda);

struct AdvantageVector {
  std::vector<double> advantages;
  std::vector<double> baselines;
};

AdvantageVector make_advantages(const JointSample& sample, std::vector<double> baselines);

/// Per-agent baselines for every sample of one policy pass. The moving
/// average state is consumed in sample order.
std::vector<AdvantageVector> compute_advantages(const std::vector<JointSample>& samples, const BaselineSpec& spec,
                                                const PolicyMatrix& policy, JointReward& reward,
                                                MovingAverageBaseline* moving_average);

/// -(1/|samples|) * sum_s sum_a A_a * log pi_a(u_a). Advantages enter as
/// constants; the gradient flows through the policy's log-probs only.
Tensor reinforce_loss(const std::vector<JointSample>& samples, const std::vector<AdvantageVector>& advantages,
                      const PolicyMatrix& policy);

struct StepStats {
  double mean_reward = 0.0;
  double mean_baseline = 0.0;
  double mean_advantage = 0.0;
  double mean_abs_advantage = 0.0;
  double loss = 0.0;
  std::size_t samples = 0;
  std::size_t rescoring_calls = 0;
  std::string baseline;
};

/// REINFORCE with a pluggable baseline over a non-autoregressive model.
class CmalTrainer {
 public:
  CmalTrainer(Seq2Seq& model, Adam& optimizer, BaselineSpec baseline, RewardFunction reward,
              std::size_t samples_per_input, std::uint64_t seed);

  /// Forward, sample, score, baseline, backward and one optimizer update.
  /// Every example must carry Real provenance.
  StepStats step(std::span<const Example> batch);

  const BaselineSpec& baseline() const { return baseline_; }

 private:
  Seq2Seq* model_;
  Adam* optimizer_;
  BaselineSpec baseline_;
  RewardFunction reward_;
  std::size_t samples_per_input_;
  std::mt19937_64 rng_;
  MovingAverageBaseline moving_average_;
};

}  // namespace cmal
