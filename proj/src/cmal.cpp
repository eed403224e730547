#include "cmal/cmal.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace cmal {

Truncation truncation_for(const ModelConfig& config) {
  return config.length_mode == LengthMode::Fixed ? Truncation::AtFirstEos : Truncation::None;
}

TokenSequence joint_to_sentence(std::span<const TokenId> actions, Truncation truncation) {
  if (truncation == Truncation::AtFirstEos) return truncate_at_eos(actions);
  return TokenSequence(actions.begin(), actions.end());
}

JointSample sample_joint(const PolicyMatrix& policy, std::mt19937_64& rng, Truncation truncation) {
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  JointSample s;
  s.actions.resize(policy.agents);
  s.log_probs.resize(policy.agents);
  for (std::size_t a = 0; a < policy.agents; ++a) {
    const auto row = policy.row(a);
    const double target = unit(rng);
    double cumulative = 0.0;
    std::size_t chosen = row.size();
    std::size_t last_positive = 0;
    for (std::size_t u = 0; u < row.size(); ++u) {
      if (row[u] <= 0.0) continue;
      last_positive = u;
      cumulative += row[u];
      if (target < cumulative) {
        chosen = u;
        break;
      }
    }
    if (chosen == row.size()) chosen = last_positive;  // rounding left the draw past the last bin
    s.actions[a] = static_cast<TokenId>(chosen);
    s.log_probs[a] = policy.log_prob(a, s.actions[a]);
  }
  s.sentence = joint_to_sentence(s.actions, truncation);
  return s;
}

TokenSequence argmax_joint(const PolicyMatrix& policy) {
  TokenSequence out(policy.agents);
  for (std::size_t a = 0; a < policy.agents; ++a) {
    const auto row = policy.row(a);
    out[a] = static_cast<TokenId>(std::max_element(row.begin(), row.end()) - row.begin());
  }
  return out;
}

std::size_t JointReward::Hash::operator()(const TokenSequence& s) const {
  std::uint64_t h = 1469598103934665603ULL;
  for (TokenId t : s) {
    h ^= static_cast<std::uint64_t>(static_cast<std::uint32_t>(t));
    h *= 1099511628211ULL;
  }
  h ^= s.size();
  return static_cast<std::size_t>(h);
}

JointReward::JointReward(SentenceReward reward, Truncation truncation)
    : reward_(std::move(reward)), truncation_(truncation) {}

double JointReward::operator()(std::span<const TokenId> actions) {
  return score_sentence(joint_to_sentence(actions, truncation_));
}

double JointReward::score_sentence(const TokenSequence& sentence) {
  ++calls_;
  if (auto it = cache_.find(sentence); it != cache_.end()) return it->second;
  ++evaluations_;
  const double r = reward_(sentence);
  cache_.emplace(sentence, r);
  return r;
}

BaselineSpec BaselineSpec::moving_average(double decay) {
  BaselineSpec s;
  s.kind = Kind::MovingAverage;
  s.decay = decay;
  return s;
}

BaselineSpec BaselineSpec::self_critical() {
  BaselineSpec s;
  s.kind = Kind::SelfCritical;
  return s;
}

BaselineSpec BaselineSpec::counterfactual(std::size_t k, double lambda, bool compositional) {
  BaselineSpec s;
  s.kind = Kind::Counterfactual;
  s.k = k;
  s.lambda = lambda;
  s.compositional = compositional;
  return s;
}

void BaselineSpec::validate() const {
  if (k < 1) throw std::invalid_argument("baseline: k must be >= 1");
  if (lambda < 0.0 || lambda > 1.0) throw std::invalid_argument("baseline: lambda must lie in [0, 1]");
  if (!(decay > 0.0 && decay < 1.0)) throw std::invalid_argument("baseline: decay must lie in (0, 1)");
}

std::string BaselineSpec::name() const {
  switch (kind) {
    case Kind::None: return "none";
    case Kind::MovingAverage: return "ma";
    case Kind::SelfCritical: return "sc";
    case Kind::Counterfactual: return compositional ? "cf+ca" : "cf";
  }
  return "?";
}

BaselineSpec BaselineSpec::parse(const std::string& name, std::size_t k, double lambda, double decay) {
  BaselineSpec s;
  if (name == "none") s = none();
  else if (name == "ma") s = moving_average(decay);
  else if (name == "sc") s = self_critical();
  else if (name == "cf") s = counterfactual(k, lambda, false);
  else if (name == "cf+ca" || name == "cfca") s = counterfactual(k, lambda, true);
  else throw std::invalid_argument("unknown baseline '" + name + "' (expected none|ma|sc|cf|cf+ca)");
  s.decay = decay;
  s.validate();
  return s;
}

MovingAverageBaseline::MovingAverageBaseline(double decay) : decay_(decay) {
  if (!(decay > 0.0 && decay < 1.0)) throw std::invalid_argument("moving average decay must lie in (0, 1)");
}

double MovingAverageBaseline::next(double reward) {
  const double before = value_;
  value_ = decay_ * value_ + (1.0 - decay_) * reward;
  return before;
}

std::vector<TokenId> top_k_ids(std::span<const double> probs, std::size_t k) {
  std::vector<TokenId> ids(probs.size());
  std::iota(ids.begin(), ids.end(), 0);
  const std::size_t take = std::min(k, ids.size());
  std::partial_sort(ids.begin(), ids.begin() + static_cast<long>(take), ids.end(), [&](TokenId a, TokenId b) {
    const double pa = probs[static_cast<std::size_t>(a)], pb = probs[static_cast<std::size_t>(b)];
    return pa != pb ? pa > pb : a < b;
  });
  ids.resize(take);
  return ids;
}

double baseline_none(const JointSample&) { return 0.0; }

double self_critical_baseline(const PolicyMatrix& policy, JointReward& reward) {
  return reward(argmax_joint(policy));
}

std::vector<double> counterfactual_baseline_individual(const JointSample& sample, const PolicyMatrix& policy,
                                                       JointReward& reward, std::size_t k) {
  if (k < 1 || k > policy.vocab) {
    throw std::invalid_argument("counterfactual baseline: k must lie in [1, |U|]");
  }
  if (sample.actions.size() != policy.agents) throw std::invalid_argument("sample does not match policy");
  std::vector<double> baselines(policy.agents, 0.0);
  TokenSequence joint = sample.actions;
  for (std::size_t a = 0; a < policy.agents; ++a) {
    const auto row = policy.row(a);
    const auto candidates = top_k_ids(row, k);
    double mass = 0.0;
    for (TokenId u : candidates) mass += row[static_cast<std::size_t>(u)];
    double b = 0.0;
    for (TokenId u : candidates) {
      double r;
      if (u == sample.actions[a]) {
        r = sample.reward;
      } else {
        joint[a] = u;
        r = reward(joint);
      }
      b += row[static_cast<std::size_t>(u)] / mass * r;
    }
    joint[a] = sample.actions[a];
    baselines[a] = b;
  }
  return baselines;
}

std::vector<double> counterfactual_baseline_compositional(const JointSample& sample, const PolicyMatrix& policy,
                                                          JointReward& reward, std::size_t k) {
  const std::size_t n = policy.agents;
  if (n < 2) throw std::invalid_argument("compositional baseline needs at least two agents");
  if (k < 1) throw std::invalid_argument("compositional baseline: k must be >= 1");
  if (sample.actions.size() != n) throw std::invalid_argument("sample does not match policy");

  struct Pair {
    double prob;
    TokenId left, right;
  };
  std::vector<double> pair_baseline(n - 1, 0.0);
  TokenSequence joint = sample.actions;
  for (std::size_t i = 0; i + 1 < n; ++i) {
    const auto left_row = policy.row(i);
    const auto right_row = policy.row(i + 1);
    const auto left = top_k_ids(left_row, k);
    const auto right = top_k_ids(right_row, k);
    std::vector<Pair> cross;
    cross.reserve(left.size() * right.size());
    for (TokenId x : left)
      for (TokenId y : right)
        cross.push_back({left_row[static_cast<std::size_t>(x)] * right_row[static_cast<std::size_t>(y)], x, y});
    std::sort(cross.begin(), cross.end(), [](const Pair& a, const Pair& b) {
      if (a.prob != b.prob) return a.prob > b.prob;
      return a.left != b.left ? a.left < b.left : a.right < b.right;
    });
    if (cross.size() > k) cross.resize(k);
    double mass = 0.0;
    for (const Pair& p : cross) mass += p.prob;
    double b = 0.0;
    for (const Pair& p : cross) {
      double r;
      if (p.left == sample.actions[i] && p.right == sample.actions[i + 1]) {
        r = sample.reward;
      } else {
        joint[i] = p.left;
        joint[i + 1] = p.right;
        r = reward(joint);
      }
      b += p.prob / mass * r;
    }
    joint[i] = sample.actions[i];
    joint[i + 1] = sample.actions[i + 1];
    pair_baseline[i] = b;
  }

  std::vector<double> per_agent(n);
  per_agent.front() = pair_baseline.front();
  per_agent.back() = pair_baseline.back();
  for (std::size_t i = 1; i + 1 < n; ++i) per_agent[i] = 0.5 * (pair_baseline[i - 1] + pair_baseline[i]);
  return per_agent;
}

std::vector<double> final_baseline(std::span<const double> individual, std::span<const double> compositional,
                                   double lambda) {
  if (individual.size() != compositional.size()) {
    throw std::invalid_argument("final_baseline: " + std::to_string(individual.size()) + " individual vs " +
                                std::to_string(compositional.size()) + " compositional values");
  }
  std::vector<double> out(individual.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = (1.0 - lambda) * individual[i] + lambda * compositional[i];
  return out;
}

AdvantageVector make_advantages(const JointSample& sample, std::vector<double> baselines) {
  AdvantageVector adv;
  adv.advantages.resize(baselines.size());
  for (std::size_t a = 0; a < baselines.size(); ++a) adv.advantages[a] = sample.reward - baselines[a];
  adv.baselines = std::move(baselines);
  return adv;
}

std::vector<AdvantageVector> compute_advantages(const std::vector<JointSample>& samples, const BaselineSpec& spec,
                                                const PolicyMatrix& policy, JointReward& reward,
                                                MovingAverageBaseline* moving_average) {
  spec.validate();
  std::vector<AdvantageVector> out;
  out.reserve(samples.size());
  const std::size_t n = policy.agents;
  double shared = 0.0;
  if (spec.kind == BaselineSpec::Kind::SelfCritical) shared = self_critical_baseline(policy, reward);
  for (const JointSample& s : samples) {
    switch (spec.kind) {
      case BaselineSpec::Kind::None:
        out.push_back(make_advantages(s, std::vector<double>(n, baseline_none(s))));
        break;
      case BaselineSpec::Kind::MovingAverage: {
        if (moving_average == nullptr) throw std::invalid_argument("moving-average baseline needs state");
        out.push_back(make_advantages(s, std::vector<double>(n, moving_average->next(s.reward))));
        break;
      }
      case BaselineSpec::Kind::SelfCritical:
        out.push_back(make_advantages(s, std::vector<double>(n, shared)));
        break;
      case BaselineSpec::Kind::Counterfactual: {
        auto individual = counterfactual_baseline_individual(s, policy, reward, std::min(spec.k, policy.vocab));
        if (spec.compositional && n >= 2) {
          const auto comp = counterfactual_baseline_compositional(s, policy, reward, spec.k);
          out.push_back(make_advantages(s, final_baseline(individual, comp, spec.lambda)));
        } else {
          out.push_back(make_advantages(s, std::move(individual)));
        }
        break;
      }
    }
  }
  return out;
}

Tensor reinforce_loss(const std::vector<JointSample>& samples, const std::vector<AdvantageVector>& advantages,
                      const PolicyMatrix& policy) {
  if (samples.empty()) throw std::invalid_argument("reinforce_loss: no samples");
  if (samples.size() != advantages.size()) throw std::invalid_argument("reinforce_loss: advantages/samples differ");
  const std::size_t n = policy.agents, V = policy.vocab;
  std::vector<double> coeff(n * V, 0.0);
  const double inv = 1.0 / static_cast<double>(samples.size());
  for (std::size_t s = 0; s < samples.size(); ++s) {
    const JointSample& js = samples[s];
    if (js.actions.size() != n || advantages[s].advantages.size() != n) {
      throw std::invalid_argument("reinforce_loss: sample has " + std::to_string(js.actions.size()) +
                                  " agents, policy has " + std::to_string(n));
    }
    for (std::size_t a = 0; a < n; ++a) {
      const TokenId u = js.actions[a];
      if (u < 0 || static_cast<std::size_t>(u) >= V || js.log_probs[a] != policy.log_prob(a, u)) {
        throw std::invalid_argument("reinforce_loss: sample was not drawn from this policy pass");
      }
      coeff[a * V + static_cast<std::size_t>(u)] += advantages[s].advantages[a] * inv;
    }
  }
  return scale(sum(mul(policy.log_probs, Tensor::matrix(n, V, std::move(coeff)))), -1.0);
}

CmalTrainer::CmalTrainer(Seq2Seq& model, Adam& optimizer, BaselineSpec baseline, RewardFunction reward,
                         std::size_t samples_per_input, std::uint64_t seed)
    : model_(&model),
      optimizer_(&optimizer),
      baseline_(baseline),
      reward_(reward),
      samples_per_input_(samples_per_input),
      rng_(seed),
      moving_average_(baseline.decay) {
  baseline_.validate();
  if (samples_per_input_ < 1) throw std::invalid_argument("samples_per_input must be >= 1");
  if (model.config().decoder != DecoderKind::NonAutoregressive) {
    throw std::invalid_argument("CMAL training needs a non-autoregressive model");
  }
}

StepStats CmalTrainer::step(std::span<const Example> batch) {
  if (batch.empty()) throw std::invalid_argument("empty batch");
  StepStats stats;
  stats.baseline = baseline_.name();
  const Truncation truncation = truncation_for(model_->config());
  model_->zero_grad();
  double reward_sum = 0.0, baseline_sum = 0.0, adv_sum = 0.0, abs_adv_sum = 0.0, loss_sum = 0.0;
  std::size_t agent_terms = 0;
  for (const Example& ex : batch) {
    if (ex.provenance != Provenance::Real) throw std::invalid_argument("CMAL training consumes real pairs only");
    Tape tape;
    TapeScope scope(tape);
    const Tensor context = model_->encode(ex.source);
    const std::size_t length = model_->inference_length(context, ex.source.size());
    const PolicyMatrix policy = model_->decode_na(context, length);

    JointReward reward(reward_.bind(ex.targets), truncation);
    std::vector<JointSample> samples;
    samples.reserve(samples_per_input_);
    for (std::size_t s = 0; s < samples_per_input_; ++s) {
      JointSample js = sample_joint(policy, rng_, truncation);
      js.reward = reward.score_sentence(js.sentence);
      samples.push_back(std::move(js));
    }
    const std::size_t calls_before = reward.calls();
    const auto advantages = compute_advantages(samples, baseline_, policy, reward, &moving_average_);
    stats.rescoring_calls += reward.calls() - calls_before;

    const Tensor loss = scale(reinforce_loss(samples, advantages, policy), 1.0 / static_cast<double>(batch.size()));
    tape.backward(loss);
    loss_sum += loss.item();
    for (std::size_t s = 0; s < samples.size(); ++s) {
      reward_sum += samples[s].reward;
      for (std::size_t a = 0; a < length; ++a) {
        baseline_sum += advantages[s].baselines[a];
        adv_sum += advantages[s].advantages[a];
        abs_adv_sum += std::abs(advantages[s].advantages[a]);
        ++agent_terms;
      }
    }
    stats.samples += samples.size();
  }
  optimizer_->step();
  stats.mean_reward = reward_sum / static_cast<double>(stats.samples);
  stats.mean_baseline = baseline_sum / static_cast<double>(agent_terms);
  stats.mean_advantage = adv_sum / static_cast<double>(agent_terms);
  stats.mean_abs_advantage = abs_adv_sum / static_cast<double>(agent_terms);
  stats.loss = loss_sum;
  return stats;
}

}  // namespace cmal
