#include "gasr/rl.hpp"

#include <cmath>
#include <iostream>
#include <numeric>

#include "gasr/parallel.hpp"

namespace gasr {

Algorithm parse_algorithm(const std::string& text) {
  if (text == "grpo") return Algorithm::kGrpo;
  if (text == "dapo") return Algorithm::kDapo;
  if (text == "drgrpo" || text == "dr_grpo") return Algorithm::kDrGrpo;
  throw ContractError("unknown algorithm '" + text + "' (expected grpo|dapo|drgrpo)");
}

std::string to_string(Algorithm algorithm) {
  switch (algorithm) {
    case Algorithm::kGrpo: return "grpo";
    case Algorithm::kDapo: return "dapo";
    case Algorithm::kDrGrpo: return "drgrpo";
  }
  return "?";
}

LossNormalization parse_loss_normalization(const std::string& text) {
  if (text == "per_sample") return LossNormalization::kPerSample;
  if (text == "per_token_batch") return LossNormalization::kPerTokenBatch;
  if (text == "unnormalized_sum") return LossNormalization::kUnnormalizedSum;
  throw ContractError("unknown loss normalization '" + text + "'");
}

std::string to_string(LossNormalization normalization) {
  switch (normalization) {
    case LossNormalization::kPerSample: return "per_sample";
    case LossNormalization::kPerTokenBatch: return "per_token_batch";
    case LossNormalization::kUnnormalizedSum: return "unnormalized_sum";
  }
  return "?";
}

DegeneratePolicy parse_degenerate_policy(const std::string& text) {
  if (text == "zero_advantage") return DegeneratePolicy::kZeroAdvantage;
  if (text == "skip_group") return DegeneratePolicy::kSkipGroup;
  throw ContractError("unknown degenerate-group policy '" + text + "'");
}

std::string to_string(DegeneratePolicy policy) {
  return policy == DegeneratePolicy::kSkipGroup ? "skip_group" : "zero_advantage";
}

RLConfig RLConfig::preset(Algorithm algorithm) {
  RLConfig c;
  c.algorithm = algorithm;
  switch (algorithm) {
    case Algorithm::kGrpo:
      break;
    case Algorithm::kDapo:
      c.beta = 0.0;
      c.eps_high = 0.28;
      c.loss_normalization = LossNormalization::kPerTokenBatch;
      c.degenerate_policy = DegeneratePolicy::kSkipGroup;
      break;
    case Algorithm::kDrGrpo:
      c.normalize_by_std = false;
      c.loss_normalization = LossNormalization::kUnnormalizedSum;
      break;
  }
  return c;
}

void RLConfig::validate() const {
  require(eps_low > 0.0, "rl: eps_low must be positive");
  require(eps_high >= eps_low, "rl: eps_high must be >= eps_low");
  require(beta >= 0.0, "rl: beta must be non-negative");
  require(group_size >= 2, "rl: group size must be at least 2");
  require(max_generation_length >= 1, "rl: max_generation_length must be positive");
  if (algorithm == Algorithm::kDapo) {
    require(beta == 0.0, "rl: DAPO removes the KL term, beta must be 0");
    require(eps_high > eps_low, "rl: DAPO requires eps_high > eps_low");
    require(loss_normalization == LossNormalization::kPerTokenBatch, "rl: DAPO requires per_token_batch");
  }
  if (algorithm == Algorithm::kDrGrpo) {
    require(!normalize_by_std, "rl: Dr. GRPO removes std normalization");
    require(loss_normalization == LossNormalization::kUnnormalizedSum, "rl: Dr. GRPO requires unnormalized_sum");
  }
  if (algorithm == Algorithm::kGrpo) {
    require(normalize_by_std, "rl: GRPO normalizes advantages by std");
    require(loss_normalization == LossNormalization::kPerSample, "rl: GRPO requires per_sample");
  }
}

AdvantageResult advantages(std::span<const double> rewards, bool normalize_by_std) {
  require(rewards.size() >= 2, "advantages: group needs at least 2 rewards");
  const double n = static_cast<double>(rewards.size());
  AdvantageResult out;
  out.values.assign(rewards.size(), 0.0);
  const auto [lo, hi] = std::minmax_element(rewards.begin(), rewards.end());
  if (*lo == *hi) {
    out.degenerate = true;
    return out;
  }
  const double mu = std::accumulate(rewards.begin(), rewards.end(), 0.0) / n;
  double var = 0.0;
  for (double r : rewards) var += (r - mu) * (r - mu);
  const double sigma = std::sqrt(var / n);
  for (std::size_t i = 0; i < rewards.size(); ++i) {
    out.values[i] = normalize_by_std ? (rewards[i] - mu) / sigma : rewards[i] - mu;
  }
  return out;
}

template <typename S>
Tensor<S> kl_divergence_term(const Tensor<S>& logp_ref, const Tensor<S>& logp_cur) {
  Tensor<S> diff = sub(stop_gradient(logp_ref), logp_cur);
  return add_scalar(sub(exp(diff), diff), S(-1));
}

double kl_divergence_value(double logp_ref, double logp_cur) {
  const double d = logp_ref - logp_cur;
  return std::exp(d) - d - 1.0;
}

Index RolloutGroup::token_count() const {
  Index n = 0;
  for (const auto& h : hypotheses) n += static_cast<Index>(h.size());
  return n;
}

namespace {

bool is_skipped(const RolloutGroup& g, const RLConfig& config) {
  return g.degenerate && config.degenerate_policy == DegeneratePolicy::kSkipGroup;
}

}  // namespace

std::vector<double> token_weights(std::span<const RolloutGroup> groups, const RLConfig& config) {
  double active = 0.0;
  double active_tokens = 0.0;
  for (const auto& g : groups) {
    if (is_skipped(g, config)) continue;
    active += 1.0;
    active_tokens += static_cast<double>(g.token_count());
  }
  std::vector<double> w;
  for (const auto& g : groups) {
    const bool skip = is_skipped(g, config);
    const double group_size = static_cast<double>(g.size());
    for (const auto& h : g.hypotheses) {
      double wt = 0.0;
      if (!skip) {
        switch (config.loss_normalization) {
          case LossNormalization::kPerSample:
            wt = 1.0 / (active * group_size * static_cast<double>(h.size()));
            break;
          case LossNormalization::kPerTokenBatch:
            wt = 1.0 / active_tokens;
            break;
          case LossNormalization::kUnnormalizedSum:
            wt = 1.0 / (active * group_size * static_cast<double>(config.max_generation_length));
            break;
        }
      }
      w.insert(w.end(), h.size(), wt);
    }
  }
  return w;
}

template <typename S>
LossResult<S> grpo_loss(std::span<const RolloutGroup> groups, const Tensor<S>& logp_cur, const RLConfig& config) {
  using Array = typename Tensor<S>::Array;
  Index total = 0;
  for (const auto& g : groups) {
    require(g.advantages.size() == g.size(), "grpo_loss: group is missing advantages");
    require(g.logp_old.empty() || g.logp_old.size() == g.size(), "grpo_loss: logp_old does not match group");
    require(config.beta == 0.0 || g.logp_ref.size() == g.size(), "grpo_loss: logp_ref missing with beta > 0");
    for (std::size_t i = 0; i < g.size(); ++i) {
      require(!g.hypotheses[i].empty(), "grpo_loss: empty hypothesis");
      if (!g.logp_old.empty()) require(g.logp_old[i].size() == g.hypotheses[i].size(), "grpo_loss: logp_old length");
      if (!g.logp_ref.empty()) require(g.logp_ref[i].size() == g.hypotheses[i].size(), "grpo_loss: logp_ref length");
    }
    total += g.token_count();
  }
  if (logp_cur.size() != total) {
    throw DimensionError("grpo_loss: logp_cur has " + std::to_string(logp_cur.size()) + " entries for " +
                         std::to_string(total) + " hypothesis tokens");
  }

  const std::vector<double> weights = token_weights(groups, config);
  Array old(total), adv(total), ref(total), w(total);
  const Array& cur = logp_cur.data();
  LossResult<S> result;
  Index t = 0;
  double abs_adv = 0.0, hyps = 0.0, kl_sum = 0.0, clipped = 0.0;
  for (const auto& g : groups) {
    const bool skip = is_skipped(g, config);
    if (skip) {
      ++result.stats.skipped_groups;
    } else {
      ++result.stats.active_groups;
    }
    for (std::size_t i = 0; i < g.size(); ++i) {
      if (!skip) {
        abs_adv += std::abs(g.advantages[i]);
        hyps += 1.0;
      }
      for (std::size_t j = 0; j < g.hypotheses[i].size(); ++j, ++t) {
        old(t) = g.logp_old.empty() ? cur(t) : static_cast<S>(g.logp_old[i][j]);
        ref(t) = g.logp_ref.empty() ? cur(t) : static_cast<S>(g.logp_ref[i][j]);
        adv(t) = static_cast<S>(g.advantages[i]);
        w(t) = static_cast<S>(weights[t]);
        if (skip) continue;
        ++result.stats.active_tokens;
        kl_sum += kl_divergence_value(static_cast<double>(ref(t)), static_cast<double>(cur(t)));
        const double rho = std::exp(static_cast<double>(cur(t)) - static_cast<double>(old(t)));
        if ((g.advantages[i] > 0 && rho > 1.0 + config.eps_high) ||
            (g.advantages[i] < 0 && rho < 1.0 - config.eps_low)) {
          clipped += 1.0;
        }
      }
    }
  }
  if (result.stats.active_tokens > 0) {
    result.stats.kl_mean = kl_sum / static_cast<double>(result.stats.active_tokens);
    result.stats.clip_fraction = clipped / static_cast<double>(result.stats.active_tokens);
    result.stats.mean_abs_advantage = abs_adv / hyps;
  }
  if (result.stats.active_groups == 0) {
    result.skipped = true;
    result.loss = Tensor<S>::scalar(S(0));
    return result;
  }

  const Shape shape{total};
  const Tensor<S> old_t = Tensor<S>::from_data(shape, std::move(old));
  const Tensor<S> adv_t = Tensor<S>::from_data(shape, std::move(adv));
  const Tensor<S> w_t = Tensor<S>::from_data(shape, std::move(w));
  const Tensor<S> ratio = exp(sub(logp_cur, old_t));
  const Tensor<S> unclipped = mul(ratio, adv_t);
  const Tensor<S> clipped_term =
      mul(clamp(ratio, S(1.0 - config.eps_low), S(1.0 + config.eps_high)), adv_t);
  Tensor<S> objective = minimum(unclipped, clipped_term);
  if (config.beta > 0.0) {
    const Tensor<S> ref_t = Tensor<S>::from_data(shape, std::move(ref));
    objective = sub(objective, scale(kl_divergence_term(ref_t, logp_cur), S(config.beta)));
  }
  result.loss = neg(sum(mul(objective, w_t)));
  return result;
}

std::vector<SequenceRef> pack_sequences(std::span<const RolloutGroup> groups,
                                        std::span<const Prompt* const> prompts) {
  std::vector<SequenceRef> seqs;
  for (const auto& g : groups) {
    require(g.prompt_index < prompts.size(), "pack_sequences: prompt index out of range");
    for (const auto& h : g.hypotheses) seqs.push_back({prompts[g.prompt_index], h});
  }
  return seqs;
}

namespace {

// Splits packed per-token values back into per-hypothesis vectors.
template <typename S>
void unpack(const Tensor<S>& packed, std::vector<RolloutGroup>& groups,
            std::vector<std::vector<double>> RolloutGroup::*field) {
  Index t = 0;
  for (auto& g : groups) {
    auto& dst = g.*field;
    dst.assign(g.size(), {});
    for (std::size_t i = 0; i < g.size(); ++i) {
      for (std::size_t j = 0; j < g.hypotheses[i].size(); ++j) dst[i].push_back(packed.data()(t++));
    }
  }
}

}  // namespace

template <typename S>
std::vector<RolloutGroup> build_rollout_groups(const PolicyModel<S>& sampler, const PolicyModel<S>& reference_model,
                                               bool old_is_current, std::span<const RolloutRequest> requests,
                                               const RLConfig& config, const RewardSpec& reward_spec,
                                               const DecodeSettings& decode, int workers) {
  require(config.group_size >= 2, "build_rollout_groups: G must be at least 2");
  std::vector<RolloutGroup> groups(requests.size());
  detail::parallel_for(requests.size(), workers, [&](std::size_t r) {
    const RolloutRequest& req = requests[r];
    RolloutGroup& g = groups[r];
    g.prompt_index = r;
    std::vector<Hypothesis> hyps;
    if (decode.mode == DecodeSettings::Mode::kBeam) {
      hyps = beam_search(sampler, *req.prompt, config.group_size, decode.max_len);
      if (static_cast<int>(hyps.size()) < config.group_size) {
        std::cerr << "warning: beam search produced " << hyps.size() << " < G=" << config.group_size
                  << " distinct hypotheses\n";
      }
    } else {
      const double temperature = decode.mode == DecodeSettings::Mode::kGreedy ? 0.0 : decode.temperature;
      const IncrementalDecoder<S> prefix(sampler, *req.prompt, decode.max_len);
      std::mt19937_64 rng(req.seed);
      for (int i = 0; i < config.group_size; ++i) {
        hyps.push_back(sample_continuation(prefix, decode.max_len, temperature, rng));
      }
    }
    for (auto& h : hyps) {
      g.rewards.push_back(reward(reward_spec, req.reference, h.tokens));
      g.hypotheses.push_back(std::move(h.tokens));
      g.logp_sample.push_back(std::move(h.log_probs));
    }
    if (g.size() >= 2) {
      AdvantageResult a = advantages(g.rewards, config.normalize_by_std);
      g.advantages = std::move(a.values);
      g.degenerate = a.degenerate;
    } else {
      g.advantages.assign(g.size(), 0.0);
      g.degenerate = true;
    }
  });

  std::vector<const Prompt*> prompts;
  for (const auto& req : requests) prompts.push_back(req.prompt);
  const std::vector<SequenceRef> seqs = pack_sequences(groups, prompts);
  if (seqs.empty()) return groups;
  NoGradGuard no_grad;
  unpack(reference_model.completion_log_probs(seqs), groups, &RolloutGroup::logp_ref);
  if (!old_is_current) unpack(sampler.completion_log_probs(seqs), groups, &RolloutGroup::logp_old);
  return groups;
}

template <typename S>
RolloutGroup build_rollout_group(const PolicyModel<S>& sampler, const PolicyModel<S>& reference_model,
                                 bool old_is_current, const RolloutRequest& request, const RLConfig& config,
                                 const RewardSpec& reward_spec, const DecodeSettings& decode) {
  std::vector<RolloutGroup> groups = build_rollout_groups(
      sampler, reference_model, old_is_current, std::span<const RolloutRequest>(&request, 1), config, reward_spec,
      decode, 1);
  return std::move(groups.front());
}

#define GASR_INSTANTIATE_RL(S)                                                                                     \
  template Tensor<S> kl_divergence_term<S>(const Tensor<S>&, const Tensor<S>&);                                    \
  template LossResult<S> grpo_loss<S>(std::span<const RolloutGroup>, const Tensor<S>&, const RLConfig&);           \
  template std::vector<RolloutGroup> build_rollout_groups<S>(const PolicyModel<S>&, const PolicyModel<S>&, bool,   \
                                                             std::span<const RolloutRequest>, const RLConfig&,     \
                                                             const RewardSpec&, const DecodeSettings&, int);       \
  template RolloutGroup build_rollout_group<S>(const PolicyModel<S>&, const PolicyModel<S>&, bool,                 \
                                               const RolloutRequest&, const RLConfig&, const RewardSpec&,          \
                                               const DecodeSettings&);

GASR_INSTANTIATE_RL(float)
GASR_INSTANTIATE_RL(double)
#undef GASR_INSTANTIATE_RL

}  // namespace gasr
