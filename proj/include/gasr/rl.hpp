#pragma once

// Group-relative policy optimization: advantage estimation over rollout
// groups and the clipped-surrogate loss with a KL penalty towards a frozen
// reference policy, plus the DAPO and Dr. GRPO variants.

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "gasr/decode.hpp"
#include "gasr/model.hpp"
#include "gasr/rewards.hpp"
#include "gasr/tensor.hpp"

namespace gasr {

enum class Algorithm { kGrpo, kDapo, kDrGrpo };
enum class LossNormalization { kPerSample, kPerTokenBatch, kUnnormalizedSum };
enum class DegeneratePolicy { kZeroAdvantage, kSkipGroup };

Algorithm parse_algorithm(const std::string& text);  // grpo | dapo | drgrpo
std::string to_string(Algorithm algorithm);
LossNormalization parse_loss_normalization(const std::string& text);
std::string to_string(LossNormalization normalization);
DegeneratePolicy parse_degenerate_policy(const std::string& text);
std::string to_string(DegeneratePolicy policy);

struct RLConfig {
  Algorithm algorithm = Algorithm::kGrpo;
  double eps_low = 0.2;
  double eps_high = 0.2;
  double beta = 0.04;
  int group_size = 6;
  bool normalize_by_std = true;
  LossNormalization loss_normalization = LossNormalization::kPerSample;
  DegeneratePolicy degenerate_policy = DegeneratePolicy::kZeroAdvantage;
  int max_generation_length = 16;  // the fixed length constant of unnormalized_sum

  // GRPO: std-normalized advantages, per-sample length normalization.
  // DAPO: beta = 0, eps_high = 0.28, token-level normalization, degenerate groups skipped.
  // Dr. GRPO: mean-centred advantages, sum normalized by a fixed constant.
  static RLConfig preset(Algorithm algorithm);

  // Throws ContractError on an inconsistent configuration.
  void validate() const;
};

struct AdvantageResult {
  std::vector<double> values;
  bool degenerate = false;  // all rewards equal
};

// A_i = (R_i - mean) / sigma (population sigma) or R_i - mean. Degenerate
// groups get all-zero advantages.
AdvantageResult advantages(std::span<const double> rewards, bool normalize_by_std);

// Per-token r - log r - 1 with r = pi_ref / pi_theta, differentiable through
// `logp_cur` only.
template <typename Scalar>
Tensor<Scalar> kl_divergence_term(const Tensor<Scalar>& logp_ref, const Tensor<Scalar>& logp_cur);
double kl_divergence_value(double logp_ref, double logp_cur);

struct RolloutGroup {
  std::size_t prompt_index = 0;
  std::vector<std::vector<int>> hypotheses;    // completions o_1..o_G
  std::vector<std::vector<double>> logp_sample;  // recorded while decoding
  // Per-token log-probs under the sampling snapshot. Empty means the snapshot
  // is the current policy itself, so the loss uses the detached current values.
  std::vector<std::vector<double>> logp_old;
  std::vector<std::vector<double>> logp_ref;
  std::vector<double> rewards;
  std::vector<double> advantages;  // one per hypothesis, broadcast over its tokens
  bool degenerate = false;

  std::size_t size() const { return hypotheses.size(); }
  Index token_count() const;
};

struct LossStats {
  double kl_mean = 0.0;
  double clip_fraction = 0.0;
  double mean_abs_advantage = 0.0;
  Index active_groups = 0;
  Index skipped_groups = 0;
  Index active_tokens = 0;
};

template <typename Scalar>
struct LossResult {
  Tensor<Scalar> loss;  // scalar, to minimize
  bool skipped = false;  // every group was skipped: zero loss, no gradient
  LossStats stats;
};

// Negated clipped-surrogate objective. `logp_cur` packs the current policy's
// per-token log-probs for every hypothesis of every group, group-major.
template <typename Scalar>
LossResult<Scalar> grpo_loss(std::span<const RolloutGroup> groups, const Tensor<Scalar>& logp_cur,
                             const RLConfig& config);

// Per-token aggregation weights the loss applies, same packing as logp_cur.
std::vector<double> token_weights(std::span<const RolloutGroup> groups, const RLConfig& config);

struct RolloutRequest {
  const Prompt* prompt = nullptr;
  std::span<const int> reference;
  std::uint64_t seed = 0;
};

// Draws G hypotheses per request from `sampler` (the pi_theta_old snapshot),
// scores them under `reference_model` and, unless `old_is_current`, under
// `sampler`, then fills rewards and advantages. Generation fans out over
// `workers` threads; results do not depend on the worker count.
template <typename Scalar>
std::vector<RolloutGroup> build_rollout_groups(const PolicyModel<Scalar>& sampler,
                                               const PolicyModel<Scalar>& reference_model, bool old_is_current,
                                               std::span<const RolloutRequest> requests, const RLConfig& config,
                                               const RewardSpec& reward_spec, const DecodeSettings& decode,
                                               int workers = 1);

template <typename Scalar>
RolloutGroup build_rollout_group(const PolicyModel<Scalar>& sampler, const PolicyModel<Scalar>& reference_model,
                                 bool old_is_current, const RolloutRequest& request, const RLConfig& config,
                                 const RewardSpec& reward_spec, const DecodeSettings& decode);

// Packs every hypothesis of every group as SequenceRefs, group-major.
std::vector<SequenceRef> pack_sequences(std::span<const RolloutGroup> groups, std::span<const Prompt* const> prompts);

}  // namespace gasr
