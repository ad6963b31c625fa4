#pragma once

// Rule-based sequence rewards computed against the reference transcript.

#include <span>
#include <string>

namespace gasr {

enum class RewardKind { kWer, kExactMatch, kEditDistance };

struct RewardSpec {
  RewardKind kind = RewardKind::kWer;
  double scale = 1.0;  // multiplicative, must be > 0
};

RewardKind parse_reward_kind(const std::string& text);  // "wer" | "em" | "ed"
std::string to_string(RewardKind kind);

// Scores `hyp` (a trailing <EOS> is stripped) against `ref`:
//   WER: -c (Sub+Del+Ins)/N     EM: c [ref == hyp]     ED: -c (Sub+Del+Ins)
double reward(const RewardSpec& spec, std::span<const int> ref, std::span<const int> hyp);

}  // namespace gasr
