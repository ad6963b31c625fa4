#include "gasr/rewards.hpp"

#include <algorithm>

#include "gasr/align.hpp"
#include "gasr/errors.hpp"
#include "gasr/model.hpp"

namespace gasr {

RewardKind parse_reward_kind(const std::string& text) {
  if (text == "wer") return RewardKind::kWer;
  if (text == "em") return RewardKind::kExactMatch;
  if (text == "ed") return RewardKind::kEditDistance;
  throw ContractError("unknown reward kind '" + text + "' (expected wer|em|ed)");
}

std::string to_string(RewardKind kind) {
  switch (kind) {
    case RewardKind::kWer: return "wer";
    case RewardKind::kExactMatch: return "em";
    case RewardKind::kEditDistance: return "ed";
  }
  return "?";
}

double reward(const RewardSpec& spec, std::span<const int> ref, std::span<const int> hyp) {
  require(spec.scale > 0.0, "reward: scale must be positive");
  const std::vector<int> words = strip_eos(hyp);
  switch (spec.kind) {
    case RewardKind::kExactMatch:
      return std::equal(ref.begin(), ref.end(), words.begin(), words.end()) ? spec.scale : 0.0;
    case RewardKind::kWer: {
      const AlignmentStats stats = align(ref, words);
      return stats.errors() == 0 ? 0.0 : -spec.scale * wer(stats);
    }
    case RewardKind::kEditDistance: {
      const long errors = align(ref, words).errors();
      return errors == 0 ? 0.0 : -spec.scale * static_cast<double>(errors);
    }
  }
  return 0.0;
}

}  // namespace gasr
