#pragma once

// Two-stage training: supervised fine-tuning, then group-relative RL from the
// SFT checkpoint. Both stages share one Adam implementation.
//
// A run directory holds
//   metrics.jsonl          one JSON record per step ("event": "train") plus
//                          dev evaluations ("event": "eval"), flushed per line
//   last.{manifest,bin}    latest checkpoint (parameters, Adam moments, metadata)
//   best.{manifest,bin}    checkpoint with the lowest dev WER so far

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "gasr/checkpoint.hpp"
#include "gasr/data.hpp"
#include "gasr/decode.hpp"
#include "gasr/model.hpp"
#include "gasr/rewards.hpp"
#include "gasr/rl.hpp"

namespace gasr {

struct LrSchedule {
  enum class Kind { kConstant, kCosine };

  Kind kind = Kind::kConstant;
  double peak = 1e-3;
  int warmup_steps = 0;
  int total_steps = 1;

  static LrSchedule constant(double lr);
  static LrSchedule cosine(double peak, int total_steps, int warmup_steps);

  // Learning rate used by update number `step` (1-based). Cosine: linear ramp
  // to `peak` at step == warmup_steps, then half-cosine down to 0 at total_steps.
  double at(int step) const;
  void validate() const;
};

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double clip_norm = 1.0;  // global gradient-norm clip; <= 0 disables
};

template <typename Scalar>
class Adam {
 public:
  Adam(std::vector<Tensor<Scalar>> parameters, AdamConfig config);

  // Applies one update from the accumulated gradients and returns the global
  // gradient norm before clipping. Parameters without gradient count as zero.
  double step(double lr);
  long steps_taken() const { return t_; }

  void store(Checkpoint& checkpoint, const std::vector<std::string>& names) const;
  void load(const Checkpoint& checkpoint, const std::vector<std::string>& names);

 private:
  using Array = typename Tensor<Scalar>::Array;
  std::vector<Tensor<Scalar>> params_;
  AdamConfig config_;
  std::vector<Array> m_, v_;
  long t_ = 0;
};

enum class Stage { kSft, kGrpo };
Stage parse_stage(const std::string& text);
std::string to_string(Stage stage);

struct TrainConfig {
  Stage stage = Stage::kSft;
  LrSchedule schedule = LrSchedule::cosine(3e-3, 3000, 100);
  AdamConfig adam;
  int batch_size = 32;
  int max_steps = 3000;  // planned length; a cosine schedule spans exactly this many steps
  int eval_every = 250;
  std::uint64_t seed = 1;
  ModelConfig model;  // sft only; grpo takes the init checkpoint's config
  RLConfig rl;
  RewardSpec reward;
  int policy_updates = 1;  // updates per rollout batch; the snapshot is refreshed per batch
  DecodeSettings rollout{DecodeSettings::Mode::kSample, 1.0, 4, 16};
  DecodeSettings eval_decode{DecodeSettings::Mode::kGreedy, 1.0, 4, 16};
  int workers = 1;

  static TrainConfig sft_defaults();
  static TrainConfig grpo_defaults();

  void validate() const;
  // Every field that shapes the trajectory, as ordered key=value lines.
  // `workers` is excluded: results do not depend on it.
  std::vector<std::pair<std::string, std::string>> fields() const;
  std::uint64_t digest() const;
};

struct SftMetrics {
  double loss = 0.0;
  double grad_norm = 0.0;
  Index tokens = 0;
};

struct GrpoMetrics {
  double loss = 0.0;
  double mean_reward = 0.0;
  double mean_abs_advantage = 0.0;
  double kl_mean = 0.0;
  double clip_fraction = 0.0;
  Index degenerate_groups = 0;
  Index skipped_groups = 0;
  double grad_norm = 0.0;
  bool skipped = false;
};

// Mean cross-entropy over transcript + <EOS> positions of the batch.
template <typename Scalar>
Tensor<Scalar> sft_loss(const PolicyModel<Scalar>& model, std::span<const Utterance* const> batch);

template <typename Scalar>
SftMetrics sft_step(PolicyModel<Scalar>& model, std::span<const Utterance* const> batch, Adam<Scalar>& optimizer,
                    double lr);

// One rollout batch followed by `config.policy_updates` updates. The policy
// itself is the sampling snapshot, so the first update sees ratio 1.
template <typename Scalar>
GrpoMetrics grpo_step(PolicyModel<Scalar>& policy, const PolicyModel<Scalar>& reference,
                      std::span<const Utterance* const> batch, Adam<Scalar>& optimizer, double lr,
                      const TrainConfig& config, std::uint64_t step_seed);

// Training batch for update `step`: `batch_size` draws with replacement,
// a pure function of (seed, step).
std::vector<const Utterance*> sample_batch(const Corpus& corpus, int batch_size, std::uint64_t seed, int step);

struct RunOptions {
  std::string out_dir;
  std::optional<std::string> init_checkpoint;  // required for grpo, optional warm start for sft
  bool resume = false;                         // continue from out_dir/last if present
  std::optional<int> stop_after;               // interrupt after this step (run stays resumable)
  std::function<void(const std::string&)> log;  // progress lines; may be empty
};

struct RunResult {
  int last_step = 0;
  double best_dev_wer = 0.0;
  int best_step = 0;
  std::vector<double> dev_wer;  // every logged dev evaluation, in order
};

RunResult run_training(const TrainConfig& config, const Corpus& train, const Corpus& dev, const RunOptions& options);

// Reference parameters of a GRPO checkpoint live under this prefix.
inline constexpr const char* kReferencePrefix = "ref.";

}  // namespace gasr
