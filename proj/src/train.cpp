#include "gasr/train.hpp"

#include <cinttypes>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <limits>
#include <numbers>
#include <random>

#include <json.hpp>

#include "gasr/checksum.hpp"
#include "gasr/eval.hpp"

namespace gasr {

namespace fs = std::filesystem;
using ordered_json = nlohmann::ordered_json;

namespace {

std::string real(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

std::string hex(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016" PRIx64, v);
  return buf;
}

// Batch draws and rollout seeds for one step come from disjoint derived streams.
std::uint64_t batch_seed(std::uint64_t seed, int step) { return derive_seed(seed, 2 * static_cast<std::uint64_t>(step)); }
std::uint64_t rollout_seed(std::uint64_t seed, int step) {
  return derive_seed(seed, 2 * static_cast<std::uint64_t>(step) + 1);
}

}  // namespace

// ---------------------------------------------------------------- schedule

LrSchedule LrSchedule::constant(double lr) { return LrSchedule{Kind::kConstant, lr, 0, 1}; }

LrSchedule LrSchedule::cosine(double peak, int total_steps, int warmup_steps) {
  return LrSchedule{Kind::kCosine, peak, warmup_steps, total_steps};
}

double LrSchedule::at(int step) const {
  if (kind == Kind::kConstant) return peak;
  if (step <= warmup_steps) return peak * static_cast<double>(step) / static_cast<double>(warmup_steps);
  if (step >= total_steps) return 0.0;
  const double progress = static_cast<double>(step - warmup_steps) / static_cast<double>(total_steps - warmup_steps);
  return 0.5 * peak * (1.0 + std::cos(std::numbers::pi * progress));
}

void LrSchedule::validate() const {
  require(peak > 0.0, "schedule: learning rate must be positive");
  if (kind == Kind::kCosine) {
    require(warmup_steps >= 0 && warmup_steps < total_steps, "schedule: warmup_steps must be < total_steps");
  }
}

// ---------------------------------------------------------------- Adam

template <typename S>
Adam<S>::Adam(std::vector<Tensor<S>> parameters, AdamConfig config) : params_(std::move(parameters)), config_(config) {
  for (const auto& p : params_) {
    m_.push_back(Array::Zero(p.size()));
    v_.push_back(Array::Zero(p.size()));
  }
}

template <typename S>
double Adam<S>::step(double lr) {
  double sq = 0.0;
  for (const auto& p : params_) {
    if (p.has_grad()) sq += p.node()->grad.template cast<double>().square().sum();
  }
  const double norm = std::sqrt(sq);
  const double clip = (config_.clip_norm > 0.0 && norm > config_.clip_norm) ? config_.clip_norm / norm : 1.0;
  ++t_;
  const S b1 = static_cast<S>(config_.beta1);
  const S b2 = static_cast<S>(config_.beta2);
  const S correction1 = static_cast<S>(1.0 - std::pow(config_.beta1, static_cast<double>(t_)));
  const S correction2 = static_cast<S>(1.0 - std::pow(config_.beta2, static_cast<double>(t_)));
  const S step_size = static_cast<S>(lr);
  const S eps = static_cast<S>(config_.eps);
  for (std::size_t i = 0; i < params_.size(); ++i) {
    auto* node = params_[i].node();
    if (node->grad.size() == 0) {
      m_[i] *= b1;
      v_[i] *= b2;
    } else {
      const Array g = node->grad * static_cast<S>(clip);
      m_[i] = b1 * m_[i] + (S(1) - b1) * g;
      v_[i] = b2 * v_[i] + (S(1) - b2) * g.square();
    }
    node->data -= step_size * (m_[i] / correction1) / ((v_[i] / correction2).sqrt() + eps);
  }
  return norm;
}

template <typename S>
void Adam<S>::store(Checkpoint& ck, const std::vector<std::string>& names) const {
  require(names.size() == params_.size(), "adam: name count does not match parameter count");
  ck.set_meta("adam.t", std::to_string(t_));
  for (const char* kind : {"m", "v"}) {
    const auto& moments = kind[0] == 'm' ? m_ : v_;
    for (std::size_t i = 0; i < params_.size(); ++i) {
      CheckpointTensor t;
      t.name = std::string("adam.") + kind + "." + names[i];
      t.shape = params_[i].shape();
      t.values.assign(moments[i].data(), moments[i].data() + moments[i].size());
      ck.add_tensor(std::move(t));
    }
  }
}

template <typename S>
void Adam<S>::load(const Checkpoint& ck, const std::vector<std::string>& names) {
  require(names.size() == params_.size(), "adam: name count does not match parameter count");
  t_ = std::stol(ck.require_meta("adam.t"));
  for (const char* kind : {"m", "v"}) {
    auto& moments = kind[0] == 'm' ? m_ : v_;
    for (std::size_t i = 0; i < params_.size(); ++i) {
      const auto& t = ck.tensor(std::string("adam.") + kind + "." + names[i]);
      require(t.shape == params_[i].shape(), "adam: moment shape mismatch for '" + names[i] + "'");
      for (Index j = 0; j < moments[i].size(); ++j) moments[i](j) = static_cast<S>(t.values[j]);
    }
  }
}

// ---------------------------------------------------------------- config

Stage parse_stage(const std::string& text) {
  if (text == "sft") return Stage::kSft;
  if (text == "grpo") return Stage::kGrpo;
  throw ContractError("unknown stage '" + text + "' (expected sft|grpo)");
}

std::string to_string(Stage stage) { return stage == Stage::kGrpo ? "grpo" : "sft"; }

TrainConfig TrainConfig::sft_defaults() { return TrainConfig{}; }

TrainConfig TrainConfig::grpo_defaults() {
  TrainConfig c;
  c.stage = Stage::kGrpo;
  c.schedule = LrSchedule::constant(3e-4);
  c.batch_size = 16;
  c.max_steps = 1000;
  c.eval_every = 100;
  c.rl = RLConfig::preset(Algorithm::kGrpo);
  c.rl.group_size = 6;
  c.rl.max_generation_length = c.rollout.max_len;
  return c;
}

void TrainConfig::validate() const {
  schedule.validate();
  require(batch_size >= 1, "train: batch_size must be at least 1");
  require(max_steps >= 1, "train: max_steps must be at least 1");
  require(eval_every >= 1, "train: eval_every must be at least 1");
  require(policy_updates >= 1, "train: policy_updates must be at least 1");
  require(workers >= 1, "train: workers must be at least 1");
  if (schedule.kind == LrSchedule::Kind::kCosine) {
    require(schedule.total_steps == max_steps, "train: cosine schedule must span max_steps");
  }
  require(eval_decode.max_len >= 1 && rollout.max_len >= 1, "train: max_len must be at least 1");
  if (stage == Stage::kGrpo) {
    rl.validate();
    require(reward.scale > 0.0, "train: reward scale must be positive");
    require(rl.max_generation_length == rollout.max_len,
            "train: rl max_generation_length must equal the rollout max_len");
  }
}

std::vector<std::pair<std::string, std::string>> TrainConfig::fields() const {
  std::vector<std::pair<std::string, std::string>> f;
  f.emplace_back("stage", to_string(stage));
  f.emplace_back("seed", std::to_string(seed));
  f.emplace_back("max_steps", std::to_string(max_steps));
  f.emplace_back("batch_size", std::to_string(batch_size));
  f.emplace_back("eval_every", std::to_string(eval_every));
  f.emplace_back("lr_schedule", schedule.kind == LrSchedule::Kind::kCosine ? "cosine" : "constant");
  f.emplace_back("lr", real(schedule.peak));
  f.emplace_back("warmup_steps", std::to_string(schedule.warmup_steps));
  f.emplace_back("adam_beta1", real(adam.beta1));
  f.emplace_back("adam_beta2", real(adam.beta2));
  f.emplace_back("adam_eps", real(adam.eps));
  f.emplace_back("clip_norm", real(adam.clip_norm));
  f.emplace_back("eval_decode", to_string(eval_decode.mode));
  f.emplace_back("eval_beam_size", std::to_string(eval_decode.beam_size));
  f.emplace_back("eval_max_len", std::to_string(eval_decode.max_len));
  if (stage == Stage::kSft) {
    f.emplace_back("model_hidden", std::to_string(model.hidden));
    f.emplace_back("model_layers", std::to_string(model.layers));
    f.emplace_back("model_heads", std::to_string(model.heads));
    f.emplace_back("model_ffn", std::to_string(model.ffn));
    f.emplace_back("model_max_positions", std::to_string(model.max_positions));
  } else {
    f.emplace_back("algo", to_string(rl.algorithm));
    f.emplace_back("reward", to_string(reward.kind));
    f.emplace_back("reward_scale", real(reward.scale));
    f.emplace_back("beta", real(rl.beta));
    f.emplace_back("eps_low", real(rl.eps_low));
    f.emplace_back("eps_high", real(rl.eps_high));
    f.emplace_back("num_generations", std::to_string(rl.group_size));
    f.emplace_back("normalize_std", rl.normalize_by_std ? "true" : "false");
    f.emplace_back("loss_norm", to_string(rl.loss_normalization));
    f.emplace_back("degenerate", to_string(rl.degenerate_policy));
    f.emplace_back("policy_updates", std::to_string(policy_updates));
    f.emplace_back("decode", to_string(rollout.mode));
    f.emplace_back("temperature", real(rollout.temperature));
    f.emplace_back("max_len", std::to_string(rollout.max_len));
  }
  return f;
}

std::uint64_t TrainConfig::digest() const {
  Fnv1a h;
  for (const auto& [k, v] : fields()) {
    h.update(k);
    h.update("=");
    h.update(v);
    h.update("\n");
  }
  return h.digest();
}

// ---------------------------------------------------------------- steps

std::vector<const Utterance*> sample_batch(const Corpus& corpus, int batch_size, std::uint64_t seed, int step) {
  require(corpus.size() > 0, "sample_batch: corpus is empty");
  std::mt19937_64 rng(batch_seed(seed, step));
  std::uniform_int_distribution<std::size_t> pick(0, corpus.size() - 1);
  std::vector<const Utterance*> batch;
  batch.reserve(batch_size);
  for (int i = 0; i < batch_size; ++i) batch.push_back(&corpus.utterances[pick(rng)]);
  return batch;
}

template <typename S>
Tensor<S> sft_loss(const PolicyModel<S>& model, std::span<const Utterance* const> batch) {
  require(!batch.empty(), "sft: empty batch");
  std::vector<std::vector<int>> targets;
  targets.reserve(batch.size());
  for (const auto* u : batch) targets.push_back(with_eos(u->transcript));
  std::vector<SequenceRef> seqs;
  for (std::size_t i = 0; i < batch.size(); ++i) seqs.push_back({&batch[i]->prompt, targets[i]});
  const Tensor<S> logp = model.completion_log_probs(seqs);
  require(logp.size() > 0, "sft: batch has no target tokens");
  return neg(mean(logp));
}

template <typename S>
SftMetrics sft_step(PolicyModel<S>& model, std::span<const Utterance* const> batch, Adam<S>& optimizer, double lr) {
  model.zero_grad();
  const Tensor<S> loss = sft_loss(model, batch);
  backward(loss);
  SftMetrics m;
  m.loss = static_cast<double>(loss.item());
  for (const auto* u : batch) m.tokens += static_cast<Index>(u->transcript.size()) + 1;
  m.grad_norm = optimizer.step(lr);
  return m;
}

template <typename S>
GrpoMetrics grpo_step(PolicyModel<S>& policy, const PolicyModel<S>& reference, std::span<const Utterance* const> batch,
                      Adam<S>& optimizer, double lr, const TrainConfig& config, std::uint64_t step_seed) {
  std::vector<RolloutRequest> requests;
  std::vector<const Prompt*> prompts;
  for (std::size_t i = 0; i < batch.size(); ++i) {
    requests.push_back({&batch[i]->prompt, batch[i]->transcript, derive_seed(step_seed, i)});
    prompts.push_back(&batch[i]->prompt);
  }
  const bool old_is_current = config.policy_updates == 1;
  const std::vector<RolloutGroup> groups = build_rollout_groups(
      policy, reference, old_is_current, requests, config.rl, config.reward, config.rollout, config.workers);
  const std::vector<SequenceRef> seqs = pack_sequences(groups, prompts);

  GrpoMetrics m;
  double reward_sum = 0.0, count = 0.0;
  for (const auto& g : groups) {
    if (g.degenerate) ++m.degenerate_groups;
    for (double r : g.rewards) {
      reward_sum += r;
      count += 1.0;
    }
  }
  m.mean_reward = count > 0.0 ? reward_sum / count : 0.0;

  double updates = 0.0;
  for (int u = 0; u < config.policy_updates; ++u) {
    policy.zero_grad();
    const Tensor<S> logp = policy.completion_log_probs(seqs);
    const LossResult<S> result = grpo_loss<S>(groups, logp, config.rl);
    m.skipped_groups = result.stats.skipped_groups;
    if (result.skipped) {
      m.skipped = true;
      break;
    }
    backward(result.loss);
    m.loss += static_cast<double>(result.loss.item());
    m.mean_abs_advantage += result.stats.mean_abs_advantage;
    m.kl_mean += result.stats.kl_mean;
    m.clip_fraction += result.stats.clip_fraction;
    m.grad_norm += optimizer.step(lr);
    updates += 1.0;
  }
  if (updates > 0.0) {
    m.loss /= updates;
    m.mean_abs_advantage /= updates;
    m.kl_mean /= updates;
    m.clip_fraction /= updates;
    m.grad_norm /= updates;
  }
  return m;
}

// ---------------------------------------------------------------- run

namespace {

struct RunState {
  int step = 0;
  double best_dev_wer = std::numeric_limits<double>::infinity();
  int best_step = 0;
  std::optional<double> last_dev_wer;
};

std::vector<std::string> parameter_names(const PolicyModel<float>& model) {
  std::vector<std::string> names;
  for (const auto& p : model.parameters()) names.push_back(p.name);
  return names;
}

std::vector<Tensor<float>> parameter_tensors(PolicyModel<float>& model) {
  std::vector<Tensor<float>> out;
  for (auto& p : model.parameters()) out.push_back(p.value);
  return out;
}

Checkpoint make_checkpoint(const TrainConfig& config, const RunState& state, const PolicyModel<float>& policy,
                           const PolicyModel<float>* reference, const Adam<float>& optimizer) {
  Checkpoint ck;
  ck.set_meta("stage", to_string(config.stage));
  ck.set_meta("step", std::to_string(state.step));
  ck.set_meta("seed", std::to_string(config.seed));
  ck.set_meta("config_digest", hex(config.digest()));
  ck.set_meta("dev_wer", state.last_dev_wer ? real(*state.last_dev_wer) : "none");
  ck.set_meta("best_dev_wer", real(state.best_dev_wer));
  ck.set_meta("best_step", std::to_string(state.best_step));
  store_model_config(ck, policy.config());
  store_parameters(ck, policy);
  if (reference) store_parameters(ck, *reference, kReferencePrefix);
  optimizer.store(ck, parameter_names(policy));
  return ck;
}

void check_corpus(const Corpus& corpus, const ModelConfig& model, const char* what) {
  require(corpus.size() > 0, std::string(what) + " corpus is empty");
  require(corpus.vocab_size == model.vocab_size && corpus.frame_dim == model.frame_dim,
          std::string(what) + " corpus vocab/frame_dim does not match the model");
}

// Keeps the records a resumed run would otherwise write again.
void truncate_metrics(const std::string& path, int step) {
  std::vector<std::string> kept;
  {
    std::ifstream in(path);
    std::string line;
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      const auto j = ordered_json::parse(line, nullptr, false);
      if (j.is_discarded() || !j.contains("step")) break;
      if (j["step"].get<int>() > step) break;
      kept.push_back(line);
    }
  }
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  for (const auto& l : kept) out << l << '\n';
}

}  // namespace

RunResult run_training(const TrainConfig& config, const Corpus& train, const Corpus& dev, const RunOptions& options) {
  config.validate();
  require(!options.out_dir.empty(), "train: output directory is required");
  fs::create_directories(options.out_dir);
  const std::string last_stem = (fs::path(options.out_dir) / "last").string();
  const std::string best_stem = (fs::path(options.out_dir) / "best").string();
  const std::string metrics_path = (fs::path(options.out_dir) / "metrics.jsonl").string();
  auto log = [&](const std::string& line) {
    if (options.log) options.log(line);
  };

  const bool grpo = config.stage == Stage::kGrpo;
  std::optional<Checkpoint> init;
  if (options.init_checkpoint) init = load_checkpoint(*options.init_checkpoint);
  require(!grpo || init.has_value(), "grpo: an initial (SFT) checkpoint is required");

  PolicyModel<float> policy = init ? model_from_checkpoint<float>(*init) : PolicyModel<float>(config.model, config.seed);
  check_corpus(train, policy.config(), "train");
  check_corpus(dev, policy.config(), "dev");
  std::optional<PolicyModel<float>> reference;
  if (grpo) reference.emplace(policy.clone());
  Adam<float> optimizer(parameter_tensors(policy), config.adam);

  RunState state;
  RunResult result;
  const bool resuming = options.resume && checkpoint_exists(last_stem);
  if (resuming) {
    const Checkpoint ck = load_checkpoint(last_stem);
    if (ck.require_meta("config_digest") != hex(config.digest())) {
      throw ContractError("resume: configuration differs from the one that wrote " + manifest_path(last_stem));
    }
    require(load_model_config(ck) == policy.config(), "resume: model configuration mismatch");
    load_parameters(policy, ck);
    if (reference) load_parameters(*reference, ck, kReferencePrefix);
    optimizer.load(ck, parameter_names(policy));
    state.step = std::stoi(ck.require_meta("step"));
    state.best_dev_wer = std::stod(ck.require_meta("best_dev_wer"));
    state.best_step = std::stoi(ck.require_meta("best_step"));
    const std::string dev_wer = ck.require_meta("dev_wer");
    if (dev_wer != "none") state.last_dev_wer = std::stod(dev_wer);
    truncate_metrics(metrics_path, state.step);
    std::ifstream in(metrics_path);
    std::string line;
    while (std::getline(in, line)) {
      const auto j = ordered_json::parse(line);
      if (j["event"] == "eval") result.dev_wer.push_back(j["dev_wer"].get<double>());
    }
    log("resumed " + to_string(config.stage) + " at step " + std::to_string(state.step));
  }

  std::ofstream metrics(metrics_path, std::ios::binary | (resuming ? std::ios::app : std::ios::trunc));
  if (!metrics) throw std::runtime_error("cannot open metrics log: " + metrics_path);

  auto save = [&](const std::string& stem) {
    save_checkpoint(stem, make_checkpoint(config, state, policy, reference ? &*reference : nullptr, optimizer));
  };
  auto evaluate_dev = [&]() {
    const EvalReport report = evaluate(policy, dev, config.eval_decode, config.workers, 0);
    const double wer = report.overall.wer();
    state.last_dev_wer = wer;
    const bool improved = wer < state.best_dev_wer;
    if (improved) {
      state.best_dev_wer = wer;
      state.best_step = state.step;
    }
    result.dev_wer.push_back(wer);
    ordered_json j;
    j["event"] = "eval";
    j["stage"] = to_string(config.stage);
    j["step"] = state.step;
    j["dev_wer"] = wer;
    j["dev_ins_rate"] = report.overall.ins_rate();
    j["dev_del_rate"] = report.overall.del_rate();
    j["dev_sub_rate"] = report.overall.sub_rate();
    j["best_dev_wer"] = state.best_dev_wer;
    j["best_step"] = state.best_step;
    metrics << j.dump() << '\n' << std::flush;
    if (improved) save(best_stem);
    log("step " + std::to_string(state.step) + " dev WER " + real(wer).substr(0, 6) +
        (improved ? " (best)" : ""));
  };

  if (!resuming) evaluate_dev();

  const int stop = std::min(config.max_steps, options.stop_after.value_or(config.max_steps));
  while (state.step < stop) {
    ++state.step;
    const double lr = config.schedule.at(state.step);
    const auto batch = sample_batch(train, config.batch_size, config.seed, state.step);
    ordered_json j;
    j["event"] = "train";
    j["stage"] = to_string(config.stage);
    j["step"] = state.step;
    j["lr"] = lr;
    if (grpo) {
      const GrpoMetrics m =
          grpo_step(policy, *reference, batch, optimizer, lr, config, rollout_seed(config.seed, state.step));
      j["loss"] = m.loss;
      j["mean_reward"] = m.mean_reward;
      j["mean_abs_advantage"] = m.mean_abs_advantage;
      j["kl_mean"] = m.kl_mean;
      j["clip_fraction"] = m.clip_fraction;
      j["degenerate_groups"] = m.degenerate_groups;
      j["skipped_groups"] = m.skipped_groups;
      j["grad_norm"] = m.grad_norm;
      j["skipped"] = m.skipped;
      if (m.skipped) log("step " + std::to_string(state.step) + " skipped: every group degenerate");
    } else {
      const SftMetrics m = sft_step(policy, batch, optimizer, lr);
      j["loss"] = m.loss;
      j["grad_norm"] = m.grad_norm;
      j["tokens"] = m.tokens;
    }
    metrics << j.dump() << '\n' << std::flush;
    const bool eval_now = state.step % config.eval_every == 0 || state.step == config.max_steps;
    if (eval_now) evaluate_dev();
    if (eval_now || state.step == stop) save(last_stem);
  }
  if (!checkpoint_exists(last_stem)) save(last_stem);

  result.last_step = state.step;
  result.best_dev_wer = state.best_dev_wer;
  result.best_step = state.best_step;
  return result;
}

#define GASR_INSTANTIATE_TRAIN(S)                                                                                    \
  template class Adam<S>;                                                                                            \
  template Tensor<S> sft_loss<S>(const PolicyModel<S>&, std::span<const Utterance* const>);                          \
  template SftMetrics sft_step<S>(PolicyModel<S>&, std::span<const Utterance* const>, Adam<S>&, double);             \
  template GrpoMetrics grpo_step<S>(PolicyModel<S>&, const PolicyModel<S>&, std::span<const Utterance* const>,       \
                                    Adam<S>&, double, const TrainConfig&, std::uint64_t);

GASR_INSTANTIATE_TRAIN(float)
GASR_INSTANTIATE_TRAIN(double)
#undef GASR_INSTANTIATE_TRAIN

}  // namespace gasr
