#pragma once

// Decoder-only causal policy over a mixed stream of special tokens, projected
// acoustic frames and text tokens.
//
// Stream layout for one utterance with N frames and completion c_1..c_K:
//
//   <User> <BOS> <TASK> <S-BOS> s_1 .. s_N <System> <BOS> c_1 .. c_K
//
// The logits at the final <BOS> predict c_1; the logits at c_j predict c_{j+1}.
// Two forward paths share the parameters: a differentiable packed-batch path
// built from Tensor ops (training, batched scoring) and an incremental
// key/value-cached path in plain Eigen (sampling, beam search, replay scoring).

#include <Eigen/Core>

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "gasr/tensor.hpp"

namespace gasr {

struct Vocab {
  static constexpr int kPad = 0;
  static constexpr int kUser = 1;
  static constexpr int kBos = 2;
  static constexpr int kSBos = 3;
  static constexpr int kSystem = 4;
  static constexpr int kEos = 5;
  static constexpr int kTask = 6;
  static constexpr int kUnk = 7;
  static constexpr int kReserved = 8;

  int size = 64;

  int word_count() const { return size - kReserved; }
  bool is_word(int id) const { return id >= kReserved && id < size; }
  static bool is_reserved(int id) { return id >= 0 && id < kReserved; }
  static std::string token_name(int id);
  std::uint64_t checksum() const;
};

struct ModelConfig {
  int vocab_size = 64;
  int frame_dim = 16;
  int hidden = 64;
  int layers = 2;
  int heads = 2;
  int ffn = 128;
  int max_positions = 256;

  bool operator==(const ModelConfig&) const = default;
};

using FrameMatrix = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

// Speech-conditioned prompt. Frames are the N x d acoustic representation.
struct Prompt {
  static constexpr int kFrameSlot = -1;
  static constexpr Index kHeadTokens = 4;  // <User> <BOS> <TASK> <S-BOS>
  static constexpr Index kTailTokens = 2;  // <System> <BOS>

  FrameMatrix frames;

  Index frame_count() const { return frames.rows(); }
  Index prefix_length() const { return kHeadTokens + frame_count() + kTailTokens; }
  // Stream position of the first completion token.
  Index completion_offset() const { return prefix_length(); }

  // Token ids per stream position; frame positions hold kFrameSlot.
  std::vector<int> layout(std::span<const int> completion) const;
  // True exactly at the positions holding completion tokens.
  std::vector<bool> loss_mask(std::span<const int> completion) const;
};

// Training example: transcript x_1..x_T followed by <EOS>.
std::vector<int> with_eos(std::span<const int> transcript);
// Drops a trailing <EOS>, if any.
std::vector<int> strip_eos(std::span<const int> completion);

template <typename Scalar>
struct NamedParameter {
  std::string name;
  Tensor<Scalar> value;
};

// One sequence of a packed batch.
struct SequenceRef {
  const Prompt* prompt = nullptr;
  std::span<const int> completion;
};

template <typename Scalar>
class IncrementalDecoder;

template <typename Scalar>
class PolicyModel {
 public:
  using RowMatrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  using RowVector = Eigen::Matrix<Scalar, 1, Eigen::Dynamic>;

  PolicyModel(const ModelConfig& config, std::uint64_t seed);

  // Deep copy; the copy's parameters are independent leaves.
  PolicyModel clone() const;
  // Overwrites parameter values (configs must match).
  void copy_parameters_from(const PolicyModel& other);
  template <typename Other>
  void copy_parameters_from(const PolicyModel<Other>& other);

  const ModelConfig& config() const { return config_; }
  std::vector<NamedParameter<Scalar>>& parameters() { return params_; }
  const std::vector<NamedParameter<Scalar>>& parameters() const { return params_; }
  const Tensor<Scalar>& parameter(const std::string& name) const;
  Index parameter_count() const;
  void zero_grad();

  // Logits at every stream position of prompt + completion: [L x vocab].
  // The <PAD> column is always -inf.
  Tensor<Scalar> forward_logits(const Prompt& prompt, std::span<const int> completion) const;

  // log P(c_j | c_<j, s) for every completion token of every sequence,
  // packed sequence-major into one vector.
  Tensor<Scalar> completion_log_probs(std::span<const SequenceRef> batch) const;

 private:
  struct Block {
    Tensor<Scalar> ln1_gain, ln1_bias;
    Tensor<Scalar> wq, bq, wk, bk, wv, bv, wo, bo;
    Tensor<Scalar> ln2_gain, ln2_bias;
    Tensor<Scalar> w_up, b_up, w_down, b_down;
  };

  void bind();
  Tensor<Scalar> hidden_states(std::span<const std::vector<int>> layouts, std::span<const Prompt* const> prompts,
                               std::vector<Index>& segments) const;

  template <typename>
  friend class IncrementalDecoder;

  ModelConfig config_;
  std::vector<NamedParameter<Scalar>> params_;
  Tensor<Scalar> token_embedding_, position_embedding_, frame_weight_, frame_bias_;
  std::vector<Block> blocks_;
  Tensor<Scalar> final_gain_, final_bias_, head_weight_, head_bias_;
  Tensor<Scalar> output_mask_;  // constant, -inf at <PAD>
};

// Key/value-cached decoder state for one stream. Copyable, so beams and
// group samples can branch from a shared prefix.
template <typename Scalar>
class IncrementalDecoder {
 public:
  using RowMatrix = typename PolicyModel<Scalar>::RowMatrix;
  using RowVector = typename PolicyModel<Scalar>::RowVector;

  IncrementalDecoder(const PolicyModel<Scalar>& model, const Prompt& prompt, Index reserve = 0);

  // Logits for the next token given everything pushed so far.
  const RowVector& logits() const { return logits_; }
  // Natural-log probabilities (double precision) derived from logits().
  Eigen::VectorXd log_probs() const;
  void push(int token);
  Index length() const { return length_; }

 private:
  void run_rows(const RowMatrix& input);

  const PolicyModel<Scalar>* model_;
  std::vector<RowMatrix> keys_, values_;
  Index length_ = 0;
  RowVector logits_;
};

struct Hypothesis {
  std::vector<int> tokens;        // completion, including <EOS> when emitted
  std::vector<double> log_probs;  // per token, under the model at temperature 1
  double total_log_prob = 0.0;
  bool finished = false;  // emitted <EOS> before max_len
};

// Per-token log-probs of `completion` via the incremental path.
template <typename Scalar>
std::vector<double> score(const PolicyModel<Scalar>& model, const Prompt& prompt, std::span<const int> completion);

// Multinomial sampling over the full softmax of logits / temperature;
// temperature == 0 means greedy argmax. Recorded log-probs are those of the
// untempered model so that score() replays them exactly.
template <typename Scalar>
Hypothesis sample(const PolicyModel<Scalar>& model, const Prompt& prompt, int max_len, double temperature,
                  std::uint64_t seed);

template <typename Scalar>
Hypothesis greedy(const PolicyModel<Scalar>& model, const Prompt& prompt, int max_len) {
  return sample(model, prompt, max_len, 0.0, 0);
}

// Standard beam search over summed log-probs, no length penalty. Beams that
// emit <EOS> are frozen; returns up to beam_size hypotheses, best first.
template <typename Scalar>
std::vector<Hypothesis> beam_search(const PolicyModel<Scalar>& model, const Prompt& prompt, int beam_size,
                                    int max_len);

}  // namespace gasr
