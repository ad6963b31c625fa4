#include "gasr/model.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <random>

#include "gasr/checksum.hpp"

namespace gasr {

std::string Vocab::token_name(int id) {
  switch (id) {
    case kPad: return "<PAD>";
    case kUser: return "<User>";
    case kBos: return "<BOS>";
    case kSBos: return "<S-BOS>";
    case kSystem: return "<System>";
    case kEos: return "<EOS>";
    case kTask: return "<TASK>";
    case kUnk: return "<UNK>";
    default: return "w" + std::to_string(id);
  }
}

std::uint64_t Vocab::checksum() const {
  Fnv1a h;
  h.update_value(static_cast<std::int64_t>(size));
  for (int id = 0; id < kReserved; ++id) h.update(token_name(id));
  return h.digest();
}

std::vector<int> Prompt::layout(std::span<const int> completion) const {
  std::vector<int> out{Vocab::kUser, Vocab::kBos, Vocab::kTask, Vocab::kSBos};
  out.insert(out.end(), static_cast<std::size_t>(frame_count()), kFrameSlot);
  out.push_back(Vocab::kSystem);
  out.push_back(Vocab::kBos);
  out.insert(out.end(), completion.begin(), completion.end());
  return out;
}

std::vector<bool> Prompt::loss_mask(std::span<const int> completion) const {
  std::vector<bool> mask(static_cast<std::size_t>(prefix_length()), false);
  mask.insert(mask.end(), completion.size(), true);
  return mask;
}

std::vector<int> with_eos(std::span<const int> transcript) {
  std::vector<int> out(transcript.begin(), transcript.end());
  out.push_back(Vocab::kEos);
  return out;
}

std::vector<int> strip_eos(std::span<const int> completion) {
  std::vector<int> out(completion.begin(), completion.end());
  if (!out.empty() && out.back() == Vocab::kEos) out.pop_back();
  return out;
}

namespace {

template <typename S>
using RowMat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

constexpr double kLayerNormEps = 1e-5;

void check_config(const ModelConfig& c) {
  require(c.vocab_size > Vocab::kReserved, "model: vocab must exceed the reserved ids");
  require(c.hidden > 0 && c.layers >= 0 && c.heads > 0 && c.frame_dim > 0 && c.ffn > 0, "model: bad dimensions");
  require(c.hidden % c.heads == 0, "model: hidden width must be divisible by heads");
  require(c.max_positions > Prompt::kHeadTokens + Prompt::kTailTokens + 1, "model: max_positions too small");
}

void check_completion(std::span<const int> completion, int vocab) {
  for (int t : completion) {
    require(t != Vocab::kPad, "completion contains <PAD>");
    require(t >= 0 && t < vocab, "completion token " + std::to_string(t) + " outside vocab");
  }
}

template <typename S>
void layer_norm_rows(const RowMat<S>& x, const Eigen::Array<S, Eigen::Dynamic, 1>& gain,
                     const Eigen::Array<S, Eigen::Dynamic, 1>& bias, RowMat<S>& out) {
  const Index c = x.cols();
  out.resize(x.rows(), c);
  for (Index i = 0; i < x.rows(); ++i) {
    auto row = x.row(i).array();
    const S mu = row.mean();
    auto centered = row - mu;
    const S rstd = S(1) / std::sqrt(centered.square().sum() / S(c) + S(kLayerNormEps));
    out.row(i) = ((centered * rstd) * gain.transpose() + bias.transpose()).matrix();
  }
}

}  // namespace

// ---------------------------------------------------------------- PolicyModel

template <typename S>
PolicyModel<S>::PolicyModel(const ModelConfig& config, std::uint64_t seed) : config_(config) {
  check_config(config_);
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  const Index h = config_.hidden;
  auto gaussian = [&](Shape shape, double stddev) {
    const Index n = shape_size(shape);
    typename Tensor<S>::Array data(n);
    for (Index i = 0; i < n; ++i) data(i) = static_cast<S>(normal(rng) * stddev);
    return Tensor<S>::from_data(std::move(shape), std::move(data), true);
  };
  auto constant = [&](Shape shape, double value) { return Tensor<S>::full(std::move(shape), S(value), true); };
  auto add = [&](const std::string& name, Tensor<S> t) { params_.push_back({name, std::move(t)}); };

  const double residual_scale = 1.0 / std::sqrt(2.0 * std::max(1, config_.layers));
  add("token_embedding", gaussian({config_.vocab_size, h}, 0.5));
  add("position_embedding", gaussian({config_.max_positions, h}, 0.1));
  add("frame_projection.weight", gaussian({config_.frame_dim, h}, 1.0 / std::sqrt(config_.frame_dim)));
  add("frame_projection.bias", constant({h}, 0.0));
  for (int l = 0; l < config_.layers; ++l) {
    const std::string p = "blocks." + std::to_string(l) + ".";
    add(p + "ln1.gain", constant({h}, 1.0));
    add(p + "ln1.bias", constant({h}, 0.0));
    for (const char* proj : {"query", "key", "value"}) {
      add(p + "attn." + proj + ".weight", gaussian({h, h}, 1.0 / std::sqrt(double(h))));
      add(p + "attn." + proj + ".bias", constant({h}, 0.0));
    }
    add(p + "attn.output.weight", gaussian({h, h}, residual_scale / std::sqrt(double(h))));
    add(p + "attn.output.bias", constant({h}, 0.0));
    add(p + "ln2.gain", constant({h}, 1.0));
    add(p + "ln2.bias", constant({h}, 0.0));
    add(p + "ffn.up.weight", gaussian({h, config_.ffn}, 1.0 / std::sqrt(double(h))));
    add(p + "ffn.up.bias", constant({config_.ffn}, 0.0));
    add(p + "ffn.down.weight", gaussian({config_.ffn, h}, residual_scale / std::sqrt(double(config_.ffn))));
    add(p + "ffn.down.bias", constant({h}, 0.0));
  }
  add("final_ln.gain", constant({h}, 1.0));
  add("final_ln.bias", constant({h}, 0.0));
  add("head.weight", gaussian({h, config_.vocab_size}, 1.0 / std::sqrt(double(h))));
  add("head.bias", constant({config_.vocab_size}, 0.0));
  bind();
}

template <typename S>
void PolicyModel<S>::bind() {
  auto it = params_.begin();
  auto next = [&]() -> Tensor<S> { return (it++)->value; };
  token_embedding_ = next();
  position_embedding_ = next();
  frame_weight_ = next();
  frame_bias_ = next();
  blocks_.assign(config_.layers, Block{});
  for (auto& b : blocks_) {
    b.ln1_gain = next();
    b.ln1_bias = next();
    b.wq = next();
    b.bq = next();
    b.wk = next();
    b.bk = next();
    b.wv = next();
    b.bv = next();
    b.wo = next();
    b.bo = next();
    b.ln2_gain = next();
    b.ln2_bias = next();
    b.w_up = next();
    b.b_up = next();
    b.w_down = next();
    b.b_down = next();
  }
  final_gain_ = next();
  final_bias_ = next();
  head_weight_ = next();
  head_bias_ = next();
  // <PAD> is never a valid output; its logit is pinned to -inf.
  typename Tensor<S>::Array mask = Tensor<S>::Array::Zero(head_bias_.size());
  mask(Vocab::kPad) = -std::numeric_limits<S>::infinity();
  output_mask_ = Tensor<S>::from_data(head_bias_.shape(), std::move(mask));
}

template <typename S>
PolicyModel<S> PolicyModel<S>::clone() const {
  PolicyModel copy(*this);
  for (auto& p : copy.params_) {
    p.value = Tensor<S>::from_data(p.value.shape(), p.value.data(), true);
  }
  copy.bind();
  return copy;
}

template <typename S>
void PolicyModel<S>::copy_parameters_from(const PolicyModel& other) {
  require(other.config_ == config_, "copy_parameters_from: model configs differ");
  for (std::size_t i = 0; i < params_.size(); ++i) params_[i].value.mutable_data() = other.params_[i].value.data();
}

template <typename S>
template <typename Other>
void PolicyModel<S>::copy_parameters_from(const PolicyModel<Other>& other) {
  require(other.config() == config_, "copy_parameters_from: model configs differ");
  for (std::size_t i = 0; i < params_.size(); ++i) {
    params_[i].value.mutable_data() = other.parameters()[i].value.data().template cast<S>();
  }
}

template <typename S>
const Tensor<S>& PolicyModel<S>::parameter(const std::string& name) const {
  for (const auto& p : params_) {
    if (p.name == name) return p.value;
  }
  throw ContractError("unknown parameter " + name);
}

template <typename S>
Index PolicyModel<S>::parameter_count() const {
  Index n = 0;
  for (const auto& p : params_) n += p.value.size();
  return n;
}

template <typename S>
void PolicyModel<S>::zero_grad() {
  for (auto& p : params_) p.value.zero_grad();
}

template <typename S>
Tensor<S> PolicyModel<S>::hidden_states(std::span<const std::vector<int>> layouts,
                                        std::span<const Prompt* const> prompts,
                                        std::vector<Index>& segments) const {
  const Index h = config_.hidden;
  std::vector<Index> token_ids, positions, order;
  Index frame_rows = 0;
  segments.clear();
  for (std::size_t s = 0; s < layouts.size(); ++s) {
    const auto& layout = layouts[s];
    require(static_cast<int>(layout.size()) <= config_.max_positions,
            "sequence of length " + std::to_string(layout.size()) + " exceeds max_positions " +
                std::to_string(config_.max_positions));
    require(prompts[s]->frames.cols() == config_.frame_dim || prompts[s]->frame_count() == 0,
            "prompt frame dimension does not match model");
    segments.push_back(static_cast<Index>(layout.size()));
    for (std::size_t p = 0; p < layout.size(); ++p) {
      positions.push_back(static_cast<Index>(p));
      if (layout[p] == Prompt::kFrameSlot) {
        order.push_back(-1 - frame_rows++);
      } else {
        order.push_back(static_cast<Index>(token_ids.size()));
        token_ids.push_back(layout[p]);
      }
    }
  }
  const Index token_rows = static_cast<Index>(token_ids.size());
  for (auto& o : order) {
    if (o < 0) o = token_rows + (-1 - o);
  }

  std::vector<Tensor<S>> parts{embedding_lookup(token_embedding_, std::span<const Index>(token_ids))};
  if (frame_rows > 0) {
    RowMat<S> frames(frame_rows, config_.frame_dim);
    Index r = 0;
    for (const Prompt* prompt : prompts) {
      if (prompt->frame_count() == 0) continue;
      frames.middleRows(r, prompt->frame_count()) = prompt->frames.template cast<S>();
      r += prompt->frame_count();
    }
    parts.push_back(add(matmul(Tensor<S>::from_matrix(frames), frame_weight_), frame_bias_));
  }
  Tensor<S> x = embedding_lookup(parts.size() == 1 ? parts[0] : concat(std::span<const Tensor<S>>(parts)),
                                 std::span<const Index>(order));
  x = add(x, embedding_lookup(position_embedding_, std::span<const Index>(positions)));

  for (const auto& b : blocks_) {
    Tensor<S> a = layer_norm(x, b.ln1_gain, b.ln1_bias, S(kLayerNormEps));
    Tensor<S> q = add(matmul(a, b.wq), b.bq);
    Tensor<S> k = add(matmul(a, b.wk), b.bk);
    Tensor<S> v = add(matmul(a, b.wv), b.bv);
    Tensor<S> att = causal_attention(q, k, v, std::span<const Index>(segments), Index(config_.heads));
    x = add(x, add(matmul(att, b.wo), b.bo));
    Tensor<S> n = layer_norm(x, b.ln2_gain, b.ln2_bias, S(kLayerNormEps));
    Tensor<S> u = relu(add(matmul(n, b.w_up), b.b_up));
    x = add(x, add(matmul(u, b.w_down), b.b_down));
  }
  (void)h;
  return layer_norm(x, final_gain_, final_bias_, S(kLayerNormEps));
}

template <typename S>
Tensor<S> PolicyModel<S>::forward_logits(const Prompt& prompt, std::span<const int> completion) const {
  check_completion(completion, config_.vocab_size);
  std::vector<std::vector<int>> layouts{prompt.layout(completion)};
  const Prompt* prompts[] = {&prompt};
  std::vector<Index> segments;
  Tensor<S> hidden = hidden_states(layouts, prompts, segments);
  return add(add(matmul(hidden, head_weight_), head_bias_), output_mask_);
}

template <typename S>
Tensor<S> PolicyModel<S>::completion_log_probs(std::span<const SequenceRef> batch) const {
  require(!batch.empty(), "completion_log_probs: empty batch");
  std::vector<std::vector<int>> layouts;
  std::vector<const Prompt*> prompts;
  std::vector<Index> rows, targets;
  Index offset = 0;
  for (const auto& seq : batch) {
    require(!seq.completion.empty(), "completion_log_probs: empty completion");
    check_completion(seq.completion, config_.vocab_size);
    // The final completion token is only a target, never an input.
    layouts.push_back(seq.prompt->layout(seq.completion.first(seq.completion.size() - 1)));
    prompts.push_back(seq.prompt);
    const Index first = offset + seq.prompt->prefix_length() - 1;
    for (std::size_t j = 0; j < seq.completion.size(); ++j) {
      rows.push_back(first + static_cast<Index>(j));
      targets.push_back(seq.completion[j]);
    }
    offset += static_cast<Index>(layouts.back().size());
  }
  std::vector<Index> segments;
  Tensor<S> hidden = hidden_states(layouts, prompts, segments);
  Tensor<S> picked = embedding_lookup(hidden, std::span<const Index>(rows));
  Tensor<S> logits = add(add(matmul(picked, head_weight_), head_bias_), output_mask_);
  return gather(log_softmax(logits), std::span<const Index>(targets));
}

// ---------------------------------------------------------------- IncrementalDecoder

template <typename S>
IncrementalDecoder<S>::IncrementalDecoder(const PolicyModel<S>& model, const Prompt& prompt, Index reserve)
    : model_(&model) {
  const auto& cfg = model.config_;
  require(prompt.frames.cols() == cfg.frame_dim || prompt.frame_count() == 0,
          "prompt frame dimension does not match model");
  const Index prefix = prompt.prefix_length();
  require(prefix <= cfg.max_positions, "prompt exceeds max_positions");
  const Index capacity = std::min<Index>(cfg.max_positions, prefix + std::max<Index>(reserve, 1));
  keys_.assign(cfg.layers, RowMatrix(capacity, cfg.hidden));
  values_.assign(cfg.layers, RowMatrix(capacity, cfg.hidden));

  const auto layout = prompt.layout({});
  RowMatrix input(prefix, cfg.hidden);
  auto tok = model.token_embedding_.matrix();
  auto pos = model.position_embedding_.matrix();
  RowMatrix projected;
  if (prompt.frame_count() > 0) {
    projected = prompt.frames.template cast<S>() * model.frame_weight_.matrix();
    projected.rowwise() += model.frame_bias_.matrix().row(0);
  }
  Index f = 0;
  for (Index p = 0; p < prefix; ++p) {
    if (layout[p] == Prompt::kFrameSlot) {
      input.row(p) = projected.row(f++) + pos.row(p);
    } else {
      input.row(p) = tok.row(layout[p]) + pos.row(p);
    }
  }
  run_rows(input);
}

template <typename S>
void IncrementalDecoder<S>::push(int token) {
  const auto& cfg = model_->config_;
  require(token >= 0 && token < cfg.vocab_size, "push: token outside vocab");
  require(length_ < cfg.max_positions, "push: stream exceeds max_positions");
  RowMatrix input = model_->token_embedding_.matrix().row(token) + model_->position_embedding_.matrix().row(length_);
  run_rows(input);
}

template <typename S>
void IncrementalDecoder<S>::run_rows(const RowMatrix& input) {
  const auto& cfg = model_->config_;
  const Index n = input.rows();
  const Index h = cfg.hidden;
  const Index heads = cfg.heads;
  const Index dh = h / heads;
  const S scale_factor = S(1) / std::sqrt(S(dh));
  const Index end = length_ + n;
  if (end > keys_[0].rows()) {
    const Index grown = std::min<Index>(cfg.max_positions, std::max<Index>(end, 2 * keys_[0].rows()));
    for (auto& k : keys_) k.conservativeResize(grown, Eigen::NoChange);
    for (auto& v : values_) v.conservativeResize(grown, Eigen::NoChange);
  }
  RowMatrix x = input;
  RowMatrix a, att(n, h);
  for (std::size_t l = 0; l < model_->blocks_.size(); ++l) {
    const auto& b = model_->blocks_[l];
    layer_norm_rows<S>(x, b.ln1_gain.data(), b.ln1_bias.data(), a);
    RowMatrix q = a * b.wq.matrix();
    q.rowwise() += b.bq.matrix().row(0);
    keys_[l].middleRows(length_, n).noalias() = a * b.wk.matrix();
    keys_[l].middleRows(length_, n).rowwise() += b.bk.matrix().row(0);
    values_[l].middleRows(length_, n).noalias() = a * b.wv.matrix();
    values_[l].middleRows(length_, n).rowwise() += b.bv.matrix().row(0);
    for (Index hd = 0; hd < heads; ++hd) {
      RowMatrix scores = (q.middleCols(hd * dh, dh) * keys_[l].block(0, hd * dh, end, dh).transpose()) * scale_factor;
      for (Index i = 0; i < n; ++i) {
        const Index visible = length_ + i + 1;
        auto row = scores.row(i).head(visible);
        const S mx = row.maxCoeff();
        row = (row.array() - mx).exp().matrix();
        row /= row.sum();
        scores.row(i).tail(end - visible).setZero();
      }
      att.middleCols(hd * dh, dh).noalias() = scores * values_[l].block(0, hd * dh, end, dh);
    }
    RowMatrix o = att * b.wo.matrix();
    o.rowwise() += b.bo.matrix().row(0);
    x += o;
    layer_norm_rows<S>(x, b.ln2_gain.data(), b.ln2_bias.data(), a);
    RowMatrix u = a * b.w_up.matrix();
    u.rowwise() += b.b_up.matrix().row(0);
    u = u.cwiseMax(S(0));
    RowMatrix d = u * b.w_down.matrix();
    d.rowwise() += b.b_down.matrix().row(0);
    x += d;
  }
  length_ = end;
  RowMatrix last = x.bottomRows(1);
  RowMatrix normed;
  layer_norm_rows<S>(last, model_->final_gain_.data(), model_->final_bias_.data(), normed);
  logits_ = normed * model_->head_weight_.matrix();
  logits_ += model_->head_bias_.matrix().row(0);
  logits_(Vocab::kPad) = -std::numeric_limits<S>::infinity();
}

template <typename S>
Eigen::VectorXd IncrementalDecoder<S>::log_probs() const {
  Eigen::VectorXd l = logits_.transpose().template cast<double>();
  const double mx = l.maxCoeff();
  const double lse = mx + std::log((l.array() - mx).exp().sum());
  return l.array() - lse;
}

// ---------------------------------------------------------------- decoding


template <typename S>
std::vector<double> score(const PolicyModel<S>& model, const Prompt& prompt, std::span<const int> completion) {
  check_completion(completion, model.config().vocab_size);
  IncrementalDecoder<S> dec(model, prompt, static_cast<Index>(completion.size()));
  std::vector<double> out;
  out.reserve(completion.size());
  for (std::size_t j = 0; j < completion.size(); ++j) {
    out.push_back(dec.log_probs()(completion[j]));
    if (j + 1 < completion.size()) dec.push(completion[j]);
  }
  return out;
}

template <typename S>
std::vector<Hypothesis> beam_search(const PolicyModel<S>& model, const Prompt& prompt, int beam_size, int max_len) {
  require(beam_size >= 1, "beam_search: beam_size must be at least 1");
  require(max_len >= 1, "beam_search: max_len must be at least 1");
  struct Beam {
    IncrementalDecoder<S> dec;
    Hypothesis hyp;
  };
  struct Candidate {
    double score;
    int beam;  // -1: carried-over finished hypothesis
    int token;
    std::size_t order;
  };
  std::vector<Beam> active{{IncrementalDecoder<S>(model, prompt, max_len), Hypothesis{}}};
  std::vector<Hypothesis> done;
  const int vocab = model.config().vocab_size;
  for (int step = 0; step < max_len && !active.empty(); ++step) {
    std::vector<Candidate> pool;
    std::vector<Eigen::VectorXd> lps;
    for (std::size_t i = 0; i < done.size(); ++i) pool.push_back({done[i].total_log_prob, -1, int(i), pool.size()});
    for (std::size_t b = 0; b < active.size(); ++b) {
      lps.push_back(active[b].dec.log_probs());
      for (int t = 0; t < vocab; ++t) {
        if (!std::isfinite(lps[b](t))) continue;  // masked tokens (<PAD>) are never proposed
        pool.push_back({active[b].hyp.total_log_prob + lps[b](t), int(b), t, pool.size()});
      }
    }
    const std::size_t keep = std::min<std::size_t>(pool.size(), static_cast<std::size_t>(beam_size));
    std::partial_sort(pool.begin(), pool.begin() + keep, pool.end(), [](const Candidate& x, const Candidate& y) {
      if (x.score != y.score) return x.score > y.score;
      return x.order < y.order;
    });
    std::vector<Beam> next_active;
    std::vector<Hypothesis> next_done;
    for (std::size_t c = 0; c < keep; ++c) {
      const Candidate& cand = pool[c];
      if (cand.beam < 0) {
        next_done.push_back(std::move(done[cand.token]));
        continue;
      }
      const Beam& parent = active[cand.beam];
      Hypothesis hyp = parent.hyp;
      hyp.tokens.push_back(cand.token);
      hyp.log_probs.push_back(lps[cand.beam](cand.token));
      hyp.total_log_prob = cand.score;
      if (cand.token == Vocab::kEos) {
        hyp.finished = true;
        next_done.push_back(std::move(hyp));
      } else if (step + 1 == max_len) {
        next_done.push_back(std::move(hyp));
      } else {
        Beam child{parent.dec, std::move(hyp)};
        child.dec.push(cand.token);
        next_active.push_back(std::move(child));
      }
    }
    active = std::move(next_active);
    done = std::move(next_done);
  }
  std::stable_sort(done.begin(), done.end(),
                   [](const Hypothesis& x, const Hypothesis& y) { return x.total_log_prob > y.total_log_prob; });
  return done;
}

template class PolicyModel<float>;
template class PolicyModel<double>;
template void PolicyModel<float>::copy_parameters_from<double>(const PolicyModel<double>&);
template void PolicyModel<double>::copy_parameters_from<float>(const PolicyModel<float>&);
template class IncrementalDecoder<float>;
template class IncrementalDecoder<double>;
template std::vector<double> score<float>(const PolicyModel<float>&, const Prompt&, std::span<const int>);
template std::vector<double> score<double>(const PolicyModel<double>&, const Prompt&, std::span<const int>);
template std::vector<Hypothesis> beam_search<float>(const PolicyModel<float>&, const Prompt&, int, int);
template std::vector<Hypothesis> beam_search<double>(const PolicyModel<double>&, const Prompt&, int, int);

}  // namespace gasr
