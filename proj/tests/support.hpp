#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "gasr/data.hpp"
#include "gasr/model.hpp"
#include "gasr/tensor.hpp"

namespace gasr::testing {

using T64 = Tensor<double>;

// Relative error with a floor on the denominator, so gradients that are
// numerically zero are compared in absolute terms.
inline double relative_error(double analytic, double numeric, double floor = 1e-3) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), floor});
}

struct GradCheck {
  double max_relative_error = 0.0;
  Index checked = 0;
  Index skipped = 0;
};

// Compares backward() against central differences for every element of every
// input. `loss` must rebuild the graph from the current input values.
// `skip(input, element)` can exclude points (e.g. near a kink).
inline GradCheck check_gradients(const std::vector<T64>& inputs, const std::function<T64()>& loss,
                                 double step = 1e-4,
                                 const std::function<bool(std::size_t, Index)>& skip = nullptr) {
  for (const auto& x : inputs) x.node()->grad.resize(0);
  backward(loss());
  std::vector<typename T64::Array> analytic;
  for (const auto& x : inputs) analytic.push_back(x.has_grad() ? x.grad() : T64::Array::Zero(x.size()));
  GradCheck result;
  NoGradGuard no_grad;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    auto& data = inputs[i].node()->data;
    for (Index e = 0; e < data.size(); ++e) {
      if (skip && skip(i, e)) {
        ++result.skipped;
        continue;
      }
      const double saved = data(e);
      data(e) = saved + step;
      const double up = loss().item();
      data(e) = saved - step;
      const double down = loss().item();
      data(e) = saved;
      const double numeric = (up - down) / (2.0 * step);
      result.max_relative_error = std::max(result.max_relative_error, relative_error(analytic[i](e), numeric));
      ++result.checked;
    }
  }
  return result;
}

inline T64 random_tensor(Shape shape, std::mt19937_64& rng, double lo = -2.0, double hi = 2.0, bool grad = true) {
  std::uniform_real_distribution<double> u(lo, hi);
  typename T64::Array a(shape_size(shape));
  for (Index i = 0; i < a.size(); ++i) a(i) = u(rng);
  return T64::from_data(std::move(shape), std::move(a), grad);
}

// h = 8, one block, vocab = 12 (4 word tokens).
inline ModelConfig tiny_config() {
  ModelConfig c;
  c.vocab_size = 12;
  c.frame_dim = 4;
  c.hidden = 8;
  c.layers = 1;
  c.heads = 2;
  c.ffn = 16;
  c.max_positions = 48;
  return c;
}

inline ModelConfig small_config() {
  ModelConfig c;
  c.vocab_size = 20;
  c.frame_dim = 6;
  c.hidden = 16;
  c.layers = 2;
  c.heads = 2;
  c.ffn = 32;
  c.max_positions = 64;
  return c;
}

inline Prompt random_prompt(Index frames, int frame_dim, std::mt19937_64& rng) {
  std::normal_distribution<float> n(0.0f, 1.0f);
  Prompt p;
  p.frames.resize(frames, frame_dim);
  for (Index i = 0; i < p.frames.size(); ++i) p.frames.data()[i] = n(rng);
  return p;
}

inline std::vector<int> random_words(int count, int vocab, std::mt19937_64& rng) {
  std::uniform_int_distribution<int> w(Vocab::kReserved, vocab - 1);
  std::vector<int> out(count);
  for (int& t : out) t = w(rng);
  return out;
}

// Fresh, empty directory under the system temp dir.
inline std::filesystem::path temp_dir(const std::string& name) {
  const auto dir = std::filesystem::temp_directory_path() / ("gasr-test-" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

}  // namespace gasr::testing
