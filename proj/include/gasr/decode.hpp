#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "gasr/model.hpp"

namespace gasr {

struct DecodeSettings {
  enum class Mode { kGreedy, kSample, kBeam };

  Mode mode = Mode::kGreedy;
  double temperature = 1.0;  // kSample only
  int beam_size = 4;         // kBeam only
  int max_len = 16;          // completion tokens, including <EOS>

  std::string describe() const;
};

DecodeSettings::Mode parse_decode_mode(const std::string& text);  // greedy | sample | beam
std::string to_string(DecodeSettings::Mode mode);

// Continues sampling from an already-prefilled decoder state.
template <typename Scalar>
Hypothesis sample_continuation(IncrementalDecoder<Scalar> decoder, int max_len, double temperature,
                               std::mt19937_64& rng);

// Single best hypothesis under `settings` (the top beam in beam mode).
template <typename Scalar>
Hypothesis decode(const PolicyModel<Scalar>& model, const Prompt& prompt, const DecodeSettings& settings,
                  std::uint64_t seed = 0);

}  // namespace gasr
