#include "gasr/decode.hpp"

#include <sstream>

namespace gasr {

DecodeSettings::Mode parse_decode_mode(const std::string& text) {
  if (text == "greedy") return DecodeSettings::Mode::kGreedy;
  if (text == "sample") return DecodeSettings::Mode::kSample;
  if (text == "beam") return DecodeSettings::Mode::kBeam;
  throw ContractError("unknown decode mode '" + text + "' (expected greedy|sample|beam)");
}

std::string to_string(DecodeSettings::Mode mode) {
  switch (mode) {
    case DecodeSettings::Mode::kGreedy: return "greedy";
    case DecodeSettings::Mode::kSample: return "sample";
    case DecodeSettings::Mode::kBeam: return "beam";
  }
  return "?";
}

std::string DecodeSettings::describe() const {
  std::ostringstream out;
  out << to_string(mode) << " max_len=" << max_len;
  if (mode == Mode::kSample) out << " temperature=" << temperature;
  if (mode == Mode::kBeam) out << " beam_size=" << beam_size;
  return out.str();
}

template <typename S>
Hypothesis sample_continuation(IncrementalDecoder<S> decoder, int max_len, double temperature, std::mt19937_64& rng) {
  require(max_len >= 1, "sample: max_len must be at least 1");
  require(temperature >= 0.0, "sample: temperature must be non-negative");
  std::uniform_real_distribution<double> uniform(0.0, 1.0);
  Hypothesis hyp;
  for (int step = 0; step < max_len; ++step) {
    const Eigen::VectorXd lp = decoder.log_probs();
    Index token = 0;
    if (temperature == 0.0) {
      lp.maxCoeff(&token);  // first maximal index
    } else {
      Eigen::ArrayXd w = lp.array() / temperature;
      w = (w - w.maxCoeff()).exp();
      const double u = uniform(rng) * w.sum();
      double acc = 0.0;
      token = w.size() - 1;
      for (Index i = 0; i < w.size(); ++i) {
        acc += w(i);
        if (u < acc) {
          token = i;
          break;
        }
      }
    }
    const int tok = static_cast<int>(token);
    hyp.tokens.push_back(tok);
    hyp.log_probs.push_back(lp(token));
    hyp.total_log_prob += lp(token);
    if (tok == Vocab::kEos) {
      hyp.finished = true;
      break;
    }
    if (step + 1 < max_len) decoder.push(tok);
  }
  return hyp;
}

template <typename S>
Hypothesis sample(const PolicyModel<S>& model, const Prompt& prompt, int max_len, double temperature,
                  std::uint64_t seed) {
  require(max_len >= 1, "sample: max_len must be at least 1");
  std::mt19937_64 rng(seed);
  return sample_continuation(IncrementalDecoder<S>(model, prompt, max_len), max_len, temperature, rng);
}

template <typename S>
Hypothesis decode(const PolicyModel<S>& model, const Prompt& prompt, const DecodeSettings& settings,
                  std::uint64_t seed) {
  switch (settings.mode) {
    case DecodeSettings::Mode::kGreedy:
      return sample(model, prompt, settings.max_len, 0.0, seed);
    case DecodeSettings::Mode::kSample:
      return sample(model, prompt, settings.max_len, settings.temperature, seed);
    case DecodeSettings::Mode::kBeam:
      return beam_search(model, prompt, settings.beam_size, settings.max_len).front();
  }
  throw ContractError("decode: bad mode");
}

#define GASR_INSTANTIATE_DECODE(S)                                                                  \
  template Hypothesis sample_continuation<S>(IncrementalDecoder<S>, int, double, std::mt19937_64&); \
  template Hypothesis sample<S>(const PolicyModel<S>&, const Prompt&, int, double, std::uint64_t);  \
  template Hypothesis decode<S>(const PolicyModel<S>&, const Prompt&, const DecodeSettings&, std::uint64_t);

GASR_INSTANTIATE_DECODE(float)
GASR_INSTANTIATE_DECODE(double)
#undef GASR_INSTANTIATE_DECODE

}  // namespace gasr
