#pragma once

// Corpus evaluation: decode, align, pool counts, report.
//
// Report JSON (one object, stable field names):
//   decode        {mode, temperature, beam_size, max_len}
//   overall       {utterances, ref_tokens, substitutions, deletions, insertions,
//                  wer, sub_rate, del_rate, ins_rate}      (rates in percent)
//   domains       {"clean": {...}, "ood": {...}}           (same fields)
//   worst         [{id, insertions, deletions, substitutions, ref, hyp}, ...]
//   utterances    [{id, domain, ref_tokens, substitutions, deletions, insertions}, ...]

#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "gasr/align.hpp"
#include "gasr/data.hpp"
#include "gasr/decode.hpp"

namespace gasr {

struct ErrorSummary {
  long utterances = 0;
  long ref_tokens = 0;
  long substitutions = 0;
  long deletions = 0;
  long insertions = 0;

  long errors() const { return substitutions + deletions + insertions; }
  void add(const AlignmentStats& stats);
  // Percentages of pooled reference tokens (denominator clamped to 1).
  double wer() const;
  double sub_rate() const;
  double del_rate() const;
  double ins_rate() const;
  bool operator==(const ErrorSummary&) const = default;
};

struct UtteranceResult {
  std::string id;
  Domain domain = Domain::kClean;
  std::vector<int> reference;
  std::vector<int> hypothesis;  // <EOS> stripped
  AlignmentStats stats;         // path dropped
};

struct EvalReport {
  DecodeSettings decode;
  ErrorSummary overall;
  std::map<std::string, ErrorSummary> domains;
  std::vector<UtteranceResult> utterances;  // corpus order
  std::vector<std::size_t> worst;           // indices into utterances, most insertions first

  std::string to_json() const;
  static EvalReport from_json(const std::string& text);
  std::string to_text() const;
};

using TranscriptDecoder = std::function<std::vector<int>(const Utterance&)>;

// `decoder` must be safe to call concurrently; results do not depend on `workers`.
EvalReport evaluate(const Corpus& corpus, const TranscriptDecoder& decoder, const DecodeSettings& settings,
                    int workers = 1, std::size_t worst_k = 10);

template <typename Scalar>
EvalReport evaluate(const PolicyModel<Scalar>& model, const Corpus& corpus, const DecodeSettings& settings,
                    int workers = 1, std::size_t worst_k = 10);

// Rebuilds the pooled summaries from per-utterance stats.
ErrorSummary pool(const std::vector<UtteranceResult>& utterances, std::optional<Domain> domain = std::nullopt);

struct SummaryDelta {
  long utterances = 0;
  long ref_tokens = 0;
  long substitutions = 0;
  long deletions = 0;
  long insertions = 0;
  double wer = 0.0;
  double sub_rate = 0.0;
  double del_rate = 0.0;
  double ins_rate = 0.0;
  // (b - a) / a; nullopt when a = 0 < b, 0 when both are 0.
  std::optional<double> relative_wer_change;
};

struct CompareReport {
  SummaryDelta overall;
  std::map<std::string, SummaryDelta> domains;  // domains present in both reports

  std::string to_json() const;
  std::string to_text() const;
};

SummaryDelta compare(const ErrorSummary& a, const ErrorSummary& b);
CompareReport compare(const EvalReport& a, const EvalReport& b);

}  // namespace gasr
