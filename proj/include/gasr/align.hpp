#pragma once

// Word-level Levenshtein alignment with unit costs.

#include <cstdint>
#include <span>
#include <vector>

namespace gasr {

enum class EditOp : std::uint8_t { kMatch, kSubstitute, kInsert, kDelete };

struct AlignmentStats {
  long substitutions = 0;
  long deletions = 0;
  long insertions = 0;
  long ref_len = 0;
  std::vector<EditOp> path;  // ref-to-hyp edit script, left to right

  long errors() const { return substitutions + deletions + insertions; }
  AlignmentStats& operator+=(const AlignmentStats& other);  // pools counts, drops paths
};

// Minimal edit alignment. Among minimal alignments the backtrace prefers
// substitution over insertion over deletion, so breakdowns are deterministic.
AlignmentStats align(std::span<const int> ref, std::span<const int> hyp);

// (Sub + Del + Ins) / N. With N = 0 the denominator is clamped to 1, so an
// empty reference scores its insertion count.
double wer(const AlignmentStats& stats);

// Applies an edit script to `ref`, pulling inserted/substituted tokens from `hyp`.
std::vector<int> apply_path(std::span<const int> ref, std::span<const int> hyp, std::span<const EditOp> path);

}  // namespace gasr
