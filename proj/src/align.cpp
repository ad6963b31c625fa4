#include "gasr/align.hpp"

#include <algorithm>

#include "gasr/errors.hpp"

namespace gasr {

AlignmentStats& AlignmentStats::operator+=(const AlignmentStats& other) {
  substitutions += other.substitutions;
  deletions += other.deletions;
  insertions += other.insertions;
  ref_len += other.ref_len;
  path.clear();
  return *this;
}

AlignmentStats align(std::span<const int> ref, std::span<const int> hyp) {
  const std::size_t n = ref.size(), m = hyp.size();
  const std::size_t w = m + 1;
  std::vector<long> cost((n + 1) * w);
  for (std::size_t i = 0; i <= n; ++i) cost[i * w] = static_cast<long>(i);
  for (std::size_t j = 0; j <= m; ++j) cost[j] = static_cast<long>(j);
  for (std::size_t i = 1; i <= n; ++i) {
    for (std::size_t j = 1; j <= m; ++j) {
      const long diag = cost[(i - 1) * w + j - 1] + (ref[i - 1] == hyp[j - 1] ? 0 : 1);
      const long ins = cost[i * w + j - 1] + 1;
      const long del = cost[(i - 1) * w + j] + 1;
      cost[i * w + j] = std::min({diag, ins, del});
    }
  }

  AlignmentStats stats;
  stats.ref_len = static_cast<long>(n);
  std::size_t i = n, j = m;
  while (i > 0 || j > 0) {
    const long here = cost[i * w + j];
    if (i > 0 && j > 0 && here == cost[(i - 1) * w + j - 1] + (ref[i - 1] == hyp[j - 1] ? 0 : 1)) {
      if (ref[i - 1] == hyp[j - 1]) {
        stats.path.push_back(EditOp::kMatch);
      } else {
        stats.path.push_back(EditOp::kSubstitute);
        ++stats.substitutions;
      }
      --i;
      --j;
    } else if (j > 0 && here == cost[i * w + j - 1] + 1) {
      stats.path.push_back(EditOp::kInsert);
      ++stats.insertions;
      --j;
    } else {
      stats.path.push_back(EditOp::kDelete);
      ++stats.deletions;
      --i;
    }
  }
  std::reverse(stats.path.begin(), stats.path.end());
  return stats;
}

double wer(const AlignmentStats& stats) {
  const long denom = std::max(stats.ref_len, 1L);
  return static_cast<double>(stats.errors()) / static_cast<double>(denom);
}

std::vector<int> apply_path(std::span<const int> ref, std::span<const int> hyp, std::span<const EditOp> path) {
  std::vector<int> out;
  std::size_t i = 0, j = 0;
  for (EditOp op : path) {
    switch (op) {
      case EditOp::kMatch:
        require(i < ref.size() && j < hyp.size(), "apply_path: path overruns sequences");
        out.push_back(ref[i++]);
        ++j;
        break;
      case EditOp::kSubstitute:
        require(i < ref.size() && j < hyp.size(), "apply_path: path overruns sequences");
        out.push_back(hyp[j++]);
        ++i;
        break;
      case EditOp::kInsert:
        require(j < hyp.size(), "apply_path: path overruns hypothesis");
        out.push_back(hyp[j++]);
        break;
      case EditOp::kDelete:
        require(i < ref.size(), "apply_path: path overruns reference");
        ++i;
        break;
    }
  }
  require(i == ref.size() && j == hyp.size(), "apply_path: path does not consume both sequences");
  return out;
}

}  // namespace gasr
