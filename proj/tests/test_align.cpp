#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <random>
#include <vector>

#include "gasr/align.hpp"

using namespace gasr;

namespace {

using Seq = std::vector<int>;

// All sequences of length <= max_len over {0, .., alphabet-1}.
std::vector<Seq> all_sequences(int alphabet, int max_len) {
  std::vector<Seq> out{{}};
  for (std::size_t start = 0; start < out.size(); ++start) {
    if (static_cast<int>(out[start].size()) == max_len) continue;
    for (int s = 0; s < alphabet; ++s) {
      Seq next = out[start];
      next.push_back(s);
      out.push_back(std::move(next));
    }
  }
  return out;
}

// Walks every alignment path backwards from (i, j). Keeps the cheapest one,
// breaking ties on the reversed op string with diagonal < insert < delete.
struct PathOracle {
  const Seq& ref;
  const Seq& hyp;
  int best_cost = 1 << 30;
  std::vector<int> best_key;
  std::vector<EditOp> best_ops;
  std::vector<int> key;
  std::vector<EditOp> ops;

  void walk(std::size_t i, std::size_t j, int cost) {
    if (cost > best_cost) return;
    if (i == 0 && j == 0) {
      if (cost < best_cost || key < best_key) {
        best_cost = cost;
        best_key = key;
        best_ops = ops;
      }
      return;
    }
    auto step = [&](int k, EditOp op, std::size_t ni, std::size_t nj, int c) {
      key.push_back(k);
      ops.push_back(op);
      walk(ni, nj, cost + c);
      key.pop_back();
      ops.pop_back();
    };
    if (i > 0 && j > 0) {
      const bool same = ref[i - 1] == hyp[j - 1];
      step(0, same ? EditOp::kMatch : EditOp::kSubstitute, i - 1, j - 1, same ? 0 : 1);
    }
    if (j > 0) step(1, EditOp::kInsert, i, j - 1, 1);
    if (i > 0) step(2, EditOp::kDelete, i - 1, j, 1);
  }

};

std::vector<EditOp> oracle_path(const Seq& ref, const Seq& hyp) {
  PathOracle o{ref, hyp, 1 << 30, {}, {}, {}, {}};
  o.walk(ref.size(), hyp.size(), 0);
  return {o.best_ops.rbegin(), o.best_ops.rend()};
}

long count(const std::vector<EditOp>& ops, EditOp op) { return std::count(ops.begin(), ops.end(), op); }

}  // namespace

TEST_CASE("identity, empty hypothesis and pure insertions") {
  const Seq abc{1, 2, 3};
  auto s = align(abc, abc);
  CHECK(s.errors() == 0);
  CHECK(s.ref_len == 3);
  s = align(abc, Seq{});
  CHECK(s.deletions == 3);
  CHECK(s.substitutions == 0);
  CHECK(s.insertions == 0);
  s = align(Seq{1, 2}, Seq{1, 9, 2, 8});
  CHECK(s.insertions == 2);
  CHECK(s.substitutions == 0);
  CHECK(s.deletions == 0);
}

TEST_CASE("wer formula and the empty-reference convention") {
  AlignmentStats s;
  s.substitutions = 1;
  s.ref_len = 3;
  CHECK(wer(s) == doctest::Approx(1.0 / 3.0));
  s = {};
  s.insertions = 3;
  s.ref_len = 1;
  CHECK(wer(s) == 3.0);
  CHECK(wer(align(Seq{}, Seq{4, 5})) == 2.0);
  CHECK(wer(align(Seq{}, Seq{})) == 0.0);
}

TEST_CASE("exhaustive agreement with a path-enumeration oracle") {
  // Every pair of sequences up to length 5 over a 3-symbol alphabet.
  const auto seqs = all_sequences(3, 5);
  REQUIRE(seqs.size() == 364);
  long pairs = 0;
  for (const auto& ref : seqs) {
    for (const auto& hyp : seqs) {
      const auto got = align(ref, hyp);
      const auto want = oracle_path(ref, hyp);
      const bool same = got.path == want;
      if (!same) {
        CAPTURE(ref);
        CAPTURE(hyp);
        FAIL_CHECK("alignment differs from oracle");
      }
      CHECK(got.substitutions == count(want, EditOp::kSubstitute));
      CHECK(got.insertions == count(want, EditOp::kInsert));
      CHECK(got.deletions == count(want, EditOp::kDelete));
      ++pairs;
    }
  }
  CHECK(pairs == 364 * 364);
}

TEST_CASE("distance properties on random sequences") {
  std::mt19937_64 rng(7);
  std::uniform_int_distribution<int> len(0, 12), sym(0, 4);
  auto draw = [&] {
    Seq s(len(rng));
    for (int& x : s) x = sym(rng);
    return s;
  };
  for (int trial = 0; trial < 2000; ++trial) {
    const Seq a = draw(), b = draw(), c = draw();
    const auto ab = align(a, b), ba = align(b, a);
    // Tie-breaking may split the distance differently in each direction.
    CHECK(ab.errors() == ba.errors());
    CHECK(ab.errors() <= align(a, c).errors() + align(c, b).errors());
    CHECK(ab.substitutions + ab.deletions <= ab.ref_len);
    CHECK(apply_path(a, b, ab.path) == b);
    CHECK(ab.errors() >= std::abs(long(a.size()) - long(b.size())));
  }
}

TEST_CASE("symmetry swaps insertions and deletions when the split is forced") {
  const Seq a{1, 2, 3, 4}, b{2, 4};
  const auto ab = align(a, b), ba = align(b, a);
  CHECK(ab.deletions == 2);
  CHECK(ba.insertions == 2);
}

TEST_CASE("tie-break prefers substitution, then insertion, then deletion") {
  // [1] vs [2]: one substitution beats insert + delete.
  auto s = align(Seq{1}, Seq{2});
  CHECK(s.substitutions == 1);
  CHECK(s.errors() == 1);
  // [1 2] vs [2 3]: Sub+Sub and Del+Ins both cost 2; substitutions win.
  s = align(Seq{1, 2}, Seq{2, 3});
  CHECK(s.substitutions == 2);
  CHECK(s.path == std::vector<EditOp>{EditOp::kSubstitute, EditOp::kSubstitute});
}

TEST_CASE("pooled counts give corpus WER as total errors over total words") {
  std::mt19937_64 rng(11);
  std::uniform_int_distribution<int> len(1, 8), sym(0, 3);
  AlignmentStats pooled;
  long errors = 0, words = 0;
  double mean_of_rates = 0.0;
  for (int u = 0; u < 10; ++u) {
    Seq ref(len(rng)), hyp(len(rng));
    for (int& x : ref) x = sym(rng);
    for (int& x : hyp) x = sym(rng);
    const auto s = align(ref, hyp);
    pooled += s;
    const auto ops = oracle_path(ref, hyp);
    errors += long(ops.size()) - count(ops, EditOp::kMatch);
    words += long(ref.size());
    mean_of_rates += wer(s) / 10.0;
  }
  CHECK(pooled.errors() == errors);
  CHECK(pooled.ref_len == words);
  CHECK(pooled.path.empty());
  CHECK(wer(pooled) == doctest::Approx(double(errors) / double(words)));
  CHECK(wer(pooled) != doctest::Approx(mean_of_rates));
}

TEST_CASE("apply_path rejects inconsistent scripts") {
  CHECK_THROWS(apply_path(Seq{1}, Seq{}, std::vector<EditOp>{EditOp::kMatch}));
  CHECK_THROWS(apply_path(Seq{1, 2}, Seq{1}, std::vector<EditOp>{EditOp::kMatch}));
}
