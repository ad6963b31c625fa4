#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <numeric>
#include <set>

#include "gasr/decode.hpp"
#include "gasr/rl.hpp"
#include "support.hpp"

using namespace gasr;
using namespace gasr::testing;

namespace {

using Model = PolicyModel<double>;

// Hand-built group with fixed log-probs, for exercising the loss alone.
RolloutGroup make_group(std::vector<std::vector<int>> hyps, std::vector<double> advantages) {
  RolloutGroup g;
  g.hypotheses = std::move(hyps);
  g.advantages = std::move(advantages);
  g.rewards.assign(g.size(), 0.0);
  for (const auto& h : g.hypotheses) {
    g.logp_old.emplace_back(h.size(), -1.0);
    g.logp_ref.emplace_back(h.size(), -1.0);
  }
  return g;
}

T64 packed_values(const std::vector<double>& v, bool grad = true) {
  typename T64::Array a(static_cast<Index>(v.size()));
  for (std::size_t i = 0; i < v.size(); ++i) a(Index(i)) = v[i];
  return T64::from_data({static_cast<Index>(v.size())}, std::move(a), grad);
}

double population_std(const std::vector<double>& v) {
  const double mu = std::accumulate(v.begin(), v.end(), 0.0) / double(v.size());
  double s = 0.0;
  for (double x : v) s += (x - mu) * (x - mu);
  return std::sqrt(s / double(v.size()));
}

struct RolloutFixture {
  Model policy{tiny_config(), 21};
  Model old_policy{tiny_config(), 22};
  Model reference{tiny_config(), 23};
  std::vector<Prompt> prompts;
  std::vector<std::vector<int>> refs;
  std::vector<RolloutRequest> requests;

  RolloutFixture() {
    // Old and reference policies are nearby perturbations of the policy.
    std::mt19937_64 rng(5);
    std::normal_distribution<double> n(0.0, 1.0);
    old_policy.copy_parameters_from(policy);
    reference.copy_parameters_from(policy);
    for (auto& p : old_policy.parameters())
      for (Index i = 0; i < p.value.size(); ++i) p.value.mutable_data()(i) += 0.08 * n(rng);
    for (auto& p : reference.parameters())
      for (Index i = 0; i < p.value.size(); ++i) p.value.mutable_data()(i) += 0.05 * n(rng);
    for (int i = 0; i < 3; ++i) {
      prompts.push_back(random_prompt(2 + i, 4, rng));
      refs.push_back(random_words(2 + i % 2, 12, rng));
    }
    for (int i = 0; i < 3; ++i) requests.push_back({&prompts[i], refs[i], 100 + std::uint64_t(i)});
  }

  std::vector<const Prompt*> prompt_ptrs() const {
    std::vector<const Prompt*> out;
    for (const auto& p : prompts) out.push_back(&p);
    return out;
  }
};

}  // namespace

TEST_CASE("advantage examples") {
  const std::vector<double> same{0.4, 0.4, 0.4};
  const auto a = advantages(same, true);
  CHECK(a.degenerate);
  CHECK(a.values == std::vector<double>{0, 0, 0});
  const std::vector<double> two{0.0, 1.0};
  CHECK(advantages(two, true).values == std::vector<double>{-1.0, 1.0});
  CHECK(advantages(two, false).values == std::vector<double>{-0.5, 0.5});
  CHECK_THROWS_AS(advantages(std::vector<double>{1.0}, true), ContractError);
}

TEST_CASE("normalized advantages have zero mean and unit population std") {
  std::mt19937_64 rng(1);
  std::uniform_real_distribution<double> u(-3.0, 1.0);
  std::uniform_int_distribution<int> g(2, 12);
  for (int trial = 0; trial < 500; ++trial) {
    std::vector<double> r(g(rng));
    for (double& x : r) x = u(rng);
    const auto a = advantages(r, true).values;
    CHECK(std::abs(std::accumulate(a.begin(), a.end(), 0.0) / double(a.size())) < 1e-9);
    CHECK(population_std(a) == doctest::Approx(1.0).epsilon(1e-9));
  }
}

TEST_CASE("reward scale is a no-op with std normalization and linear without") {
  std::mt19937_64 rng(2);
  std::uniform_real_distribution<double> u(-1.0, 0.0);
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<double> r(6);
    for (double& x : r) x = u(rng);
    const double c = 0.1 + 5.0 * (trial % 7);
    std::vector<double> scaled = r;
    for (double& x : scaled) x *= c;
    const auto a = advantages(r, true).values, as = advantages(scaled, true).values;
    const auto b = advantages(r, false).values, bs = advantages(scaled, false).values;
    for (std::size_t i = 0; i < r.size(); ++i) {
      CHECK(as[i] == doctest::Approx(a[i]).epsilon(1e-9));
      CHECK(bs[i] == doctest::Approx(c * b[i]).epsilon(1e-9));
    }
  }
}

TEST_CASE("k3 divergence values") {
  CHECK(kl_divergence_value(-1.3, -1.3) == 0.0);
  // r = 2, evaluated in extended precision.
  const long double two = 2.0L;
  const double expected = static_cast<double>(two - std::log(two) - 1.0L);
  CHECK(kl_divergence_value(std::log(2.0), 0.0) == doctest::Approx(expected).epsilon(1e-14));
  CHECK(expected == doctest::Approx(0.30685).epsilon(1e-5));
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> u(-6.0, 0.0);
  for (int i = 0; i < 1000; ++i) {
    const double a = u(rng), b = u(rng);
    CHECK(kl_divergence_value(a, b) >= 0.0);
    if (a != b) CHECK(kl_divergence_value(a, b) > 0.0);
  }
}

TEST_CASE("k3 divergence tensor is differentiable through the current policy only") {
  const T64 ref = packed_values({-0.5, -2.0, -1.0});
  const T64 cur = packed_values({-1.0, -1.5, -1.0});
  const T64 kl = kl_divergence_term(ref, cur);
  for (Index i = 0; i < 3; ++i) CHECK(kl.data()(i) == doctest::Approx(kl_divergence_value(ref.data()(i), cur.data()(i))));
  backward(sum(kl));
  CHECK_FALSE(ref.has_grad());
  // d/dcur [exp(ref - cur) - (ref - cur) - 1] = 1 - exp(ref - cur)
  for (Index i = 0; i < 3; ++i)
    CHECK(cur.grad()(i) == doctest::Approx(1.0 - std::exp(ref.data()(i) - cur.data()(i))));
}

TEST_CASE("presets and validation") {
  const auto g = RLConfig::preset(Algorithm::kGrpo);
  CHECK(g.normalize_by_std);
  CHECK(g.loss_normalization == LossNormalization::kPerSample);
  CHECK(g.eps_low == 0.2);
  CHECK(g.eps_high == 0.2);
  const auto d = RLConfig::preset(Algorithm::kDapo);
  CHECK(d.beta == 0.0);
  CHECK(d.eps_high == 0.28);
  CHECK(d.eps_high > d.eps_low);
  CHECK(d.loss_normalization == LossNormalization::kPerTokenBatch);
  CHECK(d.degenerate_policy == DegeneratePolicy::kSkipGroup);
  const auto r = RLConfig::preset(Algorithm::kDrGrpo);
  CHECK_FALSE(r.normalize_by_std);
  CHECK(r.loss_normalization == LossNormalization::kUnnormalizedSum);
  for (const auto& c : {g, d, r}) CHECK_NOTHROW(c.validate());

  auto bad = d;
  bad.beta = 0.1;
  CHECK_THROWS_AS(bad.validate(), ContractError);
  bad = g;
  bad.eps_high = 0.1;
  CHECK_THROWS_AS(bad.validate(), ContractError);
  bad = g;
  bad.eps_low = 0.0;
  CHECK_THROWS_AS(bad.validate(), ContractError);
  bad = g;
  bad.group_size = 1;
  CHECK_THROWS_AS(bad.validate(), ContractError);
  CHECK(parse_algorithm("drgrpo") == Algorithm::kDrGrpo);
  CHECK(parse_loss_normalization("per_token_batch") == LossNormalization::kPerTokenBatch);
  CHECK(parse_degenerate_policy("skip_group") == DegeneratePolicy::kSkipGroup);
  CHECK_THROWS(parse_algorithm("ppo"));
}

TEST_CASE("identical policies with zero advantages give zero loss and zero gradient") {
  auto cfg = RLConfig::preset(Algorithm::kGrpo);
  RolloutGroup g = make_group({{8, 9, 5}, {10, 5}}, {0.0, 0.0});
  g.logp_old = {{-0.7, -1.1, -0.2}, {-2.0, -0.4}};
  g.logp_ref = g.logp_old;
  const T64 cur = packed_values({-0.7, -1.1, -0.2, -2.0, -0.4});
  const auto res = grpo_loss(std::span(&g, 1), cur, cfg);
  CHECK(res.loss.item() == 0.0);
  backward(res.loss);
  CHECK(cur.grad().abs().maxCoeff() == 0.0);
}

TEST_CASE("single-hypothesis group reduces to REINFORCE on a two-token policy") {
  // One decision over two outcomes; logp_cur = log_softmax(theta)[token].
  for (int token : {0, 1}) {
    const T64 theta = packed_values({0.3, -0.4});
    auto cfg = RLConfig::preset(Algorithm::kGrpo);
    cfg.beta = 0.0;
    RolloutGroup g = make_group({{8}}, {1.0});
    // Broadcasting onto a zero row turns theta into a 1 x 2 logit matrix.
    const T64 row = add(T64::zeros({1, 2}), theta);
    const std::vector<Index> pick{token};
    const T64 logp = gather(log_softmax(row), std::span<const Index>(pick));
    g.logp_old = {{logp.item()}};  // rho = 1 at the evaluation point
    backward(grpo_loss(std::span(&g, 1), logp, cfg).loss);
    const Eigen::ArrayXd p = theta.data().exp() / theta.data().exp().sum();
    for (int k = 0; k < 2; ++k) {
      const double reinforce = (k == token ? 1.0 : 0.0) - p(k);  // d log p(token) / d theta_k
      CHECK(theta.grad()(k) == doctest::Approx(-reinforce).epsilon(1e-12));
    }
  }
}

TEST_CASE("a clipped token contributes no gradient") {
  auto cfg = RLConfig::preset(Algorithm::kGrpo);
  cfg.beta = 0.0;
  RolloutGroup g = make_group({{8, 9}, {10}}, {1.0, -1.0});
  g.logp_old = {{-1.0, -1.0}, {-1.0}};
  // Token 0: rho = e^0.5 > 1.2 with positive advantage (clipped).
  // Token 1: rho = 1 (live). Token 2: rho = e^-0.5 < 0.8 with negative advantage (clipped).
  const T64 cur = packed_values({-0.5, -1.0, -1.5});
  const auto res = grpo_loss(std::span(&g, 1), cur, cfg);
  CHECK(res.stats.clip_fraction == doctest::Approx(2.0 / 3.0));
  backward(res.loss);
  CHECK(cur.grad()(0) == 0.0);
  CHECK(cur.grad()(1) != 0.0);
  CHECK(cur.grad()(2) == 0.0);
  // Perturbing the clipped token leaves the loss unchanged.
  NoGradGuard no_grad;
  const double base = res.loss.item();
  for (double h : {1e-4, -1e-4}) {
    const T64 moved = packed_values({-0.5 + h, -1.0, -1.5}, false);
    CHECK(grpo_loss(std::span(&g, 1), moved, cfg).loss.item() == base);
  }
}

TEST_CASE("beta = 0 ignores the reference log-probs") {
  auto cfg = RLConfig::preset(Algorithm::kDapo);
  RolloutGroup g = make_group({{8, 9}, {10, 11, 5}}, {0.7, -0.7});
  g.logp_old = {{-1.2, -0.3}, {-0.9, -2.0, -0.1}};
  const T64 cur = packed_values({-1.0, -0.4, -1.1, -1.8, -0.2});
  const double base = grpo_loss(std::span(&g, 1), cur, cfg).loss.item();
  std::mt19937_64 rng(4);
  std::uniform_real_distribution<double> u(-9.0, 0.0);
  for (int trial = 0; trial < 20; ++trial) {
    for (auto& v : g.logp_ref)
      for (double& x : v) x = u(rng);
    CHECK(grpo_loss(std::span(&g, 1), cur, cfg).loss.item() == base);
  }
  g.logp_ref.clear();
  CHECK(grpo_loss(std::span(&g, 1), cur, cfg).loss.item() == base);
}

TEST_CASE("token weights per aggregation mode") {
  // |o_1| = 1, |o_2| = 10.
  const RolloutGroup g = make_group({{8}, std::vector<int>(10, 9)}, {1.0, -1.0});
  auto cfg = RLConfig::preset(Algorithm::kGrpo);
  const auto per_sample = token_weights(std::span(&g, 1), cfg);
  cfg.loss_normalization = LossNormalization::kPerTokenBatch;
  const auto per_token = token_weights(std::span(&g, 1), cfg);
  cfg.loss_normalization = LossNormalization::kUnnormalizedSum;
  cfg.max_generation_length = 16;
  const auto unnorm = token_weights(std::span(&g, 1), cfg);
  REQUIRE(per_sample.size() == 11);
  CHECK(per_sample[0] == 1.0 / 2.0);
  CHECK(per_sample[1] == 1.0 / 20.0);
  CHECK(per_token[0] == 1.0 / 11.0);
  CHECK(per_token[5] == 1.0 / 11.0);
  CHECK(unnorm[0] == 1.0 / 32.0);
  CHECK(unnorm[10] == 1.0 / 32.0);
  // A token of the long hypothesis weighs 10x more, relative to a token of
  // the short one, under per-token aggregation than under per-sample.
  const double ratio = (per_token[1] / per_token[0]) / (per_sample[1] / per_sample[0]);
  CHECK(ratio == doctest::Approx(10.0).epsilon(1e-15));
  // Per-sample weights of each hypothesis sum to 1/G.
  CHECK(std::accumulate(per_sample.begin(), per_sample.end(), 0.0) == doctest::Approx(1.0));
}

TEST_CASE("skipped degenerate groups contribute nothing") {
  auto cfg = RLConfig::preset(Algorithm::kDapo);
  RolloutGroup live = make_group({{8, 5}, {9, 5}}, {1.0, -1.0});
  RolloutGroup dead = make_group({{8, 5}, {8, 5}}, {0.0, 0.0});
  dead.degenerate = true;
  const std::vector<RolloutGroup> both{live, dead};
  const T64 cur_both = packed_values({-0.2, -0.3, -1.0, -0.5, -0.9, -0.9, -0.1, -0.1});
  const T64 cur_live = packed_values({-0.2, -0.3, -1.0, -0.5});
  const auto a = grpo_loss(std::span(both), cur_both, cfg);
  const auto b = grpo_loss(std::span(&live, 1), cur_live, cfg);
  CHECK(a.loss.item() == doctest::Approx(b.loss.item()).epsilon(1e-15));
  CHECK(a.stats.skipped_groups == 1);
  backward(a.loss);
  for (Index i = 4; i < 8; ++i) CHECK(cur_both.grad()(i) == 0.0);

  const auto only_dead = grpo_loss(std::span(&dead, 1), packed_values({-0.9, -0.9, -0.1, -0.1}), cfg);
  CHECK(only_dead.skipped);
  CHECK(only_dead.loss.item() == 0.0);

  // Under zero_advantage the KL term of a degenerate group still applies.
  auto grpo = RLConfig::preset(Algorithm::kGrpo);
  const T64 cur_dead = packed_values({-0.5, -0.9, -0.1, -0.4});
  const auto kept = grpo_loss(std::span(&dead, 1), cur_dead, grpo);
  CHECK_FALSE(kept.skipped);
  CHECK(kept.loss.item() > 0.0);
}

TEST_CASE("loss rejects malformed groups") {
  const auto cfg = RLConfig::preset(Algorithm::kGrpo);
  RolloutGroup g = make_group({{8, 5}}, {});
  CHECK_THROWS_AS(grpo_loss(std::span(&g, 1), packed_values({-1, -1}), cfg), ContractError);
  g.advantages = {1.0};
  CHECK_THROWS_AS(grpo_loss(std::span(&g, 1), packed_values({-1, -1, -1}), cfg), DimensionError);
}

TEST_CASE("loss gradients over all model parameters match finite differences for every preset") {
  RolloutFixture fx;
  const auto prompts = fx.prompt_ptrs();
  for (const Algorithm algo : {Algorithm::kGrpo, Algorithm::kDapo, Algorithm::kDrGrpo}) {
    CAPTURE(to_string(algo));
    auto cfg = RLConfig::preset(algo);
    cfg.group_size = 3;
    cfg.max_generation_length = 5;
    const DecodeSettings decode{DecodeSettings::Mode::kSample, 1.0, 3, 5};
    const auto groups = build_rollout_groups(fx.old_policy, fx.reference, false, fx.requests, cfg,
                                             RewardSpec{}, decode);
    const auto seqs = pack_sequences(groups, prompts);

    // Keep every ratio away from the clip boundaries so the loss is smooth
    // within the finite-difference step.
    {
      NoGradGuard no_grad;
      const auto cur = fx.policy.completion_log_probs(seqs);
      Index t = 0, clipped = 0;
      for (const auto& g : groups)
        for (std::size_t i = 0; i < g.size(); ++i)
          for (std::size_t j = 0; j < g.hypotheses[i].size(); ++j, ++t) {
            const double rho = std::exp(cur.data()(t) - g.logp_old[i][j]);
            CHECK(std::abs(rho - (1.0 - cfg.eps_low)) > 1e-3);
            CHECK(std::abs(rho - (1.0 + cfg.eps_high)) > 1e-3);
            clipped += (rho < 1.0 - cfg.eps_low || rho > 1.0 + cfg.eps_high);
          }
      CHECK(clipped > 0);
    }

    std::vector<T64> inputs;
    for (auto& p : fx.policy.parameters()) inputs.push_back(p.value);
    const auto gc = check_gradients(inputs, [&] {
      return grpo_loss(std::span(groups), fx.policy.completion_log_probs(seqs), cfg).loss;
    });
    CHECK(gc.checked > 500);
    CHECK(gc.max_relative_error < 1e-4);
  }
}

TEST_CASE("rollout groups: sampling snapshot, replay and reward bookkeeping") {
  RolloutFixture fx;
  auto cfg = RLConfig::preset(Algorithm::kGrpo);
  const RewardSpec spec{RewardKind::kWer, 1.0};
  const DecodeSettings decode{DecodeSettings::Mode::kSample, 1.0, 6, 6};
  const auto current = build_rollout_groups(fx.policy, fx.reference, true, fx.requests, cfg, spec, decode);
  const auto snapshot = build_rollout_groups(fx.policy, fx.reference, false, fx.requests, cfg, spec, decode);
  const auto prompts = fx.prompt_ptrs();
  for (std::size_t r = 0; r < current.size(); ++r) {
    const auto& g = current[r];
    CHECK(g.prompt_index == r);
    CHECK(g.size() == 6);
    CHECK(g.logp_old.empty());
    CHECK(g.logp_ref.size() == g.size());
    CHECK(snapshot[r].hypotheses == g.hypotheses);
    for (std::size_t i = 0; i < g.size(); ++i) {
      CHECK(g.logp_sample[i].size() == g.hypotheses[i].size());
      CHECK(g.logp_ref[i].size() == g.hypotheses[i].size());
      CHECK(g.rewards[i] == reward(spec, fx.refs[r], g.hypotheses[i]));
      for (std::size_t j = 0; j < g.hypotheses[i].size(); ++j)
        CHECK(snapshot[r].logp_old[i][j] == doctest::Approx(g.logp_sample[i][j]).epsilon(1e-10));
    }
    const auto a = advantages(g.rewards, true);
    CHECK(g.advantages == a.values);
    CHECK(g.degenerate == a.degenerate);
  }
  // With the policy as its own snapshot every ratio is 1.
  const auto seqs = pack_sequences(current, prompts);
  const auto res = grpo_loss(std::span(current), fx.policy.completion_log_probs(seqs), cfg);
  CHECK(res.stats.clip_fraction == 0.0);
}

TEST_CASE("rollouts do not depend on the worker count") {
  RolloutFixture fx;
  const auto cfg = RLConfig::preset(Algorithm::kGrpo);
  const DecodeSettings decode{DecodeSettings::Mode::kSample, 1.0, 6, 6};
  const auto one = build_rollout_groups(fx.policy, fx.reference, false, fx.requests, cfg, RewardSpec{}, decode, 1);
  const auto three = build_rollout_groups(fx.policy, fx.reference, false, fx.requests, cfg, RewardSpec{}, decode, 3);
  for (std::size_t r = 0; r < one.size(); ++r) {
    CHECK(one[r].hypotheses == three[r].hypotheses);
    CHECK(one[r].logp_old == three[r].logp_old);
    CHECK(one[r].logp_ref == three[r].logp_ref);
  }
}

TEST_CASE("beam rollouts return distinct hypotheses, fewer when the space is exhausted") {
  RolloutFixture fx;
  auto cfg = RLConfig::preset(Algorithm::kGrpo);
  DecodeSettings decode{DecodeSettings::Mode::kBeam, 1.0, 6, 4};
  auto g = build_rollout_group(fx.policy, fx.reference, true, fx.requests[0], cfg, RewardSpec{}, decode);
  CHECK(g.size() == 6);
  CHECK(std::set<std::vector<int>>(g.hypotheses.begin(), g.hypotheses.end()).size() == 6);
  const auto top = beam_search(fx.policy, fx.prompts[0], 6, 4);
  for (std::size_t i = 0; i < top.size(); ++i) CHECK(g.hypotheses[i] == top[i].tokens);

  // One-token completions over a 12-token vocab leave 11 candidates.
  cfg.group_size = 16;
  decode.max_len = 1;
  g = build_rollout_group(fx.policy, fx.reference, true, fx.requests[0], cfg, RewardSpec{}, decode);
  CHECK(g.size() == 11);
  CHECK(std::set<std::vector<int>>(g.hypotheses.begin(), g.hypotheses.end()).size() == 11);
}
