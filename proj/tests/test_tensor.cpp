#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <numbers>

#include "support.hpp"

using namespace gasr;
using namespace gasr::testing;

namespace {

constexpr double kTol = 1e-4;

T64 vec(std::initializer_list<double> values, bool grad = true) {
  typename T64::Array a(static_cast<Index>(values.size()));
  Index i = 0;
  for (double v : values) a(i++) = v;
  return T64::from_data({static_cast<Index>(values.size())}, std::move(a), grad);
}

// Weighted sum, so every output element gets a distinct upstream gradient.
T64 project(const T64& t, std::uint64_t seed = 99) {
  std::mt19937_64 rng(seed);
  return sum(mul(t, random_tensor(t.shape(), rng, -1.0, 1.0, false)));
}

}  // namespace

TEST_CASE("identity matmul returns the other operand") {
  std::mt19937_64 rng(1);
  const T64 x = random_tensor({2, 3}, rng);
  const T64 eye = T64::from_data({2, 2}, (typename T64::Array(4) << 1, 0, 0, 1).finished());
  const T64 y = matmul(eye, x);
  CHECK(y.shape() == x.shape());
  for (Index i = 0; i < x.size(); ++i) CHECK(y.data()(i) == x.data()(i));
}

TEST_CASE("softmax of equal logits is uniform") {
  const T64 s = softmax(vec({0, 0, 0}, false));
  for (Index i = 0; i < 3; ++i) CHECK(s.data()(i) == doctest::Approx(1.0 / 3.0).epsilon(1e-15));
}

TEST_CASE("gradient of sum(exp(x)) at [0, 1] is [1, e]") {
  const T64 x = vec({0, 1});
  backward(sum(exp(x)));
  CHECK(x.grad()(0) == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(x.grad()(1) == doctest::Approx(std::numbers::e).epsilon(1e-12));
  const auto gc = check_gradients({x}, [&] { return sum(exp(x)); });
  CHECK(gc.max_relative_error < 1e-6);
}

TEST_CASE("sum and mean gradients") {
  std::mt19937_64 rng(2);
  T64 x = random_tensor({3, 4}, rng);
  backward(sum(x));
  CHECK((x.grad() == 1.0).all());
  x.zero_grad();
  backward(mean(x));
  CHECK((x.grad() - 1.0 / 12.0).abs().maxCoeff() < 1e-15);
}

TEST_CASE("backward accumulates into leaves across calls") {
  std::mt19937_64 rng(3);
  const T64 x = random_tensor({5}, rng);
  const T64 loss = project(exp(x));
  backward(loss);
  const auto once = x.grad();
  backward(loss);
  CHECK((x.grad() - 2.0 * once).abs().maxCoeff() < 1e-12);
}

TEST_CASE("fan-out gradients add up") {
  const T64 x = vec({1.5, -0.5});
  backward(sum(add(mul(x, x), x)));  // d/dx (x^2 + x) = 2x + 1
  CHECK(x.grad()(0) == doctest::Approx(4.0));
  CHECK(x.grad()(1) == doctest::Approx(0.0));
}

TEST_CASE("stop_gradient contributes no gradient to its source") {
  const T64 x = vec({0.3, -1.2});
  backward(sum(mul(stop_gradient(x), x)));  // only the direct path counts
  CHECK(x.grad()(0) == doctest::Approx(0.3));
  CHECK(x.grad()(1) == doctest::Approx(-1.2));
  const T64 y = vec({2.0});
  const T64 z = mul(stop_gradient(y), stop_gradient(y));
  CHECK_FALSE(z.requires_grad());
}

TEST_CASE("backward on a non-scalar root is a contract error") {
  const T64 x = vec({1, 2});
  CHECK_THROWS_AS(backward(exp(x)), ContractError);
}

TEST_CASE("shape mismatch names the operation and both shapes") {
  std::mt19937_64 rng(4);
  const T64 a = random_tensor({2, 3}, rng);
  const T64 b = random_tensor({4}, rng);
  try {
    (void)add(a, b);
    FAIL("expected DimensionError");
  } catch (const DimensionError& e) {
    const std::string what = e.what();
    CHECK(what.find("add") != std::string::npos);
    CHECK(what.find(shape_string(a.shape())) != std::string::npos);
    CHECK(what.find(shape_string(b.shape())) != std::string::npos);
  }
  CHECK_THROWS_AS(matmul(a, random_tensor({2, 3}, rng)), DimensionError);
  CHECK_THROWS_AS(minimum(a, random_tensor({3}, rng)), DimensionError);
}

TEST_CASE("no graph is recorded under NoGradGuard") {
  std::mt19937_64 rng(5);
  const T64 x = random_tensor({3}, rng);
  NoGradGuard guard;
  CHECK_FALSE(grad_enabled());
  CHECK_FALSE(exp(x).requires_grad());
}

TEST_CASE("every primitive matches central finite differences") {
  std::mt19937_64 rng(6);
  const T64 a = random_tensor({3, 4}, rng);
  const T64 b = random_tensor({3, 4}, rng);
  const T64 row = random_tensor({4}, rng);
  const T64 one = random_tensor({1}, rng);
  const T64 pos = random_tensor({3, 4}, rng, 0.2, 2.0);
  const T64 w = random_tensor({4, 5}, rng);
  const T64 gain = random_tensor({4}, rng);
  const T64 bias = random_tensor({4}, rng);

  struct Case {
    const char* name;
    std::vector<T64> inputs;
    std::function<T64()> f;
  };
  const std::vector<Case> cases = {
      {"add", {a, b}, [&] { return project(add(a, b)); }},
      {"add broadcast row", {a, row}, [&] { return project(add(a, row)); }},
      {"add broadcast scalar", {a, one}, [&] { return project(add(a, one)); }},
      {"sub", {a, row}, [&] { return project(sub(a, row)); }},
      {"mul", {a, b}, [&] { return project(mul(a, b)); }},
      {"mul broadcast", {a, row}, [&] { return project(mul(a, row)); }},
      {"scale", {a}, [&] { return project(scale(a, 1.7)); }},
      {"add_scalar", {a}, [&] { return project(add_scalar(a, -0.4)); }},
      {"neg", {a}, [&] { return project(neg(a)); }},
      {"exp", {a}, [&] { return project(exp(a)); }},
      {"log", {pos}, [&] { return project(log(pos)); }},
      {"sum", {a}, [&] { return sum(a); }},
      {"mean", {a}, [&] { return mean(a); }},
      {"matmul", {a, w}, [&] { return project(matmul(a, w)); }},
      {"transpose", {a}, [&] { return project(transpose(a)); }},
      {"softmax", {a}, [&] { return project(softmax(a)); }},
      {"log_softmax", {a}, [&] { return project(log_softmax(a)); }},
      {"layer_norm", {a, gain, bias}, [&] { return project(layer_norm(a, gain, bias)); }},
      {"gather", {a}, [&] {
         const std::vector<Index> idx{3, 0, 2};
         return project(gather(a, std::span<const Index>(idx)));
       }},
      {"slice", {a}, [&] { return project(slice(a, 1, 3)); }},
      {"concat", {a, b}, [&] {
         const std::vector<T64> parts{a, b};
         return project(concat(std::span<const T64>(parts)));
       }},
      {"embedding_lookup", {a}, [&] {
         const std::vector<Index> ids{2, 0, 2, 1, 2};
         return project(embedding_lookup(a, std::span<const Index>(ids)));
       }},
  };
  for (const auto& c : cases) {
    CAPTURE(c.name);
    const auto gc = check_gradients(c.inputs, c.f);
    CHECK(gc.checked > 0);
    CHECK(gc.max_relative_error < kTol);
  }
}

TEST_CASE("kinked primitives match finite differences away from the kinks") {
  std::mt19937_64 rng(7);
  const T64 a = random_tensor({4, 5}, rng);
  const T64 b = random_tensor({4, 5}, rng);
  auto far = [](double x, double kink) { return std::abs(x - kink) > 1e-3; };
  {
    const auto gc = check_gradients({a}, [&] { return project(relu(a)); }, 1e-4,
                                    [&](std::size_t, Index e) { return !far(a.data()(e), 0.0); });
    CHECK(gc.max_relative_error < kTol);
  }
  {
    const auto gc = check_gradients({a, b}, [&] { return project(minimum(a, b)); }, 1e-4,
                                    [&](std::size_t, Index e) { return !far(a.data()(e), b.data()(e)); });
    CHECK(gc.max_relative_error < kTol);
  }
  {
    const auto gc = check_gradients({a}, [&] { return project(clamp(a, -0.5, 0.8)); }, 1e-4, [&](std::size_t, Index e) {
      return !far(a.data()(e), -0.5) || !far(a.data()(e), 0.8);
    });
    CHECK(gc.max_relative_error < kTol);
  }
}

TEST_CASE("clamp passes gradient inside the range and blocks it outside") {
  const T64 x = vec({-2.0, 0.0, 2.0});
  backward(sum(clamp(x, -1.0, 1.0)));
  CHECK(x.grad()(0) == 0.0);
  CHECK(x.grad()(1) == 1.0);
  CHECK(x.grad()(2) == 0.0);
}

TEST_CASE("causal attention matches finite differences and is causal") {
  std::mt19937_64 rng(8);
  const T64 q = random_tensor({7, 4}, rng);
  const T64 k = random_tensor({7, 4}, rng);
  const T64 v = random_tensor({7, 4}, rng);
  const std::vector<Index> segments{3, 4};
  auto attn = [&] { return causal_attention(q, k, v, std::span<const Index>(segments), Index{2}); };
  const auto gc = check_gradients({q, k, v}, [&] { return project(attn()); });
  CHECK(gc.max_relative_error < kTol);

  // Changing the last row of segment 2 leaves every earlier row unchanged,
  // and segment 1 never sees segment 2.
  NoGradGuard no_grad;
  const auto before = attn().data();
  v.node()->data.tail(4) += 5.0;
  k.node()->data.tail(4) -= 3.0;
  const auto after = attn().data();
  CHECK((before.head(6 * 4) - after.head(6 * 4)).abs().maxCoeff() == 0.0);
  CHECK((before.tail(4) - after.tail(4)).abs().maxCoeff() > 0.0);
}

TEST_CASE("two-layer MLP gradients match finite differences") {
  std::mt19937_64 rng(9);
  const T64 x = random_tensor({5, 3}, rng, -2, 2, false);
  const T64 w1 = random_tensor({3, 6}, rng);
  const T64 b1 = random_tensor({6}, rng);
  const T64 w2 = random_tensor({6, 4}, rng);
  const T64 b2 = random_tensor({4}, rng);
  const std::vector<Index> labels{0, 3, 1, 1, 2};
  auto loss = [&] {
    const T64 h = relu(add(matmul(x, w1), b1));
    const T64 logits = add(matmul(h, w2), b2);
    return neg(mean(gather(log_softmax(logits), std::span<const Index>(labels))));
  };
  const auto gc = check_gradients({w1, b1, w2, b2}, loss);
  CHECK(gc.max_relative_error < kTol);
}

TEST_CASE("float tensors compute the same forward values") {
  const auto xf = Tensor<float>::from_data({3}, (Tensor<float>::Array(3) << 0.5f, -1.0f, 2.0f).finished(), true);
  const auto s = softmax(xf);
  CHECK(s.data().sum() == doctest::Approx(1.0f));
  backward(sum(mul(s, xf)));
  CHECK(xf.has_grad());
}
