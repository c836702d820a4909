#include <gtest/gtest.h>

#include "helpers.hpp"
#include "tlid/error.hpp"
#include "tlid/ops.hpp"
#include "tlid/tensor.hpp"

using namespace tlid;
using tlid::test::random_tensor;
using tlid::test::values;

TEST(Tensor, SizeMustMatchShape) {
  EXPECT_THROW(Tensor({2, 3}, std::vector<double>(5)), Error);
  EXPECT_NO_THROW(Tensor({2, 3}, std::vector<double>(6)));
  EXPECT_EQ(numel({2, 3, 4}), 24u);
  EXPECT_EQ(shape_str({2, 3}), "[2,3]");
}

TEST(Tensor, CopiesShareCloneDoesNot) {
  Tensor a({2}, {1, 2});
  Tensor b = a;
  Tensor c = a.clone();
  a.mutable_data()[0] = 9;
  EXPECT_EQ(b[0], 9);
  EXPECT_EQ(c[0], 1);
}

TEST(Tensor, GradientHasDataShape) {
  Tensor w = random_tensor({3, 4}, 1);
  Tensor x = random_tensor({2, 4}, 2, 1.0, false);
  sum(linear(x, w)).backward();
  ASSERT_TRUE(w.has_grad());
  EXPECT_EQ(w.grad().size(), w.size());
  EXPECT_FALSE(x.has_grad());
}

TEST(Tensor, EveryReachableLeafGetsGradient) {
  Tensor a = random_tensor({3}, 1), b = random_tensor({3}, 2), unused = random_tensor({3}, 3);
  Tensor loss = sum(mul(add(a, b), a));
  loss.backward();
  EXPECT_TRUE(a.has_grad());
  EXPECT_TRUE(b.has_grad());
  EXPECT_FALSE(unused.has_grad());
  // d/da sum((a+b)*a) = 2a + b
  for (std::size_t i = 0; i < 3; ++i) EXPECT_NEAR(a.grad()[i], 2 * a[i] + b[i], 1e-15);
}

TEST(Tensor, SharedSubexpressionAccumulates) {
  Tensor a({1}, {3.0}, true);
  Tensor s = mul(a, a);
  sum(add(s, s)).backward();
  EXPECT_NEAR(a.grad()[0], 12.0, 1e-15);
}

TEST(Tensor, GradientsAccumulateUntilZeroed) {
  Tensor a({2}, {1, 2}, true);
  sum(a).backward();
  sum(a).backward();
  EXPECT_EQ(values(Tensor({2}, {a.grad()[0], a.grad()[1]})), (std::vector<double>{2, 2}));
  a.zero_grad();
  EXPECT_FALSE(a.has_grad());
}

TEST(Tensor, BackwardRequiresScalar) {
  Tensor a = random_tensor({2}, 1);
  EXPECT_THROW(mul(a, a).backward(), Error);
}

TEST(Tensor, NoGradGuardSkipsTape) {
  Tensor a = random_tensor({2}, 1);
  Tensor y;
  {
    NoGradGuard guard;
    EXPECT_FALSE(grad_enabled());
    y = sum(mul(a, a));
  }
  EXPECT_TRUE(grad_enabled());
  EXPECT_FALSE(y.requires_grad());
}

TEST(Tensor, DetachBreaksTape) {
  Tensor a = random_tensor({2}, 1);
  Tensor d = mul(a, a).detach();
  EXPECT_FALSE(d.requires_grad());
  EXPECT_EQ(d.size(), 2u);
}

TEST(Tensor, ReshapeKeepsValues) {
  Tensor a = random_tensor({2, 3}, 1);
  Tensor r = a.reshape({3, 2});
  EXPECT_EQ(values(r), values(a));
  EXPECT_THROW(a.reshape({4, 2}), Error);
}
