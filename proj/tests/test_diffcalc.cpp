#include <gtest/gtest.h>

#include <cmath>
#include <numbers>

#include "oracles.hpp"
#include "simmdg/diffcalc.hpp"
#include "simmdg/errors.hpp"

using namespace simmdg;
using ad::Node;

namespace {

Matrix uniform_matrix(std::size_t r, std::size_t c, Rng& rng) {
  Matrix m(r, c);
  for (auto& v : m.values()) v = rng.uniform(-1.0, 1.0);
  return m;
}

void expect_fd(const std::function<Node()>& f, std::vector<Node> leaves, double tol = 1e-5) {
  const auto res = oracle::check_gradients(f, std::move(leaves), 1e-5, 1e-8);
  EXPECT_GT(res.checked, 0u);
  EXPECT_LT(res.max_rel, tol);
}

}  // namespace

TEST(Matmul, IdentityAndArithmetic) {
  const auto eye = Node::constant(Matrix::from_rows({{1, 0}, {0, 1}}));
  const auto a = Node::constant(Matrix::from_rows({{1, 2}, {3, 4}}));
  EXPECT_EQ(ad::matmul(eye, a).value(), a.value());
  const auto r = ad::matmul(Node::constant(Matrix::from_rows({{1, 0}})), Node::constant(Matrix::from_rows({{2}, {3}})));
  EXPECT_EQ(r.value(), Matrix::scalar(2));
}

TEST(Matmul, ShapeMismatchNamesBothShapes) {
  const auto a = Node::constant(Matrix(2, 3));
  const auto b = Node::constant(Matrix(2, 3));
  try {
    ad::matmul(a, b);
    FAIL();
  } catch (const DimensionError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("2x3"), std::string::npos) << msg;
  }
}

TEST(Matmul, FiniteDifference) {
  Rng rng(1, 0);
  auto a = Node::parameter(uniform_matrix(3, 4, rng));
  auto b = Node::parameter(uniform_matrix(4, 2, rng));
  expect_fd([&] { return ad::sum(ad::matmul(a, b)); }, {a, b}, 1e-6);
}

TEST(Elementwise, Examples) {
  EXPECT_EQ(ad::relu(Node::constant(Matrix::row({-1, 0, 2}))).value(), Matrix::row({0, 0, 2}));
  EXPECT_EQ(ad::add(Node::constant(Matrix::row({1, 2})), Node::constant(Matrix::row({3, 4}))).value(),
            Matrix::row({4, 6}));
  auto x = Node::parameter(Matrix::row({0, 1}));
  ad::backward(ad::sum(ad::exp(x)));
  EXPECT_DOUBLE_EQ(x.grad()[0], 1.0);
  EXPECT_DOUBLE_EQ(x.grad()[1], std::numbers::e);
}

TEST(Elementwise, ReluGradientAtZeroIsZero) {
  auto x = Node::parameter(Matrix::row({-1, 0, 2}));
  ad::backward(ad::sum(ad::relu(x)));
  EXPECT_EQ(x.grad(), Matrix::row({0, 0, 1}));
}

TEST(Elementwise, LogDomain) {
  EXPECT_THROW(ad::log(Node::constant(Matrix::row({1, 0}))), DomainError);
  EXPECT_THROW(ad::log(Node::constant(Matrix::row({-2}))), DomainError);
  EXPECT_THROW(ad::div(Node::constant(Matrix::row({1})), Node::constant(Matrix::row({0}))), DomainError);
  EXPECT_THROW(ad::add(Node::constant(Matrix(1, 2)), Node::constant(Matrix(2, 1))), DimensionError);
}

TEST(Elementwise, FiniteDifferenceEveryOp) {
  Rng rng(2, 0);
  auto a = Node::parameter(uniform_matrix(3, 4, rng));
  auto b = Node::parameter(uniform_matrix(3, 4, rng));
  auto pos = Node::parameter(uniform_matrix(3, 4, rng));
  for (auto& v : pos.mutable_value().values()) v = std::abs(v) + 0.5;
  auto row = Node::parameter(uniform_matrix(1, 4, rng));
  // keep relu/abs away from their kinks
  for (auto& v : a.mutable_value().values())
    if (std::abs(v) < 0.05) v += 0.1;
  auto w = Node::constant(uniform_matrix(3, 4, rng));
  auto weighted = [&](const Node& n) { return ad::sum(ad::mul(n, w)); };
  expect_fd([&] { return weighted(ad::add(a, b)); }, {a, b});
  expect_fd([&] { return weighted(ad::sub(a, b)); }, {a, b});
  expect_fd([&] { return weighted(ad::mul(a, b)); }, {a, b});
  expect_fd([&] { return weighted(ad::div(a, pos)); }, {a, pos});
  expect_fd([&] { return weighted(ad::scale(a, -2.5)); }, {a});
  expect_fd([&] { return weighted(ad::add_scalar(a, 0.3)); }, {a});
  expect_fd([&] { return weighted(ad::relu(a)); }, {a});
  expect_fd([&] { return weighted(ad::exp(a)); }, {a});
  expect_fd([&] { return weighted(ad::log(pos)); }, {pos});
  expect_fd([&] { return weighted(ad::abs(a)); }, {a});
  expect_fd([&] { return weighted(ad::add_row(a, row)); }, {a, row});
  expect_fd([&] { return ad::sum(ad::mul(ad::transpose(a), ad::transpose(w))); }, {a});
  expect_fd([&] { return ad::mean(ad::mul(a, b)); }, {a, b});
  expect_fd([&] { return ad::sum(ad::mul(ad::sum_rows(a), ad::sum_rows(b))); }, {a, b});
  expect_fd([&] { return ad::sum(ad::mul(ad::row_norms(a), ad::sum_rows(w))); }, {a});
  expect_fd([&] { return weighted(ad::normalize_rows(a)); }, {a});
  expect_fd([&] { return ad::sum(ad::logsumexp_rows(a)); }, {a});
  Matrix mask(3, 4, 1.0);
  mask(0, 1) = 0.0;
  mask(2, 3) = 0.0;
  expect_fd([&] { return ad::sum(ad::logsumexp_rows(a, mask)); }, {a});
  const std::vector<std::size_t> targets{0, 3, 2};
  expect_fd([&] { return ad::sum(ad::softmax_cross_entropy(a, targets)); }, {a});
  auto w6 = Node::constant(uniform_matrix(6, 4, rng));
  expect_fd([&] { return ad::sum(ad::mul(ad::gather_rows(ad::vstack({a, b}), {5, 0, 0, 2, 3, 1}), w6)); }, {a, b});
}

TEST(Concat, ExamplesAndRouting) {
  auto x = Node::parameter(Matrix::row({1, 2}));
  auto y = Node::parameter(Matrix::row({3}));
  const auto c = ad::concat({x, y});
  EXPECT_EQ(c.value(), Matrix::row({1, 2, 3}));
  ad::backward(ad::sum(c));
  EXPECT_EQ(x.grad(), Matrix::row({1, 1}));
  EXPECT_EQ(y.grad(), Matrix::row({1}));
  EXPECT_THROW(ad::concat({Node::constant(Matrix(1, 2)), Node::constant(Matrix(2, 2))}), DimensionError);
}

TEST(SliceHalves, SharedFirst) {
  auto e = Node::parameter(Matrix::row({1, 2, 3, 4}));
  const auto [ec, es] = ad::slice_halves(e);
  EXPECT_EQ(ec.value(), Matrix::row({1, 2}));
  EXPECT_EQ(es.value(), Matrix::row({3, 4}));
  EXPECT_EQ(ad::concat({ec, es}).value(), e.value());
  ad::backward(ad::sum(es));
  EXPECT_EQ(e.grad(), Matrix::row({0, 0, 1, 1}));
  EXPECT_THROW(ad::slice_halves(Node::constant(Matrix::row({1, 2, 3}))), DimensionError);
}

TEST(SqL2, ExamplesAndGradient) {
  const auto a = Node::constant(Matrix::row({3, 4}));
  EXPECT_EQ(ad::sq_l2(a, a).item(), 0.0);
  EXPECT_EQ(ad::sq_l2(a, Node::constant(Matrix::row({0, 0}))).item(), 25.0);
  EXPECT_THROW(ad::sq_l2(a, Node::constant(Matrix::row({0, 0, 0}))), DimensionError);
  Rng rng(3, 0);
  auto p = Node::parameter(uniform_matrix(1, 8, rng));
  auto q = Node::parameter(uniform_matrix(1, 8, rng));
  expect_fd([&] { return ad::sq_l2(p, q); }, {p, q}, 1e-6);
  p.zero_grad();
  q.zero_grad();
  ad::backward(ad::sq_l2(p, q));
  for (std::size_t i = 0; i < 8; ++i) {
    EXPECT_DOUBLE_EQ(p.grad()[i], 2.0 * (p.value()[i] - q.value()[i]));
    EXPECT_DOUBLE_EQ(q.grad()[i], -2.0 * (p.value()[i] - q.value()[i]));
  }
}

TEST(Backward, BaseCases) {
  auto leaf = Node::parameter(Matrix::scalar(7));
  ad::backward(leaf);
  EXPECT_EQ(leaf.grad()[0], 1.0);
  auto x = Node::parameter(Matrix::scalar(3));
  ad::backward(ad::scale(x, 2.0));
  EXPECT_EQ(x.grad()[0], 2.0);
  EXPECT_THROW(ad::backward(Node::parameter(Matrix(1, 2))), ContractError);
}

TEST(Backward, AccumulatesThroughSharedSubexpressions) {
  auto x = Node::parameter(Matrix::scalar(3));
  const auto y = ad::mul(x, x);
  ad::backward(ad::add(y, y));  // 2x^2
  EXPECT_DOUBLE_EQ(x.grad()[0], 12.0);
  ad::backward(ad::add(y, y));  // accumulation is intended
  EXPECT_DOUBLE_EQ(x.grad()[0], 24.0);
  x.zero_grad();
  ad::backward(ad::mul(y, y));
  EXPECT_DOUBLE_EQ(x.grad()[0], 4.0 * 27.0);
}

TEST(Backward, DeterministicAcrossRebuilds) {
  Rng rng(4, 0);
  const auto av = uniform_matrix(5, 3, rng);
  const auto bv = uniform_matrix(3, 3, rng);
  auto grads = [&] {
    auto a = Node::parameter(av);
    auto b = Node::parameter(bv);
    const auto h = ad::relu(ad::matmul(a, b));
    ad::backward(ad::sum(ad::logsumexp_rows(ad::matmul(h, ad::transpose(b)))));
    return std::make_pair(a.grad(), b.grad());
  };
  EXPECT_EQ(grads(), grads());
}

TEST(Backward, ConstantsGetNoGradient) {
  auto c = Node::constant(Matrix::row({1, 2}));
  auto p = Node::parameter(Matrix::row({3, 4}));
  ad::backward(ad::sum(ad::mul(c, p)));
  EXPECT_FALSE(c.requires_grad());
  EXPECT_EQ(p.grad(), Matrix::row({1, 2}));
}

TEST(StableOps, CrossEntropyPrecision) {
  const auto ce = ad::softmax_cross_entropy(Node::constant(Matrix::row({10, -10})), std::vector<std::size_t>{0});
  EXPECT_NEAR(ce.item() / std::log1p(std::exp(-20.0)), 1.0, 1e-12);
  const auto big = ad::logsumexp_rows(Node::constant(Matrix::row({1000, 1000})));
  EXPECT_NEAR(big.item(), 1000.0 + std::log(2.0), 1e-9);
  const auto uniform = ad::softmax_cross_entropy(Node::constant(Matrix(1, 7)), std::vector<std::size_t>{3});
  EXPECT_NEAR(uniform.item(), std::log(7.0), 1e-15);
}

TEST(Reductions, ZeroRowNormHasZeroGradient) {
  auto x = Node::parameter(Matrix(2, 3));
  x.mutable_value()(1, 0) = 3.0;
  x.mutable_value()(1, 1) = 4.0;
  ad::backward(ad::sum(ad::row_norms(x)));
  EXPECT_EQ(x.grad()(0, 0), 0.0);
  EXPECT_DOUBLE_EQ(x.grad()(1, 0), 0.6);
  EXPECT_TRUE(std::isfinite(ad::normalize_rows(x).value()(0, 0)));
}
