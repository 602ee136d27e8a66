#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numbers>

#include "oracles.hpp"
#include "simmdg/losses.hpp"

using namespace simmdg;
using ad::Node;

namespace {

ModelConfig tiny() {
  ModelConfig c;
  c.input_dims = {5, 3, 4};
  c.embed_dim = 3;
  c.encoder_hidden = 5;
  c.proj_hidden = 4;
  c.proj_dim = 3;
  c.trans_hidden = 4;
  c.num_classes = 3;
  return c;
}

ContrastiveBatch batch_of(const Matrix& z, std::vector<std::size_t> labels, double tau) {
  return {Node::constant(z), std::move(labels), tau};
}

SplitEmbedding split_of(std::vector<double> shared, std::vector<double> specific, std::size_t k = 0) {
  SplitEmbedding e;
  e.shared = Node::constant(Matrix::row(std::move(shared)));
  e.specific = Node::constant(Matrix::row(std::move(specific)));
  e.full = ad::concat({e.shared, e.specific});
  e.modality = k;
  return e;
}

struct WarningCapture {
  std::vector<std::string> seen;
  log::Sink prev;
  WarningCapture() {
    prev = log::set_warning_sink([this](std::string_view m) { seen.emplace_back(m); });
  }
  ~WarningCapture() { log::set_warning_sink(prev); }
};

std::vector<Matrix> random_inputs(const ModelConfig& c, std::size_t n, Rng& rng) {
  std::vector<Matrix> out;
  for (auto d : c.input_dims) out.push_back(oracle::random_matrix(n, d, rng));
  return out;
}

}  // namespace

TEST(ContrastiveBatchBuild, OrderingIsSampleMajor) {
  auto cfg = tiny();
  cfg.input_dims = {5, 3};
  const ModelState s(cfg, 1);
  Rng rng(2, 0);
  const auto x = random_inputs(cfg, 2, rng);
  const auto emb = encode(s, x);
  const std::vector<std::size_t> labels{1, 0};
  const auto b = build_contrastive_batch(s, emb, labels, 0.1);
  ASSERT_EQ(b.z.shape(), (Shape{4, 3}));
  EXPECT_EQ(b.labels, (std::vector<std::size_t>{1, 1, 0, 0}));
  // [s1m1, s1m2, s2m1, s2m2]
  for (std::size_t j = 0; j < 2; ++j)
    for (std::size_t k = 0; k < 2; ++k) {
      const auto single = project(s, Node::constant(Matrix::from_rows({std::vector<double>(
                                         emb[k].shared.value().row_span(j).begin(),
                                         emb[k].shared.value().row_span(j).end())})));
      for (std::size_t c = 0; c < 3; ++c) EXPECT_DOUBLE_EQ(b.z.value()(j * 2 + k, c), single.value()(0, c));
    }
}

TEST(ContrastiveBatchBuild, SingleSampleAndRagged) {
  const auto cfg = tiny();
  const ModelState s(cfg, 1);
  Rng rng(3, 0);
  const auto emb = encode(s, random_inputs(cfg, 1, rng));
  const std::vector<std::size_t> one{2};
  const auto b = build_contrastive_batch(s, emb, one, 0.1);
  EXPECT_EQ(b.labels, (std::vector<std::size_t>{2, 2, 2}));
  const std::vector<std::size_t> two{2, 1};
  EXPECT_THROW(build_contrastive_batch(s, emb, two, 0.1), DimensionError);
}

TEST(SupCon, PairIsZero) {
  const auto b = batch_of(Matrix::from_rows({{1, 2, 3}, {-1, 0, 4}}), {0, 0}, 0.1);
  EXPECT_NEAR(supervised_contrastive_loss(b).item(), 0.0, 1e-15);
}

TEST(SupCon, HandDerivedCase) {
  const auto b = batch_of(Matrix::from_rows({{1, 0}, {1, 0}, {0, 1}, {0, 1}}), {0, 0, 1, 1}, 1.0);
  const double expected = 4.0 * (std::log(std::numbers::e + 2.0) - 1.0);
  EXPECT_NEAR(supervised_contrastive_loss(b).item(), expected, 1e-12);
  EXPECT_NEAR(expected, 2.205779, 1e-6);
}

TEST(SupCon, MatchesDoubleLoopOracle) {
  Rng rng(11, 0);
  for (int t = 0; t < 100; ++t) {
    const auto n = 1 + rng.below(6), m = 1 + rng.below(3), classes = 1 + rng.below(4);
    std::vector<std::size_t> labels;
    for (std::size_t j = 0; j < n; ++j) {
      const auto y = rng.below(classes);
      for (std::size_t k = 0; k < m; ++k) labels.push_back(y);
    }
    const auto z = oracle::random_matrix(n * m, 1 + rng.below(5), rng);
    const double tau = 0.05 + rng.uniform();
    WarningCapture quiet;
    const double got = supervised_contrastive_loss(batch_of(z, labels, tau)).item();
    EXPECT_NEAR(got, oracle::supcon(z, labels, tau), 1e-10) << "trial " << t;
  }
}

TEST(SupCon, PermutationInvariant) {
  Rng rng(12, 0);
  const auto z = oracle::random_matrix(9, 4, rng);
  std::vector<std::size_t> labels{0, 0, 0, 1, 1, 1, 2, 2, 0};
  const double base = supervised_contrastive_loss(batch_of(z, labels, 0.1)).item();
  for (int t = 0; t < 10; ++t) {
    std::vector<std::size_t> perm(9);
    std::iota(perm.begin(), perm.end(), 0);
    rng.shuffle(std::span(perm));
    Matrix zp(9, 4);
    std::vector<std::size_t> lp(9);
    for (std::size_t i = 0; i < 9; ++i) {
      lp[i] = labels[perm[i]];
      for (std::size_t c = 0; c < 4; ++c) zp(i, c) = z(perm[i], c);
    }
    EXPECT_NEAR(supervised_contrastive_loss(batch_of(zp, lp, 0.1)).item(), base, 1e-12);
  }
}

TEST(SupCon, PositivesAttract) {
  auto z = Node::parameter(Matrix::from_rows({{1.0, 0.2}, {0.1, 1.0}}));
  const auto angle = [](const Matrix& m) {
    const double dot = m(0, 0) * m(1, 0) + m(0, 1) * m(1, 1);
    return std::acos(dot / (std::hypot(m(0, 0), m(0, 1)) * std::hypot(m(1, 0), m(1, 1))));
  };
  // a third entry of another class keeps the denominator non-trivial
  auto other = Node::constant(Matrix::from_rows({{-1.0, 0.5}}));
  const auto loss = [&] {
    return supervised_contrastive_loss({ad::vstack({z, other}), {0, 0, 1}, 0.5});
  };
  const double before = angle(z.value());
  WarningCapture quiet;
  ad::backward(loss());
  auto& v = z.mutable_value();
  for (std::size_t i = 0; i < v.size(); ++i) v[i] -= 1e-2 * z.grad()[i];
  EXPECT_LT(angle(z.value()), before);
}

TEST(SupCon, SkipsAnchorsWithoutPositives) {
  WarningCapture cap;
  const auto b = batch_of(Matrix::from_rows({{1, 0}, {1, 0}, {0, 1}}), {0, 0, 1}, 1.0);
  const double got = supervised_contrastive_loss(b).item();
  EXPECT_EQ(cap.seen.size(), 1u);
  EXPECT_NEAR(got, oracle::supcon(b.z.value(), b.labels, 1.0), 1e-12);
  EXPECT_THROW(supervised_contrastive_loss(batch_of(Matrix(2, 2, 1.0), {0, 0}, 0.0)), ConfigError);
}

TEST(SupCon, GradientMatchesFiniteDifferences) {
  Rng rng(13, 0);
  auto z = Node::parameter(oracle::random_matrix(8, 3, rng));
  const std::vector<std::size_t> labels{0, 0, 1, 1, 2, 2, 0, 1};
  const auto r = oracle::check_gradients([&] { return supervised_contrastive_loss({z, labels, 0.3}); }, {z});
  EXPECT_LT(r.max_rel, 1e-6);
}

TEST(Distance, Examples) {
  EXPECT_EQ(distance_loss({split_of({1, 2}, {1, 2})}).item(), 0.0);
  EXPECT_DOUBLE_EQ(distance_loss({split_of({0, 0}, {1, 1}, 0), split_of({0, 0}, {2, 0}, 1)}).item(), -3.0);
  EXPECT_DOUBLE_EQ(distance_loss({split_of({0, 0}, {3, 4})}).item(), -25.0);
  EXPECT_DOUBLE_EQ(distance_loss({split_of({0, 0}, {3, -4})}, DistanceKind::neg_l1).item(), -7.0);
  EXPECT_NEAR(distance_loss({split_of({1, 0}, {1, 0}), split_of({1, 0}, {0, 2})}, DistanceKind::cosine).item(), 0.5,
              1e-8);
  EXPECT_EQ(distance_loss({split_of({0, 0}, {1, 1})}, DistanceKind::cosine).item(), 0.0);
  EXPECT_THROW(distance_loss({}), ContractError);
}

TEST(Distance, ScalingTheGapDecreasesLoss) {
  Rng rng(14, 0);
  const auto ec = oracle::random_matrix(1, 4, rng);
  const auto d = oracle::random_matrix(1, 4, rng);
  double prev = 1.0;
  for (double c : {1.0, 1.5, 2.0, 4.0}) {
    Matrix es = ec;
    for (std::size_t i = 0; i < 4; ++i) es[i] += c * d[i];
    SplitEmbedding e;
    e.shared = Node::constant(ec);
    e.specific = Node::constant(es);
    const double v = distance_loss({e}).item();
    EXPECT_LT(v, prev);
    prev = v;
  }
}

TEST(Distance, ParseNames) {
  EXPECT_EQ(parse_distance_kind("neg-sq-l2"), DistanceKind::neg_sq_l2);
  EXPECT_EQ(parse_distance_kind("l1"), DistanceKind::neg_l1);
  EXPECT_EQ(parse_distance_kind("cosine"), DistanceKind::cosine);
  EXPECT_THROW(parse_distance_kind("hamming"), ConfigError);
}

TEST(Translation, IdentityTranslatorsOnEqualEmbeddingsGiveZero) {
  auto cfg = tiny();
  cfg.input_dims = {2, 2};
  cfg.embed_dim = 1;
  cfg.trans_hidden = 2;
  ModelState s(cfg, 0);
  // relu(x W1) W2 ... with positive inputs: make each translator the identity
  for (std::size_t i = 0; i < 2; ++i) {
    auto& mlp = s.translator(i, 1 - i);
    for (std::size_t l = 0; l < mlp.layers.size(); ++l) {
      auto w = mlp.layers[l].weight;
      auto& v = w.mutable_value();
      for (std::size_t r = 0; r < v.rows(); ++r)
        for (std::size_t c = 0; c < v.cols(); ++c) v(r, c) = r == c ? 1.0 : 0.0;
    }
  }
  const auto e = Node::constant(Matrix::from_rows({{0.5, 2.0}, {1.0, 0.25}}));
  EXPECT_EQ(translation_loss(s, std::vector<Node>{e, e}).item(), 0.0);
}

TEST(Translation, MatchesDoubleLoopOracle) {
  const auto cfg = tiny();
  const ModelState s(cfg, 4);
  Rng rng(15, 0);
  std::vector<Node> full;
  for (int k = 0; k < 3; ++k) full.push_back(Node::constant(oracle::random_matrix(4, 6, rng)));
  double ref = 0.0;
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t j = 0; j < 3; ++j) {
      if (i == j) continue;
      const auto t = s.translator(i, j)(full[i]).value();
      for (std::size_t r = 0; r < 4; ++r)
        for (std::size_t c = 0; c < 6; ++c) ref += std::pow(t(r, c) - full[j].value()(r, c), 2);
    }
  ref /= 3.0 * 2.0 * 4.0;
  EXPECT_NEAR(translation_loss(s, full).item(), ref, 1e-10);
  EXPECT_THROW(translation_loss(s, std::vector<Node>{full[0]}), ContractError);
}

TEST(Translation, TwoModalityArithmetic) {
  // 1/(M(M-1)) scaling: per-direction squared errors of 2 average to 2
  auto cfg = tiny();
  cfg.input_dims = {2, 2};
  cfg.embed_dim = 1;
  ModelState s(cfg, 0);
  for (std::size_t i = 0; i < 2; ++i)
    for (auto& l : s.translator(i, 1 - i).layers) {
      auto w = l.weight;
      w.mutable_value().fill(0.0);
    }
  // translators output 0, targets have squared norm 2
  const auto a = Node::constant(Matrix::row({1, 1}));
  const auto b = Node::constant(Matrix::row({1, -1}));
  EXPECT_DOUBLE_EQ(translation_loss(s, std::vector<Node>{a, b}).item(), 2.0);
}

TEST(Translation, TargetsAreNotDetached) {
  const auto cfg = tiny();
  const ModelState s(cfg, 4);
  Rng rng(16, 0);
  const auto x = random_inputs(cfg, 3, rng);
  const auto emb = encode(s, x);
  s.zero_grad();
  ad::backward(translation_loss(s, emb));
  bool enc = false;
  for (const auto& p : s.parameter_nodes(ParamGroup::encoder))
    for (double g : p.grad().values()) enc |= g != 0.0;
  EXPECT_TRUE(enc);
}

TEST(Classification, Examples) {
  const std::vector<std::size_t> y0{0};
  EXPECT_NEAR(classification_loss(Node::constant(Matrix(1, 5)), y0).item(), std::log(5.0), 1e-15);
  EXPECT_NEAR(classification_loss(Node::constant(Matrix::row({10, -10})), y0).item(), 2.06e-9, 1e-11);
  const std::vector<std::size_t> bad{5};
  EXPECT_THROW(classification_loss(Node::constant(Matrix(1, 5)), bad), IndexError);
}

TEST(Classification, GradientIsSoftmaxMinusOneHot) {
  auto logits = Node::parameter(Matrix::from_rows({{0.3, -1.0, 2.0}, {1.0, 1.0, 0.0}}));
  const std::vector<std::size_t> y{2, 0};
  ad::backward(classification_loss(logits, y));
  for (std::size_t r = 0; r < 2; ++r) {
    double z = 0.0;
    for (std::size_t c = 0; c < 3; ++c) z += std::exp(logits.value()(r, c));
    for (std::size_t c = 0; c < 3; ++c) {
      const double want = (std::exp(logits.value()(r, c)) / z - (c == y[r] ? 1.0 : 0.0)) / 2.0;
      EXPECT_NEAR(logits.grad()(r, c), want, 1e-15);
    }
  }
  logits.zero_grad();
  EXPECT_LT(oracle::check_gradients([&] { return classification_loss(logits, y); }, {logits}).max_rel, 1e-6);
}

TEST(Total, Arithmetic) {
  LossTerms t{Node::constant(Matrix::scalar(1)), Node::constant(Matrix::scalar(2)), Node::constant(Matrix::scalar(-3)),
              Node::constant(Matrix::scalar(4))};
  EXPECT_DOUBLE_EQ(total_loss(t, {3.0, 0.7, 0.1}, {true, true, true, true}).item(), 5.3);
  EXPECT_EQ(total_loss(t, {0.0, 0.0, 0.0}, {true, true, true, true}).item(), 1.0);
}

TEST(Total, CtOffMatchesZeroWeightBitExactly) {
  const auto cfg_on = tiny();
  auto cfg_off = tiny();
  cfg_off.toggles.ct = false;
  const ModelState on(cfg_on, 3), off(cfg_off, 3);
  Rng rng(17, 0);
  const auto x = random_inputs(cfg_on, 4, rng);
  const std::vector<std::size_t> y{0, 1, 2, 0};
  ObjectiveSettings zero_trans;
  zero_trans.weights.alpha_trans = 0.0;
  const auto a = compute_objective(off, x, y, {});
  const auto b = compute_objective(on, x, y, zero_trans);
  EXPECT_FALSE(a.terms.trans.has_value());
  EXPECT_EQ(a.total.item(), b.total.item());
}

TEST(Total, DisabledTermsBuildNothing) {
  auto cfg = tiny();
  cfg.toggles = {false, false, false, false};
  const ModelState s(cfg, 3);
  Rng rng(18, 0);
  const auto x = random_inputs(cfg, 2, rng);
  const std::vector<std::size_t> y{0, 1};
  const auto o = compute_objective(s, x, y, {});
  EXPECT_FALSE(o.terms.con || o.terms.dis || o.terms.trans);
  EXPECT_TRUE(o.total.same_node(o.terms.cls));
}

TEST(Total, GradientOverEveryParameter) {
  const auto cfg = tiny();
  const ModelState s(cfg, 21);
  Rng rng(19, 0);
  // nonzero biases keep every unit and every projected row away from zero
  for (auto p : s.parameter_nodes())
    for (auto& v : p.mutable_value().values()) v += 0.3 * rng.normal();
  const auto x = random_inputs(cfg, 4, rng);
  const std::vector<std::size_t> y{0, 1, 1, 2};
  ObjectiveSettings set;
  set.tau = 0.5;
  for (auto kind : {DistanceKind::neg_sq_l2, DistanceKind::neg_l1, DistanceKind::cosine}) {
    set.distance = kind;
    const auto r = oracle::check_gradients([&] { return compute_objective(s, x, y, set).total; }, s.parameter_nodes());
    EXPECT_LT(r.max_rel, 1e-4) << to_string(kind);
  }
}
