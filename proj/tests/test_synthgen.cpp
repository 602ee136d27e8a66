#include <gtest/gtest.h>

#include <cmath>
#include <numbers>
#include <sstream>

#include "simmdg/analysis.hpp"
#include "simmdg/synthgen.hpp"

using namespace simmdg;

namespace {

GeneratorConfig small_cfg(std::uint64_t seed = 7) {
  GeneratorConfig c;
  c.seed = seed;
  return c;
}

bool is_identity(const Matrix& m) {
  for (std::size_t i = 0; i < m.rows(); ++i)
    for (std::size_t j = 0; j < m.cols(); ++j)
      if (m(i, j) != (i == j ? 1.0 : 0.0)) return false;
  return true;
}

std::vector<double> modality_mean(const Dataset& d, std::size_t k) {
  std::vector<double> mean(d.front().modalities[k].size(), 0.0);
  for (const auto& s : d)
    for (std::size_t i = 0; i < mean.size(); ++i) mean[i] += s.modalities[k][i] / static_cast<double>(d.size());
  return mean;
}

}  // namespace

TEST(Generator, SameSeedSameParameters) {
  const Generator a(small_cfg()), b(small_cfg());
  EXPECT_EQ(a.shared_means(), b.shared_means());
  for (std::size_t k = 0; k < 3; ++k) {
    EXPECT_EQ(a.mixing(k), b.mixing(k));
    EXPECT_EQ(a.specific_means(k), b.specific_means(k));
    for (std::size_t d = 0; d < 3; ++d) {
      EXPECT_EQ(a.rotation(d, k), b.rotation(d, k));
      EXPECT_EQ(a.offset(d, k), b.offset(d, k));
    }
  }
  const Generator c(small_cfg(8));
  EXPECT_FALSE(a.shared_means() == c.shared_means());
}

TEST(Generator, ZeroShiftGivesIdentityAffines) {
  auto cfg = small_cfg();
  cfg.domain_shift_scale = 0.0;
  cfg.specific_shift = 1.0;
  const Generator g(cfg);
  for (std::size_t d = 0; d < 3; ++d)
    for (std::size_t k = 0; k < 3; ++k) {
      EXPECT_TRUE(is_identity(g.rotation(d, k)));
      for (double v : g.offset(d, k)) EXPECT_EQ(v, 0.0);
    }
  // with no shift every domain draws from one distribution
  Rng r0(1, 2), r1(1, 2);
  EXPECT_EQ(g.sample(0, 5, r0)[3].modalities, g.sample(2, 5, r1)[3].modalities);
}

TEST(Generator, RotationsAreOrthogonal) {
  const Generator g(small_cfg());
  const auto& r = g.rotation(1, 0);
  for (std::size_t i = 0; i < r.rows(); ++i)
    for (std::size_t j = 0; j < r.rows(); ++j) {
      double dot = 0.0;
      for (std::size_t c = 0; c < r.cols(); ++c) dot += r(i, c) * r(j, c);
      EXPECT_NEAR(dot, i == j ? 1.0 : 0.0, 1e-12);
    }
}

TEST(Generator, NoiselessObservationIsDeterministic) {
  auto cfg = small_cfg();
  cfg.noise_sigma = 0.0;
  const Generator g(cfg);
  Rng rng(3, 0);
  const auto z = g.draw_latent(2, rng);
  Rng a(10, 0), b(99, 5);
  for (std::size_t k = 0; k < 3; ++k) EXPECT_EQ(g.observe(z, 1, k, a), g.observe(z, 1, k, b));
}

TEST(Generator, InvalidConfig) {
  auto cfg = small_cfg();
  cfg.obs_dims = {32, 0, 24};
  EXPECT_THROW(Generator{cfg}, ConfigError);
  cfg = small_cfg();
  cfg.shared_fraction = {0.5, 1.5, 0.5};
  EXPECT_THROW(Generator{cfg}, ConfigError);
  cfg = small_cfg();
  cfg.specific_dims = {4, 4};
  EXPECT_THROW(Generator{cfg}, ConfigError);
  cfg = small_cfg();
  cfg.noise_sigma = -1.0;
  EXPECT_THROW(Generator{cfg}, ConfigError);
}

TEST(Sample, EmptyAndOutOfRange) {
  const Generator g(small_cfg());
  EXPECT_TRUE(g.sample(0, 0).empty());
  EXPECT_THROW(g.sample(3, 1), IndexError);
}

TEST(Sample, ShapesAndDeterminism) {
  const Generator g(small_cfg());
  const auto d = g.sample(1, 20);
  ASSERT_EQ(d.size(), 20u);
  for (const auto& s : d) {
    EXPECT_EQ(s.domain, 1u);
    EXPECT_LT(s.label, 7u);
    ASSERT_EQ(s.modalities.size(), 3u);
    EXPECT_EQ(s.modalities[0].size(), 32u);
    EXPECT_EQ(s.modalities[1].size(), 16u);
    EXPECT_EQ(s.modalities[2].size(), 24u);
  }
  const Generator g2(small_cfg());
  const auto d2 = g2.sample(1, 20);
  for (std::size_t i = 0; i < d.size(); ++i) {
    EXPECT_EQ(d[i].label, d2[i].label);
    EXPECT_EQ(d[i].modalities, d2[i].modalities);
  }
}

TEST(Sample, LabelCountsWithinMultinomialBound) {
  const Generator g(small_cfg());
  const auto d = g.sample(0, 700);
  std::vector<int> counts(7, 0);
  for (const auto& s : d) ++counts[s.label];
  const double p = 1.0 / 7.0, sd = std::sqrt(700 * p * (1 - p));
  for (int c : counts) EXPECT_LT(std::abs(c - 100.0), 4.0 * sd);
}

TEST(Sample, LargeShiftMovesDomainMeans) {
  auto cfg = small_cfg();
  cfg.domain_shift_scale = 6.0;
  const Generator g(cfg);
  const auto d0 = g.sample(0, 1000), d1 = g.sample(1, 1000);
  for (std::size_t k = 0; k < 3; ++k) {
    const auto m0 = modality_mean(d0, k), m1 = modality_mean(d1, k);
    double s = 0.0;
    for (std::size_t i = 0; i < m0.size(); ++i) s += (m0[i] - m1[i]) * (m0[i] - m1[i]);
    EXPECT_GT(std::sqrt(s), 10.0 * cfg.noise_sigma) << "modality " << k;
  }
}

TEST(Sample, SharedOnlyNoiselessLatentsAreLinearlySeparable) {
  auto cfg = small_cfg();
  cfg.shared_fraction = {1.0, 1.0, 1.0};
  cfg.latent_sigma = 0.0;
  cfg.noise_sigma = 0.0;
  const Generator g(cfg);
  const auto d = g.sample(0, 140);
  // nearest class centroid is a linear rule; every sample sits on its centroid
  for (std::size_t k = 0; k < 3; ++k) {
    std::vector<std::vector<double>> centroid(7);
    for (const auto& s : d)
      if (centroid[s.label].empty()) centroid[s.label] = s.modalities[k];
    for (const auto& s : d) {
      std::size_t best = 0;
      double best_d = 1e300;
      for (std::size_t c = 0; c < 7; ++c) {
        if (centroid[c].empty()) continue;
        double dist = 0.0;
        for (std::size_t i = 0; i < s.modalities[k].size(); ++i)
          dist += std::pow(s.modalities[k][i] - centroid[c][i], 2);
        if (dist < best_d) best_d = dist, best = c;
      }
      EXPECT_EQ(best, s.label);
    }
  }
}

TEST(Dump, RoundTripsAtNineDigits) {
  const auto cfg = small_cfg();
  const auto d = Generator(cfg).sample(2, 6);
  std::stringstream ss;
  write_dataset(ss, cfg, d);
  const auto text = ss.str();
  EXPECT_NE(text.find("# seed = 7"), std::string::npos);
  EXPECT_NE(text.find("# rng = "), std::string::npos);
  const auto back = read_dataset(ss);
  ASSERT_EQ(back.size(), d.size());
  for (std::size_t i = 0; i < d.size(); ++i) {
    EXPECT_EQ(back[i].label, d[i].label);
    EXPECT_EQ(back[i].domain, d[i].domain);
    for (std::size_t k = 0; k < 3; ++k)
      for (std::size_t j = 0; j < d[i].modalities[k].size(); ++j)
        EXPECT_NEAR(back[i].modalities[k][j], d[i].modalities[k][j], 1e-8 * (1 + std::abs(d[i].modalities[k][j])));
  }
  std::istringstream bad("0 1 | 1.0 x\n");
  EXPECT_THROW(read_dataset(bad), LoadError);
}

TEST(InfoGapJoint, OneBitVersusZero) {
  const auto j = build_info_gap_joint(1.0, 0.0);
  ASSERT_EQ(j.support.size(), 8u);
  for (std::size_t i = 0; i < 8; ++i) {
    if (j.support[i][0] != j.support[i][2]) {
      EXPECT_EQ(j.probs[i], 0.0);
    }
  }
  const std::array<std::size_t, 1> x1{0}, x2{1}, y{2};
  EXPECT_NEAR(mutual_information(j, x1, y), std::numbers::ln2, 1e-9);
  EXPECT_NEAR(mutual_information(j, x2, y), 0.0, 1e-12);
}

TEST(InfoGapJoint, TargetsAndIndependence) {
  const std::array<std::size_t, 1> x1{0}, x2{1}, y{2};
  for (auto [hi, lo] : {std::pair{0.7, 0.2}, {0.5, 0.5}, {1.0, 1.0}, {0.3, 0.0}}) {
    const auto j = build_info_gap_joint(hi, lo);
    EXPECT_NEAR(mutual_information(j, x1, y), hi * std::numbers::ln2, 1e-9);
    EXPECT_NEAR(mutual_information(j, x2, y), lo * std::numbers::ln2, 1e-9);
    // I(x1; x2 | y) = H(x1,y) + H(x2,y) - H(x1,x2,y) - H(y)
    const std::array<std::size_t, 2> x1y{0, 2}, x2y{1, 2};
    const std::array<std::size_t, 3> all{0, 1, 2};
    EXPECT_NEAR(entropy(j, x1y) + entropy(j, x2y) - entropy(j, all) - entropy(j, y), 0.0, 1e-12);
  }
}

TEST(InfoGapJoint, Infeasible) {
  EXPECT_THROW(build_info_gap_joint(0.2, 0.5), ConstructionError);
  EXPECT_THROW(build_info_gap_joint(1.5, 0.0), ConstructionError);
  EXPECT_THROW(build_info_gap_joint(0.5, -0.1), ConstructionError);
}

TEST(DiscreteJointType, Validation) {
  DiscreteJoint j{{{0, 0}, {1, 1}}, {0.5, 0.6}};
  EXPECT_THROW(j.validate(), ContractError);
  j.normalize();
  EXPECT_NO_THROW(j.validate());
  DiscreteJoint neg{{{0, 0}, {1, 1}}, {1.5, -0.5}};
  EXPECT_THROW(neg.validate(), ContractError);
  Rng rng(5, 0);
  for (int t = 0; t < 20; ++t) EXPECT_NO_THROW(random_joint(2, 3, rng).validate());
}
