#include "tally/sampling.hpp"

#include <gtest/gtest.h>

#include <map>
#include <vector>

#include "support/statcheck.hpp"

using namespace tally;

namespace {

struct Tagged {
  std::uint32_t label;
  std::uint32_t domain;
};

std::vector<Tagged> make_examples(
    const std::vector<std::vector<std::size_t>>& counts_by_class_domain) {
  std::vector<Tagged> out;
  for (std::size_t c = 0; c < counts_by_class_domain.size(); ++c) {
    for (std::size_t d = 0; d < counts_by_class_domain[c].size(); ++d) {
      for (std::size_t i = 0; i < counts_by_class_domain[c][d]; ++i) {
        out.push_back({static_cast<std::uint32_t>(c),
                       static_cast<std::uint32_t>(d)});
      }
    }
  }
  return out;
}

}  // namespace

TEST(GroupIndex, PartitionInvariants) {
  auto ex = make_examples({{3, 1}, {0, 2}});
  GroupIndex idx = GroupIndex::build(ex, 2, 2);
  EXPECT_EQ(idx.total, 6u);
  EXPECT_EQ(idx.cell_count(0, 0), 3u);
  EXPECT_EQ(idx.cell_count(1, 0), 0u);
  std::size_t sum = 0;
  for (std::size_t c = 0; c < 2; ++c) {
    for (std::size_t d = 0; d < 2; ++d) sum += idx.cell_count(c, d);
  }
  EXPECT_EQ(sum, idx.total);
  EXPECT_EQ(idx.by_class[0].size(), 4u);
  EXPECT_EQ(idx.by_domain[1].size(), 3u);
  EXPECT_TRUE(idx.every_class_nonempty());
  EXPECT_TRUE(idx.every_domain_nonempty());
}

TEST(DrawPair, DegenerateSingleCellUniformOverOrderedPairs) {
  auto ex = make_examples({{3}});
  GroupIndex idx = GroupIndex::build(ex, 1, 1);
  for (SamplerStrategy strat :
       {SamplerStrategy::selective, SamplerStrategy::group_balanced,
        SamplerStrategy::empirical, SamplerStrategy::algorithm1_uniform}) {
    Rng rng(100 + static_cast<int>(strat));
    std::vector<std::size_t> counts(9, 0);
    const std::size_t draws = 18000;
    for (std::size_t k = 0; k < draws; ++k) {
      auto [i, j] = draw_pair(idx, strat, rng);
      ++counts[i * 3 + j];
    }
    EXPECT_GT(testsupport::chi2_uniform_pvalue(counts), 0.001)
        << sampler_name(strat);
  }
}

TEST(DrawPair, SelectiveClassMarginalIsUniform) {
  // one domain, class counts {90, 10}
  auto ex = make_examples({{90}, {10}});
  GroupIndex idx = GroupIndex::build(ex, 2, 1);
  Rng rng(7);
  std::size_t minority = 0;
  const std::size_t draws = 10000;
  for (std::size_t k = 0; k < draws; ++k) {
    auto [i, j] = draw_pair(idx, SamplerStrategy::selective, rng);
    if (ex[i].label == 1) ++minority;
  }
  EXPECT_NEAR(static_cast<double>(minority) / draws, 0.5, 0.02);
}

TEST(DrawPair, SelectiveDomainMarginalIsUniform) {
  // one class, domain sizes {100, 10, 1}
  auto ex = make_examples({{100, 10, 1}});
  GroupIndex idx = GroupIndex::build(ex, 1, 3);
  Rng rng(11);
  std::vector<std::size_t> domain_counts(3, 0);
  const std::size_t draws = 10000;
  for (std::size_t k = 0; k < draws; ++k) {
    auto [i, j] = draw_pair(idx, SamplerStrategy::selective, rng);
    ++domain_counts[ex[j].domain];
  }
  for (std::size_t d = 0; d < 3; ++d) {
    EXPECT_NEAR(static_cast<double>(domain_counts[d]) / draws, 1.0 / 3.0, 0.02);
  }
  EXPECT_GT(testsupport::chi2_uniform_pvalue(domain_counts), 0.001);
}

// chi-square marginals at significance 0.001 with 10^4 draws on an imbalanced
// multi-domain layout.
TEST(DrawPair, SelectiveMarginalsChiSquare) {
  auto ex = make_examples({{50, 5}, {20, 1}, {3, 40}});
  GroupIndex idx = GroupIndex::build(ex, 3, 2);
  Rng rng(13);
  std::vector<std::size_t> class_counts(3, 0), domain_counts(2, 0);
  for (std::size_t k = 0; k < 10000; ++k) {
    auto [i, j] = draw_pair(idx, SamplerStrategy::selective, rng);
    ++class_counts[ex[i].label];
    ++domain_counts[ex[j].domain];
  }
  EXPECT_GT(testsupport::chi2_uniform_pvalue(class_counts), 0.001);
  EXPECT_GT(testsupport::chi2_uniform_pvalue(domain_counts), 0.001);
}

// Given y_i, the domain of i follows the empirical conditional P(d | y) of
// the training set.
TEST(DrawPair, SelectiveConditionalFollowsEmpirical) {
  auto ex = make_examples({{30, 10}, {5, 15}});
  GroupIndex idx = GroupIndex::build(ex, 2, 2);
  Rng rng(17);
  std::size_t y0 = 0, y0_d0 = 0, y1 = 0, y1_d0 = 0;
  std::size_t jc0 = 0, jc0_all = 0;
  for (std::size_t k = 0; k < 20000; ++k) {
    auto [i, j] = draw_pair(idx, SamplerStrategy::selective, rng);
    if (ex[i].label == 0) {
      ++y0;
      if (ex[i].domain == 0) ++y0_d0;
    } else {
      ++y1;
      if (ex[i].domain == 0) ++y1_d0;
    }
    // symmetric check for j: class conditional within the drawn domain
    if (ex[j].domain == 0) {
      ++jc0_all;
      if (ex[j].label == 0) ++jc0;
    }
  }
  EXPECT_NEAR(static_cast<double>(y0_d0) / y0, 30.0 / 40.0, 0.03);
  EXPECT_NEAR(static_cast<double>(y1_d0) / y1, 5.0 / 20.0, 0.03);
  EXPECT_NEAR(static_cast<double>(jc0) / jc0_all, 30.0 / 35.0, 0.03);
}

TEST(DrawPair, GroupBalancedJointUniformOverNonemptyCells) {
  auto ex = make_examples({{50, 5}, {20, 1}, {3, 40}});
  GroupIndex idx = GroupIndex::build(ex, 3, 2);
  Rng rng(19);
  std::vector<std::size_t> cell_counts(6, 0);
  for (std::size_t k = 0; k < 10000; ++k) {
    auto [i, j] = draw_pair(idx, SamplerStrategy::group_balanced, rng);
    cell_counts[ex[i].label * 2 + ex[i].domain]++;
  }
  EXPECT_GT(testsupport::chi2_uniform_pvalue(cell_counts), 0.001);
}

TEST(DrawPair, EmptyCellsAreRejectedAndResampled) {
  // cell (1,1) empty; joint draws must spread uniformly over the 3 others
  auto ex = make_examples({{10, 10}, {10, 0}});
  GroupIndex idx = GroupIndex::build(ex, 2, 2);
  for (SamplerStrategy strat : {SamplerStrategy::group_balanced,
                                SamplerStrategy::algorithm1_uniform}) {
    Rng rng(23 + static_cast<int>(strat));
    std::vector<std::size_t> cell_counts(3, 0);
    for (std::size_t k = 0; k < 9000; ++k) {
      auto [i, j] = draw_pair(idx, strat, rng);
      const std::size_t cell = ex[i].label * 2 + ex[i].domain;
      ASSERT_NE(cell, 3u);
      ++cell_counts[cell >= 3 ? 2 : cell];
    }
    EXPECT_GT(testsupport::chi2_uniform_pvalue(cell_counts), 0.001)
        << sampler_name(strat);
  }
}

TEST(DrawPair, SelectivePreconditionViolation) {
  // domain 1 entirely empty
  auto ex = make_examples({{5, 0}, {5, 0}});
  GroupIndex idx = GroupIndex::build(ex, 2, 2);
  Rng rng(29);
  EXPECT_THROW(draw_pair(idx, SamplerStrategy::selective, rng),
               std::invalid_argument);
}

TEST(DrawPair, DeterministicPerSeed) {
  auto ex = make_examples({{50, 5}, {20, 1}, {3, 40}});
  GroupIndex idx = GroupIndex::build(ex, 3, 2);
  for (SamplerStrategy strat :
       {SamplerStrategy::selective, SamplerStrategy::group_balanced,
        SamplerStrategy::empirical, SamplerStrategy::algorithm1_uniform}) {
    Rng a(31), b(31), c(32);
    bool any_diff = false;
    for (int k = 0; k < 200; ++k) {
      auto pa = draw_pair(idx, strat, a);
      auto pb = draw_pair(idx, strat, b);
      auto pc = draw_pair(idx, strat, c);
      EXPECT_EQ(pa, pb);
      any_diff = any_diff || pa != pc;
    }
    EXPECT_TRUE(any_diff) << sampler_name(strat);
  }
}

TEST(WarmstartBatch, MultinomialFrequencies) {
  auto ex = make_examples({{4}, {3}, {3}});
  GroupIndex idx = GroupIndex::build(ex, 3, 1);
  Rng rng(37);
  const std::size_t n = idx.total;
  const std::size_t rounds = 3000;
  std::vector<std::size_t> counts(n, 0);
  for (std::size_t r = 0; r < rounds; ++r) {
    for (std::size_t id : draw_warmstart_batch(idx, n, rng)) {
      ++counts[id];
    }
  }
  const double total = static_cast<double>(rounds * n);
  const double p = 1.0 / static_cast<double>(n);
  const double sigma = std::sqrt(p * (1.0 - p) / total);
  for (std::size_t i = 0; i < n; ++i) {
    EXPECT_NEAR(static_cast<double>(counts[i]) / total, p, 3.0 * sigma + 1e-3);
  }
}

TEST(WarmstartBatch, SingletonDatasetAndDeterminism) {
  auto ex = make_examples({{1}});
  GroupIndex idx = GroupIndex::build(ex, 1, 1);
  Rng rng(41);
  auto batch = draw_warmstart_batch(idx, 1, rng);
  ASSERT_EQ(batch.size(), 1u);
  EXPECT_EQ(batch[0], 0u);

  GroupIndex empty;
  empty.num_classes = 1;
  empty.num_domains = 1;
  Rng rng2(43);
  EXPECT_THROW(draw_warmstart_batch(empty, 4, rng2), std::invalid_argument);

  auto ex2 = make_examples({{9, 3}});
  GroupIndex idx2 = GroupIndex::build(ex2, 1, 2);
  Rng s1(47), s2(47);
  EXPECT_EQ(draw_warmstart_batch(idx2, 32, s1),
            draw_warmstart_batch(idx2, 32, s2));
}
