#include "tally/prototypes.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <vector>

#include "tally/augmentation.hpp"

using namespace tally;

namespace {

Decomposition dec_of(const std::vector<double>& vals, std::size_t c,
                     std::size_t h, std::size_t w) {
  return disentangle(Tensor::from({c, h, w}, vals));
}

}  // namespace

TEST(PrototypeBank, SingleExampleEstimateIsThatExample) {
  PrototypeBank bank(2, 2, 1, 2, 2, 0.8);
  Decomposition dec = dec_of({1, 3, 1, 3}, 1, 2, 2);
  bank.accumulate(dec, 0, 1);
  EXPECT_EQ(bank.epoch_count_class(0), 1u);
  EXPECT_EQ(bank.epoch_count_domain(1), 1u);
  bank.commit_epoch();  // bootstrap: estimate becomes the entry
  Tensor r = bank.class_prototype(0);
  for (std::size_t i = 0; i < 4; ++i) {
    EXPECT_NEAR(r[i], dec.z[i], 1e-15);
  }
  EXPECT_NEAR(bank.domain_mu(1)[0], dec.mu[0], 1e-15);
  EXPECT_NEAR(bank.domain_sigma(1)[0], dec.sigma[0], 1e-15);
}

TEST(PrototypeBank, TwoExamplesAverage) {
  PrototypeBank bank(1, 1, 1, 2, 2, 0.8);
  Decomposition a = dec_of({0, 2, 0, 2}, 1, 2, 2);
  Decomposition b = dec_of({5, 5, 1, 1}, 1, 2, 2);
  bank.accumulate(a, 0, 0);
  bank.accumulate(b, 0, 0);
  bank.commit_epoch();
  Tensor r = bank.class_prototype(0);
  for (std::size_t i = 0; i < 4; ++i) {
    EXPECT_NEAR(r[i], 0.5 * (a.z[i] + b.z[i]), 1e-15);
  }
  EXPECT_NEAR(bank.domain_mu(0)[0], 0.5 * (a.mu[0] + b.mu[0]), 1e-15);
}

TEST(PrototypeBank, OutOfRangeThrows) {
  PrototypeBank bank(2, 2, 1, 2, 2, 0.8);
  Decomposition dec = dec_of({1, 2, 3, 4}, 1, 2, 2);
  EXPECT_THROW(bank.accumulate(dec, 2, 0), std::invalid_argument);
  EXPECT_THROW(bank.accumulate(dec, 0, 5), std::invalid_argument);
}

TEST(PrototypeBank, FullEpochMatchesTwoPassOracle) {
  Rng rng(71);
  const std::size_t classes = 3, domains = 2, c = 2, h = 3, w = 3;
  PrototypeBank bank(classes, domains, c, h, w, 0.8);
  struct Item {
    Decomposition dec;
    std::size_t y, d;
  };
  std::vector<Item> items;
  for (std::size_t i = 0; i < 40; ++i) {
    Tensor s = Tensor::random_uniform({c, h, w}, rng, -2.0, 2.0);
    items.push_back(
        {disentangle(s), rng.uniform_index(classes), rng.uniform_index(domains)});
    bank.accumulate(items.back().dec, items.back().y, items.back().d);
  }
  bank.commit_epoch();  // bootstrap commit = plain average

  for (std::size_t cls = 0; cls < classes; ++cls) {
    std::vector<double> sum(c * h * w, 0.0);
    std::size_t count = 0;
    for (const Item& it : items) {
      if (it.y != cls) continue;
      for (std::size_t i = 0; i < sum.size(); ++i) sum[i] += it.dec.z[i];
      ++count;
    }
    ASSERT_GT(count, 0u);
    Tensor r = bank.class_prototype(cls);
    for (std::size_t i = 0; i < sum.size(); ++i) {
      EXPECT_NEAR(r[i], sum[i] / count, 1e-12);
    }
  }
  for (std::size_t d = 0; d < domains; ++d) {
    std::vector<double> mu_sum(c, 0.0), sig_sum(c, 0.0);
    std::size_t count = 0;
    for (const Item& it : items) {
      if (it.d != d) continue;
      for (std::size_t i = 0; i < c; ++i) {
        mu_sum[i] += it.dec.mu[i];
        sig_sum[i] += it.dec.sigma[i];
      }
      ++count;
    }
    ASSERT_GT(count, 0u);
    for (std::size_t i = 0; i < c; ++i) {
      EXPECT_NEAR(bank.domain_mu(d)[i], mu_sum[i] / count, 1e-12);
      EXPECT_NEAR(bank.domain_sigma(d)[i], sig_sum[i] / count, 1e-12);
    }
  }
}

// gamma=0.8, zero init, constant estimate 1: 0.2, 0.36, 0.488 (bootstrap off).
TEST(PrototypeBank, GeometricEmaPattern) {
  PrototypeBank bank(1, 1, 1, 1, 2, 0.8, /*bootstrap_first_commit=*/false);
  auto feed_unit_z = [&]() {
    // sigma normalisation makes z = {-1, 1} up to eps; feed a synthetic
    // decomposition directly instead so the estimate is exactly 1.
    Decomposition dec;
    dec.z = Tensor::from({1, 1, 2}, {1.0, 1.0});
    dec.mu = Tensor::from({1}, {1.0});
    dec.sigma = Tensor::from({1}, {1.0});
    bank.accumulate(dec, 0, 0);
  };
  const std::vector<double> expected = {0.2, 0.36, 0.488};
  for (double e : expected) {
    feed_unit_z();
    bank.commit_epoch();
    EXPECT_NEAR(bank.class_prototype(0)[0], e, 1e-12);
    EXPECT_NEAR(bank.domain_mu(0)[0], e, 1e-12);
  }
}

TEST(PrototypeBank, ConstantEstimateIsFixedPointWithGeometricApproach) {
  PrototypeBank bank(1, 1, 1, 1, 2, 0.8);
  Decomposition dec;
  dec.z = Tensor::from({1, 1, 2}, {3.0, 3.0});
  dec.mu = Tensor::from({1}, {3.0});
  dec.sigma = Tensor::from({1}, {3.0});
  bank.accumulate(dec, 0, 0);
  bank.commit_epoch();  // bootstrap puts the entry exactly at e
  EXPECT_NEAR(bank.class_prototype(0)[0], 3.0, 1e-15);

  // perturb by hand, then check |r - e| shrinks by 0.8 per commit
  auto flat = bank.flat_state();
  flat[0] = flat[1] = 4.0;  // r entries
  bank.set_flat_state(flat);
  double err = 1.0;
  for (int k = 0; k < 3; ++k) {
    bank.accumulate(dec, 0, 0);
    bank.commit_epoch();
    const double new_err = std::abs(bank.class_prototype(0)[0] - 3.0);
    EXPECT_NEAR(new_err, 0.8 * err, 1e-12);
    err = new_err;
  }
}

TEST(PrototypeBank, RandomStreamMatchesScalarEmaOracle) {
  Rng rng(73);
  PrototypeBank bank(1, 1, 2, 2, 2, 0.8, /*bootstrap_first_commit=*/false);
  std::vector<double> oracle_r(8, 0.0);
  std::vector<double> oracle_u(2, 0.0), oracle_v(2, 0.0);
  for (int epoch = 0; epoch < 5; ++epoch) {
    std::vector<double> zsum(8, 0.0), musum(2, 0.0), sigsum(2, 0.0);
    const std::size_t n = 1 + rng.uniform_index(4);
    for (std::size_t i = 0; i < n; ++i) {
      Tensor s = Tensor::random_uniform({2, 2, 2}, rng, -2.0, 2.0);
      Decomposition dec = disentangle(s);
      bank.accumulate(dec, 0, 0);
      for (std::size_t k = 0; k < 8; ++k) zsum[k] += dec.z[k];
      for (std::size_t k = 0; k < 2; ++k) {
        musum[k] += dec.mu[k];
        sigsum[k] += dec.sigma[k];
      }
    }
    bank.commit_epoch();
    for (std::size_t k = 0; k < 8; ++k) {
      oracle_r[k] = 0.8 * oracle_r[k] + 0.2 * zsum[k] / n;
      EXPECT_NEAR(bank.class_prototype(0)[k], oracle_r[k], 1e-12);
    }
    for (std::size_t k = 0; k < 2; ++k) {
      oracle_u[k] = 0.8 * oracle_u[k] + 0.2 * musum[k] / n;
      oracle_v[k] = 0.8 * oracle_v[k] + 0.2 * sigsum[k] / n;
      EXPECT_NEAR(bank.domain_mu(0)[k], oracle_u[k], 1e-12);
      EXPECT_NEAR(bank.domain_sigma(0)[k], oracle_v[k], 1e-12);
    }
  }
}

TEST(PrototypeBank, UnseenEntriesCarryOverWithWarning) {
  PrototypeBank bank(2, 2, 1, 1, 2, 0.8);
  Decomposition dec;
  dec.z = Tensor::from({1, 1, 2}, {1.0, 1.0});
  dec.mu = Tensor::from({1}, {2.0});
  dec.sigma = Tensor::from({1}, {1.0});
  bank.accumulate(dec, 0, 0);
  bank.commit_epoch();
  EXPECT_EQ(bank.last_commit_warnings().size(), 2u);  // class 1, domain 1
  EXPECT_TRUE(bank.class_ready(0));
  EXPECT_FALSE(bank.class_ready(1));
  const double before = bank.class_prototype(0)[0];

  // next epoch feeds only class 1 / domain 1: class 0 must carry over
  Decomposition dec2;
  dec2.z = Tensor::from({1, 1, 2}, {5.0, 5.0});
  dec2.mu = Tensor::from({1}, {5.0});
  dec2.sigma = Tensor::from({1}, {2.0});
  bank.accumulate(dec2, 1, 1);
  bank.commit_epoch();
  EXPECT_DOUBLE_EQ(bank.class_prototype(0)[0], before);
  EXPECT_TRUE(bank.class_ready(1));
  EXPECT_TRUE(bank.all_ready());
}

// Class prototypes average over all domains of the class; domain statistics
// average over all classes of the domain. Built from per-cell constant
// feature maps whose instance statistics differ per cell.
TEST(PrototypeBank, MarginalAveragingIsClassAndDomainAgnostic) {
  PrototypeBank bank(2, 2, 1, 2, 2, 0.8);
  // feature maps: value pattern scaled so mu = base, sigma ~ |spread|
  auto make_dec = [&](double base, double spread) {
    return disentangle(Tensor::from(
        {1, 2, 2},
        {base - spread, base + spread, base - spread, base + spread}));
  };
  // cell (c,d) gets mu = 10c + d, spread = 1 + c + 2d
  std::vector<std::vector<Decomposition>> cell(2);
  for (std::size_t c = 0; c < 2; ++c) {
    for (std::size_t d = 0; d < 2; ++d) {
      cell[c].push_back(make_dec(10.0 * c + d, 1.0 + c + 2.0 * d));
      bank.accumulate(cell[c][d], c, d);
    }
  }
  bank.commit_epoch();
  for (std::size_t c = 0; c < 2; ++c) {
    Tensor r = bank.class_prototype(c);
    for (std::size_t i = 0; i < 4; ++i) {
      EXPECT_NEAR(r[i], 0.5 * (cell[c][0].z[i] + cell[c][1].z[i]), 1e-12);
    }
  }
  for (std::size_t d = 0; d < 2; ++d) {
    EXPECT_NEAR(bank.domain_mu(d)[0],
                0.5 * (cell[0][d].mu[0] + cell[1][d].mu[0]), 1e-12);
    EXPECT_NEAR(bank.domain_sigma(d)[0],
                0.5 * (cell[0][d].sigma[0] + cell[1][d].sigma[0]), 1e-12);
  }
  // v stays positive once initialized
  for (std::size_t d = 0; d < 2; ++d) {
    for (double v : bank.domain_sigma(d).data()) {
      EXPECT_GT(v, 0.0);
    }
  }
}

TEST(PrototypeBank, FlatStateRoundTrip) {
  Rng rng(79);
  PrototypeBank bank(2, 3, 2, 2, 2, 0.8);
  for (int i = 0; i < 10; ++i) {
    Tensor s = Tensor::random_uniform({2, 2, 2}, rng);
    bank.accumulate(disentangle(s), rng.uniform_index(2),
                    rng.uniform_index(3));
  }
  bank.commit_epoch();
  bank.accumulate(disentangle(Tensor::random_uniform({2, 2, 2}, rng)), 0, 0);

  PrototypeBank restored(2, 3, 2, 2, 2, 0.8);
  restored.set_flat_state(bank.flat_state());
  EXPECT_EQ(restored.flat_state(), bank.flat_state());
  EXPECT_EQ(restored.commit_count(), bank.commit_count());
  EXPECT_EQ(restored.epoch_count_class(0), bank.epoch_count_class(0));
}
