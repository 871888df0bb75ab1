#include "tally/synthdata.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <cstring>
#include <filesystem>
#include <set>

#include "tally/augmentation.hpp"

using namespace tally;

namespace {

DatasetSpec tiny_spec() {
  DatasetSpec spec;
  spec.num_classes = 4;
  spec.num_domains = 2;
  spec.image_side = 8;
  spec.channels = 2;
  spec.imbalance_ratio = 10.0;
  spec.head_count = 20;
  spec.val_per_cell = 2;
  spec.test_per_cell = 3;
  spec.noise_std = 0.1;
  spec.seed = 5;
  return spec;
}

std::string file_bytes(const std::filesystem::path& p) {
  return read_text_file(p);
}

}  // namespace

TEST(ClassCounts, TwoPointProfile) {
  auto counts = class_counts(2, 50.0, 100);
  ASSERT_EQ(counts.size(), 2u);
  EXPECT_EQ(counts[0], 100u);
  EXPECT_EQ(counts[1], 2u);
}

TEST(ClassCounts, UnitRatioIsFlat) {
  auto counts = class_counts(7, 1.0, 33);
  for (std::size_t n : counts) {
    EXPECT_EQ(n, 33u);
  }
}

TEST(ClassCounts, RatioRecoveredAfterRounding) {
  auto counts = class_counts(10, 50.0, 500);
  const double ratio = static_cast<double>(counts.front()) /
                       static_cast<double>(counts.back());
  EXPECT_GE(ratio, 45.0);
  EXPECT_LE(ratio, 55.0);
  for (std::size_t k = 1; k < counts.size(); ++k) {
    EXPECT_LE(counts[k], counts[k - 1]);  // monotone profile
  }
}

TEST(Generate, DeterministicPerSeedAndNoiseFreeRepeats) {
  DatasetSpec spec = tiny_spec();
  SynthDataset a = generate(spec);
  SynthDataset b = generate(spec);
  ASSERT_EQ(a.train.size(), b.train.size());
  for (std::size_t i = 0; i < a.train.size(); ++i) {
    EXPECT_EQ(a.train.examples[i].pixels, b.train.examples[i].pixels);
  }

  spec.noise_std = 0.0;
  spec.variants_per_class = 1;  // single fixed template per class
  SynthDataset c = generate(spec);
  // same (class, domain) cell -> identical tensors when noise is off
  const Example* first = nullptr;
  for (const Example& ex : c.train.examples) {
    if (ex.label == 1 && ex.domain == 1) {
      if (!first) {
        first = &ex;
      } else {
        EXPECT_EQ(ex.pixels, first->pixels);
      }
    }
  }
  ASSERT_NE(first, nullptr);
}

TEST(Generate, VariantsCycleDeterministically) {
  DatasetSpec spec = tiny_spec();
  spec.noise_std = 0.0;
  spec.variants_per_class = 3;
  SynthDataset ds = generate(spec);
  std::vector<const Example*> cell;
  for (const Example& ex : ds.train.examples) {
    if (ex.label == 0 && ex.domain == 0) cell.push_back(&ex);
  }
  ASSERT_GE(cell.size(), 7u);
  // index k renders variant k % 3: repeats align, neighbours differ
  EXPECT_EQ(cell[0]->pixels, cell[3]->pixels);
  EXPECT_EQ(cell[1]->pixels, cell[4]->pixels);
  EXPECT_NE(cell[0]->pixels, cell[1]->pixels);
  EXPECT_NE(cell[1]->pixels, cell[2]->pixels);
}

TEST(Generate, ExplicitAffinePairIsExactAffineRelation) {
  DatasetSpec spec = tiny_spec();
  spec.noise_std = 0.0;
  spec.domain_gains = {{1.0, 1.0}, {2.0, 2.0}};
  spec.domain_biases = {{0.0, 0.0}, {1.0, 1.0}};
  spec.correlation_mode = CorrelationMode::independent;
  SynthDataset ds = generate(spec);
  const Example* d0 = nullptr;
  const Example* d1 = nullptr;
  for (const Example& ex : ds.train.examples) {
    if (ex.label == 2 && ex.domain == 0 && !d0) d0 = &ex;
    if (ex.label == 2 && ex.domain == 1 && !d1) d1 = &ex;
  }
  ASSERT_NE(d0, nullptr);
  ASSERT_NE(d1, nullptr);
  for (std::size_t i = 0; i < d0->pixels.size(); ++i) {
    EXPECT_NEAR(d1->pixels[i], 2.0f * d0->pixels[i] + 1.0f, 1e-5f);
  }
}

// The intended ground truth: with noise off, instance-normalised pixels of
// the same class agree across (affine) domains.
TEST(Generate, InstanceNormRemovesAffineDomainTransform) {
  DatasetSpec spec = tiny_spec();
  spec.noise_std = 0.0;
  SynthDataset ds = generate(spec);
  for (std::size_t c = 0; c < spec.num_classes; ++c) {
    const Example* d0 = nullptr;
    const Example* d1 = nullptr;
    for (const Example& ex : ds.train.examples) {
      if (ex.label != c) continue;
      if (ex.domain == 0 && !d0) d0 = &ex;
      if (ex.domain == 1 && !d1) d1 = &ex;
    }
    ASSERT_NE(d0, nullptr);
    ASSERT_NE(d1, nullptr);
    auto tensor_of = [&](const Example& ex) {
      std::vector<double> vals(ex.pixels.begin(), ex.pixels.end());
      return Tensor::from({spec.channels, spec.image_side, spec.image_side},
                          std::move(vals));
    };
    Decomposition za = disentangle(tensor_of(*d0), 1e-12);
    Decomposition zb = disentangle(tensor_of(*d1), 1e-12);
    for (std::size_t i = 0; i < za.z.numel(); ++i) {
      EXPECT_NEAR(za.z[i], zb.z[i], 1e-5);  // f32 quantisation bounds this
    }
  }
}

TEST(Generate, WarpModeDefeatsInstanceNorm) {
  DatasetSpec spec = tiny_spec();
  spec.noise_std = 0.0;
  spec.domain_mode = DomainMode::warp;
  SynthDataset ds = generate(spec);
  const Example* d0 = nullptr;
  const Example* d1 = nullptr;
  for (const Example& ex : ds.train.examples) {
    if (ex.label == 0 && ex.domain == 0 && !d0) d0 = &ex;
    if (ex.label == 0 && ex.domain == 1 && !d1) d1 = &ex;
  }
  ASSERT_NE(d0, nullptr);
  ASSERT_NE(d1, nullptr);
  double max_diff = 0.0;
  auto tensor_of = [&](const Example& ex) {
    std::vector<double> vals(ex.pixels.begin(), ex.pixels.end());
    return Tensor::from({spec.channels, spec.image_side, spec.image_side},
                        std::move(vals));
  };
  Decomposition za = disentangle(tensor_of(*d0), 1e-12);
  Decomposition zb = disentangle(tensor_of(*d1), 1e-12);
  for (std::size_t i = 0; i < za.z.numel(); ++i) {
    max_diff = std::max(max_diff, std::abs(za.z[i] - zb.z[i]));
  }
  EXPECT_GT(max_diff, 0.1);
}

TEST(Generate, CountsAndBalanceAudit) {
  DatasetSpec spec = tiny_spec();
  SynthDataset ds = generate(spec);
  // measured per-domain imbalance equals the spec ratio within rounding
  for (double rho : ds.measured_rho) {
    EXPECT_GE(rho, 0.9 * spec.imbalance_ratio);
    EXPECT_LE(rho, 1.1 * spec.imbalance_ratio);
  }
  // train counts match the materialised examples
  std::vector<std::vector<std::size_t>> seen(
      spec.num_domains, std::vector<std::size_t>(spec.num_classes, 0));
  for (const Example& ex : ds.train.examples) {
    ++seen[ex.domain][ex.label];
  }
  EXPECT_EQ(seen, ds.train_counts);
  // cyclic shift: different domains put the head count on different classes
  EXPECT_NE(ds.train_counts[0], ds.train_counts[1]);
  // val/test exactly balanced per cell
  std::vector<std::size_t> test_cells(spec.num_domains * spec.num_classes, 0);
  for (const Example& ex : ds.test.examples) {
    ++test_cells[ex.domain * spec.num_classes + ex.label];
  }
  for (std::size_t n : test_cells) {
    EXPECT_EQ(n, spec.test_per_cell);
  }
}

TEST(Lodo, SplitInvariants) {
  DatasetSpec spec = tiny_spec();
  SynthDataset ds = generate(spec);
  LodoSplit split = leave_one_domain_out(ds, 1);
  EXPECT_EQ(split.train.num_domains, spec.num_domains - 1);
  for (const Example& ex : split.train.examples) {
    EXPECT_LT(ex.domain, spec.num_domains - 1);
  }
  // D = 2: holding out 1 leaves only original domain 0
  std::size_t held_test = 0;
  for (std::size_t i : split.test_indices) {
    EXPECT_EQ(ds.test.examples[i].domain, 1u);
    ++held_test;
  }
  EXPECT_EQ(held_test, spec.num_classes * spec.test_per_cell);

  // no leakage: train indices come from the train split only, and test
  // indices cover exactly the held-out domain's test pool
  std::set<std::size_t> train_ids(split.train_indices.begin(),
                                  split.train_indices.end());
  for (std::size_t i : train_ids) {
    EXPECT_NE(ds.train.examples[i].domain, 1u);
  }

  EXPECT_THROW(leave_one_domain_out(ds, 99), std::invalid_argument);
}

TEST(Lodo, EachTrainExampleAppearsInAllButOneFold) {
  DatasetSpec spec = tiny_spec();
  spec.num_domains = 3;
  SynthDataset ds = generate(spec);
  std::vector<std::size_t> appearances(ds.train.size(), 0);
  for (std::size_t held = 0; held < spec.num_domains; ++held) {
    LodoSplit split = leave_one_domain_out(ds, held);
    for (std::size_t i : split.train_indices) {
      ++appearances[i];
    }
  }
  for (std::size_t n : appearances) {
    EXPECT_EQ(n, spec.num_domains - 1);
  }
}

TEST(DatasetIo, BitExactRoundTrip) {
  DatasetSpec spec = tiny_spec();
  SynthDataset ds = generate(spec);
  const auto dir = std::filesystem::temp_directory_path() / "tally_ds_io";
  std::filesystem::remove_all(dir);
  save_dataset(ds, dir);
  SynthDataset loaded = load_dataset(dir);
  ASSERT_EQ(loaded.train.size(), ds.train.size());
  for (std::size_t i = 0; i < ds.train.size(); ++i) {
    EXPECT_EQ(loaded.train.examples[i].pixels, ds.train.examples[i].pixels);
    EXPECT_EQ(loaded.train.examples[i].label, ds.train.examples[i].label);
    EXPECT_EQ(loaded.train.examples[i].domain, ds.train.examples[i].domain);
  }
  // write the loaded copy back out: files must be byte-identical
  const auto dir2 = std::filesystem::temp_directory_path() / "tally_ds_io2";
  std::filesystem::remove_all(dir2);
  save_dataset(loaded, dir2);
  for (const char* name : {"manifest.json", "train.bin", "val.bin",
                           "test.bin"}) {
    EXPECT_EQ(file_bytes(dir / name), file_bytes(dir2 / name)) << name;
  }
  std::filesystem::remove_all(dir);
  std::filesystem::remove_all(dir2);
}

TEST(DatasetSpec, ValidationErrors) {
  DatasetSpec spec = tiny_spec();
  spec.imbalance_ratio = 0.5;
  EXPECT_THROW(spec.validate(), std::invalid_argument);
  spec = tiny_spec();
  spec.num_domains = 1;
  EXPECT_THROW(spec.validate(), std::invalid_argument);
  spec = tiny_spec();
  spec.head_count = 2;
  EXPECT_THROW(spec.validate(), std::invalid_argument);
  spec = tiny_spec();
  spec.domain_gains = {{1.0, 1.0}};  // wrong row count
  EXPECT_THROW(spec.validate(), std::invalid_argument);
}
