#include "tally/network.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <cstring>
#include <filesystem>

#include "support/statcheck.hpp"

using namespace tally;

namespace {

NetworkConfig small_config() {
  NetworkConfig cfg;
  cfg.in_channels = 2;
  cfg.hidden_channels = 4;
  cfg.num_classes = 3;
  cfg.image_side = 6;
  return cfg;
}

}  // namespace

TEST(NetworkConfig, Validation) {
  NetworkConfig cfg = small_config();
  EXPECT_NO_THROW(cfg.validate());
  cfg.num_classes = 1;
  EXPECT_THROW(cfg.validate(), std::invalid_argument);
  cfg = small_config();
  cfg.conv_blocks_before_r = 0;
  EXPECT_THROW(cfg.validate(), std::invalid_argument);
}

TEST(Network, ZeroInputZeroBiasGivesZeroFeatures) {
  Network net = Network::init(small_config(), 1);
  Tensor x = Tensor::zeros({2, 2, 6, 6});
  Tensor s = net.features(x);
  for (std::size_t i = 0; i < s.numel(); ++i) {
    EXPECT_DOUBLE_EQ(s[i], 0.0);
  }
}

TEST(Network, IdenticalInputsGiveIdenticalFeatureMaps) {
  Network net = Network::init(small_config(), 2);
  Rng rng(3);
  Tensor one = Tensor::random_uniform({1, 2, 6, 6}, rng);
  std::vector<double> both = one.data();
  both.insert(both.end(), one.data().begin(), one.data().end());
  Tensor x = Tensor::from({2, 2, 6, 6}, both);
  Tensor s = net.features(x);
  const std::size_t half = s.numel() / 2;
  for (std::size_t i = 0; i < half; ++i) {
    EXPECT_DOUBLE_EQ(s[i], s[half + i]);
  }
}

TEST(Network, ForwardEqualsHeadOfFeaturesBitExactly) {
  Network net = Network::init(small_config(), 4);
  Rng rng(5);
  Tensor x = Tensor::random_uniform({3, 2, 6, 6}, rng);
  Tensor direct = net.forward(x);
  Tensor composed = net.head(net.features(x));
  ASSERT_EQ(direct.numel(), composed.numel());
  EXPECT_EQ(std::memcmp(direct.data().data(), composed.data().data(),
                        direct.numel() * sizeof(double)),
            0);
}

TEST(Network, HeadZeroHiddenZeroBiasGivesZeroLogits) {
  NetworkConfig cfg = small_config();
  Network net = Network::init(cfg, 6);
  Tensor s = Tensor::zeros({2, cfg.hidden_channels, 6, 6});
  Tensor logits = net.head(s);
  for (std::size_t i = 0; i < logits.numel(); ++i) {
    EXPECT_DOUBLE_EQ(logits[i], 0.0);
  }
}

TEST(Network, HeadIsBatchPermutationEquivariant) {
  NetworkConfig cfg = small_config();
  Network net = Network::init(cfg, 7);
  Rng rng(8);
  Tensor a = Tensor::random_uniform({1, cfg.hidden_channels, 6, 6}, rng);
  Tensor b = Tensor::random_uniform({1, cfg.hidden_channels, 6, 6}, rng);
  auto cat = [&](const Tensor& first, const Tensor& second) {
    std::vector<double> v = first.data();
    v.insert(v.end(), second.data().begin(), second.data().end());
    return Tensor::from({2, cfg.hidden_channels, 6, 6}, v);
  };
  Tensor ab = net.head(cat(a, b));
  Tensor ba = net.head(cat(b, a));
  const std::size_t k = cfg.num_classes;
  for (std::size_t j = 0; j < k; ++j) {
    EXPECT_DOUBLE_EQ(ab[j], ba[k + j]);
    EXPECT_DOUBLE_EQ(ab[k + j], ba[j]);
  }
}

// Independent recomputation of the head: post conv + GAP + linear by naive
// loops over the raw parameter buffers.
TEST(Network, HeadMatchesNaiveRecomputationOracle) {
  NetworkConfig cfg = small_config();
  Network net = Network::init(cfg, 9);
  Rng rng(10);
  const std::size_t C = cfg.hidden_channels, S = cfg.image_side;
  Tensor s = Tensor::random_uniform({1, C, S, S}, rng);
  Tensor logits = net.head(s);

  const auto& params = net.parameters();
  // order: pre w,b | post w,b | head w,b
  const auto& pw = params[2].data();
  const auto& pb = params[3].data();
  const auto& hw = params[4].data();
  const auto& hb = params[5].data();

  std::vector<double> conv(C * S * S, 0.0);
  for (std::size_t co = 0; co < C; ++co) {
    for (std::size_t oy = 0; oy < S; ++oy) {
      for (std::size_t ox = 0; ox < S; ++ox) {
        double acc = pb[co];
        for (std::size_t ci = 0; ci < C; ++ci) {
          for (int ky = 0; ky < 3; ++ky) {
            for (int kx = 0; kx < 3; ++kx) {
              const int iy = static_cast<int>(oy) + ky - 1;
              const int ix = static_cast<int>(ox) + kx - 1;
              if (iy < 0 || iy >= static_cast<int>(S) || ix < 0 ||
                  ix >= static_cast<int>(S)) {
                continue;
              }
              acc += s[(ci * S + iy) * S + ix] *
                     pw[((co * C + ci) * 3 + ky) * 3 + kx];
            }
          }
        }
        conv[(co * S + oy) * S + ox] = acc > 0.0 ? acc : 0.0;
      }
    }
  }
  for (std::size_t j = 0; j < cfg.num_classes; ++j) {
    double acc = hb[j];
    for (std::size_t c = 0; c < C; ++c) {
      double pool = 0.0;
      for (std::size_t i = 0; i < S * S; ++i) pool += conv[c * S * S + i];
      pool /= static_cast<double>(S * S);
      acc += pool * hw[c * cfg.num_classes + j];
    }
    EXPECT_NEAR(logits[j], acc, 1e-12);
  }
}

TEST(NetworkInit, DeterministicPerSeed) {
  Network a = Network::init(small_config(), 42);
  Network b = Network::init(small_config(), 42);
  Network c = Network::init(small_config(), 43);
  EXPECT_EQ(a.flat_parameters(), b.flat_parameters());
  EXPECT_NE(a.flat_parameters(), c.flat_parameters());
}

TEST(NetworkInit, KaimingScalePerLayer) {
  NetworkConfig cfg;
  cfg.in_channels = 3;
  cfg.hidden_channels = 8;
  cfg.num_classes = 10;
  cfg.image_side = 16;
  Network net = Network::init(cfg, 123);
  const auto& params = net.parameters();
  struct LayerCheck {
    std::size_t param_index;
    double fan_in;
  };
  const std::vector<LayerCheck> layers = {
      {0, 3.0 * 9.0}, {2, 8.0 * 9.0}, {4, 8.0}};
  for (const auto& lc : layers) {
    const auto& w = params[lc.param_index].data();
    const double expected = std::sqrt(2.0 / lc.fan_in);
    std::vector<double> vals(w.begin(), w.end());
    const double sd = testsupport::sample_std(vals);
    EXPECT_GT(sd, expected * 0.8) << "param " << lc.param_index;
    EXPECT_LT(sd, expected * 1.2) << "param " << lc.param_index;
  }
}

TEST(Network, ParameterCountIsPureFunctionOfConfig) {
  NetworkConfig cfg = small_config();
  Network net = Network::init(cfg, 11);
  std::size_t total = 0;
  for (const Tensor& p : net.parameters()) total += p.numel();
  EXPECT_EQ(total, Network::parameter_count(cfg));
  // 2->4 conv: 4*2*9+4, 4->4 conv: 4*4*9+4, head: 4*3+3
  EXPECT_EQ(Network::parameter_count(cfg),
            std::size_t(4 * 2 * 9 + 4 + 4 * 4 * 9 + 4 + 4 * 3 + 3));
}

TEST(NetworkCheckpoint, RoundTripAndMismatchError) {
  const auto dir = std::filesystem::temp_directory_path() / "tally_net_ckpt";
  std::filesystem::remove_all(dir);
  Network net = Network::init(small_config(), 21);
  save_network_checkpoint(net, 21, 7, dir);
  std::uint64_t seed = 0, step = 0;
  Network loaded = load_network_checkpoint(dir, &seed, &step);
  EXPECT_EQ(seed, 21u);
  EXPECT_EQ(step, 7u);
  EXPECT_EQ(loaded.flat_parameters(), net.flat_parameters());

  // config mismatch: blob for a different architecture must be rejected
  Network bigger = Network::init(
      []() {
        NetworkConfig c;
        c.in_channels = 2;
        c.hidden_channels = 5;
        c.num_classes = 3;
        c.image_side = 6;
        return c;
      }(),
      3);
  EXPECT_THROW(bigger.set_flat_parameters(net.flat_parameters()),
               std::invalid_argument);
  std::filesystem::remove_all(dir);
}
