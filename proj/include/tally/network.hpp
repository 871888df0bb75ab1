#pragma once

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "tally/rng.hpp"
#include "tally/serialize.hpp"
#include "tally/tensor.hpp"

namespace tally {

// Two-part classifier: a small conv stack whose hidden representation after
// `conv_blocks_before_r` blocks is exposed for augmentation, followed by the
// remaining conv blocks, global average pooling and an unscaled linear head.
struct NetworkConfig {
  std::size_t in_channels = 3;
  std::size_t hidden_channels = 8;
  std::size_t conv_blocks_before_r = 1;
  std::size_t conv_blocks_after_r = 1;
  std::size_t num_classes = 2;
  std::size_t image_side = 16;

  void validate() const {
    if (in_channels < 1 || hidden_channels < 1 || conv_blocks_before_r < 1 ||
        conv_blocks_after_r < 1) {
      throw std::invalid_argument("NetworkConfig: all counts must be >= 1");
    }
    if (num_classes < 2) {
      throw std::invalid_argument("NetworkConfig: num_classes must be >= 2");
    }
    if (image_side < 2) {
      throw std::invalid_argument(
          "NetworkConfig: image_side must be >= 2 (instance statistics need "
          "multiple spatial positions)");
    }
  }

  bool operator==(const NetworkConfig&) const = default;
};

inline void to_json(nlohmann::json& j, const NetworkConfig& c) {
  j = nlohmann::json{{"in_channels", c.in_channels},
                     {"hidden_channels", c.hidden_channels},
                     {"conv_blocks_before_r", c.conv_blocks_before_r},
                     {"conv_blocks_after_r", c.conv_blocks_after_r},
                     {"num_classes", c.num_classes},
                     {"image_side", c.image_side}};
}

inline void from_json(const nlohmann::json& j, NetworkConfig& c) {
  j.at("in_channels").get_to(c.in_channels);
  j.at("hidden_channels").get_to(c.hidden_channels);
  j.at("conv_blocks_before_r").get_to(c.conv_blocks_before_r);
  j.at("conv_blocks_after_r").get_to(c.conv_blocks_after_r);
  j.at("num_classes").get_to(c.num_classes);
  j.at("image_side").get_to(c.image_side);
}

class Network {
 public:
  Network() = default;

  // Kaiming fan-in init: conv weights ~ N(0, 2/(9*Cin)), head weights
  // ~ N(0, 2/hidden), biases zero. Deterministic per seed.
  static Network init(const NetworkConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    Network net;
    net.cfg_ = cfg;
    Rng rng(seed);
    auto conv_block = [&](std::size_t cin, std::size_t cout) {
      const double std_w = std::sqrt(2.0 / (static_cast<double>(cin) * 9.0));
      Tensor w = Tensor::zeros({cout, cin, 3, 3}, true);
      for (double& v : w.data()) v = rng.normal(0.0, std_w);
      Tensor b = Tensor::zeros({cout}, true);
      return ConvBlock{w, b};
    };
    std::size_t cin = cfg.in_channels;
    for (std::size_t i = 0; i < cfg.conv_blocks_before_r; ++i) {
      net.pre_.push_back(conv_block(cin, cfg.hidden_channels));
      cin = cfg.hidden_channels;
    }
    for (std::size_t i = 0; i < cfg.conv_blocks_after_r; ++i) {
      net.post_.push_back(conv_block(cfg.hidden_channels, cfg.hidden_channels));
    }
    const double std_h = std::sqrt(2.0 / static_cast<double>(cfg.hidden_channels));
    net.head_w_ = Tensor::zeros({cfg.hidden_channels, cfg.num_classes}, true);
    for (double& v : net.head_w_.data()) v = rng.normal(0.0, std_h);
    net.head_b_ = Tensor::zeros({cfg.num_classes}, true);
    net.collect_params();
    return net;
  }

  // Hidden representation at layer r, [N, hidden, H, W].
  Tensor features(const Tensor& x) const {
    check_input(x);
    Tensor h = x;
    for (const ConvBlock& blk : pre_) {
      h = relu(conv_bias(conv2d(h, blk.w), blk.b));
    }
    return h;
  }

  // Unscaled logits from a hidden representation, [N, num_classes].
  Tensor head(const Tensor& s) const {
    if (s.rank() != 4 || s.shape()[1] != cfg_.hidden_channels ||
        s.shape()[2] != cfg_.image_side || s.shape()[3] != cfg_.image_side) {
      throw std::invalid_argument("Network::head: bad hidden shape " +
                                  shape_str(s.shape()));
    }
    Tensor h = s;
    for (const ConvBlock& blk : post_) {
      h = relu(conv_bias(conv2d(h, blk.w), blk.b));
    }
    Tensor pooled = global_avg_pool(h);
    return linear_bias(matmul(pooled, head_w_), head_b_);
  }

  Tensor forward(const Tensor& x) const { return head(features(x)); }

  // Parameter order is fixed and part of the checkpoint contract:
  // pre blocks (weight, bias) in depth order, then post blocks, then head
  // weight, head bias.
  const std::vector<Tensor>& parameters() const { return params_; }
  std::vector<Tensor>& parameters() { return params_; }

  void zero_grad() {
    for (Tensor& p : params_) p.zero_grad();
  }

  const NetworkConfig& config() const { return cfg_; }

  static std::size_t parameter_count(const NetworkConfig& cfg) {
    std::size_t total = 0;
    std::size_t cin = cfg.in_channels;
    for (std::size_t i = 0; i < cfg.conv_blocks_before_r; ++i) {
      total += cfg.hidden_channels * cin * 9 + cfg.hidden_channels;
      cin = cfg.hidden_channels;
    }
    for (std::size_t i = 0; i < cfg.conv_blocks_after_r; ++i) {
      total += cfg.hidden_channels * cfg.hidden_channels * 9 +
               cfg.hidden_channels;
    }
    total += cfg.hidden_channels * cfg.num_classes + cfg.num_classes;
    return total;
  }

  std::vector<double> flat_parameters() const {
    std::vector<double> flat;
    flat.reserve(parameter_count(cfg_));
    for (const Tensor& p : params_) {
      flat.insert(flat.end(), p.data().begin(), p.data().end());
    }
    return flat;
  }

  void set_flat_parameters(const std::vector<double>& flat) {
    if (flat.size() != parameter_count(cfg_)) {
      throw std::invalid_argument(
          "Network::set_flat_parameters: expected " +
          std::to_string(parameter_count(cfg_)) + " values, got " +
          std::to_string(flat.size()));
    }
    std::size_t off = 0;
    for (Tensor& p : params_) {
      std::copy(flat.begin() + static_cast<std::ptrdiff_t>(off),
                flat.begin() + static_cast<std::ptrdiff_t>(off + p.numel()),
                p.data().begin());
      off += p.numel();
    }
  }

 private:
  struct ConvBlock {
    Tensor w, b;
  };

  void check_input(const Tensor& x) const {
    if (x.rank() != 4 || x.shape()[1] != cfg_.in_channels ||
        x.shape()[2] != cfg_.image_side || x.shape()[3] != cfg_.image_side) {
      throw std::invalid_argument("Network::features: bad input shape " +
                                  shape_str(x.shape()));
    }
  }

  void collect_params() {
    params_.clear();
    for (ConvBlock& blk : pre_) {
      params_.push_back(blk.w);
      params_.push_back(blk.b);
    }
    for (ConvBlock& blk : post_) {
      params_.push_back(blk.w);
      params_.push_back(blk.b);
    }
    params_.push_back(head_w_);
    params_.push_back(head_b_);
  }

  NetworkConfig cfg_;
  std::vector<ConvBlock> pre_, post_;
  Tensor head_w_, head_b_;
  std::vector<Tensor> params_;
};

// Checkpoint: JSON manifest {config, seed, step} next to a little-endian f64
// blob holding the flat parameters in the documented order.
inline void save_network_checkpoint(const Network& net, std::uint64_t seed,
                                    std::uint64_t step,
                                    const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  nlohmann::json manifest{{"format_version", 1},
                          {"kind", "network"},
                          {"config", net.config()},
                          {"seed", seed},
                          {"step", step}};
  write_text_file(dir / "manifest.json", manifest.dump(2) + "\n");
  auto os = open_out(dir / "params.bin");
  write_f64_span(os, net.flat_parameters());
}

inline Network load_network_checkpoint(const std::filesystem::path& dir,
                                       std::uint64_t* seed_out = nullptr,
                                       std::uint64_t* step_out = nullptr) {
  const nlohmann::json manifest =
      nlohmann::json::parse(read_text_file(dir / "manifest.json"));
  if (manifest.at("format_version").get<int>() != 1) {
    throw std::runtime_error("network checkpoint: unsupported format version");
  }
  const NetworkConfig cfg = manifest.at("config").get<NetworkConfig>();
  Network net = Network::init(cfg, 0);
  auto is = open_in(dir / "params.bin");
  net.set_flat_parameters(read_f64_span(is, Network::parameter_count(cfg)));
  char extra;
  if (is.read(&extra, 1)) {
    throw std::runtime_error("network checkpoint: trailing bytes in blob");
  }
  if (seed_out) *seed_out = manifest.at("seed").get<std::uint64_t>();
  if (step_out) *step_out = manifest.at("step").get<std::uint64_t>();
  return net;
}

}  // namespace tally
