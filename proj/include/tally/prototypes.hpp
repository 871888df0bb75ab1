#pragma once

#include <cstddef>
#include <functional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "tally/augmentation.hpp"
#include "tally/tensor.hpp"

namespace tally {

// Momentum bank of domain-agnostic class prototypes r_c (mean semantic
// factor of class c over every domain) and class-agnostic domain statistics
// (u_d, v_d) (mean instance mu/sigma of domain d over every class).
//
// Accumulation is a running per-epoch sum; commit_epoch applies
// new = gamma * old + (1 - gamma) * estimate and resets the accumulators.
// The first commit of an entry replaces the zero init outright instead of
// EMA-mixing against it (constructor knob, on by default).
class PrototypeBank {
 public:
  PrototypeBank() = default;

  PrototypeBank(std::size_t num_classes, std::size_t num_domains,
                std::size_t channels, std::size_t height, std::size_t width,
                double gamma, bool bootstrap_first_commit = true)
      : num_classes_(num_classes),
        num_domains_(num_domains),
        channels_(channels),
        height_(height),
        width_(width),
        gamma_(gamma),
        bootstrap_(bootstrap_first_commit) {
    if (num_classes_ == 0 || num_domains_ == 0 || channels_ == 0 ||
        height_ * width_ == 0) {
      throw std::invalid_argument("PrototypeBank: empty dimensions");
    }
    if (gamma_ < 0.0 || gamma_ >= 1.0) {
      throw std::invalid_argument("PrototypeBank: gamma must be in [0,1)");
    }
    const std::size_t zsize = channels_ * height_ * width_;
    r_.assign(num_classes_, std::vector<double>(zsize, 0.0));
    u_.assign(num_domains_, std::vector<double>(channels_, 0.0));
    v_.assign(num_domains_, std::vector<double>(channels_, 0.0));
    class_init_.assign(num_classes_, false);
    domain_init_.assign(num_domains_, false);
    reset_epoch();
  }

  std::size_t num_classes() const { return num_classes_; }
  std::size_t num_domains() const { return num_domains_; }
  double gamma() const { return gamma_; }

  // Adds one example's decomposition to the running epoch estimates. Values
  // are read as constants; the bank never joins the autodiff graph.
  void accumulate(const Decomposition& dec, std::size_t y, std::size_t d) {
    if (y >= num_classes_) {
      throw std::invalid_argument("PrototypeBank::accumulate: class " +
                                  std::to_string(y) + " out of range");
    }
    if (d >= num_domains_) {
      throw std::invalid_argument("PrototypeBank::accumulate: domain " +
                                  std::to_string(d) + " out of range");
    }
    const std::size_t zsize = channels_ * height_ * width_;
    if (dec.z.numel() != zsize || dec.mu.numel() != channels_ ||
        dec.sigma.numel() != channels_) {
      throw std::invalid_argument(
          "PrototypeBank::accumulate: decomposition shape mismatch");
    }
    auto& zsum = sum_z_[y];
    const auto& zd = dec.z.data();
    for (std::size_t i = 0; i < zsize; ++i) zsum[i] += zd[i];
    ++count_class_[y];
    auto& musum = sum_mu_[d];
    auto& sigsum = sum_sigma_[d];
    for (std::size_t c = 0; c < channels_; ++c) {
      musum[c] += dec.mu[c];
      sigsum[c] += dec.sigma[c];
    }
    ++count_domain_[d];
  }

  std::size_t epoch_count_class(std::size_t c) const {
    return count_class_.at(c);
  }
  std::size_t epoch_count_domain(std::size_t d) const {
    return count_domain_.at(d);
  }

  // Folds this epoch's estimates into the bank and clears the accumulators.
  // Entries that saw no examples carry over unchanged with a warning.
  void commit_epoch() {
    last_commit_warnings_.clear();
    for (std::size_t c = 0; c < num_classes_; ++c) {
      if (count_class_[c] == 0) {
        last_commit_warnings_.push_back("class " + std::to_string(c) +
                                        " saw no examples this epoch; "
                                        "prototype carried over");
        continue;
      }
      const double inv = 1.0 / static_cast<double>(count_class_[c]);
      auto& dst = r_[c];
      const auto& src = sum_z_[c];
      if (bootstrap_ && !class_init_[c]) {
        for (std::size_t i = 0; i < dst.size(); ++i) dst[i] = src[i] * inv;
      } else {
        for (std::size_t i = 0; i < dst.size(); ++i) {
          dst[i] = gamma_ * dst[i] + (1.0 - gamma_) * src[i] * inv;
        }
      }
      class_init_[c] = true;
    }
    for (std::size_t d = 0; d < num_domains_; ++d) {
      if (count_domain_[d] == 0) {
        last_commit_warnings_.push_back("domain " + std::to_string(d) +
                                        " saw no examples this epoch; "
                                        "statistics carried over");
        continue;
      }
      const double inv = 1.0 / static_cast<double>(count_domain_[d]);
      if (bootstrap_ && !domain_init_[d]) {
        for (std::size_t c = 0; c < channels_; ++c) {
          u_[d][c] = sum_mu_[d][c] * inv;
          v_[d][c] = sum_sigma_[d][c] * inv;
        }
      } else {
        for (std::size_t c = 0; c < channels_; ++c) {
          u_[d][c] = gamma_ * u_[d][c] + (1.0 - gamma_) * sum_mu_[d][c] * inv;
          v_[d][c] =
              gamma_ * v_[d][c] + (1.0 - gamma_) * sum_sigma_[d][c] * inv;
        }
      }
      domain_init_[d] = true;
    }
    ++commit_count_;
    reset_epoch();
  }

  // Drops this epoch's accumulators without committing.
  void reset_epoch() {
    const std::size_t zsize = channels_ * height_ * width_;
    sum_z_.assign(num_classes_, std::vector<double>(zsize, 0.0));
    count_class_.assign(num_classes_, 0);
    sum_mu_.assign(num_domains_, std::vector<double>(channels_, 0.0));
    sum_sigma_.assign(num_domains_, std::vector<double>(channels_, 0.0));
    count_domain_.assign(num_domains_, 0);
  }

  bool class_ready(std::size_t c) const { return class_init_.at(c); }
  bool domain_ready(std::size_t d) const { return domain_init_.at(d); }

  bool all_ready() const {
    for (bool b : class_init_) {
      if (!b) return false;
    }
    for (bool b : domain_init_) {
      if (!b) return false;
    }
    return true;
  }

  std::size_t commit_count() const { return commit_count_; }

  const std::vector<std::string>& last_commit_warnings() const {
    return last_commit_warnings_;
  }

  // Constant (non-differentiable) views for the augmentation graph.
  Tensor class_prototype(std::size_t c) const {
    return Tensor::from({channels_, height_, width_}, r_.at(c));
  }
  Tensor domain_mu(std::size_t d) const {
    return Tensor::from({channels_}, u_.at(d));
  }
  Tensor domain_sigma(std::size_t d) const {
    return Tensor::from({channels_}, v_.at(d));
  }

  // Raw state for checkpointing, in a fixed order: r[0..C), u[0..D), v[0..D),
  // then the epoch accumulators.
  std::vector<double> flat_state() const {
    std::vector<double> flat;
    for (const auto& v : r_) flat.insert(flat.end(), v.begin(), v.end());
    for (const auto& v : u_) flat.insert(flat.end(), v.begin(), v.end());
    for (const auto& v : v_) flat.insert(flat.end(), v.begin(), v.end());
    for (const auto& v : sum_z_) flat.insert(flat.end(), v.begin(), v.end());
    for (const auto& v : sum_mu_) flat.insert(flat.end(), v.begin(), v.end());
    for (const auto& v : sum_sigma_)
      flat.insert(flat.end(), v.begin(), v.end());
    for (std::size_t c : count_class_)
      flat.push_back(static_cast<double>(c));
    for (std::size_t c : count_domain_)
      flat.push_back(static_cast<double>(c));
    for (bool b : class_init_) flat.push_back(b ? 1.0 : 0.0);
    for (bool b : domain_init_) flat.push_back(b ? 1.0 : 0.0);
    flat.push_back(static_cast<double>(commit_count_));
    return flat;
  }

  std::size_t flat_state_size() const {
    const std::size_t zsize = channels_ * height_ * width_;
    return num_classes_ * zsize * 2 + num_domains_ * channels_ * 4 +
           num_classes_ * 2 + num_domains_ * 2 + 1;
  }

  void set_flat_state(const std::vector<double>& flat) {
    if (flat.size() != flat_state_size()) {
      throw std::invalid_argument("PrototypeBank::set_flat_state: expected " +
                                  std::to_string(flat_state_size()) +
                                  " values, got " +
                                  std::to_string(flat.size()));
    }
    std::size_t off = 0;
    auto take = [&](std::vector<double>& dst) {
      std::copy(flat.begin() + static_cast<std::ptrdiff_t>(off),
                flat.begin() + static_cast<std::ptrdiff_t>(off + dst.size()),
                dst.begin());
      off += dst.size();
    };
    for (auto& v : r_) take(v);
    for (auto& v : u_) take(v);
    for (auto& v : v_) take(v);
    for (auto& v : sum_z_) take(v);
    for (auto& v : sum_mu_) take(v);
    for (auto& v : sum_sigma_) take(v);
    for (std::size_t& c : count_class_)
      c = static_cast<std::size_t>(flat[off++]);
    for (std::size_t& c : count_domain_)
      c = static_cast<std::size_t>(flat[off++]);
    for (std::size_t i = 0; i < class_init_.size(); ++i)
      class_init_[i] = flat[off++] != 0.0;
    for (std::size_t i = 0; i < domain_init_.size(); ++i)
      domain_init_[i] = flat[off++] != 0.0;
    commit_count_ = static_cast<std::size_t>(flat[off++]);
  }

 private:
  std::size_t num_classes_ = 0, num_domains_ = 0;
  std::size_t channels_ = 0, height_ = 0, width_ = 0;
  double gamma_ = 0.8;
  bool bootstrap_ = true;

  std::vector<std::vector<double>> r_, u_, v_;
  std::vector<std::vector<double>> sum_z_, sum_mu_, sum_sigma_;
  std::vector<std::size_t> count_class_, count_domain_;
  std::vector<bool> class_init_, domain_init_;
  std::size_t commit_count_ = 0;
  std::vector<std::string> last_commit_warnings_;
};

// Bank-backed augmented example: semantic donor (s_i, y_i), nuisance donor
// (s_j from domain d_j). Returns the augmented representation; it carries the
// semantic donor's label y_i.
inline std::pair<Tensor, std::size_t> augment_pair(
    const Tensor& s_i, std::size_t y_i, const Tensor& s_j, std::size_t d_j,
    const PrototypeBank& bank, const MixCoefficients& coeffs,
    bool detach_nuisance = false, double eps = kInstanceNormEps) {
  if (y_i >= bank.num_classes()) {
    throw std::invalid_argument("augment_pair: class " + std::to_string(y_i) +
                                " out of range");
  }
  if (d_j >= bank.num_domains()) {
    throw std::invalid_argument("augment_pair: domain " + std::to_string(d_j) +
                                " out of range");
  }
  if (!bank.class_ready(y_i) || !bank.domain_ready(d_j)) {
    throw std::runtime_error(
        "augment_pair: prototype bank entry not initialized (class " +
        std::to_string(y_i) + ", domain " + std::to_string(d_j) +
        "); commit at least one epoch first");
  }
  Tensor out = augment_pair_with(s_i, s_j, bank.class_prototype(y_i),
                                 bank.domain_mu(d_j), bank.domain_sigma(d_j),
                                 coeffs, detach_nuisance, eps);
  return {out, y_i};
}

}  // namespace tally
