#pragma once

#include <cstddef>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "tally/rng.hpp"

namespace tally {

// Index of a labelled, domain-tagged dataset: per-(class,domain) cells plus
// pooled per-class and per-domain lists. Immutable after build.
struct GroupIndex {
  std::size_t num_classes = 0;
  std::size_t num_domains = 0;
  std::vector<std::vector<std::vector<std::size_t>>> by_cell;  // [c][d]
  std::vector<std::vector<std::size_t>> by_class;              // pooled
  std::vector<std::vector<std::size_t>> by_domain;             // pooled
  std::size_t total = 0;

  template <typename ExampleRange>
  static GroupIndex build(const ExampleRange& examples, std::size_t classes,
                          std::size_t domains) {
    if (classes == 0 || domains == 0) {
      throw std::invalid_argument("GroupIndex: need classes and domains >= 1");
    }
    GroupIndex idx;
    idx.num_classes = classes;
    idx.num_domains = domains;
    idx.by_cell.assign(classes,
                       std::vector<std::vector<std::size_t>>(domains));
    idx.by_class.assign(classes, {});
    idx.by_domain.assign(domains, {});
    std::size_t i = 0;
    for (const auto& ex : examples) {
      const std::size_t y = static_cast<std::size_t>(ex.label);
      const std::size_t d = static_cast<std::size_t>(ex.domain);
      if (y >= classes || d >= domains) {
        throw std::invalid_argument(
            "GroupIndex: example " + std::to_string(i) +
            " outside configured class/domain range");
      }
      idx.by_cell[y][d].push_back(i);
      idx.by_class[y].push_back(i);
      idx.by_domain[d].push_back(i);
      ++i;
    }
    idx.total = i;
    return idx;
  }

  std::size_t cell_count(std::size_t c, std::size_t d) const {
    return by_cell.at(c).at(d).size();
  }

  bool every_class_nonempty() const {
    for (const auto& v : by_class) {
      if (v.empty()) return false;
    }
    return true;
  }

  bool every_domain_nonempty() const {
    for (const auto& v : by_domain) {
      if (v.empty()) return false;
    }
    return true;
  }
};

enum class SamplerStrategy {
  selective,           // y_i ~ U(classes), i from that class pooled over
                       // domains; d_j ~ U(domains), j from that domain pooled
                       // over classes
  group_balanced,      // (y,d) ~ U(classes x domains) jointly, per endpoint
  empirical,           // i, j ~ U(all examples)
  algorithm1_uniform,  // y ~ U(classes) and d ~ U(domains) as separate draws,
                       // then uniform inside the (y,d) cell, per endpoint
};

inline const char* sampler_name(SamplerStrategy s) {
  switch (s) {
    case SamplerStrategy::selective: return "selective";
    case SamplerStrategy::group_balanced: return "group_balanced";
    case SamplerStrategy::empirical: return "empirical";
    case SamplerStrategy::algorithm1_uniform: return "algorithm1_uniform";
  }
  throw std::invalid_argument("sampler_name: unknown strategy");
}

inline SamplerStrategy sampler_from_name(const std::string& name) {
  if (name == "selective") return SamplerStrategy::selective;
  if (name == "group_balanced") return SamplerStrategy::group_balanced;
  if (name == "empirical") return SamplerStrategy::empirical;
  if (name == "algorithm1_uniform") return SamplerStrategy::algorithm1_uniform;
  throw std::invalid_argument("unknown sampler strategy: " + name);
}

struct SamplerConfig {
  SamplerStrategy strategy = SamplerStrategy::selective;
  std::uint64_t seed = 0;
};

namespace detail {

inline constexpr std::size_t kMaxCellRetries = 1000;

// Joint draw over classes x domains with rejection of empty cells;
// bounded so a fully empty index fails loud instead of spinning.
inline std::size_t draw_from_joint_cell(const GroupIndex& idx, Rng& rng) {
  for (std::size_t attempt = 0; attempt < kMaxCellRetries; ++attempt) {
    const std::size_t cell =
        rng.uniform_index(idx.num_classes * idx.num_domains);
    const auto& members = idx.by_cell[cell / idx.num_domains]
                                     [cell % idx.num_domains];
    if (!members.empty()) {
      return members[rng.uniform_index(members.size())];
    }
  }
  throw std::runtime_error(
      "draw_pair: exceeded retry budget drawing a nonempty (class,domain) "
      "cell");
}

// Class and domain drawn as independent marginals, then the cell.
inline std::size_t draw_from_marginal_cell(const GroupIndex& idx, Rng& rng) {
  for (std::size_t attempt = 0; attempt < kMaxCellRetries; ++attempt) {
    const std::size_t y = rng.uniform_index(idx.num_classes);
    const std::size_t d = rng.uniform_index(idx.num_domains);
    const auto& members = idx.by_cell[y][d];
    if (!members.empty()) {
      return members[rng.uniform_index(members.size())];
    }
  }
  throw std::runtime_error(
      "draw_pair: exceeded retry budget drawing a nonempty (class,domain) "
      "cell");
}

}  // namespace detail

// Draws one (semantic donor i, nuisance donor j) pair.
inline std::pair<std::size_t, std::size_t> draw_pair(const GroupIndex& idx,
                                                     SamplerStrategy strategy,
                                                     Rng& rng) {
  if (idx.total == 0) {
    throw std::invalid_argument("draw_pair: empty dataset");
  }
  switch (strategy) {
    case SamplerStrategy::selective: {
      if (!idx.every_class_nonempty() || !idx.every_domain_nonempty()) {
        throw std::invalid_argument(
            "draw_pair: selective sampling needs every class and every "
            "domain populated");
      }
      const std::size_t y = rng.uniform_index(idx.num_classes);
      const auto& class_pool = idx.by_class[y];
      const std::size_t i = class_pool[rng.uniform_index(class_pool.size())];
      const std::size_t d = rng.uniform_index(idx.num_domains);
      const auto& domain_pool = idx.by_domain[d];
      const std::size_t j = domain_pool[rng.uniform_index(domain_pool.size())];
      return {i, j};
    }
    case SamplerStrategy::group_balanced: {
      const std::size_t i = detail::draw_from_joint_cell(idx, rng);
      const std::size_t j = detail::draw_from_joint_cell(idx, rng);
      return {i, j};
    }
    case SamplerStrategy::algorithm1_uniform: {
      const std::size_t i = detail::draw_from_marginal_cell(idx, rng);
      const std::size_t j = detail::draw_from_marginal_cell(idx, rng);
      return {i, j};
    }
    case SamplerStrategy::empirical: {
      const std::size_t i = rng.uniform_index(idx.total);
      const std::size_t j = rng.uniform_index(idx.total);
      return {i, j};
    }
  }
  throw std::invalid_argument("draw_pair: unknown strategy");
}

// Plain empirical batch, uniform with replacement.
inline std::vector<std::size_t> draw_warmstart_batch(const GroupIndex& idx,
                                                     std::size_t batch_size,
                                                     Rng& rng) {
  if (idx.total == 0) {
    throw std::invalid_argument("draw_warmstart_batch: empty dataset");
  }
  std::vector<std::size_t> batch(batch_size);
  for (std::size_t& id : batch) {
    id = rng.uniform_index(idx.total);
  }
  return batch;
}

}  // namespace tally
