#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <numbers>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "tally/rng.hpp"
#include "tally/serialize.hpp"
#include "tally/tensor.hpp"

namespace tally {

// Synthetic multi-domain long-tailed image datasets. Class identity lives in
// a spatial pattern (an oriented soft bar at a class-indexed position);
// domain identity lives, in `affine` mode, purely in per-channel gain/bias --
// exactly the statistics instance normalisation removes -- or, in `warp`
// mode, in a small spatial warp as a mechanism-misaligned control.

enum class CorrelationMode { cyclic_shift, independent };
enum class DomainMode { affine, warp };

inline const char* correlation_name(CorrelationMode m) {
  return m == CorrelationMode::cyclic_shift ? "cyclic_shift" : "independent";
}
inline CorrelationMode correlation_from_name(const std::string& s) {
  if (s == "cyclic_shift") return CorrelationMode::cyclic_shift;
  if (s == "independent") return CorrelationMode::independent;
  throw std::invalid_argument("unknown correlation_mode: " + s);
}
inline const char* domain_mode_name(DomainMode m) {
  return m == DomainMode::affine ? "affine" : "warp";
}
inline DomainMode domain_mode_from_name(const std::string& s) {
  if (s == "affine") return DomainMode::affine;
  if (s == "warp") return DomainMode::warp;
  throw std::invalid_argument("unknown domain_mode: " + s);
}

struct DatasetSpec {
  std::size_t num_classes = 10;
  std::size_t num_domains = 4;
  std::size_t image_side = 16;
  std::size_t channels = 3;
  double imbalance_ratio = 50.0;  // largest/smallest class within a domain
  std::size_t head_count = 500;   // examples in each domain's largest class
  CorrelationMode correlation_mode = CorrelationMode::cyclic_shift;
  DomainMode domain_mode = DomainMode::affine;
  double noise_std = 0.25;
  // Intra-class shape diversity: the k-th example of a (class,domain) cell
  // renders a deterministic jitter of the class pattern indexed by k, with
  // val/test continuing the index stream so held-out examples are novel
  // variants. Variant indices align across domains, so matched indices stay
  // identical across domains up to the domain transform. 0 = unlimited
  // (every index its own variant); variants_per_class = 1 gives a single
  // fixed template per class.
  std::size_t variants_per_class = 0;
  std::size_t val_per_cell = 5;
  std::size_t test_per_cell = 10;
  std::uint64_t seed = 0;
  // Optional per-domain, per-channel affine override; empty = built-in
  // well-separated tables.
  std::vector<std::vector<double>> domain_gains;
  std::vector<std::vector<double>> domain_biases;

  // Maps an example's index stream position to a variant id.
  std::size_t variant_of(std::size_t index) const {
    return variants_per_class == 0 ? index : index % variants_per_class;
  }

  void validate() const {
    if (num_classes < 2 || num_domains < 2) {
      throw std::invalid_argument("DatasetSpec: need >= 2 classes and >= 2 domains");
    }
    if (imbalance_ratio < 1.0) {
      throw std::invalid_argument("DatasetSpec: imbalance_ratio must be >= 1");
    }
    if (head_count < num_classes) {
      throw std::invalid_argument(
          "DatasetSpec: head_count must be >= num_classes");
    }
    if (image_side < 4 || channels < 1) {
      throw std::invalid_argument("DatasetSpec: degenerate image dimensions");
    }
    if (noise_std < 0.0) {
      throw std::invalid_argument("DatasetSpec: negative noise_std");
    }

    auto check_table = [&](const std::vector<std::vector<double>>& t,
                           const char* what) {
      if (t.empty()) return;
      if (t.size() != num_domains) {
        throw std::invalid_argument(std::string("DatasetSpec: ") + what +
                                    " table must have one row per domain");
      }
      for (const auto& row : t) {
        if (row.size() != channels) {
          throw std::invalid_argument(std::string("DatasetSpec: ") + what +
                                      " row must have one entry per channel");
        }
      }
    };
    check_table(domain_gains, "domain_gains");
    check_table(domain_biases, "domain_biases");
  }
};

inline void to_json(nlohmann::json& j, const DatasetSpec& s) {
  j = nlohmann::json{{"num_classes", s.num_classes},
                     {"num_domains", s.num_domains},
                     {"image_side", s.image_side},
                     {"channels", s.channels},
                     {"imbalance_ratio", s.imbalance_ratio},
                     {"head_count", s.head_count},
                     {"correlation_mode", correlation_name(s.correlation_mode)},
                     {"domain_mode", domain_mode_name(s.domain_mode)},
                     {"noise_std", s.noise_std},
                     {"variants_per_class", s.variants_per_class},
                     {"val_per_cell", s.val_per_cell},
                     {"test_per_cell", s.test_per_cell},
                     {"seed", s.seed},
                     {"domain_gains", s.domain_gains},
                     {"domain_biases", s.domain_biases}};
}

inline void from_json(const nlohmann::json& j, DatasetSpec& s) {
  DatasetSpec defaults;
  s.num_classes = j.value("num_classes", defaults.num_classes);
  s.num_domains = j.value("num_domains", defaults.num_domains);
  s.image_side = j.value("image_side", defaults.image_side);
  s.channels = j.value("channels", defaults.channels);
  s.imbalance_ratio = j.value("imbalance_ratio", defaults.imbalance_ratio);
  s.head_count = j.value("head_count", defaults.head_count);
  s.correlation_mode = correlation_from_name(
      j.value("correlation_mode", std::string("cyclic_shift")));
  s.domain_mode =
      domain_mode_from_name(j.value("domain_mode", std::string("affine")));
  s.noise_std = j.value("noise_std", defaults.noise_std);
  s.variants_per_class =
      j.value("variants_per_class", defaults.variants_per_class);
  s.val_per_cell = j.value("val_per_cell", defaults.val_per_cell);
  s.test_per_cell = j.value("test_per_cell", defaults.test_per_cell);
  s.seed = j.value("seed", defaults.seed);
  s.domain_gains =
      j.value("domain_gains", std::vector<std::vector<double>>{});
  s.domain_biases =
      j.value("domain_biases", std::vector<std::vector<double>>{});
}

struct Example {
  std::vector<float> pixels;  // channels * side * side, row-major
  std::uint32_t label = 0;
  std::uint32_t domain = 0;
};

// One split plus the metadata a trainer needs.
struct Dataset {
  std::vector<Example> examples;
  std::size_t num_classes = 0;
  std::size_t num_domains = 0;
  std::size_t channels = 0;
  std::size_t image_side = 0;

  std::size_t size() const { return examples.size(); }

  Tensor example_tensor(std::size_t i) const {
    const Example& ex = examples.at(i);
    std::vector<double> vals(ex.pixels.begin(), ex.pixels.end());
    return Tensor::from({channels, image_side, image_side}, std::move(vals));
  }

  Tensor batch_tensor(const std::vector<std::size_t>& ids) const {
    std::vector<double> vals;
    vals.reserve(ids.size() * channels * image_side * image_side);
    for (std::size_t id : ids) {
      const Example& ex = examples.at(id);
      vals.insert(vals.end(), ex.pixels.begin(), ex.pixels.end());
    }
    return Tensor::from({ids.size(), channels, image_side, image_side},
                        std::move(vals));
  }
};

struct SynthDataset {
  DatasetSpec spec;
  Dataset train, val, test;
  std::vector<std::vector<std::size_t>> train_counts;  // [domain][class]
  std::vector<double> measured_rho;                    // per domain
};

// Exponential long-tailed profile: rank k of C gets
// round(n_max * rho^(-k/(C-1))), clamped to >= 1.
inline std::vector<std::size_t> class_counts(std::size_t num_classes,
                                             double rho,
                                             std::size_t head_count) {
  if (num_classes < 1 || rho < 1.0 || head_count < 1) {
    throw std::invalid_argument("class_counts: bad arguments");
  }
  std::vector<std::size_t> counts(num_classes);
  for (std::size_t k = 0; k < num_classes; ++k) {
    const double expo =
        num_classes == 1
            ? 0.0
            : -static_cast<double>(k) / static_cast<double>(num_classes - 1);
    const double n = static_cast<double>(head_count) * std::pow(rho, expo);
    counts[k] = static_cast<std::size_t>(
        std::max<long long>(1, std::llround(n)));
  }
  return counts;
}

namespace detail {

// splitmix64 finaliser; drives the deterministic variant jitter without
// touching the generation RNG stream.
inline std::uint64_t hash_mix(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ull;
  x ^= x >> 30;
  x *= 0xBF58476D1CE4E5B9ull;
  x ^= x >> 27;
  x *= 0x94D049BB133111EBull;
  x ^= x >> 31;
  return x;
}

// Deterministic pseudo-random value in [-1, 1] for (class, variant, slot).
inline double variant_unit(std::size_t c, std::size_t v, std::size_t slot) {
  const std::uint64_t h =
      hash_mix((static_cast<std::uint64_t>(c) * 1000003ull) ^
               (static_cast<std::uint64_t>(v) * 7919ull) ^
               (static_cast<std::uint64_t>(slot) * 104729ull) ^
               0x7a11da7aull);
  return 2.0 * (static_cast<double>(h >> 11) * 0x1.0p-53) - 1.0;
}

// Class amplitudes and domain gains share one log-linear channel direction:
// amplitude(c) * gain(d) depends on (c + d) only, so per-channel statistics
// are identical for (c, d) and (c+1, d-1). Channel statistics alone can pin
// an example to a (c + d) line but never to a class; only the spatial
// pattern, which instance normalisation isolates, resolves the rest.
inline constexpr double kStatDirScale = 0.08;

inline double stat_direction(std::size_t channel) {
  return 0.5 * (1.0 + static_cast<double>(channel));
}

inline double class_channel_amplitude(std::size_t c, std::size_t num_classes,
                                      std::size_t channel) {
  (void)num_classes;
  return std::exp(kStatDirScale * static_cast<double>(c) *
                  stat_direction(channel));
}

// Class template evaluated at continuous image coordinates: a soft oriented
// bar whose angle and centre are indexed by the class, with a class-indexed
// channel-amplitude signature. `variant` scales the bar's length and width
// deterministically; the centre and angle stay class-fixed, so the variant
// family of a class is (close to) closed under averaging and convex mixing.
inline double class_template_value(std::size_t c, std::size_t num_classes,
                                   std::size_t side, std::size_t channel,
                                   double y, double x, std::size_t variant) {
  const double jl = 1.0 + 0.28 * variant_unit(c, variant, 3);
  const double jw = 1.0 + 0.30 * variant_unit(c, variant, 4);
  const double cx =
      0.5 * side + 0.30 * side *
                       std::cos(2.0 * std::numbers::pi * c / num_classes);
  const double cy =
      0.5 * side + 0.30 * side *
                       std::sin(2.0 * std::numbers::pi * c / num_classes);
  const double theta = std::numbers::pi * static_cast<double>(c) /
                       static_cast<double>(num_classes);
  const double ct = std::cos(theta), st = std::sin(theta);
  const double ux = x - cx, uy = y - cy;
  const double along = ux * ct + uy * st;
  const double across = -ux * st + uy * ct;
  const double half_len = 0.30 * side * jl;
  const double width = (0.06 * side + 0.5) * jw;
  const double profile =
      std::exp(-std::pow(along / half_len, 4.0)) *
      std::exp(-(across * across) / (2.0 * width * width));
  return class_channel_amplitude(c, num_classes, channel) * profile;
}

// Domain gains walk the same log-linear direction as the class amplitudes
// (one unit of domain = one unit of class), creating the exact statistics
// collisions above. Biases stay zero by default so the collisions also hold
// in the first moment; both tables can be overridden per spec.
inline double default_gain(std::size_t d, std::size_t ch) {
  return std::exp(kStatDirScale * static_cast<double>(d) *
                  stat_direction(ch));
}

inline double default_bias(std::size_t d, std::size_t ch) {
  (void)d;
  (void)ch;
  return 0.0;
}

// Small rigid warp (rotation + translation) used as the mechanism-misaligned
// domain transform: the template is sampled at inverse-warped coordinates.
inline void warp_coords(std::size_t d, std::size_t num_domains,
                        std::size_t side, double y, double x, double* wy,
                        double* wx) {
  const double phi =
      (static_cast<double>(d) - 0.5 * (num_domains - 1)) * 0.35;
  const double tx = 1.5 * (static_cast<double>(d % 3) - 1.0);
  const double ty = 1.0 * (static_cast<double>(d % 2) * 2.0 - 1.0);
  const double cx = 0.5 * side, cy = 0.5 * side;
  const double rx = x - cx - tx, ry = y - cy - ty;
  const double c = std::cos(-phi), s = std::sin(-phi);
  *wx = cx + rx * c - ry * s;
  *wy = cy + rx * s + ry * c;
}

inline Example render_example(const DatasetSpec& spec, std::size_t c,
                              std::size_t d, std::size_t variant, Rng& rng) {
  const std::size_t side = spec.image_side;
  Example ex;
  ex.label = static_cast<std::uint32_t>(c);
  ex.domain = static_cast<std::uint32_t>(d);
  ex.pixels.resize(spec.channels * side * side);
  for (std::size_t ch = 0; ch < spec.channels; ++ch) {
    const double gain = spec.domain_gains.empty()
                            ? default_gain(d, ch)
                            : spec.domain_gains[d][ch];
    const double bias = spec.domain_biases.empty()
                            ? default_bias(d, ch)
                            : spec.domain_biases[d][ch];
    for (std::size_t py = 0; py < side; ++py) {
      for (std::size_t px = 0; px < side; ++px) {
        double value;
        if (spec.domain_mode == DomainMode::affine) {
          const double t = class_template_value(
              c, spec.num_classes, side, ch, static_cast<double>(py),
              static_cast<double>(px), variant);
          value = gain * t + bias;
        } else {
          double wy, wx;
          warp_coords(d, spec.num_domains, side, static_cast<double>(py),
                      static_cast<double>(px), &wy, &wx);
          value = class_template_value(c, spec.num_classes, side, ch, wy, wx,
                                       variant);
        }
        if (spec.noise_std > 0.0) {
          value += rng.normal(0.0, spec.noise_std);
        }
        ex.pixels[(ch * side + py) * side + px] = static_cast<float>(value);
      }
    }
  }
  return ex;
}

}  // namespace detail

// Rank of class c within domain d's long-tailed ordering.
inline std::size_t class_rank_in_domain(const DatasetSpec& spec, std::size_t c,
                                        std::size_t d) {
  if (spec.correlation_mode == CorrelationMode::independent) {
    return c;
  }
  const std::size_t shift = spec.num_classes / spec.num_domains;
  return (c + d * shift) % spec.num_classes;
}

inline SynthDataset generate(const DatasetSpec& spec) {
  spec.validate();
  SynthDataset ds;
  ds.spec = spec;
  const auto profile =
      class_counts(spec.num_classes, spec.imbalance_ratio, spec.head_count);
  Rng rng(spec.seed);

  auto meta = [&](Dataset& split) {
    split.num_classes = spec.num_classes;
    split.num_domains = spec.num_domains;
    split.channels = spec.channels;
    split.image_side = spec.image_side;
  };
  meta(ds.train);
  meta(ds.val);
  meta(ds.test);

  ds.train_counts.assign(spec.num_domains,
                         std::vector<std::size_t>(spec.num_classes, 0));
  for (std::size_t d = 0; d < spec.num_domains; ++d) {
    for (std::size_t c = 0; c < spec.num_classes; ++c) {
      const std::size_t n = profile[class_rank_in_domain(spec, c, d)];
      ds.train_counts[d][c] = n;
      for (std::size_t i = 0; i < n; ++i) {
        ds.train.examples.push_back(detail::render_example(
            spec, c, d, spec.variant_of(i), rng));
      }
    }
  }
  for (std::size_t d = 0; d < spec.num_domains; ++d) {
    for (std::size_t c = 0; c < spec.num_classes; ++c) {
      for (std::size_t i = 0; i < spec.val_per_cell; ++i) {
        ds.val.examples.push_back(detail::render_example(
            spec, c, d, spec.variant_of(spec.head_count + i), rng));
      }
      for (std::size_t i = 0; i < spec.test_per_cell; ++i) {
        ds.test.examples.push_back(detail::render_example(
            spec, c, d,
            spec.variant_of(spec.head_count + spec.val_per_cell + i), rng));
      }
    }
  }

  ds.measured_rho.resize(spec.num_domains);
  for (std::size_t d = 0; d < spec.num_domains; ++d) {
    std::size_t mn = ds.train_counts[d][0], mx = ds.train_counts[d][0];
    for (std::size_t c = 1; c < spec.num_classes; ++c) {
      mn = std::min(mn, ds.train_counts[d][c]);
      mx = std::max(mx, ds.train_counts[d][c]);
    }
    ds.measured_rho[d] =
        static_cast<double>(mx) / static_cast<double>(mn);
  }
  return ds;
}

// Leave-one-domain-out split. Training examples keep their content but
// domains are renumbered to a dense 0..D-2 range; the held-out test pool is
// the (already class-balanced) test split of the held-out domain, remapped to
// a single domain id 0.
struct LodoSplit {
  Dataset train;
  Dataset test;
  std::vector<std::size_t> train_indices;  // into dataset.train.examples
  std::vector<std::size_t> test_indices;   // into dataset.test.examples
  std::size_t held_out = 0;
};

inline LodoSplit leave_one_domain_out(const SynthDataset& ds,
                                      std::size_t held_out) {
  if (ds.spec.num_domains < 2) {
    throw std::invalid_argument("leave_one_domain_out: need >= 2 domains");
  }
  if (held_out >= ds.spec.num_domains) {
    throw std::invalid_argument("leave_one_domain_out: invalid domain id " +
                                std::to_string(held_out));
  }
  LodoSplit split;
  split.held_out = held_out;
  split.train.num_classes = ds.spec.num_classes;
  split.train.num_domains = ds.spec.num_domains - 1;
  split.train.channels = ds.spec.channels;
  split.train.image_side = ds.spec.image_side;
  split.test = split.train;
  split.test.num_domains = 1;

  for (std::size_t i = 0; i < ds.train.examples.size(); ++i) {
    const Example& ex = ds.train.examples[i];
    if (ex.domain == held_out) continue;
    Example copy = ex;
    copy.domain = ex.domain < held_out ? ex.domain : ex.domain - 1;
    split.train.examples.push_back(std::move(copy));
    split.train_indices.push_back(i);
  }
  for (std::size_t i = 0; i < ds.test.examples.size(); ++i) {
    const Example& ex = ds.test.examples[i];
    if (ex.domain != held_out) continue;
    Example copy = ex;
    copy.domain = 0;
    split.test.examples.push_back(std::move(copy));
    split.test_indices.push_back(i);
  }
  return split;
}

// ---------------------------------------------------------------------------
// on-disk container: manifest.json + {train,val,test}.bin with records
// [label u32 LE][domain u32 LE][pixels f32 LE x channels*side*side]
// ---------------------------------------------------------------------------

namespace detail {

inline void write_split(const std::filesystem::path& path,
                        const Dataset& split) {
  auto os = open_out(path);
  for (const Example& ex : split.examples) {
    write_u32le(os, ex.label);
    write_u32le(os, ex.domain);
    for (float v : ex.pixels) write_f32le(os, v);
  }
}

inline Dataset read_split(const std::filesystem::path& path,
                          std::size_t count, std::size_t num_classes,
                          std::size_t num_domains, std::size_t channels,
                          std::size_t side) {
  Dataset split;
  split.num_classes = num_classes;
  split.num_domains = num_domains;
  split.channels = channels;
  split.image_side = side;
  auto is = open_in(path);
  const std::size_t pix = channels * side * side;
  split.examples.resize(count);
  for (Example& ex : split.examples) {
    ex.label = read_u32le(is);
    ex.domain = read_u32le(is);
    ex.pixels.resize(pix);
    for (float& v : ex.pixels) v = read_f32le(is);
  }
  char extra;
  if (is.read(&extra, 1)) {
    throw std::runtime_error("dataset split has trailing bytes: " +
                             path.string());
  }
  return split;
}

}  // namespace detail

inline void save_dataset(const SynthDataset& ds,
                         const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  nlohmann::json manifest{
      {"format_version", 1},
      {"kind", "dataset"},
      {"spec", ds.spec},
      {"train_counts", ds.train_counts},
      {"measured_rho", ds.measured_rho},
      {"split_sizes",
       {{"train", ds.train.examples.size()},
        {"val", ds.val.examples.size()},
        {"test", ds.test.examples.size()}}}};
  write_text_file(dir / "manifest.json", manifest.dump(2) + "\n");
  detail::write_split(dir / "train.bin", ds.train);
  detail::write_split(dir / "val.bin", ds.val);
  detail::write_split(dir / "test.bin", ds.test);
}

inline SynthDataset load_dataset(const std::filesystem::path& dir) {
  const nlohmann::json manifest =
      nlohmann::json::parse(read_text_file(dir / "manifest.json"));
  if (manifest.at("format_version").get<int>() != 1) {
    throw std::runtime_error("dataset: unsupported format version");
  }
  SynthDataset ds;
  ds.spec = manifest.at("spec").get<DatasetSpec>();
  ds.train_counts =
      manifest.at("train_counts").get<std::vector<std::vector<std::size_t>>>();
  ds.measured_rho = manifest.at("measured_rho").get<std::vector<double>>();
  const auto& sizes = manifest.at("split_sizes");
  ds.train = detail::read_split(
      dir / "train.bin", sizes.at("train").get<std::size_t>(),
      ds.spec.num_classes, ds.spec.num_domains, ds.spec.channels,
      ds.spec.image_side);
  ds.val = detail::read_split(dir / "val.bin",
                              sizes.at("val").get<std::size_t>(),
                              ds.spec.num_classes, ds.spec.num_domains,
                              ds.spec.channels, ds.spec.image_side);
  ds.test = detail::read_split(dir / "test.bin",
                               sizes.at("test").get<std::size_t>(),
                               ds.spec.num_classes, ds.spec.num_domains,
                               ds.spec.channels, ds.spec.image_side);
  return ds;
}

}  // namespace tally
