#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <numbers>
#include <numeric>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "tally/network.hpp"
#include "tally/rng.hpp"
#include "tally/synthdata.hpp"
#include "tally/tensor.hpp"

namespace tally {

enum class Protocol { subpopulation, domain_shift };

inline const char* protocol_name(Protocol p) {
  return p == Protocol::subpopulation ? "subpopulation" : "domain_shift";
}
inline Protocol protocol_from_name(const std::string& s) {
  if (s == "subpopulation" || s == "subpop") return Protocol::subpopulation;
  if (s == "domain_shift" || s == "domainshift") return Protocol::domain_shift;
  throw std::invalid_argument("unknown protocol: " + s);
}

// One test example's unscaled logits with its true class and domain tag.
struct LogitSample {
  std::vector<double> logits;
  std::size_t label = 0;
  std::size_t domain = 0;
};

struct EvalOutcome {
  std::vector<double> per_domain_accuracy;
  double average_accuracy = 0.0;  // mean of per-domain accuracies
  double worst_domain_accuracy = 0.0;
  double overall_accuracy = 0.0;
  double macro_f1 = 0.0;
  std::vector<double> per_class_accuracy;
  std::vector<std::size_t> predictions;
  std::vector<LogitSample> samples;
};

// Unweighted mean of per-class F1. A class with zero true and zero predicted
// examples contributes F1 = 0 (fixed convention so reports are comparable).
inline double macro_f1(const std::vector<std::size_t>& predictions,
                       const std::vector<std::size_t>& labels,
                       std::size_t num_classes) {
  if (predictions.size() != labels.size() || predictions.empty()) {
    throw std::invalid_argument("macro_f1: need matching nonempty inputs");
  }
  std::vector<double> tp(num_classes, 0), fp(num_classes, 0),
      fn(num_classes, 0);
  for (std::size_t i = 0; i < predictions.size(); ++i) {
    if (predictions[i] >= num_classes || labels[i] >= num_classes) {
      throw std::invalid_argument("macro_f1: class id out of range");
    }
    if (predictions[i] == labels[i]) {
      ++tp[labels[i]];
    } else {
      ++fp[predictions[i]];
      ++fn[labels[i]];
    }
  }
  double total = 0.0;
  for (std::size_t c = 0; c < num_classes; ++c) {
    const double denom = 2.0 * tp[c] + fp[c] + fn[c];
    total += denom > 0.0 ? 2.0 * tp[c] / denom : 0.0;
  }
  return total / static_cast<double>(num_classes);
}

struct BucketReport {
  std::vector<std::string> names;
  std::vector<double> accuracy;
  std::vector<std::vector<std::size_t>> members;  // class ids per bucket
};

// Classes sorted by training count (descending, ties by class id) and cut
// into five contiguous groups XL..XS; when C % 5 != 0 the extra classes go to
// the later (smaller-class) buckets. C < 5 falls back to a per-class report.
inline BucketReport bucket_accuracy(
    const std::vector<double>& per_class_acc,
    const std::vector<std::size_t>& train_counts) {
  const std::size_t c = per_class_acc.size();
  if (train_counts.size() != c || c == 0) {
    throw std::invalid_argument("bucket_accuracy: size mismatch");
  }
  BucketReport report;
  if (c < 5) {
    for (std::size_t i = 0; i < c; ++i) {
      report.names.push_back("class" + std::to_string(i));
      report.accuracy.push_back(per_class_acc[i]);
      report.members.push_back({i});
    }
    return report;
  }
  std::vector<std::size_t> order(c);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) {
                     return train_counts[a] > train_counts[b];
                   });
  const std::size_t base = c / 5, rem = c % 5;
  static const char* kNames[5] = {"XL", "L", "M", "S", "XS"};
  std::size_t pos = 0;
  for (std::size_t bucket = 0; bucket < 5; ++bucket) {
    const std::size_t size = base + (bucket >= 5 - rem ? 1 : 0);
    double acc = 0.0;
    std::vector<std::size_t> members;
    for (std::size_t k = 0; k < size; ++k) {
      members.push_back(order[pos]);
      acc += per_class_acc[order[pos]];
      ++pos;
    }
    report.names.push_back(kNames[bucket]);
    report.accuracy.push_back(acc / static_cast<double>(size));
    report.members.push_back(std::move(members));
  }
  return report;
}

// Argmax evaluation over a test split. The subpopulation protocol demands an
// exactly balanced (class x domain) test set and fails hard otherwise; the
// domain-shift protocol demands per-class balance within the held-out pool.
inline EvalOutcome evaluate(const Network& net, const Dataset& test,
                            Protocol protocol) {
  if (test.size() == 0) {
    throw std::invalid_argument("evaluate: empty test set");
  }
  std::vector<std::vector<std::size_t>> cell(
      test.num_classes, std::vector<std::size_t>(test.num_domains, 0));
  for (const Example& ex : test.examples) {
    ++cell[ex.label][ex.domain];
  }
  if (protocol == Protocol::subpopulation) {
    const std::size_t want = cell[0][0];
    for (const auto& row : cell) {
      for (std::size_t n : row) {
        if (n != want || n == 0) {
          throw std::invalid_argument(
              "evaluate: subpopulation protocol requires an exactly balanced "
              "(class,domain) test set");
        }
      }
    }
  } else {
    std::vector<std::size_t> per_class(test.num_classes, 0);
    for (const auto& ex : test.examples) ++per_class[ex.label];
    for (std::size_t n : per_class) {
      if (n != per_class[0] || n == 0) {
        throw std::invalid_argument(
            "evaluate: domain-shift protocol requires a class-balanced "
            "held-out test set");
      }
    }
  }

  EvalOutcome out;
  out.predictions.resize(test.size());
  out.samples.resize(test.size());
  const std::size_t k = test.num_classes;
  const std::size_t chunk = 64;
  std::vector<std::size_t> ids;
  for (std::size_t start = 0; start < test.size(); start += chunk) {
    ids.clear();
    for (std::size_t i = start; i < std::min(start + chunk, test.size());
         ++i) {
      ids.push_back(i);
    }
    Tensor logits = net.forward(test.batch_tensor(ids));
    for (std::size_t b = 0; b < ids.size(); ++b) {
      const std::size_t i = ids[b];
      LogitSample& s = out.samples[i];
      s.logits.assign(logits.data().begin() + static_cast<std::ptrdiff_t>(b * k),
                      logits.data().begin() +
                          static_cast<std::ptrdiff_t>((b + 1) * k));
      s.label = test.examples[i].label;
      s.domain = test.examples[i].domain;
      std::size_t arg = 0;
      for (std::size_t j = 1; j < k; ++j) {
        if (s.logits[j] > s.logits[arg]) arg = j;
      }
      out.predictions[i] = arg;
    }
  }

  std::vector<std::size_t> domain_total(test.num_domains, 0),
      domain_hit(test.num_domains, 0), class_total(k, 0), class_hit(k, 0);
  std::size_t hits = 0;
  std::vector<std::size_t> labels(test.size());
  for (std::size_t i = 0; i < test.size(); ++i) {
    const Example& ex = test.examples[i];
    labels[i] = ex.label;
    const bool hit = out.predictions[i] == ex.label;
    ++domain_total[ex.domain];
    ++class_total[ex.label];
    if (hit) {
      ++hits;
      ++domain_hit[ex.domain];
      ++class_hit[ex.label];
    }
  }
  out.overall_accuracy = static_cast<double>(hits) / test.size();
  out.per_domain_accuracy.resize(test.num_domains);
  double avg = 0.0, worst = 1.0;
  for (std::size_t d = 0; d < test.num_domains; ++d) {
    out.per_domain_accuracy[d] =
        domain_total[d] > 0
            ? static_cast<double>(domain_hit[d]) / domain_total[d]
            : 0.0;
    avg += out.per_domain_accuracy[d];
    worst = std::min(worst, out.per_domain_accuracy[d]);
  }
  out.average_accuracy = avg / static_cast<double>(test.num_domains);
  out.worst_domain_accuracy = worst;
  out.per_class_accuracy.resize(k);
  for (std::size_t c = 0; c < k; ++c) {
    out.per_class_accuracy[c] =
        class_total[c] > 0 ? static_cast<double>(class_hit[c]) / class_total[c]
                           : 0.0;
  }
  out.macro_f1 = macro_f1(out.predictions, labels, k);
  return out;
}

// ---------------------------------------------------------------------------
// domain-invariance diagnostics on unscaled logits
// ---------------------------------------------------------------------------

// Held-out accuracy of an L2-regularised multinomial logistic regression
// probe predicting the domain from the unscaled logits. Solver is fixed for
// reproducibility: full-batch gradient descent, step 1/L with L from a power
// iteration on the Gram matrix, stop at grad-norm < 1e-6 or 1e4 iterations,
// stratified 80/20 split with a fixed internal shuffle seed.
inline double invariance_acc(const std::vector<LogitSample>& samples,
                             std::size_t num_domains) {
  if (samples.empty()) {
    throw std::invalid_argument("invariance_acc: no samples");
  }
  const std::size_t dim = samples.front().logits.size();
  std::vector<std::vector<std::size_t>> per_domain(num_domains);
  for (std::size_t i = 0; i < samples.size(); ++i) {
    if (samples[i].domain >= num_domains ||
        samples[i].logits.size() != dim) {
      throw std::invalid_argument("invariance_acc: malformed sample");
    }
    per_domain[samples[i].domain].push_back(i);
  }
  std::vector<std::size_t> present;
  for (std::size_t d = 0; d < num_domains; ++d) {
    if (!per_domain[d].empty()) present.push_back(d);
  }
  if (present.size() < 2) {
    throw std::invalid_argument(
        "invariance_acc: need at least two domains represented");
  }
  for (std::size_t d : present) {
    if (per_domain[d].size() < 10) {
      throw std::invalid_argument(
          "invariance_acc: need >= 10 samples per represented domain");
    }
  }
  std::vector<std::size_t> dense(num_domains, 0);
  for (std::size_t k = 0; k < present.size(); ++k) dense[present[k]] = k;
  const std::size_t classes = present.size();

  // stratified 80/20 split, deterministic
  Rng rng(0x1acc);
  std::vector<std::size_t> train_ids, eval_ids;
  for (std::size_t d : present) {
    auto ids = per_domain[d];
    for (std::size_t i = ids.size(); i > 1; --i) {
      std::swap(ids[i - 1], ids[rng.uniform_index(i)]);
    }
    const std::size_t n_train = (ids.size() * 8) / 10;
    for (std::size_t i = 0; i < ids.size(); ++i) {
      (i < n_train ? train_ids : eval_ids).push_back(ids[i]);
    }
  }

  const double reg = 1e-3;
  const std::size_t n = train_ids.size();

  // Lipschitz bound for multinomial logistic loss: 0.5 * lmax(X^T X)/n + reg
  std::vector<double> gram(dim * dim, 0.0);
  for (std::size_t id : train_ids) {
    const auto& x = samples[id].logits;
    for (std::size_t a = 0; a < dim; ++a) {
      for (std::size_t b = 0; b < dim; ++b) {
        gram[a * dim + b] += x[a] * x[b];
      }
    }
  }
  std::vector<double> v(dim, 1.0), nv(dim);
  double lmax = 1.0;
  for (int it = 0; it < 100; ++it) {
    for (std::size_t a = 0; a < dim; ++a) {
      double s = 0.0;
      for (std::size_t b = 0; b < dim; ++b) s += gram[a * dim + b] * v[b];
      nv[a] = s;
    }
    double norm = 0.0;
    for (double x : nv) norm += x * x;
    norm = std::sqrt(norm);
    if (norm == 0.0) break;
    lmax = norm;
    for (std::size_t a = 0; a < dim; ++a) v[a] = nv[a] / norm;
  }
  const double lips = 0.5 * lmax / static_cast<double>(n) + reg;
  const double step = 1.0 / lips;

  std::vector<double> w(classes * dim, 0.0), b(classes, 0.0);
  std::vector<double> gw(classes * dim), gb(classes), scores(classes);
  for (std::size_t iter = 0; iter < 10000; ++iter) {
    std::fill(gw.begin(), gw.end(), 0.0);
    std::fill(gb.begin(), gb.end(), 0.0);
    for (std::size_t id : train_ids) {
      const auto& x = samples[id].logits;
      const std::size_t y = dense[samples[id].domain];
      double mx = -1e300;
      for (std::size_t c = 0; c < classes; ++c) {
        double s = b[c];
        for (std::size_t a = 0; a < dim; ++a) s += w[c * dim + a] * x[a];
        scores[c] = s;
        mx = std::max(mx, s);
      }
      double z = 0.0;
      for (std::size_t c = 0; c < classes; ++c) {
        scores[c] = std::exp(scores[c] - mx);
        z += scores[c];
      }
      for (std::size_t c = 0; c < classes; ++c) {
        const double p = scores[c] / z;
        const double g = p - (c == y ? 1.0 : 0.0);
        gb[c] += g;
        for (std::size_t a = 0; a < dim; ++a) {
          gw[c * dim + a] += g * x[a];
        }
      }
    }
    double grad_norm = 0.0;
    const double inv_n = 1.0 / static_cast<double>(n);
    for (std::size_t i = 0; i < gw.size(); ++i) {
      gw[i] = gw[i] * inv_n + reg * w[i];
      grad_norm += gw[i] * gw[i];
    }
    for (std::size_t c = 0; c < classes; ++c) {
      gb[c] *= inv_n;
      grad_norm += gb[c] * gb[c];
    }
    if (std::sqrt(grad_norm) < 1e-6) break;
    for (std::size_t i = 0; i < gw.size(); ++i) w[i] -= step * gw[i];
    for (std::size_t c = 0; c < classes; ++c) b[c] -= step * gb[c];
  }

  std::size_t hit = 0;
  for (std::size_t id : eval_ids) {
    const auto& x = samples[id].logits;
    std::size_t arg = 0;
    double best = -1e300;
    for (std::size_t c = 0; c < classes; ++c) {
      double s = b[c];
      for (std::size_t a = 0; a < dim; ++a) s += w[c * dim + a] * x[a];
      if (s > best) {
        best = s;
        arg = c;
      }
    }
    if (arg == dense[samples[id].domain]) ++hit;
  }
  return static_cast<double>(hit) / static_cast<double>(eval_ids.size());
}

// ---------------------------------------------------------------------------
// KDE-based KL divergence
// ---------------------------------------------------------------------------

// Silverman rule of thumb with an interquartile-range guard and a small floor
// for (near-)constant samples.
inline double silverman_bandwidth(const std::vector<double>& xs) {
  const std::size_t n = xs.size();
  if (n < 2) return 1e-6;
  double mean = 0.0;
  for (double x : xs) mean += x;
  mean /= static_cast<double>(n);
  double ss = 0.0;
  for (double x : xs) ss += (x - mean) * (x - mean);
  const double sd = std::sqrt(ss / static_cast<double>(n - 1));
  std::vector<double> sorted = xs;
  std::sort(sorted.begin(), sorted.end());
  const double q1 = sorted[(n - 1) / 4];
  const double q3 = sorted[(3 * (n - 1)) / 4];
  const double iqr = q3 - q1;
  double spread = sd;
  if (iqr > 0.0) spread = std::min(spread, iqr / 1.34);
  const double h =
      0.9 * spread * std::pow(static_cast<double>(n), -0.2);
  return h > 0.0 ? h : 1e-6;
}

// log of the Gaussian-KDE density, evaluated in log-space so far-from-support
// queries stay finite.
inline double kde_log_density(const std::vector<double>& xs, double h,
                              double x) {
  double mx = -1e300;
  for (double xk : xs) {
    const double t = -(x - xk) * (x - xk) / (2.0 * h * h);
    mx = std::max(mx, t);
  }
  double z = 0.0;
  for (double xk : xs) {
    z += std::exp(-(x - xk) * (x - xk) / (2.0 * h * h) - mx);
  }
  return mx + std::log(z) -
         std::log(static_cast<double>(xs.size()) * h *
                  std::sqrt(2.0 * std::numbers::pi));
}

// Monte-Carlo KL(P | Q) between 1-D KDEs, evaluated at P's own samples and
// floored at zero (the estimate is noisy for close distributions; KL itself
// is nonnegative).
inline double kde_kl_1d(const std::vector<double>& p_samples,
                        const std::vector<double>& q_samples) {
  if (p_samples.size() < 2 || q_samples.size() < 2) {
    throw std::invalid_argument("kde_kl_1d: need >= 2 samples per side");
  }
  const double hp = silverman_bandwidth(p_samples);
  const double hq = silverman_bandwidth(q_samples);
  double acc = 0.0;
  for (double x : p_samples) {
    acc += kde_log_density(p_samples, hp, x) -
           kde_log_density(q_samples, hq, x);
  }
  const double kl = acc / static_cast<double>(p_samples.size());
  return kl > 0.0 ? kl : 0.0;
}

// Per-coordinate product-kernel KL between two logit clouds: mean of the 1-D
// KL estimates across coordinates.
inline double kde_kl(const std::vector<std::vector<double>>& p,
                     const std::vector<std::vector<double>>& q) {
  if (p.size() < 2 || q.size() < 2 || p.front().empty() ||
      p.front().size() != q.front().size()) {
    throw std::invalid_argument("kde_kl: malformed sample matrices");
  }
  const std::size_t dim = p.front().size();
  std::vector<double> pc(p.size()), qc(q.size());
  double total = 0.0;
  for (std::size_t a = 0; a < dim; ++a) {
    for (std::size_t i = 0; i < p.size(); ++i) pc[i] = p[i][a];
    for (std::size_t i = 0; i < q.size(); ++i) qc[i] = q[i][a];
    total += kde_kl_1d(pc, qc);
  }
  return total / static_cast<double>(dim);
}

struct InvarianceKl {
  double i_kl = 0.0;
  std::size_t triples_evaluated = 0;
  std::size_t cells_skipped = 0;
};

// Mean pairwise KL between per-(class,domain) logit distributions; cells with
// fewer than min_per_cell samples are skipped and the average renormalised
// over the evaluated (c,d,d') triples. d == d' terms are exactly zero and
// counted as evaluated.
inline InvarianceKl invariance_kl(const std::vector<LogitSample>& samples,
                                  std::size_t num_classes,
                                  std::size_t num_domains,
                                  std::size_t min_per_cell = 5) {
  std::map<std::pair<std::size_t, std::size_t>,
           std::vector<std::vector<double>>>
      cells;
  for (const LogitSample& s : samples) {
    cells[{s.label, s.domain}].push_back(s.logits);
  }
  InvarianceKl out;
  double total = 0.0;
  for (std::size_t c = 0; c < num_classes; ++c) {
    std::vector<std::size_t> valid;
    for (std::size_t d = 0; d < num_domains; ++d) {
      auto it = cells.find({c, d});
      if (it != cells.end() && it->second.size() >= min_per_cell) {
        valid.push_back(d);
      } else {
        ++out.cells_skipped;
      }
    }
    for (std::size_t a : valid) {
      for (std::size_t b : valid) {
        ++out.triples_evaluated;
        if (a == b) continue;  // identical sample set: exactly zero
        total += kde_kl(cells[{c, a}], cells[{c, b}]);
      }
    }
  }
  if (out.triples_evaluated == 0) {
    throw std::invalid_argument(
        "invariance_kl: every (class,domain) cell is under-populated");
  }
  out.i_kl = total / static_cast<double>(out.triples_evaluated);
  return out;
}

// ---------------------------------------------------------------------------
// run report
// ---------------------------------------------------------------------------

struct RunReport {
  std::string protocol;
  nlohmann::json resolved_config;  // full config the run executed with
  std::string method;
  std::string sampler;
  std::uint64_t seed = 0;
  std::string config_hash;
  std::vector<double> per_domain_accuracy;
  double average_accuracy = 0.0;
  double worst_domain_accuracy = 0.0;
  double overall_accuracy = 0.0;
  double macro_f1 = 0.0;
  std::vector<double> per_class_accuracy;
  std::vector<std::string> bucket_names;
  std::vector<double> bucket_accuracy;
  std::optional<double> i_acc;
  std::optional<double> i_kl;
};

inline void to_json(nlohmann::json& j, const RunReport& r) {
  j = nlohmann::json{{"format_version", 1},
                     {"resolved_config", r.resolved_config},
                     {"protocol", r.protocol},
                     {"method", r.method},
                     {"sampler", r.sampler},
                     {"seed", r.seed},
                     {"config_hash", r.config_hash},
                     {"per_domain_accuracy", r.per_domain_accuracy},
                     {"average_accuracy", r.average_accuracy},
                     {"worst_domain_accuracy", r.worst_domain_accuracy},
                     {"overall_accuracy", r.overall_accuracy},
                     {"macro_f1", r.macro_f1},
                     {"per_class_accuracy", r.per_class_accuracy},
                     {"bucket_names", r.bucket_names},
                     {"bucket_accuracy", r.bucket_accuracy}};
  j["i_acc"] = r.i_acc ? nlohmann::json(*r.i_acc) : nlohmann::json(nullptr);
  j["i_kl"] = r.i_kl ? nlohmann::json(*r.i_kl) : nlohmann::json(nullptr);
}

inline void from_json(const nlohmann::json& j, RunReport& r) {
  r.resolved_config = j.value("resolved_config", nlohmann::json());
  j.at("protocol").get_to(r.protocol);
  j.at("method").get_to(r.method);
  j.at("sampler").get_to(r.sampler);
  j.at("seed").get_to(r.seed);
  j.at("config_hash").get_to(r.config_hash);
  j.at("per_domain_accuracy").get_to(r.per_domain_accuracy);
  j.at("average_accuracy").get_to(r.average_accuracy);
  j.at("worst_domain_accuracy").get_to(r.worst_domain_accuracy);
  j.at("overall_accuracy").get_to(r.overall_accuracy);
  j.at("macro_f1").get_to(r.macro_f1);
  j.at("per_class_accuracy").get_to(r.per_class_accuracy);
  j.at("bucket_names").get_to(r.bucket_names);
  j.at("bucket_accuracy").get_to(r.bucket_accuracy);
  if (!j.at("i_acc").is_null()) r.i_acc = j.at("i_acc").get<double>();
  if (!j.at("i_kl").is_null()) r.i_kl = j.at("i_kl").get<double>();
}

inline std::string report_csv_header() {
  return "method,protocol,sampler,seed,average_accuracy,"
         "worst_domain_accuracy,overall_accuracy,macro_f1,bucket_XL,bucket_L,"
         "bucket_M,bucket_S,bucket_XS,i_acc,i_kl,config_hash";
}

inline std::string report_csv_row(const RunReport& r) {
  auto num = [](double v) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.10g", v);
    return std::string(buf);
  };
  std::string row = r.method + "," + r.protocol + "," + r.sampler + "," +
                    std::to_string(r.seed) + "," + num(r.average_accuracy) +
                    "," + num(r.worst_domain_accuracy) + "," +
                    num(r.overall_accuracy) + "," + num(r.macro_f1);
  for (std::size_t i = 0; i < 5; ++i) {
    row += ",";
    if (i < r.bucket_accuracy.size() && r.bucket_names.size() == 5) {
      row += num(r.bucket_accuracy[i]);
    }
  }
  row += ",";
  if (r.i_acc) row += num(*r.i_acc);
  row += ",";
  if (r.i_kl) row += num(*r.i_kl);
  row += "," + r.config_hash;
  return row;
}

}  // namespace tally
