#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "tally/evaluation.hpp"
#include "tally/network.hpp"
#include "tally/serialize.hpp"
#include "tally/synthdata.hpp"
#include "tally/training.hpp"

namespace tally {

enum class Method { erm, tally, tally_none, tally_c_only, tally_d_only };

inline const char* method_name(Method m) {
  switch (m) {
    case Method::erm: return "erm";
    case Method::tally: return "tally";
    case Method::tally_none: return "tally_none";
    case Method::tally_c_only: return "tally_c_only";
    case Method::tally_d_only: return "tally_d_only";
  }
  throw std::invalid_argument("method_name: bad method");
}

inline Method method_from_name(const std::string& s) {
  if (s == "erm") return Method::erm;
  if (s == "tally") return Method::tally;
  if (s == "tally_none") return Method::tally_none;
  if (s == "tally_c_only") return Method::tally_c_only;
  if (s == "tally_d_only") return Method::tally_d_only;
  throw std::invalid_argument("unknown method: " + s);
}

inline bool method_uses_augmentation(Method m) { return m != Method::erm; }

inline AblationArm method_arm(Method m) {
  switch (m) {
    case Method::erm:
    case Method::tally: return AblationArm::full;
    case Method::tally_none: return AblationArm::none;
    case Method::tally_c_only: return AblationArm::c_only;
    case Method::tally_d_only: return AblationArm::d_only;
  }
  throw std::invalid_argument("method_arm: bad method");
}

// A fully resolved experiment: dataset (inline spec or an on-disk directory),
// method, protocol, network and train hyperparameters, seeds, output root.
struct ExperimentConfig {
  DatasetSpec dataset;
  std::optional<std::string> dataset_path;
  Method method = Method::tally;
  Protocol protocol = Protocol::subpopulation;
  NetworkConfig network;
  TrainConfig train;
  std::vector<std::uint64_t> seeds = {0};
  std::string out_dir = "runs";

  void validate() const {
    if (!dataset_path) dataset.validate();
    network.validate();
    train.validate();
    if (seeds.empty()) {
      throw std::invalid_argument("ExperimentConfig: seeds must be nonempty");
    }
  }
};

inline void to_json(nlohmann::json& j, const ExperimentConfig& c) {
  j = nlohmann::json{{"dataset", c.dataset},
                     {"method", method_name(c.method)},
                     {"protocol", protocol_name(c.protocol)},
                     {"network", c.network},
                     {"train", c.train},
                     {"seeds", c.seeds},
                     {"out_dir", c.out_dir},
                     {"format_version", 1}};
  j["dataset_path"] =
      c.dataset_path ? nlohmann::json(*c.dataset_path) : nlohmann::json(nullptr);
}

inline void from_json(const nlohmann::json& j, ExperimentConfig& c) {
  if (j.contains("dataset")) j.at("dataset").get_to(c.dataset);
  if (j.contains("dataset_path") && !j.at("dataset_path").is_null()) {
    c.dataset_path = j.at("dataset_path").get<std::string>();
  }
  c.method = method_from_name(j.value("method", std::string("tally")));
  c.protocol =
      protocol_from_name(j.value("protocol", std::string("subpopulation")));
  if (j.contains("network")) j.at("network").get_to(c.network);
  if (j.contains("train")) j.at("train").get_to(c.train);
  c.seeds = j.value("seeds", std::vector<std::uint64_t>{0});
  c.out_dir = j.value("out_dir", std::string("runs"));
}

inline SynthDataset load_or_generate(const ExperimentConfig& cfg) {
  if (cfg.dataset_path) {
    return load_dataset(*cfg.dataset_path);
  }
  return generate(cfg.dataset);
}

// Network dimensions follow the dataset; the config only chooses capacity and
// the augmentation layer.
inline NetworkConfig resolve_network(const ExperimentConfig& cfg,
                                     const Dataset& train_split) {
  NetworkConfig net = cfg.network;
  net.in_channels = train_split.channels;
  net.image_side = train_split.image_side;
  net.num_classes = train_split.num_classes;
  return net;
}

inline std::string config_hash_for_run(const ExperimentConfig& cfg,
                                        Method method, std::uint64_t seed) {
  nlohmann::json j = cfg;
  j["method"] = method_name(method);
  j["run_seed"] = seed;
  j.erase("out_dir");  // where a run is written must not change its content
  return hex64(fnv1a64(j.dump()));
}

inline void write_log_jsonl(const std::filesystem::path& path,
                            const std::vector<EpochLog>& logs) {
  std::string out;
  for (const EpochLog& log : logs) {
    out += nlohmann::json(log).dump() + "\n";
  }
  write_text_file(path, out);
}

// Pooled (over domains) per-class training counts, for the bucket split.
inline std::vector<std::size_t> pooled_class_counts(const Dataset& train) {
  std::vector<std::size_t> counts(train.num_classes, 0);
  for (const Example& ex : train.examples) {
    ++counts[ex.label];
  }
  return counts;
}

namespace detail {

inline Trainer train_for(const ExperimentConfig& cfg, Method method,
                         std::uint64_t seed, const Dataset& train_split,
                         const Dataset* val_split) {
  TrainConfig tc = cfg.train;
  tc.seed = seed;
  const NetworkConfig net = resolve_network(cfg, train_split);
  Trainer trainer(train_split, net, tc, method_arm(method),
                  method_uses_augmentation(method), val_split);
  trainer.run();
  return trainer;
}

inline RunReport base_report(const ExperimentConfig& cfg, Method method,
                             std::uint64_t seed) {
  RunReport r;
  r.protocol = protocol_name(cfg.protocol);
  r.method = method_name(method);
  r.sampler = sampler_name(cfg.train.sampler);
  r.seed = seed;
  r.config_hash = config_hash_for_run(cfg, method, seed);
  r.resolved_config = cfg;
  r.resolved_config["method"] = method_name(method);
  r.resolved_config["run_seed"] = seed;
  return r;
}

}  // namespace detail

// One (method, seed) run under the subpopulation protocol: train on the full
// training split, evaluate on the balanced test split, attach invariance
// diagnostics and bucket accuracies.
inline RunReport run_subpopulation(const ExperimentConfig& cfg, Method method,
                                   std::uint64_t seed, const SynthDataset& ds,
                                   const std::filesystem::path& run_dir) {
  std::filesystem::create_directories(run_dir);
  Trainer trainer = detail::train_for(cfg, method, seed, ds.train, &ds.val);
  write_log_jsonl(run_dir / "log.jsonl", trainer.logs());
  trainer.save_checkpoint(run_dir / "checkpoint");

  EvalOutcome outcome =
      evaluate(trainer.network(), ds.test, Protocol::subpopulation);
  RunReport report = detail::base_report(cfg, method, seed);
  report.per_domain_accuracy = outcome.per_domain_accuracy;
  report.average_accuracy = outcome.average_accuracy;
  report.worst_domain_accuracy = outcome.worst_domain_accuracy;
  report.overall_accuracy = outcome.overall_accuracy;
  report.macro_f1 = outcome.macro_f1;
  report.per_class_accuracy = outcome.per_class_accuracy;
  BucketReport buckets =
      bucket_accuracy(outcome.per_class_accuracy, pooled_class_counts(ds.train));
  report.bucket_names = buckets.names;
  report.bucket_accuracy = buckets.accuracy;
  // invariance diagnostics need enough held-out samples; tiny test splits
  // leave them null rather than failing the run
  try {
    report.i_acc = invariance_acc(outcome.samples, ds.test.num_domains);
  } catch (const std::invalid_argument&) {
  }
  try {
    report.i_kl = invariance_kl(outcome.samples, ds.test.num_classes,
                                ds.test.num_domains)
                      .i_kl;
  } catch (const std::invalid_argument&) {
  }
  write_text_file(run_dir / "report.json",
                  nlohmann::json(report).dump(2) + "\n");
  return report;
}

// One (method, seed) run under leave-one-domain-out: one training per fold,
// held-out accuracies reported per fold and averaged. Invariance metrics are
// undefined on a single held-out domain and stay null.
inline RunReport run_domain_shift(const ExperimentConfig& cfg, Method method,
                                  std::uint64_t seed, const SynthDataset& ds,
                                  const std::filesystem::path& run_dir) {
  std::filesystem::create_directories(run_dir);
  RunReport report = detail::base_report(cfg, method, seed);
  const std::size_t folds = ds.spec.num_domains;
  std::vector<double> fold_acc(folds, 0.0), fold_f1(folds, 0.0);
  std::vector<double> bucket_sum;
  std::vector<std::string> bucket_names;
  std::vector<double> class_acc_sum;
  for (std::size_t held = 0; held < folds; ++held) {
    LodoSplit split = leave_one_domain_out(ds, held);
    const auto fold_dir = run_dir / ("fold_" + std::to_string(held));
    std::filesystem::create_directories(fold_dir);
    Trainer trainer =
        detail::train_for(cfg, method, seed, split.train, nullptr);
    write_log_jsonl(fold_dir / "log.jsonl", trainer.logs());
    trainer.save_checkpoint(fold_dir / "checkpoint");
    EvalOutcome outcome =
        evaluate(trainer.network(), split.test, Protocol::domain_shift);
    fold_acc[held] = outcome.overall_accuracy;
    fold_f1[held] = outcome.macro_f1;
    BucketReport buckets = bucket_accuracy(outcome.per_class_accuracy,
                                           pooled_class_counts(split.train));
    if (bucket_sum.empty()) {
      bucket_sum.assign(buckets.accuracy.size(), 0.0);
      bucket_names = buckets.names;
      class_acc_sum.assign(outcome.per_class_accuracy.size(), 0.0);
    }
    for (std::size_t i = 0; i < bucket_sum.size(); ++i) {
      bucket_sum[i] += buckets.accuracy[i];
    }
    for (std::size_t i = 0; i < class_acc_sum.size(); ++i) {
      class_acc_sum[i] += outcome.per_class_accuracy[i];
    }

    RunReport fold_report = detail::base_report(cfg, method, seed);
    fold_report.per_domain_accuracy = {outcome.overall_accuracy};
    fold_report.average_accuracy = outcome.overall_accuracy;
    fold_report.worst_domain_accuracy = outcome.overall_accuracy;
    fold_report.overall_accuracy = outcome.overall_accuracy;
    fold_report.macro_f1 = outcome.macro_f1;
    fold_report.per_class_accuracy = outcome.per_class_accuracy;
    fold_report.bucket_names = buckets.names;
    fold_report.bucket_accuracy = buckets.accuracy;
    write_text_file(fold_dir / "report.json",
                    nlohmann::json(fold_report).dump(2) + "\n");
  }
  report.per_domain_accuracy = fold_acc;  // one entry per held-out fold
  double acc = 0.0, f1 = 0.0, worst = 1.0;
  for (std::size_t d = 0; d < folds; ++d) {
    acc += fold_acc[d];
    f1 += fold_f1[d];
    worst = std::min(worst, fold_acc[d]);
  }
  report.average_accuracy = acc / static_cast<double>(folds);
  report.overall_accuracy = report.average_accuracy;
  report.worst_domain_accuracy = worst;
  report.macro_f1 = f1 / static_cast<double>(folds);
  for (double& v : bucket_sum) v /= static_cast<double>(folds);
  for (double& v : class_acc_sum) v /= static_cast<double>(folds);
  report.bucket_names = bucket_names;
  report.bucket_accuracy = bucket_sum;
  report.per_class_accuracy = class_acc_sum;
  write_text_file(run_dir / "report.json",
                  nlohmann::json(report).dump(2) + "\n");
  return report;
}

inline RunReport run_single(const ExperimentConfig& cfg, Method method,
                            std::uint64_t seed, const SynthDataset& ds,
                            const std::filesystem::path& run_dir) {
  nlohmann::json resolved = cfg;
  resolved["method"] = method_name(method);
  resolved["run_seed"] = seed;
  std::filesystem::create_directories(run_dir);
  write_text_file(run_dir / "config.json", resolved.dump(2) + "\n");
  if (cfg.protocol == Protocol::subpopulation) {
    return run_subpopulation(cfg, method, seed, ds, run_dir);
  }
  return run_domain_shift(cfg, method, seed, ds, run_dir);
}

// method x seed grid over a worker pool; each cell owns its run directory,
// its RNGs and its trainer. The dataset is shared read-only.
inline std::vector<RunReport> run_sweep(const ExperimentConfig& cfg,
                                        const std::vector<Method>& methods,
                                        const std::vector<std::uint64_t>& seeds,
                                        const SynthDataset& ds,
                                        const std::filesystem::path& out_root,
                                        std::size_t workers = 0) {
  struct Cell {
    Method method;
    std::uint64_t seed;
  };
  std::vector<Cell> cells;
  for (Method m : methods) {
    for (std::uint64_t s : seeds) {
      cells.push_back({m, s});
    }
  }
  std::vector<RunReport> reports(cells.size());
  if (workers == 0) {
    workers = std::max<std::size_t>(1, std::thread::hardware_concurrency());
  }
  workers = std::min(workers, cells.size());
  std::atomic<std::size_t> next{0};
  std::vector<std::string> errors(cells.size());
  auto worker = [&]() {
    for (;;) {
      const std::size_t i = next.fetch_add(1);
      if (i >= cells.size()) return;
      const auto& cell = cells[i];
      const auto dir = out_root / (std::string(method_name(cell.method)) +
                                   "_seed" + std::to_string(cell.seed));
      try {
        reports[i] = run_single(cfg, cell.method, cell.seed, ds, dir);
      } catch (const std::exception& e) {
        errors[i] = e.what();
      }
    }
  };
  std::vector<std::thread> pool;
  for (std::size_t w = 0; w < workers; ++w) {
    pool.emplace_back(worker);
  }
  for (auto& t : pool) t.join();
  for (std::size_t i = 0; i < cells.size(); ++i) {
    if (!errors[i].empty()) {
      throw std::runtime_error("sweep cell " +
                               std::string(method_name(cells[i].method)) +
                               "_seed" + std::to_string(cells[i].seed) +
                               " failed: " + errors[i]);
    }
  }
  return reports;
}

// Standalone network loader for `eval`: reads architecture + parameters out
// of a trainer checkpoint without needing the training dataset.
inline Network load_network_from_trainer_checkpoint(
    const std::filesystem::path& dir) {
  const nlohmann::json manifest =
      nlohmann::json::parse(read_text_file(dir / "manifest.json"));
  const auto net_cfg = manifest.at("network_config").get<NetworkConfig>();
  Network net = Network::init(net_cfg, 0);
  auto is = open_in(dir / "state.bin");
  net.set_flat_parameters(
      read_f64_span(is, Network::parameter_count(net_cfg)));
  return net;
}

// ---------------------------------------------------------------------------
// aggregation + plots
// ---------------------------------------------------------------------------

struct AggregateRow {
  std::string method, protocol, sampler;
  std::size_t n = 0;
  double avg_mean = 0, avg_std = 0;
  double worst_mean = 0, worst_std = 0;
  double f1_mean = 0, f1_std = 0;
  std::vector<double> bucket_mean, bucket_std;  // 5 entries when present
  std::optional<double> i_acc_mean, i_acc_std, i_kl_mean, i_kl_std;
};

namespace detail {

inline std::pair<double, double> mean_std(const std::vector<double>& v) {
  if (v.empty()) return {0.0, 0.0};
  double mean = 0.0;
  for (double x : v) mean += x;
  mean /= static_cast<double>(v.size());
  if (v.size() < 2) return {mean, 0.0};
  double ss = 0.0;
  for (double x : v) ss += (x - mean) * (x - mean);
  return {mean, std::sqrt(ss / static_cast<double>(v.size() - 1))};
}

inline std::string fmt_num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.10g", v);
  return std::string(buf);
}

}  // namespace detail

inline std::vector<AggregateRow> aggregate_reports(
    std::vector<RunReport> reports) {
  std::stable_sort(reports.begin(), reports.end(),
                   [](const RunReport& a, const RunReport& b) {
                     if (a.method != b.method) return a.method < b.method;
                     if (a.protocol != b.protocol) return a.protocol < b.protocol;
                     if (a.sampler != b.sampler) return a.sampler < b.sampler;
                     return a.seed < b.seed;
                   });
  std::vector<AggregateRow> rows;
  for (std::size_t i = 0; i < reports.size();) {
    std::size_t j = i;
    while (j < reports.size() && reports[j].method == reports[i].method &&
           reports[j].protocol == reports[i].protocol &&
           reports[j].sampler == reports[i].sampler) {
      ++j;
    }
    AggregateRow row;
    row.method = reports[i].method;
    row.protocol = reports[i].protocol;
    row.sampler = reports[i].sampler;
    row.n = j - i;
    std::vector<double> avg, worst, f1, iacc, ikl;
    std::vector<std::vector<double>> buckets(5);
    bool have_buckets = true;
    for (std::size_t k = i; k < j; ++k) {
      avg.push_back(reports[k].average_accuracy);
      worst.push_back(reports[k].worst_domain_accuracy);
      f1.push_back(reports[k].macro_f1);
      if (reports[k].i_acc) iacc.push_back(*reports[k].i_acc);
      if (reports[k].i_kl) ikl.push_back(*reports[k].i_kl);
      if (reports[k].bucket_accuracy.size() == 5) {
        for (std::size_t b = 0; b < 5; ++b) {
          buckets[b].push_back(reports[k].bucket_accuracy[b]);
        }
      } else {
        have_buckets = false;
      }
    }
    std::tie(row.avg_mean, row.avg_std) = detail::mean_std(avg);
    std::tie(row.worst_mean, row.worst_std) = detail::mean_std(worst);
    std::tie(row.f1_mean, row.f1_std) = detail::mean_std(f1);
    if (have_buckets) {
      for (std::size_t b = 0; b < 5; ++b) {
        auto [m, s] = detail::mean_std(buckets[b]);
        row.bucket_mean.push_back(m);
        row.bucket_std.push_back(s);
      }
    }
    if (!iacc.empty()) {
      auto [m, s] = detail::mean_std(iacc);
      row.i_acc_mean = m;
      row.i_acc_std = s;
    }
    if (!ikl.empty()) {
      auto [m, s] = detail::mean_std(ikl);
      row.i_kl_mean = m;
      row.i_kl_std = s;
    }
    rows.push_back(std::move(row));
    i = j;
  }
  return rows;
}

inline std::string aggregate_csv(const std::vector<AggregateRow>& rows) {
  std::string out =
      "method,protocol,sampler,n,avg_acc_mean,avg_acc_std,worst_mean,"
      "worst_std,macro_f1_mean,macro_f1_std,bucket_XL_mean,bucket_L_mean,"
      "bucket_M_mean,bucket_S_mean,bucket_XS_mean,i_acc_mean,i_acc_std,"
      "i_kl_mean,i_kl_std\n";
  for (const AggregateRow& r : rows) {
    out += r.method + "," + r.protocol + "," + r.sampler + "," +
           std::to_string(r.n) + "," + detail::fmt_num(r.avg_mean) + "," +
           detail::fmt_num(r.avg_std) + "," + detail::fmt_num(r.worst_mean) +
           "," + detail::fmt_num(r.worst_std) + "," +
           detail::fmt_num(r.f1_mean) + "," + detail::fmt_num(r.f1_std);
    for (std::size_t b = 0; b < 5; ++b) {
      out += ",";
      if (b < r.bucket_mean.size()) out += detail::fmt_num(r.bucket_mean[b]);
    }
    out += ",";
    if (r.i_acc_mean) out += detail::fmt_num(*r.i_acc_mean);
    out += ",";
    if (r.i_acc_std) out += detail::fmt_num(*r.i_acc_std);
    out += ",";
    if (r.i_kl_mean) out += detail::fmt_num(*r.i_kl_mean);
    out += ",";
    if (r.i_kl_std) out += detail::fmt_num(*r.i_kl_std);
    out += "\n";
  }
  return out;
}

inline std::string runs_csv(std::vector<RunReport> reports) {
  std::stable_sort(reports.begin(), reports.end(),
                   [](const RunReport& a, const RunReport& b) {
                     if (a.method != b.method) return a.method < b.method;
                     if (a.protocol != b.protocol) return a.protocol < b.protocol;
                     return a.seed < b.seed;
                   });
  std::string out = report_csv_header() + "\n";
  for (const RunReport& r : reports) {
    out += report_csv_row(r) + "\n";
  }
  return out;
}

// Minimal grouped-bar SVG, deterministic output.
inline std::string svg_grouped_bars(
    const std::string& title, const std::vector<std::string>& categories,
    const std::vector<std::pair<std::string, std::vector<double>>>& series) {
  const int width = 640, height = 360;
  const int margin_l = 60, margin_r = 20, margin_t = 40, margin_b = 60;
  const int plot_w = width - margin_l - margin_r;
  const int plot_h = height - margin_t - margin_b;
  double vmax = 0.0;
  for (const auto& [name, values] : series) {
    for (double v : values) vmax = std::max(vmax, v);
  }
  if (vmax <= 0.0) vmax = 1.0;
  vmax *= 1.1;
  static const char* palette[] = {"#4c78a8", "#f58518", "#54a24b",
                                  "#e45756", "#72b7b2", "#b279a2"};
  char buf[256];
  std::string svg;
  std::snprintf(buf, sizeof(buf),
                "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"%d\" "
                "height=\"%d\" font-family=\"sans-serif\">\n",
                width, height);
  svg += buf;
  std::snprintf(buf, sizeof(buf),
                "<text x=\"%d\" y=\"24\" font-size=\"16\" "
                "text-anchor=\"middle\">%s</text>\n",
                width / 2, title.c_str());
  svg += buf;
  // axes
  std::snprintf(buf, sizeof(buf),
                "<line x1=\"%d\" y1=\"%d\" x2=\"%d\" y2=\"%d\" "
                "stroke=\"#333\"/>\n",
                margin_l, margin_t + plot_h, margin_l + plot_w,
                margin_t + plot_h);
  svg += buf;
  std::snprintf(buf, sizeof(buf),
                "<line x1=\"%d\" y1=\"%d\" x2=\"%d\" y2=\"%d\" "
                "stroke=\"#333\"/>\n",
                margin_l, margin_t, margin_l, margin_t + plot_h);
  svg += buf;
  for (int tick = 0; tick <= 5; ++tick) {
    const double v = vmax * tick / 5.0;
    const int y = margin_t + plot_h - static_cast<int>(plot_h * v / vmax);
    std::snprintf(buf, sizeof(buf),
                  "<text x=\"%d\" y=\"%d\" font-size=\"11\" "
                  "text-anchor=\"end\">%.2f</text>\n",
                  margin_l - 6, y + 4, v);
    svg += buf;
  }
  const std::size_t ncat = categories.size();
  const std::size_t nser = series.size();
  const double group_w = static_cast<double>(plot_w) / ncat;
  const double bar_w = group_w * 0.8 / std::max<std::size_t>(1, nser);
  for (std::size_t s = 0; s < nser; ++s) {
    for (std::size_t c = 0; c < ncat; ++c) {
      const double v = series[s].second.at(c);
      const int bh = static_cast<int>(plot_h * v / vmax);
      const double x = margin_l + group_w * c + group_w * 0.1 + bar_w * s;
      std::snprintf(
          buf, sizeof(buf),
          "<rect x=\"%.1f\" y=\"%d\" width=\"%.1f\" height=\"%d\" "
          "fill=\"%s\"/>\n",
          x, margin_t + plot_h - bh, bar_w, bh, palette[s % 6]);
      svg += buf;
    }
    std::snprintf(buf, sizeof(buf),
                  "<rect x=\"%d\" y=\"%d\" width=\"12\" height=\"12\" "
                  "fill=\"%s\"/><text x=\"%d\" y=\"%d\" "
                  "font-size=\"12\">%s</text>\n",
                  margin_l + 10 + static_cast<int>(s) * 140, margin_t - 14,
                  palette[s % 6], margin_l + 26 + static_cast<int>(s) * 140,
                  margin_t - 4, series[s].first.c_str());
    svg += buf;
  }
  for (std::size_t c = 0; c < ncat; ++c) {
    std::snprintf(buf, sizeof(buf),
                  "<text x=\"%.1f\" y=\"%d\" font-size=\"12\" "
                  "text-anchor=\"middle\">%s</text>\n",
                  margin_l + group_w * c + group_w / 2, margin_t + plot_h + 18,
                  categories[c].c_str());
    svg += buf;
  }
  svg += "</svg>\n";
  return svg;
}

// Writes runs.csv, aggregate.csv and the comparison SVGs into out_dir.
inline std::vector<AggregateRow> write_report_bundle(
    const std::vector<RunReport>& reports,
    const std::filesystem::path& out_dir) {
  if (reports.empty()) {
    throw std::invalid_argument("write_report_bundle: no reports");
  }
  std::filesystem::create_directories(out_dir);
  write_text_file(out_dir / "runs.csv", runs_csv(reports));
  auto rows = aggregate_reports(reports);
  write_text_file(out_dir / "aggregate.csv", aggregate_csv(rows));

  std::vector<std::pair<std::string, std::vector<double>>> bucket_series;
  for (const AggregateRow& row : rows) {
    if (row.bucket_mean.size() == 5) {
      bucket_series.push_back({row.method, row.bucket_mean});
    }
  }
  if (!bucket_series.empty()) {
    write_text_file(out_dir / "buckets.svg",
                    svg_grouped_bars("accuracy by class-size bucket",
                                     {"XL", "L", "M", "S", "XS"},
                                     bucket_series));
  }
  std::vector<std::string> inv_methods;
  std::vector<double> iacc_vals, ikl_vals;
  for (const AggregateRow& row : rows) {
    if (row.i_acc_mean && row.i_kl_mean) {
      inv_methods.push_back(row.method);
      iacc_vals.push_back(*row.i_acc_mean);
      ikl_vals.push_back(*row.i_kl_mean);
    }
  }
  if (!inv_methods.empty()) {
    write_text_file(out_dir / "invariance_acc.svg",
                    svg_grouped_bars("domain-probe accuracy (lower = more "
                                     "invariant)",
                                     inv_methods, {{"I_acc", iacc_vals}}));
    write_text_file(out_dir / "invariance_kl.svg",
                    svg_grouped_bars("pairwise logit KL (lower = more "
                                     "invariant)",
                                     inv_methods, {{"I_kl", ikl_vals}}));
  }
  return rows;
}

// Recursively collects report.json files (fold sub-reports excluded: a run
// directory's top-level report already aggregates them).
inline std::vector<RunReport> collect_reports(
    const std::vector<std::filesystem::path>& roots) {
  std::vector<std::filesystem::path> files;
  for (const auto& root : roots) {
    if (std::filesystem::is_regular_file(root)) {
      files.push_back(root);
      continue;
    }
    if (!std::filesystem::is_directory(root)) {
      throw std::invalid_argument("collect_reports: no such path: " +
                                  root.string());
    }
    for (const auto& entry :
         std::filesystem::recursive_directory_iterator(root)) {
      if (entry.is_regular_file() &&
          entry.path().filename() == "report.json" &&
          entry.path().parent_path().filename().string().rfind("fold_", 0) !=
              0) {
        files.push_back(entry.path());
      }
    }
  }
  std::sort(files.begin(), files.end());
  std::vector<RunReport> reports;
  for (const auto& f : files) {
    reports.push_back(
        nlohmann::json::parse(read_text_file(f)).get<RunReport>());
  }
  return reports;
}

}  // namespace tally
