// tally: synthetic multi-domain long-tailed experiments from the command
// line. Subcommands: generate, train, eval, sweep, report.
// Exit codes: 0 success, 2 configuration error, 3 runtime/numeric error.

#include <cstdint>
#include <exception>
#include <filesystem>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "tally/experiment.hpp"

namespace {

using namespace tally;

std::vector<std::uint64_t> parse_seed_list(const std::string& text) {
  std::vector<std::uint64_t> seeds;
  std::size_t pos = 0;
  while (pos < text.size()) {
    std::size_t comma = text.find(',', pos);
    if (comma == std::string::npos) comma = text.size();
    const std::string token = text.substr(pos, comma - pos);
    const std::size_t dots = token.find("..");
    if (dots != std::string::npos) {
      const std::uint64_t lo = std::stoull(token.substr(0, dots));
      const std::uint64_t hi = std::stoull(token.substr(dots + 2));
      if (hi < lo) throw std::invalid_argument("bad seed range: " + token);
      for (std::uint64_t s = lo; s <= hi; ++s) seeds.push_back(s);
    } else if (!token.empty()) {
      seeds.push_back(std::stoull(token));
    }
    pos = comma + 1;
  }
  if (seeds.empty()) throw std::invalid_argument("empty seed list");
  return seeds;
}

std::vector<Method> parse_method_list(const std::string& text) {
  std::vector<Method> methods;
  std::size_t pos = 0;
  while (pos < text.size()) {
    std::size_t comma = text.find(',', pos);
    if (comma == std::string::npos) comma = text.size();
    const std::string token = text.substr(pos, comma - pos);
    if (!token.empty()) methods.push_back(method_from_name(token));
    pos = comma + 1;
  }
  if (methods.empty()) throw std::invalid_argument("empty method list");
  return methods;
}

struct CommonFlags {
  std::string config_path;
  std::string spec_path;
  std::string method;
  std::string sampler;
  std::string protocol;
  std::string seeds;
  std::string out;
  std::string loss;
  std::string prototype_recompute;
  double alpha_c = -1, alpha_d = -1, gamma = -1, lr = -1, weight_decay = -1;
  double mix_original = -1, focal_gamma = -1, noise_std = -1;
  long long warm_start = -1, layer_r = -1, epochs = -1, steps = -1,
            batch = -1, hidden = -1;
  bool detach_nuisance = false;
};

void add_train_flags(CLI::App* cmd, CommonFlags& f) {
  cmd->add_option("--config", f.config_path,
                  "experiment config JSON (flags override it)");
  cmd->add_option("--spec", f.spec_path,
                  "dataset: spec JSON file or generated dataset directory");
  cmd->add_option("--method", f.method,
                  "erm|tally|tally_none|tally_c_only|tally_d_only");
  cmd->add_option("--sampler", f.sampler,
                  "selective|group_balanced|empirical|algorithm1_uniform");
  cmd->add_option("--protocol", f.protocol, "subpop|domainshift");
  cmd->add_option("--seeds", f.seeds, "e.g. 0..4 or 1,3,5");
  cmd->add_option("--warm-start", f.warm_start, "warm start epochs T0");
  cmd->add_option("--alpha-c", f.alpha_c, "Beta concentration for lambda_c");
  cmd->add_option("--alpha-d", f.alpha_d, "Beta concentration for lambda_d");
  cmd->add_option("--gamma", f.gamma, "prototype EMA momentum");
  cmd->add_option("--layer-r", f.layer_r,
                  "conv blocks before the augmented layer");
  cmd->add_flag("--detach-nuisance", f.detach_nuisance,
                "cut gradients through the nuisance donor's statistics");
  cmd->add_option("--mix-original", f.mix_original,
                  "probability of training on the original representation");
  cmd->add_option("--epochs", f.epochs, "total epochs");
  cmd->add_option("--steps", f.steps, "steps per epoch");
  cmd->add_option("--batch", f.batch, "batch size (pairs per step)");
  cmd->add_option("--lr", f.lr, "learning rate");
  cmd->add_option("--weight-decay", f.weight_decay, "weight decay");
  cmd->add_option("--loss", f.loss, "cross_entropy|focal");
  cmd->add_option("--focal-gamma", f.focal_gamma, "focal loss gamma");
  cmd->add_option("--prototype-recompute", f.prototype_recompute,
                  "streaming|full");
  cmd->add_option("--hidden-channels", f.hidden, "hidden channel count");
  cmd->add_option("--out", f.out, "output directory");
}

ExperimentConfig resolve_config(const CommonFlags& f) {
  ExperimentConfig cfg;
  if (!f.config_path.empty()) {
    if (!std::filesystem::is_regular_file(f.config_path)) {
      throw std::invalid_argument("config file not found: " + f.config_path);
    }
    cfg = nlohmann::json::parse(read_text_file(f.config_path))
              .get<ExperimentConfig>();
  }
  if (!f.spec_path.empty()) {
    if (std::filesystem::is_directory(f.spec_path)) {
      cfg.dataset_path = f.spec_path;
    } else if (std::filesystem::is_regular_file(f.spec_path)) {
      cfg.dataset =
          nlohmann::json::parse(read_text_file(f.spec_path)).get<DatasetSpec>();
      cfg.dataset_path.reset();
    } else {
      throw std::invalid_argument("dataset spec not found: " + f.spec_path);
    }
  }
  if (!f.method.empty()) cfg.method = method_from_name(f.method);
  if (!f.sampler.empty()) cfg.train.sampler = sampler_from_name(f.sampler);
  if (!f.protocol.empty()) cfg.protocol = protocol_from_name(f.protocol);
  if (!f.seeds.empty()) cfg.seeds = parse_seed_list(f.seeds);
  if (f.warm_start >= 0)
    cfg.train.warm_start_epochs = static_cast<std::size_t>(f.warm_start);
  if (f.alpha_c >= 0) cfg.train.alpha_c = f.alpha_c;
  if (f.alpha_d >= 0) cfg.train.alpha_d = f.alpha_d;
  if (f.gamma >= 0) cfg.train.gamma = f.gamma;
  if (f.layer_r >= 1)
    cfg.network.conv_blocks_before_r = static_cast<std::size_t>(f.layer_r);
  if (f.detach_nuisance) cfg.train.detach_nuisance = true;
  if (f.mix_original >= 0) cfg.train.mix_original = f.mix_original;
  if (f.epochs >= 0) cfg.train.epochs = static_cast<std::size_t>(f.epochs);
  if (f.steps >= 1)
    cfg.train.steps_per_epoch = static_cast<std::size_t>(f.steps);
  if (f.batch >= 1) cfg.train.batch_size = static_cast<std::size_t>(f.batch);
  if (f.lr >= 0) cfg.train.learning_rate = f.lr;
  if (f.weight_decay >= 0) cfg.train.weight_decay = f.weight_decay;
  if (!f.loss.empty()) cfg.train.loss = loss_from_name(f.loss);
  if (f.focal_gamma >= 0) cfg.train.focal_gamma = f.focal_gamma;
  if (!f.prototype_recompute.empty()) {
    cfg.train.prototype_recompute =
        recompute_from_name(f.prototype_recompute);
  }
  if (f.hidden >= 1)
    cfg.network.hidden_channels = static_cast<std::size_t>(f.hidden);
  if (!f.out.empty()) cfg.out_dir = f.out;
  cfg.validate();
  return cfg;
}

int cmd_generate(const DatasetSpec& spec, const std::string& out) {
  SynthDataset ds = generate(spec);
  save_dataset(ds, out);
  std::cout << "dataset written to " << out << " (train " << ds.train.size()
            << ", val " << ds.val.size() << ", test " << ds.test.size()
            << ")\n";
  for (std::size_t d = 0; d < ds.measured_rho.size(); ++d) {
    std::cout << "  domain " << d << " measured imbalance ratio "
              << ds.measured_rho[d] << "\n";
  }
  return 0;
}

int cmd_train(const CommonFlags& flags) {
  ExperimentConfig cfg = resolve_config(flags);
  SynthDataset ds = load_or_generate(cfg);
  std::vector<RunReport> reports;
  for (std::uint64_t seed : cfg.seeds) {
    const auto dir = std::filesystem::path(cfg.out_dir) /
                     (std::string(method_name(cfg.method)) + "_seed" +
                      std::to_string(seed));
    RunReport r = run_single(cfg, cfg.method, seed, ds, dir);
    std::cout << method_name(cfg.method) << " seed " << seed
              << ": avg_acc=" << r.average_accuracy
              << " worst=" << r.worst_domain_accuracy
              << " macro_f1=" << r.macro_f1 << "\n";
    reports.push_back(std::move(r));
  }
  return 0;
}

int cmd_eval(const std::string& checkpoint, const std::string& dataset_dir,
             const std::string& protocol, const std::string& out_file) {
  Network net = load_network_from_trainer_checkpoint(checkpoint);
  SynthDataset ds = load_dataset(dataset_dir);
  const Protocol proto = protocol_from_name(protocol);
  EvalOutcome outcome = evaluate(net, ds.test, proto);
  RunReport report;
  report.protocol = protocol_name(proto);
  report.method = "checkpoint";
  report.sampler = "";
  report.seed = 0;
  report.config_hash = "";
  report.per_domain_accuracy = outcome.per_domain_accuracy;
  report.average_accuracy = outcome.average_accuracy;
  report.worst_domain_accuracy = outcome.worst_domain_accuracy;
  report.overall_accuracy = outcome.overall_accuracy;
  report.macro_f1 = outcome.macro_f1;
  report.per_class_accuracy = outcome.per_class_accuracy;
  BucketReport buckets = bucket_accuracy(outcome.per_class_accuracy,
                                         pooled_class_counts(ds.train));
  report.bucket_names = buckets.names;
  report.bucket_accuracy = buckets.accuracy;
  if (proto == Protocol::subpopulation) {
    try {
      report.i_acc = invariance_acc(outcome.samples, ds.test.num_domains);
      report.i_kl = invariance_kl(outcome.samples, ds.test.num_classes,
                                  ds.test.num_domains)
                        .i_kl;
    } catch (const std::invalid_argument&) {
      // test split too small for the probes; leave the fields null
    }
  }
  const std::string dump = nlohmann::json(report).dump(2) + "\n";
  if (out_file.empty()) {
    std::cout << dump;
  } else {
    write_text_file(out_file, dump);
    std::cout << "report written to " << out_file << "\n";
  }
  return 0;
}

int cmd_sweep(const CommonFlags& flags, const std::string& methods_text,
              std::size_t workers) {
  ExperimentConfig cfg = resolve_config(flags);
  const auto methods = methods_text.empty()
                           ? std::vector<Method>{cfg.method}
                           : parse_method_list(methods_text);
  SynthDataset ds = load_or_generate(cfg);
  auto reports = run_sweep(cfg, methods, cfg.seeds, ds, cfg.out_dir, workers);
  auto rows = write_report_bundle(reports, cfg.out_dir);
  std::cout << "sweep complete: " << reports.size() << " runs under "
            << cfg.out_dir << "\n";
  for (const auto& row : rows) {
    std::cout << "  " << row.method << " (" << row.protocol << ", "
              << row.sampler << ", n=" << row.n << "): avg_acc "
              << row.avg_mean << " +/- " << row.avg_std << "\n";
  }
  return 0;
}

int cmd_report(const std::vector<std::string>& run_dirs,
               const std::string& out) {
  std::vector<std::filesystem::path> roots(run_dirs.begin(), run_dirs.end());
  auto reports = collect_reports(roots);
  if (reports.empty()) {
    throw std::invalid_argument("report: no report.json files found");
  }
  auto rows = write_report_bundle(reports, out);
  std::cout << "aggregated " << reports.size() << " runs into " << out
            << "\n";
  for (const auto& row : rows) {
    std::cout << "  " << row.method << " (" << row.protocol
              << ", n=" << row.n << "): avg_acc " << row.avg_mean << " +/- "
              << row.avg_std << ", macro_f1 " << row.f1_mean << "\n";
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"synthetic multi-domain long-tailed training and evaluation"};
  app.require_subcommand(1);

  // generate
  auto* gen = app.add_subcommand("generate", "materialise a synthetic dataset");
  DatasetSpec spec;
  std::string gen_out = "dataset";
  std::string gen_spec_file, gen_correlation, gen_domain_mode;
  long long gen_classes = -1, gen_domains = -1, gen_side = -1,
            gen_channels = -1, gen_head = -1, gen_val = -1, gen_test = -1,
            gen_seed = -1, gen_variants = -1;
  double gen_rho = -1, gen_noise = -1;
  gen->add_option("--spec", gen_spec_file, "dataset spec JSON file");
  gen->add_option("--classes", gen_classes, "number of classes");
  gen->add_option("--domains", gen_domains, "number of domains");
  gen->add_option("--rho", gen_rho, "per-domain imbalance ratio");
  gen->add_option("--head-count", gen_head, "largest class count per domain");
  gen->add_option("--side", gen_side, "image side length");
  gen->add_option("--channels", gen_channels, "image channels");
  gen->add_option("--noise-std", gen_noise, "pixel noise std");
  gen->add_option("--correlation", gen_correlation,
                  "cyclic_shift|independent");
  gen->add_option("--domain-mode", gen_domain_mode, "affine|warp");
  gen->add_option("--variants", gen_variants,
                  "template variants per class");
  gen->add_option("--val-per-cell", gen_val, "val examples per (class,domain)");
  gen->add_option("--test-per-cell", gen_test,
                  "test examples per (class,domain)");
  gen->add_option("--seed", gen_seed, "generation seed");
  gen->add_option("--out", gen_out, "output directory")->required();

  // train
  auto* train = app.add_subcommand("train", "train and evaluate one method");
  CommonFlags train_flags;
  add_train_flags(train, train_flags);

  // eval
  auto* eval = app.add_subcommand("eval", "evaluate a saved checkpoint");
  std::string eval_ckpt, eval_dataset, eval_protocol = "subpop", eval_out;
  eval->add_option("--checkpoint", eval_ckpt, "trainer checkpoint directory")
      ->required();
  eval->add_option("--dataset", eval_dataset, "dataset directory")->required();
  eval->add_option("--protocol", eval_protocol, "subpop|domainshift");
  eval->add_option("--out", eval_out, "report JSON path (stdout if omitted)");

  // sweep
  auto* sweep = app.add_subcommand("sweep", "method x seed grid");
  CommonFlags sweep_flags;
  std::string sweep_methods;
  std::size_t sweep_workers = 0;
  add_train_flags(sweep, sweep_flags);
  sweep->add_option("--methods", sweep_methods,
                    "comma list, e.g. erm,tally");
  sweep->add_option("--workers", sweep_workers,
                    "worker threads (default: hardware)");

  // report
  auto* rep = app.add_subcommand("report", "aggregate run directories");
  std::vector<std::string> rep_runs;
  std::string rep_out = "report_out";
  rep->add_option("--runs", rep_runs, "run directories or report.json files")
      ->required();
  rep->add_option("--out", rep_out, "output directory for CSV/SVG");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (gen->parsed()) {
      if (!gen_spec_file.empty()) {
        spec = nlohmann::json::parse(read_text_file(gen_spec_file))
                   .get<DatasetSpec>();
      }
      if (gen_classes > 0) spec.num_classes = gen_classes;
      if (gen_domains > 0) spec.num_domains = gen_domains;
      if (gen_rho >= 1.0) spec.imbalance_ratio = gen_rho;
      if (gen_head > 0) spec.head_count = gen_head;
      if (gen_side > 0) spec.image_side = gen_side;
      if (gen_channels > 0) spec.channels = gen_channels;
      if (gen_noise >= 0) spec.noise_std = gen_noise;
      if (!gen_correlation.empty()) {
        spec.correlation_mode = correlation_from_name(gen_correlation);
      }
      if (!gen_domain_mode.empty()) {
        spec.domain_mode = domain_mode_from_name(gen_domain_mode);
      }
      if (gen_variants > 0) spec.variants_per_class = gen_variants;
      if (gen_val > 0) spec.val_per_cell = gen_val;
      if (gen_test > 0) spec.test_per_cell = gen_test;
      if (gen_seed >= 0) spec.seed = gen_seed;
      spec.validate();
      return cmd_generate(spec, gen_out);
    }
    if (train->parsed()) return cmd_train(train_flags);
    if (eval->parsed()) {
      return cmd_eval(eval_ckpt, eval_dataset, eval_protocol, eval_out);
    }
    if (sweep->parsed()) {
      return cmd_sweep(sweep_flags, sweep_methods, sweep_workers);
    }
    if (rep->parsed()) return cmd_report(rep_runs, rep_out);
  } catch (const std::invalid_argument& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const nlohmann::json::exception& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  }
  return 0;
}
