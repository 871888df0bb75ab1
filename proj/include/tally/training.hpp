#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "tally/augmentation.hpp"
#include "tally/network.hpp"
#include "tally/prototypes.hpp"
#include "tally/sampling.hpp"
#include "tally/serialize.hpp"
#include "tally/synthdata.hpp"
#include "tally/tensor.hpp"

namespace tally {

enum class LossKind { cross_entropy, focal };
enum class PrototypeRecompute { streaming, full };

// Which prototype interpolations stay active. `none` pins both lambdas to 1
// (pure instance swap), `c_only`/`d_only` pin the other side.
enum class AblationArm { full, none, c_only, d_only };

inline const char* loss_name(LossKind k) {
  return k == LossKind::cross_entropy ? "cross_entropy" : "focal";
}
inline LossKind loss_from_name(const std::string& s) {
  if (s == "cross_entropy") return LossKind::cross_entropy;
  if (s == "focal") return LossKind::focal;
  throw std::invalid_argument("unknown loss: " + s);
}
inline const char* recompute_name(PrototypeRecompute r) {
  return r == PrototypeRecompute::streaming ? "streaming" : "full";
}
inline PrototypeRecompute recompute_from_name(const std::string& s) {
  if (s == "streaming") return PrototypeRecompute::streaming;
  if (s == "full") return PrototypeRecompute::full;
  throw std::invalid_argument("unknown prototype_recompute: " + s);
}
inline const char* arm_name(AblationArm a) {
  switch (a) {
    case AblationArm::full: return "full";
    case AblationArm::none: return "none";
    case AblationArm::c_only: return "c_only";
    case AblationArm::d_only: return "d_only";
  }
  throw std::invalid_argument("arm_name: bad arm");
}
inline AblationArm arm_from_name(const std::string& s) {
  if (s == "full") return AblationArm::full;
  if (s == "none") return AblationArm::none;
  if (s == "c_only") return AblationArm::c_only;
  if (s == "d_only") return AblationArm::d_only;
  throw std::invalid_argument("unknown ablation arm: " + s);
}

// Standard focal loss on unscaled logits, mean over the batch; gamma_f = 0
// reduces exactly to softmax cross-entropy (shared implementation path).
inline Tensor focal_loss(const Tensor& logits,
                         const std::vector<std::size_t>& labels,
                         double gamma_f) {
  if (gamma_f < 0.0) {
    throw std::invalid_argument("focal_loss: gamma_f must be >= 0");
  }
  return detail::softmax_focal_impl(logits, labels, gamma_f);
}

struct TrainConfig {
  double learning_rate = 1e-2;
  double weight_decay = 1e-6;
  std::size_t batch_size = 18;  // pairs per step once augmentation starts
  std::size_t epochs = 15;
  std::size_t steps_per_epoch = 100;
  std::size_t warm_start_epochs = 7;
  double gamma = 0.8;  // prototype momentum
  double alpha_c = 0.5;
  double alpha_d = 0.5;
  LossKind loss = LossKind::cross_entropy;
  double focal_gamma = 2.0;
  SamplerStrategy sampler = SamplerStrategy::selective;
  bool detach_nuisance = false;
  double mix_original = 0.0;
  PrototypeRecompute prototype_recompute = PrototypeRecompute::streaming;
  std::uint64_t seed = 0;

  void validate() const {
    if (learning_rate < 0.0) {
      throw std::invalid_argument("TrainConfig: learning_rate must be >= 0");
    }
    if (batch_size < 1) {
      throw std::invalid_argument("TrainConfig: batch_size must be >= 1");
    }
    if (warm_start_epochs > epochs) {
      throw std::invalid_argument(
          "TrainConfig: warm_start_epochs must be <= epochs");
    }
    if (steps_per_epoch < 1) {
      throw std::invalid_argument("TrainConfig: steps_per_epoch must be >= 1");
    }
    if (gamma < 0.0 || gamma >= 1.0) {
      throw std::invalid_argument("TrainConfig: gamma must be in [0,1)");
    }
    if (!(alpha_c > 0.0) || !(alpha_d > 0.0)) {
      throw std::invalid_argument("TrainConfig: alphas must be > 0");
    }
    if (mix_original < 0.0 || mix_original > 1.0) {
      throw std::invalid_argument("TrainConfig: mix_original outside [0,1]");
    }
    if (weight_decay < 0.0 || focal_gamma < 0.0) {
      throw std::invalid_argument("TrainConfig: negative weight_decay/focal_gamma");
    }
  }
};

inline void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = nlohmann::json{{"learning_rate", c.learning_rate},
                     {"weight_decay", c.weight_decay},
                     {"batch_size", c.batch_size},
                     {"epochs", c.epochs},
                     {"steps_per_epoch", c.steps_per_epoch},
                     {"warm_start_epochs", c.warm_start_epochs},
                     {"gamma", c.gamma},
                     {"alpha_c", c.alpha_c},
                     {"alpha_d", c.alpha_d},
                     {"loss", loss_name(c.loss)},
                     {"focal_gamma", c.focal_gamma},
                     {"sampler", sampler_name(c.sampler)},
                     {"detach_nuisance", c.detach_nuisance},
                     {"mix_original", c.mix_original},
                     {"prototype_recompute", recompute_name(c.prototype_recompute)},
                     {"seed", c.seed}};
}

inline void from_json(const nlohmann::json& j, TrainConfig& c) {
  TrainConfig d;
  c.learning_rate = j.value("learning_rate", d.learning_rate);
  c.weight_decay = j.value("weight_decay", d.weight_decay);
  c.batch_size = j.value("batch_size", d.batch_size);
  c.epochs = j.value("epochs", d.epochs);
  c.steps_per_epoch = j.value("steps_per_epoch", d.steps_per_epoch);
  c.warm_start_epochs = j.value("warm_start_epochs", d.warm_start_epochs);
  c.gamma = j.value("gamma", d.gamma);
  c.alpha_c = j.value("alpha_c", d.alpha_c);
  c.alpha_d = j.value("alpha_d", d.alpha_d);
  c.loss = loss_from_name(j.value("loss", std::string("cross_entropy")));
  c.focal_gamma = j.value("focal_gamma", d.focal_gamma);
  c.sampler = sampler_from_name(j.value("sampler", std::string("selective")));
  c.detach_nuisance = j.value("detach_nuisance", d.detach_nuisance);
  c.mix_original = j.value("mix_original", d.mix_original);
  c.prototype_recompute = recompute_from_name(
      j.value("prototype_recompute", std::string("streaming")));
  c.seed = j.value("seed", d.seed);
}

struct EpochLog {
  std::size_t epoch = 0;
  double train_loss = 0.0;
  std::optional<double> val_loss;
  double lr = 0.0;
  std::string sampler;
  std::uint64_t seed = 0;
};

inline void to_json(nlohmann::json& j, const EpochLog& l) {
  j = nlohmann::json{{"epoch", l.epoch},
                     {"train_loss", l.train_loss},
                     {"lr", l.lr},
                     {"sampler", l.sampler},
                     {"seed", l.seed}};
  if (l.val_loss) {
    j["val_loss"] = *l.val_loss;
  } else {
    j["val_loss"] = nullptr;
  }
}

inline void from_json(const nlohmann::json& j, EpochLog& l) {
  j.at("epoch").get_to(l.epoch);
  j.at("train_loss").get_to(l.train_loss);
  j.at("lr").get_to(l.lr);
  j.at("sampler").get_to(l.sampler);
  j.at("seed").get_to(l.seed);
  if (j.contains("val_loss") && !j.at("val_loss").is_null()) {
    l.val_loss = j.at("val_loss").get<double>();
  } else {
    l.val_loss.reset();
  }
}

// One optimisation step's bookkeeping, handed to the test observer.
struct StepInfo {
  std::size_t epoch = 0;
  std::size_t global_step = 0;
  bool augmented = false;
  std::vector<std::size_t> ids_i;   // semantic donors (or the warm batch)
  std::vector<std::size_t> ids_j;   // nuisance donors (empty on warm steps)
  std::vector<std::size_t> labels;  // targets used by the loss
  std::vector<double> lambda_c;     // per-slot coefficients, augmented steps
  std::vector<double> lambda_d;
  double loss = 0.0;
  std::size_t bank_commits = 0;
};

// Training loop. Warm epochs run plain empirical-risk updates; once the bank
// has its first commit, every step draws pairs, builds augmented hidden
// representations and trains the post-layers on them (the pre-layers receive
// gradients through both donors). With `use_augmentation == false` the loop
// is the plain baseline trainer for every epoch.
class Trainer {
 public:
  Trainer(const Dataset& train_data, const NetworkConfig& net_cfg,
          const TrainConfig& cfg, AblationArm arm = AblationArm::full,
          bool use_augmentation = true, const Dataset* val_data = nullptr)
      : data_(&train_data),
        val_data_(val_data),
        cfg_(cfg),
        arm_(arm),
        use_augmentation_(use_augmentation),
        rng_(cfg.seed ^ 0x9E3779B97F4A7C15ull) {
    cfg_.validate();
    net_cfg.validate();
    if (net_cfg.in_channels != train_data.channels ||
        net_cfg.image_side != train_data.image_side ||
        net_cfg.num_classes != train_data.num_classes) {
      throw std::invalid_argument(
          "Trainer: network config does not match dataset dimensions");
    }
    if (use_augmentation_ && cfg_.warm_start_epochs == 0 &&
        cfg_.epochs > 0) {
      throw std::invalid_argument(
          "Trainer: augmentation needs warm_start_epochs >= 1 so the bank "
          "has a committed estimate before the first augmented step");
    }
    net_ = Network::init(net_cfg, cfg_.seed);
    index_ = GroupIndex::build(train_data.examples, train_data.num_classes,
                               train_data.num_domains);
    if (index_.total == 0) {
      throw std::invalid_argument("Trainer: empty training dataset");
    }
    bank_ = PrototypeBank(train_data.num_classes, train_data.num_domains,
                          net_cfg.hidden_channels, net_cfg.image_side,
                          net_cfg.image_side, cfg_.gamma);
    momentum_.clear();
    for (const Tensor& p : net_.parameters()) {
      momentum_.emplace_back(p.numel(), 0.0);
    }
  }

  std::size_t total_steps() const { return cfg_.epochs * cfg_.steps_per_epoch; }
  std::size_t global_step() const { return global_step_; }
  std::size_t epoch() const { return global_step_ / cfg_.steps_per_epoch; }
  bool done() const { return global_step_ >= total_steps(); }

  const Network& network() const { return net_; }
  Network& network() { return net_; }
  const PrototypeBank& bank() const { return bank_; }
  const TrainConfig& config() const { return cfg_; }
  AblationArm arm() const { return arm_; }
  bool augmentation_enabled() const { return use_augmentation_; }
  const std::vector<EpochLog>& logs() const { return logs_; }

  void set_step_observer(std::function<void(const StepInfo&)> obs) {
    observer_ = std::move(obs);
  }

  // Mean loss over the given examples with current parameters, no gradients,
  // no RNG consumption.
  double eval_loss(const std::vector<std::size_t>& ids) const {
    if (ids.empty()) {
      throw std::invalid_argument("eval_loss: empty id list");
    }
    Tensor x = data_->batch_tensor(ids);
    std::vector<std::size_t> labels(ids.size());
    for (std::size_t b = 0; b < ids.size(); ++b) {
      labels[b] = data_->examples[ids[b]].label;
    }
    Tensor logits = net_.forward(x);
    return loss_of(logits, labels).value();
  }

  bool step() {
    if (done()) return false;
    const std::size_t e = epoch();
    const bool warm = !use_augmentation_ || e < cfg_.warm_start_epochs;
    StepInfo info;
    info.epoch = e;
    info.global_step = global_step_;
    info.augmented = !warm;
    info.bank_commits = bank_.commit_count();
    if (warm) {
      warm_step(info);
    } else {
      augmented_step(info);
    }
    epoch_loss_sum_ += info.loss;
    ++epoch_step_count_;
    ++global_step_;
    if (observer_) observer_(info);
    if (global_step_ % cfg_.steps_per_epoch == 0) {
      end_of_epoch(e);
    }
    return true;
  }

  void run() {
    while (step()) {
    }
  }

  // --- checkpointing -------------------------------------------------------
  // manifest.json + state.bin (little-endian f64): parameters, optimizer
  // momentum, prototype bank (including epoch accumulators), partial-epoch
  // loss sums. The RNG state and epoch logs ride in the manifest. Resuming
  // mid-epoch continues the exact trajectory.

  void save_checkpoint(const std::filesystem::path& dir) const {
    std::filesystem::create_directories(dir);
    nlohmann::json manifest{
        {"format_version", 1},
        {"kind", "trainer"},
        {"network_config", net_.config()},
        {"train_config", cfg_},
        {"arm", arm_name(arm_)},
        {"use_augmentation", use_augmentation_},
        {"global_step", global_step_},
        {"epoch_loss_sum", epoch_loss_sum_},
        {"epoch_step_count", epoch_step_count_},
        {"rng_state", rng_.state_string()},
        {"dataset_fingerprint", dataset_fingerprint(*data_)},
        {"logs", logs_}};
    write_text_file(dir / "manifest.json", manifest.dump(2) + "\n");
    auto os = open_out(dir / "state.bin");
    write_f64_span(os, net_.flat_parameters());
    for (const auto& m : momentum_) write_f64_span(os, m);
    write_f64_span(os, bank_.flat_state());
  }

  static Trainer load_checkpoint(const std::filesystem::path& dir,
                                 const Dataset& train_data,
                                 const Dataset* val_data = nullptr) {
    const nlohmann::json manifest =
        nlohmann::json::parse(read_text_file(dir / "manifest.json"));
    if (manifest.at("format_version").get<int>() != 1) {
      throw std::runtime_error("trainer checkpoint: unsupported version");
    }
    const auto net_cfg = manifest.at("network_config").get<NetworkConfig>();
    const auto cfg = manifest.at("train_config").get<TrainConfig>();
    const auto arm = arm_from_name(manifest.at("arm").get<std::string>());
    const bool use_aug = manifest.at("use_augmentation").get<bool>();
    if (manifest.at("dataset_fingerprint").get<std::string>() !=
        dataset_fingerprint(train_data)) {
      throw std::runtime_error(
          "trainer checkpoint: dataset fingerprint mismatch");
    }
    Trainer t(train_data, net_cfg, cfg, arm, use_aug, val_data);
    t.global_step_ = manifest.at("global_step").get<std::size_t>();
    t.epoch_loss_sum_ = manifest.at("epoch_loss_sum").get<double>();
    t.epoch_step_count_ = manifest.at("epoch_step_count").get<std::size_t>();
    t.rng_.set_state_string(manifest.at("rng_state").get<std::string>());
    t.logs_ = manifest.at("logs").get<std::vector<EpochLog>>();

    auto is = open_in(dir / "state.bin");
    t.net_.set_flat_parameters(
        read_f64_span(is, Network::parameter_count(net_cfg)));
    for (auto& m : t.momentum_) {
      m = read_f64_span(is, m.size());
    }
    t.bank_.set_flat_state(read_f64_span(is, t.bank_.flat_state_size()));
    char extra;
    if (is.read(&extra, 1)) {
      throw std::runtime_error("trainer checkpoint: trailing bytes");
    }
    return t;
  }

  static std::string dataset_fingerprint(const Dataset& data) {
    std::string key;
    key.reserve(data.size() * 2 + 64);
    key += std::to_string(data.size()) + ":" +
           std::to_string(data.num_classes) + ":" +
           std::to_string(data.num_domains) + ":" +
           std::to_string(data.channels) + ":" +
           std::to_string(data.image_side) + ";";
    for (const Example& ex : data.examples) {
      key += static_cast<char>('a' + ex.label % 26);
      key += static_cast<char>('a' + ex.domain % 26);
    }
    if (!data.examples.empty()) {
      const auto& px = data.examples.front().pixels;
      key.append(reinterpret_cast<const char*>(px.data()),
                 px.size() * sizeof(float));
    }
    return hex64(fnv1a64(key));
  }

 private:
  Tensor loss_of(const Tensor& logits,
                 const std::vector<std::size_t>& labels) const {
    if (cfg_.loss == LossKind::focal) {
      return focal_loss(logits, labels, cfg_.focal_gamma);
    }
    return softmax_cross_entropy(logits, labels);
  }

  void check_finite(double loss_value) const {
    if (!std::isfinite(loss_value)) {
      throw std::runtime_error(
          "training diverged: non-finite loss at epoch " +
          std::to_string(epoch()) + ", step " + std::to_string(global_step_) +
          " (lr=" + std::to_string(cfg_.learning_rate) + ")");
    }
  }

  void sgd_step() {
    const double lr = cfg_.learning_rate;
    const double wd = cfg_.weight_decay;
    auto& params = net_.parameters();
    for (std::size_t pi = 0; pi < params.size(); ++pi) {
      auto& theta = params[pi].data();
      auto& vel = momentum_[pi];
      if (!params[pi].has_grad()) {
        // parameter untouched by this step's graph: momentum still decays
        for (std::size_t i = 0; i < vel.size(); ++i) {
          vel[i] = kMomentum * vel[i] + wd * theta[i];
          theta[i] -= lr * vel[i];
        }
        continue;
      }
      const auto& g = params[pi].grad();
      for (std::size_t i = 0; i < vel.size(); ++i) {
        vel[i] = kMomentum * vel[i] + g[i] + wd * theta[i];
        theta[i] -= lr * vel[i];
      }
    }
    net_.zero_grad();
  }

  // Slice example n out of a batched [N,C,H,W] value tensor, detached.
  static Tensor slice_example(const Tensor& batch, std::size_t n) {
    const std::size_t c = batch.shape()[1], h = batch.shape()[2],
                      w = batch.shape()[3];
    const std::size_t stride = c * h * w;
    std::vector<double> vals(batch.data().begin() +
                                 static_cast<std::ptrdiff_t>(n * stride),
                             batch.data().begin() +
                                 static_cast<std::ptrdiff_t>((n + 1) * stride));
    return Tensor::from({c, h, w}, std::move(vals));
  }

  void accumulate_from_features(const Tensor& features_value,
                                const std::vector<std::size_t>& ids) {
    for (std::size_t b = 0; b < ids.size(); ++b) {
      const Example& ex = data_->examples[ids[b]];
      bank_.accumulate(disentangle(slice_example(features_value, b)),
                       ex.label, ex.domain);
    }
  }

  void warm_step(StepInfo& info) {
    const std::vector<std::size_t> ids =
        draw_warmstart_batch(index_, cfg_.batch_size, rng_);
    Tensor x = data_->batch_tensor(ids);
    std::vector<std::size_t> labels(ids.size());
    for (std::size_t b = 0; b < ids.size(); ++b) {
      labels[b] = data_->examples[ids[b]].label;
    }
    Tensor s;
    Tape tape;
    {
      TapeScope scope(tape);
      s = net_.features(x);
      Tensor logits = net_.head(s);
      Tensor loss = loss_of(logits, labels);
      info.loss = loss.value();
      check_finite(info.loss);
      tape.backward(loss);
    }
    sgd_step();
    if (use_augmentation_ &&
        cfg_.prototype_recompute == PrototypeRecompute::streaming) {
      accumulate_from_features(s.detach(), ids);
    }
    info.ids_i = ids;
    info.labels = std::move(labels);
  }

  // RNG order per step: batch_size draw_pair calls, then per slot the
  // mix-original coin (only when mix_original > 0) and the lambda draws the
  // arm actually uses.
  void augmented_step(StepInfo& info) {
    const std::size_t B = cfg_.batch_size;
    std::vector<std::size_t> ids_i(B), ids_j(B);
    for (std::size_t b = 0; b < B; ++b) {
      auto [i, j] = draw_pair(index_, cfg_.sampler, rng_);
      ids_i[b] = i;
      ids_j[b] = j;
    }
    std::vector<bool> use_original(B, false);
    std::vector<MixCoefficients> coeffs(B);
    const bool sample_c =
        arm_ == AblationArm::full || arm_ == AblationArm::c_only;
    const bool sample_d =
        arm_ == AblationArm::full || arm_ == AblationArm::d_only;
    for (std::size_t b = 0; b < B; ++b) {
      if (cfg_.mix_original > 0.0) {
        use_original[b] = rng_.uniform() < cfg_.mix_original;
      }
      coeffs[b].alpha_c = cfg_.alpha_c;
      coeffs[b].alpha_d = cfg_.alpha_d;
      coeffs[b].lambda_c = sample_c ? sample_beta(cfg_.alpha_c, rng_) : 1.0;
      coeffs[b].lambda_d = sample_d ? sample_beta(cfg_.alpha_d, rng_) : 1.0;
    }

    Tensor x_i = data_->batch_tensor(ids_i);
    Tensor x_j = data_->batch_tensor(ids_j);
    std::vector<std::size_t> labels(B);
    Tensor s_i, s_j;
    Tape tape;
    {
      TapeScope scope(tape);
      s_i = net_.features(x_i);
      s_j = net_.features(x_j);
      std::vector<Tensor> augmented;
      augmented.reserve(B);
      for (std::size_t b = 0; b < B; ++b) {
        const Example& donor_i = data_->examples[ids_i[b]];
        const Example& donor_j = data_->examples[ids_j[b]];
        if (use_original[b]) {
          augmented.push_back(select_example(s_i, b));
          labels[b] = donor_i.label;
          continue;
        }
        auto [aug, label] = augment_pair(
            select_example(s_i, b), donor_i.label, select_example(s_j, b),
            donor_j.domain, bank_, coeffs[b], cfg_.detach_nuisance);
        augmented.push_back(aug);
        labels[b] = label;
      }
      Tensor batch = stack_examples(augmented);
      Tensor logits = net_.head(batch);
      Tensor loss = loss_of(logits, labels);
      info.loss = loss.value();
      check_finite(info.loss);
      tape.backward(loss);
    }
    sgd_step();
    if (cfg_.prototype_recompute == PrototypeRecompute::streaming) {
      accumulate_from_features(s_i.detach(), ids_i);
      accumulate_from_features(s_j.detach(), ids_j);
    }
    info.ids_i = std::move(ids_i);
    info.ids_j = std::move(ids_j);
    info.labels = std::move(labels);
    info.lambda_c.reserve(B);
    info.lambda_d.reserve(B);
    for (const MixCoefficients& mc : coeffs) {
      info.lambda_c.push_back(mc.lambda_c);
      info.lambda_d.push_back(mc.lambda_d);
    }
  }

  void full_recompute_accumulate() {
    bank_.reset_epoch();
    const std::size_t chunk = 64;
    std::vector<std::size_t> ids;
    for (std::size_t start = 0; start < data_->size(); start += chunk) {
      ids.clear();
      for (std::size_t i = start; i < std::min(start + chunk, data_->size());
           ++i) {
        ids.push_back(i);
      }
      Tensor s = net_.features(data_->batch_tensor(ids));
      accumulate_from_features(s, ids);
    }
  }

  void end_of_epoch(std::size_t e) {
    if (use_augmentation_) {
      const bool commit_due = e + 1 >= cfg_.warm_start_epochs;
      if (commit_due) {
        if (cfg_.prototype_recompute == PrototypeRecompute::full) {
          full_recompute_accumulate();
        }
        bank_.commit_epoch();
      } else {
        bank_.reset_epoch();
      }
    }
    EpochLog log;
    log.epoch = e;
    log.train_loss = epoch_loss_sum_ / static_cast<double>(epoch_step_count_);
    log.lr = cfg_.learning_rate;
    log.sampler = sampler_name(cfg_.sampler);
    log.seed = cfg_.seed;
    if (val_data_ && val_data_->size() > 0) {
      log.val_loss = eval_split_loss(*val_data_);
    }
    logs_.push_back(std::move(log));
    epoch_loss_sum_ = 0.0;
    epoch_step_count_ = 0;
  }

  double eval_split_loss(const Dataset& split) const {
    const std::size_t chunk = 64;
    double weighted = 0.0;
    std::vector<std::size_t> ids;
    for (std::size_t start = 0; start < split.size(); start += chunk) {
      ids.clear();
      std::vector<std::size_t> labels;
      for (std::size_t i = start; i < std::min(start + chunk, split.size());
           ++i) {
        ids.push_back(i);
        labels.push_back(split.examples[i].label);
      }
      Tensor logits = net_.forward(split.batch_tensor(ids));
      weighted += loss_of(logits, labels).value() *
                  static_cast<double>(ids.size());
    }
    return weighted / static_cast<double>(split.size());
  }

  static constexpr double kMomentum = 0.9;

  const Dataset* data_;
  const Dataset* val_data_;
  TrainConfig cfg_;
  AblationArm arm_;
  bool use_augmentation_;
  Rng rng_;
  Network net_;
  GroupIndex index_;
  PrototypeBank bank_;
  std::vector<std::vector<double>> momentum_;
  std::size_t global_step_ = 0;
  double epoch_loss_sum_ = 0.0;
  std::size_t epoch_step_count_ = 0;
  std::vector<EpochLog> logs_;
  std::function<void(const StepInfo&)> observer_;
};

// Baseline trainer (plain empirical risk, no bank, no augmentation).
inline Trainer train_erm(const Dataset& data, const NetworkConfig& net_cfg,
                         const TrainConfig& cfg,
                         const Dataset* val_data = nullptr) {
  Trainer t(data, net_cfg, cfg, AblationArm::full, /*use_augmentation=*/false,
            val_data);
  t.run();
  return t;
}

inline Trainer train_tally(const Dataset& data, const NetworkConfig& net_cfg,
                           const TrainConfig& cfg,
                           AblationArm arm = AblationArm::full,
                           const Dataset* val_data = nullptr) {
  Trainer t(data, net_cfg, cfg, arm, /*use_augmentation=*/true, val_data);
  t.run();
  return t;
}

}  // namespace tally
