#pragma once

#include <torch/torch.h>

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "cassle/augpipe.hpp"
#include "cassle/condproj.hpp"
#include "cassle/datahub.hpp"
#include "cassle/sslcore.hpp"

namespace cassle::train {

/// Invalid configuration; `key()` names the offending dotted key when known.
class ConfigError : public std::invalid_argument {
 public:
  ConfigError(std::string key, const std::string& msg)
      : std::invalid_argument(key.empty() ? msg : key + ": " + msg), key_(std::move(key)) {}
  const std::string& key() const { return key_; }

 private:
  std::string key_;
};

/// Raised when a step produces a non-finite loss. A diagnostic snapshot is
/// written to `snapshot_dir()` before throwing.
class TrainingAborted : public std::runtime_error {
 public:
  TrainingAborted(const std::string& msg, std::filesystem::path snapshot)
      : std::runtime_error(msg), snapshot_(std::move(snapshot)) {}
  const std::filesystem::path& snapshot_dir() const { return snapshot_; }

 private:
  std::filesystem::path snapshot_;
};

struct DataConfig {
  std::string dataset = "synthetic";
  std::filesystem::path root;
  std::size_t limit = 0;
};

struct TrainConfig {
  int epochs = 100;
  int batch_size = 256;
  /// Learning rate at batch 256; scaled linearly with the batch size.
  double base_lr = 0.05;
  double weight_decay = 1e-4;
  double sgd_momentum = 0.9;
  int warmup_epochs = 0;
  /// Write a checkpoint every N epochs (0: only at the end).
  int checkpoint_every = 0;
  uint64_t seed = 0;
  /// Background threads preparing augmented batches (0: inline).
  int workers = 1;
  std::filesystem::path output_dir = "runs";

  double scaled_lr() const { return base_lr * batch_size / 256.0; }
};

/// Everything a pretraining run needs.
struct RunConfig {
  DataConfig data;
  ssl::MethodConfig method;
  ssl::BackboneSpec backbone;
  cond::ConditioningSpec conditioning;
  aug::AugmentationPolicy augment;
  TrainConfig train;

  void validate() const;
  ssl::ModelSpec model_spec() const { return {backbone, conditioning, method}; }
};

/// Parses the sectioned key-value format ([data], [method], [conditioning],
/// [augment], [train]). `overrides` maps dotted keys ("conditioning.mode") to
/// values and wins over the file. Unknown keys throw ConfigError.
RunConfig parse_run_config(std::string_view text,
                           const std::map<std::string, std::string>& overrides = {});
RunConfig load_run_config(const std::filesystem::path& path,
                          const std::map<std::string, std::string>& overrides = {});

/// Canonical text form; parse_run_config(to_config_text(c)) == c.
std::string to_config_text(const RunConfig& config);

/// SHA-256 of the canonical text.
std::string config_hash(const RunConfig& config);

/// Linear warmup to `base`, then cosine decay to 0 at `total_steps`.
double cosine_lr(double base, int64_t step, int64_t total_steps, int64_t warmup_steps);

struct TrainState {
  int64_t step = 0;
  int epoch = 0;
  double lr = 0.0;
  std::vector<double> loss_history;
  /// Stream identity for augmentation/shuffling; every draw is derived from
  /// (seed, epoch, index), so this pair is the complete RNG state.
  uint64_t rng_seed = 0;
  int rng_epoch = 0;
};

/// A loaded checkpoint.
struct Checkpoint {
  std::filesystem::path dir;
  RunConfig config;
  TrainState state;
  ssl::SslModel model{nullptr};
  std::optional<ssl::KeyQueue> queue;
  std::string hash;
};

/// SHA-256 over every named parameter and buffer (name, shape, bytes).
std::string model_hash(ssl::SslModel& model);

/// Writes <dir>/{model.pt, optimizer.pt, queue.pt, manifest.json, config.ini}
/// atomically (temporary directory, then rename).
void save_checkpoint(const std::filesystem::path& dir, const RunConfig& config,
                     const TrainState& state, ssl::SslModel& model,
                     torch::optim::Optimizer* optimizer, const ssl::KeyQueue* queue);

Checkpoint load_checkpoint(const std::filesystem::path& dir);

/// Reads the manifest only.
std::string read_checkpoint_hash(const std::filesystem::path& dir);

struct EpochLog {
  int epoch = 0;
  double mean_loss = 0.0;
  double lr = 0.0;
  double wall_seconds = 0.0;
};

std::vector<EpochLog> read_loss_log(const std::filesystem::path& csv);

struct PretrainOptions {
  /// Continue from this checkpoint (model, optimizer, queue, state).
  std::optional<std::filesystem::path> resume_from;
  /// Stop after this many completed epochs (schedule still spans train.epochs).
  std::optional<int> stop_after_epochs;
  /// Run directory; defaults to output_dir/<timestamp>-<config hash prefix>.
  std::optional<std::filesystem::path> run_dir;
  std::function<void(const EpochLog&)> on_epoch;
  bool verbose = false;
};

struct PretrainResult {
  std::filesystem::path run_dir;
  std::filesystem::path checkpoint_dir;
  std::filesystem::path loss_log;
  TrainState state;
};

/// Loads the training split of `config.data`.
data::Dataset load_training_data(const RunConfig& config);

/// Builds the augmented batch for dataset positions `indices` in `epoch`.
ssl::ViewBatch make_batch(const data::Dataset& dataset, std::span<const std::size_t> indices,
                          const aug::AugmentationPolicy& policy, uint64_t seed, int epoch);

/// Epoch permutation of [0, n), derived from (seed, epoch).
std::vector<std::size_t> epoch_order(std::size_t n, uint64_t seed, int epoch);

PretrainResult pretrain(const RunConfig& config, const PretrainOptions& options = {});
PretrainResult pretrain(const RunConfig& config, const data::Dataset& dataset,
                        const PretrainOptions& options = {});

/// Builds a freshly initialized model for `config` (torch seeded from train.seed).
ssl::SslModel make_model(const RunConfig& config);

}  // namespace cassle::train
