#pragma once

#include <torch/torch.h>

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "cassle/datahub.hpp"
#include "cassle/sslcore.hpp"

namespace cassle::eval {

class EvalError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct ProbeResult {
  std::string dataset_id;
  /// "top1", "mean-per-class" or "r2".
  std::string metric = "top1";
  double value = 0.0;
  double chosen_l2 = 0.0;
  uint64_t seed = 0;
  std::string checkpoint_hash;
  /// Free-form run name used as the row label of aggregate tables.
  std::string label;
  /// Validation metric for each grid value, in grid order.
  std::vector<double> l2_grid;
  std::vector<double> val_scores;

  std::string to_json() const;
  static ProbeResult from_json(std::string_view text);
};

/// One row per label, one column per dataset id; values in percent.
std::string aggregate_csv(std::span<const ProbeResult> results);

// --- Embedding ---------------------------------------------------------------

struct EmbedOptions {
  /// Center-crop and resize to the model's input size. Without it the
  /// dataset images must already have that size.
  bool center_crop = true;
  double crop_fraction = 1.0;
  ssl::StageTag tap = ssl::StageTag::extractor;
  int batch_size = 256;
  /// Cache root; no caching when unset.
  std::optional<std::filesystem::path> cache_root;
  /// Split name recorded in the cache key; defaults to the dataset's split.
  std::string split_key;
};

struct EmbedResult {
  ssl::EmbeddingBatch embeddings;
  std::vector<int> labels;
  int class_count = 0;
  bool cache_hit = false;
  std::filesystem::path cache_file;
};

/// Frozen-extractor features of every image, in dataset order. The model is
/// evaluated in inference mode and left unchanged.
EmbedResult embed_dataset(ssl::SslModel& model, const std::string& checkpoint_hash, int input_size,
                          const data::Dataset& dataset, const EmbedOptions& options = {});

// --- Logistic regression -----------------------------------------------------

struct LogisticModel {
  torch::Tensor weight;  // (C, d) float64
  torch::Tensor bias;    // (C)

  torch::Tensor logits(const torch::Tensor& x) const;
  std::vector<int> predict(const torch::Tensor& x) const;
};

/// Minimizes mean cross-entropy + l2/2 * ||W||^2 (bias unpenalized) with
/// L-BFGS in float64. Deterministic for fixed inputs.
LogisticModel fit_logistic(const torch::Tensor& x, std::span<const int> labels, int class_count, double l2,
                           int max_iter = 5000, const LogisticModel* warm_start = nullptr);

double top1_accuracy(std::span<const int> predicted, std::span<const int> truth);
double mean_per_class_accuracy(std::span<const int> predicted, std::span<const int> truth, int class_count);

/// n log-spaced values from lo to hi inclusive.
std::vector<double> log_grid(double lo, double hi, int n);
/// 45 values over [1e-6, 1e5].
std::vector<double> default_l2_grid();

struct ProbeSplit {
  torch::Tensor x;
  std::vector<int> y;
};

struct LinearProbeOptions {
  std::vector<double> l2_grid = default_l2_grid();
  std::string metric = "top1";
  int max_iter = 5000;
  uint64_t seed = 0;
  std::string dataset_id;
  std::string checkpoint_hash;
};

/// Grid-searches l2 on `val`, refits on train+val, reports the test metric.
ProbeResult linear_probe(const ProbeSplit& train, const ProbeSplit& val, const ProbeSplit& test, int class_count,
                         const LinearProbeOptions& options = {});

/// Ridge regression probe with the same grid; reports the uniform-average R^2.
ProbeResult ridge_probe(const torch::Tensor& train_x, const torch::Tensor& train_y, const torch::Tensor& val_x,
                        const torch::Tensor& val_y, const torch::Tensor& test_x, const torch::Tensor& test_y,
                        const LinearProbeOptions& options = {});

double r2_score(const torch::Tensor& predicted, const torch::Tensor& truth);

struct LinearEvalOptions {
  EmbedOptions embed;
  LinearProbeOptions probe;
  /// Train/validation fractions for l2 selection.
  std::pair<double, double> val_split{0.9, 0.1};
};

/// Embeds train and test, splits validation off train, runs linear_probe.
ProbeResult linear_eval(ssl::SslModel& model, const std::string& checkpoint_hash, int input_size,
                        const data::Dataset& train, const data::Dataset& test, const LinearEvalOptions& options = {});

// --- Few-shot ----------------------------------------------------------------

struct EpisodeSpec {
  int n_way = 5;
  int k_shot = 1;
  int query_per_class = 15;
  int n_episodes = 2000;
  /// Degenerate episodes that score the support set itself.
  bool query_is_support = false;

  void validate() const;
};

struct FewShotResult {
  EpisodeSpec spec;
  uint64_t seed = 0;
  double mean = 0.0;
  /// Half-width of the normal-approximation 95% interval.
  double ci95 = 0.0;
  std::vector<double> episode_accuracy;

  std::string to_json() const;
};

/// Logistic regression on support embeddings, scored on the query set. The
/// default l2 (negative) is 1 / support size, i.e. unit inverse strength on the
/// summed loss.
FewShotResult few_shot_eval(const torch::Tensor& x, std::span<const int> labels, const EpisodeSpec& spec,
                            uint64_t seed, double l2 = -1.0);

// --- Rotation ----------------------------------------------------------------

/// Every image at 0, 90, 180 and 270 degrees (labels 0-3), image-major.
data::Dataset rotated_dataset(const data::Dataset& dataset);

ProbeResult rotation_probe(ssl::SslModel& model, const std::string& checkpoint_hash, int input_size,
                           const data::Dataset& train, const data::Dataset& test, const LinearEvalOptions& options = {});

}  // namespace cassle::eval
