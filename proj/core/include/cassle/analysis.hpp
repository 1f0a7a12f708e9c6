#pragma once

#include <torch/torch.h>

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "cassle/augpipe.hpp"
#include "cassle/datahub.hpp"
#include "cassle/sslcore.hpp"
#include "cassle/trainer.hpp"

namespace cassle::analysis {

class AnalysisError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// --- Conditioning dependency -------------------------------------------------

struct ConditioningReport {
  double mean_sim_true = 0.0;
  double mean_sim_random = 0.0;
  /// Ties count one half.
  double frac_true_gt_random = 0.0;
  int64_t n_pairs = 0;
  /// Paired one-sided t-test of sim_true - sim_random > 0.
  double t_statistic = 0.0;
  double p_value = 1.0;
  std::vector<double> sims_true;
  std::vector<double> sims_random;

  std::string to_json() const;
};

/// For each pair, compares cos(pi(e1|w1), pi(e2|w2)) with cos(pi(e1|w1), pi(e2|w3)),
/// where w3 is the second-view omega of another sample in the same batch.
ConditioningReport conditioning_dependency(ssl::SslModel& model, const data::Dataset& dataset,
                                           const aug::AugmentationPolicy& policy, int n_pairs, uint64_t seed,
                                           int batch_size = 256);

/// Upper tail of the paired t-test for mean(d) > 0; {t, p}.
std::pair<double, double> paired_t_test_greater(std::span<const double> differences);

// --- Stage-wise sensitivity --------------------------------------------------

struct SensitivityProfile {
  aug::AugKind kind = aug::AugKind::identity;
  double temperature = 0.2;
  int batch_size = 0;
  int n_batches = 0;
  /// Mean InfoNCE per stage.
  std::map<ssl::StageTag, double> values;

  std::string to_json() const;
};

/// Pairs each center-cropped original with a view carrying only `kind`, then
/// per stage scores the batch cosine-similarity matrix with InfoNCE
/// (positives on the diagonal). The projector stage conditions each view on
/// its own omega.
SensitivityProfile stagewise_infonce(ssl::SslModel& model, const data::Dataset& dataset,
                                     const aug::AugmentationPolicy& policy, aug::AugKind kind, int batch_size,
                                     double temperature, uint64_t seed, int n_batches = 1);

// --- Spectra -----------------------------------------------------------------

/// Eigenvalues of the sample covariance of the rows, descending, float64.
std::vector<double> covariance_eigenvalues(const torch::Tensor& embeddings);

struct SpectrumFit {
  double alpha = 0.0;
  double intercept = 0.0;
  double r2 = 0.0;
  /// 1-based inclusive eigenvalue index range.
  int64_t fit_lo = 0;
  int64_t fit_hi = 0;
  std::vector<double> eigenvalues;

  std::string to_json() const;
};

/// Least-squares fit of log(lambda_i) = -alpha log(i) + c over [lo, hi].
SpectrumFit fit_power_law(std::span<const double> eigenvalues, int64_t lo, int64_t hi);

struct SpectrumOptions {
  /// Defaults to [10, d/2].
  std::optional<std::pair<int64_t, int64_t>> fit_range;
  /// Keep only the leading `truncate` eigenvalues (allows n < d).
  std::optional<int64_t> truncate;
  /// Eigenvalues at or below rel_tol * max count as zero.
  double rel_tol = 1e-10;
};

SpectrumFit eigenspectrum_alpha(const torch::Tensor& embeddings, const SpectrumOptions& options = {});

struct VarianceCurve {
  std::vector<double> eigenvalues;
  std::vector<double> cumulative;
  int64_t components_for_threshold = 0;
  double threshold = 0.9;

  std::string to_json() const;
};

VarianceCurve explained_variance(const torch::Tensor& embeddings, double threshold = 0.9);

/// Eigenvalues strictly above `tol`.
int64_t count_nonzero(std::span<const double> eigenvalues, double tol = 1e-8);

// --- Retrieval ---------------------------------------------------------------

/// Gallery indices of the k most cosine-similar rows, ties broken by index.
std::vector<int64_t> retrieve(const torch::Tensor& query, const torch::Tensor& gallery, int64_t k);
std::vector<std::vector<int64_t>> retrieve_batch(const torch::Tensor& queries, const torch::Tensor& gallery,
                                                 int64_t k);

// --- Loss curves -------------------------------------------------------------

struct LossCurveReport {
  std::vector<int> epochs;
  std::vector<double> baseline;
  std::vector<double> conditioned;
  /// conditioned - baseline, per epoch.
  std::vector<double> difference;

  std::string to_json() const;
};

/// Aligns two per-epoch logs on their common epochs.
LossCurveReport loss_curve_difference(std::span<const train::EpochLog> baseline,
                                      std::span<const train::EpochLog> conditioned);

// --- Plots -------------------------------------------------------------------

struct PlotSeries {
  std::string name;
  std::vector<double> x;
  std::vector<double> y;
};

/// Minimal SVG line plot.
void write_svg_plot(const std::filesystem::path& path, const std::string& title, std::span<const PlotSeries> series,
                    bool log_log = false);

}  // namespace cassle::analysis
