#pragma once

// Shared fixtures and independent oracles for the unit and acceptance tests.

#include <torch/torch.h>

#include <cmath>
#include <filesystem>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "cassle/augpipe.hpp"
#include "cassle/datahub.hpp"
#include "cassle/random.hpp"

namespace cassle::testing {

/// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag);
  ~TempDir();
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

 private:
  std::filesystem::path path_;
};

/// Smooth random image with values in [0, 1].
aug::Image random_image(int height, int width, uint64_t seed);

/// Row-major (rows, cols) matrix.
using Matrix = std::vector<std::vector<double>>;

Matrix to_matrix(const torch::Tensor& t);

// Brute-force loss oracles over plain loops.
double oracle_info_nce(const Matrix& q, const Matrix& k, const Matrix& negatives, double tau);
double oracle_info_nce_diagonal(const Matrix& sim, double tau);
double oracle_nt_xent(const Matrix& z1, const Matrix& z2, double tau);
double oracle_barlow_twins(const Matrix& z1, const Matrix& z2, double lambda);
double oracle_simsiam(const Matrix& p1, const Matrix& z2, const Matrix& p2, const Matrix& z1);

struct GradCheck {
  double max_rel_error = 0.0;
  int points = 0;
};

/// Central finite differences of `f` with respect to `points` random
/// coordinates of each tensor in `inputs` (float64, requires_grad), compared
/// with autograd. The relative error uses max(|a|, |n|, floor) as scale.
GradCheck check_gradients(const std::function<torch::Tensor()>& f, const std::vector<torch::Tensor>& inputs,
                          int points, uint64_t seed, double eps = 1e-6, double floor = 1e-6);

/// Rows of a random (n, d) float64 matrix scaled to unit norm.
torch::Tensor random_unit_rows(int64_t n, int64_t d, uint64_t seed);

/// Synthetic colored-shapes set written to `root` and loaded back.
data::Dataset synthetic_split(const std::filesystem::path& root, data::Split split, std::size_t n_train,
                              std::size_t n_test, uint64_t seed = 7);

}  // namespace cassle::testing
