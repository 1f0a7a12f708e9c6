#include "support.hpp"

#include <algorithm>
#include <atomic>
#include <unistd.h>

namespace cassle::testing {

namespace fs = std::filesystem;

TempDir::TempDir(const std::string& tag) {
  static std::atomic<int> counter{0};
  path_ = fs::temp_directory_path() /
          ("cassle-" + tag + "-" + std::to_string(::getpid()) + "-" + std::to_string(counter++));
  fs::remove_all(path_);
  fs::create_directories(path_);
}

TempDir::~TempDir() {
  std::error_code ec;
  fs::remove_all(path_, ec);
}

aug::Image random_image(int height, int width, uint64_t seed) {
  RandomStream rng(seed);
  aug::Image img(height, width, 3);
  double phase[3], fx[3], fy[3];
  for (int c = 0; c < 3; ++c) {
    phase[c] = rng.uniform(0, 6.28);
    fx[c] = rng.uniform(0.05, 0.6);
    fy[c] = rng.uniform(0.05, 0.6);
  }
  for (int y = 0; y < height; ++y) {
    for (int x = 0; x < width; ++x) {
      for (int c = 0; c < 3; ++c) {
        const double v = 0.5 + 0.35 * std::sin(fx[c] * x + fy[c] * y + phase[c]) + 0.1 * (rng.uniform() - 0.5);
        img.at(y, x, c) = static_cast<float>(std::clamp(v, 0.0, 1.0));
      }
    }
  }
  return img;
}

Matrix to_matrix(const torch::Tensor& t) {
  const auto c = t.detach().to(torch::kFloat64).contiguous().reshape({t.size(0), -1});
  Matrix m(static_cast<std::size_t>(c.size(0)), std::vector<double>(static_cast<std::size_t>(c.size(1))));
  const double* p = c.data_ptr<double>();
  for (std::size_t i = 0; i < m.size(); ++i) {
    for (std::size_t j = 0; j < m[i].size(); ++j) m[i][j] = p[i * m[i].size() + j];
  }
  return m;
}

namespace {

double dot(const std::vector<double>& a, const std::vector<double>& b) {
  double s = 0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

double norm(const std::vector<double>& a) { return std::sqrt(dot(a, a)); }

// -log(exp(pos) / sum(exp(all))) with a max shift.
double neg_log_softmax(double pos, const std::vector<double>& all) {
  double m = pos;
  for (double v : all) m = std::max(m, v);
  double s = 0;
  for (double v : all) s += std::exp(v - m);
  return -(pos - m - std::log(s));
}

}  // namespace

double oracle_info_nce(const Matrix& q, const Matrix& k, const Matrix& negatives, double tau) {
  double total = 0;
  for (std::size_t i = 0; i < q.size(); ++i) {
    const double pos = dot(q[i], k[i]) / tau;
    std::vector<double> all{pos};
    for (const auto& n : negatives) all.push_back(dot(q[i], n) / tau);
    total += neg_log_softmax(pos, all);
  }
  return total / static_cast<double>(q.size());
}

double oracle_info_nce_diagonal(const Matrix& sim, double tau) {
  double total = 0;
  for (std::size_t i = 0; i < sim.size(); ++i) {
    std::vector<double> all;
    for (double v : sim[i]) all.push_back(v / tau);
    total += neg_log_softmax(sim[i][i] / tau, all);
  }
  return total / static_cast<double>(sim.size());
}

double oracle_nt_xent(const Matrix& z1, const Matrix& z2, double tau) {
  Matrix z = z1;
  z.insert(z.end(), z2.begin(), z2.end());
  const std::size_t n = z1.size(), m = z.size();
  double total = 0;
  for (std::size_t i = 0; i < m; ++i) {
    const std::size_t pos_idx = (i + n) % m;
    std::vector<double> all;
    for (std::size_t j = 0; j < m; ++j) {
      if (j != i) all.push_back(dot(z[i], z[j]) / tau);
    }
    total += neg_log_softmax(dot(z[i], z[pos_idx]) / tau, all);
  }
  return total / static_cast<double>(m);
}

double oracle_barlow_twins(const Matrix& z1, const Matrix& z2, double lambda) {
  const std::size_t n = z1.size(), d = z1[0].size();
  double loss = 0;
  for (std::size_t a = 0; a < d; ++a) {
    for (std::size_t b = 0; b < d; ++b) {
      double c = 0;
      for (std::size_t i = 0; i < n; ++i) c += z1[i][a] * z2[i][b];
      c /= static_cast<double>(n);
      loss += a == b ? (1 - c) * (1 - c) : lambda * c * c;
    }
  }
  return loss;
}

double oracle_simsiam(const Matrix& p1, const Matrix& z2, const Matrix& p2, const Matrix& z1) {
  double total = 0;
  for (std::size_t i = 0; i < p1.size(); ++i) {
    const double c1 = dot(p1[i], z2[i]) / (norm(p1[i]) * norm(z2[i]));
    const double c2 = dot(p2[i], z1[i]) / (norm(p2[i]) * norm(z1[i]));
    total += -(c1 + c2) / 2;
  }
  return total / static_cast<double>(p1.size());
}

GradCheck check_gradients(const std::function<torch::Tensor()>& f, const std::vector<torch::Tensor>& inputs,
                          int points, uint64_t seed, double eps, double floor) {
  for (const auto& t : inputs) {
    if (t.grad().defined()) t.mutable_grad().zero_();
  }
  auto out = f();
  out.backward();
  std::vector<torch::Tensor> analytic;
  for (const auto& t : inputs) analytic.push_back(t.grad().detach().clone());

  GradCheck result;
  RandomStream rng(seed);
  torch::NoGradGuard no_grad;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    auto flat = inputs[k].detach().view({-1});
    const auto grad = analytic[k].view({-1});
    for (int p = 0; p < points; ++p) {
      const auto idx = rng.uniform_int(0, flat.numel() - 1);
      const double orig = flat[idx].item<double>();
      flat[idx] = orig + eps;
      const double plus = f().item<double>();
      flat[idx] = orig - eps;
      const double minus = f().item<double>();
      flat[idx] = orig;
      const double numeric = (plus - minus) / (2 * eps);
      const double a = grad[idx].item<double>();
      const double scale = std::max({std::abs(a), std::abs(numeric), floor});
      result.max_rel_error = std::max(result.max_rel_error, std::abs(a - numeric) / scale);
      ++result.points;
    }
  }
  return result;
}

torch::Tensor random_unit_rows(int64_t n, int64_t d, uint64_t seed) {
  auto gen = at::detail::createCPUGenerator(seed);
  auto x = torch::randn({n, d}, gen, torch::kFloat64);
  return x / x.norm(2, 1, true);
}

data::Dataset synthetic_split(const fs::path& root, data::Split split, std::size_t n_train, std::size_t n_test,
                              uint64_t seed) {
  if (!fs::exists(root / "test_batch.bin")) data::generate_synthetic(root, n_train, n_test, seed);
  return data::load_dataset(data::make_ref("synthetic", root, split));
}

}  // namespace cassle::testing
