#include "cassle/analysis.hpp"

#include <boost/math/distributions/students_t.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>
#include <sstream>

#include "cassle/random.hpp"
#include "json.hpp"

namespace cassle::analysis {

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

[[noreturn]] void fail(const std::string& msg) { throw AnalysisError(msg); }

// Distinct indices when possible, otherwise with replacement.
std::vector<std::size_t> sample_indices(std::size_t population, std::size_t count, RandomStream& rng) {
  std::vector<std::size_t> out;
  if (count <= population) {
    std::vector<std::size_t> all(population);
    std::iota(all.begin(), all.end(), std::size_t{0});
    for (std::size_t i = 0; i < count; ++i) {
      const auto j = static_cast<std::size_t>(rng.uniform_int(static_cast<int64_t>(i), static_cast<int64_t>(population) - 1));
      std::swap(all[i], all[j]);
    }
    all.resize(count);
    return all;
  }
  for (std::size_t i = 0; i < count; ++i) {
    out.push_back(static_cast<std::size_t>(rng.uniform_int(0, static_cast<int64_t>(population) - 1)));
  }
  return out;
}

torch::Tensor unit_rows(const torch::Tensor& x) {
  return torch::nn::functional::normalize(x.reshape({x.size(0), -1}).to(torch::kFloat64),
                                          torch::nn::functional::NormalizeFuncOptions().dim(1).eps(1e-12));
}

struct EvalModeGuard {
  ssl::SslModel& model;
  bool was_training;
  explicit EvalModeGuard(ssl::SslModel& m) : model(m), was_training(m->is_training()) { model->eval(); }
  ~EvalModeGuard() {
    if (was_training) model->train();
  }
};

json stage_map_json(const std::map<ssl::StageTag, double>& values) {
  json j = json::object();
  for (const auto& [tag, v] : values) j[std::string(ssl::to_string(tag))] = v;
  return j;
}

}  // namespace

// --- Conditioning dependency -------------------------------------------------

std::string ConditioningReport::to_json() const {
  json j = {{"mean_sim_true", mean_sim_true},
            {"mean_sim_random", mean_sim_random},
            {"frac_true_gt_random", frac_true_gt_random},
            {"n_pairs", n_pairs},
            {"t_statistic", t_statistic},
            {"p_value", p_value},
            {"sims_true", sims_true},
            {"sims_random", sims_random}};
  return j.dump(2);
}

std::pair<double, double> paired_t_test_greater(std::span<const double> d) {
  if (d.size() < 2) fail("paired t-test needs at least two pairs");
  const double n = static_cast<double>(d.size());
  const double mean = std::accumulate(d.begin(), d.end(), 0.0) / n;
  double ss = 0.0;
  for (double v : d) ss += (v - mean) * (v - mean);
  const double sd = std::sqrt(ss / (n - 1));
  if (sd == 0.0) {
    if (mean > 0) return {std::numeric_limits<double>::infinity(), 0.0};
    if (mean < 0) return {-std::numeric_limits<double>::infinity(), 1.0};
    return {0.0, 1.0};
  }
  const double t = mean / (sd / std::sqrt(n));
  const boost::math::students_t dist(n - 1);
  return {t, boost::math::cdf(boost::math::complement(dist, t))};
}

ConditioningReport conditioning_dependency(ssl::SslModel& model, const data::Dataset& dataset,
                                           const aug::AugmentationPolicy& policy, int n_pairs, uint64_t seed,
                                           int batch_size) {
  if (model->spec().conditioning.mode == cond::ConditioningMode::none) {
    fail("conditioning dependency is undefined for an unconditioned projector (mode none)");
  }
  if (n_pairs < 2) fail("n_pairs must be at least 2");
  if (batch_size < 2) fail("batch_size must be at least 2");
  if (dataset.size() == 0) fail("empty dataset");

  RandomStream pick_rng(derive_seed(seed, 0xc0d1, 0));
  const auto indices = sample_indices(dataset.size(), static_cast<std::size_t>(n_pairs), pick_rng);

  torch::NoGradGuard no_grad;
  EvalModeGuard guard(model);
  ConditioningReport r;
  r.n_pairs = n_pairs;
  double ties = 0.0, wins = 0.0;
  std::size_t start = 0;
  while (start < indices.size()) {
    std::size_t end = std::min(indices.size(), start + static_cast<std::size_t>(batch_size));
    if (indices.size() - end == 1) ++end;  // never leave a single-sample batch
    const std::size_t m = end - start;

    std::vector<aug::Image> v1, v2;
    std::vector<aug::OmegaVector> o1, o2, o3;
    for (std::size_t i = start; i < end; ++i) {
      RandomStream rng(derive_seed(seed, 0xc0d2, i));
      auto pair = aug::make_view_pair(dataset.images[indices[i]], policy, rng);
      o1.push_back(aug::encode_omega(pair.record1, policy));
      o2.push_back(aug::encode_omega(pair.record2, policy));
      v1.push_back(std::move(pair.view1));
      v2.push_back(std::move(pair.view2));
    }
    RandomStream swap_rng(derive_seed(seed, 0xc0d3, start));
    for (std::size_t i = 0; i < m; ++i) {
      auto j = static_cast<std::size_t>(swap_rng.uniform_int(0, static_cast<int64_t>(m) - 2));
      if (j >= i) ++j;
      o3.push_back(o2[j]);
    }
    const auto e1 = model->embed(ssl::images_to_tensor(v1));
    const auto e2 = model->embed(ssl::images_to_tensor(v2));
    const auto z1 = unit_rows(model->projector->forward(e1, cond::omega_tensor(o1)));
    const auto z2 = unit_rows(model->projector->forward(e2, cond::omega_tensor(o2)));
    const auto z3 = unit_rows(model->projector->forward(e2, cond::omega_tensor(o3)));
    const auto st = (z1 * z2).sum(1).contiguous();
    const auto sr = (z1 * z3).sum(1).contiguous();
    for (int64_t i = 0; i < st.size(0); ++i) {
      const double a = st[i].item<double>(), b = sr[i].item<double>();
      r.sims_true.push_back(a);
      r.sims_random.push_back(b);
      if (a > b) wins += 1.0;
      else if (a == b) ties += 1.0;
    }
    start = end;
  }

  const double n = static_cast<double>(r.sims_true.size());
  r.mean_sim_true = std::accumulate(r.sims_true.begin(), r.sims_true.end(), 0.0) / n;
  r.mean_sim_random = std::accumulate(r.sims_random.begin(), r.sims_random.end(), 0.0) / n;
  r.frac_true_gt_random = (wins + 0.5 * ties) / n;
  std::vector<double> diff(r.sims_true.size());
  for (std::size_t i = 0; i < diff.size(); ++i) diff[i] = r.sims_true[i] - r.sims_random[i];
  std::tie(r.t_statistic, r.p_value) = paired_t_test_greater(diff);
  return r;
}

// --- Stage-wise sensitivity --------------------------------------------------

std::string SensitivityProfile::to_json() const {
  json j = {{"augmentation", std::string(aug::to_string(kind))},
            {"temperature", temperature},
            {"batch_size", batch_size},
            {"n_batches", n_batches},
            {"stages", stage_map_json(values)}};
  return j.dump(2);
}

SensitivityProfile stagewise_infonce(ssl::SslModel& model, const data::Dataset& dataset,
                                     const aug::AugmentationPolicy& policy, aug::AugKind kind, int batch_size,
                                     double temperature, uint64_t seed, int n_batches) {
  if (batch_size < 2) fail("batch_size must be at least 2");
  if (n_batches < 1) fail("n_batches must be positive");
  if (!(temperature > 0)) fail("temperature must be positive");
  if (dataset.size() < static_cast<std::size_t>(batch_size)) fail("dataset smaller than one batch");

  torch::NoGradGuard no_grad;
  EvalModeGuard guard(model);
  const auto identity_record = aug::AugmentationRecord{};
  const auto identity_omega = aug::encode_omega(identity_record, policy);

  SensitivityProfile p;
  p.kind = kind;
  p.temperature = temperature;
  p.batch_size = batch_size;
  p.n_batches = n_batches;
  std::array<double, 6> sums{};

  for (int b = 0; b < n_batches; ++b) {
    RandomStream pick_rng(derive_seed(seed, 0x5e45, static_cast<uint64_t>(b)));
    const auto idx = sample_indices(dataset.size(), static_cast<std::size_t>(batch_size), pick_rng);
    std::vector<aug::Image> orig, views;
    std::vector<aug::OmegaVector> o_orig, o_view;
    for (std::size_t i = 0; i < idx.size(); ++i) {
      const auto& img = dataset.images[idx[i]];
      RandomStream rng(derive_seed(seed, 0x5e46 + static_cast<uint64_t>(b), i));
      auto record = aug::sample_single(policy, kind, rng, img.width, img.height);
      views.push_back(aug::apply_record(img, record, policy));
      o_view.push_back(aug::encode_omega(record, policy));
      orig.push_back(aug::center_crop_resize(img, policy.out_size));
      o_orig.push_back(identity_omega);
    }
    const auto xa = ssl::images_to_tensor(orig);
    const auto xb = ssl::images_to_tensor(views);
    const auto ta = model->backbone->forward_taps(xa);
    const auto tb = model->backbone->forward_taps(xb);
    for (std::size_t s = 0; s < ta.size(); ++s) {
      const auto sim = unit_rows(ta[s]).mm(unit_rows(tb[s]).t());
      sums[s] += ssl::info_nce_diagonal(sim, temperature).item<double>();
    }
    const auto za = model->projector->forward(ta[4], cond::omega_tensor(o_orig));
    const auto zb = model->projector->forward(tb[4], cond::omega_tensor(o_view));
    sums[5] += ssl::info_nce_diagonal(unit_rows(za).mm(unit_rows(zb).t()), temperature).item<double>();
  }
  const std::array<ssl::StageTag, 6> tags{ssl::StageTag::stage1, ssl::StageTag::stage2,    ssl::StageTag::stage3,
                                          ssl::StageTag::stage4, ssl::StageTag::extractor, ssl::StageTag::projector};
  for (std::size_t s = 0; s < tags.size(); ++s) p.values[tags[s]] = sums[s] / n_batches;
  return p;
}

// --- Spectra -----------------------------------------------------------------

std::vector<double> covariance_eigenvalues(const torch::Tensor& embeddings) {
  if (embeddings.dim() != 2) fail("embeddings must be a matrix");
  if (embeddings.size(0) < 2) fail("need at least two rows for a covariance");
  const auto x = embeddings.to(torch::kFloat64);
  const auto xc = x - x.mean(0, true);
  const auto cov = xc.t().mm(xc) / static_cast<double>(x.size(0) - 1);
  const auto eig = torch::linalg_eigvalsh(cov).flip(0).contiguous();
  const auto* p = eig.data_ptr<double>();
  return std::vector<double>(p, p + eig.numel());
}

std::string SpectrumFit::to_json() const {
  json j = {{"alpha", alpha},   {"intercept", intercept}, {"r2", r2},
            {"fit_lo", fit_lo}, {"fit_hi", fit_hi},       {"eigenvalues", eigenvalues}};
  return j.dump(2);
}

SpectrumFit fit_power_law(std::span<const double> eigenvalues, int64_t lo, int64_t hi) {
  if (lo < 1 || hi > static_cast<int64_t>(eigenvalues.size()) || hi < lo) {
    fail("fit range [" + std::to_string(lo) + ", " + std::to_string(hi) + "] outside 1.." +
         std::to_string(eigenvalues.size()));
  }
  if (hi - lo + 1 < 10) fail("power-law fit needs at least 10 eigenvalues");
  std::vector<double> xs, ys;
  for (int64_t i = lo; i <= hi; ++i) {
    const double v = eigenvalues[static_cast<std::size_t>(i - 1)];
    if (!(v > 0)) fail("non-positive eigenvalue at index " + std::to_string(i) + " inside the fit range");
    xs.push_back(std::log(static_cast<double>(i)));
    ys.push_back(std::log(v));
  }
  const double n = static_cast<double>(xs.size());
  const double mx = std::accumulate(xs.begin(), xs.end(), 0.0) / n;
  const double my = std::accumulate(ys.begin(), ys.end(), 0.0) / n;
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    sxy += (xs[i] - mx) * (ys[i] - my);
    sxx += (xs[i] - mx) * (xs[i] - mx);
    syy += (ys[i] - my) * (ys[i] - my);
  }
  const double slope = sxy / sxx;
  SpectrumFit f;
  f.alpha = -slope;
  f.intercept = my - slope * mx;
  f.r2 = syy > 0 ? (sxy * sxy) / (sxx * syy) : 1.0;
  f.fit_lo = lo;
  f.fit_hi = hi;
  f.eigenvalues.assign(eigenvalues.begin(), eigenvalues.end());
  return f;
}

SpectrumFit eigenspectrum_alpha(const torch::Tensor& embeddings, const SpectrumOptions& options) {
  auto eig = covariance_eigenvalues(embeddings);
  const int64_t n = embeddings.size(0), d = embeddings.size(1);
  if (options.truncate) {
    if (*options.truncate < 1 || *options.truncate > d) fail("truncate must be in [1, d]");
    eig.resize(static_cast<std::size_t>(*options.truncate));
  } else if (n - 1 < d) {
    fail("rank-deficient covariance: " + std::to_string(n) + " rows for " + std::to_string(d) +
         " dims; pass an explicit truncation");
  }
  const auto k = static_cast<int64_t>(eig.size());
  const auto range = options.fit_range.value_or(std::pair<int64_t, int64_t>{10, k / 2});
  const double floor = options.rel_tol * std::max(eig.front(), 0.0);
  for (int64_t i = range.first; i <= std::min(range.second, k); ++i) {
    if (eig[static_cast<std::size_t>(i - 1)] <= floor) {
      fail("rank-deficient covariance: eigenvalue " + std::to_string(i) +
           " is numerically zero; truncate the spectrum");
    }
  }
  return fit_power_law(eig, range.first, range.second);
}

std::string VarianceCurve::to_json() const {
  json j = {{"threshold", threshold},
            {"components_for_threshold", components_for_threshold},
            {"eigenvalues", eigenvalues},
            {"cumulative", cumulative}};
  return j.dump(2);
}

VarianceCurve explained_variance(const torch::Tensor& embeddings, double threshold) {
  if (!(threshold > 0 && threshold <= 1)) fail("threshold must be in (0, 1]");
  VarianceCurve c;
  c.threshold = threshold;
  c.eigenvalues = covariance_eigenvalues(embeddings);
  for (auto& v : c.eigenvalues) v = std::max(v, 0.0);
  const double total = std::accumulate(c.eigenvalues.begin(), c.eigenvalues.end(), 0.0);
  if (!(total > 0)) fail("embeddings have zero variance");
  double run = 0.0;
  for (double v : c.eigenvalues) {
    run += v;
    c.cumulative.push_back(std::min(run / total, 1.0));
  }
  c.cumulative.back() = 1.0;
  for (std::size_t i = 0; i < c.cumulative.size(); ++i) {
    if (c.cumulative[i] >= threshold) {
      c.components_for_threshold = static_cast<int64_t>(i + 1);
      break;
    }
  }
  return c;
}

int64_t count_nonzero(std::span<const double> eigenvalues, double tol) {
  return std::count_if(eigenvalues.begin(), eigenvalues.end(), [&](double v) { return v > tol; });
}

// --- Retrieval ---------------------------------------------------------------

std::vector<std::vector<int64_t>> retrieve_batch(const torch::Tensor& queries, const torch::Tensor& gallery,
                                                 int64_t k) {
  if (gallery.dim() != 2 || gallery.size(0) == 0) fail("empty gallery");
  if (queries.dim() != 2) fail("queries must be a matrix");
  if (queries.size(1) != gallery.size(1)) fail("query and gallery dims differ");
  if (k < 1 || k > gallery.size(0)) fail("k must be in [1, gallery size]");
  const auto sims = unit_rows(queries).mm(unit_rows(gallery).t()).contiguous();
  const int64_t m = gallery.size(0);
  std::vector<std::vector<int64_t>> out;
  for (int64_t q = 0; q < sims.size(0); ++q) {
    const double* row = sims.data_ptr<double>() + q * m;
    std::vector<int64_t> idx(static_cast<std::size_t>(m));
    std::iota(idx.begin(), idx.end(), int64_t{0});
    std::stable_sort(idx.begin(), idx.end(), [&](int64_t a, int64_t b) { return row[a] > row[b]; });
    idx.resize(static_cast<std::size_t>(k));
    out.push_back(std::move(idx));
  }
  return out;
}

std::vector<int64_t> retrieve(const torch::Tensor& query, const torch::Tensor& gallery, int64_t k) {
  return retrieve_batch(query.reshape({1, -1}), gallery, k).front();
}

// --- Loss curves -------------------------------------------------------------

std::string LossCurveReport::to_json() const {
  json j = {{"epochs", epochs}, {"baseline", baseline}, {"conditioned", conditioned}, {"difference", difference}};
  return j.dump(2);
}

LossCurveReport loss_curve_difference(std::span<const train::EpochLog> baseline,
                                      std::span<const train::EpochLog> conditioned) {
  LossCurveReport r;
  for (const auto& b : baseline) {
    auto it = std::find_if(conditioned.begin(), conditioned.end(),
                           [&](const train::EpochLog& c) { return c.epoch == b.epoch; });
    if (it == conditioned.end()) continue;
    r.epochs.push_back(b.epoch);
    r.baseline.push_back(b.mean_loss);
    r.conditioned.push_back(it->mean_loss);
    r.difference.push_back(it->mean_loss - b.mean_loss);
  }
  if (r.epochs.empty()) fail("the two loss logs share no epochs");
  return r;
}

// --- Plots -------------------------------------------------------------------

void write_svg_plot(const fs::path& path, const std::string& title, std::span<const PlotSeries> series,
                    bool log_log) {
  constexpr double W = 640, H = 400, M = 50;
  auto tx = [&](double v) { return log_log ? std::log10(std::max(v, 1e-300)) : v; };
  double x0 = std::numeric_limits<double>::infinity(), x1 = -x0, y0 = x0, y1 = -x0;
  for (const auto& s : series) {
    for (std::size_t i = 0; i < s.x.size() && i < s.y.size(); ++i) {
      x0 = std::min(x0, tx(s.x[i]));
      x1 = std::max(x1, tx(s.x[i]));
      y0 = std::min(y0, tx(s.y[i]));
      y1 = std::max(y1, tx(s.y[i]));
    }
  }
  if (!(x1 > x0)) x1 = x0 + 1;
  if (!(y1 > y0)) y1 = y0 + 1;
  static const char* colors[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e"};
  std::ostringstream os;
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H << "\">\n"
     << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
     << "<text x=\"" << W / 2 << "\" y=\"20\" text-anchor=\"middle\" font-size=\"14\">" << title << "</text>\n"
     << "<rect x=\"" << M << "\" y=\"" << M << "\" width=\"" << W - 2 * M << "\" height=\"" << H - 2 * M
     << "\" fill=\"none\" stroke=\"black\"/>\n";
  for (std::size_t k = 0; k < series.size(); ++k) {
    const auto& s = series[k];
    os << "<polyline fill=\"none\" stroke=\"" << colors[k % 5] << "\" points=\"";
    for (std::size_t i = 0; i < s.x.size() && i < s.y.size(); ++i) {
      const double px = M + (tx(s.x[i]) - x0) / (x1 - x0) * (W - 2 * M);
      const double py = H - M - (tx(s.y[i]) - y0) / (y1 - y0) * (H - 2 * M);
      os << px << ',' << py << ' ';
    }
    os << "\"/>\n<text x=\"" << M + 10 << "\" y=\"" << M + 16 * (k + 1) << "\" fill=\"" << colors[k % 5]
       << "\" font-size=\"12\">" << s.name << "</text>\n";
  }
  os << "</svg>\n";
  data::write_text_atomic(path, os.str());
}

}  // namespace cassle::analysis
