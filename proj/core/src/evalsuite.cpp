#include "cassle/evalsuite.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <map>
#include <numeric>
#include <set>
#include <sstream>

#include "cassle/random.hpp"
#include "json.hpp"

namespace cassle::eval {

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

[[noreturn]] void fail(const std::string& msg) { throw EvalError(msg); }

torch::Tensor labels_tensor(std::span<const int> labels) {
  std::vector<int64_t> v(labels.begin(), labels.end());
  return torch::tensor(v, torch::kInt64);
}

void check_labels(std::span<const int> labels, int class_count, std::string_view what) {
  for (int y : labels) {
    if (y < 0 || y >= class_count) {
      fail(std::string(what) + ": label " + std::to_string(y) + " outside [0, " + std::to_string(class_count) + ")");
    }
  }
}

torch::Tensor rows_of(const torch::Tensor& x, std::span<const std::size_t> idx) {
  std::vector<int64_t> v(idx.begin(), idx.end());
  return x.index_select(0, torch::tensor(v, torch::kInt64));
}

std::vector<int> pick(std::span<const int> y, std::span<const std::size_t> idx) {
  std::vector<int> out;
  out.reserve(idx.size());
  for (auto i : idx) out.push_back(y[i]);
  return out;
}

double score(const std::string& metric, std::span<const int> predicted, std::span<const int> truth, int classes) {
  if (metric == "top1") return top1_accuracy(predicted, truth);
  if (metric == "mean-per-class") return mean_per_class_accuracy(predicted, truth, classes);
  fail("unknown classification metric '" + metric + "'");
}

std::string split_key_for(const data::Dataset& dataset, const EmbedOptions& options) {
  std::string key = options.split_key.empty() ? std::string(data::to_string(dataset.split)) : options.split_key;
  if (options.tap != ssl::StageTag::extractor) key += "@" + std::string(ssl::to_string(options.tap));
  if (!options.center_crop) key += "-nocrop";
  if (options.crop_fraction != 1.0) {
    std::ostringstream os;
    os << "-crop" << options.crop_fraction;
    key += os.str();
  }
  return key;
}

}  // namespace

// --- Results -----------------------------------------------------------------

std::string ProbeResult::to_json() const {
  json j = {{"dataset", dataset_id}, {"metric", metric},  {"value", value},
            {"chosen_l2", chosen_l2}, {"seed", seed},      {"checkpoint_hash", checkpoint_hash},
            {"label", label},         {"l2_grid", l2_grid}, {"val_scores", val_scores}};
  return j.dump(2);
}

ProbeResult ProbeResult::from_json(std::string_view text) {
  const auto j = json::parse(text);
  ProbeResult r;
  r.dataset_id = j.at("dataset").get<std::string>();
  r.metric = j.at("metric").get<std::string>();
  r.value = j.at("value").get<double>();
  r.chosen_l2 = j.value("chosen_l2", 0.0);
  r.seed = j.value("seed", uint64_t{0});
  r.checkpoint_hash = j.value("checkpoint_hash", "");
  r.label = j.value("label", "");
  r.l2_grid = j.value("l2_grid", std::vector<double>{});
  r.val_scores = j.value("val_scores", std::vector<double>{});
  return r;
}

std::string aggregate_csv(std::span<const ProbeResult> results) {
  std::vector<std::string> rows, cols;
  std::map<std::pair<std::string, std::string>, double> cell;
  for (const auto& r : results) {
    const auto row = r.label.empty() ? r.checkpoint_hash.substr(0, 12) : r.label;
    const auto col = r.dataset_id + " (" + r.metric + ")";
    if (std::find(rows.begin(), rows.end(), row) == rows.end()) rows.push_back(row);
    if (std::find(cols.begin(), cols.end(), col) == cols.end()) cols.push_back(col);
    cell[{row, col}] = r.metric == "r2" ? r.value : 100.0 * r.value;
  }
  std::ostringstream os;
  os << "method";
  for (const auto& c : cols) os << ',' << c;
  os << '\n' << std::fixed << std::setprecision(2);
  for (const auto& r : rows) {
    os << r;
    for (const auto& c : cols) {
      os << ',';
      if (auto it = cell.find({r, c}); it != cell.end()) os << it->second;
    }
    os << '\n';
  }
  return os.str();
}

// --- Embedding ---------------------------------------------------------------

EmbedResult embed_dataset(ssl::SslModel& model, const std::string& checkpoint_hash, int input_size,
                          const data::Dataset& dataset, const EmbedOptions& options) {
  if (dataset.size() == 0) fail("cannot embed an empty dataset");
  if (options.tap == ssl::StageTag::projector) fail("embed_dataset reads feature-extractor stages only");
  if (options.batch_size <= 0) fail("embed batch_size must be positive");

  EmbedResult out;
  out.labels = dataset.labels;
  out.class_count = dataset.class_count;

  data::CacheManifest key;
  key.checkpoint_hash = checkpoint_hash;
  key.dataset_id = dataset.id;
  key.split = split_key_for(dataset, options);

  if (options.cache_root) {
    data::CacheManifest stored;
    if (auto payload = data::cache_get(*options.cache_root, key, &stored); payload && stored.rows == dataset.size()) {
      out.embeddings.matrix = torch::from_blob(payload->data(), {static_cast<int64_t>(stored.rows),
                                                                 static_cast<int64_t>(stored.cols)},
                                               torch::kFloat32)
                                  .clone();
      out.embeddings.stage_tag = options.tap;
      out.cache_hit = true;
      out.cache_file = data::cache_entry_path(*options.cache_root, key, "bin");
      return out;
    }
  }

  std::vector<torch::Tensor> chunks;
  for (std::size_t start = 0; start < dataset.size(); start += static_cast<std::size_t>(options.batch_size)) {
    const auto end = std::min(dataset.size(), start + static_cast<std::size_t>(options.batch_size));
    std::vector<aug::Image> batch;
    batch.reserve(end - start);
    for (std::size_t i = start; i < end; ++i) {
      const auto& img = dataset.images[i];
      if (options.center_crop) {
        batch.push_back(aug::center_crop_resize(img, input_size, options.crop_fraction));
      } else {
        if (img.height != input_size || img.width != input_size) {
          fail("dataset '" + dataset.id + "' has " + std::to_string(img.height) + "x" + std::to_string(img.width) +
               " images but the checkpoint expects " + std::to_string(input_size) + "x" +
               std::to_string(input_size));
        }
        batch.push_back(img);
      }
    }
    chunks.push_back(ssl::extract_features(model->backbone, ssl::images_to_tensor(batch), options.tap).matrix);
  }
  out.embeddings.matrix = torch::cat(chunks, 0).contiguous();
  out.embeddings.stage_tag = options.tap;

  if (options.cache_root) {
    key.rows = static_cast<std::size_t>(out.embeddings.rows());
    key.cols = static_cast<std::size_t>(out.embeddings.cols());
    const auto& m = out.embeddings.matrix;
    out.cache_file = data::cache_put(*options.cache_root, key,
                                     std::span<const float>(m.data_ptr<float>(), static_cast<std::size_t>(m.numel())));
  }
  return out;
}

// --- Logistic regression -----------------------------------------------------

torch::Tensor LogisticModel::logits(const torch::Tensor& x) const {
  return torch::addmm(bias, x.to(torch::kFloat64), weight.t());
}

std::vector<int> LogisticModel::predict(const torch::Tensor& x) const {
  const auto arg = logits(x).argmax(1).contiguous();
  const auto* p = arg.data_ptr<int64_t>();
  return std::vector<int>(p, p + arg.numel());
}

LogisticModel fit_logistic(const torch::Tensor& x, std::span<const int> labels, int class_count, double l2,
                           int max_iter, const LogisticModel* warm_start) {
  if (x.dim() != 2) fail("features must be a matrix");
  if (x.size(0) != static_cast<int64_t>(labels.size())) fail("feature rows and label count differ");
  if (class_count < 2) fail("logistic regression needs at least two classes");
  if (!(l2 >= 0)) fail("l2 must be non-negative");
  check_labels(labels, class_count, "fit_logistic");
  if (std::set<int>(labels.begin(), labels.end()).size() < 2) fail("training set contains a single class");

  const auto xd = x.to(torch::kFloat64).contiguous();
  const auto y = labels_tensor(labels);
  const int64_t d = xd.size(1);
  torch::Tensor w, b;
  if (warm_start && warm_start->weight.defined()) {
    w = warm_start->weight.detach().clone();
    b = warm_start->bias.detach().clone();
  } else {
    w = torch::zeros({class_count, d}, torch::kFloat64);
    b = torch::zeros({class_count}, torch::kFloat64);
  }
  w.set_requires_grad(true);
  b.set_requires_grad(true);

  torch::optim::LBFGS opt({w, b}, torch::optim::LBFGSOptions(1.0)
                                      .max_iter(max_iter)
                                      .max_eval(max_iter + max_iter / 4)
                                      .tolerance_grad(1e-7)
                                      .tolerance_change(1e-10)
                                      .history_size(20)
                                      .line_search_fn("strong_wolfe"));
  auto closure = [&] {
    opt.zero_grad();
    auto loss = torch::nn::functional::cross_entropy(torch::addmm(b, xd, w.t()), y) + 0.5 * l2 * w.pow(2).sum();
    loss.backward();
    return loss;
  };
  opt.step(closure);
  return {w.detach(), b.detach()};
}

double top1_accuracy(std::span<const int> predicted, std::span<const int> truth) {
  if (predicted.size() != truth.size() || truth.empty()) fail("accuracy needs equal, non-empty label lists");
  std::size_t hit = 0;
  for (std::size_t i = 0; i < truth.size(); ++i) hit += predicted[i] == truth[i];
  return static_cast<double>(hit) / static_cast<double>(truth.size());
}

double mean_per_class_accuracy(std::span<const int> predicted, std::span<const int> truth, int class_count) {
  if (predicted.size() != truth.size() || truth.empty()) fail("accuracy needs equal, non-empty label lists");
  std::vector<std::size_t> hit(class_count, 0), total(class_count, 0);
  for (std::size_t i = 0; i < truth.size(); ++i) {
    ++total.at(truth[i]);
    hit[truth[i]] += predicted[i] == truth[i];
  }
  double sum = 0.0;
  int present = 0;
  for (int c = 0; c < class_count; ++c) {
    if (total[c] == 0) continue;
    sum += static_cast<double>(hit[c]) / static_cast<double>(total[c]);
    ++present;
  }
  return sum / present;
}

std::vector<double> log_grid(double lo, double hi, int n) {
  if (!(lo > 0) || !(hi >= lo) || n < 1) fail("log_grid needs 0 < lo <= hi and n >= 1");
  if (n == 1) return {lo};
  std::vector<double> g(n);
  const double a = std::log10(lo), b = std::log10(hi);
  for (int i = 0; i < n; ++i) g[i] = std::pow(10.0, a + (b - a) * i / (n - 1));
  g.front() = lo;
  g.back() = hi;
  return g;
}

std::vector<double> default_l2_grid() { return log_grid(1e-6, 1e5, 45); }

ProbeResult linear_probe(const ProbeSplit& train, const ProbeSplit& val, const ProbeSplit& test, int class_count,
                         const LinearProbeOptions& options) {
  if (options.l2_grid.empty()) fail("empty l2 grid");
  if (train.x.size(0) == 0 || val.x.size(0) == 0 || test.x.size(0) == 0) fail("probe splits must be non-empty");
  if (train.x.size(1) != val.x.size(1) || train.x.size(1) != test.x.size(1)) fail("probe splits differ in width");
  for (const auto* s : {&train, &val, &test}) {
    if (s->x.size(0) != static_cast<int64_t>(s->y.size())) fail("probe split rows and labels differ");
    check_labels(s->y, class_count, "linear_probe");
  }
  if (std::set<int>(train.y.begin(), train.y.end()).size() < 2) fail("training set contains a single class");

  // Strongest regularization first, each fit warm-started from the previous.
  std::vector<std::size_t> order(options.l2_grid.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](auto a, auto b) { return options.l2_grid[a] > options.l2_grid[b]; });

  ProbeResult r;
  r.metric = options.metric;
  r.seed = options.seed;
  r.dataset_id = options.dataset_id;
  r.checkpoint_hash = options.checkpoint_hash;
  r.l2_grid = options.l2_grid;
  r.val_scores.assign(options.l2_grid.size(), 0.0);

  LogisticModel prev, best;
  double best_score = -1.0;
  std::size_t best_idx = order.front();
  for (auto gi : order) {
    auto m = fit_logistic(train.x, train.y, class_count, options.l2_grid[gi], options.max_iter,
                          prev.weight.defined() ? &prev : nullptr);
    const double s = score(options.metric, m.predict(val.x), val.y, class_count);
    r.val_scores[gi] = s;
    if (s > best_score) {
      best_score = s;
      best_idx = gi;
      best = m;
    }
    prev = std::move(m);
  }
  r.chosen_l2 = options.l2_grid[best_idx];

  std::vector<int> y_all = train.y;
  y_all.insert(y_all.end(), val.y.begin(), val.y.end());
  const auto x_all = torch::cat({train.x.to(torch::kFloat64), val.x.to(torch::kFloat64)}, 0);
  const auto final_model = fit_logistic(x_all, y_all, class_count, r.chosen_l2, options.max_iter, &best);
  r.value = score(options.metric, final_model.predict(test.x), test.y, class_count);
  return r;
}

double r2_score(const torch::Tensor& predicted, const torch::Tensor& truth) {
  if (predicted.sizes() != truth.sizes() || truth.size(0) == 0) fail("r2_score needs equal non-empty shapes");
  const auto p = predicted.to(torch::kFloat64).reshape({truth.size(0), -1});
  const auto t = truth.to(torch::kFloat64).reshape({truth.size(0), -1});
  const auto ss_res = (t - p).pow(2).sum(0);
  const auto ss_tot = (t - t.mean(0, true)).pow(2).sum(0);
  double sum = 0.0;
  for (int64_t j = 0; j < t.size(1); ++j) {
    const double res = ss_res[j].item<double>(), tot = ss_tot[j].item<double>();
    sum += tot > 0 ? 1.0 - res / tot : (res == 0 ? 1.0 : 0.0);
  }
  return sum / static_cast<double>(t.size(1));
}

ProbeResult ridge_probe(const torch::Tensor& train_x, const torch::Tensor& train_y, const torch::Tensor& val_x,
                        const torch::Tensor& val_y, const torch::Tensor& test_x, const torch::Tensor& test_y,
                        const LinearProbeOptions& options) {
  if (options.l2_grid.empty()) fail("empty l2 grid");
  if (train_x.size(0) != train_y.size(0) || val_x.size(0) != val_y.size(0) || test_x.size(0) != test_y.size(0)) {
    fail("ridge probe rows and targets differ");
  }
  auto fit = [](const torch::Tensor& x, const torch::Tensor& y, double l2) {
    const auto xd = x.to(torch::kFloat64);
    const auto yd = y.to(torch::kFloat64).reshape({y.size(0), -1});
    const auto mx = xd.mean(0, true), my = yd.mean(0, true);
    const auto xc = xd - mx;
    const auto n = static_cast<double>(xd.size(0));
    const auto gram = xc.t().mm(xc) + l2 * n * torch::eye(xd.size(1), torch::kFloat64);
    const auto w = torch::linalg_solve(gram, xc.t().mm(yd - my));
    return [w, mx, my](const torch::Tensor& q) { return (q.to(torch::kFloat64) - mx).mm(w) + my; };
  };
  ProbeResult r;
  r.metric = "r2";
  r.seed = options.seed;
  r.dataset_id = options.dataset_id;
  r.checkpoint_hash = options.checkpoint_hash;
  r.l2_grid = options.l2_grid;
  double best = -std::numeric_limits<double>::infinity();
  for (double l2 : options.l2_grid) {
    const double s = r2_score(fit(train_x, train_y, l2)(val_x), val_y.reshape({val_y.size(0), -1}));
    r.val_scores.push_back(s);
    if (s > best) {
      best = s;
      r.chosen_l2 = l2;
    }
  }
  const auto pred = fit(torch::cat({train_x.to(torch::kFloat64), val_x.to(torch::kFloat64)}),
                        torch::cat({train_y.to(torch::kFloat64).reshape({train_y.size(0), -1}),
                                    val_y.to(torch::kFloat64).reshape({val_y.size(0), -1})}),
                        r.chosen_l2)(test_x);
  r.value = r2_score(pred, test_y.reshape({test_y.size(0), -1}));
  return r;
}

ProbeResult linear_eval(ssl::SslModel& model, const std::string& checkpoint_hash, int input_size,
                        const data::Dataset& train, const data::Dataset& test, const LinearEvalOptions& options) {
  if (train.class_count != test.class_count) fail("train and test class counts differ");
  const auto tr = embed_dataset(model, checkpoint_hash, input_size, train, options.embed);
  auto test_opts = options.embed;
  if (!test_opts.split_key.empty()) test_opts.split_key += "-test";
  const auto te = embed_dataset(model, checkpoint_hash, input_size, test, test_opts);
  const auto parts = data::split_dataset(tr.labels, options.val_split, options.probe.seed);
  const ProbeSplit fit_split{rows_of(tr.embeddings.matrix, parts.first), pick(tr.labels, parts.first)};
  const ProbeSplit val_split{rows_of(tr.embeddings.matrix, parts.second), pick(tr.labels, parts.second)};
  const ProbeSplit test_split{te.embeddings.matrix, te.labels};
  auto opts = options.probe;
  if (opts.dataset_id.empty()) opts.dataset_id = test.id;
  if (opts.checkpoint_hash.empty()) opts.checkpoint_hash = checkpoint_hash;
  return linear_probe(fit_split, val_split, test_split, train.class_count, opts);
}

// --- Few-shot ----------------------------------------------------------------

void EpisodeSpec::validate() const {
  if (n_way < 2) fail("n_way must be at least 2");
  if (k_shot < 1) fail("k_shot must be positive");
  if (!query_is_support && query_per_class < 1) fail("query_per_class must be positive");
  if (n_episodes < 1) fail("n_episodes must be positive");
}

std::string FewShotResult::to_json() const {
  json j = {{"n_way", spec.n_way},
            {"k_shot", spec.k_shot},
            {"query_per_class", spec.query_per_class},
            {"n_episodes", spec.n_episodes},
            {"query_is_support", spec.query_is_support},
            {"seed", seed},
            {"mean", mean},
            {"ci95", ci95},
            {"episodes", episode_accuracy}};
  return j.dump(2);
}

FewShotResult few_shot_eval(const torch::Tensor& x, std::span<const int> labels, const EpisodeSpec& spec,
                            uint64_t seed, double l2) {
  spec.validate();
  if (x.size(0) != static_cast<int64_t>(labels.size())) fail("embedding rows and labels differ");
  const std::size_t need = static_cast<std::size_t>(spec.k_shot) + (spec.query_is_support ? 0 : spec.query_per_class);
  std::map<int, std::vector<std::size_t>> by_class;
  for (std::size_t i = 0; i < labels.size(); ++i) by_class[labels[i]].push_back(i);
  std::vector<int> eligible;
  for (const auto& [c, idx] : by_class) {
    if (idx.size() >= need) eligible.push_back(c);
  }
  if (eligible.size() < static_cast<std::size_t>(spec.n_way)) {
    fail("few-shot episodes need " + std::to_string(spec.n_way) + " classes with at least " + std::to_string(need) +
         " samples; only " + std::to_string(eligible.size()) + " qualify");
  }

  const auto xd = x.to(torch::kFloat64).contiguous();
  FewShotResult out;
  out.spec = spec;
  out.seed = seed;
  out.episode_accuracy.reserve(spec.n_episodes);
  const double support_l2 = l2 >= 0 ? l2 : 1.0 / (spec.n_way * spec.k_shot);

  for (int ep = 0; ep < spec.n_episodes; ++ep) {
    RandomStream rng(derive_seed(seed, 0xf5e7, static_cast<uint64_t>(ep)));
    auto classes = eligible;
    for (int i = 0; i < spec.n_way; ++i) {
      const auto j = rng.uniform_int(i, static_cast<int64_t>(classes.size()) - 1);
      std::swap(classes[i], classes[j]);
    }
    std::vector<std::size_t> support, query;
    std::vector<int> ys, yq;
    for (int w = 0; w < spec.n_way; ++w) {
      auto pool = by_class[classes[w]];
      for (std::size_t i = 0; i < need; ++i) {
        const auto j = static_cast<std::size_t>(rng.uniform_int(static_cast<int64_t>(i), static_cast<int64_t>(pool.size()) - 1));
        std::swap(pool[i], pool[j]);
      }
      for (int s = 0; s < spec.k_shot; ++s) {
        support.push_back(pool[s]);
        ys.push_back(w);
      }
      if (spec.query_is_support) continue;
      for (int q = 0; q < spec.query_per_class; ++q) {
        query.push_back(pool[spec.k_shot + q]);
        yq.push_back(w);
      }
    }
    if (spec.query_is_support) {
      query = support;
      yq = ys;
    }
    const auto model = fit_logistic(rows_of(xd, support), ys, spec.n_way, support_l2);
    out.episode_accuracy.push_back(top1_accuracy(model.predict(rows_of(xd, query)), yq));
  }

  const double n = static_cast<double>(out.episode_accuracy.size());
  out.mean = std::accumulate(out.episode_accuracy.begin(), out.episode_accuracy.end(), 0.0) / n;
  if (n > 1) {
    double ss = 0.0;
    for (double a : out.episode_accuracy) ss += (a - out.mean) * (a - out.mean);
    out.ci95 = 1.96 * std::sqrt(ss / (n - 1)) / std::sqrt(n);
  }
  return out;
}

// --- Rotation ----------------------------------------------------------------

data::Dataset rotated_dataset(const data::Dataset& dataset) {
  data::Dataset out;
  out.id = dataset.id;
  out.split = dataset.split;
  out.class_count = 4;
  out.images.reserve(dataset.size() * 4);
  out.labels.reserve(dataset.size() * 4);
  for (const auto& img : dataset.images) {
    for (int r = 0; r < 4; ++r) {
      out.images.push_back(aug::rotate90(img, r));
      out.labels.push_back(r);
    }
  }
  return out;
}

ProbeResult rotation_probe(ssl::SslModel& model, const std::string& checkpoint_hash, int input_size,
                           const data::Dataset& train, const data::Dataset& test, const LinearEvalOptions& options) {
  auto opts = options;
  opts.embed.split_key = std::string(data::to_string(train.split)) + "-rot4";
  if (opts.probe.dataset_id.empty()) opts.probe.dataset_id = test.id + "-rotation";
  return linear_eval(model, checkpoint_hash, input_size, rotated_dataset(train), rotated_dataset(test), opts);
}

}  // namespace cassle::eval
