#include "cli.hpp"

#include <torch/torch.h>

#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>

#include "CLI11.hpp"
#include "cassle/analysis.hpp"
#include "cassle/datahub.hpp"
#include "cassle/evalsuite.hpp"
#include "cassle/trainer.hpp"
#include "json.hpp"

namespace cassle::cli {

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Stores path arguments as absolute paths so snapshots replay from any cwd.
const CLI::Validator kAbsolutePath(
    [](std::string& s) {
      if (!s.empty()) s = fs::absolute(s).lexically_normal().string();
      return std::string();
    },
    "PATH");

struct DataArgs {
  std::string dataset;
  std::string root;
  std::size_t limit = 0;
  std::size_t test_limit = 0;
  std::string split = "test";
};

void add_data_options(CLI::App* sub, DataArgs& d) {
  sub->add_option("--dataset", d.dataset, "Dataset id (cifar10, cifar100, stl10, synthetic)");
  sub->add_option("--data-root", d.root, "Dataset directory (default: $CASSLE_DATA_ROOT)")->transform(kAbsolutePath);
  sub->add_option("--limit", d.limit, "Use only the first N training images");
  sub->add_option("--test-limit", d.test_limit, "Use only the first N test images");
}

fs::path resolve_root(const std::string& given, const train::RunConfig* fallback) {
  if (!given.empty()) return given;
  if (const char* env = std::getenv("CASSLE_DATA_ROOT"); env && *env) return env;
  if (fallback && !fallback->data.root.empty()) return fallback->data.root;
  throw UsageError("no dataset root: pass --data-root or set CASSLE_DATA_ROOT");
}

data::Dataset load_split(const DataArgs& d, const train::RunConfig* fallback, data::Split split) {
  const auto id = d.dataset.empty() ? (fallback ? fallback->data.dataset : std::string("synthetic")) : d.dataset;
  try {
    data::parse_format(id);
  } catch (const std::exception& e) {
    throw UsageError(e.what());
  }
  const auto limit = split == data::Split::test ? d.test_limit : d.limit;
  return data::load_dataset(data::make_ref(id, resolve_root(d.root, fallback), split, limit));
}

train::Checkpoint open_checkpoint(const std::string& dir) {
  if (!fs::exists(fs::path(dir) / "manifest.json")) {
    throw UsageError("'" + dir + "' is not a checkpoint directory");
  }
  return train::load_checkpoint(dir);
}

// Recorded option values of a parsed subcommand, keyed by long name.
json recorded_options(const CLI::App* sub) {
  json opts = json::object();
  for (const auto* opt : sub->get_options()) {
    if (opt->count() == 0 || opt->get_name() == "--help") continue;
    auto name = opt->get_single_name();
    if (opt->get_expected_max() == 0) {
      opts[name] = static_cast<int>(opt->count());
    } else {
      opts[name] = opt->results();
    }
  }
  return opts;
}

std::vector<std::string> replay_args(const json& snapshot) {
  std::vector<std::string> args{snapshot.at("command").get<std::string>()};
  for (const auto& [name, value] : snapshot.at("options").items()) {
    const auto flag = (name.size() == 1 ? "-" : "--") + name;
    if (value.is_number()) {
      for (int i = 0; i < value.get<int>(); ++i) args.push_back(flag);
    } else {
      for (const auto& v : value) {
        args.push_back(flag);
        args.push_back(v.get<std::string>());
      }
    }
  }
  for (const auto& o : snapshot.value("overrides", json::array())) args.push_back(o.get<std::string>());
  return args;
}

/// <root>/<timestamp>-<hash prefix>, unique within the root.
fs::path make_run_dir(const fs::path& root, const std::string& hash) {
  const auto base = data::utc_timestamp() + "-" + hash.substr(0, 12);
  fs::path dir = root / base;
  for (int i = 1; fs::exists(dir); ++i) dir = root / (base + "-" + std::to_string(i));
  fs::create_directories(dir);
  return dir;
}

void write_snapshot(const fs::path& run_dir, const std::string& command, const json& options,
                    const std::vector<std::string>& overrides, const json& outputs) {
  json s = {{"command", command},       {"options", options},
            {"overrides", overrides},   {"outputs", outputs},
            {"created_at", data::utc_timestamp()}};
  data::write_text_atomic(run_dir / "snapshot.json", s.dump(2));
}

std::string options_hash(const std::string& command, const json& options, const std::vector<std::string>& overrides) {
  return data::sha256_hex(json{{"c", command}, {"o", options}, {"x", overrides}}.dump());
}

// Dotted overrides: --section.key=value or --section.key value.
std::map<std::string, std::string> parse_overrides(const std::vector<std::string>& extras,
                                                   std::vector<std::string>& normalized) {
  std::map<std::string, std::string> out;
  for (std::size_t i = 0; i < extras.size(); ++i) {
    const auto& a = extras[i];
    if (a.rfind("--", 0) != 0 || a.find('.') == std::string::npos) {
      throw UsageError("unexpected argument '" + a + "'");
    }
    const auto eq = a.find('=');
    std::string key, value;
    if (eq != std::string::npos) {
      key = a.substr(2, eq - 2);
      value = a.substr(eq + 1);
    } else {
      if (i + 1 >= extras.size()) throw UsageError("override '" + a + "' needs a value");
      key = a.substr(2);
      value = extras[++i];
    }
    out[key] = value;
    normalized.push_back("--" + key + "=" + value);
  }
  return out;
}

int fail_usage(std::ostream& err, const std::string& msg) {
  err << "error: " << msg << '\n';
  return usage_error;
}

// --- commands ----------------------------------------------------------------

struct PretrainArgs {
  std::string config;
  std::string out;
  std::string resume;
  int stop_after = 0;
  bool quiet = false;
};

int cmd_pretrain(const PretrainArgs& a, const json& options, const std::vector<std::string>& extras, std::ostream& out,
                 std::ostream& err) {
  std::vector<std::string> normalized;
  const auto overrides = parse_overrides(extras, normalized);
  auto config = train::load_run_config(a.config, overrides);
  if (!a.out.empty()) config.train.output_dir = a.out;
  if (config.data.root.empty()) {
    if (const char* env = std::getenv("CASSLE_DATA_ROOT"); env && *env) config.data.root = env;
  }

  train::PretrainOptions po;
  po.verbose = !a.quiet;
  if (!a.resume.empty()) po.resume_from = a.resume;
  if (a.stop_after > 0) po.stop_after_epochs = a.stop_after;
  po.run_dir = make_run_dir(config.train.output_dir, train::config_hash(config));
  const auto result = train::pretrain(config, po);
  const double final_loss = result.state.loss_history.empty() ? 0.0 : result.state.loss_history.back();
  const auto hash = train::read_checkpoint_hash(result.checkpoint_dir);
  write_snapshot(result.run_dir, "pretrain", options, normalized,
                 {{"checkpoint", result.checkpoint_dir.string()},
                  {"final_loss", final_loss},
                  {"epochs", result.state.epoch},
                  {"checkpoint_hash", hash}});
  out << "checkpoint: " << result.checkpoint_dir.string() << '\n'
      << "final_loss: " << final_loss << '\n'
      << "run_dir: " << result.run_dir.string() << '\n';
  (void)err;
  return ok;
}

struct EvalArgs {
  std::string checkpoint;
  std::string protocol = "linear";
  DataArgs data;
  std::string metric = "top1";
  uint64_t seed = 0;
  int grid_size = 45;
  int max_iter = 5000;
  eval::EpisodeSpec episodes;
  std::string out = "runs";
  std::string cache_root;
  std::string label;
};

fs::path cache_root_for(const std::string& given, const std::string& out_root) {
  if (!given.empty()) return given;
  return data::cache_root_from_env(fs::path(out_root) / "cache");
}

int cmd_eval(const EvalArgs& a, const json& options, std::ostream& out, std::ostream& err) {
  auto ck = open_checkpoint(a.checkpoint);
  const int input_size = ck.config.augment.out_size;
  const auto cache_root = cache_root_for(a.cache_root, a.out);
  const auto test = load_split(a.data, &ck.config, data::Split::test);

  json result;
  if (a.protocol == "fewshot") {
    auto spec = a.episodes;
    try {
      spec.validate();
    } catch (const std::exception& e) {
      throw UsageError(e.what());
    }
    if (spec.n_way > test.class_count) {
      throw UsageError("fewshot with n_way=" + std::to_string(spec.n_way) + " is incompatible with dataset '" +
                       test.id + "' (" + std::to_string(test.class_count) + " classes)");
    }
    eval::EmbedOptions eo;
    eo.cache_root = cache_root;
    const auto emb = eval::embed_dataset(ck.model, ck.hash, input_size, test, eo);
    if (emb.cache_hit) err << "reusing cached embeddings: " << emb.cache_file.string() << '\n';
    const auto fs_result = eval::few_shot_eval(emb.embeddings.matrix, emb.labels, spec, a.seed);
    result = json::parse(fs_result.to_json());
    result["dataset"] = test.id;
    result["metric"] = "top1";
    result["value"] = fs_result.mean;
    result["checkpoint_hash"] = ck.hash;
    result["label"] = a.label;
    out << "fewshot mean: " << fs_result.mean << " +- " << fs_result.ci95 << '\n';
  } else {
    if (a.metric != "top1" && a.metric != "mean-per-class") throw UsageError("unknown metric '" + a.metric + "'");
    const auto train_ds = load_split(a.data, &ck.config, data::Split::train);
    if (train_ds.class_count != test.class_count) throw UsageError("train and test class counts differ");
    eval::LinearEvalOptions lo;
    lo.embed.cache_root = cache_root;
    lo.probe.l2_grid = eval::log_grid(1e-6, 1e5, a.grid_size);
    lo.probe.metric = a.metric;
    lo.probe.max_iter = a.max_iter;
    lo.probe.seed = a.seed;
    // Report cache reuse before probing.
    for (const auto* ds : {&train_ds, &test}) {
      data::CacheManifest probe_key;
      probe_key.checkpoint_hash = ck.hash;
      probe_key.dataset_id = ds->id;
      probe_key.split = std::string(data::to_string(ds->split)) + (a.protocol == "rotation" ? "-rot4" : "");
      if (a.protocol == "rotation" && ds == &test) probe_key.split = "train-rot4-test";
      if (data::cache_get(cache_root, probe_key)) {
        err << "reusing cached embeddings: " << data::cache_entry_path(cache_root, probe_key, "bin").string() << '\n';
      }
    }
    const auto r = a.protocol == "rotation"
                       ? eval::rotation_probe(ck.model, ck.hash, input_size, train_ds, test, lo)
                       : eval::linear_eval(ck.model, ck.hash, input_size, train_ds, test, lo);
    auto labeled = r;
    labeled.label = a.label;
    result = json::parse(labeled.to_json());
    out << a.protocol << " " << r.metric << ": " << r.value << " (l2 " << r.chosen_l2 << ")\n";
  }
  result["protocol"] = a.protocol;

  const auto run_dir = make_run_dir(a.out, options_hash("eval", options, {}));
  data::write_text_atomic(run_dir / "result.json", result.dump(2));
  if (a.protocol != "fewshot") {
    const auto r = eval::ProbeResult::from_json(result.dump());
    data::write_text_atomic(run_dir / "results.csv", eval::aggregate_csv(std::span(&r, 1)));
  }
  write_snapshot(run_dir, "eval", options, {}, {{"value", result["value"]}});
  out << "report: " << (run_dir / "result.json").string() << '\n';
  return ok;
}

struct AnalyzeArgs {
  std::string analysis;
  std::vector<std::string> checkpoints;
  std::vector<std::string> logs;
  std::string embeddings;
  DataArgs data;
  std::string aug = "jitter";
  int pairs = 1000;
  int batch_size = 256;
  int n_batches = 1;
  double tau = 0.2;
  uint64_t seed = 0;
  double threshold = 0.9;
  int k = 4;
  std::vector<int64_t> queries{0};
  std::string out = "runs";
  std::string cache_root;
};

torch::Tensor embeddings_for(const AnalyzeArgs& a, std::ostream& err) {
  if (!a.embeddings.empty()) {
    const fs::path bin = a.embeddings;
    const auto manifest_path = fs::path(bin).replace_extension(".json");
    if (!fs::exists(manifest_path)) throw UsageError("no manifest next to '" + bin.string() + "'");
    const auto m = data::CacheManifest::from_json(data::read_text(manifest_path));
    auto values = data::read_f32_file(bin);
    if (values.size() != m.rows * m.cols) throw std::runtime_error("embedding file size does not match its manifest");
    return torch::from_blob(values.data(), {static_cast<int64_t>(m.rows), static_cast<int64_t>(m.cols)},
                            torch::kFloat32)
        .clone();
  }
  if (a.checkpoints.empty()) throw UsageError("pass --embeddings or --checkpoint");
  auto ck = open_checkpoint(a.checkpoints.front());
  const auto ds = load_split(a.data, &ck.config, data::parse_split(a.data.split));
  eval::EmbedOptions eo;
  eo.cache_root = cache_root_for(a.cache_root, a.out);
  const auto emb = eval::embed_dataset(ck.model, ck.hash, ck.config.augment.out_size, ds, eo);
  if (emb.cache_hit) err << "reusing cached embeddings: " << emb.cache_file.string() << '\n';
  return emb.embeddings.matrix;
}

std::vector<train::EpochLog> read_log_arg(const std::string& p) {
  fs::path path = p;
  if (fs::is_directory(path)) path /= "loss_log.csv";
  if (!fs::exists(path)) throw UsageError("loss log '" + path.string() + "' not found");
  return train::read_loss_log(path);
}

int cmd_analyze(const AnalyzeArgs& a, const json& options, std::ostream& out, std::ostream& err) {
  const auto run_dir_hash = options_hash("analyze", options, {});
  json report;
  std::vector<analysis::PlotSeries> plot;
  std::string plot_title;
  bool log_log = false;

  if (a.analysis == "conditioning") {
    if (a.checkpoints.size() != 1) throw UsageError("conditioning needs exactly one --checkpoint");
    auto ck = open_checkpoint(a.checkpoints.front());
    if (ck.config.conditioning.mode == cond::ConditioningMode::none) {
      throw UsageError("checkpoint was trained with conditioning mode none; the dependency test is undefined");
    }
    const auto ds = load_split(a.data, &ck.config, data::parse_split(a.data.split));
    const auto r = analysis::conditioning_dependency(ck.model, ds, ck.config.augment, a.pairs, a.seed, a.batch_size);
    report = json::parse(r.to_json());
    report["checkpoint_hash"] = ck.hash;
    out << "frac_true_gt_random: " << r.frac_true_gt_random << "\nmean_sim_true: " << r.mean_sim_true
        << "\nmean_sim_random: " << r.mean_sim_random << "\np_value: " << r.p_value << '\n';
  } else if (a.analysis == "sensitivity") {
    if (a.checkpoints.empty()) throw UsageError("sensitivity needs at least one --checkpoint");
    aug::AugKind kind;
    try {
      kind = aug::parse_aug_kind(a.aug);
    } catch (const std::exception& e) {
      throw UsageError(e.what());
    }
    report["profiles"] = json::array();
    for (const auto& path : a.checkpoints) {
      auto ck = open_checkpoint(path);
      const auto ds = load_split(a.data, &ck.config, data::parse_split(a.data.split));
      const auto p = analysis::stagewise_infonce(ck.model, ds, ck.config.augment, kind, a.batch_size, a.tau, a.seed,
                                                 a.n_batches);
      auto j = json::parse(p.to_json());
      j["checkpoint"] = path;
      j["checkpoint_hash"] = ck.hash;
      report["profiles"].push_back(j);
      analysis::PlotSeries s{fs::path(path).parent_path().filename().string(), {}, {}};
      int i = 1;
      for (const auto& [tag, v] : p.values) {
        s.x.push_back(i++);
        s.y.push_back(v);
        out << ssl::to_string(tag) << ": " << v << '\n';
      }
      plot.push_back(s);
    }
    plot_title = "InfoNCE per stage (" + a.aug + ")";
  } else if (a.analysis == "spectrum") {
    const auto emb = embeddings_for(a, err);
    const auto fit = analysis::eigenspectrum_alpha(emb);
    report = json::parse(fit.to_json());
    out << "alpha: " << fit.alpha << " (r2 " << fit.r2 << ")\n";
    analysis::PlotSeries s{"eigenvalues", {}, {}};
    for (std::size_t i = 0; i < fit.eigenvalues.size(); ++i) {
      if (fit.eigenvalues[i] <= 0) break;
      s.x.push_back(static_cast<double>(i + 1));
      s.y.push_back(fit.eigenvalues[i]);
    }
    plot.push_back(s);
    plot_title = "Eigenspectrum";
    log_log = true;
  } else if (a.analysis == "variance") {
    const auto emb = embeddings_for(a, err);
    const auto c = analysis::explained_variance(emb, a.threshold);
    report = json::parse(c.to_json());
    out << "components_for_threshold: " << c.components_for_threshold << '\n';
    analysis::PlotSeries s{"cumulative explained variance", {}, {}};
    for (std::size_t i = 0; i < c.cumulative.size(); ++i) {
      s.x.push_back(static_cast<double>(i + 1));
      s.y.push_back(c.cumulative[i]);
    }
    plot.push_back(s);
    plot_title = "Explained variance";
  } else if (a.analysis == "retrieval") {
    const auto emb = embeddings_for(a, err);
    json lists = json::array();
    for (auto q : a.queries) {
      if (q < 0 || q >= emb.size(0)) throw UsageError("query index " + std::to_string(q) + " out of range");
      const auto ranked = analysis::retrieve(emb[q], emb, std::min<int64_t>(a.k + 1, emb.size(0)));
      lists.push_back({{"query", q}, {"neighbors", ranked}});
    }
    report["retrievals"] = lists;
    out << lists.dump() << '\n';
  } else if (a.analysis == "losscurves") {
    if (a.logs.size() < 2) throw UsageError("losscurves needs two --log inputs (baseline, then conditioned)");
    const auto base = read_log_arg(a.logs[0]);
    const auto cond = read_log_arg(a.logs[1]);
    const auto r = analysis::loss_curve_difference(base, cond);
    report = json::parse(r.to_json());
    analysis::PlotSeries s{"conditioned - baseline", {}, r.difference};
    for (int e : r.epochs) s.x.push_back(e);
    plot.push_back(s);
    plot_title = "Loss difference per epoch";
    out << "final difference: " << r.difference.back() << '\n';
  } else {
    throw UsageError("unknown analysis '" + a.analysis + "'");
  }

  report["analysis"] = a.analysis;
  const auto run_dir = make_run_dir(a.out, run_dir_hash);
  data::write_text_atomic(run_dir / "report.json", report.dump(2));
  if (!plot.empty()) analysis::write_svg_plot(run_dir / "plot.svg", plot_title, plot, log_log);
  json scalars = json::object();
  for (const auto& [k, v] : report.items()) {
    if (v.is_number()) scalars[k] = v;
  }
  write_snapshot(run_dir, "analyze", options, {}, scalars);
  out << "report: " << (run_dir / "report.json").string() << '\n';
  return ok;
}

struct RetrieveArgs {
  std::string checkpoint;
  DataArgs data;
  std::vector<int64_t> queries{0};
  int k = 4;
  std::string out = "runs";
  std::string cache_root;
};

int cmd_retrieve(const RetrieveArgs& r, const json& options, std::ostream& out, std::ostream& err) {
  AnalyzeArgs a;
  a.analysis = "retrieval";
  a.checkpoints = {r.checkpoint};
  a.data = r.data;
  a.queries = r.queries;
  a.k = r.k;
  a.out = r.out;
  a.cache_root = r.cache_root;
  const auto emb = embeddings_for(a, err);
  json lists = json::array();
  for (auto q : r.queries) {
    if (q < 0 || q >= emb.size(0)) throw UsageError("query index " + std::to_string(q) + " out of range");
    // The query itself ranks first; k neighbors follow.
    const auto ranked = analysis::retrieve(emb[q], emb, std::min<int64_t>(r.k + 1, emb.size(0)));
    lists.push_back({{"query", q}, {"ranked", ranked}});
  }
  const auto run_dir = make_run_dir(r.out, options_hash("retrieve", options, {}));
  data::write_text_atomic(run_dir / "retrieval.json", json{{"retrievals", lists}}.dump(2));
  write_snapshot(run_dir, "retrieve", options, {}, {{"retrievals", lists}});
  out << lists.dump() << "\nreport: " << (run_dir / "retrieval.json").string() << '\n';
  return ok;
}

struct ReportArgs {
  std::vector<std::string> results;
  std::string out = "runs";
};

int cmd_report(const ReportArgs& a, const json& options, std::ostream& out) {
  std::vector<fs::path> files;
  for (const auto& root : a.results) {
    if (fs::is_regular_file(root)) {
      files.push_back(root);
      continue;
    }
    if (!fs::is_directory(root)) throw UsageError("'" + root + "' does not exist");
    for (const auto& entry : fs::recursive_directory_iterator(root)) {
      if (entry.is_regular_file() && entry.path().filename() == "result.json") files.push_back(entry.path());
    }
  }
  std::sort(files.begin(), files.end());
  std::vector<eval::ProbeResult> results;
  for (const auto& f : files) results.push_back(eval::ProbeResult::from_json(data::read_text(f)));
  if (results.empty()) throw UsageError("no result.json files found");
  const auto csv = eval::aggregate_csv(results);
  const auto run_dir = make_run_dir(a.out, options_hash("report", options, {}));
  data::write_text_atomic(run_dir / "table.csv", csv);
  write_snapshot(run_dir, "report", options, {}, {{"table", csv}});
  out << csv << "report: " << (run_dir / "table.csv").string() << '\n';
  return ok;
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  // Replay: cassle --snapshot <run>/snapshot.json
  if (args.size() == 2 && args[0] == "--snapshot") {
    try {
      const auto snap = json::parse(data::read_text(args[1]));
      return run(replay_args(snap), out, err);
    } catch (const std::exception& e) {
      return fail_usage(err, std::string("cannot replay snapshot: ") + e.what());
    }
  }

  CLI::App app{"Conditioned-projector self-supervised pretraining and evaluation", "cassle"};
  app.require_subcommand(1);
  app.set_version_flag("--version", "cassle 0.1.0");

  PretrainArgs pa;
  auto* pretrain = app.add_subcommand("pretrain", "Pretrain from a config file");
  pretrain->add_option("--config", pa.config, "Config file")->required()->check(CLI::ExistingFile)->transform(kAbsolutePath);
  pretrain->add_option("--out", pa.out, "Output root (overrides train.output_dir)")->transform(kAbsolutePath);
  pretrain->add_option("--resume", pa.resume, "Checkpoint directory to resume from")->transform(kAbsolutePath);
  pretrain->add_option("--stop-after", pa.stop_after, "Stop after N more epochs");
  pretrain->add_flag("--quiet", pa.quiet, "No per-epoch progress");
  pretrain->allow_extras();
  pretrain->footer("Any config key can be overridden as --section.key=value.");

  EvalArgs ea;
  auto* evalc = app.add_subcommand("eval", "Evaluate a checkpoint");
  evalc->add_option("--checkpoint", ea.checkpoint, "Checkpoint directory")->required()->transform(kAbsolutePath);
  evalc->add_option("--protocol", ea.protocol, "linear, fewshot or rotation")
      ->check(CLI::IsMember({"linear", "fewshot", "rotation"}));
  add_data_options(evalc, ea.data);
  evalc->add_option("--metric", ea.metric, "top1 or mean-per-class");
  evalc->add_option("--seed", ea.seed);
  evalc->add_option("--grid-size", ea.grid_size, "Number of l2 values in [1e-6, 1e5]")->check(CLI::PositiveNumber);
  evalc->add_option("--max-iter", ea.max_iter, "L-BFGS iteration cap")->check(CLI::PositiveNumber);
  evalc->add_option("--n-way", ea.episodes.n_way);
  evalc->add_option("--k-shot", ea.episodes.k_shot);
  evalc->add_option("--query", ea.episodes.query_per_class, "Query images per class");
  evalc->add_option("--episodes", ea.episodes.n_episodes);
  evalc->add_flag("--query-is-support", ea.episodes.query_is_support);
  evalc->add_option("--out", ea.out, "Output root")->transform(kAbsolutePath);
  evalc->add_option("--cache-root", ea.cache_root, "Embedding cache root (default: $CASSLE_CACHE_ROOT)")
      ->transform(kAbsolutePath);
  evalc->add_option("--label", ea.label, "Row label in aggregate tables");

  AnalyzeArgs aa;
  auto* analyze = app.add_subcommand("analyze", "Representation analyses");
  analyze->add_option("--analysis", aa.analysis)
      ->required()
      ->check(CLI::IsMember({"conditioning", "sensitivity", "spectrum", "variance", "retrieval", "losscurves"}));
  analyze->add_option("--checkpoint", aa.checkpoints, "Checkpoint directory (repeatable)")->transform(kAbsolutePath);
  analyze->add_option("--log", aa.logs, "Loss log CSV or run directory (baseline first)")->transform(kAbsolutePath);
  analyze->add_option("--embeddings", aa.embeddings, "Cached embedding .bin file")->transform(kAbsolutePath);
  add_data_options(analyze, aa.data);
  analyze->add_option("--split", aa.data.split, "train or test");
  analyze->add_option("--aug", aa.aug, "identity, crop, jitter, blur, flip, grayscale or all");
  analyze->add_option("--pairs", aa.pairs);
  analyze->add_option("--batch-size", aa.batch_size);
  analyze->add_option("--n-batches", aa.n_batches);
  analyze->add_option("--tau", aa.tau);
  analyze->add_option("--seed", aa.seed);
  analyze->add_option("--threshold", aa.threshold);
  analyze->add_option("-k", aa.k);
  analyze->add_option("--query-index", aa.queries);
  analyze->add_option("--out", aa.out)->transform(kAbsolutePath);
  analyze->add_option("--cache-root", aa.cache_root)->transform(kAbsolutePath);

  RetrieveArgs ra;
  auto* retrieve = app.add_subcommand("retrieve", "Nearest neighbors by cosine similarity");
  retrieve->add_option("--checkpoint", ra.checkpoint)->required()->transform(kAbsolutePath);
  add_data_options(retrieve, ra.data);
  retrieve->add_option("--split", ra.data.split, "train or test");
  retrieve->add_option("--query-index", ra.queries);
  retrieve->add_option("-k", ra.k)->check(CLI::PositiveNumber);
  retrieve->add_option("--out", ra.out)->transform(kAbsolutePath);
  retrieve->add_option("--cache-root", ra.cache_root)->transform(kAbsolutePath);

  ReportArgs rpa;
  auto* report = app.add_subcommand("report", "Aggregate eval results into a table");
  report->add_option("--results", rpa.results, "Result files or directories")->required()->transform(kAbsolutePath);
  report->add_option("--out", rpa.out)->transform(kAbsolutePath);

  fs::path synth_out;
  std::size_t synth_train = 10000, synth_test = 2000;
  uint64_t synth_seed = 0;
  int synth_size = 32;
  auto* synth = app.add_subcommand("synth", "Write the procedural colored-shapes dataset (CIFAR-10 layout)");
  synth->add_option("--out", synth_out, "Target directory")->required();
  synth->add_option("--train", synth_train, "Training images");
  synth->add_option("--test", synth_test, "Test images");
  synth->add_option("--seed", synth_seed);
  synth->add_option("--size", synth_size, "Image side")->check(CLI::Range(8, 256));

  std::vector<std::string> argv_store{"cassle"};
  argv_store.insert(argv_store.end(), args.begin(), args.end());
  std::vector<char*> argv;
  for (auto& s : argv_store) argv.push_back(s.data());

  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return ok;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return ok;
  } catch (const CLI::CallForVersion& e) {
    out << e.what() << '\n';
    return ok;
  } catch (const CLI::ParseError& e) {
    return fail_usage(err, e.what());
  }

  try {
    if (pretrain->parsed()) return cmd_pretrain(pa, recorded_options(pretrain), pretrain->remaining(), out, err);
    if (evalc->parsed()) return cmd_eval(ea, recorded_options(evalc), out, err);
    if (analyze->parsed()) return cmd_analyze(aa, recorded_options(analyze), out, err);
    if (retrieve->parsed()) return cmd_retrieve(ra, recorded_options(retrieve), out, err);
    if (report->parsed()) return cmd_report(rpa, recorded_options(report), out);
    if (synth->parsed()) {
      data::generate_synthetic(synth_out, synth_train, synth_test, synth_seed, synth_size);
      out << "dataset: " << fs::absolute(synth_out).string() << '\n';
      return ok;
    }
  } catch (const train::ConfigError& e) {
    return fail_usage(err, std::string("invalid config: ") + e.what());
  } catch (const UsageError& e) {
    return fail_usage(err, e.what());
  } catch (const train::TrainingAborted& e) {
    err << "error: " << e.what() << "\nsnapshot: " << e.snapshot_dir().string() << '\n';
    return runtime_failure;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return runtime_failure;
  }
  return usage_error;
}

}  // namespace cassle::cli
