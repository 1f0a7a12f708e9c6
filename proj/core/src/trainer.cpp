#include "cassle/trainer.hpp"

#include <algorithm>
#include <charconv>
#include <chrono>
#include <cmath>
#include <condition_variable>
#include <deque>
#include <fstream>
#include <iostream>
#include <mutex>
#include <numeric>
#include <numbers>
#include <sstream>
#include <thread>
#include <unistd.h>

#include "CLI11.hpp"
#include "cassle/random.hpp"
#include "json.hpp"

namespace cassle::train {

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

constexpr int kCheckpointFormatVersion = 1;

std::string fmt_double(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

template <class T>
std::string join_values(const T& values) {
  std::string out;
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (i) out += ',';
    if constexpr (std::is_floating_point_v<typename T::value_type>) {
      out += fmt_double(values[i]);
    } else {
      out += std::to_string(values[i]);
    }
  }
  return out;
}

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return std::string(s.substr(b, e - b + 1));
}

std::vector<std::string> split_list(const std::string& key, const std::string& value) {
  std::vector<std::string> parts;
  std::string cur;
  for (char c : value) {
    if (c == ',') {
      parts.push_back(trim(cur));
      cur.clear();
    } else {
      cur += c;
    }
  }
  parts.push_back(trim(cur));
  for (const auto& p : parts) {
    if (p.empty()) throw ConfigError(key, "empty list element in '" + value + "'");
  }
  return parts;
}

double to_double(const std::string& key, const std::string& value) {
  double out = 0;
  const auto v = trim(value);
  auto res = std::from_chars(v.data(), v.data() + v.size(), out);
  if (res.ec != std::errc() || res.ptr != v.data() + v.size()) {
    throw ConfigError(key, "expected a number, got '" + value + "'");
  }
  return out;
}

int64_t to_int(const std::string& key, const std::string& value) {
  int64_t out = 0;
  const auto v = trim(value);
  auto res = std::from_chars(v.data(), v.data() + v.size(), out);
  if (res.ec != std::errc() || res.ptr != v.data() + v.size()) {
    throw ConfigError(key, "expected an integer, got '" + value + "'");
  }
  return out;
}

aug::Range to_range(const std::string& key, const std::string& value) {
  const auto parts = split_list(key, value);
  if (parts.size() != 2) throw ConfigError(key, "expected 'lo,hi', got '" + value + "'");
  return {to_double(key, parts[0]), to_double(key, parts[1])};
}

template <std::size_t N, class T>
std::array<T, N> to_array(const std::string& key, const std::string& value) {
  const auto parts = split_list(key, value);
  if (parts.size() != N) {
    throw ConfigError(key, "expected " + std::to_string(N) + " comma-separated values, got '" + value + "'");
  }
  std::array<T, N> out{};
  for (std::size_t i = 0; i < N; ++i) {
    if constexpr (std::is_floating_point_v<T>) {
      out[i] = to_double(key, parts[i]);
    } else {
      out[i] = static_cast<T>(to_int(key, parts[i]));
    }
  }
  return out;
}

// Wraps enum parsers so their errors carry the key.
template <class F>
auto parse_enum(const std::string& key, F&& f) {
  try {
    return f();
  } catch (const ConfigError&) {
    throw;
  } catch (const std::exception& e) {
    throw ConfigError(key, e.what());
  }
}

void apply_key(RunConfig& c, const std::string& key, const std::string& value) {
  // [data]
  if (key == "data.dataset") {
    parse_enum(key, [&] { return data::parse_format(value); });
    c.data.dataset = value;
  } else if (key == "data.root") {
    c.data.root = value;
  } else if (key == "data.limit") {
    const auto v = to_int(key, value);
    if (v < 0) throw ConfigError(key, "must be >= 0");
    c.data.limit = static_cast<std::size_t>(v);
  }
  // [method]
  else if (key == "method.method") {
    // handled before the other keys
  } else if (key == "method.temperature") {
    c.method.temperature = to_double(key, value);
  } else if (key == "method.queue_size") {
    c.method.queue_size = static_cast<int>(to_int(key, value));
  } else if (key == "method.momentum") {
    c.method.momentum = to_double(key, value);
  } else if (key == "method.bt_lambda") {
    c.method.bt_lambda = to_double(key, value);
  } else if (key == "method.predictor_hidden") {
    c.method.predictor_hidden = static_cast<int>(to_int(key, value));
  } else if (key == "method.backbone") {
    c.backbone.family = parse_enum(key, [&] { return ssl::parse_backbone_family(value); });
  } else if (key == "method.widths") {
    c.backbone.widths = to_array<4, int>(key, value);
  }
  // [conditioning]
  else if (key == "conditioning.mode") {
    c.conditioning.mode = parse_enum(key, [&] { return cond::parse_mode(value); });
  } else if (key == "conditioning.gamma_depth") {
    c.conditioning.gamma_depth = static_cast<int>(to_int(key, value));
  } else if (key == "conditioning.gamma_hidden") {
    c.conditioning.gamma_hidden = static_cast<int>(to_int(key, value));
  } else if (key == "conditioning.gamma_out") {
    c.conditioning.gamma_out = static_cast<int>(to_int(key, value));
  } else if (key == "conditioning.projector_depth") {
    c.conditioning.projector_depth = static_cast<int>(to_int(key, value));
  } else if (key == "conditioning.projector_hidden") {
    c.conditioning.projector_hidden = static_cast<int>(to_int(key, value));
  } else if (key == "conditioning.projector_out") {
    c.conditioning.projector_out = static_cast<int>(to_int(key, value));
  }
  // [augment]
  else if (key == "augment.crop_scale") {
    c.augment.crop_scale = to_range(key, value);
  } else if (key == "augment.crop_ratio") {
    c.augment.crop_ratio = to_range(key, value);
  } else if (key == "augment.jitter_prob") {
    c.augment.jitter_prob = to_double(key, value);
  } else if (key == "augment.jitter_max") {
    c.augment.jitter_max = to_array<4, double>(key, value);
  } else if (key == "augment.blur_prob") {
    c.augment.blur_prob = to_double(key, value);
  } else if (key == "augment.blur_sigma") {
    c.augment.blur_sigma = to_range(key, value);
  } else if (key == "augment.flip_prob") {
    c.augment.flip_prob = to_double(key, value);
  } else if (key == "augment.grayscale_prob") {
    c.augment.grayscale_prob = to_double(key, value);
  } else if (key == "augment.out_size") {
    c.augment.out_size = static_cast<int>(to_int(key, value));
  }
  // [train]
  else if (key == "train.epochs") {
    c.train.epochs = static_cast<int>(to_int(key, value));
  } else if (key == "train.batch_size") {
    c.train.batch_size = static_cast<int>(to_int(key, value));
  } else if (key == "train.base_lr") {
    c.train.base_lr = to_double(key, value);
  } else if (key == "train.weight_decay") {
    c.train.weight_decay = to_double(key, value);
  } else if (key == "train.sgd_momentum") {
    c.train.sgd_momentum = to_double(key, value);
  } else if (key == "train.warmup_epochs") {
    c.train.warmup_epochs = static_cast<int>(to_int(key, value));
  } else if (key == "train.checkpoint_every") {
    c.train.checkpoint_every = static_cast<int>(to_int(key, value));
  } else if (key == "train.seed") {
    const auto v = to_int(key, value);
    if (v < 0) throw ConfigError(key, "must be >= 0");
    c.train.seed = static_cast<uint64_t>(v);
  } else if (key == "train.workers") {
    c.train.workers = static_cast<int>(to_int(key, value));
  } else if (key == "train.output_dir") {
    c.train.output_dir = value;
  } else {
    throw ConfigError(key, "unknown configuration key");
  }
}

std::vector<std::pair<std::string, std::string>> read_items(std::string_view text) {
  CLI::ConfigINI ini;
  std::istringstream in{std::string(text)};
  std::vector<CLI::ConfigItem> items;
  try {
    items = ini.from_config(in);
  } catch (const std::exception& e) {
    throw ConfigError("", std::string("malformed configuration: ") + e.what());
  }
  std::vector<std::pair<std::string, std::string>> out;
  for (const auto& item : items) {
    if (item.name == "++" || item.name == "--") continue;
    if (item.parents.empty()) throw ConfigError(item.name, "key outside of a section");
    std::string value;
    for (std::size_t i = 0; i < item.inputs.size(); ++i) {
      if (i) value += ',';
      value += item.inputs[i];
    }
    out.emplace_back(item.fullname(), value);
  }
  return out;
}


json state_to_json(const TrainState& s) {
  return {{"step", s.step},   {"epoch", s.epoch},         {"lr", s.lr},
          {"loss_history", s.loss_history}, {"rng_seed", s.rng_seed}, {"rng_epoch", s.rng_epoch}};
}

TrainState state_from_json(const json& j) {
  TrainState s;
  s.step = j.at("step").get<int64_t>();
  s.epoch = j.at("epoch").get<int>();
  s.lr = j.at("lr").get<double>();
  s.loss_history = j.at("loss_history").get<std::vector<double>>();
  s.rng_seed = j.at("rng_seed").get<uint64_t>();
  s.rng_epoch = j.at("rng_epoch").get<int>();
  return s;
}

json epoch_logs_to_json(const std::vector<EpochLog>& logs) {
  json arr = json::array();
  for (const auto& l : logs) arr.push_back({l.epoch, l.mean_loss, l.lr, l.wall_seconds});
  return arr;
}

std::vector<EpochLog> epoch_logs_from_json(const json& arr) {
  std::vector<EpochLog> out;
  for (const auto& r : arr) {
    out.push_back({r.at(0).get<int>(), r.at(1).get<double>(), r.at(2).get<double>(), r.at(3).get<double>()});
  }
  return out;
}

void write_loss_log(const fs::path& path, const std::vector<EpochLog>& logs) {
  std::ostringstream os;
  os << "epoch,mean_loss,lr,wall_seconds\n";
  for (const auto& l : logs) {
    os << l.epoch << ',' << fmt_double(l.mean_loss) << ',' << fmt_double(l.lr) << ','
       << fmt_double(l.wall_seconds) << '\n';
  }
  data::write_text_atomic(path, os.str());
}

void save_module(torch::nn::Module& module, const fs::path& path) {
  torch::serialize::OutputArchive ar;
  module.save(ar);
  ar.save_to(path.string());
}

// Bounded producer/consumer queue of prepared batches.
class BatchQueue {
 public:
  explicit BatchQueue(std::size_t capacity) : capacity_(capacity) {}

  void push(ssl::ViewBatch b) {
    std::unique_lock lock(mu_);
    not_full_.wait(lock, [&] { return items_.size() < capacity_ || closed_; });
    if (closed_) return;
    items_.push_back(std::move(b));
    not_empty_.notify_one();
  }

  ssl::ViewBatch pop() {
    std::unique_lock lock(mu_);
    not_empty_.wait(lock, [&] { return !items_.empty() || error_; });
    if (error_) std::rethrow_exception(error_);
    auto b = std::move(items_.front());
    items_.pop_front();
    not_full_.notify_one();
    return b;
  }

  void fail(std::exception_ptr e) {
    std::lock_guard lock(mu_);
    error_ = e;
    not_empty_.notify_all();
  }

  void close() {
    std::lock_guard lock(mu_);
    closed_ = true;
    not_full_.notify_all();
  }

  bool closed() {
    std::lock_guard lock(mu_);
    return closed_;
  }

 private:
  std::size_t capacity_;
  std::mutex mu_;
  std::condition_variable not_full_, not_empty_;
  std::deque<ssl::ViewBatch> items_;
  std::exception_ptr error_;
  bool closed_ = false;
};

}  // namespace

// --- Config ------------------------------------------------------------------

void RunConfig::validate() const {
  if (train.epochs <= 0) throw ConfigError("train.epochs", "must be positive");
  if (train.batch_size < 2) throw ConfigError("train.batch_size", "must be at least 2");
  if (!(train.base_lr > 0)) throw ConfigError("train.base_lr", "must be positive");
  if (train.weight_decay < 0) throw ConfigError("train.weight_decay", "must be >= 0");
  if (train.sgd_momentum < 0 || train.sgd_momentum >= 1) {
    throw ConfigError("train.sgd_momentum", "must be in [0, 1)");
  }
  if (train.warmup_epochs < 0 || train.warmup_epochs >= train.epochs) {
    throw ConfigError("train.warmup_epochs", "must be in [0, epochs)");
  }
  if (train.checkpoint_every < 0) throw ConfigError("train.checkpoint_every", "must be >= 0");
  if (train.workers < 0) throw ConfigError("train.workers", "must be >= 0");
  try {
    data::parse_format(data.dataset);
  } catch (const std::exception& e) {
    throw ConfigError("data.dataset", e.what());
  }
  try {
    augment.validate();
  } catch (const std::exception& e) {
    throw ConfigError("augment", e.what());
  }
  try {
    backbone.validate();
  } catch (const std::exception& e) {
    throw ConfigError("method.widths", e.what());
  }
  try {
    method.validate(train.batch_size);
  } catch (const std::exception& e) {
    throw ConfigError("method", e.what());
  }
  try {
    conditioning.validate(backbone.embedding_width());
  } catch (const std::exception& e) {
    throw ConfigError("conditioning", e.what());
  }
}

RunConfig parse_run_config(std::string_view text, const std::map<std::string, std::string>& overrides) {
  auto items = read_items(text);
  for (const auto& [k, v] : overrides) items.emplace_back(k, v);

  // The method picks the defaults the remaining [method] keys refine.
  RunConfig c;
  for (const auto& [k, v] : items) {
    if (k == "method.method") {
      c.method = ssl::MethodConfig::defaults(parse_enum(k, [&] { return ssl::parse_method(v); }));
    }
  }
  for (const auto& [k, v] : items) apply_key(c, k, v);
  c.validate();
  return c;
}

RunConfig load_run_config(const fs::path& path, const std::map<std::string, std::string>& overrides) {
  if (!fs::exists(path)) throw ConfigError("", "config file '" + path.string() + "' does not exist");
  return parse_run_config(data::read_text(path), overrides);
}

std::string to_config_text(const RunConfig& c) {
  std::ostringstream os;
  os << "[data]\n"
     << "dataset = " << c.data.dataset << '\n'
     << "root = " << c.data.root.string() << '\n'
     << "limit = " << c.data.limit << "\n\n";
  os << "[method]\n"
     << "method = " << ssl::to_string(c.method.method) << '\n'
     << "temperature = " << fmt_double(c.method.temperature) << '\n'
     << "queue_size = " << c.method.queue_size << '\n'
     << "momentum = " << fmt_double(c.method.momentum) << '\n'
     << "bt_lambda = " << fmt_double(c.method.bt_lambda) << '\n'
     << "predictor_hidden = " << c.method.predictor_hidden << '\n'
     << "backbone = " << ssl::to_string(c.backbone.family) << '\n'
     << "widths = " << join_values(c.backbone.widths) << "\n\n";
  os << "[conditioning]\n"
     << "mode = " << cond::to_string(c.conditioning.mode) << '\n'
     << "gamma_depth = " << c.conditioning.gamma_depth << '\n'
     << "gamma_hidden = " << c.conditioning.gamma_hidden << '\n'
     << "gamma_out = " << c.conditioning.gamma_out << '\n'
     << "projector_depth = " << c.conditioning.projector_depth << '\n'
     << "projector_hidden = " << c.conditioning.projector_hidden << '\n'
     << "projector_out = " << c.conditioning.projector_out << "\n\n";
  const auto& a = c.augment;
  os << "[augment]\n"
     << "crop_scale = " << fmt_double(a.crop_scale.lo) << ',' << fmt_double(a.crop_scale.hi) << '\n'
     << "crop_ratio = " << fmt_double(a.crop_ratio.lo) << ',' << fmt_double(a.crop_ratio.hi) << '\n'
     << "jitter_prob = " << fmt_double(a.jitter_prob) << '\n'
     << "jitter_max = " << join_values(a.jitter_max) << '\n'
     << "blur_prob = " << fmt_double(a.blur_prob) << '\n'
     << "blur_sigma = " << fmt_double(a.blur_sigma.lo) << ',' << fmt_double(a.blur_sigma.hi) << '\n'
     << "flip_prob = " << fmt_double(a.flip_prob) << '\n'
     << "grayscale_prob = " << fmt_double(a.grayscale_prob) << '\n'
     << "out_size = " << a.out_size << "\n\n";
  const auto& t = c.train;
  os << "[train]\n"
     << "epochs = " << t.epochs << '\n'
     << "batch_size = " << t.batch_size << '\n'
     << "base_lr = " << fmt_double(t.base_lr) << '\n'
     << "weight_decay = " << fmt_double(t.weight_decay) << '\n'
     << "sgd_momentum = " << fmt_double(t.sgd_momentum) << '\n'
     << "warmup_epochs = " << t.warmup_epochs << '\n'
     << "checkpoint_every = " << t.checkpoint_every << '\n'
     << "seed = " << t.seed << '\n'
     << "workers = " << t.workers << '\n'
     << "output_dir = " << t.output_dir.string() << '\n';
  return os.str();
}

std::string config_hash(const RunConfig& config) { return data::sha256_hex(to_config_text(config)); }

double cosine_lr(double base, int64_t step, int64_t total_steps, int64_t warmup_steps) {
  if (total_steps <= 0) throw std::invalid_argument("cosine_lr: total_steps must be positive");
  if (warmup_steps < 0 || warmup_steps >= total_steps) {
    throw std::invalid_argument("cosine_lr: warmup_steps must be in [0, total_steps)");
  }
  if (step < 0) throw std::invalid_argument("cosine_lr: negative step");
  step = std::min(step, total_steps);
  if (step < warmup_steps) return base * static_cast<double>(step) / static_cast<double>(warmup_steps);
  const double progress =
      static_cast<double>(step - warmup_steps) / static_cast<double>(total_steps - warmup_steps);
  return 0.5 * base * (1.0 + std::cos(std::numbers::pi * progress));
}

// --- Checkpoints -------------------------------------------------------------

std::string model_hash(ssl::SslModel& model) {
  data::Sha256 h;
  auto feed = [&](const std::string& name, const torch::Tensor& t) {
    const auto c = t.detach().contiguous().cpu();
    h.update(name);
    for (auto s : c.sizes()) h.update(&s, sizeof(s));
    h.update(c.data_ptr(), c.numel() * c.element_size());
  };
  for (const auto& p : model->named_parameters(true)) feed(p.key(), p.value());
  for (const auto& b : model->named_buffers(true)) feed(b.key(), b.value());
  return h.hex();
}

namespace {

void save_checkpoint_impl(const fs::path& dir, const RunConfig& config, const TrainState& state,
                          ssl::SslModel& model, torch::optim::Optimizer* optimizer,
                          const ssl::KeyQueue* queue, const std::vector<EpochLog>& logs,
                          const json& extra) {
  const fs::path tmp = dir.parent_path() / (dir.filename().string() + ".tmp-" + std::to_string(::getpid()));
  fs::remove_all(tmp);
  fs::create_directories(tmp);
  save_module(*model, tmp / "model.pt");
  if (optimizer) {
    torch::serialize::OutputArchive ar;
    optimizer->save(ar);
    ar.save_to((tmp / "optimizer.pt").string());
  }
  if (queue && queue->size() > 0) {
    torch::serialize::OutputArchive ar;
    ar.write("buffer", queue->buffer());
    ar.write("head", torch::tensor(queue->head(), torch::kInt64));
    ar.save_to((tmp / "queue.pt").string());
  }
  const auto text = to_config_text(config);
  data::write_text_atomic(tmp / "config.ini", text);
  const auto resolved = config.conditioning.resolved(config.backbone.embedding_width());
  json manifest = {
      {"format", "cassle-checkpoint"},
      {"format_version", kCheckpointFormatVersion},
      {"method", ssl::to_string(config.method.method)},
      {"step", state.step},
      {"epoch", state.epoch},
      {"seeds", {{"train", config.train.seed}, {"rng_seed", state.rng_seed}, {"rng_epoch", state.rng_epoch}}},
      {"conditioning",
       {{"mode", cond::to_string(resolved.mode)},
        {"gamma_depth", resolved.gamma_depth},
        {"gamma_hidden", resolved.gamma_hidden},
        {"gamma_out", resolved.gamma_out},
        {"projector_depth", resolved.projector_depth},
        {"projector_hidden", resolved.projector_hidden},
        {"projector_out", resolved.projector_out}}},
      {"omega_layout_version", aug::kOmegaLayoutVersion},
      {"hash", model_hash(model)},
      {"config_hash", config_hash(config)},
      {"has_optimizer", optimizer != nullptr},
      {"has_queue", queue != nullptr && queue->size() > 0},
      {"state", state_to_json(state)},
      {"epoch_logs", epoch_logs_to_json(logs)},
      {"created_at", data::utc_timestamp()},
  };
  if (!extra.is_null()) manifest["diagnostics"] = extra;
  data::write_text_atomic(tmp / "manifest.json", manifest.dump(2));

  fs::path old;
  if (fs::exists(dir)) {
    old = dir.parent_path() / (dir.filename().string() + ".old-" + std::to_string(::getpid()));
    fs::remove_all(old);
    fs::rename(dir, old);
  }
  fs::rename(tmp, dir);
  if (!old.empty()) fs::remove_all(old);
}

json read_manifest(const fs::path& dir) {
  const auto path = dir / "manifest.json";
  if (!fs::exists(path)) throw std::runtime_error("checkpoint '" + dir.string() + "' has no manifest.json");
  json j;
  try {
    j = json::parse(data::read_text(path));
  } catch (const std::exception& e) {
    throw std::runtime_error("corrupt checkpoint manifest '" + path.string() + "': " + e.what());
  }
  if (j.value("format", "") != "cassle-checkpoint") {
    throw std::runtime_error("'" + path.string() + "' is not a checkpoint manifest");
  }
  if (j.value("format_version", 0) != kCheckpointFormatVersion) {
    throw std::runtime_error("unsupported checkpoint format version in '" + path.string() + "'");
  }
  if (j.value("omega_layout_version", 0) != aug::kOmegaLayoutVersion) {
    throw std::runtime_error("checkpoint '" + dir.string() + "' uses omega layout version " +
                             std::to_string(j.value("omega_layout_version", 0)) + ", expected " +
                             std::to_string(aug::kOmegaLayoutVersion));
  }
  return j;
}

}  // namespace

void save_checkpoint(const fs::path& dir, const RunConfig& config, const TrainState& state,
                     ssl::SslModel& model, torch::optim::Optimizer* optimizer, const ssl::KeyQueue* queue) {
  save_checkpoint_impl(dir, config, state, model, optimizer, queue, {}, nullptr);
}

std::string read_checkpoint_hash(const fs::path& dir) { return read_manifest(dir).at("hash").get<std::string>(); }

Checkpoint load_checkpoint(const fs::path& dir) {
  const auto manifest = read_manifest(dir);
  Checkpoint ck;
  ck.dir = dir;
  ck.config = parse_run_config(data::read_text(dir / "config.ini"));
  ck.state = state_from_json(manifest.at("state"));
  ck.model = ssl::SslModel(ck.config.model_spec());
  {
    torch::serialize::InputArchive ar;
    ar.load_from((dir / "model.pt").string());
    ck.model->load(ar);
  }
  if (manifest.value("has_queue", false)) {
    torch::serialize::InputArchive ar;
    ar.load_from((dir / "queue.pt").string());
    torch::Tensor buffer, head;
    ar.read("buffer", buffer);
    ar.read("head", head);
    ssl::KeyQueue q;
    q.restore(buffer, head.item<int64_t>());
    ck.queue = std::move(q);
  }
  ck.hash = model_hash(ck.model);
  const auto stored = manifest.at("hash").get<std::string>();
  if (ck.hash != stored) {
    throw std::runtime_error("checkpoint '" + dir.string() + "' hash mismatch: manifest " + stored +
                             ", weights " + ck.hash);
  }
  return ck;
}

std::vector<EpochLog> read_loss_log(const fs::path& csv) {
  std::istringstream in(data::read_text(csv));
  std::string line;
  std::getline(in, line);
  if (trim(line) != "epoch,mean_loss,lr,wall_seconds") {
    throw std::runtime_error("'" + csv.string() + "' is not a loss log");
  }
  std::vector<EpochLog> out;
  while (std::getline(in, line)) {
    if (trim(line).empty()) continue;
    const auto parts = split_list("loss_log", line);
    if (parts.size() != 4) throw std::runtime_error("malformed loss log row '" + line + "'");
    out.push_back({static_cast<int>(to_int("epoch", parts[0])), to_double("mean_loss", parts[1]),
                   to_double("lr", parts[2]), to_double("wall_seconds", parts[3])});
  }
  return out;
}

// --- Pretraining -------------------------------------------------------------

data::Dataset load_training_data(const RunConfig& config) {
  auto ref = data::make_ref(config.data.dataset, config.data.root, data::Split::train, config.data.limit);
  return data::load_dataset(ref);
}

std::vector<std::size_t> epoch_order(std::size_t n, uint64_t seed, int epoch) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  RandomStream rng(derive_seed(seed, 0x5eed0000ULL + static_cast<uint64_t>(epoch), 0));
  for (std::size_t i = n; i > 1; --i) {
    const auto j = static_cast<std::size_t>(rng.uniform_int(0, static_cast<int64_t>(i - 1)));
    std::swap(order[i - 1], order[j]);
  }
  return order;
}

ssl::ViewBatch make_batch(const data::Dataset& dataset, std::span<const std::size_t> indices,
                          const aug::AugmentationPolicy& policy, uint64_t seed, int epoch) {
  std::vector<aug::Image> v1, v2;
  std::vector<aug::OmegaVector> o1, o2;
  v1.reserve(indices.size());
  v2.reserve(indices.size());
  for (auto idx : indices) {
    RandomStream rng(derive_seed(seed, static_cast<uint64_t>(epoch), idx));
    auto pair = aug::make_view_pair(dataset.images.at(idx), policy, rng);
    o1.push_back(aug::encode_omega(pair.record1, policy));
    o2.push_back(aug::encode_omega(pair.record2, policy));
    v1.push_back(std::move(pair.view1));
    v2.push_back(std::move(pair.view2));
  }
  return {ssl::images_to_tensor(v1), ssl::images_to_tensor(v2), cond::omega_tensor(o1),
          cond::omega_tensor(o2)};
}

ssl::SslModel make_model(const RunConfig& config) {
  torch::manual_seed(config.train.seed);
  return ssl::SslModel(config.model_spec());
}

PretrainResult pretrain(const RunConfig& config, const PretrainOptions& options) {
  return pretrain(config, load_training_data(config), options);
}

PretrainResult pretrain(const RunConfig& config, const data::Dataset& dataset, const PretrainOptions& options) {
  config.validate();
  const auto& tc = config.train;
  const auto n = dataset.size();
  const auto steps_per_epoch = static_cast<int64_t>(n / static_cast<std::size_t>(tc.batch_size));
  if (steps_per_epoch == 0) {
    throw ConfigError("train.batch_size", "dataset has " + std::to_string(n) + " items, fewer than one batch of " +
                                              std::to_string(tc.batch_size));
  }
  const int64_t total_steps = steps_per_epoch * tc.epochs;
  const int64_t warmup_steps = steps_per_epoch * tc.warmup_epochs;

  PretrainResult result;
  result.run_dir = options.run_dir ? *options.run_dir
                                   : tc.output_dir / (data::utc_timestamp() + "-" + config_hash(config).substr(0, 12));
  fs::create_directories(result.run_dir);
  result.loss_log = result.run_dir / "loss_log.csv";
  result.checkpoint_dir = result.run_dir / "checkpoint";
  data::write_text_atomic(result.run_dir / "config.ini", to_config_text(config));

  ssl::SslModel model{nullptr};
  TrainState state;
  state.rng_seed = tc.seed;
  std::optional<ssl::KeyQueue> queue;
  std::vector<EpochLog> logs;
  std::optional<fs::path> optimizer_state;

  if (options.resume_from) {
    auto ck = load_checkpoint(*options.resume_from);
    // The schedule and objective must match; run-management fields may differ.
    auto a = ck.config, b = config;
    a.train.output_dir = b.train.output_dir;
    a.train.workers = b.train.workers;
    a.train.checkpoint_every = b.train.checkpoint_every;
    a.train.epochs = b.train.epochs;
    if (to_config_text(a) != to_config_text(b)) {
      throw ConfigError("", "resume config differs from the checkpoint '" + options.resume_from->string() + "'");
    }
    if (ck.config.train.epochs != tc.epochs) {
      throw ConfigError("train.epochs", "resuming requires the same schedule length (checkpoint has " +
                                            std::to_string(ck.config.train.epochs) + ")");
    }
    model = ck.model;
    state = ck.state;
    queue = std::move(ck.queue);
    logs = epoch_logs_from_json(read_manifest(*options.resume_from).at("epoch_logs"));
    if (fs::exists(*options.resume_from / "optimizer.pt")) optimizer_state = *options.resume_from / "optimizer.pt";
  } else {
    model = make_model(config);
  }

  const bool is_moco = config.method.method == ssl::Method::moco_v2;
  if (is_moco && !queue) {
    const auto dim = config.conditioning.resolved(config.backbone.embedding_width())
                         .output_width(config.backbone.embedding_width());
    queue.emplace(config.method.queue_size, dim, derive_seed(tc.seed, 0x9e7e0000ULL, 0));
  }

  torch::optim::SGD optimizer(model->online_parameters(), torch::optim::SGDOptions(tc.scaled_lr())
                                                              .momentum(tc.sgd_momentum)
                                                              .weight_decay(tc.weight_decay));
  if (optimizer_state) {
    torch::serialize::InputArchive ar;
    ar.load_from(optimizer_state->string());
    optimizer.load(ar);
  }

  const int end_epoch = options.stop_after_epochs ? std::min(tc.epochs, state.epoch + *options.stop_after_epochs)
                                                  : tc.epochs;
  const double scaled_lr = tc.scaled_lr();
  model->train();

  for (int epoch = state.epoch; epoch < end_epoch; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    const auto order = epoch_order(n, state.rng_seed, epoch);
    auto batch_at = [&](int64_t b) {
      std::span<const std::size_t> idx(order.data() + b * tc.batch_size, static_cast<std::size_t>(tc.batch_size));
      return make_batch(dataset, idx, config.augment, state.rng_seed, epoch);
    };

    BatchQueue prepared(2);
    std::thread producer;
    if (tc.workers > 0) {
      producer = std::thread([&] {
        try {
          for (int64_t b = 0; b < steps_per_epoch && !prepared.closed(); ++b) prepared.push(batch_at(b));
        } catch (...) {
          prepared.fail(std::current_exception());
        }
      });
    }
    struct Joiner {
      BatchQueue& q;
      std::thread& t;
      ~Joiner() {
        q.close();
        if (t.joinable()) t.join();
      }
    } joiner{prepared, producer};

    double loss_sum = 0.0;
    for (int64_t b = 0; b < steps_per_epoch; ++b) {
      auto batch = tc.workers > 0 ? prepared.pop() : batch_at(b);
      state.lr = cosine_lr(scaled_lr, state.step, total_steps, warmup_steps);
      for (auto& group : optimizer.param_groups()) {
        static_cast<torch::optim::SGDOptions&>(group.options()).lr(state.lr);
      }
      optimizer.zero_grad();
      auto loss = ssl::training_loss(model, batch, queue ? &*queue : nullptr);
      const double value = loss.item<double>();
      if (!std::isfinite(value)) {
        const auto snap = result.run_dir / "abort-snapshot";
        json diag = {{"reason", "non-finite loss"}, {"loss", std::to_string(value)}, {"epoch", epoch},
                     {"batch", b}, {"step", state.step}, {"lr", state.lr}};
        save_checkpoint_impl(snap, config, state, model, &optimizer, queue ? &*queue : nullptr, logs, diag);
        throw TrainingAborted("non-finite loss at epoch " + std::to_string(epoch) + ", step " +
                                  std::to_string(state.step),
                              snap);
      }
      loss.backward();
      optimizer.step();
      ++state.step;
      loss_sum += value;
    }

    state.epoch = epoch + 1;
    state.rng_epoch = state.epoch;
    const double mean = loss_sum / static_cast<double>(steps_per_epoch);
    state.loss_history.push_back(mean);
    const double wall = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    EpochLog log{state.epoch, mean, state.lr, wall};
    logs.push_back(log);
    write_loss_log(result.loss_log, logs);
    if (options.verbose) {
      std::cerr << "epoch " << log.epoch << "/" << tc.epochs << " loss " << mean << " lr " << state.lr << " ("
                << wall << " s)\n";
    }
    if (options.on_epoch) options.on_epoch(log);
    if (tc.checkpoint_every > 0 && state.epoch % tc.checkpoint_every == 0 && state.epoch < end_epoch) {
      save_checkpoint_impl(result.checkpoint_dir, config, state, model, &optimizer, queue ? &*queue : nullptr,
                           logs, nullptr);
    }
  }

  if (logs.empty() || !fs::exists(result.loss_log)) write_loss_log(result.loss_log, logs);
  save_checkpoint_impl(result.checkpoint_dir, config, state, model, &optimizer, queue ? &*queue : nullptr, logs,
                       nullptr);
  result.state = state;
  return result;
}

}  // namespace cassle::train
