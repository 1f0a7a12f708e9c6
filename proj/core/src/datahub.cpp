#include "cassle/datahub.hpp"

#include <openssl/evp.h>

#include <algorithm>
#include <bit>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <cstring>
#include <ctime>
#include <fstream>
#include <iomanip>
#include <numeric>
#include <sstream>
#include <system_error>
#include <thread>

#include "json.hpp"

namespace cassle::data {

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

[[noreturn]] void fail(const std::string& msg) { throw DataError(msg); }

std::vector<unsigned char> read_bytes(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail("cannot open dataset file '" + path.string() + "'");
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)),
                                   std::istreambuf_iterator<char>());
  return bytes;
}

// CIFAR-style records: `label_bytes` label bytes, then R, G, B planes.
void decode_cifar(const fs::path& path, int label_bytes, int label_offset, int size,
                  Dataset& out, std::size_t limit) {
  const auto bytes = read_bytes(path);
  const std::size_t plane = static_cast<std::size_t>(size) * size;
  const std::size_t record = label_bytes + 3 * plane;
  if (bytes.empty() || bytes.size() % record != 0) {
    fail("corrupt dataset file '" + path.string() + "': size " + std::to_string(bytes.size()) +
         " is not a multiple of the " + std::to_string(record) + "-byte record");
  }
  const std::size_t n = bytes.size() / record;
  for (std::size_t i = 0; i < n; ++i) {
    if (limit != 0 && out.images.size() >= limit) return;
    const unsigned char* rec = bytes.data() + i * record;
    const int label = rec[label_offset];
    if (label >= out.class_count) {
      fail("corrupt dataset file '" + path.string() + "': label " + std::to_string(label) +
           " out of range at record " + std::to_string(i));
    }
    aug::Image img(size, size, 3);
    const unsigned char* px = rec + label_bytes;
    for (std::size_t p = 0; p < plane; ++p) {
      for (int c = 0; c < 3; ++c) img.pixels[3 * p + c] = px[c * plane + p] / 255.0f;
    }
    out.images.push_back(std::move(img));
    out.labels.push_back(label);
  }
}

void decode_stl10(const fs::path& x_path, const fs::path& y_path, Dataset& out, std::size_t limit) {
  constexpr int size = 96;
  constexpr std::size_t plane = static_cast<std::size_t>(size) * size;
  const auto xb = read_bytes(x_path);
  const auto yb = read_bytes(y_path);
  if (xb.empty() || xb.size() % (3 * plane) != 0) {
    fail("corrupt dataset file '" + x_path.string() + "'");
  }
  const std::size_t n = xb.size() / (3 * plane);
  if (yb.size() != n) {
    fail("corrupt dataset file '" + y_path.string() + "': label count does not match images");
  }
  for (std::size_t i = 0; i < n; ++i) {
    if (limit != 0 && out.images.size() >= limit) return;
    const int label = static_cast<int>(yb[i]) - 1;
    if (label < 0 || label >= out.class_count) {
      fail("corrupt dataset file '" + y_path.string() + "': label out of range");
    }
    aug::Image img(size, size, 3);
    const unsigned char* px = xb.data() + i * 3 * plane;
    // Column-major planes: pixel (row, col) sits at col * size + row.
    for (int c = 0; c < 3; ++c) {
      for (int col = 0; col < size; ++col) {
        for (int row = 0; row < size; ++row) {
          img.at(row, col, c) = px[c * plane + static_cast<std::size_t>(col) * size + row] / 255.0f;
        }
      }
    }
    out.images.push_back(std::move(img));
    out.labels.push_back(label);
  }
}

void hsv_to_rgb(double h, double s, double v, double rgb[3]) {
  h -= std::floor(h);
  const double h6 = h * 6.0;
  const int sector = static_cast<int>(std::floor(h6)) % 6;
  const double f = h6 - std::floor(h6);
  const double p = v * (1 - s), q = v * (1 - s * f), t = v * (1 - s * (1 - f));
  const double table[6][3] = {{v, t, p}, {q, v, p}, {p, v, t}, {p, q, v}, {t, p, v}, {v, p, q}};
  for (int c = 0; c < 3; ++c) rgb[c] = table[sector][c];
}

bool inside_shape(int shape, double dx, double dy, double r) {
  const double ax = std::abs(dx), ay = std::abs(dy);
  switch (shape) {
    case 0: return dx * dx + dy * dy <= r * r;  // disk
    case 1: return ax <= r * 0.85 && ay <= r * 0.85;  // square
    case 2: {  // upward triangle
      const double top = -r, bottom = r * 0.8;
      if (dy < top || dy > bottom) return false;
      const double half = (dy - top) / (bottom - top) * r;
      return ax <= half;
    }
    case 3: return (ax <= r * 0.3 && ay <= r) || (ay <= r * 0.3 && ax <= r);  // cross
    default: {  // ring
      const double d2 = dx * dx + dy * dy;
      return d2 <= r * r && d2 >= 0.45 * r * r;
    }
  }
}

void write_u8_records(const fs::path& path, const std::vector<aug::Image>& images,
                      const std::vector<int>& labels) {
  std::vector<std::byte> bytes;
  for (std::size_t i = 0; i < images.size(); ++i) {
    const auto& img = images[i];
    const std::size_t plane = static_cast<std::size_t>(img.height) * img.width;
    bytes.push_back(static_cast<std::byte>(labels[i]));
    for (int c = 0; c < 3; ++c) {
      for (std::size_t p = 0; p < plane; ++p) {
        const float v = std::clamp(img.pixels[3 * p + c], 0.0f, 1.0f);
        bytes.push_back(static_cast<std::byte>(static_cast<unsigned char>(std::lround(v * 255.0f))));
      }
    }
  }
  write_file_atomic(path, bytes);
}

}  // namespace

Split parse_split(std::string_view name) {
  if (name == "train") return Split::train;
  if (name == "val") return Split::val;
  if (name == "test") return Split::test;
  fail("unknown split '" + std::string(name) + "'");
}

std::string_view to_string(Split split) {
  switch (split) {
    case Split::train: return "train";
    case Split::val: return "val";
    case Split::test: return "test";
  }
  return "unknown";
}

DatasetFormat parse_format(std::string_view id) {
  if (id == "cifar10") return DatasetFormat::cifar10;
  if (id == "cifar100") return DatasetFormat::cifar100;
  if (id == "stl10") return DatasetFormat::stl10;
  if (id == "synthetic") return DatasetFormat::synthetic;
  fail("unknown dataset id '" + std::string(id) + "'");
}

DatasetRef make_ref(std::string_view id, std::filesystem::path root, Split split, std::size_t limit) {
  DatasetRef ref;
  ref.id = std::string(id);
  ref.root = std::move(root);
  ref.split = split;
  ref.limit = limit;
  switch (parse_format(id)) {
    case DatasetFormat::cifar10:
    case DatasetFormat::synthetic: ref.image_size = 32, ref.class_count = 10; break;
    case DatasetFormat::cifar100: ref.image_size = 32, ref.class_count = 100; break;
    case DatasetFormat::stl10: ref.image_size = 96, ref.class_count = 10; break;
  }
  return ref;
}

Dataset Dataset::subset(std::span<const std::size_t> indices) const {
  Dataset out;
  out.id = id;
  out.split = split;
  out.class_count = class_count;
  out.images.reserve(indices.size());
  out.labels.reserve(indices.size());
  for (auto i : indices) {
    if (i >= images.size()) fail("subset index out of range");
    out.images.push_back(images[i]);
    out.labels.push_back(labels[i]);
  }
  return out;
}

Dataset load_dataset(const DatasetRef& ref) {
  if (ref.split == Split::val) {
    fail("the val split is derived from train with split_dataset; it has no files");
  }
  if (!fs::is_directory(ref.root)) fail("dataset root '" + ref.root.string() + "' is not a directory");
  Dataset out;
  out.id = ref.id;
  out.split = ref.split;
  out.class_count = ref.class_count;
  const bool train = ref.split == Split::train;
  switch (ref.format()) {
    case DatasetFormat::cifar10:
    case DatasetFormat::synthetic: {
      std::vector<fs::path> files;
      if (train) {
        for (int b = 1; b <= 5; ++b) {
          const auto p = ref.root / ("data_batch_" + std::to_string(b) + ".bin");
          if (b == 1 || fs::exists(p)) files.push_back(p);
        }
      } else {
        files.push_back(ref.root / "test_batch.bin");
      }
      for (const auto& f : files) {
        if (ref.limit != 0 && out.images.size() >= ref.limit) break;
        decode_cifar(f, 1, 0, ref.image_size, out, ref.limit);
      }
      break;
    }
    case DatasetFormat::cifar100:
      decode_cifar(ref.root / (train ? "train.bin" : "test.bin"), 2, 1, ref.image_size, out, ref.limit);
      break;
    case DatasetFormat::stl10:
      decode_stl10(ref.root / (train ? "train_X.bin" : "test_X.bin"),
                   ref.root / (train ? "train_y.bin" : "test_y.bin"), out, ref.limit);
      break;
  }
  return out;
}

std::string dataset_checksum(const Dataset& dataset) {
  Sha256 h;
  for (std::size_t i = 0; i < dataset.size(); ++i) {
    const auto& px = dataset.images[i].pixels;
    h.update(px.data(), px.size() * sizeof(float));
    const int32_t label = dataset.labels[i];
    h.update(&label, sizeof(label));
  }
  return h.hex();
}

SplitIndices split_dataset(std::span<const int> labels, std::pair<double, double> fractions,
                           uint64_t seed) {
  const auto [f0, f1] = fractions;
  if (f0 < 0.0 || f1 < 0.0 || std::abs(f0 + f1 - 1.0) > 1e-9) {
    fail("split fractions must be non-negative and sum to 1");
  }
  int max_label = -1;
  for (int l : labels) {
    if (l < 0) fail("negative label in split");
    max_label = std::max(max_label, l);
  }
  std::vector<std::vector<std::size_t>> by_class(static_cast<std::size_t>(max_label + 1));
  for (std::size_t i = 0; i < labels.size(); ++i) by_class[labels[i]].push_back(i);
  const int parts = (f0 > 0.0 ? 1 : 0) + (f1 > 0.0 ? 1 : 0);
  SplitIndices out;
  for (std::size_t c = 0; c < by_class.size(); ++c) {
    auto& idx = by_class[c];
    if (idx.empty()) continue;
    if (static_cast<int>(idx.size()) < parts) {
      fail("class " + std::to_string(c) + " has " + std::to_string(idx.size()) +
           " samples, fewer than the " + std::to_string(parts) + " split slots");
    }
    RandomStream rng(derive_seed(seed, 0x5b117ULL, c));
    for (std::size_t i = idx.size(); i > 1; --i) {
      const auto j = static_cast<std::size_t>(rng.uniform_int(0, static_cast<int64_t>(i) - 1));
      std::swap(idx[i - 1], idx[j]);
    }
    auto n0 = static_cast<std::size_t>(std::llround(f0 * static_cast<double>(idx.size())));
    if (parts == 2) n0 = std::clamp<std::size_t>(n0, 1, idx.size() - 1);
    out.first.insert(out.first.end(), idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(n0));
    out.second.insert(out.second.end(), idx.begin() + static_cast<std::ptrdiff_t>(n0), idx.end());
  }
  std::sort(out.first.begin(), out.first.end());
  std::sort(out.second.begin(), out.second.end());
  return out;
}

std::pair<Dataset, Dataset> split_dataset(const Dataset& dataset, std::pair<double, double> fractions,
                                          uint64_t seed) {
  const auto idx = split_dataset(dataset.labels, fractions, seed);
  auto first = dataset.subset(idx.first);
  auto second = dataset.subset(idx.second);
  second.split = Split::val;
  return {std::move(first), std::move(second)};
}

aug::Image render_synthetic(int label, uint64_t seed, int image_size) {
  if (label < 0 || label >= 10) fail("synthetic labels lie in [0, 10)");
  RandomStream rng(seed);
  const int shape = label / 2;
  const int family = label % 2;
  const int s = image_size;
  aug::Image img(s, s, 3);

  // Low-saturation background with a linear gradient and pixel noise.
  double bg0[3], bg1[3];
  const double bg_hue = rng.uniform();
  hsv_to_rgb(bg_hue, rng.uniform(0.0, 0.3), rng.uniform(0.25, 0.75), bg0);
  hsv_to_rgb(bg_hue + rng.uniform(-0.1, 0.1), rng.uniform(0.0, 0.3), rng.uniform(0.25, 0.75), bg1);
  const double angle = rng.uniform(0.0, 6.283185307179586);
  const double gx = std::cos(angle), gy = std::sin(angle);

  // Foreground: warm (red-orange) or cool (cyan-blue) hue family.
  const double fg_hue = family == 0 ? rng.uniform(-0.04, 0.08) : rng.uniform(0.52, 0.64);
  double fg[3];
  hsv_to_rgb(fg_hue, rng.uniform(0.6, 1.0), rng.uniform(0.55, 1.0), fg);
  const double r = s * rng.uniform(0.22, 0.36);
  const double cx = s * rng.uniform(0.35, 0.65);
  const double cy = s * rng.uniform(0.35, 0.65);

  for (int y = 0; y < s; ++y) {
    for (int x = 0; x < s; ++x) {
      const double t = 0.5 + 0.5 * ((x - s / 2.0) * gx + (y - s / 2.0) * gy) / (s / 2.0);
      const bool in = inside_shape(shape, x + 0.5 - cx, y + 0.5 - cy, r);
      for (int c = 0; c < 3; ++c) {
        double v = in ? fg[c] : bg0[c] + (bg1[c] - bg0[c]) * std::clamp(t, 0.0, 1.0);
        v += 0.03 * rng.normal();
        img.at(y, x, c) = static_cast<float>(std::clamp(v, 0.0, 1.0));
      }
    }
  }
  return img;
}

void generate_synthetic(const std::filesystem::path& root, std::size_t n_train, std::size_t n_test,
                        uint64_t seed, int image_size) {
  fs::create_directories(root);
  auto build = [&](std::size_t n, uint64_t stream, const fs::path& file) {
    std::vector<aug::Image> images;
    std::vector<int> labels;
    images.reserve(n);
    for (std::size_t i = 0; i < n; ++i) {
      const int label = static_cast<int>(i % 10);
      images.push_back(render_synthetic(label, derive_seed(seed, stream, i), image_size));
      labels.push_back(label);
    }
    write_u8_records(file, images, labels);
  };
  build(n_train, 1, root / "data_batch_1.bin");
  build(n_test, 2, root / "test_batch.bin");
}

// --- Cache -------------------------------------------------------------------

std::string CacheManifest::to_json() const {
  json j{{"checkpoint_hash", checkpoint_hash}, {"dataset_id", dataset_id},
         {"split", split},                     {"rows", rows},
         {"cols", cols},                       {"omega_layout_version", omega_layout_version},
         {"created_at", created_at}};
  return j.dump(2) + "\n";
}

CacheManifest CacheManifest::from_json(std::string_view text) {
  const auto j = json::parse(text);
  CacheManifest m;
  m.checkpoint_hash = j.at("checkpoint_hash").get<std::string>();
  m.dataset_id = j.at("dataset_id").get<std::string>();
  m.split = j.at("split").get<std::string>();
  m.rows = j.at("rows").get<std::size_t>();
  m.cols = j.at("cols").get<std::size_t>();
  m.omega_layout_version = j.at("omega_layout_version").get<int>();
  m.created_at = j.value("created_at", "");
  return m;
}

std::filesystem::path cache_root_from_env(const std::filesystem::path& fallback) {
  if (const char* env = std::getenv("CASSLE_CACHE_ROOT"); env != nullptr && *env != '\0') {
    return env;
  }
  return fallback;
}

std::filesystem::path cache_entry_path(const std::filesystem::path& root, const CacheManifest& key,
                                       std::string_view extension) {
  if (key.checkpoint_hash.empty() || key.dataset_id.empty() || key.split.empty()) {
    fail("cache key needs checkpoint hash, dataset id and split");
  }
  return root / "caches" / key.dataset_id / key.split /
         (key.checkpoint_hash + "." + std::string(extension));
}

std::filesystem::path cache_put(const std::filesystem::path& root, CacheManifest manifest,
                                std::span<const float> payload) {
  if (manifest.rows * manifest.cols != payload.size()) {
    fail("cache manifest says " + std::to_string(manifest.rows) + "x" + std::to_string(manifest.cols) +
         " but payload holds " + std::to_string(payload.size()) + " values");
  }
  if (manifest.created_at.empty()) manifest.created_at = utc_timestamp();
  const auto bin = cache_entry_path(root, manifest, "bin");
  fs::create_directories(bin.parent_path());
  write_f32_file(bin, payload);
  // Manifest last: a reader never sees a manifest without its payload.
  write_text_atomic(cache_entry_path(root, manifest, "json"), manifest.to_json());
  return bin;
}

std::optional<std::vector<float>> cache_get(const std::filesystem::path& root,
                                            const CacheManifest& request, CacheManifest* stored) {
  const auto json_path = cache_entry_path(root, request, "json");
  const auto bin_path = cache_entry_path(root, request, "bin");
  if (!fs::exists(json_path) || !fs::exists(bin_path)) return std::nullopt;
  CacheManifest m;
  try {
    m = CacheManifest::from_json(read_text(json_path));
  } catch (const std::exception&) {
    return std::nullopt;
  }
  if (m.checkpoint_hash != request.checkpoint_hash || m.dataset_id != request.dataset_id ||
      m.split != request.split || m.omega_layout_version != request.omega_layout_version) {
    return std::nullopt;
  }
  auto payload = read_f32_file(bin_path);
  if (payload.size() != m.rows * m.cols) {
    fail("cache entry '" + bin_path.string() + "' does not match its manifest");
  }
  if (stored != nullptr) *stored = m;
  return payload;
}

// --- Hashing and files -----------------------------------------------------

std::string sha256_hex(std::span<const std::byte> bytes) {
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  EVP_Digest(bytes.data(), bytes.size(), digest, &len, EVP_sha256(), nullptr);
  std::ostringstream os;
  for (unsigned int i = 0; i < len; ++i) os << std::hex << std::setw(2) << std::setfill('0') << int(digest[i]);
  return os.str();
}

Sha256::Sha256() : ctx_(EVP_MD_CTX_new()) {
  EVP_DigestInit_ex(static_cast<EVP_MD_CTX*>(ctx_), EVP_sha256(), nullptr);
}

Sha256::~Sha256() { EVP_MD_CTX_free(static_cast<EVP_MD_CTX*>(ctx_)); }

void Sha256::update(const void* data, std::size_t size) {
  EVP_DigestUpdate(static_cast<EVP_MD_CTX*>(ctx_), data, size);
}

std::string Sha256::hex() {
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  EVP_DigestFinal_ex(static_cast<EVP_MD_CTX*>(ctx_), digest, &len);
  std::ostringstream os;
  for (unsigned int i = 0; i < len; ++i) os << std::hex << std::setw(2) << std::setfill('0') << int(digest[i]);
  return os.str();
}

std::string sha256_hex(std::string_view text) {
  return sha256_hex(std::as_bytes(std::span<const char>(text.data(), text.size())));
}

void write_file_atomic(const std::filesystem::path& path, std::span<const std::byte> bytes) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ostringstream suffix;
  suffix << ".tmp-" << std::hex << std::hash<std::thread::id>{}(std::this_thread::get_id()) << "-"
         << std::chrono::steady_clock::now().time_since_epoch().count();
  const fs::path tmp = path.string() + suffix.str();
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) fail("cannot open '" + tmp.string() + "' for writing");
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) fail("failed writing '" + tmp.string() + "'");
  }
  std::error_code ec;
  fs::rename(tmp, path, ec);
  if (ec) {
    fs::remove(tmp);
    fail("cannot move '" + tmp.string() + "' into place: " + ec.message());
  }
}

void write_text_atomic(const std::filesystem::path& path, std::string_view text) {
  write_file_atomic(path, std::as_bytes(std::span<const char>(text.data(), text.size())));
}

std::string read_text(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail("cannot open '" + path.string() + "'");
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

void write_f32_file(const std::filesystem::path& path, std::span<const float> values) {
  std::vector<std::byte> bytes(values.size() * 4);
  for (std::size_t i = 0; i < values.size(); ++i) {
    auto w = std::bit_cast<uint32_t>(values[i]);
    if constexpr (std::endian::native == std::endian::big) w = __builtin_bswap32(w);
    std::memcpy(bytes.data() + 4 * i, &w, 4);
  }
  write_file_atomic(path, bytes);
}

std::vector<float> read_f32_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail("cannot open '" + path.string() + "'");
  std::vector<char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (bytes.size() % 4 != 0) fail("float32 file '" + path.string() + "' has a truncated value");
  std::vector<float> out(bytes.size() / 4);
  for (std::size_t i = 0; i < out.size(); ++i) {
    uint32_t w;
    std::memcpy(&w, bytes.data() + 4 * i, 4);
    if constexpr (std::endian::native == std::endian::big) w = __builtin_bswap32(w);
    out[i] = std::bit_cast<float>(w);
  }
  return out;
}

std::string utc_timestamp() {
  const auto now = std::chrono::system_clock::now();
  const std::time_t t = std::chrono::system_clock::to_time_t(now);
  std::tm tm{};
  gmtime_r(&t, &tm);
  std::ostringstream os;
  os << std::put_time(&tm, "%Y%m%dT%H%M%SZ");
  return os.str();
}

}  // namespace cassle::data
