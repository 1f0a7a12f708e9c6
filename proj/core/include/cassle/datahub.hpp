#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "cassle/augpipe.hpp"

namespace cassle::data {

class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class Split { train, val, test };

Split parse_split(std::string_view name);
std::string_view to_string(Split split);

/// Supported on-disk formats. `synthetic` uses the CIFAR-10 binary layout
/// (see generate_synthetic).
enum class DatasetFormat { cifar10, cifar100, stl10, synthetic };

DatasetFormat parse_format(std::string_view id);

struct DatasetRef {
  std::string id = "synthetic";
  std::filesystem::path root;
  Split split = Split::train;
  int image_size = 32;
  int class_count = 10;
  /// Keep only the first `limit` items (0 keeps everything).
  std::size_t limit = 0;

  DatasetFormat format() const { return parse_format(id); }
};

/// Default image size and class count for a dataset id.
DatasetRef make_ref(std::string_view id, std::filesystem::path root, Split split,
                    std::size_t limit = 0);

struct Dataset {
  std::string id;
  Split split = Split::train;
  int class_count = 0;
  std::vector<aug::Image> images;
  std::vector<int> labels;

  std::size_t size() const { return images.size(); }
  /// Items at `indices`, in that order.
  Dataset subset(std::span<const std::size_t> indices) const;
};

/// Loads a split in file order. The validation split is not stored on disk;
/// build it with split_dataset from the training split.
Dataset load_dataset(const DatasetRef& ref);

/// SHA-256 over the decoded float bytes and labels, in order.
std::string dataset_checksum(const Dataset& dataset);

struct SplitIndices {
  std::vector<std::size_t> first;
  std::vector<std::size_t> second;
};

/// Stratified, seed-deterministic two-way split. Per class, round(f0 * count)
/// items go to the first part.
SplitIndices split_dataset(std::span<const int> labels, std::pair<double, double> fractions,
                           uint64_t seed);
std::pair<Dataset, Dataset> split_dataset(const Dataset& dataset, std::pair<double, double> fractions,
                                          uint64_t seed);

/// Procedural "colored shapes" set: 10 classes = 5 shapes x 2 hue families on
/// textured backgrounds. Writes data_batch_1.bin and test_batch.bin in the
/// CIFAR-10 binary layout under `root`.
void generate_synthetic(const std::filesystem::path& root, std::size_t n_train, std::size_t n_test,
                        uint64_t seed, int image_size = 32);

/// One synthetic image of the given class.
aug::Image render_synthetic(int label, uint64_t seed, int image_size = 32);

// --- Embedding cache ----------------------------------------------------------

struct CacheManifest {
  std::string checkpoint_hash;
  std::string dataset_id;
  std::string split;
  std::size_t rows = 0;
  std::size_t cols = 0;
  int omega_layout_version = aug::kOmegaLayoutVersion;
  std::string created_at;

  std::string to_json() const;
  static CacheManifest from_json(std::string_view text);
};

/// Cache root from CASSLE_CACHE_ROOT, falling back to `fallback`.
std::filesystem::path cache_root_from_env(const std::filesystem::path& fallback);

/// caches/<dataset>/<split>/<checkpoint_hash>.{bin,json} under `root`.
std::filesystem::path cache_entry_path(const std::filesystem::path& root, const CacheManifest& key,
                                       std::string_view extension);

/// Stores a row-major float32 matrix atomically. Throws on size mismatch.
std::filesystem::path cache_put(const std::filesystem::path& root, CacheManifest manifest,
                                std::span<const float> payload);

/// Returns the payload only if an entry exists whose hash, dataset, split and
/// omega layout all match `request`.
std::optional<std::vector<float>> cache_get(const std::filesystem::path& root,
                                            const CacheManifest& request,
                                            CacheManifest* stored = nullptr);

// --- Hashing and files -------------------------------------------------------

std::string sha256_hex(std::span<const std::byte> bytes);

/// Incremental SHA-256.
class Sha256 {
 public:
  Sha256();
  ~Sha256();
  Sha256(const Sha256&) = delete;
  Sha256& operator=(const Sha256&) = delete;

  void update(const void* data, std::size_t size);
  void update(std::string_view text) { update(text.data(), text.size()); }
  /// Finalizes; the object must not be updated afterwards.
  std::string hex();

 private:
  void* ctx_;
};
std::string sha256_hex(std::string_view text);

/// Writes `bytes` to `path` via a temporary sibling and rename.
void write_file_atomic(const std::filesystem::path& path, std::span<const std::byte> bytes);
void write_text_atomic(const std::filesystem::path& path, std::string_view text);
std::string read_text(const std::filesystem::path& path);

/// Little-endian float32 matrix files.
void write_f32_file(const std::filesystem::path& path, std::span<const float> values);
std::vector<float> read_f32_file(const std::filesystem::path& path);

std::string utc_timestamp();

}  // namespace cassle::data
