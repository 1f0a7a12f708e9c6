#pragma once

#include <array>
#include <cstddef>
#include <filesystem>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "cassle/random.hpp"

namespace cassle::aug {

class AugmentationError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Float RGB image, HWC layout, values in [0, 1].
struct Image {
  int height = 0;
  int width = 0;
  int channels = 3;
  std::vector<float> pixels;

  Image() = default;
  Image(int h, int w, int c = 3, float fill = 0.0f)
      : height(h), width(w), channels(c),
        pixels(static_cast<std::size_t>(h) * w * c, fill) {}

  float& at(int y, int x, int c) {
    return pixels[(static_cast<std::size_t>(y) * width + x) * channels + c];
  }
  float at(int y, int x, int c) const {
    return pixels[(static_cast<std::size_t>(y) * width + x) * channels + c];
  }

  /// Per-channel means.
  std::array<double, 3> channel_means() const;

  bool operator==(const Image&) const = default;
};

struct Range {
  double lo = 0.0;
  double hi = 0.0;
};

/// Sampling distribution of the stochastic transform chain.
struct AugmentationPolicy {
  Range crop_scale{0.2, 1.0};
  Range crop_ratio{3.0 / 4.0, 4.0 / 3.0};
  double jitter_prob = 0.8;
  /// Maximal brightness, contrast, saturation strengths and hue shift.
  std::array<double, 4> jitter_max{0.4, 0.4, 0.4, 0.1};
  double blur_prob = 0.5;
  Range blur_sigma{0.1, 2.0};
  double flip_prob = 0.5;
  double grayscale_prob = 0.2;
  int out_size = 32;

  /// Throws AugmentationError describing the first violated invariant.
  void validate() const;

  /// Policy with every stochastic op disabled and full-frame crops.
  static AugmentationPolicy identity(int out_size);
};

/// Exact parameters of one view's transform chain.
struct AugmentationRecord {
  /// center_x, center_y, width, height as fractions of the source image.
  std::array<double, 4> crop{0.5, 0.5, 1.0, 1.0};
  bool jitter_applied = false;
  /// Brightness, contrast, saturation factors; hue shift (fraction of a turn).
  std::array<double, 4> jitter{1.0, 1.0, 1.0, 0.0};
  bool blur_applied = false;
  double blur_sigma = 0.0;
  bool flipped = false;
  bool grayscaled = false;
  /// Per-channel mean after minus before jitter, each in [-1, 1].
  std::array<double, 3> color_diff{0.0, 0.0, 0.0};

  void validate() const;
  bool operator==(const AugmentationRecord&) const = default;
};

inline constexpr int kOmegaLayoutVersion = 1;
inline constexpr std::size_t kOmegaDim = 14;

/// Block offsets inside the omega vector.
namespace omega_block {
inline constexpr std::size_t crop = 0;
inline constexpr std::size_t jitter = 4;
inline constexpr std::size_t blur = 8;
inline constexpr std::size_t flip = 9;
inline constexpr std::size_t grayscale = 10;
inline constexpr std::size_t color_diff = 11;
}  // namespace omega_block

/// Fixed-layout encoding of an AugmentationRecord; every component in [0, 1].
struct OmegaVector {
  std::array<double, kOmegaDim> values{};
  int layout_version = kOmegaLayoutVersion;

  bool operator==(const OmegaVector&) const = default;
};

/// Single augmentation families, used to build one-transform views.
enum class AugKind { identity, crop, jitter, blur, flip, grayscale, all };

AugKind parse_aug_kind(std::string_view name);
std::string_view to_string(AugKind kind);

/// Samples a record in pipeline order crop, flip, jitter, grayscale, blur.
/// color_diff is left at zero; apply_record measures it.
AugmentationRecord sample_record(const AugmentationPolicy& policy, RandomStream& rng,
                                 int source_width, int source_height);

/// Samples a record in which only `kind` is applied (forced on, no coin flip);
/// crops stay full-frame unless `kind` is crop. `all` defers to sample_record.
AugmentationRecord sample_single(const AugmentationPolicy& policy, AugKind kind,
                                 RandomStream& rng, int source_width, int source_height);

/// Deterministically replays `record` on `image` and writes the measured
/// jitter color difference back into `record.color_diff`.
Image apply_record(const Image& image, AugmentationRecord& record,
                   const AugmentationPolicy& policy);

/// Encodes a record. Jitter factors and blur sigma are normalized by the
/// sampling ranges of `policy`.
OmegaVector encode_omega(const AugmentationRecord& record, const AugmentationPolicy& policy);

/// Inverse of encode_omega. Jitter counts as applied when any factor differs
/// from identity; blur when its component is nonzero. Throws on a layout
/// version mismatch.
AugmentationRecord decode_omega(const OmegaVector& omega, const AugmentationPolicy& policy);

struct ViewPair {
  Image view1;
  AugmentationRecord record1;
  Image view2;
  AugmentationRecord record2;
};

ViewPair make_view_pair(const Image& image, const AugmentationPolicy& policy, RandomStream& rng);

// Image utilities shared by evaluation code.

/// Bilinear resize of a centered square-ish crop covering `fraction` of each side.
Image center_crop_resize(const Image& image, int out_size, double fraction = 1.0);

/// Counter-clockwise rotation by `quarter_turns` * 90 degrees.
Image rotate90(const Image& image, int quarter_turns);

void flip_horizontal_inplace(Image& image);

// Serialization.

/// Flat `key=value` lines, including layout_version.
std::string serialize_record(const AugmentationRecord& record);
AugmentationRecord parse_record(std::string_view text);

/// Writes omegas as consecutive groups of 14 little-endian float32 values.
void write_omega_batch(const std::filesystem::path& path, std::span<const OmegaVector> omegas);
std::vector<OmegaVector> read_omega_batch(const std::filesystem::path& path);

}  // namespace cassle::aug
