#include "cassle/augpipe.hpp"

#include <algorithm>
#include <bit>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <map>
#include <sstream>

namespace cassle::aug {

namespace {

constexpr double kGrayR = 0.299;
constexpr double kGrayG = 0.587;
constexpr double kGrayB = 0.114;

[[noreturn]] void fail(const std::string& msg) { throw AugmentationError(msg); }

float clamp01(double v) { return static_cast<float>(std::clamp(v, 0.0, 1.0)); }

bool in_unit(double v) { return v >= 0.0 && v <= 1.0; }

void require_rgb(const Image& image) {
  if (image.channels != 3) {
    fail("image must have 3 channels, got " + std::to_string(image.channels));
  }
  if (image.height <= 0 || image.width <= 0) fail("image has empty spatial dims");
  if (image.pixels.size() != static_cast<std::size_t>(image.height) * image.width * 3) {
    fail("image pixel buffer does not match its dims");
  }
}

// Bilinear sampling of the box [x0, x0+bw) x [y0, y0+bh) (pixel units) onto an
// out_h x out_w grid, half-pixel centers, edge-clamped.
Image resample_box(const Image& src, double x0, double y0, double bw, double bh, int out_w,
                   int out_h) {
  Image out(out_h, out_w, 3);
  const double sx = bw / out_w;
  const double sy = bh / out_h;
  std::vector<int> xi0(out_w), xi1(out_w);
  std::vector<double> xt(out_w);
  for (int ox = 0; ox < out_w; ++ox) {
    double fx = x0 + (ox + 0.5) * sx - 0.5;
    fx = std::clamp(fx, 0.0, static_cast<double>(src.width - 1));
    const int i0 = static_cast<int>(std::floor(fx));
    xi0[ox] = i0;
    xi1[ox] = std::min(i0 + 1, src.width - 1);
    xt[ox] = fx - i0;
  }
  for (int oy = 0; oy < out_h; ++oy) {
    double fy = y0 + (oy + 0.5) * sy - 0.5;
    fy = std::clamp(fy, 0.0, static_cast<double>(src.height - 1));
    const int j0 = static_cast<int>(std::floor(fy));
    const int j1 = std::min(j0 + 1, src.height - 1);
    const double yt = fy - j0;
    for (int ox = 0; ox < out_w; ++ox) {
      for (int c = 0; c < 3; ++c) {
        const double a = src.at(j0, xi0[ox], c);
        const double b = src.at(j0, xi1[ox], c);
        const double d = src.at(j1, xi0[ox], c);
        const double e = src.at(j1, xi1[ox], c);
        const double top = a + (b - a) * xt[ox];
        const double bottom = d + (e - d) * xt[ox];
        out.at(oy, ox, c) = static_cast<float>(top + (bottom - top) * yt);
      }
    }
  }
  return out;
}

double luminance(double r, double g, double b) { return kGrayR * r + kGrayG * g + kGrayB * b; }

void rgb_to_hsv(double r, double g, double b, double& h, double& s, double& v) {
  const double mx = std::max({r, g, b});
  const double mn = std::min({r, g, b});
  const double delta = mx - mn;
  v = mx;
  s = mx > 0.0 ? delta / mx : 0.0;
  if (delta <= 0.0) {
    h = 0.0;
    return;
  }
  if (mx == r) {
    h = (g - b) / delta;
  } else if (mx == g) {
    h = 2.0 + (b - r) / delta;
  } else {
    h = 4.0 + (r - g) / delta;
  }
  h /= 6.0;
  if (h < 0.0) h += 1.0;
}

void hsv_to_rgb(double h, double s, double v, double& r, double& g, double& b) {
  const double h6 = h * 6.0;
  const int sector = static_cast<int>(std::floor(h6)) % 6;
  const double f = h6 - std::floor(h6);
  const double p = v * (1.0 - s);
  const double q = v * (1.0 - s * f);
  const double t = v * (1.0 - s * (1.0 - f));
  switch (sector) {
    case 0: r = v, g = t, b = p; break;
    case 1: r = q, g = v, b = p; break;
    case 2: r = p, g = v, b = t; break;
    case 3: r = p, g = q, b = v; break;
    case 4: r = t, g = p, b = v; break;
    default: r = v, g = p, b = q; break;
  }
}

void apply_jitter(Image& img, const std::array<double, 4>& f) {
  const auto n = static_cast<std::size_t>(img.height) * img.width;
  float* px = img.pixels.data();
  const double brightness = f[0];
  const double contrast = f[1];
  const double saturation = f[2];
  const double hue = f[3];

  if (brightness != 1.0) {
    for (std::size_t i = 0; i < n * 3; ++i) px[i] = clamp01(px[i] * brightness);
  }
  if (contrast != 1.0) {
    double mean = 0.0;
    for (std::size_t i = 0; i < n; ++i) mean += luminance(px[3 * i], px[3 * i + 1], px[3 * i + 2]);
    mean /= static_cast<double>(n);
    for (std::size_t i = 0; i < n * 3; ++i) px[i] = clamp01(contrast * px[i] + (1.0 - contrast) * mean);
  }
  if (saturation != 1.0) {
    for (std::size_t i = 0; i < n; ++i) {
      const double gray = luminance(px[3 * i], px[3 * i + 1], px[3 * i + 2]);
      for (int c = 0; c < 3; ++c) {
        px[3 * i + c] = clamp01(saturation * px[3 * i + c] + (1.0 - saturation) * gray);
      }
    }
  }
  if (hue != 0.0) {
    for (std::size_t i = 0; i < n; ++i) {
      double h, s, v;
      rgb_to_hsv(px[3 * i], px[3 * i + 1], px[3 * i + 2], h, s, v);
      if (s <= 0.0) continue;
      h = h + hue;
      h -= std::floor(h);
      double r, g, b;
      hsv_to_rgb(h, s, v, r, g, b);
      px[3 * i] = clamp01(r);
      px[3 * i + 1] = clamp01(g);
      px[3 * i + 2] = clamp01(b);
    }
  }
}

void apply_grayscale(Image& img) {
  const auto n = static_cast<std::size_t>(img.height) * img.width;
  float* px = img.pixels.data();
  for (std::size_t i = 0; i < n; ++i) {
    const float l = clamp01(luminance(px[3 * i], px[3 * i + 1], px[3 * i + 2]));
    px[3 * i] = px[3 * i + 1] = px[3 * i + 2] = l;
  }
}

int reflect_index(int i, int n) {
  if (n == 1) return 0;
  const int period = 2 * (n - 1);
  i %= period;
  if (i < 0) i += period;
  return i < n ? i : period - i;
}

std::vector<double> gaussian_kernel(double sigma) {
  const int radius = std::max(1, static_cast<int>(std::ceil(3.0 * sigma)));
  std::vector<double> k(2 * radius + 1);
  double total = 0.0;
  for (int i = -radius; i <= radius; ++i) {
    const double w = std::exp(-0.5 * (i * i) / (sigma * sigma));
    k[i + radius] = w;
    total += w;
  }
  for (auto& w : k) w /= total;
  return k;
}

void apply_blur(Image& img, double sigma) {
  const auto kernel = gaussian_kernel(sigma);
  const int radius = static_cast<int>(kernel.size() / 2);
  Image tmp(img.height, img.width, 3);
  for (int y = 0; y < img.height; ++y) {
    for (int x = 0; x < img.width; ++x) {
      for (int c = 0; c < 3; ++c) {
        double acc = 0.0;
        for (int k = -radius; k <= radius; ++k) {
          acc += kernel[k + radius] * img.at(y, reflect_index(x + k, img.width), c);
        }
        tmp.at(y, x, c) = static_cast<float>(acc);
      }
    }
  }
  for (int y = 0; y < img.height; ++y) {
    for (int x = 0; x < img.width; ++x) {
      for (int c = 0; c < 3; ++c) {
        double acc = 0.0;
        for (int k = -radius; k <= radius; ++k) {
          acc += kernel[k + radius] * tmp.at(reflect_index(y + k, img.height), x, c);
        }
        img.at(y, x, c) = clamp01(acc);
      }
    }
  }
}

// Random-resized-crop box in integer pixels; returns the record's fractional form.
std::array<double, 4> sample_crop(const AugmentationPolicy& policy, RandomStream& rng, int W,
                                  int H) {
  const double area = static_cast<double>(W) * H;
  const double log_lo = std::log(policy.crop_ratio.lo);
  const double log_hi = std::log(policy.crop_ratio.hi);
  for (int attempt = 0; attempt < 10; ++attempt) {
    const double target = area * rng.uniform(policy.crop_scale.lo, policy.crop_scale.hi);
    const double aspect = std::exp(rng.uniform(log_lo, log_hi));
    const int w = static_cast<int>(std::lround(std::sqrt(target * aspect)));
    const int h = static_cast<int>(std::lround(std::sqrt(target / aspect)));
    if (w > 0 && h > 0 && w <= W && h <= H) {
      const auto top = rng.uniform_int(0, H - h);
      const auto left = rng.uniform_int(0, W - w);
      return {(left + w / 2.0) / W, (top + h / 2.0) / H, static_cast<double>(w) / W,
              static_cast<double>(h) / H};
    }
  }
  // Fallback: largest centered box whose aspect ratio lies in range.
  const double in_ratio = static_cast<double>(W) / H;
  int w = W;
  int h = H;
  if (in_ratio < policy.crop_ratio.lo) {
    h = static_cast<int>(std::lround(w / policy.crop_ratio.lo));
  } else if (in_ratio > policy.crop_ratio.hi) {
    w = static_cast<int>(std::lround(h * policy.crop_ratio.hi));
  }
  const int top = (H - h) / 2;
  const int left = (W - w) / 2;
  return {(left + w / 2.0) / W, (top + h / 2.0) / H, static_cast<double>(w) / W,
          static_cast<double>(h) / H};
}

std::array<double, 4> sample_jitter(const AugmentationPolicy& policy, RandomStream& rng) {
  std::array<double, 4> f{};
  for (int i = 0; i < 3; ++i) {
    const double s = policy.jitter_max[i];
    f[i] = rng.uniform(std::max(0.0, 1.0 - s), 1.0 + s);
  }
  f[3] = rng.uniform(-policy.jitter_max[3], policy.jitter_max[3]);
  return f;
}

void check_source_dims(int W, int H) {
  if (W < 2 || H < 2) {
    fail("degenerate source dims " + std::to_string(W) + "x" + std::to_string(H) +
         " (each side must be at least 2 px)");
  }
}

// Affine map of a factor from [center - half, center + half] to [0, 1]. Written
// around the center so the identity factor lands exactly on 0.5.
double normalize_factor(double value, double center, double half) {
  if (half <= 0.0) return 0.5;
  return std::clamp(0.5 + (value - center) / (2.0 * half), 0.0, 1.0);
}

std::string join_numbers(std::span<const double> values) {
  std::ostringstream os;
  os << std::setprecision(17);
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (i) os << ',';
    os << values[i];
  }
  return os.str();
}

template <std::size_t N>
std::array<double, N> parse_numbers(std::string_view key, std::string_view text) {
  std::array<double, N> out{};
  std::size_t idx = 0;
  std::size_t pos = 0;
  while (pos <= text.size()) {
    const auto comma = text.find(',', pos);
    const auto piece = text.substr(pos, comma == std::string_view::npos ? text.size() - pos : comma - pos);
    if (idx >= N) fail("too many values for key '" + std::string(key) + "'");
    out[idx++] = std::stod(std::string(piece));
    if (comma == std::string_view::npos) break;
    pos = comma + 1;
  }
  if (idx != N) fail("expected " + std::to_string(N) + " values for key '" + std::string(key) + "'");
  return out;
}

bool parse_flag(std::string_view key, std::string_view v) {
  if (v == "1" || v == "true") return true;
  if (v == "0" || v == "false") return false;
  fail("invalid flag value for key '" + std::string(key) + "'");
}

}  // namespace

std::array<double, 3> Image::channel_means() const {
  std::array<double, 3> m{0.0, 0.0, 0.0};
  const auto n = static_cast<std::size_t>(height) * width;
  if (n == 0 || channels < 3) return m;
  for (std::size_t i = 0; i < n; ++i) {
    for (int c = 0; c < 3; ++c) m[c] += pixels[i * channels + c];
  }
  for (auto& v : m) v /= static_cast<double>(n);
  return m;
}

void AugmentationPolicy::validate() const {
  if (!(crop_scale.lo > 0.0 && crop_scale.lo <= crop_scale.hi && crop_scale.hi <= 1.0)) {
    fail("crop_scale must satisfy 0 < lo <= hi <= 1");
  }
  if (!(crop_ratio.lo > 0.0 && crop_ratio.lo <= crop_ratio.hi)) {
    fail("crop_ratio must satisfy 0 < lo <= hi");
  }
  for (double p : {jitter_prob, blur_prob, flip_prob, grayscale_prob}) {
    if (!in_unit(p)) fail("probabilities must lie in [0, 1]");
  }
  for (int i = 0; i < 3; ++i) {
    if (!in_unit(jitter_max[i])) fail("jitter strengths must lie in [0, 1]");
  }
  if (!(jitter_max[3] >= 0.0 && jitter_max[3] <= 0.5)) fail("hue strength must lie in [0, 0.5]");
  if (!(blur_sigma.lo > 0.0 && blur_sigma.lo <= blur_sigma.hi)) {
    fail("blur_sigma must satisfy 0 < lo <= hi");
  }
  if (out_size < 1) fail("out_size must be positive");
}

AugmentationPolicy AugmentationPolicy::identity(int out_size) {
  AugmentationPolicy p;
  p.crop_scale = {1.0, 1.0};
  p.jitter_prob = 0.0;
  p.blur_prob = 0.0;
  p.flip_prob = 0.0;
  p.grayscale_prob = 0.0;
  p.out_size = out_size;
  return p;
}

void AugmentationRecord::validate() const {
  for (double v : crop) {
    if (!in_unit(v)) fail("crop components must lie in [0, 1]");
  }
  if (!(crop[2] > 0.0 && crop[3] > 0.0)) fail("crop width and height must be positive");
  if (!jitter_applied) {
    if (jitter != std::array<double, 4>{1.0, 1.0, 1.0, 0.0}) {
      fail("jitter factors must be identity when jitter is not applied");
    }
    if (color_diff != std::array<double, 3>{0.0, 0.0, 0.0}) {
      fail("color_diff must be zero when jitter is not applied");
    }
  }
  if (!blur_applied && blur_sigma != 0.0) fail("blur_sigma must be zero when blur is not applied");
  if (blur_applied && !(blur_sigma > 0.0)) fail("applied blur needs a positive sigma");
  for (double d : color_diff) {
    if (!(d >= -1.0 && d <= 1.0)) fail("color_diff components must lie in [-1, 1]");
  }
}

AugKind parse_aug_kind(std::string_view name) {
  if (name == "identity") return AugKind::identity;
  if (name == "crop") return AugKind::crop;
  if (name == "jitter") return AugKind::jitter;
  if (name == "blur") return AugKind::blur;
  if (name == "flip") return AugKind::flip;
  if (name == "grayscale") return AugKind::grayscale;
  if (name == "all") return AugKind::all;
  fail("unknown augmentation type '" + std::string(name) + "'");
}

std::string_view to_string(AugKind kind) {
  switch (kind) {
    case AugKind::identity: return "identity";
    case AugKind::crop: return "crop";
    case AugKind::jitter: return "jitter";
    case AugKind::blur: return "blur";
    case AugKind::flip: return "flip";
    case AugKind::grayscale: return "grayscale";
    case AugKind::all: return "all";
  }
  return "unknown";
}

AugmentationRecord sample_record(const AugmentationPolicy& policy, RandomStream& rng,
                                 int source_width, int source_height) {
  check_source_dims(source_width, source_height);
  AugmentationRecord r;
  r.crop = sample_crop(policy, rng, source_width, source_height);
  r.flipped = rng.bernoulli(policy.flip_prob);
  r.jitter_applied = rng.bernoulli(policy.jitter_prob);
  if (r.jitter_applied) r.jitter = sample_jitter(policy, rng);
  r.grayscaled = rng.bernoulli(policy.grayscale_prob);
  r.blur_applied = rng.bernoulli(policy.blur_prob);
  if (r.blur_applied) r.blur_sigma = rng.uniform(policy.blur_sigma.lo, policy.blur_sigma.hi);
  return r;
}

AugmentationRecord sample_single(const AugmentationPolicy& policy, AugKind kind,
                                 RandomStream& rng, int source_width, int source_height) {
  check_source_dims(source_width, source_height);
  AugmentationRecord r;
  switch (kind) {
    case AugKind::identity: break;
    case AugKind::crop: r.crop = sample_crop(policy, rng, source_width, source_height); break;
    case AugKind::jitter:
      r.jitter_applied = true;
      r.jitter = sample_jitter(policy, rng);
      break;
    case AugKind::blur:
      r.blur_applied = true;
      r.blur_sigma = rng.uniform(policy.blur_sigma.lo, policy.blur_sigma.hi);
      break;
    case AugKind::flip: r.flipped = true; break;
    case AugKind::grayscale: r.grayscaled = true; break;
    case AugKind::all: return sample_record(policy, rng, source_width, source_height);
  }
  return r;
}

Image apply_record(const Image& image, AugmentationRecord& record,
                   const AugmentationPolicy& policy) {
  require_rgb(image);
  const double W = image.width;
  const double H = image.height;
  const double bw = record.crop[2] * W;
  const double bh = record.crop[3] * H;
  const double x0 = record.crop[0] * W - bw / 2.0;
  const double y0 = record.crop[1] * H - bh / 2.0;
  constexpr double tol = 1e-9;
  if (!(bw > 0.0 && bh > 0.0) || x0 < -tol * W || y0 < -tol * H || x0 + bw > W * (1.0 + tol) ||
      y0 + bh > H * (1.0 + tol)) {
    fail("record crop region exceeds image bounds");
  }

  Image view = resample_box(image, x0, y0, bw, bh, policy.out_size, policy.out_size);
  if (record.flipped) flip_horizontal_inplace(view);

  record.color_diff = {0.0, 0.0, 0.0};
  if (record.jitter_applied) {
    const auto before = view.channel_means();
    apply_jitter(view, record.jitter);
    const auto after = view.channel_means();
    for (int c = 0; c < 3; ++c) record.color_diff[c] = std::clamp(after[c] - before[c], -1.0, 1.0);
  }
  if (record.grayscaled) apply_grayscale(view);
  if (record.blur_applied) apply_blur(view, record.blur_sigma);
  return view;
}

OmegaVector encode_omega(const AugmentationRecord& record, const AugmentationPolicy& policy) {
  OmegaVector omega;
  auto& v = omega.values;
  for (std::size_t i = 0; i < 4; ++i) v[omega_block::crop + i] = record.crop[i];
  for (std::size_t i = 0; i < 3; ++i) {
    const double s = policy.jitter_max[i];
    v[omega_block::jitter + i] = normalize_factor(record.jitter[i], 1.0, s);
  }
  v[omega_block::jitter + 3] = normalize_factor(record.jitter[3], 0.0, policy.jitter_max[3]);
  v[omega_block::blur] =
      record.blur_applied ? std::clamp(record.blur_sigma / policy.blur_sigma.hi, 0.0, 1.0) : 0.0;
  v[omega_block::flip] = record.flipped ? 1.0 : 0.0;
  v[omega_block::grayscale] = record.grayscaled ? 1.0 : 0.0;
  for (std::size_t i = 0; i < 3; ++i) {
    v[omega_block::color_diff + i] = (record.color_diff[i] + 1.0) / 2.0;
  }
  return omega;
}

AugmentationRecord decode_omega(const OmegaVector& omega, const AugmentationPolicy& policy) {
  if (omega.layout_version != kOmegaLayoutVersion) {
    fail("omega layout version " + std::to_string(omega.layout_version) + " is not " +
         std::to_string(kOmegaLayoutVersion));
  }
  const auto& v = omega.values;
  auto unmap = [](double u, double center, double half) { return center + (u - 0.5) * 2.0 * half; };
  AugmentationRecord r;
  for (std::size_t i = 0; i < 4; ++i) r.crop[i] = v[omega_block::crop + i];
  for (std::size_t i = 0; i < 3; ++i) {
    const double s = policy.jitter_max[i];
    r.jitter[i] = unmap(v[omega_block::jitter + i], 1.0, s);
  }
  r.jitter[3] = unmap(v[omega_block::jitter + 3], 0.0, policy.jitter_max[3]);
  r.jitter_applied = r.jitter != std::array<double, 4>{1.0, 1.0, 1.0, 0.0};
  r.blur_applied = v[omega_block::blur] > 0.0;
  r.blur_sigma = r.blur_applied ? v[omega_block::blur] * policy.blur_sigma.hi : 0.0;
  r.flipped = v[omega_block::flip] >= 0.5;
  r.grayscaled = v[omega_block::grayscale] >= 0.5;
  for (std::size_t i = 0; i < 3; ++i) r.color_diff[i] = 2.0 * v[omega_block::color_diff + i] - 1.0;
  return r;
}

ViewPair make_view_pair(const Image& image, const AugmentationPolicy& policy, RandomStream& rng) {
  ViewPair pair;
  pair.record1 = sample_record(policy, rng, image.width, image.height);
  pair.record2 = sample_record(policy, rng, image.width, image.height);
  pair.view1 = apply_record(image, pair.record1, policy);
  pair.view2 = apply_record(image, pair.record2, policy);
  return pair;
}

Image center_crop_resize(const Image& image, int out_size, double fraction) {
  require_rgb(image);
  if (!(fraction > 0.0 && fraction <= 1.0)) fail("center crop fraction must lie in (0, 1]");
  const double side = fraction * std::min(image.width, image.height);
  const double x0 = (image.width - side) / 2.0;
  const double y0 = (image.height - side) / 2.0;
  return resample_box(image, x0, y0, side, side, out_size, out_size);
}

Image rotate90(const Image& image, int quarter_turns) {
  require_rgb(image);
  const int k = ((quarter_turns % 4) + 4) % 4;
  if (k == 0) return image;
  const bool swap = (k % 2) == 1;
  Image out(swap ? image.width : image.height, swap ? image.height : image.width, 3);
  const int H = image.height;
  const int W = image.width;
  for (int y = 0; y < out.height; ++y) {
    for (int x = 0; x < out.width; ++x) {
      int sy = 0, sx = 0;
      switch (k) {
        case 1: sy = x, sx = W - 1 - y; break;
        case 2: sy = H - 1 - y, sx = W - 1 - x; break;
        default: sy = H - 1 - x, sx = y; break;
      }
      for (int c = 0; c < 3; ++c) out.at(y, x, c) = image.at(sy, sx, c);
    }
  }
  return out;
}

void flip_horizontal_inplace(Image& image) {
  for (int y = 0; y < image.height; ++y) {
    for (int x = 0; x < image.width / 2; ++x) {
      for (int c = 0; c < image.channels; ++c) {
        std::swap(image.at(y, x, c), image.at(y, image.width - 1 - x, c));
      }
    }
  }
}

std::string serialize_record(const AugmentationRecord& record) {
  std::ostringstream os;
  os << std::setprecision(17);
  os << "layout_version=" << kOmegaLayoutVersion << '\n';
  os << "crop=" << join_numbers(record.crop) << '\n';
  os << "jitter_applied=" << (record.jitter_applied ? 1 : 0) << '\n';
  os << "jitter=" << join_numbers(record.jitter) << '\n';
  os << "blur_applied=" << (record.blur_applied ? 1 : 0) << '\n';
  os << "blur_sigma=" << record.blur_sigma << '\n';
  os << "flipped=" << (record.flipped ? 1 : 0) << '\n';
  os << "grayscaled=" << (record.grayscaled ? 1 : 0) << '\n';
  os << "color_diff=" << join_numbers(record.color_diff) << '\n';
  return os.str();
}

AugmentationRecord parse_record(std::string_view text) {
  std::map<std::string, std::string, std::less<>> kv;
  std::size_t pos = 0;
  while (pos < text.size()) {
    auto eol = text.find('\n', pos);
    if (eol == std::string_view::npos) eol = text.size();
    const auto line = text.substr(pos, eol - pos);
    pos = eol + 1;
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string_view::npos) fail("malformed record line '" + std::string(line) + "'");
    kv.emplace(std::string(line.substr(0, eq)), std::string(line.substr(eq + 1)));
  }
  auto get = [&](std::string_view key) -> const std::string& {
    auto it = kv.find(key);
    if (it == kv.end()) fail("record is missing key '" + std::string(key) + "'");
    return it->second;
  };
  if (std::stoi(get("layout_version")) != kOmegaLayoutVersion) {
    fail("record layout_version mismatch");
  }
  static const std::array<std::string_view, 9> known{
      "layout_version", "crop",    "jitter_applied", "jitter",    "blur_applied",
      "blur_sigma",     "flipped", "grayscaled",     "color_diff"};
  for (const auto& [k, _] : kv) {
    if (std::find(known.begin(), known.end(), k) == known.end()) {
      fail("unknown record key '" + k + "'");
    }
  }
  AugmentationRecord r;
  r.crop = parse_numbers<4>("crop", get("crop"));
  r.jitter_applied = parse_flag("jitter_applied", get("jitter_applied"));
  r.jitter = parse_numbers<4>("jitter", get("jitter"));
  r.blur_applied = parse_flag("blur_applied", get("blur_applied"));
  r.blur_sigma = std::stod(get("blur_sigma"));
  r.flipped = parse_flag("flipped", get("flipped"));
  r.grayscaled = parse_flag("grayscaled", get("grayscaled"));
  r.color_diff = parse_numbers<3>("color_diff", get("color_diff"));
  r.validate();
  return r;
}

void write_omega_batch(const std::filesystem::path& path, std::span<const OmegaVector> omegas) {
  static_assert(std::endian::native == std::endian::little || std::endian::native == std::endian::big);
  std::vector<std::uint32_t> words;
  words.reserve(omegas.size() * kOmegaDim);
  for (const auto& omega : omegas) {
    if (omega.layout_version != kOmegaLayoutVersion) fail("omega layout_version mismatch");
    for (double v : omega.values) {
      auto w = std::bit_cast<std::uint32_t>(static_cast<float>(v));
      if constexpr (std::endian::native == std::endian::big) w = __builtin_bswap32(w);
      words.push_back(w);
    }
  }
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) fail("cannot open omega batch file '" + path.string() + "' for writing");
  out.write(reinterpret_cast<const char*>(words.data()),
            static_cast<std::streamsize>(words.size() * sizeof(std::uint32_t)));
  if (!out) fail("failed writing omega batch file '" + path.string() + "'");
}

std::vector<OmegaVector> read_omega_batch(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail("cannot open omega batch file '" + path.string() + "'");
  std::vector<char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  constexpr std::size_t stride = kOmegaDim * sizeof(std::uint32_t);
  if (bytes.size() % stride != 0) {
    fail("omega batch file '" + path.string() + "' size is not a multiple of 56 bytes");
  }
  std::vector<OmegaVector> out(bytes.size() / stride);
  for (std::size_t i = 0; i < out.size(); ++i) {
    for (std::size_t j = 0; j < kOmegaDim; ++j) {
      std::uint32_t w;
      std::memcpy(&w, bytes.data() + i * stride + j * 4, 4);
      if constexpr (std::endian::native == std::endian::big) w = __builtin_bswap32(w);
      out[i].values[j] = std::bit_cast<float>(w);
    }
  }
  return out;
}

}  // namespace cassle::aug
