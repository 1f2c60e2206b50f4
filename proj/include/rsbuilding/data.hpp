#pragma once

// Synthetic dual-temporal building scenes, photometric and geometric
// augmentation, and the on-disk dataset (PNG files plus a JSON-lines manifest).

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "rsbuilding/config.hpp"
#include "rsbuilding/image.hpp"
#include "rsbuilding/ops.hpp"
#include "rsbuilding/random.hpp"
#include "rsbuilding/regime.hpp"

namespace rsb {

struct IntRange {
  std::int64_t lo = 0, hi = 0;  // inclusive
  bool operator==(const IntRange&) const = default;
};

struct PhotometricRanges {
  double brightness_delta = 32.0 / 255.0;  // shift drawn from [-delta, delta]
  double contrast_lo = 0.5, contrast_hi = 1.5;
  double saturation_lo = 0.5, saturation_hi = 1.5;
  double hue_delta_deg = 18.0;

  // Ranges that leave every image unchanged.
  static PhotometricRanges identity() { return {0.0, 1.0, 1.0, 1.0, 1.0, 0.0}; }

  void validate() const {
    auto fail = [](const std::string& m) { throw ConfigError("photometric ranges: " + m); };
    if (!(brightness_delta >= 0) || !(hue_delta_deg >= 0)) fail("deltas must be non-negative");
    if (!(contrast_lo > 0 && contrast_lo <= contrast_hi)) fail("contrast range must be positive and ordered");
    if (!(saturation_lo >= 0 && saturation_lo <= saturation_hi)) fail("saturation range must be ordered");
  }
  bool operator==(const PhotometricRanges&) const = default;
};

struct SceneSpec {
  std::size_t image_size = 64;
  IntRange building_count{3, 6};
  IntRange building_size{8, 20};  // side length in pixels
  IntRange change_add{1, 2};
  IntRange change_remove{0, 1};
  double background_noise_level = 0.02;
  PhotometricRanges photometric;

  void validate() const {
    auto fail = [](const std::string& m) { throw ConfigError("scene spec: " + m); };
    for (const auto& [name, r] : {std::pair{"building_count", building_count}, {"building_size", building_size},
                                   {"change_add", change_add}, {"change_remove", change_remove}}) {
      if (r.lo < 0 || r.lo > r.hi) fail(std::string(name) + " must be a non-empty non-negative range");
    }
    if (image_size < 8) fail("image_size must be at least 8");
    if (building_size.lo < 4) fail("building sizes must be at least 4 px");
    if (building_size.hi + 2 > static_cast<std::int64_t>(image_size)) {
      fail("building_size " + std::to_string(building_size.hi) + " does not fit in image_size " +
           std::to_string(image_size));
    }
    if (!(background_noise_level >= 0)) fail("background_noise_level must be non-negative");
    photometric.validate();
  }
  bool operator==(const SceneSpec&) const = default;
};

struct SamplePair {
  std::string id;
  Regime regime = Regime::Full;
  Image i1, i2;
  std::optional<Mask> m1, m2, m_cd;
};

struct Rect {
  std::size_t y = 0, x = 0, h = 0, w = 0;
  bool operator==(const Rect&) const = default;
};

// Building footprints before and after the change.
struct SceneLayout {
  std::vector<Rect> before, after;
};

namespace detail {

// Rectangles may not overlap or touch: a one-pixel gap keeps borders distinct.
inline bool rects_clear(const Rect& a, const Rect& b) {
  return a.x + a.w + 1 <= b.x || b.x + b.w + 1 <= a.x || a.y + a.h + 1 <= b.y || b.y + b.h + 1 <= a.y;
}

inline std::optional<Rect> place_rect(RandomSource& rng, const SceneSpec& spec, const std::vector<Rect>& taken) {
  constexpr int kAttempts = 200;
  for (int a = 0; a < kAttempts; ++a) {
    Rect r;
    r.h = static_cast<std::size_t>(rng.uniform_int(spec.building_size.lo, spec.building_size.hi));
    r.w = static_cast<std::size_t>(rng.uniform_int(spec.building_size.lo, spec.building_size.hi));
    r.y = static_cast<std::size_t>(rng.uniform_int(1, static_cast<std::int64_t>(spec.image_size - r.h - 1)));
    r.x = static_cast<std::size_t>(rng.uniform_int(1, static_cast<std::int64_t>(spec.image_size - r.w - 1)));
    if (std::all_of(taken.begin(), taken.end(), [&](const Rect& t) { return rects_clear(r, t); })) return r;
  }
  return std::nullopt;
}

inline Mask footprint(std::size_t size, const std::vector<Rect>& rects) {
  Mask m(size, size);
  for (const auto& r : rects)
    for (std::size_t y = r.y; y < r.y + r.h; ++y)
      for (std::size_t x = r.x; x < r.x + r.w; ++x) m.at(y, x) = 1;
  return m;
}

}  // namespace detail

// Draws the footprints. The scene may hold fewer buildings than drawn when
// rectangles cannot be placed without touching.
inline SceneLayout generate_layout(std::uint64_t seed, const SceneSpec& spec) {
  spec.validate();
  RandomSource rng = RandomSource(seed).fork(1);
  SceneLayout layout;
  std::vector<Rect> taken;
  const auto count = rng.uniform_int(spec.building_count.lo, spec.building_count.hi);
  for (std::int64_t i = 0; i < count; ++i) {
    if (auto r = detail::place_rect(rng, spec, taken)) taken.push_back(*r);
  }
  layout.before = taken;

  const auto remove = std::min<std::int64_t>(rng.uniform_int(spec.change_remove.lo, spec.change_remove.hi),
                                             static_cast<std::int64_t>(layout.before.size()));
  std::vector<std::size_t> order(layout.before.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  rng.shuffle(std::span<std::size_t>(order));
  std::vector<bool> removed(layout.before.size(), false);
  for (std::int64_t i = 0; i < remove; ++i) removed[order[static_cast<std::size_t>(i)]] = true;
  for (std::size_t i = 0; i < layout.before.size(); ++i) {
    if (!removed[i]) layout.after.push_back(layout.before[i]);
  }
  // New buildings avoid every old footprint, so added and removed areas never
  // overlap.
  const auto add = rng.uniform_int(spec.change_add.lo, spec.change_add.hi);
  for (std::int64_t i = 0; i < add; ++i) {
    if (auto r = detail::place_rect(rng, spec, taken)) {
      taken.push_back(*r);
      layout.after.push_back(*r);
    }
  }
  return layout;
}

namespace detail {

struct Roof {
  Rect rect;
  std::array<float, 3> color;
};

inline std::array<float, 3> roof_color(RandomSource& rng) {
  // Bright grey to reddish roofs, clearly above the vegetation background.
  const double base = rng.uniform(0.62, 0.92);
  const double tint = rng.uniform(-0.12, 0.12);
  return {static_cast<float>(base + std::max(tint, 0.0)), static_cast<float>(base - std::abs(tint) * 0.5),
          static_cast<float>(base - std::max(tint, 0.0))};
}

inline Image render(std::size_t size, const std::array<double, 5>& bg, const std::vector<Roof>& roofs,
                    double noise, RandomSource& noise_rng) {
  Image img(size, size);
  const double base[3] = {bg[0], bg[1], bg[2]};
  for (std::size_t y = 0; y < size; ++y) {
    for (std::size_t x = 0; x < size; ++x) {
      const double g = bg[3] * (double(x) / double(size) - 0.5) + bg[4] * (double(y) / double(size) - 0.5);
      for (std::size_t c = 0; c < 3; ++c) img.at(y, x, c) = static_cast<float>(base[c] + g);
    }
  }
  for (const auto& roof : roofs) {
    const Rect& r = roof.rect;
    for (std::size_t y = r.y; y < r.y + r.h; ++y) {
      for (std::size_t x = r.x; x < r.x + r.w; ++x) {
        const bool border = y == r.y || x == r.x || y + 1 == r.y + r.h || x + 1 == r.x + r.w;
        for (std::size_t c = 0; c < 3; ++c) img.at(y, x, c) = roof.color[c] * (border ? 0.6f : 1.0f);
      }
    }
  }
  for (auto& p : img.pixels) p = std::clamp(static_cast<float>(p + noise * noise_rng.normal()), 0.0f, 1.0f);
  return img;
}

}  // namespace detail

// Full-regime pair: I2 is the same area with some buildings added and some
// removed. Deterministic in (seed, spec).
inline SamplePair generate_scene(std::uint64_t seed, const SceneSpec& spec) {
  const SceneLayout layout = generate_layout(seed, spec);
  RandomSource rng = RandomSource(seed).fork(2);
  const std::array<double, 5> bg = {rng.uniform(0.22, 0.36), rng.uniform(0.30, 0.45), rng.uniform(0.18, 0.30),
                                    rng.uniform(-0.12, 0.12), rng.uniform(-0.12, 0.12)};
  std::vector<detail::Roof> roofs1, roofs2;
  for (const auto& r : layout.before) roofs1.push_back({r, detail::roof_color(rng)});
  for (const auto& r : layout.after) {
    auto same = std::find_if(roofs1.begin(), roofs1.end(), [&](const detail::Roof& o) { return o.rect == r; });
    roofs2.push_back(same != roofs1.end() ? *same : detail::Roof{r, detail::roof_color(rng)});
  }
  RandomSource noise1 = RandomSource(seed).fork(3), noise2 = RandomSource(seed).fork(4);
  SamplePair p;
  p.id = "scene-" + std::to_string(seed);
  p.regime = Regime::Full;
  p.i1 = detail::render(spec.image_size, bg, roofs1, spec.background_noise_level, noise1);
  p.i2 = detail::render(spec.image_size, bg, roofs2, spec.background_noise_level, noise2);
  p.m1 = detail::footprint(spec.image_size, layout.before);
  p.m2 = detail::footprint(spec.image_size, layout.after);
  p.m_cd = mask_xor(*p.m1, *p.m2);
  return p;
}

struct PhotometricParams {
  double brightness = 0.0, contrast = 1.0, saturation = 1.0, hue_deg = 0.0;
  std::array<int, 4> order = {0, 1, 2, 3};  // 0 brightness, 1 contrast, 2 saturation, 3 hue
};

inline PhotometricParams draw_photometric(RandomSource& rng, const PhotometricRanges& r) {
  PhotometricParams p;
  p.brightness = rng.uniform(-r.brightness_delta, r.brightness_delta);
  p.contrast = rng.uniform(r.contrast_lo, r.contrast_hi);
  p.saturation = rng.uniform(r.saturation_lo, r.saturation_hi);
  p.hue_deg = rng.uniform(-r.hue_delta_deg, r.hue_delta_deg);
  rng.shuffle(std::span<int>(p.order));
  return p;
}

// Applies the four operations in p.order and clamps to [0, 1]. Operations whose
// parameter is the identity are skipped, so degenerate ranges are bit-exact.
inline Image apply_photometric(const Image& image, const PhotometricParams& p) {
  Image out = image;
  const std::size_t n = out.height * out.width;
  auto gray = [&](std::size_t i) {
    const float* px = &out.pixels[i * 3];
    return 0.299f * px[0] + 0.587f * px[1] + 0.114f * px[2];
  };
  for (int op : p.order) {
    switch (op) {
      case 0:
        if (p.brightness == 0.0) break;
        for (auto& v : out.pixels) v += static_cast<float>(p.brightness);
        break;
      case 1: {
        if (p.contrast == 1.0) break;
        double mean = 0;
        for (std::size_t i = 0; i < n; ++i) mean += gray(i);
        const float m = static_cast<float>(mean / static_cast<double>(std::max<std::size_t>(n, 1)));
        for (auto& v : out.pixels) v = m + (v - m) * static_cast<float>(p.contrast);
        break;
      }
      case 2:
        if (p.saturation == 1.0) break;
        for (std::size_t i = 0; i < n; ++i) {
          const float g = gray(i);
          for (std::size_t c = 0; c < 3; ++c) {
            float& v = out.pixels[i * 3 + c];
            v = g + (v - g) * static_cast<float>(p.saturation);
          }
        }
        break;
      case 3: {
        if (p.hue_deg == 0.0) break;
        // Luminance-preserving rotation about the grey axis.
        const double th = p.hue_deg * std::numbers::pi / 180.0;
        const double cs = std::cos(th), sn = std::sin(th);
        const float m[9] = {
            float(0.213 + cs * 0.787 - sn * 0.213), float(0.715 - cs * 0.715 - sn * 0.715),
            float(0.072 - cs * 0.072 + sn * 0.928), float(0.213 - cs * 0.213 + sn * 0.143),
            float(0.715 + cs * 0.285 + sn * 0.140), float(0.072 - cs * 0.072 - sn * 0.283),
            float(0.213 - cs * 0.213 - sn * 0.787), float(0.715 - cs * 0.715 + sn * 0.715),
            float(0.072 + cs * 0.928 + sn * 0.072)};
        for (std::size_t i = 0; i < n; ++i) {
          float* px = &out.pixels[i * 3];
          const float r = px[0], g = px[1], b = px[2];
          px[0] = m[0] * r + m[1] * g + m[2] * b;
          px[1] = m[3] * r + m[4] * g + m[5] * b;
          px[2] = m[6] * r + m[7] * g + m[8] * b;
        }
        break;
      }
      default: break;
    }
  }
  for (auto& v : out.pixels) v = std::clamp(v, 0.0f, 1.0f);
  return out;
}

inline Image photometric_distort(const Image& image, RandomSource& rng, const PhotometricRanges& ranges) {
  return apply_photometric(image, draw_photometric(rng, ranges));
}

// A single annotated image becomes a no-change pair.
inline SamplePair seg_to_pair(const Image& image, const Mask& mask, RandomSource& rng,
                              const PhotometricRanges& ranges, std::string id = "seg") {
  if (mask.height != image.height || mask.width != image.width) throw ShapeError("seg_to_pair: mask size differs");
  for (auto v : mask.values) {
    if (v > 1) throw DataError("seg_to_pair: mask is not binary");
  }
  SamplePair p;
  p.id = std::move(id);
  p.regime = Regime::SegOnly;
  p.i1 = image;
  p.i2 = photometric_distort(image, rng, ranges);
  p.m1 = mask;
  p.m2 = mask;
  p.m_cd = Mask(mask.height, mask.width);
  return p;
}

// Restricts a Full pair to its change annotation.
inline SamplePair to_change_only(SamplePair p) {
  if (!p.m_cd) throw DataError("to_change_only: sample '" + p.id + "' has no change mask");
  p.regime = Regime::ChangeOnly;
  p.m1.reset();
  p.m2.reset();
  return p;
}

struct AugmentConfig {
  double p_hflip = 0.5;
  double p_vflip = 0.5;
  double p_crop = 0.5;
  std::size_t crop_size = 48;
  double p_photometric = 0.5;  // drawn separately for each image
  double p_exchange = 0.5;
  PhotometricRanges photometric;

  static AugmentConfig none() {
    AugmentConfig c;
    c.p_hflip = c.p_vflip = c.p_crop = c.p_photometric = c.p_exchange = 0.0;
    return c;
  }

  void validate() const {
    for (double p : {p_hflip, p_vflip, p_crop, p_photometric, p_exchange}) {
      if (!(p >= 0.0 && p <= 1.0)) throw ConfigError("augment: probabilities must lie in [0, 1]");
    }
    if (crop_size == 0) throw ConfigError("augment: crop_size must be positive");
    photometric.validate();
  }
  bool operator==(const AugmentConfig&) const = default;
};

namespace detail {

template <typename Fn>
void for_each_mask(SamplePair& p, Fn fn) {
  for (auto* m : {&p.m1, &p.m2, &p.m_cd})
    if (*m) fn(**m);
}

inline Image flip_image(const Image& in, bool horizontal) {
  Image out(in.height, in.width);
  for (std::size_t y = 0; y < in.height; ++y)
    for (std::size_t x = 0; x < in.width; ++x) {
      const std::size_t sy = horizontal ? y : in.height - 1 - y, sx = horizontal ? in.width - 1 - x : x;
      for (std::size_t c = 0; c < 3; ++c) out.at(y, x, c) = in.at(sy, sx, c);
    }
  return out;
}

inline Mask flip_mask(const Mask& in, bool horizontal) {
  Mask out(in.height, in.width);
  for (std::size_t y = 0; y < in.height; ++y)
    for (std::size_t x = 0; x < in.width; ++x)
      out.at(y, x) = in.at(horizontal ? y : in.height - 1 - y, horizontal ? in.width - 1 - x : x);
  return out;
}

inline Image crop_resize_image(const Image& in, std::size_t y0, std::size_t x0, std::size_t size) {
  std::vector<float> crop(size * size * 3);
  for (std::size_t y = 0; y < size; ++y)
    for (std::size_t x = 0; x < size; ++x)
      for (std::size_t c = 0; c < 3; ++c) crop[(y * size + x) * 3 + c] = in.at(y0 + y, x0 + x, c);
  NoGradGuard no_grad;
  const auto resized = ops::bilinear_resize(Tensor<float>(Shape{size, size, 3}, std::move(crop)), in.height, in.width);
  Image out(in.height, in.width);
  std::copy(resized.data().begin(), resized.data().end(), out.pixels.begin());
  return out;
}

// Nearest neighbour keeps masks binary.
inline Mask crop_resize_mask(const Mask& in, std::size_t y0, std::size_t x0, std::size_t size) {
  Mask out(in.height, in.width);
  for (std::size_t y = 0; y < in.height; ++y) {
    const std::size_t sy = std::min(size - 1, (2 * y + 1) * size / (2 * in.height));
    for (std::size_t x = 0; x < in.width; ++x) {
      const std::size_t sx = std::min(size - 1, (2 * x + 1) * size / (2 * in.width));
      out.at(y, x) = in.at(y0 + sy, x0 + sx);
    }
  }
  return out;
}

}  // namespace detail

inline SamplePair temporal_exchange(SamplePair p) {
  std::swap(p.i1, p.i2);
  std::swap(p.m1, p.m2);
  return p;
}

// Random flips, crop-and-resize, per-image photometric distortion and
// temporal exchange. Every decision is drawn in a fixed order, so the result
// is a pure function of the generator state.
inline SamplePair augment(SamplePair p, RandomSource& rng, const AugmentConfig& cfg) {
  cfg.validate();
  const std::size_t h = p.i1.height, w = p.i1.width;
  if (cfg.crop_size > h || cfg.crop_size > w) {
    throw ConfigError("augment: crop_size " + std::to_string(cfg.crop_size) + " exceeds image size " +
                      std::to_string(h) + "x" + std::to_string(w));
  }
  const bool hflip = rng.bernoulli(cfg.p_hflip);
  const bool vflip = rng.bernoulli(cfg.p_vflip);
  const bool crop = rng.bernoulli(cfg.p_crop);
  const auto cy = static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(h - cfg.crop_size)));
  const auto cx = static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(w - cfg.crop_size)));
  const bool photo1 = rng.bernoulli(cfg.p_photometric);
  const bool photo2 = rng.bernoulli(cfg.p_photometric);
  const bool exchange = rng.bernoulli(cfg.p_exchange);

  for (const auto& [apply, horizontal] : {std::pair{hflip, true}, std::pair{vflip, false}}) {
    if (!apply) continue;
    p.i1 = detail::flip_image(p.i1, horizontal);
    p.i2 = detail::flip_image(p.i2, horizontal);
    detail::for_each_mask(p, [&](Mask& m) { m = detail::flip_mask(m, horizontal); });
  }
  if (crop) {
    p.i1 = detail::crop_resize_image(p.i1, cy, cx, cfg.crop_size);
    p.i2 = detail::crop_resize_image(p.i2, cy, cx, cfg.crop_size);
    detail::for_each_mask(p, [&](Mask& m) { m = detail::crop_resize_mask(m, cy, cx, cfg.crop_size); });
  }
  if (photo1) p.i1 = photometric_distort(p.i1, rng, cfg.photometric);
  if (photo2) p.i2 = photometric_distort(p.i2, rng, cfg.photometric);
  if (exchange) p = temporal_exchange(std::move(p));
  return p;
}

// ---- on-disk dataset ----

struct ManifestRecord {
  std::string id;
  std::string i1, i2;
  std::optional<std::string> m1, m2, m_cd;  // relative to the dataset root
  Regime regime = Regime::Full;
};

struct Manifest {
  std::filesystem::path root;
  std::vector<ManifestRecord> records;
};

namespace detail {

inline void check_regime_consistency(const ManifestRecord& r) {
  auto fail = [&](const std::string& what) {
    throw DataError("record '" + r.id + "': regime " + to_string(r.regime) + " " + what);
  };
  switch (r.regime) {
    case Regime::Full:
      if (!r.m1 || !r.m2 || !r.m_cd) fail("requires m1, m2 and mcd");
      break;
    case Regime::SegOnly:
      if (!r.m1 || !r.m2) fail("requires m1 and m2");
      break;
    case Regime::ChangeOnly:
      if (!r.m_cd) fail("requires mcd");
      if (r.m1 || r.m2) fail("must not carry building masks");
      break;
  }
}

inline nlohmann::json optional_path(const std::optional<std::string>& p) {
  return p ? nlohmann::json(*p) : nlohmann::json(nullptr);
}

}  // namespace detail

inline nlohmann::json to_json(const ManifestRecord& r) {
  return {{"id", r.id},
          {"i1", r.i1},
          {"i2", r.i2},
          {"m1", detail::optional_path(r.m1)},
          {"m2", detail::optional_path(r.m2)},
          {"mcd", detail::optional_path(r.m_cd)},
          {"regime", to_string(r.regime)}};
}

// Writes the pair's PNGs under root/images and root/masks.
inline ManifestRecord write_sample(const SamplePair& p, const std::filesystem::path& root) {
  namespace fs = std::filesystem;
  fs::create_directories(root / "images");
  fs::create_directories(root / "masks");
  ManifestRecord r;
  r.id = p.id;
  r.regime = p.regime;
  r.i1 = "images/" + p.id + "_i1.png";
  r.i2 = "images/" + p.id + "_i2.png";
  write_png_rgb(root / r.i1, p.i1);
  write_png_rgb(root / r.i2, p.i2);
  auto put = [&](const std::optional<Mask>& m, const char* suffix) -> std::optional<std::string> {
    if (!m) return std::nullopt;
    const std::string rel = "masks/" + p.id + "_" + suffix + ".png";
    write_png_mask(root / rel, *m);
    return rel;
  };
  r.m1 = put(p.m1, "m1");
  r.m2 = put(p.m2, "m2");
  r.m_cd = put(p.m_cd, "mcd");
  detail::check_regime_consistency(r);
  return r;
}

inline void write_manifest(const std::filesystem::path& root, const std::vector<ManifestRecord>& records) {
  std::filesystem::create_directories(root);
  std::ofstream out(root / "manifest.jsonl");
  if (!out) throw DataError("cannot write manifest in '" + root.string() + "'");
  for (const auto& r : records) out << to_json(r).dump() << '\n';
}

inline void write_dataset(const std::filesystem::path& root, const std::vector<SamplePair>& samples) {
  std::vector<ManifestRecord> records;
  for (const auto& s : samples) records.push_back(write_sample(s, root));
  write_manifest(root, records);
}

// Accepts either the dataset root or the manifest file itself.
inline Manifest load_manifest(const std::filesystem::path& path) {
  namespace fs = std::filesystem;
  const fs::path file = fs::is_directory(path) ? path / "manifest.jsonl" : path;
  std::ifstream in(file);
  if (!in) throw DataError("cannot open manifest '" + file.string() + "'");
  Manifest m;
  m.root = file.parent_path();
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const std::string where = file.string() + ":" + std::to_string(line_no);
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw DataError(where + ": malformed JSON record: " + e.what());
    }
    ManifestRecord r;
    try {
      r.id = j.at("id").get<std::string>();
      r.i1 = j.at("i1").get<std::string>();
      r.i2 = j.at("i2").get<std::string>();
      auto opt = [&](const char* key) -> std::optional<std::string> {
        if (!j.contains(key) || j.at(key).is_null()) return std::nullopt;
        return j.at(key).get<std::string>();
      };
      r.m1 = opt("m1");
      r.m2 = opt("m2");
      r.m_cd = opt("mcd");
      r.regime = parse_regime(j.at("regime").get<std::string>());
    } catch (const nlohmann::json::exception& e) {
      throw DataError(where + ": invalid record: " + e.what());
    } catch (const DataError& e) {
      throw DataError(where + ": " + e.what());
    }
    detail::check_regime_consistency(r);
    for (const auto* rel : {&r.i1, &r.i2}) {
      if (!fs::exists(m.root / *rel)) throw DataError("record '" + r.id + "': missing file '" + *rel + "'");
    }
    for (const auto* rel : {&r.m1, &r.m2, &r.m_cd}) {
      if (*rel && !fs::exists(m.root / **rel)) throw DataError("record '" + r.id + "': missing file '" + **rel + "'");
    }
    for (const auto& other : m.records) {
      if (other.id == r.id) throw DataError(where + ": duplicate id '" + r.id + "'");
    }
    m.records.push_back(std::move(r));
  }
  return m;
}

inline SamplePair load_sample(const Manifest& m, std::size_t index) {
  const ManifestRecord& r = m.records.at(index);
  auto ctx = [&](auto fn) {
    try {
      return fn();
    } catch (const DataError& e) {
      throw DataError("record '" + r.id + "': " + e.what());
    }
  };
  SamplePair p;
  p.id = r.id;
  p.regime = r.regime;
  p.i1 = ctx([&] { return read_png_rgb(m.root / r.i1); });
  p.i2 = ctx([&] { return read_png_rgb(m.root / r.i2); });
  auto load_mask = [&](const std::optional<std::string>& rel) -> std::optional<Mask> {
    if (!rel) return std::nullopt;
    return ctx([&] { return read_png_mask(m.root / *rel); });
  };
  p.m1 = load_mask(r.m1);
  p.m2 = load_mask(r.m2);
  p.m_cd = load_mask(r.m_cd);
  const std::size_t h = p.i1.height, w = p.i1.width;
  bool ok = p.i2.height == h && p.i2.width == w;
  for (const auto* mk : {&p.m1, &p.m2, &p.m_cd}) {
    if (*mk) ok = ok && (*mk)->height == h && (*mk)->width == w;
  }
  if (!ok) throw DataError("record '" + r.id + "': images and masks differ in size");
  return p;
}

inline std::vector<SamplePair> load_dataset(const Manifest& m) {
  std::vector<SamplePair> out;
  out.reserve(m.records.size());
  for (std::size_t i = 0; i < m.records.size(); ++i) out.push_back(load_sample(m, i));
  return out;
}

// Index batches over n samples; the last batch may be short.
inline std::vector<std::vector<std::size_t>> make_batches(std::size_t n, std::size_t batch_size,
                                                          std::uint64_t shuffle_seed, bool shuffle = true) {
  if (batch_size == 0) throw ConfigError("batch size must be positive");
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  if (shuffle) {
    RandomSource rng(shuffle_seed);
    rng.shuffle(std::span<std::size_t>(order));
  }
  std::vector<std::vector<std::size_t>> batches;
  for (std::size_t i = 0; i < n; i += batch_size) {
    batches.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(i),
                         order.begin() + static_cast<std::ptrdiff_t>(std::min(n, i + batch_size)));
  }
  return batches;
}

// ---- JSON ----

inline void to_json(nlohmann::json& j, const IntRange& r) { j = nlohmann::json::array({r.lo, r.hi}); }

inline void from_json(const nlohmann::json& j, IntRange& r) {
  if (!j.is_array() || j.size() != 2) throw ConfigError("range must be a [lo, hi] array");
  r.lo = j[0].get<std::int64_t>();
  r.hi = j[1].get<std::int64_t>();
}

inline void to_json(nlohmann::json& j, const PhotometricRanges& r) {
  j = {{"brightness_delta", r.brightness_delta},
       {"contrast", {r.contrast_lo, r.contrast_hi}},
       {"saturation", {r.saturation_lo, r.saturation_hi}},
       {"hue_delta_deg", r.hue_delta_deg}};
}

inline void from_json_fields(const nlohmann::json& j, PhotometricRanges& r) {
  auto pair = [&](const char* key, double& lo, double& hi) {
    const auto& a = j.at(key);
    if (!a.is_array() || a.size() != 2) throw ConfigError(std::string("photometric.") + key + " must be [lo, hi]");
    lo = a[0].get<double>();
    hi = a[1].get<double>();
  };
  j.at("brightness_delta").get_to(r.brightness_delta);
  pair("contrast", r.contrast_lo, r.contrast_hi);
  pair("saturation", r.saturation_lo, r.saturation_hi);
  j.at("hue_delta_deg").get_to(r.hue_delta_deg);
}

inline void to_json(nlohmann::json& j, const SceneSpec& s) {
  j = {{"image_size", s.image_size},
       {"building_count", s.building_count},
       {"building_size", s.building_size},
       {"change_add", s.change_add},
       {"change_remove", s.change_remove},
       {"background_noise_level", s.background_noise_level},
       {"photometric", s.photometric}};
}

inline void from_json_fields(const nlohmann::json& j, SceneSpec& s) {
  j.at("image_size").get_to(s.image_size);
  j.at("building_count").get_to(s.building_count);
  j.at("building_size").get_to(s.building_size);
  j.at("change_add").get_to(s.change_add);
  j.at("change_remove").get_to(s.change_remove);
  j.at("background_noise_level").get_to(s.background_noise_level);
  detail::read_fields(j.at("photometric"), s.photometric, "photometric");
}

inline void to_json(nlohmann::json& j, const AugmentConfig& a) {
  j = {{"p_hflip", a.p_hflip},       {"p_vflip", a.p_vflip},         {"p_crop", a.p_crop},
       {"crop_size", a.crop_size},   {"p_photometric", a.p_photometric}, {"p_exchange", a.p_exchange},
       {"photometric", a.photometric}};
}

inline void from_json_fields(const nlohmann::json& j, AugmentConfig& a) {
  j.at("p_hflip").get_to(a.p_hflip);
  j.at("p_vflip").get_to(a.p_vflip);
  j.at("p_crop").get_to(a.p_crop);
  j.at("crop_size").get_to(a.crop_size);
  j.at("p_photometric").get_to(a.p_photometric);
  j.at("p_exchange").get_to(a.p_exchange);
  detail::read_fields(j.at("photometric"), a.photometric, "photometric");
}

}  // namespace rsb
