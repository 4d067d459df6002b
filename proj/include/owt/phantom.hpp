#pragma once

// Procedural labeled phantoms: g disjoint elliptical regions with
// group-specific value-noise textures over a textured background, plus an
// optional bright circular lesion inside one region.
//
// OWTD v1 container (little-endian):
//   "OWTD" | version u32 = 1 | count u32 | H u16 | W u16 | g u8 | pad u8 |
//   per sample: H*W float32 image | H*W u8 labels | u8 lesion bits
//   (bit k set = lesion inside group k+1)

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include "owt/binary_io.hpp"
#include "owt/errors.hpp"
#include "owt/image.hpp"
#include "owt/random.hpp"

namespace owt {

struct PhantomSpec {
  std::size_t height = 32;
  std::size_t width = 32;
  std::size_t groups = 3;
  std::uint64_t seed = 42;
  std::size_t count = 16;
  // Mean intensity per token group (background first). Empty = evenly spaced defaults.
  std::vector<double> base_intensity;
  double intensity_jitter = 0.06;  // per-sample shift, uniform in +-jitter
  double noise_amplitude = 0.04;   // texture amplitude, value noise in [-1, 1]
  double lesion_probability = 0.0;
  double lesion_intensity = 0.3;
  double lesion_radius = 2.0;
  std::size_t lesion_min_area = 9;
  std::size_t min_area = 40;
  std::size_t max_area = 220;

  std::vector<double> intensities() const {
    if (!base_intensity.empty()) return base_intensity;
    std::vector<double> out{0.06};
    for (std::size_t k = 1; k <= groups; ++k) {
      out.push_back(groups == 1 ? 0.5 : 0.3 + 0.5 * static_cast<double>(k - 1) / static_cast<double>(groups - 1));
    }
    return out;
  }

  void validate() const {
    if (groups == 0 || groups > 8) throw SpecError("phantoms support 1..8 organ groups");
    if (height == 0 || width == 0 || height > 0xFFFF || width > 0xFFFF) throw SpecError("bad canvas size");
    if (min_area == 0 || min_area > max_area) throw SpecError("region area bounds must satisfy 0 < min <= max");
    if (!base_intensity.empty() && base_intensity.size() != groups + 1) {
      throw SpecError("base_intensity needs one entry per token group (" + std::to_string(groups + 1) + ")");
    }
    if (lesion_probability < 0 || lesion_probability > 1) throw SpecError("lesion_probability outside [0, 1]");
    // Leave at least 40% of the canvas as background so rejection sampling terminates.
    if (static_cast<double>(groups * min_area) > 0.6 * static_cast<double>(height * width)) {
      throw SpecError("canvas " + std::to_string(height) + "x" + std::to_string(width) + " too small for " +
                      std::to_string(groups) + " regions of at least " + std::to_string(min_area) + " pixels");
    }
  }
};

struct PhantomSample {
  Image image;
  LabelMap labels;
  std::uint8_t lesion_bits = 0;

  bool has_lesion(std::size_t group) const {
    return group >= 1 && group <= 8 && ((lesion_bits >> (group - 1)) & 1u);
  }
  bool operator==(const PhantomSample&) const = default;
};

namespace detail {

// Bilinear value noise with lattice spacing `cell`, values in [-1, 1].
inline std::vector<double> value_noise(std::size_t h, std::size_t w, double cell, Rng& rng) {
  const std::size_t gh = static_cast<std::size_t>(std::ceil(static_cast<double>(h) / cell)) + 2;
  const std::size_t gw = static_cast<std::size_t>(std::ceil(static_cast<double>(w) / cell)) + 2;
  std::vector<double> lattice(gh * gw);
  for (auto& v : lattice) v = 2.0 * uniform01(rng) - 1.0;
  std::vector<double> out(h * w);
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      const double fy = static_cast<double>(y) / cell, fx = static_cast<double>(x) / cell;
      const auto iy = static_cast<std::size_t>(fy), ix = static_cast<std::size_t>(fx);
      const double ty = fy - static_cast<double>(iy), tx = fx - static_cast<double>(ix);
      const double a = lattice[iy * gw + ix], b = lattice[iy * gw + ix + 1];
      const double c = lattice[(iy + 1) * gw + ix], d = lattice[(iy + 1) * gw + ix + 1];
      out[y * w + x] = (a * (1 - tx) + b * tx) * (1 - ty) + (c * (1 - tx) + d * tx) * ty;
    }
  }
  return out;
}

inline bool place_regions(const PhantomSpec& spec, Rng& rng, LabelMap& labels) {
  const std::size_t h = spec.height, w = spec.width;
  std::fill(labels.begin(), labels.end(), 0);
  const double r_min = std::sqrt(static_cast<double>(spec.min_area) / std::numbers::pi);
  const double r_max = std::sqrt(static_cast<double>(spec.max_area) / std::numbers::pi);
  std::vector<std::size_t> pixels;
  for (std::size_t k = 1; k <= spec.groups; ++k) {
    bool placed = false;
    for (int attempt = 0; attempt < 200 && !placed; ++attempt) {
      const double ra = r_min + (r_max - r_min) * uniform01(rng);
      const double aspect = 0.6 + 0.8 * uniform01(rng);
      const double rb = std::clamp(ra * aspect, r_min * 0.6, r_max * 1.2);
      const double angle = std::numbers::pi * uniform01(rng);
      const double cy = static_cast<double>(h) * (0.1 + 0.8 * uniform01(rng));
      const double cx = static_cast<double>(w) * (0.1 + 0.8 * uniform01(rng));
      const double ca = std::cos(angle), sa = std::sin(angle);
      pixels.clear();
      bool overlap = false;
      for (std::size_t y = 0; y < h && !overlap; ++y) {
        for (std::size_t x = 0; x < w; ++x) {
          const double dy = static_cast<double>(y) + 0.5 - cy, dx = static_cast<double>(x) + 0.5 - cx;
          const double u = (dx * ca + dy * sa) / ra, v = (-dx * sa + dy * ca) / rb;
          if (u * u + v * v > 1.0) continue;
          if (labels[y * w + x] != 0) {
            overlap = true;
            break;
          }
          pixels.push_back(y * w + x);
        }
      }
      if (overlap || pixels.size() < spec.min_area || pixels.size() > spec.max_area) continue;
      for (auto p : pixels) labels[p] = static_cast<std::uint8_t>(k);
      placed = true;
    }
    if (!placed) return false;
  }
  return true;
}

// Adds a disc of the configured radius whose pixels and their 4-neighbours
// all carry `group`. Returns false when no such position exists.
inline bool place_lesion(const PhantomSpec& spec, std::size_t group, Rng& rng, PhantomSample& s) {
  const auto h = static_cast<long>(spec.height), w = static_cast<long>(spec.width);
  const long r = static_cast<long>(std::ceil(spec.lesion_radius));
  const double r2 = spec.lesion_radius * spec.lesion_radius;
  auto label_at = [&](long y, long x) -> int {
    if (y < 0 || x < 0 || y >= h || x >= w) return -1;
    return s.labels[static_cast<std::size_t>(y * w + x)];
  };
  auto interior = [&](long y, long x) {
    const int k = static_cast<int>(group);
    return label_at(y, x) == k && label_at(y - 1, x) == k && label_at(y + 1, x) == k &&
           label_at(y, x - 1) == k && label_at(y, x + 1) == k;
  };
  std::vector<std::pair<long, long>> centers;
  for (long y = 0; y < h; ++y) {
    for (long x = 0; x < w; ++x) {
      bool fits = true;
      for (long dy = -r; dy <= r && fits; ++dy)
        for (long dx = -r; dx <= r && fits; ++dx)
          if (static_cast<double>(dy * dy + dx * dx) <= r2 && !interior(y + dy, x + dx)) fits = false;
      if (fits) centers.emplace_back(y, x);
    }
  }
  if (centers.empty()) return false;
  const auto [cy, cx] = centers[std::min(centers.size() - 1,
                                         static_cast<std::size_t>(uniform01(rng) * static_cast<double>(centers.size())))];
  std::size_t area = 0;
  for (long dy = -r; dy <= r; ++dy)
    for (long dx = -r; dx <= r; ++dx)
      if (static_cast<double>(dy * dy + dx * dx) <= r2) ++area;
  if (area < spec.lesion_min_area) return false;
  for (long dy = -r; dy <= r; ++dy) {
    for (long dx = -r; dx <= r; ++dx) {
      if (static_cast<double>(dy * dy + dx * dx) > r2) continue;
      float& v = s.image.at(static_cast<std::size_t>(cy + dy), static_cast<std::size_t>(cx + dx));
      v = std::min(1.0f, v + static_cast<float>(spec.lesion_intensity));
    }
  }
  s.lesion_bits = static_cast<std::uint8_t>(s.lesion_bits | (1u << (group - 1)));
  return true;
}

}  // namespace detail

// Sample i depends only on (seed, i), so any subset can be regenerated independently.
inline PhantomSample generate_one(const PhantomSpec& spec, std::size_t index) {
  Rng rng(mix_seed(spec.seed, index));
  const std::size_t h = spec.height, w = spec.width, g = spec.groups;
  PhantomSample s;
  s.labels.assign(h * w, 0);
  bool ok = false;
  for (int restart = 0; restart < 50 && !ok; ++restart) ok = detail::place_regions(spec, rng, s.labels);
  if (!ok) throw SpecError("could not place " + std::to_string(g) + " disjoint regions on the canvas");

  const auto base = spec.intensities();
  s.image = Image(h, w, 1);
  std::vector<std::vector<double>> texture(g + 1);
  std::vector<double> level(g + 1);
  for (std::size_t k = 0; k <= g; ++k) {
    texture[k] = detail::value_noise(h, w, 3.0 + static_cast<double>(k), rng);
    level[k] = base[k] + spec.intensity_jitter * (2.0 * uniform01(rng) - 1.0);
  }
  for (std::size_t i = 0; i < h * w; ++i) {
    const std::size_t k = s.labels[i];
    s.image.pixels[i] = static_cast<float>(std::clamp(level[k] + spec.noise_amplitude * texture[k][i], 0.0, 1.0));
  }
  if (uniform01(rng) < spec.lesion_probability) {
    const auto group = 1 + std::min(g - 1, static_cast<std::size_t>(uniform01(rng) * static_cast<double>(g)));
    detail::place_lesion(spec, group, rng, s);
  }
  return s;
}

inline std::vector<PhantomSample> generate(const PhantomSpec& spec) {
  spec.validate();
  std::vector<PhantomSample> out;
  out.reserve(spec.count);
  for (std::size_t i = 0; i < spec.count; ++i) out.push_back(generate_one(spec, i));
  return out;
}

inline constexpr std::uint32_t kOwtdVersion = 1;
inline constexpr std::size_t kOwtdHeaderBytes = 18;

struct PhantomDataset {
  std::size_t height = 0;
  std::size_t width = 0;
  std::size_t groups = 0;
  std::vector<PhantomSample> samples;
};

inline std::string encode_owtd(std::span<const PhantomSample> samples, std::size_t groups) {
  if (samples.empty()) throw DataError("OWTD needs at least one sample");
  const std::size_t h = samples[0].image.height, w = samples[0].image.width;
  io::ByteWriter out;
  out.bytes("OWTD");
  out.u32(kOwtdVersion);
  out.u32(static_cast<std::uint32_t>(samples.size()));
  out.u16(static_cast<std::uint16_t>(h));
  out.u16(static_cast<std::uint16_t>(w));
  out.u8(static_cast<std::uint8_t>(groups));
  out.u8(0);
  for (const auto& s : samples) {
    if (s.image.height != h || s.image.width != w || s.image.channels != 1 || s.labels.size() != h * w) {
      throw DataError("OWTD samples must share one single-channel HxW geometry");
    }
    for (float v : s.image.pixels) out.f32(v);
    for (auto l : s.labels) {
      if (l > groups) throw DataError("label " + std::to_string(l) + " exceeds group count");
      out.u8(l);
    }
    out.u8(s.lesion_bits);
  }
  return out.buffer();
}

inline PhantomDataset decode_owtd(std::string bytes) {
  io::ByteReader in(std::move(bytes));
  if (in.bytes(4, "magic") != "OWTD") throw FormatError("bad OWTD magic", 0);
  if (in.u32("version") != kOwtdVersion) throw FormatError("unsupported OWTD version", 4);
  PhantomDataset ds;
  const std::uint32_t count = in.u32("count");
  ds.height = in.u16("height");
  ds.width = in.u16("width");
  ds.groups = in.u8("groups");
  in.u8("pad");
  const std::size_t n = ds.height * ds.width;
  ds.samples.reserve(count);
  for (std::uint32_t i = 0; i < count; ++i) {
    PhantomSample s;
    s.image = Image(ds.height, ds.width, 1);
    in.need(n * 5 + 1, "sample");
    for (auto& v : s.image.pixels) v = in.f32("pixel");
    s.labels.resize(n);
    for (auto& l : s.labels) {
      const std::size_t at = in.offset();
      l = in.u8("label");
      if (l > ds.groups) throw FormatError("label " + std::to_string(l) + " exceeds group count", at);
    }
    s.lesion_bits = in.u8("lesion bits");
    ds.samples.push_back(std::move(s));
  }
  if (in.remaining() != 0) throw FormatError("trailing bytes after last sample", in.offset());
  return ds;
}

inline void write_owtd(std::span<const PhantomSample> samples, std::size_t groups, const std::string& path) {
  io::write_file(path, encode_owtd(samples, groups));
}

inline PhantomDataset read_owtd(const std::string& path) { return decode_owtd(io::read_file(path)); }

// FNV-1a over a byte string; used to fingerprint datasets and checkpoints in reports.
inline std::uint64_t fnv1a(std::string_view bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

}  // namespace owt
