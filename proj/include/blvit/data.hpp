// SPDX-License-Identifier: Apache-2.0
/**
 * @file   data.hpp
 * @brief  Labelled image sets: a seeded synthetic-shapes generator (one
 *         geometric pattern per class, random placement, scale and noise,
 *         with the pattern's bounding box recorded) and an IDX reader/writer.
 */
#pragma once

#include <blvit/config.hpp>
#include <blvit/random.hpp>
#include <blvit/tensor.hpp>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace blvit::data {

class ParseError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Pixel box [x0, x1) x [y0, y1).
struct Box {
  std::size_t x0 = 0, y0 = 0, x1 = 0, y1 = 0;

  bool intersects(std::size_t bx0, std::size_t by0, std::size_t bx1, std::size_t by1) const {
    return x0 < bx1 && bx0 < x1 && y0 < by1 && by0 < y1;
  }
};

struct Dataset {
  std::size_t image_size = 0;
  std::size_t channels = 1;
  std::size_t num_classes = 0;
  std::vector<double> pixels;  // [count, H, W, ch], values in [0, 1]
  std::vector<int> labels;
  std::vector<Box> boxes;      // empty for IDX data

  std::size_t size() const { return labels.size(); }
  std::size_t pixels_per_image() const { return image_size * image_size * channels; }

  Tensor images(std::span<const std::size_t> indices) const {
    const std::size_t per = pixels_per_image();
    std::vector<double> out(indices.size() * per);
    for (std::size_t i = 0; i < indices.size(); ++i)
      std::copy_n(pixels.begin() + static_cast<std::ptrdiff_t>(indices[i] * per), per,
                  out.begin() + static_cast<std::ptrdiff_t>(i * per));
    return Tensor(Shape{indices.size(), image_size, image_size, channels}, std::move(out));
  }
  std::vector<int> labels_of(std::span<const std::size_t> indices) const {
    std::vector<int> out;
    for (std::size_t i : indices) out.push_back(labels[i]);
    return out;
  }
};

enum class Source { Synthetic, Idx };

struct DatasetSpec {
  Source source = Source::Synthetic;
  std::size_t image_size = 32;
  std::size_t num_classes = 10;
  std::size_t train_count = 2000;
  std::size_t val_count = 500;
  double noise = 0.1;
  std::uint64_t seed = 0;
  std::string train_images, train_labels, val_images, val_labels;  // IDX paths
};

inline constexpr std::size_t kShapeKinds = 10;

inline const char* shape_name(std::size_t kind) {
  static const char* names[kShapeKinds] = {"square", "frame", "disc",    "ring",     "h-bar",
                                           "v-bar",  "plus", "diagonal", "triangle", "checker"};
  return names[kind % kShapeKinds];
}

namespace detail {

/// Coverage of pattern `kind` at unit-square coordinates (u, v) in [0, 1).
inline bool pattern(std::size_t kind, double u, double v) {
  const double du = u - 0.5, dv = v - 0.5, r = std::sqrt(du * du + dv * dv);
  switch (kind % kShapeKinds) {
    case 0: return true;
    case 1: return u < 0.25 || u >= 0.75 || v < 0.25 || v >= 0.75;
    case 2: return r < 0.5;
    case 3: return r < 0.5 && r >= 0.3;
    case 4: return v >= 0.3 && v < 0.7;
    case 5: return u >= 0.3 && u < 0.7;
    case 6: return std::abs(du) < 0.17 || std::abs(dv) < 0.17;
    case 7: return std::abs(u - v) < 0.22;
    case 8: return u >= 0.5 * (1.0 - v) && u < 0.5 * (1.0 + v);
    default: return ((static_cast<int>(u * 3) + static_cast<int>(v * 3)) % 2) == 0;
  }
}

inline Dataset render_shapes(std::size_t count, std::size_t size, std::size_t classes, double noise, Rng& rng) {
  Dataset d;
  d.image_size = size;
  d.num_classes = classes;
  d.pixels.assign(count * size * size, 0.0);
  const std::size_t min_side = std::max<std::size_t>(4, size * 5 / 16);
  const std::size_t max_side = std::max(min_side, size / 2);
  for (std::size_t i = 0; i < count; ++i) {
    const int label = static_cast<int>(i % classes);
    const std::size_t side = min_side + rng.below(max_side - min_side + 1);
    const std::size_t x0 = rng.below(size - side + 1), y0 = rng.below(size - side + 1);
    const double level = 0.7 + 0.3 * rng.uniform();
    double* img = d.pixels.data() + i * size * size;
    for (std::size_t y = 0; y < size; ++y)
      for (std::size_t x = 0; x < size; ++x) {
        double v = noise * rng.normal();
        if (x >= x0 && x < x0 + side && y >= y0 && y < y0 + side) {
          const double u = (static_cast<double>(x - x0) + 0.5) / static_cast<double>(side);
          const double w = (static_cast<double>(y - y0) + 0.5) / static_cast<double>(side);
          if (pattern(static_cast<std::size_t>(label), u, w)) v += level;
        }
        img[y * size + x] = std::clamp(v, 0.0, 1.0);
      }
    d.labels.push_back(label);
    d.boxes.push_back({x0, y0, x0 + side, y0 + side});
  }
  return d;
}

}  // namespace detail

/// Seeded synthetic split; the validation stream is drawn from a different seed than training.
inline Dataset synthetic_shapes(std::size_t count, const DatasetSpec& spec, bool validation) {
  if (spec.num_classes == 0 || spec.num_classes > kShapeKinds)
    throw ConfigError("synthetic shapes support 1-" + std::to_string(kShapeKinds) + " classes");
  if (spec.image_size < 8) throw ConfigError("synthetic shapes need image_size >= 8");
  Rng rng(spec.seed * 2 + (validation ? 1 : 0));
  return detail::render_shapes(count, spec.image_size, spec.num_classes, spec.noise, rng);
}

// ---------------------------------------------------------------------------
// IDX: big-endian magic (0x00 0x00 type ndims), ndims u32 dims, then data.
// Only unsigned-byte payloads (type 0x08) are supported.

inline constexpr std::uint32_t kIdxImages = 0x00000803;
inline constexpr std::uint32_t kIdxLabels = 0x00000801;

struct IdxArray {
  std::vector<std::uint32_t> dims;
  std::vector<std::uint8_t> values;
};

inline IdxArray parse_idx(std::span<const std::uint8_t> bytes, const std::string& origin = "<idx>") {
  std::size_t pos = 0;
  auto u32 = [&](const char* what) {
    if (bytes.size() - pos < 4)
      throw ParseError(origin + ": truncated " + what + " at byte offset " + std::to_string(pos));
    const std::uint32_t v = (std::uint32_t{bytes[pos]} << 24) | (std::uint32_t{bytes[pos + 1]} << 16) |
                            (std::uint32_t{bytes[pos + 2]} << 8) | std::uint32_t{bytes[pos + 3]};
    pos += 4;
    return v;
  };
  const std::uint32_t magic = u32("magic");
  if ((magic >> 16) != 0 || ((magic >> 8) & 0xff) != 0x08) {
    char hex[16];
    std::snprintf(hex, sizeof hex, "%08x", magic);
    throw ParseError(origin + ": bad IDX magic 0x" + hex + " at byte offset 0 (expected 0x000008nn)");
  }
  const std::uint32_t ndims = magic & 0xff;
  if (ndims == 0 || ndims > 4)
    throw ParseError(origin + ": unsupported dimension count " + std::to_string(ndims) + " at byte offset 3");
  IdxArray out;
  std::uint64_t total = 1;
  for (std::uint32_t i = 0; i < ndims; ++i) {
    const std::size_t at = pos;
    out.dims.push_back(u32("dimension"));
    if (out.dims.back() == 0)
      throw ParseError(origin + ": zero dimension at byte offset " + std::to_string(at));
    total *= out.dims.back();
  }
  if (bytes.size() - pos != total)
    throw ParseError(origin + ": payload at byte offset " + std::to_string(pos) + " holds " +
                     std::to_string(bytes.size() - pos) + " bytes, dims require " + std::to_string(total));
  out.values.assign(bytes.begin() + static_cast<std::ptrdiff_t>(pos), bytes.end());
  return out;
}

inline std::vector<std::uint8_t> encode_idx(const IdxArray& a) {
  std::vector<std::uint8_t> out;
  auto u32 = [&](std::uint32_t v) {
    for (int s = 24; s >= 0; s -= 8) out.push_back(static_cast<std::uint8_t>(v >> s));
  };
  u32(0x00000800u | static_cast<std::uint32_t>(a.dims.size()));
  for (std::uint32_t d : a.dims) u32(d);
  out.insert(out.end(), a.values.begin(), a.values.end());
  return out;
}

inline std::vector<std::uint8_t> read_bytes(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ParseError("cannot open '" + path + "'");
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_bytes(const std::string& path, const std::vector<std::uint8_t>& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw ParseError("cannot write '" + path + "'");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

/// Images IDX (count, H, W) with labels IDX (count); pixels scaled to [0, 1].
inline Dataset from_idx(const IdxArray& images, const IdxArray& labels, std::size_t num_classes,
                        const std::string& origin = "<idx>") {
  if (images.dims.size() != 3 || images.dims[1] != images.dims[2])
    throw ParseError(origin + ": images must be (count, side, side)");
  if (labels.dims.size() != 1 || labels.dims[0] != images.dims[0])
    throw ParseError(origin + ": labels must be (count) matching " + std::to_string(images.dims[0]) + " images");
  Dataset d;
  d.image_size = images.dims[1];
  d.num_classes = num_classes;
  d.pixels.reserve(images.values.size());
  for (std::uint8_t v : images.values) d.pixels.push_back(static_cast<double>(v) / 255.0);
  for (std::size_t i = 0; i < labels.values.size(); ++i) {
    if (labels.values[i] >= num_classes)
      throw ParseError(origin + ": label " + std::to_string(labels.values[i]) + " at byte offset " +
                       std::to_string(8 + i) + " is outside [0, " + std::to_string(num_classes) + ")");
    d.labels.push_back(labels.values[i]);
  }
  return d;
}

inline Dataset load_idx(const std::string& images_path, const std::string& labels_path, std::size_t num_classes) {
  const auto images = parse_idx(read_bytes(images_path), images_path);
  if (images.dims.size() != 3) throw ParseError(images_path + ": expected magic 0x00000803 (3-D images)");
  const auto labels = parse_idx(read_bytes(labels_path), labels_path);
  if (labels.dims.size() != 1) throw ParseError(labels_path + ": expected magic 0x00000801 (1-D labels)");
  return from_idx(images, labels, num_classes, images_path);
}

/// Quantises a single-channel set to IDX arrays (pixels rounded to 0..255).
inline std::pair<IdxArray, IdxArray> to_idx(const Dataset& d) {
  if (d.channels != 1) throw ParseError("IDX export supports single-channel images only");
  IdxArray images{{static_cast<std::uint32_t>(d.size()), static_cast<std::uint32_t>(d.image_size),
                   static_cast<std::uint32_t>(d.image_size)},
                  {}};
  for (double v : d.pixels) images.values.push_back(static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255)));
  IdxArray labels{{static_cast<std::uint32_t>(d.size())}, {}};
  for (int l : d.labels) labels.values.push_back(static_cast<std::uint8_t>(l));
  return {images, labels};
}

/// Train and validation splits for a spec.
inline std::pair<Dataset, Dataset> make_dataset(const DatasetSpec& spec) {
  if (spec.source == Source::Synthetic)
    return {synthetic_shapes(spec.train_count, spec, false), synthetic_shapes(spec.val_count, spec, true)};
  Dataset train = load_idx(spec.train_images, spec.train_labels, spec.num_classes);
  Dataset val = load_idx(spec.val_images, spec.val_labels, spec.num_classes);
  if (train.image_size != spec.image_size || val.image_size != spec.image_size)
    throw ParseError("IDX image side does not match image_size " + std::to_string(spec.image_size));
  return {std::move(train), std::move(val)};
}

}  // namespace blvit::data
