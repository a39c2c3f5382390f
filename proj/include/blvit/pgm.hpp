// SPDX-License-Identifier: Apache-2.0
/**
 * @file   pgm.hpp
 * @brief  Binary greymap (P5) output and the routing visualisations built on
 *         it: patch-selection masks, score maps and plain-text token grids.
 */
#pragma once

#include <blvit/routing.hpp>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace blvit::pgm {

/// `P5\n<w> <h>\n255\n` followed by w*h bytes, row-major.
inline std::string encode(std::size_t width, std::size_t height, const std::vector<std::uint8_t>& pixels) {
  if (pixels.size() != width * height)
    throw std::invalid_argument("pgm: " + std::to_string(pixels.size()) + " pixels for " + std::to_string(width) +
                                "x" + std::to_string(height));
  std::string out = "P5\n" + std::to_string(width) + " " + std::to_string(height) + "\n255\n";
  out.append(pixels.begin(), pixels.end());
  return out;
}

inline void write(const std::string& path, std::size_t width, std::size_t height,
                  const std::vector<std::uint8_t>& pixels) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write '" + path + "'");
  const std::string bytes = encode(width, height, pixels);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

/// Per-token bytes on a grid x grid token layout, each token blown up to a patch x patch block.
inline std::vector<std::uint8_t> upscale(const std::vector<std::uint8_t>& tokens, std::size_t grid,
                                         std::size_t patch) {
  const std::size_t side = grid * patch;
  std::vector<std::uint8_t> out(side * side);
  for (std::size_t y = 0; y < side; ++y)
    for (std::size_t x = 0; x < side; ++x) out[y * side + x] = tokens[(y / patch) * grid + x / patch];
  return out;
}

/// Selected tokens white (255), others black, for image `b`.
inline std::vector<std::uint8_t> selection_levels(const routing::SelectionMask& m, std::size_t b) {
  std::vector<std::uint8_t> out(m.tokens);
  for (std::size_t t = 0; t < m.tokens; ++t) out[t] = m.selected(b, t) ? 255 : 0;
  return out;
}

/// Scores of one image mapped linearly from [min, max] to [0, 255]; constant scores map to 0.
inline std::vector<std::uint8_t> score_levels(std::span<const double> scores) {
  const auto [lo, hi] = std::minmax_element(scores.begin(), scores.end());
  std::vector<std::uint8_t> out;
  for (double s : scores) {
    const double t = *hi > *lo ? (s - *lo) / (*hi - *lo) : 0.0;
    out.push_back(static_cast<std::uint8_t>(std::lround(255.0 * t)));
  }
  return out;
}

/// Rows of space-separated 0/1 flags.
inline std::string selection_grid(const routing::SelectionMask& m, std::size_t b, std::size_t grid) {
  std::string out;
  for (std::size_t y = 0; y < grid; ++y) {
    for (std::size_t x = 0; x < grid; ++x) {
      if (x) out += ' ';
      out += m.selected(b, y * grid + x) ? '1' : '0';
    }
    out += '\n';
  }
  return out;
}

}  // namespace blvit::pgm
