// SPDX-License-Identifier: Apache-2.0
/**
 * @file   localize.hpp
 * @brief  How well routed tokens land on the object: fraction of selected
 *         patches touching the shape's bounding box, against the expectation
 *         for a uniformly random mask of the same size.
 */
#pragma once

#include <blvit/data.hpp>
#include <blvit/model.hpp>

#include <cmath>
#include <numeric>
#include <vector>

namespace blvit::localize {

/// Per-token flag: does the patch overlap the box?
inline std::vector<bool> patches_on_box(const data::Box& box, std::size_t grid, std::size_t patch) {
  std::vector<bool> out(grid * grid);
  for (std::size_t n = 0; n < out.size(); ++n) {
    const std::size_t x = (n % grid) * patch, y = (n / grid) * patch;
    out[n] = box.intersects(x, y, x + patch, y + patch);
  }
  return out;
}

struct Segment {
  std::size_t predictor_layer = 0;
  std::vector<double> selected;  // per image, fraction of selected patches on the box
  std::vector<double> random;    // per image, fraction of all patches on the box

  double mean_selected() const { return std::accumulate(selected.begin(), selected.end(), 0.0) / selected.size(); }
  double mean_random() const { return std::accumulate(random.begin(), random.end(), 0.0) / random.size(); }
};

struct Report {
  std::vector<Segment> segments;
  double mean_selected = 0.0;  // over segments and images
  double mean_random = 0.0;
  double t_statistic = 0.0;  // paired, on the per-image segment-averaged difference
};

/// Paired one-sample t-statistic of `d` against zero; infinite when every difference is equal and positive.
inline double t_statistic(const std::vector<double>& d) {
  const double n = static_cast<double>(d.size());
  const double mean = std::accumulate(d.begin(), d.end(), 0.0) / n;
  double ss = 0;
  for (double x : d) ss += (x - mean) * (x - mean);
  const double sd = std::sqrt(ss / (n - 1));
  if (sd == 0.0) return mean > 0 ? INFINITY : mean < 0 ? -INFINITY : 0.0;
  return mean / (sd / std::sqrt(n));
}

/// Scores the first `count` images of `d`; each predictor segment is measured at its first routed layer.
inline Report measure(const Model& m, const data::Dataset& d, std::size_t count) {
  count = std::min(count, d.size());
  std::vector<std::size_t> idx(count);
  std::iota(idx.begin(), idx.end(), 0);
  NoGradGuard no_grad;
  const auto out = forward(m, d.images(idx), {.trace = true});
  const std::size_t grid = m.config.grid(), patch = m.config.patch_size;
  Report r;
  for (const auto& t : out.trace) {
    if (t.predictor_layer == 0 || t.mask.k == 0) continue;
    if (!r.segments.empty() && r.segments.back().predictor_layer == t.predictor_layer) continue;
    Segment s{t.predictor_layer, {}, {}};
    for (std::size_t b = 0; b < count; ++b) {
      const auto on_box = patches_on_box(d.boxes[b], grid, patch);
      std::size_t hit = 0, total = 0;
      for (std::size_t n = 0; n < on_box.size(); ++n) {
        total += on_box[n];
        if (on_box[n] && t.mask.selected(b, n)) ++hit;
      }
      s.selected.push_back(static_cast<double>(hit) / static_cast<double>(t.mask.k));
      s.random.push_back(static_cast<double>(total) / static_cast<double>(on_box.size()));
    }
    r.segments.push_back(std::move(s));
  }
  if (r.segments.empty()) return r;
  std::vector<double> diff(count, 0.0);
  for (const auto& s : r.segments) {
    r.mean_selected += s.mean_selected() / r.segments.size();
    r.mean_random += s.mean_random() / r.segments.size();
    for (std::size_t b = 0; b < count; ++b) diff[b] += (s.selected[b] - s.random[b]) / r.segments.size();
  }
  r.t_statistic = t_statistic(diff);
  return r;
}

}  // namespace blvit::localize
