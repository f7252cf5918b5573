#pragma once

#include <cmath>
#include <iomanip>
#include <sstream>
#include <string>
#include <vector>

#include "privpart/data.hpp"
#include "privpart/metrics.hpp"
#include "privpart/nn.hpp"
#include "privpart/rng.hpp"

namespace privpart {

struct PixelationConfig {
  size_t b = 2;          // cell side length in pixels
  size_t m = 1;          // neighborhood size: images differing in <= m pixels
  double epsilon = 1.0;  // privacy budget
  double range = 1.0;    // pixel scale L

  void validate() const {
    if (b == 0) throw ConfigError("pixelation: b must be >= 1");
    if (m == 0) throw ConfigError("pixelation: m must be >= 1");
    if (epsilon <= 0.0) throw ConfigError("pixelation: epsilon must be > 0");
    if (range <= 0.0) throw ConfigError("pixelation: pixel range must be > 0");
  }
};

// Largest change any cell mean can see when m pixels move by up to L.
inline double sensitivity(size_t b, size_t m, double range) {
  return range * static_cast<double>(m) / static_cast<double>(b * b);
}

inline double sensitivity(const PixelationConfig& cfg) {
  return sensitivity(cfg.b, cfg.m, cfg.range);
}

// Replaces each b x b cell with its mean. Edge cells on non-divisible dims
// are replicate-padded, then the result is cropped back. Means accumulate in
// double and round once, so the operation is exactly idempotent.
template <typename T>
Tensor<T> pixelate(const Tensor<T>& img, size_t b) {
  if (img.rank() != 2) throw ShapeError("pixelate expects a [H,W] image");
  const size_t h = img.dim(0), w = img.dim(1);
  if (h == 0 || w == 0) throw Error("pixelate: empty image");
  if (b == 0) throw ConfigError("pixelation: b must be >= 1");
  Tensor<T> out(img.shape());
  for (size_t cy = 0; cy < h; cy += b) {
    for (size_t cx = 0; cx < w; cx += b) {
      double sum = 0.0;
      for (size_t py = cy; py < cy + b; ++py)
        for (size_t px = cx; px < cx + b; ++px)
          sum += static_cast<double>(
              img[std::min(py, h - 1) * w + std::min(px, w - 1)]);
      const T mean = static_cast<T>(sum / static_cast<double>(b * b));
      for (size_t py = cy; py < std::min(cy + b, h); ++py)
        for (size_t px = cx; px < std::min(cx + b, w); ++px)
          out[py * w + px] = mean;
    }
  }
  return out;
}

// Pixelation followed by one Laplace(sensitivity/epsilon) draw per cell; all
// pixels of a cell receive that cell's single draw. Output clipped to
// [0, range].
template <typename T>
Tensor<T> dp_pixelate(const Tensor<T>& img, const PixelationConfig& cfg,
                      uint64_t seed) {
  cfg.validate();
  Tensor<T> out = pixelate(img, cfg.b);
  const size_t h = out.dim(0), w = out.dim(1);
  const double scale = sensitivity(cfg) / cfg.epsilon;
  Rng rng(seed);
  for (size_t cy = 0; cy < h; cy += cfg.b) {
    for (size_t cx = 0; cx < w; cx += cfg.b) {
      const double noise = rng.laplace(scale);
      for (size_t py = cy; py < std::min(cy + cfg.b, h); ++py)
        for (size_t px = cx; px < std::min(cx + cfg.b, w); ++px) {
          const double v = static_cast<double>(out[py * w + px]) + noise;
          out[py * w + px] = static_cast<T>(std::clamp(v, 0.0, cfg.range));
        }
    }
  }
  return out;
}

struct DpSweepRow {
  double epsilon = 0.0;
  double ssim = 0.0;      // mean similarity of perturbed images to originals
  double accuracy = 0.0;  // task model accuracy on perturbed images
};

inline std::string dp_sweep_csv(const std::vector<DpSweepRow>& rows) {
  std::ostringstream os;
  os << std::setprecision(9) << "epsilon,ssim,accuracy\n";
  for (const auto& r : rows)
    os << r.epsilon << ',' << r.ssim << ',' << r.accuracy << '\n';
  return os.str();
}

// For each epsilon: DP-pixelate the whole test set, then measure how similar
// the perturbed images remain (SSIM vs originals) and what the task model
// still reads from them. One independent noise stream per (epsilon, image).
template <typename T>
std::vector<DpSweepRow> dp_sweep(const Network<T>& model, const Dataset& test,
                                 const std::vector<double>& epsilons,
                                 PixelationConfig base, uint64_t seed) {
  if (test.size() == 0) throw Error("dp_sweep needs a nonempty test set");
  const size_t n = test.size(), h = test.height(), w = test.width();
  std::vector<DpSweepRow> rows;
  Rng root(seed);
  for (size_t e = 0; e < epsilons.size(); ++e) {
    PixelationConfig cfg = base;
    cfg.epsilon = epsilons[e];
    cfg.validate();
    Rng eps_rng = root.fork(e);
    Tensor<float> perturbed(test.images.shape());
    for (size_t i = 0; i < n; ++i) {
      Tensor<float> img({h, w});
      std::copy(test.images.data() + i * h * w,
                test.images.data() + (i + 1) * h * w, img.data());
      Tensor<float> noisy = dp_pixelate(img, cfg, eps_rng.fork(i).seed());
      std::copy(noisy.data(), noisy.data() + h * w,
                perturbed.data() + i * h * w);
    }
    DpSweepRow row;
    row.epsilon = epsilons[e];
    const size_t chunk = 512;
    double ssim_sum = 0.0;
    size_t hits = 0;
    for (size_t at = 0; at < n; at += chunk) {
      std::vector<size_t> idx;
      for (size_t i = at; i < std::min(n, at + chunk); ++i) idx.push_back(i);
      Tensor<float> orig = detail::take_rows(test.images, idx);
      Tensor<float> pert = detail::take_rows(perturbed, idx);
      ssim_sum += ssim(detail::image_batch<T>(pert),
                       detail::image_batch<T>(orig), cfg.range) *
                  static_cast<double>(idx.size());
      Tensor<T> x = detail::shape_batch<T>(pert, model.input_shape());
      const std::vector<int32_t> pred = predictions(model.forward(x));
      for (size_t i = 0; i < idx.size(); ++i)
        hits += pred[i] == test.labels[idx[i]];
    }
    row.ssim = ssim_sum / static_cast<double>(n);
    row.accuracy = static_cast<double>(hits) / static_cast<double>(n);
    rows.push_back(row);
  }
  return rows;
}

}  // namespace privpart
