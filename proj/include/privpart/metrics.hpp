#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "privpart/autodiff.hpp"
#include "privpart/nn.hpp"
#include "privpart/tensor.hpp"

namespace privpart {

enum class Distance { mse, one_minus_ssim };

inline const char* distance_name(Distance d) {
  return d == Distance::mse ? "mse" : "one_minus_ssim";
}

inline Distance distance_from_name(const std::string& s) {
  if (s == "mse") return Distance::mse;
  if (s == "one_minus_ssim" || s == "1-ssim") return Distance::one_minus_ssim;
  throw ConfigError("unknown distance metric: " + s);
}

template <typename T>
Var mse_graph(Tape<T>& tape, Var a, Var b) {
  Var d = tape.sub(a, b);
  return tape.mean(tape.mul(d, d));
}

namespace detail {

// Normalized SSIM window. Small images get a 7x7 uniform box, 32px and up an
// 11x11 Gaussian with sigma 1.5.
template <typename T>
Tensor<T> ssim_window(size_t h, size_t w) {
  const size_t side = std::min(h, w);
  if (side < 7)
    throw ShapeError("ssim: image " + std::to_string(h) + "x" +
                     std::to_string(w) + " is smaller than the 7x7 window");
  if (side < 32) {
    const size_t k = 7;
    return Tensor<T>::full({1, 1, k, k}, static_cast<T>(1.0 / (k * k)));
  }
  const size_t k = 11;
  const double sigma = 1.5;
  Tensor<T> win({1, 1, k, k});
  double total = 0.0;
  for (size_t u = 0; u < k; ++u)
    for (size_t v = 0; v < k; ++v) {
      const double du = static_cast<double>(u) - 5.0;
      const double dv = static_cast<double>(v) - 5.0;
      const double g = std::exp(-(du * du + dv * dv) / (2.0 * sigma * sigma));
      win[u * k + v] = static_cast<T>(g);
      total += g;
    }
  for (size_t i = 0; i < win.size(); ++i)
    win[i] = static_cast<T>(win[i] / total);
  return win;
}

}  // namespace detail

// Mean SSIM over all valid (fully inside) windows of a batch, built on the
// tape so it can serve as a training signal. x and y are [N,1,H,W] in
// [0,range]. Window statistics come from convolving with the normalized
// window, the classic two-term form with C1=(0.01*range)^2, C2=(0.03*range)^2.
template <typename T>
Var ssim_graph(Tape<T>& tape, Var x, Var y, double range = 1.0) {
  const Tensor<T>& xv = tape.value(x);
  const Tensor<T>& yv = tape.value(y);
  require_same_shape(xv, yv, "ssim");
  if (xv.rank() != 4 || xv.dim(1) != 1)
    throw ShapeError("ssim: expected [N,1,H,W], got " + shape_str(xv.shape()));
  const T c1 = static_cast<T>(0.01 * range * 0.01 * range);
  const T c2 = static_cast<T>(0.03 * range * 0.03 * range);
  Var win = tape.constant(detail::ssim_window<T>(xv.dim(2), xv.dim(3)));

  Var mu_x = tape.conv2d(x, win, 1, 0);
  Var mu_y = tape.conv2d(y, win, 1, 0);
  Var e_xx = tape.conv2d(tape.mul(x, x), win, 1, 0);
  Var e_yy = tape.conv2d(tape.mul(y, y), win, 1, 0);
  Var e_xy = tape.conv2d(tape.mul(x, y), win, 1, 0);

  Var mu_xx = tape.mul(mu_x, mu_x);
  Var mu_yy = tape.mul(mu_y, mu_y);
  Var mu_xy = tape.mul(mu_x, mu_y);
  Var var_x = tape.sub(e_xx, mu_xx);
  Var var_y = tape.sub(e_yy, mu_yy);
  Var cov = tape.sub(e_xy, mu_xy);

  Var num = tape.mul(tape.add_scalar(tape.scale(mu_xy, T(2)), c1),
                     tape.add_scalar(tape.scale(cov, T(2)), c2));
  Var den = tape.mul(tape.add_scalar(tape.add(mu_xx, mu_yy), c1),
                     tape.add_scalar(tape.add(var_x, var_y), c2));
  return tape.mean(tape.div(num, den));
}

// Reconstruction distance as a tape value: either plain MSE or 1 - SSIM.
template <typename T>
Var distance_graph(Tape<T>& tape, Distance metric, Var x, Var y,
                   double range = 1.0) {
  if (metric == Distance::mse) return mse_graph(tape, x, y);
  return tape.add_scalar(tape.scale(ssim_graph(tape, x, y, range), T(-1)),
                         T(1));
}

template <typename T>
double mse(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape(a, b, "mse");
  double acc = 0.0;
  for (size_t i = 0; i < a.size(); ++i) {
    const double d = static_cast<double>(a[i]) - static_cast<double>(b[i]);
    acc += d * d;
  }
  return acc / static_cast<double>(a.size());
}

namespace detail {

template <typename T>
Tensor<T> as_nchw(const Tensor<T>& t) {
  if (t.rank() == 2) return t.reshaped({1, 1, t.dim(0), t.dim(1)});
  if (t.rank() == 3) return t.reshaped({t.dim(0), 1, t.dim(1), t.dim(2)});
  if (t.rank() == 4 && t.dim(1) == 1) return t;
  throw ShapeError("ssim: expected [H,W], [N,H,W] or [N,1,H,W], got " +
                   shape_str(t.shape()));
}

}  // namespace detail

// Plain-number SSIM; evaluates the same graph with gradients off so the
// value agrees bitwise with the training-time signal.
template <typename T>
double ssim(const Tensor<T>& a, const Tensor<T>& b, double range = 1.0) {
  Tape<T> tape;
  Var x = tape.constant(detail::as_nchw(a));
  Var y = tape.constant(detail::as_nchw(b));
  return static_cast<double>(tape.scalar_value(ssim_graph(tape, x, y, range)));
}

inline size_t argmax_row(const float* row, size_t n) {
  size_t best = 0;
  for (size_t i = 1; i < n; ++i)
    if (row[i] > row[best]) best = i;
  return best;
}

template <typename T>
std::vector<int32_t> predictions(const Tensor<T>& logits) {
  if (logits.rank() != 2) throw ShapeError("predictions: logits must be 2-D");
  std::vector<int32_t> out(logits.dim(0));
  const size_t classes = logits.dim(1);
  for (size_t r = 0; r < logits.dim(0); ++r) {
    size_t best = 0;
    for (size_t c = 1; c < classes; ++c)
      if (logits[r * classes + c] > logits[r * classes + best]) best = c;
    out[r] = static_cast<int32_t>(best);
  }
  return out;
}

template <typename T>
double accuracy(const Tensor<T>& logits, const std::vector<int32_t>& labels) {
  if (logits.dim(0) != labels.size())
    throw ShapeError("accuracy: batch size mismatch");
  if (labels.empty()) return 0.0;
  const std::vector<int32_t> pred = predictions(logits);
  size_t hits = 0;
  for (size_t i = 0; i < labels.size(); ++i) hits += pred[i] == labels[i];
  return static_cast<double>(hits) / static_cast<double>(labels.size());
}

// Fraction of reconstructions the classifier still assigns to the true
// label: high means the reconstruction kept class-relevant content.
template <typename T>
double reprint_accuracy(const Network<T>& model, const Tensor<T>& recon,
                        const std::vector<int32_t>& labels) {
  return accuracy(model.forward(recon), labels);
}

}  // namespace privpart
