#pragma once

#include <cmath>
#include <iomanip>
#include <limits>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "privpart/defense.hpp"

namespace privpart {

// A reconstruction network: maps the cut activation back to image pixels.
// Checkpoint rule: parameters are kept from the epoch with the lowest
// validation MSE.
struct AttackerSpec {
  std::string name;
  std::vector<LayerSpec> layers;
  OptimizerConfig opt = OptimizerConfig::adam(1e-3);
  size_t epochs = 10;
};

// The eight stock reconstructors for a flat cut activation. a1-a4 vary the
// hidden activation on a full-width hidden layer, a5/a6 vary the hidden
// width, a7 slides a 1-D kernel over the activation vector, a8 maps straight
// to pixels. Every entry ends in a sigmoid onto image_numel pixels.
inline std::vector<AttackerSpec> builtin_catalog(size_t image_numel,
                                                 size_t hidden_dim) {
  if (image_numel == 0 || hidden_dim == 0)
    throw ConfigError("catalog dims must be positive");
  using L = LayerSpec;
  const L out = L::dense(image_numel, Activation::sigmoid);
  return {
      {"a1", {L::dense(hidden_dim, Activation::relu), out}},
      {"a2", {L::dense(hidden_dim, Activation::relu), L::dropout(0.1), out}},
      {"a3", {L::dense(hidden_dim, Activation::tanh), out}},
      {"a4", {L::dense(hidden_dim, Activation::sigmoid), out}},
      {"a5", {L::dense(512, Activation::relu), out}},
      {"a6", {L::dense(1024, Activation::relu), out}},
      {"a7", {L::conv1d(3, 1, 1, Activation::relu), out}},
      {"a8", {out}},
  };
}

// The three reconstructor families for a convolutional cut [C,H,W]: an
// upsampling deconvolution stack, a fully-connected decoder, and the same
// decoder sparsified with dropout(0.5). The deconv path doubles the spatial
// dims per layer, so the image side must be a power-of-two multiple of the
// cut side.
inline std::vector<AttackerSpec> builtin_catalog_conv(const Shape& hidden,
                                                      size_t img_h,
                                                      size_t img_w) {
  if (hidden.size() != 3)
    throw ShapeError("conv catalog needs a [C,H,W] cut, got " +
                     shape_str(hidden));
  const size_t h = hidden[1], w = hidden[2];
  if (h == 0 || w == 0 || img_h % h != 0 || img_w % w != 0 ||
      img_h / h != img_w / w || ((img_h / h) & (img_h / h - 1)) != 0)
    throw ShapeError("deconv attacker needs image dims to be a power-of-two "
                     "multiple of the cut dims; cut " + shape_str(hidden) +
                     ", image " + std::to_string(img_h) + "x" +
                     std::to_string(img_w));
  using L = LayerSpec;
  std::vector<LayerSpec> deconv;
  size_t ch = 32;
  for (size_t r = img_h / h; r > 1; r /= 2) {
    deconv.push_back(L::deconv2d(ch, 4, 2, 1, Activation::relu));
    ch = 16;
  }
  deconv.push_back(L::conv2d(1, 3, 1, 1, Activation::sigmoid));
  const size_t img_numel = img_h * img_w;
  return {
      {"deconv", deconv},
      {"fc",
       {L::flatten(), L::dense(1024, Activation::relu),
        L::dense(img_numel, Activation::tanh)}},
      {"sparse_fc",
       {L::flatten(), L::dense(1024, Activation::relu), L::dropout(0.5),
        L::dense(img_numel, Activation::tanh)}},
  };
}

template <typename T>
struct TrainedAttacker {
  AttackerSpec spec;
  Network<T> net;
  double best_val_mse = std::numeric_limits<double>::infinity();
  size_t best_epoch = 0;          // 1-based
  std::vector<double> val_mse;    // one entry per epoch
};

namespace detail {

template <typename T>
void clip_pixels(Tensor<T>& t, double range) {
  for (size_t i = 0; i < t.size(); ++i)
    t[i] = std::clamp(t[i], T(0), static_cast<T>(range));
}

}  // namespace detail

// Trains one attacker against a frozen local partition: minimizes the MSE
// between attack images and their reconstructions from the cut activation.
// The partition is read-only; activations are computed once, eval mode. The
// attack data is split 90/10 into train/validation, seeded.
template <typename T>
TrainedAttacker<T> train_attacker(const BipartiteNetwork<T>& bp,
                                  const AttackerSpec& spec,
                                  const Dataset& attack_data, uint64_t seed,
                                  size_t batch_size = 32) {
  if (attack_data.size() < 2)
    throw Error("attack data needs at least 2 samples");
  if (spec.epochs == 0)
    throw ConfigError("attacker " + spec.name + ": epochs must be >= 1");
  if (batch_size == 0) throw ConfigError("batch_size must be >= 1");

  Network<T> net(bp.hidden_shape, spec.layers);
  const size_t img_numel = attack_data.height() * attack_data.width();
  if (shape_numel(net.output_shape()) != img_numel)
    throw ShapeError("attacker " + spec.name + " outputs " +
                     shape_str(net.output_shape()) + ", images have " +
                     std::to_string(img_numel) + " pixels");

  Rng root(seed);
  Rng init_rng = root.fork(0);
  net.init_params(init_rng);
  Rng split_rng = root.fork(1);
  Rng shuffle_rng = root.fork(2);
  Rng drop_rng = root.fork(3);

  const size_t n = attack_data.size();
  std::vector<size_t> order(n);
  std::iota(order.begin(), order.end(), size_t{0});
  split_rng.shuffle(order);
  const size_t n_val = std::max<size_t>(1, n / 10);
  const std::vector<size_t> train_idx(order.begin(), order.end() - n_val);
  const std::vector<size_t> val_idx(order.end() - n_val, order.end());

  auto [train_imgs, train_labels] = gather(attack_data, train_idx);
  auto [val_imgs, val_labels] = gather(attack_data, val_idx);
  auto local_h = [&](const Tensor<float>& imgs) {
    return bp.local.forward(
        detail::shape_batch<T>(imgs, bp.local.input_shape()), Mode::eval);
  };
  Tensor<T> h_train = local_h(train_imgs);
  Tensor<T> h_val = local_h(val_imgs);
  Tensor<T> x_img_val = detail::image_batch<T>(val_imgs);

  Optimizer<T> opt(spec.opt);
  TrainedAttacker<T> result{spec, std::move(net)};
  ParamStore<T> best;

  for (size_t epoch = 1; epoch <= spec.epochs; ++epoch) {
    const auto batches =
        detail::batch_indices(train_idx.size(), batch_size, shuffle_rng);
    for (size_t b = 0; b < batches.size(); ++b) {
      Tensor<T> h_b = detail::take_rows(h_train, batches[b]);
      Tensor<T> x_img_b =
          detail::image_batch<T>(detail::take_rows(train_imgs, batches[b]));
      Tape<T> tape;
      auto fwd = result.net.forward_tape(tape, tape.constant(h_b), Mode::train,
                                         &drop_rng, true);
      Var recon = tape.reshape(fwd.output, x_img_b.shape());
      Var loss = mse_graph(tape, recon, tape.constant(x_img_b));
      if (!std::isfinite(static_cast<double>(tape.scalar_value(loss))))
        throw DivergenceError("attacker " + spec.name + " diverged at epoch " +
                              std::to_string(epoch) + " batch " +
                              std::to_string(b));
      tape.backward(loss);
      std::vector<std::pair<std::string, Tensor<T>>> grads;
      for (const auto& [name, var] : fwd.params)
        grads.emplace_back(name, tape.grad(var));
      opt.step(result.net.params(), grads);
    }
    Tensor<T> recon_val = result.net.forward(h_val, Mode::eval);
    const double v = mse(recon_val.reshaped(x_img_val.shape()), x_img_val);
    result.val_mse.push_back(v);
    if (v < result.best_val_mse) {
      result.best_val_mse = v;
      result.best_epoch = epoch;
      best = result.net.params().deep_clone();
    }
    opt.on_epoch_end(epoch);
  }
  if (!best.empty()) result.net.params() = best;
  return result;
}

struct AttackRow {
  std::string name;
  double mse = 0.0;
  double ssim = 0.0;
  double reprint_accuracy = 0.0;
};

// Per-attacker recovery quality on held-out images, plus which attacker is
// strongest under each metric (indices into rows; ties keep the first).
struct AttackReport {
  std::vector<AttackRow> rows;
  size_t best_mse = 0;      // argmin mse
  size_t best_ssim = 0;     // argmax ssim
  size_t best_reprint = 0;  // argmax reprint accuracy
  double model_accuracy = 0.0;  // composed model on clean test inputs
  double lambda = 0.0;
  size_t cut = 0;
  uint64_t seed = 0;

  std::string to_csv() const {
    std::ostringstream os;
    os << std::setprecision(9);
    os << "# lambda=" << lambda << " cut=" << cut << " seed=" << seed
       << " model_accuracy=" << model_accuracy << '\n';
    os << "attacker,mse,ssim,reprint_accuracy\n";
    for (const auto& r : rows)
      os << r.name << ',' << r.mse << ',' << r.ssim << ','
         << r.reprint_accuracy << '\n';
    if (!rows.empty())
      os << "# best mse=" << rows[best_mse].name
         << " ssim=" << rows[best_ssim].name
         << " reprint=" << rows[best_reprint].name << '\n';
    return os.str();
  }

  std::string to_text() const {
    std::ostringstream os;
    os << std::setprecision(6);
    os << "attack report (lambda=" << lambda << ", cut=" << cut
       << ", seed=" << seed << ")\n";
    os << "model accuracy on clean inputs: " << model_accuracy << '\n';
    for (const auto& r : rows)
      os << "  " << std::setw(10) << std::left << r.name << std::right
         << " mse=" << std::setw(12) << r.mse << " ssim=" << std::setw(10)
         << r.ssim << " reprint=" << std::setw(10) << r.reprint_accuracy
         << '\n';
    if (!rows.empty())
      os << "strongest: mse " << rows[best_mse].name << ", ssim "
         << rows[best_ssim].name << ", reprint " << rows[best_reprint].name
         << '\n';
    return os.str();
  }
};

// Recovery metrics for each trained attacker on a held-out test set. Outputs
// are clipped to the pixel range before any metric; reprint accuracy runs the
// composed task model on the clipped reconstructions.
template <typename T>
AttackReport evaluate_attack(const BipartiteNetwork<T>& bp,
                             const std::vector<TrainedAttacker<T>>& attackers,
                             const Dataset& test, double lambda = 0.0,
                             uint64_t seed = 0, double range = 1.0) {
  if (test.size() == 0) throw Error("evaluate_attack needs a nonempty test set");
  AttackReport report;
  report.lambda = lambda;
  report.cut = bp.cut;
  report.seed = seed;
  report.model_accuracy = composed_accuracy(bp, test);

  const size_t n = test.size();
  const size_t img_numel = test.height() * test.width();
  const size_t chunk = 512;
  for (const auto& ta : attackers) {
    if (ta.net.params().empty())
      throw Error("attacker " + ta.spec.name + " has no trained parameters");
    if (shape_numel(ta.net.output_shape()) != img_numel)
      throw ShapeError("attacker " + ta.spec.name + " outputs " +
                       shape_str(ta.net.output_shape()) + ", images have " +
                       std::to_string(img_numel) + " pixels");
    double se_sum = 0.0, ssim_sum = 0.0;
    size_t hits = 0;
    for (size_t at = 0; at < n; at += chunk) {
      std::vector<size_t> idx;
      for (size_t i = at; i < std::min(n, at + chunk); ++i) idx.push_back(i);
      auto [imgs, labels] = gather(test, idx);
      Tensor<T> x = detail::shape_batch<T>(imgs, bp.local.input_shape());
      Tensor<T> x_img = detail::image_batch<T>(imgs);
      Tensor<T> recon = ta.net.forward(bp.local.forward(x, Mode::eval));
      detail::clip_pixels(recon, range);
      Tensor<T> recon_img = recon.reshaped(x_img.shape());
      se_sum += mse(recon_img, x_img) * static_cast<double>(idx.size());
      ssim_sum += ssim(recon_img, x_img, range) * static_cast<double>(idx.size());
      const std::vector<int32_t> pred =
          predictions(bp.forward(recon.reshaped(x.shape())));
      for (size_t i = 0; i < labels.size(); ++i) hits += pred[i] == labels[i];
    }
    report.rows.push_back({ta.spec.name, se_sum / static_cast<double>(n),
                           ssim_sum / static_cast<double>(n),
                           static_cast<double>(hits) / static_cast<double>(n)});
  }
  for (size_t i = 1; i < report.rows.size(); ++i) {
    if (report.rows[i].mse < report.rows[report.best_mse].mse)
      report.best_mse = i;
    if (report.rows[i].ssim > report.rows[report.best_ssim].ssim)
      report.best_ssim = i;
    if (report.rows[i].reprint_accuracy >
        report.rows[report.best_reprint].reprint_accuracy)
      report.best_reprint = i;
  }
  return report;
}

}  // namespace privpart
