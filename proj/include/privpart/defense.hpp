#pragma once

#include <cmath>
#include <limits>
#include <ostream>
#include <string>
#include <utility>
#include <vector>

#include "privpart/data.hpp"
#include "privpart/log.hpp"
#include "privpart/metrics.hpp"
#include "privpart/nn.hpp"
#include "privpart/optim.hpp"
#include "privpart/partition.hpp"

namespace privpart {

// An adversary stand-in trained alongside the model: maps the cut activation
// back toward the input image.
struct DefenderSpec {
  std::string name;
  std::vector<LayerSpec> layers;
  OptimizerConfig opt = OptimizerConfig::adam(1e-3);
};

struct TrainingPlan {
  double lambda = 0.0;         // defender weight in the model objective
  size_t epochs = 10;
  size_t batch_size = 32;
  OptimizerConfig model_opt = OptimizerConfig::adam(1e-4);
  Distance metric = Distance::one_minus_ssim;
  size_t defender_steps = 1;   // k defender updates per model update
  uint64_t seed = 1;
  double val_fraction = 0.1;   // held out for checkpoint selection
  // Whether the local partition runs with dropout live while producing the
  // activations each side trains on.
  bool local_train_mode_for_model_step = true;
  bool local_train_mode_for_defender_step = false;

  void validate() const {
    if (lambda < 0.0) throw ConfigError("plan: lambda must be >= 0");
    if (epochs == 0) throw ConfigError("plan: epochs must be >= 1");
    if (batch_size == 0) throw ConfigError("plan: batch_size must be >= 1");
    if (defender_steps == 0) throw ConfigError("plan: defender steps must be >= 1");
    if (val_fraction < 0.0 || val_fraction >= 1.0)
      throw ConfigError("plan: val_fraction must be in [0,1)");
  }
};

template <typename T>
struct DefenderState {
  std::string name;
  Network<T> net;
  Optimizer<T> opt;
  ParamStore<T> best_params;  // snapshot at minimum selection-time d
  double best_d = std::numeric_limits<double>::infinity();
};

template <typename T>
struct TrainingResult {
  BipartiteNetwork<T> partition;  // best-validation checkpoint
  std::vector<DefenderState<T>> defenders;
  double best_val_accuracy = 0.0;
  size_t best_epoch = 0;  // 1-based epoch of the kept checkpoint
  std::vector<double> val_accuracy;  // one entry per epoch
};

namespace detail {

inline std::vector<std::vector<size_t>> batch_indices(size_t n, size_t batch,
                                                      Rng& shuffle_rng) {
  std::vector<size_t> order(n);
  for (size_t i = 0; i < n; ++i) order[i] = i;
  shuffle_rng.shuffle(order);
  std::vector<std::vector<size_t>> out;
  for (size_t at = 0; at < n; at += batch) {
    const size_t end = std::min(n, at + batch);
    out.emplace_back(order.begin() + at, order.begin() + end);
  }
  return out;
}

}  // namespace detail

// Composed accuracy of remote(local(x)) over a dataset, evaluated in chunks.
template <typename T>
double composed_accuracy(const BipartiteNetwork<T>& bp, const Dataset& ds,
                         size_t chunk = 1024) {
  if (ds.size() == 0) return 0.0;
  size_t hits = 0;
  for (size_t at = 0; at < ds.size(); at += chunk) {
    std::vector<size_t> idx;
    for (size_t i = at; i < std::min(ds.size(), at + chunk); ++i)
      idx.push_back(i);
    auto [imgs, labels] = gather(ds, idx);
    Tensor<T> x = detail::shape_batch<T>(imgs, bp.local.input_shape());
    const std::vector<int32_t> pred = predictions(bp.forward(x));
    for (size_t i = 0; i < labels.size(); ++i) hits += pred[i] == labels[i];
  }
  return static_cast<double>(hits) / static_cast<double>(ds.size());
}

// One optimizer step on the defender, minimizing d(x, defender(local(x))).
// The model is read-only here: h is computed off-tape. Returns the batch
// mean d before the update.
template <typename T>
double defender_step(const BipartiteNetwork<T>& bp, Network<T>& defender,
                     Optimizer<T>& def_opt, const Tensor<T>& h,
                     const Tensor<T>& x_img, Distance metric, Rng& def_rng) {
  Tape<T> tape;
  Var hin = tape.constant(h);
  auto fwd = defender.forward_tape(tape, hin, Mode::train, &def_rng, true);
  Var recon = tape.reshape(fwd.output, x_img.shape());
  Var d = distance_graph(tape, metric, recon, tape.constant(x_img));
  const double d_value = static_cast<double>(tape.scalar_value(d));
  if (!std::isfinite(d_value))
    throw DivergenceError("defender step produced non-finite d");
  tape.backward(d);
  std::vector<std::pair<std::string, Tensor<T>>> grads;
  for (const auto& [name, var] : fwd.params)
    grads.emplace_back(name, tape.grad(var));
  def_opt.step(defender.params(), grads);
  return d_value;
}

// Eval-mode reconstruction distance of one defender on a batch.
template <typename T>
double defender_distance(const Network<T>& defender, const Tensor<T>& h,
                         const Tensor<T>& x_img, Distance metric) {
  Tape<T> tape;
  auto fwd = defender.forward_tape(tape, tape.constant(h), Mode::eval, nullptr,
                                   false);
  Var recon = tape.reshape(fwd.output, x_img.shape());
  return static_cast<double>(tape.scalar_value(
      distance_graph(tape, metric, recon, tape.constant(x_img))));
}

struct ModelStepStats {
  double loss = 0.0;
  double ce = 0.0;
  double d = 0.0;  // defender term value (0 when no defender engaged)
  double batch_accuracy = 0.0;
};

// One optimizer step on {theta_l, theta_r} minimizing CE - lambda * d. The
// defender participates as a frozen eval-mode function: gradient flows
// through the local partition inside the defender term, but the defender's
// parameters stay untouched. With lambda == 0 (or no defender) the defender
// branch is never built, so the step is bitwise identical to plain
// supervised training.
template <typename T>
ModelStepStats model_step(BipartiteNetwork<T>& bp,
                             const Network<T>* defender,
                             Optimizer<T>& local_opt, Optimizer<T>& remote_opt,
                             const Tensor<T>& x, const Tensor<T>& x_img,
                             const std::vector<int32_t>& labels, double lambda,
                             Distance metric, Rng& model_rng,
                             bool local_train_mode) {
  Tape<T> tape;
  Var xin = tape.constant(x);
  auto local_fwd = bp.local.forward_tape(
      tape, xin, local_train_mode ? Mode::train : Mode::eval, &model_rng, true);
  auto remote_fwd =
      bp.remote.forward_tape(tape, local_fwd.output, Mode::train, &model_rng, true);
  Var ce = tape.cross_entropy(remote_fwd.output, labels);

  ModelStepStats stats;
  Var loss = ce;
  if (defender && lambda > 0.0) {
    auto def_fwd = defender->forward_tape(tape, local_fwd.output, Mode::eval,
                                          nullptr, false);
    Var recon = tape.reshape(def_fwd.output, x_img.shape());
    Var d = distance_graph(tape, metric, recon, tape.constant(x_img));
    stats.d = static_cast<double>(tape.scalar_value(d));
    loss = tape.sub(ce, tape.scale(d, static_cast<T>(lambda)));
  }
  stats.ce = static_cast<double>(tape.scalar_value(ce));
  stats.loss = static_cast<double>(tape.scalar_value(loss));
  stats.batch_accuracy = accuracy(tape.value(remote_fwd.output), labels);

  tape.backward(loss);
  std::vector<std::pair<std::string, Tensor<T>>> local_grads, remote_grads;
  for (const auto& [name, var] : local_fwd.params)
    local_grads.emplace_back(name, tape.grad(var));
  for (const auto& [name, var] : remote_fwd.params)
    remote_grads.emplace_back(name, tape.grad(var));
  local_opt.step(bp.local.params(), local_grads);
  remote_opt.step(bp.remote.params(), remote_grads);
  return stats;
}

namespace detail {

template <typename T>
TrainingResult<T> train_loop(Network<T> model, size_t cut,
                             const std::vector<DefenderSpec>& suite,
                             const TrainingPlan& plan, const Dataset& data,
                             std::ostream* log_csv) {
  plan.validate();
  if (data.size() == 0) throw Error("training requires a nonempty dataset");
  Rng root(plan.seed);
  Rng shuffle_rng = root.fork(1);
  Rng model_rng = root.fork(2);
  Rng local_def_rng = root.fork(3);

  if (model.params().empty()) {
    Rng init_rng = root.fork(0);
    model.init_params(init_rng);
  }
  BipartiteNetwork<T> bp = split(model, cut);

  const size_t img_numel = data.height() * data.width();
  TrainingResult<T> result;
  for (size_t j = 0; j < suite.size(); ++j) {
    const DefenderSpec& spec = suite[j];
    Network<T> net(bp.hidden_shape, spec.layers);
    if (shape_numel(net.output_shape()) != img_numel)
      throw ShapeError("defender " + spec.name + " outputs " +
                       shape_str(net.output_shape()) + ", images have " +
                       std::to_string(img_numel) + " pixels");
    Rng init_rng = root.fork(100 + j);
    net.init_params(init_rng);
    result.defenders.push_back(DefenderState<T>{
        spec.name, std::move(net), Optimizer<T>(spec.opt), {},
        std::numeric_limits<double>::infinity()});
  }
  std::vector<Rng> defender_rngs;
  for (size_t j = 0; j < suite.size(); ++j)
    defender_rngs.push_back(root.fork(200 + j));

  Optimizer<T> local_opt(plan.model_opt);
  Optimizer<T> remote_opt(plan.model_opt);

  Dataset train = data, val;
  if (plan.val_fraction > 0.0) {
    auto halves = stratified_split(data, 1.0 - plan.val_fraction, plan.seed);
    train = std::move(halves.first);
    val = std::move(halves.second);
  }

  if (log_csv) {
    *log_csv << "epoch,batch,loss";
    for (const auto& d : result.defenders) *log_csv << ",d:" << d.name;
    *log_csv << ",selected,accuracy\n";
  }

  ParamStore<T> best_local, best_remote;
  double best_val = -1.0;
  size_t best_epoch = 0;

  for (size_t epoch = 1; epoch <= plan.epochs; ++epoch) {
    const auto batches =
        detail::batch_indices(train.size(), plan.batch_size, shuffle_rng);
    for (size_t b = 0; b < batches.size(); ++b) {
      auto [imgs, labels] = gather(train, batches[b]);
      Tensor<T> x = detail::shape_batch<T>(imgs, bp.local.input_shape());
      Tensor<T> x_img = detail::image_batch<T>(imgs);

      // Defender phase: theta_l frozen, so the cut activation is computed
      // once unless train-mode local dropout is requested.
      std::vector<double> selection_d(result.defenders.size());
      size_t selected = 0;
      if (!result.defenders.empty()) {
        Tensor<T> h_eval = bp.local.forward(x, Mode::eval);
        for (size_t j = 0; j < result.defenders.size(); ++j) {
          DefenderState<T>& def = result.defenders[j];
          for (size_t s = 0; s < plan.defender_steps; ++s) {
            Tensor<T> h =
                plan.local_train_mode_for_defender_step
                    ? bp.local.forward(x, Mode::train, &local_def_rng)
                    : h_eval;
            defender_step(bp, def.net, def.opt, h, x_img, plan.metric,
                          defender_rngs[j]);
          }
        }
        // Post-update pick: the strongest reconstructor sets the model's
        // adversarial pressure this batch.
        for (size_t j = 0; j < result.defenders.size(); ++j) {
          selection_d[j] = defender_distance(result.defenders[j].net, h_eval,
                                             x_img, plan.metric);
          if (!std::isfinite(selection_d[j]))
            throw DivergenceError("defender " + result.defenders[j].name +
                                  " diverged (non-finite d) at epoch " +
                                  std::to_string(epoch) + " batch " +
                                  std::to_string(b));
          if (selection_d[j] < selection_d[selected]) selected = j;
          DefenderState<T>& def = result.defenders[j];
          if (selection_d[j] < def.best_d) {
            def.best_d = selection_d[j];
            def.best_params = def.net.params().deep_clone();
          }
        }
      }

      const Network<T>* adversary =
          result.defenders.empty() ? nullptr : &result.defenders[selected].net;
      ModelStepStats stats = model_step(
          bp, adversary, local_opt, remote_opt, x, x_img, labels, plan.lambda,
          plan.metric, model_rng, plan.local_train_mode_for_model_step);

      if (!std::isfinite(stats.loss) ||
          std::fabs(plan.lambda * stats.d) > 1e6)
        throw DivergenceError(
            "training diverged at epoch " + std::to_string(epoch) + " batch " +
            std::to_string(b) + ": loss=" + std::to_string(stats.loss) +
            " lambda*d=" + std::to_string(plan.lambda * stats.d));

      if (log_csv) {
        *log_csv << epoch << ',' << b << ',' << stats.loss;
        for (double dj : selection_d) *log_csv << ',' << dj;
        *log_csv << ','
                 << (result.defenders.empty()
                         ? std::string()
                         : result.defenders[selected].name)
                 << ',' << stats.batch_accuracy << '\n';
      }
    }

    local_opt.on_epoch_end(epoch);
    remote_opt.on_epoch_end(epoch);
    for (auto& def : result.defenders) def.opt.on_epoch_end(epoch);

    const double val_acc = val.size() ? composed_accuracy(bp, val)
                                      : composed_accuracy(bp, train);
    result.val_accuracy.push_back(val_acc);
    // Ties keep the later epoch: more defender pressure has been absorbed.
    if (val_acc >= best_val) {
      best_val = val_acc;
      best_epoch = epoch;
      best_local = bp.local.params().deep_clone();
      best_remote = bp.remote.params().deep_clone();
    }
    if (log_csv)
      *log_csv << "# epoch " << epoch << " val_accuracy " << val_acc
               << (best_epoch == epoch ? " (checkpoint)" : "") << '\n';
    log_info("epoch " + std::to_string(epoch) + " val_accuracy " +
             std::to_string(val_acc));
  }

  bp.local.params() = best_local;
  bp.remote.params() = best_remote;
  result.partition = std::move(bp);
  result.best_val_accuracy = best_val;
  result.best_epoch = best_epoch;
  for (auto& def : result.defenders)
    if (!def.best_params.empty()) def.net.params() = def.best_params;
  return result;
}

}  // namespace detail

// The multi-defender learning phase. Per batch: k defender steps for each
// defender, then one model step against the defender whose reconstruction is
// currently closest to the inputs.
template <typename T>
TrainingResult<T> train_with_defenders(Network<T> model, size_t cut,
                                       const std::vector<DefenderSpec>& suite,
                                       const TrainingPlan& plan,
                                       const Dataset& data,
                                       std::ostream* log_csv = nullptr) {
  if (suite.empty())
    throw Error("train_with_defenders: defender suite is empty "
                "(use train_plain for defender-free training)");
  return detail::train_loop(std::move(model), cut, suite, plan, data, log_csv);
}

// Defender-free supervised training of the same bipartite structure.
template <typename T>
TrainingResult<T> train_plain(Network<T> model, size_t cut,
                              const TrainingPlan& plan, const Dataset& data,
                              std::ostream* log_csv = nullptr) {
  return detail::train_loop(std::move(model), cut, {}, plan, data, log_csv);
}

struct OnlineReport {
  size_t samples = 0;
  size_t steps = 0;
  double accuracy_before = 0.0;
  double accuracy_after = 0.0;
};

// Continuous-learning phase: the local partition is locked at deployment and
// only the remote partition trains, on activations it receives. Local
// parameters are never touched, by construction and by contract.
template <typename T>
OnlineReport online_update_remote(BipartiteNetwork<T>& bp,
                                  const Dataset& updates,
                                  const Dataset& holdout,
                                  const TrainingPlan& plan) {
  if (!bp.local_locked)
    throw Error("online update requires a locked local partition");
  plan.validate();
  OnlineReport report;
  report.samples = updates.size();
  report.accuracy_before = composed_accuracy(bp, holdout);
  if (updates.size() == 0) {
    report.accuracy_after = report.accuracy_before;
    return report;
  }

  Rng root(plan.seed);
  Rng shuffle_rng = root.fork(11);
  Rng remote_rng = root.fork(12);
  Optimizer<T> remote_opt(plan.model_opt);

  // The data owner ships activations, not images.
  Tensor<T> x_all =
      detail::shape_batch<T>(updates.images, bp.local.input_shape());
  Tensor<T> h_all = bp.local.forward(x_all, Mode::eval);
  Shape h_sample(h_all.shape().begin() + 1, h_all.shape().end());

  for (size_t epoch = 1; epoch <= plan.epochs; ++epoch) {
    const auto batches =
        detail::batch_indices(updates.size(), plan.batch_size, shuffle_rng);
    for (const auto& idx : batches) {
      const size_t stride = h_all.size() / h_all.dim(0);
      Shape bshape{idx.size()};
      bshape.insert(bshape.end(), h_sample.begin(), h_sample.end());
      Tensor<T> h(bshape);
      std::vector<int32_t> labels(idx.size());
      for (size_t i = 0; i < idx.size(); ++i) {
        std::copy(h_all.data() + idx[i] * stride,
                  h_all.data() + (idx[i] + 1) * stride, h.data() + i * stride);
        labels[i] = updates.labels[idx[i]];
      }
      Tape<T> tape;
      auto fwd = bp.remote.forward_tape(tape, tape.constant(h), Mode::train,
                                        &remote_rng, true);
      Var loss = tape.cross_entropy(fwd.output, labels);
      if (!std::isfinite(static_cast<double>(tape.scalar_value(loss))))
        throw DivergenceError("online update diverged");
      tape.backward(loss);
      std::vector<std::pair<std::string, Tensor<T>>> grads;
      for (const auto& [name, var] : fwd.params)
        grads.emplace_back(name, tape.grad(var));
      remote_opt.step(bp.remote.params(), grads);
      ++report.steps;
    }
    remote_opt.on_epoch_end(epoch);
  }
  report.accuracy_after = composed_accuracy(bp, holdout);
  return report;
}

}  // namespace privpart
