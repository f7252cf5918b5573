#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <sstream>

#include "privpart/defense.hpp"
#include "privpart/grad_check.hpp"

using namespace privpart;
using Catch::Approx;

namespace {

bool params_equal(const ParamStore<float>& a, const ParamStore<float>& b) {
  if (a.names() != b.names()) return false;
  for (const auto& name : a.names())
    if (!a.at(name).bitwise_equal(b.at(name))) return false;
  return true;
}

// Local partition with an orthogonal (signed permutation) square weight, so
// a linear defender has an exact inverse to find.
BipartiteNetwork<float> orthogonal_local(size_t n, uint64_t seed) {
  Network<float> net({n}, {LayerSpec::dense(n, Activation::none),
                           LayerSpec::dense(4, Activation::none)});
  Rng rng(seed);
  net.init_params(rng);
  Tensor<float> w({n, n});
  std::vector<size_t> perm(n);
  for (size_t i = 0; i < n; ++i) perm[i] = i;
  rng.shuffle(perm);
  for (size_t i = 0; i < n; ++i)
    w[i * n + perm[i]] = rng.uniform() < 0.5 ? -1.0f : 1.0f;
  net.params().at("L0.W") = w;
  return split(net, 1);
}

}  // namespace

TEST_CASE("linear defender inverts an orthogonal local map") {
  const size_t n = 16, batch = 64;
  BipartiteNetwork<float> bp = orthogonal_local(n, 3);
  Network<float> defender({n}, {LayerSpec::dense(n, Activation::none)});
  Rng drng(4);
  defender.init_params(drng);
  Optimizer<float> opt(OptimizerConfig::sgd(9.0));

  Tensor<float> x({batch, n});
  Rng xr(5);
  for (size_t i = 0; i < x.size(); ++i)
    x[i] = static_cast<float>(2.0 * xr.uniform() - 1.0);
  Tensor<float> x_img = x.reshaped({batch, 1, 4, 4});
  Tensor<float> h = bp.local.forward(x);

  ParamStore<float> local_before = bp.local.params().deep_clone();
  ParamStore<float> remote_before = bp.remote.params().deep_clone();

  Rng unused(6);
  std::vector<double> ds;
  for (int s = 0; s < 300; ++s)
    ds.push_back(
        defender_step(bp, defender, opt, h, x_img, Distance::mse, unused));

  for (size_t s = 1; s < ds.size(); ++s)
    CHECK(ds[s] <= ds[s - 1] + 1e-9);
  CHECK(ds.back() < 1e-3);
  // The recovered map times the local map should be near identity, i.e. the
  // defender undoes the signed permutation.
  CHECK(ds.front() > 10.0 * ds.back());

  CHECK(params_equal(bp.local.params(), local_before));
  CHECK(params_equal(bp.remote.params(), remote_before));
}

TEST_CASE("model step leaves defender parameters untouched") {
  BipartiteNetwork<float> bp = orthogonal_local(16, 7);
  Network<float> defender({16}, {LayerSpec::dense(16, Activation::none)});
  Rng drng(8);
  defender.init_params(drng);
  ParamStore<float> def_before = defender.params().deep_clone();

  Optimizer<float> lo(OptimizerConfig::adam(1e-3)), ro(OptimizerConfig::adam(1e-3));
  Tensor<float> x({8, 16});
  Rng xr(9);
  for (size_t i = 0; i < x.size(); ++i)
    x[i] = static_cast<float>(xr.uniform());
  Rng mrng(10);
  ModelStepStats stats = model_step(
      bp, &defender, lo, ro, x, x.reshaped({8, 1, 4, 4}),
      std::vector<int32_t>{0, 1, 2, 3, 0, 1, 2, 3}, 5.0, Distance::mse, mrng,
      true);
  CHECK(std::isfinite(stats.loss));
  CHECK(stats.d > 0.0);
  CHECK(stats.loss == Approx(stats.ce - 5.0 * stats.d).margin(1e-5));
  CHECK(params_equal(defender.params(), def_before));
  // The model moved.
  CHECK_FALSE(bp.local.params().at("L0.W").bitwise_equal(
      orthogonal_local(16, 7).local.params().at("L0.W")));
}

TEST_CASE("lambda zero model step is bitwise plain supervised training") {
  auto make = [] { return orthogonal_local(16, 11); };
  BipartiteNetwork<float> with_def = make();
  BipartiteNetwork<float> without = make();
  Network<float> defender({16}, {LayerSpec::dense(16, Activation::sigmoid)});
  Rng drng(12);
  defender.init_params(drng);

  Tensor<float> x({8, 16});
  Rng xr(13);
  for (size_t i = 0; i < x.size(); ++i)
    x[i] = static_cast<float>(xr.uniform());
  const std::vector<int32_t> labels{0, 1, 2, 3, 0, 1, 2, 3};

  Optimizer<float> lo1(OptimizerConfig::adam(1e-3)), ro1(OptimizerConfig::adam(1e-3));
  Optimizer<float> lo2(OptimizerConfig::adam(1e-3)), ro2(OptimizerConfig::adam(1e-3));
  Rng r1(14), r2(14);
  model_step(with_def, &defender, lo1, ro1, x, x.reshaped({8, 1, 4, 4}),
             labels, 0.0, Distance::mse, r1, true);
  model_step(without, static_cast<const Network<float>*>(nullptr), lo2, ro2, x,
             x.reshaped({8, 1, 4, 4}), labels, 0.0, Distance::mse, r2, true);
  CHECK(params_equal(with_def.local.params(), without.local.params()));
  CHECK(params_equal(with_def.remote.params(), without.remote.params()));
}

TEST_CASE("combined objective gradient matches finite differences") {
  Network<double> model({9}, {LayerSpec::dense(7, Activation::tanh),
                              LayerSpec::dense(4, Activation::none)});
  Rng mr(15);
  model.init_params(mr);
  BipartiteNetwork<double> bp = split(model, 1);
  Network<double> defender({7}, {LayerSpec::dense(9, Activation::sigmoid)});
  Rng dr(16);
  defender.init_params(dr);

  Tensor<double> x({5, 9});
  Rng xr(17);
  for (size_t i = 0; i < x.size(); ++i) x[i] = xr.uniform();
  Tensor<double> x_img = x.reshaped({5, 1, 3, 3});
  const std::vector<int32_t> labels{0, 1, 2, 3, 1};
  const double lambda = 3.0;

  // Parameter order: local L0.W, L0.b, then remote L0.W, L0.b.
  auto loss_fn = [&](const std::vector<Tensor<double>>& ps) {
    BipartiteNetwork<double> net = bp;
    net.local.params() = bp.local.params().deep_clone();
    net.remote.params() = bp.remote.params().deep_clone();
    net.local.params().at("L0.W") = ps[0].clone();
    net.local.params().at("L0.b") = ps[1].clone();
    net.remote.params().at("L0.W") = ps[2].clone();
    net.remote.params().at("L0.b") = ps[3].clone();
    Tape<double> t;
    auto lf = net.local.forward_tape(t, t.constant(x), Mode::train, nullptr, true);
    auto rf = net.remote.forward_tape(t, lf.output, Mode::train, nullptr, true);
    Var ce = t.cross_entropy(rf.output, labels);
    auto df = defender.forward_tape(t, lf.output, Mode::eval, nullptr, false);
    Var d = distance_graph(t, Distance::mse, t.reshape(df.output, x_img.shape()),
                           t.constant(x_img));
    return t.scalar_value(t.sub(ce, t.scale(d, lambda)));
  };

  Tape<double> t;
  auto lf = bp.local.forward_tape(t, t.constant(x), Mode::train, nullptr, true);
  auto rf = bp.remote.forward_tape(t, lf.output, Mode::train, nullptr, true);
  Var ce = t.cross_entropy(rf.output, labels);
  auto df = defender.forward_tape(t, lf.output, Mode::eval, nullptr, false);
  Var d = distance_graph(t, Distance::mse, t.reshape(df.output, x_img.shape()),
                         t.constant(x_img));
  t.backward(t.sub(ce, t.scale(d, lambda)));

  std::vector<Tensor<double>> params{
      bp.local.params().at("L0.W").clone(), bp.local.params().at("L0.b").clone(),
      bp.remote.params().at("L0.W").clone(), bp.remote.params().at("L0.b").clone()};
  std::vector<Tensor<double>> analytic;
  for (size_t i = 0; i < 2; ++i) analytic.push_back(t.grad(lf.params[i].second));
  for (size_t i = 0; i < 2; ++i) analytic.push_back(t.grad(rf.params[i].second));
  GradCheckResult res = check_gradients(loss_fn, params, analytic);
  INFO(res.describe());
  CHECK(res.ok(1e-4));
}

namespace {

Network<float> blob_model(size_t hidden) {
  return Network<float>({784}, {LayerSpec::dense(hidden, Activation::relu),
                                LayerSpec::dropout(0.1),
                                LayerSpec::dense(10, Activation::none)});
}

DefenderSpec blob_defender(const std::string& name) {
  return DefenderSpec{name,
                      {LayerSpec::dense(784, Activation::sigmoid)},
                      OptimizerConfig::adam(1e-3)};
}

TrainingPlan quick_plan(double lambda, size_t epochs, uint64_t seed) {
  TrainingPlan plan;
  plan.lambda = lambda;
  plan.epochs = epochs;
  plan.batch_size = 32;
  plan.model_opt = OptimizerConfig::adam(2e-3);
  plan.metric = Distance::one_minus_ssim;
  plan.seed = seed;
  return plan;
}

}  // namespace

TEST_CASE("plain training learns the synthetic classes") {
  Dataset data = synthetic_blobs(10, 40, 28, 31);
  TrainingResult<float> res =
      train_plain(blob_model(32), 1, quick_plan(0.0, 4, 31), data);
  CHECK(res.val_accuracy.size() == 4);
  CHECK(res.best_val_accuracy > 0.5);
  CHECK(res.best_val_accuracy ==
        *std::max_element(res.val_accuracy.begin(), res.val_accuracy.end()));
  // The kept checkpoint reproduces its recorded validation accuracy.
  auto [train_half, val_half] = stratified_split(data, 0.9, 31);
  CHECK(composed_accuracy(res.partition, val_half) ==
        Approx(res.best_val_accuracy));
}

TEST_CASE("training is reproducible per seed") {
  Dataset data = synthetic_blobs(10, 20, 28, 33);
  auto run = [&] {
    return train_with_defenders(blob_model(24), 1, {blob_defender("d1")},
                                quick_plan(100.0, 2, 7), data);
  };
  TrainingResult<float> a = run();
  TrainingResult<float> b = run();
  CHECK(params_equal(a.partition.local.params(), b.partition.local.params()));
  CHECK(params_equal(a.partition.remote.params(), b.partition.remote.params()));
  CHECK(params_equal(a.defenders[0].net.params(), b.defenders[0].net.params()));

  TrainingResult<float> c = train_with_defenders(
      blob_model(24), 1, {blob_defender("d1")}, quick_plan(100.0, 2, 8), data);
  CHECK_FALSE(
      params_equal(a.partition.local.params(), c.partition.local.params()));
}

TEST_CASE("lambda zero training with defenders equals plain training bitwise") {
  Dataset data = synthetic_blobs(10, 20, 28, 35);
  TrainingResult<float> with_def = train_with_defenders(
      blob_model(24), 1, {blob_defender("d1"), blob_defender("d2")},
      quick_plan(0.0, 2, 9), data);
  TrainingResult<float> plain =
      train_plain(blob_model(24), 1, quick_plan(0.0, 2, 9), data);
  CHECK(params_equal(with_def.partition.local.params(),
                     plain.partition.local.params()));
  CHECK(params_equal(with_def.partition.remote.params(),
                     plain.partition.remote.params()));
  CHECK(with_def.val_accuracy == plain.val_accuracy);
  // The defenders did train, they just could not reach the model.
  CHECK(with_def.defenders[0].best_d <
        std::numeric_limits<double>::infinity());
}

TEST_CASE("training log has the documented csv layout") {
  Dataset data = synthetic_blobs(10, 15, 28, 37);
  std::ostringstream log;
  train_with_defenders(blob_model(16), 1,
                       {blob_defender("da"), blob_defender("db")},
                       quick_plan(50.0, 2, 11), data, &log);
  std::istringstream in(log.str());
  std::string line;
  REQUIRE(std::getline(in, line));
  CHECK(line == "epoch,batch,loss,d:da,d:db,selected,accuracy");
  size_t rows = 0, comments = 0;
  while (std::getline(in, line)) {
    if (line.starts_with("#")) {
      ++comments;
      CHECK(line.find("val_accuracy") != std::string::npos);
      continue;
    }
    ++rows;
    std::vector<std::string> cells;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) cells.push_back(cell);
    REQUIRE(cells.size() == 7);
    CHECK((cells[5] == "da" || cells[5] == "db"));
    CHECK(std::stod(cells[3]) >= 0.0);
    CHECK(std::stod(cells[6]) >= 0.0);
  }
  // 130 train samples in batches of 32 is 5 batches per epoch, 2 epochs.
  CHECK(rows == 10);
  CHECK(comments == 2);
}

TEST_CASE("empty defender suite is rejected") {
  Dataset data = synthetic_blobs(10, 10, 28, 39);
  CHECK_THROWS_WITH(
      train_with_defenders(blob_model(16), 1, {}, quick_plan(100.0, 1, 1), data),
      Catch::Matchers::ContainsSubstring("suite is empty"));
}

TEST_CASE("misshapen defender is rejected with its name") {
  Dataset data = synthetic_blobs(10, 10, 28, 41);
  DefenderSpec bad{"tiny", {LayerSpec::dense(100, Activation::sigmoid)}};
  CHECK_THROWS_WITH(train_with_defenders(blob_model(16), 1, {bad},
                                         quick_plan(100.0, 1, 1), data),
                    Catch::Matchers::ContainsSubstring("tiny"));
}

TEST_CASE("exploding defender term trips the divergence guard") {
  Dataset data = synthetic_blobs(10, 10, 28, 43);
  DefenderSpec wild{"wild",
                    {LayerSpec::dense(784, Activation::none)},
                    OptimizerConfig::sgd(1e8)};
  TrainingPlan plan = quick_plan(1000.0, 2, 13);
  plan.metric = Distance::mse;
  CHECK_THROWS_AS(
      train_with_defenders(blob_model(16), 1, {wild}, plan, data),
      DivergenceError);
}

TEST_CASE("plan validation rejects bad fields") {
  CHECK_THROWS_AS(
      [] {
        TrainingPlan p;
        p.lambda = -1.0;
        p.validate();
      }(),
      ConfigError);
  CHECK_THROWS_AS(
      [] {
        TrainingPlan p;
        p.epochs = 0;
        p.validate();
      }(),
      ConfigError);
  CHECK_THROWS_AS(
      [] {
        TrainingPlan p;
        p.defender_steps = 0;
        p.validate();
      }(),
      ConfigError);
}

TEST_CASE("online updates touch only the remote partition") {
  Dataset data = synthetic_blobs(10, 30, 28, 45);
  auto [train_half, holdout] = stratified_split(data, 0.8, 45);
  TrainingResult<float> res =
      train_plain(blob_model(24), 1, quick_plan(0.0, 3, 15), train_half);
  BipartiteNetwork<float> bp = std::move(res.partition);

  SECTION("unlocked partition is refused") {
    TrainingPlan plan = quick_plan(0.0, 1, 16);
    CHECK_THROWS_WITH(online_update_remote(bp, train_half, holdout, plan),
                      Catch::Matchers::ContainsSubstring("locked"));
  }

  SECTION("update improves or holds accuracy and freezes local") {
    bp.lock_local();
    ParamStore<float> local_before = bp.local.params().deep_clone();
    ParamStore<float> remote_before = bp.remote.params().deep_clone();
    TrainingPlan plan = quick_plan(0.0, 2, 16);
    plan.model_opt = OptimizerConfig::adam(5e-4);
    OnlineReport rep = online_update_remote(bp, train_half, holdout, plan);
    CHECK(rep.samples == train_half.size());
    CHECK(rep.steps > 0);
    CHECK(params_equal(bp.local.params(), local_before));
    CHECK_FALSE(params_equal(bp.remote.params(), remote_before));
    CHECK(rep.accuracy_after >= rep.accuracy_before - 0.005);
    CHECK(rep.accuracy_after == Approx(composed_accuracy(bp, holdout)));
  }

  SECTION("empty update set is a validation-only no-op") {
    bp.lock_local();
    ParamStore<float> remote_before = bp.remote.params().deep_clone();
    OnlineReport rep = online_update_remote(bp, synthetic_blobs(10, 0, 28, 1), holdout,
                                            quick_plan(0.0, 1, 17));
    CHECK(rep.steps == 0);
    CHECK(rep.accuracy_before == rep.accuracy_after);
    CHECK(params_equal(bp.remote.params(), remote_before));
  }
}
