#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <sstream>

#include "privpart/attack.hpp"

using namespace privpart;
using Catch::Approx;

namespace {

bool params_equal(const ParamStore<float>& a, const ParamStore<float>& b) {
  if (a.names() != b.names()) return false;
  for (const auto& name : a.names())
    if (!a.at(name).bitwise_equal(b.at(name))) return false;
  return true;
}

// 8x8 images with uniform pixels and a local partition that passes them
// through unchanged, so reconstruction from the cut is exactly solvable.
Dataset uniform_images(size_t n, uint64_t seed) {
  Dataset ds;
  ds.images = Tensor<float>({n, 8, 8});
  Rng rng(seed);
  for (size_t i = 0; i < ds.images.size(); ++i)
    ds.images[i] = static_cast<float>(rng.uniform());
  ds.labels.resize(n);
  for (size_t i = 0; i < n; ++i) ds.labels[i] = static_cast<int32_t>(i % 4);
  ds.classes = 4;
  return ds;
}

BipartiteNetwork<float> identity_local(uint64_t seed) {
  Network<float> net({64}, {LayerSpec::dense(64, Activation::none),
                            LayerSpec::dense(4, Activation::none)});
  Rng rng(seed);
  net.init_params(rng);
  Tensor<float> eye({64, 64});
  for (size_t i = 0; i < 64; ++i) eye[i * 64 + i] = 1.0f;
  net.params().at("L0.W") = eye;
  net.params().at("L0.b") = Tensor<float>({64});
  return split(net, 1);
}

TrainedAttacker<float> manual_attacker(const std::string& name, float w_diag,
                                       float bias) {
  AttackerSpec spec{name, {LayerSpec::dense(64, Activation::none)}};
  Network<float> net({64}, spec.layers);
  Rng rng(1);
  net.init_params(rng);
  Tensor<float> w({64, 64}), b({64});
  for (size_t i = 0; i < 64; ++i) w[i * 64 + i] = w_diag;
  for (size_t i = 0; i < 64; ++i) b[i] = bias;
  net.params().at("L0.W") = w;
  net.params().at("L0.b") = b;
  return {spec, std::move(net), 0.0, 1, {0.0}};
}

}  // namespace

TEST_CASE("stock catalog lists the eight reconstructors") {
  const auto catalog = builtin_catalog(784, 800);
  REQUIRE(catalog.size() == 8);
  const std::vector<std::string> names{"a1", "a2", "a3", "a4",
                                       "a5", "a6", "a7", "a8"};
  for (size_t i = 0; i < 8; ++i) {
    CHECK(catalog[i].name == names[i]);
    Network<float> net({800}, catalog[i].layers);
    CHECK(shape_numel(net.output_shape()) == 784);
    CHECK(catalog[i].layers.back().act == Activation::sigmoid);
  }
  CHECK(catalog[7].layers.size() == 1);
  CHECK(catalog[1].layers[1].kind == LayerSpec::Kind::dropout);
  CHECK(catalog[1].layers[1].rate == 0.1);
  CHECK(catalog[6].layers[0].kind == LayerSpec::Kind::conv1d);
  CHECK(catalog[6].layers[0].kernel == 3);
  CHECK(catalog[6].layers[0].stride == 1);
  CHECK(catalog[6].layers[0].pad == 1);
  CHECK(catalog[4].layers[0].units == 512);
  CHECK(catalog[5].layers[0].units == 1024);
  CHECK_THROWS_AS(builtin_catalog(0, 800), ConfigError);
}

TEST_CASE("conv catalog covers the three decoder families") {
  const auto catalog = builtin_catalog_conv({4, 7, 7}, 28, 28);
  REQUIRE(catalog.size() == 3);
  CHECK(catalog[0].name == "deconv");
  CHECK(catalog[1].name == "fc");
  CHECK(catalog[2].name == "sparse_fc");
  Network<float> deconv({4, 7, 7}, catalog[0].layers);
  CHECK(deconv.output_shape() == Shape{1, 28, 28});
  Network<float> fc({4, 7, 7}, catalog[1].layers);
  CHECK(shape_numel(fc.output_shape()) == 784);
  bool has_half_dropout = false;
  for (const auto& l : catalog[2].layers)
    has_half_dropout |= l.kind == LayerSpec::Kind::dropout && l.rate == 0.5;
  CHECK(has_half_dropout);
  CHECK_THROWS_AS(builtin_catalog_conv({4, 5, 5}, 28, 28), ShapeError);
  CHECK_THROWS_AS(builtin_catalog_conv({784}, 28, 28), ShapeError);
}

TEST_CASE("linear attacker fully recovers a pass-through cut") {
  Dataset data = uniform_images(320, 21);
  Dataset test = uniform_images(64, 22);
  BipartiteNetwork<float> bp = identity_local(23);
  ParamStore<float> local_before = bp.local.params().deep_clone();

  AttackerSpec spec{"lin", {LayerSpec::dense(64, Activation::none)}};
  // The inverse is exactly realizable, so momentum SGD converges linearly
  // all the way down; Adam's step-size floor would stall above the pin.
  spec.opt = OptimizerConfig::sgd(1.0, 0.9);
  spec.epochs = 100;
  TrainedAttacker<float> ta = train_attacker(bp, spec, data, 5);
  CHECK(params_equal(bp.local.params(), local_before));
  CHECK(ta.val_mse.size() == 100);
  CHECK(ta.best_val_mse ==
        *std::min_element(ta.val_mse.begin(), ta.val_mse.end()));
  CHECK(ta.best_val_mse < 1e-4);

  AttackReport rep = evaluate_attack(bp, {ta}, test);
  REQUIRE(rep.rows.size() == 1);
  CHECK(rep.rows[0].mse < 1e-4);
  CHECK(rep.rows[0].ssim > 0.95);
}

TEST_CASE("attacker training is reproducible per seed") {
  Dataset data = uniform_images(120, 25);
  BipartiteNetwork<float> bp = identity_local(26);
  AttackerSpec spec{"lin", {LayerSpec::dense(64, Activation::sigmoid)}};
  spec.epochs = 3;
  TrainedAttacker<float> a = train_attacker(bp, spec, data, 9);
  TrainedAttacker<float> b = train_attacker(bp, spec, data, 9);
  CHECK(params_equal(a.net.params(), b.net.params()));
  CHECK(a.val_mse == b.val_mse);
  TrainedAttacker<float> c = train_attacker(bp, spec, data, 10);
  CHECK_FALSE(params_equal(a.net.params(), c.net.params()));
}

TEST_CASE("attacker validation rejects wrong output size and tiny data") {
  Dataset data = uniform_images(50, 27);
  BipartiteNetwork<float> bp = identity_local(28);
  AttackerSpec bad{"bad", {LayerSpec::dense(63, Activation::none)}};
  CHECK_THROWS_WITH(train_attacker(bp, bad, data, 1),
                    Catch::Matchers::ContainsSubstring("bad"));
  AttackerSpec ok{"ok", {LayerSpec::dense(64, Activation::none)}};
  CHECK_THROWS_AS(train_attacker(bp, ok, uniform_images(1, 29), 1), Error);
}

TEST_CASE("exploding attacker raises the divergence diagnostic") {
  Dataset data = uniform_images(80, 31);
  BipartiteNetwork<float> bp = identity_local(32);
  AttackerSpec wild{"wild", {LayerSpec::dense(64, Activation::none)}};
  wild.opt = OptimizerConfig::sgd(1e20);
  wild.epochs = 3;
  CHECK_THROWS_AS(train_attacker(bp, wild, data, 3), DivergenceError);
}

TEST_CASE("reconstructions are clipped to the pixel range before metrics") {
  Dataset test = uniform_images(40, 33);
  BipartiteNetwork<float> bp = identity_local(34);
  // W = 0, bias 100: every reconstructed pixel lands at 100 and must be
  // clipped to 1 before the metrics see it.
  TrainedAttacker<float> hot = manual_attacker("hot", 0.0f, 100.0f);
  AttackReport rep = evaluate_attack(bp, {hot}, test);
  double want = 0.0;
  for (size_t i = 0; i < test.images.size(); ++i) {
    const double e = 1.0 - static_cast<double>(test.images[i]);
    want += e * e;
  }
  want /= static_cast<double>(test.images.size());
  CHECK(rep.rows[0].mse == Approx(want).epsilon(1e-5));
}

TEST_CASE("perfect recovery reprints at exactly the model accuracy") {
  Dataset test = uniform_images(60, 35);
  BipartiteNetwork<float> bp = identity_local(36);
  TrainedAttacker<float> perfect = manual_attacker("perfect", 1.0f, 0.0f);
  TrainedAttacker<float> hot = manual_attacker("hot", 0.0f, 100.0f);
  AttackReport rep = evaluate_attack(bp, {hot, perfect}, test, 0.0, 77);
  REQUIRE(rep.rows.size() == 2);
  CHECK(rep.rows[1].mse == 0.0);
  CHECK(rep.rows[1].ssim == Approx(1.0).margin(1e-6));
  CHECK(rep.rows[1].reprint_accuracy == rep.model_accuracy);
  // Exact extrema over the rows.
  CHECK(rep.best_mse == 1);
  CHECK(rep.best_ssim == 1);
  CHECK(rep.rows[rep.best_reprint].reprint_accuracy ==
        std::max(rep.rows[0].reprint_accuracy, rep.rows[1].reprint_accuracy));
  CHECK(rep.seed == 77);
  CHECK(rep.cut == 1);
}

TEST_CASE("report serializes as csv and text") {
  Dataset test = uniform_images(30, 37);
  BipartiteNetwork<float> bp = identity_local(38);
  AttackReport rep = evaluate_attack(
      bp, {manual_attacker("p", 1.0f, 0.0f), manual_attacker("h", 0.0f, 2.0f)},
      test, 200.0, 5);
  std::istringstream csv(rep.to_csv());
  std::string line;
  REQUIRE(std::getline(csv, line));
  CHECK(line.starts_with("# lambda=200"));
  REQUIRE(std::getline(csv, line));
  CHECK(line == "attacker,mse,ssim,reprint_accuracy");
  size_t rows = 0;
  while (std::getline(csv, line)) {
    if (line.starts_with("#")) continue;
    ++rows;
    std::stringstream ss(line);
    std::string cell;
    std::vector<std::string> cells;
    while (std::getline(ss, cell, ',')) cells.push_back(cell);
    REQUIRE(cells.size() == 4);
    CHECK_NOTHROW(std::stod(cells[1]));
  }
  CHECK(rows == 2);
  const std::string text = rep.to_text();
  CHECK(text.find("strongest:") != std::string::npos);
  CHECK(text.find("lambda=200") != std::string::npos);
}

TEST_CASE("untrained attacker is rejected at evaluation") {
  Dataset test = uniform_images(20, 39);
  BipartiteNetwork<float> bp = identity_local(40);
  TrainedAttacker<float> empty;
  empty.spec.name = "ghost";
  CHECK_THROWS_WITH(evaluate_attack(bp, {empty}, test),
                    Catch::Matchers::ContainsSubstring("ghost"));
}

TEST_CASE("catalog attackers train end to end against a real partition") {
  Dataset data = synthetic_blobs(10, 16, 28, 41);
  Network<float> model({784}, {LayerSpec::dense(20, Activation::relu),
                               LayerSpec::dense(10, Activation::none)});
  Rng rng(42);
  model.init_params(rng);
  BipartiteNetwork<float> bp = split(model, 1);
  ParamStore<float> local_before = bp.local.params().deep_clone();

  auto catalog = builtin_catalog(784, 20);
  std::vector<TrainedAttacker<float>> trained;
  for (const auto& name : {"a2", "a7", "a8"}) {
    auto it = std::find_if(catalog.begin(), catalog.end(),
                           [&](const auto& s) { return s.name == name; });
    REQUIRE(it != catalog.end());
    it->epochs = 2;
    trained.push_back(train_attacker(bp, *it, data, 11));
  }
  CHECK(params_equal(bp.local.params(), local_before));
  AttackReport rep =
      evaluate_attack(bp, trained, synthetic_blobs(10, 6, 28, 43), 0.0, 11);
  REQUIRE(rep.rows.size() == 3);
  for (const auto& r : rep.rows) {
    CHECK(std::isfinite(r.mse));
    CHECK(r.ssim >= -1.0);
    CHECK(r.ssim <= 1.0);
    CHECK(r.reprint_accuracy >= 0.0);
    CHECK(r.reprint_accuracy <= 1.0);
  }
}
