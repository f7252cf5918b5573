// Command-line front end: train, attack, eval, dp-baseline, serve, infer,
// dump-activations. Every run is driven by a sectioned config file plus
// --set overrides, and writes a manifest.json recording the effective
// configuration hash and seeds so runs can be reproduced bit for bit.

#include <csignal>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <thread>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "privpart/attack.hpp"
#include "privpart/config.hpp"
#include "privpart/data.hpp"
#include "privpart/defense.hpp"
#include "privpart/dp.hpp"
#include "privpart/net.hpp"
#include "privpart/partition.hpp"
#include "privpart/wire.hpp"

namespace fs = std::filesystem;
using namespace privpart;

namespace {

enum class LogLevel { quiet = 0, info = 1, debug = 2 };

LogLevel log_level() {
  const char* env = std::getenv("PRIVPART_LOG");
  if (!env) return LogLevel::info;
  const std::string v = env;
  if (v == "quiet") return LogLevel::quiet;
  if (v == "debug") return LogLevel::debug;
  return LogLevel::info;
}

void info(const std::string& msg) {
  if (log_level() >= LogLevel::info) std::cerr << msg << "\n";
}

void debug(const std::string& msg) {
  if (log_level() >= LogLevel::debug) std::cerr << msg << "\n";
}

volatile std::sig_atomic_t g_interrupted = 0;

void on_signal(int) { g_interrupted = 1; }

struct SplitData {
  Dataset train;
  Dataset test;
};

SplitData load_data(const DatasetConfig& d) {
  if (d.source == "mnist") {
    info("loading idx dataset from " + d.path);
    return {load_mnist_dir(d.path, true), load_mnist_dir(d.path, false)};
  }
  Dataset all = synthetic_blobs(d.classes, d.per_class, d.side, d.seed);
  auto [train, test] = stratified_split(all, d.split, d.seed);
  info("dataset: " + all.source + ", train " + std::to_string(train.size()) +
       " / test " + std::to_string(test.size()));
  return {std::move(train), std::move(test)};
}

Shape model_input_shape(const std::vector<LayerSpec>& layers,
                        const Dataset& ds) {
  switch (layers.front().kind) {
    case LayerSpec::Kind::conv2d:
    case LayerSpec::Kind::deconv2d:
    case LayerSpec::Kind::maxpool2d:
      return {1, ds.height(), ds.width()};
    default:
      return {ds.height() * ds.width()};
  }
}

size_t numel(const Shape& s) {
  size_t n = 1;
  for (size_t d : s) n *= d;
  return n;
}

std::vector<AttackerSpec> catalog_for(const BipartiteNetwork<float>& bp,
                                      const Dataset& ds) {
  if (bp.hidden_shape.size() == 3)
    return builtin_catalog_conv(bp.hidden_shape, ds.height(), ds.width());
  return builtin_catalog(ds.height() * ds.width(), numel(bp.hidden_shape));
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  out << text;
}

// The manifest carries everything needed to reproduce and cross-check a run.
// No wall-clock fields: identical runs must produce identical manifests.
void write_manifest(const fs::path& out_dir, const std::string& command,
                    const ExperimentConfig& cfg,
                    const std::vector<std::string>& outputs) {
  nlohmann::json j;
  j["command"] = command;
  j["version"] = PRIVPART_VERSION_STRING;
  j["config_hash"] = hash_hex(cfg.hash());
  j["dataset"] = {{"source", cfg.dataset.source},
                  {"path", cfg.dataset.path},
                  {"classes", cfg.dataset.classes},
                  {"side", cfg.dataset.side}};
  j["seeds"] = {{"dataset", cfg.dataset.seed},
                {"defense", cfg.defense.seed},
                {"attack", cfg.attack.seed},
                {"dp", cfg.dp.seed}};
  j["outputs"] = outputs;
  write_text(out_dir / "manifest.json", j.dump(2) + "\n");
}

int cmd_train(const ExperimentConfig& cfg, const fs::path& out_dir) {
  SplitData data = load_data(cfg.dataset);
  const std::vector<LayerSpec> layers = cfg.model_layers();
  Network<float> model(model_input_shape(layers, data.train), layers);
  const TrainingPlan plan = cfg.training_plan();

  std::ofstream log(out_dir / "train_log.csv", std::ios::binary);
  if (!log) throw IoError("cannot write " + (out_dir / "train_log.csv").string());

  auto run = [&]() -> TrainingResult<float> {
    if (cfg.defense.defenders == 0) {
      info("training without defenders, " +
           std::to_string(cfg.defense.epochs) + " epochs");
      return train_plain(std::move(model), cfg.partition.cut, plan,
                         data.train, &log);
    }
    const Shape hidden = model.layer_shapes()[cfg.partition.cut - 1];
    const std::vector<DefenderSpec> suite = build_defender_suite(
        cfg.defense, data.train.height() * data.train.width(), numel(hidden));
    info("training against " + std::to_string(suite.size()) +
         " defenders, lambda " + std::to_string(cfg.defense.lambda));
    return train_with_defenders(std::move(model), cfg.partition.cut, suite,
                                plan, data.train, &log);
  };
  TrainingResult<float> result = run();

  save_partition(result.partition, (out_dir / "partition.bin").string());
  write_manifest(out_dir, "train", cfg,
                 {"partition.bin", "train_log.csv", "manifest.json"});

  const double test_acc = composed_accuracy(result.partition, data.test);
  std::cout << "best_val_accuracy " << result.best_val_accuracy << " at epoch "
            << result.best_epoch << "\n"
            << "test_accuracy " << test_acc << "\n"
            << "partition " << (out_dir / "partition.bin").string() << "\n";
  return 0;
}

int cmd_attack(const ExperimentConfig& cfg, const fs::path& out_dir,
               const std::string& partition_path) {
  const BipartiteNetwork<float> bp = load_partition<float>(partition_path);
  SplitData data = load_data(cfg.dataset);
  const std::vector<AttackerSpec> specs =
      select_attackers(cfg.attack, catalog_for(bp, data.train));

  std::vector<TrainedAttacker<float>> trained;
  trained.reserve(specs.size());
  for (const AttackerSpec& spec : specs) {
    info("training attacker " + spec.name);
    trained.push_back(train_attacker(bp, spec, data.train, cfg.attack.seed,
                                     cfg.attack.batch_size));
  }

  const AttackReport report = evaluate_attack(bp, trained, data.test,
                                              cfg.defense.lambda,
                                              cfg.attack.seed);
  write_text(out_dir / "attack_report.csv", report.to_csv());
  write_manifest(out_dir, "attack", cfg,
                 {"attack_report.csv", "manifest.json"});
  std::cout << report.to_text();
  return 0;
}

int cmd_eval(const ExperimentConfig& cfg, const fs::path& out_dir,
             const std::string& partition_path) {
  const BipartiteNetwork<float> bp = load_partition<float>(partition_path);
  SplitData data = load_data(cfg.dataset);
  const double train_acc = composed_accuracy(bp, data.train);
  const double test_acc = composed_accuracy(bp, data.test);

  std::ostringstream csv;
  csv.precision(9);
  csv << "metric,value\n"
      << "train_accuracy," << train_acc << "\n"
      << "test_accuracy," << test_acc << "\n"
      << "cut," << bp.cut << "\n"
      << "hidden_numel," << numel(bp.hidden_shape) << "\n";
  write_text(out_dir / "metrics.csv", csv.str());
  write_manifest(out_dir, "eval", cfg, {"metrics.csv", "manifest.json"});
  std::cout << csv.str();
  return 0;
}

int cmd_dp_baseline(const ExperimentConfig& cfg, const fs::path& out_dir,
                    const std::string& partition_path) {
  const BipartiteNetwork<float> bp = load_partition<float>(partition_path);
  const Network<float> full = merge(bp);
  SplitData data = load_data(cfg.dataset);

  PixelationConfig base;
  base.b = cfg.dp.b;
  base.m = cfg.dp.m;
  base.range = cfg.dp.range;
  const std::vector<DpSweepRow> rows =
      dp_sweep(full, data.test, cfg.dp_epsilons(), base, cfg.dp.seed);

  const std::string csv = dp_sweep_csv(rows);
  write_text(out_dir / "dp_sweep.csv", csv);
  write_manifest(out_dir, "dp-baseline", cfg,
                 {"dp_sweep.csv", "manifest.json"});
  std::cout << csv;
  return 0;
}

int cmd_serve(const ExperimentConfig& cfg, const std::string& partition_path) {
  BipartiteNetwork<float> bp = load_partition<float>(partition_path);
  ServeConfig scfg;
  scfg.host = cfg.runtime.host;
  scfg.port = cfg.runtime.port;
  scfg.max_concurrent = cfg.runtime.max_concurrent;
  scfg.payload_cap = cfg.runtime.payload_cap_mb << 20;
  scfg.io_timeout_ms = cfg.runtime.timeout_ms;

  RemoteServer server(std::move(bp), scfg);
  server.start();
  std::cout << "serving remote partition on " << scfg.host << ":"
            << server.port() << std::endl;

  std::signal(SIGINT, on_signal);
  std::signal(SIGTERM, on_signal);
  while (!g_interrupted)
    std::this_thread::sleep_for(std::chrono::milliseconds(100));

  info("shutting down");
  server.stop();
  std::cout << "served " << server.requests_served() << " requests\n";
  return 0;
}

int cmd_infer(const ExperimentConfig& cfg, const std::string& partition_path,
              size_t count) {
  const BipartiteNetwork<float> bp = load_partition<float>(partition_path);
  SplitData data = load_data(cfg.dataset);
  const Dataset batch = take(data.test, std::min(count, data.test.size()));

  const InferenceResult res = infer(bp, cfg.runtime.host, cfg.runtime.port,
                                    batch.images, cfg.runtime.timeout_ms);

  size_t correct = 0;
  for (size_t i = 0; i < res.labels.size(); ++i) {
    std::cout << i << " predicted " << res.labels[i] << " actual "
              << batch.labels[i] << "\n";
    if (res.labels[i] == batch.labels[i]) ++correct;
  }
  std::cout << "accuracy "
            << static_cast<double>(correct) / res.labels.size() << " on "
            << res.labels.size() << " samples\n";
  return 0;
}

int cmd_dump_activations(const ExperimentConfig& cfg, const fs::path& out_dir,
                         const std::string& partition_path, size_t count) {
  const BipartiteNetwork<float> bp = load_partition<float>(partition_path);
  const Network<float> full = merge(bp);
  SplitData data = load_data(cfg.dataset);
  const Dataset batch = take(data.test, std::min(count, data.test.size()));

  const Tensor<float> x =
      detail::shape_batch<float>(batch.images, full.input_shape());
  const std::vector<Tensor<float>> acts = full.forward_all(x);

  std::ostringstream index;
  index << "file,layer,kind,shape\n";
  std::vector<std::string> outputs;
  for (size_t i = 0; i < acts.size(); ++i) {
    std::string name = "act_" + std::string(i < 10 ? "0" : "") +
                       std::to_string(i) + "_" +
                       full.specs()[i].kind_name() + ".bin";
    const std::vector<uint8_t> bytes = encode_tensor(acts[i]);
    std::ofstream out(out_dir / name, std::ios::binary);
    if (!out) throw IoError("cannot write " + (out_dir / name).string());
    out.write(reinterpret_cast<const char*>(bytes.data()),
              static_cast<std::streamsize>(bytes.size()));
    index << name << ',' << i << ',' << full.specs()[i].kind_name() << ','
          << shape_str(acts[i].shape()) << "\n";
    outputs.push_back(name);
  }
  write_text(out_dir / "activations.csv", index.str());
  outputs.push_back("activations.csv");
  outputs.push_back("manifest.json");
  write_manifest(out_dir, "dump-activations", cfg, outputs);
  std::cout << "wrote " << acts.size() << " activation tensors to "
            << out_dir.string() << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"privacy-partitioned training, attack, and inference"};
  app.require_subcommand(1);
  app.fallthrough();

  std::string config_path;
  std::vector<std::string> sets;
  std::string out_dir = "out";
  uint64_t seed = 0;
  app.add_option("--config", config_path, "experiment config file");
  app.add_option("--set", sets, "override: section.key=value (repeatable)")
      ->type_size(1);
  app.add_option("--out", out_dir, "output directory");
  CLI::Option* seed_opt =
      app.add_option("--seed", seed, "override the active command's seed");

  std::string partition_path;
  size_t count = 32;
  CLI::App* train = app.add_subcommand("train", "train a partitioned model");
  CLI::App* attack =
      app.add_subcommand("attack", "train and score reconstruction attackers");
  CLI::App* eval = app.add_subcommand("eval", "report composed accuracy");
  CLI::App* dp =
      app.add_subcommand("dp-baseline", "sweep the pixelation baseline");
  CLI::App* serve = app.add_subcommand("serve", "serve the remote partition");
  CLI::App* infer_cmd =
      app.add_subcommand("infer", "classify test images via a remote server");
  CLI::App* dump = app.add_subcommand("dump-activations",
                                      "write per-layer activation tensors");
  for (CLI::App* sub : {attack, eval, dp, serve, infer_cmd, dump})
    sub->add_option("--partition", partition_path,
                    "partition file (default OUT/partition.bin)");
  infer_cmd->add_option("--count", count, "number of test images");
  dump->add_option("--count", count, "number of test images");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  try {
    RawConfig raw;
    if (!config_path.empty()) raw = load_config_file(config_path);
    for (const std::string& s : sets) apply_override(raw, s);

    const std::string cmd = app.get_subcommands().front()->get_name();
    if (seed_opt->count() > 0) {
      std::string section = "dataset";
      if (cmd == "train") section = "defense";
      if (cmd == "attack") section = "attack";
      if (cmd == "dp-baseline") section = "dp";
      apply_override(raw, section + ".seed=" + std::to_string(seed));
      info("seed override: " + section + ".seed=" + std::to_string(seed));
    }

    const ExperimentConfig cfg = make_experiment_config(raw);
    debug("effective config:\n" + cfg.canonical());

    fs::create_directories(out_dir);
    if (partition_path.empty())
      partition_path = (fs::path(out_dir) / "partition.bin").string();

    if (cmd == "train") return cmd_train(cfg, out_dir);
    if (cmd == "attack") return cmd_attack(cfg, out_dir, partition_path);
    if (cmd == "eval") return cmd_eval(cfg, out_dir, partition_path);
    if (cmd == "dp-baseline") return cmd_dp_baseline(cfg, out_dir, partition_path);
    if (cmd == "serve") return cmd_serve(cfg, partition_path);
    if (cmd == "infer") return cmd_infer(cfg, partition_path, count);
    if (cmd == "dump-activations")
      return cmd_dump_activations(cfg, out_dir, partition_path, count);
    std::cerr << "error: unknown command " << cmd << "\n";
    return 2;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const NetError& e) {
    std::cerr << "network error: " << e.what() << "\n";
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
