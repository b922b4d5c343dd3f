// Command-line front end: dataset generation, training, evaluation, the
// iteration-count ablation and the built-in verification suites.
//
// Exit codes: 0 success, 1 failed verification, 2 usage/config/missing input,
// 3 training diverged.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#if defined(__GLIBC__)
#include <malloc.h>
#endif

#include "CLI11.hpp"
#include "json.hpp"

#include "cscde/data.hpp"
#include "cscde/train.hpp"
#include "cscde/verify.hpp"

namespace fs = std::filesystem;
using namespace cscde;

namespace {

constexpr int kOk = 0;
constexpr int kVerifyFailed = 1;
constexpr int kUsage = 2;
constexpr int kDiverged = 3;

std::vector<std::size_t> parse_list(const std::string& s, const char* flag) {
  std::vector<std::size_t> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    std::size_t pos = 0;
    unsigned long v = 0;
    try {
      v = std::stoul(item, &pos);
    } catch (const std::exception&) {
      pos = 0;
    }
    if (item.empty() || pos != item.size() || item.front() == '-') {
      throw ConfigError(std::string(flag) + ": expected a comma-separated list of non-negative "
                        "integers, got '" + s + "'");
    }
    out.push_back(v);
  }
  if (out.empty()) throw ConfigError(std::string(flag) + ": empty list");
  return out;
}

nlohmann::json read_json(const fs::path& p, const char* what) {
  if (!fs::exists(p)) throw DataError(std::string(what) + " not found: " + p.string());
  try {
    return nlohmann::json::parse(read_file(p));
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError(std::string(what) + " " + p.string() + " is not valid JSON: " + e.what());
  }
}

// Training options shared by `train` and `ablate-t`.
struct TrainFlags {
  std::string data, out, config;
  std::string t_list;
  std::size_t epochs = 0, batch_size = 0;
  double lr = -1, weight_decay = -1;
  std::uint64_t seed = 0;
  bool seed_set = false;
  bool no_augment = false, no_shuffle = false;

  void add_to(CLI::App* app, bool t_is_required) {
    app->add_option("--data", data, "Dataset directory (from gen-data)")->required();
    app->add_option("--out", out, "Output directory")->required();
    app->add_option("--config", config, "JSON training config; flags below override it");
    auto* t = app->add_option("--t", t_list,
                              t_is_required
                                  ? "Comma-separated iteration counts, one training run each"
                                  : "ML-block iterations: one value for every stage, or one per stage");
    if (t_is_required) t->required();
    app->add_option("--epochs", epochs, "Epochs (default 30)");
    app->add_option("--batch-size", batch_size, "Batch size (default 4)");
    app->add_option("--lr", lr, "AdamW learning rate (default 1e-3)");
    app->add_option("--weight-decay", weight_decay, "AdamW decoupled weight decay (default 1e-4)");
    app->add_option_function<std::uint64_t>(
        "--seed", [this](std::uint64_t v) { seed = v, seed_set = true; }, "Seed (default 42)");
    app->add_flag("--no-augment", no_augment, "Disable flip/rotation augmentation");
    app->add_flag("--no-shuffle", no_shuffle, "Keep the training order fixed");
  }

  TrainConfig resolve() const {
    TrainConfig cfg;
    if (!config.empty()) {
      try {
        cfg = read_json(config, "config").get<TrainConfig>();
      } catch (const nlohmann::json::exception& e) {
        throw ConfigError("config " + config + ": " + e.what());
      }
    }
    if (epochs) cfg.epochs = epochs;
    if (batch_size) cfg.batch_size = batch_size;
    if (lr >= 0) cfg.lr = lr;
    if (weight_decay >= 0) cfg.weight_decay = weight_decay;
    if (seed_set) cfg.seed = seed;
    if (no_augment) cfg.augment = false;
    if (no_shuffle) cfg.shuffle = false;
    return cfg;
  }
};

void apply_t(TrainConfig& cfg, const std::vector<std::size_t>& t) {
  if (t.size() == 1) {
    cfg.model.set_iterations(t[0]);
  } else if (t.size() == cfg.model.stages()) {
    cfg.model.iterations = t;
  } else {
    throw ConfigError("--t: give one value or one per decoder stage (" +
                      std::to_string(cfg.model.stages()) + ")");
  }
}

Dataset load_for_training(const std::string& dir) {
  if (!fs::is_directory(dir)) throw DataError("--data: no such directory: " + dir);
  return load_dataset(dir);
}

void print_eval(const char* label, const ModelEvaluation& ev) {
  std::printf("%s: mean_dsc %.4f  mean_hd95 %.3f  sparsity_gamma2 %.4f  (%zu cases)\n", label,
              ev.report.mean_dsc, ev.report.mean_hd95, ev.sparsity_gamma2, ev.report.n_cases);
  for (const auto& c : ev.report.per_class) {
    std::printf("  class %d: dsc %.4f  hd95 %.3f\n", c.cls, c.dsc, c.hd95);
  }
}

int cmd_gen_data(const GeneratorConfig& cfg, const std::string& out) {
  cfg.validate();
  const Dataset ds = generate(cfg);
  save_dataset(ds, out);
  std::printf("wrote %s: %zu cases (%zu train, %zu val), %zux%zu, %zu classes, seed %llu, noise %g\n",
              out.c_str(), ds.train.size() + ds.val.size(), ds.train.size(), ds.val.size(),
              cfg.size, cfg.size, cfg.n_classes, static_cast<unsigned long long>(cfg.seed),
              cfg.noise_sigma);
  return kOk;
}

int cmd_train(const TrainFlags& f) {
  TrainConfig cfg = f.resolve();
  if (!f.t_list.empty()) apply_t(cfg, parse_list(f.t_list, "--t"));
  const Dataset ds = load_for_training(f.data);
  const TrainResult r = train(cfg, ds, f.out, &std::cout);
  std::printf("best epoch %zu\n", r.best_epoch);
  print_eval("val", r.final_eval);
  return kOk;
}

int cmd_eval(const std::string& data, const std::string& model, const std::string& report,
             const std::string& trace) {
  if (!fs::exists(model)) throw DataError("--model: checkpoint not found: " + model);
  if (!fs::is_directory(data)) throw DataError("--data: no such directory: " + data);
  auto net = load_checkpoint<float>(model);
  const Dataset ds = load_dataset(data, false, true);
  if (ds.manifest.n_classes != net->config().n_classes) {
    throw DataError("dataset has " + std::to_string(ds.manifest.n_classes) +
                    " classes but the model predicts " + std::to_string(net->config().n_classes));
  }
  const ModelEvaluation ev = evaluate_model(*net, ds.val);
  write_json_file(report, ev.report);
  if (!trace.empty()) {
    std::ofstream os(trace, std::ios::binary);
    if (!os) throw DataError("--trace: cannot write " + trace);
    write_trace_csv(os, ev.trace);
  }
  print_eval("val", ev);
  return kOk;
}

int cmd_ablate(const TrainFlags& f) {
  const TrainConfig base = f.resolve();
  const auto ts = parse_list(f.t_list, "--t");
  const Dataset ds = load_for_training(f.data);
  fs::create_directories(f.out);
  std::ofstream csv(fs::path(f.out) / "ablation.csv", std::ios::binary);
  if (!csv) throw DataError("cannot write ablation.csv in " + f.out);
  csv << "T,mean_dsc,mean_hd95,final_sparsity_gamma2\n";
  csv.flush();
  for (std::size_t t : ts) {
    TrainConfig cfg = base;
    cfg.model.set_iterations(t);
    std::cout << "== T=" << t << std::endl;
    const TrainResult r = train(cfg, ds, fs::path(f.out) / ("T" + std::to_string(t)), &std::cout);
    char buf[160];
    std::snprintf(buf, sizeof buf, "%zu,%.6f,%.6f,%.6f\n", t, r.final_eval.report.mean_dsc,
                  r.final_eval.report.mean_hd95, r.final_eval.sparsity_gamma2);
    csv << buf;
    csv.flush();
    print_eval(("T=" + std::to_string(t)).c_str(), r.final_eval);
  }
  return kOk;
}

int cmd_check(const std::string& which, std::uint64_t seed, const std::string& mutate) {
  Fault fault = Fault::None;
  if (mutate == "relu-backward") {
    fault = Fault::NegatedReluMask;
  } else if (!mutate.empty()) {
    throw ConfigError("--mutate: unknown mutation '" + mutate + "'");
  }
  std::vector<verify::SuiteResult> suites;
  if (which == "adjoint" || which == "all") suites.push_back(verify::adjoint_suite(seed));
  if (which == "grad" || which == "all") suites.push_back(verify::grad_suite(seed, fault));
  if (which == "oracle" || which == "all") {
    suites.push_back(verify::mechanics_suite(seed));
    suites.push_back(verify::metrics_suite(seed));
  }
  nlohmann::json out{{"passed", true}, {"suites", nlohmann::json::array()},
                     {"failures", nlohmann::json::array()}};
  for (const auto& s : suites) {
    out["suites"].push_back(verify::to_json(s));
    for (const auto& f : s.failures()) out["failures"].push_back(f);
  }
  out["passed"] = out["failures"].empty();
  std::cout << out.dump(2) << std::endl;
  if (!out["failures"].empty()) {
    for (const auto& f : out["failures"]) std::cerr << "FAILED " << f.get<std::string>() << '\n';
    return kVerifyFailed;
  }
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
#if defined(__GLIBC__)
  // Training allocates and frees the same large buffers every step; keeping
  // them on the heap avoids a page-fault storm from fresh mmaps.
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
#endif
  CLI::App app{"Segmentation network with a multi-layer convolutional sparse coding decoder"};
  app.require_subcommand(1);

  GeneratorConfig gen;
  std::string gen_out;
  auto* g = app.add_subcommand("gen-data", "Generate the synthetic segmentation dataset");
  g->add_option("--out", gen_out, "Output directory")->required();
  g->add_option("--seed", gen.seed, "Generator seed")->capture_default_str();
  g->add_option("--cases", gen.n_cases, "Number of cases")->capture_default_str();
  g->add_option("--size", gen.size, "Image side length (multiple of 8)")->capture_default_str();
  g->add_option("--classes", gen.n_classes, "Classes including background")->capture_default_str();
  g->add_option("--noise", gen.noise_sigma, "Gaussian noise sigma")->capture_default_str();

  TrainFlags train_flags;
  auto* tr = app.add_subcommand("train", "Train a model and evaluate its best checkpoint");
  train_flags.add_to(tr, false);

  std::string ev_data, ev_model, ev_report, ev_trace;
  auto* ev = app.add_subcommand("eval", "Evaluate a checkpoint on the validation split");
  ev->add_option("--data", ev_data, "Dataset directory")->required();
  ev->add_option("--model", ev_model, "Checkpoint file")->required();
  ev->add_option("--report", ev_report, "Output report JSON")->required();
  ev->add_option("--trace", ev_trace, "Optional CSV of per-stage ML-block iteration statistics");

  TrainFlags ablate_flags;
  auto* ab = app.add_subcommand("ablate-t", "Train once per iteration count and tabulate results");
  ablate_flags.add_to(ab, true);

  std::string check_which;
  std::uint64_t check_seed = 42;
  std::string mutate;
  auto* ck = app.add_subcommand("check", "Run the built-in verification suites");
  ck->add_option("suite", check_which, "adjoint | grad | oracle | all")
      ->required()
      ->check(CLI::IsMember({"adjoint", "grad", "oracle", "all"}));
  ck->add_option("--seed", check_seed, "Seed for randomized checks")->capture_default_str();
  ck->add_option("--mutate", mutate)->group("");  // fault injection, for testing the checks

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kOk : kUsage;
  }

  try {
    if (*g) return cmd_gen_data(gen, gen_out);
    if (*tr) return cmd_train(train_flags);
    if (*ev) return cmd_eval(ev_data, ev_model, ev_report, ev_trace);
    if (*ab) return cmd_ablate(ablate_flags);
    if (*ck) return cmd_check(check_which, check_seed, mutate);
  } catch (const TrainingDiverged& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kDiverged;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kUsage;
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << '\n';
    return kUsage;
  } catch (const FormatError& e) {
    std::cerr << "format error: " << e.what() << '\n';
    return kUsage;
  } catch (const ShapeError& e) {
    std::cerr << "shape error: " << e.what() << '\n';
    return kUsage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kVerifyFailed;
  }
  return kUsage;
}
