#pragma once

// Supervised training of SegNet<float> on a synthetic dataset: weighted
// cross-entropy + soft Dice, AdamW, flip/rotate augmentation, per-epoch
// validation and best-checkpoint tracking.

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <set>
#include <ostream>
#include <string>
#include <vector>

#include "json.hpp"

#include "cscde/augment.hpp"
#include "cscde/data.hpp"
#include "cscde/losses.hpp"
#include "cscde/metrics.hpp"
#include "cscde/optim.hpp"
#include "cscde/segnet.hpp"

namespace cscde {

struct TrainConfig {
  std::size_t epochs = 30;
  std::size_t batch_size = 4;
  double lr = 1e-3;
  double weight_decay = 1e-4;
  std::uint64_t seed = 42;
  double ce_weight = 0.5;
  double dice_weight = 0.5;
  bool augment = true;
  bool shuffle = true;
  SegNetConfig model;  // n_classes / in_channels are taken from the dataset

  void validate() const {
    if (epochs < 1) throw ConfigError("epochs must be at least 1");
    if (batch_size < 1) throw ConfigError("batch_size must be at least 1");
    if (!(lr >= 0) || !std::isfinite(lr)) throw ConfigError("lr must be non-negative");
    if (!(weight_decay >= 0)) throw ConfigError("weight_decay must be non-negative");
    if (!(ce_weight >= 0) || !(dice_weight >= 0) || !(ce_weight + dice_weight > 0)) {
      throw ConfigError("ce_weight and dice_weight must be non-negative with a positive sum");
    }
    model.validate();
  }
};

inline void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = nlohmann::json{{"epochs", c.epochs},           {"batch_size", c.batch_size},
                     {"lr", c.lr},                   {"weight_decay", c.weight_decay},
                     {"seed", c.seed},               {"ce_weight", c.ce_weight},
                     {"dice_weight", c.dice_weight}, {"augment", c.augment},
                     {"shuffle", c.shuffle},         {"model", c.model}};
}

/// Missing keys keep their defaults; unknown keys are rejected so typos do not
/// silently fall back.
inline void from_json(const nlohmann::json& j, TrainConfig& c) {
  static const std::set<std::string> known{"epochs", "batch_size", "lr",      "weight_decay",
                                           "seed",   "ce_weight",  "dice_weight", "augment",
                                           "shuffle", "model",     "iterations"};
  for (const auto& [k, v] : j.items()) {
    if (!known.count(k)) throw ConfigError("unknown config key '" + k + "'");
  }
  c.epochs = j.value("epochs", c.epochs);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.lr = j.value("lr", c.lr);
  c.weight_decay = j.value("weight_decay", c.weight_decay);
  c.seed = j.value("seed", c.seed);
  c.ce_weight = j.value("ce_weight", c.ce_weight);
  c.dice_weight = j.value("dice_weight", c.dice_weight);
  c.augment = j.value("augment", c.augment);
  c.shuffle = j.value("shuffle", c.shuffle);
  if (j.contains("model")) c.model = j.at("model").get<SegNetConfig>();
  if (j.contains("iterations")) {
    nlohmann::json m = c.model;
    m["iterations"] = j.at("iterations");
    c.model = m.get<SegNetConfig>();
  }
}

struct EpochStats {
  std::size_t epoch = 0;
  double train_loss = 0, train_ce = 0, train_dice = 0;
  double val_dsc = 0, val_hd95 = 0;
};

/// ML-block statistics for one (stage, iteration), averaged over batches.
struct TraceRow {
  std::size_t stage = 0;
  std::size_t iteration = 0;
  double sparsity_gamma1 = 0;
  double sparsity_gamma2 = 0;
  double residual_norm = 0;
};

struct ModelEvaluation {
  EvalReport report;
  // Fraction of zeros in the final gamma2 of the last decoder stage,
  // averaged over cases.
  double sparsity_gamma2 = 0;
  std::vector<TraceRow> trace;
};

inline void write_trace_csv(std::ostream& os, const std::vector<TraceRow>& rows) {
  os << "stage,iteration,sparsity_gamma1,sparsity_gamma2,residual_norm\n";
  char buf[160];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof buf, "%zu,%zu,%.6f,%.6f,%.6f\n", r.stage, r.iteration,
                  r.sparsity_gamma1, r.sparsity_gamma2, r.residual_norm);
    os << buf;
  }
}

/// Stacks planes of several (1,c,h,w) tensors into one batch.
template <typename T>
Tensor<T> stack(const std::vector<const Tensor<T>*>& items) {
  const Shape s = items.front()->shape();
  Tensor<T> out(Shape{items.size(), s.c, s.h, s.w});
  const std::size_t per = s.c * s.plane();
  for (std::size_t i = 0; i < items.size(); ++i) {
    if (items[i]->shape() != s) throw ShapeError("stack: mismatched item " + items[i]->shape().str());
    std::copy(items[i]->data(), items[i]->data() + per, out.data() + i * per);
  }
  return out;
}

inline ModelEvaluation evaluate_model(SegNet<float>& net, const std::vector<Case>& cases,
                                      std::size_t batch = 4) {
  MetricAccumulator acc(net.config().n_classes);
  ModelEvaluation ev;
  for (std::size_t b = 0; b < cases.size(); b += batch) {
    const std::size_t e = std::min(cases.size(), b + batch);
    std::vector<const Tensor<float>*> imgs;
    for (std::size_t i = b; i < e; ++i) imgs.push_back(&cases[i].image);
    std::vector<MLBlockTrace<float>> traces;
    const Tensor<float> z = net.logits(stack(imgs), Mode::Eval, &traces);
    const LabelMap pred = SegNet<float>::argmax_channels(z);
    const std::size_t plane = pred.shape().plane();
    for (std::size_t i = b; i < e; ++i) {
      LabelMap one(Shape{1, 1, pred.h(), pred.w()});
      std::copy(pred.data() + (i - b) * plane, pred.data() + (i - b + 1) * plane, one.data());
      acc.add(one, cases[i].mask);
    }
    if (ev.trace.empty()) {
      for (std::size_t st = 0; st < traces.size(); ++st)
        for (std::size_t it = 0; it < traces[st].snapshots.size(); ++it) ev.trace.push_back({st, it});
    }
    const double weight = static_cast<double>(e - b) / static_cast<double>(cases.size());
    std::size_t row = 0;
    for (const auto& tr : traces) {
      for (const auto& sn : tr.snapshots) {
        TraceRow& r = ev.trace[row++];
        r.sparsity_gamma1 += weight * sn.sparsity_gamma1;
        r.sparsity_gamma2 += weight * sn.sparsity_gamma2;
        r.residual_norm += weight * sn.residual_norm;
      }
    }
    const Tensor<float>& g2 = traces.back().snapshots.back().gamma2;
    const std::size_t per = g2.size() / g2.n();
    for (std::size_t i = 0; i < g2.n(); ++i) {
      std::size_t zeros = 0;
      for (std::size_t k = 0; k < per; ++k) zeros += g2[i * per + k] == 0.0f;
      ev.sparsity_gamma2 += static_cast<double>(zeros) / static_cast<double>(per);
    }
  }
  ev.report = acc.report();
  if (!cases.empty()) ev.sparsity_gamma2 /= static_cast<double>(cases.size());
  return ev;
}

struct TrainResult {
  std::vector<EpochStats> history;
  std::size_t best_epoch = 0;
  ModelEvaluation final_eval;  // best checkpoint on the validation split
};

inline std::string format_csv_row(const EpochStats& s) {
  char buf[256];
  std::snprintf(buf, sizeof buf, "%zu,%.6f,%.6f,%.6f,%.6f,%.6f", s.epoch, s.train_loss, s.train_ce,
                s.train_dice, s.val_dsc, s.val_hd95);
  return buf;
}

inline void write_json_file(const std::filesystem::path& p, const nlohmann::json& j) {
  std::ofstream os(p, std::ios::binary);
  if (!os) throw DataError("cannot write " + p.string());
  os << j.dump(2) << '\n';
}

/// Trains from scratch and writes, into `out_dir`:
///   config.json   effective configuration
///   loss.csv      epoch,train_loss,train_ce,train_dice,val_dsc,val_hd95
///   best.ckpt     weights of the epoch with the highest val_dsc
///   report.json   evaluation of best.ckpt on the validation split
/// Throws TrainingDiverged (1-based epoch) on a non-finite loss.
inline TrainResult train(TrainConfig cfg, const Dataset& ds, const std::filesystem::path& out_dir,
                         std::ostream* log = nullptr) {
  cfg.model.n_classes = ds.manifest.n_classes;
  cfg.model.in_channels = 1;
  cfg.model.seed = cfg.seed;
  cfg.validate();
  if (ds.train.empty()) throw DataError("training split is empty");
  if (ds.val.empty()) throw DataError("validation split is empty");

  std::error_code ec;
  std::filesystem::create_directories(out_dir, ec);
  if (ec) throw DataError("cannot create " + out_dir.string() + ": " + ec.message());
  write_json_file(out_dir / "config.json", cfg);
  std::ofstream csv(out_dir / "loss.csv", std::ios::binary);
  if (!csv) throw DataError("cannot write loss.csv in " + out_dir.string());
  csv << "epoch,train_loss,train_ce,train_dice,val_dsc,val_hd95\n";

  SegNet<float> net(cfg.model);
  AdamW<float> opt(net.params(), AdamWConfig{cfg.lr, cfg.weight_decay});
  SplitMix64 aug_rng = make_stream(cfg.seed, Stream::Augment);
  const auto ckpt = (out_dir / "best.ckpt").string();

  TrainResult result;
  double best = -1;
  std::vector<std::size_t> order(ds.train.size());
  std::iota(order.begin(), order.end(), std::size_t(0));
  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    if (cfg.shuffle) {
      SplitMix64 shuffle_rng = make_stream(cfg.seed, Stream::Shuffle, epoch);
      shuffle_rng.shuffle(order);
    }
    EpochStats st;
    st.epoch = epoch;
    std::size_t batches = 0;
    for (std::size_t b = 0; b < order.size(); b += cfg.batch_size) {
      const std::size_t e = std::min(order.size(), b + cfg.batch_size);
      std::vector<Tensor<float>> imgs;
      std::vector<LabelMap> masks;
      for (std::size_t i = b; i < e; ++i) {
        const Case& c = ds.train[order[i]];
        if (cfg.augment) {
          auto [im, mk] = augment(c.image, c.mask, aug_rng);
          imgs.push_back(std::move(im));
          masks.push_back(std::move(mk));
        } else {
          imgs.push_back(c.image);
          masks.push_back(c.mask);
        }
      }
      std::vector<const Tensor<float>*> ip;
      std::vector<const LabelMap*> mp;
      for (std::size_t i = 0; i < imgs.size(); ++i) {
        ip.push_back(&imgs[i]);
        mp.push_back(&masks[i]);
      }
      const Tensor<float> x = stack(ip);
      const LabelMap y = stack(mp);

      Tape<float> tape;
      const Var z = net.forward(tape, tape.leaf(x), Mode::Train);
      const Var ce = cross_entropy_loss(tape, z, y);
      const Var dl = dice_loss(tape, z, y);
      const Var loss = ad::add(tape, ad::scale(tape, ce, static_cast<float>(cfg.ce_weight)),
                               ad::scale(tape, dl, static_cast<float>(cfg.dice_weight)));
      const double lv = tape.value(loss)[0];
      if (!std::isfinite(lv)) throw TrainingDiverged(static_cast<int>(epoch));
      net.zero_grad();
      tape.backward(loss);
      opt.step();
      st.train_loss += lv;
      st.train_ce += tape.value(ce)[0];
      st.train_dice += tape.value(dl)[0];
      ++batches;
    }
    st.train_loss /= static_cast<double>(batches);
    st.train_ce /= static_cast<double>(batches);
    st.train_dice /= static_cast<double>(batches);

    const ModelEvaluation ev = evaluate_model(net, ds.val);
    st.val_dsc = ev.report.mean_dsc;
    st.val_hd95 = ev.report.mean_hd95;
    if (st.val_dsc > best) {
      best = st.val_dsc;
      result.best_epoch = epoch;
      save_checkpoint(ckpt, net);
    }
    csv << format_csv_row(st) << '\n';
    csv.flush();
    result.history.push_back(st);
    if (log) {
      *log << "epoch " << epoch << "/" << cfg.epochs << "  loss " << st.train_loss << "  val_dsc "
           << st.val_dsc << "  val_hd95 " << st.val_hd95 << std::endl;
    }
  }

  auto best_net = load_checkpoint<float>(ckpt);
  result.final_eval = evaluate_model(*best_net, ds.val);
  write_json_file(out_dir / "report.json", result.final_eval.report);
  return result;
}

}  // namespace cscde
