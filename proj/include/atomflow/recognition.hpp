#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <functional>
#include <limits>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "atomflow/adam.hpp"
#include "atomflow/codec.hpp"
#include "atomflow/common.hpp"
#include "atomflow/graph.hpp"
#include "atomflow/model.hpp"
#include "atomflow/serialize.hpp"
#include "atomflow/synth.hpp"
#include "atomflow/tensor.hpp"
#include "atomflow/train.hpp"
#include "json.hpp"

namespace atomflow {

enum class Scenario { kArchitectureOnly, kFinetune, kFrozen };

inline const char* scenario_name(Scenario s) {
  switch (s) {
    case Scenario::kArchitectureOnly: return "architecture_only";
    case Scenario::kFinetune: return "finetune";
    case Scenario::kFrozen: return "frozen";
  }
  return "?";
}

inline Scenario scenario_from_string(const std::string& s) {
  if (s == "architecture_only") return Scenario::kArchitectureOnly;
  if (s == "finetune") return Scenario::kFinetune;
  if (s == "frozen") return Scenario::kFrozen;
  AF_CHECK(false, "unknown scenario '" << s
                                       << "' (expected architecture_only, finetune, or "
                                          "frozen)");
  return Scenario::kFrozen;
}

// Exponential staircase: base * decay^floor(step / every).
inline double staircase_lr(double base, long long step, double decay = 0.96,
                           int every = 2000) {
  AF_CHECK(every >= 1, "staircase period must be >= 1");
  return base * std::pow(decay, static_cast<double>(step / every));
}

// Single affine map from the flattened Representation to class logits.
struct ClassifierHead {
  Tensor w;  // [dim, classes]
  Tensor b;  // [classes]

  void init(int dim, int classes, uint64_t seed) {
    std::mt19937_64 rng(mix_seed(seed, 0x68656164ULL));
    w = model_detail::lecun_uniform({dim, classes}, dim, rng);
    b = Tensor({classes});
  }

  Var logits(Graph& g, Var features) const {
    const Tensor& f = g.value(features);
    const int N = f.dim(0);
    const int dim = static_cast<int>(f.numel()) / N;
    AF_CHECK(dim == w.dim(0), "head expects feature dim " << w.dim(0) << ", got " << dim);
    Var flat = g.reshape(features, {N, dim});
    return g.bias_add(g.matmul(flat, g.param("cls_head.w", w)), g.param("cls_head.b", b));
  }

  void save(const std::string& dir) const {
    namespace fs = std::filesystem;
    fs::create_directories(dir);
    atf::write_tensor((fs::path(dir) / "cls_head.w.atf").string(), w);
    atf::write_tensor((fs::path(dir) / "cls_head.b.atf").string(), b);
  }
  void load(const std::string& dir) {
    namespace fs = std::filesystem;
    w = atf::read_tensor((fs::path(dir) / "cls_head.w.atf").string());
    b = atf::read_tensor((fs::path(dir) / "cls_head.b.atf").string());
    AF_CHECK(w.ndim() == 2 && b.ndim() == 1 && w.dim(1) == b.dim(0),
             "classifier head tensors inconsistent in " << dir);
  }
};

struct ClsConfig {
  int batch_size = 8;       // one pair from each of 8 distinct videos
  double head_lr = 1e-4;
  double encoder_lr = 1e-5;  // finetune scenario only
  double lr_decay = 0.96;
  int decay_every = 2000;
  int steps = 400;
  int eval_every = 100;
  int num_samples = 25;      // pair starts averaged at test time
  // L2 on the head weights only. The flattened representation has far more
  // dimensions than there are training clips, so an unregularized head can
  // memorize appearance noise instead of the class-consistent directions.
  double head_weight_decay = 0.0;
  std::string modality = "depth";
  uint64_t seed = 1;         // batch sampling + architecture_only encoder init
  uint64_t head_seed = 1;    // shared across scenarios for matched comparisons

  void validate() const {
    AF_CHECK(batch_size >= 1 && steps >= 0 && eval_every >= 1 && num_samples >= 1,
             "bad classifier config");
    AF_CHECK(head_lr > 0.0 && encoder_lr > 0.0, "classifier lrs must be positive");
    AF_CHECK(lr_decay > 0.0 && lr_decay <= 1.0, "lr decay must be in (0,1]");
    AF_CHECK(decay_every >= 1, "decay_every must be >= 1");
    AF_CHECK(head_weight_decay >= 0.0, "head weight decay must be >= 0");
    (void)modality_channels(modality);
  }
};

inline nlohmann::ordered_json cls_config_to_json(const ClsConfig& c) {
  nlohmann::ordered_json j;
  j["batch_size"] = c.batch_size;
  j["head_lr"] = c.head_lr;
  j["encoder_lr"] = c.encoder_lr;
  j["lr_decay"] = c.lr_decay;
  j["decay_every"] = c.decay_every;
  j["steps"] = c.steps;
  j["eval_every"] = c.eval_every;
  j["num_samples"] = c.num_samples;
  j["head_weight_decay"] = c.head_weight_decay;
  j["modality"] = c.modality;
  j["seed"] = c.seed;
  j["head_seed"] = c.head_seed;
  return j;
}

inline ClsConfig cls_config_from_json(const nlohmann::json& j) {
  ClsConfig c;
  c.batch_size = j.at("batch_size").get<int>();
  c.head_lr = j.at("head_lr").get<double>();
  c.encoder_lr = j.at("encoder_lr").get<double>();
  c.lr_decay = j.at("lr_decay").get<double>();
  c.decay_every = j.at("decay_every").get<int>();
  c.steps = j.at("steps").get<int>();
  c.eval_every = j.at("eval_every").get<int>();
  c.num_samples = j.at("num_samples").get<int>();
  c.head_weight_decay = j.value("head_weight_decay", 0.0);
  c.modality = j.at("modality").get<std::string>();
  c.seed = j.at("seed").get<uint64_t>();
  c.head_seed = j.at("head_seed").get<uint64_t>();
  c.validate();
  return c;
}

// ---------------------------------------------------------------------------
// Test-time protocol: uniformly spaced pair starts, scores averaged after the
// softmax. At saturation (num_samples >= valid positions) every position is
// used exactly once.

inline std::vector<int> uniform_pair_starts(int num_frames, int num_samples) {
  AF_CHECK(num_frames >= 2, "classify_video needs at least 2 frames, got " << num_frames);
  const int last = num_frames - 2;  // valid starts are 0..last
  std::vector<int> starts;
  if (num_samples == 1) {
    starts.push_back(last / 2);
    return starts;
  }
  for (int i = 0; i < num_samples; ++i) {
    const double pos = static_cast<double>(i) * last / (num_samples - 1);
    const int t = static_cast<int>(std::lround(pos));
    if (starts.empty() || starts.back() != t) starts.push_back(t);
  }
  return starts;
}

inline Tensor classify_video(const std::vector<Tensor>& frames, SeqModel& model,
                             const ClassifierHead& head, const std::string& modality,
                             int num_samples = 25) {
  const auto chans = modality_channels(modality);
  const auto starts = uniform_pair_starts(static_cast<int>(frames.size()), num_samples);
  const int classes = head.b.dim(0);
  Tensor avg({classes});
  for (int t : starts) {
    const Tensor& f1 = frames[static_cast<size_t>(t)];
    const Tensor& f2 = frames[static_cast<size_t>(t + 1)];
    Tensor x1({1, f1.dim(0), f1.dim(1), static_cast<int>(chans.size())});
    Tensor x2(x1.shape());
    train_detail::copy_modality(f1, chans, x1, 0);
    train_detail::copy_modality(f2, chans, x2, 0);
    Graph g(false);
    auto [h, c] = model.encode_pair(g, g.constant(std::move(x1)), g.constant(std::move(x2)),
                                    RunMode::kEval);
    (void)c;
    const Tensor probs = g.value(g.softmax_last(head.logits(g, h)));
    for (int k = 0; k < classes; ++k) avg[static_cast<size_t>(k)] += probs[static_cast<size_t>(k)];
  }
  for (size_t i = 0; i < avg.numel(); ++i) avg[i] /= static_cast<double>(starts.size());
  return avg;
}

inline int argmax(const Tensor& t) {
  AF_CHECK(t.numel() > 0, "argmax of empty tensor");
  int best = 0;
  for (size_t i = 1; i < t.numel(); ++i)
    if (t[i] > t[static_cast<size_t>(best)]) best = static_cast<int>(i);
  return best;
}

// ---------------------------------------------------------------------------
// Evaluation: mean per-class accuracy + confusion matrix over a split.

struct ClsEval {
  double mean_acc = 0.0;
  Confusion conf{1};
};

inline ClsEval eval_classifier_core(const Dataset& ds, int split,
                                    const std::function<int(int)>& predict) {
  const int classes = ds.num_labels();
  std::vector<int> support(static_cast<size_t>(classes), 0);
  for (int ci : ds.by_split[split])
    ++support[static_cast<size_t>(ds.clips[static_cast<size_t>(ci)].label)];
  for (int k = 0; k < classes; ++k)
    AF_CHECK(support[static_cast<size_t>(k)] > 0,
             "class '" << ds.label_names[static_cast<size_t>(k)] << "' has no clips in "
                       << split_name(static_cast<Split>(split)) << " split");
  ClsEval out;
  out.conf = Confusion(classes);
  for (int ci : ds.by_split[split])
    out.conf.add(ds.clips[static_cast<size_t>(ci)].label, predict(ci));
  out.mean_acc = out.conf.mean_per_class_accuracy();
  return out;
}

inline ClsEval eval_classifier(SeqModel& model, const ClassifierHead& head,
                               const Dataset& ds, int split, const std::string& modality,
                               int num_samples = 25) {
  return eval_classifier_core(ds, split, [&](int ci) {
    return argmax(classify_video(ds.clips[static_cast<size_t>(ci)].rec.frames, model, head,
                                 modality, num_samples));
  });
}

inline void write_confusion_csv(const Confusion& conf,
                                const std::vector<std::string>& names,
                                const std::string& path) {
  const int K = conf.num_classes();
  AF_CHECK(static_cast<int>(names.size()) == K, "confusion name count mismatch");
  std::string out = "truth";
  for (const auto& n : names) out += "," + n;
  out += "\n";
  for (int i = 0; i < K; ++i) {
    out += names[static_cast<size_t>(i)];
    for (int j = 0; j < K; ++j)
      out += "," + std::to_string(static_cast<long long>(conf.counts()[conf.counts().idx2(i, j)]));
    out += "\n";
  }
  write_text_file(path, out);
}

// ---------------------------------------------------------------------------
// Classifier training

struct ClsTrainResult {
  MetricLog log{1};
  double val_acc = std::numeric_limits<double>::quiet_NaN();
  std::string out_dir;
};

// Trains the activity classifier under one of the three initialization
// scenarios and writes head + encoder + metrics to out_dir.
inline ClsTrainResult train_classifier(Scenario scenario, const Dataset& ds,
                                       const std::string& pretrained_dir,
                                       const ClsConfig& cfg, const ModelConfig& arch,
                                       const std::string& out_dir,
                                       std::ostream* info = nullptr) {
  namespace fs = std::filesystem;
  cfg.validate();
  const auto chans = modality_channels(cfg.modality);
  const int classes = ds.num_labels();

  SeqModel model = [&] {
    if (scenario == Scenario::kArchitectureOnly) {
      AF_CHECK(arch.in_channels == static_cast<int>(chans.size()),
               "architecture expects " << arch.in_channels << " channels, modality '"
                                       << cfg.modality << "' provides " << chans.size());
      return SeqModel(arch, mix_seed(cfg.seed, 0x656e63ULL));
    }
    AF_CHECK(!pretrained_dir.empty(),
             scenario_name(scenario) << " scenario requires a pretrained checkpoint");
    const auto meta = checkpoint_meta(pretrained_dir);
    SeqModel m(model_config_from_meta(meta), 1);
    m.load_params(pretrained_dir);
    AF_CHECK(m.config().in_channels == static_cast<int>(chans.size()),
             "pretrained encoder has " << m.config().in_channels
                                       << " input channels, modality '" << cfg.modality
                                       << "' provides " << chans.size());
    return m;
  }();
  AF_CHECK(model.config().H == ds.geometry.H && model.config().W == ds.geometry.W,
           "encoder frame size " << model.config().H << "x" << model.config().W
                                 << " does not match dataset " << ds.geometry.H << "x"
                                 << ds.geometry.W);

  const int dim = model.config().fh() * model.config().fw() * model.config().feat_channels;
  ClassifierHead head;
  head.init(dim, classes, cfg.head_seed);

  const std::vector<int>& train_ids = ds.by_split[kTrain];
  AF_CHECK(static_cast<int>(train_ids.size()) >= cfg.batch_size,
           "need at least " << cfg.batch_size << " training clips for distinct-video "
                            << "batches, have " << train_ids.size());

  AdamState adam;
  MetricLog log(1);
  const auto nan = std::numeric_limits<double>::quiet_NaN();
  auto run_validation = [&](long long at_step) {
    ClsEval e = eval_classifier(model, head, ds, kVal, cfg.modality, cfg.num_samples);
    log.add({at_step, "val", nan, e.mean_acc, {nan}, staircase_lr(cfg.head_lr, at_step,
                                                                  cfg.lr_decay,
                                                                  cfg.decay_every)});
    if (info) (*info) << "step " << at_step << " val acc " << e.mean_acc << "\n";
    return e.mean_acc;
  };
  run_validation(0);

  double window_loss = 0.0;
  int window_n = 0;
  for (long long step = 0; step < cfg.steps; ++step) {
    std::mt19937_64 rng(mix_seed(cfg.seed, 0xc150000ULL + static_cast<uint64_t>(step)));
    // One pair from each of batch_size distinct videos.
    std::vector<int> picks;
    std::sample(train_ids.begin(), train_ids.end(), std::back_inserter(picks),
                static_cast<size_t>(cfg.batch_size), rng);
    Tensor x1({cfg.batch_size, ds.geometry.H, ds.geometry.W, static_cast<int>(chans.size())});
    Tensor x2(x1.shape());
    std::vector<int> labels;
    for (int b = 0; b < cfg.batch_size; ++b) {
      const auto& clip = ds.clips[static_cast<size_t>(picks[static_cast<size_t>(b)])];
      const int L = static_cast<int>(clip.rec.frames.size());
      const int t0 = std::uniform_int_distribution<int>(0, L - 2)(rng);
      train_detail::copy_modality(clip.rec.frames[static_cast<size_t>(t0)], chans, x1, b);
      train_detail::copy_modality(clip.rec.frames[static_cast<size_t>(t0 + 1)], chans, x2, b);
      labels.push_back(clip.label);
    }

    const double head_lr = staircase_lr(cfg.head_lr, step, cfg.lr_decay, cfg.decay_every);
    const double enc_lr =
        scenario == Scenario::kFinetune
            ? staircase_lr(cfg.encoder_lr, step, cfg.lr_decay, cfg.decay_every)
            : head_lr;
    double loss_val;
    if (scenario == Scenario::kFrozen) {
      // Eval-mode encoder on a gradient-free graph: the encoder cannot move.
      Tensor feats;
      {
        Graph fg(false);
        auto [h, c] = model.encode_pair(fg, fg.constant(std::move(x1)),
                                        fg.constant(std::move(x2)), RunMode::kEval);
        (void)c;
        feats = fg.value(h);
      }
      Graph g(true);
      Var loss = g.softmax_ce_labels(head.logits(g, g.constant(std::move(feats))), labels);
      loss_val = g.value(loss)[0];
      AF_CHECK(std::isfinite(loss_val), "non-finite classifier loss at step " << step);
      g.backward(loss);
      adam.begin_step();
      adam.update("cls_head.w", head.w, g.param_grad("cls_head.w"), head_lr,
                  cfg.head_weight_decay);
      adam.update("cls_head.b", head.b, g.param_grad("cls_head.b"), head_lr, 0.0);
    } else {
      Graph g(true);
      auto [h, c] = model.encode_pair(g, g.constant(std::move(x1)),
                                      g.constant(std::move(x2)), RunMode::kTrain);
      (void)c;
      Var loss = g.softmax_ce_labels(head.logits(g, h), labels);
      loss_val = g.value(loss)[0];
      AF_CHECK(std::isfinite(loss_val), "non-finite classifier loss at step " << step);
      g.backward(loss);
      adam.begin_step();
      adam.update("cls_head.w", head.w, g.param_grad("cls_head.w"), head_lr,
                  cfg.head_weight_decay);
      adam.update("cls_head.b", head.b, g.param_grad("cls_head.b"), head_lr, 0.0);
      model.visit_params([&](const std::string& name, Tensor& t) {
        Tensor grad = g.has_param(name) ? g.param_grad(name) : Tensor(t.shape());
        adam.update(name, t, grad, enc_lr, 0.0);
      });
    }
    window_loss += loss_val;
    ++window_n;
    if ((step + 1) % cfg.eval_every == 0 || step + 1 == cfg.steps) {
      log.add({step + 1, "train", window_loss / window_n, nan, {nan}, head_lr});
      window_loss = 0.0;
      window_n = 0;
      run_validation(step + 1);
    }
  }

  fs::create_directories(out_dir);
  head.save((fs::path(out_dir) / "head").string());
  model.save_params((fs::path(out_dir) / "encoder").string());
  nlohmann::ordered_json meta;
  meta["scenario"] = scenario_name(scenario);
  meta["classes"] = classes;
  meta["label_names"] = ds.label_names;
  meta["config"] = cls_config_to_json(cfg);
  const auto& mc = model.config();
  meta["geometry"] = {{"H", mc.H}, {"W", mc.W}, {"M", mc.M}};
  meta["model"] = {{"in_channels", mc.in_channels},
                   {"down_filters", mc.down_filters},
                   {"feat_channels", mc.feat_channels},
                   {"up_channels", mc.up_channels},
                   {"K", mc.K}};
  meta["pretrained"] = pretrained_dir;
  // Horizon the encoder was pretrained with; 0 when trained from scratch. Lets
  // reports group classifier runs by rollout length without the checkpoint.
  meta["pretrain_T"] =
      pretrained_dir.empty()
          ? 0
          : checkpoint_meta(pretrained_dir).at("train_config").at("T").get<int>();
  write_text_file((fs::path(out_dir) / "meta.json").string(), meta.dump(2) + "\n");
  log.write_csv((fs::path(out_dir) / "metrics.csv").string());

  ClsTrainResult r;
  r.val_acc = log.rows().back().f1;  // accuracy is carried in the f1 column
  r.log = std::move(log);
  r.out_dir = out_dir;
  return r;
}

struct ClassifierBundle {
  SeqModel model;
  ClassifierHead head;
  std::string scenario;
  std::vector<std::string> label_names;
};

inline ClassifierBundle load_classifier(const std::string& dir) {
  namespace fs = std::filesystem;
  const auto meta = nlohmann::json::parse(
      read_text_file((fs::path(dir) / "meta.json").string()));
  ClassifierBundle b{SeqModel(model_config_from_meta(meta), 1), {}, "", {}};
  b.model.load_params((fs::path(dir) / "encoder").string());
  b.head.load((fs::path(dir) / "head").string());
  b.scenario = meta.at("scenario").get<std::string>();
  b.label_names = meta.at("label_names").get<std::vector<std::string>>();
  return b;
}

}  // namespace atomflow
