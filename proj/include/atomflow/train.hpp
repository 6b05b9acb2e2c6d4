#pragma once

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <limits>
#include <map>
#include <ostream>
#include <random>
#include <sstream>
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
#include "json.hpp"

namespace atomflow {

struct TrainConfig {
  int batch_size = 16;
  double lr = 1e-4;
  double weight_decay = 5e-4;
  int patience = 3;            // validation evals without F1 improvement
  double plateau_factor = 0.1;
  int epochs = 10;
  int steps_per_epoch = 150;
  double lambda = 0.5;         // class-rebalancing smoothing
  int T = 8;
  std::string modality = "depth";
  uint64_t seed = 1;

  void validate() const {
    AF_CHECK(batch_size >= 1, "batch size must be >= 1, got " << batch_size);
    AF_CHECK(lr > 0.0, "learning rate must be positive, got " << lr);
    AF_CHECK(weight_decay >= 0.0, "weight decay must be >= 0");
    AF_CHECK(patience >= 1, "patience must be >= 1, got " << patience);
    AF_CHECK(plateau_factor > 0.0 && plateau_factor < 1.0,
             "plateau factor must be in (0,1), got " << plateau_factor);
    AF_CHECK(epochs >= 0, "epochs must be >= 0");
    AF_CHECK(steps_per_epoch >= 1, "steps_per_epoch must be >= 1");
    AF_CHECK(lambda >= 0.0 && lambda <= 1.0, "lambda must be in [0,1]");
    AF_CHECK(T >= 1, "prediction horizon T must be >= 1, got " << T);
    AF_CHECK(modality == "depth" || modality == "rgb" || modality == "rgbd",
             "modality must be depth, rgb, or rgbd, got '" << modality << "'");
  }
};

inline nlohmann::ordered_json train_config_to_json(const TrainConfig& c) {
  nlohmann::ordered_json j;
  j["batch_size"] = c.batch_size;
  j["lr"] = c.lr;
  j["weight_decay"] = c.weight_decay;
  j["patience"] = c.patience;
  j["plateau_factor"] = c.plateau_factor;
  j["epochs"] = c.epochs;
  j["steps_per_epoch"] = c.steps_per_epoch;
  j["lambda"] = c.lambda;
  j["T"] = c.T;
  j["modality"] = c.modality;
  j["seed"] = c.seed;
  return j;
}

inline TrainConfig train_config_from_json(const nlohmann::json& j) {
  TrainConfig c;
  c.batch_size = j.at("batch_size").get<int>();
  c.lr = j.at("lr").get<double>();
  c.weight_decay = j.at("weight_decay").get<double>();
  c.patience = j.at("patience").get<int>();
  c.plateau_factor = j.at("plateau_factor").get<double>();
  c.epochs = j.at("epochs").get<int>();
  c.steps_per_epoch = j.at("steps_per_epoch").get<int>();
  c.lambda = j.at("lambda").get<double>();
  c.T = j.at("T").get<int>();
  c.modality = j.at("modality").get<std::string>();
  c.seed = j.at("seed").get<uint64_t>();
  c.validate();
  return c;
}

// Frame channels are stored [R,G,B,D].
inline std::vector<int> modality_channels(const std::string& modality) {
  if (modality == "depth") return {3};
  if (modality == "rgb") return {0, 1, 2};
  if (modality == "rgbd") return {0, 1, 2, 3};
  AF_CHECK(false, "unknown modality '" << modality << "'");
  return {};
}

// ---------------------------------------------------------------------------
// Metric logging

struct MetricRow {
  long long step = 0;
  std::string split;  // "train" or "val" or "test"
  double loss = std::numeric_limits<double>::quiet_NaN();
  double f1 = std::numeric_limits<double>::quiet_NaN();
  std::vector<double> rmse;  // length T; NaN for train rows
  double lr = std::numeric_limits<double>::quiet_NaN();
};

namespace train_detail {

inline std::string fmt_double(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof(buf), v);
  AF_CHECK(res.ec == std::errc(), "double formatting failed");
  return std::string(buf, res.ptr);
}

inline double parse_double(const std::string& s) {
  double v = 0.0;
  auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  AF_CHECK(res.ec == std::errc() && res.ptr == s.data() + s.size(),
           "bad numeric field '" << s << "' in metrics CSV");
  return v;
}

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  for (char ch : line) {
    if (ch == ',') {
      out.push_back(cur);
      cur.clear();
    } else {
      cur.push_back(ch);
    }
  }
  out.push_back(cur);
  return out;
}

}  // namespace train_detail

class MetricLog {
 public:
  explicit MetricLog(int T) : T_(T) { AF_CHECK(T >= 1, "MetricLog needs T >= 1"); }

  int T() const { return T_; }
  const std::vector<MetricRow>& rows() const { return rows_; }

  void add(MetricRow row) {
    AF_CHECK(row.rmse.size() == static_cast<size_t>(T_),
             "metric row carries " << row.rmse.size() << " RMSE values, expected " << T_);
    for (auto it = rows_.rbegin(); it != rows_.rend(); ++it)
      if (it->split == row.split) {
        AF_CHECK(row.step > it->step, "metric steps must increase within split '"
                                          << row.split << "': " << it->step << " then "
                                          << row.step);
        break;
      }
    rows_.push_back(std::move(row));
  }

  std::string header() const {
    std::string h = "step,split,loss,f1";
    for (int t = 1; t <= T_; ++t) h += ",rmse_t" + std::to_string(t);
    return h + ",lr";
  }

  void write_csv(const std::string& path) const {
    std::string out = header() + "\n";
    for (const auto& r : rows_) {
      out += std::to_string(r.step) + "," + r.split + "," +
             train_detail::fmt_double(r.loss) + "," + train_detail::fmt_double(r.f1);
      for (double v : r.rmse) out += "," + train_detail::fmt_double(v);
      out += "," + train_detail::fmt_double(r.lr) + "\n";
    }
    write_text_file(path, out);
  }

  static MetricLog read_csv(const std::string& path, int T) {
    MetricLog log(T);
    std::istringstream in(read_text_file(path));
    std::string line;
    AF_CHECK(static_cast<bool>(std::getline(in, line)), "empty metrics CSV " << path);
    AF_CHECK(line == log.header(), "metrics CSV header mismatch in " << path << ": '"
                                                                     << line << "'");
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      auto f = train_detail::split_csv_line(line);
      AF_CHECK(f.size() == static_cast<size_t>(T + 5),
               "metrics CSV row with " << f.size() << " fields in " << path);
      MetricRow r;
      r.step = std::stoll(f[0]);
      r.split = f[1];
      r.loss = train_detail::parse_double(f[2]);
      r.f1 = train_detail::parse_double(f[3]);
      for (int t = 0; t < T; ++t)
        r.rmse.push_back(train_detail::parse_double(f[static_cast<size_t>(4 + t)]));
      r.lr = train_detail::parse_double(f[static_cast<size_t>(4 + T)]);
      log.add(std::move(r));
    }
    return log;
  }

 private:
  int T_;
  std::vector<MetricRow> rows_;
};

// ---------------------------------------------------------------------------
// Plateau learning-rate schedule: divide by `factor` whenever the observed
// validation F1 has not improved for `patience` consecutive observations.

class PlateauScheduler {
 public:
  PlateauScheduler(double init_lr, int patience, double factor)
      : lr_(init_lr), patience_(patience), factor_(factor) {
    AF_CHECK(init_lr > 0.0 && patience >= 1 && factor > 0.0 && factor < 1.0,
             "bad scheduler parameters");
  }

  double lr() const { return lr_; }
  double best() const { return best_; }
  int stagnant() const { return bad_; }

  bool observe(double f1) {
    if (f1 > best_) {
      best_ = f1;
      bad_ = 0;
      return false;
    }
    if (++bad_ >= patience_) {
      lr_ *= factor_;
      bad_ = 0;
      return true;
    }
    return false;
  }

  nlohmann::ordered_json to_json() const {
    return {{"lr", lr_}, {"best", best_}, {"bad", bad_}};
  }
  void restore(const nlohmann::json& j) {
    lr_ = j.at("lr").get<double>();
    // JSON has no -inf; the pre-first-observation sentinel round-trips as null.
    best_ = j.at("best").is_null() ? -std::numeric_limits<double>::infinity()
                                   : j.at("best").get<double>();
    bad_ = j.at("bad").get<int>();
  }

 private:
  double lr_;
  int patience_;
  double factor_;
  double best_ = -std::numeric_limits<double>::infinity();
  int bad_ = 0;
};

// ---------------------------------------------------------------------------
// Batch sampling

struct Batch {
  Tensor x1, x2;                 // [B,H,W,C] in the requested modality
  std::vector<Tensor> targets;   // T grids [B,h,w,K], soft assignments
  std::vector<std::pair<int, int>> picks;  // (clip index, start t)
};

namespace train_detail {

inline void copy_modality(const Tensor& frame, const std::vector<int>& chans,
                          Tensor& dst, int b) {
  const int H = frame.dim(0), W = frame.dim(1);
  const int C = static_cast<int>(chans.size());
  for (int i = 0; i < H; ++i)
    for (int j = 0; j < W; ++j)
      for (int c = 0; c < C; ++c)
        dst[dst.idx4(b, i, j, c)] = frame[frame.idx3(i, j, chans[static_cast<size_t>(c)])];
}

}  // namespace train_detail

// Uniformly picks (clip, start) pairs from `clip_ids`; a clip too short for T
// prediction steps is skipped and resampled (logged once per draw).
inline Batch sample_batch(const Dataset& ds, const std::vector<int>& clip_ids, int batch,
                          int T, const std::string& modality, std::mt19937_64& rng,
                          std::ostream* log = nullptr) {
  AF_CHECK(!clip_ids.empty(), "sample_batch from an empty clip list");
  const auto chans = modality_channels(modality);
  const int H = ds.geometry.H, W = ds.geometry.W;
  const int h = H / ds.geometry.M, w = W / ds.geometry.M;
  const int K = ds.codebook().size();
  Batch out;
  out.x1 = Tensor({batch, H, W, static_cast<int>(chans.size())});
  out.x2 = Tensor({batch, H, W, static_cast<int>(chans.size())});
  for (int t = 0; t < T; ++t) out.targets.emplace_back(std::vector<int>{batch, h, w, K});
  std::uniform_int_distribution<size_t> pick_clip(0, clip_ids.size() - 1);
  for (int b = 0; b < batch; ++b) {
    int ci = -1, t0 = -1;
    for (int attempt = 0; attempt < 10000; ++attempt) {
      const int cand = clip_ids[pick_clip(rng)];
      const auto& clip = ds.clips[static_cast<size_t>(cand)];
      const int frames = static_cast<int>(clip.rec.frames.size());
      const int max_t = frames - T - 2;
      if (max_t < 0) {
        if (log)
          (*log) << "sample_batch: clip " << cand << " too short for T=" << T
                 << " (" << frames << " frames), resampling\n";
        continue;
      }
      ci = cand;
      t0 = (max_t == 0) ? 0 : static_cast<int>(std::uniform_int_distribution<int>(0, max_t)(rng));
      break;
    }
    AF_CHECK(ci >= 0, "sample_batch: no clip admits prediction horizon T=" << T);
    const auto& clip = ds.clips[static_cast<size_t>(ci)];
    train_detail::copy_modality(clip.rec.frames[static_cast<size_t>(t0)], chans, out.x1, b);
    train_detail::copy_modality(clip.rec.frames[static_cast<size_t>(t0 + 1)], chans, out.x2, b);
    for (int s = 0; s < T; ++s) {
      const SparseAssign& sa = clip.targets[static_cast<size_t>(t0 + 1 + s)];
      Tensor& zt = out.targets[static_cast<size_t>(s)];
      for (int p = 0; p < h * w; ++p)
        for (int j = 0; j < sa.k_nn; ++j) {
          const size_t e = static_cast<size_t>(p * sa.k_nn + j);
          zt[static_cast<size_t>((b * h * w + p) * K) + static_cast<size_t>(sa.idx[e])] +=
              sa.wgt[e];
        }
    }
    out.picks.emplace_back(ci, t0);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Evaluation: loss, pooled macro-F1 over codewords, per-timestep flow RMSE.

struct EvalResult {
  double loss = std::numeric_limits<double>::quiet_NaN();
  double f1 = 0.0;
  std::vector<double> rmse;  // [T]
  long long pairs = 0;
};

// Same pooling as flow_rmse, without the final sqrt/normalize, for
// accumulating across evaluation pairs.
inline double sum_sq_err(const Tensor& a, const Tensor& b) {
  AF_CHECK(a.same_shape(b), "sum_sq_err shape mismatch: " << a.shape_str() << " vs "
                                                          << b.shape_str());
  double s = 0.0;
  for (size_t i = 0; i < a.numel(); ++i) {
    const double d = a[i] - b[i];
    s += d * d;
  }
  return s;
}

// `predict(clip_index, t)` returns T probability grids [h,w,K] for the pair
// starting at frame t. Evaluates every valid pair of the split.
inline EvalResult evaluate_predictions(
    const Dataset& ds, int split, int T,
    const std::function<std::vector<Tensor>(int, int)>& predict) {
  const Codebook cb = ds.codebook();
  const int M = ds.geometry.M;
  const int h = ds.geometry.H / M, w = ds.geometry.W / M;
  const int K = cb.size();
  const Tensor cw = class_weights(ds.p_tilde, ds.codec.lambda);
  Confusion conf(K);
  std::vector<double> sq(static_cast<size_t>(T), 0.0);
  long long cells_per_t = 0;
  double loss_sum = 0.0;
  long long pairs = 0;
  for (int ci : ds.by_split[split]) {
    const auto& clip = ds.clips[static_cast<size_t>(ci)];
    const int frames = static_cast<int>(clip.rec.frames.size());
    for (int t0 = 0; t0 + T + 2 <= frames; ++t0) {
      std::vector<Tensor> probs = predict(ci, t0);
      AF_CHECK(probs.size() == static_cast<size_t>(T),
               "predictor returned " << probs.size() << " grids, expected " << T);
      double pair_loss = 0.0;
      for (int s = 0; s < T; ++s) {
        const Tensor& p = probs[static_cast<size_t>(s)];
        AF_CHECK(p.ndim() == 3 && p.dim(0) == h && p.dim(1) == w && p.dim(2) == K,
                 "prediction grid shape " << p.shape_str());
        const SparseAssign& sa = clip.targets[static_cast<size_t>(t0 + 1 + s)];
        // Weighted cross-entropy against the soft targets.
        for (int cell = 0; cell < h * w; ++cell)
          for (int j = 0; j < sa.k_nn; ++j) {
            const size_t e = static_cast<size_t>(cell * sa.k_nn + j);
            const double pk = p[static_cast<size_t>(cell * K) + static_cast<size_t>(sa.idx[e])];
            pair_loss += cw[static_cast<size_t>(sa.idx[e])] * sa.wgt[e] *
                         -std::log(std::max(pk, 1e-300));
          }
        // Flow RMSE of the decoded prediction vs the patch-mean target flow.
        const Tensor dec = decode(p, cb);
        const Tensor gt = patch_mean_flow(clip.norm_flows[static_cast<size_t>(t0 + 1 + s)], cb, M);
        sq[static_cast<size_t>(s)] += sum_sq_err(dec, gt);
        if (pairs == 0 && s == 0) cells_per_t = static_cast<long long>(dec.numel());
        // Pooled confusion: truth is the nearest codeword, prediction the argmax.
        for (int cell = 0; cell < h * w; ++cell) {
          int pred = 0;
          double pbest = p[static_cast<size_t>(cell * K)];
          for (int k = 1; k < K; ++k)
            if (p[static_cast<size_t>(cell * K + k)] > pbest) {
              pbest = p[static_cast<size_t>(cell * K + k)];
              pred = k;
            }
          conf.add(sa.idx[static_cast<size_t>(cell * sa.k_nn)], pred);
        }
      }
      loss_sum += pair_loss / (T * h * w);
      ++pairs;
    }
  }
  AF_CHECK(pairs > 0, "split '" << split_name(static_cast<Split>(split))
                                << "' has no pair admitting horizon T=" << T);
  EvalResult r;
  r.loss = loss_sum / static_cast<double>(pairs);
  r.f1 = conf.macro_f1();
  for (int s = 0; s < T; ++s)
    r.rmse.push_back(std::sqrt(sq[static_cast<size_t>(s)] /
                               (static_cast<double>(pairs) * static_cast<double>(cells_per_t))));
  r.pairs = pairs;
  return r;
}

inline EvalResult evaluate_model(SeqModel& model, const Dataset& ds, int split, int T,
                                 const std::string& modality) {
  const auto chans = modality_channels(modality);
  const int h = ds.geometry.H / ds.geometry.M, w = ds.geometry.W / ds.geometry.M;
  const int K = ds.codebook().size();
  return evaluate_predictions(ds, split, T, [&](int ci, int t0) {
    const auto& clip = ds.clips[static_cast<size_t>(ci)];
    Tensor x1({1, ds.geometry.H, ds.geometry.W, static_cast<int>(chans.size())});
    Tensor x2(x1.shape());
    train_detail::copy_modality(clip.rec.frames[static_cast<size_t>(t0)], chans, x1, 0);
    train_detail::copy_modality(clip.rec.frames[static_cast<size_t>(t0 + 1)], chans, x2, 0);
    Graph g(false);
    auto logits = model.forward(g, g.constant(std::move(x1)), g.constant(std::move(x2)),
                                T, RunMode::kEval);
    std::vector<Tensor> probs;
    for (Var l : logits)
      probs.push_back(g.value(g.softmax_last(l)).reshaped({h, w, K}));
    return probs;
  });
}

// Predicts the zero codeword everywhere; the reference competitor for RMSE.
inline EvalResult evaluate_zero_baseline(const Dataset& ds, int split, int T) {
  const Codebook cb = ds.codebook();
  const int h = ds.geometry.H / ds.geometry.M, w = ds.geometry.W / ds.geometry.M;
  Tensor grid({h, w, cb.size()});
  for (int cell = 0; cell < h * w; ++cell)
    grid[static_cast<size_t>(cell * cb.size() + cb.zero_index())] = 1.0;
  return evaluate_predictions(ds, split, T, [&](int, int) {
    return std::vector<Tensor>(static_cast<size_t>(T), grid);
  });
}

// ---------------------------------------------------------------------------
// Checkpointing: model params + batch-norm state + Adam slots + metadata.

inline void save_checkpoint(const std::string& dir, SeqModel& model, const AdamState* adam,
                            const PlateauScheduler* sched, const TrainConfig& cfg,
                            const Dataset& ds, long long step, int epoch, double best_f1,
                            const nlohmann::ordered_json& extra = {}) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  model.save_params(dir);
  if (adam) {
    fs::create_directories(fs::path(dir) / "adam");
    adam->visit_slots([&](const std::string& name, const Tensor& m, const Tensor& v) {
      atf::write_tensor((fs::path(dir) / "adam" / (name + ".m.atf")).string(), m);
      atf::write_tensor((fs::path(dir) / "adam" / (name + ".v.atf")).string(), v);
    });
  }
  nlohmann::ordered_json meta;
  meta["step"] = step;
  meta["epoch"] = epoch;
  meta["best_f1"] = best_f1;
  for (const auto& [k, v] : extra.items()) meta[k] = v;
  meta["train_config"] = train_config_to_json(cfg);
  meta["codec"] = {{"bins_per_axis", ds.codec.bins_per_axis},
                   {"bound", ds.codec.bound},
                   {"k_nn", ds.codec.k_nn},
                   {"lambda", ds.codec.lambda}};
  meta["geometry"] = {{"H", ds.geometry.H}, {"W", ds.geometry.W}, {"M", ds.geometry.M}};
  const auto& mc = model.config();
  meta["model"] = {{"in_channels", mc.in_channels},
                   {"down_filters", mc.down_filters},
                   {"feat_channels", mc.feat_channels},
                   {"up_channels", mc.up_channels},
                   {"K", mc.K}};
  if (adam) meta["adam_steps"] = adam->step_count();
  if (sched) meta["scheduler"] = sched->to_json();
  write_text_file((fs::path(dir) / "meta.json").string(), meta.dump(2) + "\n");
}

inline nlohmann::json checkpoint_meta(const std::string& dir) {
  return nlohmann::json::parse(
      read_text_file((std::filesystem::path(dir) / "meta.json").string()));
}

inline ModelConfig model_config_from_meta(const nlohmann::json& meta) {
  ModelConfig mc;
  mc.H = meta.at("geometry").at("H").get<int>();
  mc.W = meta.at("geometry").at("W").get<int>();
  mc.M = meta.at("geometry").at("M").get<int>();
  mc.in_channels = meta.at("model").at("in_channels").get<int>();
  mc.down_filters = meta.at("model").at("down_filters").get<std::vector<int>>();
  mc.feat_channels = meta.at("model").at("feat_channels").get<int>();
  mc.up_channels = meta.at("model").at("up_channels").get<int>();
  mc.K = meta.at("model").at("K").get<int>();
  return mc;
}

inline void load_adam(const std::string& dir, SeqModel& model, AdamState& adam) {
  namespace fs = std::filesystem;
  model.visit_params([&](const std::string& name, Tensor&) {
    const fs::path m = fs::path(dir) / "adam" / (name + ".m.atf");
    const fs::path v = fs::path(dir) / "adam" / (name + ".v.atf");
    AF_CHECK(fs::exists(m) && fs::exists(v),
             "checkpoint missing Adam slots for " << name);
    adam.restore_slot(name, atf::read_tensor(m.string()), atf::read_tensor(v.string()));
  });
}

// ---------------------------------------------------------------------------
// Unsupervised training

struct TrainResult {
  MetricLog log{1};
  double best_f1 = -std::numeric_limits<double>::infinity();
  long long step = 0;
  std::string best_dir, last_dir;
};

// Per-step batch seed: reproducible and resumable without serializing a
// sampler stream; the seed is also the diagnostic handle on failure.
inline uint64_t batch_seed(uint64_t run_seed, long long step) {
  return mix_seed(run_seed, 0xba7c4000ULL + static_cast<uint64_t>(step));
}

inline TrainResult train_unsupervised(const TrainConfig& cfg, const Dataset& ds,
                                      SeqModel& model, const std::string& out_dir,
                                      bool resume = false, long long max_steps = -1,
                                      std::ostream* info = nullptr) {
  namespace fs = std::filesystem;
  cfg.validate();
  AF_CHECK(model.config().K == ds.codebook().size() &&
               model.config().H == ds.geometry.H && model.config().W == ds.geometry.W &&
               model.config().M == ds.geometry.M,
           "model/dataset geometry mismatch: model K=" << model.config().K << " H="
                                                       << model.config().H
                                                       << " vs dataset K="
                                                       << ds.codebook().size() << " H="
                                                       << ds.geometry.H);
  AF_CHECK(model.config().in_channels ==
               static_cast<int>(modality_channels(cfg.modality).size()),
           "model expects " << model.config().in_channels << " channels but modality '"
                            << cfg.modality << "' provides "
                            << modality_channels(cfg.modality).size());
  fs::create_directories(out_dir);
  const std::string best_dir = (fs::path(out_dir) / "best").string();
  const std::string last_dir = (fs::path(out_dir) / "last").string();
  const std::string csv_path = (fs::path(out_dir) / "metrics.csv").string();

  const Tensor cw = class_weights(ds.p_tilde, cfg.lambda);
  AdamState adam;
  PlateauScheduler sched(cfg.lr, cfg.patience, cfg.plateau_factor);
  MetricLog log(cfg.T);
  long long step = 0;
  double best_f1 = -std::numeric_limits<double>::infinity();
  // Epoch-mean loss accumulator; persisted so a resume mid-epoch reproduces
  // the uninterrupted run's train rows byte for byte.
  double epoch_loss_acc = 0.0;
  int epoch_steps_done = 0;

  if (resume) {
    AF_CHECK(fs::exists(fs::path(last_dir) / "meta.json"),
             "--resume: no checkpoint at " << last_dir);
    const auto meta = checkpoint_meta(last_dir);
    model.load_params(last_dir);
    load_adam(last_dir, model, adam);
    adam.set_step_count(meta.at("adam_steps").get<long long>());
    sched.restore(meta.at("scheduler"));
    step = meta.at("step").get<long long>();
    best_f1 = meta.at("best_f1").get<double>();
    epoch_loss_acc = meta.at("epoch_loss_acc").get<double>();
    epoch_steps_done = meta.at("epoch_steps_done").get<int>();
    log = MetricLog::read_csv(csv_path, cfg.T);
    if (info) (*info) << "resumed at step " << step << "\n";
  }

  auto nan_rmse = [&] {
    return std::vector<double>(static_cast<size_t>(cfg.T),
                               std::numeric_limits<double>::quiet_NaN());
  };
  auto run_validation = [&](long long at_step) {
    EvalResult v = evaluate_model(model, ds, kVal, cfg.T, cfg.modality);
    log.add({at_step, "val", v.loss, v.f1, v.rmse, sched.lr()});
    if (info)
      (*info) << "step " << at_step << " val loss " << v.loss << " f1 " << v.f1 << "\n";
    return v;
  };
  auto save_last = [&] {
    save_checkpoint(last_dir, model, &adam, &sched, cfg, ds, step,
                    static_cast<int>(step / cfg.steps_per_epoch), best_f1,
                    {{"epoch_loss_acc", epoch_loss_acc},
                     {"epoch_steps_done", epoch_steps_done}});
  };

  if (!resume) {
    run_validation(0);
    best_f1 = log.rows().back().f1;
    save_checkpoint(best_dir, model, nullptr, nullptr, cfg, ds, 0, 0, best_f1);
    save_last();
    log.write_csv(csv_path);
  }

  const std::vector<int>& train_ids = ds.by_split[kTrain];
  const long long total_steps = static_cast<long long>(cfg.epochs) * cfg.steps_per_epoch;
  bool capped = false;
  while (step < total_steps) {
    if (max_steps >= 0 && step >= max_steps) {
      capped = true;
      break;
    }
    const uint64_t seed = batch_seed(cfg.seed, step);
    std::mt19937_64 rng(seed);
    Batch batch =
        sample_batch(ds, train_ids, cfg.batch_size, cfg.T, cfg.modality, rng, info);
    Graph g(true);
    Var x1 = g.constant(std::move(batch.x1));
    Var x2 = g.constant(std::move(batch.x2));
    auto logits = model.forward(g, x1, x2, cfg.T, RunMode::kTrain);
    Var loss = g.weighted_ce_logits(logits[0], batch.targets[0], cw);
    for (int t = 1; t < cfg.T; ++t)
      loss = g.add(loss, g.weighted_ce_logits(logits[static_cast<size_t>(t)],
                                              batch.targets[static_cast<size_t>(t)], cw));
    loss = g.scale(loss, 1.0 / cfg.T);
    const double loss_val = g.value(loss)[0];
    AF_CHECK(std::isfinite(loss_val), "non-finite training loss " << loss_val
                                                                  << " at step " << step
                                                                  << "; batch seed "
                                                                  << seed);
    g.backward(loss);
    adam.begin_step();
    model.visit_params([&](const std::string& name, Tensor& t) {
      Tensor grad = g.has_param(name) ? g.param_grad(name) : Tensor(t.shape());
      adam.update(name, t, grad, sched.lr(), cfg.weight_decay);
    });
    epoch_loss_acc += loss_val;
    ++epoch_steps_done;
    ++step;
    if (step % cfg.steps_per_epoch == 0) {  // epoch boundary
      log.add({step, "train", epoch_loss_acc / epoch_steps_done,
               std::numeric_limits<double>::quiet_NaN(), nan_rmse(), sched.lr()});
      epoch_loss_acc = 0.0;
      epoch_steps_done = 0;
      EvalResult v = run_validation(step);
      if (v.f1 > best_f1) {
        best_f1 = v.f1;
        save_checkpoint(best_dir, model, nullptr, nullptr, cfg, ds, step,
                        static_cast<int>(step / cfg.steps_per_epoch), best_f1);
      }
      sched.observe(v.f1);
      save_last();
      log.write_csv(csv_path);
    }
  }
  if (capped) {
    save_last();
    log.write_csv(csv_path);
  }

  TrainResult r{std::move(log), best_f1, step, best_dir, last_dir};
  return r;
}

}  // namespace atomflow
