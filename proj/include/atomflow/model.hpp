#pragma once

#include <cmath>
#include <filesystem>
#include <functional>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "atomflow/common.hpp"
#include "atomflow/graph.hpp"
#include "atomflow/serialize.hpp"
#include "atomflow/tensor.hpp"

namespace atomflow {

// Batch-norm behavior per forward pass. kTrainFrozenStats exists for gradient
// checks and other repeated-forward probes that must not advance the EMA.
enum class RunMode { kTrain, kTrainFrozenStats, kEval };

inline bool is_train_mode(RunMode m) { return m != RunMode::kEval; }

// Running-stats rows kept by batch-norm layers inside the decoder unroll.
// Training horizons are at most 8 steps; longer eval rollouts clamp to the
// last row (the state distribution has settled well before then).
constexpr int kMaxUnrollStats = 8;

struct ModelConfig {
  int H = 64, W = 64;
  int in_channels = 1;                         // 1 depth, 3 rgb, 4 rgbd
  std::vector<int> down_filters = {16, 32, 32};  // one stride-2 3x3 block each
  int feat_channels = 32;                      // c: 1x1 projection + ConvLSTM width
  int M = 4;                                   // codec patch size; grid h = H/M
  int K = 125;
  int up_channels = 16;                        // deconv/refine width

  int fh() const { return H >> static_cast<int>(down_filters.size()); }
  int fw() const { return W >> static_cast<int>(down_filters.size()); }
  int grid_h() const { return H / M; }
  int grid_w() const { return W / M; }
};

namespace model_detail {

inline Tensor lecun_uniform(std::vector<int> shape, int fan_in, std::mt19937_64& rng) {
  const double limit = std::sqrt(3.0 / fan_in);
  std::uniform_real_distribution<double> dist(-limit, limit);
  Tensor t(std::move(shape));
  for (size_t i = 0; i < t.numel(); ++i) t[i] = dist(rng);
  return t;
}

}  // namespace model_detail

struct Conv2dLayer {
  std::string name;
  Tensor w, b;  // [kh,kw,Cin,Cout], [Cout]
  int stride = 1;
  Padding pad = Padding::kSame;

  void init(int kh, int kw, int cin, int cout, std::mt19937_64& rng) {
    w = model_detail::lecun_uniform({kh, kw, cin, cout}, kh * kw * cin, rng);
    b = Tensor({cout});
  }
  Var forward(Graph& g, Var x) const {
    return g.bias_add(g.conv2d(x, g.param(name + ".w", w), stride, pad),
                      g.param(name + ".b", b));
  }
};

struct DeconvLayer {
  std::string name;
  Tensor w, b;  // [kh,kw,Cout,Cin], [Cout]
  int stride = 2;

  void init(int kh, int kw, int cout, int cin, std::mt19937_64& rng) {
    w = model_detail::lecun_uniform({kh, kw, cout, cin}, kh * kw * cin, rng);
    b = Tensor({cout});
  }
  Var forward(Graph& g, Var x) const {
    return g.bias_add(g.conv2d_transpose(x, g.param(name + ".w", w), stride),
                      g.param(name + ".b", b));
  }
};

struct BatchNormLayer {
  std::string name;
  Tensor gamma, beta;          // trained, shared across unroll steps
  Tensor run_mean, run_var;    // EMA state, [steps, C]: one row per unroll index
  double momentum = 0.9;
  int steps = 1;

  void init(int channels, int unroll_steps = 1) {
    steps = unroll_steps;
    gamma = Tensor::full({channels}, 1.0);
    beta = Tensor({channels});
    run_mean = Tensor({steps, channels});
    run_var = Tensor::full({steps, channels}, 1.0);
  }

  // `t` picks the running-stats row. Layers inside a recurrent unroll keep one
  // row per step: the hidden-state distribution is nonstationary in t, and a
  // single pooled EMA is dominated by the settled late steps, so eval-mode
  // normalization systematically mis-scales the first step while training
  // (which always uses per-step batch statistics) never sees the error.
  // Steps beyond the allocated rows clamp to the last row, whose statistics
  // the state has converged to by then.
  Var forward(Graph& g, Var x, RunMode mode, int t = 0) {
    const size_t C = gamma.numel();
    const size_t row = static_cast<size_t>(std::min(t, steps - 1)) * C;
    if (!is_train_mode(mode)) {
      Tensor mu({static_cast<int>(C)}), vr({static_cast<int>(C)});
      for (size_t i = 0; i < C; ++i) {
        mu[i] = run_mean[row + i];
        vr[i] = run_var[row + i];
      }
      return g.batch_norm_eval(x, g.param(name + ".gamma", gamma),
                               g.param(name + ".beta", beta), mu, vr);
    }
    Tensor mean, var;
    Var y = g.batch_norm_train(x, g.param(name + ".gamma", gamma),
                               g.param(name + ".beta", beta), &mean, &var);
    if (mode == RunMode::kTrain) {
      for (size_t i = 0; i < C; ++i) {
        run_mean[row + i] = momentum * run_mean[row + i] + (1.0 - momentum) * mean[i];
        run_var[row + i] = momentum * run_var[row + i] + (1.0 - momentum) * var[i];
      }
    }
    return y;
  }
};

// ConvLSTM cell with fused gates [i|f|o|g] along the channel axis; all convs
// 3x3 same-padded, no peepholes.
struct ConvLSTMCell {
  std::string name;
  int channels = 0;
  Tensor wx;  // [3,3,Cin,4C]
  Tensor wh;  // [3,3,C,4C]
  Tensor b;   // [4C]

  void init(int cin, int c, std::mt19937_64& rng) {
    channels = c;
    wx = model_detail::lecun_uniform({3, 3, cin, 4 * c}, 9 * cin, rng);
    wh = model_detail::lecun_uniform({3, 3, c, 4 * c}, 9 * c, rng);
    b = Tensor({4 * c});
    for (int i = c; i < 2 * c; ++i) b[static_cast<size_t>(i)] = 1.0;  // forget gate
  }

  // x < 0 means a zero input step: the wx convolution of an all-zero tensor
  // is skipped outright, which is bit-identical to running it.
  std::pair<Var, Var> step(Graph& g, Var x, Var h, Var c) const {
    const int C = channels;
    Var pre = g.conv2d(h, g.param(name + ".wh", wh), 1, Padding::kSame);
    if (x >= 0)
      pre = g.add(pre, g.conv2d(x, g.param(name + ".wx", wx), 1, Padding::kSame));
    pre = g.bias_add(pre, g.param(name + ".b", b));
    Var gi = g.sigmoid(g.slice_last(pre, 0, C));
    Var gf = g.sigmoid(g.slice_last(pre, C, C));
    Var go = g.sigmoid(g.slice_last(pre, 2 * C, C));
    Var gg = g.tanh(g.slice_last(pre, 3 * C, C));
    Var c2 = g.add(g.mul(gf, c), g.mul(gi, gg));
    Var h2 = g.mul(go, g.tanh(c2));
    return {h2, c2};
  }
};

// Conv -> ConvLSTM -> Deconv encoder-decoder over a frame pair. The encoder
// downsamples each frame and runs the encoder ConvLSTM over the two-step
// feature sequence from a zero state; the decoder ConvLSTM starts from the
// encoder's final (h, c) and unrolls T zero-input steps, each upsampled to a
// K-channel logit grid.
class SeqModel {
 public:
  explicit SeqModel(ModelConfig cfg, uint64_t seed = 1) : cfg_(std::move(cfg)) {
    AF_CHECK(!cfg_.down_filters.empty(), "need at least one downsampling block");
    AF_CHECK(cfg_.H % (1 << cfg_.down_filters.size()) == 0 &&
                 cfg_.W % (1 << cfg_.down_filters.size()) == 0,
             "frame dims " << cfg_.H << "x" << cfg_.W << " not divisible by 2^"
                           << cfg_.down_filters.size());
    AF_CHECK(cfg_.H % cfg_.M == 0 && cfg_.W % cfg_.M == 0,
             "frame dims not divisible by patch size " << cfg_.M);
    const int fh = cfg_.fh(), gh = cfg_.grid_h();
    AF_CHECK(gh % fh == 0 && (gh / fh) == (cfg_.grid_w() / cfg_.fw()),
             "upsampling factor mismatch: feature " << fh << " vs grid " << gh);
    int factor = gh / fh;
    AF_CHECK((factor & (factor - 1)) == 0,
             "grid/feature ratio " << factor << " must be a power of 2");
    while (factor > 1) {
      ++num_up_stages_;
      factor >>= 1;
    }
    init(seed);
  }

  const ModelConfig& config() const { return cfg_; }

  // Deterministic parameter init: one RNG stream, fixed visit order.
  void init(uint64_t seed) {
    std::mt19937_64 rng(mix_seed(seed, 0x6d6f64656cULL));
    down_.clear();
    down_bn_.clear();
    int cin = cfg_.in_channels;
    for (size_t i = 0; i < cfg_.down_filters.size(); ++i) {
      Conv2dLayer conv;
      conv.name = "down." + std::to_string(i) + ".conv";
      conv.stride = 2;
      conv.init(3, 3, cin, cfg_.down_filters[i], rng);
      BatchNormLayer bn;
      bn.name = "down." + std::to_string(i) + ".bn";
      bn.init(cfg_.down_filters[i]);
      down_.push_back(std::move(conv));
      down_bn_.push_back(std::move(bn));
      cin = cfg_.down_filters[i];
    }
    proj_.name = "down.proj.conv";
    proj_.stride = 1;
    proj_.init(1, 1, cin, cfg_.feat_channels, rng);
    proj_bn_.name = "down.proj.bn";
    proj_bn_.init(cfg_.feat_channels);

    enc_lstm_.name = "enc_lstm";
    enc_lstm_.init(cfg_.feat_channels, cfg_.feat_channels, rng);
    dec_lstm_.name = "dec_lstm";
    dec_lstm_.init(cfg_.feat_channels, cfg_.feat_channels, rng);

    up_deconv_.clear();
    up_bn1_.clear();
    up_refine_.clear();
    up_bn2_.clear();
    int uc = cfg_.feat_channels;
    for (int i = 0; i < num_up_stages_; ++i) {
      DeconvLayer de;
      de.name = "up." + std::to_string(i) + ".deconv";
      de.init(4, 4, cfg_.up_channels, uc, rng);
      BatchNormLayer bn1;
      bn1.name = "up." + std::to_string(i) + ".bn1";
      bn1.init(cfg_.up_channels, kMaxUnrollStats);
      Conv2dLayer refine;
      refine.name = "up." + std::to_string(i) + ".refine";
      refine.stride = 1;
      refine.init(3, 3, cfg_.up_channels, cfg_.up_channels, rng);
      BatchNormLayer bn2;
      bn2.name = "up." + std::to_string(i) + ".bn2";
      bn2.init(cfg_.up_channels, kMaxUnrollStats);
      up_deconv_.push_back(std::move(de));
      up_bn1_.push_back(std::move(bn1));
      up_refine_.push_back(std::move(refine));
      up_bn2_.push_back(std::move(bn2));
      uc = cfg_.up_channels;
    }
    head_.name = "head.conv";
    head_.stride = 1;
    head_.init(1, 1, uc, cfg_.K, rng);
  }

  Var downsample(Graph& g, Var frame, RunMode mode) {
    const Tensor& v = g.value(frame);
    AF_CHECK(v.ndim() == 4 && v.dim(1) == cfg_.H && v.dim(2) == cfg_.W &&
                 v.dim(3) == cfg_.in_channels,
             "frame shape " << v.shape_str() << " does not match config [N," << cfg_.H
                            << "," << cfg_.W << "," << cfg_.in_channels << "]");
    Var x = frame;
    for (size_t i = 0; i < down_.size(); ++i)
      x = g.relu(down_bn_[i].forward(g, down_[i].forward(g, x), mode));
    x = g.relu(proj_bn_.forward(g, proj_.forward(g, x), mode));
    return x;
  }

  // Returns (h, c) after running the encoder ConvLSTM over the pair.
  std::pair<Var, Var> encode_pair(Graph& g, Var x1, Var x2, RunMode mode) {
    Var f1 = downsample(g, x1, mode);
    Var f2 = downsample(g, x2, mode);
    const int N = g.value(f1).dim(0);
    Var h0 = g.constant(Tensor({N, cfg_.fh(), cfg_.fw(), cfg_.feat_channels}));
    Var c0 = g.constant(Tensor({N, cfg_.fh(), cfg_.fw(), cfg_.feat_channels}));
    auto [h1, c1] = enc_lstm_.step(g, f1, h0, c0);
    return enc_lstm_.step(g, f2, h1, c1);
  }

  std::vector<Var> decode_sequence(Graph& g, Var h, Var c, int T, RunMode mode) {
    AF_CHECK(T >= 1, "decode_sequence needs T >= 1, got " << T);
    std::vector<Var> logits;
    logits.reserve(static_cast<size_t>(T));
    Var dh = h, dc = c;
    for (int t = 0; t < T; ++t) {
      std::tie(dh, dc) = dec_lstm_.step(g, -1, dh, dc);
      Var x = dh;
      for (int i = 0; i < num_up_stages_; ++i) {
        x = g.relu(up_bn1_[static_cast<size_t>(i)].forward(
            g, up_deconv_[static_cast<size_t>(i)].forward(g, x), mode, t));
        x = g.relu(up_bn2_[static_cast<size_t>(i)].forward(
            g, up_refine_[static_cast<size_t>(i)].forward(g, x), mode, t));
      }
      logits.push_back(head_.forward(g, x));
    }
    return logits;
  }

  std::vector<Var> forward(Graph& g, Var x1, Var x2, int T, RunMode mode) {
    auto [h, c] = encode_pair(g, x1, x2, mode);
    return decode_sequence(g, h, c, T, mode);
  }

  // Trainable parameters in fixed order.
  void visit_params(const std::function<void(const std::string&, Tensor&)>& fn) {
    for (size_t i = 0; i < down_.size(); ++i) {
      fn(down_[i].name + ".w", down_[i].w);
      fn(down_[i].name + ".b", down_[i].b);
      fn(down_bn_[i].name + ".gamma", down_bn_[i].gamma);
      fn(down_bn_[i].name + ".beta", down_bn_[i].beta);
    }
    fn(proj_.name + ".w", proj_.w);
    fn(proj_.name + ".b", proj_.b);
    fn(proj_bn_.name + ".gamma", proj_bn_.gamma);
    fn(proj_bn_.name + ".beta", proj_bn_.beta);
    for (ConvLSTMCell* cell : {&enc_lstm_, &dec_lstm_}) {
      fn(cell->name + ".wx", cell->wx);
      fn(cell->name + ".wh", cell->wh);
      fn(cell->name + ".b", cell->b);
    }
    for (int i = 0; i < num_up_stages_; ++i) {
      auto& de = up_deconv_[static_cast<size_t>(i)];
      auto& bn1 = up_bn1_[static_cast<size_t>(i)];
      auto& re = up_refine_[static_cast<size_t>(i)];
      auto& bn2 = up_bn2_[static_cast<size_t>(i)];
      fn(de.name + ".w", de.w);
      fn(de.name + ".b", de.b);
      fn(bn1.name + ".gamma", bn1.gamma);
      fn(bn1.name + ".beta", bn1.beta);
      fn(re.name + ".w", re.w);
      fn(re.name + ".b", re.b);
      fn(bn2.name + ".gamma", bn2.gamma);
      fn(bn2.name + ".beta", bn2.beta);
    }
    fn(head_.name + ".w", head_.w);
    fn(head_.name + ".b", head_.b);
  }

  // Non-trained state: batch-norm running statistics.
  void visit_state(const std::function<void(const std::string&, Tensor&)>& fn) {
    for (auto& bn : down_bn_) {
      fn(bn.name + ".mean", bn.run_mean);
      fn(bn.name + ".var", bn.run_var);
    }
    fn(proj_bn_.name + ".mean", proj_bn_.run_mean);
    fn(proj_bn_.name + ".var", proj_bn_.run_var);
    for (int i = 0; i < num_up_stages_; ++i) {
      for (BatchNormLayer* bn :
           {&up_bn1_[static_cast<size_t>(i)], &up_bn2_[static_cast<size_t>(i)]}) {
        fn(bn->name + ".mean", bn->run_mean);
        fn(bn->name + ".var", bn->run_var);
      }
    }
  }

  long long param_count() {
    long long n = 0;
    visit_params([&](const std::string&, Tensor& t) { n += static_cast<long long>(t.numel()); });
    return n;
  }

  // Only the parameters reachable by an encoder-side forward (downsampler +
  // encoder ConvLSTM). Used by recognition to freeze or fine-tune the encoder.
  void visit_encoder_params(const std::function<void(const std::string&, Tensor&)>& fn) {
    visit_params([&](const std::string& name, Tensor& t) {
      if (name.rfind("down.", 0) == 0 || name.rfind("enc_lstm.", 0) == 0) fn(name, t);
    });
  }

  void save_params(const std::string& dir) {
    namespace fs = std::filesystem;
    fs::create_directories(fs::path(dir) / "params");
    fs::create_directories(fs::path(dir) / "state");
    visit_params([&](const std::string& name, Tensor& t) {
      atf::write_tensor((fs::path(dir) / "params" / (name + ".atf")).string(), t);
    });
    visit_state([&](const std::string& name, Tensor& t) {
      atf::write_tensor((fs::path(dir) / "state" / (name + ".atf")).string(), t);
    });
  }

  void load_params(const std::string& dir) {
    namespace fs = std::filesystem;
    visit_params([&](const std::string& name, Tensor& t) {
      const fs::path p = fs::path(dir) / "params" / (name + ".atf");
      AF_CHECK(fs::exists(p), "checkpoint missing parameter " << name << " (" << p.string() << ")");
      Tensor loaded = atf::read_tensor(p.string());
      AF_CHECK(loaded.same_shape(t), "checkpoint parameter " << name << " has shape "
                                                             << loaded.shape_str()
                                                             << ", expected "
                                                             << t.shape_str());
      t = std::move(loaded);
    });
    visit_state([&](const std::string& name, Tensor& t) {
      const fs::path p = fs::path(dir) / "state" / (name + ".atf");
      AF_CHECK(fs::exists(p), "checkpoint missing state " << name << " (" << p.string() << ")");
      Tensor loaded = atf::read_tensor(p.string());
      AF_CHECK(loaded.same_shape(t), "checkpoint state " << name << " shape mismatch");
      t = std::move(loaded);
    });
  }

 private:
  ModelConfig cfg_;
  int num_up_stages_ = 0;
  std::vector<Conv2dLayer> down_;
  std::vector<BatchNormLayer> down_bn_;
  Conv2dLayer proj_;
  BatchNormLayer proj_bn_;
  ConvLSTMCell enc_lstm_;
  ConvLSTMCell dec_lstm_;
  std::vector<DeconvLayer> up_deconv_;
  std::vector<BatchNormLayer> up_bn1_;
  std::vector<Conv2dLayer> up_refine_;
  std::vector<BatchNormLayer> up_bn2_;
  Conv2dLayer head_;
};

}  // namespace atomflow
