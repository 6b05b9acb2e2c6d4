#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <random>
#include <string>
#include <vector>

#include "json.hpp"

#include "atomflow/codec.hpp"
#include "atomflow/common.hpp"
#include "atomflow/serialize.hpp"
#include "atomflow/tensor.hpp"

namespace atomflow {

// ---------------------------------------------------------------------------
// Motion programs: the activity classes. Each program is a parametric
// trajectory; per-clip amplitude/speed/phase are jittered so appearance and
// exact motion vary within a class while the motion *kind* stays diagnostic.
// ---------------------------------------------------------------------------

enum class MotionKind { kStatic, kConstant, kRaise, kLower, kWave, kPush, kPull, kCircle };

struct MotionProgram {
  int id = 0;
  std::string name;
  MotionKind kind = MotionKind::kStatic;
  double amp = 0.0;     // pixels for image-plane programs, depth units for z programs
  double speed = 1.0;   // cycles per clip for periodic programs
  double jitter = 0.2;  // relative spread of amp/speed; phase fully random when > 0
  double vx = 0.0, vy = 0.0, vz = 0.0;  // kConstant only
};

inline std::vector<MotionProgram> default_programs() {
  std::vector<MotionProgram> p(6);
  p[0] = {0, "raise", MotionKind::kRaise, 10.0, 1.0, 0.2};
  p[1] = {1, "lower", MotionKind::kLower, 10.0, 1.0, 0.2};
  // Periodic speeds are kept below ~0.7 cycles per clip so the phase advance
  // over an 8-step prediction horizon stays under a half cycle; faster settings
  // alias the longest horizons back onto the observed motion, which inverts
  // the difficulty-vs-horizon profile the prediction task is meant to have.
  p[2] = {2, "wave", MotionKind::kWave, 5.0, 0.6, 0.2};
  p[3] = {3, "push", MotionKind::kPush, 0.35, 1.0, 0.2};
  p[4] = {4, "pull", MotionKind::kPull, 0.35, 1.0, 0.2};
  p[5] = {5, "circle", MotionKind::kCircle, 5.0, 0.6, 0.2};
  return p;
}

// Closed-form displacement from the spawn position at integer frame index t.
struct Trajectory {
  MotionKind kind = MotionKind::kStatic;
  double amp = 0.0;
  double speed = 1.0;
  double phase = 0.0;  // cycles
  double vx = 0.0, vy = 0.0, vz = 0.0;
  int frames = 2;

  // out = (dx, dy, dz); y grows downward (row axis), z is depth.
  void displacement(int t, double out[3]) const {
    const double tau = static_cast<double>(t) / (frames - 1);
    out[0] = out[1] = out[2] = 0.0;
    switch (kind) {
      case MotionKind::kStatic:
        break;
      case MotionKind::kConstant:
        out[0] = vx * t;
        out[1] = vy * t;
        out[2] = vz * t;
        break;
      case MotionKind::kRaise:
        out[1] = -amp * tau;
        break;
      case MotionKind::kLower:
        out[1] = amp * tau;
        break;
      case MotionKind::kWave: {
        const double th0 = 2.0 * M_PI * phase;
        const double th = 2.0 * M_PI * (speed * tau + phase);
        out[0] = amp * (std::sin(th) - std::sin(th0));
        break;
      }
      case MotionKind::kPush:
        out[2] = -amp * tau;
        break;
      case MotionKind::kPull:
        out[2] = amp * tau;
        break;
      case MotionKind::kCircle: {
        const double th0 = 2.0 * M_PI * phase;
        const double th = 2.0 * M_PI * (speed * tau + phase);
        out[0] = amp * (std::cos(th) - std::cos(th0));
        out[1] = amp * (std::sin(th) - std::sin(th0));
        break;
      }
    }
  }
};

inline Trajectory make_trajectory(const MotionProgram& p, int frames, std::mt19937_64& rng) {
  Trajectory t;
  t.kind = p.kind;
  t.frames = frames;
  t.vx = p.vx;
  t.vy = p.vy;
  t.vz = p.vz;
  // Fixed draw order keeps clips bit-reproducible for a given seed.
  std::uniform_real_distribution<double> unit(-1.0, 1.0);
  std::uniform_real_distribution<double> cycle(0.0, 1.0);
  const double amp_j = unit(rng);
  const double spd_j = unit(rng);
  const double ph = cycle(rng);
  t.amp = p.amp * (1.0 + p.jitter * amp_j);
  t.speed = p.speed * (1.0 + p.jitter * spd_j);
  t.phase = p.jitter > 0.0 ? ph : 0.0;
  return t;
}

// ---------------------------------------------------------------------------
// Scene and clip generation
// ---------------------------------------------------------------------------

struct SceneConfig {
  int H = 64, W = 64;
  int T_total = 12;
  int M = 4;  // codec patch size; dims must divide by it
  int min_shapes = 1, max_shapes = 3;
  double min_size = 10.0, max_size = 18.0;  // full extent in pixels
};

struct ClipRecord {
  std::vector<Tensor> frames;  // T_total x [H,W,4]: RGB + depth, all in [0,1]
  std::vector<Tensor> flows;   // (T_total-1) x [H,W,3]; flows[t] maps frame t -> t+1
  int label = -1;
  uint64_t seed = 0;
};

namespace synth_detail {

struct Shape {
  bool disc = false;
  double cx = 0, cy = 0;        // spawn center, pixel coords (x = column, y = row)
  double hw = 0, hh = 0;        // half extents
  double depth0 = 0.5;
  double color[3] = {0, 0, 0};
  Trajectory traj;

  bool covers(double px, double py, int t) const {
    double d[3];
    traj.displacement(t, d);
    const double rx = (px - (cx + d[0])) / hw;
    const double ry = (py - (cy + d[1])) / hh;
    if (disc) return rx * rx + ry * ry <= 1.0;
    return std::abs(rx) <= 1.0 && std::abs(ry) <= 1.0;
  }

  double depth_at(int t) const {
    double d[3];
    traj.displacement(t, d);
    return depth0 + d[2];
  }
};

// Smooth two-frequency field used for background and object texture.
struct TextureField {
  double base = 0.45, amp = 0.2;
  double fx = 2, fy = 2, px = 0, py = 0;
  double at(double x, double y, int W, int H) const {
    return base + amp * std::sin(2.0 * M_PI * (fx * x / W + px)) *
                      std::sin(2.0 * M_PI * (fy * y / H + py));
  }
};

}  // namespace synth_detail

// Render one deterministic clip: 1..3 rigid shapes following per-shape
// jittered instances of the program's trajectory over a static textured
// background. Flow at a pixel is the image/depth-space delta of the nearest
// covering shape; pure background pixels carry zero flow.
inline ClipRecord generate_clip(const MotionProgram& program, const SceneConfig& cfg,
                                uint64_t seed) {
  AF_CHECK(cfg.H >= 8 && cfg.W >= 8, "scene dims too small: " << cfg.H << "x" << cfg.W);
  AF_CHECK(cfg.H % cfg.M == 0 && cfg.W % cfg.M == 0,
           "scene dims " << cfg.H << "x" << cfg.W << " not divisible by patch size "
                         << cfg.M);
  AF_CHECK(cfg.T_total >= 2, "clip needs at least 2 frames, got " << cfg.T_total);
  AF_CHECK(cfg.min_shapes >= 1 && cfg.max_shapes >= cfg.min_shapes,
           "bad shape count range [" << cfg.min_shapes << "," << cfg.max_shapes << "]");

  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u01(0.0, 1.0);

  synth_detail::TextureField bg[3];
  std::uniform_int_distribution<int> freq(1, 3);
  for (int c = 0; c < 3; ++c) {
    bg[c].base = 0.3 + 0.3 * u01(rng);
    bg[c].amp = 0.1 + 0.15 * u01(rng);
    bg[c].fx = freq(rng);
    bg[c].fy = freq(rng);
    bg[c].px = u01(rng);
    bg[c].py = u01(rng);
  }
  synth_detail::TextureField object_tex;
  object_tex.base = 0.8;
  object_tex.amp = 0.2;
  object_tex.fx = freq(rng);
  object_tex.fy = freq(rng);
  object_tex.px = u01(rng);
  object_tex.py = u01(rng);

  std::uniform_int_distribution<int> shape_count(cfg.min_shapes, cfg.max_shapes);
  const int n_shapes = shape_count(rng);
  std::vector<synth_detail::Shape> shapes(static_cast<size_t>(n_shapes));
  for (auto& s : shapes) {
    s.disc = u01(rng) < 0.5;
    std::uniform_real_distribution<double> size(cfg.min_size, cfg.max_size);
    s.hw = size(rng) / 2.0;
    s.hh = size(rng) / 2.0;
    s.traj = make_trajectory(program, cfg.T_total, rng);
    // Trajectory extent over the rendered frames decides the legal spawn box.
    double dx_min = 0, dx_max = 0, dy_min = 0, dy_max = 0, dz_min = 0, dz_max = 0;
    for (int t = 0; t < cfg.T_total; ++t) {
      double d[3];
      s.traj.displacement(t, d);
      dx_min = std::min(dx_min, d[0]);
      dx_max = std::max(dx_max, d[0]);
      dy_min = std::min(dy_min, d[1]);
      dy_max = std::max(dy_max, d[1]);
      dz_min = std::min(dz_min, d[2]);
      dz_max = std::max(dz_max, d[2]);
    }
    const double x_lo = s.hw - dx_min;
    const double x_hi = (cfg.W - 1) - s.hw - dx_max;
    const double y_lo = s.hh - dy_min;
    const double y_hi = (cfg.H - 1) - s.hh - dy_max;
    AF_CHECK(x_lo <= x_hi && y_lo <= y_hi,
             "trajectory leaves frame: program '" << program.name << "' amplitude "
                                                  << s.traj.amp << " does not fit "
                                                  << cfg.W << "x" << cfg.H
                                                  << " with shape extent " << 2 * s.hw
                                                  << "x" << 2 * s.hh);
    s.cx = x_lo + (x_hi - x_lo) * u01(rng);
    s.cy = y_lo + (y_hi - y_lo) * u01(rng);
    const double z_lo = 0.15 - dz_min;
    const double z_hi = 0.85 - dz_max;
    AF_CHECK(z_lo <= z_hi, "trajectory leaves depth range: program '"
                               << program.name << "' z amplitude " << s.traj.amp);
    s.depth0 = z_lo + (z_hi - z_lo) * u01(rng);
    for (int c = 0; c < 3; ++c) s.color[c] = 0.25 + 0.75 * u01(rng);
  }

  ClipRecord clip;
  clip.label = program.id;
  clip.seed = seed;
  clip.frames.reserve(static_cast<size_t>(cfg.T_total));
  clip.flows.reserve(static_cast<size_t>(cfg.T_total - 1));
  for (int t = 0; t < cfg.T_total; ++t) {
    Tensor frame({cfg.H, cfg.W, 4});
    for (int i = 0; i < cfg.H; ++i)
      for (int j = 0; j < cfg.W; ++j) {
        const double px = j, py = i;
        int win = -1;
        double win_depth = 1.0;  // background plane
        for (int sidx = 0; sidx < n_shapes; ++sidx) {
          if (!shapes[static_cast<size_t>(sidx)].covers(px, py, t)) continue;
          const double d = shapes[static_cast<size_t>(sidx)].depth_at(t);
          if (d < win_depth) {
            win_depth = d;
            win = sidx;
          }
        }
        double* out = frame.data() + frame.idx3(i, j, 0);
        if (win < 0) {
          for (int c = 0; c < 3; ++c)
            out[c] = std::clamp(bg[c].at(px, py, cfg.W, cfg.H), 0.0, 1.0);
          out[3] = 1.0;
        } else {
          const auto& s = shapes[static_cast<size_t>(win)];
          const double tex = object_tex.at(px, py, cfg.W, cfg.H);
          for (int c = 0; c < 3; ++c) out[c] = std::clamp(s.color[c] * tex, 0.0, 1.0);
          out[3] = std::clamp(win_depth, 0.0, 1.0);
        }
      }
    clip.frames.push_back(std::move(frame));
  }
  for (int t = 0; t + 1 < cfg.T_total; ++t) {
    Tensor flow({cfg.H, cfg.W, 3});
    for (int i = 0; i < cfg.H; ++i)
      for (int j = 0; j < cfg.W; ++j) {
        const double px = j, py = i;
        int win = -1;
        double win_depth = 1.0;
        for (int sidx = 0; sidx < n_shapes; ++sidx) {
          if (!shapes[static_cast<size_t>(sidx)].covers(px, py, t)) continue;
          const double d = shapes[static_cast<size_t>(sidx)].depth_at(t);
          if (d < win_depth) {
            win_depth = d;
            win = sidx;
          }
        }
        if (win < 0) continue;
        double a[3], b[3];
        const auto& s = shapes[static_cast<size_t>(win)];
        s.traj.displacement(t, a);
        s.traj.displacement(t + 1, b);
        double* out = flow.data() + flow.idx3(i, j, 0);
        out[0] = b[0] - a[0];
        out[1] = b[1] - a[1];
        out[2] = b[2] - a[2];
      }
    clip.flows.push_back(std::move(flow));
  }
  return clip;
}

// ---------------------------------------------------------------------------
// Dataset build: split quotas, normalization, p-tilde, serialization
// ---------------------------------------------------------------------------

enum Split { kTrain = 0, kVal = 1, kTest = 2 };

inline const char* split_name(int s) {
  static const char* names[3] = {"train", "val", "test"};
  AF_CHECK(s >= 0 && s < 3, "bad split id " << s);
  return names[s];
}

// Per-program 70/15/15 quota. Floors first; leftover clips go to the split
// with the largest deficit, val/test ties alternating by program so global
// counts stay balanced (6 programs x 10 clips -> 42/9/9 overall).
inline std::array<int, 3> split_quota(int clips_per_program, int program_index) {
  AF_CHECK(clips_per_program >= 3,
           "need at least 3 clips per program, got " << clips_per_program);
  const double frac[3] = {0.70, 0.15, 0.15};
  std::array<int, 3> q{};
  int assigned = 0;
  for (int s = 0; s < 3; ++s) {
    q[static_cast<size_t>(s)] = static_cast<int>(frac[s] * clips_per_program + 1e-9);
    assigned += q[static_cast<size_t>(s)];
  }
  for (int r = 0; r < clips_per_program - assigned; ++r) {
    int order[3] = {kVal, kTest, kTrain};
    if ((program_index + r) % 2 == 1) std::swap(order[0], order[1]);
    int best = order[0];
    double best_deficit = -1e300;
    for (int s : order) {
      const double deficit = frac[s] * clips_per_program - q[static_cast<size_t>(s)];
      if (deficit > best_deficit + 1e-12) {
        best_deficit = deficit;
        best = s;
      }
    }
    ++q[static_cast<size_t>(best)];
  }
  return q;
}

struct DatasetClip {
  std::string path;  // relative to dataset root
  int label = -1;
  uint64_t seed = 0;
  int split = kTrain;
  ClipRecord rec;
  // Per flow index: flow scaled by the dataset normalization, its codec
  // targets, and the patch-mean reference used for RMSE.
  std::vector<Tensor> norm_flows;
  std::vector<SparseAssign> targets;
};

struct Dataset {
  SceneConfig geometry;
  CodecParams codec;
  std::array<double, 3> normalization_scale{1.0, 1.0, 1.0};
  Tensor p_tilde;
  std::vector<std::string> label_names;
  std::vector<DatasetClip> clips;
  std::vector<int> by_split[3];

  Codebook codebook() const { return Codebook(codec.bins_per_axis, codec.bound); }
  int num_labels() const { return static_cast<int>(label_names.size()); }
};

namespace synth_detail {

// 99th percentile of nonzero |component| values for one axis of one clip;
// 0 when the axis is everywhere zero.
inline double clip_q99(const ClipRecord& clip, int axis) {
  std::vector<double> mags;
  for (const Tensor& f : clip.flows)
    for (size_t p = 0; p < f.numel() / 3; ++p) {
      const double v = std::abs(f[p * 3 + static_cast<size_t>(axis)]);
      if (v > 0.0) mags.push_back(v);
    }
  if (mags.empty()) return 0.0;
  const size_t pos = static_cast<size_t>(
      std::ceil(0.99 * static_cast<double>(mags.size()))) - 1;
  std::nth_element(mags.begin(), mags.begin() + static_cast<long>(pos), mags.end());
  return mags[pos];
}

inline std::string clip_dir_name(int index) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "clip_%04d", index);
  return buf;
}

inline std::string frame_file(int t) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "frames_%04d.atf", t);
  return buf;
}

inline std::string flow_file(int t) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "flow_%04d.atf", t);
  return buf;
}

}  // namespace synth_detail

// Per-axis normalization so quantization sees comparable magnitudes on image
// (pixels) and depth (unit-cube) axes: scale = 0.9 * B / max over all clips
// of the per-clip q99, a dataset-level magnitude constant (no label
// information). Using every split keeps the normalized q99 of each clip at
// most 0.9 * B by construction. Axes with no motion anywhere keep scale 1.
inline std::array<double, 3> compute_normalization_scale(
    const std::vector<ClipRecord>& clips, double bound) {
  std::array<double, 3> scale{1.0, 1.0, 1.0};
  for (int axis = 0; axis < 3; ++axis) {
    double worst = 0.0;
    for (const ClipRecord& c : clips)
      worst = std::max(worst, synth_detail::clip_q99(c, axis));
    if (worst > 0.0) scale[static_cast<size_t>(axis)] = 0.9 * bound / worst;
  }
  return scale;
}

inline Tensor apply_scale(const Tensor& flow, const std::array<double, 3>& scale) {
  Tensor out(flow.shape());
  for (size_t p = 0; p < flow.numel() / 3; ++p)
    for (size_t a = 0; a < 3; ++a) out[p * 3 + a] = flow[p * 3 + a] * scale[a];
  return out;
}

// Builds and writes a complete dataset directory:
//   manifest.json, p_tilde.atf, clips/clip_%04d/{frames_%04d.atf, flow_%04d.atf}
// Flows are stored raw (analytic units); the manifest's normalization_scale
// is applied by loaders, so saved clips round-trip bit-identically.
inline void build_dataset(const std::vector<MotionProgram>& programs,
                          int clips_per_program, uint64_t seed, const SceneConfig& scene,
                          const CodecParams& codec, const std::string& out_dir) {
  AF_CHECK(!programs.empty(), "no motion programs given");
  namespace fs = std::filesystem;
  const Codebook cb(codec.bins_per_axis, codec.bound);

  struct Built {
    ClipRecord rec;
    int split;
  };
  std::vector<Built> built;
  built.reserve(static_cast<size_t>(programs.size()) * clips_per_program);
  for (size_t p = 0; p < programs.size(); ++p) {
    const auto quota = split_quota(clips_per_program, static_cast<int>(p));
    for (int j = 0; j < clips_per_program; ++j) {
      const uint64_t clip_seed = mix_seed(seed, p * 1000003ULL + static_cast<uint64_t>(j));
      Built b;
      b.rec = generate_clip(programs[p], scene, clip_seed);
      b.split = j < quota[0] ? kTrain : (j < quota[0] + quota[1] ? kVal : kTest);
      built.push_back(std::move(b));
    }
  }

  std::vector<ClipRecord> all_view;
  for (const Built& b : built) all_view.push_back(b.rec);  // copy is fine at this scale
  const auto scale = compute_normalization_scale(all_view, codec.bound);

  // The normalized per-clip q99 must stay inside the codebook cube for every
  // split, not just train; fail the build rather than emit a broken dataset.
  for (const Built& b : built)
    for (int axis = 0; axis < 3; ++axis) {
      const double q = synth_detail::clip_q99(b.rec, axis) * scale[static_cast<size_t>(axis)];
      AF_CHECK(q <= codec.bound + 1e-9,
               "normalized q99 " << q << " exceeds bound " << codec.bound << " on axis "
                                 << axis << " for clip seed " << b.rec.seed);
    }

  std::vector<Tensor> norm_train_flows;
  for (const Built& b : built)
    if (b.split == kTrain)
      for (const Tensor& f : b.rec.flows) norm_train_flows.push_back(apply_scale(f, scale));
  std::vector<const Tensor*> flow_ptrs;
  flow_ptrs.reserve(norm_train_flows.size());
  for (const Tensor& f : norm_train_flows) flow_ptrs.push_back(&f);
  const Tensor p_tilde = estimate_p_tilde(flow_ptrs, cb, scene.M);

  fs::create_directories(fs::path(out_dir) / "clips");
  atf::write_tensor((fs::path(out_dir) / "p_tilde.atf").string(), p_tilde);

  nlohmann::ordered_json manifest;
  manifest["codec"] = {{"bins_per_axis", codec.bins_per_axis},
                       {"bound", codec.bound},
                       {"k_nn", codec.k_nn},
                       {"lambda", codec.lambda}};
  manifest["geometry"] = {{"H", scene.H}, {"W", scene.W}, {"M", scene.M},
                          {"T_total", scene.T_total}};
  manifest["normalization_scale"] = {scale[0], scale[1], scale[2]};
  manifest["p_tilde_path"] = "p_tilde.atf";
  nlohmann::ordered_json names = nlohmann::ordered_json::array();
  for (const auto& p : programs) names.push_back(p.name);
  manifest["label_names"] = names;
  nlohmann::ordered_json clips = nlohmann::ordered_json::array();
  for (size_t i = 0; i < built.size(); ++i) {
    const std::string rel = std::string("clips/") + synth_detail::clip_dir_name(static_cast<int>(i));
    const fs::path dir = fs::path(out_dir) / rel;
    fs::create_directories(dir);
    const ClipRecord& rec = built[i].rec;
    for (size_t t = 0; t < rec.frames.size(); ++t)
      atf::write_tensor((dir / synth_detail::frame_file(static_cast<int>(t))).string(),
                        rec.frames[t]);
    for (size_t t = 0; t < rec.flows.size(); ++t)
      atf::write_tensor((dir / synth_detail::flow_file(static_cast<int>(t))).string(),
                        rec.flows[t]);
    clips.push_back({{"path", rel},
                     {"label", rec.label},
                     {"seed", rec.seed},
                     {"split", split_name(built[i].split)}});
  }
  manifest["clips"] = std::move(clips);
  write_text_file((fs::path(out_dir) / "manifest.json").string(), manifest.dump(2) + "\n");
}

// Loads and validates one clip directory laid out as frames_%04d.atf /
// flow_%04d.atf. Also the adapter point for externally computed flow: any
// directory matching the naming and geometry loads the same way.
inline ClipRecord load_clip_dir(const std::string& dir, int T_total, int H, int W) {
  namespace fs = std::filesystem;
  ClipRecord rec;
  for (int t = 0; t < T_total; ++t) {
    const fs::path p = fs::path(dir) / synth_detail::frame_file(t);
    AF_CHECK(fs::exists(p), "clip " << dir << ": missing frame index " << t << " ("
                                    << p.string() << ")");
    Tensor f = atf::read_tensor(p.string());
    AF_CHECK(f.ndim() == 3 && f.dim(0) == H && f.dim(1) == W && f.dim(2) == 4,
             "clip " << dir << ": frame " << t << " has shape " << f.shape_str()
                     << ", expected [" << H << "," << W << ",4]");
    AF_CHECK(all_finite(f), "clip " << dir << ": frame " << t << " contains non-finite values");
    rec.frames.push_back(std::move(f));
  }
  for (int t = 0; t + 1 < T_total; ++t) {
    const fs::path p = fs::path(dir) / synth_detail::flow_file(t);
    AF_CHECK(fs::exists(p), "clip " << dir << ": missing flow index " << t << " ("
                                    << p.string() << ")");
    Tensor f = atf::read_tensor(p.string());
    AF_CHECK(f.ndim() == 3 && f.dim(0) == H && f.dim(1) == W && f.dim(2) == 3,
             "clip " << dir << ": flow " << t << " has shape " << f.shape_str()
                     << ", expected [" << H << "," << W << ",3]");
    AF_CHECK(all_finite(f), "clip " << dir << ": flow " << t << " contains non-finite values");
    rec.flows.push_back(std::move(f));
  }
  return rec;
}

inline Dataset load_dataset(const std::string& root) {
  namespace fs = std::filesystem;
  const fs::path manifest_path = fs::path(root) / "manifest.json";
  AF_CHECK(fs::exists(manifest_path), "no manifest.json under " << root);
  nlohmann::json m;
  try {
    m = nlohmann::json::parse(read_text_file(manifest_path.string()));
  } catch (const nlohmann::json::exception& e) {
    AF_CHECK(false, "failed to parse " << manifest_path.string() << ": " << e.what());
  }

  Dataset ds;
  ds.codec.bins_per_axis = m.at("codec").at("bins_per_axis").get<int>();
  ds.codec.bound = m.at("codec").at("bound").get<double>();
  ds.codec.k_nn = m.at("codec").at("k_nn").get<int>();
  ds.codec.lambda = m.at("codec").at("lambda").get<double>();
  ds.geometry.H = m.at("geometry").at("H").get<int>();
  ds.geometry.W = m.at("geometry").at("W").get<int>();
  ds.geometry.M = m.at("geometry").at("M").get<int>();
  ds.geometry.T_total = m.at("geometry").at("T_total").get<int>();
  const auto& ns = m.at("normalization_scale");
  AF_CHECK(ns.size() == 3, "normalization_scale must have 3 entries");
  for (size_t a = 0; a < 3; ++a) ds.normalization_scale[a] = ns[a].get<double>();
  for (const auto& n : m.at("label_names")) ds.label_names.push_back(n.get<std::string>());

  const Codebook cb(ds.codec.bins_per_axis, ds.codec.bound);
  ds.p_tilde =
      atf::read_tensor((fs::path(root) / m.at("p_tilde_path").get<std::string>()).string());
  AF_CHECK(ds.p_tilde.ndim() == 1 && ds.p_tilde.dim(0) == cb.size(),
           "p_tilde shape " << ds.p_tilde.shape_str() << " does not match K = "
                            << cb.size());
  double mass = 0.0;
  for (size_t k = 0; k < ds.p_tilde.numel(); ++k) mass += ds.p_tilde[k];
  AF_CHECK(std::abs(mass - 1.0) <= 1e-9, "p_tilde sums to " << mass);

  for (const auto& entry : m.at("clips")) {
    DatasetClip c;
    c.path = entry.at("path").get<std::string>();
    c.label = entry.at("label").get<int>();
    c.seed = entry.at("seed").get<uint64_t>();
    const std::string sp = entry.at("split").get<std::string>();
    if (sp == "train") c.split = kTrain;
    else if (sp == "val") c.split = kVal;
    else if (sp == "test") c.split = kTest;
    else AF_CHECK(false, "unknown split '" << sp << "' for clip " << c.path);
    AF_CHECK(c.label >= 0 && c.label < static_cast<int>(ds.label_names.size()),
             "label " << c.label << " out of range for clip " << c.path);
    c.rec = load_clip_dir((fs::path(root) / c.path).string(), ds.geometry.T_total,
                          ds.geometry.H, ds.geometry.W);
    c.rec.label = c.label;
    c.rec.seed = c.seed;
    c.norm_flows.reserve(c.rec.flows.size());
    c.targets.reserve(c.rec.flows.size());
    for (const Tensor& f : c.rec.flows) {
      Tensor nf = apply_scale(f, ds.normalization_scale);
      c.targets.push_back(encode_sparse(nf, cb, ds.geometry.M, ds.codec.k_nn));
      c.norm_flows.push_back(std::move(nf));
    }
    ds.by_split[c.split].push_back(static_cast<int>(ds.clips.size()));
    ds.clips.push_back(std::move(c));
  }
  AF_CHECK(!ds.clips.empty(), "dataset " << root << " lists no clips");
  return ds;
}

}  // namespace atomflow
