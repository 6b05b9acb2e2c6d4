#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

#include "atomflow/common.hpp"
#include "atomflow/tensor.hpp"

namespace atomflow {

// Codec knobs shared between dataset builds and training runs.
struct CodecParams {
  int bins_per_axis = 5;
  double bound = 1.0;
  int k_nn = 4;
  double lambda = 0.5;  // class-weight smoothing
};

// Uniform codebook over the cube [-B, B]^3: n bins per axis, K = n^3 atomic
// flows at the bin centers. n must be odd so the zero flow is exactly
// representable (the center codeword).
class Codebook {
 public:
  Codebook(int bins_per_axis, double bound)
      : n_(bins_per_axis), bound_(bound), codewords_({size(), 3}) {
    AF_CHECK(n_ >= 1 && n_ % 2 == 1, "bins_per_axis must be odd and >= 1, got " << n_);
    AF_CHECK(bound_ > 0.0, "codebook bound must be positive, got " << bound_);
    for (int ix = 0; ix < n_; ++ix)
      for (int iy = 0; iy < n_; ++iy)
        for (int iz = 0; iz < n_; ++iz) {
          const int k = index_of(ix, iy, iz);
          codewords_[codewords_.idx2(k, 0)] = center(ix);
          codewords_[codewords_.idx2(k, 1)] = center(iy);
          codewords_[codewords_.idx2(k, 2)] = center(iz);
        }
  }

  int bins_per_axis() const { return n_; }
  double bound() const { return bound_; }
  int size() const { return n_ * n_ * n_; }
  double bin_width() const { return 2.0 * bound_ / n_; }

  double center(int i) const { return -bound_ + (2 * i + 1) * bound_ / n_; }
  int index_of(int ix, int iy, int iz) const { return (ix * n_ + iy) * n_ + iz; }
  int zero_index() const { return index_of(n_ / 2, n_ / 2, n_ / 2); }

  const double* codeword(int k) const {
    AF_CHECK(k >= 0 && k < size(), "codeword index " << k << " out of range " << size());
    return codewords_.data() + static_cast<size_t>(k) * 3;
  }
  const Tensor& codewords() const { return codewords_; }

 private:
  int n_;
  double bound_;
  Tensor codewords_;  // [K,3]
};

// Soft assignment of one patch-mean flow vector: the k_nn nearest codewords
// by Euclidean distance, weighted by inverse distance. Distance ties resolve
// toward the lower codeword index.
struct SparseAssign {
  int h = 0, w = 0, k_nn = 0;
  std::vector<int> idx;      // [h*w*k_nn]
  std::vector<double> wgt;   // [h*w*k_nn], rows sum to 1

  Tensor densify(int K) const {
    Tensor out({h, w, K});
    for (int p = 0; p < h * w; ++p)
      for (int j = 0; j < k_nn; ++j)
        out[static_cast<size_t>(p) * K + idx[static_cast<size_t>(p) * k_nn + j]] =
            wgt[static_cast<size_t>(p) * k_nn + j];
    return out;
  }
};

namespace codec_detail {

inline void check_flow(const Tensor& flow, int M) {
  AF_CHECK(flow.ndim() == 3 && flow.dim(2) == 3,
           "flow field must be [H,W,3], got " << flow.shape_str());
  AF_CHECK(M >= 1, "patch size must be >= 1, got " << M);
  AF_CHECK(flow.dim(0) % M == 0 && flow.dim(1) % M == 0,
           "flow dims " << flow.dim(0) << "x" << flow.dim(1)
                        << " not divisible by patch size " << M);
}

// Mean of the patch with every pixel clipped into the codebook cube first, so
// out-of-range flow cannot drag the mean past the representable range.
inline void patch_mean_clipped(const Tensor& flow, int ph, int pw, int M, double B,
                               double out[3]) {
  out[0] = out[1] = out[2] = 0.0;
  for (int i = 0; i < M; ++i)
    for (int j = 0; j < M; ++j) {
      const double* px = flow.data() + flow.idx3(ph * M + i, pw * M + j, 0);
      for (int a = 0; a < 3; ++a) out[a] += std::clamp(px[a], -B, B);
    }
  const double inv = 1.0 / (M * M);
  for (int a = 0; a < 3; ++a) out[a] *= inv;
}

inline int nearest_codeword(const Codebook& cb, const double v[3]) {
  int best = 0;
  double best_d = std::numeric_limits<double>::infinity();
  for (int k = 0; k < cb.size(); ++k) {
    const double* c = cb.codeword(k);
    const double d = (v[0] - c[0]) * (v[0] - c[0]) + (v[1] - c[1]) * (v[1] - c[1]) +
                     (v[2] - c[2]) * (v[2] - c[2]);
    if (d < best_d) {  // strict: ties keep the lower index
      best_d = d;
      best = k;
    }
  }
  return best;
}

}  // namespace codec_detail

inline constexpr double kAssignEps = 1e-8;

// Quantize a dense flow field [H,W,3] into per-patch soft codeword
// assignments on the (H/M, W/M) grid.
inline SparseAssign encode_sparse(const Tensor& flow, const Codebook& cb, int M,
                                  int k_nn) {
  codec_detail::check_flow(flow, M);
  AF_CHECK(k_nn >= 1 && k_nn <= cb.size(),
           "k_nn must be in [1," << cb.size() << "], got " << k_nn);
  const int h = flow.dim(0) / M;
  const int w = flow.dim(1) / M;
  SparseAssign sa;
  sa.h = h;
  sa.w = w;
  sa.k_nn = k_nn;
  sa.idx.resize(static_cast<size_t>(h) * w * k_nn);
  sa.wgt.resize(static_cast<size_t>(h) * w * k_nn);
  const int K = cb.size();
  std::vector<std::pair<double, int>> dist(static_cast<size_t>(K));
  for (int ph = 0; ph < h; ++ph)
    for (int pw = 0; pw < w; ++pw) {
      double v[3];
      codec_detail::patch_mean_clipped(flow, ph, pw, M, cb.bound(), v);
      for (int k = 0; k < K; ++k) {
        const double* c = cb.codeword(k);
        const double d = (v[0] - c[0]) * (v[0] - c[0]) + (v[1] - c[1]) * (v[1] - c[1]) +
                         (v[2] - c[2]) * (v[2] - c[2]);
        dist[static_cast<size_t>(k)] = {d, k};
      }
      // (distance, index) order makes the tie rule explicit.
      std::partial_sort(dist.begin(), dist.begin() + k_nn, dist.end());
      const size_t base = (static_cast<size_t>(ph) * w + pw) * k_nn;
      double sum = 0.0;
      for (int j = 0; j < k_nn; ++j) {
        sa.idx[base + j] = dist[static_cast<size_t>(j)].second;
        const double wj = 1.0 / (std::sqrt(dist[static_cast<size_t>(j)].first) + kAssignEps);
        sa.wgt[base + j] = wj;
        sum += wj;
      }
      for (int j = 0; j < k_nn; ++j) sa.wgt[base + j] /= sum;
    }
  return sa;
}

inline Tensor encode(const Tensor& flow, const Codebook& cb, int M, int k_nn) {
  return encode_sparse(flow, cb, M, k_nn).densify(cb.size());
}

// Hard nearest-codeword index per patch, as an integer grid.
inline std::vector<int> hard_assign(const Tensor& flow, const Codebook& cb, int M) {
  codec_detail::check_flow(flow, M);
  const int h = flow.dim(0) / M;
  const int w = flow.dim(1) / M;
  std::vector<int> out(static_cast<size_t>(h) * w);
  for (int ph = 0; ph < h; ++ph)
    for (int pw = 0; pw < w; ++pw) {
      double v[3];
      codec_detail::patch_mean_clipped(flow, ph, pw, M, cb.bound(), v);
      out[static_cast<size_t>(ph) * w + pw] = codec_detail::nearest_codeword(cb, v);
    }
  return out;
}

// Expected flow under a per-patch distribution over codewords: [h,w,K] -> [h,w,3].
inline Tensor decode(const Tensor& grid, const Codebook& cb) {
  AF_CHECK(grid.ndim() == 3 && grid.dim(2) == cb.size(),
           "distribution grid must be [h,w," << cb.size() << "], got "
                                             << grid.shape_str());
  const int h = grid.dim(0), w = grid.dim(1), K = cb.size();
  Tensor out({h, w, 3});
  for (int p = 0; p < h * w; ++p) {
    const double* gp = grid.data() + static_cast<size_t>(p) * K;
    double* op = out.data() + static_cast<size_t>(p) * 3;
    for (int k = 0; k < K; ++k) {
      if (gp[k] == 0.0) continue;
      const double* c = cb.codeword(k);
      op[0] += gp[k] * c[0];
      op[1] += gp[k] * c[1];
      op[2] += gp[k] * c[2];
    }
  }
  return out;
}

// Patch-mean reference flow on the codeword grid, using the same clipped mean
// as the encoder so decoded predictions compare against what was encodable.
inline Tensor patch_mean_flow(const Tensor& flow, const Codebook& cb, int M) {
  codec_detail::check_flow(flow, M);
  const int h = flow.dim(0) / M;
  const int w = flow.dim(1) / M;
  Tensor out({h, w, 3});
  for (int ph = 0; ph < h; ++ph)
    for (int pw = 0; pw < w; ++pw)
      codec_detail::patch_mean_clipped(flow, ph, pw, M, cb.bound(),
                                       out.data() + out.idx3(ph, pw, 0));
  return out;
}

// Empirical codeword frequencies from hard assignments, for loss rebalancing.
inline Tensor estimate_p_tilde(const std::vector<const Tensor*>& flows,
                               const Codebook& cb, int M) {
  AF_CHECK(!flows.empty(), "p_tilde estimate needs at least one flow field");
  Tensor p({cb.size()});
  double total = 0.0;
  for (const Tensor* f : flows) {
    for (int k : hard_assign(*f, cb, M)) {
      p[static_cast<size_t>(k)] += 1.0;
      total += 1.0;
    }
  }
  for (size_t k = 0; k < p.numel(); ++k) p[k] /= total;
  return p;
}

// Inverse-frequency class weights, blended toward uniform by lambda:
//   r_k = ((1 - lambda) * p_k + lambda / K)^-1,  w = r / sum_k p_k r_k
// so that sum_k p_k w_k == 1 (rebalancing preserves the average weight).
inline Tensor class_weights(const Tensor& p_tilde, double lambda) {
  AF_CHECK(p_tilde.ndim() == 1, "p_tilde must be rank 1, got " << p_tilde.shape_str());
  AF_CHECK(lambda >= 0.0 && lambda <= 1.0, "lambda must be in [0,1], got " << lambda);
  const int K = p_tilde.dim(0);
  double mass = 0.0;
  for (int k = 0; k < K; ++k) {
    const double pk = p_tilde[static_cast<size_t>(k)];
    AF_CHECK(pk >= 0.0, "p_tilde[" << k << "] is negative: " << pk);
    mass += pk;
  }
  AF_CHECK(std::abs(mass - 1.0) <= 1e-9, "p_tilde must sum to 1, got " << mass);
  Tensor r({K});
  for (int k = 0; k < K; ++k) {
    const double denom = (1.0 - lambda) * p_tilde[static_cast<size_t>(k)] + lambda / K;
    AF_CHECK(denom > 0.0, "class " << k
                                   << " has zero probability and lambda leaves it "
                                      "unsmoothed; cannot invert frequency");
    r[static_cast<size_t>(k)] = 1.0 / denom;
  }
  double z = 0.0;
  for (int k = 0; k < K; ++k) z += p_tilde[static_cast<size_t>(k)] * r[static_cast<size_t>(k)];
  Tensor w({K});
  for (int k = 0; k < K; ++k) w[static_cast<size_t>(k)] = r[static_cast<size_t>(k)] / z;
  return w;
}

// Root mean squared error over all grid cells and axes of two [h,w,3] fields.
inline double flow_rmse(const Tensor& a, const Tensor& b) {
  AF_CHECK(a.same_shape(b), "rmse shape mismatch " << a.shape_str() << " vs "
                                                   << b.shape_str());
  double acc = 0.0;
  for (size_t i = 0; i < a.numel(); ++i) {
    const double d = a[i] - b[i];
    acc += d * d;
  }
  return std::sqrt(acc / static_cast<double>(a.numel()));
}

// Confusion-matrix accumulator; rows are ground truth, columns predictions.
class Confusion {
 public:
  explicit Confusion(int num_classes) : counts_({num_classes, num_classes}) {}

  void add(int truth, int pred) {
    const int K = counts_.dim(0);
    AF_CHECK(truth >= 0 && truth < K && pred >= 0 && pred < K,
             "confusion entry (" << truth << "," << pred << ") out of range " << K);
    counts_[counts_.idx2(truth, pred)] += 1.0;
  }

  const Tensor& counts() const { return counts_; }
  int num_classes() const { return counts_.dim(0); }

  // Macro F1 over classes that appear in the ground truth. A supported class
  // that is never predicted contributes 0.
  double macro_f1() const {
    const int K = counts_.dim(0);
    double sum = 0.0;
    int present = 0;
    for (int k = 0; k < K; ++k) {
      double tp = counts_[counts_.idx2(k, k)];
      double support = 0.0, predicted = 0.0;
      for (int j = 0; j < K; ++j) {
        support += counts_[counts_.idx2(k, j)];
        predicted += counts_[counts_.idx2(j, k)];
      }
      if (support == 0.0) continue;
      ++present;
      const double denom = support + predicted;  // 2tp + fp + fn
      if (denom > 0.0) sum += 2.0 * tp / denom;
    }
    AF_CHECK(present > 0, "macro F1 undefined: no ground-truth entries");
    return sum / present;
  }

  // Mean over ground-truth classes of the per-class accuracy.
  double mean_per_class_accuracy() const {
    const int K = counts_.dim(0);
    double sum = 0.0;
    int present = 0;
    for (int k = 0; k < K; ++k) {
      double support = 0.0;
      for (int j = 0; j < K; ++j) support += counts_[counts_.idx2(k, j)];
      if (support == 0.0) continue;
      ++present;
      sum += counts_[counts_.idx2(k, k)] / support;
    }
    AF_CHECK(present > 0, "per-class accuracy undefined: no ground-truth entries");
    return sum / present;
  }

 private:
  Tensor counts_;
};

}  // namespace atomflow
