#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#ifdef _OPENMP
#include <omp.h>
#endif

#include "atomflow/common.hpp"
#include "atomflow/tensor.hpp"

namespace atomflow {

// Node id on a Graph. Ids are assigned in construction order, so they are a
// topological order of the computation: inputs always precede consumers.
using Var = int;

enum class Padding { kSame, kValid };

inline constexpr double kBatchNormEps = 1e-5;

inline int worker_threads() {
  int cap = env_thread_cap();
#ifdef _OPENMP
  int hw = omp_get_max_threads();
  return cap > 0 ? std::min(cap, hw) : hw;
#else
  (void)cap;
  return 1;
#endif
}

namespace conv_detail {

struct ConvDims {
  int N, H, W, Cin;        // full-resolution tensor
  int kh, kw, Cout;        // kernel spatial dims and low-res channels
  int stride;
  int pad_top, pad_left;
  int Ho, Wo;              // low-resolution tensor
};

// Dim bookkeeping shared by conv2d and conv2d_transpose. "Full" is the larger
// spatial tensor (conv input / transpose output), "low" the smaller one.
inline ConvDims make_dims(int N, int H, int W, int Cin, int kh, int kw, int Cout,
                          int stride, Padding pad) {
  AF_CHECK(stride >= 1, "stride must be >= 1, got " << stride);
  ConvDims d{N, H, W, Cin, kh, kw, Cout, stride, 0, 0, 0, 0};
  if (pad == Padding::kSame) {
    d.Ho = (H + stride - 1) / stride;
    d.Wo = (W + stride - 1) / stride;
    int pad_h = std::max((d.Ho - 1) * stride + kh - H, 0);
    int pad_w = std::max((d.Wo - 1) * stride + kw - W, 0);
    d.pad_top = pad_h / 2;
    d.pad_left = pad_w / 2;
  } else {
    AF_CHECK(kh <= H && kw <= W, "valid conv: kernel " << kh << "x" << kw
                                                       << " exceeds input " << H << "x"
                                                       << W);
    d.Ho = (H - kh) / stride + 1;
    d.Wo = (W - kw) / stride + 1;
  }
  return d;
}

// y[n,oh,ow,co] = sum_{u,v,ci} x[n, oh*s+u-pt, ow*s+v-pl, ci] * k[u,v,ci,co]
// Inner loop is an axpy over contiguous Cout, which the compiler vectorizes.
inline void conv2d_forward(const double* x, const double* k, double* y,
                           const ConvDims& d) {
  const long long rows = static_cast<long long>(d.N) * d.Ho;
#ifdef _OPENMP
#pragma omp parallel for schedule(static) num_threads(worker_threads())
#endif
  for (long long row = 0; row < rows; ++row) {
    const int n = static_cast<int>(row / d.Ho);
    const int oh = static_cast<int>(row % d.Ho);
    for (int ow = 0; ow < d.Wo; ++ow) {
      double* yrow = y + ((static_cast<size_t>(n) * d.Ho + oh) * d.Wo + ow) * d.Cout;
      for (int co = 0; co < d.Cout; ++co) yrow[co] = 0.0;
      for (int u = 0; u < d.kh; ++u) {
        const int ih = oh * d.stride + u - d.pad_top;
        if (ih < 0 || ih >= d.H) continue;
        for (int v = 0; v < d.kw; ++v) {
          const int iw = ow * d.stride + v - d.pad_left;
          if (iw < 0 || iw >= d.W) continue;
          const double* xrow =
              x + ((static_cast<size_t>(n) * d.H + ih) * d.W + iw) * d.Cin;
          const double* kbase =
              k + (static_cast<size_t>(u) * d.kw + v) * d.Cin * d.Cout;
          for (int ci = 0; ci < d.Cin; ++ci) {
            const double xv = xrow[ci];
            if (xv == 0.0) continue;
            const double* krow = kbase + static_cast<size_t>(ci) * d.Cout;
            for (int co = 0; co < d.Cout; ++co) yrow[co] += xv * krow[co];
          }
        }
      }
    }
  }
}

// dx[n,ih,iw,ci] += sum_{u,v,co} dy[n,oh,ow,co] * k[u,v,ci,co] over the output
// positions (oh,ow) that read (ih,iw). Gather form: each dx element is written
// by exactly one iteration, so parallel execution stays bit-deterministic.
inline void conv2d_bwd_input(const double* dy, const double* k, double* dx,
                             const ConvDims& d) {
  const long long rows = static_cast<long long>(d.N) * d.H;
#ifdef _OPENMP
#pragma omp parallel for schedule(static) num_threads(worker_threads())
#endif
  for (long long row = 0; row < rows; ++row) {
    const int n = static_cast<int>(row / d.H);
    const int ih = static_cast<int>(row % d.H);
    for (int iw = 0; iw < d.W; ++iw) {
      double* dxrow = dx + ((static_cast<size_t>(n) * d.H + ih) * d.W + iw) * d.Cin;
      for (int u = 0; u < d.kh; ++u) {
        const int oh_num = ih + d.pad_top - u;
        if (oh_num < 0 || oh_num % d.stride != 0) continue;
        const int oh = oh_num / d.stride;
        if (oh >= d.Ho) continue;
        for (int v = 0; v < d.kw; ++v) {
          const int ow_num = iw + d.pad_left - v;
          if (ow_num < 0 || ow_num % d.stride != 0) continue;
          const int ow = ow_num / d.stride;
          if (ow >= d.Wo) continue;
          const double* dyrow =
              dy + ((static_cast<size_t>(n) * d.Ho + oh) * d.Wo + ow) * d.Cout;
          const double* kbase =
              k + (static_cast<size_t>(u) * d.kw + v) * d.Cin * d.Cout;
          for (int ci = 0; ci < d.Cin; ++ci) {
            const double* krow = kbase + static_cast<size_t>(ci) * d.Cout;
            double acc = 0.0;
            for (int co = 0; co < d.Cout; ++co) acc += dyrow[co] * krow[co];
            dxrow[ci] += acc;
          }
        }
      }
    }
  }
}

// dk[u,v,ci,co] += sum_{n,oh,ow} x[n,ih,iw,ci] * dy[n,oh,ow,co]. Partitioned
// over kernel slices; each slice sums the batch in a fixed order.
inline void conv2d_bwd_kernel(const double* dy, const double* x, double* dk,
                              const ConvDims& d) {
  const long long slices = static_cast<long long>(d.kh) * d.kw * d.Cin;
#ifdef _OPENMP
#pragma omp parallel for schedule(static) num_threads(worker_threads())
#endif
  for (long long slice = 0; slice < slices; ++slice) {
    const int u = static_cast<int>(slice / (static_cast<long long>(d.kw) * d.Cin));
    const int rem = static_cast<int>(slice % (static_cast<long long>(d.kw) * d.Cin));
    const int v = rem / d.Cin;
    const int ci = rem % d.Cin;
    double* dkrow = dk + (static_cast<size_t>(slice)) * d.Cout;
    for (int n = 0; n < d.N; ++n) {
      for (int oh = 0; oh < d.Ho; ++oh) {
        const int ih = oh * d.stride + u - d.pad_top;
        if (ih < 0 || ih >= d.H) continue;
        for (int ow = 0; ow < d.Wo; ++ow) {
          const int iw = ow * d.stride + v - d.pad_left;
          if (iw < 0 || iw >= d.W) continue;
          const double xv = x[((static_cast<size_t>(n) * d.H + ih) * d.W + iw) * d.Cin + ci];
          if (xv == 0.0) continue;
          const double* dyrow =
              dy + ((static_cast<size_t>(n) * d.Ho + oh) * d.Wo + ow) * d.Cout;
          for (int co = 0; co < d.Cout; ++co) dkrow[co] += xv * dyrow[co];
        }
      }
    }
  }
}

}  // namespace conv_detail

inline double stable_sigmoid(double x) {
  if (x >= 0.0) {
    const double e = std::exp(-x);
    return 1.0 / (1.0 + e);
  }
  const double e = std::exp(x);
  return e / (1.0 + e);
}

// Define-by-run reverse-mode tape. Ops append nodes during the forward pass;
// backward() walks the node list once in reverse. One Graph per training step,
// single-threaded; op internals may parallelize over disjoint output ranges.
class Graph {
 public:
  explicit Graph(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}

  bool grad_enabled() const { return grad_enabled_; }
  int num_nodes() const { return static_cast<int>(nodes_.size()); }

  const Tensor& value(Var v) const { return nodes_[static_cast<size_t>(v)].value; }

  // Leaf without gradient (inputs, targets).
  Var constant(Tensor v) { return push(std::move(v), false, nullptr); }

  // Trainable leaf, memoized by name: reusing a name returns the same node so
  // that gradients from multiple uses accumulate in one place.
  Var param(const std::string& name, const Tensor& value) {
    auto it = params_.find(name);
    if (it != params_.end()) return it->second;
    Var v = push(value, grad_enabled_, nullptr);
    nodes_[static_cast<size_t>(v)].param_name = name;
    params_.emplace(name, v);
    return v;
  }

  bool has_param(const std::string& name) const { return params_.count(name) > 0; }

  // Gradient of a named leaf after backward(); zeros when the parameter was
  // never reached from the loss.
  Tensor param_grad(const std::string& name) const {
    auto it = params_.find(name);
    AF_CHECK(it != params_.end(), "unknown parameter " << name);
    const Node& n = nodes_[static_cast<size_t>(it->second)];
    if (n.grad.empty()) return Tensor(n.value.shape());
    return n.grad;
  }

  void backward(Var loss) {
    AF_CHECK(grad_enabled_, "backward() on a gradient-disabled graph");
    AF_CHECK(value(loss).numel() == 1,
             "backward() requires a scalar loss, got shape " << value(loss).shape_str());
    grad_buf(loss).fill(1.0);
    for (int i = loss; i >= 0; --i) {
      Node& n = nodes_[static_cast<size_t>(i)];
      if (!n.grad.empty() && n.backward_fn) n.backward_fn(*this);
    }
  }

  // ---- ops ----

  Var conv2d(Var x, Var k, int stride, Padding pad) {
    const Tensor& xv = value(x);
    const Tensor& kv = value(k);
    AF_CHECK(xv.ndim() == 4, "conv2d input must be rank 4, got " << xv.shape_str());
    AF_CHECK(kv.ndim() == 4, "conv2d kernel must be rank 4, got " << kv.shape_str());
    AF_CHECK(kv.dim(2) == xv.dim(3), "conv2d channel mismatch: input "
                                         << xv.shape_str() << " vs kernel "
                                         << kv.shape_str());
    auto d = conv_detail::make_dims(xv.dim(0), xv.dim(1), xv.dim(2), xv.dim(3),
                                    kv.dim(0), kv.dim(1), kv.dim(3), stride, pad);
    Tensor out({d.N, d.Ho, d.Wo, d.Cout});
    conv_detail::conv2d_forward(xv.data(), kv.data(), out.data(), d);
    return unary_or_binary(std::move(out), x, k, [x, k, d](Graph& g) {
      const Tensor& dy = g.grad_of(g.out_id_);
      if (g.wants_grad(x)) {
        conv_detail::conv2d_bwd_input(dy.data(), g.value(k).data(),
                                      g.grad_buf(x).data(), d);
      }
      if (g.wants_grad(k)) {
        conv_detail::conv2d_bwd_kernel(dy.data(), g.value(x).data(),
                                       g.grad_buf(k).data(), d);
      }
    });
  }

  // Fractionally-strided convolution: the adjoint of same-padded conv2d with
  // the same stride. kernel layout [kh, kw, Cout, Cin]; output spatial size is
  // input size * stride.
  Var conv2d_transpose(Var x, Var k, int stride) {
    const Tensor& xv = value(x);
    const Tensor& kv = value(k);
    AF_CHECK(xv.ndim() == 4, "conv2d_transpose input must be rank 4, got "
                                 << xv.shape_str());
    AF_CHECK(kv.ndim() == 4, "conv2d_transpose kernel must be rank 4, got "
                                 << kv.shape_str());
    AF_CHECK(kv.dim(3) == xv.dim(3), "conv2d_transpose channel mismatch: input "
                                         << xv.shape_str() << " vs kernel "
                                         << kv.shape_str());
    const int H = xv.dim(1) * stride;
    const int W = xv.dim(2) * stride;
    auto d = conv_detail::make_dims(xv.dim(0), H, W, kv.dim(2), kv.dim(0), kv.dim(1),
                                    xv.dim(3), stride, Padding::kSame);
    AF_CHECK(d.Ho == xv.dim(1) && d.Wo == xv.dim(2),
             "conv2d_transpose internal dim mismatch");
    Tensor out({d.N, H, W, d.Cin});
    conv_detail::conv2d_bwd_input(xv.data(), kv.data(), out.data(), d);
    return unary_or_binary(std::move(out), x, k, [x, k, d](Graph& g) {
      const Tensor& dy = g.grad_of(g.out_id_);
      if (g.wants_grad(x)) {
        conv_detail::conv2d_forward(dy.data(), g.value(k).data(),
                                    g.grad_buf(x).data(), d);
      }
      if (g.wants_grad(k)) {
        conv_detail::conv2d_bwd_kernel(g.value(x).data(), dy.data(),
                                       g.grad_buf(k).data(), d);
      }
    });
  }

  // y[..., c] = x[..., c] + b[c]
  Var bias_add(Var x, Var b) {
    const Tensor& xv = value(x);
    const Tensor& bv = value(b);
    const int C = xv.dim(xv.ndim() - 1);
    AF_CHECK(bv.ndim() == 1 && bv.dim(0) == C,
             "bias_add: bias " << bv.shape_str() << " vs channels " << C);
    Tensor out(xv.shape());
    const size_t rows = xv.numel() / static_cast<size_t>(C);
    for (size_t r = 0; r < rows; ++r) {
      const double* xp = xv.data() + r * C;
      double* op = out.data() + r * C;
      for (int c = 0; c < C; ++c) op[c] = xp[c] + bv[static_cast<size_t>(c)];
    }
    return unary_or_binary(std::move(out), x, b, [x, b, C, rows](Graph& g) {
      const Tensor& dy = g.grad_of(g.out_id_);
      if (g.wants_grad(x)) {
        Tensor& dx = g.grad_buf(x);
        for (size_t i = 0; i < dy.numel(); ++i) dx[i] += dy[i];
      }
      if (g.wants_grad(b)) {
        Tensor& db = g.grad_buf(b);
        for (size_t r = 0; r < rows; ++r) {
          const double* dp = dy.data() + r * C;
          for (int c = 0; c < C; ++c) db[static_cast<size_t>(c)] += dp[c];
        }
      }
    });
  }

  // Train-mode batch normalization over all axes but the last. Batch mean and
  // (biased) variance are returned through the out-pointers so the owning
  // layer can maintain running statistics; the op itself is a pure function of
  // its inputs.
  Var batch_norm_train(Var x, Var gamma, Var beta, Tensor* mean_out = nullptr,
                       Tensor* var_out = nullptr) {
    const Tensor& xv = value(x);
    const int C = xv.dim(xv.ndim() - 1);
    const size_t rows = xv.numel() / static_cast<size_t>(C);
    AF_CHECK(rows >= 2, "batch_norm train mode needs at least 2 samples per channel, got "
                            << rows);
    check_affine_params(gamma, beta, C);
    Tensor mean({C}), var({C});
    for (size_t r = 0; r < rows; ++r) {
      const double* xp = xv.data() + r * C;
      for (int c = 0; c < C; ++c) mean[static_cast<size_t>(c)] += xp[c];
    }
    for (int c = 0; c < C; ++c) mean[static_cast<size_t>(c)] /= static_cast<double>(rows);
    for (size_t r = 0; r < rows; ++r) {
      const double* xp = xv.data() + r * C;
      for (int c = 0; c < C; ++c) {
        const double dlt = xp[c] - mean[static_cast<size_t>(c)];
        var[static_cast<size_t>(c)] += dlt * dlt;
      }
    }
    for (int c = 0; c < C; ++c) var[static_cast<size_t>(c)] /= static_cast<double>(rows);
    if (mean_out) *mean_out = mean;
    if (var_out) *var_out = var;
    return batch_norm_impl(x, gamma, beta, mean, var, /*stats_from_batch=*/true);
  }

  // Eval-mode batch normalization with externally stored statistics.
  Var batch_norm_eval(Var x, Var gamma, Var beta, const Tensor& mean,
                      const Tensor& var) {
    const Tensor& xv = value(x);
    const int C = xv.dim(xv.ndim() - 1);
    check_affine_params(gamma, beta, C);
    AF_CHECK(mean.ndim() == 1 && mean.dim(0) == C && var.same_shape(mean),
             "batch_norm_eval: running stats shape mismatch");
    return batch_norm_impl(x, gamma, beta, mean, var, /*stats_from_batch=*/false);
  }

  Var sigmoid(Var x) {
    return elementwise(
        x, [](double v) { return stable_sigmoid(v); },
        [](double y, double) { return y * (1.0 - y); });
  }

  Var tanh(Var x) {
    return elementwise(
        x, [](double v) { return std::tanh(v); },
        [](double y, double) { return 1.0 - y * y; });
  }

  Var relu(Var x) {
    return elementwise(
        x, [](double v) { return v > 0.0 ? v : 0.0; },
        [](double, double xin) { return xin > 0.0 ? 1.0 : 0.0; });
  }

  Var add(Var a, Var b) {
    const Tensor& av = value(a);
    const Tensor& bv = value(b);
    AF_CHECK(av.same_shape(bv), "add shape mismatch " << av.shape_str() << " vs "
                                                      << bv.shape_str());
    Tensor out(av.shape());
    for (size_t i = 0; i < out.numel(); ++i) out[i] = av[i] + bv[i];
    return unary_or_binary(std::move(out), a, b, [a, b](Graph& g) {
      const Tensor& dy = g.grad_of(g.out_id_);
      if (g.wants_grad(a)) {
        Tensor& da = g.grad_buf(a);
        for (size_t i = 0; i < dy.numel(); ++i) da[i] += dy[i];
      }
      if (g.wants_grad(b)) {
        Tensor& db = g.grad_buf(b);
        for (size_t i = 0; i < dy.numel(); ++i) db[i] += dy[i];
      }
    });
  }

  Var mul(Var a, Var b) {
    const Tensor& av = value(a);
    const Tensor& bv = value(b);
    AF_CHECK(av.same_shape(bv), "mul shape mismatch " << av.shape_str() << " vs "
                                                      << bv.shape_str());
    Tensor out(av.shape());
    for (size_t i = 0; i < out.numel(); ++i) out[i] = av[i] * bv[i];
    return unary_or_binary(std::move(out), a, b, [a, b](Graph& g) {
      const Tensor& dy = g.grad_of(g.out_id_);
      if (g.wants_grad(a)) {
        Tensor& da = g.grad_buf(a);
        const Tensor& bv2 = g.value(b);
        for (size_t i = 0; i < dy.numel(); ++i) da[i] += dy[i] * bv2[i];
      }
      if (g.wants_grad(b)) {
        Tensor& db = g.grad_buf(b);
        const Tensor& av2 = g.value(a);
        for (size_t i = 0; i < dy.numel(); ++i) db[i] += dy[i] * av2[i];
      }
    });
  }

  Var scale(Var x, double c) {
    const Tensor& xv = value(x);
    Tensor out(xv.shape());
    for (size_t i = 0; i < out.numel(); ++i) out[i] = xv[i] * c;
    return unary(std::move(out), x, [x, c](Graph& g) {
      const Tensor& dy = g.grad_of(g.out_id_);
      Tensor& dx = g.grad_buf(x);
      for (size_t i = 0; i < dy.numel(); ++i) dx[i] += dy[i] * c;
    });
  }

  Var sum_all(Var x) {
    const Tensor& xv = value(x);
    double s = 0.0;
    for (size_t i = 0; i < xv.numel(); ++i) s += xv[i];
    return unary(Tensor::scalar(s), x, [x](Graph& g) {
      const double go = g.grad_of(g.out_id_)[0];
      Tensor& dx = g.grad_buf(x);
      for (size_t i = 0; i < dx.numel(); ++i) dx[i] += go;
    });
  }

  Var softmax_last(Var x) {
    const Tensor& xv = value(x);
    const int C = xv.dim(xv.ndim() - 1);
    const size_t rows = xv.numel() / static_cast<size_t>(C);
    Tensor out(xv.shape());
    for (size_t r = 0; r < rows; ++r) {
      const double* xp = xv.data() + r * C;
      double* op = out.data() + r * C;
      double mx = xp[0];
      for (int c = 1; c < C; ++c) mx = std::max(mx, xp[c]);
      double sum = 0.0;
      for (int c = 0; c < C; ++c) {
        op[c] = std::exp(xp[c] - mx);
        sum += op[c];
      }
      for (int c = 0; c < C; ++c) op[c] /= sum;
    }
    return unary(std::move(out), x, [x, C, rows](Graph& g) {
      const Tensor& dy = g.grad_of(g.out_id_);
      const Tensor& y = g.value(g.out_id_);
      Tensor& dx = g.grad_buf(x);
      for (size_t r = 0; r < rows; ++r) {
        const double* yp = y.data() + r * C;
        const double* dp = dy.data() + r * C;
        double inner = 0.0;
        for (int c = 0; c < C; ++c) inner += dp[c] * yp[c];
        double* dxp = dx.data() + r * C;
        for (int c = 0; c < C; ++c) dxp[c] += yp[c] * (dp[c] - inner);
      }
    });
  }

  Var reshape(Var x, std::vector<int> shape) {
    Tensor out = value(x).reshaped(std::move(shape));
    return unary(std::move(out), x, [x](Graph& g) {
      const Tensor& dy = g.grad_of(g.out_id_);
      Tensor& dx = g.grad_buf(x);
      for (size_t i = 0; i < dy.numel(); ++i) dx[i] += dy[i];
    });
  }

  // Slice along the last axis: out[..., 0:len] = x[..., begin:begin+len].
  Var slice_last(Var x, int begin, int len) {
    const Tensor& xv = value(x);
    const int C = xv.dim(xv.ndim() - 1);
    AF_CHECK(begin >= 0 && len >= 1 && begin + len <= C,
             "slice_last [" << begin << "," << begin + len << ") out of channel range "
                            << C);
    std::vector<int> shp = xv.shape();
    shp.back() = len;
    Tensor out(shp);
    const size_t rows = xv.numel() / static_cast<size_t>(C);
    for (size_t r = 0; r < rows; ++r) {
      const double* xp = xv.data() + r * C + begin;
      double* op = out.data() + r * len;
      for (int c = 0; c < len; ++c) op[c] = xp[c];
    }
    return unary(std::move(out), x, [x, begin, len, C, rows](Graph& g) {
      const Tensor& dy = g.grad_of(g.out_id_);
      Tensor& dx = g.grad_buf(x);
      for (size_t r = 0; r < rows; ++r) {
        const double* dp = dy.data() + r * len;
        double* dxp = dx.data() + r * C + begin;
        for (int c = 0; c < len; ++c) dxp[c] += dp[c];
      }
    });
  }

  // [N,F] x [F,C] -> [N,C]
  Var matmul(Var x, Var w) {
    const Tensor& xv = value(x);
    const Tensor& wv = value(w);
    AF_CHECK(xv.ndim() == 2 && wv.ndim() == 2 && xv.dim(1) == wv.dim(0),
             "matmul shape mismatch " << xv.shape_str() << " x " << wv.shape_str());
    const int N = xv.dim(0), F = xv.dim(1), C = wv.dim(1);
    Tensor out({N, C});
    for (int n = 0; n < N; ++n) {
      const double* xp = xv.data() + static_cast<size_t>(n) * F;
      double* op = out.data() + static_cast<size_t>(n) * C;
      for (int f = 0; f < F; ++f) {
        const double xvf = xp[f];
        if (xvf == 0.0) continue;
        const double* wp = wv.data() + static_cast<size_t>(f) * C;
        for (int c = 0; c < C; ++c) op[c] += xvf * wp[c];
      }
    }
    return unary_or_binary(std::move(out), x, w, [x, w, N, F, C](Graph& g) {
      const Tensor& dy = g.grad_of(g.out_id_);
      if (g.wants_grad(x)) {
        Tensor& dx = g.grad_buf(x);
        const Tensor& wv2 = g.value(w);
        for (int n = 0; n < N; ++n) {
          const double* dp = dy.data() + static_cast<size_t>(n) * C;
          double* dxp = dx.data() + static_cast<size_t>(n) * F;
          for (int f = 0; f < F; ++f) {
            const double* wp = wv2.data() + static_cast<size_t>(f) * C;
            double acc = 0.0;
            for (int c = 0; c < C; ++c) acc += dp[c] * wp[c];
            dxp[f] += acc;
          }
        }
      }
      if (g.wants_grad(w)) {
        Tensor& dw = g.grad_buf(w);
        const Tensor& xv2 = g.value(x);
        for (int n = 0; n < N; ++n) {
          const double* xp = xv2.data() + static_cast<size_t>(n) * F;
          const double* dp = dy.data() + static_cast<size_t>(n) * C;
          for (int f = 0; f < F; ++f) {
            const double xvf = xp[f];
            if (xvf == 0.0) continue;
            double* dwp = dw.data() + static_cast<size_t>(f) * C;
            for (int c = 0; c < C; ++c) dwp[c] += xvf * dp[c];
          }
        }
      }
    });
  }

  // Class-weighted cross entropy against a fixed target distribution grid.
  // logits and z_true share shape [..., K]; class_w is [K]. Softmax is applied
  // internally with log-sum-exp stabilization; the result is the weighted
  // triple sum divided by the number of grid cells (mean over patches).
  Var weighted_ce_logits(Var logits, const Tensor& z_true, const Tensor& class_w) {
    const Tensor& lv = value(logits);
    AF_CHECK(lv.same_shape(z_true), "weighted_ce: logits " << lv.shape_str()
                                                           << " vs targets "
                                                           << z_true.shape_str());
    const int K = lv.dim(lv.ndim() - 1);
    AF_CHECK(class_w.ndim() == 1 && class_w.dim(0) == K,
             "weighted_ce: class weights " << class_w.shape_str() << " vs K = " << K);
    const size_t rows = lv.numel() / static_cast<size_t>(K);
    Tensor probs(lv.shape());
    Tensor row_mass({static_cast<int>(rows)});  // sum_k w_k z_k per cell
    double loss = 0.0;
    for (size_t r = 0; r < rows; ++r) {
      const double* lp = lv.data() + r * K;
      const double* zp = z_true.data() + r * K;
      double* pp = probs.data() + r * K;
      double mx = lp[0];
      for (int c = 1; c < K; ++c) mx = std::max(mx, lp[c]);
      double sum = 0.0;
      for (int c = 0; c < K; ++c) {
        pp[c] = std::exp(lp[c] - mx);
        sum += pp[c];
      }
      const double lse = mx + std::log(sum);
      double mass = 0.0;
      for (int c = 0; c < K; ++c) {
        pp[c] /= sum;
        const double wz = class_w[static_cast<size_t>(c)] * zp[c];
        if (wz != 0.0) {
          loss += wz * (lse - lp[c]);
          mass += wz;
        }
      }
      row_mass[r] = mass;
    }
    const double inv_rows = 1.0 / static_cast<double>(rows);
    Tensor out = Tensor::scalar(loss * inv_rows);
    Tensor wz_target(z_true.shape());
    for (size_t r = 0; r < rows; ++r) {
      const double* zp = z_true.data() + r * K;
      double* wp = wz_target.data() + r * K;
      for (int c = 0; c < K; ++c) wp[c] = class_w[static_cast<size_t>(c)] * zp[c];
    }
    return unary(std::move(out), logits,
                 [logits, probs = std::move(probs), wz = std::move(wz_target),
                  row_mass = std::move(row_mass), K, rows, inv_rows](Graph& g) {
                   const double go = g.grad_of(g.out_id_)[0] * inv_rows;
                   Tensor& dl = g.grad_buf(logits);
                   for (size_t r = 0; r < rows; ++r) {
                     const double mass = row_mass[r];
                     const double* pp = probs.data() + r * K;
                     const double* wp = wz.data() + r * K;
                     double* dp = dl.data() + r * K;
                     for (int c = 0; c < K; ++c) dp[c] += go * (pp[c] * mass - wp[c]);
                   }
                 });
  }

  // Mean cross entropy with integer labels, for the classification head.
  Var softmax_ce_labels(Var logits, const std::vector<int>& labels) {
    const Tensor& lv = value(logits);
    AF_CHECK(lv.ndim() == 2, "softmax_ce_labels expects [N,C], got " << lv.shape_str());
    const int N = lv.dim(0), C = lv.dim(1);
    AF_CHECK(static_cast<int>(labels.size()) == N, "label count mismatch");
    Tensor probs({N, C});
    double loss = 0.0;
    for (int n = 0; n < N; ++n) {
      AF_CHECK(labels[static_cast<size_t>(n)] >= 0 && labels[static_cast<size_t>(n)] < C,
               "label out of range");
      const double* lp = lv.data() + static_cast<size_t>(n) * C;
      double* pp = probs.data() + static_cast<size_t>(n) * C;
      double mx = lp[0];
      for (int c = 1; c < C; ++c) mx = std::max(mx, lp[c]);
      double sum = 0.0;
      for (int c = 0; c < C; ++c) {
        pp[c] = std::exp(lp[c] - mx);
        sum += pp[c];
      }
      for (int c = 0; c < C; ++c) pp[c] /= sum;
      loss += mx + std::log(sum) - lp[labels[static_cast<size_t>(n)]];
    }
    Tensor out = Tensor::scalar(loss / N);
    return unary(std::move(out), logits,
                 [logits, probs = std::move(probs), labels, N, C](Graph& g) {
                   const double go = g.grad_of(g.out_id_)[0] / N;
                   Tensor& dl = g.grad_buf(logits);
                   for (int n = 0; n < N; ++n) {
                     const double* pp = probs.data() + static_cast<size_t>(n) * C;
                     double* dp = dl.data() + static_cast<size_t>(n) * C;
                     for (int c = 0; c < C; ++c) {
                       dp[c] += go * (pp[c] - (c == labels[static_cast<size_t>(n)] ? 1.0 : 0.0));
                     }
                   }
                 });
  }

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    bool requires_grad = false;
    std::function<void(Graph&)> backward_fn;
    std::string param_name;
  };

  friend struct GraphBackdoor;  // test-only access

  Var push(Tensor value, bool requires_grad, std::function<void(Graph&)> fn) {
    nodes_.push_back(Node{std::move(value), Tensor(), requires_grad && grad_enabled_,
                          std::move(fn), {}});
    return static_cast<Var>(nodes_.size() - 1);
  }

  bool wants_grad(Var v) const { return nodes_[static_cast<size_t>(v)].requires_grad; }

  Tensor& grad_buf(Var v) {
    Node& n = nodes_[static_cast<size_t>(v)];
    if (n.grad.empty()) n.grad = Tensor(n.value.shape());
    return n.grad;
  }

  const Tensor& grad_of(Var v) const { return nodes_[static_cast<size_t>(v)].grad; }

  // During a node's backward call, out_id_ is that node's own id; backward
  // lambdas use it to read their output value/gradient.
  Var out_id_ = -1;

  Var finish(Tensor out, bool req, std::function<void(Graph&)> fn) {
    if (!req || !grad_enabled_) return push(std::move(out), false, nullptr);
    Var id = push(std::move(out), true, nullptr);
    nodes_[static_cast<size_t>(id)].backward_fn = [id, inner = std::move(fn)](Graph& g) {
      g.out_id_ = id;
      inner(g);
    };
    return id;
  }

  Var unary(Tensor out, Var x, std::function<void(Graph&)> fn) {
    return finish(std::move(out), wants_grad(x), std::move(fn));
  }

  Var unary_or_binary(Tensor out, Var a, Var b, std::function<void(Graph&)> fn) {
    return finish(std::move(out), wants_grad(a) || wants_grad(b), std::move(fn));
  }

  template <typename FwdFn, typename DerivFn>
  Var elementwise(Var x, FwdFn fwd, DerivFn deriv) {
    const Tensor& xv = value(x);
    Tensor out(xv.shape());
    for (size_t i = 0; i < out.numel(); ++i) out[i] = fwd(xv[i]);
    return unary(std::move(out), x, [x, deriv](Graph& g) {
      const Tensor& dy = g.grad_of(g.out_id_);
      const Tensor& y = g.value(g.out_id_);
      const Tensor& xin = g.value(x);
      Tensor& dx = g.grad_buf(x);
      for (size_t i = 0; i < dy.numel(); ++i) dx[i] += dy[i] * deriv(y[i], xin[i]);
    });
  }

  void check_affine_params(Var gamma, Var beta, int C) const {
    const Tensor& gv = value(gamma);
    const Tensor& bv = value(beta);
    AF_CHECK(gv.ndim() == 1 && gv.dim(0) == C && bv.same_shape(gv),
             "batch_norm affine params must be [" << C << "]");
  }

  Var batch_norm_impl(Var x, Var gamma, Var beta, const Tensor& mean, const Tensor& var,
                      bool stats_from_batch) {
    const Tensor& xv = value(x);
    const int C = xv.dim(xv.ndim() - 1);
    const size_t rows = xv.numel() / static_cast<size_t>(C);
    Tensor inv_std({C});
    for (int c = 0; c < C; ++c) {
      inv_std[static_cast<size_t>(c)] =
          1.0 / std::sqrt(var[static_cast<size_t>(c)] + kBatchNormEps);
    }
    Tensor xhat(xv.shape());
    Tensor out(xv.shape());
    const Tensor& gv = value(gamma);
    const Tensor& bv = value(beta);
    for (size_t r = 0; r < rows; ++r) {
      const double* xp = xv.data() + r * C;
      double* hp = xhat.data() + r * C;
      double* op = out.data() + r * C;
      for (int c = 0; c < C; ++c) {
        const size_t cc = static_cast<size_t>(c);
        hp[c] = (xp[c] - mean[cc]) * inv_std[cc];
        op[c] = gv[cc] * hp[c] + bv[cc];
      }
    }
    bool req = wants_grad(x) || wants_grad(gamma) || wants_grad(beta);
    return finish(
        std::move(out), req,
        [x, gamma, beta, xhat = std::move(xhat), inv_std = std::move(inv_std), C, rows,
         stats_from_batch](Graph& g) {
          const Tensor& dy = g.grad_of(g.out_id_);
          // Per-channel reductions of dy and dy*xhat.
          Tensor sum_dy({C}), sum_dy_xhat({C});
          for (size_t r = 0; r < rows; ++r) {
            const double* dp = dy.data() + r * C;
            const double* hp = xhat.data() + r * C;
            for (int c = 0; c < C; ++c) {
              sum_dy[static_cast<size_t>(c)] += dp[c];
              sum_dy_xhat[static_cast<size_t>(c)] += dp[c] * hp[c];
            }
          }
          if (g.wants_grad(beta)) {
            Tensor& db = g.grad_buf(beta);
            for (int c = 0; c < C; ++c) db[static_cast<size_t>(c)] += sum_dy[static_cast<size_t>(c)];
          }
          if (g.wants_grad(gamma)) {
            Tensor& dg = g.grad_buf(gamma);
            for (int c = 0; c < C; ++c) {
              dg[static_cast<size_t>(c)] += sum_dy_xhat[static_cast<size_t>(c)];
            }
          }
          if (g.wants_grad(x)) {
            Tensor& dx = g.grad_buf(x);
            const Tensor& gv2 = g.value(gamma);
            const double inv_m = 1.0 / static_cast<double>(rows);
            for (size_t r = 0; r < rows; ++r) {
              const double* dp = dy.data() + r * C;
              const double* hp = xhat.data() + r * C;
              double* dxp = dx.data() + r * C;
              for (int c = 0; c < C; ++c) {
                const size_t cc = static_cast<size_t>(c);
                const double gs = gv2[cc] * inv_std[cc];
                if (stats_from_batch) {
                  dxp[c] += gs * (dp[c] - sum_dy[cc] * inv_m - hp[c] * sum_dy_xhat[cc] * inv_m);
                } else {
                  dxp[c] += gs * dp[c];
                }
              }
            }
          }
        });
  }

  bool grad_enabled_;
  std::vector<Node> nodes_;
  std::unordered_map<std::string, Var> params_;
};

}  // namespace atomflow
