#include "dcp/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

namespace dcp {
namespace {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatMap = Eigen::Map<RowMat<T>>;
template <typename T>
using ConstMatMap = Eigen::Map<const RowMat<T>>;

template <typename T>
using ImplPtr = std::shared_ptr<TensorImpl<T>>;

template <typename T>
void check_finite([[maybe_unused]] const char* op, [[maybe_unused]] const std::vector<T>& values) {
#ifndef NDEBUG
  if (!all_finite<T>(values)) throw NumericError(std::string(op) + ": produced a non-finite value");
#endif
}

template <typename T>
bool needs_graph(std::initializer_list<const BasicTensor<T>*> inputs) {
  if (!grad_mode_enabled()) return false;
  for (const auto* t : inputs)
    if (t->requires_grad()) return true;
  return false;
}

/// Wraps forward output; records a node only when some input needs a gradient.
template <typename T, typename Backward>
BasicTensor<T> emit(OpKind kind, Shape shape, std::vector<T> values,
                    std::initializer_list<const BasicTensor<T>*> inputs, Backward&& bw) {
  check_finite(op_name(kind), values);
  BasicTensor<T> out(std::move(shape), std::move(values));
  if (needs_graph<T>(inputs)) {
    auto node = std::make_shared<OpNode<T>>();
    node->kind = kind;
    for (const auto* t : inputs) node->inputs.push_back(t->impl());
    node->backward = std::forward<Backward>(bw);
    out.impl()->requires_grad = true;
    out.impl()->grad_fn = std::move(node);
  }
  return out;
}

void require_rank(const char* op, const Shape& s, std::size_t rank) {
  if (s.size() != rank)
    throw DimensionError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got shape " +
                         shape_str(s));
}

struct ConvGeometry {
  std::size_t batch, cin, h, w, cout, k, ho, wo;
  int stride, pad;
  std::size_t patch() const { return cin * k * k; }
  std::size_t pixels() const { return ho * wo; }
};

// Output columns [lo, hi) whose input column ox*stride - pad + k lies inside [0, n).
inline std::pair<std::size_t, std::size_t> valid_range(std::size_t n, std::size_t out, int stride, int pad, std::size_t k) {
  const long off = static_cast<long>(k) - pad;
  long lo = off >= 0 ? 0 : (-off + stride - 1) / stride;
  long hi = static_cast<long>(n) - 1 - off < 0 ? 0 : (static_cast<long>(n) - 1 - off) / stride + 1;
  hi = std::min<long>(hi, static_cast<long>(out));
  lo = std::min(lo, hi);
  return {static_cast<std::size_t>(lo), static_cast<std::size_t>(hi)};
}

// One sample's patches: col is [Cin*K*K, Ho*Wo], row-major.
template <typename T>
void im2col(const ConvGeometry& g, const T* x, T* col) {
  const std::size_t cols = g.pixels();
  const auto s = static_cast<std::size_t>(g.stride);
  for (std::size_t c = 0; c < g.cin; ++c) {
    const T* plane = x + c * g.h * g.w;
    for (std::size_t ky = 0; ky < g.k; ++ky) {
      const auto [ylo, yhi] = valid_range(g.h, g.ho, g.stride, g.pad, ky);
      for (std::size_t kx = 0; kx < g.k; ++kx) {
        const auto [xlo, xhi] = valid_range(g.w, g.wo, g.stride, g.pad, kx);
        const long xoff = static_cast<long>(kx) - g.pad;
        T* row = col + ((c * g.k + ky) * g.k + kx) * cols;
        for (std::size_t oy = 0; oy < g.ho; ++oy) {
          T* d = row + oy * g.wo;
          if (oy < ylo || oy >= yhi) {
            std::fill_n(d, g.wo, T(0));
            continue;
          }
          const T* src = plane + (oy * s + ky - static_cast<std::size_t>(g.pad)) * g.w;
          std::fill_n(d, xlo, T(0));
          if (s == 1) {
            std::copy_n(src + static_cast<long>(xlo) + xoff, xhi - xlo, d + xlo);
          } else {
            for (std::size_t ox = xlo; ox < xhi; ++ox) d[ox] = src[static_cast<long>(ox * s) + xoff];
          }
          std::fill_n(d + xhi, g.wo - xhi, T(0));
        }
      }
    }
  }
}

template <typename T>
void col2im(const ConvGeometry& g, const T* col, T* dx) {
  const std::size_t cols = g.pixels();
  const auto s = static_cast<std::size_t>(g.stride);
  for (std::size_t c = 0; c < g.cin; ++c) {
    T* plane = dx + c * g.h * g.w;
    for (std::size_t ky = 0; ky < g.k; ++ky) {
      const auto [ylo, yhi] = valid_range(g.h, g.ho, g.stride, g.pad, ky);
      for (std::size_t kx = 0; kx < g.k; ++kx) {
        const auto [xlo, xhi] = valid_range(g.w, g.wo, g.stride, g.pad, kx);
        const long xoff = static_cast<long>(kx) - g.pad;
        const T* row = col + ((c * g.k + ky) * g.k + kx) * cols;
        for (std::size_t oy = ylo; oy < yhi; ++oy) {
          T* dst = plane + (oy * s + ky - static_cast<std::size_t>(g.pad)) * g.w;
          const T* sr = row + oy * g.wo;
          for (std::size_t ox = xlo; ox < xhi; ++ox) dst[static_cast<long>(ox * s) + xoff] += sr[ox];
        }
      }
    }
  }
}

}  // namespace

// Lowered per sample: the patch matrix stays cache-sized and each sample's
// product lands directly in the [Cout, Ho*Wo] output slab.
template <typename T>
BasicTensor<T> conv2d(const BasicTensor<T>& x, const BasicTensor<T>& w, int stride, int pad) {
  require_rank("conv2d(x)", x.shape(), 4);
  require_rank("conv2d(w)", w.shape(), 4);
  if (stride < 1 || pad < 0) throw DimensionError("conv2d: stride must be >= 1 and pad >= 0");
  if (x.dim(1) != w.dim(1))
    throw DimensionError("conv2d: input channels (x axis 1 = " + std::to_string(x.dim(1)) +
                         ") != kernel input channels (w axis 1 = " + std::to_string(w.dim(1)) + ")");
  if (w.dim(2) != w.dim(3)) throw DimensionError("conv2d: kernel must be square (w axes 2,3)");
  ConvGeometry g{x.dim(0), x.dim(1), x.dim(2), x.dim(3), w.dim(0), w.dim(2), 0, 0, stride, pad};
  const long span_h = static_cast<long>(g.h) + 2 * pad - static_cast<long>(g.k);
  const long span_w = static_cast<long>(g.w) + 2 * pad - static_cast<long>(g.k);
  if (span_h < 0 || span_w < 0)
    throw DimensionError("conv2d: spatial axes 2,3 of x " + shape_str(x.shape()) +
                         " incompatible with kernel " + std::to_string(g.k) + ", stride " +
                         std::to_string(stride) + ", pad " + std::to_string(pad));
  g.ho = static_cast<std::size_t>(span_h / stride + 1);
  g.wo = static_cast<std::size_t>(span_w / stride + 1);

  const std::size_t in_size = g.cin * g.h * g.w, out_size = g.cout * g.pixels();
  std::vector<T> col(g.patch() * g.pixels());
  std::vector<T> out(g.batch * out_size);
  const ConstMatMap<T> wm(w.data().data(), g.cout, g.patch());
  for (std::size_t b = 0; b < g.batch; ++b) {
    im2col(g, x.data().data() + b * in_size, col.data());
    MatMap<T>(out.data() + b * out_size, g.cout, g.pixels()).noalias() =
        wm * ConstMatMap<T>(col.data(), g.patch(), g.pixels());
  }

  ImplPtr<T> xi = x.impl(), wi = w.impl();
  return emit<T>(OpKind::kConv2d, {g.batch, g.cout, g.ho, g.wo}, std::move(out), {&x, &w},
                 [g, xi, wi](std::span<const T> gout) {
                   const std::size_t in_size = g.cin * g.h * g.w, out_size = g.cout * g.pixels();
                   std::vector<T> col(g.patch() * g.pixels());
                   const ConstMatMap<T> wm(wi->data.data(), g.cout, g.patch());
                   T* dw = wi->requires_grad ? wi->ensure_grad().data() : nullptr;
                   T* dx = xi->requires_grad ? xi->ensure_grad().data() : nullptr;
                   for (std::size_t b = 0; b < g.batch; ++b) {
                     const ConstMatMap<T> dy(gout.data() + b * out_size, g.cout, g.pixels());
                     if (dw) {
                       im2col(g, xi->data.data() + b * in_size, col.data());
                       MatMap<T>(dw, g.cout, g.patch()).noalias() +=
                           dy * ConstMatMap<T>(col.data(), g.patch(), g.pixels()).transpose();
                     }
                     if (dx) {
                       MatMap<T>(col.data(), g.patch(), g.pixels()).noalias() = wm.transpose() * dy;
                       col2im(g, col.data(), dx + b * in_size);
                     }
                   }
                 });
}

namespace {

// Fixed-order reductions in double with eight independent lanes, so the loops
// vectorize without depending on the compiler reassociating anything.
constexpr std::size_t kLanes = 8;

template <typename T, typename F>
double lane_reduce(std::size_t n, F&& term) {
  double acc[kLanes] = {};
  std::size_t i = 0;
  for (; i + kLanes <= n; i += kLanes)
    for (std::size_t j = 0; j < kLanes; ++j) acc[j] += term(i + j);
  for (; i < n; ++i) acc[i % kLanes] += term(i);
  double s = 0;
  for (double a : acc) s += a;
  return s;
}

}  // namespace

template <typename T>
BasicTensor<T> batchnorm(const BasicTensor<T>& x, const BasicTensor<T>& gamma, const BasicTensor<T>& beta,
                         BatchNormStats<T>& stats, Mode mode) {
  require_rank("batchnorm(x)", x.shape(), 4);
  const std::size_t batch = x.dim(0), channels = x.dim(1), plane = x.dim(2) * x.dim(3);
  if (gamma.numel() != channels || beta.numel() != channels || stats.running_mean.size() != channels ||
      stats.running_var.size() != channels)
    throw DimensionError("batchnorm: parameter length != channel axis 1 of x " + shape_str(x.shape()));
  const std::size_t count = batch * plane;
  if (mode == Mode::kTrain && count < 2)
    throw DimensionError("batchnorm: train mode needs B*H*W >= 2, got " + std::to_string(count));

  std::vector<T> xhat(x.numel());
  std::vector<T> invstd(channels);
  std::vector<T> out(x.numel());
  const T* xd = x.data().data();
  const auto gd = gamma.data();
  const auto bd = beta.data();

  for (std::size_t c = 0; c < channels; ++c) {
    T mean, var;
    if (mode == Mode::kTrain) {
      double s = 0;
      for (std::size_t b = 0; b < batch; ++b) {
        const T* p = xd + (b * channels + c) * plane;
        s += lane_reduce<T>(plane, [p](std::size_t i) { return static_cast<double>(p[i]); });
      }
      const double m = s / static_cast<double>(count);
      double ss = 0;
      for (std::size_t b = 0; b < batch; ++b) {
        const T* p = xd + (b * channels + c) * plane;
        ss += lane_reduce<T>(plane, [p, m](std::size_t i) {
          const double d = static_cast<double>(p[i]) - m;
          return d * d;
        });
      }
      const double v = ss / static_cast<double>(count);
      mean = static_cast<T>(m);
      var = static_cast<T>(v);
      const double unbiased = ss / static_cast<double>(count - 1);
      stats.running_mean[c] = static_cast<T>((1.0 - kBatchNormMomentum) * stats.running_mean[c] + kBatchNormMomentum * m);
      stats.running_var[c] =
          static_cast<T>((1.0 - kBatchNormMomentum) * stats.running_var[c] + kBatchNormMomentum * unbiased);
    } else {
      mean = stats.running_mean[c];
      var = stats.running_var[c];
    }
    const T is = static_cast<T>(1.0 / std::sqrt(static_cast<double>(var) + kBatchNormEps));
    invstd[c] = is;
    const T gc = gd[c], bc = bd[c];
    for (std::size_t b = 0; b < batch; ++b) {
      const std::size_t base = (b * channels + c) * plane;
      const T* p = xd + base;
      T* xh = xhat.data() + base;
      T* o = out.data() + base;
      for (std::size_t i = 0; i < plane; ++i) {
        xh[i] = (p[i] - mean) * is;
        o[i] = gc * xh[i] + bc;
      }
    }
  }

  ImplPtr<T> xi = x.impl(), gi = gamma.impl(), bi = beta.impl();
  return emit<T>(
      OpKind::kBatchNorm, x.shape(), std::move(out), {&x, &gamma, &beta},
      [=, xhat = std::move(xhat), invstd = std::move(invstd)](std::span<const T> gout) {
        const T inv_count = T(1) / static_cast<T>(count);
        for (std::size_t c = 0; c < channels; ++c) {
          double dsum = 0, dxsum = 0;
          for (std::size_t b = 0; b < batch; ++b) {
            const std::size_t base = (b * channels + c) * plane;
            const T* go = gout.data() + base;
            const T* xh = xhat.data() + base;
            dsum += lane_reduce<T>(plane, [go](std::size_t i) { return static_cast<double>(go[i]); });
            dxsum += lane_reduce<T>(plane, [go, xh](std::size_t i) { return static_cast<double>(go[i]) * xh[i]; });
          }
          const T sum_dy = static_cast<T>(dsum), sum_dy_xhat = static_cast<T>(dxsum);
          if (gi->requires_grad) gi->ensure_grad()[c] += sum_dy_xhat;
          if (bi->requires_grad) bi->ensure_grad()[c] += sum_dy;
          if (!xi->requires_grad) continue;
          T* dx = xi->ensure_grad().data();
          const T k = gi->data[c] * invstd[c];
          for (std::size_t b = 0; b < batch; ++b) {
            const std::size_t base = (b * channels + c) * plane;
            const T* go = gout.data() + base;
            const T* xh = xhat.data() + base;
            T* d = dx + base;
            if (mode == Mode::kTrain) {
              const T mean_dy = inv_count * sum_dy, mean_dyx = inv_count * sum_dy_xhat;
              for (std::size_t i = 0; i < plane; ++i) d[i] += k * (go[i] - mean_dy - xh[i] * mean_dyx);
            } else {
              for (std::size_t i = 0; i < plane; ++i) d[i] += k * go[i];
            }
          }
        }
      });
}

template <typename T>
BasicTensor<T> relu(const BasicTensor<T>& x) {
  std::vector<T> out(x.numel());
  const auto xd = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = xd[i] > T(0) ? xd[i] : T(0);
  ImplPtr<T> xi = x.impl();
  return emit<T>(OpKind::kRelu, x.shape(), std::move(out), {&x}, [xi](std::span<const T> gout) {
    auto& dx = xi->ensure_grad();
    const T* xd = xi->data.data();
    for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += xd[i] > T(0) ? gout[i] : T(0);
  });
}

template <typename T>
BasicTensor<T> maxpool2x2(const BasicTensor<T>& x) {
  require_rank("maxpool2x2", x.shape(), 4);
  const std::size_t planes = x.dim(0) * x.dim(1), h = x.dim(2), w = x.dim(3);
  if (h < 2 || w < 2) throw DimensionError("maxpool2x2: spatial axes 2,3 must be >= 2, got " + shape_str(x.shape()));
  const std::size_t ho = h / 2, wo = w / 2;
  std::vector<T> out(planes * ho * wo);
  std::vector<std::uint32_t> argmax(out.size());
  const auto xd = x.data();
  for (std::size_t p = 0; p < planes; ++p)
    for (std::size_t oy = 0; oy < ho; ++oy)
      for (std::size_t ox = 0; ox < wo; ++ox) {
        std::size_t best = p * h * w + (2 * oy) * w + 2 * ox;
        for (std::size_t dy = 0; dy < 2; ++dy)
          for (std::size_t dx = 0; dx < 2; ++dx) {
            const std::size_t idx = p * h * w + (2 * oy + dy) * w + 2 * ox + dx;
            if (xd[idx] > xd[best]) best = idx;
          }
        const std::size_t o = (p * ho + oy) * wo + ox;
        out[o] = xd[best];
        argmax[o] = static_cast<std::uint32_t>(best);
      }
  ImplPtr<T> xi = x.impl();
  return emit<T>(OpKind::kMaxPool, {x.dim(0), x.dim(1), ho, wo}, std::move(out), {&x},
                 [xi, argmax = std::move(argmax)](std::span<const T> gout) {
                   auto& dx = xi->ensure_grad();
                   for (std::size_t o = 0; o < argmax.size(); ++o) dx[argmax[o]] += gout[o];
                 });
}

template <typename T>
BasicTensor<T> global_avgpool(const BasicTensor<T>& x) {
  require_rank("global_avgpool", x.shape(), 4);
  const std::size_t planes = x.dim(0) * x.dim(1), plane = x.dim(2) * x.dim(3);
  std::vector<T> out(planes);
  const auto xd = x.data();
  for (std::size_t p = 0; p < planes; ++p) {
    T s = 0;
    for (std::size_t i = 0; i < plane; ++i) s += xd[p * plane + i];
    out[p] = s / static_cast<T>(plane);
  }
  ImplPtr<T> xi = x.impl();
  return emit<T>(OpKind::kAvgPool, {x.dim(0), x.dim(1)}, std::move(out), {&x},
                 [xi, planes, plane](std::span<const T> gout) {
                   auto& dx = xi->ensure_grad();
                   const T inv = T(1) / static_cast<T>(plane);
                   for (std::size_t p = 0; p < planes; ++p)
                     for (std::size_t i = 0; i < plane; ++i) dx[p * plane + i] += gout[p] * inv;
                 });
}

template <typename T>
BasicTensor<T> flatten(const BasicTensor<T>& x) {
  if (x.rank() < 2) throw DimensionError("flatten: need rank >= 2, got " + shape_str(x.shape()));
  const std::size_t batch = x.dim(0);
  std::vector<T> out(x.data().begin(), x.data().end());
  ImplPtr<T> xi = x.impl();
  return emit<T>(OpKind::kFlatten, {batch, x.numel() / batch}, std::move(out), {&x}, [xi](std::span<const T> gout) {
    auto& dx = xi->ensure_grad();
    for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += gout[i];
  });
}

template <typename T>
BasicTensor<T> linear(const BasicTensor<T>& x, const BasicTensor<T>& w, const BasicTensor<T>& b) {
  require_rank("linear(x)", x.shape(), 2);
  require_rank("linear(w)", w.shape(), 2);
  const std::size_t batch = x.dim(0), in = x.dim(1), outf = w.dim(0);
  if (w.dim(1) != in)
    throw DimensionError("linear: x axis 1 (" + std::to_string(in) + ") != w axis 1 (" + std::to_string(w.dim(1)) + ")");
  if (b.numel() != outf)
    throw DimensionError("linear: bias length " + std::to_string(b.numel()) + " != w axis 0 (" +
                         std::to_string(outf) + ")");
  std::vector<T> out(batch * outf);
  MatMap<T> y(out.data(), batch, outf);
  y.noalias() = ConstMatMap<T>(x.data().data(), batch, in) * ConstMatMap<T>(w.data().data(), outf, in).transpose();
  for (std::size_t r = 0; r < batch; ++r)
    for (std::size_t o = 0; o < outf; ++o) out[r * outf + o] += b.data()[o];

  ImplPtr<T> xi = x.impl(), wi = w.impl(), bi = b.impl();
  return emit<T>(OpKind::kLinear, {batch, outf}, std::move(out), {&x, &w, &b},
                 [=](std::span<const T> gout) {
                   ConstMatMap<T> dy(gout.data(), batch, outf);
                   if (xi->requires_grad)
                     MatMap<T>(xi->ensure_grad().data(), batch, in).noalias() +=
                         dy * ConstMatMap<T>(wi->data.data(), outf, in);
                   if (wi->requires_grad)
                     MatMap<T>(wi->ensure_grad().data(), outf, in).noalias() +=
                         dy.transpose() * ConstMatMap<T>(xi->data.data(), batch, in);
                   if (bi->requires_grad) {
                     auto& db = bi->ensure_grad();
                     for (std::size_t r = 0; r < batch; ++r)
                       for (std::size_t o = 0; o < outf; ++o) db[o] += gout[r * outf + o];
                   }
                 });
}

template <typename T>
BasicTensor<T> channel_scale(const BasicTensor<T>& x, std::span<const T> mask) {
  if (x.rank() < 2) throw DimensionError("channel_scale: need rank >= 2, got " + shape_str(x.shape()));
  const std::size_t batch = x.dim(0), channels = x.dim(1), plane = x.numel() / (batch * channels);
  if (mask.size() != channels)
    throw DimensionError("channel_scale: mask length " + std::to_string(mask.size()) + " != channel axis 1 (" +
                         std::to_string(channels) + ")");
  std::vector<T> m(mask.begin(), mask.end());
  std::vector<T> out(x.numel());
  const auto xd = x.data();
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t c = 0; c < channels; ++c)
      for (std::size_t i = 0; i < plane; ++i) {
        const std::size_t idx = (b * channels + c) * plane + i;
        out[idx] = xd[idx] * m[c];
      }
  ImplPtr<T> xi = x.impl();
  return emit<T>(OpKind::kChannelScale, x.shape(), std::move(out), {&x},
                 [=, m = std::move(m)](std::span<const T> gout) {
                   auto& dx = xi->ensure_grad();
                   for (std::size_t b = 0; b < batch; ++b)
                     for (std::size_t c = 0; c < channels; ++c)
                       for (std::size_t i = 0; i < plane; ++i) {
                         const std::size_t idx = (b * channels + c) * plane + i;
                         dx[idx] += gout[idx] * m[c];
                       }
                 });
}

template <typename T>
BasicTensor<T> softmax_cross_entropy(const BasicTensor<T>& logits, std::span<const std::int32_t> labels) {
  require_rank("softmax_cross_entropy", logits.shape(), 2);
  const std::size_t batch = logits.dim(0), classes = logits.dim(1);
  if (labels.size() != batch)
    throw DimensionError("softmax_cross_entropy: " + std::to_string(labels.size()) + " labels for batch axis 0 of " +
                         std::to_string(batch));
  std::vector<T> probs(logits.numel());
  std::vector<std::int32_t> lab(labels.begin(), labels.end());
  const auto ld = logits.data();
  double total = 0;
  for (std::size_t r = 0; r < batch; ++r) {
    if (lab[r] < 0 || static_cast<std::size_t>(lab[r]) >= classes)
      throw std::out_of_range("softmax_cross_entropy: label " + std::to_string(lab[r]) + " outside [0," +
                              std::to_string(classes) + ")");
    const T* row = ld.data() + r * classes;
    const T mx = *std::max_element(row, row + classes);
    double z = 0;
    for (std::size_t c = 0; c < classes; ++c) z += std::exp(static_cast<double>(row[c] - mx));
    for (std::size_t c = 0; c < classes; ++c)
      probs[r * classes + c] = static_cast<T>(std::exp(static_cast<double>(row[c] - mx)) / z);
    total += std::log(z) + static_cast<double>(mx) - static_cast<double>(row[lab[r]]);
  }
  ImplPtr<T> li = logits.impl();
  return emit<T>(OpKind::kSoftmaxXent, {1}, {static_cast<T>(total / static_cast<double>(batch))}, {&logits},
                 [=, probs = std::move(probs), lab = std::move(lab)](std::span<const T> gout) {
                   auto& dl = li->ensure_grad();
                   const T s = gout[0] / static_cast<T>(batch);
                   for (std::size_t r = 0; r < batch; ++r)
                     for (std::size_t c = 0; c < classes; ++c) {
                       const T onehot = static_cast<std::size_t>(lab[r]) == c ? T(1) : T(0);
                       dl[r * classes + c] += s * (probs[r * classes + c] - onehot);
                     }
                 });
}

template <typename T>
BasicTensor<T> add(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  if (a.shape() != b.shape())
    throw DimensionError("add: shape " + shape_str(a.shape()) + " != " + shape_str(b.shape()));
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] + b.data()[i];
  ImplPtr<T> ai = a.impl(), bi = b.impl();
  return emit<T>(OpKind::kAdd, a.shape(), std::move(out), {&a, &b}, [ai, bi](std::span<const T> gout) {
    for (auto* in : {ai.get(), bi.get()}) {
      if (!in->requires_grad) continue;
      auto& d = in->ensure_grad();
      for (std::size_t i = 0; i < d.size(); ++i) d[i] += gout[i];
    }
  });
}

template <typename T>
BasicTensor<T> mul(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  if (a.shape() != b.shape())
    throw DimensionError("mul: shape " + shape_str(a.shape()) + " != " + shape_str(b.shape()));
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * b.data()[i];
  ImplPtr<T> ai = a.impl(), bi = b.impl();
  return emit<T>(OpKind::kMul, a.shape(), std::move(out), {&a, &b}, [ai, bi](std::span<const T> gout) {
    if (ai->requires_grad) {
      auto& d = ai->ensure_grad();
      for (std::size_t i = 0; i < d.size(); ++i) d[i] += gout[i] * bi->data[i];
    }
    if (bi->requires_grad) {
      auto& d = bi->ensure_grad();
      for (std::size_t i = 0; i < d.size(); ++i) d[i] += gout[i] * ai->data[i];
    }
  });
}

template <typename T>
BasicTensor<T> scale(const BasicTensor<T>& x, T factor) {
  std::vector<T> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x.data()[i] * factor;
  ImplPtr<T> xi = x.impl();
  return emit<T>(OpKind::kScale, x.shape(), std::move(out), {&x}, [xi, factor](std::span<const T> gout) {
    auto& d = xi->ensure_grad();
    for (std::size_t i = 0; i < d.size(); ++i) d[i] += gout[i] * factor;
  });
}

template <typename T>
BasicTensor<T> sum(const BasicTensor<T>& x) {
  T s = 0;
  for (T v : x.data()) s += v;
  ImplPtr<T> xi = x.impl();
  return emit<T>(OpKind::kSum, {1}, {s}, {&x}, [xi](std::span<const T> gout) {
    auto& d = xi->ensure_grad();
    for (auto& v : d) v += gout[0];
  });
}

#define DCP_INSTANTIATE_OPS(T)                                                                                  \
  template BasicTensor<T> conv2d<T>(const BasicTensor<T>&, const BasicTensor<T>&, int, int);                    \
  template BasicTensor<T> batchnorm<T>(const BasicTensor<T>&, const BasicTensor<T>&, const BasicTensor<T>&,     \
                                       BatchNormStats<T>&, Mode);                                               \
  template BasicTensor<T> relu<T>(const BasicTensor<T>&);                                                       \
  template BasicTensor<T> maxpool2x2<T>(const BasicTensor<T>&);                                                 \
  template BasicTensor<T> global_avgpool<T>(const BasicTensor<T>&);                                             \
  template BasicTensor<T> flatten<T>(const BasicTensor<T>&);                                                    \
  template BasicTensor<T> linear<T>(const BasicTensor<T>&, const BasicTensor<T>&, const BasicTensor<T>&);       \
  template BasicTensor<T> channel_scale<T>(const BasicTensor<T>&, std::span<const T>);                          \
  template BasicTensor<T> softmax_cross_entropy<T>(const BasicTensor<T>&, std::span<const std::int32_t>);       \
  template BasicTensor<T> add<T>(const BasicTensor<T>&, const BasicTensor<T>&);                                 \
  template BasicTensor<T> mul<T>(const BasicTensor<T>&, const BasicTensor<T>&);                                 \
  template BasicTensor<T> scale<T>(const BasicTensor<T>&, T);                                                   \
  template BasicTensor<T> sum<T>(const BasicTensor<T>&);

DCP_INSTANTIATE_OPS(float)
DCP_INSTANTIATE_OPS(double)

#undef DCP_INSTANTIATE_OPS

}  // namespace dcp
