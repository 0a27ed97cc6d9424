#include "flowseg/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <numeric>

namespace flowseg::ops {

namespace {

using RowMat = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using CMapMat = Eigen::Map<const RowMat>;
using Grad = std::vector<float>;

[[noreturn]] void shape_fail(std::string_view op, const Shape& a, const Shape& b, std::string_view why = {}) {
  std::string msg = std::string(op) + ": shape mismatch " + shape_str(a) + " vs " + shape_str(b);
  if (!why.empty()) msg += " (" + std::string(why) + ")";
  throw ShapeError(msg);
}

void check_finite(std::string_view op, const std::vector<float>& v) {
  for (float x : v) {
    if (!std::isfinite(x)) throw NumericError(std::string(op) + ": non-finite output");
  }
}

bool any_tracked(std::span<const Tensor> inputs) {
  if (!Tape::active() || !grad_enabled()) return false;
  return std::any_of(inputs.begin(), inputs.end(), [](const Tensor& t) { return t.requires_grad(); });
}

Tensor finish(std::string_view op, std::vector<Tensor> inputs, Shape shape, std::vector<float> data,
              Tape::BackwardFn fn) {
  check_finite(op, data);
  Tensor out(std::move(shape), std::move(data));
  if (!any_tracked(inputs)) return out;
  return Tape::active()->record(op, inputs, std::move(out), std::move(fn));
}

std::vector<float> copy_data(const Tensor& t) { return {t.data().begin(), t.data().end()}; }

// Geometry shared by conv3d and its adjoint. "Big" is the side with the
// larger (or equal) spatial extent.
struct ConvGeom {
  int channels = 0;
  std::array<int, 3> big{};
  std::array<int, 3> kernel{};
  std::array<int, 3> stride{};
  std::array<int, 3> small{};

  int kernel_volume() const { return kernel[0] * kernel[1] * kernel[2]; }
  int big_volume() const { return big[0] * big[1] * big[2]; }
  int small_volume() const { return small[0] * small[1] * small[2]; }
  int col_rows() const { return channels * kernel_volume(); }
};

// Output positions e in [lo, hi) whose input index e*stride + off lands in [0, extent).
std::pair<int, int> valid_range(int off, int stride, int extent, int out) {
  int lo = off >= 0 ? 0 : (-off + stride - 1) / stride;
  int hi = extent - 1 - off < 0 ? 0 : (extent - 1 - off) / stride + 1;
  lo = std::min(lo, out);
  hi = std::clamp(hi, lo, out);
  return {lo, hi};
}

// col[(c,q), o] = x[c, o*stride + q - k/2] (zero outside).
void im2col(const float* x, const ConvGeom& g, float* col) {
  const int kh = g.kernel[0], kw = g.kernel[1], kd = g.kernel[2];
  const int oh = g.small[0], ow = g.small[1], od = g.small[2];
  const int H = g.big[0], W = g.big[1], D = g.big[2];
  const int sd = g.stride[2];
  const int ncol = g.small_volume();
  for (int c = 0; c < g.channels; ++c) {
    const float* xc = x + static_cast<std::size_t>(c) * g.big_volume();
    for (int qh = 0; qh < kh; ++qh) {
      for (int qw = 0; qw < kw; ++qw) {
        for (int qd = 0; qd < kd; ++qd) {
          const int row = ((c * kh + qh) * kw + qw) * kd + qd;
          float* dst = col + static_cast<std::size_t>(row) * ncol;
          const int off = qd - kd / 2;
          const auto [lo, hi] = valid_range(off, sd, D, od);
          for (int a = 0; a < oh; ++a) {
            const int ih = a * g.stride[0] + qh - kh / 2;
            for (int b = 0; b < ow; ++b) {
              const int iw = b * g.stride[1] + qw - kw / 2;
              float* d = dst + (a * ow + b) * od;
              if (ih < 0 || ih >= H || iw < 0 || iw >= W) {
                std::fill(d, d + od, 0.0f);
                continue;
              }
              const float* src = xc + (static_cast<std::size_t>(ih) * W + iw) * D + off;
              std::fill(d, d + lo, 0.0f);
              if (sd == 1) {
                std::copy(src + lo, src + hi, d + lo);
              } else {
                for (int e = lo; e < hi; ++e) d[e] = src[e * sd];
              }
              std::fill(d + hi, d + od, 0.0f);
            }
          }
        }
      }
    }
  }
}

// Adjoint of im2col: accumulates col into x (x must be pre-zeroed).
void col2im(const float* col, const ConvGeom& g, float* x) {
  const int kh = g.kernel[0], kw = g.kernel[1], kd = g.kernel[2];
  const int oh = g.small[0], ow = g.small[1], od = g.small[2];
  const int H = g.big[0], W = g.big[1], D = g.big[2];
  const int sd = g.stride[2];
  const int ncol = g.small_volume();
  for (int c = 0; c < g.channels; ++c) {
    float* xc = x + static_cast<std::size_t>(c) * g.big_volume();
    for (int qh = 0; qh < kh; ++qh) {
      for (int qw = 0; qw < kw; ++qw) {
        for (int qd = 0; qd < kd; ++qd) {
          const int row = ((c * kh + qh) * kw + qw) * kd + qd;
          const float* src = col + static_cast<std::size_t>(row) * ncol;
          const int off = qd - kd / 2;
          const auto [lo, hi] = valid_range(off, sd, D, od);
          for (int a = 0; a < oh; ++a) {
            const int ih = a * g.stride[0] + qh - kh / 2;
            if (ih < 0 || ih >= H) continue;
            for (int b = 0; b < ow; ++b) {
              const int iw = b * g.stride[1] + qw - kw / 2;
              if (iw < 0 || iw >= W) continue;
              const float* s = src + (a * ow + b) * od;
              float* dst = xc + (static_cast<std::size_t>(ih) * W + iw) * D + off;
              if (sd == 1) {
                for (int e = lo; e < hi; ++e) dst[e] += s[e];
              } else {
                for (int e = lo; e < hi; ++e) dst[e * sd] += s[e];
              }
            }
          }
        }
      }
    }
  }
}

void check_stride(std::string_view op, Dims3 stride) {
  for (int s : stride) {
    if (s != 1 && s != 2) throw ShapeError(std::string(op) + ": stride must be 1 or 2");
  }
}

Tensor elementwise_binary(std::string_view op, const Tensor& a, const Tensor& b, float sa, float sb, bool product) {
  if (a.shape() != b.shape()) shape_fail(op, a.shape(), b.shape());
  const auto n = static_cast<std::size_t>(a.numel());
  std::vector<float> out(n);
  const float* pa = a.ptr();
  const float* pb = b.ptr();
  if (product) {
    for (std::size_t i = 0; i < n; ++i) out[i] = pa[i] * pb[i];
  } else {
    for (std::size_t i = 0; i < n; ++i) out[i] = sa * pa[i] + sb * pb[i];
  }
  return finish(op, {a, b}, a.shape(), std::move(out), [a, b, sa, sb, product](const Grad& g, const Tape::Accum& acc) {
    const std::size_t m = g.size();
    if (a.requires_grad()) {
      Grad ga(m);
      for (std::size_t i = 0; i < m; ++i) ga[i] = product ? g[i] * b.ptr()[i] : sa * g[i];
      acc(a.id(), ga);
    }
    if (b.requires_grad()) {
      Grad gb(m);
      for (std::size_t i = 0; i < m; ++i) gb[i] = product ? g[i] * a.ptr()[i] : sb * g[i];
      acc(b.id(), gb);
    }
  });
}

template <class F, class DF>
Tensor unary(std::string_view op, const Tensor& x, F f, DF df) {
  const auto n = static_cast<std::size_t>(x.numel());
  std::vector<float> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = f(x.ptr()[i]);
  return finish(op, {x}, x.shape(), std::move(out), [x, df](const Grad& g, const Tape::Accum& acc) {
    Grad gx(g.size());
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] = g[i] * df(x.ptr()[i]);
    acc(x.id(), gx);
  });
}

float sigmoidf(float v) {
  if (v >= 0) return 1.0f / (1.0f + std::exp(-v));
  const float e = std::exp(v);
  return e / (1.0f + e);
}

}  // namespace

const std::vector<std::string_view>& registered() {
  static const std::vector<std::string_view> names = {
      "add",      "sub",       "mul",       "scale",   "matmul",         "conv3d",  "conv_transpose3d",
      "avgpool3d", "global_avgpool", "relu", "silu",    "sigmoid",        "reshape", "concat_channels",
      "slice",    "mse",       "bce_with_logits", "sum", "mean"};
  return names;
}

Tensor add(const Tensor& a, const Tensor& b) { return elementwise_binary("add", a, b, 1.0f, 1.0f, false); }
Tensor sub(const Tensor& a, const Tensor& b) { return elementwise_binary("sub", a, b, 1.0f, -1.0f, false); }
Tensor mul(const Tensor& a, const Tensor& b) { return elementwise_binary("mul", a, b, 0.0f, 0.0f, true); }

Tensor scale(const Tensor& a, float k) {
  return unary("scale", a, [k](float v) { return k * v; }, [k](float) { return k; });
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) shape_fail("matmul", a.shape(), b.shape());
  const auto M = a.dim(0), K = a.dim(1), N = b.dim(1);
  std::vector<float> out(static_cast<std::size_t>(M * N));
  MapMat(out.data(), M, N).noalias() = CMapMat(a.ptr(), M, K) * CMapMat(b.ptr(), K, N);
  return finish("matmul", {a, b}, {M, N}, std::move(out), [a, b, M, K, N](const Grad& g, const Tape::Accum& acc) {
    CMapMat G(g.data(), M, N);
    if (a.requires_grad()) {
      Grad ga(static_cast<std::size_t>(M * K));
      MapMat(ga.data(), M, K).noalias() = G * CMapMat(b.ptr(), K, N).transpose();
      acc(a.id(), ga);
    }
    if (b.requires_grad()) {
      Grad gb(static_cast<std::size_t>(K * N));
      MapMat(gb.data(), K, N).noalias() = CMapMat(a.ptr(), M, K).transpose() * G;
      acc(b.id(), gb);
    }
  });
}

Tensor conv3d(const Tensor& x, const Tensor& w, const Tensor& bias, Dims3 stride) {
  check_stride("conv3d", stride);
  if (x.rank() != 5 || w.rank() != 5 || x.dim(1) != w.dim(1)) shape_fail("conv3d", x.shape(), w.shape());
  if (bias.rank() != 1 || bias.dim(0) != w.dim(0)) shape_fail("conv3d", w.shape(), bias.shape(), "bias");
  ConvGeom geo;
  geo.channels = static_cast<int>(x.dim(1));
  for (int i = 0; i < 3; ++i) {
    geo.big[i] = static_cast<int>(x.dim(2 + i));
    geo.kernel[i] = static_cast<int>(w.dim(2 + i));
    geo.stride[i] = stride[i];
    if (geo.kernel[i] % 2 == 0) shape_fail("conv3d", x.shape(), w.shape(), "kernel extents must be odd");
    geo.small[i] = geo.big[i] / stride[i];
    if (geo.small[i] < 1) shape_fail("conv3d", x.shape(), w.shape(), "input too small for stride");
  }
  const int N = static_cast<int>(x.dim(0));
  const int Cout = static_cast<int>(w.dim(0));
  const int R = geo.col_rows(), P = geo.small_volume(), Vin = geo.big_volume();
  const Shape out_shape = {N, Cout, geo.small[0], geo.small[1], geo.small[2]};

  std::vector<float> out(static_cast<std::size_t>(N) * Cout * P);
  std::vector<float> cols(static_cast<std::size_t>(N) * R * P);
  CMapMat Wm(w.ptr(), Cout, R);
  for (int n = 0; n < N; ++n) {
    float* col = cols.data() + static_cast<std::size_t>(n) * R * P;
    im2col(x.ptr() + static_cast<std::size_t>(n) * geo.channels * Vin, geo, col);
    MapMat Y(out.data() + static_cast<std::size_t>(n) * Cout * P, Cout, P);
    Y.noalias() = Wm * CMapMat(col, R, P);
    for (int c = 0; c < Cout; ++c) Y.row(c).array() += bias.ptr()[c];
  }

  auto saved = std::make_shared<std::vector<float>>(std::move(cols));
  return finish("conv3d", {x, w, bias}, out_shape, std::move(out),
                [x, w, bias, geo, N, Cout, R, P, Vin, saved](const Grad& g, const Tape::Accum& acc) {
                  CMapMat Wm(w.ptr(), Cout, R);
                  Grad gw(w.requires_grad() ? static_cast<std::size_t>(Cout) * R : 0, 0.0f);
                  Grad gb(bias.requires_grad() ? static_cast<std::size_t>(Cout) : 0, 0.0f);
                  Grad gx(x.requires_grad() ? static_cast<std::size_t>(x.numel()) : 0, 0.0f);
                  std::vector<float> dcol(x.requires_grad() ? static_cast<std::size_t>(R) * P : 0);
                  for (int n = 0; n < N; ++n) {
                    CMapMat G(g.data() + static_cast<std::size_t>(n) * Cout * P, Cout, P);
                    const float* col = saved->data() + static_cast<std::size_t>(n) * R * P;
                    if (w.requires_grad()) MapMat(gw.data(), Cout, R).noalias() += G * CMapMat(col, R, P).transpose();
                    // Plain loop: Eigen's vectorized sum depends on pointer alignment,
                    // which would make resumed runs drift from uninterrupted ones.
                    if (bias.requires_grad()) {
                      for (int c = 0; c < Cout; ++c) {
                        const float* row = g.data() + (static_cast<std::size_t>(n) * Cout + c) * P;
                        double s = 0.0;
                        for (std::int64_t p = 0; p < P; ++p) s += row[p];
                        gb[c] += static_cast<float>(s);
                      }
                    }
                    if (x.requires_grad()) {
                      MapMat(dcol.data(), R, P).noalias() = Wm.transpose() * G;
                      col2im(dcol.data(), geo, gx.data() + static_cast<std::size_t>(n) * geo.channels * Vin);
                    }
                  }
                  if (x.requires_grad()) acc(x.id(), gx);
                  if (w.requires_grad()) acc(w.id(), gw);
                  if (bias.requires_grad()) acc(bias.id(), gb);
                });
}

Tensor conv_transpose3d(const Tensor& x, const Tensor& w, const Tensor& bias, Dims3 stride) {
  check_stride("conv_transpose3d", stride);
  if (x.rank() != 5 || w.rank() != 5 || x.dim(1) != w.dim(0)) shape_fail("conv_transpose3d", x.shape(), w.shape());
  if (bias.rank() != 1 || bias.dim(0) != w.dim(1)) shape_fail("conv_transpose3d", w.shape(), bias.shape(), "bias");
  ConvGeom geo;
  geo.channels = static_cast<int>(w.dim(1));
  for (int i = 0; i < 3; ++i) {
    geo.small[i] = static_cast<int>(x.dim(2 + i));
    geo.kernel[i] = static_cast<int>(w.dim(2 + i));
    geo.stride[i] = stride[i];
    if (geo.kernel[i] % 2 == 0) shape_fail("conv_transpose3d", x.shape(), w.shape(), "kernel extents must be odd");
    geo.big[i] = geo.small[i] * stride[i];
  }
  const int N = static_cast<int>(x.dim(0));
  const int Cin = static_cast<int>(x.dim(1));
  const int Cout = geo.channels;
  const int R = geo.col_rows(), P = geo.small_volume(), Vout = geo.big_volume();
  const Shape out_shape = {N, Cout, geo.big[0], geo.big[1], geo.big[2]};

  std::vector<float> out(static_cast<std::size_t>(N) * Cout * Vout, 0.0f);
  std::vector<float> col(static_cast<std::size_t>(R) * P);
  CMapMat Wm(w.ptr(), Cin, R);
  for (int n = 0; n < N; ++n) {
    MapMat(col.data(), R, P).noalias() = Wm.transpose() * CMapMat(x.ptr() + static_cast<std::size_t>(n) * Cin * P, Cin, P);
    float* y = out.data() + static_cast<std::size_t>(n) * Cout * Vout;
    col2im(col.data(), geo, y);
    for (int c = 0; c < Cout; ++c) {
      float* yc = y + static_cast<std::size_t>(c) * Vout;
      for (int v = 0; v < Vout; ++v) yc[v] += bias.ptr()[c];
    }
  }

  return finish("conv_transpose3d", {x, w, bias}, out_shape, std::move(out),
                [x, w, bias, geo, N, Cin, Cout, R, P, Vout](const Grad& g, const Tape::Accum& acc) {
                  CMapMat Wm(w.ptr(), Cin, R);
                  Grad gw(w.requires_grad() ? static_cast<std::size_t>(Cin) * R : 0, 0.0f);
                  Grad gb(bias.requires_grad() ? static_cast<std::size_t>(Cout) : 0, 0.0f);
                  Grad gx(x.requires_grad() ? static_cast<std::size_t>(x.numel()) : 0, 0.0f);
                  std::vector<float> gcol(static_cast<std::size_t>(R) * P);
                  for (int n = 0; n < N; ++n) {
                    const float* gy = g.data() + static_cast<std::size_t>(n) * Cout * Vout;
                    im2col(gy, geo, gcol.data());
                    CMapMat GC(gcol.data(), R, P);
                    if (x.requires_grad()) MapMat(gx.data() + static_cast<std::size_t>(n) * Cin * P, Cin, P).noalias() = Wm * GC;
                    if (w.requires_grad()) {
                      MapMat(gw.data(), Cin, R).noalias() +=
                          CMapMat(x.ptr() + static_cast<std::size_t>(n) * Cin * P, Cin, P) * GC.transpose();
                    }
                    if (bias.requires_grad()) {
                      for (int c = 0; c < Cout; ++c) {
                        const float* gc = gy + static_cast<std::size_t>(c) * Vout;
                        gb[c] += std::accumulate(gc, gc + Vout, 0.0f);
                      }
                    }
                  }
                  if (x.requires_grad()) acc(x.id(), gx);
                  if (w.requires_grad()) acc(w.id(), gw);
                  if (bias.requires_grad()) acc(bias.id(), gb);
                });
}

Tensor avgpool3d(const Tensor& x, Dims3 window) {
  if (x.rank() != 5) shape_fail("avgpool3d", x.shape(), {window[0], window[1], window[2]});
  std::array<int, 3> in{}, out{};
  for (int i = 0; i < 3; ++i) {
    in[i] = static_cast<int>(x.dim(2 + i));
    if (window[i] < 1 || in[i] % window[i] != 0) {
      shape_fail("avgpool3d", x.shape(), {window[0], window[1], window[2]}, "window must divide extents");
    }
    out[i] = in[i] / window[i];
  }
  const auto planes = x.dim(0) * x.dim(1);
  const int vin = in[0] * in[1] * in[2], vout = out[0] * out[1] * out[2];
  const float inv = 1.0f / static_cast<float>(window[0] * window[1] * window[2]);
  // Maps every input voxel to its pooled cell.
  std::vector<int> cell(static_cast<std::size_t>(vin));
  for (int a = 0; a < in[0]; ++a)
    for (int b = 0; b < in[1]; ++b)
      for (int c = 0; c < in[2]; ++c)
        cell[(a * in[1] + b) * in[2] + c] = ((a / window[0]) * out[1] + b / window[1]) * out[2] + c / window[2];
  std::vector<float> y(static_cast<std::size_t>(planes * vout), 0.0f);
  for (std::int64_t p = 0; p < planes; ++p) {
    const float* src = x.ptr() + p * vin;
    float* dst = y.data() + p * vout;
    for (int v = 0; v < vin; ++v) dst[cell[v]] += src[v] * inv;
  }
  return finish("avgpool3d", {x}, {x.dim(0), x.dim(1), out[0], out[1], out[2]}, std::move(y),
                [x, cell = std::move(cell), planes, vin, vout, inv](const Grad& g, const Tape::Accum& acc) {
                  Grad gx(static_cast<std::size_t>(x.numel()));
                  for (std::int64_t p = 0; p < planes; ++p) {
                    for (int v = 0; v < vin; ++v) gx[p * vin + v] = g[p * vout + cell[v]] * inv;
                  }
                  acc(x.id(), gx);
                });
}

Tensor global_avgpool(const Tensor& x) {
  if (x.rank() < 3) shape_fail("global_avgpool", x.shape(), {}, "need [N,C,spatial...]");
  const auto planes = x.dim(0) * x.dim(1);
  const auto vol = x.numel() / planes;
  std::vector<float> y(static_cast<std::size_t>(planes));
  for (std::int64_t p = 0; p < planes; ++p) {
    const float* src = x.ptr() + p * vol;
    y[p] = std::accumulate(src, src + vol, 0.0f) / static_cast<float>(vol);
  }
  return finish("global_avgpool", {x}, {x.dim(0), x.dim(1)}, std::move(y),
                [x, planes, vol](const Grad& g, const Tape::Accum& acc) {
                  Grad gx(static_cast<std::size_t>(x.numel()));
                  for (std::int64_t p = 0; p < planes; ++p) {
                    std::fill_n(gx.begin() + p * vol, vol, g[p] / static_cast<float>(vol));
                  }
                  acc(x.id(), gx);
                });
}

Tensor relu(const Tensor& x) {
  return unary("relu", x, [](float v) { return v > 0 ? v : 0.0f; }, [](float v) { return v > 0 ? 1.0f : 0.0f; });
}

Tensor silu(const Tensor& x) {
  return unary(
      "silu", x, [](float v) { return v * sigmoidf(v); },
      [](float v) {
        const float s = sigmoidf(v);
        return s * (1.0f + v * (1.0f - s));
      });
}

Tensor sigmoid(const Tensor& x) {
  return unary("sigmoid", x, sigmoidf, [](float v) {
    const float s = sigmoidf(v);
    return s * (1.0f - s);
  });
}

Tensor reshape(const Tensor& x, Shape shape) {
  if (shape_numel(shape) != x.numel()) shape_fail("reshape", x.shape(), shape);
  return finish("reshape", {x}, std::move(shape), copy_data(x),
                [x](const Grad& g, const Tape::Accum& acc) { acc(x.id(), g); });
}

Tensor concat_channels(const std::vector<Tensor>& xs) {
  if (xs.empty()) throw ShapeError("concat_channels: no inputs");
  const Tensor& first = xs.front();
  if (first.rank() < 2) shape_fail("concat_channels", first.shape(), {}, "need rank >= 2");
  std::int64_t channels = 0;
  for (const auto& t : xs) {
    if (t.rank() != first.rank() || t.dim(0) != first.dim(0)) shape_fail("concat_channels", first.shape(), t.shape());
    for (std::size_t i = 2; i < t.rank(); ++i) {
      if (t.dim(i) != first.dim(i)) shape_fail("concat_channels", first.shape(), t.shape());
    }
    channels += t.dim(1);
  }
  const std::int64_t N = first.dim(0);
  const std::int64_t inner = first.numel() / (N * first.dim(1));
  Shape shape = first.shape();
  shape[1] = channels;
  std::vector<float> y(static_cast<std::size_t>(N * channels * inner));
  std::int64_t offset = 0;
  for (const auto& t : xs) {
    const std::int64_t chunk = t.dim(1) * inner;
    for (std::int64_t n = 0; n < N; ++n) {
      std::copy_n(t.ptr() + n * chunk, chunk, y.begin() + (n * channels * inner + offset));
    }
    offset += chunk;
  }
  return finish("concat_channels", xs, std::move(shape), std::move(y),
                [xs, N, channels, inner](const Grad& g, const Tape::Accum& acc) {
                  std::int64_t off = 0;
                  for (const auto& t : xs) {
                    const std::int64_t chunk = t.dim(1) * inner;
                    if (t.requires_grad()) {
                      Grad gt(static_cast<std::size_t>(t.numel()));
                      for (std::int64_t n = 0; n < N; ++n) {
                        std::copy_n(g.begin() + (n * channels * inner + off), chunk, gt.begin() + n * chunk);
                      }
                      acc(t.id(), gt);
                    }
                    off += chunk;
                  }
                });
}

Tensor slice(const Tensor& x, std::size_t axis, std::int64_t start, std::int64_t length) {
  if (axis >= x.rank() || start < 0 || length < 1 || start + length > x.dim(axis)) {
    shape_fail("slice", x.shape(), {static_cast<std::int64_t>(axis), start, length}, "axis/start/length out of range");
  }
  std::int64_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= x.dim(i);
  for (std::size_t i = axis + 1; i < x.rank(); ++i) inner *= x.dim(i);
  const std::int64_t extent = x.dim(axis);
  Shape shape = x.shape();
  shape[axis] = length;
  std::vector<float> y(static_cast<std::size_t>(outer * length * inner));
  for (std::int64_t o = 0; o < outer; ++o) {
    std::copy_n(x.ptr() + (o * extent + start) * inner, length * inner, y.begin() + o * length * inner);
  }
  return finish("slice", {x}, std::move(shape), std::move(y),
                [x, outer, inner, extent, start, length](const Grad& g, const Tape::Accum& acc) {
                  Grad gx(static_cast<std::size_t>(x.numel()), 0.0f);
                  for (std::int64_t o = 0; o < outer; ++o) {
                    std::copy_n(g.begin() + o * length * inner, length * inner, gx.begin() + (o * extent + start) * inner);
                  }
                  acc(x.id(), gx);
                });
}

Tensor mse(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) shape_fail("mse", a.shape(), b.shape());
  const auto n = static_cast<std::size_t>(a.numel());
  double acc_sum = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double d = static_cast<double>(a.ptr()[i]) - b.ptr()[i];
    acc_sum += d * d;
  }
  const float value = static_cast<float>(acc_sum / static_cast<double>(n));
  return finish("mse", {a, b}, {1}, {value}, [a, b, n](const Grad& g, const Tape::Accum& acc) {
    const float k = 2.0f * g[0] / static_cast<float>(n);
    Grad ga(n);
    for (std::size_t i = 0; i < n; ++i) ga[i] = k * (a.ptr()[i] - b.ptr()[i]);
    if (a.requires_grad()) acc(a.id(), ga);
    if (b.requires_grad()) {
      for (auto& v : ga) v = -v;
      acc(b.id(), ga);
    }
  });
}

Tensor bce_with_logits(const Tensor& logits, const Tensor& targets) {
  if (logits.shape() != targets.shape()) shape_fail("bce_with_logits", logits.shape(), targets.shape());
  const auto n = static_cast<std::size_t>(logits.numel());
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double l = logits.ptr()[i], y = targets.ptr()[i];
    total += std::max(l, 0.0) - l * y + std::log1p(std::exp(-std::abs(l)));
  }
  const float value = static_cast<float>(total / static_cast<double>(n));
  return finish("bce_with_logits", {logits, targets}, {1}, {value},
                [logits, targets, n](const Grad& g, const Tape::Accum& acc) {
                  Grad gl(n);
                  for (std::size_t i = 0; i < n; ++i) {
                    gl[i] = g[0] * (sigmoidf(logits.ptr()[i]) - targets.ptr()[i]) / static_cast<float>(n);
                  }
                  acc(logits.id(), gl);
                });
}

Tensor sum(const Tensor& x) {
  double total = 0.0;
  for (float v : x.data()) total += v;
  return finish("sum", {x}, {1}, {static_cast<float>(total)}, [x](const Grad& g, const Tape::Accum& acc) {
    acc(x.id(), Grad(static_cast<std::size_t>(x.numel()), g[0]));
  });
}

Tensor mean(const Tensor& x) {
  double total = 0.0;
  for (float v : x.data()) total += v;
  const auto n = static_cast<float>(x.numel());
  return finish("mean", {x}, {1}, {static_cast<float>(total / x.numel())}, [x, n](const Grad& g, const Tape::Accum& acc) {
    acc(x.id(), Grad(static_cast<std::size_t>(x.numel()), g[0] / n));
  });
}

}  // namespace flowseg::ops
