// SPDX-License-Identifier: Apache-2.0

#include "rtda/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace rtda {

namespace {

thread_local std::uint64_t g_mac_tally = 0;

template <typename T>
void check_finite(const Tensor<T>& t, std::string_view op) {
  if (!t.all_finite()) throw NumericError(std::string(op) + ": non-finite result");
}

template <typename T>
void require_rank(const Var<T>& v, std::size_t rank, std::string_view op, std::string_view what) {
  if (!v.defined()) throw ShapeError(std::string(op) + ": " + std::string(what) + " is undefined");
  if (v.value().rank() != rank) {
    throw ShapeError(std::string(op) + ": " + std::string(what) + " must be rank " + std::to_string(rank) + ", got " +
                     shape_str(v.shape()));
  }
}

template <typename T>
void require_same_shape(const Var<T>& a, const Var<T>& b, std::string_view op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
}

// Dot product with eight interleaved partial sums combined in a fixed order.
template <typename T>
T dot(const T* a, const T* b, std::size_t n) {
  T acc[8] = {};
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8) {
    for (int j = 0; j < 8; ++j) acc[j] += a[i + j] * b[i + j];
  }
  T tail{0};
  for (; i < n; ++i) tail += a[i] * b[i];
  return ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7])) + tail;
}

template <typename T>
T sum(const T* a, std::size_t n) {
  T acc[8] = {};
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8) {
    for (int j = 0; j < 8; ++j) acc[j] += a[i + j];
  }
  T tail{0};
  for (; i < n; ++i) tail += a[i];
  return ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7])) + tail;
}

struct ConvGeom {
  int n, cin, h, w, cout, k, stride, pad, ho, wo;
  std::size_t plane() const { return static_cast<std::size_t>(ho) * wo; }
  std::size_t patch() const { return static_cast<std::size_t>(cin) * k * k; }
};

int conv_extent(int in, int k, int stride, int pad, std::string_view op) {
  if (k < 1 || stride < 1 || pad < 0) {
    throw ShapeError(std::string(op) + ": need k >= 1, stride >= 1, pad >= 0");
  }
  if (in + 2 * pad < k) {
    throw ShapeError(std::string(op) + ": kernel " + std::to_string(k) + " larger than padded input " +
                     std::to_string(in + 2 * pad));
  }
  return (in + 2 * pad - k) / stride + 1;
}

// cols is [cin*k*k, ho*wo]; out-of-image taps read as zero.
template <typename T>
void im2col(const T* x, const ConvGeom& g, T* cols) {
  const std::size_t plane = g.plane();
  for (int ci = 0; ci < g.cin; ++ci) {
    const T* xc = x + static_cast<std::size_t>(ci) * g.h * g.w;
    for (int kh = 0; kh < g.k; ++kh) {
      for (int kw = 0; kw < g.k; ++kw) {
        T* row = cols + ((static_cast<std::size_t>(ci) * g.k + kh) * g.k + kw) * plane;
        for (int oh = 0; oh < g.ho; ++oh) {
          const int ih = oh * g.stride - g.pad + kh;
          T* out = row + static_cast<std::size_t>(oh) * g.wo;
          if (ih < 0 || ih >= g.h) {
            std::fill(out, out + g.wo, T{0});
            continue;
          }
          const T* xr = xc + static_cast<std::size_t>(ih) * g.w;
          for (int ow = 0; ow < g.wo; ++ow) {
            const int iw = ow * g.stride - g.pad + kw;
            out[ow] = (iw >= 0 && iw < g.w) ? xr[iw] : T{0};
          }
        }
      }
    }
  }
}

template <typename T>
void col2im_add(const T* cols, const ConvGeom& g, T* dx) {
  const std::size_t plane = g.plane();
  for (int ci = 0; ci < g.cin; ++ci) {
    T* dxc = dx + static_cast<std::size_t>(ci) * g.h * g.w;
    for (int kh = 0; kh < g.k; ++kh) {
      for (int kw = 0; kw < g.k; ++kw) {
        const T* row = cols + ((static_cast<std::size_t>(ci) * g.k + kh) * g.k + kw) * plane;
        for (int oh = 0; oh < g.ho; ++oh) {
          const int ih = oh * g.stride - g.pad + kh;
          if (ih < 0 || ih >= g.h) continue;
          const T* src = row + static_cast<std::size_t>(oh) * g.wo;
          T* dr = dxc + static_cast<std::size_t>(ih) * g.w;
          for (int ow = 0; ow < g.wo; ++ow) {
            const int iw = ow * g.stride - g.pad + kw;
            if (iw >= 0 && iw < g.w) dr[iw] += src[ow];
          }
        }
      }
    }
  }
}

// Columns per tile in the GEMM kernels; keeps the touched rows in L1.
constexpr std::size_t kTile = 512;

// out[co,p] = bias[co] + sum_r w[co,r] * cols[r,p], r ascending. Output rows
// are processed four at a time over column tiles; each element still sums in
// the same order.
template <typename T>
void conv_gemm(const T* w, const T* bias, const T* cols, std::size_t cout, std::size_t patch, std::size_t plane,
               T* out) {
  for (std::size_t p0 = 0; p0 < plane; p0 += kTile) {
    const std::size_t len = std::min(kTile, plane - p0);
    std::size_t co = 0;
    for (; co + 4 <= cout; co += 4) {
      T* o0 = out + co * plane + p0;
      T* o1 = o0 + plane;
      T* o2 = o1 + plane;
      T* o3 = o2 + plane;
      std::fill(o0, o0 + len, bias[co]);
      std::fill(o1, o1 + len, bias[co + 1]);
      std::fill(o2, o2 + len, bias[co + 2]);
      std::fill(o3, o3 + len, bias[co + 3]);
      const T* w0 = w + co * patch;
      const T* w1 = w0 + patch;
      const T* w2 = w1 + patch;
      const T* w3 = w2 + patch;
      for (std::size_t r = 0; r < patch; ++r) {
        const T* c = cols + r * plane + p0;
        const T a = w0[r], b = w1[r], d = w2[r], e = w3[r];
        for (std::size_t p = 0; p < len; ++p) {
          const T v = c[p];
          o0[p] += a * v;
          o1[p] += b * v;
          o2[p] += d * v;
          o3[p] += e * v;
        }
      }
    }
    for (; co < cout; ++co) {
      T* o = out + co * plane + p0;
      std::fill(o, o + len, bias[co]);
      const T* wr = w + co * patch;
      for (std::size_t r = 0; r < patch; ++r) {
        const T* c = cols + r * plane + p0;
        const T a = wr[r];
        for (std::size_t p = 0; p < len; ++p) o[p] += a * c[p];
      }
    }
  }
}

// dcols[r,p] = sum_co w[co,r] * g[co,p], co ascending.
template <typename T>
void conv_gemm_input_grad(const T* w, const T* g, std::size_t cout, std::size_t patch, std::size_t plane, T* dcols) {
  std::fill(dcols, dcols + patch * plane, T{0});
  for (std::size_t p0 = 0; p0 < plane; p0 += kTile) {
    const std::size_t len = std::min(kTile, plane - p0);
    std::size_t r = 0;
    for (; r + 4 <= patch; r += 4) {
      T* d0 = dcols + r * plane + p0;
      T* d1 = d0 + plane;
      T* d2 = d1 + plane;
      T* d3 = d2 + plane;
      for (std::size_t co = 0; co < cout; ++co) {
        const T* wr = w + co * patch + r;
        const T a = wr[0], b = wr[1], c = wr[2], e = wr[3];
        const T* gr = g + co * plane + p0;
        for (std::size_t p = 0; p < len; ++p) {
          const T v = gr[p];
          d0[p] += a * v;
          d1[p] += b * v;
          d2[p] += c * v;
          d3[p] += e * v;
        }
      }
    }
    for (; r < patch; ++r) {
      T* d = dcols + r * plane + p0;
      for (std::size_t co = 0; co < cout; ++co) {
        const T a = w[co * patch + r];
        const T* gr = g + co * plane + p0;
        for (std::size_t p = 0; p < len; ++p) d[p] += a * gr[p];
      }
    }
  }
}

template <typename T>
T stable_sigmoid(T x) {
  if (x >= T{0}) return T{1} / (T{1} + std::exp(-x));
  const T e = std::exp(x);
  return e / (T{1} + e);
}

template <typename T>
bool wants(const Var<T>& v) {
  return v.defined() && v.requires_grad();
}

}  // namespace

std::uint64_t mac_tally() noexcept { return g_mac_tally; }
void reset_mac_tally() noexcept { g_mac_tally = 0; }

std::size_t count_scored(const LabelMask& labels) {
  std::size_t n = 0;
  for (auto v : labels.values()) n += (v != kIgnoreLabel);
  return n;
}

// ---------------------------------------------------------------------------
// Tape

template <typename T>
Var<T> Tape<T>::record(std::string_view op, std::span<const Var<T>> inputs, Tensor<T> out, BackwardFn backward) {
  check_finite(out, op);
  bool needs = false;
  for (const auto& in : inputs) needs = needs || wants(in);
  Var<T> result(std::move(out), needs);
  if (!needs) return result;
  result.node()->leaf = false;
  Entry e;
  e.op = std::string(op);
  e.inputs.reserve(inputs.size());
  for (const auto& in : inputs) e.inputs.push_back(in.node());
  e.output = result.node();
  e.backward = std::move(backward);
  entries_.push_back(std::move(e));
  return result;
}

template <typename T>
void Tape<T>::backward(const Var<T>& loss) {
  if (!loss.defined() || loss.value().numel() != 1) {
    throw ShapeError("backward: loss must be a scalar, got " + (loss.defined() ? shape_str(loss.shape()) : "undefined"));
  }
  if (!loss.requires_grad()) throw Error("backward: loss does not depend on any parameter");
  for (auto& e : entries_) e.output->grad = Tensor<T>();
  loss.node()->grad_buffer()[0] += T{1};
  for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) {
    if (it->output->grad.numel() == 0) continue;
    it->backward(it->output->grad);
  }
}

// ---------------------------------------------------------------------------
// Convolutions

template <typename T>
Var<T> conv2d(Tape<T>& tape, const Var<T>& input, const Var<T>& weight, const Var<T>& bias, int stride, int pad) {
  constexpr std::string_view op = "conv2d";
  require_rank(input, 4, op, "input");
  require_rank(weight, 4, op, "weight");
  const auto& xs = input.shape();
  const auto& ws = weight.shape();
  if (ws[1] != xs[1]) {
    throw ShapeError("conv2d: weight expects " + std::to_string(ws[1]) + " input channels, input has " +
                     std::to_string(xs[1]));
  }
  if (ws[2] != ws[3]) throw ShapeError("conv2d: kernel must be square");
  if (!bias.defined() || bias.value().numel() != static_cast<std::size_t>(ws[0])) {
    throw ShapeError("conv2d: bias must have " + std::to_string(ws[0]) + " elements");
  }
  ConvGeom g{xs[0], xs[1], xs[2], xs[3], ws[0], ws[2], stride, pad, 0, 0};
  g.ho = conv_extent(g.h, g.k, stride, pad, op);
  g.wo = conv_extent(g.w, g.k, stride, pad, op);

  const std::size_t plane = g.plane();
  const std::size_t patch = g.patch();
  const std::size_t in_img = static_cast<std::size_t>(g.cin) * g.h * g.w;
  const std::size_t out_img = static_cast<std::size_t>(g.cout) * plane;
  Tensor<T> out({g.n, g.cout, g.ho, g.wo});
  std::vector<T> cols(patch * plane);
  for (int n = 0; n < g.n; ++n) {
    im2col(input.value().data() + n * in_img, g, cols.data());
    conv_gemm(weight.value().data(), bias.value().data(), cols.data(), g.cout, patch, plane,
              out.data() + n * out_img);
    g_mac_tally += static_cast<std::uint64_t>(g.cout) * patch * plane;
  }

  return tape.record(op, {input, weight, bias}, std::move(out), [input, weight, bias, g](const Tensor<T>& gout) {
    const std::size_t plane = g.plane();
    const std::size_t patch = g.patch();
    const std::size_t in_img = static_cast<std::size_t>(g.cin) * g.h * g.w;
    const std::size_t out_img = static_cast<std::size_t>(g.cout) * plane;
    if (wants(bias)) {
      auto& db = bias.node()->grad_buffer();
      for (int n = 0; n < g.n; ++n) {
        for (int co = 0; co < g.cout; ++co) db[co] += sum(gout.data() + n * out_img + co * plane, plane);
      }
    }
    const bool dw_on = wants(weight);
    const bool dx_on = wants(input);
    if (!dw_on && !dx_on) return;
    std::vector<T> cols(patch * plane);
    std::vector<T> dcols(dx_on ? patch * plane : 0);
    for (int n = 0; n < g.n; ++n) {
      const T* gn = gout.data() + n * out_img;
      if (dw_on) {
        im2col(input.value().data() + n * in_img, g, cols.data());
        auto& dw = weight.node()->grad_buffer();
        for (int co = 0; co < g.cout; ++co) {
          const T* gr = gn + co * plane;
          T* dwr = dw.data() + co * patch;
          for (std::size_t r = 0; r < patch; ++r) dwr[r] += dot(gr, cols.data() + r * plane, plane);
        }
      }
      if (dx_on) {
        conv_gemm_input_grad(weight.value().data(), gn, g.cout, patch, plane, dcols.data());
        col2im_add(dcols.data(), g, input.node()->grad_buffer().data() + n * in_img);
      }
    }
  });
}

template <typename T>
Var<T> depthwise_conv2d(Tape<T>& tape, const Var<T>& input, const Var<T>& weight, const Var<T>& bias, int stride,
                        int pad) {
  constexpr std::string_view op = "depthwise_conv2d";
  require_rank(input, 4, op, "input");
  require_rank(weight, 4, op, "weight");
  const auto& xs = input.shape();
  const auto& ws = weight.shape();
  if (ws[0] != xs[1] || ws[1] != 1) {
    throw ShapeError("depthwise_conv2d: weight " + shape_str(ws) + " does not match " + std::to_string(xs[1]) +
                     " input channels");
  }
  if (ws[2] != ws[3]) throw ShapeError("depthwise_conv2d: kernel must be square");
  if (!bias.defined() || bias.value().numel() != static_cast<std::size_t>(ws[0])) {
    throw ShapeError("depthwise_conv2d: bias must have " + std::to_string(ws[0]) + " elements");
  }
  ConvGeom g{xs[0], xs[1], xs[2], xs[3], xs[1], ws[2], stride, pad, 0, 0};
  g.ho = conv_extent(g.h, g.k, stride, pad, op);
  g.wo = conv_extent(g.w, g.k, stride, pad, op);
  const int hp = g.h + 2 * pad;
  const int wp = g.w + 2 * pad;

  // Zero-padded copy of one input plane; every kernel tap is then executed.
  auto pad_plane = [g, hp, wp](const T* src, std::vector<T>& dst) {
    std::fill(dst.begin(), dst.end(), T{0});
    for (int y = 0; y < g.h; ++y) {
      std::copy(src + static_cast<std::size_t>(y) * g.w, src + static_cast<std::size_t>(y + 1) * g.w,
                dst.data() + static_cast<std::size_t>(y + g.pad) * wp + g.pad);
    }
  };

  const std::size_t in_plane = static_cast<std::size_t>(g.h) * g.w;
  const std::size_t out_plane = g.plane();
  Tensor<T> out({g.n, g.cin, g.ho, g.wo});
  std::vector<T> padded(static_cast<std::size_t>(hp) * wp);
  const T* w = weight.value().data();
  const T* b = bias.value().data();
  for (int n = 0; n < g.n; ++n) {
    for (int c = 0; c < g.cin; ++c) {
      const std::size_t idx = static_cast<std::size_t>(n) * g.cin + c;
      pad_plane(input.value().data() + idx * in_plane, padded);
      T* o = out.data() + idx * out_plane;
      std::fill(o, o + out_plane, b[c]);
      for (int kh = 0; kh < g.k; ++kh) {
        for (int kw = 0; kw < g.k; ++kw) {
          const T wv = w[(static_cast<std::size_t>(c) * g.k + kh) * g.k + kw];
          for (int oh = 0; oh < g.ho; ++oh) {
            const T* in_row = padded.data() + static_cast<std::size_t>(oh * g.stride + kh) * wp + kw;
            T* o_row = o + static_cast<std::size_t>(oh) * g.wo;
            for (int ow = 0; ow < g.wo; ++ow) o_row[ow] += wv * in_row[ow * g.stride];
          }
        }
      }
    }
    g_mac_tally += static_cast<std::uint64_t>(g.cin) * g.k * g.k * out_plane;
  }

  return tape.record(op, {input, weight, bias}, std::move(out),
                     [input, weight, bias, g, hp, wp, pad_plane](const Tensor<T>& gout) {
                       const std::size_t in_plane = static_cast<std::size_t>(g.h) * g.w;
                       const std::size_t out_plane = g.plane();
                       const bool dw_on = wants(weight);
                       const bool dx_on = wants(input);
                       std::vector<T> padded(static_cast<std::size_t>(hp) * wp);
                       std::vector<T> dpadded(dx_on ? padded.size() : 0);
                       for (int n = 0; n < g.n; ++n) {
                         for (int c = 0; c < g.cin; ++c) {
                           const std::size_t idx = static_cast<std::size_t>(n) * g.cin + c;
                           const T* gp = gout.data() + idx * out_plane;
                           if (wants(bias)) bias.node()->grad_buffer()[c] += sum(gp, out_plane);
                           if (dw_on) {
                             pad_plane(input.value().data() + idx * in_plane, padded);
                             auto& dw = weight.node()->grad_buffer();
                             for (int kh = 0; kh < g.k; ++kh) {
                               for (int kw = 0; kw < g.k; ++kw) {
                                 T acc[4] = {};
                                 for (int oh = 0; oh < g.ho; ++oh) {
                                   const T* in_row =
                                       padded.data() + static_cast<std::size_t>(oh * g.stride + kh) * wp + kw;
                                   const T* g_row = gp + static_cast<std::size_t>(oh) * g.wo;
                                   int ow = 0;
                                   for (; ow + 4 <= g.wo; ow += 4) {
                                     for (int j = 0; j < 4; ++j) acc[j] += g_row[ow + j] * in_row[(ow + j) * g.stride];
                                   }
                                   for (; ow < g.wo; ++ow) acc[0] += g_row[ow] * in_row[ow * g.stride];
                                 }
                                 dw[(static_cast<std::size_t>(c) * g.k + kh) * g.k + kw] +=
                                     (acc[0] + acc[1]) + (acc[2] + acc[3]);
                               }
                             }
                           }
                           if (dx_on) {
                             std::fill(dpadded.begin(), dpadded.end(), T{0});
                             const T* w = weight.value().data();
                             for (int kh = 0; kh < g.k; ++kh) {
                               for (int kw = 0; kw < g.k; ++kw) {
                                 const T wv = w[(static_cast<std::size_t>(c) * g.k + kh) * g.k + kw];
                                 for (int oh = 0; oh < g.ho; ++oh) {
                                   T* d_row = dpadded.data() + static_cast<std::size_t>(oh * g.stride + kh) * wp + kw;
                                   const T* g_row = gp + static_cast<std::size_t>(oh) * g.wo;
                                   for (int ow = 0; ow < g.wo; ++ow) d_row[ow * g.stride] += wv * g_row[ow];
                                 }
                               }
                             }
                             T* dx = input.node()->grad_buffer().data() + idx * in_plane;
                             for (int y = 0; y < g.h; ++y) {
                               const T* src = dpadded.data() + static_cast<std::size_t>(y + g.pad) * wp + g.pad;
                               T* dst = dx + static_cast<std::size_t>(y) * g.w;
                               for (int x = 0; x < g.w; ++x) dst[x] += src[x];
                             }
                           }
                         }
                       }
                     });
}

// ---------------------------------------------------------------------------
// Elementwise

template <typename T>
Var<T> leaky_relu(Tape<T>& tape, const Var<T>& input, T slope) {
  if (!(slope > T{0} && slope < T{1})) throw ConfigError("leaky_relu: slope must lie in (0,1)");
  Tensor<T> out(input.shape());
  const auto& x = input.value();
  for (std::size_t i = 0; i < x.numel(); ++i) out[i] = x[i] >= T{0} ? x[i] : slope * x[i];
  return tape.record("leaky_relu", {input}, std::move(out), [input, slope](const Tensor<T>& g) {
    const auto& x = input.value();
    auto& dx = input.node()->grad_buffer();
    for (std::size_t i = 0; i < x.numel(); ++i) dx[i] += x[i] >= T{0} ? g[i] : slope * g[i];
  });
}

template <typename T>
Var<T> relu(Tape<T>& tape, const Var<T>& input) {
  Tensor<T> out(input.shape());
  const auto& x = input.value();
  for (std::size_t i = 0; i < x.numel(); ++i) out[i] = x[i] > T{0} ? x[i] : T{0};
  return tape.record("relu", {input}, std::move(out), [input](const Tensor<T>& g) {
    const auto& x = input.value();
    auto& dx = input.node()->grad_buffer();
    for (std::size_t i = 0; i < x.numel(); ++i) {
      if (x[i] > T{0}) dx[i] += g[i];
    }
  });
}

template <typename T>
Var<T> sigmoid(Tape<T>& tape, const Var<T>& input) {
  Tensor<T> out(input.shape());
  const auto& x = input.value();
  for (std::size_t i = 0; i < x.numel(); ++i) out[i] = stable_sigmoid(x[i]);
  auto y = std::make_shared<Tensor<T>>(out);
  return tape.record("sigmoid", {input}, std::move(out), [input, y](const Tensor<T>& g) {
    auto& dx = input.node()->grad_buffer();
    for (std::size_t i = 0; i < y->numel(); ++i) dx[i] += g[i] * (*y)[i] * (T{1} - (*y)[i]);
  });
}

template <typename T>
Var<T> log(Tape<T>& tape, const Var<T>& input) {
  Tensor<T> out(input.shape());
  const auto& x = input.value();
  for (std::size_t i = 0; i < x.numel(); ++i) out[i] = std::log(x[i]);
  return tape.record("log", {input}, std::move(out), [input](const Tensor<T>& g) {
    const auto& x = input.value();
    auto& dx = input.node()->grad_buffer();
    for (std::size_t i = 0; i < x.numel(); ++i) dx[i] += g[i] / x[i];
  });
}

template <typename T>
Var<T> softmax_channels(Tape<T>& tape, const Var<T>& input) {
  require_rank(input, 4, "softmax_channels", "input");
  const auto& s = input.shape();
  const int N = s[0], C = s[1];
  const std::size_t hw = static_cast<std::size_t>(s[2]) * s[3];
  if (C < 1) throw ShapeError("softmax_channels: need at least one channel");
  Tensor<T> out(s);
  const T* x = input.value().data();
  T* y = out.data();
  for (int n = 0; n < N; ++n) {
    const std::size_t base = static_cast<std::size_t>(n) * C * hw;
    for (std::size_t p = 0; p < hw; ++p) {
      T m = x[base + p];
      for (int c = 1; c < C; ++c) m = std::max(m, x[base + c * hw + p]);
      T z{0};
      for (int c = 0; c < C; ++c) {
        const T e = std::exp(x[base + c * hw + p] - m);
        y[base + c * hw + p] = e;
        z += e;
      }
      for (int c = 0; c < C; ++c) y[base + c * hw + p] /= z;
    }
  }
  auto saved = std::make_shared<Tensor<T>>(out);
  return tape.record("softmax_channels", {input}, std::move(out), [input, saved, N, C, hw](const Tensor<T>& g) {
    const T* y = saved->data();
    T* dx = input.node()->grad_buffer().data();
    for (int n = 0; n < N; ++n) {
      const std::size_t base = static_cast<std::size_t>(n) * C * hw;
      for (std::size_t p = 0; p < hw; ++p) {
        T dotv{0};
        for (int c = 0; c < C; ++c) dotv += g[base + c * hw + p] * y[base + c * hw + p];
        for (int c = 0; c < C; ++c) {
          const std::size_t i = base + c * hw + p;
          dx[i] += y[i] * (g[i] - dotv);
        }
      }
    }
  });
}

namespace {

template <typename T>
struct InterpTap {
  int i0, i1;
  T w0, w1;
};

template <typename T>
std::vector<InterpTap<T>> interp_table(int in, int out) {
  std::vector<InterpTap<T>> table(out);
  const double ratio = static_cast<double>(in) / out;
  for (int d = 0; d < out; ++d) {
    double src = (d + 0.5) * ratio - 0.5;
    if (src < 0) src = 0;
    int i0 = static_cast<int>(std::floor(src));
    if (i0 > in - 1) i0 = in - 1;
    const int i1 = std::min(i0 + 1, in - 1);
    const T frac = static_cast<T>(src - i0);
    table[d] = {i0, i1, T{1} - frac, frac};
  }
  return table;
}

}  // namespace

template <typename T>
Var<T> bilinear_upsample(Tape<T>& tape, const Var<T>& input, int out_h, int out_w) {
  require_rank(input, 4, "bilinear_upsample", "input");
  const auto& s = input.shape();
  if (out_h <= 0 || out_w <= 0) throw ShapeError("bilinear_upsample: target extents must be positive");
  if (out_h < s[2] || out_w < s[3]) throw ShapeError("bilinear_upsample: target smaller than input");
  const int planes = s[0] * s[1];
  const int ih = s[2], iw = s[3];
  auto rows = interp_table<T>(ih, out_h);
  auto colt = interp_table<T>(iw, out_w);
  Tensor<T> out({s[0], s[1], out_h, out_w});
  for (int pl = 0; pl < planes; ++pl) {
    const T* x = input.value().data() + static_cast<std::size_t>(pl) * ih * iw;
    T* y = out.data() + static_cast<std::size_t>(pl) * out_h * out_w;
    for (int oy = 0; oy < out_h; ++oy) {
      const auto& ry = rows[oy];
      const T* r0 = x + static_cast<std::size_t>(ry.i0) * iw;
      const T* r1 = x + static_cast<std::size_t>(ry.i1) * iw;
      for (int ox = 0; ox < out_w; ++ox) {
        const auto& cx = colt[ox];
        const T top = cx.w0 * r0[cx.i0] + cx.w1 * r0[cx.i1];
        const T bot = cx.w0 * r1[cx.i0] + cx.w1 * r1[cx.i1];
        y[static_cast<std::size_t>(oy) * out_w + ox] = ry.w0 * top + ry.w1 * bot;
      }
    }
  }
  return tape.record("bilinear_upsample", {input}, std::move(out),
                     [input, rows, colt, planes, ih, iw, out_h, out_w](const Tensor<T>& g) {
                       T* dx = input.node()->grad_buffer().data();
                       for (int pl = 0; pl < planes; ++pl) {
                         T* d = dx + static_cast<std::size_t>(pl) * ih * iw;
                         const T* gy = g.data() + static_cast<std::size_t>(pl) * out_h * out_w;
                         for (int oy = 0; oy < out_h; ++oy) {
                           const auto& ry = rows[oy];
                           T* d0 = d + static_cast<std::size_t>(ry.i0) * iw;
                           T* d1 = d + static_cast<std::size_t>(ry.i1) * iw;
                           for (int ox = 0; ox < out_w; ++ox) {
                             const auto& cx = colt[ox];
                             const T v = gy[static_cast<std::size_t>(oy) * out_w + ox];
                             const T top = ry.w0 * v;
                             const T bot = ry.w1 * v;
                             d0[cx.i0] += cx.w0 * top;
                             d0[cx.i1] += cx.w1 * top;
                             d1[cx.i0] += cx.w0 * bot;
                             d1[cx.i1] += cx.w1 * bot;
                           }
                         }
                       }
                     });
}

template <typename T>
Var<T> add(Tape<T>& tape, const Var<T>& a, const Var<T>& b) {
  require_same_shape(a, b, "add");
  Tensor<T> out(a.shape());
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = a.value()[i] + b.value()[i];
  return tape.record("add", {a, b}, std::move(out), [a, b](const Tensor<T>& g) {
    for (const auto* v : {&a, &b}) {
      if (!wants(*v)) continue;
      auto& d = v->node()->grad_buffer();
      for (std::size_t i = 0; i < g.numel(); ++i) d[i] += g[i];
    }
  });
}

template <typename T>
Var<T> mul(Tape<T>& tape, const Var<T>& a, const Var<T>& b) {
  require_same_shape(a, b, "mul");
  Tensor<T> out(a.shape());
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = a.value()[i] * b.value()[i];
  return tape.record("mul", {a, b}, std::move(out), [a, b](const Tensor<T>& g) {
    if (wants(a)) {
      auto& d = a.node()->grad_buffer();
      for (std::size_t i = 0; i < g.numel(); ++i) d[i] += g[i] * b.value()[i];
    }
    if (wants(b)) {
      auto& d = b.node()->grad_buffer();
      for (std::size_t i = 0; i < g.numel(); ++i) d[i] += g[i] * a.value()[i];
    }
  });
}

template <typename T>
Var<T> scale(Tape<T>& tape, const Var<T>& a, T factor) {
  Tensor<T> out(a.shape());
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = a.value()[i] * factor;
  return tape.record("scale", {a}, std::move(out), [a, factor](const Tensor<T>& g) {
    auto& d = a.node()->grad_buffer();
    for (std::size_t i = 0; i < g.numel(); ++i) d[i] += g[i] * factor;
  });
}

template <typename T>
Var<T> reduce_sum(Tape<T>& tape, const Var<T>& a) {
  double acc = 0;
  for (T v : a.value().values()) acc += v;
  Tensor<T> out({1}, static_cast<T>(acc));
  return tape.record("reduce_sum", {a}, std::move(out), [a](const Tensor<T>& g) {
    auto& d = a.node()->grad_buffer();
    for (std::size_t i = 0; i < d.numel(); ++i) d[i] += g[0];
  });
}

template <typename T>
Var<T> reduce_mean(Tape<T>& tape, const Var<T>& a) {
  const std::size_t n = a.value().numel();
  if (n == 0) throw ShapeError("reduce_mean: empty tensor");
  double acc = 0;
  for (T v : a.value().values()) acc += v;
  Tensor<T> out({1}, static_cast<T>(acc / static_cast<double>(n)));
  return tape.record("reduce_mean", {a}, std::move(out), [a, n](const Tensor<T>& g) {
    auto& d = a.node()->grad_buffer();
    const T share = g[0] / static_cast<T>(n);
    for (std::size_t i = 0; i < d.numel(); ++i) d[i] += share;
  });
}

// ---------------------------------------------------------------------------
// Channel-wise helpers

template <typename T>
Var<T> global_average_pool(Tape<T>& tape, const Var<T>& input) {
  require_rank(input, 4, "global_average_pool", "input");
  const auto& s = input.shape();
  const std::size_t planes = static_cast<std::size_t>(s[0]) * s[1];
  const std::size_t hw = static_cast<std::size_t>(s[2]) * s[3];
  Tensor<T> out({s[0], s[1], 1, 1});
  for (std::size_t pl = 0; pl < planes; ++pl) {
    double acc = 0;
    const T* x = input.value().data() + pl * hw;
    for (std::size_t i = 0; i < hw; ++i) acc += x[i];
    out[pl] = static_cast<T>(acc / static_cast<double>(hw));
  }
  return tape.record("global_average_pool", {input}, std::move(out), [input, planes, hw](const Tensor<T>& g) {
    T* dx = input.node()->grad_buffer().data();
    for (std::size_t pl = 0; pl < planes; ++pl) {
      const T share = g[pl] / static_cast<T>(hw);
      for (std::size_t i = 0; i < hw; ++i) dx[pl * hw + i] += share;
    }
  });
}

namespace {

template <typename T>
void require_gate(const Var<T>& input, const Var<T>& gate, std::string_view op) {
  require_rank(input, 4, op, "input");
  require_rank(gate, 4, op, "gate");
  const auto& s = input.shape();
  const auto& gs = gate.shape();
  if (gs[0] != s[0] || gs[1] != s[1] || gs[2] != 1 || gs[3] != 1) {
    throw ShapeError(std::string(op) + ": gate " + shape_str(gs) + " does not fit input " + shape_str(s));
  }
}

}  // namespace

template <typename T>
Var<T> channel_scale(Tape<T>& tape, const Var<T>& input, const Var<T>& gate) {
  require_gate(input, gate, "channel_scale");
  const auto& s = input.shape();
  const std::size_t planes = static_cast<std::size_t>(s[0]) * s[1];
  const std::size_t hw = static_cast<std::size_t>(s[2]) * s[3];
  Tensor<T> out(s);
  for (std::size_t pl = 0; pl < planes; ++pl) {
    const T gv = gate.value()[pl];
    for (std::size_t i = 0; i < hw; ++i) out[pl * hw + i] = input.value()[pl * hw + i] * gv;
  }
  return tape.record("channel_scale", {input, gate}, std::move(out), [input, gate, planes, hw](const Tensor<T>& g) {
    if (wants(input)) {
      T* dx = input.node()->grad_buffer().data();
      for (std::size_t pl = 0; pl < planes; ++pl) {
        const T gv = gate.value()[pl];
        for (std::size_t i = 0; i < hw; ++i) dx[pl * hw + i] += g[pl * hw + i] * gv;
      }
    }
    if (wants(gate)) {
      auto& dg = gate.node()->grad_buffer();
      for (std::size_t pl = 0; pl < planes; ++pl) dg[pl] += dot(g.data() + pl * hw, input.value().data() + pl * hw, hw);
    }
  });
}

template <typename T>
Var<T> channel_add(Tape<T>& tape, const Var<T>& input, const Var<T>& shift) {
  require_gate(input, shift, "channel_add");
  const auto& s = input.shape();
  const std::size_t planes = static_cast<std::size_t>(s[0]) * s[1];
  const std::size_t hw = static_cast<std::size_t>(s[2]) * s[3];
  Tensor<T> out(s);
  for (std::size_t pl = 0; pl < planes; ++pl) {
    const T sv = shift.value()[pl];
    for (std::size_t i = 0; i < hw; ++i) out[pl * hw + i] = input.value()[pl * hw + i] + sv;
  }
  return tape.record("channel_add", {input, shift}, std::move(out), [input, shift, planes, hw](const Tensor<T>& g) {
    if (wants(input)) {
      T* dx = input.node()->grad_buffer().data();
      for (std::size_t i = 0; i < planes * hw; ++i) dx[i] += g[i];
    }
    if (wants(shift)) {
      auto& ds = shift.node()->grad_buffer();
      for (std::size_t pl = 0; pl < planes; ++pl) ds[pl] += sum(g.data() + pl * hw, hw);
    }
  });
}

template <typename T>
Var<T> concat_channels(Tape<T>& tape, std::span<const Var<T>> inputs) {
  if (inputs.empty()) throw ShapeError("concat_channels: no inputs");
  for (const auto& in : inputs) require_rank(in, 4, "concat_channels", "input");
  const auto& s0 = inputs[0].shape();
  int channels = 0;
  std::vector<int> offsets;
  for (const auto& in : inputs) {
    const auto& s = in.shape();
    if (s[0] != s0[0] || s[2] != s0[2] || s[3] != s0[3]) {
      throw ShapeError("concat_channels: " + shape_str(s) + " incompatible with " + shape_str(s0));
    }
    offsets.push_back(channels);
    channels += s[1];
  }
  const int N = s0[0];
  const std::size_t hw = static_cast<std::size_t>(s0[2]) * s0[3];
  Tensor<T> out({N, channels, s0[2], s0[3]});
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    const int ck = inputs[k].shape()[1];
    for (int n = 0; n < N; ++n) {
      const T* src = inputs[k].value().data() + static_cast<std::size_t>(n) * ck * hw;
      T* dst = out.data() + (static_cast<std::size_t>(n) * channels + offsets[k]) * hw;
      std::copy(src, src + ck * hw, dst);
    }
  }
  std::vector<Var<T>> kept(inputs.begin(), inputs.end());
  return tape.record("concat_channels", inputs, std::move(out), [kept, offsets, channels, N, hw](const Tensor<T>& g) {
    for (std::size_t k = 0; k < kept.size(); ++k) {
      if (!wants(kept[k])) continue;
      const int ck = kept[k].shape()[1];
      T* d = kept[k].node()->grad_buffer().data();
      for (int n = 0; n < N; ++n) {
        const T* src = g.data() + (static_cast<std::size_t>(n) * channels + offsets[k]) * hw;
        T* dst = d + static_cast<std::size_t>(n) * ck * hw;
        for (std::size_t i = 0; i < ck * hw; ++i) dst[i] += src[i];
      }
    }
  });
}

// ---------------------------------------------------------------------------
// Batch normalization

template <typename T>
Var<T> batch_norm_train(Tape<T>& tape, const Var<T>& input, const Var<T>& gamma, const Var<T>& beta, T eps,
                        Tensor<T>* batch_mean, Tensor<T>* batch_var) {
  require_rank(input, 4, "batch_norm_train", "input");
  const auto& s = input.shape();
  const int N = s[0], C = s[1];
  const std::size_t hw = static_cast<std::size_t>(s[2]) * s[3];
  if (gamma.value().numel() != static_cast<std::size_t>(C) || beta.value().numel() != static_cast<std::size_t>(C)) {
    throw ShapeError("batch_norm_train: affine parameters do not match " + std::to_string(C) + " channels");
  }
  const double m = static_cast<double>(N) * hw;
  auto xhat = std::make_shared<Tensor<T>>(s);
  std::vector<T> invstd(C);
  Tensor<T> out(s);
  if (batch_mean) *batch_mean = Tensor<T>({C});
  if (batch_var) *batch_var = Tensor<T>({C});
  const T* x = input.value().data();
  for (int c = 0; c < C; ++c) {
    double acc = 0;
    for (int n = 0; n < N; ++n) {
      const T* p = x + (static_cast<std::size_t>(n) * C + c) * hw;
      for (std::size_t i = 0; i < hw; ++i) acc += p[i];
    }
    const double mean = acc / m;
    double sq = 0;
    for (int n = 0; n < N; ++n) {
      const T* p = x + (static_cast<std::size_t>(n) * C + c) * hw;
      for (std::size_t i = 0; i < hw; ++i) {
        const double d = p[i] - mean;
        sq += d * d;
      }
    }
    const double var = sq / m;
    const double inv = 1.0 / std::sqrt(var + static_cast<double>(eps));
    invstd[c] = static_cast<T>(inv);
    if (batch_mean) (*batch_mean)[c] = static_cast<T>(mean);
    if (batch_var) (*batch_var)[c] = static_cast<T>(var);
    const T gm = gamma.value()[c];
    const T bt = beta.value()[c];
    for (int n = 0; n < N; ++n) {
      const std::size_t off = (static_cast<std::size_t>(n) * C + c) * hw;
      for (std::size_t i = 0; i < hw; ++i) {
        const T xh = static_cast<T>((x[off + i] - mean) * inv);
        (*xhat)[off + i] = xh;
        out[off + i] = gm * xh + bt;
      }
    }
  }
  return tape.record("batch_norm_train", {input, gamma, beta}, std::move(out),
                     [input, gamma, beta, xhat, invstd, N, C, hw, m](const Tensor<T>& g) {
                       for (int c = 0; c < C; ++c) {
                         double sum_g = 0, sum_gx = 0;
                         for (int n = 0; n < N; ++n) {
                           const std::size_t off = (static_cast<std::size_t>(n) * C + c) * hw;
                           for (std::size_t i = 0; i < hw; ++i) {
                             sum_g += g[off + i];
                             sum_gx += static_cast<double>(g[off + i]) * (*xhat)[off + i];
                           }
                         }
                         if (wants(gamma)) gamma.node()->grad_buffer()[c] += static_cast<T>(sum_gx);
                         if (wants(beta)) beta.node()->grad_buffer()[c] += static_cast<T>(sum_g);
                         if (!wants(input)) continue;
                         T* dx = input.node()->grad_buffer().data();
                         const double k = static_cast<double>(gamma.value()[c]) * invstd[c] / m;
                         for (int n = 0; n < N; ++n) {
                           const std::size_t off = (static_cast<std::size_t>(n) * C + c) * hw;
                           for (std::size_t i = 0; i < hw; ++i) {
                             dx[off + i] += static_cast<T>(k * (m * g[off + i] - sum_g - (*xhat)[off + i] * sum_gx));
                           }
                         }
                       }
                     });
}

template <typename T>
Var<T> batch_norm_eval(Tape<T>& tape, const Var<T>& input, const Var<T>& gamma, const Var<T>& beta,
                       const Tensor<T>& running_mean, const Tensor<T>& running_var, T eps) {
  require_rank(input, 4, "batch_norm_eval", "input");
  const auto& s = input.shape();
  const int N = s[0], C = s[1];
  const std::size_t hw = static_cast<std::size_t>(s[2]) * s[3];
  const auto c_sz = static_cast<std::size_t>(C);
  if (gamma.value().numel() != c_sz || beta.value().numel() != c_sz || running_mean.numel() != c_sz ||
      running_var.numel() != c_sz) {
    throw ShapeError("batch_norm_eval: statistics do not match " + std::to_string(C) + " channels");
  }
  std::vector<T> invstd(C);
  for (int c = 0; c < C; ++c) invstd[c] = T{1} / std::sqrt(running_var[c] + eps);
  Tensor<T> out(s);
  for (int n = 0; n < N; ++n) {
    for (int c = 0; c < C; ++c) {
      const std::size_t off = (static_cast<std::size_t>(n) * C + c) * hw;
      const T mu = running_mean[c], is = invstd[c], gm = gamma.value()[c], bt = beta.value()[c];
      for (std::size_t i = 0; i < hw; ++i) out[off + i] = (input.value()[off + i] - mu) * is * gm + bt;
    }
  }
  Tensor<T> mean = running_mean;
  return tape.record("batch_norm_eval", {input, gamma, beta}, std::move(out),
                     [input, gamma, beta, mean, invstd, N, C, hw](const Tensor<T>& g) {
                       for (int c = 0; c < C; ++c) {
                         T sum_g{0}, sum_gx{0};
                         const T gm = gamma.value()[c];
                         for (int n = 0; n < N; ++n) {
                           const std::size_t off = (static_cast<std::size_t>(n) * C + c) * hw;
                           for (std::size_t i = 0; i < hw; ++i) {
                             sum_g += g[off + i];
                             sum_gx += g[off + i] * (input.value()[off + i] - mean[c]) * invstd[c];
                             if (wants(input)) input.node()->grad_buffer()[off + i] += g[off + i] * invstd[c] * gm;
                           }
                         }
                         if (wants(gamma)) gamma.node()->grad_buffer()[c] += sum_gx;
                         if (wants(beta)) beta.node()->grad_buffer()[c] += sum_g;
                       }
                     });
}

// ---------------------------------------------------------------------------
// Loss primitives

template <typename T>
Var<T> bce_with_logits(Tape<T>& tape, const Var<T>& logits, T target, Reduction reduction) {
  const auto& x = logits.value();
  const std::size_t n = x.numel();
  if (n == 0) throw ShapeError("bce_with_logits: empty logits");
  if (!x.all_finite()) throw NumericError("bce_with_logits: non-finite logits");
  double acc = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const double v = x[i];
    acc += std::max(v, 0.0) - v * target + std::log1p(std::exp(-std::abs(v)));
  }
  const double denom = reduction == Reduction::Mean ? static_cast<double>(n) : 1.0;
  Tensor<T> out({1}, static_cast<T>(acc / denom));
  return tape.record("bce_with_logits", {logits}, std::move(out), [logits, target, denom](const Tensor<T>& g) {
    const auto& x = logits.value();
    auto& dx = logits.node()->grad_buffer();
    const T k = static_cast<T>(g[0] / denom);
    for (std::size_t i = 0; i < x.numel(); ++i) dx[i] += (stable_sigmoid(x[i]) - target) * k;
  });
}

namespace {

template <typename T>
void check_labels(const Var<T>& scores, const LabelMask& labels, std::string_view op) {
  require_rank(scores, 4, op, "scores");
  const auto& s = scores.shape();
  if (labels.shape() != Shape{s[0], s[2], s[3]}) {
    throw ShapeError(std::string(op) + ": labels " + shape_str(labels.shape()) + " do not match " + shape_str(s));
  }
  for (auto v : labels.values()) {
    if (v != kIgnoreLabel && v >= s[1]) {
      throw Error(std::string(op) + ": label " + std::to_string(v) + " outside [0," + std::to_string(s[1]) + ")");
    }
  }
}

}  // namespace

template <typename T>
Var<T> nll_probs(Tape<T>& tape, const Var<T>& probs, const LabelMask& labels, Reduction reduction) {
  check_labels(probs, labels, "nll_probs");
  const std::size_t scored = count_scored(labels);
  if (scored == 0) throw Error("nll_probs: every pixel is ignored");
  const auto& s = probs.shape();
  const int N = s[0], C = s[1];
  const std::size_t hw = static_cast<std::size_t>(s[2]) * s[3];
  double acc = 0;
  for (int n = 0; n < N; ++n) {
    for (std::size_t p = 0; p < hw; ++p) {
      const auto lbl = labels[static_cast<std::size_t>(n) * hw + p];
      if (lbl == kIgnoreLabel) continue;
      acc -= std::log(static_cast<double>(probs.value()[(static_cast<std::size_t>(n) * C + lbl) * hw + p]));
    }
  }
  const double denom = reduction == Reduction::Mean ? static_cast<double>(scored) : 1.0;
  Tensor<T> out({1}, static_cast<T>(acc / denom));
  return tape.record("nll_probs", {probs}, std::move(out), [probs, labels, denom, N, C, hw](const Tensor<T>& g) {
    auto& dx = probs.node()->grad_buffer();
    for (int n = 0; n < N; ++n) {
      for (std::size_t p = 0; p < hw; ++p) {
        const auto lbl = labels[static_cast<std::size_t>(n) * hw + p];
        if (lbl == kIgnoreLabel) continue;
        const std::size_t i = (static_cast<std::size_t>(n) * C + lbl) * hw + p;
        dx[i] -= static_cast<T>(g[0] / (denom * probs.value()[i]));
      }
    }
  });
}

template <typename T>
Var<T> softmax_cross_entropy(Tape<T>& tape, const Var<T>& logits, const LabelMask& labels, Reduction reduction) {
  check_labels(logits, labels, "softmax_cross_entropy");
  const std::size_t scored = count_scored(labels);
  if (scored == 0) throw Error("softmax_cross_entropy: every pixel is ignored");
  const auto& s = logits.shape();
  const int N = s[0], C = s[1];
  const std::size_t hw = static_cast<std::size_t>(s[2]) * s[3];
  const T* x = logits.value().data();
  double acc = 0;
  for (int n = 0; n < N; ++n) {
    const std::size_t base = static_cast<std::size_t>(n) * C * hw;
    for (std::size_t p = 0; p < hw; ++p) {
      const auto lbl = labels[static_cast<std::size_t>(n) * hw + p];
      if (lbl == kIgnoreLabel) continue;
      double m = x[base + p];
      for (int c = 1; c < C; ++c) m = std::max(m, static_cast<double>(x[base + c * hw + p]));
      double z = 0;
      for (int c = 0; c < C; ++c) z += std::exp(x[base + c * hw + p] - m);
      acc += m + std::log(z) - x[base + lbl * hw + p];
    }
  }
  const double denom = reduction == Reduction::Mean ? static_cast<double>(scored) : 1.0;
  Tensor<T> out({1}, static_cast<T>(acc / denom));
  return tape.record("softmax_cross_entropy", {logits}, std::move(out),
                     [logits, labels, denom, N, C, hw](const Tensor<T>& g) {
                       const T* x = logits.value().data();
                       T* dx = logits.node()->grad_buffer().data();
                       const double k = g[0] / denom;
                       for (int n = 0; n < N; ++n) {
                         const std::size_t base = static_cast<std::size_t>(n) * C * hw;
                         for (std::size_t p = 0; p < hw; ++p) {
                           const auto lbl = labels[static_cast<std::size_t>(n) * hw + p];
                           if (lbl == kIgnoreLabel) continue;
                           double m = x[base + p];
                           for (int c = 1; c < C; ++c) m = std::max(m, static_cast<double>(x[base + c * hw + p]));
                           double z = 0;
                           for (int c = 0; c < C; ++c) z += std::exp(x[base + c * hw + p] - m);
                           for (int c = 0; c < C; ++c) {
                             const double prob = std::exp(x[base + c * hw + p] - m) / z;
                             dx[base + c * hw + p] += static_cast<T>(k * (prob - (c == lbl ? 1.0 : 0.0)));
                           }
                         }
                       }
                     });
}

// ---------------------------------------------------------------------------

#define RTDA_INSTANTIATE(T)                                                                                         \
  template class Tape<T>;                                                                                           \
  template Var<T> conv2d(Tape<T>&, const Var<T>&, const Var<T>&, const Var<T>&, int, int);                          \
  template Var<T> depthwise_conv2d(Tape<T>&, const Var<T>&, const Var<T>&, const Var<T>&, int, int);                \
  template Var<T> leaky_relu(Tape<T>&, const Var<T>&, T);                                                           \
  template Var<T> relu(Tape<T>&, const Var<T>&);                                                                    \
  template Var<T> sigmoid(Tape<T>&, const Var<T>&);                                                                 \
  template Var<T> log(Tape<T>&, const Var<T>&);                                                                     \
  template Var<T> softmax_channels(Tape<T>&, const Var<T>&);                                                        \
  template Var<T> bilinear_upsample(Tape<T>&, const Var<T>&, int, int);                                             \
  template Var<T> add(Tape<T>&, const Var<T>&, const Var<T>&);                                                      \
  template Var<T> mul(Tape<T>&, const Var<T>&, const Var<T>&);                                                      \
  template Var<T> scale(Tape<T>&, const Var<T>&, T);                                                                \
  template Var<T> reduce_sum(Tape<T>&, const Var<T>&);                                                              \
  template Var<T> reduce_mean(Tape<T>&, const Var<T>&);                                                             \
  template Var<T> global_average_pool(Tape<T>&, const Var<T>&);                                                     \
  template Var<T> channel_scale(Tape<T>&, const Var<T>&, const Var<T>&);                                            \
  template Var<T> channel_add(Tape<T>&, const Var<T>&, const Var<T>&);                                              \
  template Var<T> concat_channels(Tape<T>&, std::span<const Var<T>>);                                               \
  template Var<T> batch_norm_train(Tape<T>&, const Var<T>&, const Var<T>&, const Var<T>&, T, Tensor<T>*,            \
                                   Tensor<T>*);                                                                     \
  template Var<T> batch_norm_eval(Tape<T>&, const Var<T>&, const Var<T>&, const Var<T>&, const Tensor<T>&,          \
                                  const Tensor<T>&, T);                                                             \
  template Var<T> bce_with_logits(Tape<T>&, const Var<T>&, T, Reduction);                                           \
  template Var<T> nll_probs(Tape<T>&, const Var<T>&, const LabelMask&, Reduction);                                  \
  template Var<T> softmax_cross_entropy(Tape<T>&, const Var<T>&, const LabelMask&, Reduction);

RTDA_INSTANTIATE(float)
RTDA_INSTANTIATE(double)

#undef RTDA_INSTANTIATE

}  // namespace rtda
