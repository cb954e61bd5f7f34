#include "sqz/ops.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>

namespace sqz {
namespace {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapMat = Eigen::Map<RowMat<T>>;
template <typename T>
using ConstMapMat = Eigen::Map<const RowMat<T>>;

struct ConvGeometry {
  std::size_t batch, channels, height, width;
  std::size_t filters, kernel_h, kernel_w;
  int stride, pad;
  std::size_t out_h, out_w;

  std::size_t patch() const { return channels * kernel_h * kernel_w; }
  std::size_t out_plane() const { return out_h * out_w; }
  std::size_t in_plane() const { return height * width; }
  bool pointwise() const { return kernel_h == 1 && kernel_w == 1 && stride == 1 && pad == 0; }
};

template <typename T>
void im2col(const T* x, const ConvGeometry& g, T* col) {
  const auto H = static_cast<long>(g.height);
  const auto W = static_cast<long>(g.width);
  for (std::size_t c = 0; c < g.channels; ++c) {
    const T* plane = x + c * g.in_plane();
    for (std::size_t ki = 0; ki < g.kernel_h; ++ki) {
      for (std::size_t kj = 0; kj < g.kernel_w; ++kj) {
        T* row = col + ((c * g.kernel_h + ki) * g.kernel_w + kj) * g.out_plane();
        for (std::size_t oh = 0; oh < g.out_h; ++oh) {
          const long ih = static_cast<long>(oh) * g.stride - g.pad + static_cast<long>(ki);
          T* out = row + oh * g.out_w;
          if (ih < 0 || ih >= H) {
            std::fill(out, out + g.out_w, T(0));
            continue;
          }
          const T* src = plane + ih * W;
          for (std::size_t ow = 0; ow < g.out_w; ++ow) {
            const long iw = static_cast<long>(ow) * g.stride - g.pad + static_cast<long>(kj);
            out[ow] = (iw < 0 || iw >= W) ? T(0) : src[iw];
          }
        }
      }
    }
  }
}

template <typename T>
void col2im_add(const T* col, const ConvGeometry& g, T* dx) {
  const auto H = static_cast<long>(g.height);
  const auto W = static_cast<long>(g.width);
  for (std::size_t c = 0; c < g.channels; ++c) {
    T* plane = dx + c * g.in_plane();
    for (std::size_t ki = 0; ki < g.kernel_h; ++ki) {
      for (std::size_t kj = 0; kj < g.kernel_w; ++kj) {
        const T* row = col + ((c * g.kernel_h + ki) * g.kernel_w + kj) * g.out_plane();
        for (std::size_t oh = 0; oh < g.out_h; ++oh) {
          const long ih = static_cast<long>(oh) * g.stride - g.pad + static_cast<long>(ki);
          if (ih < 0 || ih >= H) continue;
          T* dst = plane + ih * W;
          const T* in = row + oh * g.out_w;
          for (std::size_t ow = 0; ow < g.out_w; ++ow) {
            const long iw = static_cast<long>(ow) * g.stride - g.pad + static_cast<long>(kj);
            if (iw >= 0 && iw < W) dst[iw] += in[ow];
          }
        }
      }
    }
  }
}

// Collapses everything after axis 1 into one "spatial" extent.
struct ChannelLayout {
  std::size_t batch, channels, spatial;
};

template <typename T>
ChannelLayout channel_layout(const BasicTensor<T>& t, const char* op) {
  if (t.rank() < 2) {
    throw ShapeError(std::string(op) + ": expected rank >= 2, got " + shape_str(t.shape()));
  }
  return {t.dim(0), t.dim(1), t.size() / (t.dim(0) * t.dim(1))};
}

}  // namespace

template <typename T>
Var<T> conv2d(Var<T> input, Var<T> weights, Var<T> bias, const Conv2dOptions& options) {
  const auto& x = input.value();
  const auto& w = weights.value();
  const auto& b = bias.value();
  if (x.rank() != 4 || w.rank() != 4) {
    throw ShapeError(options.name + ": conv2d expects NCHW input and [F,C,kH,kW] weights, got " +
                     shape_str(x.shape()) + " and " + shape_str(w.shape()));
  }
  if (w.dim(1) != x.dim(1)) {
    throw ShapeError(options.name + ": expected " + std::to_string(w.dim(1)) +
                     " input channels, got " + std::to_string(x.dim(1)));
  }
  if (b.size() != w.dim(0)) {
    throw ShapeError(options.name + ": bias has " + std::to_string(b.size()) + " entries for " +
                     std::to_string(w.dim(0)) + " filters");
  }
  if (options.stride < 1 || options.pad < 0) {
    throw ShapeError(options.name + ": stride must be >= 1 and pad >= 0");
  }
  ConvGeometry g{x.dim(0), x.dim(1), x.dim(2), x.dim(3), w.dim(0), w.dim(2), w.dim(3),
                 options.stride, options.pad, 0, 0};
  const long span_h = static_cast<long>(g.height) + 2L * g.pad - static_cast<long>(g.kernel_h);
  const long span_w = static_cast<long>(g.width) + 2L * g.pad - static_cast<long>(g.kernel_w);
  if (span_h < 0 || span_w < 0) {
    throw ShapeError(options.name + ": kernel larger than padded input " + shape_str(x.shape()));
  }
  g.out_h = static_cast<std::size_t>(span_h / g.stride + 1);
  g.out_w = static_cast<std::size_t>(span_w / g.stride + 1);

  BasicTensor<T> y(Shape{g.batch, g.filters, g.out_h, g.out_w});
  AlignedVector<T> col(g.pointwise() ? 0 : g.patch() * g.out_plane());
  ConstMapMat<T> wm(w.data(), static_cast<long>(g.filters), static_cast<long>(g.patch()));
  for (std::size_t n = 0; n < g.batch; ++n) {
    const T* xn = x.data() + n * g.channels * g.in_plane();
    const T* colp = xn;
    if (!g.pointwise()) {
      im2col(xn, g, col.data());
      colp = col.data();
    }
    ConstMapMat<T> cm(colp, static_cast<long>(g.patch()), static_cast<long>(g.out_plane()));
    MapMat<T> ym(y.data() + n * g.filters * g.out_plane(), static_cast<long>(g.filters),
                 static_cast<long>(g.out_plane()));
    ym.noalias() = wm * cm;
    for (std::size_t f = 0; f < g.filters; ++f) ym.row(static_cast<long>(f)).array() += b[f];
  }

  const std::size_t xid = input.id(), wid = weights.id(), bid = bias.id();
  return input.tape().record(
      "conv2d", std::move(y), {input, weights, bias}, [g, xid, wid, bid](Tape<T>& tape, std::size_t self) {
        const auto& dy = tape.grad(self);
        const auto& xv = tape.value(xid);
        const auto& wv = tape.value(wid);
        const bool need_x = tape.requires_grad(xid);
        const bool need_w = tape.requires_grad(wid);
        const bool need_b = tape.requires_grad(bid);
        AlignedVector<T> col(g.pointwise() ? 0 : g.patch() * g.out_plane());
        AlignedVector<T> dcol(g.patch() * g.out_plane());
        ConstMapMat<T> wm(wv.data(), static_cast<long>(g.filters), static_cast<long>(g.patch()));
        for (std::size_t n = 0; n < g.batch; ++n) {
          ConstMapMat<T> dym(dy.data() + n * g.filters * g.out_plane(),
                             static_cast<long>(g.filters), static_cast<long>(g.out_plane()));
          if (need_w) {
            const T* xn = xv.data() + n * g.channels * g.in_plane();
            const T* colp = xn;
            if (!g.pointwise()) {
              im2col(xn, g, col.data());
              colp = col.data();
            }
            ConstMapMat<T> cm(colp, static_cast<long>(g.patch()), static_cast<long>(g.out_plane()));
            MapMat<T> dwm(tape.grad_accumulator(wid).data(), static_cast<long>(g.filters),
                          static_cast<long>(g.patch()));
            dwm.noalias() += dym * cm.transpose();
          }
          if (need_b) {
            auto& db = tape.grad_accumulator(bid);
            for (std::size_t f = 0; f < g.filters; ++f) db[f] += dym.row(static_cast<long>(f)).sum();
          }
          if (need_x) {
            T* dxn = tape.grad_accumulator(xid).data() + n * g.channels * g.in_plane();
            if (g.pointwise()) {
              MapMat<T> dxm(dxn, static_cast<long>(g.channels), static_cast<long>(g.in_plane()));
              dxm.noalias() += wm.transpose() * dym;
            } else {
              MapMat<T> dcm(dcol.data(), static_cast<long>(g.patch()), static_cast<long>(g.out_plane()));
              dcm.noalias() = wm.transpose() * dym;
              col2im_add(dcol.data(), g, dxn);
            }
          }
        }
      });
}

template <typename T>
Var<T> batch_norm(Var<T> input, Var<T> gamma, Var<T> beta, BasicTensor<T>& running_mean,
                  BasicTensor<T>& running_var, const BatchNormOptions& options) {
  const auto& x = input.value();
  const ChannelLayout l = channel_layout(x, "batch_norm");
  const auto& gv = gamma.value();
  const auto& bv = beta.value();
  if (gv.size() != l.channels || bv.size() != l.channels || running_mean.size() != l.channels ||
      running_var.size() != l.channels) {
    throw ShapeError(options.name + ": expected " + std::to_string(gv.size()) +
                     " channels, got " + std::to_string(l.channels));
  }
  if (!(options.epsilon > 0)) throw ShapeError(options.name + ": epsilon must be positive");
  const bool train = options.mode == NormMode::kTrain;
  const double count = static_cast<double>(l.batch * l.spatial);

  std::vector<double> mean(l.channels), inv_std(l.channels);
  for (std::size_t c = 0; c < l.channels; ++c) {
    if (train) {
      double s = 0;
      for (std::size_t n = 0; n < l.batch; ++n) {
        const T* p = x.data() + (n * l.channels + c) * l.spatial;
        for (std::size_t i = 0; i < l.spatial; ++i) s += p[i];
      }
      const double m = s / count;
      double v = 0;
      for (std::size_t n = 0; n < l.batch; ++n) {
        const T* p = x.data() + (n * l.channels + c) * l.spatial;
        for (std::size_t i = 0; i < l.spatial; ++i) {
          const double d = p[i] - m;
          v += d * d;
        }
      }
      v /= count;
      mean[c] = m;
      inv_std[c] = 1.0 / std::sqrt(v + options.epsilon);
      if (options.update_running_stats) {
        running_mean[c] = static_cast<T>((1.0 - options.momentum) * running_mean[c] + options.momentum * m);
        running_var[c] = static_cast<T>((1.0 - options.momentum) * running_var[c] + options.momentum * v);
      }
    } else {
      mean[c] = running_mean[c];
      inv_std[c] = 1.0 / std::sqrt(static_cast<double>(running_var[c]) + options.epsilon);
    }
  }

  BasicTensor<T> y(x.shape());
  for (std::size_t n = 0; n < l.batch; ++n) {
    for (std::size_t c = 0; c < l.channels; ++c) {
      const std::size_t off = (n * l.channels + c) * l.spatial;
      const T m = static_cast<T>(mean[c]);
      const T is = static_cast<T>(inv_std[c]);
      const T gc = gv[c], bc = bv[c];
      for (std::size_t i = 0; i < l.spatial; ++i) y[off + i] = gc * ((x[off + i] - m) * is) + bc;
    }
  }

  const std::size_t xid = input.id(), gid = gamma.id(), bid = beta.id();
  return input.tape().record(
      "batch_norm", std::move(y), {input, gamma, beta},
      [l, train, count, mean = std::move(mean), inv_std = std::move(inv_std), xid, gid, bid](
          Tape<T>& tape, std::size_t self) {
        const auto& dy = tape.grad(self);
        const auto& xv = tape.value(xid);
        const auto& gv = tape.value(gid);
        const bool need_x = tape.requires_grad(xid);
        for (std::size_t c = 0; c < l.channels; ++c) {
          const T m = static_cast<T>(mean[c]);
          const T is = static_cast<T>(inv_std[c]);
          double sum_dy = 0, sum_dy_xhat = 0;
          for (std::size_t n = 0; n < l.batch; ++n) {
            const std::size_t off = (n * l.channels + c) * l.spatial;
            for (std::size_t i = 0; i < l.spatial; ++i) {
              const T xhat = (xv[off + i] - m) * is;
              sum_dy += dy[off + i];
              sum_dy_xhat += static_cast<double>(dy[off + i]) * xhat;
            }
          }
          if (tape.requires_grad(gid)) tape.grad_accumulator(gid)[c] += static_cast<T>(sum_dy_xhat);
          if (tape.requires_grad(bid)) tape.grad_accumulator(bid)[c] += static_cast<T>(sum_dy);
          if (!need_x) continue;
          auto& dx = tape.grad_accumulator(xid);
          const T gc = gv[c];
          if (train) {
            const T scale = static_cast<T>(gc * inv_std[c] / count);
            const T sdy = static_cast<T>(sum_dy);
            const T sdy_xhat = static_cast<T>(sum_dy_xhat);
            const T cnt = static_cast<T>(count);
            for (std::size_t n = 0; n < l.batch; ++n) {
              const std::size_t off = (n * l.channels + c) * l.spatial;
              for (std::size_t i = 0; i < l.spatial; ++i) {
                const T xhat = (xv[off + i] - m) * is;
                dx[off + i] += scale * (cnt * dy[off + i] - sdy - xhat * sdy_xhat);
              }
            }
          } else {
            const T scale = gc * is;
            for (std::size_t n = 0; n < l.batch; ++n) {
              const std::size_t off = (n * l.channels + c) * l.spatial;
              for (std::size_t i = 0; i < l.spatial; ++i) dx[off + i] += scale * dy[off + i];
            }
          }
        }
      });
}

template <typename T>
Var<T> relu(Var<T> input) {
  const auto& x = input.value();
  BasicTensor<T> y(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = x[i] > T(0) ? x[i] : T(0);
  const std::size_t xid = input.id();
  return input.tape().record("relu", std::move(y), {input}, [xid](Tape<T>& tape, std::size_t self) {
    const auto& dy = tape.grad(self);
    const auto& yv = tape.value(self);
    auto& dx = tape.grad_accumulator(xid);
    for (std::size_t i = 0; i < dy.size(); ++i) {
      if (yv[i] > T(0)) dx[i] += dy[i];
    }
  });
}

template <typename T>
Var<T> max_pool(Var<T> input, int kernel, int stride) {
  const auto& x = input.value();
  if (x.rank() != 4) throw ShapeError("max_pool expects NCHW input, got " + shape_str(x.shape()));
  if (kernel < 1 || stride < 1) throw ShapeError("max_pool kernel and stride must be >= 1");
  const std::size_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const auto k = static_cast<std::size_t>(kernel), s = static_cast<std::size_t>(stride);
  if (H < k || W < k) throw ShapeError("max_pool kernel larger than input " + shape_str(x.shape()));
  const std::size_t OH = (H - k) / s + 1, OW = (W - k) / s + 1;
  BasicTensor<T> y(Shape{N, C, OH, OW});
  std::vector<std::uint32_t> argmax(y.size());
  for (std::size_t nc = 0; nc < N * C; ++nc) {
    const T* plane = x.data() + nc * H * W;
    for (std::size_t oh = 0; oh < OH; ++oh) {
      for (std::size_t ow = 0; ow < OW; ++ow) {
        std::size_t best = (oh * s) * W + ow * s;
        for (std::size_t i = 0; i < k; ++i) {
          for (std::size_t j = 0; j < k; ++j) {
            const std::size_t idx = (oh * s + i) * W + ow * s + j;
            if (plane[idx] > plane[best]) best = idx;
          }
        }
        const std::size_t o = nc * OH * OW + oh * OW + ow;
        y[o] = plane[best];
        argmax[o] = static_cast<std::uint32_t>(nc * H * W + best);
      }
    }
  }
  const std::size_t xid = input.id();
  return input.tape().record("max_pool", std::move(y), {input},
                             [xid, argmax = std::move(argmax)](Tape<T>& tape, std::size_t self) {
                               const auto& dy = tape.grad(self);
                               auto& dx = tape.grad_accumulator(xid);
                               for (std::size_t o = 0; o < dy.size(); ++o) dx[argmax[o]] += dy[o];
                             });
}

template <typename T>
Var<T> global_avg_pool(Var<T> input) {
  const auto& x = input.value();
  if (x.rank() != 4) throw ShapeError("global_avg_pool expects NCHW input, got " + shape_str(x.shape()));
  const std::size_t N = x.dim(0), C = x.dim(1), S = x.dim(2) * x.dim(3);
  BasicTensor<T> y(Shape{N, C});
  for (std::size_t nc = 0; nc < N * C; ++nc) {
    double s = 0;
    const T* p = x.data() + nc * S;
    for (std::size_t i = 0; i < S; ++i) s += p[i];
    y[nc] = static_cast<T>(s / static_cast<double>(S));
  }
  const std::size_t xid = input.id();
  return input.tape().record("global_avg_pool", std::move(y), {input},
                             [xid, S](Tape<T>& tape, std::size_t self) {
                               const auto& dy = tape.grad(self);
                               auto& dx = tape.grad_accumulator(xid);
                               const T inv = T(1) / static_cast<T>(S);
                               for (std::size_t nc = 0; nc < dy.size(); ++nc) {
                                 const T g = dy[nc] * inv;
                                 T* p = dx.data() + nc * S;
                                 for (std::size_t i = 0; i < S; ++i) p[i] += g;
                               }
                             });
}

template <typename T>
Var<T> concat_channels(const std::vector<Var<T>>& inputs) {
  if (inputs.empty()) throw ShapeError("concat_channels needs at least one input");
  const auto& first = inputs.front().value();
  const ChannelLayout l0 = channel_layout(first, "concat_channels");
  std::size_t total = 0;
  for (const auto& in : inputs) {
    const auto& v = in.value();
    const ChannelLayout l = channel_layout(v, "concat_channels");
    bool same_tail = v.rank() == first.rank();
    for (std::size_t a = 2; same_tail && a < v.rank(); ++a) same_tail = v.dim(a) == first.dim(a);
    if (l.batch != l0.batch || !same_tail) {
      throw ShapeError("concat_channels: incompatible shapes " + shape_str(first.shape()) + " and " +
                       shape_str(v.shape()));
    }
    total += l.channels;
  }
  Shape out_shape = first.shape();
  out_shape[1] = total;
  BasicTensor<T> y(out_shape);
  std::vector<std::size_t> ids, widths;
  std::size_t offset = 0;
  for (const auto& in : inputs) {
    const auto& v = in.value();
    const std::size_t block = v.dim(1) * l0.spatial;
    for (std::size_t n = 0; n < l0.batch; ++n) {
      std::copy_n(v.data() + n * block, block, y.data() + (n * total * l0.spatial) + offset * l0.spatial);
    }
    offset += v.dim(1);
    ids.push_back(in.id());
    widths.push_back(v.dim(1));
  }
  return inputs.front().tape().record(
      "concat_channels", std::move(y), inputs,
      [ids = std::move(ids), widths = std::move(widths), total, l0](Tape<T>& tape, std::size_t self) {
        const auto& dy = tape.grad(self);
        std::size_t offset = 0;
        for (std::size_t k = 0; k < ids.size(); ++k) {
          if (tape.requires_grad(ids[k])) {
            auto& dx = tape.grad_accumulator(ids[k]);
            const std::size_t block = widths[k] * l0.spatial;
            for (std::size_t n = 0; n < l0.batch; ++n) {
              const T* src = dy.data() + n * total * l0.spatial + offset * l0.spatial;
              T* dst = dx.data() + n * block;
              for (std::size_t i = 0; i < block; ++i) dst[i] += src[i];
            }
          }
          offset += widths[k];
        }
      });
}

template <typename T>
Var<T> slice_channels(Var<T> input, std::size_t begin, std::size_t end) {
  const auto& x = input.value();
  const ChannelLayout l = channel_layout(x, "slice_channels");
  if (begin >= end || end > l.channels) {
    throw ShapeError("slice_channels: invalid range [" + std::to_string(begin) + ", " +
                     std::to_string(end) + ") for " + std::to_string(l.channels) + " channels");
  }
  Shape out_shape = x.shape();
  out_shape[1] = end - begin;
  BasicTensor<T> y(out_shape);
  const std::size_t block = (end - begin) * l.spatial;
  for (std::size_t n = 0; n < l.batch; ++n) {
    std::copy_n(x.data() + (n * l.channels + begin) * l.spatial, block, y.data() + n * block);
  }
  const std::size_t xid = input.id();
  return input.tape().record("slice_channels", std::move(y), {input},
                             [xid, l, begin, block](Tape<T>& tape, std::size_t self) {
                               const auto& dy = tape.grad(self);
                               auto& dx = tape.grad_accumulator(xid);
                               for (std::size_t n = 0; n < l.batch; ++n) {
                                 T* dst = dx.data() + (n * l.channels + begin) * l.spatial;
                                 const T* src = dy.data() + n * block;
                                 for (std::size_t i = 0; i < block; ++i) dst[i] += src[i];
                               }
                             });
}

template <typename T>
Var<T> scale_channels(Var<T> input, std::vector<T> scale) {
  const auto& x = input.value();
  const ChannelLayout l = channel_layout(x, "scale_channels");
  if (scale.size() != l.channels) {
    throw ShapeError("scale_channels: " + std::to_string(scale.size()) + " factors for " +
                     std::to_string(l.channels) + " channels");
  }
  BasicTensor<T> y(x.shape());
  for (std::size_t n = 0; n < l.batch; ++n) {
    for (std::size_t c = 0; c < l.channels; ++c) {
      const std::size_t off = (n * l.channels + c) * l.spatial;
      for (std::size_t i = 0; i < l.spatial; ++i) y[off + i] = x[off + i] * scale[c];
    }
  }
  const std::size_t xid = input.id();
  return input.tape().record("scale_channels", std::move(y), {input},
                             [xid, l, scale = std::move(scale)](Tape<T>& tape, std::size_t self) {
                               const auto& dy = tape.grad(self);
                               auto& dx = tape.grad_accumulator(xid);
                               for (std::size_t n = 0; n < l.batch; ++n) {
                                 for (std::size_t c = 0; c < l.channels; ++c) {
                                   const std::size_t off = (n * l.channels + c) * l.spatial;
                                   for (std::size_t i = 0; i < l.spatial; ++i) {
                                     dx[off + i] += dy[off + i] * scale[c];
                                   }
                                 }
                               }
                             });
}

template <typename T>
Var<T> fully_connected(Var<T> input, Var<T> weights, Var<T> bias) {
  const auto& x = input.value();
  const auto& w = weights.value();
  const auto& b = bias.value();
  if (x.rank() != 2 || w.rank() != 2 || w.dim(1) != x.dim(1) || b.size() != w.dim(0)) {
    throw ShapeError("fully_connected: incompatible shapes input " + shape_str(x.shape()) +
                     ", weights " + shape_str(w.shape()) + ", bias " + shape_str(b.shape()));
  }
  const auto N = static_cast<long>(x.dim(0)), D = static_cast<long>(x.dim(1)),
             K = static_cast<long>(w.dim(0));
  BasicTensor<T> y(Shape{x.dim(0), w.dim(0)});
  ConstMapMat<T> xm(x.data(), N, D);
  ConstMapMat<T> wm(w.data(), K, D);
  MapMat<T> ym(y.data(), N, K);
  ym.noalias() = xm * wm.transpose();
  for (long n = 0; n < N; ++n) {
    for (long k = 0; k < K; ++k) ym(n, k) += b[static_cast<std::size_t>(k)];
  }
  const std::size_t xid = input.id(), wid = weights.id(), bid = bias.id();
  return input.tape().record(
      "fully_connected", std::move(y), {input, weights, bias},
      [xid, wid, bid, N, D, K](Tape<T>& tape, std::size_t self) {
        const auto& dy = tape.grad(self);
        ConstMapMat<T> dym(dy.data(), N, K);
        if (tape.requires_grad(xid)) {
          ConstMapMat<T> wm(tape.value(wid).data(), K, D);
          MapMat<T> dxm(tape.grad_accumulator(xid).data(), N, D);
          dxm.noalias() += dym * wm;
        }
        if (tape.requires_grad(wid)) {
          ConstMapMat<T> xm(tape.value(xid).data(), N, D);
          MapMat<T> dwm(tape.grad_accumulator(wid).data(), K, D);
          dwm.noalias() += dym.transpose() * xm;
        }
        if (tape.requires_grad(bid)) {
          auto& db = tape.grad_accumulator(bid);
          for (long n = 0; n < N; ++n) {
            for (long k = 0; k < K; ++k) db[static_cast<std::size_t>(k)] += dym(n, k);
          }
        }
      });
}

template <typename T>
Var<T> softmax_cross_entropy(Var<T> logits, std::span<const int> labels) {
  const auto& z = logits.value();
  if (z.rank() != 2 || z.dim(0) != labels.size()) {
    throw ShapeError("softmax_cross_entropy: logits " + shape_str(z.shape()) + " for " +
                     std::to_string(labels.size()) + " labels");
  }
  const std::size_t N = z.dim(0), K = z.dim(1);
  BasicTensor<T> probs(z.shape());
  double loss = 0;
  std::vector<int> lab(labels.begin(), labels.end());
  for (std::size_t n = 0; n < N; ++n) {
    if (lab[n] < 0 || static_cast<std::size_t>(lab[n]) >= K) {
      throw DataError("label " + std::to_string(lab[n]) + " outside class range [0, " +
                      std::to_string(K) + ")");
    }
    const T* row = z.data() + n * K;
    const double mx = *std::max_element(row, row + K);
    double s = 0;
    for (std::size_t k = 0; k < K; ++k) s += std::exp(static_cast<double>(row[k]) - mx);
    const double lse = mx + std::log(s);
    for (std::size_t k = 0; k < K; ++k) probs[n * K + k] = static_cast<T>(std::exp(row[k] - lse));
    loss += lse - row[lab[n]];
  }
  BasicTensor<T> out = BasicTensor<T>::scalar(static_cast<T>(loss / static_cast<double>(N)));
  const std::size_t zid = logits.id();
  return logits.tape().record(
      "softmax_cross_entropy", std::move(out), {logits},
      [zid, N, K, probs = std::move(probs), lab = std::move(lab)](Tape<T>& tape, std::size_t self) {
        const T g = tape.grad(self)[0] / static_cast<T>(N);
        auto& dz = tape.grad_accumulator(zid);
        for (std::size_t n = 0; n < N; ++n) {
          for (std::size_t k = 0; k < K; ++k) {
            const T onehot = static_cast<int>(k) == lab[n] ? T(1) : T(0);
            dz[n * K + k] += g * (probs[n * K + k] - onehot);
          }
        }
      });
}

template <typename T>
Var<T> sum(Var<T> input) {
  const auto& x = input.value();
  double s = 0;
  for (T v : x.values()) s += v;
  const std::size_t xid = input.id();
  return input.tape().record("sum", BasicTensor<T>::scalar(static_cast<T>(s)), {input},
                             [xid](Tape<T>& tape, std::size_t self) {
                               const T g = tape.grad(self)[0];
                               for (T& v : tape.grad_accumulator(xid).values()) v += g;
                             });
}

template <typename T>
BasicTensor<T> hflip(const BasicTensor<T>& x) {
  if (x.rank() != 4) throw ShapeError("hflip expects NCHW, got " + shape_str(x.shape()));
  BasicTensor<T> y(x.shape());
  const std::size_t W = x.dim(3);
  const std::size_t rows = x.size() / W;
  for (std::size_t r = 0; r < rows; ++r) {
    const T* src = x.data() + r * W;
    T* dst = y.data() + r * W;
    for (std::size_t j = 0; j < W; ++j) dst[j] = src[W - 1 - j];
  }
  return y;
}

template <typename T>
std::vector<int> argmax_rows(const BasicTensor<T>& logits) {
  if (logits.rank() != 2) throw ShapeError("argmax_rows expects [N, K]");
  const std::size_t N = logits.dim(0), K = logits.dim(1);
  std::vector<int> out(N);
  for (std::size_t n = 0; n < N; ++n) {
    const T* row = logits.data() + n * K;
    out[n] = static_cast<int>(std::max_element(row, row + K) - row);
  }
  return out;
}

#define SQZ_INSTANTIATE_OPS(T)                                                                    \
  template Var<T> conv2d(Var<T>, Var<T>, Var<T>, const Conv2dOptions&);                           \
  template Var<T> batch_norm(Var<T>, Var<T>, Var<T>, BasicTensor<T>&, BasicTensor<T>&,            \
                             const BatchNormOptions&);                                             \
  template Var<T> relu(Var<T>);                                                                    \
  template Var<T> max_pool(Var<T>, int, int);                                                      \
  template Var<T> global_avg_pool(Var<T>);                                                         \
  template Var<T> concat_channels(const std::vector<Var<T>>&);                                     \
  template Var<T> slice_channels(Var<T>, std::size_t, std::size_t);                                \
  template Var<T> scale_channels(Var<T>, std::vector<T>);                                          \
  template Var<T> fully_connected(Var<T>, Var<T>, Var<T>);                                         \
  template Var<T> softmax_cross_entropy(Var<T>, std::span<const int>);                             \
  template Var<T> sum(Var<T>);                                                                     \
  template BasicTensor<T> hflip(const BasicTensor<T>&);                                            \
  template std::vector<int> argmax_rows(const BasicTensor<T>&);

SQZ_INSTANTIATE_OPS(float)
SQZ_INSTANTIATE_OPS(double)

#undef SQZ_INSTANTIATE_OPS

}  // namespace sqz
