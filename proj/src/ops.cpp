#include "wrangan/ops.hpp"

#include <algorithm>
#include <cmath>

#include <Eigen/Core>
#include <fmt/format.h>

namespace wrangan::ops {

namespace {

template <class T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using MatMap = Eigen::Map<RowMat<T>>;
template <class T>
using ConstMatMap = Eigen::Map<const RowMat<T>>;

template <class T>
void require_same(const char* op, const Var<T>& a, const Var<T>& b) {
  if (&a.tape() != &b.tape()) throw std::logic_error(fmt::format("{}: operands live on different tapes", op));
  if (a.shape() != b.shape()) {
    throw ShapeError(fmt::format("{}: shape mismatch {} vs {}", op, to_string(a.shape()), to_string(b.shape())));
  }
}

template <class T>
void require_rank(const char* op, const Var<T>& a, int rank) {
  if (a.value().rank() != rank) {
    throw ShapeError(fmt::format("{}: expected rank {} input, got {}", op, rank, to_string(a.shape())));
  }
}

// Applies y = f(x) with dy/dx = df(x) evaluated from the saved input.
template <class T, class F, class DF>
Var<T> unary(const Var<T>& a, F f, DF df) {
  const auto& x = a.value();
  Tensor<T> out(x.shape());
  const T* px = x.ptr();
  T* po = out.ptr();
  const auto n = x.size();
  for (std::int64_t i = 0; i < n; ++i) po[i] = f(px[i]);
  const int ia = a.id();
  return a.tape().record(std::move(out), {a}, [ia, df](Tape<T>& tape, const Tensor<T>& g) {
    const auto& xv = tape.value(ia);
    auto& ga = tape.grad(ia);
    const T* pxv = xv.ptr();
    const T* pg = g.ptr();
    T* pga = ga.ptr();
    const auto m = xv.size();
    for (std::int64_t i = 0; i < m; ++i) pga[i] += pg[i] * df(pxv[i]);
  });
}

// Splits a shape around `axis` into (outer, extent, inner) strides.
struct AxisSplit {
  std::int64_t outer = 1, extent = 1, inner = 1;
};

AxisSplit split_at(const Shape& s, int axis) {
  AxisSplit r;
  for (int i = 0; i < axis; ++i) r.outer *= s[static_cast<std::size_t>(i)];
  r.extent = s[static_cast<std::size_t>(axis)];
  for (std::size_t i = static_cast<std::size_t>(axis) + 1; i < s.size(); ++i) r.inner *= s[i];
  return r;
}

}  // namespace

template <class T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  require_same("add", a, b);
  Tensor<T> out(a.shape());
  const auto n = out.size();
  for (std::int64_t i = 0; i < n; ++i) out[i] = a.value()[i] + b.value()[i];
  const int ia = a.id(), ib = b.id();
  return a.tape().record(std::move(out), {a, b}, [ia, ib](Tape<T>& tape, const Tensor<T>& g) {
    for (int id : {ia, ib}) {
      if (!tape.requires_grad(id)) continue;
      auto& gx = tape.grad(id);
      for (std::int64_t i = 0; i < g.size(); ++i) gx[i] += g[i];
    }
  });
}

template <class T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
  require_same("sub", a, b);
  Tensor<T> out(a.shape());
  const auto n = out.size();
  for (std::int64_t i = 0; i < n; ++i) out[i] = a.value()[i] - b.value()[i];
  const int ia = a.id(), ib = b.id();
  return a.tape().record(std::move(out), {a, b}, [ia, ib](Tape<T>& tape, const Tensor<T>& g) {
    if (tape.requires_grad(ia)) {
      auto& ga = tape.grad(ia);
      for (std::int64_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    }
    if (tape.requires_grad(ib)) {
      auto& gb = tape.grad(ib);
      for (std::int64_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
    }
  });
}

template <class T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  require_same("mul", a, b);
  Tensor<T> out(a.shape());
  const auto n = out.size();
  for (std::int64_t i = 0; i < n; ++i) out[i] = a.value()[i] * b.value()[i];
  const int ia = a.id(), ib = b.id();
  return a.tape().record(std::move(out), {a, b}, [ia, ib](Tape<T>& tape, const Tensor<T>& g) {
    const auto& av = tape.value(ia);
    const auto& bv = tape.value(ib);
    if (tape.requires_grad(ia)) {
      auto& ga = tape.grad(ia);
      for (std::int64_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bv[i];
    }
    if (tape.requires_grad(ib)) {
      auto& gb = tape.grad(ib);
      for (std::int64_t i = 0; i < g.size(); ++i) gb[i] += g[i] * av[i];
    }
  });
}

template <class T>
Var<T> div(const Var<T>& a, const Var<T>& b) {
  require_same("div", a, b);
  Tensor<T> out(a.shape());
  const auto n = out.size();
  for (std::int64_t i = 0; i < n; ++i) out[i] = a.value()[i] / b.value()[i];
  const int ia = a.id(), ib = b.id();
  return a.tape().record(std::move(out), {a, b}, [ia, ib](Tape<T>& tape, const Tensor<T>& g) {
    const auto& av = tape.value(ia);
    const auto& bv = tape.value(ib);
    if (tape.requires_grad(ia)) {
      auto& ga = tape.grad(ia);
      for (std::int64_t i = 0; i < g.size(); ++i) ga[i] += g[i] / bv[i];
    }
    if (tape.requires_grad(ib)) {
      auto& gb = tape.grad(ib);
      for (std::int64_t i = 0; i < g.size(); ++i) gb[i] -= g[i] * av[i] / (bv[i] * bv[i]);
    }
  });
}

template <class T>
Var<T> add_scalar(const Var<T>& a, T s) {
  return unary(a, [s](T x) { return x + s; }, [](T) { return T(1); });
}

template <class T>
Var<T> mul_scalar(const Var<T>& a, T s) {
  return unary(a, [s](T x) { return x * s; }, [s](T) { return s; });
}

template <class T>
Var<T> neg(const Var<T>& a) {
  return unary(a, [](T x) { return -x; }, [](T) { return T(-1); });
}

template <class T>
Var<T> square(const Var<T>& a) {
  return unary(a, [](T x) { return x * x; }, [](T x) { return T(2) * x; });
}

template <class T>
Var<T> sqrt(const Var<T>& a) {
  return unary(a, [](T x) { return std::sqrt(x); }, [](T x) { return T(0.5) / std::sqrt(x); });
}

template <class T>
Var<T> rsqrt(const Var<T>& a) {
  return unary(
      a, [](T x) { return T(1) / std::sqrt(x); }, [](T x) { return T(-0.5) / (x * std::sqrt(x)); });
}

template <class T>
Var<T> exp(const Var<T>& a) {
  return unary(a, [](T x) { return std::exp(x); }, [](T x) { return std::exp(x); });
}

template <class T>
Var<T> leaky_relu(const Var<T>& a, T slope) {
  return unary(
      a, [slope](T x) { return x >= T(0) ? x : slope * x; }, [slope](T x) { return x >= T(0) ? T(1) : slope; });
}

template <class T>
Var<T> softplus(const Var<T>& a) {
  return unary(
      a, [](T x) { return std::max(x, T(0)) + std::log1p(std::exp(-std::abs(x))); },
      [](T x) {
        // logistic sigmoid, split by sign to avoid overflow
        if (x >= T(0)) return T(1) / (T(1) + std::exp(-x));
        const T e = std::exp(x);
        return e / (T(1) + e);
      });
}

template <class T>
Var<T> sum(const Var<T>& a) {
  double acc = 0;
  for (T v : a.value().data()) acc += v;
  const int ia = a.id();
  return a.tape().record(Tensor<T>::scalar(static_cast<T>(acc)), {a}, [ia](Tape<T>& tape, const Tensor<T>& g) {
    auto& ga = tape.grad(ia);
    const T gv = g[0];
    for (std::int64_t i = 0; i < ga.size(); ++i) ga[i] += gv;
  });
}

template <class T>
Var<T> mean(const Var<T>& a) {
  return mul_scalar(sum(a), T(1) / static_cast<T>(a.value().size()));
}

template <class T>
Var<T> sum_dim(const Var<T>& a, int axis) {
  const auto& x = a.value();
  if (axis < 0) axis += x.rank();
  if (axis < 0 || axis >= x.rank()) {
    throw ShapeError(fmt::format("sum_dim: axis {} out of range for {}", axis, to_string(x.shape())));
  }
  const auto sp = split_at(x.shape(), axis);
  Shape out_shape;
  for (int i = 0; i < x.rank(); ++i) {
    if (i != axis) out_shape.push_back(x.shape()[static_cast<std::size_t>(i)]);
  }
  if (out_shape.empty()) out_shape = {1};
  Tensor<T> out(out_shape);
  for (std::int64_t o = 0; o < sp.outer; ++o) {
    T* po = out.ptr() + o * sp.inner;
    for (std::int64_t l = 0; l < sp.extent; ++l) {
      const T* px = x.ptr() + (o * sp.extent + l) * sp.inner;
      for (std::int64_t i = 0; i < sp.inner; ++i) po[i] += px[i];
    }
  }
  const int ia = a.id();
  return a.tape().record(std::move(out), {a}, [ia, sp](Tape<T>& tape, const Tensor<T>& g) {
    auto& ga = tape.grad(ia);
    for (std::int64_t o = 0; o < sp.outer; ++o) {
      const T* pg = g.ptr() + o * sp.inner;
      for (std::int64_t l = 0; l < sp.extent; ++l) {
        T* pa = ga.ptr() + (o * sp.extent + l) * sp.inner;
        for (std::int64_t i = 0; i < sp.inner; ++i) pa[i] += pg[i];
      }
    }
  });
}

template <class T>
Var<T> matmul(const Var<T>& a, const Var<T>& b) {
  require_rank("matmul", a, 2);
  require_rank("matmul", b, 2);
  const auto m = a.value().dim(0), k = a.value().dim(1), n = b.value().dim(1);
  if (b.value().dim(0) != k) {
    throw ShapeError(
        fmt::format("matmul: inner extents disagree {} x {}", to_string(a.shape()), to_string(b.shape())));
  }
  Tensor<T> out(Shape{m, n});
  MatMap<T>(out.ptr(), m, n).noalias() =
      ConstMatMap<T>(a.value().ptr(), m, k) * ConstMatMap<T>(b.value().ptr(), k, n);
  const int ia = a.id(), ib = b.id();
  return a.tape().record(std::move(out), {a, b}, [ia, ib, m, k, n](Tape<T>& tape, const Tensor<T>& g) {
    ConstMatMap<T> G(g.ptr(), m, n);
    if (tape.requires_grad(ia)) {
      MatMap<T>(tape.grad(ia).ptr(), m, k).noalias() += G * ConstMatMap<T>(tape.value(ib).ptr(), k, n).transpose();
    }
    if (tape.requires_grad(ib)) {
      MatMap<T>(tape.grad(ib).ptr(), k, n).noalias() += ConstMatMap<T>(tape.value(ia).ptr(), m, k).transpose() * G;
    }
  });
}

template <class T>
Var<T> transpose(const Var<T>& a) {
  require_rank("transpose", a, 2);
  const auto m = a.value().dim(0), n = a.value().dim(1);
  Tensor<T> out(Shape{n, m});
  MatMap<T>(out.ptr(), n, m) = ConstMatMap<T>(a.value().ptr(), m, n).transpose();
  const int ia = a.id();
  return a.tape().record(std::move(out), {a}, [ia, m, n](Tape<T>& tape, const Tensor<T>& g) {
    MatMap<T>(tape.grad(ia).ptr(), m, n) += ConstMatMap<T>(g.ptr(), n, m).transpose();
  });
}

template <class T>
Var<T> reshape(const Var<T>& a, Shape shape) {
  if (numel(shape) != a.value().size()) {
    throw ShapeError(fmt::format("reshape: cannot view {} as {}", to_string(a.shape()), to_string(shape)));
  }
  Tensor<T> out = a.value().reshaped(std::move(shape));
  const int ia = a.id();
  return a.tape().record(std::move(out), {a}, [ia](Tape<T>& tape, const Tensor<T>& g) {
    auto& ga = tape.grad(ia);
    for (std::int64_t i = 0; i < g.size(); ++i) ga[i] += g[i];
  });
}

template <class T>
Var<T> concat(const std::vector<Var<T>>& parts, int axis) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  const auto& first = parts.front().shape();
  const int rank = static_cast<int>(first.size());
  if (axis < 0) axis += rank;
  if (axis < 0 || axis >= rank) throw ShapeError(fmt::format("concat: axis {} out of range for {}", axis, to_string(first)));
  Shape out_shape = first;
  out_shape[static_cast<std::size_t>(axis)] = 0;
  for (const auto& p : parts) {
    const auto& s = p.shape();
    bool ok = static_cast<int>(s.size()) == rank;
    for (int i = 0; ok && i < rank; ++i) {
      if (i != axis && s[static_cast<std::size_t>(i)] != first[static_cast<std::size_t>(i)]) ok = false;
    }
    if (!ok) throw ShapeError(fmt::format("concat: shape mismatch {} vs {}", to_string(first), to_string(s)));
    out_shape[static_cast<std::size_t>(axis)] += s[static_cast<std::size_t>(axis)];
  }
  const auto osp = split_at(out_shape, axis);
  Tensor<T> out(out_shape);
  std::vector<int> ids;
  std::vector<std::int64_t> offsets;
  std::int64_t off = 0;
  for (const auto& p : parts) {
    const auto sp = split_at(p.shape(), axis);
    const std::int64_t chunk = sp.extent * sp.inner;
    for (std::int64_t o = 0; o < sp.outer; ++o) {
      std::copy_n(p.value().ptr() + o * chunk, chunk, out.ptr() + o * osp.extent * osp.inner + off * osp.inner);
    }
    ids.push_back(p.id());
    offsets.push_back(off);
    off += sp.extent;
  }
  return parts.front().tape().record(
      std::move(out), parts, [ids, offsets, osp, axis](Tape<T>& tape, const Tensor<T>& g) {
        for (std::size_t j = 0; j < ids.size(); ++j) {
          if (!tape.requires_grad(ids[j])) continue;
          auto& gp = tape.grad(ids[j]);
          const auto sp = split_at(gp.shape(), axis);
          const std::int64_t chunk = sp.extent * sp.inner;
          for (std::int64_t o = 0; o < sp.outer; ++o) {
            const T* src = g.ptr() + o * osp.extent * osp.inner + offsets[j] * osp.inner;
            T* dst = gp.ptr() + o * chunk;
            for (std::int64_t i = 0; i < chunk; ++i) dst[i] += src[i];
          }
        }
      });
}

template <class T>
Var<T> add_bias(const Var<T>& x, const Var<T>& bias) {
  const auto& xv = x.value();
  if (xv.rank() < 2 || bias.value().rank() != 1 || bias.value().dim(0) != xv.dim(1)) {
    throw ShapeError(fmt::format("add_bias: shape mismatch {} vs {}", to_string(x.shape()), to_string(bias.shape())));
  }
  const auto sp = split_at(xv.shape(), 1);
  Tensor<T> out(xv.shape());
  const T* pb = bias.value().ptr();
  for (std::int64_t b = 0; b < sp.outer; ++b) {
    for (std::int64_t c = 0; c < sp.extent; ++c) {
      const std::int64_t base = (b * sp.extent + c) * sp.inner;
      for (std::int64_t i = 0; i < sp.inner; ++i) out[base + i] = xv[base + i] + pb[c];
    }
  }
  const int ix = x.id(), ib = bias.id();
  return x.tape().record(std::move(out), {x, bias}, [ix, ib, sp](Tape<T>& tape, const Tensor<T>& g) {
    if (tape.requires_grad(ix)) {
      auto& gx = tape.grad(ix);
      for (std::int64_t i = 0; i < g.size(); ++i) gx[i] += g[i];
    }
    if (tape.requires_grad(ib)) {
      auto& gb = tape.grad(ib);
      for (std::int64_t b = 0; b < sp.outer; ++b) {
        for (std::int64_t c = 0; c < sp.extent; ++c) {
          const T* pg = g.ptr() + (b * sp.extent + c) * sp.inner;
          T acc = 0;
          for (std::int64_t i = 0; i < sp.inner; ++i) acc += pg[i];
          gb[c] += acc;
        }
      }
    }
  });
}

template <class T>
Var<T> scale_channels(const Var<T>& x, const Var<T>& scale) {
  const auto& xv = x.value();
  const auto& sv = scale.value();
  if (xv.rank() < 2 || sv.rank() != 2 || sv.dim(0) != xv.dim(0) || sv.dim(1) != xv.dim(1)) {
    throw ShapeError(
        fmt::format("scale_channels: shape mismatch {} vs {}", to_string(x.shape()), to_string(scale.shape())));
  }
  const auto sp = split_at(xv.shape(), 1);
  Tensor<T> out(xv.shape());
  for (std::int64_t bc = 0; bc < sp.outer * sp.extent; ++bc) {
    const T s = sv[bc];
    const std::int64_t base = bc * sp.inner;
    for (std::int64_t i = 0; i < sp.inner; ++i) out[base + i] = xv[base + i] * s;
  }
  const int ix = x.id(), is = scale.id();
  return x.tape().record(std::move(out), {x, scale}, [ix, is, sp](Tape<T>& tape, const Tensor<T>& g) {
    const auto& xv2 = tape.value(ix);
    const auto& sv2 = tape.value(is);
    const bool need_x = tape.requires_grad(ix), need_s = tape.requires_grad(is);
    for (std::int64_t bc = 0; bc < sp.outer * sp.extent; ++bc) {
      const std::int64_t base = bc * sp.inner;
      const T* pg = g.ptr() + base;
      if (need_x) {
        T* px = tape.grad(ix).ptr() + base;
        const T s = sv2[bc];
        for (std::int64_t i = 0; i < sp.inner; ++i) px[i] += pg[i] * s;
      }
      if (need_s) {
        const T* pxv = xv2.ptr() + base;
        T acc = 0;
        for (std::int64_t i = 0; i < sp.inner; ++i) acc += pg[i] * pxv[i];
        tape.grad(is)[bc] += acc;
      }
    }
  });
}

template <class T>
Var<T> channel_normalize(const Var<T>& x, T eps) {
  const auto& xv = x.value();
  if (xv.rank() < 2) throw ShapeError(fmt::format("channel_normalize: rank too small {}", to_string(x.shape())));
  const auto sp = split_at(xv.shape(), 1);
  Tensor<T> out(xv.shape());
  std::vector<T> inv_norm(static_cast<std::size_t>(sp.outer * sp.inner));
  for (std::int64_t b = 0; b < sp.outer; ++b) {
    for (std::int64_t i = 0; i < sp.inner; ++i) {
      T acc = 0;
      for (std::int64_t c = 0; c < sp.extent; ++c) {
        const T v = xv[(b * sp.extent + c) * sp.inner + i];
        acc += v * v;
      }
      const T inv = T(1) / std::sqrt(acc + eps);
      inv_norm[static_cast<std::size_t>(b * sp.inner + i)] = inv;
      for (std::int64_t c = 0; c < sp.extent; ++c) {
        const auto k = (b * sp.extent + c) * sp.inner + i;
        out[k] = xv[k] * inv;
      }
    }
  }
  const int ix = x.id();
  return x.tape().record(
      std::move(out), {x}, [ix, sp, inv_norm = std::move(inv_norm)](Tape<T>& tape, const Tensor<T>& g) {
        const auto& xv2 = tape.value(ix);
        auto& gx = tape.grad(ix);
        for (std::int64_t b = 0; b < sp.outer; ++b) {
          for (std::int64_t i = 0; i < sp.inner; ++i) {
            const T inv = inv_norm[static_cast<std::size_t>(b * sp.inner + i)];
            T dot = 0;
            for (std::int64_t c = 0; c < sp.extent; ++c) {
              const auto k = (b * sp.extent + c) * sp.inner + i;
              dot += g[k] * xv2[k];
            }
            const T coef = dot * inv * inv * inv;
            for (std::int64_t c = 0; c < sp.extent; ++c) {
              const auto k = (b * sp.extent + c) * sp.inner + i;
              gx[k] += g[k] * inv - xv2[k] * coef;
            }
          }
        }
      });
}

template <class T>
Var<T> global_avg_pool(const Var<T>& x) {
  require_rank("global_avg_pool", x, 4);
  const auto& xv = x.value();
  const auto bsz = xv.dim(0), ch = xv.dim(1), hw = xv.dim(2) * xv.dim(3);
  Tensor<T> out(Shape{bsz, ch});
  for (std::int64_t bc = 0; bc < bsz * ch; ++bc) {
    T acc = 0;
    const T* p = xv.ptr() + bc * hw;
    for (std::int64_t i = 0; i < hw; ++i) acc += p[i];
    out[bc] = acc / static_cast<T>(hw);
  }
  const int ix = x.id();
  return x.tape().record(std::move(out), {x}, [ix, hw](Tape<T>& tape, const Tensor<T>& g) {
    auto& gx = tape.grad(ix);
    const T inv = T(1) / static_cast<T>(hw);
    for (std::int64_t bc = 0; bc < g.size(); ++bc) {
      T* p = gx.ptr() + bc * hw;
      const T v = g[bc] * inv;
      for (std::int64_t i = 0; i < hw; ++i) p[i] += v;
    }
  });
}

namespace {

struct ConvGeom {
  std::int64_t batch, in_ch, in_h, in_w, out_ch, k, out_h, out_w;
  int stride, pad;
  std::int64_t rows() const { return in_ch * k * k; }
  std::int64_t cols() const { return batch * out_h * out_w; }
};

// col[(c*k + ki)*k + kj][b*OH*OW + oh*OW + ow] = x[b, c, oh*s - p + ki, ow*s - p + kj]
template <class T>
void im2col(const ConvGeom& g, const T* x, T* col) {
  const std::int64_t ohw = g.out_h * g.out_w;
  for (std::int64_t c = 0; c < g.in_ch; ++c) {
    for (std::int64_t ki = 0; ki < g.k; ++ki) {
      for (std::int64_t kj = 0; kj < g.k; ++kj) {
        T* row = col + ((c * g.k + ki) * g.k + kj) * g.cols();
        for (std::int64_t b = 0; b < g.batch; ++b) {
          const T* plane = x + (b * g.in_ch + c) * g.in_h * g.in_w;
          T* dst = row + b * ohw;
          for (std::int64_t oh = 0; oh < g.out_h; ++oh) {
            const std::int64_t ih = oh * g.stride - g.pad + ki;
            T* drow = dst + oh * g.out_w;
            if (ih < 0 || ih >= g.in_h) {
              std::fill_n(drow, g.out_w, T(0));
              continue;
            }
            const T* srow = plane + ih * g.in_w;
            for (std::int64_t ow = 0; ow < g.out_w; ++ow) {
              const std::int64_t iw = ow * g.stride - g.pad + kj;
              drow[ow] = (iw >= 0 && iw < g.in_w) ? srow[iw] : T(0);
            }
          }
        }
      }
    }
  }
}

template <class T>
void col2im(const ConvGeom& g, const T* col, T* dx) {
  const std::int64_t ohw = g.out_h * g.out_w;
  for (std::int64_t c = 0; c < g.in_ch; ++c) {
    for (std::int64_t ki = 0; ki < g.k; ++ki) {
      for (std::int64_t kj = 0; kj < g.k; ++kj) {
        const T* row = col + ((c * g.k + ki) * g.k + kj) * g.cols();
        for (std::int64_t b = 0; b < g.batch; ++b) {
          T* plane = dx + (b * g.in_ch + c) * g.in_h * g.in_w;
          const T* src = row + b * ohw;
          for (std::int64_t oh = 0; oh < g.out_h; ++oh) {
            const std::int64_t ih = oh * g.stride - g.pad + ki;
            if (ih < 0 || ih >= g.in_h) continue;
            T* drow = plane + ih * g.in_w;
            const T* srow = src + oh * g.out_w;
            for (std::int64_t ow = 0; ow < g.out_w; ++ow) {
              const std::int64_t iw = ow * g.stride - g.pad + kj;
              if (iw >= 0 && iw < g.in_w) drow[iw] += srow[ow];
            }
          }
        }
      }
    }
  }
}

}  // namespace

template <class T>
Var<T> conv2d(const Var<T>& x, const Var<T>& weight, int stride, int padding) {
  require_rank("conv2d", x, 4);
  require_rank("conv2d", weight, 4);
  const auto& xv = x.value();
  const auto& wv = weight.value();
  if (wv.dim(1) != xv.dim(1) || wv.dim(2) != wv.dim(3)) {
    throw ShapeError(
        fmt::format("conv2d: input {} incompatible with weight {}", to_string(x.shape()), to_string(weight.shape())));
  }
  if (stride < 1 || padding < 0) throw ShapeError(fmt::format("conv2d: bad stride {} / padding {}", stride, padding));
  ConvGeom g{};
  g.batch = xv.dim(0);
  g.in_ch = xv.dim(1);
  g.in_h = xv.dim(2);
  g.in_w = xv.dim(3);
  g.out_ch = wv.dim(0);
  g.k = wv.dim(2);
  g.stride = stride;
  g.pad = padding;
  g.out_h = (g.in_h + 2 * padding - g.k) / stride + 1;
  g.out_w = (g.in_w + 2 * padding - g.k) / stride + 1;
  if (g.out_h <= 0 || g.out_w <= 0) {
    throw ShapeError(
        fmt::format("conv2d: kernel {} larger than padded input {}", to_string(weight.shape()), to_string(x.shape())));
  }

  std::vector<T> col(static_cast<std::size_t>(g.rows() * g.cols()));
  im2col(g, xv.ptr(), col.data());
  RowMat<T> out_mat(g.out_ch, g.cols());
  out_mat.noalias() = ConstMatMap<T>(wv.ptr(), g.out_ch, g.rows()) * ConstMatMap<T>(col.data(), g.rows(), g.cols());

  const std::int64_t ohw = g.out_h * g.out_w;
  Tensor<T> out(Shape{g.batch, g.out_ch, g.out_h, g.out_w});
  for (std::int64_t b = 0; b < g.batch; ++b) {
    for (std::int64_t o = 0; o < g.out_ch; ++o) {
      std::copy_n(out_mat.data() + o * g.cols() + b * ohw, ohw, out.ptr() + (b * g.out_ch + o) * ohw);
    }
  }

  const int ix = x.id(), iw = weight.id();
  if (!x.tape().any_requires_grad({x, weight})) return x.tape().record(std::move(out), {x, weight}, nullptr);
  return x.tape().record(
      std::move(out), {x, weight}, [ix, iw, g, ohw, col = std::move(col)](Tape<T>& tape, const Tensor<T>& grad) {
        RowMat<T> gmat(g.out_ch, g.cols());
        for (std::int64_t b = 0; b < g.batch; ++b) {
          for (std::int64_t o = 0; o < g.out_ch; ++o) {
            std::copy_n(grad.ptr() + (b * g.out_ch + o) * ohw, ohw, gmat.data() + o * g.cols() + b * ohw);
          }
        }
        if (tape.requires_grad(iw)) {
          MatMap<T>(tape.grad(iw).ptr(), g.out_ch, g.rows()).noalias() +=
              gmat * ConstMatMap<T>(col.data(), g.rows(), g.cols()).transpose();
        }
        if (tape.requires_grad(ix)) {
          RowMat<T> dcol(g.rows(), g.cols());
          dcol.noalias() = ConstMatMap<T>(tape.value(iw).ptr(), g.out_ch, g.rows()).transpose() * gmat;
          col2im(g, dcol.data(), tape.grad(ix).ptr());
        }
      });
}

template <class T>
Var<T> upsample_nearest2x(const Var<T>& x) {
  require_rank("upsample_nearest2x", x, 4);
  const auto& xv = x.value();
  const auto planes = xv.dim(0) * xv.dim(1), h = xv.dim(2), w = xv.dim(3);
  Tensor<T> out(Shape{xv.dim(0), xv.dim(1), 2 * h, 2 * w});
  for (std::int64_t p = 0; p < planes; ++p) {
    const T* src = xv.ptr() + p * h * w;
    T* dst = out.ptr() + p * 4 * h * w;
    for (std::int64_t i = 0; i < 2 * h; ++i) {
      for (std::int64_t j = 0; j < 2 * w; ++j) dst[i * 2 * w + j] = src[(i / 2) * w + j / 2];
    }
  }
  const int ix = x.id();
  return x.tape().record(std::move(out), {x}, [ix, planes, h, w](Tape<T>& tape, const Tensor<T>& g) {
    auto& gx = tape.grad(ix);
    for (std::int64_t p = 0; p < planes; ++p) {
      const T* src = g.ptr() + p * 4 * h * w;
      T* dst = gx.ptr() + p * h * w;
      for (std::int64_t i = 0; i < 2 * h; ++i) {
        for (std::int64_t j = 0; j < 2 * w; ++j) dst[(i / 2) * w + j / 2] += src[i * 2 * w + j];
      }
    }
  });
}

template <class T>
std::vector<T> gaussian_kernel(T sigma, int radius) {
  if (!(sigma > T(0)) || radius < 0) throw std::invalid_argument("gaussian_kernel: sigma must be > 0, radius >= 0");
  std::vector<T> k(static_cast<std::size_t>(2 * radius + 1));
  T total = 0;
  for (int i = -radius; i <= radius; ++i) {
    const T v = std::exp(-T(i * i) / (T(2) * sigma * sigma));
    k[static_cast<std::size_t>(i + radius)] = v;
    total += v;
  }
  for (auto& v : k) v /= total;
  return k;
}

namespace {

// Separable same-size filtering with zero padding; the operator is symmetric
// for a symmetric kernel, so it is its own adjoint.
template <class T>
void blur_planes(const T* src, T* dst, std::int64_t planes, std::int64_t h, std::int64_t w, const std::vector<T>& k) {
  const int r = static_cast<int>(k.size() / 2);
  std::vector<T> tmp(static_cast<std::size_t>(h * w));
  for (std::int64_t p = 0; p < planes; ++p) {
    const T* s = src + p * h * w;
    T* d = dst + p * h * w;
    for (std::int64_t i = 0; i < h; ++i) {
      for (std::int64_t j = 0; j < w; ++j) {
        T acc = 0;
        for (int t = -r; t <= r; ++t) {
          const std::int64_t jj = j + t;
          if (jj >= 0 && jj < w) acc += k[static_cast<std::size_t>(t + r)] * s[i * w + jj];
        }
        tmp[static_cast<std::size_t>(i * w + j)] = acc;
      }
    }
    for (std::int64_t i = 0; i < h; ++i) {
      for (std::int64_t j = 0; j < w; ++j) {
        T acc = 0;
        for (int t = -r; t <= r; ++t) {
          const std::int64_t ii = i + t;
          if (ii >= 0 && ii < h) acc += k[static_cast<std::size_t>(t + r)] * tmp[static_cast<std::size_t>(ii * w + j)];
        }
        d[i * w + j] += acc;
      }
    }
  }
}

}  // namespace

template <class T>
Var<T> gaussian_blur(const Var<T>& x, T sigma, int radius) {
  require_rank("gaussian_blur", x, 4);
  auto k = gaussian_kernel(sigma, radius);
  const auto& xv = x.value();
  const auto planes = xv.dim(0) * xv.dim(1), h = xv.dim(2), w = xv.dim(3);
  Tensor<T> out(xv.shape());
  blur_planes(xv.ptr(), out.ptr(), planes, h, w, k);
  const int ix = x.id();
  return x.tape().record(std::move(out), {x}, [ix, planes, h, w, k = std::move(k)](Tape<T>& tape, const Tensor<T>& g) {
    blur_planes(g.ptr(), tape.grad(ix).ptr(), planes, h, w, k);
  });
}

template <class T>
Var<T> mse(const Var<T>& a, const Var<T>& b) {
  return mean(square(sub(a, b)));
}

template <class T>
Var<T> sum_squares(const Var<T>& a) {
  return sum(square(a));
}

#define WRANGAN_INSTANTIATE_OPS(T)                                                        \
  template Var<T> add(const Var<T>&, const Var<T>&);                                      \
  template Var<T> sub(const Var<T>&, const Var<T>&);                                      \
  template Var<T> mul(const Var<T>&, const Var<T>&);                                      \
  template Var<T> div(const Var<T>&, const Var<T>&);                                      \
  template Var<T> add_scalar(const Var<T>&, T);                                           \
  template Var<T> mul_scalar(const Var<T>&, T);                                           \
  template Var<T> neg(const Var<T>&);                                                     \
  template Var<T> square(const Var<T>&);                                                  \
  template Var<T> sqrt(const Var<T>&);                                                    \
  template Var<T> rsqrt(const Var<T>&);                                                   \
  template Var<T> exp(const Var<T>&);                                                     \
  template Var<T> leaky_relu(const Var<T>&, T);                                           \
  template Var<T> softplus(const Var<T>&);                                                \
  template Var<T> sum(const Var<T>&);                                                     \
  template Var<T> mean(const Var<T>&);                                                    \
  template Var<T> sum_dim(const Var<T>&, int);                                            \
  template Var<T> matmul(const Var<T>&, const Var<T>&);                                   \
  template Var<T> transpose(const Var<T>&);                                               \
  template Var<T> reshape(const Var<T>&, Shape);                                          \
  template Var<T> concat(const std::vector<Var<T>>&, int);                                \
  template Var<T> add_bias(const Var<T>&, const Var<T>&);                                 \
  template Var<T> scale_channels(const Var<T>&, const Var<T>&);                           \
  template Var<T> channel_normalize(const Var<T>&, T);                                    \
  template Var<T> global_avg_pool(const Var<T>&);                                         \
  template Var<T> conv2d(const Var<T>&, const Var<T>&, int, int);                         \
  template Var<T> upsample_nearest2x(const Var<T>&);                                      \
  template Var<T> gaussian_blur(const Var<T>&, T, int);                                   \
  template std::vector<T> gaussian_kernel(T, int);                                        \
  template Var<T> mse(const Var<T>&, const Var<T>&);                                      \
  template Var<T> sum_squares(const Var<T>&);

WRANGAN_INSTANTIATE_OPS(float)
WRANGAN_INSTANTIATE_OPS(double)

#undef WRANGAN_INSTANTIATE_OPS

}  // namespace wrangan::ops
