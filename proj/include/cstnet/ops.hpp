#pragma once

// The differentiable op set. Every op validates shapes, computes its forward
// value eagerly and, when differentiation is live, records a backward closure
// that uses only the op's inputs, its own output and values it captured.

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "cstnet/errors.hpp"
#include "cstnet/tensor.hpp"

namespace cstnet {

namespace detail {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapMat = Eigen::Map<RowMat<T>>;
template <typename T>
using ConstMapMat = Eigen::Map<const RowMat<T>>;

// Grad buffer of input i, or nullptr when that input is not differentiated.
template <typename T>
T* input_grad(Node<T>& n, std::size_t i) {
  auto& in = *n.inputs[i];
  return in.requires_grad ? in.ensure_grad().data() : nullptr;
}

template <typename T>
const std::vector<T>& input_data(const Node<T>& n, std::size_t i) {
  return n.inputs[i]->data;
}

inline Shape row_major_strides(const Shape& s) {
  Shape st(s.size(), 1);
  for (std::size_t i = s.size(); i-- > 1;) st[i - 1] = st[i] * s[i];
  return st;
}

template <typename T>
void check_finite(std::span<const T> v, const char* what) {
  for (auto x : v)
    if (std::isnan(x)) throw NumericError(std::string(what) + ": NaN input");
}

struct Broadcast {
  Shape out;
  Shape stride_a;  // 0 on broadcast extents
  Shape stride_b;
  bool same = false;
};

inline Broadcast broadcast_shapes(const Shape& a, const Shape& b, const char* op) {
  Broadcast bc;
  const std::size_t r = std::max(a.size(), b.size());
  Shape pa(r - a.size(), 1), pb(r - b.size(), 1);
  pa.insert(pa.end(), a.begin(), a.end());
  pb.insert(pb.end(), b.begin(), b.end());
  bc.out.resize(r);
  for (std::size_t i = 0; i < r; ++i) {
    if (pa[i] == pb[i] || pb[i] == 1) {
      bc.out[i] = pa[i];
    } else if (pa[i] == 1) {
      bc.out[i] = pb[i];
    } else {
      throw DimensionError(std::string(op) + ": shapes " + shape_str(a) + " and " + shape_str(b) +
                           " are not broadcastable");
    }
  }
  auto sa = row_major_strides(pa), sb = row_major_strides(pb);
  bc.stride_a.resize(r);
  bc.stride_b.resize(r);
  for (std::size_t i = 0; i < r; ++i) {
    bc.stride_a[i] = pa[i] == 1 ? 0 : sa[i];
    bc.stride_b[i] = pb[i] == 1 ? 0 : sb[i];
  }
  bc.same = (pa == pb);
  return bc;
}

// Calls fn(out_index, a_index, b_index) for every output element.
template <typename Fn>
void for_each_broadcast(const Broadcast& bc, Fn&& fn) {
  const std::size_t total = shape_numel(bc.out);
  if (bc.same) {
    for (std::size_t i = 0; i < total; ++i) fn(i, i, i);
    return;
  }
  const std::size_t r = bc.out.size();
  std::vector<std::size_t> idx(r, 0);
  std::size_t ia = 0, ib = 0;
  for (std::size_t i = 0; i < total; ++i) {
    fn(i, ia, ib);
    for (std::size_t d = r; d-- > 0;) {
      ++idx[d];
      ia += bc.stride_a[d];
      ib += bc.stride_b[d];
      if (idx[d] < bc.out[d]) break;
      ia -= bc.stride_a[d] * idx[d];
      ib -= bc.stride_b[d] * idx[d];
      idx[d] = 0;
    }
  }
}

}  // namespace detail

// ---------------------------------------------------------------- pointwise

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  auto bc = detail::broadcast_shapes(a.shape(), b.shape(), "add");
  std::vector<T> out(shape_numel(bc.out));
  const auto& av = a.values();
  const auto& bv = b.values();
  detail::for_each_broadcast(bc, [&](std::size_t i, std::size_t ia, std::size_t ib) {
    out[i] = av[ia] + bv[ib];
  });
  return make_result<T>(bc.out, std::move(out), OpKind::add, {a, b}, [bc](Node<T>& n) {
    T* ga = detail::input_grad(n, 0);
    T* gb = detail::input_grad(n, 1);
    const auto& g = n.grad;
    detail::for_each_broadcast(bc, [&](std::size_t i, std::size_t ia, std::size_t ib) {
      if (ga) ga[ia] += g[i];
      if (gb) gb[ib] += g[i];
    });
  });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  auto bc = detail::broadcast_shapes(a.shape(), b.shape(), "sub");
  std::vector<T> out(shape_numel(bc.out));
  const auto& av = a.values();
  const auto& bv = b.values();
  detail::for_each_broadcast(bc, [&](std::size_t i, std::size_t ia, std::size_t ib) {
    out[i] = av[ia] - bv[ib];
  });
  return make_result<T>(bc.out, std::move(out), OpKind::sub, {a, b}, [bc](Node<T>& n) {
    T* ga = detail::input_grad(n, 0);
    T* gb = detail::input_grad(n, 1);
    const auto& g = n.grad;
    detail::for_each_broadcast(bc, [&](std::size_t i, std::size_t ia, std::size_t ib) {
      if (ga) ga[ia] += g[i];
      if (gb) gb[ib] -= g[i];
    });
  });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  auto bc = detail::broadcast_shapes(a.shape(), b.shape(), "mul");
  std::vector<T> out(shape_numel(bc.out));
  const auto& av = a.values();
  const auto& bv = b.values();
  detail::for_each_broadcast(bc, [&](std::size_t i, std::size_t ia, std::size_t ib) {
    out[i] = av[ia] * bv[ib];
  });
  return make_result<T>(bc.out, std::move(out), OpKind::mul, {a, b}, [bc](Node<T>& n) {
    T* ga = detail::input_grad(n, 0);
    T* gb = detail::input_grad(n, 1);
    const auto& av = detail::input_data(n, 0);
    const auto& bv = detail::input_data(n, 1);
    const auto& g = n.grad;
    detail::for_each_broadcast(bc, [&](std::size_t i, std::size_t ia, std::size_t ib) {
      if (ga) ga[ia] += g[i] * bv[ib];
      if (gb) gb[ib] += g[i] * av[ia];
    });
  });
}

template <typename T>
Tensor<T> scale(const Tensor<T>& x, T s) {
  std::vector<T> out(x.values());
  for (auto& v : out) v *= s;
  return make_result<T>(x.shape(), std::move(out), OpKind::scale, {x}, [s](Node<T>& n) {
    T* gx = detail::input_grad(n, 0);
    for (std::size_t i = 0; i < n.grad.size(); ++i) gx[i] += s * n.grad[i];
  });
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& x) {
  std::vector<T> out(x.numel());
  const auto& xv = x.values();
  for (std::size_t i = 0; i < out.size(); ++i) {
    // Branches keep exp() from overflowing for large |x|.
    out[i] = xv[i] >= 0 ? T(1) / (T(1) + std::exp(-xv[i]))
                        : std::exp(xv[i]) / (T(1) + std::exp(xv[i]));
  }
  return make_result<T>(x.shape(), std::move(out), OpKind::sigmoid, {x}, [](Node<T>& n) {
    T* gx = detail::input_grad(n, 0);
    for (std::size_t i = 0; i < n.grad.size(); ++i)
      gx[i] += n.grad[i] * n.data[i] * (T(1) - n.data[i]);
  });
}

template <typename T>
Tensor<T> relu(const Tensor<T>& x) {
  std::vector<T> out(x.numel());
  const auto& xv = x.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = xv[i] > T(0) ? xv[i] : T(0);
  return make_result<T>(x.shape(), std::move(out), OpKind::relu, {x}, [](Node<T>& n) {
    T* gx = detail::input_grad(n, 0);
    const auto& xv = detail::input_data(n, 0);
    for (std::size_t i = 0; i < n.grad.size(); ++i)
      if (xv[i] > T(0)) gx[i] += n.grad[i];
  });
}

// ---------------------------------------------------------------- layout

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
  if (shape_numel(shape) != x.numel())
    throw DimensionError("reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(shape));
  return make_result<T>(std::move(shape), x.values(), OpKind::reshape, {x}, [](Node<T>& n) {
    T* gx = detail::input_grad(n, 0);
    for (std::size_t i = 0; i < n.grad.size(); ++i) gx[i] += n.grad[i];
  });
}

// Output axis i is input axis perm[i].
template <typename T>
Tensor<T> permute(const Tensor<T>& x, const std::vector<std::size_t>& perm) {
  const auto& in_shape = x.shape();
  const std::size_t r = in_shape.size();
  if (perm.size() != r) throw DimensionError("permute: rank mismatch for " + shape_str(in_shape));
  std::vector<bool> used(r, false);
  for (auto p : perm) {
    if (p >= r || used[p]) throw DimensionError("permute: invalid axis order");
    used[p] = true;
  }
  Shape out_shape(r);
  for (std::size_t i = 0; i < r; ++i) out_shape[i] = in_shape[perm[i]];
  const auto in_strides = detail::row_major_strides(in_shape);
  Shape src_stride(r);  // input stride for each output axis
  for (std::size_t i = 0; i < r; ++i) src_stride[i] = in_strides[perm[i]];

  // gather[i] = input offset feeding output element i
  std::vector<std::size_t> gather(x.numel());
  {
    std::vector<std::size_t> idx(r, 0);
    std::size_t off = 0;
    for (std::size_t i = 0; i < gather.size(); ++i) {
      gather[i] = off;
      for (std::size_t d = r; d-- > 0;) {
        ++idx[d];
        off += src_stride[d];
        if (idx[d] < out_shape[d]) break;
        off -= src_stride[d] * idx[d];
        idx[d] = 0;
      }
    }
  }
  std::vector<T> out(x.numel());
  const auto& xv = x.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = xv[gather[i]];
  return make_result<T>(out_shape, std::move(out), OpKind::permute, {x},
                        [gather = std::move(gather)](Node<T>& n) {
                          T* gx = detail::input_grad(n, 0);
                          for (std::size_t i = 0; i < n.grad.size(); ++i) gx[gather[i]] += n.grad[i];
                        });
}

// ---------------------------------------------------------------- linear algebra

// [m×k]·[k×n] or batched [B×m×k]·[B×k×n].
template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  const auto& sa = a.shape();
  const auto& sb = b.shape();
  const bool batched = sa.size() == 3;
  if (!((sa.size() == 2 && sb.size() == 2) || (sa.size() == 3 && sb.size() == 3)) ||
      (batched && sa[0] != sb[0]) || sa[sa.size() - 1] != sb[sb.size() - 2]) {
    throw DimensionError("matmul: incompatible shapes " + shape_str(sa) + " and " + shape_str(sb));
  }
  const std::size_t batch = batched ? sa[0] : 1;
  const std::size_t m = sa[sa.size() - 2], k = sa.back(), nn = sb.back();
  Shape out_shape = batched ? Shape{batch, m, nn} : Shape{m, nn};
  std::vector<T> out(batch * m * nn);
  for (std::size_t bi = 0; bi < batch; ++bi) {
    detail::ConstMapMat<T> A(a.values().data() + bi * m * k, m, k);
    detail::ConstMapMat<T> B(b.values().data() + bi * k * nn, k, nn);
    detail::MapMat<T> C(out.data() + bi * m * nn, m, nn);
    C.noalias() = A * B;
  }
  return make_result<T>(out_shape, std::move(out), OpKind::matmul, {a, b},
                        [batch, m, k, nn](Node<T>& n) {
                          T* ga = detail::input_grad(n, 0);
                          T* gb = detail::input_grad(n, 1);
                          const auto& av = detail::input_data(n, 0);
                          const auto& bv = detail::input_data(n, 1);
                          for (std::size_t bi = 0; bi < batch; ++bi) {
                            detail::ConstMapMat<T> G(n.grad.data() + bi * m * nn, m, nn);
                            if (ga) {
                              detail::ConstMapMat<T> B(bv.data() + bi * k * nn, k, nn);
                              detail::MapMat<T>(ga + bi * m * k, m, k).noalias() += G * B.transpose();
                            }
                            if (gb) {
                              detail::ConstMapMat<T> A(av.data() + bi * m * k, m, k);
                              detail::MapMat<T>(gb + bi * k * nn, k, nn).noalias() += A.transpose() * G;
                            }
                          }
                        });
}

// Numerically stabilized by subtracting the slice maximum.
template <typename T>
Tensor<T> softmax(const Tensor<T>& x, std::size_t axis) {
  const auto& s = x.shape();
  if (axis >= s.size()) throw DimensionError("softmax: axis out of range for " + shape_str(s));
  detail::check_finite<T>(x.data(), "softmax");
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
  for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
  const std::size_t len = s[axis];
  std::vector<T> out(x.numel());
  const auto& xv = x.values();
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t in = 0; in < inner; ++in) {
      const std::size_t base = o * len * inner + in;
      T mx = xv[base];
      for (std::size_t j = 1; j < len; ++j) mx = std::max(mx, xv[base + j * inner]);
      T total = 0;
      for (std::size_t j = 0; j < len; ++j) {
        T e = std::exp(xv[base + j * inner] - mx);
        out[base + j * inner] = e;
        total += e;
      }
      for (std::size_t j = 0; j < len; ++j) out[base + j * inner] /= total;
    }
  }
  return make_result<T>(s, std::move(out), OpKind::softmax, {x}, [outer, inner, len](Node<T>& n) {
    T* gx = detail::input_grad(n, 0);
    const auto& y = n.data;
    const auto& g = n.grad;
    for (std::size_t o = 0; o < outer; ++o) {
      for (std::size_t in = 0; in < inner; ++in) {
        const std::size_t base = o * len * inner + in;
        T dot = 0;
        for (std::size_t j = 0; j < len; ++j) dot += g[base + j * inner] * y[base + j * inner];
        for (std::size_t j = 0; j < len; ++j) {
          const std::size_t i = base + j * inner;
          gx[i] += y[i] * (g[i] - dot);
        }
      }
    }
  });
}

// ---------------------------------------------------------------- convolution

struct Conv2dGeometry {
  std::size_t n, c_in, h, w, c_out, kh, kw, stride, pad, ho, wo;
  std::size_t patch() const { return c_in * kh * kw; }
  std::size_t out_plane() const { return ho * wo; }
  bool pointwise() const { return kh == 1 && kw == 1 && stride == 1 && pad == 0; }
};

namespace detail {

template <typename T>
void im2col(const T* img, const Conv2dGeometry& g, T* cols) {
  const std::size_t plane = g.out_plane();
  for (std::size_t c = 0; c < g.c_in; ++c)
    for (std::size_t ki = 0; ki < g.kh; ++ki)
      for (std::size_t kj = 0; kj < g.kw; ++kj) {
        T* row = cols + ((c * g.kh + ki) * g.kw + kj) * plane;
        for (std::size_t oi = 0; oi < g.ho; ++oi) {
          const long ii = static_cast<long>(oi * g.stride + ki) - static_cast<long>(g.pad);
          for (std::size_t oj = 0; oj < g.wo; ++oj) {
            const long jj = static_cast<long>(oj * g.stride + kj) - static_cast<long>(g.pad);
            row[oi * g.wo + oj] =
                (ii >= 0 && jj >= 0 && ii < static_cast<long>(g.h) && jj < static_cast<long>(g.w))
                    ? img[(c * g.h + ii) * g.w + jj]
                    : T(0);
          }
        }
      }
}

template <typename T>
void col2im_add(const T* cols, const Conv2dGeometry& g, T* img) {
  const std::size_t plane = g.out_plane();
  for (std::size_t c = 0; c < g.c_in; ++c)
    for (std::size_t ki = 0; ki < g.kh; ++ki)
      for (std::size_t kj = 0; kj < g.kw; ++kj) {
        const T* row = cols + ((c * g.kh + ki) * g.kw + kj) * plane;
        for (std::size_t oi = 0; oi < g.ho; ++oi) {
          const long ii = static_cast<long>(oi * g.stride + ki) - static_cast<long>(g.pad);
          if (ii < 0 || ii >= static_cast<long>(g.h)) continue;
          for (std::size_t oj = 0; oj < g.wo; ++oj) {
            const long jj = static_cast<long>(oj * g.stride + kj) - static_cast<long>(g.pad);
            if (jj < 0 || jj >= static_cast<long>(g.w)) continue;
            img[(c * g.h + ii) * g.w + jj] += row[oi * g.wo + oj];
          }
        }
      }
}

}  // namespace detail

// Cross-correlation (no kernel flip). x: N×C_in×H×W, kernel: C_out×C_in×kh×kw,
// optional bias: C_out.
template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& kernel, const std::optional<Tensor<T>>& bias,
                 std::size_t stride = 1, std::size_t padding = 0) {
  const auto& xs = x.shape();
  const auto& ks = kernel.shape();
  if (xs.size() != 4 || ks.size() != 4 || xs[1] != ks[1])
    throw DimensionError("conv2d: input " + shape_str(xs) + " incompatible with kernel " + shape_str(ks));
  if (stride == 0) throw DimensionError("conv2d: stride must be positive");
  if (bias && (bias->rank() != 1 || bias->dim(0) != ks[0]))
    throw DimensionError("conv2d: bias " + shape_str(bias->shape()) + " does not match kernel " +
                         shape_str(ks));
  if (xs[2] + 2 * padding < ks[2] || xs[3] + 2 * padding < ks[3])
    throw DimensionError("conv2d: kernel " + shape_str(ks) + " larger than padded input " + shape_str(xs));
  Conv2dGeometry g{xs[0], xs[1], xs[2], xs[3], ks[0], ks[2], ks[3], stride, padding, 0, 0};
  g.ho = (g.h + 2 * padding - g.kh) / stride + 1;
  g.wo = (g.w + 2 * padding - g.kw) / stride + 1;

  const std::size_t plane = g.out_plane(), patch = g.patch();
  std::vector<T> out(g.n * g.c_out * plane);
  std::vector<T> cols(g.pointwise() ? 0 : patch * plane);
  detail::ConstMapMat<T> W(kernel.values().data(), g.c_out, patch);
  const auto& xv = x.values();
  for (std::size_t i = 0; i < g.n; ++i) {
    const T* img = xv.data() + i * g.c_in * g.h * g.w;
    const T* colp = img;
    if (!g.pointwise()) {
      detail::im2col(img, g, cols.data());
      colp = cols.data();
    }
    detail::MapMat<T> Y(out.data() + i * g.c_out * plane, g.c_out, plane);
    Y.noalias() = W * detail::ConstMapMat<T>(colp, patch, plane);
    if (bias) {
      const auto& bv = bias->values();
      for (std::size_t o = 0; o < g.c_out; ++o) Y.row(o).array() += bv[o];
    }
  }

  Shape out_shape{g.n, g.c_out, g.ho, g.wo};
  auto backward = [g](Node<T>& n) {
    const std::size_t plane = g.out_plane(), patch = g.patch();
    T* gx = detail::input_grad(n, 0);
    T* gk = detail::input_grad(n, 1);
    T* gb = n.inputs.size() > 2 ? detail::input_grad(n, 2) : nullptr;
    const auto& xv = detail::input_data(n, 0);
    detail::ConstMapMat<T> W(detail::input_data(n, 1).data(), g.c_out, patch);
    std::vector<T> cols(g.pointwise() ? 0 : patch * plane);
    std::vector<T> dcols(gx && !g.pointwise() ? patch * plane : 0);
    for (std::size_t i = 0; i < g.n; ++i) {
      detail::ConstMapMat<T> G(n.grad.data() + i * g.c_out * plane, g.c_out, plane);
      if (gb)
        for (std::size_t o = 0; o < g.c_out; ++o) gb[o] += G.row(o).sum();
      const T* img = xv.data() + i * g.c_in * g.h * g.w;
      if (gk) {
        const T* colp = img;
        if (!g.pointwise()) {
          detail::im2col(img, g, cols.data());
          colp = cols.data();
        }
        detail::MapMat<T>(gk, g.c_out, patch).noalias() +=
            G * detail::ConstMapMat<T>(colp, patch, plane).transpose();
      }
      if (gx) {
        T* gimg = gx + i * g.c_in * g.h * g.w;
        if (g.pointwise()) {
          detail::MapMat<T>(gimg, patch, plane).noalias() += W.transpose() * G;
        } else {
          detail::MapMat<T>(dcols.data(), patch, plane).noalias() = W.transpose() * G;
          detail::col2im_add(dcols.data(), g, gimg);
        }
      }
    }
  };
  if (bias) return make_result<T>(out_shape, std::move(out), OpKind::conv2d, {x, kernel, *bias}, backward);
  return make_result<T>(out_shape, std::move(out), OpKind::conv2d, {x, kernel}, backward);
}

// ---------------------------------------------------------------- pooling & reductions

// Output cell (i, j) averages rows [floor(i·H/oh), ceil((i+1)·H/oh)) and the
// analogous column bin.
template <typename T>
Tensor<T> adaptive_avg_pool2d(const Tensor<T>& x, std::size_t out_h, std::size_t out_w) {
  const auto& s = x.shape();
  if (s.size() != 4) throw DimensionError("adaptive_avg_pool2d: expected N×C×H×W, got " + shape_str(s));
  if (out_h == 0 || out_w == 0) throw DimensionError("adaptive_avg_pool2d: zero output extent");
  if (out_h > s[2] || out_w > s[3])
    throw DimensionError("adaptive_avg_pool2d: output " + std::to_string(out_h) + "x" +
                         std::to_string(out_w) + " exceeds input " + shape_str(s));
  const std::size_t planes = s[0] * s[1], h = s[2], w = s[3];
  auto bin = [](std::size_t i, std::size_t in, std::size_t out) {
    return std::pair<std::size_t, std::size_t>{i * in / out, ((i + 1) * in + out - 1) / out};
  };
  std::vector<T> out(planes * out_h * out_w);
  const auto& xv = x.values();
  for (std::size_t p = 0; p < planes; ++p)
    for (std::size_t i = 0; i < out_h; ++i) {
      auto [r0, r1] = bin(i, h, out_h);
      for (std::size_t j = 0; j < out_w; ++j) {
        auto [c0, c1] = bin(j, w, out_w);
        T acc = 0;
        for (std::size_t r = r0; r < r1; ++r)
          for (std::size_t c = c0; c < c1; ++c) acc += xv[(p * h + r) * w + c];
        out[(p * out_h + i) * out_w + j] = acc / static_cast<T>((r1 - r0) * (c1 - c0));
      }
    }
  return make_result<T>(Shape{s[0], s[1], out_h, out_w}, std::move(out), OpKind::adaptive_avg_pool2d, {x},
                        [=](Node<T>& n) {
                          T* gx = detail::input_grad(n, 0);
                          for (std::size_t p = 0; p < planes; ++p)
                            for (std::size_t i = 0; i < out_h; ++i) {
                              auto [r0, r1] = bin(i, h, out_h);
                              for (std::size_t j = 0; j < out_w; ++j) {
                                auto [c0, c1] = bin(j, w, out_w);
                                const T gv = n.grad[(p * out_h + i) * out_w + j] /
                                             static_cast<T>((r1 - r0) * (c1 - c0));
                                for (std::size_t r = r0; r < r1; ++r)
                                  for (std::size_t c = c0; c < c1; ++c) gx[(p * h + r) * w + c] += gv;
                              }
                            }
                        });
}

// Mean over one axis; the axis is removed (a rank-1 input yields shape {1}).
template <typename T>
Tensor<T> mean_axis(const Tensor<T>& x, std::size_t axis) {
  const auto& s = x.shape();
  if (axis >= s.size()) throw DimensionError("mean_axis: axis out of range for " + shape_str(s));
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
  for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
  const std::size_t len = s[axis];
  Shape out_shape;
  for (std::size_t i = 0; i < s.size(); ++i)
    if (i != axis) out_shape.push_back(s[i]);
  if (out_shape.empty()) out_shape = {1};
  std::vector<T> out(outer * inner, T(0));
  const auto& xv = x.values();
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t j = 0; j < len; ++j)
      for (std::size_t in = 0; in < inner; ++in) out[o * inner + in] += xv[(o * len + j) * inner + in];
  for (auto& v : out) v /= static_cast<T>(len);
  return make_result<T>(out_shape, std::move(out), OpKind::mean_axis, {x}, [outer, inner, len](Node<T>& n) {
    T* gx = detail::input_grad(n, 0);
    const T inv = T(1) / static_cast<T>(len);
    for (std::size_t o = 0; o < outer; ++o)
      for (std::size_t j = 0; j < len; ++j)
        for (std::size_t in = 0; in < inner; ++in) gx[(o * len + j) * inner + in] += n.grad[o * inner + in] * inv;
  });
}

template <typename T>
Tensor<T> sum(const Tensor<T>& x) {
  T acc = 0;
  for (auto v : x.values()) acc += v;
  return make_result<T>(Shape{1}, {acc}, OpKind::sum, {x}, [](Node<T>& n) {
    T* gx = detail::input_grad(n, 0);
    const std::size_t count = n.inputs[0]->data.size();
    for (std::size_t i = 0; i < count; ++i) gx[i] += n.grad[0];
  });
}

template <typename T>
Tensor<T> mean(const Tensor<T>& x) {
  return scale(sum(x), T(1) / static_cast<T>(x.numel()));
}

// ---------------------------------------------------------------- normalization

inline constexpr double kBatchNormEps = 1e-5;
inline constexpr double kBatchNormMomentum = 0.1;

// x: N×C×H×W or N×C. Training mode normalizes with batch statistics and
// updates the running buffers in place; eval mode uses the running buffers.
template <typename T>
Tensor<T> batch_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                     Tensor<T>& running_mean, Tensor<T>& running_var, bool training,
                     double momentum = kBatchNormMomentum, double eps = kBatchNormEps) {
  const auto& s = x.shape();
  if ((s.size() != 4 && s.size() != 2) || gamma.numel() != s[1] || beta.numel() != s[1] ||
      running_mean.numel() != s[1] || running_var.numel() != s[1])
    throw DimensionError("batch_norm: input " + shape_str(s) + " vs parameters of size " +
                         std::to_string(gamma.numel()));
  const std::size_t n_img = s[0], ch = s[1], plane = s.size() == 4 ? s[2] * s[3] : 1;
  const std::size_t count = n_img * plane;
  const auto& xv = x.values();
  std::vector<T> mean_c(ch, T(0)), inv_std(ch);
  if (training) {
    std::vector<T> var_c(ch, T(0));
    for (std::size_t i = 0; i < n_img; ++i)
      for (std::size_t c = 0; c < ch; ++c) {
        const T* p = xv.data() + (i * ch + c) * plane;
        for (std::size_t k = 0; k < plane; ++k) mean_c[c] += p[k];
      }
    for (auto& m : mean_c) m /= static_cast<T>(count);
    for (std::size_t i = 0; i < n_img; ++i)
      for (std::size_t c = 0; c < ch; ++c) {
        const T* p = xv.data() + (i * ch + c) * plane;
        for (std::size_t k = 0; k < plane; ++k) {
          const T d = p[k] - mean_c[c];
          var_c[c] += d * d;
        }
      }
    auto rm = running_mean.mutable_data();
    auto rv = running_var.mutable_data();
    const T mom = static_cast<T>(momentum);
    for (std::size_t c = 0; c < ch; ++c) {
      const T biased = var_c[c] / static_cast<T>(count);
      const T unbiased = count > 1 ? var_c[c] / static_cast<T>(count - 1) : biased;
      inv_std[c] = T(1) / std::sqrt(biased + static_cast<T>(eps));
      rm[c] = (T(1) - mom) * rm[c] + mom * mean_c[c];
      rv[c] = (T(1) - mom) * rv[c] + mom * unbiased;
    }
  } else {
    for (std::size_t c = 0; c < ch; ++c) {
      mean_c[c] = running_mean[c];
      inv_std[c] = T(1) / std::sqrt(running_var[c] + static_cast<T>(eps));
    }
  }
  std::vector<T> xhat(xv.size()), out(xv.size());
  const auto& gv = gamma.values();
  const auto& bv = beta.values();
  for (std::size_t i = 0; i < n_img; ++i)
    for (std::size_t c = 0; c < ch; ++c) {
      const std::size_t base = (i * ch + c) * plane;
      for (std::size_t k = 0; k < plane; ++k) {
        xhat[base + k] = (xv[base + k] - mean_c[c]) * inv_std[c];
        out[base + k] = gv[c] * xhat[base + k] + bv[c];
      }
    }
  return make_result<T>(s, std::move(out), OpKind::batch_norm, {x, gamma, beta},
                        [=, xhat = std::move(xhat), inv_std = std::move(inv_std)](Node<T>& n) {
                          T* gx = detail::input_grad(n, 0);
                          T* gg = detail::input_grad(n, 1);
                          T* gbeta = detail::input_grad(n, 2);
                          const auto& gam = detail::input_data(n, 1);
                          const auto& g = n.grad;
                          std::vector<T> sum_g(ch, T(0)), sum_gx(ch, T(0));
                          for (std::size_t i = 0; i < n_img; ++i)
                            for (std::size_t c = 0; c < ch; ++c) {
                              const std::size_t base = (i * ch + c) * plane;
                              for (std::size_t k = 0; k < plane; ++k) {
                                sum_g[c] += g[base + k];
                                sum_gx[c] += g[base + k] * xhat[base + k];
                              }
                            }
                          for (std::size_t c = 0; c < ch; ++c) {
                            if (gg) gg[c] += sum_gx[c];
                            if (gbeta) gbeta[c] += sum_g[c];
                          }
                          if (!gx) return;
                          const T inv_count = T(1) / static_cast<T>(count);
                          for (std::size_t i = 0; i < n_img; ++i)
                            for (std::size_t c = 0; c < ch; ++c) {
                              const std::size_t base = (i * ch + c) * plane;
                              const T k_scale = gam[c] * inv_std[c];
                              for (std::size_t k = 0; k < plane; ++k) {
                                if (training) {
                                  gx[base + k] += k_scale * (g[base + k] - sum_g[c] * inv_count -
                                                             xhat[base + k] * sum_gx[c] * inv_count);
                                } else {
                                  gx[base + k] += k_scale * g[base + k];
                                }
                              }
                            }
                        });
}

// (x - mean) / (population_std + eps) along one axis. Zero-variance slices map
// to zero and receive no gradient through the std term.
template <typename T>
Tensor<T> standardize(const Tensor<T>& x, std::size_t axis, double eps) {
  const auto& s = x.shape();
  if (axis >= s.size()) throw DimensionError("standardize: axis out of range for " + shape_str(s));
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
  for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
  const std::size_t len = s[axis];
  const auto& xv = x.values();
  std::vector<T> out(xv.size()), sigma(outer * inner);
  const T e = static_cast<T>(eps);
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t in = 0; in < inner; ++in) {
      const std::size_t base = o * len * inner + in;
      T mu = 0;
      for (std::size_t j = 0; j < len; ++j) mu += xv[base + j * inner];
      mu /= static_cast<T>(len);
      T var = 0;
      for (std::size_t j = 0; j < len; ++j) {
        const T d = xv[base + j * inner] - mu;
        var += d * d;
      }
      const T sd = std::sqrt(var / static_cast<T>(len));
      sigma[o * inner + in] = sd;
      for (std::size_t j = 0; j < len; ++j) out[base + j * inner] = (xv[base + j * inner] - mu) / (sd + e);
    }
  return make_result<T>(s, std::move(out), OpKind::standardize, {x},
                        [=, sigma = std::move(sigma)](Node<T>& n) {
                          T* gx = detail::input_grad(n, 0);
                          const auto& y = n.data;
                          const auto& g = n.grad;
                          const T inv_len = T(1) / static_cast<T>(len);
                          for (std::size_t o = 0; o < outer; ++o)
                            for (std::size_t in = 0; in < inner; ++in) {
                              const std::size_t base = o * len * inner + in;
                              const T sd = sigma[o * inner + in];
                              const T denom = sd + e;
                              T mean_g = 0, dot = 0;
                              for (std::size_t j = 0; j < len; ++j) {
                                mean_g += g[base + j * inner];
                                dot += g[base + j * inner] * y[base + j * inner];
                              }
                              mean_g *= inv_len;
                              // y = c / denom, so c = y * denom; the std term is
                              // c_j / (len·sd·denom²) · Σ g_i c_i.
                              const T std_term = sd > T(0) ? dot * denom / (static_cast<T>(len) * sd) : T(0);
                              for (std::size_t j = 0; j < len; ++j) {
                                const std::size_t i = base + j * inner;
                                gx[i] += (g[i] - mean_g) / denom - y[i] * std_term / denom;
                              }
                            }
                        });
}

// ---------------------------------------------------------------- correlation volume

// desc: (clips·T)×D×N, holding N descriptors of length D per frame (already
// standardized along D). For every frame t of a clip the result stacks, for
// each other frame k ascending (skipping t), the N×N block
//   out[slot(k)·N + n', n] = factor · Σ_d desc[k, d, n'] · desc[t, d, n].
// Shape: (clips·T)×((T−1)·N)×N. Requires T ≥ 2.
template <typename T>
Tensor<T> ncc_volume(const Tensor<T>& desc, std::size_t clip_len, T factor) {
  const auto& s = desc.shape();
  if (s.size() != 3 || clip_len < 2 || s[0] % clip_len != 0)
    throw DimensionError("ncc_volume: descriptors " + shape_str(s) + " incompatible with clip length " +
                         std::to_string(clip_len));
  const std::size_t frames = s[0], d = s[1], nd = s[2], clips = frames / clip_len;
  const std::size_t slots = clip_len - 1, block = nd * nd;
  std::vector<T> out(frames * slots * block);
  const auto& dv = desc.values();
  for (std::size_t b = 0; b < clips; ++b)
    for (std::size_t t = 0; t < clip_len; ++t) {
      const std::size_t ft = b * clip_len + t;
      detail::ConstMapMat<T> Xt(dv.data() + ft * d * nd, d, nd);
      std::size_t slot = 0;
      for (std::size_t k = 0; k < clip_len; ++k) {
        if (k == t) continue;
        detail::ConstMapMat<T> Xk(dv.data() + (b * clip_len + k) * d * nd, d, nd);
        detail::MapMat<T> V(out.data() + (ft * slots + slot) * block, nd, nd);
        V.noalias() = factor * (Xk.transpose() * Xt);
        ++slot;
      }
    }
  return make_result<T>(Shape{frames, slots * nd, nd}, std::move(out), OpKind::ncc_volume, {desc},
                        [=](Node<T>& n) {
                          T* gx = detail::input_grad(n, 0);
                          const auto& dv = detail::input_data(n, 0);
                          for (std::size_t b = 0; b < clips; ++b)
                            for (std::size_t t = 0; t < clip_len; ++t) {
                              const std::size_t ft = b * clip_len + t;
                              detail::ConstMapMat<T> Xt(dv.data() + ft * d * nd, d, nd);
                              detail::MapMat<T> Gt(gx + ft * d * nd, d, nd);
                              std::size_t slot = 0;
                              for (std::size_t k = 0; k < clip_len; ++k) {
                                if (k == t) continue;
                                const std::size_t fk = b * clip_len + k;
                                detail::ConstMapMat<T> Xk(dv.data() + fk * d * nd, d, nd);
                                detail::ConstMapMat<T> G(n.grad.data() + (ft * slots + slot) * block, nd, nd);
                                Gt.noalias() += factor * (Xk * G);
                                detail::MapMat<T>(gx + fk * d * nd, d, nd).noalias() +=
                                    factor * (Xt * G.transpose());
                                ++slot;
                              }
                            }
                        });
}

// ---------------------------------------------------------------- metric learning

// Euclidean distances between rows of features (n×d). The diagonal is zero and
// coincident rows pass no gradient.
template <typename T>
Tensor<T> pairwise_distances(const Tensor<T>& features) {
  const auto& s = features.shape();
  if (s.size() != 2) throw DimensionError("pairwise_distances: expected n×d, got " + shape_str(s));
  const std::size_t n = s[0], d = s[1];
  const auto& f = features.values();
  std::vector<T> out(n * n, T(0));
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j) {
      T acc = 0;
      for (std::size_t k = 0; k < d; ++k) {
        const T diff = f[i * d + k] - f[j * d + k];
        acc += diff * diff;
      }
      out[i * n + j] = out[j * n + i] = std::sqrt(acc);
    }
  return make_result<T>(Shape{n, n}, std::move(out), OpKind::pairwise_distances, {features},
                        [n, d](Node<T>& node) {
                          T* gf = detail::input_grad(node, 0);
                          const auto& f = detail::input_data(node, 0);
                          for (std::size_t i = 0; i < n; ++i)
                            for (std::size_t j = 0; j < n; ++j) {
                              const T dist = node.data[i * n + j];
                              if (i == j || dist <= T(0)) continue;
                              const T c = node.grad[i * n + j] / dist;
                              for (std::size_t k = 0; k < d; ++k) {
                                const T diff = c * (f[i * d + k] - f[j * d + k]);
                                gf[i * d + k] += diff;
                                gf[j * d + k] -= diff;
                              }
                            }
                        });
}

// Mean over anchors of max(0, margin + hardest positive − hardest negative).
// The anchor itself is not a positive. Ties pick the lowest index.
template <typename T>
Tensor<T> batch_hard_triplet(const Tensor<T>& dist, std::span<const int> labels, T margin) {
  const auto& s = dist.shape();
  if (s.size() != 2 || s[0] != s[1] || s[0] != labels.size())
    throw DimensionError("batch_hard_triplet: distance matrix " + shape_str(s) + " vs " +
                         std::to_string(labels.size()) + " labels");
  const std::size_t n = s[0];
  const auto& dv = dist.values();
  std::vector<std::size_t> hard_pos(n), hard_neg(n);
  std::vector<char> active(n, 0);
  T total = 0;
  for (std::size_t a = 0; a < n; ++a) {
    std::optional<std::size_t> p, q;
    for (std::size_t j = 0; j < n; ++j) {
      if (j == a) continue;
      const T v = dv[a * n + j];
      if (labels[j] == labels[a]) {
        if (!p || v > dv[a * n + *p]) p = j;
      } else if (!q || v < dv[a * n + *q]) {
        q = j;
      }
    }
    if (!p) throw ContractError("batch_hard_triplet: label " + std::to_string(labels[a]) + " has a single sample");
    if (!q) throw ContractError("batch_hard_triplet: batch holds a single identity");
    hard_pos[a] = *p;
    hard_neg[a] = *q;
    const T l = margin + dv[a * n + *p] - dv[a * n + *q];
    if (l > T(0)) {
      total += l;
      active[a] = 1;
    }
  }
  return make_result<T>(Shape{1}, {total / static_cast<T>(n)}, OpKind::batch_hard_triplet, {dist},
                        [=](Node<T>& node) {
                          T* gd = detail::input_grad(node, 0);
                          const T g = node.grad[0] / static_cast<T>(n);
                          for (std::size_t a = 0; a < n; ++a) {
                            if (!active[a]) continue;
                            gd[a * n + hard_pos[a]] += g;
                            gd[a * n + hard_neg[a]] -= g;
                          }
                        });
}

// Mean over rows of −Σ_k q_k·log softmax(logits)_k, q_k = (1−ε)[k=y] + ε/K.
template <typename T>
Tensor<T> label_smooth_ce(const Tensor<T>& logits, std::span<const int> labels, T epsilon) {
  const auto& s = logits.shape();
  if (s.size() != 2 || s[0] != labels.size())
    throw DimensionError("label_smooth_ce: logits " + shape_str(s) + " vs " + std::to_string(labels.size()) +
                         " labels");
  if (!(epsilon >= T(0) && epsilon < T(1))) throw ContractError("label_smooth_ce: epsilon must lie in [0, 1)");
  detail::check_finite<T>(logits.data(), "label_smooth_ce");
  const std::size_t n = s[0], k = s[1];
  for (int y : labels)
    if (y < 0 || static_cast<std::size_t>(y) >= k)
      throw ContractError("label_smooth_ce: label " + std::to_string(y) + " outside [0, " + std::to_string(k) + ")");
  const auto& lv = logits.values();
  std::vector<T> probs(n * k);
  T total = 0;
  const T off = epsilon / static_cast<T>(k);
  for (std::size_t i = 0; i < n; ++i) {
    const T* row = lv.data() + i * k;
    T mx = *std::max_element(row, row + k);
    T z = 0;
    for (std::size_t j = 0; j < k; ++j) z += std::exp(row[j] - mx);
    const T log_z = std::log(z) + mx;
    for (std::size_t j = 0; j < k; ++j) {
      const T log_p = row[j] - log_z;
      probs[i * k + j] = std::exp(log_p);
      const T q = off + (static_cast<std::size_t>(labels[i]) == j ? T(1) - epsilon : T(0));
      total -= q * log_p;
    }
  }
  std::vector<int> ys(labels.begin(), labels.end());
  return make_result<T>(Shape{1}, {total / static_cast<T>(n)}, OpKind::label_smooth_ce, {logits},
                        [=, probs = std::move(probs), ys = std::move(ys)](Node<T>& node) {
                          T* gl = detail::input_grad(node, 0);
                          const T g = node.grad[0] / static_cast<T>(n);
                          for (std::size_t i = 0; i < n; ++i)
                            for (std::size_t j = 0; j < k; ++j) {
                              const T q = off + (static_cast<std::size_t>(ys[i]) == j ? T(1) - epsilon : T(0));
                              gl[i * k + j] += g * (probs[i * k + j] - q);
                            }
                        });
}

// x: n×in, weight: out×in, bias: out.
template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias) {
  auto y = matmul(x, permute(weight, {1, 0}));
  return add(y, reshape(bias, {1, bias.numel()}));
}

}  // namespace cstnet
