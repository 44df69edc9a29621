#pragma once

// Autodiff operations: the layer primitives plus the graph-pooling and loss
// ops the models are built from. Forward kernels may parallelize internally;
// every output element is produced by exactly one worker with a fixed
// reduction order, so results do not depend on the worker count.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <vector>

#include "convmpn/kernels.hpp"
#include "convmpn/parallel.hpp"
#include "convmpn/tensor.hpp"

namespace convmpn {

using Adjacency = std::vector<std::vector<std::int32_t>>;

enum class Pooling { max, sum, mean };

template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape())
    op_error("add", "shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  std::vector<T> out(a.vec());
  const T* pb = b.data();
  for (size_t i = 0; i < out.size(); ++i) out[i] += pb[i];
  auto an = a.node();
  auto bn = b.node();
  auto t = Tensor<T>::make_op(a.shape(), std::move(out), {an, bn}, [an, bn](TensorNode<T>& self) {
    if (an->requires_grad) {
      auto& g = an->ensure_grad();
      for (size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
    if (bn->requires_grad) {
      auto& g = bn->ensure_grad();
      for (size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
  });
  debug_check_finite(t, "add");
  return t;
}

template <class T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape())
    op_error("mul", "shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  std::vector<T> out(a.vec());
  const T* pb = b.data();
  for (size_t i = 0; i < out.size(); ++i) out[i] *= pb[i];
  auto an = a.node();
  auto bn = b.node();
  return Tensor<T>::make_op(a.shape(), std::move(out), {an, bn}, [an, bn](TensorNode<T>& self) {
    if (an->requires_grad) {
      auto& g = an->ensure_grad();
      for (size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * bn->data[i];
    }
    if (bn->requires_grad) {
      auto& g = bn->ensure_grad();
      for (size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * an->data[i];
    }
  });
}

template <class T>
Tensor<T> relu(const Tensor<T>& x) {
  std::vector<T> out(x.vec());
  for (auto& v : out)
    if (v < T(0)) v = T(0);
  auto xn = x.node();
  auto t = Tensor<T>::make_op(x.shape(), std::move(out), {xn}, [xn](TensorNode<T>& self) {
    if (!xn->requires_grad) return;
    auto& g = xn->ensure_grad();
    const T* xd = xn->data.data();
    for (size_t i = 0; i < g.size(); ++i)
      if (xd[i] > T(0)) g[i] += self.grad[i];
  });
  debug_check_finite(t, "relu");
  return t;
}

template <class T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
  if (numel_of(shape) != x.numel())
    op_error("reshape", "cannot view " + shape_str(x.shape()) + " as " + shape_str(shape));
  auto xn = x.node();
  return Tensor<T>::make_op(std::move(shape), x.vec(), {xn}, [xn](TensorNode<T>& self) {
    if (!xn->requires_grad) return;
    auto& g = xn->ensure_grad();
    for (size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
  });
}

template <class T>
Tensor<T> sum_all(const Tensor<T>& x) {
  T acc = 0;
  for (std::int64_t i = 0; i < x.numel(); ++i) acc += x.data()[i];
  auto xn = x.node();
  return Tensor<T>::make_op({}, {acc}, {xn}, [xn](TensorNode<T>& self) {
    if (!xn->requires_grad) return;
    auto& g = xn->ensure_grad();
    const T s = self.grad[0];
    for (auto& v : g) v += s;
  });
}

// Concatenation along the channel axis: rank-4 pairs concat on dim 1,
// rank-3 on dim 0, rank-2 (vector features) on dim 1.
template <class T>
Tensor<T> concat_channels(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() != b.rank() || a.rank() < 2 || a.rank() > 4)
    op_error("concat_channels",
             "rank mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  const size_t axis = a.rank() == 3 ? 0 : 1;
  Shape sa = a.shape(), sb = b.shape();
  for (size_t i = 0; i < sa.size(); ++i)
    if (i != axis && sa[i] != sb[i])
      op_error("concat_channels",
               "shape mismatch " + shape_str(sa) + " vs " + shape_str(sb));
  Shape out_shape = sa;
  out_shape[axis] += sb[axis];

  // Treat as [outer, axis_dim, inner] blocks.
  std::int64_t outer = 1, inner = 1;
  for (size_t i = 0; i < axis; ++i) outer *= sa[i];
  for (size_t i = axis + 1; i < sa.size(); ++i) inner *= sa[i];
  const std::int64_t ca = sa[axis] * inner, cb = sb[axis] * inner;

  std::vector<T> out(static_cast<size_t>(numel_of(out_shape)));
  for (std::int64_t o = 0; o < outer; ++o) {
    std::copy_n(a.data() + o * ca, ca, out.data() + o * (ca + cb));
    std::copy_n(b.data() + o * cb, cb, out.data() + o * (ca + cb) + ca);
  }
  auto an = a.node();
  auto bn = b.node();
  return Tensor<T>::make_op(
      out_shape, std::move(out), {an, bn}, [an, bn, outer, ca, cb](TensorNode<T>& self) {
        const T* g = self.grad.data();
        if (an->requires_grad) {
          auto& ga = an->ensure_grad();
          for (std::int64_t o = 0; o < outer; ++o)
            for (std::int64_t i = 0; i < ca; ++i) ga[o * ca + i] += g[o * (ca + cb) + i];
        }
        if (bn->requires_grad) {
          auto& gb = bn->ensure_grad();
          for (std::int64_t o = 0; o < outer; ++o)
            for (std::int64_t i = 0; i < cb; ++i) gb[o * cb + i] += g[o * (ca + cb) + ca + i];
        }
      });
}

// 2-D convolution. input is [Cin,H,W] or [N,Cin,H,W]; weight [Cout,Cin,kH,kW];
// bias [Cout]. Output spatial size floor((X + 2*pad - k)/stride) + 1.
template <class T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& weight, const Tensor<T>& bias,
                 int stride = 1, int padding = 0) {
  if (weight.rank() != 4)
    op_error("conv2d", "weight must be rank 4, got " + shape_str(weight.shape()));
  const bool batched = input.rank() == 4;
  if (!batched && input.rank() != 3)
    op_error("conv2d", "input must be rank 3 or 4, got " + shape_str(input.shape()));
  if (stride < 1) op_error("conv2d", "stride must be >= 1");
  if (padding < 0) op_error("conv2d", "padding must be >= 0");

  const std::int64_t n = batched ? input.dim(0) : 1;
  const std::int64_t cin = input.dim(batched ? 1 : 0);
  const std::int64_t h = input.dim(batched ? 2 : 1);
  const std::int64_t w = input.dim(batched ? 3 : 2);
  const std::int64_t cout = weight.dim(0), kh = weight.dim(2), kw = weight.dim(3);
  if (weight.dim(1) != cin)
    op_error("conv2d", "input channels " + shape_str(input.shape()) +
                           " do not match weights " + shape_str(weight.shape()));
  if (bias.rank() != 1 || bias.dim(0) != cout)
    op_error("conv2d", "bias " + shape_str(bias.shape()) + " does not match weights " +
                           shape_str(weight.shape()));
  if (h + 2 * padding < kh || w + 2 * padding < kw)
    op_error("conv2d", "kernel " + shape_str(weight.shape()) + " does not fit input " +
                           shape_str(input.shape()) + " with padding " + std::to_string(padding));

  const std::int64_t hout = (h + 2 * padding - kh) / stride + 1;
  const std::int64_t wout = (w + 2 * padding - kw) / stride + 1;
  const std::int64_t kk = cin * kh * kw;
  const std::int64_t ncols = hout * wout;
  const std::int64_t in_sz = cin * h * w, out_sz = cout * ncols;

  Shape out_shape = batched ? Shape{n, cout, hout, wout} : Shape{cout, hout, wout};
  std::vector<T> out(static_cast<size_t>(n * out_sz));
  const T* xd = input.data();
  const T* wd = weight.data();
  const T* bd = bias.data();

  auto run_image = [&](std::int64_t i, std::vector<T>& cols) {
    detail::im2col(xd + i * in_sz, cin, h, w, kh, kw, stride, padding, hout, wout, cols.data());
    T* y = out.data() + i * out_sz;
    detail::gemm_nn(cout, ncols, kk, wd, cols.data(), y, false, n == 1);
    for (std::int64_t c = 0; c < cout; ++c) {
      const T b = bd[c];
      T* row = y + c * ncols;
      for (std::int64_t j = 0; j < ncols; ++j) row[j] += b;
    }
  };
  if (n > 1) {
    parallel_for(n, [&](std::int64_t i) {
      std::vector<T> cols(static_cast<size_t>(kk * ncols));
      run_image(i, cols);
    });
  } else {
    std::vector<T> cols(static_cast<size_t>(kk * ncols));
    run_image(0, cols);
  }

  auto xn = input.node();
  auto wn = weight.node();
  auto bn = bias.node();
  auto backprop = [xn, wn, bn, n, cin, h, w, cout, kh, kw, stride, padding, hout, wout, kk,
                   ncols, in_sz, out_sz](TensorNode<T>& self) {
    const T* dy = self.grad.data();
    const T* xd = xn->data.data();
    const T* wd = wn->data.data();
    if (bn->requires_grad) {
      auto& db = bn->ensure_grad();
      for (std::int64_t i = 0; i < n; ++i)
        for (std::int64_t c = 0; c < cout; ++c) {
          const T* row = dy + i * out_sz + c * ncols;
          T acc = 0;
          for (std::int64_t j = 0; j < ncols; ++j) acc += row[j];
          db[c] += acc;
        }
    }
    if (!xn->requires_grad && !wn->requires_grad) return;

    // Pass 1: rebuild the column matrices; push input gradients per image.
    std::vector<T> all_cols(static_cast<size_t>(n * kk * ncols));
    T* dxd = nullptr;
    if (xn->requires_grad) dxd = xn->ensure_grad().data();
    parallel_for(n, [&](std::int64_t i) {
      T* cols = all_cols.data() + i * kk * ncols;
      detail::im2col(xd + i * in_sz, cin, h, w, kh, kw, stride, padding, hout, wout, cols);
      if (dxd) {
        std::vector<T> dcols(static_cast<size_t>(kk * ncols));
        detail::gemm_tn(kk, ncols, cout, wd, dy + i * out_sz, dcols.data());
        detail::col2im_add(dcols.data(), cin, h, w, kh, kw, stride, padding, hout, wout,
                           dxd + i * in_sz);
      }
    });
    // Pass 2: weight gradient, parallel over output-channel rows.
    if (wn->requires_grad) {
      T* dw = wn->ensure_grad().data();
      parallel_for(cout, [&](std::int64_t m) {
        for (std::int64_t i = 0; i < n; ++i) {
          const T* dyr = dy + i * out_sz + m * ncols;
          const T* cols = all_cols.data() + i * kk * ncols;
          T* dwr = dw + m * kk;
          for (std::int64_t k = 0; k < kk; ++k) {
            const T* cr = cols + k * ncols;
            T acc = 0;
            for (std::int64_t j = 0; j < ncols; ++j) acc += dyr[j] * cr[j];
            dwr[k] += acc;
          }
        }
      });
    }
  };
  auto t = Tensor<T>::make_op(std::move(out_shape), std::move(out), {xn, wn, bn},
                              std::move(backprop));
  debug_check_finite(t, "conv2d");
  return t;
}

// Batch normalization over [N,C,H,W] (per channel) or [N,C] (per feature).
// Train mode normalizes by biased batch statistics and updates the running
// stats in place; eval mode uses the running stats as passed in.
template <class T>
Tensor<T> batch_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                     std::vector<T>& running_mean, std::vector<T>& running_var, bool training,
                     T momentum = T(0.1), T eps = T(1e-5)) {
  if (x.rank() != 4 && x.rank() != 2)
    op_error("batch_norm", "input must be rank 2 or 4, got " + shape_str(x.shape()));
  const std::int64_t n = x.dim(0);
  const std::int64_t c = x.dim(1);
  const std::int64_t hw = x.rank() == 4 ? x.dim(2) * x.dim(3) : 1;
  const std::int64_t m = n * hw;
  if (m < 1) op_error("batch_norm", "zero-size channel slab in " + shape_str(x.shape()));
  if (gamma.numel() != c || beta.numel() != c ||
      static_cast<std::int64_t>(running_mean.size()) != c ||
      static_cast<std::int64_t>(running_var.size()) != c)
    op_error("batch_norm", "parameter size does not match channels of " + shape_str(x.shape()));

  const T* xd = x.data();
  const T* gd = gamma.data();
  const T* bd = beta.data();
  std::vector<T> out(static_cast<size_t>(x.numel()));
  std::vector<T> mean(static_cast<size_t>(c)), invstd(static_cast<size_t>(c));

  auto slab = [&](std::int64_t ni, std::int64_t ci) { return (ni * c + ci) * hw; };

  if (training) {
    for (std::int64_t ci = 0; ci < c; ++ci) {
      T mu = 0;
      for (std::int64_t ni = 0; ni < n; ++ni) {
        const T* p = xd + slab(ni, ci);
        for (std::int64_t j = 0; j < hw; ++j) mu += p[j];
      }
      mu /= static_cast<T>(m);
      T var = 0;
      for (std::int64_t ni = 0; ni < n; ++ni) {
        const T* p = xd + slab(ni, ci);
        for (std::int64_t j = 0; j < hw; ++j) {
          const T d = p[j] - mu;
          var += d * d;
        }
      }
      var /= static_cast<T>(m);
      mean[ci] = mu;
      invstd[ci] = T(1) / std::sqrt(var + eps);
      running_mean[ci] = (T(1) - momentum) * running_mean[ci] + momentum * mu;
      running_var[ci] = (T(1) - momentum) * running_var[ci] + momentum * var;
    }
  } else {
    for (std::int64_t ci = 0; ci < c; ++ci) {
      mean[ci] = running_mean[ci];
      invstd[ci] = T(1) / std::sqrt(running_var[ci] + eps);
    }
  }
  for (std::int64_t ni = 0; ni < n; ++ni)
    for (std::int64_t ci = 0; ci < c; ++ci) {
      const T* p = xd + slab(ni, ci);
      T* o = out.data() + slab(ni, ci);
      const T mu = mean[ci], is = invstd[ci], g = gd[ci], b = bd[ci];
      for (std::int64_t j = 0; j < hw; ++j) o[j] = g * (p[j] - mu) * is + b;
    }

  auto xn = x.node();
  auto gn = gamma.node();
  auto bn = beta.node();
  auto backprop = [xn, gn, bn, n, c, hw, m, training, mean = std::move(mean),
                   invstd = std::move(invstd)](TensorNode<T>& self) {
    const T* dy = self.grad.data();
    const T* xd = xn->data.data();
    const T* gd = gn->data.data();
    auto slab = [&](std::int64_t ni, std::int64_t ci) { return (ni * c + ci) * hw; };
    T* dg = gn->requires_grad ? gn->ensure_grad().data() : nullptr;
    T* db = bn->requires_grad ? bn->ensure_grad().data() : nullptr;
    T* dx = xn->requires_grad ? xn->ensure_grad().data() : nullptr;
    for (std::int64_t ci = 0; ci < c; ++ci) {
      const T mu = mean[ci], is = invstd[ci];
      T sum_dy = 0, sum_dy_xhat = 0;
      for (std::int64_t ni = 0; ni < n; ++ni) {
        const T* pdy = dy + slab(ni, ci);
        const T* px = xd + slab(ni, ci);
        for (std::int64_t j = 0; j < hw; ++j) {
          sum_dy += pdy[j];
          sum_dy_xhat += pdy[j] * (px[j] - mu) * is;
        }
      }
      if (dg) dg[ci] += sum_dy_xhat;
      if (db) db[ci] += sum_dy;
      if (!dx) continue;
      const T g = gd[ci];
      if (training) {
        const T mdy = sum_dy / static_cast<T>(m);
        const T mdyx = sum_dy_xhat / static_cast<T>(m);
        for (std::int64_t ni = 0; ni < n; ++ni) {
          const T* pdy = dy + slab(ni, ci);
          const T* px = xd + slab(ni, ci);
          T* pdx = dx + slab(ni, ci);
          for (std::int64_t j = 0; j < hw; ++j) {
            const T xhat = (px[j] - mu) * is;
            pdx[j] += g * is * (pdy[j] - mdy - xhat * mdyx);
          }
        }
      } else {
        for (std::int64_t ni = 0; ni < n; ++ni) {
          const T* pdy = dy + slab(ni, ci);
          T* pdx = dx + slab(ni, ci);
          for (std::int64_t j = 0; j < hw; ++j) pdx[j] += g * is * pdy[j];
        }
      }
    }
  };
  auto t = Tensor<T>::make_op(x.shape(), std::move(out), {xn, gn, bn}, std::move(backprop));
  debug_check_finite(t, "batch_norm");
  return t;
}

// Pad-free max pooling over [...,C,H,W]. Backward routes each gradient to the
// first maximal element of its window in row-major order.
template <class T>
Tensor<T> max_pool2d(const Tensor<T>& x, int window, int stride) {
  if (x.rank() != 3 && x.rank() != 4)
    op_error("max_pool2d", "input must be rank 3 or 4, got " + shape_str(x.shape()));
  if (window < 1 || stride < 1) op_error("max_pool2d", "window and stride must be >= 1");
  const bool batched = x.rank() == 4;
  const std::int64_t planes = batched ? x.dim(0) * x.dim(1) : x.dim(0);
  const std::int64_t h = x.dim(batched ? 2 : 1), w = x.dim(batched ? 3 : 2);
  if (h < window || w < window || (h - window) % stride != 0 || (w - window) % stride != 0)
    op_error("max_pool2d", "input " + shape_str(x.shape()) + " not divisible by window " +
                               std::to_string(window) + " stride " + std::to_string(stride));
  const std::int64_t hout = (h - window) / stride + 1;
  const std::int64_t wout = (w - window) / stride + 1;
  Shape out_shape = x.shape();
  out_shape[out_shape.size() - 2] = hout;
  out_shape[out_shape.size() - 1] = wout;

  std::vector<T> out(static_cast<size_t>(planes * hout * wout));
  std::vector<std::int64_t> argmax(out.size());
  const T* xd = x.data();
  for (std::int64_t p = 0; p < planes; ++p) {
    const T* plane = xd + p * h * w;
    for (std::int64_t oh = 0; oh < hout; ++oh)
      for (std::int64_t ow = 0; ow < wout; ++ow) {
        std::int64_t best = (oh * stride) * w + ow * stride;
        T bv = plane[best];
        for (std::int64_t r = 0; r < window; ++r)
          for (std::int64_t cc = 0; cc < window; ++cc) {
            const std::int64_t idx = (oh * stride + r) * w + ow * stride + cc;
            if (plane[idx] > bv) {
              bv = plane[idx];
              best = idx;
            }
          }
        const std::int64_t o = p * hout * wout + oh * wout + ow;
        out[static_cast<size_t>(o)] = bv;
        argmax[static_cast<size_t>(o)] = p * h * w + best;
      }
  }
  auto xn = x.node();
  return Tensor<T>::make_op(std::move(out_shape), std::move(out), {xn},
                            [xn, argmax = std::move(argmax)](TensorNode<T>& self) {
                              if (!xn->requires_grad) return;
                              auto& g = xn->ensure_grad();
                              for (size_t i = 0; i < argmax.size(); ++i)
                                g[static_cast<size_t>(argmax[i])] += self.grad[i];
                            });
}

// Affine map: y[N,Dout] = x[N,Din] * W[Dout,Din]^T + b.
template <class T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias) {
  if (x.rank() != 2 || weight.rank() != 2)
    op_error("linear", "expected rank-2 input and weights, got " + shape_str(x.shape()) +
                           " and " + shape_str(weight.shape()));
  const std::int64_t n = x.dim(0), din = x.dim(1);
  const std::int64_t dout = weight.dim(0);
  if (weight.dim(1) != din)
    op_error("linear", "input " + shape_str(x.shape()) + " does not match weights " +
                           shape_str(weight.shape()));
  if (bias.rank() != 1 || bias.dim(0) != dout)
    op_error("linear", "bias " + shape_str(bias.shape()) + " does not match weights " +
                           shape_str(weight.shape()));

  std::vector<T> out(static_cast<size_t>(n * dout));
  detail::gemm_nt(n, dout, din, x.data(), weight.data(), out.data());
  const T* bd = bias.data();
  for (std::int64_t i = 0; i < n; ++i)
    for (std::int64_t o = 0; o < dout; ++o) out[static_cast<size_t>(i * dout + o)] += bd[o];

  auto xn = x.node();
  auto wn = weight.node();
  auto bn = bias.node();
  auto t = Tensor<T>::make_op(
      {n, dout}, std::move(out), {xn, wn, bn}, [xn, wn, bn, n, din, dout](TensorNode<T>& self) {
        const T* dy = self.grad.data();
        if (bn->requires_grad) {
          auto& db = bn->ensure_grad();
          for (std::int64_t i = 0; i < n; ++i)
            for (std::int64_t o = 0; o < dout; ++o) db[o] += dy[i * dout + o];
        }
        if (xn->requires_grad)
          detail::gemm_nn(n, din, dout, dy, wn->data.data(), xn->ensure_grad().data(), true);
        if (wn->requires_grad)
          detail::gemm_tn(dout, din, n, dy, xn->data.data(), wn->ensure_grad().data(), true);
      });
  debug_check_finite(t, "linear");
  return t;
}

// Pools features across each node's neighbors: out[v] = reduce_{w in adj[v]} x[w].
// x is [N, ...]; nodes with no neighbors pool to zero. Max ties resolve to the
// earliest neighbor in adjacency order.
template <class T>
Tensor<T> neighbor_pool(const Tensor<T>& x, const Adjacency& adj, Pooling mode) {
  if (x.rank() < 1 || x.dim(0) != static_cast<std::int64_t>(adj.size()))
    op_error("neighbor_pool", "node count " + std::to_string(adj.size()) +
                                  " does not match input " + shape_str(x.shape()));
  const std::int64_t n = x.dim(0);
  const std::int64_t f = n > 0 ? x.numel() / n : 0;
  std::vector<T> out(static_cast<size_t>(x.numel()), T(0));
  std::vector<std::int32_t> argmax;
  if (mode == Pooling::max) argmax.assign(static_cast<size_t>(x.numel()), -1);
  const T* xd = x.data();

  parallel_for(n, [&](std::int64_t v) {
    const auto& nb = adj[static_cast<size_t>(v)];
    T* o = out.data() + v * f;
    if (nb.empty()) return;  // zero volume by convention
    if (mode == Pooling::max) {
      std::int32_t* am = argmax.data() + v * f;
      const T* first = xd + static_cast<std::int64_t>(nb[0]) * f;
      for (std::int64_t e = 0; e < f; ++e) {
        o[e] = first[e];
        am[e] = nb[0];
      }
      for (size_t k = 1; k < nb.size(); ++k) {
        const T* p = xd + static_cast<std::int64_t>(nb[k]) * f;
        for (std::int64_t e = 0; e < f; ++e)
          if (p[e] > o[e]) {
            o[e] = p[e];
            am[e] = nb[k];
          }
      }
    } else {
      for (std::int32_t wv : nb) {
        const T* p = xd + static_cast<std::int64_t>(wv) * f;
        for (std::int64_t e = 0; e < f; ++e) o[e] += p[e];
      }
      if (mode == Pooling::mean) {
        const T inv = T(1) / static_cast<T>(nb.size());
        for (std::int64_t e = 0; e < f; ++e) o[e] *= inv;
      }
    }
  });

  auto xn = x.node();
  return Tensor<T>::make_op(
      x.shape(), std::move(out), {xn},
      [xn, adj, mode, n, f, argmax = std::move(argmax)](TensorNode<T>& self) {
        if (!xn->requires_grad) return;
        auto& g = xn->ensure_grad();
        const T* dy = self.grad.data();
        if (mode == Pooling::max) {
          // Scatter by feature column so each (node, element) slot has one writer.
          parallel_for(f, [&](std::int64_t e) {
            for (std::int64_t v = 0; v < n; ++v) {
              const std::int32_t src = argmax[static_cast<size_t>(v * f + e)];
              if (src >= 0) g[static_cast<size_t>(src) * f + e] += dy[v * f + e];
            }
          }, 256);
        } else {
          parallel_for(f, [&](std::int64_t e) {
            for (std::int64_t v = 0; v < n; ++v) {
              const auto& nb = adj[static_cast<size_t>(v)];
              if (nb.empty()) continue;
              T s = dy[v * f + e];
              if (mode == Pooling::mean) s /= static_cast<T>(nb.size());
              for (std::int32_t wv : nb) g[static_cast<size_t>(wv) * f + e] += s;
            }
          }, 256);
        }
      });
}

// Positive-class softmax of a 2-logit head: p = sigmoid(l1 - l0).
template <class T>
Tensor<T> softmax_pos2(const Tensor<T>& logits) {
  if (logits.rank() != 2 || logits.dim(1) != 2)
    op_error("softmax_pos2", "expected [N,2] logits, got " + shape_str(logits.shape()));
  const std::int64_t n = logits.dim(0);
  std::vector<T> out(static_cast<size_t>(n));
  const T* ld = logits.data();
  for (std::int64_t i = 0; i < n; ++i) {
    const T d = ld[i * 2 + 1] - ld[i * 2];
    out[static_cast<size_t>(i)] =
        d >= T(0) ? T(1) / (T(1) + std::exp(-d)) : std::exp(d) / (T(1) + std::exp(d));
  }
  auto ln = logits.node();
  return Tensor<T>::make_op({n}, std::move(out), {ln}, [ln, n](TensorNode<T>& self) {
    if (!ln->requires_grad) return;
    auto& g = ln->ensure_grad();
    for (std::int64_t i = 0; i < n; ++i) {
      const T y = self.data[static_cast<size_t>(i)];
      const T s = self.grad[static_cast<size_t>(i)] * y * (T(1) - y);
      g[i * 2 + 1] += s;
      g[i * 2] -= s;
    }
  });
}

// Weighted binary cross-entropy, summed over elements:
//   L = -sum_i [ wp*h_i*log(c_i) + wn*(1-h_i)*log(1-c_i) ]
// with the weight lambda on the negative term by default and on the positive
// term when lambda_on_positive is set. Confidences are clamped to
// [1e-7, 1-1e-7]; clamped entries receive zero gradient.
template <class T>
Tensor<T> weighted_bce(const Tensor<T>& conf, const std::vector<T>& targets, T lambda,
                       bool lambda_on_positive = false) {
  if (conf.numel() != static_cast<std::int64_t>(targets.size()))
    op_error("weighted_bce", "confidence count " + std::to_string(conf.numel()) +
                                 " does not match target count " +
                                 std::to_string(targets.size()));
  const T eps = T(1e-7);
  const T wp = lambda_on_positive ? lambda : T(1);
  const T wn = lambda_on_positive ? T(1) : lambda;
  const T* cd = conf.data();
  T loss = 0;
  for (size_t i = 0; i < targets.size(); ++i) {
    const T c = std::min(std::max(cd[i], eps), T(1) - eps);
    const T h = targets[i];
    loss -= wp * h * std::log(c) + wn * (T(1) - h) * std::log(T(1) - c);
  }
  auto cn = conf.node();
  return Tensor<T>::make_op({}, {loss}, {cn},
                            [cn, targets, eps, wp, wn](TensorNode<T>& self) {
                              if (!cn->requires_grad) return;
                              auto& g = cn->ensure_grad();
                              const T gl = self.grad[0];
                              const T* cd = cn->data.data();
                              for (size_t i = 0; i < targets.size(); ++i) {
                                if (cd[i] <= eps || cd[i] >= T(1) - eps) continue;
                                const T h = targets[i];
                                g[i] += gl * (-wp * h / cd[i] +
                                              wn * (T(1) - h) / (T(1) - cd[i]));
                              }
                            });
}

}  // namespace convmpn
