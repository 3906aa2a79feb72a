#pragma once

#include <cmath>
#include <functional>
#include <utility>
#include <vector>

#include "vocap/common.hpp"
#include "vocap/tensor.hpp"

namespace vocap {

struct Var {
  int id = -1;
  bool valid() const { return id >= 0; }
};

/// Reverse-mode autodiff tape. Nodes are appended in execution order, so the
/// reverse sweep visits them in a valid topological order. One tape per
/// record/thread; tapes are not shared.
template <typename S>
class Tape {
 public:
  Tape() { nodes_.reserve(4096); }
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  // ---- leaves -------------------------------------------------------------

  Var leaf(Tensor<S> value, bool requires_grad = false) {
    return push(std::move(value), requires_grad, nullptr);
  }

  Var constant(Tensor<S> value) { return leaf(std::move(value), false); }

  const Tensor<S>& val(Var v) const { return nodes_[v.id].value; }
  bool needs_grad(Var v) const { return nodes_[v.id].needs_grad; }

  /// Gradient buffer (allocated lazily; zeros if never touched).
  const Tensor<S>& grad(Var v) {
    Node& n = nodes_[v.id];
    if (!n.grad.defined()) n.grad = Tensor<S>::zeros(n.value.shape());
    return n.grad;
  }
  bool has_grad(Var v) const { return nodes_[v.id].grad.defined(); }

  size_t size() const { return nodes_.size(); }

  // ---- arithmetic ----------------------------------------------------------

  Var add(Var a, Var b) {
    check_same_shape(a, b, "add");
    Tensor<S> out = val(a).clone();
    auto m = out.mat(out.numel(), 1);
    m += val(b).mat(out.numel(), 1);
    return push(std::move(out), any_grad({a, b}), [this, a, b](Node& n) {
      if (needs_grad(a)) acc(a, n.grad);
      if (needs_grad(b)) acc(b, n.grad);
    });
  }

  Var sub(Var a, Var b) {
    check_same_shape(a, b, "sub");
    Tensor<S> out = val(a).clone();
    out.mat(out.numel(), 1) -= val(b).mat(out.numel(), 1);
    return push(std::move(out), any_grad({a, b}), [this, a, b](Node& n) {
      if (needs_grad(a)) acc(a, n.grad);
      if (needs_grad(b)) {
        Tensor<S>& g = grad_buf(b);
        g.mat(g.numel(), 1) -= n.grad.mat(n.grad.numel(), 1);
      }
    });
  }

  Var mul(Var a, Var b) {
    check_same_shape(a, b, "mul");
    Tensor<S> out = val(a).clone();
    for (int64_t i = 0; i < out.numel(); ++i) out[i] *= val(b)[i];
    return push(std::move(out), any_grad({a, b}), [this, a, b](Node& n) {
      if (needs_grad(a)) {
        Tensor<S>& g = grad_buf(a);
        const Tensor<S>& vb = val(b);
        for (int64_t i = 0; i < g.numel(); ++i) g[i] += n.grad[i] * vb[i];
      }
      if (needs_grad(b)) {
        Tensor<S>& g = grad_buf(b);
        const Tensor<S>& va = val(a);
        for (int64_t i = 0; i < g.numel(); ++i) g[i] += n.grad[i] * va[i];
      }
    });
  }

  Var scale(Var a, S c) {
    Tensor<S> out = val(a).clone();
    out.mat(out.numel(), 1) *= c;
    return push(std::move(out), any_grad({a}), [this, a, c](Node& n) {
      if (!needs_grad(a)) return;
      Tensor<S>& g = grad_buf(a);
      g.mat(g.numel(), 1) += n.grad.mat(n.grad.numel(), 1) * c;
    });
  }

  Var add_scalar(Var a, S c) {
    Tensor<S> out = val(a).clone();
    for (int64_t i = 0; i < out.numel(); ++i) out[i] += c;
    return push(std::move(out), any_grad({a}), [this, a](Node& n) {
      if (needs_grad(a)) acc(a, n.grad);
    });
  }

  /// rows(a) + broadcast row vector b (shape [n] or [1,n]).
  Var add_rowvec(Var a, Var b) {
    const Tensor<S>& va = val(a);
    const Tensor<S>& vb = val(b);
    int cols = va.cols_flat();
    int rows = va.rows_flat();
    if (vb.numel() != cols) throw ShapeMismatch("add_rowvec: width mismatch");
    Tensor<S> out = va.clone();
    auto m = out.mat(rows, cols);
    m.rowwise() += vb.mat(1, cols).row(0);
    return push(std::move(out), any_grad({a, b}), [this, a, b, rows, cols](Node& n) {
      if (needs_grad(a)) acc(a, n.grad);
      if (needs_grad(b)) {
        Tensor<S>& g = grad_buf(b);
        g.mat(1, cols) += n.grad.mat(rows, cols).colwise().sum();
      }
    });
  }

  /// Repeat a single row n times -> [n, d].
  Var broadcast_row(Var row, int nrows) {
    const Tensor<S>& vr = val(row);
    int d = static_cast<int>(vr.numel());
    Tensor<S> out = Tensor<S>::uninit({nrows, d});
    for (int i = 0; i < nrows; ++i)
      std::copy(vr.data(), vr.data() + d, out.data() + static_cast<int64_t>(i) * d);
    return push(std::move(out), any_grad({row}), [this, row, nrows, d](Node& n) {
      if (!needs_grad(row)) return;
      Tensor<S>& g = grad_buf(row);
      g.mat(1, d) += n.grad.mat(nrows, d).colwise().sum();
    });
  }

  // ---- matrix products ------------------------------------------------------

  /// [m,k] x [k,n] -> [m,n] (flattened-leading-dims view of both operands).
  Var matmul(Var a, Var b) {
    const Tensor<S>& va = val(a);
    const Tensor<S>& vb = val(b);
    int m = va.rows_flat(), k = va.cols_flat();
    int k2 = vb.rows_flat(), n = vb.cols_flat();
    if (k != k2) throw ShapeMismatch("matmul: inner dims");
    Tensor<S> out = Tensor<S>::uninit({m, n});
    out.mat(m, n).noalias() = va.mat(m, k) * vb.mat(k, n);
    return push(std::move(out), any_grad({a, b}), [this, a, b, m, k, n](Node& nd) {
      auto dc = nd.grad.mat(m, n);
      if (needs_grad(a))
        grad_buf(a).mat(m, k).noalias() += dc * val(b).mat(k, n).transpose();
      if (needs_grad(b))
        grad_buf(b).mat(k, n).noalias() += val(a).mat(m, k).transpose() * dc;
    });
  }

  /// a x b^T: [m,k] x [n,k]^T -> [m,n].
  Var matmul_t(Var a, Var b) {
    const Tensor<S>& va = val(a);
    const Tensor<S>& vb = val(b);
    int m = va.rows_flat(), k = va.cols_flat();
    int n = vb.rows_flat(), k2 = vb.cols_flat();
    if (k != k2) throw ShapeMismatch("matmul_t: inner dims");
    Tensor<S> out = Tensor<S>::uninit({m, n});
    out.mat(m, n).noalias() = va.mat(m, k) * vb.mat(n, k).transpose();
    return push(std::move(out), any_grad({a, b}), [this, a, b, m, k, n](Node& nd) {
      auto dc = nd.grad.mat(m, n);
      if (needs_grad(a)) grad_buf(a).mat(m, k).noalias() += dc * val(b).mat(n, k);
      if (needs_grad(b)) grad_buf(b).mat(n, k).noalias() += dc.transpose() * val(a).mat(m, k);
    });
  }

  // ---- shape ops -------------------------------------------------------------

  Var reshape(Var a, std::vector<int> shape) {
    Tensor<S> out = val(a).reshaped(std::move(shape));
    return push(std::move(out), any_grad({a}), [this, a](Node& n) {
      if (!needs_grad(a)) return;
      Tensor<S>& g = grad_buf(a);
      g.mat(g.numel(), 1) += n.grad.mat(n.grad.numel(), 1);
    });
  }

  Var slice_rows(Var a, int row0, int nrows) {
    const Tensor<S>& va = val(a);
    int cols = va.cols_flat();
    Tensor<S> out = Tensor<S>::uninit({nrows, cols});
    std::copy(va.data() + static_cast<int64_t>(row0) * cols,
              va.data() + static_cast<int64_t>(row0 + nrows) * cols, out.data());
    return push(std::move(out), any_grad({a}), [this, a, row0, nrows, cols](Node& n) {
      if (!needs_grad(a)) return;
      Tensor<S>& g = grad_buf(a);
      g.mat(g.rows_flat(), cols).middleRows(row0, nrows) += n.grad.mat(nrows, cols);
    });
  }

  Var slice_cols(Var a, int col0, int ncols) {
    const Tensor<S>& va = val(a);
    int rows = va.rows_flat(), cols = va.cols_flat();
    Tensor<S> out = Tensor<S>::uninit({rows, ncols});
    out.mat(rows, ncols) = va.mat(rows, cols).middleCols(col0, ncols);
    return push(std::move(out), any_grad({a}), [this, a, col0, rows, cols, ncols](Node& n) {
      if (!needs_grad(a)) return;
      grad_buf(a).mat(rows, cols).middleCols(col0, ncols) += n.grad.mat(rows, ncols);
    });
  }

  Var concat_rows(const std::vector<Var>& parts) {
    int cols = val(parts[0]).cols_flat();
    int rows = 0;
    for (Var p : parts) {
      if (val(p).cols_flat() != cols) throw ShapeMismatch("concat_rows: width mismatch");
      rows += val(p).rows_flat();
    }
    Tensor<S> out = Tensor<S>::uninit({rows, cols});
    int r = 0;
    for (Var p : parts) {
      int nr = val(p).rows_flat();
      out.mat(rows, cols).middleRows(r, nr) = val(p).mat(nr, cols);
      r += nr;
    }
    bool ng = false;
    for (Var p : parts) ng = ng || needs_grad(p);
    std::vector<Var> ps = parts;
    return push(std::move(out), ng, [this, ps, rows, cols](Node& n) {
      int r = 0;
      for (Var p : ps) {
        int nr = val(p).rows_flat();
        if (needs_grad(p)) grad_buf(p).mat(nr, cols) += n.grad.mat(rows, cols).middleRows(r, nr);
        r += nr;
      }
    });
  }

  Var concat_cols(const std::vector<Var>& parts) {
    int rows = val(parts[0]).rows_flat();
    int cols = 0;
    for (Var p : parts) {
      if (val(p).rows_flat() != rows) throw ShapeMismatch("concat_cols: height mismatch");
      cols += val(p).cols_flat();
    }
    Tensor<S> out = Tensor<S>::uninit({rows, cols});
    int c = 0;
    for (Var p : parts) {
      int nc = val(p).cols_flat();
      out.mat(rows, cols).middleCols(c, nc) = val(p).mat(rows, nc);
      c += nc;
    }
    bool ng = false;
    for (Var p : parts) ng = ng || needs_grad(p);
    std::vector<Var> ps = parts;
    return push(std::move(out), ng, [this, ps, rows, cols](Node& n) {
      int c = 0;
      for (Var p : ps) {
        int nc = val(p).cols_flat();
        if (needs_grad(p)) grad_buf(p).mat(rows, nc) += n.grad.mat(rows, cols).middleCols(c, nc);
        c += nc;
      }
    });
  }

  /// Gather rows of a table by integer ids (embedding lookup).
  Var embedding_rows(Var table, std::vector<int> ids) {
    const Tensor<S>& vt = val(table);
    int d = vt.cols_flat();
    int n = static_cast<int>(ids.size());
    Tensor<S> out = Tensor<S>::uninit({n, d});
    for (int i = 0; i < n; ++i)
      std::copy(vt.data() + static_cast<int64_t>(ids[i]) * d,
                vt.data() + static_cast<int64_t>(ids[i] + 1) * d,
                out.data() + static_cast<int64_t>(i) * d);
    return push(std::move(out), any_grad({table}),
                [this, table, ids = std::move(ids), d, n](Node& nd) {
                  if (!needs_grad(table)) return;
                  Tensor<S>& g = grad_buf(table);
                  for (int i = 0; i < n; ++i)
                    g.mat(g.rows_flat(), d).row(ids[i]) +=
                        nd.grad.mat(n, d).row(i);
                });
  }

  // ---- nonlinearities ----------------------------------------------------------

  /// GELU, tanh form: 0.5x(1 + tanh(sqrt(2/pi)(x + 0.044715 x^3))).
  Var gelu(Var a) {
    const Tensor<S>& va = val(a);
    const int64_t n = va.numel();
    Tensor<S> out = Tensor<S>::uninit(va.shape());
    constexpr S c0 = S(0.7978845608028654);  // sqrt(2/pi)
    constexpr S c1 = S(0.044715);
    auto x = arr(va.data(), n);
    auto y = arr(out.data(), n);
    y = S(0.5) * x * (S(1) + (c0 * (x + c1 * x.cube())).tanh());
    return push(std::move(out), any_grad({a}), [this, a, n](Node& nd) {
      if (!needs_grad(a)) return;
      Tensor<S>& g = grad_buf(a);
      const Tensor<S>& va = val(a);
      constexpr S c0 = S(0.7978845608028654);
      constexpr S c1 = S(0.044715);
      auto x = arr(va.data(), n);
      auto gr = arr(g.data(), n);
      auto dy = arr(nd.grad.data(), n);
      // t = tanh(u); dy/dx = 0.5(1+t) + 0.5x(1-t^2) u'
      auto t = (c0 * (x + c1 * x.cube())).tanh();
      gr += dy * (S(0.5) * (S(1) + t) +
                  S(0.5) * x * (S(1) - t.square()) * (c0 * (S(1) + S(3) * c1 * x.square())));
    });
  }

  Var relu(Var a) {
    const Tensor<S>& va = val(a);
    Tensor<S> out = Tensor<S>::uninit(va.shape());
    for (int64_t i = 0; i < va.numel(); ++i) out[i] = va[i] > 0 ? va[i] : S(0);
    return push(std::move(out), any_grad({a}), [this, a](Node& n) {
      if (!needs_grad(a)) return;
      Tensor<S>& g = grad_buf(a);
      const Tensor<S>& va = val(a);
      for (int64_t i = 0; i < g.numel(); ++i)
        if (va[i] > 0) g[i] += n.grad[i];
    });
  }

  Var sigmoid(Var a) {
    const Tensor<S>& va = val(a);
    const int64_t n = va.numel();
    Tensor<S> out = Tensor<S>::uninit(va.shape());
    arr(out.data(), n) = S(0.5) * (S(1) + (S(0.5) * arr(va.data(), n)).tanh());
    Var r = push(std::move(out), any_grad({a}), nullptr);
    nodes_[r.id].back = [this, a, r, n](Node& nd) {
      if (!needs_grad(a)) return;
      Tensor<S>& g = grad_buf(a);
      const Tensor<S>& y = val(r);
      arr(g.data(), n) += arr(nd.grad.data(), n) * arr(y.data(), n) * (S(1) - arr(y.data(), n));
    };
    return r;
  }

  Var softmax_rows(Var a) {
    const Tensor<S>& va = val(a);
    int rows = va.rows_flat(), cols = va.cols_flat();
    Tensor<S> out = Tensor<S>::uninit(va.shape());
    for (int i = 0; i < rows; ++i) {
      auto x = arr(va.data() + static_cast<int64_t>(i) * cols, cols);
      auto y = arr(out.data() + static_cast<int64_t>(i) * cols, cols);
      S mx = x.maxCoeff();
      y = (x - mx).exp();
      y *= S(1) / y.sum();
    }
    Var r = push(std::move(out), any_grad({a}), nullptr);
    nodes_[r.id].back = [this, a, r, rows, cols](Node& n) {
      if (!needs_grad(a)) return;
      Tensor<S>& g = grad_buf(a);
      const Tensor<S>& y = val(r);
      for (int i = 0; i < rows; ++i) {
        auto yr = arr(y.data() + static_cast<int64_t>(i) * cols, cols);
        auto dy = arr(n.grad.data() + static_cast<int64_t>(i) * cols, cols);
        auto gr = arr(g.data() + static_cast<int64_t>(i) * cols, cols);
        S dot = (dy * yr).sum();
        gr += yr * (dy - dot);
      }
    };
    return r;
  }

  Var layer_norm(Var x, Var gamma, Var beta, S eps = S(1e-5)) {
    const Tensor<S>& vx = val(x);
    int rows = vx.rows_flat(), cols = vx.cols_flat();
    if (val(gamma).numel() != cols || val(beta).numel() != cols)
      throw ShapeMismatch("layer_norm: affine width");
    Tensor<S> out = Tensor<S>::uninit(vx.shape());
    Tensor<S> xhat = Tensor<S>::uninit({rows, cols});
    Tensor<S> inv_sigma = Tensor<S>::uninit({rows});
    auto gm = arr(val(gamma).data(), cols);
    auto bt = arr(val(beta).data(), cols);
    for (int i = 0; i < rows; ++i) {
      auto xr = arr(vx.data() + static_cast<int64_t>(i) * cols, cols);
      auto xh = arr(xhat.data() + static_cast<int64_t>(i) * cols, cols);
      auto yr = arr(out.data() + static_cast<int64_t>(i) * cols, cols);
      S mu = xr.mean();
      S var = (xr - mu).square().sum() / cols;
      S inv = S(1) / std::sqrt(var + eps);
      inv_sigma[i] = inv;
      xh = (xr - mu) * inv;
      yr = xh * gm + bt;
    }
    return push(std::move(out), any_grad({x, gamma, beta}),
                [this, x, gamma, beta, xhat = std::move(xhat),
                 inv_sigma = std::move(inv_sigma), rows, cols](Node& n) {
                  auto gm = arr(val(gamma).data(), cols);
                  bool gx_needed = needs_grad(x);
                  bool gg_needed = needs_grad(gamma);
                  bool gb_needed = needs_grad(beta);
                  for (int i = 0; i < rows; ++i) {
                    auto dy = arr(n.grad.data() + static_cast<int64_t>(i) * cols, cols);
                    auto xh = arr(xhat.data() + static_cast<int64_t>(i) * cols, cols);
                    if (gg_needed) arr(grad_buf(gamma).data(), cols) += dy * xh;
                    if (gb_needed) arr(grad_buf(beta).data(), cols) += dy;
                    if (gx_needed) {
                      auto gx = arr(grad_buf(x).data() + static_cast<int64_t>(i) * cols, cols);
                      S m1 = (dy * gm).sum() / cols;
                      S m2 = (dy * gm * xh).sum() / cols;
                      gx += inv_sigma[i] * (dy * gm - m1 - xh * m2);
                    }
                  }
                });
  }

  // ---- reductions -----------------------------------------------------------

  Var sum_all(Var a) {
    double s = 0;
    const Tensor<S>& va = val(a);
    for (int64_t i = 0; i < va.numel(); ++i) s += va[i];
    return push(Tensor<S>::scalar(static_cast<S>(s)), any_grad({a}), [this, a](Node& n) {
      if (!needs_grad(a)) return;
      Tensor<S>& g = grad_buf(a);
      S d = n.grad[0];
      for (int64_t i = 0; i < g.numel(); ++i) g[i] += d;
    });
  }

  Var mean_all(Var a) {
    int64_t n = val(a).numel();
    return scale(sum_all(a), static_cast<S>(1.0 / static_cast<double>(n)));
  }

  Var stop_gradient(Var a) { return push(val(a), false, nullptr); }

  // ---- convolutions / resampling ---------------------------------------------

  /// x [H,W,Cin], w [kh,kw,Cin,Cout], b [Cout]; zero padding. Lowered to
  /// im2col + one GEMM.
  Var conv2d(Var x, Var w, Var b, int stride, int pad) {
    const Tensor<S>& vx = val(x);
    const Tensor<S>& vw = val(w);
    int H = vx.dim(0), W = vx.dim(1), Ci = vx.dim(2);
    int kh = vw.dim(0), kw = vw.dim(1), Co = vw.dim(3);
    if (vw.dim(2) != Ci) throw ShapeMismatch("conv2d: channel mismatch");
    int Ho = (H + 2 * pad - kh) / stride + 1;
    int Wo = (W + 2 * pad - kw) / stride + 1;
    const int patch = kh * kw * Ci;

    Tensor<S> cols = Tensor<S>::uninit({Ho * Wo, patch});
    im2col(vx.data(), H, W, Ci, kh, kw, stride, pad, Ho, Wo, cols.data());

    Tensor<S> out = Tensor<S>::uninit({Ho, Wo, Co});
    out.mat(Ho * Wo, Co).noalias() = cols.mat(Ho * Wo, patch) * vw.mat(patch, Co);
    out.mat(Ho * Wo, Co).rowwise() += val(b).mat(1, Co).row(0);

    return push(std::move(out), any_grad({x, w, b}),
                [this, x, w, b, cols = std::move(cols), H, W, Ci, kh, kw, Co, Ho, Wo, stride,
                 pad, patch](Node& n) {
                  auto dy = n.grad.mat(Ho * Wo, Co);
                  if (needs_grad(b))
                    grad_buf(b).mat(1, Co) += dy.colwise().sum();
                  if (needs_grad(w))
                    grad_buf(w).mat(patch, Co).noalias() +=
                        cols.mat(Ho * Wo, patch).transpose() * dy;
                  if (needs_grad(x)) {
                    Tensor<S> dcols = Tensor<S>::uninit({Ho * Wo, patch});
                    dcols.mat(Ho * Wo, patch).noalias() =
                        dy * val(w).mat(patch, Co).transpose();
                    col2im_acc(dcols.data(), H, W, Ci, kh, kw, stride, pad, Ho, Wo,
                               grad_buf(x).data());
                  }
                });
  }

  /// Transposed conv with k == stride (non-overlapping): each kernel tap is an
  /// independent [H*W, Cin] x [Cin, Cout] product scattered to its phase of
  /// the output. x [H,W,Cin], w [k,k,Cin,Cout]; output [H*s, W*s, Cout].
  Var conv_transpose2d(Var x, Var w, Var b, int stride) {
    const Tensor<S>& vx = val(x);
    const Tensor<S>& vw = val(w);
    int H = vx.dim(0), W = vx.dim(1), Ci = vx.dim(2);
    int k = vw.dim(0), Co = vw.dim(3);
    if (vw.dim(1) != k || vw.dim(2) != Ci) throw ShapeMismatch("conv_transpose2d: weight shape");
    if (k != stride) throw ShapeMismatch("conv_transpose2d: kernel must equal stride");
    int Ho = H * stride, Wo = W * stride;
    const int n_in = H * W;

    Tensor<S> out = Tensor<S>::uninit({Ho, Wo, Co});
    Tensor<S> phase = Tensor<S>::uninit({n_in, Co});
    for (int dh = 0; dh < k; ++dh)
      for (int dw = 0; dw < k; ++dw) {
        auto wm = Eigen::Map<const Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic,
                                                 Eigen::RowMajor>>(
            vw.data() + (static_cast<int64_t>(dh) * k + dw) * Ci * Co, Ci, Co);
        phase.mat(n_in, Co).noalias() = vx.mat(n_in, Ci) * wm;
        phase.mat(n_in, Co).rowwise() += val(b).mat(1, Co).row(0);
        for (int hi = 0; hi < H; ++hi)
          for (int wi = 0; wi < W; ++wi)
            std::copy(
                phase.data() + (static_cast<int64_t>(hi) * W + wi) * Co,
                phase.data() + (static_cast<int64_t>(hi) * W + wi + 1) * Co,
                out.data() +
                    ((static_cast<int64_t>(hi * stride + dh) * Wo) + wi * stride + dw) * Co);
      }

    return push(std::move(out), any_grad({x, w, b}),
                [this, x, w, b, H, W, Ci, k, Co, Wo, stride](Node& n) {
                  bool gx = needs_grad(x), gw = needs_grad(w), gb = needs_grad(b);
                  if (!gx && !gw && !gb) return;
                  const int n_in = H * W;
                  Tensor<S> gphase = Tensor<S>::uninit({n_in, Co});
                  for (int dh = 0; dh < k; ++dh)
                    for (int dw = 0; dw < k; ++dw) {
                      for (int hi = 0; hi < H; ++hi)
                        for (int wi = 0; wi < W; ++wi)
                          std::copy(n.grad.data() + ((static_cast<int64_t>(hi * stride + dh) *
                                                      Wo) + wi * stride + dw) * Co,
                                    n.grad.data() + ((static_cast<int64_t>(hi * stride + dh) *
                                                      Wo) + wi * stride + dw + 1) * Co,
                                    gphase.data() + (static_cast<int64_t>(hi) * W + wi) * Co);
                      auto gp = gphase.mat(n_in, Co);
                      if (gb) grad_buf(b).mat(1, Co) += gp.colwise().sum();
                      int64_t wbase = (static_cast<int64_t>(dh) * k + dw) * Ci * Co;
                      if (gw) {
                        auto dwm = Eigen::Map<Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic,
                                                            Eigen::RowMajor>>(
                            grad_buf(w).data() + wbase, Ci, Co);
                        dwm.noalias() += val(x).mat(n_in, Ci).transpose() * gp;
                      }
                      if (gx) {
                        auto wm = Eigen::Map<const Eigen::Matrix<S, Eigen::Dynamic,
                                                                 Eigen::Dynamic, Eigen::RowMajor>>(
                            val(w).data() + wbase, Ci, Co);
                        grad_buf(x).mat(n_in, Ci).noalias() += gp * wm.transpose();
                      }
                    }
                });
  }

  /// Bilinear upsample by an integer factor (half-pixel centers), x [H,W,C].
  Var upsample_bilinear(Var x, int factor) {
    const Tensor<S>& vx = val(x);
    int H = vx.dim(0), W = vx.dim(1), C = vx.rank() == 3 ? vx.dim(2) : 1;
    int Ho = H * factor, Wo = W * factor;
    std::vector<int> out_shape = vx.rank() == 3 ? std::vector<int>{Ho, Wo, C}
                                                : std::vector<int>{Ho, Wo};
    Tensor<S> out = Tensor<S>::uninit(out_shape);
    auto src_coord = [factor](int o, int limit) {
      double s = (o + 0.5) / factor - 0.5;
      if (s < 0) s = 0;
      if (s > limit - 1) s = limit - 1;
      return s;
    };
    for (int ho = 0; ho < Ho; ++ho) {
      double sy = src_coord(ho, H);
      int y0 = static_cast<int>(sy);
      int y1 = std::min(y0 + 1, H - 1);
      double fy = sy - y0;
      for (int wo = 0; wo < Wo; ++wo) {
        double sx = src_coord(wo, W);
        int x0 = static_cast<int>(sx);
        int x1 = std::min(x0 + 1, W - 1);
        double fx = sx - x0;
        for (int c = 0; c < C; ++c) {
          double v00 = vx[(static_cast<int64_t>(y0) * W + x0) * C + c];
          double v01 = vx[(static_cast<int64_t>(y0) * W + x1) * C + c];
          double v10 = vx[(static_cast<int64_t>(y1) * W + x0) * C + c];
          double v11 = vx[(static_cast<int64_t>(y1) * W + x1) * C + c];
          out[(static_cast<int64_t>(ho) * Wo + wo) * C + c] =
              static_cast<S>((1 - fy) * ((1 - fx) * v00 + fx * v01) +
                             fy * ((1 - fx) * v10 + fx * v11));
        }
      }
    }
    return push(std::move(out), any_grad({x}), [this, x, H, W, C, Ho, Wo, factor](Node& n) {
      if (!needs_grad(x)) return;
      Tensor<S>& g = grad_buf(x);
      auto src_coord = [factor](int o, int limit) {
        double s = (o + 0.5) / factor - 0.5;
        if (s < 0) s = 0;
        if (s > limit - 1) s = limit - 1;
        return s;
      };
      for (int ho = 0; ho < Ho; ++ho) {
        double sy = src_coord(ho, H);
        int y0 = static_cast<int>(sy);
        int y1 = std::min(y0 + 1, H - 1);
        double fy = sy - y0;
        for (int wo = 0; wo < Wo; ++wo) {
          double sx = src_coord(wo, W);
          int x0 = static_cast<int>(sx);
          int x1 = std::min(x0 + 1, W - 1);
          double fx = sx - x0;
          for (int c = 0; c < C; ++c) {
            S d = n.grad[(static_cast<int64_t>(ho) * Wo + wo) * C + c];
            g[(static_cast<int64_t>(y0) * W + x0) * C + c] += static_cast<S>((1 - fy) * (1 - fx)) * d;
            g[(static_cast<int64_t>(y0) * W + x1) * C + c] += static_cast<S>((1 - fy) * fx) * d;
            g[(static_cast<int64_t>(y1) * W + x0) * C + c] += static_cast<S>(fy * (1 - fx)) * d;
            g[(static_cast<int64_t>(y1) * W + x1) * C + c] += static_cast<S>(fy * fx) * d;
          }
        }
      }
    });
  }

  /// Non-overlapping patchify: [H,W,C] -> [(H/p)*(W/p), p*p*C].
  Var extract_patches(Var x, int p) {
    const Tensor<S>& vx = val(x);
    int H = vx.dim(0), W = vx.dim(1), C = vx.dim(2);
    if (H % p != 0 || W % p != 0) throw IndivisibleShape("extract_patches");
    int gh = H / p, gw = W / p;
    Tensor<S> out = Tensor<S>::uninit({gh * gw, p * p * C});
    for (int i = 0; i < gh; ++i)
      for (int j = 0; j < gw; ++j) {
        S* o = out.data() + (static_cast<int64_t>(i) * gw + j) * p * p * C;
        for (int di = 0; di < p; ++di)
          std::copy(vx.data() + ((static_cast<int64_t>(i * p + di) * W) + j * p) * C,
                    vx.data() + ((static_cast<int64_t>(i * p + di) * W) + j * p + p) * C,
                    o + static_cast<int64_t>(di) * p * C);
      }
    return push(std::move(out), any_grad({x}), [this, x, p, H, W, C](Node& n) {
      if (!needs_grad(x)) return;
      Tensor<S>& g = grad_buf(x);
      int gw = W / p;
      int gh = H / p;
      for (int i = 0; i < gh; ++i)
        for (int j = 0; j < gw; ++j) {
          const S* o = n.grad.data() + (static_cast<int64_t>(i) * gw + j) * p * p * C;
          for (int di = 0; di < p; ++di)
            for (int t = 0; t < p * C; ++t)
              g[((static_cast<int64_t>(i * p + di) * W) + j * p) * C + t] +=
                  o[static_cast<int64_t>(di) * p * C + t];
        }
    });
  }

  // ---- losses (fused, numerically stable) ---------------------------------------

  /// Binary focal loss on logits vs {0,1} targets, mean over elements.
  /// Per element with z = (y ? x : -x): L = -alpha_t * (1-pt)^gamma * log(pt),
  /// pt = sigmoid(z); dL/dz = alpha_t * q^gamma * (gamma * pt * log(pt) - q).
  Var focal_loss(Var logits, const Tensor<S>& target, S gamma, S alpha) {
    const Tensor<S>& vx = val(logits);
    if (vx.numel() != target.numel()) throw ShapeMismatch("focal_loss");
    double ga = static_cast<double>(gamma);
    double al = static_cast<double>(alpha);
    bool gamma_is_2 = ga == 2.0;
    double total = 0;
    int64_t n = vx.numel();
    for (int64_t i = 0; i < n; ++i) {
      double s = target[i] > S(0.5) ? 1.0 : -1.0;
      double a = target[i] > S(0.5) ? al : 1.0 - al;
      double z = s * static_cast<double>(vx[i]);
      double log_pt = -softplus(-z);  // log sigmoid(z)
      double q = sigmoid_d(-z);       // 1 - pt
      total += -a * (gamma_is_2 ? q * q : std::pow(q, ga)) * log_pt;
    }
    Tensor<S> tgt = target;
    return push(Tensor<S>::scalar(static_cast<S>(total / n)), any_grad({logits}),
                [this, logits, tgt = std::move(tgt), ga, al, gamma_is_2, n](Node& nd) {
                  if (!needs_grad(logits)) return;
                  Tensor<S>& g = grad_buf(logits);
                  const Tensor<S>& vx = val(logits);
                  double scale = static_cast<double>(nd.grad[0]) / n;
                  for (int64_t i = 0; i < n; ++i) {
                    double s = tgt[i] > S(0.5) ? 1.0 : -1.0;
                    double a = tgt[i] > S(0.5) ? al : 1.0 - al;
                    double z = s * static_cast<double>(vx[i]);
                    double pt = sigmoid_d(z);
                    double q = sigmoid_d(-z);
                    double log_pt = -softplus(-z);
                    double qg = gamma_is_2 ? q * q : std::pow(q, ga);
                    double dz = a * qg * (ga * pt * log_pt - q);
                    g[i] += static_cast<S>(scale * s * dz);
                  }
                });
  }

  /// Soft dice loss on logits vs {0,1} targets: 1 - 2*sum(p*g)/(sum(p)+sum(g)).
  Var dice_loss(Var logits, const Tensor<S>& target) {
    const Tensor<S>& vx = val(logits);
    if (vx.numel() != target.numel()) throw ShapeMismatch("dice_loss");
    int64_t n = vx.numel();
    Tensor<S> probs(vx.shape());
    double inter = 0, psum = 0, gsum = 0;
    for (int64_t i = 0; i < n; ++i) {
      double p = sigmoid_d(static_cast<double>(vx[i]));
      probs[i] = static_cast<S>(p);
      inter += p * target[i];
      psum += p;
      gsum += target[i];
    }
    double denom = psum + gsum;
    double value = denom == 0 ? 0.0 : 1.0 - 2.0 * inter / denom;
    Tensor<S> tgt = target;
    return push(Tensor<S>::scalar(static_cast<S>(value)), any_grad({logits}),
                [this, logits, tgt = std::move(tgt), probs = std::move(probs), inter, denom,
                 n](Node& nd) {
                  if (!needs_grad(logits) || denom == 0) return;
                  Tensor<S>& g = grad_buf(logits);
                  double d0 = static_cast<double>(nd.grad[0]);
                  for (int64_t i = 0; i < n; ++i) {
                    double p = probs[i];
                    double ddp = -2.0 * (tgt[i] * denom - inter) / (denom * denom);
                    g[i] += static_cast<S>(d0 * ddp * p * (1.0 - p));
                  }
                });
  }

  /// Mean binary cross-entropy with logits; targets in [0,1].
  Var bce_with_logits(Var logits, const Tensor<S>& target) {
    const Tensor<S>& vx = val(logits);
    if (vx.numel() != target.numel()) throw ShapeMismatch("bce_with_logits");
    int64_t n = vx.numel();
    double total = 0;
    for (int64_t i = 0; i < n; ++i)
      total += softplus(static_cast<double>(vx[i])) -
               static_cast<double>(vx[i]) * static_cast<double>(target[i]);
    Tensor<S> tgt = target;
    return push(Tensor<S>::scalar(static_cast<S>(total / n)), any_grad({logits}),
                [this, logits, tgt = std::move(tgt), n](Node& nd) {
                  if (!needs_grad(logits)) return;
                  Tensor<S>& g = grad_buf(logits);
                  const Tensor<S>& vx = val(logits);
                  double scale = static_cast<double>(nd.grad[0]) / n;
                  for (int64_t i = 0; i < n; ++i)
                    g[i] += static_cast<S>(scale * (sigmoid_d(static_cast<double>(vx[i])) -
                                                    static_cast<double>(tgt[i])));
                });
  }

  /// Mean cross-entropy over rows with label smoothing; logits [n,V].
  Var cross_entropy_smoothed(Var logits, std::vector<int> targets, S smooth) {
    const Tensor<S>& vx = val(logits);
    int n = vx.rows_flat(), V = vx.cols_flat();
    if (static_cast<int>(targets.size()) != n) throw LengthMismatch("cross_entropy_smoothed");
    double eps = static_cast<double>(smooth);
    double total = 0;
    Tensor<S> lsm({n, V});
    for (int i = 0; i < n; ++i) {
      const S* x = vx.data() + static_cast<int64_t>(i) * V;
      S mx = x[0];
      for (int j = 1; j < V; ++j) mx = std::max(mx, x[j]);
      double lse = 0;
      for (int j = 0; j < V; ++j) lse += std::exp(static_cast<double>(x[j] - mx));
      lse = std::log(lse) + mx;
      double row_loss = 0;
      S* l = lsm.data() + static_cast<int64_t>(i) * V;
      for (int j = 0; j < V; ++j) {
        double logp = static_cast<double>(x[j]) - lse;
        l[j] = static_cast<S>(logp);
        double t = eps / V + (j == targets[i] ? 1.0 - eps : 0.0);
        row_loss -= t * logp;
      }
      total += row_loss;
    }
    return push(Tensor<S>::scalar(static_cast<S>(total / n)), any_grad({logits}),
                [this, logits, targets = std::move(targets), lsm = std::move(lsm), n, V,
                 eps](Node& nd) {
                  if (!needs_grad(logits)) return;
                  Tensor<S>& g = grad_buf(logits);
                  double scale = static_cast<double>(nd.grad[0]) / n;
                  for (int i = 0; i < n; ++i) {
                    const S* l = lsm.data() + static_cast<int64_t>(i) * V;
                    S* gr = g.data() + static_cast<int64_t>(i) * V;
                    for (int j = 0; j < V; ++j) {
                      double t = eps / V + (j == targets[i] ? 1.0 - eps : 0.0);
                      gr[j] += static_cast<S>(scale * (std::exp(static_cast<double>(l[j])) - t));
                    }
                  }
                });
  }

  /// Mean |x - target|.
  Var l1_to_const(Var x, const Tensor<S>& target) {
    const Tensor<S>& vx = val(x);
    if (vx.numel() != target.numel()) throw ShapeMismatch("l1_to_const");
    int64_t n = vx.numel();
    double total = 0;
    for (int64_t i = 0; i < n; ++i) total += std::abs(static_cast<double>(vx[i] - target[i]));
    Tensor<S> tgt = target;
    return push(Tensor<S>::scalar(static_cast<S>(total / n)), any_grad({x}),
                [this, x, tgt = std::move(tgt), n](Node& nd) {
                  if (!needs_grad(x)) return;
                  Tensor<S>& g = grad_buf(x);
                  const Tensor<S>& vx = val(x);
                  double scale = static_cast<double>(nd.grad[0]) / n;
                  for (int64_t i = 0; i < n; ++i) {
                    double d = static_cast<double>(vx[i] - tgt[i]);
                    g[i] += static_cast<S>(scale * (d > 0 ? 1.0 : (d < 0 ? -1.0 : 0.0)));
                  }
                });
  }

  // ---- driver ---------------------------------------------------------------

  void backward(Var loss) {
    if (val(loss).numel() != 1) throw InternalError("backward: loss must be scalar");
    grad_buf(loss)[0] = S(1);
    for (int i = loss.id; i >= 0; --i) {
      Node& n = nodes_[i];
      if (n.grad.defined() && n.back) n.back(n);
    }
  }

 private:
  struct Node {
    Tensor<S> value;
    Tensor<S> grad;
    bool needs_grad = false;
    std::function<void(Node&)> back;
  };

  static double sigmoid_d(double x) { return 1.0 / (1.0 + std::exp(-x)); }
  static double softplus(double x) { return x > 30 ? x : std::log1p(std::exp(x)); }

  static Eigen::Map<Eigen::Array<S, Eigen::Dynamic, 1>> arr(S* p, int64_t n) {
    return Eigen::Map<Eigen::Array<S, Eigen::Dynamic, 1>>(p, n);
  }
  static Eigen::Map<const Eigen::Array<S, Eigen::Dynamic, 1>> arr(const S* p, int64_t n) {
    return Eigen::Map<const Eigen::Array<S, Eigen::Dynamic, 1>>(p, n);
  }

  static void im2col(const S* x, int H, int W, int Ci, int kh, int kw, int stride, int pad,
                     int Ho, int Wo, S* cols) {
    for (int ho = 0; ho < Ho; ++ho)
      for (int wo = 0; wo < Wo; ++wo) {
        S* dst = cols + (static_cast<int64_t>(ho) * Wo + wo) * kh * kw * Ci;
        for (int dh = 0; dh < kh; ++dh) {
          int hi = ho * stride - pad + dh;
          for (int dw = 0; dw < kw; ++dw, dst += Ci) {
            int wi = wo * stride - pad + dw;
            if (hi < 0 || hi >= H || wi < 0 || wi >= W) {
              std::fill(dst, dst + Ci, S(0));
            } else {
              const S* src = x + (static_cast<int64_t>(hi) * W + wi) * Ci;
              std::copy(src, src + Ci, dst);
            }
          }
        }
      }
  }

  static void col2im_acc(const S* cols, int H, int W, int Ci, int kh, int kw, int stride,
                         int pad, int Ho, int Wo, S* dx) {
    for (int ho = 0; ho < Ho; ++ho)
      for (int wo = 0; wo < Wo; ++wo) {
        const S* src = cols + (static_cast<int64_t>(ho) * Wo + wo) * kh * kw * Ci;
        for (int dh = 0; dh < kh; ++dh) {
          int hi = ho * stride - pad + dh;
          for (int dw = 0; dw < kw; ++dw, src += Ci) {
            int wi = wo * stride - pad + dw;
            if (hi < 0 || hi >= H || wi < 0 || wi >= W) continue;
            S* dst = dx + (static_cast<int64_t>(hi) * W + wi) * Ci;
            for (int c = 0; c < Ci; ++c) dst[c] += src[c];
          }
        }
      }
  }

  Var push(Tensor<S> value, bool needs, std::function<void(Node&)> back) {
    Node n;
    n.value = std::move(value);
    n.needs_grad = needs;
    n.back = needs ? std::move(back) : nullptr;
    nodes_.push_back(std::move(n));
    return Var{static_cast<int>(nodes_.size()) - 1};
  }

  Tensor<S>& grad_buf(Var v) {
    Node& n = nodes_[v.id];
    if (!n.grad.defined()) n.grad = Tensor<S>::zeros(n.value.shape());
    return n.grad;
  }

  void acc(Var v, const Tensor<S>& delta) {
    Tensor<S>& g = grad_buf(v);
    g.mat(g.numel(), 1) += delta.mat(delta.numel(), 1);
  }

  bool any_grad(std::initializer_list<Var> vs) const {
    for (Var v : vs)
      if (nodes_[v.id].needs_grad) return true;
    return false;
  }

  void check_same_shape(Var a, Var b, const char* op) const {
    if (!nodes_[a.id].value.same_shape(nodes_[b.id].value))
      throw ShapeMismatch(std::string(op) + ": operand shapes differ");
  }

  std::vector<Node> nodes_;
};

}  // namespace vocap
