#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "fhrformer/graph.hpp"
#include "fhrformer/rng.hpp"
#include "fhrformer/tensor.hpp"

// Expression-style free functions over VarT handles. Every differentiable op
// records a closure that pushes gradients back to its inputs; gradients of a
// node used several times accumulate by summation.

namespace fhrformer {

namespace detail {

template <typename S>
void require(bool cond, const std::string& msg) {
  if (!cond) throw DimensionError(msg);
}

}  // namespace detail

/// a [m x k] * b [k x n] -> [m x n]
template <typename S>
VarT<S> matmul(VarT<S> a, VarT<S> b) {
  GraphT<S>& g = *a.graph;
  const TensorT<S>& av = a.value();
  const TensorT<S>& bv = b.value();
  if (av.cols() != bv.rows())
    throw DimensionError("matmul: inner dimensions disagree " + av.shape_str() + " * " + bv.shape_str());
  TensorT<S> out = TensorT<S>::matrix(av.rows(), bv.cols());
  out.mat().noalias() = av.mat() * bv.mat();
  const int ai = a.id, bi = b.id;
  const bool needs = g.node(ai).requires_grad || g.node(bi).requires_grad;
  return g.push(std::move(out), needs,
                [ai, bi](GraphT<S>& gr, int self) {
                  const auto& go = gr.node(self).grad.mat();
                  gr.accumulate(ai, go * gr.node(bi).value.mat().transpose());
                  gr.accumulate(bi, gr.node(ai).value.mat().transpose() * go);
                },
                "matmul");
}

/// a [m x k] * b^T [n x k] -> [m x n]
template <typename S>
VarT<S> matmul_nt(VarT<S> a, VarT<S> b) {
  GraphT<S>& g = *a.graph;
  const TensorT<S>& av = a.value();
  const TensorT<S>& bv = b.value();
  if (av.cols() != bv.cols())
    throw DimensionError("matmul_nt: inner dimensions disagree " + av.shape_str() + " * " + bv.shape_str() + "^T");
  TensorT<S> out = TensorT<S>::matrix(av.rows(), bv.rows());
  out.mat().noalias() = av.mat() * bv.mat().transpose();
  const int ai = a.id, bi = b.id;
  const bool needs = g.node(ai).requires_grad || g.node(bi).requires_grad;
  return g.push(std::move(out), needs,
                [ai, bi](GraphT<S>& gr, int self) {
                  const auto& go = gr.node(self).grad.mat();
                  gr.accumulate(ai, go * gr.node(bi).value.mat());
                  gr.accumulate(bi, go.transpose() * gr.node(ai).value.mat());
                },
                "matmul_nt");
}

template <typename S>
VarT<S> transpose(VarT<S> a) {
  GraphT<S>& g = *a.graph;
  TensorT<S> out = TensorT<S>::matrix(a.cols(), a.rows());
  out.mat() = a.value().mat().transpose();
  const int ai = a.id;
  return g.push(std::move(out), g.node(ai).requires_grad,
                [ai](GraphT<S>& gr, int self) {
                  gr.accumulate(ai, gr.node(self).grad.mat().transpose());
                },
                "transpose");
}

template <typename S>
VarT<S> add(VarT<S> a, VarT<S> b) {
  GraphT<S>& g = *a.graph;
  if (!a.value().same_shape(b.value()))
    throw DimensionError("add: shape mismatch " + a.value().shape_str() + " vs " + b.value().shape_str());
  TensorT<S> out = a.value();
  out.mat() += b.value().mat();
  const int ai = a.id, bi = b.id;
  const bool needs = g.node(ai).requires_grad || g.node(bi).requires_grad;
  return g.push(std::move(out), needs,
                [ai, bi](GraphT<S>& gr, int self) {
                  gr.accumulate(ai, gr.node(self).grad.mat());
                  gr.accumulate(bi, gr.node(self).grad.mat());
                },
                "add");
}

template <typename S>
VarT<S> sub(VarT<S> a, VarT<S> b) {
  GraphT<S>& g = *a.graph;
  if (!a.value().same_shape(b.value()))
    throw DimensionError("sub: shape mismatch " + a.value().shape_str() + " vs " + b.value().shape_str());
  TensorT<S> out = a.value();
  out.mat() -= b.value().mat();
  const int ai = a.id, bi = b.id;
  const bool needs = g.node(ai).requires_grad || g.node(bi).requires_grad;
  return g.push(std::move(out), needs,
                [ai, bi](GraphT<S>& gr, int self) {
                  gr.accumulate(ai, gr.node(self).grad.mat());
                  gr.accumulate(bi, -gr.node(self).grad.mat());
                },
                "sub");
}

/// Elementwise product.
template <typename S>
VarT<S> mul(VarT<S> a, VarT<S> b) {
  GraphT<S>& g = *a.graph;
  if (!a.value().same_shape(b.value()))
    throw DimensionError("mul: shape mismatch " + a.value().shape_str() + " vs " + b.value().shape_str());
  TensorT<S> out = a.value();
  out.mat() = out.mat().cwiseProduct(b.value().mat());
  const int ai = a.id, bi = b.id;
  const bool needs = g.node(ai).requires_grad || g.node(bi).requires_grad;
  return g.push(std::move(out), needs,
                [ai, bi](GraphT<S>& gr, int self) {
                  const auto& go = gr.node(self).grad.mat();
                  gr.accumulate(ai, go.cwiseProduct(gr.node(bi).value.mat()));
                  gr.accumulate(bi, go.cwiseProduct(gr.node(ai).value.mat()));
                },
                "mul");
}

/// Adds a length-n row vector to every row of an [m x n] matrix.
template <typename S>
VarT<S> add_rowvec(VarT<S> m, VarT<S> v) {
  GraphT<S>& g = *m.graph;
  if (v.value().size() != m.cols())
    throw DimensionError("add_rowvec: vector length " + v.value().shape_str() + " vs matrix " + m.value().shape_str());
  TensorT<S> out = m.value();
  out.mat().rowwise() += v.value().vec().transpose();
  const int mi = m.id, vi = v.id;
  const bool needs = g.node(mi).requires_grad || g.node(vi).requires_grad;
  return g.push(std::move(out), needs,
                [mi, vi](GraphT<S>& gr, int self) {
                  const auto& go = gr.node(self).grad.mat();
                  gr.accumulate(mi, go);
                  gr.accumulate(vi, go.colwise().sum());
                },
                "add_rowvec");
}

/// s * x + t, elementwise with compile-time constants.
template <typename S>
VarT<S> affine(VarT<S> x, S s, S t) {
  GraphT<S>& g = *x.graph;
  TensorT<S> out = x.value();
  out.mat() = s * out.mat().array() + t;
  const int xi = x.id;
  return g.push(std::move(out), g.node(xi).requires_grad,
                [xi, s](GraphT<S>& gr, int self) {
                  gr.accumulate(xi, s * gr.node(self).grad.mat());
                },
                "affine");
}

template <typename S>
VarT<S> scale(VarT<S> x, S s) {
  return affine(x, s, S(0));
}

template <typename S>
VarT<S> relu(VarT<S> x) {
  GraphT<S>& g = *x.graph;
  TensorT<S> out = x.value();
  out.mat() = out.mat().cwiseMax(S(0));
  const int xi = x.id;
  return g.push(std::move(out), g.node(xi).requires_grad,
                [xi](GraphT<S>& gr, int self) {
                  const auto mask =
                      (gr.node(xi).value.mat().array() > S(0)).template cast<S>();
                  gr.accumulate(xi, gr.node(self).grad.mat().cwiseProduct(mask.matrix()));
                },
                "relu");
}

template <typename S>
VarT<S> exp_op(VarT<S> x) {
  GraphT<S>& g = *x.graph;
  TensorT<S> out = x.value();
  out.mat() = out.mat().array().exp();
  const int xi = x.id;
  return g.push(std::move(out), g.node(xi).requires_grad,
                [xi](GraphT<S>& gr, int self) {
                  gr.accumulate(
                      xi, gr.node(self).grad.mat().cwiseProduct(gr.node(self).value.mat()));
                },
                "exp");
}

template <typename S>
VarT<S> sqrt_op(VarT<S> x) {
  GraphT<S>& g = *x.graph;
  TensorT<S> out = x.value();
  out.mat() = out.mat().array().sqrt();
  const int xi = x.id;
  return g.push(std::move(out), g.node(xi).requires_grad,
                [xi](GraphT<S>& gr, int self) {
                  const auto& y = gr.node(self).value.mat();
                  gr.accumulate(xi, (gr.node(self).grad.mat().array() * S(0.5) / y.array()).matrix());
                },
                "sqrt");
}

/// |x| with subgradient 0 at x == 0.
template <typename S>
VarT<S> abs_op(VarT<S> x) {
  GraphT<S>& g = *x.graph;
  TensorT<S> out = x.value();
  out.mat() = out.mat().cwiseAbs();
  const int xi = x.id;
  return g.push(std::move(out), g.node(xi).requires_grad,
                [xi](GraphT<S>& gr, int self) {
                  const auto sgn = gr.node(xi).value.mat().array().sign();
                  gr.accumulate(xi, gr.node(self).grad.mat().cwiseProduct(sgn.matrix()));
                },
                "abs");
}

template <typename S>
VarT<S> square(VarT<S> x) {
  GraphT<S>& g = *x.graph;
  TensorT<S> out = x.value();
  out.mat() = out.mat().array().square();
  const int xi = x.id;
  return g.push(std::move(out), g.node(xi).requires_grad,
                [xi](GraphT<S>& gr, int self) {
                  gr.accumulate(xi, S(2) * gr.node(self).grad.mat().cwiseProduct(gr.node(xi).value.mat()));
                },
                "square");
}

/// Softmax along `axis` (0 = down columns, 1 = along rows). Max-subtracted
/// for stability; rank-1 input is treated as one row.
template <typename S>
VarT<S> softmax(VarT<S> x, int axis = 1) {
  GraphT<S>& g = *x.graph;
  if (axis != 0 && axis != 1) throw ParameterError("softmax: axis must be 0 or 1");
  TensorT<S> out = x.value();
  auto m = out.mat();
  if (axis == 1) {
    for (int r = 0; r < m.rows(); ++r) {
      auto row = m.row(r);
      row = (row.array() - row.maxCoeff()).exp();
      row /= row.sum();
    }
  } else {
    for (int c = 0; c < m.cols(); ++c) {
      auto col = m.col(c);
      col = (col.array() - col.maxCoeff()).exp();
      col /= col.sum();
    }
  }
  const int xi = x.id;
  return g.push(std::move(out), g.node(xi).requires_grad,
                [xi, axis](GraphT<S>& gr, int self) {
                  const auto& y = gr.node(self).value.mat();
                  const auto& go = gr.node(self).grad.mat();
                  MatrixX<S> gx(y.rows(), y.cols());
                  if (axis == 1) {
                    for (int r = 0; r < y.rows(); ++r) {
                      const S dot = go.row(r).dot(y.row(r));
                      gx.row(r) = y.row(r).cwiseProduct(go.row(r).array() - dot);
                    }
                  } else {
                    for (int c = 0; c < y.cols(); ++c) {
                      const S dot = go.col(c).dot(y.col(c));
                      gx.col(c) = y.col(c).cwiseProduct(go.col(c).array() - dot);
                    }
                  }
                  gr.accumulate(xi, gx);
                },
                "softmax");
}

/// Per-row normalization to zero mean / unit variance followed by an affine
/// map; eps sits inside the square root.
template <typename S>
VarT<S> layer_norm(VarT<S> x, VarT<S> gain, VarT<S> bias, S eps = S(1e-5)) {
  GraphT<S>& g = *x.graph;
  const int n = x.cols();
  if (gain.value().size() != n || bias.value().size() != n)
    throw DimensionError("layer_norm: gain/bias must match last dimension");
  const int rows = x.rows();
  TensorT<S> xhat = TensorT<S>::matrix(rows, n);
  TensorT<S> inv_std = TensorT<S>::vector(rows);
  for (int r = 0; r < rows; ++r) {
    const auto row = x.value().mat().row(r);
    const S mean = row.mean();
    const S var = (row.array() - mean).square().sum() / S(n);
    const S is = S(1) / std::sqrt(var + eps);
    inv_std.at(r) = is;
    xhat.mat().row(r) = (row.array() - mean) * is;
  }
  TensorT<S> out = xhat;
  out.mat() = out.mat().array().rowwise() * gain.value().vec().transpose().array();
  out.mat().rowwise() += bias.value().vec().transpose();
  const int xi = x.id, gi = gain.id, bi = bias.id;
  const bool needs =
      g.node(xi).requires_grad || g.node(gi).requires_grad || g.node(bi).requires_grad;
  return g.push(std::move(out), needs,
                [xi, gi, bi, xhat, inv_std, n](GraphT<S>& gr, int self) {
                  const auto& go = gr.node(self).grad.mat();
                  gr.accumulate(gi, go.cwiseProduct(xhat.mat()).colwise().sum());
                  gr.accumulate(bi, go.colwise().sum());
                  if (!gr.node(xi).requires_grad) return;
                  const auto gv = gr.node(gi).value.vec().transpose();
                  MatrixX<S> gx(go.rows(), n);
                  for (int r = 0; r < go.rows(); ++r) {
                    const auto dxhat = (go.row(r).array() * gv.array()).matrix();
                    const S mean_dxhat = dxhat.mean();
                    const S mean_dxhat_xhat = dxhat.cwiseProduct(xhat.mat().row(r)).mean();
                    gx.row(r) = inv_std.at(r) *
                                (dxhat.array() - mean_dxhat -
                                 xhat.mat().row(r).array() * mean_dxhat_xhat);
                  }
                  gr.accumulate(xi, gx);
                },
                "layer_norm");
}

/// Inverted dropout: each element zeroed with probability `rate` during
/// training, survivors scaled by 1/(1-rate). Identity in inference mode.
template <typename S>
VarT<S> dropout(VarT<S> x, S rate, bool training, Rng& rng) {
  if (!(rate >= S(0) && rate < S(1))) throw ParameterError("dropout: rate must be in [0,1)");
  GraphT<S>& g = *x.graph;
  if (!training || rate == S(0)) return x;
  const S keep_scale = S(1) / (S(1) - rate);
  TensorT<S> mask = x.value();
  for (int i = 0; i < mask.size(); ++i)
    mask.at(i) = rng.bernoulli(static_cast<double>(rate)) ? S(0) : keep_scale;
  TensorT<S> out = x.value();
  out.mat() = out.mat().cwiseProduct(mask.mat());
  const int xi = x.id;
  return g.push(std::move(out), g.node(xi).requires_grad,
                [xi, mask](GraphT<S>& gr, int self) {
                  gr.accumulate(xi, gr.node(self).grad.mat().cwiseProduct(mask.mat()));
                },
                "dropout");
}

/// Gathers rows by index; backward scatters gradients back.
template <typename S>
VarT<S> slice_rows(VarT<S> x, std::vector<int> idx) {
  GraphT<S>& g = *x.graph;
  TensorT<S> out = TensorT<S>::matrix(static_cast<int>(idx.size()), x.cols());
  for (int r = 0; r < out.rows(); ++r) {
    if (idx[r] < 0 || idx[r] >= x.rows()) throw DimensionError("slice_rows: index out of range");
    out.mat().row(r) = x.value().mat().row(idx[r]);
  }
  const int xi = x.id;
  return g.push(std::move(out), g.node(xi).requires_grad,
                [xi, idx = std::move(idx)](GraphT<S>& gr, int self) {
                  if (!gr.node(xi).requires_grad) return;
                  MatrixX<S> gx = MatrixX<S>::Zero(gr.node(xi).value.rows(), gr.node(xi).value.cols());
                  const auto& go = gr.node(self).grad.mat();
                  for (int r = 0; r < go.rows(); ++r) gx.row(idx[r]) += go.row(r);
                  gr.accumulate(xi, gx);
                },
                "slice_rows");
}

/// Places the rows of x at `idx` inside a zero [total x cols] matrix.
template <typename S>
VarT<S> scatter_rows(VarT<S> x, std::vector<int> idx, int total) {
  GraphT<S>& g = *x.graph;
  if (static_cast<int>(idx.size()) != x.rows())
    throw DimensionError("scatter_rows: index count must match row count");
  TensorT<S> out = TensorT<S>::matrix(total, x.cols());
  for (int r = 0; r < x.rows(); ++r) {
    if (idx[r] < 0 || idx[r] >= total) throw DimensionError("scatter_rows: index out of range");
    out.mat().row(idx[r]) = x.value().mat().row(r);
  }
  const int xi = x.id;
  return g.push(std::move(out), g.node(xi).requires_grad,
                [xi, idx = std::move(idx)](GraphT<S>& gr, int self) {
                  if (!gr.node(xi).requires_grad) return;
                  const auto& go = gr.node(self).grad.mat();
                  MatrixX<S> gx(static_cast<int>(idx.size()), go.cols());
                  for (std::size_t r = 0; r < idx.size(); ++r)
                    gx.row(static_cast<int>(r)) = go.row(idx[r]);
                  gr.accumulate(xi, gx);
                },
                "scatter_rows");
}

/// Column range [c0, c0+len).
template <typename S>
VarT<S> slice_cols(VarT<S> x, int c0, int len) {
  GraphT<S>& g = *x.graph;
  if (c0 < 0 || len <= 0 || c0 + len > x.cols())
    throw DimensionError("slice_cols: range out of bounds");
  TensorT<S> out = TensorT<S>::matrix(x.rows(), len);
  out.mat() = x.value().mat().middleCols(c0, len);
  const int xi = x.id;
  return g.push(std::move(out), g.node(xi).requires_grad,
                [xi, c0, len](GraphT<S>& gr, int self) {
                  if (!gr.node(xi).requires_grad) return;
                  MatrixX<S> gx = MatrixX<S>::Zero(gr.node(xi).value.rows(), gr.node(xi).value.cols());
                  gx.middleCols(c0, len) = gr.node(self).grad.mat();
                  gr.accumulate(xi, gx);
                },
                "slice_cols");
}

template <typename S>
VarT<S> concat_cols(const std::vector<VarT<S>>& parts) {
  if (parts.empty()) throw DimensionError("concat_cols: no inputs");
  GraphT<S>& g = *parts[0].graph;
  const int rows = parts[0].rows();
  int cols = 0;
  bool needs = false;
  for (const auto& p : parts) {
    if (p.rows() != rows) throw DimensionError("concat_cols: row mismatch");
    cols += p.cols();
    needs = needs || g.node(p.id).requires_grad;
  }
  TensorT<S> out = TensorT<S>::matrix(rows, cols);
  std::vector<int> ids;
  std::vector<int> offs;
  int off = 0;
  for (const auto& p : parts) {
    out.mat().middleCols(off, p.cols()) = p.value().mat();
    ids.push_back(p.id);
    offs.push_back(off);
    off += p.cols();
  }
  return g.push(std::move(out), needs,
                [ids, offs](GraphT<S>& gr, int self) {
                  const auto& go = gr.node(self).grad.mat();
                  for (std::size_t k = 0; k < ids.size(); ++k) {
                    const int w = gr.node(ids[k]).value.cols();
                    gr.accumulate(ids[k], go.middleCols(offs[k], w));
                  }
                },
                "concat_cols");
}

/// Repeats a length-n vector as `count` rows.
template <typename S>
VarT<S> tile_row(VarT<S> v, int count) {
  GraphT<S>& g = *v.graph;
  const int n = v.value().size();
  TensorT<S> out = TensorT<S>::matrix(count, n);
  out.mat().rowwise() = v.value().vec().transpose();
  const int vi = v.id;
  return g.push(std::move(out), g.node(vi).requires_grad,
                [vi](GraphT<S>& gr, int self) {
                  gr.accumulate(vi, gr.node(self).grad.mat().colwise().sum());
                },
                "tile_row");
}

template <typename S>
VarT<S> reshape(VarT<S> x, int rows, int cols, int rank = 2) {
  GraphT<S>& g = *x.graph;
  const int xr = x.rows(), xc = x.cols(), xrank = x.value().rank();
  TensorT<S> out = x.value().reshaped(rows, cols, rank);
  const int xi = x.id;
  return g.push(std::move(out), g.node(xi).requires_grad,
                [xi, xr, xc, xrank](GraphT<S>& gr, int self) {
                  gr.accumulate(xi, gr.node(self).grad.reshaped(xr, xc, xrank).mat());
                },
                "reshape");
}

template <typename S>
VarT<S> sum_all(VarT<S> x) {
  GraphT<S>& g = *x.graph;
  TensorT<S> out = TensorT<S>::vector(1);
  out.at(0) = x.value().vec().sum();
  const int xi = x.id;
  const int xr = x.rows(), xc = x.cols();
  return g.push(std::move(out), g.node(xi).requires_grad,
                [xi, xr, xc](GraphT<S>& gr, int self) {
                  gr.accumulate(xi, MatrixX<S>::Constant(xr, xc, gr.node(self).grad.at(0)));
                },
                "sum_all");
}

template <typename S>
VarT<S> mean_all(VarT<S> x) {
  return scale(sum_all(x), S(1) / S(x.value().size()));
}

template <typename S>
VarT<S> operator+(VarT<S> a, VarT<S> b) { return add(a, b); }
template <typename S>
VarT<S> operator-(VarT<S> a, VarT<S> b) { return sub(a, b); }
template <typename S>
VarT<S> operator*(S s, VarT<S> x) { return scale(x, s); }

}  // namespace fhrformer
