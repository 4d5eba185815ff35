#pragma once

#include <array>
#include <cmath>
#include <functional>
#include <utility>
#include <vector>

#include "e3net/tensor.hpp"

namespace e3net {

template <typename S>
class Tape;

/// Handle to a node on a Tape. Cheap to copy; only valid until the owning
/// tape is cleared or destroyed.
template <typename S>
struct Var {
  Tape<S>* tape = nullptr;
  int id = -1;
  bool valid() const { return tape != nullptr && id >= 0; }
  const Tensor<S>& value() const { return tape->value(*this); }
  const Shape& shape() const { return tape->value(*this).shape(); }
};

/// Reverse-mode tape. Every operation appends a node holding the forward
/// value and, when any parent requires gradients, a closure that pushes the
/// node's gradient to its parents. Nodes are replayed in reverse creation
/// order, which is a valid topological order by construction.
template <typename S>
class Tape {
 public:
  using BackFn = std::function<void(Tape&, int)>;

  Var<S> input(Tensor<S> value, bool requires_grad = false) {
    nodes_.push_back(Node{std::move(value), Tensor<S>(), nullptr, requires_grad});
    return Var<S>{this, static_cast<int>(nodes_.size()) - 1};
  }

  Var<S> constant(Tensor<S> value) { return input(std::move(value), false); }

  Var<S> emit(Tensor<S> value, std::initializer_list<Var<S>> parents, BackFn back) {
    bool needs = false;
    for (const Var<S>& p : parents) needs = needs || nodes_[p.id].needs;
    nodes_.push_back(Node{std::move(value), Tensor<S>(), needs ? std::move(back) : nullptr, needs});
    return Var<S>{this, static_cast<int>(nodes_.size()) - 1};
  }
  Var<S> emit(Tensor<S> value, const std::vector<Var<S>>& parents, BackFn back) {
    bool needs = false;
    for (const Var<S>& p : parents) needs = needs || nodes_[p.id].needs;
    nodes_.push_back(Node{std::move(value), Tensor<S>(), needs ? std::move(back) : nullptr, needs});
    return Var<S>{this, static_cast<int>(nodes_.size()) - 1};
  }

  /// Runs reverse accumulation from a scalar root.
  void backward(Var<S> root) {
    if (value(root).size() != 1)
      throw ShapeMismatch("backward root must be a scalar, got " +
                          shape_str(value(root).shape()));
    grad_buffer(root.id).array().setConstant(S(1));
    for (int id = root.id; id >= 0; --id) {
      Node& n = nodes_[id];
      if (!n.back || n.grad.empty()) continue;
      n.back(*this, id);
    }
  }

  const Tensor<S>& value(Var<S> v) const { return nodes_[v.id].value; }
  bool needs_grad(Var<S> v) const { return nodes_[v.id].needs; }
  bool has_grad(Var<S> v) const { return !nodes_[v.id].grad.empty(); }

  /// Gradient of a node; zeros if backward never reached it.
  Tensor<S> grad(Var<S> v) const {
    if (nodes_[v.id].grad.empty()) return Tensor<S>(nodes_[v.id].value.shape());
    return nodes_[v.id].grad;
  }

  /// Lazily allocated accumulation buffer, shaped like the node value.
  Tensor<S>& grad_buffer(int id) {
    Node& n = nodes_[id];
    if (n.grad.empty()) n.grad = Tensor<S>(n.value.shape());
    return n.grad;
  }
  const Tensor<S>& node_value(int id) const { return nodes_[id].value; }

  void clear() { nodes_.clear(); }
  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Tensor<S> value;
    Tensor<S> grad;
    BackFn back;
    bool needs = false;
  };
  std::vector<Node> nodes_;
};

// ---------------------------------------------------------------------------
// Elementwise and scalar operations
// ---------------------------------------------------------------------------

namespace detail {
template <typename S>
void check_same_shape(const Tensor<S>& a, const Tensor<S>& b, const char* op) {
  if (a.shape() != b.shape())
    throw ShapeMismatch(std::string(op) + ": shapes " + shape_str(a.shape()) + " vs " +
                        shape_str(b.shape()));
}
}  // namespace detail

template <typename S>
Var<S> add(Var<S> a, Var<S> b) {
  Tape<S>& t = *a.tape;
  detail::check_same_shape(t.value(a), t.value(b), "add");
  Tensor<S> out(t.value(a).shape(), t.value(a).array() + t.value(b).array());
  return t.emit(std::move(out), {a, b}, [a = a.id, b = b.id](Tape<S>& t, int self) {
    const auto& g = t.grad_buffer(self).array();
    t.grad_buffer(a).array() += g;
    t.grad_buffer(b).array() += g;
  });
}

template <typename S>
Var<S> sub(Var<S> a, Var<S> b) {
  Tape<S>& t = *a.tape;
  detail::check_same_shape(t.value(a), t.value(b), "sub");
  Tensor<S> out(t.value(a).shape(), t.value(a).array() - t.value(b).array());
  return t.emit(std::move(out), {a, b}, [a = a.id, b = b.id](Tape<S>& t, int self) {
    const auto& g = t.grad_buffer(self).array();
    t.grad_buffer(a).array() += g;
    t.grad_buffer(b).array() -= g;
  });
}

template <typename S>
Var<S> mul(Var<S> a, Var<S> b) {
  Tape<S>& t = *a.tape;
  detail::check_same_shape(t.value(a), t.value(b), "mul");
  Tensor<S> out(t.value(a).shape(), t.value(a).array() * t.value(b).array());
  return t.emit(std::move(out), {a, b}, [a = a.id, b = b.id](Tape<S>& t, int self) {
    const auto& g = t.grad_buffer(self).array();
    t.grad_buffer(a).array() += g * t.node_value(b).array();
    t.grad_buffer(b).array() += g * t.node_value(a).array();
  });
}

template <typename S>
Var<S> square(Var<S> a) {
  return mul(a, a);
}

template <typename S>
Var<S> scale(Var<S> a, S c) {
  Tape<S>& t = *a.tape;
  Tensor<S> out(t.value(a).shape(), t.value(a).array() * c);
  return t.emit(std::move(out), {a}, [a = a.id, c](Tape<S>& t, int self) {
    t.grad_buffer(a).array() += t.grad_buffer(self).array() * c;
  });
}

template <typename S>
Var<S> add_scalar(Var<S> a, S c) {
  Tape<S>& t = *a.tape;
  Tensor<S> out(t.value(a).shape(), t.value(a).array() + c);
  return t.emit(std::move(out), {a}, [a = a.id](Tape<S>& t, int self) {
    t.grad_buffer(a).array() += t.grad_buffer(self).array();
  });
}

template <typename S>
Var<S> tanh_op(Var<S> a) {
  Tape<S>& t = *a.tape;
  Tensor<S> out(t.value(a).shape(), t.value(a).array().tanh());
  return t.emit(std::move(out), {a}, [a = a.id](Tape<S>& t, int self) {
    const auto& y = t.node_value(self).array();
    t.grad_buffer(a).array() += t.grad_buffer(self).array() * (S(1) - y * y);
  });
}

template <typename S>
Var<S> sigmoid_op(Var<S> a) {
  Tape<S>& t = *a.tape;
  Tensor<S> out(t.value(a).shape(), S(1) / (S(1) + (-t.value(a).array()).exp()));
  return t.emit(std::move(out), {a}, [a = a.id](Tape<S>& t, int self) {
    const auto& y = t.node_value(self).array();
    t.grad_buffer(a).array() += t.grad_buffer(self).array() * y * (S(1) - y);
  });
}

/// Exact (erf-based) GELU.
template <typename S>
Var<S> gelu(Var<S> a) {
  Tape<S>& t = *a.tape;
  const auto& x = t.value(a).array();
  ArrayX<S> cdf(x.size());
  for (Index i = 0; i < x.size(); ++i)
    cdf[i] = S(0.5) * (S(1) + std::erf(x[i] * S(0.7071067811865475)));
  Tensor<S> out(t.value(a).shape(), x * cdf);
  return t.emit(std::move(out), {a}, [a = a.id, cdf = std::move(cdf)](Tape<S>& t, int self) {
    const auto& x = t.node_value(a).array();
    const ArrayX<S> pdf = S(0.3989422804014327) * (-S(0.5) * x * x).exp();
    t.grad_buffer(a).array() += t.grad_buffer(self).array() * (cdf + x * pdf);
  });
}

// ---------------------------------------------------------------------------
// Linear algebra
// ---------------------------------------------------------------------------

/// [m,k] x [k,n] -> [m,n]
template <typename S>
Var<S> matmul(Var<S> a, Var<S> b) {
  Tape<S>& t = *a.tape;
  const auto& av = t.value(a);
  const auto& bv = t.value(b);
  if (av.rank() != 2 || bv.rank() != 2 || av.dim(1) != bv.dim(0))
    throw ShapeMismatch("matmul: " + shape_str(av.shape()) + " x " + shape_str(bv.shape()));
  const Index m = av.dim(0), k = av.dim(1), n = bv.dim(1);
  Tensor<S> out({m, n});
  out.as_matrix(m, n).noalias() = av.as_matrix(m, k) * bv.as_matrix(k, n);
  return t.emit(std::move(out), {a, b}, [a = a.id, b = b.id, m, k, n](Tape<S>& t, int self) {
    auto g = t.grad_buffer(self).as_matrix(m, n);
    t.grad_buffer(a).as_matrix(m, k).noalias() += g * t.node_value(b).as_matrix(k, n).transpose();
    t.grad_buffer(b).as_matrix(k, n).noalias() += t.node_value(a).as_matrix(m, k).transpose() * g;
  });
}

/// [m,k] x [n,k]^T -> [m,n]
template <typename S>
Var<S> matmul_nt(Var<S> a, Var<S> b) {
  Tape<S>& t = *a.tape;
  const auto& av = t.value(a);
  const auto& bv = t.value(b);
  if (av.rank() != 2 || bv.rank() != 2 || av.dim(1) != bv.dim(1))
    throw ShapeMismatch("matmul_nt: " + shape_str(av.shape()) + " x " + shape_str(bv.shape()));
  const Index m = av.dim(0), k = av.dim(1), n = bv.dim(0);
  Tensor<S> out({m, n});
  out.as_matrix(m, n).noalias() = av.as_matrix(m, k) * bv.as_matrix(n, k).transpose();
  return t.emit(std::move(out), {a, b}, [a = a.id, b = b.id, m, k, n](Tape<S>& t, int self) {
    auto g = t.grad_buffer(self).as_matrix(m, n);
    t.grad_buffer(a).as_matrix(m, k).noalias() += g * t.node_value(b).as_matrix(n, k);
    t.grad_buffer(b).as_matrix(n, k).noalias() += g.transpose() * t.node_value(a).as_matrix(m, k);
  });
}

/// Adds p to every consecutive block of x (x.size must be a multiple of
/// p.size). Covers bias rows, positional grids and level embeddings.
template <typename S>
Var<S> add_tiled(Var<S> x, Var<S> p) {
  Tape<S>& t = *x.tape;
  const Index xs = t.value(x).size(), ps = t.value(p).size();
  if (ps == 0 || xs % ps != 0)
    throw ShapeMismatch("add_tiled: " + shape_str(t.value(x).shape()) + " vs " +
                        shape_str(t.value(p).shape()));
  const Index blocks = xs / ps;
  Tensor<S> out(t.value(x).shape());
  auto om = out.as_matrix(blocks, ps);
  om = t.value(x).as_matrix(blocks, ps);
  om.rowwise() += Eigen::Map<const Eigen::Matrix<S, 1, Eigen::Dynamic>>(t.value(p).data(), ps);
  return t.emit(std::move(out), {x, p}, [x = x.id, p = p.id, blocks, ps](Tape<S>& t, int self) {
    auto g = t.grad_buffer(self).as_matrix(blocks, ps);
    t.grad_buffer(x).array() += t.grad_buffer(self).array();
    Eigen::Map<Eigen::Matrix<S, 1, Eigen::Dynamic>>(t.grad_buffer(p).data(), ps) +=
        g.colwise().sum();
  });
}

/// x [n,din] * w [din,dout] + b [dout]
template <typename S>
Var<S> linear(Var<S> x, Var<S> w, Var<S> b) {
  return add_tiled(matmul(x, w), b);
}

template <typename S>
Var<S> reshape(Var<S> x, Shape shape) {
  Tape<S>& t = *x.tape;
  Tensor<S> out = t.value(x).reshaped(std::move(shape));
  return t.emit(std::move(out), {x}, [x = x.id](Tape<S>& t, int self) {
    t.grad_buffer(x).array() += t.grad_buffer(self).array();
  });
}

// ---------------------------------------------------------------------------
// Row-structured operations (tokens, attention)
// ---------------------------------------------------------------------------

template <typename S>
Var<S> softmax_rows(Var<S> x) {
  Tape<S>& t = *x.tape;
  const auto& xv = t.value(x);
  if (xv.rank() != 2) throw ShapeMismatch("softmax_rows expects a matrix");
  const Index n = xv.dim(0), d = xv.dim(1);
  Tensor<S> out(xv.shape());
  auto om = out.as_matrix(n, d);
  auto xm = xv.as_matrix(n, d);
  for (Index r = 0; r < n; ++r) {
    const S mx = xm.row(r).maxCoeff();
    om.row(r) = (xm.row(r).array() - mx).exp();
    om.row(r) /= om.row(r).sum();
  }
  return t.emit(std::move(out), {x}, [x = x.id, n, d](Tape<S>& t, int self) {
    auto y = t.node_value(self).as_matrix(n, d);
    auto g = t.grad_buffer(self).as_matrix(n, d);
    auto gx = t.grad_buffer(x).as_matrix(n, d);
    for (Index r = 0; r < n; ++r) {
      const S dot = y.row(r).dot(g.row(r));
      gx.row(r).array() += y.row(r).array() * (g.row(r).array() - dot);
    }
  });
}

template <typename S>
Var<S> layer_norm(Var<S> x, Var<S> gamma, Var<S> beta, S eps = S(1e-5)) {
  Tape<S>& t = *x.tape;
  const auto& xv = t.value(x);
  if (xv.rank() != 2) throw ShapeMismatch("layer_norm expects a matrix");
  const Index n = xv.dim(0), d = xv.dim(1);
  if (t.value(gamma).size() != d || t.value(beta).size() != d)
    throw ShapeMismatch("layer_norm: parameter size mismatch");
  Tensor<S> out(xv.shape());
  ArrayX<S> inv_std(n);
  Tensor<S> xhat(xv.shape());
  auto xm = xv.as_matrix(n, d);
  auto hm = xhat.as_matrix(n, d);
  auto om = out.as_matrix(n, d);
  const auto* gv = t.value(gamma).data();
  const auto* bv = t.value(beta).data();
  Eigen::Map<const Eigen::Matrix<S, 1, Eigen::Dynamic>> gvec(gv, d), bvec(bv, d);
  for (Index r = 0; r < n; ++r) {
    const S mu = xm.row(r).mean();
    const S var = (xm.row(r).array() - mu).square().mean();
    inv_std[r] = S(1) / std::sqrt(var + eps);
    hm.row(r) = (xm.row(r).array() - mu) * inv_std[r];
    om.row(r) = hm.row(r).cwiseProduct(gvec) + bvec;
  }
  return t.emit(std::move(out), {x, gamma, beta},
                [x = x.id, gamma = gamma.id, beta = beta.id, n, d, inv_std = std::move(inv_std),
                 xhat = std::move(xhat)](Tape<S>& t, int self) {
                  auto g = t.grad_buffer(self).as_matrix(n, d);
                  auto hm = xhat.as_matrix(n, d);
                  auto gx = t.grad_buffer(x).as_matrix(n, d);
                  Eigen::Map<Eigen::Matrix<S, 1, Eigen::Dynamic>> ggamma(
                      t.grad_buffer(gamma).data(), d);
                  Eigen::Map<Eigen::Matrix<S, 1, Eigen::Dynamic>> gbeta(t.grad_buffer(beta).data(),
                                                                        d);
                  Eigen::Map<const Eigen::Matrix<S, 1, Eigen::Dynamic>> gvec(
                      t.node_value(gamma).data(), d);
                  for (Index r = 0; r < n; ++r) {
                    const auto gr = g.row(r).array();
                    const auto hr = hm.row(r).array();
                    ggamma.array() += gr * hr;
                    gbeta.array() += gr;
                    const auto dh = gr * gvec.array();
                    const S m1 = dh.mean();
                    const S m2 = (dh * hr).mean();
                    gx.row(r).array() += inv_std[r] * (dh - m1 - hr * m2);
                  }
                });
}

/// Gated linear unit over the last dimension: splits [n,2d] into value and
/// gate halves and returns value * sigmoid(gate).
template <typename S>
Var<S> glu_rows(Var<S> x) {
  Tape<S>& t = *x.tape;
  const auto& xv = t.value(x);
  if (xv.rank() != 2 || xv.dim(1) % 2 != 0) throw ShapeMismatch("glu_rows expects [n, 2d]");
  const Index n = xv.dim(0), d = xv.dim(1) / 2;
  Tensor<S> out({n, d});
  auto xm = xv.as_matrix(n, 2 * d);
  auto om = out.as_matrix(n, d);
  om = xm.leftCols(d).cwiseProduct(
      (S(1) / (S(1) + (-xm.rightCols(d).array()).exp())).matrix());
  return t.emit(std::move(out), {x}, [x = x.id, n, d](Tape<S>& t, int self) {
    auto xm = t.node_value(x).as_matrix(n, 2 * d);
    auto g = t.grad_buffer(self).as_matrix(n, d);
    auto gx = t.grad_buffer(x).as_matrix(n, 2 * d);
    const auto sig = (S(1) / (S(1) + (-xm.rightCols(d).array()).exp())).eval();
    gx.leftCols(d).array() += g.array() * sig;
    gx.rightCols(d).array() += g.array() * xm.leftCols(d).array() * sig * (S(1) - sig);
  });
}

template <typename S>
Var<S> slice_cols(Var<S> x, Index c0, Index cnt) {
  Tape<S>& t = *x.tape;
  const auto& xv = t.value(x);
  if (xv.rank() != 2 || c0 < 0 || c0 + cnt > xv.dim(1))
    throw ShapeMismatch("slice_cols out of range");
  const Index n = xv.dim(0), d = xv.dim(1);
  Tensor<S> out({n, cnt});
  out.as_matrix(n, cnt) = xv.as_matrix(n, d).middleCols(c0, cnt);
  return t.emit(std::move(out), {x}, [x = x.id, c0, cnt, n, d](Tape<S>& t, int self) {
    t.grad_buffer(x).as_matrix(n, d).middleCols(c0, cnt) += t.grad_buffer(self).as_matrix(n, cnt);
  });
}

template <typename S>
Var<S> concat_cols(const std::vector<Var<S>>& xs) {
  Tape<S>& t = *xs.front().tape;
  const Index n = t.value(xs.front()).dim(0);
  Index total = 0;
  for (const auto& v : xs) {
    if (t.value(v).rank() != 2 || t.value(v).dim(0) != n)
      throw ShapeMismatch("concat_cols: row mismatch");
    total += t.value(v).dim(1);
  }
  Tensor<S> out({n, total});
  auto om = out.as_matrix(n, total);
  Index off = 0;
  std::vector<std::pair<int, Index>> segs;
  for (const auto& v : xs) {
    const Index d = t.value(v).dim(1);
    om.middleCols(off, d) = t.value(v).as_matrix(n, d);
    segs.emplace_back(v.id, d);
    off += d;
  }
  return t.emit(std::move(out), xs, [segs = std::move(segs), n, total](Tape<S>& t, int self) {
    auto g = t.grad_buffer(self).as_matrix(n, total);
    Index off = 0;
    for (const auto& [id, d] : segs) {
      t.grad_buffer(id).as_matrix(n, d) += g.middleCols(off, d);
      off += d;
    }
  });
}

/// Concatenates along axis 1 of [B, N_i, rest...] tensors.
template <typename S>
Var<S> concat_axis1(const std::vector<Var<S>>& xs) {
  Tape<S>& t = *xs.front().tape;
  const auto& first = t.value(xs.front());
  if (first.rank() < 2) throw ShapeMismatch("concat_axis1 expects rank >= 2");
  const Index b = first.dim(0);
  Index row = 1;
  for (std::size_t i = 2; i < first.shape().size(); ++i) row *= first.dim(i);
  Index total_n = 0;
  for (const auto& v : xs) {
    const auto& s = t.value(v).shape();
    Index r = 1;
    for (std::size_t i = 2; i < s.size(); ++i) r *= s[i];
    if (s[0] != b || r != row) throw ShapeMismatch("concat_axis1: incompatible shapes");
    total_n += s[1];
  }
  Shape out_shape = first.shape();
  out_shape[1] = total_n;
  Tensor<S> out(out_shape);
  std::vector<std::pair<int, Index>> segs;
  for (const auto& v : xs) segs.emplace_back(v.id, t.value(v).dim(1));
  for (Index bb = 0; bb < b; ++bb) {
    Index off = 0;
    for (const auto& v : xs) {
      const Index n = t.value(v).dim(1);
      std::copy_n(t.value(v).data() + bb * n * row, n * row,
                  out.data() + (bb * total_n + off) * row);
      off += n;
    }
  }
  return t.emit(std::move(out), xs,
                [segs = std::move(segs), b, row, total_n](Tape<S>& t, int self) {
                  const auto& g = t.grad_buffer(self);
                  for (Index bb = 0; bb < b; ++bb) {
                    Index off = 0;
                    for (const auto& [id, n] : segs) {
                      auto& gx = t.grad_buffer(id);
                      Eigen::Map<ArrayX<S>>(gx.data() + bb * n * row, n * row) +=
                          Eigen::Map<const ArrayX<S>>(g.data() + (bb * total_n + off) * row,
                                                      n * row);
                      off += n;
                    }
                  }
                });
}

/// Gathers rows along axis 1: x [B, N, rest...] -> [B, idx.size, rest...].
template <typename S>
Var<S> gather_axis1(Var<S> x, std::vector<Index> idx) {
  Tape<S>& t = *x.tape;
  const auto& xv = t.value(x);
  if (xv.rank() < 2) throw ShapeMismatch("gather_axis1 expects rank >= 2");
  const Index b = xv.dim(0), n = xv.dim(1);
  Index row = 1;
  for (std::size_t i = 2; i < xv.shape().size(); ++i) row *= xv.dim(i);
  for (Index j : idx)
    if (j < 0 || j >= n) throw ShapeMismatch("gather_axis1 index out of range");
  Shape out_shape = xv.shape();
  out_shape[1] = static_cast<Index>(idx.size());
  Tensor<S> out(out_shape);
  const Index m = static_cast<Index>(idx.size());
  for (Index bb = 0; bb < b; ++bb)
    for (Index j = 0; j < m; ++j)
      std::copy_n(xv.data() + (bb * n + idx[j]) * row, row, out.data() + (bb * m + j) * row);
  return t.emit(std::move(out), {x},
                [x = x.id, idx = std::move(idx), b, n, row](Tape<S>& t, int self) {
                  const auto& g = t.grad_buffer(self);
                  auto& gx = t.grad_buffer(x);
                  const Index m = static_cast<Index>(idx.size());
                  for (Index bb = 0; bb < b; ++bb)
                    for (Index j = 0; j < m; ++j)
                      Eigen::Map<ArrayX<S>>(gx.data() + (bb * n + idx[j]) * row, row) +=
                          Eigen::Map<const ArrayX<S>>(g.data() + (bb * m + j) * row, row);
                });
}

/// Drops the batch axis: x [B, rest...] -> [rest...] for one batch element.
template <typename S>
Var<S> select_batch(Var<S> x, Index bb) {
  Tape<S>& t = *x.tape;
  const auto& xv = t.value(x);
  if (xv.rank() < 2 || bb < 0 || bb >= xv.dim(0))
    throw ShapeMismatch("select_batch out of range");
  const Index row = xv.size() / xv.dim(0);
  Shape out_shape(xv.shape().begin() + 1, xv.shape().end());
  Tensor<S> out(out_shape);
  std::copy_n(xv.data() + bb * row, row, out.data());
  return t.emit(std::move(out), {x}, [x = x.id, bb, row](Tape<S>& t, int self) {
    Eigen::Map<ArrayX<S>>(t.grad_buffer(x).data() + bb * row, row) +=
        t.grad_buffer(self).array();
  });
}

/// Stacks equally shaped tensors into a new leading axis.
template <typename S>
Var<S> stack_batch(const std::vector<Var<S>>& xs) {
  Tape<S>& t = *xs.front().tape;
  const auto& first = t.value(xs.front());
  const Index row = first.size();
  Shape out_shape;
  out_shape.push_back(static_cast<Index>(xs.size()));
  for (Index d : first.shape()) out_shape.push_back(d);
  Tensor<S> out(out_shape);
  std::vector<int> ids;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    detail::check_same_shape(t.value(xs[i]), first, "stack_batch");
    std::copy_n(t.value(xs[i]).data(), row, out.data() + static_cast<Index>(i) * row);
    ids.push_back(xs[i].id);
  }
  return t.emit(std::move(out), xs, [ids = std::move(ids), row](Tape<S>& t, int self) {
    const auto& g = t.grad_buffer(self);
    for (std::size_t i = 0; i < ids.size(); ++i)
      t.grad_buffer(ids[i]).array() +=
          Eigen::Map<const ArrayX<S>>(g.data() + static_cast<Index>(i) * row, row);
  });
}

// ---------------------------------------------------------------------------
// Video tensors: convolutions, permutes, pooled statistics
// ---------------------------------------------------------------------------

/// Dense 3-D convolution of x [B,Cin,T,H,W] with w [Cout,Cin,kt,kh,kw] and
/// bias [Cout]. Implemented as an im2col GEMM per (batch, output frame); the
/// backward pass rebuilds the same column matrix to form weight and input
/// gradients.
template <typename S>
Var<S> conv3d(Var<S> x, Var<S> w, Var<S> b, std::array<Index, 3> stride,
              std::array<Index, 3> pad) {
  Tape<S>& t = *x.tape;
  const auto& xv = t.value(x);
  const auto& wv = t.value(w);
  if (xv.rank() != 5 || wv.rank() != 5 || xv.dim(1) != wv.dim(1))
    throw ShapeMismatch("conv3d: input " + shape_str(xv.shape()) + " weight " +
                        shape_str(wv.shape()));
  const Index bsz = xv.dim(0), cin = xv.dim(1), ti = xv.dim(2), hi = xv.dim(3), wi = xv.dim(4);
  const Index cout = wv.dim(0), kt = wv.dim(2), kh = wv.dim(3), kw = wv.dim(4);
  if (t.value(b).size() != cout) throw ShapeMismatch("conv3d: bias size mismatch");
  const auto [st, sh, sw] = stride;
  const auto [pt, ph, pw] = pad;
  const Index to = (ti + 2 * pt - kt) / st + 1;
  const Index ho = (hi + 2 * ph - kh) / sh + 1;
  const Index wo = (wi + 2 * pw - kw) / sw + 1;
  if (to < 1 || ho < 1 || wo < 1) throw ShapeMismatch("conv3d: output would be empty");
  const Index k = cin * kt * kh * kw;
  const Index plane = ho * wo;

  auto fill_col = [=](const S* xb, Index tout, MatrixRM<S>& col) {
    Index r = 0;
    for (Index ci = 0; ci < cin; ++ci) {
      for (Index dt = 0; dt < kt; ++dt) {
        const Index tin = tout * st + dt - pt;
        const bool t_ok = tin >= 0 && tin < ti;
        const S* xplane = xb + (ci * ti + tin) * hi * wi;
        for (Index dh = 0; dh < kh; ++dh) {
          for (Index dw = 0; dw < kw; ++dw, ++r) {
            S* dst = col.data() + r * plane;
            if (!t_ok) {
              std::fill_n(dst, plane, S(0));
              continue;
            }
            for (Index oh = 0; oh < ho; ++oh) {
              const Index ih = oh * sh + dh - ph;
              if (ih < 0 || ih >= hi) {
                std::fill_n(dst + oh * wo, wo, S(0));
                continue;
              }
              const S* src_row = xplane + ih * wi;
              for (Index ow = 0; ow < wo; ++ow) {
                const Index iw = ow * sw + dw - pw;
                dst[oh * wo + ow] = (iw >= 0 && iw < wi) ? src_row[iw] : S(0);
              }
            }
          }
        }
      }
    }
  };

  Tensor<S> out({bsz, cout, to, ho, wo});
  {
    MatrixRM<S> col(k, plane);
    Eigen::Map<const MatrixRM<S>> wm(wv.data(), cout, k);
    const auto* bias = t.value(b).data();
    for (Index bb = 0; bb < bsz; ++bb) {
      const S* xb = xv.data() + bb * cin * ti * hi * wi;
      for (Index tout = 0; tout < to; ++tout) {
        fill_col(xb, tout, col);
        S* ob = out.data() + (bb * cout) * to * plane + tout * plane;
        Eigen::Map<MatrixRM<S>, 0, Eigen::OuterStride<>> om(ob, cout, plane,
                                                            Eigen::OuterStride<>(to * plane));
        om.noalias() = wm * col;
        for (Index co = 0; co < cout; ++co) om.row(co).array() += bias[co];
      }
    }
  }

  return t.emit(
      std::move(out), {x, w, b},
      [=, x = x.id, w = w.id, b = b.id](Tape<S>& t, int self) {
        const auto& g = t.grad_buffer(self);
        const auto& xval = t.node_value(x);
        MatrixRM<S> col(k, plane);
        MatrixRM<S> dcol(k, plane);
        auto& gw = t.grad_buffer(w);
        auto& gx = t.grad_buffer(x);
        auto& gb = t.grad_buffer(b);
        Eigen::Map<MatrixRM<S>> gwm(gw.data(), cout, k);
        Eigen::Map<const MatrixRM<S>> wm(t.node_value(w).data(), cout, k);
        for (Index bb = 0; bb < bsz; ++bb) {
          const S* xb = xval.data() + bb * cin * ti * hi * wi;
          S* gxb = gx.data() + bb * cin * ti * hi * wi;
          for (Index tout = 0; tout < to; ++tout) {
            const S* gb_slice = g.data() + (bb * cout) * to * plane + tout * plane;
            Eigen::Map<const MatrixRM<S>, 0, Eigen::OuterStride<>> gm(
                gb_slice, cout, plane, Eigen::OuterStride<>(to * plane));
            fill_col(xb, tout, col);
            gwm.noalias() += gm * col.transpose();
            for (Index co = 0; co < cout; ++co) gb.data()[co] += gm.row(co).sum();
            dcol.noalias() = wm.transpose() * gm;
            // col2im scatter
            Index r = 0;
            for (Index ci = 0; ci < cin; ++ci) {
              for (Index dt = 0; dt < kt; ++dt) {
                const Index tin = tout * st + dt - pt;
                const bool t_ok = tin >= 0 && tin < ti;
                S* gplane = gxb + (ci * ti + tin) * hi * wi;
                for (Index dh = 0; dh < kh; ++dh) {
                  for (Index dw = 0; dw < kw; ++dw, ++r) {
                    if (!t_ok) continue;
                    const S* src = dcol.data() + r * plane;
                    for (Index oh = 0; oh < ho; ++oh) {
                      const Index ih = oh * sh + dh - ph;
                      if (ih < 0 || ih >= hi) continue;
                      S* dst_row = gplane + ih * wi;
                      for (Index ow = 0; ow < wo; ++ow) {
                        const Index iw = ow * sw + dw - pw;
                        if (iw >= 0 && iw < wi) dst_row[iw] += src[oh * wo + ow];
                      }
                    }
                  }
                }
              }
            }
          }
        }
      });
}

/// Depthwise 3-D convolution (stride 1) of x [B,C,T,H,W] with w [C,kt,kh,kw].
template <typename S>
Var<S> depthwise_conv3d(Var<S> x, Var<S> w, Var<S> b, std::array<Index, 3> pad) {
  Tape<S>& t = *x.tape;
  const auto& xv = t.value(x);
  const auto& wv = t.value(w);
  if (xv.rank() != 5 || wv.rank() != 4 || xv.dim(1) != wv.dim(0))
    throw ShapeMismatch("depthwise_conv3d: input " + shape_str(xv.shape()) + " weight " +
                        shape_str(wv.shape()));
  const Index bsz = xv.dim(0), c = xv.dim(1), ti = xv.dim(2), hi = xv.dim(3), wi = xv.dim(4);
  const Index kt = wv.dim(1), kh = wv.dim(2), kw = wv.dim(3);
  const auto [pt, ph, pw] = pad;
  const Index to = ti + 2 * pt - kt + 1;
  const Index ho = hi + 2 * ph - kh + 1;
  const Index wo = wi + 2 * pw - kw + 1;
  if (to < 1 || ho < 1 || wo < 1) throw ShapeMismatch("depthwise_conv3d: output would be empty");
  if (t.value(b).size() != c) throw ShapeMismatch("depthwise_conv3d: bias size mismatch");

  Tensor<S> out({bsz, c, to, ho, wo});
  const auto* bias = t.value(b).data();
  for (Index bb = 0; bb < bsz; ++bb) {
    for (Index cc = 0; cc < c; ++cc) {
      const S* xc = xv.data() + (bb * c + cc) * ti * hi * wi;
      const S* wc = wv.data() + cc * kt * kh * kw;
      S* oc = out.data() + (bb * c + cc) * to * ho * wo;
      for (Index tt = 0; tt < to; ++tt)
        for (Index hh = 0; hh < ho; ++hh)
          for (Index ww = 0; ww < wo; ++ww) {
            S acc = bias[cc];
            for (Index dt = 0; dt < kt; ++dt) {
              const Index tin = tt + dt - pt;
              if (tin < 0 || tin >= ti) continue;
              for (Index dh = 0; dh < kh; ++dh) {
                const Index ih = hh + dh - ph;
                if (ih < 0 || ih >= hi) continue;
                const S* xrow = xc + (tin * hi + ih) * wi;
                const S* wrow = wc + (dt * kh + dh) * kw;
                for (Index dw = 0; dw < kw; ++dw) {
                  const Index iw = ww + dw - pw;
                  if (iw >= 0 && iw < wi) acc += xrow[iw] * wrow[dw];
                }
              }
            }
            oc[(tt * ho + hh) * wo + ww] = acc;
          }
    }
  }

  return t.emit(std::move(out), {x, w, b},
                [=, x = x.id, w = w.id, b = b.id](Tape<S>& t, int self) {
                  const auto& g = t.grad_buffer(self);
                  const auto& xval = t.node_value(x);
                  const auto& wval = t.node_value(w);
                  auto& gx = t.grad_buffer(x);
                  auto& gw = t.grad_buffer(w);
                  auto& gbias = t.grad_buffer(b);
                  for (Index bb = 0; bb < bsz; ++bb)
                    for (Index cc = 0; cc < c; ++cc) {
                      const S* xc = xval.data() + (bb * c + cc) * ti * hi * wi;
                      const S* wc = wval.data() + cc * kt * kh * kw;
                      const S* gc = g.data() + (bb * c + cc) * to * ho * wo;
                      S* gxc = gx.data() + (bb * c + cc) * ti * hi * wi;
                      S* gwc = gw.data() + cc * kt * kh * kw;
                      for (Index tt = 0; tt < to; ++tt)
                        for (Index hh = 0; hh < ho; ++hh)
                          for (Index ww = 0; ww < wo; ++ww) {
                            const S gout = gc[(tt * ho + hh) * wo + ww];
                            if (gout == S(0)) continue;
                            gbias.data()[cc] += gout;
                            for (Index dt = 0; dt < kt; ++dt) {
                              const Index tin = tt + dt - pt;
                              if (tin < 0 || tin >= ti) continue;
                              for (Index dh = 0; dh < kh; ++dh) {
                                const Index ih = hh + dh - ph;
                                if (ih < 0 || ih >= hi) continue;
                                const S* xrow = xc + (tin * hi + ih) * wi;
                                S* gxrow = gxc + (tin * hi + ih) * wi;
                                const S* wrow = wc + (dt * kh + dh) * kw;
                                S* gwrow = gwc + (dt * kh + dh) * kw;
                                for (Index dw = 0; dw < kw; ++dw) {
                                  const Index iw = ww + dw - pw;
                                  if (iw >= 0 && iw < wi) {
                                    gxrow[iw] += gout * wrow[dw];
                                    gwrow[dw] += gout * xrow[iw];
                                  }
                                }
                              }
                            }
                          }
                    }
                });
}

/// Permutes x [B,C,T,H,W] into a token matrix [B, T*H*W, C].
template <typename S>
Var<S> channels_to_tokens(Var<S> x) {
  Tape<S>& t = *x.tape;
  const auto& xv = t.value(x);
  if (xv.rank() != 5) throw ShapeMismatch("channels_to_tokens expects [B,C,T,H,W]");
  const Index b = xv.dim(0), c = xv.dim(1);
  const Index n = xv.dim(2) * xv.dim(3) * xv.dim(4);
  Tensor<S> out({b, n, c});
  for (Index bb = 0; bb < b; ++bb) {
    const S* src = xv.data() + bb * c * n;
    S* dst = out.data() + bb * n * c;
    for (Index cc = 0; cc < c; ++cc)
      for (Index j = 0; j < n; ++j) dst[j * c + cc] = src[cc * n + j];
  }
  return t.emit(std::move(out), {x}, [x = x.id, b, c, n](Tape<S>& t, int self) {
    const auto& g = t.grad_buffer(self);
    auto& gx = t.grad_buffer(x);
    for (Index bb = 0; bb < b; ++bb) {
      const S* src = g.data() + bb * n * c;
      S* dst = gx.data() + bb * c * n;
      for (Index cc = 0; cc < c; ++cc)
        for (Index j = 0; j < n; ++j) dst[cc * n + j] += src[j * c + cc];
    }
  });
}

/// Mean over every axis after the channel axis: [B,C,rest...] -> [B,C].
template <typename S>
Var<S> channel_mean(Var<S> x) {
  Tape<S>& t = *x.tape;
  const auto& xv = t.value(x);
  if (xv.rank() < 3) throw ShapeMismatch("channel_mean expects rank >= 3");
  const Index b = xv.dim(0), c = xv.dim(1), m = xv.size() / (b * c);
  Tensor<S> out({b, c});
  for (Index i = 0; i < b * c; ++i)
    out[i] = Eigen::Map<const ArrayX<S>>(xv.data() + i * m, m).mean();
  return t.emit(std::move(out), {x}, [x = x.id, b, c, m](Tape<S>& t, int self) {
    const auto& g = t.grad_buffer(self);
    auto& gx = t.grad_buffer(x);
    for (Index i = 0; i < b * c; ++i)
      Eigen::Map<ArrayX<S>>(gx.data() + i * m, m) += g[i] / static_cast<S>(m);
  });
}

/// Max over every axis after the channel axis; ties resolve to the first
/// occurrence so the backward route is deterministic.
template <typename S>
Var<S> channel_max(Var<S> x) {
  Tape<S>& t = *x.tape;
  const auto& xv = t.value(x);
  if (xv.rank() < 3) throw ShapeMismatch("channel_max expects rank >= 3");
  const Index b = xv.dim(0), c = xv.dim(1), m = xv.size() / (b * c);
  Tensor<S> out({b, c});
  std::vector<Index> argmax(static_cast<std::size_t>(b * c));
  for (Index i = 0; i < b * c; ++i) {
    const S* p = xv.data() + i * m;
    Index best = 0;
    for (Index j = 1; j < m; ++j)
      if (p[j] > p[best]) best = j;
    argmax[static_cast<std::size_t>(i)] = best;
    out[i] = p[best];
  }
  return t.emit(std::move(out), {x},
                [x = x.id, b, c, m, argmax = std::move(argmax)](Tape<S>& t, int self) {
                  const auto& g = t.grad_buffer(self);
                  auto& gx = t.grad_buffer(x);
                  for (Index i = 0; i < b * c; ++i)
                    gx.data()[i * m + argmax[static_cast<std::size_t>(i)]] += g[i];
                });
}

/// x [B,C,rest...] minus per-channel values m [B,C].
template <typename S>
Var<S> sub_channel(Var<S> x, Var<S> m) {
  Tape<S>& t = *x.tape;
  const auto& xv = t.value(x);
  const auto& mv = t.value(m);
  if (xv.rank() < 3 || mv.rank() != 2 || mv.dim(0) != xv.dim(0) || mv.dim(1) != xv.dim(1))
    throw ShapeMismatch("sub_channel: incompatible shapes");
  const Index bc = xv.dim(0) * xv.dim(1), w = xv.size() / bc;
  Tensor<S> out(xv.shape());
  for (Index i = 0; i < bc; ++i)
    Eigen::Map<ArrayX<S>>(out.data() + i * w, w) =
        Eigen::Map<const ArrayX<S>>(xv.data() + i * w, w) - mv[i];
  return t.emit(std::move(out), {x, m}, [x = x.id, m = m.id, bc, w](Tape<S>& t, int self) {
    const auto& g = t.grad_buffer(self);
    t.grad_buffer(x).array() += g.array();
    auto& gm = t.grad_buffer(m);
    for (Index i = 0; i < bc; ++i)
      gm[i] -= Eigen::Map<const ArrayX<S>>(g.data() + i * w, w).sum();
  });
}

/// x [B,C,rest...] scaled by per-channel gates s [B,C].
template <typename S>
Var<S> scale_channels(Var<S> x, Var<S> s) {
  Tape<S>& t = *x.tape;
  const auto& xv = t.value(x);
  const auto& sv = t.value(s);
  if (xv.rank() < 3 || sv.rank() != 2 || sv.dim(0) != xv.dim(0) || sv.dim(1) != xv.dim(1))
    throw ShapeMismatch("scale_channels: incompatible shapes");
  const Index bc = xv.dim(0) * xv.dim(1), w = xv.size() / bc;
  Tensor<S> out(xv.shape());
  for (Index i = 0; i < bc; ++i)
    Eigen::Map<ArrayX<S>>(out.data() + i * w, w) =
        Eigen::Map<const ArrayX<S>>(xv.data() + i * w, w) * sv[i];
  return t.emit(std::move(out), {x, s}, [x = x.id, s = s.id, bc, w](Tape<S>& t, int self) {
    const auto& g = t.grad_buffer(self);
    const auto& xval = t.node_value(x);
    const auto& sval = t.node_value(s);
    auto& gx = t.grad_buffer(x);
    auto& gs = t.grad_buffer(s);
    for (Index i = 0; i < bc; ++i) {
      Eigen::Map<ArrayX<S>>(gx.data() + i * w, w) +=
          Eigen::Map<const ArrayX<S>>(g.data() + i * w, w) * sval[i];
      gs[i] += (Eigen::Map<const ArrayX<S>>(g.data() + i * w, w) *
                Eigen::Map<const ArrayX<S>>(xval.data() + i * w, w))
                   .sum();
    }
  });
}

template <typename S>
Var<S> mean_all(Var<S> x) {
  Tape<S>& t = *x.tape;
  Tensor<S> out = Tensor<S>::scalar(t.value(x).array().mean());
  const Index n = t.value(x).size();
  return t.emit(std::move(out), {x}, [x = x.id, n](Tape<S>& t, int self) {
    t.grad_buffer(x).array() += t.grad_buffer(self)[0] / static_cast<S>(n);
  });
}

template <typename S>
Var<S> mse(Var<S> pred, Var<S> target) {
  return mean_all(square(sub(pred, target)));
}

/// Bridges an externally computed differentiable scalar into the graph: the
/// node's value is `value`, and backward adds upstream * grads[i] to each
/// dependency. Used for losses whose exact gradients are produced outside
/// the tape.
template <typename S>
Var<S> inject_scalar(const std::vector<Var<S>>& deps, S value, std::vector<Tensor<S>> grads) {
  Tape<S>& t = *deps.front().tape;
  if (deps.size() != grads.size()) throw ShapeMismatch("inject_scalar: deps/grads mismatch");
  std::vector<int> ids;
  for (std::size_t i = 0; i < deps.size(); ++i) {
    detail::check_same_shape(t.value(deps[i]), grads[i], "inject_scalar");
    ids.push_back(deps[i].id);
  }
  return t.emit(Tensor<S>::scalar(value), deps,
                [ids = std::move(ids), grads = std::move(grads)](Tape<S>& t, int self) {
                  const S up = t.grad_buffer(self)[0];
                  for (std::size_t i = 0; i < ids.size(); ++i)
                    t.grad_buffer(ids[i]).array() += up * grads[i].array();
                });
}

}  // namespace e3net
