#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <span>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include "graphyr/errors.hpp"
#include "graphyr/random.hpp"

// Dense reverse-mode automatic differentiation over row-major matrices.
//
// A Tape records every operation in creation order, which is already a
// topological order; backward() walks it once in reverse. Rows index items
// (nodes, arcs, scenarios) and columns index features throughout.

namespace graphyr::ad {

struct Tensor {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> data;

  Tensor() = default;
  Tensor(std::size_t r, std::size_t c, double fill = 0.0) : rows(r), cols(c), data(r * c, fill) {}

  static Tensor column(std::vector<double> values) {
    Tensor t;
    t.rows = values.size();
    t.cols = 1;
    t.data = std::move(values);
    return t;
  }

  double& operator()(std::size_t r, std::size_t c) { return data[r * cols + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data[r * cols + c]; }
  std::size_t size() const { return data.size(); }
  bool same_shape(const Tensor& o) const { return rows == o.rows && cols == o.cols; }
};

/// Trainable array with its gradient accumulator.
struct Parameter {
  std::string name;
  Tensor value;
  Tensor grad;

  Parameter() = default;
  Parameter(std::string n, Tensor v) : name(std::move(n)), value(std::move(v)), grad(value.rows, value.cols) {}
  void zero_grad() { std::fill(grad.data.begin(), grad.data.end(), 0.0); }
};

class Tape;

/// Handle to a node on a tape.
class Var {
public:
  Var() = default;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  const Tensor& value() const;
  const Tensor& grad() const;
  std::size_t rows() const { return value().rows; }
  std::size_t cols() const { return value().cols; }
  Tape* tape() const { return tape_; }
  std::size_t id() const { return id_; }

private:
  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

class Tape {
public:
  using Backward = std::function<void(Tape&, std::size_t self)>;

  Var constant(Tensor value) { return push(std::move(value), nullptr, false); }

  /// Leaf whose gradient is kept on the tape (inputs of gradient checks).
  Var input(Tensor value) { return push(std::move(value), nullptr, true); }

  /// Leaf bound to a parameter; backward() adds into Parameter::grad. Each
  /// parameter maps to a single leaf per tape.
  Var param(Parameter& p) {
    if (auto it = param_nodes_.find(&p); it != param_nodes_.end()) return Var(this, it->second);
    Var v = push(p.value, nullptr, true);
    nodes_[v.id()].param = &p;
    param_nodes_.emplace(&p, v.id());
    return v;
  }

  Var record(Tensor value, Backward backward, bool needs_grad) {
    return push(std::move(value), std::move(backward), needs_grad);
  }

  /// Reverse sweep from a scalar root; each node is visited once.
  void backward(Var root) {
    if (root.tape() != this) throw std::invalid_argument("backward: root belongs to another tape");
    const Tensor& rv = nodes_[root.id()].value;
    if (rv.rows != 1 || rv.cols != 1) throw std::invalid_argument("backward: root must be a scalar");
    for (auto& n : nodes_) {
      if (n.needs_grad) std::fill(n.grad.data.begin(), n.grad.data.end(), 0.0);
    }
    grad_ref(root.id()).data[0] = 1.0;
    for (std::size_t i = root.id() + 1; i-- > 0;) {
      auto& n = nodes_[i];
      if (!n.needs_grad) continue;
      if (n.backward) n.backward(*this, i);
      if (n.param) {
        for (std::size_t k = 0; k < n.grad.size(); ++k) n.param->grad.data[k] += n.grad.data[k];
      }
    }
  }

  const Tensor& value(std::size_t id) const { return nodes_[id].value; }
  const Tensor& grad(std::size_t id) const { return nodes_[id].grad; }
  Tensor& grad_ref(std::size_t id) {
    auto& n = nodes_[id];
    if (n.grad.size() != n.value.size()) n.grad = Tensor(n.value.rows, n.value.cols);
    return n.grad;
  }
  bool needs_grad(std::size_t id) const { return nodes_[id].needs_grad; }
  std::size_t size() const { return nodes_.size(); }

  /// Folds a branch decision of a non-smooth op (ReLU side, clamp region, ranking)
  /// into a signature; equal signatures mean the same smooth piece was evaluated.
  void note_branch(std::uint64_t decision) { branch_signature_ = mix_seed(branch_signature_, decision); }
  std::uint64_t branch_signature() const { return branch_signature_; }

private:
  struct Node {
    Tensor value;
    Tensor grad;
    Backward backward;
    Parameter* param = nullptr;
    bool needs_grad = false;
  };

  Var push(Tensor value, Backward backward, bool needs_grad) {
    Node n;
    n.value = std::move(value);
    n.backward = std::move(backward);
    n.needs_grad = needs_grad;
    if (needs_grad) n.grad = Tensor(n.value.rows, n.value.cols);
    nodes_.push_back(std::move(n));
    return Var(this, nodes_.size() - 1);
  }

  std::vector<Node> nodes_;
  std::unordered_map<const Parameter*, std::size_t> param_nodes_;
  std::uint64_t branch_signature_ = 0;
};

inline const Tensor& Var::value() const { return tape_->value(id_); }
inline const Tensor& Var::grad() const { return tape_->grad(id_); }

namespace detail {

inline void require(bool ok, const char* what) {
  if (!ok) throw std::invalid_argument(what);
}

inline bool any_grad(std::initializer_list<Var> vs) {
  for (const auto& v : vs) {
    if (v.tape()->needs_grad(v.id())) return true;
  }
  return false;
}

/// Elementwise unary op; df(x, y) is the local derivative given input x and output y.
template <typename F, typename DF>
Var unary(Var a, F f, DF df) {
  Tape& t = *a.tape();
  const Tensor& x = a.value();
  Tensor out(x.rows, x.cols);
  for (std::size_t i = 0; i < x.size(); ++i) out.data[i] = f(x.data[i]);
  const std::size_t aid = a.id();
  return t.record(std::move(out),
                  [aid, df](Tape& tp, std::size_t self) {
                    if (!tp.needs_grad(aid)) return;
                    const Tensor& xv = tp.value(aid);
                    const Tensor& yv = tp.value(self);
                    const Tensor& g = tp.grad(self);
                    Tensor& ga = tp.grad_ref(aid);
                    for (std::size_t i = 0; i < g.size(); ++i) ga.data[i] += g.data[i] * df(xv.data[i], yv.data[i]);
                  },
                  any_grad({a}));
}

} // namespace detail

// ---------------------------------------------------------------------------
// Linear algebra and shape ops

/// [n x k] * [k x m]
inline Var matmul(Var a, Var b) {
  const Tensor& A = a.value();
  const Tensor& B = b.value();
  detail::require(A.cols == B.rows, "matmul: inner dimensions differ");
  Tensor out(A.rows, B.cols);
  for (std::size_t i = 0; i < A.rows; ++i) {
    for (std::size_t k = 0; k < A.cols; ++k) {
      const double aik = A(i, k);
      if (aik == 0.0) continue;
      const double* brow = &B.data[k * B.cols];
      double* orow = &out.data[i * B.cols];
      for (std::size_t j = 0; j < B.cols; ++j) orow[j] += aik * brow[j];
    }
  }
  const auto aid = a.id(), bid = b.id();
  return a.tape()->record(
      std::move(out),
      [aid, bid](Tape& t, std::size_t self) {
        const Tensor& G = t.grad(self);
        const Tensor& A = t.value(aid);
        const Tensor& B = t.value(bid);
        if (t.needs_grad(aid)) {
          Tensor& GA = t.grad_ref(aid);
          for (std::size_t i = 0; i < A.rows; ++i) {
            for (std::size_t k = 0; k < A.cols; ++k) {
              double acc = 0.0;
              for (std::size_t j = 0; j < B.cols; ++j) acc += G(i, j) * B(k, j);
              GA(i, k) += acc;
            }
          }
        }
        if (t.needs_grad(bid)) {
          Tensor& GB = t.grad_ref(bid);
          for (std::size_t i = 0; i < A.rows; ++i) {
            for (std::size_t k = 0; k < A.cols; ++k) {
              const double aik = A(i, k);
              if (aik == 0.0) continue;
              for (std::size_t j = 0; j < B.cols; ++j) GB(k, j) += aik * G(i, j);
            }
          }
        }
      },
      detail::any_grad({a, b}));
}

inline Var add(Var a, Var b) {
  const Tensor& A = a.value();
  const Tensor& B = b.value();
  detail::require(A.same_shape(B), "add: shape mismatch");
  Tensor out = A;
  for (std::size_t i = 0; i < out.size(); ++i) out.data[i] += B.data[i];
  const auto aid = a.id(), bid = b.id();
  return a.tape()->record(std::move(out),
                          [aid, bid](Tape& t, std::size_t self) {
                            const Tensor& g = t.grad(self);
                            for (auto id : {aid, bid}) {
                              if (!t.needs_grad(id)) continue;
                              Tensor& gi = t.grad_ref(id);
                              for (std::size_t i = 0; i < g.size(); ++i) gi.data[i] += g.data[i];
                            }
                          },
                          detail::any_grad({a, b}));
}

inline Var sub(Var a, Var b) {
  const Tensor& A = a.value();
  const Tensor& B = b.value();
  detail::require(A.same_shape(B), "sub: shape mismatch");
  Tensor out = A;
  for (std::size_t i = 0; i < out.size(); ++i) out.data[i] -= B.data[i];
  const auto aid = a.id(), bid = b.id();
  return a.tape()->record(std::move(out),
                          [aid, bid](Tape& t, std::size_t self) {
                            const Tensor& g = t.grad(self);
                            if (t.needs_grad(aid)) {
                              Tensor& ga = t.grad_ref(aid);
                              for (std::size_t i = 0; i < g.size(); ++i) ga.data[i] += g.data[i];
                            }
                            if (t.needs_grad(bid)) {
                              Tensor& gb = t.grad_ref(bid);
                              for (std::size_t i = 0; i < g.size(); ++i) gb.data[i] -= g.data[i];
                            }
                          },
                          detail::any_grad({a, b}));
}

/// Elementwise product of equal shapes.
inline Var mul(Var a, Var b) {
  const Tensor& A = a.value();
  const Tensor& B = b.value();
  detail::require(A.same_shape(B), "mul: shape mismatch");
  Tensor out = A;
  for (std::size_t i = 0; i < out.size(); ++i) out.data[i] *= B.data[i];
  const auto aid = a.id(), bid = b.id();
  return a.tape()->record(std::move(out),
                          [aid, bid](Tape& t, std::size_t self) {
                            const Tensor& g = t.grad(self);
                            if (t.needs_grad(aid)) {
                              Tensor& ga = t.grad_ref(aid);
                              const Tensor& bv = t.value(bid);
                              for (std::size_t i = 0; i < g.size(); ++i) ga.data[i] += g.data[i] * bv.data[i];
                            }
                            if (t.needs_grad(bid)) {
                              Tensor& gb = t.grad_ref(bid);
                              const Tensor& av = t.value(aid);
                              for (std::size_t i = 0; i < g.size(); ++i) gb.data[i] += g.data[i] * av.data[i];
                            }
                          },
                          detail::any_grad({a, b}));
}

inline Var operator+(Var a, Var b) { return add(a, b); }
inline Var operator-(Var a, Var b) { return sub(a, b); }
inline Var operator*(Var a, Var b) { return mul(a, b); }

/// a[n x c] + row[1 x c] broadcast over rows (bias).
inline Var add_row(Var a, Var row) {
  const Tensor& A = a.value();
  const Tensor& R = row.value();
  detail::require(R.rows == 1 && R.cols == A.cols, "add_row: bias shape mismatch");
  Tensor out = A;
  for (std::size_t i = 0; i < A.rows; ++i)
    for (std::size_t j = 0; j < A.cols; ++j) out(i, j) += R(0, j);
  const auto aid = a.id(), rid = row.id();
  return a.tape()->record(std::move(out),
                          [aid, rid](Tape& t, std::size_t self) {
                            const Tensor& g = t.grad(self);
                            if (t.needs_grad(aid)) {
                              Tensor& ga = t.grad_ref(aid);
                              for (std::size_t i = 0; i < g.size(); ++i) ga.data[i] += g.data[i];
                            }
                            if (t.needs_grad(rid)) {
                              Tensor& gr = t.grad_ref(rid);
                              for (std::size_t i = 0; i < g.rows; ++i)
                                for (std::size_t j = 0; j < g.cols; ++j) gr(0, j) += g(i, j);
                            }
                          },
                          detail::any_grad({a, row}));
}

/// a[n x c] scaled per row by col[n x 1].
inline Var mul_col(Var a, Var col) {
  const Tensor& A = a.value();
  const Tensor& C = col.value();
  detail::require(C.cols == 1 && C.rows == A.rows, "mul_col: column shape mismatch");
  Tensor out = A;
  for (std::size_t i = 0; i < A.rows; ++i)
    for (std::size_t j = 0; j < A.cols; ++j) out(i, j) *= C(i, 0);
  const auto aid = a.id(), cid = col.id();
  return a.tape()->record(std::move(out),
                          [aid, cid](Tape& t, std::size_t self) {
                            const Tensor& g = t.grad(self);
                            const Tensor& av = t.value(aid);
                            const Tensor& cv = t.value(cid);
                            if (t.needs_grad(aid)) {
                              Tensor& ga = t.grad_ref(aid);
                              for (std::size_t i = 0; i < g.rows; ++i)
                                for (std::size_t j = 0; j < g.cols; ++j) ga(i, j) += g(i, j) * cv(i, 0);
                            }
                            if (t.needs_grad(cid)) {
                              Tensor& gc = t.grad_ref(cid);
                              for (std::size_t i = 0; i < g.rows; ++i)
                                for (std::size_t j = 0; j < g.cols; ++j) gc(i, 0) += g(i, j) * av(i, j);
                            }
                          },
                          detail::any_grad({a, col}));
}

/// out = a * scale + shift, with constant tensors of a's shape.
inline Var affine(Var a, const Tensor& scale, const Tensor& shift) {
  const Tensor& A = a.value();
  detail::require(scale.same_shape(A) && shift.same_shape(A), "affine: constant shape mismatch");
  Tensor out(A.rows, A.cols);
  for (std::size_t i = 0; i < A.size(); ++i) out.data[i] = A.data[i] * scale.data[i] + shift.data[i];
  const auto aid = a.id();
  return a.tape()->record(std::move(out),
                          [aid, scale](Tape& t, std::size_t self) {
                            if (!t.needs_grad(aid)) return;
                            const Tensor& g = t.grad(self);
                            Tensor& ga = t.grad_ref(aid);
                            for (std::size_t i = 0; i < g.size(); ++i) ga.data[i] += g.data[i] * scale.data[i];
                          },
                          detail::any_grad({a}));
}

inline Var scale(Var a, double s, double shift = 0.0) {
  return affine(a, Tensor(a.rows(), a.cols(), s), Tensor(a.rows(), a.cols(), shift));
}

/// Picks rows by index (rows may repeat).
inline Var gather_rows(Var a, std::vector<std::size_t> index) {
  const Tensor& A = a.value();
  Tensor out(index.size(), A.cols);
  for (std::size_t i = 0; i < index.size(); ++i) {
    detail::require(index[i] < A.rows, "gather_rows: index out of range");
    std::copy_n(&A.data[index[i] * A.cols], A.cols, &out.data[i * A.cols]);
  }
  const auto aid = a.id();
  return a.tape()->record(std::move(out),
                          [aid, index = std::move(index)](Tape& t, std::size_t self) {
                            if (!t.needs_grad(aid)) return;
                            const Tensor& g = t.grad(self);
                            Tensor& ga = t.grad_ref(aid);
                            for (std::size_t i = 0; i < index.size(); ++i)
                              for (std::size_t j = 0; j < g.cols; ++j) ga(index[i], j) += g(i, j);
                          },
                          detail::any_grad({a}));
}

/// out[index[i]] += a[i]; out has `rows` rows.
inline Var scatter_add_rows(Var a, std::vector<std::size_t> index, std::size_t rows) {
  const Tensor& A = a.value();
  detail::require(index.size() == A.rows, "scatter_add_rows: index length mismatch");
  Tensor out(rows, A.cols);
  for (std::size_t i = 0; i < index.size(); ++i) {
    detail::require(index[i] < rows, "scatter_add_rows: index out of range");
    for (std::size_t j = 0; j < A.cols; ++j) out(index[i], j) += A(i, j);
  }
  const auto aid = a.id();
  return a.tape()->record(std::move(out),
                          [aid, index = std::move(index)](Tape& t, std::size_t self) {
                            if (!t.needs_grad(aid)) return;
                            const Tensor& g = t.grad(self);
                            Tensor& ga = t.grad_ref(aid);
                            for (std::size_t i = 0; i < index.size(); ++i)
                              for (std::size_t j = 0; j < g.cols; ++j) ga(i, j) += g(index[i], j);
                          },
                          detail::any_grad({a}));
}

inline Var concat_cols(const std::vector<Var>& parts) {
  detail::require(!parts.empty(), "concat_cols: no inputs");
  const std::size_t rows = parts.front().rows();
  std::size_t cols = 0;
  for (const auto& p : parts) {
    detail::require(p.rows() == rows, "concat_cols: row counts differ");
    cols += p.cols();
  }
  Tensor out(rows, cols);
  std::size_t offset = 0;
  std::vector<std::size_t> ids;
  bool needs = false;
  for (const auto& p : parts) {
    const Tensor& P = p.value();
    for (std::size_t i = 0; i < rows; ++i)
      for (std::size_t j = 0; j < P.cols; ++j) out(i, offset + j) = P(i, j);
    offset += P.cols;
    ids.push_back(p.id());
    needs = needs || p.tape()->needs_grad(p.id());
  }
  return parts.front().tape()->record(std::move(out),
                                      [ids](Tape& t, std::size_t self) {
                                        const Tensor& g = t.grad(self);
                                        std::size_t off = 0;
                                        for (auto id : ids) {
                                          const std::size_t c = t.value(id).cols;
                                          if (t.needs_grad(id)) {
                                            Tensor& gi = t.grad_ref(id);
                                            for (std::size_t i = 0; i < g.rows; ++i)
                                              for (std::size_t j = 0; j < c; ++j) gi(i, j) += g(i, off + j);
                                          }
                                          off += c;
                                        }
                                      },
                                      needs);
}

inline Var slice_cols(Var a, std::size_t begin, std::size_t count) {
  const Tensor& A = a.value();
  detail::require(begin + count <= A.cols, "slice_cols: range out of bounds");
  Tensor out(A.rows, count);
  for (std::size_t i = 0; i < A.rows; ++i)
    for (std::size_t j = 0; j < count; ++j) out(i, j) = A(i, begin + j);
  const auto aid = a.id();
  return a.tape()->record(std::move(out),
                          [aid, begin, count](Tape& t, std::size_t self) {
                            if (!t.needs_grad(aid)) return;
                            const Tensor& g = t.grad(self);
                            Tensor& ga = t.grad_ref(aid);
                            for (std::size_t i = 0; i < g.rows; ++i)
                              for (std::size_t j = 0; j < count; ++j) ga(i, begin + j) += g(i, j);
                          },
                          detail::any_grad({a}));
}

/// Row sums: [n x c] -> [n x 1].
inline Var sum_cols(Var a) {
  const Tensor& A = a.value();
  Tensor out(A.rows, 1);
  for (std::size_t i = 0; i < A.rows; ++i)
    for (std::size_t j = 0; j < A.cols; ++j) out(i, 0) += A(i, j);
  const auto aid = a.id();
  return a.tape()->record(std::move(out),
                          [aid](Tape& t, std::size_t self) {
                            if (!t.needs_grad(aid)) return;
                            const Tensor& g = t.grad(self);
                            Tensor& ga = t.grad_ref(aid);
                            for (std::size_t i = 0; i < ga.rows; ++i)
                              for (std::size_t j = 0; j < ga.cols; ++j) ga(i, j) += g(i, 0);
                          },
                          detail::any_grad({a}));
}

/// Row means: [n x c] -> [n x 1].
inline Var mean_cols(Var a) { return scale(sum_cols(a), 1.0 / static_cast<double>(a.cols())); }

/// Sum of all entries -> [1 x 1].
inline Var sum(Var a) {
  const Tensor& A = a.value();
  double total = 0.0;
  for (double x : A.data) total += x;
  const auto aid = a.id();
  return a.tape()->record(Tensor(1, 1, total),
                          [aid](Tape& t, std::size_t self) {
                            if (!t.needs_grad(aid)) return;
                            const double g = t.grad(self).data[0];
                            Tensor& ga = t.grad_ref(aid);
                            for (auto& x : ga.data) x += g;
                          },
                          detail::any_grad({a}));
}

inline Var mean(Var a) { return scale(sum(a), 1.0 / static_cast<double>(a.value().size())); }

// ---------------------------------------------------------------------------
// Elementwise nonlinearities

inline Var relu(Var a) {
  Tape& t = *a.tape();
  for (double x : a.value().data) t.note_branch(x > 0.0);
  return detail::unary(a, [](double x) { return x > 0.0 ? x : 0.0; },
                       [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

inline double sigmoid_value(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

inline Var sigmoid(Var a) {
  return detail::unary(a, sigmoid_value, [](double, double y) { return y * (1.0 - y); });
}

inline Var square(Var a) {
  return detail::unary(a, [](double x) { return x * x; }, [](double x, double) { return 2.0 * x; });
}

/// sqrt with zero subgradient at 0.
inline Var sqrt(Var a) {
  Tape& t = *a.tape();
  for (double x : a.value().data) t.note_branch(x > 0.0);
  return detail::unary(a, [](double x) { return x > 0.0 ? std::sqrt(x) : 0.0; },
                       [](double, double y) { return y > 0.0 ? 0.5 / y : 0.0; });
}

inline Var clamp(Var a, double lo, double hi) {
  Tape& t = *a.tape();
  for (double x : a.value().data) t.note_branch(x < lo ? 0 : (x > hi ? 2 : 1));
  return detail::unary(a, [lo, hi](double x) { return x < lo ? lo : (x > hi ? hi : x); },
                       [lo, hi](double x, double) { return (x < lo || x > hi) ? 0.0 : 1.0; });
}

/// [2(1+mu)/(mu + exp(-tau z)) - 1]_+ : the integer-sigmoid step relaxation.
inline double insi_value(double z, double tau, double mu) {
  return std::max(0.0, 2.0 * (1.0 + mu) / (mu + std::exp(-tau * z)) - 1.0);
}

inline Var insi(Var a, double tau, double mu) {
  Tape& t = *a.tape();
  for (double z : a.value().data) t.note_branch(insi_value(z, tau, mu) > 0.0);
  return detail::unary(a, [tau, mu](double z) { return insi_value(z, tau, mu); },
                       [tau, mu](double z, double y) {
                         if (y <= 0.0) return 0.0;
                         const double e = std::exp(-tau * z);
                         const double den = mu + e;
                         return 2.0 * (1.0 + mu) * tau * e / (den * den);
                       });
}

// ---------------------------------------------------------------------------
// Normalization and regularization

struct BatchNormStats {
  Tensor running_mean; // 1 x c
  Tensor running_var;  // 1 x c
  double momentum = 0.1;
  double eps = 1e-5;
};

/// Batch normalization over rows. Training mode uses batch statistics (biased
/// variance) with a gradient through them and updates the running estimates;
/// evaluation mode uses the running estimates only.
inline Var batch_norm(Var x, Var gamma, Var beta, BatchNormStats& stats, bool train) {
  const Tensor& X = x.value();
  const std::size_t n = X.rows, c = X.cols;
  detail::require(gamma.rows() == 1 && gamma.cols() == c && beta.rows() == 1 && beta.cols() == c,
                  "batch_norm: scale/shift shape mismatch");
  detail::require(n > 0, "batch_norm: empty batch");
  std::vector<double> mu(c, 0.0), var(c, 0.0);
  if (train) {
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < c; ++j) mu[j] += X(i, j);
    for (auto& m : mu) m /= static_cast<double>(n);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < c; ++j) var[j] += (X(i, j) - mu[j]) * (X(i, j) - mu[j]);
    for (auto& v : var) v /= static_cast<double>(n);
    for (std::size_t j = 0; j < c; ++j) {
      stats.running_mean.data[j] = (1.0 - stats.momentum) * stats.running_mean.data[j] + stats.momentum * mu[j];
      stats.running_var.data[j] = (1.0 - stats.momentum) * stats.running_var.data[j] + stats.momentum * var[j];
    }
  } else {
    mu = stats.running_mean.data;
    var = stats.running_var.data;
  }
  std::vector<double> inv_std(c);
  for (std::size_t j = 0; j < c; ++j) inv_std[j] = 1.0 / std::sqrt(var[j] + stats.eps);
  Tensor xhat(n, c), out(n, c);
  const Tensor& G = gamma.value();
  const Tensor& B = beta.value();
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < c; ++j) {
      xhat(i, j) = (X(i, j) - mu[j]) * inv_std[j];
      out(i, j) = G(0, j) * xhat(i, j) + B(0, j);
    }
  const auto xid = x.id(), gid = gamma.id(), bid = beta.id();
  return x.tape()->record(
      std::move(out),
      [xid, gid, bid, xhat = std::move(xhat), inv_std = std::move(inv_std), train](Tape& t, std::size_t self) {
        const Tensor& g = t.grad(self);
        const std::size_t n = g.rows, c = g.cols;
        std::vector<double> sum_g(c, 0.0), sum_gx(c, 0.0);
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t j = 0; j < c; ++j) {
            sum_g[j] += g(i, j);
            sum_gx[j] += g(i, j) * xhat(i, j);
          }
        if (t.needs_grad(gid)) {
          Tensor& gg = t.grad_ref(gid);
          for (std::size_t j = 0; j < c; ++j) gg(0, j) += sum_gx[j];
        }
        if (t.needs_grad(bid)) {
          Tensor& gb = t.grad_ref(bid);
          for (std::size_t j = 0; j < c; ++j) gb(0, j) += sum_g[j];
        }
        if (t.needs_grad(xid)) {
          const Tensor& G = t.value(gid);
          Tensor& gx = t.grad_ref(xid);
          const double inv_n = 1.0 / static_cast<double>(n);
          for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < c; ++j) {
              const double dxhat = g(i, j) * G(0, j);
              if (train) {
                gx(i, j) += inv_std[j] * (dxhat - inv_n * G(0, j) * (sum_g[j] + xhat(i, j) * sum_gx[j]));
              } else {
                gx(i, j) += inv_std[j] * dxhat;
              }
            }
        }
      },
      detail::any_grad({x, gamma, beta}));
}

/// Inverted dropout: kept entries are scaled by 1/(1-rate) so evaluation needs no rescaling.
inline Var dropout(Var x, double rate, Rng& rng) {
  if (rate <= 0.0) return x;
  detail::require(rate < 1.0, "dropout: rate must be below 1");
  Tensor mask(x.rows(), x.cols());
  const double keep = 1.0 / (1.0 - rate);
  for (auto& m : mask.data) m = uniform01(rng) < rate ? 0.0 : keep;
  return affine(x, mask, Tensor(x.rows(), x.cols(), 0.0));
}

} // namespace graphyr::ad
