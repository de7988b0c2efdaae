#pragma once

// Dense matrices with a reverse-mode tape. Every op is a free function over
// Var handles; values are Eigen row-major matrices templated on the scalar.

#include <Eigen/Dense>

#include <cmath>
#include <cstddef>
#include <deque>
#include <functional>
#include <initializer_list>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "grains/error.hpp"

namespace grains {

template <typename Scalar>
using MatrixX = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename Scalar>
using RowVectorX = Eigen::Matrix<Scalar, 1, Eigen::Dynamic>;

using Matrix = MatrixX<double>;
using RowVector = RowVectorX<double>;
using Index = Eigen::Index;

inline std::string shape_string(Index rows, Index cols) {
  return "(" + std::to_string(rows) + "x" + std::to_string(cols) + ")";
}

template <typename Derived>
std::string shape_string(const Eigen::EigenBase<Derived>& m) {
  return shape_string(m.rows(), m.cols());
}

template <typename Derived>
bool all_finite(const Eigen::DenseBase<Derived>& m) {
  return m.allFinite();
}

template <typename Scalar>
class Tape;

/// Handle to a node on a Tape. Cheap to copy; valid while the tape lives.
template <typename Scalar>
struct Var {
  Tape<Scalar>* tape = nullptr;
  std::size_t id = 0;

  const MatrixX<Scalar>& value() const { return tape->value(*this); }
  Index rows() const { return value().rows(); }
  Index cols() const { return value().cols(); }
};

/// Gradients of the seed with respect to every leaf that requested one.
template <typename Scalar>
class GradientMap {
 public:
  bool contains(Var<Scalar> v) const {
    return v.id < present_.size() && present_[v.id];
  }

  const MatrixX<Scalar>& operator[](Var<Scalar> v) const {
    if (!contains(v)) {
      throw ContractError("GradientMap: node " + std::to_string(v.id) +
                          " is not a leaf that requires a gradient");
    }
    return grads_[v.id];
  }

  MatrixX<Scalar> take(Var<Scalar> v) {
    (void)(*this)[v];
    return std::move(grads_[v.id]);
  }

 private:
  friend class Tape<Scalar>;
  std::vector<MatrixX<Scalar>> grads_;
  std::vector<bool> present_;
};

template <typename Scalar>
class Tape {
 public:
  using Mat = MatrixX<Scalar>;
  using VarT = Var<Scalar>;
  // Receives the upstream gradient of the node; must accumulate into inputs.
  using BackwardFn = std::function<void(Tape&, const Mat&)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  VarT leaf(Mat value, bool requires_grad = true) {
    check_open();
    nodes_.push_back(Node{std::move(value), Mat(), requires_grad, true, nullptr});
    return VarT{this, nodes_.size() - 1};
  }

  VarT constant(Mat value) { return leaf(std::move(value), false); }

  /// Appends the output of a primitive. The backward closure is kept only
  /// when some input requires a gradient.
  VarT record(Mat value, std::initializer_list<VarT> inputs, BackwardFn backward) {
    return record(std::move(value), std::span<const VarT>(inputs.begin(), inputs.size()),
                  std::move(backward));
  }

  VarT record(Mat value, std::span<const VarT> inputs, BackwardFn backward) {
    check_open();
    bool needs = false;
    for (const auto& in : inputs) {
      if (in.tape != this) throw ContractError("Tape: input belongs to a different tape");
      needs = needs || nodes_[in.id].requires_grad;
    }
    nodes_.push_back(Node{std::move(value), Mat(), needs, false,
                          needs ? std::move(backward) : BackwardFn{}});
    return VarT{this, nodes_.size() - 1};
  }

  const Mat& value(VarT v) const { return nodes_.at(v.id).value; }
  bool requires_grad(VarT v) const { return nodes_.at(v.id).requires_grad; }
  std::size_t size() const { return nodes_.size(); }
  bool consumed() const { return consumed_; }

  /// Zero-initialised gradient buffer of `v`, for scatter-style backward rules.
  Mat& grad_slot(VarT v) {
    Node& n = nodes_[v.id];
    if (n.grad.size() == 0) n.grad = Mat::Zero(n.value.rows(), n.value.cols());
    return n.grad;
  }

  template <typename Derived>
  void accumulate(VarT v, const Eigen::MatrixBase<Derived>& g) {
    Node& n = nodes_[v.id];
    if (!n.requires_grad) return;
    if (n.grad.size() == 0) {
      n.grad = g;
    } else {
      n.grad += g;
    }
  }

  /// Reverse sweep from a 1x1 node. Consumes the tape.
  GradientMap<Scalar> backward(VarT seed) {
    check_open();
    if (seed.tape != this) throw ContractError("backward: seed belongs to a different tape");
    const Mat& sv = value(seed);
    if (sv.rows() != 1 || sv.cols() != 1) {
      throw ContractError("backward: seed must be scalar, got " + shape_string(sv));
    }
    consumed_ = true;
    GradientMap<Scalar> out;
    out.grads_.resize(nodes_.size());
    out.present_.assign(nodes_.size(), false);
    if (!nodes_[seed.id].requires_grad) {
      collect_leaves(out);
      return out;
    }
    nodes_[seed.id].grad = Mat::Ones(1, 1);
    for (std::size_t i = seed.id + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (n.is_leaf || !n.backward || n.grad.size() == 0) continue;
      n.backward(*this, n.grad);
      // Intermediate gradients are not needed once propagated.
      n.grad.resize(0, 0);
    }
    collect_leaves(out);
    return out;
  }

 private:
  struct Node {
    Mat value;
    Mat grad;
    bool requires_grad;
    bool is_leaf;
    BackwardFn backward;
  };

  void check_open() const {
    if (consumed_) throw ContractError("Tape: already consumed by a backward sweep");
  }

  void collect_leaves(GradientMap<Scalar>& out) {
    for (std::size_t i = 0; i < nodes_.size(); ++i) {
      Node& n = nodes_[i];
      if (!n.is_leaf || !n.requires_grad) continue;
      out.present_[i] = true;
      out.grads_[i] = n.grad.size() == 0 ? Mat::Zero(n.value.rows(), n.value.cols())
                                          : std::move(n.grad);
    }
  }

  std::deque<Node> nodes_;
  bool consumed_ = false;
};

namespace detail {

template <typename Scalar>
void same_tape(Var<Scalar> a, Var<Scalar> b, const char* op) {
  if (a.tape == nullptr || a.tape != b.tape) {
    throw ContractError(std::string(op) + ": operands live on different tapes");
  }
}

template <typename Scalar>
void same_shape(const MatrixX<Scalar>& a, const MatrixX<Scalar>& b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_string(a) + " vs " +
                         shape_string(b));
  }
}

template <typename Scalar>
constexpr Scalar kGeluC = Scalar(0.7978845608028654);  // sqrt(2/pi)
template <typename Scalar>
constexpr Scalar kGeluA = Scalar(0.044715);

}  // namespace detail

template <typename Scalar>
Var<Scalar> matmul(Var<Scalar> a, Var<Scalar> b) {
  detail::same_tape(a, b, "matmul");
  const auto& av = a.value();
  const auto& bv = b.value();
  if (av.cols() != bv.rows()) {
    throw DimensionError("matmul: shape mismatch " + shape_string(av) + " * " + shape_string(bv));
  }
  MatrixX<Scalar> out = av * bv;
  return a.tape->record(std::move(out), {a, b}, [a, b](Tape<Scalar>& t, const MatrixX<Scalar>& g) {
    if (t.requires_grad(a)) t.accumulate(a, g * t.value(b).transpose());
    if (t.requires_grad(b)) t.accumulate(b, t.value(a).transpose() * g);
  });
}

template <typename Scalar>
Var<Scalar> add(Var<Scalar> a, Var<Scalar> b) {
  detail::same_tape(a, b, "add");
  detail::same_shape(a.value(), b.value(), "add");
  MatrixX<Scalar> out = a.value() + b.value();
  return a.tape->record(std::move(out), {a, b}, [a, b](Tape<Scalar>& t, const MatrixX<Scalar>& g) {
    t.accumulate(a, g);
    t.accumulate(b, g);
  });
}

template <typename Scalar>
Var<Scalar> sub(Var<Scalar> a, Var<Scalar> b) {
  detail::same_tape(a, b, "sub");
  detail::same_shape(a.value(), b.value(), "sub");
  MatrixX<Scalar> out = a.value() - b.value();
  return a.tape->record(std::move(out), {a, b}, [a, b](Tape<Scalar>& t, const MatrixX<Scalar>& g) {
    t.accumulate(a, g);
    t.accumulate(b, -g);
  });
}

template <typename Scalar>
Var<Scalar> hadamard(Var<Scalar> a, Var<Scalar> b) {
  detail::same_tape(a, b, "hadamard");
  detail::same_shape(a.value(), b.value(), "hadamard");
  MatrixX<Scalar> out = a.value().cwiseProduct(b.value());
  return a.tape->record(std::move(out), {a, b}, [a, b](Tape<Scalar>& t, const MatrixX<Scalar>& g) {
    if (t.requires_grad(a)) t.accumulate(a, g.cwiseProduct(t.value(b)));
    if (t.requires_grad(b)) t.accumulate(b, g.cwiseProduct(t.value(a)));
  });
}

template <typename Scalar>
Var<Scalar> scale(Var<Scalar> a, Scalar s) {
  MatrixX<Scalar> out = a.value() * s;
  return a.tape->record(std::move(out), {a}, [a, s](Tape<Scalar>& t, const MatrixX<Scalar>& g) {
    t.accumulate(a, g * s);
  });
}

/// a (r x c) plus a 1 x c row broadcast over every row.
template <typename Scalar>
Var<Scalar> add_row_broadcast(Var<Scalar> a, Var<Scalar> row) {
  detail::same_tape(a, row, "add_row_broadcast");
  const auto& av = a.value();
  const auto& rv = row.value();
  if (rv.rows() != 1 || rv.cols() != av.cols()) {
    throw DimensionError("add_row_broadcast: shape mismatch " + shape_string(av) + " + " +
                         shape_string(rv));
  }
  MatrixX<Scalar> out = av.rowwise() + rv.row(0);
  return a.tape->record(std::move(out), {a, row},
                        [a, row](Tape<Scalar>& t, const MatrixX<Scalar>& g) {
                          t.accumulate(a, g);
                          if (t.requires_grad(row)) t.accumulate(row, g.colwise().sum());
                        });
}

template <typename Scalar>
Var<Scalar> transpose(Var<Scalar> a) {
  MatrixX<Scalar> out = a.value().transpose();
  return a.tape->record(std::move(out), {a}, [a](Tape<Scalar>& t, const MatrixX<Scalar>& g) {
    t.accumulate(a, g.transpose());
  });
}

template <typename Scalar>
Var<Scalar> sum(Var<Scalar> a) {
  MatrixX<Scalar> out(1, 1);
  out(0, 0) = a.value().sum();
  return a.tape->record(std::move(out), {a}, [a](Tape<Scalar>& t, const MatrixX<Scalar>& g) {
    const auto& av = t.value(a);
    t.accumulate(a, MatrixX<Scalar>::Constant(av.rows(), av.cols(), g(0, 0)));
  });
}

/// tanh-approximation GELU; the backward rule differentiates the same formula.
template <typename Scalar>
Var<Scalar> gelu(Var<Scalar> a) {
  using detail::kGeluA;
  using detail::kGeluC;
  MatrixX<Scalar> out = a.value().unaryExpr([](Scalar x) {
    return Scalar(0.5) * x * (Scalar(1) + std::tanh(kGeluC<Scalar> * (x + kGeluA<Scalar> * x * x * x)));
  });
  return a.tape->record(std::move(out), {a}, [a](Tape<Scalar>& t, const MatrixX<Scalar>& g) {
    MatrixX<Scalar> d = t.value(a).unaryExpr([](Scalar x) {
      const Scalar th = std::tanh(kGeluC<Scalar> * (x + kGeluA<Scalar> * x * x * x));
      const Scalar inner = kGeluC<Scalar> * (Scalar(1) + Scalar(3) * kGeluA<Scalar> * x * x);
      return Scalar(0.5) * (Scalar(1) + th) + Scalar(0.5) * x * (Scalar(1) - th * th) * inner;
    });
    t.accumulate(a, g.cwiseProduct(d));
  });
}

namespace detail {

template <typename Scalar>
MatrixX<Scalar> softmax_rows_value(const MatrixX<Scalar>& m) {
  MatrixX<Scalar> out(m.rows(), m.cols());
  for (Index r = 0; r < m.rows(); ++r) {
    const Scalar mx = m.row(r).maxCoeff();
    out.row(r) = (m.row(r).array() - mx).exp().matrix();
    out.row(r) /= out.row(r).sum();
  }
  return out;
}

}  // namespace detail

template <typename Scalar>
Var<Scalar> softmax_rows(Var<Scalar> m) {
  MatrixX<Scalar> out = detail::softmax_rows_value(m.value());
  const std::size_t self = m.tape->size();
  return m.tape->record(std::move(out), {m}, [m, self](Tape<Scalar>& t, const MatrixX<Scalar>& g) {
    const auto& y = t.value(Var<Scalar>{&t, self});
    const auto dots = g.cwiseProduct(y).rowwise().sum();
    MatrixX<Scalar> gx = y.cwiseProduct(g - dots.replicate(1, g.cols()));
    t.accumulate(m, gx);
  });
}

template <typename Scalar>
Var<Scalar> log_softmax_rows(Var<Scalar> m) {
  const auto& mv = m.value();
  MatrixX<Scalar> out(mv.rows(), mv.cols());
  for (Index r = 0; r < mv.rows(); ++r) {
    const Scalar mx = mv.row(r).maxCoeff();
    const Scalar lse = mx + std::log((mv.row(r).array() - mx).exp().sum());
    out.row(r) = mv.row(r).array() - lse;
  }
  const std::size_t self = m.tape->size();
  return m.tape->record(std::move(out), {m}, [m, self](Tape<Scalar>& t, const MatrixX<Scalar>& g) {
    const auto& y = t.value(Var<Scalar>{&t, self});
    const auto gsum = g.rowwise().sum();
    MatrixX<Scalar> gx = g - y.array().exp().matrix().cwiseProduct(gsum.replicate(1, g.cols()));
    t.accumulate(m, gx);
  });
}

/// Row-wise softmax of a square score matrix where row i only sees columns
/// 0..i. Masked entries are exactly zero.
template <typename Scalar>
Var<Scalar> causal_softmax_rows(Var<Scalar> s) {
  const auto& sv = s.value();
  if (sv.rows() != sv.cols()) {
    throw DimensionError("causal_softmax_rows: expected square scores, got " + shape_string(sv));
  }
  const Index n = sv.rows();
  MatrixX<Scalar> out = MatrixX<Scalar>::Zero(n, n);
  for (Index r = 0; r < n; ++r) {
    auto seg = sv.row(r).head(r + 1);
    const Scalar mx = seg.maxCoeff();
    out.row(r).head(r + 1) = (seg.array() - mx).exp().matrix();
    out.row(r).head(r + 1) /= out.row(r).head(r + 1).sum();
  }
  const std::size_t self = s.tape->size();
  return s.tape->record(std::move(out), {s}, [s, self](Tape<Scalar>& t, const MatrixX<Scalar>& g) {
    const auto& y = t.value(Var<Scalar>{&t, self});
    const auto dots = g.cwiseProduct(y).rowwise().sum();
    MatrixX<Scalar> gx = y.cwiseProduct(g - dots.replicate(1, g.cols()));
    t.accumulate(s, gx);
  });
}

/// Per-row normalisation to zero mean and unit (biased) variance, then an
/// affine map with 1 x c gain and bias.
template <typename Scalar>
Var<Scalar> layernorm(Var<Scalar> x, Var<Scalar> gain, Var<Scalar> bias, Scalar eps) {
  detail::same_tape(x, gain, "layernorm");
  detail::same_tape(x, bias, "layernorm");
  const auto& xv = x.value();
  const Index c = xv.cols();
  if (gain.rows() != 1 || gain.cols() != c || bias.rows() != 1 || bias.cols() != c) {
    throw DimensionError("layernorm: gain/bias " + shape_string(gain.value()) + "/" +
                         shape_string(bias.value()) + " do not match input " + shape_string(xv));
  }
  MatrixX<Scalar> xhat(xv.rows(), c);
  RowVectorX<Scalar> inv_std(xv.rows());
  for (Index r = 0; r < xv.rows(); ++r) {
    const Scalar mean = xv.row(r).mean();
    const Scalar var = (xv.row(r).array() - mean).square().mean();
    inv_std(r) = Scalar(1) / std::sqrt(var + eps);
    xhat.row(r) = (xv.row(r).array() - mean) * inv_std(r);
  }
  MatrixX<Scalar> out =
      (xhat.array().rowwise() * gain.value().row(0).array()).rowwise() + bias.value().row(0).array();
  return x.tape->record(
      std::move(out), {x, gain, bias},
      [x, gain, bias, xhat = std::move(xhat), inv_std = std::move(inv_std)](
          Tape<Scalar>& t, const MatrixX<Scalar>& g) {
        if (t.requires_grad(gain)) t.accumulate(gain, g.cwiseProduct(xhat).colwise().sum());
        if (t.requires_grad(bias)) t.accumulate(bias, g.colwise().sum());
        if (!t.requires_grad(x)) return;
        const MatrixX<Scalar> gx_hat = g.array().rowwise() * t.value(gain).row(0).array();
        MatrixX<Scalar> gx(g.rows(), g.cols());
        for (Index r = 0; r < g.rows(); ++r) {
          const Scalar m1 = gx_hat.row(r).mean();
          const Scalar m2 = gx_hat.row(r).dot(xhat.row(r)) / Scalar(g.cols());
          gx.row(r) = (gx_hat.row(r).array() - m1 - xhat.row(r).array() * m2) * inv_std(r);
        }
        t.accumulate(x, gx);
      });
}

/// Rows of `table` selected by `ids`; the backward rule scatters into the table.
template <typename Scalar>
Var<Scalar> gather_rows(Var<Scalar> table, std::span<const int> ids) {
  const auto& tv = table.value();
  MatrixX<Scalar> out(static_cast<Index>(ids.size()), tv.cols());
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || ids[i] >= tv.rows()) {
      throw IndexError("gather_rows: id " + std::to_string(ids[i]) + " outside [0, " +
                       std::to_string(tv.rows()) + ")");
    }
    out.row(static_cast<Index>(i)) = tv.row(ids[i]);
  }
  std::vector<int> saved(ids.begin(), ids.end());
  return table.tape->record(std::move(out), {table},
                            [table, saved = std::move(saved)](Tape<Scalar>& t, const MatrixX<Scalar>& g) {
                              auto& slot = t.grad_slot(table);
                              for (std::size_t i = 0; i < saved.size(); ++i) {
                                slot.row(saved[i]) += g.row(static_cast<Index>(i));
                              }
                            });
}

template <typename Scalar>
Var<Scalar> slice_rows(Var<Scalar> a, Index start, Index count) {
  const auto& av = a.value();
  if (start < 0 || count < 0 || start + count > av.rows()) {
    throw IndexError("slice_rows: [" + std::to_string(start) + ", " + std::to_string(start + count) +
                     ") outside " + shape_string(av));
  }
  MatrixX<Scalar> out = av.middleRows(start, count);
  return a.tape->record(std::move(out), {a}, [a, start, count](Tape<Scalar>& t, const MatrixX<Scalar>& g) {
    t.grad_slot(a).middleRows(start, count) += g;
  });
}

template <typename Scalar>
Var<Scalar> slice_cols(Var<Scalar> a, Index start, Index count) {
  const auto& av = a.value();
  if (start < 0 || count < 0 || start + count > av.cols()) {
    throw IndexError("slice_cols: [" + std::to_string(start) + ", " + std::to_string(start + count) +
                     ") outside " + shape_string(av));
  }
  MatrixX<Scalar> out = av.middleCols(start, count);
  return a.tape->record(std::move(out), {a}, [a, start, count](Tape<Scalar>& t, const MatrixX<Scalar>& g) {
    t.grad_slot(a).middleCols(start, count) += g;
  });
}

template <typename Scalar>
Var<Scalar> concat_rows(std::span<const Var<Scalar>> parts) {
  if (parts.empty()) throw ContractError("concat_rows: no inputs");
  Index rows = 0;
  const Index cols = parts[0].cols();
  for (const auto& p : parts) {
    detail::same_tape(parts[0], p, "concat_rows");
    if (p.cols() != cols) {
      throw DimensionError("concat_rows: column mismatch " + shape_string(parts[0].value()) + " vs " +
                           shape_string(p.value()));
    }
    rows += p.rows();
  }
  MatrixX<Scalar> out(rows, cols);
  std::vector<std::pair<Var<Scalar>, Index>> offsets;
  Index at = 0;
  for (const auto& p : parts) {
    out.middleRows(at, p.rows()) = p.value();
    offsets.emplace_back(p, at);
    at += p.rows();
  }
  return parts[0].tape->record(std::move(out), parts,
                               [offsets = std::move(offsets)](Tape<Scalar>& t, const MatrixX<Scalar>& g) {
                                 for (const auto& [p, off] : offsets) {
                                   if (t.requires_grad(p)) t.accumulate(p, g.middleRows(off, t.value(p).rows()));
                                 }
                               });
}

template <typename Scalar>
Var<Scalar> concat_cols(std::span<const Var<Scalar>> parts) {
  if (parts.empty()) throw ContractError("concat_cols: no inputs");
  Index cols = 0;
  const Index rows = parts[0].rows();
  for (const auto& p : parts) {
    detail::same_tape(parts[0], p, "concat_cols");
    if (p.rows() != rows) {
      throw DimensionError("concat_cols: row mismatch " + shape_string(parts[0].value()) + " vs " +
                           shape_string(p.value()));
    }
    cols += p.cols();
  }
  MatrixX<Scalar> out(rows, cols);
  std::vector<std::pair<Var<Scalar>, Index>> offsets;
  Index at = 0;
  for (const auto& p : parts) {
    out.middleCols(at, p.cols()) = p.value();
    offsets.emplace_back(p, at);
    at += p.cols();
  }
  return parts[0].tape->record(std::move(out), parts,
                               [offsets = std::move(offsets)](Tape<Scalar>& t, const MatrixX<Scalar>& g) {
                                 for (const auto& [p, off] : offsets) {
                                   if (t.requires_grad(p)) t.accumulate(p, g.middleCols(off, t.value(p).cols()));
                                 }
                               });
}

/// Sum of the listed (row, col) entries, as a 1x1 node.
template <typename Scalar>
Var<Scalar> select_sum(Var<Scalar> m, std::span<const std::pair<Index, Index>> entries) {
  const auto& mv = m.value();
  MatrixX<Scalar> out = MatrixX<Scalar>::Zero(1, 1);
  for (const auto& [r, c] : entries) {
    if (r < 0 || r >= mv.rows() || c < 0 || c >= mv.cols()) {
      throw IndexError("select_sum: entry (" + std::to_string(r) + ", " + std::to_string(c) +
                       ") outside " + shape_string(mv));
    }
    out(0, 0) += mv(r, c);
  }
  std::vector<std::pair<Index, Index>> saved(entries.begin(), entries.end());
  return m.tape->record(std::move(out), {m}, [m, saved = std::move(saved)](Tape<Scalar>& t, const MatrixX<Scalar>& g) {
    auto& slot = t.grad_slot(m);
    for (const auto& [r, c] : saved) slot(r, c) += g(0, 0);
  });
}

}  // namespace grains
