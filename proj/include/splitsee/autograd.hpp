#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <cstddef>
#include <cstring>
#include <functional>
#include <numbers>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

namespace splitsee {

using Index = Eigen::Index;

template <class S>
using Matrix = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

inline std::string shape_string(Index rows, Index cols) {
  return std::to_string(rows) + "x" + std::to_string(cols);
}

/// Named parameter tensors in insertion order.
template <class S>
class ParamStore {
 public:
  std::size_t add(std::string name, Matrix<S> value) {
    if (index_.contains(name)) {
      throw std::invalid_argument("duplicate parameter " + name);
    }
    index_.emplace(name, names_.size());
    names_.push_back(std::move(name));
    values_.push_back(std::move(value));
    return names_.size() - 1;
  }

  bool contains(std::string_view name) const { return index_.contains(std::string(name)); }

  std::size_t id(std::string_view name) const {
    const auto it = index_.find(std::string(name));
    if (it == index_.end()) {
      throw std::invalid_argument("missing parameter " + std::string(name));
    }
    return it->second;
  }

  /// Id of `name`, checked against an expected shape.
  std::size_t id(std::string_view name, Index rows, Index cols) const {
    const std::size_t i = id(name);
    const auto& v = values_[i];
    if (v.rows() != rows || v.cols() != cols) {
      throw std::invalid_argument("shape mismatch for " + std::string(name) + ": expected " +
                                  shape_string(rows, cols) + ", got " + shape_string(v.rows(), v.cols()));
    }
    return i;
  }

  std::size_t size() const { return names_.size(); }
  const std::string& name(std::size_t i) const { return names_[i]; }
  const Matrix<S>& value(std::size_t i) const { return values_[i]; }
  Matrix<S>& value(std::size_t i) { return values_[i]; }
  const Matrix<S>& value(std::string_view name) const { return values_[id(name)]; }
  Matrix<S>& value(std::string_view name) { return values_[id(name)]; }

  std::size_t total_elements() const {
    std::size_t n = 0;
    for (const auto& v : values_) {
      n += static_cast<std::size_t>(v.size());
    }
    return n;
  }

  template <class T>
  ParamStore<T> cast() const {
    ParamStore<T> out;
    for (std::size_t i = 0; i < size(); ++i) {
      out.add(names_[i], values_[i].template cast<T>());
    }
    return out;
  }

  friend bool operator==(const ParamStore& a, const ParamStore& b) {
    if (a.names_ != b.names_) {
      return false;
    }
    for (std::size_t i = 0; i < a.size(); ++i) {
      const auto& x = a.values_[i];
      const auto& y = b.values_[i];
      if (x.rows() != y.rows() || x.cols() != y.cols() ||
          std::memcmp(x.data(), y.data(), sizeof(S) * static_cast<std::size_t>(x.size())) != 0) {
        return false;
      }
    }
    return true;
  }

 private:
  std::vector<std::string> names_;
  std::vector<Matrix<S>> values_;
  std::unordered_map<std::string, std::size_t> index_;
};

template <class S>
class Tape;

/// Handle to a node on a tape.
template <class S>
struct Var {
  Tape<S>* tape = nullptr;
  std::size_t index = 0;

  const Matrix<S>& value() const { return tape->value(*this); }
  Index rows() const { return value().rows(); }
  Index cols() const { return value().cols(); }
};

/// Reverse-mode recording of matrix operations.
///
/// Parameter leaves accumulate into a per-tape gradient buffer indexed by the
/// parameter id of the bound store, so independent tapes can run on separate
/// threads and be reduced afterwards in a fixed order.
template <class S>
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, std::size_t)>;

  explicit Tape(const ParamStore<S>* params = nullptr) : params_(params) {
    if (params_ != nullptr) {
      param_nodes_.assign(params_->size(), kNone);
    }
  }

  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  const ParamStore<S>& params() const {
    if (params_ == nullptr) {
      throw std::logic_error("tape has no parameter store");
    }
    return *params_;
  }

  Var<S> param(std::size_t id) {
    if (params_ == nullptr || id >= param_nodes_.size()) {
      throw std::out_of_range("parameter id out of range");
    }
    if (param_nodes_[id] == kNone) {
      const std::size_t idx = nodes_.size();
      nodes_.push_back(Node{params_->value(id), {}, true, [id](Tape& t, std::size_t self) {
                              t.accumulate_param(id, t.nodes_[self].grad);
                            }});
      param_nodes_[id] = idx;
    }
    return Var<S>{this, param_nodes_[id]};
  }

  Var<S> param(std::string_view name) { return param(params().id(name)); }

  Var<S> constant(Matrix<S> value) { return push(std::move(value), false, nullptr); }

  /// A leaf whose gradient is kept and can be read back after backward().
  Var<S> input(Matrix<S> value) { return push(std::move(value), true, nullptr); }

  Var<S> push(Matrix<S> value, bool requires_grad, BackwardFn fn) {
    nodes_.push_back(Node{std::move(value), {}, requires_grad, std::move(fn)});
    return Var<S>{this, nodes_.size() - 1};
  }

  const Matrix<S>& value(Var<S> v) const { return nodes_.at(v.index).value; }
  bool requires_grad(Var<S> v) const { return nodes_.at(v.index).requires_grad; }

  /// Gradient of a node after backward(); zeros if nothing flowed into it.
  Matrix<S> grad(Var<S> v) const {
    const auto& n = nodes_.at(v.index);
    if (n.grad.size() == 0) {
      return Matrix<S>::Zero(n.value.rows(), n.value.cols());
    }
    return n.grad;
  }

  /// Mutable gradient slot, allocated as zeros on first use.
  Matrix<S>& grad_slot(std::size_t i) {
    auto& n = nodes_[i];
    if (n.grad.size() == 0) {
      n.grad = Matrix<S>::Zero(n.value.rows(), n.value.cols());
    }
    return n.grad;
  }

  void seed(Var<S> v, const Matrix<S>& g) {
    if (g.rows() != v.rows() || g.cols() != v.cols()) {
      throw std::invalid_argument("seed gradient shape mismatch");
    }
    grad_slot(v.index) += g;
  }

  void backward(Var<S> root) {
    if (root.rows() != 1 || root.cols() != 1) {
      throw std::invalid_argument("backward() from a non-scalar root needs an explicit seed");
    }
    seed(root, Matrix<S>::Constant(1, 1, S(1)));
    run_backward();
  }

  void run_backward() {
    for (std::size_t i = nodes_.size(); i-- > 0;) {
      auto& n = nodes_[i];
      if (n.requires_grad && n.backward && n.grad.size() != 0) {
        n.backward(*this, i);
      }
    }
  }

  /// Accumulated gradient per parameter id; empty matrices mean no flow.
  const std::vector<Matrix<S>>& param_grads() const { return param_grads_; }

  std::size_t node_count() const { return nodes_.size(); }

 private:
  static constexpr std::size_t kNone = static_cast<std::size_t>(-1);

  struct Node {
    Matrix<S> value;
    Matrix<S> grad;
    bool requires_grad;
    BackwardFn backward;
  };

  void accumulate_param(std::size_t id, const Matrix<S>& g) {
    if (param_grads_.empty()) {
      param_grads_.resize(params_->size());
    }
    if (param_grads_[id].size() == 0) {
      param_grads_[id] = g;
    } else {
      param_grads_[id] += g;
    }
  }

  const ParamStore<S>* params_;
  std::vector<Node> nodes_;
  std::vector<std::size_t> param_nodes_;
  std::vector<Matrix<S>> param_grads_;
};

namespace detail {

template <class S>
void require_same_tape(Var<S> a, Var<S> b) {
  if (a.tape != b.tape) {
    throw std::invalid_argument("operands live on different tapes");
  }
}

template <class S>
bool any_grad(std::initializer_list<Var<S>> vs) {
  for (auto v : vs) {
    if (v.tape->requires_grad(v)) {
      return true;
    }
  }
  return false;
}

}  // namespace detail

/// a * b
template <class S>
Var<S> matmul(Var<S> a, Var<S> b) {
  detail::require_same_tape(a, b);
  if (a.cols() != b.rows()) {
    throw std::invalid_argument("matmul: " + shape_string(a.rows(), a.cols()) + " times " +
                                shape_string(b.rows(), b.cols()));
  }
  Matrix<S> out = a.value() * b.value();
  const auto ia = a.index;
  const auto ib = b.index;
  return a.tape->push(std::move(out), detail::any_grad({a, b}), [ia, ib](Tape<S>& t, std::size_t self) {
    const Matrix<S>& g = t.grad_slot(self);
    if (t.requires_grad(Var<S>{&t, ia})) {
      t.grad_slot(ia).noalias() += g * t.value(Var<S>{&t, ib}).transpose();
    }
    if (t.requires_grad(Var<S>{&t, ib})) {
      t.grad_slot(ib).noalias() += t.value(Var<S>{&t, ia}).transpose() * g;
    }
  });
}

/// a * b^T
template <class S>
Var<S> matmul_transposed(Var<S> a, Var<S> b) {
  detail::require_same_tape(a, b);
  if (a.cols() != b.cols()) {
    throw std::invalid_argument("matmul_transposed: " + shape_string(a.rows(), a.cols()) + " times transpose of " +
                                shape_string(b.rows(), b.cols()));
  }
  Matrix<S> out = a.value() * b.value().transpose();
  const auto ia = a.index;
  const auto ib = b.index;
  return a.tape->push(std::move(out), detail::any_grad({a, b}), [ia, ib](Tape<S>& t, std::size_t self) {
    const Matrix<S>& g = t.grad_slot(self);
    if (t.requires_grad(Var<S>{&t, ia})) {
      t.grad_slot(ia).noalias() += g * t.value(Var<S>{&t, ib});
    }
    if (t.requires_grad(Var<S>{&t, ib})) {
      t.grad_slot(ib).noalias() += g.transpose() * t.value(Var<S>{&t, ia});
    }
  });
}

template <class S>
Var<S> add(Var<S> a, Var<S> b) {
  detail::require_same_tape(a, b);
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw std::invalid_argument("add: shape mismatch " + shape_string(a.rows(), a.cols()) + " vs " +
                                shape_string(b.rows(), b.cols()));
  }
  Matrix<S> out = a.value() + b.value();
  const auto ia = a.index;
  const auto ib = b.index;
  return a.tape->push(std::move(out), detail::any_grad({a, b}), [ia, ib](Tape<S>& t, std::size_t self) {
    const Matrix<S>& g = t.grad_slot(self);
    for (auto i : {ia, ib}) {
      if (t.requires_grad(Var<S>{&t, i})) {
        t.grad_slot(i) += g;
      }
    }
  });
}

/// a + row, broadcasting a 1xn row over every row of a.
template <class S>
Var<S> add_row(Var<S> a, Var<S> row) {
  detail::require_same_tape(a, row);
  if (row.rows() != 1 || row.cols() != a.cols()) {
    throw std::invalid_argument("add_row: cannot broadcast " + shape_string(row.rows(), row.cols()) + " over " +
                                shape_string(a.rows(), a.cols()));
  }
  Matrix<S> out = a.value().rowwise() + row.value().row(0);
  const auto ia = a.index;
  const auto ir = row.index;
  return a.tape->push(std::move(out), detail::any_grad({a, row}), [ia, ir](Tape<S>& t, std::size_t self) {
    const Matrix<S>& g = t.grad_slot(self);
    if (t.requires_grad(Var<S>{&t, ia})) {
      t.grad_slot(ia) += g;
    }
    if (t.requires_grad(Var<S>{&t, ir})) {
      t.grad_slot(ir) += g.colwise().sum();
    }
  });
}

template <class S>
Var<S> scale(Var<S> a, S factor) {
  Matrix<S> out = a.value() * factor;
  const auto ia = a.index;
  return a.tape->push(std::move(out), detail::any_grad({a}), [ia, factor](Tape<S>& t, std::size_t self) {
    t.grad_slot(ia) += t.grad_slot(self) * factor;
  });
}

/// x W + b
template <class S>
Var<S> affine(Var<S> x, Var<S> weight, Var<S> bias) {
  return add_row(matmul(x, weight), bias);
}

/// Exact GELU, x * Phi(x).
template <class S>
Var<S> gelu(Var<S> a) {
  const S inv_sqrt2 = S(1) / std::sqrt(S(2));
  Matrix<S> out = a.value().unaryExpr([inv_sqrt2](S x) { return S(0.5) * x * (S(1) + std::erf(x * inv_sqrt2)); });
  const auto ia = a.index;
  return a.tape->push(std::move(out), detail::any_grad({a}), [ia, inv_sqrt2](Tape<S>& t, std::size_t self) {
    const S inv_sqrt_2pi = S(1) / std::sqrt(S(2) * std::numbers::pi_v<S>);
    const Matrix<S>& x = t.value(Var<S>{&t, ia});
    const Matrix<S> d = x.unaryExpr([&](S v) {
      return S(0.5) * (S(1) + std::erf(v * inv_sqrt2)) + v * inv_sqrt_2pi * std::exp(S(-0.5) * v * v);
    });
    t.grad_slot(ia) += t.grad_slot(self).cwiseProduct(d);
  });
}

/// Row-wise layer normalization with learned gain and shift (both 1xn).
template <class S>
Var<S> layer_norm(Var<S> x, Var<S> gamma, Var<S> beta, S eps = S(1e-5)) {
  const Index n = x.cols();
  if (gamma.cols() != n || beta.cols() != n || gamma.rows() != 1 || beta.rows() != 1) {
    throw std::invalid_argument("layer_norm: gain/shift shape mismatch");
  }
  const Matrix<S>& xv = x.value();
  Matrix<S> xhat(xv.rows(), n);
  Eigen::Matrix<S, Eigen::Dynamic, 1> inv_std(xv.rows());
  for (Index r = 0; r < xv.rows(); ++r) {
    const S mean = xv.row(r).mean();
    const S var = (xv.row(r).array() - mean).square().mean();
    inv_std(r) = S(1) / std::sqrt(var + eps);
    xhat.row(r) = (xv.row(r).array() - mean) * inv_std(r);
  }
  Matrix<S> out = (xhat.array().rowwise() * gamma.value().row(0).array()).rowwise() + beta.value().row(0).array();
  const auto ix = x.index;
  const auto ig = gamma.index;
  const auto ib = beta.index;
  return x.tape->push(std::move(out), detail::any_grad({x, gamma, beta}),
                      [ix, ig, ib, xhat = std::move(xhat), inv_std = std::move(inv_std)](Tape<S>& t, std::size_t self) {
                        const Matrix<S>& g = t.grad_slot(self);
                        if (t.requires_grad(Var<S>{&t, ig})) {
                          t.grad_slot(ig) += g.cwiseProduct(xhat).colwise().sum();
                        }
                        if (t.requires_grad(Var<S>{&t, ib})) {
                          t.grad_slot(ib) += g.colwise().sum();
                        }
                        if (t.requires_grad(Var<S>{&t, ix})) {
                          const auto gain = t.value(Var<S>{&t, ig}).row(0).array();
                          Matrix<S>& gx = t.grad_slot(ix);
                          for (Index r = 0; r < g.rows(); ++r) {
                            const Eigen::Array<S, 1, Eigen::Dynamic> dxhat = g.row(r).array() * gain;
                            const S m1 = dxhat.mean();
                            const S m2 = (dxhat * xhat.row(r).array()).mean();
                            gx.row(r).array() += inv_std(r) * (dxhat - m1 - xhat.row(r).array() * m2);
                          }
                        }
                      });
}

template <class S>
Var<S> softmax_rows(Var<S> a) {
  Matrix<S> out = a.value();
  for (Index r = 0; r < out.rows(); ++r) {
    const S m = out.row(r).maxCoeff();
    out.row(r) = (out.row(r).array() - m).exp();
    out.row(r) /= out.row(r).sum();
  }
  const auto ia = a.index;
  return a.tape->push(std::move(out), detail::any_grad({a}), [ia](Tape<S>& t, std::size_t self) {
    const Matrix<S>& y = t.value(Var<S>{&t, self});
    const Matrix<S>& g = t.grad_slot(self);
    const Eigen::Matrix<S, Eigen::Dynamic, 1> dots = y.cwiseProduct(g).rowwise().sum();
    t.grad_slot(ia) += y.cwiseProduct(g.colwise() - dots);
  });
}

template <class S>
Var<S> slice_rows(Var<S> a, Index start, Index count) {
  if (start < 0 || count < 0 || start + count > a.rows()) {
    throw std::out_of_range("slice_rows: rows [" + std::to_string(start) + ", " + std::to_string(start + count) +
                            ") out of " + std::to_string(a.rows()));
  }
  Matrix<S> out = a.value().middleRows(start, count);
  const auto ia = a.index;
  return a.tape->push(std::move(out), detail::any_grad({a}), [ia, start, count](Tape<S>& t, std::size_t self) {
    t.grad_slot(ia).middleRows(start, count) += t.grad_slot(self);
  });
}

template <class S>
Var<S> slice_cols(Var<S> a, Index start, Index count) {
  if (start < 0 || count < 0 || start + count > a.cols()) {
    throw std::out_of_range("slice_cols: columns out of range");
  }
  Matrix<S> out = a.value().middleCols(start, count);
  const auto ia = a.index;
  return a.tape->push(std::move(out), detail::any_grad({a}), [ia, start, count](Tape<S>& t, std::size_t self) {
    t.grad_slot(ia).middleCols(start, count) += t.grad_slot(self);
  });
}

template <class S>
Var<S> concat_rows(std::span<const Var<S>> parts) {
  if (parts.empty()) {
    throw std::invalid_argument("concat_rows: nothing to concatenate");
  }
  Index rows = 0;
  const Index cols = parts[0].cols();
  bool grad = false;
  std::vector<std::size_t> ids;
  for (const auto& p : parts) {
    detail::require_same_tape(parts[0], p);
    if (p.cols() != cols) {
      throw std::invalid_argument("concat_rows: column count mismatch");
    }
    rows += p.rows();
    grad = grad || p.tape->requires_grad(p);
    ids.push_back(p.index);
  }
  Matrix<S> out(rows, cols);
  Index r = 0;
  for (const auto& p : parts) {
    out.middleRows(r, p.rows()) = p.value();
    r += p.rows();
  }
  return parts[0].tape->push(std::move(out), grad, [ids = std::move(ids)](Tape<S>& t, std::size_t self) {
    const Matrix<S>& g = t.grad_slot(self);
    Index r0 = 0;
    for (auto i : ids) {
      const Index n = t.value(Var<S>{&t, i}).rows();
      if (t.requires_grad(Var<S>{&t, i})) {
        t.grad_slot(i) += g.middleRows(r0, n);
      }
      r0 += n;
    }
  });
}

template <class S>
Var<S> concat_rows(std::initializer_list<Var<S>> parts) {
  return concat_rows(std::span<const Var<S>>(parts.begin(), parts.size()));
}

template <class S>
Var<S> concat_rows(const std::vector<Var<S>>& parts) {
  return concat_rows(std::span<const Var<S>>(parts));
}

template <class S>
Var<S> concat_cols(std::span<const Var<S>> parts) {
  if (parts.empty()) {
    throw std::invalid_argument("concat_cols: nothing to concatenate");
  }
  Index cols = 0;
  const Index rows = parts[0].rows();
  bool grad = false;
  std::vector<std::size_t> ids;
  for (const auto& p : parts) {
    detail::require_same_tape(parts[0], p);
    if (p.rows() != rows) {
      throw std::invalid_argument("concat_cols: row count mismatch");
    }
    cols += p.cols();
    grad = grad || p.tape->requires_grad(p);
    ids.push_back(p.index);
  }
  Matrix<S> out(rows, cols);
  Index c = 0;
  for (const auto& p : parts) {
    out.middleCols(c, p.cols()) = p.value();
    c += p.cols();
  }
  return parts[0].tape->push(std::move(out), grad, [ids = std::move(ids)](Tape<S>& t, std::size_t self) {
    const Matrix<S>& g = t.grad_slot(self);
    Index c0 = 0;
    for (auto i : ids) {
      const Index n = t.value(Var<S>{&t, i}).cols();
      if (t.requires_grad(Var<S>{&t, i})) {
        t.grad_slot(i) += g.middleCols(c0, n);
      }
      c0 += n;
    }
  });
}

template <class S>
Var<S> concat_cols(std::initializer_list<Var<S>> parts) {
  return concat_cols(std::span<const Var<S>>(parts.begin(), parts.size()));
}

template <class S>
Var<S> concat_cols(const std::vector<Var<S>>& parts) {
  return concat_cols(std::span<const Var<S>>(parts));
}

template <class S>
Var<S> reverse_rows(Var<S> a) {
  Matrix<S> out = a.value().colwise().reverse();
  const auto ia = a.index;
  return a.tape->push(std::move(out), detail::any_grad({a}), [ia](Tape<S>& t, std::size_t self) {
    t.grad_slot(ia) += t.grad_slot(self).colwise().reverse();
  });
}

/// Groups the first groups*floor(n/groups) rows into `groups` equal blocks and
/// averages each block.
template <class S>
Var<S> mean_pool_rows(Var<S> a, Index groups) {
  if (groups < 1 || groups > a.rows()) {
    throw std::invalid_argument("mean_pool_rows: cannot form " + std::to_string(groups) + " groups from " +
                                std::to_string(a.rows()) + " rows");
  }
  const Index width = a.rows() / groups;
  const S inv = S(1) / static_cast<S>(width);
  Matrix<S> out(groups, a.cols());
  for (Index g = 0; g < groups; ++g) {
    out.row(g) = a.value().middleRows(g * width, width).colwise().sum() * inv;
  }
  const auto ia = a.index;
  return a.tape->push(std::move(out), detail::any_grad({a}), [ia, groups, width, inv](Tape<S>& t, std::size_t self) {
    const Matrix<S>& g = t.grad_slot(self);
    Matrix<S>& ga = t.grad_slot(ia);
    for (Index k = 0; k < groups; ++k) {
      ga.middleRows(k * width, width).rowwise() += g.row(k) * inv;
    }
  });
}

/// Causal dilated convolution. `x` is n x c_in, `weight` is (kernel*c_in) x c_out
/// with tap j occupying rows [j*c_in, (j+1)*c_in). Tap j reads x[t - (kernel-1-j)*dilation];
/// indices before the start of the sequence read as zero.
template <class S>
Var<S> causal_conv(Var<S> x, Var<S> weight, Index kernel, Index dilation) {
  detail::require_same_tape(x, weight);
  const Index n = x.rows();
  const Index cin = x.cols();
  if (kernel < 1 || dilation < 1 || weight.rows() != kernel * cin) {
    throw std::invalid_argument("causal_conv: weight " + shape_string(weight.rows(), weight.cols()) +
                                " does not match kernel " + std::to_string(kernel) + " over " + std::to_string(cin) +
                                " input channels");
  }
  const Index cout = weight.cols();
  Matrix<S> out = Matrix<S>::Zero(n, cout);
  const Matrix<S>& xv = x.value();
  const Matrix<S>& wv = weight.value();
  for (Index j = 0; j < kernel; ++j) {
    const Index shift = (kernel - 1 - j) * dilation;
    if (shift >= n) {
      continue;
    }
    out.bottomRows(n - shift).noalias() += xv.topRows(n - shift) * wv.middleRows(j * cin, cin);
  }
  const auto ix = x.index;
  const auto iw = weight.index;
  return x.tape->push(std::move(out), detail::any_grad({x, weight}),
                      [ix, iw, kernel, dilation](Tape<S>& t, std::size_t self) {
                        const Matrix<S>& g = t.grad_slot(self);
                        const Matrix<S>& xv = t.value(Var<S>{&t, ix});
                        const Matrix<S>& wv = t.value(Var<S>{&t, iw});
                        const Index n = xv.rows();
                        const Index cin = xv.cols();
                        const bool gx = t.requires_grad(Var<S>{&t, ix});
                        const bool gw = t.requires_grad(Var<S>{&t, iw});
                        for (Index j = 0; j < kernel; ++j) {
                          const Index shift = (kernel - 1 - j) * dilation;
                          if (shift >= n) {
                            continue;
                          }
                          if (gx) {
                            t.grad_slot(ix).topRows(n - shift).noalias() +=
                                g.bottomRows(n - shift) * wv.middleRows(j * cin, cin).transpose();
                          }
                          if (gw) {
                            t.grad_slot(iw).middleRows(j * cin, cin).noalias() +=
                                xv.topRows(n - shift).transpose() * g.bottomRows(n - shift);
                          }
                        }
                      });
}

/// Valid-padding strided convolution: out[o] = sum_j x[o*stride + j] W_j with
/// floor((n - kernel)/stride) + 1 output rows.
template <class S>
Var<S> strided_conv(Var<S> x, Var<S> weight, Index kernel, Index stride) {
  detail::require_same_tape(x, weight);
  const Index n = x.rows();
  const Index cin = x.cols();
  if (kernel < 1 || stride < 1 || weight.rows() != kernel * cin) {
    throw std::invalid_argument("strided_conv: weight " + shape_string(weight.rows(), weight.cols()) +
                                " does not match kernel " + std::to_string(kernel));
  }
  if (n < kernel) {
    throw std::invalid_argument("strided_conv: input of " + std::to_string(n) + " rows is shorter than the kernel");
  }
  const Index outn = (n - kernel) / stride + 1;
  const Index cout = weight.cols();
  using Strided = Eigen::Map<const Matrix<S>, 0, Eigen::OuterStride<>>;
  Matrix<S> out = Matrix<S>::Zero(outn, cout);
  for (Index j = 0; j < kernel; ++j) {
    Strided rows(x.value().data() + j * cin, outn, cin, Eigen::OuterStride<>(stride * cin));
    out.noalias() += rows * weight.value().middleRows(j * cin, cin);
  }
  const auto ix = x.index;
  const auto iw = weight.index;
  return x.tape->push(std::move(out), detail::any_grad({x, weight}),
                      [ix, iw, kernel, stride, outn](Tape<S>& t, std::size_t self) {
                        using StridedMut = Eigen::Map<Matrix<S>, 0, Eigen::OuterStride<>>;
                        const Matrix<S>& g = t.grad_slot(self);
                        const Matrix<S>& xv = t.value(Var<S>{&t, ix});
                        const Matrix<S>& wv = t.value(Var<S>{&t, iw});
                        const Index cin = xv.cols();
                        const bool gx = t.requires_grad(Var<S>{&t, ix});
                        const bool gw = t.requires_grad(Var<S>{&t, iw});
                        for (Index j = 0; j < kernel; ++j) {
                          if (gw) {
                            Strided rows(xv.data() + j * cin, outn, cin, Eigen::OuterStride<>(stride * cin));
                            t.grad_slot(iw).middleRows(j * cin, cin).noalias() += rows.transpose() * g;
                          }
                          if (gx) {
                            StridedMut rows(t.grad_slot(ix).data() + j * cin, outn, cin,
                                            Eigen::OuterStride<>(stride * cin));
                            rows.noalias() += g * wv.middleRows(j * cin, cin).transpose();
                          }
                        }
                      });
}

/// Each row divided by its Euclidean norm.
template <class S>
Var<S> normalize_rows(Var<S> a) {
  const Matrix<S>& av = a.value();
  Eigen::Matrix<S, Eigen::Dynamic, 1> norms = av.rowwise().norm().cwiseMax(S(1e-12));
  Matrix<S> out = av.array().colwise() / norms.array();
  const auto ia = a.index;
  return a.tape->push(std::move(out), detail::any_grad({a}), [ia, norms = std::move(norms)](Tape<S>& t,
                                                                                           std::size_t self) {
    const Matrix<S>& y = t.value(Var<S>{&t, self});
    const Matrix<S>& g = t.grad_slot(self);
    const Eigen::Matrix<S, Eigen::Dynamic, 1> dots = y.cwiseProduct(g).rowwise().sum();
    Matrix<S> d = g - (y.array().colwise() * dots.array()).matrix();
    t.grad_slot(ia) += (d.array().colwise() / norms.array()).matrix();
  });
}

/// Mean over rows of -sum_j target_rj * log softmax(logits_r)_j. Targets are
/// constants; the result is 1x1.
template <class S>
Var<S> soft_cross_entropy(Var<S> logits, const Matrix<S>& targets) {
  const Matrix<S>& lv = logits.value();
  if (targets.rows() != lv.rows() || targets.cols() != lv.cols()) {
    throw std::invalid_argument("soft_cross_entropy: target shape " + shape_string(targets.rows(), targets.cols()) +
                                " does not match logits " + shape_string(lv.rows(), lv.cols()));
  }
  if (lv.rows() == 0) {
    throw std::invalid_argument("soft_cross_entropy: empty batch");
  }
  const Index m = lv.rows();
  Matrix<S> probs(m, lv.cols());
  S total = 0;
  for (Index r = 0; r < m; ++r) {
    const S mx = lv.row(r).maxCoeff();
    const auto shifted = (lv.row(r).array() - mx).eval();
    const S sum_exp = shifted.exp().sum();
    const S lse = mx + std::log(sum_exp);
    probs.row(r) = shifted.exp() / sum_exp;
    total += targets.row(r).sum() * lse - targets.row(r).dot(lv.row(r));
  }
  Matrix<S> out(1, 1);
  out(0, 0) = total / static_cast<S>(m);
  const auto il = logits.index;
  return logits.tape->push(std::move(out), detail::any_grad({logits}),
                           [il, targets, probs = std::move(probs)](Tape<S>& t, std::size_t self) {
                             const S g = t.grad_slot(self)(0, 0) / static_cast<S>(probs.rows());
                             const Eigen::Matrix<S, Eigen::Dynamic, 1> mass = targets.rowwise().sum();
                             t.grad_slot(il) += g * ((probs.array().colwise() * mass.array()) - targets.array()).matrix();
                           });
}

/// Sum of 1x1 nodes.
template <class S>
Var<S> sum_scalars(const std::vector<Var<S>>& parts) {
  Var<S> acc = parts[0];
  for (std::size_t i = 1; i < parts.size(); ++i) {
    acc = add(acc, parts[i]);
  }
  return acc;
}

}  // namespace splitsee
