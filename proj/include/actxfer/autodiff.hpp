#pragma once

#include <deque>
#include <functional>
#include <initializer_list>
#include <memory>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "actxfer/param_store.hpp"
#include "actxfer/tensor.hpp"

namespace actxfer {

template <typename S>
class BasicTape;

/// Handle to a value recorded on a tape.
template <typename S>
struct BasicVar {
  BasicTape<S>* tape = nullptr;
  int id = -1;

  const BasicTensor<S>& value() const { return tape->value(*this); }
  const Shape& shape() const { return value().shape(); }
};

/// Reverse-mode tape. Nodes are appended in evaluation order; backward()
/// walks them in reverse. A tape is single-use: backward() may run once.
template <typename S>
class BasicTape {
 public:
  using Tensor = BasicTensor<S>;
  using Var = BasicVar<S>;
  using BackwardFn = std::function<void(BasicTape&, int)>;

  explicit BasicTape(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}
  BasicTape(const BasicTape&) = delete;
  BasicTape& operator=(const BasicTape&) = delete;

  bool grad_enabled() const noexcept { return grad_enabled_; }

  Var constant(Tensor value) {
    nodes_.push_back(Node{std::move(value), {}, false, nullptr, {}, {}});
    return Var{this, static_cast<int>(nodes_.size()) - 1};
  }

  /// Leaf bound to a store entry. Frozen entries never receive gradient.
  /// The value is referenced, not copied: the store must outlive the tape and
  /// stay unmodified until backward() has run.
  Var param(BasicParamStore<S>& store, const std::string& name) {
    auto& p = store.at(name);
    bool rg = grad_enabled_ && !p.frozen;
    nodes_.push_back(Node{{}, {}, rg, rg ? &p : nullptr, {}, {}, &p.value});
    return Var{this, static_cast<int>(nodes_.size()) - 1};
  }

  /// Gradient-free leaf bound to a store entry.
  Var param(const BasicParamStore<S>& store, const std::string& name) {
    nodes_.push_back(Node{{}, {}, false, nullptr, {}, {}, &store.at(name).value});
    return Var{this, static_cast<int>(nodes_.size()) - 1};
  }

  /// Used by op implementations. `fn` is dropped when no input needs a gradient.
  Var push(Tensor value, std::initializer_list<Var> inputs, BackwardFn fn) {
    bool rg = false;
    std::vector<int> ids;
    for (const auto& v : inputs) {
      check_owner(v);
      ids.push_back(v.id);
      rg = rg || nodes_[static_cast<std::size_t>(v.id)].requires_grad;
    }
    rg = rg && grad_enabled_;
    nodes_.push_back(Node{std::move(value), {}, rg, nullptr, rg ? std::move(fn) : BackwardFn{}, std::move(ids)});
    return Var{this, static_cast<int>(nodes_.size()) - 1};
  }

  const Tensor& value(Var v) const {
    check_owner(v);
    return value(v.id);
  }
  const Tensor& value(int id) const {
    const auto& n = nodes_[static_cast<std::size_t>(id)];
    return n.ref ? *n.ref : n.value;
  }

  bool requires_grad(Var v) const { return requires_grad(v.id); }
  bool requires_grad(int id) const { return nodes_[static_cast<std::size_t>(id)].requires_grad; }

  /// Gradient flowing into node `id` (allocated zero on first access).
  Tensor& grad_slot(int id) {
    auto& n = nodes_[static_cast<std::size_t>(id)];
    const Tensor& v = n.ref ? *n.ref : n.value;
    if (n.grad.empty() && !v.empty()) n.grad = Tensor(v.shape());
    return n.grad;
  }

  /// Gradient of a node after backward(); nullptr if none flowed to it.
  const Tensor* grad(Var v) const {
    const auto& n = nodes_[static_cast<std::size_t>(v.id)];
    return n.grad.empty() ? nullptr : &n.grad;
  }

  /// Accumulates d(loss)/d(param) into every reachable, non-frozen parameter.
  void backward(Var loss) {
    check_owner(loss);
    if (backward_done_) throw ConfigError("backward() already ran on this tape");
    const auto& lv = value(loss);
    if (lv.size() != 1) throw ConfigError("backward() needs a scalar loss, got " + shape_str(lv.shape()));
    backward_done_ = true;
    if (!requires_grad(loss)) return;
    grad_slot(loss.id)[0] = S(1);
    for (int i = loss.id; i >= 0; --i) {
      auto& n = nodes_[static_cast<std::size_t>(i)];
      if (!n.requires_grad || n.grad.empty()) continue;
      if (n.backward) n.backward(*this, i);
      if (n.param) {
        auto dst = n.param->grad.data();
        auto src = n.grad.data();
        for (std::size_t k = 0; k < dst.size(); ++k) dst[k] += src[k];
      }
    }
  }

  std::size_t node_count() const noexcept { return nodes_.size(); }

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    bool requires_grad = false;
    Parameter<S>* param = nullptr;
    BackwardFn backward;
    std::vector<int> inputs;
    const Tensor* ref = nullptr;
  };

  void check_owner(Var v) const {
    if (v.tape != this || v.id < 0 || static_cast<std::size_t>(v.id) >= nodes_.size()) {
      throw ConfigError("variable does not belong to this tape");
    }
  }

  std::deque<Node> nodes_;
  bool grad_enabled_;
  bool backward_done_ = false;
};

using Tape = BasicTape<float>;
using Var = BasicVar<float>;

namespace detail {

template <typename S>
using RowMat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename S>
using MatMap = Eigen::Map<RowMat<S>>;
template <typename S>
using ConstMatMap = Eigen::Map<const RowMat<S>>;

template <typename S>
void require_same_shape(const char* op, const BasicTensor<S>& a, const BasicTensor<S>& b) {
  if (a.shape() != b.shape()) {
    throw ConfigError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
}

template <typename S>
void require_rank(const char* op, const BasicTensor<S>& a, int rank) {
  if (a.rank() != rank) {
    throw ConfigError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " + shape_str(a.shape()));
  }
}

template <typename S>
void accumulate(BasicTensor<S>& dst, const BasicTensor<S>& src) {
  auto d = dst.data();
  auto s = src.data();
  for (std::size_t i = 0; i < d.size(); ++i) d[i] += s[i];
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise and reductions

template <typename S>
BasicVar<S> add(BasicVar<S> a, BasicVar<S> b) {
  auto& t = *a.tape;
  detail::require_same_shape("add", a.value(), b.value());
  BasicTensor<S> out = a.value();
  detail::accumulate(out, b.value());
  return t.push(std::move(out), {a, b}, [a, b](BasicTape<S>& tp, int self) {
    const auto& g = tp.grad_slot(self);
    if (tp.requires_grad(a)) detail::accumulate(tp.grad_slot(a.id), g);
    if (tp.requires_grad(b)) detail::accumulate(tp.grad_slot(b.id), g);
  });
}

template <typename S>
BasicVar<S> sub(BasicVar<S> a, BasicVar<S> b) {
  auto& t = *a.tape;
  detail::require_same_shape("sub", a.value(), b.value());
  BasicTensor<S> out = a.value();
  auto o = out.data();
  auto bv = b.value().data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] -= bv[i];
  return t.push(std::move(out), {a, b}, [a, b](BasicTape<S>& tp, int self) {
    const auto& g = tp.grad_slot(self);
    if (tp.requires_grad(a)) detail::accumulate(tp.grad_slot(a.id), g);
    if (tp.requires_grad(b)) {
      auto db = tp.grad_slot(b.id).data();
      for (std::size_t i = 0; i < db.size(); ++i) db[i] -= g[i];
    }
  });
}

template <typename S>
BasicVar<S> mul(BasicVar<S> a, BasicVar<S> b) {
  auto& t = *a.tape;
  detail::require_same_shape("mul", a.value(), b.value());
  BasicTensor<S> out = a.value();
  auto o = out.data();
  auto bv = b.value().data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] *= bv[i];
  return t.push(std::move(out), {a, b}, [a, b](BasicTape<S>& tp, int self) {
    const auto& g = tp.grad_slot(self);
    if (tp.requires_grad(a)) {
      auto da = tp.grad_slot(a.id).data();
      auto bv2 = tp.value(b).data();
      for (std::size_t i = 0; i < da.size(); ++i) da[i] += g[i] * bv2[i];
    }
    if (tp.requires_grad(b)) {
      auto db = tp.grad_slot(b.id).data();
      auto av = tp.value(a).data();
      for (std::size_t i = 0; i < db.size(); ++i) db[i] += g[i] * av[i];
    }
  });
}

template <typename S>
BasicVar<S> scale(BasicVar<S> a, S factor) {
  auto& t = *a.tape;
  BasicTensor<S> out = a.value();
  for (auto& v : out.data()) v *= factor;
  return t.push(std::move(out), {a}, [a, factor](BasicTape<S>& tp, int self) {
    const auto& g = tp.grad_slot(self);
    auto da = tp.grad_slot(a.id).data();
    for (std::size_t i = 0; i < da.size(); ++i) da[i] += factor * g[i];
  });
}

template <typename S>
BasicVar<S> add_scalar(BasicVar<S> a, S c) {
  auto& t = *a.tape;
  BasicTensor<S> out = a.value();
  for (auto& v : out.data()) v += c;
  return t.push(std::move(out), {a}, [a](BasicTape<S>& tp, int self) {
    detail::accumulate(tp.grad_slot(a.id), tp.grad_slot(self));
  });
}

template <typename S>
BasicVar<S> sum(BasicVar<S> a) {
  auto& t = *a.tape;
  S acc = 0;
  for (S v : a.value().data()) acc += v;
  return t.push(BasicTensor<S>::scalar(acc), {a}, [a](BasicTape<S>& tp, int self) {
    S g = tp.grad_slot(self)[0];
    for (auto& v : tp.grad_slot(a.id).data()) v += g;
  });
}

template <typename S>
BasicVar<S> mean(BasicVar<S> a) {
  const auto n = static_cast<S>(a.value().size());
  if (a.value().empty()) throw ConfigError("mean of empty tensor");
  return scale(sum(a), S(1) / n);
}

template <typename S>
BasicVar<S> reshape(BasicVar<S> a, Shape shape) {
  auto& t = *a.tape;
  BasicTensor<S> out = a.value().reshaped(std::move(shape));
  return t.push(std::move(out), {a}, [a](BasicTape<S>& tp, int self) {
    auto da = tp.grad_slot(a.id).data();
    const auto& g = tp.grad_slot(self);
    for (std::size_t i = 0; i < da.size(); ++i) da[i] += g[i];
  });
}

/// [N, ...] -> [N, prod(...)]
template <typename S>
BasicVar<S> flatten(BasicVar<S> a) {
  const auto& sh = a.value().shape();
  if (sh.empty()) throw ConfigError("flatten of rank-0 tensor");
  int n = sh[0];
  int rest = n == 0 ? 0 : static_cast<int>(a.value().size() / static_cast<std::size_t>(n));
  return reshape(a, Shape{n, rest});
}

template <typename S>
BasicVar<S> relu(BasicVar<S> a) {
  auto& t = *a.tape;
  BasicTensor<S> out = a.value();
  for (auto& v : out.data()) v = v > S(0) ? v : S(0);
  return t.push(std::move(out), {a}, [a](BasicTape<S>& tp, int self) {
    const auto& g = tp.grad_slot(self);
    const auto& y = tp.value(self);
    auto da = tp.grad_slot(a.id).data();
    for (std::size_t i = 0; i < da.size(); ++i)
      if (y[i] > S(0)) da[i] += g[i];
  });
}

/// Gradient passes only where lo <= x <= hi.
template <typename S>
BasicVar<S> clamp(BasicVar<S> a, S lo, S hi) {
  auto& t = *a.tape;
  BasicTensor<S> out = a.value();
  for (auto& v : out.data()) v = std::min(hi, std::max(lo, v));
  return t.push(std::move(out), {a}, [a, lo, hi](BasicTape<S>& tp, int self) {
    const auto& g = tp.grad_slot(self);
    const auto& x = tp.value(a);
    auto da = tp.grad_slot(a.id).data();
    for (std::size_t i = 0; i < da.size(); ++i)
      if (x[i] >= lo && x[i] <= hi) da[i] += g[i];
  });
}

// ---------------------------------------------------------------------------
// Linear algebra

/// [N, K] x [K, M] -> [N, M]
template <typename S>
BasicVar<S> matmul(BasicVar<S> a, BasicVar<S> b) {
  auto& t = *a.tape;
  const auto& av = a.value();
  const auto& bv = b.value();
  if (av.rank() != 2 || bv.rank() != 2 || av.dim(1) != bv.dim(0)) {
    throw ConfigError("matmul: shape mismatch " + shape_str(av.shape()) + " x " + shape_str(bv.shape()));
  }
  const int n = av.dim(0), k = av.dim(1), m = bv.dim(1);
  BasicTensor<S> out(Shape{n, m});
  detail::MatMap<S>(out.raw(), n, m).noalias() =
      detail::ConstMatMap<S>(av.raw(), n, k) * detail::ConstMatMap<S>(bv.raw(), k, m);
  return t.push(std::move(out), {a, b}, [a, b, n, k, m](BasicTape<S>& tp, int self) {
    detail::ConstMatMap<S> g(tp.grad_slot(self).raw(), n, m);
    if (tp.requires_grad(a)) {
      detail::MatMap<S>(tp.grad_slot(a.id).raw(), n, k).noalias() +=
          g * detail::ConstMatMap<S>(tp.value(b).raw(), k, m).transpose();
    }
    if (tp.requires_grad(b)) {
      detail::MatMap<S>(tp.grad_slot(b.id).raw(), k, m).noalias() +=
          detail::ConstMatMap<S>(tp.value(a).raw(), n, k).transpose() * g;
    }
  });
}

/// Adds a per-channel bias: x is [N, C, ...], bias is [C].
template <typename S>
BasicVar<S> add_bias(BasicVar<S> x, BasicVar<S> bias) {
  auto& t = *x.tape;
  const auto& xv = x.value();
  const auto& bv = bias.value();
  if (xv.rank() < 2 || bv.rank() != 1 || bv.dim(0) != xv.dim(1)) {
    throw ConfigError("add_bias: shape mismatch " + shape_str(xv.shape()) + " + " + shape_str(bv.shape()));
  }
  const int n = xv.dim(0), c = xv.dim(1);
  const std::size_t inner = c == 0 || n == 0 ? 0 : xv.size() / (static_cast<std::size_t>(n) * c);
  BasicTensor<S> out = xv;
  S* o = out.raw();
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < c; ++j) {
      S bj = bv[static_cast<std::size_t>(j)];
      S* row = o + (static_cast<std::size_t>(i) * c + j) * inner;
      for (std::size_t q = 0; q < inner; ++q) row[q] += bj;
    }
  return t.push(std::move(out), {x, bias}, [x, bias, n, c, inner](BasicTape<S>& tp, int self) {
    const auto& g = tp.grad_slot(self);
    if (tp.requires_grad(x)) detail::accumulate(tp.grad_slot(x.id), g);
    if (tp.requires_grad(bias)) {
      auto db = tp.grad_slot(bias.id).data();
      const S* gp = g.raw();
      for (int i = 0; i < n; ++i)
        for (int j = 0; j < c; ++j) {
          const S* row = gp + (static_cast<std::size_t>(i) * c + j) * inner;
          S acc = 0;
          for (std::size_t q = 0; q < inner; ++q) acc += row[q];
          db[static_cast<std::size_t>(j)] += acc;
        }
    }
  });
}

/// Output spatial size of a valid (unpadded) convolution.
constexpr int conv_out_size(int in, int kernel, int stride) { return in < kernel ? 0 : (in - kernel) / stride + 1; }

/// Valid convolution: x [N, C, H, W], w [O, C, KH, KW] -> [N, O, OH, OW].
template <typename S>
BasicVar<S> conv2d(BasicVar<S> x, BasicVar<S> w, int stride) {
  auto& t = *x.tape;
  const auto& xv = x.value();
  const auto& wv = w.value();
  if (xv.rank() != 4 || wv.rank() != 4 || xv.dim(1) != wv.dim(1)) {
    throw ConfigError("conv2d: shape mismatch input " + shape_str(xv.shape()) + " kernel " + shape_str(wv.shape()));
  }
  if (stride < 1) throw ConfigError("conv2d: stride must be >= 1");
  const int n = xv.dim(0), c = xv.dim(1), h = xv.dim(2), wd = xv.dim(3);
  const int o = wv.dim(0), kh = wv.dim(2), kw = wv.dim(3);
  if (h < kh || wd < kw) {
    throw ConfigError("conv2d: input " + shape_str(xv.shape()) + " smaller than kernel " + shape_str(wv.shape()));
  }
  const int oh = conv_out_size(h, kh, stride), ow = conv_out_size(wd, kw, stride);
  const int p = oh * ow;
  const int rows = c * kh * kw;
  const int cols_n = n * p;

  auto cols = std::make_shared<std::vector<S>>(static_cast<std::size_t>(rows) * cols_n);
  {
    const S* xp = xv.raw();
    S* cp = cols->data();
    for (int ci = 0; ci < c; ++ci)
      for (int ki = 0; ki < kh; ++ki)
        for (int kj = 0; kj < kw; ++kj) {
          S* crow = cp + static_cast<std::size_t>((ci * kh + ki) * kw + kj) * cols_n;
          for (int ni = 0; ni < n; ++ni) {
            const S* img = xp + (static_cast<std::size_t>(ni) * c + ci) * h * wd;
            S* dst = crow + static_cast<std::size_t>(ni) * p;
            for (int y = 0; y < oh; ++y) {
              const S* src = img + static_cast<std::size_t>(y * stride + ki) * wd + kj;
              for (int xq = 0; xq < ow; ++xq) dst[y * ow + xq] = src[xq * stride];
            }
          }
        }
  }

  detail::RowMat<S> y = detail::ConstMatMap<S>(wv.raw(), o, rows) * detail::ConstMatMap<S>(cols->data(), rows, cols_n);
  BasicTensor<S> out(Shape{n, o, oh, ow});
  for (int ni = 0; ni < n; ++ni)
    for (int oi = 0; oi < o; ++oi)
      std::copy_n(y.data() + static_cast<std::size_t>(oi) * cols_n + static_cast<std::size_t>(ni) * p, p,
                  out.raw() + (static_cast<std::size_t>(ni) * o + oi) * p);

  return t.push(std::move(out), {x, w},
                [x, w, cols, n, c, h, wd, o, kh, kw, oh, ow, p, rows, cols_n, stride](BasicTape<S>& tp, int self) {
                  const auto& g = tp.grad_slot(self);
                  detail::RowMat<S> dy(o, cols_n);
                  for (int ni = 0; ni < n; ++ni)
                    for (int oi = 0; oi < o; ++oi)
                      std::copy_n(g.raw() + (static_cast<std::size_t>(ni) * o + oi) * p, p,
                                  dy.data() + static_cast<std::size_t>(oi) * cols_n + static_cast<std::size_t>(ni) * p);
                  detail::ConstMatMap<S> colm(cols->data(), rows, cols_n);
                  if (tp.requires_grad(w)) {
                    detail::MatMap<S>(tp.grad_slot(w.id).raw(), o, rows).noalias() += dy * colm.transpose();
                  }
                  if (tp.requires_grad(x)) {
                    detail::RowMat<S> dcols =
                        detail::ConstMatMap<S>(tp.value(w).raw(), o, rows).transpose() * dy;
                    S* dx = tp.grad_slot(x.id).raw();
                    for (int ci = 0; ci < c; ++ci)
                      for (int ki = 0; ki < kh; ++ki)
                        for (int kj = 0; kj < kw; ++kj) {
                          const S* crow = dcols.data() + static_cast<std::size_t>((ci * kh + ki) * kw + kj) * cols_n;
                          for (int ni = 0; ni < n; ++ni) {
                            S* img = dx + (static_cast<std::size_t>(ni) * c + ci) * h * wd;
                            const S* src = crow + static_cast<std::size_t>(ni) * p;
                            for (int yq = 0; yq < oh; ++yq) {
                              S* drow = img + static_cast<std::size_t>(yq * stride + ki) * wd + kj;
                              for (int xq = 0; xq < ow; ++xq) drow[xq * stride] += src[yq * ow + xq];
                            }
                          }
                        }
                  }
                });
}

// ---------------------------------------------------------------------------
// Row-wise distributions over [N, K]

template <typename S>
BasicVar<S> softmax(BasicVar<S> a) {
  auto& t = *a.tape;
  detail::require_rank("softmax", a.value(), 2);
  const int n = a.value().dim(0), k = a.value().dim(1);
  BasicTensor<S> out = a.value();
  for (int i = 0; i < n; ++i) {
    S* row = out.raw() + static_cast<std::size_t>(i) * k;
    S mx = *std::max_element(row, row + k);
    S z = 0;
    for (int j = 0; j < k; ++j) z += (row[j] = std::exp(row[j] - mx));
    for (int j = 0; j < k; ++j) row[j] /= z;
  }
  return t.push(std::move(out), {a}, [a, n, k](BasicTape<S>& tp, int self) {
    const auto& g = tp.grad_slot(self);
    const auto& y = tp.value(self);
    auto& da = tp.grad_slot(a.id);
    for (int i = 0; i < n; ++i) {
      const std::size_t off = static_cast<std::size_t>(i) * k;
      S dot = 0;
      for (int j = 0; j < k; ++j) dot += g[off + j] * y[off + j];
      for (int j = 0; j < k; ++j) da[off + j] += y[off + j] * (g[off + j] - dot);
    }
  });
}

template <typename S>
BasicVar<S> log_softmax(BasicVar<S> a) {
  auto& t = *a.tape;
  detail::require_rank("log_softmax", a.value(), 2);
  const int n = a.value().dim(0), k = a.value().dim(1);
  BasicTensor<S> out = a.value();
  for (int i = 0; i < n; ++i) {
    S* row = out.raw() + static_cast<std::size_t>(i) * k;
    S mx = *std::max_element(row, row + k);
    S z = 0;
    for (int j = 0; j < k; ++j) z += std::exp(row[j] - mx);
    S lse = mx + std::log(z);
    for (int j = 0; j < k; ++j) row[j] -= lse;
  }
  return t.push(std::move(out), {a}, [a, n, k](BasicTape<S>& tp, int self) {
    const auto& g = tp.grad_slot(self);
    const auto& y = tp.value(self);
    auto& da = tp.grad_slot(a.id);
    for (int i = 0; i < n; ++i) {
      const std::size_t off = static_cast<std::size_t>(i) * k;
      S gs = 0;
      for (int j = 0; j < k; ++j) gs += g[off + j];
      for (int j = 0; j < k; ++j) da[off + j] += g[off + j] - std::exp(y[off + j]) * gs;
    }
  });
}

/// Entropy of the categorical distribution softmax(logits) per row -> [N].
template <typename S>
BasicVar<S> categorical_entropy(BasicVar<S> logits) {
  auto& t = *logits.tape;
  detail::require_rank("categorical_entropy", logits.value(), 2);
  const int n = logits.value().dim(0), k = logits.value().dim(1);
  auto probs = std::make_shared<std::vector<S>>(static_cast<std::size_t>(n) * k);
  auto logp = std::make_shared<std::vector<S>>(static_cast<std::size_t>(n) * k);
  BasicTensor<S> out(Shape{n});
  const auto& lv = logits.value();
  for (int i = 0; i < n; ++i) {
    const std::size_t off = static_cast<std::size_t>(i) * k;
    S mx = lv[off];
    for (int j = 1; j < k; ++j) mx = std::max(mx, lv[off + j]);
    S z = 0;
    for (int j = 0; j < k; ++j) z += std::exp(lv[off + j] - mx);
    S lse = mx + std::log(z);
    S hsum = 0;
    for (int j = 0; j < k; ++j) {
      (*logp)[off + j] = lv[off + j] - lse;
      (*probs)[off + j] = std::exp((*logp)[off + j]);
      hsum -= (*probs)[off + j] * (*logp)[off + j];
    }
    out[static_cast<std::size_t>(i)] = hsum;
  }
  return t.push(std::move(out), {logits}, [logits, probs, logp, n, k](BasicTape<S>& tp, int self) {
    const auto& g = tp.grad_slot(self);
    const auto& hv = tp.value(self);
    auto& da = tp.grad_slot(logits.id);
    for (int i = 0; i < n; ++i) {
      const std::size_t off = static_cast<std::size_t>(i) * k;
      const S gi = g[static_cast<std::size_t>(i)];
      const S hi = hv[static_cast<std::size_t>(i)];
      for (int j = 0; j < k; ++j) da[off + j] -= gi * (*probs)[off + j] * ((*logp)[off + j] + hi);
    }
  });
}

/// Picks x[i, index[i]] -> [N].
template <typename S>
BasicVar<S> gather(BasicVar<S> x, std::vector<int> index) {
  auto& t = *x.tape;
  detail::require_rank("gather", x.value(), 2);
  const int n = x.value().dim(0), k = x.value().dim(1);
  if (static_cast<int>(index.size()) != n) {
    throw ConfigError("gather: " + std::to_string(index.size()) + " indices for " + shape_str(x.value().shape()));
  }
  BasicTensor<S> out(Shape{n});
  for (int i = 0; i < n; ++i) {
    int j = index[static_cast<std::size_t>(i)];
    if (j < 0 || j >= k) throw ConfigError("gather: index " + std::to_string(j) + " out of range " + std::to_string(k));
    out[static_cast<std::size_t>(i)] = x.value()[static_cast<std::size_t>(i) * k + j];
  }
  return t.push(std::move(out), {x}, [x, index = std::move(index), k](BasicTape<S>& tp, int self) {
    const auto& g = tp.grad_slot(self);
    auto& dx = tp.grad_slot(x.id);
    for (std::size_t i = 0; i < index.size(); ++i) dx[i * k + static_cast<std::size_t>(index[i])] += g[i];
  });
}

/// Q = V + A - mean(A) with V [N, 1], A [N, K].
template <typename S>
BasicVar<S> dueling_combine(BasicVar<S> value, BasicVar<S> adv) {
  auto& t = *value.tape;
  const auto& vv = value.value();
  const auto& av = adv.value();
  if (av.rank() != 2 || vv.rank() != 2 || vv.dim(1) != 1 || vv.dim(0) != av.dim(0)) {
    throw ConfigError("dueling_combine: shape mismatch V " + shape_str(vv.shape()) + " A " + shape_str(av.shape()));
  }
  const int n = av.dim(0), k = av.dim(1);
  BasicTensor<S> out(Shape{n, k});
  for (int i = 0; i < n; ++i) {
    const std::size_t off = static_cast<std::size_t>(i) * k;
    S m = 0;
    for (int j = 0; j < k; ++j) m += av[off + j];
    m /= static_cast<S>(k);
    for (int j = 0; j < k; ++j) out[off + j] = vv[static_cast<std::size_t>(i)] + av[off + j] - m;
  }
  return t.push(std::move(out), {value, adv}, [value, adv, n, k](BasicTape<S>& tp, int self) {
    const auto& g = tp.grad_slot(self);
    for (int i = 0; i < n; ++i) {
      const std::size_t off = static_cast<std::size_t>(i) * k;
      S gs = 0;
      for (int j = 0; j < k; ++j) gs += g[off + j];
      if (tp.requires_grad(value)) tp.grad_slot(value.id)[static_cast<std::size_t>(i)] += gs;
      if (tp.requires_grad(adv)) {
        auto& da = tp.grad_slot(adv.id);
        const S gm = gs / static_cast<S>(k);
        for (int j = 0; j < k; ++j) da[off + j] += g[off + j] - gm;
      }
    }
  });
}

/// Diagonal Gaussian log-density per row: mean [N, D], log_std [D], actions [N, D] -> [N].
template <typename S>
BasicVar<S> gaussian_log_prob(BasicVar<S> mean_v, BasicVar<S> log_std, const BasicTensor<S>& actions) {
  auto& t = *mean_v.tape;
  const auto& mv = mean_v.value();
  const auto& lv = log_std.value();
  if (mv.rank() != 2 || lv.rank() != 1 || lv.dim(0) != mv.dim(1) || actions.shape() != mv.shape()) {
    throw ConfigError("gaussian_log_prob: shape mismatch mean " + shape_str(mv.shape()) + " log_std " +
                      shape_str(lv.shape()) + " actions " + shape_str(actions.shape()));
  }
  const int n = mv.dim(0), d = mv.dim(1);
  constexpr double kHalfLog2Pi = 0.91893853320467274178;
  BasicTensor<S> out(Shape{n});
  for (int i = 0; i < n; ++i) {
    S acc = 0;
    for (int j = 0; j < d; ++j) {
      const std::size_t q = static_cast<std::size_t>(i) * d + j;
      const S z = (actions[q] - mv[q]) * std::exp(-lv[static_cast<std::size_t>(j)]);
      acc += S(-0.5) * z * z - lv[static_cast<std::size_t>(j)] - static_cast<S>(kHalfLog2Pi);
    }
    out[static_cast<std::size_t>(i)] = acc;
  }
  return t.push(std::move(out), {mean_v, log_std}, [mean_v, log_std, actions, n, d](BasicTape<S>& tp, int self) {
    const auto& g = tp.grad_slot(self);
    const auto& mv2 = tp.value(mean_v);
    const auto& lv2 = tp.value(log_std);
    for (int i = 0; i < n; ++i) {
      const S gi = g[static_cast<std::size_t>(i)];
      for (int j = 0; j < d; ++j) {
        const std::size_t q = static_cast<std::size_t>(i) * d + j;
        const S inv_var = std::exp(S(-2) * lv2[static_cast<std::size_t>(j)]);
        const S diff = actions[q] - mv2[q];
        if (tp.requires_grad(mean_v)) tp.grad_slot(mean_v.id)[q] += gi * diff * inv_var;
        if (tp.requires_grad(log_std))
          tp.grad_slot(log_std.id)[static_cast<std::size_t>(j)] += gi * (diff * diff * inv_var - S(1));
      }
    }
  });
}

// ---------------------------------------------------------------------------
// Losses (all return a scalar [1])

/// Mean squared error over all elements.
template <typename S>
BasicVar<S> mse(BasicVar<S> a, BasicVar<S> b) {
  auto& t = *a.tape;
  detail::require_same_shape("mse", a.value(), b.value());
  const std::size_t n = a.value().size();
  if (n == 0) throw ConfigError("mse of empty tensors");
  S acc = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const S d = a.value()[i] - b.value()[i];
    acc += d * d;
  }
  return t.push(BasicTensor<S>::scalar(acc / static_cast<S>(n)), {a, b}, [a, b, n](BasicTape<S>& tp, int self) {
    const S g = tp.grad_slot(self)[0] * S(2) / static_cast<S>(n);
    const auto& av = tp.value(a);
    const auto& bv = tp.value(b);
    for (std::size_t i = 0; i < n; ++i) {
      const S d = g * (av[i] - bv[i]);
      if (tp.requires_grad(a)) tp.grad_slot(a.id)[i] += d;
      if (tp.requires_grad(b)) tp.grad_slot(b.id)[i] -= d;
    }
  });
}

/// Mean Huber (smooth L1) loss with threshold `delta`.
template <typename S>
BasicVar<S> huber(BasicVar<S> a, BasicVar<S> b, S delta = S(1)) {
  auto& t = *a.tape;
  detail::require_same_shape("huber", a.value(), b.value());
  const std::size_t n = a.value().size();
  if (n == 0) throw ConfigError("huber of empty tensors");
  S acc = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const S d = a.value()[i] - b.value()[i];
    const S ad = std::abs(d);
    acc += ad <= delta ? S(0.5) * d * d : delta * (ad - S(0.5) * delta);
  }
  return t.push(BasicTensor<S>::scalar(acc / static_cast<S>(n)), {a, b}, [a, b, n, delta](BasicTape<S>& tp, int self) {
    const S g = tp.grad_slot(self)[0] / static_cast<S>(n);
    const auto& av = tp.value(a);
    const auto& bv = tp.value(b);
    for (std::size_t i = 0; i < n; ++i) {
      const S d = av[i] - bv[i];
      const S dd = g * (std::abs(d) <= delta ? d : (d > 0 ? delta : -delta));
      if (tp.requires_grad(a)) tp.grad_slot(a.id)[i] += dd;
      if (tp.requires_grad(b)) tp.grad_slot(b.id)[i] -= dd;
    }
  });
}

/// Clipped surrogate policy loss -mean(min(r*A, clip(r, 1-eps, 1+eps)*A)),
/// with r = exp(logp - old_logp).
template <typename S>
BasicVar<S> clipped_surrogate(BasicVar<S> logp, std::vector<S> old_logp, std::vector<S> adv, S clip_eps) {
  auto& t = *logp.tape;
  const auto& lv = logp.value();
  const std::size_t n = lv.size();
  if (lv.rank() != 1 || old_logp.size() != n || adv.size() != n || n == 0) {
    throw ConfigError("clipped_surrogate: shape mismatch logp " + shape_str(lv.shape()) + " old " +
                      std::to_string(old_logp.size()) + " adv " + std::to_string(adv.size()));
  }
  auto ratio = std::make_shared<std::vector<S>>(n);
  auto unclipped = std::make_shared<std::vector<char>>(n);
  S acc = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const S r = std::exp(lv[i] - old_logp[i]);
    if (!std::isfinite(r)) {
      throw NumericError("clipped_surrogate: non-finite probability ratio at row " + std::to_string(i) +
                         " (logp " + std::to_string(lv[i]) + ", old " + std::to_string(old_logp[i]) + ")");
    }
    const S rc = std::min(S(1) + clip_eps, std::max(S(1) - clip_eps, r));
    const S u = r * adv[i], c = rc * adv[i];
    (*ratio)[i] = r;
    (*unclipped)[i] = u <= c;
    acc += std::min(u, c);
  }
  return t.push(BasicTensor<S>::scalar(-acc / static_cast<S>(n)), {logp},
                [logp, ratio, unclipped, adv = std::move(adv), n](BasicTape<S>& tp, int self) {
                  const S g = tp.grad_slot(self)[0] / static_cast<S>(n);
                  auto& dl = tp.grad_slot(logp.id);
                  for (std::size_t i = 0; i < n; ++i)
                    if ((*unclipped)[i]) dl[i] -= g * (*ratio)[i] * adv[i];
                });
}

}  // namespace actxfer
