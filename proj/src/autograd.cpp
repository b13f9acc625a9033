#include "icrit/autograd.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

namespace icrit {

namespace {

thread_local bool t_grad_enabled = true;

template <class T>
StopGradPin<T>*& active_pin() {
  thread_local StopGradPin<T>* pin = nullptr;
  return pin;
}

template <class T>
using NodePtr = std::shared_ptr<Node<T>>;

/// Builds a result node; wires inputs and the backward closure only if some
/// input needs a gradient and recording is enabled.
template <class T, class Fn>
Var<T> make_result(Tensor<T> value, std::initializer_list<const Var<T>*> inputs, Fn&& bw) {
  auto node = std::make_shared<Node<T>>();
  node->value = std::move(value);
  bool needs = false;
  if (t_grad_enabled) {
    for (const auto* in : inputs) needs = needs || in->requires_grad();
  }
  if (needs) {
    node->requires_grad = true;
    node->inputs.reserve(inputs.size());
    for (const auto* in : inputs) node->inputs.push_back(in->node());
    node->backward = std::forward<Fn>(bw);
  }
  return Var<T>(std::move(node));
}

/// Gradient buffer of input i, or nullptr when it does not track gradients.
template <class T>
T* grad_of(Node<T>& self, std::size_t i) {
  auto& in = *self.inputs[i];
  if (!in.requires_grad) return nullptr;
  return in.grad_buffer().data();
}

void require(bool ok, const std::string& what) {
  if (!ok) throw DimensionError(what);
}

template <class T>
void require_same(const Var<T>& a, const Var<T>& b, const char* op) {
  require(a.shape() == b.shape(), std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                                      shape_str(b.shape()));
}

template <class T>
void require_rank2(const Var<T>& x, const char* op) {
  require(x.shape().size() == 2, std::string(op) + ": expected rank-2 tensor, got " + shape_str(x.shape()));
}

template <class T>
T sigmoid(T x) {
  return T(1) / (T(1) + std::exp(-x));
}

/// Softmax of one row with additive mask; masked keys get exactly 0.
/// Returns false if every key is masked.
template <class T>
bool softmax_row(const T* s, const T* m, T* out, std::size_t n) {
  const T thr = mask_threshold<T>();
  T mx = std::numeric_limits<T>::lowest();
  bool any = false;
  for (std::size_t j = 0; j < n; ++j) {
    if (m && m[j] <= thr) continue;
    const T z = m ? s[j] + m[j] : s[j];
    if (!any || z > mx) mx = z;
    any = true;
  }
  if (!any) return false;
  T total = T(0);
  for (std::size_t j = 0; j < n; ++j) {
    if (m && m[j] <= thr) {
      out[j] = T(0);
    } else {
      const T z = m ? s[j] + m[j] : s[j];
      out[j] = std::exp(z - mx);
    }
    total += out[j];
  }
  const T inv = T(1) / total;
  for (std::size_t j = 0; j < n; ++j) out[j] *= inv;
  return true;
}

/// In-place softmax backward for one row: g <- p * (g - <p, g>).
template <class T>
void softmax_row_backward(const T* p, T* g, std::size_t n) {
  T dot = T(0);
  for (std::size_t j = 0; j < n; ++j) dot += p[j] * g[j];
  for (std::size_t j = 0; j < n; ++j) g[j] = p[j] * (g[j] - dot);
}

}  // namespace

// ---------------------------------------------------------------------------

template <class T>
Var<T>::Var(Tensor<T> value, bool requires_grad) : node_(std::make_shared<Node<T>>()) {
  node_->value = std::move(value);
  node_->requires_grad = requires_grad;
}

template <class T>
T Var<T>::item() const {
  if (size() != 1) throw DimensionError("item() on tensor of shape " + shape_str(shape()));
  return node_->value[0];
}

template <class T>
void backward(const Var<T>& root) {
  if (root.size() != 1) throw DimensionError("backward() needs a scalar root, got " + shape_str(root.shape()));
  if (!root.requires_grad()) return;

  // Iterative post-order DFS gives a topological order.
  std::vector<Node<T>*> order;
  std::unordered_set<Node<T>*> seen;
  std::vector<std::pair<Node<T>*, std::size_t>> stack;
  stack.emplace_back(root.node().get(), 0);
  seen.insert(root.node().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->inputs.size()) {
      Node<T>* child = node->inputs[next++].get();
      if (child->requires_grad && seen.insert(child).second) stack.emplace_back(child, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  root.node()->grad_buffer()[0] += T(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node<T>* node = *it;
    if (node->backward && !node->grad.empty()) node->backward(*node);
  }
}

NoGradGuard::NoGradGuard() : previous_(t_grad_enabled) { t_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { t_grad_enabled = previous_; }
bool grad_enabled() { return t_grad_enabled; }

const char* group_name(Group g) {
  switch (g) {
    case Group::kTheta:
      return "theta";
    case Group::kPhi:
      return "phi";
    case Group::kCritic:
      return "r";
    case Group::kPsi:
      return "psi";
    case Group::kChi:
      return "chi";
  }
  return "?";
}

std::string GroupSet::str() const {
  std::string s = "{";
  for (auto g : {Group::kTheta, Group::kPhi, Group::kCritic, Group::kPsi, Group::kChi}) {
    if (!contains(g)) continue;
    if (s.size() > 1) s += ",";
    s += group_name(g);
  }
  return s + "}";
}

template <class T>
Var<T> Tape<T>::operator()(const Parameter<T>& p) {
  if (auto it = bound_.find(&p); it != bound_.end()) return it->second;
  Var<T> v(p.value, tracks(p) && t_grad_enabled);
  bound_.emplace(&p, v);
  return v;
}

template <class T>
std::span<const T> Tape<T>::grad(const Parameter<T>& p) const {
  auto it = bound_.find(&p);
  if (it == bound_.end()) return {};
  return it->second.grad();
}

template <class T>
bool Tape<T>::has_grad_buffer(const Parameter<T>& p) const {
  return !grad(p).empty();
}

template <class T>
StopGradPin<T>::StopGradPin() : previous_(active_pin<T>()) {
  active_pin<T>() = this;
}

template <class T>
StopGradPin<T>::~StopGradPin() {
  active_pin<T>() = previous_;
}

template <class T>
Tensor<T> StopGradPin<T>::on_stop_grad(const Tensor<T>& value) {
  if (mode_ == Mode::kRecord) {
    values_.push_back(value);
    return value;
  }
  if (cursor_ >= values_.size() || values_[cursor_].shape() != value.shape()) {
    throw ConfigError("stop-gradient replay diverged from the recorded evaluation");
  }
  return values_[cursor_++];
}

// ---------------------------------------------------------------------------
// Kernels

template <class T>
void gemm_nn(const T* __restrict a, const T* __restrict b, T* __restrict c, std::size_t m, std::size_t k,
             std::size_t n, bool accumulate) {
  for (std::size_t i = 0; i < m; ++i) {
    T* __restrict crow = c + i * n;
    if (!accumulate) std::fill(crow, crow + n, T(0));
    const T* arow = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const T av = arow[p];
      const T* __restrict brow = b + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

template <class T>
void gemm_nt(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n, bool accumulate) {
  std::vector<T> bt(k * n);
  for (std::size_t j = 0; j < n; ++j)
    for (std::size_t p = 0; p < k; ++p) bt[p * n + j] = b[j * k + p];
  gemm_nn(a, bt.data(), c, m, k, n, accumulate);
}

template <class T>
void gemm_tn(const T* __restrict a, const T* __restrict b, T* __restrict c, std::size_t m, std::size_t k,
             std::size_t n, bool accumulate) {
  if (!accumulate) std::fill(c, c + m * n, T(0));
  for (std::size_t p = 0; p < k; ++p) {
    const T* arow = a + p * m;
    const T* __restrict brow = b + p * n;
    for (std::size_t i = 0; i < m; ++i) {
      const T av = arow[i];
      T* __restrict crow = c + i * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// ---------------------------------------------------------------------------
// Ops

template <class T>
Var<T> constant(Tensor<T> value) {
  return Var<T>(std::move(value), false);
}

template <class T>
Var<T> stop_grad(const Var<T>& x) {
  if (auto* pin = active_pin<T>()) return Var<T>(pin->on_stop_grad(x.value()), false);
  return Var<T>(x.value(), false);
}

template <class T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  require_same(a, b, "add");
  Tensor<T> out(a.shape());
  const auto n = out.size();
  for (std::size_t i = 0; i < n; ++i) out[i] = a.value()[i] + b.value()[i];
  return make_result<T>(std::move(out), {&a, &b}, [n](Node<T>& self) {
    for (std::size_t k = 0; k < 2; ++k)
      if (T* g = grad_of(self, k))
        for (std::size_t i = 0; i < n; ++i) g[i] += self.grad[i];
  });
}

template <class T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
  require_same(a, b, "sub");
  Tensor<T> out(a.shape());
  const auto n = out.size();
  for (std::size_t i = 0; i < n; ++i) out[i] = a.value()[i] - b.value()[i];
  return make_result<T>(std::move(out), {&a, &b}, [n](Node<T>& self) {
    if (T* g = grad_of(self, 0))
      for (std::size_t i = 0; i < n; ++i) g[i] += self.grad[i];
    if (T* g = grad_of(self, 1))
      for (std::size_t i = 0; i < n; ++i) g[i] -= self.grad[i];
  });
}

template <class T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  require_same(a, b, "mul");
  Tensor<T> out(a.shape());
  const auto n = out.size();
  for (std::size_t i = 0; i < n; ++i) out[i] = a.value()[i] * b.value()[i];
  return make_result<T>(std::move(out), {&a, &b}, [n](Node<T>& self) {
    const auto& av = self.inputs[0]->value;
    const auto& bv = self.inputs[1]->value;
    if (T* g = grad_of(self, 0))
      for (std::size_t i = 0; i < n; ++i) g[i] += self.grad[i] * bv[i];
    if (T* g = grad_of(self, 1))
      for (std::size_t i = 0; i < n; ++i) g[i] += self.grad[i] * av[i];
  });
}

template <class T>
Var<T> scale(const Var<T>& x, T s) {
  Tensor<T> out(x.shape());
  const auto n = out.size();
  for (std::size_t i = 0; i < n; ++i) out[i] = x.value()[i] * s;
  return make_result<T>(std::move(out), {&x}, [n, s](Node<T>& self) {
    if (T* g = grad_of(self, 0))
      for (std::size_t i = 0; i < n; ++i) g[i] += self.grad[i] * s;
  });
}

template <class T>
Var<T> add_scalar(const Var<T>& x, T s) {
  Tensor<T> out(x.shape());
  const auto n = out.size();
  for (std::size_t i = 0; i < n; ++i) out[i] = x.value()[i] + s;
  return make_result<T>(std::move(out), {&x}, [n](Node<T>& self) {
    if (T* g = grad_of(self, 0))
      for (std::size_t i = 0; i < n; ++i) g[i] += self.grad[i];
  });
}

template <class T>
Var<T> add_row(const Var<T>& x, const Var<T>& v) {
  require_rank2(x, "add_row");
  const std::size_t rows = x.shape()[0], d = x.shape()[1];
  require(v.size() == d, "add_row: vector of " + std::to_string(v.size()) + " for width " + std::to_string(d));
  Tensor<T> out(x.shape());
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t j = 0; j < d; ++j) out[r * d + j] = x.value()[r * d + j] + v.value()[j];
  return make_result<T>(std::move(out), {&x, &v}, [rows, d](Node<T>& self) {
    if (T* g = grad_of(self, 0))
      for (std::size_t i = 0; i < rows * d; ++i) g[i] += self.grad[i];
    if (T* g = grad_of(self, 1))
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t j = 0; j < d; ++j) g[j] += self.grad[r * d + j];
  });
}

template <class T>
Var<T> mul_row(const Var<T>& x, const Var<T>& v) {
  require_rank2(x, "mul_row");
  const std::size_t rows = x.shape()[0], d = x.shape()[1];
  require(v.size() == d, "mul_row: vector of " + std::to_string(v.size()) + " for width " + std::to_string(d));
  Tensor<T> out(x.shape());
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t j = 0; j < d; ++j) out[r * d + j] = x.value()[r * d + j] * v.value()[j];
  return make_result<T>(std::move(out), {&x, &v}, [rows, d](Node<T>& self) {
    const auto& xv = self.inputs[0]->value;
    const auto& vv = self.inputs[1]->value;
    if (T* g = grad_of(self, 0))
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t j = 0; j < d; ++j) g[r * d + j] += self.grad[r * d + j] * vv[j];
    if (T* g = grad_of(self, 1))
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t j = 0; j < d; ++j) g[j] += self.grad[r * d + j] * xv[r * d + j];
  });
}

template <class T>
Var<T> square(const Var<T>& x) {
  Tensor<T> out(x.shape());
  const auto n = out.size();
  for (std::size_t i = 0; i < n; ++i) out[i] = x.value()[i] * x.value()[i];
  return make_result<T>(std::move(out), {&x}, [n](Node<T>& self) {
    const auto& xv = self.inputs[0]->value;
    if (T* g = grad_of(self, 0))
      for (std::size_t i = 0; i < n; ++i) g[i] += self.grad[i] * T(2) * xv[i];
  });
}

template <class T>
Var<T> log1p(const Var<T>& x) {
  Tensor<T> out(x.shape());
  const auto n = out.size();
  for (std::size_t i = 0; i < n; ++i) out[i] = std::log1p(x.value()[i]);
  return make_result<T>(std::move(out), {&x}, [n](Node<T>& self) {
    const auto& xv = self.inputs[0]->value;
    if (T* g = grad_of(self, 0))
      for (std::size_t i = 0; i < n; ++i) g[i] += self.grad[i] / (T(1) + xv[i]);
  });
}

template <class T>
Var<T> silu(const Var<T>& x) {
  Tensor<T> out(x.shape());
  const auto n = out.size();
  for (std::size_t i = 0; i < n; ++i) out[i] = x.value()[i] * sigmoid(x.value()[i]);
  return make_result<T>(std::move(out), {&x}, [n](Node<T>& self) {
    const auto& xv = self.inputs[0]->value;
    if (T* g = grad_of(self, 0))
      for (std::size_t i = 0; i < n; ++i) {
        const T s = sigmoid(xv[i]);
        g[i] += self.grad[i] * s * (T(1) + xv[i] * (T(1) - s));
      }
  });
}

template <class T>
Var<T> gelu(const Var<T>& x) {
  constexpr T c = T(0.7978845608028654);  // sqrt(2/pi)
  constexpr T k = T(0.044715);
  Tensor<T> out(x.shape());
  const auto n = out.size();
  for (std::size_t i = 0; i < n; ++i) {
    const T v = x.value()[i];
    out[i] = T(0.5) * v * (T(1) + std::tanh(c * (v + k * v * v * v)));
  }
  return make_result<T>(std::move(out), {&x}, [n](Node<T>& self) {
    const auto& xv = self.inputs[0]->value;
    if (T* g = grad_of(self, 0))
      for (std::size_t i = 0; i < n; ++i) {
        const T v = xv[i];
        const T th = std::tanh(c * (v + k * v * v * v));
        const T dth = (T(1) - th * th) * c * (T(1) + T(3) * k * v * v);
        g[i] += self.grad[i] * (T(0.5) * (T(1) + th) + T(0.5) * v * dth);
      }
  });
}

template <class T>
Var<T> matmul(const Var<T>& a, const Var<T>& b) {
  require_rank2(a, "matmul");
  require_rank2(b, "matmul");
  const std::size_t m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
  require(b.shape()[0] == k, "matmul: inner extents " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  Tensor<T> out({m, n});
  gemm_nn(a.value().ptr(), b.value().ptr(), out.ptr(), m, k, n, false);
  return make_result<T>(std::move(out), {&a, &b}, [m, k, n](Node<T>& self) {
    const T* av = self.inputs[0]->value.ptr();
    const T* bv = self.inputs[1]->value.ptr();
    if (T* g = grad_of(self, 0)) gemm_nt(self.grad.data(), bv, g, m, n, k, true);
    if (T* g = grad_of(self, 1)) gemm_tn(av, self.grad.data(), g, k, m, n, true);
  });
}

template <class T>
Var<T> linear(const Var<T>& x, const Var<T>& w, const Var<T>& b) {
  require_rank2(x, "linear");
  require_rank2(w, "linear");
  const std::size_t rows = x.shape()[0], in = x.shape()[1], out_dim = w.shape()[1];
  require(w.shape()[0] == in, "linear: input width " + std::to_string(in) + " vs weight " + shape_str(w.shape()));
  const bool has_bias = b.defined();
  if (has_bias) require(b.size() == out_dim, "linear: bias size " + std::to_string(b.size()));
  Tensor<T> out({rows, out_dim});
  if (has_bias) {
    for (std::size_t r = 0; r < rows; ++r)
      std::copy(b.value().ptr(), b.value().ptr() + out_dim, out.ptr() + r * out_dim);
  }
  gemm_nn(x.value().ptr(), w.value().ptr(), out.ptr(), rows, in, out_dim, has_bias);
  auto bw = [rows, in, out_dim, has_bias](Node<T>& self) {
    const T* xv = self.inputs[0]->value.ptr();
    const T* wv = self.inputs[1]->value.ptr();
    if (T* g = grad_of(self, 0)) gemm_nt(self.grad.data(), wv, g, rows, out_dim, in, true);
    if (T* g = grad_of(self, 1)) gemm_tn(xv, self.grad.data(), g, in, rows, out_dim, true);
    if (has_bias)
      if (T* g = grad_of(self, 2))
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t j = 0; j < out_dim; ++j) g[j] += self.grad[r * out_dim + j];
  };
  if (has_bias) return make_result<T>(std::move(out), {&x, &w, &b}, bw);
  return make_result<T>(std::move(out), {&x, &w}, bw);
}

template <class T>
Var<T> layer_norm(const Var<T>& x, T eps) {
  require_rank2(x, "layer_norm");
  const std::size_t rows = x.shape()[0], d = x.shape()[1];
  Tensor<T> out(x.shape());
  std::vector<T> inv_std(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const T* xr = x.value().ptr() + r * d;
    T mu = T(0);
    for (std::size_t j = 0; j < d; ++j) mu += xr[j];
    mu /= T(d);
    T var = T(0);
    for (std::size_t j = 0; j < d; ++j) var += (xr[j] - mu) * (xr[j] - mu);
    var /= T(d);
    inv_std[r] = T(1) / std::sqrt(var + eps);
    for (std::size_t j = 0; j < d; ++j) out[r * d + j] = (xr[j] - mu) * inv_std[r];
  }
  auto normalized = out.storage();
  return make_result<T>(std::move(out), {&x}, [rows, d, inv_std = std::move(inv_std),
                                              normalized = std::move(normalized)](Node<T>& self) {
    T* g = grad_of(self, 0);
    if (!g) return;
    for (std::size_t r = 0; r < rows; ++r) {
      const T* dy = self.grad.data() + r * d;
      const T* y = normalized.data() + r * d;
      T mean_dy = T(0), mean_dyy = T(0);
      for (std::size_t j = 0; j < d; ++j) {
        mean_dy += dy[j];
        mean_dyy += dy[j] * y[j];
      }
      mean_dy /= T(d);
      mean_dyy /= T(d);
      for (std::size_t j = 0; j < d; ++j) g[r * d + j] += inv_std[r] * (dy[j] - mean_dy - y[j] * mean_dyy);
    }
  });
}

template <class T>
Var<T> masked_softmax(const Var<T>& scores, const Tensor<T>& mask) {
  require(!scores.shape().empty(), "masked_softmax: scalar input");
  const std::size_t n = scores.shape().back();
  const std::size_t rows = scores.size() / n;
  const bool has_mask = !mask.empty();
  std::size_t mask_rows = 1;
  if (has_mask) {
    require(mask.size() % n == 0 && scores.size() % mask.size() == 0 && mask.shape().back() == n,
            "masked_softmax: mask " + shape_str(mask.shape()) + " not broadcastable to " +
                shape_str(scores.shape()));
    mask_rows = mask.size() / n;
  }
  Tensor<T> out(scores.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    const T* m = has_mask ? mask.ptr() + (r % mask_rows) * n : nullptr;
    if (!softmax_row(scores.value().ptr() + r * n, m, out.ptr() + r * n, n)) {
      throw DegenerateRowError("masked_softmax: row " + std::to_string(r) + " has every key masked");
    }
  }
  return make_result<T>(std::move(out), {&scores}, [rows, n](Node<T>& self) {
    T* g = grad_of(self, 0);
    if (!g) return;
    std::vector<T> tmp(n);
    // Result node holds the probabilities in self.value.
    for (std::size_t r = 0; r < rows; ++r) {
      std::copy(self.grad.data() + r * n, self.grad.data() + (r + 1) * n, tmp.begin());
      softmax_row_backward(self.value.ptr() + r * n, tmp.data(), n);
      for (std::size_t j = 0; j < n; ++j) g[r * n + j] += tmp[j];
    }
  });
}

template <class T>
Var<T> softmax(const Var<T>& scores) {
  return masked_softmax(scores, Tensor<T>());
}

template <class T>
Var<T> attention(const Var<T>& q, const Var<T>& k, const Var<T>& v, std::size_t heads, const Tensor<T>* mask,
                 Tensor<T>* scores_out) {
  require_rank2(q, "attention");
  require_same(q, k, "attention");
  require_same(q, v, "attention");
  const std::size_t n = q.shape()[0], dmodel = q.shape()[1];
  require(heads > 0 && dmodel % heads == 0, "attention: width " + std::to_string(dmodel) + " not divisible by " +
                                                std::to_string(heads) + " heads");
  if (mask && !mask->empty()) {
    require(mask->shape() == Shape{n, n}, "attention: mask " + shape_str(mask->shape()) + " for sequence of " +
                                              std::to_string(n));
  } else {
    mask = nullptr;
  }
  const std::size_t hd = dmodel / heads;
  const T inv_sqrt = T(1) / std::sqrt(T(hd));

  Tensor<T> out({n, dmodel});
  std::vector<T> probs(heads * n * n);
  if (scores_out) *scores_out = Tensor<T>({heads, n, n});
  std::vector<T> qh(n * hd), kh(n * hd), vh(n * hd), sc(n * n), oh(n * hd);

  auto gather = [&](const T* src, std::vector<T>& dst, std::size_t h) {
    for (std::size_t i = 0; i < n; ++i)
      std::copy(src + i * dmodel + h * hd, src + i * dmodel + (h + 1) * hd, dst.data() + i * hd);
  };

  for (std::size_t h = 0; h < heads; ++h) {
    gather(q.value().ptr(), qh, h);
    gather(k.value().ptr(), kh, h);
    gather(v.value().ptr(), vh, h);
    gemm_nt(qh.data(), kh.data(), sc.data(), n, hd, n, false);
    for (auto& s : sc) s *= inv_sqrt;
    if (scores_out) std::copy(sc.begin(), sc.end(), scores_out->ptr() + h * n * n);
    T* p = probs.data() + h * n * n;
    for (std::size_t i = 0; i < n; ++i) {
      if (!softmax_row(sc.data() + i * n, mask ? mask->ptr() + i * n : nullptr, p + i * n, n)) {
        throw DegenerateRowError("attention: query " + std::to_string(i) + " has every key masked");
      }
    }
    gemm_nn(p, vh.data(), oh.data(), n, n, hd, false);
    for (std::size_t i = 0; i < n; ++i)
      std::copy(oh.data() + i * hd, oh.data() + (i + 1) * hd, out.ptr() + i * dmodel + h * hd);
  }

  return make_result<T>(
      std::move(out), {&q, &k, &v}, [n, dmodel, heads, hd, inv_sqrt, probs = std::move(probs)](Node<T>& self) {
        T* gq = grad_of(self, 0);
        T* gk = grad_of(self, 1);
        T* gv = grad_of(self, 2);
        const T* qv = self.inputs[0]->value.ptr();
        const T* kv = self.inputs[1]->value.ptr();
        const T* vv = self.inputs[2]->value.ptr();
        std::vector<T> qh(n * hd), kh(n * hd), vh(n * hd), doh(n * hd), dp(n * n), tmp(n * hd);
        auto gather = [&](const T* src, std::vector<T>& dst, std::size_t h) {
          for (std::size_t i = 0; i < n; ++i)
            std::copy(src + i * dmodel + h * hd, src + i * dmodel + (h + 1) * hd, dst.data() + i * hd);
        };
        auto scatter_add = [&](const std::vector<T>& src, T* dst, std::size_t h) {
          for (std::size_t i = 0; i < n; ++i)
            for (std::size_t c = 0; c < hd; ++c) dst[i * dmodel + h * hd + c] += src[i * hd + c];
        };
        for (std::size_t h = 0; h < heads; ++h) {
          const T* p = probs.data() + h * n * n;
          gather(self.grad.data(), doh, h);
          if (gv) {
            gemm_tn(p, doh.data(), tmp.data(), n, n, hd, false);
            scatter_add(tmp, gv, h);
          }
          if (!gq && !gk) continue;
          gather(vv, vh, h);
          gemm_nt(doh.data(), vh.data(), dp.data(), n, hd, n, false);
          for (std::size_t i = 0; i < n; ++i) softmax_row_backward(p + i * n, dp.data() + i * n, n);
          for (auto& x : dp) x *= inv_sqrt;
          if (gq) {
            gather(kv, kh, h);
            gemm_nn(dp.data(), kh.data(), tmp.data(), n, n, hd, false);
            scatter_add(tmp, gq, h);
          }
          if (gk) {
            gather(qv, qh, h);
            gemm_tn(dp.data(), qh.data(), tmp.data(), n, n, hd, false);
            scatter_add(tmp, gk, h);
          }
        }
      });
}

template <class T>
Var<T> sum(const Var<T>& x) {
  T total = T(0);
  for (auto v : x.data()) total += v;
  const auto n = x.size();
  return make_result<T>(Tensor<T>::scalar(total), {&x}, [n](Node<T>& self) {
    if (T* g = grad_of(self, 0))
      for (std::size_t i = 0; i < n; ++i) g[i] += self.grad[0];
  });
}

template <class T>
Var<T> mean(const Var<T>& x) {
  require(x.size() > 0, "mean of empty tensor");
  return scale(sum(x), T(1) / T(x.size()));
}

template <class T>
Var<T> sum_last(const Var<T>& x) {
  require(!x.shape().empty(), "sum_last: scalar input");
  const std::size_t d = x.shape().back();
  const std::size_t rows = x.size() / d;
  Shape s(x.shape().begin(), x.shape().end() - 1);
  if (s.empty()) s = {1};
  Tensor<T> out(s);
  for (std::size_t r = 0; r < rows; ++r) {
    T acc = T(0);
    for (std::size_t j = 0; j < d; ++j) acc += x.value()[r * d + j];
    out[r] = acc;
  }
  return make_result<T>(std::move(out), {&x}, [rows, d](Node<T>& self) {
    if (T* g = grad_of(self, 0))
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t j = 0; j < d; ++j) g[r * d + j] += self.grad[r];
  });
}

template <class T>
Var<T> mean_rows(const Var<T>& x) {
  require_rank2(x, "mean_rows");
  const std::size_t rows = x.shape()[0], d = x.shape()[1];
  Tensor<T> out({d});
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t j = 0; j < d; ++j) out[j] += x.value()[r * d + j];
  for (std::size_t j = 0; j < d; ++j) out[j] /= T(rows);
  return make_result<T>(std::move(out), {&x}, [rows, d](Node<T>& self) {
    if (T* g = grad_of(self, 0))
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t j = 0; j < d; ++j) g[r * d + j] += self.grad[j] / T(rows);
  });
}

template <class T>
Var<T> reshape(const Var<T>& x, Shape shape) {
  Tensor<T> out = x.value().reshaped(std::move(shape));
  const auto n = out.size();
  return make_result<T>(std::move(out), {&x}, [n](Node<T>& self) {
    if (T* g = grad_of(self, 0))
      for (std::size_t i = 0; i < n; ++i) g[i] += self.grad[i];
  });
}

template <class T>
Var<T> transpose(const Var<T>& x) {
  require_rank2(x, "transpose");
  const std::size_t r = x.shape()[0], c = x.shape()[1];
  Tensor<T> out({c, r});
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[j * r + i] = x.value()[i * c + j];
  return make_result<T>(std::move(out), {&x}, [r, c](Node<T>& self) {
    if (T* g = grad_of(self, 0))
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) g[i * c + j] += self.grad[j * r + i];
  });
}

template <class T>
Var<T> slice_rows(const Var<T>& x, std::size_t begin, std::size_t end) {
  require_rank2(x, "slice_rows");
  const std::size_t rows = x.shape()[0], d = x.shape()[1];
  require(begin <= end && end <= rows, "slice_rows: [" + std::to_string(begin) + "," + std::to_string(end) +
                                           ") out of " + std::to_string(rows));
  Tensor<T> out({end - begin, d}, std::vector<T>(x.value().ptr() + begin * d, x.value().ptr() + end * d));
  return make_result<T>(std::move(out), {&x}, [begin, end, d](Node<T>& self) {
    if (T* g = grad_of(self, 0))
      for (std::size_t i = 0; i < (end - begin) * d; ++i) g[begin * d + i] += self.grad[i];
  });
}

template <class T>
Var<T> slice_cols(const Var<T>& x, std::size_t begin, std::size_t end) {
  require_rank2(x, "slice_cols");
  const std::size_t rows = x.shape()[0], d = x.shape()[1];
  require(begin <= end && end <= d, "slice_cols: [" + std::to_string(begin) + "," + std::to_string(end) +
                                        ") out of " + std::to_string(d));
  const std::size_t w = end - begin;
  Tensor<T> out({rows, w});
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t j = 0; j < w; ++j) out[r * w + j] = x.value()[r * d + begin + j];
  return make_result<T>(std::move(out), {&x}, [rows, d, begin, w](Node<T>& self) {
    if (T* g = grad_of(self, 0))
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t j = 0; j < w; ++j) g[r * d + begin + j] += self.grad[r * w + j];
  });
}

template <class T>
Var<T> concat_rows(const std::vector<Var<T>>& parts) {
  require(!parts.empty(), "concat_rows: no inputs");
  const std::size_t d = parts.front().shape().at(1);
  std::size_t rows = 0;
  std::vector<std::size_t> offsets;
  for (const auto& p : parts) {
    require_rank2(p, "concat_rows");
    require(p.shape()[1] == d, "concat_rows: width mismatch " + shape_str(p.shape()));
    offsets.push_back(rows);
    rows += p.shape()[0];
  }
  Tensor<T> out({rows, d});
  for (std::size_t i = 0; i < parts.size(); ++i)
    std::copy(parts[i].data().begin(), parts[i].data().end(), out.ptr() + offsets[i] * d);

  auto node = std::make_shared<Node<T>>();
  node->value = std::move(out);
  bool needs = false;
  if (t_grad_enabled)
    for (const auto& p : parts) needs = needs || p.requires_grad();
  if (needs) {
    node->requires_grad = true;
    for (const auto& p : parts) node->inputs.push_back(p.node());
    node->backward = [offsets, d](Node<T>& self) {
      for (std::size_t i = 0; i < self.inputs.size(); ++i) {
        if (T* g = grad_of(self, i)) {
          const std::size_t cnt = self.inputs[i]->value.size();
          for (std::size_t j = 0; j < cnt; ++j) g[j] += self.grad[offsets[i] * d + j];
        }
      }
    };
  }
  return Var<T>(std::move(node));
}

template <class T>
Var<T> gather_rows(const Var<T>& table, std::span<const int> ids) {
  require_rank2(table, "gather_rows");
  const std::size_t vocab = table.shape()[0], d = table.shape()[1];
  std::vector<int> idx(ids.begin(), ids.end());
  Tensor<T> out({idx.size(), d});
  for (std::size_t r = 0; r < idx.size(); ++r) {
    if (idx[r] < 0 || static_cast<std::size_t>(idx[r]) >= vocab) {
      throw DomainError("gather_rows: id " + std::to_string(idx[r]) + " outside vocabulary of " +
                        std::to_string(vocab));
    }
    std::copy(table.value().ptr() + idx[r] * d, table.value().ptr() + (idx[r] + 1) * d, out.ptr() + r * d);
  }
  return make_result<T>(std::move(out), {&table}, [idx = std::move(idx), d](Node<T>& self) {
    if (T* g = grad_of(self, 0))
      for (std::size_t r = 0; r < idx.size(); ++r)
        for (std::size_t j = 0; j < d; ++j) g[idx[r] * d + j] += self.grad[r * d + j];
  });
}

// ---------------------------------------------------------------------------

#define ICRIT_INSTANTIATE(T)                                                                               \
  template class Var<T>;                                                                                   \
  template class Tape<T>;                                                                                  \
  template class StopGradPin<T>;                                                                           \
  template void backward<T>(const Var<T>&);                                                                \
  template Var<T> constant<T>(Tensor<T>);                                                                  \
  template Var<T> stop_grad<T>(const Var<T>&);                                                             \
  template Var<T> add<T>(const Var<T>&, const Var<T>&);                                                    \
  template Var<T> sub<T>(const Var<T>&, const Var<T>&);                                                    \
  template Var<T> mul<T>(const Var<T>&, const Var<T>&);                                                    \
  template Var<T> scale<T>(const Var<T>&, T);                                                              \
  template Var<T> add_scalar<T>(const Var<T>&, T);                                                         \
  template Var<T> add_row<T>(const Var<T>&, const Var<T>&);                                                \
  template Var<T> mul_row<T>(const Var<T>&, const Var<T>&);                                                \
  template Var<T> square<T>(const Var<T>&);                                                                \
  template Var<T> log1p<T>(const Var<T>&);                                                                 \
  template Var<T> silu<T>(const Var<T>&);                                                                  \
  template Var<T> gelu<T>(const Var<T>&);                                                                  \
  template Var<T> matmul<T>(const Var<T>&, const Var<T>&);                                                 \
  template Var<T> linear<T>(const Var<T>&, const Var<T>&, const Var<T>&);                                  \
  template Var<T> layer_norm<T>(const Var<T>&, T);                                                         \
  template Var<T> masked_softmax<T>(const Var<T>&, const Tensor<T>&);                                      \
  template Var<T> softmax<T>(const Var<T>&);                                                               \
  template Var<T> attention<T>(const Var<T>&, const Var<T>&, const Var<T>&, std::size_t, const Tensor<T>*, \
                               Tensor<T>*);                                                                \
  template Var<T> sum<T>(const Var<T>&);                                                                   \
  template Var<T> mean<T>(const Var<T>&);                                                                  \
  template Var<T> sum_last<T>(const Var<T>&);                                                              \
  template Var<T> mean_rows<T>(const Var<T>&);                                                             \
  template Var<T> reshape<T>(const Var<T>&, Shape);                                                        \
  template Var<T> transpose<T>(const Var<T>&);                                                             \
  template Var<T> slice_rows<T>(const Var<T>&, std::size_t, std::size_t);                                  \
  template Var<T> slice_cols<T>(const Var<T>&, std::size_t, std::size_t);                                  \
  template Var<T> concat_rows<T>(const std::vector<Var<T>>&);                                              \
  template Var<T> gather_rows<T>(const Var<T>&, std::span<const int>);                                     \
  template void gemm_nn<T>(const T*, const T*, T*, std::size_t, std::size_t, std::size_t, bool);           \
  template void gemm_nt<T>(const T*, const T*, T*, std::size_t, std::size_t, std::size_t, bool);           \
  template void gemm_tn<T>(const T*, const T*, T*, std::size_t, std::size_t, std::size_t, bool);

ICRIT_INSTANTIATE(float)
ICRIT_INSTANTIATE(double)

#undef ICRIT_INSTANTIATE

}  // namespace icrit
