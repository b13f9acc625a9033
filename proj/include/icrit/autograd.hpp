#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "icrit/tensor.hpp"

namespace icrit {

template <class T>
struct Node {
  Tensor<T> value;
  std::vector<T> grad;  // empty until something flows in
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> inputs;
  std::function<void(Node&)> backward;

  std::vector<T>& grad_buffer() {
    if (grad.empty()) grad.assign(value.size(), T(0));
    return grad;
  }
};

/// Handle to a value in the reverse-mode graph. Copies share the node.
template <class T>
class Var {
 public:
  Var() = default;
  explicit Var(Tensor<T> value, bool requires_grad = false);
  explicit Var(std::shared_ptr<Node<T>> node) : node_(std::move(node)) {}

  bool defined() const noexcept { return node_ != nullptr; }
  const Tensor<T>& value() const { return node_->value; }
  const Shape& shape() const { return node_->value.shape(); }
  std::size_t size() const { return node_->value.size(); }
  std::span<const T> data() const { return node_->value.data(); }
  T item() const;
  bool requires_grad() const { return node_ && node_->requires_grad; }
  /// Gradient accumulated by backward(); empty if none reached this node.
  std::span<const T> grad() const { return node_->grad; }
  const std::shared_ptr<Node<T>>& node() const { return node_; }

 private:
  std::shared_ptr<Node<T>> node_;
};

/// Runs reverse accumulation from a scalar root.
template <class T>
void backward(const Var<T>& root);

/// Disables graph construction on this thread for the guard's lifetime.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

bool grad_enabled();

// ---------------------------------------------------------------------------
// Parameters and binding

/// Parameter groups of the method: backbone (theta), probes (phi), the critic
/// embedding r, and the two projection families psi / chi.
enum class Group : std::uint8_t { kTheta = 0, kPhi = 1, kCritic = 2, kPsi = 3, kChi = 4 };

const char* group_name(Group g);

class GroupSet {
 public:
  constexpr GroupSet() = default;
  constexpr GroupSet(std::initializer_list<Group> groups) {
    for (auto g : groups) bits_ |= bit(g);
  }
  constexpr bool contains(Group g) const { return (bits_ & bit(g)) != 0; }
  constexpr bool empty() const { return bits_ == 0; }
  constexpr bool operator==(const GroupSet&) const = default;
  std::string str() const;

 private:
  static constexpr std::uint8_t bit(Group g) { return std::uint8_t(1u << static_cast<unsigned>(g)); }
  std::uint8_t bits_ = 0;
};

template <class T>
struct Parameter {
  std::string name;
  Group group = Group::kTheta;
  Tensor<T> value;
};

/// Binds parameters into one graph. A parameter becomes a gradient-tracking leaf
/// only if its group is trainable (or it was explicitly tracked); frozen
/// parameters enter as constants and never get a gradient buffer.
template <class T>
class Tape {
 public:
  Tape() = default;
  explicit Tape(GroupSet trainable) : trainable_(trainable) {}

  void track(const Parameter<T>& p) { extra_.insert(&p); }
  bool tracks(const Parameter<T>& p) const { return trainable_.contains(p.group) || extra_.contains(&p); }

  Var<T> operator()(const Parameter<T>& p);

  /// Empty span when untracked, unbound, or no gradient reached it.
  std::span<const T> grad(const Parameter<T>& p) const;
  bool has_grad_buffer(const Parameter<T>& p) const;

  GroupSet trainable() const { return trainable_; }

 private:
  GroupSet trainable_;
  std::unordered_set<const Parameter<T>*> extra_;
  std::unordered_map<const Parameter<T>*, Var<T>> bound_;
};

// ---------------------------------------------------------------------------
// Stop-gradient with optional value pinning.
//
// Central differences perturb inputs of the whole function, including paths a
// stop-gradient cuts. StopGradPin records every stop_grad value of a base
// evaluation and replays them verbatim during perturbed evaluations, so the
// numeric derivative matches the semi-gradient backprop computes.
template <class T>
class StopGradPin {
 public:
  enum class Mode { kRecord, kReplay };

  StopGradPin();
  ~StopGradPin();
  StopGradPin(const StopGradPin&) = delete;
  StopGradPin& operator=(const StopGradPin&) = delete;

  void record() { mode_ = Mode::kRecord; values_.clear(); cursor_ = 0; }
  void replay() { mode_ = Mode::kReplay; cursor_ = 0; }
  std::size_t recorded() const { return values_.size(); }

  Tensor<T> on_stop_grad(const Tensor<T>& value);

 private:
  Mode mode_ = Mode::kRecord;
  std::vector<Tensor<T>> values_;
  std::size_t cursor_ = 0;
  StopGradPin* previous_;
};

// ---------------------------------------------------------------------------
// Differentiable ops

template <class T> Var<T> constant(Tensor<T> value);
template <class T> Var<T> stop_grad(const Var<T>& x);

template <class T> Var<T> add(const Var<T>& a, const Var<T>& b);
template <class T> Var<T> sub(const Var<T>& a, const Var<T>& b);
template <class T> Var<T> mul(const Var<T>& a, const Var<T>& b);
template <class T> Var<T> scale(const Var<T>& x, T s);
template <class T> Var<T> add_scalar(const Var<T>& x, T s);
/// x [n x d] + v (d elements) broadcast over rows.
template <class T> Var<T> add_row(const Var<T>& x, const Var<T>& v);
/// x [n x d] * v (d elements) broadcast over rows.
template <class T> Var<T> mul_row(const Var<T>& x, const Var<T>& v);
template <class T> Var<T> square(const Var<T>& x);
template <class T> Var<T> log1p(const Var<T>& x);
template <class T> Var<T> silu(const Var<T>& x);
/// tanh approximation.
template <class T> Var<T> gelu(const Var<T>& x);

template <class T> Var<T> matmul(const Var<T>& a, const Var<T>& b);
/// x [n x in] * w [in x out] + b [out]; `b` may be undefined.
template <class T> Var<T> linear(const Var<T>& x, const Var<T>& w, const Var<T>& b);

/// Normalizes each row of a rank-2 tensor to zero mean and unit variance (no affine).
template <class T> Var<T> layer_norm(const Var<T>& x, T eps = T(1e-6));

/// Softmax over the last axis of (scores + mask). `mask` has the full shape of
/// `scores` or of its trailing axes; entries <= mask_threshold<T>() are treated as
/// -inf and receive weight exactly 0. A row with every key masked throws.
template <class T> Var<T> masked_softmax(const Var<T>& scores, const Tensor<T>& mask);
template <class T> Var<T> softmax(const Var<T>& scores);

/// Multi-head attention over q, k, v [N x D]. Pre-softmax scores are scaled by
/// 1/sqrt(D/heads). `mask` is an optional [N x N] additive mask. If `scores_out`
/// is given it receives the scaled scores, before the mask, as [heads x N x N].
template <class T>
Var<T> attention(const Var<T>& q, const Var<T>& k, const Var<T>& v, std::size_t heads,
                 const Tensor<T>* mask = nullptr, Tensor<T>* scores_out = nullptr);

template <class T> Var<T> sum(const Var<T>& x);
template <class T> Var<T> mean(const Var<T>& x);
/// Sum over the last axis: [n x d] -> [n].
template <class T> Var<T> sum_last(const Var<T>& x);
/// Mean over rows: [n x d] -> [d].
template <class T> Var<T> mean_rows(const Var<T>& x);

template <class T> Var<T> reshape(const Var<T>& x, Shape shape);
template <class T> Var<T> transpose(const Var<T>& x);
/// Rows [begin, end) of a rank-2 tensor.
template <class T> Var<T> slice_rows(const Var<T>& x, std::size_t begin, std::size_t end);
/// Columns [begin, end) of a rank-2 tensor.
template <class T> Var<T> slice_cols(const Var<T>& x, std::size_t begin, std::size_t end);
template <class T> Var<T> concat_rows(const std::vector<Var<T>>& parts);
/// Rows of `table` [V x d] selected by `ids`.
template <class T> Var<T> gather_rows(const Var<T>& table, std::span<const int> ids);

// ---------------------------------------------------------------------------
// Raw kernels (row-major, sequential accumulation order).

/// C[m x n] (+)= A[m x k] B[k x n]
template <class T>
void gemm_nn(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n, bool accumulate);
/// C[m x n] (+)= A[m x k] B[n x k]^T
template <class T>
void gemm_nt(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n, bool accumulate);
/// C[m x n] (+)= A[k x m]^T B[k x n]
template <class T>
void gemm_tn(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n, bool accumulate);

}  // namespace icrit
