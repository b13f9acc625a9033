#include "icrit/tensor.hpp"

#include <atomic>
#include <cmath>
#include <cstdlib>
#include <cstring>
#include <numbers>
#include <sstream>
#include <thread>

namespace icrit {

std::size_t numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto e : shape) n *= e;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

template <class T>
Tensor<T>::Tensor(Shape shape) : shape_(std::move(shape)), data_(numel(shape_), T(0)) {}

template <class T>
Tensor<T>::Tensor(Shape shape, std::vector<T> data) : shape_(std::move(shape)), data_(std::move(data)) {
  if (numel(shape_) != data_.size()) {
    throw DimensionError("tensor shape " + shape_str(shape_) + " does not match " +
                         std::to_string(data_.size()) + " values");
  }
}

template <class T>
Tensor<T> Tensor<T>::full(Shape shape, T value) {
  auto n = numel(shape);
  return Tensor(std::move(shape), std::vector<T>(n, value));
}

template <class T>
std::size_t Tensor<T>::dim(std::size_t axis) const {
  if (axis >= shape_.size()) {
    throw DimensionError("axis " + std::to_string(axis) + " out of range for " + shape_str(shape_));
  }
  return shape_[axis];
}

template <class T>
Tensor<T> Tensor<T>::reshaped(Shape shape) const {
  if (numel(shape) != data_.size()) {
    throw DimensionError("cannot reshape " + shape_str(shape_) + " to " + shape_str(shape));
  }
  return Tensor(std::move(shape), data_);
}

template class Tensor<float>;
template class Tensor<double>;
template class Tensor<int>;

std::uint64_t mix64(std::uint64_t z) {
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

std::uint64_t hash_string(std::string_view s) {
  return fnv1a(std::as_bytes(std::span(s.data(), s.size())));
}

std::uint64_t Rng::next_u64() {
  // SplitMix64 evaluated at an explicit counter.
  std::uint64_t state = seed_ + (counter_ + 1) * 0x9e3779b97f4a7c15ULL;
  ++counter_;
  return mix64(state);
}

double Rng::uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

double Rng::normal() {
  const double u1 = (static_cast<double>(next_u64() >> 11) + 1.0) * 0x1.0p-53;  // (0, 1]
  const double u2 = uniform();
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

std::uint64_t Rng::below(std::uint64_t n) {
  if (n == 0) throw DomainError("Rng::below(0)");
  return static_cast<std::uint64_t>(uniform() * static_cast<double>(n)) % n;
}

Rng Rng::fork(std::uint64_t stream) const { return Rng(mix64(seed_ ^ mix64(stream + 0x632be59bd9b4e019ULL)), 0); }

std::uint64_t fnv1a(std::span<const std::byte> bytes, std::uint64_t h) {
  for (auto b : bytes) {
    h ^= static_cast<std::uint64_t>(b);
    h *= 0x100000001b3ULL;
  }
  return h;
}

namespace {

bool env_deterministic() {
  const char* v = std::getenv("IC_DETERMINISTIC");
  return v != nullptr && std::strcmp(v, "1") == 0;
}

std::atomic<bool>& determinism_flag() {
  static std::atomic<bool> flag{env_deterministic()};
  return flag;
}

std::atomic<unsigned>& thread_count() {
  static std::atomic<unsigned> n{std::max(1u, std::thread::hardware_concurrency())};
  return n;
}

}  // namespace

bool deterministic() { return determinism_flag().load(); }

void set_deterministic(bool on) {
  // The environment override wins.
  determinism_flag().store(on || env_deterministic());
}

unsigned worker_threads() { return thread_count().load(); }
void set_worker_threads(unsigned n) { thread_count().store(std::max(1u, n)); }

void parallel_for(std::size_t n, const std::function<void(std::size_t)>& fn) {
  // Outputs do not depend on the worker count; determinism mode still runs serially.
  const std::size_t workers = deterministic() ? 1 : std::min<std::size_t>(worker_threads(), n);
  if (workers <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::thread> pool;
  std::vector<std::exception_ptr> errors(workers);
  for (std::size_t w = 0; w < workers; ++w) {
    pool.emplace_back([&, w] {
      try {
        for (std::size_t i = w; i < n; i += workers) fn(i);
      } catch (...) {
        errors[w] = std::current_exception();
      }
    });
  }
  for (auto& t : pool) t.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

}  // namespace icrit
