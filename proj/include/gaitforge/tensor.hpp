#pragma once

// Minimal reverse-mode autodiff tensor engine.
//
// Design notes:
//  * Dense row-major tensors over float (training) or double (gradient
//    verification); both precisions are explicitly instantiated.
//  * Gradients are driven by an explicit Tape. Ops record a node per call;
//    Tape::backward walks the nodes in reverse topological (= recording)
//    order exactly once.
//  * Tensors are immutable after creation except for (a) gradient buffers
//    and (b) state management performed outside any active tape (parameter
//    updates, checkpoint loads, running-statistic updates).
//  * A tape is single-owner and not thread safe; one backward per tape.

#include <cstdint>
#include <functional>
#include <memory>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace gaitforge {

struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

inline void check(bool cond, const std::string& msg) {
  if (!cond) throw Error(msg);
}

enum class Mode { Train, Eval };

using Shape = std::vector<int64_t>;

int64_t numel_of(const Shape& shape);
std::string shape_str(const Shape& shape);
// Row-major element strides; empty shape (scalar-like) yields empty strides.
std::vector<int64_t> strides_of(const Shape& shape);

enum class DType : uint8_t { F32 = 0, F64 = 1 };

template <typename S>
constexpr DType dtype_of();
template <>
constexpr DType dtype_of<float>() {
  return DType::F32;
}
template <>
constexpr DType dtype_of<double>() {
  return DType::F64;
}

// Deterministic RNG handed explicitly through every stochastic code path.
class Rng {
 public:
  explicit Rng(uint64_t seed) : gen_(seed) {}

  uint64_t next_u64() { return gen_(); }
  // Uniform in [0, 1).
  double uniform() {
    return std::generate_canonical<double, 53>(gen_);
  }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  double normal() { return normal_(gen_); }
  // Uniform integer in [lo, hi).
  int64_t randint(int64_t lo, int64_t hi) {
    check(hi > lo, "randint: empty range");
    std::uniform_int_distribution<int64_t> d(lo, hi - 1);
    return d(gen_);
  }
  bool bernoulli(double p) { return uniform() < p; }

  // Independent child stream; deterministic given this stream's state.
  Rng fork(uint64_t stream) {
    uint64_t s = next_u64() ^ (0x9e3779b97f4a7c15ull * (stream + 1));
    return Rng(s);
  }

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (int64_t i = static_cast<int64_t>(v.size()) - 1; i > 0; --i) {
      std::swap(v[i], v[randint(0, i + 1)]);
    }
  }
  std::vector<int64_t> permutation(int64_t n);

 private:
  std::mt19937_64 gen_;
  std::normal_distribution<double> normal_{0.0, 1.0};
};

template <typename S>
class Tape;

template <typename S>
struct TensorImpl {
  Shape shape;
  std::shared_ptr<std::vector<S>> storage;
  std::vector<S> grad;  // empty until a gradient is accumulated
  bool requires_grad = false;
  Tape<S>* tape = nullptr;
  int64_t node = -1;
};

template <typename S>
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape);
  static Tensor full(Shape shape, S value);
  static Tensor ones(Shape shape) { return full(std::move(shape), S(1)); }
  static Tensor from_data(Shape shape, std::vector<S> values);
  static Tensor scalar(S value) { return from_data({}, {value}); }
  static Tensor randn(Shape shape, Rng& rng, double stddev = 1.0);
  static Tensor uniform(Shape shape, Rng& rng, double lo, double hi);

  bool defined() const { return impl != nullptr; }
  const Shape& shape() const;
  int rank() const { return static_cast<int>(shape().size()); }
  int64_t numel() const;
  // Negative axes count from the back.
  int64_t dim(int axis) const;

  S* data();
  const S* data() const;
  // Scalar fetch; requires numel() == 1.
  S value() const;
  S at(std::initializer_list<int64_t> idx) const;
  S& at(std::initializer_list<int64_t> idx);

  bool requires_grad() const { return impl && impl->requires_grad; }
  bool has_grad() const { return impl && !impl->grad.empty(); }
  const std::vector<S>& grad() const;
  // Allocates a zero-filled buffer on first use.
  std::vector<S>& mutable_grad();
  void zero_grad();

  Tape<S>* tape() const { return impl ? impl->tape : nullptr; }
  int64_t node() const { return impl ? impl->node : -1; }

  // Deep copy, detached from any tape.
  Tensor clone() const;
  // In-place data overwrite (state management; caller must not be inside an
  // active tape that recorded this tensor).
  void copy_from(const Tensor& src);

  std::shared_ptr<TensorImpl<S>> impl;
};

template <typename S>
using BackwardFn = std::function<void(const std::vector<S>& grad_out)>;

template <typename S>
class Tape {
 public:
  Tape() = default;
  ~Tape();
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  // Registers a gradient-tracked leaf. Zeroes any stale gradient buffer.
  void watch(Tensor<S>& t);

  // Records one op application. `inputs` are the tensors gradient may flow
  // to; `backward` receives d(loss)/d(out) and must accumulate into the
  // inputs' gradient buffers. Returns the node id.
  int64_t record(std::vector<Tensor<S>> inputs, Tensor<S>& out,
                 BackwardFn<S> backward);

  // Reverse sweep from a scalar loss. Single use; a second call throws.
  void backward(const Tensor<S>& loss);

  bool consumed() const { return consumed_; }
  size_t num_nodes() const { return nodes_.size(); }

 private:
  struct NodeRec {
    std::vector<Tensor<S>> inputs;
    std::shared_ptr<TensorImpl<S>> out;
    BackwardFn<S> fn;  // null for leaves
  };
  std::vector<NodeRec> nodes_;
  bool consumed_ = false;
};

// True when gradient should flow into/through `t` (attached to a live tape).
template <typename S>
inline bool grad_enabled(const Tensor<S>& t) {
  return t.defined() && t.impl->tape != nullptr;
}

// The unique tape attached to any of the given tensors (nullptr if none);
// throws if two different tapes are mixed.
template <typename S>
Tape<S>* tape_of(std::initializer_list<const Tensor<S>*> ts);

// grad(t) += g (elementwise over n = t.numel() entries).
template <typename S>
void accumulate_grad(const Tensor<S>& t, const S* g, int64_t n);

extern template class Tensor<float>;
extern template class Tensor<double>;
extern template class Tape<float>;
extern template class Tape<double>;
extern template Tape<float>* tape_of<float>(
    std::initializer_list<const Tensor<float>*>);
extern template Tape<double>* tape_of<double>(
    std::initializer_list<const Tensor<double>*>);
extern template void accumulate_grad<float>(const Tensor<float>&, const float*,
                                            int64_t);
extern template void accumulate_grad<double>(const Tensor<double>&,
                                             const double*, int64_t);

}  // namespace gaitforge
