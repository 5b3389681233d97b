#include "gaitforge/tensor.hpp"

#include <algorithm>
#include <numeric>
#include <sstream>

namespace gaitforge {

int64_t numel_of(const Shape& shape) {
  int64_t n = 1;
  for (int64_t d : shape) {
    check(d >= 0, "shape has a negative extent");
    n *= d;
  }
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << "[";
  for (size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ",";
    os << shape[i];
  }
  os << "]";
  return os.str();
}

std::vector<int64_t> strides_of(const Shape& shape) {
  std::vector<int64_t> st(shape.size());
  int64_t acc = 1;
  for (int i = static_cast<int>(shape.size()) - 1; i >= 0; --i) {
    st[i] = acc;
    acc *= shape[i];
  }
  return st;
}

std::vector<int64_t> Rng::permutation(int64_t n) {
  std::vector<int64_t> p(n);
  std::iota(p.begin(), p.end(), 0);
  shuffle(p);
  return p;
}

template <typename S>
Tensor<S> Tensor<S>::zeros(Shape shape) {
  return full(std::move(shape), S(0));
}

template <typename S>
Tensor<S> Tensor<S>::full(Shape shape, S value) {
  Tensor t;
  t.impl = std::make_shared<TensorImpl<S>>();
  int64_t n = numel_of(shape);
  t.impl->shape = std::move(shape);
  t.impl->storage = std::make_shared<std::vector<S>>(n, value);
  return t;
}

template <typename S>
Tensor<S> Tensor<S>::from_data(Shape shape, std::vector<S> values) {
  check(numel_of(shape) == static_cast<int64_t>(values.size()),
        "from_data: " + shape_str(shape) + " does not hold " +
            std::to_string(values.size()) + " values");
  Tensor t;
  t.impl = std::make_shared<TensorImpl<S>>();
  t.impl->shape = std::move(shape);
  t.impl->storage = std::make_shared<std::vector<S>>(std::move(values));
  return t;
}

template <typename S>
Tensor<S> Tensor<S>::randn(Shape shape, Rng& rng, double stddev) {
  Tensor t = zeros(std::move(shape));
  S* p = t.data();
  for (int64_t i = 0; i < t.numel(); ++i) p[i] = static_cast<S>(rng.normal() * stddev);
  return t;
}

template <typename S>
Tensor<S> Tensor<S>::uniform(Shape shape, Rng& rng, double lo, double hi) {
  Tensor t = zeros(std::move(shape));
  S* p = t.data();
  for (int64_t i = 0; i < t.numel(); ++i) p[i] = static_cast<S>(rng.uniform(lo, hi));
  return t;
}

template <typename S>
const Shape& Tensor<S>::shape() const {
  check(defined(), "shape() on undefined tensor");
  return impl->shape;
}

template <typename S>
int64_t Tensor<S>::numel() const {
  check(defined(), "numel() on undefined tensor");
  return static_cast<int64_t>(impl->storage->size());
}

template <typename S>
int64_t Tensor<S>::dim(int axis) const {
  const Shape& sh = shape();
  int r = static_cast<int>(sh.size());
  if (axis < 0) axis += r;
  check(axis >= 0 && axis < r, "dim: axis out of range");
  return sh[axis];
}

template <typename S>
S* Tensor<S>::data() {
  check(defined(), "data() on undefined tensor");
  return impl->storage->data();
}

template <typename S>
const S* Tensor<S>::data() const {
  check(defined(), "data() on undefined tensor");
  return impl->storage->data();
}

template <typename S>
S Tensor<S>::value() const {
  check(defined() && numel() == 1, "value() requires a one-element tensor");
  return (*impl->storage)[0];
}

template <typename S>
S Tensor<S>::at(std::initializer_list<int64_t> idx) const {
  const Shape& sh = shape();
  check(idx.size() == sh.size(), "at: index rank mismatch");
  auto st = strides_of(sh);
  int64_t flat = 0;
  int i = 0;
  for (int64_t v : idx) {
    check(v >= 0 && v < sh[i], "at: index out of range");
    flat += v * st[i];
    ++i;
  }
  return (*impl->storage)[flat];
}

template <typename S>
S& Tensor<S>::at(std::initializer_list<int64_t> idx) {
  const Shape& sh = shape();
  check(idx.size() == sh.size(), "at: index rank mismatch");
  auto st = strides_of(sh);
  int64_t flat = 0;
  int i = 0;
  for (int64_t v : idx) {
    check(v >= 0 && v < sh[i], "at: index out of range");
    flat += v * st[i];
    ++i;
  }
  return (*impl->storage)[flat];
}

template <typename S>
const std::vector<S>& Tensor<S>::grad() const {
  check(has_grad(), "grad(): no gradient buffer present");
  return impl->grad;
}

template <typename S>
std::vector<S>& Tensor<S>::mutable_grad() {
  check(defined(), "mutable_grad() on undefined tensor");
  if (impl->grad.empty()) impl->grad.assign(impl->storage->size(), S(0));
  return impl->grad;
}

template <typename S>
void Tensor<S>::zero_grad() {
  check(defined(), "zero_grad() on undefined tensor");
  impl->grad.clear();
}

template <typename S>
Tensor<S> Tensor<S>::clone() const {
  check(defined(), "clone() on undefined tensor");
  return from_data(impl->shape, *impl->storage);
}

template <typename S>
void Tensor<S>::copy_from(const Tensor& src) {
  check(defined() && src.defined(), "copy_from: undefined tensor");
  check(impl->shape == src.impl->shape,
        "copy_from: shape mismatch " + shape_str(impl->shape) + " vs " +
            shape_str(src.impl->shape));
  *impl->storage = *src.impl->storage;
}

template <typename S>
Tape<S>::~Tape() {
  for (auto& n : nodes_) {
    if (n.out) {
      n.out->tape = nullptr;
      n.out->node = -1;
    }
    for (auto& in : n.inputs) {
      if (in.impl && in.impl->tape == this) {
        in.impl->tape = nullptr;
        in.impl->node = -1;
      }
    }
  }
}

template <typename S>
void Tape<S>::watch(Tensor<S>& t) {
  check(t.defined(), "watch: undefined tensor");
  check(!consumed_, "watch: tape already consumed by backward()");
  if (t.impl->tape == this) return;
  check(t.impl->tape == nullptr, "watch: tensor belongs to a different tape");
  t.impl->tape = this;
  t.impl->node = static_cast<int64_t>(nodes_.size());
  t.impl->requires_grad = true;
  t.impl->grad.clear();
  nodes_.push_back(NodeRec{{}, t.impl, nullptr});
}

template <typename S>
int64_t Tape<S>::record(std::vector<Tensor<S>> inputs, Tensor<S>& out,
                        BackwardFn<S> backward) {
  check(!consumed_, "record: tape already consumed by backward()");
  check(out.defined(), "record: undefined output");
  for (const auto& in : inputs) {
    check(in.defined(), "record: undefined input");
    check(in.impl->tape == nullptr || in.impl->tape == this,
          "record: input belongs to a different tape");
  }
  check(out.impl->tape == nullptr, "record: output already recorded");
  out.impl->tape = this;
  out.impl->node = static_cast<int64_t>(nodes_.size());
  nodes_.push_back(NodeRec{std::move(inputs), out.impl, std::move(backward)});
  return out.impl->node;
}

template <typename S>
void Tape<S>::backward(const Tensor<S>& loss) {
  check(!consumed_, "backward: tape already consumed");
  check(loss.defined() && loss.numel() == 1, "backward: loss must be scalar");
  check(loss.impl->tape == this, "backward: loss not recorded on this tape");
  consumed_ = true;
  loss.impl->grad.assign(1, S(1));
  for (int64_t i = static_cast<int64_t>(nodes_.size()) - 1; i >= 0; --i) {
    NodeRec& n = nodes_[i];
    if (!n.fn) continue;               // leaf
    if (n.out->grad.empty()) continue;  // no downstream gradient
    n.fn(n.out->grad);
  }
  // Every gradient-tracked leaf ends up with a buffer, even if unused.
  for (auto& n : nodes_) {
    if (!n.fn && n.out->requires_grad && n.out->grad.empty()) {
      n.out->grad.assign(n.out->storage->size(), S(0));
    }
  }
}

template <typename S>
Tape<S>* tape_of(std::initializer_list<const Tensor<S>*> ts) {
  Tape<S>* tape = nullptr;
  for (const Tensor<S>* t : ts) {
    if (!t || !t->defined()) continue;
    Tape<S>* tt = t->impl->tape;
    if (!tt) continue;
    check(tape == nullptr || tape == tt, "op mixes tensors from two tapes");
    tape = tt;
  }
  return tape;
}

template <typename S>
void accumulate_grad(const Tensor<S>& t, const S* g, int64_t n) {
  check(t.defined(), "accumulate_grad: undefined tensor");
  check(n == t.numel(), "accumulate_grad: size mismatch");
  auto& buf = const_cast<Tensor<S>&>(t).mutable_grad();
  S* dst = buf.data();
  for (int64_t i = 0; i < n; ++i) dst[i] += g[i];
}

template class Tensor<float>;
template class Tensor<double>;
template class Tape<float>;
template class Tape<double>;
template Tape<float>* tape_of<float>(
    std::initializer_list<const Tensor<float>*>);
template Tape<double>* tape_of<double>(
    std::initializer_list<const Tensor<double>*>);
template void accumulate_grad<float>(const Tensor<float>&, const float*,
                                     int64_t);
template void accumulate_grad<double>(const Tensor<double>&, const double*,
                                      int64_t);

}  // namespace gaitforge
