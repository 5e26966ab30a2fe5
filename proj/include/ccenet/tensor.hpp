#pragma once

#include <algorithm>
#include <atomic>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace ccenet {

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class StateError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

/// Extent of a rank-4 (batch, channel, height, width) array.
struct Shape {
  std::size_t n = 0;
  std::size_t c = 0;
  std::size_t h = 0;
  std::size_t w = 0;

  std::size_t numel() const { return n * c * h * w; }
  std::size_t plane() const { return h * w; }
  friend bool operator==(const Shape&, const Shape&) = default;

  std::string str() const {
    std::ostringstream os;
    os << "(" << n << "," << c << "," << h << "," << w << ")";
    return os.str();
  }
};

class Tape;

namespace detail {

struct Storage {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;
  bool requires_grad = false;
  std::uint64_t tape_id = 0;  // 0: not produced by any tape
  std::size_t node = 0;
};

inline std::uint64_t next_tape_id() {
  static std::atomic<std::uint64_t> counter{0};
  return ++counter;
}

}  // namespace detail

/// Dense double-precision rank-4 tensor with shared storage.
///
/// Copies alias the same buffer. Values are fixed once a tensor has been
/// consumed by an operation; only parameters are updated in place, between
/// passes, through mutable_data().
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(Shape shape, double fill = 0.0)
      : impl_(std::make_shared<detail::Storage>()) {
    impl_->shape = shape;
    impl_->data.assign(shape.numel(), fill);
  }

  Tensor(Shape shape, std::vector<double> values)
      : impl_(std::make_shared<detail::Storage>()) {
    if (values.size() != shape.numel()) {
      throw ShapeError("tensor data length " + std::to_string(values.size()) +
                       " does not match shape " + shape.str());
    }
    impl_->shape = shape;
    impl_->data = std::move(values);
  }

  static Tensor zeros(Shape shape) { return Tensor(shape, 0.0); }
  static Tensor scalar(double v) { return Tensor(Shape{1, 1, 1, 1}, v); }

  bool defined() const { return static_cast<bool>(impl_); }
  const Shape& shape() const { return impl_->shape; }
  std::size_t numel() const { return impl_->data.size(); }

  std::span<const double> data() const { return impl_->data; }
  std::span<double> mutable_data() { return impl_->data; }

  double operator[](std::size_t i) const { return impl_->data[i]; }

  std::size_t offset(std::size_t n, std::size_t c, std::size_t h, std::size_t w) const {
    const Shape& s = impl_->shape;
    return ((n * s.c + c) * s.h + h) * s.w + w;
  }
  double at(std::size_t n, std::size_t c, std::size_t h, std::size_t w) const {
    return impl_->data[offset(n, c, h, w)];
  }

  double item() const {
    if (numel() != 1) throw ShapeError("item() on tensor of shape " + shape().str());
    return impl_->data[0];
  }

  bool requires_grad() const { return impl_ && impl_->requires_grad; }
  Tensor& set_requires_grad(bool on) {
    impl_->requires_grad = on;
    return *this;
  }

  bool has_grad() const { return !impl_->grad.empty(); }
  std::span<const double> grad() const { return impl_->grad; }
  // Grad buffers stay writable through const handles; values do not.
  std::span<double> mutable_grad() const {
    ensure_grad();
    return impl_->grad;
  }
  void zero_grad() const { impl_->grad.assign(impl_->data.size(), 0.0); }
  void ensure_grad() const {
    if (impl_->grad.size() != impl_->data.size()) impl_->grad.assign(impl_->data.size(), 0.0);
  }

  /// Value copy that does not participate in any tape.
  Tensor detach() const { return Tensor(shape(), impl_->data); }

  bool same_storage(const Tensor& other) const { return impl_ == other.impl_; }

 private:
  friend class Tape;
  std::shared_ptr<detail::Storage> impl_;
};

/// Define-by-run gradient tape.
///
/// Operations executed while a tape is active (see TapeScope) append one node
/// each. backward() replays the nodes in reverse and may run only once.
class Tape {
 public:
  using BackwardFn = std::function<void()>;

  Tape() : id_(detail::next_tape_id()) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  std::uint64_t id() const { return id_; }
  std::size_t size() const { return nodes_.size(); }
  bool consumed() const { return consumed_; }
  const std::vector<std::string>& leaf_names() const { return leaf_names_; }

  /// Names a leaf; it receives a (possibly zero) gradient on backward even if
  /// the loss does not reach it.
  void register_leaf(std::string name, const Tensor& leaf) {
    if (!leaf.requires_grad()) {
      throw StateError("leaf '" + name + "' does not require grad");
    }
    add_leaf(leaf.impl_);
    leaf_names_.push_back(std::move(name));
  }

  bool tracks(const Tensor& t) const {
    return t.defined() && t.impl_->tape_id == id_;
  }

  /// Appends a node producing `out`. Inputs not produced on this tape that
  /// require grad become leaves.
  void record(const char* kind, Tensor& out, std::initializer_list<const Tensor*> inputs,
              BackwardFn fn) {
    record(kind, out, std::vector<const Tensor*>(inputs), std::move(fn));
  }

  void record(const char* kind, Tensor& out, const std::vector<const Tensor*>& inputs,
              BackwardFn fn) {
    if (consumed_) throw StateError("recording on a consumed tape");
    Node node;
    node.kind = kind;
    for (const Tensor* in : inputs) {
      if (in == nullptr || !in->defined()) continue;
      if (in->impl_->tape_id == id_) {
        if (in->impl_->node >= nodes_.size() + 1) throw StateError("tape order violated");
      } else if (in->requires_grad()) {
        add_leaf(in->impl_);
      }
    }
    out.impl_->requires_grad = true;
    out.impl_->tape_id = id_;
    out.impl_->node = nodes_.size() + 1;
    node.output = out.impl_;
    node.backward = std::move(fn);
    nodes_.push_back(std::move(node));
  }

  void backward(const Tensor& loss) {
    if (consumed_) throw StateError("backward called on a consumed tape");
    if (!loss.defined() || loss.shape() != Shape{1, 1, 1, 1}) {
      throw ShapeError("backward expects a (1,1,1,1) loss");
    }
    if (loss.impl_->tape_id != id_) throw StateError("loss is not recorded on this tape");
    for (auto& leaf : leaves_) leaf->grad.assign(leaf->data.size(), 0.0);
    for (auto& node : nodes_) node.output->grad.assign(node.output->data.size(), 0.0);
    loss.impl_->grad[0] = 1.0;
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
      if (it->backward) it->backward();
      it->backward = nullptr;  // releases captured activations
    }
    nodes_.clear();
    consumed_ = true;
  }

  static Tape* active() { return active_slot(); }

 private:
  friend class TapeScope;

  struct Node {
    std::string kind;
    std::shared_ptr<detail::Storage> output;
    BackwardFn backward;
  };

  void add_leaf(const std::shared_ptr<detail::Storage>& s) {
    if (std::find(leaves_.begin(), leaves_.end(), s) == leaves_.end()) leaves_.push_back(s);
  }

  static Tape*& active_slot() {
    thread_local Tape* slot = nullptr;
    return slot;
  }

  std::uint64_t id_;
  bool consumed_ = false;
  std::vector<Node> nodes_;
  std::vector<std::shared_ptr<detail::Storage>> leaves_;
  std::vector<std::string> leaf_names_;
};

/// Makes a tape the active one for the current thread for its lifetime.
class TapeScope {
 public:
  explicit TapeScope(Tape& tape) : previous_(Tape::active_slot()) { Tape::active_slot() = &tape; }
  ~TapeScope() { Tape::active_slot() = previous_; }
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  Tape* previous_;
};

namespace detail {

/// Tape that should record an op over `inputs`, or nullptr.
template <typename Range>
inline Tape* recording_tape_of(const Range& inputs) {
  Tape* tape = Tape::active();
  if (tape == nullptr) return nullptr;
  for (const Tensor* t : inputs) {
    if (t != nullptr && t->defined() && t->requires_grad()) return tape;
  }
  return nullptr;
}

inline Tape* recording_tape(std::initializer_list<const Tensor*> inputs) {
  return recording_tape_of(inputs);
}

}  // namespace detail

}  // namespace ccenet
