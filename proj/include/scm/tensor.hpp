#pragma once
// Dense float64 tensor with tape-based reverse-mode differentiation.
//
// A Tensor is a cheap handle onto shared storage. Ops executed while a Tape
// is active (see Tape::Scope) and having at least one input that requires a
// gradient are recorded on that tape; Tape::backward replays the recorded
// ops in reverse order.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

namespace scm {

struct DimensionError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct ValidationError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

using Shape = std::vector<std::int64_t>;

inline std::int64_t numel_of(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::int64_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

namespace detail {
struct TensorImpl {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;
  bool requires_grad = false;
};
}  // namespace detail

class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(Shape shape, double fill = 0.0) : impl_(std::make_shared<detail::TensorImpl>()) {
    for (auto d : shape)
      if (d < 0) throw DimensionError("negative dimension in " + shape_str(shape));
    impl_->data.assign(static_cast<std::size_t>(numel_of(shape)), fill);
    impl_->shape = std::move(shape);
  }

  Tensor(Shape shape, std::vector<double> data) : impl_(std::make_shared<detail::TensorImpl>()) {
    if (numel_of(shape) != static_cast<std::int64_t>(data.size()))
      throw DimensionError("data length " + std::to_string(data.size()) + " does not match shape " +
                           shape_str(shape));
    impl_->shape = std::move(shape);
    impl_->data = std::move(data);
  }

  static Tensor zeros(Shape shape) { return Tensor(std::move(shape), 0.0); }
  static Tensor ones(Shape shape) { return Tensor(std::move(shape), 1.0); }
  static Tensor scalar(double v) { return Tensor(Shape{}, std::vector<double>{v}); }

  bool defined() const { return static_cast<bool>(impl_); }
  const Shape& shape() const { return impl_->shape; }
  std::int64_t ndim() const { return static_cast<std::int64_t>(impl_->shape.size()); }
  std::int64_t dim(std::int64_t i) const {
    if (i < 0) i += ndim();
    if (i < 0 || i >= ndim()) throw DimensionError("axis out of range for " + shape_str(shape()));
    return impl_->shape[static_cast<std::size_t>(i)];
  }
  std::int64_t numel() const { return static_cast<std::int64_t>(impl_->data.size()); }

  std::span<const double> data() const { return impl_->data; }
  std::span<double> mutable_data() { return impl_->data; }
  const double* ptr() const { return impl_->data.data(); }
  double* mutable_ptr() { return impl_->data.data(); }
  std::vector<double>& storage() { return impl_->data; }

  double item() const {
    if (numel() != 1) throw UsageError("item() on tensor of shape " + shape_str(shape()));
    return impl_->data[0];
  }
  double operator[](std::int64_t i) const { return impl_->data[static_cast<std::size_t>(i)]; }

  bool requires_grad() const { return impl_->requires_grad; }
  Tensor& set_requires_grad(bool on) {
    impl_->requires_grad = on;
    if (on)
      impl_->grad.assign(impl_->data.size(), 0.0);
    else
      impl_->grad.clear();
    return *this;
  }
  bool has_grad() const { return impl_->requires_grad && impl_->grad.size() == impl_->data.size(); }
  std::span<const double> grad() const { return impl_->grad; }
  // Handle semantics: gradient buffers are writable through const handles.
  std::span<double> mutable_grad() const { return impl_->grad; }
  void zero_grad() { std::fill(impl_->grad.begin(), impl_->grad.end(), 0.0); }

  // Deep copy without gradient tracking.
  Tensor detach() const { return Tensor(shape(), impl_->data); }

  // Same storage viewed under a new shape (no gradient link).
  Tensor view_as(Shape shape) const { return Tensor(std::move(shape), impl_->data); }

  const detail::TensorImpl* id() const { return impl_.get(); }

 private:
  friend class Tape;
  std::shared_ptr<detail::TensorImpl> impl_;
};

inline void require_finite(const Tensor& t, const char* op) {
  for (double v : t.data())
    if (!std::isfinite(v)) throw NumericError(std::string("non-finite value produced by ") + op);
}

// Recorded sequence of differentiable ops.
class Tape {
 public:
  using BackwardFn = std::function<void()>;

  struct Entry {
    std::string name;
    std::vector<Tensor> inputs;
    Tensor output;
    BackwardFn backward;
  };

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  // Activates a tape on the current thread for the lifetime of the scope.
  class Scope {
   public:
    explicit Scope(Tape& tape) : prev_(current_slot()) { current_slot() = &tape; }
    ~Scope() { current_slot() = prev_; }
    Scope(const Scope&) = delete;
    Scope& operator=(const Scope&) = delete;

   private:
    Tape* prev_;
  };

  // Suspends recording for the lifetime of the guard.
  class NoGrad {
   public:
    NoGrad() : prev_(current_slot()) { current_slot() = nullptr; }
    ~NoGrad() { current_slot() = prev_; }
    NoGrad(const NoGrad&) = delete;
    NoGrad& operator=(const NoGrad&) = delete;

   private:
    Tape* prev_;
  };

  static Tape* current() { return current_slot(); }

  // Records `out` as produced from `inputs` when a tape is active and any input
  // tracks gradients. The backward closure reads out's grad and accumulates into
  // the inputs' grads.
  static void record(std::string name, std::vector<Tensor> inputs, Tensor& out, BackwardFn fn) {
    Tape* tape = current_slot();
    if (!tape) return;
    bool any = std::any_of(inputs.begin(), inputs.end(),
                           [](const Tensor& t) { return t.defined() && t.requires_grad(); });
    if (!any) return;
    out.impl_->requires_grad = true;
    tape->entries_.push_back(Entry{std::move(name), std::move(inputs), out, std::move(fn)});
  }

  std::size_t size() const { return entries_.size(); }
  const std::vector<Entry>& entries() const { return entries_; }
  void clear() { entries_.clear(); }

  // Accumulates d(loss)/d(leaf) into every reachable leaf's grad. Intermediate
  // grads are reset at the start of each call; leaf grads accumulate until zeroed.
  void backward(const Tensor& loss) {
    if (!loss.defined() || loss.numel() != 1)
      throw UsageError("backward requires a scalar loss");
    if (!loss.requires_grad()) throw UsageError("loss is not connected to the tape");

    for (auto& e : entries_) {
      auto& g = e.output.impl_->grad;
      g.assign(e.output.impl_->data.size(), 0.0);
    }
    bool produced_here = false;
    for (auto& e : entries_)
      if (e.output.id() == loss.id()) produced_here = true;
    if (!produced_here) {
      // Loss is itself a leaf.
      loss.impl_->grad[0] += 1.0;
      return;
    }
    loss.impl_->grad[0] = 1.0;

    std::unordered_set<const detail::TensorImpl*> live{loss.id()};
    for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) {
      if (!live.count(it->output.id())) continue;
      for (auto& in : it->inputs) {
        if (in.defined() && in.requires_grad()) {
          if (in.impl_->grad.size() != in.impl_->data.size())
            in.impl_->grad.assign(in.impl_->data.size(), 0.0);
          live.insert(in.id());
        }
      }
      it->backward();
    }
  }

 private:
  static Tape*& current_slot() {
    thread_local Tape* slot = nullptr;
    return slot;
  }
  std::vector<Entry> entries_;
};

// Branch (sign of the input) taken at every non-smooth point of leaky_relu,
// abs and abs_sum. A recorded trace can be replayed, which evaluates the smooth
// piece containing the recorded point even after inputs cross a kink.
class BranchTrace {
 public:
  enum class Mode { kRecord, kReplay };

  // Installs `trace` for the current thread in the given mode.
  class Use {
   public:
    Use(BranchTrace& trace, Mode mode) : prev_(slot()) {
      trace.mode_ = mode;
      trace.cursor_ = 0;
      if (mode == Mode::kRecord) trace.signs_.clear();
      slot() = &trace;
    }
    ~Use() { slot() = prev_; }
    Use(const Use&) = delete;
    Use& operator=(const Use&) = delete;

   private:
    BranchTrace* prev_;
  };

  static BranchTrace* current() { return slot(); }

  int sign(double v) {
    if (mode_ == Mode::kRecord) {
      const int s = (v > 0) - (v < 0);
      signs_.push_back(static_cast<std::int8_t>(s));
      return s;
    }
    if (cursor_ >= signs_.size()) throw std::logic_error("branch replay ran past the recorded trace");
    return signs_[cursor_++];
  }

  std::size_t size() const { return signs_.size(); }
  // True when a replay consumed exactly the recorded branches.
  bool replay_complete() const { return cursor_ == signs_.size(); }

 private:
  static BranchTrace*& slot() {
    thread_local BranchTrace* s = nullptr;
    return s;
  }
  Mode mode_ = Mode::kRecord;
  std::vector<std::int8_t> signs_;
  std::size_t cursor_ = 0;
};


}  // namespace scm
