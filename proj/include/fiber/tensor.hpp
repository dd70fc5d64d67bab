#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <type_traits>
#include <unordered_map>
#include <vector>

#include "fiber/error.hpp"
#include "fiber/rng.hpp"

namespace fiber {

enum class Dtype : uint8_t { F32 = 0, F64 = 1 };

inline size_t dtype_size(Dtype d) { return d == Dtype::F32 ? 4 : 8; }
inline const char* dtype_name(Dtype d) { return d == Dtype::F32 ? "f32" : "f64"; }
Dtype dtype_from_name(const std::string& name);

using Shape = std::vector<int64_t>;

int64_t shape_numel(const Shape& s);
std::string shape_str(const Shape& s);

class Tape;

// Allocator that skips value-initialization: op outputs are fully written by
// their kernels, so the usual resize() zero-fill is pure overhead. Kernels
// that accumulate (matmul, scatter-adds) zero their buffers explicitly.
template <class T>
struct RawAlloc : std::allocator<T> {
    template <class U>
    struct rebind {
        using other = RawAlloc<U>;
    };
    RawAlloc() = default;
    template <class U>
    RawAlloc(const RawAlloc<U>&) {}
    template <class U>
    void construct(U* p) noexcept(std::is_nothrow_default_constructible_v<U>) {
        ::new (static_cast<void*>(p)) U;
    }
    template <class U, class... Args>
    void construct(U* p, Args&&... args) {
        ::new (static_cast<void*>(p)) U(std::forward<Args>(args)...);
    }
};

template <class T>
using RawVec = std::vector<T, RawAlloc<T>>;

struct TensorImpl {
    Shape shape;
    Dtype dtype = Dtype::F64;
    RawVec<float> f32;
    RawVec<double> f64;
    bool requires_grad = false;
    // Set only on tensors produced by a recorded op; identifies the node on
    // the tape that created them. Leaves are tracked tape-locally instead.
    Tape* tape = nullptr;
    int64_t node = -1;
};

// Dense row-major tensor. A Tensor is a cheap value handle onto shared,
// immutable storage; copies alias the same data. `mutable_data` exists for
// the optimizer and initializers, which mutate parameters between tapes.
class Tensor {
  public:
    Tensor() = default;

    static Tensor zeros(Shape shape, Dtype dtype = Dtype::F64, bool requires_grad = false);
    static Tensor full(Shape shape, double value, Dtype dtype = Dtype::F64);
    static Tensor scalar(double value, Dtype dtype = Dtype::F64);
    static Tensor from_values(Shape shape, std::span<const double> values, Dtype dtype = Dtype::F64,
                              bool requires_grad = false);
    static Tensor uniform(Shape shape, double lo, double hi, Rng& rng, Dtype dtype = Dtype::F64,
                          bool requires_grad = false);

    bool defined() const { return impl_ != nullptr; }
    const Shape& shape() const { return impl_->shape; }
    int ndim() const { return static_cast<int>(impl_->shape.size()); }
    int64_t dim(int i) const;  // negative i counts from the back
    int64_t numel() const { return shape_numel(impl_->shape); }
    Dtype dtype() const { return impl_->dtype; }

    bool requires_grad() const { return impl_ && impl_->requires_grad; }
    Tensor& set_requires_grad(bool v) {
        impl_->requires_grad = v;
        return *this;
    }

    template <class T>
    std::span<const T> data() const;
    template <class T>
    std::span<T> mutable_data();

    double value_at(int64_t flat_index) const;
    double scalar_value() const;  // requires numel() == 1
    std::vector<double> to_doubles() const;

    Tensor astype(Dtype target) const;  // returns *this if already target
    Tensor detached_clone() const;      // fresh storage, no tape linkage

    TensorImpl* impl() const { return impl_.get(); }

  private:
    explicit Tensor(std::shared_ptr<TensorImpl> impl) : impl_(std::move(impl)) {}
    std::shared_ptr<TensorImpl> impl_;
    friend class Tape;
    friend Tensor make_tensor(Shape, Dtype, bool);
};

Tensor make_tensor(Shape shape, Dtype dtype, bool requires_grad);

// ---------------------------------------------------------------------------
// Tape: define-by-run record of one forward pass. Nodes are appended in
// execution order, which is a topological order; backward walks them once
// in reverse. A tape serves one backward call and must be reset (or
// discarded) before the next.
// ---------------------------------------------------------------------------

using BackwardFn = std::function<std::vector<Tensor>(const Tensor& out_grad)>;

class Tape {
  public:
    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;
    ~Tape();

    // Registers a leaf so its gradient can be queried even if zero.
    void watch(const Tensor& leaf);

    // Backward from a scalar loss recorded on this tape, seeded with 1.
    void backward(const Tensor& loss);

    // Vector-Jacobian product: backward from any recorded output with an
    // explicit upstream gradient. Used to chain tapes (a downstream tape's
    // gradient for a value seeds the tape that produced it).
    void backward_from(const Tensor& out, const Tensor& seed);

    // Gradient of a leaf or recorded tensor after backward. Returns zeros
    // for watched leaves no gradient reached, nullopt for unknown tensors.
    std::optional<Tensor> grad(const Tensor& t) const;

    void reset();
    size_t node_count() const { return nodes_.size(); }
    bool backward_done() const { return done_; }

    static Tape* active();

    // Internal: used by op implementations.
    int64_t record_node(std::vector<int64_t> parents, BackwardFn fn);
    int64_t node_for_input(const Tensor& t);        // -1 if untracked constant
    int64_t node_of(const Tensor& t) const;         // no registration
    void bind_output(Tensor& out, int64_t node_id);

  private:
    struct Node {
        std::vector<int64_t> parents;
        BackwardFn fn;
    };
    void accumulate(int64_t node_id, const Tensor& g);

    std::vector<Node> nodes_;
    std::unordered_map<const TensorImpl*, int64_t> leaves_;
    std::vector<Tensor> grads_;
    bool done_ = false;

    friend struct TapeScope;
};

// RAII: makes a tape the active recorder on this thread.
struct TapeScope {
    explicit TapeScope(Tape& t);
    ~TapeScope();
};

// RAII: suspends recording (backward rules run under this).
struct NoGradScope {
    NoGradScope();
    ~NoGradScope();
};

// ---------------------------------------------------------------------------
// Primitive operations. Elementwise binaries broadcast a scalar or a tensor
// whose shape is a suffix of the other operand's shape (tiling over the
// leading axes); anything else is rejected. Every op registers its backward
// rule when a tape is active and an input is tracked.
// ---------------------------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor divide(const Tensor& a, const Tensor& b);
Tensor add_scalar(const Tensor& a, double s);
Tensor mul_scalar(const Tensor& a, double s);

// a: [..., m, k], b: [..., k, n] -> [..., m, n]; leading axes must match or
// be absent on one side.
Tensor matmul(const Tensor& a, const Tensor& b);

// Fused-transpose variants; equivalent to matmul with a transposed operand
// but without materializing the transpose.
// a: [..., m, k], b: [..., n, k] -> [..., m, n]  (a @ b^T)
Tensor matmul_nt(const Tensor& a, const Tensor& b);
// a: [..., k, m], b: [..., k, n] -> [..., m, n]  (a^T @ b)
Tensor matmul_tn(const Tensor& a, const Tensor& b);

Tensor transpose(const Tensor& a, int axis_a = -2, int axis_b = -1);
Tensor reshape(const Tensor& a, Shape shape);
Tensor concat(std::span<const Tensor> parts, int axis);

// Row gather along axis 0; out[i] = a[idx[i]]. Backward scatter-adds.
Tensor gather_rows(const Tensor& a, std::vector<int64_t> idx);

Tensor reduce_sum(const Tensor& a, int axis, bool keepdims = false);
Tensor reduce_mean(const Tensor& a, int axis, bool keepdims = false);
Tensor reduce_sum_all(const Tensor& a);   // -> scalar (shape {1})
Tensor reduce_mean_all(const Tensor& a);  // -> scalar (shape {1})

Tensor softmax(const Tensor& a, int axis);
// keep[i] == 0 excludes lane i from max and normalization; its output is 0.
// A row with nothing kept is a contract violation.
Tensor masked_softmax(const Tensor& a, int axis, const std::vector<uint8_t>& keep);
Tensor log_softmax(const Tensor& a, int axis);

// Normalizes over the last axis: zero mean, unit variance, then gain/bias.
Tensor layer_norm(const Tensor& a, const Tensor& gain, const Tensor& bias, double eps = 1e-5);

Tensor gelu(const Tensor& a);  // exact-erf form
Tensor relu(const Tensor& a);
Tensor sigmoid(const Tensor& a);
Tensor softplus(const Tensor& a);
Tensor exp(const Tensor& a);
Tensor log(const Tensor& a);
Tensor sqrt(const Tensor& a);
Tensor minimum(const Tensor& a, const Tensor& b);
Tensor maximum(const Tensor& a, const Tensor& b);

// ---------------------------------------------------------------------------
// Finite-difference oracle. Compares the tape gradient of f at x against
// central differences (f(x + h e_i) - f(x - h e_i)) / 2h and returns the
// maximum elementwise error, relative to max(1, |analytic|, |numeric|).
// ---------------------------------------------------------------------------
double finite_diff_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x,
                         double h = 1e-5);

}  // namespace fiber
