#include "fiber/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <numeric>
#include <sstream>

namespace fiber {

namespace {

constexpr double kPi = 3.14159265358979323846;
constexpr double kInvSqrt2 = 0.70710678118654752440;

thread_local std::vector<Tape*> g_tape_stack;

int norm_axis(int axis, int ndim) {
    const int a = axis < 0 ? axis + ndim : axis;
    if (a < 0 || a >= ndim) {
        throw ShapeError("axis " + std::to_string(axis) + " out of range for rank " +
                         std::to_string(ndim));
    }
    return a;
}

template <class T>
RawVec<T>& storage(TensorImpl& im);
template <>
RawVec<float>& storage<float>(TensorImpl& im) {
    return im.f32;
}
template <>
RawVec<double>& storage<double>(TensorImpl& im) {
    return im.f64;
}

template <class F>
decltype(auto) with_scalar(Dtype dt, F&& f) {
    if (dt == Dtype::F64) return f(double{});
    return f(float{});
}

void require_same_dtype(const Tensor& a, const Tensor& b, const char* op) {
    if (a.dtype() != b.dtype()) {
        throw ShapeError(std::string(op) + ": dtype mismatch (" + dtype_name(a.dtype()) + " vs " +
                         dtype_name(b.dtype()) + ")");
    }
}

// Suffix-broadcast check: returns true if `small` equals the trailing axes of
// `big` (a scalar counts as an empty suffix).
bool is_suffix(const Shape& small, const Shape& big) {
    if (small.size() > big.size()) return false;
    return std::equal(small.rbegin(), small.rend(), big.rbegin());
}

struct BinaryPlan {
    bool a_is_big = true;
    int64_t repeats = 1;
    int64_t small_numel = 1;
};

BinaryPlan plan_binary(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() == b.shape()) {
        return {true, 1, a.numel()};
    }
    if (b.numel() == 1 || is_suffix(b.shape(), a.shape())) {
        return {true, a.numel() / b.numel(), b.numel()};
    }
    if (a.numel() == 1 || is_suffix(a.shape(), b.shape())) {
        return {false, b.numel() / a.numel(), a.numel()};
    }
    throw ShapeError(std::string(op) + ": shapes " + shape_str(a.shape()) + " and " +
                     shape_str(b.shape()) + " do not broadcast (suffix or scalar only)");
}

// Sums `g` down to `target` under the suffix-broadcast rule.
Tensor sum_to_suffix(const Tensor& g, const Shape& target) {
    if (g.shape() == target) return g;
    const int64_t small = shape_numel(target);
    const int64_t repeats = g.numel() / std::max<int64_t>(small, 1);
    Tensor out = make_tensor(target, g.dtype(), false);
    with_scalar(g.dtype(), [&](auto tag) {
        using T = decltype(tag);
        auto gs = g.data<T>();
        auto os = out.mutable_data<T>();
        std::vector<double> acc(static_cast<size_t>(small), 0.0);
        for (int64_t r = 0; r < repeats; ++r) {
            const T* blk = gs.data() + r * small;
            for (int64_t j = 0; j < small; ++j) acc[static_cast<size_t>(j)] += blk[j];
        }
        for (int64_t j = 0; j < small; ++j) os[j] = static_cast<T>(acc[static_cast<size_t>(j)]);
        return Tensor();
    });
    return out;
}

struct AxisSplit {
    int64_t outer = 1, n = 1, inner = 1;
};

AxisSplit split_at(const Shape& s, int axis) {
    AxisSplit sp;
    for (int i = 0; i < axis; ++i) sp.outer *= s[static_cast<size_t>(i)];
    sp.n = s[static_cast<size_t>(axis)];
    for (size_t i = static_cast<size_t>(axis) + 1; i < s.size(); ++i) sp.inner *= s[i];
    return sp;
}

void record(Tensor& out, std::initializer_list<const Tensor*> ins, BackwardFn fn) {
    Tape* tp = Tape::active();
    if (tp == nullptr) return;
    std::vector<int64_t> parents;
    parents.reserve(ins.size());
    bool any = false;
    for (const Tensor* t : ins) {
        const int64_t n = tp->node_for_input(*t);
        parents.push_back(n);
        any = any || n >= 0;
    }
    if (!any) return;
    tp->bind_output(out, tp->record_node(std::move(parents), std::move(fn)));
}

// Elementwise unary helper: fwd(x) and dfdx given (x, y, g).
template <class Fwd>
Tensor unary_forward(const Tensor& a, Fwd&& fwd) {
    Tensor out = make_tensor(a.shape(), a.dtype(), false);
    with_scalar(a.dtype(), [&](auto tag) {
        using T = decltype(tag);
        auto as = a.data<T>();
        auto os = out.mutable_data<T>();
        for (int64_t i = 0; i < a.numel(); ++i) {
            os[i] = static_cast<T>(fwd(static_cast<double>(as[i])));
        }
        return Tensor();
    });
    return out;
}

template <class Dfn>
Tensor unary_backward(const Tensor& a, const Tensor& out, const Tensor& g, Dfn&& dfdx) {
    Tensor gx = make_tensor(a.shape(), a.dtype(), false);
    with_scalar(a.dtype(), [&](auto tag) {
        using T = decltype(tag);
        auto as = a.data<T>();
        auto ys = out.data<T>();
        auto gs = g.data<T>();
        auto os = gx.mutable_data<T>();
        for (int64_t i = 0; i < a.numel(); ++i) {
            os[i] = static_cast<T>(static_cast<double>(gs[i]) *
                                   dfdx(static_cast<double>(as[i]), static_cast<double>(ys[i])));
        }
        return Tensor();
    });
    return gx;
}

template <class T>
void gemm(const T* a, const T* b, T* c, int64_t m, int64_t k, int64_t n) {
    // c (m x n, zeroed) += a (m x k) * b (k x n); saxpy order so the inner
    // loop runs contiguously over rows of b and c.
    for (int64_t i = 0; i < m; ++i) {
        T* crow = c + i * n;
        const T* arow = a + i * k;
        for (int64_t p = 0; p < k; ++p) {
            const T av = arow[p];
            const T* brow = b + p * n;
            for (int64_t j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

template <class T>
void gemm_nt(const T* a, const T* b, T* c, int64_t m, int64_t k, int64_t n) {
    // c (m x n, zeroed) += a (m x k) * b (n x k)^T; dot-product kernel, both
    // streams contiguous. Eight independent partial sums keep the reduction
    // vectorizable without reassociating a serial chain.
    constexpr int64_t L = 8;
    for (int64_t i = 0; i < m; ++i) {
        const T* arow = a + i * k;
        T* crow = c + i * n;
        for (int64_t j = 0; j < n; ++j) {
            const T* brow = b + j * k;
            T lanes[L] = {};
            int64_t p = 0;
            for (; p + L <= k; p += L) {
                for (int64_t l = 0; l < L; ++l) lanes[l] += arow[p + l] * brow[p + l];
            }
            T acc = T(0);
            for (; p < k; ++p) acc += arow[p] * brow[p];
            for (int64_t l = 0; l < L; ++l) acc += lanes[l];
            crow[j] += acc;
        }
    }
}

template <class T>
void gemm_tn(const T* a, const T* b, T* c, int64_t k, int64_t m, int64_t n) {
    // c (m x n, zeroed) += a (k x m)^T * b (k x n); saxpy over the shared
    // leading axis.
    for (int64_t p = 0; p < k; ++p) {
        const T* arow = a + p * m;
        const T* brow = b + p * n;
        for (int64_t i = 0; i < m; ++i) {
            const T av = arow[i];
            T* crow = c + i * n;
            for (int64_t j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

void zero_buffer(Tensor& t) {
    if (t.dtype() == Dtype::F32) {
        std::fill(t.impl()->f32.begin(), t.impl()->f32.end(), 0.0f);
    } else {
        std::fill(t.impl()->f64.begin(), t.impl()->f64.end(), 0.0);
    }
}

}  // namespace

// ---------------------------------------------------------------------------
// Shape and construction
// ---------------------------------------------------------------------------

int64_t shape_numel(const Shape& s) {
    int64_t n = 1;
    for (int64_t e : s) n *= e;
    return n;
}

std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << "[";
    for (size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
    os << "]";
    return os.str();
}

Dtype dtype_from_name(const std::string& name) {
    if (name == "f32") return Dtype::F32;
    if (name == "f64") return Dtype::F64;
    throw ConfigError("unknown dtype '" + name + "' (expected f32 or f64)");
}

Tensor make_tensor(Shape shape, Dtype dtype, bool requires_grad) {
    for (int64_t e : shape) {
        if (e <= 0) throw ShapeError("non-positive extent in shape " + shape_str(shape));
    }
    auto impl = std::make_shared<TensorImpl>();
    impl->shape = std::move(shape);
    impl->dtype = dtype;
    impl->requires_grad = requires_grad;
    const auto n = static_cast<size_t>(shape_numel(impl->shape));
    if (dtype == Dtype::F32) {
        impl->f32.resize(n);  // uninitialized; see RawAlloc
    } else {
        impl->f64.resize(n);
    }
    return Tensor(std::move(impl));
}

Tensor Tensor::zeros(Shape shape, Dtype dtype, bool requires_grad) {
    Tensor t = make_tensor(std::move(shape), dtype, requires_grad);
    zero_buffer(t);
    return t;
}

Tensor Tensor::full(Shape shape, double value, Dtype dtype) {
    Tensor t = make_tensor(std::move(shape), dtype, false);
    with_scalar(dtype, [&](auto tag) {
        using T = decltype(tag);
        auto d = t.mutable_data<T>();
        std::fill(d.begin(), d.end(), static_cast<T>(value));
        return Tensor();
    });
    return t;
}

Tensor Tensor::scalar(double value, Dtype dtype) { return full({1}, value, dtype); }

Tensor Tensor::from_values(Shape shape, std::span<const double> values, Dtype dtype,
                           bool requires_grad) {
    Tensor t = make_tensor(std::move(shape), dtype, requires_grad);
    if (static_cast<int64_t>(values.size()) != t.numel()) {
        throw ShapeError("from_values: " + std::to_string(values.size()) +
                         " values for shape " + shape_str(t.shape()));
    }
    with_scalar(dtype, [&](auto tag) {
        using T = decltype(tag);
        auto d = t.mutable_data<T>();
        for (size_t i = 0; i < values.size(); ++i) d[static_cast<int64_t>(i)] = static_cast<T>(values[i]);
        return Tensor();
    });
    return t;
}

Tensor Tensor::uniform(Shape shape, double lo, double hi, Rng& rng, Dtype dtype,
                       bool requires_grad) {
    Tensor t = make_tensor(std::move(shape), dtype, requires_grad);
    with_scalar(dtype, [&](auto tag) {
        using T = decltype(tag);
        auto d = t.mutable_data<T>();
        for (int64_t i = 0; i < t.numel(); ++i) d[i] = static_cast<T>(rng.uniform(lo, hi));
        return Tensor();
    });
    return t;
}

int64_t Tensor::dim(int i) const {
    const int nd = ndim();
    const int a = i < 0 ? i + nd : i;
    if (a < 0 || a >= nd) throw ShapeError("dim index out of range");
    return impl_->shape[static_cast<size_t>(a)];
}

template <class T>
std::span<const T> Tensor::data() const {
    auto& v = storage<T>(*impl_);
    if (static_cast<int64_t>(v.size()) != numel()) {
        throw ContractError(std::string("tensor data accessed as ") +
                            (sizeof(T) == 4 ? "f32" : "f64") + " but dtype is " +
                            dtype_name(impl_->dtype));
    }
    return {v.data(), v.size()};
}

template <class T>
std::span<T> Tensor::mutable_data() {
    auto& v = storage<T>(*impl_);
    if (static_cast<int64_t>(v.size()) != numel()) {
        throw ContractError(std::string("tensor data accessed as ") +
                            (sizeof(T) == 4 ? "f32" : "f64") + " but dtype is " +
                            dtype_name(impl_->dtype));
    }
    return {v.data(), v.size()};
}

template std::span<const float> Tensor::data<float>() const;
template std::span<const double> Tensor::data<double>() const;
template std::span<float> Tensor::mutable_data<float>();
template std::span<double> Tensor::mutable_data<double>();

double Tensor::value_at(int64_t i) const {
    if (i < 0 || i >= numel()) throw ShapeError("value_at: index out of range");
    return dtype() == Dtype::F32 ? static_cast<double>(impl_->f32[static_cast<size_t>(i)])
                                 : impl_->f64[static_cast<size_t>(i)];
}

double Tensor::scalar_value() const {
    if (numel() != 1) {
        throw ContractError("scalar_value on tensor of shape " + shape_str(shape()));
    }
    return value_at(0);
}

std::vector<double> Tensor::to_doubles() const {
    std::vector<double> out(static_cast<size_t>(numel()));
    for (int64_t i = 0; i < numel(); ++i) out[static_cast<size_t>(i)] = value_at(i);
    return out;
}

Tensor Tensor::astype(Dtype target) const {
    if (dtype() == target) return *this;
    Tensor t = make_tensor(shape(), target, false);
    with_scalar(target, [&](auto tag) {
        using T = decltype(tag);
        auto d = t.mutable_data<T>();
        for (int64_t i = 0; i < numel(); ++i) d[i] = static_cast<T>(value_at(i));
        return Tensor();
    });
    return t;
}

Tensor Tensor::detached_clone() const {
    Tensor t = make_tensor(shape(), dtype(), false);
    if (dtype() == Dtype::F32) {
        t.impl_->f32 = impl_->f32;
    } else {
        t.impl_->f64 = impl_->f64;
    }
    return t;
}

// ---------------------------------------------------------------------------
// Tape
// ---------------------------------------------------------------------------

Tape::~Tape() = default;

Tape* Tape::active() { return g_tape_stack.empty() ? nullptr : g_tape_stack.back(); }

TapeScope::TapeScope(Tape& t) { g_tape_stack.push_back(&t); }
TapeScope::~TapeScope() { g_tape_stack.pop_back(); }

NoGradScope::NoGradScope() { g_tape_stack.push_back(nullptr); }
NoGradScope::~NoGradScope() { g_tape_stack.pop_back(); }

int64_t Tape::record_node(std::vector<int64_t> parents, BackwardFn fn) {
    if (done_) throw ContractError("tape already consumed by backward; reset it first");
    nodes_.push_back(Node{std::move(parents), std::move(fn)});
    return static_cast<int64_t>(nodes_.size()) - 1;
}

int64_t Tape::node_of(const Tensor& t) const {
    if (!t.defined()) return -1;
    if (t.impl()->tape == this && t.impl()->node >= 0) return t.impl()->node;
    auto it = leaves_.find(t.impl());
    return it == leaves_.end() ? -1 : it->second;
}

int64_t Tape::node_for_input(const Tensor& t) {
    const int64_t known = node_of(t);
    if (known >= 0) return known;
    if (!t.requires_grad()) return -1;
    const int64_t id = record_node({}, nullptr);
    leaves_.emplace(t.impl(), id);
    return id;
}

void Tape::bind_output(Tensor& out, int64_t node_id) {
    out.impl_->tape = this;
    out.impl_->node = node_id;
    out.impl_->requires_grad = true;
}

void Tape::watch(const Tensor& leaf) {
    if (!leaf.requires_grad()) {
        throw ContractError("watch: tensor does not require gradients");
    }
    node_for_input(leaf);
}

void Tape::accumulate(int64_t node_id, const Tensor& g) {
    if (!grads_[static_cast<size_t>(node_id)].defined()) {
        grads_[static_cast<size_t>(node_id)] = g;
    } else {
        grads_[static_cast<size_t>(node_id)] = add(grads_[static_cast<size_t>(node_id)], g);
    }
}

void Tape::backward(const Tensor& loss) {
    if (loss.numel() != 1) {
        throw ContractError("backward: loss must be scalar, got shape " + shape_str(loss.shape()));
    }
    backward_from(loss, Tensor::full({1}, 1.0, loss.dtype()));
}

void Tape::backward_from(const Tensor& out, const Tensor& seed) {
    if (done_) throw ContractError("backward already ran on this tape; reset it first");
    if (out.impl()->tape != this || out.impl()->node < 0) {
        throw ContractError("backward_from: tensor was not recorded on this tape");
    }
    if (seed.shape() != out.shape() || seed.dtype() != out.dtype()) {
        throw ShapeError("backward_from: seed shape " + shape_str(seed.shape()) +
                         " does not match output shape " + shape_str(out.shape()));
    }
    done_ = true;
    grads_.assign(nodes_.size(), Tensor());
    NoGradScope ng;
    accumulate(out.impl()->node, seed);
    for (int64_t i = out.impl()->node; i >= 0; --i) {
        Tensor& g = grads_[static_cast<size_t>(i)];
        if (!g.defined()) continue;
        const Node& node = nodes_[static_cast<size_t>(i)];
        if (!node.fn) continue;  // leaf
        std::vector<Tensor> parent_grads = node.fn(g);
        for (size_t p = 0; p < node.parents.size(); ++p) {
            if (node.parents[p] >= 0 && p < parent_grads.size() && parent_grads[p].defined()) {
                accumulate(node.parents[p], parent_grads[p]);
            }
        }
    }
}

std::optional<Tensor> Tape::grad(const Tensor& t) const {
    const int64_t id = node_of(t);
    if (id < 0) return std::nullopt;
    if (!done_) throw ContractError("grad queried before backward");
    const Tensor& g = grads_[static_cast<size_t>(id)];
    if (g.defined()) return g;
    return Tensor::zeros(t.shape(), t.dtype());
}

void Tape::reset() {
    nodes_.clear();
    leaves_.clear();
    grads_.clear();
    done_ = false;
}

// ---------------------------------------------------------------------------
// Elementwise binaries
// ---------------------------------------------------------------------------

namespace {

template <class Op>
Tensor binary_forward(const Tensor& a, const Tensor& b, const char* name, Op&& op) {
    require_same_dtype(a, b, name);
    const BinaryPlan plan = plan_binary(a, b, name);
    const Tensor& big = plan.a_is_big ? a : b;
    const Tensor& small = plan.a_is_big ? b : a;
    Tensor out = make_tensor(big.shape(), big.dtype(), false);
    with_scalar(a.dtype(), [&](auto tag) {
        using T = decltype(tag);
        auto bs = big.data<T>();
        auto ss = small.data<T>();
        auto os = out.mutable_data<T>();
        const bool a_big = plan.a_is_big;
        for (int64_t r = 0; r < plan.repeats; ++r) {
            const int64_t base = r * plan.small_numel;
            for (int64_t j = 0; j < plan.small_numel; ++j) {
                const T bv = bs[base + j];
                const T sv = ss[j];
                os[base + j] = a_big ? op(bv, sv) : op(sv, bv);
            }
        }
        return Tensor();
    });
    return out;
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
    Tensor out = binary_forward(a, b, "add", [](auto x, auto y) { return x + y; });
    record(out, {&a, &b}, [a, b](const Tensor& g) -> std::vector<Tensor> {
        return {sum_to_suffix(g, a.shape()), sum_to_suffix(g, b.shape())};
    });
    return out;
}

Tensor sub(const Tensor& a, const Tensor& b) {
    Tensor out = binary_forward(a, b, "sub", [](auto x, auto y) { return x - y; });
    record(out, {&a, &b}, [a, b](const Tensor& g) -> std::vector<Tensor> {
        return {sum_to_suffix(g, a.shape()), sum_to_suffix(mul_scalar(g, -1.0), b.shape())};
    });
    return out;
}

Tensor mul(const Tensor& a, const Tensor& b) {
    Tensor out = binary_forward(a, b, "mul", [](auto x, auto y) { return x * y; });
    record(out, {&a, &b}, [a, b](const Tensor& g) -> std::vector<Tensor> {
        return {sum_to_suffix(mul(g, b), a.shape()), sum_to_suffix(mul(g, a), b.shape())};
    });
    return out;
}

Tensor divide(const Tensor& a, const Tensor& b) {
    Tensor out = binary_forward(a, b, "divide", [](auto x, auto y) { return x / y; });
    record(out, {&a, &b}, [a, b, out](const Tensor& g) -> std::vector<Tensor> {
        Tensor ga = sum_to_suffix(divide(g, b), a.shape());
        Tensor gb = sum_to_suffix(mul_scalar(mul(g, divide(out, b)), -1.0), b.shape());
        return {ga, gb};
    });
    return out;
}

Tensor minimum(const Tensor& a, const Tensor& b) {
    Tensor out = binary_forward(a, b, "minimum", [](auto x, auto y) { return x < y ? x : y; });
    // Ties route the gradient to the first operand.
    record(out, {&a, &b}, [a, b](const Tensor& g) -> std::vector<Tensor> {
        Tensor take_a = binary_forward(a, b, "minimum", [](auto x, auto y) {
            using T = decltype(x);
            return x <= y ? T(1) : T(0);
        });
        Tensor take_b = binary_forward(a, b, "minimum", [](auto x, auto y) {
            using T = decltype(x);
            return x <= y ? T(0) : T(1);
        });
        return {sum_to_suffix(mul(g, take_a), a.shape()),
                sum_to_suffix(mul(g, take_b), b.shape())};
    });
    return out;
}

Tensor maximum(const Tensor& a, const Tensor& b) {
    Tensor out = binary_forward(a, b, "maximum", [](auto x, auto y) { return x > y ? x : y; });
    record(out, {&a, &b}, [a, b](const Tensor& g) -> std::vector<Tensor> {
        Tensor take_a = binary_forward(a, b, "maximum", [](auto x, auto y) {
            using T = decltype(x);
            return x >= y ? T(1) : T(0);
        });
        Tensor take_b = binary_forward(a, b, "maximum", [](auto x, auto y) {
            using T = decltype(x);
            return x >= y ? T(0) : T(1);
        });
        return {sum_to_suffix(mul(g, take_a), a.shape()),
                sum_to_suffix(mul(g, take_b), b.shape())};
    });
    return out;
}

Tensor add_scalar(const Tensor& a, double s) {
    Tensor out = unary_forward(a, [s](double x) { return x + s; });
    record(out, {&a}, [](const Tensor& g) -> std::vector<Tensor> { return {g}; });
    return out;
}

Tensor mul_scalar(const Tensor& a, double s) {
    Tensor out = unary_forward(a, [s](double x) { return x * s; });
    record(out, {&a}, [s](const Tensor& g) -> std::vector<Tensor> { return {mul_scalar(g, s)}; });
    return out;
}

// ---------------------------------------------------------------------------
// matmul / transpose / reshape / concat / gather
// ---------------------------------------------------------------------------

namespace {

enum class MatKind { NN, NT, TN };

Tensor matmul_impl(const Tensor& a, const Tensor& b, MatKind kind) {
    require_same_dtype(a, b, "matmul");
    if (a.ndim() < 2 || b.ndim() < 2) {
        throw ShapeError("matmul: operands must have rank >= 2, got " + shape_str(a.shape()) +
                         " and " + shape_str(b.shape()));
    }
    // a's trailing pair is (m, k) — or (k, m) for TN; b's is (k, n) — or
    // (n, k) for NT.
    const int64_t m = kind == MatKind::TN ? a.dim(-1) : a.dim(-2);
    const int64_t ka = kind == MatKind::TN ? a.dim(-2) : a.dim(-1);
    const int64_t n = kind == MatKind::NT ? b.dim(-2) : b.dim(-1);
    const int64_t kb = kind == MatKind::NT ? b.dim(-1) : b.dim(-2);
    if (ka != kb) {
        throw ShapeError("matmul: inner extents differ, " + shape_str(a.shape()) + " x " +
                         shape_str(b.shape()));
    }
    Shape lead_a(a.shape().begin(), a.shape().end() - 2);
    Shape lead_b(b.shape().begin(), b.shape().end() - 2);
    Shape lead;
    if (lead_a == lead_b) {
        lead = lead_a;
    } else if (lead_a.empty()) {
        lead = lead_b;
    } else if (lead_b.empty()) {
        lead = lead_a;
    } else {
        throw ShapeError("matmul: leading axes mismatch, " + shape_str(a.shape()) + " x " +
                         shape_str(b.shape()));
    }
    Shape out_shape = lead;
    out_shape.push_back(m);
    out_shape.push_back(n);
    Tensor out = make_tensor(out_shape, a.dtype(), false);
    zero_buffer(out);  // the kernels accumulate
    const int64_t batches = shape_numel(lead);
    const bool a_batched = !lead_a.empty();
    const bool b_batched = !lead_b.empty();
    with_scalar(a.dtype(), [&](auto tag) {
        using T = decltype(tag);
        auto as = a.data<T>();
        auto bs = b.data<T>();
        auto os = out.mutable_data<T>();
        for (int64_t bt = 0; bt < batches; ++bt) {
            const T* ap = as.data() + (a_batched ? bt * m * ka : 0);
            const T* bp = bs.data() + (b_batched ? bt * ka * n : 0);
            T* op = os.data() + bt * m * n;
            switch (kind) {
                case MatKind::NN: gemm(ap, bp, op, m, ka, n); break;
                case MatKind::NT: gemm_nt(ap, bp, op, m, ka, n); break;
                case MatKind::TN: gemm_tn(ap, bp, op, ka, m, n); break;
            }
        }
        return Tensor();
    });
    switch (kind) {
        case MatKind::NN:
            record(out, {&a, &b}, [a, b](const Tensor& g) -> std::vector<Tensor> {
                Tensor ga = sum_to_suffix(matmul_nt(g, b), a.shape());
                Tensor gb = sum_to_suffix(matmul_tn(a, g), b.shape());
                return {ga, gb};
            });
            break;
        case MatKind::NT:
            record(out, {&a, &b}, [a, b](const Tensor& g) -> std::vector<Tensor> {
                Tensor ga = sum_to_suffix(matmul(g, b), a.shape());
                Tensor gb = sum_to_suffix(matmul_tn(g, a), b.shape());
                return {ga, gb};
            });
            break;
        case MatKind::TN:
            record(out, {&a, &b}, [a, b](const Tensor& g) -> std::vector<Tensor> {
                Tensor ga = sum_to_suffix(matmul_nt(b, g), a.shape());
                Tensor gb = sum_to_suffix(matmul(a, g), b.shape());
                return {ga, gb};
            });
            break;
    }
    return out;
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) { return matmul_impl(a, b, MatKind::NN); }
Tensor matmul_nt(const Tensor& a, const Tensor& b) { return matmul_impl(a, b, MatKind::NT); }
Tensor matmul_tn(const Tensor& a, const Tensor& b) { return matmul_impl(a, b, MatKind::TN); }

Tensor transpose(const Tensor& a, int axis_a, int axis_b) {
    const int nd = a.ndim();
    int x = norm_axis(axis_a, nd), y = norm_axis(axis_b, nd);
    if (x == y) return a;
    if (x > y) std::swap(x, y);
    Shape out_shape = a.shape();
    std::swap(out_shape[static_cast<size_t>(x)], out_shape[static_cast<size_t>(y)]);

    // View as [pre, A, mid, B, post]; output iterates with A and B swapped.
    int64_t pre = 1, mid = 1, post = 1;
    for (int i = 0; i < x; ++i) pre *= a.dim(i);
    for (int i = x + 1; i < y; ++i) mid *= a.dim(i);
    for (int i = y + 1; i < nd; ++i) post *= a.dim(i);
    const int64_t A = a.dim(x), B = a.dim(y);

    Tensor out = make_tensor(std::move(out_shape), a.dtype(), false);
    with_scalar(a.dtype(), [&](auto tag) {
        using T = decltype(tag);
        auto src = a.data<T>();
        auto dst = out.mutable_data<T>();
        int64_t w = 0;
        for (int64_t p = 0; p < pre; ++p) {
            for (int64_t jb = 0; jb < B; ++jb) {
                for (int64_t m2 = 0; m2 < mid; ++m2) {
                    for (int64_t ia = 0; ia < A; ++ia) {
                        const int64_t r = ((p * A + ia) * mid + m2) * B + jb;
                        std::memcpy(dst.data() + w * post, src.data() + r * post,
                                    static_cast<size_t>(post) * sizeof(T));
                        ++w;
                    }
                }
            }
        }
        return Tensor();
    });
    record(out, {&a}, [x, y](const Tensor& g) -> std::vector<Tensor> {
        return {transpose(g, x, y)};
    });
    return out;
}

Tensor reshape(const Tensor& a, Shape shape) {
    if (shape_numel(shape) != a.numel()) {
        throw ShapeError("reshape: cannot view " + shape_str(a.shape()) + " as " +
                         shape_str(shape));
    }
    Tensor out = make_tensor(shape, a.dtype(), false);
    if (a.dtype() == Dtype::F32) {
        out.impl()->f32 = a.impl()->f32;
    } else {
        out.impl()->f64 = a.impl()->f64;
    }
    record(out, {&a}, [src = a.shape()](const Tensor& g) -> std::vector<Tensor> {
        return {reshape(g, src)};
    });
    return out;
}

Tensor concat(std::span<const Tensor> parts, int axis) {
    if (parts.empty()) throw ShapeError("concat: no inputs");
    const int nd = parts[0].ndim();
    const int ax = norm_axis(axis, nd);
    int64_t total = 0;
    for (const Tensor& p : parts) {
        if (p.ndim() != nd || p.dtype() != parts[0].dtype()) {
            throw ShapeError("concat: rank or dtype mismatch");
        }
        for (int i = 0; i < nd; ++i) {
            if (i != ax && p.dim(i) != parts[0].dim(i)) {
                throw ShapeError("concat: shapes " + shape_str(parts[0].shape()) + " and " +
                                 shape_str(p.shape()) + " differ off axis " + std::to_string(ax));
            }
        }
        total += p.dim(ax);
    }
    Shape out_shape = parts[0].shape();
    out_shape[static_cast<size_t>(ax)] = total;
    Tensor out = make_tensor(out_shape, parts[0].dtype(), false);
    const AxisSplit sp = split_at(out_shape, ax);
    with_scalar(out.dtype(), [&](auto tag) {
        using T = decltype(tag);
        auto os = out.mutable_data<T>();
        int64_t at = 0;
        for (const Tensor& p : parts) {
            auto ps = p.data<T>();
            const int64_t rows = p.dim(ax);
            for (int64_t o = 0; o < sp.outer; ++o) {
                std::memcpy(os.data() + (o * total + at) * sp.inner,
                            ps.data() + o * rows * sp.inner,
                            static_cast<size_t>(rows * sp.inner) * sizeof(T));
            }
            at += rows;
        }
        return Tensor();
    });

    std::vector<Tensor> owned(parts.begin(), parts.end());
    Tape* tp = Tape::active();
    if (tp != nullptr) {
        std::vector<int64_t> parent_ids;
        bool any = false;
        for (const Tensor& p : owned) {
            const int64_t id = tp->node_for_input(p);
            parent_ids.push_back(id);
            any = any || id >= 0;
        }
        if (any) {
            auto fn = [owned, ax, sp, total](const Tensor& g) -> std::vector<Tensor> {
                std::vector<Tensor> gs;
                gs.reserve(owned.size());
                int64_t at = 0;
                for (const Tensor& p : owned) {
                    const int64_t rows = p.dim(ax);
                    Tensor gp = make_tensor(p.shape(), g.dtype(), false);
                    with_scalar(g.dtype(), [&](auto tag) {
                        using T = decltype(tag);
                        auto gsrc = g.data<T>();
                        auto gdst = gp.mutable_data<T>();
                        for (int64_t o = 0; o < sp.outer; ++o) {
                            std::memcpy(gdst.data() + o * rows * sp.inner,
                                        gsrc.data() + (o * total + at) * sp.inner,
                                        static_cast<size_t>(rows * sp.inner) * sizeof(T));
                        }
                        return Tensor();
                    });
                    gs.push_back(gp);
                    at += rows;
                }
                return gs;
            };
            tp->bind_output(out, tp->record_node(std::move(parent_ids), std::move(fn)));
        }
    }
    return out;
}

Tensor gather_rows(const Tensor& a, std::vector<int64_t> idx) {
    if (a.ndim() < 1) throw ShapeError("gather_rows: rank-0 input");
    const int64_t rows = a.dim(0);
    const int64_t inner = a.numel() / rows;
    for (int64_t i : idx) {
        if (i < 0 || i >= rows) {
            throw ShapeError("gather_rows: index " + std::to_string(i) + " out of range [0," +
                             std::to_string(rows) + ")");
        }
    }
    Shape out_shape = a.shape();
    out_shape[0] = static_cast<int64_t>(idx.size());
    Tensor out = make_tensor(out_shape, a.dtype(), false);
    with_scalar(a.dtype(), [&](auto tag) {
        using T = decltype(tag);
        auto as = a.data<T>();
        auto os = out.mutable_data<T>();
        for (size_t i = 0; i < idx.size(); ++i) {
            std::memcpy(os.data() + static_cast<int64_t>(i) * inner, as.data() + idx[i] * inner,
                        static_cast<size_t>(inner) * sizeof(T));
        }
        return Tensor();
    });
    record(out, {&a}, [shape = a.shape(), idx = std::move(idx),
                       inner](const Tensor& g) -> std::vector<Tensor> {
        Tensor ga = make_tensor(shape, g.dtype(), false);
        zero_buffer(ga);  // rows may repeat, so the scatter accumulates
        with_scalar(g.dtype(), [&](auto tag) {
            using T = decltype(tag);
            auto gs = g.data<T>();
            auto os = ga.mutable_data<T>();
            for (size_t i = 0; i < idx.size(); ++i) {
                const T* src = gs.data() + static_cast<int64_t>(i) * inner;
                T* dst = os.data() + idx[i] * inner;
                for (int64_t j = 0; j < inner; ++j) dst[j] += src[j];
            }
            return Tensor();
        });
        return {ga};
    });
    return out;
}

// ---------------------------------------------------------------------------
// Reductions
// ---------------------------------------------------------------------------

namespace {

Tensor reduce_axis_impl(const Tensor& a, int axis, bool keepdims, bool mean) {
    const int ax = norm_axis(axis, a.ndim());
    const AxisSplit sp = split_at(a.shape(), ax);
    Shape out_shape;
    for (int i = 0; i < a.ndim(); ++i) {
        if (i == ax) {
            if (keepdims) out_shape.push_back(1);
        } else {
            out_shape.push_back(a.dim(i));
        }
    }
    if (out_shape.empty()) out_shape.push_back(1);
    Tensor out = make_tensor(out_shape, a.dtype(), false);
    const double scale = mean ? 1.0 / static_cast<double>(sp.n) : 1.0;
    with_scalar(a.dtype(), [&](auto tag) {
        using T = decltype(tag);
        auto as = a.data<T>();
        auto os = out.mutable_data<T>();
        for (int64_t o = 0; o < sp.outer; ++o) {
            for (int64_t i = 0; i < sp.inner; ++i) {
                double acc = 0.0;
                for (int64_t j = 0; j < sp.n; ++j) {
                    acc += static_cast<double>(as[(o * sp.n + j) * sp.inner + i]);
                }
                os[o * sp.inner + i] = static_cast<T>(acc * scale);
            }
        }
        return Tensor();
    });
    record(out, {&a}, [shape = a.shape(), sp, scale](const Tensor& g) -> std::vector<Tensor> {
        Tensor ga = make_tensor(shape, g.dtype(), false);
        with_scalar(g.dtype(), [&](auto tag) {
            using T = decltype(tag);
            auto gs = g.data<T>();
            auto os = ga.mutable_data<T>();
            for (int64_t o = 0; o < sp.outer; ++o) {
                for (int64_t j = 0; j < sp.n; ++j) {
                    for (int64_t i = 0; i < sp.inner; ++i) {
                        os[(o * sp.n + j) * sp.inner + i] =
                            static_cast<T>(static_cast<double>(gs[o * sp.inner + i]) * scale);
                    }
                }
            }
            return Tensor();
        });
        return {ga};
    });
    return out;
}

}  // namespace

Tensor reduce_sum(const Tensor& a, int axis, bool keepdims) {
    return reduce_axis_impl(a, axis, keepdims, false);
}

Tensor reduce_mean(const Tensor& a, int axis, bool keepdims) {
    return reduce_axis_impl(a, axis, keepdims, true);
}

namespace {

Tensor reduce_all_impl(const Tensor& a, bool mean) {
    Tensor out = make_tensor({1}, a.dtype(), false);
    const double scale = mean ? 1.0 / static_cast<double>(a.numel()) : 1.0;
    with_scalar(a.dtype(), [&](auto tag) {
        using T = decltype(tag);
        auto as = a.data<T>();
        double acc = 0.0;
        for (int64_t i = 0; i < a.numel(); ++i) acc += static_cast<double>(as[i]);
        out.mutable_data<T>()[0] = static_cast<T>(acc * scale);
        return Tensor();
    });
    record(out, {&a}, [shape = a.shape(), scale](const Tensor& g) -> std::vector<Tensor> {
        return {Tensor::full(shape, g.value_at(0) * scale, g.dtype())};
    });
    return out;
}

}  // namespace

Tensor reduce_sum_all(const Tensor& a) { return reduce_all_impl(a, false); }
Tensor reduce_mean_all(const Tensor& a) { return reduce_all_impl(a, true); }

// ---------------------------------------------------------------------------
// softmax family
// ---------------------------------------------------------------------------

namespace {

Tensor softmax_impl(const Tensor& a, int axis, const std::vector<uint8_t>* keep) {
    const int ax = norm_axis(axis, a.ndim());
    const AxisSplit sp = split_at(a.shape(), ax);
    if (keep != nullptr && static_cast<int64_t>(keep->size()) != a.numel()) {
        throw ShapeError("masked_softmax: mask size " + std::to_string(keep->size()) +
                         " does not match tensor " + shape_str(a.shape()));
    }
    Tensor out = make_tensor(a.shape(), a.dtype(), false);
    with_scalar(a.dtype(), [&](auto tag) {
        using T = decltype(tag);
        auto as = a.data<T>();
        auto os = out.mutable_data<T>();
        for (int64_t o = 0; o < sp.outer; ++o) {
            for (int64_t i = 0; i < sp.inner; ++i) {
                double mx = -std::numeric_limits<double>::infinity();
                for (int64_t j = 0; j < sp.n; ++j) {
                    const int64_t at = (o * sp.n + j) * sp.inner + i;
                    if (keep != nullptr && (*keep)[static_cast<size_t>(at)] == 0) continue;
                    mx = std::max(mx, static_cast<double>(as[at]));
                }
                if (!std::isfinite(mx)) {
                    throw ContractError("softmax: lane has no kept entries");
                }
                double denom = 0.0;
                for (int64_t j = 0; j < sp.n; ++j) {
                    const int64_t at = (o * sp.n + j) * sp.inner + i;
                    if (keep != nullptr && (*keep)[static_cast<size_t>(at)] == 0) {
                        os[at] = T(0);
                        continue;
                    }
                    const double e = std::exp(static_cast<double>(as[at]) - mx);
                    os[at] = static_cast<T>(e);
                    denom += e;
                }
                for (int64_t j = 0; j < sp.n; ++j) {
                    const int64_t at = (o * sp.n + j) * sp.inner + i;
                    if (keep != nullptr && (*keep)[static_cast<size_t>(at)] == 0) continue;
                    os[at] = static_cast<T>(static_cast<double>(os[at]) / denom);
                }
            }
        }
        return Tensor();
    });
    record(out, {&a}, [out, sp](const Tensor& g) -> std::vector<Tensor> {
        Tensor ga = make_tensor(out.shape(), g.dtype(), false);
        with_scalar(g.dtype(), [&](auto tag) {
            using T = decltype(tag);
            auto ys = out.data<T>();
            auto gs = g.data<T>();
            auto os = ga.mutable_data<T>();
            for (int64_t o = 0; o < sp.outer; ++o) {
                for (int64_t i = 0; i < sp.inner; ++i) {
                    double dot = 0.0;
                    for (int64_t j = 0; j < sp.n; ++j) {
                        const int64_t at = (o * sp.n + j) * sp.inner + i;
                        dot += static_cast<double>(ys[at]) * static_cast<double>(gs[at]);
                    }
                    for (int64_t j = 0; j < sp.n; ++j) {
                        const int64_t at = (o * sp.n + j) * sp.inner + i;
                        os[at] = static_cast<T>(static_cast<double>(ys[at]) *
                                                (static_cast<double>(gs[at]) - dot));
                    }
                }
            }
            return Tensor();
        });
        return {ga};
    });
    return out;
}

}  // namespace

Tensor softmax(const Tensor& a, int axis) { return softmax_impl(a, axis, nullptr); }

Tensor masked_softmax(const Tensor& a, int axis, const std::vector<uint8_t>& keep) {
    return softmax_impl(a, axis, &keep);
}

Tensor log_softmax(const Tensor& a, int axis) {
    const int ax = norm_axis(axis, a.ndim());
    const AxisSplit sp = split_at(a.shape(), ax);
    Tensor out = make_tensor(a.shape(), a.dtype(), false);
    with_scalar(a.dtype(), [&](auto tag) {
        using T = decltype(tag);
        auto as = a.data<T>();
        auto os = out.mutable_data<T>();
        for (int64_t o = 0; o < sp.outer; ++o) {
            for (int64_t i = 0; i < sp.inner; ++i) {
                double mx = -std::numeric_limits<double>::infinity();
                for (int64_t j = 0; j < sp.n; ++j) {
                    mx = std::max(mx, static_cast<double>(as[(o * sp.n + j) * sp.inner + i]));
                }
                double denom = 0.0;
                for (int64_t j = 0; j < sp.n; ++j) {
                    denom += std::exp(static_cast<double>(as[(o * sp.n + j) * sp.inner + i]) - mx);
                }
                const double lse = mx + std::log(denom);
                for (int64_t j = 0; j < sp.n; ++j) {
                    const int64_t at = (o * sp.n + j) * sp.inner + i;
                    os[at] = static_cast<T>(static_cast<double>(as[at]) - lse);
                }
            }
        }
        return Tensor();
    });
    record(out, {&a}, [out, sp](const Tensor& g) -> std::vector<Tensor> {
        Tensor ga = make_tensor(out.shape(), g.dtype(), false);
        with_scalar(g.dtype(), [&](auto tag) {
            using T = decltype(tag);
            auto ys = out.data<T>();
            auto gs = g.data<T>();
            auto os = ga.mutable_data<T>();
            for (int64_t o = 0; o < sp.outer; ++o) {
                for (int64_t i = 0; i < sp.inner; ++i) {
                    double gsum = 0.0;
                    for (int64_t j = 0; j < sp.n; ++j) {
                        gsum += static_cast<double>(gs[(o * sp.n + j) * sp.inner + i]);
                    }
                    for (int64_t j = 0; j < sp.n; ++j) {
                        const int64_t at = (o * sp.n + j) * sp.inner + i;
                        os[at] = static_cast<T>(static_cast<double>(gs[at]) -
                                                std::exp(static_cast<double>(ys[at])) * gsum);
                    }
                }
            }
            return Tensor();
        });
        return {ga};
    });
    return out;
}

// ---------------------------------------------------------------------------
// layer_norm
// ---------------------------------------------------------------------------

Tensor layer_norm(const Tensor& a, const Tensor& gain, const Tensor& bias, double eps) {
    if (eps <= 0.0) throw ContractError("layer_norm: eps must be positive");
    const int64_t n = a.dim(-1);
    if (gain.numel() != n || bias.numel() != n) {
        throw ShapeError("layer_norm: gain/bias " + shape_str(gain.shape()) + "/" +
                         shape_str(bias.shape()) + " do not match last axis of " +
                         shape_str(a.shape()));
    }
    require_same_dtype(a, gain, "layer_norm");
    require_same_dtype(a, bias, "layer_norm");
    const int64_t rows = a.numel() / n;
    Tensor out = make_tensor(a.shape(), a.dtype(), false);
    Tensor x_hat = make_tensor(a.shape(), a.dtype(), false);
    Tensor rstd = make_tensor({rows}, a.dtype(), false);
    with_scalar(a.dtype(), [&](auto tag) {
        using T = decltype(tag);
        auto as = a.data<T>();
        auto gs = gain.data<T>();
        auto bs = bias.data<T>();
        auto os = out.mutable_data<T>();
        auto xh = x_hat.mutable_data<T>();
        auto rs = rstd.mutable_data<T>();
        for (int64_t r = 0; r < rows; ++r) {
            const T* row = as.data() + r * n;
            double mean = 0.0;
            for (int64_t j = 0; j < n; ++j) mean += static_cast<double>(row[j]);
            mean /= static_cast<double>(n);
            double var = 0.0;
            for (int64_t j = 0; j < n; ++j) {
                const double d = static_cast<double>(row[j]) - mean;
                var += d * d;
            }
            var /= static_cast<double>(n);
            const double inv = 1.0 / std::sqrt(var + eps);
            rs[r] = static_cast<T>(inv);
            for (int64_t j = 0; j < n; ++j) {
                const double h = (static_cast<double>(row[j]) - mean) * inv;
                xh[r * n + j] = static_cast<T>(h);
                os[r * n + j] = static_cast<T>(h * static_cast<double>(gs[j]) +
                                               static_cast<double>(bs[j]));
            }
        }
        return Tensor();
    });
    record(out, {&a, &gain, &bias},
           [x_hat, rstd, gain, rows, n, ashape = a.shape()](const Tensor& g) -> std::vector<Tensor> {
               Tensor ga = make_tensor(ashape, g.dtype(), false);
               Tensor ggain = make_tensor(gain.shape(), g.dtype(), false);
               Tensor gbias = make_tensor(gain.shape(), g.dtype(), false);
               with_scalar(g.dtype(), [&](auto tag) {
                   using T = decltype(tag);
                   auto gs = g.data<T>();
                   auto xh = x_hat.data<T>();
                   auto rs = rstd.data<T>();
                   auto gv = gain.data<T>();
                   auto dga = ga.mutable_data<T>();
                   std::vector<double> dgain(static_cast<size_t>(n), 0.0);
                   std::vector<double> dbias(static_cast<size_t>(n), 0.0);
                   for (int64_t r = 0; r < rows; ++r) {
                       double m1 = 0.0, m2 = 0.0;
                       for (int64_t j = 0; j < n; ++j) {
                           const int64_t at = r * n + j;
                           const double gh = static_cast<double>(gs[at]) * static_cast<double>(gv[j]);
                           m1 += gh;
                           m2 += gh * static_cast<double>(xh[at]);
                           dgain[static_cast<size_t>(j)] +=
                               static_cast<double>(gs[at]) * static_cast<double>(xh[at]);
                           dbias[static_cast<size_t>(j)] += static_cast<double>(gs[at]);
                       }
                       m1 /= static_cast<double>(n);
                       m2 /= static_cast<double>(n);
                       for (int64_t j = 0; j < n; ++j) {
                           const int64_t at = r * n + j;
                           const double gh = static_cast<double>(gs[at]) * static_cast<double>(gv[j]);
                           dga[at] = static_cast<T>(
                               (gh - m1 - static_cast<double>(xh[at]) * m2) *
                               static_cast<double>(rs[r]));
                       }
                   }
                   auto dg = ggain.mutable_data<T>();
                   auto db = gbias.mutable_data<T>();
                   for (int64_t j = 0; j < n; ++j) {
                       dg[j] = static_cast<T>(dgain[static_cast<size_t>(j)]);
                       db[j] = static_cast<T>(dbias[static_cast<size_t>(j)]);
                   }
                   return Tensor();
               });
               return {ga, ggain, gbias};
           });
    return out;
}

// ---------------------------------------------------------------------------
// Elementwise nonlinearities
// ---------------------------------------------------------------------------

Tensor gelu(const Tensor& a) {
    Tensor out = unary_forward(
        a, [](double x) { return 0.5 * x * (1.0 + std::erf(x * kInvSqrt2)); });
    record(out, {&a}, [a, out](const Tensor& g) -> std::vector<Tensor> {
        return {unary_backward(a, out, g, [](double x, double) {
            const double density = std::exp(-0.5 * x * x) / std::sqrt(2.0 * kPi);
            const double cumulative = 0.5 * (1.0 + std::erf(x * kInvSqrt2));
            return cumulative + x * density;
        })};
    });
    return out;
}

Tensor relu(const Tensor& a) {
    Tensor out = unary_forward(a, [](double x) { return x > 0.0 ? x : 0.0; });
    record(out, {&a}, [a, out](const Tensor& g) -> std::vector<Tensor> {
        return {unary_backward(a, out, g, [](double x, double) { return x > 0.0 ? 1.0 : 0.0; })};
    });
    return out;
}

Tensor sigmoid(const Tensor& a) {
    Tensor out = unary_forward(a, [](double x) {
        if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
        const double e = std::exp(x);
        return e / (1.0 + e);
    });
    record(out, {&a}, [a, out](const Tensor& g) -> std::vector<Tensor> {
        return {unary_backward(a, out, g, [](double, double y) { return y * (1.0 - y); })};
    });
    return out;
}

Tensor softplus(const Tensor& a) {
    Tensor out = unary_forward(
        a, [](double x) { return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x))); });
    record(out, {&a}, [a, out](const Tensor& g) -> std::vector<Tensor> {
        return {unary_backward(a, out, g, [](double x, double) {
            if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
            const double e = std::exp(x);
            return e / (1.0 + e);
        })};
    });
    return out;
}

Tensor exp(const Tensor& a) {
    Tensor out = unary_forward(a, [](double x) { return std::exp(x); });
    record(out, {&a}, [a, out](const Tensor& g) -> std::vector<Tensor> {
        return {mul(g, out)};
    });
    return out;
}

Tensor log(const Tensor& a) {
    Tensor out = unary_forward(a, [](double x) { return std::log(x); });
    record(out, {&a}, [a](const Tensor& g) -> std::vector<Tensor> { return {divide(g, a)}; });
    return out;
}

Tensor sqrt(const Tensor& a) {
    Tensor out = unary_forward(a, [](double x) { return std::sqrt(x); });
    record(out, {&a}, [a, out](const Tensor& g) -> std::vector<Tensor> {
        return {unary_backward(a, out, g, [](double, double y) { return 0.5 / y; })};
    });
    return out;
}

// ---------------------------------------------------------------------------
// Finite differences
// ---------------------------------------------------------------------------

double finite_diff_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x,
                         double h) {
    Tensor probe = x.detached_clone();
    probe.set_requires_grad(true);
    Tape tape;
    Tensor loss;
    {
        TapeScope scope(tape);
        loss = f(probe);
    }
    if (loss.numel() != 1) {
        throw ContractError("finite_diff_check: f must return a scalar");
    }
    tape.backward(loss);
    const Tensor analytic = *tape.grad(probe);

    double max_err = 0.0;
    NoGradScope ng;
    for (int64_t i = 0; i < x.numel(); ++i) {
        double fp = 0.0, fm = 0.0;
        for (int sign : {+1, -1}) {
            Tensor xp = x.detached_clone();
            with_scalar(x.dtype(), [&](auto tag) {
                using T = decltype(tag);
                auto d = xp.mutable_data<T>();
                d[i] = static_cast<T>(static_cast<double>(d[i]) + sign * h);
                return Tensor();
            });
            const double v = f(xp).scalar_value();
            (sign > 0 ? fp : fm) = v;
        }
        const double numeric = (fp - fm) / (2.0 * h);
        const double got = analytic.value_at(i);
        const double err =
            std::abs(numeric - got) / std::max({1.0, std::abs(numeric), std::abs(got)});
        max_err = std::max(max_err, err);
    }
    return max_err;
}

}  // namespace fiber
