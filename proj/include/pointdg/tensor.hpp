#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "pointdg/rng.hpp"

namespace pointdg {

using Shape = std::vector<std::int64_t>;

std::int64_t shape_numel(const Shape& s);
std::string shape_str(const Shape& s);

// All value buffers share one allocation alignment so SIMD reduction order,
// and with it every last bit of the output, is a pure function of the data.
// Plain `DataVec v(n)` leaves elements UNINITIALIZED (kernels overwrite every
// slot); ask for zeros explicitly with v(n, 0.0) or assign(n, 0.0).
template <class T, std::size_t Align = 64>
struct AlignedAllocator {
    using value_type = T;
    AlignedAllocator() = default;
    template <class U>
    AlignedAllocator(const AlignedAllocator<U, Align>&) {}
    T* allocate(std::size_t n) {
        return static_cast<T*>(::operator new(n * sizeof(T), std::align_val_t(Align)));
    }
    void deallocate(T* p, std::size_t) { ::operator delete(p, std::align_val_t(Align)); }
    template <class U>
    void construct(U* p) {
        ::new (static_cast<void*>(p)) U;  // default-init: no memset for doubles
    }
    template <class U, class... Args>
    void construct(U* p, Args&&... args) {
        ::new (static_cast<void*>(p)) U(std::forward<Args>(args)...);
    }
    template <class U>
    struct rebind {
        using other = AlignedAllocator<U, Align>;
    };
    bool operator==(const AlignedAllocator&) const { return true; }
    bool operator!=(const AlignedAllocator&) const { return false; }
};
using DataVec = std::vector<double, AlignedAllocator<double>>;

// Keep multi-megabyte scratch blocks inside the heap so repeated forward
// passes reuse pages instead of faulting fresh mmap regions every call.
void tune_allocator();

struct TensorImpl;
class BackwardCtx;

// Collects leaf gradients outside the tensors themselves, so several graphs
// sharing the same parameters can run backward concurrently.
class GradSink {
public:
    void add(const TensorImpl* leaf, const double* g, std::int64_t n);
    // Zero-initialized accumulation buffer for a leaf (created on first use).
    double* buf(const TensorImpl* leaf, std::int64_t n);
    const DataVec* find(const TensorImpl* leaf) const;
    // sink += other (union of keys)
    void merge(const GradSink& other);
    void scale(double s);
    bool empty() const { return grads_.empty(); }

private:
    std::unordered_map<const TensorImpl*, DataVec> grads_;
};

struct TensorImpl {
    Shape shape;
    DataVec data;
    bool requires_grad = false;
    DataVec grad;  // sized lazily during backward / on demand

    // graph bookkeeping (empty for leaves)
    std::uint64_t node_id = 0;
    std::vector<std::shared_ptr<TensorImpl>> parents;
    std::function<void(TensorImpl&, BackwardCtx&)> backward_fn;

    std::string name;  // parameters only

    std::int64_t numel() const { return static_cast<std::int64_t>(data.size()); }
    void ensure_grad();
};

class Tensor {
public:
    Tensor() = default;
    explicit Tensor(std::shared_ptr<TensorImpl> impl) : impl_(std::move(impl)) {}

    static Tensor zeros(Shape shape);
    static Tensor full(Shape shape, double value);
    static Tensor from(std::vector<double> data, Shape shape);
    static Tensor scalar(double v) { return from({v}, {}); }
    static Tensor randn(Shape shape, Rng& rng, double stddev = 1.0);

    bool defined() const { return impl_ != nullptr; }
    const Shape& shape() const { return impl_->shape; }
    std::int64_t dim(int i) const { return impl_->shape[static_cast<std::size_t>(i)]; }
    int rank() const { return static_cast<int>(impl_->shape.size()); }
    std::int64_t numel() const { return impl_->numel(); }

    double* data() { return impl_->data.data(); }
    const double* data() const { return impl_->data.data(); }
    double value() const;  // scalar tensors only
    double at(std::initializer_list<std::int64_t> idx) const;

    bool requires_grad() const { return impl_->requires_grad; }
    Tensor& set_requires_grad(bool b);
    const DataVec& grad() const;
    void zero_grad();

    // Same data, detached from the graph (no grad, no parents).
    Tensor detach() const;
    Tensor clone() const;
    Tensor reshape(Shape shape) const;

    const std::string& name() const { return impl_->name; }
    Tensor& set_name(std::string n);

    TensorImpl* impl() const { return impl_.get(); }
    std::shared_ptr<TensorImpl> impl_ptr() const { return impl_; }

private:
    std::shared_ptr<TensorImpl> impl_;
};

// Thread-local autograd recording switch.
bool grad_enabled();
struct NoGradGuard {
    NoGradGuard();
    ~NoGradGuard();
    bool prev;
};

// ---- primitives ---------------------------------------------------------
// Elementwise binaries broadcast the smaller operand when its shape is a
// trailing suffix of the larger one (covers scalars and per-channel vectors).
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor neg(const Tensor& a);
Tensor exp(const Tensor& a);
Tensor log(const Tensor& a);
Tensor reciprocal(const Tensor& a);
Tensor relu(const Tensor& a);
Tensor sigmoid(const Tensor& a);
Tensor silu(const Tensor& a);
Tensor softplus(const Tensor& a);
Tensor clamp(const Tensor& a, double lo, double hi);
Tensor scale(const Tensor& a, double s);
Tensor add_scalar(const Tensor& a, double s);

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);

Tensor softmax(const Tensor& a, int axis);
Tensor sum(const Tensor& a, int axis);
Tensor mean(const Tensor& a, int axis);
Tensor max(const Tensor& a, int axis);
Tensor sum_all(const Tensor& a);
Tensor mean_all(const Tensor& a);

Tensor concat(const std::vector<Tensor>& parts, int axis);
Tensor slice(const Tensor& a, int axis, std::int64_t start, std::int64_t len);
Tensor gather(const Tensor& a, const std::vector<std::int64_t>& indices);
Tensor scatter(const Tensor& a, const std::vector<std::int64_t>& indices);

// y[t] = gamma * (x[t]-mean)/sqrt(var+eps) + beta over the last axis.
Tensor layernorm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps = 1e-5);

// x: L x Cin, w: Cout x Cin x k (k odd), b: Cout; "same" zero padding over axis 0.
Tensor conv1d(const Tensor& x, const Tensor& w, const Tensor& b);

// y = diag(s) * x for x: L x D, s: L.
Tensor rowscale(const Tensor& x, const Tensor& s);

// Input-dependent linear recurrence over tokens visited in `order`:
//   h_t = exp(-delta_t * exp(A_log)) . h_{t-1} + (delta_t * B_t) outer u_t
//   y_t = h_t . C_t
// u: L x D, delta: L, B,C: L x S, A_log: D x S. Outputs stay at canonical
// token positions; `order` only sets the traversal sequence.
Tensor scan_recurrence(const Tensor& u, const Tensor& delta, const Tensor& B, const Tensor& C,
                       const Tensor& A_log, const std::vector<std::int64_t>& order);

// ---- string-dispatched entry point --------------------------------------
struct PrimitiveOptions {
    int axis = 0;
    std::vector<std::int64_t> indices;
    std::int64_t start = 0;
    std::int64_t len = 0;
    double lo = 0.0, hi = 0.0;
};
Tensor apply_primitive(const std::string& name, const std::vector<Tensor>& inputs,
                       const PrimitiveOptions& opts = {});

// ---- backward ------------------------------------------------------------
// Reverse-mode sweep from a scalar loss. Leaf gradients accumulate into
// tensor.grad, or into `sink` when given (leaf .grad is left untouched then).
void backward(const Tensor& loss, GradSink* sink = nullptr);

// Max relative error between analytic gradient and central differences.
// f must be deterministic; evaluated twice to verify.
double finite_difference_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x,
                               double eps = 1e-5);

// Same check, but coordinates whose relative error at `eps` exceeds
// `recheck_threshold` are re-measured at each fallback step size and keep
// their best value. Roundoff-limited coordinates (tiny true gradients)
// recover at larger eps and kink-adjacent ones at smaller eps, while a wrong
// gradient fails at every step size.
// Coordinates where analytic and central difference agree within `abs_tol`
// count as exact; gradients far below the loss scale sit under the finite-
// difference noise floor and cannot support a relative comparison.
double finite_difference_check_adaptive(const std::function<Tensor(const Tensor&)>& f,
                                        const Tensor& x, double eps,
                                        const std::vector<double>& fallback_eps,
                                        double recheck_threshold, double abs_tol = 0.0);

}  // namespace pointdg
