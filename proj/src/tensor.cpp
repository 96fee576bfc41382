#include "pointdg/tensor.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstring>
#include <sstream>
#include <stdexcept>
#include <unordered_set>

#if defined(__GLIBC__)
#include <malloc.h>
#endif

namespace pointdg {

using MatMap = Eigen::Map<Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
using ConstMatMap =
    Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
using ArrMap = Eigen::Map<Eigen::ArrayXd>;
using ConstArrMap = Eigen::Map<const Eigen::ArrayXd>;

void tune_allocator() {
#if defined(__GLIBC__)
    mallopt(M_MMAP_THRESHOLD, 512 * 1024 * 1024);
    mallopt(M_TRIM_THRESHOLD, 512 * 1024 * 1024);
#endif
}

std::int64_t shape_numel(const Shape& s) {
    std::int64_t n = 1;
    for (auto d : s) n *= d;
    return n;
}

std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << "(";
    for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
    os << ")";
    return os.str();
}

namespace {

std::atomic<std::uint64_t> g_node_counter{0};
thread_local bool g_grad_enabled = true;

[[noreturn]] void fail_shape(const std::string& op, const std::string& detail) {
    throw std::invalid_argument(op + ": " + detail);
}

void check_axis(const std::string& op, const Shape& s, int axis) {
    if (axis < 0 || axis >= static_cast<int>(s.size()))
        fail_shape(op, "axis " + std::to_string(axis) + " out of range for shape " + shape_str(s));
}

}  // namespace

bool grad_enabled() { return g_grad_enabled; }
NoGradGuard::NoGradGuard() : prev(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = prev; }

void TensorImpl::ensure_grad() {
    if (grad.size() != data.size()) grad.assign(data.size(), 0.0);
}

// ---- GradSink --------------------------------------------------------------

double* GradSink::buf(const TensorImpl* leaf, std::int64_t n) {
    auto& v = grads_[leaf];
    if (v.size() != static_cast<std::size_t>(n)) v.assign(static_cast<std::size_t>(n), 0.0);
    return v.data();
}

void GradSink::add(const TensorImpl* leaf, const double* g, std::int64_t n) {
    double* b = buf(leaf, n);
    ArrMap(b, n) += ConstArrMap(g, n);
}

const DataVec* GradSink::find(const TensorImpl* leaf) const {
    auto it = grads_.find(leaf);
    return it == grads_.end() ? nullptr : &it->second;
}

void GradSink::merge(const GradSink& other) {
    for (const auto& [k, v] : other.grads_) add(k, v.data(), static_cast<std::int64_t>(v.size()));
}

void GradSink::scale(double s) {
    for (auto& [k, v] : grads_) ArrMap(v.data(), static_cast<std::int64_t>(v.size())) *= s;
}

// ---- BackwardCtx -----------------------------------------------------------

class BackwardCtx {
public:
    explicit BackwardCtx(GradSink* sink) : sink_(sink) {}

    // Buffer to accumulate a parent's gradient into, or nullptr if not needed.
    double* grad_buf(const std::shared_ptr<TensorImpl>& t) {
        if (!t->requires_grad) return nullptr;
        if (sink_ && !t->backward_fn) return sink_->buf(t.get(), t->numel());
        t->ensure_grad();
        return t->grad.data();
    }

private:
    GradSink* sink_;
};

// ---- Tensor ----------------------------------------------------------------

Tensor Tensor::zeros(Shape shape) {
    auto impl = std::make_shared<TensorImpl>();
    impl->data.assign(static_cast<std::size_t>(shape_numel(shape)), 0.0);
    impl->shape = std::move(shape);
    return Tensor(impl);
}

Tensor Tensor::full(Shape shape, double value) {
    Tensor t = zeros(std::move(shape));
    std::fill(t.impl()->data.begin(), t.impl()->data.end(), value);
    return t;
}

Tensor Tensor::from(std::vector<double> data, Shape shape) {
    if (static_cast<std::int64_t>(data.size()) != shape_numel(shape))
        fail_shape("Tensor::from", "data length " + std::to_string(data.size()) +
                                       " does not match shape " + shape_str(shape));
    auto impl = std::make_shared<TensorImpl>();
    impl->shape = std::move(shape);
    impl->data.assign(data.begin(), data.end());
    return Tensor(impl);
}

Tensor Tensor::randn(Shape shape, Rng& rng, double stddev) {
    Tensor t = zeros(std::move(shape));
    for (auto& v : t.impl()->data) v = rng.gauss() * stddev;
    return t;
}

double Tensor::value() const {
    if (numel() != 1) fail_shape("Tensor::value", "tensor " + shape_str(shape()) + " is not scalar");
    return impl_->data[0];
}

double Tensor::at(std::initializer_list<std::int64_t> idx) const {
    const Shape& s = impl_->shape;
    if (idx.size() != s.size()) fail_shape("Tensor::at", "index rank mismatch");
    std::int64_t off = 0;
    std::size_t k = 0;
    for (auto i : idx) off = off * s[k] + i, ++k;
    return impl_->data[static_cast<std::size_t>(off)];
}

Tensor& Tensor::set_requires_grad(bool b) {
    impl_->requires_grad = b;
    return *this;
}

const DataVec& Tensor::grad() const { return impl_->grad; }

void Tensor::zero_grad() { impl_->grad.assign(impl_->data.size(), 0.0); }

Tensor Tensor::detach() const {
    auto impl = std::make_shared<TensorImpl>();
    impl->shape = impl_->shape;
    impl->data = impl_->data;
    return Tensor(impl);
}

Tensor Tensor::clone() const {
    Tensor t = detach();
    t.impl()->requires_grad = impl_->requires_grad;
    return t;
}

Tensor& Tensor::set_name(std::string n) {
    impl_->name = std::move(n);
    return *this;
}

namespace {

Tensor make_node(Shape shape, DataVec data,
                 std::vector<std::shared_ptr<TensorImpl>> parents,
                 std::function<void(TensorImpl&, BackwardCtx&)> bw) {
    auto impl = std::make_shared<TensorImpl>();
    impl->shape = std::move(shape);
    impl->data = std::move(data);
    bool record = grad_enabled();
    if (record) {
        record = false;
        for (const auto& p : parents)
            if (p->requires_grad) {
                record = true;
                break;
            }
    }
    if (record) {
        impl->requires_grad = true;
        impl->node_id = ++g_node_counter;
        impl->parents = std::move(parents);
        impl->backward_fn = std::move(bw);
    }
    return Tensor(impl);
}

// rep > 0 when small.shape is a trailing suffix of big.shape (scalars always).
std::int64_t suffix_rep(const Shape& big, const Shape& small, std::int64_t small_n) {
    if (small_n == 1) return shape_numel(big);
    if (small.size() > big.size()) return -1;
    const std::size_t off = big.size() - small.size();
    for (std::size_t i = 0; i < small.size(); ++i)
        if (big[off + i] != small[i]) return -1;
    std::int64_t rep = 1;
    for (std::size_t i = 0; i < off; ++i) rep *= big[i];
    return rep;
}

struct AxisSplit {
    std::int64_t outer, n, inner;
};

AxisSplit split_axis(const Shape& s, int axis) {
    AxisSplit a{1, s[static_cast<std::size_t>(axis)], 1};
    for (int i = 0; i < axis; ++i) a.outer *= s[static_cast<std::size_t>(i)];
    for (std::size_t i = static_cast<std::size_t>(axis) + 1; i < s.size(); ++i) a.inner *= s[i];
    return a;
}

}  // namespace

Tensor Tensor::reshape(Shape shape) const {
    if (shape_numel(shape) != numel())
        fail_shape("reshape", "cannot reshape " + shape_str(this->shape()) + " to " + shape_str(shape));
    auto parent = impl_;
    Tensor y = make_node(std::move(shape), impl_->data, {parent},
                         [parent](TensorImpl& self, BackwardCtx& ctx) {
                             if (double* g = ctx.grad_buf(parent))
                                 ArrMap(g, self.numel()) += ConstArrMap(self.grad.data(), self.numel());
                         });
    return y;
}

// ---- elementwise binaries ---------------------------------------------------

namespace {

enum class BinOp { Add, Mul };

Tensor binary_op(const std::string& opname, BinOp op, const Tensor& a0, const Tensor& b0) {
    Tensor a = a0, b = b0;
    // normalize: broadcastee on the right
    if (a.numel() < b.numel()) std::swap(a, b);
    const std::int64_t rep = suffix_rep(a.shape(), b.shape(), b.numel());
    if (rep < 0)
        fail_shape(opname, "shapes " + shape_str(a0.shape()) + " and " + shape_str(b0.shape()) +
                               " are not broadcast-compatible");
    const std::int64_t m = b.numel(), n = a.numel();
    DataVec out(static_cast<std::size_t>(n));
    {
        ConstArrMap A(a.data(), n);
        ArrMap Y(out.data(), n);
        if (rep == 1 || m == n) {
            ConstArrMap B(b.data(), n);
            if (op == BinOp::Add)
                Y = A + B;
            else
                Y = A * B;
        } else if (m == 1) {
            const double bv = b.data()[0];
            if (op == BinOp::Add)
                Y = A + bv;
            else
                Y = A * bv;
        } else {
            for (std::int64_t r = 0; r < rep; ++r) {
                ConstArrMap B(b.data(), m);
                ArrMap Yr(out.data() + r * m, m);
                ConstArrMap Ar(a.data() + r * m, m);
                if (op == BinOp::Add)
                    Yr = Ar + B;
                else
                    Yr = Ar * B;
            }
        }
    }
    auto ai = a.impl_ptr(), bi = b.impl_ptr();
    return make_node(a.shape(), std::move(out), {ai, bi},
                     [op, ai, bi, rep, m](TensorImpl& self, BackwardCtx& ctx) {
                         const double* dy = self.grad.data();
                         const std::int64_t n = self.numel();
                         if (double* ga = ctx.grad_buf(ai)) {
                             if (op == BinOp::Add) {
                                 ArrMap(ga, n) += ConstArrMap(dy, n);
                             } else if (rep == 1 || m == n) {
                                 ArrMap(ga, n) += ConstArrMap(dy, n) * ConstArrMap(bi->data.data(), n);
                             } else if (m == 1) {
                                 ArrMap(ga, n) += ConstArrMap(dy, n) * bi->data[0];
                             } else {
                                 for (std::int64_t r = 0; r < rep; ++r)
                                     ArrMap(ga + r * m, m) +=
                                         ConstArrMap(dy + r * m, m) * ConstArrMap(bi->data.data(), m);
                             }
                         }
                         if (double* gb = ctx.grad_buf(bi)) {
                             if (op == BinOp::Add) {
                                 if (rep == 1 || m == n) {
                                     ArrMap(gb, m) += ConstArrMap(dy, n);
                                 } else if (m == 1) {
                                     gb[0] += ConstArrMap(dy, n).sum();
                                 } else {
                                     for (std::int64_t r = 0; r < rep; ++r)
                                         ArrMap(gb, m) += ConstArrMap(dy + r * m, m);
                                 }
                             } else {
                                 if (rep == 1 || m == n) {
                                     ArrMap(gb, m) +=
                                         ConstArrMap(dy, n) * ConstArrMap(ai->data.data(), n);
                                 } else if (m == 1) {
                                     gb[0] += (ConstArrMap(dy, n) * ConstArrMap(ai->data.data(), n)).sum();
                                 } else {
                                     for (std::int64_t r = 0; r < rep; ++r)
                                         ArrMap(gb, m) += ConstArrMap(dy + r * m, m) *
                                                          ConstArrMap(ai->data.data() + r * m, m);
                                 }
                             }
                         }
                     });
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) { return binary_op("add", BinOp::Add, a, b); }
Tensor mul(const Tensor& a, const Tensor& b) { return binary_op("mul", BinOp::Mul, a, b); }
Tensor sub(const Tensor& a, const Tensor& b) { return add(a, neg(b)); }

// ---- elementwise unaries ----------------------------------------------------

namespace {

// dx = dy * dfun(x, y) where dfun is applied elementwise.
template <typename FwdFn, typename BwdFn>
Tensor unary_op(const Tensor& x, FwdFn fwd, BwdFn bwd_factor) {
    const std::int64_t n = x.numel();
    DataVec out(static_cast<std::size_t>(n));
    for (std::int64_t i = 0; i < n; ++i) out[static_cast<std::size_t>(i)] = fwd(x.data()[i]);
    auto xi = x.impl_ptr();
    auto yi_holder = std::make_shared<std::vector<double>>();  // filled below when grad needed
    Tensor y = make_node(x.shape(), std::move(out), {xi},
                         [xi, bwd_factor](TensorImpl& self, BackwardCtx& ctx) {
                             if (double* gx = ctx.grad_buf(xi)) {
                                 const std::int64_t n = self.numel();
                                 const double* dy = self.grad.data();
                                 const double* xd = xi->data.data();
                                 const double* yd = self.data.data();
                                 for (std::int64_t i = 0; i < n; ++i)
                                     gx[i] += dy[i] * bwd_factor(xd[i], yd[i]);
                             }
                         });
    (void)yi_holder;
    return y;
}

}  // namespace

Tensor neg(const Tensor& a) {
    return unary_op(
        a, [](double v) { return -v; }, [](double, double) { return -1.0; });
}

Tensor exp(const Tensor& a) {
    const std::int64_t n = a.numel();
    DataVec out(static_cast<std::size_t>(n));
    ArrMap(out.data(), n) = ConstArrMap(a.data(), n).exp();
    auto ai = a.impl_ptr();
    return make_node(a.shape(), std::move(out), {ai}, [ai](TensorImpl& self, BackwardCtx& ctx) {
        if (double* g = ctx.grad_buf(ai)) {
            const std::int64_t n = self.numel();
            ArrMap(g, n) += ConstArrMap(self.grad.data(), n) * ConstArrMap(self.data.data(), n);
        }
    });
}

Tensor log(const Tensor& a) {
    return unary_op(
        a, [](double v) { return std::log(v); }, [](double x, double) { return 1.0 / x; });
}

Tensor reciprocal(const Tensor& a) {
    return unary_op(
        a, [](double v) { return 1.0 / v; }, [](double, double y) { return -y * y; });
}

Tensor relu(const Tensor& a) {
    return unary_op(
        a, [](double v) { return v > 0.0 ? v : 0.0; },
        [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

Tensor sigmoid(const Tensor& a) {
    return unary_op(
        a, [](double v) { return 1.0 / (1.0 + std::exp(-v)); },
        [](double, double y) { return y * (1.0 - y); });
}

Tensor silu(const Tensor& a) {
    return unary_op(
        a,
        [](double v) {
            return v / (1.0 + std::exp(-v));
        },
        [](double x, double) {
            const double s = 1.0 / (1.0 + std::exp(-x));
            return s * (1.0 + x * (1.0 - s));
        });
}

Tensor softplus(const Tensor& a) {
    return unary_op(
        a,
        [](double v) {  // stable: max(v,0) + log1p(exp(-|v|))
            return (v > 0.0 ? v : 0.0) + std::log1p(std::exp(-std::abs(v)));
        },
        [](double x, double) { return 1.0 / (1.0 + std::exp(-x)); });
}

Tensor clamp(const Tensor& a, double lo, double hi) {
    return unary_op(
        a, [lo, hi](double v) { return v < lo ? lo : (v > hi ? hi : v); },
        [lo, hi](double x, double) { return (x > lo && x < hi) ? 1.0 : 0.0; });
}

Tensor scale(const Tensor& a, double s) {
    return unary_op(
        a, [s](double v) { return v * s; }, [s](double, double) { return s; });
}

Tensor add_scalar(const Tensor& a, double s) {
    return unary_op(
        a, [s](double v) { return v + s; }, [](double, double) { return 1.0; });
}

// ---- matmul / transpose -----------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.rank() != 2 || b.rank() != 2)
        fail_shape("matmul", "expects rank-2 operands, got " + shape_str(a.shape()) + " and " +
                                 shape_str(b.shape()));
    const std::int64_t m = a.dim(0), k = a.dim(1), k2 = b.dim(0), n = b.dim(1);
    if (k != k2)
        fail_shape("matmul", "inner dimensions differ: " + shape_str(a.shape()) + " x " +
                                 shape_str(b.shape()));
    DataVec out(static_cast<std::size_t>(m * n));
    MatMap(out.data(), m, n).noalias() =
        ConstMatMap(a.data(), m, k) * ConstMatMap(b.data(), k, n);
    auto ai = a.impl_ptr(), bi = b.impl_ptr();
    return make_node({m, n}, std::move(out), {ai, bi},
                     [ai, bi, m, k, n](TensorImpl& self, BackwardCtx& ctx) {
                         ConstMatMap dY(self.grad.data(), m, n);
                         if (double* ga = ctx.grad_buf(ai))
                             MatMap(ga, m, k).noalias() +=
                                 dY * ConstMatMap(bi->data.data(), k, n).transpose();
                         if (double* gb = ctx.grad_buf(bi))
                             MatMap(gb, k, n).noalias() +=
                                 ConstMatMap(ai->data.data(), m, k).transpose() * dY;
                     });
}

Tensor transpose(const Tensor& a) {
    if (a.rank() != 2) fail_shape("transpose", "expects rank-2, got " + shape_str(a.shape()));
    const std::int64_t m = a.dim(0), n = a.dim(1);
    DataVec out(static_cast<std::size_t>(m * n));
    MatMap(out.data(), n, m) = ConstMatMap(a.data(), m, n).transpose();
    auto ai = a.impl_ptr();
    return make_node({n, m}, std::move(out), {ai}, [ai, m, n](TensorImpl& self, BackwardCtx& ctx) {
        if (double* g = ctx.grad_buf(ai))
            MatMap(g, m, n) += ConstMatMap(self.grad.data(), n, m).transpose();
    });
}

// ---- reductions / softmax ----------------------------------------------------

Tensor softmax(const Tensor& a, int axis) {
    check_axis("softmax", a.shape(), axis);
    const AxisSplit ax = split_axis(a.shape(), axis);
    DataVec out(static_cast<std::size_t>(a.numel()));
    const double* x = a.data();
    for (std::int64_t o = 0; o < ax.outer; ++o)
        for (std::int64_t i = 0; i < ax.inner; ++i) {
            const std::int64_t base = o * ax.n * ax.inner + i;
            double mx = -1e300;
            for (std::int64_t j = 0; j < ax.n; ++j) mx = std::max(mx, x[base + j * ax.inner]);
            double z = 0.0;
            for (std::int64_t j = 0; j < ax.n; ++j) {
                const double e = std::exp(x[base + j * ax.inner] - mx);
                out[static_cast<std::size_t>(base + j * ax.inner)] = e;
                z += e;
            }
            const double inv = 1.0 / z;
            for (std::int64_t j = 0; j < ax.n; ++j)
                out[static_cast<std::size_t>(base + j * ax.inner)] *= inv;
        }
    auto ai = a.impl_ptr();
    return make_node(a.shape(), std::move(out), {ai}, [ai, ax](TensorImpl& self, BackwardCtx& ctx) {
        if (double* g = ctx.grad_buf(ai)) {
            const double* y = self.data.data();
            const double* dy = self.grad.data();
            for (std::int64_t o = 0; o < ax.outer; ++o)
                for (std::int64_t i = 0; i < ax.inner; ++i) {
                    const std::int64_t base = o * ax.n * ax.inner + i;
                    double dot = 0.0;
                    for (std::int64_t j = 0; j < ax.n; ++j) {
                        const std::int64_t p = base + j * ax.inner;
                        dot += dy[p] * y[p];
                    }
                    for (std::int64_t j = 0; j < ax.n; ++j) {
                        const std::int64_t p = base + j * ax.inner;
                        g[p] += y[p] * (dy[p] - dot);
                    }
                }
        }
    });
}

namespace {

Shape drop_axis(const Shape& s, int axis) {
    Shape r;
    for (int i = 0; i < static_cast<int>(s.size()); ++i)
        if (i != axis) r.push_back(s[static_cast<std::size_t>(i)]);
    return r;
}

}  // namespace

Tensor sum(const Tensor& a, int axis) {
    check_axis("sum", a.shape(), axis);
    const AxisSplit ax = split_axis(a.shape(), axis);
    DataVec out(static_cast<std::size_t>(ax.outer * ax.inner), 0.0);
    const double* x = a.data();
    for (std::int64_t o = 0; o < ax.outer; ++o)
        for (std::int64_t j = 0; j < ax.n; ++j) {
            const double* row = x + (o * ax.n + j) * ax.inner;
            ArrMap(out.data() + o * ax.inner, ax.inner) += ConstArrMap(row, ax.inner);
        }
    auto ai = a.impl_ptr();
    return make_node(drop_axis(a.shape(), axis), std::move(out), {ai},
                     [ai, ax](TensorImpl& self, BackwardCtx& ctx) {
                         if (double* g = ctx.grad_buf(ai)) {
                             const double* dy = self.grad.data();
                             for (std::int64_t o = 0; o < ax.outer; ++o)
                                 for (std::int64_t j = 0; j < ax.n; ++j)
                                     ArrMap(g + (o * ax.n + j) * ax.inner, ax.inner) +=
                                         ConstArrMap(dy + o * ax.inner, ax.inner);
                         }
                     });
}

Tensor mean(const Tensor& a, int axis) {
    check_axis("mean", a.shape(), axis);
    const double inv = 1.0 / static_cast<double>(a.dim(axis));
    return scale(sum(a, axis), inv);
}

Tensor max(const Tensor& a, int axis) {
    check_axis("max", a.shape(), axis);
    const AxisSplit ax = split_axis(a.shape(), axis);
    DataVec out(static_cast<std::size_t>(ax.outer * ax.inner));
    auto argmax = std::make_shared<std::vector<std::int64_t>>(
        static_cast<std::size_t>(ax.outer * ax.inner));
    const double* x = a.data();
    for (std::int64_t o = 0; o < ax.outer; ++o)
        for (std::int64_t i = 0; i < ax.inner; ++i) {
            const std::int64_t base = o * ax.n * ax.inner + i;
            double best = x[base];
            std::int64_t bj = 0;
            for (std::int64_t j = 1; j < ax.n; ++j) {
                const double v = x[base + j * ax.inner];
                if (v > best) best = v, bj = j;  // ties keep the lowest index
            }
            out[static_cast<std::size_t>(o * ax.inner + i)] = best;
            (*argmax)[static_cast<std::size_t>(o * ax.inner + i)] = bj;
        }
    auto ai = a.impl_ptr();
    return make_node(drop_axis(a.shape(), axis), std::move(out), {ai},
                     [ai, ax, argmax](TensorImpl& self, BackwardCtx& ctx) {
                         if (double* g = ctx.grad_buf(ai)) {
                             const double* dy = self.grad.data();
                             for (std::int64_t o = 0; o < ax.outer; ++o)
                                 for (std::int64_t i = 0; i < ax.inner; ++i) {
                                     const std::int64_t r = o * ax.inner + i;
                                     const std::int64_t j = (*argmax)[static_cast<std::size_t>(r)];
                                     g[o * ax.n * ax.inner + j * ax.inner + i] += dy[r];
                                 }
                         }
                     });
}

Tensor sum_all(const Tensor& a) {
    const std::int64_t n = a.numel();
    const double s = ConstArrMap(a.data(), n).sum();
    auto ai = a.impl_ptr();
    return make_node({}, {s}, {ai}, [ai](TensorImpl& self, BackwardCtx& ctx) {
        if (double* g = ctx.grad_buf(ai)) ArrMap(g, ai->numel()) += self.grad[0];
    });
}

Tensor mean_all(const Tensor& a) { return scale(sum_all(a), 1.0 / static_cast<double>(a.numel())); }

// ---- shape ops ---------------------------------------------------------------

Tensor concat(const std::vector<Tensor>& parts, int axis) {
    if (parts.empty()) fail_shape("concat", "no inputs");
    const Shape& s0 = parts[0].shape();
    check_axis("concat", s0, axis);
    std::int64_t total_axis = 0;
    for (const auto& p : parts) {
        if (p.rank() != static_cast<int>(s0.size()))
            fail_shape("concat", "rank mismatch between inputs");
        for (int i = 0; i < p.rank(); ++i)
            if (i != axis && p.dim(i) != s0[static_cast<std::size_t>(i)])
                fail_shape("concat", "shape mismatch at non-concat axis: " + shape_str(p.shape()) +
                                         " vs " + shape_str(s0));
        total_axis += p.dim(axis);
    }
    Shape out_shape = s0;
    out_shape[static_cast<std::size_t>(axis)] = total_axis;
    const AxisSplit ax = split_axis(out_shape, axis);
    DataVec out(static_cast<std::size_t>(shape_numel(out_shape)));
    std::vector<std::shared_ptr<TensorImpl>> parents;
    std::vector<std::int64_t> lens;
    for (const auto& p : parts) {
        parents.push_back(p.impl_ptr());
        lens.push_back(p.dim(axis));
    }
    std::int64_t off = 0;
    for (std::size_t pi = 0; pi < parts.size(); ++pi) {
        const double* src = parts[pi].data();
        const std::int64_t ln = lens[pi] * ax.inner;
        for (std::int64_t o = 0; o < ax.outer; ++o)
            std::memcpy(out.data() + (o * total_axis + off) * ax.inner, src + o * ln,
                        static_cast<std::size_t>(ln) * sizeof(double));
        off += lens[pi];
    }
    return make_node(out_shape, std::move(out), parents,
                     [parents, lens, ax, total_axis](TensorImpl& self, BackwardCtx& ctx) {
                         std::int64_t off = 0;
                         for (std::size_t pi = 0; pi < parents.size(); ++pi) {
                             if (double* g = ctx.grad_buf(parents[pi])) {
                                 const std::int64_t ln = lens[pi] * ax.inner;
                                 for (std::int64_t o = 0; o < ax.outer; ++o)
                                     ArrMap(g + o * ln, ln) += ConstArrMap(
                                         self.grad.data() + (o * total_axis + off) * ax.inner, ln);
                             }
                             off += lens[pi];
                         }
                     });
}

Tensor slice(const Tensor& a, int axis, std::int64_t start, std::int64_t len) {
    check_axis("slice", a.shape(), axis);
    const std::int64_t n = a.dim(axis);
    if (start < 0 || len < 0 || start + len > n)
        fail_shape("slice", "range [" + std::to_string(start) + "," + std::to_string(start + len) +
                                ") out of bounds for axis size " + std::to_string(n));
    const AxisSplit ax = split_axis(a.shape(), axis);
    Shape out_shape = a.shape();
    out_shape[static_cast<std::size_t>(axis)] = len;
    DataVec out(static_cast<std::size_t>(ax.outer * len * ax.inner));
    for (std::int64_t o = 0; o < ax.outer; ++o)
        std::memcpy(out.data() + o * len * ax.inner,
                    a.data() + (o * ax.n + start) * ax.inner,
                    static_cast<std::size_t>(len * ax.inner) * sizeof(double));
    auto ai = a.impl_ptr();
    return make_node(out_shape, std::move(out), {ai},
                     [ai, ax, start, len](TensorImpl& self, BackwardCtx& ctx) {
                         if (double* g = ctx.grad_buf(ai)) {
                             for (std::int64_t o = 0; o < ax.outer; ++o)
                                 ArrMap(g + (o * ax.n + start) * ax.inner, len * ax.inner) +=
                                     ConstArrMap(self.grad.data() + o * len * ax.inner,
                                                 len * ax.inner);
                         }
                     });
}

namespace {

std::int64_t row_len(const Tensor& t) {
    return t.dim(0) == 0 ? 0 : t.numel() / t.dim(0);
}

}  // namespace

Tensor gather(const Tensor& a, const std::vector<std::int64_t>& indices) {
    if (a.rank() < 1) fail_shape("gather", "expects rank >= 1");
    const std::int64_t n0 = a.dim(0), rl = row_len(a);
    for (auto i : indices)
        if (i < 0 || i >= n0)
            fail_shape("gather", "index " + std::to_string(i) + " out of range [0," +
                                     std::to_string(n0) + ")");
    Shape out_shape = a.shape();
    out_shape[0] = static_cast<std::int64_t>(indices.size());
    DataVec out(static_cast<std::size_t>(indices.size()) *
                            static_cast<std::size_t>(rl));
    for (std::size_t r = 0; r < indices.size(); ++r)
        std::memcpy(out.data() + static_cast<std::int64_t>(r) * rl, a.data() + indices[r] * rl,
                    static_cast<std::size_t>(rl) * sizeof(double));
    auto ai = a.impl_ptr();
    auto idx = std::make_shared<std::vector<std::int64_t>>(indices);
    return make_node(out_shape, std::move(out), {ai},
                     [ai, idx, rl](TensorImpl& self, BackwardCtx& ctx) {
                         if (double* g = ctx.grad_buf(ai)) {
                             for (std::size_t r = 0; r < idx->size(); ++r)
                                 ArrMap(g + (*idx)[r] * rl, rl) += ConstArrMap(
                                     self.grad.data() + static_cast<std::int64_t>(r) * rl, rl);
                         }
                     });
}

Tensor scatter(const Tensor& a, const std::vector<std::int64_t>& indices) {
    if (a.rank() < 1) fail_shape("scatter", "expects rank >= 1");
    const std::int64_t n0 = a.dim(0), rl = row_len(a);
    if (static_cast<std::int64_t>(indices.size()) != n0)
        fail_shape("scatter", "index count " + std::to_string(indices.size()) +
                                  " != leading dim " + std::to_string(n0));
    std::vector<char> seen(static_cast<std::size_t>(n0), 0);
    for (auto i : indices) {
        if (i < 0 || i >= n0 || seen[static_cast<std::size_t>(i)])
            fail_shape("scatter", "indices must form a permutation of [0," + std::to_string(n0) + ")");
        seen[static_cast<std::size_t>(i)] = 1;
    }
    DataVec out(a.impl()->data.size());
    for (std::int64_t r = 0; r < n0; ++r)
        std::memcpy(out.data() + indices[static_cast<std::size_t>(r)] * rl, a.data() + r * rl,
                    static_cast<std::size_t>(rl) * sizeof(double));
    auto ai = a.impl_ptr();
    auto idx = std::make_shared<std::vector<std::int64_t>>(indices);
    return make_node(a.shape(), std::move(out), {ai},
                     [ai, idx, rl](TensorImpl& self, BackwardCtx& ctx) {
                         if (double* g = ctx.grad_buf(ai)) {
                             for (std::size_t r = 0; r < idx->size(); ++r)
                                 ArrMap(g + static_cast<std::int64_t>(r) * rl, rl) +=
                                     ConstArrMap(self.grad.data() + (*idx)[r] * rl, rl);
                         }
                     });
}

// ---- layernorm ----------------------------------------------------------------

Tensor layernorm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
    if (x.rank() < 1) fail_shape("layernorm", "expects rank >= 1");
    const std::int64_t n = x.dim(x.rank() - 1);
    if (gamma.numel() != n || beta.numel() != n)
        fail_shape("layernorm", "gamma/beta length must equal last axis " + std::to_string(n));
    const std::int64_t rows = x.numel() / n;
    DataVec out(static_cast<std::size_t>(x.numel()));
    auto stats = std::make_shared<std::vector<double>>(static_cast<std::size_t>(rows * 2));
    const double* xd = x.data();
    const double* gm = gamma.data();
    const double* bt = beta.data();
    for (std::int64_t r = 0; r < rows; ++r) {
        ConstArrMap row(xd + r * n, n);
        const double mu = row.mean();
        const double var = (row - mu).square().sum() / static_cast<double>(n);
        const double inv = 1.0 / std::sqrt(var + eps);
        (*stats)[static_cast<std::size_t>(2 * r)] = mu;
        (*stats)[static_cast<std::size_t>(2 * r + 1)] = inv;
        double* o = out.data() + r * n;
        for (std::int64_t j = 0; j < n; ++j) o[j] = (xd[r * n + j] - mu) * inv * gm[j] + bt[j];
    }
    auto xi = x.impl_ptr(), gi = gamma.impl_ptr(), bi = beta.impl_ptr();
    return make_node(x.shape(), std::move(out), {xi, gi, bi},
                     [xi, gi, bi, stats, n, rows](TensorImpl& self, BackwardCtx& ctx) {
                         const double* dy = self.grad.data();
                         const double* xd = xi->data.data();
                         const double* gm = gi->data.data();
                         double* gx = ctx.grad_buf(xi);
                         double* gg = ctx.grad_buf(gi);
                         double* gb = ctx.grad_buf(bi);
                         std::vector<double> xhat(static_cast<std::size_t>(n));
                         for (std::int64_t r = 0; r < rows; ++r) {
                             const double mu = (*stats)[static_cast<std::size_t>(2 * r)];
                             const double inv = (*stats)[static_cast<std::size_t>(2 * r + 1)];
                             double m1 = 0.0, m2 = 0.0;
                             for (std::int64_t j = 0; j < n; ++j) {
                                 xhat[static_cast<std::size_t>(j)] = (xd[r * n + j] - mu) * inv;
                                 const double dxh = dy[r * n + j] * gm[j];
                                 m1 += dxh;
                                 m2 += dxh * xhat[static_cast<std::size_t>(j)];
                             }
                             m1 /= static_cast<double>(n);
                             m2 /= static_cast<double>(n);
                             for (std::int64_t j = 0; j < n; ++j) {
                                 const double xh = xhat[static_cast<std::size_t>(j)];
                                 if (gx)
                                     gx[r * n + j] +=
                                         (dy[r * n + j] * gm[j] - m1 - xh * m2) * inv;
                                 if (gg) gg[j] += dy[r * n + j] * xh;
                                 if (gb) gb[j] += dy[r * n + j];
                             }
                         }
                     });
}

// ---- conv1d ---------------------------------------------------------------------

Tensor conv1d(const Tensor& x, const Tensor& w, const Tensor& b) {
    if (x.rank() != 2 || w.rank() != 3)
        fail_shape("conv1d", "expects x rank-2 and w rank-3, got " + shape_str(x.shape()) + ", " +
                                 shape_str(w.shape()));
    const std::int64_t L = x.dim(0), cin = x.dim(1);
    const std::int64_t cout = w.dim(0), wcin = w.dim(1), k = w.dim(2);
    if (wcin != cin)
        fail_shape("conv1d", "channel mismatch: x has " + std::to_string(cin) + ", w expects " +
                                 std::to_string(wcin));
    if (k % 2 == 0) fail_shape("conv1d", "kernel size must be odd for same padding");
    if (b.numel() != cout) fail_shape("conv1d", "bias length must equal out channels");
    const std::int64_t pad = (k - 1) / 2;
    DataVec out(static_cast<std::size_t>(L * cout));
    const double* xd = x.data();
    const double* wd = w.data();
    const double* bd = b.data();
    if (k == 1) {
        MatMap(out.data(), L, cout).noalias() =
            ConstMatMap(xd, L, cin) * ConstMatMap(wd, cout, cin).transpose();
        for (std::int64_t t = 0; t < L; ++t)
            ArrMap(out.data() + t * cout, cout) += ConstArrMap(bd, cout);
    } else {
        for (std::int64_t t = 0; t < L; ++t) {
            double* o = out.data() + t * cout;
            for (std::int64_t c = 0; c < cout; ++c) o[c] = bd[c];
            for (std::int64_t j = 0; j < k; ++j) {
                const std::int64_t src = t + j - pad;
                if (src < 0 || src >= L) continue;
                for (std::int64_t c = 0; c < cout; ++c) {
                    const double* wr = wd + (c * cin + 0) * k + j;
                    double acc = 0.0;
                    for (std::int64_t i = 0; i < cin; ++i) acc += wr[i * k] * xd[src * cin + i];
                    o[c] += acc;
                }
            }
        }
    }
    auto xi = x.impl_ptr(), wi = w.impl_ptr(), bi = b.impl_ptr();
    return make_node({L, cout}, std::move(out), {xi, wi, bi},
                     [xi, wi, bi, L, cin, cout, k, pad](TensorImpl& self, BackwardCtx& ctx) {
                         const double* dy = self.grad.data();
                         const double* xd = xi->data.data();
                         const double* wd = wi->data.data();
                         double* gx = ctx.grad_buf(xi);
                         double* gw = ctx.grad_buf(wi);
                         double* gb = ctx.grad_buf(bi);
                         if (gb)
                             for (std::int64_t t = 0; t < L; ++t)
                                 ArrMap(gb, cout) += ConstArrMap(dy + t * cout, cout);
                         if (k == 1) {
                             if (gx)
                                 MatMap(gx, L, cin).noalias() +=
                                     ConstMatMap(dy, L, cout) * ConstMatMap(wd, cout, cin);
                             if (gw)
                                 MatMap(gw, cout, cin).noalias() +=
                                     ConstMatMap(dy, L, cout).transpose() * ConstMatMap(xd, L, cin);
                             return;
                         }
                         for (std::int64_t t = 0; t < L; ++t)
                             for (std::int64_t j = 0; j < k; ++j) {
                                 const std::int64_t src = t + j - pad;
                                 if (src < 0 || src >= L) continue;
                                 for (std::int64_t c = 0; c < cout; ++c) {
                                     const double d = dy[t * cout + c];
                                     for (std::int64_t i = 0; i < cin; ++i) {
                                         if (gx) gx[src * cin + i] += d * wd[(c * cin + i) * k + j];
                                         if (gw) gw[(c * cin + i) * k + j] += d * xd[src * cin + i];
                                     }
                                 }
                             }
                     });
}

// ---- rowscale -------------------------------------------------------------------

Tensor rowscale(const Tensor& x, const Tensor& s) {
    if (x.rank() != 2 || s.rank() != 1 || s.dim(0) != x.dim(0))
        fail_shape("rowscale", "expects x (L,D) and s (L), got " + shape_str(x.shape()) + " and " +
                                   shape_str(s.shape()));
    const std::int64_t L = x.dim(0), D = x.dim(1);
    DataVec out(static_cast<std::size_t>(L * D));
    for (std::int64_t t = 0; t < L; ++t)
        ArrMap(out.data() + t * D, D) = ConstArrMap(x.data() + t * D, D) * s.data()[t];
    auto xi = x.impl_ptr(), si = s.impl_ptr();
    return make_node({L, D}, std::move(out), {xi, si},
                     [xi, si, L, D](TensorImpl& self, BackwardCtx& ctx) {
                         const double* dy = self.grad.data();
                         if (double* gx = ctx.grad_buf(xi))
                             for (std::int64_t t = 0; t < L; ++t)
                                 ArrMap(gx + t * D, D) +=
                                     ConstArrMap(dy + t * D, D) * si->data[static_cast<std::size_t>(t)];
                         if (double* gs = ctx.grad_buf(si))
                             for (std::int64_t t = 0; t < L; ++t)
                                 gs[t] += (ConstArrMap(dy + t * D, D) *
                                           ConstArrMap(xi->data.data() + t * D, D))
                                              .sum();
                     });
}

// ---- selective scan recurrence ----------------------------------------------------

namespace {

void check_permutation(const std::string& op, const std::vector<std::int64_t>& order,
                       std::int64_t L) {
    if (static_cast<std::int64_t>(order.size()) != L)
        throw std::invalid_argument(op + ": order length " + std::to_string(order.size()) +
                                    " != sequence length " + std::to_string(L));
    std::vector<char> seen(static_cast<std::size_t>(L), 0);
    for (auto t : order) {
        if (t < 0 || t >= L || seen[static_cast<std::size_t>(t)])
            throw std::invalid_argument(op + ": order is not a permutation of [0," +
                                        std::to_string(L) + ")");
        seen[static_cast<std::size_t>(t)] = 1;
    }
}

}  // namespace

Tensor scan_recurrence(const Tensor& u, const Tensor& delta, const Tensor& B, const Tensor& C,
                       const Tensor& A_log, const std::vector<std::int64_t>& order) {
    if (u.rank() != 2) fail_shape("scan_recurrence", "u must be (L,D), got " + shape_str(u.shape()));
    const std::int64_t L = u.dim(0), D = u.dim(1);
    if (delta.numel() != L) fail_shape("scan_recurrence", "delta must have length L");
    if (B.rank() != 2 || B.dim(0) != L || C.rank() != 2 || C.dim(0) != L)
        fail_shape("scan_recurrence", "B and C must be (L,S)");
    const std::int64_t S = B.dim(1);
    if (C.dim(1) != S || A_log.rank() != 2 || A_log.dim(0) != D || A_log.dim(1) != S)
        fail_shape("scan_recurrence", "A_log must be (D,S) matching B/C state size");
    check_permutation("scan_recurrence", order, L);

    const std::int64_t DS = D * S;
    DataVec out(static_cast<std::size_t>(L * D));
    // saved state is only needed when this node will take part in backward
    bool record = grad_enabled() &&
                  (u.requires_grad() || delta.requires_grad() || B.requires_grad() ||
                   C.requires_grad() || A_log.requires_grad());
    auto h_seq = std::make_shared<DataVec>();
    auto abar_seq = std::make_shared<DataVec>();
    if (record) {
        h_seq->resize(static_cast<std::size_t>(L * DS));
        abar_seq->resize(static_cast<std::size_t>(L * DS));
    }
    auto ord = std::make_shared<std::vector<std::int64_t>>(order);

    {
        Eigen::ArrayXd E(DS), h(DS), abar_local(DS);
        E = ConstArrMap(A_log.data(), DS).exp();
        h.setZero();
        const double* ud = u.data();
        const double* dd = delta.data();
        const double* Bd = B.data();
        const double* Cd = C.data();
        for (std::int64_t i = 0; i < L; ++i) {
            const std::int64_t t = (*ord)[static_cast<std::size_t>(i)];
            const double dt = dd[t];
            double* abar = record ? abar_seq->data() + i * DS : abar_local.data();
            ArrMap(abar, DS) = (-dt * E).exp();
            h *= ArrMap(abar, DS);
            // h[d,s] += dt * u[t,d] * B[t,s]
            {
                Eigen::Map<Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>
                    H(h.data(), D, S);
                H.noalias() += (dt * ConstMatMap(ud + t * D, D, 1)) * ConstMatMap(Bd + t * S, 1, S);
                // y[t,:] = H * C_t
                Eigen::Map<Eigen::VectorXd> y(out.data() + t * D, D);
                y.noalias() = H * Eigen::Map<const Eigen::VectorXd>(Cd + t * S, S);
            }
            if (record)
                std::memcpy(h_seq->data() + i * DS, h.data(),
                            static_cast<std::size_t>(DS) * sizeof(double));
        }
    }

    auto ui = u.impl_ptr(), di = delta.impl_ptr(), Bi = B.impl_ptr(), Ci = C.impl_ptr(),
         Ai = A_log.impl_ptr();
    return make_node(
        {L, D}, std::move(out), {ui, di, Bi, Ci, Ai},
        [ui, di, Bi, Ci, Ai, ord, h_seq, abar_seq, L, D, S, DS](TensorImpl& self,
                                                                BackwardCtx& ctx) {
            const double* dy = self.grad.data();
            const double* ud = ui->data.data();
            const double* dd = di->data.data();
            const double* Bd = Bi->data.data();
            const double* Cd = Ci->data.data();
            double* gu = ctx.grad_buf(ui);
            double* gdelta = ctx.grad_buf(di);
            double* gB = ctx.grad_buf(Bi);
            double* gC = ctx.grad_buf(Ci);
            double* gA = ctx.grad_buf(Ai);

            Eigen::ArrayXd E(DS), dh(DS), tmp(DS);
            E = ConstArrMap(Ai->data.data(), DS).exp();
            dh.setZero();
            Eigen::VectorXd v(D);
            for (std::int64_t i = L - 1; i >= 0; --i) {
                const std::int64_t t = (*ord)[static_cast<std::size_t>(i)];
                const double dt = dd[t];
                const double* hcur = h_seq->data() + i * DS;
                const double* hprev = i > 0 ? h_seq->data() + (i - 1) * DS : nullptr;
                ConstArrMap abar(abar_seq->data() + i * DS, DS);
                Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic,
                                               Eigen::RowMajor>>
                    Hcur(hcur, D, S);
                Eigen::Map<const Eigen::VectorXd> dyt(dy + t * D, D);
                // y_t = Hcur * C_t
                if (gC)
                    Eigen::Map<Eigen::VectorXd>(gC + t * S, S).noalias() +=
                        Hcur.transpose() * dyt;
                {
                    MatMap dH(dh.data(), D, S);
                    dH.noalias() += dyt * ConstMatMap(Cd + t * S, 1, S);
                }
                double ddelta_acc = 0.0;
                if (hprev) {
                    // dabar = dh .* hprev ; d(abar)/d(delta) = -E .* abar
                    tmp = dh * ConstArrMap(hprev, DS) * abar * E;  // = dabar .* abar .* E
                    ddelta_acc -= tmp.sum();
                    if (gA) ArrMap(gA, DS) += tmp * (-dt);
                }
                // update term: h += dt * outer(u_t, B_t)
                {
                    ConstMatMap dH(dh.data(), D, S);
                    v.noalias() = dH * Eigen::Map<const Eigen::VectorXd>(Bd + t * S, S);  // (D)
                    if (gu) Eigen::Map<Eigen::VectorXd>(gu + t * D, D).noalias() += dt * v;
                    ddelta_acc += v.dot(Eigen::Map<const Eigen::VectorXd>(ud + t * D, D));
                    if (gB)
                        Eigen::Map<Eigen::VectorXd>(gB + t * S, S).noalias() +=
                            dt * dH.transpose() * Eigen::Map<const Eigen::VectorXd>(ud + t * D, D);
                }
                if (gdelta) gdelta[t] += ddelta_acc;
                dh *= abar;  // propagate to h_{t-1}
            }
        });
}

// ---- apply_primitive ----------------------------------------------------------------

Tensor apply_primitive(const std::string& name, const std::vector<Tensor>& inputs,
                       const PrimitiveOptions& opts) {
    auto need = [&](std::size_t n) {
        if (inputs.size() != n)
            fail_shape("apply_primitive(" + name + ")",
                       "expects " + std::to_string(n) + " inputs, got " +
                           std::to_string(inputs.size()));
    };
    if (name == "matmul") return need(2), matmul(inputs[0], inputs[1]);
    if (name == "add") return need(2), add(inputs[0], inputs[1]);
    if (name == "sub") return need(2), sub(inputs[0], inputs[1]);
    if (name == "mul") return need(2), mul(inputs[0], inputs[1]);
    if (name == "exp") return need(1), exp(inputs[0]);
    if (name == "log") return need(1), log(inputs[0]);
    if (name == "neg") return need(1), neg(inputs[0]);
    if (name == "reciprocal") return need(1), reciprocal(inputs[0]);
    if (name == "relu") return need(1), relu(inputs[0]);
    if (name == "sigmoid") return need(1), sigmoid(inputs[0]);
    if (name == "silu") return need(1), silu(inputs[0]);
    if (name == "softplus") return need(1), softplus(inputs[0]);
    if (name == "clamp") return need(1), clamp(inputs[0], opts.lo, opts.hi);
    if (name == "softmax-over-axis") return need(1), softmax(inputs[0], opts.axis);
    if (name == "concat-over-axis") return concat(inputs, opts.axis);
    if (name == "gather") return need(1), gather(inputs[0], opts.indices);
    if (name == "scatter") return need(1), scatter(inputs[0], opts.indices);
    if (name == "sum-over-axis") return need(1), sum(inputs[0], opts.axis);
    if (name == "mean-over-axis") return need(1), mean(inputs[0], opts.axis);
    if (name == "max-over-axis") return need(1), max(inputs[0], opts.axis);
    if (name == "layernorm") return need(3), layernorm(inputs[0], inputs[1], inputs[2]);
    if (name == "conv1d") return need(3), conv1d(inputs[0], inputs[1], inputs[2]);
    if (name == "slice") return need(1), slice(inputs[0], opts.axis, opts.start, opts.len);
    if (name == "rowscale") return need(2), rowscale(inputs[0], inputs[1]);
    if (name == "transpose") return need(1), transpose(inputs[0]);
    throw std::invalid_argument("apply_primitive: unsupported primitive id '" + name + "'");
}

// ---- backward ------------------------------------------------------------------------

void backward(const Tensor& loss, GradSink* sink) {
    if (loss.numel() != 1)
        throw std::invalid_argument("backward: loss must be scalar, got shape " +
                                    shape_str(loss.shape()));
    auto root = loss.impl_ptr();
    if (!root->requires_grad)
        throw std::invalid_argument("backward: loss does not depend on any recorded tensor");

    std::vector<TensorImpl*> nodes;
    std::unordered_set<TensorImpl*> seen;
    std::vector<TensorImpl*> stack;
    if (root->backward_fn) {
        stack.push_back(root.get());
        seen.insert(root.get());
    }
    while (!stack.empty()) {
        TensorImpl* n = stack.back();
        stack.pop_back();
        nodes.push_back(n);
        for (const auto& p : n->parents)
            if (p->backward_fn && seen.insert(p.get()).second) stack.push_back(p.get());
    }
    std::sort(nodes.begin(), nodes.end(),
              [](const TensorImpl* a, const TensorImpl* b) { return a->node_id > b->node_id; });

    root->ensure_grad();
    root->grad[0] = 1.0;
    BackwardCtx ctx(sink);
    for (TensorImpl* n : nodes) {
        n->ensure_grad();
        n->backward_fn(*n, ctx);
    }
}

// ---- finite differences -----------------------------------------------------------------

namespace {

double fd_rel_error_at(const std::function<Tensor(const Tensor&)>& f, Tensor& xp,
                       std::int64_t i, double analytic, double eps, double abs_tol = 0.0) {
    const double orig = xp.data()[i];
    xp.data()[i] = orig + eps;
    const double fp = f(xp).value();
    xp.data()[i] = orig - eps;
    const double fm = f(xp).value();
    xp.data()[i] = orig;
    const double central = (fp - fm) / (2.0 * eps);
    if (std::abs(analytic - central) <= abs_tol) return 0.0;
    return std::abs(analytic - central) / (std::abs(analytic) + std::abs(central) + 1e-12);
}

DataVec fd_analytic_gradient(const std::function<Tensor(const Tensor&)>& f, const Tensor& x,
                             double eps) {
    if (eps <= 0.0) throw std::invalid_argument("finite_difference_check: eps must be > 0");
    // determinism probe
    {
        NoGradGuard ng;
        Tensor y1 = f(x.detach());
        Tensor y2 = f(x.detach());
        if (y1.numel() != 1)
            throw std::invalid_argument("finite_difference_check: f must be scalar-valued");
        if (std::memcmp(y1.data(), y2.data(), sizeof(double)) != 0)
            throw std::runtime_error("finite_difference_check: f is not deterministic");
    }
    Tensor xg = x.detach();
    xg.set_requires_grad(true);
    Tensor loss = f(xg);
    backward(loss);
    DataVec analytic = xg.grad();
    if (analytic.empty())  // the loss never touched x: its gradient is zero
        analytic.assign(static_cast<std::size_t>(x.numel()), 0.0);
    return analytic;
}

}  // namespace

double finite_difference_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x,
                               double eps) {
    const DataVec analytic = fd_analytic_gradient(f, x, eps);
    Tensor xp = x.detach();
    double max_err = 0.0;
    NoGradGuard ng;
    for (std::int64_t i = 0; i < x.numel(); ++i)
        max_err = std::max(
            max_err, fd_rel_error_at(f, xp, i, analytic[static_cast<std::size_t>(i)], eps));
    return max_err;
}

double finite_difference_check_adaptive(const std::function<Tensor(const Tensor&)>& f,
                                        const Tensor& x, double eps,
                                        const std::vector<double>& fallback_eps,
                                        double recheck_threshold, double abs_tol) {
    const DataVec analytic = fd_analytic_gradient(f, x, eps);
    Tensor xp = x.detach();
    double max_err = 0.0;
    NoGradGuard ng;
    for (std::int64_t i = 0; i < x.numel(); ++i) {
        const double a = analytic[static_cast<std::size_t>(i)];
        double err = fd_rel_error_at(f, xp, i, a, eps, abs_tol);
        for (double e2 : fallback_eps) {
            if (err <= recheck_threshold) break;
            err = std::min(err, fd_rel_error_at(f, xp, i, a, e2, abs_tol));
        }
        max_err = std::max(max_err, err);
    }
    return max_err;
}

}  // namespace pointdg
