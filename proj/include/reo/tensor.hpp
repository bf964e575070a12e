// Minimal reverse-mode tensor engine.
//
// Storage is float32, reductions accumulate in float64. A Graph is a tape of
// op records; forward functions append a backward closure when recording is
// on and any input is tracked. Graph::backward walks the tape once in reverse
// order, so each node's closure runs exactly once. Every primitive scans its
// output for NaN/Inf and throws NumericError on the first hit.
//
// Single graph = single thread. Independent graphs are independent tapes and
// may run concurrently as long as they do not mutate shared tensors.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "reo/common.hpp"

namespace reo {

using Shape = std::vector<int>;

inline std::int64_t shape_numel(const Shape& s) {
    std::int64_t n = 1;
    for (int d : s) {
        if (d <= 0) throw UsageError("tensor extents must be positive");
        n *= d;
    }
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << "[";
    for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
    os << "]";
    return os.str();
}

struct TensorData {
    Shape shape;
    std::vector<float> value;
    std::vector<float> grad;      // empty until touched by backward
    bool requires_grad = false;   // leaf flag
    bool tracked = false;         // participates in some tape

    void ensure_grad() {
        if (grad.empty()) grad.assign(value.size(), 0.0f);
    }
};

class Tensor {
public:
    Tensor() : d_(std::make_shared<TensorData>()) {
        d_->shape = {1};
        d_->value.assign(1, 0.0f);
    }
    explicit Tensor(Shape shape, bool requires_grad = false)
        : d_(std::make_shared<TensorData>()) {
        d_->shape = std::move(shape);
        d_->value.assign(static_cast<std::size_t>(shape_numel(d_->shape)), 0.0f);
        d_->requires_grad = requires_grad;
        d_->tracked = requires_grad;
    }

    static Tensor scalar(float v) {
        Tensor t(Shape{1});
        t.data()[0] = v;
        return t;
    }
    static Tensor from(Shape shape, std::vector<float> vals) {
        Tensor t(std::move(shape));
        if (static_cast<std::int64_t>(vals.size()) != t.numel())
            throw UsageError("Tensor::from: value count does not match shape");
        std::copy(vals.begin(), vals.end(), t.data());
        return t;
    }
    static Tensor full(Shape shape, float v) {
        Tensor t(std::move(shape));
        std::fill(t.data(), t.data() + t.numel(), v);
        return t;
    }
    static Tensor uniform(Shape shape, Rng& rng, float lo, float hi, bool requires_grad = false) {
        Tensor t(std::move(shape), requires_grad);
        float* p = t.data();
        for (std::int64_t i = 0; i < t.numel(); ++i)
            p[i] = static_cast<float>(rng.uniform(lo, hi));
        return t;
    }

    const Shape& shape() const { return d_->shape; }
    int rank() const { return static_cast<int>(d_->shape.size()); }
    int dim(int i) const { return d_->shape[static_cast<std::size_t>(i)]; }
    std::int64_t numel() const { return static_cast<std::int64_t>(d_->value.size()); }

    float* data() { return d_->value.data(); }
    const float* data() const { return d_->value.data(); }
    float item() const {
        if (numel() != 1) throw UsageError("Tensor::item on non-scalar " + shape_str(shape()));
        return d_->value[0];
    }

    bool requires_grad() const { return d_->requires_grad; }
    void set_requires_grad(bool rg) {
        d_->requires_grad = rg;
        d_->tracked = d_->tracked || rg;
    }
    bool tracked() const { return d_->tracked; }

    bool has_grad() const { return !d_->grad.empty(); }
    float* grad() { d_->ensure_grad(); return d_->grad.data(); }
    const float* grad_or_null() const { return d_->grad.empty() ? nullptr : d_->grad.data(); }
    void zero_grad() {
        if (!d_->grad.empty()) std::fill(d_->grad.begin(), d_->grad.end(), 0.0f);
    }

    std::shared_ptr<TensorData> handle() const { return d_; }

private:
    Tensor(std::shared_ptr<TensorData> d) : d_(std::move(d)) {}
    std::shared_ptr<TensorData> d_;
};

// One recorded op. Inputs/output kept for the acyclicity audit; the closure
// owns shared handles to everything it needs.
struct GraphNode {
    const char* op;
    std::vector<const TensorData*> inputs;
    const TensorData* output;
    std::function<void()> back;
};

class Graph {
public:
    bool recording = true;
    bool finite_checks = true;

    void reset() { nodes_.clear(); leaves_.clear(); }
    std::size_t size() const { return nodes_.size(); }
    const std::vector<GraphNode>& nodes() const { return nodes_; }

    void note_leaf(const Tensor& t) {
        if (t.requires_grad()) leaves_.push_back(t.handle());
    }

    void record(const char* op, std::vector<const TensorData*> inputs,
                const TensorData* output, std::function<void()> back) {
        // acyclic by construction: an output may never appear as a later
        // node's output again, and inputs must already exist
        nodes_.push_back(GraphNode{op, std::move(inputs), output, std::move(back)});
    }

    // Reverse accumulation from a scalar loss. Each node's closure runs once.
    void backward(Tensor& loss) {
        if (loss.numel() != 1)
            throw UsageError("backward: loss must be scalar, got " + shape_str(loss.shape()));
        for (auto& leaf : leaves_) leaf->ensure_grad();
        loss.grad()[0] = 1.0f;
        for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
            if (it->back) it->back();
        }
    }

    void check_finite(const Tensor& t, const char* op) const {
        if (!finite_checks) return;
        const float* p = t.data();
        const std::int64_t n = t.numel();
        for (std::int64_t i = 0; i < n; ++i) {
            if (!std::isfinite(p[i]))
                throw NumericError(std::string("non-finite value in output of ") + op);
        }
    }

private:
    std::vector<GraphNode> nodes_;
    std::vector<std::shared_ptr<TensorData>> leaves_;
};

namespace detail {

inline bool any_tracked(std::initializer_list<const Tensor*> ts) {
    for (const Tensor* t : ts)
        if (t->tracked()) return true;
    return false;
}

// Common postlude: finite check, leaf registration, tracking propagation.
inline void finish_op(Graph& g, const char* op,
                      std::initializer_list<const Tensor*> inputs, Tensor& out,
                      std::function<void()> back) {
    g.check_finite(out, op);
    if (!g.recording) return;
    bool tracked = false;
    std::vector<const TensorData*> in_ptrs;
    in_ptrs.reserve(inputs.size());
    for (const Tensor* t : inputs) {
        in_ptrs.push_back(t->handle().get());
        tracked = tracked || t->tracked();
        g.note_leaf(*t);
    }
    if (!tracked) return;
    out.handle()->tracked = true;
    g.record(op, std::move(in_ptrs), out.handle().get(), std::move(back));
}

inline void require(bool cond, const char* msg) {
    if (!cond) throw UsageError(msg);
}

} // namespace detail

// ---------------------------------------------------------------------------
// Elementwise arithmetic
// ---------------------------------------------------------------------------

inline Tensor add(Graph& g, const Tensor& a, const Tensor& b) {
    detail::require(a.shape() == b.shape(), "add: shape mismatch");
    Tensor out(a.shape());
    const std::int64_t n = a.numel();
    const float* pa = a.data();
    const float* pb = b.data();
    float* po = out.data();
    for (std::int64_t i = 0; i < n; ++i) po[i] = pa[i] + pb[i];
    auto ha = a.handle(), hb = b.handle(), ho = out.handle();
    detail::finish_op(g, "add", {&a, &b}, out, [ha, hb, ho, n] {
        if (ho->grad.empty()) return;
        ha->ensure_grad();
        hb->ensure_grad();
        const float* go = ho->grad.data();
        float* ga = ha->grad.data();
        float* gb = hb->grad.data();
        for (std::int64_t i = 0; i < n; ++i) { ga[i] += go[i]; gb[i] += go[i]; }
    });
    return out;
}

inline Tensor sub(Graph& g, const Tensor& a, const Tensor& b) {
    detail::require(a.shape() == b.shape(), "sub: shape mismatch");
    Tensor out(a.shape());
    const std::int64_t n = a.numel();
    const float* pa = a.data();
    const float* pb = b.data();
    float* po = out.data();
    for (std::int64_t i = 0; i < n; ++i) po[i] = pa[i] - pb[i];
    auto ha = a.handle(), hb = b.handle(), ho = out.handle();
    detail::finish_op(g, "sub", {&a, &b}, out, [ha, hb, ho, n] {
        if (ho->grad.empty()) return;
        ha->ensure_grad();
        hb->ensure_grad();
        const float* go = ho->grad.data();
        float* ga = ha->grad.data();
        float* gb = hb->grad.data();
        for (std::int64_t i = 0; i < n; ++i) { ga[i] += go[i]; gb[i] -= go[i]; }
    });
    return out;
}

inline Tensor mul(Graph& g, const Tensor& a, const Tensor& b) {
    detail::require(a.shape() == b.shape(), "mul: shape mismatch");
    Tensor out(a.shape());
    const std::int64_t n = a.numel();
    const float* pa = a.data();
    const float* pb = b.data();
    float* po = out.data();
    for (std::int64_t i = 0; i < n; ++i) po[i] = pa[i] * pb[i];
    auto ha = a.handle(), hb = b.handle(), ho = out.handle();
    detail::finish_op(g, "mul", {&a, &b}, out, [ha, hb, ho, n] {
        if (ho->grad.empty()) return;
        ha->ensure_grad();
        hb->ensure_grad();
        const float* go = ho->grad.data();
        float* ga = ha->grad.data();
        float* gb = hb->grad.data();
        const float* va = ha->value.data();
        const float* vb = hb->value.data();
        for (std::int64_t i = 0; i < n; ++i) {
            ga[i] += go[i] * vb[i];
            gb[i] += go[i] * va[i];
        }
    });
    return out;
}

inline Tensor scale(Graph& g, const Tensor& a, float s) {
    Tensor out(a.shape());
    const std::int64_t n = a.numel();
    const float* pa = a.data();
    float* po = out.data();
    for (std::int64_t i = 0; i < n; ++i) po[i] = pa[i] * s;
    auto ha = a.handle(), ho = out.handle();
    detail::finish_op(g, "scale", {&a}, out, [ha, ho, n, s] {
        if (ho->grad.empty()) return;
        ha->ensure_grad();
        const float* go = ho->grad.data();
        float* ga = ha->grad.data();
        for (std::int64_t i = 0; i < n; ++i) ga[i] += go[i] * s;
    });
    return out;
}

// Broadcast a row vector over the rows of x: out[i,:] = x[i,:] + b.
inline Tensor add_rowvec(Graph& g, const Tensor& x, const Tensor& b) {
    detail::require(x.rank() == 2 && b.rank() == 1 && x.dim(1) == b.dim(0),
                    "add_rowvec: expects [NxC] + [C]");
    const int n = x.dim(0), c = x.dim(1);
    Tensor out(x.shape());
    const float* px = x.data();
    const float* pb = b.data();
    float* po = out.data();
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < c; ++j) po[i * c + j] = px[i * c + j] + pb[j];
    auto hx = x.handle(), hb = b.handle(), ho = out.handle();
    detail::finish_op(g, "add_rowvec", {&x, &b}, out, [hx, hb, ho, n, c] {
        if (ho->grad.empty()) return;
        hx->ensure_grad();
        hb->ensure_grad();
        const float* go = ho->grad.data();
        float* gx = hx->grad.data();
        float* gb = hb->grad.data();
        for (int i = 0; i < n; ++i)
            for (int j = 0; j < c; ++j) {
                gx[i * c + j] += go[i * c + j];
                gb[j] += go[i * c + j];
            }
    });
    return out;
}

// ---------------------------------------------------------------------------
// Matrix multiply and the linear primitive
// ---------------------------------------------------------------------------

namespace detail {

// C += A(MxK) * B(KxN), row-major, saxpy inner loop over contiguous rows.
inline void matmul_acc(const float* a, const float* b, float* c, int m, int k, int n) {
    for (int i = 0; i < m; ++i) {
        const float* arow = a + static_cast<std::size_t>(i) * k;
        float* crow = c + static_cast<std::size_t>(i) * n;
        for (int p = 0; p < k; ++p) {
            const float av = arow[p];
            if (av == 0.0f) continue;
            const float* brow = b + static_cast<std::size_t>(p) * n;
            for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

// dA += dC * B^T : dA[i,p] = dot(dC[i,:], B[p,:])
inline void matmul_grad_a(const float* dc, const float* b, float* da, int m, int k, int n) {
    for (int i = 0; i < m; ++i) {
        const float* dcrow = dc + static_cast<std::size_t>(i) * n;
        float* darow = da + static_cast<std::size_t>(i) * k;
        for (int p = 0; p < k; ++p) {
            const float* brow = b + static_cast<std::size_t>(p) * n;
            float acc = 0.0f;
            for (int j = 0; j < n; ++j) acc += dcrow[j] * brow[j];
            darow[p] += acc;
        }
    }
}

// dB += A^T * dC : saxpy over dC rows
inline void matmul_grad_b(const float* a, const float* dc, float* db, int m, int k, int n) {
    for (int i = 0; i < m; ++i) {
        const float* arow = a + static_cast<std::size_t>(i) * k;
        const float* dcrow = dc + static_cast<std::size_t>(i) * n;
        for (int p = 0; p < k; ++p) {
            const float av = arow[p];
            if (av == 0.0f) continue;
            float* dbrow = db + static_cast<std::size_t>(p) * n;
            for (int j = 0; j < n; ++j) dbrow[j] += av * dcrow[j];
        }
    }
}

} // namespace detail

inline Tensor matmul(Graph& g, const Tensor& a, const Tensor& b) {
    detail::require(a.rank() == 2 && b.rank() == 2, "matmul: rank-2 tensors expected");
    if (a.dim(1) != b.dim(0))
        throw UsageError("matmul: inner dimensions disagree " + shape_str(a.shape()) +
                         " * " + shape_str(b.shape()));
    const int m = a.dim(0), k = a.dim(1), n = b.dim(1);
    Tensor out(Shape{m, n});
    detail::matmul_acc(a.data(), b.data(), out.data(), m, k, n);
    auto ha = a.handle(), hb = b.handle(), ho = out.handle();
    detail::finish_op(g, "matmul", {&a, &b}, out, [ha, hb, ho, m, k, n] {
        if (ho->grad.empty()) return;
        const float* go = ho->grad.data();
        if (ha->tracked || ha->requires_grad) {
            ha->ensure_grad();
            detail::matmul_grad_a(go, hb->value.data(), ha->grad.data(), m, k, n);
        }
        if (hb->tracked || hb->requires_grad) {
            hb->ensure_grad();
            detail::matmul_grad_b(ha->value.data(), go, hb->grad.data(), m, k, n);
        }
    });
    return out;
}

// y = x * W + b
inline Tensor linear(Graph& g, const Tensor& x, const Tensor& w, const Tensor& b) {
    detail::require(x.rank() == 2 && w.rank() == 2 && b.rank() == 1, "linear: bad ranks");
    if (x.dim(1) != w.dim(0))
        throw UsageError("linear: inner dimensions disagree " + shape_str(x.shape()) +
                         " * " + shape_str(w.shape()));
    detail::require(w.dim(1) == b.dim(0), "linear: bias width mismatch");
    const int m = x.dim(0), k = x.dim(1), n = w.dim(1);
    Tensor out(Shape{m, n});
    float* po = out.data();
    const float* pb = b.data();
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j) po[i * n + j] = pb[j];
    detail::matmul_acc(x.data(), w.data(), po, m, k, n);
    auto hx = x.handle(), hw = w.handle(), hb = b.handle(), ho = out.handle();
    detail::finish_op(g, "linear", {&x, &w, &b}, out, [hx, hw, hb, ho, m, k, n] {
        if (ho->grad.empty()) return;
        const float* go = ho->grad.data();
        if (hx->tracked || hx->requires_grad) {
            hx->ensure_grad();
            detail::matmul_grad_a(go, hw->value.data(), hx->grad.data(), m, k, n);
        }
        if (hw->tracked || hw->requires_grad) {
            hw->ensure_grad();
            detail::matmul_grad_b(hx->value.data(), go, hw->grad.data(), m, k, n);
        }
        if (hb->tracked || hb->requires_grad) {
            hb->ensure_grad();
            float* gb = hb->grad.data();
            for (int i = 0; i < m; ++i)
                for (int j = 0; j < n; ++j) gb[j] += go[i * n + j];
        }
    });
    return out;
}

// ---------------------------------------------------------------------------
// Activations
// ---------------------------------------------------------------------------

inline Tensor gelu(Graph& g, const Tensor& x) {
    // tanh approximation; smooth everywhere so finite differences apply
    Tensor out(x.shape());
    const std::int64_t n = x.numel();
    const float* px = x.data();
    float* po = out.data();
    constexpr float kC = 0.7978845608028654f;  // sqrt(2/pi)
    for (std::int64_t i = 0; i < n; ++i) {
        const float v = px[i];
        const float u = kC * (v + 0.044715f * v * v * v);
        po[i] = 0.5f * v * (1.0f + std::tanh(u));
    }
    auto hx = x.handle(), ho = out.handle();
    detail::finish_op(g, "gelu", {&x}, out, [hx, ho, n] {
        if (ho->grad.empty()) return;
        hx->ensure_grad();
        const float* go = ho->grad.data();
        const float* px = hx->value.data();
        float* gx = hx->grad.data();
        constexpr float kC = 0.7978845608028654f;
        for (std::int64_t i = 0; i < n; ++i) {
            const float v = px[i];
            const float u = kC * (v + 0.044715f * v * v * v);
            const float t = std::tanh(u);
            const float du = kC * (1.0f + 3.0f * 0.044715f * v * v);
            const float d = 0.5f * (1.0f + t) + 0.5f * v * (1.0f - t * t) * du;
            gx[i] += go[i] * d;
        }
    });
    return out;
}

inline Tensor sigmoid(Graph& g, const Tensor& x) {
    Tensor out(x.shape());
    const std::int64_t n = x.numel();
    const float* px = x.data();
    float* po = out.data();
    for (std::int64_t i = 0; i < n; ++i) {
        const float v = px[i];
        po[i] = v >= 0.0f ? 1.0f / (1.0f + std::exp(-v))
                          : std::exp(v) / (1.0f + std::exp(v));
    }
    auto hx = x.handle(), ho = out.handle();
    detail::finish_op(g, "sigmoid", {&x}, out, [hx, ho, n] {
        if (ho->grad.empty()) return;
        hx->ensure_grad();
        const float* go = ho->grad.data();
        const float* po = ho->value.data();
        float* gx = hx->grad.data();
        for (std::int64_t i = 0; i < n; ++i) gx[i] += go[i] * po[i] * (1.0f - po[i]);
    });
    return out;
}

inline Tensor softplus(Graph& g, const Tensor& x) {
    Tensor out(x.shape());
    const std::int64_t n = x.numel();
    const float* px = x.data();
    float* po = out.data();
    for (std::int64_t i = 0; i < n; ++i) {
        const float v = px[i];
        po[i] = v > 20.0f ? v : std::log1p(std::exp(std::min(v, 20.0f)));
        if (po[i] <= 0.0f) po[i] = std::numeric_limits<float>::min();
    }
    auto hx = x.handle(), ho = out.handle();
    detail::finish_op(g, "softplus", {&x}, out, [hx, ho, n] {
        if (ho->grad.empty()) return;
        hx->ensure_grad();
        const float* go = ho->grad.data();
        const float* px = hx->value.data();
        float* gx = hx->grad.data();
        for (std::int64_t i = 0; i < n; ++i) {
            const float v = px[i];
            const float s = v >= 0.0f ? 1.0f / (1.0f + std::exp(-v))
                                      : std::exp(v) / (1.0f + std::exp(v));
            gx[i] += go[i] * s;
        }
    });
    return out;
}

// ---------------------------------------------------------------------------
// Softmax over the last axis, stabilized by row-max subtraction.
// ---------------------------------------------------------------------------

inline Tensor softmax(Graph& g, const Tensor& x) {
    detail::require(x.rank() >= 1, "softmax: rank >= 1 expected");
    const int k = x.dim(x.rank() - 1);
    const std::int64_t rows = x.numel() / k;
    Tensor out(x.shape());
    const float* px = x.data();
    float* po = out.data();
    for (std::int64_t r = 0; r < rows; ++r) {
        const float* in = px + r * k;
        float* o = po + r * k;
        float mx = in[0];
        for (int j = 1; j < k; ++j) mx = std::max(mx, in[j]);
        double denom = 0.0;
        for (int j = 0; j < k; ++j) {
            o[j] = std::exp(in[j] - mx);
            denom += static_cast<double>(o[j]);
        }
        const float inv = static_cast<float>(1.0 / denom);
        for (int j = 0; j < k; ++j) o[j] *= inv;
    }
    auto hx = x.handle(), ho = out.handle();
    detail::finish_op(g, "softmax", {&x}, out, [hx, ho, rows, k] {
        if (ho->grad.empty()) return;
        hx->ensure_grad();
        const float* go = ho->grad.data();
        const float* po = ho->value.data();
        float* gx = hx->grad.data();
        for (std::int64_t r = 0; r < rows; ++r) {
            const float* gr = go + r * k;
            const float* pr = po + r * k;
            float* xr = gx + r * k;
            double dot = 0.0;
            for (int j = 0; j < k; ++j) dot += static_cast<double>(gr[j]) * pr[j];
            const float dotf = static_cast<float>(dot);
            for (int j = 0; j < k; ++j) xr[j] += pr[j] * (gr[j] - dotf);
        }
    });
    return out;
}

// ---------------------------------------------------------------------------
// Layer normalization over the last axis with learnable gamma/beta.
// ---------------------------------------------------------------------------

inline Tensor layernorm(Graph& g, const Tensor& x, const Tensor& gamma, const Tensor& beta,
                        float eps = 1e-5f) {
    const int c = x.dim(x.rank() - 1);
    detail::require(gamma.rank() == 1 && gamma.dim(0) == c && beta.rank() == 1 && beta.dim(0) == c,
                    "layernorm: gamma/beta width mismatch");
    const std::int64_t rows = x.numel() / c;
    Tensor out(x.shape());
    std::vector<float> inv_std(static_cast<std::size_t>(rows));
    std::vector<float> xhat(static_cast<std::size_t>(x.numel()));
    const float* px = x.data();
    const float* pg = gamma.data();
    const float* pb = beta.data();
    float* po = out.data();
    for (std::int64_t r = 0; r < rows; ++r) {
        const float* in = px + r * c;
        double m = 0.0;
        for (int j = 0; j < c; ++j) m += in[j];
        m /= c;
        double var = 0.0;
        for (int j = 0; j < c; ++j) {
            const double d = in[j] - m;
            var += d * d;
        }
        var /= c;
        const float is = static_cast<float>(1.0 / std::sqrt(var + eps));
        inv_std[static_cast<std::size_t>(r)] = is;
        float* xh = xhat.data() + r * c;
        float* o = po + r * c;
        const float mf = static_cast<float>(m);
        for (int j = 0; j < c; ++j) {
            xh[j] = (in[j] - mf) * is;
            o[j] = xh[j] * pg[j] + pb[j];
        }
    }
    auto hx = x.handle(), hg = gamma.handle(), hb = beta.handle(), ho = out.handle();
    auto xh = std::make_shared<std::vector<float>>(std::move(xhat));
    auto istd = std::make_shared<std::vector<float>>(std::move(inv_std));
    detail::finish_op(g, "layernorm", {&x, &gamma, &beta}, out, [hx, hg, hb, ho, xh, istd, rows, c] {
        if (ho->grad.empty()) return;
        hx->ensure_grad();
        hg->ensure_grad();
        hb->ensure_grad();
        const float* go = ho->grad.data();
        const float* pg = hg->value.data();
        float* gx = hx->grad.data();
        float* gg = hg->grad.data();
        float* gb = hb->grad.data();
        for (std::int64_t r = 0; r < rows; ++r) {
            const float* gr = go + r * c;
            const float* xr = xh->data() + r * c;
            float* gxr = gx + r * c;
            const float is = (*istd)[static_cast<std::size_t>(r)];
            double sum_dy = 0.0, sum_dy_xhat = 0.0;
            for (int j = 0; j < c; ++j) {
                const float dy = gr[j] * pg[j];
                sum_dy += dy;
                sum_dy_xhat += static_cast<double>(dy) * xr[j];
                gg[j] += gr[j] * xr[j];
                gb[j] += gr[j];
            }
            const float a = static_cast<float>(sum_dy / c);
            const float b2 = static_cast<float>(sum_dy_xhat / c);
            for (int j = 0; j < c; ++j) {
                const float dy = gr[j] * pg[j];
                gxr[j] += is * (dy - a - xr[j] * b2);
            }
        }
    });
    return out;
}

// ---------------------------------------------------------------------------
// Reductions (double accumulation)
// ---------------------------------------------------------------------------

inline Tensor sum(Graph& g, const Tensor& x) {
    Tensor out(Shape{1});
    const std::int64_t n = x.numel();
    const float* px = x.data();
    double acc = 0.0;
    for (std::int64_t i = 0; i < n; ++i) acc += px[i];
    out.data()[0] = static_cast<float>(acc);
    auto hx = x.handle(), ho = out.handle();
    detail::finish_op(g, "sum", {&x}, out, [hx, ho, n] {
        if (ho->grad.empty()) return;
        hx->ensure_grad();
        const float go = ho->grad[0];
        float* gx = hx->grad.data();
        for (std::int64_t i = 0; i < n; ++i) gx[i] += go;
    });
    return out;
}

inline Tensor mean(Graph& g, const Tensor& x) {
    Tensor s = sum(g, x);
    return scale(g, s, 1.0f / static_cast<float>(x.numel()));
}

// ---------------------------------------------------------------------------
// Structure ops: reshape (copying), transpose, concat, gathers
// ---------------------------------------------------------------------------

inline Tensor reshape(Graph& g, const Tensor& x, Shape new_shape) {
    if (shape_numel(new_shape) != x.numel())
        throw UsageError("reshape: element count mismatch " + shape_str(x.shape()) +
                         " -> " + shape_str(new_shape));
    Tensor out(std::move(new_shape));
    std::copy(x.data(), x.data() + x.numel(), out.data());
    const std::int64_t n = x.numel();
    auto hx = x.handle(), ho = out.handle();
    detail::finish_op(g, "reshape", {&x}, out, [hx, ho, n] {
        if (ho->grad.empty()) return;
        hx->ensure_grad();
        const float* go = ho->grad.data();
        float* gx = hx->grad.data();
        for (std::int64_t i = 0; i < n; ++i) gx[i] += go[i];
    });
    return out;
}

inline Tensor transpose2(Graph& g, const Tensor& x) {
    detail::require(x.rank() == 2, "transpose2: rank-2 expected");
    const int m = x.dim(0), n = x.dim(1);
    Tensor out(Shape{n, m});
    const float* px = x.data();
    float* po = out.data();
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j) po[j * m + i] = px[i * n + j];
    auto hx = x.handle(), ho = out.handle();
    detail::finish_op(g, "transpose2", {&x}, out, [hx, ho, m, n] {
        if (ho->grad.empty()) return;
        hx->ensure_grad();
        const float* go = ho->grad.data();
        float* gx = hx->grad.data();
        for (int i = 0; i < m; ++i)
            for (int j = 0; j < n; ++j) gx[i * n + j] += go[j * m + i];
    });
    return out;
}

// Concatenate rank-2 tensors along axis 0; all must share the column count.
inline Tensor concat_rows(Graph& g, const std::vector<Tensor>& parts) {
    detail::require(!parts.empty(), "concat_rows: empty input");
    const int c = parts[0].dim(1);
    int total = 0;
    for (const Tensor& t : parts) {
        detail::require(t.rank() == 2 && t.dim(1) == c, "concat_rows: column mismatch");
        total += t.dim(0);
    }
    Tensor out(Shape{total, c});
    float* po = out.data();
    std::int64_t off = 0;
    for (const Tensor& t : parts) {
        std::copy(t.data(), t.data() + t.numel(), po + off);
        off += t.numel();
    }
    // record one node per part so tracking propagates exactly
    if (g.recording) {
        bool any = false;
        for (const Tensor& t : parts) any = any || t.tracked();
        g.check_finite(out, "concat_rows");
        if (any) {
            out.handle()->tracked = true;
            std::int64_t o2 = 0;
            for (const Tensor& t : parts) {
                g.note_leaf(t);
                auto ht = t.handle();
                auto ho = out.handle();
                const std::int64_t cnt = t.numel();
                const std::int64_t offset = o2;
                g.record("concat_rows", {ht.get()}, ho.get(), [ht, ho, offset, cnt] {
                    if (ho->grad.empty()) return;
                    ht->ensure_grad();
                    const float* go = ho->grad.data() + offset;
                    float* gt = ht->grad.data();
                    for (std::int64_t i = 0; i < cnt; ++i) gt[i] += go[i];
                });
                o2 += cnt;
            }
        }
    } else {
        g.check_finite(out, "concat_rows");
    }
    return out;
}

// Select rows of a [RxC] tensor; backward scatter-adds.
inline Tensor gather_rows(Graph& g, const Tensor& x, const std::vector<std::int64_t>& idx) {
    detail::require(x.rank() == 2, "gather_rows: rank-2 expected");
    const int c = x.dim(1);
    const std::int64_t r = x.dim(0);
    for (std::int64_t i : idx)
        if (i < 0 || i >= r) throw UsageError("gather_rows: index out of range");
    Tensor out(Shape{static_cast<int>(idx.size()), c});
    const float* px = x.data();
    float* po = out.data();
    for (std::size_t i = 0; i < idx.size(); ++i)
        std::copy(px + idx[i] * c, px + (idx[i] + 1) * c, po + static_cast<std::int64_t>(i) * c);
    auto hx = x.handle(), ho = out.handle();
    auto ids = std::make_shared<std::vector<std::int64_t>>(idx);
    detail::finish_op(g, "gather_rows", {&x}, out, [hx, ho, ids, c] {
        if (ho->grad.empty()) return;
        hx->ensure_grad();
        const float* go = ho->grad.data();
        float* gx = hx->grad.data();
        for (std::size_t i = 0; i < ids->size(); ++i) {
            float* dst = gx + (*ids)[i] * c;
            const float* src = go + static_cast<std::int64_t>(i) * c;
            for (int j = 0; j < c; ++j) dst[j] += src[j];
        }
    });
    return out;
}

// [CxHxW] -> [(H*W) x C] position-major rows (tokenizer layout).
inline Tensor chw_to_rows(Graph& g, const Tensor& x) {
    detail::require(x.rank() == 3, "chw_to_rows: rank-3 expected");
    const int c = x.dim(0), h = x.dim(1), w = x.dim(2);
    Tensor out(Shape{h * w, c});
    const float* px = x.data();
    float* po = out.data();
    for (int ch = 0; ch < c; ++ch)
        for (int p = 0; p < h * w; ++p) po[p * c + ch] = px[ch * h * w + p];
    auto hx = x.handle(), ho = out.handle();
    detail::finish_op(g, "chw_to_rows", {&x}, out, [hx, ho, c, h, w] {
        if (ho->grad.empty()) return;
        hx->ensure_grad();
        const float* go = ho->grad.data();
        float* gx = hx->grad.data();
        for (int ch = 0; ch < c; ++ch)
            for (int p = 0; p < h * w; ++p) gx[ch * h * w + p] += go[p * c + ch];
    });
    return out;
}

// [(H*W) x C] -> [CxHxW]; inverse of chw_to_rows.
inline Tensor rows_to_chw(Graph& g, const Tensor& x, int h, int w) {
    detail::require(x.rank() == 2 && x.dim(0) == h * w, "rows_to_chw: row count mismatch");
    const int c = x.dim(1);
    Tensor out(Shape{c, h, w});
    const float* px = x.data();
    float* po = out.data();
    for (int p = 0; p < h * w; ++p)
        for (int ch = 0; ch < c; ++ch) po[ch * h * w + p] = px[p * c + ch];
    auto hx = x.handle(), ho = out.handle();
    detail::finish_op(g, "rows_to_chw", {&x}, out, [hx, ho, c, h, w] {
        if (ho->grad.empty()) return;
        hx->ensure_grad();
        const float* go = ho->grad.data();
        float* gx = hx->grad.data();
        for (int p = 0; p < h * w; ++p)
            for (int ch = 0; ch < c; ++ch) gx[p * c + ch] += go[ch * h * w + p];
    });
    return out;
}

// ---------------------------------------------------------------------------
// conv2d: single-image cross-correlation, CxHxW layout.
// pad = dilation*(k-1)/2 keeps the spatial size at stride 1.
// ---------------------------------------------------------------------------

inline int conv_out_extent(int in, int k, int stride, int dilation, int pad) {
    const int eff = dilation * (k - 1) + 1;
    return (in + 2 * pad - eff) / stride + 1;
}

inline Tensor conv2d(Graph& g, const Tensor& x, const Tensor& w, int stride = 1,
                     int dilation = 1, int pad = 0) {
    if (stride <= 0 || dilation <= 0)
        throw ConfigError("conv2d: stride and dilation must be positive");
    detail::require(x.rank() == 3 && w.rank() == 4, "conv2d: x must be CxHxW, w CoxCixKxK");
    const int ci = x.dim(0), h = x.dim(1), wd = x.dim(2);
    const int co = w.dim(0), k = w.dim(2);
    detail::require(w.dim(1) == ci, "conv2d: channel mismatch");
    detail::require(w.dim(3) == k, "conv2d: square kernels only");
    if (k % 2 != 1) throw ConfigError("conv2d: kernel size must be odd");
    const int oh = conv_out_extent(h, k, stride, dilation, pad);
    const int ow = conv_out_extent(wd, k, stride, dilation, pad);
    detail::require(oh > 0 && ow > 0, "conv2d: output would be empty");
    Tensor out(Shape{co, oh, ow});
    const float* px = x.data();
    const float* pw = w.data();
    float* po = out.data();
    for (int oc = 0; oc < co; ++oc) {
        float* oplane = po + static_cast<std::size_t>(oc) * oh * ow;
        for (int ic = 0; ic < ci; ++ic) {
            const float* iplane = px + static_cast<std::size_t>(ic) * h * wd;
            const float* wk = pw + (static_cast<std::size_t>(oc) * ci + ic) * k * k;
            for (int ky = 0; ky < k; ++ky) {
                for (int kx = 0; kx < k; ++kx) {
                    const float wv = wk[ky * k + kx];
                    if (wv == 0.0f) continue;
                    for (int oy = 0; oy < oh; ++oy) {
                        const int iy = oy * stride + ky * dilation - pad;
                        if (iy < 0 || iy >= h) continue;
                        const float* irow = iplane + static_cast<std::size_t>(iy) * wd;
                        float* orow = oplane + static_cast<std::size_t>(oy) * ow;
                        for (int ox = 0; ox < ow; ++ox) {
                            const int ix = ox * stride + kx * dilation - pad;
                            if (ix < 0 || ix >= wd) continue;
                            orow[ox] += wv * irow[ix];
                        }
                    }
                }
            }
        }
    }
    auto hx = x.handle(), hw = w.handle(), ho = out.handle();
    detail::finish_op(g, "conv2d", {&x, &w}, out,
                      [hx, hw, ho, ci, h, wd, co, k, oh, ow, stride, dilation, pad] {
        if (ho->grad.empty()) return;
        const float* go = ho->grad.data();
        const bool need_dx = hx->tracked || hx->requires_grad;
        const bool need_dw = hw->tracked || hw->requires_grad;
        if (need_dx) hx->ensure_grad();
        if (need_dw) hw->ensure_grad();
        const float* px = hx->value.data();
        const float* pw = hw->value.data();
        for (int oc = 0; oc < co; ++oc) {
            const float* gplane = go + static_cast<std::size_t>(oc) * oh * ow;
            for (int ic = 0; ic < ci; ++ic) {
                const std::size_t wbase = (static_cast<std::size_t>(oc) * ci + ic) * k * k;
                for (int ky = 0; ky < k; ++ky) {
                    for (int kx = 0; kx < k; ++kx) {
                        const float wv = pw[wbase + ky * k + kx];
                        double wacc = 0.0;
                        for (int oy = 0; oy < oh; ++oy) {
                            const int iy = oy * stride + ky * dilation - pad;
                            if (iy < 0 || iy >= h) continue;
                            const float* grow = gplane + static_cast<std::size_t>(oy) * ow;
                            const float* irow = px + (static_cast<std::size_t>(ic) * h + iy) * wd;
                            float* dxrow = need_dx
                                ? hx->grad.data() + (static_cast<std::size_t>(ic) * h + iy) * wd
                                : nullptr;
                            for (int ox = 0; ox < ow; ++ox) {
                                const int ix = ox * stride + kx * dilation - pad;
                                if (ix < 0 || ix >= wd) continue;
                                const float gv = grow[ox];
                                if (need_dw) wacc += static_cast<double>(gv) * irow[ix];
                                if (need_dx) dxrow[ix] += gv * wv;
                            }
                        }
                        if (need_dw) hw->grad[wbase + ky * k + kx] += static_cast<float>(wacc);
                    }
                }
            }
        }
    });
    return out;
}

// Per-channel bias over a CxHxW map.
inline Tensor add_chan_bias(Graph& g, const Tensor& x, const Tensor& b) {
    detail::require(x.rank() == 3 && b.rank() == 1 && b.dim(0) == x.dim(0),
                    "add_chan_bias: expects CxHxW + [C]");
    const int c = x.dim(0);
    const std::int64_t plane = static_cast<std::int64_t>(x.dim(1)) * x.dim(2);
    Tensor out(x.shape());
    const float* px = x.data();
    const float* pb = b.data();
    float* po = out.data();
    for (int ch = 0; ch < c; ++ch)
        for (std::int64_t i = 0; i < plane; ++i) po[ch * plane + i] = px[ch * plane + i] + pb[ch];
    auto hx = x.handle(), hb = b.handle(), ho = out.handle();
    detail::finish_op(g, "add_chan_bias", {&x, &b}, out, [hx, hb, ho, c, plane] {
        if (ho->grad.empty()) return;
        hx->ensure_grad();
        hb->ensure_grad();
        const float* go = ho->grad.data();
        float* gx = hx->grad.data();
        float* gb = hb->grad.data();
        for (int ch = 0; ch < c; ++ch) {
            double acc = 0.0;
            for (std::int64_t i = 0; i < plane; ++i) {
                gx[ch * plane + i] += go[ch * plane + i];
                acc += go[ch * plane + i];
            }
            gb[ch] += static_cast<float>(acc);
        }
    });
    return out;
}

// Nearest-neighbour 2x upsampling of a CxHxW map.
inline Tensor upsample2x(Graph& g, const Tensor& x) {
    detail::require(x.rank() == 3, "upsample2x: rank-3 expected");
    const int c = x.dim(0), h = x.dim(1), w = x.dim(2);
    Tensor out(Shape{c, 2 * h, 2 * w});
    const float* px = x.data();
    float* po = out.data();
    for (int ch = 0; ch < c; ++ch)
        for (int y = 0; y < 2 * h; ++y)
            for (int xx = 0; xx < 2 * w; ++xx)
                po[(ch * 2 * h + y) * 2 * w + xx] = px[(ch * h + y / 2) * w + xx / 2];
    auto hx = x.handle(), ho = out.handle();
    detail::finish_op(g, "upsample2x", {&x}, out, [hx, ho, c, h, w] {
        if (ho->grad.empty()) return;
        hx->ensure_grad();
        const float* go = ho->grad.data();
        float* gx = hx->grad.data();
        for (int ch = 0; ch < c; ++ch)
            for (int y = 0; y < 2 * h; ++y)
                for (int xx = 0; xx < 2 * w; ++xx)
                    gx[(ch * h + y / 2) * w + xx / 2] += go[(ch * 2 * h + y) * 2 * w + xx];
    });
    return out;
}

// Channel-wise mean and max at every spatial position: CxHxW -> 2xHxW.
// Max ties resolve to the lowest channel index.
inline Tensor channel_mean_max(Graph& g, const Tensor& x) {
    detail::require(x.rank() == 3, "channel_mean_max: rank-3 expected");
    const int c = x.dim(0), h = x.dim(1), w = x.dim(2);
    const int hw = h * w;
    Tensor out(Shape{2, h, w});
    std::vector<int> argmax(static_cast<std::size_t>(hw));
    const float* px = x.data();
    float* po = out.data();
    for (int p = 0; p < hw; ++p) {
        double m = 0.0;
        float best = px[p];
        int besti = 0;
        for (int ch = 0; ch < c; ++ch) {
            const float v = px[ch * hw + p];
            m += v;
            if (v > best) { best = v; besti = ch; }
        }
        po[p] = static_cast<float>(m / c);
        po[hw + p] = best;
        argmax[static_cast<std::size_t>(p)] = besti;
    }
    auto hx = x.handle(), ho = out.handle();
    auto am = std::make_shared<std::vector<int>>(std::move(argmax));
    detail::finish_op(g, "channel_mean_max", {&x}, out, [hx, ho, am, c, hw] {
        if (ho->grad.empty()) return;
        hx->ensure_grad();
        const float* go = ho->grad.data();
        float* gx = hx->grad.data();
        const float invc = 1.0f / static_cast<float>(c);
        for (int p = 0; p < hw; ++p) {
            const float gm = go[p] * invc;
            for (int ch = 0; ch < c; ++ch) gx[ch * hw + p] += gm;
            gx[(*am)[static_cast<std::size_t>(p)] * hw + p] += go[hw + p];
        }
    });
    return out;
}

// Multiply a CxHxW map by a 1xHxW gate.
inline Tensor mul_gate_hw(Graph& g, const Tensor& x, const Tensor& gate) {
    detail::require(x.rank() == 3 && gate.rank() == 3 && gate.dim(0) == 1 &&
                    gate.dim(1) == x.dim(1) && gate.dim(2) == x.dim(2),
                    "mul_gate_hw: gate must be 1xHxW matching x");
    const int c = x.dim(0);
    const int hw = x.dim(1) * x.dim(2);
    Tensor out(x.shape());
    const float* px = x.data();
    const float* pg = gate.data();
    float* po = out.data();
    for (int ch = 0; ch < c; ++ch)
        for (int p = 0; p < hw; ++p) po[ch * hw + p] = px[ch * hw + p] * pg[p];
    auto hx = x.handle(), hg = gate.handle(), ho = out.handle();
    detail::finish_op(g, "mul_gate_hw", {&x, &gate}, out, [hx, hg, ho, c, hw] {
        if (ho->grad.empty()) return;
        hx->ensure_grad();
        hg->ensure_grad();
        const float* go = ho->grad.data();
        const float* px = hx->value.data();
        const float* pg = hg->value.data();
        float* gx = hx->grad.data();
        float* gg = hg->grad.data();
        for (int ch = 0; ch < c; ++ch)
            for (int p = 0; p < hw; ++p) {
                gx[ch * hw + p] += go[ch * hw + p] * pg[p];
                gg[p] += go[ch * hw + p] * px[ch * hw + p];
            }
    });
    return out;
}

// ---------------------------------------------------------------------------
// Multi-head scaled dot-product attention core.
// out = concat_h softmax(q_h k_h^T / sqrt(dk)) v_h  (no output projection)
// ---------------------------------------------------------------------------

inline Tensor mha_core(Graph& g, const Tensor& q, const Tensor& k, const Tensor& v, int heads) {
    detail::require(q.rank() == 2 && k.rank() == 2 && v.rank() == 2, "mha_core: rank-2 expected");
    const int c = q.dim(1);
    detail::require(k.dim(1) == c && v.dim(1) == c, "mha_core: widths must agree");
    detail::require(k.dim(0) == v.dim(0), "mha_core: key/value counts must agree");
    if (heads <= 0 || c % heads != 0)
        throw ConfigError("mha_core: width " + std::to_string(c) +
                          " not divisible by heads " + std::to_string(heads));
    const int nq = q.dim(0), nk = k.dim(0), dk = c / heads;
    const float scale = 1.0f / std::sqrt(static_cast<float>(dk));
    Tensor out(Shape{nq, c});
    // attention weights saved per head for backward
    auto weights = std::make_shared<std::vector<float>>(
        static_cast<std::size_t>(heads) * nq * nk);
    const float* pq = q.data();
    const float* pk = k.data();
    const float* pv = v.data();
    float* po = out.data();
    std::vector<float> row(static_cast<std::size_t>(nk));
    for (int hd = 0; hd < heads; ++hd) {
        const int off = hd * dk;
        float* wh = weights->data() + static_cast<std::size_t>(hd) * nq * nk;
        for (int i = 0; i < nq; ++i) {
            const float* qi = pq + static_cast<std::size_t>(i) * c + off;
            float mx = -std::numeric_limits<float>::infinity();
            for (int j = 0; j < nk; ++j) {
                const float* kj = pk + static_cast<std::size_t>(j) * c + off;
                float acc = 0.0f;
                for (int d = 0; d < dk; ++d) acc += qi[d] * kj[d];
                row[static_cast<std::size_t>(j)] = acc * scale;
                mx = std::max(mx, row[static_cast<std::size_t>(j)]);
            }
            double denom = 0.0;
            for (int j = 0; j < nk; ++j) {
                row[static_cast<std::size_t>(j)] = std::exp(row[static_cast<std::size_t>(j)] - mx);
                denom += static_cast<double>(row[static_cast<std::size_t>(j)]);
            }
            const float inv = static_cast<float>(1.0 / denom);
            float* orow = po + static_cast<std::size_t>(i) * c + off;
            for (int d = 0; d < dk; ++d) orow[d] = 0.0f;
            float* wrow = wh + static_cast<std::size_t>(i) * nk;
            for (int j = 0; j < nk; ++j) {
                const float wv = row[static_cast<std::size_t>(j)] * inv;
                wrow[j] = wv;
                const float* vj = pv + static_cast<std::size_t>(j) * c + off;
                for (int d = 0; d < dk; ++d) orow[d] += wv * vj[d];
            }
        }
    }
    auto hq = q.handle(), hk = k.handle(), hv = v.handle(), ho = out.handle();
    detail::finish_op(g, "mha_core", {&q, &k, &v}, out,
                      [hq, hk, hv, ho, weights, heads, nq, nk, dk, c, scale] {
        if (ho->grad.empty()) return;
        hq->ensure_grad();
        hk->ensure_grad();
        hv->ensure_grad();
        const float* go = ho->grad.data();
        const float* pq = hq->value.data();
        const float* pk = hk->value.data();
        const float* pv = hv->value.data();
        float* gq = hq->grad.data();
        float* gk = hk->grad.data();
        float* gv = hv->grad.data();
        std::vector<float> dw(static_cast<std::size_t>(nk));
        for (int hd = 0; hd < heads; ++hd) {
            const int off = hd * dk;
            const float* wh = weights->data() + static_cast<std::size_t>(hd) * nq * nk;
            for (int i = 0; i < nq; ++i) {
                const float* grow = go + static_cast<std::size_t>(i) * c + off;
                const float* wrow = wh + static_cast<std::size_t>(i) * nk;
                // dV and dW
                double wdot = 0.0;
                for (int j = 0; j < nk; ++j) {
                    const float* vj = pv + static_cast<std::size_t>(j) * c + off;
                    float* gvj = gv + static_cast<std::size_t>(j) * c + off;
                    float acc = 0.0f;
                    for (int d = 0; d < dk; ++d) {
                        acc += grow[d] * vj[d];
                        gvj[d] += wrow[j] * grow[d];
                    }
                    dw[static_cast<std::size_t>(j)] = acc;
                    wdot += static_cast<double>(acc) * wrow[j];
                }
                // softmax backward, then into q and k
                const float* qi = pq + static_cast<std::size_t>(i) * c + off;
                float* gqi = gq + static_cast<std::size_t>(i) * c + off;
                const float wdotf = static_cast<float>(wdot);
                for (int j = 0; j < nk; ++j) {
                    const float ds = wrow[j] * (dw[static_cast<std::size_t>(j)] - wdotf) * scale;
                    if (ds == 0.0f) continue;
                    const float* kj = pk + static_cast<std::size_t>(j) * c + off;
                    float* gkj = gk + static_cast<std::size_t>(j) * c + off;
                    for (int d = 0; d < dk; ++d) {
                        gqi[d] += ds * kj[d];
                        gkj[d] += ds * qi[d];
                    }
                }
            }
        }
    });
    return out;
}

// Attention with the output projection folded in (the usual mode).
inline Tensor cross_attention(Graph& g, const Tensor& q, const Tensor& k, const Tensor& v,
                              int heads, const Tensor& wo) {
    Tensor core = mha_core(g, q, k, v, heads);
    return matmul(g, core, wo);
}

// Diagnostic mode: no output projection. With heads=1 each output row is a
// convex combination of value rows.
inline Tensor cross_attention(Graph& g, const Tensor& q, const Tensor& k, const Tensor& v,
                              int heads) {
    return mha_core(g, q, k, v, heads);
}

// ---------------------------------------------------------------------------
// Geometry head derivation: geo[:,0] = sem[:,0] (free logit),
// geo[:,1] = logsumexp(sem[:,1:]) (occupied evidence).
// ---------------------------------------------------------------------------

inline Tensor geo_from_sem(Graph& g, const Tensor& sem) {
    detail::require(sem.rank() == 2 && sem.dim(1) >= 2, "geo_from_sem: Nx(S+1) expected");
    const int n = sem.dim(0), k = sem.dim(1);
    Tensor out(Shape{n, 2});
    const float* ps = sem.data();
    float* po = out.data();
    for (int i = 0; i < n; ++i) {
        const float* row = ps + static_cast<std::size_t>(i) * k;
        po[i * 2] = row[0];
        float mx = row[1];
        for (int j = 2; j < k; ++j) mx = std::max(mx, row[j]);
        double acc = 0.0;
        for (int j = 1; j < k; ++j) acc += std::exp(static_cast<double>(row[j]) - mx);
        po[i * 2 + 1] = mx + static_cast<float>(std::log(acc));
    }
    auto hs = sem.handle(), ho = out.handle();
    detail::finish_op(g, "geo_from_sem", {&sem}, out, [hs, ho, n, k] {
        if (ho->grad.empty()) return;
        hs->ensure_grad();
        const float* go = ho->grad.data();
        const float* ps = hs->value.data();
        float* gs = hs->grad.data();
        for (int i = 0; i < n; ++i) {
            const float* row = ps + static_cast<std::size_t>(i) * k;
            float* grow = gs + static_cast<std::size_t>(i) * k;
            grow[0] += go[i * 2];
            const float gocc = go[i * 2 + 1];
            if (gocc != 0.0f) {
                float mx = row[1];
                for (int j = 2; j < k; ++j) mx = std::max(mx, row[j]);
                double denom = 0.0;
                for (int j = 1; j < k; ++j) denom += std::exp(static_cast<double>(row[j]) - mx);
                for (int j = 1; j < k; ++j)
                    grow[j] += gocc * static_cast<float>(std::exp(static_cast<double>(row[j]) - mx) / denom);
            }
        }
    });
    return out;
}

// ---------------------------------------------------------------------------
// finite_diff_check: central differences against analytic gradients.
//
// f re-runs the forward pass and returns the scalar loss; it must be
// deterministic. Differences are formed in float64. Coordinates within
// 2*eps of a caller-declared kink of the per-coordinate input are skipped
// and reported as excluded.
// ---------------------------------------------------------------------------

struct FiniteDiffReport {
    double max_rel_err = 0.0;
    std::int64_t checked = 0;
    std::int64_t excluded = 0;
    bool pass(double tol) const { return checked > 0 ? max_rel_err < tol : true; }
};

struct FiniteDiffOptions {
    double eps = 1e-3;
    // kinks: per-parameter-value predicate; coordinates where the input sits
    // within 2*eps of a non-smooth point are excluded from the check
    std::function<bool(float)> near_kink;
    // check only the n coordinates with the largest analytic |grad| when > 0
    std::int64_t top_coords = 0;
};

inline FiniteDiffReport finite_diff_check(const std::function<double()>& f,
                                          const std::vector<Tensor>& params,
                                          const std::vector<std::vector<float>>& analytic,
                                          const FiniteDiffOptions& opt = {}) {
    if (params.size() != analytic.size())
        throw UsageError("finite_diff_check: params/gradients size mismatch");
    FiniteDiffReport rep;
    struct Coord { std::size_t pi; std::int64_t ci; double ag; };
    std::vector<Coord> coords;
    for (std::size_t pi = 0; pi < params.size(); ++pi) {
        const Tensor& p = params[pi];
        if (static_cast<std::int64_t>(analytic[pi].size()) != p.numel())
            throw UsageError("finite_diff_check: gradient size mismatch");
        for (std::int64_t ci = 0; ci < p.numel(); ++ci)
            coords.push_back({pi, ci, static_cast<double>(analytic[pi][static_cast<std::size_t>(ci)])});
    }
    if (opt.top_coords > 0 && static_cast<std::int64_t>(coords.size()) > opt.top_coords) {
        std::stable_sort(coords.begin(), coords.end(),
                         [](const Coord& a, const Coord& b) { return std::abs(a.ag) > std::abs(b.ag); });
        coords.resize(static_cast<std::size_t>(opt.top_coords));
    }
    for (const Coord& co : coords) {
        Tensor p = params[co.pi];
        float* slot = p.data() + co.ci;
        const float orig = *slot;
        if (opt.near_kink && opt.near_kink(orig)) {
            ++rep.excluded;
            continue;
        }
        const double eps = opt.eps;
        *slot = static_cast<float>(orig + eps);
        const double fp = f();
        *slot = static_cast<float>(orig - eps);
        const double fm = f();
        *slot = orig;
        const double fd = (fp - fm) / (2.0 * eps);
        const double denom = std::max({std::abs(fd), std::abs(co.ag), 1e-6});
        const double rel = std::abs(fd - co.ag) / denom;
        rep.max_rel_err = std::max(rep.max_rel_err, rel);
        ++rep.checked;
    }
    return rep;
}

} // namespace reo
