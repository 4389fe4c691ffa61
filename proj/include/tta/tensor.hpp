#pragma once

// Dense tensors with reverse-mode automatic differentiation on a dynamic
// tape. Shapes are explicit, broadcasting is restricted to scalar-vs-tensor,
// and log inputs are clamped to [1e-12, inf) so no forward or backward pass
// can produce NaN from inputs in [0, 1].

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "tta/error.hpp"

namespace tta {

using Shape = std::vector<int>;

inline int64_t numel_of(const Shape& shape) {
    int64_t n = 1;
    for (int d : shape) n *= d;
    return n;
}

inline std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << "(";
    for (size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
    os << ")";
    return os.str();
}

inline constexpr double kLogEps = 1e-12;

// Per-op finite checking can be expensive in tight benchmark loops; callers
// that guard at a coarser granularity may disable it via FiniteCheckGuard.
inline thread_local bool g_finite_checks = true;

struct FiniteCheckGuard {
    bool previous;
    explicit FiniteCheckGuard(bool enabled) : previous(g_finite_checks) {
        g_finite_checks = enabled;
    }
    ~FiniteCheckGuard() { g_finite_checks = previous; }
};

template <typename S>
struct TensorNode {
    Shape shape;
    std::vector<S> values;
    std::vector<S> grad;  // empty until first accumulation
    bool requires_grad = false;

    int64_t numel() const { return static_cast<int64_t>(values.size()); }

    void ensure_grad() {
        if (grad.size() != values.size()) grad.assign(values.size(), S(0));
    }

    void zero_grad() {
        if (!grad.empty()) std::fill(grad.begin(), grad.end(), S(0));
    }
};

template <typename S>
class Tensor {
  public:
    Tensor() = default;

    static Tensor zeros(Shape shape) {
        Tensor t;
        t.node_ = std::make_shared<TensorNode<S>>();
        t.node_->shape = std::move(shape);
        t.node_->values.assign(static_cast<size_t>(numel_of(t.node_->shape)), S(0));
        return t;
    }

    static Tensor full(Shape shape, S value) {
        Tensor t = zeros(std::move(shape));
        std::fill(t.node_->values.begin(), t.node_->values.end(), value);
        return t;
    }

    static Tensor scalar(S value) { return full({1}, value); }

    static Tensor from(Shape shape, std::vector<S> values) {
        if (numel_of(shape) != static_cast<int64_t>(values.size()))
            fail(ErrorCode::shape_mismatch,
                 "tensor data size does not match shape " + shape_str(shape));
        Tensor t;
        t.node_ = std::make_shared<TensorNode<S>>();
        t.node_->shape = std::move(shape);
        t.node_->values = std::move(values);
        return t;
    }

    bool defined() const { return node_ != nullptr; }
    const Shape& shape() const { return node_->shape; }
    int64_t numel() const { return node_->numel(); }
    int dim(int i) const { return node_->shape[static_cast<size_t>(i)]; }

    std::vector<S>& values() { return node_->values; }
    const std::vector<S>& values() const { return node_->values; }
    std::vector<S>& grad() { return node_->grad; }
    const std::vector<S>& grad() const { return node_->grad; }

    S item() const {
        if (numel() != 1)
            fail(ErrorCode::shape_mismatch, "item() on non-scalar tensor");
        return node_->values[0];
    }

    bool requires_grad() const { return node_->requires_grad; }
    void set_requires_grad(bool rg) { node_->requires_grad = rg; }
    void ensure_grad() { node_->ensure_grad(); }
    void zero_grad() { node_->zero_grad(); }

    std::shared_ptr<TensorNode<S>> node() const { return node_; }

    Tensor clone_detached() const {
        Tensor t;
        t.node_ = std::make_shared<TensorNode<S>>();
        t.node_->shape = node_->shape;
        t.node_->values = node_->values;
        return t;
    }

  private:
    std::shared_ptr<TensorNode<S>> node_;
};

// ---------------------------------------------------------------------------
// Tape

template <typename S>
class Tape {
  public:
    void record(std::shared_ptr<TensorNode<S>> output, std::function<void()> backward_step) {
        entries_.push_back({std::move(output), std::move(backward_step)});
    }

    size_t size() const { return entries_.size(); }

    // Seeds d(loss)/d(loss) = 1 and replays recorded ops in reverse order.
    // Intermediate grads are reset per call so leaves accumulate exactly one
    // full pass per backward(); repeated calls without clear() therefore add.
    void backward(Tensor<S>& loss) {
        if (loss.numel() != 1)
            fail(ErrorCode::shape_mismatch, "backward requires a scalar loss");
        for (auto& e : entries_) e.output->zero_grad();
        loss.ensure_grad();
        loss.grad()[0] += S(1);
        for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) it->step();
    }

    // Drops recorded ops (and the activations they keep alive). Leaf tensors
    // and their values are untouched.
    void clear() { entries_.clear(); }

    static Tape*& active() {
        static thread_local Tape* current = nullptr;
        return current;
    }

  private:
    struct Entry {
        std::shared_ptr<TensorNode<S>> output;
        std::function<void()> step;
    };
    std::vector<Entry> entries_;
};

// RAII activation of a tape on the current thread; pass nullptr to run a
// region without recording (stop-gradient).
template <typename S>
class TapeScope {
  public:
    explicit TapeScope(Tape<S>* tape) : previous_(Tape<S>::active()) {
        Tape<S>::active() = tape;
    }
    ~TapeScope() { Tape<S>::active() = previous_; }

    TapeScope(const TapeScope&) = delete;
    TapeScope& operator=(const TapeScope&) = delete;

  private:
    Tape<S>* previous_;
};

template <typename S>
void backward(Tensor<S> loss) {
    Tape<S>* tape = Tape<S>::active();
    if (!tape) fail(ErrorCode::invalid_argument, "backward with no active tape");
    tape->backward(loss);
}

// ---------------------------------------------------------------------------
// Op plumbing

namespace detail {

// Eight independent accumulator lanes; breaks the FP latency chain and lets
// the compiler vectorize even though FP addition is not associative.
template <typename S>
inline S dot_lanes(const S* a, const S* b, int64_t n) {
    S acc[8] = {S(0), S(0), S(0), S(0), S(0), S(0), S(0), S(0)};
    int64_t i = 0;
    for (; i + 8 <= n; i += 8)
        for (int j = 0; j < 8; ++j) acc[j] += a[i + j] * b[i + j];
    S total = ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7]));
    for (; i < n; ++i) total += a[i] * b[i];
    return total;
}

template <typename S>
inline void sum_sumsq_lanes(const S* a, int64_t n, double& out_sum, double& out_sumsq) {
    double s[4] = {0, 0, 0, 0}, q[4] = {0, 0, 0, 0};
    int64_t i = 0;
    for (; i + 4 <= n; i += 4)
        for (int j = 0; j < 4; ++j) {
            const double v = static_cast<double>(a[i + j]);
            s[j] += v;
            q[j] += v * v;
        }
    double st = (s[0] + s[1]) + (s[2] + s[3]);
    double qt = (q[0] + q[1]) + (q[2] + q[3]);
    for (; i < n; ++i) {
        const double v = static_cast<double>(a[i]);
        st += v;
        qt += v * v;
    }
    out_sum = st;
    out_sumsq = qt;
}

template <typename S>
inline double sum_lanes(const S* a, int64_t n) {
    double s[4] = {0, 0, 0, 0};
    int64_t i = 0;
    for (; i + 4 <= n; i += 4)
        for (int j = 0; j < 4; ++j) s[j] += static_cast<double>(a[i + j]);
    double st = (s[0] + s[1]) + (s[2] + s[3]);
    for (; i < n; ++i) st += static_cast<double>(a[i]);
    return st;
}

// Sum trick: v * 0 is 0 for finite v and NaN for inf/NaN, so a clean pass
// accumulates exactly +/-0 in every lane.
template <typename S>
inline bool all_finite(const std::vector<S>& v) {
    S acc[8] = {S(0), S(0), S(0), S(0), S(0), S(0), S(0), S(0)};
    const S* p = v.data();
    const int64_t n = static_cast<int64_t>(v.size());
    int64_t i = 0;
    for (; i + 8 <= n; i += 8)
        for (int j = 0; j < 8; ++j) acc[j] += p[i + j] * S(0);
    S total = ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7]));
    for (; i < n; ++i) total += p[i] * S(0);
    return total == S(0);
}

template <typename S>
inline void check_output(const Tensor<S>& t, const char* op) {
    if (g_finite_checks && !all_finite(t.values()))
        fail(ErrorCode::non_finite, std::string(op) + " produced a non-finite value");
}

template <typename S>
inline bool grad_enabled(std::initializer_list<const Tensor<S>*> inputs) {
    if (!Tape<S>::active()) return false;
    for (const Tensor<S>* t : inputs)
        if ((*t).requires_grad()) return true;
    return false;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise and reduction ops

namespace detail {

enum class BinKind { add, sub, mul };

template <typename S>
Tensor<S> binary_op(BinKind kind, const Tensor<S>& a, const Tensor<S>& b, const char* name) {
    const bool a_scalar = a.numel() == 1;
    const bool b_scalar = b.numel() == 1;
    if (!a_scalar && !b_scalar && a.shape() != b.shape())
        fail(ErrorCode::shape_mismatch, std::string(name) + ": shapes " +
                                            shape_str(a.shape()) + " vs " + shape_str(b.shape()));

    const Tensor<S>& big = (!a_scalar || b_scalar) ? a : b;
    Tensor<S> out = Tensor<S>::zeros(big.shape());
    const int64_t n = out.numel();
    const S* pa = a.values().data();
    const S* pb = b.values().data();
    S* po = out.values().data();
    const int64_t sa = a_scalar ? 0 : 1;
    const int64_t sb = b_scalar ? 0 : 1;
    switch (kind) {
        case BinKind::add:
            for (int64_t i = 0; i < n; ++i) po[i] = pa[i * sa] + pb[i * sb];
            break;
        case BinKind::sub:
            for (int64_t i = 0; i < n; ++i) po[i] = pa[i * sa] - pb[i * sb];
            break;
        case BinKind::mul:
            for (int64_t i = 0; i < n; ++i) po[i] = pa[i * sa] * pb[i * sb];
            break;
    }
    check_output(out, name);

    if (grad_enabled<S>({&a, &b})) {
        out.set_requires_grad(true);
        auto an = a.node(), bn = b.node(), on = out.node();
        Tape<S>::active()->record(on, [kind, an, bn, on, n, sa, sb] {
            const S* g = on->grad.data();
            if (an->requires_grad) {
                an->ensure_grad();
                S* ga = an->grad.data();
                if (kind == BinKind::mul) {
                    const S* pb2 = bn->values.data();
                    for (int64_t i = 0; i < n; ++i) ga[i * sa] += g[i] * pb2[i * sb];
                } else {
                    for (int64_t i = 0; i < n; ++i) ga[i * sa] += g[i];
                }
            }
            if (bn->requires_grad) {
                bn->ensure_grad();
                S* gb = bn->grad.data();
                if (kind == BinKind::mul) {
                    const S* pa2 = an->values.data();
                    for (int64_t i = 0; i < n; ++i) gb[i * sb] += g[i] * pa2[i * sa];
                } else if (kind == BinKind::sub) {
                    for (int64_t i = 0; i < n; ++i) gb[i * sb] -= g[i];
                } else {
                    for (int64_t i = 0; i < n; ++i) gb[i * sb] += g[i];
                }
            }
        });
    }
    return out;
}

template <typename S, typename Fwd, typename Bwd>
Tensor<S> unary_op(const Tensor<S>& x, const char* name, Fwd fwd, Bwd bwd) {
    Tensor<S> out = Tensor<S>::zeros(x.shape());
    const int64_t n = x.numel();
    const S* px = x.values().data();
    S* po = out.values().data();
    for (int64_t i = 0; i < n; ++i) po[i] = fwd(px[i]);
    check_output(out, name);

    if (grad_enabled<S>({&x})) {
        out.set_requires_grad(true);
        auto xn = x.node(), on = out.node();
        Tape<S>::active()->record(on, [xn, on, n, bwd] {
            xn->ensure_grad();
            const S* g = on->grad.data();
            const S* xv = xn->values.data();
            const S* ov = on->values.data();
            S* gx = xn->grad.data();
            for (int64_t i = 0; i < n; ++i) gx[i] += bwd(g[i], xv[i], ov[i]);
        });
    }
    return out;
}

}  // namespace detail

template <typename S>
Tensor<S> add(const Tensor<S>& a, const Tensor<S>& b) {
    return detail::binary_op(detail::BinKind::add, a, b, "add");
}

template <typename S>
Tensor<S> sub(const Tensor<S>& a, const Tensor<S>& b) {
    return detail::binary_op(detail::BinKind::sub, a, b, "sub");
}

template <typename S>
Tensor<S> mul(const Tensor<S>& a, const Tensor<S>& b) {
    return detail::binary_op(detail::BinKind::mul, a, b, "mul");
}

template <typename S>
Tensor<S> scale(const Tensor<S>& x, S c) {
    return detail::unary_op(
        x, "scale", [c](S v) { return v * c; },
        [c](S g, S, S) { return g * c; });
}

template <typename S>
Tensor<S> relu(const Tensor<S>& x) {
    return detail::unary_op(
        x, "relu", [](S v) { return v > S(0) ? v : S(0); },
        [](S g, S v, S) { return v > S(0) ? g : S(0); });
}

template <typename S>
Tensor<S> sigmoid(const Tensor<S>& x) {
    return detail::unary_op(
        x, "sigmoid",
        [](S v) {
            if (v >= S(0)) return S(1) / (S(1) + std::exp(-v));
            S e = std::exp(v);
            return e / (S(1) + e);
        },
        [](S g, S, S o) { return g * o * (S(1) - o); });
}

template <typename S>
Tensor<S> exp(const Tensor<S>& x) {
    return detail::unary_op(
        x, "exp", [](S v) { return std::exp(v); },
        [](S g, S, S o) { return g * o; });
}

// log with the input clamped to [1e-12, inf); the gradient is the true
// derivative of the clamped function (zero below the clamp).
template <typename S>
Tensor<S> safe_log(const Tensor<S>& x) {
    const S eps = static_cast<S>(kLogEps);
    return detail::unary_op(
        x, "log", [eps](S v) { return std::log(v > eps ? v : eps); },
        [eps](S g, S v, S) { return v > eps ? g / v : S(0); });
}

template <typename S>
Tensor<S> clamp(const Tensor<S>& x, S lo, S hi) {
    if (lo > hi) fail(ErrorCode::invalid_argument, "clamp: lo > hi");
    return detail::unary_op(
        x, "clamp",
        [lo, hi](S v) { return v < lo ? lo : (v > hi ? hi : v); },
        [lo, hi](S g, S v, S) { return (v > lo && v < hi) ? g : S(0); });
}

template <typename S>
Tensor<S> sum(const Tensor<S>& x) {
    Tensor<S> out = Tensor<S>::zeros({1});
    const int64_t n = x.numel();
    const S* px = x.values().data();
    out.values()[0] = static_cast<S>(detail::sum_lanes(px, n));
    detail::check_output(out, "sum");

    if (detail::grad_enabled<S>({&x})) {
        out.set_requires_grad(true);
        auto xn = x.node(), on = out.node();
        Tape<S>::active()->record(on, [xn, on, n] {
            xn->ensure_grad();
            const S g = on->grad[0];
            S* gx = xn->grad.data();
            for (int64_t i = 0; i < n; ++i) gx[i] += g;
        });
    }
    return out;
}

template <typename S>
Tensor<S> mean(const Tensor<S>& x) {
    const int64_t n = x.numel();
    if (n == 0) fail(ErrorCode::invalid_argument, "mean of empty tensor");
    return scale(sum(x), S(1) / static_cast<S>(n));
}

template <typename S>
Tensor<S> reshape(const Tensor<S>& x, Shape shape) {
    if (numel_of(shape) != x.numel())
        fail(ErrorCode::shape_mismatch, "reshape: element count mismatch");
    Tensor<S> out = Tensor<S>::from(std::move(shape), x.values());
    if (detail::grad_enabled<S>({&x})) {
        out.set_requires_grad(true);
        auto xn = x.node(), on = out.node();
        const int64_t n = x.numel();
        Tape<S>::active()->record(on, [xn, on, n] {
            xn->ensure_grad();
            const S* g = on->grad.data();
            S* gx = xn->grad.data();
            for (int64_t i = 0; i < n; ++i) gx[i] += g[i];
        });
    }
    return out;
}

// Extracts one element as a scalar tensor.
template <typename S>
Tensor<S> take(const Tensor<S>& x, int64_t index) {
    if (index < 0 || index >= x.numel())
        fail(ErrorCode::invalid_argument, "take: index out of range");
    Tensor<S> out = Tensor<S>::scalar(x.values()[static_cast<size_t>(index)]);
    if (detail::grad_enabled<S>({&x})) {
        out.set_requires_grad(true);
        auto xn = x.node(), on = out.node();
        Tape<S>::active()->record(on, [xn, on, index] {
            xn->ensure_grad();
            xn->grad[static_cast<size_t>(index)] += on->grad[0];
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// conv2d: x NCHW, weight OIHW, bias O; cross-correlation with zero padding.

template <typename S>
Tensor<S> conv2d(const Tensor<S>& x, const Tensor<S>& weight, const Tensor<S>& bias,
                 int stride = 1, int padding = 0) {
    if (x.shape().size() != 4 || weight.shape().size() != 4 || bias.shape().size() != 1)
        fail(ErrorCode::shape_mismatch, "conv2d: expected NCHW input, OIHW weight, O bias");
    const int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    const int O = weight.dim(0), KH = weight.dim(2), KW = weight.dim(3);
    if (weight.dim(1) != C)
        fail(ErrorCode::shape_mismatch, "conv2d: channel mismatch " + shape_str(x.shape()) +
                                            " vs " + shape_str(weight.shape()));
    if (bias.dim(0) != O) fail(ErrorCode::shape_mismatch, "conv2d: bias size mismatch");
    if (stride < 1 || padding < 0) fail(ErrorCode::invalid_argument, "conv2d: bad stride/padding");
    const int OH = (H + 2 * padding - KH) / stride + 1;
    const int OW = (W + 2 * padding - KW) / stride + 1;
    if (OH < 1 || OW < 1) fail(ErrorCode::shape_mismatch, "conv2d: empty output");

    const int PH = H + 2 * padding, PW = W + 2 * padding;
    auto padded = std::make_shared<std::vector<S>>(
        static_cast<size_t>(N) * C * PH * PW, S(0));
    {
        S* pp = padded->data();
        const S* px = x.values().data();
        for (int n = 0; n < N; ++n)
            for (int c = 0; c < C; ++c)
                for (int y = 0; y < H; ++y)
                    std::copy(px + ((static_cast<int64_t>(n) * C + c) * H + y) * W,
                              px + ((static_cast<int64_t>(n) * C + c) * H + y) * W + W,
                              pp + ((static_cast<int64_t>(n) * C + c) * PH + y + padding) * PW +
                                  padding);
    }

    Tensor<S> out = Tensor<S>::zeros({N, O, OH, OW});
    {
        S* po = out.values().data();
        const S* pw = weight.values().data();
        const S* pb = bias.values().data();
        const S* pp = padded->data();
        const bool fast3x3 = KH == 3 && KW == 3 && stride == 1;
        for (int n = 0; n < N; ++n) {
            for (int o = 0; o < O; ++o) {
                S* out_plane = po + (static_cast<int64_t>(n) * O + o) * OH * OW;
                std::fill(out_plane, out_plane + static_cast<int64_t>(OH) * OW, pb[o]);
                for (int c = 0; c < C; ++c) {
                    const S* in_plane = pp + (static_cast<int64_t>(n) * C + c) * PH * PW;
                    const S* wk = pw + ((static_cast<int64_t>(o) * C + c) * KH) * KW;
                    if (fast3x3) {
                        // all nine taps fused per output row
                        const S w00 = wk[0], w01 = wk[1], w02 = wk[2];
                        const S w10 = wk[3], w11 = wk[4], w12 = wk[5];
                        const S w20 = wk[6], w21 = wk[7], w22 = wk[8];
                        for (int oy = 0; oy < OH; ++oy) {
                            const S* r0 = in_plane + (oy + 0) * PW;
                            const S* r1 = in_plane + (oy + 1) * PW;
                            const S* r2 = in_plane + (oy + 2) * PW;
                            S* dst = out_plane + oy * OW;
                            for (int ox = 0; ox < OW; ++ox) {
                                dst[ox] += w00 * r0[ox] + w01 * r0[ox + 1] + w02 * r0[ox + 2] +
                                           w10 * r1[ox] + w11 * r1[ox + 1] + w12 * r1[ox + 2] +
                                           w20 * r2[ox] + w21 * r2[ox + 1] + w22 * r2[ox + 2];
                            }
                        }
                        continue;
                    }
                    for (int kh = 0; kh < KH; ++kh) {
                        for (int kw = 0; kw < KW; ++kw) {
                            const S wv = wk[kh * KW + kw];
                            if (stride == 1) {
                                for (int oy = 0; oy < OH; ++oy) {
                                    const S* src = in_plane + (oy + kh) * PW + kw;
                                    S* dst = out_plane + oy * OW;
                                    for (int ox = 0; ox < OW; ++ox) dst[ox] += wv * src[ox];
                                }
                            } else {
                                for (int oy = 0; oy < OH; ++oy) {
                                    const S* src = in_plane + (oy * stride + kh) * PW + kw;
                                    S* dst = out_plane + oy * OW;
                                    for (int ox = 0; ox < OW; ++ox)
                                        dst[ox] += wv * src[ox * stride];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    detail::check_output(out, "conv2d");

    if (detail::grad_enabled<S>({&x, &weight, &bias})) {
        out.set_requires_grad(true);
        auto xn = x.node(), wn = weight.node(), bn = bias.node(), on = out.node();
        Tape<S>::active()->record(on, [xn, wn, bn, on, padded, N, C, H, W, O, KH, KW, OH, OW, PH, PW,
                                   stride, padding] {
            const S* g = on->grad.data();
            if (bn->requires_grad) {
                bn->ensure_grad();
                S* gb = bn->grad.data();
                for (int n = 0; n < N; ++n)
                    for (int o = 0; o < O; ++o) {
                        const S* gp = g + (static_cast<int64_t>(n) * O + o) * OH * OW;
                        gb[o] += static_cast<S>(
                            detail::sum_lanes(gp, static_cast<int64_t>(OH) * OW));
                    }
            }
            if (wn->requires_grad) {
                wn->ensure_grad();
                S* gw = wn->grad.data();
                const S* pp = padded->data();
                for (int n = 0; n < N; ++n)
                    for (int o = 0; o < O; ++o) {
                        const S* gp = g + (static_cast<int64_t>(n) * O + o) * OH * OW;
                        for (int c = 0; c < C; ++c) {
                            const S* in_plane = pp + (static_cast<int64_t>(n) * C + c) * PH * PW;
                            S* gwk = gw + ((static_cast<int64_t>(o) * C + c) * KH) * KW;
                            for (int kh = 0; kh < KH; ++kh)
                                for (int kw = 0; kw < KW; ++kw) {
                                    double acc = 0.0;
                                    for (int oy = 0; oy < OH; ++oy) {
                                        const S* src = in_plane + (oy * stride + kh) * PW + kw;
                                        const S* gr = gp + oy * OW;
                                        if (stride == 1) {
                                            acc += static_cast<double>(
                                                detail::dot_lanes(src, gr, OW));
                                        } else {
                                            double row = 0.0;
                                            for (int ox = 0; ox < OW; ++ox)
                                                row += static_cast<double>(src[ox * stride]) *
                                                       gr[ox];
                                            acc += row;
                                        }
                                    }
                                    gwk[kh * KW + kw] += static_cast<S>(acc);
                                }
                        }
                    }
            }
            if (xn->requires_grad) {
                xn->ensure_grad();
                std::vector<S> gpad(static_cast<size_t>(N) * C * PH * PW, S(0));
                const S* pw = wn->values.data();
                const bool fast3x3 = KH == 3 && KW == 3 && stride == 1;
                // flipped-kernel correlation over the doubly padded grad
                std::vector<S> gfull;
                if (fast3x3) gfull.resize(static_cast<size_t>(OH + 4) * (OW + 4));
                for (int n = 0; n < N; ++n)
                    for (int o = 0; o < O; ++o) {
                        const S* gp = g + (static_cast<int64_t>(n) * O + o) * OH * OW;
                        if (fast3x3) {
                            std::fill(gfull.begin(), gfull.end(), S(0));
                            for (int oy = 0; oy < OH; ++oy)
                                std::copy(gp + oy * OW, gp + (oy + 1) * OW,
                                          gfull.data() + (oy + 2) * (OW + 4) + 2);
                        }
                        for (int c = 0; c < C; ++c) {
                            S* gpl = gpad.data() + (static_cast<int64_t>(n) * C + c) * PH * PW;
                            const S* wk = pw + ((static_cast<int64_t>(o) * C + c) * KH) * KW;
                            if (fast3x3) {
                                const S w00 = wk[8], w01 = wk[7], w02 = wk[6];
                                const S w10 = wk[5], w11 = wk[4], w12 = wk[3];
                                const S w20 = wk[2], w21 = wk[1], w22 = wk[0];
                                const int GW = OW + 4;
                                for (int r = 0; r < PH; ++r) {
                                    const S* r0 = gfull.data() + (r + 0) * GW;
                                    const S* r1 = gfull.data() + (r + 1) * GW;
                                    const S* r2 = gfull.data() + (r + 2) * GW;
                                    S* dst = gpl + r * PW;
                                    for (int x = 0; x < PW; ++x) {
                                        dst[x] += w00 * r0[x] + w01 * r0[x + 1] +
                                                  w02 * r0[x + 2] + w10 * r1[x] +
                                                  w11 * r1[x + 1] + w12 * r1[x + 2] +
                                                  w20 * r2[x] + w21 * r2[x + 1] +
                                                  w22 * r2[x + 2];
                                    }
                                }
                                continue;
                            }
                            for (int kh = 0; kh < KH; ++kh)
                                for (int kw = 0; kw < KW; ++kw) {
                                    const S wv = wk[kh * KW + kw];
                                    for (int oy = 0; oy < OH; ++oy) {
                                        S* dst = gpl + (oy * stride + kh) * PW + kw;
                                        const S* gr = gp + oy * OW;
                                        if (stride == 1) {
                                            for (int ox = 0; ox < OW; ++ox)
                                                dst[ox] += wv * gr[ox];
                                        } else {
                                            for (int ox = 0; ox < OW; ++ox)
                                                dst[ox * stride] += wv * gr[ox];
                                        }
                                    }
                                }
                        }
                    }
                S* gx = xn->grad.data();
                for (int n = 0; n < N; ++n)
                    for (int c = 0; c < C; ++c)
                        for (int y = 0; y < H; ++y) {
                            const S* src = gpad.data() +
                                           ((static_cast<int64_t>(n) * C + c) * PH + y + padding) *
                                               PW +
                                           padding;
                            S* dst = gx + ((static_cast<int64_t>(n) * C + c) * H + y) * W;
                            for (int xw = 0; xw < W; ++xw) dst[xw] += src[xw];
                        }
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// batch_norm2d

enum class BnMode { train, eval };

// Train mode normalizes with biased per-channel statistics of the current
// input and, when update_running is set, folds them into the running buffers
// with an exponential moving average (unbiased variance for the update).
template <typename S>
Tensor<S> batch_norm2d(const Tensor<S>& x, const Tensor<S>& gamma, const Tensor<S>& beta_shift,
                       Tensor<S>& running_mean, Tensor<S>& running_var, BnMode mode,
                       S momentum = S(0.1), S eps = S(1e-5), bool update_running = false) {
    if (x.shape().size() != 4) fail(ErrorCode::shape_mismatch, "batch_norm2d: expected NCHW");
    const int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    if (gamma.numel() != C || beta_shift.numel() != C || running_mean.numel() != C ||
        running_var.numel() != C)
        fail(ErrorCode::shape_mismatch, "batch_norm2d: channel count mismatch");

    const int64_t m = static_cast<int64_t>(N) * H * W;
    std::vector<S> mu(C), invstd(C);
    const S* px = x.values().data();
    if (mode == BnMode::train) {
        for (int c = 0; c < C; ++c) {
            double s = 0.0, s2 = 0.0;
            for (int n = 0; n < N; ++n) {
                const S* plane = px + (static_cast<int64_t>(n) * C + c) * H * W;
                double ps, ps2;
                detail::sum_sumsq_lanes(plane, static_cast<int64_t>(H) * W, ps, ps2);
                s += ps;
                s2 += ps2;
            }
            const double mean_c = s / static_cast<double>(m);
            const double var_c = std::max(0.0, s2 / static_cast<double>(m) - mean_c * mean_c);
            mu[c] = static_cast<S>(mean_c);
            invstd[c] = static_cast<S>(1.0 / std::sqrt(var_c + static_cast<double>(eps)));
            if (update_running) {
                const double unbiased =
                    m > 1 ? var_c * static_cast<double>(m) / static_cast<double>(m - 1) : var_c;
                running_mean.values()[c] = static_cast<S>(
                    (1.0 - momentum) * running_mean.values()[c] + momentum * mean_c);
                running_var.values()[c] = static_cast<S>(
                    (1.0 - momentum) * running_var.values()[c] + momentum * unbiased);
            }
        }
    } else {
        for (int c = 0; c < C; ++c) {
            mu[c] = running_mean.values()[c];
            invstd[c] = static_cast<S>(
                1.0 / std::sqrt(static_cast<double>(running_var.values()[c]) +
                                static_cast<double>(eps)));
        }
    }

    Tensor<S> out = Tensor<S>::zeros(x.shape());
    {
        S* po = out.values().data();
        const S* pg = gamma.values().data();
        const S* pb = beta_shift.values().data();
        for (int n = 0; n < N; ++n)
            for (int c = 0; c < C; ++c) {
                const S* src = px + (static_cast<int64_t>(n) * C + c) * H * W;
                S* dst = po + (static_cast<int64_t>(n) * C + c) * H * W;
                const S a = pg[c] * invstd[c];
                const S b = pb[c] - a * mu[c];
                for (int64_t i = 0; i < static_cast<int64_t>(H) * W; ++i)
                    dst[i] = a * src[i] + b;
            }
    }
    detail::check_output(out, "batch_norm2d");

    if (detail::grad_enabled<S>({&x, &gamma, &beta_shift})) {
        out.set_requires_grad(true);
        auto xn = x.node(), gn = gamma.node(), bn = beta_shift.node(), on = out.node();
        const bool train = mode == BnMode::train;
        Tape<S>::active()->record(on, [xn, gn, bn, on, mu, invstd, N, C, H, W, m, train] {
            const S* g = on->grad.data();
            const S* xv = xn->values.data();
            const S* gv = gn->values.data();
            const int64_t hw = static_cast<int64_t>(H) * W;
            std::vector<double> sum_g(C, 0.0), sum_gx(C, 0.0);
            for (int n = 0; n < N; ++n)
                for (int c = 0; c < C; ++c) {
                    const S* gp = g + (static_cast<int64_t>(n) * C + c) * hw;
                    const S* xp = xv + (static_cast<int64_t>(n) * C + c) * hw;
                    const double mc = static_cast<double>(mu[c]);
                    const double is = static_cast<double>(invstd[c]);
                    double sg[4] = {0, 0, 0, 0}, sgx[4] = {0, 0, 0, 0};
                    int64_t i = 0;
                    for (; i + 4 <= hw; i += 4)
                        for (int j = 0; j < 4; ++j) {
                            const double gi = static_cast<double>(gp[i + j]);
                            sg[j] += gi;
                            sgx[j] += gi * (static_cast<double>(xp[i + j]) - mc);
                        }
                    double tg = (sg[0] + sg[1]) + (sg[2] + sg[3]);
                    double tgx = (sgx[0] + sgx[1]) + (sgx[2] + sgx[3]);
                    for (; i < hw; ++i) {
                        const double gi = static_cast<double>(gp[i]);
                        tg += gi;
                        tgx += gi * (static_cast<double>(xp[i]) - mc);
                    }
                    sum_g[c] += tg;
                    sum_gx[c] += tgx * is;
                }
            if (bn->requires_grad) {
                bn->ensure_grad();
                for (int c = 0; c < C; ++c) bn->grad[c] += static_cast<S>(sum_g[c]);
            }
            if (gn->requires_grad) {
                gn->ensure_grad();
                for (int c = 0; c < C; ++c) gn->grad[c] += static_cast<S>(sum_gx[c]);
            }
            if (xn->requires_grad) {
                xn->ensure_grad();
                S* gx = xn->grad.data();
                for (int n = 0; n < N; ++n)
                    for (int c = 0; c < C; ++c) {
                        const S* gp = g + (static_cast<int64_t>(n) * C + c) * hw;
                        const S* xp = xv + (static_cast<int64_t>(n) * C + c) * hw;
                        S* dst = gx + (static_cast<int64_t>(n) * C + c) * hw;
                        const S a = gv[c] * invstd[c];
                        if (train) {
                            const S mean_g = static_cast<S>(sum_g[c] / static_cast<double>(m));
                            const S mean_gx = static_cast<S>(sum_gx[c] / static_cast<double>(m));
                            const S mc = mu[c], is = invstd[c];
                            for (int64_t i = 0; i < hw; ++i) {
                                const S xhat = (xp[i] - mc) * is;
                                dst[i] += a * (gp[i] - mean_g - xhat * mean_gx);
                            }
                        } else {
                            for (int64_t i = 0; i < hw; ++i) dst[i] += a * gp[i];
                        }
                    }
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Spatial transforms: exact index permutations on the last two axes.
// rot90 is counter-clockwise; the weak-augmentation set contains both 90 and
// 270 so the orientation convention cannot change any loss value.

enum class SpatialTransform { identity, hflip, vflip, rot90, rot180, rot270 };

inline SpatialTransform inverse(SpatialTransform t) {
    switch (t) {
        case SpatialTransform::rot90: return SpatialTransform::rot270;
        case SpatialTransform::rot270: return SpatialTransform::rot90;
        default: return t;
    }
}

inline const char* spatial_transform_name(SpatialTransform t) {
    switch (t) {
        case SpatialTransform::identity: return "identity";
        case SpatialTransform::hflip: return "hflip";
        case SpatialTransform::vflip: return "vflip";
        case SpatialTransform::rot90: return "rot90";
        case SpatialTransform::rot180: return "rot180";
        case SpatialTransform::rot270: return "rot270";
    }
    return "?";
}

namespace detail {

// Maps output coordinates to source coordinates for an H x W plane.
inline void transform_source(SpatialTransform t, int H, int W, int r, int c, int& sr, int& sc) {
    switch (t) {
        case SpatialTransform::identity: sr = r; sc = c; break;
        case SpatialTransform::hflip: sr = r; sc = W - 1 - c; break;
        case SpatialTransform::vflip: sr = H - 1 - r; sc = c; break;
        case SpatialTransform::rot90: sr = c; sc = W - 1 - r; break;
        case SpatialTransform::rot180: sr = H - 1 - r; sc = W - 1 - c; break;
        case SpatialTransform::rot270: sr = H - 1 - c; sc = r; break;
    }
}

}  // namespace detail

template <typename S>
Tensor<S> spatial_transform(const Tensor<S>& x, SpatialTransform t) {
    const auto& shape = x.shape();
    if (shape.size() < 2)
        fail(ErrorCode::shape_mismatch, "spatial_transform: rank must be >= 2");
    const int H = shape[shape.size() - 2], W = shape[shape.size() - 1];
    if ((t == SpatialTransform::rot90 || t == SpatialTransform::rot270) && H != W)
        fail(ErrorCode::shape_mismatch, "spatial_transform: rotation requires square input");
    const int64_t planes = x.numel() / (static_cast<int64_t>(H) * W);

    Tensor<S> out = Tensor<S>::zeros(shape);
    const S* px = x.values().data();
    S* po = out.values().data();
    for (int64_t p = 0; p < planes; ++p) {
        const S* src = px + p * H * W;
        S* dst = po + p * H * W;
        for (int r = 0; r < H; ++r)
            for (int c = 0; c < W; ++c) {
                int sr, sc;
                detail::transform_source(t, H, W, r, c, sr, sc);
                dst[r * W + c] = src[sr * W + sc];
            }
    }

    if (detail::grad_enabled<S>({&x})) {
        out.set_requires_grad(true);
        auto xn = x.node(), on = out.node();
        Tape<S>::active()->record(on, [xn, on, t, H, W, planes] {
            xn->ensure_grad();
            const S* g = on->grad.data();
            S* gx = xn->grad.data();
            for (int64_t p = 0; p < planes; ++p) {
                const S* gp = g + p * H * W;
                S* dst = gx + p * H * W;
                for (int r = 0; r < H; ++r)
                    for (int c = 0; c < W; ++c) {
                        int sr, sc;
                        detail::transform_source(t, H, W, r, c, sr, sc);
                        dst[sr * W + sc] += gp[r * W + c];
                    }
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// resample: block-average downsampling / nearest-neighbour upsampling.

enum class ResampleMode { down_avg, up_nearest };

template <typename S>
Tensor<S> resample(const Tensor<S>& x, ResampleMode mode, int factor) {
    if (factor < 1) fail(ErrorCode::invalid_argument, "resample: factor must be positive");
    const auto& shape = x.shape();
    if (shape.size() < 2) fail(ErrorCode::shape_mismatch, "resample: rank must be >= 2");
    const int H = shape[shape.size() - 2], W = shape[shape.size() - 1];
    const int64_t planes = x.numel() / (static_cast<int64_t>(H) * W);

    Shape out_shape = shape;
    int OH, OW;
    if (mode == ResampleMode::down_avg) {
        if (H % factor != 0 || W % factor != 0)
            fail(ErrorCode::shape_mismatch, "resample: dimensions not divisible by factor");
        OH = H / factor;
        OW = W / factor;
    } else {
        OH = H * factor;
        OW = W * factor;
    }
    out_shape[out_shape.size() - 2] = OH;
    out_shape[out_shape.size() - 1] = OW;

    Tensor<S> out = Tensor<S>::zeros(out_shape);
    const S* px = x.values().data();
    S* po = out.values().data();
    const S inv = S(1) / static_cast<S>(factor * factor);
    for (int64_t p = 0; p < planes; ++p) {
        const S* src = px + p * H * W;
        S* dst = po + p * static_cast<int64_t>(OH) * OW;
        if (mode == ResampleMode::down_avg) {
            for (int oy = 0; oy < OH; ++oy)
                for (int ox = 0; ox < OW; ++ox) {
                    double acc = 0.0;
                    for (int dy = 0; dy < factor; ++dy)
                        for (int dx = 0; dx < factor; ++dx)
                            acc += static_cast<double>(
                                src[(oy * factor + dy) * W + ox * factor + dx]);
                    dst[oy * OW + ox] = static_cast<S>(acc) * inv;
                }
        } else {
            for (int oy = 0; oy < OH; ++oy)
                for (int ox = 0; ox < OW; ++ox)
                    dst[oy * OW + ox] = src[(oy / factor) * W + ox / factor];
        }
    }

    if (detail::grad_enabled<S>({&x})) {
        out.set_requires_grad(true);
        auto xn = x.node(), on = out.node();
        Tape<S>::active()->record(on, [xn, on, mode, factor, H, W, OH, OW, planes, inv] {
            xn->ensure_grad();
            const S* g = on->grad.data();
            S* gx = xn->grad.data();
            for (int64_t p = 0; p < planes; ++p) {
                const S* gp = g + p * static_cast<int64_t>(OH) * OW;
                S* dst = gx + p * H * W;
                if (mode == ResampleMode::down_avg) {
                    for (int oy = 0; oy < OH; ++oy)
                        for (int ox = 0; ox < OW; ++ox) {
                            const S gv = gp[oy * OW + ox] * inv;
                            for (int dy = 0; dy < factor; ++dy)
                                for (int dx = 0; dx < factor; ++dx)
                                    dst[(oy * factor + dy) * W + ox * factor + dx] += gv;
                        }
                } else {
                    for (int oy = 0; oy < OH; ++oy)
                        for (int ox = 0; ox < OW; ++ox)
                            dst[(oy / factor) * W + ox / factor] += gp[oy * OW + ox];
                }
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// concat_channels, global_avg_pool, linear

template <typename S>
Tensor<S> concat_channels(const Tensor<S>& a, const Tensor<S>& b) {
    if (a.shape().size() != 4 || b.shape().size() != 4)
        fail(ErrorCode::shape_mismatch, "concat_channels: expected NCHW");
    if (a.dim(0) != b.dim(0) || a.dim(2) != b.dim(2) || a.dim(3) != b.dim(3))
        fail(ErrorCode::shape_mismatch, "concat_channels: incompatible shapes");
    const int N = a.dim(0), Ca = a.dim(1), Cb = b.dim(1), H = a.dim(2), W = a.dim(3);
    const int64_t hw = static_cast<int64_t>(H) * W;

    Tensor<S> out = Tensor<S>::zeros({N, Ca + Cb, H, W});
    S* po = out.values().data();
    const S* pa = a.values().data();
    const S* pb = b.values().data();
    for (int n = 0; n < N; ++n) {
        std::copy(pa + static_cast<int64_t>(n) * Ca * hw, pa + static_cast<int64_t>(n + 1) * Ca * hw,
                  po + static_cast<int64_t>(n) * (Ca + Cb) * hw);
        std::copy(pb + static_cast<int64_t>(n) * Cb * hw, pb + static_cast<int64_t>(n + 1) * Cb * hw,
                  po + (static_cast<int64_t>(n) * (Ca + Cb) + Ca) * hw);
    }

    if (detail::grad_enabled<S>({&a, &b})) {
        out.set_requires_grad(true);
        auto an = a.node(), bn = b.node(), on = out.node();
        Tape<S>::active()->record(on, [an, bn, on, N, Ca, Cb, hw] {
            const S* g = on->grad.data();
            if (an->requires_grad) {
                an->ensure_grad();
                S* ga = an->grad.data();
                for (int n = 0; n < N; ++n) {
                    const S* src = g + static_cast<int64_t>(n) * (Ca + Cb) * hw;
                    S* dst = ga + static_cast<int64_t>(n) * Ca * hw;
                    for (int64_t i = 0; i < Ca * hw; ++i) dst[i] += src[i];
                }
            }
            if (bn->requires_grad) {
                bn->ensure_grad();
                S* gb = bn->grad.data();
                for (int n = 0; n < N; ++n) {
                    const S* src = g + (static_cast<int64_t>(n) * (Ca + Cb) + Ca) * hw;
                    S* dst = gb + static_cast<int64_t>(n) * Cb * hw;
                    for (int64_t i = 0; i < Cb * hw; ++i) dst[i] += src[i];
                }
            }
        });
    }
    return out;
}

template <typename S>
Tensor<S> global_avg_pool(const Tensor<S>& x) {
    if (x.shape().size() != 4) fail(ErrorCode::shape_mismatch, "global_avg_pool: expected NCHW");
    const int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    const int64_t hw = static_cast<int64_t>(H) * W;

    Tensor<S> out = Tensor<S>::zeros({N, C});
    const S* px = x.values().data();
    S* po = out.values().data();
    for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c) {
            const S* src = px + (static_cast<int64_t>(n) * C + c) * hw;
            po[n * C + c] = static_cast<S>(detail::sum_lanes(src, hw) / static_cast<double>(hw));
        }

    if (detail::grad_enabled<S>({&x})) {
        out.set_requires_grad(true);
        auto xn = x.node(), on = out.node();
        Tape<S>::active()->record(on, [xn, on, N, C, hw] {
            xn->ensure_grad();
            const S* g = on->grad.data();
            S* gx = xn->grad.data();
            const S inv = S(1) / static_cast<S>(hw);
            for (int n = 0; n < N; ++n)
                for (int c = 0; c < C; ++c) {
                    const S gv = g[n * C + c] * inv;
                    S* dst = gx + (static_cast<int64_t>(n) * C + c) * hw;
                    for (int64_t i = 0; i < hw; ++i) dst[i] += gv;
                }
        });
    }
    return out;
}

// x: (N, C), weight: (K, C), bias: (K) -> (N, K)
template <typename S>
Tensor<S> linear(const Tensor<S>& x, const Tensor<S>& weight, const Tensor<S>& bias) {
    if (x.shape().size() != 2 || weight.shape().size() != 2 || bias.shape().size() != 1)
        fail(ErrorCode::shape_mismatch, "linear: expected (N,C) x (K,C) + (K)");
    const int N = x.dim(0), C = x.dim(1), K = weight.dim(0);
    if (weight.dim(1) != C || bias.dim(0) != K)
        fail(ErrorCode::shape_mismatch, "linear: dimension mismatch");

    Tensor<S> out = Tensor<S>::zeros({N, K});
    const S* px = x.values().data();
    const S* pw = weight.values().data();
    const S* pb = bias.values().data();
    S* po = out.values().data();
    for (int n = 0; n < N; ++n)
        for (int k = 0; k < K; ++k) {
            double acc = static_cast<double>(pb[k]);
            for (int c = 0; c < C; ++c)
                acc += static_cast<double>(px[n * C + c]) * pw[k * C + c];
            po[n * K + k] = static_cast<S>(acc);
        }
    detail::check_output(out, "linear");

    if (detail::grad_enabled<S>({&x, &weight, &bias})) {
        out.set_requires_grad(true);
        auto xn = x.node(), wn = weight.node(), bn = bias.node(), on = out.node();
        Tape<S>::active()->record(on, [xn, wn, bn, on, N, C, K] {
            const S* g = on->grad.data();
            if (bn->requires_grad) {
                bn->ensure_grad();
                for (int n = 0; n < N; ++n)
                    for (int k = 0; k < K; ++k) bn->grad[k] += g[n * K + k];
            }
            if (wn->requires_grad) {
                wn->ensure_grad();
                const S* xv = xn->values.data();
                for (int n = 0; n < N; ++n)
                    for (int k = 0; k < K; ++k) {
                        const S gv = g[n * K + k];
                        for (int c = 0; c < C; ++c) wn->grad[k * C + c] += gv * xv[n * C + c];
                    }
            }
            if (xn->requires_grad) {
                xn->ensure_grad();
                const S* wv = wn->values.data();
                for (int n = 0; n < N; ++n)
                    for (int k = 0; k < K; ++k) {
                        const S gv = g[n * K + k];
                        for (int c = 0; c < C; ++c) xn->grad[n * C + c] += gv * wv[k * C + c];
                    }
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// grad_check: central finite differences against the analytic gradient.
// The denominator convention is max(|analytic|, |numeric|, 1e-8).

template <typename S, typename F>
double grad_check(F f, Tensor<S> x, double step) {
    Tape<S> tape;
    std::vector<S> analytic;
    {
        TapeScope<S> scope(&tape);
        x.set_requires_grad(true);
        x.zero_grad();
        Tensor<S> loss = f(x);
        if (loss.numel() != 1) fail(ErrorCode::shape_mismatch, "grad_check: loss not scalar");
        tape.backward(loss);
        x.ensure_grad();
        analytic = x.grad();
    }
    x.set_requires_grad(false);

    double max_rel = 0.0;
    auto& vals = x.values();
    for (size_t i = 0; i < vals.size(); ++i) {
        const S keep = vals[i];
        vals[i] = keep + static_cast<S>(step);
        const double up = static_cast<double>(f(x).item());
        vals[i] = keep - static_cast<S>(step);
        const double down = static_cast<double>(f(x).item());
        vals[i] = keep;
        const double numeric = (up - down) / (2.0 * step);
        const double a = static_cast<double>(analytic[i]);
        if (!std::isfinite(numeric) || !std::isfinite(a))
            fail(ErrorCode::non_finite, "grad_check: non-finite evaluation");
        const double denom = std::max({std::fabs(a), std::fabs(numeric), 1e-8});
        max_rel = std::max(max_rel, std::fabs(a - numeric) / denom);
    }
    return max_rel;
}

}  // namespace tta
