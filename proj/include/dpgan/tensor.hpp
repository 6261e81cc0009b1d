#pragma once

#include <algorithm>
#include <array>
#include <atomic>
#if defined(__AVX2__) && defined(__FMA__)
#include <immintrin.h>
#endif
#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <numeric>
#include <string>
#include <utility>
#include <vector>

#include "dpgan/common.hpp"

namespace dpgan {

// Rank-4 (N, C, H, W) shape. Convolution kernels reuse the same rank as
// (Cout, Cin, kh, kw).
struct Shape {
    int n = 0, c = 0, h = 0, w = 0;

    std::int64_t numel() const {
        return static_cast<std::int64_t>(n) * c * h * w;
    }
    bool operator==(const Shape&) const = default;

    std::string str() const {
        return "(" + std::to_string(n) + "," + std::to_string(c) + "," +
               std::to_string(h) + "," + std::to_string(w) + ")";
    }
};

class Tape;

// Dense 64-bit tensor with value semantics. A tensor produced by a recorded
// operation carries the tape pointer and its node id; a default-linked tensor
// (node < 0) is a constant and gradients do not flow into it.
struct Tensor {
    Shape shape{};
    std::vector<double> data;
    Tape* tape = nullptr;
    int node = -1;

    Tensor() = default;
    Tensor(Shape s, std::vector<double> d) : shape(s), data(std::move(d)) {
        check(static_cast<std::int64_t>(data.size()) == shape.numel(),
              "tensor data length does not match shape " + shape.str());
    }

    static Tensor full(Shape s, double v) {
        return Tensor(s, std::vector<double>(static_cast<size_t>(s.numel()), v));
    }
    static Tensor zeros(Shape s) { return full(s, 0.0); }

    bool recorded() const { return node >= 0 && tape != nullptr; }

    // Drops the tape link; the values become a constant for later ops.
    Tensor detach() const { return Tensor(shape, data); }

    double& at(int n_, int c_, int h_, int w_) {
        return data[static_cast<size_t>(((static_cast<std::int64_t>(n_) * shape.c + c_) * shape.h + h_) * shape.w + w_)];
    }
    double at(int n_, int c_, int h_, int w_) const {
        return data[static_cast<size_t>(((static_cast<std::int64_t>(n_) * shape.c + c_) * shape.h + h_) * shape.w + w_)];
    }

    double scalar() const {
        check(shape.numel() == 1, "scalar() on non-scalar tensor " + shape.str());
        return data[0];
    }
};

enum class OpKind {
    Leaf,
    Add,
    Sub,
    Mul,
    Affine,
    Concat,
    Slice,
    Conv2d,
    AdaptiveAvgPool,
    Upsample,
    LeakyRelu,
    Tanh,
    SoftmaxChannels,
    InstanceNorm,
    Mean,
    Sum,
    L1Distance,
};

// Reverse-mode tape. Records one node per executed operation, in execution
// order, so every node's inputs have smaller ids. backward() walks the records
// in reverse once and accumulates leaf gradients; repeated backward calls
// accumulate until zero_grad().
class Tape {
public:
    struct In {
        int node = -1;          // < 0: constant input, values inlined below
        Shape shape{};
        std::vector<double> cval;
    };

    struct Node {
        OpKind kind = OpKind::Leaf;
        Shape shape{};
        std::vector<double> value;  // forward output, saved for backward
        std::vector<double> grad;   // empty until backward touches it
        std::vector<In> ins;
        std::array<std::int64_t, 4> ia{};
        std::array<double, 2> da{};
    };

    Tape() : serial_(next_serial_.fetch_add(1, std::memory_order_relaxed)) {}
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    std::uint64_t serial() const { return serial_; }
    size_t size() const { return nodes_.size(); }
    const Node& node(int id) const { return nodes_[static_cast<size_t>(id)]; }

    // A leaf holds externally supplied values (inputs, parameters). With
    // requires_grad the leaf is recorded and its gradient can be queried;
    // otherwise the values are returned as a plain constant.
    Tensor leaf(const Tensor& value, bool requires_grad = true) {
        if (!requires_grad) return value.detach();
        Node nd;
        nd.kind = OpKind::Leaf;
        nd.shape = value.shape;
        nd.value = value.data;
        nodes_.push_back(std::move(nd));
        Tensor out(value.shape, value.data);
        out.tape = this;
        out.node = static_cast<int>(nodes_.size()) - 1;
        return out;
    }

    int record(OpKind kind, Shape shape, const std::vector<double>& value,
               std::initializer_list<const Tensor*> inputs,
               std::array<std::int64_t, 4> ia = {}, std::array<double, 2> da = {}) {
        Node nd;
        nd.kind = kind;
        nd.shape = shape;
        nd.value = value;
        nd.ia = ia;
        nd.da = da;
        nd.ins.reserve(inputs.size());
        for (const Tensor* t : inputs) {
            In in;
            in.shape = t->shape;
            if (t->recorded() && t->tape == this) {
                in.node = t->node;
            } else {
                in.cval = t->data;
            }
            nd.ins.push_back(std::move(in));
        }
        nodes_.push_back(std::move(nd));
        return static_cast<int>(nodes_.size()) - 1;
    }

    // For ops with a runtime-sized input list (concat).
    int record_node(Node&& nd) {
        nodes_.push_back(std::move(nd));
        return static_cast<int>(nodes_.size()) - 1;
    }

    // Gradient of the last backward passes w.r.t. a recorded tensor
    // (zeros if it was never reached).
    std::vector<double> grad(const Tensor& t) const {
        check(t.recorded() && t.tape == this, "grad() of a tensor not recorded on this tape");
        const auto& g = nodes_[static_cast<size_t>(t.node)].grad;
        if (g.empty()) return std::vector<double>(static_cast<size_t>(t.shape.numel()), 0.0);
        return g;
    }

    std::vector<double> grad_node(int id) const {
        check(id >= 0 && id < static_cast<int>(nodes_.size()), "grad_node: bad node id");
        const auto& nd = nodes_[static_cast<size_t>(id)];
        if (nd.grad.empty()) return std::vector<double>(static_cast<size_t>(nd.shape.numel()), 0.0);
        return nd.grad;
    }

    void zero_grad() {
        for (auto& nd : nodes_) nd.grad.clear();
    }

    void backward(const Tensor& loss) {
        check(loss.recorded() && loss.tape == this, "backward: loss is not recorded on this tape");
        check(loss.shape.numel() == 1, "backward: loss must be scalar, got " + loss.shape.str());
        std::vector<std::vector<double>> pass(nodes_.size());
        pass[static_cast<size_t>(loss.node)].assign(1, 1.0);
        for (int i = loss.node; i >= 0; --i) {
            if (pass[static_cast<size_t>(i)].empty()) continue;
            backward_node(i, pass);
        }
        for (size_t i = 0; i < nodes_.size(); ++i) {
            if (pass[i].empty()) continue;
            auto& g = nodes_[i].grad;
            if (g.empty()) g.assign(static_cast<size_t>(nodes_[i].shape.numel()), 0.0);
            const auto& p = pass[i];
            for (size_t k = 0; k < p.size(); ++k) g[k] += p[k];
        }
    }

private:
    const double* in_values(const In& in) const {
        return in.node >= 0 ? nodes_[static_cast<size_t>(in.node)].value.data() : in.cval.data();
    }

    static std::vector<double>& ensure(std::vector<std::vector<double>>& pass, const In& in,
                                       std::vector<double>& scratch) {
        // Constant inputs get a throwaway buffer so rules can write uniformly.
        if (in.node < 0) {
            scratch.assign(static_cast<size_t>(in.shape.numel()), 0.0);
            return scratch;
        }
        auto& g = pass[static_cast<size_t>(in.node)];
        if (g.empty()) g.assign(static_cast<size_t>(in.shape.numel()), 0.0);
        return g;
    }

    void backward_node(int id, std::vector<std::vector<double>>& pass);

    std::vector<Node> nodes_;
    std::uint64_t serial_;
    static inline std::atomic<std::uint64_t> next_serial_{1};
};

namespace detail {

// Reduction kernels for the conv backward. Strict FP semantics stop the
// autovectorizer from packing reductions, so these carry their own SIMD
// path; the lane-combination order is fixed, which keeps results
// bit-deterministic across runs (they may differ from the scalar order,
// which is fine - nothing promises a particular summation order).
#if defined(__AVX2__) && defined(__FMA__)
inline double dot_unrolled(const double* a, const double* b, std::int64_t n) {
    __m256d v0 = _mm256_setzero_pd(), v1 = _mm256_setzero_pd();
    __m256d v2 = _mm256_setzero_pd(), v3 = _mm256_setzero_pd();
    std::int64_t i = 0;
    for (; i + 16 <= n; i += 16) {
        v0 = _mm256_fmadd_pd(_mm256_loadu_pd(a + i), _mm256_loadu_pd(b + i), v0);
        v1 = _mm256_fmadd_pd(_mm256_loadu_pd(a + i + 4), _mm256_loadu_pd(b + i + 4), v1);
        v2 = _mm256_fmadd_pd(_mm256_loadu_pd(a + i + 8), _mm256_loadu_pd(b + i + 8), v2);
        v3 = _mm256_fmadd_pd(_mm256_loadu_pd(a + i + 12), _mm256_loadu_pd(b + i + 12), v3);
    }
    for (; i + 4 <= n; i += 4)
        v0 = _mm256_fmadd_pd(_mm256_loadu_pd(a + i), _mm256_loadu_pd(b + i), v0);
    alignas(32) double lanes[4];
    _mm256_store_pd(lanes, _mm256_add_pd(_mm256_add_pd(v0, v1), _mm256_add_pd(v2, v3)));
    double acc = (lanes[0] + lanes[1]) + (lanes[2] + lanes[3]);
    for (; i < n; ++i) acc += a[i] * b[i];
    return acc;
}

inline double sum_unrolled(const double* a, std::int64_t n) {
    __m256d v0 = _mm256_setzero_pd(), v1 = _mm256_setzero_pd();
    std::int64_t i = 0;
    for (; i + 8 <= n; i += 8) {
        v0 = _mm256_add_pd(v0, _mm256_loadu_pd(a + i));
        v1 = _mm256_add_pd(v1, _mm256_loadu_pd(a + i + 4));
    }
    alignas(32) double lanes[4];
    _mm256_store_pd(lanes, _mm256_add_pd(v0, v1));
    double acc = (lanes[0] + lanes[1]) + (lanes[2] + lanes[3]);
    for (; i < n; ++i) acc += a[i];
    return acc;
}
#else
inline double dot_unrolled(const double* a, const double* b, std::int64_t n) {
    double a0 = 0.0, a1 = 0.0, a2 = 0.0, a3 = 0.0;
    std::int64_t i = 0;
    for (; i + 4 <= n; i += 4) {
        a0 += a[i] * b[i];
        a1 += a[i + 1] * b[i + 1];
        a2 += a[i + 2] * b[i + 2];
        a3 += a[i + 3] * b[i + 3];
    }
    for (; i < n; ++i) a0 += a[i] * b[i];
    return (a0 + a1) + (a2 + a3);
}

inline double sum_unrolled(const double* a, std::int64_t n) {
    double a0 = 0.0, a1 = 0.0, a2 = 0.0, a3 = 0.0;
    std::int64_t i = 0;
    for (; i + 4 <= n; i += 4) {
        a0 += a[i];
        a1 += a[i + 1];
        a2 += a[i + 2];
        a3 += a[i + 3];
    }
    for (; i < n; ++i) a0 += a[i];
    return (a0 + a1) + (a2 + a3);
}
#endif

inline void axpy(double* y, double a, const double* x, std::int64_t n) {
    for (std::int64_t i = 0; i < n; ++i) y[i] += a * x[i];
}

// Patch matrix for one sample: col[(ci*KH + ki)*KW + kj][oh*OW + ow] =
// x[ci][oh*s - ph + ki][ow*s - pw + kj], zero where the window leaves the
// input. Strided convs run as contiguous axpy/dot over these rows.
inline void im2col(const double* xn, int Cin, int H, int W, int KH, int KW, int stride, int pad_h,
                   int pad_w, int OH, int OW, double* col) {
    const std::int64_t P = static_cast<std::int64_t>(OH) * OW;
    std::fill_n(col, static_cast<std::int64_t>(Cin) * KH * KW * P, 0.0);
    for (int ci = 0; ci < Cin; ++ci) {
        const double* plane = xn + static_cast<std::int64_t>(ci) * H * W;
        for (int ki = 0; ki < KH; ++ki) {
            for (int kj = 0; kj < KW; ++kj) {
                double* row = col + ((static_cast<std::int64_t>(ci) * KH + ki) * KW + kj) * P;
                const int dj = kj - pad_w;
                if (dj >= W) continue;
                int ow_lo = 0, ow_hi = OW;
                if (dj < 0) ow_lo = (-dj + stride - 1) / stride;
                if (W - dj <= (OW - 1) * stride) ow_hi = (W - 1 - dj) / stride + 1;
                if (ow_hi <= ow_lo) continue;
                for (int oh = 0; oh < OH; ++oh) {
                    const int ih = oh * stride - pad_h + ki;
                    if (ih < 0 || ih >= H) continue;
                    const double* src = plane + static_cast<std::int64_t>(ih) * W + ow_lo * stride + dj;
                    double* dst = row + static_cast<std::int64_t>(oh) * OW;
                    for (int ow = ow_lo; ow < ow_hi; ++ow)
                        dst[ow] = src[static_cast<std::int64_t>(ow - ow_lo) * stride];
                }
            }
        }
    }
}

// Transpose of im2col: scatter-adds patch-row gradients back to the input.
inline void col2im_add(const double* col, int Cin, int H, int W, int KH, int KW, int stride,
                       int pad_h, int pad_w, int OH, int OW, double* dxn) {
    const std::int64_t P = static_cast<std::int64_t>(OH) * OW;
    for (int ci = 0; ci < Cin; ++ci) {
        double* plane = dxn + static_cast<std::int64_t>(ci) * H * W;
        for (int ki = 0; ki < KH; ++ki) {
            for (int kj = 0; kj < KW; ++kj) {
                const double* row = col + ((static_cast<std::int64_t>(ci) * KH + ki) * KW + kj) * P;
                const int dj = kj - pad_w;
                if (dj >= W) continue;
                int ow_lo = 0, ow_hi = OW;
                if (dj < 0) ow_lo = (-dj + stride - 1) / stride;
                if (W - dj <= (OW - 1) * stride) ow_hi = (W - 1 - dj) / stride + 1;
                if (ow_hi <= ow_lo) continue;
                for (int oh = 0; oh < OH; ++oh) {
                    const int ih = oh * stride - pad_h + ki;
                    if (ih < 0 || ih >= H) continue;
                    double* dst = plane + static_cast<std::int64_t>(ih) * W + ow_lo * stride + dj;
                    const double* src = row + static_cast<std::int64_t>(oh) * OW;
                    for (int ow = ow_lo; ow < ow_hi; ++ow)
                        dst[static_cast<std::int64_t>(ow - ow_lo) * stride] += src[ow];
                }
            }
        }
    }
}

inline Tape* common_tape(std::initializer_list<const Tensor*> ts) {
    Tape* tape = nullptr;
    for (const Tensor* t : ts) {
        if (!t->recorded()) continue;
        if (tape == nullptr) {
            tape = t->tape;
        } else {
            check(tape == t->tape, "operation mixes tensors from different tapes");
        }
    }
    return tape;
}

inline Tensor finish(OpKind kind, Shape shape, std::vector<double>&& value,
                     std::initializer_list<const Tensor*> inputs,
                     std::array<std::int64_t, 4> ia = {}, std::array<double, 2> da = {}) {
    Tape* tape = common_tape(inputs);
    Tensor out(shape, std::move(value));
    if (tape != nullptr) {
        out.node = tape->record(kind, shape, out.data, inputs, ia, da);
        out.tape = tape;
    }
    return out;
}

inline std::int64_t conv_out_extent(std::int64_t in, std::int64_t k, std::int64_t pad,
                                    std::int64_t stride, const char* axis) {
    const std::int64_t span = in + 2 * pad - k;
    check(span >= 0, std::string("conv2d: kernel exceeds padded input along ") + axis);
    check(span % stride == 0, std::string("conv2d: non-integral output size along ") + axis);
    return span / stride + 1;
}

// Adaptive pooling window [lo, hi) for output index i of t bins over extent n.
// lo = floor(i*n/t), hi = ceil((i+1)*n/t); every window is non-empty, windows
// may overlap, and t may exceed n.
inline std::pair<int, int> pool_window(int i, int n, int t) {
    const std::int64_t lo = (static_cast<std::int64_t>(i) * n) / t;
    const std::int64_t hi = (static_cast<std::int64_t>(i) + 1) * n + t - 1;
    return {static_cast<int>(lo), static_cast<int>(hi / t)};
}

// Half-pixel bilinear source position: clamped to [0, n-1], returned as
// (floor index, neighbor index, neighbor weight).
struct LerpCoord {
    int i0, i1;
    double w1;
};

inline LerpCoord lerp_coord(int out_i, int out_n, int in_n) {
    double src = (out_i + 0.5) * (static_cast<double>(in_n) / out_n) - 0.5;
    if (src < 0.0) src = 0.0;
    int i0 = static_cast<int>(src);
    if (i0 > in_n - 1) i0 = in_n - 1;
    const int i1 = std::min(i0 + 1, in_n - 1);
    return {i0, i1, src - i0};
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise ops
// ---------------------------------------------------------------------------

inline Tensor add(const Tensor& a, const Tensor& b) {
    check(a.shape == b.shape, "add: shape mismatch " + a.shape.str() + " vs " + b.shape.str());
    std::vector<double> out(a.data.size());
    for (size_t i = 0; i < out.size(); ++i) out[i] = a.data[i] + b.data[i];
    return detail::finish(OpKind::Add, a.shape, std::move(out), {&a, &b});
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
    check(a.shape == b.shape, "sub: shape mismatch " + a.shape.str() + " vs " + b.shape.str());
    std::vector<double> out(a.data.size());
    for (size_t i = 0; i < out.size(); ++i) out[i] = a.data[i] - b.data[i];
    return detail::finish(OpKind::Sub, a.shape, std::move(out), {&a, &b});
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
    check(a.shape == b.shape, "mul: shape mismatch " + a.shape.str() + " vs " + b.shape.str());
    std::vector<double> out(a.data.size());
    for (size_t i = 0; i < out.size(); ++i) out[i] = a.data[i] * b.data[i];
    return detail::finish(OpKind::Mul, a.shape, std::move(out), {&a, &b});
}

// y = a*x + b, elementwise with scalar coefficients.
inline Tensor affine(const Tensor& x, double a, double b) {
    std::vector<double> out(x.data.size());
    for (size_t i = 0; i < out.size(); ++i) out[i] = a * x.data[i] + b;
    return detail::finish(OpKind::Affine, x.shape, std::move(out), {&x}, {}, {a, b});
}

inline Tensor scale(const Tensor& x, double s) { return affine(x, s, 0.0); }

// ---------------------------------------------------------------------------
// Channel concat / slice
// ---------------------------------------------------------------------------

inline Tensor concat_channels(const std::vector<Tensor>& parts) {
    check(!parts.empty(), "concat_channels: empty part list");
    const Shape s0 = parts[0].shape;
    int ctot = 0;
    for (const Tensor& p : parts) {
        check(p.shape.n == s0.n && p.shape.h == s0.h && p.shape.w == s0.w,
              "concat_channels: parts disagree on N/H/W: " + p.shape.str() + " vs " + s0.str());
        ctot += p.shape.c;
    }
    const Shape out_shape{s0.n, ctot, s0.h, s0.w};
    std::vector<double> out(static_cast<size_t>(out_shape.numel()));
    const std::int64_t hw = static_cast<std::int64_t>(s0.h) * s0.w;
    for (int n = 0; n < s0.n; ++n) {
        std::int64_t coff = 0;
        for (const Tensor& p : parts) {
            const std::int64_t chunk = static_cast<std::int64_t>(p.shape.c) * hw;
            std::copy_n(p.data.begin() + n * chunk, chunk,
                        out.begin() + (static_cast<std::int64_t>(n) * ctot + coff) * hw);
            coff += p.shape.c;
        }
    }
    Tape* tape = nullptr;
    for (const Tensor& p : parts) {
        if (!p.recorded()) continue;
        if (tape == nullptr) tape = p.tape;
        else check(tape == p.tape, "concat_channels mixes tensors from different tapes");
    }
    Tensor result(out_shape, std::move(out));
    if (tape != nullptr) {
        std::vector<const Tensor*> ptrs;
        Tape::Node nd;  // built manually: initializer_list can't hold a runtime count
        nd.kind = OpKind::Concat;
        nd.shape = out_shape;
        nd.value = result.data;
        for (const Tensor& p : parts) {
            Tape::In in;
            in.shape = p.shape;
            if (p.recorded()) in.node = p.node;
            else in.cval = p.data;
            nd.ins.push_back(std::move(in));
        }
        result.node = tape->record_node(std::move(nd));
        result.tape = tape;
    }
    return result;
}

inline Tensor slice_channels(const Tensor& x, int c0, int count) {
    check(c0 >= 0 && count >= 1 && c0 + count <= x.shape.c,
          "slice_channels: range [" + std::to_string(c0) + "," + std::to_string(c0 + count) +
              ") outside " + x.shape.str());
    const Shape out_shape{x.shape.n, count, x.shape.h, x.shape.w};
    std::vector<double> out(static_cast<size_t>(out_shape.numel()));
    const std::int64_t hw = static_cast<std::int64_t>(x.shape.h) * x.shape.w;
    for (int n = 0; n < x.shape.n; ++n) {
        std::copy_n(x.data.begin() + (static_cast<std::int64_t>(n) * x.shape.c + c0) * hw, count * hw,
                    out.begin() + static_cast<std::int64_t>(n) * count * hw);
    }
    return detail::finish(OpKind::Slice, out_shape, std::move(out), {&x}, {c0, count});
}

// ---------------------------------------------------------------------------
// conv2d: cross-correlation with zero padding.
//   x (N, Cin, H, W), w (Cout, Cin, kh, kw), b (1, Cout, 1, 1)
// ---------------------------------------------------------------------------

inline Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b, int stride, int pad_h,
                     int pad_w) {
    check(stride >= 1 && pad_h >= 0 && pad_w >= 0, "conv2d: invalid stride/padding");
    check(x.shape.c == w.shape.c,
          "conv2d: input channels " + std::to_string(x.shape.c) + " != kernel Cin " +
              std::to_string(w.shape.c));
    check(b.shape == Shape{1, w.shape.n, 1, 1}, "conv2d: bias shape must be (1, Cout, 1, 1)");
    const int N = x.shape.n, Cin = x.shape.c, H = x.shape.h, W = x.shape.w;
    const int Cout = w.shape.n, KH = w.shape.h, KW = w.shape.w;
    const int OH = static_cast<int>(detail::conv_out_extent(H, KH, pad_h, stride, "H"));
    const int OW = static_cast<int>(detail::conv_out_extent(W, KW, pad_w, stride, "W"));
    const Shape out_shape{N, Cout, OH, OW};
    std::vector<double> out(static_cast<size_t>(out_shape.numel()));

    if (stride != 1) {
        const std::int64_t K = static_cast<std::int64_t>(Cin) * KH * KW;
        const std::int64_t P = static_cast<std::int64_t>(OH) * OW;
        std::vector<double> col(static_cast<size_t>(K * P));
        for (int n = 0; n < N; ++n) {
            detail::im2col(x.data.data() + static_cast<std::int64_t>(n) * Cin * H * W, Cin, H, W,
                           KH, KW, stride, pad_h, pad_w, OH, OW, col.data());
            for (int co = 0; co < Cout; ++co) {
                double* onc = out.data() + (static_cast<std::int64_t>(n) * Cout + co) * P;
                std::fill_n(onc, P, b.data[static_cast<size_t>(co)]);
                const double* wk = w.data.data() + static_cast<std::int64_t>(co) * K;
                for (std::int64_t k = 0; k < K; ++k)
                    detail::axpy(onc, wk[k], col.data() + k * P, P);
            }
        }
        return detail::finish(OpKind::Conv2d, out_shape, std::move(out), {&x, &w, &b},
                              {stride, pad_h, pad_w});
    }

    for (int n = 0; n < N; ++n) {
        for (int co = 0; co < Cout; ++co) {
            double* onc = out.data() + (static_cast<std::int64_t>(n) * Cout + co) * OH * OW;
            std::fill_n(onc, static_cast<std::int64_t>(OH) * OW, b.data[static_cast<size_t>(co)]);
            for (int ci = 0; ci < Cin; ++ci) {
                const double* xnc = x.data.data() + (static_cast<std::int64_t>(n) * Cin + ci) * H * W;
                const double* wk = w.data.data() + (static_cast<std::int64_t>(co) * Cin + ci) * KH * KW;
                for (int ki = 0; ki < KH; ++ki) {
                    for (int kj = 0; kj < KW; ++kj) {
                        const double wv = wk[ki * KW + kj];
                        const int dj = kj - pad_w;
                        if (dj >= W) continue;
                        int ow_lo = 0, ow_hi = OW;  // valid range: 0 <= ow*stride+dj < W
                        if (dj < 0) ow_lo = (-dj + stride - 1) / stride;
                        if (W - dj <= (OW - 1) * stride) ow_hi = (W - 1 - dj) / stride + 1;
                        if (ow_hi <= ow_lo) continue;
                        for (int oh = 0; oh < OH; ++oh) {
                            const int ih = oh * stride - pad_h + ki;
                            if (ih < 0 || ih >= H) continue;
                            const double* xrow = xnc + static_cast<std::int64_t>(ih) * W + ow_lo * stride + dj;
                            double* orow = onc + static_cast<std::int64_t>(oh) * OW;
                            if (stride == 1) {
                                for (int ow = ow_lo; ow < ow_hi; ++ow) orow[ow] += wv * xrow[ow - ow_lo];
                            } else {
                                for (int ow = ow_lo; ow < ow_hi; ++ow)
                                    orow[ow] += wv * xrow[static_cast<std::int64_t>(ow - ow_lo) * stride];
                            }
                        }
                    }
                }
            }
        }
    }
    return detail::finish(OpKind::Conv2d, out_shape, std::move(out), {&x, &w, &b},
                          {stride, pad_h, pad_w});
}

// ---------------------------------------------------------------------------
// Adaptive average pooling; targets may exceed the input extent.
// ---------------------------------------------------------------------------

inline Tensor adaptive_avg_pool2d(const Tensor& x, int th, int tw) {
    check(th >= 1 && tw >= 1, "adaptive_avg_pool2d: non-positive target size");
    const int N = x.shape.n, C = x.shape.c, H = x.shape.h, W = x.shape.w;
    const Shape out_shape{N, C, th, tw};
    std::vector<double> out(static_cast<size_t>(out_shape.numel()));
    for (std::int64_t nc = 0; nc < static_cast<std::int64_t>(N) * C; ++nc) {
        const double* xp = x.data.data() + nc * H * W;
        double* op = out.data() + nc * th * tw;
        for (int i = 0; i < th; ++i) {
            const auto [r0, r1] = detail::pool_window(i, H, th);
            for (int j = 0; j < tw; ++j) {
                const auto [c0, c1] = detail::pool_window(j, W, tw);
                double acc = 0.0;
                for (int r = r0; r < r1; ++r)
                    for (int c = c0; c < c1; ++c) acc += xp[static_cast<std::int64_t>(r) * W + c];
                op[static_cast<std::int64_t>(i) * tw + j] =
                    acc / (static_cast<double>(r1 - r0) * (c1 - c0));
            }
        }
    }
    return detail::finish(OpKind::AdaptiveAvgPool, out_shape, std::move(out), {&x}, {th, tw});
}

// ---------------------------------------------------------------------------
// Bilinear upsampling with half-pixel centers. Enlarging only; a size-1
// source axis replicates exactly and an equal-size axis is the identity.
// ---------------------------------------------------------------------------

inline Tensor upsample_bilinear(const Tensor& x, int th, int tw) {
    check(th >= x.shape.h && tw >= x.shape.w,
          "upsample_bilinear: target " + std::to_string(th) + "x" + std::to_string(tw) +
              " shrinks input " + x.shape.str());
    const int N = x.shape.n, C = x.shape.c, H = x.shape.h, W = x.shape.w;
    const Shape out_shape{N, C, th, tw};
    std::vector<double> out(static_cast<size_t>(out_shape.numel()));
    std::vector<detail::LerpCoord> ys(static_cast<size_t>(th)), xs(static_cast<size_t>(tw));
    for (int i = 0; i < th; ++i) ys[static_cast<size_t>(i)] = detail::lerp_coord(i, th, H);
    for (int j = 0; j < tw; ++j) xs[static_cast<size_t>(j)] = detail::lerp_coord(j, tw, W);
    for (std::int64_t nc = 0; nc < static_cast<std::int64_t>(N) * C; ++nc) {
        const double* xp = x.data.data() + nc * H * W;
        double* op = out.data() + nc * th * tw;
        for (int i = 0; i < th; ++i) {
            const auto& yc = ys[static_cast<size_t>(i)];
            const double* r0 = xp + static_cast<std::int64_t>(yc.i0) * W;
            const double* r1 = xp + static_cast<std::int64_t>(yc.i1) * W;
            for (int j = 0; j < tw; ++j) {
                const auto& xc = xs[static_cast<size_t>(j)];
                const double top = (1.0 - xc.w1) * r0[xc.i0] + xc.w1 * r0[xc.i1];
                const double bot = (1.0 - xc.w1) * r1[xc.i0] + xc.w1 * r1[xc.i1];
                op[static_cast<std::int64_t>(i) * tw + j] = (1.0 - yc.w1) * top + yc.w1 * bot;
            }
        }
    }
    return detail::finish(OpKind::Upsample, out_shape, std::move(out), {&x}, {th, tw});
}

// ---------------------------------------------------------------------------
// Activations and normalization
// ---------------------------------------------------------------------------

inline Tensor leaky_relu(const Tensor& x, double slope = 0.2) {
    std::vector<double> out(x.data.size());
    for (size_t i = 0; i < out.size(); ++i)
        out[i] = x.data[i] > 0.0 ? x.data[i] : slope * x.data[i];
    return detail::finish(OpKind::LeakyRelu, x.shape, std::move(out), {&x}, {}, {slope});
}

inline Tensor relu(const Tensor& x) { return leaky_relu(x, 0.0); }

inline Tensor tanh(const Tensor& x) {
    std::vector<double> out(x.data.size());
    for (size_t i = 0; i < out.size(); ++i) out[i] = std::tanh(x.data[i]);
    return detail::finish(OpKind::Tanh, x.shape, std::move(out), {&x});
}

// Softmax across C independently at each (n, h, w).
inline Tensor softmax_channels(const Tensor& x) {
    const int N = x.shape.n, C = x.shape.c, H = x.shape.h, W = x.shape.w;
    const std::int64_t hw = static_cast<std::int64_t>(H) * W;
    std::vector<double> out(x.data.size());
    for (int n = 0; n < N; ++n) {
        const double* xn = x.data.data() + static_cast<std::int64_t>(n) * C * hw;
        double* on = out.data() + static_cast<std::int64_t>(n) * C * hw;
        for (std::int64_t p = 0; p < hw; ++p) {
            double mx = xn[p];
            for (int c = 1; c < C; ++c) mx = std::max(mx, xn[c * hw + p]);
            double z = 0.0;
            for (int c = 0; c < C; ++c) {
                const double e = std::exp(xn[c * hw + p] - mx);
                on[c * hw + p] = e;
                z += e;
            }
            for (int c = 0; c < C; ++c) on[c * hw + p] /= z;
        }
    }
    return detail::finish(OpKind::SoftmaxChannels, x.shape, std::move(out), {&x});
}

// Per-(n, c) plane normalization with learned scale/shift, biased variance.
// With frozen_stats the forward is unchanged but the backward treats the
// per-plane mean/variance as constants (eval-mode Jacobian, used by the
// receptive-field probe).
inline Tensor instance_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                            double eps = 1e-5, bool frozen_stats = false) {
    const int N = x.shape.n, C = x.shape.c, H = x.shape.h, W = x.shape.w;
    check(H * W >= 1, "instance_norm: empty spatial extent");
    check(gamma.shape == Shape{1, C, 1, 1} && beta.shape == Shape{1, C, 1, 1},
          "instance_norm: scale/shift must be (1, C, 1, 1)");
    const std::int64_t m = static_cast<std::int64_t>(H) * W;
    std::vector<double> out(x.data.size());
    for (std::int64_t nc = 0; nc < static_cast<std::int64_t>(N) * C; ++nc) {
        const int c = static_cast<int>(nc % C);
        const double* xp = x.data.data() + nc * m;
        double* op = out.data() + nc * m;
        double mu = 0.0;
        for (std::int64_t i = 0; i < m; ++i) mu += xp[i];
        mu /= static_cast<double>(m);
        double var = 0.0;
        for (std::int64_t i = 0; i < m; ++i) var += (xp[i] - mu) * (xp[i] - mu);
        var /= static_cast<double>(m);
        const double inv = 1.0 / std::sqrt(var + eps);
        const double g = gamma.data[static_cast<size_t>(c)], b = beta.data[static_cast<size_t>(c)];
        for (std::int64_t i = 0; i < m; ++i) op[i] = g * (xp[i] - mu) * inv + b;
    }
    return detail::finish(OpKind::InstanceNorm, x.shape, std::move(out), {&x, &gamma, &beta},
                          {frozen_stats ? 1 : 0}, {eps});
}

// ---------------------------------------------------------------------------
// Reductions; all return a (1, 1, 1, 1) scalar tensor.
// ---------------------------------------------------------------------------

inline Tensor sum(const Tensor& x) {
    double acc = 0.0;
    for (double v : x.data) acc += v;
    return detail::finish(OpKind::Sum, Shape{1, 1, 1, 1}, {acc}, {&x});
}

inline Tensor mean(const Tensor& x) {
    double acc = 0.0;
    for (double v : x.data) acc += v;
    return detail::finish(OpKind::Mean, Shape{1, 1, 1, 1},
                          {acc / static_cast<double>(x.shape.numel())}, {&x});
}

// Sum of absolute elementwise differences.
inline Tensor l1_distance(const Tensor& a, const Tensor& b) {
    check(a.shape == b.shape,
          "l1_distance: shape mismatch " + a.shape.str() + " vs " + b.shape.str());
    double acc = 0.0;
    for (size_t i = 0; i < a.data.size(); ++i) acc += std::abs(a.data[i] - b.data[i]);
    return detail::finish(OpKind::L1Distance, Shape{1, 1, 1, 1}, {acc}, {&a, &b});
}

inline void backward(const Tensor& loss) {
    check(loss.recorded(), "backward: loss tensor is not recorded on a tape");
    loss.tape->backward(loss);
}

// ---------------------------------------------------------------------------
// Backward rules
// ---------------------------------------------------------------------------

inline void Tape::backward_node(int id, std::vector<std::vector<double>>& pass) {
    Node& nd = nodes_[static_cast<size_t>(id)];
    const std::vector<double>& g = pass[static_cast<size_t>(id)];
    std::vector<double> scratch;

    switch (nd.kind) {
        case OpKind::Leaf:
            break;
        case OpKind::Add: {
            for (int k = 0; k < 2; ++k) {
                if (nd.ins[static_cast<size_t>(k)].node < 0) continue;
                auto& gi = ensure(pass, nd.ins[static_cast<size_t>(k)], scratch);
                for (size_t i = 0; i < g.size(); ++i) gi[i] += g[i];
            }
            break;
        }
        case OpKind::Sub: {
            if (nd.ins[0].node >= 0) {
                auto& ga = ensure(pass, nd.ins[0], scratch);
                for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
            }
            if (nd.ins[1].node >= 0) {
                auto& gb = ensure(pass, nd.ins[1], scratch);
                for (size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
            }
            break;
        }
        case OpKind::Mul: {
            const double* av = in_values(nd.ins[0]);
            const double* bv = in_values(nd.ins[1]);
            if (nd.ins[0].node >= 0) {
                auto& ga = ensure(pass, nd.ins[0], scratch);
                for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bv[i];
            }
            if (nd.ins[1].node >= 0) {
                auto& gb = ensure(pass, nd.ins[1], scratch);
                for (size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * av[i];
            }
            break;
        }
        case OpKind::Affine: {
            if (nd.ins[0].node < 0) break;
            const double a = nd.da[0];
            auto& gx = ensure(pass, nd.ins[0], scratch);
            for (size_t i = 0; i < g.size(); ++i) gx[i] += a * g[i];
            break;
        }
        case OpKind::Concat: {
            const int n_batch = nd.shape.n;
            const std::int64_t hw = static_cast<std::int64_t>(nd.shape.h) * nd.shape.w;
            std::int64_t coff = 0;
            for (auto& in : nd.ins) {
                if (in.node >= 0) {
                    auto& gi = ensure(pass, in, scratch);
                    const std::int64_t chunk = static_cast<std::int64_t>(in.shape.c) * hw;
                    for (int n = 0; n < n_batch; ++n) {
                        const double* src =
                            g.data() + (static_cast<std::int64_t>(n) * nd.shape.c + coff) * hw;
                        double* dst = gi.data() + n * chunk;
                        for (std::int64_t i = 0; i < chunk; ++i) dst[i] += src[i];
                    }
                }
                coff += in.shape.c;
            }
            break;
        }
        case OpKind::Slice: {
            if (nd.ins[0].node < 0) break;
            auto& gx = ensure(pass, nd.ins[0], scratch);
            const int c0 = static_cast<int>(nd.ia[0]), count = static_cast<int>(nd.ia[1]);
            const std::int64_t hw = static_cast<std::int64_t>(nd.shape.h) * nd.shape.w;
            const int cin = nd.ins[0].shape.c;
            for (int n = 0; n < nd.shape.n; ++n) {
                const double* src = g.data() + static_cast<std::int64_t>(n) * count * hw;
                double* dst = gx.data() + (static_cast<std::int64_t>(n) * cin + c0) * hw;
                for (std::int64_t i = 0; i < count * hw; ++i) dst[i] += src[i];
            }
            break;
        }
        case OpKind::Conv2d: {
            const In& xin = nd.ins[0];
            const In& win = nd.ins[1];
            const In& bin = nd.ins[2];
            const int stride = static_cast<int>(nd.ia[0]);
            const int pad_h = static_cast<int>(nd.ia[1]), pad_w = static_cast<int>(nd.ia[2]);
            const int N = xin.shape.n, Cin = xin.shape.c, H = xin.shape.h, W = xin.shape.w;
            const int Cout = win.shape.n, KH = win.shape.h, KW = win.shape.w;
            const int OH = nd.shape.h, OW = nd.shape.w;
            const double* xv = in_values(xin);
            const double* wv = in_values(win);

            const auto col_range = [&](int dj, int& ow_lo, int& ow_hi) {
                ow_lo = 0;
                ow_hi = OW;
                if (dj >= W) {
                    ow_hi = 0;
                    return;
                }
                if (dj < 0) ow_lo = (-dj + stride - 1) / stride;
                if (W - dj <= (OW - 1) * stride) ow_hi = (W - 1 - dj) / stride + 1;
            };

            if (bin.node >= 0) {
                auto& gb = ensure(pass, bin, scratch);
                for (int n = 0; n < N; ++n)
                    for (int co = 0; co < Cout; ++co)
                        gb[static_cast<size_t>(co)] += detail::sum_unrolled(
                            g.data() + (static_cast<std::int64_t>(n) * Cout + co) * OH * OW,
                            static_cast<std::int64_t>(OH) * OW);
            }

            if (stride != 1 && (xin.node >= 0 || win.node >= 0)) {
                const std::int64_t K = static_cast<std::int64_t>(Cin) * KH * KW;
                const std::int64_t P = static_cast<std::int64_t>(OH) * OW;
                const bool need_dx = xin.node >= 0, need_dw = win.node >= 0;
                std::vector<double> s2, s3;
                auto& gx = need_dx ? ensure(pass, xin, s2) : s2;
                auto& gw = need_dw ? ensure(pass, win, s3) : s3;
                std::vector<double> col(need_dw ? static_cast<size_t>(K * P) : 0);
                std::vector<double> dcol(need_dx ? static_cast<size_t>(K * P) : 0);
                for (int n = 0; n < N; ++n) {
                    const double* gn = g.data() + static_cast<std::int64_t>(n) * Cout * P;
                    if (need_dw) {
                        detail::im2col(xv + static_cast<std::int64_t>(n) * Cin * H * W, Cin, H, W,
                                       KH, KW, stride, pad_h, pad_w, OH, OW, col.data());
                        for (int co = 0; co < Cout; ++co)
                            for (std::int64_t k = 0; k < K; ++k)
                                gw[static_cast<std::int64_t>(co) * K + k] +=
                                    detail::dot_unrolled(gn + co * P, col.data() + k * P, P);
                    }
                    if (need_dx) {
                        std::fill(dcol.begin(), dcol.end(), 0.0);
                        for (int co = 0; co < Cout; ++co)
                            for (std::int64_t k = 0; k < K; ++k)
                                detail::axpy(dcol.data() + k * P,
                                             wv[static_cast<std::int64_t>(co) * K + k], gn + co * P, P);
                        detail::col2im_add(dcol.data(), Cin, H, W, KH, KW, stride, pad_h, pad_w, OH,
                                           OW, gx.data() + static_cast<std::int64_t>(n) * Cin * H * W);
                    }
                }
                break;
            }

            if (xin.node >= 0) {
                auto& gx = ensure(pass, xin, scratch);
                for (int n = 0; n < N; ++n) {
                    for (int co = 0; co < Cout; ++co) {
                        const double* gnc =
                            g.data() + (static_cast<std::int64_t>(n) * Cout + co) * OH * OW;
                        for (int ci = 0; ci < Cin; ++ci) {
                            double* gxnc = gx.data() + (static_cast<std::int64_t>(n) * Cin + ci) * H * W;
                            const double* wk =
                                wv + (static_cast<std::int64_t>(co) * Cin + ci) * KH * KW;
                            for (int ki = 0; ki < KH; ++ki) {
                                for (int kj = 0; kj < KW; ++kj) {
                                    const double wval = wk[ki * KW + kj];
                                    const int dj = kj - pad_w;
                                    int ow_lo, ow_hi;
                                    col_range(dj, ow_lo, ow_hi);
                                    if (ow_hi <= ow_lo) continue;
                                    for (int oh = 0; oh < OH; ++oh) {
                                        const int ih = oh * stride - pad_h + ki;
                                        if (ih < 0 || ih >= H) continue;
                                        const double* grow = gnc + static_cast<std::int64_t>(oh) * OW;
                                        double* gxrow = gxnc + static_cast<std::int64_t>(ih) * W +
                                                        ow_lo * stride + dj;
                                        if (stride == 1) {
                                            for (int ow = ow_lo; ow < ow_hi; ++ow)
                                                gxrow[ow - ow_lo] += wval * grow[ow];
                                        } else {
                                            for (int ow = ow_lo; ow < ow_hi; ++ow)
                                                gxrow[static_cast<std::int64_t>(ow - ow_lo) * stride] +=
                                                    wval * grow[ow];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }

            if (win.node >= 0) {
                std::vector<double> scratch2;
                auto& gw = ensure(pass, win, scratch2);
                // Strided rows are gathered so the inner reduction always
                // runs on contiguous data. Batch-outer order keeps the g/x
                // planes of one sample cache-resident.
                std::vector<double> gathered(stride == 1 ? 0 : static_cast<size_t>(OW));
                for (int n = 0; n < N; ++n) {
                    const double* xn = xv + static_cast<std::int64_t>(n) * Cin * H * W;
                    for (int co = 0; co < Cout; ++co) {
                        const double* gnc =
                            g.data() + (static_cast<std::int64_t>(n) * Cout + co) * OH * OW;
                        for (int ci = 0; ci < Cin; ++ci) {
                            const double* xnc = xn + static_cast<std::int64_t>(ci) * H * W;
                            for (int ki = 0; ki < KH; ++ki) {
                                for (int kj = 0; kj < KW; ++kj) {
                                    const int dj = kj - pad_w;
                                    int ow_lo, ow_hi;
                                    col_range(dj, ow_lo, ow_hi);
                                    if (ow_hi <= ow_lo) continue;
                                    const std::int64_t len = ow_hi - ow_lo;
                                    double wacc = 0.0;
                                    for (int oh = 0; oh < OH; ++oh) {
                                        const int ih = oh * stride - pad_h + ki;
                                        if (ih < 0 || ih >= H) continue;
                                        const double* grow =
                                            gnc + static_cast<std::int64_t>(oh) * OW + ow_lo;
                                        const double* xrow = xnc + static_cast<std::int64_t>(ih) * W +
                                                             ow_lo * stride + dj;
                                        if (stride == 1) {
                                            wacc += detail::dot_unrolled(grow, xrow, len);
                                        } else {
                                            if (gathered.size() < static_cast<size_t>(len))
                                                gathered.resize(static_cast<size_t>(len));
                                            for (std::int64_t t = 0; t < len; ++t)
                                                gathered[static_cast<size_t>(t)] = xrow[t * stride];
                                            wacc += detail::dot_unrolled(grow, gathered.data(), len);
                                        }
                                    }
                                    gw[(static_cast<std::int64_t>(co) * Cin + ci) * KH * KW +
                                       ki * KW + kj] += wacc;
                                }
                            }
                        }
                    }
                }
            }
            break;
        }
        case OpKind::AdaptiveAvgPool: {
            if (nd.ins[0].node < 0) break;
            auto& gx = ensure(pass, nd.ins[0], scratch);
            const int H = nd.ins[0].shape.h, W = nd.ins[0].shape.w;
            const int th = static_cast<int>(nd.ia[0]), tw = static_cast<int>(nd.ia[1]);
            const std::int64_t planes = static_cast<std::int64_t>(nd.shape.n) * nd.shape.c;
            for (std::int64_t nc = 0; nc < planes; ++nc) {
                const double* gp = g.data() + nc * th * tw;
                double* gxp = gx.data() + nc * H * W;
                for (int i = 0; i < th; ++i) {
                    const auto [r0, r1] = detail::pool_window(i, H, th);
                    for (int j = 0; j < tw; ++j) {
                        const auto [c0, c1] = detail::pool_window(j, W, tw);
                        const double share = gp[static_cast<std::int64_t>(i) * tw + j] /
                                             (static_cast<double>(r1 - r0) * (c1 - c0));
                        for (int r = r0; r < r1; ++r)
                            for (int c = c0; c < c1; ++c) gxp[static_cast<std::int64_t>(r) * W + c] += share;
                    }
                }
            }
            break;
        }
        case OpKind::Upsample: {
            if (nd.ins[0].node < 0) break;
            auto& gx = ensure(pass, nd.ins[0], scratch);
            const int H = nd.ins[0].shape.h, W = nd.ins[0].shape.w;
            const int th = static_cast<int>(nd.ia[0]), tw = static_cast<int>(nd.ia[1]);
            std::vector<detail::LerpCoord> ys(static_cast<size_t>(th)), xs(static_cast<size_t>(tw));
            for (int i = 0; i < th; ++i) ys[static_cast<size_t>(i)] = detail::lerp_coord(i, th, H);
            for (int j = 0; j < tw; ++j) xs[static_cast<size_t>(j)] = detail::lerp_coord(j, tw, W);
            const std::int64_t planes = static_cast<std::int64_t>(nd.shape.n) * nd.shape.c;
            for (std::int64_t nc = 0; nc < planes; ++nc) {
                const double* gp = g.data() + nc * th * tw;
                double* gxp = gx.data() + nc * H * W;
                for (int i = 0; i < th; ++i) {
                    const auto& yc = ys[static_cast<size_t>(i)];
                    for (int j = 0; j < tw; ++j) {
                        const auto& xc = xs[static_cast<size_t>(j)];
                        const double gv = gp[static_cast<std::int64_t>(i) * tw + j];
                        gxp[static_cast<std::int64_t>(yc.i0) * W + xc.i0] += (1.0 - yc.w1) * (1.0 - xc.w1) * gv;
                        gxp[static_cast<std::int64_t>(yc.i0) * W + xc.i1] += (1.0 - yc.w1) * xc.w1 * gv;
                        gxp[static_cast<std::int64_t>(yc.i1) * W + xc.i0] += yc.w1 * (1.0 - xc.w1) * gv;
                        gxp[static_cast<std::int64_t>(yc.i1) * W + xc.i1] += yc.w1 * xc.w1 * gv;
                    }
                }
            }
            break;
        }
        case OpKind::LeakyRelu: {
            if (nd.ins[0].node < 0) break;
            auto& gx = ensure(pass, nd.ins[0], scratch);
            const double slope = nd.da[0];
            const double* xv = in_values(nd.ins[0]);
            for (size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * (xv[i] > 0.0 ? 1.0 : slope);
            break;
        }
        case OpKind::Tanh: {
            if (nd.ins[0].node < 0) break;
            auto& gx = ensure(pass, nd.ins[0], scratch);
            const double* yv = nd.value.data();
            for (size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * (1.0 - yv[i] * yv[i]);
            break;
        }
        case OpKind::SoftmaxChannels: {
            if (nd.ins[0].node < 0) break;
            auto& gx = ensure(pass, nd.ins[0], scratch);
            const int N = nd.shape.n, C = nd.shape.c;
            const std::int64_t hw = static_cast<std::int64_t>(nd.shape.h) * nd.shape.w;
            const double* yv = nd.value.data();
            for (int n = 0; n < N; ++n) {
                const std::int64_t off = static_cast<std::int64_t>(n) * C * hw;
                for (std::int64_t p = 0; p < hw; ++p) {
                    double dot = 0.0;
                    for (int c = 0; c < C; ++c) dot += g[static_cast<size_t>(off + c * hw + p)] * yv[off + c * hw + p];
                    for (int c = 0; c < C; ++c) {
                        const std::int64_t k = off + c * hw + p;
                        gx[static_cast<size_t>(k)] += yv[k] * (g[static_cast<size_t>(k)] - dot);
                    }
                }
            }
            break;
        }
        case OpKind::InstanceNorm: {
            const In& xin = nd.ins[0];
            const In& gin = nd.ins[1];
            const In& bin = nd.ins[2];
            const int N = nd.shape.n, C = nd.shape.c;
            const std::int64_t m = static_cast<std::int64_t>(nd.shape.h) * nd.shape.w;
            const double eps = nd.da[0];
            const bool frozen = nd.ia[0] != 0;
            const double* xv = in_values(xin);
            const double* gammav = in_values(gin);
            const bool need_dx = xin.node >= 0, need_dg = gin.node >= 0, need_db = bin.node >= 0;
            std::vector<double> s1, s2, s3;
            auto& gx = need_dx ? ensure(pass, xin, s1) : s1;
            auto& gg = need_dg ? ensure(pass, gin, s2) : s2;
            auto& gb = need_db ? ensure(pass, bin, s3) : s3;
            for (std::int64_t nc = 0; nc < static_cast<std::int64_t>(N) * C; ++nc) {
                const int c = static_cast<int>(nc % C);
                const double* xp = xv + nc * m;
                const double* gp = g.data() + nc * m;
                double mu = 0.0;
                for (std::int64_t i = 0; i < m; ++i) mu += xp[i];
                mu /= static_cast<double>(m);
                double var = 0.0;
                for (std::int64_t i = 0; i < m; ++i) var += (xp[i] - mu) * (xp[i] - mu);
                var /= static_cast<double>(m);
                const double inv = 1.0 / std::sqrt(var + eps);
                double gsum = 0.0, gxhat = 0.0;
                for (std::int64_t i = 0; i < m; ++i) {
                    gsum += gp[i];
                    gxhat += gp[i] * (xp[i] - mu) * inv;
                }
                if (need_db) gb[static_cast<size_t>(c)] += gsum;
                if (need_dg) gg[static_cast<size_t>(c)] += gxhat;
                if (need_dx) {
                    const double gm = frozen ? 0.0 : gsum / static_cast<double>(m);
                    const double gxm = frozen ? 0.0 : gxhat / static_cast<double>(m);
                    const double coef = gammav[c] * inv;
                    double* gxp = gx.data() + nc * m;
                    for (std::int64_t i = 0; i < m; ++i) {
                        const double xh = (xp[i] - mu) * inv;
                        gxp[i] += coef * (gp[i] - gm - xh * gxm);
                    }
                }
            }
            break;
        }
        case OpKind::Mean:
        case OpKind::Sum: {
            if (nd.ins[0].node < 0) break;
            auto& gx = ensure(pass, nd.ins[0], scratch);
            const double share =
                nd.kind == OpKind::Mean ? g[0] / static_cast<double>(gx.size()) : g[0];
            for (double& v : gx) v += share;
            break;
        }
        case OpKind::L1Distance: {
            const double* av = in_values(nd.ins[0]);
            const double* bv = in_values(nd.ins[1]);
            const std::int64_t n = nd.ins[0].shape.numel();
            const double gv = g[0];
            if (nd.ins[0].node >= 0) {
                auto& ga = ensure(pass, nd.ins[0], scratch);
                for (std::int64_t i = 0; i < n; ++i) {
                    const double d = av[i] - bv[i];
                    ga[static_cast<size_t>(i)] += gv * (d > 0.0 ? 1.0 : (d < 0.0 ? -1.0 : 0.0));
                }
            }
            if (nd.ins[1].node >= 0) {
                std::vector<double> s2;
                auto& gb = ensure(pass, nd.ins[1], s2);
                for (std::int64_t i = 0; i < n; ++i) {
                    const double d = av[i] - bv[i];
                    gb[static_cast<size_t>(i)] -= gv * (d > 0.0 ? 1.0 : (d < 0.0 ? -1.0 : 0.0));
                }
            }
            break;
        }
    }
}

}  // namespace dpgan
