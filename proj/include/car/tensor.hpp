#pragma once

// Dense double tensors with tape-based reverse-mode differentiation.
//
// A Tensor is a value type: copies share the underlying buffers. A Tape
// records one computation graph; ops append nodes in topological order and
// backward() replays them once in reverse. Tensors with requires_grad become
// leaves the first time an op consumes them, and their grad buffers receive
// the accumulated gradient when the backward pass flushes. Ops whose inputs
// are all constants record nothing, so the same functions double as the
// forward-only path.
//
// One tape belongs to one logical thread; independent tapes may run
// concurrently.

#include <array>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <utility>
#include <vector>

#include <Eigen/Core>

#include "car/common.hpp"

namespace car {

using Shape = std::vector<int>;

inline int64_t shape_numel(const Shape& s) {
    int64_t n = 1;
    for (int e : s) {
        if (e <= 0) throw ShapeError(detail::concat("non-positive extent ", e, " in shape"));
        n *= e;
    }
    return n;
}

class Tape;

struct Tensor {
    Shape shape;
    std::shared_ptr<std::vector<double>> data;
    std::shared_ptr<std::vector<double>> grad;  // allocated iff requires_grad
    bool requires_grad = false;
    int node = -1;        // id on `owner`, -1 when off-tape
    Tape* owner = nullptr;

    Tensor() = default;

    static Tensor zeros(Shape s) {
        Tensor t;
        int64_t n = shape_numel(s);
        t.shape = std::move(s);
        t.data = std::make_shared<std::vector<double>>(n, 0.0);
        return t;
    }

    static Tensor full(Shape s, double v) {
        Tensor t = zeros(std::move(s));
        std::fill(t.data->begin(), t.data->end(), v);
        return t;
    }

    static Tensor from(Shape s, std::vector<double> values) {
        if (static_cast<int64_t>(values.size()) != shape_numel(s))
            throw ShapeError(detail::concat("value count ", values.size(),
                                            " does not match shape numel ", shape_numel(s)));
        Tensor t;
        t.shape = std::move(s);
        t.data = std::make_shared<std::vector<double>>(std::move(values));
        return t;
    }

    static Tensor scalar(double v) { return from({}, {v}); }

    int64_t numel() const { return data ? static_cast<int64_t>(data->size()) : 0; }
    int rank() const { return static_cast<int>(shape.size()); }

    int extent(int axis) const {
        if (axis < 0 || axis >= rank())
            throw ShapeError(detail::concat("axis ", axis, " out of range for rank ", rank()));
        return shape[axis];
    }

    double value() const {
        if (numel() != 1) throw ShapeError("value() requires a single-element tensor");
        return (*data)[0];
    }

    Tensor& set_requires_grad(bool flag = true) {
        requires_grad = flag;
        if (flag && !grad) grad = std::make_shared<std::vector<double>>(numel(), 0.0);
        if (!flag) grad.reset();
        return *this;
    }

    void zero_grad() {
        if (grad) std::fill(grad->begin(), grad->end(), 0.0);
    }

    // Same buffers, no tape linkage, no gradient tracking.
    Tensor detach() const {
        Tensor t;
        t.shape = shape;
        t.data = data;
        return t;
    }
};

// Reshape shares data and, because gradients are stored flat, the tape node.
inline Tensor reshape(const Tensor& t, Shape s) {
    if (shape_numel(s) != t.numel())
        throw ShapeError(detail::concat("cannot reshape ", t.numel(), " elements to ",
                                        shape_numel(s)));
    Tensor out = t;
    out.shape = std::move(s);
    return out;
}

class Tape {
public:
    using BackwardFn = std::function<void(const std::vector<double>& out_grad, Tape& tape)>;

    // Register t as an input of the op being recorded. Returns the node id to
    // pull gradients from, or -1 if t is a constant.
    int use(const Tensor& t) {
        if (t.node >= 0) {
            if (t.owner != this) throw Error("tensor belongs to a different tape");
            return t.node;
        }
        if (!t.requires_grad) return -1;
        Node leaf;
        leaf.size = t.numel();
        leaf.sink = t.grad;
        nodes_.push_back(std::move(leaf));
        return static_cast<int>(nodes_.size()) - 1;
    }

    // Record the op that produced `out`. Call only when at least one input is
    // differentiable.
    void record(Tensor& out, BackwardFn backward) {
        Node n;
        n.size = out.numel();
        n.backward = std::move(backward);
        nodes_.push_back(std::move(n));
        out.node = static_cast<int>(nodes_.size()) - 1;
        out.owner = this;
    }

    // Gradient accumulation buffer of a node, zero-initialized on first touch.
    std::vector<double>& grad_buf(int node) {
        auto& g = grads_[node];
        if (g.empty()) g.assign(nodes_[node].size, 0.0);
        return g;
    }

    // Reverse sweep from a scalar loss. Each node is visited exactly once;
    // leaf gradients are added into the tensors' grad buffers.
    void backward(const Tensor& loss) {
        backward_no_flush(loss);
        flush_leaf_grads();
    }

    // As backward(), but keeps leaf gradients on the tape so the caller can
    // take_leaf_grads() and reduce them in a fixed order elsewhere.
    void backward_no_flush(const Tensor& loss) {
        if (loss.numel() != 1 || loss.rank() != 0)
            throw ShapeError("backward requires a rank-0 loss");
        if (loss.node < 0 || loss.owner != this)
            throw Error("loss is not recorded on this tape");
        for (const double v : *loss.data)
            if (!std::isfinite(v)) throw NumericError("backward on non-finite loss");
        grads_.assign(nodes_.size(), {});
        grads_[loss.node] = {1.0};
        for (int i = loss.node; i >= 0; --i) {
            if (grads_[i].empty()) continue;  // not an ancestor of the loss
            if (nodes_[i].backward) nodes_[i].backward(grads_[i], *this);
        }
    }

    void flush_leaf_grads() {
        for (size_t i = 0; i < nodes_.size(); ++i) {
            if (!nodes_[i].sink || grads_[i].empty()) continue;
            auto& dst = *nodes_[i].sink;
            const auto& src = grads_[i];
            for (size_t k = 0; k < src.size(); ++k) dst[k] += src[k];
        }
        grads_.clear();
    }

    // Move out (sink, gradient) pairs after backward_no_flush. The tape can
    // be destroyed afterwards; the caller owns the accumulation order.
    std::vector<std::pair<std::shared_ptr<std::vector<double>>, std::vector<double>>>
    take_leaf_grads() {
        std::vector<std::pair<std::shared_ptr<std::vector<double>>, std::vector<double>>> out;
        for (size_t i = 0; i < nodes_.size(); ++i) {
            if (!nodes_[i].sink || grads_[i].empty()) continue;
            out.emplace_back(nodes_[i].sink, std::move(grads_[i]));
        }
        grads_.clear();
        return out;
    }

    size_t size() const { return nodes_.size(); }

    void clear() {
        nodes_.clear();
        grads_.clear();
    }

private:
    struct Node {
        int64_t size = 0;
        BackwardFn backward;                        // null for leaves
        std::shared_ptr<std::vector<double>> sink;  // leaves only
    };

    std::vector<Node> nodes_;
    std::vector<std::vector<double>> grads_;
};

namespace detail {

inline void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape != b.shape) {
        std::string sa, sb;
        for (int e : a.shape) sa += std::to_string(e) + ",";
        for (int e : b.shape) sb += std::to_string(e) + ",";
        throw ShapeError(concat(op, ": shape mismatch [", sa, "] vs [", sb, "]"));
    }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise and reduction ops
// ---------------------------------------------------------------------------

inline Tensor add(Tape& tp, const Tensor& a, const Tensor& b) {
    detail::check_same_shape(a, b, "add");
    Tensor out = Tensor::zeros(a.shape);
    const auto& av = *a.data;
    const auto& bv = *b.data;
    auto& ov = *out.data;
    for (size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] + bv[i];
    int ia = tp.use(a), ib = tp.use(b);
    if (ia >= 0 || ib >= 0) {
        tp.record(out, [ia, ib](const std::vector<double>& g, Tape& t) {
            if (ia >= 0) {
                auto& ga = t.grad_buf(ia);
                for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
            }
            if (ib >= 0) {
                auto& gb = t.grad_buf(ib);
                for (size_t i = 0; i < g.size(); ++i) gb[i] += g[i];
            }
        });
    }
    return out;
}

inline Tensor sub(Tape& tp, const Tensor& a, const Tensor& b) {
    detail::check_same_shape(a, b, "sub");
    Tensor out = Tensor::zeros(a.shape);
    const auto& av = *a.data;
    const auto& bv = *b.data;
    auto& ov = *out.data;
    for (size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] - bv[i];
    int ia = tp.use(a), ib = tp.use(b);
    if (ia >= 0 || ib >= 0) {
        tp.record(out, [ia, ib](const std::vector<double>& g, Tape& t) {
            if (ia >= 0) {
                auto& ga = t.grad_buf(ia);
                for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
            }
            if (ib >= 0) {
                auto& gb = t.grad_buf(ib);
                for (size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
            }
        });
    }
    return out;
}

inline Tensor mul(Tape& tp, const Tensor& a, const Tensor& b) {
    detail::check_same_shape(a, b, "mul");
    Tensor out = Tensor::zeros(a.shape);
    const auto& av = *a.data;
    const auto& bv = *b.data;
    auto& ov = *out.data;
    for (size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] * bv[i];
    int ia = tp.use(a), ib = tp.use(b);
    if (ia >= 0 || ib >= 0) {
        auto ad = a.data, bd = b.data;
        tp.record(out, [ia, ib, ad, bd](const std::vector<double>& g, Tape& t) {
            if (ia >= 0) {
                auto& ga = t.grad_buf(ia);
                for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * (*bd)[i];
            }
            if (ib >= 0) {
                auto& gb = t.grad_buf(ib);
                for (size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * (*ad)[i];
            }
        });
    }
    return out;
}

inline Tensor div(Tape& tp, const Tensor& a, const Tensor& b) {
    detail::check_same_shape(a, b, "div");
    Tensor out = Tensor::zeros(a.shape);
    const auto& av = *a.data;
    const auto& bv = *b.data;
    auto& ov = *out.data;
    for (size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] / bv[i];
    int ia = tp.use(a), ib = tp.use(b);
    if (ia >= 0 || ib >= 0) {
        auto ad = a.data, bd = b.data;
        tp.record(out, [ia, ib, ad, bd](const std::vector<double>& g, Tape& t) {
            if (ia >= 0) {
                auto& ga = t.grad_buf(ia);
                for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i] / (*bd)[i];
            }
            if (ib >= 0) {
                auto& gb = t.grad_buf(ib);
                for (size_t i = 0; i < g.size(); ++i)
                    gb[i] -= g[i] * (*ad)[i] / ((*bd)[i] * (*bd)[i]);
            }
        });
    }
    return out;
}

inline Tensor square(Tape& tp, const Tensor& x) {
    Tensor out = Tensor::zeros(x.shape);
    const auto& xv = *x.data;
    auto& ov = *out.data;
    for (size_t i = 0; i < ov.size(); ++i) ov[i] = xv[i] * xv[i];
    int ix = tp.use(x);
    if (ix >= 0) {
        auto xd = x.data;
        tp.record(out, [ix, xd](const std::vector<double>& g, Tape& t) {
            auto& gx = t.grad_buf(ix);
            for (size_t i = 0; i < g.size(); ++i) gx[i] += 2.0 * g[i] * (*xd)[i];
        });
    }
    return out;
}

inline Tensor add_scalar(Tape& tp, const Tensor& x, double c) {
    Tensor out = Tensor::zeros(x.shape);
    const auto& xv = *x.data;
    auto& ov = *out.data;
    for (size_t i = 0; i < ov.size(); ++i) ov[i] = xv[i] + c;
    int ix = tp.use(x);
    if (ix >= 0) {
        tp.record(out, [ix](const std::vector<double>& g, Tape& t) {
            auto& gx = t.grad_buf(ix);
            for (size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
        });
    }
    return out;
}

inline Tensor mul_scalar(Tape& tp, const Tensor& x, double c) {
    Tensor out = Tensor::zeros(x.shape);
    const auto& xv = *x.data;
    auto& ov = *out.data;
    for (size_t i = 0; i < ov.size(); ++i) ov[i] = xv[i] * c;
    int ix = tp.use(x);
    if (ix >= 0) {
        tp.record(out, [ix, c](const std::vector<double>& g, Tape& t) {
            auto& gx = t.grad_buf(ix);
            for (size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * c;
        });
    }
    return out;
}

inline Tensor reduce_sum(Tape& tp, const Tensor& x) {
    double s = 0.0;
    for (double v : *x.data) s += v;
    Tensor out = Tensor::scalar(s);
    int ix = tp.use(x);
    if (ix >= 0) {
        int64_t n = x.numel();
        tp.record(out, [ix, n](const std::vector<double>& g, Tape& t) {
            auto& gx = t.grad_buf(ix);
            for (int64_t i = 0; i < n; ++i) gx[i] += g[0];
        });
    }
    return out;
}

inline Tensor reduce_mean(Tape& tp, const Tensor& x) {
    int64_t n = x.numel();
    if (n == 0) throw ShapeError("reduce_mean on empty tensor");
    double s = 0.0;
    for (double v : *x.data) s += v;
    Tensor out = Tensor::scalar(s / static_cast<double>(n));
    int ix = tp.use(x);
    if (ix >= 0) {
        tp.record(out, [ix, n](const std::vector<double>& g, Tape& t) {
            auto& gx = t.grad_buf(ix);
            double w = g[0] / static_cast<double>(n);
            for (int64_t i = 0; i < n; ++i) gx[i] += w;
        });
    }
    return out;
}

// max(x, slope*x); the subgradient at exactly 0 uses the positive branch.
inline Tensor leaky_relu(Tape& tp, const Tensor& x, double slope) {
    if (!(slope > 0.0 && slope < 1.0))
        throw Error(detail::concat("leaky_relu slope must be in (0,1), got ", slope));
    Tensor out = Tensor::zeros(x.shape);
    const auto& xv = *x.data;
    auto& ov = *out.data;
    for (size_t i = 0; i < ov.size(); ++i) ov[i] = xv[i] >= 0.0 ? xv[i] : slope * xv[i];
    int ix = tp.use(x);
    if (ix >= 0) {
        auto xd = x.data;
        tp.record(out, [ix, xd, slope](const std::vector<double>& g, Tape& t) {
            auto& gx = t.grad_buf(ix);
            for (size_t i = 0; i < g.size(); ++i)
                gx[i] += g[i] * ((*xd)[i] >= 0.0 ? 1.0 : slope);
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Convolution (cross-correlation, zero padding) via im2col + GEMM
// ---------------------------------------------------------------------------

namespace detail {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

// col(oh*Wo+ow, ci*kh*kw + r*kw + c) = in[ci][oh*s+r-p][ow*s+c-p], zero outside.
inline void im2col(const double* in, int C, int H, int W, int kh, int kw, int stride,
                   int pad, int Ho, int Wo, double* col) {
    const int kk = kh * kw;
    for (int oh = 0; oh < Ho; ++oh) {
        for (int ow = 0; ow < Wo; ++ow) {
            double* row = col + (static_cast<int64_t>(oh) * Wo + ow) * C * kk;
            for (int ci = 0; ci < C; ++ci) {
                const double* plane = in + static_cast<int64_t>(ci) * H * W;
                for (int r = 0; r < kh; ++r) {
                    int ir = oh * stride + r - pad;
                    for (int c = 0; c < kw; ++c) {
                        int ic = ow * stride + c - pad;
                        row[ci * kk + r * kw + c] =
                            (ir >= 0 && ir < H && ic >= 0 && ic < W)
                                ? plane[static_cast<int64_t>(ir) * W + ic]
                                : 0.0;
                    }
                }
            }
        }
    }
}

// Transpose of im2col: scatter-add col-layout gradients back onto the image.
inline void col2im_add(const double* col, int C, int H, int W, int kh, int kw, int stride,
                       int pad, int Ho, int Wo, double* in_grad) {
    const int kk = kh * kw;
    for (int oh = 0; oh < Ho; ++oh) {
        for (int ow = 0; ow < Wo; ++ow) {
            const double* row = col + (static_cast<int64_t>(oh) * Wo + ow) * C * kk;
            for (int ci = 0; ci < C; ++ci) {
                double* plane = in_grad + static_cast<int64_t>(ci) * H * W;
                for (int r = 0; r < kh; ++r) {
                    int ir = oh * stride + r - pad;
                    if (ir < 0 || ir >= H) continue;
                    for (int c = 0; c < kw; ++c) {
                        int ic = ow * stride + c - pad;
                        if (ic < 0 || ic >= W) continue;
                        plane[static_cast<int64_t>(ir) * W + ic] += row[ci * kk + r * kw + c];
                    }
                }
            }
        }
    }
}

}  // namespace detail

// input [N,Cin,H,W] (cross-correlated) with kernel [Cout,Cin,kh,kw].
// Output extents follow the usual floor convention
// Ho = (H + 2*pad - kh)/stride + 1.
inline Tensor conv2d(Tape& tp, const Tensor& input, const Tensor& kernel, int stride,
                     int padding, const Tensor* bias = nullptr) {
    if (input.rank() != 4)
        throw ShapeError(detail::concat("conv2d input must be rank 4, got rank ", input.rank()));
    if (kernel.rank() != 4)
        throw ShapeError(detail::concat("conv2d kernel must be rank 4, got rank ", kernel.rank()));
    const int N = input.shape[0], Cin = input.shape[1], H = input.shape[2], W = input.shape[3];
    const int Cout = kernel.shape[0], kh = kernel.shape[2], kw = kernel.shape[3];
    if (kernel.shape[1] != Cin)
        throw ShapeError(detail::concat("conv2d channel mismatch: input Cin=", Cin,
                                        ", kernel Cin=", kernel.shape[1]));
    if (kh % 2 == 0 || kw % 2 == 0)
        throw ShapeError(detail::concat("conv2d kernel extents must be odd, got ", kh, "x", kw));
    if (stride < 1) throw ShapeError("conv2d stride must be positive");
    if (padding < 0) throw ShapeError("conv2d padding must be non-negative");
    if (bias) {
        if (bias->rank() != 1 || bias->shape[0] != Cout)
            throw ShapeError(detail::concat("conv2d bias must have shape [", Cout, "]"));
    }
    const int Ho = (H + 2 * padding - kh) / stride + 1;
    const int Wo = (W + 2 * padding - kw) / stride + 1;
    if (H + 2 * padding < kh || W + 2 * padding < kw)
        throw ShapeError(detail::concat("conv2d kernel ", kh, "x", kw,
                                        " larger than padded input ", H + 2 * padding, "x",
                                        W + 2 * padding));

    const int64_t ckk = static_cast<int64_t>(Cin) * kh * kw;
    const int64_t hw_out = static_cast<int64_t>(Ho) * Wo;

    Tensor out = Tensor::zeros({N, Cout, Ho, Wo});
    // One shared col buffer per sample, kept for the backward GEMMs.
    auto cols = std::make_shared<std::vector<std::vector<double>>>(N);

    Eigen::Map<const detail::RowMat> K(kernel.data->data(), Cout, ckk);
    for (int n = 0; n < N; ++n) {
        auto& col = (*cols)[n];
        col.resize(hw_out * ckk);
        detail::im2col(input.data->data() + static_cast<int64_t>(n) * Cin * H * W, Cin, H, W,
                       kh, kw, stride, padding, Ho, Wo, col.data());
        Eigen::Map<const detail::RowMat> C(col.data(), hw_out, ckk);
        Eigen::Map<detail::RowMat> O(out.data->data() + static_cast<int64_t>(n) * Cout * hw_out,
                                     Cout, hw_out);
        O.noalias() = K * C.transpose();
        if (bias) {
            const auto& bv = *bias->data;
            for (int co = 0; co < Cout; ++co) {
                double b = bv[co];
                double* dst = out.data->data() +
                              (static_cast<int64_t>(n) * Cout + co) * hw_out;
                for (int64_t i = 0; i < hw_out; ++i) dst[i] += b;
            }
        }
    }

    int iin = tp.use(input);
    int ik = tp.use(kernel);
    int ib = bias ? tp.use(*bias) : -1;
    if (iin >= 0 || ik >= 0 || ib >= 0) {
        auto kd = kernel.data;
        tp.record(out, [=, in_shape = input.shape](const std::vector<double>& g, Tape& t) {
            Eigen::Map<const detail::RowMat> Km(kd->data(), Cout, ckk);
            for (int n = 0; n < N; ++n) {
                Eigen::Map<const detail::RowMat> G(
                    g.data() + static_cast<int64_t>(n) * Cout * hw_out, Cout, hw_out);
                Eigen::Map<const detail::RowMat> C((*cols)[n].data(), hw_out, ckk);
                if (ik >= 0) {
                    Eigen::Map<detail::RowMat> GK(t.grad_buf(ik).data(), Cout, ckk);
                    GK.noalias() += G * C;
                }
                if (iin >= 0) {
                    std::vector<double> gcol(hw_out * ckk);
                    Eigen::Map<detail::RowMat> GC(gcol.data(), hw_out, ckk);
                    GC.noalias() = G.transpose() * Km;
                    detail::col2im_add(gcol.data(), Cin, H, W, kh, kw, stride, padding, Ho, Wo,
                                       t.grad_buf(iin).data() +
                                           static_cast<int64_t>(n) * Cin * H * W);
                }
                if (ib >= 0) {
                    auto& gb = t.grad_buf(ib);
                    for (int co = 0; co < Cout; ++co) gb[co] += G.row(co).sum();
                }
            }
        });
    }
    return out;
}

// Stride-2 convolution that halves both spatial extents (even extents only).
inline Tensor downsample_stride2(Tape& tp, const Tensor& x, const Tensor& kernel) {
    if (x.rank() != 4) throw ShapeError("downsample_stride2 input must be rank 4");
    const int H = x.shape[2], W = x.shape[3];
    if (H % 2 != 0 || W % 2 != 0)
        throw ShapeError(detail::concat("downsample_stride2 requires even extents, got ", H, "x", W));
    const int kh = kernel.extent(2);
    return conv2d(tp, x, kernel, 2, (kh - 1) / 2);
}

// Each pixel replicated into a 2x2 block; backward sums block gradients.
inline Tensor upsample_nearest2(Tape& tp, const Tensor& x) {
    if (x.rank() != 4) throw ShapeError("upsample_nearest2 input must be rank 4");
    const int N = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3];
    Tensor out = Tensor::zeros({N, C, 2 * H, 2 * W});
    const auto& xv = *x.data;
    auto& ov = *out.data;
    const int64_t Wo = 2 * W;
    for (int64_t nc = 0; nc < static_cast<int64_t>(N) * C; ++nc) {
        const double* src = xv.data() + nc * H * W;
        double* dst = ov.data() + nc * 4 * H * W;
        for (int r = 0; r < H; ++r) {
            for (int c = 0; c < W; ++c) {
                double v = src[r * W + c];
                double* d = dst + 2 * r * Wo + 2 * c;
                d[0] = v;
                d[1] = v;
                d[Wo] = v;
                d[Wo + 1] = v;
            }
        }
    }
    int ix = tp.use(x);
    if (ix >= 0) {
        tp.record(out, [ix, N, C, H, W, Wo](const std::vector<double>& g, Tape& t) {
            auto& gx = t.grad_buf(ix);
            for (int64_t nc = 0; nc < static_cast<int64_t>(N) * C; ++nc) {
                const double* gs = g.data() + nc * 4 * H * W;
                double* gd = gx.data() + nc * H * W;
                for (int r = 0; r < H; ++r) {
                    for (int c = 0; c < W; ++c) {
                        const double* s = gs + 2 * r * Wo + 2 * c;
                        gd[r * W + c] += s[0] + s[1] + s[Wo] + s[Wo + 1];
                    }
                }
            }
        });
    }
    return out;
}

// Concatenate along the channel axis; first Ca channels come from a.
inline Tensor concat_channels(Tape& tp, const Tensor& a, const Tensor& b) {
    if (a.rank() != 4 || b.rank() != 4) throw ShapeError("concat_channels inputs must be rank 4");
    if (a.shape[0] != b.shape[0] || a.shape[2] != b.shape[2] || a.shape[3] != b.shape[3])
        throw ShapeError(detail::concat("concat_channels spatial/batch mismatch: [", a.shape[0],
                                        ",*,", a.shape[2], ",", a.shape[3], "] vs [", b.shape[0],
                                        ",*,", b.shape[2], ",", b.shape[3], "]"));
    const int N = a.shape[0], Ca = a.shape[1], Cb = b.shape[1];
    const int64_t hw = static_cast<int64_t>(a.shape[2]) * a.shape[3];
    Tensor out = Tensor::zeros({N, Ca + Cb, a.shape[2], a.shape[3]});
    for (int n = 0; n < N; ++n) {
        std::copy_n(a.data->data() + n * Ca * hw, Ca * hw,
                    out.data->data() + static_cast<int64_t>(n) * (Ca + Cb) * hw);
        std::copy_n(b.data->data() + n * Cb * hw, Cb * hw,
                    out.data->data() + static_cast<int64_t>(n) * (Ca + Cb) * hw + Ca * hw);
    }
    int ia = tp.use(a), ib = tp.use(b);
    if (ia >= 0 || ib >= 0) {
        tp.record(out, [ia, ib, N, Ca, Cb, hw](const std::vector<double>& g, Tape& t) {
            for (int n = 0; n < N; ++n) {
                const double* gn = g.data() + static_cast<int64_t>(n) * (Ca + Cb) * hw;
                if (ia >= 0) {
                    auto& ga = t.grad_buf(ia);
                    double* d = ga.data() + n * Ca * hw;
                    for (int64_t i = 0; i < Ca * hw; ++i) d[i] += gn[i];
                }
                if (ib >= 0) {
                    auto& gb = t.grad_buf(ib);
                    double* d = gb.data() + n * Cb * hw;
                    for (int64_t i = 0; i < Cb * hw; ++i) d[i] += gn[Ca * hw + i];
                }
            }
        });
    }
    return out;
}

// Sum over an odd square window centered at each pixel, indices clamped to
// the border (each window always holds window^2 samples).
inline Tensor box_sum(Tape& tp, const Tensor& x, int window) {
    if (x.rank() != 2) throw ShapeError("box_sum input must be rank 2");
    const int H = x.shape[0], W = x.shape[1];
    if (window % 2 == 0) throw ShapeError(detail::concat("box_sum window must be odd, got ", window));
    if (window > H || window > W)
        throw ShapeError(detail::concat("box_sum window ", window, " exceeds extents ", H, "x", W));
    const int rad = window / 2;
    Tensor out = Tensor::zeros(x.shape);
    const auto& xv = *x.data;
    auto& ov = *out.data;
    for (int r = 0; r < H; ++r) {
        for (int c = 0; c < W; ++c) {
            double s = 0.0;
            for (int dr = -rad; dr <= rad; ++dr) {
                int rr = std::clamp(r + dr, 0, H - 1);
                for (int dc = -rad; dc <= rad; ++dc) {
                    int cc = std::clamp(c + dc, 0, W - 1);
                    s += xv[static_cast<int64_t>(rr) * W + cc];
                }
            }
            ov[static_cast<int64_t>(r) * W + c] = s;
        }
    }
    int ix = tp.use(x);
    if (ix >= 0) {
        tp.record(out, [ix, H, W, rad](const std::vector<double>& g, Tape& t) {
            auto& gx = t.grad_buf(ix);
            for (int r = 0; r < H; ++r) {
                for (int c = 0; c < W; ++c) {
                    double gv = g[static_cast<int64_t>(r) * W + c];
                    for (int dr = -rad; dr <= rad; ++dr) {
                        int rr = std::clamp(r + dr, 0, H - 1);
                        for (int dc = -rad; dc <= rad; ++dc) {
                            int cc = std::clamp(c + dc, 0, W - 1);
                            gx[static_cast<int64_t>(rr) * W + cc] += gv;
                        }
                    }
                }
            }
        });
    }
    return out;
}

}  // namespace car
