#pragma once

// Training losses: local normalized cross-correlation similarity,
// deformation smoothness, contrast-invariance latent regularization and
// their weighted total. Everything here records on the tape and flows
// gradients; values are asserted against brute-force references in tests.

#include "car/tensor.hpp"
#include "car/warp.hpp"

namespace car {

struct LossWeights {
    double lambda1 = 0.1;  // smoothness
    double lambda2 = 0.1;  // contrast invariance

    void validate() const {
        if (lambda1 < 0.0 || lambda2 < 0.0)
            throw Error("loss weights must be non-negative");
    }
};

struct LossBreakdown {
    double sim = 0.0;       // -LNCC, as it enters the total
    double reg = 0.0;       // smoothness
    double contrast = 0.0;  // latent regularization
    double total = 0.0;
};

// Squared local normalized cross-correlation, averaged over pixels.
// Window statistics come from border-clamped box sums, so every window holds
// window^2 samples. Returns +LNCC in [0, 1+eps_tol]; callers negate.
inline Tensor lncc(Tape& tp, const Tensor& a, const Tensor& b, int window = 9,
                   double epsilon = 1e-5) {
    if (a.rank() != 2 || b.rank() != 2) throw ShapeError("lncc expects rank-2 images");
    detail::check_same_shape(a, b, "lncc");
    const double n = static_cast<double>(window) * window;

    Tensor sa = box_sum(tp, a, window);
    Tensor sb = box_sum(tp, b, window);
    Tensor sab = box_sum(tp, mul(tp, a, b), window);
    Tensor saa = box_sum(tp, square(tp, a), window);
    Tensor sbb = box_sum(tp, square(tp, b), window);

    // cross = sum (A - mean A)(B - mean B), var analogously
    Tensor cross = sub(tp, sab, mul_scalar(tp, mul(tp, sa, sb), 1.0 / n));
    Tensor var_a = sub(tp, saa, mul_scalar(tp, square(tp, sa), 1.0 / n));
    Tensor var_b = sub(tp, sbb, mul_scalar(tp, square(tp, sb), 1.0 / n));

    Tensor ratio = div(tp, square(tp, cross),
                       add_scalar(tp, mul(tp, var_a, var_b), epsilon));
    return reduce_mean(tp, ratio);
}

// Mean over channels and pixels of squared forward differences of the
// displacement in both spatial directions; the last row/column difference
// is zero. Fused op with hand-written backward.
inline Tensor smoothness(Tape& tp, const DeformationField& field) {
    const Tensor& u = field.u;
    const int C = 2, H = field.height(), W = field.width();
    const auto& uv = *u.data;
    const double norm = 1.0 / (static_cast<double>(C) * H * W);

    double acc = 0.0;
    for (int ch = 0; ch < C; ++ch) {
        const double* plane = uv.data() + static_cast<int64_t>(ch) * H * W;
        for (int r = 0; r < H; ++r) {
            for (int c = 0; c < W; ++c) {
                double v = plane[r * W + c];
                if (r + 1 < H) {
                    double d = plane[(r + 1) * W + c] - v;
                    acc += d * d;
                }
                if (c + 1 < W) {
                    double d = plane[r * W + c + 1] - v;
                    acc += d * d;
                }
            }
        }
    }
    Tensor out = Tensor::scalar(acc * norm);

    int iu = tp.use(u);
    if (iu >= 0) {
        auto ud = u.data;
        tp.record(out, [iu, ud, H, W, norm](const std::vector<double>& g, Tape& t) {
            auto& gu = t.grad_buf(iu);
            const auto& uv = *ud;
            const double w = 2.0 * norm * g[0];
            for (int ch = 0; ch < 2; ++ch) {
                const int64_t base = static_cast<int64_t>(ch) * H * W;
                for (int r = 0; r < H; ++r) {
                    for (int c = 0; c < W; ++c) {
                        double v = uv[base + r * W + c];
                        if (r + 1 < H) {
                            double d = uv[base + (r + 1) * W + c] - v;
                            gu[base + (r + 1) * W + c] += w * d;
                            gu[base + r * W + c] -= w * d;
                        }
                        if (c + 1 < W) {
                            double d = uv[base + r * W + c + 1] - v;
                            gu[base + r * W + c + 1] += w * d;
                            gu[base + r * W + c] -= w * d;
                        }
                    }
                }
            }
        });
    }
    return out;
}

// Already-projected latent features from the two augmented passes.
struct ProjectedLatents {
    Tensor moving_c1;
    Tensor moving_c2;
    Tensor fixed_c1;
    Tensor fixed_c2;
};

namespace detail {

inline Tensor as_chw(const Tensor& t, const char* op) {
    if (t.rank() == 4 && t.shape[0] == 1) return reshape(t, {t.shape[1], t.shape[2], t.shape[3]});
    if (t.rank() == 3) return t;
    throw ShapeError(concat(op, ": expected [C,Nx,Ny] or [1,C,Nx,Ny]"));
}

}  // namespace detail

// Mean over pixels of the squared channel-space distance between the paired
// projections: (1/(Nx*Ny)) * sum_ij [ ||pM1 - pM2||^2 + ||pF1 - pF2||^2 ].
inline Tensor contrast_invariance(Tape& tp, const ProjectedLatents& proj) {
    Tensor pm1 = detail::as_chw(proj.moving_c1, "contrast_invariance");
    Tensor pm2 = detail::as_chw(proj.moving_c2, "contrast_invariance");
    Tensor pf1 = detail::as_chw(proj.fixed_c1, "contrast_invariance");
    Tensor pf2 = detail::as_chw(proj.fixed_c2, "contrast_invariance");
    detail::check_same_shape(pm1, pm2, "contrast_invariance");
    detail::check_same_shape(pm1, pf1, "contrast_invariance");
    detail::check_same_shape(pf1, pf2, "contrast_invariance");

    const double pixels = static_cast<double>(pm1.shape[1]) * pm1.shape[2];
    Tensor m_term = reduce_sum(tp, square(tp, sub(tp, pm1, pm2)));
    Tensor f_term = reduce_sum(tp, square(tp, sub(tp, pf1, pf2)));
    return mul_scalar(tp, add(tp, m_term, f_term), 1.0 / pixels);
}

// Full objective: -LNCC(warp(M, phi), F) + lambda1 * smoothness
// + lambda2 * contrast. M and F are the original (pre-augmentation) images;
// phi comes from the network run on the augmented pair. Pass proj = nullptr
// to drop the contrast term (no-CLR ablation / single-pass use).
inline std::pair<Tensor, LossBreakdown> total_loss(Tape& tp, const Tensor& moving,
                                                   const Tensor& fixed,
                                                   const DeformationField& field,
                                                   const ProjectedLatents* proj,
                                                   const LossWeights& weights,
                                                   int lncc_window = 9) {
    weights.validate();
    Tensor warped = warp_image(tp, moving, field);
    Tensor sim_pos = lncc(tp, warped, fixed, lncc_window);
    Tensor reg = smoothness(tp, field);

    LossBreakdown bd;
    bd.sim = -sim_pos.value();
    bd.reg = reg.value();

    Tensor total = add(tp, mul_scalar(tp, sim_pos, -1.0), mul_scalar(tp, reg, weights.lambda1));
    if (proj) {
        Tensor contrast = contrast_invariance(tp, *proj);
        bd.contrast = contrast.value();
        total = add(tp, total, mul_scalar(tp, contrast, weights.lambda2));
    }
    bd.total = total.value();
    return {total, bd};
}

}  // namespace car
