#pragma once

// Spatial transformer: resample an image through a dense displacement field.
// The field stores, per output pixel, where to read from in pixel units:
// phi(x) = x + u(x). Channel 0 holds row displacement, channel 1 column
// displacement. Out-of-bounds source coordinates clamp to the border.

#include <cmath>

#include "car/image.hpp"
#include "car/tensor.hpp"

namespace car {

struct DeformationField {
    Tensor u;  // [2,H,W]

    DeformationField() = default;
    explicit DeformationField(Tensor field) : u(std::move(field)) {
        if (u.rank() != 3 || u.shape[0] != 2)
            throw ShapeError("deformation field must have shape [2,H,W]");
    }

    static DeformationField zeros(int h, int w) {
        return DeformationField(Tensor::zeros({2, h, w}));
    }

    int height() const { return u.shape[1]; }
    int width() const { return u.shape[2]; }

    double row_disp(int r, int c) const {
        return (*u.data)[static_cast<int64_t>(r) * width() + c];
    }
    double col_disp(int r, int c) const {
        return (*u.data)[static_cast<int64_t>(height()) * width() +
                         static_cast<int64_t>(r) * width() + c];
    }
};

// Bilinear warp of a rank-2 image tensor, differentiable w.r.t. both the
// image and the displacement field (away from integer-coordinate kinks;
// clamped samples contribute zero displacement gradient).
inline Tensor warp_image(Tape& tp, const Tensor& img, const DeformationField& field) {
    if (img.rank() != 2) throw ShapeError("warp_image expects a rank-2 image tensor");
    const int H = img.shape[0], W = img.shape[1];
    if (field.height() != H || field.width() != W)
        throw ShapeError(detail::concat("warp_image: field ", field.height(), "x", field.width(),
                                        " does not match image ", H, "x", W));

    Tensor out = Tensor::zeros(img.shape);
    const auto& iv = *img.data;
    const auto& uv = *field.u.data;
    auto& ov = *out.data;
    const int64_t hw = static_cast<int64_t>(H) * W;

    for (int r = 0; r < H; ++r) {
        for (int c = 0; c < W; ++c) {
            int64_t p = static_cast<int64_t>(r) * W + c;
            double sr = std::clamp(r + uv[p], 0.0, static_cast<double>(H - 1));
            double sc = std::clamp(c + uv[hw + p], 0.0, static_cast<double>(W - 1));
            int r0 = static_cast<int>(sr);
            int c0 = static_cast<int>(sc);
            int r1 = std::min(r0 + 1, H - 1);
            int c1 = std::min(c0 + 1, W - 1);
            double fr = sr - r0;
            double fc = sc - c0;
            ov[p] = (1.0 - fr) * (1.0 - fc) * iv[static_cast<int64_t>(r0) * W + c0] +
                    (1.0 - fr) * fc * iv[static_cast<int64_t>(r0) * W + c1] +
                    fr * (1.0 - fc) * iv[static_cast<int64_t>(r1) * W + c0] +
                    fr * fc * iv[static_cast<int64_t>(r1) * W + c1];
        }
    }

    int ii = tp.use(img);
    int iu = tp.use(field.u);
    if (ii >= 0 || iu >= 0) {
        auto id = img.data;
        auto ud = field.u.data;
        tp.record(out, [ii, iu, id, ud, H, W, hw](const std::vector<double>& g, Tape& t) {
            const auto& iv = *id;
            const auto& uv = *ud;
            for (int r = 0; r < H; ++r) {
                for (int c = 0; c < W; ++c) {
                    int64_t p = static_cast<int64_t>(r) * W + c;
                    double gv = g[p];
                    if (gv == 0.0) continue;
                    double raw_r = r + uv[p];
                    double raw_c = c + uv[hw + p];
                    bool clamped_r = raw_r < 0.0 || raw_r > H - 1;
                    bool clamped_c = raw_c < 0.0 || raw_c > W - 1;
                    double sr = std::clamp(raw_r, 0.0, static_cast<double>(H - 1));
                    double sc = std::clamp(raw_c, 0.0, static_cast<double>(W - 1));
                    int r0 = static_cast<int>(sr);
                    int c0 = static_cast<int>(sc);
                    int r1 = std::min(r0 + 1, H - 1);
                    int c1 = std::min(c0 + 1, W - 1);
                    double fr = sr - r0;
                    double fc = sc - c0;
                    double i00 = iv[static_cast<int64_t>(r0) * W + c0];
                    double i01 = iv[static_cast<int64_t>(r0) * W + c1];
                    double i10 = iv[static_cast<int64_t>(r1) * W + c0];
                    double i11 = iv[static_cast<int64_t>(r1) * W + c1];
                    if (ii >= 0) {
                        auto& gi = t.grad_buf(ii);
                        gi[static_cast<int64_t>(r0) * W + c0] += gv * (1.0 - fr) * (1.0 - fc);
                        gi[static_cast<int64_t>(r0) * W + c1] += gv * (1.0 - fr) * fc;
                        gi[static_cast<int64_t>(r1) * W + c0] += gv * fr * (1.0 - fc);
                        gi[static_cast<int64_t>(r1) * W + c1] += gv * fr * fc;
                    }
                    if (iu >= 0) {
                        auto& gu = t.grad_buf(iu);
                        if (!clamped_r)
                            gu[p] += gv * ((1.0 - fc) * (i10 - i00) + fc * (i11 - i01));
                        if (!clamped_c)
                            gu[hw + p] += gv * ((1.0 - fr) * (i01 - i00) + fr * (i11 - i10));
                    }
                }
            }
        });
    }
    return out;
}

inline Image2D warp_image(const Image2D& img, const DeformationField& field) {
    Tape scratch;
    Tensor warped = warp_image(scratch, tensor_from_image(img), field);
    return image_from_tensor(warped);
}

// Nearest-neighbor label resampling; labels are never blended and the result
// is not differentiable.
inline Mask warp_mask(const Mask& mask, const DeformationField& field) {
    if (field.height() != mask.height || field.width() != mask.width)
        throw ShapeError(detail::concat("warp_mask: field ", field.height(), "x", field.width(),
                                        " does not match mask ", mask.height, "x", mask.width));
    const int H = mask.height, W = mask.width;
    Mask out(H, W);
    for (int r = 0; r < H; ++r) {
        for (int c = 0; c < W; ++c) {
            int sr = std::clamp(static_cast<int>(std::lround(r + field.row_disp(r, c))), 0, H - 1);
            int sc = std::clamp(static_cast<int>(std::lround(c + field.col_disp(r, c))), 0, W - 1);
            out.at(r, c) = mask.at(sr, sc);
        }
    }
    return out;
}

}  // namespace car
