#pragma once

// Image2D: single-channel grayscale with intensities in [0,1].
// Mask: integer label map (0 = background). Conversions to/from Tensor.

#include <cstdint>
#include <vector>

#include "car/tensor.hpp"

namespace car {

struct Image2D {
    int height = 0;
    int width = 0;
    std::vector<double> pixels;  // row-major

    Image2D() = default;
    Image2D(int h, int w, double fill = 0.0)
        : height(h), width(w), pixels(static_cast<size_t>(h) * w, fill) {
        if (h <= 0 || w <= 0)
            throw ShapeError(detail::concat("image extents must be positive, got ", h, "x", w));
    }

    double& at(int r, int c) { return pixels[static_cast<size_t>(r) * width + c]; }
    double at(int r, int c) const { return pixels[static_cast<size_t>(r) * width + c]; }

    void validate() const {
        if (static_cast<int64_t>(pixels.size()) != static_cast<int64_t>(height) * width)
            throw ShapeError("image pixel count does not match extents");
        for (double v : pixels) {
            if (!std::isfinite(v)) throw NumericError("image contains non-finite pixel");
            if (v < 0.0 || v > 1.0)
                throw NumericError(detail::concat("image pixel ", v, " outside [0,1]"));
        }
    }
};

struct Mask {
    int height = 0;
    int width = 0;
    std::vector<int32_t> labels;  // row-major

    Mask() = default;
    Mask(int h, int w, int32_t fill = 0)
        : height(h), width(w), labels(static_cast<size_t>(h) * w, fill) {
        if (h <= 0 || w <= 0)
            throw ShapeError(detail::concat("mask extents must be positive, got ", h, "x", w));
    }

    int32_t& at(int r, int c) { return labels[static_cast<size_t>(r) * width + c]; }
    int32_t at(int r, int c) const { return labels[static_cast<size_t>(r) * width + c]; }

    int32_t max_label() const {
        int32_t m = 0;
        for (int32_t v : labels) m = std::max(m, v);
        return m;
    }
};

inline Tensor tensor_from_image(const Image2D& img) {
    return Tensor::from({img.height, img.width}, img.pixels);
}

inline Image2D image_from_tensor(const Tensor& t) {
    if (t.rank() != 2) throw ShapeError("image_from_tensor expects a rank-2 tensor");
    Image2D img(t.shape[0], t.shape[1]);
    img.pixels = *t.data;
    return img;
}

// Min-max rescale to [0,1]; a constant input maps to all zeros.
inline void normalize_minmax(std::vector<double>& v) {
    if (v.empty()) return;
    double lo = v[0], hi = v[0];
    for (double x : v) {
        lo = std::min(lo, x);
        hi = std::max(hi, x);
    }
    if (hi <= lo) {
        std::fill(v.begin(), v.end(), 0.0);
        return;
    }
    double scale = 1.0 / (hi - lo);
    for (double& x : v) x = (x - lo) * scale;
}

}  // namespace car
