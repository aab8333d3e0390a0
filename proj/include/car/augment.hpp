#pragma once

// Random convolution (RC) contrast augmentation: a stack of randomly
// weighted 1x1 convolutions with LeakyReLU between them re-renders a
// mono-contrast image into a simulated arbitrary contrast while preserving
// structure. Kernels are sampled U(0,10) and shifted to zero mean; with 1x1
// kernels the whole stack acts pointwise on intensities.
//
// Intensities are shifted by -0.5 before the first layer. Without bias terms
// the stack is positively homogeneous, so on non-negative inputs it would
// reduce to a plain linear map; centering puts the piecewise-linear kink
// inside the [0,1] intensity range (inversions, V-shapes, level merges).

#include <utility>
#include <vector>

#include "car/image.hpp"
#include "car/tensor.hpp"

namespace car {

struct RCLayer {
    Tensor weights;  // [Cout,Cin,k,k], no bias
};

struct RCStack {
    std::vector<RCLayer> layers;
    double slope = 0.2;
    int kernel_size = 1;
    uint64_t seed = 0;
};

// Kernel weights are i.i.d. U(0,10), then each layer's kernel is shifted by
// its own mean so the weights sum to zero. Deterministic per seed.
inline RCStack sample_rc_stack(uint64_t rng_seed, int depth = 4,
                               const std::vector<int>& channel_plan = {1, 2, 2, 2, 1},
                               int kernel_size = 1) {
    if (depth < 1) throw Error(detail::concat("rc stack depth must be >= 1, got ", depth));
    if (static_cast<int>(channel_plan.size()) != depth + 1)
        throw Error(detail::concat("channel plan length ", channel_plan.size(),
                                   " does not match depth ", depth, " + 1"));
    if (channel_plan.front() != 1 || channel_plan.back() != 1)
        throw Error("channel plan must start and end with 1");
    if (kernel_size < 1 || kernel_size % 2 == 0)
        throw Error(detail::concat("rc kernel size must be odd and positive, got ", kernel_size));

    RCStack stack;
    stack.kernel_size = kernel_size;
    stack.seed = rng_seed;
    Rng rng(rng_seed);
    for (int layer = 0; layer < depth; ++layer) {
        Tensor w = Tensor::zeros(
            {channel_plan[layer + 1], channel_plan[layer], kernel_size, kernel_size});
        double mean = 0.0;
        for (auto& v : *w.data) {
            v = rng.uniform(0.0, 10.0);
            mean += v;
        }
        mean /= static_cast<double>(w.numel());
        for (auto& v : *w.data) v -= mean;
        stack.layers.push_back(RCLayer{std::move(w)});
    }
    return stack;
}

namespace detail {

// Stack forward without the final rescale. Throws NumericError on
// non-finite intermediates (pathological kernel; callers resample).
inline std::vector<double> apply_rc_raw(const RCStack& stack, const Image2D& img) {
    Tensor x = Tensor::zeros({1, 1, img.height, img.width});
    for (size_t i = 0; i < img.pixels.size(); ++i) (*x.data)[i] = img.pixels[i] - 0.5;

    Tape scratch;
    const int pad = (stack.kernel_size - 1) / 2;
    for (size_t layer = 0; layer < stack.layers.size(); ++layer) {
        x = conv2d(scratch, x, stack.layers[layer].weights, 1, pad);
        if (layer + 1 < stack.layers.size()) x = leaky_relu(scratch, x, stack.slope);
        for (double v : *x.data)
            if (!std::isfinite(v))
                throw NumericError(concat("non-finite value after rc layer ", layer));
    }
    return *x.data;
}

}  // namespace detail

// Full augmentation of one image: stack forward, then min-max rescale to
// [0,1] (a constant response maps to all zeros). Forward-only.
inline Image2D apply_rc(const RCStack& stack, const Image2D& img) {
    std::vector<double> raw = detail::apply_rc_raw(stack, img);
    normalize_minmax(raw);
    Image2D out(img.height, img.width);
    out.pixels = std::move(raw);
    return out;
}

namespace detail {

// A degenerate stack maps every intensity to one value; probe with a ramp.
inline bool rc_stack_degenerate(const RCStack& stack) {
    const int n = 33;
    Image2D ramp(1, n);
    for (int i = 0; i < n; ++i) ramp.pixels[i] = static_cast<double>(i) / (n - 1);
    std::vector<double> out = apply_rc_raw(stack, ramp);
    double lo = out[0], hi = out[0];
    for (double v : out) {
        lo = std::min(lo, v);
        hi = std::max(hi, v);
    }
    return hi - lo < 1e-9;
}

}  // namespace detail

// One stack, sampled from rng_seed, applied to both members so the pair
// shares a single simulated contrast; the outputs are rescaled jointly to
// keep the end-to-end intensity map identical across M and F. Degenerate or
// non-finite stacks are resampled up to 8 times.
inline std::pair<Image2D, Image2D> augment_pair(uint64_t rng_seed, const Image2D& moving,
                                                const Image2D& fixed, int depth = 4,
                                                int kernel_size = 1) {
    if (moving.height != fixed.height || moving.width != fixed.width)
        throw ShapeError(detail::concat("augment_pair shape mismatch: ", moving.height, "x",
                                        moving.width, " vs ", fixed.height, "x", fixed.width));
    std::vector<int> plan(depth + 1, 2);
    plan.front() = plan.back() = 1;

    for (int attempt = 0; attempt < 8; ++attempt) {
        RCStack stack =
            sample_rc_stack(derive_seed(rng_seed, {static_cast<uint64_t>(attempt)}), depth, plan,
                            kernel_size);
        std::vector<double> raw_m, raw_f;
        try {
            if (detail::rc_stack_degenerate(stack)) continue;
            raw_m = detail::apply_rc_raw(stack, moving);
            raw_f = detail::apply_rc_raw(stack, fixed);
        } catch (const NumericError&) {
            continue;
        }

        double lo = raw_m[0], hi = raw_m[0];
        for (double v : raw_m) {
            lo = std::min(lo, v);
            hi = std::max(hi, v);
        }
        for (double v : raw_f) {
            lo = std::min(lo, v);
            hi = std::max(hi, v);
        }
        Image2D out_m(moving.height, moving.width);
        Image2D out_f(fixed.height, fixed.width);
        if (hi - lo <= 0.0) {
            // Both inputs constant: map to all zeros.
            out_m.pixels = std::move(raw_m);
            out_f.pixels = std::move(raw_f);
            std::fill(out_m.pixels.begin(), out_m.pixels.end(), 0.0);
            std::fill(out_f.pixels.begin(), out_f.pixels.end(), 0.0);
            return {std::move(out_m), std::move(out_f)};
        }
        double scale = 1.0 / (hi - lo);
        out_m.pixels.resize(raw_m.size());
        out_f.pixels.resize(raw_f.size());
        for (size_t i = 0; i < raw_m.size(); ++i) out_m.pixels[i] = (raw_m[i] - lo) * scale;
        for (size_t i = 0; i < raw_f.size(); ++i) out_f.pixels[i] = (raw_f[i] - lo) * scale;
        return {std::move(out_m), std::move(out_f)};
    }
    throw NumericError("augment_pair: no usable rc stack after 8 attempts");
}

}  // namespace car
