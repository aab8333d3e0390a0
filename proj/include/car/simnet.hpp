#pragma once

// The CAR registration network: two Siamese encoders (moving / fixed
// branches), a decoder that fuses the concatenated latents with both
// branches' skip features into a dense displacement field, and a 1x1
// projection head used by the contrast-invariance loss.
//
// Encoders are `levels` blocks of stride-2 3x3 conv + LeakyReLU, so the
// latent sits at 1/2^levels of the input resolution (1/16 at the default
// four levels). The decoder mirrors them with nearest-neighbor upsampling,
// and its final 3x3 head starts at zero so a fresh model is the identity
// transform.

#include <string>
#include <utility>
#include <vector>

#include "car/tensor.hpp"
#include "car/warp.hpp"

namespace car {

struct ArchSpec {
    int levels = 4;
    int enc_channels = 32;   // paper uses 128; desk-scale default
    int dec_channels = 64;   // paper uses 256
    int proj_channels = 32;
    double slope = 0.2;
    bool share_encoders = false;

    void validate() const {
        if (levels < 1) throw Error(detail::concat("levels must be >= 1, got ", levels));
        if (enc_channels < 1 || dec_channels < 1 || proj_channels < 1)
            throw Error("channel counts must be positive");
        if (!(slope > 0.0 && slope < 1.0)) throw Error("activation slope must be in (0,1)");
    }

    int skip_channels(int level) const { return level == 0 ? 1 : enc_channels; }

    int decoder_in_channels(int block) const {
        int prev = block == 0 ? 2 * enc_channels : dec_channels;
        return prev + 2 * skip_channels(levels - 1 - block);
    }
};

struct CarModel {
    ArchSpec arch;
    std::vector<Tensor> encoder_m;  // one stride-2 kernel per level
    std::vector<Tensor> encoder_f;  // empty when encoders share weights
    std::vector<Tensor> decoder;    // one kernel per block
    Tensor head;                    // [2, dec_channels, 3, 3], zero-initialized
    Tensor proj;                    // [proj_channels, enc_channels, 1, 1]

    const std::vector<Tensor>& fixed_encoder() const {
        return arch.share_encoders ? encoder_m : encoder_f;
    }

    std::vector<std::pair<std::string, Tensor*>> named_params() {
        std::vector<std::pair<std::string, Tensor*>> out;
        for (size_t i = 0; i < encoder_m.size(); ++i)
            out.emplace_back("enc_m." + std::to_string(i), &encoder_m[i]);
        for (size_t i = 0; i < encoder_f.size(); ++i)
            out.emplace_back("enc_f." + std::to_string(i), &encoder_f[i]);
        for (size_t i = 0; i < decoder.size(); ++i)
            out.emplace_back("dec." + std::to_string(i), &decoder[i]);
        out.emplace_back("head", &head);
        out.emplace_back("proj", &proj);
        return out;
    }

    void set_requires_grad(bool flag) {
        for (auto& [name, t] : named_params()) t->set_requires_grad(flag);
    }

    void zero_grad() {
        for (auto& [name, t] : named_params()) t->zero_grad();
    }
};

namespace detail {

inline Tensor fan_in_uniform(Rng& rng, Shape shape) {
    Tensor t = Tensor::zeros(shape);
    int64_t fan_in = 1;
    for (size_t i = 1; i < shape.size(); ++i) fan_in *= shape[i];
    double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
    for (auto& v : *t.data) v = rng.uniform(-bound, bound);
    return t;
}

}  // namespace detail

// Fan-in scaled uniform weights; the flow head is all zeros so the initial
// deformation is the identity. Deterministic per (spec, seed).
inline CarModel init_model(const ArchSpec& spec, uint64_t rng_seed) {
    spec.validate();
    CarModel m;
    m.arch = spec;
    Rng rng(rng_seed);

    auto encoder = [&] {
        std::vector<Tensor> enc;
        for (int level = 0; level < spec.levels; ++level) {
            int cin = level == 0 ? 1 : spec.enc_channels;
            enc.push_back(detail::fan_in_uniform(rng, {spec.enc_channels, cin, 3, 3}));
        }
        return enc;
    };
    m.encoder_m = encoder();
    if (!spec.share_encoders) m.encoder_f = encoder();
    for (int block = 0; block < spec.levels; ++block)
        m.decoder.push_back(
            detail::fan_in_uniform(rng, {spec.dec_channels, spec.decoder_in_channels(block), 3, 3}));
    m.head = Tensor::zeros({2, spec.dec_channels, 3, 3});
    m.proj = detail::fan_in_uniform(rng, {spec.proj_channels, spec.enc_channels, 1, 1});
    return m;
}

struct EncodeResult {
    Tensor latent;              // [1, enc_channels, H/2^levels, W/2^levels]
    std::vector<Tensor> skips;  // features before each downsampling, full to coarse
};

inline EncodeResult encode(Tape& tp, const ArchSpec& arch, const std::vector<Tensor>& weights,
                           const Tensor& image) {
    if (image.rank() != 2) throw ShapeError("encode expects a rank-2 image tensor");
    const int H = image.shape[0], W = image.shape[1];
    const int div = 1 << arch.levels;
    if (H % div != 0 || W % div != 0)
        throw ShapeError(detail::concat("image extents ", H, "x", W,
                                        " not divisible by 2^levels = ", div));
    EncodeResult res;
    Tensor x = reshape(image, {1, 1, H, W});
    for (int level = 0; level < arch.levels; ++level) {
        res.skips.push_back(x);
        x = leaky_relu(tp, downsample_stride2(tp, x, weights[level]), arch.slope);
    }
    res.latent = x;
    return res;
}

// Fuse latents and skips into the displacement field (pixels, [2,H,W]).
inline DeformationField decode(Tape& tp, const CarModel& model, const Tensor& latent_m,
                               const Tensor& latent_f, const std::vector<Tensor>& skips_m,
                               const std::vector<Tensor>& skips_f) {
    detail::check_same_shape(latent_m, latent_f, "decode");
    const ArchSpec& arch = model.arch;
    Tensor x = concat_channels(tp, latent_m, latent_f);
    for (int block = 0; block < arch.levels; ++block) {
        x = upsample_nearest2(tp, x);
        int skip = arch.levels - 1 - block;
        x = concat_channels(tp, x, concat_channels(tp, skips_m[skip], skips_f[skip]));
        x = leaky_relu(tp, conv2d(tp, x, model.decoder[block], 1, 1), arch.slope);
    }
    Tensor u = conv2d(tp, x, model.head, 1, 1);
    return DeformationField(reshape(u, {2, u.shape[2], u.shape[3]}));
}

// 1x1 projection of a latent into the contrast-invariance space; no
// activation, gradients flow through.
inline Tensor project(Tape& tp, const CarModel& model, const Tensor& latent) {
    if (latent.rank() != 4)
        throw ShapeError("project expects a rank-4 latent");
    if (latent.shape[1] != model.arch.enc_channels)
        throw ShapeError(detail::concat("project channel mismatch: latent has ", latent.shape[1],
                                        ", head expects ", model.arch.enc_channels));
    return conv2d(tp, latent, model.proj, 1, 0);
}

struct ForwardResult {
    DeformationField field;
    Tensor latent_m;
    Tensor latent_f;
};

inline ForwardResult forward(Tape& tp, const CarModel& model, const Tensor& moving,
                             const Tensor& fixed) {
    detail::check_same_shape(moving, fixed, "forward");
    EncodeResult em = encode(tp, model.arch, model.encoder_m, moving);
    EncodeResult ef = encode(tp, model.arch, model.fixed_encoder(), fixed);
    ForwardResult res;
    res.field = decode(tp, model, em.latent, ef.latent, em.skips, ef.skips);
    res.latent_m = em.latent;
    res.latent_f = ef.latent;
    return res;
}

}  // namespace car
