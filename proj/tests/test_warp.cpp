#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <algorithm>
#include <cmath>

#include "car/common.hpp"
#include "car/gradcheck.hpp"
#include "car/warp.hpp"

using namespace car;

namespace {

Tensor random_image(Rng& rng, int h, int w) {
    Tensor t = Tensor::zeros({h, w});
    for (auto& v : *t.data) v = rng.uniform();
    return t;
}

DeformationField random_field(Rng& rng, int h, int w, double amp) {
    Tensor u = Tensor::zeros({2, h, w});
    for (auto& v : *u.data) v = rng.uniform(-amp, amp);
    return DeformationField(std::move(u));
}

}  // namespace

TEST_CASE("identity field reproduces the input bit-exactly") {
    Rng rng(5);
    Tensor img = random_image(rng, 6, 7);
    Tape tp;
    Tensor out = warp_image(tp, img, DeformationField::zeros(6, 7));
    for (int64_t i = 0; i < img.numel(); ++i) CHECK((*out.data)[i] == (*img.data)[i]);
}

TEST_CASE("constant row displacement shifts rows with border clamp") {
    // u = (1,0) everywhere: output row r reads input row r+1, last row clamps.
    const int H = 3, W = 4;
    Tensor img = Tensor::from({H, W}, {0, 1, 2, 3, 10, 11, 12, 13, 20, 21, 22, 23});
    Tensor u = Tensor::zeros({2, H, W});
    for (int i = 0; i < H * W; ++i) (*u.data)[i] = 1.0;
    Tape tp;
    Tensor out = warp_image(tp, img, DeformationField(std::move(u)));
    const std::vector<double> expected = {10, 11, 12, 13, 20, 21, 22, 23, 20, 21, 22, 23};
    for (int i = 0; i < H * W; ++i) CHECK((*out.data)[i] == doctest::Approx(expected[i]));
}

TEST_CASE("fractional displacement interpolates bilinearly") {
    Tensor img = Tensor::from({2, 2}, {0.0, 1.0, 2.0, 3.0});
    Tensor u = Tensor::zeros({2, 2, 2});
    (*u.data)[0] = 0.5;  // row displacement at (0,0)
    (*u.data)[4] = 0.5;  // column displacement at (0,0)
    Tape tp;
    Tensor out = warp_image(tp, img, DeformationField(std::move(u)));
    CHECK((*out.data)[0] == doctest::Approx(1.5).epsilon(1e-14));  // centre of the 4 corners
}

TEST_CASE("warp output range is bounded by the input range") {
    Rng rng(17);
    for (int trial = 0; trial < 5; ++trial) {
        Tensor img = random_image(rng, 8, 8);
        DeformationField f = random_field(rng, 8, 8, 3.0);
        Tape tp;
        Tensor out = warp_image(tp, img, f);
        double lo = *std::min_element(img.data->begin(), img.data->end());
        double hi = *std::max_element(img.data->begin(), img.data->end());
        for (double v : *out.data) {
            CHECK(v >= lo - 1e-12);
            CHECK(v <= hi + 1e-12);
        }
    }
}

TEST_CASE("warp gradients match finite differences") {
    Rng rng(23);
    Tensor img = random_image(rng, 6, 6);
    // Non-integer interior displacements keep FD probes away from kinks and
    // away from the clamped border.
    Tensor u = Tensor::zeros({2, 6, 6});
    for (auto& v : *u.data) v = rng.uniform(0.15, 0.45);

    SUBCASE("w.r.t. the displacement field") {
        auto fn = [&img](Tape& t, const std::vector<Tensor>& in) {
            return reduce_mean(t, warp_image(t, img, DeformationField(in[0])));
        };
        CHECK(grad_check(fn, {u}) < 1e-4);
    }
    SUBCASE("w.r.t. the image") {
        DeformationField f(u);
        auto fn = [&f](Tape& t, const std::vector<Tensor>& in) {
            return reduce_mean(t, square(t, warp_image(t, in[0], f)));
        };
        CHECK(grad_check(fn, {img}) < 1e-4);
    }
}

TEST_CASE("warp shape mismatch is rejected") {
    Tape tp;
    Tensor img = Tensor::zeros({4, 4});
    CHECK_THROWS_AS(warp_image(tp, img, DeformationField::zeros(4, 5)), ShapeError);
    CHECK_THROWS_AS(DeformationField(Tensor::zeros({3, 4, 4})), ShapeError);
}

TEST_CASE("warp_mask nearest-neighbor semantics") {
    Mask m(4, 4);
    for (int r = 0; r < 4; ++r)
        for (int c = 0; c < 4; ++c) m.at(r, c) = r < 2 ? 1 : 2;

    SUBCASE("identity field keeps the mask") {
        Mask out = warp_mask(m, DeformationField::zeros(4, 4));
        CHECK(out.labels == m.labels);
    }
    SUBCASE("shift by one row with clamped border") {
        Tensor u = Tensor::zeros({2, 4, 4});
        for (int i = 0; i < 16; ++i) (*u.data)[i] = 1.0;
        Mask out = warp_mask(m, DeformationField(std::move(u)));
        for (int c = 0; c < 4; ++c) {
            CHECK(out.at(0, c) == 1);  // reads row 1
            CHECK(out.at(1, c) == 2);
            CHECK(out.at(2, c) == 2);
            CHECK(out.at(3, c) == 2);  // clamped
        }
    }
    SUBCASE("labels stay a subset of the input labels") {
        Rng rng(3);
        Tensor u = Tensor::zeros({2, 4, 4});
        for (auto& v : *u.data) v = rng.uniform(-2.0, 2.0);
        Mask out = warp_mask(m, DeformationField(std::move(u)));
        for (int32_t v : out.labels) CHECK((v == 1 || v == 2));
    }
}
