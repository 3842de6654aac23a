#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "omnipatch/applicator.hpp"
#include "omnipatch/rng.hpp"
#include "oracles.hpp"

using namespace omnipatch;

namespace {

Tensor random_image(int h, int w, uint64_t seed) {
    Rng rng(seed);
    Tensor img(3, h, w);
    for (double& v : img.v) v = rng.uniform();
    return img;
}

PatchState random_patch(int s, uint64_t seed) {
    Rng rng(seed);
    PatchState p;
    p.size = s;
    p.pixels = Tensor(3, s, s);
    for (double& v : p.pixels.v) v = rng.uniform();
    return p;
}

}  // namespace

TEST_CASE("sample_transform: disabled EOT is the identity") {
    EotParams params;
    params.enabled = false;
    for (uint64_t s = 0; s < 10; ++s) {
        PatchTransform t = sample_transform(params, s);
        CHECK(t.scale == 1.0);
        CHECK(t.angle_deg == 0.0);
        CHECK(t.dy == 0.0);
        CHECK(t.dx == 0.0);
    }
}

TEST_CASE("sample_transform: point ranges return exactly that tuple") {
    EotParams params;
    params.scale_lo = params.scale_hi = 1.1;
    params.rotation_deg = 0.0;
    params.translation_px = 0.0;
    PatchTransform t = sample_transform(params, 7);
    CHECK(t.scale == doctest::Approx(1.1).epsilon(1e-12));
    CHECK(t.angle_deg == 0.0);
    CHECK(t.dy == 0.0);
    CHECK(t.dx == 0.0);
}

TEST_CASE("sample_transform: uniform scale mean and determinism") {
    EotParams params;
    params.scale_lo = 0.8;
    params.scale_hi = 1.2;
    double sum = 0.0;
    for (uint64_t s = 0; s < 10000; ++s) sum += sample_transform(params, mix_seed(3, s)).scale;
    CHECK(sum / 10000.0 == doctest::Approx(1.0).epsilon(0.01));
    CHECK(sample_transform(params, 55).scale == sample_transform(params, 55).scale);
}

TEST_CASE("sample_transform: invalid ranges rejected") {
    EotParams params;
    params.scale_lo = 0.0;
    CHECK_THROWS_AS(sample_transform(params, 0), ConfigError);
    params.scale_lo = 1.2;
    params.scale_hi = 0.9;
    CHECK_THROWS_AS(sample_transform(params, 0), ConfigError);
}

TEST_CASE("apply_patch: identity transform writes the exact block") {
    Tensor img = random_image(32, 48, 1);
    PatchState patch = random_patch(8, 2);
    Placement pl{10, 20, 8, PlacementStrategy::random};
    AppliedPatch ap = apply_patch(img, patch, pl, PatchTransform{});
    for (int y = 0; y < 32; ++y)
        for (int x = 0; x < 48; ++x) {
            bool inside = (y >= 10 && y < 18 && x >= 20 && x < 28);
            CHECK(static_cast<bool>(ap.footprint.at(y, x)) == inside);
            for (int c = 0; c < 3; ++c) {
                double expect = inside ? patch.pixels.at(c, y - 10, x - 20) : img.at(c, y, x);
                CHECK(ap.image.at(c, y, x) == expect);  // bit-exact
            }
        }
}

TEST_CASE("apply_patch: all-zero patch on a black image is a no-op in values") {
    Tensor img(3, 16, 16, 0.0);
    PatchState patch;
    patch.size = 8;
    patch.pixels = Tensor(3, 8, 8, 0.0);
    Placement pl{4, 4, 8, PlacementStrategy::center};
    AppliedPatch ap = apply_patch(img, patch, pl, PatchTransform{});
    CHECK(ap.image.v == img.v);
    CHECK(ap.footprint.count() == 64);  // footprint still marks the block
}

TEST_CASE("apply_patch: out-of-bounds placement rejected") {
    Tensor img(3, 16, 16, 0.5);
    PatchState patch = random_patch(8, 3);
    CHECK_THROWS_AS(apply_patch(img, patch, {12, 0, 8, PlacementStrategy::random}, {}),
                    ConfigError);
    CHECK_THROWS_AS(apply_patch(img, patch, {-1, 0, 8, PlacementStrategy::random}, {}),
                    ConfigError);
}

TEST_CASE("apply_patch: identity-gradient of summed composite is exactly one per entry") {
    Tensor img = random_image(24, 24, 4);
    PatchState patch = random_patch(8, 5);
    Placement pl{8, 8, 8, PlacementStrategy::random};
    PatchApplication app(img, patch, pl, PatchTransform{});
    Tensor dimage(3, 24, 24, 1.0);  // d(sum of composite)/d(composite) = 1
    Tensor dpatch = app.patch_gradient(dimage);
    for (double g : dpatch.v) CHECK(g == doctest::Approx(1.0).epsilon(1e-6));
}

TEST_CASE("apply_patch: pixels outside the footprint never change") {
    Rng rng(6);
    Tensor img = random_image(40, 40, 7);
    PatchState patch = random_patch(10, 8);
    EotParams params;
    for (int trial = 0; trial < 25; ++trial) {
        Placement pl{static_cast<int>(rng.uniform_index(30)),
                     static_cast<int>(rng.uniform_index(30)), 10, PlacementStrategy::random};
        PatchTransform tf = sample_transform(params, rng.next_u64());
        AppliedPatch ap = apply_patch(img, patch, pl, tf);
        for (int y = 0; y < 40; ++y)
            for (int x = 0; x < 40; ++x) {
                if (ap.footprint.at(y, x)) continue;
                for (int c = 0; c < 3; ++c) CHECK(ap.image.at(c, y, x) == img.at(c, y, x));
            }
        for (double v : ap.image.v) {
            CHECK(v >= 0.0);
            CHECK(v <= 1.0);
        }
    }
}

TEST_CASE("apply_patch: transformed footprint is clipped at image borders") {
    Tensor img = random_image(24, 24, 9);
    PatchState patch = random_patch(12, 10);
    Placement pl{0, 0, 12, PlacementStrategy::random};
    PatchTransform tf{1.3, 25.0, -4.0, -4.0};  // pushes off the top-left corner
    AppliedPatch ap = apply_patch(img, patch, pl, tf);
    CHECK(ap.footprint.count() > 0);
    CHECK(ap.footprint.count() < static_cast<size_t>(24 * 24));
}

TEST_CASE("apply_patch: gradient matches finite differences through the warp") {
    Tensor img = random_image(32, 32, 11);
    PatchState patch = random_patch(10, 12);
    Placement pl{8, 9, 10, PlacementStrategy::random};
    Rng wrng(13);
    Tensor weights(3, 32, 32);
    for (double& v : weights.v) v = wrng.normal();

    auto scalar_of = [&](const PatchTransform& tf) {
        return [&, tf]() {
            AppliedPatch ap = apply_patch(img, patch, pl, tf);
            double s = 0.0;
            for (size_t i = 0; i < ap.image.v.size(); ++i) s += weights.v[i] * ap.image.v[i];
            return s;
        };
    };

    for (PatchTransform tf : {PatchTransform{}, PatchTransform{1.07, 9.0, 1.5, -2.25}}) {
        PatchApplication app(img, patch, pl, tf);
        Tensor dpatch = app.patch_gradient(weights);
        auto f = scalar_of(tf);
        Rng rng(14);
        int checked = 0;
        for (int trial = 0; trial < 10; ++trial) {
            size_t idx = rng.uniform_index(patch.pixels.v.size());
            double fd = oracle::central_diff(f, patch.pixels.v, idx, 1e-4);
            if (std::abs(fd) < 1e-12 && std::abs(dpatch.v[idx]) < 1e-12) continue;
            CHECK(oracle::rel_close(fd, dpatch.v[idx], 1e-2, 1e-10));
            ++checked;
        }
        CHECK(checked >= 5);
    }
}

TEST_CASE("footprint_token_mask: single cell, empty, four-cell straddle") {
    Mask fp(32, 32);
    for (int y = 8; y < 16; ++y)
        for (int x = 16; x < 24; ++x) fp.at(y, x) = 1;  // exactly one 8x8 cell
    Mask tok = footprint_token_mask(fp, 8);
    REQUIRE(tok.h == 4);
    REQUIRE(tok.w == 4);
    CHECK(tok.count() == 1);
    CHECK(tok.at(1, 2) == 1);

    CHECK(footprint_token_mask(Mask(32, 32), 8).count() == 0);

    Mask straddle(32, 32);
    for (int y = 7; y <= 8; ++y)
        for (int x = 7; x <= 8; ++x) straddle.at(y, x) = 1;  // 1px into each of 4 cells
    Mask tok4 = footprint_token_mask(straddle, 8);
    CHECK(tok4.count() == 4);

    CHECK_THROWS_AS(footprint_token_mask(Mask(30, 32), 8), ConfigError);
}

TEST_CASE("downscale_footprint: any-coverage marking") {
    Mask fp(16, 16);
    fp.at(3, 3) = 1;
    Mask low = downscale_footprint(fp, 8, 8);
    CHECK(low.count() == 1);
    CHECK(low.at(1, 1) == 1);
    CHECK(downscale_footprint(Mask(16, 16), 4, 4).count() == 0);
}
