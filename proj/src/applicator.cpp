#include "omnipatch/applicator.hpp"

#include <algorithm>
#include <cmath>

#include "omnipatch/rng.hpp"

namespace omnipatch {

std::string to_string(Stage s) { return s == Stage::stage1 ? "stage1" : "stage2"; }

void EotParams::validate() const {
    if (!(scale_lo > 0.0) || scale_lo > scale_hi)
        throw ConfigError("eot: scale range must satisfy 0 < lo <= hi");
    if (rotation_deg < 0.0 || translation_px < 0.0)
        throw ConfigError("eot: rotation/translation ranges must be nonnegative");
}

PatchTransform sample_transform(const EotParams& params, uint64_t rng_seed) {
    params.validate();
    if (!params.enabled) return PatchTransform{1.0, 0.0, 0.0, 0.0};
    Rng rng(rng_seed);
    PatchTransform t;
    t.scale = rng.uniform(params.scale_lo, params.scale_hi);
    t.angle_deg = rng.uniform(-params.rotation_deg, params.rotation_deg);
    t.dy = rng.uniform(-params.translation_px, params.translation_px);
    t.dx = rng.uniform(-params.translation_px, params.translation_px);
    return t;
}

PatchApplication::PatchApplication(const Tensor& image, const PatchState& patch,
                                   const Placement& placement, const PatchTransform& transform)
    : patch_s_(patch.size) {
    const int S = patch.size;
    const int H = image.h, W = image.w;
    if (patch.pixels.c != 3 || patch.pixels.h != S || patch.pixels.w != S)
        throw ContractError("apply_patch: patch tensor does not match its declared size");
    if (placement.y0 < 0 || placement.x0 < 0 || placement.y0 + S > H || placement.x0 + S > W)
        throw ConfigError("apply_patch: placement out of bounds");
    if (!(transform.scale > 0.0)) throw ConfigError("apply_patch: scale must be positive");

    result_.image = image;
    result_.footprint = Mask(H, W);
    result_.transform_used = transform;

    const double pc = (S - 1) / 2.0;  // rotation/scale pivot: patch center
    const double oc_y = placement.y0 + pc + transform.dy;
    const double oc_x = placement.x0 + pc + transform.dx;
    const double theta = transform.angle_deg * (M_PI / 180.0);
    const double c = std::cos(theta), sn = std::sin(theta);
    const double inv_s = 1.0 / transform.scale;

    // Bounding box of the transformed footprint, clipped at image borders.
    const double radius = transform.scale * (S / 2.0) * std::sqrt(2.0) + 1.0;
    const int y_lo = std::max(0, static_cast<int>(std::floor(oc_y - radius)));
    const int y_hi = std::min(H - 1, static_cast<int>(std::ceil(oc_y + radius)));
    const int x_lo = std::max(0, static_cast<int>(std::floor(oc_x - radius)));
    const int x_hi = std::min(W - 1, static_cast<int>(std::ceil(oc_x + radius)));

    for (int y = y_lo; y <= y_hi; ++y) {
        const double ry = y - oc_y;
        for (int x = x_lo; x <= x_hi; ++x) {
            const double rx = x - oc_x;
            // Inverse warp into patch coordinates.
            const double py = (c * ry + sn * rx) * inv_s + pc;
            const double px = (-sn * ry + c * rx) * inv_s + pc;

            const int fy = static_cast<int>(std::floor(py));
            const int fx = static_cast<int>(std::floor(px));
            const double ay = py - fy, ax = px - fx;
            const double w00 = (1 - ay) * (1 - ax), w01 = (1 - ay) * ax;
            const double w10 = ay * (1 - ax), w11 = ay * ax;

            // Resampled alpha: implicit coverage map is 1 on the patch grid,
            // 0 outside (zero padding).
            auto inside = [&](int yy, int xx) { return yy >= 0 && yy < S && xx >= 0 && xx < S; };
            const double alpha = w00 * inside(fy, fx) + w01 * inside(fy, fx + 1) +
                                 w10 * inside(fy + 1, fx) + w11 * inside(fy + 1, fx + 1);
            if (alpha < 0.5) continue;

            Tap tap;
            tap.out_y = y;
            tap.out_x = x;
            const int y0c = std::clamp(fy, 0, S - 1), y1c = std::clamp(fy + 1, 0, S - 1);
            const int x0c = std::clamp(fx, 0, S - 1), x1c = std::clamp(fx + 1, 0, S - 1);
            tap.idx[0] = y0c * S + x0c;
            tap.idx[1] = y0c * S + x1c;
            tap.idx[2] = y1c * S + x0c;
            tap.idx[3] = y1c * S + x1c;
            tap.w[0] = w00;
            tap.w[1] = w01;
            tap.w[2] = w10;
            tap.w[3] = w11;

            for (int ci = 0; ci < 3; ++ci) {
                const double* pp = patch.pixels.plane(ci);
                double v = tap.w[0] * pp[tap.idx[0]] + tap.w[1] * pp[tap.idx[1]] +
                           tap.w[2] * pp[tap.idx[2]] + tap.w[3] * pp[tap.idx[3]];
                result_.image.at(ci, y, x) = std::clamp(v, 0.0, 1.0);
            }
            result_.footprint.at(y, x) = 1;
            taps_.push_back(tap);
        }
    }
}

Tensor PatchApplication::patch_gradient(const Tensor& dimage) const {
    Tensor dpatch(3, patch_s_, patch_s_);
    for (const Tap& tap : taps_) {
        for (int ci = 0; ci < 3; ++ci) {
            double g = dimage.at(ci, tap.out_y, tap.out_x);
            double* dp = dpatch.plane(ci);
            dp[tap.idx[0]] += tap.w[0] * g;
            dp[tap.idx[1]] += tap.w[1] * g;
            dp[tap.idx[2]] += tap.w[2] * g;
            dp[tap.idx[3]] += tap.w[3] * g;
        }
    }
    return dpatch;
}

AppliedPatch apply_patch(const Tensor& image, const PatchState& patch, const Placement& placement,
                         const PatchTransform& transform) {
    return PatchApplication(image, patch, placement, transform).result();
}

Mask footprint_token_mask(const Mask& footprint, int token_size) {
    if (token_size <= 0 || footprint.h % token_size != 0 || footprint.w % token_size != 0)
        throw ConfigError("footprint_token_mask: dimensions not divisible by token size");
    Mask tokens(footprint.h / token_size, footprint.w / token_size);
    for (int y = 0; y < footprint.h; ++y)
        for (int x = 0; x < footprint.w; ++x)
            if (footprint.at(y, x)) tokens.at(y / token_size, x / token_size) = 1;
    return tokens;
}

Mask downscale_footprint(const Mask& footprint, int out_h, int out_w) {
    if (out_h <= 0 || out_w <= 0) throw ConfigError("downscale_footprint: bad output dims");
    Mask out(out_h, out_w);
    for (int y = 0; y < footprint.h; ++y) {
        int oy = std::min(out_h - 1, y * out_h / footprint.h);
        for (int x = 0; x < footprint.w; ++x)
            if (footprint.at(y, x)) out.at(oy, std::min(out_w - 1, x * out_w / footprint.w)) = 1;
    }
    return out;
}

}  // namespace omnipatch
