#pragma once

#include <vector>

#include "omnipatch/placement.hpp"
#include "omnipatch/tensor.hpp"

namespace omnipatch {

enum class Stage { stage1, stage2 };

std::string to_string(Stage s);

// The optimized patch: pixels plus stage/step metadata.
struct PatchState {
    Tensor pixels;  // 3 x S x S, values kept in [0,1] by the trainer
    int size = 0;
    Stage stage = Stage::stage1;
    int step_count = 0;
};

// Expectation-over-transformation ranges (uniform draws).
struct EotParams {
    double scale_lo = 0.9, scale_hi = 1.1;
    double rotation_deg = 10.0;     // angle drawn from [-r, +r]
    double translation_px = 10.0;   // each axis drawn from [-t, +t]
    bool enabled = true;

    void validate() const;
};

struct PatchTransform {
    double scale = 1.0, angle_deg = 0.0, dy = 0.0, dx = 0.0;
};

// Independent uniform draws per component; identity when disabled.
PatchTransform sample_transform(const EotParams& params, uint64_t rng_seed);

struct AppliedPatch {
    Tensor image;    // composited image, 3 x H x W
    Mask footprint;  // pixels overwritten by the transformed patch
    PatchTransform transform_used;
};

// Differentiable compositing: the patch is scaled/rotated/translated about
// its center (bilinear resampling), then overwrites covered pixels. Coverage
// is binary (resampled alpha thresholded at 0.5); gradients flow through the
// sampled patch colors, not through the mask geometry. Keeps the tap table so
// the backward pass can push a composite-image gradient onto the patch.
class PatchApplication {
public:
    PatchApplication(const Tensor& image, const PatchState& patch, const Placement& placement,
                     const PatchTransform& transform);

    const AppliedPatch& result() const { return result_; }

    // dL/d(composited image) -> dL/d(patch pixels), 3 x S x S.
    Tensor patch_gradient(const Tensor& dimage) const;

private:
    struct Tap {
        int out_y, out_x;
        int idx[4];     // patch-plane linear indices (clamped)
        double w[4];    // bilinear weights
    };
    int patch_s_;
    std::vector<Tap> taps_;
    AppliedPatch result_;
};

// One-shot convenience wrapper.
AppliedPatch apply_patch(const Tensor& image, const PatchState& patch, const Placement& placement,
                         const PatchTransform& transform);

// Token cell marked 1 iff any covered pixel lies in it. Dimensions must be
// divisible by token_size.
Mask footprint_token_mask(const Mask& footprint, int token_size);

// Any-coverage footprint downscaling (for models running at an internal
// resolution).
Mask downscale_footprint(const Mask& footprint, int out_h, int out_w);

}  // namespace omnipatch
