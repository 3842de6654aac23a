#pragma once

#include <cstdint>
#include <vector>

#include "omnipatch/errors.hpp"

namespace omnipatch {

// Dense planar tensor, channel-major (CHW), double precision throughout.
// Double keeps finite-difference gradient checks and bit-exact determinism
// unproblematic at desk scale.
struct Tensor {
    int c = 0, h = 0, w = 0;
    std::vector<double> v;

    Tensor() = default;
    Tensor(int c_, int h_, int w_, double fill = 0.0)
        : c(c_), h(h_), w(w_), v(static_cast<size_t>(c_) * h_ * w_, fill) {}

    double& at(int ci, int y, int x) { return v[(static_cast<size_t>(ci) * h + y) * w + x]; }
    double at(int ci, int y, int x) const { return v[(static_cast<size_t>(ci) * h + y) * w + x]; }

    double* plane(int ci) { return v.data() + static_cast<size_t>(ci) * h * w; }
    const double* plane(int ci) const { return v.data() + static_cast<size_t>(ci) * h * w; }

    size_t size() const { return v.size(); }
    bool same_shape(const Tensor& o) const { return c == o.c && h == o.h && w == o.w; }
    void zero() { std::fill(v.begin(), v.end(), 0.0); }
};

// Integer label raster, H x W.
struct LabelMap {
    int h = 0, w = 0;
    std::vector<int32_t> v;

    LabelMap() = default;
    LabelMap(int h_, int w_, int32_t fill = 0)
        : h(h_), w(w_), v(static_cast<size_t>(h_) * w_, fill) {}

    int32_t& at(int y, int x) { return v[static_cast<size_t>(y) * w + x]; }
    int32_t at(int y, int x) const { return v[static_cast<size_t>(y) * w + x]; }
    size_t size() const { return v.size(); }
};

// Binary H x W mask.
struct Mask {
    int h = 0, w = 0;
    std::vector<uint8_t> v;

    Mask() = default;
    Mask(int h_, int w_, uint8_t fill = 0)
        : h(h_), w(w_), v(static_cast<size_t>(h_) * w_, fill) {}

    uint8_t& at(int y, int x) { return v[static_cast<size_t>(y) * w + x]; }
    uint8_t at(int y, int x) const { return v[static_cast<size_t>(y) * w + x]; }
    size_t count() const {
        size_t n = 0;
        for (uint8_t b : v) n += (b != 0);
        return n;
    }
};

// Real-valued H x W map (entropy maps, distance fields, ...).
struct ScalarMap {
    int h = 0, w = 0;
    std::vector<double> v;

    ScalarMap() = default;
    ScalarMap(int h_, int w_, double fill = 0.0)
        : h(h_), w(w_), v(static_cast<size_t>(h_) * w_, fill) {}

    double& at(int y, int x) { return v[static_cast<size_t>(y) * w + x]; }
    double at(int y, int x) const { return v[static_cast<size_t>(y) * w + x]; }
};

// Bilinear resize with half-pixel-aligned sampling and edge clamping.
Tensor bilinear_resize(const Tensor& src, int out_h, int out_w);

// Adjoint of bilinear_resize: scatters an output-sized gradient back onto a
// source-sized gradient (accumulates into dst, which must be pre-shaped).
void bilinear_resize_backward(const Tensor& dout, int src_h, int src_w, Tensor& dsrc);

// Nearest-neighbor resize; the only legal resize for label rasters.
LabelMap nearest_resize(const LabelMap& src, int out_h, int out_w);

// Per-pixel argmax over the class axis.
LabelMap argmax_labels(const Tensor& logits);

// Softmax along the class axis at one pixel; writes `out[c]`.
void softmax_at(const Tensor& logits, int y, int x, double* out);

// Full softmax tensor (class axis). Prefer softmax_at in hot paths.
Tensor softmax(const Tensor& logits);

}  // namespace omnipatch
