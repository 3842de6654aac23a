#include "omnipatch/tensor.hpp"

#include <algorithm>
#include <cmath>

namespace omnipatch {

namespace {

struct LinCoef {
    int i0, i1;
    double w0, w1;
};

// Half-pixel convention: output sample x maps to (x + 0.5) * scale - 0.5 in
// source coordinates, clamped to the valid range.
inline LinCoef lin_coef(int x, int out_n, int src_n) {
    double scale = static_cast<double>(src_n) / out_n;
    double s = (x + 0.5) * scale - 0.5;
    if (s < 0.0) s = 0.0;
    if (s > src_n - 1) s = src_n - 1;
    int i0 = static_cast<int>(std::floor(s));
    int i1 = std::min(i0 + 1, src_n - 1);
    double f = s - i0;
    return {i0, i1, 1.0 - f, f};
}

}  // namespace

Tensor bilinear_resize(const Tensor& src, int out_h, int out_w) {
    if (out_h <= 0 || out_w <= 0) throw ConfigError("bilinear_resize: non-positive output size");
    if (src.h == out_h && src.w == out_w) return src;
    Tensor dst(src.c, out_h, out_w);
    std::vector<LinCoef> xs(out_w);
    for (int x = 0; x < out_w; ++x) xs[x] = lin_coef(x, out_w, src.w);
    for (int ci = 0; ci < src.c; ++ci) {
        const double* sp = src.plane(ci);
        double* dp = dst.plane(ci);
        for (int y = 0; y < out_h; ++y) {
            LinCoef yc = lin_coef(y, out_h, src.h);
            const double* r0 = sp + static_cast<size_t>(yc.i0) * src.w;
            const double* r1 = sp + static_cast<size_t>(yc.i1) * src.w;
            double* out = dp + static_cast<size_t>(y) * out_w;
            for (int x = 0; x < out_w; ++x) {
                const LinCoef& xc = xs[x];
                out[x] = yc.w0 * (xc.w0 * r0[xc.i0] + xc.w1 * r0[xc.i1]) +
                         yc.w1 * (xc.w0 * r1[xc.i0] + xc.w1 * r1[xc.i1]);
            }
        }
    }
    return dst;
}

void bilinear_resize_backward(const Tensor& dout, int src_h, int src_w, Tensor& dsrc) {
    if (dsrc.c != dout.c || dsrc.h != src_h || dsrc.w != src_w)
        throw ContractError("bilinear_resize_backward: gradient buffer shape mismatch");
    if (dout.h == src_h && dout.w == src_w) {
        for (size_t i = 0; i < dout.size(); ++i) dsrc.v[i] += dout.v[i];
        return;
    }
    std::vector<LinCoef> xs(dout.w);
    for (int x = 0; x < dout.w; ++x) xs[x] = lin_coef(x, dout.w, src_w);
    for (int ci = 0; ci < dout.c; ++ci) {
        const double* gp = dout.plane(ci);
        double* dp = dsrc.plane(ci);
        for (int y = 0; y < dout.h; ++y) {
            LinCoef yc = lin_coef(y, dout.h, src_h);
            double* r0 = dp + static_cast<size_t>(yc.i0) * src_w;
            double* r1 = dp + static_cast<size_t>(yc.i1) * src_w;
            const double* g = gp + static_cast<size_t>(y) * dout.w;
            for (int x = 0; x < dout.w; ++x) {
                const LinCoef& xc = xs[x];
                r0[xc.i0] += yc.w0 * xc.w0 * g[x];
                r0[xc.i1] += yc.w0 * xc.w1 * g[x];
                r1[xc.i0] += yc.w1 * xc.w0 * g[x];
                r1[xc.i1] += yc.w1 * xc.w1 * g[x];
            }
        }
    }
}

LabelMap nearest_resize(const LabelMap& src, int out_h, int out_w) {
    if (out_h <= 0 || out_w <= 0) throw ConfigError("nearest_resize: non-positive output size");
    if (src.h == out_h && src.w == out_w) return src;
    LabelMap dst(out_h, out_w);
    double sy = static_cast<double>(src.h) / out_h;
    double sx = static_cast<double>(src.w) / out_w;
    for (int y = 0; y < out_h; ++y) {
        int iy = std::min(static_cast<int>((y + 0.5) * sy), src.h - 1);
        for (int x = 0; x < out_w; ++x) {
            int ix = std::min(static_cast<int>((x + 0.5) * sx), src.w - 1);
            dst.at(y, x) = src.at(iy, ix);
        }
    }
    return dst;
}

LabelMap argmax_labels(const Tensor& logits) {
    LabelMap out(logits.h, logits.w);
    for (int y = 0; y < logits.h; ++y) {
        for (int x = 0; x < logits.w; ++x) {
            int best = 0;
            double bv = logits.at(0, y, x);
            for (int ci = 1; ci < logits.c; ++ci) {
                double val = logits.at(ci, y, x);
                if (val > bv) {
                    bv = val;
                    best = ci;
                }
            }
            out.at(y, x) = best;
        }
    }
    return out;
}

void softmax_at(const Tensor& logits, int y, int x, double* out) {
    int C = logits.c;
    double mx = logits.at(0, y, x);
    for (int ci = 1; ci < C; ++ci) mx = std::max(mx, logits.at(ci, y, x));
    double sum = 0.0;
    for (int ci = 0; ci < C; ++ci) {
        out[ci] = std::exp(logits.at(ci, y, x) - mx);
        sum += out[ci];
    }
    for (int ci = 0; ci < C; ++ci) out[ci] /= sum;
}

Tensor softmax(const Tensor& logits) {
    Tensor out(logits.c, logits.h, logits.w);
    std::vector<double> buf(logits.c);
    for (int y = 0; y < logits.h; ++y) {
        for (int x = 0; x < logits.w; ++x) {
            softmax_at(logits, y, x, buf.data());
            for (int ci = 0; ci < logits.c; ++ci) out.at(ci, y, x) = buf[ci];
        }
    }
    return out;
}

}  // namespace omnipatch
