#pragma once

// Internal building blocks for the toy segmenters: plain dense layers with
// explicit forward/backward, double precision, no threading. Backward always
// produces input gradients; weight gradients are accumulated only when a
// gradient buffer is supplied (pretraining path).

#include <cmath>
#include <vector>

#include "omnipatch/rng.hpp"
#include "omnipatch/tensor.hpp"

namespace omnipatch::nn {

struct Conv2d {
    int in_c = 0, out_c = 0, k = 1, stride = 1, pad = 0;
    std::vector<double> w;  // [out][in][k][k]
    std::vector<double> b;  // [out]

    void configure(int in, int out, int kk, int s, int p) {
        in_c = in;
        out_c = out;
        k = kk;
        stride = s;
        pad = p;
        w.assign(static_cast<size_t>(out) * in * kk * kk, 0.0);
        b.assign(out, 0.0);
    }

    void init(Rng& rng) {
        double scale = 1.0 / std::sqrt(static_cast<double>(in_c) * k * k);
        for (double& x : w) x = rng.normal() * scale;
        for (double& x : b) x = rng.normal() * 0.01;
    }

    int out_h(int h) const { return (h + 2 * pad - k) / stride + 1; }
    int out_w(int wd) const { return (wd + 2 * pad - k) / stride + 1; }

    double wat(int o, int i, int ky, int kx) const {
        return w[((static_cast<size_t>(o) * in_c + i) * k + ky) * k + kx];
    }

    // Valid output-column range for a kernel column: 0 <= ox*stride+kx-pad < W.
    void ox_range(int kx, int in_w, int out_w, int& lo, int& hi) const {
        lo = 0;
        while (lo < out_w && lo * stride + kx - pad < 0) ++lo;
        hi = out_w;
        while (hi > lo && (hi - 1) * stride + kx - pad >= in_w) --hi;
    }

    Tensor forward(const Tensor& x) const {
        int oh = out_h(x.h), ow = out_w(x.w);
        Tensor y(out_c, oh, ow);
        for (int o = 0; o < out_c; ++o) {
            double* yp = y.plane(o);
            for (size_t i = 0; i < static_cast<size_t>(oh) * ow; ++i) yp[i] = b[o];
        }
        for (int o = 0; o < out_c; ++o) {
            double* yp = y.plane(o);
            for (int i = 0; i < in_c; ++i) {
                const double* xp = x.plane(i);
                for (int ky = 0; ky < k; ++ky) {
                    for (int kx = 0; kx < k; ++kx) {
                        double wv = wat(o, i, ky, kx);
                        int lo, hi;
                        ox_range(kx, x.w, ow, lo, hi);
                        for (int oy = 0; oy < oh; ++oy) {
                            int iy = oy * stride + ky - pad;
                            if (iy < 0 || iy >= x.h) continue;
                            const double* xrow = xp + static_cast<size_t>(iy) * x.w + kx - pad;
                            double* yrow = yp + static_cast<size_t>(oy) * ow;
                            if (stride == 1) {
                                for (int ox = lo; ox < hi; ++ox) yrow[ox] += wv * xrow[ox];
                            } else {
                                for (int ox = lo; ox < hi; ++ox)
                                    yrow[ox] += wv * xrow[ox * stride];
                            }
                        }
                    }
                }
            }
        }
        return y;
    }

    // Returns dx; accumulates weight gradients into *grad when non-null.
    Tensor backward(const Tensor& x, const Tensor& dy, Conv2d* grad) const {
        Tensor dx(x.c, x.h, x.w);
        for (int o = 0; o < out_c; ++o) {
            const double* gp = dy.plane(o);
            if (grad) {
                double s = 0.0;
                for (size_t i = 0; i < static_cast<size_t>(dy.h) * dy.w; ++i) s += gp[i];
                grad->b[o] += s;
            }
            for (int i = 0; i < in_c; ++i) {
                const double* xp = x.plane(i);
                double* dxp = dx.plane(i);
                for (int ky = 0; ky < k; ++ky) {
                    for (int kx = 0; kx < k; ++kx) {
                        double wv = wat(o, i, ky, kx);
                        double wsum = 0.0;
                        int lo, hi;
                        ox_range(kx, x.w, dy.w, lo, hi);
                        for (int oy = 0; oy < dy.h; ++oy) {
                            int iy = oy * stride + ky - pad;
                            if (iy < 0 || iy >= x.h) continue;
                            const double* grow = gp + static_cast<size_t>(oy) * dy.w;
                            const double* xrow = xp + static_cast<size_t>(iy) * x.w;
                            double* dxrow = dxp + static_cast<size_t>(iy) * x.w;
                            if (grad) {
                                for (int ox = lo; ox < hi; ++ox) {
                                    int ix = ox * stride + kx - pad;
                                    dxrow[ix] += wv * grow[ox];
                                    wsum += grow[ox] * xrow[ix];
                                }
                            } else {
                                for (int ox = lo; ox < hi; ++ox)
                                    dxrow[ox * stride + kx - pad] += wv * grow[ox];
                            }
                        }
                        if (grad)
                            grad->w[((static_cast<size_t>(o) * in_c + i) * k + ky) * k + kx] += wsum;
                    }
                }
            }
        }
        return dx;
    }
};

inline void tanh_inplace(Tensor& t) {
    for (double& v : t.v) v = std::tanh(v);
}

// dx = dy * (1 - y^2), given the cached tanh output y.
inline void tanh_backward_inplace(const Tensor& y, Tensor& dy) {
    for (size_t i = 0; i < y.size(); ++i) dy.v[i] *= (1.0 - y.v[i] * y.v[i]);
}

// Row-major matrix of doubles, rows x cols.
struct Mat {
    int rows = 0, cols = 0;
    std::vector<double> v;

    Mat() = default;
    Mat(int r, int c, double fill = 0.0) : rows(r), cols(c), v(static_cast<size_t>(r) * c, fill) {}
    double* row(int r) { return v.data() + static_cast<size_t>(r) * cols; }
    const double* row(int r) const { return v.data() + static_cast<size_t>(r) * cols; }
    double& at(int r, int c) { return v[static_cast<size_t>(r) * cols + c]; }
    double at(int r, int c) const { return v[static_cast<size_t>(r) * cols + c]; }
    void zero() { std::fill(v.begin(), v.end(), 0.0); }
};

// C += A * B
inline void matmul_acc(const Mat& a, const Mat& b, Mat& c) {
    for (int i = 0; i < a.rows; ++i) {
        const double* ar = a.row(i);
        double* cr = c.row(i);
        for (int kk = 0; kk < a.cols; ++kk) {
            double av = ar[kk];
            if (av == 0.0) continue;
            const double* br = b.row(kk);
            for (int j = 0; j < b.cols; ++j) cr[j] += av * br[j];
        }
    }
}

// C += A^T * B
inline void matmul_at_b_acc(const Mat& a, const Mat& b, Mat& c) {
    for (int kk = 0; kk < a.rows; ++kk) {
        const double* ar = a.row(kk);
        const double* br = b.row(kk);
        for (int i = 0; i < a.cols; ++i) {
            double av = ar[i];
            if (av == 0.0) continue;
            double* cr = c.row(i);
            for (int j = 0; j < b.cols; ++j) cr[j] += av * br[j];
        }
    }
}

// C += A * B^T
inline void matmul_a_bt_acc(const Mat& a, const Mat& b, Mat& c) {
    for (int i = 0; i < a.rows; ++i) {
        const double* ar = a.row(i);
        double* cr = c.row(i);
        for (int j = 0; j < b.rows; ++j) {
            const double* br = b.row(j);
            double s = 0.0;
            for (int kk = 0; kk < a.cols; ++kk) s += ar[kk] * br[kk];
            cr[j] += s;
        }
    }
}

// Dense layer y = x * W^T + b with W stored [out][in].
struct Linear {
    int in = 0, out = 0;
    Mat w;
    std::vector<double> b;

    void configure(int in_, int out_) {
        in = in_;
        out = out_;
        w = Mat(out_, in_);
        b.assign(out_, 0.0);
    }

    void init(Rng& rng) {
        double scale = 1.0 / std::sqrt(static_cast<double>(in));
        for (double& x : w.v) x = rng.normal() * scale;
        for (double& x : b) x = rng.normal() * 0.01;
    }

    Mat forward(const Mat& x) const {
        Mat y(x.rows, out);
        for (int r = 0; r < x.rows; ++r) {
            const double* xr = x.row(r);
            double* yr = y.row(r);
            for (int o = 0; o < out; ++o) {
                const double* wr = w.row(o);
                double s = b[o];
                for (int i = 0; i < in; ++i) s += wr[i] * xr[i];
                yr[o] = s;
            }
        }
        return y;
    }

    Mat backward(const Mat& x, const Mat& dy, Linear* grad) const {
        Mat dx(x.rows, in);
        matmul_acc(dy, w, dx);  // dx = dy * W
        if (grad) {
            matmul_at_b_acc(dy, x, grad->w);  // dW += dy^T * x
            for (int r = 0; r < dy.rows; ++r) {
                const double* dr = dy.row(r);
                for (int o = 0; o < out; ++o) grad->b[o] += dr[o];
            }
        }
        return dx;
    }
};

// LayerNorm over the feature (column) axis with affine parameters.
struct LayerNorm {
    static constexpr double kEps = 1e-5;
    int dim = 0;
    std::vector<double> gain, bias;

    void configure(int d) {
        dim = d;
        gain.assign(d, 1.0);
        bias.assign(d, 0.0);
    }

    struct Cache {
        Mat xhat;                   // normalized input
        std::vector<double> inv_sigma;  // per row
    };

    Mat forward(const Mat& x, Cache& cache) const {
        Mat y(x.rows, dim);
        cache.xhat = Mat(x.rows, dim);
        cache.inv_sigma.assign(x.rows, 0.0);
        for (int r = 0; r < x.rows; ++r) {
            const double* xr = x.row(r);
            double mu = 0.0;
            for (int i = 0; i < dim; ++i) mu += xr[i];
            mu /= dim;
            double var = 0.0;
            for (int i = 0; i < dim; ++i) var += (xr[i] - mu) * (xr[i] - mu);
            var /= dim;
            double inv = 1.0 / std::sqrt(var + kEps);
            cache.inv_sigma[r] = inv;
            double* hr = cache.xhat.row(r);
            double* yr = y.row(r);
            for (int i = 0; i < dim; ++i) {
                hr[i] = (xr[i] - mu) * inv;
                yr[i] = gain[i] * hr[i] + bias[i];
            }
        }
        return y;
    }

    Mat backward(const Cache& cache, const Mat& dy, LayerNorm* grad) const {
        Mat dx(dy.rows, dim);
        for (int r = 0; r < dy.rows; ++r) {
            const double* dr = dy.row(r);
            const double* hr = cache.xhat.row(r);
            double inv = cache.inv_sigma[r];
            double mean_h = 0.0, mean_hx = 0.0;
            for (int i = 0; i < dim; ++i) {
                double hg = dr[i] * gain[i];
                mean_h += hg;
                mean_hx += hg * hr[i];
            }
            mean_h /= dim;
            mean_hx /= dim;
            double* dxr = dx.row(r);
            for (int i = 0; i < dim; ++i) {
                double hg = dr[i] * gain[i];
                dxr[i] = inv * (hg - mean_h - hr[i] * mean_hx);
            }
            if (grad) {
                for (int i = 0; i < dim; ++i) {
                    grad->gain[i] += dr[i] * hr[i];
                    grad->bias[i] += dr[i];
                }
            }
        }
        return dx;
    }
};

// Row-wise softmax; returns the probabilities.
inline Mat softmax_rows(const Mat& s) {
    Mat p(s.rows, s.cols);
    for (int r = 0; r < s.rows; ++r) {
        const double* sr = s.row(r);
        double* pr = p.row(r);
        double mx = sr[0];
        for (int j = 1; j < s.cols; ++j) mx = std::max(mx, sr[j]);
        double sum = 0.0;
        for (int j = 0; j < s.cols; ++j) {
            pr[j] = std::exp(sr[j] - mx);
            sum += pr[j];
        }
        for (int j = 0; j < s.cols; ++j) pr[j] /= sum;
    }
    return p;
}

// ds for y = softmax_rows(s): ds_i = y_i * (dy_i - sum_j dy_j y_j), per row.
inline Mat softmax_rows_backward(const Mat& y, const Mat& dy) {
    Mat ds(y.rows, y.cols);
    for (int r = 0; r < y.rows; ++r) {
        const double* yr = y.row(r);
        const double* dr = dy.row(r);
        double dot = 0.0;
        for (int j = 0; j < y.cols; ++j) dot += dr[j] * yr[j];
        double* dsr = ds.row(r);
        for (int j = 0; j < y.cols; ++j) dsr[j] = yr[j] * (dr[j] - dot);
    }
    return ds;
}

}  // namespace omnipatch::nn
