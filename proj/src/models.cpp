#include "omnipatch/models.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include <json.hpp>

#include "nn_layers.hpp"
#include "omnipatch/errors.hpp"
#include "omnipatch/rng.hpp"

namespace omnipatch {

using nn::Conv2d;
using nn::LayerNorm;
using nn::Linear;
using nn::Mat;

std::string to_string(ModelFamily f) { return f == ModelFamily::vit ? "vit" : "cnn"; }

Surrogate::Surrogate(std::string name, ModelFamily family, double downscale, int num_classes)
    : name_(std::move(name)), family_(family), downscale_(downscale), num_classes_(num_classes) {
    if (downscale_ <= 0.0 || downscale_ > 1.0)
        throw ConfigError("surrogate: input_downscale must lie in (0,1]");
}

ModelOutput Surrogate::forward(const Tensor& image) const {
    return forward_with_grad(image)->output();
}

void Surrogate::pretrain(const std::vector<SegmentationSample>&, int, double, uint64_t) {
    throw ContractError("pretrain: only toy models support pretraining");
}

void Surrogate::save_weights(const std::filesystem::path&) const {
    throw ContractError("save_weights: only toy models can be serialized");
}

namespace {

int scaled_dim(int full, double ds) { return std::max(1, static_cast<int>(std::llround(full * ds))); }

// Mean cross-entropy over valid pixels and its logit gradient; pretraining
// helper, independent of the attack losses.
double ce_grad(const Tensor& logits, const LabelMap& labels, int ignore_value, Tensor& dlogits) {
    int C = logits.c;
    std::vector<double> probs(C);
    double total = 0.0;
    size_t n_valid = 0;
    for (int y = 0; y < logits.h; ++y)
        for (int x = 0; x < logits.w; ++x)
            if (labels.at(y, x) != ignore_value) ++n_valid;
    if (n_valid == 0) return 0.0;
    for (int y = 0; y < logits.h; ++y) {
        for (int x = 0; x < logits.w; ++x) {
            int32_t lab = labels.at(y, x);
            if (lab == ignore_value) continue;
            softmax_at(logits, y, x, probs.data());
            total -= std::log(probs[lab] + 1e-12);
            for (int ci = 0; ci < C; ++ci) {
                double ind = (ci == lab) ? 1.0 : 0.0;
                dlogits.at(ci, y, x) += (probs[ci] - ind) / static_cast<double>(n_valid);
            }
        }
    }
    return total / static_cast<double>(n_valid);
}

// ---------------------------------------------------------------------------
// Toy CNN: encoder-decoder, tanh activations, all dims preserved end to end.
// ---------------------------------------------------------------------------

struct CnnWeights {
    Conv2d c0, c1, c2, c3, c4;

    void configure(int ch, int classes) {
        c0.configure(3, ch, 3, 1, 1);
        c1.configure(ch, 2 * ch, 3, 2, 1);
        c2.configure(2 * ch, 2 * ch, 3, 1, 1);
        c3.configure(2 * ch, ch, 3, 1, 1);
        c4.configure(ch, classes, 1, 1, 0);
    }

    void init(Rng& rng) {
        c0.init(rng);
        c1.init(rng);
        c2.init(rng);
        c3.init(rng);
        c4.init(rng);
    }

    template <typename F>
    void for_each(F&& f) {
        f(c0);
        f(c1);
        f(c2);
        f(c3);
        f(c4);
    }
};

class ToyCnn final : public Surrogate {
public:
    ToyCnn(int channels, int num_classes, uint64_t seed, double downscale)
        : Surrogate("toy_cnn_c" + std::to_string(channels) + "_s" + std::to_string(seed),
                    ModelFamily::cnn, downscale, num_classes),
          channels_(channels),
          seed_(seed) {
        if (channels <= 0) throw ConfigError("make_toy_cnn: channels must be positive");
        if (num_classes < 2) throw ConfigError("make_toy_cnn: need at least 2 classes");
        w_.configure(channels, num_classes);
        Rng rng(mix_seed(seed, 0xc44ULL));
        w_.init(rng);
    }

    class Pass final : public ForwardPass {
    public:
        Pass(const ToyCnn& m, const Tensor& image) : m_(m), in_h_(image.h), in_w_(image.w) {
            int ih = scaled_dim(image.h, m.input_downscale());
            int iw = scaled_dim(image.w, m.input_downscale());
            x0_ = bilinear_resize(image, ih, iw);
            a0_ = m.w_.c0.forward(x0_);
            nn::tanh_inplace(a0_);
            a1_ = m.w_.c1.forward(a0_);
            nn::tanh_inplace(a1_);
            a2_ = m.w_.c2.forward(a1_);
            nn::tanh_inplace(a2_);
            up_ = bilinear_resize(a2_, ih, iw);
            a3_ = m.w_.c3.forward(up_);
            nn::tanh_inplace(a3_);
            Tensor logits_int = m.w_.c4.forward(a3_);
            out_.logits = bilinear_resize(logits_int, image.h, image.w);
            out_.internal_h = ih;
            out_.internal_w = iw;
            out_.output_scale = 1.0;
        }

        const ModelOutput& output() const override { return out_; }

        Tensor backward(const BackwardSeed& seed) const override {
            return backward_impl(seed, nullptr);
        }

        Tensor backward_impl(const BackwardSeed& seed, CnnWeights* grads) const {
            if (seed.dattention) throw ContractError("toy_cnn: no attention to seed");
            if (!seed.dlogits) throw ContractError("toy_cnn: backward needs a logits seed");
            int ih = out_.internal_h, iw = out_.internal_w;
            Tensor dlogits_int(m_.num_classes(), ih, iw);
            bilinear_resize_backward(*seed.dlogits, ih, iw, dlogits_int);
            Tensor da3 = m_.w_.c4.backward(a3_, dlogits_int, grads ? &grads->c4 : nullptr);
            nn::tanh_backward_inplace(a3_, da3);
            Tensor dup = m_.w_.c3.backward(up_, da3, grads ? &grads->c3 : nullptr);
            Tensor da2(a2_.c, a2_.h, a2_.w);
            bilinear_resize_backward(dup, a2_.h, a2_.w, da2);
            nn::tanh_backward_inplace(a2_, da2);
            Tensor da1 = m_.w_.c2.backward(a1_, da2, grads ? &grads->c2 : nullptr);
            nn::tanh_backward_inplace(a1_, da1);
            Tensor da0 = m_.w_.c1.backward(a0_, da1, grads ? &grads->c1 : nullptr);
            nn::tanh_backward_inplace(a0_, da0);
            Tensor dx0 = m_.w_.c0.backward(x0_, da0, grads ? &grads->c0 : nullptr);
            Tensor dimg(3, in_h_, in_w_);
            bilinear_resize_backward(dx0, in_h_, in_w_, dimg);
            return dimg;
        }

    private:
        const ToyCnn& m_;
        int in_h_, in_w_;
        Tensor x0_, a0_, a1_, a2_, up_, a3_;
        ModelOutput out_;
    };

    std::unique_ptr<ForwardPass> forward_with_grad(const Tensor& image) const override {
        return std::make_unique<Pass>(*this, image);
    }

    void pretrain(const std::vector<SegmentationSample>& samples, int epochs, double lr,
                  uint64_t seed) override {
        if (samples.empty()) throw ConfigError("pretrain: empty dataset");
        std::vector<size_t> order(samples.size());
        for (size_t i = 0; i < order.size(); ++i) order[i] = i;
        for (int e = 0; e < epochs; ++e) {
            Rng rng(mix_seed(seed, 0x9727ULL, static_cast<uint64_t>(e)));
            for (size_t i = order.size(); i > 1; --i)
                std::swap(order[i - 1], order[rng.uniform_index(i)]);
            for (size_t idx : order) {
                Pass pass(*this, samples[idx].image);
                const Tensor& logits = pass.output().logits;
                Tensor dlogits(logits.c, logits.h, logits.w);
                ce_grad(logits, samples[idx].labels, samples[idx].ignore_value, dlogits);
                CnnWeights grads;
                grads.configure(channels_, num_classes());
                BackwardSeed seed_grad;
                seed_grad.dlogits = &dlogits;
                pass.backward_impl(seed_grad, &grads);
                auto* gp = &grads;
                w_.for_each([&](Conv2d& layer) {
                    Conv2d* g = nullptr;
                    if (&layer == &w_.c0) g = &gp->c0;
                    if (&layer == &w_.c1) g = &gp->c1;
                    if (&layer == &w_.c2) g = &gp->c2;
                    if (&layer == &w_.c3) g = &gp->c3;
                    if (&layer == &w_.c4) g = &gp->c4;
                    for (size_t j = 0; j < layer.w.size(); ++j) layer.w[j] -= lr * g->w[j];
                    for (size_t j = 0; j < layer.b.size(); ++j) layer.b[j] -= lr * g->b[j];
                });
            }
        }
    }

    void save_weights(const std::filesystem::path& path) const override;

    int channels() const { return channels_; }
    const CnnWeights& weights() const { return w_; }
    CnnWeights& weights() { return w_; }

private:
    int channels_;
    uint64_t seed_;
    CnnWeights w_;
};

// ---------------------------------------------------------------------------
// Toy ViT: tokenizer + pre-LN transformer blocks with single-head attention.
// Positional encoding is fixed 2D sinusoidal so any token grid works.
// ---------------------------------------------------------------------------

struct VitBlock {
    LayerNorm ln1, ln2;
    Linear wq, wk, wv, wo, mlp1, mlp2;

    void configure(int d) {
        ln1.configure(d);
        ln2.configure(d);
        wq.configure(d, d);
        wk.configure(d, d);
        wv.configure(d, d);
        wo.configure(d, d);
        mlp1.configure(d, 2 * d);
        mlp2.configure(2 * d, d);
    }

    void init(Rng& rng) {
        wq.init(rng);
        wk.init(rng);
        wv.init(rng);
        wo.init(rng);
        mlp1.init(rng);
        mlp2.init(rng);
    }
};

struct VitWeights {
    Linear embed;
    std::vector<VitBlock> blocks;
    LayerNorm ln_f;
    Linear cls;

    void configure(int token_dim, int d, int layers, int classes) {
        embed.configure(token_dim, d);
        blocks.resize(layers);
        for (auto& blk : blocks) blk.configure(d);
        ln_f.configure(d);
        cls.configure(d, classes);
    }

    void init(Rng& rng) {
        embed.init(rng);
        for (auto& blk : blocks) blk.init(rng);
        cls.init(rng);
    }
};

void add_positional_encoding(Mat& x, int gh, int gw) {
    int d = x.cols;
    int half = d / 2;
    for (int gy = 0; gy < gh; ++gy) {
        for (int gx = 0; gx < gw; ++gx) {
            double* row = x.row(gy * gw + gx);
            for (int i = 0; i < d; ++i) {
                int axis_i = (i < half) ? i : i - half;
                double pos = (i < half) ? gy : gx;
                double denom = std::pow(10000.0, (2.0 * (axis_i / 2)) / half);
                double v = (axis_i % 2 == 0) ? std::sin(pos / denom) : std::cos(pos / denom);
                row[i] += 0.5 * v;
            }
        }
    }
}

class ToyVit final : public Surrogate {
public:
    ToyVit(int token, int layers, int num_classes, uint64_t seed, double downscale, int embed_dim)
        : Surrogate("toy_vit_p" + std::to_string(token) + "_l" + std::to_string(layers) + "_s" +
                        std::to_string(seed),
                    ModelFamily::vit, downscale, num_classes),
          token_(token),
          layers_(layers),
          dim_(embed_dim),
          seed_(seed) {
        if (token <= 0) throw ConfigError("make_toy_vit: token size must be positive");
        if (layers <= 0) throw ConfigError("make_toy_vit: layers must be positive");
        if (num_classes < 2) throw ConfigError("make_toy_vit: need at least 2 classes");
        if (embed_dim < 8 || embed_dim % 2 != 0) throw ConfigError("make_toy_vit: bad embed dim");
        w_.configure(3 * token * token, embed_dim, layers, num_classes);
        Rng rng(mix_seed(seed, 0x717ULL));
        w_.init(rng);
    }

    struct BlockCache {
        LayerNorm::Cache ln1c, ln2c;
        Mat x_in;    // block input (residual stream)
        Mat q, k, v, attn, z, x_mid, h1;
    };

    class Pass final : public ForwardPass {
    public:
        Pass(const ToyVit& m, const Tensor& image) : m_(m), in_h_(image.h), in_w_(image.w) {
            int ih = scaled_dim(image.h, m.input_downscale());
            int iw = scaled_dim(image.w, m.input_downscale());
            if (ih % m.token_ != 0 || iw % m.token_ != 0)
                throw ConfigError("toy_vit: internal dims " + std::to_string(ih) + "x" +
                                  std::to_string(iw) + " not divisible by token size " +
                                  std::to_string(m.token_));
            x_img_ = bilinear_resize(image, ih, iw);
            gh_ = ih / m.token_;
            gw_ = iw / m.token_;
            int T = gh_ * gw_;
            int P = m.token_;

            tokens_ = Mat(T, 3 * P * P);
            for (int gy = 0; gy < gh_; ++gy)
                for (int gx = 0; gx < gw_; ++gx) {
                    double* row = tokens_.row(gy * gw_ + gx);
                    int o = 0;
                    for (int ci = 0; ci < 3; ++ci)
                        for (int py = 0; py < P; ++py)
                            for (int px = 0; px < P; ++px)
                                row[o++] = x_img_.at(ci, gy * P + py, gx * P + px);
                }

            Mat x = m.w_.embed.forward(tokens_);
            add_positional_encoding(x, gh_, gw_);

            double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(m.dim_));
            caches_.resize(m.layers_);
            for (int l = 0; l < m.layers_; ++l) {
                BlockCache& cc = caches_[l];
                const VitBlock& blk = m.w_.blocks[l];
                cc.x_in = x;
                Mat xn = blk.ln1.forward(x, cc.ln1c);
                cc.q = blk.wq.forward(xn);
                cc.k = blk.wk.forward(xn);
                cc.v = blk.wv.forward(xn);
                Mat scores(T, T);
                nn::matmul_a_bt_acc(cc.q, cc.k, scores);
                for (double& s : scores.v) s *= inv_sqrt_d;
                cc.attn = nn::softmax_rows(scores);
                cc.z = Mat(T, m.dim_);
                nn::matmul_acc(cc.attn, cc.v, cc.z);
                Mat attn_out = blk.wo.forward(cc.z);
                for (size_t i = 0; i < x.v.size(); ++i) x.v[i] += attn_out.v[i];
                cc.x_mid = x;
                Mat xn2 = blk.ln2.forward(x, cc.ln2c);
                cc.h1 = blk.mlp1.forward(xn2);
                for (double& v : cc.h1.v) v = std::tanh(v);
                Mat mlp_out = blk.mlp2.forward(cc.h1);
                for (size_t i = 0; i < x.v.size(); ++i) x.v[i] += mlp_out.v[i];
            }
            x_final_ = x;
            Mat xf = m.w_.ln_f.forward(x, lnf_cache_);

            token_logits_ = m.w_.cls.forward(xf);

            Tensor grid(m.num_classes(), gh_, gw_);
            for (int t = 0; t < T; ++t)
                for (int ci = 0; ci < m.num_classes(); ++ci)
                    grid.at(ci, t / gw_, t % gw_) = token_logits_.at(t, ci);
            out_.logits = bilinear_resize(grid, image.h, image.w);
            out_.internal_h = ih;
            out_.internal_w = iw;
            out_.token_grid_h = gh_;
            out_.token_grid_w = gw_;
            out_.output_scale = 1.0;
            out_.attention.reserve(m.layers_);
            for (int l = 0; l < m.layers_; ++l) {
                ScalarMap a(T, T);
                a.v = caches_[l].attn.v;
                out_.attention.push_back(std::move(a));
            }
        }

        const ModelOutput& output() const override { return out_; }

        Tensor backward(const BackwardSeed& seed) const override {
            return backward_impl(seed, nullptr);
        }

        Tensor backward_impl(const BackwardSeed& seed, VitWeights* grads) const {
            int T = gh_ * gw_;
            int P = m_.token_;
            int C = m_.num_classes();
            Mat dtok_logits(T, C);
            if (seed.dlogits) {
                Tensor dgrid(C, gh_, gw_);
                bilinear_resize_backward(*seed.dlogits, gh_, gw_, dgrid);
                for (int t = 0; t < T; ++t)
                    for (int ci = 0; ci < C; ++ci)
                        dtok_logits.at(t, ci) = dgrid.at(ci, t / gw_, t % gw_);
            }
            if (seed.dattention && static_cast<int>(seed.dattention->size()) != m_.layers_)
                throw ContractError("toy_vit: attention seed layer count mismatch");

            Mat xf = m_.w_.ln_f.forward(x_final_, const_cast<LayerNorm::Cache&>(lnf_cache_));
            Mat dxf = m_.w_.cls.backward(xf, dtok_logits, grads ? &grads->cls : nullptr);
            Mat dx = m_.w_.ln_f.backward(lnf_cache_, dxf, grads ? &grads->ln_f : nullptr);

            double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(m_.dim_));
            for (int l = m_.layers_ - 1; l >= 0; --l) {
                const BlockCache& cc = caches_[l];
                const VitBlock& blk = m_.w_.blocks[l];
                VitBlock* bg = grads ? &grads->blocks[l] : nullptr;

                // MLP half: x_out = x_mid + mlp2(tanh(mlp1(ln2(x_mid))))
                Mat dh1 = blk.mlp2.backward(cc.h1, dx, bg ? &bg->mlp2 : nullptr);
                for (size_t i = 0; i < dh1.v.size(); ++i)
                    dh1.v[i] *= (1.0 - cc.h1.v[i] * cc.h1.v[i]);
                Mat xn2 = blk.ln2.forward(cc.x_mid, const_cast<LayerNorm::Cache&>(cc.ln2c));
                Mat dxn2 = blk.mlp1.backward(xn2, dh1, bg ? &bg->mlp1 : nullptr);
                Mat dres = blk.ln2.backward(cc.ln2c, dxn2, bg ? &bg->ln2 : nullptr);
                for (size_t i = 0; i < dx.v.size(); ++i) dx.v[i] += dres.v[i];

                // Attention half: x_mid = x_in + wo(attn @ v)
                Mat dz = blk.wo.backward(cc.z, dx, bg ? &bg->wo : nullptr);
                Mat dattn(T, T);
                nn::matmul_a_bt_acc(dz, cc.v, dattn);
                if (seed.dattention) {
                    const ScalarMap& extra = (*seed.dattention)[l];
                    if (extra.h == T && extra.w == T)
                        for (size_t i = 0; i < dattn.v.size(); ++i) dattn.v[i] += extra.v[i];
                    else if (extra.h != 0 || extra.w != 0)
                        throw ContractError("toy_vit: attention seed shape mismatch");
                }
                Mat dv(T, m_.dim_);
                nn::matmul_at_b_acc(cc.attn, dz, dv);
                Mat dscores = nn::softmax_rows_backward(cc.attn, dattn);
                for (double& s : dscores.v) s *= inv_sqrt_d;
                Mat dq(T, m_.dim_), dk(T, m_.dim_);
                nn::matmul_acc(dscores, cc.k, dq);
                nn::matmul_at_b_acc(dscores, cc.q, dk);
                Mat xn = blk.ln1.forward(cc.x_in, const_cast<LayerNorm::Cache&>(cc.ln1c));
                Mat dxn = blk.wq.backward(xn, dq, bg ? &bg->wq : nullptr);
                Mat dxn_k = blk.wk.backward(xn, dk, bg ? &bg->wk : nullptr);
                Mat dxn_v = blk.wv.backward(xn, dv, bg ? &bg->wv : nullptr);
                for (size_t i = 0; i < dxn.v.size(); ++i) dxn.v[i] += dxn_k.v[i] + dxn_v.v[i];
                Mat dres2 = blk.ln1.backward(cc.ln1c, dxn, bg ? &bg->ln1 : nullptr);
                for (size_t i = 0; i < dx.v.size(); ++i) dx.v[i] += dres2.v[i];
            }

            Mat dtokens = m_.w_.embed.backward(tokens_, dx, grads ? &grads->embed : nullptr);
            Tensor dx_img(3, x_img_.h, x_img_.w);
            for (int gy = 0; gy < gh_; ++gy)
                for (int gx = 0; gx < gw_; ++gx) {
                    const double* row = dtokens.row(gy * gw_ + gx);
                    int o = 0;
                    for (int ci = 0; ci < 3; ++ci)
                        for (int py = 0; py < P; ++py)
                            for (int px = 0; px < P; ++px)
                                dx_img.at(ci, gy * P + py, gx * P + px) = row[o++];
                }
            Tensor dimg(3, in_h_, in_w_);
            bilinear_resize_backward(dx_img, in_h_, in_w_, dimg);
            return dimg;
        }

    private:
        const ToyVit& m_;
        int in_h_, in_w_, gh_ = 0, gw_ = 0;
        Tensor x_img_;
        Mat tokens_, x_final_, token_logits_;
        std::vector<BlockCache> caches_;
        LayerNorm::Cache lnf_cache_;

        ModelOutput out_;
    };

    std::unique_ptr<ForwardPass> forward_with_grad(const Tensor& image) const override {
        return std::make_unique<Pass>(*this, image);
    }

    void pretrain(const std::vector<SegmentationSample>& samples, int epochs, double lr,
                  uint64_t seed) override {
        if (samples.empty()) throw ConfigError("pretrain: empty dataset");
        std::vector<size_t> order(samples.size());
        for (size_t i = 0; i < order.size(); ++i) order[i] = i;
        for (int e = 0; e < epochs; ++e) {
            Rng rng(mix_seed(seed, 0x3b1dULL, static_cast<uint64_t>(e)));
            for (size_t i = order.size(); i > 1; --i)
                std::swap(order[i - 1], order[rng.uniform_index(i)]);
            for (size_t idx : order) {
                Pass pass(*this, samples[idx].image);
                const Tensor& logits = pass.output().logits;
                Tensor dlogits(logits.c, logits.h, logits.w);
                ce_grad(logits, samples[idx].labels, samples[idx].ignore_value, dlogits);
                VitWeights grads;
                grads.configure(3 * token_ * token_, dim_, layers_, num_classes());
                for (auto& blk : grads.blocks) {  // grads for LN affine params start at zero
                    std::fill(blk.ln1.gain.begin(), blk.ln1.gain.end(), 0.0);
                    std::fill(blk.ln2.gain.begin(), blk.ln2.gain.end(), 0.0);
                }
                std::fill(grads.ln_f.gain.begin(), grads.ln_f.gain.end(), 0.0);
                BackwardSeed seed_grad;
                seed_grad.dlogits = &dlogits;
                pass.backward_impl(seed_grad, &grads);
                sgd_step(grads, lr);
            }
        }
    }

    void save_weights(const std::filesystem::path& path) const override;

    int token_size() const { return token_; }
    int layers() const { return layers_; }
    int embed_dim() const { return dim_; }
    const VitWeights& weights() const { return w_; }
    VitWeights& weights() { return w_; }

private:
    void sgd_step(const VitWeights& g, double lr) {
        auto upd_lin = [lr](Linear& layer, const Linear& gl) {
            for (size_t i = 0; i < layer.w.v.size(); ++i) layer.w.v[i] -= lr * gl.w.v[i];
            for (size_t i = 0; i < layer.b.size(); ++i) layer.b[i] -= lr * gl.b[i];
        };
        auto upd_ln = [lr](LayerNorm& layer, const LayerNorm& gl) {
            for (size_t i = 0; i < layer.gain.size(); ++i) layer.gain[i] -= lr * gl.gain[i];
            for (size_t i = 0; i < layer.bias.size(); ++i) layer.bias[i] -= lr * gl.bias[i];
        };
        upd_lin(w_.embed, g.embed);
        for (int l = 0; l < layers_; ++l) {
            upd_lin(w_.blocks[l].wq, g.blocks[l].wq);
            upd_lin(w_.blocks[l].wk, g.blocks[l].wk);
            upd_lin(w_.blocks[l].wv, g.blocks[l].wv);
            upd_lin(w_.blocks[l].wo, g.blocks[l].wo);
            upd_lin(w_.blocks[l].mlp1, g.blocks[l].mlp1);
            upd_lin(w_.blocks[l].mlp2, g.blocks[l].mlp2);
            upd_ln(w_.blocks[l].ln1, g.blocks[l].ln1);
            upd_ln(w_.blocks[l].ln2, g.blocks[l].ln2);
        }
        upd_ln(w_.ln_f, g.ln_f);
        upd_lin(w_.cls, g.cls);
    }

    int token_, layers_, dim_;
    uint64_t seed_;
    VitWeights w_;
};

// ---------------------------------------------------------------------------
// Serialization
// ---------------------------------------------------------------------------

using json = nlohmann::json;

json conv_to_json(const Conv2d& c) { return json{{"w", c.w}, {"b", c.b}}; }

void conv_from_json(const json& j, Conv2d& c) {
    std::vector<double> w = j.at("w").get<std::vector<double>>();
    std::vector<double> b = j.at("b").get<std::vector<double>>();
    if (w.size() != c.w.size() || b.size() != c.b.size())
        throw IoError("adapter weights: conv tensor size mismatch");
    c.w = std::move(w);
    c.b = std::move(b);
}

json linear_to_json(const Linear& l) { return json{{"w", l.w.v}, {"b", l.b}}; }

void linear_from_json(const json& j, Linear& l) {
    std::vector<double> w = j.at("w").get<std::vector<double>>();
    std::vector<double> b = j.at("b").get<std::vector<double>>();
    if (w.size() != l.w.v.size() || b.size() != l.b.size())
        throw IoError("adapter weights: linear tensor size mismatch");
    l.w.v = std::move(w);
    l.b = std::move(b);
}

json ln_to_json(const LayerNorm& l) { return json{{"gain", l.gain}, {"bias", l.bias}}; }

void ln_from_json(const json& j, LayerNorm& l) {
    std::vector<double> g = j.at("gain").get<std::vector<double>>();
    std::vector<double> b = j.at("bias").get<std::vector<double>>();
    if (g.size() != l.gain.size() || b.size() != l.bias.size())
        throw IoError("adapter weights: layernorm size mismatch");
    l.gain = std::move(g);
    l.bias = std::move(b);
}

constexpr const char* kWeightsFormat = "omnipatch-weights-v1";

}  // namespace

void ToyCnn::save_weights(const std::filesystem::path& path) const {
    json j;
    j["format"] = kWeightsFormat;
    j["architecture"] = "toy_cnn";
    j["channels"] = channels_;
    j["num_classes"] = num_classes();
    j["tensors"] =
        json{{"c0", conv_to_json(w_.c0)}, {"c1", conv_to_json(w_.c1)}, {"c2", conv_to_json(w_.c2)},
             {"c3", conv_to_json(w_.c3)}, {"c4", conv_to_json(w_.c4)}};
    std::ofstream out(path);
    if (!out) throw IoError("save_weights: cannot open " + path.string());
    out << j.dump();
}

void ToyVit::save_weights(const std::filesystem::path& path) const {
    json j;
    j["format"] = kWeightsFormat;
    j["architecture"] = "toy_vit";
    j["token_size"] = token_;
    j["layers"] = layers_;
    j["embed_dim"] = dim_;
    j["num_classes"] = num_classes();
    json tensors;
    tensors["embed"] = linear_to_json(w_.embed);
    tensors["ln_f"] = ln_to_json(w_.ln_f);
    tensors["cls"] = linear_to_json(w_.cls);
    for (int l = 0; l < layers_; ++l) {
        const VitBlock& blk = w_.blocks[l];
        tensors["block" + std::to_string(l)] =
            json{{"ln1", ln_to_json(blk.ln1)}, {"ln2", ln_to_json(blk.ln2)},
                 {"wq", linear_to_json(blk.wq)}, {"wk", linear_to_json(blk.wk)},
                 {"wv", linear_to_json(blk.wv)}, {"wo", linear_to_json(blk.wo)},
                 {"mlp1", linear_to_json(blk.mlp1)}, {"mlp2", linear_to_json(blk.mlp2)}};
    }
    j["tensors"] = std::move(tensors);
    std::ofstream out(path);
    if (!out) throw IoError("save_weights: cannot open " + path.string());
    out << j.dump();
}

std::shared_ptr<Surrogate> make_toy_cnn(int channels, int num_classes, uint64_t seed,
                                        double downscale) {
    return std::make_shared<ToyCnn>(channels, num_classes, seed, downscale);
}

std::shared_ptr<Surrogate> make_toy_vit(int patch_token_size, int layers, int num_classes,
                                        uint64_t seed, double downscale, int embed_dim) {
    return std::make_shared<ToyVit>(patch_token_size, layers, num_classes, seed, downscale,
                                    embed_dim);
}

namespace {

std::shared_ptr<Surrogate> load_weights_file(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("adapter: cannot open weights file " + path.string());
    json j;
    try {
        in >> j;
    } catch (const json::exception& e) {
        throw IoError("adapter: corrupt weights file " + path.string() + ": " + e.what());
    }
    try {
        if (j.at("format").get<std::string>() != kWeightsFormat)
            throw IoError("adapter: unknown weights format in " + path.string());
        std::string arch = j.at("architecture").get<std::string>();
        const json& tensors = j.at("tensors");
        if (arch == "toy_cnn") {
            auto model = std::make_shared<ToyCnn>(j.at("channels").get<int>(),
                                                  j.at("num_classes").get<int>(), 0, 1.0);
            conv_from_json(tensors.at("c0"), model->weights().c0);
            conv_from_json(tensors.at("c1"), model->weights().c1);
            conv_from_json(tensors.at("c2"), model->weights().c2);
            conv_from_json(tensors.at("c3"), model->weights().c3);
            conv_from_json(tensors.at("c4"), model->weights().c4);
            return model;
        }
        if (arch == "toy_vit") {
            auto model = std::make_shared<ToyVit>(
                j.at("token_size").get<int>(), j.at("layers").get<int>(),
                j.at("num_classes").get<int>(), 0, 1.0, j.at("embed_dim").get<int>());
            linear_from_json(tensors.at("embed"), model->weights().embed);
            ln_from_json(tensors.at("ln_f"), model->weights().ln_f);
            linear_from_json(tensors.at("cls"), model->weights().cls);
            for (int l = 0; l < model->layers(); ++l) {
                const json& bj = tensors.at("block" + std::to_string(l));
                VitBlock& blk = model->weights().blocks[l];
                ln_from_json(bj.at("ln1"), blk.ln1);
                ln_from_json(bj.at("ln2"), blk.ln2);
                linear_from_json(bj.at("wq"), blk.wq);
                linear_from_json(bj.at("wk"), blk.wk);
                linear_from_json(bj.at("wv"), blk.wv);
                linear_from_json(bj.at("wo"), blk.wo);
                linear_from_json(bj.at("mlp1"), blk.mlp1);
                linear_from_json(bj.at("mlp2"), blk.mlp2);
            }
            return model;
        }
        throw IoError("adapter: unknown architecture '" + arch + "' in " + path.string());
    } catch (const json::exception& e) {
        throw IoError("adapter: corrupt weights file " + path.string() + ": " + e.what());
    }
}

class AdapterSurrogate final : public Surrogate {
public:
    AdapterSurrogate(std::shared_ptr<Surrogate> inner, ModelFamily family,
                     const AdapterPreproc& pre)
        : Surrogate("adapter(" + inner->name() + ")", family, pre.downscale,
                    inner->num_classes()),
          inner_(std::move(inner)),
          pre_(pre) {
        if (inner_->family() != family)
            throw ContractError("adapter: declared family " + omnipatch::to_string(family) +
                                " does not match loaded architecture (" +
                                omnipatch::to_string(inner_->family()) + ")");
        for (double s : pre_.std)
            if (s <= 0.0) throw ConfigError("adapter: normalization std must be positive");
    }

    class Pass final : public ForwardPass {
    public:
        Pass(const AdapterSurrogate& a, const Tensor& image) : a_(a), in_h_(image.h), in_w_(image.w) {
            int ih = scaled_dim(image.h, a.input_downscale());
            int iw = scaled_dim(image.w, a.input_downscale());
            Tensor x = bilinear_resize(image, ih, iw);
            for (int ci = 0; ci < 3; ++ci) {
                double* p = x.plane(ci);
                for (size_t i = 0; i < static_cast<size_t>(ih) * iw; ++i)
                    p[i] = (p[i] - a.pre_.mean[ci]) / a.pre_.std[ci];
            }
            inner_pass_ = a.inner_->forward_with_grad(x);
            out_ = inner_pass_->output();
            internal_h_ = ih;
            internal_w_ = iw;
            out_.logits = bilinear_resize(out_.logits, image.h, image.w);
            out_.internal_h = ih;
            out_.internal_w = iw;
            out_.output_scale = 1.0;
        }

        const ModelOutput& output() const override { return out_; }

        Tensor backward(const BackwardSeed& seed) const override {
            BackwardSeed inner_seed = seed;
            Tensor dl_int;
            if (seed.dlogits) {
                dl_int = Tensor(out_.logits.c, internal_h_, internal_w_);
                bilinear_resize_backward(*seed.dlogits, internal_h_, internal_w_, dl_int);
                inner_seed.dlogits = &dl_int;
            }
            Tensor dx = inner_pass_->backward(inner_seed);
            for (int ci = 0; ci < 3; ++ci) {
                double* p = dx.plane(ci);
                for (size_t i = 0; i < static_cast<size_t>(dx.h) * dx.w; ++i)
                    p[i] /= a_.pre_.std[ci];
            }
            Tensor dimg(3, in_h_, in_w_);
            bilinear_resize_backward(dx, in_h_, in_w_, dimg);
            return dimg;
        }

    private:
        const AdapterSurrogate& a_;
        int in_h_, in_w_, internal_h_ = 0, internal_w_ = 0;
        std::unique_ptr<ForwardPass> inner_pass_;
        ModelOutput out_;
    };

    std::unique_ptr<ForwardPass> forward_with_grad(const Tensor& image) const override {
        return std::make_unique<Pass>(*this, image);
    }

private:
    std::shared_ptr<Surrogate> inner_;
    AdapterPreproc pre_;
};

}  // namespace

std::shared_ptr<Surrogate> make_external_adapter(const std::filesystem::path& weights_path,
                                                 ModelFamily family, const AdapterPreproc& pre) {
    if (!std::filesystem::exists(weights_path))
        throw IoError("adapter: weights file not found: " + weights_path.string());
    return std::make_shared<AdapterSurrogate>(load_weights_file(weights_path), family, pre);
}

std::shared_ptr<Surrogate> load_adapter_config(const std::filesystem::path& config_path) {
    std::ifstream in(config_path);
    if (!in) throw IoError("adapter config: cannot open " + config_path.string());
    json j;
    try {
        in >> j;
    } catch (const json::exception& e) {
        throw IoError("adapter config: parse error: " + std::string(e.what()));
    }
    try {
        std::string arch = j.at("architecture").get<std::string>();
        std::string family_s = j.at("family").get<std::string>();
        if (family_s != "vit" && family_s != "cnn")
            throw ConfigError("adapter config: family must be vit or cnn");
        AdapterPreproc pre;
        pre.downscale = j.value("downscale", 1.0);
        if (j.contains("mean")) pre.mean = j.at("mean").get<std::array<double, 3>>();
        if (j.contains("std")) pre.std = j.at("std").get<std::array<double, 3>>();
        std::filesystem::path wpath = j.at("weights").get<std::string>();
        if (wpath.is_relative()) wpath = config_path.parent_path() / wpath;
        auto handle = make_external_adapter(
            wpath, family_s == "vit" ? ModelFamily::vit : ModelFamily::cnn, pre);
        std::ifstream win(wpath);
        json wj;
        win >> wj;
        if (wj.at("architecture").get<std::string>() != arch)
            throw ContractError("adapter config: declared architecture '" + arch +
                                "' does not match weights file");
        return handle;
    } catch (const json::exception& e) {
        throw IoError("adapter config: missing field: " + std::string(e.what()));
    }
}

}  // namespace omnipatch
