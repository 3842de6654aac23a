#include "omnipatch/losses.hpp"

#include <algorithm>
#include <cmath>

namespace omnipatch {

namespace {

constexpr double kEps = 1e-12;
constexpr double kInf = 1e20;

// Per-pixel cross-entropy of logits against a label: logsumexp - logit_y.
double ce_at(const Tensor& logits, int y, int x, int32_t label) {
    double mx = logits.at(0, y, x);
    for (int ci = 1; ci < logits.c; ++ci) mx = std::max(mx, logits.at(ci, y, x));
    double sum = 0.0;
    for (int ci = 0; ci < logits.c; ++ci) sum += std::exp(logits.at(ci, y, x) - mx);
    return mx + std::log(sum) - logits.at(label, y, x);
}

// d(weight * CE)/dlogits = weight * (softmax - onehot), accumulated.
void ce_grad_at(const Tensor& logits, int y, int x, int32_t label, double weight,
                Tensor& dlogits) {
    double mx = logits.at(0, y, x);
    for (int ci = 1; ci < logits.c; ++ci) mx = std::max(mx, logits.at(ci, y, x));
    double sum = 0.0;
    for (int ci = 0; ci < logits.c; ++ci) sum += std::exp(logits.at(ci, y, x) - mx);
    for (int ci = 0; ci < logits.c; ++ci) {
        double p = std::exp(logits.at(ci, y, x) - mx) / sum;
        dlogits.at(ci, y, x) += weight * (p - (ci == label ? 1.0 : 0.0));
    }
}

}  // namespace

std::string to_string(DivergenceKind d) { return d == DivergenceKind::js ? "js" : "kl"; }

void LossConfig::validate() const {
    auto finite_nonneg = [](double v) { return std::isfinite(v) && v >= 0.0; };
    if (!(finite_nonneg(gamma) && gamma <= 1.0)) throw ConfigError("loss: gamma must lie in [0,1]");
    if (!(finite_nonneg(beta) && beta <= 1.0)) throw ConfigError("loss: beta must lie in [0,1]");
    if (!finite_nonneg(lambda_attn) || !finite_nonneg(lambda_boundary) ||
        !finite_nonneg(lambda_tv) || !finite_nonneg(lambda_align))
        throw ConfigError("loss: lambda weights must be finite and nonnegative");
}

double stage1_loss(const Tensor& logits, const LabelMap& labels, const LabelMap& clean_prediction,
                   double gamma, int ignore_value, Tensor* dlogits) {
    if (logits.h != labels.h || logits.w != labels.w)
        throw ContractError("stage1_loss: logits/labels shape mismatch");
    if (labels.h != clean_prediction.h || labels.w != clean_prediction.w)
        throw ContractError("stage1_loss: clean prediction shape mismatch");

    size_t n_valid = 0;
    for (int32_t lab : labels.v) n_valid += (lab != ignore_value);
    if (n_valid == 0) throw NumericError("stage1_loss: all pixels ignored, loss undefined");

    double sum_correct = 0.0, sum_wrong = 0.0;
    double inv_n = 1.0 / static_cast<double>(n_valid);
    for (int y = 0; y < labels.h; ++y) {
        for (int x = 0; x < labels.w; ++x) {
            int32_t lab = labels.at(y, x);
            if (lab == ignore_value) continue;
            double ce = ce_at(logits, y, x, lab);
            bool clean_correct = (clean_prediction.at(y, x) == lab);
            if (clean_correct)
                sum_correct += ce;
            else
                sum_wrong += ce;
            if (dlogits)
                ce_grad_at(logits, y, x, lab, (clean_correct ? (1.0 - gamma) : gamma) * inv_n,
                           *dlogits);
        }
    }
    return ((1.0 - gamma) * sum_correct + gamma * sum_wrong) * inv_n;
}

double js_divergence(std::span<const double> p, std::span<const double> q) {
    if (p.size() != q.size()) throw ContractError("js_divergence: dimension mismatch");
    double js = 0.0;
    for (size_t i = 0; i < p.size(); ++i) {
        double m = 0.5 * (p[i] + q[i]);
        double lm = std::log(m + kEps);
        if (p[i] > 0.0) js += 0.5 * p[i] * (std::log(p[i] + kEps) - lm);
        if (q[i] > 0.0) js += 0.5 * q[i] * (std::log(q[i] + kEps) - lm);
    }
    return std::max(js, 0.0);
}

double kl_divergence(std::span<const double> p, std::span<const double> q) {
    if (p.size() != q.size()) throw ContractError("kl_divergence: dimension mismatch");
    double kl = 0.0;
    for (size_t i = 0; i < p.size(); ++i)
        if (p[i] > 0.0) kl += p[i] * (std::log(p[i] + kEps) - std::log(q[i] + kEps));
    return std::max(kl, 0.0);
}

ScalarMap divergence_map(const std::vector<const Tensor*>& clean_probs,
                         const std::vector<const Tensor*>& adv_probs, DivergenceKind kind) {
    if (clean_probs.empty() || clean_probs.size() != adv_probs.size())
        throw ContractError("divergence_map: surrogate probability lists mismatch");
    const Tensor& ref = *clean_probs[0];
    ScalarMap out(ref.h, ref.w);
    std::vector<double> pv(ref.c), qv(ref.c);
    for (size_t s = 0; s < clean_probs.size(); ++s) {
        const Tensor& cp = *clean_probs[s];
        const Tensor& ap = *adv_probs[s];
        if (!cp.same_shape(ap) || cp.h != ref.h || cp.w != ref.w || cp.c != ref.c)
            throw ContractError("divergence_map: tensor shape mismatch");
        for (int y = 0; y < ref.h; ++y) {
            for (int x = 0; x < ref.w; ++x) {
                for (int ci = 0; ci < ref.c; ++ci) {
                    pv[ci] = cp.at(ci, y, x);
                    qv[ci] = ap.at(ci, y, x);
                }
                out.at(y, x) += (kind == DivergenceKind::js) ? js_divergence(pv, qv)
                                                             : kl_divergence(pv, qv);
            }
        }
    }
    double inv = 1.0 / static_cast<double>(clean_probs.size());
    for (double& v : out.v) v *= inv;
    return out;
}

PixelPartition partition_from_map(const ScalarMap& div_map, const Mask& valid, double threshold) {
    if (div_map.h != valid.h || div_map.w != valid.w)
        throw ContractError("partition_from_map: shape mismatch");
    PixelPartition part;
    part.in_set_a = Mask(div_map.h, div_map.w);
    part.valid = valid;
    part.criterion = PixelPartition::Criterion::js_divergence;
    for (int y = 0; y < div_map.h; ++y)
        for (int x = 0; x < div_map.w; ++x) {
            if (!valid.at(y, x)) continue;
            if (div_map.at(y, x) > threshold) {  // strictly above the threshold
                part.in_set_a.at(y, x) = 1;
                ++part.count_a;
            } else {
                ++part.count_b;
            }
        }
    return part;
}

PixelPartition partition_by_js(const std::vector<const Tensor*>& clean_probs,
                               const std::vector<const Tensor*>& adv_probs, const LabelMap& labels,
                               int ignore_value, JsThresholdRule rule, DivergenceKind kind) {
    (void)rule;  // only the mean rule exists; enum kept for extension
    ScalarMap dmap = divergence_map(clean_probs, adv_probs, kind);
    if (labels.h != dmap.h || labels.w != dmap.w)
        throw ContractError("partition_by_js: label shape mismatch");
    Mask valid(labels.h, labels.w);
    double sum = 0.0;
    size_t n = 0;
    for (int y = 0; y < labels.h; ++y)
        for (int x = 0; x < labels.w; ++x)
            if (labels.at(y, x) != ignore_value) {
                valid.at(y, x) = 1;
                sum += dmap.at(y, x);
                ++n;
            }
    double threshold = (n > 0) ? sum / static_cast<double>(n) : 0.0;
    PixelPartition part = partition_from_map(dmap, valid, threshold);
    part.threshold_rule = "mean";
    return part;
}

double stage2_loss(const std::vector<const Tensor*>& per_surrogate_logits, const LabelMap& labels,
                   const PixelPartition& partition, double beta, int ignore_value,
                   std::vector<Tensor*>* dlogits) {
    if (per_surrogate_logits.empty()) throw ContractError("stage2_loss: empty surrogate set");
    if (dlogits && dlogits->size() != per_surrogate_logits.size())
        throw ContractError("stage2_loss: gradient buffer count mismatch");
    size_t n_total = partition.count_a + partition.count_b;
    if (n_total == 0) throw NumericError("stage2_loss: empty partition, loss undefined");

    double norm = 1.0 / (static_cast<double>(per_surrogate_logits.size()) *
                         static_cast<double>(n_total));
    double total = 0.0;
    for (size_t s = 0; s < per_surrogate_logits.size(); ++s) {
        const Tensor& logits = *per_surrogate_logits[s];
        if (logits.h != labels.h || logits.w != labels.w)
            throw ContractError("stage2_loss: logits/labels shape mismatch");
        for (int y = 0; y < labels.h; ++y) {
            for (int x = 0; x < labels.w; ++x) {
                int32_t lab = labels.at(y, x);
                if (lab == ignore_value || !partition.valid.at(y, x)) continue;
                double wgt = partition.in_set_a.at(y, x) ? (1.0 - beta) : beta;
                total += wgt * ce_at(logits, y, x, lab);
                if (dlogits) ce_grad_at(logits, y, x, lab, wgt * norm, *(*dlogits)[s]);
            }
        }
    }
    return total * norm;
}

double gradient_alignment(std::span<const double> grad_vit, std::span<const double> grad_cnn) {
    if (grad_vit.size() != grad_cnn.size())
        throw ContractError("gradient_alignment: gradient length mismatch");
    double dot = 0.0, n1 = 0.0, n2 = 0.0;
    for (size_t i = 0; i < grad_vit.size(); ++i) {
        if (std::isnan(grad_vit[i]) || std::isnan(grad_cnn[i]))
            throw NumericError("gradient_alignment: NaN in gradients");
        dot += grad_vit[i] * grad_cnn[i];
        n1 += grad_vit[i] * grad_vit[i];
        n2 += grad_cnn[i] * grad_cnn[i];
    }
    if (n1 == 0.0 || n2 == 0.0) return 0.0;  // degenerate direction: no signal
    return -dot / (std::sqrt(n1) * std::sqrt(n2));
}

double attention_hijack_loss(const std::vector<ScalarMap>& attention,
                             const std::vector<uint8_t>& patch_tokens,
                             std::vector<ScalarMap>* dattention,
                             const std::vector<int>* layer_subset) {
    if (attention.empty()) throw ContractError("attention_hijack_loss: attention absent");
    size_t n_patch = 0;
    for (uint8_t b : patch_tokens) n_patch += (b != 0);
    if (n_patch == 0) throw ContractError("attention_hijack_loss: empty patch token set");

    std::vector<int> layers;
    if (layer_subset && !layer_subset->empty()) {
        for (int l : *layer_subset) {
            if (l < 0 || l >= static_cast<int>(attention.size()))
                throw ConfigError("attention_hijack_loss: layer index out of range");
            layers.push_back(l);
        }
    } else {
        for (size_t l = 0; l < attention.size(); ++l) layers.push_back(static_cast<int>(l));
    }

    if (dattention) {
        dattention->clear();
        for (const auto& a : attention) dattention->emplace_back(a.h, a.w);
    }

    double mean_mass = 0.0;
    for (int l : layers) {
        const ScalarMap& a = attention[l];
        if (a.w != static_cast<int>(patch_tokens.size()))
            throw ContractError("attention_hijack_loss: token mask does not match attention");
        double g = -1.0 / (static_cast<double>(layers.size()) * a.h);
        double layer_sum = 0.0;
        for (int q = 0; q < a.h; ++q)
            for (int j = 0; j < a.w; ++j)
                if (patch_tokens[j]) {
                    layer_sum += a.at(q, j);
                    if (dattention) (*dattention)[l].at(q, j) = g;
                }
        mean_mass += layer_sum / a.h;
    }
    return -mean_mass / static_cast<double>(layers.size());
}

namespace {

// Felzenszwalb-Huttenlocher 1-D squared distance transform.
void dt1d(const std::vector<double>& f, std::vector<double>& d, int n) {
    static thread_local std::vector<int> v;
    static thread_local std::vector<double> z;
    v.assign(n, 0);
    z.assign(n + 1, 0.0);
    int rk = 0;
    v[0] = 0;
    z[0] = -kInf;
    z[1] = kInf;
    for (int q = 1; q < n; ++q) {
        double s;
        for (;;) {
            int p = v[rk];
            s = ((f[q] + static_cast<double>(q) * q) - (f[p] + static_cast<double>(p) * p)) /
                (2.0 * q - 2.0 * p);
            if (s <= z[rk]) {
                --rk;
            } else {
                break;
            }
        }
        ++rk;
        v[rk] = q;
        z[rk] = s;
        z[rk + 1] = kInf;
    }
    rk = 0;
    for (int q = 0; q < n; ++q) {
        while (z[rk + 1] < q) ++rk;
        double dq = q - v[rk];
        d[q] = dq * dq + f[v[rk]];
    }
}

// Euclidean distance to the set marked true; all-zero field if the set is
// empty (keeps phi finite for absent classes and single-class maps).
ScalarMap edt(const Mask& set) {
    int H = set.h, W = set.w;
    ScalarMap sq(H, W);
    bool any = false;
    for (uint8_t b : set.v) any |= (b != 0);
    if (!any) return sq;

    std::vector<double> col(H), dcol(H);
    for (int x = 0; x < W; ++x) {
        for (int y = 0; y < H; ++y) col[y] = set.at(y, x) ? 0.0 : kInf;
        dt1d(col, dcol, H);
        for (int y = 0; y < H; ++y) sq.at(y, x) = dcol[y];
    }
    std::vector<double> row(W), drow(W);
    for (int y = 0; y < H; ++y) {
        for (int x = 0; x < W; ++x) row[x] = sq.at(y, x);
        dt1d(row, drow, W);
        for (int x = 0; x < W; ++x) sq.at(y, x) = std::sqrt(drow[x]);
    }
    return sq;
}

}  // namespace

Tensor signed_distance_maps(const LabelMap& labels, int num_classes, int ignore_value) {
    Tensor phi(num_classes, labels.h, labels.w);
    Mask region(labels.h, labels.w), complement(labels.h, labels.w);
    for (int cls = 0; cls < num_classes; ++cls) {
        bool any = false;
        for (int y = 0; y < labels.h; ++y)
            for (int x = 0; x < labels.w; ++x) {
                bool in = (labels.at(y, x) == cls);
                region.at(y, x) = in;
                complement.at(y, x) = !in;
                any |= in;
            }
        if (!any) continue;  // absent class: phi stays zero
        ScalarMap d_out = edt(region);      // distance to the region (positive outside)
        ScalarMap d_in = edt(complement);   // distance to the complement (positive inside)
        for (int y = 0; y < labels.h; ++y)
            for (int x = 0; x < labels.w; ++x)
                phi.at(cls, y, x) = d_out.at(y, x) - d_in.at(y, x);
    }
    (void)ignore_value;  // ignore pixels are excluded from the loss sum, not the geometry
    return phi;
}

double boundary_disruption_loss(const Tensor& adv_probs, const LabelMap& labels,
                                const Tensor& phi, int ignore_value, Tensor* dprobs) {
    if (adv_probs.h != labels.h || adv_probs.w != labels.w || !adv_probs.same_shape(phi))
        throw ContractError("boundary_disruption_loss: shape mismatch");
    size_t n_valid = 0;
    for (int32_t lab : labels.v) n_valid += (lab != ignore_value);
    if (n_valid == 0) throw NumericError("boundary_disruption_loss: all pixels ignored");
    double inv_n = 1.0 / static_cast<double>(n_valid);
    double total = 0.0;
    for (int ci = 0; ci < adv_probs.c; ++ci) {
        for (int y = 0; y < labels.h; ++y)
            for (int x = 0; x < labels.w; ++x) {
                if (labels.at(y, x) == ignore_value) continue;
                total += phi.at(ci, y, x) * adv_probs.at(ci, y, x);
                if (dprobs) dprobs->at(ci, y, x) += -phi.at(ci, y, x) * inv_n;
            }
    }
    return -total * inv_n;
}

double boundary_disruption_loss(const Tensor& adv_probs, const LabelMap& labels,
                                int ignore_value) {
    Tensor phi = signed_distance_maps(labels, adv_probs.c, ignore_value);
    return boundary_disruption_loss(adv_probs, labels, phi, ignore_value, nullptr);
}

double total_variation(const Tensor& patch, Tensor* dpatch) {
    double sum = 0.0;
    double inv_n = 1.0 / (static_cast<double>(patch.h) * patch.w);
    for (int ci = 0; ci < patch.c; ++ci) {
        for (int y = 0; y < patch.h; ++y) {
            for (int x = 0; x < patch.w; ++x) {
                if (y + 1 < patch.h) {
                    double d = patch.at(ci, y + 1, x) - patch.at(ci, y, x);
                    sum += std::abs(d);
                    if (dpatch) {
                        double sg = (d > 0.0) ? 1.0 : (d < 0.0 ? -1.0 : 0.0);
                        dpatch->at(ci, y + 1, x) += sg * inv_n;
                        dpatch->at(ci, y, x) -= sg * inv_n;
                    }
                }
                if (x + 1 < patch.w) {
                    double d = patch.at(ci, y, x + 1) - patch.at(ci, y, x);
                    sum += std::abs(d);
                    if (dpatch) {
                        double sg = (d > 0.0) ? 1.0 : (d < 0.0 ? -1.0 : 0.0);
                        dpatch->at(ci, y, x + 1) += sg * inv_n;
                        dpatch->at(ci, y, x) -= sg * inv_n;
                    }
                }
            }
        }
    }
    return sum * inv_n;
}

LossBreakdown total_loss(double attack, double attn, double boundary, double tv,
                         std::optional<double> align, const LossConfig& config, Stage stage) {
    if (stage == Stage::stage1 && align.has_value())
        throw ContractError("total_loss: alignment term supplied in stage 1");
    LossBreakdown out;
    out.attack = attack;
    out.attn = attn;
    out.boundary = boundary;
    out.tv = tv;
    out.align = align.value_or(0.0);
    out.total = attack + config.lambda_attn * attn + config.lambda_boundary * boundary +
                config.lambda_tv * tv +
                (stage == Stage::stage2 ? config.lambda_align * out.align : 0.0);
    return out;
}

void probs_grad_to_logits_grad(const Tensor& probs, const Tensor& dprobs, Tensor& dlogits) {
    if (!probs.same_shape(dprobs) || !probs.same_shape(dlogits))
        throw ContractError("probs_grad_to_logits_grad: shape mismatch");
    for (int y = 0; y < probs.h; ++y) {
        for (int x = 0; x < probs.w; ++x) {
            double dot = 0.0;
            for (int ci = 0; ci < probs.c; ++ci) dot += dprobs.at(ci, y, x) * probs.at(ci, y, x);
            for (int ci = 0; ci < probs.c; ++ci)
                dlogits.at(ci, y, x) += probs.at(ci, y, x) * (dprobs.at(ci, y, x) - dot);
        }
    }
}

}  // namespace omnipatch
