#pragma once

#include <optional>
#include <span>
#include <string>
#include <vector>

#include "omnipatch/applicator.hpp"
#include "omnipatch/tensor.hpp"

namespace omnipatch {

// All attack objectives. Convention: every function here is written in
// minimization form. The cross-entropy stage losses return the raw weighted
// CE (which the attack wants to maximize); the trainer negates them before
// combining, so the optimizer always descends.

enum class DivergenceKind { js, kl };
enum class JsThresholdRule { mean };

std::string to_string(DivergenceKind d);

struct LossConfig {
    double gamma = 0.7;  // Stage-1 weighting between clean-correct and misclassified pixels
    double beta = 0.3;   // Stage-2 weighting between high and low transfer sets
    double lambda_attn = 1e-1;
    double lambda_boundary = 2e-1;
    double lambda_tv = 1e-4;
    double lambda_align = 1e-1;
    JsThresholdRule js_threshold = JsThresholdRule::mean;
    DivergenceKind divergence = DivergenceKind::js;
    bool per_image_partition_mean = false;  // default: threshold over the whole batch
    bool align_one_side_constant = false;   // drop the CNN Hessian term in the align gradient
    std::vector<int> attn_layers;           // empty = all layers

    void validate() const;
};

// Disjoint pixel sets covering the valid (non-ignored) pixels of one image.
struct PixelPartition {
    enum class Criterion { clean_correctness, js_divergence };
    Mask in_set_a;  // membership mask for set A (stage 1: C, stage 2: X)
    Mask valid;     // non-ignored pixels
    size_t count_a = 0, count_b = 0;
    Criterion criterion = Criterion::js_divergence;
    std::string threshold_rule;
};

struct LossBreakdown {
    double attack = 0.0;
    double attn = 0.0;
    double boundary = 0.0;
    double tv = 0.0;
    double align = 0.0;
    double total = 0.0;
};

// --- Stage objectives ------------------------------------------------------

// Stage-1 weighted CE: [(1-gamma) * sum_C CE + gamma * sum_I CE] / (|C|+|I|)
// where C = pixels the clean prediction got right. Accumulates d(loss)/dlogits
// into *dlogits when non-null.
double stage1_loss(const Tensor& logits, const LabelMap& labels, const LabelMap& clean_prediction,
                   double gamma, int ignore_value, Tensor* dlogits = nullptr);

// Jensen-Shannon divergence between two discrete distributions (natural log,
// eps = 1e-12 inside logs); symmetric and bounded by log 2.
double js_divergence(std::span<const double> p, std::span<const double> q);

// KL(p || q) with the same epsilon conventions (ablation alternative).
double kl_divergence(std::span<const double> p, std::span<const double> q);

// Per-pixel divergence between clean and adversarial distributions, averaged
// across surrogates.
ScalarMap divergence_map(const std::vector<const Tensor*>& clean_probs,
                         const std::vector<const Tensor*>& adv_probs, DivergenceKind kind);

// Splits valid pixels at a precomputed threshold: set A = strictly above.
PixelPartition partition_from_map(const ScalarMap& div_map, const Mask& valid, double threshold);

// Spec-level convenience: averaged JS map thresholded at its own mean over
// the valid pixels of this image.
PixelPartition partition_by_js(const std::vector<const Tensor*>& clean_probs,
                               const std::vector<const Tensor*>& adv_probs, const LabelMap& labels,
                               int ignore_value, JsThresholdRule rule = JsThresholdRule::mean,
                               DivergenceKind kind = DivergenceKind::js);

// Stage-2 ensemble CE over the partition:
// 1/(|S| * (|X|+|Y|)) * sum_s [(1-beta) sum_X CE_s + beta * sum_Y CE_s].
double stage2_loss(const std::vector<const Tensor*>& per_surrogate_logits, const LabelMap& labels,
                   const PixelPartition& partition, double beta, int ignore_value,
                   std::vector<Tensor*>* dlogits = nullptr);

// --- Alignment and auxiliaries ---------------------------------------------

// -cos(g1, g2); returns 0 when either gradient is (exactly) zero. NaN input
// is a numeric error.
double gradient_alignment(std::span<const double> grad_vit, std::span<const double> grad_cnn);

// Negative mean (over layers and query tokens) attention mass on patch
// tokens. patch_tokens is a flat 0/1 vector over the token grid. Optionally
// accumulates d(loss)/d(attention) and restricts to a layer subset.
double attention_hijack_loss(const std::vector<ScalarMap>& attention,
                             const std::vector<uint8_t>& patch_tokens,
                             std::vector<ScalarMap>* dattention = nullptr,
                             const std::vector<int>* layer_subset = nullptr);

// Per-class signed Euclidean distance fields of the label regions (negative
// inside, positive outside). Classes absent from the map get an all-zero
// field. Cached by the trainer per sample.
Tensor signed_distance_maps(const LabelMap& labels, int num_classes, int ignore_value);

// Negated boundary functional: -sum_c sum_px phi_c * p_c / Nvalid. Lower =
// probability mass pushed far outside the true regions.
double boundary_disruption_loss(const Tensor& adv_probs, const LabelMap& labels,
                                const Tensor& phi, int ignore_value, Tensor* dprobs = nullptr);

// Convenience overload computing the distance maps on the fly.
double boundary_disruption_loss(const Tensor& adv_probs, const LabelMap& labels,
                                int ignore_value);

// Anisotropic total variation, normalized by the pixel count S*S.
double total_variation(const Tensor& patch, Tensor* dpatch = nullptr);

// Unified objective with the stage-2 indicator on lambda_align. `align` must
// only be supplied in stage 2.
LossBreakdown total_loss(double attack, double attn, double boundary, double tv,
                         std::optional<double> align, const LossConfig& config, Stage stage);

// Chain rule helper: converts a gradient w.r.t. probabilities into one
// w.r.t. logits (softmax Jacobian), accumulating into dlogits.
void probs_grad_to_logits_grad(const Tensor& probs, const Tensor& dprobs, Tensor& dlogits);

}  // namespace omnipatch
