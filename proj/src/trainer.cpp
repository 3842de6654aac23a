#include "omnipatch/trainer.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>

#include <json.hpp>

#include "omnipatch/image_io.hpp"
#include "omnipatch/rng.hpp"

namespace omnipatch {

using json = nlohmann::json;

namespace {
// Stream tags for stateless seed derivation.
constexpr uint64_t kSeedEpochSample = 0xE59CULL;
constexpr uint64_t kSeedPlacement = 0x91ACULL;
constexpr uint64_t kSeedEot = 0xE07ULL;
constexpr uint64_t kSeedPatchInit = 0x9A7CULL;
constexpr double kHvpEps = 1e-5;
}  // namespace

std::string to_string(OptimizerKind k) {
    return k == OptimizerKind::signed_gradient ? "signed_gradient" : "adaptive";
}

OptimizerKind optimizer_from_string(const std::string& s) {
    if (s == "signed_gradient") return OptimizerKind::signed_gradient;
    if (s == "adaptive") return OptimizerKind::adaptive;
    throw ConfigError("unknown optimizer '" + s + "'");
}

void TrainSchedule::validate() const {
    if (stage1_epochs < 0 || stage2_epochs < 0 || stage1_epochs + stage2_epochs == 0)
        throw ConfigError("schedule: epoch counts must be nonnegative and not both zero");
    if (batches_per_epoch <= 0 || batch_size <= 0 || attack_iterations <= 0)
        throw ConfigError("schedule: batch/iteration counts must be positive");
    if (!(step_size >= 0.0) || !std::isfinite(step_size))
        throw ConfigError("schedule: step size must be finite and nonnegative");
}

PatchState initialize_patch(int size, PatchInit mode, uint64_t seed) {
    if (size < 8) throw ConfigError("initialize_patch: size must be at least 8");
    PatchState patch;
    patch.size = size;
    patch.pixels = Tensor(3, size, size, 0.5);
    if (mode == PatchInit::uniform_random) {
        Rng rng(mix_seed(seed, kSeedPatchInit));
        for (double& v : patch.pixels.v) v = rng.uniform();
    }
    return patch;
}

Trainer::Trainer(LossConfig config, TrainSchedule schedule,
                 std::vector<SegmentationSample> dataset, SurrogateHandle vit,
                 SurrogateHandle cnn, TrainOptions options)
    : config_(std::move(config)),
      schedule_(schedule),
      dataset_(std::move(dataset)),
      vit_(std::move(vit)),
      cnn_(std::move(cnn)),
      options_(std::move(options)) {
    config_.validate();
    schedule_.validate();
    options_.eot.validate();
    if (dataset_.empty()) throw ConfigError("trainer: empty dataset");
    if (!vit_ || vit_->family() != ModelFamily::vit)
        throw ContractError("trainer: first surrogate must be a ViT handle");
    if (!cnn_ || cnn_->family() != ModelFamily::cnn)
        throw ContractError("trainer: second surrogate must be a CNN handle");
    int min_dim = std::min(dataset_[0].image.h, dataset_[0].image.w);
    if (options_.patch_size < 8 || options_.patch_size > min_dim)
        throw ConfigError("trainer: patch size must lie in [8, min image dimension]");
}

Trainer::CleanContext& Trainer::context(size_t image_index, bool need_cnn) {
    auto it = clean_cache_.find(image_index);
    if (it == clean_cache_.end()) {
        const SegmentationSample& s = dataset_[image_index];
        CleanContext ctx;
        ModelOutput out = vit_->forward(s.image);
        ctx.vit_pred = argmax_labels(out.logits);
        ctx.vit_probs = out.probabilities();
        ctx.vit_entropy = compute_entropy_map(ctx.vit_probs);
        // Distance fields are cached normalized by the image diagonal so the
        // boundary term stays an auxiliary at any resolution.
        ctx.phi = signed_distance_maps(s.labels, vit_->num_classes(), s.ignore_value);
        double inv_diag = 1.0 / std::sqrt(static_cast<double>(s.labels.h) * s.labels.h +
                                          static_cast<double>(s.labels.w) * s.labels.w);
        for (double& v : ctx.phi.v) v *= inv_diag;
        it = clean_cache_.emplace(image_index, std::move(ctx)).first;
    }
    if (need_cnn && !it->second.has_cnn) {
        ModelOutput out = cnn_->forward(dataset_[image_index].image);
        it->second.cnn_probs = out.probabilities();
        it->second.has_cnn = true;
    }
    return it->second;
}

void Trainer::ensure_sensitivity() {
    if (sensitivity_done_) return;
    size_t n = std::min<size_t>(dataset_.size(),
                                std::max(1, options_.sensitivity_scan_images));
    std::vector<SegmentationSample> subset(dataset_.begin(), dataset_.begin() + n);
    sensitivity_ = sensitivity_scan(*vit_, subset, options_.scan_label_source,
                                    options_.scan_strict_denominator);
    sensitivity_done_ = true;
}

Placement Trainer::placement_for(size_t image_index, int epoch) {
    uint64_t key = mix_seed(static_cast<uint64_t>(epoch), image_index);
    auto it = placement_cache_.find(key);
    if (it != placement_cache_.end()) return it->second;

    const SegmentationSample& s = dataset_[image_index];
    uint64_t seed = mix_seed(schedule_.seed, kSeedPlacement, static_cast<uint64_t>(epoch),
                             image_index);
    Placement pl;
    if (options_.placement_strategy == PlacementStrategy::sensitive) {
        ensure_sensitivity();
        CleanContext& ctx = context(image_index, false);
        Mask mask(s.labels.h, s.labels.w);
        for (int y = 0; y < mask.h; ++y)
            for (int x = 0; x < mask.w; ++x)
                mask.at(y, x) = (ctx.vit_pred.at(y, x) == sensitivity_.selected_class);
        PlacementRegion region = build_region(mask, ctx.vit_entropy, options_.patch_size,
                                              options_.dilation_k, options_.sample_fraction_p);
        pl = sample_placement(region, seed, s.image.h, s.image.w, PlacementStrategy::sensitive);
    } else {
        PlacementRegion region;
        region.patch_size = options_.patch_size;
        pl = sample_placement(region, seed, s.image.h, s.image.w, options_.placement_strategy);
    }
    placement_cache_.emplace(key, pl);
    return pl;
}

std::vector<size_t> Trainer::epoch_sample(int epoch) const {
    Rng rng(mix_seed(schedule_.seed, kSeedEpochSample, static_cast<uint64_t>(epoch)));
    size_t n = static_cast<size_t>(schedule_.batches_per_epoch) * schedule_.batch_size;
    std::vector<size_t> indices(n);
    for (size_t i = 0; i < n; ++i) indices[i] = rng.uniform_index(dataset_.size());
    return indices;
}

void Trainer::apply_update(PatchState& patch, const Tensor& grad) {
    double lr = schedule_.step_size;
    if (schedule_.optimizer == OptimizerKind::signed_gradient) {
        for (size_t i = 0; i < patch.pixels.v.size(); ++i) {
            double g = grad.v[i];
            double sg = (g > 0.0) ? 1.0 : (g < 0.0 ? -1.0 : 0.0);
            patch.pixels.v[i] = std::clamp(patch.pixels.v[i] - lr * sg, 0.0, 1.0);
        }
    } else {
        if (adam_.m.size() != grad.size()) {
            adam_.m = Tensor(3, patch.size, patch.size);
            adam_.v = Tensor(3, patch.size, patch.size);
            adam_.t = 0;
        }
        ++adam_.t;
        const double b1 = 0.9, b2 = 0.999, eps = 1e-8;
        double c1 = 1.0 - std::pow(b1, static_cast<double>(adam_.t));
        double c2 = 1.0 - std::pow(b2, static_cast<double>(adam_.t));
        for (size_t i = 0; i < patch.pixels.v.size(); ++i) {
            double g = grad.v[i];
            adam_.m.v[i] = b1 * adam_.m.v[i] + (1.0 - b1) * g;
            adam_.v.v[i] = b2 * adam_.v.v[i] + (1.0 - b2) * g * g;
            double step = lr * (adam_.m.v[i] / c1) / (std::sqrt(adam_.v.v[i] / c2) + eps);
            patch.pixels.v[i] = std::clamp(patch.pixels.v[i] - step, 0.0, 1.0);
        }
    }
    ++patch.step_count;
}

// Frozen context for recomputing per-surrogate stage gradients at a perturbed
// patch (alignment Hessian-vector products).
struct Trainer::FrozenStep {
    struct Item {
        const SegmentationSample* sample;
        Placement placement;
        PatchTransform transform;
        const LabelMap* clean_pred_vit;
        PixelPartition partition;
    };
    Stage stage = Stage::stage2;
    std::vector<Item> items;
    int patch_size = 0;
    int surrogate_count = 2;
};

Tensor Trainer::stage_patch_gradient(const Tensor& patch_pixels, const FrozenStep& frozen,
                                     bool vit_side) const {
    const Surrogate& model = vit_side ? *vit_ : *cnn_;
    PatchState tmp;
    tmp.pixels = patch_pixels;
    tmp.size = frozen.patch_size;
    Tensor acc(3, frozen.patch_size, frozen.patch_size);
    double inv_b = 1.0 / static_cast<double>(frozen.items.size());
    for (const auto& item : frozen.items) {
        PatchApplication app(item.sample->image, tmp, item.placement, item.transform);
        auto pass = model.forward_with_grad(app.result().image);
        const Tensor& logits = pass->output().logits;
        Tensor dlogits(logits.c, logits.h, logits.w);
        if (frozen.stage == Stage::stage1) {
            stage1_loss(logits, item.sample->labels, *item.clean_pred_vit, config_.gamma,
                        item.sample->ignore_value, &dlogits);
        } else {
            std::vector<const Tensor*> ls{&logits};
            std::vector<Tensor*> ds{&dlogits};
            stage2_loss(ls, item.sample->labels, item.partition, config_.beta,
                        item.sample->ignore_value, &ds);
            // stage2_loss normalizes by the surrogate count it was given;
            // rescale to the full-ensemble normalization.
            double scale = 1.0 / static_cast<double>(frozen.surrogate_count);
            for (double& v : dlogits.v) v *= scale;
        }
        BackwardSeed seed;
        seed.dlogits = &dlogits;
        Tensor dimg = pass->backward(seed);
        Tensor gtheta = app.patch_gradient(dimg);
        for (size_t i = 0; i < acc.v.size(); ++i) acc.v[i] += inv_b * gtheta.v[i];
    }
    return acc;
}

namespace {

double vec_norm(const std::vector<double>& v) {
    double s = 0.0;
    for (double x : v) s += x * x;
    return std::sqrt(s);
}

}  // namespace

LossBreakdown Trainer::attack_iteration(PatchState& patch, const std::vector<size_t>& image_indices,
                                        int epoch, int batch_idx, int iter_idx) {
    if (image_indices.empty()) throw ContractError("attack_iteration: empty batch");
    const Stage stage = stage_of(epoch);
    const bool ensemble = (stage == Stage::stage2);
    const size_t nb = image_indices.size();
    const double inv_b = 1.0 / static_cast<double>(nb);
    const int S = patch.size;
    const int C = vit_->num_classes();

    struct Eval {
        const SegmentationSample* sample = nullptr;
        CleanContext* ctx = nullptr;
        Placement placement;
        PatchTransform transform;
        std::optional<PatchApplication> app;
        std::unique_ptr<ForwardPass> vit_pass, cnn_pass;
        Tensor adv_vit_probs, adv_cnn_probs;
        PixelPartition partition;
        Tensor dlog_stage_vit, dlog_stage_cnn;
        Tensor dlog_aux_vit, dlog_aux_cnn;
        std::vector<ScalarMap> dattn;
        double attn_val = 0.0, bd_val = 0.0;
    };
    std::vector<Eval> evals(nb);

    // Composite with a fresh EOT transform and run the active surrogates.
    for (size_t i = 0; i < nb; ++i) {
        Eval& e = evals[i];
        e.sample = &dataset_[image_indices[i]];
        e.ctx = &context(image_indices[i], ensemble);
        e.placement = placement_for(image_indices[i], epoch);
        e.transform = sample_transform(
            options_.eot, mix_seed(schedule_.seed, kSeedEot, static_cast<uint64_t>(epoch),
                                   static_cast<uint64_t>(batch_idx),
                                   static_cast<uint64_t>(iter_idx), i));
        e.app.emplace(e.sample->image, patch, e.placement, e.transform);
        e.vit_pass = vit_->forward_with_grad(e.app->result().image);
        if (ensemble) e.cnn_pass = cnn_->forward_with_grad(e.app->result().image);
    }

    // Attack term and its per-surrogate logit gradients.
    double attack_raw = 0.0;
    if (!ensemble) {
        for (auto& e : evals) {
            const Tensor& logits = e.vit_pass->output().logits;
            e.dlog_stage_vit = Tensor(C, logits.h, logits.w);
            attack_raw += inv_b * stage1_loss(logits, e.sample->labels, e.ctx->vit_pred,
                                              config_.gamma, e.sample->ignore_value,
                                              &e.dlog_stage_vit);
        }
    } else {
        std::vector<ScalarMap> dmaps(nb);
        std::vector<Mask> valids(nb);
        double batch_sum = 0.0;
        size_t batch_n = 0;
        for (size_t i = 0; i < nb; ++i) {
            Eval& e = evals[i];
            e.adv_vit_probs = e.vit_pass->output().probabilities();
            e.adv_cnn_probs = e.cnn_pass->output().probabilities();
            std::vector<const Tensor*> clean{&e.ctx->vit_probs, &e.ctx->cnn_probs};
            std::vector<const Tensor*> adv{&e.adv_vit_probs, &e.adv_cnn_probs};
            dmaps[i] = divergence_map(clean, adv, config_.divergence);
            valids[i] = Mask(e.sample->labels.h, e.sample->labels.w);
            for (int y = 0; y < valids[i].h; ++y)
                for (int x = 0; x < valids[i].w; ++x)
                    if (e.sample->labels.at(y, x) != e.sample->ignore_value) {
                        valids[i].at(y, x) = 1;
                        batch_sum += dmaps[i].at(y, x);
                        ++batch_n;
                    }
        }
        double batch_mean = (batch_n > 0) ? batch_sum / static_cast<double>(batch_n) : 0.0;
        for (size_t i = 0; i < nb; ++i) {
            Eval& e = evals[i];
            double thr = batch_mean;
            if (config_.per_image_partition_mean) {
                double s = 0.0;
                size_t n = 0;
                for (int y = 0; y < valids[i].h; ++y)
                    for (int x = 0; x < valids[i].w; ++x)
                        if (valids[i].at(y, x)) {
                            s += dmaps[i].at(y, x);
                            ++n;
                        }
                thr = (n > 0) ? s / static_cast<double>(n) : 0.0;
            }
            e.partition = partition_from_map(dmaps[i], valids[i], thr);
            e.partition.threshold_rule = config_.per_image_partition_mean ? "mean(image)"
                                                                          : "mean(batch)";
            const Tensor& lv = e.vit_pass->output().logits;
            const Tensor& lc = e.cnn_pass->output().logits;
            e.dlog_stage_vit = Tensor(C, lv.h, lv.w);
            e.dlog_stage_cnn = Tensor(C, lc.h, lc.w);
            std::vector<const Tensor*> ls{&lv, &lc};
            std::vector<Tensor*> ds{&e.dlog_stage_vit, &e.dlog_stage_cnn};
            attack_raw += inv_b * stage2_loss(ls, e.sample->labels, e.partition, config_.beta,
                                              e.sample->ignore_value, &ds);
        }
    }

    // Auxiliaries: attention hijack (ViT) and boundary disruption (active
    // surrogates, averaged).
    double attn_mean = 0.0, bd_mean = 0.0;
    for (auto& e : evals) {
        const ModelOutput& vo = e.vit_pass->output();
        if (!vo.attention.empty() && vo.token_grid_h > 0) {
            Mask fp_int =
                downscale_footprint(e.app->result().footprint, vo.internal_h, vo.internal_w);
            Mask tok = footprint_token_mask(fp_int, vo.internal_h / vo.token_grid_h);
            if (tok.count() > 0) {
                const std::vector<int>* subset =
                    config_.attn_layers.empty() ? nullptr : &config_.attn_layers;
                e.attn_val = attention_hijack_loss(vo.attention, tok.v, &e.dattn, subset);
                for (auto& m : e.dattn)
                    for (double& v : m.v) v *= config_.lambda_attn;
            }
        }
        attn_mean += inv_b * e.attn_val;

        int n_active = ensemble ? 2 : 1;
        double inv_active = 1.0 / n_active;
        e.dlog_aux_vit = Tensor(C, e.sample->labels.h, e.sample->labels.w);
        if (!ensemble) e.adv_vit_probs = e.vit_pass->output().probabilities();
        const Tensor& vit_probs = e.adv_vit_probs;
        {
            Tensor dprobs(C, vit_probs.h, vit_probs.w);
            e.bd_val += inv_active * boundary_disruption_loss(vit_probs, e.sample->labels,
                                                              e.ctx->phi, e.sample->ignore_value,
                                                              &dprobs);
            for (double& v : dprobs.v) v *= config_.lambda_boundary * inv_active;
            probs_grad_to_logits_grad(vit_probs, dprobs, e.dlog_aux_vit);
        }
        if (ensemble) {
            e.dlog_aux_cnn = Tensor(C, e.sample->labels.h, e.sample->labels.w);
            Tensor dprobs(C, e.adv_cnn_probs.h, e.adv_cnn_probs.w);
            e.bd_val += inv_active * boundary_disruption_loss(e.adv_cnn_probs, e.sample->labels,
                                                              e.ctx->phi, e.sample->ignore_value,
                                                              &dprobs);
            for (double& v : dprobs.v) v *= config_.lambda_boundary * inv_active;
            probs_grad_to_logits_grad(e.adv_cnn_probs, dprobs, e.dlog_aux_cnn);
        }
        bd_mean += inv_b * e.bd_val;
    }

    Tensor dtv(3, S, S);
    double tv_val = total_variation(patch.pixels, &dtv);

    // Backwards: per-surrogate stage gradients (for the attack term and
    // alignment) plus one auxiliary backward per model.
    Tensor g_vit(3, S, S), g_cnn(3, S, S), dtheta(3, S, S);
    for (auto& e : evals) {
        BackwardSeed stage_seed;
        stage_seed.dlogits = &e.dlog_stage_vit;
        Tensor gv = e.app->patch_gradient(e.vit_pass->backward(stage_seed));
        for (size_t i = 0; i < g_vit.v.size(); ++i) g_vit.v[i] += inv_b * gv.v[i];
        if (ensemble) {
            BackwardSeed cnn_seed;
            cnn_seed.dlogits = &e.dlog_stage_cnn;
            Tensor gc = e.app->patch_gradient(e.cnn_pass->backward(cnn_seed));
            for (size_t i = 0; i < g_cnn.v.size(); ++i) g_cnn.v[i] += inv_b * gc.v[i];
        }

        BackwardSeed aux_seed;
        aux_seed.dlogits = &e.dlog_aux_vit;
        if (!e.dattn.empty()) aux_seed.dattention = &e.dattn;
        Tensor av = e.app->patch_gradient(e.vit_pass->backward(aux_seed));
        for (size_t i = 0; i < dtheta.v.size(); ++i) dtheta.v[i] += inv_b * av.v[i];
        if (ensemble) {
            BackwardSeed aux_cnn;
            aux_cnn.dlogits = &e.dlog_aux_cnn;
            Tensor ac = e.app->patch_gradient(e.cnn_pass->backward(aux_cnn));
            for (size_t i = 0; i < dtheta.v.size(); ++i) dtheta.v[i] += inv_b * ac.v[i];
        }
    }

    // Attack term is maximized: the descent objective carries -L_stage.
    for (size_t i = 0; i < dtheta.v.size(); ++i)
        dtheta.v[i] += -(g_vit.v[i] + g_cnn.v[i]) + config_.lambda_tv * dtv.v[i];

    // Gradient alignment, stage 2 only.
    std::optional<double> align_val;
    if (ensemble) {
        double neg_cos = gradient_alignment(g_vit.v, g_cnn.v);
        align_val = neg_cos;
        double ng = vec_norm(g_vit.v), nh = vec_norm(g_cnn.v);
        if (config_.lambda_align > 0.0 && ng > 0.0 && nh > 0.0) {
            double cosv = -neg_cos;
            // grad cos = G u + H v with u, v below; grad L_align = -(G u + H v).
            Tensor u(3, S, S), v(3, S, S);
            for (size_t i = 0; i < u.v.size(); ++i) {
                u.v[i] = g_cnn.v[i] / (ng * nh) - cosv * g_vit.v[i] / (ng * ng);
                v.v[i] = g_vit.v[i] / (ng * nh) - cosv * g_cnn.v[i] / (nh * nh);
            }
            FrozenStep frozen;
            frozen.stage = stage;
            frozen.patch_size = S;
            frozen.surrogate_count = 2;
            for (auto& e : evals)
                frozen.items.push_back({e.sample, e.placement, e.transform, &e.ctx->vit_pred,
                                        e.partition});
            auto hvp = [&](bool vit_side, const Tensor& dir) {
                Tensor out(3, S, S);
                double n = vec_norm(dir.v);
                if (n == 0.0) return out;
                Tensor plus = patch.pixels, minus = patch.pixels;
                for (size_t i = 0; i < dir.v.size(); ++i) {
                    double step = kHvpEps * dir.v[i] / n;
                    plus.v[i] += step;
                    minus.v[i] -= step;
                }
                Tensor gp = stage_patch_gradient(plus, frozen, vit_side);
                Tensor gm = stage_patch_gradient(minus, frozen, vit_side);
                double scale = n / (2.0 * kHvpEps);
                for (size_t i = 0; i < out.v.size(); ++i)
                    out.v[i] = (gp.v[i] - gm.v[i]) * scale;
                return out;
            };
            Tensor gu = hvp(true, u);
            if (!config_.align_one_side_constant) {
                Tensor hv = hvp(false, v);
                for (size_t i = 0; i < gu.v.size(); ++i) gu.v[i] += hv.v[i];
            }
            for (size_t i = 0; i < dtheta.v.size(); ++i)
                dtheta.v[i] += config_.lambda_align * (-gu.v[i]);
        }
    }

    LossBreakdown breakdown =
        total_loss(-attack_raw, attn_mean, bd_mean, tv_val, align_val, config_, stage);
    if (!std::isfinite(breakdown.total))
        throw NumericError("attack_iteration: non-finite loss at epoch " + std::to_string(epoch) +
                           " batch " + std::to_string(batch_idx));

    apply_update(patch, dtheta);
    return breakdown;
}

namespace {

json breakdown_to_json(const LossBreakdown& b) {
    return json{{"attack", b.attack}, {"attn", b.attn},   {"boundary", b.boundary},
                {"tv", b.tv},         {"align", b.align}, {"total", b.total}};
}

LossBreakdown breakdown_from_json(const json& j) {
    LossBreakdown b;
    b.attack = j.at("attack");
    b.attn = j.at("attn");
    b.boundary = j.at("boundary");
    b.tv = j.at("tv");
    b.align = j.at("align");
    b.total = j.at("total");
    return b;
}

}  // namespace

TrainResult Trainer::train() {
    auto t_start = std::chrono::steady_clock::now();
    TrainResult result;
    TrainLog& log = result.log;
    log.stage_switch_epoch = schedule_.stage1_epochs;

    PatchState patch;
    int start_epoch = 0;
    bool resumed = false;
    if (options_.resume && !options_.checkpoint_path.empty() &&
        std::filesystem::exists(options_.checkpoint_path)) {
        Checkpoint ckpt = load_checkpoint(options_.checkpoint_path);
        patch = std::move(ckpt.patch);
        adam_.m = std::move(ckpt.adam_m);
        adam_.v = std::move(ckpt.adam_v);
        adam_.t = ckpt.adam_t;
        log = std::move(ckpt.log);
        log.stage_switch_epoch = schedule_.stage1_epochs;
        start_epoch = ckpt.next_epoch;
        resumed = true;
        if (patch.size != options_.patch_size)
            throw ConfigError("resume: checkpoint patch size differs from configuration");
    } else {
        patch = initialize_patch(options_.patch_size, options_.patch_init, options_.patch_seed);
    }

    std::ofstream jsonl;
    if (!options_.log_jsonl_path.empty()) {
        // Append: the caller owns the file lifecycle (header line, truncation
        // on fresh runs); resumed runs continue where the partial log stopped.
        jsonl.open(options_.log_jsonl_path, std::ios::app);
        if (!jsonl) throw IoError("trainer: cannot open step log " +
                                  options_.log_jsonl_path.string());
    }
    (void)resumed;

    const int total = schedule_.total_epochs();
    for (int epoch = start_epoch; epoch < total; ++epoch) {
        patch.stage = stage_of(epoch);
        placement_cache_.clear();
        std::vector<size_t> indices = epoch_sample(epoch);
        size_t epoch_first_step = log.steps.size();

        for (int b = 0; b < schedule_.batches_per_epoch; ++b) {
            if (options_.dry_run &&
                !(b == 0 && (epoch == 0 || epoch == schedule_.stage1_epochs)))
                continue;
            std::vector<size_t> batch(indices.begin() + static_cast<long>(b) * schedule_.batch_size,
                                      indices.begin() +
                                          static_cast<long>(b + 1) * schedule_.batch_size);
            for (size_t idx : batch) {
                Placement pl = placement_for(idx, epoch);
                log.placements.push_back({epoch, idx, pl});
            }
            for (int it = 0; it < schedule_.attack_iterations; ++it) {
                LossBreakdown lb;
                try {
                    lb = attack_iteration(patch, batch, epoch, b, it);
                } catch (const NumericError&) {
                    if (!options_.checkpoint_path.empty()) {
                        Checkpoint snap{epoch, patch, adam_.m, adam_.v, adam_.t, log};
                        save_checkpoint(options_.checkpoint_path.string() + ".diverged", snap);
                    }
                    throw;
                }
                log.steps.push_back({epoch, b, it, patch.stage, lb});
                if (jsonl.is_open()) {
                    json rec = breakdown_to_json(lb);
                    rec["epoch"] = epoch;
                    rec["batch"] = b;
                    rec["iter"] = it;
                    rec["stage"] = to_string(patch.stage);
                    jsonl << rec.dump() << "\n";
                }
            }
        }

        LossBreakdown mean;
        size_t n_steps = log.steps.size() - epoch_first_step;
        if (n_steps > 0) {
            for (size_t i = epoch_first_step; i < log.steps.size(); ++i) {
                const LossBreakdown& lb = log.steps[i].loss;
                mean.attack += lb.attack;
                mean.attn += lb.attn;
                mean.boundary += lb.boundary;
                mean.tv += lb.tv;
                mean.align += lb.align;
                mean.total += lb.total;
            }
            double inv = 1.0 / static_cast<double>(n_steps);
            mean.attack *= inv;
            mean.attn *= inv;
            mean.boundary *= inv;
            mean.tv *= inv;
            mean.align *= inv;
            mean.total *= inv;
        }
        log.epoch_means.push_back(mean);

        if (!options_.checkpoint_path.empty()) {
            Checkpoint ckpt{epoch + 1, patch, adam_.m, adam_.v, adam_.t, log};
            save_checkpoint(options_.checkpoint_path, ckpt);
        }
    }

    log.wall_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t_start).count();
    result.patch = std::move(patch);
    if (sensitivity_done_) result.sensitivity = sensitivity_;
    return result;
}

// ---------------------------------------------------------------------------
// Persistence
// ---------------------------------------------------------------------------

namespace {

json tensor_to_json(const Tensor& t) {
    return json{{"c", t.c}, {"h", t.h}, {"w", t.w}, {"v", t.v}};
}

Tensor tensor_from_json(const json& j) {
    Tensor t(j.at("c").get<int>(), j.at("h").get<int>(), j.at("w").get<int>());
    std::vector<double> v = j.at("v").get<std::vector<double>>();
    if (v.size() != t.size()) throw IoError("checkpoint: tensor size mismatch");
    t.v = std::move(v);
    return t;
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
    json j;
    j["format"] = "omnipatch-checkpoint-v1";
    j["next_epoch"] = ckpt.next_epoch;
    j["patch"] = {{"pixels", tensor_to_json(ckpt.patch.pixels)},
                  {"size", ckpt.patch.size},
                  {"stage", to_string(ckpt.patch.stage)},
                  {"step_count", ckpt.patch.step_count}};
    j["adam"] = {{"t", ckpt.adam_t}};
    if (ckpt.adam_m.size() > 0) {
        j["adam"]["m"] = tensor_to_json(ckpt.adam_m);
        j["adam"]["v"] = tensor_to_json(ckpt.adam_v);
    }
    json steps = json::array();
    for (const auto& s : ckpt.log.steps) {
        json rec = breakdown_to_json(s.loss);
        rec["epoch"] = s.epoch;
        rec["batch"] = s.batch;
        rec["iter"] = s.iteration;
        rec["stage"] = to_string(s.stage);
        steps.push_back(std::move(rec));
    }
    j["log"] = {{"steps", std::move(steps)}, {"stage_switch_epoch", ckpt.log.stage_switch_epoch}};
    json means = json::array();
    for (const auto& m : ckpt.log.epoch_means) means.push_back(breakdown_to_json(m));
    j["log"]["epoch_means"] = std::move(means);
    json placements = json::array();
    for (const auto& p : ckpt.log.placements)
        placements.push_back(json{{"epoch", p.epoch},
                                  {"image", p.image_index},
                                  {"y0", p.placement.y0},
                                  {"x0", p.placement.x0},
                                  {"size", p.placement.patch_size},
                                  {"strategy", to_string(p.placement.strategy)}});
    j["log"]["placements"] = std::move(placements);

    std::ofstream out(path);
    if (!out) throw IoError("save_checkpoint: cannot open " + path.string());
    out << j.dump();
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("load_checkpoint: cannot open " + path.string());
    json j;
    try {
        in >> j;
        Checkpoint ckpt;
        ckpt.next_epoch = j.at("next_epoch").get<int>();
        ckpt.patch.pixels = tensor_from_json(j.at("patch").at("pixels"));
        ckpt.patch.size = j.at("patch").at("size").get<int>();
        ckpt.patch.stage =
            j.at("patch").at("stage").get<std::string>() == "stage2" ? Stage::stage2 : Stage::stage1;
        ckpt.patch.step_count = j.at("patch").at("step_count").get<int>();
        ckpt.adam_t = j.at("adam").at("t").get<long>();
        if (j.at("adam").contains("m")) {
            ckpt.adam_m = tensor_from_json(j.at("adam").at("m"));
            ckpt.adam_v = tensor_from_json(j.at("adam").at("v"));
        }
        const json& lg = j.at("log");
        ckpt.log.stage_switch_epoch = lg.at("stage_switch_epoch").get<int>();
        for (const auto& rec : lg.at("steps")) {
            StepRecord s;
            s.epoch = rec.at("epoch").get<int>();
            s.batch = rec.at("batch").get<int>();
            s.iteration = rec.at("iter").get<int>();
            s.stage = rec.at("stage").get<std::string>() == "stage2" ? Stage::stage2 : Stage::stage1;
            s.loss = breakdown_from_json(rec);
            ckpt.log.steps.push_back(s);
        }
        for (const auto& m : lg.at("epoch_means"))
            ckpt.log.epoch_means.push_back(breakdown_from_json(m));
        for (const auto& p : lg.at("placements")) {
            PlacementRecord pr;
            pr.epoch = p.at("epoch").get<int>();
            pr.image_index = p.at("image").get<size_t>();
            pr.placement.y0 = p.at("y0").get<int>();
            pr.placement.x0 = p.at("x0").get<int>();
            pr.placement.patch_size = p.at("size").get<int>();
            pr.placement.strategy = placement_strategy_from_string(p.at("strategy"));
            ckpt.log.placements.push_back(pr);
        }
        return ckpt;
    } catch (const json::exception& e) {
        throw IoError("load_checkpoint: corrupt file " + path.string() + ": " + e.what());
    }
}

void save_patch_artifact(const std::filesystem::path& ppm_path, const PatchState& patch,
                         const std::string& config_hash, const EotParams& eot) {
    write_ppm(ppm_path, patch.pixels);
    json j;
    j["size"] = patch.size;
    j["stage"] = to_string(patch.stage);
    j["step_count"] = patch.step_count;
    j["config_hash"] = config_hash;
    j["eot"] = {{"enabled", eot.enabled},
                {"scale", {eot.scale_lo, eot.scale_hi}},
                {"rotation_deg", eot.rotation_deg},
                {"translation_px", eot.translation_px}};
    std::ofstream out(ppm_path.string() + ".json");
    if (!out) throw IoError("save_patch_artifact: cannot open sidecar for " + ppm_path.string());
    out << j.dump(2) << "\n";
}

PatchState load_patch_artifact(const std::filesystem::path& path) {
    if (path.extension() == ".json") return load_checkpoint(path).patch;
    if (path.extension() != ".ppm")
        throw IoError("load_patch_artifact: expected a .ppm raster or a .json checkpoint, got " +
                      path.string());
    PatchState patch;
    patch.pixels = read_ppm(path);
    if (patch.pixels.h != patch.pixels.w)
        throw IoError("load_patch_artifact: patch raster must be square");
    patch.size = patch.pixels.h;
    std::filesystem::path sidecar = path.string() + ".json";
    if (std::filesystem::exists(sidecar)) {
        std::ifstream in(sidecar);
        json j;
        try {
            in >> j;
            patch.stage = j.value("stage", "stage1") == "stage2" ? Stage::stage2 : Stage::stage1;
            patch.step_count = j.value("step_count", 0);
            if (j.value("size", patch.size) != patch.size)
                throw IoError("load_patch_artifact: sidecar size disagrees with raster");
        } catch (const json::exception& e) {
            throw IoError("load_patch_artifact: bad sidecar: " + std::string(e.what()));
        }
    }
    return patch;
}

}  // namespace omnipatch
