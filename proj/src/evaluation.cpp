#include "omnipatch/evaluation.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <fstream>
#include <mutex>
#include <thread>

#include "omnipatch/rng.hpp"

namespace omnipatch {

namespace {
constexpr uint64_t kSeedEvalPlacement = 0xE7A1ULL;
constexpr uint64_t kSeedEvalNoise = 0x401EULL;
constexpr uint64_t kSeedEvalEot = 0xE0E7ULL;
}  // namespace

void ConfusionMatrix::add(const LabelMap& truth, const LabelMap& prediction, int ignore_value) {
    if (truth.h != prediction.h || truth.w != prediction.w)
        throw ContractError("confusion matrix: label/prediction shape mismatch");
    for (size_t i = 0; i < truth.v.size(); ++i) {
        int32_t gt = truth.v[i];
        if (gt == ignore_value) continue;
        int32_t pr = prediction.v[i];
        if (gt < 0 || gt >= num_classes || pr < 0 || pr >= num_classes)
            throw ContractError("confusion matrix: class id out of range");
        ++at(gt, pr);
    }
}

ConfusionMatrix& ConfusionMatrix::operator+=(const ConfusionMatrix& other) {
    if (num_classes != other.num_classes)
        throw ContractError("confusion matrix: class count mismatch");
    for (size_t i = 0; i < counts.size(); ++i) counts[i] += other.counts[i];
    return *this;
}

int64_t ConfusionMatrix::total() const {
    int64_t t = 0;
    for (int64_t c : counts) t += c;
    return t;
}

double miou(const ConfusionMatrix& cm) {
    if (cm.num_classes == 0 || cm.total() == 0)
        throw NumericError("miou: empty confusion matrix, metric undefined");
    double sum = 0.0;
    int n = 0;
    for (int c = 0; c < cm.num_classes; ++c) {
        int64_t tp = cm.at(c, c);
        int64_t fp = 0, fn = 0;
        for (int o = 0; o < cm.num_classes; ++o) {
            if (o == c) continue;
            fp += cm.at(o, c);
            fn += cm.at(c, o);
        }
        int64_t uni = tp + fp + fn;
        if (uni == 0) continue;  // class absent from labels and predictions
        sum += static_cast<double>(tp) / static_cast<double>(uni);
        ++n;
    }
    if (n == 0) throw NumericError("miou: no class with nonzero union");
    return sum / n;
}

namespace {

// Per-image placement shared by every model and condition.
std::vector<Placement> paired_placements(const std::vector<SegmentationSample>& dataset,
                                         const std::vector<SurrogateHandle>& models,
                                         PlacementStrategy strategy, int patch_size,
                                         uint64_t seed, const EvalOptions& opt) {
    std::vector<Placement> out(dataset.size());
    const Surrogate* placer = nullptr;
    if (strategy == PlacementStrategy::sensitive) {
        if (opt.placement_model >= 0 && opt.placement_model < static_cast<int>(models.size())) {
            placer = models[opt.placement_model].get();
        } else {
            for (const auto& m : models)
                if (m->family() == ModelFamily::vit) {
                    placer = m.get();
                    break;
                }
            if (!placer && !models.empty()) placer = models[0].get();
        }
        if (!placer) throw ContractError("evaluate_patch: no model available for placement");
    }

    int c_star = -1;
    if (placer) {
        size_t n = std::min<size_t>(dataset.size(), std::max(1, opt.sensitivity_scan_images));
        std::vector<SegmentationSample> subset(dataset.begin(), dataset.begin() + n);
        c_star = sensitivity_scan(*placer, subset, LabelSource::predicted).selected_class;
    }

    for (size_t i = 0; i < dataset.size(); ++i) {
        const SegmentationSample& s = dataset[i];
        uint64_t pseed = mix_seed(seed, kSeedEvalPlacement, i);
        if (strategy == PlacementStrategy::sensitive) {
            ModelOutput o = placer->forward(s.image);
            LabelMap pred = argmax_labels(o.logits);
            EntropyMap ent = compute_entropy_map(o.probabilities());
            Mask mask(s.labels.h, s.labels.w);
            for (int y = 0; y < mask.h; ++y)
                for (int x = 0; x < mask.w; ++x) mask.at(y, x) = (pred.at(y, x) == c_star);
            PlacementRegion region =
                build_region(mask, ent, patch_size, opt.dilation_k, opt.sample_fraction_p);
            out[i] = sample_placement(region, pseed, s.image.h, s.image.w,
                                      PlacementStrategy::sensitive);
        } else {
            PlacementRegion region;
            region.patch_size = patch_size;
            out[i] = sample_placement(region, pseed, s.image.h, s.image.w, strategy);
        }
    }
    return out;
}

template <typename Fn>
void parallel_over_images(size_t n, int threads, Fn&& fn) {
    int nt = std::max(1, threads);
    if (nt == 1) {
        for (size_t i = 0; i < n; ++i) fn(i);
        return;
    }
    std::vector<std::thread> pool;
    std::atomic<size_t> next{0};
    for (int t = 0; t < nt; ++t)
        pool.emplace_back([&]() {
            for (;;) {
                size_t i = next.fetch_add(1);
                if (i >= n) return;
                fn(i);
            }
        });
    for (auto& th : pool) th.join();
}

}  // namespace

EvaluationReport evaluate_patch(const PatchState* patch,
                                const std::vector<SurrogateHandle>& models,
                                const std::vector<SegmentationSample>& dataset,
                                PlacementStrategy placement_strategy, uint64_t seed,
                                const EvalOptions& options) {
    if (dataset.empty()) throw ConfigError("evaluate_patch: empty dataset");
    if (models.empty()) throw ConfigError("evaluate_patch: no models");

    EvaluationReport report;
    report.patch_size = patch ? patch->size : 0;
    report.placement_strategy = to_string(placement_strategy);
    report.eot_enabled = options.eot_enabled;
    report.seed = seed;

    int patch_size = patch ? patch->size : 0;
    std::vector<Placement> placements;
    if (patch)
        placements = paired_placements(dataset, models, placement_strategy, patch_size, seed,
                                       options);

    for (const auto& model : models) {
        ModelEvalResult res;
        res.model_name = model->name();
        int C = model->num_classes();
        res.cm_clean = ConfusionMatrix(C);
        res.cm_random = ConfusionMatrix(C);
        res.cm_patch = ConfusionMatrix(C);
        res.per_image_clean.assign(dataset.size(), 0.0);
        res.per_image_random.assign(dataset.size(), 0.0);
        res.per_image_patch.assign(dataset.size(), 0.0);
        std::vector<ConfusionMatrix> cm_clean(dataset.size(), ConfusionMatrix(C));
        std::vector<ConfusionMatrix> cm_random(dataset.size(), ConfusionMatrix(C));
        std::vector<ConfusionMatrix> cm_patch(dataset.size(), ConfusionMatrix(C));
        std::atomic<bool> failed{false};
        std::string error_msg;
        std::mutex error_mutex;

        parallel_over_images(dataset.size(), options.threads, [&](size_t i) {
            if (failed.load()) return;
            try {
                const SegmentationSample& s = dataset[i];
                auto eval_condition = [&](const Tensor& img, ConfusionMatrix& cm) {
                    LabelMap pred = argmax_labels(model->forward(img).logits);
                    cm.add(s.labels, pred, s.ignore_value);
                };
                eval_condition(s.image, cm_clean[i]);
                if (patch) {
                    PatchTransform tf;
                    if (options.eot_enabled)
                        tf = sample_transform(options.eot, mix_seed(seed, kSeedEvalEot, i));
                    // Random control: i.i.d. noise patch of equal size,
                    // redrawn per image, same placement.
                    PatchState noise;
                    noise.size = patch_size;
                    noise.pixels = Tensor(3, patch_size, patch_size);
                    Rng nrng(mix_seed(seed, kSeedEvalNoise, i));
                    for (double& v : noise.pixels.v) v = nrng.uniform();
                    eval_condition(apply_patch(s.image, noise, placements[i], tf).image,
                                   cm_random[i]);
                    eval_condition(apply_patch(s.image, *patch, placements[i], tf).image,
                                   cm_patch[i]);
                } else {
                    cm_random[i] = cm_clean[i];
                    cm_patch[i] = cm_clean[i];
                }
            } catch (const std::exception& e) {
                std::lock_guard<std::mutex> lock(error_mutex);
                failed.store(true);
                error_msg = e.what();
            }
        });

        if (failed.load()) {
            res.error = error_msg;
            report.models.push_back(std::move(res));
            continue;  // record the failure, keep evaluating other models
        }
        for (size_t i = 0; i < dataset.size(); ++i) {
            res.cm_clean += cm_clean[i];
            res.cm_random += cm_random[i];
            res.cm_patch += cm_patch[i];
            res.per_image_clean[i] = miou(cm_clean[i]);
            res.per_image_random[i] = miou(cm_random[i]);
            res.per_image_patch[i] = miou(cm_patch[i]);
        }
        res.clean_miou = miou(res.cm_clean);
        res.random_miou = miou(res.cm_random);
        res.patch_miou = miou(res.cm_patch);
        res.drop_vs_clean_pct = 100.0 * (res.clean_miou - res.patch_miou) / res.clean_miou;
        res.drop_vs_random_pct = 100.0 * (res.random_miou - res.patch_miou) / res.random_miou;
        report.models.push_back(std::move(res));
    }
    return report;
}

AblationSuite ablation_suite_from_string(const std::string& s) {
    if (s == "placement") return AblationSuite::placement;
    if (s == "patch_size") return AblationSuite::patch_size;
    if (s == "divergence") return AblationSuite::divergence;
    if (s == "grad_align") return AblationSuite::grad_align;
    throw ConfigError("unknown ablation suite '" + s +
                      "' (expected placement|patch_size|divergence|grad_align)");
}

std::string to_string(AblationSuite s) {
    switch (s) {
        case AblationSuite::placement: return "placement";
        case AblationSuite::patch_size: return "patch_size";
        case AblationSuite::divergence: return "divergence";
        default: return "grad_align";
    }
}

std::vector<AblationVariant> run_ablations(AblationSuite suite, const AblationConfig& base,
                                           const std::vector<SegmentationSample>& train_set,
                                           const std::vector<SegmentationSample>& eval_set,
                                           SurrogateHandle vit, SurrogateHandle cnn,
                                           const std::vector<SurrogateHandle>& targets) {
    struct Variant {
        std::string name;
        LossConfig loss;
        TrainOptions opts;
        PlacementStrategy eval_strategy;
    };
    std::vector<Variant> defs;
    auto mk = [&](const std::string& name) {
        Variant v{name, base.loss, base.train_options, base.eval_options.placement_strategy};
        return v;
    };

    switch (suite) {
        case AblationSuite::placement:
            for (auto strat : {PlacementStrategy::center, PlacementStrategy::random,
                               PlacementStrategy::sensitive}) {
                Variant v = mk(to_string(strat));
                v.opts.placement_strategy = strat;
                v.eval_strategy = strat;
                defs.push_back(std::move(v));
            }
            break;
        case AblationSuite::patch_size:
            for (int s : base.patch_sizes) {
                Variant v = mk("patch_" + std::to_string(s));
                v.opts.patch_size = s;
                defs.push_back(std::move(v));
            }
            break;
        case AblationSuite::divergence:
            for (auto kind : {DivergenceKind::kl, DivergenceKind::js}) {
                Variant v = mk(to_string(kind));
                v.loss.divergence = kind;
                defs.push_back(std::move(v));
            }
            break;
        case AblationSuite::grad_align:
            for (bool on : {false, true}) {
                Variant v = mk(on ? "align_on" : "align_off");
                if (!on) v.loss.lambda_align = 0.0;
                defs.push_back(std::move(v));
            }
            break;
    }

    std::vector<AblationVariant> out;
    for (auto& def : defs) {
        def.opts.checkpoint_path.clear();  // variants are trained standalone
        def.opts.log_jsonl_path.clear();
        Trainer trainer(def.loss, base.schedule, train_set, vit, cnn, def.opts);
        TrainResult tr = trainer.train();
        EvalOptions eopt = base.eval_options;
        eopt.placement_strategy = def.eval_strategy;
        EvaluationReport rep = evaluate_patch(&tr.patch, targets, eval_set, def.eval_strategy,
                                              base.eval_seed, eopt);
        rep.divergence = to_string(def.loss.divergence);
        rep.align_on = def.loss.lambda_align > 0.0;
        out.push_back({def.name, std::move(rep), std::move(tr.log)});
    }
    return out;
}

void write_report_text(const std::filesystem::path& path, const EvaluationReport& report) {
    std::ofstream out(path);
    if (!out) throw IoError("write_report_text: cannot open " + path.string());
    char line[256];
    out << "condition: patch_size=" << report.patch_size << " placement="
        << report.placement_strategy << " divergence=" << report.divergence
        << " align=" << (report.align_on ? "on" : "off")
        << " eot=" << (report.eot_enabled ? "on" : "off") << " seed=" << report.seed << "\n";
    std::snprintf(line, sizeof(line), "%-28s %12s %12s %12s %10s %10s\n", "model", "clean_miou",
                  "random_miou", "patch_miou", "drop_cln%", "drop_rnd%");
    out << line;
    for (const auto& m : report.models) {
        if (!m.error.empty()) {
            out << m.model_name << "  FAILED: " << m.error << "\n";
            continue;
        }
        std::snprintf(line, sizeof(line), "%-28s %12.4f %12.4f %12.4f %10.2f %10.2f\n",
                      m.model_name.c_str(), m.clean_miou, m.random_miou, m.patch_miou,
                      m.drop_vs_clean_pct, m.drop_vs_random_pct);
        out << line;
    }
}

void write_report_csv(const std::filesystem::path& path, const EvaluationReport& report) {
    std::ofstream out(path);
    if (!out) throw IoError("write_report_csv: cannot open " + path.string());
    out << "model,clean_miou,random_patch_miou,patch_miou,drop_vs_clean_pct,drop_vs_random_pct,"
           "error\n";
    for (const auto& m : report.models)
        out << m.model_name << "," << m.clean_miou << "," << m.random_miou << "," << m.patch_miou
            << "," << m.drop_vs_clean_pct << "," << m.drop_vs_random_pct << "," << m.error << "\n";
}

void write_ablation_csv(const std::filesystem::path& path,
                        const std::vector<AblationVariant>& variants) {
    std::ofstream out(path);
    if (!out) throw IoError("write_ablation_csv: cannot open " + path.string());
    out << "model";
    for (const auto& v : variants) out << "," << v.name;
    out << "\n";
    if (variants.empty()) return;
    for (size_t m = 0; m < variants[0].report.models.size(); ++m) {
        out << variants[0].report.models[m].model_name;
        for (const auto& v : variants) out << "," << v.report.models[m].patch_miou;
        out << "\n";
    }
}

}  // namespace omnipatch
