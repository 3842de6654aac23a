#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "omnipatch/trainer.hpp"

namespace omnipatch {

struct ConfusionMatrix {
    int num_classes = 0;
    std::vector<int64_t> counts;  // rows = ground truth, cols = prediction

    ConfusionMatrix() = default;
    explicit ConfusionMatrix(int c)
        : num_classes(c), counts(static_cast<size_t>(c) * c, 0) {}

    int64_t& at(int gt, int pred) { return counts[static_cast<size_t>(gt) * num_classes + pred]; }
    int64_t at(int gt, int pred) const {
        return counts[static_cast<size_t>(gt) * num_classes + pred];
    }

    void add(const LabelMap& truth, const LabelMap& prediction, int ignore_value);
    ConfusionMatrix& operator+=(const ConfusionMatrix& other);
    int64_t total() const;
};

// Mean over classes with nonzero union of TP/(TP+FP+FN); zero-union classes
// are excluded from the mean. Empty matrix is an error.
double miou(const ConfusionMatrix& cm);

struct ModelEvalResult {
    std::string model_name;
    double clean_miou = 0.0, random_miou = 0.0, patch_miou = 0.0;
    double drop_vs_clean_pct = 0.0, drop_vs_random_pct = 0.0;
    ConfusionMatrix cm_clean, cm_random, cm_patch;
    std::vector<double> per_image_clean, per_image_random, per_image_patch;
    std::string error;  // nonempty if this model failed; run continues
};

struct EvaluationReport {
    std::vector<ModelEvalResult> models;
    // condition metadata
    int patch_size = 0;
    std::string placement_strategy;
    std::string divergence;
    bool align_on = true;
    bool eot_enabled = false;
    uint64_t seed = 0;
};

struct EvalOptions {
    PlacementStrategy placement_strategy = PlacementStrategy::sensitive;
    int dilation_k = 5;
    double sample_fraction_p = 0.2;
    bool eot_enabled = false;  // identity transform unless configured otherwise
    EotParams eot;
    int threads = 1;
    int sensitivity_scan_images = 64;
    int placement_model = -1;  // index into models; -1 = first ViT, else first model
};

// Evaluates clean / random-noise-patch / given-patch conditions for every
// model, with placements paired across conditions per image. `patch` may be
// null: all three conditions then run unpatched (control equality).
EvaluationReport evaluate_patch(const PatchState* patch,
                                const std::vector<SurrogateHandle>& models,
                                const std::vector<SegmentationSample>& dataset,
                                PlacementStrategy placement_strategy, uint64_t seed,
                                const EvalOptions& options = {});

enum class AblationSuite { placement, patch_size, divergence, grad_align };

AblationSuite ablation_suite_from_string(const std::string& s);
std::string to_string(AblationSuite s);

struct AblationVariant {
    std::string name;
    EvaluationReport report;
    TrainLog train_log;
};

struct AblationConfig {
    LossConfig loss;
    TrainSchedule schedule;
    TrainOptions train_options;
    std::vector<int> patch_sizes{200, 300, 400};
    EvalOptions eval_options;
    uint64_t eval_seed = 0;
};

// Trains one patch per suite variant with otherwise-identical seeds and
// evaluates each against the given models.
std::vector<AblationVariant> run_ablations(AblationSuite suite, const AblationConfig& base,
                                           const std::vector<SegmentationSample>& train_set,
                                           const std::vector<SegmentationSample>& eval_set,
                                           SurrogateHandle vit, SurrogateHandle cnn,
                                           const std::vector<SurrogateHandle>& targets);

// Report serialization: aligned text table and CSV with the comparison
// columns (clean / random / patch mIoU and drop percentages).
void write_report_text(const std::filesystem::path& path, const EvaluationReport& report);
void write_report_csv(const std::filesystem::path& path, const EvaluationReport& report);
void write_ablation_csv(const std::filesystem::path& path,
                        const std::vector<AblationVariant>& variants);

}  // namespace omnipatch
