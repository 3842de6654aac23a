#pragma once

#include <filesystem>
#include <optional>
#include <unordered_map>
#include <vector>

#include "omnipatch/applicator.hpp"
#include "omnipatch/losses.hpp"
#include "omnipatch/models.hpp"
#include "omnipatch/placement.hpp"

namespace omnipatch {

enum class OptimizerKind { signed_gradient, adaptive };

std::string to_string(OptimizerKind k);
OptimizerKind optimizer_from_string(const std::string& s);

struct TrainSchedule {
    int stage1_epochs = 10;
    int stage2_epochs = 10;
    int batches_per_epoch = 150;
    int batch_size = 2;
    int attack_iterations = 7;  // optimizer steps per batch
    OptimizerKind optimizer = OptimizerKind::signed_gradient;
    double step_size = 1.0 / 255.0;
    uint64_t seed = 0;

    void validate() const;
    int total_epochs() const { return stage1_epochs + stage2_epochs; }
};

struct StepRecord {
    int epoch = 0, batch = 0, iteration = 0;
    Stage stage = Stage::stage1;
    LossBreakdown loss;
};

struct PlacementRecord {
    int epoch = 0;
    size_t image_index = 0;
    Placement placement;
};

struct TrainLog {
    std::vector<StepRecord> steps;
    std::vector<LossBreakdown> epoch_means;
    std::vector<PlacementRecord> placements;
    int stage_switch_epoch = 0;  // first stage-2 epoch index
    double wall_seconds = 0.0;
};

enum class PatchInit { uniform_random, gray };

// uniform_random: i.i.d. U[0,1]; gray: constant 0.5. Deterministic per seed.
PatchState initialize_patch(int size, PatchInit mode, uint64_t seed);

// Everything the training loop needs beyond LossConfig/TrainSchedule.
struct TrainOptions {
    EotParams eot;
    int dilation_k = 5;
    double sample_fraction_p = 0.2;
    PlacementStrategy placement_strategy = PlacementStrategy::sensitive;
    int patch_size = 200;
    PatchInit patch_init = PatchInit::uniform_random;
    uint64_t patch_seed = 0;
    int sensitivity_scan_images = 64;  // cap on the initial c* scan
    LabelSource scan_label_source = LabelSource::predicted;
    bool scan_strict_denominator = false;
    std::filesystem::path checkpoint_path;  // empty: no checkpoints
    std::filesystem::path log_jsonl_path;   // empty: no streaming step log
    bool resume = false;
    bool dry_run = false;  // execute only the first batch of each stage
};

struct TrainResult {
    PatchState patch;
    TrainLog log;
    SensitivityReport sensitivity;  // empty scores when strategy != sensitive
};

// Two-stage universal patch optimization: stage 1 drives the ViT alone,
// stage 2 the ViT+CNN ensemble with JS-partitioned CE and (optionally)
// gradient alignment. EOT is applied at every step. Deterministic for fixed
// seeds; resumable at epoch granularity via the checkpoint file.
class Trainer {
public:
    Trainer(LossConfig config, TrainSchedule schedule, std::vector<SegmentationSample> dataset,
            SurrogateHandle vit, SurrogateHandle cnn, TrainOptions options);

    TrainResult train();

    // One optimizer step on the given images. Exposed for tests; `train()`
    // drives it with its own deterministic stream positions.
    LossBreakdown attack_iteration(PatchState& patch, const std::vector<size_t>& image_indices,
                                   int epoch, int batch_idx, int iter_idx);

    Placement placement_for(size_t image_index, int epoch);
    const SensitivityReport& sensitivity() const { return sensitivity_; }

private:
    struct CleanContext {
        LabelMap vit_pred;
        Tensor vit_probs;
        EntropyMap vit_entropy;
        Tensor cnn_probs;
        bool has_cnn = false;
        Tensor phi;  // per-class signed distance fields of the ground truth
    };

    struct AdamState {
        Tensor m, v;
        long t = 0;
    };

    Stage stage_of(int epoch) const {
        return epoch < schedule_.stage1_epochs ? Stage::stage1 : Stage::stage2;
    }
    CleanContext& context(size_t image_index, bool need_cnn);
    void ensure_sensitivity();
    std::vector<size_t> epoch_sample(int epoch) const;
    void apply_update(PatchState& patch, const Tensor& grad);
    void write_checkpoint(const PatchState& patch, int next_epoch, const TrainLog& log) const;

    // Per-surrogate stage-loss gradient w.r.t. the patch, with frozen
    // partitions/placements/transforms (alignment HVP path).
    struct FrozenStep;
    Tensor stage_patch_gradient(const Tensor& patch_pixels, const FrozenStep& frozen,
                                bool vit_side) const;

    LossConfig config_;
    TrainSchedule schedule_;
    std::vector<SegmentationSample> dataset_;
    SurrogateHandle vit_, cnn_;
    TrainOptions options_;
    SensitivityReport sensitivity_;
    bool sensitivity_done_ = false;
    std::unordered_map<size_t, CleanContext> clean_cache_;
    std::unordered_map<uint64_t, Placement> placement_cache_;
    AdamState adam_;
};

// Full-precision checkpoint: patch + optimizer state + schedule position
// (+ the log so far) in one JSON archive.
struct Checkpoint {
    int next_epoch = 0;
    PatchState patch;
    Tensor adam_m, adam_v;
    long adam_t = 0;
    TrainLog log;
};

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& path);

// Patch artifact: 8-bit lossless raster plus a JSON sidecar (size, stage,
// step count, config hash, EOT ranges).
void save_patch_artifact(const std::filesystem::path& ppm_path, const PatchState& patch,
                         const std::string& config_hash, const EotParams& eot);
PatchState load_patch_artifact(const std::filesystem::path& path);  // .ppm or checkpoint .json

}  // namespace omnipatch
