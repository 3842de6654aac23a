#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "omnipatch/evaluation.hpp"
#include "omnipatch/losses.hpp"
#include "omnipatch/trainer.hpp"

namespace omnipatch {

// One entry of the models section: a toy network or an external adapter.
struct ModelSpec {
    std::string type = "toy_cnn";  // toy_cnn | toy_vit | adapter
    int channels = 16;             // toy_cnn
    int token_size = 16;           // toy_vit
    int layers = 2;                // toy_vit
    int embed_dim = 48;            // toy_vit
    uint64_t seed = 0;
    double downscale = 1.0;
    int pretrain_epochs = 0;
    double pretrain_lr = 0.05;
    uint64_t pretrain_seed = 11;
    std::string adapter_config;  // adapter: path to the JSON adapter config
};

struct DatasetSpec {
    std::string type = "synthetic";  // synthetic | directory
    int num_images = 40;
    int eval_images = 20;
    uint64_t seed = 7;
    std::string root;
    std::string train_split = "train";
    std::string eval_split = "val";
};

// Declarative run configuration. Defaults mirror the published
// hyperparameters; unknown keys are rejected and the fully-resolved config is
// echoed alongside every run's outputs.
struct RunConfig {
    int num_classes = 19;
    int height = 1024, width = 2048;
    DatasetSpec dataset;
    ModelSpec vit;
    ModelSpec cnn;
    std::vector<ModelSpec> targets;

    // placement
    int dilation_k = 5;
    double sample_fraction_p = 0.2;
    PlacementStrategy placement_strategy = PlacementStrategy::sensitive;
    int scan_images = 64;
    LabelSource scan_label_source = LabelSource::predicted;
    bool scan_strict_denominator = false;  // plain 1/B averaging in the scan

    LossConfig loss;
    TrainSchedule schedule;

    int patch_size = 200;
    PatchInit patch_init = PatchInit::uniform_random;
    uint64_t patch_seed = 0;

    EotParams eot;

    bool eval_eot_enabled = false;
    int eval_threads = 2;
    uint64_t eval_seed = 0;
    std::vector<int> ablation_patch_sizes{200, 300, 400};

    std::string out_dir = "out";

    nlohmann::json resolved;  // defaults merged with file + overrides
    std::string config_hash;

    TrainOptions train_options() const;
    EvalOptions eval_options() const;
};

// Default configuration as JSON (the single source of the key schema).
nlohmann::json default_config_json();

// Loads, merges and validates: defaults <- optional file <- --set overrides.
// Unknown keys anywhere are a configuration error.
RunConfig load_run_config(const std::optional<std::filesystem::path>& file,
                          const std::vector<std::string>& overrides);

void write_resolved_config(const std::filesystem::path& path, const RunConfig& config);

// FNV-1a hash of the canonical resolved dump; identifies a training config in
// patch sidecars.
std::string config_fingerprint(const nlohmann::json& resolved);

}  // namespace omnipatch
