#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "omnipatch/config.hpp"

namespace omnipatch::cli {

struct CommonArgs {
    std::optional<std::filesystem::path> config_file;
    std::vector<std::string> overrides;                // --set key=value
    std::optional<std::string> out_dir;                // --out
};

// Exit codes: 0 success, 1 validation failure, 2 runtime failure.
int cmd_sensitivity(const CommonArgs& args);
int cmd_train(const CommonArgs& args, bool resume, bool dry_run);
int cmd_evaluate(const CommonArgs& args, const std::optional<std::filesystem::path>& patch_path);
int cmd_ablate(const CommonArgs& args, const std::string& suite);

// Shared assembly helpers (also used by tests).
SurrogateHandle build_model(const ModelSpec& spec, int num_classes,
                            const std::vector<SegmentationSample>* pretrain_data);
std::vector<SegmentationSample> build_train_set(const RunConfig& cfg);
std::vector<SegmentationSample> build_eval_set(const RunConfig& cfg);

}  // namespace omnipatch::cli
