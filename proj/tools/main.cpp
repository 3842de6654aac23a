#include <CLI11.hpp>

#include "omnipatch/cli.hpp"

int main(int argc, char** argv) {
    CLI::App app{"omnipatch: universal adversarial patch training and evaluation"};
    app.require_subcommand(1);

    omnipatch::cli::CommonArgs common;
    std::string config_path, out_dir, patch_path, suite = "divergence";
    bool resume = false, dry_run = false;

    auto add_common = [&](CLI::App* sub) {
        sub->add_option("--config", config_path, "JSON run configuration");
        sub->add_option("--set", common.overrides, "override config values (key.path=value)");
        sub->add_option("--out", out_dir, "output directory (overrides config)");
    };

    CLI::App* sensitivity = app.add_subcommand("sensitivity", "class sensitivity scan");
    add_common(sensitivity);

    CLI::App* train = app.add_subcommand("train", "train a universal patch");
    add_common(train);
    train->add_flag("--resume", resume, "resume from the checkpoint in the output directory");
    train->add_flag("--dry-run", dry_run, "execute only the first batch of each stage");

    CLI::App* evaluate = app.add_subcommand("evaluate", "clean/random/patch mIoU comparison");
    add_common(evaluate);
    evaluate->add_option("--patch", patch_path, "patch raster (.ppm) or checkpoint (.json)");

    CLI::App* ablate = app.add_subcommand("ablate", "run an ablation suite");
    add_common(ablate);
    ablate->add_option("--suite", suite, "placement|patch_size|divergence|grad_align")
        ->required();

    CLI11_PARSE(app, argc, argv);

    if (!config_path.empty()) common.config_file = config_path;
    if (!out_dir.empty()) common.out_dir = out_dir;

    if (sensitivity->parsed()) return omnipatch::cli::cmd_sensitivity(common);
    if (train->parsed()) return omnipatch::cli::cmd_train(common, resume, dry_run);
    if (evaluate->parsed()) {
        std::optional<std::filesystem::path> patch;
        if (!patch_path.empty()) patch = patch_path;
        return omnipatch::cli::cmd_evaluate(common, patch);
    }
    if (ablate->parsed()) return omnipatch::cli::cmd_ablate(common, suite);
    return 1;
}
