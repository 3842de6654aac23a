#include "omnipatch/cli.hpp"

#include <fstream>
#include <iostream>

#include "omnipatch/image_io.hpp"
#include "omnipatch/rng.hpp"

namespace omnipatch::cli {

namespace fs = std::filesystem;
using json = nlohmann::json;

SurrogateHandle build_model(const ModelSpec& spec, int num_classes,
                            const std::vector<SegmentationSample>* pretrain_data) {
    std::shared_ptr<Surrogate> model;
    if (spec.type == "toy_vit") {
        model = make_toy_vit(spec.token_size, spec.layers, num_classes, spec.seed, spec.downscale,
                             spec.embed_dim);
    } else if (spec.type == "toy_cnn") {
        model = make_toy_cnn(spec.channels, num_classes, spec.seed, spec.downscale);
    } else if (spec.type == "adapter") {
        if (spec.adapter_config.empty())
            throw ConfigError("model spec: adapter requires adapter_config path");
        model = load_adapter_config(spec.adapter_config);
    } else {
        throw ConfigError("model spec: unknown type '" + spec.type + "'");
    }
    if (spec.pretrain_epochs > 0) {
        if (!pretrain_data || pretrain_data->empty())
            throw ConfigError("model spec: pretraining requested but no dataset available");
        model->pretrain(*pretrain_data, spec.pretrain_epochs, spec.pretrain_lr,
                        spec.pretrain_seed);
    }
    return model;
}

std::vector<SegmentationSample> build_train_set(const RunConfig& cfg) {
    if (cfg.dataset.type == "synthetic")
        return generate_synthetic_dataset(cfg.dataset.num_images, cfg.height, cfg.width,
                                          cfg.num_classes, cfg.dataset.seed);
    return load_dataset(cfg.dataset.root, cfg.dataset.train_split, cfg.height, cfg.width);
}

std::vector<SegmentationSample> build_eval_set(const RunConfig& cfg) {
    if (cfg.dataset.type == "synthetic")
        return generate_synthetic_dataset(cfg.dataset.eval_images, cfg.height, cfg.width,
                                          cfg.num_classes, mix_seed(cfg.dataset.seed, 0xEF0ULL));
    return load_dataset(cfg.dataset.root, cfg.dataset.eval_split, cfg.height, cfg.width);
}

namespace {

RunConfig load_config(const CommonArgs& args) {
    RunConfig cfg = load_run_config(args.config_file, args.overrides);
    if (args.out_dir) {
        cfg.out_dir = *args.out_dir;
        cfg.resolved["output"]["dir"] = *args.out_dir;
        cfg.config_hash = config_fingerprint(cfg.resolved);
    }
    return cfg;
}

fs::path prepare_out_dir(const RunConfig& cfg) {
    fs::path out(cfg.out_dir);
    fs::create_directories(out);
    write_resolved_config(out / "resolved_config.json", cfg);
    return out;
}

std::vector<SurrogateHandle> build_targets(const RunConfig& cfg, SurrogateHandle vit,
                                           SurrogateHandle cnn,
                                           const std::vector<SegmentationSample>& train_set) {
    std::vector<SurrogateHandle> targets;
    for (const auto& spec : cfg.targets)
        targets.push_back(build_model(spec, cfg.num_classes, &train_set));
    if (targets.empty()) {
        targets.push_back(std::move(vit));
        targets.push_back(std::move(cnn));
    }
    return targets;
}

int fail(const char* phase, const std::exception& e, int code) {
    std::cerr << "omnipatch: " << phase << " error: " << e.what() << "\n";
    return code;
}

}  // namespace

int cmd_sensitivity(const CommonArgs& args) {
    RunConfig cfg;
    std::vector<SegmentationSample> data;
    SurrogateHandle vit;
    try {
        cfg = load_config(args);
        data = build_train_set(cfg);
        vit = build_model(cfg.vit, cfg.num_classes, &data);
    } catch (const std::exception& e) {
        return fail("validation", e, 1);
    }
    try {
        fs::path out = prepare_out_dir(cfg);
        size_t n = std::min<size_t>(data.size(), std::max(1, cfg.scan_images));
        std::vector<SegmentationSample> subset(data.begin(), data.begin() + n);
        SensitivityReport rep = sensitivity_scan(*vit, subset, cfg.scan_label_source,
                                                 cfg.scan_strict_denominator);
        write_sensitivity_csv(out / "sensitivity.csv", rep);
        write_sensitivity_chart(out / "sensitivity_chart.ppm", rep);
        std::cout << "selected class c* = " << rep.selected_class << "\n";
        return 0;
    } catch (const std::exception& e) {
        return fail("runtime", e, 2);
    }
}

int cmd_train(const CommonArgs& args, bool resume, bool dry_run) {
    RunConfig cfg;
    std::vector<SegmentationSample> data;
    SurrogateHandle vit, cnn;
    try {
        cfg = load_config(args);
        data = build_train_set(cfg);
        vit = build_model(cfg.vit, cfg.num_classes, &data);
        cnn = build_model(cfg.cnn, cfg.num_classes, &data);
    } catch (const std::exception& e) {
        return fail("validation", e, 1);
    }
    try {
        fs::path out = prepare_out_dir(cfg);
        TrainOptions opts = cfg.train_options();
        opts.checkpoint_path = out / "checkpoint.json";
        opts.log_jsonl_path = out / "train_log.jsonl";
        opts.resume = resume;
        opts.dry_run = dry_run;

        if (!resume || !fs::exists(opts.log_jsonl_path)) {
            std::ofstream log(opts.log_jsonl_path, std::ios::trunc);
            json header;
            header["header"] = cfg.resolved;
            header["config_hash"] = cfg.config_hash;
            log << header.dump() << "\n";
        }
        Trainer trainer(cfg.loss, cfg.schedule, data, vit, cnn, opts);
        TrainResult result = trainer.train();

        save_patch_artifact(out / "patch.ppm", result.patch, cfg.config_hash, cfg.eot);
        json summary;
        summary["steps"] = result.log.steps.size();
        summary["stage_switch_epoch"] = result.log.stage_switch_epoch;
        summary["wall_seconds"] = result.log.wall_seconds;
        summary["final_stage"] = to_string(result.patch.stage);
        summary["step_count"] = result.patch.step_count;
        if (!result.sensitivity.per_class_scores.empty())
            summary["selected_class"] = result.sensitivity.selected_class;
        std::ofstream sout(out / "train_summary.json");
        sout << summary.dump(2) << "\n";
        std::cout << "trained patch written to " << (out / "patch.ppm").string() << "\n";
        return 0;
    } catch (const std::exception& e) {
        return fail("runtime", e, 2);
    }
}

int cmd_evaluate(const CommonArgs& args, const std::optional<fs::path>& patch_path) {
    RunConfig cfg;
    std::vector<SegmentationSample> train_set, eval_set;
    std::vector<SurrogateHandle> targets;
    std::optional<PatchState> patch;
    try {
        cfg = load_config(args);
        train_set = build_train_set(cfg);  // pretraining source for targets
        eval_set = build_eval_set(cfg);
        SurrogateHandle vit = build_model(cfg.vit, cfg.num_classes, &train_set);
        SurrogateHandle cnn = build_model(cfg.cnn, cfg.num_classes, &train_set);
        targets = build_targets(cfg, vit, cnn, train_set);
        if (patch_path) patch = load_patch_artifact(*patch_path);
    } catch (const std::exception& e) {
        return fail("validation", e, 1);
    }
    try {
        fs::path out = prepare_out_dir(cfg);
        EvaluationReport rep =
            evaluate_patch(patch ? &*patch : nullptr, targets, eval_set, cfg.placement_strategy,
                           cfg.eval_seed, cfg.eval_options());
        rep.divergence = to_string(cfg.loss.divergence);
        rep.align_on = cfg.loss.lambda_align > 0.0;
        if (patch) {
            write_report_text(out / "report.txt", rep);
            write_report_csv(out / "report.csv", rep);
        } else {
            // Clean-only run: single-column report.
            std::ofstream csv(out / "report.csv");
            csv << "model,clean_miou\n";
            for (const auto& m : rep.models) csv << m.model_name << "," << m.clean_miou << "\n";
            write_report_text(out / "report.txt", rep);
        }
        for (const auto& m : rep.models)
            if (!m.error.empty())
                std::cerr << "model " << m.model_name << " failed: " << m.error << "\n";
        std::cout << "evaluation report written to " << (out / "report.csv").string() << "\n";
        return 0;
    } catch (const std::exception& e) {
        return fail("runtime", e, 2);
    }
}

int cmd_ablate(const CommonArgs& args, const std::string& suite_name) {
    RunConfig cfg;
    AblationSuite suite;
    std::vector<SegmentationSample> train_set, eval_set;
    SurrogateHandle vit, cnn;
    std::vector<SurrogateHandle> targets;
    try {
        cfg = load_config(args);
        suite = ablation_suite_from_string(suite_name);
        train_set = build_train_set(cfg);
        eval_set = build_eval_set(cfg);
        vit = build_model(cfg.vit, cfg.num_classes, &train_set);
        cnn = build_model(cfg.cnn, cfg.num_classes, &train_set);
        targets = build_targets(cfg, vit, cnn, train_set);
    } catch (const std::exception& e) {
        return fail("validation", e, 1);
    }
    try {
        fs::path out = prepare_out_dir(cfg);
        AblationConfig ab;
        ab.loss = cfg.loss;
        ab.schedule = cfg.schedule;
        ab.train_options = cfg.train_options();
        ab.patch_sizes = cfg.ablation_patch_sizes;
        ab.eval_options = cfg.eval_options();
        ab.eval_seed = cfg.eval_seed;
        auto variants = run_ablations(suite, ab, train_set, eval_set, vit, cnn, targets);
        write_ablation_csv(out / ("ablation_" + suite_name + ".csv"), variants);
        for (const auto& v : variants)
            write_report_text(out / ("ablation_" + suite_name + "_" + v.name + ".txt"), v.report);
        std::cout << "ablation table written to "
                  << (out / ("ablation_" + suite_name + ".csv")).string() << "\n";
        return 0;
    } catch (const std::exception& e) {
        return fail("runtime", e, 2);
    }
}

}  // namespace omnipatch::cli
