#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "omnipatch/config.hpp"

using namespace omnipatch;
namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

int run_cli(const std::string& args) {
    std::string cmd = std::string(CLI_BIN) + " " + args + " >/dev/null 2>&1";
    int rc = std::system(cmd.c_str());
    return WEXITSTATUS(rc);
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

fs::path write_desk_config(const fs::path& dir, const json& extra = {}) {
    json cfg = {
        {"num_classes", 5},
        {"resolution", {{"height", 32}, {"width", 48}}},
        {"dataset", {{"type", "synthetic"}, {"num_images", 3}, {"eval_images", 2}, {"seed", 4}}},
        {"models",
         {{"vit", {{"type", "toy_vit"}, {"token_size", 8}, {"layers", 1}, {"embed_dim", 32},
                   {"seed", 1}, {"downscale", 1.0}}},
          {"cnn", {{"type", "toy_cnn"}, {"channels", 6}, {"seed", 2}}}}},
        {"schedule",
         {{"stage1_epochs", 1}, {"stage2_epochs", 1}, {"batches_per_epoch", 1},
          {"batch_size", 1}, {"attack_iterations", 1}}},
        {"patch", {{"size", 10}}},
        {"eot", {{"enabled", false}}},
        {"evaluation", {{"threads", 1}}},
    };
    for (auto it = extra.begin(); it != extra.end(); ++it) cfg[it.key()] = it.value();
    fs::create_directories(dir);
    fs::path path = dir / "config.json";
    std::ofstream out(path);
    out << cfg.dump(2);
    return path;
}

}  // namespace

TEST_CASE("defaults mirror the published hyperparameters") {
    RunConfig cfg = load_run_config(std::nullopt, {});
    CHECK(cfg.loss.gamma == 0.7);
    CHECK(cfg.loss.beta == 0.3);
    CHECK(cfg.loss.lambda_tv == 1e-4);
    CHECK(cfg.loss.lambda_attn == 1e-1);
    CHECK(cfg.loss.lambda_boundary == 2e-1);
    CHECK(cfg.loss.lambda_align == 1e-1);
    CHECK(cfg.loss.divergence == DivergenceKind::js);
    CHECK(cfg.resolved["loss"]["js_threshold"] == "mean");
    CHECK(cfg.dilation_k == 5);
    CHECK(cfg.sample_fraction_p == 0.2);
    CHECK(cfg.schedule.stage1_epochs == 10);
    CHECK(cfg.schedule.stage2_epochs == 10);
    CHECK(cfg.schedule.batches_per_epoch == 150);
    CHECK(cfg.schedule.batch_size == 2);
    CHECK(cfg.schedule.attack_iterations == 7);
    CHECK(cfg.height == 1024);
    CHECK(cfg.width == 2048);
    CHECK(cfg.patch_size == 200);
    CHECK(cfg.vit.downscale == 0.75);
    CHECK(cfg.num_classes == 19);
    CHECK(cfg.placement_strategy == PlacementStrategy::sensitive);
}

TEST_CASE("unknown keys are rejected at any depth") {
    fs::path dir = fs::temp_directory_path() / "omnipatch_cfg1";
    fs::create_directories(dir);
    {
        std::ofstream out(dir / "bad1.json");
        out << R"({"losss": {}})";
    }
    CHECK_THROWS_AS(load_run_config(dir / "bad1.json", {}), ConfigError);
    {
        std::ofstream out(dir / "bad2.json");
        out << R"({"loss": {"gama": 0.5}})";
    }
    CHECK_THROWS_AS(load_run_config(dir / "bad2.json", {}), ConfigError);
    {
        std::ofstream out(dir / "bad3.json");
        out << R"({"models": {"targets": [{"type": "toy_cnn", "chanels": 3}]}})";
    }
    CHECK_THROWS_AS(load_run_config(dir / "bad3.json", {}), ConfigError);
    fs::remove_all(dir);
}

TEST_CASE("--set overrides apply and are validated") {
    RunConfig cfg = load_run_config(std::nullopt, {"loss.gamma=0.5", "schedule.batch_size=4"});
    CHECK(cfg.loss.gamma == 0.5);
    CHECK(cfg.schedule.batch_size == 4);
    CHECK_THROWS_AS(load_run_config(std::nullopt, {"loss.nonsense=1"}), ConfigError);
    CHECK_THROWS_AS(load_run_config(std::nullopt, {"loss.gamma"}), ConfigError);
    CHECK_THROWS_AS(load_run_config(std::nullopt, {"loss.gamma=2.0"}), ConfigError);
    CHECK_THROWS_AS(load_run_config(std::nullopt, {"placement.dilation_k=4"}), ConfigError);
    CHECK_THROWS_AS(load_run_config(std::nullopt, {"placement.strategy=diagonal"}), ConfigError);
    CHECK_THROWS_AS(load_run_config(std::nullopt, {"dataset.type=directory"}), ConfigError);
}

TEST_CASE("target entries with partial keys inherit model defaults") {
    fs::path dir = fs::temp_directory_path() / "omnipatch_cfg_targets";
    fs::create_directories(dir);
    {
        std::ofstream out(dir / "t.json");
        out << R"({"models": {"targets": [{"type": "toy_cnn", "seed": 9}]}})";
    }
    RunConfig cfg = load_run_config(dir / "t.json", {});
    REQUIRE(cfg.targets.size() == 1);
    CHECK(cfg.targets[0].seed == 9);
    CHECK(cfg.targets[0].channels == 16);     // default
    CHECK(cfg.targets[0].downscale == 1.0);   // default
    fs::remove_all(dir);
}

TEST_CASE("placement scan knobs parse and validate") {
    RunConfig cfg = load_run_config(
        std::nullopt,
        {"placement.label_source=ground_truth", "placement.strict_scan_denominator=true"});
    CHECK(cfg.scan_label_source == LabelSource::ground_truth);
    CHECK(cfg.scan_strict_denominator == true);
    CHECK(load_run_config(std::nullopt, {}).scan_label_source == LabelSource::predicted);
    CHECK_THROWS_AS(load_run_config(std::nullopt, {"placement.label_source=oracle"}),
                    ConfigError);
}

TEST_CASE("config fingerprint is stable and sensitive") {
    RunConfig a = load_run_config(std::nullopt, {});
    RunConfig b = load_run_config(std::nullopt, {});
    CHECK(a.config_hash == b.config_hash);
    RunConfig c = load_run_config(std::nullopt, {"loss.gamma=0.6"});
    CHECK(c.config_hash != a.config_hash);
}

TEST_CASE("cli: sensitivity runs, writes reports, is deterministic") {
    fs::path dir = fs::temp_directory_path() / "omnipatch_cli_sens";
    fs::remove_all(dir);
    fs::path cfg = write_desk_config(dir);
    fs::path out = dir / "out";

    REQUIRE(run_cli("sensitivity --config " + cfg.string() + " --out " + out.string()) == 0);
    CHECK(fs::exists(out / "sensitivity.csv"));
    CHECK(fs::exists(out / "sensitivity_chart.ppm"));
    CHECK(fs::exists(out / "resolved_config.json"));

    std::string first_csv = slurp(out / "sensitivity.csv");
    std::string first_cfg = slurp(out / "resolved_config.json");
    REQUIRE(run_cli("sensitivity --config " + cfg.string() + " --out " + out.string()) == 0);
    CHECK(slurp(out / "sensitivity.csv") == first_csv);          // byte-identical
    CHECK(slurp(out / "resolved_config.json") == first_cfg);
    fs::remove_all(dir);
}

TEST_CASE("cli: missing dataset path fails validation with no partial outputs") {
    fs::path dir = fs::temp_directory_path() / "omnipatch_cli_missing";
    fs::remove_all(dir);
    fs::path cfg = write_desk_config(
        dir, json{{"dataset", {{"type", "directory"}, {"root", "/nonexistent/dataset"}}}});
    fs::path out = dir / "out";
    CHECK(run_cli("sensitivity --config " + cfg.string() + " --out " + out.string()) == 1);
    CHECK(!fs::exists(out));
    fs::remove_all(dir);
}

TEST_CASE("cli: train smoke, artifacts, log header, resume equivalence") {
    fs::path dir = fs::temp_directory_path() / "omnipatch_cli_train";
    fs::remove_all(dir);
    fs::path cfg = write_desk_config(dir);

    fs::path full_out = dir / "full";
    REQUIRE(run_cli("train --config " + cfg.string() + " --out " + full_out.string()) == 0);
    CHECK(fs::exists(full_out / "patch.ppm"));
    CHECK(fs::exists(full_out / "patch.ppm.json"));
    CHECK(fs::exists(full_out / "checkpoint.json"));
    CHECK(fs::exists(full_out / "train_summary.json"));
    {
        std::ifstream log(full_out / "train_log.jsonl");
        std::string header_line;
        std::getline(log, header_line);
        json header = json::parse(header_line);
        REQUIRE(header.contains("header"));
        CHECK(header["header"]["loss"]["gamma"] == 0.7);  // untouched default
        CHECK(header["header"]["schedule"]["attack_iterations"] == 1);  // desk override
        int steps = 0;
        std::string line;
        while (std::getline(log, line)) ++steps;
        CHECK(steps == 2);  // 2 epochs x 1 batch x 1 iteration
    }

    // interrupted run: stage 1 only, then resume under the full schedule
    fs::path part_out = dir / "part";
    REQUIRE(run_cli("train --config " + cfg.string() + " --set schedule.stage2_epochs=0 --out " +
                    part_out.string()) == 0);
    REQUIRE(run_cli("train --config " + cfg.string() + " --resume --out " + part_out.string()) ==
            0);
    json full_ck = json::parse(slurp(full_out / "checkpoint.json"));
    json part_ck = json::parse(slurp(part_out / "checkpoint.json"));
    CHECK(full_ck["patch"]["pixels"] == part_ck["patch"]["pixels"]);  // bit-exact resume
    fs::remove_all(dir);
}

TEST_CASE("cli: evaluate with and without a patch") {
    fs::path dir = fs::temp_directory_path() / "omnipatch_cli_eval";
    fs::remove_all(dir);
    fs::path cfg = write_desk_config(dir);
    fs::path tr_out = dir / "tr";
    REQUIRE(run_cli("train --config " + cfg.string() + " --out " + tr_out.string()) == 0);

    fs::path ev_out = dir / "ev";
    REQUIRE(run_cli("evaluate --config " + cfg.string() + " --patch " +
                    (tr_out / "patch.ppm").string() + " --out " + ev_out.string()) == 0);
    std::string csv = slurp(ev_out / "report.csv");
    CHECK(csv.find("clean_miou,random_patch_miou,patch_miou") != std::string::npos);
    CHECK(fs::exists(ev_out / "report.txt"));

    fs::path clean_out = dir / "clean";
    REQUIRE(run_cli("evaluate --config " + cfg.string() + " --out " + clean_out.string()) == 0);
    std::string clean_csv = slurp(clean_out / "report.csv");
    CHECK(clean_csv.find("model,clean_miou\n") == 0);  // single data column

    CHECK(run_cli("evaluate --config " + cfg.string() + " --patch /nonexistent.ppm --out " +
                  (dir / "bad").string()) == 1);
    fs::remove_all(dir);
}

TEST_CASE("cli: ablate validates the suite name and emits the variant table") {
    fs::path dir = fs::temp_directory_path() / "omnipatch_cli_ablate";
    fs::remove_all(dir);
    fs::path cfg = write_desk_config(dir);
    fs::path out = dir / "out";
    REQUIRE(run_cli("ablate --suite divergence --config " + cfg.string() + " --out " +
                    out.string()) == 0);
    std::string csv = slurp(out / "ablation_divergence.csv");
    CHECK(csv.find("kl") != std::string::npos);
    CHECK(csv.find("js") != std::string::npos);

    CHECK(run_cli("ablate --suite bogus --config " + cfg.string() + " --out " +
                  (dir / "x").string()) == 1);
    fs::remove_all(dir);
}

TEST_CASE("cli: bare invocation without a subcommand fails") {
    CHECK(run_cli("") != 0);
}
