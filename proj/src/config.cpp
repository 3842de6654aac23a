#include "omnipatch/config.hpp"

#include <fstream>
#include <sstream>

namespace omnipatch {

using json = nlohmann::json;

namespace {

json model_spec_json(const ModelSpec& m) {
    return json{{"type", m.type},
                {"channels", m.channels},
                {"token_size", m.token_size},
                {"layers", m.layers},
                {"embed_dim", m.embed_dim},
                {"seed", m.seed},
                {"downscale", m.downscale},
                {"pretrain_epochs", m.pretrain_epochs},
                {"pretrain_lr", m.pretrain_lr},
                {"pretrain_seed", m.pretrain_seed},
                {"adapter_config", m.adapter_config}};
}

// Unknown keys are rejected by the schema walk; absent keys fall back to the
// defaults (target-list entries are not merged element-wise).
ModelSpec model_spec_from(const json& j) {
    ModelSpec defaults;
    ModelSpec m;
    m.type = j.value("type", defaults.type);
    m.channels = j.value("channels", defaults.channels);
    m.token_size = j.value("token_size", defaults.token_size);
    m.layers = j.value("layers", defaults.layers);
    m.embed_dim = j.value("embed_dim", defaults.embed_dim);
    m.seed = j.value("seed", defaults.seed);
    m.downscale = j.value("downscale", defaults.downscale);
    m.pretrain_epochs = j.value("pretrain_epochs", defaults.pretrain_epochs);
    m.pretrain_lr = j.value("pretrain_lr", defaults.pretrain_lr);
    m.pretrain_seed = j.value("pretrain_seed", defaults.pretrain_seed);
    m.adapter_config = j.value("adapter_config", defaults.adapter_config);
    if (m.type != "toy_cnn" && m.type != "toy_vit" && m.type != "adapter")
        throw ConfigError("config: model type must be toy_cnn, toy_vit or adapter");
    return m;
}

// Every key in `user` must exist in `schema` (recursively). Object arrays are
// checked against the schema array's first element.
void reject_unknown_keys(const json& schema, const json& user, const std::string& path) {
    if (user.is_object()) {
        if (!schema.is_object())
            throw ConfigError("config: unexpected object at '" + path + "'");
        for (auto it = user.begin(); it != user.end(); ++it) {
            if (!schema.contains(it.key()))
                throw ConfigError("config: unknown key '" +
                                  (path.empty() ? it.key() : path + "." + it.key()) + "'");
            reject_unknown_keys(schema.at(it.key()), it.value(),
                                path.empty() ? it.key() : path + "." + it.key());
        }
    } else if (user.is_array() && schema.is_array() && !schema.empty()) {
        for (size_t i = 0; i < user.size(); ++i)
            reject_unknown_keys(schema.front(), user[i], path + "[" + std::to_string(i) + "]");
    }
}

void merge_into(json& base, const json& user) {
    if (!user.is_object()) {
        base = user;
        return;
    }
    for (auto it = user.begin(); it != user.end(); ++it) {
        if (base.contains(it.key()) && base.at(it.key()).is_object() && it.value().is_object())
            merge_into(base.at(it.key()), it.value());
        else
            base[it.key()] = it.value();
    }
}

// --set a.b.c=value with the value parsed as JSON when possible, else string.
void apply_override(json& cfg, const std::string& kv) {
    auto eq = kv.find('=');
    if (eq == std::string::npos) throw ConfigError("--set expects key=value, got '" + kv + "'");
    std::string key = kv.substr(0, eq);
    std::string value = kv.substr(eq + 1);
    json parsed;
    try {
        parsed = json::parse(value);
    } catch (const json::exception&) {
        parsed = value;  // bare string
    }
    json* node = &cfg;
    std::stringstream ss(key);
    std::string part;
    std::vector<std::string> parts;
    while (std::getline(ss, part, '.')) parts.push_back(part);
    if (parts.empty()) throw ConfigError("--set: empty key");
    for (size_t i = 0; i + 1 < parts.size(); ++i) {
        if (!node->contains(parts[i]))
            throw ConfigError("--set: unknown key '" + key + "'");
        node = &(*node)[parts[i]];
    }
    if (!node->contains(parts.back()))
        throw ConfigError("--set: unknown key '" + key + "'");
    (*node)[parts.back()] = parsed;
}

}  // namespace

json default_config_json() {
    RunConfig d;
    json j;
    j["num_classes"] = d.num_classes;
    j["resolution"] = {{"height", d.height}, {"width", d.width}};
    j["dataset"] = {{"type", d.dataset.type},
                    {"num_images", d.dataset.num_images},
                    {"eval_images", d.dataset.eval_images},
                    {"seed", d.dataset.seed},
                    {"root", d.dataset.root},
                    {"train_split", d.dataset.train_split},
                    {"eval_split", d.dataset.eval_split}};
    ModelSpec vit_default;
    vit_default.type = "toy_vit";
    vit_default.seed = 1;
    vit_default.downscale = 0.75;  // published SegFormer input downscaling
    ModelSpec cnn_default;
    cnn_default.type = "toy_cnn";
    cnn_default.seed = 2;
    j["models"] = {{"vit", model_spec_json(vit_default)},
                   {"cnn", model_spec_json(cnn_default)},
                   {"targets", json::array()}};
    j["placement"] = {{"dilation_k", d.dilation_k},
                      {"sample_fraction_p", d.sample_fraction_p},
                      {"strategy", to_string(d.placement_strategy)},
                      {"scan_images", d.scan_images},
                      {"label_source", "predicted"},
                      {"strict_scan_denominator", d.scan_strict_denominator}};
    j["loss"] = {{"gamma", d.loss.gamma},
                 {"beta", d.loss.beta},
                 {"lambda_tv", d.loss.lambda_tv},
                 {"lambda_attn", d.loss.lambda_attn},
                 {"lambda_boundary", d.loss.lambda_boundary},
                 {"lambda_align", d.loss.lambda_align},
                 {"js_threshold", "mean"},
                 {"divergence", to_string(d.loss.divergence)},
                 {"per_image_partition_mean", d.loss.per_image_partition_mean},
                 {"align_one_side_constant", d.loss.align_one_side_constant},
                 {"attn_layers", d.loss.attn_layers}};
    j["schedule"] = {{"stage1_epochs", d.schedule.stage1_epochs},
                     {"stage2_epochs", d.schedule.stage2_epochs},
                     {"batches_per_epoch", d.schedule.batches_per_epoch},
                     {"batch_size", d.schedule.batch_size},
                     {"attack_iterations", d.schedule.attack_iterations},
                     {"optimizer", to_string(d.schedule.optimizer)},
                     {"step_size", d.schedule.step_size},
                     {"seed", d.schedule.seed}};
    j["patch"] = {{"size", d.patch_size}, {"init", "uniform_random"}, {"seed", d.patch_seed}};
    j["eot"] = {{"enabled", d.eot.enabled},
                {"scale", {d.eot.scale_lo, d.eot.scale_hi}},
                {"rotation_deg", d.eot.rotation_deg},
                {"translation_px", d.eot.translation_px}};
    j["evaluation"] = {{"eot_enabled", d.eval_eot_enabled},
                       {"threads", d.eval_threads},
                       {"seed", d.eval_seed},
                       {"patch_sizes", d.ablation_patch_sizes}};
    j["output"] = {{"dir", d.out_dir}};
    return j;
}

RunConfig load_run_config(const std::optional<std::filesystem::path>& file,
                          const std::vector<std::string>& overrides) {
    json resolved = default_config_json();
    json schema = resolved;
    schema["models"]["targets"] = json::array({model_spec_json(ModelSpec{})});

    if (file) {
        std::ifstream in(*file);
        if (!in) throw ConfigError("config: cannot open " + file->string());
        json user;
        try {
            in >> user;
        } catch (const json::exception& e) {
            throw ConfigError("config: parse error in " + file->string() + ": " + e.what());
        }
        reject_unknown_keys(schema, user, "");
        merge_into(resolved, user);
    }
    for (const auto& kv : overrides) apply_override(resolved, kv);

    RunConfig cfg;
    try {
        cfg.num_classes = resolved.at("num_classes").get<int>();
        cfg.height = resolved.at("resolution").at("height").get<int>();
        cfg.width = resolved.at("resolution").at("width").get<int>();
        const json& ds = resolved.at("dataset");
        cfg.dataset.type = ds.at("type").get<std::string>();
        cfg.dataset.num_images = ds.at("num_images").get<int>();
        cfg.dataset.eval_images = ds.at("eval_images").get<int>();
        cfg.dataset.seed = ds.at("seed").get<uint64_t>();
        cfg.dataset.root = ds.at("root").get<std::string>();
        cfg.dataset.train_split = ds.at("train_split").get<std::string>();
        cfg.dataset.eval_split = ds.at("eval_split").get<std::string>();
        cfg.vit = model_spec_from(resolved.at("models").at("vit"));
        cfg.cnn = model_spec_from(resolved.at("models").at("cnn"));
        for (const auto& t : resolved.at("models").at("targets"))
            cfg.targets.push_back(model_spec_from(t));
        const json& pl = resolved.at("placement");
        cfg.dilation_k = pl.at("dilation_k").get<int>();
        cfg.sample_fraction_p = pl.at("sample_fraction_p").get<double>();
        cfg.placement_strategy = placement_strategy_from_string(pl.at("strategy"));
        cfg.scan_images = pl.at("scan_images").get<int>();
        std::string lsrc = pl.at("label_source").get<std::string>();
        if (lsrc != "predicted" && lsrc != "ground_truth")
            throw ConfigError("config: placement.label_source must be predicted or ground_truth");
        cfg.scan_label_source =
            lsrc == "predicted" ? LabelSource::predicted : LabelSource::ground_truth;
        cfg.scan_strict_denominator = pl.at("strict_scan_denominator").get<bool>();
        const json& lo = resolved.at("loss");
        cfg.loss.gamma = lo.at("gamma").get<double>();
        cfg.loss.beta = lo.at("beta").get<double>();
        cfg.loss.lambda_tv = lo.at("lambda_tv").get<double>();
        cfg.loss.lambda_attn = lo.at("lambda_attn").get<double>();
        cfg.loss.lambda_boundary = lo.at("lambda_boundary").get<double>();
        cfg.loss.lambda_align = lo.at("lambda_align").get<double>();
        if (lo.at("js_threshold").get<std::string>() != "mean")
            throw ConfigError("config: js_threshold supports only 'mean'");
        std::string div = lo.at("divergence").get<std::string>();
        if (div != "js" && div != "kl") throw ConfigError("config: divergence must be js or kl");
        cfg.loss.divergence = div == "js" ? DivergenceKind::js : DivergenceKind::kl;
        cfg.loss.per_image_partition_mean = lo.at("per_image_partition_mean").get<bool>();
        cfg.loss.align_one_side_constant = lo.at("align_one_side_constant").get<bool>();
        cfg.loss.attn_layers = lo.at("attn_layers").get<std::vector<int>>();
        const json& sc = resolved.at("schedule");
        cfg.schedule.stage1_epochs = sc.at("stage1_epochs").get<int>();
        cfg.schedule.stage2_epochs = sc.at("stage2_epochs").get<int>();
        cfg.schedule.batches_per_epoch = sc.at("batches_per_epoch").get<int>();
        cfg.schedule.batch_size = sc.at("batch_size").get<int>();
        cfg.schedule.attack_iterations = sc.at("attack_iterations").get<int>();
        cfg.schedule.optimizer = optimizer_from_string(sc.at("optimizer"));
        cfg.schedule.step_size = sc.at("step_size").get<double>();
        cfg.schedule.seed = sc.at("seed").get<uint64_t>();
        const json& pa = resolved.at("patch");
        cfg.patch_size = pa.at("size").get<int>();
        std::string init = pa.at("init").get<std::string>();
        if (init != "uniform_random" && init != "gray")
            throw ConfigError("config: patch.init must be uniform_random or gray");
        cfg.patch_init = init == "gray" ? PatchInit::gray : PatchInit::uniform_random;
        cfg.patch_seed = pa.at("seed").get<uint64_t>();
        const json& eo = resolved.at("eot");
        cfg.eot.enabled = eo.at("enabled").get<bool>();
        cfg.eot.scale_lo = eo.at("scale")[0].get<double>();
        cfg.eot.scale_hi = eo.at("scale")[1].get<double>();
        cfg.eot.rotation_deg = eo.at("rotation_deg").get<double>();
        cfg.eot.translation_px = eo.at("translation_px").get<double>();
        const json& ev = resolved.at("evaluation");
        cfg.eval_eot_enabled = ev.at("eot_enabled").get<bool>();
        cfg.eval_threads = ev.at("threads").get<int>();
        cfg.eval_seed = ev.at("seed").get<uint64_t>();
        cfg.ablation_patch_sizes = ev.at("patch_sizes").get<std::vector<int>>();
        cfg.out_dir = resolved.at("output").at("dir").get<std::string>();
    } catch (const json::exception& e) {
        throw ConfigError("config: invalid value: " + std::string(e.what()));
    }

    cfg.loss.validate();
    cfg.schedule.validate();
    cfg.eot.validate();
    if (cfg.num_classes < 2) throw ConfigError("config: num_classes must be at least 2");
    if (cfg.height < 16 || cfg.width < 16) throw ConfigError("config: resolution too small");
    if (cfg.dataset.type != "synthetic" && cfg.dataset.type != "directory")
        throw ConfigError("config: dataset.type must be synthetic or directory");
    if (cfg.dataset.type == "directory" && cfg.dataset.root.empty())
        throw ConfigError("config: dataset.root required for directory datasets");
    if (cfg.vit.type != "toy_vit" && cfg.vit.type != "adapter")
        throw ConfigError("config: models.vit must be a toy_vit or a vit adapter");
    if (cfg.cnn.type != "toy_cnn" && cfg.cnn.type != "adapter")
        throw ConfigError("config: models.cnn must be a toy_cnn or a cnn adapter");
    if (!(cfg.sample_fraction_p > 0.0 && cfg.sample_fraction_p <= 1.0))
        throw ConfigError("config: placement.sample_fraction_p must lie in (0,1]");
    if (cfg.dilation_k < 1 || cfg.dilation_k % 2 == 0)
        throw ConfigError("config: placement.dilation_k must be odd");
    if (cfg.eval_threads < 1) throw ConfigError("config: evaluation.threads must be positive");

    cfg.resolved = std::move(resolved);
    cfg.config_hash = config_fingerprint(cfg.resolved);
    return cfg;
}

TrainOptions RunConfig::train_options() const {
    TrainOptions opt;
    opt.eot = eot;
    opt.dilation_k = dilation_k;
    opt.sample_fraction_p = sample_fraction_p;
    opt.placement_strategy = placement_strategy;
    opt.patch_size = patch_size;
    opt.patch_init = patch_init;
    opt.patch_seed = patch_seed;
    opt.sensitivity_scan_images = scan_images;
    opt.scan_label_source = scan_label_source;
    opt.scan_strict_denominator = scan_strict_denominator;
    return opt;
}

EvalOptions RunConfig::eval_options() const {
    EvalOptions opt;
    opt.placement_strategy = placement_strategy;
    opt.dilation_k = dilation_k;
    opt.sample_fraction_p = sample_fraction_p;
    opt.eot_enabled = eval_eot_enabled;
    opt.eot = eot;
    opt.threads = eval_threads;
    opt.sensitivity_scan_images = scan_images;
    return opt;
}

void write_resolved_config(const std::filesystem::path& path, const RunConfig& config) {
    std::ofstream out(path);
    if (!out) throw IoError("write_resolved_config: cannot open " + path.string());
    out << config.resolved.dump(2) << "\n";
}

std::string config_fingerprint(const nlohmann::json& resolved) {
    std::string dump = resolved.dump();
    uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char ch : dump) {
        h ^= ch;
        h *= 0x100000001b3ULL;
    }
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

}  // namespace omnipatch
