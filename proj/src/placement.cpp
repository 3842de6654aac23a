#include "omnipatch/placement.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include "omnipatch/image_io.hpp"
#include "omnipatch/rng.hpp"

namespace omnipatch {

namespace {
constexpr double kEps = 1e-12;
}

std::string to_string(PlacementStrategy s) {
    switch (s) {
        case PlacementStrategy::sensitive: return "sensitive";
        case PlacementStrategy::center: return "center";
        default: return "random";
    }
}

PlacementStrategy placement_strategy_from_string(const std::string& s) {
    if (s == "sensitive") return PlacementStrategy::sensitive;
    if (s == "center") return PlacementStrategy::center;
    if (s == "random") return PlacementStrategy::random;
    throw ConfigError("unknown placement strategy '" + s + "'");
}

EntropyMap compute_entropy_map(const Tensor& probabilities) {
    int C = probabilities.c;
    if (C < 2) throw ConfigError("compute_entropy_map: need at least 2 classes");
    double inv_log_c = 1.0 / std::log(static_cast<double>(C));
    EntropyMap out(probabilities.h, probabilities.w);
    for (int y = 0; y < probabilities.h; ++y) {
        for (int x = 0; x < probabilities.w; ++x) {
            double sum = 0.0, ent = 0.0;
            for (int ci = 0; ci < C; ++ci) {
                double p = probabilities.at(ci, y, x);
                sum += p;
                ent -= p * std::log(p + kEps);
            }
            if (std::abs(sum - 1.0) > 1e-4)
                throw ContractError("compute_entropy_map: distribution does not sum to 1");
            out.at(y, x) = std::clamp(ent * inv_log_c, 0.0, 1.0);
        }
    }
    return out;
}

double class_mean_entropy(const EntropyMap& entropy, const LabelMap& labels, int class_id) {
    if (entropy.h != labels.h || entropy.w != labels.w)
        throw ContractError("class_mean_entropy: shape mismatch");
    double num = 0.0, den = 0.0;
    for (int y = 0; y < labels.h; ++y)
        for (int x = 0; x < labels.w; ++x)
            if (labels.at(y, x) == class_id) {
                num += entropy.at(y, x);
                den += 1.0;
            }
    return num / (den + kEps);
}

SensitivityReport sensitivity_scan(const Surrogate& model,
                                   const std::vector<SegmentationSample>& dataset,
                                   LabelSource label_source, bool strict_denominator) {
    if (dataset.empty()) throw ConfigError("sensitivity_scan: empty dataset");
    int C = model.num_classes();
    if (C < 2) throw ContractError("sensitivity_scan: model produces no class distribution");

    SensitivityReport rep;
    rep.per_class_scores.assign(C, 0.0);
    rep.images_with_class.assign(C, 0);
    rep.images_counted = static_cast<int>(dataset.size());

    for (const auto& sample : dataset) {
        ModelOutput out = model.forward(sample.image);
        EntropyMap ent = compute_entropy_map(out.probabilities());
        LabelMap labels = (label_source == LabelSource::predicted) ? argmax_labels(out.logits)
                                                                   : sample.labels;
        std::vector<double> means(C, 0.0);
        for (int cls = 0; cls < C; ++cls) {
            bool present = false;
            for (int32_t lab : labels.v)
                if (lab == cls) {
                    present = true;
                    break;
                }
            if (!present) continue;
            means[cls] = class_mean_entropy(ent, labels, cls);
            rep.per_class_scores[cls] += means[cls];
            rep.images_with_class[cls] += 1;
        }
        rep.per_image_means.push_back(std::move(means));
    }

    for (int cls = 0; cls < C; ++cls) {
        int denom = strict_denominator ? rep.images_counted : rep.images_with_class[cls];
        rep.per_class_scores[cls] = (denom > 0) ? rep.per_class_scores[cls] / denom : 0.0;
    }

    rep.selected_class = -1;
    double best = -1.0;
    for (int cls = 0; cls < C; ++cls) {
        if (rep.images_with_class[cls] == 0) continue;  // absent everywhere
        if (rep.per_class_scores[cls] > best) {
            best = rep.per_class_scores[cls];
            rep.selected_class = cls;
        }
    }
    if (rep.selected_class < 0)
        throw ContractError("sensitivity_scan: no class present in any image");
    return rep;
}

Mask dilate_mask(const Mask& mask, int k) {
    if (k < 1 || k % 2 == 0) throw ConfigError("dilate_mask: kernel size must be odd and >= 1");
    if (k == 1) return mask;
    int r = k / 2;
    // Separable: horizontal max-run, then vertical.
    Mask tmp(mask.h, mask.w);
    for (int y = 0; y < mask.h; ++y) {
        for (int x = 0; x < mask.w; ++x) {
            uint8_t v = 0;
            int x0 = std::max(0, x - r), x1 = std::min(mask.w - 1, x + r);
            for (int xx = x0; xx <= x1 && !v; ++xx) v = mask.at(y, xx);
            tmp.at(y, x) = v;
        }
    }
    Mask out(mask.h, mask.w);
    for (int y = 0; y < mask.h; ++y) {
        int y0 = std::max(0, y - r), y1 = std::min(mask.h - 1, y + r);
        for (int x = 0; x < mask.w; ++x) {
            uint8_t v = 0;
            for (int yy = y0; yy <= y1 && !v; ++yy) v = tmp.at(yy, x);
            out.at(y, x) = v;
        }
    }
    return out;
}

PlacementRegion build_region(const Mask& mask, const EntropyMap& entropy, int patch_size, int k,
                             double p) {
    if (mask.h != entropy.h || mask.w != entropy.w)
        throw ContractError("build_region: mask/entropy shape mismatch");
    if (patch_size > std::min(mask.h, mask.w))
        throw ConfigError("build_region: patch exceeds image dimensions");
    if (!(p > 0.0 && p <= 1.0)) throw ConfigError("build_region: p must lie in (0,1]");

    PlacementRegion region;
    region.mask = dilate_mask(mask, k);
    region.dilation_k = k;
    region.patch_size = patch_size;
    region.sample_fraction = p;

    int H = mask.h, W = mask.w, S = patch_size;
    // S/2 <= y <= H - S/2 evaluated exactly in integers (2y >= S, 2y <= 2H-S).
    for (int y = 0; y < H; ++y) {
        if (2 * y < S || 2 * y > 2 * H - S) continue;
        for (int x = 0; x < W; ++x) {
            if (2 * x < S || 2 * x > 2 * W - S) continue;
            if (region.mask.at(y, x)) region.feasible_centers.emplace_back(y, x);
        }
    }
    if (region.feasible_centers.empty()) return region;

    std::vector<double> values;
    values.reserve(region.feasible_centers.size());
    for (auto [y, x] : region.feasible_centers) values.push_back(entropy.at(y, x));
    std::vector<double> sorted = values;
    std::sort(sorted.begin(), sorted.end(), std::greater<>());
    // tau = the ceil(p*N)-th largest entropy, so that |{e >= tau}| >= ceil(p*N)
    // with ties included.
    size_t n = sorted.size();
    size_t rank = static_cast<size_t>(std::ceil(p * static_cast<double>(n)));
    rank = std::clamp<size_t>(rank, 1, n);
    region.quantile_tau = sorted[rank - 1];
    for (size_t i = 0; i < values.size(); ++i)
        if (values[i] >= region.quantile_tau) region.top_centers.push_back(region.feasible_centers[i]);
    return region;
}

Placement sample_placement(const PlacementRegion& region, uint64_t rng_seed, int image_h,
                           int image_w, PlacementStrategy strategy) {
    int S = region.patch_size;
    if (S <= 0 || S > std::min(image_h, image_w))
        throw ConfigError("sample_placement: patch does not fit in the image");

    Rng rng(rng_seed);
    Placement pl;
    pl.patch_size = S;
    pl.strategy = strategy;

    auto uniform_topleft = [&]() {
        pl.y0 = static_cast<int>(rng.uniform_index(static_cast<uint64_t>(image_h - S + 1)));
        pl.x0 = static_cast<int>(rng.uniform_index(static_cast<uint64_t>(image_w - S + 1)));
    };

    switch (strategy) {
        case PlacementStrategy::sensitive:
            if (!region.top_centers.empty()) {
                auto [yc, xc] = region.top_centers[rng.uniform_index(region.top_centers.size())];
                pl.y0 = yc - S / 2;
                pl.x0 = xc - S / 2;
            } else {
                uniform_topleft();  // no valid region: sample randomly
            }
            break;
        case PlacementStrategy::center:
            pl.y0 = (image_h - S) / 2;
            pl.x0 = (image_w - S) / 2;
            break;
        case PlacementStrategy::random:
            uniform_topleft();
            break;
    }
    return pl;
}

void write_sensitivity_csv(const std::filesystem::path& path, const SensitivityReport& report) {
    std::ofstream out(path);
    if (!out) throw IoError("write_sensitivity_csv: cannot open " + path.string());
    out << "class,score,images_with_class,images_counted,selected\n";
    for (size_t cls = 0; cls < report.per_class_scores.size(); ++cls)
        out << cls << "," << report.per_class_scores[cls] << "," << report.images_with_class[cls]
            << "," << report.images_counted << ","
            << (static_cast<int>(cls) == report.selected_class ? 1 : 0) << "\n";
}

void write_sensitivity_chart(const std::filesystem::path& path, const SensitivityReport& report) {
    int C = static_cast<int>(report.per_class_scores.size());
    int bar_w = 14, gap = 4, height = 128, margin = 8;
    Tensor img(3, height + 2 * margin, C * (bar_w + gap) + gap + 2 * margin, 1.0);
    double max_score = 1e-9;
    for (double s : report.per_class_scores) max_score = std::max(max_score, s);
    for (int cls = 0; cls < C; ++cls) {
        int bh = static_cast<int>(std::lround(height * report.per_class_scores[cls] / max_score));
        int x0 = margin + gap + cls * (bar_w + gap);
        bool sel = (cls == report.selected_class);
        for (int y = 0; y < bh; ++y)
            for (int x = 0; x < bar_w; ++x) {
                int yy = margin + height - 1 - y;
                img.at(0, yy, x0 + x) = sel ? 0.85 : 0.25;
                img.at(1, yy, x0 + x) = sel ? 0.30 : 0.45;
                img.at(2, yy, x0 + x) = sel ? 0.20 : 0.80;
            }
    }
    write_ppm(path, img);
}

}  // namespace omnipatch
