#pragma once

#include <filesystem>
#include <utility>
#include <vector>

#include "omnipatch/data.hpp"
#include "omnipatch/models.hpp"
#include "omnipatch/tensor.hpp"

namespace omnipatch {

// Normalized pixel-wise predictive entropy, values in [0,1].
using EntropyMap = ScalarMap;

// Per-class sensitivity scores and the selected target class.
struct SensitivityReport {
    std::vector<double> per_class_scores;            // S_c, length C
    int selected_class = -1;                         // c* (argmax, ties -> lowest id)
    std::vector<std::vector<double>> per_image_means;  // B x C class mean entropies
    std::vector<int> images_with_class;              // per class presence count
    int images_counted = 0;                          // B
};

// Feasible placement region for an S x S patch.
struct PlacementRegion {
    Mask mask;  // dilated class mask
    int dilation_k = 1;
    int patch_size = 0;
    std::vector<std::pair<int, int>> feasible_centers;  // (y, x), row-major order
    std::vector<std::pair<int, int>> top_centers;       // high-entropy subset
    double quantile_tau = 0.0;
    double sample_fraction = 1.0;  // p
};

enum class PlacementStrategy { sensitive, center, random };

std::string to_string(PlacementStrategy s);
PlacementStrategy placement_strategy_from_string(const std::string& s);

struct Placement {
    int y0 = 0, x0 = 0;  // top-left pixel coordinates
    int patch_size = 0;
    PlacementStrategy strategy = PlacementStrategy::sensitive;
};

enum class LabelSource { predicted, ground_truth };

// H(h,w) = -(1/log C) * sum_c p log(p + eps), eps = 1e-12, clamped to [0,1].
EntropyMap compute_entropy_map(const Tensor& probabilities);

// Indicator-weighted mean entropy of one class; ~0 when the class is absent.
double class_mean_entropy(const EntropyMap& entropy, const LabelMap& labels, int class_id);

// Scans the dataset with the model's own predictions (or ground truth),
// aggregating class mean entropies into global sensitivity scores.
// `strict_denominator` switches from presence-weighted averaging to the
// plain 1/B average.
SensitivityReport sensitivity_scan(const Surrogate& model,
                                   const std::vector<SegmentationSample>& dataset,
                                   LabelSource label_source = LabelSource::predicted,
                                   bool strict_denominator = false);

// Morphological dilation with a k x k structuring element (k odd),
// zero-padded at borders. Equivalent to max-pooling with stride 1.
Mask dilate_mask(const Mask& mask, int k);

// Dilation + boundary constraints + entropy quantile filtering.
PlacementRegion build_region(const Mask& mask, const EntropyMap& entropy, int patch_size, int k,
                             double p);

// Draws a placement. `sensitive` samples uniformly from the high-entropy
// centers and falls back to a uniform in-bounds draw when the region is
// empty; `center`/`random` ignore the region.
Placement sample_placement(const PlacementRegion& region, uint64_t rng_seed, int image_h,
                           int image_w, PlacementStrategy strategy);

// Report serialization: CSV scores plus a bar-chart raster.
void write_sensitivity_csv(const std::filesystem::path& path, const SensitivityReport& report);
void write_sensitivity_chart(const std::filesystem::path& path, const SensitivityReport& report);

}  // namespace omnipatch
