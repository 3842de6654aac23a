#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "omnipatch/tensor.hpp"

namespace omnipatch {

constexpr int kIgnoreLabel = 255;

// One ingested image: RGB in [0,1] plus an integer label raster. Labels are
// class ids in [0, C) or kIgnoreLabel for unlabeled pixels.
struct SegmentationSample {
    Tensor image;  // 3 x H x W
    LabelMap labels;
    int ignore_value = kIgnoreLabel;
};

// Throws ContractError if a sample violates its invariants.
void validate_sample(const SegmentationSample& s, int num_classes);

// Deterministic desk-scale scenes: layered background bands, per-class blobs,
// and thin elongated structures for the last class so at least one class stays
// rare (<2% mean coverage). The class->color mapping depends only on
// num_classes, so datasets drawn with different seeds share one distribution.
std::vector<SegmentationSample> generate_synthetic_dataset(int num_images, int height, int width,
                                                           int num_classes, uint64_t seed);

// Directory layout: <root>/<split>/images/<stem>.ppm paired with
// <root>/<split>/labels/<stem>.pgm. Unpaired stems on either side are an
// ingestion error listing every offender. Images are resized bilinearly to
// the requested resolution, labels with nearest-neighbor only.
std::vector<SegmentationSample> load_dataset(const std::filesystem::path& root,
                                             const std::string& split, int height, int width);

// Writes samples in the load_dataset layout (stems 000000, 000001, ...).
void save_dataset(const std::filesystem::path& root, const std::string& split,
                  const std::vector<SegmentationSample>& samples);

}  // namespace omnipatch
