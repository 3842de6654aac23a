#pragma once

#include <filesystem>
#include <string>

#include "omnipatch/tensor.hpp"

namespace omnipatch {

// Raster IO. Images are binary PPM (P6, 8 bit per channel), label maps are
// binary PGM (P5, 8 bit). Both are lossless for the value ranges used here;
// double image data is quantized with round(v * 255).

void write_ppm(const std::filesystem::path& path, const Tensor& rgb01);
Tensor read_ppm(const std::filesystem::path& path);  // returns 3xHxW in [0,1]

void write_pgm(const std::filesystem::path& path, const LabelMap& labels);
LabelMap read_pgm(const std::filesystem::path& path);

}  // namespace omnipatch
