#include "omnipatch/data.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <set>

#include "omnipatch/image_io.hpp"
#include "omnipatch/rng.hpp"

namespace omnipatch {

void validate_sample(const SegmentationSample& s, int num_classes) {
    if (s.image.c != 3 || s.image.h != s.labels.h || s.image.w != s.labels.w)
        throw ContractError("sample: image/label shape mismatch");
    for (double val : s.image.v)
        if (!(val >= 0.0 && val <= 1.0)) throw ContractError("sample: image value outside [0,1]");
    for (int32_t lab : s.labels.v)
        if (!((lab >= 0 && lab < num_classes) || lab == s.ignore_value))
            throw ContractError("sample: label " + std::to_string(lab) + " out of range");
}

namespace {

struct Rgb {
    double r, g, b;
};

// Stable palette: well-separated hues at two brightness levels. Depends only
// on the class id so every dataset drawn from this generator is one
// distribution regardless of seed.
Rgb class_color(int cls, int num_classes) {
    double t = static_cast<double>(cls) / num_classes;
    double hue = 6.0 * t;
    int sector = static_cast<int>(hue) % 6;
    double f = hue - std::floor(hue);
    double v = (cls % 2 == 0) ? 0.85 : 0.55;
    double s = 0.75;
    double p = v * (1 - s), q = v * (1 - s * f), u = v * (1 - s * (1 - f));
    switch (sector) {
        case 0: return {v, u, p};
        case 1: return {q, v, p};
        case 2: return {p, v, u};
        case 3: return {p, q, v};
        case 4: return {u, p, v};
        default: return {v, p, q};
    }
}

void paint_rect(SegmentationSample& s, int y0, int x0, int y1, int x1, int cls, Rgb col) {
    y0 = std::max(y0, 0);
    x0 = std::max(x0, 0);
    y1 = std::min(y1, s.labels.h);
    x1 = std::min(x1, s.labels.w);
    for (int y = y0; y < y1; ++y) {
        for (int x = x0; x < x1; ++x) {
            s.labels.at(y, x) = cls;
            s.image.at(0, y, x) = col.r;
            s.image.at(1, y, x) = col.g;
            s.image.at(2, y, x) = col.b;
        }
    }
}

}  // namespace

std::vector<SegmentationSample> generate_synthetic_dataset(int num_images, int height, int width,
                                                           int num_classes, uint64_t seed) {
    if (num_images <= 0) throw ConfigError("generate_synthetic_dataset: num_images must be positive");
    if (num_classes < 4) throw ConfigError("generate_synthetic_dataset: need at least 4 classes");
    if (height < 16 || width < 16) throw ConfigError("generate_synthetic_dataset: scene too small");

    std::vector<SegmentationSample> out;
    out.reserve(num_images);
    const int thin_cls = num_classes - 1;

    for (int idx = 0; idx < num_images; ++idx) {
        Rng rng(mix_seed(seed, 0x5ce9eULL, static_cast<uint64_t>(idx)));
        SegmentationSample s;
        s.image = Tensor(3, height, width);
        s.labels = LabelMap(height, width);

        double jitter = rng.uniform(-0.06, 0.06);  // per-image brightness shift
        auto shade = [&](Rgb c) {
            return Rgb{c.r + jitter, c.g + jitter, c.b + jitter};
        };

        // Background bands: sky / mid / ground.
        int r1 = static_cast<int>(height * rng.uniform(0.22, 0.34));
        int r2 = static_cast<int>(height * rng.uniform(0.52, 0.66));
        paint_rect(s, 0, 0, r1, width, 0, shade(class_color(0, num_classes)));
        paint_rect(s, r1, 0, r2, width, 1, shade(class_color(1, num_classes)));
        paint_rect(s, r2, 0, height, width, 2, shade(class_color(2, num_classes)));

        // Mid-size blobs for classes 3 .. C-2.
        for (int cls = 3; cls < thin_cls; ++cls) {
            int n_blobs = rng.uniform_int(1, 2);
            for (int b = 0; b < n_blobs; ++b) {
                int bh = rng.uniform_int(height / 8, height / 3);
                int bw = rng.uniform_int(width / 10, width / 4);
                int y0 = rng.uniform_int(r1 / 2, height - bh - 1);
                int x0 = rng.uniform_int(0, width - bw - 1);
                paint_rect(s, y0, x0, y0 + bh, x0 + bw, cls, shade(class_color(cls, num_classes)));
            }
        }

        // Thin elongated structures (the rare, high-uncertainty class).
        int bar_w = std::max(1, width / 128);
        int n_bars = rng.uniform_int(2, 4);
        for (int b = 0; b < n_bars; ++b) {
            int bh = static_cast<int>(height * rng.uniform(0.30, 0.50));
            int y0 = rng.uniform_int(r1 / 2, height - bh - 1);
            int x0 = rng.uniform_int(1, width - bar_w - 1);
            paint_rect(s, y0, x0, y0 + bh, x0 + bar_w, thin_cls,
                       shade(class_color(thin_cls, num_classes)));
        }

        // Pixel noise, then clamp to [0,1].
        for (double& val : s.image.v) {
            val += rng.uniform(-0.03, 0.03);
            val = std::clamp(val, 0.0, 1.0);
        }
        out.push_back(std::move(s));
    }
    return out;
}

std::vector<SegmentationSample> load_dataset(const std::filesystem::path& root,
                                             const std::string& split, int height, int width) {
    namespace fs = std::filesystem;
    fs::path img_dir = root / split / "images";
    fs::path lab_dir = root / split / "labels";
    if (!fs::is_directory(img_dir) || !fs::is_directory(lab_dir))
        throw IoError("load_dataset: missing images/ or labels/ under " + (root / split).string());

    std::set<std::string> img_stems, lab_stems;
    for (const auto& e : fs::directory_iterator(img_dir))
        if (e.path().extension() == ".ppm") img_stems.insert(e.path().stem().string());
    for (const auto& e : fs::directory_iterator(lab_dir))
        if (e.path().extension() == ".pgm") lab_stems.insert(e.path().stem().string());

    std::vector<std::string> unpaired;
    for (const auto& st : img_stems)
        if (!lab_stems.count(st)) unpaired.push_back(st + " (image without label)");
    for (const auto& st : lab_stems)
        if (!img_stems.count(st)) unpaired.push_back(st + " (label without image)");
    if (!unpaired.empty()) {
        std::string msg = "load_dataset: unpaired files:";
        for (const auto& u : unpaired) msg += " " + u;
        throw IoError(msg);
    }
    if (img_stems.empty()) throw IoError("load_dataset: no image/label pairs under " + img_dir.string());

    std::vector<SegmentationSample> out;
    out.reserve(img_stems.size());
    for (const auto& st : img_stems) {  // std::set iteration keeps stems sorted
        SegmentationSample s;
        s.image = bilinear_resize(read_ppm(img_dir / (st + ".ppm")), height, width);
        for (double& val : s.image.v) val = std::clamp(val, 0.0, 1.0);
        s.labels = nearest_resize(read_pgm(lab_dir / (st + ".pgm")), height, width);
        out.push_back(std::move(s));
    }
    return out;
}

void save_dataset(const std::filesystem::path& root, const std::string& split,
                  const std::vector<SegmentationSample>& samples) {
    namespace fs = std::filesystem;
    fs::create_directories(root / split / "images");
    fs::create_directories(root / split / "labels");
    char stem[16];
    for (size_t i = 0; i < samples.size(); ++i) {
        std::snprintf(stem, sizeof(stem), "%06zu", i);
        write_ppm(root / split / "images" / (std::string(stem) + ".ppm"), samples[i].image);
        write_pgm(root / split / "labels" / (std::string(stem) + ".pgm"), samples[i].labels);
    }
}

}  // namespace omnipatch
