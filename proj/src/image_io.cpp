#include "omnipatch/image_io.hpp"

#include <cmath>
#include <fstream>
#include <vector>

namespace omnipatch {

namespace {

void skip_ws_and_comments(std::istream& in) {
    for (;;) {
        int ch = in.peek();
        if (ch == '#') {
            std::string line;
            std::getline(in, line);
        } else if (std::isspace(ch)) {
            in.get();
        } else {
            return;
        }
    }
}

int read_pnm_int(std::istream& in) {
    skip_ws_and_comments(in);
    int val = -1;
    in >> val;
    return val;
}

uint8_t to_byte(double v) {
    double s = std::lround(v * 255.0);
    if (s < 0) s = 0;
    if (s > 255) s = 255;
    return static_cast<uint8_t>(s);
}

}  // namespace

void write_ppm(const std::filesystem::path& path, const Tensor& rgb01) {
    if (rgb01.c != 3) throw IoError("write_ppm: expected 3 channels, got " + std::to_string(rgb01.c));
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("write_ppm: cannot open " + path.string());
    out << "P6\n" << rgb01.w << " " << rgb01.h << "\n255\n";
    std::vector<uint8_t> row(static_cast<size_t>(rgb01.w) * 3);
    for (int y = 0; y < rgb01.h; ++y) {
        for (int x = 0; x < rgb01.w; ++x)
            for (int ci = 0; ci < 3; ++ci) row[x * 3 + ci] = to_byte(rgb01.at(ci, y, x));
        out.write(reinterpret_cast<const char*>(row.data()), static_cast<std::streamsize>(row.size()));
    }
    if (!out) throw IoError("write_ppm: write failed for " + path.string());
}

Tensor read_ppm(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("read_ppm: cannot open " + path.string());
    std::string magic;
    in >> magic;
    if (magic != "P6") throw IoError("read_ppm: " + path.string() + " is not a binary PPM");
    int w = read_pnm_int(in), h = read_pnm_int(in), maxval = read_pnm_int(in);
    if (w <= 0 || h <= 0 || maxval != 255)
        throw IoError("read_ppm: unsupported header in " + path.string());
    in.get();  // single whitespace after maxval
    std::vector<uint8_t> row(static_cast<size_t>(w) * 3);
    Tensor img(3, h, w);
    for (int y = 0; y < h; ++y) {
        in.read(reinterpret_cast<char*>(row.data()), static_cast<std::streamsize>(row.size()));
        if (!in) throw IoError("read_ppm: truncated data in " + path.string());
        for (int x = 0; x < w; ++x)
            for (int ci = 0; ci < 3; ++ci) img.at(ci, y, x) = row[x * 3 + ci] / 255.0;
    }
    return img;
}

void write_pgm(const std::filesystem::path& path, const LabelMap& labels) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("write_pgm: cannot open " + path.string());
    out << "P5\n" << labels.w << " " << labels.h << "\n255\n";
    std::vector<uint8_t> row(static_cast<size_t>(labels.w));
    for (int y = 0; y < labels.h; ++y) {
        for (int x = 0; x < labels.w; ++x) {
            int32_t val = labels.at(y, x);
            if (val < 0 || val > 255)
                throw IoError("write_pgm: label " + std::to_string(val) + " out of 8-bit range");
            row[x] = static_cast<uint8_t>(val);
        }
        out.write(reinterpret_cast<const char*>(row.data()), static_cast<std::streamsize>(row.size()));
    }
    if (!out) throw IoError("write_pgm: write failed for " + path.string());
}

LabelMap read_pgm(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("read_pgm: cannot open " + path.string());
    std::string magic;
    in >> magic;
    if (magic != "P5") throw IoError("read_pgm: " + path.string() + " is not a binary PGM");
    int w = read_pnm_int(in), h = read_pnm_int(in), maxval = read_pnm_int(in);
    if (w <= 0 || h <= 0 || maxval != 255)
        throw IoError("read_pgm: unsupported header in " + path.string());
    in.get();
    std::vector<uint8_t> row(static_cast<size_t>(w));
    LabelMap labels(h, w);
    for (int y = 0; y < h; ++y) {
        in.read(reinterpret_cast<char*>(row.data()), static_cast<std::streamsize>(row.size()));
        if (!in) throw IoError("read_pgm: truncated data in " + path.string());
        for (int x = 0; x < w; ++x) labels.at(y, x) = row[x];
    }
    return labels;
}

}  // namespace omnipatch
