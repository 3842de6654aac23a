#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <fstream>

#include "omnipatch/data.hpp"
#include "omnipatch/image_io.hpp"

using namespace omnipatch;
namespace fs = std::filesystem;

TEST_CASE("synthetic dataset: contract, label range, determinism") {
    auto set = generate_synthetic_dataset(20, 128, 256, 8, 1);
    REQUIRE(set.size() == 20);
    for (const auto& s : set) {
        validate_sample(s, 8);
        CHECK(s.image.h == 128);
        CHECK(s.image.w == 256);
        for (int32_t lab : s.labels.v) {
            CHECK(lab >= 0);
            CHECK(lab < 8);
        }
    }
    auto again = generate_synthetic_dataset(20, 128, 256, 8, 1);
    for (size_t i = 0; i < set.size(); ++i) {
        CHECK(set[i].image.v == again[i].image.v);
        CHECK(set[i].labels.v == again[i].labels.v);
    }
    auto other_seed = generate_synthetic_dataset(20, 128, 256, 8, 2);
    CHECK(set[0].image.v != other_seed[0].image.v);
}

TEST_CASE("synthetic dataset: thin-structure class stays under 2% coverage") {
    auto set = generate_synthetic_dataset(100, 128, 256, 8, 5);
    double covered = 0.0, total = 0.0;
    for (const auto& s : set) {
        for (int32_t lab : s.labels.v) covered += (lab == 7);
        total += static_cast<double>(s.labels.v.size());
    }
    CHECK(covered / total < 0.02);
    CHECK(covered > 0.0);  // the class does occur
}

TEST_CASE("synthetic dataset: parameter validation") {
    CHECK_THROWS_AS(generate_synthetic_dataset(0, 64, 64, 8, 0), ConfigError);
    CHECK_THROWS_AS(generate_synthetic_dataset(4, 64, 64, 3, 0), ConfigError);
}

TEST_CASE("dataset IO: save/load round trip") {
    fs::path root = fs::temp_directory_path() / "omnipatch_test_ds1";
    fs::remove_all(root);
    auto set = generate_synthetic_dataset(3, 40, 56, 6, 9);
    save_dataset(root, "train", set);
    auto loaded = load_dataset(root, "train", 40, 56);
    REQUIRE(loaded.size() == 3);
    for (size_t i = 0; i < loaded.size(); ++i) {
        CHECK(loaded[i].labels.v == set[i].labels.v);  // labels are lossless
        double max_err = 0.0;
        for (size_t j = 0; j < set[i].image.v.size(); ++j)
            max_err = std::max(max_err, std::abs(loaded[i].image.v[j] - set[i].image.v[j]));
        CHECK(max_err <= 0.5 / 255.0 + 1e-9);  // 8-bit quantization only
    }
    fs::remove_all(root);
}

TEST_CASE("dataset IO: empty directory is an ingestion error") {
    fs::path root = fs::temp_directory_path() / "omnipatch_test_ds2";
    fs::remove_all(root);
    fs::create_directories(root / "train" / "images");
    fs::create_directories(root / "train" / "labels");
    CHECK_THROWS_AS(load_dataset(root, "train", 32, 32), IoError);
    CHECK_THROWS_AS(load_dataset(root, "missing_split", 32, 32), IoError);
    fs::remove_all(root);
}

TEST_CASE("dataset IO: unpaired files are reported by name") {
    fs::path root = fs::temp_directory_path() / "omnipatch_test_ds3";
    fs::remove_all(root);
    auto set = generate_synthetic_dataset(2, 32, 32, 6, 1);
    save_dataset(root, "train", set);
    write_ppm(root / "train" / "images" / "orphan.ppm", set[0].image);
    try {
        load_dataset(root, "train", 32, 32);
        FAIL("expected IoError");
    } catch (const IoError& e) {
        CHECK(std::string(e.what()).find("orphan") != std::string::npos);
    }
    fs::remove_all(root);
}

TEST_CASE("dataset IO: 255 pixels pass through as the ignore value") {
    fs::path root = fs::temp_directory_path() / "omnipatch_test_ds4";
    fs::remove_all(root);
    fs::create_directories(root / "val" / "images");
    fs::create_directories(root / "val" / "labels");
    Tensor img(3, 8, 8, 0.3);
    LabelMap labels(8, 8, 2);
    labels.at(0, 0) = 255;
    labels.at(3, 4) = 255;
    write_ppm(root / "val" / "images" / "a.ppm", img);
    write_pgm(root / "val" / "labels" / "a.pgm", labels);
    auto loaded = load_dataset(root, "val", 8, 8);
    REQUIRE(loaded.size() == 1);
    CHECK(loaded[0].labels.at(0, 0) == kIgnoreLabel);
    CHECK(loaded[0].labels.at(3, 4) == kIgnoreLabel);
    CHECK(loaded[0].labels.at(5, 5) == 2);
    CHECK(loaded[0].ignore_value == kIgnoreLabel);
    fs::remove_all(root);
}

TEST_CASE("dataset IO: labels resized nearest-neighbor only") {
    fs::path root = fs::temp_directory_path() / "omnipatch_test_ds5";
    fs::remove_all(root);
    fs::create_directories(root / "val" / "images");
    fs::create_directories(root / "val" / "labels");
    Tensor img(3, 2, 2, 0.5);
    LabelMap labels(2, 2);
    labels.v = {0, 7, 7, 0};
    write_ppm(root / "val" / "images" / "a.ppm", img);
    write_pgm(root / "val" / "labels" / "a.pgm", labels);
    auto loaded = load_dataset(root, "val", 4, 4);
    for (int32_t lab : loaded[0].labels.v) CHECK((lab == 0 || lab == 7));  // no blends
    CHECK(loaded[0].labels.at(0, 0) == 0);
    CHECK(loaded[0].labels.at(0, 3) == 7);
    fs::remove_all(root);
}

TEST_CASE("validate_sample: rejects out-of-range values") {
    SegmentationSample s;
    s.image = Tensor(3, 4, 4, 0.5);
    s.labels = LabelMap(4, 4, 1);
    validate_sample(s, 4);
    s.image.at(0, 0, 0) = 1.5;
    CHECK_THROWS_AS(validate_sample(s, 4), ContractError);
    s.image.at(0, 0, 0) = 0.5;
    s.labels.at(0, 0) = 9;
    CHECK_THROWS_AS(validate_sample(s, 4), ContractError);
    s.labels.at(0, 0) = kIgnoreLabel;
    validate_sample(s, 4);
}
