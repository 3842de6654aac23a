#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <map>

#include "omnipatch/models.hpp"
#include "omnipatch/placement.hpp"
#include "omnipatch/rng.hpp"
#include "oracles.hpp"

using namespace omnipatch;

namespace {

Tensor uniform_probs(int c, int h, int w) { return Tensor(c, h, w, 1.0 / c); }

Mask random_mask(int h, int w, double density, uint64_t seed) {
    Rng rng(seed);
    Mask m(h, w);
    for (auto& b : m.v) b = rng.uniform() < density;
    return m;
}

}  // namespace

TEST_CASE("entropy: uniform distribution is maximal") {
    EntropyMap e = compute_entropy_map(uniform_probs(4, 3, 3));
    for (double v : e.v) CHECK(v == doctest::Approx(1.0).epsilon(1e-6));
}

TEST_CASE("entropy: one-hot distribution is zero") {
    Tensor p(4, 2, 2, 0.0);
    for (int y = 0; y < 2; ++y)
        for (int x = 0; x < 2; ++x) p.at(1, y, x) = 1.0;
    EntropyMap e = compute_entropy_map(p);
    for (double v : e.v) CHECK(v <= 1e-9);
}

TEST_CASE("entropy: half-support case matches hand evaluation") {
    Tensor p(4, 1, 1, 0.0);
    p.at(0, 0, 0) = 0.5;
    p.at(1, 0, 0) = 0.5;
    EntropyMap e = compute_entropy_map(p);
    // -(1/log4) * 2 * 0.5 log 0.5 = log2/log4 = 0.5
    CHECK(e.at(0, 0) == doctest::Approx(0.5).epsilon(1e-6));
}

TEST_CASE("entropy: fewer than two classes rejected") {
    CHECK_THROWS_AS(compute_entropy_map(Tensor(1, 2, 2, 1.0)), ConfigError);
}

TEST_CASE("entropy: values in [0,1] for random distributions") {
    Rng rng(99);
    for (int trial = 0; trial < 200; ++trial) {
        int c = 2 + static_cast<int>(rng.uniform_index(9));
        Tensor p(c, 1, 1);
        double s = 0.0;
        for (int i = 0; i < c; ++i) {
            p.at(i, 0, 0) = rng.uniform() + 1e-6;
            s += p.at(i, 0, 0);
        }
        for (int i = 0; i < c; ++i) p.at(i, 0, 0) /= s;
        EntropyMap e = compute_entropy_map(p);
        CHECK(e.at(0, 0) >= 0.0);
        CHECK(e.at(0, 0) <= 1.0);
    }
}

TEST_CASE("class_mean_entropy: absent class, constant map, direct average") {
    EntropyMap ent(2, 2);
    ent.at(0, 0) = 0.2;
    ent.at(0, 1) = 0.4;
    ent.at(1, 0) = 0.9;
    ent.at(1, 1) = 0.9;
    LabelMap labels(2, 2, 1);
    labels.at(0, 0) = 0;
    labels.at(0, 1) = 0;

    CHECK(class_mean_entropy(ent, labels, 7) < 1e-6);  // absent
    CHECK(class_mean_entropy(ent, labels, 0) == doctest::Approx(0.3).epsilon(1e-6));
    CHECK(class_mean_entropy(ent, labels, 1) == doctest::Approx(0.9).epsilon(1e-6));

    EntropyMap const_map(3, 3, 0.3);
    LabelMap all_c(3, 3, 5);
    CHECK(class_mean_entropy(const_map, all_c, 5) == doctest::Approx(0.3).epsilon(1e-6));
}

TEST_CASE("dilate_mask: unit impulse becomes k x k block") {
    Mask m(11, 11);
    m.at(5, 5) = 1;
    Mask d = dilate_mask(m, 3);
    for (int y = 0; y < 11; ++y)
        for (int x = 0; x < 11; ++x) {
            bool expect = std::abs(y - 5) <= 1 && std::abs(x - 5) <= 1;
            CHECK(static_cast<bool>(d.at(y, x)) == expect);
        }
}

TEST_CASE("dilate_mask: k=1 is the identity") {
    Mask m = random_mask(16, 16, 0.3, 7);
    Mask d = dilate_mask(m, 1);
    CHECK(d.v == m.v);
}

TEST_CASE("dilate_mask: even kernel rejected") {
    CHECK_THROWS_AS(dilate_mask(Mask(4, 4), 2), ConfigError);
}

TEST_CASE("dilate_mask: equals brute-force Minkowski sum on random masks") {
    for (int k : {3, 5, 7}) {
        for (int trial = 0; trial < 50; ++trial) {
            Mask m = random_mask(32, 32, 0.08, mix_seed(k, trial));
            Mask fast = dilate_mask(m, k);
            Mask slow = oracle::dilate_bruteforce(m, k);
            REQUIRE(fast.v == slow.v);
        }
    }
}

TEST_CASE("dilate_mask: extensive and monotone") {
    Rng rng(31);
    for (int trial = 0; trial < 20; ++trial) {
        Mask a = random_mask(24, 24, 0.1, rng.next_u64());
        Mask b = a;
        for (auto& v : b.v)
            if (!v && rng.uniform() < 0.05) v = 1;  // b superset of a
        Mask da = dilate_mask(a, 5), db = dilate_mask(b, 5);
        for (size_t i = 0; i < a.v.size(); ++i) {
            if (a.v[i]) CHECK(da.v[i]);   // extensive
            if (da.v[i]) CHECK(db.v[i]);  // monotone
        }
    }
}

TEST_CASE("build_region: constant entropy keeps the whole feasible set") {
    Mask m(16, 16, 1);
    EntropyMap ent(16, 16, 0.5);
    PlacementRegion r = build_region(m, ent, 4, 3, 0.2);
    CHECK(!r.feasible_centers.empty());
    CHECK(r.top_centers.size() == r.feasible_centers.size());  // all tie at tau
}

TEST_CASE("build_region: mask confined to the border yields empty region") {
    int H = 16, W = 16, S = 8;
    Mask m(H, W);
    for (int x = 0; x < W; ++x) m.at(0, x) = 1;  // top row only
    EntropyMap ent(H, W, 0.5);
    PlacementRegion r = build_region(m, ent, S, 1, 0.5);
    CHECK(r.feasible_centers.empty());
    CHECK(r.top_centers.empty());
}

TEST_CASE("build_region: quantile filter matches a sort-based oracle") {
    // 8 valid centers with known entropies; p = 0.25 keeps the top 2.
    int H = 16, W = 16, S = 8;
    Mask m(H, W);
    EntropyMap ent(H, W, 0.0);
    std::vector<std::pair<int, int>> centers = {{4, 4}, {4, 6}, {4, 8}, {4, 10},
                                                {6, 4}, {6, 6}, {6, 8}, {6, 10}};
    std::vector<double> vals = {0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8};
    for (size_t i = 0; i < centers.size(); ++i) {
        m.at(centers[i].first, centers[i].second) = 1;
        ent.at(centers[i].first, centers[i].second) = vals[i];
    }
    PlacementRegion r = build_region(m, ent, S, 1, 0.25);
    REQUIRE(r.feasible_centers.size() == 8);
    // sort-based oracle: tau = 2nd largest value
    std::vector<double> sorted = vals;
    std::sort(sorted.begin(), sorted.end(), std::greater<>());
    CHECK(r.quantile_tau == doctest::Approx(sorted[1]));
    REQUIRE(r.top_centers.size() == 2);
    CHECK(r.top_centers[0] == std::pair<int, int>{6, 8});
    CHECK(r.top_centers[1] == std::pair<int, int>{6, 10});
}

TEST_CASE("build_region: boundary constraints hold on random masks") {
    Rng rng(123);
    for (int trial = 0; trial < 1000; ++trial) {
        int H = 16 + static_cast<int>(rng.uniform_index(24));
        int W = 16 + static_cast<int>(rng.uniform_index(24));
        int S = 4 + static_cast<int>(rng.uniform_index(static_cast<uint64_t>(std::min(H, W) - 4)));
        Mask m = random_mask(H, W, 0.2, rng.next_u64());
        EntropyMap ent(H, W, 0.0);
        for (auto& v : ent.v) v = rng.uniform();
        PlacementRegion r = build_region(m, ent, S, 3, 0.3);
        for (auto [y, x] : r.feasible_centers) {
            CHECK(2 * y >= S);
            CHECK(2 * y <= 2 * H - S);
            CHECK(2 * x >= S);
            CHECK(2 * x <= 2 * W - S);
            CHECK(r.mask.at(y, x) == 1);
        }
        // quantile correctness: |{e >= tau}| >= ceil(p |V|)
        if (!r.feasible_centers.empty()) {
            size_t need = static_cast<size_t>(
                std::ceil(0.3 * static_cast<double>(r.feasible_centers.size())));
            CHECK(r.top_centers.size() >= need);
            for (auto [y, x] : r.top_centers) CHECK(ent.at(y, x) >= r.quantile_tau);
        }
    }
}

TEST_CASE("sample_placement: singleton top set is always chosen") {
    Mask m(32, 32);
    m.at(16, 16) = 1;
    EntropyMap ent(32, 32, 0.5);
    PlacementRegion r = build_region(m, ent, 8, 1, 1.0);
    REQUIRE(r.top_centers.size() == 1);
    for (uint64_t s = 0; s < 32; ++s) {
        Placement pl = sample_placement(r, s, 32, 32, PlacementStrategy::sensitive);
        CHECK(pl.y0 == 16 - 4);
        CHECK(pl.x0 == 16 - 4);
    }
}

TEST_CASE("sample_placement: empty region falls back to a random in-bounds draw") {
    PlacementRegion r;
    r.patch_size = 8;
    for (uint64_t s = 0; s < 200; ++s) {
        Placement pl = sample_placement(r, s, 20, 30, PlacementStrategy::sensitive);
        CHECK(pl.y0 >= 0);
        CHECK(pl.x0 >= 0);
        CHECK(pl.y0 + 8 <= 20);
        CHECK(pl.x0 + 8 <= 30);
    }
}

TEST_CASE("sample_placement: uniform over four centers (chi-square sanity)") {
    Mask m(32, 32);
    std::vector<std::pair<int, int>> centers = {{10, 10}, {10, 20}, {20, 10}, {20, 20}};
    for (auto [y, x] : centers) m.at(y, x) = 1;
    EntropyMap ent(32, 32, 0.5);
    PlacementRegion r = build_region(m, ent, 8, 1, 1.0);
    REQUIRE(r.top_centers.size() == 4);
    std::map<std::pair<int, int>, int> freq;
    for (uint64_t s = 0; s < 10000; ++s) {
        Placement pl = sample_placement(r, mix_seed(42, s), 32, 32, PlacementStrategy::sensitive);
        ++freq[{pl.y0 + 4, pl.x0 + 4}];
    }
    REQUIRE(freq.size() == 4);
    for (auto& [center, count] : freq) {
        CHECK(count >= 2300);
        CHECK(count <= 2700);
    }
}

TEST_CASE("sample_placement: center and random strategies, footprint in bounds") {
    PlacementRegion r;
    r.patch_size = 10;
    Placement c = sample_placement(r, 0, 21, 33, PlacementStrategy::center);
    CHECK(c.y0 == (21 - 10) / 2);
    CHECK(c.x0 == (33 - 10) / 2);
    Rng rng(5);
    for (int trial = 0; trial < 500; ++trial) {
        int H = 12 + static_cast<int>(rng.uniform_index(40));
        int W = 12 + static_cast<int>(rng.uniform_index(40));
        int S = 4 + static_cast<int>(rng.uniform_index(8));
        PlacementRegion rr;
        rr.patch_size = S;
        Placement pl = sample_placement(rr, rng.next_u64(), H, W, PlacementStrategy::random);
        CHECK(pl.y0 >= 0);
        CHECK(pl.x0 >= 0);
        CHECK(pl.y0 + S <= H);
        CHECK(pl.x0 + S <= W);
    }
}

TEST_CASE("sample_placement: oversized patch rejected") {
    PlacementRegion r;
    r.patch_size = 64;
    CHECK_THROWS_AS(sample_placement(r, 0, 32, 32, PlacementStrategy::random), ConfigError);
}

// --- sensitivity scan -------------------------------------------------------

namespace {

// Independent straightforward reimplementation of the scan (presence-weighted
// averaging), kept free of the library's aggregation code.
int scan_argmax_bruteforce(const Surrogate& model,
                           const std::vector<SegmentationSample>& data) {
    int C = model.num_classes();
    std::vector<double> score(C, 0.0);
    std::vector<int> count(C, 0);
    for (const auto& s : data) {
        ModelOutput out = model.forward(s.image);
        Tensor probs = out.probabilities();
        LabelMap pred = argmax_labels(out.logits);
        for (int c = 0; c < C; ++c) {
            double num = 0.0;
            long den = 0;
            for (int y = 0; y < pred.h; ++y)
                for (int x = 0; x < pred.w; ++x)
                    if (pred.at(y, x) == c) {
                        std::vector<double> pv(C);
                        for (int ci = 0; ci < C; ++ci) pv[ci] = probs.at(ci, y, x);
                        num += oracle::entropy_direct(pv);
                        ++den;
                    }
            if (den > 0) {
                score[c] += num / den;
                count[c] += 1;
            }
        }
    }
    int best = -1;
    double bv = -1;
    for (int c = 0; c < C; ++c) {
        if (count[c] == 0) continue;
        double v = score[c] / count[c];
        if (v > bv) {
            bv = v;
            best = c;
        }
    }
    return best;
}

}  // namespace

TEST_CASE("sensitivity_scan: matches an independent reimplementation") {
    auto data = generate_synthetic_dataset(6, 48, 64, 6, 11);
    auto model = make_toy_cnn(8, 6, 3);
    SensitivityReport rep = sensitivity_scan(*model, data, LabelSource::predicted);
    int expect = scan_argmax_bruteforce(*model, data);
    CHECK(rep.selected_class == expect);
    CHECK(rep.images_counted == 6);
    CHECK(static_cast<int>(rep.per_image_means.size()) == 6);
}

TEST_CASE("sensitivity_scan: single image, single class reduces to class_mean_entropy") {
    auto model = make_toy_cnn(8, 4, 5);
    SegmentationSample s;
    s.image = Tensor(3, 32, 32, 0.5);
    s.labels = LabelMap(32, 32, 2);  // one class everywhere
    ModelOutput out = model->forward(s.image);
    EntropyMap ent = compute_entropy_map(out.probabilities());
    double expect = class_mean_entropy(ent, s.labels, 2);

    SensitivityReport rep = sensitivity_scan(*model, {s}, LabelSource::ground_truth);
    CHECK(rep.selected_class == 2);
    CHECK(rep.per_class_scores[2] == doctest::Approx(expect).epsilon(1e-9));
    for (int c : {0, 1, 3}) CHECK(rep.per_class_scores[c] == 0.0);
}

TEST_CASE("class_mean_entropy: linear in the entropy map (argmax scale invariance)") {
    Rng rng(55);
    EntropyMap ent(6, 6);
    for (auto& v : ent.v) v = rng.uniform();
    LabelMap labels(6, 6);
    for (auto& v : labels.v) v = static_cast<int32_t>(rng.uniform_index(3));
    EntropyMap scaled = ent;
    for (auto& v : scaled.v) v *= 0.37;
    for (int c = 0; c < 3; ++c)
        CHECK(class_mean_entropy(scaled, labels, c) ==
              doctest::Approx(0.37 * class_mean_entropy(ent, labels, c)).epsilon(1e-9));
}

TEST_CASE("sensitivity_scan: empty dataset rejected") {
    auto model = make_toy_cnn(8, 4, 5);
    CHECK_THROWS_AS(sensitivity_scan(*model, {}, LabelSource::predicted), ConfigError);
}
