#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "mft/errors.hpp"
#include "mft/metrics.hpp"
#include "mft/rng.hpp"
#include "mft/scene.hpp"

using mft::ConfusionMatrix;
using mft::Coord;
using mft::Rng;
using mft::SceneBundle;

namespace {

namespace fs = std::filesystem;

fs::path fresh_dir(const std::string& name) {
    fs::path p = fs::temp_directory_path() / ("mft_test_" + name);
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
}

SceneBundle small_scene(int rows, int cols, int bands, int aux_channels, std::uint64_t seed) {
    SceneBundle s;
    s.rows = rows;
    s.cols = cols;
    s.bands = bands;
    s.aux_channels = aux_channels;
    s.classes = 2;
    Rng rng(seed);
    s.hsi.resize(static_cast<std::size_t>(rows) * cols * bands);
    for (float& v : s.hsi) v = static_cast<float>(rng.uniform(-3.0, 5.0));
    s.aux.resize(static_cast<std::size_t>(rows) * cols * aux_channels);
    for (float& v : s.aux) v = static_cast<float>(rng.uniform(0.0, 2.0));
    s.labels.assign(static_cast<std::size_t>(rows) * cols, 0);
    for (std::size_t i = 0; i < s.labels.size(); ++i)
        s.labels[i] = static_cast<std::uint16_t>(1 + (i % 2));
    return s;
}

// Metric recomputation from first principles, double precision, no shared
// code with the library.
struct BruteMetrics {
    double oa, aa, kappa;
};

BruteMetrics brute_force_metrics(const ConfusionMatrix& cm) {
    const int C = cm.classes();
    double total = 0.0, diag = 0.0;
    for (int t = 0; t < C; ++t)
        for (int p = 0; p < C; ++p) {
            total += static_cast<double>(cm.at(t, p));
            if (t == p) diag += static_cast<double>(cm.at(t, p));
        }
    const double oa = diag / total;
    double aa = 0.0;
    int nonempty = 0;
    for (int t = 0; t < C; ++t) {
        double row = 0.0;
        for (int p = 0; p < C; ++p) row += static_cast<double>(cm.at(t, p));
        if (row > 0.0) {
            aa += static_cast<double>(cm.at(t, t)) / row;
            ++nonempty;
        }
    }
    aa /= nonempty;
    double pe = 0.0;
    for (int i = 0; i < C; ++i) {
        double row = 0.0, col = 0.0;
        for (int j = 0; j < C; ++j) {
            row += static_cast<double>(cm.at(i, j));
            col += static_cast<double>(cm.at(j, i));
        }
        pe += row * col / (total * total);
    }
    const double kappa = pe == 1.0 ? 0.0 : (oa - pe) / (1.0 - pe);
    return {oa, aa, kappa};
}

} // namespace

// ---------------------------------------------------------------------------
// normalization

TEST_CASE("normalization rescales each band to the unit interval") {
    SceneBundle s = small_scene(8, 8, 3, 2, 61);
    // plant known extremes in band 0
    for (std::size_t px = 0; px < 64; ++px) s.hsi[px * 3] = 10.0f + static_cast<float>(px % 11);
    s.hsi[0 * 3] = 10.0f;
    s.hsi[1 * 3] = 20.0f;
    s.hsi[2 * 3] = 15.0f;
    SceneBundle n = mft::normalize_scene(s);
    CHECK(n.hsi[2 * 3] == doctest::Approx(0.5).epsilon(1e-6));

    for (int b = 0; b < 3; ++b) {
        float lo = 1e30f, hi = -1e30f;
        for (std::size_t px = 0; px < 64; ++px) {
            lo = std::min(lo, n.hsi[px * 3 + b]);
            hi = std::max(hi, n.hsi[px * 3 + b]);
        }
        CHECK(lo == doctest::Approx(0.0).epsilon(1e-6));
        CHECK(hi == doctest::Approx(1.0).epsilon(1e-6));
    }
    for (int c = 0; c < 2; ++c) {
        float lo = 1e30f, hi = -1e30f;
        for (std::size_t px = 0; px < 64; ++px) {
            lo = std::min(lo, n.aux[px * 2 + c]);
            hi = std::max(hi, n.aux[px * 2 + c]);
        }
        CHECK(lo == doctest::Approx(0.0).epsilon(1e-6));
        CHECK(hi == doctest::Approx(1.0).epsilon(1e-6));
    }
}

TEST_CASE("normalization maps a constant band to zero") {
    SceneBundle s = small_scene(6, 6, 2, 1, 62);
    for (std::size_t px = 0; px < 36; ++px) s.hsi[px * 2 + 1] = 7.25f;
    SceneBundle n = mft::normalize_scene(s);
    for (std::size_t px = 0; px < 36; ++px) CHECK(n.hsi[px * 2 + 1] == 0.0f);
}

TEST_CASE("normalization rejects non-finite samples") {
    SceneBundle s = small_scene(6, 6, 2, 1, 63);
    s.hsi[13] = std::numeric_limits<float>::infinity();
    CHECK_THROWS_AS(mft::normalize_scene(s), mft::DataError);
    SceneBundle s2 = small_scene(6, 6, 2, 1, 64);
    s2.aux[5] = std::numeric_limits<float>::quiet_NaN();
    CHECK_THROWS_AS(mft::normalize_scene(s2), mft::DataError);
}

// ---------------------------------------------------------------------------
// patch extraction

TEST_CASE("an interior patch is a plain window copy") {
    SceneBundle s = small_scene(12, 12, 4, 2, 65);
    const int k = 5, half = 2;
    auto batch = mft::extract_patches(s, {{6, 7}}, k);
    REQUIRE(batch.hsi.shape() == std::vector<int>{1, k, k, 4});
    REQUIRE(batch.aux.shape() == std::vector<int>{1, k, k, 2});
    for (int u = 0; u < k; ++u)
        for (int v = 0; v < k; ++v)
            for (int b = 0; b < 4; ++b) {
                const float want = s.hsi[((static_cast<std::size_t>(6 + u - half) * 12) + (7 + v - half)) * 4 + b];
                CHECK(batch.hsi.data()[(static_cast<std::size_t>(u) * k + v) * 4 + b] == want);
            }
    // label 0-based
    CHECK(batch.labels[0] == static_cast<int>(s.labels[6 * 12 + 7]) - 1);
}

TEST_CASE("a corner patch is zero padded outside the raster") {
    SceneBundle s = small_scene(16, 16, 3, 1, 66);
    auto batch = mft::extract_patches(s, {{0, 0}}, 11);
    REQUIRE(batch.hsi.shape() == std::vector<int>{1, 11, 11, 3});
    for (int u = 0; u < 11; ++u)
        for (int v = 0; v < 11; ++v)
            for (int b = 0; b < 3; ++b) {
                const float got = batch.hsi.data()[(static_cast<std::size_t>(u) * 11 + v) * 3 + b];
                if (u < 5 || v < 5) CHECK(got == 0.0f);
                else CHECK(got == s.hsi[((static_cast<std::size_t>(u - 5) * 16) + (v - 5)) * 3 + b]);
            }
}

TEST_CASE("the patch center always equals the raster value") {
    SceneBundle s = small_scene(9, 13, 3, 2, 67);
    std::vector<Coord> coords = {{0, 0}, {4, 6}, {8, 12}, {1, 11}};
    auto batch = mft::extract_patches(s, coords, 7);
    const int mid = 3;
    for (std::size_t p = 0; p < coords.size(); ++p) {
        const Coord c = coords[p];
        for (int b = 0; b < 3; ++b)
            CHECK(batch.hsi.data()[((static_cast<std::size_t>(p) * 7 + mid) * 7 + mid) * 3 + b] ==
                  s.hsi[(static_cast<std::size_t>(c.i) * 13 + c.j) * 3 + b]);
        for (int a = 0; a < 2; ++a)
            CHECK(batch.aux.data()[((static_cast<std::size_t>(p) * 7 + mid) * 7 + mid) * 2 + a] ==
                  s.aux[(static_cast<std::size_t>(c.i) * 13 + c.j) * 2 + a]);
    }
}

TEST_CASE("a full-size survey patch has the expected extents") {
    SceneBundle s;
    s.rows = 340;
    s.cols = 1905;
    s.bands = 144;
    s.aux_channels = 1;
    s.classes = 1;
    s.hsi.assign(static_cast<std::size_t>(340) * 1905 * 144, 0.25f);
    s.aux.assign(static_cast<std::size_t>(340) * 1905, 1.0f);
    s.labels.assign(static_cast<std::size_t>(340) * 1905, 1);
    auto batch = mft::extract_patches(s, {{170, 950}}, 11);
    CHECK(batch.hsi.shape() == std::vector<int>{1, 11, 11, 144});
    CHECK(batch.aux.shape() == std::vector<int>{1, 11, 11, 1});
}

TEST_CASE("patch extraction validates coordinates, labels, and patch size") {
    SceneBundle s = small_scene(8, 8, 2, 1, 68);
    CHECK_THROWS_AS(mft::extract_patches(s, {{8, 0}}, 5), mft::DataError);
    CHECK_THROWS_AS(mft::extract_patches(s, {{0, 0}}, 4), mft::ConfigError);
    CHECK_THROWS_AS(mft::extract_patches(s, {}, 5), mft::DataError);

    s.labels[3 * 8 + 3] = 0;
    CHECK_THROWS_AS(mft::extract_patches(s, {{3, 3}}, 5), mft::DataError);
    auto batch = mft::extract_patches(s, {{3, 3}}, 5, true);
    CHECK(batch.labels[0] == -1);
}

TEST_CASE("gather_batch moves aux channels in front") {
    SceneBundle s = small_scene(10, 10, 3, 2, 69);
    auto set = mft::extract_patches(s, {{2, 2}, {5, 5}, {7, 3}}, 5);
    std::vector<int> order = {2, 0};
    auto mb = mft::gather_batch(set, order, 0, 2);
    REQUIRE(mb.x_h.shape() == std::vector<int>{2, 5, 5, 3});
    REQUIRE(mb.x_l.shape() == std::vector<int>{2, 2, 5, 5});
    CHECK(mb.labels == std::vector<int>{set.labels[2], set.labels[0]});
    for (int r = 0; r < 2; ++r) {
        const int src = order[static_cast<std::size_t>(r)];
        for (int u = 0; u < 5; ++u)
            for (int v = 0; v < 5; ++v) {
                for (int b = 0; b < 3; ++b)
                    CHECK(mb.x_h.data()[((static_cast<std::size_t>(r) * 5 + u) * 5 + v) * 3 + b] ==
                          set.hsi.data()[((static_cast<std::size_t>(src) * 5 + u) * 5 + v) * 3 + b]);
                for (int c = 0; c < 2; ++c)
                    CHECK(mb.x_l.data()[((static_cast<std::size_t>(r) * 2 + c) * 5 + u) * 5 + v] ==
                          set.aux.data()[((static_cast<std::size_t>(src) * 5 + u) * 5 + v) * 2 + c]);
            }
    }
}

// ---------------------------------------------------------------------------
// splits

TEST_CASE("random splits take a stratified ceiling per class") {
    // class 1: 100 pixels, class 2: 9 pixels
    SceneBundle s;
    s.rows = 10;
    s.cols = 11;
    s.bands = 1;
    s.aux_channels = 1;
    s.classes = 2;
    s.hsi.assign(110, 0.5f);
    s.aux.assign(110, 0.5f);
    s.labels.assign(110, 0);
    for (int i = 0; i < 100; ++i) s.labels[static_cast<std::size_t>(i)] = 1;
    for (int i = 100; i < 109; ++i) s.labels[static_cast<std::size_t>(i)] = 2;

    auto [train, test] = mft::split_random(s, 0.05, Rng(5));
    auto count_class = [&](const std::vector<Coord>& cs, int cls) {
        return std::count_if(cs.begin(), cs.end(), [&](const Coord& c) {
            return s.labels[static_cast<std::size_t>(c.i) * 11 + c.j] == cls;
        });
    };
    CHECK(count_class(train, 1) == 5);  // ceil(0.05*100)
    CHECK(count_class(test, 1) == 95);
    CHECK(count_class(train, 2) == 1);  // ceil(0.05*9)
    CHECK(count_class(test, 2) == 8);

    auto [train2, test2] = mft::split_random(s, 0.5, Rng(5));
    CHECK(count_class(train2, 2) == 5); // ceil(4.5)
    CHECK(count_class(test2, 2) == 4);
}

TEST_CASE("random splits are deterministic and disjoint") {
    SceneBundle s = small_scene(12, 12, 2, 1, 70);
    auto [a_train, a_test] = mft::split_random(s, 0.1, Rng(9));
    auto [b_train, b_test] = mft::split_random(s, 0.1, Rng(9));
    CHECK(a_train == b_train);
    CHECK(a_test == b_test);

    std::set<std::pair<int, int>> seen;
    for (const Coord& c : a_train) seen.insert({c.i, c.j});
    for (const Coord& c : a_test) CHECK(seen.count({c.i, c.j}) == 0);
    CHECK(a_train.size() + a_test.size() == 144); // every labeled pixel lands somewhere

    auto [c_train, c_test] = mft::split_random(s, 0.1, Rng(10));
    CHECK(c_train != a_train); // a different seed moves the selection
}

TEST_CASE("random splits refuse classes too small to split") {
    SceneBundle s = small_scene(8, 8, 1, 1, 71);
    for (auto& l : s.labels) l = 1;
    s.labels[0] = 2; // lone sample
    CHECK_THROWS_AS(mft::split_random(s, 0.1, Rng(1)), mft::SplitError);
    CHECK_THROWS_AS(mft::split_random(small_scene(8, 8, 1, 1, 72), 0.0, Rng(1)), mft::ConfigError);
    CHECK_THROWS_AS(mft::split_random(small_scene(8, 8, 1, 1, 73), 1.0, Rng(1)), mft::ConfigError);
}

TEST_CASE("mask splits reproduce the stored counts in row-major order") {
    SceneBundle s;
    s.rows = 40;
    s.cols = 40;
    s.bands = 1;
    s.aux_channels = 1;
    s.classes = 1;
    s.hsi.assign(1600, 0.0f);
    s.aux.assign(1600, 0.0f);
    s.labels.assign(1600, 0);
    s.train_mask.assign(1600, 0);
    s.test_mask.assign(1600, 0);
    s.has_masks = true;
    for (int i = 0; i < 1251; ++i) s.labels[static_cast<std::size_t>(i)] = 1;
    for (int i = 0; i < 198; ++i) s.train_mask[static_cast<std::size_t>(i)] = 1;
    for (int i = 198; i < 198 + 1053; ++i) s.test_mask[static_cast<std::size_t>(i)] = 1;

    auto [train, test] = mft::split_from_masks(s);
    CHECK(train.size() == 198);
    CHECK(test.size() == 1053);
    CHECK(std::is_sorted(train.begin(), train.end(), [](const Coord& a, const Coord& b) {
        return a.i != b.i ? a.i < b.i : a.j < b.j;
    }));

    SUBCASE("an injected overlap is rejected") {
        s.test_mask[5] = 1; // pixel 5 is already train
        CHECK_THROWS_AS(mft::split_from_masks(s), mft::DataError);
    }
    SUBCASE("an empty test mask yields an empty list") {
        std::fill(s.test_mask.begin(), s.test_mask.end(), 0);
        auto [tr, te] = mft::split_from_masks(s);
        CHECK(tr.size() == 198);
        CHECK(te.empty());
    }
    SUBCASE("a mask bit on background is rejected") {
        s.train_mask[1599] = 1; // unlabeled pixel
        CHECK_THROWS_AS(mft::split_from_masks(s), mft::DataError);
    }
}

// ---------------------------------------------------------------------------
// synthetic scenes

TEST_CASE("synthetic scenes carry the requested class structure") {
    SceneBundle s = mft::synth_scene(4, 64, 64, 16, 1, 7, true);
    CHECK(s.rows == 64);
    CHECK(s.cols == 64);
    CHECK(s.bands == 16);
    CHECK(s.aux_channels == 1);
    CHECK(s.classes == 4);
    CHECK(s.has_masks);

    std::set<int> present;
    for (auto l : s.labels)
        if (l != 0) present.insert(static_cast<int>(l));
    CHECK(present == std::set<int>{1, 2, 3, 4});

    // masks disjoint and confined to labeled pixels
    for (std::size_t i = 0; i < s.labels.size(); ++i) {
        CHECK(!(s.train_mask[i] && s.test_mask[i]));
        if (s.train_mask[i] || s.test_mask[i]) CHECK(s.labels[i] != 0);
    }
}

TEST_CASE("the same seed reproduces a synthetic scene bit for bit") {
    SceneBundle a = mft::synth_scene(3, 32, 48, 8, 2, 11, true, "sar");
    SceneBundle b = mft::synth_scene(3, 32, 48, 8, 2, 11, true, "sar");
    CHECK(a.hsi == b.hsi);
    CHECK(a.aux == b.aux);
    CHECK(a.labels == b.labels);
    CHECK(a.train_mask == b.train_mask);
    CHECK(a.test_mask == b.test_mask);
    CHECK(a.modality == "sar");

    SceneBundle c = mft::synth_scene(3, 32, 48, 8, 2, 12, true, "sar");
    CHECK(a.hsi != c.hsi);
}

TEST_CASE("an uninformative aux raster decorrelates from the labels") {
    SceneBundle s = mft::synth_scene(4, 64, 64, 16, 1, 21, false);
    double sx = 0.0, sy = 0.0, sxx = 0.0, syy = 0.0, sxy = 0.0;
    double n = 0.0;
    for (std::size_t i = 0; i < s.labels.size(); ++i) {
        const double x = s.aux[i];
        const double y = static_cast<double>(s.labels[i]);
        sx += x;
        sy += y;
        sxx += x * x;
        syy += y * y;
        sxy += x * y;
        n += 1.0;
    }
    const double cov = sxy / n - (sx / n) * (sy / n);
    const double vx = sxx / n - (sx / n) * (sx / n);
    const double vy = syy / n - (sy / n) * (sy / n);
    const double corr = cov / std::sqrt(vx * vy);
    CHECK(std::abs(corr) < 0.1);

    // the informative variant separates class levels instead
    SceneBundle si = mft::synth_scene(4, 64, 64, 16, 1, 21, true);
    double means[5] = {0, 0, 0, 0, 0};
    double counts[5] = {0, 0, 0, 0, 0};
    for (std::size_t i = 0; i < si.labels.size(); ++i) {
        means[si.labels[i]] += si.aux[i];
        counts[si.labels[i]] += 1.0;
    }
    for (int c = 1; c <= 4; ++c) means[c] /= counts[c];
    for (int c = 1; c < 4; ++c) CHECK(std::abs(means[c] - means[c + 1]) > 0.05);
}

TEST_CASE("degenerate synthetic requests are refused") {
    CHECK_THROWS_AS(mft::synth_scene(1, 64, 64, 8, 1, 1, true), mft::ConfigError);
    CHECK_THROWS_AS(mft::synth_scene(2, 8, 8, 8, 1, 1, true), mft::ConfigError);
}

// ---------------------------------------------------------------------------
// scene container io

TEST_CASE("a scene round-trips through its directory container bit for bit") {
    SceneBundle s = mft::synth_scene(3, 48, 48, 8, 2, 31, true, "msi");
    fs::path dir = fresh_dir("roundtrip");
    mft::save_scene(s, dir.string());
    SceneBundle r = mft::load_scene(dir.string());
    CHECK(r.rows == s.rows);
    CHECK(r.cols == s.cols);
    CHECK(r.bands == s.bands);
    CHECK(r.aux_channels == s.aux_channels);
    CHECK(r.classes == s.classes);
    CHECK(r.modality == "msi");
    CHECK(r.has_masks == s.has_masks);
    CHECK(r.hsi == s.hsi);
    CHECK(r.aux == s.aux);
    CHECK(r.labels == s.labels);
    CHECK(r.train_mask == s.train_mask);
    CHECK(r.test_mask == s.test_mask);
    fs::remove_all(dir);
}

TEST_CASE("a truncated payload is reported with byte counts") {
    SceneBundle s = mft::synth_scene(2, 32, 32, 4, 1, 32, true);
    fs::path dir = fresh_dir("truncated");
    mft::save_scene(s, dir.string());
    fs::resize_file(dir / "hsi.f32", 100);
    try {
        mft::load_scene(dir.string());
        FAIL("expected a payload error");
    } catch (const mft::DataError& e) {
        const std::string msg = e.what();
        CHECK(msg.find("hsi.f32") != std::string::npos);
        CHECK(msg.find("100") != std::string::npos);
    }
    fs::remove_all(dir);
}

TEST_CASE("a header that disagrees with the payload is rejected") {
    SceneBundle s = mft::synth_scene(2, 32, 32, 4, 1, 33, true);
    fs::path dir = fresh_dir("mismatch");
    mft::save_scene(s, dir.string());

    std::ifstream in(dir / "header.json");
    std::string header((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    in.close();
    auto swap_field = [&](const std::string& from, const std::string& to) {
        std::string doctored = header;
        const auto at = doctored.find(from);
        REQUIRE(at != std::string::npos);
        doctored.replace(at, from.size(), to);
        std::ofstream out(dir / "header.json", std::ios::trunc);
        out << doctored;
    };

    SUBCASE("band count off by one") {
        swap_field("\"B\": 4", "\"B\": 5");
        CHECK_THROWS_AS(mft::load_scene(dir.string()), mft::DataError);
    }
    SUBCASE("wrong magic") {
        swap_field("MFTSCN1", "MFTSCN9");
        CHECK_THROWS_AS(mft::load_scene(dir.string()), mft::DataError);
    }
    SUBCASE("missing directory") {
        CHECK_THROWS_AS(mft::load_scene((dir / "nope").string()), mft::DataError);
    }
    fs::remove_all(dir);
}

// ---------------------------------------------------------------------------
// metrics

TEST_CASE("confusion counts accumulate and merge") {
    ConfusionMatrix cm(3);
    cm.accumulate(0, 0);
    CHECK(cm.at(0, 0) == 1);
    cm.accumulate(0, 2);
    cm.accumulate(1, 1);
    CHECK(cm.total() == 3);
    CHECK(cm.row_sum(0) == 2);
    CHECK(cm.col_sum(2) == 1);

    ConfusionMatrix other(3);
    other.accumulate(2, 2);
    cm.merge(other);
    CHECK(cm.total() == 4);
    CHECK(cm.at(2, 2) == 1);

    CHECK_THROWS_AS(cm.accumulate(3, 0), mft::DataError);
    CHECK_THROWS_AS(cm.accumulate(0, -1), mft::DataError);
}

TEST_CASE("perfect agreement scores one on every metric") {
    ConfusionMatrix cm(4);
    for (int c = 0; c < 4; ++c)
        for (int i = 0; i < 7 + c; ++i) cm.accumulate(c, c);
    auto r = mft::compute_metrics(cm);
    CHECK(r.oa == doctest::Approx(1.0));
    CHECK(r.aa == doctest::Approx(1.0));
    CHECK(r.kappa == doctest::Approx(1.0));
    for (double pc : r.per_class) CHECK(pc == doctest::Approx(1.0));
}

TEST_CASE("the hand-worked two-class case comes out exactly") {
    ConfusionMatrix cm(2);
    for (int i = 0; i < 2; ++i) cm.accumulate(0, 0);
    cm.accumulate(0, 1);
    cm.accumulate(1, 0);
    for (int i = 0; i < 2; ++i) cm.accumulate(1, 1);
    auto r = mft::compute_metrics(cm);
    CHECK(r.oa == doctest::Approx(2.0 / 3.0).epsilon(1e-12));
    CHECK(r.aa == doctest::Approx(2.0 / 3.0).epsilon(1e-12));
    CHECK(r.kappa == doctest::Approx(1.0 / 3.0).epsilon(1e-12));
    CHECK(r.samples == 6);
}

TEST_CASE("metrics match a brute-force recomputation on random matrices") {
    for (int trial = 0; trial < 100; ++trial) {
        Rng rng(static_cast<std::uint64_t>(trial) + 900);
        const int C = 2 + static_cast<int>(rng.next_below(6));
        ConfusionMatrix cm(C);
        bool any = false;
        for (int t = 0; t < C; ++t)
            for (int p = 0; p < C; ++p) {
                const int count = static_cast<int>(rng.next_below(9));
                for (int i = 0; i < count; ++i) cm.accumulate(t, p);
                any = any || count > 0;
            }
        if (!any) cm.accumulate(0, 0);
        auto got = mft::compute_metrics(cm);
        auto want = brute_force_metrics(cm);
        CHECK(std::abs(got.oa - want.oa) < 1e-12);
        CHECK(std::abs(got.aa - want.aa) < 1e-12);
        CHECK(std::abs(got.kappa - want.kappa) < 1e-12);
        CHECK(got.kappa <= got.oa + 1e-12); // chance correction only lowers the score
    }
}

TEST_CASE("chance-level predictions have near-zero kappa") {
    Rng rng(91);
    ConfusionMatrix cm(2);
    for (int i = 0; i < 10000; ++i)
        cm.accumulate(static_cast<int>(rng.next_below(2)), static_cast<int>(rng.next_below(2)));
    auto r = mft::compute_metrics(cm);
    CHECK(std::abs(r.kappa) < 0.05);
}

TEST_CASE("relabeling classes consistently leaves the metrics unchanged") {
    Rng rng(92);
    const int C = 4;
    ConfusionMatrix cm(C), permuted(C);
    const int perm[C] = {2, 0, 3, 1};
    for (int t = 0; t < C; ++t)
        for (int p = 0; p < C; ++p) {
            const int count = static_cast<int>(rng.next_below(12));
            for (int i = 0; i < count; ++i) {
                cm.accumulate(t, p);
                permuted.accumulate(perm[t], perm[p]);
            }
        }
    cm.accumulate(0, 0);
    permuted.accumulate(perm[0], perm[0]);
    auto a = mft::compute_metrics(cm);
    auto b = mft::compute_metrics(permuted);
    CHECK(a.oa == doctest::Approx(b.oa).epsilon(1e-12));
    CHECK(a.aa == doctest::Approx(b.aa).epsilon(1e-12));
    CHECK(a.kappa == doctest::Approx(b.kappa).epsilon(1e-12));
}

TEST_CASE("empty rows are excluded from the class average and flagged") {
    ConfusionMatrix cm(3);
    cm.accumulate(0, 0);
    cm.accumulate(1, 0);
    auto r = mft::compute_metrics(cm);
    REQUIRE(r.class_empty.size() == 3);
    CHECK(!r.class_empty[0]);
    CHECK(!r.class_empty[1]);
    CHECK(r.class_empty[2]);
    CHECK(r.aa == doctest::Approx(0.5)); // mean of 1.0 and 0.0 over the two live rows

    ConfusionMatrix empty(2);
    CHECK_THROWS_AS(mft::compute_metrics(empty), mft::DataError);
}

TEST_CASE("the report serializes every field") {
    ConfusionMatrix cm(2);
    cm.accumulate(0, 0);
    cm.accumulate(1, 1);
    cm.accumulate(1, 0);
    auto j = mft::report_to_json(mft::compute_metrics(cm));
    CHECK(j.at("oa").get<double>() == doctest::Approx(2.0 / 3.0));
    CHECK(j.at("samples").get<long long>() == 3);
    CHECK(j.at("per_class").size() == 2);
    CHECK(j.at("confusion")[1][0].get<long long>() == 1);
}

// ---------------------------------------------------------------------------
// map rendering

TEST_CASE("an empty prediction set renders a black raster") {
    auto bytes = mft::render_map(2, 3, {}, {});
    const std::string header = "P6\n3 2\n255\n"; // width (cols) first
    REQUIRE(bytes.size() == header.size() + 2 * 3 * 3);
    CHECK(std::string(bytes.begin(), bytes.begin() + static_cast<long>(header.size())) == header);
    for (std::size_t i = header.size(); i < bytes.size(); ++i) CHECK(bytes[i] == 0);
}

TEST_CASE("a single prediction colors exactly one pixel") {
    auto bytes = mft::render_map(4, 4, {{1, 2}}, {0});
    const std::size_t offset = std::string("P6\n4 4\n255\n").size();
    int colored = 0;
    for (int px = 0; px < 16; ++px) {
        const std::size_t at = offset + static_cast<std::size_t>(px) * 3;
        const bool nonzero = bytes[at] || bytes[at + 1] || bytes[at + 2];
        if (nonzero) {
            ++colored;
            CHECK(px == 1 * 4 + 2);
            CHECK(bytes[at] == mft::kPalette[1][0]);
            CHECK(bytes[at + 1] == mft::kPalette[1][1]);
            CHECK(bytes[at + 2] == mft::kPalette[1][2]);
        }
    }
    CHECK(colored == 1);
}

TEST_CASE("map rendering is deterministic and bounds-checked") {
    std::vector<Coord> coords = {{0, 0}, {3, 5}, {7, 2}};
    std::vector<int> preds = {0, 1, 2};
    auto a = mft::render_map(8, 6, coords, preds);
    auto b = mft::render_map(8, 6, coords, preds);
    CHECK(a == b);

    CHECK_THROWS_AS(mft::render_map(8, 6, {{8, 0}}, {0}), mft::DataError);
    CHECK_THROWS_AS(mft::render_map(8, 6, {{0, 0}}, {15}), mft::DataError);
    CHECK_THROWS_AS(mft::render_map(8, 6, {{0, 0}}, {0, 1}), mft::ConfigError);
}
