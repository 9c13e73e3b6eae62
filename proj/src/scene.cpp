#include "mft/scene.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <limits>

#include <json.hpp>

#include "mft/errors.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace mft {

namespace {

void normalize_planes(std::vector<float>& data, std::size_t pixels, int planes, const char* what) {
    for (int b = 0; b < planes; ++b) {
        float lo = std::numeric_limits<float>::infinity();
        float hi = -std::numeric_limits<float>::infinity();
        for (std::size_t p = 0; p < pixels; ++p) {
            const float v = data[p * static_cast<std::size_t>(planes) + static_cast<std::size_t>(b)];
            if (!std::isfinite(v))
                throw DataError(std::string("normalize_scene: non-finite value in ") + what +
                                " plane " + std::to_string(b));
            lo = std::min(lo, v);
            hi = std::max(hi, v);
        }
        const float span = hi - lo;
        for (std::size_t p = 0; p < pixels; ++p) {
            float& v = data[p * static_cast<std::size_t>(planes) + static_cast<std::size_t>(b)];
            v = span > 0.0f ? (v - lo) / span : 0.0f;
        }
    }
}

} // namespace

SceneBundle normalize_scene(const SceneBundle& scene) {
    SceneBundle out = scene;
    const std::size_t pixels = static_cast<std::size_t>(scene.rows) * static_cast<std::size_t>(scene.cols);
    normalize_planes(out.hsi, pixels, scene.bands, "hsi");
    normalize_planes(out.aux, pixels, scene.aux_channels, "aux");
    return out;
}

PatchBatch extract_patches(const SceneBundle& scene, const std::vector<Coord>& coords, int k,
                           bool allow_unlabeled) {
    if (k < 1 || k % 2 == 0) throw ConfigError("patch size must be odd and positive, got " + std::to_string(k));
    if (coords.empty()) throw DataError("no coordinates to extract patches from");
    const int M = scene.rows, N = scene.cols, B = scene.bands, C = scene.aux_channels;
    const int r = k / 2;
    const int P = static_cast<int>(coords.size());

    PatchBatch batch;
    batch.hsi = Tensor::zeros({P, k, k, B});
    batch.aux = Tensor::zeros({P, k, k, C});
    batch.labels.resize(static_cast<std::size_t>(P));

    float* ph = batch.hsi.data().data();
    float* pa = batch.aux.data().data();
    for (int p = 0; p < P; ++p) {
        const Coord c = coords[static_cast<std::size_t>(p)];
        if (c.i < 0 || c.i >= M || c.j < 0 || c.j >= N)
            throw DataError("patch center (" + std::to_string(c.i) + "," + std::to_string(c.j) +
                            ") outside raster " + std::to_string(M) + "x" + std::to_string(N));
        const std::uint16_t lab = scene.labels[static_cast<std::size_t>(c.i) * N + c.j];
        if (lab == 0 && !allow_unlabeled)
            throw DataError("patch center (" + std::to_string(c.i) + "," + std::to_string(c.j) +
                            ") has background label");
        batch.labels[static_cast<std::size_t>(p)] = static_cast<int>(lab) - 1;
        for (int pi = 0; pi < k; ++pi) {
            const int si = c.i - r + pi;
            if (si < 0 || si >= M) continue; // stays zero
            for (int pj = 0; pj < k; ++pj) {
                const int sj = c.j - r + pj;
                if (sj < 0 || sj >= N) continue;
                const std::size_t src_px = static_cast<std::size_t>(si) * N + sj;
                std::copy_n(scene.hsi.data() + src_px * B, B,
                            ph + ((static_cast<std::size_t>(p) * k + pi) * k + pj) * B);
                std::copy_n(scene.aux.data() + src_px * C, C,
                            pa + ((static_cast<std::size_t>(p) * k + pi) * k + pj) * C);
            }
        }
    }
    return batch;
}

ModelBatch gather_batch(const PatchBatch& set, const std::vector<int>& indices,
                        std::size_t begin, std::size_t end) {
    const int k = set.hsi.dim(1), B = set.hsi.dim(3), C = set.aux.dim(3);
    const int n = static_cast<int>(end - begin);
    ModelBatch mb;
    mb.x_h = Tensor::zeros({n, k, k, B});
    mb.x_l = Tensor::zeros({n, C, k, k});
    mb.labels.resize(static_cast<std::size_t>(n));

    const float* sh = set.hsi.data().data();
    const float* sa = set.aux.data().data();
    float* dh = mb.x_h.data().data();
    float* dl = mb.x_l.data().data();
    const std::size_t hsi_row = static_cast<std::size_t>(k) * k * B;
    const std::size_t aux_row = static_cast<std::size_t>(k) * k * C;
    for (int t = 0; t < n; ++t) {
        const int src = indices[begin + static_cast<std::size_t>(t)];
        std::copy_n(sh + static_cast<std::size_t>(src) * hsi_row, hsi_row,
                    dh + static_cast<std::size_t>(t) * hsi_row);
        // [k,k,C] -> [C,k,k]
        const float* a = sa + static_cast<std::size_t>(src) * aux_row;
        float* d = dl + static_cast<std::size_t>(t) * aux_row;
        for (int s = 0; s < k * k; ++s)
            for (int c = 0; c < C; ++c)
                d[static_cast<std::size_t>(c) * k * k + s] = a[static_cast<std::size_t>(s) * C + c];
        mb.labels[static_cast<std::size_t>(t)] = set.labels[static_cast<std::size_t>(src)];
    }
    return mb;
}

std::pair<std::vector<Coord>, std::vector<Coord>>
split_random(const SceneBundle& scene, double fraction, const Rng& rng) {
    if (fraction <= 0.0 || fraction >= 1.0)
        throw ConfigError("split fraction must be in (0,1), got " + std::to_string(fraction));
    std::vector<std::vector<Coord>> per_class(static_cast<std::size_t>(scene.classes) + 1);
    for (int i = 0; i < scene.rows; ++i)
        for (int j = 0; j < scene.cols; ++j) {
            const std::uint16_t lab = scene.labels[static_cast<std::size_t>(i) * scene.cols + j];
            if (lab > 0) per_class[lab].push_back({i, j});
        }

    std::vector<Coord> train, test;
    for (int cls = 1; cls <= scene.classes; ++cls) {
        auto& coords = per_class[static_cast<std::size_t>(cls)];
        if (coords.size() < 2)
            throw SplitError("class " + std::to_string(cls) + " has " + std::to_string(coords.size()) +
                             " labeled pixels; need at least 2 to split");
        Rng class_rng = rng.fork(static_cast<std::uint64_t>(cls));
        fisher_yates(coords, class_rng);
        const std::size_t take =
            static_cast<std::size_t>(std::ceil(fraction * static_cast<double>(coords.size())));
        train.insert(train.end(), coords.begin(), coords.begin() + static_cast<std::ptrdiff_t>(take));
        test.insert(test.end(), coords.begin() + static_cast<std::ptrdiff_t>(take), coords.end());
    }
    return {std::move(train), std::move(test)};
}

std::pair<std::vector<Coord>, std::vector<Coord>>
split_from_masks(const SceneBundle& scene) {
    if (!scene.has_masks || scene.train_mask.empty() || scene.test_mask.empty())
        throw DataError("scene carries no train/test masks; use a random split");
    std::vector<Coord> train, test;
    for (int i = 0; i < scene.rows; ++i)
        for (int j = 0; j < scene.cols; ++j) {
            const std::size_t px = static_cast<std::size_t>(i) * scene.cols + j;
            const bool tr = scene.train_mask[px] != 0;
            const bool te = scene.test_mask[px] != 0;
            if (tr && te)
                throw DataError("train and test masks overlap at (" + std::to_string(i) + "," +
                                std::to_string(j) + ")");
            if ((tr || te) && scene.labels[px] == 0)
                throw DataError("mask marks unlabeled pixel (" + std::to_string(i) + "," +
                                std::to_string(j) + ")");
            if (tr) train.push_back({i, j});
            if (te) test.push_back({i, j});
        }
    if (test.empty())
        std::fprintf(stderr, "warning: test mask selects no pixels\n");
    return {std::move(train), std::move(test)};
}

namespace {

struct Blob {
    int ci, cj;
    double a, b, theta;
    std::vector<Coord> members;
};

bool inside_ellipse(const Blob& e, int i, int j) {
    const double di = i - e.ci, dj = j - e.cj;
    const double c = std::cos(e.theta), s = std::sin(e.theta);
    const double u = dj * c + di * s;
    const double v = -dj * s + di * c;
    return (u * u) / (e.a * e.a) + (v * v) / (e.b * e.b) <= 1.0;
}

} // namespace

SceneBundle synth_scene(int classes, int rows, int cols, int bands, int aux_channels,
                        std::uint64_t seed, bool aux_informative, const std::string& modality) {
    if (classes < 2) throw ConfigError("synthetic scenes need at least 2 classes");
    if (rows < 16 || cols < 16) throw ConfigError("synthetic scenes need at least 16x16 pixels");
    if (bands < 1 || aux_channels < 1) throw ConfigError("bands and aux channels must be positive");

    SceneBundle scene;
    scene.rows = rows;
    scene.cols = cols;
    scene.bands = bands;
    scene.aux_channels = aux_channels;
    scene.classes = classes;
    scene.modality = modality;
    scene.has_masks = true;
    const std::size_t pixels = static_cast<std::size_t>(rows) * cols;
    scene.labels.assign(pixels, 0);
    scene.hsi.assign(pixels * static_cast<std::size_t>(bands), 0.0f);
    scene.aux.assign(pixels * static_cast<std::size_t>(aux_channels), 0.0f);
    scene.train_mask.assign(pixels, 0);
    scene.test_mask.assign(pixels, 0);

    Rng rng_labels = Rng(seed).fork(streams::kSynthLabels);
    Rng rng_hsi = Rng(seed).fork(streams::kSynthHsi);
    Rng rng_aux = Rng(seed).fork(streams::kSynthAux);

    // Blob axes scale with the raster so small scenes stay placeable.
    const double ax_min = std::max(3.0, std::min(rows, cols) / 16.0);
    const double ax_max = std::max(ax_min + 1.0, std::min(rows, cols) / 8.0);
    const int blobs_per_class = 2;
    constexpr int kMaxTries = 500;

    std::vector<Blob> blobs;
    for (int cls = 1; cls <= classes; ++cls) {
        for (int bi = 0; bi < blobs_per_class; ++bi) {
            bool placed = false;
            for (int attempt = 0; attempt < kMaxTries && !placed; ++attempt) {
                Blob e;
                e.a = rng_labels.uniform(ax_min, ax_max);
                e.b = rng_labels.uniform(ax_min, ax_max);
                e.theta = rng_labels.uniform(0.0, std::numbers::pi);
                const int margin = static_cast<int>(std::ceil(std::max(e.a, e.b))) + 1;
                if (2 * margin + 2 >= rows || 2 * margin + 2 >= cols) continue;
                e.ci = static_cast<int>(rng_labels.next_below(static_cast<std::uint64_t>(rows - 2 * margin))) + margin;
                e.cj = static_cast<int>(rng_labels.next_below(static_cast<std::uint64_t>(cols - 2 * margin))) + margin;

                // One-pixel halo keeps blobs of different classes from touching.
                bool clear = true;
                for (int i = std::max(0, e.ci - margin - 1); i <= std::min(rows - 1, e.ci + margin + 1) && clear; ++i)
                    for (int j = std::max(0, e.cj - margin - 1); j <= std::min(cols - 1, e.cj + margin + 1) && clear; ++j)
                        if (scene.labels[static_cast<std::size_t>(i) * cols + j] != 0) clear = false;
                if (!clear) continue;

                for (int i = e.ci - margin; i <= e.ci + margin; ++i)
                    for (int j = e.cj - margin; j <= e.cj + margin; ++j)
                        if (inside_ellipse(e, i, j)) {
                            scene.labels[static_cast<std::size_t>(i) * cols + j] = static_cast<std::uint16_t>(cls);
                            e.members.push_back({i, j});
                        }
                if (e.members.size() < 8) { // degenerate sliver; unpaint and retry
                    for (const Coord& m : e.members)
                        scene.labels[static_cast<std::size_t>(m.i) * cols + m.j] = 0;
                    continue;
                }
                blobs.push_back(std::move(e));
                placed = true;
            }
            if (!placed)
                throw GeneratorError("could not place blob " + std::to_string(bi + 1) + " of class " +
                                     std::to_string(cls) + " after " + std::to_string(kMaxTries) +
                                     " attempts; raster too crowded");
        }
    }

    // Disjoint masks: the left half of every blob trains, the right half tests.
    for (const Blob& e : blobs)
        for (const Coord& m : e.members) {
            const std::size_t px = static_cast<std::size_t>(m.i) * cols + m.j;
            if (m.j < e.cj) scene.train_mask[px] = 1;
            else scene.test_mask[px] = 1;
        }

    // Spectral signatures: smooth sinusoids. Classes 1 and 2 are deliberately
    // near-identical in spectrum but far apart in elevation, so the auxiliary
    // modality carries real information.
    const double confusable_delta = 0.005;
    auto signature = [&](int cls, int b) {
        const double t = static_cast<double>(b) / static_cast<double>(bands);
        double freq, phase;
        if (cls == 1 || cls == 2) {
            freq = 2.0;
            phase = 0.15 + (cls == 2 ? confusable_delta : 0.0);
        } else {
            freq = 1.0 + static_cast<double>(cls % 3);
            phase = 0.8 * static_cast<double>(cls) / static_cast<double>(classes);
        }
        return 0.5 + 0.35 * std::sin(2.0 * std::numbers::pi * (freq * t + phase));
    };
    auto elevation = [&](int cls) {
        if (cls == 0) return 0.5;
        if (cls == 1) return 0.15;
        if (cls == 2) return 0.85;
        return 0.25 + 0.5 * static_cast<double>(cls - 2) / static_cast<double>(std::max(1, classes - 2));
    };

    constexpr double kNoise = 0.05;
    for (std::size_t px = 0; px < pixels; ++px) {
        const int cls = scene.labels[px];
        for (int b = 0; b < bands; ++b)
            scene.hsi[px * static_cast<std::size_t>(bands) + static_cast<std::size_t>(b)] =
                static_cast<float>(signature(cls, b) + rng_hsi.normal(0.0, kNoise));
        for (int c = 0; c < aux_channels; ++c) {
            const double v = aux_informative ? elevation(cls) + rng_aux.normal(0.0, kNoise)
                                             : rng_aux.uniform(0.0, 1.0);
            scene.aux[px * static_cast<std::size_t>(aux_channels) + static_cast<std::size_t>(c)] =
                static_cast<float>(v);
        }
    }
    return scene;
}

// ---------------------------------------------------------------------------
// container io

namespace {

constexpr const char* kSceneMagic = "MFTSCN1";

void write_bytes(const fs::path& path, const void* data, std::size_t bytes) {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw DataError("cannot open " + path.string() + " for writing");
    f.write(static_cast<const char*>(data), static_cast<std::streamsize>(bytes));
    if (!f) throw DataError("short write to " + path.string());
}

void read_bytes(const fs::path& path, void* data, std::size_t bytes, const char* what) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw DataError("missing scene payload " + path.string());
    f.seekg(0, std::ios::end);
    const auto actual = static_cast<std::size_t>(f.tellg());
    if (actual != bytes)
        throw DataError(std::string(what) + " payload " + path.string() + " holds " +
                        std::to_string(actual) + " bytes, header implies " + std::to_string(bytes));
    f.seekg(0);
    f.read(static_cast<char*>(data), static_cast<std::streamsize>(bytes));
    if (!f) throw DataError("short read from " + path.string());
}

} // namespace

void save_scene(const SceneBundle& scene, const std::string& dir) {
    fs::create_directories(dir);
    const fs::path root(dir);

    json header = {
        {"magic", kSceneMagic}, {"M", scene.rows},       {"N", scene.cols},
        {"B", scene.bands},     {"C", scene.aux_channels}, {"classes", scene.classes},
        {"modality", scene.modality}, {"has_masks", scene.has_masks},
    };
    std::ofstream hf(root / "header.json");
    if (!hf) throw DataError("cannot write " + (root / "header.json").string());
    hf << header.dump(2) << "\n";
    hf.close();

    write_bytes(root / "hsi.f32", scene.hsi.data(), scene.hsi.size() * sizeof(float));
    write_bytes(root / "aux.f32", scene.aux.data(), scene.aux.size() * sizeof(float));
    write_bytes(root / "labels.u16", scene.labels.data(), scene.labels.size() * sizeof(std::uint16_t));
    if (scene.has_masks) {
        write_bytes(root / "train_mask.u8", scene.train_mask.data(), scene.train_mask.size());
        write_bytes(root / "test_mask.u8", scene.test_mask.data(), scene.test_mask.size());
    }
}

SceneBundle load_scene(const std::string& dir) {
    const fs::path root(dir);
    std::ifstream hf(root / "header.json");
    if (!hf) throw DataError("no scene at " + dir + " (header.json missing)");
    json header;
    try {
        hf >> header;
    } catch (const json::exception& e) {
        throw DataError("malformed scene header: " + std::string(e.what()));
    }
    if (header.value("magic", "") != kSceneMagic)
        throw DataError("bad scene magic in " + dir + " (expected " + kSceneMagic + ")");

    SceneBundle scene;
    try {
        scene.rows = header.at("M").get<int>();
        scene.cols = header.at("N").get<int>();
        scene.bands = header.at("B").get<int>();
        scene.aux_channels = header.at("C").get<int>();
        scene.classes = header.at("classes").get<int>();
        scene.modality = header.at("modality").get<std::string>();
        scene.has_masks = header.at("has_masks").get<bool>();
    } catch (const json::exception& e) {
        throw DataError("scene header missing fields: " + std::string(e.what()));
    }
    if (scene.rows < 1 || scene.cols < 1 || scene.bands < 1 || scene.aux_channels < 1 || scene.classes < 1)
        throw DataError("scene header has non-positive dimensions");

    const std::size_t pixels = static_cast<std::size_t>(scene.rows) * scene.cols;
    scene.hsi.resize(pixels * static_cast<std::size_t>(scene.bands));
    scene.aux.resize(pixels * static_cast<std::size_t>(scene.aux_channels));
    scene.labels.resize(pixels);
    read_bytes(root / "hsi.f32", scene.hsi.data(), scene.hsi.size() * sizeof(float), "hsi");
    read_bytes(root / "aux.f32", scene.aux.data(), scene.aux.size() * sizeof(float), "aux");
    read_bytes(root / "labels.u16", scene.labels.data(), scene.labels.size() * sizeof(std::uint16_t), "labels");
    if (scene.has_masks) {
        scene.train_mask.resize(pixels);
        scene.test_mask.resize(pixels);
        read_bytes(root / "train_mask.u8", scene.train_mask.data(), pixels, "train_mask");
        read_bytes(root / "test_mask.u8", scene.test_mask.data(), pixels, "test_mask");
    }

    std::vector<bool> seen(static_cast<std::size_t>(scene.classes) + 1, false);
    for (std::uint16_t lab : scene.labels) {
        if (static_cast<int>(lab) > scene.classes)
            throw DataError("label " + std::to_string(lab) + " exceeds declared class count " +
                            std::to_string(scene.classes));
        seen[lab] = true;
    }
    for (int cls = 1; cls <= scene.classes; ++cls)
        if (!seen[static_cast<std::size_t>(cls)])
            throw DataError("class ids are not contiguous: class " + std::to_string(cls) +
                            " has no labeled pixels");
    return scene;
}

} // namespace mft
