#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "mft/rng.hpp"
#include "mft/tensor.hpp"

namespace mft {

// Co-registered rasters. hsi is row-major band-fastest: hsi[(i*cols+j)*bands+b];
// aux and the label/mask rasters follow the same row-major pixel order.
struct SceneBundle {
    int rows = 0, cols = 0, bands = 0, aux_channels = 0, classes = 0;
    std::string modality = "lidar";
    bool has_masks = false;
    std::vector<float> hsi;
    std::vector<float> aux;
    std::vector<std::uint16_t> labels; // 0 = background
    std::vector<std::uint8_t> train_mask, test_mask;
};

struct Coord {
    int i = 0, j = 0;
    bool operator==(const Coord&) const = default;
};

// All patches for a coordinate list. hsi: [P,k,k,B], aux: [P,k,k,C] (both
// channels-last, matching the raster layout); labels are 0-based.
struct PatchBatch {
    Tensor hsi;
    Tensor aux;
    std::vector<int> labels;
    std::size_t count() const { return labels.size(); }
};

// Model-ready minibatch: aux transposed to channels-first.
struct ModelBatch {
    Tensor x_h; // [n,k,k,B]
    Tensor x_l; // [n,C,k,k]
    std::vector<int> labels;
};

// Per-band min-max to [0,1]; constant bands map to 0. Throws DataError on
// non-finite input.
SceneBundle normalize_scene(const SceneBundle& scene);

// k odd; zero padding of floor(k/2) at borders; labels remapped to 0-based.
// Coordinates must lie inside the raster and carry nonzero labels unless
// allow_unlabeled is set (background then yields label -1, for map rendering).
PatchBatch extract_patches(const SceneBundle& scene, const std::vector<Coord>& coords, int k,
                           bool allow_unlabeled = false);

// Rows of a PatchBatch selected by index, aux moved to channels-first.
ModelBatch gather_batch(const PatchBatch& set, const std::vector<int>& indices,
                        std::size_t begin, std::size_t end);

// Stratified: per class, ceil(fraction * count) shuffled coordinates go to
// train, the rest to test. A class with fewer than 2 labeled pixels throws
// SplitError.
std::pair<std::vector<Coord>, std::vector<Coord>>
split_random(const SceneBundle& scene, double fraction, const Rng& rng);

// Coordinate lists straight from the stored masks, row-major. Overlap or a
// mask bit on an unlabeled pixel throws DataError; an empty test mask only
// warns.
std::pair<std::vector<Coord>, std::vector<Coord>>
split_from_masks(const SceneBundle& scene);

// Deterministic synthetic scene: elliptical class blobs, smooth per-class
// spectral signatures plus Gaussian noise, class-leveled (or pure-noise) aux
// raster, and disjoint train/test masks from blob halves.
SceneBundle synth_scene(int classes, int rows, int cols, int bands, int aux_channels,
                        std::uint64_t seed, bool aux_informative,
                        const std::string& modality = "lidar");

void save_scene(const SceneBundle& scene, const std::string& dir);
SceneBundle load_scene(const std::string& dir);

} // namespace mft
