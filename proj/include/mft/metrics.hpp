#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

#include "mft/scene.hpp"

namespace mft {

// rows = true class, cols = predicted class, both 0-based.
class ConfusionMatrix {
public:
    explicit ConfusionMatrix(int classes);

    void accumulate(int true_label, int predicted);
    void merge(const ConfusionMatrix& other);

    int classes() const { return classes_; }
    long long at(int t, int p) const { return counts_[idx(t, p)]; }
    long long total() const;
    long long row_sum(int t) const;
    long long col_sum(int p) const;

private:
    std::size_t idx(int t, int p) const {
        return static_cast<std::size_t>(t) * static_cast<std::size_t>(classes_) + static_cast<std::size_t>(p);
    }
    int classes_;
    std::vector<long long> counts_;
};

struct EvalReport {
    double oa = 0.0, aa = 0.0, kappa = 0.0;
    std::vector<double> per_class;
    std::vector<bool> class_empty; // true where the test split had no samples
    ConfusionMatrix confusion{1};
    long long samples = 0;
};

// OA = trace/total; per-class = diagonal/row; AA over nonempty rows;
// kappa = (p_o - p_e)/(1 - p_e). Throws DataError when total = 0; a
// degenerate p_e = 1 yields kappa 0 with a warning on stderr.
EvalReport compute_metrics(const ConfusionMatrix& cm);

nlohmann::json report_to_json(const EvalReport& r);

// Fixed palette: entry 0 is the black background, entries 1..15 color the
// classes, so at most 15 classes can be rendered.
inline constexpr int kPaletteSize = 16;
extern const std::uint8_t kPalette[kPaletteSize][3];

// P6 bytes, one pixel per raster cell: header "P6\n<cols> <rows>\n255\n",
// background black, predictions (0-based) drawn with palette entry pred+1.
std::vector<std::uint8_t> render_map(int rows, int cols, const std::vector<Coord>& coords,
                                     const std::vector<int>& predictions);

} // namespace mft
