#include "mft/metrics.hpp"

#include <cstdio>

#include "mft/errors.hpp"

namespace mft {

ConfusionMatrix::ConfusionMatrix(int classes) : classes_(classes) {
    if (classes < 1) throw ConfigError("confusion matrix needs at least 1 class");
    counts_.assign(static_cast<std::size_t>(classes) * static_cast<std::size_t>(classes), 0);
}

void ConfusionMatrix::accumulate(int true_label, int predicted) {
    if (true_label < 0 || true_label >= classes_ || predicted < 0 || predicted >= classes_)
        throw DataError("confusion matrix label out of range: true=" + std::to_string(true_label) +
                        " pred=" + std::to_string(predicted) + " classes=" + std::to_string(classes_));
    ++counts_[idx(true_label, predicted)];
}

void ConfusionMatrix::merge(const ConfusionMatrix& other) {
    if (other.classes_ != classes_)
        throw ConfigError("cannot merge confusion matrices of " + std::to_string(classes_) + " and " +
                          std::to_string(other.classes_) + " classes");
    for (std::size_t i = 0; i < counts_.size(); ++i) counts_[i] += other.counts_[i];
}

long long ConfusionMatrix::total() const {
    long long t = 0;
    for (long long c : counts_) t += c;
    return t;
}

long long ConfusionMatrix::row_sum(int t) const {
    long long s = 0;
    for (int p = 0; p < classes_; ++p) s += at(t, p);
    return s;
}

long long ConfusionMatrix::col_sum(int p) const {
    long long s = 0;
    for (int t = 0; t < classes_; ++t) s += at(t, p);
    return s;
}

EvalReport compute_metrics(const ConfusionMatrix& cm) {
    const long long total = cm.total();
    if (total == 0) throw DataError("cannot compute metrics of an empty evaluation");
    const int C = cm.classes();

    EvalReport r;
    r.confusion = cm;
    r.samples = total;
    r.per_class.assign(static_cast<std::size_t>(C), 0.0);
    r.class_empty.assign(static_cast<std::size_t>(C), false);

    long long trace = 0;
    double aa_sum = 0.0;
    int nonempty = 0;
    double pe_num = 0.0;
    for (int c = 0; c < C; ++c) {
        trace += cm.at(c, c);
        const long long rs = cm.row_sum(c);
        if (rs == 0) {
            r.class_empty[static_cast<std::size_t>(c)] = true;
        } else {
            r.per_class[static_cast<std::size_t>(c)] =
                static_cast<double>(cm.at(c, c)) / static_cast<double>(rs);
            aa_sum += r.per_class[static_cast<std::size_t>(c)];
            ++nonempty;
        }
        pe_num += static_cast<double>(rs) * static_cast<double>(cm.col_sum(c));
    }
    r.oa = static_cast<double>(trace) / static_cast<double>(total);
    r.aa = nonempty > 0 ? aa_sum / nonempty : 0.0;
    const double pe = pe_num / (static_cast<double>(total) * static_cast<double>(total));
    if (pe >= 1.0) {
        std::fprintf(stderr, "warning: chance agreement p_e = 1 (single-class evaluation); kappa set to 0\n");
        r.kappa = 0.0;
    } else {
        r.kappa = (r.oa - pe) / (1.0 - pe);
    }
    return r;
}

nlohmann::json report_to_json(const EvalReport& r) {
    nlohmann::json confusion = nlohmann::json::array();
    for (int t = 0; t < r.confusion.classes(); ++t) {
        nlohmann::json row = nlohmann::json::array();
        for (int p = 0; p < r.confusion.classes(); ++p) row.push_back(r.confusion.at(t, p));
        confusion.push_back(std::move(row));
    }
    return nlohmann::json{{"oa", r.oa},
                          {"aa", r.aa},
                          {"kappa", r.kappa},
                          {"per_class", r.per_class},
                          {"confusion", std::move(confusion)},
                          {"samples", r.samples}};
}

// Distinct hues, readable on white and black; entry 0 is background.
const std::uint8_t kPalette[kPaletteSize][3] = {
    {0, 0, 0},       {230, 25, 75},   {60, 180, 75},   {255, 225, 25},
    {0, 130, 200},   {245, 130, 48},  {145, 30, 180},  {70, 240, 240},
    {240, 50, 230},  {210, 245, 60},  {250, 190, 212}, {0, 128, 128},
    {220, 190, 255}, {170, 110, 40},  {128, 128, 0},   {255, 250, 200},
};

std::vector<std::uint8_t> render_map(int rows, int cols, const std::vector<Coord>& coords,
                                     const std::vector<int>& predictions) {
    if (coords.size() != predictions.size())
        throw ConfigError("render_map: " + std::to_string(coords.size()) + " coordinates but " +
                          std::to_string(predictions.size()) + " predictions");
    // P6 headers carry width (columns) before height (rows)
    const std::string header =
        "P6\n" + std::to_string(cols) + " " + std::to_string(rows) + "\n255\n";
    std::vector<std::uint8_t> bytes(header.begin(), header.end());
    const std::size_t offset = bytes.size();
    bytes.resize(offset + static_cast<std::size_t>(rows) * cols * 3, 0);

    for (std::size_t s = 0; s < coords.size(); ++s) {
        const Coord c = coords[s];
        if (c.i < 0 || c.i >= rows || c.j < 0 || c.j >= cols)
            throw DataError("render_map: coordinate (" + std::to_string(c.i) + "," + std::to_string(c.j) +
                            ") outside raster");
        const int entry = predictions[s] + 1;
        if (entry < 1 || entry >= kPaletteSize)
            throw DataError("render_map: class " + std::to_string(predictions[s]) +
                            " has no palette entry (palette covers 15 classes)");
        const std::size_t px = offset + (static_cast<std::size_t>(c.i) * cols + c.j) * 3;
        bytes[px] = kPalette[entry][0];
        bytes[px + 1] = kPalette[entry][1];
        bytes[px + 2] = kPalette[entry][2];
    }
    return bytes;
}

} // namespace mft
