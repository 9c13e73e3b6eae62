#include "mft/refkernels.hpp"

#include <algorithm>
#include <cmath>

namespace mft::ref {

std::vector<double> conv2d(const std::vector<double>& x, int N, int Cin, int H, int W,
                           const std::vector<double>& w, int Cout, int kh, int kw,
                           const std::vector<double>& b, int groups, int pad) {
    const int Cpg = Cin / groups;
    const int Copg = Cout / groups;
    const int OH = H + 2 * pad - kh + 1;
    const int OW = W + 2 * pad - kw + 1;
    std::vector<double> y(static_cast<std::size_t>(N) * Cout * OH * OW, 0.0);
    for (int n = 0; n < N; ++n)
        for (int co = 0; co < Cout; ++co)
            for (int oh = 0; oh < OH; ++oh)
                for (int ow = 0; ow < OW; ++ow) {
                    double acc = b.empty() ? 0.0 : b[static_cast<std::size_t>(co)];
                    const int gi = co / Copg;
                    for (int ci = 0; ci < Cpg; ++ci)
                        for (int u = 0; u < kh; ++u)
                            for (int v = 0; v < kw; ++v) {
                                const int ih = oh + u - pad;
                                const int iw = ow + v - pad;
                                if (ih < 0 || ih >= H || iw < 0 || iw >= W) continue;
                                const std::size_t xi =
                                    ((static_cast<std::size_t>(n) * Cin + (gi * Cpg + ci)) * H + ih) * W + iw;
                                const std::size_t wi =
                                    ((static_cast<std::size_t>(co) * Cpg + ci) * kh + u) * kw + v;
                                acc += x[xi] * w[wi];
                            }
                    y[((static_cast<std::size_t>(n) * Cout + co) * OH + oh) * OW + ow] = acc;
                }
    return y;
}

std::vector<double> conv3d(const std::vector<double>& x, int N, int Cin, int H, int W, int D,
                           const std::vector<double>& w, int Cout, int kh, int kw, int kd,
                           const std::vector<double>& b, int ph, int pw, int pd) {
    const int OH = H + 2 * ph - kh + 1;
    const int OW = W + 2 * pw - kw + 1;
    const int OD = D + 2 * pd - kd + 1;
    std::vector<double> y(static_cast<std::size_t>(N) * Cout * OH * OW * OD, 0.0);
    for (int n = 0; n < N; ++n)
        for (int co = 0; co < Cout; ++co)
            for (int oh = 0; oh < OH; ++oh)
                for (int ow = 0; ow < OW; ++ow)
                    for (int od = 0; od < OD; ++od) {
                        double acc = b.empty() ? 0.0 : b[static_cast<std::size_t>(co)];
                        for (int ci = 0; ci < Cin; ++ci)
                            for (int u = 0; u < kh; ++u)
                                for (int v = 0; v < kw; ++v)
                                    for (int t = 0; t < kd; ++t) {
                                        const int ih = oh + u - ph;
                                        const int iw = ow + v - pw;
                                        const int id = od + t - pd;
                                        if (ih < 0 || ih >= H || iw < 0 || iw >= W || id < 0 || id >= D) continue;
                                        const std::size_t xi =
                                            (((static_cast<std::size_t>(n) * Cin + ci) * H + ih) * W + iw) * D + id;
                                        const std::size_t wi =
                                            (((static_cast<std::size_t>(co) * Cin + ci) * kh + u) * kw + v) * kd + t;
                                        acc += x[xi] * w[wi];
                                    }
                        y[(((static_cast<std::size_t>(n) * Cout + co) * OH + oh) * OW + ow) * OD + od] = acc;
                    }
    return y;
}

std::vector<double> matmul(const std::vector<double>& a, int m, int k,
                           const std::vector<double>& b, int p) {
    std::vector<double> y(static_cast<std::size_t>(m) * p, 0.0);
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < p; ++j) {
            double acc = 0.0;
            for (int kk = 0; kk < k; ++kk)
                acc += a[static_cast<std::size_t>(i) * k + kk] * b[static_cast<std::size_t>(kk) * p + j];
            y[static_cast<std::size_t>(i) * p + j] = acc;
        }
    return y;
}

std::vector<double> softmax_rows(const std::vector<double>& a, int rows, int cols) {
    std::vector<double> y(a.size());
    for (int i = 0; i < rows; ++i) {
        const double* row = a.data() + static_cast<std::size_t>(i) * cols;
        double* out = y.data() + static_cast<std::size_t>(i) * cols;
        double mx = row[0];
        for (int j = 1; j < cols; ++j) mx = std::max(mx, row[j]);
        double denom = 0.0;
        for (int j = 0; j < cols; ++j) {
            out[j] = std::exp(row[j] - mx);
            denom += out[j];
        }
        for (int j = 0; j < cols; ++j) out[j] /= denom;
    }
    return y;
}

} // namespace mft::ref
