#pragma once

// Deliberately naive serial kernels, double precision, written as plain
// nested loops with no shared code against the main library. They exist so
// tests and the benchmark have an independent answer to compare against.

#include <vector>

namespace mft::ref {

// x: [N,Cin,H,W], w: [Cout,Cin/groups,kh,kw], b: [Cout] (empty = no bias),
// stride 1. Returns [N,Cout,OH,OW] with OH = H+2p-kh+1, OW = W+2p-kw+1.
std::vector<double> conv2d(const std::vector<double>& x, int N, int Cin, int H, int W,
                           const std::vector<double>& w, int Cout, int kh, int kw,
                           const std::vector<double>& b, int groups, int pad);

// x: [N,Cin,H,W,D], w: [Cout,Cin,kh,kw,kd], b: [Cout] (empty = no bias),
// stride 1, per-axis padding. Returns [N,Cout,OH,OW,OD].
std::vector<double> conv3d(const std::vector<double>& x, int N, int Cin, int H, int W, int D,
                           const std::vector<double>& w, int Cout, int kh, int kw, int kd,
                           const std::vector<double>& b, int ph, int pw, int pd);

// a: [m,k], b: [k,p]. Returns [m,p].
std::vector<double> matmul(const std::vector<double>& a, int m, int k,
                           const std::vector<double>& b, int p);

// Row-wise softmax of a [rows,cols] matrix, max-subtracted.
std::vector<double> softmax_rows(const std::vector<double>& a, int rows, int cols);

} // namespace mft::ref
