#pragma once

#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "mft/tensor.hpp"

namespace mft {

// Central-difference check of one input tensor against the tape gradient.
// f must rebuild its graph on every call (it runs under a fresh tape for the
// analytic pass and with no tape for the numeric probes). Error metric per
// element: |analytic - numeric| / max(1, |analytic|, |numeric|). Elements
// whose error exceeds refine_above are re-probed at h_fine and keep the
// better estimate: a probe at the base step can straddle a ReLU kink or hit
// truncation error on a steep region, and the finer step filters both while
// a genuinely wrong backward stays wrong at any step.
double grad_check(const std::function<TensorT<double>(const TensorT<double>&)>& f,
                  TensorT<double>& x, double h = 1e-3, double refine_above = 1e-5,
                  double h_fine = 1e-6);

// Model-scale variant. A check owns several named parameter tensors; probing
// tens of thousands of coordinates serially is too slow, so the FD sweep
// fans out across threads, each running its own independently constructed
// problem instance (no shared mutable state between probes).

// One self-contained instance of the problem under test. flat parameter
// layout = the tensors returned by params(), in order, row-major.
struct FdProblem {
    virtual ~FdProblem() = default;
    virtual std::vector<TensorT<double>> params() = 0;
    virtual double loss() = 0; // pure evaluation, no tape required
};

using FdFactory = std::function<std::unique_ptr<FdProblem>()>;

struct FdResult {
    double max_error = 0.0;
    std::string worst_tensor;
    std::size_t worst_index = 0;
    double worst_analytic = 0.0;
    double worst_numeric = 0.0;
};

// names must parallel the tensors in params(). analytic holds the tape
// gradient for each parameter tensor in the same order, captured by the
// caller from a single recorded backward pass. Coordinates exceeding
// refine_above at the base step are re-probed at h_fine, as in grad_check.
FdResult fd_check_parallel(const FdFactory& make, const std::vector<std::string>& names,
                           const std::vector<std::vector<double>>& analytic, double h = 1e-3,
                           double refine_above = 1e-5, double h_fine = 1e-6);

} // namespace mft
