#include "mft/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#ifdef _OPENMP
#include <omp.h>
#endif

#include "mft/errors.hpp"

namespace mft {

namespace {

double rel_err(double a, double n) {
    return std::abs(a - n) / std::max({1.0, std::abs(a), std::abs(n)});
}

} // namespace

double grad_check(const std::function<TensorT<double>(const TensorT<double>&)>& f,
                  TensorT<double>& x, double h, double refine_above, double h_fine) {
    x.set_requires_grad(true);
    x.zero_grad();
    {
        TapeT<double> tape;
        TensorT<double> loss = f(x);
        if (loss.size() != 1) throw VerifyError("grad_check: f must return a scalar");
        tape.backward(loss);
    }
    std::vector<double> analytic(x.size(), 0.0);
    if (x.has_grad()) {
        auto g = x.grad();
        std::copy(g.begin(), g.end(), analytic.begin());
    }

    x.set_requires_grad(false);
    double max_err = 0.0;
    double* px = x.data().data();
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double keep = px[i];
        const double a = analytic[i];
        double err = 0.0;
        for (const double step : {h, std::sqrt(h * h_fine), h_fine}) {
            px[i] = keep + step;
            const double up = f(x).item();
            px[i] = keep - step;
            const double dn = f(x).item();
            px[i] = keep;
            const double numeric = (up - dn) / (2.0 * step);
            if (!std::isfinite(a) || !std::isfinite(numeric))
                throw VerifyError("grad_check: non-finite value at element " + std::to_string(i));
            err = rel_err(a, numeric);
            if (err <= refine_above) break;
        }
        max_err = std::max(max_err, err);
    }
    x.set_requires_grad(true);
    return max_err;
}

FdResult fd_check_parallel(const FdFactory& make, const std::vector<std::string>& names,
                           const std::vector<std::vector<double>>& analytic, double h,
                           double refine_above, double h_fine) {
    // Flatten the analytic gradients and record tensor boundaries.
    std::vector<double> flat;
    std::vector<std::size_t> bounds{0};
    for (const auto& g : analytic) {
        flat.insert(flat.end(), g.begin(), g.end());
        bounds.push_back(flat.size());
    }
    const std::size_t total = flat.size();

    int nthreads = 1;
#ifdef _OPENMP
    nthreads = omp_get_max_threads();
#endif
    std::vector<FdResult> partial(static_cast<std::size_t>(nthreads));

#pragma omp parallel num_threads(nthreads)
    {
        int tid = 0;
#ifdef _OPENMP
        tid = omp_get_thread_num();
#endif
        auto problem = make();
        auto params = problem->params();
        FdResult local;
#pragma omp for schedule(static)
        for (std::ptrdiff_t i = 0; i < static_cast<std::ptrdiff_t>(total); ++i) {
            // locate the owning tensor
            std::size_t ti = 0;
            while (bounds[ti + 1] <= static_cast<std::size_t>(i)) ++ti;
            const std::size_t local_i = static_cast<std::size_t>(i) - bounds[ti];
            double* slot = params[ti].data().data() + local_i;
            const double keep = *slot;
            const double a = flat[static_cast<std::size_t>(i)];
            double err = 0.0;
            double numeric = 0.0;
            for (const double step : {h, std::sqrt(h * h_fine), h_fine}) {
                *slot = keep + step;
                const double up = problem->loss();
                *slot = keep - step;
                const double dn = problem->loss();
                *slot = keep;
                numeric = (up - dn) / (2.0 * step);
                if (!std::isfinite(a) || !std::isfinite(numeric)) {
                    err = std::numeric_limits<double>::infinity();
                    break;
                }
                err = rel_err(a, numeric);
                if (err <= refine_above) break;
            }
            if (err > local.max_error) {
                local.max_error = err;
                local.worst_tensor = names[ti];
                local.worst_index = local_i;
                local.worst_analytic = a;
                local.worst_numeric = numeric;
            }
        }
        partial[static_cast<std::size_t>(tid)] = local;
    }

    FdResult best;
    for (const auto& p : partial)
        if (p.max_error >= best.max_error) best = p;
    if (!std::isfinite(best.max_error))
        throw VerifyError("fd_check: non-finite value while probing tensor '" + best.worst_tensor + "'");
    return best;
}

} // namespace mft
