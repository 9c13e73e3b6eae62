#include "mft/ops.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numbers>

namespace mft {
namespace {

// Below this many output elements a parallel region is not worth spawning.
constexpr std::size_t kParCutoff = 4096;

template <typename T>
bool wants_tape(std::initializer_list<const TensorT<T>*> inputs) {
    if (!TapeT<T>::current()) return false;
    for (const TensorT<T>* t : inputs)
        if (t->defined() && t->requires_grad()) return true;
    return false;
}

template <typename T>
void mark_output(TensorT<T>& out, bool recorded) {
    if (recorded) out.set_requires_grad(true);
}

std::vector<std::size_t> row_major_strides(const std::vector<int>& shape) {
    std::vector<std::size_t> s(shape.size(), 1);
    for (int i = static_cast<int>(shape.size()) - 2; i >= 0; --i)
        s[static_cast<std::size_t>(i)] = s[static_cast<std::size_t>(i + 1)] * static_cast<std::size_t>(shape[static_cast<std::size_t>(i) + 1]);
    return s;
}

} // namespace

// ---------------------------------------------------------------------------
// elementwise

template <typename T>
TensorT<T> add(const TensorT<T>& a, const TensorT<T>& b) {
    if (a.shape() != b.shape())
        throw ShapeError("add: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    TensorT<T> y = TensorT<T>::zeros(a.shape());
    const T* pa = a.data().data();
    const T* pb = b.data().data();
    T* py = y.data().data();
    const std::ptrdiff_t n = static_cast<std::ptrdiff_t>(a.size());
#pragma omp parallel for if (n > static_cast<std::ptrdiff_t>(kParCutoff))
    for (std::ptrdiff_t i = 0; i < n; ++i) py[i] = pa[i] + pb[i];

    bool rec = wants_tape<T>({&a, &b});
    mark_output(y, rec);
    if (rec) {
        auto sa = a.storage(), sb = b.storage(), sy = y.storage();
        TapeT<T>::current()->record([sa, sb, sy]() {
            if (sy->grad.empty()) return;
            const T* g = sy->grad.data();
            const std::ptrdiff_t m = static_cast<std::ptrdiff_t>(sy->data.size());
            for (auto& s : {sa, sb}) {
                if (!s->requires_grad) continue;
                if (s->grad.empty()) s->grad.assign(s->data.size(), T(0));
                T* d = s->grad.data();
#pragma omp parallel for if (m > static_cast<std::ptrdiff_t>(kParCutoff))
                for (std::ptrdiff_t i = 0; i < m; ++i) d[i] += g[i];
            }
        });
    }
    return y;
}

template <typename T>
TensorT<T> mul(const TensorT<T>& a, const TensorT<T>& b) {
    if (a.shape() != b.shape())
        throw ShapeError("mul: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    TensorT<T> y = TensorT<T>::zeros(a.shape());
    const T* pa = a.data().data();
    const T* pb = b.data().data();
    T* py = y.data().data();
    const std::ptrdiff_t n = static_cast<std::ptrdiff_t>(a.size());
#pragma omp parallel for if (n > static_cast<std::ptrdiff_t>(kParCutoff))
    for (std::ptrdiff_t i = 0; i < n; ++i) py[i] = pa[i] * pb[i];

    bool rec = wants_tape<T>({&a, &b});
    mark_output(y, rec);
    if (rec) {
        auto sa = a.storage(), sb = b.storage(), sy = y.storage();
        TapeT<T>::current()->record([sa, sb, sy]() {
            if (sy->grad.empty()) return;
            const T* g = sy->grad.data();
            const std::ptrdiff_t m = static_cast<std::ptrdiff_t>(sy->data.size());
            if (sa->requires_grad) {
                if (sa->grad.empty()) sa->grad.assign(sa->data.size(), T(0));
                T* d = sa->grad.data();
                const T* other = sb->data.data();
#pragma omp parallel for if (m > static_cast<std::ptrdiff_t>(kParCutoff))
                for (std::ptrdiff_t i = 0; i < m; ++i) d[i] += g[i] * other[i];
            }
            if (sb->requires_grad) {
                if (sb->grad.empty()) sb->grad.assign(sb->data.size(), T(0));
                T* d = sb->grad.data();
                const T* other = sa->data.data();
#pragma omp parallel for if (m > static_cast<std::ptrdiff_t>(kParCutoff))
                for (std::ptrdiff_t i = 0; i < m; ++i) d[i] += g[i] * other[i];
            }
        });
    }
    return y;
}

template <typename T>
TensorT<T> scale(const TensorT<T>& a, T c) {
    TensorT<T> y = TensorT<T>::zeros(a.shape());
    const T* pa = a.data().data();
    T* py = y.data().data();
    const std::ptrdiff_t n = static_cast<std::ptrdiff_t>(a.size());
#pragma omp parallel for if (n > static_cast<std::ptrdiff_t>(kParCutoff))
    for (std::ptrdiff_t i = 0; i < n; ++i) py[i] = c * pa[i];

    bool rec = wants_tape<T>({&a});
    mark_output(y, rec);
    if (rec) {
        auto sa = a.storage(), sy = y.storage();
        TapeT<T>::current()->record([sa, sy, c]() {
            if (sy->grad.empty() || !sa->requires_grad) return;
            if (sa->grad.empty()) sa->grad.assign(sa->data.size(), T(0));
            const T* g = sy->grad.data();
            T* d = sa->grad.data();
            const std::ptrdiff_t m = static_cast<std::ptrdiff_t>(sy->data.size());
#pragma omp parallel for if (m > static_cast<std::ptrdiff_t>(kParCutoff))
            for (std::ptrdiff_t i = 0; i < m; ++i) d[i] += c * g[i];
        });
    }
    return y;
}

template <typename T>
TensorT<T> relu(const TensorT<T>& a) {
    TensorT<T> y = TensorT<T>::zeros(a.shape());
    const T* pa = a.data().data();
    T* py = y.data().data();
    const std::ptrdiff_t n = static_cast<std::ptrdiff_t>(a.size());
#pragma omp parallel for if (n > static_cast<std::ptrdiff_t>(kParCutoff))
    for (std::ptrdiff_t i = 0; i < n; ++i) py[i] = pa[i] > T(0) ? pa[i] : T(0);

    bool rec = wants_tape<T>({&a});
    mark_output(y, rec);
    if (rec) {
        auto sa = a.storage(), sy = y.storage();
        TapeT<T>::current()->record([sa, sy]() {
            if (sy->grad.empty() || !sa->requires_grad) return;
            if (sa->grad.empty()) sa->grad.assign(sa->data.size(), T(0));
            const T* g = sy->grad.data();
            const T* x = sa->data.data();
            T* d = sa->grad.data();
            const std::ptrdiff_t m = static_cast<std::ptrdiff_t>(sy->data.size());
#pragma omp parallel for if (m > static_cast<std::ptrdiff_t>(kParCutoff))
            for (std::ptrdiff_t i = 0; i < m; ++i)
                if (x[i] > T(0)) d[i] += g[i];
        });
    }
    return y;
}

template <typename T>
TensorT<T> gelu(const TensorT<T>& a) {
    // Exact Gaussian-CDF form: 0.5 x (1 + erf(x / sqrt 2)).
    TensorT<T> y = TensorT<T>::zeros(a.shape());
    const T* pa = a.data().data();
    T* py = y.data().data();
    const std::ptrdiff_t n = static_cast<std::ptrdiff_t>(a.size());
#pragma omp parallel for if (n > static_cast<std::ptrdiff_t>(kParCutoff))
    for (std::ptrdiff_t i = 0; i < n; ++i) {
        double x = static_cast<double>(pa[i]);
        py[i] = static_cast<T>(0.5 * x * (1.0 + std::erf(x * std::numbers::sqrt2 / 2.0)));
    }

    bool rec = wants_tape<T>({&a});
    mark_output(y, rec);
    if (rec) {
        auto sa = a.storage(), sy = y.storage();
        TapeT<T>::current()->record([sa, sy]() {
            if (sy->grad.empty() || !sa->requires_grad) return;
            if (sa->grad.empty()) sa->grad.assign(sa->data.size(), T(0));
            const T* g = sy->grad.data();
            const T* xs = sa->data.data();
            T* d = sa->grad.data();
            const std::ptrdiff_t m = static_cast<std::ptrdiff_t>(sy->data.size());
#pragma omp parallel for if (m > static_cast<std::ptrdiff_t>(kParCutoff))
            for (std::ptrdiff_t i = 0; i < m; ++i) {
                double x = static_cast<double>(xs[i]);
                double cdf = 0.5 * (1.0 + std::erf(x * std::numbers::sqrt2 / 2.0));
                double pdf = std::exp(-0.5 * x * x) / std::sqrt(2.0 * std::numbers::pi);
                d[i] += g[i] * static_cast<T>(cdf + x * pdf);
            }
        });
    }
    return y;
}

// ---------------------------------------------------------------------------
// structural

template <typename T>
TensorT<T> reshape(const TensorT<T>& a, std::vector<int> new_shape) {
    if (shape_numel(new_shape) != a.size())
        throw ShapeError("reshape: " + shape_str(a.shape()) + " has " + std::to_string(a.size()) +
                         " elements, target " + shape_str(new_shape) + " wants " + std::to_string(shape_numel(new_shape)));
    TensorT<T> y = TensorT<T>::from_data(std::move(new_shape), {a.data().begin(), a.data().end()});

    bool rec = wants_tape<T>({&a});
    mark_output(y, rec);
    if (rec) {
        auto sa = a.storage(), sy = y.storage();
        TapeT<T>::current()->record([sa, sy]() {
            if (sy->grad.empty() || !sa->requires_grad) return;
            if (sa->grad.empty()) sa->grad.assign(sa->data.size(), T(0));
            const T* g = sy->grad.data();
            T* d = sa->grad.data();
            const std::ptrdiff_t m = static_cast<std::ptrdiff_t>(sy->data.size());
#pragma omp parallel for if (m > static_cast<std::ptrdiff_t>(kParCutoff))
            for (std::ptrdiff_t i = 0; i < m; ++i) d[i] += g[i];
        });
    }
    return y;
}

template <typename T>
TensorT<T> permute(const TensorT<T>& a, const std::vector<int>& axes) {
    const int r = a.rank();
    if (static_cast<int>(axes.size()) != r)
        throw ShapeError("permute: axes count " + std::to_string(axes.size()) + " != rank " + std::to_string(r));
    std::vector<bool> seen(static_cast<std::size_t>(r), false);
    for (int ax : axes) {
        if (ax < 0 || ax >= r || seen[static_cast<std::size_t>(ax)])
            throw ShapeError("permute: invalid axes for rank " + std::to_string(r));
        seen[static_cast<std::size_t>(ax)] = true;
    }

    std::vector<int> out_shape(static_cast<std::size_t>(r));
    for (int i = 0; i < r; ++i) out_shape[static_cast<std::size_t>(i)] = a.dim(axes[static_cast<std::size_t>(i)]);
    TensorT<T> y = TensorT<T>::zeros(out_shape);

    const auto in_strides = row_major_strides(a.shape());
    const auto out_strides = row_major_strides(out_shape);
    // out coordinate i walks input axis axes[i]
    std::vector<std::size_t> gather(static_cast<std::size_t>(r));
    for (int i = 0; i < r; ++i) gather[static_cast<std::size_t>(i)] = in_strides[static_cast<std::size_t>(axes[static_cast<std::size_t>(i)])];

    const T* pa = a.data().data();
    T* py = y.data().data();
    const std::ptrdiff_t n = static_cast<std::ptrdiff_t>(a.size());
#pragma omp parallel for if (n > static_cast<std::ptrdiff_t>(kParCutoff))
    for (std::ptrdiff_t o = 0; o < n; ++o) {
        std::size_t rem = static_cast<std::size_t>(o), src = 0;
        for (int i = 0; i < r; ++i) {
            std::size_t c = rem / out_strides[static_cast<std::size_t>(i)];
            rem %= out_strides[static_cast<std::size_t>(i)];
            src += c * gather[static_cast<std::size_t>(i)];
        }
        py[o] = pa[src];
    }

    bool rec = wants_tape<T>({&a});
    mark_output(y, rec);
    if (rec) {
        auto sa = a.storage(), sy = y.storage();
        TapeT<T>::current()->record([sa, sy, out_strides, gather, r]() {
            if (sy->grad.empty() || !sa->requires_grad) return;
            if (sa->grad.empty()) sa->grad.assign(sa->data.size(), T(0));
            const T* g = sy->grad.data();
            T* d = sa->grad.data();
            const std::ptrdiff_t m = static_cast<std::ptrdiff_t>(sy->data.size());
#pragma omp parallel for if (m > static_cast<std::ptrdiff_t>(kParCutoff))
            for (std::ptrdiff_t o = 0; o < m; ++o) {
                std::size_t rem = static_cast<std::size_t>(o), src = 0;
                for (int i = 0; i < r; ++i) {
                    std::size_t c = rem / out_strides[static_cast<std::size_t>(i)];
                    rem %= out_strides[static_cast<std::size_t>(i)];
                    src += c * gather[static_cast<std::size_t>(i)];
                }
                d[src] += g[o];
            }
        });
    }
    return y;
}

template <typename T>
TensorT<T> broadcast_to(const TensorT<T>& a, const std::vector<int>& target) {
    const int r = a.rank();
    if (static_cast<int>(target.size()) != r)
        throw ShapeError("broadcast_to: rank mismatch " + shape_str(a.shape()) + " vs " + shape_str(target));
    for (int i = 0; i < r; ++i)
        if (a.dim(i) != target[static_cast<std::size_t>(i)] && a.dim(i) != 1)
            throw ShapeError("broadcast_to: cannot expand " + shape_str(a.shape()) + " to " + shape_str(target));

    TensorT<T> y = TensorT<T>::zeros(target);
    const auto in_strides = row_major_strides(a.shape());
    const auto out_strides = row_major_strides(target);
    std::vector<std::size_t> gather(static_cast<std::size_t>(r));
    for (int i = 0; i < r; ++i)
        gather[static_cast<std::size_t>(i)] = (a.dim(i) == 1 && target[static_cast<std::size_t>(i)] != 1)
                                                  ? 0
                                                  : in_strides[static_cast<std::size_t>(i)];

    const T* pa = a.data().data();
    T* py = y.data().data();
    const std::ptrdiff_t n = static_cast<std::ptrdiff_t>(y.size());
#pragma omp parallel for if (n > static_cast<std::ptrdiff_t>(kParCutoff))
    for (std::ptrdiff_t o = 0; o < n; ++o) {
        std::size_t rem = static_cast<std::size_t>(o), src = 0;
        for (int i = 0; i < r; ++i) {
            std::size_t c = rem / out_strides[static_cast<std::size_t>(i)];
            rem %= out_strides[static_cast<std::size_t>(i)];
            src += c * gather[static_cast<std::size_t>(i)];
        }
        py[o] = pa[src];
    }

    bool rec = wants_tape<T>({&a});
    mark_output(y, rec);
    if (rec) {
        auto sa = a.storage(), sy = y.storage();
        std::vector<int> in_shape = a.shape();
        std::vector<int> out_shape = target;
        TapeT<T>::current()->record([sa, sy, in_shape, out_shape, in_strides, out_strides, r]() {
            if (sy->grad.empty() || !sa->requires_grad) return;
            if (sa->grad.empty()) sa->grad.assign(sa->data.size(), T(0));
            const T* g = sy->grad.data();
            T* d = sa->grad.data();
            // Gather per input element: walk the broadcast region in fixed
            // row-major order.
            std::vector<std::size_t> b_extents, b_strides;
            std::size_t combos = 1;
            for (int i = 0; i < r; ++i)
                if (in_shape[static_cast<std::size_t>(i)] == 1 && out_shape[static_cast<std::size_t>(i)] != 1) {
                    b_extents.push_back(static_cast<std::size_t>(out_shape[static_cast<std::size_t>(i)]));
                    b_strides.push_back(out_strides[static_cast<std::size_t>(i)]);
                    combos *= b_extents.back();
                }
            const std::ptrdiff_t m = static_cast<std::ptrdiff_t>(sa->data.size());
#pragma omp parallel for if (m * static_cast<std::ptrdiff_t>(combos) > static_cast<std::ptrdiff_t>(kParCutoff))
            for (std::ptrdiff_t ii = 0; ii < m; ++ii) {
                std::size_t rem = static_cast<std::size_t>(ii), base = 0;
                for (int i = 0; i < r; ++i) {
                    std::size_t c = rem / in_strides[static_cast<std::size_t>(i)];
                    rem %= in_strides[static_cast<std::size_t>(i)];
                    base += c * out_strides[static_cast<std::size_t>(i)];
                }
                T acc = T(0);
                for (std::size_t t = 0; t < combos; ++t) {
                    std::size_t q = t, off = base;
                    for (std::size_t k = b_extents.size(); k-- > 0;) {
                        off += (q % b_extents[k]) * b_strides[k];
                        q /= b_extents[k];
                    }
                    acc += g[off];
                }
                d[ii] += acc;
            }
        });
    }
    return y;
}

template <typename T>
TensorT<T> concat(const std::vector<TensorT<T>>& parts, int axis) {
    if (parts.empty()) throw ShapeError("concat: no inputs");
    const int r = parts[0].rank();
    if (axis < 0 || axis >= r) throw ShapeError("concat: axis " + std::to_string(axis) + " out of range");
    std::vector<int> out_shape = parts[0].shape();
    int total = 0;
    for (const auto& p : parts) {
        if (p.rank() != r) throw ShapeError("concat: rank mismatch");
        for (int i = 0; i < r; ++i)
            if (i != axis && p.dim(i) != out_shape[static_cast<std::size_t>(i)])
                throw ShapeError("concat: shape mismatch " + shape_str(p.shape()) + " vs " + shape_str(parts[0].shape()));
        total += p.dim(axis);
    }
    out_shape[static_cast<std::size_t>(axis)] = total;

    TensorT<T> y = TensorT<T>::zeros(out_shape);
    std::size_t inner = 1;
    for (int i = axis + 1; i < r; ++i) inner *= static_cast<std::size_t>(out_shape[static_cast<std::size_t>(i)]);
    std::size_t outer = 1;
    for (int i = 0; i < axis; ++i) outer *= static_cast<std::size_t>(out_shape[static_cast<std::size_t>(i)]);
    const std::size_t out_row = static_cast<std::size_t>(total) * inner;

    T* py = y.data().data();
    std::size_t col_off = 0;
    for (const auto& p : parts) {
        const T* pp = p.data().data();
        const std::size_t p_row = static_cast<std::size_t>(p.dim(axis)) * inner;
        const std::ptrdiff_t no = static_cast<std::ptrdiff_t>(outer);
#pragma omp parallel for if (no * static_cast<std::ptrdiff_t>(p_row) > static_cast<std::ptrdiff_t>(kParCutoff))
        for (std::ptrdiff_t o = 0; o < no; ++o)
            std::copy_n(pp + static_cast<std::size_t>(o) * p_row, p_row,
                        py + static_cast<std::size_t>(o) * out_row + col_off);
        col_off += p_row;
    }

    std::vector<const TensorT<T>*> ptrs;
    for (const auto& p : parts) ptrs.push_back(&p);
    bool rec = TapeT<T>::current() != nullptr &&
               std::any_of(ptrs.begin(), ptrs.end(), [](const TensorT<T>* p) { return p->requires_grad(); });
    mark_output(y, rec);
    if (rec) {
        std::vector<std::shared_ptr<StorageT<T>>> srcs;
        std::vector<std::size_t> rows;
        for (const auto& p : parts) {
            srcs.push_back(p.storage());
            rows.push_back(static_cast<std::size_t>(p.dim(axis)) * inner);
        }
        auto sy = y.storage();
        TapeT<T>::current()->record([srcs, rows, sy, outer, out_row]() {
            if (sy->grad.empty()) return;
            const T* g = sy->grad.data();
            std::size_t off = 0;
            for (std::size_t pi = 0; pi < srcs.size(); ++pi) {
                auto& s = srcs[pi];
                const std::size_t row = rows[pi];
                if (s->requires_grad) {
                    if (s->grad.empty()) s->grad.assign(s->data.size(), T(0));
                    T* d = s->grad.data();
                    const std::ptrdiff_t no = static_cast<std::ptrdiff_t>(outer);
#pragma omp parallel for if (no * static_cast<std::ptrdiff_t>(row) > static_cast<std::ptrdiff_t>(kParCutoff))
                    for (std::ptrdiff_t o = 0; o < no; ++o) {
                        const T* gs = g + static_cast<std::size_t>(o) * out_row + off;
                        T* ds = d + static_cast<std::size_t>(o) * row;
                        for (std::size_t i = 0; i < row; ++i) ds[i] += gs[i];
                    }
                }
                off += row;
            }
        });
    }
    return y;
}

template <typename T>
TensorT<T> slice(const TensorT<T>& a, int axis, int start, int len) {
    const int r = a.rank();
    if (axis < 0 || axis >= r) throw ShapeError("slice: axis out of range");
    if (start < 0 || len <= 0 || start + len > a.dim(axis))
        throw ShapeError("slice: range [" + std::to_string(start) + "," + std::to_string(start + len) +
                         ") out of bounds for axis extent " + std::to_string(a.dim(axis)));

    std::vector<int> out_shape = a.shape();
    out_shape[static_cast<std::size_t>(axis)] = len;
    TensorT<T> y = TensorT<T>::zeros(out_shape);

    std::size_t inner = 1;
    for (int i = axis + 1; i < r; ++i) inner *= static_cast<std::size_t>(a.dim(i));
    std::size_t outer = 1;
    for (int i = 0; i < axis; ++i) outer *= static_cast<std::size_t>(a.dim(i));
    const std::size_t in_row = static_cast<std::size_t>(a.dim(axis)) * inner;
    const std::size_t out_row = static_cast<std::size_t>(len) * inner;
    const std::size_t skip = static_cast<std::size_t>(start) * inner;

    const T* pa = a.data().data();
    T* py = y.data().data();
    const std::ptrdiff_t no = static_cast<std::ptrdiff_t>(outer);
#pragma omp parallel for if (no * static_cast<std::ptrdiff_t>(out_row) > static_cast<std::ptrdiff_t>(kParCutoff))
    for (std::ptrdiff_t o = 0; o < no; ++o)
        std::copy_n(pa + static_cast<std::size_t>(o) * in_row + skip, out_row,
                    py + static_cast<std::size_t>(o) * out_row);

    bool rec = wants_tape<T>({&a});
    mark_output(y, rec);
    if (rec) {
        auto sa = a.storage(), sy = y.storage();
        TapeT<T>::current()->record([sa, sy, outer, in_row, out_row, skip]() {
            if (sy->grad.empty() || !sa->requires_grad) return;
            if (sa->grad.empty()) sa->grad.assign(sa->data.size(), T(0));
            const T* g = sy->grad.data();
            T* d = sa->grad.data();
            const std::ptrdiff_t no = static_cast<std::ptrdiff_t>(outer);
#pragma omp parallel for if (no * static_cast<std::ptrdiff_t>(out_row) > static_cast<std::ptrdiff_t>(kParCutoff))
            for (std::ptrdiff_t o = 0; o < no; ++o) {
                const T* gs = g + static_cast<std::size_t>(o) * out_row;
                T* ds = d + static_cast<std::size_t>(o) * in_row + skip;
                for (std::size_t i = 0; i < out_row; ++i) ds[i] += gs[i];
            }
        });
    }
    return y;
}

template <typename T>
TensorT<T> sum(const TensorT<T>& a) {
    TensorT<T> y = TensorT<T>::zeros({1});
    const T* pa = a.data().data();
    T acc = T(0);
    for (std::size_t i = 0; i < a.size(); ++i) acc += pa[i];
    y.data()[0] = acc;

    bool rec = wants_tape<T>({&a});
    mark_output(y, rec);
    if (rec) {
        auto sa = a.storage(), sy = y.storage();
        TapeT<T>::current()->record([sa, sy]() {
            if (sy->grad.empty() || !sa->requires_grad) return;
            if (sa->grad.empty()) sa->grad.assign(sa->data.size(), T(0));
            const T g = sy->grad[0];
            T* d = sa->grad.data();
            const std::ptrdiff_t m = static_cast<std::ptrdiff_t>(sa->data.size());
#pragma omp parallel for if (m > static_cast<std::ptrdiff_t>(kParCutoff))
            for (std::ptrdiff_t i = 0; i < m; ++i) d[i] += g;
        });
    }
    return y;
}

// ---------------------------------------------------------------------------
// matmul

namespace {

struct MatmulDims {
    std::size_t batches;
    int m, k, p;
    bool b_shared;
};

template <typename T>
MatmulDims matmul_dims(const TensorT<T>& a, const TensorT<T>& b) {
    if (a.rank() < 2 || b.rank() < 2)
        throw ShapeError("matmul: operands must be at least rank 2, got " + shape_str(a.shape()) + " and " + shape_str(b.shape()));
    MatmulDims d{};
    d.m = a.dim(a.rank() - 2);
    d.k = a.dim(a.rank() - 1);
    d.b_shared = b.rank() == 2 && a.rank() > 2;
    if (!d.b_shared && b.rank() != a.rank())
        throw ShapeError("matmul: rank mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    if (b.dim(b.rank() - 2) != d.k)
        throw ShapeError("matmul: inner extents disagree, " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    d.p = b.dim(b.rank() - 1);
    d.batches = 1;
    for (int i = 0; i < a.rank() - 2; ++i) {
        d.batches *= static_cast<std::size_t>(a.dim(i));
        if (!d.b_shared && b.dim(i) != a.dim(i))
            throw ShapeError("matmul: batch extents disagree, " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    }
    return d;
}

} // namespace

template <typename T>
TensorT<T> matmul(const TensorT<T>& a, const TensorT<T>& b) {
    const MatmulDims dm = matmul_dims(a, b);
    std::vector<int> out_shape(a.shape().begin(), a.shape().end() - 1);
    out_shape.push_back(dm.p);
    TensorT<T> y = TensorT<T>::zeros(out_shape);

    const T* pa = a.data().data();
    const T* pb = b.data().data();
    T* py = y.data().data();
    const std::size_t a_stride = static_cast<std::size_t>(dm.m) * static_cast<std::size_t>(dm.k);
    const std::size_t b_stride = dm.b_shared ? 0 : static_cast<std::size_t>(dm.k) * static_cast<std::size_t>(dm.p);
    const std::size_t y_stride = static_cast<std::size_t>(dm.m) * static_cast<std::size_t>(dm.p);

    const std::ptrdiff_t rows = static_cast<std::ptrdiff_t>(dm.batches) * dm.m;
#pragma omp parallel for if (rows * dm.k * dm.p > static_cast<std::ptrdiff_t>(kParCutoff))
    for (std::ptrdiff_t r = 0; r < rows; ++r) {
        const std::size_t bi = static_cast<std::size_t>(r) / static_cast<std::size_t>(dm.m);
        const std::size_t i = static_cast<std::size_t>(r) % static_cast<std::size_t>(dm.m);
        const T* arow = pa + bi * a_stride + i * static_cast<std::size_t>(dm.k);
        const T* bmat = pb + bi * b_stride;
        T* yrow = py + bi * y_stride + i * static_cast<std::size_t>(dm.p);
        for (int kk = 0; kk < dm.k; ++kk) {
            const T av = arow[kk];
            const T* brow = bmat + static_cast<std::size_t>(kk) * static_cast<std::size_t>(dm.p);
            for (int j = 0; j < dm.p; ++j) yrow[j] += av * brow[j];
        }
    }

    bool rec = wants_tape<T>({&a, &b});
    mark_output(y, rec);
    if (rec) {
        auto sa = a.storage(), sb = b.storage(), sy = y.storage();
        TapeT<T>::current()->record([sa, sb, sy, dm, a_stride, b_stride, y_stride]() {
            if (sy->grad.empty()) return;
            const T* g = sy->grad.data();
            // dL/da = g . b^T
            if (sa->requires_grad) {
                if (sa->grad.empty()) sa->grad.assign(sa->data.size(), T(0));
                T* da = sa->grad.data();
                const T* pb = sb->data.data();
                const std::ptrdiff_t rows = static_cast<std::ptrdiff_t>(dm.batches) * dm.m;
#pragma omp parallel for if (rows * dm.k * dm.p > static_cast<std::ptrdiff_t>(kParCutoff))
                for (std::ptrdiff_t r = 0; r < rows; ++r) {
                    const std::size_t bi = static_cast<std::size_t>(r) / static_cast<std::size_t>(dm.m);
                    const std::size_t i = static_cast<std::size_t>(r) % static_cast<std::size_t>(dm.m);
                    const T* grow = g + bi * y_stride + i * static_cast<std::size_t>(dm.p);
                    const T* bmat = pb + bi * b_stride;
                    T* darow = da + bi * a_stride + i * static_cast<std::size_t>(dm.k);
                    for (int kk = 0; kk < dm.k; ++kk) {
                        const T* brow = bmat + static_cast<std::size_t>(kk) * static_cast<std::size_t>(dm.p);
                        T acc = T(0);
                        for (int j = 0; j < dm.p; ++j) acc += grow[j] * brow[j];
                        darow[kk] += acc;
                    }
                }
            }
            // dL/db = a^T . g, summed over batches when b is shared
            if (sb->requires_grad) {
                if (sb->grad.empty()) sb->grad.assign(sb->data.size(), T(0));
                T* db = sb->grad.data();
                const T* pa = sa->data.data();
                if (dm.b_shared) {
#pragma omp parallel for if (static_cast<std::ptrdiff_t>(dm.batches) * dm.m * dm.p > static_cast<std::ptrdiff_t>(kParCutoff))
                    for (std::ptrdiff_t kk = 0; kk < dm.k; ++kk) {
                        T* dbrow = db + static_cast<std::size_t>(kk) * static_cast<std::size_t>(dm.p);
                        for (std::size_t bi = 0; bi < dm.batches; ++bi) {
                            const T* abat = pa + bi * a_stride;
                            const T* gbat = g + bi * y_stride;
                            for (int i = 0; i < dm.m; ++i) {
                                const T av = abat[static_cast<std::size_t>(i) * static_cast<std::size_t>(dm.k) + static_cast<std::size_t>(kk)];
                                const T* grow = gbat + static_cast<std::size_t>(i) * static_cast<std::size_t>(dm.p);
                                for (int j = 0; j < dm.p; ++j) dbrow[j] += av * grow[j];
                            }
                        }
                    }
                } else {
                    const std::ptrdiff_t work = static_cast<std::ptrdiff_t>(dm.batches) * dm.k;
#pragma omp parallel for if (work * dm.m * dm.p > static_cast<std::ptrdiff_t>(kParCutoff))
                    for (std::ptrdiff_t r = 0; r < work; ++r) {
                        const std::size_t bi = static_cast<std::size_t>(r) / static_cast<std::size_t>(dm.k);
                        const std::size_t kk = static_cast<std::size_t>(r) % static_cast<std::size_t>(dm.k);
                        const T* abat = pa + bi * a_stride;
                        const T* gbat = g + bi * y_stride;
                        T* dbrow = db + bi * b_stride + kk * static_cast<std::size_t>(dm.p);
                        for (int i = 0; i < dm.m; ++i) {
                            const T av = abat[static_cast<std::size_t>(i) * static_cast<std::size_t>(dm.k) + kk];
                            const T* grow = gbat + static_cast<std::size_t>(i) * static_cast<std::size_t>(dm.p);
                            for (int j = 0; j < dm.p; ++j) dbrow[j] += av * grow[j];
                        }
                    }
                }
            }
        });
    }
    return y;
}

// ---------------------------------------------------------------------------
// softmax

template <typename T>
TensorT<T> softmax(const TensorT<T>& a, int axis) {
    const int r = a.rank();
    if (axis < 0 || axis >= r) throw ShapeError("softmax: axis " + std::to_string(axis) + " out of range for rank " + std::to_string(r));
    const int len = a.dim(axis);
    std::size_t inner = 1;
    for (int i = axis + 1; i < r; ++i) inner *= static_cast<std::size_t>(a.dim(i));
    std::size_t outer = 1;
    for (int i = 0; i < axis; ++i) outer *= static_cast<std::size_t>(a.dim(i));

    TensorT<T> y = TensorT<T>::zeros(a.shape());
    const T* pa = a.data().data();
    T* py = y.data().data();
    const std::ptrdiff_t slices = static_cast<std::ptrdiff_t>(outer * inner);
#pragma omp parallel for if (slices * len > static_cast<std::ptrdiff_t>(kParCutoff))
    for (std::ptrdiff_t s = 0; s < slices; ++s) {
        const std::size_t o = static_cast<std::size_t>(s) / inner;
        const std::size_t ii = static_cast<std::size_t>(s) % inner;
        const std::size_t base = o * static_cast<std::size_t>(len) * inner + ii;
        T mx = pa[base];
        for (int j = 1; j < len; ++j) mx = std::max(mx, pa[base + static_cast<std::size_t>(j) * inner]);
        T denom = T(0);
        for (int j = 0; j < len; ++j) {
            const T e = std::exp(pa[base + static_cast<std::size_t>(j) * inner] - mx);
            py[base + static_cast<std::size_t>(j) * inner] = e;
            denom += e;
        }
        const T inv = T(1) / denom;
        for (int j = 0; j < len; ++j) py[base + static_cast<std::size_t>(j) * inner] *= inv;
    }

    bool rec = wants_tape<T>({&a});
    mark_output(y, rec);
    if (rec) {
        auto sa = a.storage(), sy = y.storage();
        TapeT<T>::current()->record([sa, sy, outer, inner, len]() {
            if (sy->grad.empty() || !sa->requires_grad) return;
            if (sa->grad.empty()) sa->grad.assign(sa->data.size(), T(0));
            const T* g = sy->grad.data();
            const T* yv = sy->data.data();
            T* d = sa->grad.data();
            const std::ptrdiff_t slices = static_cast<std::ptrdiff_t>(outer * inner);
#pragma omp parallel for if (slices * len > static_cast<std::ptrdiff_t>(kParCutoff))
            for (std::ptrdiff_t s = 0; s < slices; ++s) {
                const std::size_t o = static_cast<std::size_t>(s) / inner;
                const std::size_t ii = static_cast<std::size_t>(s) % inner;
                const std::size_t base = o * static_cast<std::size_t>(len) * inner + ii;
                T dot = T(0);
                for (int j = 0; j < len; ++j) {
                    const std::size_t off = base + static_cast<std::size_t>(j) * inner;
                    dot += g[off] * yv[off];
                }
                for (int j = 0; j < len; ++j) {
                    const std::size_t off = base + static_cast<std::size_t>(j) * inner;
                    d[off] += yv[off] * (g[off] - dot);
                }
            }
        });
    }
    return y;
}

// ---------------------------------------------------------------------------
// layer norm

template <typename T>
TensorT<T> layer_norm(const TensorT<T>& x, const TensorT<T>& gamma, const TensorT<T>& beta, T eps) {
    const int r = x.rank();
    if (r < 1) throw ShapeError("layer_norm: rank 0 input");
    const int d = x.dim(r - 1);
    if (gamma.rank() != 1 || gamma.dim(0) != d || beta.rank() != 1 || beta.dim(0) != d)
        throw ShapeError("layer_norm: affine params must be [" + std::to_string(d) + "], got " +
                         shape_str(gamma.shape()) + " and " + shape_str(beta.shape()));
    if (eps < T(0)) throw ConfigError("layer_norm: eps must be >= 0");

    const std::size_t slices = x.size() / static_cast<std::size_t>(d);
    TensorT<T> y = TensorT<T>::zeros(x.shape());
    auto mean = std::make_shared<std::vector<T>>(slices);
    auto inv_std = std::make_shared<std::vector<T>>(slices);

    const T* px = x.data().data();
    const T* pg = gamma.data().data();
    const T* pbta = beta.data().data();
    T* py = y.data().data();
    const std::ptrdiff_t ns = static_cast<std::ptrdiff_t>(slices);
#pragma omp parallel for if (ns * d > static_cast<std::ptrdiff_t>(kParCutoff))
    for (std::ptrdiff_t s = 0; s < ns; ++s) {
        const T* xs = px + static_cast<std::size_t>(s) * static_cast<std::size_t>(d);
        T* ys = py + static_cast<std::size_t>(s) * static_cast<std::size_t>(d);
        T mu = T(0);
        for (int j = 0; j < d; ++j) mu += xs[j];
        mu /= static_cast<T>(d);
        T var = T(0);
        for (int j = 0; j < d; ++j) {
            const T c = xs[j] - mu;
            var += c * c;
        }
        var /= static_cast<T>(d);
        const T inv = T(1) / std::sqrt(var + eps);
        (*mean)[static_cast<std::size_t>(s)] = mu;
        (*inv_std)[static_cast<std::size_t>(s)] = inv;
        for (int j = 0; j < d; ++j) ys[j] = (xs[j] - mu) * inv * pg[j] + pbta[j];
    }

    bool rec = wants_tape<T>({&x, &gamma, &beta});
    mark_output(y, rec);
    if (rec) {
        auto sx = x.storage(), sg = gamma.storage(), sb = beta.storage(), sy = y.storage();
        TapeT<T>::current()->record([sx, sg, sb, sy, mean, inv_std, d, slices]() {
            if (sy->grad.empty()) return;
            const T* g = sy->grad.data();
            const T* px = sx->data.data();
            const T* pg = sg->data.data();
            if (sx->requires_grad) {
                if (sx->grad.empty()) sx->grad.assign(sx->data.size(), T(0));
                T* dx = sx->grad.data();
                const std::ptrdiff_t ns = static_cast<std::ptrdiff_t>(slices);
#pragma omp parallel for if (ns * d > static_cast<std::ptrdiff_t>(kParCutoff))
                for (std::ptrdiff_t s = 0; s < ns; ++s) {
                    const std::size_t base = static_cast<std::size_t>(s) * static_cast<std::size_t>(d);
                    const T mu = (*mean)[static_cast<std::size_t>(s)];
                    const T inv = (*inv_std)[static_cast<std::size_t>(s)];
                    // dxhat_j = g_j * gamma_j; dx via the usual three-term rule
                    T sum_dxhat = T(0), sum_dxhat_xhat = T(0);
                    for (int j = 0; j < d; ++j) {
                        const T xhat = (px[base + static_cast<std::size_t>(j)] - mu) * inv;
                        const T dxh = g[base + static_cast<std::size_t>(j)] * pg[j];
                        sum_dxhat += dxh;
                        sum_dxhat_xhat += dxh * xhat;
                    }
                    for (int j = 0; j < d; ++j) {
                        const T xhat = (px[base + static_cast<std::size_t>(j)] - mu) * inv;
                        const T dxh = g[base + static_cast<std::size_t>(j)] * pg[j];
                        dx[base + static_cast<std::size_t>(j)] +=
                            inv * (dxh - sum_dxhat / static_cast<T>(d) - xhat * sum_dxhat_xhat / static_cast<T>(d));
                    }
                }
            }
            if (sg->requires_grad || sb->requires_grad) {
                if (sg->requires_grad && sg->grad.empty()) sg->grad.assign(sg->data.size(), T(0));
                if (sb->requires_grad && sb->grad.empty()) sb->grad.assign(sb->data.size(), T(0));
#pragma omp parallel for if (static_cast<std::ptrdiff_t>(slices) * d > static_cast<std::ptrdiff_t>(kParCutoff))
                for (std::ptrdiff_t j = 0; j < d; ++j) {
                    T dg = T(0), db = T(0);
                    for (std::size_t s = 0; s < slices; ++s) {
                        const std::size_t off = s * static_cast<std::size_t>(d) + static_cast<std::size_t>(j);
                        const T xhat = (px[off] - (*mean)[s]) * (*inv_std)[s];
                        dg += g[off] * xhat;
                        db += g[off];
                    }
                    if (sg->requires_grad) sg->grad[static_cast<std::size_t>(j)] += dg;
                    if (sb->requires_grad) sb->grad[static_cast<std::size_t>(j)] += db;
                }
            }
        });
    }
    return y;
}

// ---------------------------------------------------------------------------
// batch norm

template <typename T>
TensorT<T> batch_norm(const TensorT<T>& x, const TensorT<T>& gamma, const TensorT<T>& beta,
                      TensorT<T>& running_mean, TensorT<T>& running_var, T momentum, T eps,
                      bool training, bool update_running) {
    const int r = x.rank();
    if (r < 2) throw ShapeError("batch_norm: input must have a channel axis, got " + shape_str(x.shape()));
    const int C = x.dim(1);
    const int N = x.dim(0);
    if (gamma.size() != static_cast<std::size_t>(C) || beta.size() != static_cast<std::size_t>(C) ||
        running_mean.size() != static_cast<std::size_t>(C) || running_var.size() != static_cast<std::size_t>(C))
        throw ShapeError("batch_norm: per-channel params must have " + std::to_string(C) + " entries");
    std::size_t spatial = 1;
    for (int i = 2; i < r; ++i) spatial *= static_cast<std::size_t>(x.dim(i));
    const std::size_t m = static_cast<std::size_t>(N) * spatial; // reduce count per channel
    if (training && m < 2)
        throw ConfigError("batch_norm: training needs at least 2 values per channel, got " + std::to_string(m));

    TensorT<T> y = TensorT<T>::zeros(x.shape());
    auto mu = std::make_shared<std::vector<T>>(static_cast<std::size_t>(C));
    auto inv_std = std::make_shared<std::vector<T>>(static_cast<std::size_t>(C));
    std::vector<T> batch_var(static_cast<std::size_t>(C));

    const T* px = x.data().data();
    const T* pg = gamma.data().data();
    const T* pb = beta.data().data();
    T* py = y.data().data();
    const std::size_t ch_stride = spatial;
    const std::size_t n_stride = static_cast<std::size_t>(C) * spatial;

    if (training) {
#pragma omp parallel for if (static_cast<std::ptrdiff_t>(m) * C > static_cast<std::ptrdiff_t>(kParCutoff))
        for (std::ptrdiff_t c = 0; c < C; ++c) {
            T acc = T(0);
            for (int n = 0; n < N; ++n) {
                const T* base = px + static_cast<std::size_t>(n) * n_stride + static_cast<std::size_t>(c) * ch_stride;
                for (std::size_t s = 0; s < spatial; ++s) acc += base[s];
            }
            const T mean_c = acc / static_cast<T>(m);
            T var_acc = T(0);
            for (int n = 0; n < N; ++n) {
                const T* base = px + static_cast<std::size_t>(n) * n_stride + static_cast<std::size_t>(c) * ch_stride;
                for (std::size_t s = 0; s < spatial; ++s) {
                    const T d = base[s] - mean_c;
                    var_acc += d * d;
                }
            }
            const T var_c = var_acc / static_cast<T>(m); // biased
            (*mu)[static_cast<std::size_t>(c)] = mean_c;
            batch_var[static_cast<std::size_t>(c)] = var_c;
            (*inv_std)[static_cast<std::size_t>(c)] = T(1) / std::sqrt(var_c + eps);
        }
        if (update_running) {
            T* rm = running_mean.data().data();
            T* rv = running_var.data().data();
            for (int c = 0; c < C; ++c) {
                rm[c] = (T(1) - momentum) * rm[c] + momentum * (*mu)[static_cast<std::size_t>(c)];
                rv[c] = (T(1) - momentum) * rv[c] + momentum * batch_var[static_cast<std::size_t>(c)];
            }
        }
    } else {
        const T* rm = running_mean.data().data();
        const T* rv = running_var.data().data();
        for (int c = 0; c < C; ++c) {
            (*mu)[static_cast<std::size_t>(c)] = rm[c];
            (*inv_std)[static_cast<std::size_t>(c)] = T(1) / std::sqrt(rv[c] + eps);
        }
    }

    const std::ptrdiff_t total = static_cast<std::ptrdiff_t>(x.size());
#pragma omp parallel for if (total > static_cast<std::ptrdiff_t>(kParCutoff))
    for (std::ptrdiff_t i = 0; i < total; ++i) {
        const std::size_t c = (static_cast<std::size_t>(i) / ch_stride) % static_cast<std::size_t>(C);
        py[i] = (px[i] - (*mu)[c]) * (*inv_std)[c] * pg[c] + pb[c];
    }

    bool rec = wants_tape<T>({&x, &gamma, &beta});
    mark_output(y, rec);
    if (rec) {
        auto sx = x.storage(), sg = gamma.storage(), sb = beta.storage(), sy = y.storage();
        TapeT<T>::current()->record([sx, sg, sb, sy, mu, inv_std, C, N, spatial, m, training, ch_stride, n_stride]() {
            if (sy->grad.empty()) return;
            const T* g = sy->grad.data();
            const T* px = sx->data.data();
            const T* pg = sg->data.data();
            const bool need_x = sx->requires_grad;
            const bool need_g = sg->requires_grad;
            const bool need_b = sb->requires_grad;
            if (need_x && sx->grad.empty()) sx->grad.assign(sx->data.size(), T(0));
            if (need_g && sg->grad.empty()) sg->grad.assign(sg->data.size(), T(0));
            if (need_b && sb->grad.empty()) sb->grad.assign(sb->data.size(), T(0));
#pragma omp parallel for if (static_cast<std::ptrdiff_t>(m) * C > static_cast<std::ptrdiff_t>(kParCutoff))
            for (std::ptrdiff_t c = 0; c < C; ++c) {
                const T mean_c = (*mu)[static_cast<std::size_t>(c)];
                const T inv = (*inv_std)[static_cast<std::size_t>(c)];
                T sum_g = T(0), sum_g_xhat = T(0);
                for (int n = 0; n < N; ++n) {
                    const std::size_t base = static_cast<std::size_t>(n) * n_stride + static_cast<std::size_t>(c) * ch_stride;
                    for (std::size_t s = 0; s < spatial; ++s) {
                        const T gv = g[base + s];
                        sum_g += gv;
                        sum_g_xhat += gv * (px[base + s] - mean_c) * inv;
                    }
                }
                if (need_g) sg->grad[static_cast<std::size_t>(c)] += sum_g_xhat;
                if (need_b) sb->grad[static_cast<std::size_t>(c)] += sum_g;
                if (need_x) {
                    T* dx = sx->grad.data();
                    const T gam = pg[c];
                    if (training) {
                        const T inv_m = T(1) / static_cast<T>(m);
                        for (int n = 0; n < N; ++n) {
                            const std::size_t base = static_cast<std::size_t>(n) * n_stride + static_cast<std::size_t>(c) * ch_stride;
                            for (std::size_t s = 0; s < spatial; ++s) {
                                const T xhat = (px[base + s] - mean_c) * inv;
                                dx[base + s] += gam * inv * (g[base + s] - sum_g * inv_m - xhat * sum_g_xhat * inv_m);
                            }
                        }
                    } else {
                        for (int n = 0; n < N; ++n) {
                            const std::size_t base = static_cast<std::size_t>(n) * n_stride + static_cast<std::size_t>(c) * ch_stride;
                            for (std::size_t s = 0; s < spatial; ++s) dx[base + s] += g[base + s] * gam * inv;
                        }
                    }
                }
            }
        });
    }
    return y;
}

// ---------------------------------------------------------------------------
// conv2d (grouped, stride 1, zero padding)

template <typename T>
TensorT<T> conv2d(const TensorT<T>& x, const TensorT<T>& w, const TensorT<T>& bias, int groups, int pad) {
    if (x.rank() != 4) throw ShapeError("conv2d: input must be [N,C,H,W], got " + shape_str(x.shape()));
    if (w.rank() != 4) throw ShapeError("conv2d: weight must be [Cout,Cin/g,kh,kw], got " + shape_str(w.shape()));
    const int N = x.dim(0), Cin = x.dim(1), H = x.dim(2), W = x.dim(3);
    const int Cout = w.dim(0), Cpg = w.dim(1), kh = w.dim(2), kw = w.dim(3);
    if (groups < 1 || Cin % groups != 0 || Cout % groups != 0)
        throw ConfigError("conv2d: channels (" + std::to_string(Cin) + " in, " + std::to_string(Cout) +
                          " out) not divisible by groups=" + std::to_string(groups));
    if (Cpg != Cin / groups)
        throw ShapeError("conv2d: weight " + shape_str(w.shape()) + " expects " + std::to_string(Cpg * groups) +
                         " input channels, input has " + std::to_string(Cin));
    const int OH = H + 2 * pad - kh + 1, OW = W + 2 * pad - kw + 1;
    if (OH < 1 || OW < 1)
        throw ShapeError("conv2d: kernel " + shape_str(w.shape()) + " larger than padded input " + shape_str(x.shape()));
    if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != Cout))
        throw ShapeError("conv2d: bias must be [" + std::to_string(Cout) + "], got " + shape_str(bias.shape()));

    TensorT<T> y = TensorT<T>::zeros({N, Cout, OH, OW});
    const T* px = x.data().data();
    const T* pw = w.data().data();
    const T* pbias = bias.defined() ? bias.data().data() : nullptr;
    T* py = y.data().data();
    const int Copg = Cout / groups;

    const std::ptrdiff_t jobs = static_cast<std::ptrdiff_t>(N) * Cout;
#pragma omp parallel for if (jobs * OH * OW * Cpg * kh * kw > static_cast<std::ptrdiff_t>(kParCutoff))
    for (std::ptrdiff_t job = 0; job < jobs; ++job) {
        const int n = static_cast<int>(job / Cout);
        const int co = static_cast<int>(job % Cout);
        const int gi = co / Copg;
        const T b0 = pbias ? pbias[co] : T(0);
        T* yplane = py + ((static_cast<std::size_t>(n) * Cout + co) * static_cast<std::size_t>(OH)) * OW;
        for (int oh = 0; oh < OH; ++oh) {
            for (int ow = 0; ow < OW; ++ow) {
                T acc = b0;
                for (int ci = 0; ci < Cpg; ++ci) {
                    const T* xplane = px + ((static_cast<std::size_t>(n) * Cin + (gi * Cpg + ci)) * static_cast<std::size_t>(H)) * W;
                    const T* wplane = pw + ((static_cast<std::size_t>(co) * Cpg + ci) * static_cast<std::size_t>(kh)) * kw;
                    for (int u = 0; u < kh; ++u) {
                        const int ih = oh + u - pad;
                        if (ih < 0 || ih >= H) continue;
                        for (int v = 0; v < kw; ++v) {
                            const int iw = ow + v - pad;
                            if (iw < 0 || iw >= W) continue;
                            acc += xplane[static_cast<std::size_t>(ih) * W + iw] * wplane[static_cast<std::size_t>(u) * kw + v];
                        }
                    }
                }
                yplane[static_cast<std::size_t>(oh) * OW + ow] = acc;
            }
        }
    }

    bool rec = wants_tape<T>({&x, &w, &bias});
    mark_output(y, rec);
    if (rec) {
        auto sx = x.storage(), sw = w.storage(), sy = y.storage();
        auto sbias = bias.defined() ? bias.storage() : nullptr;
        TapeT<T>::current()->record([sx, sw, sbias, sy, N, Cin, H, W, Cout, Cpg, kh, kw, pad, OH, OW, Copg]() {
            if (sy->grad.empty()) return;
            const T* g = sy->grad.data();
            const T* px = sx->data.data();
            const T* pw = sw->data.data();
            if (sx->requires_grad) {
                if (sx->grad.empty()) sx->grad.assign(sx->data.size(), T(0));
                T* dx = sx->grad.data();
                const std::ptrdiff_t jobs = static_cast<std::ptrdiff_t>(N) * Cin;
#pragma omp parallel for if (jobs * H * W * Copg * kh * kw > static_cast<std::ptrdiff_t>(kParCutoff))
                for (std::ptrdiff_t job = 0; job < jobs; ++job) {
                    const int n = static_cast<int>(job / Cin);
                    const int ci = static_cast<int>(job % Cin);
                    const int gi = ci / Cpg;
                    const int ci_in = ci % Cpg;
                    T* dxplane = dx + ((static_cast<std::size_t>(n) * Cin + ci) * static_cast<std::size_t>(H)) * W;
                    for (int ih = 0; ih < H; ++ih) {
                        for (int iw = 0; iw < W; ++iw) {
                            T acc = T(0);
                            for (int cog = 0; cog < Copg; ++cog) {
                                const int co = gi * Copg + cog;
                                const T* gplane = g + ((static_cast<std::size_t>(n) * Cout + co) * static_cast<std::size_t>(OH)) * OW;
                                const T* wplane = pw + ((static_cast<std::size_t>(co) * Cpg + ci_in) * static_cast<std::size_t>(kh)) * kw;
                                for (int u = 0; u < kh; ++u) {
                                    const int oh = ih + pad - u;
                                    if (oh < 0 || oh >= OH) continue;
                                    for (int v = 0; v < kw; ++v) {
                                        const int ow = iw + pad - v;
                                        if (ow < 0 || ow >= OW) continue;
                                        acc += gplane[static_cast<std::size_t>(oh) * OW + ow] * wplane[static_cast<std::size_t>(u) * kw + v];
                                    }
                                }
                            }
                            dxplane[static_cast<std::size_t>(ih) * W + iw] += acc;
                        }
                    }
                }
            }
            if (sw->requires_grad) {
                if (sw->grad.empty()) sw->grad.assign(sw->data.size(), T(0));
                T* dw = sw->grad.data();
#pragma omp parallel for if (static_cast<std::ptrdiff_t>(Cout) * Cpg * kh * kw * N * OH * OW > static_cast<std::ptrdiff_t>(kParCutoff))
                for (std::ptrdiff_t co = 0; co < Cout; ++co) {
                    const int gi = static_cast<int>(co) / Copg;
                    for (int ci = 0; ci < Cpg; ++ci) {
                        for (int u = 0; u < kh; ++u) {
                            for (int v = 0; v < kw; ++v) {
                                T acc = T(0);
                                for (int n = 0; n < N; ++n) {
                                    const T* gplane = g + ((static_cast<std::size_t>(n) * Cout + static_cast<std::size_t>(co)) * static_cast<std::size_t>(OH)) * OW;
                                    const T* xplane = px + ((static_cast<std::size_t>(n) * Cin + (gi * Cpg + ci)) * static_cast<std::size_t>(H)) * W;
                                    for (int oh = 0; oh < OH; ++oh) {
                                        const int ih = oh + u - pad;
                                        if (ih < 0 || ih >= H) continue;
                                        for (int ow = 0; ow < OW; ++ow) {
                                            const int iw = ow + v - pad;
                                            if (iw < 0 || iw >= W) continue;
                                            acc += gplane[static_cast<std::size_t>(oh) * OW + ow] * xplane[static_cast<std::size_t>(ih) * W + iw];
                                        }
                                    }
                                }
                                dw[((static_cast<std::size_t>(co) * Cpg + ci) * static_cast<std::size_t>(kh) + u) * kw + v] += acc;
                            }
                        }
                    }
                }
            }
            if (sbias && sbias->requires_grad) {
                if (sbias->grad.empty()) sbias->grad.assign(sbias->data.size(), T(0));
                T* db = sbias->grad.data();
#pragma omp parallel for if (static_cast<std::ptrdiff_t>(Cout) * N * OH * OW > static_cast<std::ptrdiff_t>(kParCutoff))
                for (std::ptrdiff_t co = 0; co < Cout; ++co) {
                    T acc = T(0);
                    for (int n = 0; n < N; ++n) {
                        const T* gplane = g + ((static_cast<std::size_t>(n) * Cout + static_cast<std::size_t>(co)) * static_cast<std::size_t>(OH)) * OW;
                        for (int i = 0; i < OH * OW; ++i) acc += gplane[i];
                    }
                    db[co] += acc;
                }
            }
        });
    }
    return y;
}

// ---------------------------------------------------------------------------
// conv3d (stride 1, zero padding, groups 1)

template <typename T>
TensorT<T> conv3d(const TensorT<T>& x, const TensorT<T>& w, const TensorT<T>& bias, int ph, int pw_, int pd) {
    if (x.rank() != 5) throw ShapeError("conv3d: input must be [N,C,H,W,D], got " + shape_str(x.shape()));
    if (w.rank() != 5) throw ShapeError("conv3d: weight must be [Cout,Cin,kh,kw,kd], got " + shape_str(w.shape()));
    const int N = x.dim(0), Cin = x.dim(1), H = x.dim(2), W = x.dim(3), D = x.dim(4);
    const int Cout = w.dim(0), kh = w.dim(2), kw = w.dim(3), kd = w.dim(4);
    if (w.dim(1) != Cin)
        throw ShapeError("conv3d: weight " + shape_str(w.shape()) + " does not match input channels " + std::to_string(Cin));
    const int OH = H + 2 * ph - kh + 1, OW = W + 2 * pw_ - kw + 1, OD = D + 2 * pd - kd + 1;
    if (OH < 1 || OW < 1 || OD < 1)
        throw ShapeError("conv3d: kernel " + shape_str(w.shape()) + " larger than padded input " + shape_str(x.shape()));
    if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != Cout))
        throw ShapeError("conv3d: bias must be [" + std::to_string(Cout) + "], got " + shape_str(bias.shape()));

    TensorT<T> y = TensorT<T>::zeros({N, Cout, OH, OW, OD});
    const T* px = x.data().data();
    const T* pw = w.data().data();
    const T* pbias = bias.defined() ? bias.data().data() : nullptr;
    T* py = y.data().data();

    const std::size_t x_ch = static_cast<std::size_t>(H) * W * D;
    const std::size_t w_ch = static_cast<std::size_t>(kh) * kw * kd;
    const std::size_t y_ch = static_cast<std::size_t>(OH) * OW * OD;

    const std::ptrdiff_t jobs = static_cast<std::ptrdiff_t>(N) * Cout;
#pragma omp parallel for if (jobs * static_cast<std::ptrdiff_t>(y_ch * w_ch) * Cin > static_cast<std::ptrdiff_t>(kParCutoff))
    for (std::ptrdiff_t job = 0; job < jobs; ++job) {
        const int n = static_cast<int>(job / Cout);
        const int co = static_cast<int>(job % Cout);
        const T b0 = pbias ? pbias[co] : T(0);
        T* yvol = py + (static_cast<std::size_t>(n) * Cout + co) * y_ch;
        for (int oh = 0; oh < OH; ++oh)
            for (int ow = 0; ow < OW; ++ow)
                for (int od = 0; od < OD; ++od) {
                    T acc = b0;
                    for (int ci = 0; ci < Cin; ++ci) {
                        const T* xvol = px + (static_cast<std::size_t>(n) * Cin + ci) * x_ch;
                        const T* wvol = pw + (static_cast<std::size_t>(co) * Cin + ci) * w_ch;
                        for (int u = 0; u < kh; ++u) {
                            const int ih = oh + u - ph;
                            if (ih < 0 || ih >= H) continue;
                            for (int v = 0; v < kw; ++v) {
                                const int iw = ow + v - pw_;
                                if (iw < 0 || iw >= W) continue;
                                for (int t = 0; t < kd; ++t) {
                                    const int id = od + t - pd;
                                    if (id < 0 || id >= D) continue;
                                    acc += xvol[(static_cast<std::size_t>(ih) * W + iw) * D + id] *
                                           wvol[(static_cast<std::size_t>(u) * kw + v) * kd + t];
                                }
                            }
                        }
                    }
                    yvol[(static_cast<std::size_t>(oh) * OW + ow) * OD + od] = acc;
                }
    }

    bool rec = wants_tape<T>({&x, &w, &bias});
    mark_output(y, rec);
    if (rec) {
        auto sx = x.storage(), sw = w.storage(), sy = y.storage();
        auto sbias = bias.defined() ? bias.storage() : nullptr;
        TapeT<T>::current()->record([sx, sw, sbias, sy, N, Cin, H, W, D, Cout, kh, kw, kd, ph, pw_, pd, OH, OW, OD, x_ch, w_ch, y_ch]() {
            if (sy->grad.empty()) return;
            const T* g = sy->grad.data();
            const T* px = sx->data.data();
            const T* pw = sw->data.data();
            if (sx->requires_grad) {
                if (sx->grad.empty()) sx->grad.assign(sx->data.size(), T(0));
                T* dx = sx->grad.data();
                const std::ptrdiff_t jobs = static_cast<std::ptrdiff_t>(N) * Cin;
#pragma omp parallel for if (jobs * static_cast<std::ptrdiff_t>(x_ch * w_ch) * Cout > static_cast<std::ptrdiff_t>(kParCutoff))
                for (std::ptrdiff_t job = 0; job < jobs; ++job) {
                    const int n = static_cast<int>(job / Cin);
                    const int ci = static_cast<int>(job % Cin);
                    T* dxvol = dx + (static_cast<std::size_t>(n) * Cin + ci) * x_ch;
                    for (int ih = 0; ih < H; ++ih)
                        for (int iw = 0; iw < W; ++iw)
                            for (int id = 0; id < D; ++id) {
                                T acc = T(0);
                                for (int co = 0; co < Cout; ++co) {
                                    const T* gvol = g + (static_cast<std::size_t>(n) * Cout + co) * y_ch;
                                    const T* wvol = pw + (static_cast<std::size_t>(co) * Cin + ci) * w_ch;
                                    for (int u = 0; u < kh; ++u) {
                                        const int oh = ih + ph - u;
                                        if (oh < 0 || oh >= OH) continue;
                                        for (int v = 0; v < kw; ++v) {
                                            const int ow = iw + pw_ - v;
                                            if (ow < 0 || ow >= OW) continue;
                                            for (int t = 0; t < kd; ++t) {
                                                const int od = id + pd - t;
                                                if (od < 0 || od >= OD) continue;
                                                acc += gvol[(static_cast<std::size_t>(oh) * OW + ow) * OD + od] *
                                                       wvol[(static_cast<std::size_t>(u) * kw + v) * kd + t];
                                            }
                                        }
                                    }
                                }
                                dxvol[(static_cast<std::size_t>(ih) * W + iw) * D + id] += acc;
                            }
                }
            }
            if (sw->requires_grad) {
                if (sw->grad.empty()) sw->grad.assign(sw->data.size(), T(0));
                T* dw = sw->grad.data();
                const std::ptrdiff_t jobs = static_cast<std::ptrdiff_t>(Cout) * Cin;
#pragma omp parallel for if (jobs * static_cast<std::ptrdiff_t>(w_ch * y_ch) > static_cast<std::ptrdiff_t>(kParCutoff))
                for (std::ptrdiff_t job = 0; job < jobs; ++job) {
                    const int co = static_cast<int>(job / Cin);
                    const int ci = static_cast<int>(job % Cin);
                    T* dwvol = dw + (static_cast<std::size_t>(co) * Cin + ci) * w_ch;
                    for (int u = 0; u < kh; ++u)
                        for (int v = 0; v < kw; ++v)
                            for (int t = 0; t < kd; ++t) {
                                T acc = T(0);
                                for (int n = 0; n < N; ++n) {
                                    const T* gvol = g + (static_cast<std::size_t>(n) * Cout + co) * y_ch;
                                    const T* xvol = px + (static_cast<std::size_t>(n) * Cin + ci) * x_ch;
                                    for (int oh = 0; oh < OH; ++oh) {
                                        const int ih = oh + u - ph;
                                        if (ih < 0 || ih >= H) continue;
                                        for (int ow = 0; ow < OW; ++ow) {
                                            const int iw = ow + v - pw_;
                                            if (iw < 0 || iw >= W) continue;
                                            for (int od = 0; od < OD; ++od) {
                                                const int id = od + t - pd;
                                                if (id < 0 || id >= D) continue;
                                                acc += gvol[(static_cast<std::size_t>(oh) * OW + ow) * OD + od] *
                                                       xvol[(static_cast<std::size_t>(ih) * W + iw) * D + id];
                                            }
                                        }
                                    }
                                }
                                dwvol[(static_cast<std::size_t>(u) * kw + v) * kd + t] += acc;
                            }
                }
            }
            if (sbias && sbias->requires_grad) {
                if (sbias->grad.empty()) sbias->grad.assign(sbias->data.size(), T(0));
                T* db = sbias->grad.data();
#pragma omp parallel for if (static_cast<std::ptrdiff_t>(Cout * N) * static_cast<std::ptrdiff_t>(y_ch) > static_cast<std::ptrdiff_t>(kParCutoff))
                for (std::ptrdiff_t co = 0; co < Cout; ++co) {
                    T acc = T(0);
                    for (int n = 0; n < N; ++n) {
                        const T* gvol = g + (static_cast<std::size_t>(n) * Cout + static_cast<std::size_t>(co)) * y_ch;
                        for (std::size_t i = 0; i < y_ch; ++i) acc += gvol[i];
                    }
                    db[co] += acc;
                }
            }
        });
    }
    return y;
}

// ---------------------------------------------------------------------------
// dropout

template <typename T>
TensorT<T> dropout(const TensorT<T>& x, T rate, bool active, Rng& rng) {
    if (rate < T(0) || rate >= T(1))
        throw ConfigError("dropout: rate must be in [0,1), got " + std::to_string(static_cast<double>(rate)));
    if (!active || rate == T(0)) return x;

    // Mask drawn serially so the stream position is independent of threading.
    auto mult = std::make_shared<std::vector<T>>(x.size());
    const T keep_scale = T(1) / (T(1) - rate);
    for (std::size_t i = 0; i < x.size(); ++i)
        (*mult)[i] = rng.next_double() < static_cast<double>(rate) ? T(0) : keep_scale;

    TensorT<T> y = TensorT<T>::zeros(x.shape());
    const T* px = x.data().data();
    T* py = y.data().data();
    const std::ptrdiff_t n = static_cast<std::ptrdiff_t>(x.size());
#pragma omp parallel for if (n > static_cast<std::ptrdiff_t>(kParCutoff))
    for (std::ptrdiff_t i = 0; i < n; ++i) py[i] = px[i] * (*mult)[static_cast<std::size_t>(i)];

    bool rec = wants_tape<T>({&x});
    mark_output(y, rec);
    if (rec) {
        auto sx = x.storage(), sy = y.storage();
        TapeT<T>::current()->record([sx, sy, mult]() {
            if (sy->grad.empty() || !sx->requires_grad) return;
            if (sx->grad.empty()) sx->grad.assign(sx->data.size(), T(0));
            const T* g = sy->grad.data();
            T* d = sx->grad.data();
            const std::ptrdiff_t m = static_cast<std::ptrdiff_t>(sy->data.size());
#pragma omp parallel for if (m > static_cast<std::ptrdiff_t>(kParCutoff))
            for (std::ptrdiff_t i = 0; i < m; ++i) d[i] += g[i] * (*mult)[static_cast<std::size_t>(i)];
        });
    }
    return y;
}

// ---------------------------------------------------------------------------
// cross entropy

template <typename T>
TensorT<T> cross_entropy_mean(const TensorT<T>& logits, const std::vector<int>& labels) {
    if (logits.rank() != 2) throw ShapeError("cross_entropy: logits must be [N,C], got " + shape_str(logits.shape()));
    const int N = logits.dim(0), C = logits.dim(1);
    if (static_cast<int>(labels.size()) != N)
        throw ShapeError("cross_entropy: " + std::to_string(labels.size()) + " labels for " + std::to_string(N) + " rows");
    for (int i = 0; i < N; ++i)
        if (labels[static_cast<std::size_t>(i)] < 0 || labels[static_cast<std::size_t>(i)] >= C)
            throw DataError("cross_entropy: label " + std::to_string(labels[static_cast<std::size_t>(i)]) +
                            " out of range [0," + std::to_string(C) + ") at row " + std::to_string(i));

    auto probs = std::make_shared<std::vector<T>>(logits.size());
    const T* pz = logits.data().data();
    std::vector<T> row_loss(static_cast<std::size_t>(N));
#pragma omp parallel for if (static_cast<std::ptrdiff_t>(N) * C > static_cast<std::ptrdiff_t>(kParCutoff))
    for (std::ptrdiff_t i = 0; i < N; ++i) {
        const T* z = pz + static_cast<std::size_t>(i) * C;
        T* p = probs->data() + static_cast<std::size_t>(i) * C;
        T mx = z[0];
        for (int c = 1; c < C; ++c) mx = std::max(mx, z[c]);
        T denom = T(0);
        for (int c = 0; c < C; ++c) {
            p[c] = std::exp(z[c] - mx);
            denom += p[c];
        }
        for (int c = 0; c < C; ++c) p[c] /= denom;
        const int lab = labels[static_cast<std::size_t>(i)];
        row_loss[static_cast<std::size_t>(i)] = std::log(denom) - (z[lab] - mx);
    }
    T total = T(0);
    for (int i = 0; i < N; ++i) total += row_loss[static_cast<std::size_t>(i)];
    TensorT<T> y = TensorT<T>::from_data({1}, {total / static_cast<T>(N)});

    bool rec = wants_tape<T>({&logits});
    mark_output(y, rec);
    if (rec) {
        auto sz = logits.storage(), sy = y.storage();
        auto labs = std::make_shared<std::vector<int>>(labels);
        TapeT<T>::current()->record([sz, sy, probs, labs, N, C]() {
            if (sy->grad.empty() || !sz->requires_grad) return;
            if (sz->grad.empty()) sz->grad.assign(sz->data.size(), T(0));
            const T g = sy->grad[0] / static_cast<T>(N);
            T* d = sz->grad.data();
#pragma omp parallel for if (static_cast<std::ptrdiff_t>(N) * C > static_cast<std::ptrdiff_t>(kParCutoff))
            for (std::ptrdiff_t i = 0; i < N; ++i) {
                const T* p = probs->data() + static_cast<std::size_t>(i) * C;
                T* drow = d + static_cast<std::size_t>(i) * C;
                const int lab = (*labs)[static_cast<std::size_t>(i)];
                for (int c = 0; c < C; ++c) drow[c] += g * (p[c] - (c == lab ? T(1) : T(0)));
            }
        });
    }
    return y;
}

// ---------------------------------------------------------------------------
// explicit instantiations: float for training, double for the verifier

#define MFT_INSTANTIATE_OPS(T)                                                                              \
    template TensorT<T> add<T>(const TensorT<T>&, const TensorT<T>&);                                      \
    template TensorT<T> mul<T>(const TensorT<T>&, const TensorT<T>&);                                      \
    template TensorT<T> scale<T>(const TensorT<T>&, T);                                                    \
    template TensorT<T> relu<T>(const TensorT<T>&);                                                        \
    template TensorT<T> gelu<T>(const TensorT<T>&);                                                        \
    template TensorT<T> reshape<T>(const TensorT<T>&, std::vector<int>);                                   \
    template TensorT<T> permute<T>(const TensorT<T>&, const std::vector<int>&);                            \
    template TensorT<T> broadcast_to<T>(const TensorT<T>&, const std::vector<int>&);                       \
    template TensorT<T> concat<T>(const std::vector<TensorT<T>>&, int);                                    \
    template TensorT<T> slice<T>(const TensorT<T>&, int, int, int);                                        \
    template TensorT<T> sum<T>(const TensorT<T>&);                                                         \
    template TensorT<T> matmul<T>(const TensorT<T>&, const TensorT<T>&);                                   \
    template TensorT<T> softmax<T>(const TensorT<T>&, int);                                                \
    template TensorT<T> layer_norm<T>(const TensorT<T>&, const TensorT<T>&, const TensorT<T>&, T);         \
    template TensorT<T> batch_norm<T>(const TensorT<T>&, const TensorT<T>&, const TensorT<T>&,             \
                                      TensorT<T>&, TensorT<T>&, T, T, bool, bool);                         \
    template TensorT<T> conv2d<T>(const TensorT<T>&, const TensorT<T>&, const TensorT<T>&, int, int);      \
    template TensorT<T> conv3d<T>(const TensorT<T>&, const TensorT<T>&, const TensorT<T>&, int, int, int); \
    template TensorT<T> dropout<T>(const TensorT<T>&, T, bool, Rng&);                                      \
    template TensorT<T> cross_entropy_mean<T>(const TensorT<T>&, const std::vector<int>&);

MFT_INSTANTIATE_OPS(float)
MFT_INSTANTIATE_OPS(double)

#undef MFT_INSTANTIATE_OPS

} // namespace mft
