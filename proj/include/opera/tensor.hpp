#pragma once

#include <Eigen/Core>
#include <cstdint>
#include <initializer_list>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "opera/common.hpp"

namespace opera::ad {

using Shape = std::vector<int64_t>;

inline int64_t shape_numel(const Shape& s) {
    int64_t n = 1;
    for (int64_t d : s) n *= d;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::ostringstream ss;
    ss << "[";
    for (size_t i = 0; i < s.size(); ++i) ss << (i ? "," : "") << s[i];
    ss << "]";
    return ss.str();
}

// Dense n-dimensional value, row-major flat storage.
template <typename T>
struct Array {
    Shape dims;
    std::vector<T> v;

    Array() = default;
    Array(Shape d, std::vector<T> data) : dims(std::move(d)), v(std::move(data)) {
        if (shape_numel(dims) != static_cast<int64_t>(v.size()))
            throw ShapeError("Array: data length " + std::to_string(v.size()) +
                             " does not match shape " + shape_str(dims));
    }

    static Array zeros(Shape d) {
        const int64_t n = shape_numel(d);
        return Array(std::move(d), std::vector<T>(static_cast<size_t>(n), T(0)));
    }
    static Array full(Shape d, T value) {
        const int64_t n = shape_numel(d);
        return Array(std::move(d), std::vector<T>(static_cast<size_t>(n), value));
    }
    static Array scalar(T value) { return Array({}, {value}); }

    int64_t numel() const { return static_cast<int64_t>(v.size()); }
    int ndim() const { return static_cast<int>(dims.size()); }
    bool is_scalar() const { return dims.empty(); }

    T* data() { return v.data(); }
    const T* data() const { return v.data(); }

    template <typename U>
    Array<U> cast() const {
        std::vector<U> out(v.size());
        for (size_t i = 0; i < v.size(); ++i) out[i] = static_cast<U>(v[i]);
        return Array<U>(dims, std::move(out));
    }
};

inline Shape row_strides(const Shape& dims) {
    Shape st(dims.size());
    int64_t acc = 1;
    for (int i = static_cast<int>(dims.size()) - 1; i >= 0; --i) {
        st[static_cast<size_t>(i)] = acc;
        acc *= dims[static_cast<size_t>(i)];
    }
    return st;
}

// numpy-style right-aligned broadcast shape; throws ShapeError on conflict
inline Shape broadcast_shape(const Shape& a, const Shape& b) {
    const size_t n = std::max(a.size(), b.size());
    Shape out(n);
    for (size_t i = 0; i < n; ++i) {
        const int64_t da = i < n - a.size() ? 1 : a[i - (n - a.size())];
        const int64_t db = i < n - b.size() ? 1 : b[i - (n - b.size())];
        if (da != db && da != 1 && db != 1)
            throw ShapeError("broadcast mismatch: " + shape_str(a) + " vs " + shape_str(b));
        out[i] = std::max(da, db);
    }
    return out;
}

// strides of `src` viewed in the broadcast frame `out` (0 on broadcast axes)
inline Shape broadcast_strides(const Shape& src, const Shape& out) {
    const Shape st = row_strides(src);
    Shape r(out.size(), 0);
    const size_t off = out.size() - src.size();
    for (size_t i = 0; i < src.size(); ++i)
        r[off + i] = (src[i] == 1 && out[off + i] != 1) ? 0 : st[i];
    return r;
}

// Elementwise binary op with broadcasting.
template <typename T, typename F>
Array<T> broadcast_binary(const Array<T>& a, const Array<T>& b, F&& f) {
    const Shape os = broadcast_shape(a.dims, b.dims);
    const int64_t n = shape_numel(os);
    Array<T> out = Array<T>::zeros(os);
    if (a.dims == b.dims) {  // fast path
        for (int64_t i = 0; i < n; ++i) out.v[i] = f(a.v[i], b.v[i]);
        return out;
    }
    const Shape sa = broadcast_strides(a.dims, os);
    const Shape sb = broadcast_strides(b.dims, os);
    const int nd = static_cast<int>(os.size());
    std::vector<int64_t> idx(static_cast<size_t>(nd), 0);
    int64_t ia = 0, ib = 0;
    for (int64_t i = 0; i < n; ++i) {
        out.v[static_cast<size_t>(i)] = f(a.v[static_cast<size_t>(ia)], b.v[static_cast<size_t>(ib)]);
        for (int d = nd - 1; d >= 0; --d) {
            idx[static_cast<size_t>(d)]++;
            ia += sa[static_cast<size_t>(d)];
            ib += sb[static_cast<size_t>(d)];
            if (idx[static_cast<size_t>(d)] < os[static_cast<size_t>(d)]) break;
            idx[static_cast<size_t>(d)] = 0;
            ia -= sa[static_cast<size_t>(d)] * os[static_cast<size_t>(d)];
            ib -= sb[static_cast<size_t>(d)] * os[static_cast<size_t>(d)];
        }
    }
    return out;
}

// Reduce `g` (shaped like `out`) back to `src`'s shape by summing broadcast axes.
template <typename T>
Array<T> reduce_to_shape(const Array<T>& g, const Shape& src) {
    if (g.dims == src) return g;
    Array<T> out = Array<T>::zeros(src);
    const Shape ss = broadcast_strides(src, g.dims);
    const int nd = g.ndim();
    std::vector<int64_t> idx(static_cast<size_t>(nd), 0);
    int64_t is = 0;
    const int64_t n = g.numel();
    for (int64_t i = 0; i < n; ++i) {
        out.v[static_cast<size_t>(is)] += g.v[static_cast<size_t>(i)];
        for (int d = nd - 1; d >= 0; --d) {
            idx[static_cast<size_t>(d)]++;
            is += ss[static_cast<size_t>(d)];
            if (idx[static_cast<size_t>(d)] < g.dims[static_cast<size_t>(d)]) break;
            idx[static_cast<size_t>(d)] = 0;
            is -= ss[static_cast<size_t>(d)] * g.dims[static_cast<size_t>(d)];
        }
    }
    return out;
}

template <typename T>
using EigenRowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

// C[m,n] (+)= A[m,k] * B[k,n], optionally transposing either input view
template <typename T>
void gemm(const T* a, const T* b, T* c, int64_t m, int64_t k, int64_t n,
          bool trans_a = false, bool trans_b = false, bool accumulate = false) {
    using Mat = EigenRowMat<T>;
    Eigen::Map<const Mat> A(a, trans_a ? k : m, trans_a ? m : k);
    Eigen::Map<const Mat> B(b, trans_b ? n : k, trans_b ? k : n);
    Eigen::Map<Mat> C(c, m, n);
    if (!trans_a && !trans_b) {
        if (accumulate) C.noalias() += A * B; else C.noalias() = A * B;
    } else if (trans_a && !trans_b) {
        if (accumulate) C.noalias() += A.transpose() * B; else C.noalias() = A.transpose() * B;
    } else if (!trans_a && trans_b) {
        if (accumulate) C.noalias() += A * B.transpose(); else C.noalias() = A * B.transpose();
    } else {
        if (accumulate) C.noalias() += A.transpose() * B.transpose();
        else C.noalias() = A.transpose() * B.transpose();
    }
}

}  // namespace opera::ad
