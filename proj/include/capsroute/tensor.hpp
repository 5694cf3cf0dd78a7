#pragma once

#include <cmath>
#include <cstddef>
#include <initializer_list>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "capsroute/errors.hpp"

namespace capsroute {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& s) {
    std::size_t n = 1;
    for (const std::size_t e : s) n *= e;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << '[';
    for (std::size_t k = 0; k < s.size(); ++k) os << (k ? "x" : "") << s[k];
    os << ']';
    return os.str();
}

/// Dense row-major tensor of 64-bit floats. Immutable by convention once it
/// leaves a constructor/factory; operations return fresh tensors.
class Tensor {
public:
    Tensor() = default;

    Tensor(Shape shape, std::vector<double> data)
        : shape_(std::move(shape)), data_(std::move(data)) {
        if (shape_numel(shape_) != data_.size()) {
            throw ShapeError("tensor: shape " + shape_str(shape_) + " wants " +
                             std::to_string(shape_numel(shape_)) + " values, got " +
                             std::to_string(data_.size()));
        }
        check_extents();
        for (const double v : data_) {
            if (!std::isfinite(v)) throw ValueError("tensor: non-finite value in input data");
        }
    }

    static Tensor zeros(Shape shape) {
        Tensor t;
        t.shape_ = std::move(shape);
        t.check_extents();
        t.data_.assign(shape_numel(t.shape_), 0.0);
        return t;
    }

    static Tensor full(Shape shape, double value) {
        Tensor t = zeros(std::move(shape));
        for (double& v : t.data_) v = value;
        return t;
    }

    static Tensor scalar(double value) { return Tensor({1}, {value}); }

    static Tensor identity(std::size_t n) {
        Tensor t = zeros({n, n});
        for (std::size_t i = 0; i < n; ++i) t.data_[i * n + i] = 1.0;
        return t;
    }

    // Trusted factory: skips the finite scan. Internal math paths use it so the
    // finiteness invariant is enforced at construction-from-outside boundaries
    // and checked explicitly where divergence is possible.
    static Tensor uninitialized(Shape shape) {
        Tensor t;
        t.shape_ = std::move(shape);
        t.check_extents();
        t.data_.resize(shape_numel(t.shape_));
        return t;
    }

    const Shape& shape() const { return shape_; }
    std::size_t rank() const { return shape_.size(); }
    std::size_t extent(std::size_t axis) const { return shape_.at(axis); }
    std::size_t size() const { return data_.size(); }

    double* data() { return data_.data(); }
    const double* data() const { return data_.data(); }
    double operator[](std::size_t i) const { return data_[i]; }
    double& operator[](std::size_t i) { return data_[i]; }

    double scalar_value() const {
        if (data_.size() != 1) {
            throw ContractError("scalar_value: tensor has " + std::to_string(data_.size()) +
                                " elements, expected 1");
        }
        return data_[0];
    }

    bool all_finite() const {
        for (const double v : data_) {
            if (!std::isfinite(v)) return false;
        }
        return true;
    }

    bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }

    Tensor reshaped(Shape new_shape) const {
        if (shape_numel(new_shape) != data_.size()) {
            throw ShapeError("reshape: cannot view " + shape_str(shape_) + " as " +
                             shape_str(new_shape));
        }
        Tensor t;
        t.shape_ = std::move(new_shape);
        t.data_ = data_;
        return t;
    }

private:
    void check_extents() const {
        for (const std::size_t e : shape_) {
            if (e == 0) throw ShapeError("tensor: zero extent in shape " + shape_str(shape_));
        }
    }

    Shape shape_;
    std::vector<double> data_;
};

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (!a.same_shape(b)) {
        throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                         " vs " + shape_str(b.shape()));
    }
}

// ---- elementwise helpers ----------------------------------------------------

inline Tensor add(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "add");
    Tensor out = Tensor::uninitialized(a.shape());
    for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i] + b[i];
    return out;
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "sub");
    Tensor out = Tensor::uninitialized(a.shape());
    for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i] - b[i];
    return out;
}

inline Tensor hadamard(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "hadamard");
    Tensor out = Tensor::uninitialized(a.shape());
    for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i] * b[i];
    return out;
}

inline Tensor scale(const Tensor& a, double k) {
    Tensor out = Tensor::uninitialized(a.shape());
    for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i] * k;
    return out;
}

inline Tensor neg(const Tensor& a) { return scale(a, -1.0); }

// ---- core numeric operations ------------------------------------------------

/// Standard matrix product of a [m x k] and b [k x n].
inline Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.rank() != 2 || b.rank() != 2 || a.extent(1) != b.extent(0)) {
        throw ShapeError("matmul: incompatible shapes " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
    }
    const std::size_t m = a.extent(0), k = a.extent(1), n = b.extent(1);
    Tensor out = Tensor::zeros({m, n});
    const double* ap = a.data();
    const double* bp = b.data();
    double* op = out.data();
    for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t t = 0; t < k; ++t) {
            const double av = ap[i * k + t];
            if (av == 0.0) continue;
            const double* brow = bp + t * n;
            double* orow = op + i * n;
            for (std::size_t j = 0; j < n; ++j) orow[j] += av * brow[j];
        }
    }
    return out;
}

/// Softmax along `axis`, max-subtracted for stability. Every slice along the
/// axis sums to 1 and entries lie in (0, 1].
inline Tensor softmax(const Tensor& x, std::size_t axis) {
    if (axis >= x.rank()) {
        throw ContractError("softmax: axis " + std::to_string(axis) + " out of range for rank " +
                            std::to_string(x.rank()));
    }
    const std::size_t len = x.extent(axis);
    std::size_t inner = 1, outer = 1;
    for (std::size_t k = axis + 1; k < x.rank(); ++k) inner *= x.extent(k);
    for (std::size_t k = 0; k < axis; ++k) outer *= x.extent(k);

    Tensor out = Tensor::uninitialized(x.shape());
    const double* xp = x.data();
    double* op = out.data();
    for (std::size_t o = 0; o < outer; ++o) {
        for (std::size_t in = 0; in < inner; ++in) {
            const std::size_t base = o * len * inner + in;
            double mx = xp[base];
            for (std::size_t j = 1; j < len; ++j) mx = std::max(mx, xp[base + j * inner]);
            double sum = 0.0;
            for (std::size_t j = 0; j < len; ++j) {
                const double e = std::exp(xp[base + j * inner] - mx);
                op[base + j * inner] = e;
                sum += e;
            }
            for (std::size_t j = 0; j < len; ++j) op[base + j * inner] /= sum;
        }
    }
    return out;
}

/// Euclidean norm of the whole tensor. Exactly even: l2_norm(-x) == l2_norm(x).
inline double l2_norm(const Tensor& x) {
    double sq = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) sq += x[i] * x[i];
    return std::sqrt(sq);
}

inline double max_abs(const Tensor& x) {
    double m = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) m = std::max(m, std::fabs(x[i]));
    return m;
}

inline double max_abs_diff(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "max_abs_diff");
    double m = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::fabs(a[i] - b[i]));
    return m;
}

} // namespace capsroute
