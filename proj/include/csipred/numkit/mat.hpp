#pragma once

#include <algorithm>
#include <cmath>
#include <complex>
#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "csipred/error.hpp"

namespace csipred::numkit {

/// Dense row-major matrix of doubles.
class Mat {
public:
    Mat() = default;

    Mat(std::size_t rows, std::size_t cols, double fill = 0.0)
        : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

    Mat(std::size_t rows, std::size_t cols, std::vector<double> data)
        : rows_(rows), cols_(cols), data_(std::move(data))
    {
        if (data_.size() != rows_ * cols_) {
            throw ShapeError("Mat: data length " + std::to_string(data_.size()) +
                             " does not match " + std::to_string(rows_) + "x" +
                             std::to_string(cols_));
        }
    }

    Mat(std::initializer_list<std::initializer_list<double>> rows)
        : rows_(rows.size()), cols_(rows.size() ? rows.begin()->size() : 0)
    {
        data_.reserve(rows_ * cols_);
        for (const auto& r : rows) {
            if (r.size() != cols_) {
                throw ShapeError("Mat: ragged initializer");
            }
            data_.insert(data_.end(), r.begin(), r.end());
        }
    }

    static Mat identity(std::size_t n)
    {
        Mat m(n, n);
        for (std::size_t i = 0; i < n; ++i) {
            m(i, i) = 1.0;
        }
        return m;
    }

    std::size_t rows() const noexcept { return rows_; }
    std::size_t cols() const noexcept { return cols_; }
    std::size_t size() const noexcept { return data_.size(); }
    bool empty() const noexcept { return data_.empty(); }

    double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
    const double& operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

    double& operator[](std::size_t i) { return data_[i]; }
    const double& operator[](std::size_t i) const { return data_[i]; }

    std::span<double> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
    std::span<const double> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }

    std::span<double> values() noexcept { return data_; }
    std::span<const double> values() const noexcept { return data_; }
    const std::vector<double>& storage() const noexcept { return data_; }

    bool same_shape(const Mat& o) const noexcept { return rows_ == o.rows_ && cols_ == o.cols_; }

    std::string shape_str() const { return std::to_string(rows_) + "x" + std::to_string(cols_); }

    bool all_finite() const noexcept
    {
        return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
    }

    friend bool operator==(const Mat&, const Mat&) = default;

private:
    std::size_t rows_ = 0;
    std::size_t cols_ = 0;
    std::vector<double> data_;
};

/// Dense row-major complex matrix.
class CMat {
public:
    using value_type = std::complex<double>;

    CMat() = default;
    CMat(std::size_t rows, std::size_t cols) : rows_(rows), cols_(cols), data_(rows * cols) {}

    std::size_t rows() const noexcept { return rows_; }
    std::size_t cols() const noexcept { return cols_; }
    std::size_t size() const noexcept { return data_.size(); }

    value_type& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
    const value_type& operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

    std::span<value_type> values() noexcept { return data_; }
    std::span<const value_type> values() const noexcept { return data_; }

    Mat real() const
    {
        Mat m(rows_, cols_);
        for (std::size_t i = 0; i < data_.size(); ++i) {
            m[i] = data_[i].real();
        }
        return m;
    }

    Mat imag() const
    {
        Mat m(rows_, cols_);
        for (std::size_t i = 0; i < data_.size(); ++i) {
            m[i] = data_[i].imag();
        }
        return m;
    }

    friend bool operator==(const CMat&, const CMat&) = default;

private:
    std::size_t rows_ = 0;
    std::size_t cols_ = 0;
    std::vector<value_type> data_;
};

/// Multiply-accumulate tally; one MAC counts as one FLOP.
struct FlopCounter {
    std::uint64_t macs = 0;
    void add(std::uint64_t n) noexcept { macs += n; }
};

inline void require_same_shape(const Mat& a, const Mat& b, const char* op)
{
    if (!a.same_shape(b)) {
        throw ShapeError(std::string(op) + ": shape mismatch " + a.shape_str() + " vs " +
                         b.shape_str());
    }
}

/// out += a * b (accumulating); out must already be a.rows x b.cols.
inline void matmul_acc(const Mat& a, const Mat& b, Mat& out)
{
    const std::size_t n = a.rows(), k = a.cols(), m = b.cols();
    for (std::size_t i = 0; i < n; ++i) {
        double* o = &out(i, 0);
        for (std::size_t p = 0; p < k; ++p) {
            const double av = a(i, p);
            if (av == 0.0) {
                continue;
            }
            const double* br = &b(p, 0);
            for (std::size_t j = 0; j < m; ++j) {
                o[j] += av * br[j];
            }
        }
    }
}

inline Mat matmul(const Mat& a, const Mat& b, FlopCounter* flops = nullptr)
{
    if (a.cols() != b.rows()) {
        throw ShapeError("matmul: lhs " + a.shape_str() + " incompatible with rhs " +
                         b.shape_str());
    }
    Mat out(a.rows(), b.cols());
    matmul_acc(a, b, out);
    if (flops) {
        flops->add(static_cast<std::uint64_t>(a.rows()) * a.cols() * b.cols());
    }
    return out;
}

/// a * b^T without materializing the transpose.
inline Mat matmul_nt(const Mat& a, const Mat& b, FlopCounter* flops = nullptr)
{
    if (a.cols() != b.cols()) {
        throw ShapeError("matmul_nt: lhs " + a.shape_str() + " incompatible with rhs^T of " +
                         b.shape_str());
    }
    const std::size_t n = a.rows(), k = a.cols(), m = b.rows();
    Mat out(n, m);
    for (std::size_t i = 0; i < n; ++i) {
        const double* ar = &a(i, 0);
        for (std::size_t j = 0; j < m; ++j) {
            const double* br = &b(j, 0);
            double s = 0.0;
            for (std::size_t p = 0; p < k; ++p) {
                s += ar[p] * br[p];
            }
            out(i, j) = s;
        }
    }
    if (flops) {
        flops->add(static_cast<std::uint64_t>(n) * k * m);
    }
    return out;
}

/// a^T * b without materializing the transpose.
inline Mat matmul_tn(const Mat& a, const Mat& b)
{
    if (a.rows() != b.rows()) {
        throw ShapeError("matmul_tn: lhs^T of " + a.shape_str() + " incompatible with rhs " +
                         b.shape_str());
    }
    const std::size_t k = a.rows(), n = a.cols(), m = b.cols();
    Mat out(n, m);
    for (std::size_t p = 0; p < k; ++p) {
        const double* ar = &a(p, 0);
        const double* br = &b(p, 0);
        for (std::size_t i = 0; i < n; ++i) {
            const double av = ar[i];
            if (av == 0.0) {
                continue;
            }
            double* o = &out(i, 0);
            for (std::size_t j = 0; j < m; ++j) {
                o[j] += av * br[j];
            }
        }
    }
    return out;
}

inline Mat transpose(const Mat& a)
{
    Mat t(a.cols(), a.rows());
    for (std::size_t i = 0; i < a.rows(); ++i) {
        for (std::size_t j = 0; j < a.cols(); ++j) {
            t(j, i) = a(i, j);
        }
    }
    return t;
}

inline Mat add(const Mat& a, const Mat& b)
{
    require_same_shape(a, b, "add");
    Mat out = a;
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] += b[i];
    }
    return out;
}

inline Mat sub(const Mat& a, const Mat& b)
{
    require_same_shape(a, b, "sub");
    Mat out = a;
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] -= b[i];
    }
    return out;
}

inline Mat scale(const Mat& a, double s)
{
    Mat out = a;
    for (double& v : out.values()) {
        v *= s;
    }
    return out;
}

/// Row-wise softmax with max-shift; each output row sums to one.
inline Mat softmax_rows(const Mat& a)
{
    if (a.empty()) {
        throw ShapeError("softmax_rows: empty input");
    }
    Mat out(a.rows(), a.cols());
    for (std::size_t i = 0; i < a.rows(); ++i) {
        auto in = a.row(i);
        auto o = out.row(i);
        const double mx = *std::max_element(in.begin(), in.end());
        double sum = 0.0;
        for (std::size_t j = 0; j < in.size(); ++j) {
            o[j] = std::exp(in[j] - mx);
            sum += o[j];
        }
        for (double& v : o) {
            v /= sum;
        }
    }
    return out;
}

/// Columns [begin, begin + count).
inline Mat slice_cols(const Mat& a, std::size_t begin, std::size_t count)
{
    if (begin + count > a.cols()) {
        throw ShapeError("slice_cols: range exceeds " + a.shape_str());
    }
    Mat out(a.rows(), count);
    for (std::size_t i = 0; i < a.rows(); ++i) {
        std::copy_n(&a(i, begin), count, &out(i, 0));
    }
    return out;
}

inline Mat slice_rows(const Mat& a, std::size_t begin, std::size_t count)
{
    if (begin + count > a.rows()) {
        throw ShapeError("slice_rows: range exceeds " + a.shape_str());
    }
    Mat out(count, a.cols());
    std::copy_n(&a(begin, 0), count * a.cols(), out.values().data());
    return out;
}

inline Mat concat_cols(std::span<const Mat> parts)
{
    if (parts.empty()) {
        return {};
    }
    std::size_t cols = 0;
    for (const auto& p : parts) {
        if (p.rows() != parts[0].rows()) {
            throw ShapeError("concat_cols: row count mismatch");
        }
        cols += p.cols();
    }
    Mat out(parts[0].rows(), cols);
    for (std::size_t i = 0; i < out.rows(); ++i) {
        std::size_t off = 0;
        for (const auto& p : parts) {
            std::copy_n(&p(i, 0), p.cols(), &out(i, off));
            off += p.cols();
        }
    }
    return out;
}

inline Mat concat_rows(std::span<const Mat> parts)
{
    if (parts.empty()) {
        return {};
    }
    std::size_t rows = 0;
    for (const auto& p : parts) {
        if (p.cols() != parts[0].cols()) {
            throw ShapeError("concat_rows: column count mismatch");
        }
        rows += p.rows();
    }
    Mat out(rows, parts[0].cols());
    std::size_t off = 0;
    for (const auto& p : parts) {
        std::copy_n(p.values().data(), p.size(), &out(off, 0));
        off += p.rows();
    }
    return out;
}

inline double sum(const Mat& a)
{
    double s = 0.0;
    for (double v : a.values()) {
        s += v;
    }
    return s;
}

inline double mean_square(const Mat& a)
{
    if (a.empty()) {
        return 0.0;
    }
    double s = 0.0;
    for (double v : a.values()) {
        s += v * v;
    }
    return s / static_cast<double>(a.size());
}

inline double max_abs_diff(const Mat& a, const Mat& b)
{
    require_same_shape(a, b, "max_abs_diff");
    double m = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        m = std::max(m, std::abs(a[i] - b[i]));
    }
    return m;
}

/// Solves a * x = b by partial-pivot LU. Throws NumericError when a is singular.
inline Mat solve(Mat a, Mat b)
{
    const std::size_t n = a.rows();
    if (a.cols() != n || b.rows() != n) {
        throw ShapeError("solve: need square lhs matching rhs rows, got " + a.shape_str() +
                         " and " + b.shape_str());
    }
    const std::size_t m = b.cols();
    double scale_ref = 0.0;
    for (double v : a.values()) {
        scale_ref = std::max(scale_ref, std::abs(v));
    }
    for (std::size_t col = 0; col < n; ++col) {
        std::size_t piv = col;
        for (std::size_t r = col + 1; r < n; ++r) {
            if (std::abs(a(r, col)) > std::abs(a(piv, col))) {
                piv = r;
            }
        }
        if (std::abs(a(piv, col)) <= 1e-14 * std::max(scale_ref, 1.0)) {
            throw NumericError("solve: singular matrix");
        }
        if (piv != col) {
            for (std::size_t j = 0; j < n; ++j) {
                std::swap(a(col, j), a(piv, j));
            }
            for (std::size_t j = 0; j < m; ++j) {
                std::swap(b(col, j), b(piv, j));
            }
        }
        for (std::size_t r = col + 1; r < n; ++r) {
            const double f = a(r, col) / a(col, col);
            if (f == 0.0) {
                continue;
            }
            for (std::size_t j = col; j < n; ++j) {
                a(r, j) -= f * a(col, j);
            }
            for (std::size_t j = 0; j < m; ++j) {
                b(r, j) -= f * b(col, j);
            }
        }
    }
    for (std::size_t ri = n; ri-- > 0;) {
        for (std::size_t j = 0; j < m; ++j) {
            double s = b(ri, j);
            for (std::size_t c = ri + 1; c < n; ++c) {
                s -= a(ri, c) * b(c, j);
            }
            b(ri, j) = s / a(ri, ri);
        }
    }
    return b;
}

}  // namespace csipred::numkit
