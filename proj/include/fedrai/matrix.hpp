#pragma once

// Minimal dense row-major matrix of doubles. The model code works with raw
// row pointers in its hot loops, so this stays deliberately small.

#include <cmath>
#include <cstddef>
#include <random>
#include <vector>

namespace fedrai {

struct Matrix {
    size_t rows = 0;
    size_t cols = 0;
    std::vector<double> data;

    Matrix() = default;
    Matrix(size_t r, size_t c) : rows(r), cols(c), data(r * c, 0.0) {}

    double& operator()(size_t r, size_t c) { return data[r * cols + c]; }
    double operator()(size_t r, size_t c) const { return data[r * cols + c]; }

    double* row(size_t r) { return data.data() + r * cols; }
    const double* row(size_t r) const { return data.data() + r * cols; }

    bool same_shape(const Matrix& o) const { return rows == o.rows && cols == o.cols; }
    void fill(double v) { std::fill(data.begin(), data.end(), v); }
    size_t size() const { return data.size(); }
};

inline Matrix randn_matrix(size_t r, size_t c, double sigma, std::mt19937_64& rng) {
    Matrix m(r, c);
    std::normal_distribution<double> dist(0.0, sigma);
    for (auto& v : m.data) {
        v = dist(rng);
    }
    return m;
}

inline double dot(const double* a, const double* b, size_t n) {
    double s = 0.0;
    for (size_t i = 0; i < n; ++i) {
        s += a[i] * b[i];
    }
    return s;
}

// y += alpha * x
inline void axpy(double alpha, const double* x, double* y, size_t n) {
    for (size_t i = 0; i < n; ++i) {
        y[i] += alpha * x[i];
    }
}

// y = W x, W is out x in, x has in entries. Rows are processed four at a
// time so the compiler can keep independent FMA chains in flight.
inline void matvec(const Matrix& w, const double* x, double* y) {
    const size_t n = w.cols;
    size_t r = 0;
    for (; r + 4 <= w.rows; r += 4) {
        const double* w0 = w.row(r);
        const double* w1 = w.row(r + 1);
        const double* w2 = w.row(r + 2);
        const double* w3 = w.row(r + 3);
        double s0 = 0.0, s1 = 0.0, s2 = 0.0, s3 = 0.0;
        for (size_t i = 0; i < n; ++i) {
            const double xi = x[i];
            s0 += w0[i] * xi;
            s1 += w1[i] * xi;
            s2 += w2[i] * xi;
            s3 += w3[i] * xi;
        }
        y[r] = s0;
        y[r + 1] = s1;
        y[r + 2] = s2;
        y[r + 3] = s3;
    }
    for (; r < w.rows; ++r) {
        y[r] = dot(w.row(r), x, n);
    }
}

// y += W^T x, x has `rows` entries, y has `cols` entries.
inline void matvec_t_add(const Matrix& w, const double* x, double* y) {
    const size_t n = w.cols;
    size_t r = 0;
    for (; r + 4 <= w.rows; r += 4) {
        const double* w0 = w.row(r);
        const double* w1 = w.row(r + 1);
        const double* w2 = w.row(r + 2);
        const double* w3 = w.row(r + 3);
        const double x0 = x[r], x1 = x[r + 1], x2 = x[r + 2], x3 = x[r + 3];
        for (size_t i = 0; i < n; ++i) {
            y[i] += x0 * w0[i] + x1 * w1[i] + x2 * w2[i] + x3 * w3[i];
        }
    }
    for (; r < w.rows; ++r) {
        axpy(x[r], w.row(r), y, n);
    }
}

// W += scale * u v^T (u: rows, v: cols)
inline void add_outer(Matrix& w, const double* u, const double* v, double scale = 1.0) {
    for (size_t r = 0; r < w.rows; ++r) {
        axpy(scale * u[r], v, w.row(r), w.cols);
    }
}

inline double max_abs_diff(const Matrix& a, const Matrix& b) {
    double m = 0.0;
    for (size_t i = 0; i < a.data.size(); ++i) {
        m = std::max(m, std::fabs(a.data[i] - b.data[i]));
    }
    return m;
}

inline bool all_finite(const Matrix& m) {
    for (double v : m.data) {
        if (!std::isfinite(v)) {
            return false;
        }
    }
    return true;
}

}  // namespace fedrai
