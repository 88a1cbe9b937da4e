#include "s2ft/linalg.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <sstream>
#include <string>

#include "s2ft/error.hpp"

namespace s2ft {

namespace {

std::string shape_str(const Matrix& a) {
    return std::to_string(a.rows()) + "x" + std::to_string(a.cols());
}

void require_same_shape(const Matrix& a, const Matrix& b, const char* op) {
    if (a.rows() != b.rows() || a.cols() != b.cols()) {
        throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a) + " vs " + shape_str(b));
    }
}

double dot(const double* x, const double* y, std::size_t n) {
    double s = 0.0;
    for (std::size_t i = 0; i < n; ++i) s += x[i] * y[i];
    return s;
}

// Columns stored contiguously (column j occupies cols[j*m .. j*m+m)).
struct ColumnStore {
    std::size_t m = 0;
    std::size_t n = 0;
    std::vector<double> v;
    double* col(std::size_t j) { return v.data() + j * m; }
    const double* col(std::size_t j) const { return v.data() + j * m; }
};

// Gram–Schmidt completion of an orthonormal column set: each missing column takes
// the coordinate vector with the largest residual against the columns so far.
void complete_basis(ColumnStore& q, std::vector<bool>& valid) {
    const std::size_t m = q.m;
    auto residual = [&](std::size_t c) {
        std::vector<double> e(m, 0.0);
        e[c] = 1.0;
        for (int pass = 0; pass < 2; ++pass) {
            for (std::size_t t = 0; t < q.n; ++t) {
                if (!valid[t]) continue;
                const double d = dot(q.col(t), e.data(), m);
                for (std::size_t i = 0; i < m; ++i) e[i] -= d * q.col(t)[i];
            }
        }
        return e;
    };
    for (std::size_t j = 0; j < q.n; ++j) {
        if (valid[j]) continue;
        std::vector<double> best;
        double best_norm = 0.0;
        for (std::size_t c = 0; c < m; ++c) {
            std::vector<double> e = residual(c);
            const double nrm = std::sqrt(dot(e.data(), e.data(), m));
            if (nrm > best_norm) {
                best_norm = nrm;
                best = std::move(e);
            }
        }
        // Some coordinate keeps at least 1/sqrt(m) of its length while columns are missing.
        if (best_norm < 0.5 / std::sqrt(static_cast<double>(m))) throw NumericError("svd: failed to complete orthonormal basis");
        for (std::size_t i = 0; i < m; ++i) q.col(j)[i] = best[i] / best_norm;
        valid[j] = true;
    }
}

SvdResult svd_tall(const Matrix& a) {
    const std::size_t m = a.rows();
    const std::size_t n = a.cols();
    ColumnStore w{m, n, std::vector<double>(m * n)};
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) w.col(j)[i] = a(i, j);
    ColumnStore v{n, n, std::vector<double>(n * n, 0.0)};
    for (std::size_t j = 0; j < n; ++j) v.col(j)[j] = 1.0;

    constexpr double tol = 1e-14;
    // Columns at rounding level relative to the whole matrix carry no direction; rotating
    // them against large columns never converges.
    double total = 0.0;
    for (double x : w.v) total += x * x;
    const double floor_rel = static_cast<double>(std::max(m, n)) * 0x1p-52;
    const double negligible = total * floor_rel * floor_rel;
    int sweep = 0;
    for (;; ++sweep) {
        bool rotated = false;
        for (std::size_t p = 0; p + 1 < n; ++p) {
            for (std::size_t q = p + 1; q < n; ++q) {
                double* ap = w.col(p);
                double* aq = w.col(q);
                const double alpha = dot(ap, ap, m);
                const double beta = dot(aq, aq, m);
                const double gamma = dot(ap, aq, m);
                if (alpha <= negligible || beta <= negligible) continue;
                if (std::abs(gamma) <= tol * std::sqrt(alpha * beta)) continue;
                rotated = true;
                const double zeta = (beta - alpha) / (2.0 * gamma);
                const double t = (zeta >= 0.0 ? 1.0 : -1.0) / (std::abs(zeta) + std::sqrt(1.0 + zeta * zeta));
                const double c = 1.0 / std::sqrt(1.0 + t * t);
                const double s = c * t;
                for (std::size_t i = 0; i < m; ++i) {
                    const double x = ap[i];
                    const double y = aq[i];
                    ap[i] = c * x - s * y;
                    aq[i] = s * x + c * y;
                }
                double* vp = v.col(p);
                double* vq = v.col(q);
                for (std::size_t i = 0; i < n; ++i) {
                    const double x = vp[i];
                    const double y = vq[i];
                    vp[i] = c * x - s * y;
                    vq[i] = s * x + c * y;
                }
            }
        }
        if (!rotated) break;
        if (sweep + 1 >= kSvdMaxSweeps) {
            throw NumericError("svd: no convergence after " + std::to_string(kSvdMaxSweeps) + " sweeps");
        }
    }

    std::vector<double> sigma(n);
    for (std::size_t j = 0; j < n; ++j) sigma[j] = std::sqrt(dot(w.col(j), w.col(j), m));
    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), 0);
    std::stable_sort(idx.begin(), idx.end(), [&](std::size_t x, std::size_t y) { return sigma[x] > sigma[y]; });

    const double smax = n > 0 ? sigma[idx[0]] : 0.0;
    const double tiny = smax * static_cast<double>(std::max(m, n)) * 0x1p-52;

    ColumnStore u{m, n, std::vector<double>(m * n, 0.0)};
    std::vector<bool> valid(n, false);
    SvdResult out;
    out.singular.resize(n);
    out.right_t = Matrix(n, n);
    for (std::size_t k = 0; k < n; ++k) {
        const std::size_t j = idx[k];
        out.singular[k] = sigma[j];
        for (std::size_t i = 0; i < n; ++i) out.right_t(k, i) = v.col(j)[i];
        if (sigma[j] > tiny && sigma[j] > 0.0) {
            for (std::size_t i = 0; i < m; ++i) u.col(k)[i] = w.col(j)[i] / sigma[j];
            valid[k] = true;
        }
    }
    complete_basis(u, valid);
    out.left = Matrix(m, n);
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t k = 0; k < n; ++k) out.left(i, k) = u.col(k)[i];
    return out;
}

}  // namespace

const char* axis_name(Axis axis) { return axis == Axis::Rows ? "rows" : "cols"; }

Axis parse_axis(const std::string_view& name) {
    if (name == "rows") return Axis::Rows;
    if (name == "cols") return Axis::Cols;
    throw ArgumentError("unknown axis '" + std::string(name) + "'");
}

Matrix::Matrix(std::size_t rows, std::size_t cols, double fill)
    : rows_(rows), cols_(cols), data_(rows * cols, fill) {
    if (!std::isfinite(fill)) throw NumericError("matrix fill value is not finite");
}

Matrix::Matrix(std::size_t rows, std::size_t cols, std::vector<double> elements)
    : rows_(rows), cols_(cols), data_(std::move(elements)) {
    if (data_.size() != rows * cols) {
        throw ShapeError("matrix data length " + std::to_string(data_.size()) + " does not match " +
                         std::to_string(rows) + "x" + std::to_string(cols));
    }
    check_finite();
}

Matrix Matrix::identity(std::size_t n) {
    Matrix m(n, n);
    for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
    return m;
}

Matrix Matrix::diagonal(std::span<const double> values) {
    Matrix m(values.size(), values.size());
    for (std::size_t i = 0; i < values.size(); ++i) m(i, i) = values[i];
    m.check_finite();
    return m;
}

Matrix Matrix::from_rows(std::initializer_list<std::initializer_list<double>> rows) {
    const std::size_t r = rows.size();
    const std::size_t c = r == 0 ? 0 : rows.begin()->size();
    std::vector<double> data;
    data.reserve(r * c);
    for (const auto& row : rows) {
        if (row.size() != c) throw ShapeError("from_rows: ragged rows");
        data.insert(data.end(), row.begin(), row.end());
    }
    return Matrix(r, c, std::move(data));
}

Matrix Matrix::column(std::span<const double> values) {
    return Matrix(values.size(), 1, std::vector<double>(values.begin(), values.end()));
}

void Matrix::check_finite(const char* what) const {
    for (std::size_t i = 0; i < data_.size(); ++i) {
        if (!std::isfinite(data_[i])) {
            throw NumericError(std::string(what) + ": non-finite element at (" + std::to_string(i / cols_) + "," +
                               std::to_string(i % cols_) + ")");
        }
    }
}

Matrix& Matrix::operator+=(const Matrix& other) {
    require_same_shape(*this, other, "add");
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += other.data_[i];
    return *this;
}

Matrix& Matrix::operator-=(const Matrix& other) {
    require_same_shape(*this, other, "sub");
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] -= other.data_[i];
    return *this;
}

Matrix& Matrix::operator*=(double scale) {
    for (double& x : data_) x *= scale;
    return *this;
}

Matrix operator+(Matrix a, const Matrix& b) { return a += b; }
Matrix operator-(Matrix a, const Matrix& b) { return a -= b; }
Matrix operator*(double scale, Matrix a) { return a *= scale; }

Matrix matmul(const Matrix& a, const Matrix& b) {
    if (a.cols() != b.rows()) throw ShapeError("matmul: " + shape_str(a) + " x " + shape_str(b));
    const std::size_t m = a.rows(), n = b.cols(), kk = a.cols();
    Matrix c(m, n);
    // i-k-j order: every c(i,j) still sums k = 0..K-1 in order.
    for (std::size_t i = 0; i < m; ++i) {
        double* ci = c.row(i).data();
        for (std::size_t k = 0; k < kk; ++k) {
            const double aik = a(i, k);
            const double* bk = b.row(k).data();
            for (std::size_t j = 0; j < n; ++j) ci[j] += aik * bk[j];
        }
    }
    return c;
}

Matrix matmul_tn(const Matrix& a, const Matrix& b) {
    if (a.rows() != b.rows()) throw ShapeError("matmul_tn: " + shape_str(a) + "^T x " + shape_str(b));
    const std::size_t m = a.cols(), n = b.cols(), kk = a.rows();
    Matrix c(m, n);
    for (std::size_t k = 0; k < kk; ++k) {
        const double* ak = a.row(k).data();
        const double* bk = b.row(k).data();
        for (std::size_t i = 0; i < m; ++i) {
            const double aki = ak[i];
            double* ci = c.row(i).data();
            for (std::size_t j = 0; j < n; ++j) ci[j] += aki * bk[j];
        }
    }
    return c;
}

Matrix matmul_nt(const Matrix& a, const Matrix& b) {
    if (a.cols() != b.cols()) throw ShapeError("matmul_nt: " + shape_str(a) + " x " + shape_str(b) + "^T");
    const std::size_t m = a.rows(), n = b.rows(), kk = a.cols();
    Matrix c(m, n);
    for (std::size_t i = 0; i < m; ++i) {
        const double* ai = a.row(i).data();
        for (std::size_t j = 0; j < n; ++j) c(i, j) = dot(ai, b.row(j).data(), kk);
    }
    return c;
}

Matrix transpose(const Matrix& a) {
    Matrix t(a.cols(), a.rows());
    for (std::size_t i = 0; i < a.rows(); ++i)
        for (std::size_t j = 0; j < a.cols(); ++j) t(j, i) = a(i, j);
    return t;
}

Matrix hadamard(const Matrix& a, const Matrix& b) {
    require_same_shape(a, b, "hadamard");
    Matrix c = a;
    auto ce = c.elements();
    auto be = b.elements();
    for (std::size_t i = 0; i < ce.size(); ++i) ce[i] *= be[i];
    return c;
}

std::vector<double> matvec(const Matrix& a, std::span<const double> x) {
    if (a.cols() != x.size()) throw ShapeError("matvec: " + shape_str(a) + " x vector of " + std::to_string(x.size()));
    std::vector<double> y(a.rows());
    for (std::size_t i = 0; i < a.rows(); ++i) y[i] = dot(a.row(i).data(), x.data(), x.size());
    return y;
}

double squared_norm(const Matrix& a) {
    double s = 0.0;
    for (double x : a.elements()) s += x * x;
    return s;
}

double frobenius_norm(const Matrix& a) { return std::sqrt(squared_norm(a)); }

double max_abs(const Matrix& a) {
    double m = 0.0;
    for (double x : a.elements()) m = std::max(m, std::abs(x));
    return m;
}

double max_abs_diff(const Matrix& a, const Matrix& b) {
    require_same_shape(a, b, "max_abs_diff");
    double m = 0.0;
    auto ae = a.elements();
    auto be = b.elements();
    for (std::size_t i = 0; i < ae.size(); ++i) m = std::max(m, std::abs(ae[i] - be[i]));
    return m;
}

double trace(const Matrix& a) {
    if (a.rows() != a.cols()) throw ShapeError("trace of non-square " + shape_str(a));
    double s = 0.0;
    for (std::size_t i = 0; i < a.rows(); ++i) s += a(i, i);
    return s;
}

double relative_error(const Matrix& a, const Matrix& b) {
    return frobenius_norm(a - b) / std::max(frobenius_norm(b), 1e-300);
}

bool bit_equal(const Matrix& a, const Matrix& b) {
    if (a.rows() != b.rows() || a.cols() != b.cols()) return false;
    auto ae = a.elements();
    auto be = b.elements();
    for (std::size_t i = 0; i < ae.size(); ++i) {
        if (std::bit_cast<std::uint64_t>(ae[i]) != std::bit_cast<std::uint64_t>(be[i])) return false;
    }
    return true;
}

Matrix slice_rows(const Matrix& a, std::size_t begin, std::size_t end) {
    if (begin > end || end > a.rows()) throw ShapeError("slice_rows: bad range for " + shape_str(a));
    Matrix out(end - begin, a.cols());
    for (std::size_t i = begin; i < end; ++i) std::copy(a.row(i).begin(), a.row(i).end(), out.row(i - begin).begin());
    return out;
}

Matrix slice_cols(const Matrix& a, std::size_t begin, std::size_t end) {
    if (begin > end || end > a.cols()) throw ShapeError("slice_cols: bad range for " + shape_str(a));
    Matrix out(a.rows(), end - begin);
    for (std::size_t i = 0; i < a.rows(); ++i)
        for (std::size_t j = begin; j < end; ++j) out(i, j - begin) = a(i, j);
    return out;
}

Matrix gather_rows(const Matrix& a, std::span<const std::size_t> indices) {
    Matrix out(indices.size(), a.cols());
    for (std::size_t t = 0; t < indices.size(); ++t) {
        if (indices[t] >= a.rows()) throw ShapeError("gather_rows: index out of range");
        std::copy(a.row(indices[t]).begin(), a.row(indices[t]).end(), out.row(t).begin());
    }
    return out;
}

Matrix gather_cols(const Matrix& a, std::span<const std::size_t> indices) {
    for (std::size_t j : indices)
        if (j >= a.cols()) throw ShapeError("gather_cols: index out of range");
    Matrix out(a.rows(), indices.size());
    for (std::size_t i = 0; i < a.rows(); ++i)
        for (std::size_t t = 0; t < indices.size(); ++t) out(i, t) = a(i, indices[t]);
    return out;
}

void assign_rows(Matrix& dst, std::size_t begin, const Matrix& src) {
    if (src.cols() != dst.cols() || begin + src.rows() > dst.rows()) throw ShapeError("assign_rows: shape mismatch");
    for (std::size_t i = 0; i < src.rows(); ++i) std::copy(src.row(i).begin(), src.row(i).end(), dst.row(begin + i).begin());
}

void assign_cols(Matrix& dst, std::size_t begin, const Matrix& src) {
    if (src.rows() != dst.rows() || begin + src.cols() > dst.cols()) throw ShapeError("assign_cols: shape mismatch");
    for (std::size_t i = 0; i < src.rows(); ++i)
        for (std::size_t j = 0; j < src.cols(); ++j) dst(i, begin + j) = src(i, j);
}

SvdResult svd(const Matrix& a) {
    a.check_finite("svd input");
    if (a.rows() >= a.cols()) return svd_tall(a);
    SvdResult t = svd_tall(transpose(a));
    return SvdResult{transpose(t.right_t), std::move(t.singular), transpose(t.left)};
}

Matrix truncated_svd(const Matrix& a, std::size_t r) {
    const std::size_t k = std::min(a.rows(), a.cols());
    if (r < 1 || r > k) {
        throw ArgumentError("truncated_svd: rank " + std::to_string(r) + " outside [1, " + std::to_string(k) + "]");
    }
    const SvdResult s = svd(a);
    Matrix out(a.rows(), a.cols());
    for (std::size_t t = 0; t < r; ++t) {
        const double sig = s.singular[t];
        for (std::size_t i = 0; i < a.rows(); ++i) {
            const double li = s.left(i, t) * sig;
            for (std::size_t j = 0; j < a.cols(); ++j) out(i, j) += li * s.right_t(t, j);
        }
    }
    return out;
}

double default_pinv_tolerance(std::size_t rows, std::size_t cols, double sigma_max) {
    return static_cast<double>(std::max(rows, cols)) * sigma_max * 0x1p-52;
}

Matrix pinv(const Matrix& a, std::optional<double> tol) {
    if (tol && !(*tol >= 0.0)) throw ArgumentError("pinv: tolerance must be non-negative");
    Matrix out(a.cols(), a.rows());
    if (a.empty()) return out;
    const SvdResult s = svd(a);
    const double cut = tol ? *tol : default_pinv_tolerance(a.rows(), a.cols(), s.singular.front());
    for (std::size_t t = 0; t < s.singular.size(); ++t) {
        if (!(s.singular[t] > cut)) continue;
        const double inv = 1.0 / s.singular[t];
        for (std::size_t i = 0; i < a.cols(); ++i) {
            const double ri = s.right_t(t, i) * inv;
            for (std::size_t j = 0; j < a.rows(); ++j) out(i, j) += ri * s.left(j, t);
        }
    }
    return out;
}

std::size_t numerical_rank(const Matrix& a, std::optional<double> tol) {
    if (a.empty()) return 0;
    const SvdResult s = svd(a);
    const double cut = tol ? *tol : default_pinv_tolerance(a.rows(), a.cols(), s.singular.front());
    return static_cast<std::size_t>(std::count_if(s.singular.begin(), s.singular.end(), [&](double x) { return x > cut; }));
}

Matrix range_basis(const Matrix& a, std::optional<double> tol) {
    if (a.empty()) return Matrix(a.rows(), 0);
    const SvdResult s = svd(a);
    const double cut = tol ? *tol : default_pinv_tolerance(a.rows(), a.cols(), s.singular.front());
    std::size_t r = 0;
    while (r < s.singular.size() && s.singular[r] > cut) ++r;
    return slice_cols(s.left, 0, r);
}

SymmetricEigen symmetric_eigen(const Matrix& a) {
    if (a.rows() != a.cols()) throw ShapeError("symmetric_eigen: non-square " + shape_str(a));
    a.check_finite("symmetric_eigen input");
    const std::size_t n = a.rows();
    Matrix s = a;
    // Symmetrize to absorb rounding asymmetry in products like W Σ Wᵀ.
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = i + 1; j < n; ++j) s(i, j) = s(j, i) = 0.5 * (a(i, j) + a(j, i));
    Matrix v = Matrix::identity(n);

    for (int sweep = 0;; ++sweep) {
        double off = 0.0;
        double diag = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            diag += s(i, i) * s(i, i);
            for (std::size_t j = i + 1; j < n; ++j) off += s(i, j) * s(i, j);
        }
        if (off <= 1e-30 * diag || off == 0.0) break;
        if (sweep >= kSvdMaxSweeps) {
            throw NumericError("symmetric_eigen: no convergence after " + std::to_string(kSvdMaxSweeps) + " sweeps");
        }
        for (std::size_t p = 0; p + 1 < n; ++p) {
            for (std::size_t q = p + 1; q < n; ++q) {
                const double apq = s(p, q);
                if (apq == 0.0) continue;
                const double theta = (s(q, q) - s(p, p)) / (2.0 * apq);
                const double t = (theta >= 0.0 ? 1.0 : -1.0) / (std::abs(theta) + std::sqrt(1.0 + theta * theta));
                const double c = 1.0 / std::sqrt(1.0 + t * t);
                const double sn = t * c;
                for (std::size_t k = 0; k < n; ++k) {
                    const double skp = s(k, p);
                    const double skq = s(k, q);
                    s(k, p) = c * skp - sn * skq;
                    s(k, q) = sn * skp + c * skq;
                }
                for (std::size_t k = 0; k < n; ++k) {
                    const double spk = s(p, k);
                    const double sqk = s(q, k);
                    s(p, k) = c * spk - sn * sqk;
                    s(q, k) = sn * spk + c * sqk;
                }
                for (std::size_t k = 0; k < n; ++k) {
                    const double vkp = v(k, p);
                    const double vkq = v(k, q);
                    v(k, p) = c * vkp - sn * vkq;
                    v(k, q) = sn * vkp + c * vkq;
                }
            }
        }
    }

    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), 0);
    std::stable_sort(idx.begin(), idx.end(), [&](std::size_t x, std::size_t y) { return s(x, x) > s(y, y); });
    SymmetricEigen out;
    out.values.resize(n);
    out.vectors = Matrix(n, n);
    for (std::size_t k = 0; k < n; ++k) {
        out.values[k] = s(idx[k], idx[k]);
        for (std::size_t i = 0; i < n; ++i) out.vectors(i, k) = v(i, idx[k]);
    }
    return out;
}

Matrix psd_sqrt(const Matrix& a) {
    const SymmetricEigen e = symmetric_eigen(a);
    const std::size_t n = a.rows();
    const double scale = e.values.empty() ? 0.0 : std::max(std::abs(e.values.front()), std::abs(e.values.back()));
    Matrix out(n, n);
    for (std::size_t k = 0; k < n; ++k) {
        double lam = e.values[k];
        if (lam < 0.0) {
            if (lam < -1e-10 * std::max(scale, 1.0)) {
                throw ArgumentError("psd_sqrt: matrix is not positive semidefinite (eigenvalue " + std::to_string(lam) + ")");
            }
            lam = 0.0;
        }
        const double r = std::sqrt(lam);
        if (r == 0.0) continue;
        for (std::size_t i = 0; i < n; ++i) {
            const double vi = e.vectors(i, k) * r;
            for (std::size_t j = 0; j < n; ++j) out(i, j) += vi * e.vectors(j, k);
        }
    }
    return out;
}

IndexPermutation::IndexPermutation(std::vector<std::size_t> order) : order_(std::move(order)) {
    const std::size_t n = order_.size();
    inverse_.assign(n, n);
    for (std::size_t i = 0; i < n; ++i) {
        if (order_[i] >= n || inverse_[order_[i]] != n) {
            throw ArgumentError("IndexPermutation: order is not a permutation of 0.." + std::to_string(n) + "-1");
        }
        inverse_[order_[i]] = i;
    }
}

IndexPermutation IndexPermutation::identity(std::size_t n) {
    std::vector<std::size_t> o(n);
    std::iota(o.begin(), o.end(), 0);
    return IndexPermutation(std::move(o));
}

bool IndexPermutation::is_identity() const noexcept {
    for (std::size_t i = 0; i < order_.size(); ++i)
        if (order_[i] != i) return false;
    return true;
}

IndexPermutation IndexPermutation::inverted() const { return IndexPermutation(inverse_); }

IndexPermutation IndexPermutation::expand(std::size_t granule) const {
    if (granule == 0) throw ArgumentError("IndexPermutation::expand: granule must be positive");
    std::vector<std::size_t> o;
    o.reserve(order_.size() * granule);
    for (std::size_t b : order_)
        for (std::size_t t = 0; t < granule; ++t) o.push_back(b * granule + t);
    return IndexPermutation(std::move(o));
}

Matrix permute_axis(const Matrix& a, const IndexPermutation& p, Axis axis) {
    const std::size_t len = axis == Axis::Rows ? a.rows() : a.cols();
    if (p.size() != len) {
        throw ShapeError(std::string("permute_axis: permutation of length ") + std::to_string(p.size()) + " for " +
                         axis_name(axis) + " of " + shape_str(a));
    }
    const auto& o = p.order();
    return axis == Axis::Rows ? gather_rows(a, o) : gather_cols(a, o);
}

}  // namespace s2ft
