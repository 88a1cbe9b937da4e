#pragma once

#include <cstddef>
#include <initializer_list>
#include <optional>
#include <span>
#include <string_view>
#include <vector>

namespace s2ft {

enum class Axis { Rows, Cols };

const char* axis_name(Axis axis);
Axis parse_axis(const std::string_view& name);

/// Dense row-major matrix of doubles.
///
/// Shapes may be empty (0 x n) so that "nothing selected" has a value; every
/// constructor that takes external data checks the length and finiteness.
class Matrix {
public:
    Matrix() = default;
    Matrix(std::size_t rows, std::size_t cols, double fill = 0.0);
    Matrix(std::size_t rows, std::size_t cols, std::vector<double> elements);

    static Matrix identity(std::size_t n);
    static Matrix diagonal(std::span<const double> values);
    static Matrix from_rows(std::initializer_list<std::initializer_list<double>> rows);
    static Matrix column(std::span<const double> values);

    std::size_t rows() const noexcept { return rows_; }
    std::size_t cols() const noexcept { return cols_; }
    std::size_t size() const noexcept { return data_.size(); }
    bool empty() const noexcept { return data_.empty(); }

    double& operator()(std::size_t i, std::size_t j) noexcept { return data_[i * cols_ + j]; }
    double operator()(std::size_t i, std::size_t j) const noexcept { return data_[i * cols_ + j]; }

    std::span<double> row(std::size_t i) noexcept { return {data_.data() + i * cols_, cols_}; }
    std::span<const double> row(std::size_t i) const noexcept { return {data_.data() + i * cols_, cols_}; }

    std::span<double> elements() noexcept { return data_; }
    std::span<const double> elements() const noexcept { return data_; }

    /// Throws NumericError if any element is NaN or infinite.
    void check_finite(const char* what = "matrix") const;

    Matrix& operator+=(const Matrix& other);
    Matrix& operator-=(const Matrix& other);
    Matrix& operator*=(double scale);

private:
    std::size_t rows_ = 0;
    std::size_t cols_ = 0;
    std::vector<double> data_;
};

Matrix operator+(Matrix a, const Matrix& b);
Matrix operator-(Matrix a, const Matrix& b);
Matrix operator*(double scale, Matrix a);

/// Product a*b. Each output element accumulates k = 0..K-1 left to right,
/// starting from +0.0, so results are bit-reproducible.
Matrix matmul(const Matrix& a, const Matrix& b);
/// aᵀ*b without materializing the transpose (same accumulation order as matmul(transpose(a), b)).
Matrix matmul_tn(const Matrix& a, const Matrix& b);
/// a*bᵀ without materializing the transpose.
Matrix matmul_nt(const Matrix& a, const Matrix& b);

Matrix transpose(const Matrix& a);
Matrix hadamard(const Matrix& a, const Matrix& b);
std::vector<double> matvec(const Matrix& a, std::span<const double> x);

double frobenius_norm(const Matrix& a);
double squared_norm(const Matrix& a);
double max_abs(const Matrix& a);
double max_abs_diff(const Matrix& a, const Matrix& b);
double trace(const Matrix& a);
/// ‖a − b‖_F / max(‖b‖_F, tiny).
double relative_error(const Matrix& a, const Matrix& b);
/// Bitwise comparison of shapes and element representations.
bool bit_equal(const Matrix& a, const Matrix& b);

Matrix slice_rows(const Matrix& a, std::size_t begin, std::size_t end);
Matrix slice_cols(const Matrix& a, std::size_t begin, std::size_t end);
Matrix gather_rows(const Matrix& a, std::span<const std::size_t> indices);
Matrix gather_cols(const Matrix& a, std::span<const std::size_t> indices);
void assign_rows(Matrix& dst, std::size_t begin, const Matrix& src);
void assign_cols(Matrix& dst, std::size_t begin, const Matrix& src);

struct SvdResult {
    Matrix left;                  ///< m x k, orthonormal columns
    std::vector<double> singular; ///< k values, non-increasing
    Matrix right_t;               ///< k x n, orthonormal rows
};

/// Sweep limit for the one-sided Jacobi iteration.
inline constexpr int kSvdMaxSweeps = 80;

/// Thin SVD with k = min(m, n) by one-sided (Hestenes) Jacobi with cyclic
/// sweeps. A pair is rotated while |a_p·a_q| > 1e-14·‖a_p‖‖a_q‖; throws
/// NumericError if a sweep still rotates after kSvdMaxSweeps sweeps.
SvdResult svd(const Matrix& a);

/// Best rank-r approximation Φ_r Λ_r Ψ_rᵀ. Requires 1 <= r <= min(m, n).
Matrix truncated_svd(const Matrix& a, std::size_t r);

/// max(m, n) · σ_max · 2⁻⁵².
double default_pinv_tolerance(std::size_t rows, std::size_t cols, double sigma_max);

/// Moore–Penrose inverse; singular values <= tol are treated as zero.
/// Without tol the default_pinv_tolerance is used.
Matrix pinv(const Matrix& a, std::optional<double> tol = std::nullopt);

/// Number of singular values above tol (default_pinv_tolerance if unset).
std::size_t numerical_rank(const Matrix& a, std::optional<double> tol = std::nullopt);

/// Orthonormal basis of the column space (left singular vectors with σ > tol).
Matrix range_basis(const Matrix& a, std::optional<double> tol = std::nullopt);

struct SymmetricEigen {
    std::vector<double> values;  ///< descending
    Matrix vectors;              ///< column j pairs with values[j]
};

/// Cyclic two-sided Jacobi eigensolver for symmetric input.
SymmetricEigen symmetric_eigen(const Matrix& a);

/// Symmetric PSD square root. Eigenvalues in [-1e-10·scale, 0) are clamped to
/// zero; anything more negative throws ArgumentError.
Matrix psd_sqrt(const Matrix& a);

/// A permutation of 0..n-1 together with its inverse.
class IndexPermutation {
public:
    IndexPermutation() = default;
    /// Validates that order is a permutation; throws ArgumentError otherwise.
    explicit IndexPermutation(std::vector<std::size_t> order);

    static IndexPermutation identity(std::size_t n);

    std::size_t size() const noexcept { return order_.size(); }
    const std::vector<std::size_t>& order() const noexcept { return order_; }
    const std::vector<std::size_t>& inverse() const noexcept { return inverse_; }
    bool is_identity() const noexcept;

    IndexPermutation inverted() const;
    /// Lift a permutation of blocks to a permutation of elements, each block
    /// being `granule` consecutive indices.
    IndexPermutation expand(std::size_t granule) const;

    friend bool operator==(const IndexPermutation&, const IndexPermutation&) = default;

private:
    std::vector<std::size_t> order_;
    std::vector<std::size_t> inverse_;
};

/// output[i] = input[p.order()[i]] along the chosen axis.
Matrix permute_axis(const Matrix& a, const IndexPermutation& p, Axis axis);

}  // namespace s2ft
