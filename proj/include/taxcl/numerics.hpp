#pragma once

// Dense row-major matrices, a cyclic-Jacobi symmetric eigensolver and a
// seeded, platform-independent random number generator. Everything here is
// 64-bit floating point.

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <initializer_list>
#include <iosfwd>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace taxcl {

class Matrix {
public:
    Matrix() = default;
    Matrix(std::size_t rows, std::size_t cols, double fill = 0.0)
        : rows_(rows), cols_(cols), data_(rows * cols, fill) {}
    Matrix(std::size_t rows, std::size_t cols, std::vector<double> data);
    Matrix(std::initializer_list<std::initializer_list<double>> init);

    static Matrix identity(std::size_t n);

    std::size_t rows() const noexcept { return rows_; }
    std::size_t cols() const noexcept { return cols_; }
    std::size_t size() const noexcept { return data_.size(); }
    bool empty() const noexcept { return data_.empty(); }

    double& operator()(std::size_t r, std::size_t c) noexcept { return data_[r * cols_ + c]; }
    double operator()(std::size_t r, std::size_t c) const noexcept { return data_[r * cols_ + c]; }

    std::span<double> row(std::size_t r) noexcept { return {data_.data() + r * cols_, cols_}; }
    std::span<const double> row(std::size_t r) const noexcept {
        return {data_.data() + r * cols_, cols_};
    }

    std::vector<double>& data() noexcept { return data_; }
    const std::vector<double>& data() const noexcept { return data_; }

    bool all_finite() const noexcept;
    double max_abs() const noexcept;
    double frobenius_norm() const noexcept;
    Matrix transposed() const;
    Matrix select_rows(std::span<const std::size_t> indices) const;

    friend bool operator==(const Matrix&, const Matrix&) = default;

private:
    std::size_t rows_ = 0;
    std::size_t cols_ = 0;
    std::vector<double> data_;
};

double dot(std::span<const double> a, std::span<const double> b) noexcept;

// A * B
Matrix matmul(const Matrix& a, const Matrix& b);
// A * B^T
Matrix matmul_bt(const Matrix& a, const Matrix& b);
// A^T * B
Matrix matmul_at(const Matrix& a, const Matrix& b);

// Pairwise dot products S[i][j] = z_i . z_j. Each pair is computed once and
// mirrored, so the result is exactly symmetric.
Matrix gram(const Matrix& z);

// d x d second-moment matrix (1/n) sum_k r_k r_k^T. With `centered` the
// column mean is removed first, giving the ordinary covariance.
Matrix covariance(const Matrix& r, bool centered = false);

struct EigenDecomposition {
    std::vector<double> eigenvalues;  // descending
    Matrix eigenvectors;              // column k pairs with eigenvalues[k]
    int sweeps = 0;
};

struct JacobiOptions {
    double symmetry_tol = 1e-10;      // relative to max |C_ij|
    double off_diagonal_tol = 1e-12;  // relative to ||C||_F
    int max_sweeps = 100;
};

EigenDecomposition sym_eig(const Matrix& c, const JacobiOptions& opts = {});

struct NormalizedRows {
    Matrix rows;
    std::vector<double> norms;
    std::vector<bool> degenerate;  // norm < 1e-12; row left as zero

    bool any_degenerate() const noexcept;
};

inline constexpr double kDegenerateNorm = 1e-12;

NormalizedRows l2_normalize_rows(const Matrix& z);

// xoshiro256** seeded through splitmix64 from (seed, stream). Gaussian
// deviates come from the Box-Muller transform; the second deviate of each
// pair is cached and returned by the following call.
class SeededRng {
public:
    struct State {
        std::array<std::uint64_t, 4> s{};
        std::uint64_t seed = 0;
        std::uint64_t stream = 0;
        bool has_spare = false;
        double spare = 0.0;

        friend bool operator==(const State&, const State&) = default;
    };

    explicit SeededRng(std::uint64_t seed = 0, std::uint64_t stream = 0);
    explicit SeededRng(const State& state) : state_(state) {}

    std::uint64_t next_u64() noexcept;
    // uniform on [0, 1) with 53 bits of resolution
    double next_uniform() noexcept;
    // uniform integer in [0, n), unbiased (rejection sampling)
    std::uint64_t next_below(std::uint64_t n);
    double next_gaussian() noexcept;

    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (std::size_t i = v.size(); i > 1; --i) {
            std::size_t j = static_cast<std::size_t>(next_below(i));
            std::swap(v[i - 1], v[j]);
        }
    }

    const State& state() const noexcept { return state_; }

private:
    State state_;
};

inline double rng_next_gaussian(SeededRng& rng) noexcept { return rng.next_gaussian(); }

// Sample k distinct values from [0, n) in random order (partial Fisher-Yates).
std::vector<std::size_t> sample_without_replacement(std::size_t n, std::size_t k, SeededRng& rng);

// --- serialization ---------------------------------------------------------

class FormatError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// CSV: one row per line, comma separated, 17 significant digits.
void write_matrix_csv(std::ostream& os, const Matrix& m);
Matrix read_matrix_csv(std::istream& is);

// Binary: "TXCL", u32 rows, u32 cols, little-endian f64 row-major.
void write_matrix_binary(std::ostream& os, const Matrix& m);
Matrix read_matrix_binary(std::istream& is);

void save_matrix_csv(const std::filesystem::path& path, const Matrix& m);
Matrix load_matrix_csv(const std::filesystem::path& path);
void save_matrix_binary(const std::filesystem::path& path, const Matrix& m);
Matrix load_matrix_binary(const std::filesystem::path& path);

// Shortest text form that parses back to the same double (17 significant digits).
std::string format_double(double v);
double parse_double(const std::string& text);

}  // namespace taxcl
