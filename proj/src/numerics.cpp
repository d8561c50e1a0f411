#include "taxcl/numerics.hpp"

#include <algorithm>
#include <bit>
#include <charconv>
#include <cmath>
#include <cstring>
#include <fstream>
#include <istream>
#include <limits>
#include <numbers>
#include <numeric>
#include <ostream>
#include <sstream>

namespace taxcl {

Matrix::Matrix(std::size_t rows, std::size_t cols, std::vector<double> data)
    : rows_(rows), cols_(cols), data_(std::move(data)) {
    if (data_.size() != rows_ * cols_) {
        throw std::invalid_argument("Matrix: data length " + std::to_string(data_.size()) +
                                    " does not match " + std::to_string(rows_) + "x" +
                                    std::to_string(cols_));
    }
}

Matrix::Matrix(std::initializer_list<std::initializer_list<double>> init) {
    rows_ = init.size();
    cols_ = rows_ == 0 ? 0 : init.begin()->size();
    data_.reserve(rows_ * cols_);
    for (const auto& r : init) {
        if (r.size() != cols_) throw std::invalid_argument("Matrix: ragged initializer");
        data_.insert(data_.end(), r.begin(), r.end());
    }
}

Matrix Matrix::identity(std::size_t n) {
    Matrix m(n, n);
    for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
    return m;
}

bool Matrix::all_finite() const noexcept {
    return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
}

double Matrix::max_abs() const noexcept {
    double m = 0.0;
    for (double v : data_) m = std::max(m, std::abs(v));
    return m;
}

double Matrix::frobenius_norm() const noexcept {
    double s = 0.0;
    for (double v : data_) s += v * v;
    return std::sqrt(s);
}

Matrix Matrix::transposed() const {
    Matrix t(cols_, rows_);
    for (std::size_t i = 0; i < rows_; ++i)
        for (std::size_t j = 0; j < cols_; ++j) t(j, i) = (*this)(i, j);
    return t;
}

Matrix Matrix::select_rows(std::span<const std::size_t> indices) const {
    Matrix out(indices.size(), cols_);
    for (std::size_t k = 0; k < indices.size(); ++k) {
        if (indices[k] >= rows_) throw std::out_of_range("select_rows: index out of range");
        std::copy_n(row(indices[k]).begin(), cols_, out.row(k).begin());
    }
    return out;
}

double dot(std::span<const double> a, std::span<const double> b) noexcept {
    double s = 0.0;
    for (std::size_t k = 0; k < a.size(); ++k) s += a[k] * b[k];
    return s;
}

Matrix matmul(const Matrix& a, const Matrix& b) {
    if (a.cols() != b.rows()) throw std::invalid_argument("matmul: inner dimension mismatch");
    Matrix c(a.rows(), b.cols());
    for (std::size_t i = 0; i < a.rows(); ++i) {
        for (std::size_t k = 0; k < a.cols(); ++k) {
            const double aik = a(i, k);
            if (aik == 0.0) continue;
            for (std::size_t j = 0; j < b.cols(); ++j) c(i, j) += aik * b(k, j);
        }
    }
    return c;
}

Matrix matmul_bt(const Matrix& a, const Matrix& b) {
    if (a.cols() != b.cols()) throw std::invalid_argument("matmul_bt: inner dimension mismatch");
    Matrix c(a.rows(), b.rows());
    for (std::size_t i = 0; i < a.rows(); ++i)
        for (std::size_t j = 0; j < b.rows(); ++j) c(i, j) = dot(a.row(i), b.row(j));
    return c;
}

Matrix matmul_at(const Matrix& a, const Matrix& b) {
    if (a.rows() != b.rows()) throw std::invalid_argument("matmul_at: inner dimension mismatch");
    Matrix c(a.cols(), b.cols());
    for (std::size_t k = 0; k < a.rows(); ++k) {
        for (std::size_t i = 0; i < a.cols(); ++i) {
            const double aki = a(k, i);
            if (aki == 0.0) continue;
            for (std::size_t j = 0; j < b.cols(); ++j) c(i, j) += aki * b(k, j);
        }
    }
    return c;
}

Matrix gram(const Matrix& z) {
    if (z.rows() < 2) throw std::invalid_argument("gram: need at least 2 rows");
    if (!z.all_finite()) throw std::invalid_argument("gram: input contains non-finite values");
    const std::size_t m = z.rows();
    Matrix s(m, m);
    for (std::size_t i = 0; i < m; ++i) {
        s(i, i) = dot(z.row(i), z.row(i));
        for (std::size_t j = i + 1; j < m; ++j) {
            const double v = dot(z.row(i), z.row(j));
            s(i, j) = v;
            s(j, i) = v;
        }
    }
    return s;
}

Matrix covariance(const Matrix& r, bool centered) {
    const std::size_t n = r.rows();
    const std::size_t d = r.cols();
    if (n == 0) throw std::invalid_argument("covariance: no rows");

    std::vector<double> mean(d, 0.0);
    if (centered) {
        for (std::size_t k = 0; k < n; ++k)
            for (std::size_t j = 0; j < d; ++j) mean[j] += r(k, j);
        for (double& v : mean) v /= static_cast<double>(n);
    }

    Matrix c(d, d);
    std::vector<double> x(d);
    for (std::size_t k = 0; k < n; ++k) {
        for (std::size_t j = 0; j < d; ++j) x[j] = r(k, j) - mean[j];
        for (std::size_t a = 0; a < d; ++a)
            for (std::size_t b = a; b < d; ++b) c(a, b) += x[a] * x[b];
    }
    const double inv_n = 1.0 / static_cast<double>(n);
    for (std::size_t a = 0; a < d; ++a) {
        for (std::size_t b = a; b < d; ++b) {
            c(a, b) *= inv_n;
            c(b, a) = c(a, b);
        }
    }
    return c;
}

EigenDecomposition sym_eig(const Matrix& c, const JacobiOptions& opts) {
    const std::size_t n = c.rows();
    if (n != c.cols()) throw std::invalid_argument("sym_eig: matrix is not square");
    if (!c.all_finite()) throw std::invalid_argument("sym_eig: non-finite entries");

    const double scale = c.max_abs();
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = i + 1; j < n; ++j) {
            if (std::abs(c(i, j) - c(j, i)) > opts.symmetry_tol * scale) {
                throw std::invalid_argument("sym_eig: matrix is not symmetric at (" +
                                            std::to_string(i) + "," + std::to_string(j) + ")");
            }
        }
    }

    Matrix a(n, n);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j) a(i, j) = 0.5 * (c(i, j) + c(j, i));
    Matrix v = Matrix::identity(n);

    const double threshold = opts.off_diagonal_tol * a.frobenius_norm();
    auto max_off_diagonal = [&] {
        double m = 0.0;
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = i + 1; j < n; ++j) m = std::max(m, std::abs(a(i, j)));
        return m;
    };

    int sweep = 0;
    while (max_off_diagonal() > threshold) {
        if (sweep == opts.max_sweeps) {
            throw std::runtime_error("sym_eig: no convergence after " +
                                     std::to_string(opts.max_sweeps) + " sweeps");
        }
        ++sweep;
        for (std::size_t p = 0; p + 1 < n; ++p) {
            for (std::size_t q = p + 1; q < n; ++q) {
                const double apq = a(p, q);
                if (apq == 0.0) continue;
                const double theta = (a(q, q) - a(p, p)) / (2.0 * apq);
                const double t =
                    std::abs(theta) > 1e150
                        ? 0.5 / theta
                        : (theta >= 0.0 ? 1.0 : -1.0) /
                              (std::abs(theta) + std::sqrt(theta * theta + 1.0));
                const double cs = 1.0 / std::sqrt(t * t + 1.0);
                const double sn = t * cs;

                a(p, p) -= t * apq;
                a(q, q) += t * apq;
                a(p, q) = 0.0;
                a(q, p) = 0.0;
                for (std::size_t r = 0; r < n; ++r) {
                    if (r == p || r == q) continue;
                    const double arp = a(r, p);
                    const double arq = a(r, q);
                    a(r, p) = cs * arp - sn * arq;
                    a(p, r) = a(r, p);
                    a(r, q) = sn * arp + cs * arq;
                    a(q, r) = a(r, q);
                }
                for (std::size_t r = 0; r < n; ++r) {
                    const double vrp = v(r, p);
                    const double vrq = v(r, q);
                    v(r, p) = cs * vrp - sn * vrq;
                    v(r, q) = sn * vrp + cs * vrq;
                }
            }
        }
    }

    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t x, std::size_t y) { return a(x, x) > a(y, y); });

    EigenDecomposition out;
    out.sweeps = sweep;
    out.eigenvalues.resize(n);
    out.eigenvectors = Matrix(n, n);
    for (std::size_t k = 0; k < n; ++k) {
        out.eigenvalues[k] = a(order[k], order[k]);
        for (std::size_t r = 0; r < n; ++r) out.eigenvectors(r, k) = v(r, order[k]);
    }
    return out;
}

bool NormalizedRows::any_degenerate() const noexcept {
    return std::find(degenerate.begin(), degenerate.end(), true) != degenerate.end();
}

NormalizedRows l2_normalize_rows(const Matrix& z) {
    NormalizedRows out{Matrix(z.rows(), z.cols()), std::vector<double>(z.rows()),
                       std::vector<bool>(z.rows(), false)};
    for (std::size_t i = 0; i < z.rows(); ++i) {
        const double norm = std::sqrt(dot(z.row(i), z.row(i)));
        out.norms[i] = norm;
        if (norm < kDegenerateNorm) {
            out.degenerate[i] = true;
            continue;
        }
        for (std::size_t j = 0; j < z.cols(); ++j) out.rows(i, j) = z(i, j) / norm;
    }
    return out;
}

// --- SeededRng -------------------------------------------------------------

namespace {

std::uint64_t splitmix64(std::uint64_t& x) noexcept {
    std::uint64_t z = (x += 0x9E3779B97F4A7C15ULL);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
}

}  // namespace

SeededRng::SeededRng(std::uint64_t seed, std::uint64_t stream) {
    state_.seed = seed;
    state_.stream = stream;
    std::uint64_t x = seed ^ (stream * 0xD1B54A32D192ED03ULL);
    for (auto& w : state_.s) w = splitmix64(x);
}

std::uint64_t SeededRng::next_u64() noexcept {
    auto& s = state_.s;
    const std::uint64_t result = std::rotl(s[1] * 5, 7) * 9;
    const std::uint64_t t = s[1] << 17;
    s[2] ^= s[0];
    s[3] ^= s[1];
    s[1] ^= s[2];
    s[0] ^= s[3];
    s[2] ^= t;
    s[3] = std::rotl(s[3], 45);
    return result;
}

double SeededRng::next_uniform() noexcept {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
}

std::uint64_t SeededRng::next_below(std::uint64_t n) {
    if (n == 0) throw std::invalid_argument("next_below: empty range");
    const std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() -
                                std::numeric_limits<std::uint64_t>::max() % n;
    std::uint64_t x;
    do {
        x = next_u64();
    } while (x >= limit);
    return x % n;
}

double SeededRng::next_gaussian() noexcept {
    if (state_.has_spare) {
        state_.has_spare = false;
        return state_.spare;
    }
    const double u1 = 1.0 - next_uniform();  // (0, 1]
    const double u2 = next_uniform();
    const double radius = std::sqrt(-2.0 * std::log(u1));
    const double angle = 2.0 * std::numbers::pi * u2;
    state_.spare = radius * std::sin(angle);
    state_.has_spare = true;
    return radius * std::cos(angle);
}

std::vector<std::size_t> sample_without_replacement(std::size_t n, std::size_t k,
                                                    SeededRng& rng) {
    if (k > n) throw std::invalid_argument("sample_without_replacement: k > n");
    std::vector<std::size_t> pool(n);
    std::iota(pool.begin(), pool.end(), std::size_t{0});
    for (std::size_t i = 0; i < k; ++i) {
        const std::size_t j = i + static_cast<std::size_t>(rng.next_below(n - i));
        std::swap(pool[i], pool[j]);
    }
    pool.resize(k);
    return pool;
}

// --- serialization ---------------------------------------------------------

std::string format_double(double v) {
    char buf[32];
    const int len = std::snprintf(buf, sizeof buf, "%.17g", v);
    return std::string(buf, static_cast<std::size_t>(len));
}

double parse_double(const std::string& text) {
    const char* first = text.data();
    const char* last = first + text.size();
    while (first < last && (*first == ' ' || *first == '\t')) ++first;
    while (last > first && (last[-1] == ' ' || last[-1] == '\t' || last[-1] == '\r')) --last;
    if (first < last && *first == '+') ++first;
    double v = 0.0;
    auto [ptr, ec] = std::from_chars(first, last, v);
    if (ec != std::errc{} || ptr != last || first == last) {
        throw FormatError("not a number: '" + text + "'");
    }
    return v;
}

void write_matrix_csv(std::ostream& os, const Matrix& m) {
    for (std::size_t i = 0; i < m.rows(); ++i) {
        for (std::size_t j = 0; j < m.cols(); ++j) {
            if (j) os << ',';
            os << format_double(m(i, j));
        }
        os << '\n';
    }
}

Matrix read_matrix_csv(std::istream& is) {
    std::vector<double> values;
    std::size_t cols = 0;
    std::size_t rows = 0;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(is, line)) {
        ++line_no;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        std::size_t count = 0;
        std::stringstream ss(line);
        std::string cell;
        while (std::getline(ss, cell, ',')) {
            try {
                values.push_back(parse_double(cell));
            } catch (const FormatError& e) {
                throw FormatError("line " + std::to_string(line_no) + ": " + e.what());
            }
            ++count;
        }
        if (rows == 0) cols = count;
        if (count != cols) {
            throw FormatError("line " + std::to_string(line_no) + ": expected " +
                              std::to_string(cols) + " columns, got " + std::to_string(count));
        }
        ++rows;
    }
    return Matrix(rows, cols, std::move(values));
}

namespace {

constexpr char kMatrixMagic[4] = {'T', 'X', 'C', 'L'};

void put_u32(std::ostream& os, std::uint32_t v) {
    unsigned char b[4];
    for (int k = 0; k < 4; ++k) b[k] = static_cast<unsigned char>(v >> (8 * k));
    os.write(reinterpret_cast<const char*>(b), 4);
}

std::uint32_t get_u32(std::istream& is) {
    unsigned char b[4];
    if (!is.read(reinterpret_cast<char*>(b), 4)) throw FormatError("truncated matrix header");
    std::uint32_t v = 0;
    for (int k = 0; k < 4; ++k) v |= static_cast<std::uint32_t>(b[k]) << (8 * k);
    return v;
}

}  // namespace

void write_matrix_binary(std::ostream& os, const Matrix& m) {
    os.write(kMatrixMagic, 4);
    put_u32(os, static_cast<std::uint32_t>(m.rows()));
    put_u32(os, static_cast<std::uint32_t>(m.cols()));
    for (double v : m.data()) {
        const auto bits = std::bit_cast<std::uint64_t>(v);
        unsigned char b[8];
        for (int k = 0; k < 8; ++k) b[k] = static_cast<unsigned char>(bits >> (8 * k));
        os.write(reinterpret_cast<const char*>(b), 8);
    }
}

Matrix read_matrix_binary(std::istream& is) {
    char magic[4];
    if (!is.read(magic, 4) || std::memcmp(magic, kMatrixMagic, 4) != 0) {
        throw FormatError("bad matrix magic (expected TXCL)");
    }
    const std::size_t rows = get_u32(is);
    const std::size_t cols = get_u32(is);
    std::vector<double> data(rows * cols);
    for (double& v : data) {
        unsigned char b[8];
        if (!is.read(reinterpret_cast<char*>(b), 8)) throw FormatError("truncated matrix data");
        std::uint64_t bits = 0;
        for (int k = 0; k < 8; ++k) bits |= static_cast<std::uint64_t>(b[k]) << (8 * k);
        v = std::bit_cast<double>(bits);
    }
    return Matrix(rows, cols, std::move(data));
}

void save_matrix_csv(const std::filesystem::path& path, const Matrix& m) {
    std::ofstream os(path);
    if (!os) throw std::ios_base::failure("cannot open " + path.string() + " for writing");
    write_matrix_csv(os, m);
}

Matrix load_matrix_csv(const std::filesystem::path& path) {
    std::ifstream is(path);
    if (!is) throw std::ios_base::failure("cannot open " + path.string());
    return read_matrix_csv(is);
}

void save_matrix_binary(const std::filesystem::path& path, const Matrix& m) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::ios_base::failure("cannot open " + path.string() + " for writing");
    write_matrix_binary(os, m);
}

Matrix load_matrix_binary(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::ios_base::failure("cannot open " + path.string());
    return read_matrix_binary(is);
}

}  // namespace taxcl
