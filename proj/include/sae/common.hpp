#pragma once

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iterator>
#include <istream>
#include <ostream>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <type_traits>
#include <vector>

namespace sae {

enum class ErrorCode {
    io,
    bad_magic,
    truncated,
    trailing_bytes,
    non_finite,
    dimension_mismatch,
    invalid_argument,
    invalid_manifest,
    no_convergence,
};

inline std::string_view to_string(ErrorCode code) {
    switch (code) {
    case ErrorCode::io: return "io";
    case ErrorCode::bad_magic: return "bad_magic";
    case ErrorCode::truncated: return "truncated";
    case ErrorCode::trailing_bytes: return "trailing_bytes";
    case ErrorCode::non_finite: return "non_finite";
    case ErrorCode::dimension_mismatch: return "dimension_mismatch";
    case ErrorCode::invalid_argument: return "invalid_argument";
    case ErrorCode::invalid_manifest: return "invalid_manifest";
    case ErrorCode::no_convergence: return "no_convergence";
    }
    return "unknown";
}

/// All library failures are reported as sae::Error carrying a code, so callers
/// (and the CLI's exit-code mapping) can distinguish e.g. truncation from a bad magic.
class Error : public std::runtime_error {
public:
    Error(ErrorCode code, const std::string& what)
        : std::runtime_error(std::string(to_string(code)) + ": " + what), code_(code) {}

    ErrorCode code() const noexcept { return code_; }

private:
    ErrorCode code_;
};

inline void require(bool cond, ErrorCode code, const std::string& what) {
    if (!cond) throw Error(code, what);
}

/// Dense row-major matrix. Deliberately minimal: the library only needs
/// element access, row views and contiguous storage for serialization.
template <typename T>
class Matrix {
public:
    Matrix() = default;
    Matrix(std::size_t rows, std::size_t cols, T fill = T{})
        : rows_(rows), cols_(cols), data_(rows * cols, fill) {}
    Matrix(std::size_t rows, std::size_t cols, std::vector<T> data)
        : rows_(rows), cols_(cols), data_(std::move(data)) {
        require(data_.size() == rows_ * cols_, ErrorCode::dimension_mismatch,
                "matrix storage does not match rows*cols");
    }

    std::size_t rows() const noexcept { return rows_; }
    std::size_t cols() const noexcept { return cols_; }
    std::size_t size() const noexcept { return data_.size(); }
    bool empty() const noexcept { return data_.empty(); }

    T& operator()(std::size_t r, std::size_t c) noexcept { return data_[r * cols_ + c]; }
    const T& operator()(std::size_t r, std::size_t c) const noexcept { return data_[r * cols_ + c]; }

    std::span<T> row(std::size_t r) noexcept { return {data_.data() + r * cols_, cols_}; }
    std::span<const T> row(std::size_t r) const noexcept { return {data_.data() + r * cols_, cols_}; }

    std::span<T> flat() noexcept { return data_; }
    std::span<const T> flat() const noexcept { return data_; }
    std::vector<T>& storage() noexcept { return data_; }
    const std::vector<T>& storage() const noexcept { return data_; }

    Matrix transposed() const {
        Matrix out(cols_, rows_);
        for (std::size_t r = 0; r < rows_; ++r)
            for (std::size_t c = 0; c < cols_; ++c) out(c, r) = (*this)(r, c);
        return out;
    }

    friend bool operator==(const Matrix&, const Matrix&) = default;

private:
    std::size_t rows_ = 0;
    std::size_t cols_ = 0;
    std::vector<T> data_;
};

template <typename R>
bool all_finite(const R& values) {
    return std::all_of(std::begin(values), std::end(values), [](auto v) { return std::isfinite(v); });
}

template <typename A, typename B>
double dot(const A& a, const B& b) {
    double s = 0.0;
    auto ib = std::begin(b);
    for (auto ia = std::begin(a); ia != std::end(a); ++ia, ++ib)
        s += static_cast<double>(*ia) * static_cast<double>(*ib);
    return s;
}

template <typename A>
double l2_norm(const A& a) {
    return std::sqrt(dot(a, a));
}

/// Derives an independent 64-bit stream seed from (seed, index) so that
/// per-item generation does not depend on iteration order.
inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t index) {
    std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                      static_cast<std::uint32_t>(index), static_cast<std::uint32_t>(index >> 32)};
    std::uint32_t out[2];
    seq.generate(out, out + 2);
    return (static_cast<std::uint64_t>(out[0]) << 32) | out[1];
}

using Rng = std::mt19937_64;

namespace io {

// Little-endian fixed-width encoding, independent of host byte order.

template <typename U>
    requires std::is_unsigned_v<U>
void put_le(std::ostream& os, U value) {
    unsigned char buf[sizeof(U)];
    for (std::size_t i = 0; i < sizeof(U); ++i) buf[i] = static_cast<unsigned char>(value >> (8 * i));
    os.write(reinterpret_cast<const char*>(buf), sizeof(U));
}

inline void put_f32(std::ostream& os, float value) { put_le(os, std::bit_cast<std::uint32_t>(value)); }

template <typename U>
    requires std::is_unsigned_v<U>
U decode_le(const unsigned char* p) {
    U v = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<U>(static_cast<U>(p[i]) << (8 * i));
    return v;
}

/// Cursor over an in-memory file image; every read is bounds-checked and
/// reports truncation with the field being read.
class Reader {
public:
    explicit Reader(std::vector<unsigned char> bytes) : bytes_(std::move(bytes)) {}

    std::size_t remaining() const noexcept { return bytes_.size() - pos_; }

    void need(std::size_t n, std::string_view field) const {
        if (remaining() < n)
            throw Error(ErrorCode::truncated, "need " + std::to_string(n) + " bytes for " + std::string(field) +
                                                  ", only " + std::to_string(remaining()) + " present");
    }

    std::string_view bytes(std::size_t n, std::string_view field) {
        need(n, field);
        std::string_view out(reinterpret_cast<const char*>(bytes_.data() + pos_), n);
        pos_ += n;
        return out;
    }

    template <typename U>
    U get(std::string_view field) {
        need(sizeof(U), field);
        U v = decode_le<U>(bytes_.data() + pos_);
        pos_ += sizeof(U);
        return v;
    }

    std::vector<float> f32_array(std::uint64_t count, std::string_view field) {
        check_count(count, 4, field);
        std::vector<float> out(count);
        for (auto& v : out) v = std::bit_cast<float>(get<std::uint32_t>(field));
        return out;
    }

    template <typename U>
    std::vector<U> array(std::uint64_t count, std::string_view field) {
        check_count(count, sizeof(U), field);
        std::vector<U> out(count);
        for (auto& v : out) v = get<U>(field);
        return out;
    }

    void expect_end(std::string_view what) const {
        if (remaining() != 0)
            throw Error(ErrorCode::trailing_bytes,
                        std::to_string(remaining()) + " unexpected bytes after " + std::string(what));
    }

private:
    void check_count(std::uint64_t count, std::size_t width, std::string_view field) const {
        if (count > remaining() / width)
            throw Error(ErrorCode::truncated, std::string(field) + " declares " + std::to_string(count) +
                                                  " elements but only " + std::to_string(remaining()) +
                                                  " bytes remain");
    }

    std::vector<unsigned char> bytes_;
    std::size_t pos_ = 0;
};

inline std::vector<unsigned char> slurp(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error(ErrorCode::io, "cannot open " + path);
    std::vector<unsigned char> out((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    if (in.bad()) throw Error(ErrorCode::io, "read failed for " + path);
    return out;
}

inline void write_file(const std::string& path, const std::string& contents) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw Error(ErrorCode::io, "cannot open " + path + " for writing");
    out.write(contents.data(), static_cast<std::streamsize>(contents.size()));
    if (!out) throw Error(ErrorCode::io, "write failed for " + path);
}

}  // namespace io
}  // namespace sae
