#pragma once

#include <filesystem>
#include <random>
#include <string>

#include <unistd.h>

#include "sae/common.hpp"

namespace sae::testing {

/// Fresh directory under the build tree's temp area, removed on destruction.
class TempDir {
public:
    explicit TempDir(const std::string& tag) {
        static int counter = 0;
        path_ = std::filesystem::temp_directory_path() /
                ("sae_test_" + tag + "_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
        std::filesystem::remove_all(path_);
        std::filesystem::create_directories(path_);
    }
    ~TempDir() {
        std::error_code ec;
        std::filesystem::remove_all(path_, ec);
    }
    TempDir(const TempDir&) = delete;
    TempDir& operator=(const TempDir&) = delete;

    const std::filesystem::path& path() const { return path_; }
    std::string file(const std::string& name) const { return (path_ / name).string(); }

private:
    std::filesystem::path path_;
};

template <typename T>
Matrix<T> random_matrix(std::size_t rows, std::size_t cols, Rng& rng, double lo = -1.0, double hi = 1.0) {
    std::uniform_real_distribution<double> u(lo, hi);
    Matrix<T> m(rows, cols);
    for (auto& v : m.storage()) v = static_cast<T>(u(rng));
    return m;
}

template <typename T>
std::vector<T> random_vector(std::size_t n, Rng& rng, double lo = -1.0, double hi = 1.0) {
    std::uniform_real_distribution<double> u(lo, hi);
    std::vector<T> v(n);
    for (auto& x : v) x = static_cast<T>(u(rng));
    return v;
}

/// n points in d dims: the first n/2 scattered around one random center of
/// norm 4, the rest around a second one. Labels are 0 / 1 by half.
inline Matrix<float> two_clusters(std::size_t n, std::size_t d, std::uint64_t seed, double spread = 0.5) {
    Rng rng(seed);
    std::normal_distribution<double> g(0.0, 1.0);
    Matrix<double> centers(2, d);
    for (std::size_t c = 0; c < 2; ++c) {
        for (auto& v : centers.row(c)) v = g(rng);
        const double norm = l2_norm(centers.row(c));
        for (auto& v : centers.row(c)) v *= 4.0 / norm;
    }
    Matrix<float> out(n, d);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t c = 0; c < d; ++c)
            out(i, c) = static_cast<float>(centers(i < n / 2 ? 0 : 1, c) + spread * g(rng));
    return out;
}

}  // namespace sae::testing
