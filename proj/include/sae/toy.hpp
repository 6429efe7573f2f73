#pragma once

// Synthetic superposition data with a known ground-truth dictionary.

#include "sae/activation_store.hpp"
#include "sae/sae.hpp"

namespace sae::toy {

struct GroundTruthDictionary {
    std::uint32_t m = 0;
    std::uint32_t d = 0;
    Matrix<double> directions;  // m x d, unit rows
    std::uint64_t seed = 0;
};

inline constexpr double kMaxAbsCosine = 0.9;
inline constexpr int kMaxRetries = 1000;

/// Seeded isotropic unit vectors. A row whose |cosine| with any earlier row
/// reaches 0.9 is redrawn.
inline GroundTruthDictionary gen_dictionary(std::uint32_t m, std::uint32_t d, std::uint64_t seed) {
    require(m >= 1, ErrorCode::invalid_argument, "gen_dictionary: m must be >= 1");
    require(d >= 2, ErrorCode::invalid_argument, "gen_dictionary: d must be >= 2");
    GroundTruthDictionary dict{m, d, Matrix<double>(m, d), seed};
    Rng rng(seed);
    std::normal_distribution<double> normal(0.0, 1.0);
    for (std::uint32_t i = 0; i < m; ++i) {
        auto row = dict.directions.row(i);
        int attempt = 0;
        for (;; ++attempt) {
            if (attempt >= kMaxRetries)
                throw Error(ErrorCode::no_convergence,
                            "gen_dictionary: cannot place direction " + std::to_string(i) + " with |cos| < 0.9 after " +
                                std::to_string(kMaxRetries) + " retries (m=" + std::to_string(m) +
                                " too large for d=" + std::to_string(d) + ")");
            double norm = 0.0;
            do {
                for (auto& v : row) v = normal(rng);
                norm = l2_norm(std::span<const double>(row));
            } while (norm == 0.0);
            for (auto& v : row) v /= norm;
            bool ok = true;
            for (std::uint32_t j = 0; j < i && ok; ++j)
                ok = std::abs(dot(std::span<const double>(row), dict.directions.row(j))) < kMaxAbsCosine;
            if (ok) break;
        }
    }
    return dict;
}

struct SyntheticSample {
    std::vector<double> x;
    std::vector<std::uint32_t> active_set;
    std::vector<double> amplitudes;
};

/// Each sample has s ~ U{1..s_max} distinct active features with amplitudes
/// U[0.5, 1.0], plus isotropic gaussian noise. Sample i depends only on
/// (seed, i).
inline std::vector<SyntheticSample> gen_samples(const GroundTruthDictionary& dict, std::size_t n,
                                                std::uint32_t s_max, double noise_sigma, std::uint64_t seed) {
    require(s_max >= 1 && s_max <= dict.m, ErrorCode::invalid_argument,
            "gen_samples: s_max must lie in [1, m]");
    require(noise_sigma >= 0, ErrorCode::invalid_argument, "gen_samples: noise_sigma must be >= 0");
    std::vector<SyntheticSample> out(n);
    std::vector<std::uint32_t> pool(dict.m);
    for (std::size_t idx = 0; idx < n; ++idx) {
        Rng rng(derive_seed(seed, idx));
        auto& s = out[idx];
        const auto count = std::uniform_int_distribution<std::uint32_t>(1, s_max)(rng);
        std::iota(pool.begin(), pool.end(), 0u);
        for (std::uint32_t j = 0; j < count; ++j) {
            const auto pick = std::uniform_int_distribution<std::uint32_t>(j, dict.m - 1)(rng);
            std::swap(pool[j], pool[pick]);
            s.active_set.push_back(pool[j]);
        }
        std::uniform_real_distribution<double> amp(0.5, 1.0);
        s.x.assign(dict.d, 0.0);
        for (auto f : s.active_set) {
            const double a = amp(rng);
            s.amplitudes.push_back(a);
            const auto dir = dict.directions.row(f);
            for (std::size_t c = 0; c < dict.d; ++c) s.x[c] += a * dir[c];
        }
        if (noise_sigma > 0) {
            std::normal_distribution<double> noise(0.0, noise_sigma);
            for (auto& v : s.x) v += noise(rng);
        }
    }
    return out;
}

/// Samples as an activation shard: image_id = sample index, position_id = 0.
inline ActivationShard to_shard(const std::vector<SyntheticSample>& samples, std::uint32_t d) {
    ActivationShard shard;
    shard.d = d;
    shard.rows.reserve(samples.size() * d);
    for (std::size_t i = 0; i < samples.size(); ++i) {
        require(samples[i].x.size() == d, ErrorCode::dimension_mismatch, "sample width differs from d");
        for (double v : samples[i].x) shard.rows.push_back(static_cast<float>(v));
        shard.image_ids.push_back(i);
        shard.position_ids.push_back(0);
    }
    return shard;
}

/// Mean over true directions of the best |cosine| against live (nonzero)
/// learned decoder vectors.
template <typename T>
double recovery_score(const SaeParams<T>& learned, const GroundTruthDictionary& dict) {
    require(learned.d == dict.d, ErrorCode::dimension_mismatch,
            "recovery_score: learned d=" + std::to_string(learned.d) + " vs dictionary d=" + std::to_string(dict.d));
    const auto feats = learned.features();
    std::vector<std::vector<double>> live;
    for (std::size_t i = 0; i < feats.rows(); ++i) {
        const auto row = feats.row(i);
        const double norm = l2_norm(row);
        if (norm == 0.0) continue;
        std::vector<double> unit(row.size());
        for (std::size_t c = 0; c < row.size(); ++c) unit[c] = static_cast<double>(row[c]) / norm;
        live.push_back(std::move(unit));
    }
    double total = 0.0;
    for (std::size_t t = 0; t < dict.m; ++t) {
        const auto truth = dict.directions.row(t);
        double best = 0.0;
        for (const auto& u : live) best = std::max(best, std::abs(dot(truth, std::span<const double>(u))));
        total += std::min(best, 1.0);
    }
    return total / static_cast<double>(dict.m);
}

}  // namespace sae::toy
