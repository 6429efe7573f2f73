#pragma once

// Share of each feature's decoder norm that falls inside one branch's
// channel slice: ||f[start:end]||_2 / ||f||_2. Across a full partition the
// squared fractions (not the fractions) sum to 1.

#include <map>

#include "sae/activation_store.hpp"
#include "sae/sae.hpp"

namespace sae::branch {

template <typename T>
std::optional<double> branch_fraction(std::span<const T> feature, const BranchSlice& slice) {
    require(slice.start < slice.end && slice.end <= feature.size(), ErrorCode::invalid_argument,
            "slice '" + slice.name + "' [" + std::to_string(slice.start) + ", " + std::to_string(slice.end) +
                ") outside feature width " + std::to_string(feature.size()));
    // long double sums keep uniform vectors at exactly sqrt(width / d)
    const auto sum_sq = [](auto values) {
        long double s = 0;
        for (auto v : values) s += static_cast<long double>(v) * static_cast<long double>(v);
        return s;
    };
    const long double total = sum_sq(feature);
    if (total == 0.0L) return std::nullopt;
    const long double inside = sum_sq(feature.subspan(slice.start, slice.width()));
    return std::min(static_cast<double>(std::sqrt(inside / total)), 1.0);
}

struct Histogram {
    std::vector<double> edges;  // bins + 1 edges over [0, 1]
    std::vector<std::uint64_t> counts;
};

/// Bin b covers (edge[b], edge[b+1]]; 0 lands in bin 0.
inline std::size_t bin_of(double value, std::size_t bins) {
    const auto edge = [bins](std::size_t b) { return static_cast<double>(b) / static_cast<double>(bins); };
    auto b = static_cast<std::size_t>(std::max(0.0, std::ceil(value * static_cast<double>(bins)) - 1.0));
    b = std::min(b, bins - 1);
    while (b > 0 && value <= edge(b)) --b;
    while (b + 1 < bins && value > edge(b + 1)) ++b;
    return b;
}

inline Histogram make_histogram(const std::vector<std::optional<double>>& fractions, std::size_t bins) {
    require(bins >= 1, ErrorCode::invalid_argument, "histogram needs at least one bin");
    Histogram h;
    for (std::size_t b = 0; b <= bins; ++b) h.edges.push_back(static_cast<double>(b) / static_cast<double>(bins));
    h.counts.assign(bins, 0);
    for (const auto& f : fractions)
        if (f) ++h.counts[bin_of(*f, bins)];
    return h;
}

struct RankedFeature {
    std::uint32_t feature;
    double fraction;
};

struct BranchFractionReport {
    std::string layer_name;
    std::string branch;
    std::vector<std::optional<double>> fractions;  // nullopt for zero-norm (dead) decoder vectors
    Histogram histogram;
    std::vector<RankedFeature> top_features;       // all live features, descending fraction
};

inline void sort_ranked(std::vector<RankedFeature>& v) {
    std::sort(v.begin(), v.end(), [](const RankedFeature& a, const RankedFeature& b) {
        return a.fraction > b.fraction || (a.fraction == b.fraction && a.feature < b.feature);
    });
}

template <typename T>
std::vector<std::optional<double>> fractions_for(const SaeParams<T>& params, const BranchSlice& slice) {
    const auto feats = params.features();
    std::vector<std::optional<double>> out(feats.rows());
    for (std::size_t i = 0; i < feats.rows(); ++i) out[i] = branch_fraction(feats.row(i), slice);
    return out;
}

template <typename T>
BranchFractionReport branch_histogram(const SaeParams<T>& params, const BranchSlice& slice, std::size_t bins,
                                      std::string layer_name = {}) {
    BranchFractionReport r{std::move(layer_name), slice.name, fractions_for(params, slice), {}, {}};
    r.histogram = make_histogram(r.fractions, bins);
    for (std::uint32_t i = 0; i < r.fractions.size(); ++i)
        if (r.fractions[i]) r.top_features.push_back({i, *r.fractions[i]});
    sort_ranked(r.top_features);
    return r;
}

/// Per branch (manifest order), the live features whose fraction is at
/// least `threshold`, sorted by descending fraction then feature id.
template <typename T>
std::vector<std::pair<std::string, std::vector<RankedFeature>>> specialization_table(const SaeParams<T>& params,
                                                                                     const LayerManifest& manifest,
                                                                                     double threshold) {
    require(params.d == manifest.d, ErrorCode::dimension_mismatch,
            "checkpoint d=" + std::to_string(params.d) + " but manifest d=" + std::to_string(manifest.d));
    if (auto problems = partition_violations(manifest.branches, manifest.d); !problems.empty())
        throw Error(ErrorCode::invalid_manifest, problems.front());
    std::vector<std::pair<std::string, std::vector<RankedFeature>>> table;
    for (const auto& slice : manifest.branches) {
        std::vector<RankedFeature> hits;
        const auto fr = fractions_for(params, slice);
        for (std::uint32_t i = 0; i < fr.size(); ++i)
            if (fr[i] && *fr[i] >= threshold) hits.push_back({i, *fr[i]});
        sort_ranked(hits);
        table.emplace_back(slice.name, std::move(hits));
    }
    return table;
}

/// Largest deviation from 1 of the per-feature sum of squared fractions over
/// a full partition. Zero-norm features are skipped.
template <typename T>
double max_partition_residual(const SaeParams<T>& params, const std::vector<BranchSlice>& partition) {
    const auto feats = params.features();
    double worst = 0.0;
    for (std::size_t i = 0; i < feats.rows(); ++i) {
        double s = 0.0;
        bool live = true;
        for (const auto& slice : partition) {
            const auto f = branch_fraction(feats.row(i), slice);
            if (!f) { live = false; break; }
            s += *f * *f;
        }
        if (live) worst = std::max(worst, std::abs(s - 1.0));
    }
    return worst;
}

}  // namespace sae::branch
