#pragma once

// Per-image feature activations over stored shards, and exemplar sampling
// across equal-percentile activation levels.

#include <map>

#include "sae/activation_store.hpp"
#include "sae/sae.hpp"

namespace sae::exemplars {

struct ImageActivation {
    std::uint64_t image_id;
    double activation;  // max over the image's stored vectors; 0 when never selected
    std::uint32_t position_id;

    friend bool operator==(const ImageActivation&, const ImageActivation&) = default;
};

/// Folds one stored vector into the per-image maximum. Equal maxima keep the
/// lower position id, which makes the result independent of shard order.
inline void fold_activation(std::map<std::uint64_t, ImageActivation>& acc, std::uint64_t image, double value,
                            std::uint32_t position) {
    auto [it, inserted] = acc.try_emplace(image, ImageActivation{image, value, position});
    if (inserted) return;
    auto& cur = it->second;
    if (value > cur.activation || (value == cur.activation && position < cur.position_id)) {
        cur.activation = value;
        cur.position_id = position;
    }
}

/// Sorted by image id.
template <typename T>
std::vector<ImageActivation> feature_activations(const SaeParams<T>& params,
                                                 const std::vector<ActivationShard>& shards,
                                                 std::uint32_t feature_id) {
    require(feature_id < params.l, ErrorCode::invalid_argument,
            "feature " + std::to_string(feature_id) + " out of range (l=" + std::to_string(params.l) + ")");
    std::map<std::uint64_t, ImageActivation> acc;
    std::vector<T> x(params.d);
    for (const auto& shard : shards) {
        require(shard.d == params.d, ErrorCode::dimension_mismatch,
                "shard d=" + std::to_string(shard.d) + " but checkpoint d=" + std::to_string(params.d));
        for (std::size_t r = 0; r < shard.count(); ++r) {
            const auto row = shard.row(r);
            for (std::size_t c = 0; c < params.d; ++c) x[c] = static_cast<T>(row[c]);
            const auto code = encode_sparse(params, std::span<const T>(x));
            double value = 0.0;
            const auto hit = std::lower_bound(code.indices.begin(), code.indices.end(), feature_id);
            if (hit != code.indices.end() && *hit == feature_id)
                value = static_cast<double>(code.values[static_cast<std::size_t>(hit - code.indices.begin())]);
            fold_activation(acc, shard.image_ids[r], value, shard.position_ids[r]);
        }
    }
    std::vector<ImageActivation> out;
    out.reserve(acc.size());
    for (auto& [id, a] : acc) out.push_back(a);
    return out;
}

struct Bucket {
    double percentile_lo;  // exclusive
    double percentile_hi;  // inclusive
    std::optional<double> value_lo;  // smallest member activation
    std::optional<double> value_hi;  // largest member activation
    std::vector<ImageActivation> members;
    std::vector<ImageActivation> samples;
};

struct ExemplarReport {
    std::uint32_t feature_id = 0;
    std::vector<ImageActivation> activations;  // per image, every image including zeros
    std::vector<Bucket> buckets;
};

/// Index of the bucket for a value whose count of members <= it is `le`
/// out of `n`: percentile rank 100*le/n falls in (100b/B, 100(b+1)/B].
inline std::size_t bucket_index(std::size_t le, std::size_t n, std::size_t buckets) {
    return (le * buckets + n - 1) / n - 1;
}

/// Splits the positive activations into `n_buckets` equal-percentile ranges
/// (equal values share the highest percentile rank among them) and draws up
/// to `per_bucket` seeded samples without replacement from each.
inline ExemplarReport bucket_sample(std::vector<ImageActivation> activations, std::size_t n_buckets,
                                    std::size_t per_bucket, std::uint64_t seed, std::uint32_t feature_id = 0) {
    require(n_buckets >= 1, ErrorCode::invalid_argument, "bucket_sample: n_buckets must be >= 1");
    ExemplarReport rep;
    rep.feature_id = feature_id;
    std::vector<ImageActivation> active;
    for (const auto& a : activations)
        if (a.activation > 0.0) active.push_back(a);
    std::sort(active.begin(), active.end(), [](const ImageActivation& a, const ImageActivation& b) {
        return a.activation < b.activation || (a.activation == b.activation && a.image_id < b.image_id);
    });
    for (std::size_t b = 0; b < n_buckets; ++b)
        rep.buckets.push_back({100.0 * static_cast<double>(b) / static_cast<double>(n_buckets),
                               100.0 * static_cast<double>(b + 1) / static_cast<double>(n_buckets),
                               std::nullopt, std::nullopt, {}, {}});
    const std::size_t n = active.size();
    for (std::size_t i = 0; i < n;) {
        std::size_t j = i;
        while (j < n && active[j].activation == active[i].activation) ++j;
        auto& bucket = rep.buckets[bucket_index(j, n, n_buckets)];
        for (std::size_t t = i; t < j; ++t) bucket.members.push_back(active[t]);
        i = j;
    }
    for (std::size_t b = 0; b < n_buckets; ++b) {
        auto& bucket = rep.buckets[b];
        if (bucket.members.empty()) continue;
        bucket.value_lo = bucket.members.front().activation;
        bucket.value_hi = bucket.members.back().activation;
        Rng rng(derive_seed(seed, b));
        std::vector<std::size_t> idx(bucket.members.size());
        std::iota(idx.begin(), idx.end(), std::size_t{0});
        const auto take = std::min(per_bucket, idx.size());
        for (std::size_t t = 0; t < take; ++t) {
            const auto pick = std::uniform_int_distribution<std::size_t>(t, idx.size() - 1)(rng);
            std::swap(idx[t], idx[pick]);
            bucket.samples.push_back(bucket.members[idx[t]]);
        }
    }
    rep.activations = std::move(activations);
    return rep;
}

inline nlohmann::json to_json(const ExemplarReport& r, std::string_view layer) {
    auto act = [](const ImageActivation& a) {
        return nlohmann::json{{"image_id", a.image_id}, {"activation", a.activation}, {"position_id", a.position_id}};
    };
    nlohmann::json buckets = nlohmann::json::array();
    for (const auto& b : r.buckets) {
        nlohmann::json samples = nlohmann::json::array();
        for (const auto& s : b.samples) samples.push_back(act(s));
        buckets.push_back({{"percentile_range", {b.percentile_lo, b.percentile_hi}},
                           {"value_range", b.value_lo ? nlohmann::json{*b.value_lo, *b.value_hi} : nlohmann::json()},
                           {"member_count", b.members.size()},
                           {"samples", samples}});
    }
    nlohmann::json per_image = nlohmann::json::array();
    for (const auto& a : r.activations) per_image.push_back(act(a));
    return {{"feature", feature_name(layer, r.feature_id)},
            {"feature_id", r.feature_id},
            {"activations", per_image},
            {"buckets", buckets}};
}

}  // namespace sae::exemplars
