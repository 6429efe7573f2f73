#pragma once

// Binary activation shards (SAEACT1), layer manifests and batch streaming.
//
// Shard layout, little-endian:
//   "SAEACT1\0" | u32 d | u64 count | f32 rows[count*d] | u64 image_ids[count] | u32 position_ids[count]

#include <filesystem>
#include <memory>
#include <numeric>
#include <optional>
#include <sstream>
#include <variant>

#include <nlohmann/json.hpp>

#include "sae/common.hpp"

namespace sae {

inline constexpr std::string_view kShardMagic{"SAEACT1\0", 8};
inline constexpr std::size_t kShardHeaderBytes = 8 + 4 + 8;

struct ActivationShard {
    std::uint32_t d = 0;
    std::vector<float> rows;  // count x d, row-major
    std::vector<std::uint64_t> image_ids;
    std::vector<std::uint32_t> position_ids;

    std::size_t count() const noexcept { return image_ids.size(); }
    std::span<const float> row(std::size_t i) const noexcept { return {rows.data() + i * d, d}; }

    friend bool operator==(const ActivationShard&, const ActivationShard&) = default;
};

inline void check_shard(const ActivationShard& shard) {
    require(shard.d > 0, ErrorCode::dimension_mismatch, "shard width d must be positive");
    require(shard.position_ids.size() == shard.image_ids.size(), ErrorCode::dimension_mismatch,
            "image_ids and position_ids lengths differ");
    require(shard.rows.size() == shard.count() * shard.d, ErrorCode::dimension_mismatch,
            "rows length " + std::to_string(shard.rows.size()) + " != count*d = " +
                std::to_string(shard.count() * shard.d));
    for (std::size_t i = 0; i < shard.rows.size(); ++i)
        if (!std::isfinite(shard.rows[i]))
            throw Error(ErrorCode::non_finite, "row " + std::to_string(i / shard.d) + " column " +
                                                   std::to_string(i % shard.d) + " is not finite");
}

inline std::string encode_shard(const ActivationShard& shard) {
    check_shard(shard);
    std::ostringstream os(std::ios::binary);
    os.write(kShardMagic.data(), kShardMagic.size());
    io::put_le<std::uint32_t>(os, shard.d);
    io::put_le<std::uint64_t>(os, shard.count());
    for (float v : shard.rows) io::put_f32(os, v);
    for (auto id : shard.image_ids) io::put_le(os, id);
    for (auto id : shard.position_ids) io::put_le(os, id);
    return std::move(os).str();
}

/// Writes a shard; `expected_d` (when given) is the manifest width the shard must match.
inline void write_shard(const ActivationShard& shard, const std::string& path,
                        std::optional<std::uint32_t> expected_d = std::nullopt) {
    if (expected_d && *expected_d != shard.d)
        throw Error(ErrorCode::dimension_mismatch, "shard d=" + std::to_string(shard.d) +
                                                       " but manifest d=" + std::to_string(*expected_d));
    io::write_file(path, encode_shard(shard));
}

inline ActivationShard decode_shard(std::vector<unsigned char> bytes, const std::string& origin = "<memory>") {
    io::Reader in(std::move(bytes));
    if (in.remaining() < kShardMagic.size() || in.bytes(kShardMagic.size(), "magic") != kShardMagic)
        throw Error(ErrorCode::bad_magic, origin + " is not an SAEACT1 shard");
    ActivationShard shard;
    shard.d = in.get<std::uint32_t>("d");
    require(shard.d > 0, ErrorCode::dimension_mismatch, origin + ": header d is zero");
    const auto count = in.get<std::uint64_t>("count");
    require(count <= in.remaining() / (4ull * shard.d + 12), ErrorCode::truncated,
            origin + ": header claims " + std::to_string(count) + " rows but payload has " +
                std::to_string(in.remaining()) + " bytes");
    shard.rows = in.f32_array(count * shard.d, "rows");
    shard.image_ids = in.array<std::uint64_t>(count, "image_ids");
    shard.position_ids = in.array<std::uint32_t>(count, "position_ids");
    in.expect_end(origin + " payload");
    for (std::size_t i = 0; i < shard.rows.size(); ++i)
        if (!std::isfinite(shard.rows[i]))
            throw Error(ErrorCode::non_finite, origin + ": row " + std::to_string(i / shard.d) + " column " +
                                                   std::to_string(i % shard.d) + " is not finite");
    return shard;
}

inline ActivationShard read_shard(const std::string& path) { return decode_shard(io::slurp(path), path); }

/// Header-only inspection used by validation (does not load the payload).
struct ShardHeader {
    std::uint32_t d;
    std::uint64_t count;
};

inline ShardHeader read_shard_header(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error(ErrorCode::io, "cannot open " + path);
    unsigned char buf[kShardHeaderBytes];
    in.read(reinterpret_cast<char*>(buf), sizeof buf);
    const auto got = static_cast<std::size_t>(in.gcount());
    if (got < kShardMagic.size() || std::string_view(reinterpret_cast<char*>(buf), 8) != kShardMagic)
        throw Error(ErrorCode::bad_magic, path + " is not an SAEACT1 shard");
    if (got < kShardHeaderBytes) throw Error(ErrorCode::truncated, path + ": header incomplete");
    return {io::decode_le<std::uint32_t>(buf + 8), io::decode_le<std::uint64_t>(buf + 12)};
}

// ---------------------------------------------------------------------------
// Manifest

struct BranchSlice {
    std::string name;
    std::uint32_t start = 0;  // inclusive
    std::uint32_t end = 0;    // exclusive

    std::uint32_t width() const noexcept { return end - start; }
    friend bool operator==(const BranchSlice&, const BranchSlice&) = default;
};

struct LayerManifest {
    std::string layer_name;
    std::uint32_t d = 0;
    std::string model_tag;
    std::vector<BranchSlice> branches;
    std::vector<std::string> shards;
    std::filesystem::path base_dir;  // shard paths resolve relative to this; not serialized

    std::filesystem::path shard_path(std::size_t i) const { return base_dir / shards.at(i); }

    const BranchSlice* find_branch(std::string_view name) const {
        for (const auto& b : branches)
            if (b.name == name) return &b;
        return nullptr;
    }

    std::string branch_names() const {
        std::string out;
        for (const auto& b : branches) out += (out.empty() ? "" : ", ") + b.name;
        return out;
    }
};

/// Problems with the branch partition; empty means the slices are disjoint,
/// contiguous, sorted and cover [0, d).
inline std::vector<std::string> partition_violations(const std::vector<BranchSlice>& branches, std::uint32_t d) {
    std::vector<std::string> out;
    if (branches.empty()) out.push_back("branches: empty list cannot cover [0, " + std::to_string(d) + ")");
    std::uint32_t cursor = 0;
    for (std::size_t i = 0; i < branches.size(); ++i) {
        const auto& b = branches[i];
        const std::string where = "branches[" + std::to_string(i) + "] '" + b.name + "'";
        if (b.start >= b.end) out.push_back(where + ": empty or inverted slice [" + std::to_string(b.start) + ", " +
                                            std::to_string(b.end) + ")");
        if (b.end > d) out.push_back(where + ": end " + std::to_string(b.end) + " exceeds d=" + std::to_string(d));
        if (b.start < cursor)
            out.push_back(where + ": overlaps previous slice (start " + std::to_string(b.start) +
                          " < " + std::to_string(cursor) + ")");
        else if (b.start > cursor)
            out.push_back(where + ": gap, channels [" + std::to_string(cursor) + ", " + std::to_string(b.start) +
                          ") uncovered");
        cursor = std::max(cursor, b.end);
    }
    if (!branches.empty() && cursor < d)
        out.push_back("branches: channels [" + std::to_string(cursor) + ", " + std::to_string(d) + ") uncovered");
    return out;
}

inline nlohmann::json to_json(const LayerManifest& m) {
    nlohmann::json branches = nlohmann::json::array();
    for (const auto& b : m.branches) branches.push_back({{"name", b.name}, {"start", b.start}, {"end", b.end}});
    return {{"layer_name", m.layer_name}, {"d", m.d},          {"model_tag", m.model_tag},
            {"branches", branches},       {"shards", m.shards}};
}

/// Schema problems in a manifest document, reported as "field: problem".
inline std::vector<std::string> manifest_schema_violations(const nlohmann::json& j) {
    std::vector<std::string> out;
    if (!j.is_object()) return {"<root>: expected a JSON object"};
    auto need = [&](const char* key, auto pred, const char* kind) {
        if (!j.contains(key)) out.push_back(std::string(key) + ": missing");
        else if (!pred(j.at(key))) out.push_back(std::string(key) + ": expected " + kind);
    };
    need("layer_name", [](const auto& v) { return v.is_string(); }, "string");
    need("model_tag", [](const auto& v) { return v.is_string(); }, "string");
    need("d", [](const auto& v) { return v.is_number_unsigned() && v.template get<std::uint64_t>() > 0 &&
                                         v.template get<std::uint64_t>() <= UINT32_MAX; }, "positive integer");
    need("shards", [](const auto& v) {
        return v.is_array() && std::all_of(v.begin(), v.end(), [](const auto& s) { return s.is_string(); });
    }, "array of strings");
    need("branches", [](const auto& v) { return v.is_array(); }, "array");
    if (j.contains("branches") && j.at("branches").is_array()) {
        const auto& arr = j.at("branches");
        for (std::size_t i = 0; i < arr.size(); ++i) {
            const auto& b = arr[i];
            const std::string where = "branches[" + std::to_string(i) + "]";
            if (!b.is_object()) { out.push_back(where + ": expected object"); continue; }
            if (!b.contains("name") || !b.at("name").is_string()) out.push_back(where + ".name: expected string");
            for (const char* key : {"start", "end"})
                if (!b.contains(key) || !b.at(key).is_number_unsigned())
                    out.push_back(where + "." + key + ": expected non-negative integer");
        }
    }
    return out;
}

inline LayerManifest manifest_from_json(const nlohmann::json& j, std::filesystem::path base_dir = {}) {
    if (auto problems = manifest_schema_violations(j); !problems.empty())
        throw Error(ErrorCode::invalid_manifest, problems.front());
    LayerManifest m;
    m.layer_name = j.at("layer_name").get<std::string>();
    m.d = j.at("d").get<std::uint32_t>();
    m.model_tag = j.at("model_tag").get<std::string>();
    for (const auto& b : j.at("branches"))
        m.branches.push_back({b.at("name").get<std::string>(), b.at("start").get<std::uint32_t>(),
                              b.at("end").get<std::uint32_t>()});
    m.shards = j.at("shards").get<std::vector<std::string>>();
    m.base_dir = std::move(base_dir);
    if (auto problems = partition_violations(m.branches, m.d); !problems.empty())
        throw Error(ErrorCode::invalid_manifest, problems.front());
    return m;
}

inline nlohmann::json read_json_file(const std::string& path) {
    const auto bytes = io::slurp(path);
    try {
        return nlohmann::json::parse(bytes.begin(), bytes.end());
    } catch (const nlohmann::json::parse_error& e) {
        throw Error(ErrorCode::invalid_manifest, path + ": " + e.what());
    }
}

inline LayerManifest load_manifest(const std::string& path) {
    return manifest_from_json(read_json_file(path), std::filesystem::path(path).parent_path());
}

inline void save_manifest(const LayerManifest& m, const std::string& path) {
    io::write_file(path, to_json(m).dump(2) + "\n");
}

// ---------------------------------------------------------------------------
// Top-norm sampling

struct NormSample {
    std::uint32_t position_id;
    double norm;
    std::vector<float> vector;
};

/// Keeps the `n` grid positions with the largest Euclidean norm. Output is
/// ordered by descending norm, equal norms by ascending position.
inline std::vector<NormSample> top_norm_sample(std::span<const float> grid, std::size_t d, std::size_t n) {
    require(d > 0, ErrorCode::invalid_argument, "top_norm_sample: d must be positive");
    require(n >= 1, ErrorCode::invalid_argument, "top_norm_sample: n must be >= 1");
    require(grid.size() % d == 0, ErrorCode::dimension_mismatch, "grid length is not a multiple of d");
    const std::size_t p = grid.size() / d;
    std::vector<double> norms(p);
    for (std::size_t i = 0; i < p; ++i) norms[i] = l2_norm(grid.subspan(i * d, d));
    std::vector<std::uint32_t> order(p);
    std::iota(order.begin(), order.end(), 0u);
    const auto keep = std::min(n, p);
    std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(keep), order.end(),
                      [&](std::uint32_t a, std::uint32_t b) { return norms[a] > norms[b] || (norms[a] == norms[b] && a < b); });
    std::vector<NormSample> out;
    out.reserve(keep);
    for (std::size_t i = 0; i < keep; ++i) {
        const auto pos = order[i];
        auto row = grid.subspan(pos * d, d);
        out.push_back({pos, norms[pos], {row.begin(), row.end()}});
    }
    return out;
}

// ---------------------------------------------------------------------------
// Batch streaming

template <typename T>
struct Batch {
    Matrix<T> rows;
    std::vector<std::uint64_t> image_ids;
    std::vector<std::uint32_t> position_ids;

    std::size_t size() const noexcept { return rows.rows(); }
};

/// A shard source is either a file on disk or an already-loaded shard.
using ShardSource = std::variant<std::filesystem::path, std::shared_ptr<const ActivationShard>>;

inline std::vector<ShardSource> sources_from_manifest(const LayerManifest& m) {
    std::vector<ShardSource> out;
    for (std::size_t i = 0; i < m.shards.size(); ++i) out.emplace_back(m.shard_path(i));
    return out;
}

/// Single-epoch stream of shuffled batches. Rows are read shard by shard into
/// a bounded shuffle buffer; once the buffer is full, each incoming row
/// displaces a uniformly chosen buffered row, which is emitted. Emission
/// order depends only on (sources, seed, buffer_size); every row is emitted
/// exactly once. buffer_size == 1 reproduces shard order.
template <typename T = float>
class BatchStream {
public:
    BatchStream(std::vector<ShardSource> sources, std::uint32_t d, std::size_t batch_size, std::uint64_t seed,
                std::size_t buffer_size)
        : sources_(std::move(sources)), d_(d), batch_size_(batch_size), buffer_size_(buffer_size), rng_(seed) {
        require(batch_size_ >= 1, ErrorCode::invalid_argument, "batch_size must be >= 1");
        require(buffer_size_ >= 1, ErrorCode::invalid_argument, "buffer_size must be >= 1");
        require(d_ > 0, ErrorCode::invalid_argument, "stream width must be positive");
    }

    BatchStream(const LayerManifest& m, std::size_t batch_size, std::uint64_t seed, std::size_t buffer_size)
        : BatchStream(sources_from_manifest(m), m.d, batch_size, seed, buffer_size) {}

    std::uint32_t width() const noexcept { return d_; }

    std::optional<Batch<T>> next() {
        std::vector<Item> picked;
        picked.reserve(batch_size_);
        while (picked.size() < batch_size_) {
            auto item = next_row();
            if (!item) break;
            picked.push_back(std::move(*item));
        }
        if (picked.empty()) return std::nullopt;
        Batch<T> batch{Matrix<T>(picked.size(), d_), {}, {}};
        for (std::size_t r = 0; r < picked.size(); ++r) {
            auto dst = batch.rows.row(r);
            const auto src = picked[r].shard->row(picked[r].index);
            for (std::size_t c = 0; c < d_; ++c) dst[c] = static_cast<T>(src[c]);
            batch.image_ids.push_back(picked[r].shard->image_ids[picked[r].index]);
            batch.position_ids.push_back(picked[r].shard->position_ids[picked[r].index]);
        }
        return batch;
    }

private:
    struct Item {
        std::shared_ptr<const ActivationShard> shard;
        std::size_t index;
    };

    std::optional<Item> pull_source_row() {
        while (!current_ || cursor_ >= current_->count()) {
            if (next_source_ >= sources_.size()) return std::nullopt;
            current_ = load(sources_[next_source_++]);
            cursor_ = 0;
        }
        return Item{current_, cursor_++};
    }

    std::shared_ptr<const ActivationShard> load(const ShardSource& src) const {
        std::shared_ptr<const ActivationShard> shard;
        std::string name = "<memory>";
        if (const auto* path = std::get_if<std::filesystem::path>(&src)) {
            shard = std::make_shared<const ActivationShard>(read_shard(path->string()));
            name = path->string();
        } else {
            shard = std::get<std::shared_ptr<const ActivationShard>>(src);
            check_shard(*shard);
        }
        if (shard->d != d_)
            throw Error(ErrorCode::dimension_mismatch,
                        name + ": shard d=" + std::to_string(shard->d) + " but stream d=" + std::to_string(d_));
        return shard;
    }

    std::optional<Item> next_row() {
        while (buffer_.size() < buffer_size_) {
            auto item = pull_source_row();
            if (!item) break;
            buffer_.push_back(std::move(*item));
        }
        if (buffer_.empty()) return std::nullopt;
        const std::size_t j = std::uniform_int_distribution<std::size_t>(0, buffer_.size() - 1)(rng_);
        Item out = std::move(buffer_[j]);
        buffer_[j] = std::move(buffer_.back());
        buffer_.pop_back();
        return out;
    }

    std::vector<ShardSource> sources_;
    std::uint32_t d_;
    std::size_t batch_size_;
    std::size_t buffer_size_;
    Rng rng_;
    std::vector<Item> buffer_;
    std::shared_ptr<const ActivationShard> current_;
    std::size_t next_source_ = 0;
    std::size_t cursor_ = 0;
};

/// Repeats BatchStream across epochs, reseeding each epoch from (seed, epoch).
/// The final partial batch of an epoch is emitted as is.
template <typename T = float>
class EpochStream {
public:
    EpochStream(std::vector<ShardSource> sources, std::uint32_t d, std::size_t batch_size, std::uint64_t seed,
                std::size_t buffer_size)
        : sources_(std::move(sources)), d_(d), batch_size_(batch_size), seed_(seed), buffer_size_(buffer_size) {
        restart();
    }

    std::uint32_t width() const noexcept { return d_; }
    std::size_t epoch() const noexcept { return epoch_; }

    std::optional<Batch<T>> next() {
        for (int attempt = 0; attempt < 2; ++attempt) {
            if (auto batch = stream_->next()) return batch;
            ++epoch_;
            restart();
        }
        return std::nullopt;  // no rows at all
    }

private:
    void restart() {
        stream_.emplace(sources_, d_, batch_size_, derive_seed(seed_, epoch_), buffer_size_);
    }

    std::vector<ShardSource> sources_;
    std::uint32_t d_;
    std::size_t batch_size_;
    std::uint64_t seed_;
    std::size_t buffer_size_;
    std::size_t epoch_ = 0;
    std::optional<BatchStream<T>> stream_;
};

}  // namespace sae
