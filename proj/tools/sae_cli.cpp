// sae: train, validate and analyze TopK sparse autoencoders over stored
// activation shards.
//
// Exit codes: 0 success, 1 validation failure, 2 runtime or usage error.
// Outputs go to --out, defaulting to $SAE_OUT_DIR or the working directory.

#include <cstdlib>
#include <filesystem>
#include <iostream>

#include <CLI11.hpp>
#include <fmt/core.h>

#include "sae/all.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using sae::Matrix;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitInvalid = 1;
constexpr int kExitError = 2;

std::string g9(double v) { return fmt::format("{:.9g}", v); }

std::string default_out_dir() {
    const char* env = std::getenv("SAE_OUT_DIR");
    return env && *env ? env : ".";
}

/// Characters outside [A-Za-z0-9._-] become '_' so branch names make safe file names.
std::string file_token(std::string s) {
    for (auto& c : s)
        if (!std::isalnum(static_cast<unsigned char>(c)) && c != '.' && c != '-' && c != '_') c = '_';
    return s;
}

struct ToyFlags {
    std::uint32_t d = 32;
    std::uint32_t m = 48;
    std::uint32_t s_max = 3;
    double sigma = 0.01;
    std::uint64_t samples = 200'000;
    std::uint64_t seed = 0;
};

struct RunConfig {
    std::string subcommand;
    std::uint64_t seed = 0;
    sae::TrainConfig train;
    std::size_t buffer_size = 4096;
    bool toy = false;
    ToyFlags toy_flags;
    std::string branch;
    std::size_t bins = 20;
    double threshold = 0.5;
    sae::embed::LayoutConfig layout;
    std::uint32_t trust_k = 10;
    std::uint32_t feature = 0;
    std::size_t buckets = 5;
    std::size_t per_bucket = 4;
    std::string top = "100";
    std::map<std::string, std::string> inputs;
    std::vector<std::string> outputs;
    std::string out_dir;

    json to_json() const {
        auto train_json = sae::to_json(train);
        return {{"subcommand", subcommand},
                {"seed", seed},
                {"train", train_json},
                {"buffer_size", buffer_size},
                {"toy",
                 {{"enabled", toy},
                  {"d", toy_flags.d},
                  {"m", toy_flags.m},
                  {"s_max", toy_flags.s_max},
                  {"noise_sigma", toy_flags.sigma},
                  {"samples", toy_flags.samples},
                  {"seed", toy_flags.seed}}},
                {"analysis", {{"branch", branch}, {"bins", bins}, {"threshold", threshold}}},
                {"embedding",
                 {{"neighbors", layout.neighbors},
                  {"min_dist", layout.min_dist},
                  {"epochs", layout.epochs},
                  {"negative_samples", layout.negative_samples},
                  {"metric", "cosine"},
                  {"trust_k", trust_k}}},
                {"examples", {{"feature", feature}, {"buckets", buckets}, {"per_bucket", per_bucket}}},
                {"circuits", {{"top", top}}},
                {"inputs", inputs},
                {"outputs", outputs},
                {"out_dir", out_dir}};
    }
};

class Emitter {
public:
    explicit Emitter(RunConfig& rc) : rc_(rc) { fs::create_directories(rc_.out_dir); }

    std::string path(const std::string& name) {
        rc_.outputs.push_back(name);
        return (fs::path(rc_.out_dir) / name).string();
    }

    /// Writes a non-JSON output plus its `.json` sidecar.
    void with_sidecar(const std::string& name, const std::string& contents, json meta = json::object()) {
        sae::io::write_file(path(name), contents);
        pending_.push_back({name, std::move(meta)});
    }

    /// JSON outputs carry the run config inline.
    void json_file(const std::string& name, json body) {
        pending_json_.push_back({name, std::move(body)});
        rc_.outputs.push_back(name);
    }

    // Sidecars are written last so every one lists the complete output set.
    void finish() {
        const auto config = rc_.to_json();
        for (auto& [name, body] : pending_json_) {
            body["run_config"] = config;
            sae::io::write_file((fs::path(rc_.out_dir) / name).string(), body.dump(2) + "\n");
        }
        for (auto& [name, meta] : pending_) {
            meta["file"] = name;
            meta["run_config"] = config;
            sae::io::write_file((fs::path(rc_.out_dir) / (name + ".json")).string(), meta.dump(2) + "\n");
        }
    }

private:
    RunConfig& rc_;
    std::vector<std::pair<std::string, json>> pending_;
    std::vector<std::pair<std::string, json>> pending_json_;
};

// ---------------------------------------------------------------------------
// validate

std::vector<std::string> validate_manifest(const std::string& manifest_path) {
    std::vector<std::string> diags;
    auto add = [&](const std::string& file, const std::string& what) { diags.push_back(file + ": " + what); };
    json j;
    try {
        j = sae::read_json_file(manifest_path);
    } catch (const sae::Error& e) {
        add(manifest_path, e.what());
        return diags;
    }
    for (const auto& v : sae::manifest_schema_violations(j)) add(manifest_path, v);
    if (!diags.empty()) return diags;

    const auto d = j.at("d").get<std::uint32_t>();
    std::vector<sae::BranchSlice> branches;
    for (const auto& b : j.at("branches"))
        branches.push_back({b.at("name").get<std::string>(), b.at("start").get<std::uint32_t>(),
                            b.at("end").get<std::uint32_t>()});
    for (const auto& v : sae::partition_violations(branches, d)) add(manifest_path, v);

    const auto base = fs::path(manifest_path).parent_path();
    const auto shards = j.at("shards").get<std::vector<std::string>>();
    for (std::size_t i = 0; i < shards.size(); ++i) {
        const auto shard_path = (base / shards[i]).string();
        const std::string field = "shards[" + std::to_string(i) + "]";
        try {
            const auto h = sae::read_shard_header(shard_path);
            if (h.d != d)
                add(shard_path, field + ".d: shard width " + std::to_string(h.d) + " != manifest d " + std::to_string(d));
            const auto expected = sae::kShardHeaderBytes + h.count * (4ull * h.d + 8 + 4);
            const auto actual = fs::file_size(shard_path);
            if (actual < expected)
                add(shard_path, field + ": truncated, " + std::to_string(actual) + " bytes < expected " +
                                    std::to_string(expected) + " for " + std::to_string(h.count) + " rows");
            else if (actual > expected)
                add(shard_path, field + ": " + std::to_string(actual - expected) + " trailing bytes after " +
                                    std::to_string(h.count) + " rows");
        } catch (const sae::Error& e) {
            add(shard_path, field + ": " + e.what());
        } catch (const fs::filesystem_error& e) {
            add(shard_path, field + ": " + e.what());
        }
    }
    return diags;
}

int cmd_validate(const std::string& manifest_path) {
    const auto diags = validate_manifest(manifest_path);
    for (const auto& d : diags) fmt::print("{}\n", d);
    if (!diags.empty()) {
        fmt::print("{} problem(s) in {}\n", diags.size(), manifest_path);
        return kExitInvalid;
    }
    fmt::print("ok: {}\n", manifest_path);
    return kExitOk;
}

// ---------------------------------------------------------------------------
// train

/// Branches of roughly equal width over [0, d), for toy manifests.
std::vector<sae::BranchSlice> quarter_branches(std::uint32_t d) {
    const std::uint32_t parts = std::min<std::uint32_t>(4, d);
    std::vector<sae::BranchSlice> out;
    for (std::uint32_t p = 0; p < parts; ++p)
        out.push_back({"q" + std::to_string(p), p * d / parts, (p + 1) * d / parts});
    return out;
}

Matrix<float> leading_rows(const sae::ActivationShard& shard, std::size_t n) {
    n = std::min(n, shard.count());
    Matrix<float> m(n, shard.d);
    std::copy_n(shard.rows.begin(), n * shard.d, m.storage().begin());
    return m;
}

int cmd_train(RunConfig& rc, const std::string& manifest_path, const std::string& name, bool save_toy_data) {
    rc.train.seed = rc.seed;
    rc.train.validate();
    sae::require(rc.toy != !manifest_path.empty(), sae::ErrorCode::invalid_argument,
                 "train needs exactly one of --manifest or --toy");
    Emitter out(rc);

    std::vector<sae::ShardSource> sources;
    std::uint32_t d = 0;
    std::string layer;
    std::optional<sae::toy::GroundTruthDictionary> dict;
    std::shared_ptr<const sae::ActivationShard> eval_shard;

    if (rc.toy) {
        const auto& t = rc.toy_flags;
        dict = sae::toy::gen_dictionary(t.m, t.d, t.seed);
        const auto samples = sae::toy::gen_samples(*dict, t.samples, t.s_max, t.sigma, sae::derive_seed(t.seed, 1));
        eval_shard = std::make_shared<const sae::ActivationShard>(sae::toy::to_shard(samples, t.d));
        sources.emplace_back(eval_shard);
        d = t.d;
        layer = "toy";
        if (save_toy_data) {
            const std::string shard_name = name + "_toy_shard.bin";
            out.with_sidecar(shard_name, sae::encode_shard(*eval_shard), {{"rows", eval_shard->count()}});
            sae::LayerManifest m{layer, d, "toy-superposition", quarter_branches(d), {shard_name}, {}};
            out.json_file(name + "_toy_manifest.json", sae::to_json(m));
        }
    } else {
        rc.inputs["manifest"] = manifest_path;
        const auto m = sae::load_manifest(manifest_path);
        sources = sae::sources_from_manifest(m);
        d = m.d;
        layer = m.layer_name;
        if (!m.shards.empty()) eval_shard = std::make_shared<const sae::ActivationShard>(sae::read_shard(m.shard_path(0).string()));
    }

    sae::EpochStream<float> stream(sources, d, rc.train.batch_size, rc.seed, rc.buffer_size);
    auto first = stream.next();
    sae::require(first.has_value(), sae::ErrorCode::invalid_argument, "no training rows");
    const auto init = sae::initialize<float>(rc.train, d, first->rows);
    auto log = [](const sae::TrainStats& s) {
        fmt::print("step {} mse {} dead {} ({})\n", s.step, g9(s.mse), s.dead_count, g9(s.dead_fraction));
    };
    const auto result = sae::train_from(init, stream, rc.train, log, std::move(first));

    json metrics{{"final_stats", sae::to_json(result.final_stats)}};
    if (eval_shard) {
        const auto eval = leading_rows(*eval_shard, 8192);
        const double mse0 = sae::batch_mse(init, eval), mse1 = sae::batch_mse(result.params, eval);
        metrics["eval_rows"] = eval.rows();
        metrics["initial_mse"] = mse0;
        metrics["final_mse"] = mse1;
        fmt::print("eval mse initial {} final {} ratio {}\n", g9(mse0), g9(mse1), g9(mse0 > 0 ? mse1 / mse0 : 0.0));
    }
    if (dict) {
        const double rec = sae::toy::recovery_score(result.params, *dict);
        metrics["recovery"] = rec;
        fmt::print("recovery {}\n", g9(rec));
    }
    fmt::print("dead latents {} of {}\n", result.final_stats.dead_count, result.params.l);

    json history = json::array();
    for (const auto& s : result.history) history.push_back(sae::to_json(s));
    const std::string ckpt = name + ".ckpt";
    out.with_sidecar(ckpt, sae::encode_checkpoint(result.params),
                     {{"layer_name", layer},
                      {"d", result.params.d},
                      {"l", result.params.l},
                      {"k", result.params.k},
                      {"tied", result.params.tied},
                      {"metrics", metrics},
                      {"history", history}});
    out.finish();
    fmt::print("wrote {}\n", (fs::path(rc.out_dir) / ckpt).string());
    return kExitOk;
}

// ---------------------------------------------------------------------------
// analyze

std::string histogram_svg(const sae::branch::BranchFractionReport& r) {
    const double w = 480, h = 240, pad = 30;
    const auto& counts = r.histogram.counts;
    const auto peak = std::max<std::uint64_t>(1, *std::max_element(counts.begin(), counts.end()));
    const double bar = (w - 2 * pad) / static_cast<double>(counts.size());
    std::string s = fmt::format("<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{}\" height=\"{}\">\n", w, h);
    s += fmt::format("<text x=\"{}\" y=\"18\" font-size=\"12\">{} {} branch fraction</text>\n", pad, r.layer_name, r.branch);
    for (std::size_t b = 0; b < counts.size(); ++b) {
        const double bh = (h - 2 * pad) * static_cast<double>(counts[b]) / static_cast<double>(peak);
        s += fmt::format("<rect x=\"{}\" y=\"{}\" width=\"{}\" height=\"{}\" fill=\"#4a78b0\"/>\n",
                         g9(pad + bar * static_cast<double>(b)), g9(h - pad - bh), g9(bar * 0.9), g9(bh));
    }
    s += fmt::format("<text x=\"{}\" y=\"{}\" font-size=\"10\">0</text>\n", pad, h - 10);
    s += fmt::format("<text x=\"{}\" y=\"{}\" font-size=\"10\">1</text>\n", w - pad, h - 10);
    return s + "</svg>\n";
}

const sae::BranchSlice& branch_or_throw(const sae::LayerManifest& m, const std::string& name) {
    const auto* b = m.find_branch(name);
    if (!b)
        throw sae::Error(sae::ErrorCode::invalid_argument,
                         "unknown branch '" + name + "' (available: " + m.branch_names() + ")");
    return *b;
}

int cmd_analyze(RunConfig& rc, const std::string& ckpt_path, const std::string& manifest_path, bool svg) {
    rc.inputs = {{"checkpoint", ckpt_path}, {"manifest", manifest_path}};
    const auto params = sae::read_checkpoint(ckpt_path);
    const auto manifest = sae::load_manifest(manifest_path);
    sae::require(params.d == manifest.d, sae::ErrorCode::dimension_mismatch,
                 "checkpoint d=" + std::to_string(params.d) + " but manifest d=" + std::to_string(manifest.d));
    sae::require(rc.bins >= 1, sae::ErrorCode::invalid_argument, "--bins must be >= 1");
    std::vector<sae::BranchSlice> selected;
    if (rc.branch.empty())
        selected = manifest.branches;
    else
        selected.push_back(branch_or_throw(manifest, rc.branch));

    Emitter out(rc);
    const auto& layer = manifest.layer_name;
    for (const auto& slice : selected) {
        const auto report = sae::branch::branch_histogram(params, slice, rc.bins, layer);
        const auto token = file_token(slice.name);
        std::string csv = "feature_id,branch,fraction\n";
        std::size_t live = 0;
        for (std::size_t i = 0; i < report.fractions.size(); ++i) {
            if (!report.fractions[i]) continue;
            ++live;
            csv += sae::feature_name(layer, i) + "," + slice.name + "," + g9(*report.fractions[i]) + "\n";
        }
        out.with_sidecar("analyze_" + token + ".csv", csv, {{"layer_name", layer}, {"branch", slice.name}});

        json specialized = json::array();
        for (const auto& f : report.top_features)
            if (f.fraction >= rc.threshold) specialized.push_back({{"feature", sae::feature_name(layer, f.feature)}, {"fraction", f.fraction}});
        out.json_file("analyze_" + token + ".json",
                      {{"layer_name", layer},
                       {"branch", slice.name},
                       {"slice", {slice.start, slice.end}},
                       {"live_features", live},
                       {"dead_features", report.fractions.size() - live},
                       {"histogram", {{"edges", report.histogram.edges}, {"counts", report.histogram.counts}}},
                       {"threshold", rc.threshold},
                       {"specialized", specialized}});
        if (svg) out.with_sidecar("analyze_" + token + ".svg", histogram_svg(report), {{"branch", slice.name}});
        fmt::print("branch {}: {} live features, {} with fraction >= {}\n", slice.name, live, specialized.size(),
                   g9(rc.threshold));
    }

    int status = kExitOk;
    if (rc.branch.empty()) {
        const double residual = sae::branch::max_partition_residual(params, manifest.branches);
        const bool ok = residual <= 1e-6;
        fmt::print("partition check: max |sum of squared fractions - 1| = {} ({})\n", fmt::format("{:.3g}", residual),
                   ok ? "ok" : "FAIL");
        if (!ok) status = kExitInvalid;
    }
    out.finish();
    return status;
}

// ---------------------------------------------------------------------------
// circuits

int cmd_circuits(RunConfig& rc, const std::string& src_path, const std::string& dst_path, const std::string& weights_path) {
    rc.inputs = {{"source_checkpoint", src_path}, {"dest_checkpoint", dst_path}, {"weights", weights_path}};
    const auto src = sae::read_checkpoint(src_path);
    const auto dst = sae::read_checkpoint(dst_path);
    const auto w = sae::circuits::read_weights(weights_path);
    std::size_t m = 0;
    if (rc.top == "all") {
        m = std::size_t{src.l} * dst.l;
    } else {
        try {
            std::size_t used = 0;
            m = std::stoull(rc.top, &used);
            sae::require(used == rc.top.size() && m >= 1, sae::ErrorCode::invalid_argument, "");
        } catch (const std::exception&) {
            throw sae::Error(sae::ErrorCode::invalid_argument, "--top must be a positive integer or 'all', got '" + rc.top + "'");
        }
    }
    const auto edges = sae::circuits::top_edges(src, w, dst, m);
    const std::string src_layer = w.source_layer.empty() ? "src" : w.source_layer;
    const std::string dst_layer = w.dest_layer.empty() ? "dst" : w.dest_layer;
    std::string csv = "src_feature,dst_feature,weight\n";
    for (const auto& e : edges)
        csv += sae::feature_name(src_layer, e.src_feature) + "," + sae::feature_name(dst_layer, e.dst_feature) + "," +
               g9(e.weight) + "\n";
    Emitter out(rc);
    out.with_sidecar("circuits.csv", csv,
                     {{"source_layer", src_layer}, {"dest_layer", dst_layer}, {"edges", edges.size()}});
    out.finish();
    fmt::print("{} edges between {} (l={}) and {} (l={})\n", edges.size(), src_layer, src.l, dst_layer, dst.l);
    for (std::size_t e = 0; e < std::min<std::size_t>(edges.size(), 5); ++e)
        fmt::print("  {} -> {}  {}\n", sae::feature_name(src_layer, edges[e].src_feature),
                   sae::feature_name(dst_layer, edges[e].dst_feature), g9(edges[e].weight));
    return kExitOk;
}

// ---------------------------------------------------------------------------
// embed

std::string scatter_svg(const Matrix<double>& coords, const std::vector<std::optional<double>>& color) {
    const double size = 480, pad = 20;
    double lo = 0, hi = 0;
    for (double v : coords.storage()) {
        lo = std::min(lo, v);
        hi = std::max(hi, v);
    }
    const double span = hi > lo ? hi - lo : 1.0;
    auto px = [&](double v) { return pad + (size - 2 * pad) * (v - lo) / span; };
    std::string s = fmt::format("<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{}\" height=\"{}\">\n", size, size);
    for (std::size_t i = 0; i < coords.rows(); ++i) {
        std::string fill = "#888888";
        if (color[i]) {
            const int r = static_cast<int>(std::lround(255 * *color[i]));
            fill = fmt::format("#{:02x}40{:02x}", r, 255 - r);
        }
        s += fmt::format("<circle cx=\"{}\" cy=\"{}\" r=\"3\" fill=\"{}\"/>\n", g9(px(coords(i, 0))),
                         g9(size - px(coords(i, 1))), fill);
    }
    return s + "</svg>\n";
}

std::string layer_from_sidecar(const std::string& ckpt_path) {
    const auto side = ckpt_path + ".json";
    if (!fs::exists(side)) return {};
    return sae::read_json_file(side).value("layer_name", "");
}

int cmd_embed(RunConfig& rc, const std::string& ckpt_path, const std::string& manifest_path, std::string layer, bool svg) {
    rc.inputs = {{"checkpoint", ckpt_path}};
    rc.layout.seed = rc.seed;
    const auto params = sae::read_checkpoint(ckpt_path);
    const auto feats = params.features();

    std::optional<sae::BranchSlice> slice;
    if (!manifest_path.empty()) {
        rc.inputs["manifest"] = manifest_path;
        const auto manifest = sae::load_manifest(manifest_path);
        sae::require(params.d == manifest.d, sae::ErrorCode::dimension_mismatch,
                     "checkpoint d=" + std::to_string(params.d) + " but manifest d=" + std::to_string(manifest.d));
        if (layer.empty()) layer = manifest.layer_name;
        if (!rc.branch.empty()) slice = branch_or_throw(manifest, rc.branch);
    } else {
        sae::require(rc.branch.empty(), sae::ErrorCode::invalid_argument, "--branch needs --manifest");
    }
    if (layer.empty()) layer = layer_from_sidecar(ckpt_path);
    if (layer.empty()) layer = "sae";

    // Zero decoder rows have no direction and are left out.
    std::vector<std::uint32_t> ids;
    std::vector<std::optional<double>> fraction;
    for (std::uint32_t i = 0; i < params.l; ++i) {
        if (sae::l2_norm(feats.row(i)) == 0.0) continue;
        std::optional<double> f;
        if (slice) {
            f = sae::branch::branch_fraction(feats.row(i), *slice);
            if (*f < rc.threshold) continue;
        }
        ids.push_back(i);
        fraction.push_back(f);
    }
    if (ids.size() < 2)
        throw sae::Error(sae::ErrorCode::invalid_argument,
                         slice ? fmt::format("{} feature(s) with {} fraction >= {}; need at least 2 to embed", ids.size(),
                                             slice->name, g9(rc.threshold))
                               : fmt::format("{} live feature(s); need at least 2 to embed", ids.size()));

    Matrix<float> vectors(ids.size(), params.d);
    for (std::size_t r = 0; r < ids.size(); ++r) std::ranges::copy(feats.row(ids[r]), vectors.row(r).begin());
    const auto n = static_cast<std::uint32_t>(ids.size());
    const auto neighbors = std::min(rc.layout.neighbors, n - 1);
    const auto knn = sae::embed::knn_graph(vectors, neighbors);
    auto emb = sae::embed::layout(sae::embed::fuzzy_weights(knn.graph, knn.distances), vectors, rc.layout);
    const auto tk = rc.trust_k;
    if (tk >= 1 && tk < n && 2.0 * n - 3.0 * tk - 1.0 > 0.0)
        emb.trustworthiness = sae::embed::trustworthiness(vectors, emb.coords, tk, sae::embed::Metric::cosine);

    std::string csv = slice ? "feature_id,x,y,fraction\n" : "feature_id,x,y\n";
    for (std::size_t r = 0; r < ids.size(); ++r) {
        csv += sae::feature_name(layer, ids[r]) + "," + g9(emb.coords(r, 0)) + "," + g9(emb.coords(r, 1));
        if (slice) csv += "," + g9(*fraction[r]);
        csv += "\n";
    }
    Emitter out(rc);
    const json trust = emb.trustworthiness ? json(*emb.trustworthiness) : json();
    out.with_sidecar("embed.csv", csv,
                     {{"layer_name", layer}, {"points", n}, {"neighbors_used", neighbors}, {"trustworthiness", trust}});
    if (svg) out.with_sidecar("embed.svg", scatter_svg(emb.coords, fraction), {{"layer_name", layer}});
    out.finish();
    fmt::print("embedded {} features of {} (neighbors {})\n", n, layer, neighbors);
    if (emb.trustworthiness)
        fmt::print("trustworthiness(k={}) = {}\n", tk, g9(*emb.trustworthiness));
    else
        fmt::print("trustworthiness(k={}) undefined for {} points\n", tk, n);
    return kExitOk;
}

// ---------------------------------------------------------------------------
// examples

int cmd_examples(RunConfig& rc, const std::string& ckpt_path, const std::string& manifest_path) {
    rc.inputs = {{"checkpoint", ckpt_path}, {"manifest", manifest_path}};
    const auto params = sae::read_checkpoint(ckpt_path);
    const auto manifest = sae::load_manifest(manifest_path);
    std::vector<sae::ActivationShard> shards;
    for (std::size_t i = 0; i < manifest.shards.size(); ++i) shards.push_back(sae::read_shard(manifest.shard_path(i).string()));
    const auto acts = sae::exemplars::feature_activations(params, shards, rc.feature);
    const auto report = sae::exemplars::bucket_sample(acts, rc.buckets, rc.per_bucket, rc.seed, rc.feature);

    std::map<std::uint64_t, std::size_t> bucket_of;
    for (std::size_t b = 0; b < report.buckets.size(); ++b)
        for (const auto& m : report.buckets[b].members) bucket_of[m.image_id] = b;
    std::string csv = "image_id,activation,position_id,bucket\n";
    for (const auto& a : report.activations) {
        const auto it = bucket_of.find(a.image_id);
        csv += fmt::format("{},{},{},{}\n", a.image_id, g9(a.activation), a.position_id,
                           it == bucket_of.end() ? "" : std::to_string(it->second));
    }
    const auto stem = "examples_" + std::to_string(rc.feature);
    Emitter out(rc);
    auto body = sae::exemplars::to_json(report, manifest.layer_name);
    body["layer_name"] = manifest.layer_name;
    out.json_file(stem + ".json", body);
    out.with_sidecar(stem + ".csv", csv, {{"feature", sae::feature_name(manifest.layer_name, rc.feature)}});
    out.finish();

    fmt::print("{}: {} images, {} active\n", sae::feature_name(manifest.layer_name, rc.feature), acts.size(),
               bucket_of.size());
    for (const auto& b : report.buckets) {
        std::string ids;
        for (const auto& s : b.samples) ids += (ids.empty() ? "" : " ") + std::to_string(s.image_id);
        fmt::print("  ({}, {}]%: {} members; samples [{}]\n", g9(b.percentile_lo), g9(b.percentile_hi), b.members.size(), ids);
    }
    return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"TopK sparse autoencoder toolkit"};
    app.require_subcommand(1);
    RunConfig rc;
    rc.out_dir = default_out_dir();

    auto out_flag = [&](CLI::App* sub) {
        sub->add_option("--out", rc.out_dir, "Output directory (default $SAE_OUT_DIR or .)");
    };
    auto seed_flag = [&](CLI::App* sub) { sub->add_option("--seed", rc.seed, "Seed for all randomness")->capture_default_str(); };

    std::string manifest, ckpt, ckpt2, weights, name = "sae", layer;
    bool save_toy = false, untied = false, svg = false;

    auto* validate = app.add_subcommand("validate", "Check a layer manifest and its shards");
    validate->add_option("manifest", manifest, "Manifest JSON")->required();

    auto* train = app.add_subcommand("train", "Train a TopK SAE on manifest shards or a toy task");
    train->add_option("--manifest", manifest, "Layer manifest to train on");
    train->add_flag("--toy", rc.toy, "Train on synthetic superposition data");
    train->add_option("--k", rc.train.k, "Active latents per input")->capture_default_str();
    train->add_option("--expansion", rc.train.expansion_factor, "Latent width / input width")->capture_default_str();
    train->add_option("--lr", rc.train.learning_rate, "Adam learning rate")->capture_default_str();
    train->add_option("--batch", rc.train.batch_size, "Batch size")->capture_default_str();
    train->add_option("--steps", rc.train.steps, "Adam steps")->capture_default_str();
    train->add_option("--dead-window", rc.train.dead_window, "Examples without selection before a latent counts as dead")
        ->capture_default_str();
    train->add_option("--log-every", rc.train.log_every, "Steps between log lines")->capture_default_str();
    train->add_option("--buffer", rc.buffer_size, "Shuffle buffer rows")->capture_default_str();
    train->add_flag("--untied", untied, "Learn a separate decoder matrix");
    train->add_option("--toy-d", rc.toy_flags.d, "Toy input width")->capture_default_str();
    train->add_option("--toy-m", rc.toy_flags.m, "Toy ground-truth features")->capture_default_str();
    train->add_option("--toy-s-max", rc.toy_flags.s_max, "Toy max active features per sample")->capture_default_str();
    train->add_option("--toy-sigma", rc.toy_flags.sigma, "Toy noise sigma")->capture_default_str();
    train->add_option("--toy-samples", rc.toy_flags.samples, "Toy sample count")->capture_default_str();
    train->add_option("--toy-seed", rc.toy_flags.seed, "Toy data seed")->capture_default_str();
    train->add_flag("--save-toy-data", save_toy, "Also write the toy shard and manifest");
    train->add_option("--name", name, "Checkpoint file stem")->capture_default_str();
    seed_flag(train);
    out_flag(train);

    auto* analyze = app.add_subcommand("analyze", "Branch-fraction histograms per branch");
    analyze->add_option("checkpoint", ckpt, "SAECKPT1 checkpoint")->required();
    analyze->add_option("manifest", manifest, "Layer manifest")->required();
    analyze->add_option("--branch", rc.branch, "Only this branch");
    analyze->add_option("--bins", rc.bins, "Histogram bins")->capture_default_str();
    analyze->add_option("--threshold", rc.threshold, "Fraction listed as specialized")->capture_default_str();
    analyze->add_flag("--svg", svg, "Also write SVG histograms");
    out_flag(analyze);

    auto* circuits = app.add_subcommand("circuits", "Strongest feature-to-feature edges across a layer pair");
    circuits->add_option("source", ckpt, "Source layer checkpoint")->required();
    circuits->add_option("dest", ckpt2, "Destination layer checkpoint")->required();
    circuits->add_option("weights", weights, "SAEWGT1 inter-layer weights")->required();
    circuits->add_option("--top", rc.top, "Edges to keep, or 'all'")->capture_default_str();
    out_flag(circuits);

    auto* embed = app.add_subcommand("embed", "2D neighbor embedding of decoder vectors");
    embed->add_option("checkpoint", ckpt, "SAECKPT1 checkpoint")->required();
    embed->add_option("--manifest", manifest, "Layer manifest, needed for --branch");
    embed->add_option("--branch", rc.branch, "Keep features with this branch's fraction >= --threshold");
    embed->add_option("--threshold", rc.threshold, "Branch fraction cutoff")->capture_default_str();
    embed->add_option("--neighbors", rc.layout.neighbors, "kNN neighbors")->capture_default_str();
    embed->add_option("--min-dist", rc.layout.min_dist, "Minimum embedded distance")->capture_default_str();
    embed->add_option("--epochs", rc.layout.epochs, "Layout epochs")->capture_default_str();
    embed->add_option("--trust-k", rc.trust_k, "Neighborhood size for trustworthiness")->capture_default_str();
    embed->add_option("--layer", layer, "Layer name for feature ids");
    embed->add_flag("--svg", svg, "Also write an SVG scatter");
    seed_flag(embed);
    out_flag(embed);

    auto* examples = app.add_subcommand("examples", "Exemplar images across activation levels for one feature");
    examples->add_option("checkpoint", ckpt, "SAECKPT1 checkpoint")->required();
    examples->add_option("manifest", manifest, "Layer manifest")->required();
    examples->add_option("--feature", rc.feature, "Feature index")->required();
    examples->add_option("--buckets", rc.buckets, "Percentile buckets")->capture_default_str();
    examples->add_option("--per-bucket", rc.per_bucket, "Samples per bucket")->capture_default_str();
    seed_flag(examples);
    out_flag(examples);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? kExitOk : kExitError;
    }

    try {
        rc.train.tied = !untied;
        if (*validate) {
            rc.subcommand = "validate";
            return cmd_validate(manifest);
        }
        if (*train) {
            rc.subcommand = "train";
            return cmd_train(rc, manifest, name, save_toy);
        }
        if (*analyze) {
            rc.subcommand = "analyze";
            return cmd_analyze(rc, ckpt, manifest, svg);
        }
        if (*circuits) {
            rc.subcommand = "circuits";
            return cmd_circuits(rc, ckpt, ckpt2, weights);
        }
        if (*embed) {
            rc.subcommand = "embed";
            return cmd_embed(rc, ckpt, manifest, layer, svg);
        }
        if (*examples) {
            rc.subcommand = "examples";
            return cmd_examples(rc, ckpt, manifest);
        }
    } catch (const std::exception& e) {
        fmt::print(stderr, "error: {}\n", e.what());
        return kExitError;
    }
    return kExitError;
}
