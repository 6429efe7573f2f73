#include <gtest/gtest.h>

#include <cstdio>
#include <regex>

#include <sys/wait.h>

#include "sae/all.hpp"
#include "test_helpers.hpp"

using namespace sae;
using sae::testing::TempDir;

namespace {

struct RunResult {
    int exit_code;
    std::string output;  // stdout and stderr interleaved
};

RunResult run(const std::string& args, const std::string& env = {}) {
    const std::string cmd = env + (env.empty() ? "" : " ") + SAE_CLI_PATH + " " + args + " 2>&1";
    FILE* pipe = ::popen(cmd.c_str(), "r");
    if (!pipe) return {-1, "popen failed"};
    std::string out;
    char buf[4096];
    while (std::size_t n = std::fread(buf, 1, sizeof buf, pipe)) out.append(buf, n);
    const int status = ::pclose(pipe);
    return {WIFEXITED(status) ? WEXITSTATUS(status) : -1, out};
}

std::string read_text(const std::string& path) {
    const auto bytes = io::slurp(path);
    return {bytes.begin(), bytes.end()};
}

std::string fixture(const std::string& rel) { return std::string(SAE_FIXTURE_DIR) + "/" + rel; }

ActivationShard shard_for(std::uint32_t d, std::size_t rows, std::uint64_t seed, std::uint64_t first_image = 0) {
    Rng rng(seed);
    ActivationShard s{d, sae::testing::random_vector<float>(rows * d, rng), {}, {}};
    for (std::size_t r = 0; r < rows; ++r) {
        s.image_ids.push_back(first_image + r / 3);
        s.position_ids.push_back(static_cast<std::uint32_t>(r % 3));
    }
    return s;
}

/// Manifest with two shards and branches a=[0,3), b=[3,d).
std::string write_dataset(const TempDir& dir, std::uint32_t d = 8) {
    write_shard(shard_for(d, 60, 1, 0), dir.file("s0.bin"));
    write_shard(shard_for(d, 45, 2, 100), dir.file("s1.bin"));
    LayerManifest m{"mixed4a", d, "test", {{"a", 0, 3}, {"b", 3, d}}, {"s0.bin", "s1.bin"}, {}};
    save_manifest(m, dir.file("manifest.json"));
    return dir.file("manifest.json");
}

SaeParams<float> params_with_features(const Matrix<float>& feats, std::uint32_t k = 2) {
    SaeParams<float> p(static_cast<std::uint32_t>(feats.cols()), static_cast<std::uint32_t>(feats.rows()), k, true);
    p.enc_weight = feats;
    return p;
}

std::vector<std::string> lines(const std::string& text) {
    std::vector<std::string> out;
    std::istringstream in(text);
    for (std::string line; std::getline(in, line);) out.push_back(line);
    return out;
}

}  // namespace

// ---------------------------------------------------------------------------

TEST(CliUsage, HelpAndUnknownSubcommand) {
    EXPECT_EQ(run("--help").exit_code, 0);
    EXPECT_EQ(run("").exit_code, 2);
    EXPECT_EQ(run("frobnicate").exit_code, 2);
}

TEST(CliValidate, WellFormedIsClean) {
    TempDir dir("cli_validate_ok");
    const auto r = run("validate " + write_dataset(dir));
    EXPECT_EQ(r.exit_code, 0) << r.output;
    EXPECT_EQ(lines(r.output).size(), 1u) << r.output;
}

TEST(CliValidate, OverlappingSlicesNamed) {
    TempDir dir("cli_validate_overlap");
    write_dataset(dir);
    auto j = read_json_file(dir.file("manifest.json"));
    j["branches"][1]["start"] = 2;
    io::write_file(dir.file("manifest.json"), j.dump());
    const auto r = run("validate " + dir.file("manifest.json"));
    EXPECT_EQ(r.exit_code, 1);
    EXPECT_NE(r.output.find("branches[1] 'b': overlaps"), std::string::npos) << r.output;
}

TEST(CliValidate, ShardWidthMismatchNamed) {
    TempDir dir("cli_validate_width");
    write_dataset(dir);
    write_shard(shard_for(5, 4, 3), dir.file("s1.bin"));
    const auto r = run("validate " + dir.file("manifest.json"));
    EXPECT_EQ(r.exit_code, 1);
    EXPECT_NE(r.output.find("s1.bin: shards[1].d: shard width 5 != manifest d 8"), std::string::npos) << r.output;
}

TEST(CliValidate, CorruptShardsAndSchemaListed) {
    TempDir dir("cli_validate_corrupt");
    write_dataset(dir);
    auto bytes = io::slurp(dir.file("s0.bin"));
    io::write_file(dir.file("s0.bin"), std::string(bytes.begin(), bytes.end() - 7));
    bytes = io::slurp(dir.file("s1.bin"));
    bytes[0] = 'X';
    io::write_file(dir.file("s1.bin"), std::string(bytes.begin(), bytes.end()));
    auto r = run("validate " + dir.file("manifest.json"));
    EXPECT_EQ(r.exit_code, 1);
    EXPECT_NE(r.output.find("shards[0]: truncated"), std::string::npos) << r.output;
    EXPECT_NE(r.output.find("shards[1]: bad_magic"), std::string::npos) << r.output;

    io::write_file(dir.file("bad.json"), R"({"layer_name": 3, "d": 8, "branches": [], "shards": []})");
    r = run("validate " + dir.file("bad.json"));
    EXPECT_EQ(r.exit_code, 1);
    EXPECT_NE(r.output.find("layer_name: expected string"), std::string::npos) << r.output;
    EXPECT_NE(r.output.find("model_tag: missing"), std::string::npos) << r.output;
}

// ---------------------------------------------------------------------------

TEST(CliTrain, ZeroStepsWritesInitialization) {
    TempDir dir("cli_train0");
    const auto manifest = write_dataset(dir);
    const auto r = run("train --manifest " + manifest + " --steps 0 --k 3 --expansion 2 --batch 16 --buffer 32 --seed 5 --out " +
                       dir.file("out"));
    ASSERT_EQ(r.exit_code, 0) << r.output;

    TrainConfig c;
    c.k = 3;
    c.expansion_factor = 2;
    c.batch_size = 16;
    c.seed = 5;
    EpochStream<float> stream(sources_from_manifest(load_manifest(manifest)), 8, 16, 5, 32);
    const auto init = initialize<float>(c, 8, stream.next()->rows);
    const auto expected = encode_checkpoint(init);
    EXPECT_EQ(io::slurp(dir.file("out/sae.ckpt")), std::vector<unsigned char>(expected.begin(), expected.end()));
}

TEST(CliTrain, SameFlagsSameBytes) {
    TempDir dir("cli_train_det");
    const auto manifest = write_dataset(dir);
    const std::string args =
        "train --manifest " + manifest + " --steps 30 --k 2 --expansion 2 --batch 8 --untied --seed 3 --out " + dir.file("out");
    ASSERT_EQ(run(args).exit_code, 0);
    const auto ckpt = io::slurp(dir.file("out/sae.ckpt"));
    const auto side = read_text(dir.file("out/sae.ckpt.json"));
    ASSERT_EQ(run(args).exit_code, 0);
    EXPECT_EQ(io::slurp(dir.file("out/sae.ckpt")), ckpt);
    EXPECT_EQ(read_text(dir.file("out/sae.ckpt.json")), side);

    const auto j = nlohmann::json::parse(side);
    EXPECT_EQ(j.at("run_config").at("train").at("k"), 2);
    EXPECT_EQ(j.at("run_config").at("train").at("tied"), false);
    EXPECT_EQ(j.at("layer_name"), "mixed4a");

    ASSERT_EQ(run("train --manifest " + manifest +
                  " --steps 30 --k 2 --expansion 2 --batch 8 --untied --seed 4 --out " + dir.file("out"))
                  .exit_code,
              0);
    EXPECT_NE(io::slurp(dir.file("out/sae.ckpt")), ckpt);
}

TEST(CliTrain, DefaultsAreK32Expansion16) {
    TempDir dir("cli_train_defaults");
    const auto manifest = write_dataset(dir);
    ASSERT_EQ(run("train --manifest " + manifest + " --steps 0 --out " + dir.file("out")).exit_code, 0);
    const auto p = read_checkpoint(dir.file("out/sae.ckpt"));
    EXPECT_EQ(p.k, 32u);
    EXPECT_EQ(p.l, 16u * 8);
    EXPECT_TRUE(p.tied);
}

TEST(CliTrain, ToyReferenceRecovers) {
    TempDir dir("cli_train_toy");
    const auto r = run("train --toy --k 4 --expansion 2 --batch 128 --steps 8000 --log-every 4000 --out " + dir.file("out"));
    ASSERT_EQ(r.exit_code, 0) << r.output;
    std::smatch m;
    ASSERT_TRUE(std::regex_search(r.output, m, std::regex("recovery ([0-9.eE+-]+)"))) << r.output;
    EXPECT_GE(std::stod(m[1]), 0.9);
}

TEST(CliTrain, ToyDataPassesValidate) {
    TempDir dir("cli_train_toydata");
    ASSERT_EQ(run("train --toy --toy-samples 500 --k 4 --expansion 2 --batch 32 --steps 5 --save-toy-data --out " +
                  dir.file("out"))
                  .exit_code,
              0);
    const auto r = run("validate " + dir.file("out/sae_toy_manifest.json"));
    EXPECT_EQ(r.exit_code, 0) << r.output;
}

TEST(CliTrain, BadFlagsAreRuntimeErrors) {
    TempDir dir("cli_train_bad");
    const auto manifest = write_dataset(dir);
    EXPECT_EQ(run("train --out " + dir.file("o")).exit_code, 2);
    EXPECT_EQ(run("train --toy --manifest " + manifest + " --out " + dir.file("o")).exit_code, 2);
    EXPECT_EQ(run("train --toy --k 0 --out " + dir.file("o")).exit_code, 2);
    EXPECT_EQ(run("train --manifest " + dir.file("missing.json") + " --out " + dir.file("o")).exit_code, 2);
}

TEST(CliTrain, OutputDirectoryFromEnvironment) {
    TempDir dir("cli_env");
    const auto manifest = write_dataset(dir);
    ASSERT_EQ(run("train --manifest " + manifest + " --steps 0 --k 2 --expansion 1", "SAE_OUT_DIR=" + dir.file("env_out"))
                  .exit_code,
              0);
    EXPECT_TRUE(std::filesystem::exists(dir.file("env_out/sae.ckpt")));
}

// ---------------------------------------------------------------------------

TEST(CliAnalyze, FixtureMatchesBruteForceCsv) {
    TempDir dir("cli_analyze");
    const auto r = run("analyze " + fixture("analyze/fixture.ckpt") + " " + fixture("analyze/manifest.json") +
                       " --bins 5 --svg --out " + dir.path().string());
    ASSERT_EQ(r.exit_code, 0) << r.output;
    for (const char* b : {"1x1", "3x3", "5x5", "pool_proj"}) {
        EXPECT_EQ(read_text(dir.file(std::string("analyze_") + b + ".csv")),
                  read_text(fixture(std::string("analyze/expected_analyze_") + b + ".csv")))
            << b;
        EXPECT_TRUE(std::filesystem::exists(dir.file(std::string("analyze_") + b + ".csv.json")));
        EXPECT_TRUE(std::filesystem::exists(dir.file(std::string("analyze_") + b + ".svg")));
    }
    EXPECT_NE(r.output.find("partition check: max |sum of squared fractions - 1| ="), std::string::npos);
    EXPECT_NE(r.output.find("(ok)"), std::string::npos);

    const auto report = read_json_file(dir.file("analyze_5x5.json"));
    EXPECT_EQ(report.at("dead_features"), 1);
    std::uint64_t total = 0;
    for (const auto& c : report.at("histogram").at("counts")) total += c.get<std::uint64_t>();
    EXPECT_EQ(total, 19u);
    EXPECT_EQ(report.at("run_config").at("analysis").at("bins"), 5);
}

TEST(CliAnalyze, SingleBranchAndUnknownBranch) {
    TempDir dir("cli_analyze_branch");
    const std::string base = "analyze " + fixture("analyze/fixture.ckpt") + " " + fixture("analyze/manifest.json");
    auto r = run(base + " --branch 3x3 --out " + dir.path().string());
    ASSERT_EQ(r.exit_code, 0) << r.output;
    EXPECT_TRUE(std::filesystem::exists(dir.file("analyze_3x3.csv")));
    EXPECT_FALSE(std::filesystem::exists(dir.file("analyze_1x1.csv")));

    r = run(base + " --branch bogus --out " + dir.path().string());
    EXPECT_EQ(r.exit_code, 2);
    EXPECT_NE(r.output.find("unknown branch 'bogus' (available: 1x1, 3x3, 5x5, pool_proj)"), std::string::npos)
        << r.output;
}

// ---------------------------------------------------------------------------

TEST(CliCircuits, IdentityFixtureGivesDiagonal) {
    TempDir dir("cli_circuits_id");
    Matrix<float> eye(3, 3);
    for (int i = 0; i < 3; ++i) eye(i, i) = 1;
    write_checkpoint(params_with_features(eye, 1), dir.file("a.ckpt"));
    circuits::InterLayerMap w{3, 3, Matrix<float>(3, 3), "mixed4b", "mixed4c"};
    w.matrix(0, 0) = 2;
    w.matrix(1, 1) = -5;
    w.matrix(2, 2) = 1;
    circuits::write_weights(w, dir.file("w.bin"));
    const auto r = run("circuits " + dir.file("a.ckpt") + " " + dir.file("a.ckpt") + " " + dir.file("w.bin") +
                       " --top 3 --out " + dir.path().string());
    ASSERT_EQ(r.exit_code, 0) << r.output;
    EXPECT_EQ(read_text(dir.file("circuits.csv")),
              "src_feature,dst_feature,weight\n"
              "mixed4b/f/1,mixed4c/f/1,-5\n"
              "mixed4b/f/0,mixed4c/f/0,2\n"
              "mixed4b/f/2,mixed4c/f/2,1\n");
}

TEST(CliCircuits, AllEdgesMatchOracle) {
    TempDir dir("cli_circuits_all");
    Rng rng(3);
    const auto src = params_with_features(sae::testing::random_matrix<float>(5, 4, rng));
    const auto dst = params_with_features(sae::testing::random_matrix<float>(6, 3, rng));
    write_checkpoint(src, dir.file("src.ckpt"));
    write_checkpoint(dst, dir.file("dst.ckpt"));
    circuits::InterLayerMap w{4, 3, sae::testing::random_matrix<float>(4, 3, rng), "a", "b"};
    circuits::write_weights(w, dir.file("w.bin"));
    const auto r = run("circuits " + dir.file("src.ckpt") + " " + dir.file("dst.ckpt") + " " + dir.file("w.bin") +
                       " --top all --out " + dir.path().string());
    ASSERT_EQ(r.exit_code, 0) << r.output;
    const auto got = lines(read_text(dir.file("circuits.csv")));
    const auto edges = circuits::top_edges(src, w, dst, 30);
    ASSERT_EQ(got.size(), 31u);
    for (std::size_t e = 0; e < edges.size(); ++e) {
        const auto prefix = feature_name("a", edges[e].src_feature) + "," + feature_name("b", edges[e].dst_feature) + ",";
        EXPECT_EQ(got[e + 1].rfind(prefix, 0), 0u) << got[e + 1];
        EXPECT_NEAR(std::stod(got[e + 1].substr(prefix.size())), edges[e].weight, 1e-7 * (1 + std::abs(edges[e].weight)));
    }
}

TEST(CliCircuits, DimensionMismatchNamesAllDims) {
    TempDir dir("cli_circuits_dims");
    Rng rng(4);
    write_checkpoint(params_with_features(sae::testing::random_matrix<float>(3, 4, rng)), dir.file("src.ckpt"));
    write_checkpoint(params_with_features(sae::testing::random_matrix<float>(3, 6, rng)), dir.file("dst.ckpt"));
    circuits::write_weights({4, 5, Matrix<float>(4, 5), "a", "b"}, dir.file("w.bin"));
    const auto r = run("circuits " + dir.file("src.ckpt") + " " + dir.file("dst.ckpt") + " " + dir.file("w.bin") +
                       " --out " + dir.path().string());
    EXPECT_EQ(r.exit_code, 2);
    for (const char* s : {"d=4", "4x5", "d=6"}) EXPECT_NE(r.output.find(s), std::string::npos) << s << " in " << r.output;
    EXPECT_EQ(run("circuits " + dir.file("src.ckpt") + " " + dir.file("src.ckpt") + " " + dir.file("w.bin") +
                  " --top zero --out " + dir.path().string())
                  .exit_code,
              2);
}

// ---------------------------------------------------------------------------

TEST(CliEmbed, ZeroEpochsWritesPcaCoords) {
    TempDir dir("cli_embed_pca");
    const auto feats = sae::testing::two_clusters(30, 8, 1);
    write_checkpoint(params_with_features(feats), dir.file("c.ckpt"));
    ASSERT_EQ(run("embed " + dir.file("c.ckpt") + " --epochs 0 --layer mixed4b --out " + dir.path().string()).exit_code, 0);
    const auto pca = embed::pca_init(feats);
    const auto got = lines(read_text(dir.file("embed.csv")));
    ASSERT_EQ(got.size(), 31u);
    EXPECT_EQ(got[0], "feature_id,x,y");
    for (std::size_t i = 0; i < 30; ++i) {
        char want[128];
        std::snprintf(want, sizeof want, "mixed4b/f/%zu,%.9g,%.9g", i, pca(i, 0), pca(i, 1));
        EXPECT_EQ(got[i + 1], want);
    }
}

TEST(CliEmbed, SeedDeterminismAndClusterTrust) {
    TempDir dir("cli_embed_det");
    write_checkpoint(params_with_features(sae::testing::two_clusters(100, 16, 2)), dir.file("c.ckpt"));
    const std::string args = "embed " + dir.file("c.ckpt") + " --seed 9 --out " + dir.path().string();
    const auto r = run(args);
    ASSERT_EQ(r.exit_code, 0) << r.output;
    const auto csv = read_text(dir.file("embed.csv"));
    const auto side = read_text(dir.file("embed.csv.json"));
    ASSERT_EQ(run(args).exit_code, 0);
    EXPECT_EQ(read_text(dir.file("embed.csv")), csv);
    EXPECT_EQ(read_text(dir.file("embed.csv.json")), side);
    const auto trust = nlohmann::json::parse(side).at("trustworthiness").get<double>();
    EXPECT_GE(trust, 0.8);
}

TEST(CliEmbed, BranchFilter) {
    TempDir dir("cli_embed_filter");
    // Features 0..9 live in branch a = [0, 3); 10..19 are spread out.
    Rng rng(5);
    auto feats = sae::testing::random_matrix<float>(20, 8, rng, 0.1, 1.0);
    for (std::size_t i = 0; i < 10; ++i)
        for (std::size_t c = 3; c < 8; ++c) feats(i, c) = 0;
    write_checkpoint(params_with_features(feats), dir.file("c.ckpt"));
    const auto manifest = write_dataset(dir);
    auto r = run("embed " + dir.file("c.ckpt") + " --manifest " + manifest + " --branch a --threshold 0.99 --out " +
                 dir.path().string());
    ASSERT_EQ(r.exit_code, 0) << r.output;
    const auto got = lines(read_text(dir.file("embed.csv")));
    ASSERT_EQ(got.size(), 11u);
    EXPECT_EQ(got[0], "feature_id,x,y,fraction");
    for (std::size_t i = 1; i < got.size(); ++i) EXPECT_EQ(got[i].rfind("mixed4a/f/" + std::to_string(i - 1) + ",", 0), 0u);

    r = run("embed " + dir.file("c.ckpt") + " --manifest " + manifest + " --branch b --threshold 1.01 --out " +
            dir.path().string());
    EXPECT_EQ(r.exit_code, 2);
    EXPECT_NE(r.output.find("0 feature(s)"), std::string::npos) << r.output;
}

// ---------------------------------------------------------------------------

TEST(CliExamples, MatchesLibraryPipelineAndIsDeterministic) {
    TempDir dir("cli_examples");
    const auto manifest = write_dataset(dir);
    Rng rng(6);
    auto p = params_with_features(sae::testing::random_matrix<float>(12, 8, rng), 3);
    write_checkpoint(p, dir.file("c.ckpt"));
    const std::string args = "examples " + dir.file("c.ckpt") + " " + manifest + " --feature 4 --buckets 3 --per-bucket 2 --seed 8 --out " +
                             dir.path().string();
    ASSERT_EQ(run(args).exit_code, 0);
    const auto first_json = read_text(dir.file("examples_4.json"));
    const auto first_csv = read_text(dir.file("examples_4.csv"));
    ASSERT_EQ(run(args).exit_code, 0);
    EXPECT_EQ(read_text(dir.file("examples_4.json")), first_json);
    EXPECT_EQ(read_text(dir.file("examples_4.csv")), first_csv);

    const std::vector<ActivationShard> shards{read_shard(dir.file("s0.bin")), read_shard(dir.file("s1.bin"))};
    const auto rep = exemplars::bucket_sample(exemplars::feature_activations(read_checkpoint(dir.file("c.ckpt")), shards, 4),
                                              3, 2, 8, 4);
    auto want = exemplars::to_json(rep, "mixed4a");
    auto got = nlohmann::json::parse(first_json);
    EXPECT_EQ(got.at("buckets"), want.at("buckets"));
    EXPECT_EQ(got.at("activations"), want.at("activations"));
}

TEST(CliExamples, DeadFeatureAndRangeErrors) {
    TempDir dir("cli_examples_dead");
    const auto manifest = write_dataset(dir);
    Rng rng(7);
    auto p = params_with_features(sae::testing::random_matrix<float>(6, 8, rng), 1);
    p.enc_bias[5] = -100;
    write_checkpoint(p, dir.file("c.ckpt"));
    auto r = run("examples " + dir.file("c.ckpt") + " " + manifest + " --feature 5 --out " + dir.path().string());
    ASSERT_EQ(r.exit_code, 0) << r.output;
    const auto j = read_json_file(dir.file("examples_5.json"));
    for (const auto& b : j.at("buckets")) {
        EXPECT_EQ(b.at("member_count"), 0);
        EXPECT_TRUE(b.at("samples").empty());
    }
    r = run("examples " + dir.file("c.ckpt") + " " + manifest + " --feature 6 --out " + dir.path().string());
    EXPECT_EQ(r.exit_code, 2);
    EXPECT_NE(r.output.find("feature 6 out of range (l=6)"), std::string::npos) << r.output;
}
