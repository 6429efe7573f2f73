#pragma once

// Weight-based circuit edges between feature dictionaries of adjacent
// layers: weight(n1, n2) = n1 W n2^T, with W the d_src x d_dst effective
// linear map between the two layers' channel spaces.
//
// SAEWGT1 layout, little-endian:
//   "SAEWGT1\0" | u32 d_src | u32 d_dst | f32 matrix[d_src*d_dst] (row-major)

#include "sae/sae.hpp"

namespace sae::circuits {

inline constexpr std::string_view kWeightsMagic{"SAEWGT1\0", 8};

struct InterLayerMap {
    std::uint32_t d_src = 0;
    std::uint32_t d_dst = 0;
    Matrix<float> matrix;  // d_src x d_dst
    std::string source_layer;
    std::string dest_layer;
};

struct CircuitEdge {
    std::uint32_t src_feature;
    std::uint32_t dst_feature;
    double weight;

    friend bool operator==(const CircuitEdge&, const CircuitEdge&) = default;
};

inline void check_map(const InterLayerMap& w) {
    require(w.d_src > 0 && w.d_dst > 0, ErrorCode::dimension_mismatch, "inter-layer map dims must be positive");
    require(w.matrix.rows() == w.d_src && w.matrix.cols() == w.d_dst, ErrorCode::dimension_mismatch,
            "inter-layer matrix shape does not match d_src x d_dst");
    require(all_finite(w.matrix.flat()), ErrorCode::non_finite, "inter-layer matrix has non-finite entries");
}

inline std::string encode_weights(const InterLayerMap& w) {
    check_map(w);
    std::ostringstream os(std::ios::binary);
    os.write(kWeightsMagic.data(), kWeightsMagic.size());
    io::put_le<std::uint32_t>(os, w.d_src);
    io::put_le<std::uint32_t>(os, w.d_dst);
    for (float v : w.matrix.storage()) io::put_f32(os, v);
    return std::move(os).str();
}

inline InterLayerMap decode_weights(std::vector<unsigned char> bytes, const std::string& origin = "<memory>") {
    io::Reader in(std::move(bytes));
    if (in.remaining() < kWeightsMagic.size() || in.bytes(kWeightsMagic.size(), "magic") != kWeightsMagic)
        throw Error(ErrorCode::bad_magic, origin + " is not an SAEWGT1 file");
    InterLayerMap w;
    w.d_src = in.get<std::uint32_t>("d_src");
    w.d_dst = in.get<std::uint32_t>("d_dst");
    w.matrix = Matrix<float>(w.d_src, w.d_dst, in.f32_array(std::uint64_t{w.d_src} * w.d_dst, "matrix"));
    in.expect_end(origin + " payload");
    check_map(w);
    return w;
}

inline std::string sidecar_path(const std::string& path) { return path + ".json"; }

/// Writes the binary file plus a JSON sidecar naming the two layers.
inline void write_weights(const InterLayerMap& w, const std::string& path, const std::string& reduction = "center-tap") {
    io::write_file(path, encode_weights(w));
    nlohmann::json side{{"source_layer", w.source_layer}, {"dest_layer", w.dest_layer},
                        {"d_src", w.d_src},               {"d_dst", w.d_dst},
                        {"reduction", reduction}};
    io::write_file(sidecar_path(path), side.dump(2) + "\n");
}

/// Reads the binary file; layer names come from the sidecar when present.
inline InterLayerMap read_weights(const std::string& path) {
    auto w = decode_weights(io::slurp(path), path);
    if (std::filesystem::exists(sidecar_path(path))) {
        const auto side = read_json_file(sidecar_path(path));
        w.source_layer = side.value("source_layer", "");
        w.dest_layer = side.value("dest_layer", "");
    }
    return w;
}

/// n1 . W . n2
template <typename A, typename B>
double edge_weight(std::span<const A> n1, const InterLayerMap& w, std::span<const B> n2) {
    if (n1.size() != w.d_src || n2.size() != w.d_dst)
        throw Error(ErrorCode::dimension_mismatch, "edge_weight: n1 has " + std::to_string(n1.size()) +
                                                       " entries, W is " + std::to_string(w.d_src) + "x" +
                                                       std::to_string(w.d_dst) + ", n2 has " +
                                                       std::to_string(n2.size()));
    double total = 0.0;
    for (std::size_t i = 0; i < w.d_src; ++i) {
        if (n1[i] == A{0}) continue;
        const auto row = w.matrix.row(i);
        double acc = 0.0;
        for (std::size_t j = 0; j < w.d_dst; ++j) acc += static_cast<double>(row[j]) * static_cast<double>(n2[j]);
        total += static_cast<double>(n1[i]) * acc;
    }
    return total;
}

/// Change of the n2-readout of the next layer (x^T W) when the n1 component
/// of x is removed, computed with two explicit forward passes through the
/// linear map. On linear maps this equals (x . n1) * edge_weight(n1, W, n2).
inline double ablation_oracle(const InterLayerMap& w, std::span<const double> x_src, std::span<const double> n1,
                              std::span<const double> n2) {
    if (x_src.size() != w.d_src || n1.size() != w.d_src || n2.size() != w.d_dst)
        throw Error(ErrorCode::dimension_mismatch, "ablation_oracle: x has " + std::to_string(x_src.size()) +
                                                       ", n1 has " + std::to_string(n1.size()) + ", W is " +
                                                       std::to_string(w.d_src) + "x" + std::to_string(w.d_dst) +
                                                       ", n2 has " + std::to_string(n2.size()));
    auto readout = [&](std::span<const double> x) {
        double s = 0.0;
        for (std::size_t j = 0; j < w.d_dst; ++j) {
            double y = 0.0;
            for (std::size_t i = 0; i < w.d_src; ++i) y += x[i] * static_cast<double>(w.matrix(i, j));
            s += n2[j] * y;
        }
        return s;
    };
    const double coeff = dot(x_src, n1);
    std::vector<double> ablated(x_src.begin(), x_src.end());
    for (std::size_t i = 0; i < ablated.size(); ++i) ablated[i] -= coeff * n1[i];
    return readout(x_src) - readout(std::span<const double>(ablated));
}

/// All l_src x l_dst edge weights between decoder vectors.
template <typename T>
Matrix<double> edge_matrix(const SaeParams<T>& src, const InterLayerMap& w, const SaeParams<T>& dst) {
    if (src.d != w.d_src || dst.d != w.d_dst)
        throw Error(ErrorCode::dimension_mismatch, "source checkpoint d=" + std::to_string(src.d) + ", weights " +
                                                       std::to_string(w.d_src) + "x" + std::to_string(w.d_dst) +
                                                       ", destination checkpoint d=" + std::to_string(dst.d));
    const auto fs = src.features();
    const auto fd = dst.features();
    // projected(i, :) = f_src_i^T W
    Matrix<double> projected(fs.rows(), w.d_dst);
    for (std::size_t i = 0; i < fs.rows(); ++i)
        for (std::size_t a = 0; a < w.d_src; ++a) {
            const double coef = fs(i, a);
            if (coef == 0.0) continue;
            const auto row = w.matrix.row(a);
            for (std::size_t b = 0; b < w.d_dst; ++b) projected(i, b) += coef * static_cast<double>(row[b]);
        }
    Matrix<double> out(fs.rows(), fd.rows());
    for (std::size_t i = 0; i < fs.rows(); ++i)
        for (std::size_t j = 0; j < fd.rows(); ++j) {
            double s = 0.0;
            for (std::size_t b = 0; b < w.d_dst; ++b) s += projected(i, b) * static_cast<double>(fd(j, b));
            out(i, j) = s;
        }
    return out;
}

/// The m strongest edges by |weight|, ties by (src, dst).
template <typename T>
std::vector<CircuitEdge> top_edges(const SaeParams<T>& src, const InterLayerMap& w, const SaeParams<T>& dst,
                                   std::size_t m) {
    require(m >= 1, ErrorCode::invalid_argument, "top_edges: m must be >= 1");
    const auto weights = edge_matrix(src, w, dst);
    std::vector<CircuitEdge> edges;
    edges.reserve(weights.size());
    for (std::uint32_t i = 0; i < weights.rows(); ++i)
        for (std::uint32_t j = 0; j < weights.cols(); ++j) edges.push_back({i, j, weights(i, j)});
    const auto keep = std::min(m, edges.size());
    std::partial_sort(edges.begin(), edges.begin() + static_cast<std::ptrdiff_t>(keep), edges.end(),
                      [](const CircuitEdge& a, const CircuitEdge& b) {
                          const double ma = std::abs(a.weight), mb = std::abs(b.weight);
                          if (ma != mb) return ma > mb;
                          if (a.src_feature != b.src_feature) return a.src_feature < b.src_feature;
                          return a.dst_feature < b.dst_feature;
                      });
    edges.resize(keep);
    return edges;
}

}  // namespace sae::circuits
