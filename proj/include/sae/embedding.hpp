#pragma once

// Deterministic 2D neighbor embedding of decoder vectors: exact cosine kNN
// graph, fuzzy membership weights, PCA initialization and a seeded
// attraction/repulsion layout (low-dimensional kernel 1 / (1 + d^2)).

#include <map>

#include <Eigen/Dense>

#include "sae/common.hpp"

namespace sae::embed {

enum class Metric { euclidean, cosine };

struct GraphEdge {
    std::uint32_t i;
    std::uint32_t j;
    double weight;

    friend bool operator==(const GraphEdge&, const GraphEdge&) = default;
};

struct NeighborGraph {
    std::uint32_t n = 0;
    std::uint32_t k = 0;
    std::vector<GraphEdge> edges;
    bool symmetrized = false;
};

/// kNN graph plus the distance of every edge (aligned with `graph.edges`).
/// Edges are grouped by source point, nearest first.
struct KnnGraph {
    NeighborGraph graph;
    std::vector<double> distances;
};

template <typename T>
std::vector<std::vector<double>> unit_rows(const Matrix<T>& v) {
    std::vector<std::vector<double>> out(v.rows());
    for (std::size_t i = 0; i < v.rows(); ++i) {
        const auto row = v.row(i);
        const double norm = l2_norm(row);
        if (norm == 0.0) throw Error(ErrorCode::invalid_argument, "zero vector at row " + std::to_string(i));
        out[i].resize(row.size());
        for (std::size_t c = 0; c < row.size(); ++c) out[i][c] = static_cast<double>(row[c]) / norm;
    }
    return out;
}

template <typename T>
Matrix<double> distance_matrix(const Matrix<T>& v, Metric metric) {
    const std::size_t n = v.rows();
    Matrix<double> dist(n, n);
    if (metric == Metric::cosine) {
        const auto u = unit_rows(v);
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = i + 1; j < n; ++j) {
                // |u - v|^2 / 2 equals 1 - cos and is exactly 0 for duplicates
                double s = 0.0;
                for (std::size_t c = 0; c < u[i].size(); ++c) {
                    const double diff = u[i][c] - u[j][c];
                    s += diff * diff;
                }
                dist(i, j) = dist(j, i) = 0.5 * s;
            }
    } else {
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = i + 1; j < n; ++j) {
                double s = 0.0;
                for (std::size_t c = 0; c < v.cols(); ++c) {
                    const double diff = static_cast<double>(v(i, c)) - static_cast<double>(v(j, c));
                    s += diff * diff;
                }
                dist(i, j) = dist(j, i) = std::sqrt(s);
            }
    }
    return dist;
}

/// Other points ordered by distance from `i`, equal distances by index.
inline std::vector<std::uint32_t> ranked_neighbors(const Matrix<double>& dist, std::uint32_t i) {
    std::vector<std::uint32_t> order;
    order.reserve(dist.rows() - 1);
    for (std::uint32_t j = 0; j < dist.rows(); ++j)
        if (j != i) order.push_back(j);
    std::stable_sort(order.begin(), order.end(),
                     [&](std::uint32_t a, std::uint32_t b) { return dist(i, a) < dist(i, b); });
    return order;
}

/// Exact k-nearest-neighbor graph under cosine distance.
template <typename T>
KnnGraph knn_graph(const Matrix<T>& vectors, std::uint32_t k) {
    const auto n = static_cast<std::uint32_t>(vectors.rows());
    require(k >= 1 && n > k, ErrorCode::invalid_argument,
            "knn_graph needs n > k >= 1 (n=" + std::to_string(n) + ", k=" + std::to_string(k) + ")");
    const auto dist = distance_matrix(vectors, Metric::cosine);
    KnnGraph out{{n, k, {}, false}, {}};
    for (std::uint32_t i = 0; i < n; ++i) {
        const auto order = ranked_neighbors(dist, i);
        for (std::uint32_t r = 0; r < k; ++r) {
            out.graph.edges.push_back({i, order[r], 1.0});
            out.distances.push_back(dist(i, order[r]));
        }
    }
    return out;
}

struct Smoothing {
    std::vector<double> rho;    // distance to nearest neighbor
    std::vector<double> sigma;  // bandwidth solving the membership-sum equation
};

/// Target of the membership sum for k neighbors. The point itself counts as
/// one of the k + 1 members of its neighborhood, matching the usual fuzzy
/// simplicial set construction.
inline double membership_target(std::uint32_t k) { return std::log2(static_cast<double>(k) + 1.0); }

inline double membership_sum(std::span<const double> d, double rho, double sigma) {
    double s = 0.0;
    for (double x : d) s += std::exp(-std::max(0.0, x - rho) / sigma);
    return s;
}

inline constexpr int kBisectionIterations = 64;
inline constexpr double kMembershipTolerance = 1e-9;

/// Per point: rho = nearest distance, sigma by bisection so that
/// sum_j exp(-max(0, d_ij - rho) / sigma) = log2(k + 1).
inline Smoothing smooth_distances(const NeighborGraph& g, std::span<const double> distances) {
    require(distances.size() == g.edges.size() && g.edges.size() == std::size_t{g.n} * g.k,
            ErrorCode::dimension_mismatch, "distances must align with a kNN graph's edges");
    Smoothing s{std::vector<double>(g.n), std::vector<double>(g.n)};
    const double target = membership_target(g.k);
    for (std::uint32_t i = 0; i < g.n; ++i) {
        const auto d = distances.subspan(std::size_t{i} * g.k, g.k);
        const double rho = *std::min_element(d.begin(), d.end());
        s.rho[i] = rho;
        const double spread = *std::max_element(d.begin(), d.end()) - rho;
        if (spread == 0.0) {
            // Every term is 1 regardless of sigma.
            s.sigma[i] = 1.0;
            continue;
        }
        // The sum increases monotonically from 1 (+ ties at rho) toward k.
        double lo = 0.0, hi = spread;
        int expand = 0;
        while (membership_sum(d, rho, hi) < target) {
            hi *= 2.0;
            if (++expand > kBisectionIterations)
                throw Error(ErrorCode::no_convergence, "cannot bracket sigma for point " + std::to_string(i));
        }
        bool converged = false;
        double mid = hi;
        for (int it = 0; it < kBisectionIterations; ++it) {
            mid = 0.5 * (lo + hi);
            const double val = membership_sum(d, rho, mid);
            if (std::abs(val - target) < kMembershipTolerance) {
                converged = true;
                break;
            }
            (val > target ? hi : lo) = mid;
        }
        if (!converged)
            throw Error(ErrorCode::no_convergence,
                        "sigma bisection did not converge for point " + std::to_string(i) + " after " +
                            std::to_string(kBisectionIterations) + " iterations");
        s.sigma[i] = mid;
    }
    return s;
}

/// Directed memberships exp(-max(0, d - rho_i) / sigma_i), symmetrized with
/// w = a + b - a*b. The result lists (i, j) and (j, i) for every pair.
inline NeighborGraph fuzzy_weights(const NeighborGraph& g, std::span<const double> distances) {
    const auto s = smooth_distances(g, distances);
    std::map<std::pair<std::uint32_t, std::uint32_t>, double> directed;
    for (std::size_t e = 0; e < g.edges.size(); ++e) {
        const auto& edge = g.edges[e];
        const double w = std::exp(-std::max(0.0, distances[e] - s.rho[edge.i]) / s.sigma[edge.i]);
        directed[{edge.i, edge.j}] = w;
    }
    NeighborGraph out{g.n, g.k, {}, true};
    std::map<std::pair<std::uint32_t, std::uint32_t>, double> sym;
    for (const auto& [key, a] : directed) {
        const auto rev = directed.find({key.second, key.first});
        const double b = rev == directed.end() ? 0.0 : rev->second;
        const double hi = std::max(a, b), lo = std::min(a, b);
        const double w = hi + lo * (1.0 - hi);  // a + b - ab, exact when either side is 1
        sym[key] = w;
        sym[{key.second, key.first}] = w;
    }
    for (const auto& [key, w] : sym)
        if (w > 0.0) out.edges.push_back({key.first, key.second, w});
    return out;
}

// ---------------------------------------------------------------------------
// Layout

struct LayoutConfig {
    std::uint32_t neighbors = 15;
    double min_dist = 0.1;
    std::uint32_t epochs = 200;
    std::uint64_t seed = 0;
    std::uint32_t negative_samples = 5;
};

struct Embedding2D {
    Matrix<double> coords;  // n x 2
    LayoutConfig config;
    std::optional<double> trustworthiness;
};

inline constexpr double kInitScale = 10.0;

/// First two principal components of the unit-normalized rows. Each
/// component's largest-magnitude loading is made positive; coordinates are
/// scaled so the largest absolute value is 10.
template <typename T>
Matrix<double> pca_init(const Matrix<T>& vectors) {
    const auto u = unit_rows(vectors);
    const std::size_t n = u.size(), d = vectors.cols();
    Eigen::MatrixXd data(n, d);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t c = 0; c < d; ++c) data(i, c) = u[i][c];
    const Eigen::RowVectorXd mean = data.colwise().mean();
    data.rowwise() -= mean;
    const Eigen::MatrixXd cov = data.transpose() * data / std::max<double>(1.0, static_cast<double>(n));
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> solver(cov);
    Matrix<double> coords(n, 2);
    for (int comp = 0; comp < 2 && comp < static_cast<int>(d); ++comp) {
        Eigen::VectorXd axis = solver.eigenvectors().col(static_cast<Eigen::Index>(d) - 1 - comp);
        Eigen::Index arg = 0;
        for (Eigen::Index c = 1; c < axis.size(); ++c)
            if (std::abs(axis(c)) > std::abs(axis(arg))) arg = c;
        if (axis(arg) < 0) axis = -axis;
        const Eigen::VectorXd proj = data * axis;
        for (std::size_t i = 0; i < n; ++i) coords(i, static_cast<std::size_t>(comp)) = proj(static_cast<Eigen::Index>(i));
    }
    double extent = 0.0;
    for (double v : coords.storage()) extent = std::max(extent, std::abs(v));
    if (extent > 0.0)
        for (double& v : coords.storage()) v *= kInitScale / extent;
    return coords;
}

inline constexpr double kGradientClip = 4.0;

/// Seeded stochastic layout. Each epoch every edge whose turn has come (edges
/// are sampled in proportion to weight) pulls its endpoints together and
/// pushes the head away from `negative_samples` uniformly drawn points.
template <typename T>
Embedding2D layout(const NeighborGraph& graph, const Matrix<T>& vectors, const LayoutConfig& cfg) {
    require(graph.symmetrized, ErrorCode::invalid_argument, "layout needs a symmetrized graph");
    require(graph.n == vectors.rows(), ErrorCode::dimension_mismatch, "graph size differs from vector count");
    Embedding2D emb{pca_init(vectors), cfg, std::nullopt};
    if (cfg.epochs == 0 || graph.edges.empty()) return emb;

    auto& y = emb.coords;
    const double floor = 1e-3 + cfg.min_dist * cfg.min_dist;
    double max_w = 0.0;
    for (const auto& e : graph.edges) max_w = std::max(max_w, e.weight);
    std::vector<double> period(graph.edges.size()), next(graph.edges.size());
    for (std::size_t e = 0; e < graph.edges.size(); ++e) next[e] = period[e] = max_w / graph.edges[e].weight;

    Rng rng(cfg.seed);
    std::uniform_int_distribution<std::uint32_t> pick(0, graph.n - 1);
    auto clip = [](double g) { return std::clamp(g, -kGradientClip, kGradientClip); };

    for (std::uint32_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        const double alpha = 1.0 - static_cast<double>(epoch) / static_cast<double>(cfg.epochs);
        for (std::size_t e = 0; e < graph.edges.size(); ++e) {
            if (next[e] > static_cast<double>(epoch + 1)) continue;
            const auto i = graph.edges[e].i, j = graph.edges[e].j;
            double dx = y(i, 0) - y(j, 0), dy = y(i, 1) - y(j, 1);
            double d2 = dx * dx + dy * dy;
            if (d2 > 0.0) {
                const double coeff = -2.0 / (1.0 + d2);
                const double gx = clip(coeff * dx) * alpha, gy = clip(coeff * dy) * alpha;
                y(i, 0) += gx;
                y(i, 1) += gy;
                y(j, 0) -= gx;
                y(j, 1) -= gy;
            }
            next[e] += period[e];
            for (std::uint32_t s = 0; s < cfg.negative_samples; ++s) {
                const auto other = pick(rng);
                if (other == i) continue;
                dx = y(i, 0) - y(other, 0);
                dy = y(i, 1) - y(other, 1);
                d2 = dx * dx + dy * dy;
                if (d2 > 0.0) {
                    const double coeff = 2.0 / ((floor + d2) * (1.0 + d2));
                    y(i, 0) += clip(coeff * dx) * alpha;
                    y(i, 1) += clip(coeff * dy) * alpha;
                } else {
                    y(i, 0) += kGradientClip * alpha;
                    y(i, 1) += kGradientClip * alpha;
                }
            }
        }
    }
    return emb;
}

/// Standard trustworthiness: 1 - 2 / (n k (2n - 3k - 1)) * sum over points of
/// (rank_high(i, j) - k) for every j in the embedded k-neighborhood of i that
/// is not in its high-dimensional k-neighborhood.
template <typename T>
double trustworthiness(const Matrix<T>& vectors, const Matrix<double>& coords, std::uint32_t k,
                       Metric metric = Metric::euclidean) {
    const auto n = static_cast<std::uint32_t>(vectors.rows());
    require(coords.rows() == n, ErrorCode::dimension_mismatch, "coords and vectors differ in point count");
    require(k >= 1 && k < n, ErrorCode::invalid_argument, "trustworthiness needs 1 <= k < n");
    const double denom = static_cast<double>(n) * k * (2.0 * n - 3.0 * k - 1.0);
    require(denom > 0.0, ErrorCode::invalid_argument, "trustworthiness undefined for k >= (2n - 1) / 3");
    const auto high = distance_matrix(vectors, metric);
    const auto low = distance_matrix(coords, Metric::euclidean);
    double penalty = 0.0;
    std::vector<std::uint32_t> rank(n);
    for (std::uint32_t i = 0; i < n; ++i) {
        const auto high_order = ranked_neighbors(high, i);
        for (std::uint32_t r = 0; r < high_order.size(); ++r) rank[high_order[r]] = r + 1;
        const auto low_order = ranked_neighbors(low, i);
        for (std::uint32_t r = 0; r < k; ++r) {
            const auto j = low_order[r];
            if (rank[j] > k) penalty += static_cast<double>(rank[j]) - k;
        }
    }
    return 1.0 - 2.0 * penalty / denom;
}

}  // namespace sae::embed
