#pragma once

// TopK sparse autoencoder:
//   z  = TopK(W_enc (x - b_dec) + b_enc)
//   x' = W_dec z + b_dec
// W_enc is l x d (maps R^d to R^l), W_dec is d x l. In tied mode W_dec is
// W_enc^T and is never stored separately.

#include <concepts>
#include <functional>
#include <limits>
#include <numeric>
#include <optional>
#include <sstream>

#include "sae/activation_store.hpp"
#include "sae/common.hpp"

namespace sae {

template <typename T>
struct SaeParams {
    std::uint32_t d = 0;
    std::uint32_t l = 0;
    std::uint32_t k = 0;
    bool tied = true;
    Matrix<T> enc_weight;      // l x d
    std::vector<T> enc_bias;   // l
    std::vector<T> dec_bias;   // d
    Matrix<T> dec_weight;      // d x l, empty when tied

    SaeParams() = default;
    SaeParams(std::uint32_t d_, std::uint32_t l_, std::uint32_t k_, bool tied_)
        : d(d_), l(l_), k(k_), tied(tied_), enc_weight(l_, d_), enc_bias(l_), dec_bias(d_),
          dec_weight(tied_ ? Matrix<T>() : Matrix<T>(d_, l_)) {
        require(d > 0 && l > 0, ErrorCode::invalid_argument, "d and l must be positive");
        require(k >= 1 && k <= l, ErrorCode::invalid_argument,
                "k must satisfy 1 <= k <= l (k=" + std::to_string(k) + ", l=" + std::to_string(l) + ")");
    }

    /// W_dec(row, latent).
    T decoder(std::size_t row, std::size_t latent) const noexcept {
        return tied ? enc_weight(latent, row) : dec_weight(row, latent);
    }

    /// The full d x l decoder matrix (materialized transpose when tied).
    Matrix<T> decoder_matrix() const { return tied ? enc_weight.transposed() : dec_weight; }

    /// Decoder vectors as rows: l x d, row i is feature i's direction in R^d.
    Matrix<T> features() const { return tied ? enc_weight : dec_weight.transposed(); }

    template <typename U>
    SaeParams<U> cast() const {
        SaeParams<U> out(d, l, k, tied);
        auto conv = [](const auto& src, auto& dst) {
            for (std::size_t i = 0; i < src.size(); ++i) dst[i] = static_cast<U>(src[i]);
        };
        conv(enc_weight.storage(), out.enc_weight.storage());
        conv(enc_bias, out.enc_bias);
        conv(dec_bias, out.dec_bias);
        if (!tied) conv(dec_weight.storage(), out.dec_weight.storage());
        return out;
    }

    friend bool operator==(const SaeParams&, const SaeParams&) = default;
};

// ---------------------------------------------------------------------------
// TopK

/// Indices of the k largest entries by signed value, equal values resolved
/// toward the lower index. Returned in ascending index order.
template <typename T>
std::vector<std::uint32_t> topk_indices(std::span<const T> v, std::size_t k) {
    require(k >= 1, ErrorCode::invalid_argument, "topk: k must be >= 1");
    require(k <= v.size(), ErrorCode::invalid_argument,
            "topk: k=" + std::to_string(k) + " exceeds length " + std::to_string(v.size()));
    std::vector<std::uint32_t> idx(v.size());
    std::iota(idx.begin(), idx.end(), 0u);
    auto before = [&](std::uint32_t a, std::uint32_t b) { return v[a] > v[b] || (v[a] == v[b] && a < b); };
    if (k < v.size()) std::nth_element(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(k) - 1, idx.end(), before);
    idx.resize(k);
    std::sort(idx.begin(), idx.end());
    return idx;
}

template <typename T>
std::vector<T> topk_select(std::span<const T> v, std::size_t k) {
    std::vector<T> out(v.size(), T{0});
    for (auto i : topk_indices(v, k)) out[i] = v[i];
    return out;
}

template <typename T>
std::vector<T> topk_select(const std::vector<T>& v, std::size_t k) {
    return topk_select(std::span<const T>(v), k);
}

// ---------------------------------------------------------------------------
// Forward pass

template <typename T>
struct SparseCode {
    std::vector<std::uint32_t> indices;  // ascending
    std::vector<T> values;
};

template <typename T>
void check_input(const SaeParams<T>& p, std::span<const T> x) {
    if (x.size() != p.d)
        throw Error(ErrorCode::dimension_mismatch,
                    "input has " + std::to_string(x.size()) + " entries, model d=" + std::to_string(p.d));
}

/// W_enc (x - b_dec) + b_enc, accumulated over input channels in ascending order.
template <typename T>
std::vector<T> pre_activation(const SaeParams<T>& p, std::span<const T> x) {
    check_input(p, x);
    std::vector<T> centered(p.d);
    for (std::size_t c = 0; c < p.d; ++c) centered[c] = x[c] - p.dec_bias[c];
    std::vector<T> pre(p.l);
    for (std::size_t i = 0; i < p.l; ++i) {
        const auto w = p.enc_weight.row(i);
        T acc{0};
        for (std::size_t c = 0; c < p.d; ++c) acc += w[c] * centered[c];
        pre[i] = acc + p.enc_bias[i];
    }
    return pre;
}

template <typename T>
SparseCode<T> encode_sparse(const SaeParams<T>& p, std::span<const T> x) {
    const auto pre = pre_activation(p, x);
    SparseCode<T> code;
    code.indices = topk_indices(std::span<const T>(pre), p.k);
    for (auto i : code.indices) code.values.push_back(pre[i]);
    return code;
}

template <typename T>
std::vector<T> encode(const SaeParams<T>& p, std::span<const T> x) {
    const auto code = encode_sparse(p, x);
    std::vector<T> z(p.l, T{0});
    for (std::size_t j = 0; j < code.indices.size(); ++j) z[code.indices[j]] = code.values[j];
    return z;
}

/// Sparse decode: cost O(nnz * d). Summation runs over latents in ascending
/// order so the result is identical to the dense product.
template <typename T>
std::vector<T> decode(const SaeParams<T>& p, const SparseCode<T>& code) {
    std::vector<T> out(p.d, T{0});
    for (std::size_t j = 0; j < code.indices.size(); ++j) {
        const auto i = code.indices[j];
        const T zi = code.values[j];
        if (p.tied) {
            const auto w = p.enc_weight.row(i);
            for (std::size_t r = 0; r < p.d; ++r) out[r] += w[r] * zi;
        } else {
            for (std::size_t r = 0; r < p.d; ++r) out[r] += p.dec_weight(r, i) * zi;
        }
    }
    for (std::size_t r = 0; r < p.d; ++r) out[r] += p.dec_bias[r];
    return out;
}

template <typename T>
std::vector<T> decode(const SaeParams<T>& p, std::span<const T> z) {
    if (z.size() != p.l)
        throw Error(ErrorCode::dimension_mismatch,
                    "code has " + std::to_string(z.size()) + " entries, model l=" + std::to_string(p.l));
    SparseCode<T> code;
    for (std::uint32_t i = 0; i < p.l; ++i)
        if (z[i] != T{0}) {
            code.indices.push_back(i);
            code.values.push_back(z[i]);
        }
    return decode(p, code);
}

/// Mean over coordinates of the squared difference.
template <typename T>
double mse_loss(std::span<const T> x, std::span<const T> recon) {
    require(x.size() == recon.size(), ErrorCode::dimension_mismatch, "mse_loss: length mismatch");
    if (x.empty()) return 0.0;
    double s = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double diff = static_cast<double>(recon[i]) - static_cast<double>(x[i]);
        s += diff * diff;
    }
    return s / static_cast<double>(x.size());
}

/// Mean of per-row MSE over a batch (b x d).
template <typename T>
double batch_mse(const SaeParams<T>& p, const Matrix<T>& batch) {
    double s = 0.0;
    for (std::size_t r = 0; r < batch.rows(); ++r) {
        const auto recon = decode(p, encode_sparse(p, batch.row(r)));
        s += mse_loss(batch.row(r), std::span<const T>(recon));
    }
    return batch.rows() ? s / static_cast<double>(batch.rows()) : 0.0;
}

// ---------------------------------------------------------------------------
// Gradients

template <typename T>
struct Gradients {
    Matrix<T> enc_weight;   // l x d
    std::vector<T> enc_bias;
    std::vector<T> dec_bias;
    Matrix<T> dec_weight;   // d x l, untied only
    double loss = 0.0;      // mean batch MSE at the evaluated parameters
    std::vector<std::vector<std::uint32_t>> selected;  // per-row TopK index sets
};

/// Analytic gradients of the mean batch MSE. The TopK mask is held fixed:
/// selected latents pass gradient through, the rest receive none. In tied
/// mode the encoder gradient collects both the encoder path and the
/// transposed decoder path.
template <typename T>
Gradients<T> gradients(const SaeParams<T>& p, const Matrix<T>& batch) {
    require(batch.rows() > 0, ErrorCode::invalid_argument, "gradients: empty batch");
    require(batch.cols() == p.d, ErrorCode::dimension_mismatch,
            "batch width " + std::to_string(batch.cols()) + " != model d=" + std::to_string(p.d));
    Gradients<T> g{Matrix<T>(p.l, p.d), std::vector<T>(p.l), std::vector<T>(p.d),
                   p.tied ? Matrix<T>() : Matrix<T>(p.d, p.l), 0.0, {}};
    g.selected.reserve(batch.rows());
    const T scale = T(2) / (static_cast<T>(batch.rows()) * static_cast<T>(p.d));
    std::vector<T> centered(p.d), out_grad(p.d), dz(p.k);
    for (std::size_t r = 0; r < batch.rows(); ++r) {
        const auto x = batch.row(r);
        for (std::size_t c = 0; c < p.d; ++c) centered[c] = x[c] - p.dec_bias[c];
        const auto code = encode_sparse(p, x);
        const auto recon = decode(p, code);
        g.loss += mse_loss(x, std::span<const T>(recon));

        for (std::size_t c = 0; c < p.d; ++c) {
            out_grad[c] = scale * (recon[c] - x[c]);
            g.dec_bias[c] += out_grad[c];
        }
        for (std::size_t j = 0; j < code.indices.size(); ++j) {
            const auto i = code.indices[j];
            T acc{0};
            for (std::size_t c = 0; c < p.d; ++c) acc += p.decoder(c, i) * out_grad[c];
            dz[j] = acc;
            g.enc_bias[i] += acc;
            auto gw = g.enc_weight.row(i);
            for (std::size_t c = 0; c < p.d; ++c) gw[c] += acc * centered[c];
            if (p.tied) {
                for (std::size_t c = 0; c < p.d; ++c) gw[c] += code.values[j] * out_grad[c];
            } else {
                for (std::size_t c = 0; c < p.d; ++c) g.dec_weight(c, i) += out_grad[c] * code.values[j];
            }
        }
        // d/d(b_dec) through the centering x - b_dec
        for (std::size_t j = 0; j < code.indices.size(); ++j) {
            const auto w = p.enc_weight.row(code.indices[j]);
            for (std::size_t c = 0; c < p.d; ++c) g.dec_bias[c] -= w[c] * dz[j];
        }
        g.selected.push_back(code.indices);
    }
    g.loss /= static_cast<double>(batch.rows());
    return g;
}

// ---------------------------------------------------------------------------
// Training configuration, Adam

struct TrainConfig {
    std::uint32_t k = 32;
    std::uint32_t expansion_factor = 16;
    double learning_rate = 1e-3;
    std::uint32_t batch_size = 256;
    std::uint64_t steps = 1000;
    std::uint64_t seed = 0;
    double adam_beta1 = 0.9;
    double adam_beta2 = 0.999;
    double adam_epsilon = 1e-8;
    std::uint64_t dead_window = 100'000;
    bool tied = true;
    std::uint64_t log_every = 100;

    void validate() const {
        require(k >= 1 && expansion_factor >= 1 && batch_size >= 1 && dead_window >= 1 && log_every >= 1,
                ErrorCode::invalid_argument, "k, expansion_factor, batch_size, dead_window, log_every must be positive");
        require(learning_rate > 0 && adam_epsilon > 0, ErrorCode::invalid_argument,
                "learning_rate and adam_epsilon must be positive");
        require(adam_beta1 > 0 && adam_beta1 < 1 && adam_beta2 > 0 && adam_beta2 < 1, ErrorCode::invalid_argument,
                "adam betas must lie in (0, 1)");
    }
};

inline nlohmann::json to_json(const TrainConfig& c) {
    return {{"k", c.k},
            {"expansion_factor", c.expansion_factor},
            {"learning_rate", c.learning_rate},
            {"batch_size", c.batch_size},
            {"steps", c.steps},
            {"seed", c.seed},
            {"adam_beta1", c.adam_beta1},
            {"adam_beta2", c.adam_beta2},
            {"adam_epsilon", c.adam_epsilon},
            {"dead_window", c.dead_window},
            {"tied", c.tied},
            {"log_every", c.log_every}};
}

template <typename T>
struct AdamState {
    std::vector<T> m_enc_weight, v_enc_weight;
    std::vector<T> m_enc_bias, v_enc_bias;
    std::vector<T> m_dec_bias, v_dec_bias;
    std::vector<T> m_dec_weight, v_dec_weight;
    std::uint64_t step = 0;

    explicit AdamState(const SaeParams<T>& p)
        : m_enc_weight(p.enc_weight.size()), v_enc_weight(p.enc_weight.size()), m_enc_bias(p.l), v_enc_bias(p.l),
          m_dec_bias(p.d), v_dec_bias(p.d), m_dec_weight(p.dec_weight.size()), v_dec_weight(p.dec_weight.size()) {}
};

namespace detail {

template <typename T>
void adam_update(std::span<T> param, std::span<const T> grad, std::vector<T>& m, std::vector<T>& v, double lr,
                 double b1, double b2, double eps, double bc1, double bc2) {
    for (std::size_t i = 0; i < param.size(); ++i) {
        const double g = grad[i];
        const double mi = b1 * m[i] + (1.0 - b1) * g;
        const double vi = b2 * v[i] + (1.0 - b2) * g * g;
        m[i] = static_cast<T>(mi);
        v[i] = static_cast<T>(vi);
        const double mhat = mi / bc1;
        const double vhat = vi / bc2;
        param[i] = static_cast<T>(param[i] - lr * mhat / (std::sqrt(vhat) + eps));
    }
}

}  // namespace detail

/// One bias-corrected Adam update. Tied models have no separate decoder
/// tensor, so W_dec = W_enc^T continues to hold exactly.
template <typename T>
void adam_step(SaeParams<T>& p, AdamState<T>& s, const Gradients<T>& g, const TrainConfig& c) {
    ++s.step;
    const double t = static_cast<double>(s.step);
    const double bc1 = 1.0 - std::pow(c.adam_beta1, t);
    const double bc2 = 1.0 - std::pow(c.adam_beta2, t);
    auto run = [&](std::span<T> param, std::span<const T> grad, std::vector<T>& m, std::vector<T>& v) {
        require(param.size() == grad.size(), ErrorCode::dimension_mismatch, "adam_step: gradient shape mismatch");
        detail::adam_update(param, grad, m, v, c.learning_rate, c.adam_beta1, c.adam_beta2, c.adam_epsilon, bc1, bc2);
    };
    run(p.enc_weight.flat(), g.enc_weight.flat(), s.m_enc_weight, s.v_enc_weight);
    run(std::span<T>(p.enc_bias), std::span<const T>(g.enc_bias), s.m_enc_bias, s.v_enc_bias);
    run(std::span<T>(p.dec_bias), std::span<const T>(g.dec_bias), s.m_dec_bias, s.v_dec_bias);
    if (!p.tied) run(p.dec_weight.flat(), g.dec_weight.flat(), s.m_dec_weight, s.v_dec_weight);
}

// ---------------------------------------------------------------------------
// Dead-latent tracking

struct TrainStats {
    std::uint64_t step = 0;
    std::uint64_t examples_seen = 0;
    double mse = 0.0;
    std::uint64_t dead_count = 0;
    double dead_fraction = 0.0;
    // Per latent: examples_seen value right after the latent was last
    // selected; 0 if never selected.
    std::vector<std::uint64_t> selections;
};

inline std::vector<std::uint32_t> dead_latents(const TrainStats& stats, std::uint64_t dead_window) {
    std::vector<std::uint32_t> out;
    for (std::uint32_t i = 0; i < stats.selections.size(); ++i)
        if (stats.examples_seen - stats.selections[i] >= dead_window) out.push_back(i);
    return out;
}

inline nlohmann::json to_json(const TrainStats& s, bool with_selections = false) {
    nlohmann::json j{{"step", s.step},
                     {"examples_seen", s.examples_seen},
                     {"mse", s.mse},
                     {"dead_count", s.dead_count},
                     {"dead_fraction", s.dead_fraction}};
    if (with_selections) j["selections"] = s.selections;
    return j;
}

// ---------------------------------------------------------------------------
// Training

/// Seeded initialization: W_enc ~ U(-1, 1)/sqrt(d), b_enc = 0, b_dec = mean
/// of `first_batch`, untied W_dec starts as W_enc^T.
template <typename T>
SaeParams<T> initialize(const TrainConfig& c, std::uint32_t d, const Matrix<T>& first_batch) {
    c.validate();
    require(first_batch.cols() == d, ErrorCode::dimension_mismatch, "first batch width differs from d");
    const auto l = static_cast<std::uint32_t>(c.expansion_factor * d);
    SaeParams<T> p(d, l, c.k, c.tied);
    Rng rng(derive_seed(c.seed, 0x5ae1));
    std::uniform_real_distribution<double> unif(-1.0, 1.0);
    const double scale = 1.0 / std::sqrt(static_cast<double>(d));
    for (auto& w : p.enc_weight.storage()) w = static_cast<T>(unif(rng) * scale);
    if (!c.tied) p.dec_weight = p.enc_weight.transposed();
    for (std::size_t col = 0; col < d; ++col) {
        double s = 0.0;
        for (std::size_t r = 0; r < first_batch.rows(); ++r) s += first_batch(r, col);
        p.dec_bias[col] = first_batch.rows() ? static_cast<T>(s / static_cast<double>(first_batch.rows())) : T{0};
    }
    return p;
}

template <typename T>
struct TrainResult {
    SaeParams<T> params;
    std::vector<TrainStats> history;
    TrainStats final_stats;
};

template <typename S, typename T>
concept BatchProvider = requires(S s) {
    { s.next() } -> std::same_as<std::optional<Batch<T>>>;
    { s.width() } -> std::convertible_to<std::uint32_t>;
};

/// Continues training `init` for `c.steps` Adam steps over batches from
/// `stream`. Statistics are recorded every `log_every` steps and at the last
/// step.
template <typename T, BatchProvider<T> Stream>
TrainResult<T> train_from(SaeParams<T> init, Stream& stream, const TrainConfig& c,
                          const std::function<void(const TrainStats&)>& on_log = {},
                          std::optional<Batch<T>> first = std::nullopt) {
    c.validate();
    const std::uint32_t d = stream.width();
    require(init.d == d, ErrorCode::dimension_mismatch,
            "stream width " + std::to_string(d) + " != model d=" + std::to_string(init.d));
    TrainResult<T> result{std::move(init), {}, {}};
    auto& p = result.params;
    AdamState<T> adam(p);
    TrainStats stats;
    stats.selections.assign(p.l, 0);

    auto snapshot = [&](std::uint64_t step, double mse) {
        stats.step = step;
        stats.mse = mse;
        stats.dead_count = dead_latents(stats, c.dead_window).size();
        stats.dead_fraction = static_cast<double>(stats.dead_count) / static_cast<double>(p.l);
    };

    std::optional<Batch<T>> batch = std::move(first);
    for (std::uint64_t step = 0; step < c.steps; ++step) {
        if (!batch) batch = stream.next();
        require(batch.has_value(), ErrorCode::invalid_argument, "training stream ran dry");
        require(batch->rows.cols() == d, ErrorCode::dimension_mismatch, "batch width changed mid-stream");
        const auto g = gradients(p, batch->rows);
        if (!std::isfinite(g.loss))
            throw Error(ErrorCode::non_finite, "loss became non-finite at step " + std::to_string(step) +
                                                   " (examples seen " + std::to_string(stats.examples_seen) + ")");
        for (const auto& sel : g.selected) {
            ++stats.examples_seen;
            for (auto i : sel) stats.selections[i] = stats.examples_seen;
        }
        if (step % c.log_every == 0 || step + 1 == c.steps) {
            snapshot(step, g.loss);
            auto rec = stats;
            rec.selections.clear();
            result.history.push_back(std::move(rec));
            if (on_log) on_log(result.history.back());
        }
        adam_step(p, adam, g, c);
        batch.reset();
    }
    if (c.steps == 0) snapshot(0, 0.0);
    result.final_stats = stats;
    return result;
}

/// Seeded initialization from the first batch, then `c.steps` Adam steps.
/// steps == 0 returns the initialization.
template <typename T, BatchProvider<T> Stream>
TrainResult<T> train(Stream& stream, const TrainConfig& c,
                     const std::function<void(const TrainStats&)>& on_log = {}) {
    c.validate();
    auto first = stream.next();
    require(first.has_value(), ErrorCode::invalid_argument, "training stream is empty");
    auto init = initialize<T>(c, stream.width(), first->rows);
    return train_from(std::move(init), stream, c, on_log, std::move(first));
}

// ---------------------------------------------------------------------------
// Checkpoints (SAECKPT1)
//   "SAECKPT1" | u32 d | u32 l | u32 k | u8 tied | f32 enc_weight[l*d] |
//   f32 enc_bias[l] | f32 dec_bias[d] | f32 dec_weight[d*l] (untied only)

inline constexpr std::string_view kCheckpointMagic{"SAECKPT1", 8};

inline std::string encode_checkpoint(const SaeParams<float>& p) {
    require(all_finite(p.enc_weight.flat()) && all_finite(std::span<const float>(p.enc_bias)) &&
                all_finite(std::span<const float>(p.dec_bias)) && all_finite(p.dec_weight.flat()),
            ErrorCode::non_finite, "checkpoint parameters contain non-finite values");
    std::ostringstream os(std::ios::binary);
    os.write(kCheckpointMagic.data(), kCheckpointMagic.size());
    io::put_le<std::uint32_t>(os, p.d);
    io::put_le<std::uint32_t>(os, p.l);
    io::put_le<std::uint32_t>(os, p.k);
    io::put_le<std::uint8_t>(os, p.tied ? 1 : 0);
    for (float v : p.enc_weight.storage()) io::put_f32(os, v);
    for (float v : p.enc_bias) io::put_f32(os, v);
    for (float v : p.dec_bias) io::put_f32(os, v);
    if (!p.tied)
        for (float v : p.dec_weight.storage()) io::put_f32(os, v);
    return std::move(os).str();
}

inline void write_checkpoint(const SaeParams<float>& p, const std::string& path) {
    io::write_file(path, encode_checkpoint(p));
}

inline SaeParams<float> decode_checkpoint(std::vector<unsigned char> bytes, const std::string& origin = "<memory>") {
    io::Reader in(std::move(bytes));
    if (in.remaining() < kCheckpointMagic.size() || in.bytes(kCheckpointMagic.size(), "magic") != kCheckpointMagic)
        throw Error(ErrorCode::bad_magic, origin + " is not an SAECKPT1 checkpoint");
    const auto d = in.get<std::uint32_t>("d");
    const auto l = in.get<std::uint32_t>("l");
    const auto k = in.get<std::uint32_t>("k");
    const auto tied_flag = in.get<std::uint8_t>("tied");
    require(tied_flag <= 1, ErrorCode::invalid_argument, origin + ": tied flag must be 0 or 1");
    SaeParams<float> p(d, l, k, tied_flag == 1);
    p.enc_weight = Matrix<float>(l, d, in.f32_array(std::uint64_t{l} * d, "enc_weight"));
    p.enc_bias = in.f32_array(l, "enc_bias");
    p.dec_bias = in.f32_array(d, "dec_bias");
    if (!p.tied) p.dec_weight = Matrix<float>(d, l, in.f32_array(std::uint64_t{d} * l, "dec_weight"));
    in.expect_end(origin + " payload");
    require(all_finite(p.enc_weight.flat()) && all_finite(std::span<const float>(p.enc_bias)) &&
                all_finite(std::span<const float>(p.dec_bias)) && all_finite(p.dec_weight.flat()),
            ErrorCode::non_finite, origin + ": checkpoint contains non-finite values");
    return p;
}

inline SaeParams<float> read_checkpoint(const std::string& path) { return decode_checkpoint(io::slurp(path), path); }

/// "layer/f/number" feature naming used in every report.
inline std::string feature_name(std::string_view layer, std::size_t feature) {
    return std::string(layer) + "/f/" + std::to_string(feature);
}

}  // namespace sae
