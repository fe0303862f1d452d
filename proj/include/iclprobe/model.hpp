#pragma once

// Decoder-only transformer forward pass for desk-scale checkpoints, with the
// instrumentation the induction probe needs: final-position attention rows
// per head and the post-norm inputs to chosen attention sublayers.
//
// Weight names (row-major, [out, in] for projections):
//
//   tok_embeddings.weight        [vocab_size, d_model]
//   pos_embeddings.weight        [max_seq, d_model]          learned positions only
//   layers.{i}.attn_norm.weight  [d_model]
//   layers.{i}.attn_norm.bias    [d_model]                   layernorm only
//   layers.{i}.attn.wq           [n_heads * d_head, d_model]
//   layers.{i}.attn.wk           [n_kv_heads * d_head, d_model]
//   layers.{i}.attn.wv           [n_kv_heads * d_head, d_model]
//   layers.{i}.attn.wo           [d_model, n_heads * d_head]
//   layers.{i}.mlp_norm.weight   [d_model]                   d_ff > 0
//   layers.{i}.mlp_norm.bias     [d_model]                   d_ff > 0, layernorm only
//   layers.{i}.mlp.w1            [d_ff, d_model]             d_ff > 0
//   layers.{i}.mlp.w2            [d_model, d_ff]             d_ff > 0
//   layers.{i}.mlp.w3            [d_ff, d_model]             d_ff > 0, silu-gated only
//   norm.weight                  [d_model]
//   norm.bias                    [d_model]                   layernorm only
//   output.weight                [vocab_size, d_model]
//
// d_ff == 0 builds an attention-only model (no MLP sublayers).
// Rotary positions rotate interleaved pairs (2i, 2i+1) of every query/key
// head by pos * base^(-2i / d_head), base 10000 by default.

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"

#include "iclprobe/error.hpp"
#include "iclprobe/tensor_io.hpp"

namespace iclprobe {

enum class norm_kind { layernorm, rmsnorm };
enum class pos_kind { learned, rotary };
enum class act_kind { gelu, silu_gated };

struct model_config {
    int n_layers = 1;
    int n_heads = 1;
    int n_kv_heads = 1;
    int d_model = 4;
    int d_head = 4;
    int d_ff = 0;
    int vocab_size = 4;
    norm_kind norm = norm_kind::rmsnorm;
    pos_kind pos = pos_kind::learned;
    act_kind act = act_kind::silu_gated;
    int max_seq = 16;
    float norm_eps = 1e-5F;
    float rope_base = 10000.0F;

    int attn_width() const { return n_heads * d_head; }
    int kv_width() const { return n_kv_heads * d_head; }

    void validate() const
    {
        require(n_layers >= 1 && n_heads >= 1 && n_kv_heads >= 1 && d_model >= 1 && d_head >= 1 && vocab_size >= 1
                    && max_seq >= 1 && d_ff >= 0,
                errc::invalid_argument, "model config dimensions must be positive");
        require(n_heads % n_kv_heads == 0, errc::invalid_argument,
                "n_kv_heads (" + std::to_string(n_kv_heads) + ") must divide n_heads (" + std::to_string(n_heads) + ")");
        require(pos != pos_kind::rotary || d_head % 2 == 0, errc::invalid_argument, "rotary positions need an even d_head");
    }

    bool operator==(const model_config&) const = default;
};

NLOHMANN_JSON_SERIALIZE_ENUM(norm_kind, {{norm_kind::layernorm, "layernorm"}, {norm_kind::rmsnorm, "rmsnorm"}})
NLOHMANN_JSON_SERIALIZE_ENUM(pos_kind, {{pos_kind::learned, "learned"}, {pos_kind::rotary, "rotary"}})
NLOHMANN_JSON_SERIALIZE_ENUM(act_kind, {{act_kind::gelu, "gelu"}, {act_kind::silu_gated, "silu-gated"}})

inline void to_json(nlohmann::json& j, const model_config& c)
{
    j = {{"n_layers", c.n_layers}, {"n_heads", c.n_heads},   {"n_kv_heads", c.n_kv_heads}, {"d_model", c.d_model},
         {"d_head", c.d_head},     {"d_ff", c.d_ff},         {"vocab_size", c.vocab_size}, {"norm_kind", c.norm},
         {"pos_kind", c.pos},      {"act_kind", c.act},      {"max_seq", c.max_seq},       {"norm_eps", c.norm_eps},
         {"rope_base", c.rope_base}};
}

inline void from_json(const nlohmann::json& j, model_config& c)
{
    try {
        j.at("n_layers").get_to(c.n_layers);
        j.at("n_heads").get_to(c.n_heads);
        c.n_kv_heads = j.value("n_kv_heads", c.n_heads);
        j.at("d_model").get_to(c.d_model);
        j.at("d_head").get_to(c.d_head);
        c.d_ff = j.value("d_ff", 0);
        j.at("vocab_size").get_to(c.vocab_size);
        c.norm = j.value("norm_kind", norm_kind::rmsnorm);
        c.pos = j.value("pos_kind", pos_kind::learned);
        c.act = j.value("act_kind", act_kind::silu_gated);
        j.at("max_seq").get_to(c.max_seq);
        c.norm_eps = j.value("norm_eps", 1e-5F);
        c.rope_base = j.value("rope_base", 10000.0F);
    } catch (const nlohmann::json::exception& ex) {
        fail(errc::invalid_argument, std::string("model config: ") + ex.what());
    }
}

/// Dense row-major float matrix.
struct matrix {
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::vector<float> data;

    matrix() = default;
    matrix(std::size_t r, std::size_t c) : rows(r), cols(c), data(r * c, 0.0F) {}

    float& operator()(std::size_t r, std::size_t c) { return data[r * cols + c]; }
    float operator()(std::size_t r, std::size_t c) const { return data[r * cols + c]; }
    std::span<float> row(std::size_t r) { return {data.data() + r * cols, cols}; }
    std::span<const float> row(std::size_t r) const { return {data.data() + r * cols, cols}; }

    bool operator==(const matrix&) const = default;
};

/// Per-head query/key projections, each d_head x d_model.
struct head_weights {
    matrix wq;
    matrix wk;
};

struct capture_spec {
    bool attn_rows = true;
    std::vector<int> hidden_layers;
    bool full_attn = false;
};

struct forward_output {
    matrix logits;  // seq x vocab
    int n_heads = 0;
    // final-position attention row of (layer, head) at index layer * n_heads + head
    std::vector<std::vector<float>> attn_rows;
    // layer -> seq x d_model, input of that layer's attention after its norm
    std::map<int, matrix> post_norm_hidden;
    // debug mode only: full seq x seq probabilities, same indexing as attn_rows
    std::vector<matrix> full_attn;

    const std::vector<float>& attn_row(int layer, int head) const
    {
        const auto idx = static_cast<std::size_t>(layer * n_heads + head);
        require(idx < attn_rows.size(), errc::missing_capture, "attention rows were not captured");
        return attn_rows[idx];
    }

    const matrix& hidden(int layer) const
    {
        auto it = post_norm_hidden.find(layer);
        require(it != post_norm_hidden.end(), errc::missing_capture,
                "post-norm hidden states of layer " + std::to_string(layer) + " were not captured");
        return it->second;
    }
};

class model {
  public:
    struct norm_weights {
        std::vector<float> weight;
        std::vector<float> bias;
    };

    struct layer_weights {
        norm_weights attn_norm;
        matrix wq, wk, wv, wo;
        norm_weights mlp_norm;
        matrix w1, w2, w3;
    };

    const model_config& config() const { return m_config; }
    const std::vector<layer_weights>& layers() const { return m_layers; }

    friend model load_model(const tensor_store& store, const model_config& config);

    forward_output forward(std::span<const int> tokens, const capture_spec& capture = {}) const;

    head_weights head_qk(int layer, int head) const;

  private:
    model_config m_config;
    matrix m_tok_emb;
    matrix m_pos_emb;
    std::vector<layer_weights> m_layers;
    norm_weights m_final_norm;
    matrix m_output;

    void apply_norm(const norm_weights& w, std::span<const float> x, std::span<float> out) const;
};

namespace detail {

inline matrix load_matrix(const tensor_store& store, const std::string& name, std::size_t rows, std::size_t cols)
{
    const auto& e = store.entry(name);
    const std::vector<std::uint64_t> expected{rows, cols};
    if (e.shape != expected) {
        std::string found;
        for (auto d : e.shape) found += (found.empty() ? "" : ",") + std::to_string(d);
        fail(errc::shape_mismatch, "'" + name + "' expected [" + std::to_string(rows) + "," + std::to_string(cols)
                                       + "], found [" + found + "]");
    }
    matrix m(rows, cols);
    m.data = store.values(name);
    return m;
}

inline std::vector<float> load_vector(const tensor_store& store, const std::string& name, std::size_t n)
{
    const auto& e = store.entry(name);
    if (e.shape != std::vector<std::uint64_t>{n}) {
        fail(errc::shape_mismatch, "'" + name + "' expected [" + std::to_string(n) + "], found rank-"
                                       + std::to_string(e.shape.size()) + " tensor of " + std::to_string(e.element_count())
                                       + " elements");
    }
    return store.values(name);
}

// out = W x, W is rows x cols
inline void matvec(const matrix& w, std::span<const float> x, std::span<float> out)
{
    for (std::size_t r = 0; r < w.rows; ++r) {
        const float* wr = w.data.data() + r * w.cols;
        float acc = 0.0F;
        for (std::size_t c = 0; c < w.cols; ++c) acc += wr[c] * x[c];
        out[r] = acc;
    }
}

inline float gelu(float x) { return 0.5F * x * (1.0F + std::erf(x / std::sqrt(2.0F))); }
inline float silu(float x) { return x / (1.0F + std::exp(-x)); }

inline void rotate_interleaved(std::span<float> v, int pos, float base)
{
    const auto d = v.size();
    for (std::size_t i = 0; i + 1 < d; i += 2) {
        const double freq = std::pow(static_cast<double>(base), -static_cast<double>(i) / static_cast<double>(d));
        const double angle = static_cast<double>(pos) * freq;
        const auto c = static_cast<float>(std::cos(angle));
        const auto s = static_cast<float>(std::sin(angle));
        const float x0 = v[i];
        const float x1 = v[i + 1];
        v[i] = x0 * c - x1 * s;
        v[i + 1] = x0 * s + x1 * c;
    }
}

}  // namespace detail

inline model load_model(const tensor_store& store, const model_config& config)
{
    config.validate();
    using detail::load_matrix;
    using detail::load_vector;
    const auto dm = static_cast<std::size_t>(config.d_model);
    const auto vocab = static_cast<std::size_t>(config.vocab_size);
    const auto aw = static_cast<std::size_t>(config.attn_width());
    const auto kw = static_cast<std::size_t>(config.kv_width());
    const auto ff = static_cast<std::size_t>(config.d_ff);
    const bool ln = config.norm == norm_kind::layernorm;

    auto load_norm = [&](const std::string& prefix) {
        model::norm_weights w;
        w.weight = load_vector(store, prefix + ".weight", dm);
        if (ln) w.bias = load_vector(store, prefix + ".bias", dm);
        return w;
    };

    model m;
    m.m_config = config;
    m.m_tok_emb = load_matrix(store, "tok_embeddings.weight", vocab, dm);
    if (config.pos == pos_kind::learned) {
        m.m_pos_emb = load_matrix(store, "pos_embeddings.weight", static_cast<std::size_t>(config.max_seq), dm);
    }
    for (int i = 0; i < config.n_layers; ++i) {
        const std::string p = "layers." + std::to_string(i) + ".";
        model::layer_weights lw;
        lw.attn_norm = load_norm(p + "attn_norm");
        lw.wq = load_matrix(store, p + "attn.wq", aw, dm);
        lw.wk = load_matrix(store, p + "attn.wk", kw, dm);
        lw.wv = load_matrix(store, p + "attn.wv", kw, dm);
        lw.wo = load_matrix(store, p + "attn.wo", dm, aw);
        if (ff > 0) {
            lw.mlp_norm = load_norm(p + "mlp_norm");
            lw.w1 = load_matrix(store, p + "mlp.w1", ff, dm);
            lw.w2 = load_matrix(store, p + "mlp.w2", dm, ff);
            if (config.act == act_kind::silu_gated) lw.w3 = load_matrix(store, p + "mlp.w3", ff, dm);
        }
        m.m_layers.push_back(std::move(lw));
    }
    m.m_final_norm = load_norm("norm");
    m.m_output = load_matrix(store, "output.weight", vocab, dm);
    return m;
}

inline void model::apply_norm(const norm_weights& w, std::span<const float> x, std::span<float> out) const
{
    const auto n = x.size();
    if (m_config.norm == norm_kind::rmsnorm) {
        float ss = 0.0F;
        for (float v : x) ss += v * v;
        const float inv = 1.0F / std::sqrt(ss / static_cast<float>(n) + m_config.norm_eps);
        for (std::size_t i = 0; i < n; ++i) out[i] = x[i] * inv * w.weight[i];
    } else {
        float mean = 0.0F;
        for (float v : x) mean += v;
        mean /= static_cast<float>(n);
        float var = 0.0F;
        for (float v : x) var += (v - mean) * (v - mean);
        var /= static_cast<float>(n);
        const float inv = 1.0F / std::sqrt(var + m_config.norm_eps);
        for (std::size_t i = 0; i < n; ++i) out[i] = (x[i] - mean) * inv * w.weight[i] + w.bias[i];
    }
}

inline forward_output model::forward(std::span<const int> tokens, const capture_spec& capture) const
{
    const auto& cfg = m_config;
    const auto seq = tokens.size();
    require(seq >= 1, errc::invalid_argument, "empty token sequence");
    require(seq <= static_cast<std::size_t>(cfg.max_seq), errc::sequence_too_long,
            std::to_string(seq) + " tokens exceed max_seq " + std::to_string(cfg.max_seq));
    for (std::size_t i = 0; i < seq; ++i) {
        require(tokens[i] >= 0 && tokens[i] < cfg.vocab_size, errc::token_out_of_range,
                "token " + std::to_string(tokens[i]) + " at position " + std::to_string(i));
    }
    for (int l : capture.hidden_layers) {
        require(l >= 0 && l < cfg.n_layers, errc::index_out_of_range, "capture layer " + std::to_string(l));
    }

    const auto dm = static_cast<std::size_t>(cfg.d_model);
    const auto dh = static_cast<std::size_t>(cfg.d_head);
    const auto group = static_cast<std::size_t>(cfg.n_heads / cfg.n_kv_heads);
    const float scale = 1.0F / std::sqrt(static_cast<float>(dh));

    forward_output out;
    out.n_heads = cfg.n_heads;
    if (capture.attn_rows) out.attn_rows.resize(static_cast<std::size_t>(cfg.n_layers * cfg.n_heads));
    if (capture.full_attn) out.full_attn.resize(static_cast<std::size_t>(cfg.n_layers * cfg.n_heads));

    matrix x(seq, dm);
    for (std::size_t t = 0; t < seq; ++t) {
        auto xr = x.row(t);
        const auto emb = m_tok_emb.row(static_cast<std::size_t>(tokens[t]));
        for (std::size_t i = 0; i < dm; ++i) xr[i] = emb[i];
        if (cfg.pos == pos_kind::learned) {
            const auto pe = m_pos_emb.row(t);
            for (std::size_t i = 0; i < dm; ++i) xr[i] += pe[i];
        }
    }

    matrix h(seq, dm);
    matrix q(seq, static_cast<std::size_t>(cfg.attn_width()));
    matrix k(seq, static_cast<std::size_t>(cfg.kv_width()));
    matrix v(seq, static_cast<std::size_t>(cfg.kv_width()));
    matrix attn_out(seq, static_cast<std::size_t>(cfg.attn_width()));
    std::vector<float> probs(seq);
    std::vector<float> delta(dm);

    for (int li = 0; li < cfg.n_layers; ++li) {
        const auto& lw = m_layers[static_cast<std::size_t>(li)];
        for (std::size_t t = 0; t < seq; ++t) apply_norm(lw.attn_norm, x.row(t), h.row(t));
        for (int cl : capture.hidden_layers) {
            if (cl == li) out.post_norm_hidden[li] = h;
        }
        for (std::size_t t = 0; t < seq; ++t) {
            detail::matvec(lw.wq, h.row(t), q.row(t));
            detail::matvec(lw.wk, h.row(t), k.row(t));
            detail::matvec(lw.wv, h.row(t), v.row(t));
            if (cfg.pos == pos_kind::rotary) {
                for (int hd = 0; hd < cfg.n_heads; ++hd) {
                    detail::rotate_interleaved(q.row(t).subspan(static_cast<std::size_t>(hd) * dh, dh), static_cast<int>(t),
                                               cfg.rope_base);
                }
                for (int g = 0; g < cfg.n_kv_heads; ++g) {
                    detail::rotate_interleaved(k.row(t).subspan(static_cast<std::size_t>(g) * dh, dh), static_cast<int>(t),
                                               cfg.rope_base);
                }
            }
        }

        for (int hd = 0; hd < cfg.n_heads; ++hd) {
            const auto qoff = static_cast<std::size_t>(hd) * dh;
            const auto koff = (static_cast<std::size_t>(hd) / group) * dh;
            const auto slot = static_cast<std::size_t>(li * cfg.n_heads + hd);
            if (capture.full_attn) out.full_attn[slot] = matrix(seq, seq);
            for (std::size_t t = 0; t < seq; ++t) {
                const float* qr = q.data.data() + t * q.cols + qoff;
                float mx = -std::numeric_limits<float>::infinity();
                for (std::size_t s = 0; s <= t; ++s) {
                    const float* kr = k.data.data() + s * k.cols + koff;
                    float dot = 0.0F;
                    for (std::size_t i = 0; i < dh; ++i) dot += qr[i] * kr[i];
                    probs[s] = dot * scale;
                    mx = std::max(mx, probs[s]);
                }
                float sum = 0.0F;
                for (std::size_t s = 0; s <= t; ++s) {
                    probs[s] = std::exp(probs[s] - mx);
                    sum += probs[s];
                }
                for (std::size_t s = 0; s <= t; ++s) probs[s] /= sum;

                float* orow = attn_out.data.data() + t * attn_out.cols + qoff;
                for (std::size_t i = 0; i < dh; ++i) orow[i] = 0.0F;
                for (std::size_t s = 0; s <= t; ++s) {
                    const float* vr = v.data.data() + s * v.cols + koff;
                    for (std::size_t i = 0; i < dh; ++i) orow[i] += probs[s] * vr[i];
                }
                if (capture.full_attn) {
                    for (std::size_t s = 0; s <= t; ++s) out.full_attn[slot](t, s) = probs[s];
                }
                if (capture.attn_rows && t + 1 == seq) {
                    out.attn_rows[slot].assign(probs.begin(), probs.begin() + static_cast<std::ptrdiff_t>(seq));
                }
            }
        }
        for (std::size_t t = 0; t < seq; ++t) {
            detail::matvec(lw.wo, attn_out.row(t), delta);
            auto xr = x.row(t);
            for (std::size_t i = 0; i < dm; ++i) xr[i] += delta[i];
        }

        if (cfg.d_ff > 0) {
            const auto ff = static_cast<std::size_t>(cfg.d_ff);
            std::vector<float> hn(dm), a(ff), b(ff);
            for (std::size_t t = 0; t < seq; ++t) {
                apply_norm(lw.mlp_norm, x.row(t), hn);
                detail::matvec(lw.w1, hn, a);
                if (cfg.act == act_kind::silu_gated) {
                    detail::matvec(lw.w3, hn, b);
                    for (std::size_t i = 0; i < ff; ++i) a[i] = detail::silu(a[i]) * b[i];
                } else {
                    for (std::size_t i = 0; i < ff; ++i) a[i] = detail::gelu(a[i]);
                }
                detail::matvec(lw.w2, a, delta);
                auto xr = x.row(t);
                for (std::size_t i = 0; i < dm; ++i) xr[i] += delta[i];
            }
        }
    }

    out.logits = matrix(seq, static_cast<std::size_t>(cfg.vocab_size));
    for (std::size_t t = 0; t < seq; ++t) {
        apply_norm(m_final_norm, x.row(t), h.row(t));
        detail::matvec(m_output, h.row(t), out.logits.row(t));
    }
    return out;
}

inline head_weights model::head_qk(int layer, int head) const
{
    require(layer >= 0 && layer < m_config.n_layers, errc::index_out_of_range, "layer " + std::to_string(layer));
    require(head >= 0 && head < m_config.n_heads, errc::index_out_of_range, "head " + std::to_string(head));
    const auto dh = static_cast<std::size_t>(m_config.d_head);
    const auto dm = static_cast<std::size_t>(m_config.d_model);
    const auto group = static_cast<std::size_t>(head / (m_config.n_heads / m_config.n_kv_heads));
    const auto& lw = m_layers[static_cast<std::size_t>(layer)];
    head_weights hw{matrix(dh, dm), matrix(dh, dm)};
    for (std::size_t r = 0; r < dh; ++r) {
        const auto qr = lw.wq.row(static_cast<std::size_t>(head) * dh + r);
        const auto kr = lw.wk.row(group * dh + r);
        std::copy(qr.begin(), qr.end(), hw.wq.row(r).begin());
        std::copy(kr.begin(), kr.end(), hw.wk.row(r).begin());
    }
    return hw;
}

}  // namespace iclprobe
