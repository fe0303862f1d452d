#pragma once

// Hand-wired transformers whose attention circuits are known in advance.
//
// planted induction model: 2 layers x 2 heads, attention-only. Head (0, 0)
// copies the previous token into a "prev" subspace; head (1, 1) matches the
// current token against that subspace, so on [A][B] ... [A] it attends to
// [B]. Heads (0, 1) and (1, 0) are random distractors.
//
// toy classification task: inputs are single words carrying a class feature
// vector; prompts read "w Label: c | w Label: c | ... | w Label:". Two
// layer-0 heads copy the features of the token one and two back, and head
// (1, 1) attends from the final forerunner to each demonstration label with
// weight exp(sharpness * cos(query features, demo features)), then copies
// that label into the logits. Demonstrations resembling the query therefore
// decide the prediction, and the W_Q^T W_K subspace of head (1, 1) maps
// every token onto the features it keys on.

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "iclprobe/dataset.hpp"
#include "iclprobe/induction.hpp"
#include "iclprobe/model.hpp"
#include "iclprobe/retrievers.hpp"
#include "iclprobe/rng.hpp"
#include "iclprobe/tensor_io.hpp"

namespace iclprobe {

struct toy_checkpoint {
    model_config config;
    tensor_store store;
};

namespace detail {

/// Zero-initialized weights for `cfg` under the documented naming scheme.
struct weight_set {
    model_config cfg;
    std::map<std::string, matrix> mats;
    std::map<std::string, std::vector<float>> vecs;

    explicit weight_set(const model_config& c) : cfg(c)
    {
        const auto dm = static_cast<std::size_t>(c.d_model);
        const auto v = static_cast<std::size_t>(c.vocab_size);
        mats["tok_embeddings.weight"] = matrix(v, dm);
        if (c.pos == pos_kind::learned) mats["pos_embeddings.weight"] = matrix(static_cast<std::size_t>(c.max_seq), dm);
        auto norm = [&](const std::string& p, float init) {
            vecs[p + ".weight"] = std::vector<float>(dm, init);
            if (c.norm == norm_kind::layernorm) vecs[p + ".bias"] = std::vector<float>(dm, 0.0F);
        };
        for (int i = 0; i < c.n_layers; ++i) {
            const std::string p = "layers." + std::to_string(i) + ".";
            norm(p + "attn_norm", 1.0F);
            mats[p + "attn.wq"] = matrix(static_cast<std::size_t>(c.attn_width()), dm);
            mats[p + "attn.wk"] = matrix(static_cast<std::size_t>(c.kv_width()), dm);
            mats[p + "attn.wv"] = matrix(static_cast<std::size_t>(c.kv_width()), dm);
            mats[p + "attn.wo"] = matrix(dm, static_cast<std::size_t>(c.attn_width()));
            if (c.d_ff > 0) {
                const auto ff = static_cast<std::size_t>(c.d_ff);
                norm(p + "mlp_norm", 1.0F);
                mats[p + "mlp.w1"] = matrix(ff, dm);
                mats[p + "mlp.w2"] = matrix(dm, ff);
                if (c.act == act_kind::silu_gated) mats[p + "mlp.w3"] = matrix(ff, dm);
            }
        }
        norm("norm", 1.0F);
        mats["output.weight"] = matrix(v, dm);
    }

    matrix& m(const std::string& name) { return mats.at(name); }

    toy_checkpoint build() const
    {
        toy_checkpoint ck{cfg, {}};
        for (const auto& [name, mat] : mats) ck.store.add(name, {mat.rows, mat.cols}, mat.data);
        for (const auto& [name, vec] : vecs) ck.store.add(name, {vec.size()}, vec);
        return ck;
    }
};

}  // namespace detail

/// Gaussian weights (std `scale`), norm gains near 1, small norm biases.
inline toy_checkpoint make_random_checkpoint(const model_config& cfg, std::uint64_t seed, double scale = 0.4)
{
    cfg.validate();
    rng gen(seed);
    detail::weight_set w(cfg);
    for (auto& [name, m] : w.mats) {
        for (auto& v : m.data) v = static_cast<float>(scale * gen.normal());
    }
    for (auto& [name, v] : w.vecs) {
        const bool bias = name.size() > 5 && name.compare(name.size() - 5, 5, ".bias") == 0;
        for (auto& x : v) x = static_cast<float>(bias ? 0.1 * gen.normal() : 1.0 + 0.2 * gen.normal());
    }
    return w.build();
}

struct planted_induction {
    toy_checkpoint checkpoint;
    head_id induction_head{1, 1};
    head_id previous_token_head{0, 0};
};

inline planted_induction make_planted_induction(std::uint64_t seed, int vocab = 32, int max_seq = 32)
{
    model_config c;
    c.n_layers = 2;
    c.n_heads = 2;
    c.n_kv_heads = 2;
    c.vocab_size = vocab;
    c.max_seq = max_seq;
    c.d_model = 2 * vocab + max_seq;
    c.d_head = std::max(vocab, max_seq);
    c.d_ff = 0;
    c.norm = norm_kind::rmsnorm;
    c.pos = pos_kind::learned;

    // residual layout: [token one-hot | position one-hot | previous-token one-hot]
    const std::size_t tok = 0;
    const auto pos = static_cast<std::size_t>(vocab);
    const auto prev = static_cast<std::size_t>(vocab + max_seq);
    const auto dh = static_cast<std::size_t>(c.d_head);
    const float root_dh = std::sqrt(static_cast<float>(dh));

    detail::weight_set w(c);
    for (int t = 0; t < vocab; ++t) {
        w.m("tok_embeddings.weight")(static_cast<std::size_t>(t), tok + static_cast<std::size_t>(t)) = 1.0F;
        w.m("output.weight")(static_cast<std::size_t>(t), prev + static_cast<std::size_t>(t)) = 1.0F;
    }
    for (int p = 0; p < max_seq; ++p) w.m("pos_embeddings.weight")(static_cast<std::size_t>(p), pos + static_cast<std::size_t>(p)) = 1.0F;
    // rmsnorm with gain 1/sqrt(d_model) maps every residual vector to unit norm
    const float unit_gain = 1.0F / std::sqrt(static_cast<float>(c.d_model));
    for (int l = 0; l < 2; ++l) {
        for (auto& v : w.vecs.at("layers." + std::to_string(l) + ".attn_norm.weight")) v = unit_gain;
    }

    // layer 0 head 0: position p attends p-1 and copies its token into `prev`.
    // Layer-0 inputs are token+position, norm sqrt(2) before normalization.
    auto& wq0 = w.m("layers.0.attn.wq");
    auto& wk0 = w.m("layers.0.attn.wk");
    auto& wv0 = w.m("layers.0.attn.wv");
    auto& wo0 = w.m("layers.0.attn.wo");
    const float beta0 = 40.0F * 2.0F * root_dh;
    for (int a = 0; a < max_seq; ++a) {
        wq0(static_cast<std::size_t>(a), pos + static_cast<std::size_t>(a)) = beta0;
        if (a >= 1) wk0(static_cast<std::size_t>(a), pos + static_cast<std::size_t>(a - 1)) = 1.0F;
    }
    for (int a = 0; a < vocab; ++a) {
        wv0(static_cast<std::size_t>(a), tok + static_cast<std::size_t>(a)) = 1.0F;
        wo0(prev + static_cast<std::size_t>(a), static_cast<std::size_t>(a)) = std::sqrt(2.0F);
    }

    // layer 1 head 1: query = current token, key = previous token of the key
    // position. Layer-1 inputs have norm ~sqrt(3).
    auto& wq1 = w.m("layers.1.attn.wq");
    auto& wk1 = w.m("layers.1.attn.wk");
    const float beta1 = 30.0F * 3.0F * root_dh;
    for (int a = 0; a < vocab; ++a) {
        wq1(dh + static_cast<std::size_t>(a), tok + static_cast<std::size_t>(a)) = beta1;
        wk1(dh + static_cast<std::size_t>(a), prev + static_cast<std::size_t>(a)) = 1.0F;
    }

    // distractors: random query/key maps for (0, 1) and (1, 0), no output
    rng gen(seed);
    for (std::size_t r = 0; r < dh; ++r) {
        for (std::size_t col = 0; col < static_cast<std::size_t>(c.d_model); ++col) {
            wq0(dh + r, col) = static_cast<float>(gen.normal() * 2.0);
            wk0(dh + r, col) = static_cast<float>(gen.normal() * 2.0);
            wq1(r, col) = static_cast<float>(gen.normal() * 2.0);
            wk1(r, col) = static_cast<float>(gen.normal() * 2.0);
        }
    }
    return {w.build(), {1, 1}, {0, 0}};
}

struct induction_prompt {
    std::vector<int> tokens;
    std::vector<int> correct_positions;  // the [B] position following the earlier [A]
};

/// Distinct random tokens followed by a repeat of one of them ([A][B] ... [A]).
/// The repeated token sits at least three places back so [B] is never the
/// token right before the final position, and never at position 0, whose
/// previous-token slot holds its own token.
inline induction_prompt make_induction_prompt(rng& gen, int vocab, int min_len, int max_len)
{
    require(min_len >= 5 && max_len >= min_len && max_len - 1 <= vocab, errc::invalid_argument,
            "induction prompt lengths must satisfy 5 <= min <= max <= vocab + 1");
    const auto n = static_cast<std::size_t>(min_len - 1)
        + static_cast<std::size_t>(gen.below(static_cast<std::uint64_t>(max_len - min_len + 1)));
    const auto picks = gen.sample_without_replacement(static_cast<std::size_t>(vocab), n);
    induction_prompt p;
    for (auto t : picks) p.tokens.push_back(static_cast<int>(t));
    const auto i = 1 + static_cast<std::size_t>(gen.below(n - 4));  // 1 <= i <= n - 4
    p.tokens.push_back(p.tokens[i]);
    p.correct_positions = {static_cast<int>(i + 1)};
    return p;
}

// ---------------------------------------------------------------------------

struct toy_task_params {
    int n_classes = 2;
    int words_per_class = 24;
    int feature_dim = 4;
    double feature_noise = 0.3;
    double label_noise = 0.1;
    int pool_size = 4096;
    int test_size = 512;
    int max_k = 16;
    double sharpness = 8.0;
    double embed_noise = 0.3;
    std::uint64_t seed = 1;
};

struct toy_task_bundle {
    nlohmann::json task_manifest;  // without pool/test paths
    std::vector<dataset_item> pool;
    std::vector<dataset_item> test;
    toy_checkpoint checkpoint;
    embedding_table embeddings;
    std::vector<std::vector<double>> word_features;
};

inline std::string toy_label_word(int c) { return "c" + std::to_string(c); }

inline toy_task_bundle make_toy_task(const toy_task_params& prm)
{
    require(prm.n_classes >= 2 && prm.words_per_class >= 1 && prm.feature_dim >= prm.n_classes && prm.max_k >= 1,
            errc::invalid_argument, "toy task needs >= 2 classes and feature_dim >= n_classes");
    rng gen(prm.seed);
    const int n_words = prm.n_classes * prm.words_per_class;
    const int F = prm.feature_dim;
    const int C = prm.n_classes;

    toy_task_bundle b;
    for (int w = 0; w < n_words; ++w) {
        std::vector<double> f(static_cast<std::size_t>(F));
        for (auto& x : f) x = prm.feature_noise * gen.normal();
        f[static_cast<std::size_t>(w % C)] += 1.0;
        double n = 0.0;
        for (double x : f) n += x * x;
        n = std::sqrt(n);
        for (auto& x : f) x /= n;
        b.word_features.push_back(std::move(f));
    }

    std::vector<std::string> vocab;
    for (int w = 0; w < n_words; ++w) vocab.push_back("w" + std::to_string(w));
    for (int c = 0; c < C; ++c) vocab.push_back(toy_label_word(c));
    vocab.push_back("Label:");
    vocab.push_back("|");
    const int V = static_cast<int>(vocab.size());
    const int label_base = n_words;

    std::vector<std::string> labels;
    for (int c = 0; c < C; ++c) labels.push_back(toy_label_word(c));
    b.task_manifest = {{"name", "toy-features"},
                       {"labels", labels},
                       {"template", "{input} Label: {label}"},
                       {"separator", " | "},
                       {"forerunner", "Label:"},
                       {"tokenizer", {{"kind", "whitespace-toy"}, {"vocab", vocab}}}};

    auto draw = [&](const std::string& prefix, int count, double noise) {
        std::vector<dataset_item> items;
        for (int i = 0; i < count; ++i) {
            const int w = static_cast<int>(gen.below(static_cast<std::uint64_t>(n_words)));
            int label = w % C;
            if (gen.uniform() < noise) label = (label + 1 + static_cast<int>(gen.below(static_cast<std::uint64_t>(C - 1)))) % C;
            items.push_back({padded_id(prefix, static_cast<std::size_t>(i)), {"w" + std::to_string(w), label, toy_label_word(label)}});
        }
        return items;
    };
    b.pool = draw("pool", prm.pool_size, prm.label_noise);
    b.test = draw("test", prm.test_size, 0.0);

    // dense "retriever" embeddings: features plus noise, with extra noise dims
    const int emb_dim = F + 4;
    for (const auto* set : {&b.pool, &b.test}) {
        for (const auto& it : *set) {
            const int w = std::stoi(it.ex.input_text.substr(1));
            std::vector<float> e(static_cast<std::size_t>(emb_dim));
            for (int d = 0; d < emb_dim; ++d) {
                const double base = d < F ? b.word_features[static_cast<std::size_t>(w)][static_cast<std::size_t>(d)] : 0.0;
                e[static_cast<std::size_t>(d)] = static_cast<float>(base + prm.embed_noise * gen.normal());
            }
            b.embeddings.ids.push_back(it.id);
            b.embeddings.vectors.push_back(std::move(e));
        }
    }

    model_config c;
    c.n_layers = 2;
    c.n_heads = 2;
    c.n_kv_heads = 2;
    c.vocab_size = V;
    c.max_seq = 4 * prm.max_k + 4;
    const int P = c.max_seq;
    c.d_model = V + 3 * F + P + C;
    c.d_head = std::max({P, F, C});
    c.d_ff = 0;
    c.norm = norm_kind::rmsnorm;
    c.pos = pos_kind::learned;

    // residual layout: [token | features | position | prev1 features | prev2 features | label votes]
    const std::size_t tok = 0;
    const auto feat = static_cast<std::size_t>(V);
    const auto pos = feat + static_cast<std::size_t>(F);
    const auto prev1 = pos + static_cast<std::size_t>(P);
    const auto prev2 = prev1 + static_cast<std::size_t>(F);
    const auto vote = prev2 + static_cast<std::size_t>(F);
    const auto dh = static_cast<std::size_t>(c.d_head);
    const float root_dh = std::sqrt(static_cast<float>(dh));
    const float root3 = std::sqrt(3.0F);

    detail::weight_set w(c);
    for (int t = 0; t < V; ++t) {
        auto row = w.m("tok_embeddings.weight").row(static_cast<std::size_t>(t));
        row[tok + static_cast<std::size_t>(t)] = 1.0F;
        if (t < n_words) {
            for (int d = 0; d < F; ++d) {
                row[feat + static_cast<std::size_t>(d)] =
                    static_cast<float>(b.word_features[static_cast<std::size_t>(t)][static_cast<std::size_t>(d)]);
            }
        }
    }
    for (int p = 0; p < P; ++p) w.m("pos_embeddings.weight")(static_cast<std::size_t>(p), pos + static_cast<std::size_t>(p)) = 1.0F;
    for (int c_ = 0; c_ < C; ++c_) {
        w.m("output.weight")(static_cast<std::size_t>(label_base + c_), vote + static_cast<std::size_t>(c_)) = 1.0F;
    }
    const float unit_gain = 1.0F / std::sqrt(static_cast<float>(c.d_model));
    for (int l = 0; l < 2; ++l) {
        for (auto& v : w.vecs.at("layers." + std::to_string(l) + ".attn_norm.weight")) v = unit_gain;
    }

    // layer 0: head 0 looks one token back, head 1 two tokens back; both copy
    // the looked-at token's features (value f / sqrt(3) after normalization).
    auto& wq0 = w.m("layers.0.attn.wq");
    auto& wk0 = w.m("layers.0.attn.wk");
    auto& wv0 = w.m("layers.0.attn.wv");
    auto& wo0 = w.m("layers.0.attn.wo");
    const float beta0 = 25.0F * 3.0F * root_dh;
    for (std::size_t h = 0; h < 2; ++h) {
        const int back = static_cast<int>(h) + 1;
        const auto dst = h == 0 ? prev1 : prev2;
        for (int a = 0; a < P; ++a) {
            wq0(h * dh + static_cast<std::size_t>(a), pos + static_cast<std::size_t>(a)) = beta0;
            if (a >= back) wk0(h * dh + static_cast<std::size_t>(a), pos + static_cast<std::size_t>(a - back)) = 1.0F;
        }
        for (int d = 0; d < F; ++d) {
            wv0(h * dh + static_cast<std::size_t>(d), feat + static_cast<std::size_t>(d)) = 1.0F;
            wo0(dst + static_cast<std::size_t>(d), h * dh + static_cast<std::size_t>(d)) = root3;
        }
    }

    // layer 1 head 1: query = features one back (the query word, at the final
    // forerunner); key = features two back (the demo word, at a label token)
    // plus a faint copy of features one back so the query's own key carries
    // its features. Value copies the label token into its vote coordinate.
    auto& wq1 = w.m("layers.1.attn.wq");
    auto& wk1 = w.m("layers.1.attn.wk");
    auto& wv1 = w.m("layers.1.attn.wv");
    auto& wo1 = w.m("layers.1.attn.wo");
    const auto beta1 = static_cast<float>(prm.sharpness) * 3.0F * root_dh;
    const float faint = 0.05F;
    for (int d = 0; d < F; ++d) {
        wq1(dh + static_cast<std::size_t>(d), prev1 + static_cast<std::size_t>(d)) = beta1;
        wk1(dh + static_cast<std::size_t>(d), prev2 + static_cast<std::size_t>(d)) = 1.0F;
        wk1(dh + static_cast<std::size_t>(d), prev1 + static_cast<std::size_t>(d)) = faint;
    }
    for (int c_ = 0; c_ < C; ++c_) {
        wv1(dh + static_cast<std::size_t>(c_), tok + static_cast<std::size_t>(label_base + c_)) = 1.0F;
        wo1(vote + static_cast<std::size_t>(c_), dh + static_cast<std::size_t>(c_)) = root3;
    }
    // head (1, 0) stays all-zero: uniform attention, no output

    b.checkpoint = w.build();
    return b;
}

/// Model manifest: {"config": {...}, "weights": "<file>"}.
inline void save_model_manifest(const toy_checkpoint& ck, const std::filesystem::path& dir, const std::string& stem)
{
    std::filesystem::create_directories(dir);
    save_store(ck.store, dir / (stem + ".safetensors"));
    std::ofstream out(dir / (stem + ".json"));
    require(static_cast<bool>(out), errc::io_failure, "cannot write model manifest");
    out << nlohmann::json{{"kind", "model"}, {"config", ck.config}, {"weights", stem + ".safetensors"}}.dump(1) << '\n';
}

inline model load_model_manifest(const std::filesystem::path& path)
{
    std::ifstream in(path);
    require(static_cast<bool>(in), errc::io_failure, "cannot open model manifest '" + path.string() + "'");
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(in);
    } catch (const nlohmann::json::exception& ex) {
        fail(errc::invalid_argument, "model manifest: " + std::string(ex.what()));
    }
    const auto cfg = j.at("config").get<model_config>();
    return load_model(load_store(path.parent_path() / j.at("weights").get<std::string>()), cfg);
}

/// Writes task.json, pool.jsonl, test.jsonl, model.{json,safetensors} and
/// embeddings.safetensors into `dir`.
inline void write_toy_task(const toy_task_bundle& b, const std::filesystem::path& dir)
{
    std::filesystem::create_directories(dir);
    auto manifest = b.task_manifest;
    manifest["pool"] = "pool.jsonl";
    manifest["test"] = "test.jsonl";
    {
        std::ofstream out(dir / "task.json");
        out << manifest.dump(1) << '\n';
    }
    {
        std::ofstream out(dir / "pool.jsonl");
        write_jsonl_examples(out, b.pool);
    }
    {
        std::ofstream out(dir / "test.jsonl");
        write_jsonl_examples(out, b.test);
    }
    save_model_manifest(b.checkpoint, dir, "model");
    save_embedding_table(b.embeddings, dir / "embeddings.safetensors");
}

}  // namespace iclprobe
