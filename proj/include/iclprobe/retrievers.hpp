#pragma once

// Baseline demonstration scorers: Okapi BM25 over the demonstration pool,
// cosine similarity over externally produced embeddings, and the top-k /
// random selection that turns scores into an ordered demonstration list.

#include <algorithm>
#include <cctype>
#include <cmath>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "json.hpp"

#include "iclprobe/error.hpp"
#include "iclprobe/rng.hpp"
#include "iclprobe/tensor_io.hpp"

namespace iclprobe {

/// Lowercase, split on anything that is not [a-z0-9], drop empties.
inline std::vector<std::string> bm25_tokenize(std::string_view text)
{
    std::vector<std::string> out;
    std::string cur;
    for (char ch : text) {
        const auto c = static_cast<unsigned char>(ch);
        if (std::isalnum(c)) {
            cur.push_back(static_cast<char>(std::tolower(c)));
        } else if (!cur.empty()) {
            out.push_back(std::move(cur));
            cur.clear();
        }
    }
    if (!cur.empty()) out.push_back(std::move(cur));
    return out;
}

struct bm25_index {
    std::vector<std::unordered_map<std::string, int>> doc_term_freqs;
    std::vector<int> doc_lengths;
    double avg_doc_len = 0.0;
    std::unordered_map<std::string, int> doc_freq;
    int n_docs = 0;
    double k1 = 1.2;
    double b = 0.75;

    double idf(const std::string& term) const
    {
        auto it = doc_freq.find(term);
        const double df = it == doc_freq.end() ? 0.0 : it->second;
        return std::log((n_docs - df + 0.5) / (df + 0.5) + 1.0);
    }
};

inline bm25_index bm25_build(std::span<const std::string> corpus, double k1 = 1.2, double b = 0.75)
{
    require(!corpus.empty(), errc::empty_input, "BM25 corpus is empty");
    bm25_index idx;
    idx.k1 = k1;
    idx.b = b;
    idx.n_docs = static_cast<int>(corpus.size());
    long total = 0;
    for (const auto& doc : corpus) {
        std::unordered_map<std::string, int> tf;
        const auto terms = bm25_tokenize(doc);
        for (const auto& t : terms) ++tf[t];
        for (const auto& [t, _] : tf) ++idx.doc_freq[t];
        idx.doc_lengths.push_back(static_cast<int>(terms.size()));
        total += static_cast<long>(terms.size());
        idx.doc_term_freqs.push_back(std::move(tf));
    }
    idx.avg_doc_len = static_cast<double>(total) / static_cast<double>(idx.n_docs);
    return idx;
}

/// Okapi BM25 with the +1-smoothed IDF. Every query token contributes, so a
/// repeated query term counts once per occurrence.
inline double bm25_score(const bm25_index& idx, std::string_view query, int doc)
{
    require(doc >= 0 && doc < idx.n_docs, errc::index_out_of_range,
            "document " + std::to_string(doc) + " of " + std::to_string(idx.n_docs));
    const auto& tf = idx.doc_term_freqs[static_cast<std::size_t>(doc)];
    const double len_ratio =
        idx.avg_doc_len > 0.0 ? idx.doc_lengths[static_cast<std::size_t>(doc)] / idx.avg_doc_len : 1.0;
    double score = 0.0;
    for (const auto& term : bm25_tokenize(query)) {
        auto it = tf.find(term);
        if (it == tf.end()) continue;
        const double f = it->second;
        score += idx.idf(term) * f * (idx.k1 + 1.0) / (f + idx.k1 * (1.0 - idx.b + idx.b * len_ratio));
    }
    return score;
}

/// Externally produced embeddings, one row per id.
struct embedding_table {
    std::vector<std::vector<float>> vectors;
    std::vector<std::string> ids;

    int dim() const { return vectors.empty() ? 0 : static_cast<int>(vectors[0].size()); }

    int row_of(const std::string& id) const
    {
        auto it = std::find(ids.begin(), ids.end(), id);
        require(it != ids.end(), errc::index_out_of_range, "embedding id '" + id + "' not in table");
        return static_cast<int>(it - ids.begin());
    }
};

/// Reads tensor "embeddings" [n, dim]; ids come from the "ids" metadata key
/// (a JSON array of strings).
inline embedding_table load_embedding_table(const std::filesystem::path& path)
{
    const auto store = load_store(path);
    const auto& e = store.entry("embeddings");
    require(e.shape.size() == 2, errc::shape_mismatch, "'embeddings' must be rank 2");
    const auto n = static_cast<std::size_t>(e.shape[0]);
    const auto dim = static_cast<std::size_t>(e.shape[1]);
    auto it = store.metadata().find("ids");
    require(it != store.metadata().end(), errc::malformed_header, "embedding table lacks the 'ids' metadata entry");
    embedding_table t;
    try {
        t.ids = nlohmann::json::parse(it->second).get<std::vector<std::string>>();
    } catch (const nlohmann::json::exception& ex) {
        fail(errc::malformed_header, std::string("'ids' metadata: ") + ex.what());
    }
    require(t.ids.size() == n, errc::shape_mismatch,
            std::to_string(t.ids.size()) + " ids for " + std::to_string(n) + " embedding rows");
    const auto flat = store.values("embeddings");
    for (std::size_t r = 0; r < n; ++r) {
        t.vectors.emplace_back(flat.begin() + static_cast<std::ptrdiff_t>(r * dim),
                               flat.begin() + static_cast<std::ptrdiff_t>((r + 1) * dim));
    }
    return t;
}

inline void save_embedding_table(const embedding_table& t, const std::filesystem::path& path)
{
    require(t.vectors.size() == t.ids.size(), errc::shape_mismatch, "row count differs from id count");
    const auto dim = static_cast<std::size_t>(t.dim());
    std::vector<float> flat;
    for (const auto& v : t.vectors) {
        require(v.size() == dim, errc::dimension_mismatch, "ragged embedding rows");
        flat.insert(flat.end(), v.begin(), v.end());
    }
    tensor_store store;
    store.add("embeddings", {t.vectors.size(), dim}, flat);
    store.metadata()["ids"] = nlohmann::json(t.ids).dump();
    save_store(store, path);
}

inline double cosine(std::span<const float> a, std::span<const float> b)
{
    require(a.size() == b.size(), errc::dimension_mismatch,
            "vectors of dimension " + std::to_string(a.size()) + " and " + std::to_string(b.size()));
    double dot = 0.0, na = 0.0, nb = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        dot += static_cast<double>(a[i]) * b[i];
        na += static_cast<double>(a[i]) * a[i];
        nb += static_cast<double>(b[i]) * b[i];
    }
    require(na > 0.0, errc::zero_vector, "first vector has zero norm");
    require(nb > 0.0, errc::zero_vector, "second vector has zero norm");
    return std::clamp(dot / (std::sqrt(na) * std::sqrt(nb)), -1.0, 1.0);
}

inline double dense_score(const embedding_table& table, std::span<const float> query_vec, int doc)
{
    require(doc >= 0 && static_cast<std::size_t>(doc) < table.vectors.size(), errc::index_out_of_range,
            "document " + std::to_string(doc));
    return cosine(query_vec, table.vectors[static_cast<std::size_t>(doc)]);
}

enum class select_mode { top_k, random };

struct scored_doc {
    int doc = 0;
    double score = 0.0;
};

/// top_k: the k best docs (ties to the lower doc id), returned in ascending
/// score order so the most similar demonstration ends up next to the query.
/// random: k docs uniformly without replacement, in draw order.
inline std::vector<int> select(std::span<const scored_doc> scores, int k, std::optional<std::uint64_t> seed,
                               select_mode mode)
{
    require(k >= 0 && static_cast<std::size_t>(k) <= scores.size(), errc::invalid_argument,
            "cannot select " + std::to_string(k) + " of " + std::to_string(scores.size()) + " documents");
    std::vector<int> out;
    if (mode == select_mode::random) {
        rng gen(seed.value_or(0));
        for (auto i : gen.sample_without_replacement(scores.size(), static_cast<std::size_t>(k))) {
            out.push_back(scores[i].doc);
        }
        return out;
    }
    std::vector<scored_doc> sorted(scores.begin(), scores.end());
    std::sort(sorted.begin(), sorted.end(), [](const scored_doc& a, const scored_doc& b) {
        return a.score != b.score ? a.score > b.score : a.doc < b.doc;
    });
    for (int i = k - 1; i >= 0; --i) out.push_back(sorted[static_cast<std::size_t>(i)].doc);
    return out;
}

}  // namespace iclprobe
