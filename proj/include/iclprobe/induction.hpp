#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "iclprobe/error.hpp"
#include "iclprobe/model.hpp"
#include "iclprobe/prompt.hpp"

namespace iclprobe {

struct head_id {
    int layer = 0;
    int head = 0;

    auto operator<=>(const head_id&) const = default;
};

/// s(h) for one head: per-prompt value in [0, 1], or the mean over a
/// calibration set once aggregated.
struct head_score {
    head_id id;
    double score = 0.0;
};

enum class rep_role { demo_label, query_last };

/// d_j = W_Q^T W_K h_j for one token, length d_model.
struct subspace_rep {
    std::vector<double> vector;
    int position = 0;
    rep_role role = rep_role::demo_label;
    int demo = -1;  // owning demonstration for label reps
};

/// Where the metric-relevant tokens of a prompt sit. Obtained from
/// `assemble` for toy runs or from a capture manifest for real models.
struct prompt_layout {
    std::vector<token_span> label_spans;
    std::vector<int> demo_label_ids;
    int query_last_idx = 0;
    int seq_len = 0;

    static prompt_layout of(const assembled_prompt& p)
    {
        return {p.label_spans, p.demo_label_ids, p.query_last_idx, static_cast<int>(p.tokens.size())};
    }

    std::vector<int> correct_positions(int query_label_id) const
    {
        std::vector<int> out;
        for (std::size_t i = 0; i < label_spans.size(); ++i) {
            if (demo_label_ids[i] != query_label_id) continue;
            for (int t = label_spans[i].begin; t < label_spans[i].end; ++t) out.push_back(t);
        }
        return out;
    }

    void validate() const
    {
        require(label_spans.size() == demo_label_ids.size(), errc::capture_mismatch,
                "label span count differs from demonstration label count");
        require(query_last_idx >= 0 && query_last_idx < seq_len, errc::capture_mismatch,
                "query_last_idx " + std::to_string(query_last_idx) + " outside sequence of " + std::to_string(seq_len));
        int prev_end = 0;
        for (const auto& s : label_spans) {
            require(s.begin >= prev_end && s.begin < s.end && s.end <= query_last_idx, errc::capture_mismatch,
                    "label span [" + std::to_string(s.begin) + "," + std::to_string(s.end)
                        + ") is empty, unordered, or not before the query");
            prev_end = s.end;
        }
    }
};

/// Activations of one prompt, from a live forward pass or a capture file.
struct prompt_activations {
    int n_layers = 0;
    int n_heads = 0;
    int seq_len = 0;
    std::vector<std::vector<float>> attn_rows;  // layer * n_heads + head; empty when not captured
    std::map<int, matrix> hidden;               // layer -> seq x d_model post-norm input of attention

    static prompt_activations of(const forward_output& f, int n_layers)
    {
        prompt_activations a;
        a.n_layers = n_layers;
        a.n_heads = f.n_heads;
        a.seq_len = static_cast<int>(f.logits.rows);
        a.attn_rows = f.attn_rows;
        a.hidden = f.post_norm_hidden;
        return a;
    }
};

inline double score_head(std::span<const float> attn_row, std::span<const int> correct_positions)
{
    double s = 0.0;
    for (int p : correct_positions) {
        require(p >= 0 && static_cast<std::size_t>(p) < attn_row.size(), errc::index_out_of_range,
                "position " + std::to_string(p) + " outside attention row of length " + std::to_string(attn_row.size()));
        s += attn_row[static_cast<std::size_t>(p)];
    }
    return s;
}

/// Argmax by score; ties go to the lower layer, then the lower head.
inline head_id select_best_head(std::span<const head_score> scores)
{
    require(!scores.empty(), errc::empty_input, "no head scores to select from");
    const head_score* best = &scores[0];
    for (const auto& s : scores) {
        if (s.score > best->score || (s.score == best->score && s.id < best->id)) best = &s;
    }
    return best->id;
}

/// s(h) of every head for one prompt.
inline std::vector<head_score> score_all_heads(const prompt_activations& acts, std::span<const int> correct_positions)
{
    require(!acts.attn_rows.empty(), errc::missing_capture, "attention rows were not captured");
    std::vector<head_score> out;
    for (int l = 0; l < acts.n_layers; ++l) {
        for (int h = 0; h < acts.n_heads; ++h) {
            const auto& row = acts.attn_rows[static_cast<std::size_t>(l * acts.n_heads + h)];
            out.push_back({{l, h}, score_head(row, correct_positions)});
        }
    }
    return out;
}

/// Mean s(h) per head across prompts. Each inner list must cover the same
/// heads in the same order.
inline std::vector<head_score> mean_head_scores(std::span<const std::vector<head_score>> per_prompt)
{
    require(!per_prompt.empty(), errc::empty_input, "no prompts to aggregate");
    std::vector<head_score> out = per_prompt[0];
    for (auto& s : out) s.score = 0.0;
    for (const auto& scores : per_prompt) {
        require(scores.size() == out.size(), errc::length_mismatch, "prompts scored different head sets");
        for (std::size_t i = 0; i < out.size(); ++i) {
            require(scores[i].id == out[i].id, errc::length_mismatch, "prompts scored heads in different orders");
            out[i].score += scores[i].score;
        }
    }
    for (auto& s : out) s.score /= static_cast<double>(per_prompt.size());
    return out;
}

/// W_Q^T (W_K h). Computed in double from float weights.
inline subspace_rep extract_rep(std::span<const float> hidden, const head_weights& w, int position = 0,
                                rep_role role = rep_role::demo_label)
{
    require(w.wq.rows == w.wk.rows && w.wq.cols == w.wk.cols, errc::dimension_mismatch,
            "W_Q and W_K must have the same shape");
    require(hidden.size() == w.wk.cols, errc::dimension_mismatch,
            "hidden state has " + std::to_string(hidden.size()) + " entries, projections expect " + std::to_string(w.wk.cols));
    const auto dh = w.wk.rows;
    const auto dm = w.wk.cols;
    std::vector<double> key(dh, 0.0);
    for (std::size_t r = 0; r < dh; ++r) {
        double acc = 0.0;
        for (std::size_t c = 0; c < dm; ++c) acc += static_cast<double>(w.wk(r, c)) * hidden[c];
        key[r] = acc;
    }
    subspace_rep rep;
    rep.vector.assign(dm, 0.0);
    for (std::size_t r = 0; r < dh; ++r) {
        for (std::size_t c = 0; c < dm; ++c) rep.vector[c] += static_cast<double>(w.wq(r, c)) * key[r];
    }
    rep.position = position;
    rep.role = role;
    return rep;
}

enum class label_pooling { per_token, mean };

struct prompt_reps {
    std::vector<subspace_rep> labels;
    subspace_rep query;
};

/// Label-token and query-token representations of one prompt in the
/// subspace of `head`. Multi-token labels give one rep per token, or one
/// mean rep per demonstration under `label_pooling::mean`.
inline prompt_reps extract_prompt_reps(const prompt_activations& acts, const prompt_layout& layout, head_id head,
                                       const head_weights& w, label_pooling pooling = label_pooling::per_token)
{
    auto it = acts.hidden.find(head.layer);
    require(it != acts.hidden.end(), errc::missing_capture,
            "hidden states of layer " + std::to_string(head.layer) + " are missing from the capture");
    const auto& h = it->second;
    require(static_cast<int>(h.rows) > layout.query_last_idx, errc::capture_mismatch,
            "hidden states cover " + std::to_string(h.rows) + " positions, query sits at "
                + std::to_string(layout.query_last_idx));
    prompt_reps out;
    for (std::size_t d = 0; d < layout.label_spans.size(); ++d) {
        const auto& span = layout.label_spans[d];
        require(span.end <= static_cast<int>(h.rows), errc::capture_mismatch, "label span beyond captured positions");
        if (pooling == label_pooling::per_token) {
            for (int t = span.begin; t < span.end; ++t) {
                auto rep = extract_rep(h.row(static_cast<std::size_t>(t)), w, t, rep_role::demo_label);
                rep.demo = static_cast<int>(d);
                out.labels.push_back(std::move(rep));
            }
        } else {
            subspace_rep pooled;
            pooled.position = span.begin;
            pooled.demo = static_cast<int>(d);
            for (int t = span.begin; t < span.end; ++t) {
                auto rep = extract_rep(h.row(static_cast<std::size_t>(t)), w, t);
                if (pooled.vector.empty()) pooled.vector.assign(rep.vector.size(), 0.0);
                for (std::size_t i = 0; i < rep.vector.size(); ++i) pooled.vector[i] += rep.vector[i];
            }
            for (auto& v : pooled.vector) v /= static_cast<double>(span.size());
            out.labels.push_back(std::move(pooled));
        }
    }
    out.query = extract_rep(h.row(static_cast<std::size_t>(layout.query_last_idx)), w, layout.query_last_idx,
                            rep_role::query_last);
    return out;
}

struct probe_result {
    std::vector<head_score> head_scores;  // per-prompt s(h), empty when the best head was given
    std::optional<prompt_reps> reps;      // present when a best head was given
};

/// One probe over live toy-model activations. Without a fixed head it only
/// scores heads (aggregation across prompts happens elsewhere); with one it
/// extracts that head's subspace reps.
inline probe_result probe_prompt(const model& m, const assembled_prompt& prompt, int query_label_id,
                                 std::optional<head_id> best, label_pooling pooling = label_pooling::per_token)
{
    capture_spec spec;
    spec.attn_rows = !best.has_value();
    if (best) spec.hidden_layers = {best->layer};
    const auto fwd = m.forward(prompt.tokens, spec);
    const auto acts = prompt_activations::of(fwd, m.config().n_layers);
    const auto layout = prompt_layout::of(prompt);
    probe_result r;
    if (!best) {
        r.head_scores = score_all_heads(acts, layout.correct_positions(query_label_id));
    } else {
        r.reps = extract_prompt_reps(acts, layout, *best, m.head_qk(best->layer, best->head), pooling);
    }
    return r;
}

/// Same as above over captured activations; `weights` supplies W_Q/W_K of
/// the fixed head.
inline probe_result probe_prompt(const prompt_activations& acts, const prompt_layout& layout, int query_label_id,
                                 std::optional<head_id> best, const head_weights* weights,
                                 label_pooling pooling = label_pooling::per_token)
{
    layout.validate();
    probe_result r;
    if (!best) {
        r.head_scores = score_all_heads(acts, layout.correct_positions(query_label_id));
    } else {
        require(weights != nullptr, errc::missing_capture, "W_Q/W_K of the selected head are missing");
        r.reps = extract_prompt_reps(acts, layout, *best, *weights, pooling);
    }
    return r;
}

}  // namespace iclprobe
