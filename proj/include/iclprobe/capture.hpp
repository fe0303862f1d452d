#pragma once

/*
Capture files: activations of a (possibly large) model over a list of
prompts, recorded so affinity/diversity can be computed offline. A capture is
a JSON manifest plus one tensor container:

{
  "format": "iclprobe-capture",
  "version": 1,
  "mode": "head-search" | "fixed-head",
  "tensors": "capture.safetensors",            // relative to the manifest
  "model_config": { ...model_config fields... },
  "best_head": {"layer": 3, "head": 7},        // optional, fixed-head mode
  "head_weights": [ {"layer": 3, "head": 7, "wq": "<name>", "wk": "<name>"} ],
  "prompts": [ {
      "instance_id": "test-000000",
      "seq_len": 57,
      "capture_tensor_names": {
          "attn_rows": "<name>",                // [n_layers, n_heads, seq], optional
          "hidden": {"3": "<name>"},            // layer -> [seq, d_model]
          "candidate_logits": "<name>"          // [n_candidates], final position
      },
      "label_spans": [[begin, end], ...],       // half-open token ranges
      "demo_label_ids": [0, 1, ...],
      "query_last_idx": 56,
      "query_label_id": 1,
      "candidate_token_ids": [4997, 17821],     // first token of each label, by label id
      "baseline_scores": {"bm25": 1.3},         // optional
      "exporter_metrics": {"affinity": 0.41, "diversity": 2.7}   // optional cross-check
  } ]
}

wq / wk tensors are [d_head, d_model], already sliced per head (grouped-query
models store the shared group's K slice).
*/

#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"

#include "iclprobe/error.hpp"
#include "iclprobe/induction.hpp"
#include "iclprobe/model.hpp"
#include "iclprobe/tensor_io.hpp"

namespace iclprobe {

enum class capture_mode { head_search, fixed_head };

struct captured_prompt {
    std::string instance_id;
    int seq_len = 0;
    std::optional<std::string> attn_rows_tensor;
    std::map<int, std::string> hidden_tensors;
    std::string candidate_logits_tensor;
    prompt_layout layout;
    int query_label_id = 0;
    std::vector<int> candidate_token_ids;
    std::map<std::string, double> baseline_scores;
    std::optional<double> exporter_affinity;
    std::optional<double> exporter_diversity;
};

struct captured_head {
    head_id id;
    std::string wq_tensor;
    std::string wk_tensor;
};

class capture_set {
  public:
    capture_mode mode = capture_mode::head_search;
    model_config config;
    std::optional<head_id> best_head;
    std::vector<captured_head> heads;
    std::vector<captured_prompt> prompts;
    tensor_store store;

    prompt_activations activations(std::size_t i) const
    {
        const auto& p = prompts.at(i);
        prompt_activations a;
        a.n_layers = config.n_layers;
        a.n_heads = config.n_heads;
        a.seq_len = p.seq_len;
        if (p.attn_rows_tensor) {
            const auto& e = store.entry(*p.attn_rows_tensor);
            const std::vector<std::uint64_t> expected{static_cast<std::uint64_t>(config.n_layers),
                                                      static_cast<std::uint64_t>(config.n_heads),
                                                      static_cast<std::uint64_t>(p.seq_len)};
            require(e.shape == expected, errc::capture_mismatch,
                    "attention rows of '" + p.instance_id + "' do not have shape [n_layers, n_heads, seq_len]");
            const auto flat = store.values(*p.attn_rows_tensor);
            const auto seq = static_cast<std::size_t>(p.seq_len);
            for (std::size_t r = 0; r < flat.size() / seq; ++r) {
                a.attn_rows.emplace_back(flat.begin() + static_cast<std::ptrdiff_t>(r * seq),
                                         flat.begin() + static_cast<std::ptrdiff_t>((r + 1) * seq));
            }
        }
        for (const auto& [layer, name] : p.hidden_tensors) {
            a.hidden[layer] = detail::load_matrix(store, name, static_cast<std::size_t>(p.seq_len),
                                                  static_cast<std::size_t>(config.d_model));
        }
        return a;
    }

    std::vector<float> candidate_logits(std::size_t i) const
    {
        const auto& p = prompts.at(i);
        auto v = store.values(p.candidate_logits_tensor);
        require(v.size() == p.candidate_token_ids.size(), errc::capture_mismatch,
                "candidate logits of '" + p.instance_id + "' do not match its candidate list");
        return v;
    }

    const captured_head* find_head(head_id id) const
    {
        for (const auto& h : heads) {
            if (h.id == id) return &h;
        }
        return nullptr;
    }

    head_weights weights(head_id id) const
    {
        const auto* h = find_head(id);
        require(h != nullptr, errc::missing_capture,
                "W_Q/W_K of head (" + std::to_string(id.layer) + ", " + std::to_string(id.head) + ") are not in the capture");
        const auto dh = static_cast<std::size_t>(config.d_head);
        const auto dm = static_cast<std::size_t>(config.d_model);
        return {detail::load_matrix(store, h->wq_tensor, dh, dm), detail::load_matrix(store, h->wk_tensor, dh, dm)};
    }
};

inline std::string to_string(capture_mode m) { return m == capture_mode::head_search ? "head-search" : "fixed-head"; }

inline nlohmann::json capture_manifest_json(const capture_set& c, const std::string& tensors_file)
{
    using nlohmann::json;
    json j;
    j["format"] = "iclprobe-capture";
    j["version"] = 1;
    j["mode"] = to_string(c.mode);
    j["tensors"] = tensors_file;
    j["model_config"] = c.config;
    if (c.best_head) j["best_head"] = {{"layer", c.best_head->layer}, {"head", c.best_head->head}};
    j["head_weights"] = json::array();
    for (const auto& h : c.heads) {
        j["head_weights"].push_back({{"layer", h.id.layer}, {"head", h.id.head}, {"wq", h.wq_tensor}, {"wk", h.wk_tensor}});
    }
    j["prompts"] = json::array();
    for (const auto& p : c.prompts) {
        json names;
        if (p.attn_rows_tensor) names["attn_rows"] = *p.attn_rows_tensor;
        json hidden = json::object();
        for (const auto& [l, n] : p.hidden_tensors) hidden[std::to_string(l)] = n;
        names["hidden"] = hidden;
        names["candidate_logits"] = p.candidate_logits_tensor;
        json spans = json::array();
        for (const auto& s : p.layout.label_spans) spans.push_back({s.begin, s.end});
        json pj{{"instance_id", p.instance_id},
                {"seq_len", p.seq_len},
                {"capture_tensor_names", names},
                {"label_spans", spans},
                {"demo_label_ids", p.layout.demo_label_ids},
                {"query_last_idx", p.layout.query_last_idx},
                {"query_label_id", p.query_label_id},
                {"candidate_token_ids", p.candidate_token_ids},
                {"baseline_scores", p.baseline_scores}};
        if (p.exporter_affinity || p.exporter_diversity) {
            json em = json::object();
            if (p.exporter_affinity) em["affinity"] = *p.exporter_affinity;
            if (p.exporter_diversity) em["diversity"] = *p.exporter_diversity;
            pj["exporter_metrics"] = em;
        }
        j["prompts"].push_back(std::move(pj));
    }
    return j;
}

/// Writes `<stem>.json` and `<stem>.safetensors` into `dir`; returns the
/// manifest path.
inline std::filesystem::path save_capture(const capture_set& c, const std::filesystem::path& dir, const std::string& stem)
{
    std::filesystem::create_directories(dir);
    const std::string tensors_file = stem + ".safetensors";
    save_store(c.store, dir / tensors_file);
    const auto manifest = dir / (stem + ".json");
    std::ofstream out(manifest);
    require(static_cast<bool>(out), errc::io_failure, "cannot write '" + manifest.string() + "'");
    out << capture_manifest_json(c, tensors_file).dump(1) << '\n';
    return manifest;
}

inline capture_set load_capture(const std::filesystem::path& manifest_path)
{
    std::ifstream in(manifest_path);
    require(static_cast<bool>(in), errc::io_failure, "cannot open capture manifest '" + manifest_path.string() + "'");
    capture_set c;
    try {
        const auto j = nlohmann::json::parse(in);
        require(j.value("format", std::string()) == "iclprobe-capture", errc::capture_mismatch,
                "manifest format is not iclprobe-capture");
        const auto mode = j.at("mode").get<std::string>();
        require(mode == "head-search" || mode == "fixed-head", errc::capture_mismatch, "unknown capture mode '" + mode + "'");
        c.mode = mode == "head-search" ? capture_mode::head_search : capture_mode::fixed_head;
        c.config = j.at("model_config").get<model_config>();
        if (j.contains("best_head")) c.best_head = head_id{j["best_head"].at("layer").get<int>(), j["best_head"].at("head").get<int>()};
        for (const auto& h : j.value("head_weights", nlohmann::json::array())) {
            c.heads.push_back({{h.at("layer").get<int>(), h.at("head").get<int>()}, h.at("wq").get<std::string>(),
                               h.at("wk").get<std::string>()});
        }
        for (const auto& pj : j.at("prompts")) {
            captured_prompt p;
            p.instance_id = pj.at("instance_id").get<std::string>();
            p.seq_len = pj.at("seq_len").get<int>();
            const auto& names = pj.at("capture_tensor_names");
            if (names.contains("attn_rows")) p.attn_rows_tensor = names["attn_rows"].get<std::string>();
            const auto hidden = names.value("hidden", nlohmann::json::object());
            for (const auto& [l, n] : hidden.items()) {
                p.hidden_tensors[std::stoi(l)] = n.get<std::string>();
            }
            p.candidate_logits_tensor = names.at("candidate_logits").get<std::string>();
            for (const auto& s : pj.at("label_spans")) p.layout.label_spans.push_back({s.at(0).get<int>(), s.at(1).get<int>()});
            p.layout.demo_label_ids = pj.at("demo_label_ids").get<std::vector<int>>();
            p.layout.query_last_idx = pj.at("query_last_idx").get<int>();
            p.layout.seq_len = p.seq_len;
            p.query_label_id = pj.at("query_label_id").get<int>();
            p.candidate_token_ids = pj.at("candidate_token_ids").get<std::vector<int>>();
            if (pj.contains("baseline_scores")) p.baseline_scores = pj["baseline_scores"].get<std::map<std::string, double>>();
            if (pj.contains("exporter_metrics")) {
                const auto& em = pj["exporter_metrics"];
                if (em.contains("affinity")) p.exporter_affinity = em["affinity"].get<double>();
                if (em.contains("diversity")) p.exporter_diversity = em["diversity"].get<double>();
            }
            p.layout.validate();
            require(p.query_label_id >= 0 && p.query_label_id < static_cast<int>(p.candidate_token_ids.size()),
                    errc::capture_mismatch, "query_label_id of '" + p.instance_id + "' has no candidate");
            c.prompts.push_back(std::move(p));
        }
        c.store = load_store(manifest_path.parent_path() / j.at("tensors").get<std::string>());
    } catch (const nlohmann::json::exception& ex) {
        fail(errc::capture_mismatch, "capture manifest: " + std::string(ex.what()));
    }
    c.config.validate();
    for (const auto& p : c.prompts) {
        if (p.attn_rows_tensor) require(c.store.contains(*p.attn_rows_tensor), errc::missing_capture, *p.attn_rows_tensor);
        for (const auto& [_, n] : p.hidden_tensors) require(c.store.contains(n), errc::missing_capture, n);
        require(c.store.contains(p.candidate_logits_tensor), errc::missing_capture, p.candidate_logits_tensor);
    }
    return c;
}

}  // namespace iclprobe
