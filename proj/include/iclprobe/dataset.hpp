#pragma once

// Dataset ingestion. Examples are JSONL lines {"text", "label", "label_text"}
// with an optional "id"; a task manifest names the label set, the prompt
// template and the tokenizer:
//
//   {
//     "name": "toy",
//     "labels": ["neg", "pos"],                 // label_text by label id
//     "template": "{input} Label: {label}",
//     "separator": " ",
//     "forerunner": ":",
//     "tokenizer": {"kind": "whitespace-toy", "vocab": ["w0", ...]},
//     "pool": "pool.jsonl",                     // demonstration pool
//     "test": "test.jsonl"
//   }
//
// Relative paths resolve against the manifest's directory.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "iclprobe/error.hpp"
#include "iclprobe/prompt.hpp"

namespace iclprobe {

struct dataset_item {
    std::string id;
    example ex;
};

inline std::string padded_id(const std::string& prefix, std::size_t i)
{
    char buf[32];
    std::snprintf(buf, sizeof buf, "%06zu", i);
    return prefix + "-" + buf;
}

inline std::vector<dataset_item> read_jsonl_examples(std::istream& in, const std::string& id_prefix)
{
    std::vector<dataset_item> out;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        try {
            const auto j = nlohmann::json::parse(line);
            dataset_item item;
            item.ex.input_text = j.at("text").get<std::string>();
            item.ex.label_id = j.at("label").get<int>();
            item.ex.label_text = j.value("label_text", std::string{});
            item.id = j.contains("id") ? j["id"].get<std::string>() : padded_id(id_prefix, out.size());
            out.push_back(std::move(item));
        } catch (const nlohmann::json::exception& ex) {
            fail(errc::invalid_argument, "JSONL line " + std::to_string(lineno) + ": " + ex.what());
        }
    }
    return out;
}

inline std::vector<dataset_item> load_jsonl_examples(const std::filesystem::path& path, const std::string& id_prefix)
{
    std::ifstream in(path);
    require(static_cast<bool>(in), errc::io_failure, "cannot open '" + path.string() + "'");
    return read_jsonl_examples(in, id_prefix);
}

inline void write_jsonl_examples(std::ostream& out, const std::vector<dataset_item>& items)
{
    for (const auto& it : items) {
        out << nlohmann::json{{"id", it.id}, {"text", it.ex.input_text}, {"label", it.ex.label_id},
                              {"label_text", it.ex.label_text}}
                   .dump()
            << '\n';
    }
}

struct task {
    std::string name;
    std::vector<std::string> labels;
    std::string templ{default_template};
    std::string separator = " ";
    std::string forerunner = ":";
    tokenizer tok;
    nlohmann::json tokenizer_json;
    std::vector<dataset_item> pool;
    std::vector<dataset_item> test;

    /// Fills a missing label_text from the label set and checks label ids.
    void normalize()
    {
        require(!labels.empty(), errc::invalid_argument, "task '" + name + "' has no labels");
        for (auto* set : {&pool, &test}) {
            for (auto& it : *set) {
                require(it.ex.label_id >= 0 && it.ex.label_id < static_cast<int>(labels.size()), errc::invalid_argument,
                        "example '" + it.id + "' has label " + std::to_string(it.ex.label_id) + " outside the label set");
                if (it.ex.label_text.empty()) it.ex.label_text = labels[static_cast<std::size_t>(it.ex.label_id)];
            }
        }
    }

    /// First token of each label text, indexed by label id.
    std::vector<int> candidate_tokens() const
    {
        std::vector<int> out;
        for (const auto& l : labels) {
            std::vector<int> ids;
            try {
                ids = tok.encode(l);
            } catch (const error& e) {
                fail(errc::capture_mismatch, "label candidate '" + l + "' is not in the vocabulary: " + e.what());
            }
            require(!ids.empty(), errc::empty_label, "label '" + l + "' tokenizes to nothing");
            out.push_back(ids.front());
        }
        return out;
    }
};

inline tokenizer tokenizer_from_json(const nlohmann::json& j, const std::filesystem::path& base)
{
    const auto kind = j.value("kind", std::string("whitespace-toy"));
    if (kind == "byte-level-toy") return tokenizer::byte_level();
    if (kind == "external-ids") return tokenizer::external_ids();
    require(kind == "whitespace-toy", errc::invalid_argument, "unknown tokenizer kind '" + kind + "'");
    std::vector<std::string> words;
    if (j.contains("vocab")) {
        words = j["vocab"].get<std::vector<std::string>>();
    } else {
        require(j.contains("vocab_file"), errc::invalid_argument, "whitespace tokenizer needs vocab or vocab_file");
        std::ifstream in(base / j["vocab_file"].get<std::string>());
        require(static_cast<bool>(in), errc::io_failure, "cannot open vocab_file");
        words = nlohmann::json::parse(in).get<std::vector<std::string>>();
    }
    return tokenizer::whitespace(std::move(words));
}

inline task load_task(const std::filesystem::path& manifest_path)
{
    std::ifstream in(manifest_path);
    require(static_cast<bool>(in), errc::io_failure, "cannot open task manifest '" + manifest_path.string() + "'");
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(in);
    } catch (const nlohmann::json::exception& ex) {
        fail(errc::invalid_argument, "task manifest: " + std::string(ex.what()));
    }
    const auto base = manifest_path.parent_path();
    task t;
    t.name = j.value("name", manifest_path.stem().string());
    t.labels = j.at("labels").get<std::vector<std::string>>();
    t.templ = j.value("template", std::string(default_template));
    t.separator = j.value("separator", std::string(" "));
    t.forerunner = j.value("forerunner", std::string(":"));
    t.tokenizer_json = j.value("tokenizer", nlohmann::json::object());
    t.tok = tokenizer_from_json(t.tokenizer_json, base);
    t.pool = load_jsonl_examples(base / j.at("pool").get<std::string>(), "pool");
    t.test = load_jsonl_examples(base / j.at("test").get<std::string>(), "test");
    t.normalize();
    return t;
}

}  // namespace iclprobe
