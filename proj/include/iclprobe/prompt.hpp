#pragma once

#include <algorithm>
#include <cctype>
#include <charconv>
#include <map>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "iclprobe/error.hpp"

namespace iclprobe {

enum class tokenizer_kind { whitespace_toy, byte_level_toy, external_ids };

/// Toy tokenizers. Real-model token ids arrive pre-computed ("external-ids":
/// whitespace-separated integers), so no subword tokenizer lives here.
class tokenizer {
  public:
    tokenizer() = default;

    static tokenizer whitespace(std::vector<std::string> words)
    {
        tokenizer t;
        t.m_kind = tokenizer_kind::whitespace_toy;
        for (auto& w : words) {
            require(!w.empty() && std::none_of(w.begin(), w.end(), [](unsigned char c) { return std::isspace(c); }),
                    errc::invalid_argument, "vocabulary word '" + w + "' is empty or contains whitespace");
            require(t.m_vocab.emplace(w, static_cast<int>(t.m_words.size())).second, errc::invalid_argument,
                    "duplicate vocabulary word '" + w + "'");
            t.m_words.push_back(std::move(w));
        }
        return t;
    }

    static tokenizer byte_level()
    {
        tokenizer t;
        t.m_kind = tokenizer_kind::byte_level_toy;
        return t;
    }

    static tokenizer external_ids()
    {
        tokenizer t;
        t.m_kind = tokenizer_kind::external_ids;
        return t;
    }

    tokenizer_kind kind() const { return m_kind; }
    const std::map<std::string, int>& vocab() const { return m_vocab; }

    int vocab_size() const
    {
        switch (m_kind) {
        case tokenizer_kind::whitespace_toy: return static_cast<int>(m_words.size());
        case tokenizer_kind::byte_level_toy: return 256;
        case tokenizer_kind::external_ids: return -1;
        }
        return -1;
    }

    int id(const std::string& word) const
    {
        auto it = m_vocab.find(word);
        require(it != m_vocab.end(), errc::unknown_token, "'" + word + "' is not in the vocabulary");
        return it->second;
    }

    std::vector<int> encode(std::string_view text) const
    {
        std::vector<int> out;
        switch (m_kind) {
        case tokenizer_kind::byte_level_toy:
            for (char c : text) out.push_back(static_cast<unsigned char>(c));
            break;
        case tokenizer_kind::whitespace_toy:
            for (auto w : split_ws(text)) out.push_back(id(std::string(w)));
            break;
        case tokenizer_kind::external_ids:
            for (auto w : split_ws(text)) {
                int v = 0;
                auto [p, ec] = std::from_chars(w.data(), w.data() + w.size(), v);
                require(ec == std::errc() && p == w.data() + w.size() && v >= 0, errc::unknown_token,
                        "'" + std::string(w) + "' is not a token id");
                out.push_back(v);
            }
            break;
        }
        return out;
    }

    std::string decode(std::span<const int> ids) const
    {
        std::string out;
        for (std::size_t i = 0; i < ids.size(); ++i) {
            switch (m_kind) {
            case tokenizer_kind::byte_level_toy:
                require(ids[i] >= 0 && ids[i] < 256, errc::token_out_of_range, std::to_string(ids[i]));
                out.push_back(static_cast<char>(ids[i]));
                break;
            case tokenizer_kind::whitespace_toy:
                require(ids[i] >= 0 && ids[i] < static_cast<int>(m_words.size()), errc::token_out_of_range,
                        std::to_string(ids[i]));
                if (i > 0) out.push_back(' ');
                out += m_words[static_cast<std::size_t>(ids[i])];
                break;
            case tokenizer_kind::external_ids:
                if (i > 0) out.push_back(' ');
                out += std::to_string(ids[i]);
                break;
            }
        }
        return out;
    }

    static std::vector<std::string_view> split_ws(std::string_view text)
    {
        std::vector<std::string_view> out;
        std::size_t i = 0;
        while (i < text.size()) {
            while (i < text.size() && std::isspace(static_cast<unsigned char>(text[i]))) ++i;
            const auto start = i;
            while (i < text.size() && !std::isspace(static_cast<unsigned char>(text[i]))) ++i;
            if (i > start) out.push_back(text.substr(start, i - start));
        }
        return out;
    }

  private:
    tokenizer_kind m_kind = tokenizer_kind::whitespace_toy;
    std::map<std::string, int> m_vocab;
    std::vector<std::string> m_words;
};

struct example {
    std::string input_text;
    int label_id = 0;
    std::string label_text;
};

inline constexpr std::string_view default_template = "{input} Label: {label}";

struct prompt_spec {
    std::vector<example> demonstrations;
    example query;
    std::string templ{default_template};
    std::string separator = " ";
    std::string forerunner = ":";
};

/// Half-open token range [begin, end).
struct token_span {
    int begin = 0;
    int end = 0;

    int size() const { return end - begin; }
    bool operator==(const token_span&) const = default;
};

struct assembled_prompt {
    std::vector<int> tokens;
    std::vector<token_span> label_spans;
    std::vector<int> demo_label_ids;
    int query_last_idx = 0;
    std::string text;
};

namespace detail {

struct template_parts {
    std::string head;    // before {input}
    std::string middle;  // between {input} and {label}
    std::string tail;    // after {label}
};

inline std::size_t count_occurrences(std::string_view s, std::string_view needle)
{
    std::size_t n = 0;
    for (auto pos = s.find(needle); pos != std::string_view::npos; pos = s.find(needle, pos + needle.size())) ++n;
    return n;
}

inline template_parts split_template(std::string_view templ)
{
    constexpr std::string_view in_slot = "{input}";
    constexpr std::string_view label_slot = "{label}";
    require(count_occurrences(templ, in_slot) == 1 && count_occurrences(templ, label_slot) == 1, errc::invalid_template,
            "template '" + std::string(templ) + "' must contain {input} and {label} exactly once");
    const auto ip = templ.find(in_slot);
    const auto lp = templ.find(label_slot);
    require(ip < lp, errc::invalid_template, "{input} must precede {label}");
    return {std::string(templ.substr(0, ip)), std::string(templ.substr(ip + in_slot.size(), lp - ip - in_slot.size())),
            std::string(templ.substr(lp + label_slot.size()))};
}

inline std::string rtrim(std::string s)
{
    while (!s.empty() && std::isspace(static_cast<unsigned char>(s.back()))) s.pop_back();
    return s;
}

}  // namespace detail

/// Text segments of a prompt: even indices are context, odd indices are the
/// demonstration labels. Joining them gives the prompt text.
inline std::vector<std::string> prompt_segments(const prompt_spec& spec)
{
    require(!spec.demonstrations.empty(), errc::invalid_argument, "a prompt needs at least one demonstration");
    const auto parts = detail::split_template(spec.templ);
    std::vector<std::string> segs;
    std::string context;
    for (std::size_t i = 0; i < spec.demonstrations.size(); ++i) {
        const auto& d = spec.demonstrations[i];
        if (i > 0) context += spec.separator;
        context += parts.head + d.input_text + parts.middle;
        segs.push_back(std::move(context));
        segs.push_back(d.label_text);
        context = parts.tail;
    }
    context += spec.separator;
    context += detail::rtrim(parts.head + spec.query.input_text + parts.middle);
    segs.push_back(std::move(context));
    return segs;
}

/// Concatenates k demonstrations and the query into one token sequence and
/// records where each demonstration's label tokens sit. The query is rendered
/// up to its label slot, so the final token is the forerunner.
inline assembled_prompt assemble(const prompt_spec& spec, const tokenizer& tok)
{
    const auto segs = prompt_segments(spec);
    const std::string query_tail = segs.back();
    if (!spec.forerunner.empty()) {
        require(query_tail.size() >= spec.forerunner.size()
                    && query_tail.compare(query_tail.size() - spec.forerunner.size(), spec.forerunner.size(),
                                          spec.forerunner) == 0,
                errc::invalid_template, "query text does not end with the forerunner '" + spec.forerunner + "'");
    }

    assembled_prompt p;
    for (std::size_t s = 0; s < segs.size(); ++s) {
        p.text += segs[s];
        auto ids = tok.encode(segs[s]);
        if (s % 2 == 1) {
            const auto& demo = spec.demonstrations[s / 2];
            require(!ids.empty(), errc::empty_label, "label '" + demo.label_text + "' of demonstration "
                                                         + std::to_string(s / 2) + " tokenizes to nothing");
            const int begin = static_cast<int>(p.tokens.size());
            p.label_spans.push_back({begin, begin + static_cast<int>(ids.size())});
            p.demo_label_ids.push_back(demo.label_id);
        }
        p.tokens.insert(p.tokens.end(), ids.begin(), ids.end());
    }
    // Per-segment encoding must agree with encoding the whole text, otherwise a
    // label boundary fell inside a token and the spans would be fiction.
    require(tok.encode(p.text) == p.tokens, errc::invalid_template,
            "label boundaries do not align with token boundaries for template '" + spec.templ + "'");
    require(!p.tokens.empty(), errc::invalid_argument, "prompt tokenizes to nothing");
    p.query_last_idx = static_cast<int>(p.tokens.size()) - 1;
    return p;
}

/// Positions of label tokens of demonstrations whose label equals the
/// query's, ascending.
inline std::vector<int> correct_label_positions(const assembled_prompt& p, int query_label_id)
{
    std::vector<int> out;
    for (std::size_t i = 0; i < p.label_spans.size(); ++i) {
        if (p.demo_label_ids[i] != query_label_id) continue;
        for (int t = p.label_spans[i].begin; t < p.label_spans[i].end; ++t) out.push_back(t);
    }
    return out;
}

}  // namespace iclprobe
