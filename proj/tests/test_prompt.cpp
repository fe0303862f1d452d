#include <random>

#include <gtest/gtest.h>

#include "iclprobe/prompt.hpp"

using namespace iclprobe;

namespace {

tokenizer sentiment_vocab()
{
    return tokenizer::whitespace({"Good", "movies.", "Bad", "film.", "Fine", "acting.", "Label:", "Positive", "Negative",
                                  "|", "very", "much"});
}

errc code_of(const std::function<void()>& fn)
{
    try {
        fn();
    } catch (const error& e) {
        return e.code();
    }
    ADD_FAILURE() << "no error raised";
    return errc::invalid_argument;
}

}  // namespace

TEST(Tokenizer, WhitespaceEncodeDecode)
{
    const auto tok = sentiment_vocab();
    const auto ids = tok.encode("Good  movies.\tLabel: Positive");
    EXPECT_EQ(ids, (std::vector<int>{0, 1, 6, 7}));
    EXPECT_EQ(tok.decode(ids), "Good movies. Label: Positive");
    EXPECT_EQ(code_of([&] { tok.encode("Great"); }), errc::unknown_token);
    for (const auto& [word, id] : tok.vocab()) EXPECT_EQ(tok.decode(tok.encode(word)), word);
}

TEST(Tokenizer, ByteLevelAndExternalIds)
{
    const auto bytes = tokenizer::byte_level();
    EXPECT_EQ(bytes.encode("ab"), (std::vector<int>{97, 98}));
    EXPECT_EQ(bytes.decode(bytes.encode("x: y")), "x: y");
    const auto ext = tokenizer::external_ids();
    EXPECT_EQ(ext.encode(" 12 7  0"), (std::vector<int>{12, 7, 0}));
    EXPECT_EQ(code_of([&] { ext.encode("12 x"); }), errc::unknown_token);
}

TEST(Assemble, SentimentExample)
{
    // "Good movies. Label: Positive. Bad film. Label: Negative. Fine acting. Label:"
    prompt_spec spec;
    spec.templ = "{input} Label: {label}.";
    spec.forerunner = ":";
    spec.demonstrations = {{"Good movies.", 1, "Positive"}, {"Bad film.", 0, "Negative"}};
    spec.query = {"Fine acting.", 1, "Positive"};
    const auto p = assemble(spec, tokenizer::byte_level());
    EXPECT_EQ(p.text, "Good movies. Label: Positive. Bad film. Label: Negative. Fine acting. Label:");
    ASSERT_EQ(p.label_spans.size(), 2U);
    EXPECT_EQ(p.label_spans[0].size(), 8);
    EXPECT_EQ(p.text.substr(static_cast<std::size_t>(p.label_spans[0].begin), 8), "Positive");
    EXPECT_EQ(p.text.substr(static_cast<std::size_t>(p.label_spans[1].begin), 8), "Negative");
    EXPECT_EQ(p.query_last_idx, static_cast<int>(p.tokens.size()) - 1);
    EXPECT_EQ(p.tokens[static_cast<std::size_t>(p.query_last_idx)], ':');
}

TEST(Assemble, SingleDemoSingleTokenLabel)
{
    prompt_spec spec;
    spec.forerunner = "Label:";
    spec.demonstrations = {{"Good movies.", 1, "Positive"}};
    spec.query = {"Bad film.", 0, "Negative"};
    const auto tok = sentiment_vocab();
    const auto p = assemble(spec, tok);
    ASSERT_EQ(p.label_spans.size(), 1U);
    EXPECT_EQ(p.label_spans[0], (token_span{3, 4}));
    EXPECT_EQ(p.tokens, (std::vector<int>{0, 1, 6, 7, 2, 3, 6}));
    EXPECT_EQ(p.query_last_idx, 6);
}

TEST(Assemble, MultiTokenLabelsAndSeparator)
{
    prompt_spec spec;
    spec.forerunner = "Label:";
    spec.separator = " | ";
    spec.demonstrations = {{"Good movies.", 1, "very Positive"}, {"Bad film.", 0, "much Negative"}};
    spec.query = {"Fine acting.", 1, "Positive"};
    const auto tok = sentiment_vocab();
    const auto p = assemble(spec, tok);
    EXPECT_EQ(p.text, "Good movies. Label: very Positive | Bad film. Label: much Negative | Fine acting. Label:");
    ASSERT_EQ(p.label_spans.size(), 2U);
    EXPECT_EQ(p.label_spans[0], (token_span{3, 5}));
    EXPECT_EQ(p.label_spans[1], (token_span{9, 11}));
    EXPECT_EQ(p.demo_label_ids, (std::vector<int>{1, 0}));
}

TEST(Assemble, Errors)
{
    const auto tok = sentiment_vocab();
    prompt_spec spec;
    spec.forerunner = "Label:";
    spec.demonstrations = {{"Good movies.", 1, "Positive"}};
    spec.query = {"Bad film.", 0, "Negative"};

    auto bad = spec;
    bad.templ = "{input} {input} {label}";
    EXPECT_EQ(code_of([&] { assemble(bad, tok); }), errc::invalid_template);
    bad = spec;
    bad.templ = "{label} {input}";
    EXPECT_EQ(code_of([&] { assemble(bad, tok); }), errc::invalid_template);
    bad = spec;
    bad.forerunner = "Answer:";
    EXPECT_EQ(code_of([&] { assemble(bad, tok); }), errc::invalid_template);
    bad = spec;
    bad.demonstrations[0].label_text = "  ";
    EXPECT_EQ(code_of([&] { assemble(bad, tok); }), errc::empty_label);
    bad = spec;
    bad.demonstrations.clear();
    EXPECT_EQ(code_of([&] { assemble(bad, tok); }), errc::invalid_argument);

    // a label glued to the preceding word splits a whitespace token
    auto glued = spec;
    glued.templ = "{input} Label:{label}";
    glued.forerunner = "Label:";
    EXPECT_EQ(code_of([&] { assemble(glued, tokenizer::whitespace({"Good", "movies.", "Bad", "film.", "Label:", "Label:Positive", "Positive"})); }),
              errc::invalid_template);
}

TEST(Assemble, RandomTemplatesRoundTripSpans)
{
    std::mt19937_64 g(21);
    std::vector<std::string> words;
    for (int i = 0; i < 30; ++i) words.push_back("t" + std::to_string(i));
    const auto tok = tokenizer::whitespace(words);
    std::uniform_int_distribution<int> w(0, 29), len(1, 3), k(1, 6), bit(0, 1);
    auto phrase = [&](int n) {
        std::string s;
        for (int i = 0; i < n; ++i) s += (i ? " " : "") + words[static_cast<std::size_t>(w(g))];
        return s;
    };
    for (int trial = 0; trial < 200; ++trial) {
        const std::string fore = words[static_cast<std::size_t>(w(g))];
        prompt_spec spec;
        spec.templ = (bit(g) ? phrase(1) + " " : "") + "{input} " + (bit(g) ? phrase(2) + " " : "") + fore + " {label}"
                     + (bit(g) ? " " + phrase(1) : "");
        spec.forerunner = fore;
        spec.separator = bit(g) ? " " : " " + phrase(1) + " ";
        const int n = k(g);
        for (int i = 0; i < n; ++i) spec.demonstrations.push_back({phrase(len(g)), i % 3, phrase(len(g))});
        spec.query = {phrase(len(g)), 0, "t0"};
        const auto p = assemble(spec, tok);
        ASSERT_EQ(p.label_spans.size(), static_cast<std::size_t>(n));
        int prev_end = 0;
        for (int i = 0; i < n; ++i) {
            const auto& s = p.label_spans[static_cast<std::size_t>(i)];
            EXPECT_GE(s.begin, prev_end);
            prev_end = s.end;
            const std::vector<int> ids(p.tokens.begin() + s.begin, p.tokens.begin() + s.end);
            EXPECT_EQ(tok.decode(ids), spec.demonstrations[static_cast<std::size_t>(i)].label_text);
        }
        EXPECT_EQ(tok.decode(std::vector<int>{p.tokens.back()}), fore);
        EXPECT_EQ(assemble(spec, tok).tokens, p.tokens);
    }
}

TEST(CorrectLabelPositions, Cases)
{
    const auto tok = sentiment_vocab();
    prompt_spec spec;
    spec.forerunner = "Label:";
    spec.demonstrations = {{"Good movies.", 1, "Positive"},
                           {"Bad film.", 0, "Negative"},
                           {"Fine acting.", 1, "very Positive"},
                           {"Bad film.", 0, "Negative"}};
    spec.query = {"Good movies.", 1, "Positive"};
    const auto p = assemble(spec, tok);
    // spans: [3,4) [7,8) [11,13) [16,17)
    EXPECT_EQ(correct_label_positions(p, 1), (std::vector<int>{3, 11, 12}));
    EXPECT_EQ(correct_label_positions(p, 0), (std::vector<int>{7, 16}));
    EXPECT_TRUE(correct_label_positions(p, 2).empty());

    auto same = spec;
    for (auto& d : same.demonstrations) d.label_id = 1;
    const auto q = assemble(same, tok);
    EXPECT_EQ(correct_label_positions(q, 1).size(), 5U);
}
