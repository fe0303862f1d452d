#include <algorithm>
#include <random>

#include <gtest/gtest.h>

#include "iclprobe/induction.hpp"
#include "iclprobe/toy_circuits.hpp"
#include "oracles.hpp"

using namespace iclprobe;

namespace {

matrix random_matrix(std::mt19937_64& g, std::size_t r, std::size_t c)
{
    std::normal_distribution<float> n(0.0F, 1.0F);
    matrix m(r, c);
    for (auto& v : m.data) v = n(g);
    return m;
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

TEST(ScoreHead, DirectSum)
{
    const std::vector<float> row{0.1F, 0.3F, 0.2F, 0.4F};
    EXPECT_NEAR(score_head(row, std::vector<int>{1, 2}), 0.5, 1e-7);
    EXPECT_EQ(score_head(row, std::vector<int>{}), 0.0);
    EXPECT_EQ(code_of([&] { score_head(row, std::vector<int>{4}); }), errc::index_out_of_range);
}

TEST(ScoreHead, UniformRow)
{
    for (int n = 1; n <= 20; ++n) {
        const std::vector<float> row(static_cast<std::size_t>(n), 1.0F / static_cast<float>(n));
        for (int m = 0; m <= n; ++m) {
            std::vector<int> pos(static_cast<std::size_t>(m));
            std::iota(pos.begin(), pos.end(), 0);
            EXPECT_NEAR(score_head(row, pos), static_cast<double>(m) / n, 1e-6);
        }
    }
}

TEST(ScoreHead, BoundedForDistributions)
{
    std::mt19937_64 g(1);
    std::uniform_real_distribution<float> u(0.0F, 1.0F);
    for (int trial = 0; trial < 200; ++trial) {
        std::vector<float> row(1 + g() % 30);
        float sum = 0.0F;
        for (auto& v : row) sum += (v = u(g));
        for (auto& v : row) v /= sum;
        std::vector<int> pos;
        for (int i = 0; i < static_cast<int>(row.size()); ++i) {
            if (g() % 2) pos.push_back(i);
        }
        const double s = score_head(row, pos);
        EXPECT_GE(s, 0.0);
        EXPECT_LE(s, 1.0 + 1e-6);
    }
}

TEST(SelectBestHead, SingleAndTies)
{
    EXPECT_EQ(select_best_head(std::vector<head_score>{{{2, 1}, 0.4}}), (head_id{2, 1}));
    EXPECT_EQ(select_best_head(std::vector<head_score>{{{5, 0}, 0.7}, {{3, 2}, 0.7}, {{4, 1}, 0.1}}), (head_id{3, 2}));
    EXPECT_EQ(select_best_head(std::vector<head_score>{{{3, 2}, 0.7}, {{3, 0}, 0.7}}), (head_id{3, 0}));
    EXPECT_EQ(code_of([] { select_best_head(std::vector<head_score>{}); }), errc::empty_input);
}

TEST(SelectBestHead, PermutationInvariant)
{
    std::mt19937_64 g(2);
    std::uniform_int_distribution<int> q(0, 4);
    for (int trial = 0; trial < 100; ++trial) {
        std::vector<head_score> s;
        for (int l = 0; l < 4; ++l) {
            for (int h = 0; h < 3; ++h) s.push_back({{l, h}, q(g) / 4.0});  // coarse scores force ties
        }
        const auto best = select_best_head(s);
        for (int p = 0; p < 5; ++p) {
            std::shuffle(s.begin(), s.end(), g);
            EXPECT_EQ(select_best_head(s), best);
        }
    }
}

TEST(ExtractRep, IdentityProjections)
{
    matrix eye(5, 5);
    for (std::size_t i = 0; i < 5; ++i) eye(i, i) = 1.0F;
    const std::vector<float> h{1.5F, -2.0F, 0.0F, 3.25F, 7.0F};
    const auto rep = extract_rep(h, {eye, eye});
    for (std::size_t i = 0; i < 5; ++i) EXPECT_EQ(rep.vector[i], h[i]);
    const auto zero = extract_rep(std::vector<float>(5, 0.0F), {eye, eye});
    for (double v : zero.vector) EXPECT_EQ(v, 0.0);
}

TEST(ExtractRep, MatchesTwoStepMatmul)
{
    std::mt19937_64 g(3);
    for (int trial = 0; trial < 50; ++trial) {
        const auto wq = random_matrix(g, 8, 16);
        const auto wk = random_matrix(g, 8, 16);
        const auto hf = random_matrix(g, 1, 16);
        const auto rep = extract_rep(hf.data, {wq, wk});
        // oracle: (W_Q^T)(W_K h) with explicit transposition
        oracle::vec wqt(16 * 8), wkd(wk.data.begin(), wk.data.end()), hd(hf.data.begin(), hf.data.end());
        for (std::size_t r = 0; r < 8; ++r) {
            for (std::size_t c = 0; c < 16; ++c) wqt[c * 8 + r] = wq(r, c);
        }
        const auto key = oracle::matmul(wkd, hd, 8, 16, 1);
        const auto expected = oracle::matmul(wqt, key, 16, 8, 1);
        for (std::size_t i = 0; i < 16; ++i) EXPECT_NEAR(rep.vector[i], expected[i], 1e-6);
    }
}

TEST(ExtractRep, Linear)
{
    std::mt19937_64 g(4);
    std::normal_distribution<float> n(0.0F, 1.0F);
    for (int trial = 0; trial < 50; ++trial) {
        const head_weights w{random_matrix(g, 4, 10), random_matrix(g, 4, 10)};
        const auto x = random_matrix(g, 1, 10).data;
        const auto y = random_matrix(g, 1, 10).data;
        const float a = n(g), b = n(g);
        std::vector<float> mix(10);
        for (std::size_t i = 0; i < 10; ++i) mix[i] = a * x[i] + b * y[i];
        const auto rx = extract_rep(x, w), ry = extract_rep(y, w), rm = extract_rep(mix, w);
        for (std::size_t i = 0; i < 10; ++i) EXPECT_NEAR(rm.vector[i], a * rx.vector[i] + b * ry.vector[i], 1e-4);
    }
}

TEST(ExtractRep, DimensionMismatch)
{
    std::mt19937_64 g(5);
    const head_weights w{random_matrix(g, 4, 10), random_matrix(g, 4, 10)};
    EXPECT_EQ(code_of([&] { extract_rep(std::vector<float>(9), w); }), errc::dimension_mismatch);
    const head_weights bad{random_matrix(g, 4, 10), random_matrix(g, 3, 10)};
    EXPECT_EQ(code_of([&] { extract_rep(std::vector<float>(10), bad); }), errc::dimension_mismatch);
}

TEST(ExtractPromptReps, PerTokenAndMeanPooling)
{
    std::mt19937_64 g(6);
    prompt_activations acts;
    acts.n_layers = 2;
    acts.n_heads = 1;
    acts.seq_len = 8;
    acts.hidden[1] = random_matrix(g, 8, 6);
    const head_weights w{random_matrix(g, 3, 6), random_matrix(g, 3, 6)};
    prompt_layout layout{{{1, 2}, {4, 6}}, {0, 1}, 7, 8};

    const auto per = extract_prompt_reps(acts, layout, {1, 0}, w);
    ASSERT_EQ(per.labels.size(), 3U);
    EXPECT_EQ(per.labels[1].position, 4);
    EXPECT_EQ(per.labels[2].demo, 1);
    EXPECT_EQ(per.query.position, 7);
    EXPECT_EQ(per.query.vector, extract_rep(acts.hidden[1].row(7), w).vector);

    const auto mean = extract_prompt_reps(acts, layout, {1, 0}, w, label_pooling::mean);
    ASSERT_EQ(mean.labels.size(), 2U);
    for (std::size_t i = 0; i < 6; ++i) {
        EXPECT_NEAR(mean.labels[1].vector[i], 0.5 * (per.labels[1].vector[i] + per.labels[2].vector[i]), 1e-12);
    }

    prompt_layout one{{{2, 3}}, {0}, 5, 8};
    const auto k1 = extract_prompt_reps(acts, one, {1, 0}, w);
    EXPECT_EQ(k1.labels.size(), 1U);

    EXPECT_EQ(code_of([&] { extract_prompt_reps(acts, layout, {0, 0}, w); }), errc::missing_capture);
}

TEST(PromptLayout, Validation)
{
    EXPECT_NO_THROW((prompt_layout{{{1, 2}}, {0}, 3, 4}.validate()));
    EXPECT_EQ(code_of([] { prompt_layout{{{1, 2}}, {0}, 4, 4}.validate(); }), errc::capture_mismatch);
    EXPECT_EQ(code_of([] { prompt_layout{{{1, 5}}, {0}, 3, 6}.validate(); }), errc::capture_mismatch);
    EXPECT_EQ(code_of([] { prompt_layout{{{2, 3}, {1, 2}}, {0, 1}, 5, 6}.validate(); }), errc::capture_mismatch);
    EXPECT_EQ(code_of([] { prompt_layout{{{1, 2}}, {0, 1}, 3, 4}.validate(); }), errc::capture_mismatch);
}

TEST(PlantedInduction, AttentionLandsOnB)
{
    const auto planted = make_planted_induction(7);
    const auto& ck = planted.checkpoint;
    const auto m = load_model(ck.store, ck.config);
    rng gen(99);
    for (int trial = 0; trial < 50; ++trial) {
        const auto p = make_induction_prompt(gen, ck.config.vocab_size, 6, ck.config.max_seq);
        capture_spec spec;
        spec.full_attn = true;
        const auto out = m.forward(p.tokens, spec);
        // previous-token head: every position t >= 1 attends t - 1
        const auto& prev = out.full_attn[0];
        for (std::size_t t = 1; t < p.tokens.size(); ++t) EXPECT_GT(prev(t, t - 1), 0.99F);
        // induction head: the repeated [A] attends the [B] after the first [A]
        const auto row = out.attn_row(1, 1);
        EXPECT_GT(score_head(row, p.correct_positions), 0.9);
    }
}

TEST(PlantedInduction, BestHeadIsPlanted)
{
    const auto planted = make_planted_induction(8);
    const auto& ck = planted.checkpoint;
    const auto m = load_model(ck.store, ck.config);
    rng gen(100);
    std::vector<std::vector<head_score>> per_prompt;
    int wins = 0;
    for (int trial = 0; trial < 50; ++trial) {
        const auto p = make_induction_prompt(gen, ck.config.vocab_size, 6, ck.config.max_seq);
        const auto out = m.forward(p.tokens);
        const auto scores = score_all_heads(prompt_activations::of(out, ck.config.n_layers), p.correct_positions);
        wins += select_best_head(scores) == planted.induction_head ? 1 : 0;
        per_prompt.push_back(scores);
    }
    EXPECT_GE(wins, 48);
    auto means = mean_head_scores(per_prompt);
    EXPECT_EQ(select_best_head(means), planted.induction_head);
    std::sort(means.begin(), means.end(), [](const head_score& a, const head_score& b) { return a.score > b.score; });
    EXPECT_GT(means[0].score - means[1].score, 0.2);
}

TEST(ProbePrompt, LiveAndCapturedPathsAgree)
{
    model_config c;
    c.n_layers = 2;
    c.n_heads = 2;
    c.n_kv_heads = 1;
    c.d_model = 8;
    c.d_head = 4;
    c.d_ff = 8;
    c.vocab_size = 12;
    c.max_seq = 32;
    c.pos = pos_kind::rotary;
    const auto m = load_model(make_random_checkpoint(c, 3).store, c);
    std::vector<std::string> words;
    for (int i = 0; i < 12; ++i) words.push_back("v" + std::to_string(i));
    const auto tok = tokenizer::whitespace(words);
    prompt_spec spec;
    spec.templ = "{input} v10 {label}";
    spec.forerunner = "v10";
    spec.demonstrations = {{"v1 v2", 0, "v8"}, {"v3", 1, "v9"}, {"v4 v5", 0, "v8"}};
    spec.query = {"v6", 0, "v8"};
    const auto prompt = assemble(spec, tok);

    const auto scored = probe_prompt(m, prompt, 0, std::nullopt);
    ASSERT_EQ(scored.head_scores.size(), 4U);
    EXPECT_FALSE(scored.reps.has_value());
    const head_id best = select_best_head(scored.head_scores);

    const auto live = probe_prompt(m, prompt, 0, best);
    capture_spec cs;
    cs.hidden_layers = {best.layer};
    const auto acts = prompt_activations::of(m.forward(prompt.tokens, cs), c.n_layers);
    const auto hw = m.head_qk(best.layer, best.head);
    const auto captured = probe_prompt(acts, prompt_layout::of(prompt), 0, best, &hw);
    ASSERT_TRUE(live.reps && captured.reps);
    EXPECT_EQ(live.reps->query.vector, captured.reps->query.vector);
    ASSERT_EQ(live.reps->labels.size(), 3U);
    for (std::size_t i = 0; i < 3; ++i) EXPECT_EQ(live.reps->labels[i].vector, captured.reps->labels[i].vector);
    EXPECT_EQ(code_of([&] { probe_prompt(acts, prompt_layout::of(prompt), 0, best, nullptr); }), errc::missing_capture);
}
