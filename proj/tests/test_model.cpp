#include <filesystem>
#include <fstream>
#include <random>

#include <gtest/gtest.h>

#include "json.hpp"

#include "iclprobe/model.hpp"
#include "iclprobe/toy_circuits.hpp"

using namespace iclprobe;

namespace {

model_config random_config(std::mt19937_64& g)
{
    std::uniform_int_distribution<int> layers(1, 3), heads_pow(0, 2), dh_half(1, 4), ff(0, 3), vocab(3, 20), bit(0, 1);
    model_config c;
    c.n_layers = layers(g);
    c.n_heads = 1 << heads_pow(g);
    c.n_kv_heads = bit(g) ? c.n_heads : std::max(1, c.n_heads / 2);
    c.d_head = 2 * dh_half(g);
    c.d_model = c.n_heads * c.d_head + 2 * bit(g);
    c.d_ff = 4 * ff(g);
    c.vocab_size = vocab(g);
    c.max_seq = 24;
    c.norm = bit(g) ? norm_kind::rmsnorm : norm_kind::layernorm;
    c.pos = bit(g) ? pos_kind::rotary : pos_kind::learned;
    c.act = bit(g) ? act_kind::gelu : act_kind::silu_gated;
    return c;
}

std::vector<int> random_tokens(std::mt19937_64& g, int vocab, int len)
{
    std::uniform_int_distribution<int> t(0, vocab - 1);
    std::vector<int> out(static_cast<std::size_t>(len));
    for (auto& x : out) x = t(g);
    return out;
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

class ReferenceFixture : public ::testing::TestWithParam<std::string> {};

TEST_P(ReferenceFixture, LogitsMatchReferenceForward)
{
    const auto path = std::filesystem::path(ICLPROBE_FIXTURES) / (GetParam() + ".json");
    std::ifstream in(path);
    const auto j = nlohmann::json::parse(in);
    const auto m = load_model_manifest(path);
    for (const auto& c : j.at("cases")) {
        const auto tokens = c.at("tokens").get<std::vector<int>>();
        const auto out = m.forward(tokens);
        const auto expected = c.at("logits").get<std::vector<std::vector<double>>>();
        ASSERT_EQ(out.logits.rows, expected.size());
        double worst = 0.0;
        for (std::size_t t = 0; t < expected.size(); ++t) {
            for (std::size_t v = 0; v < expected[t].size(); ++v) {
                worst = std::max(worst, std::abs(static_cast<double>(out.logits(t, v)) - expected[t][v]));
            }
        }
        EXPECT_LT(worst, 1e-4) << "sequence of length " << tokens.size();

        const auto rows = c.at("final_attn_rows").get<std::vector<std::vector<std::vector<double>>>>();
        for (std::size_t l = 0; l < rows.size(); ++l) {
            for (std::size_t h = 0; h < rows[l].size(); ++h) {
                const auto got = out.attn_row(static_cast<int>(l), static_cast<int>(h));
                for (std::size_t s = 0; s < got.size(); ++s) EXPECT_NEAR(got[s], rows[l][h][s], 1e-5);
            }
        }
    }
}

INSTANTIATE_TEST_SUITE_P(Checkpoints, ReferenceFixture, ::testing::Values("ref_a", "ref_b"));

TEST(Model, TinyStoreLoads)
{
    model_config c;
    c.n_layers = 1;
    c.n_heads = 1;
    c.d_model = 4;
    c.d_head = 4;
    c.vocab_size = 5;
    c.max_seq = 8;
    const auto ck = make_random_checkpoint(c, 1);
    const auto m = load_model(ck.store, c);
    const std::vector<int> toks{1, 2, 3};
    EXPECT_EQ(m.forward(toks).logits.cols, 5U);
}

TEST(Model, MissingWeightIsReported)
{
    model_config c;
    c.vocab_size = 5;
    c.max_seq = 4;
    const auto ck = make_random_checkpoint(c, 1);
    tensor_store partial;
    for (const auto& name : ck.store.names()) {
        if (name != "layers.0.attn.wq") partial.add(name, ck.store.entry(name).shape, ck.store.values(name));
    }
    try {
        load_model(partial, c);
        FAIL();
    } catch (const error& e) {
        EXPECT_EQ(e.code(), errc::missing_tensor);
        EXPECT_NE(std::string(e.what()).find("layers.0.attn.wq"), std::string::npos);
    }
}

TEST(Model, ShapeMismatchIsReported)
{
    model_config c;
    c.vocab_size = 5;
    c.max_seq = 4;
    auto other = c;
    other.vocab_size = 6;
    const auto ck = make_random_checkpoint(other, 1);
    EXPECT_EQ(code_of([&] { load_model(ck.store, c); }), errc::shape_mismatch);
}

TEST(Model, InputValidation)
{
    model_config c;
    c.vocab_size = 5;
    c.max_seq = 4;
    const auto m = load_model(make_random_checkpoint(c, 2).store, c);
    EXPECT_EQ(code_of([&] { m.forward(std::vector<int>{1, 2, 3, 4, 0}); }), errc::sequence_too_long);
    EXPECT_EQ(code_of([&] { m.forward(std::vector<int>{1, 5}); }), errc::token_out_of_range);
    EXPECT_EQ(code_of([&] { m.forward(std::vector<int>{-1}); }), errc::token_out_of_range);
}

TEST(Model, AttentionRowsAreDistributions)
{
    std::mt19937_64 g(3);
    for (int trial = 0; trial < 50; ++trial) {
        const auto c = random_config(g);
        const auto m = load_model(make_random_checkpoint(c, static_cast<std::uint64_t>(trial)).store, c);
        const auto toks = random_tokens(g, c.vocab_size, 1 + trial % c.max_seq);
        capture_spec spec;
        spec.full_attn = true;
        const auto out = m.forward(toks, spec);
        for (const auto& a : out.full_attn) {
            for (std::size_t t = 0; t < a.rows; ++t) {
                double sum = 0.0;
                for (std::size_t s = 0; s < a.cols; ++s) {
                    EXPECT_GE(a(t, s), 0.0F);
                    if (s > t) {
                        EXPECT_EQ(a(t, s), 0.0F);
                    }
                    sum += a(t, s);
                }
                EXPECT_NEAR(sum, 1.0, 1e-5);
            }
        }
        // the default capture keeps exactly the final rows of the full matrices
        for (int l = 0; l < c.n_layers; ++l) {
            for (int h = 0; h < c.n_heads; ++h) {
                const auto row = out.attn_row(l, h);
                const auto& full = out.full_attn[static_cast<std::size_t>(l * c.n_heads + h)];
                for (std::size_t s = 0; s < row.size(); ++s) EXPECT_EQ(row[s], full(toks.size() - 1, s));
            }
        }
    }
}

TEST(Model, Causality)
{
    std::mt19937_64 g(4);
    for (int trial = 0; trial < 50; ++trial) {
        const auto c = random_config(g);
        const auto m = load_model(make_random_checkpoint(c, 100 + static_cast<std::uint64_t>(trial)).store, c);
        const int len = 2 + trial % (c.max_seq - 1);
        auto toks = random_tokens(g, c.vocab_size, len);
        const auto base = m.forward(toks);
        const int p = static_cast<int>(g() % static_cast<std::uint64_t>(len - 1));
        for (int t = p + 1; t < len; ++t) toks[static_cast<std::size_t>(t)] = (toks[static_cast<std::size_t>(t)] + 1) % c.vocab_size;
        const auto changed = m.forward(toks);
        for (int t = 0; t <= p; ++t) {
            for (std::size_t v = 0; v < base.logits.cols; ++v) {
                EXPECT_EQ(base.logits(static_cast<std::size_t>(t), v), changed.logits(static_cast<std::size_t>(t), v));
            }
        }
    }
}

TEST(Model, ForwardIsPure)
{
    std::mt19937_64 g(5);
    const auto c = random_config(g);
    const auto m = load_model(make_random_checkpoint(c, 9).store, c);
    const auto toks = random_tokens(g, c.vocab_size, 10);
    EXPECT_EQ(m.forward(toks).logits, m.forward(toks).logits);
}

TEST(Model, ZeroedOutputProjectionsIgnoreEarlierTokens)
{
    model_config c;
    c.n_layers = 2;
    c.n_heads = 2;
    c.n_kv_heads = 2;
    c.d_model = 8;
    c.d_head = 4;
    c.d_ff = 12;
    c.vocab_size = 9;
    c.max_seq = 10;
    auto ck = make_random_checkpoint(c, 6);
    tensor_store zeroed;
    for (const auto& name : ck.store.names()) {
        auto v = ck.store.values(name);
        if (name.find("attn.wo") != std::string::npos) std::fill(v.begin(), v.end(), 0.0F);
        zeroed.add(name, ck.store.entry(name).shape, v);
    }
    const auto m = load_model(zeroed, c);
    const auto a = m.forward(std::vector<int>{1, 2, 3, 4, 5});
    const auto b = m.forward(std::vector<int>{8, 0, 7, 6, 5});
    for (std::size_t v = 0; v < a.logits.cols; ++v) EXPECT_EQ(a.logits(4, v), b.logits(4, v));
}

TEST(Model, PostNormHiddenCapture)
{
    std::mt19937_64 g(8);
    auto c = random_config(g);
    c.n_layers = 2;
    const auto m = load_model(make_random_checkpoint(c, 10).store, c);
    capture_spec spec;
    spec.hidden_layers = {1};
    const auto out = m.forward(random_tokens(g, c.vocab_size, 6), spec);
    EXPECT_EQ(out.hidden(1).rows, 6U);
    EXPECT_EQ(out.hidden(1).cols, static_cast<std::size_t>(c.d_model));
    EXPECT_EQ(code_of([&] { out.hidden(0); }), errc::missing_capture);
}

TEST(HeadQk, SingleHeadSliceIsFullProjection)
{
    model_config c;
    c.d_model = 6;
    c.d_head = 6;
    c.vocab_size = 4;
    c.max_seq = 4;
    const auto ck = make_random_checkpoint(c, 11);
    const auto m = load_model(ck.store, c);
    const auto hw = m.head_qk(0, 0);
    EXPECT_EQ(hw.wq.data, ck.store.values("layers.0.attn.wq"));
    EXPECT_EQ(hw.wk.data, ck.store.values("layers.0.attn.wk"));
}

TEST(HeadQk, GroupedHeadsShareKeySlice)
{
    model_config c;
    c.n_heads = 4;
    c.n_kv_heads = 2;
    c.d_model = 8;
    c.d_head = 2;
    c.vocab_size = 4;
    c.max_seq = 4;
    const auto ck = make_random_checkpoint(c, 12);
    const auto m = load_model(ck.store, c);
    EXPECT_EQ(m.head_qk(0, 0).wk, m.head_qk(0, 1).wk);
    EXPECT_EQ(m.head_qk(0, 2).wk, m.head_qk(0, 3).wk);
    EXPECT_NE(m.head_qk(0, 1).wk, m.head_qk(0, 2).wk);
}

TEST(HeadQk, SliceIsRowBlockOfFusedMatrix)
{
    std::mt19937_64 g(13);
    for (int trial = 0; trial < 20; ++trial) {
        const auto c = random_config(g);
        const auto ck = make_random_checkpoint(c, 200 + static_cast<std::uint64_t>(trial));
        const auto m = load_model(ck.store, c);
        const auto group = c.n_heads / c.n_kv_heads;
        const auto dh = static_cast<std::size_t>(c.d_head);
        const auto dm = static_cast<std::size_t>(c.d_model);
        for (int l = 0; l < c.n_layers; ++l) {
            const auto wq = ck.store.values("layers." + std::to_string(l) + ".attn.wq");
            const auto wk = ck.store.values("layers." + std::to_string(l) + ".attn.wk");
            for (int h = 0; h < c.n_heads; ++h) {
                const auto hw = m.head_qk(l, h);
                const auto kh = static_cast<std::size_t>(h / group);
                for (std::size_t r = 0; r < dh; ++r) {
                    for (std::size_t col = 0; col < dm; ++col) {
                        EXPECT_EQ(hw.wq(r, col), wq[(static_cast<std::size_t>(h) * dh + r) * dm + col]);
                        EXPECT_EQ(hw.wk(r, col), wk[(kh * dh + r) * dm + col]);
                    }
                }
            }
        }
    }
    EXPECT_EQ(code_of([&] {
                  model_config c;
                  c.vocab_size = 4;
                  c.max_seq = 4;
                  load_model(make_random_checkpoint(c, 1).store, c).head_qk(0, 1);
              }),
              errc::index_out_of_range);
}

TEST(ModelConfig, JsonRoundTrip)
{
    std::mt19937_64 g(14);
    for (int i = 0; i < 10; ++i) {
        const auto c = random_config(g);
        const nlohmann::json j = c;
        const auto back = j.get<model_config>();
        EXPECT_EQ(nlohmann::json(back), j);
    }
}
