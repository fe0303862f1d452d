#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>

#include <gtest/gtest.h>

#include "iclprobe/experiment.hpp"
#include "toy_env.hpp"

using namespace iclprobe;

namespace {

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

std::string records_csv(const std::vector<metric_record>& recs)
{
    std::ostringstream s;
    write_records_csv(s, recs);
    return s.str();
}

const toy_env& shared_env()
{
    static const toy_env env = toy_env::make("experiment");
    return env;
}

}  // namespace

TEST(PredictLabel, Cases)
{
    const std::vector<float> logits{0.1F, 2.0F, -1.0F, 2.0F, 0.5F};
    EXPECT_EQ(predict_label(logits, std::vector<int>{0, 1, 2}), 1);
    EXPECT_EQ(predict_label(logits, std::vector<int>{3, 1}), 0);  // tie keeps the first candidate
    EXPECT_EQ(predict_label(logits, std::vector<int>{2}), 0);
    EXPECT_EQ(code_of([&] { predict_label(logits, std::vector<int>{}); }), errc::empty_input);
    EXPECT_EQ(code_of([&] { predict_label(logits, std::vector<int>{0, 5}); }), errc::token_out_of_range);
}

TEST(PredictLabel, MatchesLinearScan)
{
    std::mt19937_64 g(1);
    std::uniform_int_distribution<int> v(-3, 3);
    for (int trial = 0; trial < 300; ++trial) {
        std::vector<float> logits(12);
        for (auto& x : logits) x = static_cast<float>(v(g));
        std::vector<int> cands;
        for (int c = 0; c < 12; ++c) {
            if (g() % 3 == 0) cands.push_back(c);
        }
        if (cands.empty()) cands.push_back(0);
        std::size_t best = 0;
        for (std::size_t i = 1; i < cands.size(); ++i) {
            if (logits[static_cast<std::size_t>(cands[i])] > logits[static_cast<std::size_t>(cands[best])]) best = i;
        }
        EXPECT_EQ(predict_label(logits, cands), static_cast<int>(best));
    }
}

TEST(ParallelFor, CoversEveryIndexAndRethrows)
{
    std::vector<int> hits(1000, 0);
    parallel_for(hits.size(), 4, [&](std::size_t i) { hits[i] += 1; });
    EXPECT_EQ(std::count(hits.begin(), hits.end(), 1), 1000);
    EXPECT_EQ(code_of([] {
                  parallel_for(50, 3, [](std::size_t i) {
                      if (i == 17) fail(errc::empty_input, "boom");
                  });
              }),
              errc::empty_input);
}

TEST(ToyExperiment, RecordCountAndSingleBin)
{
    const auto& env = shared_env();
    experiment_config cfg;
    cfg.n_test = 30;
    const auto res = run_toy_experiment(env.m, env.t, cfg);
    EXPECT_EQ(res.records.size(), 30U);
    EXPECT_EQ(res.stats.affinity_bins.size(), 1U);
    EXPECT_FALSE(res.stats.affinity_spearman.has_value());
    for (const auto& r : res.records) {
        EXPECT_EQ(r.k, 4);
        EXPECT_GE(r.affinity, -1.0);
        EXPECT_LE(r.affinity, 1.0);
        EXPECT_GE(r.diversity, 0.0);
        EXPECT_TRUE(r.baseline_scores.count("bm25"));
    }
    EXPECT_EQ(res.head_scores.size(), static_cast<std::size_t>(env.m.config().n_layers * env.m.config().n_heads));
}

TEST(ToyExperiment, DeterministicAcrossRunsAndThreads)
{
    const auto& env = shared_env();
    experiment_config cfg;
    cfg.n_test = 60;
    cfg.seed = 11;
    cfg.threads = 1;
    const auto a = run_toy_experiment(env.m, env.t, cfg);
    const auto b = run_toy_experiment(env.m, env.t, cfg);
    cfg.threads = 5;
    const auto c = run_toy_experiment(env.m, env.t, cfg);
    EXPECT_EQ(records_csv(a.records), records_csv(b.records));
    EXPECT_EQ(records_csv(a.records), records_csv(c.records));
    EXPECT_EQ(a.best_head, c.best_head);

    cfg.seed = 12;
    EXPECT_NE(records_csv(run_toy_experiment(env.m, env.t, cfg).records), records_csv(a.records));
}

TEST(ToyExperiment, ReportsRoundTrip)
{
    const auto& env = shared_env();
    experiment_config cfg;
    cfg.task = env.dir / "task.json";
    cfg.model = env.dir / "model.json";
    cfg.n_test = 64;
    cfg.bin_size = 16;
    cfg.output_dir = env.dir / "out";
    cfg.dense_tables = {env.dir / "embeddings.safetensors"};
    const auto res = run_experiment(cfg);

    std::ifstream csv(cfg.output_dir / "records.csv");
    EXPECT_EQ(read_records_csv(csv), res.records);
    std::ifstream jsonl(cfg.output_dir / "records.jsonl");
    EXPECT_EQ(read_records_jsonl(jsonl), res.records);
    for (const auto& r : res.records) EXPECT_TRUE(r.baseline_scores.count("dense:embeddings"));

    std::ifstream cj(cfg.output_dir / "correlations.json");
    const auto corr = nlohmann::json::parse(cj);
    EXPECT_EQ(corr["best_head"]["layer"].get<int>(), res.best_head.layer);
    EXPECT_TRUE(std::filesystem::exists(cfg.output_dir / "bins.csv"));
    EXPECT_TRUE(std::filesystem::exists(cfg.output_dir / "plot_data.json"));

    // re-analysing the saved records reproduces the bins
    std::ifstream saved(cfg.output_dir / "records.csv");
    const auto again = analyze(read_records_csv(saved), {16, trailing_bin::drop, std::nullopt, 1.0});
    ASSERT_EQ(again.affinity_bins.size(), res.stats.affinity_bins.size());
    for (std::size_t i = 0; i < again.affinity_bins.size(); ++i) {
        EXPECT_EQ(again.affinity_bins[i].mean_accuracy, res.stats.affinity_bins[i].mean_accuracy);
    }
}

TEST(CompareSelectors, IdenticalSelectorsAgreeAndLeakRaisesAffinity)
{
    const auto& env = shared_env();
    experiment_config cfg;
    cfg.n_test = 64;
    const auto rows = compare_selectors(env.m, env.t, cfg, {"random", "random", "bm25", "oracle-leak"});
    ASSERT_EQ(rows.size(), 4U);
    EXPECT_EQ(rows[0].accuracy, rows[1].accuracy);
    EXPECT_EQ(rows[0].mean_affinity, rows[1].mean_affinity);
    EXPECT_EQ(rows[0].mean_diversity, rows[1].mean_diversity);
    EXPECT_GE(rows[2].mean_bm25, rows[0].mean_bm25);
    EXPECT_GT(rows[3].mean_affinity, rows[0].mean_affinity);

    std::stringstream s;
    write_compare_csv(s, env.t.name, rows);
    const auto back = read_compare_csv(s);
    ASSERT_EQ(back.size(), rows.size());
    for (std::size_t i = 0; i < rows.size(); ++i) {
        EXPECT_EQ(back[i].selector, rows[i].selector);
        EXPECT_EQ(back[i].accuracy, rows[i].accuracy);
        EXPECT_EQ(back[i].mean_affinity, rows[i].mean_affinity);
        EXPECT_EQ(back[i].mean_diversity, rows[i].mean_diversity);
        EXPECT_EQ(back[i].mean_bm25, rows[i].mean_bm25);
    }
}

TEST(Selectors, FixedAndErrors)
{
    const auto& env = shared_env();
    experiment_config cfg;
    cfg.n_test = 8;
    cfg.k = 2;
    cfg.selector = "fixed:3,5";
    const auto plans = plan_prompts(env.t, cfg);
    ASSERT_EQ(plans.size(), 8U);
    for (const auto& p : plans) {
        EXPECT_EQ(p["demo_ids"][0].get<std::string>(), env.t.pool[3].id);
        EXPECT_EQ(p["demo_ids"][1].get<std::string>(), env.t.pool[5].id);
        const auto text = p["text"].get<std::string>();
        for (const auto& span : p["label_char_spans"]) {
            const auto b = span[0].get<std::size_t>();
            const auto e = span[1].get<std::size_t>();
            const auto label = text.substr(b, e - b);
            EXPECT_NE(std::find(env.t.labels.begin(), env.t.labels.end(), label), env.t.labels.end());
        }
    }
    cfg.selector = "nearest";
    EXPECT_EQ(code_of([&] { plan_prompts(env.t, cfg); }), errc::invalid_argument);
    cfg.selector = "random";
    cfg.n_test = 10000;
    EXPECT_EQ(code_of([&] { plan_prompts(env.t, cfg); }), errc::invalid_argument);
}

TEST(Config, JsonAndEnvOverride)
{
    const auto dir = std::filesystem::temp_directory_path() / "iclprobe_cfg";
    std::filesystem::create_directories(dir);
    std::ofstream(dir / "cfg.json") << R"({"task": "t/task.json", "model": "/abs/model.json", "k": 8, "seed": 3,
        "selector": "dense:emb.safetensors", "trailing_bin": "merge", "head": {"layer": 1, "head": 2},
        "label_pooling": "mean", "covariance": "sample", "krr_gamma": 0.5, "krr_alpha": 0.1})";
    auto cfg = load_experiment_config(dir / "cfg.json");
    EXPECT_EQ(cfg.task, dir / "t/task.json");
    EXPECT_EQ(cfg.model, std::filesystem::path("/abs/model.json"));
    EXPECT_EQ(cfg.k, 8);
    EXPECT_EQ(cfg.selector, "dense:" + (dir / "emb.safetensors").string());
    EXPECT_EQ(cfg.trailing, trailing_bin::merge);
    EXPECT_EQ(cfg.head, (head_id{1, 2}));
    EXPECT_EQ(cfg.pooling, label_pooling::mean);
    EXPECT_EQ(cfg.covariance, covariance_norm::sample);
    EXPECT_EQ(cfg.krr_gamma, 0.5);
    EXPECT_EQ(cfg.krr_alpha, 0.1);
    EXPECT_EQ(cfg.bin_size, 30);

    ::setenv("ICLPROBE_SEED", "99", 1);
    apply_env_overrides(cfg);
    EXPECT_EQ(cfg.seed, 99U);
    ::setenv("ICLPROBE_SEED", "nine", 1);
    EXPECT_EQ(code_of([&] { apply_env_overrides(cfg); }), errc::invalid_argument);
    ::unsetenv("ICLPROBE_SEED");

    std::ofstream(dir / "broken.json") << "{";
    EXPECT_EQ(code_of([&] { load_experiment_config(dir / "broken.json"); }), errc::invalid_argument);
}
