#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"

#include "iclprobe/iclprobe.hpp"

namespace fs = std::filesystem;
using namespace iclprobe;

namespace {

// Flags mirroring experiment_config; each one overrides the JSON config only
// when given on the command line.
struct config_flags {
    std::string config;
    std::string task, model, capture, output_dir, selector, trailing, pooling, covariance, head;
    std::optional<int> k, n_test, bin_size, calibration_prompts, threads;
    std::optional<std::uint64_t> seed;
    std::optional<double> krr_gamma, krr_alpha;
    std::vector<std::string> dense_tables;

    void attach(CLI::App* app)
    {
        app->add_option("--config", config, "JSON experiment config; flags override its fields");
        app->add_option("--task", task, "task manifest (JSON)");
        app->add_option("--model", model, "toy model manifest (JSON)");
        app->add_option("--capture", capture, "capture manifest (JSON), instead of --task/--model");
        app->add_option("-k,--k", k, "demonstrations per prompt");
        app->add_option("--n-test", n_test, "test instances (0 = all)");
        app->add_option("--seed", seed, "sampling seed (ICLPROBE_SEED overrides)");
        app->add_option("--selector", selector, "random | bm25 | dense:<table> | fixed[:i,j,..] | oracle-leak");
        app->add_option("--bin-size", bin_size, "records per bin");
        app->add_option("--trailing-bin", trailing, "drop | merge")->check(CLI::IsMember({"drop", "merge"}));
        app->add_option("--output-dir", output_dir, "report directory");
        app->add_option("--calibration-prompts", calibration_prompts, "prompts used for head selection");
        app->add_option("--threads", threads, "worker threads (0 = hardware)");
        app->add_option("--head", head, "fix the head as LAYER,HEAD instead of searching");
        app->add_option("--label-pooling", pooling, "per-token | mean")->check(CLI::IsMember({"per-token", "mean"}));
        app->add_option("--covariance", covariance, "population | sample")->check(CLI::IsMember({"population", "sample"}));
        app->add_option("--krr-gamma", krr_gamma, "Laplacian kernel gamma (default: median heuristic)");
        app->add_option("--krr-alpha", krr_alpha, "kernel ridge regularization");
        app->add_option("--dense-table", dense_tables, "embedding table scored as an extra baseline");
    }

    experiment_config resolve() const
    {
        experiment_config c = config.empty() ? experiment_config{} : load_experiment_config(config);
        if (!task.empty()) c.task = task;
        if (!model.empty()) c.model = model;
        if (!capture.empty()) c.capture = capture;
        if (!output_dir.empty()) c.output_dir = output_dir;
        if (!selector.empty()) c.selector = selector;
        if (k) c.k = *k;
        if (n_test) c.n_test = *n_test;
        if (seed) c.seed = *seed;
        if (bin_size) c.bin_size = *bin_size;
        if (!trailing.empty()) c.trailing = trailing == "merge" ? trailing_bin::merge : trailing_bin::drop;
        if (calibration_prompts) c.calibration_prompts = *calibration_prompts;
        if (threads) c.threads = *threads;
        if (!head.empty()) c.head = parse_head(head);
        if (!pooling.empty()) c.pooling = pooling == "mean" ? label_pooling::mean : label_pooling::per_token;
        if (!covariance.empty()) c.covariance = covariance == "sample" ? covariance_norm::sample : covariance_norm::population;
        if (krr_gamma) c.krr_gamma = *krr_gamma;
        if (krr_alpha) c.krr_alpha = *krr_alpha;
        for (const auto& p : dense_tables) c.dense_tables.emplace_back(p);
        apply_env_overrides(c);
        return c;
    }

    static head_id parse_head(const std::string& s)
    {
        const auto comma = s.find(',');
        require(comma != std::string::npos, errc::invalid_argument, "--head expects LAYER,HEAD");
        try {
            return {std::stoi(s.substr(0, comma)), std::stoi(s.substr(comma + 1))};
        } catch (const std::exception&) {
            fail(errc::invalid_argument, "--head expects LAYER,HEAD, got '" + s + "'");
        }
    }
};

void print_head_scores(const std::vector<head_score>& scores)
{
    std::printf("layer,head,score\n");
    for (const auto& s : scores) std::printf("%d,%d,%.6f\n", s.id.layer, s.id.head, s.score);
    const auto best = select_best_head(scores);
    std::fprintf(stderr, "best head: layer %d head %d\n", best.layer, best.head);
}

std::vector<metric_record> load_all_records(const std::vector<std::string>& paths)
{
    std::vector<metric_record> out;
    for (const auto& p : paths) {
        auto r = load_records(p);
        out.insert(out.end(), r.begin(), r.end());
    }
    return out;
}

}  // namespace

int main(int argc, char** argv)
{
    CLI::App app{"Induction-head subspace probes for in-context demonstration analysis"};
    app.require_subcommand(1);

    config_flags flags;

    auto* score = app.add_subcommand("score-heads", "mean induction score of every head over calibration prompts");
    flags.attach(score);

    auto* run = app.add_subcommand("run", "run an experiment and write reports");
    flags.attach(run);

    std::vector<std::string> selectors{"random", "bm25", "oracle-leak"};
    std::string compare_out;
    auto* compare = app.add_subcommand("compare", "accuracy / affinity / diversity per demonstration selector");
    flags.attach(compare);
    compare->add_option("--selectors", selectors, "selectors to compare")->delimiter(',');
    compare->add_option("--out", compare_out, "CSV output (default: stdout)");

    std::vector<std::string> record_files;
    int stats_bin = 30;
    std::string stats_trailing = "drop";
    std::optional<double> stats_gamma;
    double stats_alpha = 1.0;
    std::string stats_out;
    auto add_stats_flags = [&](CLI::App* sub) {
        sub->add_option("records", record_files, "records.csv / records.jsonl files")->required();
        sub->add_option("--bin-size", stats_bin, "records per bin");
        sub->add_option("--trailing-bin", stats_trailing, "drop | merge")->check(CLI::IsMember({"drop", "merge"}));
        sub->add_option("--krr-gamma", stats_gamma, "Laplacian kernel gamma (default: median heuristic)");
        sub->add_option("--krr-alpha", stats_alpha, "kernel ridge regularization");
    };
    auto* stats = app.add_subcommand("stats", "bin and correlate existing records");
    add_stats_flags(stats);
    stats->add_option("--output-dir", stats_out, "write bins.csv and correlations.json here (default: stdout)");

    auto* plot = app.add_subcommand("export-plot-data", "plot-ready JSON from existing records");
    add_stats_flags(plot);
    plot->add_option("--out", stats_out, "JSON output (default: stdout)");

    toy_task_params toy;
    std::string toy_out;
    auto* make_toy = app.add_subcommand("make-toy-task", "write the synthetic feature task with its toy model");
    make_toy->add_option("--out", toy_out, "output directory")->required();
    make_toy->add_option("--classes", toy.n_classes, "label count");
    make_toy->add_option("--words-per-class", toy.words_per_class, "input words per class");
    make_toy->add_option("--feature-dim", toy.feature_dim, "word feature dimension");
    make_toy->add_option("--feature-noise", toy.feature_noise, "word feature noise");
    make_toy->add_option("--label-noise", toy.label_noise, "pool label flip probability");
    make_toy->add_option("--pool-size", toy.pool_size, "demonstration pool size");
    make_toy->add_option("--test-size", toy.test_size, "test split size");
    make_toy->add_option("--max-k", toy.max_k, "largest supported k");
    make_toy->add_option("--sharpness", toy.sharpness, "label-copy head sharpness");
    make_toy->add_option("--seed", toy.seed, "generator seed");

    std::string capture_mode_name = "head-search";
    std::string capture_out, capture_stem = "capture";
    auto* cap = app.add_subcommand("capture", "record toy-model activations as a capture file pair");
    flags.attach(cap);
    cap->add_option("--mode", capture_mode_name, "head-search | fixed-head")->check(CLI::IsMember({"head-search", "fixed-head"}));
    cap->add_option("--out", capture_out, "output directory")->required();
    cap->add_option("--stem", capture_stem, "file stem");

    std::string plan_out;
    auto* plan = app.add_subcommand("plan", "prompt plan (JSONL) for an external exporter");
    flags.attach(plan);
    plan->add_option("--out", plan_out, "JSONL output (default: stdout)");

    CLI11_PARSE(app, argc, argv);

    try {
        if (score->parsed()) {
            auto cfg = flags.resolve();
            if (!cfg.capture.empty()) {
                print_head_scores(capture_head_scores(load_capture(cfg.capture), cfg.calibration_prompts, cfg.threads));
            } else {
                print_head_scores(toy_head_scores(load_model_manifest(cfg.model), load_task(cfg.task), cfg));
            }
        } else if (run->parsed()) {
            auto cfg = flags.resolve();
            const auto res = run_experiment(cfg);
            std::fprintf(stderr, "head (%d, %d): %zu records, accuracy %.4f, affinity spearman %s\n", res.best_head.layer,
                         res.best_head.head, res.records.size(), res.stats.accuracy,
                         res.stats.affinity_spearman ? std::to_string(*res.stats.affinity_spearman).c_str() : "n/a");
            if (cfg.output_dir.empty()) write_records_csv(std::cout, res.records);
        } else if (compare->parsed()) {
            auto cfg = flags.resolve();
            const auto t = load_task(cfg.task);
            const auto rows = compare_selectors(load_model_manifest(cfg.model), t, cfg, selectors);
            if (compare_out.empty()) {
                write_compare_csv(std::cout, t.name, rows);
            } else {
                std::ostringstream s;
                write_compare_csv(s, t.name, rows);
                write_text(compare_out, s.str());
            }
        } else if (stats->parsed() || plot->parsed()) {
            const auto records = load_all_records(record_files);
            const analysis_options opt{stats_bin, stats_trailing == "merge" ? trailing_bin::merge : trailing_bin::drop,
                                       stats_gamma, stats_alpha};
            const auto a = analyze(records, opt);
            if (plot->parsed()) {
                const auto text = plot_data_json(a).dump(1) + "\n";
                if (stats_out.empty()) {
                    std::cout << text;
                } else {
                    write_text(stats_out, text);
                }
            } else if (stats_out.empty()) {
                write_bins_csv(std::cout, a);
                std::cout << correlations_json(a).dump(1) << '\n';
            } else {
                fs::create_directories(stats_out);
                std::ostringstream s;
                write_bins_csv(s, a);
                write_text(fs::path(stats_out) / "bins.csv", s.str());
                write_text(fs::path(stats_out) / "correlations.json", correlations_json(a).dump(1) + "\n");
            }
        } else if (make_toy->parsed()) {
            write_toy_task(make_toy_task(toy), toy_out);
            std::fprintf(stderr, "wrote toy task to %s\n", toy_out.c_str());
        } else if (cap->parsed()) {
            auto cfg = flags.resolve();
            const auto mode = capture_mode_name == "fixed-head" ? capture_mode::fixed_head : capture_mode::head_search;
            const auto m = load_model_manifest(cfg.model);
            const auto t = load_task(cfg.task);
            auto head = cfg.head;
            if (mode == capture_mode::fixed_head && !head) head = select_best_head(toy_head_scores(m, t, cfg));
            const auto path = save_capture(capture_toy_prompts(m, t, cfg, mode, head), capture_out, capture_stem);
            std::fprintf(stderr, "wrote %s\n", path.string().c_str());
        } else if (plan->parsed()) {
            auto cfg = flags.resolve();
            std::ostringstream s;
            for (const auto& j : plan_prompts(load_task(cfg.task), cfg)) s << j.dump() << '\n';
            if (plan_out.empty()) {
                std::cout << s.str();
            } else {
                write_text(plan_out, s.str());
            }
        }
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
    return 0;
}
