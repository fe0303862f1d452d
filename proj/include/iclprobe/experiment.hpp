#pragma once

// End-to-end experiment driver. For every test instance: pick k
// demonstrations, assemble the prompt, run the toy model (or read the
// capture), predict the label, compute affinity/diversity in the best
// induction head's subspace plus baseline similarity scores, then bin,
// correlate and write reports.

#include <algorithm>
#include <atomic>
#include <cstdlib>
#include <exception>
#include <filesystem>
#include <fstream>
#include <functional>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "json.hpp"

#include "iclprobe/capture.hpp"
#include "iclprobe/dataset.hpp"
#include "iclprobe/error.hpp"
#include "iclprobe/induction.hpp"
#include "iclprobe/metrics.hpp"
#include "iclprobe/model.hpp"
#include "iclprobe/prompt.hpp"
#include "iclprobe/retrievers.hpp"
#include "iclprobe/rng.hpp"
#include "iclprobe/stats.hpp"
#include "iclprobe/toy_circuits.hpp"

namespace iclprobe {

/// Index of the candidate with the largest logit; ties go to the lowest index.
inline int predict_label(std::span<const float> logits, std::span<const int> candidates)
{
    require(!candidates.empty(), errc::empty_input, "no label candidates");
    int best = -1;
    float best_logit = 0.0F;
    for (std::size_t i = 0; i < candidates.size(); ++i) {
        const int c = candidates[i];
        require(c >= 0 && static_cast<std::size_t>(c) < logits.size(), errc::token_out_of_range,
                "candidate token " + std::to_string(c) + " outside vocabulary of " + std::to_string(logits.size()));
        if (best < 0 || logits[static_cast<std::size_t>(c)] > best_logit) {
            best = static_cast<int>(i);
            best_logit = logits[static_cast<std::size_t>(c)];
        }
    }
    return best;
}

/// Runs fn(i) for i in [0, n) on `threads` workers (0 = hardware). Results
/// must be written to per-index slots; the first failure by index is rethrown.
inline void parallel_for(std::size_t n, int threads, const std::function<void(std::size_t)>& fn)
{
    const auto hw = std::max(1U, std::thread::hardware_concurrency());
    const auto workers = std::min<std::size_t>(n, threads > 0 ? static_cast<std::size_t>(threads) : hw);
    if (workers <= 1) {
        for (std::size_t i = 0; i < n; ++i) fn(i);
        return;
    }
    std::vector<std::exception_ptr> errors(n);
    std::atomic<std::size_t> next{0};
    {
        std::vector<std::jthread> pool;
        for (std::size_t w = 0; w < workers; ++w) {
            pool.emplace_back([&] {
                for (auto i = next.fetch_add(1); i < n; i = next.fetch_add(1)) {
                    try {
                        fn(i);
                    } catch (...) {
                        errors[i] = std::current_exception();
                    }
                }
            });
        }
    }
    for (auto& e : errors) {
        if (e) std::rethrow_exception(e);
    }
}

struct experiment_config {
    std::filesystem::path task;
    std::filesystem::path model;    // toy model manifest
    std::filesystem::path capture;  // capture manifest (instead of model + task)
    int k = 4;
    int n_test = 0;  // 0 = whole test split
    std::uint64_t seed = 0;
    // random | bm25 | dense:<table> | fixed | fixed:<i,j,..> | oracle-leak
    std::string selector = "random";
    int bin_size = 30;
    trailing_bin trailing = trailing_bin::drop;
    std::filesystem::path output_dir;
    int calibration_prompts = 64;
    int threads = 0;
    std::optional<head_id> head;  // skip head search
    label_pooling pooling = label_pooling::per_token;
    covariance_norm covariance = covariance_norm::population;
    std::optional<double> krr_gamma;  // median heuristic when unset
    double krr_alpha = 1.0;
    std::vector<std::filesystem::path> dense_tables;  // extra per-instance baselines
};

inline head_id head_from_json(const nlohmann::json& j) { return {j.at("layer").get<int>(), j.at("head").get<int>()}; }

/// Reads an experiment config; relative paths resolve against `base`.
inline experiment_config config_from_json(const nlohmann::json& j, const std::filesystem::path& base)
{
    auto path = [&](const std::string& key) -> std::filesystem::path {
        if (!j.contains(key) || j[key].is_null()) return {};
        std::filesystem::path p = j[key].get<std::string>();
        return p.is_absolute() ? p : base / p;
    };
    experiment_config c;
    try {
        c.task = path("task");
        c.model = path("model");
        c.capture = path("capture");
        c.output_dir = path("output_dir");
        c.k = j.value("k", c.k);
        c.n_test = j.value("n_test", c.n_test);
        c.seed = j.value("seed", c.seed);
        c.selector = j.value("selector", c.selector);
        if (c.selector.rfind("dense:", 0) == 0) {
            std::filesystem::path p = c.selector.substr(6);
            if (p.is_relative()) c.selector = "dense:" + (base / p).string();
        }
        c.bin_size = j.value("bin_size", c.bin_size);
        if (j.value("trailing_bin", std::string("drop")) == "merge") c.trailing = trailing_bin::merge;
        c.calibration_prompts = j.value("calibration_prompts", c.calibration_prompts);
        c.threads = j.value("threads", c.threads);
        if (j.contains("head") && !j["head"].is_null()) c.head = head_from_json(j["head"]);
        if (j.value("label_pooling", std::string("per-token")) == "mean") c.pooling = label_pooling::mean;
        if (j.value("covariance", std::string("population")) == "sample") c.covariance = covariance_norm::sample;
        if (j.contains("krr_gamma") && !j["krr_gamma"].is_null()) c.krr_gamma = j["krr_gamma"].get<double>();
        c.krr_alpha = j.value("krr_alpha", c.krr_alpha);
        for (const auto& p : j.value("dense_tables", std::vector<std::string>{})) {
            std::filesystem::path fp = p;
            c.dense_tables.push_back(fp.is_absolute() ? fp : base / fp);
        }
    } catch (const nlohmann::json::exception& ex) {
        fail(errc::invalid_argument, "experiment config: " + std::string(ex.what()));
    }
    return c;
}

inline experiment_config load_experiment_config(const std::filesystem::path& path)
{
    std::ifstream in(path);
    require(static_cast<bool>(in), errc::io_failure, "cannot open config '" + path.string() + "'");
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(in);
    } catch (const nlohmann::json::exception& ex) {
        fail(errc::invalid_argument, "experiment config: " + std::string(ex.what()));
    }
    return config_from_json(j, path.parent_path());
}

/// ICLPROBE_SEED, when set, replaces the configured seed.
inline void apply_env_overrides(experiment_config& cfg)
{
    if (const char* s = std::getenv("ICLPROBE_SEED"); s != nullptr && *s != '\0') {
        char* end = nullptr;
        const auto v = std::strtoull(s, &end, 10);
        require(end != nullptr && *end == '\0', errc::invalid_argument, std::string("ICLPROBE_SEED is not an integer: ") + s);
        cfg.seed = v;
    }
}

// ---------------------------------------------------------------------------
// Analysis of a record set: bins, correlations, kernel ridge fit, boundary.

struct analysis {
    std::size_t n_records = 0;
    double accuracy = 0.0;
    double mean_affinity = 0.0;
    double mean_diversity = 0.0;
    std::vector<bin_summary> affinity_bins;
    std::vector<bin_summary> diversity_bins;
    std::optional<double> affinity_spearman;
    std::optional<double> diversity_r2;
    std::optional<kernel_ridge_model> diversity_krr;
    double diversity_offset = 0.0;  // added to krr predictions
    correlation_table matrix;
    std::optional<decision_boundary> boundary;
};

struct analysis_options {
    int bin_size = 30;
    trailing_bin trailing = trailing_bin::drop;
    std::optional<double> krr_gamma;
    double krr_alpha = 1.0;
};

inline analysis analyze(std::span<const metric_record> records, const analysis_options& opt)
{
    require(!records.empty(), errc::empty_input, "no records to analyze");
    analysis a;
    a.n_records = records.size();
    for (const auto& r : records) {
        a.accuracy += r.correct ? 1.0 : 0.0;
        a.mean_affinity += r.affinity;
        a.mean_diversity += r.diversity;
    }
    const auto n = static_cast<double>(records.size());
    a.accuracy /= n;
    a.mean_affinity /= n;
    a.mean_diversity /= n;

    if (records.size() >= static_cast<std::size_t>(opt.bin_size)) {
        a.affinity_bins = bin_records(records, metric_kind::affinity, opt.bin_size, opt.trailing);
        a.diversity_bins = bin_records(records, metric_kind::diversity, opt.bin_size, opt.trailing);
    }
    auto column = [](const std::vector<bin_summary>& bins, bool metric) {
        std::vector<double> v;
        for (const auto& b : bins) v.push_back(metric ? b.mean_metric : b.mean_accuracy);
        return v;
    };
    if (a.affinity_bins.size() >= 2) {
        try {
            a.affinity_spearman = spearman(column(a.affinity_bins, true), column(a.affinity_bins, false));
        } catch (const error& e) {
            if (e.code() != errc::constant_input) throw;
        }
    }
    if (a.diversity_bins.size() >= 2) {
        const auto xs = column(a.diversity_bins, true);
        const auto ys = column(a.diversity_bins, false);
        // the dual-form ridge has no intercept, so fit the centered accuracies
        double y_mean = 0.0;
        for (double y : ys) y_mean += y;
        y_mean /= static_cast<double>(ys.size());
        std::vector<double> centered;
        for (double y : ys) centered.push_back(y - y_mean);
        const double gamma = opt.krr_gamma.value_or(median_gamma(xs));
        try {
            a.diversity_krr = krr_fit(xs, centered, gamma, opt.krr_alpha);
            a.diversity_offset = y_mean;
            std::vector<double> pred;
            for (double x : xs) pred.push_back(y_mean + krr_predict(*a.diversity_krr, x));
            a.diversity_r2 = r2_score(ys, pred);
        } catch (const error& e) {
            if (e.code() != errc::constant_input && e.code() != errc::singular_system) throw;
        }
    }

    std::map<std::string, std::vector<double>> cols;
    for (const auto& r : records) {
        cols["accuracy"].push_back(r.correct ? 1.0 : 0.0);
        cols["affinity"].push_back(r.affinity);
        cols["diversity"].push_back(r.diversity);
    }
    for (const auto& name : baseline_names(records)) {
        std::vector<double> col;
        for (const auto& r : records) {
            auto it = r.baseline_scores.find(name);
            if (it == r.baseline_scores.end()) break;
            col.push_back(it->second);
        }
        if (col.size() == records.size()) cols[name] = std::move(col);
    }
    a.matrix = correlation_matrix(cols);

    if (a.affinity_bins.size() >= 2) {
        std::vector<double> aff, div, acc;
        for (const auto& b : a.affinity_bins) {
            aff.push_back(b.mean_affinity);
            div.push_back(b.mean_diversity);
            acc.push_back(b.mean_accuracy);
        }
        try {
            a.boundary = fit_boundary(aff, div, acc, median(acc));
        } catch (const error& e) {
            if (e.code() != errc::single_class) throw;
        }
    }
    return a;
}

namespace detail {

inline nlohmann::json optional_number(const std::optional<double>& v)
{
    if (!v || std::isnan(*v)) return nullptr;
    return *v;
}

inline nlohmann::json number_or_null(double v) { return std::isnan(v) ? nlohmann::json(nullptr) : nlohmann::json(v); }

}  // namespace detail

inline nlohmann::json correlations_json(const analysis& a)
{
    using nlohmann::json;
    json j;
    j["n_records"] = a.n_records;
    j["accuracy"] = a.accuracy;
    j["mean_affinity"] = a.mean_affinity;
    j["mean_diversity"] = a.mean_diversity;
    j["n_bins"] = a.affinity_bins.size();
    j["affinity_spearman"] = detail::optional_number(a.affinity_spearman);
    j["diversity_r2"] = detail::optional_number(a.diversity_r2);
    if (a.diversity_krr) {
        j["krr"] = {{"gamma", a.diversity_krr->gamma}, {"alpha", a.diversity_krr->alpha}, {"offset", a.diversity_offset}};
    } else {
        j["krr"] = nullptr;
    }
    json values = json::array();
    for (const auto& row : a.matrix.values) {
        json r = json::array();
        for (double v : row) r.push_back(detail::number_or_null(v));
        values.push_back(r);
    }
    j["matrix"] = {{"names", a.matrix.names}, {"values", values}};
    if (a.boundary) {
        j["boundary"] = {{"w_affinity", a.boundary->w_affinity},
                         {"w_diversity", a.boundary->w_diversity},
                         {"bias", a.boundary->bias},
                         {"threshold", a.boundary->threshold},
                         {"train_accuracy", a.boundary->train_accuracy}};
    } else {
        j["boundary"] = nullptr;
    }
    return j;
}

/// Scatter points, fitted-curve samples and the boundary line, for any
/// plotting tool.
inline nlohmann::json plot_data_json(const analysis& a, int curve_samples = 50)
{
    using nlohmann::json;
    json j;
    auto points = [](const std::vector<bin_summary>& bins) {
        json p = json::array();
        for (const auto& b : bins) p.push_back({{"x", b.mean_metric}, {"y", b.mean_accuracy}, {"size", b.size}});
        return p;
    };
    j["affinity"] = {{"bins", points(a.affinity_bins)}, {"spearman", detail::optional_number(a.affinity_spearman)}};
    json curve = json::array();
    if (a.diversity_krr && !a.diversity_bins.empty()) {
        const double lo = a.diversity_bins.front().mean_metric;
        const double hi = a.diversity_bins.back().mean_metric;
        for (int i = 0; i < curve_samples; ++i) {
            const double x = curve_samples == 1 ? lo : lo + (hi - lo) * i / (curve_samples - 1);
            curve.push_back({{"x", x}, {"y", a.diversity_offset + krr_predict(*a.diversity_krr, x)}});
        }
    }
    j["diversity"] = {{"bins", points(a.diversity_bins)}, {"curve", curve}, {"r2", detail::optional_number(a.diversity_r2)}};
    json scatter = json::array();
    for (const auto& b : a.affinity_bins) {
        scatter.push_back({{"affinity", b.mean_affinity}, {"diversity", b.mean_diversity}, {"accuracy", b.mean_accuracy}});
    }
    j["scatter"] = scatter;
    if (a.boundary && !a.affinity_bins.empty() && a.boundary->w_diversity != 0.0) {
        double lo = a.affinity_bins.front().mean_affinity, hi = lo;
        for (const auto& b : a.affinity_bins) {
            lo = std::min(lo, b.mean_affinity);
            hi = std::max(hi, b.mean_affinity);
        }
        auto div_at = [&](double aff) { return -(a.boundary->w_affinity * aff + a.boundary->bias) / a.boundary->w_diversity; };
        j["boundary"] = {{"w_affinity", a.boundary->w_affinity},
                         {"w_diversity", a.boundary->w_diversity},
                         {"bias", a.boundary->bias},
                         {"line", json::array({json::array({lo, div_at(lo)}), json::array({hi, div_at(hi)})})}};
    } else {
        j["boundary"] = nullptr;
    }
    return j;
}

inline void write_bins_csv(std::ostream& out, const analysis& a)
{
    out << "metric,bin,size,mean_metric,mean_accuracy,mean_affinity,mean_diversity\n";
    auto emit = [&](const char* name, const std::vector<bin_summary>& bins) {
        for (std::size_t i = 0; i < bins.size(); ++i) {
            const auto& b = bins[i];
            out << name << ',' << i << ',' << b.size << ',' << detail::format_double(b.mean_metric) << ','
                << detail::format_double(b.mean_accuracy) << ',' << detail::format_double(b.mean_affinity) << ','
                << detail::format_double(b.mean_diversity) << '\n';
        }
    };
    emit("affinity", a.affinity_bins);
    emit("diversity", a.diversity_bins);
}

inline void write_text(const std::filesystem::path& path, const std::string& text)
{
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    require(static_cast<bool>(out), errc::io_failure, "cannot write '" + path.string() + "'");
    out << text;
}

// ---------------------------------------------------------------------------

struct experiment_result {
    std::vector<metric_record> records;  // sorted by instance_id
    head_id best_head;
    std::vector<head_score> head_scores;  // calibration means, empty when the head was given
    analysis stats;
};

namespace detail {

struct selector_spec {
    enum kind_t { random, bm25, dense, fixed, oracle_leak } kind = random;
    std::filesystem::path table;
    std::vector<int> fixed_indices;
};

inline selector_spec parse_selector(const std::string& s)
{
    selector_spec sp;
    if (s == "random") {
        sp.kind = selector_spec::random;
    } else if (s == "bm25") {
        sp.kind = selector_spec::bm25;
    } else if (s == "oracle-leak") {
        sp.kind = selector_spec::oracle_leak;
    } else if (s.rfind("dense:", 0) == 0) {
        sp.kind = selector_spec::dense;
        sp.table = s.substr(6);
    } else if (s == "fixed" || s.rfind("fixed:", 0) == 0) {
        sp.kind = selector_spec::fixed;
        if (s.size() > 6) {
            std::stringstream ss(s.substr(6));
            std::string item;
            while (std::getline(ss, item, ',')) sp.fixed_indices.push_back(std::stoi(item));
        }
    } else {
        fail(errc::invalid_argument, "unknown selector '" + s + "'");
    }
    return sp;
}

/// Everything needed to build prompts for a task with a given selector.
struct toy_context {
    const task& t;
    experiment_config cfg;
    selector_spec sel;
    bm25_index bm25;
    std::vector<std::string> pool_texts;
    std::optional<embedding_table> selector_table;
    std::vector<int> selector_pool_rows;
    std::vector<std::pair<std::string, embedding_table>> baseline_tables;

    toy_context(const task& t_, const experiment_config& c) : t(t_), cfg(c), sel(parse_selector(c.selector))
    {
        require(!t.pool.empty(), errc::empty_input, "demonstration pool is empty");
        for (const auto& it : t.pool) pool_texts.push_back(it.ex.input_text);
        bm25 = bm25_build(pool_texts);
        if (sel.kind == selector_spec::dense) {
            selector_table = load_embedding_table(sel.table);
            for (const auto& it : t.pool) selector_pool_rows.push_back(selector_table->row_of(it.id));
        }
        for (const auto& p : cfg.dense_tables) baseline_tables.emplace_back("dense:" + p.stem().string(), load_embedding_table(p));
        require(cfg.k >= 1, errc::invalid_argument, "k must be at least 1");
        require(static_cast<std::size_t>(cfg.k) <= t.pool.size() || sel.kind == selector_spec::oracle_leak,
                errc::invalid_argument, "k exceeds the demonstration pool");
    }

    std::vector<int> random_demos(std::size_t instance, int k) const
    {
        rng gen(mix_seed(cfg.seed, instance));
        std::vector<int> out;
        for (auto i : gen.sample_without_replacement(t.pool.size(), static_cast<std::size_t>(k))) out.push_back(static_cast<int>(i));
        return out;
    }

    /// Pool indices of the demonstrations, in prompt order; -1 stands for
    /// the query itself (oracle-leak selector).
    std::vector<int> select_demos(std::size_t instance) const
    {
        const auto& query = t.test[instance];
        const int k = cfg.k;
        switch (sel.kind) {
        case selector_spec::random: return random_demos(instance, k);
        case selector_spec::oracle_leak: {
            auto d = random_demos(instance, k);
            d.back() = -1;
            return d;
        }
        case selector_spec::fixed: {
            std::vector<int> d = sel.fixed_indices;
            if (d.empty()) {
                for (int i = 0; i < k; ++i) d.push_back(i);
            }
            require(static_cast<int>(d.size()) == k, errc::invalid_argument, "fixed selector lists " + std::to_string(d.size())
                                                                                 + " demonstrations, k is " + std::to_string(k));
            for (int i : d) require(i >= 0 && static_cast<std::size_t>(i) < t.pool.size(), errc::index_out_of_range, "fixed demo");
            return d;
        }
        case selector_spec::bm25: {
            std::vector<scored_doc> scores;
            for (int d = 0; d < bm25.n_docs; ++d) scores.push_back({d, bm25_score(bm25, query.ex.input_text, d)});
            return select(scores, k, std::nullopt, select_mode::top_k);
        }
        case selector_spec::dense: {
            const auto& tab = *selector_table;
            const auto& qv = tab.vectors[static_cast<std::size_t>(tab.row_of(query.id))];
            std::vector<scored_doc> scores;
            for (std::size_t d = 0; d < t.pool.size(); ++d) {
                scores.push_back({static_cast<int>(d), dense_score(tab, qv, selector_pool_rows[d])});
            }
            return select(scores, k, std::nullopt, select_mode::top_k);
        }
        }
        return {};
    }

    prompt_spec build_spec(std::size_t instance, const std::vector<int>& demos) const
    {
        prompt_spec spec;
        spec.templ = t.templ;
        spec.separator = t.separator;
        spec.forerunner = t.forerunner;
        spec.query = t.test[instance].ex;
        for (int d : demos) spec.demonstrations.push_back(d < 0 ? spec.query : t.pool[static_cast<std::size_t>(d)].ex);
        return spec;
    }

    std::map<std::string, double> baseline_scores(std::size_t instance, const std::vector<int>& demos) const
    {
        const auto& query = t.test[instance];
        std::map<std::string, double> out;
        double total = 0.0;
        for (int d : demos) {
            if (d >= 0) {
                total += bm25_score(bm25, query.ex.input_text, d);
            } else {
                // the leaked query scored as a document of the pool statistics
                const auto terms = bm25_tokenize(query.ex.input_text);
                double s = 0.0;
                for (const auto& term : terms) {
                    const double f = static_cast<double>(std::count(terms.begin(), terms.end(), term));
                    const double len_ratio = bm25.avg_doc_len > 0.0 ? static_cast<double>(terms.size()) / bm25.avg_doc_len : 1.0;
                    s += bm25.idf(term) * f * (bm25.k1 + 1.0) / (f + bm25.k1 * (1.0 - bm25.b + bm25.b * len_ratio));
                }
                total += s;
            }
        }
        out["bm25"] = total / static_cast<double>(demos.size());
        for (const auto& [name, tab] : baseline_tables) {
            const auto& qv = tab.vectors[static_cast<std::size_t>(tab.row_of(query.id))];
            double s = 0.0;
            for (int d : demos) {
                const auto& id = d < 0 ? query.id : t.pool[static_cast<std::size_t>(d)].id;
                s += dense_score(tab, qv, tab.row_of(id));
            }
            out[name] = s / static_cast<double>(demos.size());
        }
        return out;
    }
};

inline std::size_t resolve_n_test(int n_test, std::size_t available)
{
    require(n_test >= 0, errc::invalid_argument, "n_test must be non-negative");
    const auto n = n_test == 0 ? available : static_cast<std::size_t>(n_test);
    require(n >= 1 && n <= available, errc::invalid_argument,
            "n_test " + std::to_string(n) + " outside the " + std::to_string(available) + " available test instances");
    return n;
}

inline void sort_records(std::vector<metric_record>& records)
{
    std::sort(records.begin(), records.end(),
              [](const metric_record& a, const metric_record& b) { return a.instance_id < b.instance_id; });
}

inline std::pair<head_id, std::vector<head_score>> calibrate_head(std::size_t n_calib,
                                                                  const std::function<std::vector<head_score>(std::size_t)>& score,
                                                                  int threads)
{
    std::vector<std::vector<head_score>> per_prompt(n_calib);
    parallel_for(n_calib, threads, [&](std::size_t i) { per_prompt[i] = score(i); });
    auto means = mean_head_scores(per_prompt);
    return {select_best_head(means), means};
}

}  // namespace detail

/// Mean s(h) per head over the first `calibration_prompts` toy prompts.
inline std::vector<head_score> toy_head_scores(const model& m, const task& t, const experiment_config& cfg)
{
    detail::toy_context ctx(t, cfg);
    const auto n = detail::resolve_n_test(cfg.n_test, t.test.size());
    const auto n_calib = std::min<std::size_t>(n, static_cast<std::size_t>(std::max(1, cfg.calibration_prompts)));
    return detail::calibrate_head(
               n_calib,
               [&](std::size_t i) {
                   const auto prompt = assemble(ctx.build_spec(i, ctx.select_demos(i)), t.tok);
                   return probe_prompt(m, prompt, t.test[i].ex.label_id, std::nullopt).head_scores;
               },
               cfg.threads)
        .second;
}

inline experiment_result run_toy_experiment(const model& m, const task& t, const experiment_config& cfg)
{
    detail::toy_context ctx(t, cfg);
    const auto n = detail::resolve_n_test(cfg.n_test, t.test.size());
    const auto candidates = t.candidate_tokens();
    for (int c : candidates) {
        require(c < m.config().vocab_size, errc::capture_mismatch, "label candidate token outside the model vocabulary");
    }

    std::vector<assembled_prompt> prompts(n);
    std::vector<std::vector<int>> demos(n);
    parallel_for(n, cfg.threads, [&](std::size_t i) {
        demos[i] = ctx.select_demos(i);
        prompts[i] = assemble(ctx.build_spec(i, demos[i]), t.tok);
    });

    experiment_result res;
    if (cfg.head) {
        res.best_head = *cfg.head;
    } else {
        const auto n_calib = std::min<std::size_t>(n, static_cast<std::size_t>(std::max(1, cfg.calibration_prompts)));
        auto [best, means] = detail::calibrate_head(
            n_calib,
            [&](std::size_t i) { return probe_prompt(m, prompts[i], t.test[i].ex.label_id, std::nullopt).head_scores; },
            cfg.threads);
        res.best_head = best;
        res.head_scores = std::move(means);
    }
    const auto hw = m.head_qk(res.best_head.layer, res.best_head.head);

    res.records.resize(n);
    parallel_for(n, cfg.threads, [&](std::size_t i) {
        const auto& query = t.test[i];
        capture_spec spec;
        spec.attn_rows = false;
        spec.hidden_layers = {res.best_head.layer};
        const auto fwd = m.forward(prompts[i].tokens, spec);
        const auto acts = prompt_activations::of(fwd, m.config().n_layers);
        const auto reps = extract_prompt_reps(acts, prompt_layout::of(prompts[i]), res.best_head, hw, cfg.pooling);
        const int predicted = predict_label(fwd.logits.row(fwd.logits.rows - 1), candidates);

        metric_record& r = res.records[i];
        r.instance_id = query.id;
        r.k = cfg.k;
        r.affinity = affinity(reps.query, reps.labels);
        r.diversity = diversity(reps.labels, cfg.covariance);
        r.correct = predicted == query.ex.label_id;
        r.baseline_scores = ctx.baseline_scores(i, demos[i]);
    });
    detail::sort_records(res.records);
    res.stats = analyze(res.records, {cfg.bin_size, cfg.trailing, cfg.krr_gamma, cfg.krr_alpha});
    return res;
}

/// Mean s(h) per head over the first `calibration_prompts` captured prompts.
inline std::vector<head_score> capture_head_scores(const capture_set& cap, int calibration_prompts, int threads = 0)
{
    require(!cap.prompts.empty(), errc::empty_input, "capture holds no prompts");
    const auto n_calib = std::min<std::size_t>(cap.prompts.size(), static_cast<std::size_t>(std::max(1, calibration_prompts)));
    return detail::calibrate_head(
               n_calib,
               [&](std::size_t i) {
                   const auto& p = cap.prompts[i];
                   return probe_prompt(cap.activations(i), p.layout, p.query_label_id, std::nullopt, nullptr).head_scores;
               },
               threads)
        .second;
}

inline experiment_result run_capture_experiment(const capture_set& cap, const experiment_config& cfg)
{
    const auto n = detail::resolve_n_test(cfg.n_test, cap.prompts.size());
    experiment_result res;
    if (cfg.head) {
        res.best_head = *cfg.head;
    } else if (cap.best_head) {
        res.best_head = *cap.best_head;
    } else {
        res.head_scores = capture_head_scores(cap, cfg.calibration_prompts, cfg.threads);
        res.best_head = select_best_head(res.head_scores);
    }
    const auto hw = cap.weights(res.best_head);

    res.records.resize(n);
    parallel_for(n, cfg.threads, [&](std::size_t i) {
        const auto& p = cap.prompts[i];
        const auto probe = probe_prompt(cap.activations(i), p.layout, p.query_label_id, res.best_head, &hw, cfg.pooling);
        const auto logits = cap.candidate_logits(i);
        std::vector<int> idx(logits.size());
        std::iota(idx.begin(), idx.end(), 0);
        metric_record& r = res.records[i];
        r.instance_id = p.instance_id;
        r.k = static_cast<int>(p.layout.label_spans.size());
        r.affinity = affinity(probe.reps->query, probe.reps->labels);
        r.diversity = diversity(probe.reps->labels, cfg.covariance);
        r.correct = predict_label(logits, idx) == p.query_label_id;
        r.baseline_scores = p.baseline_scores;
    });
    detail::sort_records(res.records);
    res.stats = analyze(res.records, {cfg.bin_size, cfg.trailing, cfg.krr_gamma, cfg.krr_alpha});
    return res;
}

inline nlohmann::json head_scores_json(const std::vector<head_score>& scores)
{
    nlohmann::json a = nlohmann::json::array();
    for (const auto& s : scores) a.push_back({{"layer", s.id.layer}, {"head", s.id.head}, {"score", s.score}});
    return a;
}

/// records.csv, records.jsonl, bins.csv, correlations.json, plot_data.json.
inline void write_reports(const experiment_result& res, const std::filesystem::path& dir)
{
    std::filesystem::create_directories(dir);
    {
        std::ostringstream s;
        write_records_csv(s, res.records);
        write_text(dir / "records.csv", s.str());
    }
    {
        std::ostringstream s;
        write_records_jsonl(s, res.records);
        write_text(dir / "records.jsonl", s.str());
    }
    {
        std::ostringstream s;
        write_bins_csv(s, res.stats);
        write_text(dir / "bins.csv", s.str());
    }
    auto corr = correlations_json(res.stats);
    corr["best_head"] = {{"layer", res.best_head.layer}, {"head", res.best_head.head}};
    corr["head_scores"] = head_scores_json(res.head_scores);
    write_text(dir / "correlations.json", corr.dump(1) + "\n");
    write_text(dir / "plot_data.json", plot_data_json(res.stats).dump(1) + "\n");
}

inline experiment_result run_experiment(const experiment_config& cfg)
{
    experiment_result res;
    if (!cfg.capture.empty()) {
        res = run_capture_experiment(load_capture(cfg.capture), cfg);
    } else {
        require(!cfg.task.empty() && !cfg.model.empty(), errc::invalid_argument,
                "an experiment needs either a capture or a task plus a toy model");
        const auto t = load_task(cfg.task);
        const auto m = load_model_manifest(cfg.model);
        res = run_toy_experiment(m, t, cfg);
    }
    if (!cfg.output_dir.empty()) write_reports(res, cfg.output_dir);
    return res;
}

// ---------------------------------------------------------------------------

struct selector_row {
    std::string selector;
    double accuracy = 0.0;
    double mean_affinity = 0.0;
    double mean_diversity = 0.0;
    double mean_bm25 = 0.0;
};

/// Runs each selector on the same task, seed and best head (found once with
/// the random selector unless the config fixes it).
inline std::vector<selector_row> compare_selectors(const model& m, const task& t, const experiment_config& base,
                                                   const std::vector<std::string>& selectors)
{
    experiment_config calib = base;
    calib.selector = "random";
    head_id head;
    if (base.head) {
        head = *base.head;
    } else {
        head = select_best_head(toy_head_scores(m, t, calib));
    }
    std::vector<selector_row> rows;
    for (const auto& s : selectors) {
        experiment_config c = base;
        c.selector = s;
        c.head = head;
        const auto res = run_toy_experiment(m, t, c);
        selector_row row{s, res.stats.accuracy, res.stats.mean_affinity, res.stats.mean_diversity, 0.0};
        for (const auto& r : res.records) row.mean_bm25 += r.baseline_scores.at("bm25");
        row.mean_bm25 /= static_cast<double>(res.records.size());
        rows.push_back(std::move(row));
    }
    return rows;
}

inline void write_compare_csv(std::ostream& out, const std::string& task_name, const std::vector<selector_row>& rows)
{
    out << "task,selector,accuracy,mean_affinity,mean_diversity,mean_bm25\n";
    for (const auto& r : rows) {
        out << detail::csv_field(task_name) << ',' << detail::csv_field(r.selector) << ',' << detail::format_double(r.accuracy)
            << ',' << detail::format_double(r.mean_affinity) << ',' << detail::format_double(r.mean_diversity) << ','
            << detail::format_double(r.mean_bm25) << '\n';
    }
}

inline std::vector<selector_row> read_compare_csv(std::istream& in)
{
    std::string line;
    require(static_cast<bool>(std::getline(in, line)), errc::invalid_argument, "compare CSV is empty");
    std::vector<selector_row> rows;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        const auto c = detail::split_csv_line(line);
        require(c.size() == 6, errc::invalid_argument, "compare CSV row needs 6 cells");
        rows.push_back({c[1], detail::parse_double(c[2]), detail::parse_double(c[3]), detail::parse_double(c[4]),
                        detail::parse_double(c[5])});
    }
    return rows;
}

// ---------------------------------------------------------------------------
// Toy-model capture writer: produces the same files a real-model exporter
// would, so the capture path can be exercised without one.

inline capture_set capture_toy_prompts(const model& m, const task& t, const experiment_config& cfg, capture_mode mode,
                                       std::optional<head_id> fixed_head)
{
    detail::toy_context ctx(t, cfg);
    const auto n = detail::resolve_n_test(cfg.n_test, t.test.size());
    const auto candidates = t.candidate_tokens();
    const auto& mc = m.config();
    require(mode == capture_mode::head_search || fixed_head.has_value(), errc::invalid_argument,
            "fixed-head capture needs a head");

    capture_set cap;
    cap.mode = mode;
    cap.config = mc;
    if (mode == capture_mode::fixed_head) {
        cap.best_head = fixed_head;
        cap.heads.push_back({*fixed_head, "head.wq", "head.wk"});
        const auto hw = m.head_qk(fixed_head->layer, fixed_head->head);
        cap.store.add("head.wq", {hw.wq.rows, hw.wq.cols}, hw.wq.data);
        cap.store.add("head.wk", {hw.wk.rows, hw.wk.cols}, hw.wk.data);
    } else {
        for (int l = 0; l < mc.n_layers; ++l) {
            for (int h = 0; h < mc.n_heads; ++h) {
                const std::string p = "heads." + std::to_string(l) + "." + std::to_string(h);
                cap.heads.push_back({{l, h}, p + ".wq", p + ".wk"});
                const auto hw = m.head_qk(l, h);
                cap.store.add(p + ".wq", {hw.wq.rows, hw.wq.cols}, hw.wq.data);
                cap.store.add(p + ".wk", {hw.wk.rows, hw.wk.cols}, hw.wk.data);
            }
        }
    }

    for (std::size_t i = 0; i < n; ++i) {
        const auto demos = ctx.select_demos(i);
        const auto prompt = assemble(ctx.build_spec(i, demos), t.tok);
        capture_spec spec;
        spec.attn_rows = mode == capture_mode::head_search;
        if (mode == capture_mode::fixed_head) {
            spec.hidden_layers = {fixed_head->layer};
        } else {
            for (int l = 0; l < mc.n_layers; ++l) spec.hidden_layers.push_back(l);
        }
        const auto fwd = m.forward(prompt.tokens, spec);
        const auto seq = prompt.tokens.size();
        const std::string prefix = "p" + std::to_string(i);

        captured_prompt p;
        p.instance_id = t.test[i].id;
        p.seq_len = static_cast<int>(seq);
        p.layout = prompt_layout::of(prompt);
        p.query_label_id = t.test[i].ex.label_id;
        p.candidate_token_ids = candidates;
        p.baseline_scores = ctx.baseline_scores(i, demos);
        if (spec.attn_rows) {
            std::vector<float> flat;
            for (const auto& row : fwd.attn_rows) flat.insert(flat.end(), row.begin(), row.end());
            p.attn_rows_tensor = prefix + ".attn_rows";
            cap.store.add(*p.attn_rows_tensor, {static_cast<std::uint64_t>(mc.n_layers), static_cast<std::uint64_t>(mc.n_heads), seq},
                          flat);
        }
        for (const auto& [l, h] : fwd.post_norm_hidden) {
            const auto name = prefix + ".hidden." + std::to_string(l);
            cap.store.add(name, {h.rows, h.cols}, h.data);
            p.hidden_tensors[l] = name;
        }
        std::vector<float> cand;
        const auto last = fwd.logits.row(seq - 1);
        for (int c : candidates) cand.push_back(last[static_cast<std::size_t>(c)]);
        p.candidate_logits_tensor = prefix + ".candidate_logits";
        cap.store.add(p.candidate_logits_tensor, {cand.size()}, cand);
        cap.prompts.push_back(std::move(p));
    }
    return cap;
}

/// Prompt plan for an external exporter: one JSON object per instance with
/// the prompt text and the character ranges of every demonstration label.
inline std::vector<nlohmann::json> plan_prompts(const task& t, const experiment_config& cfg)
{
    detail::toy_context ctx(t, cfg);
    const auto n = detail::resolve_n_test(cfg.n_test, t.test.size());
    std::vector<nlohmann::json> out;
    for (std::size_t i = 0; i < n; ++i) {
        const auto demos = ctx.select_demos(i);
        const auto spec = ctx.build_spec(i, demos);
        const auto segs = prompt_segments(spec);
        std::string text;
        nlohmann::json label_chars = nlohmann::json::array();
        for (std::size_t s = 0; s < segs.size(); ++s) {
            if (s % 2 == 1) label_chars.push_back({text.size(), text.size() + segs[s].size()});
            text += segs[s];
        }
        nlohmann::json demo_ids = nlohmann::json::array();
        nlohmann::json demo_labels = nlohmann::json::array();
        for (int d : demos) {
            demo_ids.push_back(d < 0 ? t.test[i].id : t.pool[static_cast<std::size_t>(d)].id);
            demo_labels.push_back(d < 0 ? t.test[i].ex.label_id : t.pool[static_cast<std::size_t>(d)].ex.label_id);
        }
        out.push_back({{"instance_id", t.test[i].id},
                       {"text", text},
                       {"label_char_spans", label_chars},
                       {"demo_ids", demo_ids},
                       {"demo_label_ids", demo_labels},
                       {"query_label_id", t.test[i].ex.label_id},
                       {"labels", t.labels},
                       {"baseline_scores", ctx.baseline_scores(i, demos)}});
    }
    return out;
}

}  // namespace iclprobe
