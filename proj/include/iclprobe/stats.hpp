#pragma once

// Evaluation statistics: sorting instances into fixed-size bins, Spearman
// rank correlation, Laplacian-kernel ridge regression with R^2, correlation
// matrices, and a 2-D logistic decision boundary over (affinity, diversity).

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "iclprobe/error.hpp"
#include "iclprobe/metrics.hpp"

namespace iclprobe {

enum class metric_kind { affinity, diversity };

inline std::string to_string(metric_kind m) { return m == metric_kind::affinity ? "affinity" : "diversity"; }

inline double metric_value(const metric_record& r, metric_kind m)
{
    return m == metric_kind::affinity ? r.affinity : r.diversity;
}

struct bin_summary {
    double mean_metric = 0.0;
    double mean_accuracy = 0.0;
    int size = 0;
    double mean_affinity = 0.0;
    double mean_diversity = 0.0;
};

enum class trailing_bin { drop, merge };

/// Sorts ascending by the metric (ties by instance_id) and chunks into bins
/// of `bin_size`. A trailing partial bin is dropped, or folded into the last
/// full bin under trailing_bin::merge.
inline std::vector<bin_summary> bin_records(std::span<const metric_record> records, metric_kind metric, int bin_size = 30,
                                            trailing_bin trailing = trailing_bin::drop)
{
    require(bin_size >= 1, errc::invalid_argument, "bin_size must be positive");
    require(records.size() >= static_cast<std::size_t>(bin_size), errc::invalid_argument,
            std::to_string(records.size()) + " records cannot fill one bin of " + std::to_string(bin_size));
    std::vector<const metric_record*> order;
    order.reserve(records.size());
    for (const auto& r : records) order.push_back(&r);
    std::sort(order.begin(), order.end(), [metric](const metric_record* a, const metric_record* b) {
        const double va = metric_value(*a, metric);
        const double vb = metric_value(*b, metric);
        return va != vb ? va < vb : a->instance_id < b->instance_id;
    });

    const auto bs = static_cast<std::size_t>(bin_size);
    const auto n_full = order.size() / bs;
    std::vector<bin_summary> bins;
    for (std::size_t b = 0; b < n_full; ++b) {
        const auto begin = b * bs;
        auto end = begin + bs;
        if (trailing == trailing_bin::merge && b + 1 == n_full) end = order.size();
        bin_summary s;
        s.size = static_cast<int>(end - begin);
        for (auto i = begin; i < end; ++i) {
            s.mean_metric += metric_value(*order[i], metric);
            s.mean_accuracy += order[i]->correct ? 1.0 : 0.0;
            s.mean_affinity += order[i]->affinity;
            s.mean_diversity += order[i]->diversity;
        }
        s.mean_metric /= s.size;
        s.mean_accuracy /= s.size;
        s.mean_affinity /= s.size;
        s.mean_diversity /= s.size;
        bins.push_back(s);
    }
    return bins;
}

/// Ranks with ties sharing their average rank (1-based).
inline std::vector<double> average_ranks(std::span<const double> xs)
{
    std::vector<std::size_t> idx(xs.size());
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return xs[a] < xs[b]; });
    std::vector<double> ranks(xs.size());
    std::size_t i = 0;
    while (i < idx.size()) {
        std::size_t j = i;
        while (j + 1 < idx.size() && xs[idx[j + 1]] == xs[idx[i]]) ++j;
        const double r = (static_cast<double>(i) + static_cast<double>(j)) / 2.0 + 1.0;
        for (auto t = i; t <= j; ++t) ranks[idx[t]] = r;
        i = j + 1;
    }
    return ranks;
}

inline double pearson(std::span<const double> xs, std::span<const double> ys)
{
    require(xs.size() == ys.size(), errc::length_mismatch,
            "sequences of length " + std::to_string(xs.size()) + " and " + std::to_string(ys.size()));
    require(xs.size() >= 2, errc::invalid_argument, "correlation needs at least two points");
    const double n = static_cast<double>(xs.size());
    const double mx = std::accumulate(xs.begin(), xs.end(), 0.0) / n;
    const double my = std::accumulate(ys.begin(), ys.end(), 0.0) / n;
    double sxy = 0.0, sxx = 0.0, syy = 0.0;
    for (std::size_t i = 0; i < xs.size(); ++i) {
        sxy += (xs[i] - mx) * (ys[i] - my);
        sxx += (xs[i] - mx) * (xs[i] - mx);
        syy += (ys[i] - my) * (ys[i] - my);
    }
    require(sxx > 0.0 && syy > 0.0, errc::constant_input, "correlation is undefined for a constant sequence");
    return std::clamp(sxy / std::sqrt(sxx * syy), -1.0, 1.0);
}

inline double spearman(std::span<const double> xs, std::span<const double> ys)
{
    require(xs.size() == ys.size(), errc::length_mismatch,
            "sequences of length " + std::to_string(xs.size()) + " and " + std::to_string(ys.size()));
    const auto rx = average_ranks(xs);
    const auto ry = average_ranks(ys);
    return pearson(rx, ry);
}

struct kernel_ridge_model {
    std::vector<double> train_x;
    std::vector<double> dual_coefs;
    double gamma = 1.0;
    double alpha = 1.0;
};

inline double laplacian_kernel(double a, double b, double gamma) { return std::exp(-gamma * std::abs(a - b)); }

/// 1 / median |x_i - x_j| over pairs; 1.0 when that median is zero.
inline double median_gamma(std::span<const double> xs)
{
    std::vector<double> d;
    for (std::size_t i = 0; i < xs.size(); ++i) {
        for (std::size_t j = i + 1; j < xs.size(); ++j) d.push_back(std::abs(xs[i] - xs[j]));
    }
    if (d.empty()) return 1.0;
    std::sort(d.begin(), d.end());
    const auto m = d.size() % 2 == 1 ? d[d.size() / 2] : 0.5 * (d[d.size() / 2 - 1] + d[d.size() / 2]);
    return m > 0.0 ? 1.0 / m : 1.0;
}

namespace detail {

/// Solves A x = b for symmetric positive definite A (row-major, n x n) by
/// Cholesky. Throws singular_system when a pivot collapses.
inline std::vector<double> cholesky_solve(std::vector<double> a, std::vector<double> b, std::size_t n)
{
    double max_diag = 0.0;
    for (std::size_t i = 0; i < n; ++i) max_diag = std::max(max_diag, std::abs(a[i * n + i]));
    const double tol = 1e-13 * std::max(max_diag, 1.0);
    for (std::size_t j = 0; j < n; ++j) {
        double d = a[j * n + j];
        for (std::size_t k = 0; k < j; ++k) d -= a[j * n + k] * a[j * n + k];
        if (!(d > tol)) {
            fail(errc::singular_system, "kernel system is not positive definite at row " + std::to_string(j));
        }
        const double l = std::sqrt(d);
        a[j * n + j] = l;
        for (std::size_t i = j + 1; i < n; ++i) {
            double s = a[i * n + j];
            for (std::size_t k = 0; k < j; ++k) s -= a[i * n + k] * a[j * n + k];
            a[i * n + j] = s / l;
        }
    }
    for (std::size_t i = 0; i < n; ++i) {
        double s = b[i];
        for (std::size_t k = 0; k < i; ++k) s -= a[i * n + k] * b[k];
        b[i] = s / a[i * n + i];
    }
    for (std::size_t ii = n; ii-- > 0;) {
        double s = b[ii];
        for (std::size_t k = ii + 1; k < n; ++k) s -= a[k * n + ii] * b[k];
        b[ii] = s / a[ii * n + ii];
    }
    return b;
}

}  // namespace detail

/// Dual ridge fit: solves (K + alpha I) c = y with K_ij = exp(-gamma |x_i - x_j|).
/// The Laplacian kernel is positive definite on distinct points, so the
/// system is solved by Cholesky.
inline kernel_ridge_model krr_fit(std::span<const double> xs, std::span<const double> ys, double gamma, double alpha)
{
    require(xs.size() == ys.size(), errc::length_mismatch, "x and y differ in length");
    require(xs.size() >= 2, errc::invalid_argument, "kernel ridge needs at least two points");
    require(gamma > 0.0, errc::invalid_argument, "gamma must be positive");
    require(alpha >= 0.0, errc::invalid_argument, "alpha must be non-negative");
    const auto n = xs.size();
    if (alpha == 0.0) {
        std::vector<double> sorted(xs.begin(), xs.end());
        std::sort(sorted.begin(), sorted.end());
        require(std::adjacent_find(sorted.begin(), sorted.end()) == sorted.end(), errc::singular_system,
                "duplicate x values with alpha = 0");
    }
    std::vector<double> a(n * n);
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < n; ++j) a[i * n + j] = laplacian_kernel(xs[i], xs[j], gamma);
        a[i * n + i] += alpha;
    }
    kernel_ridge_model m;
    m.train_x.assign(xs.begin(), xs.end());
    m.dual_coefs = detail::cholesky_solve(std::move(a), std::vector<double>(ys.begin(), ys.end()), n);
    m.gamma = gamma;
    m.alpha = alpha;
    return m;
}

inline double krr_predict(const kernel_ridge_model& m, double x)
{
    double s = 0.0;
    for (std::size_t i = 0; i < m.train_x.size(); ++i) s += m.dual_coefs[i] * laplacian_kernel(x, m.train_x[i], m.gamma);
    return s;
}

inline double r2_score(std::span<const double> y_true, std::span<const double> y_pred)
{
    require(y_true.size() == y_pred.size(), errc::length_mismatch, "y_true and y_pred differ in length");
    require(y_true.size() >= 2, errc::invalid_argument, "R^2 needs at least two points");
    const double mean = std::accumulate(y_true.begin(), y_true.end(), 0.0) / static_cast<double>(y_true.size());
    double ss_res = 0.0, ss_tot = 0.0;
    for (std::size_t i = 0; i < y_true.size(); ++i) {
        ss_res += (y_true[i] - y_pred[i]) * (y_true[i] - y_pred[i]);
        ss_tot += (y_true[i] - mean) * (y_true[i] - mean);
    }
    require(ss_tot > 0.0, errc::constant_input, "R^2 is undefined for constant y_true");
    return 1.0 - ss_res / ss_tot;
}

struct correlation_table {
    std::vector<std::string> names;
    std::vector<std::vector<double>> values;  // NaN where a column is constant
};

/// Pairwise Spearman coefficients. Unit diagonal; pairs involving a constant
/// column are NaN.
inline correlation_table correlation_matrix(const std::map<std::string, std::vector<double>>& columns)
{
    correlation_table t;
    std::size_t len = 0;
    for (const auto& [name, col] : columns) {
        if (t.names.empty()) len = col.size();
        require(col.size() == len, errc::length_mismatch, "column '" + name + "' has length " + std::to_string(col.size())
                                                               + ", expected " + std::to_string(len));
        t.names.push_back(name);
    }
    const auto n = t.names.size();
    t.values.assign(n, std::vector<double>(n, std::numeric_limits<double>::quiet_NaN()));
    for (std::size_t i = 0; i < n; ++i) {
        t.values[i][i] = 1.0;
        for (std::size_t j = i + 1; j < n; ++j) {
            try {
                const double r = spearman(columns.at(t.names[i]), columns.at(t.names[j]));
                t.values[i][j] = r;
                t.values[j][i] = r;
            } catch (const error& e) {
                if (e.code() != errc::constant_input && e.code() != errc::invalid_argument) throw;
            }
        }
    }
    return t;
}

struct decision_boundary {
    double w_affinity = 0.0;
    double w_diversity = 0.0;
    double bias = 0.0;
    double threshold = 0.0;
    double train_accuracy = 0.0;

    // positive class: w_aff * aff + w_div * div + bias > 0
    bool predict(double aff, double div) const { return w_affinity * aff + w_diversity * div + bias > 0.0; }
};

/// Logistic regression by full-batch gradient descent on standardized
/// features, separating points whose accuracy exceeds `threshold`. Weights
/// are reported in the original feature units.
inline decision_boundary fit_boundary(std::span<const double> aff, std::span<const double> div, std::span<const double> acc,
                                      double threshold, int iterations = 5000, double learning_rate = 0.5)
{
    require(aff.size() == div.size() && aff.size() == acc.size(), errc::length_mismatch,
            "affinity, diversity and accuracy differ in length");
    const auto n = aff.size();
    std::vector<double> label(n);
    std::size_t positives = 0;
    for (std::size_t i = 0; i < n; ++i) {
        label[i] = acc[i] > threshold ? 1.0 : 0.0;
        positives += acc[i] > threshold ? 1 : 0;
    }
    require(positives > 0 && positives < n, errc::single_class,
            "all points fall on one side of accuracy threshold " + std::to_string(threshold));

    auto standardize = [n](std::span<const double> v) {
        const double mean = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(n);
        double var = 0.0;
        for (double x : v) var += (x - mean) * (x - mean);
        const double sd = std::sqrt(var / static_cast<double>(n));
        return std::pair{mean, sd > 0.0 ? sd : 1.0};
    };
    const auto [ma, sa] = standardize(aff);
    const auto [md, sd] = standardize(div);

    double wa = 0.0, wd = 0.0, b = 0.0;
    for (int it = 0; it < iterations; ++it) {
        double ga = 0.0, gd = 0.0, gb = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            const double za = (aff[i] - ma) / sa;
            const double zd = (div[i] - md) / sd;
            const double p = 1.0 / (1.0 + std::exp(-(wa * za + wd * zd + b)));
            const double r = p - label[i];
            ga += r * za;
            gd += r * zd;
            gb += r;
        }
        wa -= learning_rate * ga / static_cast<double>(n);
        wd -= learning_rate * gd / static_cast<double>(n);
        b -= learning_rate * gb / static_cast<double>(n);
    }

    decision_boundary out;
    out.w_affinity = wa / sa;
    out.w_diversity = wd / sd;
    out.bias = b - wa * ma / sa - wd * md / sd;
    out.threshold = threshold;
    std::size_t hits = 0;
    for (std::size_t i = 0; i < n; ++i) hits += (out.predict(aff[i], div[i]) == (label[i] > 0.5)) ? 1 : 0;
    out.train_accuracy = static_cast<double>(hits) / static_cast<double>(n);
    return out;
}

inline double median(std::vector<double> v)
{
    require(!v.empty(), errc::empty_input, "median of nothing");
    std::sort(v.begin(), v.end());
    return v.size() % 2 == 1 ? v[v.size() / 2] : 0.5 * (v[v.size() / 2 - 1] + v[v.size() / 2]);
}

}  // namespace iclprobe
