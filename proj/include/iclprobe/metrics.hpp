#pragma once

#include <charconv>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <istream>
#include <map>
#include <ostream>
#include <set>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "iclprobe/error.hpp"
#include "iclprobe/induction.hpp"

namespace iclprobe {

namespace detail {

inline double norm2(std::span<const double> v)
{
    double s = 0.0;
    for (double x : v) s += x * x;
    return std::sqrt(s);
}

}  // namespace detail

/// Mean cosine similarity between the query rep and each label rep.
inline double affinity(std::span<const double> query, std::span<const std::vector<double>> labels)
{
    require(!labels.empty(), errc::empty_input, "affinity needs at least one label representation");
    const double qn = detail::norm2(query);
    require(qn > 0.0, errc::zero_vector, "query representation has zero norm");
    double total = 0.0;
    for (std::size_t i = 0; i < labels.size(); ++i) {
        const auto& d = labels[i];
        require(d.size() == query.size(), errc::dimension_mismatch,
                "label representation " + std::to_string(i) + " has dimension " + std::to_string(d.size()));
        const double dn = detail::norm2(d);
        require(dn > 0.0, errc::zero_vector, "label representation " + std::to_string(i) + " has zero norm");
        double dot = 0.0;
        for (std::size_t j = 0; j < d.size(); ++j) dot += query[j] * d[j];
        total += std::clamp(dot / (qn * dn), -1.0, 1.0);
    }
    return total / static_cast<double>(labels.size());
}

enum class covariance_norm { population, sample };

/// (1/k) tr(Cov) of the label reps. Population covariance divides by k, so
/// this is (1/k^2) sum ||d_i - mean||^2 and k = 1 gives 0.
inline double diversity(std::span<const std::vector<double>> labels, covariance_norm norm = covariance_norm::population)
{
    require(!labels.empty(), errc::empty_input, "diversity needs at least one label representation");
    const auto k = labels.size();
    require(norm == covariance_norm::population || k >= 2, errc::invalid_argument,
            "sample covariance is undefined for a single representation");
    const auto dim = labels[0].size();
    std::vector<double> mean(dim, 0.0);
    for (const auto& d : labels) {
        require(d.size() == dim, errc::dimension_mismatch, "label representations differ in dimension");
        for (std::size_t j = 0; j < dim; ++j) mean[j] += d[j];
    }
    for (auto& m : mean) m /= static_cast<double>(k);
    double ss = 0.0;
    for (const auto& d : labels) {
        for (std::size_t j = 0; j < dim; ++j) ss += (d[j] - mean[j]) * (d[j] - mean[j]);
    }
    const double denom = norm == covariance_norm::population ? static_cast<double>(k) : static_cast<double>(k - 1);
    return ss / denom / static_cast<double>(k);
}

inline std::vector<std::vector<double>> rep_vectors(std::span<const subspace_rep> reps)
{
    std::vector<std::vector<double>> out;
    out.reserve(reps.size());
    for (const auto& r : reps) out.push_back(r.vector);
    return out;
}

inline double affinity(const subspace_rep& query, std::span<const subspace_rep> labels)
{
    return affinity(query.vector, rep_vectors(labels));
}

inline double diversity(std::span<const subspace_rep> labels, covariance_norm norm = covariance_norm::population)
{
    return diversity(rep_vectors(labels), norm);
}

struct metric_record {
    std::string instance_id;
    int k = 0;
    double affinity = 0.0;
    double diversity = 0.0;
    bool correct = false;
    std::map<std::string, double> baseline_scores;

    bool operator==(const metric_record&) const = default;
};

// ---------------------------------------------------------------------------
// CSV / JSONL serialization. Doubles are written in shortest round-trip form,
// so re-reading reproduces records exactly.

namespace detail {

inline std::string format_double(double v)
{
    if (std::isnan(v)) return "nan";
    char buf[64];
    auto [p, ec] = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, p);
}

inline double parse_double(std::string_view s)
{
    if (s == "nan") return std::numeric_limits<double>::quiet_NaN();
    double v = 0.0;
    auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    require(ec == std::errc() && p == s.data() + s.size(), errc::invalid_argument, "bad number '" + std::string(s) + "'");
    return v;
}

inline std::string csv_field(const std::string& s)
{
    if (s.find_first_of(",\"\n\r") == std::string::npos) return s;
    std::string out = "\"";
    for (char c : s) {
        if (c == '"') out += "\"\"";
        else out.push_back(c);
    }
    out += "\"";
    return out;
}

inline std::vector<std::string> split_csv_line(const std::string& line)
{
    std::vector<std::string> out;
    std::string cur;
    bool quoted = false;
    for (std::size_t i = 0; i < line.size(); ++i) {
        const char c = line[i];
        if (quoted) {
            if (c == '"' && i + 1 < line.size() && line[i + 1] == '"') {
                cur.push_back('"');
                ++i;
            } else if (c == '"') {
                quoted = false;
            } else {
                cur.push_back(c);
            }
        } else if (c == '"') {
            quoted = true;
        } else if (c == ',') {
            out.push_back(std::move(cur));
            cur.clear();
        } else {
            cur.push_back(c);
        }
    }
    out.push_back(std::move(cur));
    return out;
}

}  // namespace detail

inline std::vector<std::string> baseline_names(std::span<const metric_record> records)
{
    std::set<std::string> names;
    for (const auto& r : records) {
        for (const auto& [n, _] : r.baseline_scores) names.insert(n);
    }
    return {names.begin(), names.end()};
}

inline void write_records_csv(std::ostream& out, std::span<const metric_record> records)
{
    const auto names = baseline_names(records);
    out << "instance_id,k,affinity,diversity,correct";
    for (const auto& n : names) out << ',' << detail::csv_field(n);
    out << '\n';
    for (const auto& r : records) {
        out << detail::csv_field(r.instance_id) << ',' << r.k << ',' << detail::format_double(r.affinity) << ','
            << detail::format_double(r.diversity) << ',' << (r.correct ? 1 : 0);
        for (const auto& n : names) {
            out << ',';
            auto it = r.baseline_scores.find(n);
            if (it != r.baseline_scores.end()) out << detail::format_double(it->second);
        }
        out << '\n';
    }
}

inline std::vector<metric_record> read_records_csv(std::istream& in)
{
    std::string line;
    require(static_cast<bool>(std::getline(in, line)), errc::invalid_argument, "records CSV is empty");
    const auto header = detail::split_csv_line(line);
    const std::vector<std::string> fixed{"instance_id", "k", "affinity", "diversity", "correct"};
    require(header.size() >= fixed.size() && std::equal(fixed.begin(), fixed.end(), header.begin()),
            errc::invalid_argument, "records CSV header must start with " + fixed[0] + ",k,affinity,diversity,correct");
    std::vector<metric_record> out;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        const auto cells = detail::split_csv_line(line);
        require(cells.size() == header.size(), errc::invalid_argument, "CSV row has " + std::to_string(cells.size())
                                                                             + " cells, header has " + std::to_string(header.size()));
        metric_record r;
        r.instance_id = cells[0];
        r.k = std::stoi(cells[1]);
        r.affinity = detail::parse_double(cells[2]);
        r.diversity = detail::parse_double(cells[3]);
        require(cells[4] == "0" || cells[4] == "1", errc::invalid_argument, "correct must be 0 or 1");
        r.correct = cells[4] == "1";
        for (std::size_t c = fixed.size(); c < cells.size(); ++c) {
            if (!cells[c].empty()) r.baseline_scores[header[c]] = detail::parse_double(cells[c]);
        }
        out.push_back(std::move(r));
    }
    return out;
}

inline nlohmann::json to_json(const metric_record& r)
{
    return {{"instance_id", r.instance_id}, {"k", r.k},         {"affinity", r.affinity},
            {"diversity", r.diversity},     {"correct", r.correct}, {"baseline_scores", r.baseline_scores}};
}

inline metric_record record_from_json(const nlohmann::json& j)
{
    metric_record r;
    r.instance_id = j.at("instance_id").get<std::string>();
    r.k = j.at("k").get<int>();
    r.affinity = j.at("affinity").get<double>();
    r.diversity = j.at("diversity").get<double>();
    r.correct = j.at("correct").get<bool>();
    if (j.contains("baseline_scores")) r.baseline_scores = j["baseline_scores"].get<std::map<std::string, double>>();
    return r;
}

inline void write_records_jsonl(std::ostream& out, std::span<const metric_record> records)
{
    for (const auto& r : records) out << to_json(r).dump() << '\n';
}

inline std::vector<metric_record> read_records_jsonl(std::istream& in)
{
    std::vector<metric_record> out;
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        out.push_back(record_from_json(nlohmann::json::parse(line)));
    }
    return out;
}

inline std::vector<metric_record> load_records(const std::filesystem::path& path)
{
    std::ifstream in(path);
    require(static_cast<bool>(in), errc::io_failure, "cannot open '" + path.string() + "'");
    if (path.extension() == ".jsonl") return read_records_jsonl(in);
    return read_records_csv(in);
}

}  // namespace iclprobe
