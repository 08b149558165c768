#include "maskgen/harness/report.hpp"

#include <algorithm>
#include <charconv>
#include <iomanip>
#include <sstream>

#include <json.hpp>

#include "maskgen/error.hpp"

namespace maskgen::harness {

namespace {

std::string json_string(std::string_view s) { return nlohmann::json(std::string(s)).dump(); }

std::string number_or_null(const std::optional<double>& v) { return v ? format_value(*v) : "null"; }

double parse_number(std::string_view s) {
    double v = 0.0;
    const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc() || ptr != s.data() + s.size()) throw ValidationError("bad number '" + std::string(s) + "'");
    return v;
}

// Shortest decimal form, e.g. "0.5".
std::string threshold_key(double t) {
    char buf[64];
    const auto res = std::to_chars(buf, buf + sizeof(buf), t);
    return {buf, res.ptr};
}

}  // namespace

std::string format_value(double v) {
    char buf[64];
    const auto res = std::to_chars(buf, buf + sizeof(buf), v, std::chars_format::fixed, 4);
    std::string out(buf, res.ptr);
    if (out == "-0.0000") out = "0.0000";
    return out;
}

std::vector<MetricRow> metric_rows(std::span<const EvalPair> pairs, const EvalConfig& eval) {
    std::vector<MetricRow> rows;
    const auto n = static_cast<long>(pairs.size());
    double sum = 0.0;
    for (const auto& p : pairs) sum += p.iou;
    rows.push_back({"miou", std::nullopt, n, n > 0 ? std::optional(sum / static_cast<double>(n)) : std::nullopt});
    rows.push_back({"ciou", std::nullopt, n, n > 0 ? std::optional(c_iou(pairs)) : std::nullopt});
    const auto mahd = m_ahd(pairs, eval.thresholds, eval.mode);
    for (const auto& g : mahd.groups) rows.push_back({"mahd", g.threshold, static_cast<long>(g.count), g.mean_ahd});
    return rows;
}

std::string render_json(const Report& r) {
    std::ostringstream os;
    os << "{\n";
    os << "  \"manifest\": " << json_string(r.manifest) << ",\n";
    os << "  \"config_hash\": " << json_string(r.config_hash) << ",\n";
    os << "  \"decode\": " << json_string(r.decode) << ",\n";
    long pairs = 0;
    std::vector<const MetricRow*> groups;
    for (const auto& row : r.rows) {
        if (row.metric == "mahd") {
            if (!row.threshold) throw ValidationError("mahd row without a threshold");
            groups.push_back(&row);
        } else if (row.metric == "miou" || row.metric == "ciou") {
            pairs = row.count;
        } else {
            throw ValidationError("unknown metric row '" + row.metric + "'");
        }
    }
    os << "  \"pairs\": " << pairs << ",\n";
    for (const auto& row : r.rows) {
        if (row.metric != "mahd") os << "  " << json_string(row.metric) << ": " << number_or_null(row.value) << ",\n";
    }
    os << "  \"mahd\": {";
    for (std::size_t i = 0; i < groups.size(); ++i) {
        os << (i == 0 ? "\n" : ",\n");
        os << "    " << json_string(threshold_key(*groups[i]->threshold)) << ": {\"count\": " << groups[i]->count
           << ", \"mean\": " << number_or_null(groups[i]->value) << "}";
    }
    os << (groups.empty() ? "}\n" : "\n  }\n");
    os << "}\n";
    return os.str();
}

std::string render_csv(const Report& r) {
    std::ostringstream os;
    os << "metric,threshold,count,value\n";
    for (const auto& row : r.rows) {
        os << row.metric << ',' << (row.threshold ? format_value(*row.threshold) : "") << ',' << row.count << ','
           << (row.value ? format_value(*row.value) : "NA") << '\n';
    }
    return os.str();
}

std::string render_table(const Report& r) {
    std::ostringstream os;
    os << "decode " << r.decode << "  manifest " << r.manifest.substr(0, 12) << '\n';
    os << std::left << std::setw(8) << "metric" << std::setw(11) << "threshold" << std::setw(7) << "count"
       << "value\n";
    for (const auto& row : r.rows) {
        os << std::left << std::setw(8) << row.metric << std::setw(11)
           << (row.threshold ? format_value(*row.threshold) : "-") << std::setw(7) << row.count
           << (row.value ? format_value(*row.value) : "NA") << '\n';
    }
    return os.str();
}

Report parse_report_json(std::string_view text) {
    Report r;
    try {
        const auto j = nlohmann::json::parse(text);
        r.manifest = j.at("manifest").get<std::string>();
        r.config_hash = j.at("config_hash").get<std::string>();
        r.decode = j.at("decode").get<std::string>();
        const long pairs = j.at("pairs").get<long>();
        for (const char* name : {"miou", "ciou"}) {
            MetricRow row{name, std::nullopt, pairs, std::nullopt};
            if (!j.at(name).is_null()) row.value = j.at(name).get<double>();
            r.rows.push_back(std::move(row));
        }
        std::vector<MetricRow> groups;
        for (const auto& [key, g] : j.at("mahd").items()) {
            MetricRow row{"mahd", parse_number(key), g.at("count").get<long>(), std::nullopt};
            if (!g.at("mean").is_null()) row.value = g.at("mean").get<double>();
            groups.push_back(std::move(row));
        }
        std::sort(groups.begin(), groups.end(), [](const MetricRow& a, const MetricRow& b) { return *a.threshold < *b.threshold; });
        r.rows.insert(r.rows.end(), groups.begin(), groups.end());
    } catch (const nlohmann::json::exception& e) {
        throw ValidationError(std::string("malformed report: ") + e.what());
    }
    return r;
}

std::vector<MetricRow> parse_csv_rows(std::string_view text) {
    std::vector<MetricRow> rows;
    std::istringstream in{std::string(text)};
    std::string line;
    if (!std::getline(in, line) || line != "metric,threshold,count,value") {
        throw ValidationError("CSV header must be metric,threshold,count,value");
    }
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        std::vector<std::string> cells;
        std::size_t start = 0;
        for (;;) {
            const auto comma = line.find(',', start);
            cells.push_back(line.substr(start, comma - start));
            if (comma == std::string::npos) break;
            start = comma + 1;
        }
        if (cells.size() != 4) throw ValidationError("CSV row needs 4 cells: " + line);
        MetricRow row;
        row.metric = cells[0];
        if (!cells[1].empty()) row.threshold = parse_number(cells[1]);
        row.count = static_cast<long>(parse_number(cells[2]));
        if (cells[3] != "NA") row.value = parse_number(cells[3]);
        rows.push_back(std::move(row));
    }
    return rows;
}

}  // namespace maskgen::harness
