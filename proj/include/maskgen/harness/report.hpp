#pragma once

#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "maskgen/harness/config.hpp"
#include "maskgen/metrics.hpp"

namespace maskgen::harness {

struct MetricRow {
    std::string metric;
    std::optional<double> threshold;
    long count = 0;
    std::optional<double> value;  // absent for empty groups

    friend bool operator==(const MetricRow&, const MetricRow&) = default;
};

/// JSON is the source of truth; CSV and the text table are renderings of the
/// same rows.
struct Report {
    std::string manifest;     // RunManifest hash
    std::string config_hash;
    std::string decode;
    std::vector<MetricRow> rows;

    friend bool operator==(const Report&, const Report&) = default;
};

/// Fixed 4 decimals, ties to even (std::to_chars rounds exactly).
std::string format_value(double v);

/// miou (mean per-pair IoU), ciou, then one mahd row per threshold.
std::vector<MetricRow> metric_rows(std::span<const EvalPair> pairs, const EvalConfig& eval);

/// {"manifest", "config_hash", "decode", "pairs", "miou", "ciou",
///  "mahd": {"<threshold>": {"count", "mean"}}}; absent values are null.
std::string render_json(const Report& report);
/// Header `metric,threshold,count,value`; empty cells for absent thresholds,
/// `NA` for absent values.
std::string render_csv(const Report& report);
std::string render_table(const Report& report);

Report parse_report_json(std::string_view text);
std::vector<MetricRow> parse_csv_rows(std::string_view text);

}  // namespace maskgen::harness
