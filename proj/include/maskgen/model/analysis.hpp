#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "maskgen/model/transformer.hpp"

namespace maskgen::model {

/// Head-averaged post-softmax attention of one layer, restricted to the rows
/// of mask-token queries (the <BOM> row and every mask position except the
/// last, i.e. the rows that predict mask tokens). Columns span the whole
/// sequence.
struct AttentionMap {
    Mat<double> weights;  // mask_length x total_len
    SequenceLayout layout;
    int layer = 0;
};

/// `input` must carry a full mask span. `layer` < 0 counts from the end.
AttentionMap attention_map(const Model<float>& model, const SequenceInput& input, int layer = -1);

inline constexpr double kHeatmapEpsilon = 1e-8;

/// ln(w + 1e-8), min-max scaled to [0, 255], one byte per weight.
std::vector<std::uint8_t> attention_heatmap(const AttentionMap& map);
void write_attention_heatmap(const std::filesystem::path& path, const AttentionMap& map,
                             const std::string& comment = {});

/// Column-alignment probe: for mask query (i, j) with i >= 1, is the key
/// holding token (i-1, j) among the `top` largest weights of the row?
struct ProbeOptions {
    int top = 4;
    int permutations = 10000;
    std::uint64_t seed = 0;
};

struct ProbeResult {
    long queries = 0;
    long aligned_hits = 0;
    double aligned_rate = 0.0;
    /// Expected hit rate of a uniformly drawn earlier mask-token key.
    double baseline_rate = 0.0;
    /// Monte Carlo p-value: share of shuffled-key draws whose hit rate is at
    /// least the aligned rate, as (1 + count) / (1 + permutations).
    double p_value = 1.0;
};

ProbeResult column_alignment_probe(std::span<const AttentionMap> maps, int grid_rows, int grid_cols,
                                   const ProbeOptions& options = {});

/// Central-difference check of an analytic gradient.
struct GradCheckResult {
    double max_rel_error = 0.0;
    int checked = 0;
    std::string worst;  // "tensor[index]" of the largest error
};

/// |a - n| / max(|a|, |n|), or 0 when both are below 1e-8.
double relative_error(double analytic, double numeric);

/// Generic form over a flat parameter vector. `loss` is evaluated at
/// perturbed copies of `params`.
GradCheckResult grad_check(const std::function<double(std::span<const double>)>& loss,
                           std::span<const double> params, std::span<const double> analytic,
                           int count, std::uint64_t seed, double step = 1e-5);

/// Mean mask loss over `batch`, checked on `count` parameters drawn by first
/// picking a tensor uniformly, then an entry uniformly within it.
GradCheckResult grad_check(const Model<double>& model, std::span<const SequenceInput> batch,
                           int count, std::uint64_t seed, double step = 1e-5);

}  // namespace maskgen::model
