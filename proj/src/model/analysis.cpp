#include "maskgen/model/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "maskgen/error.hpp"
#include "maskgen/image.hpp"
#include "maskgen/rng.hpp"

namespace maskgen::model {

AttentionMap attention_map(const Model<float>& model, const SequenceInput& input, int layer) {
    const int layers = model.config.layers;
    const int li = layer < 0 ? layers + layer : layer;
    if (li < 0 || li >= layers) {
        throw ValidationError("layer " + std::to_string(layer) + " out of range for " +
                              std::to_string(layers) + " layers");
    }
    ForwardOptions opt;
    opt.keep_cache = true;
    opt.logit_rows = 0;
    const auto res = forward(model, input, opt);
    const auto& layout = res.embedded.layout;
    if (layout.mask.length != model.config.mask_length()) {
        throw ValidationError("attention map needs a full mask span");
    }
    AttentionMap map;
    map.layout = layout;
    map.layer = li;
    const int n = layout.mask.length;
    map.weights = Mat<double>::Zero(n, layout.total_len);
    const auto& probs = res.layers[static_cast<std::size_t>(li)].probs;
    for (const auto& p : probs) map.weights += p.middleRows(layout.bom_pos, n).cast<double>();
    map.weights /= static_cast<double>(probs.size());
    return map;
}

std::vector<std::uint8_t> attention_heatmap(const AttentionMap& map) {
    const auto& w = map.weights;
    std::vector<double> logw(static_cast<std::size_t>(w.size()));
    double lo = std::numeric_limits<double>::infinity(), hi = -lo;
    for (Eigen::Index i = 0; i < w.size(); ++i) {
        const double v = std::log(w.data()[i] + kHeatmapEpsilon);
        logw[static_cast<std::size_t>(i)] = v;
        lo = std::min(lo, v);
        hi = std::max(hi, v);
    }
    std::vector<std::uint8_t> out(logw.size(), 0);
    if (hi > lo) {
        for (std::size_t i = 0; i < logw.size(); ++i) {
            out[i] = static_cast<std::uint8_t>(std::lround(255.0 * (logw[i] - lo) / (hi - lo)));
        }
    }
    return out;
}

void write_attention_heatmap(const std::filesystem::path& path, const AttentionMap& map,
                             const std::string& comment) {
    write_pgm_gray(path, static_cast<int>(map.weights.rows()), static_cast<int>(map.weights.cols()),
                   attention_heatmap(map), comment);
}

ProbeResult column_alignment_probe(std::span<const AttentionMap> maps, int grid_rows, int grid_cols,
                                   const ProbeOptions& options) {
    if (options.top < 1 || options.permutations < 1) throw ValidationError("probe options out of range");
    const int n = grid_rows * grid_cols;
    // Per query: whether each earlier mask-token key is in the row's top set.
    std::vector<std::vector<char>> hits;
    std::vector<std::size_t> aligned_index;
    ProbeResult r;
    double baseline_sum = 0.0;
    for (const auto& map : maps) {
        if (map.layout.mask.length != n || map.weights.rows() != n) {
            throw ValidationError("attention map does not match a " + std::to_string(grid_rows) + "x" +
                                  std::to_string(grid_cols) + " grid");
        }
        const int bom = map.layout.bom_pos;
        for (int t = grid_cols; t < n; ++t) {
            const auto row = map.weights.row(t);
            const int q = bom + t;
            const auto in_top = [&](int key) {
                int greater = 0;
                for (int c = 0; c <= q; ++c) greater += row(c) > row(key) ? 1 : 0;
                return greater < options.top;
            };
            std::vector<char> h(static_cast<std::size_t>(t));
            double row_hits = 0.0;
            for (int m = 0; m < t; ++m) {
                h[static_cast<std::size_t>(m)] = in_top(bom + 1 + m) ? 1 : 0;
                row_hits += h[static_cast<std::size_t>(m)];
            }
            const auto aligned = static_cast<std::size_t>(t - grid_cols);
            r.aligned_hits += h[aligned];
            baseline_sum += row_hits / t;
            hits.push_back(std::move(h));
            aligned_index.push_back(aligned);
            ++r.queries;
        }
    }
    if (r.queries == 0) throw ValidationError("probe needs at least one query with a row above it");
    r.aligned_rate = static_cast<double>(r.aligned_hits) / static_cast<double>(r.queries);
    r.baseline_rate = baseline_sum / static_cast<double>(r.queries);

    Rng rng(derive_seed(options.seed, "attn/probe"));
    long at_least = 0;
    for (int p = 0; p < options.permutations; ++p) {
        long count = 0;
        for (const auto& h : hits) count += h[static_cast<std::size_t>(rng.below(h.size()))];
        at_least += count >= r.aligned_hits ? 1 : 0;
    }
    r.p_value = static_cast<double>(1 + at_least) / static_cast<double>(1 + options.permutations);
    return r;
}

double relative_error(double analytic, double numeric) {
    const double scale = std::max(std::abs(analytic), std::abs(numeric));
    if (scale < 1e-8) return 0.0;
    return std::abs(analytic - numeric) / scale;
}

GradCheckResult grad_check(const std::function<double(std::span<const double>)>& loss,
                           std::span<const double> params, std::span<const double> analytic,
                           int count, std::uint64_t seed, double step) {
    if (params.size() != analytic.size() || params.empty()) {
        throw ValidationError("parameter and gradient sizes differ");
    }
    Rng rng(derive_seed(seed, "gradcheck"));
    std::vector<double> work(params.begin(), params.end());
    GradCheckResult r;
    for (int c = 0; c < count; ++c) {
        const auto i = static_cast<std::size_t>(rng.below(params.size()));
        work[i] = params[i] + step;
        const double up = loss(work);
        work[i] = params[i] - step;
        const double down = loss(work);
        work[i] = params[i];
        const double err = relative_error(analytic[i], (up - down) / (2.0 * step));
        if (err > r.max_rel_error || r.checked == 0) {
            r.max_rel_error = std::max(r.max_rel_error, err);
            r.worst = "[" + std::to_string(i) + "]";
        }
        ++r.checked;
    }
    return r;
}

GradCheckResult grad_check(const Model<double>& model, std::span<const SequenceInput> batch,
                           int count, std::uint64_t seed, double step) {
    if (batch.empty()) throw ValidationError("grad check needs a nonempty batch");
    const auto batch_loss = [&](const Model<double>& m) {
        double sum = 0.0;
        for (const auto& s : batch) {
            const auto res = forward(m, s);
            sum += mask_loss<double>(res.logits, res.embedded.layout, s.mask);
        }
        return sum / static_cast<double>(batch.size());
    };
    auto grads = model.params.zeros_like();
    for (const auto& s : batch) loss_and_grad(model, s, grads);
    const double inv = 1.0 / static_cast<double>(batch.size());

    std::vector<std::string> names;
    std::vector<const Mat<double>*> analytic;
    grads.visit([&](std::string_view n, const Mat<double>& g) {
        names.emplace_back(n);
        analytic.push_back(&g);
    });
    Model<double> work = model;
    std::vector<Mat<double>*> tensors;
    work.params.visit([&](std::string_view, Mat<double>& m) { tensors.push_back(&m); });

    Rng rng(derive_seed(seed, "gradcheck"));
    GradCheckResult r;
    for (int c = 0; c < count; ++c) {
        const auto t = static_cast<std::size_t>(rng.below(tensors.size()));
        const auto i = static_cast<Eigen::Index>(rng.below(static_cast<std::uint64_t>(tensors[t]->size())));
        double& p = tensors[t]->data()[i];
        const double orig = p;
        p = orig + step;
        const double up = batch_loss(work);
        p = orig - step;
        const double down = batch_loss(work);
        p = orig;
        const double err = relative_error(analytic[t]->data()[i] * inv, (up - down) / (2.0 * step));
        if (err > r.max_rel_error || r.checked == 0) {
            r.max_rel_error = std::max(r.max_rel_error, err);
            r.worst = names[t] + "[" + std::to_string(i) + "]";
        }
        ++r.checked;
    }
    return r;
}

}  // namespace maskgen::model
