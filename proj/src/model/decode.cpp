#include "maskgen/model/decode.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "maskgen/error.hpp"
#include "maskgen/rng.hpp"

namespace maskgen::model {

namespace {

std::vector<double> restricted_logits(const DecodeState<float>& st, int mask_size) {
    std::vector<double> out(static_cast<std::size_t>(mask_size));
    for (int i = 0; i < mask_size; ++i) out[static_cast<std::size_t>(i)] = st.last_logits[i];
    return out;
}

// Ids sorted by logit descending, ties by id ascending.
std::vector<std::int32_t> ranked(std::span<const double> logits) {
    std::vector<std::int32_t> ids(logits.size());
    std::iota(ids.begin(), ids.end(), 0);
    std::stable_sort(ids.begin(), ids.end(), [&](std::int32_t a, std::int32_t b) {
        return logits[static_cast<std::size_t>(a)] > logits[static_cast<std::size_t>(b)];
    });
    return ids;
}

Candidates softmax_over(std::span<const double> logits, std::vector<std::int32_t> ids,
                        double temperature) {
    Candidates c;
    if (temperature <= 0.0) {
        c.ids = {ids.front()};
        c.probs = {1.0};
        return c;
    }
    const double mx = logits[static_cast<std::size_t>(ids.front())];
    double sum = 0.0;
    for (auto id : ids) {
        const double e = std::exp((logits[static_cast<std::size_t>(id)] - mx) / temperature);
        c.probs.push_back(e);
        sum += e;
    }
    for (auto& p : c.probs) p /= sum;
    c.ids = std::move(ids);
    return c;
}

std::int32_t draw(const Candidates& c, Rng& rng) {
    const double u = rng.uniform();
    double run = 0.0;
    for (std::size_t i = 0; i < c.ids.size(); ++i) {
        run += c.probs[i];
        if (u < run) return c.ids[i];
    }
    return c.ids.back();
}

std::vector<double> log_softmax(std::span<const double> logits) {
    const double mx = *std::max_element(logits.begin(), logits.end());
    double sum = 0.0;
    for (double v : logits) sum += std::exp(v - mx);
    const double lse = mx + std::log(sum);
    std::vector<double> out(logits.size());
    for (std::size_t i = 0; i < logits.size(); ++i) out[i] = logits[i] - lse;
    return out;
}

struct Beam {
    std::vector<std::int32_t> tokens;
    double score = 0.0;
    DecodeState<float> state;
};

bool better(double sa, const std::vector<std::int32_t>& ta, double sb, const std::vector<std::int32_t>& tb) {
    if (sa != sb) return sa > sb;
    return std::lexicographical_compare(ta.begin(), ta.end(), tb.begin(), tb.end());
}

std::vector<std::int32_t> beam_search(const Model<float>& model, const SequenceInput& prefix, int width) {
    const int n = model.config.mask_length();
    const int k = model.vocab.mask_size;
    std::vector<Beam> beams;
    beams.push_back({{}, 0.0, prefill(model, prefix, n)});
    for (int step = 0; step < n; ++step) {
        struct Cand {
            double score;
            std::size_t beam;
            std::int32_t token;
            std::vector<std::int32_t> seq;
        };
        std::vector<Cand> cands;
        for (std::size_t b = 0; b < beams.size(); ++b) {
            const auto lp = log_softmax(restricted_logits(beams[b].state, k));
            // Only the top `width` tokens of a beam can survive the global cut.
            const auto order = ranked(lp);
            for (int i = 0; i < std::min(width, k); ++i) {
                const auto tok = order[static_cast<std::size_t>(i)];
                auto seq = beams[b].tokens;
                seq.push_back(tok);
                cands.push_back({beams[b].score + lp[static_cast<std::size_t>(tok)], b, tok, std::move(seq)});
            }
        }
        std::sort(cands.begin(), cands.end(),
                  [](const Cand& a, const Cand& b) { return better(a.score, a.seq, b.score, b.seq); });
        cands.resize(std::min<std::size_t>(cands.size(), static_cast<std::size_t>(width)));
        std::vector<Beam> next;
        for (auto& c : cands) {
            Beam nb{std::move(c.seq), c.score, beams[c.beam].state};
            if (step + 1 < n) decode_step(model, nb.state, c.token);
            next.push_back(std::move(nb));
        }
        beams = std::move(next);
    }
    // Beams are kept sorted best-first.
    return beams.front().tokens;
}

}  // namespace

DecodeStrategy DecodeStrategy::parse(std::string_view spec) {
    DecodeStrategy s;
    const auto colon = spec.find(':');
    const auto name = spec.substr(0, colon);
    const std::string arg = colon == std::string_view::npos ? "" : std::string(spec.substr(colon + 1));
    try {
        if (name == "greedy") {
            s.kind = DecodeKind::greedy;
        } else if (name == "beam") {
            s.kind = DecodeKind::beam;
            if (!arg.empty()) s.beam_width = std::stoi(arg);
        } else if (name == "topk") {
            s.kind = DecodeKind::top_k;
            if (!arg.empty()) s.top_k = std::stoi(arg);
        } else if (name == "topp") {
            s.kind = DecodeKind::top_p;
            if (!arg.empty()) s.top_p = std::stod(arg);
        } else if (name == "random") {
            s.kind = DecodeKind::random;
        } else {
            throw ValidationError("unknown decode strategy '" + std::string(spec) + "'");
        }
    } catch (const std::logic_error& e) {
        if (dynamic_cast<const ValidationError*>(&e)) throw;
        throw ValidationError("bad decode argument in '" + std::string(spec) + "'");
    }
    if (s.beam_width < 1 || s.top_k < 1 || !(s.top_p >= 0.0 && s.top_p <= 1.0)) {
        throw ValidationError("decode parameters out of range in '" + std::string(spec) + "'");
    }
    return s;
}

std::string DecodeStrategy::to_string() const {
    switch (kind) {
        case DecodeKind::greedy: return "greedy";
        case DecodeKind::beam: return "beam:" + std::to_string(beam_width);
        case DecodeKind::top_k: return "topk:" + std::to_string(top_k);
        case DecodeKind::top_p: {
            std::string v = std::to_string(top_p);
            while (v.size() > 1 && v.back() == '0') v.pop_back();
            if (v.back() == '.') v.pop_back();
            return "topp:" + v;
        }
        case DecodeKind::random: return "random";
    }
    return "greedy";
}

std::int32_t argmax_lowest(std::span<const double> logits) {
    std::int32_t best = 0;
    for (std::size_t i = 1; i < logits.size(); ++i) {
        if (logits[i] > logits[static_cast<std::size_t>(best)]) best = static_cast<std::int32_t>(i);
    }
    return best;
}

Candidates top_k_candidates(std::span<const double> logits, int k, double temperature) {
    auto ids = ranked(logits);
    ids.resize(std::min<std::size_t>(ids.size(), static_cast<std::size_t>(std::max(k, 1))));
    return softmax_over(logits, std::move(ids), temperature);
}

Candidates top_p_candidates(std::span<const double> logits, double p, double temperature) {
    const auto full = softmax_over(logits, ranked(logits), temperature);
    std::vector<std::int32_t> keep;
    double cum = 0.0;
    for (std::size_t i = 0; i < full.ids.size(); ++i) {
        keep.push_back(full.ids[i]);
        cum += full.probs[i];
        if (cum >= p) break;
    }
    return softmax_over(logits, std::move(keep), temperature);
}

Candidates full_candidates(std::span<const double> logits, double temperature) {
    return softmax_over(logits, ranked(logits), temperature);
}

std::vector<std::int32_t> generate(const Model<float>& model, const SequenceInput& prefix,
                                   const DecodeStrategy& strategy) {
    if (!prefix.mask.empty()) throw ValidationError("decoding prefix must end at <BOM>");
    const int n = model.config.mask_length();
    if (strategy.kind == DecodeKind::beam) return beam_search(model, prefix, strategy.beam_width);

    Rng rng(derive_seed(strategy.seed, "decode"));
    auto state = prefill(model, prefix, n);
    std::vector<std::int32_t> out;
    out.reserve(static_cast<std::size_t>(n));
    for (int step = 0; step < n; ++step) {
        const auto logits = restricted_logits(state, model.vocab.mask_size);
        std::int32_t tok = 0;
        switch (strategy.kind) {
            case DecodeKind::greedy:
                tok = argmax_lowest(logits);
                break;
            case DecodeKind::top_k:
                tok = draw(top_k_candidates(logits, strategy.top_k, strategy.temperature), rng);
                break;
            case DecodeKind::top_p:
                tok = draw(top_p_candidates(logits, strategy.top_p, strategy.temperature), rng);
                break;
            case DecodeKind::random:
                tok = draw(full_candidates(logits, strategy.temperature), rng);
                break;
            case DecodeKind::beam:
                break;
        }
        out.push_back(tok);
        if (step + 1 < n) decode_step(model, state, tok);
    }
    return out;
}

}  // namespace maskgen::model
