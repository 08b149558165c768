#include <doctest.h>

#include <cmath>
#include <map>

#include "maskgen/error.hpp"
#include "maskgen/model/decode.hpp"
#include "maskgen/rng.hpp"

using namespace maskgen;
using namespace maskgen::model;

namespace {

ModelConfig small_config() {
    ModelConfig c;
    c.layers = 2;
    c.hidden = 16;
    c.heads = 2;
    c.image_patch_dim = 12;
    c.grid_rows = 3;
    c.grid_cols = 3;
    c.init_std = 0.5;
    c.seed = 21;
    return c;
}

const Vocabulary kVocab{10, 5};

SequenceInput random_prefix(Rng& rng, const ModelConfig& c) {
    SequenceInput in;
    in.text = {kVocab.text_base() + static_cast<int>(rng.below(5)), kVocab.text_base() + static_cast<int>(rng.below(5))};
    in.image_patches = 2;
    for (int i = 0; i < in.image_patches * c.image_patch_dim; ++i) in.image.push_back(static_cast<float>(rng.uniform(-1, 1)));
    return in;
}

// Log-probability of a full token sequence under the restricted softmax.
double sequence_logprob(const Model<float>& m, const SequenceInput& prefix, const std::vector<std::int32_t>& toks) {
    auto st = prefill(m, prefix, static_cast<int>(toks.size()));
    double lp = 0.0;
    for (std::size_t i = 0; i < toks.size(); ++i) {
        const auto logits = st.last_logits.head(m.vocab.mask_size).cast<double>();
        const double mx = logits.maxCoeff();
        const double lse = mx + std::log((logits.array() - mx).exp().sum());
        lp += logits(toks[i]) - lse;
        if (i + 1 < toks.size()) decode_step(m, st, toks[i]);
    }
    return lp;
}

}  // namespace

TEST_SUITE("decode") {

TEST_CASE("strategy strings") {
    CHECK(DecodeStrategy::parse("greedy").kind == DecodeKind::greedy);
    CHECK(DecodeStrategy::parse("beam").beam_width == 3);
    CHECK(DecodeStrategy::parse("beam:5").beam_width == 5);
    CHECK(DecodeStrategy::parse("topk").top_k == 3);
    CHECK(DecodeStrategy::parse("topp:0.75").top_p == 0.75);
    CHECK(DecodeStrategy::parse("topp:0.9").to_string() == "topp:0.9");
    CHECK(DecodeStrategy::parse("random").to_string() == "random");
    CHECK_THROWS_AS(DecodeStrategy::parse("nucleus"), ValidationError);
    CHECK_THROWS_AS(DecodeStrategy::parse("topp:1.5"), ValidationError);
    CHECK_THROWS_AS(DecodeStrategy::parse("beam:x"), ValidationError);
}

TEST_CASE("selection rules") {
    const std::vector<double> logits = {1.0, 3.0, 3.0, 0.5, 2.0};
    CHECK(argmax_lowest(logits) == 1);
    const auto k = top_k_candidates(logits, 3, 1.0);
    CHECK(k.ids == std::vector<std::int32_t>{1, 2, 4});
    const double z = 2 * std::exp(0.0) + std::exp(-1.0);
    CHECK(k.probs[0] == doctest::Approx(1.0 / z));
    CHECK(k.probs[2] == doctest::Approx(std::exp(-1.0) / z));
    // Full softmax: p(1) = p(2) ~ 0.387, p(4) ~ 0.142.
    CHECK(top_p_candidates(logits, 0.5, 1.0).ids == std::vector<std::int32_t>{1, 2});
    CHECK(top_p_candidates(logits, 0.9, 1.0).ids == std::vector<std::int32_t>{1, 2, 4});
    CHECK(top_p_candidates(logits, 0.95, 1.0).ids.size() == 4);
    CHECK(top_p_candidates(logits, 0.0, 1.0).ids == std::vector<std::int32_t>{1});
    const auto zero_t = full_candidates(logits, 0.0);
    CHECK(zero_t.ids == std::vector<std::int32_t>{1});
}

TEST_CASE("every strategy emits h*w in-range tokens") {
    const auto c = small_config();
    const auto m = init_model<float>(c, kVocab);
    Rng rng(1);
    for (const char* spec : {"greedy", "beam:3", "topk:3", "topp:0.9", "random"}) {
        for (int i = 0; i < 5; ++i) {
            auto s = DecodeStrategy::parse(spec);
            s.seed = static_cast<std::uint64_t>(i);
            const auto out = generate(m, random_prefix(rng, c), s);
            CHECK(out.size() == 9);
            for (auto t : out) CHECK((t >= 0 && t < kVocab.mask_size));
        }
    }
}

TEST_CASE("greedy is reproducible and top-p with p=0 equals greedy") {
    const auto c = small_config();
    const auto m = init_model<float>(c, kVocab);
    Rng rng(2);
    for (int i = 0; i < 20; ++i) {
        const auto p = random_prefix(rng, c);
        const auto g = generate(m, p, {});
        CHECK(generate(m, p, {}) == g);
        auto s = DecodeStrategy::parse("topp:0");
        s.seed = static_cast<std::uint64_t>(i);
        CHECK(generate(m, p, s) == g);
        auto t = DecodeStrategy::parse("random");
        t.temperature = 0.0;
        CHECK(generate(m, p, t) == g);
    }
}

TEST_CASE("sampling is seeded") {
    const auto c = small_config();
    const auto m = init_model<float>(c, kVocab);
    Rng rng(3);
    const auto p = random_prefix(rng, c);
    auto s = DecodeStrategy::parse("random");
    s.seed = 17;
    CHECK(generate(m, p, s) == generate(m, p, s));
    std::map<std::vector<std::int32_t>, int> seen;
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
        s.seed = seed;
        ++seen[generate(m, p, s)];
    }
    CHECK(seen.size() > 1);
}

TEST_CASE("beam search with width 1 is greedy") {
    const auto c = small_config();
    const auto m = init_model<float>(c, kVocab);
    Rng rng(4);
    for (int i = 0; i < 5; ++i) {
        const auto p = random_prefix(rng, c);
        CHECK(generate(m, p, DecodeStrategy::parse("beam:1")) == generate(m, p, {}));
    }
}

TEST_CASE("beam as wide as the vocabulary finds the exact optimum of a two-token grid") {
    auto c = small_config();
    c.grid_rows = 1;
    c.grid_cols = 2;
    const auto m = init_model<float>(c, kVocab);
    Rng rng(6);
    for (int i = 0; i < 5; ++i) {
        const auto p = random_prefix(rng, c);
        double best = -1e300;
        for (int a = 0; a < kVocab.mask_size; ++a)
            for (int b = 0; b < kVocab.mask_size; ++b) best = std::max(best, sequence_logprob(m, p, {a, b}));
        const auto found = generate(m, p, DecodeStrategy::parse("beam:10"));
        CHECK(sequence_logprob(m, p, found) == doctest::Approx(best).epsilon(1e-12));
    }
}

TEST_CASE("prefix with mask tokens is rejected") {
    const auto c = small_config();
    const auto m = init_model<float>(c, kVocab);
    Rng rng(5);
    auto p = random_prefix(rng, c);
    p.mask = {1};
    CHECK_THROWS_AS(generate(m, p, {}), ValidationError);
}

}  // TEST_SUITE
