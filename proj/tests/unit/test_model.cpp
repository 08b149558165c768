#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "maskgen/error.hpp"
#include "maskgen/model/analysis.hpp"
#include "maskgen/model/decode.hpp"
#include "maskgen/model/train.hpp"
#include "maskgen/rng.hpp"

using namespace maskgen;
using namespace maskgen::model;

namespace {

ModelConfig tiny_config() {
    ModelConfig c;
    c.layers = 2;
    c.hidden = 16;
    c.heads = 2;
    c.image_patch_dim = 12;
    c.grid_rows = 2;
    c.grid_cols = 3;
    c.init_std = 0.3;
    c.seed = 5;
    return c;
}

const Vocabulary kVocab{8, 6};

SequenceInput random_input(Rng& rng, const ModelConfig& c, const Vocabulary& v, bool with_mask = true) {
    SequenceInput in;
    const int words = rng.range(1, 4);
    for (int i = 0; i < words; ++i) in.text.push_back(v.text_base() + static_cast<int>(rng.below(v.text_size)));
    in.image_patches = 3;
    for (int i = 0; i < in.image_patches * c.image_patch_dim; ++i) in.image.push_back(static_cast<float>(rng.uniform(-1, 1)));
    if (with_mask)
        for (int i = 0; i < c.mask_length(); ++i) in.mask.push_back(static_cast<int>(rng.below(v.mask_size)));
    return in;
}

template <typename T>
double max_abs_diff(const Mat<T>& a, const Mat<T>& b) {
    return static_cast<double>((a - b).cwiseAbs().maxCoeff());
}

}  // namespace

TEST_SUITE("model") {

TEST_CASE("config validation and derived sizes") {
    ModelConfig c;
    CHECK(c.ffn_width() == 352);  // 8/3 * 128 = 341.3 rounded up to a multiple of 32
    CHECK(c.head_dim() == 32);
    c.heads = 3;
    CHECK_THROWS_AS(c.validate(), ValidationError);
    c = tiny_config();
    c.hidden = 18;  // head_dim 9 is odd
    c.heads = 2;
    CHECK_THROWS_AS(c.validate(), ValidationError);
}

TEST_CASE("layout and input checks") {
    const auto c = tiny_config();
    const auto m = init_model<double>(c, kVocab);
    Rng rng(1);
    auto in = random_input(rng, c, kVocab);
    const auto l = make_layout(in, c, kVocab);
    CHECK(l.boi_pos == static_cast<int>(in.text.size()));
    CHECK(l.bom_pos == l.boi_pos + 1 + in.image_patches);
    CHECK(l.total_len == l.bom_pos + 1 + c.mask_length());
    in.mask.pop_back();
    CHECK_THROWS_AS(make_layout(in, c, kVocab), ValidationError);
    in = random_input(rng, c, kVocab);
    in.text[0] = 3;  // a mask id in the text span
    CHECK_THROWS_AS(forward(m, in), ValidationError);
}

TEST_CASE("causal attention: later tokens never change earlier logits") {
    const auto c = tiny_config();
    const auto m = init_model<double>(c, kVocab);
    Rng rng(2);
    for (int trial = 0; trial < 10; ++trial) {
        const auto in = random_input(rng, c, kVocab);
        const auto base = forward(m, in);
        const auto l = base.embedded.layout;
        const int p = rng.range(l.mask.begin, l.total_len - 1);
        auto changed = in;
        auto& tok = changed.mask[static_cast<std::size_t>(p - l.mask.begin)];
        tok = (tok + 1) % kVocab.mask_size;
        const auto after = forward(m, changed);
        CHECK(max_abs_diff<double>(base.logits.topRows(p), after.logits.topRows(p)) == 0.0);
        CHECK(max_abs_diff<double>(base.logits.bottomRows(l.total_len - p), after.logits.bottomRows(l.total_len - p)) > 0.0);
    }
}

TEST_CASE("loss gradient is exactly zero outside the mask span") {
    const auto c = tiny_config();
    const auto m = init_model<double>(c, kVocab);
    Rng rng(3);
    const auto in = random_input(rng, c, kVocab);
    const auto r = forward(m, in);
    const auto l = r.embedded.layout;
    const auto g = mask_loss_grad<double>(r.logits, l, in.mask);
    for (int row = 0; row < g.rows(); ++row) {
        const bool supervised = row >= l.bom_pos && row < l.bom_pos + c.mask_length();
        if (!supervised) CHECK(g.row(row).cwiseAbs().maxCoeff() == 0.0);
        if (supervised) CHECK(g.row(row).cwiseAbs().maxCoeff() > 0.0);
    }
    // Perturbing unsupervised logits leaves the loss unchanged.
    auto logits = r.logits;
    logits.row(0).array() += 3.0;
    logits.row(l.total_len - 1).array() -= 2.0;
    CHECK(mask_loss<double>(logits, l, in.mask) == mask_loss<double>(r.logits, l, in.mask));
}

TEST_CASE("analytic gradients match central differences") {
    const auto c = tiny_config();
    const auto m = init_model<double>(c, kVocab);
    Rng rng(4);
    std::vector<SequenceInput> batch = {random_input(rng, c, kVocab), random_input(rng, c, kVocab)};
    const auto r = grad_check(m, batch, 60, 9);
    CHECK(r.checked == 60);
    INFO(r.worst);
    CHECK(r.max_rel_error < 1e-3);
}

TEST_CASE("generic grad_check on a quadratic") {
    const std::vector<double> p = {0.5, -1.0, 2.0};
    const auto loss = [](std::span<const double> x) { return x[0] * x[0] + 3 * x[1] * x[2]; };
    const std::vector<double> good = {1.0, 6.0, -3.0};
    CHECK(grad_check(loss, p, good, 30, 0).max_rel_error < 1e-8);
    const std::vector<double> bad = {1.0, 6.0, -2.0};
    CHECK(grad_check(loss, p, bad, 30, 0).max_rel_error > 0.1);
    CHECK(relative_error(0.0, 1e-9) == 0.0);
    CHECK(relative_error(1.0, 2.0) == 0.5);
}

TEST_CASE("rotary embedding makes attention scores shift-invariant") {
    const auto c = tiny_config();
    const auto m = init_model<double>(c, kVocab);
    Rng rng(6);
    const auto in = random_input(rng, c, kVocab);
    ForwardOptions o;
    o.keep_cache = true;
    const auto a = forward(m, in, o);
    o.position_offset = 37;
    const auto b = forward(m, in, o);
    for (std::size_t layer = 0; layer < a.scores.size(); ++layer)
        for (std::size_t h = 0; h < a.scores[layer].size(); ++h)
            CHECK(max_abs_diff<double>(a.scores[layer][h], b.scores[layer][h]) < 1e-10);
    CHECK(max_abs_diff<double>(a.logits, b.logits) < 1e-10);
}

TEST_CASE("incremental decoding matches the full forward pass") {
    const auto c = tiny_config();
    const auto m = init_model<float>(c, kVocab);
    Rng rng(7);
    const auto full = random_input(rng, c, kVocab);
    auto prefix = full;
    prefix.mask.clear();
    auto st = prefill(m, prefix, c.mask_length());
    const auto ref = forward(m, full);
    const auto l = ref.embedded.layout;
    for (int t = 0; t < c.mask_length(); ++t) {
        const Eigen::RowVectorXf row = ref.logits.row(l.bom_pos + t);
        CHECK((row.transpose() - st.last_logits).cwiseAbs().maxCoeff() < 1e-4f);
        decode_step(m, st, full.mask[static_cast<std::size_t>(t)]);
    }
}

TEST_CASE("learning-rate schedule") {
    TrainConfig t;
    t.lr = 1e-3;
    t.warmup_fraction = 0.1;
    CHECK(scheduled_lr(t, 0, 100) == doctest::Approx(1e-4));
    CHECK(scheduled_lr(t, 9, 100) == doctest::Approx(1e-3));
    CHECK(scheduled_lr(t, 10, 100) == doctest::Approx(1e-3));
    CHECK(scheduled_lr(t, 55, 100) == doctest::Approx(5e-4));
    CHECK(scheduled_lr(t, 100, 100) == doctest::Approx(0.0));
    t.warmup_fraction = 0.01;
    CHECK(scheduled_lr(t, 0, 250) == doctest::Approx(1e-3 / 3));
}

TEST_CASE("first AdamW step moves each weight by about lr against its gradient") {
    const auto c = tiny_config();
    auto m = init_model<float>(c, kVocab);
    auto grads = m.params.zeros_like();
    Rng rng(8);
    grads.visit([&](std::string_view, Mat<float>& g) {
        for (Eigen::Index i = 0; i < g.size(); ++i) g.data()[i] = static_cast<float>(rng.uniform(-1, 1));
    });
    auto before = m.params;
    auto st = make_adam_state(m.params);
    TrainConfig t = TrainConfig::pretrain();  // weight decay 0.05
    const double lr = 1e-2;
    adamw_update(m.params, grads, st, t, lr);
    std::vector<const Mat<float>*> g_list, b_list;
    grads.visit([&](std::string_view, const Mat<float>& g) { g_list.push_back(&g); });
    before.visit([&](std::string_view, const Mat<float>& b) { b_list.push_back(&b); });
    std::size_t k = 0;
    bool ok = true;
    m.params.visit([&](std::string_view name, const Mat<float>& p) {
        const auto& g = *g_list[k];
        const auto& b = *b_list[k];
        ++k;
        const double wd = is_decayed(name) ? t.weight_decay : 0.0;
        for (Eigen::Index i = 0; i < p.size(); ++i) {
            const double decayed = b.data()[i] * (1.0 - lr * wd);
            const double want = decayed - lr * (g.data()[i] > 0 ? 1.0 : -1.0);
            if (std::abs(p.data()[i] - want) > 1e-5) ok = false;
        }
    });
    CHECK(ok);
    CHECK_FALSE(is_decayed("blocks.0.attn_norm"));
    CHECK_FALSE(is_decayed("final_norm"));
    CHECK(is_decayed("blocks.1.wq"));
}

TEST_CASE("gradient clipping") {
    const auto c = tiny_config();
    auto g = init_model<float>(c, kVocab).params.zeros_like();
    g.head(0, 0) = 3.0f;
    g.tok_emb(1, 1) = 4.0f;
    CHECK(clip_grad_norm(g, 1.0) == doctest::Approx(5.0));
    CHECK(g.head(0, 0) == doctest::Approx(0.6f));
    CHECK(g.tok_emb(1, 1) == doctest::Approx(0.8f));
}

TEST_CASE("training is deterministic and independent of the job count") {
    const auto c = tiny_config();
    Rng rng(9);
    std::vector<SequenceInput> data;
    for (int i = 0; i < 6; ++i) data.push_back(random_input(rng, c, kVocab));
    TrainConfig t = TrainConfig::finetune();
    t.epochs = 2;
    t.batch = 4;
    t.lr = 1e-2;
    const auto run = [&](int jobs) {
        auto m = init_model<float>(c, kVocab);
        auto opt = make_adam_state(m.params);
        auto tc = t;
        tc.jobs = jobs;
        const auto res = train(m, opt, tc, data);
        return std::make_pair(m, res);
    };
    const auto [m1, r1] = run(1);
    const auto [m2, r2] = run(3);
    CHECK(r1.steps == 4);
    CHECK(r1.epoch_loss == r2.epoch_loss);
    CHECK(max_abs_diff<float>(m1.params.head, m2.params.head) == 0.0);
    CHECK(r1.epoch_loss[1] < r1.epoch_loss[0]);
}

TEST_CASE("divergence hands back the last good parameters") {
    const auto c = tiny_config();
    Rng rng(10);
    std::vector<SequenceInput> data = {random_input(rng, c, kVocab)};
    auto m = init_model<float>(c, kVocab);
    m.params.head(0, 0) = std::numeric_limits<float>::quiet_NaN();
    auto opt = make_adam_state(m.params);
    TrainConfig t;
    t.epochs = 1;
    bool called = false;
    TrainHooks hooks;
    hooks.on_divergence = [&](const ModelParams<float>& p, long step) {
        called = true;
        CHECK(step == 0);
        CHECK(std::isnan(p.head(0, 0)));
    };
    CHECK_THROWS_AS(train(m, opt, t, data, hooks), RuntimeFailure);
    CHECK(called);
}

TEST_CASE("checkpoints round-trip parameters, optimizer and metadata") {
    const auto c = tiny_config();
    Rng rng(11);
    std::vector<SequenceInput> data = {random_input(rng, c, kVocab), random_input(rng, c, kVocab)};
    auto m = init_model<float>(c, kVocab);
    auto opt = make_adam_state(m.params);
    TrainConfig t;
    t.epochs = 1;
    t.batch = 2;
    train(m, opt, t, data);
    Codebook book{8, 4, std::vector<float>(32), {}};
    for (int i = 0; i < 32; ++i) book.vectors[static_cast<std::size_t>(i)] = static_cast<float>(i) * 0.1f;
    const auto path = std::filesystem::temp_directory_path() / "maskgen_model_test.ckpt";
    save_checkpoint(path, {m, opt, book, t, {{"note", "x"}}});
    const auto ck = load_checkpoint(path);
    CHECK(ck.model.config.hidden == c.hidden);
    CHECK(ck.model.vocab == kVocab);
    CHECK(max_abs_diff<float>(ck.model.params.blocks[1].w_down, m.params.blocks[1].w_down) == 0.0);
    REQUIRE(ck.optimizer.has_value());
    CHECK(ck.optimizer->step == opt.step);
    CHECK(max_abs_diff<float>(ck.optimizer->v.head, opt.v.head) == 0.0);
    REQUIRE(ck.codebook.has_value());
    CHECK(ck.codebook->vectors == book.vectors);
    CHECK(ck.meta["note"] == "x");
    // Greedy decoding from the reloaded model matches the original.
    auto prefix = data[0];
    prefix.mask.clear();
    CHECK(generate(ck.model, prefix, {}) == generate(m, prefix, {}));
    std::ofstream(path, std::ios::binary) << "garbage";
    CHECK_THROWS_AS(load_checkpoint(path), ValidationError);
}

TEST_CASE("attention map rows sum to one over visible keys") {
    const auto c = tiny_config();
    const auto m = init_model<float>(c, kVocab);
    Rng rng(12);
    const auto in = random_input(rng, c, kVocab);
    const auto map = attention_map(m, in);
    CHECK(map.weights.rows() == c.mask_length());
    CHECK(map.weights.cols() == map.layout.total_len);
    CHECK(map.layer == c.layers - 1);
    for (int t = 0; t < c.mask_length(); ++t) {
        const int q = map.layout.bom_pos + t;
        CHECK(map.weights.row(t).head(q + 1).sum() == doctest::Approx(1.0).epsilon(1e-6));
        CHECK(map.weights.row(t).tail(map.layout.total_len - q - 1).sum() == 0.0);
    }
    const auto pixels = attention_heatmap(map);
    CHECK(pixels.size() == static_cast<std::size_t>(map.weights.size()));
    CHECK(*std::max_element(pixels.begin(), pixels.end()) == 255);
    CHECK(*std::min_element(pixels.begin(), pixels.end()) == 0);
}

TEST_CASE("column-alignment probe on synthetic maps") {
    // Rows put all weight on the key holding token (i-1, j): every query hits.
    const int rows = 3, cols = 4;
    AttentionMap map;
    map.layout.bom_pos = 10;
    map.layout.mask = {11, rows * cols};
    map.layout.total_len = 11 + rows * cols;
    map.weights = Mat<double>::Zero(rows * cols, map.layout.total_len);
    for (int t = 0; t < rows * cols; ++t) {
        const int q = map.layout.bom_pos + t;
        map.weights.row(t).head(q + 1).setConstant(0.01);
        if (t >= cols) map.weights(t, map.layout.bom_pos + 1 + (t - cols)) = 1.0;
    }
    std::vector<AttentionMap> maps(5, map);
    ProbeOptions o;
    o.top = 1;
    o.permutations = 2000;
    const auto r = column_alignment_probe(maps, rows, cols, o);
    CHECK(r.queries == 5 * (rows - 1) * cols);
    CHECK(r.aligned_rate == 1.0);
    CHECK(r.baseline_rate < 0.5);
    CHECK(r.p_value < 0.01);
    // Uniform rows carry no signal.
    for (auto& m : maps) {
        for (int t = 0; t < rows * cols; ++t) m.weights.row(t).head(m.layout.bom_pos + t + 1).setConstant(0.01);
    }
    const auto flat = column_alignment_probe(maps, rows, cols, o);
    CHECK(flat.p_value > 0.05);
}

}  // TEST_SUITE
