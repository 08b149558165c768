#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "maskgen/error.hpp"
#include "maskgen/harness/config.hpp"
#include "maskgen/harness/e2e.hpp"
#include "maskgen/harness/manifest.hpp"
#include "maskgen/harness/report.hpp"
#include "maskgen/rng.hpp"
#include "support.hpp"

using namespace maskgen;
using namespace maskgen::harness;
namespace fs = std::filesystem;

namespace {

fs::path fresh_dir(const std::string& name) {
    const auto dir = fs::temp_directory_path() / ("maskgen_harness_" + name);
    fs::remove_all(dir);
    fs::create_directories(dir);
    return dir;
}

constexpr const char* kTinyToml = R"(
seed = 3
[model]
layers = 1
hidden = 16
heads = 2
[train]
epochs = 1
batch = 4
[data]
train_samples = 8
test_samples = 4
[codebook]
size = 8
iterations = 5
samples = 20
)";

}  // namespace

TEST_SUITE("harness") {

TEST_CASE("config defaults and section seeds") {
    const auto c = parse_config("");
    CHECK(c.seed == 0);
    CHECK(c.train.lr == 1e-4);
    CHECK(c.train.beta2 == 0.99);
    CHECK(c.model.layers == 4);
    CHECK(c.model.hidden == 128);
    CHECK(c.model.seed == derive_seed(0, "model"));
    CHECK(c.codebook.seed == derive_seed(0, "codebook"));
    CHECK(config_hash(c) == config_hash(default_config(0)));

    const auto p = parse_config("seed = 9\n[train]\npreset = \"pretrain\"\nepochs = 2\n[model]\nseed = 77\n");
    CHECK(p.train.lr == 2e-4);
    CHECK(p.train.weight_decay == 0.05);
    CHECK(p.train.epochs == 2);
    CHECK(p.model.seed == 77);
    CHECK(p.train.seed == derive_seed(9, "train"));

    // A --seed override re-derives every section seed, explicit ones included.
    const auto o = parse_config("seed = 9\n[model]\nseed = 77\n", {std::uint64_t{4}, std::nullopt});
    CHECK(o.seed == 4);
    CHECK(o.model.seed == derive_seed(4, "model"));
    const auto pre = parse_config("[train]\nlr = 3e-4\n", {std::nullopt, std::string("pretrain")});
    CHECK(pre.train.beta2 == 0.95);
    CHECK(pre.train.lr == 3e-4);
}

TEST_CASE("config errors") {
    CHECK_THROWS_AS(parse_config("[model]\nlayerz = 3\n"), ValidationError);
    CHECK_THROWS_AS(parse_config("[modle]\n"), ValidationError);
    CHECK_THROWS_AS(parse_config("seed = \"x\"\n"), ValidationError);
    CHECK_THROWS_AS(parse_config("[model]\nheads = 3\n"), ValidationError);
    CHECK_THROWS_AS(parse_config("[decode]\nstrategy = \"sideways\"\n"), ValidationError);
    CHECK_THROWS_AS(parse_config("[eval]\nconnectivity = 6\n"), ValidationError);
    CHECK_THROWS_AS(parse_config("[train]\npreset = \"warmup\"\n"), ValidationError);
    CHECK_THROWS_AS(parse_config("not toml at all ["), ValidationError);
    CHECK_THROWS_AS(load_config("/nonexistent/config.toml"), ValidationError);
}

TEST_CASE("shipped configs parse") {
    for (const auto& e : fs::directory_iterator(MASKGEN_CONFIGS)) {
        INFO(e.path().string());
        CHECK_NOTHROW(load_config(e.path()));
    }
}

TEST_CASE("config hash ignores the job count") {
    auto a = default_config(1), b = default_config(1);
    b.train.jobs = 8;
    CHECK(config_hash(a) == config_hash(b));
    b.train.epochs = 3;
    CHECK(config_hash(a) != config_hash(b));
}

TEST_CASE("manifest hash excludes the timestamp") {
    RunManifest m;
    m.command = "eval";
    m.config_hash = "abc";
    m.inputs = {{"dataset", "123"}};
    m.started_at = "2020-01-01T00:00:00Z";
    auto n = m;
    n.started_at = utc_timestamp();
    CHECK(m.hash() == n.hash());
    n.inputs["dataset"] = "124";
    CHECK(m.hash() != n.hash());
    CHECK(m.to_json()["tool_version"] == "0.1.0");
}

TEST_CASE("cache directory resolution") {
    ::unsetenv("MASKGEN_CACHE");
    CHECK(resolve_cache_dir(std::nullopt) == fs::path(".maskgen-cache"));
    ::setenv("MASKGEN_CACHE", "/tmp/from-env", 1);
    CHECK(resolve_cache_dir(std::nullopt) == fs::path("/tmp/from-env"));
    CHECK(resolve_cache_dir(fs::path("/tmp/from-flag")) == fs::path("/tmp/from-flag"));
    ::unsetenv("MASKGEN_CACHE");
}

TEST_CASE("cache entries appear only when complete") {
    const Cache cache(fresh_dir("cache"));
    CHECK_FALSE(cache.has("stage", "k1"));
    CHECK_THROWS_AS(cache.publish("stage", "k1",
                                  [](const fs::path& d) {
                                      std::ofstream(d / "half") << "x";
                                      throw RuntimeFailure("boom");
                                  }),
                    RuntimeFailure);
    CHECK_FALSE(cache.has("stage", "k1"));
    CHECK_FALSE(fs::exists(cache.entry("stage", "k1")));
    int fills = 0;
    const auto fill = [&](const fs::path& d) {
        ++fills;
        std::ofstream(d / "out.txt") << "value";
    };
    const auto dir = cache.publish("stage", "k1", fill);
    CHECK(cache.has("stage", "k1"));
    CHECK(fs::exists(dir / "out.txt"));
    cache.publish("stage", "k1", fill);
    CHECK(fills == 1);
}

TEST_CASE("value formatting") {
    CHECK(format_value(1.0) == "1.0000");
    CHECK(format_value(0.12345) == "0.1235");
    CHECK(format_value(0.00015) == "0.0001");  // the double lies just below the tie
    CHECK(format_value(0.98765) == "0.9877");
    CHECK(format_value(-0.00001) == "0.0000");
    CHECK(format_value(12.5) == "12.5000");
    // Exact binary ties round to even.
    CHECK(format_value(0.03125) == "0.0312");
    CHECK(format_value(0.09375) == "0.0938");
}

TEST_CASE("report rows and renderings") {
    const auto gt = testsupport::box_mask(8, 8, 0, 0, 4, 4);
    std::vector<EvalPair> pairs = {EvalPair::make(gt, gt), EvalPair::make(testsupport::box_mask(8, 8, 0, 0, 4, 2), gt)};
    const EvalConfig ec;
    const auto rows = metric_rows(pairs, ec);
    REQUIRE(rows.size() == 2 + ec.thresholds.size());
    CHECK(rows[0].metric == "miou");
    CHECK(*rows[0].value == 0.75);
    CHECK(rows[1].metric == "ciou");
    CHECK(*rows[1].value == 24.0 / 32.0);
    CHECK(rows[2].count == 2);  // both IoUs >= 0.5
    CHECK(rows[6].count == 1);
    Report r{"m", "c", "greedy", rows};
    const auto back = parse_report_json(render_json(r));
    REQUIRE(back.rows.size() == rows.size());
    for (std::size_t i = 0; i < rows.size(); ++i) {
        CHECK(back.rows[i].metric == rows[i].metric);
        CHECK(back.rows[i].count == rows[i].count);
        CHECK(format_value(*back.rows[i].value) == format_value(*rows[i].value));
    }
    const auto csv = render_csv(r);
    CHECK(csv.rfind("metric,threshold,count,value\n", 0) == 0);
    CHECK(csv.find("miou,,2,0.7500") != std::string::npos);
    const auto csv_rows = parse_csv_rows(csv);
    CHECK(csv_rows.size() == rows.size());
    CHECK(render_table(r).find("mahd") != std::string::npos);
    // Empty groups render as NA / null.
    std::vector<EvalPair> low = {EvalPair::make(testsupport::box_mask(8, 8, 0, 0, 1, 1), gt)};
    Report e{"m", "c", "greedy", metric_rows(low, ec)};
    CHECK(render_csv(e).find("mahd,0.5000,0,NA") != std::string::npos);
    const auto ej = nlohmann::json::parse(render_json(e));
    CHECK(ej["mahd"]["0.5"]["count"] == 0);
    CHECK(ej["mahd"]["0.5"]["mean"].is_null());
    CHECK(ej["miou"].get<double>() == doctest::Approx(1.0 / 16.0).epsilon(1e-4));
    CHECK(ej["pairs"] == 1);
    CHECK(parse_report_json(render_json(e)) == e);
}

TEST_CASE("datasets round-trip through disk") {
    const auto dir = fresh_dir("dataset");
    const auto samples = generate_stored(5, 6, Task::semantic, 2);
    CHECK(samples == generate_stored(5, 6, Task::semantic, 1));
    write_dataset(dir, samples, "hash");
    const auto back = read_dataset(dir);
    REQUIRE(back.size() == 6);
    for (std::size_t i = 0; i < 6; ++i) {
        CHECK(back[i].seed == samples[i].seed);
        CHECK(back[i].task == Task::semantic);
        CHECK(back[i].sample.image == samples[i].sample.image);
        CHECK(back[i].sample.mask == samples[i].sample.mask);
        CHECK(back[i].sample.instruction == samples[i].sample.instruction);
    }
    CHECK_THROWS_AS(read_dataset(dir / "missing"), ValidationError);
}

TEST_CASE("end-to-end run is cached and deterministic") {
    const auto cfg = parse_config(kTinyToml);
    const Cache a(fresh_dir("e2e_a")), b(fresh_dir("e2e_b"));
    std::ostringstream log;
    const auto r1 = run_e2e(cfg, a, {1, &log});
    CHECK(log.str().find("[train] epoch 1/1") != std::string::npos);
    for (const auto& s : r1.stages) CHECK_FALSE(s.cache_hit);
    const auto r2 = run_e2e(cfg, a, {2, nullptr});
    for (const auto& s : r2.stages) CHECK(s.cache_hit);
    const auto r3 = run_e2e(cfg, b, {2, nullptr});
    CHECK(render_json(r1.report) == render_json(r2.report));
    CHECK(render_json(r1.report) == render_json(r3.report));
    CHECK(r1.stages.size() == 6);

    auto bad = cfg;
    bad.codebook.size = 100000;
    try {
        run_e2e(bad, a, {});
        FAIL("expected failure");
    } catch (const ValidationError& e) {
        const std::string msg = e.what();
        CHECK(msg.find("stage 'codebook' failed (manifest ") != std::string::npos);
    }
}

}  // TEST_SUITE
