#include <doctest.h>

#include <cmath>

#include "maskgen/error.hpp"
#include "maskgen/metrics.hpp"
#include "support.hpp"

using namespace maskgen;
using testsupport::ahd_oracle;
using testsupport::box_mask;
using testsupport::iou_oracle;
using testsupport::random_mask;

namespace {

std::vector<RealPoint> pts(std::initializer_list<std::pair<double, double>> list) {
    std::vector<RealPoint> out;
    for (const auto& [r, c] : list) out.push_back({r, c});
    return out;
}

// First k pixels (row-major) of an h x w grid.
BinaryMask prefix_mask(int h, int w, int k) {
    BinaryMask m(h, w);
    for (int i = 0; i < k; ++i) m.set(i / w, i % w, true);
    return m;
}

}  // namespace

TEST_SUITE("metrics") {

TEST_CASE("ahd hand values") {
    CHECK(ahd(pts({{0, 0}}), pts({{3, 4}})) == 5.0);
    CHECK(ahd(pts({{0, 0}, {2, 0}}), pts({{0, 0}})) == 0.5);
    CHECK(ahd(pts({{0, 0}}), pts({{0, 0}})) == 0.0);
    CHECK(ahd(std::span<const RealPoint>{}, std::span<const RealPoint>{}) == 0.0);
    CHECK_THROWS_AS(ahd(pts({{0, 0}}), std::span<const RealPoint>{}), ValidationError);
}

TEST_CASE("ahd matches exhaustive oracle on random masks") {
    Rng rng(11);
    for (int trial = 0; trial < 60; ++trial) {
        const int h = rng.range(1, 32), w = rng.range(1, 32);
        const auto a = random_mask(rng, h, w);
        const auto b = random_mask(rng, h, w);
        for (const auto conn : {Connectivity::four, Connectivity::eight}) {
            const bool eight = conn == Connectivity::eight;
            const double got = ahd(boundary(a, conn), boundary(b, conn));
            const double want = ahd_oracle(testsupport::boundary_oracle(a, eight, 1.0),
                                           testsupport::boundary_oracle(b, eight, 1.0));
            CHECK(std::abs(got - want) <= 1e-9);
            CHECK(ahd(boundary(b, conn), boundary(a, conn)) == got);
            CHECK(ahd(boundary(a, conn), boundary(a, conn)) == 0.0);
        }
    }
}

TEST_CASE("bucketed search equals exhaustive scan") {
    // Two 600x600 rings give more than a million point pairs.
    BinaryMask a(600, 600), b(600, 600);
    for (int r = 0; r < 600; ++r)
        for (int c = 0; c < 600; ++c) {
            const double da = std::hypot(r - 300.0, c - 300.0), db = std::hypot(r - 280.0, c - 310.0);
            a.set(r, c, da < 250);
            b.set(r, c, db < 200 && db > 20);
        }
    const auto ba = boundary(a), bb = boundary(b);
    REQUIRE(static_cast<std::int64_t>(ba.points.size()) * static_cast<std::int64_t>(bb.points.size()) >
            kAhdBucketThreshold);
    const double got = ahd(ba, bb);
    const double want = ahd_oracle(testsupport::boundary_oracle(a, false, 1.0), testsupport::boundary_oracle(b, false, 1.0));
    CHECK(std::abs(got - want) <= 1e-9);
}

TEST_CASE("boundary of a filled rectangle") {
    const auto m = box_mask(6, 7, 1, 1, 5, 6);  // 4 x 5 block
    CHECK(boundary(m, Connectivity::four).points.size() == 14);
    CHECK(boundary(m, Connectivity::eight).points.size() == 14);
    // Pixels on the image edge count as boundary.
    const auto full = box_mask(3, 3, 0, 0, 3, 3);
    CHECK(boundary(full).points.size() == 8);
    // A diagonal notch is only seen by 8-connectivity.
    auto notched = box_mask(5, 5, 0, 0, 5, 5);
    notched.set(0, 0, false);
    CHECK(boundary(notched, Connectivity::eight).points.size() == boundary(notched, Connectivity::four).points.size() + 1);
}

TEST_CASE("normalization scales ahd by 256 / max side") {
    BinaryMask a(512, 512), b(512, 512);
    for (int r = 100; r < 300; ++r)
        for (int c = 120; c < 260; ++c) a.set(r, c, true);
    for (int r = 130; r < 320; ++r)
        for (int c = 90; c < 240; ++c) b.set(r, c, true);
    const auto ba = boundary(a), bb = boundary(b);
    const double raw = ahd(ba, bb);
    const double norm = ahd(normalize_points(ba), normalize_points(bb));
    CHECK(norm == 0.5 * raw);
    const auto na = normalize_points(ba);
    CHECK(na.front().row == ba.points.front().row * 0.5);
    // Non-square masks use the longer side.
    BinaryMask tall(128, 64);
    tall.set(10, 10, true);
    const auto nt = normalize_points(boundary(tall));
    CHECK(nt[0].row == 20.0);
    CHECK(nt[0].col == 20.0);
}

TEST_CASE("iou against pixel counting") {
    Rng rng(5);
    for (int i = 0; i < 100; ++i) {
        const int h = rng.range(1, 24), w = rng.range(1, 24);
        const auto a = random_mask(rng, h, w, true), b = random_mask(rng, h, w, true);
        CHECK(iou(a, b) == iou_oracle(a, b));
    }
    CHECK(iou(BinaryMask(4, 4), BinaryMask(4, 4)) == 1.0);
    CHECK_THROWS_AS(iou(BinaryMask(4, 4), BinaryMask(4, 5)), ValidationError);
}

TEST_CASE("c_iou pools counts") {
    std::vector<EvalPair> pairs;
    pairs.push_back(EvalPair::make(prefix_mask(2, 2, 2), box_mask(2, 2, 0, 0, 2, 2)));  // 2/4
    pairs.push_back(EvalPair::make(prefix_mask(2, 3, 3), box_mask(2, 3, 0, 0, 2, 3)));  // 3/6
    CHECK(c_iou(pairs) == 0.5);
    std::vector<EvalPair> uneven;
    uneven.push_back(EvalPair::make(prefix_mask(1, 10, 1), box_mask(1, 10, 0, 0, 1, 10)));  // 1/10
    uneven.push_back(EvalPair::make(box_mask(1, 2, 0, 0, 1, 2), box_mask(1, 2, 0, 0, 1, 2)));  // 2/2
    CHECK(c_iou(uneven) == doctest::Approx(3.0 / 12.0));
    CHECK_THROWS_AS(c_iou({}), ValidationError);
}

TEST_CASE("m_iou averages per-class ratios of pooled counts") {
    const auto a = box_mask(4, 4, 0, 0, 2, 4);  // 8 px
    const auto b = box_mask(4, 4, 0, 0, 1, 4);  // 4 px
    std::vector<ClassMaskPair> pairs(2);
    pairs[0].pred = {{1, a}};
    pairs[0].gt = {{1, b}, {2, b}};
    pairs[1].pred = {{2, b}};
    pairs[1].gt = {{2, b}};
    // class 1: I=4, U=8; class 2: I=0+4, U=4+4; class 3 never appears.
    const std::vector<int> classes = {1, 2, 3};
    CHECK(m_iou(pairs, classes) == 0.5);
}

TEST_CASE("m_ahd grouping with crafted IoUs") {
    const auto gt = box_mask(4, 5, 0, 0, 4, 5);
    std::vector<EvalPair> pairs;
    for (int k : {11, 13, 19}) pairs.push_back(EvalPair::make(prefix_mask(4, 5, k), gt));
    CHECK(pairs[0].iou == 0.55);
    CHECK(pairs[1].iou == 0.65);
    CHECK(pairs[2].iou == 0.95);
    const auto rep = m_ahd(pairs);
    REQUIRE(rep.groups.size() == 5);
    const std::size_t want[] = {3, 2, 1, 1, 1};
    for (std::size_t g = 0; g < 5; ++g) {
        CHECK(rep.groups[g].count == want[g]);
        double sum = 0;
        std::size_t n = 0;
        for (const auto& p : pairs)
            if (p.iou >= rep.groups[g].threshold) {
                sum += *p.ahd;
                ++n;
            }
        CHECK(*rep.groups[g].mean_ahd == doctest::Approx(sum / static_cast<double>(n)).epsilon(1e-15));
    }
}

TEST_CASE("m_ahd threshold modes and empty groups") {
    const auto gt = box_mask(2, 5, 0, 0, 2, 5);
    std::vector<EvalPair> pairs = {EvalPair::make(prefix_mask(2, 5, 5), gt)};  // iou 0.5
    const std::vector<double> t = {0.5, 0.9};
    const auto inc = m_ahd(pairs, t, ThresholdMode::inclusive);
    const auto strict = m_ahd(pairs, t, ThresholdMode::strict_above);
    CHECK(inc.groups[0].count == 1);
    CHECK(strict.groups[0].count == 0);
    CHECK_FALSE(strict.groups[0].mean_ahd.has_value());
    CHECK_FALSE(inc.groups[1].mean_ahd.has_value());
}

TEST_CASE("m_ahd groups are nested") {
    Rng rng(3);
    std::vector<EvalPair> pairs;
    for (int i = 0; i < 40; ++i) pairs.push_back(EvalPair::make(random_mask(rng, 16, 16), random_mask(rng, 16, 16)));
    const auto rep = m_ahd(pairs);
    for (std::size_t g = 1; g < rep.groups.size(); ++g) CHECK(rep.groups[g].count <= rep.groups[g - 1].count);
}

TEST_CASE("ahd undefined when exactly one mask is empty") {
    const auto p = EvalPair::make(BinaryMask(8, 8), box_mask(8, 8, 1, 1, 3, 3));
    CHECK_FALSE(p.ahd.has_value());
    CHECK(p.iou == 0.0);
    const auto q = EvalPair::make(BinaryMask(8, 8), BinaryMask(8, 8));
    CHECK(q.ahd.has_value());
    CHECK(*q.ahd == 0.0);
}

}  // TEST_SUITE
