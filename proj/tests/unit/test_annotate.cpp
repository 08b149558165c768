#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>

#include "maskgen/annotate.hpp"
#include "maskgen/error.hpp"
#include "support.hpp"

using namespace maskgen;
using namespace maskgen::annotate;
using testsupport::box_mask;

namespace {

LabeledDetection det(std::string label, Box box, double conf = 0.9) {
    return {"img", std::move(label), box, conf};
}

struct FixtureCase {
    std::string name;
    std::vector<LabeledDetection> dets;
    std::vector<MaskCandidate> cands;
    std::multiset<std::pair<std::string, std::string>> accepted;  // (label, mask_id)
    std::multiset<std::pair<std::string, std::string>> rejected;  // (label, reason)
};

std::vector<FixtureCase> load_fixture() {
    std::ifstream in(std::string(MASKGEN_FIXTURES) + "/annotate_filter_cases.json");
    REQUIRE(in);
    const auto j = nlohmann::json::parse(in);
    const int h = j["canvas"]["height"], w = j["canvas"]["width"];
    std::vector<FixtureCase> out;
    for (const auto& c : j["cases"]) {
        FixtureCase fc;
        fc.name = c["name"].get<std::string>();
        for (const auto& d : c["detections"]) fc.dets.push_back(detection_from_json(d));
        for (const auto& m : c["candidates"]) {
            const auto b = m["box"].get<std::vector<int>>();
            fc.cands.push_back(MaskCandidate::from_mask(m["id"].get<std::string>(), box_mask(h, w, b[1], b[0], b[3], b[2])));
        }
        for (const auto& a : c["expect"]["accepted"]) fc.accepted.emplace(a["label"].get<std::string>(), a["mask_id"].get<std::string>());
        for (const auto& r : c["expect"]["rejected"]) fc.rejected.emplace(r["label"].get<std::string>(), r["reason"].get<std::string>());
        out.push_back(std::move(fc));
    }
    return out;
}

// Counts verify requests on their way to the stub.
class CountingClient : public CaptionClient {
public:
    std::string ask(const CaptionRequest& r) override {
        if (r.kind == RequestKind::verify) ++verifies;
        return stub.ask(r);
    }
    StubClient stub;
    int verifies = 0;
};

// Answers "yes" to every verification.
class AgreeableClient : public CaptionClient {
public:
    std::string ask(const CaptionRequest& r) override {
        if (r.kind == RequestKind::verify) return "Yes, it does.";
        return "the " + r.text;
    }
};

class FailingClient : public CaptionClient {
public:
    std::string ask(const CaptionRequest&) override { throw ClientError("endpoint down"); }
};

}  // namespace

TEST_SUITE("annotate") {

TEST_CASE("filter fixtures") {
    const auto cases = load_fixture();
    REQUIRE(cases.size() == 12);
    for (const auto& c : cases) {
        INFO(c.name);
        const auto res = run_label_pipeline(c.dets, c.cands);
        std::multiset<std::pair<std::string, std::string>> acc, rej;
        for (const auto& i : res.instances) acc.insert({i.label, i.mask_id});
        for (const auto& r : res.rejected) rej.insert({r.label, std::string(to_string(r.reason))});
        CHECK(acc == c.accepted);
        CHECK(rej == c.rejected);
        // Feeding the accepted detections back in reproduces the same output.
        std::vector<LabeledDetection> again;
        for (const auto& i : res.instances) again.push_back(*i.detection);
        const auto res2 = run_label_pipeline(again, c.cands);
        REQUIRE(res2.instances.size() == res.instances.size());
        CHECK(res2.rejected.empty());
        for (std::size_t k = 0; k < res.instances.size(); ++k) {
            CHECK(res2.instances[k].mask_id == res.instances[k].mask_id);
            CHECK(*res2.instances[k].detection == *res.instances[k].detection);
        }
    }
}

TEST_CASE("box geometry") {
    CHECK(box_iou({0, 0, 10, 10}, {5, 0, 15, 10}) == doctest::Approx(50.0 / 150.0));
    CHECK(box_iou({0, 0, 10, 10}, {20, 20, 30, 30}) == 0.0);
    CHECK(Box{0, 0, 10, 10}.encloses({0, 0, 10, 10}));
    CHECK_FALSE(Box{0, 0, 10, 10}.encloses({-1, 0, 5, 5}));
    const auto c = MaskCandidate::from_mask("m", box_mask(20, 20, 3, 4, 7, 9));
    CHECK(c.bbox == Box{4, 3, 9, 7});
    CHECK_THROWS_AS(MaskCandidate::from_mask("e", BinaryMask(4, 4)), ValidationError);
}

TEST_CASE("grouping keeps order and duplicates") {
    const std::vector<LabeledDetection> d = {det("a", {0, 0, 1, 1}), det("b", {0, 0, 2, 2}), det("a", {0, 0, 1, 1})};
    const auto g = group_by_label(d);
    CHECK(g.at("a").size() == 2);
    CHECK(g.at("b").size() == 1);
    CHECK(group_by_label({}).empty());
    const auto kept = filter_overpopulated(g);
    CHECK(kept.at("a") == g.at("a"));
}

TEST_CASE("nested rule variants") {
    const std::vector<LabeledDetection> inner = {det("x", {0, 0, 100, 10}), det("x", {0, 0, 50, 10})};
    CHECK(filter_nested(inner).size() == 2);
    NestedOptions ios{NestedRule::intersection_over_smaller, 0.97};
    const auto kept = filter_nested(inner, ios);
    REQUIRE(kept.size() == 1);
    CHECK(kept[0].box.x1 == 100);
    // Equal boxes: neither is strictly smaller, both stay.
    const std::vector<LabeledDetection> same = {det("x", {0, 0, 10, 10}), det("x", {0, 0, 10, 10})};
    CHECK(filter_nested(same).size() == 2);
    // Removals are decided against the original set: C inside B inside A
    // removes both inner boxes even though B itself goes.
    const std::vector<LabeledDetection> chain = {det("x", {0, 0, 1000, 10}), det("x", {1, 0, 999, 10}),
                                                 det("x", {2, 0, 998, 10})};
    CHECK(filter_nested(chain).size() == 1);
}

TEST_CASE("matching is one-to-one and greedy by IoU") {
    const std::vector<MaskCandidate> cands = {MaskCandidate::from_mask("m0", box_mask(50, 50, 0, 0, 10, 10)),
                                              MaskCandidate::from_mask("m1", box_mask(50, 50, 0, 0, 10, 12))};
    const std::vector<LabeledDetection> g = {det("a", {0, 0, 12, 10}), det("a", {0, 0, 10, 10})};
    const auto out = match_masks(g, cands);
    REQUIRE_FALSE(out.rejection.has_value());
    CHECK(out.matches[0].mask_id == "m1");
    CHECK(out.matches[1].mask_id == "m0");
    const std::vector<LabeledDetection> three = {g[0], g[1], det("a", {30, 30, 40, 40})};
    CHECK(match_masks(three, cands).rejection == Reason::unmatched_box);
}

TEST_CASE("semantic merge is a pixelwise union") {
    const auto m1 = box_mask(20, 20, 0, 0, 5, 5), m2 = box_mask(20, 20, 3, 3, 8, 8), m3 = box_mask(20, 20, 15, 15, 18, 18);
    const std::vector<MaskCandidate> cands = {MaskCandidate::from_mask("a", m1), MaskCandidate::from_mask("b", m2),
                                              MaskCandidate::from_mask("c", m3)};
    const auto inst = [](std::string id, std::string label) {
        AnnotatedInstance i;
        i.mask_id = std::move(id);
        i.label = std::move(label);
        return i;
    };
    std::vector<AnnotatedInstance> insts = {inst("a", "dog"), inst("b", "dog"), inst("c", "cat")};
    const auto sem = merge_semantic(insts, cands);
    REQUIRE(sem.size() == 2);
    CHECK(sem[0].label == "cat");
    CHECK(sem[0].mask == m3);
    CHECK(sem[1].mask.count() == 25 + 25 - 4);
    CHECK(sem[1].members == std::vector<std::string>{"a", "b"});
    std::reverse(insts.begin(), insts.end());
    CHECK(merge_semantic(insts, cands)[1].mask == sem[1].mask);
    const std::vector<MaskCandidate> odd = {MaskCandidate::from_mask("a", m1), MaskCandidate::from_mask("b", box_mask(10, 10, 0, 0, 2, 2))};
    const std::vector<AnnotatedInstance> two = {inst("a", "dog"), inst("b", "dog")};
    CHECK_THROWS_AS(merge_semantic(two, odd), ValidationError);
}

TEST_CASE("contour rendering") {
    const RgbImage img(40, 40, {10, 10, 10});
    BinaryMask dot(40, 40);
    dot.set(20, 20, true);
    const auto plain = render_contour(img, dot, kGenerateColor, 0);
    CHECK(plain.at(20, 20) == Rgb{0, 255, 0});
    CHECK(plain.at(20, 21) == Rgb{10, 10, 10});
    const int r = 5;
    const auto dil = dilate_disc(dot, r);
    long expected = 0;
    for (int y = 0; y < 40; ++y)
        for (int x = 0; x < 40; ++x) {
            const bool in = (y - 20) * (y - 20) + (x - 20) * (x - 20) <= r * r;
            expected += in;
            CHECK(dil.at(y, x) == (in ? 1 : 0));
        }
    CHECK(dil.count() == expected);
    const auto ring = render_contour(img, dot, kVerifyColor, r);
    CHECK(ring.at(20, 25) == Rgb{255, 128, 0});
    CHECK(ring.at(20, 20) == Rgb{10, 10, 10});
    CHECK(ring.at(20, 26) == Rgb{10, 10, 10});
    CHECK_THROWS_AS(render_contour(img, BinaryMask(10, 10)), ValidationError);
}

TEST_CASE("referring expressions: verification only for repeated labels") {
    RgbImage img(90, 90, {0, 0, 0});
    const auto left = box_mask(90, 90, 40, 2, 50, 12), right = box_mask(90, 90, 40, 78, 50, 88),
               top = box_mask(90, 90, 2, 40, 12, 50);
    const std::vector<MaskCandidate> cands = {MaskCandidate::from_mask("l", left), MaskCandidate::from_mask("r", right),
                                              MaskCandidate::from_mask("t", top)};
    const auto inst = [](std::string id, std::string label) {
        AnnotatedInstance i;
        i.image = "img";
        i.mask_id = std::move(id);
        i.label = std::move(label);
        return i;
    };
    const std::vector<AnnotatedInstance> insts = {inst("l", "ball"), inst("r", "ball"), inst("t", "lamp")};
    CountingClient client;
    ReferringOptions opt;
    opt.dilation = 3;
    const auto res = run_referring_pipeline(img, insts, cands, client, opt);
    CHECK(client.verifies == 2);
    CHECK(res.rejected.empty());
    std::map<std::string, int> kinds;
    for (const auto& i : res.instances) ++kinds[std::string(to_string(i.kind))];
    CHECK(kinds["referring"] == 3);
    CHECK(kinds["reasoning"] == 1);
    CHECK(res.instances[0].expression == "the ball at the left");

    AgreeableClient yes;
    const auto amb = run_referring_pipeline(img, insts, cands, yes, opt);
    CHECK(amb.rejected.size() == 2);
    CHECK(amb.rejected[0].reason == Reason::ambiguous_expression);
    opt.verify = false;
    CHECK(run_referring_pipeline(img, insts, cands, yes, opt).rejected.empty());

    FailingClient down;
    const auto failed = run_referring_pipeline(img, insts, cands, down, opt);
    CHECK(failed.instances.empty());
    CHECK(failed.rejected.size() == 3);
    CHECK(failed.rejected[2].reason == Reason::client_failure);
}

TEST_CASE("replayed transcripts reproduce the recorded output") {
    RgbImage img(64, 64, {0, 0, 0});
    const std::vector<MaskCandidate> cands = {MaskCandidate::from_mask("a", box_mask(64, 64, 5, 5, 15, 15)),
                                              MaskCandidate::from_mask("b", box_mask(64, 64, 45, 45, 60, 60))};
    std::vector<AnnotatedInstance> insts(2);
    insts[0].mask_id = "a";
    insts[1].mask_id = "b";
    insts[0].label = insts[1].label = "cup";
    StubClient stub;
    RecordingClient rec(stub);
    const auto first = run_referring_pipeline(img, insts, cands, rec);
    const auto path = std::filesystem::temp_directory_path() / "maskgen_transcript.json";
    rec.save(path);
    auto replay = ReplayClient::from_file(path);
    const auto second = run_referring_pipeline(img, insts, cands, replay);
    REQUIRE(first.instances.size() == second.instances.size());
    for (std::size_t i = 0; i < first.instances.size(); ++i)
        CHECK(to_json(first.instances[i]).dump() == to_json(second.instances[i]).dump());
    // A request that was never recorded is a client failure.
    RgbImage other(64, 64, {1, 1, 1});
    const auto miss = run_referring_pipeline(other, insts, cands, replay);
    CHECK(miss.rejected.size() == 2);
    CHECK(miss.rejected[0].reason == Reason::client_failure);
}

TEST_CASE("request keys cover the image bytes") {
    RgbImage a(8, 8), b(8, 8);
    b.set(0, 0, {1, 0, 0});
    const CaptionRequest ra{RequestKind::generate, "cup", &a}, rb{RequestKind::generate, "cup", &b},
        rc{RequestKind::verify, "cup", &a};
    CHECK(ra.key() != rb.key());
    CHECK(ra.key() != rc.key());
    CHECK(ra.key() == CaptionRequest{RequestKind::generate, "cup", &a}.key());
}

}  // TEST_SUITE
