#include "maskgen/annotate.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <set>

#include "maskgen/error.hpp"
#include "maskgen/hash.hpp"
#include "maskgen/metrics.hpp"

namespace maskgen::annotate {

double box_iou(const Box& a, const Box& b) {
    const double iw = std::min(a.x1, b.x1) - std::max(a.x0, b.x0);
    const double ih = std::min(a.y1, b.y1) - std::max(a.y0, b.y0);
    if (iw <= 0 || ih <= 0) return 0.0;
    const double inter = iw * ih;
    return inter / (a.area() + b.area() - inter);
}

MaskCandidate MaskCandidate::from_mask(std::string mask_id, BinaryMask mask) {
    int r0 = mask.height(), r1 = -1, c0 = mask.width(), c1 = -1;
    for (int r = 0; r < mask.height(); ++r) {
        for (int c = 0; c < mask.width(); ++c) {
            if (mask.at(r, c) == 0) continue;
            r0 = std::min(r0, r);
            r1 = std::max(r1, r);
            c0 = std::min(c0, c);
            c1 = std::max(c1, c);
        }
    }
    if (r1 < 0) throw ValidationError("mask '" + mask_id + "' is empty");
    MaskCandidate m;
    m.mask_id = std::move(mask_id);
    m.mask = std::move(mask);
    m.bbox = {static_cast<double>(c0), static_cast<double>(r0), static_cast<double>(c1 + 1),
              static_cast<double>(r1 + 1)};
    return m;
}

std::string_view to_string(InstanceKind kind) {
    switch (kind) {
        case InstanceKind::instance: return "instance";
        case InstanceKind::semantic: return "semantic";
        case InstanceKind::referring: return "referring";
        case InstanceKind::reasoning: return "reasoning";
    }
    return "instance";
}

InstanceKind parse_instance_kind(std::string_view s) {
    for (auto k : {InstanceKind::instance, InstanceKind::semantic, InstanceKind::referring,
                   InstanceKind::reasoning}) {
        if (to_string(k) == s) return k;
    }
    throw ValidationError("unknown instance kind '" + std::string(s) + "'");
}

std::string_view to_string(Reason reason) {
    switch (reason) {
        case Reason::overpopulated: return "overpopulated";
        case Reason::nested: return "nested";
        case Reason::no_candidates: return "no_candidates";
        case Reason::unmatched_box: return "unmatched_box";
        case Reason::low_confidence: return "low_confidence";
        case Reason::low_iou: return "low_iou";
        case Reason::ambiguous_expression: return "ambiguous_expression";
        case Reason::client_failure: return "client_failure";
        case Reason::dimension_mismatch: return "dimension_mismatch";
    }
    return "unknown";
}

Groups group_by_label(std::span<const LabeledDetection> dets) {
    Groups g;
    for (const auto& d : dets) g[d.label].push_back(d);
    return g;
}

Groups filter_overpopulated(const Groups& groups, std::vector<Rejection>* rejected, std::size_t max_boxes) {
    Groups out;
    for (const auto& [label, boxes] : groups) {
        if (boxes.size() > max_boxes) {
            if (rejected != nullptr) {
                rejected->push_back({boxes.front().image, label, {}, Reason::overpopulated,
                                     std::to_string(boxes.size()) + " boxes"});
            }
            continue;
        }
        out.emplace(label, boxes);
    }
    return out;
}

std::vector<LabeledDetection> filter_nested(std::span<const LabeledDetection> group,
                                            const NestedOptions& options, std::vector<Rejection>* rejected) {
    std::vector<char> drop(group.size(), 0);
    for (std::size_t a = 0; a < group.size(); ++a) {
        const auto& A = group[a].box;
        for (std::size_t b = 0; b < group.size() && drop[a] == 0; ++b) {
            if (a == b) continue;
            const auto& B = group[b].box;
            if (!(A.area() < B.area())) continue;
            bool nested = false;
            if (options.rule == NestedRule::literal) {
                nested = B.encloses(A) && box_iou(A, B) > options.threshold;
            } else {
                const double iw = std::min(A.x1, B.x1) - std::max(A.x0, B.x0);
                const double ih = std::min(A.y1, B.y1) - std::max(A.y0, B.y0);
                const double inter = (iw > 0 && ih > 0) ? iw * ih : 0.0;
                nested = inter / A.area() > options.threshold;
            }
            if (nested) drop[a] = 1;
        }
    }
    std::vector<LabeledDetection> out;
    for (std::size_t i = 0; i < group.size(); ++i) {
        if (drop[i] == 0) {
            out.push_back(group[i]);
        } else if (rejected != nullptr) {
            rejected->push_back({group[i].image, group[i].label, {}, Reason::nested, "box " + std::to_string(i)});
        }
    }
    return out;
}

MatchOutcome match_masks(std::span<const LabeledDetection> group, std::span<const MaskCandidate> candidates,
                         const MatchOptions& options) {
    MatchOutcome out;
    if (group.empty()) return out;
    if (candidates.empty()) {
        out.rejection = Reason::no_candidates;
        return out;
    }
    struct Pair {
        double iou;
        std::size_t box, cand;
    };
    std::vector<Pair> pairs;
    for (std::size_t b = 0; b < group.size(); ++b) {
        for (std::size_t c = 0; c < candidates.size(); ++c) {
            pairs.push_back({box_iou(group[b].box, candidates[c].bbox), b, c});
        }
    }
    std::stable_sort(pairs.begin(), pairs.end(), [](const Pair& x, const Pair& y) { return x.iou > y.iou; });
    std::vector<long> box_to(group.size(), -1);
    std::vector<double> box_iou_v(group.size(), 0.0);
    std::vector<char> taken(candidates.size(), 0);
    for (const auto& p : pairs) {
        if (box_to[p.box] >= 0 || taken[p.cand] != 0) continue;
        box_to[p.box] = static_cast<long>(p.cand);
        box_iou_v[p.box] = p.iou;
        taken[p.cand] = 1;
    }
    double min_conf = 1.0, min_iou = 1.0;
    for (std::size_t b = 0; b < group.size(); ++b) {
        if (box_to[b] < 0) {
            out.rejection = Reason::unmatched_box;
            out.detail = "box " + std::to_string(b) + " has no free candidate";
            return out;
        }
        min_conf = std::min(min_conf, group[b].confidence);
        min_iou = std::min(min_iou, box_iou_v[b]);
    }
    const double iou_gate = group.size() == 1 ? options.single_box_min_iou : options.multi_box_min_iou;
    if (!(min_conf > options.min_confidence)) {
        out.rejection = Reason::low_confidence;
        out.detail = "min confidence " + std::to_string(min_conf);
        return out;
    }
    if (!(min_iou > iou_gate)) {
        out.rejection = Reason::low_iou;
        out.detail = "min IoU " + std::to_string(min_iou);
        return out;
    }
    for (std::size_t b = 0; b < group.size(); ++b) {
        out.matches.push_back({group[b], candidates[static_cast<std::size_t>(box_to[b])].mask_id, box_iou_v[b]});
    }
    return out;
}

LabelResult run_label_pipeline(std::span<const LabeledDetection> dets, std::span<const MaskCandidate> candidates,
                               const FilterOptions& options) {
    LabelResult res;
    const auto groups = filter_overpopulated(group_by_label(dets), &res.rejected, options.max_boxes);
    for (const auto& [label, boxes] : groups) {
        const auto kept = filter_nested(boxes, options.nested, &res.rejected);
        auto outcome = match_masks(kept, candidates, options.match);
        if (outcome.rejection) {
            res.rejected.push_back({kept.front().image, label, {}, *outcome.rejection, outcome.detail});
            continue;
        }
        for (auto& m : outcome.matches) {
            AnnotatedInstance inst;
            inst.image = m.detection.image;
            inst.mask_id = m.mask_id;
            inst.label = label;
            inst.kind = InstanceKind::instance;
            inst.detection = m.detection;
            inst.match_iou = m.iou;
            res.instances.push_back(std::move(inst));
        }
    }
    return res;
}

namespace {

const MaskCandidate& find_candidate(std::span<const MaskCandidate> candidates, const std::string& id) {
    for (const auto& c : candidates) {
        if (c.mask_id == id) return c;
    }
    throw ValidationError("unknown mask id '" + id + "'");
}

}  // namespace

std::vector<SemanticMask> merge_semantic(std::span<const AnnotatedInstance> instances,
                                         std::span<const MaskCandidate> candidates) {
    std::map<std::string, std::set<std::string>> members;
    for (const auto& inst : instances) {
        if (inst.kind == InstanceKind::instance) members[inst.label].insert(inst.mask_id);
    }
    std::vector<SemanticMask> out;
    for (const auto& [label, ids] : members) {
        SemanticMask s;
        s.label = label;
        for (const auto& id : ids) {
            const auto& m = find_candidate(candidates, id).mask;
            if (s.members.empty()) {
                s.mask = BinaryMask(m.height(), m.width());
            } else if (!s.mask.same_shape(m)) {
                throw ValidationError("mask '" + id + "' differs in size from the rest of label '" + label + "'");
            }
            for (int r = 0; r < m.height(); ++r) {
                for (int c = 0; c < m.width(); ++c) {
                    if (m.at(r, c) != 0) s.mask.set(r, c, 1);
                }
            }
            s.members.push_back(id);
        }
        out.push_back(std::move(s));
    }
    return out;
}

BinaryMask dilate_disc(const BinaryMask& mask, int radius) {
    if (radius < 0) throw ValidationError("dilation radius must be non-negative");
    if (radius == 0) return mask;
    std::vector<std::pair<int, int>> offsets;
    for (int dy = -radius; dy <= radius; ++dy) {
        for (int dx = -radius; dx <= radius; ++dx) {
            if (dx * dx + dy * dy <= radius * radius) offsets.emplace_back(dy, dx);
        }
    }
    BinaryMask out(mask.height(), mask.width());
    for (int r = 0; r < mask.height(); ++r) {
        for (int c = 0; c < mask.width(); ++c) {
            if (mask.at(r, c) == 0) continue;
            for (const auto& [dy, dx] : offsets) {
                const int rr = r + dy, cc = c + dx;
                if (rr >= 0 && rr < mask.height() && cc >= 0 && cc < mask.width()) out.set(rr, cc, 1);
            }
        }
    }
    return out;
}

RgbImage render_contour(const RgbImage& image, const BinaryMask& mask, Rgb color, int dilation) {
    if (image.height() != mask.height() || image.width() != mask.width()) {
        throw ValidationError("image and mask sizes differ");
    }
    const auto grown = dilate_disc(mask, dilation);
    RgbImage out = image;
    for (const auto& p : boundary(grown, Connectivity::four).points) out.set(p.row, p.col, color);
    return out;
}

std::string_view to_string(RequestKind kind) {
    switch (kind) {
        case RequestKind::generate: return "generate";
        case RequestKind::verify: return "verify";
        case RequestKind::reason: return "reason";
    }
    return "generate";
}

std::string CaptionRequest::key() const {
    Sha256 h;
    h.field(to_string(kind)).field(text);
    if (image != nullptr) {
        h.field(std::to_string(image->height()) + "x" + std::to_string(image->width()));
        h.update(std::span<const unsigned char>(image->data().data(), image->data().size()));
    }
    return h.hex();
}

ReplayClient::ReplayClient(const nlohmann::json& transcript) {
    if (!transcript.is_array()) throw ValidationError("transcript must be a JSON list");
    for (const auto& e : transcript) {
        try {
            answers_[{e.at("kind").get<std::string>(), e.at("key").get<std::string>()}] =
                e.at("response").get<std::string>();
        } catch (const nlohmann::json::exception& ex) {
            throw ValidationError(std::string("bad transcript entry: ") + ex.what());
        }
    }
}

ReplayClient ReplayClient::from_file(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ValidationError("cannot read transcript " + path.string());
    try {
        return ReplayClient(nlohmann::json::parse(in));
    } catch (const nlohmann::json::parse_error& e) {
        throw ValidationError("transcript " + path.string() + ": " + e.what());
    }
}

std::string ReplayClient::ask(const CaptionRequest& request) {
    const auto it = answers_.find({std::string(to_string(request.kind)), request.key()});
    if (it == answers_.end()) {
        throw ClientError("no recorded " + std::string(to_string(request.kind)) + " answer for '" +
                          request.text + "'");
    }
    return it->second;
}

namespace {

// "top left", "middle", "bottom right", ... for the centroid of `color`.
std::optional<std::string> locate(const RgbImage& image, Rgb color) {
    double sr = 0, sc = 0;
    long n = 0;
    for (int r = 0; r < image.height(); ++r) {
        for (int c = 0; c < image.width(); ++c) {
            if (image.at(r, c) == color) {
                sr += r;
                sc += c;
                ++n;
            }
        }
    }
    if (n == 0) return std::nullopt;
    const auto third = [](double v, int size, const char* lo, const char* mid, const char* hi) {
        const double f = (v + 0.5) / size;
        return std::string(f < 1.0 / 3.0 ? lo : f < 2.0 / 3.0 ? mid : hi);
    };
    const auto v = third(sr / n, image.height(), "top", "middle", "bottom");
    const auto h = third(sc / n, image.width(), "left", "center", "right");
    if (v == "middle" && h == "center") return std::string("middle");
    if (h == "center") return v;
    if (v == "middle") return h;
    return v + " " + h;
}

}  // namespace

std::string StubClient::ask(const CaptionRequest& request) {
    if (request.image == nullptr) throw ClientError("request without an image");
    const Rgb color = request.kind == RequestKind::verify ? kVerifyColor : kGenerateColor;
    const auto where = locate(*request.image, color);
    if (!where) throw ClientError("no contour found in the image");
    switch (request.kind) {
        case RequestKind::generate: return "the " + request.text + " at the " + *where;
        case RequestKind::reason: return "the only " + request.text + " in the picture, at the " + *where;
        case RequestKind::verify: {
            const std::string suffix = "at the " + *where;
            const auto& e = request.text;
            return e.size() >= suffix.size() && e.compare(e.size() - suffix.size(), suffix.size(), suffix) == 0
                       ? "yes"
                       : "no";
        }
    }
    return "no";
}

std::string RecordingClient::ask(const CaptionRequest& request) {
    auto response = inner_.ask(request);
    const std::lock_guard lock(mutex_);
    transcript_.push_back({{"kind", to_string(request.kind)}, {"key", request.key()}, {"response", response}});
    return response;
}

void RecordingClient::save(const std::filesystem::path& path) const {
    std::ofstream out(path);
    if (!out) throw RuntimeFailure("cannot write " + path.string());
    out << transcript_.dump(2) << '\n';
}

std::unique_ptr<CaptionClient> make_client(std::string_view spec) {
    if (spec == "stub") return std::make_unique<StubClient>();
    if (spec.starts_with("replay:")) {
        return std::make_unique<ReplayClient>(ReplayClient::from_file(std::string(spec.substr(7))));
    }
    throw ValidationError("unknown client '" + std::string(spec) + "' (expected stub or replay:<file>)");
}

ReferringResult run_referring_pipeline(const RgbImage& image, std::span<const AnnotatedInstance> instances,
                                       std::span<const MaskCandidate> candidates, CaptionClient& client,
                                       const ReferringOptions& options) {
    ReferringResult res;
    std::map<std::string, std::vector<const AnnotatedInstance*>> by_label;
    for (const auto& inst : instances) {
        if (inst.kind == InstanceKind::instance) by_label[inst.label].push_back(&inst);
    }
    const auto is_yes = [](std::string s) {
        std::transform(s.begin(), s.end(), s.begin(), [](unsigned char c) { return std::tolower(c); });
        return s.rfind("yes", 0) == 0;
    };
    for (const auto& inst : instances) {
        if (inst.kind != InstanceKind::instance) continue;
        const auto& siblings = by_label[inst.label];
        const auto reject = [&](Reason why, std::string detail) {
            res.rejected.push_back({inst.image, inst.label, inst.mask_id, why, std::move(detail)});
        };
        try {
            const auto& mask = find_candidate(candidates, inst.mask_id).mask;
            if (mask.height() != image.height() || mask.width() != image.width()) {
                reject(Reason::dimension_mismatch, "mask and image sizes differ");
                continue;
            }
            const auto marked = render_contour(image, mask, options.generate_color, options.dilation);
            const auto expression = client.ask({RequestKind::generate, inst.label, &marked});
            bool ambiguous = false;
            if (options.verify && siblings.size() > 1) {
                for (const auto* other : siblings) {
                    if (other == &inst) continue;
                    const auto& om = find_candidate(candidates, other->mask_id).mask;
                    const auto probe = render_contour(image, om, options.verify_color, options.dilation);
                    if (is_yes(client.ask({RequestKind::verify, expression, &probe}))) {
                        ambiguous = true;
                        reject(Reason::ambiguous_expression, "also fits " + other->mask_id);
                        break;
                    }
                }
            }
            if (ambiguous) continue;
            AnnotatedInstance out = inst;
            out.kind = InstanceKind::referring;
            out.expression = expression;
            res.instances.push_back(out);
            if (siblings.size() == 1) {
                out.kind = InstanceKind::reasoning;
                out.expression = client.ask({RequestKind::reason, inst.label, &marked});
                res.instances.push_back(std::move(out));
            }
        } catch (const ClientError& e) {
            reject(Reason::client_failure, e.what());
        }
    }
    return res;
}

nlohmann::json to_json(const LabeledDetection& det) {
    return {{"image", det.image},
            {"label", det.label},
            {"box", {det.box.x0, det.box.y0, det.box.x1, det.box.y1}},
            {"confidence", det.confidence}};
}

LabeledDetection detection_from_json(const nlohmann::json& j) {
    LabeledDetection d;
    try {
        d.image = j.value("image", std::string());
        d.label = j.at("label").get<std::string>();
        const auto b = j.at("box").get<std::vector<double>>();
        if (b.size() != 4) throw ValidationError("box needs 4 numbers");
        d.box = {b[0], b[1], b[2], b[3]};
        d.confidence = j.at("confidence").get<double>();
    } catch (const nlohmann::json::exception& e) {
        throw ValidationError(std::string("bad detection record: ") + e.what());
    }
    if (!d.box.valid()) throw ValidationError("degenerate box for label '" + d.label + "'");
    if (!(d.confidence >= 0.0 && d.confidence <= 1.0)) {
        throw ValidationError("confidence outside [0,1] for label '" + d.label + "'");
    }
    return d;
}

nlohmann::json to_json(const AnnotatedInstance& inst) {
    nlohmann::json j = {{"image", inst.image}, {"mask_id", inst.mask_id}, {"label", inst.label},
                        {"kind", to_string(inst.kind)}};
    if (inst.expression) j["expression"] = *inst.expression;
    if (inst.detection) {
        const auto& b = inst.detection->box;
        j["box"] = {b.x0, b.y0, b.x1, b.y1};
        j["confidence"] = inst.detection->confidence;
    }
    if (inst.match_iou) j["iou"] = *inst.match_iou;
    return j;
}

nlohmann::json to_json(const Rejection& rej) {
    nlohmann::json j = {{"image", rej.image}, {"label", rej.label}, {"reason", to_string(rej.reason)}};
    if (!rej.mask_id.empty()) j["mask_id"] = rej.mask_id;
    if (!rej.detail.empty()) j["detail"] = rej.detail;
    return j;
}

}  // namespace maskgen::annotate
