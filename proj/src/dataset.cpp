#include "maskgen/dataset.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <sstream>

#include "maskgen/error.hpp"
#include "maskgen/rng.hpp"

namespace maskgen {

namespace {

constexpr Rgb kBackground = {32, 32, 32};

// Template 0 is the canonical example instruction; 1-9 are in-repo
// paraphrases.
constexpr std::array<std::string_view, kTemplateCount> kTemplates = {
    "Produce a segmentation mask for the {object name}.",
    "Segment the {object name}.",
    "Please segment the {object name} in this image.",
    "Generate the mask of the {object name}.",
    "Output a segmentation mask for the {object name}.",
    "Where is the {object name}? Produce its mask.",
    "Highlight the {object name} with a mask.",
    "Create a mask that covers the {object name}.",
    "Find the {object name} and segment it.",
    "Show me the mask for the {object name}.",
};

// Id order is part of the checkpoint contract: append only.
constexpr std::array<std::string_view, 44> kWords = {
    "produce", "a",    "segmentation", "mask",  "for",       "the",    ".",      "segment",
    "please",  "in",   "this",         "image", "generate",  "of",     "output", "where",
    "is",      "?",    "its",          "highlight", "with",  "create", "that",   "covers",
    "find",    "and",  "it",           "show",  "me",        ",",      "!",      "red",
    "green",   "blue", "yellow",       "circle", "rectangle", "triangle", "leftmost",
    "rightmost", "topmost", "bottommost", "largest", "smallest",
};

enum class Attribute { leftmost, rightmost, topmost, bottommost, largest, smallest };
constexpr std::array<std::string_view, 6> kAttributeNames = {
    "leftmost", "rightmost", "topmost", "bottommost", "largest", "smallest"};

// Minimum centroid gap (pixels) and area ratio for an attribute to count as
// unambiguous.
constexpr double kPositionMargin = 2.0;
constexpr double kAreaRatio = 1.2;

struct PixelStats {
    double area = 0;
    double cx = 0;
    double cy = 0;
};

std::vector<PixelStats> visible_stats(const SceneSpec& spec, const std::vector<int>& owner) {
    std::vector<PixelStats> stats(spec.shapes.size());
    for (int y = 0; y < spec.height; ++y) {
        for (int x = 0; x < spec.width; ++x) {
            const int o = owner[static_cast<std::size_t>(y) * spec.width + x];
            if (o < 0) continue;
            auto& s = stats[static_cast<std::size_t>(o)];
            s.area += 1;
            s.cx += x + 0.5;
            s.cy += y + 0.5;
        }
    }
    for (auto& s : stats) {
        if (s.area > 0) {
            s.cx /= s.area;
            s.cy /= s.area;
        }
    }
    return stats;
}

bool same_class(const Shape& a, const Shape& b) { return a.kind == b.kind && a.color == b.color; }

double edge(const std::array<double, 2>& a, const std::array<double, 2>& b, double px, double py) {
    return (b[0] - a[0]) * (py - a[1]) - (b[1] - a[1]) * (px - a[0]);
}

struct Box {
    int x0, y0, x1, y1;
};

Box bounds(const Shape& s) {
    switch (s.kind) {
        case ShapeKind::circle:
            return {static_cast<int>(std::floor(s.cx - s.radius)), static_cast<int>(std::floor(s.cy - s.radius)),
                    static_cast<int>(std::ceil(s.cx + s.radius)), static_cast<int>(std::ceil(s.cy + s.radius))};
        case ShapeKind::rectangle:
            return {s.x0, s.y0, s.x1, s.y1};
        case ShapeKind::triangle: {
            double x0 = 1e9, y0 = 1e9, x1 = -1e9, y1 = -1e9;
            for (const auto& v : s.vertices) {
                x0 = std::min(x0, v[0]);
                y0 = std::min(y0, v[1]);
                x1 = std::max(x1, v[0]);
                y1 = std::max(y1, v[1]);
            }
            return {static_cast<int>(std::floor(x0)), static_cast<int>(std::floor(y0)),
                    static_cast<int>(std::ceil(x1)), static_cast<int>(std::ceil(y1))};
        }
    }
    return {0, 0, 0, 0};
}

Shape random_shape(Rng& rng, int width, int height) {
    Shape s;
    s.kind = static_cast<ShapeKind>(rng.below(3));
    s.color = static_cast<ShapeColor>(rng.below(4));
    switch (s.kind) {
        case ShapeKind::circle: {
            s.radius = rng.range(10, 20);
            const int r = static_cast<int>(s.radius);
            s.cx = rng.range(r, width - r);
            s.cy = rng.range(r, height - r);
            break;
        }
        case ShapeKind::rectangle: {
            const int w = rng.range(20, 40), h = rng.range(20, 40);
            s.x0 = rng.range(0, width - w);
            s.y0 = rng.range(0, height - h);
            s.x1 = s.x0 + w;
            s.y1 = s.y0 + h;
            break;
        }
        case ShapeKind::triangle: {
            const int w = rng.range(22, 40), h = rng.range(22, 40);
            const int x0 = rng.range(0, width - w), y0 = rng.range(0, height - h);
            const double apex = x0 + rng.range(w / 4, 3 * w / 4);
            if (rng.below(2) == 0) {
                s.vertices = {{{apex, double(y0)}, {double(x0), double(y0 + h)}, {double(x0 + w), double(y0 + h)}}};
            } else {
                s.vertices = {{{double(x0), double(y0)}, {double(x0 + w), double(y0)}, {apex, double(y0 + h)}}};
            }
            break;
        }
    }
    return s;
}

bool disjoint(const Box& a, const Box& b) {
    constexpr int gap = 1;
    return a.x1 + gap <= b.x0 || b.x1 + gap <= a.x0 || a.y1 + gap <= b.y0 || b.y1 + gap <= a.y0;
}

SceneSpec draw_scene(Rng& rng, std::uint64_t seed, Task task) {
    SceneSpec spec;
    spec.seed = seed;
    spec.task = task;
    const int wanted = task == Task::referring ? rng.range(2, 4) : rng.range(1, 4);
    std::vector<Box> boxes;
    for (int attempt = 0; attempt < 60 && static_cast<int>(spec.shapes.size()) < wanted; ++attempt) {
        auto s = random_shape(rng, spec.width, spec.height);
        const auto b = bounds(s);
        if (std::all_of(boxes.begin(), boxes.end(), [&](const Box& o) { return disjoint(b, o); })) {
            spec.shapes.push_back(s);
            boxes.push_back(b);
        }
    }
    if (spec.shapes.empty()) return spec;
    spec.target = static_cast<int>(rng.below(spec.shapes.size()));
    // Half of the multi-shape scenes get a same-class distractor so that
    // attributes (referring) or unions (semantic) are exercised.
    if (spec.shapes.size() >= 2 && rng.below(2) == 0) {
        auto other = static_cast<int>(rng.below(spec.shapes.size() - 1));
        if (other >= spec.target) ++other;
        const auto& t = spec.shapes[static_cast<std::size_t>(spec.target)];
        auto& o = spec.shapes[static_cast<std::size_t>(other)];
        if (o.kind == t.kind) o.color = t.color;
    }
    return spec;
}

}  // namespace

std::string_view to_string(ShapeKind kind) {
    switch (kind) {
        case ShapeKind::circle: return "circle";
        case ShapeKind::rectangle: return "rectangle";
        case ShapeKind::triangle: return "triangle";
    }
    return "?";
}

std::string_view to_string(ShapeColor color) {
    switch (color) {
        case ShapeColor::red: return "red";
        case ShapeColor::green: return "green";
        case ShapeColor::blue: return "blue";
        case ShapeColor::yellow: return "yellow";
    }
    return "?";
}

std::string_view to_string(Task task) { return task == Task::semantic ? "semantic" : "referring"; }

Task parse_task(std::string_view s) {
    if (s == "semantic") return Task::semantic;
    if (s == "referring") return Task::referring;
    throw ValidationError("unknown task '" + std::string(s) + "' (expected semantic|referring)");
}

Rgb color_rgb(ShapeColor color) {
    switch (color) {
        case ShapeColor::red: return {230, 40, 40};
        case ShapeColor::green: return {40, 200, 60};
        case ShapeColor::blue: return {50, 90, 230};
        case ShapeColor::yellow: return {235, 215, 50};
    }
    return {0, 0, 0};
}

bool Shape::covers(int x, int y) const {
    const double px = x + 0.5, py = y + 0.5;
    switch (kind) {
        case ShapeKind::circle:
            return (px - cx) * (px - cx) + (py - cy) * (py - cy) <= radius * radius;
        case ShapeKind::rectangle:
            return x >= x0 && x < x1 && y >= y0 && y < y1;
        case ShapeKind::triangle: {
            const double d0 = edge(vertices[0], vertices[1], px, py);
            const double d1 = edge(vertices[1], vertices[2], px, py);
            const double d2 = edge(vertices[2], vertices[0], px, py);
            const bool has_neg = d0 < 0 || d1 < 0 || d2 < 0;
            const bool has_pos = d0 > 0 || d1 > 0 || d2 > 0;
            return !(has_neg && has_pos);
        }
    }
    return false;
}

void SceneSpec::validate() const {
    if (height <= 0 || width <= 0) throw ValidationError("scene canvas must be positive");
    if (shapes.empty()) throw ValidationError("scene has no shapes");
    if (shapes.size() > static_cast<std::size_t>(kMaxShapes)) {
        throw ValidationError("scene has more than 6 shapes");
    }
    if (task == Task::referring && shapes.size() < 2) {
        throw ValidationError("referring scenes need at least 2 shapes");
    }
    if (target < 0 || target >= static_cast<int>(shapes.size())) {
        throw ValidationError("scene target index out of range");
    }
    for (const auto& s : shapes) {
        bool inside = true;
        switch (s.kind) {
            case ShapeKind::circle:
                inside = s.radius > 0 && s.cx - s.radius >= 0 && s.cy - s.radius >= 0 &&
                         s.cx + s.radius <= width && s.cy + s.radius <= height;
                break;
            case ShapeKind::rectangle:
                inside = s.x0 >= 0 && s.y0 >= 0 && s.x1 <= width && s.y1 <= height && s.x0 < s.x1 &&
                         s.y0 < s.y1;
                break;
            case ShapeKind::triangle:
                for (const auto& v : s.vertices) {
                    inside = inside && v[0] >= 0 && v[1] >= 0 && v[0] <= width && v[1] <= height;
                }
                break;
        }
        if (!inside) throw ValidationError("shape geometry leaves the canvas");
    }
}

std::span<const std::string_view> instruction_templates() { return kTemplates; }

std::string fill_template(int id, std::string_view object_name) {
    if (id < 0 || id >= kTemplateCount) throw ValidationError("template id must be in [0,10)");
    std::string out(kTemplates[static_cast<std::size_t>(id)]);
    const auto pos = out.find(kTemplateSlot);
    out.replace(pos, kTemplateSlot.size(), object_name);
    return out;
}

std::vector<int> ownership(const SceneSpec& spec) {
    std::vector<int> owner(static_cast<std::size_t>(spec.height) * spec.width, -1);
    for (std::size_t i = 0; i < spec.shapes.size(); ++i) {
        const auto& s = spec.shapes[i];
        const auto b = bounds(s);
        for (int y = std::max(0, b.y0); y < std::min(spec.height, b.y1 + 1); ++y) {
            for (int x = std::max(0, b.x0); x < std::min(spec.width, b.x1 + 1); ++x) {
                if (s.covers(x, y)) owner[static_cast<std::size_t>(y) * spec.width + x] = static_cast<int>(i);
            }
        }
    }
    return owner;
}

std::optional<std::string> referent_phrase(const SceneSpec& spec) {
    const auto& ref = spec.shapes.at(static_cast<std::size_t>(spec.target));
    const std::string base = std::string(to_string(ref.color)) + " " + std::string(to_string(ref.kind));
    std::vector<std::size_t> rivals;
    for (std::size_t i = 0; i < spec.shapes.size(); ++i) {
        if (static_cast<int>(i) != spec.target && same_class(spec.shapes[i], ref)) rivals.push_back(i);
    }
    if (rivals.empty()) return base;

    const auto stats = visible_stats(spec, ownership(spec));
    const auto& me = stats[static_cast<std::size_t>(spec.target)];
    if (me.area == 0) return std::nullopt;
    const auto beats = [&](Attribute a, const PixelStats& other) {
        switch (a) {
            case Attribute::leftmost: return me.cx + kPositionMargin <= other.cx;
            case Attribute::rightmost: return me.cx >= other.cx + kPositionMargin;
            case Attribute::topmost: return me.cy + kPositionMargin <= other.cy;
            case Attribute::bottommost: return me.cy >= other.cy + kPositionMargin;
            case Attribute::largest: return me.area >= other.area * kAreaRatio;
            case Attribute::smallest: return me.area * kAreaRatio <= other.area;
        }
        return false;
    };
    for (std::size_t a = 0; a < kAttributeNames.size(); ++a) {
        const bool unique = std::all_of(rivals.begin(), rivals.end(), [&](std::size_t i) {
            return beats(static_cast<Attribute>(a), stats[i]);
        });
        if (unique) return std::string(kAttributeNames[a]) + " " + base;
    }
    return std::nullopt;
}

SceneSpec make_scene(std::uint64_t seed, Task task) {
    for (int retry = 0; retry < kMaxSceneRetries; ++retry) {
        Rng rng(derive_seed(seed, "scene/" + std::to_string(retry)));
        auto spec = draw_scene(rng, seed, task);
        if (spec.shapes.empty()) continue;
        if (task == Task::referring && (spec.shapes.size() < 2 || !referent_phrase(spec))) continue;
        spec.validate();
        return spec;
    }
    throw ValidationError("no valid scene for seed " + std::to_string(seed) + " after " +
                          std::to_string(kMaxSceneRetries) + " retries");
}

Sample generate_sample(const SceneSpec& spec) {
    spec.validate();
    const auto owner = ownership(spec);
    Sample out;
    out.image = RgbImage(spec.height, spec.width, kBackground);
    out.mask = BinaryMask(spec.height, spec.width);
    const auto& target = spec.shapes[static_cast<std::size_t>(spec.target)];
    for (int y = 0; y < spec.height; ++y) {
        for (int x = 0; x < spec.width; ++x) {
            const int o = owner[static_cast<std::size_t>(y) * spec.width + x];
            if (o < 0) continue;
            const auto& s = spec.shapes[static_cast<std::size_t>(o)];
            out.image.set(y, x, color_rgb(s.color));
            const bool fg = spec.task == Task::referring ? o == spec.target : same_class(s, target);
            out.mask.set(y, x, fg);
        }
    }
    if (spec.task == Task::referring) {
        auto phrase = referent_phrase(spec);
        if (!phrase) throw ValidationError("referent is not uniquely describable");
        out.phrase = *phrase;
    } else {
        out.phrase = std::string(to_string(target.color)) + " " + std::string(to_string(target.kind));
    }
    out.template_id = static_cast<int>(spec.seed % kTemplateCount);
    out.instruction = fill_template(out.template_id, out.phrase);
    return out;
}

TextVocab::TextVocab() {
    for (auto w : kWords) {
        index_.emplace(std::string(w), static_cast<int>(words_.size()));
        words_.emplace_back(w);
    }
}

std::optional<int> TextVocab::find(std::string_view word) const {
    const auto it = index_.find(std::string(word));
    if (it == index_.end()) return std::nullopt;
    return it->second;
}

std::string TextVocab::normalize(std::string_view text) {
    std::string spaced;
    for (char ch : text) {
        const char c = static_cast<char>(std::tolower(static_cast<unsigned char>(ch)));
        if (c == '.' || c == ',' || c == '?' || c == '!') {
            spaced += ' ';
            spaced += c;
            spaced += ' ';
        } else {
            spaced += c;
        }
    }
    std::istringstream in(spaced);
    std::string word, out;
    while (in >> word) {
        if (!out.empty()) out += ' ';
        out += word;
    }
    return out;
}

std::vector<std::int32_t> TextVocab::tokenize(std::string_view text, std::int32_t text_base) const {
    std::istringstream in(normalize(text));
    std::vector<std::int32_t> ids;
    std::vector<std::string> unknown;
    std::string word;
    while (in >> word) {
        if (const auto id = find(word)) {
            ids.push_back(text_base + *id);
        } else {
            unknown.push_back(word);
        }
    }
    if (!unknown.empty()) {
        std::string msg = "out-of-vocabulary words:";
        for (const auto& w : unknown) msg += " '" + w + "'";
        throw ValidationError(msg);
    }
    return ids;
}

std::string TextVocab::detokenize(std::span<const std::int32_t> ids, std::int32_t text_base) const {
    std::string out;
    for (auto id : ids) {
        const auto local = id - text_base;
        if (local < 0 || local >= static_cast<std::int32_t>(words_.size())) {
            throw ValidationError("token id " + std::to_string(id) + " is not a text token");
        }
        if (!out.empty()) out += ' ';
        out += words_[static_cast<std::size_t>(local)];
    }
    return out;
}

}  // namespace maskgen
