#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "maskgen/image.hpp"

namespace maskgen {

enum class ShapeKind { circle, rectangle, triangle };
enum class ShapeColor { red, green, blue, yellow };
enum class Task { semantic, referring };

std::string_view to_string(ShapeKind kind);
std::string_view to_string(ShapeColor color);
std::string_view to_string(Task task);
Task parse_task(std::string_view s);
Rgb color_rgb(ShapeColor color);

/// A filled shape. Circles use (center, radius); rectangles use the
/// half-open pixel box [x0,x1) x [y0,y1); triangles use three vertices.
struct Shape {
    ShapeKind kind = ShapeKind::circle;
    ShapeColor color = ShapeColor::red;
    double cx = 0, cy = 0, radius = 0;
    int x0 = 0, y0 = 0, x1 = 0, y1 = 0;
    std::array<std::array<double, 2>, 3> vertices{};  // (x, y)

    /// Hard-edged point-in-shape test at the pixel center (x + 0.5, y + 0.5).
    bool covers(int x, int y) const;
};

inline constexpr int kCanvasSize = 64;
inline constexpr int kMaxShapes = 6;
inline constexpr int kMaxSceneRetries = 16;

struct SceneSpec {
    std::uint64_t seed = 0;
    int height = kCanvasSize;
    int width = kCanvasSize;
    std::vector<Shape> shapes;  // back to front
    Task task = Task::referring;
    /// Referring: index of the referent. Semantic: any shape of the named class.
    int target = 0;

    /// Throws ValidationError when geometry leaves the canvas, there are more
    /// than 6 shapes, or a referring scene has fewer than 2.
    void validate() const;
};

struct Sample {
    RgbImage image;
    std::string instruction;
    BinaryMask mask;
    std::string phrase;
    int template_id = 0;

    friend bool operator==(const Sample&, const Sample&) = default;
};

inline constexpr int kTemplateCount = 10;
inline constexpr std::string_view kTemplateSlot = "{object name}";

/// The fixed instruction templates. Template 0 is the canonical one.
std::span<const std::string_view> instruction_templates();
std::string fill_template(int id, std::string_view object_name);

/// Per-pixel index of the front-most shape covering it, or -1.
std::vector<int> ownership(const SceneSpec& spec);

/// Phrase `[attribute] <color> <kind>` that picks out the referent among all
/// shapes in the scene, or nullopt when no attribute disambiguates it.
std::optional<std::string> referent_phrase(const SceneSpec& spec);

/// Draws a random scene from `seed`. Each retry draws from a sub-stream of the
/// seed; after 16 unresolvable draws a ValidationError is raised.
SceneSpec make_scene(std::uint64_t seed, Task task);

Sample generate_sample(const SceneSpec& spec);

/// Closed word list used for instructions. Ids are offset by `text_base`.
class TextVocab {
public:
    TextVocab();

    std::size_t size() const { return words_.size(); }
    std::span<const std::string> words() const { return words_; }
    std::optional<int> find(std::string_view word) const;

    /// Lowercases, splits punctuation (. , ? !) into their own words, then
    /// splits on whitespace. Throws ValidationError naming unknown words.
    std::vector<std::int32_t> tokenize(std::string_view text, std::int32_t text_base) const;
    std::string detokenize(std::span<const std::int32_t> ids, std::int32_t text_base) const;

    /// The form tokenize/detokenize round-trips to.
    static std::string normalize(std::string_view text);

private:
    std::vector<std::string> words_;
    std::unordered_map<std::string, int> index_;
};

}  // namespace maskgen
