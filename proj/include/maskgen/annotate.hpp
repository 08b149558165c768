#pragma once

#include <filesystem>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "maskgen/image.hpp"

namespace maskgen::annotate {

/// Half-open pixel box [x0, x1) x [y0, y1).
struct Box {
    double x0 = 0, y0 = 0, x1 = 0, y1 = 0;

    double area() const { return (x1 - x0) * (y1 - y0); }
    bool valid() const { return x0 < x1 && y0 < y1; }
    /// `other` lies fully inside this box (shared edges allowed).
    bool encloses(const Box& other) const {
        return other.x0 >= x0 && other.y0 >= y0 && other.x1 <= x1 && other.y1 <= y1;
    }
    friend bool operator==(const Box&, const Box&) = default;
};

double box_iou(const Box& a, const Box& b);

struct LabeledDetection {
    std::string image;
    std::string label;
    Box box;
    double confidence = 0.0;

    friend bool operator==(const LabeledDetection&, const LabeledDetection&) = default;
};

struct MaskCandidate {
    std::string mask_id;
    BinaryMask mask;
    Box bbox;  // tight extent of the foreground pixels

    /// Computes the tight box; throws ValidationError for an empty mask.
    static MaskCandidate from_mask(std::string mask_id, BinaryMask mask);
};

enum class InstanceKind { instance, semantic, referring, reasoning };
std::string_view to_string(InstanceKind kind);
InstanceKind parse_instance_kind(std::string_view s);

struct AnnotatedInstance {
    std::string image;
    std::string mask_id;
    std::string label;
    std::optional<std::string> expression;
    InstanceKind kind = InstanceKind::instance;
    /// The detection a matched instance came from, with its match IoU.
    std::optional<LabeledDetection> detection;
    std::optional<double> match_iou;
};

/// Machine-readable rejection reasons.
enum class Reason {
    overpopulated,
    nested,
    no_candidates,
    unmatched_box,
    low_confidence,
    low_iou,
    ambiguous_expression,
    client_failure,
    dimension_mismatch,
};
std::string_view to_string(Reason reason);

struct Rejection {
    std::string image;
    std::string label;
    std::string mask_id;  // empty for label-level rejections
    Reason reason = Reason::overpopulated;
    std::string detail;
};

// Label data: group -> overpopulated -> nested -> match.

using Groups = std::map<std::string, std::vector<LabeledDetection>>;

/// Partition by label, input order kept within each group.
Groups group_by_label(std::span<const LabeledDetection> dets);

inline constexpr std::size_t kMaxBoxesPerLabel = 4;

/// Drops labels with more than `max_boxes` boxes.
Groups filter_overpopulated(const Groups& groups, std::vector<Rejection>* rejected = nullptr,
                            std::size_t max_boxes = kMaxBoxesPerLabel);

enum class NestedRule {
    /// A inside B, box IoU(A, B) > threshold and area(A) < area(B).
    literal,
    /// area(A and B) / area(A) > threshold and area(A) < area(B).
    intersection_over_smaller,
};

struct NestedOptions {
    NestedRule rule = NestedRule::literal;
    double threshold = 0.97;
};

/// Removals are decided against the original group, then applied.
std::vector<LabeledDetection> filter_nested(std::span<const LabeledDetection> group,
                                            const NestedOptions& options = {},
                                            std::vector<Rejection>* rejected = nullptr);

struct MatchOptions {
    double min_confidence = 0.3;     // strict
    double multi_box_min_iou = 0.9;  // strict
    double single_box_min_iou = 0.85;  // strict
};

struct Match {
    LabeledDetection detection;
    std::string mask_id;
    double iou = 0.0;
};

struct MatchOutcome {
    std::vector<Match> matches;  // in group order; empty when rejected
    std::optional<Reason> rejection;
    std::string detail;
};

/// Global greedy one-to-one assignment by descending box IoU between
/// detection boxes and candidate tight boxes (ties: earlier box, then earlier
/// candidate), followed by the confidence and IoU gates.
MatchOutcome match_masks(std::span<const LabeledDetection> group,
                         std::span<const MaskCandidate> candidates, const MatchOptions& options = {});

struct FilterOptions {
    std::size_t max_boxes = kMaxBoxesPerLabel;
    NestedOptions nested;
    MatchOptions match;
};

struct LabelResult {
    std::vector<AnnotatedInstance> instances;  // kind = instance
    std::vector<Rejection> rejected;
};

/// The full label-data chain for one image.
LabelResult run_label_pipeline(std::span<const LabeledDetection> dets,
                               std::span<const MaskCandidate> candidates,
                               const FilterOptions& options = {});

struct SemanticMask {
    std::string label;
    BinaryMask mask;
    std::vector<std::string> members;  // sorted mask ids
};

/// Pixelwise union per label over `instances`, looking masks up by id.
/// Throws ValidationError on a dimension mismatch or unknown mask id.
std::vector<SemanticMask> merge_semantic(std::span<const AnnotatedInstance> instances,
                                         std::span<const MaskCandidate> candidates);

// Textual data.

inline constexpr Rgb kGenerateColor = {0, 255, 0};
inline constexpr Rgb kVerifyColor = {255, 128, 0};
inline constexpr int kContourDilation = 20;

/// Dilates `mask` by a Euclidean disc of radius `dilation` and paints the
/// dilated region's boundary in `color`.
RgbImage render_contour(const RgbImage& image, const BinaryMask& mask, Rgb color = kGenerateColor,
                        int dilation = kContourDilation);

BinaryMask dilate_disc(const BinaryMask& mask, int radius);

enum class RequestKind { generate, verify, reason };
std::string_view to_string(RequestKind kind);

struct CaptionRequest {
    RequestKind kind = RequestKind::generate;
    /// Label for generate/reason, expression for verify.
    std::string text;
    const RgbImage* image = nullptr;

    /// SHA-256 over kind, text and the image bytes.
    std::string key() const;
};

/// Raised by clients; the pipeline skips the instance and records it.
struct ClientError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

class CaptionClient {
public:
    virtual ~CaptionClient() = default;
    /// Returns an expression (generate, reason) or "yes"/"no" (verify).
    virtual std::string ask(const CaptionRequest& request) = 0;
};

/// Answers from a recorded transcript `[{"kind", "key", "response"}]`.
class ReplayClient : public CaptionClient {
public:
    explicit ReplayClient(const nlohmann::json& transcript);
    static ReplayClient from_file(const std::filesystem::path& path);
    std::string ask(const CaptionRequest& request) override;

private:
    std::map<std::pair<std::string, std::string>, std::string> answers_;
};

/// Rule-based client. generate/reason describe where the painted contour sits
/// ("the <label> at the top left"); verify answers "yes" when the expression's
/// position words match where the contour sits.
class StubClient : public CaptionClient {
public:
    std::string ask(const CaptionRequest& request) override;
};

/// Forwards to another client and records every exchange.
class RecordingClient : public CaptionClient {
public:
    explicit RecordingClient(CaptionClient& inner) : inner_(inner) {}
    std::string ask(const CaptionRequest& request) override;
    const nlohmann::json& transcript() const { return transcript_; }
    void save(const std::filesystem::path& path) const;

private:
    CaptionClient& inner_;
    nlohmann::json transcript_ = nlohmann::json::array();
    std::mutex mutex_;
};

/// "replay:<path>" or "stub".
std::unique_ptr<CaptionClient> make_client(std::string_view spec);

struct ReferringOptions {
    bool verify = true;
    int dilation = kContourDilation;
    Rgb generate_color = kGenerateColor;
    Rgb verify_color = kVerifyColor;
};

struct ReferringResult {
    std::vector<AnnotatedInstance> instances;  // referring and reasoning
    std::vector<Rejection> rejected;
};

/// Generates one expression per instance. Labels with several instances have
/// each expression checked against every sibling and keep it only if every
/// answer is "no". Labels seen exactly once skip verification and also get a
/// reasoning expression.
ReferringResult run_referring_pipeline(const RgbImage& image,
                                       std::span<const AnnotatedInstance> instances,
                                       std::span<const MaskCandidate> candidates,
                                       CaptionClient& client, const ReferringOptions& options = {});

nlohmann::json to_json(const AnnotatedInstance& inst);
nlohmann::json to_json(const Rejection& rej);
LabeledDetection detection_from_json(const nlohmann::json& j);
nlohmann::json to_json(const LabeledDetection& det);

}  // namespace maskgen::annotate
