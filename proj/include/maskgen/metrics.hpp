#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <vector>

#include "maskgen/image.hpp"

namespace maskgen {

inline constexpr double kNormalizedResolution = 256.0;

/// Thresholds at which mAHD groups are reported by default.
inline const std::vector<double> kDefaultMahdThresholds = {0.5, 0.6, 0.7, 0.8, 0.9};

enum class Connectivity { four = 4, eight = 8 };

enum class ThresholdMode {
    inclusive,     // keep pairs with iou >= t
    strict_above,  // keep pairs with iou > t
};

struct PixelPoint {
    int row = 0;
    int col = 0;
    friend auto operator<=>(const PixelPoint&, const PixelPoint&) = default;
};

struct RealPoint {
    double row = 0.0;
    double col = 0.0;
};

/// Contour pixels of a mask, in row-major scan order.
struct BoundaryPointSet {
    std::vector<PixelPoint> points;
    int height = 0;
    int width = 0;
};

struct PixelCounts {
    std::int64_t intersection = 0;
    std::int64_t union_ = 0;
};

PixelCounts overlap(const BinaryMask& pred, const BinaryMask& gt);

/// |pred ∩ gt| / |pred ∪ gt|; 1.0 when both masks are empty.
double iou(const BinaryMask& pred, const BinaryMask& gt);

/// A foreground pixel is on the boundary iff one of its neighbors (4- or
/// 8-connected) is background or lies outside the image.
BoundaryPointSet boundary(const BinaryMask& mask, Connectivity connectivity = Connectivity::four);

/// Scales coordinates by 256 / max(H, W).
std::vector<RealPoint> normalize_points(const BoundaryPointSet& points,
                                        double target = kNormalizedResolution);

/// Average Hausdorff distance: the mean of the two directed mean
/// nearest-neighbor distances. Both empty -> 0; exactly one empty ->
/// ValidationError. Large inputs go through a uniform-grid index whose
/// result is identical to the exhaustive scan.
double ahd(std::span<const RealPoint> x, std::span<const RealPoint> y);
double ahd(const BoundaryPointSet& x, const BoundaryPointSet& y);

/// Pair sizes above which ahd() switches to the bucketed search.
inline constexpr std::int64_t kAhdBucketThreshold = 1'000'000;

/// Prediction/ground-truth pair with cached IoU and (normalized) AHD.
struct EvalPair {
    BinaryMask pred;
    BinaryMask gt;
    PixelCounts counts;
    double iou = 0.0;
    std::optional<double> ahd;  // absent when exactly one mask is empty

    static EvalPair make(BinaryMask pred, BinaryMask gt,
                         Connectivity connectivity = Connectivity::four);
};

/// Cumulative intersection over cumulative union; 1.0 if the total union is 0.
double c_iou(std::span<const EvalPair> pairs);

/// Per-class masks of one image. A class missing from the map has an empty mask.
using ClassMasks = std::map<int, BinaryMask>;

struct ClassMaskPair {
    ClassMasks pred;
    ClassMasks gt;
};

/// Accumulates I_c and U_c over the dataset, then averages I_c / U_c over
/// classes with U_c > 0.
double m_iou(std::span<const ClassMaskPair> pairs, std::span<const int> classes);

struct MahdGroup {
    double threshold = 0.0;
    std::size_t count = 0;
    std::optional<double> mean_ahd;  // absent for empty groups
};

struct MahdReport {
    std::vector<MahdGroup> groups;
};

MahdReport m_ahd(std::span<const EvalPair> pairs,
                 std::span<const double> thresholds = kDefaultMahdThresholds,
                 ThresholdMode mode = ThresholdMode::inclusive);

}  // namespace maskgen
