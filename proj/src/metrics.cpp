#include "maskgen/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <set>
#include <string>

#include "maskgen/error.hpp"

namespace maskgen {

namespace {

void require_same_shape(const BinaryMask& a, const BinaryMask& b) {
    if (!a.same_shape(b)) {
        throw ValidationError("mask dimensions differ: " + std::to_string(a.height()) + "x" +
                              std::to_string(a.width()) + " vs " + std::to_string(b.height()) +
                              "x" + std::to_string(b.width()));
    }
}

double squared(const RealPoint& a, const RealPoint& b) {
    const double dr = a.row - b.row;
    const double dc = a.col - b.col;
    return dr * dr + dc * dc;
}

/// Uniform grid over a point set for exact nearest-neighbor queries.
class PointGrid {
public:
    explicit PointGrid(std::span<const RealPoint> pts) : pts_(pts) {
        min_r_ = min_c_ = std::numeric_limits<double>::infinity();
        double max_r = -min_r_, max_c = -min_c_;
        for (const auto& p : pts) {
            min_r_ = std::min(min_r_, p.row);
            min_c_ = std::min(min_c_, p.col);
            max_r = std::max(max_r, p.row);
            max_c = std::max(max_c, p.col);
        }
        const double extent = std::max({max_r - min_r_, max_c - min_c_, 1.0});
        const double per_side = std::max(1.0, std::sqrt(static_cast<double>(pts.size())));
        cell_ = extent / per_side;
        rows_ = static_cast<int>((max_r - min_r_) / cell_) + 1;
        cols_ = static_cast<int>((max_c - min_c_) / cell_) + 1;
        cells_.resize(static_cast<std::size_t>(rows_) * cols_);
        for (std::size_t i = 0; i < pts.size(); ++i) {
            cells_[cell_index(cell_row(pts[i].row), cell_col(pts[i].col))].push_back(i);
        }
    }

    /// Minimum squared distance from q to any indexed point.
    double nearest_squared(const RealPoint& q) const {
        const int qr = std::clamp(cell_row(q.row), 0, rows_ - 1);
        const int qc = std::clamp(cell_col(q.col), 0, cols_ - 1);
        double best = std::numeric_limits<double>::infinity();
        const int max_ring = std::max(rows_, cols_);
        for (int ring = 0; ring <= max_ring; ++ring) {
            // Any point in ring >= `ring` is at least (ring - 1) cells away
            // from q along one axis (q may sit outside the grid box, so use
            // its distance to the clamped cell as well).
            const double reach = std::max(0.0, (ring - 1) * cell_);
            if (ring > 0 && reach * reach > best) break;
            for (int r = qr - ring; r <= qr + ring; ++r) {
                if (r < 0 || r >= rows_) continue;
                const bool edge_row = (r == qr - ring || r == qr + ring);
                for (int c = qc - ring; c <= qc + ring; ++c) {
                    if (c < 0 || c >= cols_) continue;
                    if (!edge_row && c != qc - ring && c != qc + ring) continue;
                    for (auto i : cells_[cell_index(r, c)]) best = std::min(best, squared(q, pts_[i]));
                }
            }
        }
        return best;
    }

private:
    int cell_row(double v) const { return static_cast<int>(std::floor((v - min_r_) / cell_)); }
    int cell_col(double v) const { return static_cast<int>(std::floor((v - min_c_) / cell_)); }
    std::size_t cell_index(int r, int c) const { return static_cast<std::size_t>(r) * cols_ + c; }

    std::span<const RealPoint> pts_;
    double min_r_ = 0.0, min_c_ = 0.0, cell_ = 1.0;
    int rows_ = 1, cols_ = 1;
    std::vector<std::vector<std::size_t>> cells_;
};

double directed_mean(std::span<const RealPoint> from, std::span<const RealPoint> to, bool bucketed) {
    double sum = 0.0;
    if (bucketed) {
        const PointGrid grid(to);
        for (const auto& p : from) sum += std::sqrt(grid.nearest_squared(p));
    } else {
        for (const auto& p : from) {
            double best = std::numeric_limits<double>::infinity();
            for (const auto& q : to) best = std::min(best, squared(p, q));
            sum += std::sqrt(best);
        }
    }
    return sum / static_cast<double>(from.size());
}

std::vector<RealPoint> as_real(const BoundaryPointSet& s) {
    std::vector<RealPoint> out;
    out.reserve(s.points.size());
    for (const auto& p : s.points) out.push_back({static_cast<double>(p.row), static_cast<double>(p.col)});
    return out;
}

}  // namespace

PixelCounts overlap(const BinaryMask& pred, const BinaryMask& gt) {
    require_same_shape(pred, gt);
    PixelCounts counts;
    const auto& a = pred.pixels();
    const auto& b = gt.pixels();
    for (std::size_t i = 0; i < a.size(); ++i) {
        counts.intersection += a[i] & b[i];
        counts.union_ += a[i] | b[i];
    }
    return counts;
}

double iou(const BinaryMask& pred, const BinaryMask& gt) {
    const auto c = overlap(pred, gt);
    if (c.union_ == 0) return 1.0;
    return static_cast<double>(c.intersection) / static_cast<double>(c.union_);
}

BoundaryPointSet boundary(const BinaryMask& mask, Connectivity connectivity) {
    BoundaryPointSet out;
    out.height = mask.height();
    out.width = mask.width();
    const int h = mask.height(), w = mask.width();
    const auto background = [&](int r, int c) {
        return r < 0 || c < 0 || r >= h || c >= w || mask.at(r, c) == 0;
    };
    for (int r = 0; r < h; ++r) {
        for (int c = 0; c < w; ++c) {
            if (!mask.at(r, c)) continue;
            bool edge = background(r - 1, c) || background(r + 1, c) || background(r, c - 1) ||
                        background(r, c + 1);
            if (!edge && connectivity == Connectivity::eight) {
                edge = background(r - 1, c - 1) || background(r - 1, c + 1) ||
                       background(r + 1, c - 1) || background(r + 1, c + 1);
            }
            if (edge) out.points.push_back({r, c});
        }
    }
    return out;
}

std::vector<RealPoint> normalize_points(const BoundaryPointSet& points, double target) {
    const int longest = std::max(points.height, points.width);
    if (longest <= 0) throw ValidationError("boundary set has no source dimensions");
    const double s = target / static_cast<double>(longest);
    std::vector<RealPoint> out;
    out.reserve(points.points.size());
    for (const auto& p : points.points) out.push_back({p.row * s, p.col * s});
    return out;
}

double ahd(std::span<const RealPoint> x, std::span<const RealPoint> y) {
    if (x.empty() && y.empty()) return 0.0;
    if (x.empty() || y.empty()) {
        throw ValidationError("average Hausdorff distance is undefined when exactly one "
                              "point set is empty");
    }
    const bool bucketed = static_cast<std::int64_t>(x.size()) *
                              static_cast<std::int64_t>(y.size()) > kAhdBucketThreshold;
    return 0.5 * (directed_mean(x, y, bucketed) + directed_mean(y, x, bucketed));
}

double ahd(const BoundaryPointSet& x, const BoundaryPointSet& y) {
    const auto rx = as_real(x);
    const auto ry = as_real(y);
    return ahd(rx, ry);
}

EvalPair EvalPair::make(BinaryMask pred, BinaryMask gt, Connectivity connectivity) {
    EvalPair p;
    p.counts = overlap(pred, gt);
    p.iou = p.counts.union_ == 0
                ? 1.0
                : static_cast<double>(p.counts.intersection) / static_cast<double>(p.counts.union_);
    const auto bp = boundary(pred, connectivity);
    const auto bg = boundary(gt, connectivity);
    if (bp.points.empty() == bg.points.empty()) {
        p.ahd = maskgen::ahd(normalize_points(bp), normalize_points(bg));
    }
    p.pred = std::move(pred);
    p.gt = std::move(gt);
    return p;
}

double c_iou(std::span<const EvalPair> pairs) {
    if (pairs.empty()) throw ValidationError("cIoU needs at least one pair");
    std::int64_t inter = 0, uni = 0;
    for (const auto& p : pairs) {
        inter += p.counts.intersection;
        uni += p.counts.union_;
    }
    if (uni == 0) return 1.0;
    return static_cast<double>(inter) / static_cast<double>(uni);
}

double m_iou(std::span<const ClassMaskPair> pairs, std::span<const int> classes) {
    std::map<int, PixelCounts> acc;
    for (int c : classes) acc[c];
    for (const auto& pair : pairs) {
        // Dimensions come from whichever mask is present in this image.
        const BinaryMask* ref = nullptr;
        for (const auto* m : {&pair.pred, &pair.gt}) {
            for (const auto& [cls, mask] : *m) {
                if (!ref) ref = &mask;
                require_same_shape(*ref, mask);
            }
        }
        if (!ref) continue;
        const BinaryMask empty(ref->height(), ref->width());
        for (auto& [cls, counts] : acc) {
            const auto ip = pair.pred.find(cls);
            const auto ig = pair.gt.find(cls);
            const auto c = overlap(ip == pair.pred.end() ? empty : ip->second,
                                   ig == pair.gt.end() ? empty : ig->second);
            counts.intersection += c.intersection;
            counts.union_ += c.union_;
        }
    }
    double sum = 0.0;
    int used = 0;
    for (const auto& [cls, counts] : acc) {
        if (counts.union_ == 0) continue;
        sum += static_cast<double>(counts.intersection) / static_cast<double>(counts.union_);
        ++used;
    }
    if (used == 0) throw ValidationError("mIoU undefined: no class has a nonempty union");
    return sum / used;
}

MahdReport m_ahd(std::span<const EvalPair> pairs, std::span<const double> thresholds,
                 ThresholdMode mode) {
    for (std::size_t i = 0; i < thresholds.size(); ++i) {
        if (!(thresholds[i] >= 0.0 && thresholds[i] <= 1.0)) {
            throw ValidationError("IoU thresholds must lie in [0,1]");
        }
        if (i > 0 && !(thresholds[i] > thresholds[i - 1])) {
            throw ValidationError("IoU thresholds must be strictly increasing");
        }
    }
    MahdReport report;
    for (double t : thresholds) {
        MahdGroup g;
        g.threshold = t;
        double sum = 0.0;
        for (const auto& p : pairs) {
            const bool keep = mode == ThresholdMode::inclusive ? p.iou >= t : p.iou > t;
            if (!keep) continue;
            if (!p.ahd) {
                throw ValidationError("pair retained at IoU threshold " + std::to_string(t) +
                                      " has an undefined AHD");
            }
            sum += *p.ahd;
            ++g.count;
        }
        if (g.count > 0) g.mean_ahd = sum / static_cast<double>(g.count);
        report.groups.push_back(g);
    }
    return report;
}

}  // namespace maskgen
