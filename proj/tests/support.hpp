#pragma once

// Independent reference implementations and random inputs shared by the unit
// and acceptance tests. Nothing here calls into the library under test except
// for the plain data types.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <vector>

#include "maskgen/image.hpp"
#include "maskgen/metrics.hpp"
#include "maskgen/rng.hpp"

namespace testsupport {

using maskgen::BinaryMask;

/// Random mask: a few filled rectangles and discs, or pure noise.
inline BinaryMask random_mask(maskgen::Rng& rng, int h, int w, bool allow_empty = false) {
    BinaryMask m(h, w);
    const int mode = static_cast<int>(rng.below(3));
    if (mode == 0) {
        const double p = rng.uniform(0.1, 0.7);
        for (int r = 0; r < h; ++r)
            for (int c = 0; c < w; ++c) m.set(r, c, rng.uniform() < p);
    } else {
        const int blobs = 1 + static_cast<int>(rng.below(3));
        for (int b = 0; b < blobs; ++b) {
            const int r0 = rng.range(0, h - 1), c0 = rng.range(0, w - 1);
            const int rr = rng.range(1, std::max(1, h / 2)), rc = rng.range(1, std::max(1, w / 2));
            for (int r = 0; r < h; ++r)
                for (int c = 0; c < w; ++c) {
                    const bool in = mode == 1 ? (std::abs(r - r0) <= rr && std::abs(c - c0) <= rc)
                                              : ((r - r0) * (r - r0) + (c - c0) * (c - c0) <= rr * rr);
                    if (in) m.set(r, c, true);
                }
        }
    }
    if (!allow_empty && m.count() == 0) m.set(rng.range(0, h - 1), rng.range(0, w - 1), true);
    return m;
}

/// Boundary pixels by direct neighbor inspection.
inline std::vector<maskgen::RealPoint> boundary_oracle(const BinaryMask& m, bool eight, double scale) {
    std::vector<maskgen::RealPoint> out;
    const auto fg = [&](int r, int c) { return r >= 0 && c >= 0 && r < m.height() && c < m.width() && m.at(r, c); };
    for (int r = 0; r < m.height(); ++r)
        for (int c = 0; c < m.width(); ++c) {
            if (!m.at(r, c)) continue;
            bool edge = !fg(r - 1, c) || !fg(r + 1, c) || !fg(r, c - 1) || !fg(r, c + 1);
            if (eight) edge = edge || !fg(r - 1, c - 1) || !fg(r - 1, c + 1) || !fg(r + 1, c - 1) || !fg(r + 1, c + 1);
            if (edge) out.push_back({r * scale, c * scale});
        }
    return out;
}

/// Exhaustive O(|X||Y|) average Hausdorff distance.
inline double ahd_oracle(const std::vector<maskgen::RealPoint>& x, const std::vector<maskgen::RealPoint>& y) {
    const auto directed = [](const auto& a, const auto& b) {
        double sum = 0.0;
        for (const auto& p : a) {
            double best = std::numeric_limits<double>::infinity();
            for (const auto& q : b) best = std::min(best, std::hypot(p.row - q.row, p.col - q.col));
            sum += best;
        }
        return sum / static_cast<double>(a.size());
    };
    return 0.5 * (directed(x, y) + directed(y, x));
}

inline double iou_oracle(const BinaryMask& a, const BinaryMask& b) {
    long inter = 0, uni = 0;
    for (int r = 0; r < a.height(); ++r)
        for (int c = 0; c < a.width(); ++c) {
            inter += a.at(r, c) && b.at(r, c);
            uni += a.at(r, c) || b.at(r, c);
        }
    return uni == 0 ? 1.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

inline BinaryMask box_mask(int h, int w, int r0, int c0, int r1, int c1) {
    BinaryMask m(h, w);
    for (int r = r0; r < r1; ++r)
        for (int c = c0; c < c1; ++c) m.set(r, c, true);
    return m;
}

}  // namespace testsupport
