#pragma once

#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "multirater/tensor.hpp"

namespace multirater {

/// Offsets of the discrete disc structuring element: (dy,dx) belongs to
/// the disc iff dy^2 + dx^2 <= radius^2. Radius 1 is the 4-connected cross.
inline std::vector<std::pair<int, int>> disc_offsets(int radius) {
    if (radius < 1) throw std::invalid_argument("disc_offsets: radius must be >= 1");
    std::vector<std::pair<int, int>> offs;
    for (int dy = -radius; dy <= radius; ++dy)
        for (int dx = -radius; dx <= radius; ++dx)
            if (dy * dy + dx * dx <= radius * radius) offs.emplace_back(dy, dx);
    return offs;
}

/// Binary erosion with a disc. Pixels outside the image count as
/// foreground, the min-neutral convention, so erode and dilate stay exact
/// duals: dilate(M) == ~erode(~M).
inline Mask erode(const Mask& mask, int se_radius) {
    const auto offs = disc_offsets(se_radius);
    Mask out(mask.h, mask.w);
    for (int y = 0; y < mask.h; ++y) {
        for (int x = 0; x < mask.w; ++x) {
            uint8_t keep = 1;
            for (const auto& [dy, dx] : offs) {
                const int yy = y + dy, xx = x + dx;
                if (yy < 0 || yy >= mask.h || xx < 0 || xx >= mask.w) continue;
                if (!mask.at(yy, xx)) {
                    keep = 0;
                    break;
                }
            }
            out.at(y, x) = keep;
        }
    }
    return out;
}

/// Binary dilation with a disc; pixels outside the image count as
/// background (max-neutral).
inline Mask dilate(const Mask& mask, int se_radius) {
    const auto offs = disc_offsets(se_radius);
    Mask out(mask.h, mask.w);
    for (int y = 0; y < mask.h; ++y) {
        for (int x = 0; x < mask.w; ++x) {
            uint8_t hit = 0;
            for (const auto& [dy, dx] : offs) {
                const int yy = y + dy, xx = x + dx;
                if (yy < 0 || yy >= mask.h || xx < 0 || xx >= mask.w) continue;
                if (mask.at(yy, xx)) {
                    hit = 1;
                    break;
                }
            }
            out.at(y, x) = hit;
        }
    }
    return out;
}

enum class RaterOp { erode, dilate, identity };

inline RaterOp parse_rater_op(const std::string& name) {
    if (name == "erode") return RaterOp::erode;
    if (name == "dilate") return RaterOp::dilate;
    if (name == "identity") return RaterOp::identity;
    throw std::invalid_argument("unknown rater op: " + name);
}

inline std::string rater_op_name(RaterOp op) {
    switch (op) {
        case RaterOp::erode: return "erode";
        case RaterOp::dilate: return "dilate";
        case RaterOp::identity: return "identity";
    }
    throw std::logic_error("rater_op_name: bad enum");
}

/// One simulated annotation per op, applied to the base mask in order.
inline std::vector<Mask> simulate_raters(const Mask& base_mask,
                                         const std::vector<RaterOp>& rater_ops,
                                         int se_radius) {
    std::vector<Mask> masks;
    masks.reserve(rater_ops.size());
    for (RaterOp op : rater_ops) {
        switch (op) {
            case RaterOp::erode: masks.push_back(erode(base_mask, se_radius)); break;
            case RaterOp::dilate: masks.push_back(dilate(base_mask, se_radius)); break;
            case RaterOp::identity: masks.push_back(base_mask); break;
        }
    }
    return masks;
}

} // namespace multirater
