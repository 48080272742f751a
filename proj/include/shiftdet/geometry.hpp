#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>
#include <vector>

namespace shiftdet {

/// Axis-aligned rectangle in continuous pixel coordinates, top-left origin.
/// Degenerate rectangles are rejected at construction, so downstream code can
/// assume positive area.
struct Box {
    double x1 = 0, y1 = 0, x2 = 0, y2 = 0;

    Box() = default;
    Box(double x1_, double y1_, double x2_, double y2_) : x1(x1_), y1(y1_), x2(x2_), y2(y2_) {
        if (!(x1 < x2) || !(y1 < y2)) throw std::invalid_argument("Box: requires x1 < x2 and y1 < y2");
    }

    double width() const { return x2 - x1; }
    double height() const { return y2 - y1; }
    double area() const { return width() * height(); }
    double cx() const { return 0.5 * (x1 + x2); }
    double cy() const { return 0.5 * (y1 + y2); }

    bool operator==(const Box& o) const { return x1 == o.x1 && y1 == o.y1 && x2 == o.x2 && y2 == o.y2; }
};

struct LabeledBox {
    Box box;
    int class_id = 1;  // foreground classes are 1..C; 0 is reserved for background
};

struct Anchor {
    Box box;
    int row = 0, col = 0;
    double scale = 0, ratio = 0;
};

inline double iou(const Box& a, const Box& b) {
    const double ix = std::min(a.x2, b.x2) - std::max(a.x1, b.x1);
    const double iy = std::min(a.y2, b.y2) - std::max(a.y1, b.y1);
    if (ix <= 0 || iy <= 0) return 0.0;
    const double inter = ix * iy;
    return inter / (a.area() + b.area() - inter);
}

/// Greedy NMS, descending score, ties broken by lower index. A box is
/// suppressed when its IOU with an already-kept box exceeds iou_thresh.
inline std::vector<std::size_t> nms(const std::vector<Box>& boxes, const std::vector<double>& scores,
                                    double iou_thresh) {
    if (boxes.size() != scores.size()) throw std::invalid_argument("nms: boxes/scores size mismatch");
    if (iou_thresh < 0 || iou_thresh > 1) throw std::invalid_argument("nms: iou_thresh outside [0,1]");
    std::vector<std::size_t> order(boxes.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
    std::vector<std::size_t> kept;
    for (std::size_t idx : order) {
        bool suppressed = false;
        for (std::size_t k : kept) {
            if (iou(boxes[idx], boxes[k]) > iou_thresh) {
                suppressed = true;
                break;
            }
        }
        if (!suppressed) kept.push_back(idx);
    }
    return kept;
}

/// Window dimensions shared by anchors and split-pooling grids:
/// area = scale^2 and height/width = ratio.
inline std::pair<double, double> anchor_window(double scale, double ratio) {
    if (scale <= 0 || ratio <= 0) throw std::invalid_argument("anchor_window: non-positive scale or ratio");
    return {scale * std::sqrt(1.0 / ratio), scale * std::sqrt(ratio)};  // (w, h)
}

/// Location-major anchor grid: for each (row, col) all scale/ratio
/// combinations in order, so anchor index = ((row*W + col) * per_loc + k).
inline std::vector<Anchor> generate_anchors(int feat_h, int feat_w, double stride,
                                            const std::vector<double>& scales, const std::vector<double>& ratios) {
    if (feat_h <= 0 || feat_w <= 0 || stride <= 0) throw std::invalid_argument("generate_anchors: bad dims");
    if (scales.empty() || ratios.empty()) throw std::invalid_argument("generate_anchors: empty scales or ratios");
    std::vector<Anchor> out;
    out.reserve(static_cast<std::size_t>(feat_h) * feat_w * scales.size() * ratios.size());
    for (int r = 0; r < feat_h; ++r) {
        for (int c = 0; c < feat_w; ++c) {
            const double cx = (c + 0.5) * stride;
            const double cy = (r + 0.5) * stride;
            for (double s : scales) {
                for (double ratio : ratios) {
                    const auto [w, h] = anchor_window(s, ratio);
                    Anchor a;
                    a.box = Box(cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h);
                    a.row = r;
                    a.col = c;
                    a.scale = s;
                    a.ratio = ratio;
                    out.push_back(a);
                }
            }
        }
    }
    return out;
}

struct BoxDeltas {
    double dx = 0, dy = 0, dw = 0, dh = 0;
};

/// Standard center/log-size parameterization of `box` relative to `anchor`.
inline BoxDeltas encode_deltas(const Box& box, const Box& anchor) {
    BoxDeltas d;
    d.dx = (box.cx() - anchor.cx()) / anchor.width();
    d.dy = (box.cy() - anchor.cy()) / anchor.height();
    d.dw = std::log(box.width() / anchor.width());
    d.dh = std::log(box.height() / anchor.height());
    return d;
}

inline Box decode_deltas(const Box& anchor, const BoxDeltas& d) {
    const double cx = anchor.cx() + d.dx * anchor.width();
    const double cy = anchor.cy() + d.dy * anchor.height();
    const double w = anchor.width() * std::exp(d.dw);
    const double h = anchor.height() * std::exp(d.dh);
    return Box(cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h);
}

/// Clip to [0,w]x[0,h]; returns false when nothing of positive area remains.
inline bool clip_box(Box& b, double w, double h) {
    const double x1 = std::clamp(b.x1, 0.0, w);
    const double y1 = std::clamp(b.y1, 0.0, h);
    const double x2 = std::clamp(b.x2, 0.0, w);
    const double y2 = std::clamp(b.y2, 0.0, h);
    if (!(x1 < x2) || !(y1 < y2)) return false;
    b = Box(x1, y1, x2, y2);
    return true;
}

}  // namespace shiftdet
