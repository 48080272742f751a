#pragma once

#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

#include "shiftdet/autodiff.hpp"
#include "shiftdet/detector.hpp"
#include "shiftdet/geometry.hpp"
#include "shiftdet/rng.hpp"

namespace shiftdet {

enum class ScaleGroup { small = 0, medium = 1, large = 2 };

inline const char* scale_group_name(ScaleGroup g) {
    switch (g) {
        case ScaleGroup::small: return "small";
        case ScaleGroup::medium: return "medium";
        case ScaleGroup::large: return "large";
    }
    return "?";
}

struct SplitPoolConfig {
    std::vector<double> scales = {96.0, 160.0, 256.0};  // small, medium, large
    std::vector<double> ratios = {0.5, 1.0, 2.0};
    int out_bins = 3;

    double scale_of(ScaleGroup g) const { return scales.at(static_cast<std::size_t>(g)); }
};

/// One random grid: window size from the shared anchor convention plus the
/// random top-left offset (0 < offset < window).
struct GridSpec {
    ScaleGroup scale_group = ScaleGroup::small;
    int window_w = 0, window_h = 0;
    int offset_x = 0, offset_y = 0;
};

/// Integer window dims for a (scale, ratio) pair: w = scale*sqrt(1/ratio),
/// h = scale*sqrt(ratio), rounded to nearest.
inline std::pair<int, int> window_dims(double scale, double ratio) {
    const auto [w, h] = anchor_window(scale, ratio);
    return {static_cast<int>(std::lround(w)), static_cast<int>(std::lround(h))};
}

/// Uniform integer offsets in {1..w-1} x {1..h-1}.
inline std::pair<int, int> sample_offsets(Rng& rng, int window_w, int window_h) {
    if (window_w < 2 || window_h < 2) throw std::invalid_argument("sample_offsets: window dims must be >= 2");
    return {rng.uniform_int(1, window_w - 1), rng.uniform_int(1, window_h - 1)};
}

/// Full (non-border) grid cells lying entirely inside the image, row-major.
inline std::vector<Box> enumerate_cells(int image_w, int image_h, const GridSpec& grid) {
    std::vector<Box> out;
    if (grid.window_w <= 0 || grid.window_h <= 0) throw std::invalid_argument("enumerate_cells: bad window");
    for (int y = grid.offset_y; y + grid.window_h <= image_h; y += grid.window_h) {
        for (int x = grid.offset_x; x + grid.window_w <= image_w; x += grid.window_w) {
            out.push_back(Box(x, y, x + grid.window_w, y + grid.window_h));
        }
    }
    return out;
}

/// Fixed-size local patch features of one scale group for one image. `count`
/// is zero (and `features` undefined) when no grid cell fit the image.
template <typename T>
struct PatchFeatureSet {
    ScaleGroup scale_group = ScaleGroup::small;
    Var<T> features;  // (count, C, bins, bins)
    int count = 0;
    bool source_domain = false;
    std::vector<Box> cells;  // image-space cells, per feature row
};

/// Sample a fresh grid per ratio, enumerate full cells, and ROI-pool each cell
/// onto `out_bins`^2 feature bins. Offsets are drawn per ratio per call.
template <typename T>
PatchFeatureSet<T> split_pool(const FeatureMap<T>& fm, int image_w, int image_h, ScaleGroup group, Rng& rng,
                              const SplitPoolConfig& cfg = {}) {
    PatchFeatureSet<T> out;
    out.scale_group = group;
    const double scale = cfg.scale_of(group);
    for (double ratio : cfg.ratios) {
        const auto [w, h] = window_dims(scale, ratio);
        GridSpec grid{group, w, h, 0, 0};
        std::tie(grid.offset_x, grid.offset_y) = sample_offsets(rng, w, h);
        for (const auto& cell : enumerate_cells(image_w, image_h, grid)) out.cells.push_back(cell);
    }
    out.count = static_cast<int>(out.cells.size());
    if (out.count > 0) out.features = roi_pool(fm, out.cells, cfg.out_bins, cfg.out_bins);
    return out;
}

/// Pool patch sets of the same scale group (e.g. across the images of a
/// batch) into one set.
template <typename T>
PatchFeatureSet<T> merge_patch_sets(const std::vector<PatchFeatureSet<T>>& sets) {
    PatchFeatureSet<T> out;
    std::vector<Var<T>> parts;
    for (const auto& s : sets) {
        if (s.count == 0) continue;
        if (parts.empty()) {
            out.scale_group = s.scale_group;
            out.source_domain = s.source_domain;
        } else if (s.scale_group != out.scale_group) {
            throw std::invalid_argument("merge_patch_sets: mixed scale groups");
        }
        parts.push_back(s.features);
        out.cells.insert(out.cells.end(), s.cells.begin(), s.cells.end());
    }
    out.count = static_cast<int>(out.cells.size());
    if (!parts.empty()) out.features = parts.size() == 1 ? parts[0] : concat_rows(parts);
    return out;
}

}  // namespace shiftdet
