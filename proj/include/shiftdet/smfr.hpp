#pragma once

#include <cstdint>
#include <stdexcept>
#include <vector>

#include "shiftdet/autodiff.hpp"
#include "shiftdet/detector.hpp"
#include "shiftdet/geometry.hpp"

namespace shiftdet {

/// Foreground feature-map locations: (r,c) is positive when any of its
/// anchors has IOU strictly above the threshold with some GT box.
struct ForegroundMask {
    int feat_h = 0, feat_w = 0;
    std::vector<std::uint8_t> mask;  // feat_h * feat_w
    int k = 0;                       // positive location count
};

inline ForegroundMask foreground_mask(const std::vector<Anchor>& anchors, const std::vector<LabeledBox>& gt,
                                      double iou_thresh, int feat_h, int feat_w) {
    ForegroundMask out;
    out.feat_h = feat_h;
    out.feat_w = feat_w;
    out.mask.assign(static_cast<std::size_t>(feat_h) * feat_w, 0);
    for (const auto& a : anchors) {
        if (a.row < 0 || a.row >= feat_h || a.col < 0 || a.col >= feat_w)
            throw std::invalid_argument("foreground_mask: anchor outside the feature grid");
        const std::size_t loc = static_cast<std::size_t>(a.row) * feat_w + a.col;
        if (out.mask[loc]) continue;
        for (const auto& g : gt) {
            if (iou(a.box, g.box) > iou_thresh) {
                out.mask[loc] = 1;
                break;
            }
        }
    }
    for (auto v : out.mask) out.k += v;
    return out;
}

/// Masked consistency: (1/k) * sum over positive locations and channels of
/// (f_s - f_t)^2. Returns 0 when k == 0. The source response enters as a
/// constant, so gradients reach only the adapted extractor.
template <typename T>
Var<T> smfr_loss(const Tensor<T>& source_features, const Var<T>& adapted_features, const ForegroundMask& mask) {
    if (mask.k == 0) return zero_scalar<T>();
    Var<T> ft = adapted_features;
    if (ft.value().shape.size() == 4) {
        const auto& s = ft.value().shape;
        ft = reshape(ft, {s[1], s[2], s[3]});
    }
    Tensor<T> fs = source_features;
    if (fs.shape.size() == 4) fs = fs.reshaped({fs.shape[1], fs.shape[2], fs.shape[3]});
    return masked_sq_diff_sum(ft, fs, mask.mask, 1.0 / static_cast<double>(mask.k));
}

/// Unmasked variant over the whole map, normalized by w*h (the ablation the
/// paper reports as harmful).
template <typename T>
Var<T> global_smfr_loss(const Tensor<T>& source_features, const Var<T>& adapted_features) {
    Var<T> ft = adapted_features;
    if (ft.value().shape.size() == 4) {
        const auto& s = ft.value().shape;
        ft = reshape(ft, {s[1], s[2], s[3]});
    }
    Tensor<T> fs = source_features;
    if (fs.shape.size() == 4) fs = fs.reshaped({fs.shape[1], fs.shape[2], fs.shape[3]});
    const auto& s = ft.value().shape;
    const std::size_t hw = static_cast<std::size_t>(s[1]) * s[2];
    return masked_sq_diff_sum(ft, fs, std::vector<std::uint8_t>(hw, 1), 1.0 / static_cast<double>(hw));
}

/// Immutable copy of the source-trained backbone; its responses anchor the
/// regularizer and must stay bit-identical for the whole adaptation.
template <typename T>
class FrozenSourceExtractor {
public:
    FrozenSourceExtractor() = default;

    static FrozenSourceExtractor from_model(const DetectorModel<T>& m) {
        FrozenSourceExtractor f;
        f.cfg_ = m.cfg;
        for (const auto& p : m.backbone_params()) f.params_.push_back(make_param<T>(p->name, p->value));
        return f;
    }

    /// (C, H, W) feature response; no gradients are ever attached.
    Tensor<T> features(const Image& img) const {
        GraphParams<T> g;
        FeatureMap<T> fm = backbone_forward_with(cfg_, params_, g, img, /*trainable=*/false);
        const auto& s = fm.values.value().shape;
        return fm.values.value().reshaped({s[1], s[2], s[3]});
    }

    std::uint64_t checksum() const { return params_checksum(params_); }
    const DetectorConfig& config() const { return cfg_; }

private:
    DetectorConfig cfg_;
    std::vector<ParamPtr<T>> params_;
};

}  // namespace shiftdet
