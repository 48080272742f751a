#pragma once

#include <map>
#include <stdexcept>
#include <vector>

#include "shiftdet/autodiff.hpp"
#include "shiftdet/detector.hpp"
#include "shiftdet/geometry.hpp"

namespace shiftdet {

/// Per-class object feature vectors of one domain; keys are foreground
/// classes in [1,C], each holding an (N, feat_dim) block.
template <typename T>
struct InstanceFeatureSet {
    std::map<int, Var<T>> by_class;
    bool source_domain = false;

    int count(int class_id) const {
        auto it = by_class.find(class_id);
        return it == by_class.end() ? 0 : it->second.value().shape[0];
    }
};

/// Instance ROI sampling at the stricter threshold: every proposal whose
/// best IOU against GT reaches iou_thresh is kept (no subsampling) and
/// labeled by the argmax GT; GT boxes themselves are appended as ROIs so the
/// module always receives features when annotations exist.
inline std::map<int, std::vector<Box>> instance_roi_sample(const std::vector<Proposal>& proposals,
                                                           const std::vector<LabeledBox>& gt,
                                                           double iou_thresh = 0.7, bool use_proposals = true,
                                                           bool append_gt = true) {
    if (!(iou_thresh > 0.5 && iou_thresh <= 1.0))
        throw std::invalid_argument("instance_roi_sample: iou_thresh must lie in (0.5, 1]");
    std::map<int, std::vector<Box>> out;
    if (use_proposals) {
        for (const auto& p : proposals) {
            double best = 0;
            int best_cls = -1;
            for (const auto& g : gt) {
                const double v = iou(p.box, g.box);
                if (v > best) {
                    best = v;
                    best_cls = g.class_id;
                }
            }
            if (best >= iou_thresh && best_cls > 0) out[best_cls].push_back(p.box);
        }
    }
    if (append_gt) {
        for (const auto& g : gt) out[g.class_id].push_back(g.box);
    }
    return out;
}

/// ROI-pool every box and run it through the head layers before the final
/// classification/regression outputs, yielding one fixed-length vector per
/// ROI grouped by class. Differentiable w.r.t. backbone and fc1.
template <typename T>
InstanceFeatureSet<T> extract_instance_features(const DetectorModel<T>& m, GraphParams<T>& g,
                                                const FeatureMap<T>& fm,
                                                const std::map<int, std::vector<Box>>& rois_by_class,
                                                bool trainable = true) {
    InstanceFeatureSet<T> out;
    std::vector<Box> all;
    std::vector<std::pair<int, int>> spans;  // class, count
    for (const auto& [cls, boxes] : rois_by_class) {
        if (boxes.empty()) continue;
        all.insert(all.end(), boxes.begin(), boxes.end());
        spans.emplace_back(cls, static_cast<int>(boxes.size()));
    }
    if (all.empty()) return out;

    Var<T> pooled = roi_pool(fm, all, m.cfg.roi_bins, m.cfg.roi_bins);
    const int N = static_cast<int>(all.size());
    int flat = 1;
    for (std::size_t i = 1; i < pooled.value().shape.size(); ++i) flat *= pooled.value().shape[i];
    Var<T> hidden =
        relu(linear(reshape(pooled, {N, flat}), g.use(m.fc1_w, trainable), g.use(m.fc1_b, trainable)));

    int row = 0;
    for (const auto& [cls, count] : spans) {
        std::vector<int> idx(static_cast<std::size_t>(count));
        for (int i = 0; i < count; ++i) idx[static_cast<std::size_t>(i)] = row + i;
        out.by_class.emplace(cls, rows_select(hidden, idx));
        row += count;
    }
    return out;
}

}  // namespace shiftdet
