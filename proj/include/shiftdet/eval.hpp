#pragma once

#include <algorithm>
#include <map>
#include <numeric>
#include <optional>
#include <vector>

#include "shiftdet/detector.hpp"
#include "shiftdet/geometry.hpp"
#include "shiftdet/synthdata.hpp"

namespace shiftdet {

struct EvalDetection {
    int image_id = 0;
    int class_id = 0;
    double confidence = 0;
    Box box;
};

struct EvalGroundTruth {
    int image_id = 0;
    int class_id = 0;
    Box box;
};

struct APReport {
    std::map<int, double> per_class;  // only classes with >= 1 GT instance
    double map = 0;
    std::size_t num_detections = 0;
    std::size_t num_gt = 0;
};

/// Average precision for one class at a fixed IOU threshold: greedy matching
/// in descending confidence (ties by detection index), each detection a TP
/// iff it reaches iou_thresh against a still-unmatched GT of its image, then
/// the all-point interpolated area under precision-recall. Classes without
/// GT have no defined AP.
inline std::optional<double> compute_ap(const std::vector<EvalDetection>& detections,
                                        const std::vector<EvalGroundTruth>& gts, double iou_thresh, int class_id) {
    std::vector<std::size_t> gt_idx;
    for (std::size_t i = 0; i < gts.size(); ++i) {
        if (gts[i].class_id == class_id) gt_idx.push_back(i);
    }
    if (gt_idx.empty()) return std::nullopt;

    std::vector<std::size_t> det_idx;
    for (std::size_t i = 0; i < detections.size(); ++i) {
        if (detections[i].class_id == class_id) det_idx.push_back(i);
    }
    std::stable_sort(det_idx.begin(), det_idx.end(), [&](std::size_t a, std::size_t b) {
        return detections[a].confidence > detections[b].confidence;
    });

    std::vector<char> matched(gt_idx.size(), 0);
    std::vector<double> precision, recall;
    int tp = 0;
    for (std::size_t k = 0; k < det_idx.size(); ++k) {
        const auto& d = detections[det_idx[k]];
        double best = 0;
        int best_j = -1;
        for (std::size_t j = 0; j < gt_idx.size(); ++j) {
            if (matched[j]) continue;
            const auto& g = gts[gt_idx[j]];
            if (g.image_id != d.image_id) continue;
            const double v = iou(d.box, g.box);
            if (v >= iou_thresh && v > best) {
                best = v;
                best_j = static_cast<int>(j);
            }
        }
        if (best_j >= 0) {
            matched[static_cast<std::size_t>(best_j)] = 1;
            ++tp;
        }
        precision.push_back(static_cast<double>(tp) / static_cast<double>(k + 1));
        recall.push_back(static_cast<double>(tp) / static_cast<double>(gt_idx.size()));
    }
    if (precision.empty()) return 0.0;

    // all-point interpolation: integrate the running-max precision envelope
    double ap = 0, prev_recall = 0;
    for (std::size_t k = 0; k < precision.size(); ++k) {
        if (recall[k] > prev_recall) {
            double envelope = 0;
            for (std::size_t j = k; j < precision.size(); ++j) envelope = std::max(envelope, precision[j]);
            ap += (recall[k] - prev_recall) * envelope;
            prev_recall = recall[k];
        }
    }
    return ap;
}

/// mAP over the classes that actually appear in GT.
inline APReport compute_map(const std::vector<EvalDetection>& detections, const std::vector<EvalGroundTruth>& gts,
                            double iou_thresh, int class_count) {
    APReport r;
    r.num_detections = detections.size();
    r.num_gt = gts.size();
    double sum = 0;
    int defined = 0;
    for (int c = 1; c <= class_count; ++c) {
        if (auto ap = compute_ap(detections, gts, iou_thresh, c)) {
            r.per_class[c] = *ap;
            sum += *ap;
            ++defined;
        }
    }
    r.map = defined > 0 ? sum / defined : 0.0;
    return r;
}

/// Run the detector over a dataset and score it.
template <typename T>
APReport evaluate_detector(const DetectorModel<T>& model, const Dataset& data, double iou_thresh = 0.5,
                           const DetectOpts& opts = {}) {
    std::vector<EvalDetection> dets;
    std::vector<EvalGroundTruth> gts;
    for (std::size_t i = 0; i < data.size(); ++i) {
        const Image img = data.load_image(i);
        for (const auto& d : detect(model, img, opts)) {
            dets.push_back(EvalDetection{static_cast<int>(i), d.item.class_id, d.confidence, d.item.box});
        }
        for (const auto& lb : data.record(i).boxes) {
            gts.push_back(EvalGroundTruth{static_cast<int>(i), lb.class_id, lb.box});
        }
    }
    return compute_map(dets, gts, iou_thresh, model.cfg.class_count);
}

}  // namespace shiftdet
