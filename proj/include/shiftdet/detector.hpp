#pragma once

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "shiftdet/autodiff.hpp"
#include "shiftdet/geometry.hpp"
#include "shiftdet/image.hpp"
#include "shiftdet/params.hpp"
#include "shiftdet/rng.hpp"

namespace shiftdet {

struct DetectorConfig {
    int class_count = 3;
    int stride = 16;
    std::vector<int> backbone_channels = {32, 32, 48, 64};  // four stride-2 stages
    int rpn_channels = 64;
    int head_hidden = 256;
    int roi_bins = 6;
    std::vector<double> anchor_scales = {96.0, 160.0, 256.0};
    std::vector<double> anchor_ratios = {0.5, 1.0, 2.0};

    int anchors_per_location() const { return static_cast<int>(anchor_scales.size() * anchor_ratios.size()); }
    int feature_channels() const { return backbone_channels.back(); }
};

/// Spatial features of one image together with the pixel stride that maps
/// feature cells back onto the input.
template <typename T>
struct FeatureMap {
    Var<T> values;  // (1, C, H, W)
    double stride = 16;

    int channels() const { return values.value().shape[1]; }
    int height() const { return values.value().shape[2]; }
    int width() const { return values.value().shape[3]; }
};

struct Proposal {
    Box box;
    double objectness = 0;
};

struct Detection {
    LabeledBox item;
    double confidence = 0;
};
using DetectionResult = std::vector<Detection>;

/// Minimal two-stage detector: a four-stage stride-2 conv backbone, an RPN
/// over location-major anchors, and a single-hidden-layer ROI head whose
/// penultimate activation doubles as the instance feature hook.
template <typename T>
struct DetectorModel {
    DetectorConfig cfg;
    std::vector<ParamPtr<T>> conv_w, conv_b;
    ParamPtr<T> rpn_w, rpn_b, rpn_cls_w, rpn_cls_b, rpn_reg_w, rpn_reg_b;
    ParamPtr<T> fc1_w, fc1_b, cls_w, cls_b, reg_w, reg_b;

    static DetectorModel init(const DetectorConfig& cfg, Rng& rng) {
        DetectorModel m;
        m.cfg = cfg;
        int in_ch = 3;
        for (std::size_t i = 0; i < cfg.backbone_channels.size(); ++i) {
            const int out_ch = cfg.backbone_channels[i];
            m.conv_w.push_back(init_param<T>("backbone.conv" + std::to_string(i) + ".w", {out_ch, in_ch, 3, 3},
                                             in_ch * 9, rng));
            m.conv_b.push_back(zero_param<T>("backbone.conv" + std::to_string(i) + ".b", {out_ch}));
            in_ch = out_ch;
        }
        const int fc = cfg.feature_channels();
        const int a = cfg.anchors_per_location();
        m.rpn_w = init_param<T>("rpn.conv.w", {cfg.rpn_channels, fc, 3, 3}, fc * 9, rng);
        m.rpn_b = zero_param<T>("rpn.conv.b", {cfg.rpn_channels});
        m.rpn_cls_w = init_param<T>("rpn.cls.w", {a, cfg.rpn_channels, 1, 1}, cfg.rpn_channels, rng);
        m.rpn_cls_b = zero_param<T>("rpn.cls.b", {a});
        m.rpn_reg_w = init_param<T>("rpn.reg.w", {4 * a, cfg.rpn_channels, 1, 1}, cfg.rpn_channels, rng);
        m.rpn_reg_b = zero_param<T>("rpn.reg.b", {4 * a});
        const int flat = fc * cfg.roi_bins * cfg.roi_bins;
        const int nc = cfg.class_count + 1;
        m.fc1_w = init_param<T>("head.fc1.w", {cfg.head_hidden, flat}, flat, rng);
        m.fc1_b = zero_param<T>("head.fc1.b", {cfg.head_hidden});
        m.cls_w = init_param<T>("head.cls.w", {nc, cfg.head_hidden}, cfg.head_hidden, rng);
        m.cls_b = zero_param<T>("head.cls.b", {nc});
        m.reg_w = init_param<T>("head.reg.w", {4 * nc, cfg.head_hidden}, cfg.head_hidden, rng);
        m.reg_b = zero_param<T>("head.reg.b", {4 * nc});
        return m;
    }

    std::vector<ParamPtr<T>> backbone_params() const {
        std::vector<ParamPtr<T>> out;
        for (std::size_t i = 0; i < conv_w.size(); ++i) {
            out.push_back(conv_w[i]);
            out.push_back(conv_b[i]);
        }
        return out;
    }

    std::vector<ParamPtr<T>> all_params() const {
        std::vector<ParamPtr<T>> out = backbone_params();
        for (auto& p : {rpn_w, rpn_b, rpn_cls_w, rpn_cls_b, rpn_reg_w, rpn_reg_b, fc1_w, fc1_b, cls_w, cls_b,
                        reg_w, reg_b})
            out.push_back(p);
        return out;
    }

    /// Deep copy with independent parameter storage.
    DetectorModel clone() const {
        DetectorModel m;
        m.cfg = cfg;
        auto cp = [](const ParamPtr<T>& p) { return make_param<T>(p->name, p->value); };
        for (std::size_t i = 0; i < conv_w.size(); ++i) {
            m.conv_w.push_back(cp(conv_w[i]));
            m.conv_b.push_back(cp(conv_b[i]));
        }
        m.rpn_w = cp(rpn_w);
        m.rpn_b = cp(rpn_b);
        m.rpn_cls_w = cp(rpn_cls_w);
        m.rpn_cls_b = cp(rpn_cls_b);
        m.rpn_reg_w = cp(rpn_reg_w);
        m.rpn_reg_b = cp(rpn_reg_b);
        m.fc1_w = cp(fc1_w);
        m.fc1_b = cp(fc1_b);
        m.cls_w = cp(cls_w);
        m.cls_b = cp(cls_b);
        m.reg_w = cp(reg_w);
        m.reg_b = cp(reg_b);
        return m;
    }
};

template <typename T>
Var<T> detector_input(const Image& img, int stride) {
    if (img.width <= 0 || img.height <= 0) throw std::invalid_argument("detector_input: empty image");
    const int ph = ((img.height + stride - 1) / stride) * stride;
    const int pw = ((img.width + stride - 1) / stride) * stride;
    Tensor<T> t({1, 3, ph, pw});
    const std::size_t plane = static_cast<std::size_t>(ph) * pw;
    for (int y = 0; y < img.height; ++y) {
        for (int x = 0; x < img.width; ++x) {
            for (int c = 0; c < 3; ++c) {
                t[static_cast<std::size_t>(c) * plane + static_cast<std::size_t>(y) * pw + x] =
                    static_cast<T>(img.at(x, y, c));
            }
        }
    }
    return Var<T>::constant(std::move(t));
}

/// Forward through the conv stack given an explicit parameter set (the frozen
/// source extractor reuses this with its own copies).
template <typename T>
FeatureMap<T> backbone_forward_with(const DetectorConfig& cfg, const std::vector<ParamPtr<T>>& bb_params,
                                    GraphParams<T>& g, const Image& img, bool trainable = true) {
    Var<T> x = detector_input<T>(img, cfg.stride);
    for (std::size_t i = 0; i + 1 < bb_params.size(); i += 2) {
        x = relu(conv2d(x, g.use(bb_params[i], trainable), g.use(bb_params[i + 1], trainable), 2, 1));
    }
    return FeatureMap<T>{x, static_cast<double>(cfg.stride)};
}

template <typename T>
FeatureMap<T> backbone_forward(const DetectorModel<T>& m, GraphParams<T>& g, const Image& img,
                               bool trainable = true) {
    return backbone_forward_with(m.cfg, m.backbone_params(), g, img, trainable);
}

template <typename T>
struct RpnOut {
    Var<T> objectness;  // (H*W*A, 1) logits, location-major anchor order
    Var<T> deltas;      // (H*W*A, 4)
    int feat_h = 0, feat_w = 0;
};

template <typename T>
RpnOut<T> rpn_forward(const DetectorModel<T>& m, GraphParams<T>& g, const FeatureMap<T>& fm,
                      bool trainable = true) {
    Var<T> h = relu(conv2d(fm.values, g.use(m.rpn_w, trainable), g.use(m.rpn_b, trainable), 1, 1));
    Var<T> obj = conv2d(h, g.use(m.rpn_cls_w, trainable), g.use(m.rpn_cls_b, trainable), 1, 0);
    Var<T> reg = conv2d(h, g.use(m.rpn_reg_w, trainable), g.use(m.rpn_reg_b, trainable), 1, 0);
    RpnOut<T> out;
    out.objectness = anchor_order_rows(obj, 1);
    out.deltas = anchor_order_rows(reg, 4);
    out.feat_h = fm.height();
    out.feat_w = fm.width();
    return out;
}

struct ProposalParams {
    int pre_nms_top_k = 600;
    double nms_thresh = 0.7;
    int post_nms_top_k = 64;
    double min_size = 2.0;
};

/// Decode, clip, drop degenerate, NMS, keep top-k. Scores tie-break by anchor
/// index (stable order), so equal objectness yields index order.
template <typename T>
std::vector<Proposal> generate_proposals(const std::vector<Anchor>& anchors, const Tensor<T>& objectness,
                                         const Tensor<T>& deltas, double image_w, double image_h,
                                         const ProposalParams& pp) {
    if (objectness.numel() != anchors.size() || deltas.numel() != anchors.size() * 4)
        throw std::invalid_argument("generate_proposals: shape mismatch");
    std::vector<std::size_t> order(anchors.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return objectness[a] > objectness[b]; });
    if (order.size() > static_cast<std::size_t>(pp.pre_nms_top_k)) order.resize(static_cast<std::size_t>(pp.pre_nms_top_k));

    std::vector<Box> boxes;
    std::vector<double> scores;
    for (std::size_t i : order) {
        BoxDeltas d{static_cast<double>(deltas[i * 4]), static_cast<double>(deltas[i * 4 + 1]),
                    static_cast<double>(deltas[i * 4 + 2]), static_cast<double>(deltas[i * 4 + 3])};
        Box b = decode_deltas(anchors[i].box, d);
        if (!clip_box(b, image_w, image_h)) continue;
        if (b.width() < pp.min_size || b.height() < pp.min_size) continue;
        boxes.push_back(b);
        scores.push_back(1.0 / (1.0 + std::exp(-static_cast<double>(objectness[i]))));
    }
    const auto kept = nms(boxes, scores, pp.nms_thresh);
    std::vector<Proposal> out;
    for (std::size_t k : kept) {
        if (out.size() >= static_cast<std::size_t>(pp.post_nms_top_k)) break;
        out.push_back(Proposal{boxes[k], scores[k]});
    }
    return out;
}

/// Classic max-pool ROI pooling of image-space boxes. (N, C, bins, bins).
template <typename T>
Var<T> roi_pool(const FeatureMap<T>& fm, const std::vector<Box>& boxes, int bins_h, int bins_w) {
    std::vector<std::array<double, 4>> rois;
    rois.reserve(boxes.size());
    for (const auto& b : boxes) rois.push_back({b.x1, b.y1, b.x2, b.y2});
    Var<T> fm3 = reshape(fm.values, {fm.channels(), fm.height(), fm.width()});
    return roi_max_pool(fm3, rois, fm.stride, bins_h, bins_w);
}

template <typename T>
struct HeadsOut {
    Var<T> hidden;      // (N, head_hidden) — the instance feature hook
    Var<T> cls_logits;  // (N, C+1), background at index 0
    Var<T> reg;         // (N, 4*(C+1)), class-specific deltas
};

template <typename T>
HeadsOut<T> heads_forward(const DetectorModel<T>& m, GraphParams<T>& g, const Var<T>& roi_feats,
                          bool trainable = true) {
    const auto& s = roi_feats.value().shape;
    const int N = s[0];
    int flat = 1;
    for (std::size_t i = 1; i < s.size(); ++i) flat *= s[i];
    Var<T> x = reshape(roi_feats, {N, flat});
    HeadsOut<T> out;
    out.hidden = relu(linear(x, g.use(m.fc1_w, trainable), g.use(m.fc1_b, trainable)));
    out.cls_logits = linear(out.hidden, g.use(m.cls_w, trainable), g.use(m.cls_b, trainable));
    out.reg = linear(out.hidden, g.use(m.reg_w, trainable), g.use(m.reg_b, trainable));
    return out;
}

struct RoiSampleOpts {
    int cap = 64;
    double fg_thresh = 0.5;
    double bg_lo = 0.1;
    double bg_hi = 0.5;
};

struct RoiSample {
    std::vector<Box> boxes;
    std::vector<int> labels;           // 0 = background
    std::vector<int> fg_rows;          // indices into boxes
    std::vector<BoxDeltas> fg_targets; // parallel to fg_rows
};

/// Foreground = IOU >= fg_thresh (labeled by the argmax-IOU GT); background =
/// IOU in [bg_lo, bg_hi); sampled at 1:3 fg:bg up to the cap. With no GT at
/// all, everything is background.
inline RoiSample default_roi_sample(const std::vector<Proposal>& proposals, const std::vector<LabeledBox>& gt,
                                    Rng& rng, const RoiSampleOpts& opts = {}) {
    std::vector<std::size_t> fg_cand, bg_cand;
    std::vector<int> best_gt(proposals.size(), -1);
    for (std::size_t i = 0; i < proposals.size(); ++i) {
        double best = 0;
        for (std::size_t j = 0; j < gt.size(); ++j) {
            const double v = iou(proposals[i].box, gt[j].box);
            if (v > best) {
                best = v;
                best_gt[i] = static_cast<int>(j);
            }
        }
        if (gt.empty()) {
            bg_cand.push_back(i);
        } else if (best >= opts.fg_thresh) {
            fg_cand.push_back(i);
        } else if (best >= opts.bg_lo && best < opts.bg_hi) {
            bg_cand.push_back(i);
        }
    }
    const std::size_t fg_keep = std::min<std::size_t>(fg_cand.size(), static_cast<std::size_t>(opts.cap / 4));
    std::size_t bg_keep;
    if (fg_keep == 0) {
        bg_keep = std::min<std::size_t>(bg_cand.size(), static_cast<std::size_t>(opts.cap));
    } else {
        bg_keep = std::min({bg_cand.size(), 3 * fg_keep, static_cast<std::size_t>(opts.cap) - fg_keep});
    }
    RoiSample out;
    for (std::size_t k : rng.sample_without_replacement(fg_cand.size(), fg_keep)) {
        const std::size_t i = fg_cand[k];
        out.fg_rows.push_back(static_cast<int>(out.boxes.size()));
        out.boxes.push_back(proposals[i].box);
        out.labels.push_back(gt[static_cast<std::size_t>(best_gt[i])].class_id);
        out.fg_targets.push_back(encode_deltas(gt[static_cast<std::size_t>(best_gt[i])].box, proposals[i].box));
    }
    for (std::size_t k : rng.sample_without_replacement(bg_cand.size(), bg_keep)) {
        out.boxes.push_back(proposals[bg_cand[k]].box);
        out.labels.push_back(0);
    }
    return out;
}

struct RpnTargetOpts {
    double fg_thresh = 0.7;
    double bg_thresh = 0.3;
    int n_sample = 64;
    int fg_cap = 32;
};

struct RpnTargets {
    std::vector<int> sampled;          // anchor indices
    std::vector<double> labels;        // parallel, 1 fg / 0 bg
    std::vector<int> fg_anchors;       // subset of sampled that are fg
    std::vector<BoxDeltas> fg_deltas;  // parallel to fg_anchors
};

inline RpnTargets assign_rpn_targets(const std::vector<Anchor>& anchors, const std::vector<LabeledBox>& gt,
                                     Rng& rng, const RpnTargetOpts& opts = {}) {
    std::vector<double> best_iou(anchors.size(), 0.0);
    std::vector<int> best_gt(anchors.size(), -1);
    std::vector<std::size_t> gt_best_anchor(gt.size(), 0);
    std::vector<double> gt_best_iou(gt.size(), -1.0);
    for (std::size_t i = 0; i < anchors.size(); ++i) {
        for (std::size_t j = 0; j < gt.size(); ++j) {
            const double v = iou(anchors[i].box, gt[j].box);
            if (v > best_iou[i]) {
                best_iou[i] = v;
                best_gt[i] = static_cast<int>(j);
            }
            if (v > gt_best_iou[j]) {
                gt_best_iou[j] = v;
                gt_best_anchor[j] = i;
            }
        }
    }
    std::vector<std::size_t> fg_cand, bg_cand;
    std::vector<char> is_fg(anchors.size(), 0);
    for (std::size_t j = 0; j < gt.size(); ++j) {
        if (gt_best_iou[j] > 0) is_fg[gt_best_anchor[j]] = 1;  // each GT claims its best anchor
    }
    for (std::size_t i = 0; i < anchors.size(); ++i) {
        if (best_iou[i] >= opts.fg_thresh) is_fg[i] = 1;
        if (is_fg[i]) {
            fg_cand.push_back(i);
        } else if (best_iou[i] < opts.bg_thresh) {
            bg_cand.push_back(i);
        }
    }
    const std::size_t fg_keep = std::min<std::size_t>(fg_cand.size(), static_cast<std::size_t>(opts.fg_cap));
    const std::size_t bg_keep =
        std::min<std::size_t>(bg_cand.size(), static_cast<std::size_t>(opts.n_sample) - fg_keep);
    RpnTargets out;
    for (std::size_t k : rng.sample_without_replacement(fg_cand.size(), fg_keep)) {
        const std::size_t i = fg_cand[k];
        out.sampled.push_back(static_cast<int>(i));
        out.labels.push_back(1.0);
        out.fg_anchors.push_back(static_cast<int>(i));
        out.fg_deltas.push_back(encode_deltas(gt[static_cast<std::size_t>(best_gt[i])].box, anchors[i].box));
    }
    for (std::size_t k : rng.sample_without_replacement(bg_cand.size(), bg_keep)) {
        out.sampled.push_back(static_cast<int>(bg_cand[k]));
        out.labels.push_back(0.0);
    }
    return out;
}

struct DetectionLossOpts {
    ProposalParams proposals;
    RoiSampleOpts roi;
    RpnTargetOpts rpn;
    bool append_gt_proposals = true;  // keeps head training alive while the RPN is young
};

/// RPN outputs plus decoded proposals for one image; shared between the
/// detection loss and the instance-feature sampling.
template <typename T>
struct DetForward {
    RpnOut<T> rpn;
    std::vector<Anchor> anchors;
    std::vector<Proposal> proposals;
};

template <typename T>
DetForward<T> det_forward(const DetectorModel<T>& m, GraphParams<T>& g, const FeatureMap<T>& fm, double image_w,
                          double image_h, const ProposalParams& pp = {}, bool trainable = true) {
    DetForward<T> out;
    out.rpn = rpn_forward(m, g, fm, trainable);
    out.anchors = generate_anchors(out.rpn.feat_h, out.rpn.feat_w, fm.stride, m.cfg.anchor_scales,
                                   m.cfg.anchor_ratios);
    out.proposals = generate_proposals(out.anchors, out.rpn.objectness.detached().value(),
                                       out.rpn.deltas.detached().value(), image_w, image_h, pp);
    return out;
}

/// RPN cls + RPN reg + head cls + head reg computed against one image's
/// annotations from a precomputed forward pass.
template <typename T>
Var<T> detection_loss_from(const DetectorModel<T>& m, GraphParams<T>& g, const FeatureMap<T>& fm,
                           const DetForward<T>& fwd, const std::vector<LabeledBox>& gt, Rng& rng,
                           const DetectionLossOpts& opts = {}, bool trainable = true) {
    const RpnOut<T>& rpn = fwd.rpn;
    const auto& anchors = fwd.anchors;
    const RpnTargets tgt = assign_rpn_targets(anchors, gt, rng, opts.rpn);
    Var<T> loss = zero_scalar<T>();
    if (!tgt.sampled.empty()) {
        Var<T> z = reshape(rows_select(rpn.objectness, tgt.sampled), {static_cast<int>(tgt.sampled.size())});
        loss = add(loss, bce_with_logits(z, tgt.labels));
    }
    if (!tgt.fg_anchors.empty()) {
        Tensor<T> t({static_cast<int>(tgt.fg_anchors.size()), 4});
        for (std::size_t i = 0; i < tgt.fg_deltas.size(); ++i) {
            t[i * 4] = static_cast<T>(tgt.fg_deltas[i].dx);
            t[i * 4 + 1] = static_cast<T>(tgt.fg_deltas[i].dy);
            t[i * 4 + 2] = static_cast<T>(tgt.fg_deltas[i].dw);
            t[i * 4 + 3] = static_cast<T>(tgt.fg_deltas[i].dh);
        }
        loss = add(loss, smooth_l1(rows_select(rpn.deltas, tgt.fg_anchors), t,
                                   static_cast<double>(tgt.fg_anchors.size())));
    }

    std::vector<Proposal> props = fwd.proposals;
    if (opts.append_gt_proposals) {
        for (const auto& lb : gt) props.push_back(Proposal{lb.box, 1.0});
    }
    const RoiSample rs = default_roi_sample(props, gt, rng, opts.roi);
    if (!rs.boxes.empty()) {
        Var<T> pooled = roi_pool(fm, rs.boxes, m.cfg.roi_bins, m.cfg.roi_bins);
        HeadsOut<T> heads = heads_forward(m, g, pooled, trainable);
        loss = add(loss, softmax_cross_entropy(heads.cls_logits, rs.labels));
        if (!rs.fg_rows.empty()) {
            const int nc = m.cfg.class_count + 1;
            // per-row class window of the (N, 4*(C+1)) regression output
            Var<T> reg_rows = reshape(heads.reg, {static_cast<int>(rs.boxes.size()) * nc, 4});
            std::vector<int> sel;
            Tensor<T> t({static_cast<int>(rs.fg_rows.size()), 4});
            for (std::size_t i = 0; i < rs.fg_rows.size(); ++i) {
                sel.push_back(rs.fg_rows[i] * nc + rs.labels[static_cast<std::size_t>(rs.fg_rows[i])]);
                t[i * 4] = static_cast<T>(rs.fg_targets[i].dx);
                t[i * 4 + 1] = static_cast<T>(rs.fg_targets[i].dy);
                t[i * 4 + 2] = static_cast<T>(rs.fg_targets[i].dw);
                t[i * 4 + 3] = static_cast<T>(rs.fg_targets[i].dh);
            }
            loss = add(loss, smooth_l1(rows_select(reg_rows, sel), t, static_cast<double>(rs.fg_rows.size())));
        }
    }
    return loss;
}

/// Composite: forward the RPN for this feature map, then score against gt.
template <typename T>
Var<T> detection_loss(const DetectorModel<T>& m, GraphParams<T>& g, const FeatureMap<T>& fm, double image_w,
                      double image_h, const std::vector<LabeledBox>& gt, Rng& rng,
                      const DetectionLossOpts& opts = {}, bool trainable = true) {
    const DetForward<T> fwd = det_forward(m, g, fm, image_w, image_h, opts.proposals, trainable);
    return detection_loss_from(m, g, fm, fwd, gt, rng, opts, trainable);
}

/// Convenience overload running its own backbone forward.
template <typename T>
Var<T> detection_loss(const DetectorModel<T>& m, GraphParams<T>& g, const Image& img,
                      const std::vector<LabeledBox>& gt, Rng& rng, const DetectionLossOpts& opts = {}) {
    FeatureMap<T> fm = backbone_forward(m, g, img);
    return detection_loss(m, g, fm, img.width, img.height, gt, rng, opts);
}

struct DetectOpts {
    double score_thresh = 0.05;
    double nms_thresh = 0.45;
    ProposalParams proposals{600, 0.7, 100, 2.0};
};

/// Inference: proposals, heads, per-class NMS. Deterministic for fixed
/// parameters; result sorted by class then descending confidence.
template <typename T>
DetectionResult detect(const DetectorModel<T>& m, const Image& img, const DetectOpts& opts = {}) {
    GraphParams<T> g;
    FeatureMap<T> fm = backbone_forward(m, g, img, false);
    RpnOut<T> rpn = rpn_forward(m, g, fm, false);
    const auto anchors =
        generate_anchors(rpn.feat_h, rpn.feat_w, fm.stride, m.cfg.anchor_scales, m.cfg.anchor_ratios);
    const auto props = generate_proposals(anchors, rpn.objectness.value(), rpn.deltas.value(),
                                          static_cast<double>(img.width), static_cast<double>(img.height),
                                          opts.proposals);
    DetectionResult result;
    if (props.empty()) return result;
    std::vector<Box> boxes;
    for (const auto& p : props) boxes.push_back(p.box);
    Var<T> pooled = roi_pool(fm, boxes, m.cfg.roi_bins, m.cfg.roi_bins);
    HeadsOut<T> heads = heads_forward(m, g, pooled, false);

    const int N = static_cast<int>(boxes.size());
    const int nc = m.cfg.class_count + 1;
    const auto& logits = heads.cls_logits.value();
    const auto& reg = heads.reg.value();
    std::vector<double> probs(static_cast<std::size_t>(N) * nc);
    for (int n = 0; n < N; ++n) {
        double mx = logits[static_cast<std::size_t>(n) * nc];
        for (int k = 1; k < nc; ++k) mx = std::max(mx, static_cast<double>(logits[static_cast<std::size_t>(n) * nc + k]));
        double sum = 0;
        for (int k = 0; k < nc; ++k) {
            probs[static_cast<std::size_t>(n) * nc + k] = std::exp(logits[static_cast<std::size_t>(n) * nc + k] - mx);
            sum += probs[static_cast<std::size_t>(n) * nc + k];
        }
        for (int k = 0; k < nc; ++k) probs[static_cast<std::size_t>(n) * nc + k] /= sum;
    }
    for (int c = 1; c < nc; ++c) {
        std::vector<Box> cb;
        std::vector<double> cs;
        for (int n = 0; n < N; ++n) {
            const double score = probs[static_cast<std::size_t>(n) * nc + c];
            if (score < opts.score_thresh) continue;
            BoxDeltas d{static_cast<double>(reg[(static_cast<std::size_t>(n) * nc + c) * 4]),
                        static_cast<double>(reg[(static_cast<std::size_t>(n) * nc + c) * 4 + 1]),
                        static_cast<double>(reg[(static_cast<std::size_t>(n) * nc + c) * 4 + 2]),
                        static_cast<double>(reg[(static_cast<std::size_t>(n) * nc + c) * 4 + 3])};
            Box b = decode_deltas(boxes[static_cast<std::size_t>(n)], d);
            if (!clip_box(b, img.width, img.height)) continue;
            if (b.width() < 1 || b.height() < 1) continue;
            cb.push_back(b);
            cs.push_back(score);
        }
        for (std::size_t k : nms(cb, cs, opts.nms_thresh)) {
            result.push_back(Detection{LabeledBox{cb[k], c}, cs[k]});
        }
    }
    std::stable_sort(result.begin(), result.end(), [](const Detection& a, const Detection& b) {
        if (a.item.class_id != b.item.class_id) return a.item.class_id < b.item.class_id;
        return a.confidence > b.confidence;
    });
    return result;
}

// ---- checkpoint io ----------------------------------------------------------

namespace ckpt {
constexpr char magic[8] = {'S', 'D', 'E', 'T', 'C', 'K', 'P', 'T'};
constexpr std::uint32_t version = 1;

template <typename T>
const char* dtype_tag() {
    if constexpr (std::is_same_v<T, float>) return "f32";
    else if constexpr (std::is_same_v<T, double>) return "f64";
    else return "unknown";
}
}  // namespace ckpt

template <typename T>
void save_checkpoint(const std::filesystem::path& path, const DetectorModel<T>& m) {
    nlohmann::json manifest;
    manifest["format_version"] = ckpt::version;
    manifest["dtype"] = ckpt::dtype_tag<T>();
    manifest["class_count"] = m.cfg.class_count;
    manifest["stride"] = m.cfg.stride;
    manifest["backbone_channels"] = m.cfg.backbone_channels;
    manifest["rpn_channels"] = m.cfg.rpn_channels;
    manifest["head_hidden"] = m.cfg.head_hidden;
    manifest["roi_bins"] = m.cfg.roi_bins;
    manifest["anchor_scales"] = m.cfg.anchor_scales;
    manifest["anchor_ratios"] = m.cfg.anchor_ratios;
    nlohmann::json tensors = nlohmann::json::array();
    std::size_t offset = 0;
    const auto params = m.all_params();
    for (const auto& p : params) {
        tensors.push_back({{"name", p->name}, {"shape", p->value.shape}, {"offset", offset}});
        offset += p->value.numel();
    }
    manifest["tensors"] = tensors;
    const std::string ms = manifest.dump();

    std::ofstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("save_checkpoint: cannot open " + path.string());
    f.write(ckpt::magic, 8);
    const std::uint32_t mlen = static_cast<std::uint32_t>(ms.size());
    f.write(reinterpret_cast<const char*>(&mlen), 4);
    f.write(ms.data(), static_cast<std::streamsize>(ms.size()));
    for (const auto& p : params) {
        f.write(reinterpret_cast<const char*>(p->value.ptr()),
                static_cast<std::streamsize>(p->value.numel() * sizeof(T)));
    }
    if (!f) throw std::runtime_error("save_checkpoint: write failed for " + path.string());
}

template <typename T>
DetectorModel<T> load_checkpoint(const std::filesystem::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("load_checkpoint: cannot open " + path.string());
    char magic[8];
    f.read(magic, 8);
    if (!f || std::memcmp(magic, ckpt::magic, 8) != 0)
        throw std::runtime_error("load_checkpoint: not a detector checkpoint: " + path.string());
    std::uint32_t mlen = 0;
    f.read(reinterpret_cast<char*>(&mlen), 4);
    std::string ms(mlen, '\0');
    f.read(ms.data(), mlen);
    if (!f) throw std::runtime_error("load_checkpoint: truncated manifest");
    const auto manifest = nlohmann::json::parse(ms);
    if (manifest.at("format_version").get<std::uint32_t>() != ckpt::version)
        throw std::runtime_error("load_checkpoint: unsupported format version");
    if (manifest.at("dtype").get<std::string>() != ckpt::dtype_tag<T>())
        throw std::runtime_error("load_checkpoint: dtype mismatch");

    DetectorConfig cfg;
    cfg.class_count = manifest.at("class_count").get<int>();
    cfg.stride = manifest.at("stride").get<int>();
    cfg.backbone_channels = manifest.at("backbone_channels").get<std::vector<int>>();
    cfg.rpn_channels = manifest.at("rpn_channels").get<int>();
    cfg.head_hidden = manifest.at("head_hidden").get<int>();
    cfg.roi_bins = manifest.at("roi_bins").get<int>();
    cfg.anchor_scales = manifest.at("anchor_scales").get<std::vector<double>>();
    cfg.anchor_ratios = manifest.at("anchor_ratios").get<std::vector<double>>();

    Rng dummy(0);
    DetectorModel<T> m = DetectorModel<T>::init(cfg, dummy);
    const auto params = m.all_params();
    const auto& tensors = manifest.at("tensors");
    if (tensors.size() != params.size()) throw std::runtime_error("load_checkpoint: tensor count mismatch");
    for (std::size_t i = 0; i < params.size(); ++i) {
        const auto& tj = tensors[i];
        if (tj.at("name").get<std::string>() != params[i]->name ||
            tj.at("shape").get<std::vector<int>>() != params[i]->value.shape)
            throw std::runtime_error("load_checkpoint: manifest does not match architecture");
        f.read(reinterpret_cast<char*>(params[i]->value.ptr()),
               static_cast<std::streamsize>(params[i]->value.numel() * sizeof(T)));
    }
    if (!f) throw std::runtime_error("load_checkpoint: truncated tensor data");
    return m;
}

}  // namespace shiftdet
