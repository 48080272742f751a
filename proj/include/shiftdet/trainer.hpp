#pragma once

#include <nlohmann/json.hpp>

#include <array>
#include <chrono>
#include <cmath>
#include <iostream>
#include <map>
#include <optional>
#include <ostream>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include "shiftdet/adversarial.hpp"
#include "shiftdet/detector.hpp"
#include "shiftdet/instance_features.hpp"
#include "shiftdet/pairing.hpp"
#include "shiftdet/smfr.hpp"
#include "shiftdet/split_pooling.hpp"
#include "shiftdet/synthdata.hpp"

namespace shiftdet {

/// All adaptation hyperparameters and component toggles. JSON round-trips
/// with exactly these field names; unknown keys are rejected.
struct AdaptConfig {
    double alpha = 0.5;
    double beta = 1.0;
    double lambda = 1.0;
    int steps = 500;
    bool sp_s = true, sp_m = true, sp_l = true;
    bool ins = true;
    bool ft = true;
    bool pairing = true;
    bool smfr = true;
    bool share_discriminators = true;
    double lr_detector = 1e-3;
    double lr_discriminator = 1e-3;
    int source_images_per_step = 2;
    int target_images_per_step = 8;
    int n_pairs_per_scale = 32;
    int n_pairs_per_class = 16;
    std::uint64_t seed = 0;

    bool any_sp() const { return sp_s || sp_m || sp_l; }
    std::array<bool, 3> scales_enabled() const { return {sp_s, sp_m, sp_l}; }

    void validate() const {
        if (alpha < 0 || beta < 0 || lambda < 0) throw std::invalid_argument("AdaptConfig: weights must be >= 0");
        if (steps < 0) throw std::invalid_argument("AdaptConfig: steps must be >= 0");
        if (source_images_per_step < 1 || target_images_per_step < 1 || n_pairs_per_scale < 1 ||
            n_pairs_per_class < 1)
            throw std::invalid_argument("AdaptConfig: batch sizes must be >= 1");
    }

    std::optional<std::string> warning() const {
        if (!any_sp() && !ins && !ft) return "no adaptation component enabled (sp_*, ins, ft all off)";
        return std::nullopt;
    }
};

inline nlohmann::ordered_json adapt_config_to_json(const AdaptConfig& c) {
    nlohmann::ordered_json j;
    j["alpha"] = c.alpha;
    j["beta"] = c.beta;
    j["lambda"] = c.lambda;
    j["steps"] = c.steps;
    j["sp_s"] = c.sp_s;
    j["sp_m"] = c.sp_m;
    j["sp_l"] = c.sp_l;
    j["ins"] = c.ins;
    j["ft"] = c.ft;
    j["pairing"] = c.pairing;
    j["smfr"] = c.smfr;
    j["share_discriminators"] = c.share_discriminators;
    j["lr_detector"] = c.lr_detector;
    j["lr_discriminator"] = c.lr_discriminator;
    j["source_images_per_step"] = c.source_images_per_step;
    j["target_images_per_step"] = c.target_images_per_step;
    j["n_pairs_per_scale"] = c.n_pairs_per_scale;
    j["n_pairs_per_class"] = c.n_pairs_per_class;
    j["seed"] = c.seed;
    return j;
}

inline AdaptConfig adapt_config_from_json(const nlohmann::json& j) {
    static const std::set<std::string> known = {
        "alpha", "beta", "lambda", "steps", "sp_s", "sp_m", "sp_l", "ins", "ft", "pairing", "smfr",
        "share_discriminators", "lr_detector", "lr_discriminator", "source_images_per_step",
        "target_images_per_step", "n_pairs_per_scale", "n_pairs_per_class", "seed"};
    for (auto it = j.begin(); it != j.end(); ++it) {
        if (!known.count(it.key())) throw std::invalid_argument("AdaptConfig: unknown key \"" + it.key() + "\"");
    }
    AdaptConfig c;
    auto get = [&](const char* k, auto& dst) {
        if (j.contains(k)) dst = j.at(k).template get<std::decay_t<decltype(dst)>>();
    };
    get("alpha", c.alpha);
    get("beta", c.beta);
    get("lambda", c.lambda);
    get("steps", c.steps);
    get("sp_s", c.sp_s);
    get("sp_m", c.sp_m);
    get("sp_l", c.sp_l);
    get("ins", c.ins);
    get("ft", c.ft);
    get("pairing", c.pairing);
    get("smfr", c.smfr);
    get("share_discriminators", c.share_discriminators);
    get("lr_detector", c.lr_detector);
    get("lr_discriminator", c.lr_discriminator);
    get("source_images_per_step", c.source_images_per_step);
    get("target_images_per_step", c.target_images_per_step);
    get("n_pairs_per_scale", c.n_pairs_per_scale);
    get("n_pairs_per_class", c.n_pairs_per_class);
    get("seed", c.seed);
    c.validate();
    return c;
}

/// Per-step values of every loss term (0 when disabled or skipped).
struct LossTrace {
    std::vector<double> l_det, l_im_d, l_im_g, l_ins_d, l_ins_g, l_reg, l_ft;

    std::size_t size() const { return l_det.size(); }
};

inline void write_trace_csv(std::ostream& os, const LossTrace& t) {
    os << "step,l_det,l_im_d,l_im_g,l_ins_d,l_ins_g,l_reg,l_ft\n";
    char buf[256];
    for (std::size_t i = 0; i < t.size(); ++i) {
        std::snprintf(buf, sizeof(buf), "%zu,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g\n", i, t.l_det[i], t.l_im_d[i],
                      t.l_im_g[i], t.l_ins_d[i], t.l_ins_g[i], t.l_reg[i], t.l_ft[i]);
        os << buf;
    }
}

struct AdaptationReport {
    LossTrace trace;
    std::uint64_t seed = 0;
    int steps = 0;
    double wall_seconds = 0;
    std::vector<std::string> skips;
};

// ---- source pretraining ------------------------------------------------------

struct PretrainOpts {
    int batch_size = 2;
    double lr = 1e-3;
    double momentum = 0.9;
    double grad_clip = 10.0;
    DetectorConfig detector;
};

template <typename T>
struct PretrainResult {
    DetectorModel<T> model;
    FrozenSourceExtractor<T> frozen;
    std::vector<double> loss_trace;
};

/// Minimize the detection loss on fully annotated source data. steps == 0
/// returns the freshly initialized model unchanged. Non-finite losses abort
/// with the failing step index.
template <typename T>
PretrainResult<T> pretrain(const Dataset& source, int steps, Rng rng, const PretrainOpts& opts = {}) {
    if (source.size() == 0) throw std::invalid_argument("pretrain: empty dataset");
    if (steps < 0) throw std::invalid_argument("pretrain: steps must be >= 0");
    Rng init_rng = rng.child(1);
    DetectorModel<T> model = DetectorModel<T>::init(opts.detector, init_rng);
    const auto params = model.all_params();

    PretrainResult<T> out;
    out.loss_trace.reserve(static_cast<std::size_t>(steps));
    for (int step = 0; step < steps; ++step) {
        Rng step_rng = rng.child(0x100 + static_cast<std::uint64_t>(step));
        Rng batch_rng = step_rng.child(1);
        Rng roi_rng = step_rng.child(2);
        zero_grads(params);
        GraphParams<T> g;
        Var<T> loss = zero_scalar<T>();
        for (int b = 0; b < opts.batch_size; ++b) {
            const std::size_t idx = batch_rng.uniform_index(source.size());
            const Image img = source.load_image(idx);
            Var<T> l = detection_loss(model, g, img, source.record(idx).boxes, roi_rng);
            loss = add(loss, scale(l, 1.0 / opts.batch_size));
        }
        const double lv = static_cast<double>(loss.value().item());
        if (!std::isfinite(lv)) throw std::runtime_error("pretrain: non-finite loss at step " + std::to_string(step));
        out.loss_trace.push_back(lv);
        backward(loss);
        g.pull_grads();
        clip_grad_norm(params, opts.grad_clip);
        sgd_step(params, opts.lr, opts.momentum);
    }
    out.frozen = FrozenSourceExtractor<T>::from_model(model);
    out.model = std::move(model);
    return out;
}

/// Detection loss restricted to loose annotations: the annotated boxes are
/// the only foreground and background ROIs must have IOU < 0.3 to every
/// annotated box (proposals overlapping unannotated objects become accepted
/// label noise).
template <typename T>
Var<T> finetune_loss(const DetectorModel<T>& m, GraphParams<T>& g, const FeatureMap<T>& fm,
                     const DetForward<T>& fwd, double image_w, double image_h,
                     const std::vector<LabeledBox>& annotated, Rng& rng) {
    if (annotated.empty()) throw std::invalid_argument("finetune_loss: batch without annotations");
    DetectionLossOpts opts;
    opts.roi.bg_lo = 0.0;
    opts.roi.bg_hi = 0.3;
    return detection_loss_from(m, g, fm, fwd, annotated, rng, opts);
}

template <typename T>
Var<T> finetune_loss(const DetectorModel<T>& m, GraphParams<T>& g, const Image& img,
                     const std::vector<LabeledBox>& annotated, Rng& rng) {
    FeatureMap<T> fm = backbone_forward(m, g, img);
    DetForward<T> fwd = det_forward(m, g, fm, img.width, img.height);
    return finetune_loss(m, g, fm, fwd, img.width, img.height, annotated, rng);
}

// ---- alternating adaptation ---------------------------------------------------

template <typename T>
struct AdaptResult {
    DetectorModel<T> model;
    AdaptationReport report;
};

/// Snapshot handle passed to the adaptation observer. Phases: 'i' once
/// before the loop, 'g' after each Step-1 detector update, 'd' after each
/// Step-2 discriminator update. The parameter lists are the live ones; the
/// observer must not mutate them.
template <typename T>
struct AdaptProbe {
    int step = -1;
    char phase = 'i';
    const std::vector<ParamPtr<T>>& detector_params;
    const std::vector<ParamPtr<T>>& discriminator_params;
};

template <typename T>
using StepCallback = std::function<void(const AdaptProbe<T>&)>;

namespace trainer_detail {

// fixed child-stream keys so toggling one component never shifts another's draws
enum StreamKey : std::uint64_t {
    k_batch = 1,
    k_sp_offsets_s = 2,
    k_sp_offsets_m = 3,
    k_sp_offsets_l = 4,
    k_sp_pairs_s = 5,
    k_sp_pairs_m = 6,
    k_sp_pairs_l = 7,
    k_ins_pairs = 8,
    k_det_roi = 9,
    k_ft_roi = 10,
};

template <typename T>
PairBatch<T> detach_batch(const PairBatch<T>& b) {
    PairBatch<T> out = b;
    if (b.count > 0) out.items = b.items.detached();
    return out;
}

}  // namespace trainer_detail

/// Alternating optimization. Step 1 minimizes
///   L_g = alpha*(L_im_g + L_ins_g) + beta*L_det + lambda*L_reg + beta*L_ft
/// w.r.t. detector parameters with discriminators frozen; Step 2 minimizes
///   L_d = L_im_d + L_ins_d
/// w.r.t. discriminator parameters on detached features. Disabled components
/// contribute exactly 0 and allocate no discriminators; empty patch or pair
/// batches skip their term for the step (logged in the report).
template <typename T>
AdaptResult<T> adapt(const DetectorModel<T>& source_model, const FrozenSourceExtractor<T>& frozen,
                     const Dataset& source_data, const Dataset& target_data, const FewShotSplit& fewshot,
                     const AdaptConfig& cfg, const SplitPoolConfig& sp_cfg = {},
                     const StepCallback<T>& on_phase = {}) {
    cfg.validate();
    if (auto w = cfg.warning()) std::cerr << "adapt: warning: " << *w << "\n";
    if ((cfg.ins || cfg.ft) && fewshot.items.empty())
        throw std::invalid_argument("adapt: ins/ft enabled but the few-shot split is empty");

    const auto t0 = std::chrono::steady_clock::now();
    DetectorModel<T> model = source_model.clone();
    const auto det_params = model.all_params();

    Rng run_rng(cfg.seed);
    Rng disc_rng = run_rng.child(0xFFFFFFFF0000D15Cull);  // outside the per-step key range
    const int cf = model.cfg.feature_channels();
    const int patch_in = cfg.pairing ? 2 * cf : cf;
    const int inst_in = cfg.pairing ? 2 * model.cfg.head_hidden : model.cfg.head_hidden;
    DiscriminatorBank<T> bank =
        DiscriminatorBank<T>::init(patch_in, inst_in, model.cfg.class_count,
                                   ScaleSharingPolicy{cfg.share_discriminators}, cfg.scales_enabled(), cfg.ins,
                                   disc_rng);
    const auto disc_params = bank.params();

    AdaptResult<T> out;
    out.report.seed = cfg.seed;
    out.report.steps = cfg.steps;
    auto& tr = out.report.trace;

    ProposalParams pp;  // training-time proposals
    const std::array<ScaleGroup, 3> groups = {ScaleGroup::small, ScaleGroup::medium, ScaleGroup::large};

    if (on_phase) on_phase(AdaptProbe<T>{-1, 'i', det_params, disc_params});
    for (int step = 0; step < cfg.steps; ++step) {
        Rng step_rng = run_rng.child(0x5E9 + static_cast<std::uint64_t>(step));
        Rng rng_batch = step_rng.child(trainer_detail::k_batch);
        std::array<Rng, 3> rng_sp = {step_rng.child(trainer_detail::k_sp_offsets_s),
                                     step_rng.child(trainer_detail::k_sp_offsets_m),
                                     step_rng.child(trainer_detail::k_sp_offsets_l)};
        std::array<Rng, 3> rng_pairs = {step_rng.child(trainer_detail::k_sp_pairs_s),
                                        step_rng.child(trainer_detail::k_sp_pairs_m),
                                        step_rng.child(trainer_detail::k_sp_pairs_l)};
        Rng rng_ins_pairs = step_rng.child(trainer_detail::k_ins_pairs);
        Rng rng_det_roi = step_rng.child(trainer_detail::k_det_roi);
        Rng rng_ft_roi = step_rng.child(trainer_detail::k_ft_roi);

        // batch selection
        std::vector<std::size_t> src_idx;
        for (int i = 0; i < cfg.source_images_per_step; ++i) src_idx.push_back(rng_batch.uniform_index(source_data.size()));
        std::vector<std::size_t> tgt_items;
        if (fewshot.items.size() <= static_cast<std::size_t>(cfg.target_images_per_step)) {
            for (std::size_t i = 0; i < fewshot.items.size(); ++i) tgt_items.push_back(i);
        } else {
            tgt_items = rng_batch.sample_without_replacement(fewshot.items.size(),
                                                             static_cast<std::size_t>(cfg.target_images_per_step));
        }

        // ---- Step 1: generator/detector update --------------------------------
        GraphParams<T> g;
        const bool need_det = cfg.beta > 0;
        const bool need_sp = cfg.any_sp() && cfg.alpha > 0;
        const bool need_ins = cfg.ins && cfg.alpha > 0;
        const bool need_reg = cfg.smfr && cfg.lambda > 0;
        const bool need_ft = cfg.ft && cfg.beta > 0;

        Var<T> l_det = zero_scalar<T>();
        Var<T> l_reg = zero_scalar<T>();
        Var<T> l_ft = zero_scalar<T>();
        std::array<std::vector<PatchFeatureSet<T>>, 3> src_patches, tgt_patches;
        std::map<int, std::vector<Var<T>>> src_inst, tgt_inst;

        if (need_det || need_sp || need_ins || need_reg) {
            for (std::size_t idx : src_idx) {
                const Image img = source_data.load_image(idx);
                const auto& gt = source_data.record(idx).boxes;
                FeatureMap<T> fm = backbone_forward(model, g, img);
                DetForward<T> fwd;
                if (need_det || need_ins) fwd = det_forward(model, g, fm, img.width, img.height, pp);
                if (need_det) {
                    Var<T> l = detection_loss_from(model, g, fm, fwd, gt, rng_det_roi);
                    l_det = add(l_det, scale(l, 1.0 / src_idx.size()));
                }
                if (need_reg) {
                    const Tensor<T> fs = frozen.features(img);
                    const auto anchors = fwd.anchors.empty()
                                             ? generate_anchors(fm.height(), fm.width(), fm.stride,
                                                                model.cfg.anchor_scales, model.cfg.anchor_ratios)
                                             : fwd.anchors;
                    const ForegroundMask mask = foreground_mask(anchors, gt, 0.5, fm.height(), fm.width());
                    l_reg = add(l_reg, scale(smfr_loss(fs, fm.values, mask), 1.0 / src_idx.size()));
                }
                if (need_sp) {
                    for (int s = 0; s < 3; ++s) {
                        if (!cfg.scales_enabled()[static_cast<std::size_t>(s)]) continue;
                        auto ps = split_pool(fm, img.width, img.height, groups[static_cast<std::size_t>(s)],
                                             rng_sp[static_cast<std::size_t>(s)], sp_cfg);
                        ps.source_domain = true;
                        src_patches[static_cast<std::size_t>(s)].push_back(std::move(ps));
                    }
                }
                if (need_ins) {
                    const auto rois = instance_roi_sample(fwd.proposals, gt);
                    auto feats = extract_instance_features(model, g, fm, rois);
                    for (auto& [cls, v] : feats.by_class) src_inst[cls].push_back(v);
                }
            }
            for (std::size_t ti : tgt_items) {
                if (!need_sp && !need_ins && !need_ft) break;
                const auto& item = fewshot.items[ti];
                const Image img = target_data.load_image(item.index);
                FeatureMap<T> fm = backbone_forward(model, g, img);
                DetForward<T> fwd;
                if (need_ins || need_ft) fwd = det_forward(model, g, fm, img.width, img.height, pp);
                if (need_sp) {
                    for (int s = 0; s < 3; ++s) {
                        if (!cfg.scales_enabled()[static_cast<std::size_t>(s)]) continue;
                        auto ps = split_pool(fm, img.width, img.height, groups[static_cast<std::size_t>(s)],
                                             rng_sp[static_cast<std::size_t>(s)], sp_cfg);
                        ps.source_domain = false;
                        tgt_patches[static_cast<std::size_t>(s)].push_back(std::move(ps));
                    }
                }
                if (need_ins && !item.boxes.empty()) {
                    const auto rois = instance_roi_sample(fwd.proposals, item.boxes);
                    auto feats = extract_instance_features(model, g, fm, rois);
                    for (auto& [cls, v] : feats.by_class) tgt_inst[cls].push_back(v);
                }
                if (need_ft && !item.boxes.empty()) {
                    Var<T> l = finetune_loss(model, g, fm, fwd, img.width, img.height, item.boxes, rng_ft_roi);
                    l_ft = add(l_ft, scale(l, 1.0 / tgt_items.size()));
                }
            }
        }

        // pairing + generator adversarial terms
        Var<T> l_im_g = zero_scalar<T>();
        std::array<std::pair<PairBatch<T>, PairBatch<T>>, 3> sp_batches;
        if (need_sp) {
            for (int s = 0; s < 3; ++s) {
                if (!cfg.scales_enabled()[static_cast<std::size_t>(s)]) continue;
                auto src_merged = merge_patch_sets(src_patches[static_cast<std::size_t>(s)]);
                auto tgt_merged = merge_patch_sets(tgt_patches[static_cast<std::size_t>(s)]);
                if (src_merged.count == 0 || tgt_merged.count == 0) {
                    out.report.skips.push_back("step " + std::to_string(step) + ": sp_" +
                                               scale_group_name(groups[static_cast<std::size_t>(s)])[0] +
                                               std::string(" skipped (no cells)"));
                    continue;
                }
                auto& batches = sp_batches[static_cast<std::size_t>(s)];
                batches = cfg.pairing
                              ? make_pairs(src_merged.features, tgt_merged.features, cfg.n_pairs_per_scale,
                                           rng_pairs[static_cast<std::size_t>(s)])
                              : make_single_batches(src_merged.features, tgt_merged.features,
                                                    cfg.n_pairs_per_scale, rng_pairs[static_cast<std::size_t>(s)]);
                if (batches.first.count == 0) {
                    out.report.skips.push_back("step " + std::to_string(step) + ": sp pairing skipped (too few features)");
                    continue;
                }
                const auto* d = bank.image_for(groups[static_cast<std::size_t>(s)]);
                l_im_g = add(l_im_g, g_image_loss(*d, g, batches.first, batches.second));
            }
        }

        Var<T> l_ins_g = zero_scalar<T>();
        InstancePairMap<T> inst_pairs;
        if (need_ins) {
            InstanceFeatureSet<T> os, ot;
            os.source_domain = true;
            for (auto& [cls, parts] : src_inst) os.by_class.emplace(cls, parts.size() == 1 ? parts[0] : concat_rows(parts));
            for (auto& [cls, parts] : tgt_inst) ot.by_class.emplace(cls, parts.size() == 1 ? parts[0] : concat_rows(parts));
            inst_pairs = make_instance_pairs(os, ot, cfg.n_pairs_per_class, rng_ins_pairs, cfg.pairing);
            if (inst_pairs.empty()) {
                out.report.skips.push_back("step " + std::to_string(step) + ": instance pairing skipped (no class met the pairing preconditions)");
            } else {
                l_ins_g = g_instance_loss(*bank.instance, g, inst_pairs);
            }
        }

        Var<T> l_g = scale(add(l_im_g, l_ins_g), cfg.alpha);
        l_g = add(l_g, scale(l_det, cfg.beta));
        l_g = add(l_g, scale(l_reg, cfg.lambda));
        l_g = add(l_g, scale(l_ft, cfg.beta));

        auto finite_or_throw = [&](double v, const char* name) {
            if (!std::isfinite(v))
                throw std::runtime_error("adapt: non-finite " + std::string(name) + " at step " +
                                         std::to_string(step));
            return v;
        };
        tr.l_det.push_back(finite_or_throw(static_cast<double>(l_det.value().item()), "l_det"));
        tr.l_im_g.push_back(finite_or_throw(static_cast<double>(l_im_g.value().item()), "l_im_g"));
        tr.l_ins_g.push_back(finite_or_throw(static_cast<double>(l_ins_g.value().item()), "l_ins_g"));
        tr.l_reg.push_back(finite_or_throw(static_cast<double>(l_reg.value().item()), "l_reg"));
        tr.l_ft.push_back(finite_or_throw(static_cast<double>(l_ft.value().item()), "l_ft"));

        zero_grads(det_params);
        if (l_g.requires_grad()) {
            backward(l_g);
            g.pull_grads();
            clip_grad_norm(det_params, 10.0);
            sgd_step(det_params, cfg.lr_detector, 0.9);
        }
        if (on_phase) on_phase(AdaptProbe<T>{step, 'g', det_params, disc_params});

        // ---- Step 2: discriminator update on detached features ----------------
        GraphParams<T> g2;
        Var<T> l_im_d = zero_scalar<T>();
        for (int s = 0; s < 3; ++s) {
            const auto& batches = sp_batches[static_cast<std::size_t>(s)];
            if (batches.first.count == 0) continue;
            const auto* d = bank.image_for(groups[static_cast<std::size_t>(s)]);
            l_im_d = add(l_im_d, d_image_loss(*d, g2, trainer_detail::detach_batch(batches.first),
                                              trainer_detail::detach_batch(batches.second)));
        }
        Var<T> l_ins_d = zero_scalar<T>();
        if (!inst_pairs.empty()) {
            InstancePairMap<T> detached;
            for (const auto& [cls, b] : inst_pairs) {
                detached.emplace(cls, std::make_pair(trainer_detail::detach_batch(b.first),
                                                     trainer_detail::detach_batch(b.second)));
            }
            l_ins_d = d_instance_loss(*bank.instance, g2, detached);
        }
        tr.l_im_d.push_back(finite_or_throw(static_cast<double>(l_im_d.value().item()), "l_im_d"));
        tr.l_ins_d.push_back(finite_or_throw(static_cast<double>(l_ins_d.value().item()), "l_ins_d"));

        Var<T> l_d = add(l_im_d, l_ins_d);
        zero_grads(disc_params);
        if (l_d.requires_grad()) {
            backward(l_d);
            g2.pull_grads();
            clip_grad_norm(disc_params, 10.0);
            sgd_step(disc_params, cfg.lr_discriminator, 0.9);
        }
        if (on_phase) on_phase(AdaptProbe<T>{step, 'd', det_params, disc_params});
    }

    out.report.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    out.model = std::move(model);
    return out;
}

// ---- loss/step routing audit ---------------------------------------------------

struct RoutingRow {
    std::string param_group;
    std::vector<std::string> step1_losses;
    std::vector<std::string> step2_losses;
};

/// Which loss terms touch which parameter group in which step, as implied by
/// the configuration.
inline std::vector<RoutingRow> loss_step_audit(const AdaptConfig& cfg) {
    cfg.validate();
    const bool det = cfg.beta > 0;
    const bool sp = cfg.any_sp() && cfg.alpha > 0;
    const bool ins = cfg.ins && cfg.alpha > 0;
    const bool reg = cfg.smfr && cfg.lambda > 0;
    const bool ft = cfg.ft && cfg.beta > 0;

    std::vector<RoutingRow> rows;
    {
        RoutingRow r{"detector.backbone", {}, {}};
        if (det) r.step1_losses.push_back("l_det");
        if (sp) r.step1_losses.push_back("l_im_g");
        if (ins) r.step1_losses.push_back("l_ins_g");
        if (reg) r.step1_losses.push_back("l_reg");
        if (ft) r.step1_losses.push_back("l_ft");
        rows.push_back(r);
    }
    {
        RoutingRow r{"detector.rpn", {}, {}};
        if (det) r.step1_losses.push_back("l_det");
        if (ft) r.step1_losses.push_back("l_ft");
        rows.push_back(r);
    }
    {
        RoutingRow r{"detector.head.fc1", {}, {}};
        if (det) r.step1_losses.push_back("l_det");
        if (ins) r.step1_losses.push_back("l_ins_g");
        if (ft) r.step1_losses.push_back("l_ft");
        rows.push_back(r);
    }
    {
        RoutingRow r{"detector.head.outputs", {}, {}};
        if (det) r.step1_losses.push_back("l_det");
        if (ft) r.step1_losses.push_back("l_ft");
        rows.push_back(r);
    }
    if (sp) rows.push_back(RoutingRow{"discriminator.image", {}, {"l_im_d"}});
    if (ins) rows.push_back(RoutingRow{"discriminator.instance", {}, {"l_ins_d"}});
    return rows;
}

}  // namespace shiftdet
