#include <catch2/catch_amalgamated.hpp>

#include <filesystem>
#include <sstream>

#include "shiftdet/eval.hpp"
#include "shiftdet/trainer.hpp"

using namespace shiftdet;
namespace fs = std::filesystem;

namespace {
DetectorConfig tiny_config() {
    DetectorConfig cfg;
    cfg.backbone_channels = {8, 8, 12, 16};
    cfg.rpn_channels = 16;
    cfg.head_hidden = 32;
    return cfg;
}

struct Fixture {
    fs::path src_dir, tgt_dir;
    Dataset source, target;
    FewShotSplit split;

    Fixture() {
        src_dir = fs::temp_directory_path() / "shiftdet_tr_src";
        tgt_dir = fs::temp_directory_path() / "shiftdet_tr_tgt";
        fs::remove_all(src_dir);
        fs::remove_all(tgt_dir);
        Rng g1(1001), g2(1001);
        source = gen_dataset(6, default_source_domain(), {}, g1, src_dir, "source", 320);
        target = gen_dataset(5, default_target_domain(), {}, g2, tgt_dir, "target", 320);
        Rng lr(5);
        split = loose_annotate(target, 4, 2, {1, 2, 3}, lr);
    }
    ~Fixture() {
        fs::remove_all(src_dir);
        fs::remove_all(tgt_dir);
    }
};

AdaptConfig quick_cfg(int steps = 2) {
    AdaptConfig cfg;
    cfg.steps = steps;
    cfg.seed = 42;
    cfg.n_pairs_per_scale = 8;
    cfg.n_pairs_per_class = 4;
    cfg.target_images_per_step = 4;
    return cfg;
}
}  // namespace

TEST_CASE("AdaptConfig JSON round trip and strictness") {
    AdaptConfig cfg;
    cfg.alpha = 0.25;
    cfg.sp_m = false;
    cfg.seed = 99;
    const auto j = adapt_config_to_json(cfg);
    const AdaptConfig back = adapt_config_from_json(nlohmann::json::parse(j.dump()));
    CHECK(back.alpha == 0.25);
    CHECK_FALSE(back.sp_m);
    CHECK(back.seed == 99);
    CHECK(back.steps == cfg.steps);

    SECTION("unknown keys rejected") {
        auto bad = nlohmann::json::parse(R"({"alpha": 0.5, "sp_x": true})");
        CHECK_THROWS_WITH(adapt_config_from_json(bad), Catch::Matchers::ContainsSubstring("sp_x"));
    }
    SECTION("negative weights rejected") {
        auto bad = nlohmann::json::parse(R"({"alpha": -1.0})");
        CHECK_THROWS_AS(adapt_config_from_json(bad), std::invalid_argument);
    }
    SECTION("warning when no component is enabled") {
        AdaptConfig off;
        off.sp_s = off.sp_m = off.sp_l = off.ins = off.ft = false;
        CHECK(off.warning().has_value());
        CHECK_FALSE(AdaptConfig{}.warning().has_value());
    }
}

TEST_CASE("loss_step_audit routing rules") {
    const auto rows = loss_step_audit(AdaptConfig{});
    auto find = [&](const std::string& name) {
        for (const auto& r : rows) {
            if (r.param_group == name) return r;
        }
        FAIL("missing group " + name);
        return RoutingRow{};
    };
    SECTION("discriminators absent from step-1 routing") {
        CHECK(find("discriminator.image").step1_losses.empty());
        CHECK(find("discriminator.instance").step1_losses.empty());
    }
    SECTION("detector absent from step-2 routing") {
        for (const auto& g : {"detector.backbone", "detector.rpn", "detector.head.fc1", "detector.head.outputs"}) {
            CHECK(find(g).step2_losses.empty());
        }
    }
    SECTION("l_reg routes only to the backbone") {
        for (const auto& r : rows) {
            const bool has_reg =
                std::find(r.step1_losses.begin(), r.step1_losses.end(), "l_reg") != r.step1_losses.end();
            CHECK(has_reg == (r.param_group == "detector.backbone"));
        }
    }
    SECTION("disabled components drop their rows/terms") {
        AdaptConfig cfg;
        cfg.sp_s = cfg.sp_m = cfg.sp_l = false;
        cfg.ins = false;
        const auto rows2 = loss_step_audit(cfg);
        for (const auto& r : rows2) {
            CHECK(r.param_group.rfind("discriminator", 0) != 0);
        }
    }
}

TEST_CASE("pretrain basics") {
    Fixture fx;
    PretrainOpts opts;
    opts.detector = tiny_config();

    SECTION("steps = 0 returns the fresh init unchanged and deterministically") {
        auto a = pretrain<float>(fx.source, 0, Rng(7), opts);
        auto b = pretrain<float>(fx.source, 0, Rng(7), opts);
        CHECK(values_bit_identical(a.model.all_params(), snapshot_values(b.model.all_params())));
        CHECK(a.loss_trace.empty());
    }
    SECTION("a few steps run, losses finite, deterministic") {
        auto a = pretrain<float>(fx.source, 3, Rng(7), opts);
        auto b = pretrain<float>(fx.source, 3, Rng(7), opts);
        REQUIRE(a.loss_trace.size() == 3);
        for (double v : a.loss_trace) CHECK(std::isfinite(v));
        CHECK(a.loss_trace == b.loss_trace);
        CHECK(values_bit_identical(a.model.all_params(), snapshot_values(b.model.all_params())));
        CHECK(a.frozen.checksum() == params_checksum(a.model.backbone_params()));
    }
}

TEST_CASE("finetune_loss rejects an empty annotation batch") {
    Fixture fx;
    auto pre = pretrain<float>(fx.source, 0, Rng(7), {2, 1e-3, 0.9, 10.0, tiny_config()});
    GraphParams<float> g;
    Image img = fx.target.load_image(0);
    Rng rng(3);
    CHECK_THROWS_AS(finetune_loss(pre.model, g, img, {}, rng), std::invalid_argument);
}

TEST_CASE("adapt: gradient routing, determinism, toggles") {
    Fixture fx;
    auto pre = pretrain<float>(fx.source, 2, Rng(11), {2, 1e-3, 0.9, 10.0, tiny_config()});

    SECTION("step 1 leaves discriminators bit-identical; step 2 leaves the detector bit-identical") {
        AdaptConfig cfg = quick_cfg(3);
        std::vector<Tensor<float>> disc_snap, det_snap;
        bool disc_ok = true, det_ok = true, disc_moved = false, det_moved = false;
        const std::uint64_t frozen_sum = pre.frozen.checksum();

        auto res = adapt(pre.model, pre.frozen, fx.source, fx.target, fx.split, cfg, {},
                         StepCallback<float>([&](const AdaptProbe<float>& p) {
                             if (p.phase == 'i') {
                                 disc_snap = snapshot_values(p.discriminator_params);
                                 det_snap = snapshot_values(p.detector_params);
                             } else if (p.phase == 'g') {
                                 // step 1 must not have touched the discriminators
                                 disc_ok = disc_ok && values_bit_identical(p.discriminator_params, disc_snap);
                                 det_moved = det_moved || !values_bit_identical(p.detector_params, det_snap);
                                 det_snap = snapshot_values(p.detector_params);
                             } else if (p.phase == 'd') {
                                 // step 2 must not have touched the detector
                                 det_ok = det_ok && values_bit_identical(p.detector_params, det_snap);
                                 disc_moved = disc_moved || !values_bit_identical(p.discriminator_params, disc_snap);
                                 disc_snap = snapshot_values(p.discriminator_params);
                             }
                         }));
        CHECK(disc_ok);
        CHECK(det_ok);
        CHECK(det_moved);   // step 1 actually updates the detector
        CHECK(disc_moved);  // step 2 actually updates the discriminators
        CHECK(pre.frozen.checksum() == frozen_sum);
        REQUIRE(res.report.trace.size() == 3);
    }
    SECTION("determinism: identical seeds give byte-identical traces and parameters") {
        AdaptConfig cfg = quick_cfg(2);
        auto a = adapt(pre.model, pre.frozen, fx.source, fx.target, fx.split, cfg);
        auto b = adapt(pre.model, pre.frozen, fx.source, fx.target, fx.split, cfg);
        CHECK(a.report.trace.l_det == b.report.trace.l_det);
        CHECK(a.report.trace.l_im_d == b.report.trace.l_im_d);
        CHECK(a.report.trace.l_im_g == b.report.trace.l_im_g);
        CHECK(a.report.trace.l_ins_d == b.report.trace.l_ins_d);
        CHECK(a.report.trace.l_ins_g == b.report.trace.l_ins_g);
        CHECK(a.report.trace.l_reg == b.report.trace.l_reg);
        CHECK(a.report.trace.l_ft == b.report.trace.l_ft);
        CHECK(values_bit_identical(a.model.all_params(), snapshot_values(b.model.all_params())));

        std::ostringstream csv_a, csv_b;
        write_trace_csv(csv_a, a.report.trace);
        write_trace_csv(csv_b, b.report.trace);
        CHECK(csv_a.str() == csv_b.str());
    }
    SECTION("no-op configuration: all toggles off, beta 0 leaves the model bit-identical") {
        AdaptConfig cfg = quick_cfg(3);
        cfg.sp_s = cfg.sp_m = cfg.sp_l = cfg.ins = cfg.ft = cfg.smfr = false;
        cfg.beta = 0;
        auto res = adapt(pre.model, pre.frozen, fx.source, fx.target, fx.split, cfg);
        CHECK(values_bit_identical(res.model.all_params(), snapshot_values(pre.model.all_params())));
        for (double v : res.report.trace.l_det) CHECK(v == 0.0);
        for (double v : res.report.trace.l_im_g) CHECK(v == 0.0);
    }
    SECTION("toggle isolation: disabling sp_m changes no other term on the same seeded step") {
        AdaptConfig full = quick_cfg(1);
        AdaptConfig no_m = full;
        no_m.sp_m = false;
        auto a = adapt(pre.model, pre.frozen, fx.source, fx.target, fx.split, full);
        auto b = adapt(pre.model, pre.frozen, fx.source, fx.target, fx.split, no_m);
        CHECK(a.report.trace.l_det[0] == b.report.trace.l_det[0]);
        CHECK(a.report.trace.l_reg[0] == b.report.trace.l_reg[0]);
        CHECK(a.report.trace.l_ft[0] == b.report.trace.l_ft[0]);
        CHECK(a.report.trace.l_ins_g[0] == b.report.trace.l_ins_g[0]);
        CHECK(a.report.trace.l_ins_d[0] == b.report.trace.l_ins_d[0]);
    }
    SECTION("ins/ft with an empty few-shot split is rejected") {
        AdaptConfig cfg = quick_cfg(1);
        FewShotSplit empty;
        CHECK_THROWS_AS(adapt(pre.model, pre.frozen, fx.source, fx.target, empty, cfg), std::invalid_argument);
    }
    SECTION("UDA-style configuration (sp only, unannotated target) runs") {
        AdaptConfig cfg = quick_cfg(1);
        cfg.ins = cfg.ft = false;
        FewShotSplit unlabeled;
        for (std::size_t i = 0; i < fx.target.size(); ++i) unlabeled.items.push_back({i, {}});
        auto res = adapt(pre.model, pre.frozen, fx.source, fx.target, unlabeled, cfg);
        REQUIRE(res.report.trace.size() == 1);
        CHECK(res.report.trace.l_ft[0] == 0.0);
        CHECK(res.report.trace.l_ins_g[0] == 0.0);
    }
}

TEST_CASE("adapt: skip logging when a scale has no cells") {
    // a 320-pixel canvas never fits a full 256-window grid cell unless the
    // offset lands at <= 64, so the large scale regularly skips
    Fixture fx;
    auto pre = pretrain<float>(fx.source, 1, Rng(13), {2, 1e-3, 0.9, 10.0, tiny_config()});
    AdaptConfig cfg = quick_cfg(6);
    cfg.ins = cfg.ft = false;
    auto res = adapt(pre.model, pre.frozen, fx.source, fx.target, fx.split, cfg);
    bool saw_large_skip = false;
    for (const auto& s : res.report.skips) {
        if (s.find("sp_l") != std::string::npos) saw_large_skip = true;
    }
    CHECK(saw_large_skip);
}
