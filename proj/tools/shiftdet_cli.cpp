// Command-line front end: dataset generation, pretraining, adaptation,
// evaluation, and the few-shot experiment protocol (single rounds, ablation
// grids, and sample-count sweeps).

#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <thread>

#include "shiftdet/eval.hpp"
#include "shiftdet/harness.hpp"
#include "shiftdet/trainer.hpp"

using namespace shiftdet;
namespace fs = std::filesystem;

namespace {

AdaptConfig load_config(const std::string& path) {
    if (path.empty()) return AdaptConfig{};
    std::ifstream f(path);
    if (!f) throw std::runtime_error("cannot read config file: " + path);
    return adapt_config_from_json(nlohmann::json::parse(f));
}

std::vector<int> parse_int_list(const std::string& s) {
    std::vector<int> out;
    std::stringstream ss(s);
    std::string tok;
    while (std::getline(ss, tok, ',')) {
        if (!tok.empty()) out.push_back(std::stoi(tok));
    }
    return out;
}

std::vector<BoxBudget> parse_box_list(const std::string& s) {
    std::vector<BoxBudget> out;
    std::stringstream ss(s);
    std::string tok;
    while (std::getline(ss, tok, ',')) {
        if (tok.empty()) continue;
        if (tok[0] == 'u') {
            out.push_back(BoxBudget{tok, std::stoi(tok.substr(1))});
        } else {
            out.push_back(BoxBudget{tok, std::stoi(tok)});
        }
    }
    return out;
}

void write_text(const std::string& path, const std::string& content) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot write " + path);
    f << content;
    if (!f) throw std::runtime_error("write failed: " + path);
}

struct LoadedSourceModel {
    DetectorModel<float> model;
    FrozenSourceExtractor<float> frozen;
};

LoadedSourceModel load_source_model(const std::string& path) {
    DetectorModel<float> m = load_checkpoint<float>(path);
    return {m.clone(), FrozenSourceExtractor<float>::from_model(m)};
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"few-shot domain adaptation for a minimal two-stage detector"};
    app.require_subcommand(1);

    // gen-data
    auto* gen = app.add_subcommand("gen-data", "render a synthetic detection dataset");
    std::string gen_out, gen_domain = "source";
    int gen_n = 100, gen_canvas = 512;
    std::uint64_t gen_seed = 0, gen_bg_seed = 0;
    double gen_hue = 0, gen_blur = 0, gen_noise = 0;
    std::string gen_balance;
    bool gen_target_defaults = false;
    gen->add_option("--out", gen_out, "output directory")->required();
    gen->add_option("--n", gen_n, "number of images")->check(CLI::PositiveNumber);
    gen->add_option("--seed", gen_seed, "generation seed");
    gen->add_option("--domain", gen_domain, "domain tag written to records (source|target)");
    gen->add_option("--hue", gen_hue, "hue rotation in degrees");
    gen->add_option("--blur", gen_blur, "gaussian blur sigma in pixels");
    gen->add_option("--noise", gen_noise, "additive noise stddev");
    gen->add_option("--bg-seed", gen_bg_seed, "background texture seed");
    gen->add_option("--canvas", gen_canvas, "canvas size in pixels");
    gen->add_option("--balance", gen_balance, "per-class weights, e.g. 1,1,1");
    gen->add_flag("--target-defaults", gen_target_defaults,
                  "use the calibrated target-domain style (hue 60, blur 2, noise 0.05)");

    // pretrain
    auto* pt = app.add_subcommand("pretrain", "train a source detector");
    std::string pt_data, pt_out;
    int pt_steps = 2500;
    std::uint64_t pt_seed = 0;
    double pt_lr = 1e-3;
    pt->add_option("--data", pt_data, "source dataset directory")->required();
    pt->add_option("--steps", pt_steps, "training steps");
    pt->add_option("--seed", pt_seed, "seed");
    pt->add_option("--lr", pt_lr, "learning rate");
    pt->add_option("--out-model", pt_out, "checkpoint path")->required();

    // adapt
    auto* ad = app.add_subcommand("adapt", "adapt a source model to a target dataset");
    std::string ad_model, ad_src, ad_tgt, ad_cfg, ad_out, ad_report;
    ad->add_option("--source-model", ad_model, "source checkpoint")->required();
    ad->add_option("--source-data", ad_src, "source dataset directory")->required();
    ad->add_option("--target-data", ad_tgt, "target dataset directory (records used as-is)")->required();
    ad->add_option("--config", ad_cfg, "AdaptConfig JSON file (defaults when omitted)");
    ad->add_option("--out-model", ad_out, "adapted checkpoint path")->required();
    ad->add_option("--report", ad_report, "loss-trace CSV path");

    // eval
    auto* ev = app.add_subcommand("eval", "evaluate a checkpoint on a dataset");
    std::string ev_model, ev_data, ev_out;
    double ev_iou = 0.5;
    ev->add_option("--model", ev_model, "checkpoint")->required();
    ev->add_option("--data", ev_data, "dataset directory")->required();
    ev->add_option("--iou", ev_iou, "matching IOU threshold");
    ev->add_option("--out", ev_out, "write the APReport JSON here instead of stdout");

    // fda
    auto* fd = app.add_subcommand("fda", "run few-shot adaptation rounds (JSON lines)");
    std::string fd_model, fd_src, fd_pool, fd_test, fd_cfg, fd_out, fd_classes = "1,2,3";
    int fd_images = 8, fd_boxes = 3, fd_seeds = 1, fd_jobs = 1;
    fd->add_option("--source-model", fd_model)->required();
    fd->add_option("--source-data", fd_src)->required();
    fd->add_option("--target-data", fd_pool, "target pool to sample few-shot images from")->required();
    fd->add_option("--target-test", fd_test, "target test split")->required();
    fd->add_option("--config", fd_cfg, "AdaptConfig JSON file");
    fd->add_option("--images", fd_images, "few-shot image count");
    fd->add_option("--boxes", fd_boxes, "annotation boxes per image");
    fd->add_option("--classes", fd_classes, "required classes, e.g. 1,2,3");
    fd->add_option("--seeds", fd_seeds, "number of rounds (seeds 1..N)");
    fd->add_option("--jobs", fd_jobs, "concurrent rounds");
    fd->add_option("--out", fd_out, "write JSON lines here instead of stdout");

    // ablate
    auto* ab = app.add_subcommand("ablate", "component-toggle grid (CSV summary)");
    std::string ab_model, ab_src, ab_pool, ab_test, ab_grid, ab_out;
    int ab_jobs = 1;
    ab->add_option("--source-model", ab_model)->required();
    ab->add_option("--source-data", ab_src)->required();
    ab->add_option("--target-data", ab_pool)->required();
    ab->add_option("--target-test", ab_test)->required();
    ab->add_option("--grid", ab_grid, "grid JSON: {base, protocol, seeds, rows:[{name,toggles...}]}")->required();
    ab->add_option("--jobs", ab_jobs, "concurrent rounds");
    ab->add_option("--out", ab_out, "CSV path (stdout when omitted)");

    // sweep
    auto* sw = app.add_subcommand("sweep", "sample-count sweep (CSV, optional PNG plot)");
    std::string sw_model, sw_src, sw_pool, sw_test, sw_cfg, sw_out, sw_plot;
    std::string sw_images = "1,2,4,8", sw_boxes = "1,3,u6", sw_classes = "1,2,3";
    int sw_seeds = 3, sw_jobs = 1;
    sw->add_option("--source-model", sw_model)->required();
    sw->add_option("--source-data", sw_src)->required();
    sw->add_option("--target-data", sw_pool)->required();
    sw->add_option("--target-test", sw_test)->required();
    sw->add_option("--config", sw_cfg, "AdaptConfig JSON file");
    sw->add_option("--images", sw_images, "image counts, e.g. 1,2,4,8");
    sw->add_option("--boxes", sw_boxes, "box budgets, e.g. 1,3,u6");
    sw->add_option("--classes", sw_classes, "required classes");
    sw->add_option("--seeds", sw_seeds, "seeds per cell");
    sw->add_option("--jobs", sw_jobs, "concurrent rounds");
    sw->add_option("--out", sw_out, "CSV path (stdout when omitted)");
    sw->add_option("--plot", sw_plot, "optional PNG curve plot path");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 1;  // usage errors exit 1; --help exits 0
    }

    try {
        if (*gen) {
            DomainSpec dom = gen_target_defaults ? default_target_domain() : default_source_domain();
            if (gen->count("--hue")) dom.hue_shift = gen_hue;
            if (gen->count("--blur")) dom.blur_sigma = gen_blur;
            if (gen->count("--noise")) dom.noise_std = gen_noise;
            if (gen->count("--bg-seed")) dom.background_seed = gen_bg_seed;
            std::vector<double> balance;
            if (!gen_balance.empty()) {
                for (int v : parse_int_list(gen_balance)) balance.push_back(v);
            }
            Rng rng(gen_seed);
            gen_dataset(gen_n, dom, balance, rng, gen_out, gen_domain, gen_canvas);
            std::cerr << "wrote " << gen_n << " images to " << gen_out << "\n";
        } else if (*pt) {
            Dataset data = Dataset::open(pt_data);
            PretrainOpts opts;
            opts.lr = pt_lr;
            auto res = pretrain<float>(data, pt_steps, Rng(pt_seed), opts);
            save_checkpoint(pt_out, res.model);
            std::cerr << "pretrained " << pt_steps << " steps; final loss "
                      << (res.loss_trace.empty() ? 0.0 : res.loss_trace.back()) << "; saved " << pt_out << "\n";
        } else if (*ad) {
            auto src = load_source_model(ad_model);
            Dataset source = Dataset::open(ad_src);
            Dataset target = Dataset::open(ad_tgt);
            FewShotSplit split;
            for (std::size_t i = 0; i < target.size(); ++i) split.items.push_back({i, target.record(i).boxes});
            const AdaptConfig cfg = load_config(ad_cfg);
            auto res = adapt(src.model, src.frozen, source, target, split, cfg);
            save_checkpoint(ad_out, res.model);
            if (!ad_report.empty()) {
                std::ostringstream csv;
                write_trace_csv(csv, res.report.trace);
                write_text(ad_report, csv.str());
            }
            std::cerr << "adapted " << cfg.steps << " steps in " << res.report.wall_seconds << "s; saved "
                      << ad_out << "\n";
        } else if (*ev) {
            const auto model = load_checkpoint<float>(ev_model);
            Dataset data = Dataset::open(ev_data);
            const APReport rep = evaluate_detector(model, data, ev_iou);
            const std::string out = ap_report_to_json(rep).dump() + "\n";
            if (ev_out.empty()) std::cout << out;
            else write_text(ev_out, out);
        } else if (*fd) {
            auto src = load_source_model(fd_model);
            Dataset source = Dataset::open(fd_src);
            Dataset pool = Dataset::open(fd_pool);
            Dataset test = Dataset::open(fd_test);
            FdaDatasets data{&source, &pool, &test};
            FdaProtocol protocol{fd_images, fd_boxes, parse_int_list(fd_classes)};
            const AdaptConfig cfg = load_config(fd_cfg);
            const APReport source_ap = evaluate_detector(src.model, test);

            std::vector<RoundResult> results(static_cast<std::size_t>(fd_seeds));
            std::vector<std::function<void()>> tasks;
            for (int s = 0; s < fd_seeds; ++s) {
                tasks.push_back([&, s] {
                    results[static_cast<std::size_t>(s)] =
                        fda_round(src.model, src.frozen, data, protocol, cfg,
                                  static_cast<std::uint64_t>(s + 1), &source_ap);
                });
            }
            run_parallel(tasks, fd_jobs);
            std::ostringstream lines;
            for (const auto& r : results) lines << round_result_to_json(r).dump() << "\n";
            if (fd_out.empty()) std::cout << lines.str();
            else write_text(fd_out, lines.str());
        } else if (*ab) {
            auto src = load_source_model(ab_model);
            Dataset source = Dataset::open(ab_src);
            Dataset pool = Dataset::open(ab_pool);
            Dataset test = Dataset::open(ab_test);
            FdaDatasets data{&source, &pool, &test};

            std::ifstream gf(ab_grid);
            if (!gf) throw std::runtime_error("cannot read grid file: " + ab_grid);
            const auto gj = nlohmann::json::parse(gf);
            const AdaptConfig base =
                gj.contains("base") ? adapt_config_from_json(gj.at("base")) : AdaptConfig{};
            FdaProtocol protocol;
            if (gj.contains("protocol")) {
                const auto& pj = gj.at("protocol");
                if (pj.contains("n_images")) protocol.n_images = pj.at("n_images").get<int>();
                if (pj.contains("boxes_per_image")) protocol.boxes_per_image = pj.at("boxes_per_image").get<int>();
                if (pj.contains("required_classes"))
                    protocol.required_classes = pj.at("required_classes").get<std::vector<int>>();
            }
            const int seeds = gj.value("seeds", 3);
            std::vector<ToggleSet> rows;
            for (const auto& rj : gj.at("rows")) {
                ToggleSet t;
                t.name = rj.at("name").get<std::string>();
                t.sp_s = rj.value("sp_s", false);
                t.sp_m = rj.value("sp_m", false);
                t.sp_l = rj.value("sp_l", false);
                t.ins = rj.value("ins", false);
                t.ft = rj.value("ft", false);
                if (rj.contains("pairing")) t.pairing = rj.at("pairing").get<bool>();
                if (rj.contains("smfr")) t.smfr = rj.at("smfr").get<bool>();
                if (rj.contains("share_discriminators"))
                    t.share_discriminators = rj.at("share_discriminators").get<bool>();
                rows.push_back(std::move(t));
            }
            const APReport source_ap = evaluate_detector(src.model, test);
            std::vector<std::string> errors;
            const AblationSummary summary = ablation_grid(src.model, src.frozen, data, protocol, base, rows,
                                                          seeds, ab_jobs, &errors, &source_ap);
            for (const auto& e : errors) std::cerr << "round failed: " << e << "\n";
            std::ostringstream csv;
            write_ablation_csv(csv, summary);
            if (ab_out.empty()) std::cout << csv.str();
            else write_text(ab_out, csv.str());
        } else if (*sw) {
            auto src = load_source_model(sw_model);
            Dataset source = Dataset::open(sw_src);
            Dataset pool = Dataset::open(sw_pool);
            Dataset test = Dataset::open(sw_test);
            FdaDatasets data{&source, &pool, &test};
            const AdaptConfig cfg = load_config(sw_cfg);
            const APReport source_ap = evaluate_detector(src.model, test);
            std::vector<std::string> errors;
            const SweepResult result =
                sweep_samples(src.model, src.frozen, data, cfg, parse_int_list(sw_images),
                              parse_box_list(sw_boxes), parse_int_list(sw_classes), sw_seeds, sw_jobs, &errors,
                              &source_ap);
            for (const auto& e : errors) std::cerr << "round failed: " << e << "\n";
            std::ostringstream csv;
            write_sweep_csv(csv, result);
            if (sw_out.empty()) std::cout << csv.str();
            else write_text(sw_out, csv.str());
            if (!sw_plot.empty()) write_sweep_plot(sw_plot, result);
        }
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
    return 0;
}
