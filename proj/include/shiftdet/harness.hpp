#pragma once

#include <nlohmann/json.hpp>

#include <atomic>
#include <cmath>
#include <functional>
#include <optional>
#include <ostream>
#include <string>
#include <thread>
#include <vector>

#include "shiftdet/eval.hpp"
#include "shiftdet/trainer.hpp"

namespace shiftdet {

/// The few-shot protocol of one experiment round.
struct FdaProtocol {
    int n_images = 8;
    int boxes_per_image = 3;
    std::vector<int> required_classes = {1, 2, 3};
};

struct RoundResult {
    std::string config_fingerprint;
    std::uint64_t seed = 0;
    FdaProtocol protocol;
    APReport source_ap;
    APReport adapted_ap;
};

inline std::string config_fingerprint(const AdaptConfig& cfg) {
    AdaptConfig c = cfg;
    c.seed = 0;  // fingerprints identify configurations, not rounds
    const std::string s = adapt_config_to_json(c).dump();
    std::uint64_t h = 14695981039346656037ull;
    for (unsigned char ch : s) {
        h ^= ch;
        h *= 1099511628211ull;
    }
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

inline nlohmann::ordered_json ap_report_to_json(const APReport& r) {
    nlohmann::ordered_json j;
    auto pc = nlohmann::ordered_json::object();
    for (const auto& [cls, ap] : r.per_class) pc[std::to_string(cls)] = ap;
    j["per_class"] = std::move(pc);
    j["map"] = r.map;
    j["num_detections"] = r.num_detections;
    j["num_gt"] = r.num_gt;
    return j;
}

inline nlohmann::ordered_json round_result_to_json(const RoundResult& r) {
    nlohmann::ordered_json j;
    j["config_fingerprint"] = r.config_fingerprint;
    j["seed"] = r.seed;
    j["protocol"] = {{"n_images", r.protocol.n_images},
                     {"boxes_per_image", r.protocol.boxes_per_image},
                     {"required_classes", r.protocol.required_classes}};
    j["source_ap"] = ap_report_to_json(r.source_ap);
    j["adapted_ap"] = ap_report_to_json(r.adapted_ap);
    return j;
}

/// Datasets an FDA experiment needs. Target pool and test must be disjoint;
/// here they are separate directories by construction.
struct FdaDatasets {
    const Dataset* source_train = nullptr;
    const Dataset* target_pool = nullptr;
    const Dataset* target_test = nullptr;
};

/// One round of the few-shot protocol: sample target images covering the
/// required classes, loosely annotate them, adapt with cfg (seeded by
/// `seed`), then evaluate the source and adapted models on the same target
/// test split.
template <typename T>
RoundResult fda_round(const DetectorModel<T>& source_model, const FrozenSourceExtractor<T>& frozen,
                      const FdaDatasets& data, const FdaProtocol& protocol, const AdaptConfig& base_cfg,
                      std::uint64_t seed, const APReport* cached_source_ap = nullptr) {
    RoundResult r;
    r.protocol = protocol;
    r.seed = seed;

    AdaptConfig cfg = base_cfg;
    cfg.seed = seed;
    r.config_fingerprint = config_fingerprint(cfg);

    Rng round_rng(splitmix64(seed ^ 0xFDA0FDA0FDA0FDAull));
    Rng loose_rng = round_rng.child(1);
    const FewShotSplit split =
        loose_annotate(*data.target_pool, protocol.n_images, protocol.boxes_per_image, protocol.required_classes,
                       loose_rng);

    AdaptResult<T> adapted = adapt(source_model, frozen, *data.source_train, *data.target_pool, split, cfg);
    r.source_ap = cached_source_ap ? *cached_source_ap : evaluate_detector(source_model, *data.target_test);
    r.adapted_ap = evaluate_detector(adapted.model, *data.target_test);
    return r;
}

/// Run tasks over a small thread pool; each round stays single-threaded so
/// results are reproducible regardless of the job count.
inline void run_parallel(std::vector<std::function<void()>>& tasks, int jobs) {
    if (jobs <= 1) {
        for (auto& t : tasks) t();
        return;
    }
    std::atomic<std::size_t> next{0};
    std::vector<std::thread> workers;
    const int n = std::min<int>(jobs, static_cast<int>(tasks.size()));
    for (int i = 0; i < n; ++i) {
        workers.emplace_back([&] {
            for (;;) {
                const std::size_t k = next.fetch_add(1);
                if (k >= tasks.size()) return;
                tasks[k]();
            }
        });
    }
    for (auto& w : workers) w.join();
}

/// One ablation row: a component combination applied to a base config.
struct ToggleSet {
    std::string name;
    bool sp_s = false, sp_m = false, sp_l = false, ins = false, ft = false;
    std::optional<bool> pairing, smfr, share_discriminators;
};

inline AdaptConfig apply_toggles(AdaptConfig base, const ToggleSet& t) {
    base.sp_s = t.sp_s;
    base.sp_m = t.sp_m;
    base.sp_l = t.sp_l;
    base.ins = t.ins;
    base.ft = t.ft;
    if (t.pairing) base.pairing = *t.pairing;
    if (t.smfr) base.smfr = *t.smfr;
    if (t.share_discriminators) base.share_discriminators = *t.share_discriminators;
    return base;
}

struct AblationCell {
    std::string name;
    double mean_adapted_map = 0;
    std::optional<double> std_adapted_map;  // absent for a single run
    double mean_source_map = 0;
    int rounds = 0;
    std::vector<RoundResult> results;
};

struct AblationSummary {
    std::vector<AblationCell> cells;
};

inline double mean_of(const std::vector<double>& v) {
    double s = 0;
    for (double x : v) s += x;
    return v.empty() ? 0.0 : s / static_cast<double>(v.size());
}

inline std::optional<double> sample_std(const std::vector<double>& v) {
    if (v.size() < 2) return std::nullopt;
    const double m = mean_of(v);
    double s = 0;
    for (double x : v) s += (x - m) * (x - m);
    return std::sqrt(s / static_cast<double>(v.size() - 1));
}

/// Run every (row, seed) round — rounds execute concurrently with
/// independent seeds — and aggregate mean +- std per row. Individual round
/// failures are recorded and the grid continues.
template <typename T>
AblationSummary ablation_grid(const DetectorModel<T>& source_model, const FrozenSourceExtractor<T>& frozen,
                              const FdaDatasets& data, const FdaProtocol& protocol, const AdaptConfig& base_cfg,
                              const std::vector<ToggleSet>& rows, int n_seeds, int jobs = 1,
                              std::vector<std::string>* errors = nullptr,
                              const APReport* cached_source_ap = nullptr) {
    struct Slot {
        bool ok = false;
        RoundResult result;
        std::string error;
    };
    std::vector<Slot> slots(rows.size() * static_cast<std::size_t>(n_seeds));
    std::vector<std::function<void()>> tasks;
    for (std::size_t ri = 0; ri < rows.size(); ++ri) {
        for (int s = 0; s < n_seeds; ++s) {
            const std::size_t slot = ri * static_cast<std::size_t>(n_seeds) + static_cast<std::size_t>(s);
            tasks.push_back([&, ri, s, slot] {
                try {
                    const AdaptConfig cfg = apply_toggles(base_cfg, rows[ri]);
                    slots[slot].result = fda_round(source_model, frozen, data, protocol, cfg,
                                                   static_cast<std::uint64_t>(s + 1), cached_source_ap);
                    slots[slot].ok = true;
                } catch (const std::exception& e) {
                    slots[slot].error = rows[ri].name + " seed " + std::to_string(s + 1) + ": " + e.what();
                }
            });
        }
    }
    run_parallel(tasks, jobs);

    AblationSummary summary;
    for (std::size_t ri = 0; ri < rows.size(); ++ri) {
        AblationCell cell;
        cell.name = rows[ri].name;
        std::vector<double> maps, source_maps;
        for (int s = 0; s < n_seeds; ++s) {
            const auto& slot = slots[ri * static_cast<std::size_t>(n_seeds) + static_cast<std::size_t>(s)];
            if (!slot.ok) {
                if (errors) errors->push_back(slot.error);
                continue;
            }
            maps.push_back(slot.result.adapted_ap.map);
            source_maps.push_back(slot.result.source_ap.map);
            cell.results.push_back(slot.result);
        }
        cell.rounds = static_cast<int>(maps.size());
        cell.mean_adapted_map = mean_of(maps);
        cell.std_adapted_map = sample_std(maps);
        cell.mean_source_map = mean_of(source_maps);
        summary.cells.push_back(std::move(cell));
    }
    return summary;
}

inline void write_ablation_csv(std::ostream& os, const AblationSummary& s) {
    os << "row,rounds,mean_adapted_map,std_adapted_map,mean_source_map\n";
    char buf[256];
    for (const auto& c : s.cells) {
        if (c.std_adapted_map) {
            std::snprintf(buf, sizeof(buf), "%s,%d,%.6g,%.6g,%.6g\n", c.name.c_str(), c.rounds,
                          c.mean_adapted_map, *c.std_adapted_map, c.mean_source_map);
        } else {
            std::snprintf(buf, sizeof(buf), "%s,%d,%.6g,,%.6g\n", c.name.c_str(), c.rounds, c.mean_adapted_map,
                          c.mean_source_map);
        }
        os << buf;
    }
}

/// Sweep grid cell: target image count x annotation budget ("u6" caps at 6
/// boxes subject to availability).
struct BoxBudget {
    std::string label;  // "1", "3", "u6"
    int boxes_per_image = 1;
};

struct SweepCell {
    int n_images = 0;
    std::string boxes_label;
    double mean_adapted_map = 0;
    std::optional<double> std_adapted_map;
    double mean_source_map = 0;
    int rounds = 0;
};

struct SweepResult {
    std::vector<SweepCell> cells;  // row-major: boxes outer, images inner
    std::vector<int> image_counts;
    std::vector<BoxBudget> budgets;
};

template <typename T>
SweepResult sweep_samples(const DetectorModel<T>& source_model, const FrozenSourceExtractor<T>& frozen,
                          const FdaDatasets& data, const AdaptConfig& base_cfg,
                          const std::vector<int>& image_counts, const std::vector<BoxBudget>& budgets,
                          const std::vector<int>& required_classes, int n_seeds, int jobs = 1,
                          std::vector<std::string>* errors = nullptr,
                          const APReport* cached_source_ap = nullptr) {
    SweepResult out;
    out.image_counts = image_counts;
    out.budgets = budgets;

    struct Slot {
        bool ok = false;
        RoundResult result;
        std::string error;
    };
    const std::size_t n_cells = budgets.size() * image_counts.size();
    std::vector<Slot> slots(n_cells * static_cast<std::size_t>(n_seeds));
    std::vector<std::function<void()>> tasks;
    for (std::size_t bi = 0; bi < budgets.size(); ++bi) {
        for (std::size_t ii = 0; ii < image_counts.size(); ++ii) {
            for (int s = 0; s < n_seeds; ++s) {
                const std::size_t slot =
                    (bi * image_counts.size() + ii) * static_cast<std::size_t>(n_seeds) + static_cast<std::size_t>(s);
                tasks.push_back([&, bi, ii, s, slot] {
                    try {
                        FdaProtocol protocol;
                        protocol.n_images = image_counts[ii];
                        protocol.boxes_per_image = budgets[bi].boxes_per_image;
                        protocol.required_classes = required_classes;
                        slots[slot].result = fda_round(source_model, frozen, data, protocol, base_cfg,
                                                       static_cast<std::uint64_t>(s + 1), cached_source_ap);
                        slots[slot].ok = true;
                    } catch (const std::exception& e) {
                        slots[slot].error = budgets[bi].label + "-box/" + std::to_string(image_counts[ii]) +
                                            "-img seed " + std::to_string(s + 1) + ": " + e.what();
                    }
                });
            }
        }
    }
    run_parallel(tasks, jobs);

    for (std::size_t bi = 0; bi < budgets.size(); ++bi) {
        for (std::size_t ii = 0; ii < image_counts.size(); ++ii) {
            SweepCell cell;
            cell.n_images = image_counts[ii];
            cell.boxes_label = budgets[bi].label;
            std::vector<double> maps, source_maps;
            for (int s = 0; s < n_seeds; ++s) {
                const auto& slot = slots[(bi * image_counts.size() + ii) * static_cast<std::size_t>(n_seeds) +
                                         static_cast<std::size_t>(s)];
                if (!slot.ok) {
                    if (errors) errors->push_back(slot.error);
                    continue;
                }
                maps.push_back(slot.result.adapted_ap.map);
                source_maps.push_back(slot.result.source_ap.map);
            }
            cell.rounds = static_cast<int>(maps.size());
            cell.mean_adapted_map = mean_of(maps);
            cell.std_adapted_map = sample_std(maps);
            cell.mean_source_map = mean_of(source_maps);
            out.cells.push_back(std::move(cell));
        }
    }
    return out;
}

inline void write_sweep_csv(std::ostream& os, const SweepResult& s) {
    os << "n_images,boxes,rounds,mean_adapted_map,std_adapted_map,mean_source_map\n";
    char buf[256];
    for (const auto& c : s.cells) {
        if (c.std_adapted_map) {
            std::snprintf(buf, sizeof(buf), "%d,%s,%d,%.6g,%.6g,%.6g\n", c.n_images, c.boxes_label.c_str(),
                          c.rounds, c.mean_adapted_map, *c.std_adapted_map, c.mean_source_map);
        } else {
            std::snprintf(buf, sizeof(buf), "%d,%s,%d,%.6g,,%.6g\n", c.n_images, c.boxes_label.c_str(), c.rounds,
                          c.mean_adapted_map, c.mean_source_map);
        }
        os << buf;
    }
}

/// Minimal line plot of the sweep (one polyline per box budget over image
/// counts), written as a PNG. Convenience only; the CSV is the contract.
inline void write_sweep_plot(const std::filesystem::path& path, const SweepResult& s) {
    const int W = 640, H = 480, ml = 60, mr = 20, mt = 20, mb = 40;
    Image img(W, H);
    for (auto& v : img.rgb) v = 1.0f;
    double lo = 1.0, hi = 0.0;
    for (const auto& c : s.cells) {
        lo = std::min(lo, c.mean_adapted_map);
        hi = std::max(hi, c.mean_adapted_map);
    }
    if (hi <= lo) hi = lo + 1e-3;
    const double pad = 0.1 * (hi - lo);
    lo -= pad;
    hi += pad;

    auto px = [&](double fx) { return ml + fx * (W - ml - mr); };
    auto py = [&](double v) { return (H - mb) - (v - lo) / (hi - lo) * (H - mt - mb); };
    auto put = [&](int x, int y, float r, float g, float b) {
        if (x < 0 || x >= W || y < 0 || y >= H) return;
        img.at(x, y, 0) = r;
        img.at(x, y, 1) = g;
        img.at(x, y, 2) = b;
    };
    auto line = [&](double x0, double y0, double x1, double y1, float r, float g, float b) {
        const int n = static_cast<int>(std::max(std::abs(x1 - x0), std::abs(y1 - y0))) + 1;
        for (int i = 0; i <= n; ++i) {
            const double t = static_cast<double>(i) / n;
            put(static_cast<int>(std::lround(x0 + t * (x1 - x0))),
                static_cast<int>(std::lround(y0 + t * (y1 - y0))), r, g, b);
        }
    };
    line(ml, mt, ml, H - mb, 0, 0, 0);
    line(ml, H - mb, W - mr, H - mb, 0, 0, 0);

    const std::array<std::array<float, 3>, 3> colors = {{{0.8f, 0.2f, 0.2f}, {0.2f, 0.6f, 0.2f}, {0.2f, 0.2f, 0.8f}}};
    for (std::size_t bi = 0; bi < s.budgets.size(); ++bi) {
        const auto col = colors[bi % colors.size()];
        double prev_x = 0, prev_y = 0;
        for (std::size_t ii = 0; ii < s.image_counts.size(); ++ii) {
            const auto& c = s.cells[bi * s.image_counts.size() + ii];
            const double fx = s.image_counts.size() > 1 ? static_cast<double>(ii) / (s.image_counts.size() - 1) : 0.5;
            const double x = px(fx), y = py(c.mean_adapted_map);
            for (int dy = -2; dy <= 2; ++dy)
                for (int dx = -2; dx <= 2; ++dx) put(static_cast<int>(x) + dx, static_cast<int>(y) + dy, col[0], col[1], col[2]);
            if (ii > 0) line(prev_x, prev_y, x, y, col[0], col[1], col[2]);
            prev_x = x;
            prev_y = y;
        }
    }
    write_png(path, img);
}

}  // namespace shiftdet
