#pragma once

#include <nlohmann/json.hpp>

#include <array>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "shiftdet/geometry.hpp"
#include "shiftdet/image.hpp"
#include "shiftdet/rng.hpp"

namespace shiftdet {

/// Photometric rendering style of one domain. The source/target gap is a hue
/// rotation followed by blur and additive noise; the background texture is
/// keyed by background_seed so two domains with the same seed differ only by
/// the photometric transform.
struct DomainSpec {
    double hue_shift = 0.0;   // degrees
    double blur_sigma = 0.0;  // pixels
    double noise_std = 0.0;   // intensity units
    std::uint64_t background_seed = 0;
};

inline DomainSpec default_source_domain() { return DomainSpec{0.0, 0.0, 0.0, 0}; }
/// Calibrated so a source-trained detector loses well over ten mAP points.
inline DomainSpec default_target_domain() { return DomainSpec{60.0, 2.0, 0.05, 0}; }

/// Shapes double as classes: 1 = disk, 2 = square, 3 = triangle.
struct SceneObject {
    int class_id = 1;
    double cx = 0, cy = 0;
    double size = 32;  // disk diameter / square side / triangle side
    std::array<float, 3> color = {0.5f, 0.5f, 0.5f};
};

struct SceneSpec {
    int canvas = 512;
    std::vector<SceneObject> objects;
};

constexpr int synth_class_count = 3;

inline Box object_tight_box(const SceneObject& o) {
    switch (o.class_id) {
        case 1:
        case 2: {
            const double half = o.size / 2;
            return Box(o.cx - half, o.cy - half, o.cx + half, o.cy + half);
        }
        case 3: {
            const double half = o.size / 2;
            const double hh = o.size * std::sqrt(3.0) / 4.0;  // half of triangle height
            return Box(o.cx - half, o.cy - hh, o.cx + half, o.cy + hh);
        }
        default: throw std::invalid_argument("object_tight_box: unknown class");
    }
}

/// 1-8 objects, sizes in [24,160] px, class drawn from `class_weights`
/// (uniform over the three shapes when empty).
inline SceneSpec sample_scene(Rng& rng, const std::vector<double>& class_weights = {}, int canvas = 512) {
    static const std::array<std::array<float, 3>, 3> base_colors = {{
        {0.75f, 0.25f, 0.25f},  // disk: red-ish
        {0.25f, 0.70f, 0.30f},  // square: green-ish
        {0.30f, 0.35f, 0.75f},  // triangle: blue-ish
    }};
    std::vector<double> w = class_weights;
    if (w.empty()) w.assign(synth_class_count, 1.0);
    if (static_cast<int>(w.size()) != synth_class_count)
        throw std::invalid_argument("sample_scene: class_weights must have one entry per class");
    double wsum = 0;
    for (double v : w) wsum += v;
    if (wsum <= 0) throw std::invalid_argument("sample_scene: class_weights must sum to a positive value");

    SceneSpec scene;
    scene.canvas = canvas;
    const int n = rng.uniform_int(1, 8);
    for (int i = 0; i < n; ++i) {
        SceneObject o;
        double u = rng.uniform_real(0, wsum);
        o.class_id = synth_class_count;
        for (int c = 0; c < synth_class_count; ++c) {
            if (u < w[static_cast<std::size_t>(c)]) {
                o.class_id = c + 1;
                break;
            }
            u -= w[static_cast<std::size_t>(c)];
        }
        o.size = rng.uniform_real(24, 160);
        o.cx = rng.uniform_real(0.12 * canvas, 0.88 * canvas);
        o.cy = rng.uniform_real(0.12 * canvas, 0.88 * canvas);
        const auto& base = base_colors[static_cast<std::size_t>(o.class_id - 1)];
        for (int c = 0; c < 3; ++c) {
            o.color[static_cast<std::size_t>(c)] =
                std::clamp(base[static_cast<std::size_t>(c)] + static_cast<float>(rng.uniform_real(-0.08, 0.08)),
                           0.05f, 0.95f);
        }
        scene.objects.push_back(o);
    }
    return scene;
}

struct ImageSample {
    Image image;
    std::string domain;  // "source" | "target"
    bool loose = false;
    std::vector<LabeledBox> boxes;
};

namespace synth_detail {

inline float coverage(const SceneObject& o, int px, int py) {
    // 4x4 supersampled coverage of the pixel [px,px+1)x[py,py+1)
    int hits = 0;
    for (int sy = 0; sy < 4; ++sy) {
        for (int sx = 0; sx < 4; ++sx) {
            const double x = px + (sx + 0.5) / 4.0;
            const double y = py + (sy + 0.5) / 4.0;
            bool inside = false;
            switch (o.class_id) {
                case 1: {
                    const double r = o.size / 2;
                    inside = (x - o.cx) * (x - o.cx) + (y - o.cy) * (y - o.cy) <= r * r;
                    break;
                }
                case 2: {
                    const double half = o.size / 2;
                    inside = std::abs(x - o.cx) <= half && std::abs(y - o.cy) <= half;
                    break;
                }
                case 3: {
                    const double half = o.size / 2;
                    const double hh = o.size * std::sqrt(3.0) / 4.0;
                    const double ax = o.cx, ay = o.cy - hh;          // apex
                    const double bx = o.cx - half, by = o.cy + hh;   // bottom left
                    const double cx2 = o.cx + half, cy2 = o.cy + hh; // bottom right
                    auto side = [&](double x1, double y1, double x2, double y2) {
                        return (x2 - x1) * (y - y1) - (y2 - y1) * (x - x1);
                    };
                    const double d1 = side(ax, ay, bx, by), d2 = side(bx, by, cx2, cy2), d3 = side(cx2, cy2, ax, ay);
                    inside = (d1 >= 0 && d2 >= 0 && d3 >= 0) || (d1 <= 0 && d2 <= 0 && d3 <= 0);
                    break;
                }
                default: break;
            }
            hits += inside;
        }
    }
    return static_cast<float>(hits) / 16.f;
}

inline void paint_background(Image& img, Rng& tex) {
    const int w = img.width, h = img.height;
    std::array<float, 3> base;
    const float g0 = static_cast<float>(tex.uniform_real(0.38, 0.52));
    for (auto& b : base) b = g0 + static_cast<float>(tex.uniform_real(-0.04, 0.04));

    struct Wave {
        double fx, fy, phase;
        std::array<float, 3> amp;
    };
    std::vector<Wave> waves(3);
    for (auto& wv : waves) {
        wv.fx = tex.uniform_real(-2.5, 2.5) * 6.283185307179586 / w;
        wv.fy = tex.uniform_real(-2.5, 2.5) * 6.283185307179586 / h;
        wv.phase = tex.uniform_real(0, 6.283185307179586);
        for (auto& a : wv.amp) a = static_cast<float>(tex.uniform_real(-0.035, 0.035));
    }
    struct Blob {
        double cx, cy, r2;
        std::array<float, 3> amp;
    };
    std::vector<Blob> blobs(5);
    for (auto& bl : blobs) {
        bl.cx = tex.uniform_real(0, w);
        bl.cy = tex.uniform_real(0, h);
        const double r = tex.uniform_real(60, 170);
        bl.r2 = r * r;
        for (auto& a : bl.amp) a = static_cast<float>(tex.uniform_real(-0.05, 0.05));
    }
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            std::array<float, 3> v = base;
            for (const auto& wv : waves) {
                const float s = static_cast<float>(std::sin(wv.fx * x + wv.fy * y + wv.phase));
                for (int c = 0; c < 3; ++c) v[static_cast<std::size_t>(c)] += wv.amp[static_cast<std::size_t>(c)] * s;
            }
            for (const auto& bl : blobs) {
                const double d2 = (x - bl.cx) * (x - bl.cx) + (y - bl.cy) * (y - bl.cy);
                if (d2 < 4 * bl.r2) {
                    const float f = static_cast<float>(std::exp(-d2 / bl.r2));
                    for (int c = 0; c < 3; ++c) v[static_cast<std::size_t>(c)] += bl.amp[static_cast<std::size_t>(c)] * f;
                }
            }
            for (int c = 0; c < 3; ++c) img.at(x, y, c) = v[static_cast<std::size_t>(c)];
        }
    }
}

}  // namespace synth_detail

/// Deterministic render: textured background (keyed by the domain's
/// background_seed), anti-aliased objects, then hue rotation, Gaussian blur
/// and additive noise, clipped to [0,1]. Tight boxes are recorded for every
/// object and clipped to the canvas.
inline ImageSample render_scene(const SceneSpec& scene, const DomainSpec& domain, Rng& rng,
                                const std::string& domain_tag = "source") {
    ImageSample out;
    out.domain = domain_tag;
    out.image = Image(scene.canvas, scene.canvas);

    Rng tex(splitmix64(domain.background_seed) ^ splitmix64(rng.next_u64()));
    synth_detail::paint_background(out.image, tex);

    for (const auto& o : scene.objects) {
        Box tight = object_tight_box(o);
        const int x0 = std::max(0, static_cast<int>(std::floor(tight.x1)));
        const int x1 = std::min(scene.canvas, static_cast<int>(std::ceil(tight.x2)));
        const int y0 = std::max(0, static_cast<int>(std::floor(tight.y1)));
        const int y1 = std::min(scene.canvas, static_cast<int>(std::ceil(tight.y2)));
        for (int y = y0; y < y1; ++y) {
            for (int x = x0; x < x1; ++x) {
                const float a = synth_detail::coverage(o, x, y);
                if (a <= 0) continue;
                for (int c = 0; c < 3; ++c) {
                    float& px = out.image.at(x, y, c);
                    px = (1 - a) * px + a * o.color[static_cast<std::size_t>(c)];
                }
            }
        }
        if (clip_box(tight, scene.canvas, scene.canvas) && tight.width() >= 2 && tight.height() >= 2) {
            out.boxes.push_back(LabeledBox{tight, o.class_id});
        }
    }

    hue_rotate_inplace(out.image, domain.hue_shift);
    gaussian_blur_inplace(out.image, domain.blur_sigma);
    if (domain.noise_std > 0) {
        for (auto& v : out.image.rgb) v += static_cast<float>(rng.normal(0.0, domain.noise_std));
    }
    clamp01_inplace(out.image);
    return out;
}

// ---- on-disk datasets --------------------------------------------------------

struct DatasetRecord {
    std::string image;  // path relative to the dataset root
    std::string domain;
    bool loose = false;
    std::vector<LabeledBox> boxes;
};

/// Directory layout: <root>/images/NNNNNN.png + <root>/annotations.jsonl with
/// one record per line:
///   {"image":"images/000001.png","domain":"source","loose":false,
///    "boxes":[{"x1":..,"y1":..,"x2":..,"y2":..,"class":1}]}
class Dataset {
public:
    Dataset() = default;

    static Dataset open(const std::filesystem::path& root) {
        Dataset ds;
        ds.root_ = root;
        std::ifstream f(root / "annotations.jsonl");
        if (!f) throw std::runtime_error("Dataset::open: cannot read " + (root / "annotations.jsonl").string());
        std::string line;
        while (std::getline(f, line)) {
            if (line.empty()) continue;
            const auto j = nlohmann::json::parse(line);
            DatasetRecord r;
            r.image = j.at("image").get<std::string>();
            r.domain = j.at("domain").get<std::string>();
            r.loose = j.at("loose").get<bool>();
            for (const auto& bj : j.at("boxes")) {
                r.boxes.push_back(LabeledBox{Box(bj.at("x1").get<double>(), bj.at("y1").get<double>(),
                                                 bj.at("x2").get<double>(), bj.at("y2").get<double>()),
                                             bj.at("class").get<int>()});
            }
            ds.records_.push_back(std::move(r));
        }
        return ds;
    }

    std::size_t size() const { return records_.size(); }
    const DatasetRecord& record(std::size_t i) const { return records_.at(i); }
    const std::filesystem::path& root() const { return root_; }

    Image load_image(std::size_t i) const {
        {
            std::lock_guard<std::mutex> lk(cache_->mutex);
            auto it = cache_->images.find(i);
            if (it != cache_->images.end()) return it->second;
        }
        Image img = read_png(root_ / records_.at(i).image);
        std::lock_guard<std::mutex> lk(cache_->mutex);
        if (cache_->images.size() >= cache_capacity_) cache_->images.erase(cache_->images.begin());
        cache_->images.emplace(i, img);
        return img;
    }

    ImageSample load_sample(std::size_t i) const {
        const auto& r = records_.at(i);
        return ImageSample{load_image(i), r.domain, r.loose, r.boxes};
    }

private:
    struct Cache {
        std::mutex mutex;
        std::map<std::size_t, Image> images;
    };
    std::filesystem::path root_;
    std::vector<DatasetRecord> records_;
    std::shared_ptr<Cache> cache_ = std::make_shared<Cache>();
    std::size_t cache_capacity_ = 24;
};

inline nlohmann::ordered_json record_to_json(const DatasetRecord& r) {
    nlohmann::ordered_json j;
    j["image"] = r.image;
    j["domain"] = r.domain;
    j["loose"] = r.loose;
    auto boxes = nlohmann::ordered_json::array();
    for (const auto& lb : r.boxes) {
        nlohmann::ordered_json bj;
        bj["x1"] = lb.box.x1;
        bj["y1"] = lb.box.y1;
        bj["x2"] = lb.box.x2;
        bj["y2"] = lb.box.y2;
        bj["class"] = lb.class_id;
        boxes.push_back(std::move(bj));
    }
    j["boxes"] = std::move(boxes);
    return j;
}

/// Render n_images scenes under one domain style and write the on-disk
/// dataset. Deterministic: a fixed seed reproduces the directory byte for
/// byte, and source/target generations from the same seed share scene
/// streams.
inline Dataset gen_dataset(int n_images, const DomainSpec& domain, const std::vector<double>& class_balance,
                           Rng& rng, const std::filesystem::path& out_dir, const std::string& domain_tag,
                           int canvas = 512) {
    if (n_images < 1) throw std::invalid_argument("gen_dataset: n_images must be >= 1");
    std::error_code ec;
    std::filesystem::create_directories(out_dir / "images", ec);
    if (ec) throw std::runtime_error("gen_dataset: cannot create " + (out_dir / "images").string());
    std::ofstream ann(out_dir / "annotations.jsonl", std::ios::binary);
    if (!ann) throw std::runtime_error("gen_dataset: cannot write annotations in " + out_dir.string());

    for (int i = 1; i <= n_images; ++i) {
        const std::uint64_t scene_seed = rng.next_u64();
        const std::uint64_t render_seed = rng.next_u64();
        Rng scene_rng(scene_seed);
        Rng render_rng(render_seed);
        const SceneSpec scene = sample_scene(scene_rng, class_balance, canvas);
        const ImageSample sample = render_scene(scene, domain, render_rng, domain_tag);

        char name[32];
        std::snprintf(name, sizeof(name), "images/%06d.png", i);
        write_png(out_dir / name, sample.image);

        DatasetRecord r;
        r.image = name;
        r.domain = domain_tag;
        r.loose = false;
        r.boxes = sample.boxes;
        ann << record_to_json(r).dump() << "\n";
        if (!ann) throw std::runtime_error("gen_dataset: annotation write failed");
    }
    ann.close();
    return Dataset::open(out_dir);
}

/// One loosely annotated few-shot image: a dataset index plus the subset of
/// its annotations that were kept.
struct FewShotItem {
    std::size_t index = 0;
    std::vector<LabeledBox> boxes;
};

struct FewShotSplit {
    std::vector<FewShotItem> items;
};

/// The loose-annotation protocol: sample n_images so that every required
/// class appears somewhere in the selection, then keep min(boxes_per_image,
/// available) uniformly chosen annotations per image.
inline FewShotSplit loose_annotate(const Dataset& dataset, int n_images, int boxes_per_image,
                                   const std::vector<int>& required_classes, Rng& rng) {
    if (n_images < 1 || boxes_per_image < 1) throw std::invalid_argument("loose_annotate: bad protocol sizes");
    if (dataset.size() < static_cast<std::size_t>(n_images))
        throw std::runtime_error("loose_annotate: dataset smaller than requested image count");

    std::vector<std::size_t> order(dataset.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    rng.shuffle(order);

    auto contains_class = [&](std::size_t idx, int cls) {
        for (const auto& lb : dataset.record(idx).boxes) {
            if (lb.class_id == cls) return true;
        }
        return false;
    };

    std::vector<std::size_t> chosen;
    std::vector<char> taken(dataset.size(), 0);
    for (int cls : required_classes) {
        bool covered = false;
        for (std::size_t idx : chosen) {
            if (contains_class(idx, cls)) {
                covered = true;
                break;
            }
        }
        if (covered) continue;
        bool found = false;
        for (std::size_t idx : order) {
            if (!taken[idx] && contains_class(idx, cls)) {
                chosen.push_back(idx);
                taken[idx] = 1;
                found = true;
                break;
            }
        }
        if (!found) throw std::runtime_error("loose_annotate: required class " + std::to_string(cls) +
                                             " not present in the dataset");
    }
    if (chosen.size() > static_cast<std::size_t>(n_images))
        throw std::runtime_error("loose_annotate: cannot cover required classes within the image budget");
    for (std::size_t idx : order) {
        if (chosen.size() >= static_cast<std::size_t>(n_images)) break;
        if (!taken[idx]) {
            chosen.push_back(idx);
            taken[idx] = 1;
        }
    }

    FewShotSplit split;
    for (std::size_t idx : chosen) {
        const auto& boxes = dataset.record(idx).boxes;
        const std::size_t keep = std::min<std::size_t>(boxes.size(), static_cast<std::size_t>(boxes_per_image));
        FewShotItem item;
        item.index = idx;
        for (std::size_t k : rng.sample_without_replacement(boxes.size(), keep)) item.boxes.push_back(boxes[k]);
        split.items.push_back(std::move(item));
    }
    return split;
}

}  // namespace shiftdet
