#include <catch2/catch_amalgamated.hpp>

#include <filesystem>
#include <fstream>

#include "shiftdet/synthdata.hpp"

using namespace shiftdet;
namespace fs = std::filesystem;

namespace {
std::vector<std::uint8_t> slurp(const fs::path& p) {
    std::ifstream f(p, std::ios::binary);
    REQUIRE(f);
    return std::vector<std::uint8_t>((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
}

fs::path fresh_dir(const std::string& name) {
    const fs::path p = fs::temp_directory_path() / name;
    fs::remove_all(p);
    return p;
}
}  // namespace

TEST_CASE("png round trip preserves 8-bit content") {
    Rng rng(1);
    Image img(37, 23);
    for (auto& v : img.rgb) v = static_cast<float>(rng.uniform_real(0, 1));
    const auto bytes = encode_png(img);
    const Image back = decode_png(bytes);
    REQUIRE(back.width == img.width);
    REQUIRE(back.height == img.height);
    for (std::size_t i = 0; i < img.rgb.size(); ++i) {
        const float q = std::lround(std::clamp(img.rgb[i], 0.f, 1.f) * 255.f) / 255.f;
        CHECK(back.rgb[i] == Catch::Approx(q).margin(1e-6));
    }
}

TEST_CASE("hue rotation is exactly inverted by the opposite angle") {
    Rng rng(2);
    Image img(16, 16);
    for (auto& v : img.rgb) v = static_cast<float>(rng.uniform_real(0.2, 0.8));
    Image rotated = img;
    hue_rotate_inplace(rotated, 60.0);
    hue_rotate_inplace(rotated, -60.0);
    for (std::size_t i = 0; i < img.rgb.size(); ++i) CHECK(rotated.rgb[i] == Catch::Approx(img.rgb[i]).margin(1e-5));
}

TEST_CASE("render_scene determinism and tight boxes") {
    Rng scene_rng(42);
    const SceneSpec scene = sample_scene(scene_rng);
    const DomainSpec dom = default_source_domain();

    Rng r1(7), r2(7);
    const ImageSample a = render_scene(scene, dom, r1);
    const ImageSample b = render_scene(scene, dom, r2);
    CHECK(a.image.rgb == b.image.rgb);  // bit-identical pixels
    CHECK(a.boxes.size() == b.boxes.size());

    SECTION("disk tight box from shape extents") {
        SceneSpec s;
        s.objects.push_back(SceneObject{1, 100, 100, 64, {0.7f, 0.3f, 0.3f}});
        Rng rr(3);
        const ImageSample sample = render_scene(s, dom, rr);
        REQUIRE(sample.boxes.size() == 1);
        CHECK(sample.boxes[0].box.x1 == Catch::Approx(68));
        CHECK(sample.boxes[0].box.y1 == Catch::Approx(68));
        CHECK(sample.boxes[0].box.x2 == Catch::Approx(132));
        CHECK(sample.boxes[0].box.y2 == Catch::Approx(132));
        CHECK(sample.boxes[0].class_id == 1);
    }
}

TEST_CASE("identical scene streams differ only by the domain transform") {
    // hue-only target: inverting the rotation must reproduce the source image
    DomainSpec src = default_source_domain();
    DomainSpec tgt;
    tgt.hue_shift = 45.0;
    Rng scene_rng(11);
    const SceneSpec scene = sample_scene(scene_rng);
    Rng r1(5), r2(5);
    const ImageSample a = render_scene(scene, src, r1, "source");
    ImageSample b = render_scene(scene, tgt, r2, "target");
    hue_rotate_inplace(b.image, -45.0);
    double max_diff = 0;
    for (std::size_t i = 0; i < a.image.rgb.size(); ++i) {
        max_diff = std::max(max_diff, static_cast<double>(std::abs(a.image.rgb[i] - b.image.rgb[i])));
    }
    CHECK(max_diff < 1e-3);  // colors stay in gamut, so clipping never bites
}

TEST_CASE("gen_dataset: files, determinism, balance") {
    const fs::path dir1 = fresh_dir("shiftdet_ds_a");
    const fs::path dir2 = fresh_dir("shiftdet_ds_b");
    Rng g1(77), g2(77);
    const Dataset d1 = gen_dataset(12, default_source_domain(), {}, g1, dir1, "source", 128);
    const Dataset d2 = gen_dataset(12, default_source_domain(), {}, g2, dir2, "source", 128);

    CHECK(d1.size() == 12);
    CHECK(fs::exists(dir1 / "images" / "000001.png"));
    CHECK(fs::exists(dir1 / "images" / "000012.png"));

    SECTION("byte-identical regeneration") {
        CHECK(slurp(dir1 / "annotations.jsonl") == slurp(dir2 / "annotations.jsonl"));
        CHECK(slurp(dir1 / "images" / "000007.png") == slurp(dir2 / "images" / "000007.png"));
    }
    SECTION("records load back with boxes inside bounds") {
        for (std::size_t i = 0; i < d1.size(); ++i) {
            for (const auto& lb : d1.record(i).boxes) {
                CHECK(lb.box.x1 >= 0);
                CHECK(lb.box.x2 <= 128);
                CHECK(lb.class_id >= 1);
                CHECK(lb.class_id <= 3);
            }
        }
    }
    fs::remove_all(dir1);
    fs::remove_all(dir2);
}

TEST_CASE("class histogram stays within 3 sigma of balance") {
    // count object classes over many sampled scenes (rendering not needed)
    Rng rng(123);
    std::array<long, 3> counts = {0, 0, 0};
    long total = 0;
    for (int i = 0; i < 1000; ++i) {
        const SceneSpec s = sample_scene(rng);
        for (const auto& o : s.objects) {
            ++counts[static_cast<std::size_t>(o.class_id - 1)];
            ++total;
        }
    }
    const double p = 1.0 / 3.0;
    const double sigma = std::sqrt(total * p * (1 - p));
    for (long c : counts) CHECK(std::abs(c - total * p) <= 3 * sigma);
}

TEST_CASE("loose_annotate implements the protocol") {
    const fs::path dir = fresh_dir("shiftdet_ds_loose");
    Rng g(99);
    const Dataset ds = gen_dataset(20, default_source_domain(), {}, g, dir, "target", 128);

    SECTION("8 images x 3 boxes with availability cap") {
        Rng rng(1);
        const FewShotSplit split = loose_annotate(ds, 8, 3, {1, 2, 3}, rng);
        REQUIRE(split.items.size() == 8);
        std::array<bool, 3> seen = {false, false, false};
        for (const auto& item : split.items) {
            const auto& avail = ds.record(item.index).boxes;
            CHECK(item.boxes.size() == std::min<std::size_t>(3, avail.size()));
            for (const auto& lb : item.boxes) seen[static_cast<std::size_t>(lb.class_id - 1)] = true;
        }
        CHECK(seen[0]);
        CHECK(seen[1]);
        CHECK(seen[2]);
        // loose annotation count formula
        std::size_t expect = 0, got = 0;
        for (const auto& item : split.items) {
            expect += std::min<std::size_t>(3, ds.record(item.index).boxes.size());
            got += item.boxes.size();
        }
        CHECK(got == expect);
    }
    SECTION("missing class is named in the error") {
        Rng rng(2);
        try {
            loose_annotate(ds, 4, 1, {9}, rng);
            FAIL("expected an error");
        } catch (const std::exception& e) {
            CHECK(std::string(e.what()).find("9") != std::string::npos);
        }
    }
    SECTION("deterministic under a fixed seed") {
        Rng a(5), b(5);
        const auto s1 = loose_annotate(ds, 4, 2, {1}, a);
        const auto s2 = loose_annotate(ds, 4, 2, {1}, b);
        REQUIRE(s1.items.size() == s2.items.size());
        for (std::size_t i = 0; i < s1.items.size(); ++i) {
            CHECK(s1.items[i].index == s2.items[i].index);
            CHECK(s1.items[i].boxes.size() == s2.items[i].boxes.size());
        }
    }
    fs::remove_all(dir);
}
