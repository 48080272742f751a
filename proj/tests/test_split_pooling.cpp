#include <catch2/catch_amalgamated.hpp>

#include <set>

#include "shiftdet/split_pooling.hpp"
#include "support/oracles.hpp"

using namespace shiftdet;

TEST_CASE("window dims from the shared anchor convention") {
    CHECK(window_dims(256, 1.0) == std::pair{256, 256});
    CHECK(window_dims(96, 2.0) == std::pair{68, 136});   // 96/sqrt(2), 96*sqrt(2) rounded
    CHECK(window_dims(96, 0.5) == std::pair{136, 68});

    SplitPoolConfig cfg;
    std::set<std::pair<int, int>> dims;
    for (double s : cfg.scales) {
        for (double r : cfg.ratios) dims.insert(window_dims(s, r));
    }
    CHECK(dims.size() == 9);  // 9 (w,h) pairs over the defaults
    CHECK_THROWS_AS(window_dims(-1, 1), std::invalid_argument);
}

TEST_CASE("offsets are uniform integers inside the window") {
    Rng rng(3);
    SECTION("range") {
        for (int i = 0; i < 2000; ++i) {
            const auto [sx, sy] = sample_offsets(rng, 256, 256);
            CHECK(sx >= 1);
            CHECK(sx <= 255);
            CHECK(sy >= 1);
            CHECK(sy <= 255);
        }
        CHECK_THROWS_AS(sample_offsets(rng, 1, 10), std::invalid_argument);
    }
    SECTION("reproducible under a fixed seed") {
        Rng a(9), b(9);
        for (int i = 0; i < 10; ++i) CHECK(sample_offsets(a, 96, 136) == sample_offsets(b, 96, 136));
    }
    SECTION("chi-square uniformity over a window of 16") {
        // 10^4 draws over {1..15}: every value observed, chi2 below the
        // df=14, p=0.001 critical value 36.12
        std::array<int, 15> counts{};
        const int n = 10000;
        for (int i = 0; i < n; ++i) {
            const auto [sx, sy] = sample_offsets(rng, 16, 16);
            ++counts[static_cast<std::size_t>(sx - 1)];
            (void)sy;
        }
        const double expect = n / 15.0;
        double chi2 = 0;
        for (int c : counts) {
            CHECK(c > 0);
            chi2 += (c - expect) * (c - expect) / expect;
        }
        CHECK(chi2 < 36.12);
    }
}

TEST_CASE("enumerate_cells matches the worked examples") {
    SECTION("512 image, 256 window, offset 100 -> one cell") {
        const auto cells = enumerate_cells(512, 512, GridSpec{ScaleGroup::large, 256, 256, 100, 100});
        REQUIRE(cells.size() == 1);
        CHECK(cells[0] == Box(100, 100, 356, 356));
    }
    SECTION("512 image, 96 window, offset 16 -> 5x5 cells") {
        const auto cells = enumerate_cells(512, 512, GridSpec{ScaleGroup::small, 96, 96, 16, 16});
        CHECK(cells.size() == 25);
        CHECK(cells.front() == Box(16, 16, 112, 112));
        CHECK(cells.back() == Box(400, 400, 496, 496));
    }
    SECTION("image smaller than the window -> no cells") {
        CHECK(enumerate_cells(128, 128, GridSpec{ScaleGroup::large, 256, 256, 10, 10}).empty());
    }
}

TEST_CASE("cells agree with the brute-force containment oracle") {
    Rng rng(17);
    for (int trial = 0; trial < 200; ++trial) {
        const int image_w = rng.uniform_int(32, 700);
        const int image_h = rng.uniform_int(32, 700);
        const int win_w = rng.uniform_int(2, 300);
        const int win_h = rng.uniform_int(2, 300);
        const int off_x = rng.uniform_int(1, win_w - 1);
        const int off_y = rng.uniform_int(1, win_h - 1);
        const auto cells = enumerate_cells(image_w, image_h, GridSpec{ScaleGroup::small, win_w, win_h, off_x, off_y});
        const auto oracle = testsupport::brute_force_cells(image_w, image_h, win_w, win_h, off_x, off_y);
        REQUIRE(cells.size() == oracle.size());
        for (std::size_t i = 0; i < cells.size(); ++i) {
            CHECK(cells[i] == oracle[i]);
            // containment + exact window dims
            CHECK(cells[i].x1 >= 0);
            CHECK(cells[i].y1 >= 0);
            CHECK(cells[i].x2 <= image_w);
            CHECK(cells[i].y2 <= image_h);
            CHECK(cells[i].width() == win_w);
            CHECK(cells[i].height() == win_h);
        }
        // per-axis count formula
        const std::size_t nx = static_cast<std::size_t>((image_w - off_x) / win_w > 0 ? (image_w - off_x) / win_w : 0);
        const std::size_t ny = static_cast<std::size_t>((image_h - off_y) / win_h > 0 ? (image_h - off_y) / win_h : 0);
        CHECK(cells.size() == nx * ny);
    }
}

TEST_CASE("offset randomization covers the interior") {
    // union of 96-cells over 1000 draws covers >= 99% of pixels further than
    // 48 from the borders of a 512^2 image
    Rng rng(23);
    const int n = 512, win = 96;
    std::vector<char> covered(static_cast<std::size_t>(n) * n, 0);
    for (int draw = 0; draw < 1000; ++draw) {
        const auto [sx, sy] = sample_offsets(rng, win, win);
        for (const auto& cell : enumerate_cells(n, n, GridSpec{ScaleGroup::small, win, win, sx, sy})) {
            for (int y = static_cast<int>(cell.y1); y < static_cast<int>(cell.y2); ++y) {
                std::fill(covered.begin() + static_cast<std::ptrdiff_t>(y) * n + static_cast<int>(cell.x1),
                          covered.begin() + static_cast<std::ptrdiff_t>(y) * n + static_cast<int>(cell.x2), char(1));
            }
        }
    }
    long interior = 0, hit = 0;
    for (int y = win / 2; y < n - win / 2; ++y) {
        for (int x = win / 2; x < n - win / 2; ++x) {
            ++interior;
            hit += covered[static_cast<std::size_t>(y) * n + x];
        }
    }
    CHECK(static_cast<double>(hit) / static_cast<double>(interior) >= 0.99);
}

TEST_CASE("split_pool composes enumerate_cells and roi pooling") {
    // constant feature map: every patch feature is identical
    Tensor<float> fmv({1, 8, 32, 32});
    fmv.fill(2.5f);
    FeatureMap<float> fm{Var<float>::constant(fmv), 16.0};

    SECTION("count equals the sum over ratio grids") {
        Rng a(5), b(5);
        const auto ps = split_pool(fm, 512, 512, ScaleGroup::small, a);
        SplitPoolConfig cfg;
        std::size_t expect = 0;
        for (double ratio : cfg.ratios) {
            const auto [w, h] = window_dims(cfg.scale_of(ScaleGroup::small), ratio);
            const auto [sx, sy] = sample_offsets(b, w, h);
            expect += enumerate_cells(512, 512, GridSpec{ScaleGroup::small, w, h, sx, sy}).size();
        }
        CHECK(ps.count == static_cast<int>(expect));
        REQUIRE(ps.count > 0);
        CHECK(ps.features.value().shape == std::vector<int>{ps.count, 8, 3, 3});
        for (float v : ps.features.value().data) CHECK(v == 2.5f);
    }
    SECTION("scale 256 square cell spans 16 feature cells before pooling") {
        const auto cells = enumerate_cells(512, 512, GridSpec{ScaleGroup::large, 256, 256, 32, 32});
        REQUIRE_FALSE(cells.empty());
        CHECK(cells[0].width() / 16 == 16);
    }
    SECTION("image smaller than every window -> empty set") {
        Tensor<float> tiny({1, 8, 4, 4});
        FeatureMap<float> fsmall{Var<float>::constant(tiny), 16.0};
        Rng rng(7);
        const auto ps = split_pool(fsmall, 64, 64, ScaleGroup::large, rng);
        CHECK(ps.count == 0);
    }
}
