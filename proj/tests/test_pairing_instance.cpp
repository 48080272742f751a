#include <catch2/catch_amalgamated.hpp>

#include "shiftdet/instance_features.hpp"
#include "shiftdet/pairing.hpp"
#include "support/gradcheck.hpp"

using namespace shiftdet;

namespace {
// rows tagged with a recognizable constant so pair membership is auditable
Var<double> tagged_rows(int n, int dim, double base) {
    Tensor<double> t({n, dim});
    for (int i = 0; i < n; ++i) {
        for (int d = 0; d < dim; ++d) t[static_cast<std::size_t>(i) * dim + d] = base + i;
    }
    return Var<double>::constant(t);
}
}  // namespace

TEST_CASE("combine is order-preserving channel concatenation") {
    Tensor<double> a({2, 1, 3, 3});
    a.fill(1.0);
    Tensor<double> b({2, 1, 3, 3});
    b.fill(2.0);
    auto c = combine(Var<double>::constant(a), Var<double>::constant(b));
    REQUIRE(c.value().shape == std::vector<int>{2, 2, 3, 3});
    CHECK(c.value()[0] == 1.0);   // first half: a
    CHECK(c.value()[9] == 2.0);   // second half: b
    auto c2 = combine(Var<double>::constant(b), Var<double>::constant(a));
    CHECK(c.value().data != c2.value().data);  // order matters

    SECTION("shape mismatch rejected") {
        Tensor<double> bad({2, 1, 2, 2});
        CHECK_THROWS_AS(combine(Var<double>::constant(a), Var<double>::constant(bad)), std::invalid_argument);
    }
    SECTION("channel arithmetic 256+256 = 512") {
        Tensor<double> x({1, 256});
        Tensor<double> y({1, 256});
        CHECK(combine(Var<double>::constant(x), Var<double>::constant(y)).value().shape ==
              std::vector<int>{1, 512});
    }
}

TEST_CASE("make_pair_indices invariants") {
    Rng rng(7);
    SECTION("SS pairs use distinct indices, batches have equal size") {
        const auto idx = make_pair_indices(5, 3, 64, rng);
        REQUIRE(idx.ss.size() == 64);
        REQUIRE(idx.st.size() == 64);
        for (const auto& [i, j] : idx.ss) {
            CHECK(i != j);
            CHECK(i >= 0);
            CHECK(i < 5);
            CHECK(j >= 0);
            CHECK(j < 5);
        }
        for (const auto& [s, t] : idx.st) {
            CHECK(s >= 0);
            CHECK(s < 5);
            CHECK(t >= 0);
            CHECK(t < 3);
        }
    }
    SECTION("insufficient source or empty target -> skip signal") {
        CHECK(make_pair_indices(1, 3, 8, rng).ss.empty());
        CHECK(make_pair_indices(4, 0, 8, rng).ss.empty());
    }
    SECTION("all four source features appear in ST pairs with 64 draws") {
        // miss probability per feature <= (3/4)^64
        const auto idx = make_pair_indices(4, 1, 64, rng);
        std::array<bool, 4> seen{};
        for (const auto& [s, t] : idx.st) seen[static_cast<std::size_t>(s)] = true;
        CHECK((seen[0] && seen[1] && seen[2] && seen[3]));
    }
}

TEST_CASE("make_pairs: ST ordering via sentinel features") {
    Rng rng(11);
    auto src = tagged_rows(4, 2, 100.0);   // values 100..103
    auto tgt = tagged_rows(2, 2, 1000.0);  // values 1000..1001
    const auto [g1, g2] = make_pairs(src, tgt, 16, rng);
    REQUIRE(g1.count == 16);
    REQUIRE(g2.count == 16);
    CHECK(g1.group == PairGroup::source_source);
    CHECK(g2.group == PairGroup::source_target);
    // every ST item: first half of the channel axis holds the source value
    for (int i = 0; i < 16; ++i) {
        const double first = g2.items.value()[static_cast<std::size_t>(i) * 4];
        const double second = g2.items.value()[static_cast<std::size_t>(i) * 4 + 2];
        CHECK(first >= 100.0);
        CHECK(first <= 103.0);
        CHECK(second >= 1000.0);
    }
    for (int i = 0; i < 16; ++i) {
        const double a = g1.items.value()[static_cast<std::size_t>(i) * 4];
        const double b = g1.items.value()[static_cast<std::size_t>(i) * 4 + 2];
        CHECK(a != b);  // distinct source members
        CHECK(b < 1000.0);
    }

    SECTION("source {a,b}, target {x}: ST draws always pair a source with x") {
        Rng r2(13);
        auto s2 = tagged_rows(2, 1, 10.0);
        auto t2 = tagged_rows(1, 1, 99.0);
        const auto [h1, h2] = make_pairs(s2, t2, 8, r2);
        for (int i = 0; i < 8; ++i) {
            CHECK(h2.items.value()[static_cast<std::size_t>(i) * 2 + 1] == 99.0);
            const double s = h2.items.value()[static_cast<std::size_t>(i) * 2];
            CHECK((s == 10.0 || s == 11.0));
        }
    }
}

TEST_CASE("make_instance_pairs: class purity and omission rules") {
    Rng rng(17);
    InstanceFeatureSet<double> os, ot;
    os.source_domain = true;
    os.by_class.emplace(1, tagged_rows(3, 2, 100.0));
    os.by_class.emplace(2, tagged_rows(4, 2, 200.0));
    os.by_class.emplace(3, tagged_rows(1, 2, 300.0));  // only one source feature
    ot.by_class.emplace(1, tagged_rows(2, 2, 1100.0));
    ot.by_class.emplace(3, tagged_rows(2, 2, 1300.0));
    // class 2 missing in target, class 3 fails |O_s| >= 2

    const auto pairs = make_instance_pairs(os, ot, 8, rng);
    REQUIRE(pairs.size() == 1);
    REQUIRE(pairs.count(1) == 1);
    const auto& [n1, n2] = pairs.at(1);
    CHECK(n1.class_id == 1);
    CHECK(n2.class_id == 1);
    // no cross-class pair: all members carry class-1 tags
    for (int i = 0; i < n1.count; ++i) {
        CHECK(n1.items.value()[static_cast<std::size_t>(i) * 4] >= 100.0);
        CHECK(n1.items.value()[static_cast<std::size_t>(i) * 4] < 200.0);
    }
    for (int i = 0; i < n2.count; ++i) {
        const double second = n2.items.value()[static_cast<std::size_t>(i) * 4 + 2];
        CHECK(second >= 1100.0);
        CHECK(second < 1200.0);
    }

    SECTION("all classes failing -> empty map") {
        InstanceFeatureSet<double> empty_t;
        CHECK(make_instance_pairs(os, empty_t, 8, rng).empty());
    }
    SECTION("three populated classes -> three entries") {
        InstanceFeatureSet<double> os2, ot2;
        for (int c = 1; c <= 3; ++c) {
            os2.by_class.emplace(c, tagged_rows(3, 2, c * 100.0));
            ot2.by_class.emplace(c, tagged_rows(2, 2, c * 1000.0));
        }
        CHECK(make_instance_pairs(os2, ot2, 4, rng).size() == 3);
    }
}

TEST_CASE("instance_roi_sample keeps exactly the above-threshold proposals") {
    std::vector<LabeledBox> gt = {{Box(0, 0, 10, 14), 2}, {Box(50, 50, 80, 80), 1}};

    SECTION("worked examples") {
        std::vector<Proposal> props = {
            {Box(0, 0, 10, 10), 0.9},   // IOU 10/14 ~ 0.714 vs gt0 -> kept as class 2
            {Box(0, 0, 10, 24), 0.8},   // IOU 10/24 < 0.7 -> dropped
            {Box(50, 50, 80, 80), 0.7}, // exact match -> kept as class 1
        };
        const auto rois = instance_roi_sample(props, gt, 0.7, /*use_proposals=*/true, /*append_gt=*/false);
        REQUIRE(rois.count(2) == 1);
        CHECK(rois.at(2).size() == 1);
        REQUIRE(rois.count(1) == 1);
        CHECK(rois.at(1).size() == 1);
    }
    SECTION("GT boxes are appended for their own class") {
        const auto rois = instance_roi_sample({}, gt, 0.7);
        REQUIRE(rois.count(1) == 1);
        REQUIRE(rois.count(2) == 1);
        CHECK(rois.at(1)[0] == gt[1].box);
    }
    SECTION("brute-force agreement on random instances") {
        Rng rng(31);
        for (int trial = 0; trial < 50; ++trial) {
            std::vector<Proposal> props;
            for (int i = 0; i < 30; ++i) {
                const double x = rng.uniform_real(0, 80), y = rng.uniform_real(0, 80);
                props.push_back({Box(x, y, x + rng.uniform_real(4, 40), y + rng.uniform_real(4, 40)), 0.5});
            }
            const auto rois = instance_roi_sample(props, gt, 0.7, true, false);
            std::size_t kept = 0;
            for (const auto& [cls, boxes] : rois) kept += boxes.size();
            std::size_t expect = 0;
            for (const auto& p : props) {
                double best = 0;
                for (const auto& g : gt) best = std::max(best, iou(p.box, g.box));
                if (best >= 0.7) ++expect;
            }
            CHECK(kept == expect);
        }
    }
    SECTION("threshold must exceed 0.5") {
        CHECK_THROWS_AS(instance_roi_sample({}, gt, 0.5), std::invalid_argument);
    }
}

TEST_CASE("extract_instance_features groups fixed-length vectors by class") {
    Rng rng(41);
    DetectorConfig cfg;
    cfg.backbone_channels = {8, 8, 12, 16};
    cfg.head_hidden = 24;
    auto model = DetectorModel<double>::init(cfg, rng);
    Image img(64, 64);
    for (auto& v : img.rgb) v = static_cast<float>(rng.uniform_real(0, 1));
    GraphParams<double> g;
    FeatureMap<double> fm = backbone_forward(model, g, img);

    std::map<int, std::vector<Box>> rois;
    rois[2] = {Box(5, 5, 30, 30), Box(10, 10, 40, 44), Box(5, 5, 30, 30)};
    const auto feats = extract_instance_features(model, g, fm, rois);
    REQUIRE(feats.by_class.count(2) == 1);
    const auto& block = feats.by_class.at(2).value();
    REQUIRE(block.shape == std::vector<int>{3, 24});
    // identical ROIs produce identical vectors
    for (int d = 0; d < 24; ++d) {
        CHECK(block[static_cast<std::size_t>(0) * 24 + d] == block[static_cast<std::size_t>(2) * 24 + d]);
    }
    SECTION("empty rois -> empty set") {
        CHECK(extract_instance_features(model, g, fm, {}).by_class.empty());
    }
}
