#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "oracles.hpp"
#include "protocase/network.hpp"
#include "protocase/trainer.hpp"

using namespace protocase;

namespace {

ModelState micro_model(std::uint64_t seed = 3, int input = 16) {
    Rng rng(seed);
    ModelConfig mc;
    mc.extractor = ExtractorConfig::micro();
    mc.input_h = mc.input_w = input;
    mc.prototypes_per_type = 2;
    return init_model(mc, rng);
}

Image random_image(Rng& rng, int h, int w) {
    Image im(h, w);
    for (auto& v : im.pix) v = rng.uniform01();
    return im;
}

}  // namespace

TEST_CASE("feature geometry of the desk default", "[network]") {
    const auto geom = feature_geometry(ExtractorConfig::desk_default(), 64, 64);
    CHECK(geom.channels == 64);
    CHECK(geom.h == 16);
    CHECK(geom.w == 16);
}

TEST_CASE("extract_features is sigmoid-bounded and deterministic", "[network]") {
    auto st = micro_model();
    Rng rng(5);
    const auto im = random_image(rng, 16, 16);
    ad::Tape t(false);
    auto f1 = extract_features(t, st, image_to_tensor(im));
    auto f2 = extract_features(t, st, image_to_tensor(im));
    REQUIRE(f1->shape == std::vector<int>{8, 8, 8});
    for (double v : f1->data) {
        REQUIRE(v > 0.0);
        REQUIRE(v < 1.0);
    }
    REQUIRE(f1->data == f2->data);

    SECTION("size mismatch rejected") {
        const auto wrong = random_image(rng, 12, 16);
        REQUIRE_THROWS_AS(extract_features(t, st, image_to_tensor(wrong)), std::invalid_argument);
    }
}

TEST_CASE("pool k follows the top-c% rule", "[network]") {
    auto st = micro_model();
    // micro geometry 8x8 = 64 patches at 5% -> floor(3.2) = 3
    REQUIRE(st.pool_k() == 3);
    st.pool_fraction = 1.0 / 64.0;
    REQUIRE(st.pool_k() == 1);
    st.pool_fraction = 1e-6;
    REQUIRE_THROWS_AS(st.pool_k(), ConfigError);
}

TEST_CASE("similarity map channel mismatch rejected", "[network]") {
    auto st = micro_model();
    ad::Tape t(false);
    auto feat = ad::make_tensor({8, 2, 2});
    auto bad = ad::make_tensor({5});
    REQUIRE_THROWS_AS(ad::prototype_distance_map(t, feat, bad), std::invalid_argument);
}

TEST_CASE("margin head with the +1/-1 initialization", "[network]") {
    Rng rng(1);
    ModelConfig mc;
    mc.extractor = ExtractorConfig::micro();
    mc.input_h = mc.input_w = 16;
    mc.prototypes_per_type = 5;
    auto st = init_model(mc, rng);
    const int m = st.num_prototypes();
    REQUIRE(m == 15);

    SECTION("each row has +1 on its type and -1 elsewhere") {
        for (int t = 0; t < kNumMarginTypes; ++t) {
            int plus = 0, minus = 0;
            for (int j = 0; j < m; ++j) {
                const double w = st.h1->data[static_cast<std::size_t>(t) * m + j];
                if (w == 1.0) ++plus;
                else if (w == -1.0) ++minus;
            }
            CHECK(plus == 5);
            CHECK(minus == 10);
        }
    }
    SECTION("equal scores c over 5/5/5 prototypes give logits -5c") {
        const double c = 0.73;
        ad::Tape t(false);
        auto scores = ad::make_tensor({m}, std::vector<double>(m, c));
        auto cols = st.active_prototypes();
        auto logits = margin_logits(t, st, scores, cols);
        for (int r = 0; r < kNumMarginTypes; ++r)
            CHECK_THAT(logits->data[r], Catch::Matchers::WithinAbs(-5.0 * c, 1e-12));
    }
    SECTION("zero scores give zero logits") {
        ad::Tape t(false);
        auto scores = ad::make_tensor({m}, std::vector<double>(m, 0.0));
        auto logits = margin_logits(t, st, scores, st.active_prototypes());
        for (double v : logits->data) CHECK(v == 0.0);
    }
}

TEST_CASE("malignancy head reproduces the fitted linear model", "[network]") {
    ModelState st;
    st.h2_weights[0] = -16.0;
    st.h2_weights[1] = -10.0;
    st.h2_weights[2] = 6.0;
    st.h2_shift = 155.0;
    st.h2_scale = 100.0;

    auto out1 = malignancy(st, {10.0, 0.0, 0.0});
    CHECK(out1.score == -160.0);
    CHECK_THAT(out1.probability, Catch::Matchers::WithinAbs(0.041091278200465015, 1e-14));

    auto out2 = malignancy(st, {0.0, 0.0, 10.0});
    CHECK(out2.score == 60.0);
    CHECK_THAT(out2.probability, Catch::Matchers::WithinAbs(0.27888482197713693, 1e-14));

    auto out3 = malignancy(st, {0.0, 0.0, 0.0});
    CHECK(out3.score == 0.0);
    CHECK_THAT(out3.probability, Catch::Matchers::WithinAbs(0.1750862681640398, 1e-14));
}

TEST_CASE("forward composition invariants", "[network]") {
    auto st = micro_model(11);
    Rng rng(13);
    const auto im = random_image(rng, 16, 16);
    const auto fr = forward(st, im);

    SECTION("margin probabilities sum to one") {
        double s = 0.0;
        for (double p : fr.margin_probs) s += p;
        REQUIRE_THAT(s, Catch::Matchers::WithinAbs(1.0, 1e-12));
    }
    SECTION("similarity maps are finite and positive, scores decrease under distance inflation") {
        for (const auto& maps : fr.maps)
            for (double v : maps.sim->data) {
                REQUIRE(std::isfinite(v));
                REQUIRE(v > 0.0);
            }
        // pushing a prototype far away strictly lowers its pooled score
        auto far = clone(st);
        for (auto& v : far.prototypes[0].vec->data) v += 50.0;
        const auto fr_far = forward(far, im);
        REQUIRE(fr_far.scores->data[0] < fr.scores->data[0]);
    }
    SECTION("pruned prototypes contribute no score and no h1 column") {
        auto pruned = clone(st);
        pruned.prototypes[1].active = false;
        const auto fr_p = forward(pruned, im);
        REQUIRE(fr_p.active_idx.size() == fr.active_idx.size() - 1);
        // removing a column changes logits by exactly that column's term
        const int m = st.num_prototypes();
        for (int t = 0; t < kNumMarginTypes; ++t) {
            const double manual =
                fr.logits->data[t] - st.h1->data[static_cast<std::size_t>(t) * m + 1] * fr.scores->data[1];
            CHECK_THAT(fr_p.logits->data[t], Catch::Matchers::WithinAbs(manual, 1e-12));
        }
    }
    SECTION("permuting prototypes with matching h1 columns leaves outputs unchanged") {
        auto perm = clone(st);
        const int m = st.num_prototypes();
        std::vector<int> order(m);
        for (int j = 0; j < m; ++j) order[j] = (j + 3) % m;
        std::vector<Prototype> protos;
        auto h1 = ad::make_tensor({kNumMarginTypes, m}, true);
        for (int j = 0; j < m; ++j) {
            protos.push_back(perm.prototypes[order[j]]);
            for (int t = 0; t < kNumMarginTypes; ++t)
                h1->data[static_cast<std::size_t>(t) * m + j] =
                    st.h1->data[static_cast<std::size_t>(t) * m + order[j]];
        }
        perm.prototypes = std::move(protos);
        perm.h1 = h1;
        const auto fr_perm = forward(perm, im);
        for (int t = 0; t < kNumMarginTypes; ++t)
            CHECK_THAT(fr_perm.logits->data[t],
                       Catch::Matchers::WithinAbs(fr.logits->data[t], 1e-12));
        CHECK_THAT(fr_perm.mal.probability,
                   Catch::Matchers::WithinAbs(fr.mal.probability, 1e-12));
    }
}

TEST_CASE("pool_topk equals the sort oracle on random similarity maps", "[network]") {
    Rng rng(40);
    ad::Tape t(false);
    for (int trial = 0; trial < 1000; ++trial) {
        const int n = 6 + static_cast<int>(rng.uniform_int(58));
        std::vector<double> vals(static_cast<std::size_t>(n));
        for (auto& v : vals) v = rng.uniform(0.0, 9.3);
        const int k = 1 + static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(n)));
        auto m = ad::make_tensor({n}, vals);
        REQUIRE(ad::scalar_value(pool_topk(t, m, k)) == oracles::topk(vals, k));
    }
}

TEST_CASE("model clone shares no storage", "[network]") {
    auto st = micro_model();
    auto copy = clone(st);
    copy.prototypes[0].vec->data[0] += 1.0;
    copy.h1->data[0] += 1.0;
    copy.extractor[0].weight->data[0] += 1.0;
    REQUIRE(st.prototypes[0].vec->data[0] != copy.prototypes[0].vec->data[0]);
    REQUIRE(st.h1->data[0] != copy.h1->data[0]);
    REQUIRE(st.extractor[0].weight->data[0] != copy.extractor[0].weight->data[0]);
}
