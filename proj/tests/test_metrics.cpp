#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "oracles.hpp"
#include "protocase/metrics.hpp"
#include "protocase/rng.hpp"

using namespace protocase;
namespace m = protocase::metrics;

TEST_CASE("auroc fixtures", "[metrics]") {
    SECTION("the 0.75 fixture") {
        m::ScoredLabels d{{0.1, 0.4, 0.35, 0.8}, {0, 0, 1, 1}};
        REQUIRE(m::auroc(d) == 0.75);
    }
    SECTION("perfect separation") {
        m::ScoredLabels d{{0.1, 0.2, 0.8, 0.9}, {0, 0, 1, 1}};
        REQUIRE(m::auroc(d) == 1.0);
    }
    SECTION("all ties") {
        m::ScoredLabels d{{0.5, 0.5, 0.5, 0.5}, {0, 1, 0, 1}};
        REQUIRE(m::auroc(d) == 0.5);
    }
    SECTION("degenerate labels rejected") {
        m::ScoredLabels d{{0.5, 0.6}, {1, 1}};
        REQUIRE_THROWS_AS(m::auroc(d), std::invalid_argument);
    }
}

TEST_CASE("auroc equals the pairwise oracle exactly on random data", "[metrics]") {
    Rng rng(71);
    for (int trial = 0; trial < 100; ++trial) {
        const int n = 6 + static_cast<int>(rng.uniform_int(40));
        m::ScoredLabels d;
        for (int i = 0; i < n; ++i) {
            // quantized scores so ties actually occur
            d.scores.push_back(std::floor(rng.uniform(0.0, 8.0)) / 8.0);
            d.labels.push_back(rng.bernoulli(0.5) ? 1 : 0);
        }
        bool has0 = false, has1 = false;
        for (int y : d.labels) (y ? has1 : has0) = true;
        if (!has0) d.labels[0] = 0;
        if (!has1) d.labels[1] = 1;
        const double lib = m::auroc(d);
        REQUIRE(lib == oracles::auroc(d.scores, d.labels));
        REQUIRE(m::delong_ci(d).auroc == lib);
    }
}

TEST_CASE("auroc invariances", "[metrics]") {
    Rng rng(72);
    for (int trial = 0; trial < 50; ++trial) {
        const int n = 8 + static_cast<int>(rng.uniform_int(30));
        m::ScoredLabels d;
        for (int i = 0; i < n; ++i) {
            d.scores.push_back(rng.uniform01());  // continuous: tie-free a.s.
            d.labels.push_back(i % 2);
        }
        // complement rule for tie-free scores
        m::ScoredLabels flipped = d;
        for (auto& y : flipped.labels) y = 1 - y;
        REQUIRE_THAT(m::auroc(d), Catch::Matchers::WithinAbs(1.0 - m::auroc(flipped), 1e-12));
        // invariance under strictly increasing transforms
        m::ScoredLabels warped = d;
        for (auto& s : warped.scores) s = std::exp(3.0 * s) + 1.0;
        REQUIRE(m::auroc(warped) == m::auroc(d));
    }
}

TEST_CASE("delong interval basics", "[metrics]") {
    SECTION("perfect separation clips the upper bound to 1") {
        m::ScoredLabels d;
        for (int i = 0; i < 40; ++i) {
            d.scores.push_back(i < 20 ? 0.1 + 0.001 * i : 0.9 + 0.001 * i);
            d.labels.push_back(i < 20 ? 0 : 1);
        }
        const auto ci = m::delong_ci(d);
        REQUIRE(ci.auroc == 1.0);
        REQUIRE(ci.hi == 1.0);
        REQUIRE(ci.degenerate);  // no discordant pairs -> zero variance
    }
    SECTION("interval contains the point estimate") {
        Rng rng(73);
        for (int trial = 0; trial < 30; ++trial) {
            m::ScoredLabels d;
            for (int i = 0; i < 50; ++i) {
                d.scores.push_back(rng.normal(i % 2 == 1 ? 0.8 : 0.0, 1.0));
                d.labels.push_back(i % 2);
            }
            const auto ci = m::delong_ci(d);
            REQUIRE(ci.lo <= ci.auroc);
            REQUIRE(ci.hi >= ci.auroc);
            REQUIRE(ci.lo >= 0.0);
            REQUIRE(ci.hi <= 1.0);
        }
    }
}

TEST_CASE("delong coverage on the binormal model", "[metrics]") {
    // scores ~ N(0,1) negatives, N(mu,1) positives; true AUC = Phi(mu/sqrt 2)
    const double mu = 1.0;
    const double true_auc = 0.5 * std::erfc(-(mu / std::sqrt(2.0)) / std::sqrt(2.0));
    Rng rng(74);
    int covered = 0;
    const int sims = 200;
    for (int s = 0; s < sims; ++s) {
        m::ScoredLabels d;
        for (int i = 0; i < 60; ++i) {
            d.scores.push_back(rng.normal(0.0, 1.0));
            d.labels.push_back(0);
        }
        for (int i = 0; i < 60; ++i) {
            d.scores.push_back(rng.normal(mu, 1.0));
            d.labels.push_back(1);
        }
        const auto ci = m::delong_ci(d);
        if (ci.lo <= true_auc && true_auc <= ci.hi) ++covered;
    }
    const double coverage = static_cast<double>(covered) / sims;
    INFO("coverage " << coverage);
    REQUIRE(coverage >= 0.90);
    REQUIRE(coverage <= 0.99);
}

TEST_CASE("normal quantile anchor", "[metrics]") {
    CHECK_THAT(m::normal_quantile(0.975),
               Catch::Matchers::WithinAbs(1.9599639845400536, 1e-6));
    CHECK_THAT(m::normal_quantile(0.5), Catch::Matchers::WithinAbs(0.0, 1e-12));
}

TEST_CASE("cohen kappa", "[metrics]") {
    SECTION("perfect agreement") {
        REQUIRE(m::cohen_kappa({0, 1, 2, 1, 0}, {0, 1, 2, 1, 0}) == 1.0);
    }
    SECTION("the 1/3 confusion fixture") {
        // confusion [[2,1],[1,2]]: p_o = 2/3, p_e = 1/2
        const std::vector<int> pred = {0, 0, 0, 1, 1, 1};
        const std::vector<int> truth = {0, 0, 1, 0, 1, 1};
        REQUIRE_THAT(m::cohen_kappa(pred, truth),
                     Catch::Matchers::WithinAbs(1.0 / 3.0, 1e-12));
    }
    SECTION("single shared label is undefined") {
        REQUIRE_THROWS_AS(m::cohen_kappa({0, 0, 0}, {0, 0, 0}), std::invalid_argument);
    }
    SECTION("length mismatch rejected") {
        REQUIRE_THROWS_AS(m::cohen_kappa({0, 1}, {0}), std::invalid_argument);
    }
}

TEST_CASE("bootstrap is reproducible and sane", "[metrics]") {
    Rng rng(75);
    std::vector<double> data(80);
    for (auto& v : data) v = rng.normal(5.0, 1.0);
    auto mean_stat = [&](const std::vector<int>& idx) -> std::optional<double> {
        double s = 0.0;
        for (int i : idx) s += data[static_cast<std::size_t>(i)];
        return s / static_cast<double>(idx.size());
    };
    const auto a = m::bootstrap_ci(80, mean_stat, 5000, 0.95, 42);
    const auto b = m::bootstrap_ci(80, mean_stat, 5000, 0.95, 42);
    REQUIRE(a.lo == b.lo);
    REQUIRE(a.hi == b.hi);
    REQUIRE(a.n_valid == 5000);
    REQUIRE(a.lo < 5.0);
    REQUIRE(a.hi > 5.0);
    REQUIRE(a.hi - a.lo < 1.0);
    const auto c = m::bootstrap_ci(80, mean_stat, 5000, 0.95, 43);
    REQUIRE(a.lo != c.lo);  // different stream, different resamples
}

TEST_CASE("threshold_top_tau selection", "[metrics]") {
    SECTION("tau 0.95 on 400 pixels selects exactly 20") {
        Rng rng(76);
        Image map(20, 20);
        for (auto& v : map.pix) v = rng.uniform01();
        const Image sel = m::threshold_top_tau(map, 0.95);
        double count = 0.0;
        for (double v : sel.pix) count += v;
        REQUIRE(count == 20.0);
    }
    SECTION("constant map takes the first block in row-major order") {
        Image map(4, 4, 0.7);
        const Image sel = m::threshold_top_tau(map, 0.75);  // ceil(0.25*16) = 4
        for (std::size_t i = 0; i < 16; ++i) REQUIRE(sel.pix[i] == (i < 4 ? 1.0 : 0.0));
    }
    SECTION("distinct values match a sort oracle") {
        Image map(4, 4);
        for (std::size_t i = 0; i < 16; ++i) map.pix[i] = static_cast<double>((i * 7) % 16);
        const Image sel = m::threshold_top_tau(map, 0.75);
        for (std::size_t i = 0; i < 16; ++i)
            REQUIRE(sel.pix[i] == (map.pix[i] >= 12.0 ? 1.0 : 0.0));
    }
    REQUIRE_THROWS_AS(m::threshold_top_tau(Image(2, 2), 1.0), std::invalid_argument);
}

TEST_CASE("activation precision", "[metrics]") {
    SECTION("containment gives 1.0") {
        Image map(4, 4, 0.0);
        map.at(1, 1) = 5.0;
        map.at(1, 2) = 4.0;
        map.at(2, 1) = 3.0;
        map.at(2, 2) = 2.0;
        Image mask(4, 4, 1.0);
        mask.at(1, 1) = mask.at(1, 2) = mask.at(2, 1) = mask.at(2, 2) = 0.0;
        REQUIRE(m::activation_precision(map, mask, 0.75) == 1.0);
    }
    SECTION("half-in half-out gives 0.5") {
        Image map(4, 4, 0.0);
        map.at(0, 0) = 5.0;
        map.at(0, 1) = 4.0;
        map.at(3, 2) = 3.0;
        map.at(3, 3) = 2.0;
        Image mask(4, 4, 1.0);
        mask.at(0, 0) = 0.0;
        mask.at(0, 1) = 0.0;
        REQUIRE(m::activation_precision(map, mask, 0.75) == 0.5);
    }
    SECTION("monotone as the relevant region grows") {
        Rng rng(77);
        Image map(6, 6);
        for (auto& v : map.pix) v = rng.uniform01();
        Image mask(6, 6, 1.0);
        double prev = m::activation_precision(map, mask, 0.9);
        for (std::size_t i = 0; i < mask.size(); ++i) {
            mask.pix[i] = 0.0;  // grow relevance pixel by pixel
            const double ap = m::activation_precision(map, mask, 0.9);
            REQUIRE(ap >= prev);
            REQUIRE(ap >= 0.0);
            REQUIRE(ap <= 1.0);
            prev = ap;
        }
        REQUIRE(prev == 1.0);
    }
    SECTION("dimension mismatch rejected") {
        REQUIRE_THROWS_AS(m::activation_precision(Image(3, 3), Image(4, 4)),
                          std::invalid_argument);
    }
}

TEST_CASE("image-weighted auroc", "[metrics]") {
    // three classes with distinct counts; hand-weighted combination
    std::vector<std::vector<double>> probs;
    std::vector<int> labels;
    Rng rng(78);
    for (int t = 0; t < 3; ++t) {
        const int count = 5 + 3 * t;
        for (int i = 0; i < count; ++i) {
            std::vector<double> p(3);
            for (int c = 0; c < 3; ++c) p[c] = rng.uniform01() + (c == t ? 0.8 : 0.0);
            probs.push_back(p);
            labels.push_back(t);
        }
    }
    const auto wa = m::image_weighted_auroc(probs, labels, 3);
    double manual = 0.0, wsum = 0.0;
    for (int t = 0; t < 3; ++t) {
        manual += wa.class_counts[t] * wa.per_class[t];
        wsum += wa.class_counts[t];
    }
    REQUIRE_THAT(wa.weighted, Catch::Matchers::WithinAbs(manual / wsum, 1e-15));
    REQUIRE(wa.class_counts == std::vector<int>{5, 8, 11});
}
